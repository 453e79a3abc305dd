use plc_automata::lstm::{self, TrainConfig};
use plc_automata::plant_sim::{simulate, SimConfig};
use plc_automata::trace::{segment_cycles, split_train_test};

#[test]
fn noiseless_default_training_witnesses() {
    let trace = simulate(&SimConfig::default()).unwrap();
    let (train, test) = split_train_test(&segment_cycles(&trace), 0.8).unwrap();
    let cfg = TrainConfig {
        epochs: 501,
        seed: 5,
        ..TrainConfig::default()
    };
    let (params, history) = lstm::train(&train, &cfg).unwrap();
    assert_eq!(history.iterations(), 501);
    assert!(
        (history.loss[0] - 5f64.ln()).abs() < 0.2,
        "initial loss {}",
        history.loss[0]
    );
    assert!(history.loss[500] < history.loss[0]);

    let (params_again, history_again) = lstm::train(&train, &cfg).unwrap();
    assert_eq!(history, history_again);
    assert_eq!(params, params_again);

    let pred = lstm::classify_sequence(&test[0].sensors(), &params).unwrap();
    assert!(lstm::accuracy(&pred, &test[0].labels()).unwrap() >= 0.90);
}
