//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its PASS/FAIL line even when the others succeed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plc_automata::automaton::{
    build_from_predictions, compare, Automaton, State, StateId, Transition,
};
use plc_automata::lstm::{
    adam_step, adam_update, gradient_check, sequence_loss, softmax, AdamConfig, AdamState,
    LstmParams, Model, TrainConfig, TrainHistory,
};
use plc_automata::otala::{learn_otala, OtalaError, PositionMap};
use plc_automata::pipeline::{self, PipelineConfig, PipelineOutput};
use plc_automata::plant_sim::{simulate, DwellProfile, NoiseModel, SimConfig};
use plc_automata::trace::{
    dedup_consecutive, observations, parse_trace, render_trace, segment_cycles, LabeledTrace,
    PositionLabel, Sample, SensorVector, TraceFile,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed < limit,
        format!("took {elapsed:.2?}, limit {limit:?}"),
    )
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> (Vec<SensorVector>, Vec<PositionLabel>) {
    let seq = (0..len)
        .map(|_| SensorVector::from_mask(rng.random_range(0..2048)))
        .collect();
    let labels = (0..len)
        .map(|_| PositionLabel::ALL[rng.random_range(0..5)])
        .collect();
    (seq, labels)
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in [42u64, 43, 44] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (seq, labels) = random_sequence(&mut rng, 12);
        let params = LstmParams::random(8, 0.5, 1.0, seed);
        let err = gradient_check(&seq, &labels, &params, 1e-5).map_err(|e| e.to_string())?;
        check(
            err < 1e-4,
            format!("seed {seed}: max relative error {err:e}"),
        )?;
        worst = worst.max(err);
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "max relative error {worst:.2e} over 3 seeds in {:.2?}",
        start.elapsed()
    ))
}

fn criterion_2() -> Outcome {
    let labels: Vec<_> = (0..50).map(|k| PositionLabel::ALL[k % 5]).collect();
    let uniform = vec![[0.2; 5]; labels.len()];
    let loss = sequence_loss(&uniform, &labels).map_err(|e| e.to_string())?;
    check(
        (loss - 5f64.ln()).abs() <= 1e-9,
        format!("uniform loss {loss}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let z: [f64; 5] = std::array::from_fn(|_| rng.random_range(-30.0..30.0));
        let p = softmax(&z);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    check(worst <= 1e-12, format!("softmax row sum off by {worst:e}"))?;
    Ok(format!(
        "uniform loss {loss:.10}, worst softmax row-sum error {worst:.1e}"
    ))
}

fn criterion_3() -> Outcome {
    let (mut theta, mut m, mut v) = ([0.0], [0.0], [0.0]);
    adam_update(
        &mut theta,
        &[1.0],
        &mut m,
        &mut v,
        1,
        &AdamConfig::default(),
    );
    let expected = -0.001 / (1.0 + 1e-8);
    check(
        (theta[0] - expected).abs() <= 1e-12,
        format!("first step {}", theta[0]),
    )?;

    let mut params = LstmParams::random(10, 0.08, 1.0, 3);
    let before = params.clone();
    let mut state = AdamState::new(10);
    adam_step(
        &mut params,
        &LstmParams::zeros(10),
        &mut state,
        &AdamConfig::default(),
    );
    let identical = params
        .tensors()
        .iter()
        .zip(before.tensors())
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    check(identical, "zero gradient changed parameters")?;
    Ok(format!(
        "first step {:.12}, zero-gradient step bit-identical",
        theta[0]
    ))
}

fn single_cycle(dwell: u32, terminal_start: bool) -> LabeledTrace {
    simulate(&SimConfig {
        cycles: 1,
        dwell: DwellProfile::uniform(dwell).unwrap(),
        terminal_start,
        ..SimConfig::default()
    })
    .unwrap()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let pmap = PositionMap::canonical();
    let trace = single_cycle(1, true);
    let a = learn_otala(&observations(trace.sensors()), &pmap).map_err(|e| e.to_string())?;
    check(
        a.states().len() == 20,
        format!("{} states", a.states().len()),
    )?;
    check(
        a.transitions().len() == 20,
        format!("{} transitions", a.transitions().len()),
    )?;
    check(a.closed(), "not closed")?;

    let tripled: Vec<SensorVector> = trace
        .sensors()
        .into_iter()
        .flat_map(|s| [s, s, s])
        .collect();
    let b = learn_otala(&observations(tripled), &pmap).map_err(|e| e.to_string())?;
    check(a == b, "tripled samples learned a different automaton")?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "20 states, 20 transitions, closed, 3x dedup identical in {:.2?}",
        start.elapsed()
    ))
}

fn full_size_run() -> Result<(PipelineOutput, Duration), String> {
    let trace = simulate(&SimConfig {
        noise: NoiseModel {
            bit_flip_prob: 0.01,
            ..NoiseModel::default()
        },
        ..SimConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out =
        pipeline::run(&trace, &PipelineConfig::default(), |_, _| {}).map_err(|e| e.to_string())?;
    Ok((out, start.elapsed()))
}

fn criterion_5(out: &PipelineOutput, elapsed: Duration) -> Outcome {
    let h = out.history();
    check(out.cycle_count == 51, format!("{} cycles", out.cycle_count))?;
    check(
        out.train_count == 40 && out.test_cycles.len() == 11,
        format!("split {}/{}", out.train_count, out.test_cycles.len()),
    )?;
    check(
        out.test_accuracy >= 0.90,
        format!("pooled test accuracy {:.4}", out.test_accuracy),
    )?;
    let at_500 = h.train_accuracy[500];
    check(
        at_500 >= 0.95,
        format!("training accuracy {at_500:.4} at iteration 500"),
    )?;
    check(
        out.otala_automaton.closed() && out.lstm_automaton.closed(),
        "an automaton is not closed",
    )?;
    within(elapsed, Duration::from_secs(300))?;
    Ok(format!(
        "test accuracy {:.4}, training accuracy {:.4} at iteration 500, loss {:.4} -> {:.4}, both automata closed, {:.1?}",
        out.test_accuracy,
        at_500,
        h.loss[0],
        h.loss[h.loss.len() - 1],
        elapsed
    ))
}

fn criterion_6() -> Outcome {
    let pmap = PositionMap::canonical();
    let truncated = single_cycle(1, false);
    let otala = match learn_otala(&observations(truncated.sensors()), &pmap) {
        Err(OtalaError::IncompleteCycle { partial }) => partial,
        Ok(_) => return Err("truncated cycle closed".into()),
        Err(e) => return Err(e.to_string()),
    };
    check(!otala.closed(), "closed flag set")?;

    let full = single_cycle(1, true);
    let lstm_side =
        build_from_predictions(&full.sensors(), &full.labels()).map_err(|e| e.to_string())?;
    let report = compare(&otala, &lstm_side);
    check(
        report
            .missing_position_transitions_a
            .contains(&(PositionLabel::D, PositionLabel::A)),
        format!("missing list {:?}", report.missing_position_transitions_a),
    )?;
    check(
        report.missing_position_transitions_b.is_empty(),
        "full-cycle automaton misses a transition",
    )?;
    Ok(format!(
        "closed=false, missing {:?} (full cycle: none)",
        report.missing_position_transitions_a
    ))
}

fn criterion_7(first: &PipelineOutput) -> Outcome {
    let (second, _) = full_size_run()?;
    let d1 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a1 = first
        .write_artifacts(d1.path())
        .map_err(|e| e.to_string())?;
    let a2 = second
        .write_artifacts(d2.path())
        .map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (p1, p2) in a1.all().iter().zip(a2.all()) {
        let b1 = std::fs::read(p1).map_err(|e| e.to_string())?;
        let b2 = std::fs::read(p2).map_err(|e| e.to_string())?;
        check(b1 == b2, format!("{} differs between runs", p1.display()))?;
        compared += 1;
    }
    Ok(format!(
        "{compared} artifact files byte-identical across two runs"
    ))
}

fn arb_sensor() -> impl Strategy<Value = SensorVector> {
    (0u16..2048).prop_map(SensorVector::from_mask)
}

fn arb_label() -> impl Strategy<Value = PositionLabel> {
    (0usize..5).prop_map(|i| PositionLabel::ALL[i])
}

fn arb_automaton() -> impl Strategy<Value = Automaton> {
    (
        1usize..25,
        proptest::collection::vec((arb_sensor(), proptest::option::of(arb_label())), 25),
        any::<bool>(),
    )
        .prop_map(|(n, outs, closed)| {
            let states = (0..n)
                .map(|i| State {
                    id: StateId(i + 1),
                    output: outs[i].0,
                    label: outs[i].1,
                })
                .collect();
            let mut transitions: Vec<_> = (1..n)
                .map(|i| Transition {
                    from: StateId(i),
                    to: StateId(i + 1),
                })
                .collect();
            if closed {
                transitions.push(Transition {
                    from: StateId(n),
                    to: StateId(1),
                });
            }
            Automaton::new(states, StateId(1), transitions).unwrap()
        })
}

fn criterion_8() -> Outcome {
    const CASES: u32 = 256;
    let run = |name: &str, r: Result<(), String>| r.map_err(|e| format!("{name}: {e}"));

    run(
        "dedup idempotence",
        runner(CASES)
            .run(&proptest::collection::vec(0u16..4, 0..60), |masks| {
                let obs = observations(masks.into_iter().map(SensorVector::from_mask));
                let once = dedup_consecutive(&obs);
                prop_assert_eq!(dedup_consecutive(&once), once.clone());
                prop_assert!(once.windows(2).all(|w| w[0].sensors != w[1].sensors));
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;

    run(
        "segmentation partition",
        runner(CASES)
            .run(&proptest::collection::vec(arb_label(), 0..120), |labels| {
                let trace = LabeledTrace::new(
                    labels
                        .iter()
                        .map(|&label| Sample {
                            sensors: SensorVector::default(),
                            label,
                        })
                        .collect(),
                );
                let cycles = segment_cycles(&trace);
                for w in cycles.windows(2) {
                    prop_assert_eq!(w[0].end_index, w[1].start_index);
                }
                for c in &cycles {
                    prop_assert_eq!(&c.samples[..], &trace.samples[c.start_index..c.end_index]);
                    prop_assert_eq!(c.samples[0].label, PositionLabel::A);
                }
                let covered: usize = cycles.iter().map(|c| c.len()).sum();
                match (cycles.first(), cycles.last()) {
                    (Some(f), Some(l)) => prop_assert_eq!(covered, l.end_index - f.start_index),
                    _ => prop_assert_eq!(covered, 0),
                }
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;

    run(
        "trace round-trip",
        runner(CASES)
            .run(
                &(
                    1u32..5000,
                    proptest::collection::vec((arb_sensor(), arb_label()), 1..40),
                ),
                |(period, rows)| {
                    let text = render_trace(period, rows.iter().map(|&(s, l)| (s, Some(l))));
                    match parse_trace(&text).unwrap() {
                        TraceFile::Labeled(t) => {
                            prop_assert_eq!(t.sampling_period_ms, period);
                            let back: Vec<_> =
                                t.samples.iter().map(|s| (s.sensors, s.label)).collect();
                            prop_assert_eq!(back, rows);
                        }
                        other => prop_assert!(false, "parsed as {:?}", other),
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    run(
        "automaton JSON round-trip",
        runner(CASES)
            .run(&arb_automaton(), |a| {
                prop_assert_eq!(Automaton::from_json(&a.to_json()).unwrap(), a);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;

    run(
        "model JSON round-trip",
        runner(CASES)
            .run(
                &(
                    1usize..6,
                    any::<u64>(),
                    proptest::collection::vec(0.0f64..3.0, 0..5),
                ),
                |(hidden, seed, loss)| {
                    let history = TrainHistory {
                        train_accuracy: loss.iter().map(|l| l / 3.0).collect(),
                        loss,
                        test_accuracy: Some(0.5),
                    };
                    let config = TrainConfig {
                        hidden,
                        seed,
                        ..TrainConfig::default()
                    };
                    let model =
                        Model::new(config, LstmParams::random(hidden, 0.08, 1.0, seed), history);
                    prop_assert_eq!(Model::from_json(&model.to_json()).unwrap(), model);
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    let pmap = PositionMap::canonical();
    let home = pmap.reading_of(PositionLabel::A).unwrap();
    run(
        "out-degree <= 1",
        runner(CASES)
            .run(
                &proptest::collection::vec((0u16..8, arb_label()), 1..60),
                |pairs| {
                    let sensors: Vec<_> = pairs
                        .iter()
                        .map(|&(m, _)| {
                            if m == 0 {
                                home
                            } else {
                                SensorVector::from_mask(m)
                            }
                        })
                        .collect();
                    let labels: Vec<_> = pairs.iter().map(|&(_, l)| l).collect();
                    let from_preds = build_from_predictions(&sensors, &labels).unwrap();
                    let otala = match learn_otala(&observations(sensors), &pmap) {
                        Ok(a) | Err(OtalaError::IncompleteCycle { partial: a }) => a,
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    };
                    for a in [&from_preds, &otala] {
                        prop_assert!(a.states().iter().all(|s| a.out_degree(s.id) <= 1));
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    run(
        "softmax shift invariance",
        runner(CASES)
            .run(
                &(proptest::array::uniform5(-40.0f64..40.0), -100.0f64..100.0),
                |(z, shift)| {
                    let p = softmax(&z);
                    let q = softmax(&z.map(|v| v + shift));
                    for k in 0..5 {
                        prop_assert!((p[k] - q[k]).abs() < 1e-12);
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    Ok(format!(
        "dedup, segmentation, trace/automaton/model round-trips, out-degree, softmax shift: {CASES} cases each"
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "gradient oracle", guarded(criterion_1)),
        (2, "analytic loss anchors", guarded(criterion_2)),
        (3, "Adam oracle", guarded(criterion_3)),
        (4, "OTALA structure", guarded(criterion_4)),
    ];
    match catch_unwind(AssertUnwindSafe(full_size_run)) {
        Ok(Ok((out, elapsed))) => {
            results.push((
                5,
                "full-size accuracy",
                guarded(|| criterion_5(&out, elapsed)),
            ));
            results.push((6, "cycle-closure diagnosis", guarded(criterion_6)));
            results.push((7, "determinism", guarded(|| criterion_7(&out))));
        }
        Ok(Err(e)) => {
            results.push((5, "full-size accuracy", Err(e.clone())));
            results.push((6, "cycle-closure diagnosis", guarded(criterion_6)));
            results.push((7, "determinism", Err(format!("pipeline failed: {e}"))));
        }
        Err(_) => {
            results.push((5, "full-size accuracy", Err("pipeline panicked".into())));
            results.push((6, "cycle-closure diagnosis", guarded(criterion_6)));
            results.push((7, "determinism", Err("pipeline panicked".into())));
        }
    }
    results.push((8, "property suites", guarded(criterion_8)));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
