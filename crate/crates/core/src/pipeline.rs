//! End-to-end run: segment, split, train, classify, build both automata,
//! compare and write artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::automaton::{
    build_from_predictions, check_cycle_closure, compare, Automaton, ComparisonReport,
};
use crate::error::Error;
use crate::lstm::{self, BatchEval, Execution, LabeledSequence, Model, TrainConfig, TrainHistory};
use crate::otala::{self, OtalaError, PositionMap};
use crate::trace::{
    observations, segment_cycles, split_train_test, Cycle, LabeledTrace, PositionLabel,
    SensorVector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Segment,
    Split,
    Validate,
    Train,
    Classify,
    LstmAutomaton,
    Otala,
    Compare,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Segment => "segment",
            Stage::Split => "split",
            Stage::Validate => "validate",
            Stage::Train => "train",
            Stage::Classify => "classify",
            Stage::LstmAutomaton => "lstm-automaton",
            Stage::Otala => "otala",
            Stage::Compare => "compare",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub train: TrainConfig,
    /// Cycle index OTALA learns from; `None` learns every cycle and keeps the
    /// most frequent result.
    pub otala_cycle: Option<usize>,
    pub position_map: PositionMap,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_fraction: 0.8,
            train: TrainConfig::default(),
            otala_cycle: None,
            position_map: PositionMap::canonical(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CycleResult {
    pub start_index: usize,
    pub predicted: Vec<PositionLabel>,
    pub truth: Vec<PositionLabel>,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub cycle_count: usize,
    pub train_count: usize,
    pub model: Model,
    pub test_accuracy: f64,
    pub test_cycles: Vec<CycleResult>,
    pub lstm_automaton: Automaton,
    pub otala_automaton: Automaton,
    /// Cycle the OTALA automaton came from, and how many cycles closed.
    pub otala_source_cycle: usize,
    pub otala_closed_cycles: usize,
    pub comparison: ComparisonReport,
}

/// Samples of a cycle followed by the sample that starts the next one, so a
/// complete revolution returns to its starting reading.
pub fn closing_sequence(
    trace: &LabeledTrace,
    cycle: &Cycle,
) -> (Vec<SensorVector>, Vec<PositionLabel>) {
    let end = (cycle.end_index + 1).min(trace.samples.len());
    let samples = &trace.samples[cycle.start_index..end];
    (
        samples.iter().map(|s| s.sensors).collect(),
        samples.iter().map(|s| s.label).collect(),
    )
}

/// Most frequent automaton, preferring closed ones; ties go to the earliest.
fn modal_automaton(candidates: &[Automaton]) -> Option<usize> {
    let mut counts: BTreeMap<(bool, String), (usize, usize)> = BTreeMap::new();
    for (i, a) in candidates.iter().enumerate() {
        counts.entry((a.closed(), a.to_json())).or_insert((0, i)).0 += 1;
    }
    counts
        .iter()
        .max_by(|(ka, a), (kb, b)| ka.0.cmp(&kb.0).then(a.0.cmp(&b.0)).then(b.1.cmp(&a.1)))
        .map(|(_, &(_, i))| i)
}

/// Everything up to and including test-set classification.
#[derive(Clone, Debug)]
pub struct TrainedSplit {
    pub cycles: Vec<Cycle>,
    pub train_count: usize,
    pub model: Model,
    pub test_accuracy: f64,
    pub test_cycles: Vec<CycleResult>,
    /// One automaton per test cycle, built from its predictions.
    pub candidates: Vec<Automaton>,
}

pub fn train_and_evaluate<F>(
    trace: &LabeledTrace,
    cfg: &PipelineConfig,
    on_iteration: F,
) -> Result<TrainedSplit, StageError>
where
    F: FnMut(usize, &BatchEval),
{
    let cycles = segment_cycles(trace);
    if cycles.is_empty() {
        return Err(at(Stage::Segment)(Error::Validation(
            "trace contains no complete A-to-A cycle".into(),
        )));
    }
    let (train_cycles, test_cycles) =
        split_train_test(&cycles, cfg.train_fraction).map_err(at(Stage::Split))?;

    // each training sequence ends on the return to A so the network sees the full revolution
    let data: Vec<LabeledSequence> = train_cycles
        .iter()
        .map(|c| {
            let (sensors, labels) = closing_sequence(trace, c);
            LabeledSequence { sensors, labels }
        })
        .collect();
    for (k, s) in data.iter().enumerate() {
        if s.sensors.len() != s.labels.len() {
            return Err(at(Stage::Validate)(Error::Validation(format!(
                "training cycle {k}: {} timesteps but {} labels",
                s.sensors.len(),
                s.labels.len()
            ))));
        }
    }
    cfg.train.validate().map_err(at(Stage::Validate))?;

    let (params, mut history) =
        lstm::train_sequences(&data, &cfg.train, Execution::default(), on_iteration)
            .map_err(at(Stage::Train))?;

    let mut results = Vec::with_capacity(test_cycles.len());
    let mut candidates = Vec::with_capacity(test_cycles.len());
    for cycle in &test_cycles {
        let (sensors, truth) = closing_sequence(trace, cycle);
        let predicted = lstm::classify_sequence(&sensors, &params).map_err(at(Stage::Classify))?;
        let n = cycle.len();
        let accuracy = lstm::accuracy(&predicted[..n], &truth[..n]).map_err(at(Stage::Classify))?;
        candidates
            .push(build_from_predictions(&sensors, &predicted).map_err(at(Stage::LstmAutomaton))?);
        results.push(CycleResult {
            start_index: cycle.start_index,
            predicted: predicted[..n].to_vec(),
            truth: truth[..n].to_vec(),
            accuracy,
        });
    }
    let test_accuracy =
        lstm::pooled_accuracy(results.iter().map(|r| (&r.predicted[..], &r.truth[..])))
            .map_err(at(Stage::Classify))?;
    history.test_accuracy = Some(test_accuracy);

    Ok(TrainedSplit {
        train_count: train_cycles.len(),
        cycles,
        model: Model::new(cfg.train.clone(), params, history),
        test_accuracy,
        test_cycles: results,
        candidates,
    })
}

pub fn run<F>(
    trace: &LabeledTrace,
    cfg: &PipelineConfig,
    on_iteration: F,
) -> Result<PipelineOutput, StageError>
where
    F: FnMut(usize, &BatchEval),
{
    let split = train_and_evaluate(trace, cfg, on_iteration)?;
    let cycles = &split.cycles;
    let lstm_automaton = split.candidates
        [modal_automaton(&split.candidates).expect("at least one test cycle")]
    .clone();

    let otala_inputs: Vec<_> = cycles
        .iter()
        .map(|c| observations(closing_sequence(trace, c).0))
        .collect();
    let (otala_automaton, otala_source_cycle, otala_closed_cycles) = match cfg.otala_cycle {
        Some(k) => {
            let input = otala_inputs.get(k).ok_or_else(|| {
                at(Stage::Otala)(Error::Config(format!(
                    "OTALA cycle {k} out of range, trace has {} cycles",
                    cycles.len()
                )))
            })?;
            match otala::learn_otala(input, &cfg.position_map) {
                Ok(a) => (a, k, 1),
                Err(OtalaError::IncompleteCycle { partial }) => (partial, k, 0),
                Err(e) => return Err(at(Stage::Otala)(Error::Validation(e.to_string()))),
            }
        }
        None => {
            let run = otala::learn_all(&otala_inputs, &cfg.position_map).ok_or_else(|| {
                at(Stage::Otala)(Error::Validation("every cycle is empty".into()))
            })?;
            (run.best_automaton().clone(), run.best, run.closed_count())
        }
    };

    let comparison = compare(&otala_automaton, &lstm_automaton);

    Ok(PipelineOutput {
        cycle_count: cycles.len(),
        train_count: split.train_count,
        model: split.model,
        test_accuracy: split.test_accuracy,
        test_cycles: split.test_cycles,
        lstm_automaton,
        otala_automaton,
        otala_source_cycle,
        otala_closed_cycles,
        comparison,
    })
}

/// Renders a series as one line of ASCII levels, resampled to `width` columns.
pub fn sparkline(values: &[f64], width: usize) -> String {
    const LEVELS: &[u8] = b"_.-=+*#@";
    if values.is_empty() || width == 0 {
        return String::new();
    }
    let cols = width.min(values.len());
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..cols)
        .map(|c| {
            let v = values[c * values.len() / cols];
            let level = if hi > lo {
                (((v - lo) / (hi - lo)) * (LEVELS.len() - 1) as f64).round() as usize
            } else {
                0
            };
            LEVELS[level] as char
        })
        .collect()
}

impl PipelineOutput {
    pub fn history(&self) -> &TrainHistory {
        &self.model.history
    }

    pub fn render_report(&self) -> String {
        let h = self.history();
        let mut out = String::new();
        out.push_str(&format!(
            "cycles: {} ({} train, {} test)\n",
            self.cycle_count,
            self.train_count,
            self.cycle_count - self.train_count
        ));
        out.push_str(&format!(
            "lstm: hidden={} epochs={} seed={}\n",
            self.model.config.hidden, self.model.config.epochs, self.model.config.seed
        ));
        if let (Some(first), Some(last)) = (h.loss.first(), h.loss.last()) {
            out.push_str(&format!("training loss: {first:.4} -> {last:.4}\n"));
        }
        if let Some(acc) = h.train_accuracy.last() {
            out.push_str(&format!("final training accuracy: {acc:.4}\n"));
        }
        out.push_str(&format!(
            "test accuracy (pooled): {:.4}\n",
            self.test_accuracy
        ));
        out.push_str("test accuracy per cycle:\n");
        for (k, c) in self.test_cycles.iter().enumerate() {
            out.push_str(&format!(
                "  cycle {:>2} @ sample {:>5}: {:.4}\n",
                self.train_count + k,
                c.start_index,
                c.accuracy
            ));
        }
        out.push_str(&format!(
            "otala: learned from cycle {}, {} of {} cycles closed\n",
            self.otala_source_cycle, self.otala_closed_cycles, self.cycle_count
        ));
        out.push_str(&format!(
            "cycle closure: otala={} lstm={}\n",
            check_cycle_closure(&self.otala_automaton),
            check_cycle_closure(&self.lstm_automaton)
        ));
        out.push('\n');
        out.push_str(&self.comparison.render("otala", "lstm"));
        out
    }

    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<Artifacts, StageError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| at(Stage::Write)(Error::io(dir, e)))?;
        let paths = Artifacts::in_dir(dir);
        let write =
            |p: &Path, text: &str| crate::trace::write_text(p, text).map_err(at(Stage::Write));
        write(&paths.model, &self.model.to_json())?;
        write(&paths.history, &self.history().to_csv())?;
        write(&paths.otala_json, &self.otala_automaton.to_json())?;
        write(&paths.otala_dot, &self.otala_automaton.to_dot())?;
        write(&paths.lstm_json, &self.lstm_automaton.to_json())?;
        write(&paths.lstm_dot, &self.lstm_automaton.to_dot())?;
        write(&paths.report, &self.render_report())?;
        Ok(paths)
    }
}

/// Files written by [`PipelineOutput::write_artifacts`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifacts {
    pub model: PathBuf,
    pub history: PathBuf,
    pub otala_json: PathBuf,
    pub otala_dot: PathBuf,
    pub lstm_json: PathBuf,
    pub lstm_dot: PathBuf,
    pub report: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            model: dir.join("model.json"),
            history: dir.join("history.csv"),
            otala_json: dir.join("otala.json"),
            otala_dot: dir.join("otala.dot"),
            lstm_json: dir.join("lstm.json"),
            lstm_dot: dir.join("lstm.dot"),
            report: dir.join("report.txt"),
        }
    }

    pub fn all(&self) -> [&Path; 7] {
        [
            &self.model,
            &self.history,
            &self.otala_json,
            &self.otala_dot,
            &self.lstm_json,
            &self.lstm_dot,
            &self.report,
        ]
    }
}
