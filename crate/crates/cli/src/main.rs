use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use plc_automata::automaton::{check_cycle_closure, compare, Automaton};
use plc_automata::lstm::{self, BatchEval, Model, TrainConfig, TrainHistory};
use plc_automata::otala::{learn_otala, OtalaError, PositionMap};
use plc_automata::pipeline::{self, closing_sequence, PipelineConfig, StageError};
use plc_automata::plant_sim::{simulate, DwellProfile, NoiseModel, SimConfig};
use plc_automata::trace::{
    observations, read_labeled_trace, read_trace_file, render_trace, segment_cycles,
    write_trace_file, PositionLabel, SensorVector, TraceFile,
};
use plc_automata::Error;

#[derive(Parser)]
#[command(
    name = "plcauto",
    version,
    about = "Learn conveyor automata from PLC sensor traces"
)]
struct Cli {
    /// TOML file supplying any flag; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled trace from the built-in plant model.
    Simulate(SimulateArgs),
    /// Train the LSTM classifier on the training split of a labeled trace.
    Train(TrainArgs),
    /// Label every sample of a trace with a trained model.
    Classify(ClassifyArgs),
    /// Learn an automaton passively from known corner readings.
    Otala(OtalaArgs),
    /// Train, classify, learn both automata and compare them.
    Pipeline(PipelineArgs),
    /// Compare two automaton JSON files.
    Compare(CompareArgs),
    /// Convert an automaton JSON file to Graphviz DOT.
    ExportDot(ExportDotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cycles: Option<u32>,
    /// Samples per state; the default idles two samples at each corner.
    #[arg(long)]
    dwell: Option<u32>,
    #[arg(long)]
    bit_flip: Option<f64>,
    #[arg(long)]
    jitter: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    period_ms: Option<u32>,
    /// Stop after the last revolution instead of returning to A.
    #[arg(long)]
    no_terminal_start: bool,
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Print loss and accuracy sparklines after training.
    #[arg(long)]
    ascii_plot: bool,
    /// Suppress per-iteration progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Labeled trace to write; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OtalaArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Learn from this cycle of a labeled trace instead of the whole trace.
    #[arg(long)]
    cycle: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dot: Option<PathBuf>,
    /// TOML table of corner readings, e.g. `A = "10001000101"`.
    #[arg(long)]
    position_map: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    otala_cycle: Option<usize>,
    #[arg(long)]
    position_map: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct CompareArgs {
    first: PathBuf,
    second: PathBuf,
}

#[derive(Args)]
struct ExportDotArgs {
    #[arg(long)]
    automaton: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    model: Option<PathBuf>,
    dot: Option<PathBuf>,
    position_map: Option<PathBuf>,
    cycles: Option<u32>,
    dwell: Option<u32>,
    bit_flip: Option<f64>,
    jitter: Option<u32>,
    period_ms: Option<u32>,
    terminal_start: Option<bool>,
    seed: Option<u64>,
    epochs: Option<usize>,
    hidden: Option<usize>,
    learning_rate: Option<f64>,
    train_fraction: Option<f64>,
    otala_cycle: Option<usize>,
    cycle: Option<usize>,
    ascii_plot: Option<bool>,
    quiet: Option<bool>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        match e.source {
            Error::Numeric(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> CliResult<T> {
    flag.or(file).ok_or_else(|| {
        Failure::Usage(format!(
            "missing --{name} (pass it or set `{name}` in the config file)"
        ))
    })
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn existing_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file", path.display())))
    }
}

fn writable_target(path: &Path) -> CliResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Failure::Data(format!(
            "{}: directory does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_automaton(path: &Path) -> CliResult<Automaton> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Automaton::from_json(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_position_map(path: Option<&Path>) -> CliResult<PositionMap> {
    let Some(path) = path else {
        return Ok(PositionMap::canonical());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let table: HashMap<String, String> =
        toml::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut entries = HashMap::new();
    for (label, bits) in table {
        let label: PositionLabel = label.parse()?;
        let sensors: SensorVector = bits.parse()?;
        if entries.insert(sensors, label).is_some() {
            return Err(Failure::Data(format!(
                "{}: reading {bits} listed twice",
                path.display()
            )));
        }
    }
    Ok(PositionMap::new(entries)?)
}

fn train_config(flags: &TrainingFlags, file: &FileConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        hidden: flags.hidden.or(file.hidden).unwrap_or(d.hidden),
        epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
        learning_rate: flags
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(d.learning_rate),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        ..d
    }
}

fn progress(quiet: bool, epochs: usize) -> impl FnMut(usize, &BatchEval) {
    move |i, eval| {
        if !quiet && (i % 100 == 0 || i + 1 == epochs) {
            eprintln!(
                "iteration {i:>5}/{epochs}  loss {:.4}  accuracy {:.4}",
                eval.loss, eval.accuracy
            );
        }
    }
}

fn ascii_plot(history: &TrainHistory) {
    println!("loss     |{}|", pipeline::sparkline(&history.loss, 60));
    println!(
        "accuracy |{}|",
        pipeline::sparkline(&history.train_accuracy, 60)
    );
}

fn cmd_simulate(args: SimulateArgs, file: FileConfig) -> CliResult {
    let out = required(args.out, file.out, "out")?;
    writable_target(&out)?;
    let d = SimConfig::default();
    let dwell = match args.dwell.or(file.dwell) {
        Some(n) => DwellProfile::uniform(n)?,
        None => d.dwell,
    };
    let cfg = SimConfig {
        cycles: args.cycles.or(file.cycles).unwrap_or(d.cycles),
        dwell,
        noise: NoiseModel {
            bit_flip_prob: args.bit_flip.or(file.bit_flip).unwrap_or(0.0),
            dwell_jitter: args.jitter.or(file.jitter).unwrap_or(0),
        },
        seed: args.seed.or(file.seed).unwrap_or(d.seed),
        terminal_start: !args.no_terminal_start && file.terminal_start.unwrap_or(d.terminal_start),
        sampling_period_ms: args
            .period_ms
            .or(file.period_ms)
            .unwrap_or(d.sampling_period_ms),
    };
    let trace = simulate(&cfg)?;
    write_trace_file(&trace, &out)?;
    println!("samples: {}", trace.len());
    println!("cycles: {}", segment_cycles(&trace).len());
    Ok(())
}

fn cmd_train(args: TrainArgs, file: FileConfig) -> CliResult {
    let trace_path = required(args.trace, file.trace.clone(), "trace")?;
    let out = required(args.out, file.out.clone(), "out")?;
    existing_file(&trace_path)?;
    writable_target(&out)?;
    let cfg = PipelineConfig {
        train_fraction: args
            .training
            .train_fraction
            .or(file.train_fraction)
            .unwrap_or(0.8),
        train: train_config(&args.training, &file),
        ..PipelineConfig::default()
    };
    let quiet = args.training.quiet || file.quiet.unwrap_or(false);
    let trace = read_labeled_trace(&trace_path)?;
    let split = pipeline::train_and_evaluate(&trace, &cfg, progress(quiet, cfg.train.epochs))?;
    split.model.save(&out)?;

    let h = &split.model.history;
    println!(
        "cycles: {} ({} train, {} test)",
        split.cycles.len(),
        split.train_count,
        split.test_cycles.len()
    );
    println!(
        "final loss: {:.4}",
        h.loss.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "final training accuracy: {:.4}",
        h.train_accuracy.last().copied().unwrap_or(f64::NAN)
    );
    println!("test accuracy (pooled): {:.4}", split.test_accuracy);
    if args.training.ascii_plot || file.ascii_plot.unwrap_or(false) {
        ascii_plot(h);
    }
    Ok(())
}

fn cmd_classify(args: ClassifyArgs, file: FileConfig) -> CliResult {
    let model_path = required(args.model, file.model, "model")?;
    let trace_path = required(args.trace, file.trace, "trace")?;
    existing_file(&model_path)?;
    existing_file(&trace_path)?;
    if let Some(out) = args.out.as_deref() {
        writable_target(out)?;
    }
    let model = Model::load(&model_path)?;
    let trace = read_trace_file(&trace_path)?;
    let sensors = trace.sensors();
    let predicted = lstm::classify_stream(&sensors, &model.params)?;
    let text = render_trace(
        trace.sampling_period_ms(),
        sensors.iter().zip(&predicted).map(|(&s, &l)| (s, Some(l))),
    );
    match args.out.as_deref() {
        Some(out) => {
            write_file(out, &text)?;
            if let TraceFile::Labeled(t) = &trace {
                println!("accuracy: {:.4}", lstm::accuracy(&predicted, &t.labels())?);
            }
            for label in PositionLabel::ALL {
                println!(
                    "{label}: {}",
                    predicted.iter().filter(|&&l| l == label).count()
                );
            }
        }
        None => {
            print!("{text}");
            if let TraceFile::Labeled(t) = &trace {
                eprintln!("accuracy: {:.4}", lstm::accuracy(&predicted, &t.labels())?);
            }
        }
    }
    Ok(())
}

fn cmd_otala(args: OtalaArgs, file: FileConfig) -> CliResult {
    let trace_path = required(args.trace, file.trace, "trace")?;
    existing_file(&trace_path)?;
    let out = args.out.or(file.out);
    let dot = args.dot.or(file.dot);
    for p in out.iter().chain(&dot) {
        writable_target(p)?;
    }
    let pmap = read_position_map(args.position_map.or(file.position_map).as_deref())?;
    let trace = read_trace_file(&trace_path)?;
    let input = match (args.cycle.or(file.cycle), &trace) {
        (None, _) => observations(trace.sensors()),
        (Some(k), TraceFile::Labeled(t)) => {
            let cycles = segment_cycles(t);
            let cycle = cycles.get(k).ok_or_else(|| {
                Failure::Data(format!(
                    "cycle {k} out of range, trace has {} cycles",
                    cycles.len()
                ))
            })?;
            observations(closing_sequence(t, cycle).0)
        }
        (Some(_), TraceFile::Unlabeled { .. }) => {
            return Err(Failure::Data("--cycle needs a labeled trace".into()));
        }
    };
    let automaton = match learn_otala(&input, &pmap) {
        Ok(a) => a,
        Err(OtalaError::IncompleteCycle { partial }) => {
            eprintln!("warning: position A never recurs; the automaton is not closed");
            partial
        }
        Err(e @ OtalaError::EmptyCycle) => return Err(Failure::Data(e.to_string())),
    };
    println!("states: {}", automaton.states().len());
    println!("transitions: {}", automaton.transitions().len());
    println!("closed: {}", automaton.closed());
    println!("cycle closure: {}", check_cycle_closure(&automaton));
    let missing = automaton.missing_position_transitions();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(a, b)| format!("{a}->{b}")).collect();
        println!("missing transitions: {}", list.join(", "));
    }
    if let Some(p) = &out {
        write_file(p, &automaton.to_json())?;
    }
    if let Some(p) = &dot {
        write_file(p, &automaton.to_dot())?;
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs, file: FileConfig) -> CliResult {
    let trace_path = required(args.trace, file.trace.clone(), "trace")?;
    let out_dir = required(args.out_dir, file.out_dir.clone(), "out-dir")?;
    existing_file(&trace_path)?;
    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", out_dir.display())))?;
    let cfg = PipelineConfig {
        train_fraction: args
            .training
            .train_fraction
            .or(file.train_fraction)
            .unwrap_or(0.8),
        train: train_config(&args.training, &file),
        otala_cycle: args.otala_cycle.or(file.otala_cycle),
        position_map: read_position_map(
            args.position_map.or(file.position_map.clone()).as_deref(),
        )?,
    };
    let quiet = args.training.quiet || file.quiet.unwrap_or(false);
    let trace = read_labeled_trace(&trace_path)?;
    let output = pipeline::run(&trace, &cfg, progress(quiet, cfg.train.epochs))?;
    let artifacts = output.write_artifacts(&out_dir)?;
    print!("{}", output.render_report());
    if args.training.ascii_plot || file.ascii_plot.unwrap_or(false) {
        println!();
        ascii_plot(output.history());
    }
    println!();
    for p in artifacts.all() {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "?".into())
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    let a = read_automaton(&args.first)?;
    let b = read_automaton(&args.second)?;
    print!(
        "{}",
        compare(&a, &b).render(&stem(&args.first), &stem(&args.second))
    );
    Ok(())
}

fn cmd_export_dot(args: ExportDotArgs) -> CliResult {
    let a = read_automaton(&args.automaton)?;
    match &args.out {
        Some(p) => {
            writable_target(p)?;
            write_file(p, &a.to_dot())
        }
        None => {
            print!("{}", a.to_dot());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a, file),
        Command::Train(a) => cmd_train(a, file),
        Command::Classify(a) => cmd_classify(a, file),
        Command::Otala(a) => cmd_otala(a, file),
        Command::Pipeline(a) => cmd_pipeline(a, file),
        Command::Compare(a) => cmd_compare(a),
        Command::ExportDot(a) => cmd_export_dot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
