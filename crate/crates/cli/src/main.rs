//! `maft`: dataset generation, training, evaluation and diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use maft_core::checkpoint::{Checkpoint, CheckpointError};
use maft_core::config::{Config, ConfigError};
use maft_core::decoder::{AttentionMode, Model};
use maft_core::diagnose::{grad_check, layer1_recall, GRAD_TOLERANCE};
use maft_core::metrics::matching_trace;
use maft_core::par::Exec;
use maft_core::train::{
    evaluate_model, generate_dataset, read_traces, Dataset, TrainError, Trainer, TRACE_LOG,
};

#[derive(Parser)]
#[command(name = "maft", version, about = "Mask-attention-free 3D instance segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Kind {
    RecallCurve,
    MatchingTrace,
    GradCheck,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes train.tsv, traces.tsv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AttentionMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint (its embedded config is used).
        #[arg(long, conflicts_with_all = ["config", "mode", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints the report and writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Recall curves, matching traces and gradient checks.
    Diagnose {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Checkpoint file, or a directory of checkpoints for recall_curve.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training output directory holding the logs.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse()
}

/// Exit status classes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Validation(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn select<'a>(data: &'a Dataset, config: &Config, split: Split) -> &'a [maft_core::data::PreparedScene] {
    let (train, val) = data.split(config.train.val_count);
    match split {
        Split::All => &data.scenes,
        Split::Train => train,
        Split::Val => val,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, text).map_err(io(path))
}

fn checkpoints_in(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Failure::Validation(format!("no checkpoints (*.bin) in {}", path.display())));
    }
    Ok(found)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = Exec::Parallel;
    match cli.command {
        Command::GenData { config, out, count, seed } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(s) = seed {
                config.train.seed = s;
            }
            let entries = generate_dataset(&config, &out, count, exec)?;
            println!("wrote {} scenes to {}", entries.len(), out.display());
        }
        Command::Train { config, data, out, mode, seed, resume } => {
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(Checkpoint::load(&ckpt)?, exec)?,
                None => {
                    let mut config = load_config(config.as_deref())?;
                    if let Some(m) = mode {
                        config.train.mode = m;
                    }
                    if let Some(s) = seed {
                        config.train.seed = s;
                    }
                    config.validate()?;
                    Trainer::new(config, exec)?
                }
            };
            let dataset = Dataset::load(&data, &trainer.config, exec)?;
            let (train, val) = dataset.split(trainer.config.train.val_count);
            if train.is_empty() {
                return Err(TrainError::NoTrainingData { total: dataset.len(), val: val.len() }.into());
            }
            write(&out.join("config.txt"), &trainer.config.to_text())?;
            let start = std::time::Instant::now();
            trainer.run(train, val, Some(&out), |log| {
                let v = log.val.as_ref();
                eprintln!(
                    "epoch {} step {} loss {:.5} val mAP50 {} recall25 {} ({:.1?})",
                    log.epoch,
                    log.step,
                    log.terms.total,
                    v.map_or("-".into(), |r| format!("{:.4}", r.map50)),
                    v.and_then(|r| r.recall25).map_or("-".into(), |x| format!("{x:.4}")),
                    start.elapsed()
                );
            })?;
        }
        Command::Eval { checkpoint, data, out, split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = Trainer::load_model(&ckpt)?;
            let config = ckpt.config;
            let dataset = Dataset::load(&data, &config, exec)?;
            let report = evaluate_model(&model, select(&dataset, &config, split), &config, exec)?;
            print!("{}", report.to_text());
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            write(&dir.join("eval.json"), &report.to_json())?;
        }
        Command::Diagnose { kind, checkpoint, data, run, out, config, query, split, seed } => {
            let text = match kind {
                Kind::GradCheck => {
                    let (model, config) = match &checkpoint {
                        Some(p) => {
                            let ckpt = Checkpoint::load(p)?;
                            (Trainer::load_model(&ckpt)?, ckpt.config)
                        }
                        None => {
                            let config = load_config(config.as_deref())?;
                            (Model::new(config.model.clone(), config.train.seed).map_err(TrainError::from)?, config)
                        }
                    };
                    let report = grad_check(&model, &config, seed)?;
                    let mut t = String::from("check\tmax_rel_error\n");
                    for p in &report.primitives {
                        t.push_str(&format!("{}\t{:.3e}\n", p.name, p.max_rel_error));
                    }
                    t.push_str(&format!(
                        "end_to_end({} tokens, {} params, mode {})\t{:.3e}\n",
                        report.tokens, report.samples, config.train.mode, report.end_to_end
                    ));
                    t.push_str(&format!("max\t{:.3e}\n", report.max_error()));
                    if !report.passed() {
                        print!("{t}");
                        return Err(Failure::Numeric(format!(
                            "gradient check failed: max relative error {:.3e} ≥ {GRAD_TOLERANCE:e}",
                            report.max_error()
                        )));
                    }
                    t
                }
                Kind::RecallCurve => {
                    let path = checkpoint.ok_or_else(|| Failure::Usage("recall_curve needs --checkpoint".into()))?;
                    let data = data.ok_or_else(|| Failure::Usage("recall_curve needs --data".into()))?;
                    let files = checkpoints_in(&path)?;
                    let first = Checkpoint::load(&files[0])?;
                    let dataset = Dataset::load(&data, &first.config, exec)?;
                    let mut t = String::from("epoch\tcheckpoint\trecall25\trecall50\n");
                    for f in files {
                        let ckpt = Checkpoint::load(&f)?;
                        let model = Trainer::load_model(&ckpt)?;
                        let scenes = select(&dataset, &ckpt.config, split);
                        let [r25, r50] = layer1_recall(&model, scenes, &ckpt.config, exec)?;
                        t.push_str(&format!("{}\t{}\t{r25}\t{r50}\n", ckpt.epoch, f.display()));
                    }
                    t
                }
                Kind::MatchingTrace => {
                    let run = run.ok_or_else(|| Failure::Usage("matching_trace needs --run (training output)".into()))?;
                    let log = run.join(TRACE_LOG);
                    if !log.exists() {
                        return Err(Failure::Validation(format!("missing log {}", log.display())));
                    }
                    let ckpt_path = match checkpoint {
                        Some(p) => p,
                        None => checkpoints_in(&run)?.pop().expect("nonempty"),
                    };
                    let queries = Checkpoint::load(&ckpt_path)?.config.model.queries;
                    let records = read_traces(&log)?;
                    let trace = matching_trace(&records, queries, query).map_err(|e| Failure::Validation(e.to_string()))?;
                    let mut t = String::from("iter\tx\ty\tz\n");
                    for (step, c) in trace {
                        t.push_str(&format!("{step}\t{}\t{}\t{}\n", c[0], c[1], c[2]));
                    }
                    t
                }
            };
            match out {
                Some(dir) => {
                    let name = match kind {
                        Kind::GradCheck => "grad_check.tsv".to_string(),
                        Kind::RecallCurve => "recall_curve.tsv".to_string(),
                        Kind::MatchingTrace => format!("matching_trace_q{query}.tsv"),
                    };
                    write(&dir.join(&name), &text)?;
                    print!("{text}");
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MAFT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("MAFT_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
