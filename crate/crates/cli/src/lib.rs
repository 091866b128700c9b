//! Commands behind the `diet` binary.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diet::data::{load_dataset, save_dataset, Dataset};
use diet::evaluation::{EvalReport, MatchMode};
use diet::pipeline::DietPipeline;
use diet::synthetic::{self, SyntheticConfig};
use diet::training::train_with_hook;
use diet::DietError;
use serde::Serialize;

pub mod config;

pub use config::PipelineConfig;

/// A command failure, reported on stderr as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl Failure {
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<DietError> for Failure {
    fn from(e: DietError) -> Self {
        let labels = match &e {
            DietError::UnknownLabels { labels, .. } => Some(labels.clone()),
            _ => None,
        };
        let line = match &e {
            DietError::Parse { line, .. } => Some(*line),
            _ => None,
        };
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            line,
            labels,
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    DietError::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

#[derive(Debug, Parser)]
#[command(
    name = "diet",
    version,
    about = "Joint intent classification and entity recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Predict intents and entities for texts (arguments, or stdin lines).
    Predict(PredictArgs),
    /// Write a synthetic train/test dataset.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train_data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Overlap,
    Exact,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<MatchMode> {
        match self {
            ModeArg::Overlap => vec![MatchMode::Overlap],
            ModeArg::Exact => vec![MatchMode::Exact],
            ModeArg::Both => vec![MatchMode::Overlap, MatchMode::Exact],
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Report JSON path; defaults to `report.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub texts: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub intents: usize,
    #[arg(long, default_value_t = 2)]
    pub entities: usize,
    #[arg(long, default_value_t = 300)]
    pub utterances: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Drop duplicate texts so train and test never share one.
    #[arg(long)]
    pub disjoint: bool,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Also write `word_vectors.txt` with this dimension.
    #[arg(long)]
    pub word_vectors: Option<usize>,
    /// Also write `sentence_vectors.jsonl` with this dimension.
    #[arg(long)]
    pub sentence_vectors: Option<usize>,
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    let loaded = load_dataset(path)?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded.dataset)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| io_failure(path, e))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    data: &'a Path,
    modes: Vec<&'static str>,
    latency_ms_per_utterance: f64,
    report: &'a EvalReport,
}

fn evaluate_to(
    pipeline: &DietPipeline,
    data: &Path,
    modes: &[MatchMode],
    out_path: &Path,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let dataset = load(data)?;
    let (report, ms) = pipeline.evaluate_timed(&dataset, modes)?;
    let file = ReportFile {
        data,
        modes: modes.iter().map(|m| m.name()).collect(),
        latency_ms_per_utterance: ms,
        report: &report,
    };
    write(
        out_path,
        &serde_json::to_string_pretty(&file).expect("report serializes"),
    )?;
    let _ = write!(stdout, "{}", report.to_table());
    let _ = writeln!(
        stdout,
        "latency: {ms:.2} ms/utterance over {} utterances",
        dataset.len()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(d) = &args.data {
        config.train_data = d.clone();
    }
    if let Some(s) = args.seed {
        config.train.seed = s;
    }
    if let Some(o) = &args.out {
        config.output_dir = o.clone();
    }
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    write(&out.join("resolved_config.json"), &config.to_json())?;

    let train_set = load(&config.train_data)?;
    let dev = config.dev_data.as_deref().map(load).transpose()?;
    let every = config.train.checkpoint_every;
    let mut hook = |r: &diet::training::EpochRecord, p: &DietPipeline| -> diet::Result<()> {
        if every.is_some_and(|n| (r.epoch + 1).is_multiple_of(n)) {
            let dir = out.join("checkpoints");
            std::fs::create_dir_all(&dir).map_err(|e| DietError::Io {
                path: dir.clone(),
                source: e,
            })?;
            p.save(dir.join(format!("epoch-{:04}.json", r.epoch + 1)))?;
        }
        Ok(())
    };
    let (pipeline, history) = train_with_hook(
        &train_set,
        dev.as_ref(),
        &config.featurization,
        &config.model,
        &config.train,
        &mut hook,
    )?;
    pipeline.save(out.join("model.json"))?;
    history.save(&out)?;
    if let Some(last) = history.epochs.last() {
        let _ = writeln!(
            stdout,
            "trained {} epochs, final loss {:.4}; wrote {}",
            history.epochs.len(),
            last.total_loss,
            out.display()
        );
    }
    if let Some(test) = &config.test_data {
        let modes = [MatchMode::Overlap, MatchMode::Exact];
        evaluate_to(&pipeline, test, &modes, &out.join("report.json"), stdout)?;
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let pipeline = DietPipeline::load(&args.checkpoint)?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("report.json")
    });
    evaluate_to(&pipeline, &args.data, &args.mode.modes(), &out, stdout)
}

pub fn cmd_predict(
    args: &PredictArgs,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
) -> Result<(), Failure> {
    let pipeline = DietPipeline::load(&args.checkpoint)?;
    let texts: Vec<String> = if args.texts.is_empty() {
        stdin
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| io_failure(Path::new("<stdin>"), e))?
    } else {
        args.texts.clone()
    };
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    for p in pipeline.predict_batch(&refs)? {
        let _ = writeln!(
            stdout,
            "{}",
            serde_json::to_string(&p).expect("prediction serializes")
        );
    }
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let config = SyntheticConfig {
        seed: args.seed,
        num_intents: args.intents,
        num_entities: args.entities,
        num_utterances: args.utterances,
        test_fraction: args.test_fraction,
        disjoint: args.disjoint,
        noise: args.noise,
    };
    let corpus = synthetic::generate(&config)?;
    let out = &args.out;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    save_dataset(out.join("train.jsonl"), &corpus.train)?;
    save_dataset(out.join("test.jsonl"), &corpus.test)?;
    let both = [&corpus.train, &corpus.test];
    if let Some(dim) = args.word_vectors {
        let table = synthetic::word_vectors(&both, dim, args.seed)?;
        write(
            &out.join("word_vectors.txt"),
            &(table.to_lines().join("\n") + "\n"),
        )?;
    }
    if let Some(dim) = args.sentence_vectors {
        let vectors = synthetic::sentence_vectors(&both, dim, args.seed)?;
        write(
            &out.join("sentence_vectors.jsonl"),
            &(vectors.to_lines().join("\n") + "\n"),
        )?;
    }
    let _ = writeln!(
        stdout,
        "wrote {} train and {} test utterances to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let stdout = &mut std::io::stdout().lock();
    match &cli.command {
        Command::Train(a) => cmd_train(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Predict(a) => cmd_predict(a, &mut std::io::stdin().lock(), stdout),
        Command::Generate(a) => cmd_generate(a, stdout),
    }
}
