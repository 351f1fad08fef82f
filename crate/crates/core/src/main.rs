use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vulngraph::attribution::{attribute_tokens, select_root_cause, AttributionDump};
use vulngraph::corpus::{self, split, DatasetSplit, FunctionRecord, Language};
use vulngraph::lexer::Vocabulary;
use vulngraph::model::{denormalize_lines, load_checkpoint, Baseline, FrozenModel, Sample};
use vulngraph::scanner::{self, AnalyzeOptions, OutputFormat, ScanOptions};
use vulngraph::synthetic;
use vulngraph::trainer::{self, Config, DEFAULT_RATIOS};
use vulngraph::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vulngraph",
    version,
    about = "Graph-based vulnerability detection for C/C++ functions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Text => OutputFormat::Text,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a JSONL corpus with a seeded 80/10/10 split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on labeled records and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// split.json written by `train`; only its test ids are scored.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Analyze every function in one source file.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        function: Option<String>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long, default_value = "pad")]
        baseline: String,
    },
    /// Analyze every function under a directory and write reports.
    Scan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = "pad")]
        baseline: String,
    },
    /// Dump raw token and line attributions as JSON.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        function: Option<String>,
        #[arg(long, default_value = "pad")]
        baseline: String,
    },
    /// Train one model per ensemble ratio and print a metrics table.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated kappa values; lambda is 1 - kappa.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Write the synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        per_variant: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(dir: &Path) -> Result<(FrozenModel, Vocabulary)> {
    let (model, vocab) = load_checkpoint(dir)?;
    Ok((model.freeze(), vocab))
}

fn file_functions(file: &Path, function: Option<&str>) -> Result<Vec<FunctionRecord>> {
    let text = fs::read_to_string(file).map_err(|e| Error::Io {
        path: file.to_path_buf(),
        source: e,
    })?;
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    let lang = Language::from_extension(ext).unwrap_or(Language::C);
    let name = file
        .file_name()
        .map_or_else(|| file.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut recs = scanner::extract_from_source(&text, &name, lang)?;
    if let Some(f) = function {
        recs.retain(|r| r.id.split(':').nth(1) == Some(f));
    }
    if recs.is_empty() {
        let what = function.map_or(String::new(), |f| format!(" (looking for `{f}`)"));
        return Err(Error::NoFunctions(format!("{}{what}", file.display())));
    }
    Ok(recs)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, data, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.train.checkpoint_dir = Some(out.clone());
            let records = corpus::load_dataset(&data)?;
            let sp = split(&records, cfg.train.seed)?;
            let outcome = trainer::train(&records, &sp, &cfg)?;
            let split_json = serde_json::json!({
                "seed": sp.seed, "train": sp.train, "val": sp.val, "test": sp.test,
            });
            let p = out.join("split.json");
            fs::write(&p, serde_json::to_string_pretty(&split_json)? + "\n")
                .map_err(|e| Error::Io { path: p, source: e })?;
            eprintln!(
                "trained {} epochs; best epoch {} (checkpoint {})",
                outcome.log.len(),
                outcome.best_epoch,
                out.join("best").display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let (model, vocab) = load_model(&checkpoint)?;
            let records = corpus::load_dataset(&data)?;
            let selected: Vec<&FunctionRecord> = match split {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    let v: serde_json::Value = serde_json::from_str(&text)?;
                    let ids: Vec<String> = serde_json::from_value(v["test"].clone())?;
                    corpus::select(&records, &ids)?
                }
                None => records.iter().collect(),
            };
            let report = trainer::evaluate(&model, &selected, &vocab)?;
            emit(&format!("{}\n", report.to_json()?))?;
        }
        Command::Analyze {
            checkpoint,
            file,
            function,
            format,
            baseline,
        } => {
            let opts = AnalyzeOptions {
                baseline: Baseline::parse(&baseline)?,
            };
            let (model, vocab) = load_model(&checkpoint)?;
            let recs = file_functions(&file, function.as_deref())?;
            let reports: Vec<_> = recs.iter().map(|r| scanner::analyze(r, &model, &vocab, opts)).collect();
            match format {
                Format::Json => emit(&format!("{}\n", serde_json::to_string_pretty(&reports)?))?,
                Format::Text => {
                    for (r, rec) in reports.iter().zip(&recs) {
                        emit(&format!("{}\n", r.to_text(&rec.source)))?;
                    }
                }
            }
        }
        Command::Scan {
            checkpoint,
            root,
            out,
            format,
            threads,
            baseline,
        } => {
            let (model, vocab) = load_model(&checkpoint)?;
            let opts = ScanOptions {
                format: format.into(),
                threads,
                analyze: AnalyzeOptions {
                    baseline: Baseline::parse(&baseline)?,
                },
            };
            let summary = scanner::scan(&root, &model, &vocab, &out, opts)?;
            emit(&summary.to_text())?;
        }
        Command::Attribute {
            checkpoint,
            file,
            function,
            baseline,
        } => {
            let baseline = Baseline::parse(&baseline)?;
            let (model, vocab) = load_model(&checkpoint)?;
            let mut out = Vec::new();
            for rec in file_functions(&file, function.as_deref())? {
                let sample = Sample::from_source(&rec.id, &rec.source, &vocab, model.config().edges)?;
                let attr = attribute_tokens(&model, &sample, baseline)?;
                let fwd = model.forward(&sample)?;
                let root_cause = if sample.line_count >= 2 {
                    let (start, _) = denormalize_lines(fwd.loc_pred, sample.line_count);
                    Some(select_root_cause(&attr.line_scores, start, sample.line_count)?)
                } else {
                    None
                };
                let dump = AttributionDump {
                    token_scores: &attr.token_scores,
                    line_scores: &attr.line_scores,
                    root_cause,
                    phi0: attr.phi0,
                };
                out.push(serde_json::json!({
                    "function": rec.id,
                    "target_class": attr.target_class,
                    "attribution": serde_json::to_value(&dump)?,
                }));
            }
            emit(&format!("{}\n", serde_json::to_string_pretty(&out)?))?;
        }
        Command::Sweep { config, data, ratios } => {
            let cfg = load_config(config.as_deref())?;
            let records = corpus::load_dataset(&data)?;
            let sp: DatasetSplit = split(&records, cfg.train.seed)?;
            let kappas = ratios.unwrap_or_else(|| DEFAULT_RATIOS.to_vec());
            let table = trainer::sweep_ensemble(&records, &sp, &trainer::ratios_from_kappas(&kappas), &cfg)?;
            emit(&format!("evaluated on: {}\n", table.evaluated_on))?;
            emit(&table.to_text())?;
        }
        Command::Synth { out, seed, per_variant } => {
            let recs: Vec<FunctionRecord> = synthetic::generate(seed, per_variant)
                .into_iter()
                .map(|f| f.record)
                .collect();
            corpus::write_dataset(&out, &recs)?;
            eprintln!("wrote {} records to {}", recs.len(), out.display());
        }
    }
    Ok(())
}
