//! Command-line entry points.
//!
//! Every subcommand writes into a run directory (`--output`, else the
//! config's `output`): the resolved `config.toml`, a `metrics.jsonl` file
//! with one [`StepRecord`] per line where training happens, and accuracy
//! tables as `class,accuracy` CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::adaptation::{
    ablation_csv, adapt_offline, adapt_online, evaluate, predict, run_ablation, stream_accuracy, train_source,
    AdaptOutcome, EvalReport, Mode, StepRecord,
};
use crate::checkpoint::{load_model, save_model};
use crate::config::{write_resolved, ExperimentConfig};
use crate::data::{generate_domain, make_synthetic_shift, Dataset, DomainShiftSpec};
use crate::error::{Error, Result};
use crate::model::PromptViT;
use crate::multi_source::{init_target_prompts, save_bundle, train_multi_source};

/// Version of the metrics JSON-lines and CSV layouts.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "prompt-tta", version, about = "Test-time adaptation of a prompt-augmented ViT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to the config's `output`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the step count of the phase the subcommand runs.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Source,
    Target,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training on the labeled source domain.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Also cache the generated source and target sets as PNG directories.
        #[arg(long)]
        save_data: bool,
    },
    /// Offline adaptation on the unlabeled target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the final memory bank to `bank.csv`.
        #[arg(long)]
        dump_bank: bool,
    },
    /// Single-pass streaming adaptation.
    AdaptOnline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Multi-source training, prompt averaging, then offline adaptation.
    AdaptMulti {
        #[command(flatten)]
        common: Common,
    },
    /// Per-class accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        split: Split,
    },
    /// Adapt one source checkpoint under each loss-term ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Offline adaptation at several target data ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Source checkpoint; trained first when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5,1.0")]
        ratios: Vec<f64>,
    },
    /// Final CLS features and labels as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        split: Split,
        /// Export at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
}

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

fn prepare(common: &Common) -> Result<Run> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply_overrides(common.seed, None);
    let dir = common.output.clone().unwrap_or_else(|| cfg.output.clone());
    cfg.output = dir.clone();
    Ok(Run { cfg, dir })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_file(path, &report.to_csv())
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<PromptViT> {
    let (model, meta) = load_model(path)?;
    if meta.config != cfg.model_config() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model config",
            path.display()
        )));
    }
    Ok(model)
}

fn domains(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    make_synthetic_shift(&cfg.shift_spec())
}

fn split_of(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
    let (s, t) = domains(cfg)?;
    Ok(match split {
        Split::Source => s,
        Split::Target => t,
    })
}

fn save_adaptation(dir: &Path, out: &AdaptOutcome, target: &Dataset, seed: u64, before: &EvalReport) -> Result<EvalReport> {
    write_metrics(&dir.join("metrics.jsonl"), &out.history)?;
    save_model(&dir.join("adapted.safetensors"), &out.student, seed)?;
    let after = evaluate(&out.student, target)?;
    write_report(&dir.join("accuracy_before.csv"), before)?;
    write_report(&dir.join("accuracy_after.csv"), &after)?;
    println!(
        "target accuracy: source-only {:.2}, adapted {:.2}",
        before.average, after.average
    );
    Ok(after)
}

fn train_source_run(run: &Run) -> Result<PromptViT> {
    let (source, target) = domains(&run.cfg)?;
    let out = train_source(&run.cfg.model_config(), &source, &run.cfg.source)?;
    write_metrics(&run.dir.join("metrics.jsonl"), &out.history)?;
    save_model(&run.dir.join("source.safetensors"), &out.model, run.cfg.seed)?;
    let report = evaluate(&out.model, &target)?;
    write_report(&run.dir.join("accuracy_target.csv"), &report)?;
    println!(
        "source validation accuracy {:.2}; source-only target accuracy {:.2}",
        out.best_val_accuracy, report.average
    );
    Ok(out.model)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSource { common, save_data } => {
            let mut run = prepare(&common)?;
            if let Some(n) = common.steps {
                run.cfg.source.steps = n;
            }
            write_resolved(&run.dir, &run.cfg)?;
            if save_data {
                let (s, t) = domains(&run.cfg)?;
                s.save(&run.dir.join("data/source"))?;
                t.save(&run.dir.join("data/target"))?;
            }
            train_source_run(&run)?;
        }
        Command::Adapt {
            common,
            checkpoint,
            dump_bank,
        } => {
            let mut run = prepare(&common)?;
            if let Some(n) = common.steps {
                run.cfg.adapt.steps = n;
            }
            run.cfg.adapt.mode = Mode::Offline;
            write_resolved(&run.dir, &run.cfg)?;
            let model = load_checkpoint(&checkpoint, &run.cfg)?;
            let target = split_of(&run.cfg, Split::Target)?;
            let before = evaluate(&model, &target)?;
            let out = adapt_offline(&model, &target, &run.cfg.adapt)?;
            save_adaptation(&run.dir, &out, &target, run.cfg.seed, &before)?;
            if dump_bank {
                if let Some(bank) = &out.bank {
                    let path = run.dir.join("bank.csv");
                    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    bank.dump(std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        Command::AdaptOnline { common, checkpoint } => {
            let mut run = prepare(&common)?;
            run.cfg.adapt.mode = Mode::Online;
            write_resolved(&run.dir, &run.cfg)?;
            let model = load_checkpoint(&checkpoint, &run.cfg)?;
            let target = split_of(&run.cfg, Split::Target)?;
            let baseline = stream_accuracy(&model, &target, &run.cfg.adapt)?;
            let out = adapt_online(&model, &target, &run.cfg.adapt)?;
            write_metrics(&run.dir.join("metrics.jsonl"), &out.history)?;
            save_model(&run.dir.join("adapted.safetensors"), &out.student, run.cfg.seed)?;
            let online = out.stream_accuracy.unwrap_or(0.0);
            write_file(
                &run.dir.join("online_summary.csv"),
                &format!(
                    "batches,unadapted_stream_accuracy,online_accuracy\n{},{baseline:.4},{online:.4}\n",
                    out.stats.optimizer_steps
                ),
            )?;
            println!("stream accuracy: unadapted {baseline:.2}, online {online:.2}");
        }
        Command::AdaptMulti { common } => {
            let mut run = prepare(&common)?;
            if let Some(n) = common.steps {
                run.cfg.adapt.steps = n;
            }
            run.cfg.adapt.mode = Mode::Offline;
            write_resolved(&run.dir, &run.cfg)?;
            let multi = run.cfg.multi.clone().ok_or_else(|| {
                Error::Config("adapt-multi needs a [[multi.sources]] list in the config".into())
            })?;
            let (clean, target) = domains(&run.cfg)?;
            let mut sets = vec![("clean".to_string(), clean)];
            for (k, d) in multi.sources.iter().enumerate() {
                let spec = DomainShiftSpec {
                    shift: d.shift,
                    ..run.cfg.shift_spec()
                };
                sets.push((d.name.clone(), generate_domain(&spec, 40 + k as u64, d.severity)?));
            }
            let trained = train_multi_source(&run.cfg.model_config(), &sets, &run.cfg.source)?;
            save_bundle(&run.dir.join("multi_source.safetensors"), &trained.bundle, run.cfg.seed)?;
            write_metrics(&run.dir.join("source_metrics.jsonl"), &trained.history)?;
            let model = init_target_prompts(&trained.bundle)?;
            let before = evaluate(&model, &target)?;
            let out = adapt_offline(&model, &target, &run.cfg.adapt)?;
            save_adaptation(&run.dir, &out, &target, run.cfg.seed, &before)?;
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let run = prepare(&common)?;
            std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
            let model = load_checkpoint(&checkpoint, &run.cfg)?;
            let data = split_of(&run.cfg, split)?;
            let report = evaluate(&model, &data)?;
            let name = match split {
                Split::Source => "eval_source.csv",
                Split::Target => "eval_target.csv",
            };
            write_report(&run.dir.join(name), &report)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { common, checkpoint } => {
            let mut run = prepare(&common)?;
            if let Some(n) = common.steps {
                run.cfg.adapt.steps = n;
            }
            write_resolved(&run.dir, &run.cfg)?;
            let model = load_checkpoint(&checkpoint, &run.cfg)?;
            let target = split_of(&run.cfg, Split::Target)?;
            let rows = run_ablation(&model, &target, &run.cfg.adapt)?;
            let table = ablation_csv(&rows);
            write_file(&run.dir.join("ablation.csv"), &table)?;
            print!("{table}");
        }
        Command::Sweep {
            common,
            checkpoint,
            ratios,
        } => {
            let mut run = prepare(&common)?;
            if let Some(n) = common.steps {
                run.cfg.adapt.steps = n;
            }
            run.cfg.adapt.mode = Mode::Offline;
            write_resolved(&run.dir, &run.cfg)?;
            let model = match checkpoint {
                Some(p) => load_checkpoint(&p, &run.cfg)?,
                None => train_source_run(&run)?,
            };
            let target = split_of(&run.cfg, Split::Target)?;
            let before = evaluate(&model, &target)?;
            let mut summary = String::from("data_ratio,run_dir,source_only,adapted\n");
            for ratio in ratios {
                let mut cfg = run.cfg.clone();
                cfg.adapt.data_ratio = ratio;
                let dir = run.dir.join(format!("ratio_{ratio}"));
                cfg.output = dir.clone();
                write_resolved(&dir, &cfg)?;
                let out = adapt_offline(&model, &target, &cfg.adapt)?;
                let after = save_adaptation(&dir, &out, &target, cfg.seed, &before)?;
                summary.push_str(&format!(
                    "{ratio},{},{:.4},{:.4}\n",
                    dir.display(),
                    before.average,
                    after.average
                ));
            }
            write_file(&run.dir.join("summary.csv"), &summary)?;
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            split,
            limit,
        } => {
            let run = prepare(&common)?;
            std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
            let model = load_checkpoint(&checkpoint, &run.cfg)?;
            let data = split_of(&run.cfg, split)?;
            let n = limit.unwrap_or(data.len()).min(data.len());
            let (_, feats) = predict(&model, &data.images[..n])?;
            let path = run.dir.join("embeddings.csv");
            write_file(&path, &embeddings_csv(&feats, &data.labels[..n]))?;
            println!("wrote {n} embeddings to {}", path.display());
        }
    }
    Ok(())
}

/// Header `f0,...,f{d-1},label`, then one row per sample.
pub fn embeddings_csv(features: &[Vec<f64>], labels: &[usize]) -> String {
    let d = features.first().map_or(0, Vec::len);
    let mut s: String = (0..d).map(|i| format!("f{i},")).collect();
    s.push_str("label\n");
    for (f, y) in features.iter().zip(labels) {
        for v in f {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{y}\n"));
    }
    s
}
