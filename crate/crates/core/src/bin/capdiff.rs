use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use capdiff::cascade::cascade_sample;
use capdiff::harness::checkpoint::{self, Model};
use capdiff::harness::config::RunConfig;
use capdiff::harness::data::{generate_dataset, Dataset, Split};
use capdiff::harness::eval::stream_rng;
use capdiff::harness::{self, write_manifest};
use clap::{Arg, ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "capdiff",
    version,
    about = "Caption generation with bit diffusion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the autoregressive teacher.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// First stage: cross-entropy and bit regression.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose parameters seed the matching ones of this model.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Second stage: guided self-critical training.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for the report files; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Caption individual images, optionally showing every reverse step.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sample ids; the first five of the split when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the Base / +Semantic / +GSCST / +Cascade grid.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Config keys, each exposed as `--key-name`.
fn config_keys() -> Vec<String> {
    let table = toml::Table::try_from(RunConfig::default()).expect("config serializes");
    let mut keys: Vec<String> = table.keys().cloned().collect();
    keys.push("seed".into());
    keys
}

fn flag_table(m: &ArgMatches, keys: &[String]) -> Result<toml::Table> {
    let defaults = toml::Table::try_from(RunConfig::default())?;
    let mut t = toml::Table::new();
    for k in keys {
        let Some(raw) = m.get_one::<String>(k) else {
            continue;
        };
        let list = matches!(defaults.get(k), Some(toml::Value::Array(_))) && !raw.starts_with('[');
        let text = if list {
            format!("[{raw}]")
        } else {
            raw.clone()
        };
        let value = toml::from_str::<toml::Table>(&format!("v = {text}"))
            .ok()
            .and_then(|mut v| v.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        t.insert(k.clone(), value);
    }
    Ok(t)
}

fn load_config(m: &ArgMatches, keys: &[String], file: Option<&Path>) -> Result<RunConfig> {
    let file = match file {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing {}", p.display()))?,
            )
        }
        None => None,
    };
    Ok(RunConfig::layered(flag_table(m, keys)?, file)?)
}

fn require_seed_flag(m: &ArgMatches) -> Result<()> {
    if m.get_one::<String>("seed").is_none() {
        bail!("--seed is required for training");
    }
    Ok(())
}

fn read_data(dir: &Path, run: &RunConfig) -> Result<Dataset> {
    Dataset::read(dir, run.max_len)
        .with_context(|| format!("reading dataset from {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = config_keys();
    let mut command = Cli::command();
    let names: Vec<String> = command
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect();
    for name in names {
        command = command.mut_subcommand(name, |mut sc| {
            for k in &keys {
                sc = sc.arg(
                    Arg::new(k.clone())
                        .long(k.replace('_', "-"))
                        .value_name("VALUE")
                        .help(format!("config key `{k}`"))
                        .hide_short_help(true),
                );
            }
            sc
        });
    }
    let matches = command.get_matches();
    let cli = Cli::from_arg_matches(&matches)?;
    let (_, sub) = matches.subcommand().expect("subcommand required");

    match cli.cmd {
        Cmd::GenData { out, config } => {
            let run = load_config(sub, &keys, config.as_deref())?;
            let (data, _) = generate_dataset(&run)?;
            data.write(&out)?;
            write_manifest(
                &out,
                "gen-data",
                &run,
                &data,
                &[
                    "train.jsonl",
                    "val.jsonl",
                    "test.jsonl",
                    "vocab.txt",
                    "pool.tsv",
                ],
            )?;
            println!(
                "{} train / {} val / {} test scenes, {} words -> {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.vocab.len(),
                out.display()
            );
        }
        Cmd::TrainTeacher {
            data,
            out,
            config,
            resume,
        } => {
            require_seed_flag(sub)?;
            let run = load_config(sub, &keys, config.as_deref())?;
            let data = read_data(&data, &run)?;
            let s = harness::train_teacher(&run, &data, &out, resume)?;
            write_manifest(
                &out,
                "train-teacher",
                &run,
                &data,
                &[harness::train::METRICS],
            )?;
            println!(
                "best val CIDEr {:.4} at step {} -> {}",
                s.best_cider,
                s.best_step,
                s.best_path.display()
            );
        }
        Cmd::TrainStage1 {
            data,
            out,
            warm_start,
            config,
            resume,
        } => {
            require_seed_flag(sub)?;
            let run = load_config(sub, &keys, config.as_deref())?;
            let data = read_data(&data, &run)?;
            let s = harness::train::train_stage1_from(
                &run,
                &data,
                warm_start.as_deref(),
                &out,
                resume,
            )?;
            write_manifest(
                &out,
                "train-stage1",
                &run,
                &data,
                &[harness::train::METRICS],
            )?;
            println!(
                "best val CIDEr {:.4} at step {} -> {}",
                s.best_cider,
                s.best_step,
                s.best_path.display()
            );
        }
        Cmd::TrainStage2 {
            data,
            stage1,
            teacher,
            out,
            config,
            resume,
        } => {
            require_seed_flag(sub)?;
            let run = load_config(sub, &keys, config.as_deref())?;
            let data = read_data(&data, &run)?;
            let s = harness::train_stage2(&run, &data, &stage1, &teacher, &out, resume)?;
            write_manifest(
                &out,
                "train-stage2",
                &run,
                &data,
                &[harness::train::METRICS],
            )?;
            println!(
                "best val CIDEr {:.4} at step {} -> {}",
                s.best_cider,
                s.best_step,
                s.best_path.display()
            );
        }
        Cmd::Eval {
            data,
            checkpoint,
            split,
            out,
            config,
        } => {
            let run = load_config(sub, &keys, config.as_deref())?;
            let data = read_data(&data, &run)?;
            let report = harness::evaluate(&checkpoint, &data, split, &run, run.seed.unwrap_or(0))?;
            print!("{}", report.render(&data.vocab));
            if let Some(dir) = out {
                report.write(&dir, &data.vocab)?;
                let name = format!("metrics_{}.csv", split.name());
                write_manifest(&dir, "eval", &run, &data, &[name.as_str()])?;
            }
        }
        Cmd::Sample {
            data,
            checkpoint,
            split,
            ids,
            trace,
            config,
        } => {
            let run = load_config(sub, &keys, config.as_deref())?;
            let data = read_data(&data, &run)?;
            let loaded = checkpoint::load(&checkpoint)?;
            let samples = data.split(split);
            let chosen: Vec<_> = if ids.is_empty() {
                samples.iter().take(5).collect()
            } else {
                ids.iter()
                    .map(|id| {
                        samples
                            .iter()
                            .find(|s| s.id == *id)
                            .ok_or(capdiff::Error::UnknownSample(*id))
                    })
                    .collect::<std::result::Result<_, _>>()?
            };
            let seed = run.seed.unwrap_or(0);
            match &loaded.model {
                Model::Cascade(model) => {
                    let pool = data.pool()?;
                    for s in chosen {
                        let feats = s.feature_tensor::<f32>();
                        let retrieved = if model.config.stage.retrieval_len > 0 {
                            pool.retrieve(&feats, None)?.to_vec()
                        } else {
                            Vec::new()
                        };
                        let mut rng = stream_rng(seed, s.id);
                        let out = cascade_sample(
                            model,
                            &loaded.params,
                            &feats,
                            &retrieved,
                            &run.sampler(),
                            &run.schedule(),
                            &mut rng,
                        )?;
                        if !retrieved.is_empty() {
                            println!("{:>6} retrieved: {}", s.id, data.vocab.decode(&retrieved));
                        }
                        if trace {
                            for (k, words) in out.path.iter().enumerate() {
                                println!(
                                    "{:>6} step {:>3}: {}",
                                    s.id,
                                    k + 1,
                                    data.vocab.decode(words)
                                );
                            }
                        }
                        println!("{:>6} caption: {}", s.id, data.vocab.decode(&out.words));
                    }
                }
                Model::Teacher(t) => {
                    for s in chosen {
                        let words = t.decode(
                            &loaded.params,
                            &s.feature_tensor::<f32>(),
                            capdiff::gscst::DecodeMode::Beam(run.beam),
                        )?;
                        println!("{:>6} caption: {}", s.id, data.vocab.decode(&words));
                    }
                }
            }
        }
        Cmd::Ablate { out, config } => {
            let run = load_config(sub, &keys, config.as_deref())?;
            let ab = harness::run_ablation(&run, &out)?;
            print!("{}", ab.table());
        }
    }
    Ok(())
}
