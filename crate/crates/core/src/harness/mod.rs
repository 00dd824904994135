//! Synthetic benchmark, training loops, evaluation and the ablation grid.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::captioner::StageConfig;
use crate::gscst::DecodeMode;
use crate::Result;
use checkpoint::Model;
use config::RunConfig;
use data::{Dataset, Split};
use eval::Report;

pub use ablation::{run_ablation, Ablation, Arm};
pub use train::{train_stage1, train_stage2, train_teacher, Summary};

/// The teacher shares the stage layout but never sees retrieved tokens.
pub fn teacher_config(run: &RunConfig, vocab_size: usize) -> StageConfig {
    StageConfig {
        retrieval_len: 0,
        ..run.stage_config(vocab_size)
    }
}

/// Captions every image of `split` with a saved model and scores them.
/// Diffusion models use `run`'s sampler and `seed`; teachers decode with
/// beam search.
pub fn evaluate(
    checkpoint: &Path,
    data: &Dataset,
    split: Split,
    run: &RunConfig,
    seed: u64,
) -> Result<Report> {
    let loaded = checkpoint::load(checkpoint)?;
    let samples = data.split(split);
    let captions = match &loaded.model {
        Model::Cascade(model) => {
            let retrieved = if model.config.stage.retrieval_len > 0 {
                data.retrieved(&data.pool()?, split)?
            } else {
                vec![Vec::new(); samples.len()]
            };
            eval::caption_samples(
                model,
                &loaded.params,
                samples,
                &retrieved,
                &run.sampler(),
                &run.schedule(),
                seed,
            )?
        }
        Model::Teacher(t) => {
            let mode = if run.beam > 1 {
                DecodeMode::Beam(run.beam)
            } else {
                DecodeMode::Greedy
            };
            eval::teacher_captions(t, &loaded.params, samples, mode)?
        }
    };
    Report::score(split, captions, &data.references(split)?)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    code_version: &'static str,
    config: &'a RunConfig,
    dataset: BTreeMap<&'static str, String>,
    outputs: BTreeMap<String, String>,
}

/// `manifest.json` next to a run's outputs: command, configuration,
/// dataset split hashes, crate version and sha256 of each listed output.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    run: &RunConfig,
    data: &Dataset,
    outputs: &[&str],
) -> Result<()> {
    let dataset = data
        .split_hashes()?
        .into_iter()
        .map(|(s, h)| (s.name(), h))
        .collect();
    let mut hashes = BTreeMap::new();
    for name in outputs {
        let p = dir.join(name);
        if p.exists() {
            hashes.insert(name.to_string(), data::file_hash(&p)?);
        }
    }
    let m = Manifest {
        command,
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        config: run,
        dataset,
        outputs: hashes,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    Ok(())
}
