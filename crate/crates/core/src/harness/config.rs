//! Run configuration: one flat table of every hyperparameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::StageConfig;
use crate::cascade::{CascadeConfig, Fusion};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of training and sampling; required by the train commands.
    pub seed: Option<u64>,
    /// Training seeds of the ablation grid.
    pub seeds: Vec<u64>,

    pub data_seed: u64,
    pub scenes: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub classes: usize,
    pub attributes: usize,
    pub relations: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_captions: usize,
    pub max_captions: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Random determiners and choice of relation; when off every caption
    /// of a scene is identical.
    pub caption_variation: bool,

    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub semantic_blocks: usize,
    pub max_len: usize,
    pub bit_scale: f64,
    pub dropout: f64,
    /// `M`
    pub stages: usize,
    pub fusion: Fusion,
    /// Leading stages whose parameters stay fixed during training.
    pub frozen_stages: usize,
    /// First-stage steps of the multi-stage ablation arm, which starts from
    /// the single-stage semantic model.
    pub cascade_steps: u64,
    /// Condition on a retrieved training sentence.
    pub semantic: bool,

    pub gamma_min: f64,
    pub gamma_max: f64,
    /// `T`
    pub steps: usize,
    /// `Δ`
    pub time_delta: f64,
    pub self_conditioning: bool,

    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    pub stage1_steps: u64,
    pub eval_every: u64,
    /// Validation images scored at each evaluation.
    pub eval_samples: usize,
    pub label_smoothing: f64,
    pub self_cond_prob: f64,

    pub teacher_steps: u64,
    pub teacher_lr: f64,
    pub beam: usize,

    pub stage2_lr: f64,
    pub stage2_steps: u64,
    pub stage2_eval_every: u64,
    /// `N_y`
    pub samples_per_image: usize,
    pub patience: usize,
    pub temperature: f64,
    /// Reverse steps of the baseline chain during self-critical training.
    pub baseline_steps: usize,
    /// Force the teacher sentence into each sample set; off gives plain SCST.
    pub guided: bool,
}

impl Default for RunConfig {
    /// Desk-scale values for the synthetic benchmark.
    fn default() -> Self {
        RunConfig {
            seed: None,
            seeds: vec![1, 2, 3],
            data_seed: 7,
            scenes: 2500,
            val_fraction: 0.1,
            test_fraction: 0.1,
            classes: 24,
            attributes: 8,
            relations: 8,
            min_objects: 2,
            max_objects: 3,
            min_captions: 2,
            max_captions: 5,
            feature_dim: 32,
            feature_noise: 0.1,
            caption_variation: true,
            d_model: 48,
            heads: 4,
            encoder_blocks: 1,
            decoder_blocks: 1,
            semantic_blocks: 1,
            max_len: 8,
            bit_scale: 1.0,
            dropout: 0.1,
            stages: 2,
            fusion: Fusion::MeanProb,
            frozen_stages: 0,
            cascade_steps: 2500,
            semantic: true,
            gamma_min: -13.0,
            gamma_max: 5.0,
            steps: 50,
            time_delta: 0.0,
            self_conditioning: true,
            batch_size: 16,
            lr: 3e-3,
            warmup: 500,
            clip_norm: 1.0,
            stage1_steps: 4000,
            eval_every: 500,
            eval_samples: 250,
            label_smoothing: 0.1,
            self_cond_prob: 0.5,
            teacher_steps: 2000,
            teacher_lr: 1e-3,
            beam: 3,
            stage2_lr: 3e-4,
            stage2_steps: 400,
            stage2_eval_every: 100,
            samples_per_image: 5,
            patience: 3,
            temperature: 1.0,
            baseline_steps: 10,
            guided: true,
        }
    }
}

impl RunConfig {
    /// Full-scale settings: three blocks per stack, width 512, 8 heads,
    /// 20,000 warmup steps, second-stage rate 1e-5.
    pub fn paper() -> Self {
        RunConfig {
            d_model: 512,
            heads: 8,
            encoder_blocks: 3,
            decoder_blocks: 3,
            semantic_blocks: 3,
            max_len: 20,
            warmup: 20_000,
            lr: 5e-4,
            stage2_lr: 1e-5,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults, then `flags`, then the file's keys on top.
    pub fn layered(flags: toml::Table, file: Option<toml::Table>) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("config serializes");
        for (k, v) in flags.into_iter().chain(file.into_iter().flatten()) {
            table.insert(k, v);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenes < 64 {
            return bad(format!("scenes must be >= 64, got {}", self.scenes));
        }
        let held_out = self.val_fraction + self.test_fraction;
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && held_out < 1.0) {
            return bad("val/test fractions must be positive and sum below 1".into());
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return bad("need 2 <= min_objects <= max_objects".into());
        }
        if self.min_captions == 0 || self.max_captions < self.min_captions {
            return bad("need 1 <= min_captions <= max_captions".into());
        }
        if self.batch_size == 0 || self.samples_per_image == 0 || self.beam == 0 {
            return bad("batch_size, samples_per_image and beam must be >= 1".into());
        }
        if self.stage1_steps == 0 || self.teacher_steps == 0 || self.cascade_steps == 0 {
            return bad("stage1_steps, teacher_steps and cascade_steps must be >= 1".into());
        }
        if self.eval_every == 0 || self.stage2_eval_every == 0 || self.eval_samples == 0 {
            return bad("evaluation intervals and eval_samples must be >= 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("teacher_lr", self.teacher_lr),
            ("stage2_lr", self.stage2_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Smoothing(self.label_smoothing));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return bad("self_cond_prob outside [0, 1]".into());
        }
        if self.temperature < 0.0 {
            return bad("temperature must be >= 0".into());
        }
        if self.frozen_stages >= self.stages {
            return bad(format!(
                "frozen_stages {} leaves none of {} stages trainable",
                self.frozen_stages, self.stages
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        NoiseSchedule::new(self.gamma_min, self.gamma_max)?;
        self.sampler().validate()?;
        self.stage_config(crate::bitcodec::UNK + 2).validate()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.gamma_min, self.gamma_max).expect("validated")
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            time_delta: self.time_delta,
            stochastic: false,
            self_conditioning: self.self_conditioning,
        }
    }

    pub fn baseline_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.baseline_steps,
            ..self.sampler()
        }
    }

    pub fn stage_config(&self, vocab_size: usize) -> StageConfig {
        StageConfig {
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            semantic_blocks: self.semantic_blocks,
            d_model: self.d_model,
            heads: self.heads,
            feature_dim: self.feature_dim,
            vocab_size,
            max_len: self.max_len,
            retrieval_len: if self.semantic { self.max_len } else { 0 },
            bit_scale: self.bit_scale,
            dropout: self.dropout,
        }
    }

    pub fn cascade_config(&self, vocab_size: usize) -> CascadeConfig {
        CascadeConfig {
            stage: self.stage_config(vocab_size),
            stages: self.stages,
            fusion: self.fusion,
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required for training".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            seed: Some(4),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("d_modle = 64").unwrap_err();
        assert!(e.to_string().contains("d_modle"), "{e}");
    }

    #[test]
    fn file_overrides_flags() {
        let flags: toml::Table = toml::from_str("d_model = 64\nheads = 2").unwrap();
        let file: toml::Table = toml::from_str("d_model = 32").unwrap();
        let c = RunConfig::layered(flags, Some(file)).unwrap();
        assert_eq!((c.d_model, c.heads), (32, 2));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("heads = 5").is_err());
        assert!(RunConfig::from_toml("scenes = 10").is_err());
        assert!(RunConfig::from_toml("label_smoothing = 1.0").is_err());
        assert!(RunConfig::from_toml("steps = 0").is_err());
    }

    #[test]
    fn paper_settings_validate() {
        RunConfig::paper().validate().unwrap();
    }
}
