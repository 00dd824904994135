//! Tiny cascade whose sentence space is small enough to enumerate.

use capdiff::captioner::StageConfig;
use capdiff::cascade::{Cascade, CascadeConfig, Fusion};
use capdiff::diffusion::{gaussian, NoiseSchedule};
use capdiff::gscst::{policy_pass_at, surrogate, RewardBatch};
use capdiff::metrics::RefCorpus;
use capdiff_autodiff::{GradBuffer, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const W: usize = 5;
pub const LEN: usize = 2;

pub fn config() -> StageConfig {
    StageConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        semantic_blocks: 1,
        d_model: 8,
        heads: 2,
        feature_dim: 3,
        vocab_size: W,
        max_len: LEN,
        retrieval_len: 2,
        bit_scale: 1.0,
        dropout: 0.0,
    }
}

pub struct Fixture {
    pub model: Cascade,
    pub params: ParamStore<f64>,
    pub features: Tensor<f64>,
    pub x_t: Tensor<f64>,
    pub corpus: RefCorpus<usize>,
}

pub fn fixture(stages: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut params = ParamStore::new();
    let cfg = CascadeConfig {
        stage: config(),
        stages,
        fusion: Fusion::MeanProb,
    };
    let model = Cascade::new(&mut params, cfg, &mut rng).unwrap();
    let features = gaussian(&mut rng, &[2, 3]);
    let x_t = gaussian(&mut rng, &[LEN, 3]);
    let corpus = RefCorpus::new([
        (0, vec![vec![2, 3], vec![2, 3, 4]]),
        (1, vec![vec![4, 1]]),
        (2, vec![vec![3, 3]]),
    ])
    .unwrap();
    Fixture {
        model,
        params,
        features,
        x_t,
        corpus,
    }
}

pub const T: f64 = 0.6;
pub const RETRIEVED: [usize; 2] = [2, 4];

pub fn log_probs(f: &Fixture, params: &ParamStore<f64>) -> Tensor<f64> {
    let pass = policy_pass_at(
        &f.model,
        params,
        &f.features,
        &f.x_t,
        T,
        &RETRIEVED,
        &NoiseSchedule::default(),
    )
    .unwrap();
    pass.graph.value(pass.log_probs).clone()
}

pub fn reward(f: &Fixture, s: &[usize]) -> f64 {
    let words: Vec<usize> = s.iter().copied().filter(|&w| w != 0).collect();
    f.corpus.cider_d(&words, 0).unwrap()
}

/// Surrogate gradient of one batch, accumulated into `grads`.
pub fn add_grads(f: &Fixture, batch: &RewardBatch, grads: &mut GradBuffer<f64>) {
    let mut pass = policy_pass_at(
        &f.model,
        &f.params,
        &f.features,
        &f.x_t,
        T,
        &RETRIEVED,
        &NoiseSchedule::default(),
    )
    .unwrap();
    let loss = surrogate(&mut pass, batch).unwrap();
    let pg = pass.graph.backward(loss).unwrap();
    grads.accumulate(&pg);
}

pub fn batch_grads(f: &Fixture, batch: &RewardBatch) -> GradBuffer<f64> {
    let mut grads = GradBuffer::zeros_like(&f.params);
    add_grads(f, batch, &mut grads);
    grads
}
