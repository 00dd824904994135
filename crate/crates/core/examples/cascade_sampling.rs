//! An untrained three-stage cascade under both fusion modes. Every reverse
//! step calls each stage once.

use capdiff::captioner::StageConfig;
use capdiff::cascade::{Cascade, CascadeConfig, CascadeDenoiser, Fusion};
use capdiff::diffusion::{gaussian, sample, NoiseSchedule, SamplerConfig};
use capdiff_autodiff::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capdiff::Result<()> {
    let stage = StageConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        semantic_blocks: 1,
        d_model: 32,
        heads: 4,
        feature_dim: 12,
        vocab_size: 40,
        max_len: 6,
        retrieval_len: 6,
        bit_scale: 1.0,
        dropout: 0.0,
    };
    let features = gaussian::<f32>(&mut ChaCha8Rng::seed_from_u64(1), &[3, 12]);
    let retrieved = [5, 9, 17, 3, 22, 8];
    let sampler = SamplerConfig {
        steps: 20,
        ..SamplerConfig::default()
    };
    for fusion in [Fusion::MeanProb, Fusion::MeanBits] {
        let mut params = ParamStore::new();
        let config = CascadeConfig {
            stage: stage.clone(),
            stages: 3,
            fusion,
        };
        let cascade = Cascade::new(&mut params, config, &mut ChaCha8Rng::seed_from_u64(7))?;
        let mut den = CascadeDenoiser::new(&cascade, &params, &features, &retrieved, true)?;
        let out = sample(
            &mut den,
            cascade.codec(),
            &sampler,
            &NoiseSchedule::default(),
            stage.max_len,
            &mut ChaCha8Rng::seed_from_u64(3),
        )?;
        println!(
            "{fusion:?}: {} parameters, {} steps, {} stage calls, words {:?}",
            params.numel(),
            out.denoiser_calls,
            den.stage_calls,
            out.words
        );
    }
    Ok(())
}
