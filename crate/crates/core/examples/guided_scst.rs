//! Guided self-critical updates on a tiny untrained captioner. A reference
//! caption stands in for the teacher sentence that is forced into every
//! sample set; the sampled sentences drift toward it as the policy learns.

use capdiff::captioner::StageConfig;
use capdiff::cascade::{Cascade, CascadeConfig, Fusion};
use capdiff::diffusion::{gaussian, NoiseSchedule, SamplerConfig};
use capdiff::gscst::{baseline_decode, policy_pass, sample_candidates, surrogate};
use capdiff::metrics::RefCorpus;
use capdiff_autodiff::{adam_step, AdamConfig, AdamState, GradBuffer, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capdiff::Result<()> {
    let len = 5;
    let stage = StageConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        semantic_blocks: 1,
        d_model: 32,
        heads: 4,
        feature_dim: 8,
        vocab_size: 12,
        max_len: len,
        retrieval_len: 0,
        bit_scale: 1.0,
        dropout: 0.0,
    };
    let mut params = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = CascadeConfig {
        stage,
        stages: 1,
        fusion: Fusion::MeanProb,
    };
    let model = Cascade::new(&mut params, config, &mut rng)?;

    let captions: [Vec<usize>; 3] = [
        vec![2, 5, 7, 3, 9],
        vec![2, 6, 8, 4, 10],
        vec![3, 5, 11, 2, 8],
    ];
    let images: Vec<_> = (0..3).map(|_| gaussian::<f32>(&mut rng, &[3, 8])).collect();
    let corpus = RefCorpus::new(
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u64, vec![c.clone()])),
    )?;
    let schedule = NoiseSchedule::default();
    let chain = SamplerConfig {
        steps: 5,
        ..SamplerConfig::default()
    };
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
    );

    for step in 0..=60 {
        let mut grads = GradBuffer::zeros_like(&params);
        let (mut sampled, mut baseline, mut n) = (0.0, 0.0, 0);
        for (i, (feats, guide)) in images.iter().zip(&captions).enumerate() {
            let mut pass = policy_pass(&model, &params, feats, guide, &[], &schedule, &mut rng)?;
            let mut batch = sample_candidates(&pass, Some(guide), 5, 1.0, &mut rng)?;
            batch.baseline =
                baseline_decode(&model, &params, feats, &[], &chain, &schedule, 0, i as u64)?;
            batch.score(&corpus, i as u64)?;
            for (j, r) in batch.rewards.iter().enumerate() {
                if Some(j) != batch.guide {
                    sampled += r;
                    n += 1;
                }
            }
            baseline += batch.baseline_reward;
            let loss = surrogate(&mut pass, &batch)?;
            grads.accumulate(&pass.graph.backward(loss)?);
        }
        if step % 15 == 0 {
            println!(
                "step {step:>2}: mean sampled reward {:.3}, baseline reward {:.3}",
                sampled / n as f64,
                baseline / images.len() as f64
            );
        }
        grads.scale(1.0 / images.len() as f32);
        adam_step(&mut params, &grads, &mut adam)?;
    }
    Ok(())
}
