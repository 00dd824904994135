//! Perfect denoiser and sentence helpers for sampler checks.

use capdiff::bitcodec::BitCodec;
use capdiff::diffusion::{DenoiseInput, DenoiseOutput};
use capdiff::Result;
use capdiff_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn one_hot(words: &[usize], w: usize) -> Tensor<f64> {
    let mut p = Tensor::zeros(&[words.len(), w]);
    for (r, &c) in words.iter().enumerate() {
        p.set(r, c, 1.0);
    }
    p
}

pub fn random_sentence(rng: &mut ChaCha8Rng, w: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..w)).collect()
}

/// Denoiser that always answers with the clean sentence.
pub fn oracle(
    codec: &BitCodec,
    words: &[usize],
) -> impl FnMut(&DenoiseInput<'_, f64>) -> Result<DenoiseOutput<f64>> {
    let x0 = codec.encode::<f64>(words).unwrap();
    let probs = one_hot(words, codec.vocab_size());
    move |_| {
        Ok(DenoiseOutput {
            x0_hat: x0.clone(),
            probs: probs.clone(),
        })
    }
}
