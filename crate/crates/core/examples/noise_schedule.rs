//! The log-SNR schedule and a reverse chain driven by a denoiser that knows
//! the answer up to a shrinking error.

use capdiff::bitcodec::BitCodec;
use capdiff::diffusion::{
    gaussian, sample, DenoiseInput, DenoiseOutput, NoiseSchedule, SamplerConfig,
};
use capdiff_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capdiff::Result<()> {
    let schedule = NoiseSchedule::default();
    println!("   t   gamma   alpha   sigma");
    for k in 0..=5 {
        let t = k as f64 / 5.0;
        println!(
            "{t:.1} {:>7.2} {:>7.4} {:>7.4}",
            schedule.gamma(t)?,
            schedule.alpha(t)?,
            schedule.sigma(t)?
        );
    }

    let w = 16;
    let codec = BitCodec::new(w, 1.0)?;
    let target = [3, 14, 7, 7, 0, 9];
    let clean = codec.encode::<f64>(&target)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(11);
    // The estimate is the clean bits plus an error that fades with t.
    let mut denoiser = |inp: &DenoiseInput<'_, f64>| -> capdiff::Result<DenoiseOutput<f64>> {
        let err = gaussian::<f64>(&mut noise_rng, clean.shape());
        let x0_hat = clean.zip_map(&err, |c, e| (c + 1.5 * inp.t * e).clamp(-1.0, 1.0))?;
        let words = codec.quantize_decode(&x0_hat)?;
        let mut probs = Tensor::zeros(&[target.len(), w]);
        for (r, &c) in words.iter().enumerate() {
            probs.set(r, c, 1.0);
        }
        Ok(DenoiseOutput { x0_hat, probs })
    };
    let config = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = sample(
        &mut denoiser,
        &codec,
        &config,
        &schedule,
        target.len(),
        &mut rng,
    )?;
    for (k, words) in out.path.iter().enumerate() {
        println!("step {:>2}: {words:?}", k + 1);
    }
    println!("target : {target:?}");
    Ok(())
}
