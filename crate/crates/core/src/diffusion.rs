//! Continuous-time Gaussian diffusion over analog bits.
//!
//! The noise level is a log-SNR schedule `γ(t')` on `t' ∈ [0, 1]`, with
//! `α(t')² = sigmoid(−γ)` and `σ(t')² = sigmoid(γ)`. Corruption is
//! `x_t = α·x₀ + σ·ε`; generation walks a uniform grid of `T` steps backwards
//! using the denoiser's `x₀` estimate at each step.

use capdiff_autodiff::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bitcodec::BitCodec;
use crate::{Error, Result};

/// Linear log-SNR schedule between two endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    gamma_min: f64,
    gamma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            gamma_min: -13.0,
            gamma_max: 5.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl NoiseSchedule {
    pub fn new(gamma_min: f64, gamma_max: f64) -> Result<Self> {
        if !(gamma_min.is_finite() && gamma_max.is_finite()) || gamma_max <= gamma_min {
            return Err(Error::Schedule(format!(
                "need finite gamma_min < gamma_max, got {gamma_min} and {gamma_max}"
            )));
        }
        Ok(NoiseSchedule {
            gamma_min,
            gamma_max,
        })
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeRange(t));
        }
        Ok(self.gamma_min + t * (self.gamma_max - self.gamma_min))
    }

    /// Signal coefficient `√sigmoid(−γ(t'))`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(sigmoid(-self.gamma(t)?).sqrt())
    }

    /// Noise coefficient `√sigmoid(γ(t'))`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(sigmoid(self.gamma(t)?).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of reverse steps `T`.
    pub steps: usize,
    /// Time difference `Δ`: each step jumps to `s = t − 1 − Δ`.
    pub time_delta: f64,
    /// Add `σ(s', t')·ε` at every reverse step.
    pub stochastic: bool,
    /// Feed the previous step's `x₀` estimate back to the denoiser.
    pub self_conditioning: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            time_delta: 0.0,
            stochastic: false,
            self_conditioning: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.time_delta >= 0.0) {
            return Err(Error::Config(format!(
                "time difference must be >= 0, got {}",
                self.time_delta
            )));
        }
        Ok(())
    }

    /// `(t', s')` for each reverse step, from `t = T` down to `t = 1`.
    /// `s` is clamped at 0.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let total = self.steps as f64;
        (1..=self.steps)
            .rev()
            .map(|t| {
                let t = t as f64;
                let s = (t - 1.0 - self.time_delta).max(0.0);
                (t / total, s / total)
            })
            .collect()
    }
}

/// Standard normal noise of the given shape.
pub fn gaussian<F: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::lit(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// `x_t = α(t')·x₀ + σ(t')·ε` at a continuous time.
pub fn diffuse_at<F: Real>(
    x0: &Tensor<F>,
    t: f64,
    noise: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(
            "forward_diffuse",
            format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
        ));
    }
    let a = F::lit(schedule.alpha(t)?);
    let s = F::lit(schedule.sigma(t)?);
    Ok(x0.zip_map(noise, |x, e| a * x + s * e)?)
}

/// Forward corruption at grid step `t ∈ (0, T]`, i.e. `t' = t/T`.
pub fn forward_diffuse<F: Real>(
    x0: &Tensor<F>,
    t: usize,
    steps: usize,
    noise: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if t == 0 || t > steps {
        return Err(Error::TimeRange(t as f64 / steps.max(1) as f64));
    }
    diffuse_at(x0, t as f64 / steps as f64, noise, schedule)
}

/// Coefficients of one reverse transition from `t'` to `s'`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoefficients {
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub sigma_s: f64,
    /// `−expm1(γ(s') − γ(t'))`
    pub c: f64,
}

impl ReverseCoefficients {
    pub fn new(t: f64, s: f64, schedule: &NoiseSchedule) -> Result<Self> {
        if s > t {
            return Err(Error::StepOrder { s, t });
        }
        let (gs, gt) = (schedule.gamma(s)?, schedule.gamma(t)?);
        Ok(ReverseCoefficients {
            alpha_s: sigmoid(-gs).sqrt(),
            alpha_t: sigmoid(-gt).sqrt(),
            sigma_s: sigmoid(gs).sqrt(),
            c: -(gs - gt).exp_m1(),
        })
    }

    /// Standard deviation of the injected noise, `√(σ_s²·c)`.
    pub fn noise_std(&self) -> f64 {
        (self.sigma_s * self.sigma_s * self.c).sqrt()
    }
}

/// One reverse transition:
/// `u = α_s·(x_t·(1 − c)/α_t + c·x̂₀)`, `x_{t−1} = u + √(σ_s²·c)·ε`.
/// Pass `noise = None` for the deterministic variant.
pub fn reverse_step<F: Real>(
    x_t: &Tensor<F>,
    t: f64,
    s: f64,
    x0_hat: &Tensor<F>,
    noise: Option<&Tensor<F>>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    if x_t.shape() != x0_hat.shape() {
        return Err(Error::shape(
            "reverse_step",
            format!("x_t {:?} vs x0_hat {:?}", x_t.shape(), x0_hat.shape()),
        ));
    }
    let k = ReverseCoefficients::new(t, s, schedule)?;
    let keep = F::lit((1.0 - k.c) / k.alpha_t);
    let (alpha_s, c) = (F::lit(k.alpha_s), F::lit(k.c));
    let mut out = x_t.zip_map(x0_hat, |x, x0| alpha_s * (x * keep + c * x0))?;
    if let Some(eps) = noise {
        if eps.shape() != x_t.shape() {
            return Err(Error::shape(
                "reverse_step",
                format!("noise {:?} vs x_t {:?}", eps.shape(), x_t.shape()),
            ));
        }
        let std = F::lit(k.noise_std());
        out = out.zip_map(eps, |u, e| u + std * e)?;
    }
    Ok(out)
}

/// What the sampler hands the denoiser at each step.
#[derive(Debug)]
pub struct DenoiseInput<'a, F> {
    pub x_t: &'a Tensor<F>,
    pub t: f64,
    pub gamma: f64,
    /// Previous step's `x₀` estimate, zeros on the first step or when
    /// self-conditioning is off.
    pub self_cond: &'a Tensor<F>,
}

/// Denoiser result: the `x₀` estimate (`N_s × n`) and per-position word
/// distributions (`N_s × W`).
#[derive(Clone, Debug)]
pub struct DenoiseOutput<F> {
    pub x0_hat: Tensor<F>,
    pub probs: Tensor<F>,
}

pub trait Denoiser<F> {
    fn denoise(&mut self, input: &DenoiseInput<'_, F>) -> Result<DenoiseOutput<F>>;
}

impl<F, Fun> Denoiser<F> for Fun
where
    Fun: FnMut(&DenoiseInput<'_, F>) -> Result<DenoiseOutput<F>>,
{
    fn denoise(&mut self, input: &DenoiseInput<'_, F>) -> Result<DenoiseOutput<F>> {
        self(input)
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput<F> {
    /// Per-position argmax of the last denoiser distribution.
    pub words: Vec<usize>,
    pub probs: Tensor<F>,
    /// Quantized `x₀` estimate after every step, for inspection.
    pub path: Vec<Vec<usize>>,
    /// Latent state after the last reverse step.
    pub final_state: Tensor<F>,
    pub denoiser_calls: usize,
}

/// Reverse chain from `x_T ~ N(0, I)`.
pub fn sample<F: Real, D: Denoiser<F>>(
    denoiser: &mut D,
    codec: &BitCodec,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    length: usize,
    rng: &mut impl Rng,
) -> Result<SampleOutput<F>> {
    let x_start = gaussian(rng, &[length, codec.bits()]);
    sample_from(denoiser, x_start, codec, config, schedule, rng)
}

/// Reverse chain from a given `x_T`.
pub fn sample_from<F: Real, D: Denoiser<F>>(
    denoiser: &mut D,
    x_start: Tensor<F>,
    codec: &BitCodec,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<SampleOutput<F>> {
    config.validate()?;
    let shape = x_start.shape().to_vec();
    let mut x = x_start;
    let mut self_cond = Tensor::zeros(&shape);
    let mut last: Option<DenoiseOutput<F>> = None;
    let mut path = Vec::with_capacity(config.steps);
    let mut calls = 0;

    for (t, s) in config.grid() {
        let input = DenoiseInput {
            x_t: &x,
            t,
            gamma: schedule.gamma(t)?,
            self_cond: &self_cond,
        };
        let out = denoiser.denoise(&input)?;
        calls += 1;
        if out.x0_hat.shape() != shape.as_slice() {
            return Err(Error::shape(
                "sample",
                format!(
                    "denoiser returned {:?}, expected {shape:?}",
                    out.x0_hat.shape()
                ),
            ));
        }
        let noise = config.stochastic.then(|| gaussian(rng, &shape));
        x = reverse_step(&x, t, s, &out.x0_hat, noise.as_ref(), schedule)?;
        path.push(codec.quantize_decode(&out.x0_hat)?);
        if config.self_conditioning {
            self_cond = out.x0_hat.clone();
        }
        last = Some(out);
    }

    let last = last.expect("at least one step");
    Ok(SampleOutput {
        words: argmax_rows(&last.probs),
        probs: last.probs,
        path,
        final_state: x,
        denoiser_calls: calls,
    })
}

/// Index of the largest entry in each row, lowest index on ties.
pub fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Mean squared error between the `x₀` estimate and the clean bits.
pub fn l_bit<F: Real>(tape: &mut Tape<F>, x0_hat: Var, x0: Var) -> Result<Var> {
    let d = tape.sub(x0_hat, x0)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_endpoints_and_midpoint() {
        let s = NoiseSchedule::new(-10.0, 10.0).unwrap();
        assert_eq!(s.gamma(0.0).unwrap(), -10.0);
        assert_eq!(s.gamma(1.0).unwrap(), 10.0);
        assert_eq!(s.gamma(0.5).unwrap(), 0.0);
        assert!((s.alpha(0.5).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma(0.5).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(s.gamma(1.01), Err(Error::TimeRange(_))));
        assert!(s.gamma(-0.01).is_err());
    }

    #[test]
    fn schedule_rejects_non_increasing_endpoints() {
        assert!(NoiseSchedule::new(1.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, -1.0).is_err());
    }

    #[test]
    fn gamma_is_monotone() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            if a < b {
                assert!(s.gamma(a).unwrap() < s.gamma(b).unwrap());
            }
        }
    }

    #[test]
    fn zero_noise_scales_the_signal() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_f64(&[2, 2], &[1., -1., -1., 1.]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let xt = forward_diffuse(&x0, 20, 50, &zero, &s).unwrap();
        let a = s.alpha(0.4).unwrap();
        assert_eq!(xt, x0.map(|v| v * a));
    }

    #[test]
    fn saturated_schedule_returns_noise() {
        let s = NoiseSchedule::new(-13.0, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::from_f64(&[3, 2], &[1., -1., 1., 1., -1., -1.]).unwrap();
        let eps = gaussian(&mut rng, &[3, 2]);
        let xt = forward_diffuse(&x0, 10, 10, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&eps) < 1e-6);
    }

    #[test]
    fn forward_rejects_bad_step_and_shapes() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::zeros(&[2, 2]);
        assert!(forward_diffuse(&x0, 0, 10, &x0, &s).is_err());
        assert!(forward_diffuse(&x0, 11, 10, &x0, &s).is_err());
        assert!(forward_diffuse(&x0, 5, 10, &Tensor::zeros(&[2, 3]), &s).is_err());
    }

    #[test]
    fn identity_step_when_times_coincide() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt: Tensor<f64> = gaussian(&mut rng, &[4, 3]);
        let x0 = gaussian(&mut rng, &[4, 3]);
        let eps = gaussian(&mut rng, &[4, 3]);
        let k = ReverseCoefficients::new(0.3, 0.3, &s).unwrap();
        assert_eq!(k.c, 0.0);
        assert_eq!(k.noise_std(), 0.0);
        let out = reverse_step(&xt, 0.3, 0.3, &x0, Some(&eps), &s).unwrap();
        assert!(out.max_abs_diff(&xt) <= 1e-12);
    }

    #[test]
    fn reverse_step_rejects_inverted_times() {
        let s = NoiseSchedule::default();
        let x = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(
            reverse_step(&x, 0.2, 0.3, &x, None, &s),
            Err(Error::StepOrder { .. })
        ));
    }

    #[test]
    fn grid_clamps_final_step() {
        let cfg = SamplerConfig {
            steps: 4,
            time_delta: 1.5,
            ..SamplerConfig::default()
        };
        let grid = cfg.grid();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[0], (1.0, 1.5 / 4.0));
        assert_eq!(grid[2], (0.5, 0.0));
        assert_eq!(grid[3], (0.25, 0.0));
    }

    #[test]
    fn l_bit_values() {
        let mut tape = Tape::<f64>::new();
        let x0 = tape.constant(Tensor::from_f64(&[2, 3], &[1., -1., 1., -1., -1., 1.]).unwrap());
        let same = l_bit(&mut tape, x0, x0).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let shifted = tape.shift(x0, 1.0);
        let one = l_bit(&mut tape, shifted, x0).unwrap();
        assert_eq!(tape.value(one).item(), 1.0);
        let other = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(l_bit(&mut tape, other, x0).is_err());
    }
}
