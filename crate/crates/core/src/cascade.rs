//! Stacked Diffusion Transformer stages and their fusion.

use std::str::FromStr;

use capdiff_autodiff::{GradBuffer, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitcodec::BitCodec;
use crate::captioner::{
    probs_to_bits, stage_loss, Conditioning, Stage, StageConfig, StageOutput, StageVars,
};
use crate::diffusion::{
    self, gaussian, DenoiseInput, DenoiseOutput, Denoiser, NoiseSchedule, SampleOutput,
    SamplerConfig,
};
use crate::nn::{no_dropout, Dropout};
use crate::{Error, Result};

/// How a stage's output is merged with the running output of the stages
/// before it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Average the bit estimates; keep the newer stage's distribution.
    MeanBits,
    /// Average the distributions and recompute bits from them.
    #[default]
    MeanProb,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_bits" => Ok(Fusion::MeanBits),
            "mean_prob" => Ok(Fusion::MeanProb),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Merges `current` (stage `i`) with `previous` (the fused output up to
/// stage `i − 1`).
pub fn fuse<F: Real>(
    current: &StageOutput<F>,
    previous: &StageOutput<F>,
    mode: Fusion,
    codec: &BitCodec,
) -> Result<StageOutput<F>> {
    if current.x0_hat.shape() != previous.x0_hat.shape()
        || current.probs.shape() != previous.probs.shape()
    {
        return Err(Error::shape(
            "fuse",
            format!(
                "bits {:?}/{:?}, probs {:?}/{:?}",
                current.x0_hat.shape(),
                previous.x0_hat.shape(),
                current.probs.shape(),
                previous.probs.shape()
            ),
        ));
    }
    let half = F::lit(0.5);
    match mode {
        Fusion::MeanBits => Ok(StageOutput {
            x0_hat: current
                .x0_hat
                .zip_map(&previous.x0_hat, |a, b| (a + b) * half)?,
            probs: current.probs.clone(),
        }),
        Fusion::MeanProb => {
            let mut probs = current
                .probs
                .zip_map(&previous.probs, |a, b| (a + b) * half)?;
            for r in 0..probs.rows() {
                let row = probs.row_mut(r);
                let total: F = row.iter().copied().sum();
                if total > F::zero() {
                    row.iter_mut().for_each(|p| *p /= total);
                }
            }
            let x0_hat = probs_to_bits(&probs, codec)?;
            Ok(StageOutput { x0_hat, probs })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stage: StageConfig,
    /// `M`
    pub stages: usize,
    pub fusion: Fusion,
}

/// `M` stages sharing one codec and sentence length.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub config: CascadeConfig,
    stages: Vec<Stage>,
}

impl Cascade {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        config: CascadeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.stages == 0 {
            return Err(Error::Config("cascade needs at least one stage".into()));
        }
        let stages = (1..=config.stages)
            .map(|i| Stage::new(store, i, config.stage.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Cascade { config, stages })
    }

    /// Excludes the parameters of the first `count` stages from training.
    pub fn freeze<F: Real>(&self, store: &mut ParamStore<F>, count: usize) -> Result<()> {
        if count > self.len() {
            return Err(Error::Config(format!(
                "cannot freeze {count} of {} stages",
                self.len()
            )));
        }
        let prefixes: Vec<String> = (1..=count).map(|i| format!("stage{i}.")).collect();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if prefixes
                .iter()
                .any(|p| store.name(id).starts_with(p.as_str()))
            {
                store.set_trainable(id, false);
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn codec(&self) -> &BitCodec {
        self.stages[0].codec()
    }

    pub fn bit_shape(&self) -> [usize; 2] {
        [self.config.stage.max_len, self.codec().bits()]
    }

    /// Visual tokens of every stage, recorded on `g`.
    pub fn encode_visual<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        features: &Tensor<F>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Vec<Var>> {
        self.stages
            .iter()
            .map(|s| s.encode_visual(g, features, drop))
            .collect()
    }

    /// Runs every stage once. Stage `i ≥ 2` sees the detached fused
    /// prediction of the stages before it. Returns the per-stage tape
    /// handles and the fused concrete outputs.
    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        x_t: &Tensor<F>,
        gamma: f64,
        visual: &[Var],
        self_cond: &[Tensor<F>],
        retrieved: &[usize],
        drop: &mut Dropout<'_, R>,
    ) -> Result<(Vec<StageVars>, Vec<StageOutput<F>>)> {
        if visual.len() != self.len() || self_cond.len() != self.len() {
            return Err(Error::shape(
                "cascade_forward",
                format!(
                    "{} stages, {} visual encodings, {} self-conditioning inputs",
                    self.len(),
                    visual.len(),
                    self_cond.len()
                ),
            ));
        }
        let mut vars = Vec::with_capacity(self.len());
        let mut fused: Vec<StageOutput<F>> = Vec::with_capacity(self.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let cond = Conditioning {
                self_cond: &self_cond[i],
                prev_stage: fused.last().map(|f| &f.x0_hat),
                retrieved,
            };
            let out = stage.forward(g, x_t, gamma, visual[i], &cond, drop)?;
            let value = StageOutput::read(g, &out);
            let merged = match fused.last() {
                None => value,
                Some(prev) => fuse(&value, prev, self.config.fusion, self.codec())?,
            };
            vars.push(out);
            fused.push(merged);
        }
        Ok((vars, fused))
    }

    /// Row-wise log-probabilities of the final fused distribution, on the
    /// tape so they can be differentiated.
    pub fn fused_log_probs<F: Real>(&self, g: &mut Graph<F>, vars: &[StageVars]) -> Result<Var> {
        let last = vars
            .last()
            .ok_or_else(|| Error::Config("no stages".into()))?;
        if vars.len() == 1 || self.config.fusion == Fusion::MeanBits {
            return Ok(g.log_softmax(last.logits));
        }
        let mut p = vars[0].probs;
        for v in &vars[1..] {
            let s = g.add(v.probs, p)?;
            p = g.scale(s, F::lit(0.5));
        }
        // Keeps log finite when a fused probability underflows.
        let p = g.shift(p, F::lit(1e-12));
        Ok(g.log(p))
    }
}

/// One supervised example as seen by the cascade.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a, F> {
    pub features: &'a Tensor<F>,
    /// Padded target words, length `N_s`.
    pub targets: &'a [usize],
    pub retrieved: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub smoothing: f64,
    /// Probability of feeding a gradient-free `x̃₀` estimate.
    pub self_cond_prob: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            smoothing: 0.1,
            self_cond_prob: 0.5,
        }
    }
}

/// Per-stage loss values of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLosses {
    pub total: Vec<f64>,
    pub xe: Vec<f64>,
    pub bit: Vec<f64>,
}

impl StageLosses {
    pub fn sum(&self) -> f64 {
        self.total.iter().sum()
    }
}

/// Forward and backward pass of one example; gradients are added to
/// `grads`. Every stage gets its own `L_XE + L_bit`, summed into the total.
pub fn train_example<F: Real, R: Rng>(
    model: &Cascade,
    params: &ParamStore<F>,
    example: &TrainExample<'_, F>,
    options: &TrainOptions,
    schedule: &NoiseSchedule,
    grads: &mut GradBuffer<F>,
    rng: &mut R,
) -> Result<StageLosses> {
    let codec = model.codec();
    let padded = pad_targets(example.targets, model.config.stage.max_len);
    let x0: Tensor<F> = codec.encode(&padded)?;
    let t: f64 = 1.0 - rng.random::<f64>();
    let eps = gaussian(rng, x0.shape());
    let x_t = diffusion::diffuse_at(&x0, t, &eps, schedule)?;
    let gamma = schedule.gamma(t)?;
    let m = model.len();

    let mut self_cond = vec![Tensor::zeros(x0.shape()); m];
    if rng.random::<f64>() < options.self_cond_prob {
        let mut g = Graph::new(params, false);
        let mut off = Dropout::<R>::off();
        let visual = model.encode_visual(&mut g, example.features, &mut off)?;
        let (vars, _) = model.forward(
            &mut g,
            &x_t,
            gamma,
            &visual,
            &self_cond,
            example.retrieved,
            &mut off,
        )?;
        self_cond = vars.iter().map(|v| g.value(v.bits).clone()).collect();
    }

    let mut g = Graph::new(params, true);
    let p = model.config.stage.dropout;
    let mut drop = Dropout {
        p,
        rng: Some(&mut *rng),
    };
    let visual = model.encode_visual(&mut g, example.features, &mut drop)?;
    let (vars, _) = model.forward(
        &mut g,
        &x_t,
        gamma,
        &visual,
        &self_cond,
        example.retrieved,
        &mut drop,
    )?;
    let mut losses = StageLosses {
        total: Vec::with_capacity(m),
        xe: Vec::with_capacity(m),
        bit: Vec::with_capacity(m),
    };
    let mut total: Option<Var> = None;
    for v in &vars {
        let l = stage_loss(&mut g, v, &x0, &padded, options.smoothing)?;
        losses.total.push(g.value(l.total).item().as_f64());
        losses.xe.push(g.value(l.xe).item().as_f64());
        losses.bit.push(g.value(l.bit).item().as_f64());
        total = Some(match total {
            None => l.total,
            Some(acc) => g.add(acc, l.total)?,
        });
    }
    let total = total.expect("at least one stage");
    let pg = g.backward(total)?;
    grads.accumulate(&pg);
    Ok(losses)
}

/// Pads with PAD or truncates to `len`.
pub fn pad_targets(words: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = words.iter().copied().take(len).collect();
    out.resize(len, crate::bitcodec::PAD);
    out
}

/// Denoiser that evaluates the whole cascade at each step, keeping one
/// self-conditioning buffer per stage.
pub struct CascadeDenoiser<'m, F> {
    model: &'m Cascade,
    params: &'m ParamStore<F>,
    visual: Vec<Tensor<F>>,
    retrieved: &'m [usize],
    buffers: Vec<Tensor<F>>,
    self_conditioning: bool,
    /// Stage evaluations performed so far.
    pub stage_calls: usize,
}

impl<'m, F: Real> CascadeDenoiser<'m, F> {
    pub fn new(
        model: &'m Cascade,
        params: &'m ParamStore<F>,
        features: &Tensor<F>,
        retrieved: &'m [usize],
        self_conditioning: bool,
    ) -> Result<Self> {
        let mut g = Graph::new(params, false);
        let vars = model.encode_visual(&mut g, features, &mut no_dropout())?;
        let visual = vars.iter().map(|&v| g.value(v).clone()).collect();
        let shape = model.bit_shape();
        Ok(CascadeDenoiser {
            model,
            params,
            visual,
            retrieved,
            buffers: vec![Tensor::zeros(&shape); model.len()],
            self_conditioning,
            stage_calls: 0,
        })
    }
}

impl<F: Real> Denoiser<F> for CascadeDenoiser<'_, F> {
    fn denoise(&mut self, input: &DenoiseInput<'_, F>) -> Result<DenoiseOutput<F>> {
        let mut g = Graph::new(self.params, false);
        let visual: Vec<Var> = self.visual.iter().map(|v| g.constant(v.clone())).collect();
        let (vars, mut fused) = self.model.forward(
            &mut g,
            input.x_t,
            input.gamma,
            &visual,
            &self.buffers,
            self.retrieved,
            &mut no_dropout(),
        )?;
        self.stage_calls += vars.len();
        if self.self_conditioning {
            self.buffers = vars.iter().map(|v| g.value(v.bits).clone()).collect();
        }
        let last = fused.pop().expect("at least one stage");
        Ok(DenoiseOutput {
            x0_hat: last.x0_hat,
            probs: last.probs,
        })
    }
}

/// Generates a caption for one image through the full reverse chain.
pub fn cascade_sample<F: Real>(
    model: &Cascade,
    params: &ParamStore<F>,
    features: &Tensor<F>,
    retrieved: &[usize],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<SampleOutput<F>> {
    let mut den =
        CascadeDenoiser::new(model, params, features, retrieved, config.self_conditioning)?;
    diffusion::sample(
        &mut den,
        model.codec(),
        config,
        schedule,
        model.config.stage.max_len,
        rng,
    )
}
