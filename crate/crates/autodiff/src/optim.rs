use crate::{Error, GradBuffer, ParamStore, Real, Result, Tensor};

/// Learning-rate multiplier over optimizer steps (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp to the base rate over `warmup` steps, then decay with the
    /// inverse square root of the step.
    WarmupInvSqrt {
        warmup: u64,
    },
}

impl LrSchedule {
    pub fn factor(self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupInvSqrt { warmup: 0 } => 1.0,
            LrSchedule::WarmupInvSqrt { warmup } => {
                let w = warmup as f64;
                (step / w).min((w / step).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    /// Rescale the whole gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: LrSchedule::Constant,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.schedule.factor(step)
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = |id| vec![F::zero(); params.get(id).numel()];
        AdamState {
            config,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moment buffers as named flat tensors, for resumable checkpoints.
    pub fn export(&self) -> Vec<(String, Tensor<F>)> {
        let flat = |i: usize, kind: &str, buf: &Vec<F>| {
            (
                format!("adam.{kind}.{i}"),
                Tensor::new(vec![buf.len()], buf.clone()).expect("flat"),
            )
        };
        self.m
            .iter()
            .enumerate()
            .map(|(i, b)| flat(i, "m", b))
            .chain(self.v.iter().enumerate().map(|(i, b)| flat(i, "v", b)))
            .collect()
    }

    pub fn restore(&mut self, step: u64, entries: &[(String, Tensor<F>)]) -> Result<()> {
        for (name, t) in entries {
            let mut parts = name.split('.');
            let (Some("adam"), Some(kind), Some(idx)) = (parts.next(), parts.next(), parts.next())
            else {
                continue;
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad optimizer entry `{name}`")))?;
            let buf = match kind {
                "m" => self.m.get_mut(idx),
                "v" => self.v.get_mut(idx),
                _ => None,
            }
            .ok_or_else(|| Error::Checkpoint(format!("bad optimizer entry `{name}`")))?;
            if buf.len() != t.numel() {
                return Err(Error::Checkpoint(format!("size mismatch for `{name}`")));
            }
            buf.copy_from_slice(t.data());
        }
        self.step = step;
        Ok(())
    }
}

/// One Adam update of every trainable parameter.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &GradBuffer<F>,
    state: &mut AdamState<F>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let lr = F::lit(cfg.lr_at(state.step));
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    let eps = F::lit(cfg.eps);
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.norm().as_f64();
            if norm > max {
                F::lit(max / norm)
            } else {
                F::one()
            }
        }
        None => F::one(),
    };

    for id in params.ids().collect::<Vec<_>>() {
        if !params.is_trainable(id) {
            continue;
        }
        let g = grads.get(id);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if g.len() != m.len() {
            return Err(Error::Invalid(format!(
                "adam_step: gradient for `{}` has {} values, expected {}",
                params.name(id),
                g.len(),
                m.len()
            )));
        }
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + (F::one() - b1) * gi;
            v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
