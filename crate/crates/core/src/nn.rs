//! Post-norm Transformer building blocks on top of the tape.

use capdiff_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::{Error, Result};

/// Glorot-uniform matrix.
pub fn glorot<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data = (0..rows * cols).map(|_| F::lit(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Small normal-ish table for embeddings.
pub fn embedding_init<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<F> {
    let dist = Uniform::new_inclusive(-0.1, 0.1).expect("valid range");
    let data = (0..rows * cols).map(|_| F::lit(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Inverted dropout. Inactive when `rng` is `None` or `p == 0`.
pub struct Dropout<'r, R> {
    pub p: f64,
    pub rng: Option<&'r mut R>,
}

impl<R: Rng> Dropout<'_, R> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply<F: Real>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let scale = F::lit(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        Ok(g.mul(x, mask)?)
    }
}

/// Dropout that never fires, for inference passes.
pub fn no_dropout() -> Dropout<'static, rand_chacha::ChaCha8Rng> {
    Dropout::off()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), glorot(rng, input, output))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], F::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]))?;
        Ok(Norm { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, F::lit(NORM_EPS));
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        let y = g.mul_row(y, gain)?;
        Ok(g.add_row(y, bias)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible into {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
        })
    }

    /// `mask`, when given, is added to every head's score matrix
    /// (queries × keys); use large negative entries to block positions.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        query: Var,
        memory: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let width = g.shape(q)[1];
        let d = width / self.heads;
        let scale = F::lit(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * d, d)?,
                    g.slice_cols(k, h * d, d)?,
                    g.slice_cols(v, h * d, d)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax(scores);
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, cat)
    }
}

/// `norm(Z + FC(GELU(FC(Z))))`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub norm: Norm,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), width)?,
        })
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        z: Var,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        let h = self.inner.forward(g, z)?;
        let h = g.gelu(h);
        let h = self.outer.forward(g, h)?;
        let h = drop.apply(g, h)?;
        let r = g.add(z, h)?;
        self.norm.forward(g, r)
    }
}

/// Self-attention block: `FFN(norm(X + MultiHead(X, X, X)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub norm: Norm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm: Norm::new(store, &format!("{name}.norm"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, 4 * width, rng)?,
        })
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        mask: Option<Var>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, x, x, mask)?;
        let a = drop.apply(g, a)?;
        let r = g.add(x, a)?;
        let r = self.norm.forward(g, r)?;
        self.ffn.forward(g, r, drop)
    }
}

/// Decoder block:
/// `h̃ = norm(h + MultiHead(h, h, h))`,
/// `h' = FFN(norm(h̃ + MultiHead(h̃, V, V)))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub self_norm: Norm,
    pub cross_attn: Attention,
    pub cross_norm: Norm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: Attention::new(store, &format!("{name}.self"), width, heads, rng)?,
            self_norm: Norm::new(store, &format!("{name}.self_norm"), width)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), width, heads, rng)?,
            cross_norm: Norm::new(store, &format!("{name}.cross_norm"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, 4 * width, rng)?,
        })
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        h: Var,
        visual: Var,
        self_mask: Option<Var>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, h, h, self_mask)?;
        let a = drop.apply(g, a)?;
        let r = g.add(h, a)?;
        let h_tilde = self.self_norm.forward(g, r)?;
        let c = self.cross_attn.forward(g, h_tilde, visual, None)?;
        let c = drop.apply(g, c)?;
        let r = g.add(h_tilde, c)?;
        let r = self.cross_norm.forward(g, r)?;
        self.ffn.forward(g, r, drop)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above it.
pub fn causal_mask<F: Real>(len: usize) -> Tensor<F> {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, F::lit(-1e9));
        }
    }
    m
}

/// Sinusoidal features of a scalar, `[sin(v·ω_k), cos(v·ω_k)]`.
pub fn sinusoidal<F: Real>(value: f64, width: usize) -> Tensor<F> {
    let half = width / 2;
    let mut out = vec![F::zero(); width];
    for k in 0..half {
        let freq = (-(k as f64) * (1000f64).ln() / half.max(1) as f64).exp();
        out[k] = F::lit((value * freq).sin());
        out[half + k] = F::lit((value * freq).cos());
    }
    Tensor::new(vec![1, width], out).expect("shape")
}
