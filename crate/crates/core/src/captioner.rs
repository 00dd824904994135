//! One Diffusion Transformer stage: visual encoder, semantic Transformer,
//! bidirectional sentence decoder, word head and the probability-to-bits map.

use capdiff_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitcodec::BitCodec;
use crate::nn::{embedding_init, sinusoidal, DecoderBlock, Dropout, EncoderBlock, Linear};
use crate::{Error, Result};

/// Width of the sinusoidal features fed to the time MLP.
const TIME_FEATURES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// `N_v`
    pub encoder_blocks: usize,
    /// `N_t`
    pub decoder_blocks: usize,
    /// `N_p`
    pub semantic_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    /// `D_v`
    pub feature_dim: usize,
    /// `W`
    pub vocab_size: usize,
    /// `N_s`
    pub max_len: usize,
    /// Longest accepted retrieved-token sequence.
    pub retrieval_len: usize,
    pub bit_scale: f64,
    pub dropout: f64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("semantic_blocks", self.semantic_blocks),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::VocabTooSmall(self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.bit_scale > 0.0) {
            return Err(Error::Config("bit scale must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Extra inputs of one stage evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a, F> {
    /// Previous timestep's `x₀` estimate (`x̃₀`), zeros when absent.
    pub self_cond: &'a Tensor<F>,
    /// Previous stage's prediction; required exactly for stages after the
    /// first.
    pub prev_stage: Option<&'a Tensor<F>>,
    /// Retrieved sentence tokens `s_r`, possibly empty.
    pub retrieved: &'a [usize],
}

/// Tape handles of a stage's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub logits: Var,
    /// `p`, `N_s × W`
    pub probs: Var,
    /// `b = p·B`, `N_s × n`
    pub bits: Var,
}

/// Concrete stage outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput<F> {
    pub x0_hat: Tensor<F>,
    pub probs: Tensor<F>,
}

impl<F: Real> StageOutput<F> {
    pub fn read(g: &Graph<F>, vars: &StageVars) -> Self {
        StageOutput {
            x0_hat: g.value(vars.bits).clone(),
            probs: g.value(vars.probs).clone(),
        }
    }
}

/// Parameter layout of one stage inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Stage {
    /// 1-based position in the cascade.
    pub index: usize,
    pub config: StageConfig,
    codec: BitCodec,
    feature_proj: Linear,
    encoder: Vec<EncoderBlock>,
    time_in: Linear,
    time_out: Linear,
    bit_in: Linear,
    word_emb: ParamId,
    pos_text: ParamId,
    pos_ret: Option<ParamId>,
    semantic: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    /// Output bias; the output weights are the transposed word embeddings.
    head_bias: ParamId,
}

impl Stage {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        index: usize,
        config: StageConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if index == 0 {
            return Err(Error::Config("stage indices start at 1".into()));
        }
        let codec = BitCodec::new(config.vocab_size, config.bit_scale)?;
        let p = format!("stage{index}");
        let (d, h) = (config.d_model, config.heads);
        let inputs = if index == 1 { 2 } else { 3 };

        let feature_proj = Linear::new(store, &format!("{p}.feat"), config.feature_dim, d, rng)?;
        let encoder = (0..config.encoder_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{p}.enc{i}"), d, h, rng))
            .collect::<Result<_>>()?;
        let time_in = Linear::new(store, &format!("{p}.time1"), TIME_FEATURES, d, rng)?;
        let time_out = Linear::new(store, &format!("{p}.time2"), d, d, rng)?;
        let bit_in = Linear::new(store, &format!("{p}.bits"), inputs * codec.bits(), d, rng)?;
        let word_emb = store.add(
            format!("{p}.word_emb"),
            embedding_init(rng, config.vocab_size, d),
        )?;
        let pos_text = store.add(
            format!("{p}.pos_text"),
            embedding_init(rng, config.max_len, d),
        )?;
        let pos_ret = if config.retrieval_len > 0 {
            Some(store.add(
                format!("{p}.pos_ret"),
                embedding_init(rng, config.retrieval_len, d),
            )?)
        } else {
            None
        };
        let semantic = (0..config.semantic_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{p}.sem{i}"), d, h, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..config.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("{p}.dec{i}"), d, h, rng))
            .collect::<Result<_>>()?;
        let head_bias = store.add(format!("{p}.head.b"), Tensor::zeros(&[config.vocab_size]))?;

        Ok(Stage {
            index,
            config,
            codec,
            feature_proj,
            encoder,
            time_in,
            time_out,
            bit_in,
            word_emb,
            pos_text,
            pos_ret,
            semantic,
            decoder,
            head_bias,
        })
    }

    pub fn codec(&self) -> &BitCodec {
        &self.codec
    }

    /// Contextual visual tokens `Ṽ` (`K × d_model`).
    pub fn encode_visual<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        features: &Tensor<F>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        if features.rows() == 0 || features.numel() == 0 {
            return Err(Error::NoObjects);
        }
        if features.shape().len() != 2 || features.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "encode_visual",
                format!(
                    "features {:?}, expected K x {}",
                    features.shape(),
                    self.config.feature_dim
                ),
            ));
        }
        let v = g.constant(features.clone());
        let mut v = self.feature_proj.forward(g, v)?;
        for block in &self.encoder {
            v = block.forward(g, v, None, drop)?;
        }
        Ok(v)
    }

    fn check_bits<F: Real>(&self, what: &str, t: &Tensor<F>) -> Result<()> {
        let want = [self.config.max_len, self.codec.bits()];
        if t.shape() != want {
            return Err(Error::shape(
                "condition_semantic",
                format!("{what} {:?}, expected {want:?}", t.shape()),
            ));
        }
        Ok(())
    }

    /// Semantic-conditional latent state `h⁰` (`N_s × d_model`).
    pub fn condition_semantic<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        x_t: &Tensor<F>,
        gamma: f64,
        cond: &Conditioning<'_, F>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        self.check_bits("x_t", x_t)?;
        self.check_bits("self-conditioning input", cond.self_cond)?;
        let mut channels = vec![g.constant(x_t.clone()), g.constant(cond.self_cond.clone())];
        match (self.index, cond.prev_stage) {
            (1, Some(_)) => {
                return Err(Error::Conditioning(
                    "stage 1 takes no previous-stage prediction".into(),
                ))
            }
            (1, None) => {}
            (i, None) => {
                return Err(Error::Conditioning(format!(
                    "stage {i} requires the previous stage's prediction"
                )))
            }
            (_, Some(prev)) => {
                self.check_bits("previous-stage prediction", prev)?;
                channels.push(g.constant(prev.clone()));
            }
        }
        if cond.retrieved.len() > self.config.retrieval_len {
            return Err(Error::Conditioning(format!(
                "retrieved sentence has {} tokens, limit {}",
                cond.retrieved.len(),
                self.config.retrieval_len
            )));
        }

        let input = g.concat_cols(&channels)?;
        let zx = self.bit_in.forward(g, input)?;
        let feats = g.constant(sinusoidal(gamma, TIME_FEATURES));
        let phi = self.time_in.forward(g, feats)?;
        let phi = g.gelu(phi);
        let phi = self.time_out.forward(g, phi)?;
        let zx = g.add_row(zx, phi)?;
        let pos = g.param(self.pos_text);
        let mut w = g.add(zx, pos)?;

        let n_r = cond.retrieved.len();
        if n_r > 0 {
            let emb = g.param(self.word_emb);
            let zr = g.gather(emb, cond.retrieved)?;
            let zr = g.scale(zr, F::lit((self.config.d_model as f64).sqrt()));
            let table = g.param(self.pos_ret.expect("retrieval_len > 0"));
            let pos_r = g.slice_rows(table, 0, n_r)?;
            let zr = g.add(zr, pos_r)?;
            w = g.concat_rows(&[w, zr])?;
        }
        w = drop.apply(g, w)?;
        for block in &self.semantic {
            w = block.forward(g, w, None, drop)?;
        }
        if n_r > 0 {
            w = g.slice_rows(w, 0, self.config.max_len)?;
        }
        Ok(w)
    }

    /// Bidirectional decoder, word distributions and expected bits.
    pub fn decode_sentence<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        h0: Var,
        visual: Var,
        drop: &mut Dropout<'_, R>,
    ) -> Result<StageVars> {
        let mut h = h0;
        for block in &self.decoder {
            h = block.forward(g, h, visual, None, drop)?;
        }
        let emb = g.param(self.word_emb);
        let logits = g.matmul_nt(h, emb)?;
        let bias = g.param(self.head_bias);
        let logits = g.add_row(logits, bias)?;
        let probs = g.softmax(logits);
        let table = g.constant(self.codec.table());
        let bits = g.matmul(probs, table)?;
        Ok(StageVars {
            logits,
            probs,
            bits,
        })
    }

    /// `f(x_t, γ(t'), Ṽ)` with the visual tokens already encoded.
    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        x_t: &Tensor<F>,
        gamma: f64,
        visual: Var,
        cond: &Conditioning<'_, F>,
        drop: &mut Dropout<'_, R>,
    ) -> Result<StageVars> {
        let h0 = self.condition_semantic(g, x_t, gamma, cond, drop)?;
        self.decode_sentence(g, h0, visual, drop)
    }
}

/// Expected bits `b_i = Σ_c p_i^c B^c` for concrete distributions.
pub fn probs_to_bits<F: Real>(probs: &Tensor<F>, codec: &BitCodec) -> Result<Tensor<F>> {
    if probs.cols() != codec.vocab_size() {
        return Err(Error::shape(
            "probs_to_bits",
            format!(
                "probs {:?} vs vocabulary {}",
                probs.shape(),
                codec.vocab_size()
            ),
        ));
    }
    Ok(probs.matmul(&codec.table())?)
}

/// Loss terms of one stage evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub xe: Var,
    pub bit: Var,
}

/// `L = L_XE + L_bit` with label-smoothed cross-entropy averaged over all
/// `N_s` positions, padding included.
pub fn stage_loss<F: Real>(
    g: &mut Graph<F>,
    out: &StageVars,
    x0: &Tensor<F>,
    targets: &[usize],
    smoothing: f64,
) -> Result<LossVars> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Smoothing(smoothing));
    }
    let xe = smoothed_xe(g, out.logits, targets, smoothing)?;
    let x0 = g.constant(x0.clone());
    let bit = crate::diffusion::l_bit(g, out.bits, x0)?;
    let total = g.add(xe, bit)?;
    Ok(LossVars { total, xe, bit })
}

/// Cross-entropy against `(1 − ε)·onehot + ε/W`, averaged over rows.
pub fn smoothed_xe<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let lp = g.log_softmax(logits);
    log_prob_xe(g, lp, targets, smoothing)
}

/// Smoothed cross-entropy from row-wise log-probabilities.
pub fn log_prob_xe<F: Real>(
    g: &mut Graph<F>,
    log_probs: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Smoothing(smoothing));
    }
    let picked = g.pick(log_probs, targets)?;
    let nll = g.mean(picked);
    let mut loss = g.scale(nll, F::lit(-(1.0 - smoothing)));
    if smoothing > 0.0 {
        let all = g.mean(log_probs);
        let uniform = g.scale(all, F::lit(-smoothing));
        loss = g.add(loss, uniform)?;
    }
    Ok(loss)
}
