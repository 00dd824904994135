//! Guided self-critical training: an autoregressive teacher, reward-weighted
//! policy gradient with the teacher sentence forced into the sample set, the
//! deterministic-chain baseline and the guide replacement rule.

use capdiff_autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{strip_padding, PAD};
use crate::captioner::{log_prob_xe, StageConfig};
use crate::cascade::{cascade_sample, pad_targets, Cascade};
use crate::diffusion::{self, gaussian, NoiseSchedule, SamplerConfig};
use crate::metrics::RefCorpus;
use crate::nn::{
    causal_mask, embedding_init, no_dropout, DecoderBlock, Dropout, EncoderBlock, Linear,
};
use crate::{Error, Result};

/// Autoregressive captioner with the same encoder and decoder blocks as a
/// diffusion stage, but causal self-attention over word embeddings. PAD
/// doubles as the start and end token.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: StageConfig,
    feature_proj: Linear,
    encoder: Vec<EncoderBlock>,
    word_emb: ParamId,
    pos: ParamId,
    decoder: Vec<DecoderBlock>,
    head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl Teacher {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        config: StageConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.heads);
        let feature_proj = Linear::new(store, "teacher.feat", config.feature_dim, d, rng)?;
        let encoder = (0..config.encoder_blocks)
            .map(|i| EncoderBlock::new(store, &format!("teacher.enc{i}"), d, h, rng))
            .collect::<Result<_>>()?;
        let word_emb = store.add(
            "teacher.word_emb",
            embedding_init(rng, config.vocab_size, d),
        )?;
        let pos = store.add("teacher.pos", embedding_init(rng, config.max_len, d))?;
        let decoder = (0..config.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("teacher.dec{i}"), d, h, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "teacher.head", d, config.vocab_size, rng)?;
        Ok(Teacher {
            config,
            feature_proj,
            encoder,
            word_emb,
            pos,
            decoder,
            head,
        })
    }

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
                "teacher",
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

    /// Next-word logits for every prefix of `inputs` (`len × W`); row `i`
    /// sees only `inputs[..=i]`.
    pub fn logits<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        visual: Var,
        inputs: &[usize],
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        let n = inputs.len();
        if n == 0 || n > self.config.max_len {
            return Err(Error::shape(
                "teacher",
                format!("input length {n}, limit {}", self.config.max_len),
            ));
        }
        let emb = g.param(self.word_emb);
        let x = g.gather(emb, inputs)?;
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, n)?;
        let mut h = g.add(x, pos)?;
        h = drop.apply(g, h)?;
        let mask = g.constant(causal_mask(n));
        for block in &self.decoder {
            h = block.forward(g, h, visual, Some(mask), drop)?;
        }
        self.head.forward(g, h)
    }

    /// Teacher-forcing inputs and targets for one caption.
    pub fn shifted(&self, caption: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let targets = pad_targets(caption, self.config.max_len);
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(PAD);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        (inputs, targets)
    }

    /// Label-smoothed cross-entropy on one caption, recorded on `g`.
    pub fn loss<F: Real, R: Rng>(
        &self,
        g: &mut Graph<F>,
        features: &Tensor<F>,
        caption: &[usize],
        smoothing: f64,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        let visual = self.encode_visual(g, features, drop)?;
        let (inputs, targets) = self.shifted(caption);
        let logits = self.logits(g, visual, &inputs, drop)?;
        let lp = g.log_softmax(logits);
        log_prob_xe(g, lp, &targets, smoothing)
    }

    /// `S^tea`: autoregressive decoding until PAD or `N_s` words.
    pub fn decode<F: Real>(
        &self,
        params: &ParamStore<F>,
        features: &Tensor<F>,
        mode: DecodeMode,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new(params, false);
        let visual = self.encode_visual(&mut g, features, &mut no_dropout())?;
        let visual = g.value(visual).clone();
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(0) => return Err(Error::Config("beam width must be >= 1".into())),
            DecodeMode::Beam(w) => w,
        };
        // (words so far, log-prob, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(Vec::new(), 0.0, false)];
        for _ in 0..self.config.max_len {
            if beams.iter().all(|b| b.2) {
                break;
            }
            let mut next = Vec::new();
            for (words, score, done) in &beams {
                if *done {
                    next.push((words.clone(), *score, true));
                    continue;
                }
                let mut g = Graph::new(params, false);
                let v = g.constant(visual.clone());
                let mut inputs = vec![PAD];
                inputs.extend_from_slice(words);
                let logits = self.logits(&mut g, v, &inputs, &mut no_dropout())?;
                let lp = g.log_softmax(logits);
                let last = g.value(lp).row(inputs.len() - 1).to_vec();
                let mut order: Vec<usize> = (0..last.len()).collect();
                order.sort_by(|&a, &b| {
                    last[b]
                        .partial_cmp(&last[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                for &w in order.iter().take(width) {
                    let s = score + last[w].as_f64();
                    if w == PAD {
                        next.push((words.clone(), s, true));
                    } else {
                        let mut ext = words.clone();
                        ext.push(w);
                        next.push((ext, s, false));
                    }
                }
            }
            next.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            next.truncate(width);
            beams = next;
        }
        Ok(beams.into_iter().next().map(|b| b.0).unwrap_or_default())
    }
}

/// Sampled sentences with their log-probabilities and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBatch {
    /// `N_s`-padded sentences; `N_y` of them.
    pub sentences: Vec<Vec<usize>>,
    /// `log p_θ(y)` as the sum of per-position log-probabilities.
    pub log_probs: Vec<f64>,
    /// Which entry is the enforced guide, if any.
    pub guide: Option<usize>,
    pub rewards: Vec<f64>,
    pub baseline: Vec<usize>,
    pub baseline_reward: f64,
}

impl RewardBatch {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn advantages(&self) -> Vec<f64> {
        self.rewards
            .iter()
            .map(|r| r - self.baseline_reward)
            .collect()
    }

    /// Rewards of every entry and of the baseline against the sample's
    /// references.
    pub fn score(&mut self, corpus: &RefCorpus<usize>, sample_id: u64) -> Result<()> {
        self.rewards = self
            .sentences
            .iter()
            .map(|s| corpus.cider_d(&strip_padding(s), sample_id))
            .collect::<Result<_>>()?;
        self.baseline_reward = corpus.cider_d(&strip_padding(&self.baseline), sample_id)?;
        Ok(())
    }

    /// Surrogate value `−(1/N_y)·Σ_j (R_j − R_b)·log p_j`.
    pub fn surrogate_value(&self) -> f64 {
        let n = self.len() as f64;
        -self
            .advantages()
            .iter()
            .zip(&self.log_probs)
            .map(|(a, lp)| a * lp)
            .sum::<f64>()
            / n
    }
}

/// One differentiable cascade evaluation on a noised guide sentence.
pub struct PolicyPass<'p, F> {
    pub graph: Graph<'p, F>,
    /// Row-wise log-probabilities of the fused prediction (`N_s × W`).
    pub log_probs: Var,
    pub t: f64,
}

/// Noises `guide` at a uniformly drawn `t'` and runs the cascade once with
/// gradients enabled.
pub fn policy_pass<'p, F: Real, R: Rng>(
    model: &Cascade,
    params: &'p ParamStore<F>,
    features: &Tensor<F>,
    guide: &[usize],
    retrieved: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<PolicyPass<'p, F>> {
    let padded = pad_targets(guide, model.config.stage.max_len);
    let x0: Tensor<F> = model.codec().encode(&padded)?;
    let t = 1.0 - rng.random::<f64>();
    let eps = gaussian(rng, x0.shape());
    let x_t = diffusion::diffuse_at(&x0, t, &eps, schedule)?;
    policy_pass_at(model, params, features, &x_t, t, retrieved, schedule)
}

/// [`policy_pass`] at a given noisy state, without self-conditioning.
pub fn policy_pass_at<'p, F: Real>(
    model: &Cascade,
    params: &'p ParamStore<F>,
    features: &Tensor<F>,
    x_t: &Tensor<F>,
    t: f64,
    retrieved: &[usize],
    schedule: &NoiseSchedule,
) -> Result<PolicyPass<'p, F>> {
    let mut graph = Graph::new(params, true);
    let mut off = no_dropout();
    let visual = model.encode_visual(&mut graph, features, &mut off)?;
    let zeros = vec![Tensor::zeros(x_t.shape()); model.len()];
    let (vars, _) = model.forward(
        &mut graph,
        x_t,
        schedule.gamma(t)?,
        &visual,
        &zeros,
        retrieved,
        &mut off,
    )?;
    let log_probs = model.fused_log_probs(&mut graph, &vars)?;
    Ok(PolicyPass {
        graph,
        log_probs,
        t,
    })
}

/// Draws one word per position from `exp(lp / τ)`; `τ = 0` takes the
/// argmax.
pub fn sample_sentence<F: Real>(
    log_probs: &Tensor<F>,
    temperature: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    if temperature <= 0.0 {
        return diffusion::argmax_rows(log_probs);
    }
    (0..log_probs.rows())
        .map(|r| {
            let row = log_probs.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let weights: Vec<f64> = row
                .iter()
                .map(|v| ((v.as_f64() - max) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.len() - 1
        })
        .collect()
}

/// `N_y − 1` independent per-position draws plus the enforced guide (last).
/// With `guide = None` all `N_y` entries are sampled (plain SCST).
pub fn sample_candidates<F: Real>(
    pass: &PolicyPass<'_, F>,
    guide: Option<&[usize]>,
    n_y: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<RewardBatch> {
    if n_y == 0 {
        return Err(Error::Config("N_y must be >= 1".into()));
    }
    let lp = pass.graph.value(pass.log_probs);
    let len = lp.rows();
    let drawn = if guide.is_some() { n_y - 1 } else { n_y };
    let mut sentences: Vec<Vec<usize>> = (0..drawn)
        .map(|_| sample_sentence(lp, temperature, rng))
        .collect();
    let guide_index = guide.map(|g| {
        sentences.push(pad_targets(g, len));
        sentences.len() - 1
    });
    let log_probs = sentences
        .iter()
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(r, &w)| lp.get(r, w).as_f64())
                .sum()
        })
        .collect();
    Ok(RewardBatch {
        sentences,
        log_probs,
        guide: guide_index,
        rewards: Vec::new(),
        baseline: Vec::new(),
        baseline_reward: 0.0,
    })
}

/// Records `−(1/N_y)·Σ_j (R_j − R_b)·log p_θ(y_j)` on the pass's tape.
pub fn surrogate<F: Real>(pass: &mut PolicyPass<'_, F>, batch: &RewardBatch) -> Result<Var> {
    if batch.rewards.len() != batch.len() {
        return Err(Error::Config("reward batch has not been scored".into()));
    }
    let n = batch.len() as f64;
    let g = &mut pass.graph;
    let mut total: Option<Var> = None;
    for (s, adv) in batch.sentences.iter().zip(batch.advantages()) {
        let picked = g.pick(pass.log_probs, s)?;
        let lp = g.sum(picked);
        let term = g.scale(lp, F::lit(-adv / n));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::Config("empty reward batch".into()))
}

/// `ŷ`: the noiseless reverse chain from a seeded `x_T`, final argmax. The
/// starting noise comes from stream `stream` of `seed`, so a sample keeps
/// its baseline while the parameters stay fixed.
pub fn baseline_decode<F: Real>(
    model: &Cascade,
    params: &ParamStore<F>,
    features: &Tensor<F>,
    retrieved: &[usize],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    stream: u64,
) -> Result<Vec<usize>> {
    let config = SamplerConfig {
        stochastic: false,
        ..*config
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(cascade_sample(
        model, params, features, retrieved, &config, schedule, &mut rng,
    )?
    .words)
}

/// Validation-CIDEr patience tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub best: f64,
    pub since_best: usize,
    pub patience: usize,
}

impl Saturation {
    pub fn new(patience: usize) -> Self {
        Saturation {
            best: f64::NEG_INFINITY,
            since_best: 0,
            patience,
        }
    }

    pub fn observe(&mut self, validation_cider: f64) {
        if validation_cider > self.best {
            self.best = validation_cider;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
    }

    pub fn saturated(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Keeps `S^tea` until saturation; afterwards the model's own estimate
/// replaces it when it scores strictly higher.
pub fn refresh_guide(
    teacher: &[usize],
    estimate: &[usize],
    sample_id: u64,
    corpus: &RefCorpus<usize>,
    saturation: &Saturation,
) -> Result<Vec<usize>> {
    if !saturation.saturated() {
        return Ok(teacher.to_vec());
    }
    let r_tea = corpus.cider_d(&strip_padding(teacher), sample_id)?;
    let r_est = corpus.cider_d(&strip_padding(estimate), sample_id)?;
    Ok(if r_est > r_tea {
        estimate.to_vec()
    } else {
        teacher.to_vec()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> RefCorpus<usize> {
        RefCorpus::new([(0, vec![vec![2, 3, 4, 5, 6]]), (1, vec![vec![7, 8, 9]])]).unwrap()
    }

    #[test]
    fn saturation_counts_stalls() {
        let mut s = Saturation::new(3);
        for v in [1.0, 2.0, 1.5, 2.0, 1.9] {
            s.observe(v);
        }
        assert!(s.saturated());
        s.observe(2.5);
        assert!(!s.saturated());
    }

    #[test]
    fn guide_rule() {
        let c = corpus();
        let good = [2, 3, 4, 5, 6];
        let bad = [2, 2, 2, 9, 9];
        let fresh = Saturation::new(3);
        assert_eq!(refresh_guide(&bad, &good, 0, &c, &fresh).unwrap(), bad);
        let mut sat = Saturation::new(1);
        sat.observe(1.0);
        sat.observe(0.5);
        assert_eq!(refresh_guide(&bad, &good, 0, &c, &sat).unwrap(), good);
        assert_eq!(refresh_guide(&good, &bad, 0, &c, &sat).unwrap(), good);
        // Equal quality keeps the teacher sentence.
        assert_eq!(
            refresh_guide(&bad, &[2, 2, 2, 9, 9, 0], 0, &c, &sat).unwrap(),
            bad
        );
    }

    #[test]
    fn surrogate_value_matches_hand_arithmetic() {
        let batch = RewardBatch {
            sentences: vec![vec![1], vec![2]],
            log_probs: vec![-1.5, -0.25],
            guide: Some(1),
            rewards: vec![0.5, 2.0],
            baseline: vec![3],
            baseline_reward: 1.0,
        };
        // −½·((0.5 − 1)(−1.5) + (2 − 1)(−0.25)) = −½·(0.75 − 0.25) = −0.25
        assert!((batch.surrogate_value() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_temperature_takes_argmax() {
        let lp = Tensor::<f64>::from_f64(&[2, 3], &[-2.0, -0.1, -3.0, -0.2, -2.0, -2.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_sentence(&lp, 0.0, &mut rng), vec![1, 0]);
    }
}
