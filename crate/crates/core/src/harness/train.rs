//! Training loops: the autoregressive teacher, first-stage cross-entropy
//! plus bit regression, and second-stage guided self-critical training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use capdiff_autodiff::{
    adam_step, AdamConfig, AdamState, GradBuffer, Graph, LrSchedule, ParamStore, Tensor,
};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Architecture, Header, MetricRow, Model, RngState, TrainState};
use super::config::RunConfig;
use super::data::{Dataset, Sample, Split};
use super::eval::{caption_samples, teacher_captions, Report};
use crate::bitcodec::strip_padding;
use crate::cascade::{train_example, Cascade, TrainExample, TrainOptions};
use crate::gscst::{
    baseline_decode, policy_pass, refresh_guide, sample_candidates, surrogate, DecodeMode,
    Saturation,
};
use crate::nn::Dropout;
use crate::{Error, Result};

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const METRICS: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub best_cider: f64,
    pub best_step: u64,
    pub best_path: PathBuf,
}

/// Starting weights of a session.
#[derive(Clone, Copy)]
enum Init<'a> {
    Fresh,
    /// Every parameter, matched by name.
    Full(&'a ParamStore<f32>),
    /// The parameters whose names also exist in the new model; the rest
    /// keep their fresh values.
    Warm(&'a ParamStore<f32>),
}

fn overlay(params: &mut ParamStore<f32>, from: &ParamStore<f32>) -> Result<usize> {
    let mut copied = 0;
    for (name, value) in from.export() {
        let Some(id) = params.id(&name) else { continue };
        if params.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, warm start has {:?}",
                params.get(id).shape(),
                value.shape()
            )));
        }
        *params.get_mut(id) = value;
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::Checkpoint(
            "warm start shares no parameters with the model".into(),
        ));
    }
    Ok(copied)
}

fn freeze(model: &Model, params: &mut ParamStore<f32>, run: &RunConfig) -> Result<()> {
    match model {
        Model::Cascade(c) if run.frozen_stages > 0 => c.freeze(params, run.frozen_stages),
        _ => Ok(()),
    }
}

/// Parameters, optimizer, RNG and bookkeeping of one run.
struct Session {
    out: PathBuf,
    header: Header,
    model: Model,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    state: TrainState,
}

impl Session {
    fn start(
        out: &Path,
        run: &RunConfig,
        architecture: Architecture,
        adam: AdamConfig,
        init: Init<'_>,
        resume: bool,
    ) -> Result<Self> {
        let seed = run.require_seed()?;
        std::fs::create_dir_all(out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, mut params) = Model::build(&architecture, &mut rng)?;
        match init {
            Init::Fresh => {}
            Init::Full(p) => params.load(&p.export())?,
            Init::Warm(p) => {
                let n = overlay(&mut params, p)?;
                info!("warm start: {n} of {} parameters", params.len());
            }
        }
        freeze(&model, &mut params, run)?;
        let mut adam = AdamState::new(&params, adam);
        let header = Header {
            architecture,
            run: run.clone(),
            state: None,
        };
        let last = out.join(LAST);
        if resume && last.exists() {
            let loaded = checkpoint::load(&last)?;
            if loaded.header.architecture != header.architecture {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different architecture",
                    last.display()
                )));
            }
            let state = loaded.header.state.ok_or_else(|| {
                Error::Checkpoint(format!("{} holds no run state", last.display()))
            })?;
            adam.restore(state.optimizer_steps, &loaded.optimizer)?;
            info!("resuming {} at step {}", out.display(), state.step);
            let mut params = loaded.params;
            freeze(&model, &mut params, run)?;
            return Ok(Session {
                out: out.to_path_buf(),
                header,
                model,
                params,
                adam,
                rng: state.rng.restore()?,
                state,
            });
        }
        let state = TrainState {
            step: 0,
            rng: RngState::capture(&rng),
            optimizer_steps: 0,
            best_cider: None,
            best_step: 0,
            rows: Vec::new(),
            saturation: None,
            guides: None,
        };
        Ok(Session {
            out: out.to_path_buf(),
            header,
            model,
            params,
            adam,
            rng,
            state,
        })
    }

    fn record(&mut self, step: u64, metric: &str, value: f64) {
        self.state.rows.push(MetricRow {
            step,
            metric: metric.into(),
            value,
        });
    }

    /// Averages the accumulated gradient over the batch and steps Adam.
    /// An all-zero gradient leaves the parameters and moments untouched.
    fn update(&mut self, grads: &mut GradBuffer<f32>, batch: usize, step: u64) -> Result<bool> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        if grads.is_all_zero() {
            return Ok(false);
        }
        grads.scale(1.0 / batch as f32);
        adam_step(&mut self.params, grads, &mut self.adam)?;
        self.state.optimizer_steps = self.adam.step();
        grads.zero();
        Ok(true)
    }

    /// Records a validation score, keeps the best weights and writes a
    /// resumable checkpoint.
    fn checkpoint(&mut self, step: u64, val_cider: f64) -> Result<()> {
        self.record(step, "val_cider", val_cider);
        info!(
            "{} step {step}: val CIDEr {val_cider:.4}",
            self.out.display()
        );
        if self.state.best_cider.is_none_or(|b| val_cider > b) {
            self.state.best_cider = Some(val_cider);
            self.state.best_step = step;
            checkpoint::save(&self.out.join(BEST), &self.header, &self.params, None)?;
        }
        self.state.step = step;
        self.state.rng = RngState::capture(&self.rng);
        let header = Header {
            state: Some(self.state.clone()),
            ..self.header.clone()
        };
        checkpoint::save(
            &self.out.join(LAST),
            &header,
            &self.params,
            Some(&self.adam),
        )?;
        let mut csv = String::from("step,metric,value\n");
        for r in &self.state.rows {
            let _ = writeln!(csv, "{},{},{:.6}", r.step, r.metric, r.value);
        }
        std::fs::write(self.out.join(METRICS), csv)?;
        Ok(())
    }

    fn finish(self) -> Summary {
        Summary {
            best_cider: self.state.best_cider.unwrap_or(0.0),
            best_step: self.state.best_step,
            best_path: self.out.join(BEST),
        }
    }
}

fn features(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples.iter().map(Sample::feature_tensor).collect()
}

fn pick_caption<'a>(sample: &'a Sample, rng: &mut impl Rng) -> &'a [usize] {
    &sample.captions[rng.random_range(0..sample.captions.len())]
}

fn retrieval(data: &Dataset, split: Split, enabled: bool) -> Result<Vec<Vec<usize>>> {
    if enabled {
        data.retrieved(&data.pool()?, split)
    } else {
        Ok(vec![Vec::new(); data.split(split).len()])
    }
}

fn validation<'d>(data: &'d Dataset, run: &RunConfig) -> &'d [Sample] {
    &data.val[..run.eval_samples.min(data.val.len())]
}

fn check_loss(step: u64, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

fn warmup_adam(lr: f64, run: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr,
        schedule: LrSchedule::WarmupInvSqrt { warmup: run.warmup },
        clip_norm: Some(run.clip_norm),
        ..AdamConfig::default()
    }
}

/// Teacher with label-smoothed cross-entropy; validation by greedy decoding.
pub fn train_teacher(run: &RunConfig, data: &Dataset, out: &Path, resume: bool) -> Result<Summary> {
    let config = super::teacher_config(run, data.vocab.len());
    let arch = Architecture::Teacher { config };
    let mut s = Session::start(
        out,
        run,
        arch,
        warmup_adam(run.teacher_lr, run),
        Init::Fresh,
        resume,
    )?;
    let teacher = s.model.teacher()?.clone();
    let train_x = features(&data.train);
    let val = validation(data, run);
    let val_refs = data.references(Split::Val)?;
    let mut grads = GradBuffer::zeros_like(&s.params);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in s.state.step..run.teacher_steps {
        for _ in 0..run.batch_size {
            let i = s.rng.random_range(0..data.train.len());
            let caption = pick_caption(&data.train[i], &mut s.rng).to_vec();
            let mut g = Graph::new(&s.params, true);
            let mut drop = Dropout {
                p: run.dropout,
                rng: Some(&mut s.rng),
            };
            let loss = teacher.loss(
                &mut g,
                &train_x[i],
                &caption,
                run.label_smoothing,
                &mut drop,
            )?;
            let value = g.value(loss).item() as f64;
            check_loss(step, "teacher loss", value)?;
            grads.accumulate(&g.backward(loss)?);
            loss_sum += value;
            loss_n += 1;
        }
        s.update(&mut grads, run.batch_size, step)?;
        let done = step + 1;
        if done % run.eval_every == 0 || done == run.teacher_steps {
            s.record(done, "train_loss", loss_sum / loss_n.max(1) as f64);
            (loss_sum, loss_n) = (0.0, 0);
            let caps = teacher_captions(&teacher, &s.params, val, DecodeMode::Greedy)?;
            let cider = Report::score(Split::Val, caps, &val_refs)?.cider;
            s.checkpoint(done, cider)?;
        }
    }
    Ok(s.finish())
}

/// First stage: every cascade stage trained on `L_XE + L_bit`; the
/// checkpoint with the best validation CIDEr is kept.
pub fn train_stage1(run: &RunConfig, data: &Dataset, out: &Path, resume: bool) -> Result<Summary> {
    train_stage1_from(run, data, None, out, resume)
}

/// First stage starting from the matching parameters of `warm`, typically
/// a shorter cascade whose stages become the leading stages of this one.
pub fn train_stage1_from(
    run: &RunConfig,
    data: &Dataset,
    warm: Option<&Path>,
    out: &Path,
    resume: bool,
) -> Result<Summary> {
    let arch = Architecture::Cascade {
        config: run.cascade_config(data.vocab.len()),
    };
    let loaded = warm.map(checkpoint::load).transpose()?;
    let init = loaded
        .as_ref()
        .map_or(Init::Fresh, |l| Init::Warm(&l.params));
    let mut s = Session::start(out, run, arch, warmup_adam(run.lr, run), init, resume)?;
    let seed = run.require_seed()?;
    let model = s.model.cascade()?.clone();
    let schedule = run.schedule();
    let sampler = run.sampler();
    let train_x = features(&data.train);
    let train_r = retrieval(data, Split::Train, run.semantic)?;
    let val = validation(data, run);
    let val_r = retrieval(data, Split::Val, run.semantic)?;
    let val_refs = data.references(Split::Val)?;
    let options = TrainOptions {
        smoothing: run.label_smoothing,
        self_cond_prob: run.self_cond_prob,
    };
    let mut grads = GradBuffer::zeros_like(&s.params);
    let (mut loss_sum, mut bit_sum, mut loss_n) = (0.0, 0.0, 0usize);
    for step in s.state.step..run.stage1_steps {
        for _ in 0..run.batch_size {
            let i = s.rng.random_range(0..data.train.len());
            let caption = pick_caption(&data.train[i], &mut s.rng).to_vec();
            let ex = TrainExample {
                features: &train_x[i],
                targets: &caption,
                retrieved: &train_r[i],
            };
            let l = train_example(
                &model, &s.params, &ex, &options, &schedule, &mut grads, &mut s.rng,
            )?;
            check_loss(step, "L_XE + L_bit", l.sum())?;
            loss_sum += l.sum();
            bit_sum += l.bit.iter().sum::<f64>();
            loss_n += 1;
        }
        s.update(&mut grads, run.batch_size, step)?;
        let done = step + 1;
        if done % run.eval_every == 0 || done == run.stage1_steps {
            let n = loss_n.max(1) as f64;
            s.record(done, "train_loss", loss_sum / n);
            s.record(done, "train_bit_loss", bit_sum / n);
            (loss_sum, bit_sum, loss_n) = (0.0, 0.0, 0);
            let caps = caption_samples(&model, &s.params, val, &val_r, &sampler, &schedule, seed)?;
            let cider = Report::score(Split::Val, caps, &val_refs)?.cider;
            s.checkpoint(done, cider)?;
        }
    }
    Ok(s.finish())
}

fn validate_cascade(
    model: &Cascade,
    params: &ParamStore<f32>,
    data: &Dataset,
    run: &RunConfig,
    val_r: &[Vec<usize>],
) -> Result<f64> {
    let val = validation(data, run);
    let caps = caption_samples(
        model,
        params,
        val,
        val_r,
        &run.sampler(),
        &run.schedule(),
        run.require_seed()?,
    )?;
    Ok(Report::score(Split::Val, caps, &data.references(Split::Val)?)?.cider)
}

/// Second stage: self-critical training from the first-stage weights with
/// the teacher's sentence forced into every sample set.
pub fn train_stage2(
    run: &RunConfig,
    data: &Dataset,
    stage1: &Path,
    teacher: &Path,
    out: &Path,
    resume: bool,
) -> Result<Summary> {
    let seed = run.require_seed()?;
    let first = checkpoint::load(stage1)?;
    let model = first.model.cascade()?.clone();
    let tea = if run.guided {
        if !teacher.exists() {
            return Err(Error::Checkpoint(format!(
                "teacher checkpoint {} not found",
                teacher.display()
            )));
        }
        Some(checkpoint::load(teacher)?)
    } else {
        None
    };
    let adam = AdamConfig {
        lr: run.stage2_lr,
        clip_norm: Some(run.clip_norm),
        ..AdamConfig::default()
    };
    let arch = first.header.architecture.clone();
    let mut s = Session::start(out, run, arch, adam, Init::Full(&first.params), resume)?;

    let semantic = model.config.stage.retrieval_len > 0;
    let schedule = run.schedule();
    let baseline_sampler = run.baseline_sampler();
    let train_x = features(&data.train);
    let train_r = retrieval(data, Split::Train, semantic)?;
    let val_r = retrieval(data, Split::Val, semantic)?;
    let train_refs = data.references(Split::Train)?;

    let mut guides = match (&s.state.guides, &tea) {
        (Some(g), _) => g.clone(),
        (None, Some(t)) => {
            let mode = if run.beam > 1 {
                DecodeMode::Beam(run.beam)
            } else {
                DecodeMode::Greedy
            };
            teacher_captions(t.model.teacher()?, &t.params, &data.train, mode)?
                .into_iter()
                .map(|(_, c)| c)
                .collect()
        }
        (None, None) => Vec::new(),
    };
    let mut saturation = s
        .state
        .saturation
        .clone()
        .unwrap_or_else(|| Saturation::new(run.patience));

    if s.state.best_cider.is_none() {
        let cider = validate_cascade(&model, &s.params, data, run, &val_r)?;
        saturation.observe(cider);
        s.state.saturation = Some(saturation.clone());
        s.state.guides = Some(guides.clone());
        s.checkpoint(0, cider)?;
    }

    let mut grads = GradBuffer::zeros_like(&s.params);
    let (mut reward_sum, mut base_sum, mut n, mut skipped) = (0.0, 0.0, 0usize, 0u64);
    for step in s.state.step..run.stage2_steps {
        for _ in 0..run.batch_size {
            let i = s.rng.random_range(0..data.train.len());
            let id = data.train[i].id;
            let input = if run.guided {
                guides[i].clone()
            } else {
                pick_caption(&data.train[i], &mut s.rng).to_vec()
            };
            let mut pass = policy_pass(
                &model,
                &s.params,
                &train_x[i],
                &input,
                &train_r[i],
                &schedule,
                &mut s.rng,
            )?;
            let guide = run.guided.then_some(input.as_slice());
            let mut batch = sample_candidates(
                &pass,
                guide,
                run.samples_per_image,
                run.temperature,
                &mut s.rng,
            )?;
            batch.baseline = baseline_decode(
                &model,
                &s.params,
                &train_x[i],
                &train_r[i],
                &baseline_sampler,
                &schedule,
                seed,
                id,
            )?;
            batch.score(&train_refs, id)?;
            let loss = surrogate(&mut pass, &batch)?;
            check_loss(
                step,
                "self-critical surrogate",
                pass.graph.value(loss).item() as f64,
            )?;
            grads.accumulate(&pass.graph.backward(loss)?);
            reward_sum += batch.rewards.iter().sum::<f64>() / batch.len() as f64;
            base_sum += batch.baseline_reward;
            n += 1;
        }
        if !s.update(&mut grads, run.batch_size, step)? {
            skipped += 1;
        }
        let done = step + 1;
        if done % run.stage2_eval_every == 0 || done == run.stage2_steps {
            let k = n.max(1) as f64;
            s.record(done, "sample_reward", reward_sum / k);
            s.record(done, "baseline_reward", base_sum / k);
            s.record(done, "skipped_updates", skipped as f64);
            (reward_sum, base_sum, n, skipped) = (0.0, 0.0, 0, 0);
            let cider = validate_cascade(&model, &s.params, data, run, &val_r)?;
            saturation.observe(cider);
            if run.guided && saturation.saturated() {
                let mut replaced = 0usize;
                for (i, sample) in data.train.iter().enumerate() {
                    let estimate = baseline_decode(
                        &model,
                        &s.params,
                        &train_x[i],
                        &train_r[i],
                        &baseline_sampler,
                        &schedule,
                        seed,
                        sample.id,
                    )?;
                    let estimate = strip_padding(&estimate);
                    let next =
                        refresh_guide(&guides[i], &estimate, sample.id, &train_refs, &saturation)?;
                    replaced += usize::from(next != guides[i]);
                    guides[i] = next;
                }
                s.record(done, "guides_replaced", replaced as f64);
            }
            s.state.saturation = Some(saturation.clone());
            s.state.guides = Some(guides.clone());
            s.checkpoint(done, cider)?;
        }
    }
    Ok(s.finish())
}
