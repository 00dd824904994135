//! Policy-gradient checks on a tiny cascade whose sentence space is small
//! enough to enumerate.

mod common;

use capdiff::captioner::StageConfig;
use capdiff::diffusion::{gaussian, NoiseSchedule, SamplerConfig};
use capdiff::gscst::{
    baseline_decode, policy_pass_at, sample_candidates, DecodeMode, RewardBatch, Teacher,
};
use capdiff::nn::no_dropout;
use capdiff_autodiff::{GradBuffer, Graph, ParamStore, Tensor};
use common::policy::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_advantage_gives_exactly_zero_gradient() {
    for stages in [1, 2] {
        let f = fixture(stages);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pass = policy_pass_at(
            &f.model,
            &f.params,
            &f.features,
            &f.x_t,
            T,
            &RETRIEVED,
            &NoiseSchedule::default(),
        )
        .unwrap();
        let mut batch = sample_candidates(&pass, Some(&[2, 3]), 5, 1.0, &mut rng).unwrap();
        batch.rewards = vec![0.7; 5];
        batch.baseline_reward = 0.7;
        let grads = batch_grads(&f, &batch);
        assert!(grads.is_all_zero(), "stages {stages}");
    }
}

#[test]
fn candidate_log_probs_match_the_policy() {
    let f = fixture(2);
    let lp = log_probs(&f, &f.params);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pass = policy_pass_at(
        &f.model,
        &f.params,
        &f.features,
        &f.x_t,
        T,
        &RETRIEVED,
        &NoiseSchedule::default(),
    )
    .unwrap();
    let batch = sample_candidates(&pass, Some(&[2, 3]), 4, 1.0, &mut rng).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch.guide, Some(3));
    assert_eq!(batch.sentences[3], vec![2, 3]);
    for (s, l) in batch.sentences.iter().zip(&batch.log_probs) {
        let want = lp.get(0, s[0]) + lp.get(1, s[1]);
        assert!((l - want).abs() < 1e-12);
    }
    // Probabilities over the whole space sum to one.
    let total: f64 = (0..W)
        .flat_map(|a| (0..W).map(move |b| (a, b)))
        .map(|(a, b)| (lp.get(0, a) + lp.get(1, b)).exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn one_step_raises_positive_advantage_candidate() {
    let mut f = fixture(1);
    let target = vec![2, 3];
    let batch = RewardBatch {
        sentences: vec![vec![1, 1], target.clone()],
        log_probs: vec![0.0, 0.0],
        guide: Some(1),
        rewards: vec![0.0, 1.0],
        baseline: vec![1, 1],
        baseline_reward: 0.0,
    };
    let before = log_probs(&f, &f.params);
    let grads = batch_grads(&f, &batch);
    for id in f.params.ids().collect::<Vec<_>>() {
        let g = grads.get(id).to_vec();
        for (p, d) in f.params.get_mut(id).data_mut().iter_mut().zip(g) {
            *p -= 1e-2 * d;
        }
    }
    let after = log_probs(&f, &f.params);
    let lp = |t: &Tensor<f64>| t.get(0, 2) + t.get(1, 3);
    assert!(
        lp(&after) > lp(&before),
        "{} -> {}",
        lp(&before),
        lp(&after)
    );
}

/// Expected advantage under the policy, by enumerating all `W^2`
/// sentences.
fn expected_advantage(f: &Fixture, params: &ParamStore<f64>, baseline: f64) -> f64 {
    let lp = log_probs(f, params);
    let mut total = 0.0;
    for a in 0..W {
        for b in 0..W {
            let p = (lp.get(0, a) + lp.get(1, b)).exp();
            total += p * (reward(f, &[a, b]) - baseline);
        }
    }
    total
}

#[test]
fn estimator_sign_agrees_with_finite_difference() {
    let f = fixture(1);
    let guide = [2, 3];
    let baseline = vec![4, 4];
    let r_b = reward(&f, &baseline);
    let head_b = f.params.id("stage1.head.b").unwrap();
    let dec_w = f.params.id("stage1.dec0.ffn.fc2.w").unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sums = GradBuffer::zeros_like(&f.params);
    let batches = 200;
    for _ in 0..batches {
        let pass = policy_pass_at(
            &f.model,
            &f.params,
            &f.features,
            &f.x_t,
            T,
            &RETRIEVED,
            &NoiseSchedule::default(),
        )
        .unwrap();
        let mut batch = sample_candidates(&pass, Some(&guide), 5, 1.0, &mut rng).unwrap();
        batch.baseline = baseline.clone();
        batch.score(&f.corpus, 0).unwrap();
        add_grads(&f, &batch, &mut sums);
    }

    let h = 1e-4;
    for (id, k) in [(head_b, 2), (head_b, 3), (head_b, 1), (dec_w, 5)] {
        let mut plus = f.params.clone();
        plus.get_mut(id).data_mut()[k] += h;
        let mut minus = f.params.clone();
        minus.get_mut(id).data_mut()[k] -= h;
        let fd =
            (expected_advantage(&f, &plus, r_b) - expected_advantage(&f, &minus, r_b)) / (2.0 * h);
        // The surrogate is minimised, so its gradient points against the
        // reward gradient.
        let estimate = -sums.get(id)[k] / batches as f64;
        assert!(
            fd.abs() < 1e-9 || estimate.signum() == fd.signum(),
            "{} [{k}]: estimate {estimate:.4e}, finite difference {fd:.4e}",
            f.params.name(id)
        );
    }
}

#[test]
fn baseline_is_deterministic() {
    let f = fixture(2);
    let cfg = SamplerConfig {
        steps: 6,
        ..SamplerConfig::default()
    };
    let s = NoiseSchedule::default();
    let a = baseline_decode(&f.model, &f.params, &f.features, &RETRIEVED, &cfg, &s, 9, 4).unwrap();
    let b = baseline_decode(&f.model, &f.params, &f.features, &RETRIEVED, &cfg, &s, 9, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), LEN);
}

fn teacher() -> (Teacher, ParamStore<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ParamStore::new();
    let cfg = StageConfig {
        max_len: 6,
        vocab_size: 7,
        ..config()
    };
    let t = Teacher::new(&mut params, cfg, &mut rng).unwrap();
    let features = gaussian(&mut rng, &[3, 3]);
    (t, params, features)
}

#[test]
fn teacher_is_causal() {
    let (t, params, features) = teacher();
    let run = |inputs: &[usize]| {
        let mut g = Graph::new(&params, false);
        let v = t
            .encode_visual(&mut g, &features, &mut no_dropout())
            .unwrap();
        let l = t.logits(&mut g, v, inputs, &mut no_dropout()).unwrap();
        g.value(l).clone()
    };
    let a = run(&[0, 3, 4, 5, 6]);
    let b = run(&[0, 3, 4, 1, 2]);
    for r in 0..3 {
        for c in 0..7 {
            assert!((a.get(r, c) - b.get(r, c)).abs() < 1e-12);
        }
    }
    assert!((0..7).any(|c| (a.get(3, c) - b.get(3, c)).abs() > 1e-9));
}

#[test]
fn teacher_decoding_respects_length() {
    let (t, params, features) = teacher();
    for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
        let s = t.decode(&params, &features, mode).unwrap();
        assert!(s.len() <= 6);
        assert!(s.iter().all(|&w| w != 0 && w < 7));
    }
    assert!(t.decode(&params, &features, DecodeMode::Beam(0)).is_err());
}

#[test]
fn teacher_loss_gradient_is_finite() {
    let (t, params, features) = teacher();
    let mut g = Graph::new(&params, true);
    let l = t
        .loss(&mut g, &features, &[2, 3, 4], 0.1, &mut no_dropout())
        .unwrap();
    assert!(g.value(l).item() > 0.0);
    let pg = g.backward(l).unwrap();
    let mut buf = GradBuffer::zeros_like(&params);
    buf.accumulate(&pg);
    assert!(buf.is_finite() && !buf.is_all_zero());
}
