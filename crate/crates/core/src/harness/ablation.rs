//! The four-arm ablation: Base, +Semantic, +GSCST, +Cascade.

use std::fmt::Write as _;
use std::path::Path;

use log::info;

use super::config::RunConfig;
use super::data::{generate_dataset, Split};
use super::eval::Report;
use super::train::{train_stage1, train_stage1_from, train_stage2, train_teacher, BEST, METRICS};
use super::{evaluate, write_manifest};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    /// One stage, no retrieved sentence, cross-entropy only.
    Base,
    /// One stage with the retrieved sentence.
    Semantic,
    /// `Semantic` fine-tuned with guided self-critical training.
    Gscst,
    /// `M` stages with the retrieved sentence, then guided self-critical
    /// training.
    Cascade,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Base, Arm::Semantic, Arm::Gscst, Arm::Cascade];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Base => "Base",
            Arm::Semantic => "+Semantic",
            Arm::Gscst => "+GSCST",
            Arm::Cascade => "+Cascade",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Semantic => "semantic",
            Arm::Gscst => "gscst",
            Arm::Cascade => "cascade",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmScore {
    pub seed: u64,
    pub arm: Arm,
    pub bleu: [f64; 4],
    pub cider: f64,
}

impl ArmScore {
    fn columns(&self) -> [f64; 5] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.cider,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub scores: Vec<ArmScore>,
    pub split_hashes: Vec<(Split, String)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Ablation {
    /// Per-metric median over seeds: BLEU@1–4 and CIDEr, raw scale.
    pub fn median(&self, arm: Arm) -> [f64; 5] {
        let rows: Vec<[f64; 5]> = self
            .scores
            .iter()
            .filter(|s| s.arm == arm)
            .map(ArmScore::columns)
            .collect();
        std::array::from_fn(|j| median(rows.iter().map(|r| r[j]).collect()))
    }

    /// Median table in percent: one row per arm, five metric columns.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "", "B@1", "B@2", "B@3", "B@4", "CIDEr"
        );
        for arm in Arm::ALL {
            let m = self.median(arm);
            let _ = writeln!(
                s,
                "{:<10} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
                arm.label(),
                100.0 * m[0],
                100.0 * m[1],
                100.0 * m[2],
                100.0 * m[3],
                100.0 * m[4]
            );
        }
        s
    }

    /// Per-seed rows followed by the medians, raw scale.
    pub fn csv(&self) -> String {
        let mut s = String::from("seed,arm,bleu1,bleu2,bleu3,bleu4,cider\n");
        let line = |s: &mut String, seed: &str, arm: Arm, v: [f64; 5]| {
            let _ = writeln!(
                s,
                "{seed},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                arm.dir(),
                v[0],
                v[1],
                v[2],
                v[3],
                v[4]
            );
        };
        for r in &self.scores {
            line(&mut s, &r.seed.to_string(), r.arm, r.columns());
        }
        for arm in Arm::ALL {
            line(&mut s, "median", arm, self.median(arm));
        }
        s
    }
}

fn finish_arm(
    dir: &Path,
    run: &RunConfig,
    data: &super::data::Dataset,
    seed: u64,
    arm: Arm,
    command: &str,
) -> Result<ArmScore> {
    let report: Report = evaluate(&dir.join(BEST), data, Split::Test, run, seed)?;
    report.write(dir, &data.vocab)?;
    write_manifest(dir, command, run, data, &[METRICS, "metrics_test.csv"])?;
    info!("seed {seed} {}: CIDEr {:.4}", arm.label(), report.cider);
    Ok(ArmScore {
        seed,
        arm,
        bleu: report.bleu,
        cider: report.cider,
    })
}

/// Trains and scores every arm for each of `run.seeds` on one generated
/// dataset, writing `ablation.csv`, `ablation.txt` and a manifest to `out`.
/// Finished runs found under `out` are reused.
pub fn run_ablation(run: &RunConfig, out: &Path) -> Result<Ablation> {
    run.validate()?;
    std::fs::create_dir_all(out)?;
    let (data, _) = generate_dataset(run)?;
    data.write(&out.join("data"))?;
    let split_hashes = data.split_hashes()?;
    for (split, h) in &split_hashes {
        info!("split {} sha256 {h}", split.name());
    }

    let mut scores = Vec::new();
    for &seed in &run.seeds {
        let root = out.join(format!("seed{seed}"));
        let seeded = RunConfig {
            seed: Some(seed),
            ..run.clone()
        };
        let teacher_dir = root.join("teacher");
        train_teacher(&seeded, &data, &teacher_dir, true)?;
        write_manifest(&teacher_dir, "train-teacher", &seeded, &data, &[METRICS])?;
        let teacher = teacher_dir.join(BEST);

        let base = RunConfig {
            semantic: false,
            stages: 1,
            ..seeded.clone()
        };
        let dir = root.join(Arm::Base.dir());
        train_stage1(&base, &data, &dir, true)?;
        scores.push(finish_arm(
            &dir,
            &base,
            &data,
            seed,
            Arm::Base,
            "train-stage1",
        )?);

        let semantic = RunConfig {
            semantic: true,
            stages: 1,
            ..seeded.clone()
        };
        let sem_dir = root.join(Arm::Semantic.dir());
        train_stage1(&semantic, &data, &sem_dir, true)?;
        scores.push(finish_arm(
            &sem_dir,
            &semantic,
            &data,
            seed,
            Arm::Semantic,
            "train-stage1",
        )?);

        let dir = root.join(Arm::Gscst.dir());
        train_stage2(&semantic, &data, &sem_dir.join(BEST), &teacher, &dir, true)?;
        scores.push(finish_arm(
            &dir,
            &semantic,
            &data,
            seed,
            Arm::Gscst,
            "train-stage2",
        )?);

        let cascade = RunConfig {
            semantic: true,
            stage1_steps: seeded.cascade_steps,
            ..seeded.clone()
        };
        let first = root.join("cascade_stage1");
        train_stage1_from(&cascade, &data, Some(&sem_dir.join(BEST)), &first, true)?;
        write_manifest(&first, "train-stage1", &cascade, &data, &[METRICS])?;
        let dir = root.join(Arm::Cascade.dir());
        train_stage2(&cascade, &data, &first.join(BEST), &teacher, &dir, true)?;
        scores.push(finish_arm(
            &dir,
            &cascade,
            &data,
            seed,
            Arm::Cascade,
            "train-stage2",
        )?);
    }

    let ablation = Ablation {
        scores,
        split_hashes,
    };
    std::fs::write(out.join("ablation.csv"), ablation.csv())?;
    std::fs::write(out.join("ablation.txt"), ablation.table())?;
    write_manifest(out, "ablate", run, &data, &["ablation.csv", "ablation.txt"])?;
    Ok(ablation)
}
