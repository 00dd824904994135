//! Caption generation over a split and the metric report.

use std::fmt::Write as _;
use std::path::Path;

use capdiff_autodiff::{ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{Sample, Split};
use crate::bitcodec::{strip_padding, Vocabulary};
use crate::cascade::{cascade_sample, Cascade};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::gscst::{DecodeMode, Teacher};
use crate::metrics::{bleu, RefCorpus};
use crate::Result;

/// Stream `stream` of `seed`; per-sample streams keep each sample's noise
/// independent of evaluation order and subset.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One caption per sample through the full reverse chain.
pub fn caption_samples<F: Real>(
    model: &Cascade,
    params: &ParamStore<F>,
    samples: &[Sample],
    retrieved: &[Vec<usize>],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<(u64, Vec<usize>)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, s.id);
            let r = retrieved.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let out = cascade_sample(
                model,
                params,
                &s.feature_tensor(),
                r,
                sampler,
                schedule,
                &mut rng,
            )?;
            Ok((s.id, strip_padding(&out.words)))
        })
        .collect()
}

pub fn teacher_captions<F: Real>(
    teacher: &Teacher,
    params: &ParamStore<F>,
    samples: &[Sample],
    mode: DecodeMode,
) -> Result<Vec<(u64, Vec<usize>)>> {
    samples
        .iter()
        .map(|s| Ok((s.id, teacher.decode(params, &s.feature_tensor(), mode)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionScore {
    pub id: u64,
    pub words: Vec<usize>,
    pub cider: f64,
}

/// CIDEr-D (raw scale, 10 for a perfect match) and BLEU@1–4 of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub split: Split,
    pub cider: f64,
    pub bleu: [f64; 4],
    pub captions: Vec<CaptionScore>,
}

impl Report {
    pub fn score(
        split: Split,
        captions: Vec<(u64, Vec<usize>)>,
        refs: &RefCorpus<usize>,
    ) -> Result<Self> {
        let mut scored = Vec::with_capacity(captions.len());
        let mut cands = Vec::with_capacity(captions.len());
        let mut references = Vec::with_capacity(captions.len());
        for (id, words) in captions {
            let cider = refs.cider_d(&words, id)?;
            cands.push(words.clone());
            references.push(refs.references(id)?.to_vec());
            scored.push(CaptionScore { id, words, cider });
        }
        let cider = if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| c.cider).sum::<f64>() / scored.len() as f64
        };
        let b = bleu(&cands, &references, 4)?;
        Ok(Report {
            split,
            cider,
            bleu: [b[0], b[1], b[2], b[3]],
            captions: scored,
        })
    }

    /// The `n` lowest-scoring captions, ties by sample id.
    pub fn worst(&self, n: usize) -> Vec<&CaptionScore> {
        let mut v: Vec<&CaptionScore> = self.captions.iter().collect();
        v.sort_by(|a, b| a.cider.total_cmp(&b.cider).then(a.id.cmp(&b.id)));
        v.truncate(n);
        v
    }

    /// Metric table in percent plus the ten worst captions.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "split: {}  images: {}",
            self.split.name(),
            self.captions.len()
        );
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8}",
            "B@1", "B@2", "B@3", "B@4", "CIDEr"
        );
        let _ = writeln!(
            s,
            "{:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            100.0 * self.bleu[0],
            100.0 * self.bleu[1],
            100.0 * self.bleu[2],
            100.0 * self.bleu[3],
            100.0 * self.cider
        );
        let _ = writeln!(s, "\nworst captions:");
        for c in self.worst(10) {
            let _ = writeln!(
                s,
                "{:>6}  {:>6.3}  {}",
                c.id,
                c.cider,
                vocab.decode(&c.words)
            );
        }
        s
    }

    /// `metric,value` rows on the raw scale.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (i, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "bleu{},{b:.6}", i + 1);
        }
        let _ = writeln!(s, "cider,{:.6}", self.cider);
        s
    }

    pub fn write(&self, dir: &Path, vocab: &Vocabulary) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let name = self.split.name();
        std::fs::write(dir.join(format!("report_{name}.txt")), self.render(vocab))?;
        std::fs::write(dir.join(format!("metrics_{name}.csv")), self.csv())?;
        let mut caps = String::from("id\tcider\tcaption\n");
        for c in &self.captions {
            let _ = writeln!(caps, "{}\t{:.6}\t{}", c.id, c.cider, vocab.decode(&c.words));
        }
        std::fs::write(dir.join(format!("captions_{name}.tsv")), caps)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_captions_score_perfectly() {
        let refs = RefCorpus::new([
            (3, vec![vec![2, 5, 6, 7, 2, 8]]),
            (4, vec![vec![3, 9, 6, 10, 3, 11]]),
        ])
        .unwrap();
        let caps = vec![(3, vec![2, 5, 6, 7, 2, 8]), (4, vec![3, 9, 6, 10, 3, 11])];
        let r = Report::score(Split::Test, caps, &refs).unwrap();
        assert!((r.cider - 10.0).abs() < 1e-9, "{}", r.cider);
        for b in r.bleu {
            assert!((b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn worst_is_sorted_and_bounded() {
        // A distinct first word per sample keeps document frequencies below
        // the corpus size, so matching captions score above zero.
        let sentence = |i: u64| vec![20 + i as usize, 3, 4, 5];
        let refs = RefCorpus::new((0..12u64).map(|i| (i, vec![sentence(i)]))).unwrap();
        let caps = (0..12u64)
            .map(|i| (i, if i % 3 == 0 { sentence(i) } else { vec![6, 7] }))
            .collect();
        let r = Report::score(Split::Val, caps, &refs).unwrap();
        let w = r.worst(10);
        assert_eq!(w.len(), 10);
        assert!(w.windows(2).all(|p| p[0].cider <= p[1].cider));
        assert_eq!(w[0].id, 1);
        assert!(w[7].cider == 0.0 && w[8].cider > 0.0);
    }
}
