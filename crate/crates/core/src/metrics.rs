//! Corpus-level caption metrics: CIDEr-D and BLEU.
//!
//! Both follow the reference caption-evaluation toolkit. Scores are on the
//! raw scale (CIDEr-D tops out at 10 for a perfect single-reference match,
//! BLEU at 1); tables multiply by 100.

use std::collections::{BTreeMap, BTreeSet};

use crate::{Error, Result};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type Counts<T> = BTreeMap<Vec<T>, usize>;

/// n-gram counts for n = 1..=4; index `n − 1`.
fn ngram_counts<T: Clone + Ord>(words: &[T]) -> [Counts<T>; MAX_N] {
    let mut out: [Counts<T>; MAX_N] = Default::default();
    for (n, counts) in out.iter_mut().enumerate() {
        let n = n + 1;
        if words.len() < n {
            continue;
        }
        for w in words.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Which CIDEr flavour to compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CiderVariant {
    /// Clipped candidate weights and a Gaussian length penalty.
    #[default]
    D,
    /// Unclipped cosine, no length penalty.
    Plain,
}

/// References with document frequencies for TF-IDF weighting.
#[derive(Clone, Debug)]
pub struct RefCorpus<T> {
    ids: BTreeMap<u64, usize>,
    refs: Vec<Vec<Vec<T>>>,
    doc_freq: BTreeMap<Vec<T>, usize>,
    /// Precomputed reference vectors per sample.
    ref_vecs: Vec<Vec<TfIdf<T>>>,
}

#[derive(Clone, Debug)]
struct TfIdf<T> {
    vec: [BTreeMap<Vec<T>, f64>; MAX_N],
    norm: [f64; MAX_N],
    /// Bigram count, the length measure used by the length penalty.
    length: f64,
}

impl<T: Clone + Ord> RefCorpus<T> {
    /// `references` pairs a sample id with its reference sentences.
    pub fn new<I>(references: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, Vec<Vec<T>>)>,
    {
        let mut ids = BTreeMap::new();
        let mut refs = Vec::new();
        for (id, r) in references {
            if r.is_empty() {
                return Err(Error::NoReferences(id));
            }
            if ids.insert(id, refs.len()).is_some() {
                return Err(Error::Dataset(format!("duplicate sample id {id}")));
            }
            refs.push(r);
        }
        if refs.is_empty() {
            return Err(Error::Dataset("empty reference corpus".into()));
        }
        let mut doc_freq: BTreeMap<Vec<T>, usize> = BTreeMap::new();
        for sample in &refs {
            let mut seen: BTreeSet<&[T]> = BTreeSet::new();
            for sentence in sample {
                for n in 1..=MAX_N.min(sentence.len()) {
                    for w in sentence.windows(n) {
                        seen.insert(w);
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        let mut corpus = RefCorpus {
            ids,
            refs,
            doc_freq,
            ref_vecs: Vec::new(),
        };
        corpus.ref_vecs = corpus
            .refs
            .iter()
            .map(|sample| sample.iter().map(|s| corpus.tfidf(s)).collect())
            .collect();
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Number of samples whose references contain `ngram`.
    pub fn document_frequency(&self, ngram: &[T]) -> usize {
        self.doc_freq.get(ngram).copied().unwrap_or(0)
    }

    pub fn references(&self, sample_id: u64) -> Result<&[Vec<T>]> {
        let i = self.index(sample_id)?;
        Ok(&self.refs[i])
    }

    fn index(&self, sample_id: u64) -> Result<usize> {
        self.ids
            .get(&sample_id)
            .copied()
            .ok_or(Error::UnknownSample(sample_id))
    }

    fn tfidf(&self, words: &[T]) -> TfIdf<T> {
        let log_n = (self.refs.len() as f64).ln();
        let counts = ngram_counts(words);
        let mut vec: [BTreeMap<Vec<T>, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        for (n, c) in counts.into_iter().enumerate() {
            for (g, tf) in c {
                let df = (self.document_frequency(&g) as f64).max(1.0);
                let w = tf as f64 * (log_n - df.ln());
                norm[n] += w * w;
                vec[n].insert(g, w);
            }
        }
        let length = words.len().saturating_sub(1) as f64;
        TfIdf {
            vec,
            norm: norm.map(f64::sqrt),
            length,
        }
    }

    /// CIDEr-D of `candidate` against the references of `sample_id`.
    pub fn cider_d(&self, candidate: &[T], sample_id: u64) -> Result<f64> {
        self.cider(candidate, sample_id, CiderVariant::D)
    }

    pub fn cider(&self, candidate: &[T], sample_id: u64, variant: CiderVariant) -> Result<f64> {
        let i = self.index(sample_id)?;
        let hyp = self.tfidf(candidate);
        let refs = &self.ref_vecs[i];
        let mut total = 0.0;
        for r in refs {
            let delta = hyp.length - r.length;
            let penalty = match variant {
                CiderVariant::D => (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp(),
                CiderVariant::Plain => 1.0,
            };
            for n in 0..MAX_N {
                let mut val = 0.0;
                for (g, &h) in &hyp.vec[n] {
                    if let Some(&rv) = r.vec[n].get(g) {
                        let h = match variant {
                            CiderVariant::D => h.min(rv),
                            CiderVariant::Plain => h,
                        };
                        val += h * rv;
                    }
                }
                if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
                    val /= hyp.norm[n] * r.norm[n];
                }
                total += val * penalty;
            }
        }
        Ok(total / MAX_N as f64 / refs.len() as f64 * 10.0)
    }

    /// Mean CIDEr-D over `(sample id, candidate)` pairs.
    pub fn mean_cider_d<'a, I>(&self, candidates: I) -> Result<f64>
    where
        T: 'a,
        I: IntoIterator<Item = (u64, &'a [T])>,
    {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (id, c) in candidates {
            sum += self.cider_d(c, id)?;
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

/// Corpus BLEU@1..=N (cumulative geometric means with one shared brevity
/// penalty), the reference length being the closest reference per
/// candidate, ties to the shorter one.
pub fn bleu<T: Clone + Ord>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Dataset(format!(
            "bleu needs matching nonempty inputs, got {} candidates and {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Dataset("candidate without references".into()));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| (r.len().abs_diff(cand.len()), r.len()))
            .min()
            .expect("nonempty")
            .1;
        for n in 1..=max_n {
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in refs {
                let mut c: BTreeMap<&[T], usize> = BTreeMap::new();
                if r.len() >= n {
                    for w in r.windows(n) {
                        *c.entry(w).or_insert(0) += 1;
                    }
                }
                for (g, k) in c {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            let mut c: BTreeMap<&[T], usize> = BTreeMap::new();
            if cand.len() >= n {
                for w in cand.windows(n) {
                    *c.entry(w).or_insert(0) += 1;
                }
            }
            matches[n - 1] += c
                .iter()
                .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let bp = if cand_len > ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0f64;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 || !log_sum.is_finite() {
            log_sum = f64::NEG_INFINITY;
            out.push(0.0);
            continue;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        out.push(bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(samples: &[&[&str]]) -> RefCorpus<String> {
        RefCorpus::new(
            samples
                .iter()
                .enumerate()
                .map(|(i, refs)| (i as u64, refs.iter().map(|r| toks(r)).collect())),
        )
        .unwrap()
    }

    #[test]
    fn single_sample_frequencies_are_one() {
        let c = corpus(&[&["a b a c"]]);
        assert_eq!(c.document_frequency(&toks("a")), 1);
        assert_eq!(c.document_frequency(&toks("b a c")), 1);
        assert_eq!(c.document_frequency(&toks("z")), 0);
    }

    #[test]
    fn hand_counted_frequency_table() {
        let c = corpus(&[&["a red cube"], &["a blue cube"], &["the red ball"]]);
        let table = [
            ("a", 2),
            ("red", 2),
            ("cube", 2),
            ("the", 1),
            ("ball", 1),
            ("blue", 1),
            ("a red", 1),
            ("red cube", 1),
            ("blue cube", 1),
            ("a blue cube", 1),
            ("red ball", 1),
            ("green", 0),
            ("cube a", 0),
        ];
        for (g, want) in table {
            assert_eq!(c.document_frequency(&toks(g)), want, "{g}");
        }
    }

    #[test]
    fn empty_references_are_rejected() {
        assert!(matches!(
            RefCorpus::<String>::new([(3, vec![])]),
            Err(Error::NoReferences(3))
        ));
        let c = corpus(&[&["a b"]]);
        assert!(matches!(
            c.cider_d(&toks("a"), 9),
            Err(Error::UnknownSample(9))
        ));
    }

    #[test]
    fn identical_single_reference_scores_ten() {
        let c = corpus(&[
            &["a red cube left of a blue ball"],
            &["the green cone on the box"],
        ]);
        let s = c
            .cider_d(&toks("a red cube left of a blue ball"), 0)
            .unwrap();
        assert!((s - 10.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let c = corpus(&[&["a red cube"], &["the blue ball"]]);
        assert_eq!(c.cider_d(&toks("green cone box"), 0).unwrap(), 0.0);
    }

    #[test]
    fn plain_cider_is_ten_times_mean_cosine_without_penalty() {
        let c = corpus(&[&["a b c d e"], &["x y z"]]);
        // Same length, so the CIDEr-D penalty is 1 and clipping is inert
        // for a candidate with unit term frequencies.
        let cand = toks("a b c d x");
        let d = c.cider_d(&cand, 0).unwrap();
        let plain = c.cider(&cand, 0, CiderVariant::Plain).unwrap();
        assert!((d - plain).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![vec![toks("a b c d e")], vec![toks("f g h i")]];
        let cands = vec![toks("a b c d e"), toks("f g h i")];
        for b in bleu(&cands, &refs, 4).unwrap() {
            assert!((b - 1.0).abs() < 1e-12);
        }
        let other = vec![toks("q r s t"), toks("u v w x")];
        assert_eq!(bleu(&other, &refs, 4).unwrap(), vec![0.0; 4]);
        assert!(bleu::<String>(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_grows_when_a_matching_ngram_is_added() {
        let refs = vec![vec![toks("the cat sat on the mat")]];
        let short = bleu(&[toks("the cat sat")], &refs, 2).unwrap();
        let longer = bleu(&[toks("the cat sat on")], &refs, 2).unwrap();
        assert!(longer[0] > short[0] && longer[1] > short[1]);
    }
}
