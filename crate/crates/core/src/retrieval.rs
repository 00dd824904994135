//! Nearest-neighbour sentence retrieval over mean-pooled object features.

use std::io::{BufRead, Write};

use capdiff_autodiff::{Real, Tensor};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub sample_id: u64,
    /// Unit-norm mean-pooled feature of the owning sample.
    pub feature: Vec<f64>,
    pub tokens: Vec<usize>,
}

/// Training sentences indexed by their image's pooled feature; one entry per
/// (sample, caption) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePool {
    entries: Vec<PoolEntry>,
}

/// Mean over object rows, scaled to unit L2 norm. A zero vector stays zero.
pub fn pooled_feature<F: Real>(features: &Tensor<F>) -> Result<Vec<f64>> {
    if features.rows() == 0 || features.numel() == 0 {
        return Err(Error::NoObjects);
    }
    let (k, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0; d];
    for r in 0..k {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v.as_f64();
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(mean)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SentencePool {
    /// Builds the pool from `(sample id, features, captions)` triples.
    pub fn build<'a, F, I>(samples: I) -> Result<Self>
    where
        F: Real,
        I: IntoIterator<Item = (u64, &'a Tensor<F>, &'a [Vec<usize>])>,
    {
        let mut entries = Vec::new();
        for (id, feats, captions) in samples {
            let feature = pooled_feature(feats)?;
            for c in captions {
                entries.push(PoolEntry {
                    sample_id: id,
                    feature: feature.clone(),
                    tokens: c.clone(),
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(SentencePool { entries })
    }

    pub fn from_entries(entries: Vec<PoolEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(SentencePool { entries })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the best-matching entry; ties go to the lowest index.
    pub fn nearest<F: Real>(&self, query: &Tensor<F>, exclude: Option<u64>) -> Result<usize> {
        let q = pooled_feature(query)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if Some(e.sample_id) == exclude {
                continue;
            }
            let s = dot(&q, &e.feature);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| Error::PoolExhausted(exclude.unwrap_or_default()))
    }

    /// Tokens of the closest caption whose owner differs from `exclude`.
    pub fn retrieve<F: Real>(&self, query: &Tensor<F>, exclude: Option<u64>) -> Result<&[usize]> {
        let i = self.nearest(query, exclude)?;
        Ok(&self.entries[i].tokens)
    }

    /// Index file: one line per entry, `id<TAB>hex feature<TAB>tokens`.
    /// Feature values are little-endian `f64` bytes in hex so they reload
    /// bit-exactly.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            let bytes: Vec<u8> = e.feature.iter().flat_map(|v| v.to_le_bytes()).collect();
            let tokens: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(
                w,
                "{}\t{}\t{}",
                e.sample_id,
                hex::encode(bytes),
                tokens.join(" ")
            )?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Dataset(format!("pool line {}: {what}", n + 1));
            let mut parts = line.split('\t');
            let id = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("sample id"))?;
            let bytes = hex::decode(parts.next().ok_or_else(|| bad("feature"))?)
                .map_err(|_| bad("feature hex"))?;
            if bytes.len() % 8 != 0 {
                return Err(bad("feature length"));
            }
            let feature = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tokens = parts
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("token")))
                .collect::<Result<_>>()?;
            entries.push(PoolEntry {
                sample_id: id,
                feature,
                tokens,
            });
        }
        SentencePool::from_entries(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn entry(id: u64, f: [f64; 2], tok: usize) -> PoolEntry {
        PoolEntry {
            sample_id: id,
            feature: f.to_vec(),
            tokens: vec![tok],
        }
    }

    /// Unit vectors at cosines 0.9, 0.5 and 0.1 from the query (1, 0).
    fn hand_pool() -> SentencePool {
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        SentencePool::from_entries(vec![
            entry(10, at(0.9), 1),
            entry(11, at(0.5), 2),
            entry(12, at(0.1), 3),
        ])
        .unwrap()
    }

    #[test]
    fn hand_computed_cosines_pick_first_entry() {
        let pool = hand_pool();
        let q = feats(&[&[2.0, 0.0]]);
        assert_eq!(pool.retrieve(&q, None).unwrap(), &[1]);
        assert_eq!(pool.retrieve(&q, Some(10)).unwrap(), &[2]);
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let pool = SentencePool::from_entries(vec![entry(4, [1.0, 0.0], 1)]).unwrap();
        let q = feats(&[&[1.0, 1.0]]);
        assert!(matches!(
            pool.retrieve(&q, Some(4)),
            Err(Error::PoolExhausted(4))
        ));
        assert!(SentencePool::from_entries(vec![]).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let pool =
            SentencePool::from_entries(vec![entry(1, [1.0, 0.0], 7), entry(2, [1.0, 0.0], 8)])
                .unwrap();
        assert_eq!(pool.retrieve(&feats(&[&[3.0, 0.0]]), None).unwrap(), &[7]);
    }

    #[test]
    fn build_normalizes_and_counts_pairs() {
        let a = feats(&[&[1.0, 2.0, 2.0], &[1.0, 0.0, 0.0]]);
        let b = feats(&[&[0.0, 0.0, 5.0]]);
        let caps_a = vec![vec![4, 5], vec![4, 6], vec![7]];
        let caps_b = vec![vec![8]];
        let pool = SentencePool::build([(0, &a, &caps_a[..]), (1, &b, &caps_b[..])]).unwrap();
        assert_eq!(pool.len(), 4);
        for e in pool.entries() {
            let n = e.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        // Own features, no exclusion: one of the sample's own captions.
        assert_eq!(pool.retrieve(&a, None).unwrap(), &[4, 5]);
        assert_eq!(pool.retrieve(&a, Some(0)).unwrap(), &[8]);
        let empty: Vec<(u64, &Tensor<f64>, &[Vec<usize>])> = vec![];
        assert!(matches!(SentencePool::build(empty), Err(Error::EmptyPool)));
    }

    #[test]
    fn index_file_round_trips() {
        let pool = hand_pool();
        let mut buf = Vec::new();
        pool.write(&mut buf).unwrap();
        let back = SentencePool::read(&buf[..]).unwrap();
        assert_eq!(back, pool);
    }
}
