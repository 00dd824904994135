//! Words as analog bits.
//!
//! Each word index `c` is written as its `n = ⌈log₂ W⌉`-bit binary expansion
//! (most significant bit first) with 0 mapped to `-scale` and 1 to `+scale`,
//! so a sentence becomes a real `N_s × n` matrix (one row per position) that
//! Gaussian diffusion can act on directly.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use capdiff_autodiff::{Real, Tensor};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word ↔ index table. Indices 0 and 1 are always `<pad>` and `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved words, in order.
    pub fn new<I, S>(words: I, max_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: HashMap<String, usize> =
            [(PAD_TOKEN.to_string(), PAD), (UNK_TOKEN.to_string(), UNK)].into();
        for w in words {
            let w = w.into();
            if index.contains_key(&w) {
                return Err(Error::Dataset(format!("duplicate vocabulary word `{w}`")));
            }
            index.insert(w.clone(), all.len());
            all.push(w);
        }
        Ok(Vocabulary {
            words: all,
            index,
            max_len,
        })
    }

    /// Reads the one-word-per-line format written by [`Vocabulary::write`].
    pub fn read(r: impl BufRead, max_len: usize) -> Result<Self> {
        let mut words = Vec::new();
        for line in r.lines() {
            let line = line?;
            let w = line.trim();
            if !w.is_empty() {
                words.push(w.to_string());
            }
        }
        Self::new(words, max_len)
    }

    /// One word per line; line `k` holds index `k + 2`.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for word in &self.words[2..] {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Whitespace tokenization, unknown words mapped to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.index_of(w)).collect()
    }

    /// Joins words, skipping padding.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.word(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Truncates or right-pads with `<pad>` to exactly `max_len` tokens.
    pub fn pad(&self, indices: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = indices.iter().copied().take(self.max_len).collect();
        out.resize(self.max_len, PAD);
        out
    }
}

/// Drops padding from a decoded token sequence.
pub fn strip_padding(indices: &[usize]) -> Vec<usize> {
    indices.iter().copied().filter(|&i| i != PAD).collect()
}

/// `⌈log₂ W⌉`.
pub fn bits_per_word(vocab_size: usize) -> Result<usize> {
    if vocab_size < 2 {
        return Err(Error::VocabTooSmall(vocab_size));
    }
    Ok((usize::BITS - (vocab_size - 1).leading_zeros()) as usize)
}

/// Code table `B ∈ {−scale, +scale}^{W×n}` plus the quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct BitCodec {
    vocab_size: usize,
    bits: usize,
    scale: f64,
}

impl BitCodec {
    pub fn new(vocab_size: usize, scale: f64) -> Result<Self> {
        let bits = bits_per_word(vocab_size)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "bit scale must be positive, got {scale}"
            )));
        }
        Ok(BitCodec {
            vocab_size,
            bits,
            scale,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Bit `j` (MSB first) of word `c` as ±1.
    #[inline]
    fn sign(&self, word: usize, j: usize) -> f64 {
        if (word >> (self.bits - 1 - j)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Row `c` of the code table, scaled.
    pub fn code(&self, word: usize) -> Result<Vec<f64>> {
        if word >= self.vocab_size {
            return Err(Error::WordIndex {
                index: word,
                size: self.vocab_size,
            });
        }
        Ok((0..self.bits)
            .map(|j| self.scale * self.sign(word, j))
            .collect())
    }

    /// The whole `W × n` table.
    pub fn table<F: Real>(&self) -> Tensor<F> {
        let mut data = Vec::with_capacity(self.vocab_size * self.bits);
        for c in 0..self.vocab_size {
            for j in 0..self.bits {
                data.push(F::lit(self.scale * self.sign(c, j)));
            }
        }
        Tensor::matrix(self.vocab_size, self.bits, data).expect("table shape")
    }

    /// Encodes an already padded sentence as an `N_s × n` matrix.
    pub fn encode<F: Real>(&self, words: &[usize]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(words.len() * self.bits);
        for &w in words {
            data.extend(self.code(w)?.into_iter().map(F::lit));
        }
        Ok(Tensor::matrix(words.len(), self.bits, data)?)
    }

    /// Thresholds every row at zero and maps the sign pattern back to a word.
    /// Patterns with no assigned word (possible when `W < 2ⁿ`) resolve to the
    /// Hamming-nearest code, ties to the lowest index.
    pub fn quantize_decode<F: Real>(&self, x: &Tensor<F>) -> Result<Vec<usize>> {
        if x.cols() != self.bits {
            return Err(Error::shape(
                "quantize_decode",
                format!("expected {} bit columns, got {:?}", self.bits, x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let pattern = x
                .row(r)
                .iter()
                .fold(0usize, |acc, &v| (acc << 1) | usize::from(v > F::zero()));
            out.push(self.nearest_word(pattern));
        }
        Ok(out)
    }

    fn nearest_word(&self, pattern: usize) -> usize {
        if pattern < self.vocab_size {
            return pattern;
        }
        (0..self.vocab_size)
            .min_by_key(|&c| ((c ^ pattern).count_ones(), c))
            .expect("non-empty vocabulary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bits_per_word_values() {
        assert_eq!(bits_per_word(10199).unwrap(), 14);
        assert_eq!(bits_per_word(2).unwrap(), 1);
        assert_eq!(bits_per_word(16).unwrap(), 4);
        assert_eq!(bits_per_word(17).unwrap(), 5);
        assert!(matches!(bits_per_word(1), Err(Error::VocabTooSmall(1))));
        assert!(bits_per_word(0).is_err());
    }

    #[test]
    fn word_three_of_four_is_all_positive() {
        let codec = BitCodec::new(4, 1.0).unwrap();
        let x: Tensor<f64> = codec.encode(&[3]).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
        let x: Tensor<f64> = codec.encode(&[2]).unwrap();
        assert_eq!(x.data(), &[1.0, -1.0]);
    }

    #[test]
    fn empty_sentence_pads_to_pad_codes() {
        let vocab = Vocabulary::new(["a", "b"], 5).unwrap();
        let codec = BitCodec::new(vocab.len(), 1.0).unwrap();
        let x: Tensor<f64> = codec.encode(&vocab.pad(&[])).unwrap();
        assert_eq!(x.shape(), &[5, 2]);
        assert!(x.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn out_of_range_word_is_an_error() {
        let codec = BitCodec::new(5, 1.0).unwrap();
        assert!(matches!(
            codec.encode::<f64>(&[5]),
            Err(Error::WordIndex { index: 5, size: 5 })
        ));
    }

    /// W=3 uses codes 00, 01, 10. Pattern 11 is at Hamming distance 2, 1, 1
    /// from them, so the tie between words 1 and 2 resolves to 1.
    #[test]
    fn unassigned_pattern_resolves_by_hamming_distance() {
        let codec = BitCodec::new(3, 1.0).unwrap();
        let cases: [([f64; 2], usize); 4] = [
            ([-1.0, -1.0], 0),
            ([-1.0, 1.0], 1),
            ([1.0, -1.0], 2),
            ([1.0, 1.0], 1),
        ];
        for (pattern, want) in cases {
            let x = Tensor::<f64>::from_f64(&[1, 2], &pattern).unwrap();
            assert_eq!(codec.quantize_decode(&x).unwrap(), vec![want]);
        }
    }

    #[test]
    fn code_rows_are_distinct_and_scaled() {
        let codec = BitCodec::new(37, 0.5).unwrap();
        let t: Tensor<f64> = codec.table();
        for a in 0..37 {
            assert!(t.row(a).iter().all(|&v| v == 0.5 || v == -0.5));
            for b in a + 1..37 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let vocab = Vocabulary::new(["the", "red", "cat"], 8).unwrap();
        let mut buf = Vec::new();
        vocab.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "the\nred\ncat\n");
        let back = Vocabulary::read(&buf[..], 8).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.index_of("the"), 2);
        assert_eq!(back.index_of("dog"), UNK);
        assert_eq!(back.decode(&[2, 4, PAD, PAD]), "the cat");
    }

    proptest! {
        #[test]
        fn round_trip_on_clean_codes(
            w in 2usize..=64,
            raw in proptest::collection::vec(any::<usize>(), 0..20),
        ) {
            let codec = BitCodec::new(w, 1.0).unwrap();
            let words: Vec<usize> = raw.iter().map(|r| r % w).collect();
            let x: Tensor<f64> = codec.encode(&words).unwrap();
            prop_assert_eq!(codec.quantize_decode(&x).unwrap(), words);
        }

        #[test]
        fn decode_is_scale_invariant(
            w in 2usize..=64,
            vals in proptest::collection::vec(-3.0f64..3.0, 1..8),
            lambda in 0.001f64..1000.0,
        ) {
            let codec = BitCodec::new(w, 1.0).unwrap();
            let n = codec.bits();
            let data: Vec<f64> = vals.iter().cycle().take(n * 3).copied().collect();
            let x = Tensor::<f64>::from_f64(&[3, n], &data).unwrap();
            let scaled = x.map(|v| v * lambda);
            prop_assert_eq!(codec.quantize_decode(&x).unwrap(), codec.quantize_decode(&scaled).unwrap());
        }

        #[test]
        fn bounded_noise_preserves_words(w in 2usize..=64, noise in proptest::collection::vec(-0.99f64..0.99, 64)) {
            let codec = BitCodec::new(w, 1.0).unwrap();
            let words: Vec<usize> = (0..4).map(|i| (i * 7 + 3) % w).collect();
            let x: Tensor<f64> = codec.encode(&words).unwrap();
            let data: Vec<f64> = x.data().iter().zip(noise.iter().cycle()).map(|(v, e)| v + e).collect();
            let noisy = Tensor::<f64>::from_f64(x.shape(), &data).unwrap();
            prop_assert_eq!(codec.quantize_decode(&noisy).unwrap(), words);
        }
    }
}
