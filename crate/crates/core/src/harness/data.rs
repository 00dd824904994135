//! Synthetic scenes with grammar-generated captions.
//!
//! Each scene holds 2–3 objects with a class and an attribute; consecutive
//! objects are linked by a spatial relation. An object's feature is the sum
//! of its class, attribute and relation-role embeddings plus Gaussian
//! jitter. Captions read `det attr class relation det attr class`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use capdiff_autodiff::{Real, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::bitcodec::Vocabulary;
use crate::metrics::RefCorpus;
use crate::retrieval::SentencePool;
use crate::{Error, Result};

const CLASSES: [&str; 32] = [
    "cube", "ball", "cone", "box", "ring", "star", "disk", "bowl", "cup", "vase", "lamp", "book",
    "chair", "table", "plant", "clock", "bottle", "shoe", "hat", "key", "pen", "mug", "bell",
    "kite", "drum", "fork", "leaf", "shell", "coin", "sock", "brush", "jar",
];
const ATTRIBUTES: [&str; 12] = [
    "red", "blue", "green", "yellow", "black", "white", "small", "large", "shiny", "wooden",
    "striped", "old",
];
const RELATIONS: [&str; 10] = [
    "near", "above", "below", "behind", "beside", "under", "on", "inside", "facing", "touching",
];
const DETERMINERS: [&str; 2] = ["a", "the"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub class: usize,
    pub attribute: usize,
}

/// `(subject, relation, object)` over object positions.
pub type Triple = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub id: u64,
    pub objects: Vec<Object>,
    pub relations: Vec<Triple>,
}

/// One image of a split: object features and tokenized captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    /// `K × D_v`, serialized as hex `f64` bit patterns.
    #[serde(with = "hex_rows")]
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<Vec<usize>>,
}

impl Sample {
    pub fn feature_tensor<F: Real>(&self) -> Tensor<F> {
        let rows: Vec<Vec<F>> = self
            .features
            .iter()
            .map(|r| r.iter().map(|&v| F::lit(v)).collect())
            .collect();
        Tensor::from_rows(&rows).expect("rectangular features")
    }
}

mod hex_rows {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(rows.iter().map(|r| {
            r.iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect::<Vec<_>>()
                .join(" ")
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        rows.iter()
            .map(|r| {
                r.split_whitespace()
                    .map(|h| {
                        u64::from_str_radix(h, 16)
                            .map(f64::from_bits)
                            .map_err(serde::de::Error::custom)
                    })
                    .collect()
            })
            .collect()
    }
}

/// The fixed embedding tables and grammar of one generated world.
struct World {
    vocab: Vocabulary,
    class_emb: Vec<Vec<f64>>,
    attr_emb: Vec<Vec<f64>>,
    subject_emb: Vec<Vec<f64>>,
    object_emb: Vec<Vec<f64>>,
}

fn table(rng: &mut ChaCha8Rng, rows: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    let s = scale / (dim as f64).sqrt();
    (0..rows)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    s * n
                })
                .collect()
        })
        .collect()
}

impl World {
    fn new(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let limits = [
            ("classes", cfg.classes, CLASSES.len()),
            ("attributes", cfg.attributes, ATTRIBUTES.len()),
            ("relations", cfg.relations, RELATIONS.len()),
        ];
        for (name, want, have) in limits {
            if want < 2 || want > have {
                return Err(Error::Dataset(format!(
                    "grammar needs 2..={have} {name}, configured {want}"
                )));
            }
        }
        let words = DETERMINERS
            .iter()
            .chain(&CLASSES[..cfg.classes])
            .chain(&ATTRIBUTES[..cfg.attributes])
            .chain(&RELATIONS[..cfg.relations]);
        let vocab = Vocabulary::new(words.copied(), cfg.max_len)?;
        if cfg.max_len < 7 {
            return Err(Error::Dataset(format!(
                "captions have up to 7 words, max_len is {}",
                cfg.max_len
            )));
        }
        let d = cfg.feature_dim;
        Ok(World {
            vocab,
            class_emb: table(rng, cfg.classes, d, 1.0),
            attr_emb: table(rng, cfg.attributes, d, 1.0),
            subject_emb: table(rng, cfg.relations, d, 0.7),
            object_emb: table(rng, cfg.relations, d, 0.7),
        })
    }

    fn scene(&self, cfg: &RunConfig, id: u64, rng: &mut ChaCha8Rng) -> ToyScene {
        let k = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let objects = (0..k)
            .map(|_| Object {
                class: rng.random_range(0..cfg.classes),
                attribute: rng.random_range(0..cfg.attributes),
            })
            .collect();
        let relations = (0..k - 1)
            .map(|i| (i, rng.random_range(0..cfg.relations), i + 1))
            .collect();
        ToyScene {
            id,
            objects,
            relations,
        }
    }

    fn features(&self, cfg: &RunConfig, scene: &ToyScene, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = scene
            .objects
            .iter()
            .map(|o| {
                let c = &self.class_emb[o.class];
                let a = &self.attr_emb[o.attribute];
                c.iter().zip(a).map(|(x, y)| x + y).collect()
            })
            .collect();
        for &(s, r, o) in &scene.relations {
            for (v, e) in rows[s].iter_mut().zip(&self.subject_emb[r]) {
                *v += e;
            }
            for (v, e) in rows[o].iter_mut().zip(&self.object_emb[r]) {
                *v += e;
            }
        }
        let jitter = cfg.feature_noise / (cfg.feature_dim as f64).sqrt();
        for row in &mut rows {
            for v in row.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += jitter * n;
            }
        }
        rows
    }

    fn caption(&self, cfg: &RunConfig, scene: &ToyScene, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (triple, dets) = if cfg.caption_variation {
            let t = *scene.relations.choose(rng).expect("k >= 2");
            (t, [rng.random_range(0..2), rng.random_range(0..2)])
        } else {
            (scene.relations[0], [0, 1])
        };
        let (s, r, o) = triple;
        let mut words: Vec<&str> = Vec::with_capacity(7);
        for (slot, obj) in [s, o].into_iter().enumerate() {
            let object = scene.objects[obj];
            words.push(DETERMINERS[dets[slot]]);
            words.push(ATTRIBUTES[object.attribute]);
            words.push(CLASSES[object.class]);
            if slot == 0 {
                words.push(RELATIONS[r]);
            }
        }
        words.iter().map(|w| self.vocab.index_of(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Scenes and captions for `cfg`, deterministic in `cfg.data_seed`.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<ToyScene>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let world = World::new(cfg, &mut rng)?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut samples = Vec::with_capacity(cfg.scenes);
    for id in 0..cfg.scenes as u64 {
        // One stream per scene so a scene depends only on (seed, id).
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
        srng.set_stream(id + 1);
        let scene = world.scene(cfg, id, &mut srng);
        let features = world.features(cfg, &scene, &mut srng);
        let n = srng.random_range(cfg.min_captions..=cfg.max_captions);
        let captions = (0..n)
            .map(|_| world.caption(cfg, &scene, &mut srng))
            .collect();
        samples.push(Sample {
            id,
            features,
            captions,
        });
        scenes.push(scene);
    }
    let n_val = ((cfg.scenes as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let n_test = ((cfg.scenes as f64) * cfg.test_fraction).round().max(1.0) as usize;
    let n_train = cfg.scenes - n_val - n_test;
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok((
        Dataset {
            vocab: world.vocab,
            train: samples,
            val,
            test,
        },
        scenes,
    ))
}

fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// sha256 of a file, hex.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const SPLIT_FILES: [(Split, &str); 3] = [
    (Split::Train, "train.jsonl"),
    (Split::Val, "val.jsonl"),
    (Split::Test, "test.jsonl"),
];

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// The first `n` training scenes as every split, so that validation
    /// measures memorization.
    pub fn memorization_subset(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.train.len() {
            return Err(Error::Dataset(format!(
                "subset of {n} from {} training scenes",
                self.train.len()
            )));
        }
        let train = self.train[..n].to_vec();
        Ok(Dataset {
            vocab: self.vocab.clone(),
            val: train.clone(),
            test: train.clone(),
            train,
        })
    }

    /// Writes the three splits, the vocabulary and the retrieval index.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (split, name) in SPLIT_FILES {
            write_jsonl(&dir.join(name), self.split(split))?;
        }
        let mut w = BufWriter::new(File::create(dir.join("vocab.txt"))?);
        self.vocab.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("pool.tsv"))?);
        self.pool()?.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path, max_len: usize) -> Result<Self> {
        let vocab = Vocabulary::read(BufReader::new(File::open(dir.join("vocab.txt"))?), max_len)?;
        let mut splits = SPLIT_FILES
            .iter()
            .map(|(_, name)| read_jsonl(&dir.join(name)));
        let ds = Dataset {
            vocab,
            train: splits.next().expect("three splits")?,
            val: splits.next().expect("three splits")?,
            test: splits.next().expect("three splits")?,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let w = self.vocab.len();
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if s.features.is_empty() {
                return Err(Error::Dataset(format!("sample {} has no objects", s.id)));
            }
            if s.captions.is_empty() {
                return Err(Error::NoReferences(s.id));
            }
            if let Some(&bad) = s.captions.iter().flatten().find(|&&t| t >= w) {
                return Err(Error::WordIndex {
                    index: bad,
                    size: w,
                });
            }
        }
        Ok(())
    }

    /// sha256 of each split's serialized form.
    pub fn split_hashes(&self) -> Result<Vec<(Split, String)>> {
        SPLIT_FILES
            .iter()
            .map(|&(split, _)| {
                let mut h = Sha256::new();
                for s in self.split(split) {
                    h.update(serde_json::to_vec(s)?);
                    h.update(b"\n");
                }
                Ok((split, hex::encode(h.finalize())))
            })
            .collect()
    }

    /// Reference captions of one split.
    pub fn references(&self, split: Split) -> Result<RefCorpus<usize>> {
        RefCorpus::new(self.split(split).iter().map(|s| (s.id, s.captions.clone())))
    }

    /// Retrieval pool over the training captions.
    pub fn pool(&self) -> Result<SentencePool> {
        let tensors: Vec<Tensor<f64>> = self.train.iter().map(Sample::feature_tensor).collect();
        SentencePool::build(
            self.train
                .iter()
                .zip(&tensors)
                .map(|(s, t)| (s.id, t, s.captions.as_slice())),
        )
    }

    /// Retrieved sentence for every sample of `split`; training samples
    /// never retrieve their own captions.
    pub fn retrieved(&self, pool: &SentencePool, split: Split) -> Result<Vec<Vec<usize>>> {
        self.split(split)
            .iter()
            .map(|s| {
                let exclude = (split == Split::Train).then_some(s.id);
                Ok(pool.retrieve(&s.feature_tensor::<f64>(), exclude)?.to_vec())
            })
            .collect()
    }
}
