//! Model checkpoints: architecture and run state in the header, parameters
//! and optimizer moments as entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use capdiff_autodiff::{AdamState, Checkpoint, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::captioner::StageConfig;
use crate::cascade::{Cascade, CascadeConfig};
use crate::gscst::{Saturation, Teacher};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Teacher { config: StageConfig },
    Cascade { config: CascadeConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub rng: RngState,
    pub optimizer_steps: u64,
    pub best_cider: Option<f64>,
    pub best_step: u64,
    pub rows: Vec<MetricRow>,
    pub saturation: Option<Saturation>,
    pub guides: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub architecture: Architecture,
    pub run: RunConfig,
    pub state: Option<TrainState>,
}

#[derive(Clone, Debug)]
pub enum Model {
    Teacher(Teacher),
    Cascade(Cascade),
}

impl Model {
    /// Fresh model and parameters drawn from `rng`.
    pub fn build(arch: &Architecture, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<f32>)> {
        let mut params = ParamStore::new();
        let model = match arch {
            Architecture::Teacher { config } => {
                Model::Teacher(Teacher::new(&mut params, config.clone(), rng)?)
            }
            Architecture::Cascade { config } => {
                Model::Cascade(Cascade::new(&mut params, config.clone(), rng)?)
            }
        };
        Ok((model, params))
    }

    pub fn cascade(&self) -> Result<&Cascade> {
        match self {
            Model::Cascade(c) => Ok(c),
            Model::Teacher(_) => Err(Error::Checkpoint(
                "expected a diffusion model, found a teacher".into(),
            )),
        }
    }

    pub fn teacher(&self) -> Result<&Teacher> {
        match self {
            Model::Teacher(t) => Ok(t),
            Model::Cascade(_) => Err(Error::Checkpoint(
                "expected a teacher, found a diffusion model".into(),
            )),
        }
    }
}

pub struct Loaded {
    pub header: Header,
    pub model: Model,
    pub params: ParamStore<f32>,
    /// Optimizer moment entries, empty for model-only checkpoints.
    pub optimizer: Vec<(String, Tensor<f32>)>,
}

pub fn save(
    path: &Path,
    header: &Header,
    params: &ParamStore<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<()> {
    let mut ck = Checkpoint::from_params(serde_json::to_string(header)?, params);
    if let Some(a) = adam {
        ck.entries.extend(a.export());
    }
    // Write then rename, so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    ck.write_to(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let ck = Checkpoint::<f32>::read_from(BufReader::new(file))?;
    let header: Header = serde_json::from_str(&ck.header)?;
    // Initial values are overwritten by the checkpoint.
    let (model, mut params) =
        Model::build(&header.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (optimizer, weights): (Vec<_>, Vec<_>) = ck
        .entries
        .into_iter()
        .partition(|(n, _)| n.starts_with("adam."));
    params.load(&weights)?;
    Ok(Loaded {
        header,
        model,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        a.set_stream(3);
        for _ in 0..17 {
            a.random::<u32>();
        }
        let mut b = RngState::capture(&a).restore().unwrap();
        for _ in 0..50 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let run = RunConfig::default();
        let arch = Architecture::Cascade {
            config: run.cascade_config(20),
        };
        let (_, params) = Model::build(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let header = Header {
            architecture: arch,
            run,
            state: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &header, &params, None).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.header, header);
        for ((na, a), (nb, b)) in params.export().iter().zip(back.params.export().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn missing_file_is_a_checkpoint_error() {
        assert!(matches!(
            load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Checkpoint(_))
        ));
    }
}
