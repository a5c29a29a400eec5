//! Checkpoint files.
//!
//! ```text
//! b"TGCK"                 magic
//! u32                     format version (1)
//! u64                     header length in bytes
//! [u8; header length]     UTF-8 JSON header (CheckpointHeader)
//! [f64; Σ sizes]          parameter values, in header order
//! [f64; Σ sizes] × 2      Adam first and second moments (if present)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{read_container, read_f64s, write_container, write_f64s};

use super::config::ExperimentConfig;
use super::model::{DataDims, Model};
use super::train::{EpochLog, TrainOutcome};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub lr: f64,
    pub eps: f64,
    pub betas: (f64, f64),
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub dims: DataDims,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerState>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub dims: DataDims,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
    pub history: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        let mut ck = Self::from_model(&outcome.model);
        ck.optimizer = Some(outcome.optimizer.clone());
        ck.history = outcome.history.clone();
        ck
    }

    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            dims: model.dims,
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor")))
                .collect(),
            optimizer: None,
            history: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |a| a.t)
    }

    /// Rebuilds the model and copies every stored tensor into it by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, self.dims)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            let dst = model.params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            dims: self.dims,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerState {
                lr: a.lr,
                eps: a.eps,
                betas: a.betas,
                step: a.t,
            }),
            history: self.history.clone(),
        };
        let bytes = serde_json::to_vec(&header)?;
        write_container(w, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION, &bytes)?;
        for (_, t) in &self.params {
            write_f64s(w, t.data())?;
        }
        if let Some(a) = &self.optimizer {
            for m in &a.m {
                write_f64s(w, m)?;
            }
            for v in &a.v {
                write_f64s(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
        let bytes = read_container(r, path, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let h: CheckpointHeader = serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("header: {e}")))?;
        if h.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version { found: h.format_version, expected: CHECKPOINT_FORMAT_VERSION });
        }
        let mut params = Vec::with_capacity(h.tensors.len());
        for e in &h.tensors {
            let n: usize = e.shape.iter().product();
            let data = read_f64s(r, path, n)?;
            params.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        let optimizer = match &h.optimizer {
            None => None,
            Some(s) => {
                let mut read_all = || -> Result<Vec<Vec<f64>>> {
                    h.tensors.iter().map(|e| read_f64s(r, path, e.shape.iter().product())).collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(Adam { lr: s.lr, eps: s.eps, betas: s.betas, t: s.step, m, v })
            }
        };
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self { config: h.config, dims: h.dims, params, optimizer, history: h.history })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ck.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    Checkpoint::read_from(&mut r, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainMode;
    use crate::synthdata::ActivitySpec;

    fn small_checkpoint() -> Checkpoint {
        let mut config = ExperimentConfig::default();
        config.mode = TrainMode::Standalone;
        config.selector.concepts = 8;
        let model = Model::new(&config, DataDims::of(&ActivitySpec::default())).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        let mut adam = Adam::new(&model.params, 1e-3, 1e-4);
        adam.t = 3;
        adam.m[0][0] = 0.25;
        adam.v[1][0] = 1e-300;
        ck.optimizer = Some(adam);
        ck.history.push(EpochLog { phase: "joint".into(), epoch: 0, loss: 0.1 + 0.2, accuracy: 0.5, mean_ratio: None });
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = small_checkpoint();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut a.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.to_bytes().unwrap(), a);
        let model = back.to_model().unwrap();
        assert_eq!(Checkpoint::from_model(&model).params, ck.params);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = small_checkpoint().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let r = Checkpoint::read_from(&mut &bytes[..cut], Path::new("mem"));
            assert!(matches!(r, Err(Error::Corrupt { .. })), "cut at {cut}");
        }
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&(CHECKPOINT_FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::read_from(&mut bumped.as_slice(), Path::new("mem")),
            Err(Error::Version { .. })
        ));
    }
}
