//! Binary checkpoint container.
//!
//! Layout: `b"CYLP"`, format version (u32 LE), manifest length (u32 LE),
//! a JSON manifest, then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use cylpose::backbone::{init_params, BackboneConfig};
use cylpose::diffcore::{Adam, ParamSet, Tensor};
use cylpose::semitrain::{EpochLog, FrozenSnapshot, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"CYLP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after tensor data")]
    Trailing(usize),
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
    #[error("checkpoint does not match the backbone: {0}")]
    Structure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub backbone: BackboneConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub snapshot_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub data: Vec<Vec<f32>>,
}

fn records(params: &ParamSet<f32>, group: TensorGroup) -> impl Iterator<Item = (TensorRecord, Vec<f32>)> + '_ {
    params.entries().iter().map(move |e| {
        (
            TensorRecord {
                name: e.name.clone(),
                group,
                shape: e.value.shape().to_vec(),
                dtype: "f32".into(),
                trainable: e.trainable,
            },
            e.value.data().to_vec(),
        )
    })
}

impl Checkpoint {
    /// Parameters only, for inference.
    pub fn from_params(backbone: &BackboneConfig, params: &ParamSet<f32>, seed: u64) -> Self {
        let (tensors, data) = records(params, TensorGroup::Param).unzip();
        Self {
            manifest: CheckpointManifest {
                backbone: backbone.clone(),
                train: None,
                seed,
                epoch: 0,
                step: 0,
                adam_step: 0,
                snapshot_epoch: None,
                log: Vec::new(),
                tensors,
            },
            data,
        }
    }

    /// Full training state: parameters, Adam moments and the frozen snapshot.
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut pairs: Vec<(TensorRecord, Vec<f32>)> = records(&t.params, TensorGroup::Param).collect();
        for (group, moments) in [(TensorGroup::AdamM, &t.adam.m), (TensorGroup::AdamV, &t.adam.v)] {
            for (e, m) in t.params.entries().iter().zip(moments) {
                pairs.push((
                    TensorRecord {
                        name: e.name.clone(),
                        group,
                        shape: m.shape().to_vec(),
                        dtype: "f32".into(),
                        trainable: e.trainable,
                    },
                    m.data().to_vec(),
                ));
            }
        }
        if let Some(s) = &t.snapshot {
            pairs.extend(records(s.params(), TensorGroup::Snapshot));
        }
        let (tensors, data) = pairs.into_iter().unzip();
        Self {
            manifest: CheckpointManifest {
                backbone: t.backbone.clone(),
                train: Some(t.cfg.clone()),
                seed: t.cfg.seed,
                epoch: t.epoch,
                step: t.step,
                adam_step: t.adam.step,
                snapshot_epoch: t.snapshot.as_ref().map(|s| s.epoch()),
                log: t.log.clone(),
                tensors,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.data.iter().map(|d| d.len() * 4).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for d in &self.data {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated { need: n, have: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(HEADER_LEN)?;
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let mlen = word(8) as usize;
        need(HEADER_LEN + mlen)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + mlen])?;
        let mut pos = HEADER_LEN + mlen;
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for rec in &manifest.tensors {
            if rec.dtype != "f32" {
                return Err(CheckpointError::Tensor { name: rec.name.clone(), detail: format!("unsupported dtype {}", rec.dtype) });
            }
            let n: usize = rec.shape.iter().product();
            need(pos + 4 * n)?;
            data.push(bytes[pos..pos + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - pos));
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("cylp.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn group(&self, group: TensorGroup) -> impl Iterator<Item = (&TensorRecord, &Vec<f32>)> {
        self.manifest.tensors.iter().zip(&self.data).filter(move |(r, _)| r.group == group)
    }

    /// Rebuilds a parameter group, checked against the backbone's own layout.
    fn param_group(&self, group: TensorGroup) -> Result<ParamSet<f32>, CheckpointError> {
        let mut p = init_params::<f32>(&self.manifest.backbone, 0).map_err(|e| CheckpointError::Structure(e.to_string()))?;
        let mut loaded = ParamSet::new();
        for (rec, d) in self.group(group) {
            let t = Tensor::from_vec(&rec.shape, d.clone())
                .map_err(|e| CheckpointError::Tensor { name: rec.name.clone(), detail: e.to_string() })?;
            loaded
                .add(rec.name.clone(), t, rec.trainable)
                .map_err(|e| CheckpointError::Tensor { name: rec.name.clone(), detail: e.to_string() })?;
        }
        p.load_values(&loaded).map_err(|e| CheckpointError::Structure(e.to_string()))?;
        Ok(p)
    }

    pub fn params(&self) -> Result<ParamSet<f32>, CheckpointError> {
        self.param_group(TensorGroup::Param)
    }

    /// Restores a trainer that continues exactly where the saved one stopped.
    pub fn trainer(&self) -> Result<Trainer, CheckpointError> {
        let m = &self.manifest;
        let cfg = m.train.clone().ok_or_else(|| CheckpointError::Structure("no training state stored".into()))?;
        let params = self.param_group(TensorGroup::Param)?;
        let moments = |g: TensorGroup| -> Result<Vec<Tensor<f32>>, CheckpointError> {
            let v: Vec<Tensor<f32>> = self
                .group(g)
                .map(|(r, d)| {
                    Tensor::from_vec(&r.shape, d.clone()).map_err(|e| CheckpointError::Tensor { name: r.name.clone(), detail: e.to_string() })
                })
                .collect::<Result<_, _>>()?;
            if v.len() != params.len() || v.iter().zip(params.entries()).any(|(t, e)| t.shape() != e.value.shape()) {
                return Err(CheckpointError::Structure(format!("{g:?} moments do not match the parameters")));
            }
            Ok(v)
        };
        let adam = Adam { config: cfg.adam, step: m.adam_step, m: moments(TensorGroup::AdamM)?, v: moments(TensorGroup::AdamV)? };
        let snapshot = match m.snapshot_epoch {
            Some(e) => Some(FrozenSnapshot::new(&self.param_group(TensorGroup::Snapshot)?, e)),
            None => None,
        };
        Ok(Trainer {
            backbone: m.backbone.clone(),
            cfg,
            params,
            adam,
            epoch: m.epoch,
            step: m.step,
            snapshot,
            log: m.log.clone(),
        })
    }
}
