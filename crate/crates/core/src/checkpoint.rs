//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `EQDFCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! raw little-endian `f32` data of every tensor listed in the header, in
//! header order. Optimizer moments, when present, are stored as tensors
//! named `adam.m.<param>` and `adam.v.<param>`.

use std::io::{Read, Write};
use std::path::Path;

use eqdiff_tensor::{AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::baselines::{BcModel, ExplicitDiffusionModel};
use crate::config::{DiffusionConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::network::PolicyNetwork;
use crate::schedule::NoiseSchedule;
use crate::train::{EpochRecord, Trainable, Trainer};

const MAGIC: &[u8; 8] = b"EQDFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Policy,
    Explicit,
    Bc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScheduleEcho {
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    alpha_bar_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Optimizer and bookkeeping needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub seed: u64,
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub adam_step: u64,
    pub log: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_kind: ModelKind,
    config: DiffusionConfig,
    schedule: ScheduleEcho,
    tensors: Vec<TensorEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    train: Option<TrainSnapshot>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: DiffusionConfig,
    pub params: ParamStore,
    pub train: Option<(TrainSnapshot, AdamState)>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sched = NoiseSchedule::from_config(&self.config)?;
        let mut tensors: Vec<(String, &[usize], &[f32])> = self
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape(), t.data()))
            .collect();
        let snapshot = self.train.as_ref().map(|(snap, adam)| {
            for (i, (_, n, t)) in self.params.iter().enumerate() {
                tensors.push((format!("adam.m.{n}"), t.shape(), &adam.m[i]));
                tensors.push((format!("adam.v.{n}"), t.shape(), &adam.v[i]));
            }
            TrainSnapshot {
                adam_step: adam.step,
                ..snap.clone()
            }
        });
        let header = Header {
            format_version: FORMAT_VERSION,
            model_kind: self.kind,
            config: self.config.clone(),
            schedule: ScheduleEcho {
                kind: self.config.schedule_kind,
                steps: sched.steps(),
                beta_start: self.config.beta_start,
                beta_end: self.config.beta_end,
                alpha_bar_final: *sched.alpha_bars().last().unwrap(),
            },
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.to_vec(),
                })
                .collect(),
            train: snapshot,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format_err(e.to_string()))?;
        header.config.validate()?;
        if header.schedule.steps != header.config.steps
            || header.schedule.beta_start != header.config.beta_start
            || header.schedule.beta_end != header.config.beta_end
        {
            return Err(format_err("schedule does not match the configuration"));
        }
        let mut cursor = &bytes[20 + hlen..];
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Vec<f32>)> = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            cursor
                .read_exact(&mut raw)
                .map_err(|_| format_err(format!("truncated data for {}", entry.name)))?;
            let data: Vec<f32> = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if entry.name.starts_with("adam.") {
                moments.push((entry.name.clone(), data));
            } else {
                params.add(entry.name.clone(), Tensor::new(&entry.shape, data)?);
            }
        }
        if !cursor.is_empty() {
            return Err(format_err("trailing bytes after tensor data"));
        }
        let train = match header.train {
            None => None,
            Some(snap) => {
                let mut adam = AdamState {
                    step: snap.adam_step,
                    m: Vec::new(),
                    v: Vec::new(),
                };
                for (_, name, _) in params.iter() {
                    let find = |prefix: &str| {
                        moments
                            .iter()
                            .find(|(n, _)| *n == format!("{prefix}{name}"))
                            .map(|(_, d)| d.clone())
                            .ok_or_else(|| format_err(format!("missing optimizer moment for {name}")))
                    };
                    adam.m.push(find("adam.m.")?);
                    adam.v.push(find("adam.v.")?);
                }
                Some((snap, adam))
            }
        };
        Ok(Self {
            kind: header.model_kind,
            config: header.config,
            params,
            train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Weights only.
    pub fn of_model<M: Trainable>(kind: ModelKind, config: &DiffusionConfig, model: &M) -> Self {
        Self {
            kind,
            config: config.clone(),
            params: model.params().clone(),
            train: None,
        }
    }

    /// Current weights plus optimizer state, for resuming.
    pub fn of_trainer<M: Trainable>(kind: ModelKind, config: &DiffusionConfig, trainer: &Trainer<M>) -> Self {
        let s = &trainer.state;
        Self {
            kind,
            config: config.clone(),
            params: trainer.model.params().clone(),
            train: Some((
                TrainSnapshot {
                    seed: s.seed,
                    epoch: s.epoch,
                    best_val: s.best_val.is_finite().then_some(s.best_val),
                    best_epoch: s.best_epoch,
                    adam_step: s.adam.state.step,
                    log: s.log.clone(),
                },
                s.adam.state.clone(),
            )),
        }
    }
}

/// Copies weights by name into a freshly built model of the same shape.
pub fn load_params(into: &mut ParamStore, from: &ParamStore) -> Result<()> {
    if into.len() != from.len() {
        return Err(format_err(format!(
            "checkpoint has {} tensors but the model has {}",
            from.len(),
            into.len()
        )));
    }
    let ids: Vec<_> = into.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let src = from
            .find(&name)
            .map(|i| from.get(i))
            .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
        let dst = into.get_mut(id);
        if dst.shape() != src.shape() {
            return Err(format_err(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}

/// Any of the trainable models, rebuilt from a checkpoint.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Policy(PolicyNetwork),
    Explicit(ExplicitDiffusionModel),
    Bc(BcModel),
}

impl AnyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = match ckpt.kind {
            ModelKind::Policy => Self::Policy(PolicyNetwork::new(&ckpt.config, 0)?),
            ModelKind::Explicit => Self::Explicit(ExplicitDiffusionModel::new(&ckpt.config, 0)?),
            ModelKind::Bc => Self::Bc(BcModel::new(&ckpt.config, 0)?),
        };
        load_params(m.params_mut(), &ckpt.params)?;
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Policy(_) => ModelKind::Policy,
            Self::Explicit(_) => ModelKind::Explicit,
            Self::Bc(_) => ModelKind::Bc,
        }
    }

    pub fn config(&self) -> &DiffusionConfig {
        match self {
            Self::Policy(m) => m.config(),
            Self::Explicit(m) => m.config(),
            Self::Bc(m) => m.config(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Policy(m) => m.params_mut(),
            Self::Explicit(m) => Trainable::params_mut(m),
            Self::Bc(m) => Trainable::params_mut(m),
        }
    }
}

/// Rebuilds a trainer from a checkpoint that carries optimizer state.
/// `best` restores the best-validation weights saved alongside it.
pub fn resume_trainer<M: Trainable>(mut model: M, ckpt: &Checkpoint, best: Option<&Checkpoint>) -> Result<Trainer<M>> {
    let (snap, adam) = ckpt
        .train
        .as_ref()
        .ok_or_else(|| format_err("checkpoint has no optimizer state"))?;
    load_params(model.params_mut(), &ckpt.params)?;
    let mut trainer = Trainer::new(model, ckpt.config.optimizer.clone(), snap.seed);
    let s = &mut trainer.state;
    s.epoch = snap.epoch;
    s.adam.state = adam.clone();
    s.best_val = snap.best_val.unwrap_or(f64::INFINITY);
    s.best_epoch = snap.best_epoch;
    s.log = snap.log.clone();
    if let Some(b) = best {
        let mut store = trainer.model.params().clone();
        load_params(&mut store, &b.params)?;
        trainer.best = Some(store);
    }
    Ok(trainer)
}
