//! Binary artifact container and the typed codecs built on it.
//!
//! Layout: `b"ICML"`, format version (u32 LE), metadata length (u64 LE), a
//! UTF-8 JSON metadata document, then every declared tensor as raw f32 LE in
//! declaration order. Writing is deterministic: metadata maps are ordered
//! and nothing time-dependent is recorded.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cvae::{CvaeConfig, CvaeModel};
use crate::error::{Error, Result};
use crate::harvest::{CheckpointRecord, NormStats};
use crate::model::{AdapterLayout, BaseModel, BaseModelConfig, LoraAdapter};
use crate::task_vector::{ConditionSource, TaskVector};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ICML";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    BaseModel,
    Checkpoints,
    CvaeWeights,
    NormStats,
    Adapter,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::BaseModel => "base_model",
            Kind::Checkpoints => "checkpoints",
            Kind::CvaeWeights => "cvae_weights",
            Kind::NormStats => "norm_stats",
            Kind::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub kind: Kind,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific document (configs, layout, seeds, record indices).
    pub info: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Metadata,
    pub payloads: Vec<Vec<f32>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

/// Seeds as fixed-width hex so the metadata length does not depend on the value.
pub fn seed_hex(seed: u64) -> String {
    format!("{seed:#018x}")
}

pub fn parse_seed_hex(s: &str) -> Result<u64> {
    s.strip_prefix("0x")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| corrupt(format!("bad seed `{s}`")))
}

impl Container {
    pub fn new(kind: Kind, info: Value) -> Self {
        Self {
            meta: Metadata {
                kind,
                tensors: Vec::new(),
                info,
            },
            payloads: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let entry = TensorEntry {
            name: name.into(),
            shape: shape.to_vec(),
        };
        if entry.numel() != data.len() {
            return Err(corrupt(format!(
                "tensor `{}` declares {:?} but has {} values",
                entry.name,
                entry.shape,
                data.len()
            )));
        }
        self.meta.tensors.push(entry);
        self.payloads.push(data);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape(), t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.meta
            .tensors
            .iter()
            .zip(&self.payloads)
            .find(|(e, _)| e.name == name)
            .map(|(e, p)| (e.shape.as_slice(), p.as_slice()))
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.get(name)?;
        Tensor::new(shape, data.to_vec())
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(corrupt(format!(
                "expected a {} container, found {}",
                kind.as_str(),
                self.meta.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn info<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.info.clone())
            .map_err(|e| corrupt(format!("{} metadata: {e}", self.meta.kind.as_str())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata is always serializable");
        let floats: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(HEADER + meta.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for p in &self.payloads {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(corrupt("not an ICML container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|m| HEADER.checked_add(m))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("metadata length exceeds file size"))?;
        let doc: Value = serde_json::from_slice(&bytes[HEADER..meta_end])
            .map_err(|e| corrupt(format!("metadata is not valid JSON: {e}")))?;
        if let Some(kind) = doc.get("kind").and_then(Value::as_str) {
            let known = [
                Kind::BaseModel,
                Kind::Checkpoints,
                Kind::CvaeWeights,
                Kind::NormStats,
                Kind::Adapter,
            ];
            if !known.iter().any(|k| k.as_str() == kind) {
                return Err(corrupt(format!("unknown container kind `{kind}`")));
            }
        }
        let meta: Metadata =
            serde_json::from_value(doc).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let expected: usize = meta.tensors.iter().map(TensorEntry::numel).sum();
        let payload = &bytes[meta_end..];
        if payload.len() != 4 * expected {
            return Err(corrupt(format!(
                "payload is {} bytes, declared shapes need {}",
                payload.len(),
                4 * expected
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let payloads = meta
            .tensors
            .iter()
            .map(|e| floats.by_ref().take(e.numel()).collect())
            .collect();
        Ok(Self { meta, payloads })
    }

    /// Writes the file and returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

// ---- typed codecs ----

pub fn encode_base_model(model: &BaseModel) -> Result<Container> {
    let mut c = Container::new(Kind::BaseModel, json!({ "config": model.config }));
    for (name, t) in model.named_params() {
        c.push_tensor(name, t)?;
    }
    Ok(c)
}

pub fn decode_base_model(c: &Container) -> Result<BaseModel> {
    c.expect_kind(Kind::BaseModel)?;
    #[derive(Deserialize)]
    struct Info {
        config: BaseModelConfig,
    }
    let info: Info = c.info()?;
    let reference = BaseModel::init(info.config.clone())?;
    let params = reference
        .named_params()
        .into_iter()
        .map(|(name, _)| c.tensor(&name))
        .collect::<Result<Vec<_>>>()?;
    BaseModel::from_params(info.config, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    epoch: usize,
    train_accuracy: f64,
}

/// Everything harvested for one task: its saved checkpoint window and the
/// task vector extracted from the final adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCheckpoints {
    pub task_id: usize,
    pub layout: AdapterLayout,
    pub records: Vec<CheckpointRecord>,
    pub task_vector: TaskVector,
}

impl TaskCheckpoints {
    /// The adapter as it stood at the end of fine-tuning.
    pub fn final_values(&self) -> &[f32] {
        &self.records.last().expect("harvest keeps at least one record").values
    }
}

/// One task's checkpoints as a `[records, P]` matrix plus its task vector.
pub fn encode_checkpoints(t: &TaskCheckpoints) -> Result<Container> {
    let p = t.layout.param_count();
    if t.records.is_empty() {
        return Err(Error::Input(format!("task {} has no checkpoints", t.task_id)));
    }
    if let Some(r) = t.records.iter().find(|r| r.values.len() != p) {
        return Err(Error::Layout {
            expected: p,
            actual: r.values.len(),
        });
    }
    if let Some(r) = t.records.iter().find(|r| r.task_id != t.task_id) {
        return Err(Error::Input(format!(
            "record of task {} filed under task {}",
            r.task_id, t.task_id
        )));
    }
    let index: Vec<CheckpointIndex> = t
        .records
        .iter()
        .map(|r| CheckpointIndex {
            epoch: r.epoch,
            train_accuracy: r.train_accuracy,
        })
        .collect();
    let mut c = Container::new(
        Kind::Checkpoints,
        json!({
            "task_id": t.task_id,
            "layout": t.layout,
            "records": index,
            "task_vector_source": t.task_vector.source,
        }),
    );
    let flat = t.records.iter().flat_map(|r| r.values.iter().copied()).collect();
    c.push("values", &[t.records.len(), p], flat)?;
    c.push("task_vector", &[t.task_vector.dim()], t.task_vector.values.clone())?;
    Ok(c)
}

pub fn decode_checkpoints(c: &Container) -> Result<TaskCheckpoints> {
    c.expect_kind(Kind::Checkpoints)?;
    #[derive(Deserialize)]
    struct Info {
        task_id: usize,
        layout: AdapterLayout,
        records: Vec<CheckpointIndex>,
        task_vector_source: ConditionSource,
    }
    let info: Info = c.info()?;
    let (shape, data) = c.get("values")?;
    let p = info.layout.param_count();
    if shape != [info.records.len(), p] || info.records.is_empty() {
        return Err(Error::Layout {
            expected: p,
            actual: shape.get(1).copied().unwrap_or(0),
        });
    }
    let records = info
        .records
        .iter()
        .zip(data.chunks_exact(p))
        .map(|(i, v)| CheckpointRecord {
            task_id: info.task_id,
            epoch: i.epoch,
            values: v.to_vec(),
            train_accuracy: i.train_accuracy,
        })
        .collect();
    Ok(TaskCheckpoints {
        task_id: info.task_id,
        layout: info.layout,
        records,
        task_vector: TaskVector {
            task_id: info.task_id,
            source: info.task_vector_source,
            values: c.get("task_vector")?.1.to_vec(),
        },
    })
}

/// Architecture and training settings that do not depend on the vector length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorInfo {
    n_layers: usize,
    base_channels: usize,
    max_channels: usize,
    widen_every: usize,
    kernel: usize,
    latent_channels: usize,
    d_task: usize,
    kld_weight: f32,
    epochs: usize,
    lr: f32,
    batch: usize,
    logvar_clamp: f32,
    clip: f32,
    source: ConditionSource,
    seed: String,
    norm_stats: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormInfo {
    d_l: usize,
    layout: AdapterLayout,
    seed: String,
}

/// Generator weights plus its normalization sidecar. The weights container
/// carries nothing that depends on the adapter rank, so its size is the
/// same for every rank.
pub fn encode_generator(model: &CvaeModel, seed: u64, sidecar_name: &str) -> Result<(Container, Container)> {
    let cfg = &model.config;
    let info = GeneratorInfo {
        n_layers: cfg.n_layers,
        base_channels: cfg.base_channels,
        max_channels: cfg.max_channels,
        widen_every: cfg.widen_every,
        kernel: cfg.kernel,
        latent_channels: cfg.latent_channels,
        d_task: cfg.d_task,
        kld_weight: cfg.kld_weight,
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        logvar_clamp: cfg.logvar_clamp,
        clip: cfg.clip,
        source: model.source,
        seed: seed_hex(seed),
        norm_stats: sidecar_name.to_string(),
    };
    let mut weights = Container::new(
        Kind::CvaeWeights,
        serde_json::to_value(&info).expect("plain struct"),
    );
    for (name, t) in model.named_params() {
        weights.push_tensor(name, t)?;
    }
    let norm_info = NormInfo {
        d_l: cfg.d_l,
        layout: model.layout.clone(),
        seed: seed_hex(seed),
    };
    let mut norm = Container::new(
        Kind::NormStats,
        serde_json::to_value(&norm_info).expect("plain struct"),
    );
    norm.push("mean", &[cfg.d_l], model.norm.mean.clone())?;
    norm.push("std", &[cfg.d_l], model.norm.std.clone())?;
    Ok((weights, norm))
}

/// Name of the sidecar the weights container points at.
pub fn generator_sidecar(weights: &Container) -> Result<String> {
    weights.expect_kind(Kind::CvaeWeights)?;
    Ok(weights.info::<GeneratorInfo>()?.norm_stats)
}

pub fn decode_generator(weights: &Container, norm: &Container) -> Result<(CvaeModel, u64)> {
    weights.expect_kind(Kind::CvaeWeights)?;
    norm.expect_kind(Kind::NormStats)?;
    let g: GeneratorInfo = weights.info()?;
    let n: NormInfo = norm.info()?;
    let config = CvaeConfig {
        n_layers: g.n_layers,
        base_channels: g.base_channels,
        max_channels: g.max_channels,
        widen_every: g.widen_every,
        kernel: g.kernel,
        latent_channels: g.latent_channels,
        kld_weight: g.kld_weight,
        epochs: g.epochs,
        lr: g.lr,
        batch: g.batch,
        logvar_clamp: g.logvar_clamp,
        clip: g.clip,
        d_task: g.d_task,
        d_l: n.d_l,
    };
    config.validate()?;
    let stats = NormStats {
        mean: norm.get("mean")?.1.to_vec(),
        std: norm.get("std")?.1.to_vec(),
    };
    if stats.mean.len() != n.d_l || stats.std.len() != n.d_l {
        return Err(Error::Layout {
            expected: n.d_l,
            actual: stats.mean.len(),
        });
    }
    let params = CvaeModel::param_shapes(&config)
        .into_iter()
        .map(|(name, shape)| {
            let t = weights.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "cvae_weights",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = CvaeModel {
        config,
        params,
        norm: stats,
        layout: n.layout,
        source: g.source,
    };
    Ok((model, parse_seed_hex(&g.seed)?))
}

pub fn encode_adapter(
    values: &[f32],
    layout: &AdapterLayout,
    task_id: Option<usize>,
    source: Option<ConditionSource>,
    seed: u64,
) -> Result<Container> {
    if values.len() != layout.param_count() {
        return Err(Error::Layout {
            expected: layout.param_count(),
            actual: values.len(),
        });
    }
    let mut c = Container::new(
        Kind::Adapter,
        json!({ "layout": layout, "task_id": task_id, "source": source, "seed": seed_hex(seed) }),
    );
    c.push("values", &[values.len()], values.to_vec())?;
    Ok(c)
}

pub fn decode_adapter(c: &Container) -> Result<LoraAdapter> {
    c.expect_kind(Kind::Adapter)?;
    #[derive(Deserialize)]
    struct Info {
        layout: AdapterLayout,
    }
    let info: Info = c.info()?;
    LoraAdapter::unflatten(c.get("values")?.1, &info.layout)
}
