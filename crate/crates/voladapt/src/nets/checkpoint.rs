//! Single-file checkpoint archive: a JSON header describing the architecture,
//! class list, preprocessing constants, strategy tag, and entry table,
//! followed by the named parameter arrays as little-endian f64. Batch-norm
//! running statistics, optimizer moments, and RNG state ride along so
//! training can resume bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::backbone::{Arch, Backbone};
use super::heads::{SegHead, SpatialAdapter};
use super::model::{HeadKind, SegModel, TrainStrategy};

const MAGIC: &[u8; 4] = b"VADK";
const VERSION: u32 = 1;

/// Preprocessing constants baked into a checkpoint so inference can reproduce
/// the training-time pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessInfo {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub target_spacing: f64,
    pub orientation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryInfo {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: Arch,
    classes: Vec<String>,
    preprocess: PreprocessInfo,
    strategy: String,
    target_class: Option<usize>,
    epoch: usize,
    config_hash: String,
    rng_state: Option<[u64; 4]>,
    entries: Vec<EntryInfo>,
    #[serde(default)]
    loss_curve: Vec<f64>,
}

/// Everything a checkpoint carries besides the model itself.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub classes: Vec<String>,
    pub preprocess: Option<PreprocessInfo>,
    pub epoch: usize,
    pub config_hash: String,
    pub rng_state: Option<[u64; 4]>,
    /// Optimizer first/second moments keyed by parameter name.
    pub opt_moments: BTreeMap<String, (Tensor, Tensor)>,
    /// Per-epoch training losses.
    pub loss_curve: Vec<f64>,
}

fn default_preprocess() -> PreprocessInfo {
    PreprocessInfo { clip_lo: 0.0, clip_hi: 1.0, target_spacing: 1.5, orientation: "RAS".into() }
}

/// Serialize a model (plus metadata) to a checkpoint file.
pub fn save_checkpoint(path: &Path, model: &SegModel, meta: &CheckpointMeta) -> Result<()> {
    let mut named = Vec::new();
    model.named_params(&mut named);
    let mut entries = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let push = |name: String, values: &[f64], shape: Vec<usize>, entries: &mut Vec<EntryInfo>, data: &mut Vec<f64>| {
        entries.push(EntryInfo { name, shape, offset: data.len() });
        data.extend_from_slice(values);
    };
    for (name, t) in &named {
        push(name.clone(), t.data(), t.shape().to_vec(), &mut entries, &mut data);
    }
    for (key, mean, var) in model.bn_state() {
        push(format!("{key}.running_mean"), &mean, vec![mean.len()], &mut entries, &mut data);
        push(format!("{key}.running_var"), &var, vec![var.len()], &mut entries, &mut data);
    }
    for (name, (m, v)) in &meta.opt_moments {
        push(format!("opt.m.{name}"), m.data(), m.shape().to_vec(), &mut entries, &mut data);
        push(format!("opt.v.{name}"), v.data(), v.shape().to_vec(), &mut entries, &mut data);
    }
    let header = Header {
        version: VERSION,
        arch: model.arch(),
        classes: meta.classes.clone(),
        preprocess: meta.preprocess.clone().unwrap_or_else(default_preprocess),
        strategy: model.strategy.tag().to_string(),
        target_class: model.target_class,
        epoch: meta.epoch,
        config_hash: meta.config_hash.clone(),
        rng_state: meta.rng_state,
        entries,
        loss_curve: meta.loss_curve.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model by strategy and architecture.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("checkpoint {} not found", path.display()))
        }
        _ => Error::Io(e),
    })?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint archive", path.display())));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
    let data_bytes = &bytes[16 + hlen..];
    if data_bytes.len() % 8 != 0 {
        return Err(Error::Format("checkpoint data section misaligned".into()));
    }
    let data: Vec<f64> = data_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let strategy = TrainStrategy::parse(&header.strategy)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        if e.offset + n > data.len() {
            return Err(Error::Format(format!("checkpoint entry {} out of bounds", e.name)));
        }
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data[e.offset..e.offset + n].to_vec())?);
    }

    // Rebuild the model skeleton, then overwrite parameters by name.
    let backbone = Backbone::init(header.arch, 0);
    let head = SegHead::init(header.arch, 0);
    let mut model = match strategy {
        TrainStrategy::LinearProbe | TrainStrategy::Adapter | TrainStrategy::AdapterTi => {
            SegModel::assemble(backbone, head, strategy, header.target_class.unwrap_or(0), 0)?
        }
        _ => {
            let mut m = SegModel {
                backbone,
                head: HeadKind::Original(head),
                strategy,
                target_class: header.target_class,
            };
            if strategy.uses_adapter() {
                m.head = HeadKind::Adapter(SpatialAdapter::init(header.arch, 0));
            }
            m
        }
    };
    {
        let mut named = Vec::new();
        model.named_params_mut(&mut named);
        for (name, t) in named {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
    }
    // batch-norm running stats
    let mut bn_state = Vec::new();
    for (key, mean, _) in model.bn_state() {
        let m = tensors
            .get(&format!("{key}.running_mean"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing {key}.running_mean")))?;
        let v = tensors
            .get(&format!("{key}.running_var"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing {key}.running_var")))?;
        if m.numel() != mean.len() {
            return Err(Error::Format(format!("batch-norm stat length mismatch for {key}")));
        }
        bn_state.push((key, m.data().to_vec(), v.data().to_vec()));
    }
    let backbone_state: Vec<_> =
        bn_state.iter().filter(|(k, _, _)| k.starts_with("backbone.")).cloned().collect();
    model.backbone.set_bn_state(&backbone_state)?;
    if let HeadKind::Adapter(a) = &mut model.head {
        let adapter_state: Vec<_> =
            bn_state.iter().filter(|(k, _, _)| k.starts_with("adapter.")).cloned().collect();
        a.set_bn_state(&adapter_state)?;
    }

    let mut opt_moments = BTreeMap::new();
    for e in &header.entries {
        if let Some(pname) = e.name.strip_prefix("opt.m.") {
            let m = tensors[&e.name].clone();
            let v = tensors
                .get(&format!("opt.v.{pname}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing opt.v.{pname}")))?
                .clone();
            opt_moments.insert(pname.to_string(), (m, v));
        }
    }
    let meta = CheckpointMeta {
        classes: header.classes,
        preprocess: Some(header.preprocess),
        epoch: header.epoch,
        config_hash: header.config_hash,
        rng_state: header.rng_state,
        opt_moments,
        loss_curve: header.loss_curve,
    };
    Ok((model, meta))
}
