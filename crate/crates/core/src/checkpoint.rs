//! Named-tensor checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (format version, metadata, tensor table), then every tensor's `f64` values
//! in little-endian row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::codec::{CodebookStack, CodecConfig};
use crate::error::{Error, Result};
use crate::fusion::{Adapters, FusionConfig};
use crate::lm::{BaseModel, LmConfig};
use crate::lora::LoraConfig;
use crate::optim::AdamState;
use crate::trainer::{RngState, TrainState};

pub const MAGIC: &[u8; 8] = b"STEMEDT\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Frozen,
    Trainable,
    State,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub group: TensorGroup,
    pub data: Mat,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    group: TensorGroup,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, Value>,
    tensors: Vec<TableEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, group: TensorGroup, data: Mat) {
        self.tensors.push(Tensor { name: name.into(), group, data });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta.insert(key.to_string(), serde_json::to_value(value).expect("metadata serializes"));
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::format(path, format!("missing metadata {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(path, format!("metadata {key:?}: {e}")))
    }

    /// SHA-256 over names, shapes and values of one group, in file order.
    pub fn group_hash(&self, group: TensorGroup) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.data.nrows() as u64).to_le_bytes());
            h.update((t.data.ncols() as u64).to_le_bytes());
            for v in t.data.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TableEntry { name: t.name.clone(), group: t.group, shape: [t.data.nrows(), t.data.ncols()], offset };
                offset += t.data.len() as u64 * 8;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { version: FORMAT_VERSION, meta: self.meta.clone(), tensors })
            .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported format version {}", header.version)));
        }
        let data = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape[0].checked_mul(e.shape[1]).ok_or_else(|| bad("tensor too large"))?;
            let start = e.offset as usize;
            let end = n.checked_mul(8).and_then(|b| b.checked_add(start)).filter(|&x| x <= data.len());
            let end = end.ok_or_else(|| Error::format(path, format!("tensor {} out of bounds", e.name)))?;
            let values = data[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            let mat = Mat::from_shape_vec((e.shape[0], e.shape[1]), values.collect()).expect("length checked");
            tensors.push(Tensor { name: e.name, group: e.group, data: mat });
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fills every leaf of a parameter tree from tensors named `prefix.leaf`.
    fn fill(&self, path: &Path, visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Mat))) -> Result<()> {
        let mut err = None;
        visit_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                Some(t) if t.data.dim() == m.dim() => m.assign(&t.data),
                Some(t) => err = Some(format!("tensor {name} has shape {:?}, expected {:?}", t.data.dim(), m.dim())),
                None => err = Some(format!("missing tensor {name}")),
            }
        });
        err.map_or(Ok(()), |e| Err(Error::format(path, e)))
    }
}

fn base_container(codec: &CodebookStack, model: &BaseModel) -> Container {
    let mut c = Container::default();
    c.set_meta("kind", "base");
    c.set_meta("codec", codec.config());
    c.set_meta("model", &model.config);
    c.set_meta("frozen", model.is_frozen());
    c.push("codec.projection", TensorGroup::Frozen, codec.projection().clone());
    for (i, b) in codec.codebooks().iter().enumerate() {
        c.push(format!("codec.codebooks.{i}"), TensorGroup::Frozen, b.clone());
    }
    model.weights.visit("base", &mut |n, m| c.push(n, TensorGroup::Frozen, m.clone()));
    c
}

/// Hash identifying a codec and base model pair; recorded in adapter files.
pub fn base_hash(codec: &CodebookStack, model: &BaseModel) -> String {
    base_container(codec, model).group_hash(TensorGroup::Frozen)
}

pub fn save_base(path: &Path, codec: &CodebookStack, model: &BaseModel) -> Result<()> {
    base_container(codec, model).write(path)
}

pub fn load_base(path: &Path) -> Result<(CodebookStack, BaseModel)> {
    let c = Container::read(path)?;
    if c.meta::<String>("kind", path)? != "base" {
        return Err(Error::format(path, "not a base checkpoint"));
    }
    let codec_cfg: CodecConfig = c.meta("codec", path)?;
    let model_cfg: LmConfig = c.meta("model", path)?;
    let frozen: bool = c.meta("frozen", path)?;
    let tensor = |name: &str| {
        c.get(name).map(|t| t.data.clone()).ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
    };
    let books = (0..codec_cfg.n_codebooks).map(|i| tensor(&format!("codec.codebooks.{i}"))).collect::<Result<_>>()?;
    let codec = CodebookStack::from_parts(codec_cfg, tensor("codec.projection")?, books)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut weights = BaseModel::init(&model_cfg, 0).map_err(|e| Error::format(path, e.to_string()))?.weights;
    c.fill(path, |f| weights.visit_mut("base", f))?;
    let model = BaseModel::from_weights(model_cfg, weights, frozen)?;
    Ok((codec, model))
}

/// Adapter weights with the optimizer and sampling state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub adapters: Adapters,
    pub state: TrainState,
    pub base_hash: String,
    /// Free-form run metadata (configuration, provenance of the data).
    pub extra: BTreeMap<String, Value>,
}

pub fn save_adapters(path: &Path, ckpt: &AdapterCheckpoint, base: &LmConfig) -> Result<()> {
    let mut c = Container { meta: ckpt.extra.clone(), tensors: Vec::new() };
    let a = &ckpt.adapters;
    c.set_meta("kind", "adapters");
    c.set_meta("model", base);
    c.set_meta("fusion", &a.fusion_config);
    c.set_meta("lora", &a.lora_config);
    c.set_meta("text_fusion", a.text_fusion);
    c.set_meta("base_hash", &ckpt.base_hash);
    c.set_meta("step", ckpt.state.step);
    c.set_meta("optimizer_step", ckpt.state.optimizer.step);
    c.set_meta("rng", RngState::capture(&ckpt.state.rng));
    c.set_meta("running_loss", ckpt.state.running_loss);
    a.weights.visit("", &mut |n, m| c.push(n, TensorGroup::Trainable, m.clone()));
    let mut names = Vec::new();
    a.weights.visit("", &mut |n, _| names.push(n.to_string()));
    for (i, n) in names.iter().enumerate() {
        c.push(format!("optim.m.{n}"), TensorGroup::State, ckpt.state.optimizer.m[i].clone());
        c.push(format!("optim.v.{n}"), TensorGroup::State, ckpt.state.optimizer.v[i].clone());
    }
    c.write(path)
}

/// Loads adapters trained against `base`; a different base is rejected.
pub fn load_adapters(path: &Path, codec: &CodebookStack, base: &BaseModel) -> Result<AdapterCheckpoint> {
    let c = Container::read(path)?;
    if c.meta::<String>("kind", path)? != "adapters" {
        return Err(Error::format(path, "not an adapter checkpoint"));
    }
    let expected = base_hash(codec, base);
    let recorded: String = c.meta("base_hash", path)?;
    if recorded != expected {
        return Err(Error::config(format!(
            "adapters in {} were trained against a different base model",
            path.display()
        )));
    }
    let model: LmConfig = c.meta("model", path)?;
    if model != base.config {
        return Err(Error::config("adapter model configuration does not match the base"));
    }
    let fusion: FusionConfig = c.meta("fusion", path)?;
    let lora: LoraConfig = c.meta("lora", path)?;
    let text_fusion: bool = c.meta("text_fusion", path)?;
    let mut adapters = Adapters::init(&base.config, &fusion, &lora, text_fusion, 0)?;
    c.fill(path, |f| adapters.weights.visit_mut("", f))?;
    let mut optimizer = AdamState::zeros({
        let mut ps = Vec::new();
        adapters.weights.visit("", &mut |_, m| ps.push(m));
        ps
    });
    optimizer.step = c.meta("optimizer_step", path)?;
    let mut names = Vec::new();
    adapters.weights.visit("", &mut |n, _| names.push(n.to_string()));
    for (i, n) in names.iter().enumerate() {
        for (kind, slot) in [("m", &mut optimizer.m[i]), ("v", &mut optimizer.v[i])] {
            let name = format!("optim.{kind}.{n}");
            match c.get(&name) {
                Some(t) if t.data.dim() == slot.dim() => slot.assign(&t.data),
                _ => return Err(Error::format(path, format!("missing or misshapen tensor {name}"))),
            }
        }
    }
    let rng: RngState = c.meta("rng", path)?;
    let state =
        TrainState { step: c.meta("step", path)?, optimizer, rng: rng.restore(), running_loss: c.meta("running_loss", path)? };
    let reserved = [
        "kind", "model", "fusion", "lora", "text_fusion", "base_hash", "step", "optimizer_step", "rng", "running_loss",
    ];
    let extra = c.meta.into_iter().filter(|(k, _)| !reserved.contains(&k.as_str())).collect();
    Ok(AdapterCheckpoint { adapters, state, base_hash: recorded, extra })
}
