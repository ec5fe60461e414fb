//! Checkpoints, their binary container and the on-disk store.
//!
//! Container layout (little-endian): magic `CSNT`, `u32` version, `u64`
//! length of a JSON metadata block, the JSON bytes, `u64` tensor count, then
//! per tensor: `u32` name length, UTF-8 name, `u8` dtype tag, `u32` rank,
//! `u64` extents and the raw values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub id: usize,
    pub episode: usize,
    pub val_acc: f64,
    /// Seconds since the Unix epoch when the checkpoint was taken.
    pub wall_clock: u64,
    /// `"train"` for trajectory points, `"aeml(t=..)"` for averaged models.
    pub provenance: String,
    pub model: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: usize,
    episode: usize,
    val_acc: f64,
    wall_clock: u64,
    provenance: String,
    model: ModelConfig,
    shots: usize,
    bn_initialized: Vec<bool>,
    adam_step: Option<u64>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            id: self.id,
            episode: self.episode,
            val_acc: self.val_acc,
            wall_clock: self.wall_clock,
            provenance: self.provenance.clone(),
            model: self.model.config.clone(),
            shots: self.model.shots,
            bn_initialized: self.model.bn_initialized(),
            adam_step: self.adam.as_ref().map(|a| a.step),
        };
        let mut tensors = self.model.state();
        if let Some(a) = &self.adam {
            for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
                tensors.push((format!("adam.m.{i}"), m.clone()));
                tensors.push((format!("adam.v.{i}"), v.clone()));
            }
        }
        encode_container(&serde_json::to_vec(&meta).expect("meta serializes"), &tensors)
    }

    /// Decodes a checkpoint; values stored in the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, mut tensors) = decode_container::<T>(bytes)?;
        let meta: Meta = serde_json::from_slice(&meta)?;
        if !(0.0..=1.0).contains(&meta.val_acc) {
            return Err(Error::Format(format!("validation accuracy {} outside [0, 1]", meta.val_acc)));
        }
        let built = ModelParams::<T>::build(&meta.model, meta.shots)?;
        let n_state = built.state().len();
        let n_params = built.tensors().len();
        if tensors.len() < n_state {
            return Err(Error::Format(format!("{} tensors, model needs {n_state}", tensors.len())));
        }
        let rest = tensors.split_off(n_state);
        let model = ModelParams::from_state(&meta.model, meta.shots, tensors, &meta.bn_initialized)?;
        let adam = match meta.adam_step {
            None if rest.is_empty() => None,
            None => return Err(Error::Format("optimizer tensors without optimizer metadata".into())),
            Some(step) => {
                if rest.len() != 2 * n_params {
                    return Err(Error::Format(format!("{} optimizer tensors for {n_params} parameters", rest.len())));
                }
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (i, (name, t)) in rest.into_iter().enumerate() {
                    let expect = format!("adam.{}.{}", if i % 2 == 0 { "m" } else { "v" }, i / 2);
                    if name != expect {
                        return Err(Error::Format(format!("expected {expect}, found {name}")));
                    }
                    if i % 2 == 0 { m.push(t) } else { v.push(t) }
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Checkpoint {
            id: meta.id,
            episode: meta.episode,
            val_acc: meta.val_acc,
            wall_clock: meta.wall_clock,
            provenance: meta.provenance,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(format!("decoding {}", path.display())))
    }
}

pub fn encode_container<T: Real>(meta: &[u8], tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }
}

/// Returns the metadata bytes and the named tensors converted to `T`.
pub fn decode_container<T: Real>(bytes: &[u8]) -> Result<(Vec<u8>, Vec<(String, Tensor<T>)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint container".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("container version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let meta_len = c.u64()?;
    let meta = c.take(meta_len)?.to_vec();
    let count = c.u64()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let tag = c.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let raw = c.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after container".into()));
    }
    Ok((meta, tensors))
}

/// Index entry of a stored checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub episode: usize,
    pub val_acc: f64,
    pub file: String,
}

#[derive(Debug)]
enum Backend {
    Memory(BTreeMap<usize, Vec<u8>>),
    Dir(PathBuf),
}

/// Checkpoints of one run, kept in memory or in a directory with an
/// `index.json` manifest.
#[derive(Debug)]
pub struct CheckpointStore {
    backend: Backend,
    index: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

impl CheckpointStore {
    pub fn memory() -> Self {
        CheckpointStore {
            backend: Backend::Memory(BTreeMap::new()),
            index: Vec::new(),
        }
    }

    /// Creates `dir` if needed; an existing index there is replaced.
    pub fn create_dir(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let store = CheckpointStore {
            backend: Backend::Dir(dir.to_path_buf()),
            index: Vec::new(),
        };
        store.write_index()?;
        Ok(store)
    }

    pub fn open_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let index: Vec<IndexEntry> = serde_json::from_str(&text)?;
        Ok(CheckpointStore {
            backend: Backend::Dir(dir.to_path_buf()),
            index,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn save<T: Real>(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        if self.index.iter().any(|e| e.id == ckpt.id) {
            return Err(Error::Contract(format!("checkpoint id {} already stored", ckpt.id)));
        }
        let file = format!("ckpt_{:06}.csnt", ckpt.id);
        match &mut self.backend {
            Backend::Memory(m) => {
                m.insert(ckpt.id, ckpt.to_bytes());
            }
            Backend::Dir(d) => ckpt.save(&d.join(&file))?,
        }
        self.index.push(IndexEntry {
            id: ckpt.id,
            episode: ckpt.episode,
            val_acc: ckpt.val_acc,
            file,
        });
        self.write_index()
    }

    pub fn load<T: Real>(&self, id: usize) -> Result<Checkpoint<T>> {
        let entry = self
            .index
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Contract(format!("no checkpoint with id {id}")))?;
        match &self.backend {
            Backend::Memory(m) => Checkpoint::from_bytes(&m[&id]),
            Backend::Dir(d) => Checkpoint::load(&d.join(&entry.file)),
        }
    }

    fn write_index(&self) -> Result<()> {
        if let Backend::Dir(d) = &self.backend {
            let text = serde_json::to_string_pretty(&self.index)?;
            std::fs::write(d.join(INDEX_FILE), text)?;
        }
        Ok(())
    }
}
