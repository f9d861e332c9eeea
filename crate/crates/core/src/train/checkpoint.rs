use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"N2NCKPT1";

/// Metadata key holding the architecture fingerprint.
pub const CONFIG_HASH_KEY: &str = "config_hash";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|x| x.to_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.to_f64_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// Named tensors plus `key=value` metadata, with a fixed little-endian layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub metadata: BTreeMap<String, String>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// All parameters and buffers of a model, with its config fingerprint.
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut ck = Self::from_store(model.params());
        ck.metadata
            .insert(CONFIG_HASH_KEY.into(), format!("{:016x}", model.config().fingerprint()));
        ck.metadata.insert("config".into(), model.config().canonical_string());
        ck
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: TensorData::from_tensor(&p.value),
            })
            .collect();
        Self { entries, metadata: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies every entry into the model, casting to its precision.
    /// Names and shapes must match exactly, as must the config fingerprint when present.
    pub fn load_into<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        if let Some(h) = self.metadata.get(CONFIG_HASH_KEY) {
            let want = format!("{:016x}", model.config().fingerprint());
            if *h != want {
                return Err(corrupt(format!("checkpoint built for config {h}, model is {want}")));
            }
        }
        let store = model.params_mut();
        if store.len() != self.entries.len() {
            return Err(corrupt(format!(
                "{} entries for a model with {} tensors",
                self.entries.len(),
                store.len()
            )));
        }
        let mut updates = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = store
                .id(&e.name)
                .ok_or_else(|| corrupt(format!("unknown tensor {:?}", e.name)))?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(corrupt(format!(
                    "{}: shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    store.value(id).shape()
                )));
            }
            updates.push((id, Tensor::from_f64(e.shape.clone(), &e.data.to_f64_vec())?));
        }
        for (id, t) in updates {
            store.set(id, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let count = u32::try_from(self.entries.len()).map_err(|_| corrupt("too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let expected: usize = e.shape.iter().product();
            if expected != e.data.len() || e.shape.is_empty() {
                return Err(corrupt(format!("{}: shape {:?} holds {} values", e.name, e.shape, e.data.len())));
            }
            let name = e.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype().code());
            out.push(u8::try_from(e.shape.len()).map_err(|_| corrupt("rank above 255"))?);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| corrupt("extent above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(corrupt(format!("metadata entry {k:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let len = u32::try_from(meta.len()).map_err(|_| corrupt("metadata too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| corrupt(format!("{name}: unknown dtype")))?;
            let rank = r.take(1)?[0] as usize;
            if rank == 0 {
                return Err(corrupt(format!("{name}: rank 0")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("{name}: extent overflow")))?;
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| corrupt("size overflow"))?)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
            };
            if entries.iter().any(|e: &Entry| e.name == name) {
                return Err(corrupt(format!("duplicate tensor {name:?}")));
            }
            entries.push(Entry { name, shape, data });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// Element-wise mean of checkpoints with identical names, shapes and dtypes.
///
/// Each element's values are sorted before summation in f64, so the result
/// does not depend on the order of the inputs.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if c.entries.len() != first.entries.len() {
            return Err(corrupt(format!("checkpoint {i} has {} entries, expected {}", c.entries.len(), first.entries.len())));
        }
        for (a, b) in first.entries.iter().zip(&c.entries) {
            if a.name != b.name || a.shape != b.shape || a.data.dtype() != b.data.dtype() {
                return Err(corrupt(format!(
                    "checkpoint {i}: {} {:?} {} does not match {} {:?} {}",
                    b.name,
                    b.shape,
                    b.data.dtype(),
                    a.name,
                    a.shape,
                    a.data.dtype()
                )));
            }
        }
    }
    let k = ckpts.len() as f64;
    let mut entries = Vec::with_capacity(first.entries.len());
    for (idx, e) in first.entries.iter().enumerate() {
        let sources: Vec<Vec<f64>> = ckpts.iter().map(|c| c.entries[idx].data.to_f64_vec()).collect();
        let mut buf = vec![0.0; ckpts.len()];
        let mean: Vec<f64> = (0..e.data.len())
            .map(|j| {
                for (b, s) in buf.iter_mut().zip(&sources) {
                    *b = s[j];
                }
                buf.sort_by(f64::total_cmp);
                buf.iter().sum::<f64>() / k
            })
            .collect();
        let data = match e.data.dtype() {
            DType::F32 => TensorData::F32(mean.iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(mean),
        };
        entries.push(Entry { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("averaged".into(), ckpts.len().to_string());
    let shared = |key: &str| {
        let v = first.metadata.get(key)?;
        ckpts.iter().all(|c| c.metadata.get(key) == Some(v)).then(|| v.clone())
    };
    for key in [CONFIG_HASH_KEY, "config"] {
        if let Some(v) = shared(key) {
            metadata.insert(key.into(), v);
        }
    }
    let mut epochs: Vec<usize> = ckpts
        .iter()
        .filter_map(|c| c.metadata.get("epoch")?.parse().ok())
        .collect();
    if !epochs.is_empty() {
        epochs.sort_unstable();
        let list: Vec<String> = epochs.iter().map(usize::to_string).collect();
        metadata.insert("source_epochs".into(), list.join(","));
    }
    Ok(Checkpoint { entries, metadata })
}
