//! Named parameters with seeded initialisation, and the checkpoint file.
//!
//! Checkpoint layout: the 8-byte magic `LVLPCKPT`, a little-endian u32 format
//! version, a u64 header length, a JSON header, then raw little-endian tensor
//! data at the offsets listed in the header.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

/// Owned set of trainable variables keyed by dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.vars.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites parameter values in place. Names absent from `values` are
    /// left untouched unless `strict`.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, strict: bool) -> Result<()> {
        for (name, var) in &self.vars {
            match values.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(ModelError::Param(format!(
                            "{name}: stored shape {:?} != model shape {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(var.dtype())?)?;
                }
                None if strict => return Err(ModelError::Param(format!("missing parameter {name}"))),
                None => {}
            }
        }
        Ok(())
    }
}

struct BuilderInner {
    store: ParamStore,
    rng: ChaCha8Rng,
}

/// Creates parameters under a name prefix, drawing initial values from one
/// seeded stream so that a model is a pure function of its seed.
#[derive(Clone)]
pub struct VarBuilder {
    inner: Rc<RefCell<BuilderInner>>,
    prefix: String,
    dtype: DType,
}

impl VarBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Rc::new(RefCell::new(BuilderInner {
                store: ParamStore::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: self.inner.clone(),
            prefix,
            dtype: self.dtype,
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = self.inner.borrow_mut();
        if inner.store.vars.contains_key(&full) {
            return Err(ModelError::Param(format!("parameter {full} defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| ModelError::Param(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).map_err(|e| ModelError::Param(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        inner.store.vars.insert(full, var);
        Ok(handle)
    }

    /// Takes the built store; other clones of this builder must be dropped.
    pub fn finish(self) -> Result<ParamStore> {
        let inner = Rc::try_unwrap(self.inner)
            .map_err(|_| ModelError::Param("builder still shared".into()))?
            .into_inner();
        Ok(inner.store)
    }
}

const MAGIC: &[u8; 8] = b"LVLPCKPT";
const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |source| ModelError::Io { path: path.to_path_buf(), source };
    let mut data: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let flat = t.flatten_all()?;
        let offset = data.len() as u64;
        let dtype = match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                "f64"
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                "f32"
            }
        };
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: dtype.into(),
            shape: t.dims().to_vec(),
            offset,
            len: data.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header { meta: ckpt.meta.clone(), tensors: entries })
        .map_err(|e| ModelError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&FORMAT.to_le_bytes()).map_err(io)?;
    f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;
    f.write_all(&data).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| ModelError::Checkpoint { path: path.to_path_buf(), msg };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let format = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if format != FORMAT {
        return Err(bad(format!("format {format}, expected {FORMAT}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(e.to_string()))?;
    let data = &bytes[body..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > data.len() {
            return Err(bad(format!("tensor {} out of range", e.name)));
        }
        let raw = &data[start..end];
        let t = match e.dtype.as_str() {
            "f32" => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            "f64" => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        tensors.insert(e.name, t);
    }
    Ok(Checkpoint { meta: header.meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_seeded_and_prefixed() {
        let build = |seed| {
            let vb = VarBuilder::new(seed, DType::F32);
            let a = vb.pp("enc").pp("l0").get(&[2, 3], "w", Init::Normal(1.0)).unwrap();
            drop(a);
            vb.finish().unwrap()
        };
        let a = build(1);
        let b = build(1);
        let c = build(2);
        let v = |s: &ParamStore| s.get("enc.l0.w").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a), v(&b));
        assert_ne!(v(&a), v(&c));
        assert_eq!(a.num_scalars(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let vb = VarBuilder::new(0, DType::F32);
        vb.get(&[1], "x", Init::Zeros).unwrap();
        assert!(vb.get(&[1], "x", Init::Zeros).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_in_place_load() {
        let vb = VarBuilder::new(3, DType::F32);
        let handle = vb.get(&[2, 2], "w", Init::Uniform(1.0)).unwrap();
        vb.get(&[3], "b", Init::Const(0.5)).unwrap();
        let store = vb.finish().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut tensors = store.snapshot();
        tensors.insert("extra".into(), Tensor::new(&[1.5f64, -2.0], &Device::Cpu).unwrap());
        save_checkpoint(&path, &Checkpoint { meta: serde_json::json!({"k": 1}), tensors: tensors.clone() }).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta["k"], 1);
        for (k, t) in &tensors {
            assert_eq!(
                t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap(),
                back.tensors[k].flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
            );
        }
        let zeros = BTreeMap::from([("w".to_string(), Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap())]);
        store.load(&zeros, false).unwrap();
        assert_eq!(handle.sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(store.load(&zeros, true).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
