//! Checkpoint files shared by every trainable module.
//!
//! Layout: one line of compact JSON (the header), a newline, then every
//! tensor's values as little-endian `f64` in header order. Parameters come
//! first, followed by the Adam moment buffers when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Rng, Tensor};

const FORMAT: &str = "semgen-ckpt-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    step: u64,
    seed: u64,
    dtype: String,
    frozen: bool,
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
    adam_step: Option<u64>,
    rng: Option<Rng>,
    losses: Vec<f64>,
}

/// Everything needed to rebuild a module or resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub rng: Option<Rng>,
    /// Loss history up to `step`, kept so resumed runs can rewrite the full curve.
    pub losses: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, meta: serde_json::Value, params: ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            step: 0,
            seed,
            meta,
            params,
            adam: None,
            rng: None,
            losses: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| TensorInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            kind: self.kind.clone(),
            step: self.step,
            seed: self.seed,
            dtype: "f64le".into(),
            frozen: self.params.is_frozen(),
            meta: self.meta.clone(),
            tensors,
            adam_step: self.adam.as_ref().map(|a| a.step),
            rng: self.rng.clone(),
            losses: self.losses.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        let mut put = |t: &Tensor| {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, t) in self.params.iter() {
            put(t);
        }
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", header.format)));
        }
        let mut blob = bytes[nl + 1..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = blob.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated tensor blob".into()));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = ParamStore::new();
        for info in &header.tensors {
            let t = take(&info.shape)?;
            params.add(info.name.clone(), t);
        }
        let adam = match header.adam_step {
            Some(step) => {
                let shapes: Vec<Vec<usize>> = header.tensors.iter().map(|t| t.shape.clone()).collect();
                let m = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        if blob.next().is_some() {
            return Err(bad("trailing data after tensors".into()));
        }
        if header.frozen {
            params.freeze();
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            seed: header.seed,
            meta: header.meta,
            params,
            adam,
            rng: header.rng,
            losses: header.losses,
        })
    }

    /// Write via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Dependency(format!("checkpoint {} not found", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(path, &bytes)
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "{} holds a `{}` checkpoint, expected `{kind}`",
                path.display(),
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, AdamConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.randn("a.w", &[3, 2], 1.0, &mut rng);
        store.randn("b", &[4], 0.1, &mut rng);
        let mut adam = AdamState::new(&store);
        let grads: Vec<_> = store.iter().map(|(_, t)| Some(t.map(|x| x * 0.5))).collect();
        adam_step(&mut store, &grads, &mut adam, &AdamConfig::default()).unwrap();
        let mut ck = Checkpoint::new("test", 9, serde_json::json!({"k": 1}), store.clone());
        ck.step = 5;
        ck.adam = Some(adam.clone());
        ck.rng = Some(rng.clone());
        ck.losses = vec![1.0, 0.5];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.params.hash(), store.hash());
        assert_eq!(back.adam.clone().unwrap(), adam);
        assert_eq!(back.rng.clone().unwrap().next_u64(), rng.next_u64());
        assert_eq!(back.step, 5);
        assert_eq!(back.losses, vec![1.0, 0.5]);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn missing_file_is_dependency_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::full(&[4], 1.0));
        let mut bytes = Checkpoint::new("t", 0, serde_json::Value::Null, store).to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(Path::new("x"), &bytes).is_err());
    }
}
