//! Binary checkpoints: a JSON header followed by named little-endian `f32` arrays.
//!
//! Layout: 8-byte magic, `u32` header length, header JSON, `u32` array count, then per
//! array `u32` name length, name bytes, `u32` rank, `rank × u32` dims and the data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ModelConfig, TryOnModel};
use crate::params::{AdamW, AdamWConfig};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"TRYONCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("bad header: {0}")]
    Header(String),
    #[error("truncated or corrupt payload in array {0:?}")]
    Corrupt(String),
    #[error("config mismatch on keys: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("missing array {0:?}")]
    MissingArray(String),
    #[error("array {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, got: (usize, usize), expected: (usize, usize) },
    #[error("model: {0}")]
    Model(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model dimensions (the serialized model config).
    pub dims: Value,
    /// Effective configuration, flat dotted keys.
    pub config: BTreeMap<String, Value>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let mut put = |bytes: &[u8]| w.write_all(bytes);
        let u32le = |v: usize| (v as u32).to_le_bytes();
        (|| -> std::io::Result<()> {
            put(MAGIC)?;
            put(&u32le(header.len()))?;
            put(&header)?;
            put(&u32le(self.arrays.len()))?;
            for (name, m) in &self.arrays {
                put(&u32le(name.len()))?;
                put(name.as_bytes())?;
                put(&u32le(2))?;
                put(&u32le(m.rows()))?;
                put(&u32le(m.cols()))?;
                let mut buf = Vec::with_capacity(m.len() * 4);
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                put(&buf)?;
            }
            Ok(())
        })()
        .map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).ok_or(CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = r.u32().ok_or_else(|| CheckpointError::Header("truncated".into()))? as usize;
        let hbytes = r.take(hlen).ok_or_else(|| CheckpointError::Header("truncated".into()))?;
        let raw: Value = serde_json::from_slice(hbytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let version = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let count = r.u32().ok_or_else(|| CheckpointError::Corrupt("<array count>".into()))? as usize;
        let mut arrays = Vec::with_capacity(count);
        for i in 0..count {
            let unnamed = || CheckpointError::Corrupt(format!("<array {i}>"));
            let nlen = r.u32().ok_or_else(unnamed)? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(unnamed)?.to_vec()).map_err(|_| unnamed())?;
            let corrupt = || CheckpointError::Corrupt(name.clone());
            let rank = r.u32().ok_or_else(corrupt)? as usize;
            if rank > 2 {
                return Err(corrupt());
            }
            let mut dims = [1usize; 2];
            for k in 0..rank {
                dims[2 - rank + k] = r.u32().ok_or_else(corrupt)? as usize;
            }
            let n = dims[0].checked_mul(dims[1]).and_then(|n| n.checked_mul(4)).ok_or_else(corrupt)?;
            let data = r.take(n).ok_or_else(corrupt)?;
            let values = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push((name, Matrix::from_vec(dims[0], dims[1], values)));
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::Corrupt("<trailing bytes>".into()));
        }
        Ok(Self { header, arrays })
    }
}

/// Snapshot of a model (and optionally its optimizer moments) at `step`.
pub fn model_checkpoint(
    model: &TryOnModel<f32>,
    optimizer: Option<&AdamW<f32>>,
    step: u64,
    config: BTreeMap<String, Value>,
) -> Checkpoint {
    let mut arrays: Vec<(String, Matrix<f32>)> = model.store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let mut config = config;
    if let Some(opt) = optimizer {
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            arrays.push((format!("opt.m.{n}"), opt.m[i].clone()));
            arrays.push((format!("opt.v.{n}"), opt.v[i].clone()));
        }
        config.insert("opt.step".into(), Value::from(opt.step));
        config.extend(crate::config::to_flat(&opt.config).into_iter().map(|(k, v)| (format!("opt.{k}"), v)));
    }
    let dims = serde_json::to_value(&model.config).expect("model config serializes");
    Checkpoint { header: CheckpointHeader { format_version: FORMAT_VERSION, dims, config, step }, arrays }
}

/// Rebuilds the model (and the optimizer when moments are present) from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(TryOnModel<f32>, Option<AdamW<f32>>)> {
    let config: ModelConfig =
        serde_json::from_value(ckpt.header.dims.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut model = TryOnModel::<f32>::new(config, 0).map_err(|e| CheckpointError::Model(e.to_string()))?;
    let fetch = |name: &str, expected: (usize, usize)| -> Result<Matrix<f32>> {
        let m = ckpt.get(name).ok_or_else(|| CheckpointError::MissingArray(name.to_string()))?;
        if m.shape() != expected {
            return Err(CheckpointError::Shape { name: name.to_string(), got: m.shape(), expected });
        }
        Ok(m.clone())
    };
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape();
        *model.store.get_mut(id) = fetch(&name, shape)?;
    }
    let has_opt = ckpt.arrays.iter().any(|(n, _)| n.starts_with("opt."));
    let optimizer = if has_opt {
        let cfg = &ckpt.header.config;
        let num = |k: &str, d: f64| cfg.get(&format!("opt.{k}")).and_then(Value::as_f64).unwrap_or(d);
        let defaults = AdamWConfig::default();
        let oc = AdamWConfig {
            lr: num("lr", defaults.lr),
            beta1: num("beta1", defaults.beta1),
            beta2: num("beta2", defaults.beta2),
            eps: num("eps", defaults.eps),
            weight_decay: num("weight_decay", defaults.weight_decay),
        };
        let mut opt = AdamW::new(oc, &model.store);
        opt.step = cfg.get("opt.step").and_then(Value::as_u64).unwrap_or(0);
        for (i, &id) in ids.iter().enumerate() {
            let name = model.store.name(id).to_string();
            let shape = model.store.get(id).shape();
            opt.m[i] = fetch(&format!("opt.m.{name}"), shape)?;
            opt.v[i] = fetch(&format!("opt.v.{name}"), shape)?;
        }
        Some(opt)
    } else {
        None
    };
    Ok((model, optimizer))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Keys under any of `prefixes` whose values differ between two flat configs.
pub fn differing_keys(a: &BTreeMap<String, Value>, b: &BTreeMap<String, Value>, prefixes: &[&str]) -> Vec<String> {
    let watched = |k: &String| prefixes.iter().any(|p| k.starts_with(p));
    let mut keys: Vec<String> = a.keys().chain(b.keys()).filter(|k| watched(k)).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.retain(|k| a.get(k) != b.get(k));
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arrays = vec![
            ("a.w".to_string(), Matrix::randn(3, 5, 1.0, &mut rng)),
            ("b".to_string(), Matrix::randn(1, 7, 1.0, &mut rng)),
        ];
        let config = [("model.patch".to_string(), Value::from(8))].into_iter().collect();
        Checkpoint {
            header: CheckpointHeader { format_version: FORMAT_VERSION, dims: Value::Null, config, step: 12 },
            arrays,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in back.arrays.iter().zip(&c.arrays) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_names_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        sample().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(&err, CheckpointError::Corrupt(n) if n == "b"), "{err}");
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn unknown_version_is_refused() {
        let mut c = sample();
        c.header.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::UnsupportedVersion(99))));
    }

    #[test]
    fn model_and_optimizer_restore_exactly() {
        use crate::dit::DitConfig;
        use crate::mgsa::MgsaConfig;
        use crate::toyworld::Canvas;
        let config = ModelConfig {
            canvas: Canvas { height: 16, width: 16 },
            patch: 8,
            mgsa: MgsaConfig { d_q: 8, heads: 2, layers: 1, max_seq: 64, d_v: 8 },
            dit: DitConfig { d_model: 8, heads: 2, layers: 2, mlp_ratio: 2 },
        };
        let model = TryOnModel::<f32>::new(config, 3).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
        opt.step = 4;
        opt.m[0].data_mut()[0] = 0.25;
        let ckpt = model_checkpoint(&model, Some(&opt), 4, BTreeMap::new());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ckpt.save(&p).unwrap();
        let (back, back_opt) = restore_model(&Checkpoint::load(&p).unwrap()).unwrap();
        let back_opt = back_opt.unwrap();
        for ((n1, a), (n2, b)) in back.store.iter().zip(model.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        assert_eq!(back_opt.step, 4);
        assert_eq!(back_opt.m, opt.m);
        assert!(!back.store.is_trainable(back.mgsa.target_proj));
    }

    #[test]
    fn differing_keys_lists_changes_under_prefixes() {
        let a: BTreeMap<String, Value> =
            [("model.canvas.height", 64), ("model.patch", 8), ("train.steps", 10)].map(|(k, v)| (k.to_string(), v.into())).into();
        let mut b = a.clone();
        b.insert("model.canvas.height".into(), 32.into());
        b.insert("train.steps".into(), 20.into());
        assert_eq!(differing_keys(&a, &b, &["model."]), vec!["model.canvas.height".to_string()]);
    }
}
