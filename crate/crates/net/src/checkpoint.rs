//! Checkpoints: a binary archive of named f32 arrays closed by a SHA-256
//! trailer, plus a JSON sidecar (`<path>.json`) with the format version,
//! the model config and caller data.
//!
//! Archive layout (little endian): `"RGCK"`, `u32` array count, then per
//! array `u32` name length, name bytes, `u32` rank, `u64` dims, f32 payload;
//! finally 32 digest bytes over everything before them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ErrorNet, ModelConfig, ParamStore, ENCODER_PREFIX};
use crate::tensor::Tensor;
use crate::NetError;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RGCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub model: ModelConfig,
    pub archive_sha256: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub arrays: Vec<(String, Tensor<f32>)>,
    pub extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(arrays: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|(n, t)| 16 + n.len() + 8 * t.shape().len() + 4 * t.len()).sum();
    let mut buf = Vec::with_capacity(total + 40);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, NetError> {
    let bad = |m: &str| NetError::corrupt(path, format!("corrupt checkpoint: {m}"));
    if bytes.len() < 40 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic or truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let count = r.u32().ok_or_else(|| bad("missing count"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let entry = (|| {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).ok()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return None;
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
            let raw = r.take(n.checked_mul(4)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Some((name, Tensor::new(shape, data)))
        })()
        .ok_or_else(|| bad("truncated array"))?;
        out.push(entry);
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Writes archive and sidecar; each goes through a temporary file and a rename.
pub fn save(path: &Path, model: &ModelConfig, arrays: &[(&str, &Tensor<f32>)], extra: serde_json::Value) -> Result<(), NetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
    }
    let bytes = encode(arrays);
    let side = Sidecar {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        archive_sha256: hex_digest(&bytes),
        extra,
    };
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), &json)
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NetError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| NetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NetError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint, NetError> {
    let sp = sidecar_path(path);
    let text = fs::read(&sp).map_err(|e| NetError::io(&sp, e))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| NetError::corrupt(&sp, format!("sidecar: {e}")))?;
    let found = raw.get("format_version").and_then(|v| v.as_u64());
    if found != Some(FORMAT_VERSION as u64) {
        return Err(NetError::VersionMismatch {
            field: "format_version".into(),
            expected: FORMAT_VERSION.to_string(),
            found: found.map_or_else(|| "missing".into(), |v| v.to_string()),
        });
    }
    let side: Sidecar = serde_json::from_value(raw).map_err(|e| NetError::corrupt(&sp, format!("sidecar: {e}")))?;
    let bytes = fs::read(path).map_err(|e| NetError::io(path, e))?;
    if hex_digest(&bytes) != side.archive_sha256 {
        return Err(NetError::corrupt(path, "archive does not match its sidecar"));
    }
    let arrays = decode(path, &bytes)?;
    Ok(Checkpoint { model: side.model, arrays, extra: side.extra })
}

/// Fails with `VersionMismatch` naming the first differing config field.
pub fn ensure_config(expected: &ModelConfig, found: &ModelConfig) -> Result<(), NetError> {
    match expected.first_difference(found) {
        None => Ok(()),
        Some(field) => {
            let show = |c: &ModelConfig| {
                serde_json::to_value(c).ok().and_then(|v| v.get(field).map(|x| x.to_string())).unwrap_or_default()
            };
            Err(NetError::VersionMismatch { field: format!("model.{field}"), expected: show(expected), found: show(found) })
        }
    }
}

pub fn save_params(path: &Path, net: &ErrorNet, params: &ParamStore<f32>) -> Result<(), NetError> {
    let arrays: Vec<_> = params.iter().collect();
    save(path, net.config(), &arrays, serde_json::Value::Null)
}

/// Model config and parameters stored at `path`.
pub fn load_params(path: &Path) -> Result<(ErrorNet, ParamStore<f32>), NetError> {
    let ck = load(path)?;
    let net = ErrorNet::new(ck.model)?;
    let (names, values) = ck.arrays.into_iter().unzip();
    let params = ParamStore::from_parts(names, values);
    net.check_params(&params)?;
    Ok((net, params))
}

/// Key translation for external encoder weights: the first matching
/// `(source_prefix, target_prefix)` rule rewrites a target name into the
/// name looked up in the checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyMapping {
    pub rules: Vec<(String, String)>,
}

impl KeyMapping {
    pub fn identity() -> Self {
        KeyMapping::default()
    }

    /// Parses `source=target` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut rules = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (s, t) = line.split_once('=').ok_or_else(|| NetError::Config(format!("mapping line without '=': {line}")))?;
            rules.push((s.trim().to_string(), t.trim().to_string()));
        }
        Ok(KeyMapping { rules })
    }

    fn source_key(&self, target: &str) -> String {
        for (src, tgt) in &self.rules {
            if let Some(rest) = target.strip_prefix(tgt.as_str()) {
                return format!("{src}{rest}");
            }
        }
        target.to_string()
    }
}

/// Replaces every Swin encoder parameter with its counterpart from `source`.
pub fn load_pretrained(params: &ParamStore<f32>, source: &Path, mapping: &KeyMapping) -> Result<ParamStore<f32>, NetError> {
    let ck = load(source)?;
    let lookup: std::collections::HashMap<&str, &Tensor<f32>> = ck.arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut out = params.clone();
    let mut replaced = 0;
    for i in 0..params.len() {
        let name = &params.names()[i];
        if !name.starts_with(ENCODER_PREFIX) {
            continue;
        }
        let key = mapping.source_key(name);
        let src = lookup
            .get(key.as_str())
            .ok_or_else(|| NetError::KeyMismatch(format!("checkpoint has no key {key} (for {name})")))?;
        if src.shape() != params.tensor(i).shape() {
            return Err(NetError::ShapeMismatch {
                name: key,
                expected: params.tensor(i).shape().to_vec(),
                found: src.shape().to_vec(),
            });
        }
        *out.tensor_mut(i) = (*src).clone();
        replaced += 1;
    }
    log::info!("loaded {replaced} encoder arrays from {}", source.display());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 1e-30, 7.25]);
        let b = Tensor::new(vec![], vec![42.0]);
        save(&p, &ModelConfig::toy(), &[("a", &a), ("b", &b)], serde_json::json!({"k": 1})).unwrap();
        let ck = load(&p).unwrap();
        assert_eq!(ck.arrays.len(), 2);
        assert!(ck.arrays[0].1.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ck.arrays[1].1.shape(), &[] as &[usize]);
        assert_eq!(ck.extra["k"], 1);
    }

    #[test]
    fn flipped_byte_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        save(&p, &ModelConfig::toy(), &[("a", &a)], serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[20] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(NetError::Io { .. })));
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(load(&p), Err(NetError::Io { .. })));
    }

    #[test]
    fn decode_rejects_bad_lengths_even_with_valid_digest() {
        let mut body = MAGIC.to_vec();
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&1u32.to_le_bytes());
        body.push(b'x');
        body.extend_from_slice(&1u32.to_le_bytes());
        body.extend_from_slice(&(u64::MAX).to_le_bytes());
        let d = Sha256::digest(&body);
        body.extend_from_slice(&d);
        assert!(decode(Path::new("x"), &body).is_err());
    }

    #[test]
    fn version_field_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &ModelConfig::toy(), &[], serde_json::Value::Null).unwrap();
        let sp = sidecar_path(&p);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&sp).unwrap()).unwrap();
        v["format_version"] = 99.into();
        fs::write(&sp, serde_json::to_vec(&v).unwrap()).unwrap();
        match load(&p) {
            Err(NetError::VersionMismatch { field, .. }) => assert_eq!(field, "format_version"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_difference_names_field() {
        let a = ModelConfig::toy();
        let b = ModelConfig { window_size: 5, ..ModelConfig::toy() };
        match ensure_config(&a, &b) {
            Err(NetError::VersionMismatch { field, expected, found }) => {
                assert_eq!(field, "model.window_size");
                assert_eq!((expected.as_str(), found.as_str()), ("4", "5"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pretrained_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net = ErrorNet::new(ModelConfig::toy()).unwrap();
        let donor: ParamStore<f32> = net.init_params(1);
        let target: ParamStore<f32> = net.init_params(2);
        let p = dir.path().join("donor.ckpt");
        save_params(&p, &net, &donor).unwrap();
        let merged = load_pretrained(&target, &p, &KeyMapping::identity()).unwrap();
        for (name, t) in merged.iter() {
            let want = if name.starts_with(ENCODER_PREFIX) { donor.get(name) } else { target.get(name) };
            assert_eq!(Some(t), want, "{name}");
        }
        assert_eq!(load_pretrained(&donor, &p, &KeyMapping::identity()).unwrap(), donor);

        // External layout: keys without the model prefix.
        let renamed: Vec<(String, &Tensor<f32>)> = donor
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(ENCODER_PREFIX).map(|r| (format!("module.{r}"), t)))
            .collect();
        let arrays: Vec<(&str, &Tensor<f32>)> = renamed.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let q = dir.path().join("ext.ckpt");
        save(&q, net.config(), &arrays, serde_json::Value::Null).unwrap();
        let map = KeyMapping::parse(&format!("# external\nmodule. = {ENCODER_PREFIX}\n")).unwrap();
        assert_eq!(load_pretrained(&target, &q, &map).unwrap(), merged);

        let missing = &arrays[1..];
        save(&q, net.config(), missing, serde_json::Value::Null).unwrap();
        match load_pretrained(&target, &q, &map) {
            Err(NetError::KeyMismatch(m)) => assert!(m.contains(&arrays[0].0.to_string()), "{m}"),
            other => panic!("{other:?}"),
        }
        let wrong = Tensor::new(vec![1], vec![0.0]);
        let mut bad = arrays.clone();
        bad[0].1 = &wrong;
        save(&q, net.config(), &bad, serde_json::Value::Null).unwrap();
        assert!(matches!(load_pretrained(&target, &q, &map), Err(NetError::ShapeMismatch { .. })));
    }
}
