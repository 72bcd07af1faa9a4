//! Checkpoint persistence: a JSON manifest plus a blob of little-endian f32s.
//!
//! Training runs in f64; checkpoints store f32 and are promoted on load, so a
//! round trip is exact to single-precision rounding.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Manifest format version.
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// JSON-pointer path of the tensor inside the parameter tree.
    pub name: String,
    pub shape: (usize, usize),
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    /// Parameter tree with every matrix replaced by `{"$tensor": index}`.
    pub structure: Value,
    pub config: Value,
    pub cluster_manifest_sha256: Option<String>,
    pub blob_sha256: String,
}

/// A saved model plus the run configuration it came from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: Value,
    pub cluster_manifest_sha256: Option<String>,
}

fn is_matrix(map: &Map<String, Value>) -> bool {
    map.len() == 3
        && map.get("rows").is_some_and(Value::is_u64)
        && map.get("cols").is_some_and(Value::is_u64)
        && map.get("data").is_some_and(Value::is_array)
}

fn extract(value: &mut Value, path: &str, tensors: &mut Vec<TensorEntry>, blob: &mut Vec<u8>) -> Result<()> {
    match value {
        Value::Object(map) if is_matrix(map) => {
            let rows = map["rows"].as_u64().unwrap_or(0) as usize;
            let cols = map["cols"].as_u64().unwrap_or(0) as usize;
            let data = map["data"].as_array().map(Vec::as_slice).unwrap_or(&[]);
            tensors.push(TensorEntry {
                name: path.to_string(),
                shape: (rows, cols),
                offset: blob.len() / 4,
            });
            for v in data {
                let x = v.as_f64().ok_or_else(|| Error::Format(format!("non-numeric entry in {path}")))?;
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
            let mut r = Map::new();
            r.insert("$tensor".into(), Value::from(tensors.len() - 1));
            *value = Value::Object(r);
        }
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                extract(v, &format!("{path}/{}", k.replace('~', "~0").replace('/', "~1")), tensors, blob)?;
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                extract(v, &format!("{path}/{i}"), tensors, blob)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(value: &mut Value, tensors: &[TensorEntry], floats: &[f32]) -> Result<()> {
    match value {
        Value::Object(map) if map.len() == 1 && map.contains_key("$tensor") => {
            let idx = map["$tensor"]
                .as_u64()
                .ok_or_else(|| Error::Format("tensor reference is not an index".into()))? as usize;
            let t = tensors
                .get(idx)
                .ok_or_else(|| Error::Format(format!("tensor reference {idx} out of range")))?;
            let len = t.shape.0 * t.shape.1;
            let data = floats
                .get(t.offset..t.offset + len)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the blob", t.name)))?;
            let mut m = Map::new();
            m.insert("rows".into(), Value::from(t.shape.0));
            m.insert("cols".into(), Value::from(t.shape.1));
            m.insert("data".into(), data.iter().map(|&x| Value::from(x as f64)).collect());
            *value = Value::Object(m);
        }
        Value::Object(map) => {
            for v in map.values_mut() {
                restore(v, tensors, floats)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                restore(v, tensors, floats)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits `params` into a manifest and an f32 little-endian blob.
pub fn encode(params: &ModelParams, config: Value, cluster_manifest_sha256: Option<String>) -> Result<(CheckpointManifest, Vec<u8>)> {
    let mut structure = serde_json::to_value(params)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    extract(&mut structure, "", &mut tensors, &mut blob)?;
    Ok((
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            tensors,
            structure,
            config,
            cluster_manifest_sha256,
            blob_sha256: sha256_hex(&blob),
        },
        blob,
    ))
}

/// Rebuilds parameters, refusing a blob whose hash disagrees with the manifest.
pub fn decode(manifest: &CheckpointManifest, blob: &[u8]) -> Result<ModelParams> {
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let got = sha256_hex(blob);
    if got != manifest.blob_sha256 {
        return Err(Error::Format(format!(
            "parameter blob hash {got} does not match manifest {}",
            manifest.blob_sha256
        )));
    }
    if !blob.len().is_multiple_of(4) {
        return Err(Error::Format("blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut structure = manifest.structure.clone();
    restore(&mut structure, &manifest.tensors, &floats)?;
    let mut params: ModelParams = serde_json::from_value(structure)?;
    params.finish_load();
    Ok(params)
}

/// Writes `manifest.json` and `params.bin` under `dir` (blob first, each atomically).
pub fn save(dir: &Path, params: &ModelParams, config: Value, cluster_manifest_sha256: Option<String>) -> Result<CheckpointManifest> {
    let (manifest, blob) = encode(params, config, cluster_manifest_sha256)?;
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Loads a checkpoint. With `expected_cluster_hash`, a different recorded
/// cluster manifest hash is refused.
pub fn load(dir: &Path, expected_cluster_hash: Option<&str>) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if let Some(want) = expected_cluster_hash {
        if manifest.cluster_manifest_sha256.as_deref() != Some(want) {
            return Err(Error::Format(format!(
                "checkpoint was trained against cluster manifest {:?}, not {want}",
                manifest.cluster_manifest_sha256
            )));
        }
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    Ok(Checkpoint {
        params: decode(&manifest, &blob)?,
        config: manifest.config,
        cluster_manifest_sha256: manifest.cluster_manifest_sha256,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitStrategy;
    use crate::model::tests::tiny_model;

    fn max_rel(a: &Value, b: &Value) -> f64 {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => {
                let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
                if x == y { 0.0 } else { (x - y).abs() / x.abs().max(1e-30) }
            }
            (Value::Array(x), Value::Array(y)) => x.iter().zip(y).map(|(p, q)| max_rel(p, q)).fold(0.0, f64::max),
            (Value::Object(x), Value::Object(y)) => x.iter().map(|(k, v)| max_rel(v, &y[k])).fold(0.0, f64::max),
            _ => {
                assert_eq!(a, b);
                0.0
            }
        }
    }

    #[test]
    fn round_trip_within_single_precision() {
        let (model, _) = tiny_model(2, 8, 2, InitStrategy::SemSvd, 5);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(dir.path(), &model, serde_json::json!({"seed": 5}), Some("abc".into())).unwrap();
        assert!(!manifest.tensors.is_empty());
        let back = load(dir.path(), Some("abc")).unwrap();
        let rel = max_rel(&serde_json::to_value(&model).unwrap(), &serde_json::to_value(&back.params).unwrap());
        assert!(rel <= 1e-6, "relative error {rel}");
        assert_eq!(back.config["seed"], 5);
        assert_eq!(back.params.vocab.id("train"), model.vocab.id("train"));
    }

    #[test]
    fn refuses_tampered_blob_and_foreign_clusters() {
        let (model, _) = tiny_model(1, 8, 2, InitStrategy::KaimingZero, 6);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model, Value::Null, Some("abc".into())).unwrap();
        assert!(matches!(load(dir.path(), Some("xyz")), Err(Error::Format(_))));
        let bpath = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&bpath).unwrap();
        blob[0] ^= 1;
        std::fs::write(&bpath, blob).unwrap();
        assert!(matches!(load(dir.path(), None), Err(Error::Format(_))));
    }

    #[test]
    fn write_atomic_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.json");
        write_atomic(&p, b"{}").unwrap();
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.json")]);
    }
}
