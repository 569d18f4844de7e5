//! Checkpoint directories: `meta.json` plus one little-endian `f32` blob per
//! named parameter, stored at `<dir>/<name>.f32` (the slash-separated name
//! doubles as the relative path).

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format: u32,
    pub kind: String,
    pub params: Vec<ParamEntry>,
    /// Whatever the owner records: architecture dims, schedule, seed or step count.
    pub info: serde_json::Value,
}

pub fn save(dir: &Path, kind: &str, store: &ParamStore, info: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        validate_name(name)?;
        let path = dir.join(format!("{name}.f32"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
    }
    let meta = CheckpointMeta {
        format: FORMAT_VERSION,
        kind: kind.to_string(),
        params,
        info,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {} in {}",
            meta.format,
            meta_path.display()
        )));
    }
    let mut store = ParamStore::new();
    for entry in &meta.params {
        validate_name(&entry.name)?;
        let path = dir.join(format!("{}.f32", entry.name));
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::ShapeMismatch {
                expected: vec![n * 4],
                actual: vec![bytes.len()],
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&entry.shape), data).expect("length checked");
        store.insert(entry.name.clone(), t, entry.trainable);
    }
    Ok((store, meta))
}

/// Round every parameter to `f32`, matching what a save/load cycle produces.
pub fn quantize(store: &mut ParamStore) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .split('/')
            .all(|seg| !seg.is_empty() && seg != "." && seg != ".." && !seg.contains('\\'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("bad parameter name `{name}`")))
    }
}
