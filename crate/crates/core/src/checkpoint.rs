//! Checkpoints as safetensors archives of little-endian `f64` tensors.
//!
//! The header metadata carries `format = "sct-checkpoint"`, a `format_version`,
//! the `kind` (`sct` or `backbone`) and the architecture config as JSON.
//! Tensor names are the canonical parameter names of the model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::loss::{BackboneConfig, FrozenBackbone};
use crate::model::{SctConfig, SctModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "sct-checkpoint";
pub const FORMAT_VERSION: &str = "1";

const KIND_SCT: &str = "sct";
const KIND_BACKBONE: &str = "backbone";

fn encode(store: &ParamStore, kind: &str, config: String) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_owned(), t.shape().to_vec(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, raw)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("format".to_owned(), FORMAT.to_owned()),
        ("format_version".to_owned(), FORMAT_VERSION.to_owned()),
        ("kind".to_owned(), kind.to_owned()),
        ("config".to_owned(), config),
    ]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes through a sibling temporary file so readers never see a partial archive.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Decoded {
    config: String,
    tensors: Vec<(String, Tensor)>,
}

fn decode(path: &Path, expected_kind: &str) -> Result<Decoded> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| bad(format!("missing `{k}` metadata")))
    };
    if field("format")? != FORMAT {
        return Err(bad("not an sct checkpoint".into()));
    }
    let version = field("format_version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {version}")));
    }
    let kind = field("kind")?;
    if kind != expected_kind {
        return Err(bad(format!("expected a {expected_kind} checkpoint, found {kind}")));
    }
    let archive = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
    let mut tensors = Vec::new();
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor {name} has dtype {:?}, expected F64", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor::new(view.shape().to_vec(), data)?));
    }
    Ok(Decoded {
        config: field("config")?,
        tensors,
    })
}

/// Copies every tensor into `store`, requiring an exact name and shape match.
fn fill(store: &mut ParamStore, tensors: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            store.len(),
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        if store.id(&name).is_none() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected tensor {name}",
                path.display()
            )));
        }
        store
            .set(&name, t)
            .map_err(|e| Error::Checkpoint(format!("{}: {name}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn save_model(model: &SctModel, path: impl AsRef<Path>) -> Result<()> {
    let config = serde_json::to_string(model.config())?;
    write_atomic(path.as_ref(), &encode(model.store(), KIND_SCT, config)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SctModel> {
    let path = path.as_ref();
    let decoded = decode(path, KIND_SCT)?;
    let config: SctConfig = serde_json::from_str(&decoded.config)?;
    let mut model = SctModel::build(config, 0)?;
    fill(model.store_mut(), decoded.tensors, path)?;
    Ok(model)
}

pub fn save_backbone(backbone: &FrozenBackbone, path: impl AsRef<Path>) -> Result<()> {
    let config = serde_json::to_string(backbone.config())?;
    write_atomic(path.as_ref(), &encode(backbone.store(), KIND_BACKBONE, config)?)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<FrozenBackbone> {
    let path = path.as_ref();
    let decoded = decode(path, KIND_BACKBONE)?;
    let config: BackboneConfig = serde_json::from_str(&decoded.config)?;
    let mut store = FrozenBackbone::new(config.clone(), 0)?.store().clone();
    fill(&mut store, decoded.tensors, path)?;
    FrozenBackbone::from_store(config, store)
}
