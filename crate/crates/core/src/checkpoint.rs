//! Model container: an 8-byte little-endian manifest length, a JSON manifest,
//! then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredicateModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
}

pub fn to_bytes(model: &PredicateModel) -> Result<Vec<u8>> {
    let params = model.params();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        params: params
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: [e.rows, e.cols],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * params.n_scalars());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in params.entries() {
        for &v in &e.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PredicateModel> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than the length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < len {
        return Err(bad("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut model = PredicateModel::new(manifest.config)?;
    let entries = model.params().entries();
    if entries.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, configuration implies {}",
            manifest.params.len(),
            entries.len()
        )));
    }
    for (e, r) in entries.iter().zip(&manifest.params) {
        if e.name != r.name || [e.rows, e.cols] != r.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` {:?} does not match expected `{}` [{}, {}]",
                r.name, r.shape, e.name, e.rows, e.cols
            )));
        }
    }
    let payload = &body[len..];
    let expected = 4 * model.params().n_scalars();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    let mut chunks = payload.chunks_exact(4);
    for idx in 0..model.params().len() {
        for v in model.params_mut().data_mut(idx) {
            let c = chunks.next().expect("length checked");
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save(model: &PredicateModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PredicateModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            mask_resolution: 4,
            sem_depth: 2,
            sem_hidden: 5,
            spa_depth: 2,
            spa_channels: 2,
            classifier_hidden: 3,
            predicate_ids: vec![0, 2],
            n_categories: 3,
            init_seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact_after_f32_rounding() {
        let mut m = PredicateModel::new(config()).unwrap();
        m.params_mut().round_to_f32();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_has_length_prefix_and_f32_payload() {
        let m = PredicateModel::new(config()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(manifest.format_version, FORMAT_VERSION);
        assert_eq!(manifest.params.len(), m.params().len());
        assert_eq!(bytes.len() - 8 - len, 4 * m.params().n_scalars());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = PredicateModel::new(config()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(matches!(from_bytes(&bytes[..4]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        let mut wrong = bytes.clone();
        wrong[0] = wrong[0].wrapping_add(1);
        assert!(from_bytes(&wrong).is_err());
    }
}
