//! Checkpoint directories: `manifest.json` plus one tensor file per
//! parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, MiniViT, ViTConfig};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor, Element};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ViTConfig,
    pub arch: ArchDescriptor,
    pub taps: Vec<usize>,
    /// Parameter dot-path → file name inside the checkpoint directory.
    pub params: BTreeMap<String, String>,
    /// Free-form metadata owned by the caller (supernet choice sets etc.).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn save_checkpoint<T: Element>(
    model: &MiniViT<T>,
    dir: &Path,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = BTreeMap::new();
    for (name, t) in model.params.named() {
        let file = format!("{name}.jvt");
        write_tensor(&dir.join(&file), t)?;
        params.insert(name, file);
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        config: model.config.clone(),
        arch: model.arch.clone(),
        taps: model.taps.clone(),
        params,
        meta,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(MiniViT<T>, Manifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::State(format!("cannot read checkpoint manifest {}: {e}", path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Format(format!(
            "checkpoint schema {} unsupported (expected {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    // a freshly initialized model gives the expected layout and shapes
    let mut model = MiniViT::<T>::init(manifest.config.clone(), &mut Rng::new(0))?.with_taps(manifest.taps.clone())?;
    model.arch = ArchDescriptor::parse_with_depth(&manifest.arch.to_string(), model.depth())?;
    for i in 0..model.depth() {
        if manifest.params.contains_key(&format!("layers.{i}.squeeze.w1")) {
            model.ensure_squeeze(i, &mut Rng::new(0))?;
        }
    }
    let expected = model.params.count();
    if manifest.params.len() != expected {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, layout needs {expected}",
            manifest.params.len()
        )));
    }
    for (name, slot) in model.params.named_mut() {
        let file = manifest
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("manifest is missing parameter {name}")))?;
        let t = read_tensor::<T>(&dir.join(file))?;
        if t.shape() != slot.shape() {
            return Err(dim_err!("parameter {name}: stored {:?}, expected {:?}", t.shape(), slot.shape()));
        }
        *slot = t;
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::InheritMode;

    #[test]
    fn round_trip_with_squeeze_layers() {
        let cfg = ViTConfig {
            image_size: [8, 8],
            patch: 2,
            depth: 2,
            d_model: 8,
            heads: 2,
            window: 2,
            ..Default::default()
        };
        let mut rng = Rng::new(1);
        let t = MiniViT::<f32>::init(cfg, &mut rng).unwrap();
        let s = MiniViT::inherit_weights(&t, &"LF".parse().unwrap(), &mut rng, InheritMode::All).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), 1.into());
        save_checkpoint(&s, dir.path(), meta.clone()).unwrap();
        let (back, m) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(m.meta, meta);
        assert!(m.params.contains_key("layers.0.w_q"));
        assert!(load_checkpoint::<f64>(dir.path()).is_err());
    }

    #[test]
    fn missing_manifest_is_a_state_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::State(_))));
    }
}
