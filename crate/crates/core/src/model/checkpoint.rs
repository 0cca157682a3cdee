//! Checkpoint I/O and pretrained-weight loading.
//!
//! Checkpoints are a small JSON header (configs plus a tensor table) followed
//! by raw little-endian `f64` data in registration order. Pretrained weights
//! load through a descriptor file naming a checkpoint and an optional
//! two-column name-mapping table that translates published tensor names to
//! internal ones.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, HeadConfig, Model};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"DRSCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    backbone: BackboneConfig,
    head: HeadConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialize a model's configuration and parameters.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = CkptHeader {
        backbone: model.cfg.clone(),
        head: model.head_cfg.clone(),
        tensors: model
            .params
            .defs()
            .iter()
            .map(|d| TensorEntry {
                name: d.name.clone(),
                shape: d.shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for v in model.params.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_raw(path: &Path) -> Result<(CkptHeader, Vec<f64>)> {
    let mut file = std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is truncated", path.display())))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CkptHeader = serde_json::from_slice(&header_json)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if raw.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "data section holds {} bytes, expected {}",
            raw.len(),
            expected * 8
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

/// Load a model from a checkpoint, validating every tensor shape against the
/// rebuilt architecture.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (header, data) = read_raw(path)?;
    let mut model = Model::build_skeleton(header.backbone, header.head)?;
    let mut offset = 0;
    let mut mismatches = Vec::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let values = &data[offset..offset + len];
        offset += len;
        if let Err(Error::IncompatibleTensors { tensors }) =
            model.params.set_by_name(&entry.name, &entry.shape, values)
        {
            mismatches.extend(tensors);
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::IncompatibleTensors { tensors: mismatches });
    }
    Ok(model)
}

/// A pretrained-weight descriptor: the checkpoint to read and an optional
/// name-mapping table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightDescriptor {
    pub checkpoint: PathBuf,
    pub mapping: Option<PathBuf>,
}

impl WeightDescriptor {
    /// Parse a `key=value` descriptor file. Recognized keys: `checkpoint`
    /// (required) and `mapping` (optional). Relative paths resolve against
    /// the descriptor's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read descriptor {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut checkpoint = None;
        let mut mapping = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Checkpoint(format!("descriptor line without `=`: {line}"))
            })?;
            let resolved = base.join(value.trim());
            match key.trim() {
                "checkpoint" => checkpoint = Some(resolved),
                "mapping" => mapping = Some(resolved),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "unknown descriptor key `{other}`"
                    )))
                }
            }
        }
        Ok(Self {
            checkpoint: checkpoint
                .ok_or_else(|| Error::Checkpoint("descriptor names no checkpoint".into()))?,
            mapping,
        })
    }
}

/// Two-column mapping table: published name, whitespace, internal name.
fn read_mapping(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read mapping {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        match (cols.next(), cols.next(), cols.next()) {
            (Some(published), Some(internal), None) => {
                pairs.push((published.to_string(), internal.to_string()));
            }
            _ => {
                return Err(Error::Checkpoint(format!(
                    "mapping line is not two columns: {line}"
                )))
            }
        }
    }
    Ok(pairs)
}

/// Load backbone weights named by the descriptor into the model. Every
/// backbone tensor must be provided with a matching shape; the head stays
/// freshly initialized.
pub(crate) fn apply_pretrained(model: &mut Model, descriptor_path: &Path) -> Result<()> {
    let descriptor = WeightDescriptor::read(descriptor_path)?;
    let (header, data) = read_raw(&descriptor.checkpoint)?;
    let rename: std::collections::BTreeMap<String, String> = match &descriptor.mapping {
        Some(p) => read_mapping(p)?.into_iter().collect(),
        None => Default::default(),
    };

    let mut provided: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> =
        Default::default();
    let mut offset = 0;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let name = rename.get(&entry.name).cloned().unwrap_or(entry.name.clone());
        provided.insert(name, (entry.shape.clone(), data[offset..offset + len].to_vec()));
        offset += len;
    }

    let backbone_tensors: Vec<(String, Vec<usize>)> = model
        .params
        .defs()
        .iter()
        .filter(|d| !d.name.starts_with("head."))
        .map(|d| (d.name.clone(), d.shape.clone()))
        .collect();

    let mut offending = Vec::new();
    for (name, shape) in &backbone_tensors {
        match provided.get(name) {
            Some((got_shape, _)) if got_shape != shape => {
                offending.push(format!("{name} (expected {shape:?}, got {got_shape:?})"));
            }
            Some(_) => {}
            None => offending.push(format!("{name} (missing from checkpoint)")),
        }
    }
    if !offending.is_empty() {
        return Err(Error::IncompatibleTensors { tensors: offending });
    }
    for (name, shape) in &backbone_tensors {
        let (_, values) = &provided[name];
        model.params.set_by_name(name, shape, values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, HeadConfig, Model};
    use crate::preprocess::ModelInput;
    use rand::Rng;

    fn toy_input(side: usize) -> ModelInput {
        let mut rng = crate::rng::substream(77, "ckpt-input");
        ModelInput {
            side,
            data: (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn checkpoint_round_trips_scores() {
        let cfg = BackboneConfig::toy();
        let model = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let input = toy_input(cfg.image_side);
        let a = model.forward_batch(std::slice::from_ref(&input)).unwrap()[0].value();
        let b = loaded.forward_batch(&[input]).unwrap()[0].value();
        assert_eq!(a, b);
        assert_eq!(loaded.describe_backbone(), model.describe_backbone());
    }

    #[test]
    fn pretrained_descriptor_loads_backbone_and_keeps_fresh_head() {
        let cfg = BackboneConfig::toy();
        let donor = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("donor.ckpt");
        save_checkpoint(&donor, &ckpt).unwrap();
        std::fs::write(dir.path().join("weights.descriptor"), "checkpoint=donor.ckpt\n").unwrap();

        let pretrained_cfg = BackboneConfig {
            pretrained_source: Some(
                dir.path().join("weights.descriptor").display().to_string(),
            ),
            ..cfg.clone()
        };
        let model =
            Model::build(pretrained_cfg, HeadConfig::for_backbone(&cfg), 999).unwrap();
        // Backbone tensors copied from the donor.
        let id_donor = donor.params.id("patch_embed.weight").unwrap();
        let id_model = model.params.id("patch_embed.weight").unwrap();
        assert_eq!(donor.params.slice(id_donor), model.params.slice(id_model));
        // Head freshly initialized, not the donor's.
        let hd = donor.params.id("head.fc1.weight").unwrap();
        let hm = model.params.id("head.fc1.weight").unwrap();
        assert_ne!(donor.params.slice(hd), model.params.slice(hm));
    }

    #[test]
    fn mapping_table_renames_published_tensors() {
        let cfg = BackboneConfig::toy();
        let donor = Model::build(cfg.clone(), HeadConfig::for_backbone(&cfg), 4).unwrap();

        // Fake a published checkpoint by renaming one tensor in the header
        // (same byte length keeps the JSON valid), then map it back.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("published.ckpt");
        save_checkpoint(&donor, &ckpt).unwrap();
        let mut bytes = std::fs::read(&ckpt).unwrap();
        let old = b"patch_embed.weight";
        let new = b"patch.proj.weight!";
        let pos = bytes.windows(old.len()).position(|w| w == old).unwrap();
        bytes[pos..pos + old.len()].copy_from_slice(new);
        std::fs::write(&ckpt, bytes).unwrap();
        std::fs::write(
            dir.path().join("names.map"),
            "patch.proj.weight! patch_embed.weight\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("weights.descriptor"),
            "checkpoint=published.ckpt\nmapping=names.map\n",
        )
        .unwrap();

        let pretrained_cfg = BackboneConfig {
            pretrained_source: Some(
                dir.path().join("weights.descriptor").display().to_string(),
            ),
            ..cfg.clone()
        };
        let model = Model::build(pretrained_cfg, HeadConfig::for_backbone(&cfg), 0).unwrap();
        let id_donor = donor.params.id("patch_embed.weight").unwrap();
        let id_model = model.params.id("patch_embed.weight").unwrap();
        assert_eq!(donor.params.slice(id_donor), model.params.slice(id_model));
    }

    #[test]
    fn shape_mismatch_lists_offending_tensors() {
        let small = BackboneConfig::toy();
        let donor = Model::build(small.clone(), HeadConfig::for_backbone(&small), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("donor.ckpt");
        save_checkpoint(&donor, &ckpt).unwrap();
        std::fs::write(dir.path().join("weights.descriptor"), "checkpoint=donor.ckpt\n").unwrap();

        let bigger = BackboneConfig {
            embed_dim: 64,
            pretrained_source: Some(
                dir.path().join("weights.descriptor").display().to_string(),
            ),
            ..small
        };
        let head = HeadConfig {
            in_dim: 64,
            hidden_dim: 512,
        };
        match Model::build(bigger, head, 0) {
            Err(Error::IncompatibleTensors { tensors }) => {
                assert!(tensors.iter().any(|t| t.contains("patch_embed.weight")));
            }
            other => panic!("expected incompatible tensors, got {other:?}"),
        }
    }
}
