//! Checkpoint container: a directory holding `manifest.json` (structure,
//! kind, seed, format version, tensor index) plus one raw blob per weight
//! tensor, little-endian IEEE-754 f64 in row-major order. Round-trips are
//! bit-exact. Writes go to a temporary sibling directory that is renamed into
//! place once complete.
//!
//! Serialization walks the model's JSON tree and hoists every tensor out into
//! a blob file, leaving `{"tensor": index}` references behind; loading puts
//! them back. This keeps the manifest readable while the numbers stay binary.

use crate::error::{Error, Result};
use crate::grad::FeedbackWeights;
use crate::optim::OptimizerState;
use crate::recirc::CircularAutoencoder;
use crate::stack::TourbillonModel;
use crate::twin::TwinModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

fn is_tensor_value(obj: &Map<String, Value>) -> bool {
    obj.len() == 2 && obj.contains_key("shape") && obj.contains_key("data")
}

fn hoist(value: &mut Value, entries: &mut Vec<TensorEntry>, blobs: &mut Vec<Vec<u8>>) {
    match value {
        Value::Object(obj) if is_tensor_value(obj) => {
            let shape: Vec<usize> = obj["shape"]
                .as_array()
                .expect("tensor shape")
                .iter()
                .map(|v| v.as_u64().expect("dim") as usize)
                .collect();
            let data: Vec<f64> = obj["data"]
                .as_array()
                .expect("tensor data")
                .iter()
                .map(|v| v.as_f64().expect("f64"))
                .collect();
            let mut bytes = Vec::with_capacity(data.len() * 8);
            for v in &data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let index = entries.len();
            entries.push(TensorEntry {
                file: format!("t{index:04}.bin"),
                shape,
            });
            blobs.push(bytes);
            *value = json!({ "tensor": index });
        }
        Value::Object(obj) => {
            for (_, v) in obj.iter_mut() {
                hoist(v, entries, blobs);
            }
        }
        Value::Array(arr) => {
            for v in arr.iter_mut() {
                hoist(v, entries, blobs);
            }
        }
        _ => {}
    }
}

fn inline(value: &mut Value, entries: &[TensorEntry], dir: &Path) -> Result<()> {
    match value {
        Value::Object(obj) if obj.len() == 1 && obj.contains_key("tensor") => {
            let index = obj["tensor"]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint("bad tensor reference".into()))?
                as usize;
            let entry = entries
                .get(index)
                .ok_or_else(|| Error::Checkpoint(format!("tensor index {index} out of range")))?;
            let bytes = std::fs::read(dir.join(&entry.file))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.file)))?;
            let expected: usize = entry.shape.iter().product::<usize>() * 8;
            if bytes.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {expected} bytes, got {}",
                    entry.file,
                    bytes.len()
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *value = json!({ "shape": entry.shape, "data": data });
        }
        Value::Object(obj) => {
            for (_, v) in obj.iter_mut() {
                inline(v, entries, dir)?;
            }
        }
        Value::Array(arr) => {
            for v in arr.iter_mut() {
                inline(v, entries, dir)?;
            }
        }
        _ => {}
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    seed: Option<u64>,
    tensors: Vec<TensorEntry>,
    model: Value,
}

/// Write a checkpoint directory for any serializable model wrapper.
pub fn save<T: Serialize>(dir: &Path, kind: &str, seed: Option<u64>, model: &T) -> Result<()> {
    let mut tree = serde_json::to_value(model)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    hoist(&mut tree, &mut entries, &mut blobs);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        seed,
        tensors: entries,
        model: tree,
    };

    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp{}",
        dir.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
        std::process::id()
    ));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    for (entry, bytes) in manifest.tensors.iter().zip(&blobs) {
        std::fs::write(tmp.join(&entry.file), bytes)?;
    }
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    std::fs::write(tmp.join("manifest.json"), manifest_json)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// The `kind` string recorded in a checkpoint directory.
pub fn peek_kind(dir: &Path) -> Result<String> {
    Ok(read_manifest(dir)?.kind)
}

/// Load a checkpoint previously written by `save` with the same kind.
pub fn load<T: DeserializeOwned>(dir: &Path, expect_kind: &str) -> Result<(T, Option<u64>)> {
    let mut manifest = read_manifest(dir)?;
    if manifest.kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {:?}, expected {:?}",
            manifest.kind, expect_kind
        )));
    }
    inline(&mut manifest.model, &manifest.tensors, dir)?;
    let model = serde_json::from_value(manifest.model)
        .map_err(|e| Error::Checkpoint(format!("decode: {e}")))?;
    Ok((model, manifest.seed))
}

pub const KIND_CAE: &str = "cae";
pub const KIND_TOURBILLON: &str = "tourbillon";
pub const KIND_TWIN: &str = "twin";

/// A circular autoencoder with its training leftovers, enough to resume.
#[derive(Serialize, Deserialize)]
pub struct CaeCheckpoint {
    pub cae: CircularAutoencoder,
    pub optimizer: Option<OptimizerState>,
    pub feedback: Option<FeedbackWeights>,
}

/// A stack/head model; the head's feedback matrix lives inside the head.
#[derive(Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: TourbillonModel,
    pub head_optimizer: Option<OptimizerState>,
    pub stage_optimizers: Option<Vec<Option<OptimizerState>>>,
}

/// A tourbillonized twin, with its source architecture for provenance.
#[derive(Serialize, Deserialize)]
pub struct TwinCheckpoint {
    pub twin: TwinModel,
    pub head_optimizer: Option<OptimizerState>,
    pub stage_optimizers: Option<Vec<Option<OptimizerState>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Activation, InitScheme, Layer, LayerSpec};
    use crate::rng::Rng;
    use crate::stack::{Head, Stage};
    use crate::tensor::Tensor;

    fn sample_cae(rng: &mut Rng) -> CircularAutoencoder {
        CircularAutoencoder::new(
            vec![
                Layer::new(LayerSpec::dense(6, 3), InitScheme::Glorot, rng),
                Layer::fixed(LayerSpec::activation(Activation::Tanh)),
            ],
            vec![
                Layer::new(LayerSpec::dense(3, 6), InitScheme::Glorot, rng),
                Layer::fixed(LayerSpec::activation(Activation::Logistic)),
            ],
            &[6],
        )
        .unwrap()
    }

    #[test]
    fn cae_roundtrip_bit_exact() {
        let mut rng = Rng::new(7);
        let cae = sample_cae(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(
            &path,
            KIND_CAE,
            Some(7),
            &CaeCheckpoint {
                cae: cae.clone(),
                optimizer: None,
                feedback: None,
            },
        )
        .unwrap();
        assert!(path.join("manifest.json").exists());
        assert!(path.join("t0000.bin").exists());
        let (loaded, seed): (CaeCheckpoint, _) = load(&path, KIND_CAE).unwrap();
        assert_eq!(seed, Some(7));
        for (a, b) in cae.network.layers.iter().zip(&loaded.cae.network.layers) {
            assert_eq!(a.spec, b.spec);
            assert_eq!(
                a.weights.as_ref().map(|w| w.data()),
                b.weights.as_ref().map(|w| w.data())
            );
            assert_eq!(
                a.bias.as_ref().map(|w| w.data()),
                b.bias.as_ref().map(|w| w.data())
            );
        }
    }

    #[test]
    fn blob_bytes_are_little_endian_f64() {
        let mut rng = Rng::new(9);
        let mut cae = sample_cae(&mut rng);
        // plant a recognizable value at the first weight slot
        cae.network.layers[0].weights.as_mut().unwrap().data_mut()[0] = 1.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(
            &path,
            KIND_CAE,
            None,
            &CaeCheckpoint {
                cae,
                optimizer: None,
                feedback: None,
            },
        )
        .unwrap();
        // locate the (3, 6)-shaped weight blob through the manifest
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.join("manifest.json")).unwrap())
                .unwrap();
        let entry = manifest["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .find(|t| t["shape"] == serde_json::json!([3, 6]))
            .unwrap();
        let bytes = std::fs::read(path.join(entry["file"].as_str().unwrap())).unwrap();
        assert_eq!(&bytes[..8], &1.5f64.to_le_bytes());
    }

    #[test]
    fn wrong_kind_rejected() {
        let mut rng = Rng::new(11);
        let cae = sample_cae(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save(
            &path,
            KIND_CAE,
            None,
            &CaeCheckpoint {
                cae,
                optimizer: None,
                feedback: None,
            },
        )
        .unwrap();
        assert_eq!(peek_kind(&path).unwrap(), "cae");
        let res: Result<(ModelCheckpoint, _)> = load(&path, KIND_TOURBILLON);
        assert!(res.is_err());
    }

    #[test]
    fn tourbillon_roundtrip_with_head_feedback() {
        let mut rng = Rng::new(13);
        let model = TourbillonModel::new(
            vec![Stage::Cae(sample_cae(&mut rng)), Stage::Fixed(Layer::fixed(
                LayerSpec::Reshape { shape: vec![3] },
            ))],
            Some(Head::new(3, 2, &mut rng)),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        save(
            &path,
            KIND_TOURBILLON,
            Some(1),
            &ModelCheckpoint {
                model: model.clone(),
                head_optimizer: None,
                stage_optimizers: None,
            },
        )
        .unwrap();
        let (loaded, _): (ModelCheckpoint, _) = load(&path, KIND_TOURBILLON).unwrap();
        let a = model.head.as_ref().unwrap();
        let b = loaded.model.head.as_ref().unwrap();
        assert_eq!(a.feedback.data(), b.feedback.data());
        // loaded model still predicts
        let x = Tensor::zeros(&[1, 6]);
        assert_eq!(loaded.model.predict(&x).unwrap().sample_len(), 2);
    }

    #[test]
    fn save_replaces_existing() {
        let mut rng = Rng::new(17);
        let cae1 = sample_cae(&mut rng);
        let cae2 = sample_cae(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        for cae in [&cae1, &cae2] {
            save(
                &path,
                KIND_CAE,
                None,
                &CaeCheckpoint {
                    cae: cae.clone(),
                    optimizer: None,
                    feedback: None,
                },
            )
            .unwrap();
        }
        let (loaded, _): (CaeCheckpoint, _) = load(&path, KIND_CAE).unwrap();
        assert_eq!(
            loaded.cae.network.layers[0].weights.as_ref().unwrap().data(),
            cae2.network.layers[0].weights.as_ref().unwrap().data()
        );
    }
}
