//! Checkpoint directories: one tensor file per parameter plus a JSON
//! manifest recording the parameter inventory and a caller-supplied config
//! block. Save -> load -> save reproduces every file byte for byte.

use super::tensor_file::{read_tensor_file, write_tensor_file};
use crate::error::{Error, Result};
use crate::numerics::ParamSet;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: serde_json::Value,
    parameters: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

/// Write `params` under `dir` (created if absent) as `{name}.tnsr` files
/// plus `manifest.json`. `config` is stored verbatim for the caller to
/// validate on load.
pub fn save_checkpoint(dir: &Path, params: &ParamSet<f32>, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, param) in params.iter() {
        let meta = serde_json::json!({"name": name, "trainable": param.trainable});
        write_tensor_file(dir.join(format!("{name}.tnsr")), &param.tensor, &meta)?;
        entries.push(ParamEntry {
            name: name.clone(),
            trainable: param.trainable,
            shape: param.tensor.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        parameters: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

/// Read a checkpoint directory back into a parameter set plus the stored
/// config block. A manifest entry whose tensor file is missing or whose
/// shape disagrees is an error naming the parameter.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet<f32>, serde_json::Value)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Config(format!(
            "cannot read checkpoint manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.parameters {
        let path = dir.join(format!("{}.tnsr", entry.name));
        if !path.exists() {
            return Err(Error::Config(format!(
                "checkpoint is missing tensor file for parameter {:?} ({})",
                entry.name,
                path.display()
            )));
        }
        let (tensor, _meta) = read_tensor_file(&path)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint parameter {:?} has shape {:?} on disk but the manifest records {:?}",
                entry.name,
                tensor.shape(),
                entry.shape
            )));
        }
        params.insert(&entry.name, tensor, entry.trainable)?;
    }
    Ok((params, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Tensor};

    fn sample_params() -> ParamSet<f32> {
        let mut rng = seeded_rng(5, 0);
        let mut ps = ParamSet::new();
        ps.insert_uniform("enc.w", &[4, 3], 0.5, &mut rng).unwrap();
        ps.insert_zeros("enc.b", &[4], true).unwrap();
        ps.insert("bn.running_mean", Tensor::new(vec![2], vec![0.25, -0.5]).unwrap(), false)
            .unwrap();
        ps
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                )
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let config = serde_json::json!({"hidden_dim": 32, "hops": 2});
        save_checkpoint(dir.path(), &ps, &config).unwrap();
        let (loaded, cfg) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg["hidden_dim"], 32);
        assert_eq!(loaded.len(), ps.len());
        assert_eq!(loaded.max_abs_diff(&ps).unwrap(), 0.0);
        assert!(!loaded.get("bn.running_mean").unwrap().trainable);
        assert!(loaded.get("enc.w").unwrap().trainable);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ps = sample_params();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = serde_json::json!({"k": 1});
        save_checkpoint(d1.path(), &ps, &config).unwrap();
        let (loaded, cfg) = load_checkpoint(d1.path()).unwrap();
        save_checkpoint(d2.path(), &loaded, &cfg).unwrap();
        assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
    }

    #[test]
    fn missing_parameter_file_is_named() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ps, &serde_json::json!({})).unwrap();
        fs::remove_file(dir.path().join("enc.b.tnsr")).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("enc.b"), "{msg}"),
            other => panic!("expected config error naming enc.b, got {other:?}"),
        }
    }

    #[test]
    fn wrong_format_version_is_rejected() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ps, &serde_json::json!({})).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ps = sample_params();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ps, &serde_json::json!({})).unwrap();
        // overwrite one tensor file with a different shape
        let rogue = Tensor::<f32>::zeros(&[7]);
        write_tensor_file(
            dir.path().join("enc.b.tnsr"),
            &rogue,
            &serde_json::json!({"name": "enc.b", "trainable": true}),
        )
        .unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Shape(msg)) => assert!(msg.contains("enc.b"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
