//! Checkpoint persistence. Binary layout, all integers little-endian:
//! magic "ELRT", u32 version, u32 array count, then per array
//! (u32 name length, UTF-8 name, u32 dim count, u64 dims, f32 payload),
//! finally a u32-length-prefixed UTF-8 JSON metadata blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{apply_rank_config, build_from_spec, parse_rank_config, Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::SgdState;

pub const MAGIC: &[u8; 4] = b"ELRT";
pub const VERSION: u32 = 1;

/// Serializable training snapshot: named f32 arrays plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.arrays.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.arrays {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let meta = serde_json::to_string(&ckpt.meta)
        .map_err(|e| Error::Format(format!("metadata serialization: {e}")))?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        arrays.push((name, Tensor::new(shape, data)?));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta)?;
    let meta = serde_json::from_slice(&meta)
        .map_err(|e| Error::Format(format!("metadata JSON: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).unwrap_or(0) != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { arrays, meta })
}

/// Bundle a model plus optimizer state into a checkpoint. `meta` gains the
/// keys needed to rebuild the model skeleton: "spec" and "rank_config".
pub fn checkpoint_from_model<T: Scalar>(
    model: &Model<T>,
    opt: &SgdState<T>,
    rank_config: &str,
    mut meta: serde_json::Value,
) -> Result<Checkpoint> {
    if !meta.is_object() {
        return Err(Error::Config("checkpoint metadata must be a JSON object".into()));
    }
    meta["spec"] = serde_json::to_value(&model.spec)
        .map_err(|e| Error::Format(format!("spec serialization: {e}")))?;
    meta["rank_config"] = serde_json::Value::String(rank_config.to_string());
    let mut arrays: Vec<(String, Tensor<f32>)> = model
        .state_arrays()
        .into_iter()
        .map(|(n, t)| (n, t.cast()))
        .collect();
    let mut opt_names: Vec<&String> = opt.velocity.keys().collect();
    opt_names.sort();
    for name in opt_names {
        arrays.push((format!("opt.{name}"), opt.velocity[name].cast()));
    }
    Ok(Checkpoint { arrays, meta })
}

/// Rebuild the model (and optimizer momentum buffers) from a checkpoint
/// produced by `checkpoint_from_model`.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<f32>, SgdState<f32>)> {
    let spec: ModelSpec = serde_json::from_value(
        ckpt.meta
            .get("spec")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint metadata lacks a model spec".into()))?,
    )
    .map_err(|e| Error::Format(format!("model spec: {e}")))?;
    let rank_text = ckpt
        .meta
        .get("rank_config")
        .and_then(|v| v.as_str())
        .unwrap_or("");
    let mut model: Model<f32> = build_from_spec(&spec, 0)?;
    apply_rank_config(&mut model, &parse_rank_config(rank_text)?, 0)?;
    let mut state = SgdState::default();
    let mut model_arrays = Vec::new();
    for (name, t) in &ckpt.arrays {
        if let Some(pname) = name.strip_prefix("opt.") {
            state.velocity.insert(pname.to_string(), t.clone());
        } else {
            model_arrays.push((name.clone(), t.clone()));
        }
    }
    model.load_state_arrays(&model_arrays)?;
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_small_cnn;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = Checkpoint {
            arrays: vec![
                (
                    "w".into(),
                    Tensor::new(vec![2, 2], vec![1.0f32, -2.5, 3.25e-8, f32::MIN_POSITIVE])
                        .unwrap(),
                ),
                ("b".into(), Tensor::new(vec![1], vec![0.0f32]).unwrap()),
            ],
            meta: json!({"epoch": 3, "seed": 42}),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        // save/load/save is byte-identical
        let path2 = dir.path().join("b.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        let ckpt = Checkpoint {
            arrays: vec![],
            meta: json!({}),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = Checkpoint {
            arrays: vec![("w".into(), Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap())],
            meta: json!({}),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());

        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn model_round_trip_reconstructs_everything() {
        let mut model: Model<f32> = build_small_cnn(0.5, 10, 1, (8, 8), 3).unwrap();
        let rank_text = "conv2 = 2,3\n";
        apply_rank_config(&mut model, &parse_rank_config(rank_text).unwrap(), 4).unwrap();
        let mut opt = SgdState::default();
        opt.velocity
            .insert("fc.w".into(), Tensor::filled(&[10, 8], 0.5f32));
        let ckpt =
            checkpoint_from_model(&model, &opt, rank_text, json!({"epoch": 7})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["epoch"], 7);
        let (model2, opt2) = model_from_checkpoint(&loaded).unwrap();
        assert_eq!(model2, model);
        assert_eq!(opt2.velocity["fc.w"], opt.velocity["fc.w"]);
    }
}
