//! Model checkpoints: a binary tensor archive plus a JSON metadata sidecar
//! (`<path>.json`). Tensor bytes round-trip exactly.
//!
//! Archive layout, all little-endian:
//! magic `RSEGCKPT`, format version u32, tensor count u32, then per tensor:
//! name length u32, name bytes, ndim u32, dims u64 each, f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, StateTensor};

const MAGIC: &[u8; 8] = b"RSEGCKPT";
const FORMAT_VERSION: u32 = 1;

/// Sidecar metadata: everything needed to rebuild the architecture before
/// loading tensors, plus provenance of the training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub format_version: u32,
}

impl CheckpointMeta {
    pub fn new(spec: ModelSpec, epoch: usize, val_loss: Option<f64>) -> Self {
        CheckpointMeta {
            spec,
            epoch,
            val_loss,
            format_version: FORMAT_VERSION,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn ck_err(section: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        msg: msg.into(),
    }
}

/// Serialize every persistable tensor of `model` to a writer.
pub fn write_archive<W: Write>(model: &mut Model<f32>, mut w: W) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    model.visit_state(&mut |name, slot| {
        let arr = match slot {
            StateTensor::Value(v) => v.clone(),
            StateTensor::Stat(s) => s.clone().into_dyn(),
        };
        tensors.push((name, arr));
    });

    let io = |e: std::io::Error| ck_err("archive", e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, arr) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parse an archive into named tensors.
pub fn read_archive<R: Read>(mut r: R) -> Result<BTreeMap<String, ArrayD<f32>>> {
    fn read_exact(r: &mut impl Read, buf: &mut [u8], section: &str) -> Result<()> {
        r.read_exact(buf)
            .map_err(|e| ck_err(section, format!("unexpected end of archive: {e}")))
    }
    fn read_u32(r: &mut impl Read, section: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, section)?;
        Ok(u32::from_le_bytes(b))
    }

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(ck_err("header", "bad magic; not a checkpoint archive"));
    }
    let version = read_u32(&mut r, "header")?;
    if version != FORMAT_VERSION {
        return Err(ck_err("header", format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "header")?;

    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let section = format!("tensor {i}");
        let name_len = read_u32(&mut r, &section)? as usize;
        if name_len > 4096 {
            return Err(ck_err(&section, "implausible name length"));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &section)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ck_err(&section, "name is not utf-8"))?;

        let ndim = read_u32(&mut r, &name)? as usize;
        if ndim > 8 {
            return Err(ck_err(&name, "implausible rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, &name)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = dims.iter().product();
        if len > 256 << 20 {
            return Err(ck_err(&name, "implausible tensor size"));
        }
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, &name)?;
            *v = f32::from_le_bytes(b);
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| ck_err(&name, e.to_string()))?;
        tensors.insert(name, arr);
    }
    Ok(tensors)
}

/// Write the archive and its metadata sidecar.
pub fn save_checkpoint(model: &mut Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_archive(model, std::io::BufWriter::new(file))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| ck_err("metadata", e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Rebuild the model described by the sidecar and load its tensors. Every
/// archive tensor must match a model slot in name and shape, and vice versa.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let side = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| ck_err("metadata", e.to_string()))?;

    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tensors = read_archive(std::io::BufReader::new(file))?;

    let mut model = Model::build(&meta.spec, 0)?;
    let mut import_err: Option<Error> = None;
    model.visit_state(&mut |name, slot| {
        if import_err.is_some() {
            return;
        }
        let Some(arr) = tensors.remove(&name) else {
            import_err = Some(ck_err(&name, "tensor missing from archive"));
            return;
        };
        match slot {
            StateTensor::Value(v) => {
                if v.shape() != arr.shape() {
                    import_err = Some(ck_err(
                        &name,
                        format!(
                            "shape mismatch: model {:?} vs archive {:?}",
                            v.shape(),
                            arr.shape()
                        ),
                    ));
                    return;
                }
                v.assign(&arr);
            }
            StateTensor::Stat(s) => {
                if arr.ndim() != 1 || arr.len() != s.len() {
                    import_err = Some(ck_err(
                        &name,
                        format!(
                            "shape mismatch: model [{}] vs archive {:?}",
                            s.len(),
                            arr.shape()
                        ),
                    ));
                    return;
                }
                s.assign(&arr.into_dimensionality::<ndarray::Ix1>().expect("1-d"));
            }
        }
    });
    if let Some(e) = import_err {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ck_err(extra, "archive holds a tensor the model does not"));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, Variant};
    use crate::training::StateSnapshot;
    use ndarray::Array4;
    use tempfile::TempDir;

    fn tiny_spec(variant: Variant) -> ModelSpec {
        let mut spec = ModelSpec::for_variant(variant);
        spec.first_layer_channels = 4;
        spec
    }

    #[test]
    fn round_trip_is_bit_exact_and_forward_identical() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = tiny_spec(Variant::UnetDilated);
        let mut model = Model::<f32>::build(&spec, 77).unwrap();

        let meta = CheckpointMeta::new(spec.clone(), 3, Some(0.123));
        save_checkpoint(&mut model, &meta, &path).unwrap();
        let (mut loaded, meta2) = load_checkpoint(&path).unwrap();

        assert_eq!(meta2.epoch, 3);
        assert_eq!(meta2.spec.variant, Variant::UnetDilated);
        assert_eq!(meta2.spec.dilations, vec![1, 2, 4, 8]);

        let b1 = StateSnapshot::capture(&mut model).to_bytes();
        let b2 = StateSnapshot::capture(&mut loaded).to_bytes();
        assert_eq!(b1, b2, "tensor bytes must round-trip exactly");

        let x = Array4::<f32>::from_elem((1, 3, 32, 32), 0.4);
        let (Model::Unet(a), Model::Unet(b)) = (&model, &loaded) else {
            unreachable!()
        };
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    }

    #[test]
    fn mismatched_metadata_fails_with_section_name() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec32 = tiny_spec(Variant::Unet32);
        let mut model = Model::<f32>::build(&spec32, 1).unwrap();
        let meta = CheckpointMeta::new(spec32, 0, None);
        save_checkpoint(&mut model, &meta, &path).unwrap();

        // Rewrite the sidecar to claim a different architecture.
        let mut spec64 = tiny_spec(Variant::Unet64);
        spec64.first_layer_channels = 8;
        let forged = CheckpointMeta::new(spec64, 0, None);
        std::fs::write(
            sidecar_path(&path),
            serde_json::to_string(&forged).unwrap(),
        )
        .unwrap();

        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("forged metadata must not load"),
        };
        assert!(
            err.to_string().contains("shape mismatch"),
            "expected shape mismatch, got: {err}"
        );
    }

    #[test]
    fn truncated_archive_names_failed_section() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = tiny_spec(Variant::Unet32);
        let mut model = Model::<f32>::build(&spec, 1).unwrap();
        let meta = CheckpointMeta::new(spec, 0, None);
        save_checkpoint(&mut model, &meta, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("truncated archive must not load"),
        };
        let msg = err.to_string();
        assert!(msg.contains("checkpoint error"), "{msg}");
        assert!(msg.contains("unexpected end"), "{msg}");
    }

    #[test]
    fn sliding_model_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("win.ckpt");
        let spec = ModelSpec::for_variant(Variant::SlidingWindow);
        let mut model = Model::<f32>::build(&spec, 5).unwrap();
        let meta = CheckpointMeta::new(spec, 1, Some(0.5));
        save_checkpoint(&mut model, &meta, &path).unwrap();
        let (mut loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(
            StateSnapshot::capture(&mut model).to_bytes(),
            StateSnapshot::capture(&mut loaded).to_bytes()
        );
    }
}
