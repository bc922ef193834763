//! Versioned checkpoint container.
//!
//! Layout: magic `PNCP`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then raw little-endian
//! tensor data. The header records the model spec, training metadata, frozen
//! groups, and an index of `(name, group, kind, shape, offset, len)` entries
//! pointing into the data section. Loading rebuilds the model from its spec
//! (which reproduces parameter registration order and names) and then
//! overwrites every tensor by name, so files remain readable as long as the
//! header version is supported.

use crate::error::{Error, Result};
use crate::model::{Model, ModelMeta, ModelSpec, NovelHead};
use crate::nn::{ParamGroup, ParamKind};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PNCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct NovelHeadEntry {
    class_ids: Vec<u32>,
    weight_offset: u64,
    bias_offset: u64,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    spec: ModelSpec,
    meta: ModelMeta,
    frozen: Vec<ParamGroup>,
    tensors: Vec<TensorEntry>,
    novel_head: Option<NovelHeadEntry>,
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut data: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = data.len() as u64;
        for &v in p.value.iter() {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            kind: p.kind,
            shape: p.value.shape().to_vec(),
            offset,
            len: p.value.len() as u64,
        });
    }
    let novel_head = model.novel_head.as_ref().map(|nh| {
        let weight_offset = data.len() as u64;
        for &v in nh.weight.iter() {
            v.write_le(&mut data);
        }
        let bias_offset = data.len() as u64;
        for &v in nh.bias.iter() {
            v.write_le(&mut data);
        }
        NovelHeadEntry {
            class_ids: nh.class_ids.clone(),
            weight_offset,
            bias_offset,
            rows: nh.weight.nrows(),
            cols: nh.weight.ncols(),
        }
    });
    let header = Header {
        dtype: T::dtype_name().to_string(),
        spec: model.spec.clone(),
        meta: model.meta.clone(),
        frozen: model.store.frozen_groups().collect(),
        tensors,
        novel_head,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&data)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let mut dword = [0u8; 8];
    file.read_exact(&mut dword)?;
    let header_len = u64::from_le_bytes(dword) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != T::dtype_name() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, expected {}",
            header.dtype,
            T::dtype_name()
        )));
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let mut model = Model::<T>::new(header.spec.clone(), header.meta.seed)?;
    let mut by_name: BTreeMap<String, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.clone(), t)).collect();
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let entry = by_name.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
        })?;
        let value = read_tensor::<T>(&data, entry)?;
        if value.shape() != model.store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' shape {:?} does not match model {:?}",
                value.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = value;
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unknown tensor '{name}'"
        )));
    }
    for group in header.frozen {
        model.store.freeze(group);
    }
    model.meta = header.meta;
    if let Some(nh) = header.novel_head {
        let w = read_raw::<T>(&data, nh.weight_offset, (nh.rows * nh.cols) as u64)?;
        let b = read_raw::<T>(&data, nh.bias_offset, nh.rows as u64)?;
        model.novel_head = Some(NovelHead {
            class_ids: nh.class_ids,
            weight: Array2::from_shape_vec((nh.rows, nh.cols), w)
                .map_err(|e| Error::Checkpoint(format!("novel head: {e}")))?,
            bias: Array1::from_vec(b),
        });
    }
    Ok(model)
}

fn read_raw<T: Scalar>(data: &[u8], offset: u64, len: u64) -> Result<Vec<T>> {
    let start = offset as usize * T::BYTE_WIDTH / T::BYTE_WIDTH;
    let _ = start;
    let begin = offset as usize;
    let end = begin + len as usize * T::BYTE_WIDTH;
    if end > data.len() {
        return Err(Error::Checkpoint("tensor data out of bounds".into()));
    }
    Ok(data[begin..end]
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect())
}

fn read_tensor<T: Scalar>(data: &[u8], entry: &TensorEntry) -> Result<ArrayD<T>> {
    let raw = read_raw::<T>(data, entry.offset, entry.len)?;
    ArrayD::from_shape_vec(IxDyn(&entry.shape), raw)
        .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))
}

/// Byte-level equality of one parameter group across two checkpoint files;
/// the probe used by the freezing audit.
pub fn group_bytes_equal(a: &Path, b: &Path, group: ParamGroup) -> Result<bool> {
    let ga = read_group_bytes(a, group)?;
    let gb = read_group_bytes(b, group)?;
    Ok(ga == gb)
}

fn read_group_bytes(path: &Path, group: ParamGroup) -> Result<Vec<(String, Vec<u8>)>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::Checkpoint(format!("unknown dtype {other}")));
        }
    };
    let data = &bytes[16 + header_len..];
    let mut out = Vec::new();
    for t in header.tensors.iter().filter(|t| t.group == group) {
        let begin = t.offset as usize;
        let end = begin + t.len as usize * width;
        out.push((t.name.clone(), data[begin..end].to_vec()));
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::{Algorithm, Aggregator};

    fn spec() -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::convnet4(),
            algorithm: Algorithm::Transfer,
            aggregator: Aggregator::Pose,
            num_parts: 5,
            num_base_classes: 7,
            upn_temperature: 1.0,
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = Model::<f32>::new(spec(), 123).unwrap();
        model.meta.base_trained = true;
        model.freeze_pose_head();
        model.novel_head = Some(NovelHead {
            class_ids: vec![3, 7],
            weight: Array2::from_elem((2, 320), 0.25),
            bias: Array1::from_vec(vec![0.1, -0.2]),
        });
        save(&model, &path).unwrap();
        let back: Model<f32> = load(&path).unwrap();
        assert!(back.meta.pose_frozen);
        assert!(back.meta.base_trained);
        assert!(back.store.is_frozen(ParamGroup::PoseHead));
        for (id, p) in model.store.iter() {
            assert_eq!(p.value, back.store.value(id).clone(), "{}", p.name);
        }
        let nh = back.novel_head.unwrap();
        assert_eq!(nh.class_ids, vec![3, 7]);
        assert_eq!(nh.weight[(1, 5)], 0.25);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::<f32>::new(spec(), 5).unwrap();
        save(&model, &path).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn non_checkpoint_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load::<f32>(&path).is_err());
        assert!(load::<f32>(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn group_bytes_probe_detects_change() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let p3 = dir.path().join("c.ckpt");
        let mut model = Model::<f32>::new(spec(), 9).unwrap();
        save(&model, &p1).unwrap();
        save(&model, &p2).unwrap();
        // mutate one pose-head parameter
        let target = model
            .store
            .iter()
            .find(|(_, p)| p.group == ParamGroup::PoseHead)
            .map(|(id, _)| id)
            .unwrap();
        *model.store.value_mut(target).iter_mut().next().unwrap() += 1.0;
        save(&model, &p3).unwrap();
        assert!(group_bytes_equal(&p1, &p2, ParamGroup::PoseHead).unwrap());
        assert!(!group_bytes_equal(&p1, &p3, ParamGroup::PoseHead).unwrap());
        assert!(group_bytes_equal(&p1, &p3, ParamGroup::Backbone).unwrap());
    }
}
