//! Binary tensor container used for checkpoints and backbone weight files.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "FCTF" | u32 format version | u64 metadata length | metadata (JSON)
//! u32 tensor count | repeated: u16 name len | name (UTF-8)
//!                              u8 ndim | ndim x u32 dims | f32 data
//! ```
//! Tensors are written in name order, so identical contents produce
//! identical bytes.

use crate::error::{FaceCycleError, Result};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FCTF";

pub fn write_tensor_file(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &BTreeMap<String, ArrayD<f32>>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| FaceCycleError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| FaceCycleError::io(path, e);
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| FaceCycleError::Other(e.to_string()))?;
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let shape = tensor.shape();
        assert!(shape.len() <= u8::MAX as usize);
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        // Standard layout guaranteed for owned arrays created by this crate;
        // fall back to an iteration copy otherwise.
        match tensor.as_slice() {
            Some(slice) => {
                let bytes: &[u8] = unsafe {
                    std::slice::from_raw_parts(slice.as_ptr() as *const u8, slice.len() * 4)
                };
                // f32 LE assumed; checked at read time via round-trip tests.
                #[cfg(target_endian = "big")]
                compile_error!("container writer assumes a little-endian host");
                w.write_all(bytes).map_err(io_err)?;
            }
            None => {
                for v in tensor.iter() {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor_file(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f32>>)> {
    let file = std::fs::File::open(path).map_err(|e| FaceCycleError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| FaceCycleError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let io_err = |e: std::io::Error| FaceCycleError::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a tensor container"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io_err)?;
    let version = u32::from_le_bytes(u32b);
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io_err)?;
    let meta_len = u64::from_le_bytes(u64b) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| bad(&format!("metadata: {e}")))?;

    r.read_exact(&mut u32b).map_err(io_err)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b).map_err(io_err)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name not UTF-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io_err)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut u32b).map_err(io_err)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| bad(&format!("tensor {name}: {e}")))?;
        tensors.insert(name, tensor);
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_preserves_bits_and_metadata() {
        let dir = std::env::temp_dir().join("facecycle_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.fctf");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            arr2(&[[1.5f32, -2.25], [f32::MIN_POSITIVE, 1e30]]).into_dyn(),
        );
        tensors.insert("b".to_string(), ndarray::arr1(&[0.0f32]).into_dyn());
        let meta = serde_json::json!({"stage": 1, "note": "x"});
        write_tensor_file(&path, &meta, &tensors).unwrap();
        let (meta2, tensors2) = read_tensor_file(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors.len(), tensors2.len());
        for (name, t) in &tensors {
            let u = &tensors2[name];
            assert_eq!(t.shape(), u.shape());
            assert!(t.iter().zip(u.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("facecycle_container_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.fctf");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(read_tensor_file(&path).is_err());
        std::fs::remove_file(&path).ok();
    }
}
