//! `PPT1` tensor container.
//!
//! Layout: the magic bytes `PPT1`, then for each named tensor
//! `name_len: u32`, UTF-8 name, `rank: u32`, `rank` dims as `u32`, and the
//! values as `f32`. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PPT1";

/// Appends one named tensor record (no magic) to `buf`.
pub fn write_record<T: Scalar>(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

fn take<'a>(cursor: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], String> {
    if cursor.len() < n {
        return Err(format!("truncated while reading {what} ({} of {n} bytes left)", cursor.len()));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

pub fn read_u32(cursor: &mut &[u8], what: &str) -> Result<u32, String> {
    let b = take(cursor, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads one record written by [`write_record`], advancing `cursor`.
pub fn read_record<T: Scalar>(cursor: &mut &[u8]) -> Result<(String, Tensor<T>), String> {
    let len = read_u32(cursor, "name length")? as usize;
    let name = std::str::from_utf8(take(cursor, len, "name")?)
        .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
        .to_string();
    let rank = read_u32(cursor, "rank")? as usize;
    if rank > 16 {
        return Err(format!("implausible rank {rank} for `{name}`"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(cursor, "dimension")? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = take(cursor, n.checked_mul(4).ok_or("tensor too large")?, &format!("values of `{name}`"))?;
    let data = raw
        .chunks_exact(4)
        .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let tensor = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
    Ok((name, tensor))
}

pub fn encode_tensors<T: Scalar>(entries: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    for (name, tensor) in entries {
        write_record(&mut buf, name, tensor);
    }
    buf
}

pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, String> {
    let mut cursor = bytes;
    if take(&mut cursor, 4, "magic")? != MAGIC {
        return Err("bad magic (expected PPT1)".into());
    }
    let mut out = Vec::new();
    while !cursor.is_empty() {
        out.push(read_record(&mut cursor)?);
    }
    Ok(out)
}

pub fn save_tensors<T: Scalar>(path: &Path, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode_tensors(entries))?;
    Ok(())
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path)?;
    decode_tensors(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::from_f64(vec![2], &[1.0, -2.0]).unwrap();
        let bytes = encode_tensors(&[("ab", &t)]);
        let mut expected = b"PPT1".to_vec();
        expected.extend([2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_is_an_error() {
        let t = Tensor::<f32>::ones(vec![3, 3]);
        let bytes = encode_tensors(&[("w", &t)]);
        for cut in [0, 3, 5, 10, bytes.len() - 1] {
            assert!(decode_tensors::<f32>(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppt");
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_tensors::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("short.ppt"));
    }

    proptest! {
        #[test]
        fn f32_roundtrip_is_lossless(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u32>(),
            name in "[a-z.]{1,12}",
        ) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f32>::from_fn(dims.clone(), |i| ((i as u32).wrapping_mul(seed) as f32).sin());
            prop_assume!(n > 0);
            let back = decode_tensors::<f32>(&encode_tensors(&[(name.as_str(), &t)])).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
