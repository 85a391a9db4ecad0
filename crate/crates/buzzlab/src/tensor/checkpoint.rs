//! Parameter checkpoint file: little-endian binary, magic "BZW1", then
//! per-tensor records (rank: u32, dims: u32 each, payload: f64 each),
//! tensors in declaration order.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const BZW_MAGIC: &[u8; 4] = b"BZW1";

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + tensors.iter().map(|t| t.len() * 8 + 16).sum::<usize>());
    buf.extend_from_slice(BZW_MAGIC);
    for t in tensors {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != BZW_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing BZW1 magic".to_string(),
        });
    }
    let mut off = 4;
    let mut out = Vec::new();
    while off < bytes.len() {
        let rank = read_u32(&bytes, &mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&bytes, &mut off)? as usize);
        }
        let n: usize = shape.iter().product();
        if off + n * 8 > bytes.len() {
            return Err(Error::Parse {
                offset: off,
                message: format!("truncated payload, expected {} floats", n),
            });
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[off..off + 8]);
            data.push(f64::from_le_bytes(b));
            off += 8;
        }
        out.push(Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: off,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], off: &mut usize) -> Result<u32> {
    if *off + 4 > bytes.len() {
        return Err(Error::Parse {
            offset: *off,
            message: "truncated header".to_string(),
        });
    }
    let mut b = [0u8; 4];
    b.copy_from_slice(&bytes[*off..*off + 4]);
    *off += 4;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_order_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bzw");
        let tensors = vec![
            Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 9.9]).unwrap(),
            Tensor::scalar(-1.25),
        ];
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back, tensors);
    }

    #[test]
    fn bad_magic_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bzw");
        std::fs::write(&path, b"NOPE").unwrap();
        match read_tensors(&path) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at 0, got {:?}", other.map(|v| v.len())),
        }
    }
}
