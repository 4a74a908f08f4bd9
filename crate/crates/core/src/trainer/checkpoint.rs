//! Binary checkpoints.
//!
//! Layout, all little-endian: `b"DORA"`, `u16` version, `u32` tensor count;
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` × `u64`
//! dims and the `f32` payload; finally a CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{DoraError, Result};

pub const MAGIC: &[u8; 4] = b"DORA";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { name: name.into(), dims, data }
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(self.path, "truncated tensor table"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn corrupt(path: &Path, reason: &str) -> DoraError {
    DoraError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(corrupt(path, "file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4, path };
    let version = r.u16()?;
    if version != VERSION {
        return Err(DoraError::Version { found: version, expected: VERSION });
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(path, "tensor size overflows"))?;
        let data = r.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(corrupt(path, "trailing bytes after tensor table"));
    }
    Ok(tensors)
}

pub fn write(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| DoraError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| DoraError::io(path, e))?;
    decode(&bytes, path)
}

/// A `u64` as four exact 16-bit chunks, low first.
pub fn u64_tensor(name: &str, v: u64) -> Tensor {
    Tensor::new(name, vec![4], (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect())
}

pub fn tensor_u64(t: &Tensor, path: &Path) -> Result<u64> {
    if t.data.len() != 4 || t.data.iter().any(|v| v.fract() != 0.0 || !(0.0..65536.0).contains(v)) {
        return Err(corrupt(path, &format!("{} is not an encoded integer", t.name)));
    }
    Ok(t.data.iter().enumerate().map(|(i, &v)| (v as u64) << (16 * i)).sum())
}

pub fn bytes_tensor(name: &str, bytes: &[u8]) -> Tensor {
    Tensor::new(name, vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect())
}

pub fn tensor_bytes(t: &Tensor, path: &Path) -> Result<Vec<u8>> {
    t.data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(corrupt(path, &format!("{} is not a byte string", t.name)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::new("a.w", vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]),
            Tensor::new("meta", vec![0], vec![]),
            u64_tensor("step", 0xDEAD_BEEF_1234_5678),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let back = decode(&encode(&t), Path::new("x")).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
        assert_eq!(tensor_u64(&back[2], Path::new("x")).unwrap(), 0xDEAD_BEEF_1234_5678);
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let bytes = encode(&sample());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], Path::new("x")), Err(DoraError::Corrupt { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(decode(&flipped, Path::new("x")), Err(DoraError::Corrupt { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]).to_le_bytes();
        bytes[body..].copy_from_slice(&crc);
        assert!(matches!(decode(&bytes, Path::new("x")), Err(DoraError::Version { found: 9, expected: VERSION })));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64), v in any::<u64>()) {
            let t = bytes_tensor("b", &bytes);
            prop_assert_eq!(tensor_bytes(&t, Path::new("x")).unwrap(), bytes);
            prop_assert_eq!(tensor_u64(&u64_tensor("v", v), Path::new("x")).unwrap(), v);
        }
    }
}
