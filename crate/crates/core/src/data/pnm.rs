//! Binary Netpbm: P6 (8-bit RGB) frames and P5 (8-bit gray) masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DoraError, Result};
use crate::frame::Frame;

fn corrupt(path: &Path, reason: impl Into<String>) -> DoraError {
    DoraError::Corrupt { path: path.to_path_buf(), reason: reason.into() }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(corrupt(path, "file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "expected a number in the header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt(path, "missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(corrupt(path, format!("maxval {maxval}; only 8-bit (255) is supported")));
    }
    Ok(Header { magic, width, height, data_offset: pos + 1 })
}

/// Decodes a P6 or P5 image into a frame with 3 or 1 channels.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Frame> {
    let h = parse_header(bytes, path)?;
    let channels = match &h.magic {
        b"P6" => 3,
        b"P5" => 1,
        other => return Err(corrupt(path, format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let len = h.width * h.height * channels;
    let payload = bytes
        .get(h.data_offset..h.data_offset + len)
        .ok_or_else(|| corrupt(path, format!("expected {len} pixel bytes")))?;
    Frame::new(h.height, h.width, channels, payload.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 for RGB frames, P5 for single-channel frames.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let magic = if frame.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn read(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| DoraError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, frame: &Frame) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| DoraError::io(path, e))?;
    f.write_all(&encode(frame)).map_err(|e| DoraError::io(path, e))
}

/// Reads an RGB frame; grayscale files are rejected.
pub fn read_ppm(path: &Path) -> Result<Frame> {
    let f = read(path)?;
    if f.channels() != 3 {
        return Err(corrupt(path, "expected a binary RGB (P6) image"));
    }
    Ok(f)
}

pub fn read_pgm(path: &Path) -> Result<Frame> {
    let f = read(path)?;
    if f.channels() != 1 {
        return Err(corrupt(path, "expected a binary grayscale (P5) image"));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let f = decode(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((f.height(), f.width(), f.channels()), (1, 2, 1));
        assert_eq!(f.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_files() {
        let p = Path::new("bad");
        assert!(decode(b"P3\n1 1\n255\n", p).is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x00", p).is_err());
        assert!(decode(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", p).is_err());
        assert!(decode(b"P6\n1", p).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(h in 1usize..6, w in 1usize..6, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let bytes: Vec<u8> = (0..h * w * c).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 3) as u8).collect();
            let f = Frame::new(h, w, c, bytes.iter().map(|&b| b as f32 / 255.0).collect()).unwrap();
            let enc = encode(&f);
            prop_assert_eq!(&enc[enc.len() - bytes.len()..], bytes.as_slice());
            prop_assert_eq!(decode(&enc, Path::new("t")).unwrap(), f);
        }
    }
}
