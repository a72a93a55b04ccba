//! Detection files.
//!
//! Layout, little-endian: magic `ZPDT`, u16 version, u32 height, u32 width,
//! u32 M, u32 k, u8 kind (0 soft, 1 binary), u32 N, then per keypoint
//! `x: f32, y: f32, score: f32` followed by `M` f32 values (soft) or `M / 8`
//! packed bytes (binary, bit `j` of byte `i` is descriptor bit `8i + j`).

use std::path::Path;

use crate::error::IoFormatError;
use crate::imageio::write_atomic;
use crate::matcher::DescriptorSet;
use crate::netgraph::decode::{DescriptorPayload, Detection, Keypoint};

pub const DETECTION_MAGIC: [u8; 4] = *b"ZPDT";
pub const DETECTION_VERSION: u16 = 1;

pub fn encode_detection(det: &Detection) -> Result<Vec<u8>, String> {
    let m = det.descriptor_dim;
    let n = det.keypoints.len();
    let mut out = Vec::with_capacity(27 + n * (12 + 4 * m));
    out.extend_from_slice(&DETECTION_MAGIC);
    out.extend_from_slice(&DETECTION_VERSION.to_le_bytes());
    for v in [det.height, det.width, m, det.k] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let kind = match &det.descriptors {
        DescriptorPayload::Soft(v) => {
            if v.len() != n * m {
                return Err(format!("{} soft values for {n} keypoints of dimension {m}", v.len()));
            }
            0u8
        }
        DescriptorPayload::Binary(set) => {
            if m % 8 != 0 {
                return Err(format!("binary descriptors need M divisible by 8, got {m}"));
            }
            if set.len() != n || set.dim() != m {
                return Err(format!("{} binary descriptors of dimension {} for {n} keypoints of dimension {m}", set.len(), set.dim()));
            }
            1u8
        }
    };
    out.push(kind);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for (i, kp) in det.keypoints.iter().enumerate() {
        for v in [kp.x, kp.y, kp.score] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &det.descriptors {
            DescriptorPayload::Soft(v) => {
                for x in &v[i * m..(i + 1) * m] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            DescriptorPayload::Binary(set) => out.extend_from_slice(&set.row_bytes(i)),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at offset {} (needed {n} more bytes)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_detection(bytes: &[u8]) -> Result<Detection, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != DETECTION_MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"ZPDT\""));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != DETECTION_VERSION {
        return Err(format!("unsupported detection version {version}"));
    }
    let height = c.u32()? as usize;
    let width = c.u32()? as usize;
    let m = c.u32()? as usize;
    let k = c.u32()? as usize;
    let kind = c.take(1)?[0];
    let n = c.u32()? as usize;
    if m == 0 {
        return Err("descriptor dimension is zero".into());
    }
    let per = match kind {
        0 => 12 + 4 * m,
        1 if m % 8 == 0 => 12 + m / 8,
        1 => return Err(format!("binary descriptors need M divisible by 8, got {m}")),
        _ => return Err(format!("unknown descriptor kind {kind}")),
    };
    if (bytes.len() - c.pos) as u64 != n as u64 * per as u64 {
        return Err(format!(
            "expected {} payload bytes for {n} keypoints, found {}",
            n as u64 * per as u64,
            bytes.len() - c.pos
        ));
    }
    let mut keypoints = Vec::with_capacity(n);
    let mut soft = Vec::new();
    let mut packed = Vec::new();
    for i in 0..n {
        let (x, y, score) = (c.f32()?, c.f32()?, c.f32()?);
        keypoints.push(Keypoint { x, y, score, cell: i });
        if kind == 0 {
            for _ in 0..m {
                soft.push(c.f32()?);
            }
        } else {
            packed.extend_from_slice(c.take(m / 8)?);
        }
    }
    let descriptors = if kind == 0 {
        DescriptorPayload::Soft(soft)
    } else if n == 0 {
        DescriptorPayload::Binary(DescriptorSet::empty(m).map_err(|e| e.to_string())?)
    } else {
        DescriptorPayload::Binary(DescriptorSet::from_bytes(m, &packed).map_err(|e| e.to_string())?)
    };
    Ok(Detection {
        width,
        height,
        descriptor_dim: m,
        k,
        keypoints,
        descriptors,
    })
}

pub fn write_detection(path: &Path, det: &Detection) -> Result<(), IoFormatError> {
    let bytes = encode_detection(det).map_err(|m| IoFormatError::format(path, m))?;
    write_atomic(path, &bytes).map_err(|e| IoFormatError::io(path, e))
}

pub fn read_detection(path: &Path) -> Result<Detection, IoFormatError> {
    let bytes = std::fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    decode_detection(&bytes).map_err(|m| IoFormatError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(binary: bool) -> Detection {
        let keypoints = vec![
            Keypoint { x: 1.5, y: 2.25, score: 0.9, cell: 0 },
            Keypoint { x: 10.0, y: 0.0, score: 0.4, cell: 1 },
        ];
        let descriptors = if binary {
            DescriptorPayload::Binary(DescriptorSet::random(2, 16, 3))
        } else {
            DescriptorPayload::Soft((0..32).map(|i| i as f32 / 32.0).collect())
        };
        Detection { width: 32, height: 24, descriptor_dim: 16, k: 8, keypoints, descriptors }
    }

    #[test]
    fn round_trip_both_kinds() {
        for binary in [false, true] {
            let d = sample(binary);
            let back = decode_detection(&encode_detection(&d).unwrap()).unwrap();
            assert_eq!(back.descriptors, d.descriptors);
            assert_eq!(back.keypoints.len(), 2);
            assert_eq!((back.width, back.height, back.k), (32, 24, 8));
            for (a, b) in back.keypoints.iter().zip(&d.keypoints) {
                assert_eq!((a.x, a.y, a.score), (b.x, b.y, b.score));
            }
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_detection(&sample(true)).unwrap();
        assert!(decode_detection(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_detection(&bad).is_err());
        let mut bad = bytes;
        bad[22] = 7;
        assert!(decode_detection(&bad).is_err());
    }
}
