//! The weight container.
//!
//! Layout (little-endian): magic `ZPWT`, `u16` version, `u32` record count,
//! then per record: `u16` name length, UTF-8 name, `u8` dtype, `u8` rank,
//! `rank x u32` dims, `f32` scale, `i8` zero point, `u64` payload length,
//! payload, and a `u32` CRC32 of every preceding byte of the record.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::WeightsError;
use crate::imageio::write_atomic;
use crate::qtensor::{words_for_bits, QuantParams};

pub const MAGIC: [u8; 4] = *b"ZPWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    Bin = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::Bin),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DType::F32 => "fp32",
            DType::I8 => "int8",
            DType::Bin => "bin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    pub scale: f32,
    pub zero_point: i8,
    pub payload: Vec<u8>,
}

/// Payload bytes implied by dtype and dims. Rank-0 records carry no payload.
/// Binary tensors pack their last dimension into 64-bit words per row.
pub fn expected_payload_len(dtype: DType, dims: &[u32]) -> Option<u64> {
    if dims.is_empty() {
        return Some(0);
    }
    let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64))?;
    match dtype {
        DType::F32 => count.checked_mul(4),
        DType::I8 => Some(count),
        DType::Bin => {
            let last = *dims.last()? as u64;
            if last == 0 {
                return Some(0);
            }
            let rows = count / last;
            rows.checked_mul(words_for_bits(last as usize) as u64 * 8)
        }
    }
}

impl Record {
    pub fn f32(name: &str, dims: &[usize], values: &[f32]) -> Self {
        Record {
            name: name.to_string(),
            dtype: DType::F32,
            dims: dims.iter().map(|&d| d as u32).collect(),
            scale: 1.0,
            zero_point: 0,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn int8(name: &str, dims: &[usize], codes: &[i8], params: QuantParams) -> Self {
        Record {
            name: name.to_string(),
            dtype: DType::I8,
            dims: dims.iter().map(|&d| d as u32).collect(),
            scale: params.scale,
            zero_point: params.zero_point,
            payload: codes.iter().map(|&c| c as u8).collect(),
        }
    }

    /// Packed binary weights with their per-tensor scale `alpha`.
    pub fn bin(name: &str, dims: &[usize], words: &[u64], alpha: f32) -> Self {
        Record {
            name: name.to_string(),
            dtype: DType::Bin,
            dims: dims.iter().map(|&d| d as u32).collect(),
            scale: alpha,
            zero_point: 0,
            payload: words.iter().flat_map(|w| w.to_le_bytes()).collect(),
        }
    }

    /// Rank-0 record carrying only quantization parameters.
    pub fn params(name: &str, params: QuantParams) -> Self {
        Record {
            name: name.to_string(),
            dtype: DType::I8,
            dims: Vec::new(),
            scale: params.scale,
            zero_point: params.zero_point,
            payload: Vec::new(),
        }
    }

    /// UTF-8 text stored as a rank-1 int8 record.
    pub fn text(name: &str, text: &str) -> Self {
        Record {
            name: name.to_string(),
            dtype: DType::I8,
            dims: vec![text.len() as u32],
            scale: 1.0,
            zero_point: 0,
            payload: text.as_bytes().to_vec(),
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn describe(&self) -> String {
        format!("{} {:?}", self.dtype.label(), self.dims)
    }

    pub fn quant_params(&self) -> Result<QuantParams, WeightsError> {
        QuantParams::new(self.scale, self.zero_point)
            .map_err(|e| WeightsError::Malformed(format!("{}: {e}", self.name)))
    }

    pub fn as_f32(&self) -> Result<Vec<f32>, WeightsError> {
        self.expect_dtype(DType::F32)?;
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn as_i8(&self) -> Result<Vec<i8>, WeightsError> {
        self.expect_dtype(DType::I8)?;
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }

    pub fn as_words(&self) -> Result<Vec<u64>, WeightsError> {
        self.expect_dtype(DType::Bin)?;
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub fn as_text(&self) -> Result<String, WeightsError> {
        self.expect_dtype(DType::I8)?;
        String::from_utf8(self.payload.clone())
            .map_err(|_| WeightsError::Malformed(format!("{} is not UTF-8 text", self.name)))
    }

    fn expect_dtype(&self, dtype: DType) -> Result<(), WeightsError> {
        if self.dtype != dtype {
            return Err(WeightsError::ShapeMismatch {
                name: self.name.clone(),
                expected: dtype.label().to_string(),
                found: self.dtype.label().to_string(),
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), WeightsError> {
        if self.name.len() > u16::MAX as usize {
            return Err(WeightsError::Malformed(format!("record name of {} bytes is too long", self.name.len())));
        }
        if self.dims.len() > u8::MAX as usize {
            return Err(WeightsError::Malformed(format!("{}: rank {} is too large", self.name, self.dims.len())));
        }
        let want = expected_payload_len(self.dtype, &self.dims)
            .ok_or_else(|| WeightsError::Malformed(format!("{}: dims overflow", self.name)))?;
        if want != self.payload.len() as u64 {
            return Err(WeightsError::Malformed(format!(
                "{}: {} payload bytes, {} {:?} needs {want}",
                self.name,
                self.payload.len(),
                self.dtype.label(),
                self.dims
            )));
        }
        Ok(())
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&(self.name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.dtype as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.push(self.zero_point as u8);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
}

/// Ordered, name-unique collection of records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightsError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, WeightsError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) -> Result<(), WeightsError> {
        record.validate()?;
        if self.index.contains_key(&record.name) {
            return Err(WeightsError::Malformed(format!("duplicate record {}", record.name)));
        }
        self.index.insert(record.name.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Replaces an existing record of the same name or appends a new one.
    pub fn upsert(&mut self, record: Record) -> Result<(), WeightsError> {
        record.validate()?;
        match self.index.get(&record.name) {
            Some(&i) => self.records[i] = record,
            None => {
                self.index.insert(record.name.clone(), self.records.len());
                self.records.push(record);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    /// Looks up a record, reporting a missing one as a shape mismatch.
    pub fn require(&self, name: &str, expected: &str) -> Result<&Record, WeightsError> {
        self.get(name).ok_or_else(|| WeightsError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_string(),
            found: "missing record".to_string(),
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            r.encode(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let version = rd.u16("version")?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let count = rd.u32("record count")?;
        let mut store = WeightStore::new();
        for index in 0..count as usize {
            let start = rd.pos;
            let name_len = rd.u16("name length")? as usize;
            let name_bytes = rd.take(name_len, "name")?;
            let name = String::from_utf8_lossy(name_bytes).into_owned();
            let tag = rd.u8("dtype")?;
            let rank = rd.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(rd.u32("dims")?);
            }
            let scale = f32::from_le_bytes(rd.take(4, "scale")?.try_into().unwrap());
            let zero_point = rd.u8("zero point")? as i8;
            let len = rd.u64("payload length")?;
            let len = usize::try_from(len).map_err(|_| WeightsError::Truncated(format!("payload of {len} bytes")))?;
            let payload = rd.take(len, "payload")?.to_vec();
            let computed = crc32fast::hash(&bytes[start..rd.pos]);
            let stored = rd.u32("checksum")?;
            if stored != computed {
                return Err(WeightsError::Checksum {
                    index,
                    name,
                    stored,
                    computed,
                });
            }
            if std::str::from_utf8(name_bytes).is_err() {
                return Err(WeightsError::Malformed(format!("record {index} name is not UTF-8")));
            }
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| WeightsError::Malformed(format!("record {name}: unknown dtype tag {tag}")))?;
            store.push(Record {
                name,
                dtype,
                dims,
                scale,
                zero_point,
                payload,
            })?;
        }
        if rd.pos != bytes.len() {
            return Err(WeightsError::TrailingBytes(bytes.len() - rd.pos));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), WeightsError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| WeightsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn load_weights(path: &Path) -> Result<WeightStore, WeightsError> {
    let bytes = fs::read(path).map_err(|source| WeightsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    WeightStore::from_bytes(&bytes)
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<(), WeightsError> {
    store.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.push(Record::f32("a.weight", &[2, 1, 1, 3], &[0.5, -1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        s.push(Record::int8("b.weight", &[1, 1, 1, 2], &[-3, 7], QuantParams::new(0.1, 2).unwrap())).unwrap();
        s.push(Record::bin("c.weight", &[2, 1, 1, 70], &[1, 2, 3, 4], 0.25)).unwrap();
        s.push(Record::params("c.out", QuantParams::new(0.05, 0).unwrap())).unwrap();
        s.push(Record::text("meta.spec", "k=v\n")).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = sample();
        let bytes = s.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("c.weight").unwrap().as_words().unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(back.get("meta.spec").unwrap().as_text().unwrap(), "k=v\n");
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[i] ^= 1 << bit;
                assert!(WeightStore::from_bytes(&b).is_err(), "flip at byte {i} bit {bit} accepted");
            }
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&b), Err(WeightsError::BadMagic(_))));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(WeightStore::from_bytes(&b), Err(WeightsError::UnsupportedVersion(9))));
        let mut b = bytes.clone();
        let last_payload = b.len() - 5;
        b[last_payload] ^= 0xff;
        assert!(matches!(WeightStore::from_bytes(&b), Err(WeightsError::Checksum { index: 4, .. })));
        assert!(matches!(WeightStore::from_bytes(&bytes[..bytes.len() - 1]), Err(WeightsError::Truncated(_))));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(WeightStore::from_bytes(&b), Err(WeightsError::TrailingBytes(1))));
        let s = sample();
        assert!(matches!(s.require("missing.weight", "fp32"), Err(WeightsError::ShapeMismatch { name, .. }) if name == "missing.weight"));
    }

    #[test]
    fn payload_length_is_validated() {
        let mut s = WeightStore::new();
        let mut r = Record::f32("x", &[3], &[1.0, 2.0, 3.0]);
        r.payload.pop();
        assert!(matches!(s.push(r), Err(WeightsError::Malformed(_))));
        assert!(s.push(Record::f32("x", &[1], &[1.0])).is_ok());
        assert!(s.push(Record::f32("x", &[1], &[1.0])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.zpw");
        save_weights(&sample(), &p).unwrap();
        assert_eq!(load_weights(&p).unwrap(), sample());
        assert!(matches!(load_weights(&dir.path().join("nope")), Err(WeightsError::Io { .. })));
    }
}
