//! Random-weight fixtures and golden per-layer activations.
//!
//! [`random_store`] draws He-initialized weights and calibrates every layer's
//! output quantization on one image through the float reference.
//! [`golden_fixtures`] runs a naive `f64` fake-quantized executor that reads
//! the weight records directly and shares no code with the kernels; its
//! per-layer inputs and outputs are stored as a zip of raw little-endian
//! tensors with an `index.txt` listing `name dtype dims scale zero_point`.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{GraphError, IoFormatError};
use crate::homeval::synthetic_image;
use crate::imageio::{write_atomic, Image};
use crate::kernels::PoolMode;
use crate::netgraph::graph::{Act, Graph, LayerOp, Source};
use crate::netgraph::network::{image_params, Activation, Network, SPEC_RECORD};
use crate::netgraph::spec::{NetworkSpec, Precision};
use crate::netgraph::weights::{DType, Record, WeightStore};
use crate::qtensor::{FpTensor, QTensor, QuantParams, Shape};

pub const FIXTURE_IMAGE_SIZE: usize = 64;
pub const FIXTURE_IMAGE_SEED: u64 = 2022;
pub const INDEX_NAME: &str = "index.txt";

/// The 64x64 synthetic image used for fixtures and calibration.
pub fn fixture_image() -> Image {
    synthetic_image(FIXTURE_IMAGE_SIZE, FIXTURE_IMAGE_SIZE, FIXTURE_IMAGE_SEED)
}

fn pack_rows(signs: &[bool], row_len: usize) -> Vec<u64> {
    let wpr = row_len.div_ceil(64);
    let mut words = vec![0u64; signs.len() / row_len * wpr];
    for (r, row) in signs.chunks(row_len).enumerate() {
        for (i, &s) in row.iter().enumerate() {
            if s {
                words[r * wpr + i / 64] |= 1u64 << (i % 64);
            }
        }
    }
    words
}

fn weight_record(name: &str, dtype: DType, dims: &[usize], w: &[f32]) -> Record {
    match dtype {
        DType::F32 => Record::f32(name, dims, w),
        DType::I8 => {
            let p = QuantParams::symmetric(w.iter().fold(0f32, |m, v| m.max(v.abs())));
            let codes: Vec<i8> = w.iter().map(|&v| p.quantize(v)).collect();
            Record::int8(name, dims, &codes, p)
        }
        DType::Bin => {
            let alpha = w.iter().map(|v| v.abs()).sum::<f32>() / w.len().max(1) as f32;
            let signs: Vec<bool> = w.iter().map(|&v| v >= 0.0).collect();
            Record::bin(name, dims, &pack_rows(&signs, *dims.last().unwrap_or(&1)), alpha)
        }
    }
}

fn blank_store(spec: &NetworkSpec, mut draw: impl FnMut(&str, &[usize]) -> Vec<f32>) -> Result<(Graph, WeightStore), GraphError> {
    let graph = Graph::build(spec)?;
    let mut store = WeightStore::new();
    store.push(Record::text(SPEC_RECORD, &spec.to_text()))?;
    for req in graph.requirements() {
        let rec = if req.dims.is_empty() {
            Record::params(&req.name, QuantParams::symmetric(1.0))
        } else {
            let w = draw(&req.name, &req.dims);
            weight_record(&req.name, req.dtype, &req.dims, &w)
        };
        store.push(rec)?;
    }
    Ok((graph, store))
}

/// Sets every `.out` record to symmetric parameters covering the float
/// reference activations of `calib`.
pub fn calibrate(store: &mut WeightStore, graph: &Graph, calib: &Image) -> Result<(), GraphError> {
    let net = Network::new(graph.clone(), store)?.to_float_reference();
    let (_, acts) = net.forward_trace(calib)?;
    for (l, a) in graph.layers().iter().zip(&acts) {
        if !l.has_weights() {
            continue;
        }
        let max_abs = a.to_float().data().iter().fold(0f32, |m, v| m.max(v.abs()));
        store.upsert(Record::params(&format!("{}.out", l.name), QuantParams::symmetric(max_abs.max(1e-3))))?;
    }
    Ok(())
}

/// He-initialized weights, biases drawn from `N(0, 0.05)`, calibrated on `calib`.
pub fn random_store(spec: &NetworkSpec, seed: u64, calib: &Image) -> Result<WeightStore, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = Normal::new(0.0f32, 0.05).expect("valid normal");
    let (graph, mut store) = blank_store(spec, |name, dims| {
        let n: usize = dims.iter().product();
        if name.ends_with("bias") {
            return (0..n).map(|_| bias.sample(&mut rng)).collect();
        }
        let fan_in: usize = dims[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid normal");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    })?;
    calibrate(&mut store, &graph, calib)?;
    Ok(store)
}

/// All weights and biases zero; unit output scales.
pub fn zero_store(spec: &NetworkSpec) -> Result<WeightStore, GraphError> {
    Ok(blank_store(spec, |_, dims| vec![0.0; dims.iter().product()])?.1)
}

/// Deterministic image of arbitrary size for benchmarks and tests.
pub fn noise_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * 3).map(|_| rng.random::<u8>()).collect();
    Image::new(width, height, data).expect("sized buffer")
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixtureData {
    F32(Vec<f32>),
    I8 { codes: Vec<i8>, params: QuantParams },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureTensor {
    pub name: String,
    pub shape: Shape,
    pub data: FixtureData,
}

impl FixtureTensor {
    pub fn to_activation(&self) -> Activation {
        match &self.data {
            FixtureData::F32(v) => Activation::Float(FpTensor::from_raw(self.shape, v.clone())),
            FixtureData::I8 { codes, params } => Activation::Quant(QTensor::from_raw(self.shape, codes.clone(), *params)),
        }
    }

    fn from_oracle(name: String, a: &OAct) -> Self {
        let shape = Shape(a.shape);
        let data = match a.kind {
            OKind::Float => FixtureData::F32(a.values.iter().map(|&v| v as f32).collect()),
            OKind::Quant => FixtureData::I8 {
                codes: a.values.iter().map(|&v| v as i8).collect(),
                params: a.params,
            },
        };
        FixtureTensor { name, shape, data }
    }
}

/// Outcome of comparing an engine activation to a golden tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCheck {
    /// Largest absolute code difference (quantized tensors).
    pub max_step: u32,
    /// `max |a - b| / max |b|` (float tensors).
    pub rel_err: f64,
    pub pass: bool,
}

pub const FLOAT_REL_TOL: f64 = 1e-4;
pub const INT8_STEP_TOL: u32 = 1;

pub fn compare(expected: &FixtureTensor, got: &Activation) -> LayerCheck {
    let fail = LayerCheck {
        max_step: u32::MAX,
        rel_err: f64::INFINITY,
        pass: false,
    };
    if got.shape() != expected.shape {
        return fail;
    }
    match (&expected.data, got) {
        (FixtureData::I8 { codes, params }, Activation::Quant(q)) => {
            if q.params() != *params {
                return fail;
            }
            let max_step = codes
                .iter()
                .zip(q.data())
                .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs())
                .max()
                .unwrap_or(0);
            LayerCheck {
                max_step,
                rel_err: 0.0,
                pass: max_step <= INT8_STEP_TOL,
            }
        }
        (FixtureData::F32(v), Activation::Float(t)) => {
            let scale = v.iter().fold(0f64, |m, &x| m.max((x as f64).abs())).max(f64::MIN_POSITIVE);
            let diff = v
                .iter()
                .zip(t.data())
                .fold(0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
            let rel_err = diff / scale;
            LayerCheck {
                max_step: 0,
                rel_err,
                pass: rel_err <= FLOAT_REL_TOL,
            }
        }
        _ => fail,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureArchive {
    pub tensors: Vec<FixtureTensor>,
}

fn parse_err(path: &Path, m: impl Into<String>) -> IoFormatError {
    IoFormatError::format(path, m)
}

impl FixtureArchive {
    pub fn get(&self, name: &str) -> Option<&FixtureTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, String> {
        let mut zw = ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default());
        let mut index = String::new();
        for t in &self.tensors {
            let dims = t.shape.0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            let (dtype, scale, zp, bytes): (&str, f32, i8, Vec<u8>) = match &t.data {
                FixtureData::F32(v) => ("f32", 1.0, 0, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                FixtureData::I8 { codes, params } => {
                    ("i8", params.scale, params.zero_point, codes.iter().map(|&c| c as u8).collect())
                }
            };
            index.push_str(&format!("{} {dtype} {dims} {scale:e} {zp}\n", t.name));
            zw.start_file(format!("{}.bin", t.name), opts).map_err(|e| e.to_string())?;
            zw.write_all(&bytes).map_err(|e| e.to_string())?;
        }
        zw.start_file(INDEX_NAME, opts).map_err(|e| e.to_string())?;
        zw.write_all(index.as_bytes()).map_err(|e| e.to_string())?;
        Ok(zw.finish().map_err(|e| e.to_string())?.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, IoFormatError> {
        let mut zip = ZipArchive::new(Cursor::new(bytes)).map_err(|e| parse_err(path, e.to_string()))?;
        let mut read_entry = |name: &str| -> Result<Vec<u8>, IoFormatError> {
            let mut f = zip
                .by_name(name)
                .map_err(|e| parse_err(path, format!("entry {name}: {e}")))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf).map_err(|e| IoFormatError::io(path, e))?;
            Ok(buf)
        };
        let index = String::from_utf8(read_entry(INDEX_NAME)?).map_err(|_| parse_err(path, "index is not UTF-8"))?;
        let mut tensors = Vec::new();
        for (n, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| parse_err(path, format!("index line {}: {m}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, dims, scale, zp] = f[..] else {
                return Err(bad("expected `name dtype dims scale zero_point`"));
            };
            let dims: Vec<usize> = dims
                .split(',')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad dims"))?;
            let [a, b, c, d] = dims[..] else { return Err(bad("expected four dims")) };
            let shape = Shape::new(a, b, c, d);
            let scale: f32 = scale.parse().map_err(|_| bad("bad scale"))?;
            let zp: i8 = zp.parse().map_err(|_| bad("bad zero point"))?;
            let raw = read_entry(&format!("{name}.bin"))?;
            let data = match dtype {
                "f32" if raw.len() == 4 * shape.len() => FixtureData::F32(
                    raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                ),
                "i8" if raw.len() == shape.len() => FixtureData::I8 {
                    codes: raw.iter().map(|&b| b as i8).collect(),
                    params: QuantParams::new(scale, zp).map_err(|e| bad(&e.to_string()))?,
                },
                "f32" | "i8" => return Err(bad("payload size does not match dims")),
                other => return Err(bad(&format!("unknown dtype {other}"))),
            };
            tensors.push(FixtureTensor {
                name: name.to_string(),
                shape,
                data,
            });
        }
        Ok(FixtureArchive { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), IoFormatError> {
        let bytes = self.to_bytes().map_err(|m| parse_err(path, m))?;
        write_atomic(path, &bytes).map_err(|e| IoFormatError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, IoFormatError> {
        let bytes = std::fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OKind {
    Float,
    /// `values` hold integer codes.
    Quant,
}

/// Oracle activation. `params` are the producer's output parameters, used
/// when a quantized consumer reads a float value.
#[derive(Debug, Clone)]
struct OAct {
    shape: [usize; 4],
    values: Vec<f64>,
    kind: OKind,
    params: QuantParams,
}

fn q_round(v: f64, p: QuantParams) -> f64 {
    let r = v / p.scale as f64;
    let r = if r >= 0.0 { (r + 0.5).floor() } else { -((-r + 0.5).floor()) };
    (r + p.zero_point as f64).clamp(-128.0, 127.0)
}

fn deq(code: f64, p: QuantParams) -> f64 {
    p.scale as f64 * (code - p.zero_point as f64)
}

impl OAct {
    fn real(&self) -> Vec<f64> {
        match self.kind {
            OKind::Float => self.values.clone(),
            OKind::Quant => self.values.iter().map(|&c| deq(c, self.params)).collect(),
        }
    }

    fn as_quant(&self) -> OAct {
        match self.kind {
            OKind::Quant => self.clone(),
            OKind::Float => OAct {
                values: self.values.iter().map(|&v| q_round(v, self.params)).collect(),
                kind: OKind::Quant,
                ..self.clone()
            },
        }
    }

    fn as_float(&self) -> OAct {
        OAct {
            values: self.real(),
            kind: OKind::Float,
            ..self.clone()
        }
    }
}

/// `sum x * w` over in-bounds taps. `same` pads so that the output has
/// `ceil(in / stride)` positions with the extra padding at the bottom/right.
fn naive_conv(shape: [usize; 4], x: &[f64], w: &[f64], wd: [usize; 4], stride: usize, same: bool) -> ([usize; 4], Vec<f64>) {
    let [n, h, wi, ci] = shape;
    let [co, kh, kw, _] = wd;
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = wi.div_ceil(stride);
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wi);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wi - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            let xb = ((b * h + iy as usize) * wi + ix as usize) * ci;
                            let wb = ((o * kh + ky) * kw + kx) * ci;
                            for c in 0..ci {
                                acc += x[xb + c] * w[wb + c];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    ([n, oh, ow, co], out)
}

fn hswish64(v: f64) -> f64 {
    v * (v + 3.0).clamp(0.0, 6.0) / 6.0
}

struct Oracle<'a> {
    store: &'a WeightStore,
}

impl Oracle<'_> {
    fn rec(&self, name: &str) -> Result<&Record, GraphError> {
        Ok(self.store.require(name, "fixture record")?)
    }

    fn f64s(&self, name: &str) -> Result<Vec<f64>, GraphError> {
        Ok(self.rec(name)?.as_f32()?.into_iter().map(f64::from).collect())
    }

    fn out(&self, layer: &str) -> Result<QuantParams, GraphError> {
        Ok(self.rec(&format!("{layer}.out"))?.quant_params()?)
    }

    fn centered_i8(&self, name: &str) -> Result<(Vec<f64>, QuantParams), GraphError> {
        let r = self.rec(name)?;
        let p = r.quant_params()?;
        Ok((r.as_i8()?.iter().map(|&c| c as f64 - p.zero_point as f64).collect(), p))
    }

    /// Integer convolution requantized to `out`: codes as `f64`.
    fn int8_conv(&self, x: &OAct, wname: &str, bname: &str, wd: [usize; 4], stride: usize, same: bool, out: QuantParams) -> Result<OAct, GraphError> {
        let xq = x.as_quant();
        let xs: Vec<f64> = xq.values.iter().map(|&c| c - xq.params.zero_point as f64).collect();
        let (ws, wp) = self.centered_i8(wname)?;
        let bias = self.f64s(bname)?;
        let (shape, acc) = naive_conv(xq.shape, &xs, &ws, wd, stride, same);
        let m = xq.params.scale as f64 * wp.scale as f64;
        let co = wd[0];
        let values = acc.iter().enumerate().map(|(i, &a)| q_round(a * m + bias[i % co], out)).collect();
        Ok(OAct {
            shape,
            values,
            kind: OKind::Quant,
            params: out,
        })
    }

    fn layer(&self, graph: &Graph, i: usize, x: &OAct) -> Result<OAct, GraphError> {
        let l = &graph.layers()[i];
        let name = &l.name;
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        match &l.op {
            LayerOp::Conv { params, precision, act } => {
                let wd = params.weight_shape().0;
                let out = self.out(name)?;
                let y = match precision {
                    Precision::Fp => {
                        let xf = x.real();
                        let w = self.f64s(&wname)?;
                        let bias = self.f64s(&bname)?;
                        let (shape, acc) = naive_conv(x.shape, &xf, &w, wd, 1, true);
                        let values = acc
                            .iter()
                            .enumerate()
                            .map(|(j, &a)| {
                                let v = a + bias[j % wd[0]];
                                match act {
                                    Act::Identity => v,
                                    Act::HardSwish => hswish64(v),
                                    Act::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                                    Act::HalfTanh => 0.5 * v.tanh(),
                                }
                            })
                            .collect();
                        return Ok(OAct {
                            shape,
                            values,
                            kind: OKind::Float,
                            params: out,
                        });
                    }
                    Precision::Int8 => self.int8_conv(x, &wname, &bname, wd, 1, true, out)?,
                    Precision::Bin | Precision::BinR => {
                        let xq = x.as_quant();
                        let zx = xq.params.zero_point as f64;
                        let xs: Vec<f64> = xq.values.iter().map(|&c| if c >= zx { 1.0 } else { -1.0 }).collect();
                        let r = self.rec(&wname)?;
                        let words = r.as_words()?;
                        let ci = wd[3];
                        let wpr = ci.div_ceil(64);
                        let mut ws = Vec::with_capacity(wd.iter().product());
                        for row in 0..wd[0] * wd[1] * wd[2] {
                            for c in 0..ci {
                                let bit = (words[row * wpr + c / 64] >> (c % 64)) & 1;
                                ws.push(if bit == 1 { 1.0 } else { -1.0 });
                            }
                        }
                        let alpha = r.scale as f64;
                        let bias = self.f64s(&bname)?;
                        let (shape, acc) = naive_conv(xq.shape, &xs, &ws, wd, 1, true);
                        let residual: Option<Vec<f64>> = if *precision == Precision::Bin {
                            None
                        } else if params.in_channels == params.out_channels {
                            Some(xq.real())
                        } else {
                            let pd = [params.out_channels, 1, 1, params.in_channels];
                            let p = self.int8_conv(&xq, &format!("{name}.proj.weight"), &format!("{name}.proj.bias"), pd, 1, false, out)?;
                            Some(p.real())
                        };
                        let values = acc
                            .iter()
                            .enumerate()
                            .map(|(j, &c)| {
                                let v = alpha * c + bias[j % wd[0]] + residual.as_ref().map_or(0.0, |r| r[j]);
                                q_round(v, out)
                            })
                            .collect();
                        OAct {
                            shape,
                            values,
                            kind: OKind::Quant,
                            params: out,
                        }
                    }
                };
                Ok(match act {
                    Act::HardSwish => OAct {
                        values: y.values.iter().map(|&c| q_round(hswish64(deq(c, out)), out)).collect(),
                        ..y
                    },
                    _ => y,
                })
            }
            LayerOp::Pool { mode, channels } => {
                let c = *channels;
                if *mode == PoolMode::Learned {
                    let out = self.out(name)?;
                    return self.int8_conv(x, &wname, &bname, [c, 2, 2, c], 2, false, out);
                }
                let [n, h, w, _] = x.shape;
                let (oh, ow) = (h / 2, w / 2);
                let mut values = Vec::with_capacity(n * oh * ow * c);
                let at = |b: usize, y: usize, xx: usize, ch: usize| x.values[((b * h + y) * w + xx) * c + ch];
                for b in 0..n {
                    for y in 0..oh {
                        for xx in 0..ow {
                            for ch in 0..c {
                                let taps = [
                                    at(b, 2 * y, 2 * xx, ch),
                                    at(b, 2 * y, 2 * xx + 1, ch),
                                    at(b, 2 * y + 1, 2 * xx, ch),
                                    at(b, 2 * y + 1, 2 * xx + 1, ch),
                                ];
                                let v = match mode {
                                    PoolMode::Max => taps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                                    PoolMode::Subsample => taps[0],
                                    _ => match x.kind {
                                        OKind::Float => taps.iter().sum::<f64>() / 4.0,
                                        OKind::Quant => {
                                            let z = x.params.zero_point as f64;
                                            let d = taps.iter().map(|t| t - z).sum::<f64>() / 4.0;
                                            let r = if d >= 0.0 { (d + 0.5).floor() } else { -((-d + 0.5).floor()) };
                                            (r + z).clamp(-128.0, 127.0)
                                        }
                                    },
                                };
                                values.push(v);
                            }
                        }
                    }
                }
                Ok(OAct {
                    shape: [n, oh, ow, c],
                    values,
                    ..x.clone()
                })
            }
        }
    }
}

/// Runs the oracle on `image` and records, for every layer, its input in the
/// representation the engine layer consumes and its output.
pub fn golden_fixtures(store: &WeightStore, image: &Image) -> Result<FixtureArchive, GraphError> {
    let net = Network::from_store(store)?;
    let graph = net.graph().clone();
    let oracle = Oracle { store };
    let (w, h) = (image.width(), image.height());
    let img = OAct {
        shape: [1, h, w, 3],
        values: image.data().iter().map(|&p| p as f64 - 128.0).collect(),
        kind: OKind::Quant,
        params: image_params(),
    };
    let mut tensors = vec![FixtureTensor::from_oracle("image".into(), &img)];
    let mut acts: Vec<OAct> = Vec::with_capacity(graph.layers().len());
    for (i, l) in graph.layers().iter().enumerate() {
        let src = match l.input {
            Source::Image => {
                if net.consumes_quantized(i) {
                    img.clone()
                } else {
                    img.as_float()
                }
            }
            Source::Layer(j) => acts[j].clone(),
        };
        let input = match (&l.op, net.consumes_quantized(i)) {
            (LayerOp::Pool { mode, .. }, _) if *mode != PoolMode::Learned => src,
            (_, true) => src.as_quant(),
            (_, false) => src.as_float(),
        };
        let out = oracle.layer(&graph, i, &input)?;
        tensors.push(FixtureTensor::from_oracle(format!("{}.input", l.name), &input));
        tensors.push(FixtureTensor::from_oracle(format!("{}.output", l.name), &out));
        acts.push(out);
    }
    Ok(FixtureArchive { tensors })
}

/// Feeds each archived layer input to the engine and compares outputs.
pub fn check_against_fixtures(net: &Network, archive: &FixtureArchive) -> Result<Vec<(String, LayerCheck)>, GraphError> {
    let mut out = Vec::new();
    for (i, l) in net.graph().layers().iter().enumerate() {
        let missing = |what: &str| GraphError::InvalidInput(format!("fixture archive lacks {}.{what}", l.name));
        let input = archive.get(&format!("{}.input", l.name)).ok_or_else(|| missing("input"))?;
        let expected = archive.get(&format!("{}.output", l.name)).ok_or_else(|| missing("output"))?;
        let got = net.run_layer(i, &input.to_activation())?;
        out.push((l.name.clone(), compare(expected, &got)));
    }
    Ok(out)
}
