//! Executes a [`Graph`] with weights bound from a [`WeightStore`].

use crate::error::{GraphError, WeightsError};
use crate::imageio::Image;
use crate::kernels::{
    conv2d_bin_layer, conv2d_bin_residual, conv2d_f32, conv2d_int8, hard_swish_f32, hard_swish_q, pool,
    pool_f32, pool_params, BinConvWeights, ConvParams, LearnedPool, PoolMode, Projection, ResidualSpec,
};
use crate::netgraph::graph::{Act, Graph, LayerOp, Source};
use crate::netgraph::spec::{NetworkSpec, Precision};
use crate::netgraph::weights::{DType, Record, WeightStore};
use crate::qtensor::{dequantize, BitTensor, FpTensor, QTensor, QuantParams, Shape};

pub const SPEC_RECORD: &str = "meta.spec";

/// Quantization of the network input: codes `p - 128` for 8-bit pixel `p`,
/// real value `p / 255`.
pub fn image_params() -> QuantParams {
    QuantParams {
        scale: 1.0 / 255.0,
        zero_point: -128,
    }
}

/// An intermediate activation in whichever representation its producer uses.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Float(FpTensor),
    Quant(QTensor),
}

impl Activation {
    pub fn shape(&self) -> Shape {
        match self {
            Activation::Float(t) => t.shape(),
            Activation::Quant(q) => q.shape(),
        }
    }

    pub fn to_float(&self) -> FpTensor {
        match self {
            Activation::Float(t) => t.clone(),
            Activation::Quant(q) => dequantize(q),
        }
    }

    /// Quantized view; float activations are quantized with `params`.
    pub fn to_quant(&self, params: QuantParams) -> QTensor {
        match self {
            Activation::Quant(q) => q.clone(),
            Activation::Float(t) => {
                let data = t.data().iter().map(|&v| params.quantize(v)).collect();
                QTensor::from_raw(t.shape(), data, params)
            }
        }
    }
}

/// Image as a float tensor `[1, h, w, 3]` in `[0, 1]`.
pub fn image_tensor(img: &Image) -> FpTensor {
    let data = img.data().iter().map(|&p| p as f32 / 255.0).collect();
    FpTensor::from_raw(Shape::new(1, img.height(), img.width(), 3), data)
}

/// Image as Int8 codes with [`image_params`].
pub fn image_codes(img: &Image) -> QTensor {
    let data = img.data().iter().map(|&p| (p as i16 - 128) as i8).collect();
    QTensor::from_raw(Shape::new(1, img.height(), img.width(), 3), data, image_params())
}

/// Raw head outputs on the cell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    /// `[1, Hc, Wc, 1]`, in `(0, 1)`.
    pub score: FpTensor,
    /// `[1, Hc, Wc, 2]` offsets `(dx, dy)` in `[-0.5, 0.5]` cells.
    pub location: FpTensor,
    /// `[1, Hc, Wc, M]` descriptor logits.
    pub descriptor: FpTensor,
}

#[derive(Debug, Clone)]
enum BinResidual {
    Identity,
    Projected { weight: FpTensor, bias: Vec<f32> },
}

#[derive(Debug, Clone)]
enum BoundOp {
    Float {
        p: ConvParams,
        weight: FpTensor,
        bias: Vec<f32>,
        /// Binarized layer in float form: `sign(x)` convolved with `±alpha`.
        binary: Option<Option<BinResidual>>,
    },
    Int8 {
        p: ConvParams,
        weight: QTensor,
        bias: Vec<f32>,
    },
    Bin {
        p: ConvParams,
        weights: BinConvWeights,
        residual: Option<ResidualSpec>,
    },
    FixedPool(PoolMode),
    LearnedPool(LearnedPool),
    FloatPool { weight: FpTensor, bias: Vec<f32> },
}

#[derive(Debug, Clone)]
struct BoundLayer {
    op: BoundOp,
    act: Act,
    out: QuantParams,
}

/// A graph with bound weights, ready to run.
#[derive(Debug, Clone)]
pub struct Network {
    graph: Graph,
    layers: Vec<BoundLayer>,
    float_reference: bool,
}

fn shape_of(dims: &[usize]) -> Shape {
    match *dims {
        [n, h, w, c] => Shape::new(n, h, w, c),
        [c] => Shape::new(1, 1, 1, c),
        _ => Shape::new(1, 1, 1, dims.iter().product()),
    }
}

fn fetch<'a>(store: &'a WeightStore, name: &str, dtype: DType, dims: &[usize]) -> Result<&'a Record, WeightsError> {
    let expected = format!("{} {:?}", dtype.label(), dims);
    let r = store.require(name, &expected)?;
    if r.dtype != dtype || r.dims_usize() != dims {
        return Err(WeightsError::ShapeMismatch {
            name: name.to_string(),
            expected,
            found: r.describe(),
        });
    }
    Ok(r)
}

fn fetch_f32(store: &WeightStore, name: &str, dims: &[usize]) -> Result<FpTensor, GraphError> {
    let v = fetch(store, name, DType::F32, dims)?.as_f32()?;
    Ok(FpTensor::new(shape_of(dims), v)?)
}

fn fetch_bias(store: &WeightStore, name: &str, n: usize) -> Result<Vec<f32>, GraphError> {
    Ok(fetch(store, name, DType::F32, &[n])?.as_f32()?)
}

fn fetch_i8(store: &WeightStore, name: &str, dims: &[usize]) -> Result<QTensor, GraphError> {
    let r = fetch(store, name, DType::I8, dims)?;
    Ok(QTensor::new(shape_of(dims), r.as_i8()?, r.quant_params()?)?)
}

fn fetch_params(store: &WeightStore, name: &str) -> Result<QuantParams, GraphError> {
    Ok(fetch(store, name, DType::I8, &[])?.quant_params()?)
}

fn dense_signs(bits: &BitTensor, alpha: f32) -> FpTensor {
    let data = bits.to_signs().into_iter().map(|s| s * alpha).collect();
    FpTensor::from_raw(bits.shape(), data)
}

impl Network {
    /// Binds the weights a graph requires; extra records are ignored.
    pub fn new(graph: Graph, store: &WeightStore) -> Result<Self, GraphError> {
        let mut layers: Vec<BoundLayer> = Vec::with_capacity(graph.layers().len());
        for l in graph.layers() {
            let name = &l.name;
            let bound = match &l.op {
                LayerOp::Conv { params, precision, act } => {
                    let ws = params.weight_shape().0.to_vec();
                    let bias = fetch_bias(store, &format!("{name}.bias"), params.out_channels)?;
                    let out = fetch_params(store, &format!("{name}.out"))?;
                    let op = match precision {
                        Precision::Fp => BoundOp::Float {
                            p: *params,
                            weight: fetch_f32(store, &format!("{name}.weight"), &ws)?,
                            bias,
                            binary: None,
                        },
                        Precision::Int8 => BoundOp::Int8 {
                            p: *params,
                            weight: fetch_i8(store, &format!("{name}.weight"), &ws)?,
                            bias,
                        },
                        Precision::Bin | Precision::BinR => {
                            let r = fetch(store, &format!("{name}.weight"), DType::Bin, &ws)?;
                            let bits = BitTensor::from_words(shape_of(&ws), r.as_words()?)?;
                            let residual = if *precision == Precision::Bin {
                                None
                            } else if params.in_channels == params.out_channels {
                                Some(ResidualSpec::identity())
                            } else {
                                let pd = [params.out_channels, 1, 1, params.in_channels];
                                Some(ResidualSpec::projected(Projection {
                                    weight: fetch_i8(store, &format!("{name}.proj.weight"), &pd)?,
                                    bias: fetch_bias(store, &format!("{name}.proj.bias"), params.out_channels)?,
                                }))
                            };
                            BoundOp::Bin {
                                p: *params,
                                weights: BinConvWeights {
                                    bits,
                                    alpha: r.scale,
                                    bias,
                                },
                                residual,
                            }
                        }
                    };
                    BoundLayer { op, act: *act, out }
                }
                LayerOp::Pool { mode, channels } => {
                    if *mode == PoolMode::Learned {
                        let c = *channels;
                        BoundLayer {
                            op: BoundOp::LearnedPool(LearnedPool {
                                weight: fetch_i8(store, &format!("{name}.weight"), &[c, 2, 2, c])?,
                                bias: fetch_bias(store, &format!("{name}.bias"), c)?,
                                out: fetch_params(store, &format!("{name}.out"))?,
                            }),
                            act: Act::Identity,
                            out: fetch_params(store, &format!("{name}.out"))?,
                        }
                    } else {
                        let out = match l.input {
                            Source::Image => image_params(),
                            Source::Layer(j) => layers[j].out,
                        };
                        BoundLayer {
                            op: BoundOp::FixedPool(*mode),
                            act: Act::Identity,
                            out,
                        }
                    }
                }
            };
            layers.push(bound);
        }
        Ok(Network {
            graph,
            layers,
            float_reference: false,
        })
    }

    /// Builds the network described by the store's own configuration record.
    pub fn from_store(store: &WeightStore) -> Result<Self, GraphError> {
        let text = store
            .require(SPEC_RECORD, "network configuration text")?
            .as_text()?;
        let spec = NetworkSpec::from_text(&text)?;
        Self::new(Graph::build(&spec)?, store)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.graph.spec()
    }

    pub fn is_float_reference(&self) -> bool {
        self.float_reference
    }

    /// Output quantization parameters of layer `i`.
    pub fn output_params(&self, i: usize) -> QuantParams {
        self.layers[i].out
    }

    /// Whether layer `i` consumes Int8 input in this network.
    pub fn consumes_quantized(&self, i: usize) -> bool {
        !matches!(
            self.layers[i].op,
            BoundOp::Float { .. } | BoundOp::FloatPool { .. } | BoundOp::FixedPool(_)
        )
    }

    /// Same topology with every layer executed in `f32` on dequantized
    /// weights. Binarized layers keep their sign nonlinearity.
    pub fn to_float_reference(&self) -> Network {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let op = match &l.op {
                    BoundOp::Int8 { p, weight, bias } => BoundOp::Float {
                        p: *p,
                        weight: dequantize(weight),
                        bias: bias.clone(),
                        binary: None,
                    },
                    BoundOp::Bin { p, weights, residual } => BoundOp::Float {
                        p: *p,
                        weight: dense_signs(&weights.bits, weights.alpha),
                        bias: weights.bias.clone(),
                        binary: Some(residual.as_ref().map(|r| match &r.projection {
                            None => BinResidual::Identity,
                            Some(proj) => BinResidual::Projected {
                                weight: dequantize(&proj.weight),
                                bias: proj.bias.clone(),
                            },
                        })),
                    },
                    BoundOp::LearnedPool(lp) => BoundOp::FloatPool {
                        weight: dequantize(&lp.weight),
                        bias: lp.bias.clone(),
                    },
                    other => other.clone(),
                };
                BoundLayer { op, ..l.clone() }
            })
            .collect();
        Network {
            graph: self.graph.clone(),
            layers,
            float_reference: true,
        }
    }

    fn input_params(&self, i: usize) -> QuantParams {
        match self.graph.layers()[i].input {
            Source::Image => image_params(),
            Source::Layer(j) => self.layers[j].out,
        }
    }

    /// Runs layer `i` on its input activation. Float input to a quantized
    /// layer is quantized with the producer's output parameters.
    pub fn run_layer(&self, i: usize, input: &Activation) -> Result<Activation, GraphError> {
        let layer = self.layers.get(i).ok_or_else(|| GraphError::InvalidInput(format!("no layer {i}")))?;
        let q_in = || input.to_quant(self.input_params(i));
        let out = match &layer.op {
            BoundOp::Float { p, weight, bias, binary } => {
                let x = input.to_float();
                let y = match binary {
                    None => conv2d_f32(&x, weight, bias, p)?,
                    Some(residual) => {
                        let signs: Vec<f32> =
                            x.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
                        let s = FpTensor::new(x.shape(), signs)?;
                        let mut y = conv2d_f32(&s, weight, bias, p)?.into_data();
                        match residual {
                            None => {}
                            Some(BinResidual::Identity) => {
                                y.iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                            }
                            Some(BinResidual::Projected { weight, bias }) => {
                                let pp = ConvParams::new(
                                    (1, 1),
                                    1,
                                    crate::kernels::Padding::Valid,
                                    p.in_channels,
                                    p.out_channels,
                                )?;
                                let r = conv2d_f32(&x, weight, bias, &pp)?;
                                y.iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
                            }
                        }
                        let shape = Shape::new(x.shape().n(), x.shape().h(), x.shape().w(), p.out_channels);
                        FpTensor::new(shape, y)?
                    }
                };
                Activation::Float(apply_float_act(y, layer.act))
            }
            BoundOp::Int8 { p, weight, bias } => {
                let y = conv2d_int8(&q_in(), weight, bias, p, layer.out)?;
                Activation::Quant(apply_quant_act(y, layer.act)?)
            }
            BoundOp::Bin { p, weights, residual } => {
                let x = q_in();
                let y = match residual {
                    None => conv2d_bin_layer(&x, weights, p, layer.out)?,
                    Some(r) => conv2d_bin_residual(&x, weights, r, p, layer.out)?,
                };
                Activation::Quant(apply_quant_act(y, layer.act)?)
            }
            BoundOp::FixedPool(mode) => match input {
                Activation::Quant(q) => Activation::Quant(pool(q, *mode, None)?),
                Activation::Float(t) => Activation::Float(pool_f32(t, *mode, None)?),
            },
            BoundOp::LearnedPool(lp) => Activation::Quant(pool(&q_in(), PoolMode::Learned, Some(lp))?),
            BoundOp::FloatPool { weight, bias } => {
                let x = input.to_float();
                pool_params(x.shape().c(), bias.len())?;
                Activation::Float(pool_f32(&x, PoolMode::Learned, Some((weight, bias)))?)
            }
        };
        Ok(out)
    }

    fn check_image(&self, img: &Image) -> Result<(), GraphError> {
        let cell = self.spec().cell;
        if img.width() % cell != 0 || img.height() % cell != 0 || img.width() == 0 || img.height() == 0 {
            return Err(GraphError::InvalidInput(format!(
                "network input must be a positive multiple of {cell} in both dimensions, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn input_activation(&self, img: &Image) -> Activation {
        let first = self.graph.layers().iter().position(|l| l.input == Source::Image).unwrap_or(0);
        if self.consumes_quantized(first) {
            Activation::Quant(image_codes(img))
        } else {
            Activation::Float(image_tensor(img))
        }
    }

    /// Runs every layer, returning all layer outputs in order.
    pub fn forward_trace(&self, img: &Image) -> Result<(HeadMaps, Vec<Activation>), GraphError> {
        self.check_image(img)?;
        let image = self.input_activation(img);
        let mut acts: Vec<Activation> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.graph.layers().iter().enumerate() {
            let input = match l.input {
                Source::Image => &image,
                Source::Layer(j) => &acts[j],
            };
            let out = self.run_layer(i, input)?;
            acts.push(out);
        }
        let heads = HeadMaps {
            score: acts[self.graph.score_layer()].to_float(),
            location: acts[self.graph.location_layer()].to_float(),
            descriptor: acts[self.graph.descriptor_layer()].to_float(),
        };
        Ok((heads, acts))
    }

    /// Forward pass keeping only live activations.
    pub fn forward(&self, img: &Image) -> Result<HeadMaps, GraphError> {
        self.check_image(img)?;
        let n = self.layers.len();
        let mut last_use = vec![0usize; n];
        for (i, l) in self.graph.layers().iter().enumerate() {
            if let Source::Layer(j) = l.input {
                last_use[j] = i;
            }
        }
        let keep = [
            self.graph.score_layer(),
            self.graph.location_layer(),
            self.graph.descriptor_layer(),
        ];
        let image = self.input_activation(img);
        let mut acts: Vec<Option<Activation>> = vec![None; n];
        for (i, l) in self.graph.layers().iter().enumerate() {
            let out = {
                let input = match l.input {
                    Source::Image => &image,
                    Source::Layer(j) => acts[j]
                        .as_ref()
                        .ok_or_else(|| GraphError::InvalidInput(format!("activation {j} released early")))?,
                };
                self.run_layer(i, input)?
            };
            acts[i] = Some(out);
            for j in 0..i {
                if last_use[j] == i && !keep.contains(&j) {
                    acts[j] = None;
                }
            }
        }
        let take = |i: usize| acts[i].as_ref().map(Activation::to_float).unwrap_or_else(|| FpTensor::zeros(Shape::new(1, 1, 1, 1)));
        Ok(HeadMaps {
            score: take(self.graph.score_layer()),
            location: take(self.graph.location_layer()),
            descriptor: take(self.graph.descriptor_layer()),
        })
    }
}

fn apply_float_act(y: FpTensor, act: Act) -> FpTensor {
    match act {
        Act::Identity => y,
        Act::HardSwish => hard_swish_f32(&y),
        Act::Sigmoid => {
            let shape = y.shape();
            let d = y.into_data().into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            FpTensor::from_raw(shape, d)
        }
        Act::HalfTanh => {
            let shape = y.shape();
            let d = y.into_data().into_iter().map(|v| 0.5 * v.tanh()).collect();
            FpTensor::from_raw(shape, d)
        }
    }
}

fn apply_quant_act(y: QTensor, act: Act) -> Result<QTensor, GraphError> {
    match act {
        Act::Identity => Ok(y),
        Act::HardSwish => Ok(hard_swish_q(&y)),
        Act::Sigmoid | Act::HalfTanh => Err(GraphError::Config(
            "sigmoid and tanh outputs are only produced by FP layers".into(),
        )),
    }
}
