//! Layer DAG: a VGG-style encoder of eight 3x3 convolutions with three 2x
//! reductions, followed by score, location and descriptor branches.

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::kernels::{ConvParams, PoolMode};
use crate::netgraph::spec::{NetworkSpec, Pooling, Precision};
use crate::netgraph::weights::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    HardSwish,
    Identity,
    Sigmoid,
    /// `0.5 * tanh(v)`, offsets within half a cell.
    HalfTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    FirstConv,
    Encoder,
    Pooling,
    Decoder,
    Heads,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv {
        params: ConvParams,
        precision: Precision,
        act: Act,
    },
    /// Learned pooling always runs as an Int8 convolution.
    Pool { mode: PoolMode, channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Image,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub op: LayerOp,
    pub input: Source,
    pub block: BlockKind,
}

impl LayerDef {
    pub fn out_channels(&self) -> usize {
        match &self.op {
            LayerOp::Conv { params, .. } => params.out_channels,
            LayerOp::Pool { channels, .. } => *channels,
        }
    }

    /// Whether this layer consumes and produces Int8 activations.
    pub fn is_quantized(&self) -> bool {
        match &self.op {
            LayerOp::Conv { precision, .. } => precision.is_quantized(),
            LayerOp::Pool { mode, .. } => *mode == PoolMode::Learned,
        }
    }

    pub fn has_weights(&self) -> bool {
        match &self.op {
            LayerOp::Conv { .. } => true,
            LayerOp::Pool { mode, .. } => *mode == PoolMode::Learned,
        }
    }
}

/// A record the weight store must provide for a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Requirement {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    spec: NetworkSpec,
    layers: Vec<LayerDef>,
    score: usize,
    location: usize,
    descriptor: usize,
}

pub const IMAGE_CHANNELS: usize = 3;

struct Builder {
    layers: Vec<LayerDef>,
    channels: usize,
    last: Source,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        input: Source,
        in_channels: usize,
        out: usize,
        precision: Precision,
        act: Act,
        block: BlockKind,
    ) -> Result<usize, GraphError> {
        let params = ConvParams::same(3, in_channels, out)?;
        self.layers.push(LayerDef {
            name: name.into(),
            op: LayerOp::Conv { params, precision, act },
            input,
            block,
        });
        self.channels = out;
        self.last = Source::Layer(self.layers.len() - 1);
        Ok(self.layers.len() - 1)
    }

    fn chain(&mut self, name: &str, out: usize, precision: Precision, block: BlockKind) -> Result<usize, GraphError> {
        self.conv(name, self.last, self.channels, out, precision, Act::HardSwish, block)
    }

    fn pool(&mut self, name: &str, mode: PoolMode) {
        self.layers.push(LayerDef {
            name: name.into(),
            op: LayerOp::Pool {
                mode,
                channels: self.channels,
            },
            input: self.last,
            block: BlockKind::Pooling,
        });
        self.last = Source::Layer(self.layers.len() - 1);
    }
}

impl Graph {
    pub fn build(spec: &NetworkSpec) -> Result<Graph, GraphError> {
        spec.validate()?;
        let [c1, c2, c3, c4] = spec.channels;
        let mode = match spec.pooling {
            Pooling::Max => PoolMode::Max,
            Pooling::Average => PoolMode::Average,
            Pooling::Subsample => PoolMode::Subsample,
            Pooling::Learned | Pooling::EarlyLearned => PoolMode::Learned,
        };
        let early = spec.pooling == Pooling::EarlyLearned;
        let mut b = Builder {
            layers: Vec::new(),
            channels: IMAGE_CHANNELS,
            last: Source::Image,
        };
        let enc = spec.encoder;
        for (blk, (wa, wb)) in [(c1, c1), (c2, c2), (c3, c3), (c4, c4)].into_iter().enumerate() {
            let n = blk + 1;
            if early && blk < 3 {
                b.pool(&format!("pool{n}"), mode);
            }
            if blk == 0 {
                b.chain("conv1a", wa, spec.first_conv, BlockKind::FirstConv)?;
            } else {
                b.chain(&format!("conv{n}a"), wa, enc, BlockKind::Encoder)?;
            }
            b.chain(&format!("conv{n}b"), wb, enc, BlockKind::Encoder)?;
            if !early && blk < 3 {
                b.pool(&format!("pool{n}"), mode);
            }
        }
        let trunk = b.last;
        let dh = spec.head_width;
        let dec = spec.decoder;
        let h = spec.heads;
        b.conv("score_a", trunk, c4, dh, dec, Act::HardSwish, BlockKind::Decoder)?;
        let score = b.conv("score_b", b.last, dh, 1, h.score, Act::Sigmoid, BlockKind::Heads)?;
        b.conv("loc_a", trunk, c4, dh, dec, Act::HardSwish, BlockKind::Decoder)?;
        let location = b.conv("loc_b", b.last, dh, 2, h.location, Act::HalfTanh, BlockKind::Heads)?;
        b.conv("desc_a", trunk, c4, dh, dec, Act::HardSwish, BlockKind::Decoder)?;
        b.chain("desc_b", dh, dec, BlockKind::Decoder)?;
        b.chain("desc_c", dh, dec, BlockKind::Decoder)?;
        let descriptor = b.conv(
            "desc_d",
            b.last,
            dh,
            spec.descriptor_dim,
            h.descriptor,
            Act::Identity,
            BlockKind::Heads,
        )?;
        let g = Graph {
            spec: spec.clone(),
            layers: b.layers,
            score,
            location,
            descriptor,
        };
        g.check_plumbing()?;
        Ok(g)
    }

    fn check_plumbing(&self) -> Result<(), GraphError> {
        for (i, l) in self.layers.iter().enumerate() {
            let src_c = match l.input {
                Source::Image => IMAGE_CHANNELS,
                Source::Layer(j) if j < i => self.layers[j].out_channels(),
                Source::Layer(j) => {
                    return Err(GraphError::Config(format!("{} reads layer {j}, which runs later", l.name)))
                }
            };
            let want = match &l.op {
                LayerOp::Conv { params, .. } => params.in_channels,
                LayerOp::Pool { channels, .. } => *channels,
            };
            if src_c != want {
                return Err(GraphError::Config(format!(
                    "{} expects {want} input channels, its source produces {src_c}",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn score_layer(&self) -> usize {
        self.score
    }

    pub fn location_layer(&self) -> usize {
        self.location
    }

    pub fn descriptor_layer(&self) -> usize {
        self.descriptor
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l.op, LayerOp::Conv { .. })).count()
    }

    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l.op, LayerOp::Pool { .. })).count()
    }

    /// Records a weight store must hold for this graph, in layer order.
    pub fn requirements(&self) -> Vec<Requirement> {
        let mut out = Vec::new();
        let req = |name: String, dtype: DType, dims: Vec<usize>| Requirement { name, dtype, dims };
        for l in &self.layers {
            match &l.op {
                LayerOp::Conv { params, precision, .. } => {
                    let ws = params.weight_shape().0.to_vec();
                    let dtype = match precision {
                        Precision::Fp => DType::F32,
                        Precision::Int8 => DType::I8,
                        Precision::Bin | Precision::BinR => DType::Bin,
                    };
                    out.push(req(format!("{}.weight", l.name), dtype, ws));
                    out.push(req(format!("{}.bias", l.name), DType::F32, vec![params.out_channels]));
                    out.push(req(format!("{}.out", l.name), DType::I8, vec![]));
                    if *precision == Precision::BinR && params.in_channels != params.out_channels {
                        out.push(req(
                            format!("{}.proj.weight", l.name),
                            DType::I8,
                            vec![params.out_channels, 1, 1, params.in_channels],
                        ));
                        out.push(req(format!("{}.proj.bias", l.name), DType::F32, vec![params.out_channels]));
                    }
                }
                LayerOp::Pool { mode: PoolMode::Learned, channels } => {
                    out.push(req(format!("{}.weight", l.name), DType::I8, vec![*channels, 2, 2, *channels]));
                    out.push(req(format!("{}.bias", l.name), DType::F32, vec![*channels]));
                    out.push(req(format!("{}.out", l.name), DType::I8, vec![]));
                }
                LayerOp::Pool { .. } => {}
            }
        }
        out
    }

    /// Multiply-accumulates of one forward pass on an `h x w` image.
    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let mut dims: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        let mut total = 0u64;
        for l in &self.layers {
            let (ih, iw) = match l.input {
                Source::Image => (height, width),
                Source::Layer(j) => dims[j],
            };
            match &l.op {
                LayerOp::Conv { params, .. } => {
                    total += params.macs(ih, iw);
                    dims.push((ih, iw));
                }
                LayerOp::Pool { mode, channels } => {
                    if *mode == PoolMode::Learned {
                        total += ((ih / 2) * (iw / 2) * 4 * channels * channels) as u64;
                    }
                    dims.push((ih / 2, iw / 2));
                }
            }
        }
        total
    }
}
