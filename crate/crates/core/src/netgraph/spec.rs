//! Network configuration: per-block precisions, pooling and widths.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "FP")]
    Fp,
    Int8,
    Bin,
    #[serde(rename = "Bin-R")]
    BinR,
}

impl Precision {
    pub const ALL: [Precision; 4] = [Precision::Fp, Precision::Int8, Precision::Bin, Precision::BinR];

    pub fn label(&self) -> &'static str {
        match self {
            Precision::Fp => "FP",
            Precision::Int8 => "Int8",
            Precision::Bin => "Bin",
            Precision::BinR => "Bin-R",
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, Precision::Fp)
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp" | "fp32" | "float" => Ok(Precision::Fp),
            "int8" => Ok(Precision::Int8),
            "bin" => Ok(Precision::Bin),
            "bin-r" | "binr" => Ok(Precision::BinR),
            _ => Err(format!("unknown precision {s:?} (expected FP, Int8, Bin or Bin-R)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pooling {
    Max,
    Average,
    Subsample,
    Learned,
    /// Learned reductions moved to the start of each of the first three
    /// encoder blocks, so every encoder convolution runs at reduced size.
    EarlyLearned,
}

impl Pooling {
    pub const ALL: [Pooling; 5] = [
        Pooling::Max,
        Pooling::Average,
        Pooling::Subsample,
        Pooling::Learned,
        Pooling::EarlyLearned,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Pooling::Max => "Max",
            Pooling::Average => "Average",
            Pooling::Subsample => "Subsample",
            Pooling::Learned => "Learned",
            Pooling::EarlyLearned => "EarlyLearned",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Pooling::Learned | Pooling::EarlyLearned)
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "average" | "aver" | "avg" => Ok(Pooling::Average),
            "subsample" | "subs" | "sub.s" => Ok(Pooling::Subsample),
            "learned" | "learn" => Ok(Pooling::Learned),
            "earlylearned" | "e.learn" | "early-learned" => Ok(Pooling::EarlyLearned),
            _ => Err(format!(
                "unknown pooling {s:?} (expected Max, Average, Subsample, Learned or EarlyLearned)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadPrecision {
    pub score: Precision,
    pub location: Precision,
    pub descriptor: Precision,
}

/// Full network configuration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub first_conv: Precision,
    pub encoder: Precision,
    pub pooling: Pooling,
    pub decoder: Precision,
    pub heads: HeadPrecision,
    /// Encoder block widths.
    pub channels: [usize; 4],
    /// Width of the decoder branches.
    pub head_width: usize,
    /// Descriptor length `M`.
    pub descriptor_dim: usize,
    /// Output stride of the head maps.
    pub cell: usize,
}

pub const CELL: usize = 8;
pub const DEFAULT_CHANNELS: [usize; 4] = [32, 64, 128, 256];
pub const DEFAULT_HEAD_WIDTH: usize = 256;
pub const DEFAULT_DESCRIPTOR_DIM: usize = 256;

/// One of the five precision blocks of a [`NetworkSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockConfig {
    FirstConv(Precision),
    Encoder(Precision),
    Pooling(Pooling),
    Decoder(Precision),
    Heads(HeadPrecision),
}

impl NetworkSpec {
    /// The selected mixed-precision configuration: Int8 first convolution,
    /// Bin-R encoder, early learned pooling, Int8 decoder, float score and
    /// location heads and an Int8 descriptor head.
    pub fn mixed_precision() -> Self {
        NetworkSpec {
            first_conv: Precision::Int8,
            encoder: Precision::BinR,
            pooling: Pooling::EarlyLearned,
            decoder: Precision::Int8,
            heads: HeadPrecision {
                score: Precision::Fp,
                location: Precision::Fp,
                descriptor: Precision::Int8,
            },
            channels: DEFAULT_CHANNELS,
            head_width: DEFAULT_HEAD_WIDTH,
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            cell: CELL,
        }
    }

    /// Full-precision baseline with max pooling.
    pub fn baseline() -> Self {
        NetworkSpec {
            first_conv: Precision::Fp,
            encoder: Precision::Fp,
            pooling: Pooling::Max,
            decoder: Precision::Fp,
            heads: HeadPrecision {
                score: Precision::Fp,
                location: Precision::Fp,
                descriptor: Precision::Fp,
            },
            ..Self::mixed_precision()
        }
    }

    pub fn with_widths(mut self, channels: [usize; 4], head_width: usize, descriptor_dim: usize) -> Self {
        self.channels = channels;
        self.head_width = head_width;
        self.descriptor_dim = descriptor_dim;
        self
    }

    pub fn blocks(&self) -> [BlockConfig; 5] {
        [
            BlockConfig::FirstConv(self.first_conv),
            BlockConfig::Encoder(self.encoder),
            BlockConfig::Pooling(self.pooling),
            BlockConfig::Decoder(self.decoder),
            BlockConfig::Heads(self.heads),
        ]
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let cfg = |m: String| Err(GraphError::Config(m));
        if self.cell != CELL {
            return cfg(format!("cell size must be {CELL} (three 2x reductions), got {}", self.cell));
        }
        if self.channels.contains(&0) || self.head_width == 0 {
            return cfg("channel widths must be positive".into());
        }
        if self.descriptor_dim < 2 {
            return cfg(format!("descriptor dimension must be at least 2, got {}", self.descriptor_dim));
        }
        if matches!(self.first_conv, Precision::Bin | Precision::BinR) {
            return cfg(format!(
                "first convolution must be FP or Int8, got {} (it reads the raw image)",
                self.first_conv
            ));
        }
        if self.heads.score != Precision::Fp {
            return cfg(format!("score head requires FP, got {}", self.heads.score));
        }
        if self.heads.location != Precision::Fp {
            return cfg(format!("location head requires FP, got {}", self.heads.location));
        }
        if matches!(self.heads.descriptor, Precision::Bin | Precision::BinR) {
            return cfg(format!("descriptor head must be FP or Int8, got {}", self.heads.descriptor));
        }
        Ok(())
    }

    /// `key=value` lines, the form stored inside weight files.
    pub fn to_text(&self) -> String {
        let c = self.channels;
        format!(
            "first_conv={}\nencoder={}\npooling={}\ndecoder={}\nscore_head={}\nlocation_head={}\ndescriptor_head={}\nchannels={},{},{},{}\nhead_width={}\ndescriptor_dim={}\ncell={}\n",
            self.first_conv,
            self.encoder,
            self.pooling,
            self.decoder,
            self.heads.score,
            self.heads.location,
            self.heads.descriptor,
            c[0],
            c[1],
            c[2],
            c[3],
            self.head_width,
            self.descriptor_dim,
            self.cell
        )
    }

    /// Parses `key=value` lines; missing keys keep the mixed-precision defaults.
    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut spec = NetworkSpec::mixed_precision();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| GraphError::Config(format!("line {}: {m}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let prec = || value.parse::<Precision>().map_err(err);
            let num = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "first_conv" => spec.first_conv = prec()?,
                "encoder" => spec.encoder = prec()?,
                "pooling" => spec.pooling = value.parse().map_err(err)?,
                "decoder" => spec.decoder = prec()?,
                "score_head" => spec.heads.score = prec()?,
                "location_head" => spec.heads.location = prec()?,
                "descriptor_head" => spec.heads.descriptor = prec()?,
                "channels" => {
                    let parts: Result<Vec<usize>, _> = value.split(',').map(|p| p.trim().parse::<usize>()).collect();
                    let parts = parts.map_err(|e| err(format!("channels: {e}")))?;
                    spec.channels = parts
                        .try_into()
                        .map_err(|_| err("channels needs exactly four widths".into()))?;
                }
                "head_width" => spec.head_width = num()?,
                "descriptor_dim" => spec.descriptor_dim = num()?,
                "cell" => spec.cell = num()?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        Ok(spec)
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::mixed_precision()
    }
}
