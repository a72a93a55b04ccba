//! Network assembly, execution, weight container and detection output.

pub mod decode;
pub mod export;
pub mod fixtures;
pub mod graph;
pub mod network;
pub mod spec;
pub mod weights;

pub use decode::{
    decode, describe, extract, pad_to_cell, DecodeConfig, DescriptorKind, DescriptorPayload, Detection,
    ExtractConfig, Keypoint, NetworkDetector,
};
pub use export::{decode_detection, encode_detection, read_detection, write_detection};
pub use graph::{Act, BlockKind, Graph, LayerDef, LayerOp, Requirement, Source};
pub use network::{image_codes, image_params, image_tensor, Activation, HeadMaps, Network, SPEC_RECORD};
pub use spec::{BlockConfig, HeadPrecision, NetworkSpec, Pooling, Precision};
pub use weights::{load_weights, save_weights, DType, Record, WeightStore};
