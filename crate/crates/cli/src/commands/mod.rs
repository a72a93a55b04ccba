pub mod bench;
pub mod eval;
pub mod extract;
pub mod generate;
pub mod matching;
pub mod search;

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use zippy_core::netgraph::{load_weights, DecodeConfig, DescriptorKind, ExtractConfig, Network, NetworkSpec};

use crate::args::{DecodeArgs, PresetArg};

pub fn load_network(path: &Path, float_reference: bool) -> anyhow::Result<Network> {
    let store = load_weights(path).with_context(|| format!("reading weights {}", path.display()))?;
    let net = Network::from_store(&store).with_context(|| format!("binding weights {}", path.display()))?;
    Ok(if float_reference { net.to_float_reference() } else { net })
}

pub fn extract_config(d: &DecodeArgs, max_keypoints: usize, kind: DescriptorKind) -> ExtractConfig {
    ExtractConfig {
        decode: DecodeConfig {
            max_keypoints,
            nms_radius: d.nms_radius,
            score_floor: d.score_floor,
        },
        kind,
        k: d.k,
    }
}

pub fn preset_spec(p: PresetArg) -> NetworkSpec {
    match p {
        PresetArg::Mixed => NetworkSpec::mixed_precision(),
        PresetArg::Baseline => NetworkSpec::baseline(),
    }
}

/// Milliseconds spent in `f`.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64() * 1e3)
}
