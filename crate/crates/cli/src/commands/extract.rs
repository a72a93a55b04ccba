use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use zippy_core::imageio::read_image;
use zippy_core::netgraph::{extract, write_detection, DescriptorKind};

use super::{extract_config, load_network, timed};
use crate::args::ExtractArgs;
use crate::report::{kv, num, write_json};

#[derive(Debug, Serialize)]
struct ExtractReport {
    image: PathBuf,
    weights: PathBuf,
    out: PathBuf,
    width: usize,
    height: usize,
    keypoints: usize,
    descriptor_dim: usize,
    k: usize,
    kind: DescriptorKind,
    float_reference: bool,
    elapsed_ms: f64,
}

pub fn run(a: &ExtractArgs) -> anyhow::Result<()> {
    let net = load_network(&a.weights, a.decode.float_reference)?;
    let img = read_image(&a.image)?;
    let kind = if a.soft { DescriptorKind::Soft } else { DescriptorKind::Binary };
    let cfg = extract_config(&a.decode, a.max_kp, kind);
    let (det, ms) = timed(|| extract(&net, &img, &cfg));
    let det = det.with_context(|| format!("extracting features from {}", a.image.display()))?;
    write_detection(&a.out, &det)?;

    let report = ExtractReport {
        image: a.image.clone(),
        weights: a.weights.clone(),
        out: a.out.clone(),
        width: det.width,
        height: det.height,
        keypoints: det.len(),
        descriptor_dim: det.descriptor_dim,
        k: det.k,
        kind,
        float_reference: a.decode.float_reference,
        elapsed_ms: ms,
    };
    print!(
        "{}",
        kv(&[
            ("image", format!("{} ({}x{})", a.image.display(), det.width, det.height)),
            ("keypoints", det.len().to_string()),
            ("descriptors", format!("{:?}, M = {}, k = {}", kind, det.descriptor_dim, det.k)),
            ("time", format!("{} ms", num(ms, 1))),
            ("output", a.out.display().to_string()),
        ])
    );
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}
