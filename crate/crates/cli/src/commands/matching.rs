use std::path::{Path, PathBuf};

use serde::Serialize;
use zippy_core::matcher::{match_mutual_nn, match_nn, DescriptorSet, MatchPolicy};
use zippy_core::netgraph::{read_detection, DescriptorPayload, Detection};

use super::timed;
use crate::args::{MatchArgs, PolicyArg};
use crate::failure::CliError;
use crate::report::{kv, num, write_json};

#[derive(Debug, Serialize)]
struct MatchReport {
    query: PathBuf,
    reference: PathBuf,
    query_keypoints: usize,
    reference_keypoints: usize,
    descriptor_dim: usize,
    max_dist: u32,
    policy: MatchPolicy,
    pairs: usize,
    elapsed_ms: f64,
}

fn binary<'a>(det: &'a Detection, path: &Path) -> Result<&'a DescriptorSet, CliError> {
    match &det.descriptors {
        DescriptorPayload::Binary(set) => Ok(set),
        DescriptorPayload::Soft(_) => Err(CliError::format(format!(
            "{} holds soft descriptors; matching needs binary codes (extract with --binary)",
            path.display()
        ))),
    }
}

pub fn run(a: &MatchArgs) -> anyhow::Result<()> {
    let q = read_detection(&a.query)?;
    let r = read_detection(&a.reference)?;
    let (qs, rs) = (binary(&q, &a.query)?, binary(&r, &a.reference)?);
    if q.descriptor_dim != r.descriptor_dim {
        return Err(CliError::format(format!(
            "descriptor dimension mismatch: {} has M = {}, {} has M = {}",
            a.query.display(),
            q.descriptor_dim,
            a.reference.display(),
            r.descriptor_dim
        ))
        .into());
    }
    let max_dist = a.max_dist.unwrap_or(q.descriptor_dim as u32);
    let (result, ms) = timed(|| match a.policy {
        PolicyArg::Mutual => match_mutual_nn(qs, rs, max_dist),
        PolicyArg::Nn => match_nn(qs, rs, max_dist),
    });
    let result = result?;
    write_json(&a.out, &result)?;

    print!(
        "{}",
        kv(&[
            ("query", format!("{} ({} keypoints)", a.query.display(), q.len())),
            ("reference", format!("{} ({} keypoints)", a.reference.display(), r.len())),
            ("pairs", result.pairs.len().to_string()),
            ("latency", format!("{} ms", num(ms, 3))),
            ("output", a.out.display().to_string()),
        ])
    );
    if let Some(path) = &a.report {
        write_json(
            path,
            &MatchReport {
                query: a.query.clone(),
                reference: a.reference.clone(),
                query_keypoints: q.len(),
                reference_keypoints: r.len(),
                descriptor_dim: q.descriptor_dim,
                max_dist,
                policy: result.policy,
                pairs: result.pairs.len(),
                elapsed_ms: ms,
            },
        )?;
    }
    Ok(())
}
