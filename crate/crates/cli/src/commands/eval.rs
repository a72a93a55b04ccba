use std::path::PathBuf;

use serde::Serialize;
use zippy_core::homeval::hpatches::load_dataset;
use zippy_core::homeval::{run_sequence_eval, EvalConfig, MetricReport, PairMetrics, RansacConfig};
use zippy_core::netgraph::decode::DEFAULT_MAX_KEYPOINTS;
use zippy_core::netgraph::{DescriptorKind, NetworkDetector};

use super::{extract_config, load_network};
use crate::args::EvalArgs;
use crate::failure::CliError;
use crate::report::{num, write_json, Table};

#[derive(Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Serialize)]
struct SequenceEntry {
    name: String,
    status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    views: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs: Option<Vec<PairMetrics>>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    dataset: PathBuf,
    weights: PathBuf,
    float_reference: bool,
    config: EvalConfig,
    sequences: Vec<SequenceEntry>,
    evaluated: usize,
    failed: usize,
    /// Over all pairs of every evaluated sequence.
    aggregate: Option<MetricReport>,
}

/// The error with its causes, `outer: inner`.
fn describe<E: std::error::Error + Send + Sync + 'static>(e: E) -> String {
    format!("{:#}", anyhow::Error::new(e))
}

fn metric_row(name: &str, views: usize, m: &MetricReport) -> Vec<String> {
    vec![
        name.to_string(),
        views.to_string(),
        num(m.repeatability, 3),
        num(m.localization_error, 3),
        num(m.cor1, 3),
        num(m.cor3, 3),
        num(m.cor5, 3),
        num(m.matching_score, 3),
    ]
}

pub fn run(a: &EvalArgs) -> anyhow::Result<()> {
    let net = load_network(&a.weights, a.decode.float_reference)?;
    let detector = NetworkDetector::new(net, extract_config(&a.decode, DEFAULT_MAX_KEYPOINTS, DescriptorKind::Binary));
    // Fail on bad k before touching the dataset.
    detector.config.resolve_k(detector.network.spec().descriptor_dim)?;
    let dataset = load_dataset(&a.dataset_dir)?;
    let cfg = EvalConfig {
        eps_px: a.eps,
        keypoint_budget: a.max_kp,
        max_dist: a.max_dist,
        ransac: RansacConfig {
            seed: a.seed,
            ..RansacConfig::default()
        },
        ..EvalConfig::default()
    };

    let mut entries = Vec::with_capacity(dataset.len());
    let mut all_pairs: Vec<PairMetrics> = Vec::new();
    for (name, seq) in dataset {
        let outcome = seq
            .map_err(describe)
            .and_then(|s| {
                let views = s.pairs.len() + 1;
                run_sequence_eval(&s.reference, &s.pairs, &detector, &cfg)
                    .map(|r| (views, r))
                    .map_err(describe)
            });
        entries.push(match outcome {
            Ok((views, rep)) => {
                all_pairs.extend(rep.pairs.iter().cloned());
                SequenceEntry {
                    name,
                    status: Status::Ok,
                    error: None,
                    views,
                    metrics: Some(rep.aggregate),
                    pairs: a.pairs.then_some(rep.pairs),
                }
            }
            Err(error) => SequenceEntry {
                name,
                status: Status::Failed,
                error: Some(error),
                views: 0,
                metrics: None,
                pairs: None,
            },
        });
    }
    let evaluated = entries.iter().filter(|e| e.metrics.is_some()).count();
    let aggregate = (evaluated > 0).then(|| MetricReport::aggregate(&all_pairs, &cfg.thresholds));
    let report = EvalReport {
        dataset: a.dataset_dir.clone(),
        weights: a.weights.clone(),
        float_reference: a.decode.float_reference,
        config: cfg,
        failed: entries.len() - evaluated,
        evaluated,
        sequences: entries,
        aggregate,
    };
    write_json(&a.report, &report)?;

    let mut t = Table::new(&["sequence", "views", "Rep", "Loc", "Cor1", "Cor3", "Cor5", "M.Score"]);
    for e in &report.sequences {
        match &e.metrics {
            Some(m) => t.row(metric_row(&e.name, e.views, m)),
            None => t.row(vec![e.name.clone(), "-".into(), "failed".into()]),
        }
    }
    if let Some(m) = &report.aggregate {
        t.row(metric_row("all", m.pairs + report.evaluated, m));
    }
    print!("{}", t.render());
    for e in report.sequences.iter().filter(|e| e.error.is_some()) {
        eprintln!("warning: sequence {} failed: {}", e.name, e.error.as_deref().unwrap_or(""));
    }
    if report.evaluated == 0 {
        return Err(CliError::format(format!(
            "all {} sequences in {} failed",
            report.failed,
            a.dataset_dir.display()
        ))
        .into());
    }
    Ok(())
}
