//! Block-wise precision search.
//!
//! The network is split into five macro-blocks. Blocks are visited from the
//! input towards the heads; every candidate of the current block is evaluated
//! with earlier blocks frozen at their chosen configuration and later blocks
//! at their defaults, and one candidate is kept before moving on. The number
//! of evaluations is the sum of the per-block candidate counts rather than
//! their product.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::SearchError;
use crate::matcher::median;
use crate::netgraph::fixtures::{fixture_image, noise_image, random_store};
use crate::netgraph::{Graph, Network, NetworkSpec, Pooling, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockId {
    FirstConv,
    Encoder,
    Pooling,
    Decoder,
    Heads,
}

impl BlockId {
    pub const ALL: [BlockId; 5] = [
        BlockId::FirstConv,
        BlockId::Encoder,
        BlockId::Pooling,
        BlockId::Decoder,
        BlockId::Heads,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BlockId::FirstConv => "first_conv",
            BlockId::Encoder => "encoder",
            BlockId::Pooling => "pooling",
            BlockId::Decoder => "decoder",
            BlockId::Heads => "heads",
        }
    }

    /// Canonical label of this block's setting in `spec`. The heads block
    /// covers the descriptor head; score and location heads stay FP.
    pub fn label_of(&self, spec: &NetworkSpec) -> &'static str {
        match self {
            BlockId::FirstConv => spec.first_conv.label(),
            BlockId::Encoder => spec.encoder.label(),
            BlockId::Pooling => spec.pooling.label(),
            BlockId::Decoder => spec.decoder.label(),
            BlockId::Heads => spec.heads.descriptor.label(),
        }
    }

    /// Returns `spec` with this block set to `label`, which is canonicalized.
    pub fn apply(&self, spec: &NetworkSpec, label: &str) -> Result<NetworkSpec, String> {
        let mut s = spec.clone();
        match self {
            BlockId::Pooling => s.pooling = label.parse::<Pooling>()?,
            _ => {
                let p: Precision = label.parse()?;
                match self {
                    BlockId::FirstConv => {
                        if matches!(p, Precision::Bin | Precision::BinR) {
                            return Err(format!("first_conv accepts FP or Int8, not {p}"));
                        }
                        s.first_conv = p
                    }
                    BlockId::Encoder => s.encoder = p,
                    BlockId::Decoder => s.decoder = p,
                    BlockId::Heads => {
                        if matches!(p, Precision::Bin | Precision::BinR) {
                            return Err(format!("heads accepts FP or Int8, not {p}"));
                        }
                        s.heads.descriptor = p
                    }
                    BlockId::Pooling => unreachable!(),
                }
            }
        }
        Ok(s)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "first_conv" | "firstconv" => Ok(BlockId::FirstConv),
            "encoder" => Ok(BlockId::Encoder),
            "pooling" | "spatial_reduction" => Ok(BlockId::Pooling),
            "decoder" => Ok(BlockId::Decoder),
            "heads" | "head" => Ok(BlockId::Heads),
            _ => Err(format!(
                "unknown block {s:?} (expected first_conv, encoder, pooling, decoder or heads)"
            )),
        }
    }
}

/// Candidate configurations of one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpace {
    pub block: BlockId,
    /// Canonical labels, in evaluation order.
    pub candidates: Vec<String>,
    /// Setting used while the block is undecided; `None` keeps the base spec.
    pub default: Option<String>,
}

impl BlockSpace {
    pub fn new(block: BlockId, candidates: &[&str], default: Option<&str>) -> Result<Self, String> {
        if candidates.is_empty() {
            return Err(format!("block {block} has no candidates"));
        }
        let probe = NetworkSpec::baseline();
        let canon = |l: &str| block.apply(&probe, l).map(|s| block.label_of(&s).to_string());
        let mut labels = Vec::with_capacity(candidates.len());
        for c in candidates {
            let l = canon(c)?;
            if labels.contains(&l) {
                return Err(format!("duplicate candidate {l} in block {block}"));
            }
            labels.push(l);
        }
        Ok(BlockSpace {
            block,
            candidates: labels,
            default: default.map(canon).transpose()?,
        })
    }
}

/// Ordered block spaces over a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub base: NetworkSpec,
    pub blocks: Vec<BlockSpace>,
}

impl SearchSpace {
    pub fn new(base: NetworkSpec, blocks: Vec<BlockSpace>) -> Result<Self, SearchError> {
        let space_err = |m: String| SearchError::Space { line: 0, message: m };
        if blocks.is_empty() {
            return Err(space_err("search space has no blocks".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.block == b.block) {
                return Err(space_err(format!("block {} listed twice", b.block)));
            }
        }
        Ok(SearchSpace { base, blocks })
    }

    /// The candidate sets explored in the layer-partitioning ablation:
    /// first conv {FP, Int8}, encoder {Int8, Bin, Bin-R}, five pooling
    /// variants, decoder {Int8, Bin-R} and descriptor head {FP, Int8}.
    /// While undecided, the encoder runs Int8, as in the first-conv rows.
    pub fn layer_partitioning() -> Self {
        let b = |id, c: &[&str], d: Option<&str>| BlockSpace::new(id, c, d).expect("valid labels");
        SearchSpace {
            base: NetworkSpec::baseline(),
            blocks: vec![
                b(BlockId::FirstConv, &["FP", "Int8"], None),
                b(BlockId::Encoder, &["Int8", "Bin", "Bin-R"], Some("Int8")),
                b(BlockId::Pooling, &["Max", "Average", "Subsample", "Learned", "EarlyLearned"], None),
                b(BlockId::Decoder, &["Int8", "Bin-R"], None),
                b(BlockId::Heads, &["FP", "Int8"], None),
            ],
        }
    }

    /// Base spec with every block default applied.
    pub fn starting_spec(&self) -> NetworkSpec {
        self.blocks.iter().fold(self.base.clone(), |s, b| match &b.default {
            Some(d) => b.block.apply(&s, d).expect("validated default"),
            None => s,
        })
    }

    pub fn candidate_sum(&self) -> usize {
        self.blocks.iter().map(|b| b.candidates.len()).sum()
    }

    pub fn candidate_product(&self) -> usize {
        self.blocks.iter().map(|b| b.candidates.len()).product()
    }

    /// Parses a space file.
    ///
    /// ```text
    /// # comment
    /// base = baseline            # or mixed; optional
    /// first_conv: FP Int8
    /// encoder: Int8 Bin Bin-R default=Int8
    /// ```
    pub fn parse(text: &str) -> Result<Self, SearchError> {
        let mut base = NetworkSpec::baseline();
        let mut blocks: Vec<BlockSpace> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |m: String| SearchError::Space { line: line_no, message: m };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=').filter(|(k, _)| !k.contains(':')) {
                match (k.trim(), v.trim()) {
                    ("base", "baseline") => base = NetworkSpec::baseline(),
                    ("base", "mixed") => base = NetworkSpec::mixed_precision(),
                    ("base", other) => return Err(err(format!("unknown base {other:?} (expected baseline or mixed)"))),
                    (other, _) => return Err(err(format!("unknown setting {other:?}"))),
                }
                continue;
            }
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `block: candidates...`, got {line:?}")))?;
            let block: BlockId = name.trim().parse().map_err(err)?;
            if blocks.iter().any(|b| b.block == block) {
                return Err(err(format!("block {block} listed twice")));
            }
            let mut candidates = Vec::new();
            let mut default = None;
            for tok in rest.split_whitespace() {
                match tok.strip_prefix("default=") {
                    Some(d) => default = Some(d),
                    None => candidates.push(tok),
                }
            }
            blocks.push(BlockSpace::new(block, &candidates, default).map_err(err)?);
        }
        if blocks.is_empty() {
            return Err(SearchError::Space {
                line: text.lines().count(),
                message: "search space has no blocks".into(),
            });
        }
        Ok(SearchSpace { base, blocks })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.base == NetworkSpec::mixed_precision() {
            out.push_str("base = mixed\n");
        }
        for b in &self.blocks {
            out.push_str(&format!("{}: {}", b.block, b.candidates.join(" ")));
            if let Some(d) = &b.default {
                out.push_str(&format!(" default={d}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: String,
    pub spec: NetworkSpec,
    /// Higher is better.
    pub score: f64,
    pub latency_ms: f64,
    /// Extra named measurements, e.g. repeatability and matching score.
    pub metrics: BTreeMap<String, f64>,
}

pub trait Evaluator: Sync {
    /// Evaluates `spec`. `active` lists the decided blocks followed by the
    /// block being decided.
    fn evaluate(&self, spec: &NetworkSpec, active: &[BlockId]) -> Result<Evaluation, String>;

    /// Whether candidates of one block may be evaluated concurrently.
    fn parallel(&self) -> bool {
        true
    }
}

pub trait Selector: Sync {
    /// Index of the chosen evaluation; `evals` is nonempty.
    fn select(&self, evals: &[Evaluation]) -> usize;

    fn name(&self) -> String;
}

/// Highest score; ties go to the lower latency, then to the earlier candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lexicographic;

impl Selector for Lexicographic {
    fn select(&self, evals: &[Evaluation]) -> usize {
        let mut best = 0;
        for (i, e) in evals.iter().enumerate().skip(1) {
            let b = &evals[best];
            if e.score > b.score || (e.score == b.score && e.latency_ms < b.latency_ms) {
                best = i;
            }
        }
        best
    }

    fn name(&self) -> String {
        "lexicographic".into()
    }
}

/// Keeps candidates whose named metrics are all within a tolerance of the
/// best value in the block, then picks the lowest latency.
#[derive(Debug, Clone, PartialEq)]
pub struct Tolerance {
    pub limits: Vec<(String, f64)>,
}

pub const REPEATABILITY: &str = "repeatability";
pub const MATCHING_SCORE: &str = "matching_score";
pub const FPS: &str = "fps";

impl Default for Tolerance {
    /// Within 0.01 repeatability and 0.02 matching score of the best.
    fn default() -> Self {
        Tolerance {
            limits: vec![(REPEATABILITY.into(), 0.01), (MATCHING_SCORE.into(), 0.02)],
        }
    }
}

impl Selector for Tolerance {
    fn select(&self, evals: &[Evaluation]) -> usize {
        // Slack absorbs decimal representation error of tabulated values.
        const SLACK: f64 = 1e-9;
        let metric = |e: &Evaluation, k: &str| e.metrics.get(k).copied().unwrap_or(e.score);
        let best: Vec<f64> = self
            .limits
            .iter()
            .map(|(k, _)| evals.iter().map(|e| metric(e, k)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let admissible = |e: &Evaluation| {
            self.limits
                .iter()
                .zip(&best)
                .all(|((k, tol), b)| metric(e, k) >= b - tol - SLACK)
        };
        let mut pick: Option<usize> = None;
        for (i, e) in evals.iter().enumerate() {
            if admissible(e) && pick.is_none_or(|p| e.latency_ms < evals[p].latency_ms) {
                pick = Some(i);
            }
        }
        pick.unwrap_or_else(|| Lexicographic.select(evals))
    }

    fn name(&self) -> String {
        let parts: Vec<String> = self.limits.iter().map(|(k, t)| format!("{k}<={t}")).collect();
        format!("tolerance({})", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub block: BlockId,
    pub evaluations: Vec<Evaluation>,
    pub selected: usize,
    pub selected_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub selector: String,
    pub decisions: Vec<BlockDecision>,
    /// Final configuration, or the configuration reached so far when the
    /// search aborted.
    pub final_spec: NetworkSpec,
    pub evaluations: usize,
    pub complete: bool,
}

impl SearchTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Error)]
#[error("{error}")]
pub struct SearchFailure {
    pub error: SearchError,
    /// Decisions completed before the failure.
    pub partial: SearchTrace,
}

/// Runs the block-by-block search.
pub fn traverse(
    space: &SearchSpace,
    evaluator: &dyn Evaluator,
    selector: &dyn Selector,
) -> Result<SearchTrace, Box<SearchFailure>> {
    let mut spec = space.starting_spec();
    let mut trace = SearchTrace {
        selector: selector.name(),
        decisions: Vec::new(),
        final_spec: spec.clone(),
        evaluations: 0,
        complete: false,
    };
    let mut active: Vec<BlockId> = Vec::new();
    for bs in &space.blocks {
        active.push(bs.block);
        let run = |label: &String| -> Result<Evaluation, SearchError> {
            let eval_err = |m: String| SearchError::Evaluation {
                label: format!("{}={label}", bs.block),
                message: m,
            };
            let candidate = bs.block.apply(&spec, label).map_err(eval_err)?;
            let mut e = evaluator.evaluate(&candidate, &active).map_err(eval_err)?;
            if !e.score.is_finite() || !e.latency_ms.is_finite() {
                return Err(eval_err(format!("non-finite result (score {}, latency {})", e.score, e.latency_ms)));
            }
            e.label = label.clone();
            e.spec = candidate;
            Ok(e)
        };
        let results: Vec<Result<Evaluation, SearchError>> = if evaluator.parallel() {
            bs.candidates.par_iter().map(run).collect()
        } else {
            bs.candidates.iter().map(run).collect()
        };
        let mut evals = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(e) => evals.push(e),
                Err(error) => {
                    trace.evaluations += evals.len();
                    return Err(Box::new(SearchFailure { error, partial: trace }));
                }
            }
        }
        trace.evaluations += evals.len();
        let selected = selector.select(&evals);
        spec = evals[selected].spec.clone();
        trace.final_spec = spec.clone();
        trace.decisions.push(BlockDecision {
            block: bs.block,
            selected_label: evals[selected].label.clone(),
            evaluations: evals,
            selected,
        });
    }
    trace.complete = true;
    Ok(trace)
}

/// One published ablation row: the settings of the decided blocks and the
/// measured repeatability, matching score and frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub settings: Vec<(BlockId, String)>,
    pub repeatability: f64,
    pub matching_score: f64,
    pub fps: f64,
}

/// Looks evaluations up in a table keyed by the settings of the active blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEvaluator {
    rows: BTreeMap<String, ReplayRow>,
}

fn replay_key(settings: &[(BlockId, String)]) -> String {
    settings
        .iter()
        .map(|(b, l)| format!("{b}={l}"))
        .collect::<Vec<_>>()
        .join("|")
}

impl ReplayEvaluator {
    pub fn new(rows: Vec<ReplayRow>) -> Self {
        ReplayEvaluator {
            rows: rows.into_iter().map(|r| (replay_key(&r.settings), r)).collect(),
        }
    }

    /// Rows of the layer-partitioning ablation (repeatability, matching
    /// score, frames per second), each keyed by the path of decided blocks.
    pub fn layer_partitioning() -> Self {
        use BlockId::*;
        let path = [
            (FirstConv, "Int8"),
            (Encoder, "Bin-R"),
            (Pooling, "EarlyLearned"),
            (Decoder, "Int8"),
        ];
        let row = |depth: usize, block: BlockId, label: &str, r: f64, m: f64, fps: f64| {
            let mut settings: Vec<(BlockId, String)> =
                path[..depth].iter().map(|(b, l)| (*b, l.to_string())).collect();
            settings.push((block, label.to_string()));
            ReplayRow {
                settings,
                repeatability: r,
                matching_score: m,
                fps,
            }
        };
        ReplayEvaluator::new(vec![
            row(0, FirstConv, "FP", 0.651, 0.574, 10.6),
            row(0, FirstConv, "Int8", 0.657, 0.577, 13.8),
            row(1, Encoder, "Int8", 0.657, 0.577, 13.8),
            row(1, Encoder, "Bin", 0.561, 0.247, 15.2),
            row(1, Encoder, "Bin-R", 0.653, 0.563, 14.5),
            row(2, Pooling, "Max", 0.653, 0.563, 14.5),
            row(2, Pooling, "Average", 0.656, 0.558, 13.9),
            row(2, Pooling, "Subsample", 0.640, 0.537, 14.4),
            row(2, Pooling, "Learned", 0.648, 0.571, 14.2),
            row(2, Pooling, "EarlyLearned", 0.656, 0.568, 16.2),
            row(3, Decoder, "Int8", 0.658, 0.569, 27.2),
            row(3, Decoder, "Bin-R", 0.655, 0.329, 30.1),
            row(4, Heads, "FP", 0.658, 0.569, 27.2),
            row(4, Heads, "Int8", 0.652, 0.571, 47.2),
        ])
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Evaluator for ReplayEvaluator {
    /// Score is repeatability; latency is `1000 / fps` milliseconds.
    fn evaluate(&self, spec: &NetworkSpec, active: &[BlockId]) -> Result<Evaluation, String> {
        let settings: Vec<(BlockId, String)> = active.iter().map(|b| (*b, b.label_of(spec).to_string())).collect();
        let key = replay_key(&settings);
        let row = self.rows.get(&key).ok_or_else(|| format!("no recorded result for {key}"))?;
        let metrics = BTreeMap::from([
            (REPEATABILITY.to_string(), row.repeatability),
            (MATCHING_SCORE.to_string(), row.matching_score),
            (FPS.to_string(), row.fps),
        ]);
        Ok(Evaluation {
            label: String::new(),
            spec: spec.clone(),
            score: row.repeatability,
            latency_ms: 1000.0 / row.fps,
            metrics,
        })
    }
}

/// Latency-only evaluator: builds the network with random calibrated
/// weights and times its forward pass. Its score is always 0, so it only
/// ranks configurations by speed; it says nothing about detection quality.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEvaluator {
    pub width: usize,
    pub height: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for LatencyEvaluator {
    fn default() -> Self {
        LatencyEvaluator {
            width: 320,
            height: 240,
            repetitions: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

impl LatencyEvaluator {
    pub fn measure(&self, spec: &NetworkSpec) -> Result<Vec<f64>, String> {
        Graph::build(spec).map_err(|e| e.to_string())?;
        let store = random_store(spec, self.seed, &fixture_image()).map_err(|e| e.to_string())?;
        let net = Network::from_store(&store).map_err(|e| e.to_string())?;
        let img = noise_image(self.width, self.height, self.seed);
        for _ in 0..self.warmup {
            net.forward(&img).map_err(|e| e.to_string())?;
        }
        let mut samples = Vec::with_capacity(self.repetitions.max(1));
        for _ in 0..self.repetitions.max(1) {
            let t = Instant::now();
            net.forward(&img).map_err(|e| e.to_string())?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(samples)
    }
}

impl Evaluator for LatencyEvaluator {
    fn evaluate(&self, spec: &NetworkSpec, _active: &[BlockId]) -> Result<Evaluation, String> {
        let samples = self.measure(spec)?;
        let latency_ms = median(&samples);
        Ok(Evaluation {
            label: String::new(),
            spec: spec.clone(),
            score: 0.0,
            latency_ms,
            metrics: BTreeMap::from([(FPS.to_string(), 1000.0 / latency_ms)]),
        })
    }

    fn parallel(&self) -> bool {
        false
    }
}
