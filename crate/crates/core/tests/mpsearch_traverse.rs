use std::collections::BTreeMap;

use proptest::prelude::*;
use zippy_core::mpsearch::{
    traverse, BlockId, BlockSpace, Evaluation, Evaluator, LatencyEvaluator, Lexicographic, SearchSpace, SearchTrace,
};
use zippy_core::netgraph::{NetworkSpec, Precision};

/// Score is a sum of per-block table entries for the current spec.
struct Separable {
    table: BTreeMap<(BlockId, String), f64>,
}

impl Evaluator for Separable {
    fn evaluate(&self, spec: &NetworkSpec, _active: &[BlockId]) -> Result<Evaluation, String> {
        let score = BlockId::ALL
            .iter()
            .map(|b| self.table.get(&(*b, b.label_of(spec).to_string())).copied().unwrap_or(0.0))
            .sum();
        Ok(Evaluation { label: String::new(), spec: spec.clone(), score, latency_ms: 1.0, metrics: BTreeMap::new() })
    }
}

const OPTIONS: [(BlockId, &[&str]); 5] = [
    (BlockId::FirstConv, &["FP", "Int8"]),
    (BlockId::Encoder, &["Int8", "Bin", "Bin-R"]),
    (BlockId::Pooling, &["Max", "Average", "Subsample", "Learned", "EarlyLearned"]),
    (BlockId::Decoder, &["Int8", "Bin-R"]),
    (BlockId::Heads, &["FP", "Int8"]),
];

fn space(n_blocks: usize) -> SearchSpace {
    let blocks = OPTIONS[..n_blocks].iter().map(|(b, c)| BlockSpace::new(*b, c, None).unwrap()).collect();
    SearchSpace::new(NetworkSpec::baseline(), blocks).unwrap()
}

/// Exhaustive search over the product space.
fn brute_force(space: &SearchSpace, ev: &Separable) -> (f64, NetworkSpec) {
    let mut best: Option<(f64, NetworkSpec)> = None;
    let mut specs = vec![space.starting_spec()];
    for b in &space.blocks {
        specs = specs.iter().flat_map(|s| b.candidates.iter().map(move |c| b.block.apply(s, c).unwrap())).collect();
    }
    for s in specs {
        let e = ev.evaluate(&s, &[]).unwrap();
        if best.as_ref().is_none_or(|(v, _)| e.score > *v) {
            best = Some((e.score, s));
        }
    }
    best.unwrap()
}

#[test]
fn three_blocks_of_two_take_six_evaluations() {
    let space = SearchSpace::new(
        NetworkSpec::baseline(),
        vec![
            BlockSpace::new(BlockId::FirstConv, &["FP", "Int8"], None).unwrap(),
            BlockSpace::new(BlockId::Decoder, &["Int8", "Bin-R"], None).unwrap(),
            BlockSpace::new(BlockId::Heads, &["FP", "Int8"], None).unwrap(),
        ],
    )
    .unwrap();
    let table = BTreeMap::from([
        ((BlockId::FirstConv, "Int8".to_string()), 1.0),
        ((BlockId::Decoder, "Bin-R".to_string()), 2.0),
        ((BlockId::Heads, "FP".to_string()), 0.5),
    ]);
    let trace = traverse(&space, &Separable { table }, &Lexicographic).unwrap();
    assert_eq!(trace.evaluations, 6);
    assert_eq!(space.candidate_product(), 8);
    let picks: Vec<&str> = trace.decisions.iter().map(|d| d.selected_label.as_str()).collect();
    assert_eq!(picks, ["Int8", "Bin-R", "FP"]);
}

#[test]
fn single_block_is_plain_argmax() {
    let table = BTreeMap::from([((BlockId::Pooling, "Learned".to_string()), 3.0), ((BlockId::Pooling, "Max".to_string()), 1.0)]);
    let only = SearchSpace::new(NetworkSpec::baseline(), space(3).blocks[2..].to_vec()).unwrap();
    let trace = traverse(&only, &Separable { table }, &Lexicographic).unwrap();
    assert_eq!(trace.evaluations, 5);
    assert_eq!(trace.decisions[0].selected_label, "Learned");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn separable_scores_reach_global_optimum(values in proptest::collection::vec(-10i32..10, 14), n in 1usize..=5) {
        let mut table = BTreeMap::new();
        let mut it = values.iter();
        for (b, labels) in OPTIONS {
            for l in labels {
                table.insert((b, l.to_string()), *it.next().unwrap() as f64);
            }
        }
        let ev = Separable { table };
        let sp = space(n);
        let trace = traverse(&sp, &ev, &Lexicographic).unwrap();
        prop_assert_eq!(trace.evaluations, sp.candidate_sum());
        let total: usize = trace.decisions.iter().map(|d| d.evaluations.len()).sum();
        prop_assert_eq!(total, trace.evaluations);
        let (best, _) = brute_force(&sp, &ev);
        let got = ev.evaluate(&trace.final_spec, &[]).unwrap().score;
        prop_assert_eq!(got, best);

        // Decisions do not depend on whether later blocks exist.
        for k in 1..n {
            let shorter = traverse(&space(k), &ev, &Lexicographic).unwrap();
            for (a, b) in shorter.decisions.iter().zip(&trace.decisions) {
                prop_assert_eq!(&a.selected_label, &b.selected_label);
            }
        }
    }
}

#[test]
fn trace_serializes_round_trip() {
    let table = BTreeMap::from([((BlockId::Encoder, "Bin".to_string()), 1.0)]);
    let trace = traverse(&space(5), &Separable { table }, &Lexicographic).unwrap();
    assert_eq!(SearchTrace::from_json(&trace.to_json()).unwrap(), trace);
}

#[test]
fn latency_evaluator_orders_binary_encoder_before_float() {
    let ev = LatencyEvaluator { width: 320, height: 240, repetitions: 3, warmup: 1, seed: 1 };
    let mut fp = NetworkSpec::baseline();
    fp.decoder = Precision::Int8;
    fp.heads.descriptor = Precision::Int8;
    let mut bin = fp.clone();
    bin.encoder = Precision::Bin;
    let a = ev.evaluate(&fp, &[]).unwrap();
    let b = ev.evaluate(&bin, &[]).unwrap();
    assert_eq!(a.score, 0.0);
    eprintln!("FP encoder {:.1} ms, Bin encoder {:.1} ms", a.latency_ms, b.latency_ms);
    assert!(b.latency_ms < a.latency_ms);
}

#[test]
fn latency_evaluator_rejects_unbuildable_spec() {
    let mut spec = NetworkSpec::mixed_precision();
    spec.heads.location = Precision::Bin;
    let err = LatencyEvaluator::default().evaluate(&spec, &[]).unwrap_err();
    assert!(err.contains("location"));
}

#[test]
fn latency_search_counts_sum_of_candidates() {
    let ev = LatencyEvaluator { width: 32, height: 32, repetitions: 1, warmup: 0, seed: 2 };
    let mut sp = SearchSpace::layer_partitioning();
    sp.base = sp.base.with_widths([8, 8, 16, 16], 16, 32);
    let trace = traverse(&sp, &ev, &Lexicographic).unwrap();
    assert_eq!(trace.evaluations, 14);
    assert!(trace.decisions.iter().flat_map(|d| &d.evaluations).all(|e| e.score == 0.0));
}
