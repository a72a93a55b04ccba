use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;
use zippy_core::matcher::{bench_match, bench_sets, median, BenchReport, DescriptorSet};
use zippy_core::netgraph::fixtures::{fixture_image, noise_image, random_store};
use zippy_core::netgraph::{load_weights, pad_to_cell, Network, NetworkSpec};

use super::{preset_spec, timed};
use crate::args::{BenchArgs, BenchMatchArgs};
use crate::report::{num, write_json, Table};

#[derive(Debug, Serialize)]
struct PathTiming {
    samples_ms: Vec<f64>,
    median_ms: f64,
    fps: f64,
}

impl PathTiming {
    fn new(samples_ms: Vec<f64>) -> Self {
        let median_ms = median(&samples_ms);
        PathTiming {
            fps: 1000.0 / median_ms,
            median_ms,
            samples_ms,
        }
    }
}

#[derive(Debug, Serialize)]
struct SizeEntry {
    height: usize,
    width: usize,
    /// Multiply-accumulates of one forward pass, counting binary layers too.
    macs: u64,
    quantized: PathTiming,
    float_reference: PathTiming,
    /// Float reference median over quantized median.
    speedup: f64,
}

#[derive(Debug, Serialize)]
struct BenchOutput {
    weights: Option<PathBuf>,
    spec: NetworkSpec,
    repetitions: usize,
    warmup: usize,
    seed: u64,
    sizes: Vec<SizeEntry>,
}

pub fn run(a: &BenchArgs) -> anyhow::Result<()> {
    let store = match &a.weights {
        Some(p) => load_weights(p).with_context(|| format!("reading weights {}", p.display()))?,
        None => random_store(&preset_spec(a.preset), a.seed, &fixture_image())?,
    };
    let net = Network::from_store(&store)?;
    let reference = net.to_float_reference();
    let cell = net.spec().cell;
    let reps = a.reps as usize;

    let mut sizes = Vec::new();
    for size in &a.image_size {
        let img = pad_to_cell(&noise_image(size.width, size.height, a.seed), cell)?;
        for _ in 0..a.warmup {
            net.forward(&img)?;
            reference.forward(&img)?;
        }
        // Interleaved so that drift affects both paths alike.
        let (mut q, mut f) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
        for _ in 0..reps {
            let (r, ms) = timed(|| net.forward(&img));
            r?;
            q.push(ms);
            let (r, ms) = timed(|| reference.forward(&img));
            r?;
            f.push(ms);
        }
        let (quantized, float_reference) = (PathTiming::new(q), PathTiming::new(f));
        sizes.push(SizeEntry {
            height: size.height,
            width: size.width,
            macs: net.graph().macs(img.height(), img.width()),
            speedup: float_reference.median_ms / quantized.median_ms,
            quantized,
            float_reference,
        });
    }

    let mut t = Table::new(&["size", "MMACs", "quant ms", "quant FPS", "float ms", "float FPS", "speedup"]);
    for s in &sizes {
        t.row(vec![
            format!("{}x{}", s.height, s.width),
            num(s.macs as f64 / 1e6, 1),
            num(s.quantized.median_ms, 2),
            num(s.quantized.fps, 2),
            num(s.float_reference.median_ms, 2),
            num(s.float_reference.fps, 2),
            format!("{}x", num(s.speedup, 2)),
        ]);
    }
    print!("{}", t.render());
    println!("{reps} timed repetition(s) per path, median reported");
    if let Some(path) = &a.report {
        write_json(
            path,
            &BenchOutput {
                weights: a.weights.clone(),
                spec: net.spec().clone(),
                repetitions: reps,
                warmup: a.warmup,
                seed: a.seed,
                sizes,
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MatchBenchOutput {
    seed: u64,
    word_parallel: BenchReport,
    bit_loop: Option<BenchReport>,
}

pub fn run_match(a: &BenchMatchArgs) -> anyhow::Result<()> {
    let reps = a.reps as usize;
    let word_parallel = bench_match(a.n, a.m, a.dim, reps, a.seed)?;
    let bit_loop = if a.bit_loop {
        let q = DescriptorSet::random(a.n, a.dim, a.seed);
        let d = DescriptorSet::random(a.m, a.dim, a.seed.wrapping_add(1));
        Some(bench_sets(&q, &d, reps, true)?)
    } else {
        None
    };

    let mut t = Table::new(&["matcher", "query", "reference", "bits", "median ms", "Mpairs/s", "matches"]);
    let mut row = |name: &str, r: &BenchReport| {
        t.row(vec![
            name.to_string(),
            r.n_query.to_string(),
            r.n_reference.to_string(),
            r.dim.to_string(),
            num(r.median_latency_ms, 3),
            num(r.pairs_per_second / 1e6, 1),
            r.matches.to_string(),
        ])
    };
    row("word-parallel", &word_parallel);
    if let Some(b) = &bit_loop {
        row("bit-loop", b);
    }
    print!("{}", t.render());
    println!("{reps} timed repetition(s), median reported");
    if let Some(path) = &a.report {
        write_json(
            path,
            &MatchBenchOutput {
                seed: a.seed,
                word_parallel,
                bit_loop,
            },
        )?;
    }
    Ok(())
}
