use anyhow::Context;
use zippy_core::imageio::write_atomic;
use zippy_core::mpsearch::{
    traverse, BlockId, Evaluator, LatencyEvaluator, Lexicographic, ReplayEvaluator, SearchSpace, SearchTrace,
    Selector, Tolerance,
};

use crate::args::{EvaluatorArg, SearchArgs, SelectorArg};
use crate::report::{kv, num, Table};

fn print_trace(trace: &SearchTrace, space: &SearchSpace) {
    let mut t = Table::new(&["block", "candidate", "score", "latency ms", ""]);
    for d in &trace.decisions {
        for (i, e) in d.evaluations.iter().enumerate() {
            t.row(vec![
                d.block.to_string(),
                e.label.clone(),
                num(e.score, 3),
                num(e.latency_ms, 2),
                if i == d.selected { "*".into() } else { String::new() },
            ]);
        }
    }
    print!("{}", t.render());
    let final_blocks: Vec<String> = BlockId::ALL
        .iter()
        .map(|b| format!("{b}={}", b.label_of(&trace.final_spec)))
        .collect();
    print!(
        "{}",
        kv(&[
            ("selector", trace.selector.clone()),
            (
                "evaluations",
                format!(
                    "{} (sum of candidates {}, exhaustive product {})",
                    trace.evaluations,
                    space.candidate_sum(),
                    space.candidate_product()
                ),
            ),
            ("final", final_blocks.join(" ")),
            ("complete", trace.complete.to_string()),
        ])
    );
}

pub fn run(a: &SearchArgs) -> anyhow::Result<()> {
    let space = match &a.space_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SearchSpace::parse(&text).with_context(|| format!("search space {}", p.display()))?
        }
        None => SearchSpace::layer_partitioning(),
    };
    let evaluator: Box<dyn Evaluator> = match a.evaluator {
        EvaluatorArg::Replay => Box::new(ReplayEvaluator::layer_partitioning()),
        EvaluatorArg::Latency => Box::new(LatencyEvaluator {
            width: a.image_size.width,
            height: a.image_size.height,
            repetitions: a.reps as usize,
            warmup: 1,
            seed: a.seed,
        }),
    };
    let selector: Box<dyn Selector> = match (a.selector, a.evaluator) {
        (SelectorArg::Tolerance, _) | (SelectorArg::Auto, EvaluatorArg::Replay) => Box::new(Tolerance::default()),
        (SelectorArg::Lexicographic, _) | (SelectorArg::Auto, EvaluatorArg::Latency) => Box::new(Lexicographic),
    };
    let write = |trace: &SearchTrace| {
        write_atomic(&a.trace_out, trace.to_json().as_bytes())
            .with_context(|| format!("writing {}", a.trace_out.display()))
    };
    match traverse(&space, evaluator.as_ref(), selector.as_ref()) {
        Ok(trace) => {
            write(&trace)?;
            print_trace(&trace, &space);
            Ok(())
        }
        Err(failure) => {
            write(&failure.partial)?;
            print_trace(&failure.partial, &space);
            Err(anyhow::Error::from(*failure))
        }
    }
}
