use anyhow::Context;
use zippy_core::homeval::hpatches::{synthetic_sequence, write_sequence};
use zippy_core::homeval::AugmentationConfig;
use zippy_core::netgraph::fixtures::{fixture_image, golden_fixtures, random_store};
use zippy_core::netgraph::{save_weights, Graph, NetworkSpec};

use super::preset_spec;
use crate::args::{InitWeightsArgs, SynthDatasetArgs};
use crate::failure::CliError;
use crate::report::{kv, num};

pub fn init_weights(a: &InitWeightsArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            NetworkSpec::from_text(&text).with_context(|| format!("network description {}", p.display()))?
        }
        None => preset_spec(a.preset),
    };
    if let Some(c) = &a.channels {
        spec.channels = c
            .as_slice()
            .try_into()
            .map_err(|_| CliError::config(format!("--channels needs four widths, got {}", c.len())))?;
    }
    spec.head_width = a.head_width.unwrap_or(spec.head_width);
    spec.descriptor_dim = a.descriptor_dim.unwrap_or(spec.descriptor_dim);
    let graph = Graph::build(&spec)?;
    let store = random_store(&spec, a.seed, &fixture_image())?;
    save_weights(&store, &a.out)?;
    let mut lines = vec![
        ("weights", a.out.display().to_string()),
        ("records", store.len().to_string()),
        ("layers", graph.layers().len().to_string()),
        ("MMACs at 240x320", num(graph.macs(240, 320) as f64 / 1e6, 1)),
    ];
    if let Some(path) = &a.fixtures {
        let archive = golden_fixtures(&store, &fixture_image())?;
        archive.write(path)?;
        lines.push(("fixtures", format!("{} ({} tensors)", path.display(), archive.tensors.len())));
    }
    print!("{}", kv(&lines));
    print!("{}", spec.to_text());
    Ok(())
}

pub fn synth_dataset(a: &SynthDatasetArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.sequences {
        let seed = a.seed.wrapping_add(i as u64);
        let cfg = if a.identity {
            AugmentationConfig::identity(seed)
        } else {
            AugmentationConfig::moderate(seed)
        };
        let seq = synthetic_sequence(&format!("seq_{i:03}"), a.width, a.height, a.views as usize, &cfg)?;
        let dir = write_sequence(&a.out, &seq)?;
        println!("{} ({} views)", dir.display(), seq.pairs.len() + 1);
    }
    Ok(())
}
