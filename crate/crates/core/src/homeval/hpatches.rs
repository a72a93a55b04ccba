//! HPatches-style sequence directories: `1.ppm` is the reference view,
//! `2.ppm` to `6.ppm` the other views, and `H_1_k` holds the 3x3 homography
//! from view 1 to view k as whitespace-separated numbers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::IoFormatError;
use crate::homeval::augment::{make_pair, synthetic_image, AugmentationConfig};
use crate::homeval::homography::Homography;
use crate::imageio::{read_image, write_atomic, write_image, Image};

pub const MAX_VIEWS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub reference: Image,
    /// Views 2.. with the homography from the reference into each.
    pub pairs: Vec<(Image, Homography)>,
}

pub fn parse_homography(text: &str, path: &Path) -> Result<Homography, IoFormatError> {
    let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let values = values.map_err(|e| IoFormatError::format(path, format!("bad number: {e}")))?;
    if values.len() != 9 {
        return Err(IoFormatError::format(path, format!("expected 9 values, found {}", values.len())));
    }
    Homography::from_rows([
        [values[0], values[1], values[2]],
        [values[3], values[4], values[5]],
        [values[6], values[7], values[8]],
    ])
    .map_err(|e| IoFormatError::format(path, e.to_string()))
}

pub fn format_homography(h: &Homography) -> String {
    h.rows()
        .iter()
        .map(|r| format!("{:e} {:e} {:e}", r[0], r[1], r[2]))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn view_path(dir: &Path, k: usize) -> Option<PathBuf> {
    ["ppm", "pgm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{k}.{ext}")))
        .find(|p| p.is_file())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence, IoFormatError> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ref_path = view_path(dir, 1).unwrap_or_else(|| dir.join("1.ppm"));
    let reference = read_image(&ref_path)?;
    let mut pairs = Vec::new();
    for k in 2..=MAX_VIEWS {
        let Some(img_path) = view_path(dir, k) else { break };
        let h_path = dir.join(format!("H_1_{k}"));
        let text = fs::read_to_string(&h_path).map_err(|e| IoFormatError::io(&h_path, e))?;
        pairs.push((read_image(&img_path)?, parse_homography(&text, &h_path)?));
    }
    if pairs.is_empty() {
        return Err(IoFormatError::format(dir, "sequence has no views besides 1"));
    }
    Ok(Sequence {
        name,
        reference,
        pairs,
    })
}

/// Subdirectories of `root`, sorted by name, each loaded independently.
pub fn load_dataset(root: &Path) -> Result<Vec<(String, Result<Sequence, IoFormatError>)>, IoFormatError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| IoFormatError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(IoFormatError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no sequence directories"),
        ));
    }
    Ok(dirs
        .into_iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (name, load_sequence(&d))
        })
        .collect())
}

pub fn write_sequence(root: &Path, seq: &Sequence) -> Result<PathBuf, IoFormatError> {
    let dir = root.join(&seq.name);
    fs::create_dir_all(&dir).map_err(|e| IoFormatError::io(&dir, e))?;
    write_image(&dir.join("1.ppm"), &seq.reference)?;
    for (k, (img, h)) in seq.pairs.iter().enumerate() {
        write_image(&dir.join(format!("{}.ppm", k + 2)), img)?;
        let hp = dir.join(format!("H_1_{}", k + 2));
        write_atomic(&hp, format_homography(h).as_bytes()).map_err(|e| IoFormatError::io(&hp, e))?;
    }
    Ok(dir)
}

/// Builds a synthetic sequence from a procedural image and seeded warps.
pub fn synthetic_sequence(
    name: &str,
    width: usize,
    height: usize,
    views: usize,
    cfg: &AugmentationConfig,
) -> Result<Sequence, crate::error::GeometryError> {
    let reference = synthetic_image(width, height, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let pairs = (1..views.clamp(2, MAX_VIEWS))
        .map(|_| make_pair(&reference, cfg, &mut rng))
        .collect::<Result<_, _>>()?;
    Ok(Sequence {
        name: name.to_string(),
        reference,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_missing_h_file() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synthetic_sequence("v_test", 48, 32, 3, &AugmentationConfig::moderate(7)).unwrap();
        let written = write_sequence(dir.path(), &seq).unwrap();
        let back = load_sequence(&written).unwrap();
        assert_eq!(back.reference, seq.reference);
        assert_eq!(back.pairs.len(), 2);
        for ((_, h0), (_, h1)) in seq.pairs.iter().zip(&back.pairs) {
            for (r0, r1) in h0.rows().iter().zip(h1.rows()) {
                for (a, b) in r0.iter().zip(r1) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
        let missing = written.join("H_1_3");
        fs::remove_file(&missing).unwrap();
        match load_sequence(&written) {
            Err(IoFormatError::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds[0].1.is_err());
    }

    #[test]
    fn malformed_h_and_empty_dataset() {
        assert!(parse_homography("1 0 0 0 1 0 0 0", Path::new("H")).is_err());
        assert!(parse_homography("1 0 0 0 1 0 0 0 x", Path::new("H")).is_err());
        assert_eq!(parse_homography("1 0 2 0 1 3 0 0 1", Path::new("H")).unwrap(), Homography::translation(2.0, 3.0));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoFormatError::Io { .. })));
    }
}
