//! Dataset loading from a manifest directory and the deterministic
//! 70/10/20 split assignment.

use crate::imageio::read_rgb;
use anyhow::{bail, Context, Result};
use retlesion::ingest::{parse_manifest, read_masks};
use retlesion::train::runner::Sample;
use retlesion::types::{DRGrade, DatasetRecord, FundusImage, LesionVocabulary, Split};
use std::path::{Path, PathBuf};

/// Seeded FNV-1a, the basis of the split ranking.
fn split_hash(id: &str, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Rank image ids by seeded hash and cut at 70%/80%, so the proportions are
/// exact to within rounding (not merely expected values).
pub fn assign_splits(ids: &[String], seed: u64) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (split_hash(&ids[i], seed), ids[i].clone()));
    let n_train = ((n * 7) as f64 / 10.0).round() as usize;
    let n_val = ((n) as f64 / 10.0).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub struct LoadedDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_record(dir: &Path, record: &DatasetRecord, vocab: &LesionVocabulary) -> Result<Sample> {
    let image_path = resolve(dir, &record.image);
    let pixels = read_rgb(&image_path)?;
    let image = FundusImage::new(pixels)
        .with_context(|| format!("image {}", record.image_id))?;
    let masks_dir = match &record.masks_dir {
        Some(d) => resolve(dir, d),
        None => bail!(
            "record {} has no masks_dir; rasterized masks are required here",
            record.image_id
        ),
    };
    let masks = read_masks(&masks_dir, &record.image_id, vocab)?;
    if masks.masks.h != image.side() {
        bail!(
            "record {}: mask side {} does not match image side {}",
            record.image_id,
            masks.masks.h,
            image.side()
        );
    }
    Ok(Sample {
        image,
        masks,
        grade: DRGrade::new(record.grade)?,
    })
}

/// Read `manifest.jsonl` from `dir` and load every referenced image and
/// mask stack, bucketed by split tag.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = dir.join("manifest.jsonl");
    if !manifest.exists() {
        bail!("no manifest at {}", manifest.display());
    }
    let records = parse_manifest(&manifest)?;
    let vocab = LesionVocabulary::default();
    let mut out = LoadedDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for record in &records {
        let sample = load_record(dir, record, &vocab)?;
        match record.split {
            Split::Train => out.train.push(sample),
            Split::Val => out.val.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}
