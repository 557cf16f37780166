//! Synthetic fundus-like dataset generator.
//!
//! Each image is a dark circular field on a black background with colored
//! elliptical blobs, one color family per lesion class. Masks exactly cover
//! the generated blobs and the DR grade is computed from the generated
//! lesions with [`grade_from_lesions`], so the whole pipeline can be
//! exercised and verified without clinical data.

use crate::error::{Error, Result};
use crate::ingest::annotation::{rasterize_annotation, Annotation, Shape};
use crate::ingest::grade_from_lesions;
use crate::par;
use crate::tensor::Tensor;
use crate::types::{
    presence_from_maps, DRGrade, FundusImage, LesionMaskStack, LesionVocabulary, ProbMapStack,
    CWS, HAEX, IHE, MA,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Inclusive blob-count range drawn when the lesion is present.
    pub count: (u32, u32),
    /// Blob radius range in pixels (before per-blob eccentricity).
    pub radius: (f64, f64),
    /// Base RGB color of the blob, values in [0,1].
    pub color: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_side: usize,
    /// One spec per lesion, canonical vocabulary order.
    pub lesions: Vec<BlobSpec>,
    /// Sampling proportions for grades DR0..DR4 (normalized internally).
    pub grade_mix: [f64; 5],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_side: 128,
            lesions: vec![
                // MA: small bright-red dots
                BlobSpec { count: (1, 4), radius: (2.5, 4.5), color: [0.85, 0.15, 0.12] },
                // iHE: purple patches
                BlobSpec { count: (1, 4), radius: (6.0, 11.0), color: [0.45, 0.05, 0.35] },
                // HaEx: yellow deposits
                BlobSpec { count: (1, 3), radius: (7.0, 12.0), color: [0.95, 0.85, 0.25] },
                // CWS: whitish fluffy spots
                BlobSpec { count: (1, 3), radius: (7.0, 12.0), color: [0.92, 0.95, 0.90] },
                // vHE: large brown-orange haze
                BlobSpec { count: (1, 2), radius: (10.0, 16.0), color: [0.55, 0.25, 0.05] },
                // pHE: violet boat-shaped bleed
                BlobSpec { count: (1, 2), radius: (10.0, 16.0), color: [0.25, 0.05, 0.55] },
                // NV: orange vessel tufts
                BlobSpec { count: (1, 3), radius: (6.0, 11.0), color: [0.95, 0.45, 0.05] },
                // FiP: pale blue-gray membranes
                BlobSpec { count: (1, 2), radius: (10.0, 15.0), color: [0.65, 0.80, 0.90] },
            ],
            grade_mix: [0.2, 0.2, 0.2, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side % 32 != 0 || self.image_side == 0 {
            return Err(Error::Config(format!(
                "image_side {} not a positive multiple of 32",
                self.image_side
            )));
        }
        if self.lesions.len() != LesionVocabulary::default().m() {
            return Err(Error::Config("expected one blob spec per lesion".into()));
        }
        for (i, spec) in self.lesions.iter().enumerate() {
            if spec.radius.0 <= 0.0 || spec.radius.1 < spec.radius.0 {
                return Err(Error::Config(format!("bad radius range for lesion {i}")));
            }
        }
        if self.grade_mix.iter().any(|&p| p < 0.0) || self.grade_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("grade_mix must be non-negative, non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: FundusImage,
    pub masks: LesionMaskStack,
    pub grade: DRGrade,
    /// Number of iHE blobs generated (input to the grading rule).
    pub ihe_blob_count: u32,
}

/// Deterministically generate `n` labeled samples. Each sample draws from its
/// own seed-derived substream, so generation can be sharded by index.
pub fn synth_generate(config: &SynthConfig, n: usize) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let samples = par::map_indexed(n, |i| generate_one(config, i as u64));
    samples.into_iter().collect()
}

fn sample_rng(seed: u64, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed.wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn generate_one(config: &SynthConfig, index: u64) -> Result<SynthSample> {
    let mut rng = sample_rng(config.seed, index);
    let s = config.image_side;
    let m = config.lesions.len();
    let field_r = 0.47 * s as f64;
    let center = s as f64 / 2.0;

    let mut image = Tensor::zeros(s, s, 3);
    // Dark reddish field with a gentle horizontal gradient and pixel noise.
    let base = [0.32, 0.10, 0.06];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - center;
            let dy = y as f64 + 0.5 - center;
            if dx * dx + dy * dy <= field_r * field_r {
                let grad = 0.06 * (x as f64 / s as f64);
                let px = image.pixel_mut(y, x);
                for ch in 0..3 {
                    let noise = rng.gen_range(-0.02..0.02);
                    px[ch] = (base[ch] + grad + noise).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Draw the target grade, then a lesion plan consistent with it.
    let grade_target = draw_grade(&mut rng, &config.grade_mix);
    let plan = lesion_plan(&mut rng, grade_target, config);

    let mut masks = Tensor::zeros(s, s, m);
    let mut ihe_blob_count = 0u32;
    for (lesion_idx, blob_count) in plan.iter().enumerate() {
        let spec = &config.lesions[lesion_idx];
        for _ in 0..*blob_count {
            if lesion_idx == IHE {
                ihe_blob_count += 1;
            }
            let r = rng.gen_range(spec.radius.0..=spec.radius.1);
            // keep the blob fully inside the field
            let max_c = (field_r - 1.3 * r).max(1.0);
            let rho = max_c * rng.gen_range(0.0f64..1.0).sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let ecc = rng.gen_range(0.75..1.25);
            let ann = Annotation {
                lesion: LesionVocabulary::default().names()[lesion_idx].clone(),
                shape: Shape::Ellipse {
                    cx: center + rho * phi.cos(),
                    cy: center + rho * phi.sin(),
                    a: r * ecc,
                    b: r / ecc,
                    theta: rng.gen_range(0.0..std::f64::consts::PI),
                },
            };
            let blob = rasterize_annotation(&ann, s)?;
            let jitter: [f64; 3] = [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            for (pix, &inside) in blob.iter().enumerate() {
                if inside {
                    masks.data[pix * m + lesion_idx] = 1.0;
                    let p = &mut image.data[pix * 3..pix * 3 + 3];
                    for ch in 0..3 {
                        p[ch] = (spec.color[ch] + jitter[ch]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    let masks = LesionMaskStack::new(masks)?;
    let presence = presence_from_maps(&ProbMapStack {
        maps: masks.masks.clone(),
    })?;
    let grade = grade_from_lesions(&presence, ihe_blob_count)?;
    Ok(SynthSample {
        image: FundusImage::new(image)?,
        masks,
        grade,
        ihe_blob_count,
    })
}

fn draw_grade(rng: &mut ChaCha20Rng, mix: &[f64; 5]) -> u8 {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (g, &p) in mix.iter().enumerate() {
        if u < p {
            return g as u8;
        }
        u -= p;
    }
    4
}

/// Blob counts per lesion channel realizing the requested grade.
fn lesion_plan(rng: &mut ChaCha20Rng, grade: u8, config: &SynthConfig) -> Vec<u32> {
    let draw = |rng: &mut ChaCha20Rng, idx: usize| {
        let (lo, hi) = config.lesions[idx].count;
        rng.gen_range(lo..=hi)
    };
    let mut plan = vec![0u32; config.lesions.len()];
    match grade {
        0 => {}
        1 => plan[MA] = draw(rng, MA),
        2 => {
            // at least one of iHE / HaEx
            let pick = rng.gen_range(0..3);
            if pick != 1 {
                plan[IHE] = draw(rng, IHE);
            }
            if pick != 0 {
                plan[HAEX] = draw(rng, HAEX);
            }
            if rng.gen_bool(0.5) {
                plan[MA] = draw(rng, MA);
            }
        }
        3 => {
            plan[CWS] = draw(rng, CWS);
            if rng.gen_bool(0.5) {
                plan[IHE] = draw(rng, IHE);
            }
            if rng.gen_bool(0.4) {
                plan[HAEX] = draw(rng, HAEX);
            }
            if rng.gen_bool(0.4) {
                plan[MA] = draw(rng, MA);
            }
        }
        _ => {
            let dr4 = [crate::types::VHE, crate::types::PHE, crate::types::NV, crate::types::FIP];
            let main = dr4[rng.gen_range(0..4)];
            plan[main] = draw(rng, main);
            if rng.gen_bool(0.4) {
                plan[IHE] = draw(rng, IHE);
            }
            if rng.gen_bool(0.4) {
                plan[MA] = draw(rng, MA);
            }
        }
    }
    plan
}
