//! Dataset ingestion: manifests, annotation rasterization, mask file I/O and
//! the synthetic data generator.

pub mod annotation;
pub mod manifest;
pub mod mask_io;
pub mod synth;

pub use annotation::{masks_to_stack, rasterize_annotation, Annotation, Shape};
pub use manifest::{parse_manifest, write_manifest};
pub use mask_io::{mask_file_name, read_masks, write_masks};
pub use synth::{synth_generate, BlobSpec, SynthConfig, SynthSample};

use crate::error::{Error, Result};
use crate::types::{DRGrade, LesionPresenceVector, CWS, FIP, HAEX, IHE, MA, NV, PHE, VHE};

/// DR grade implied by binary lesion presence, highest rule first:
/// DR4 for any of NV/vHE/pHE/FiP, DR3 for CWS or >= 20 iHE blobs,
/// DR2 for iHE or HaEx, DR1 for MA alone, else DR0.
pub fn grade_from_lesions(
    presence: &LesionPresenceVector,
    ihe_blob_count: u32,
) -> Result<DRGrade> {
    if !presence.is_binary() {
        return Err(Error::InvalidInput(
            "grade_from_lesions requires binary presence".into(),
        ));
    }
    let on = |i: usize| presence.values.get(i).copied().unwrap_or(0.0) != 0.0;
    let grade = if on(NV) || on(VHE) || on(PHE) || on(FIP) {
        4
    } else if on(CWS) || ihe_blob_count >= 20 {
        3
    } else if on(IHE) || on(HAEX) {
        2
    } else if on(MA) {
        1
    } else {
        0
    };
    DRGrade::new(grade)
}
