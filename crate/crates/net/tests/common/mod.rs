#![allow(dead_code)]

use regerr_core::dataset::synthetic::{render_subject, SyntheticSpec};
use regerr_core::dataset::{extract_patches, simulate_deformation, CaseVolumes, PatchContext, PatchRecord};
use regerr_core::DeformationSpec;

/// Landmark-centred patches from procedurally rendered subjects.
pub fn synthetic_patches(subjects: usize, deformations: usize, patch: usize, seed: u64) -> Vec<PatchRecord> {
    let spec = SyntheticSpec { subjects, landmarks_per_subject: 1, dims: 48, seed, ..SyntheticSpec::default() };
    let def = DeformationSpec::published(seed);
    let mut out = Vec::new();
    for s in 0..subjects {
        let (mri, ius, landmarks) = render_subject(&spec, s).unwrap();
        let case = CaseVolumes { patient_id: format!("case{:02}", s + 1), mri, ius, landmarks };
        for k in 0..deformations {
            let d = simulate_deformation(&case, &def, k).unwrap();
            let ctx = PatchContext { patient_id: case.patient_id.clone(), deformation_index: k, seed: d.seed };
            out.extend(extract_patches(&case.mri, &d.warped_ius, &d.error, &case.landmarks, patch, &ctx).unwrap());
        }
    }
    out
}
