//! Stable seed derivation.

use sha2::{Digest, Sha256};

/// 64-bit seed from a root seed and a sequence of labelled parts, stable
/// across platforms and builds.
pub fn derive(root: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Per-deformation seed for `(cohort seed, patient, deformation index)`.
pub fn deformation_seed(cohort_seed: u64, patient_id: &str, deformation_index: usize) -> u64 {
    derive(cohort_seed, &[b"deformation", patient_id.as_bytes(), &(deformation_index as u64).to_le_bytes()])
}
