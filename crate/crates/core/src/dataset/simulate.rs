use super::DatasetError;
use crate::ffd::{dense_field, magnitude_map, sample_random_grid, warp_volume, ControlGrid, DeformationSpec};
use crate::landmarks::LandmarkSet;
use crate::seed::deformation_seed;
use crate::volume::Volume;

/// One co-registered MRI/iUS pair on a shared grid.
#[derive(Debug, Clone)]
pub struct CaseVolumes {
    pub patient_id: String,
    pub mri: Volume,
    pub ius: Volume,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub index: usize,
    pub seed: u64,
    pub warped_ius: Volume,
    /// `|d(x)|` in mm on the (unchanged) voxel grid.
    pub error: Volume,
    pub grid: ControlGrid,
}

/// Draws deformation `index` of a case. `spec.seed` is the cohort seed; the
/// grid seed is derived from it, the patient id and the index.
pub fn simulate_deformation(
    case: &CaseVolumes,
    spec: &DeformationSpec,
    index: usize,
) -> Result<Deformation, DatasetError> {
    if case.mri.geometry() != case.ius.geometry() {
        return Err(DatasetError::GeometryMismatch(format!(
            "patient {}: MRI and iUS grids differ ({:?} vs {:?})",
            case.patient_id,
            case.mri.dims(),
            case.ius.dims()
        )));
    }
    let seed = deformation_seed(spec.seed, &case.patient_id, index);
    let grid_spec = DeformationSpec { seed, ..*spec };
    let grid = sample_random_grid(&grid_spec, case.ius.geometry())?;
    let field = dense_field(&grid, case.ius.geometry())?;
    let warped_ius = warp_volume(&case.ius, &field)?;
    let error = magnitude_map(&field);
    Ok(Deformation { index, seed, warped_ius, error, grid })
}

pub fn simulate_case(
    case: &CaseVolumes,
    spec: &DeformationSpec,
    n_deformations: usize,
) -> Result<Vec<Deformation>, DatasetError> {
    if n_deformations == 0 {
        return Err(DatasetError::InvalidOption("n_deformations must be >= 1".into()));
    }
    (0..n_deformations).map(|k| simulate_deformation(case, spec, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Landmark;
    use crate::volume::{Geometry, Modality};

    fn case() -> CaseVolumes {
        let g = Geometry::new([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let mri = Volume::from_fn(g, Modality::Mri, |p| ((p[0] * 0.7).sin() + p[1] * 0.1) as f32).unwrap();
        let ius = Volume::from_fn(g, Modality::Ius, |p| ((p[2] * 0.5).cos() + 1.0) as f32).unwrap();
        let landmarks = LandmarkSet::new(vec![Landmark { id: "a".into(), position: [6.0; 3] }]).unwrap();
        CaseVolumes { patient_id: "p1".into(), mri, ius, landmarks }
    }

    #[test]
    fn ten_distinct_deformations() {
        let defs = simulate_case(&case(), &DeformationSpec::published(5), 10).unwrap();
        assert_eq!(defs.len(), 10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(defs[i].grid, defs[j].grid);
            }
        }
        assert!(defs.iter().all(|d| d.error.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let c = case();
        let spec = DeformationSpec { max_displacement_mm: 0.0, ..DeformationSpec::published(5) };
        for d in simulate_case(&c, &spec, 3).unwrap() {
            assert_eq!(d.warped_ius, c.ius);
            assert!(d.error.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic() {
        let spec = DeformationSpec::published(99);
        assert_eq!(simulate_case(&case(), &spec, 2).unwrap(), simulate_case(&case(), &spec, 2).unwrap());
    }

    #[test]
    fn mismatched_geometry() {
        let mut c = case();
        let g = Geometry::new([12, 12, 11], [1.0; 3], [0.0; 3]).unwrap();
        c.ius = Volume::zeros(g, Modality::Ius).unwrap();
        assert!(matches!(simulate_case(&c, &DeformationSpec::published(1), 1), Err(DatasetError::GeometryMismatch(_))));
    }
}
