//! `<name>.json` header + `<name>.raw` little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Geometry, Modality, VolumeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub modality: Modality,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub components: usize,
}

fn one() -> usize {
    1
}

fn is_one(c: &usize) -> bool {
    *c == 1
}

impl RawHeader {
    pub fn for_geometry(g: &Geometry, modality: Modality, components: usize) -> Self {
        RawHeader {
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            dtype: "f32".into(),
            order: "x-fastest".into(),
            modality,
            components,
        }
    }

    pub fn geometry(&self) -> Result<Geometry, VolumeError> {
        Geometry::new(self.dims, self.spacing, self.origin).map_err(|e| VolumeError::Format(e.to_string()))
    }

    fn expected_values(&self) -> usize {
        self.dims.iter().product::<usize>() * self.components
    }
}

/// Header and payload paths for a raw_json stem, accepting `x.json`, `x.raw` or `x`.
pub(crate) fn paths_for(path: &Path) -> (PathBuf, PathBuf) {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => (path.with_extension("json"), path.with_extension("raw")),
        _ => {
            let mut h = path.as_os_str().to_owned();
            h.push(".json");
            let mut r = path.as_os_str().to_owned();
            r.push(".raw");
            (PathBuf::from(h), PathBuf::from(r))
        }
    }
}

pub fn read_raw_json(path: &Path) -> Result<(RawHeader, Vec<f32>), VolumeError> {
    let (hp, rp) = paths_for(path);
    let text = fs::read_to_string(&hp).map_err(|e| VolumeError::io(&hp, e))?;
    let header: RawHeader =
        serde_json::from_str(&text).map_err(|e| VolumeError::Format(format!("{}: {e}", hp.display())))?;
    if header.dtype != "f32" {
        return Err(VolumeError::UnsupportedFormat(format!("dtype {}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(VolumeError::UnsupportedFormat(format!("order {}", header.order)));
    }
    if header.components == 0 {
        return Err(VolumeError::Format("components must be >= 1".into()));
    }
    let bytes = fs::read(&rp).map_err(|e| VolumeError::io(&rp, e))?;
    let expected = header.expected_values();
    if bytes.len() != expected * 4 {
        return Err(VolumeError::Format(format!(
            "{}: dims {:?} x {} components need {} values, payload holds {} bytes",
            rp.display(),
            header.dims,
            header.components,
            expected,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

pub fn write_raw_json(path: &Path, header: &RawHeader, payload: &[f32]) -> Result<(), VolumeError> {
    if payload.len() != header.expected_values() {
        return Err(VolumeError::Format(format!(
            "payload has {} values, header expects {}",
            payload.len(),
            header.expected_values()
        )));
    }
    let (hp, rp) = paths_for(path);
    if let Some(parent) = hp.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| VolumeError::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hp, text).map_err(|e| VolumeError::io(&hp, e))?;
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&rp, bytes).map_err(|e| VolumeError::io(&rp, e))
}

#[cfg(test)]
mod tests {
    use super::super::{load_volume, save_volume, Volume, VolumeFormat};
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, Modality::Mri, (0..8).map(|x| x as f32 * 0.5).collect()).unwrap();
        let p = dir.path().join("vol.json");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p, VolumeFormat::RawJson).unwrap();
        assert_eq!(back, v);
        // the stem and raw path resolve to the same pair
        assert_eq!(load_volume(dir.path().join("vol"), VolumeFormat::RawJson).unwrap(), v);
    }

    #[test]
    fn short_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let hp = dir.path().join("bad.json");
        fs::write(
            &hp,
            r#"{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"dtype":"f32","order":"x-fastest","modality":"MRI"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("bad.raw"), vec![0u8; 7 * 4]).unwrap();
        assert!(matches!(load_volume(&hp, VolumeFormat::RawJson), Err(VolumeError::Format(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_volume("/nonexistent/where.json", VolumeFormat::RawJson).unwrap_err();
        assert!(matches!(err, VolumeError::FileMissing(ref p) if p.contains("where.json")));
    }

    #[test]
    fn half_millimetre_header() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([4, 3, 2], [0.5; 3], [-12.0, 3.5, 40.25]).unwrap();
        let v = Volume::zeros(g, Modality::Ius).unwrap();
        let p = dir.path().join("ius.json");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p, VolumeFormat::RawJson).unwrap();
        assert_eq!(back.spacing(), [0.5, 0.5, 0.5]);
        assert_eq!(back.modality(), Modality::Ius);
    }
}
