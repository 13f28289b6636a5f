//! Landmark sets and homologous landmark pairs (world mm), read from CSV.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("file not found: {0}")]
    FileMissing(String),
    #[error("landmark format error: {0}")]
    Format(String),
    #[error("duplicate landmark id {0:?}")]
    DuplicateId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self, LandmarkError> {
        check_unique(entries.iter().map(|e| e.id.as_str()))?;
        for e in &entries {
            check_finite(&e.id, &e.position)?;
        }
        Ok(LandmarkSet { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    pub id: String,
    pub fixed: [f64; 3],
    pub moving: [f64; 3],
}

impl LandmarkPair {
    /// Displacement carrying the fixed position onto the moving one.
    pub fn target(&self) -> [f64; 3] {
        [
            self.moving[0] - self.fixed[0],
            self.moving[1] - self.fixed[1],
            self.moving[2] - self.fixed[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkPairs {
    pairs: Vec<LandmarkPair>,
}

impl LandmarkPairs {
    pub fn new(pairs: Vec<LandmarkPair>) -> Result<Self, LandmarkError> {
        check_unique(pairs.iter().map(|p| p.id.as_str()))?;
        for p in &pairs {
            check_finite(&p.id, &p.fixed)?;
            check_finite(&p.id, &p.moving)?;
        }
        Ok(LandmarkPairs { pairs })
    }

    pub fn pairs(&self) -> &[LandmarkPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), LandmarkError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(LandmarkError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

fn check_finite(id: &str, p: &[f64; 3]) -> Result<(), LandmarkError> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LandmarkError::Format(format!("landmark {id:?} has non-finite coordinates")))
    }
}

#[derive(Deserialize)]
struct PointRow {
    id: String,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

#[derive(Deserialize)]
struct PairRow {
    id: String,
    fx_mm: f64,
    fy_mm: f64,
    fz_mm: f64,
    mx_mm: f64,
    my_mm: f64,
    mz_mm: f64,
}

const POINT_HEADER: [&str; 4] = ["id", "x_mm", "y_mm", "z_mm"];
const PAIR_HEADER: [&str; 7] = ["id", "fx_mm", "fy_mm", "fz_mm", "mx_mm", "my_mm", "mz_mm"];

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<R>, LandmarkError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LandmarkError::FileMissing(path.display().to_string())
        } else {
            LandmarkError::Io(e)
        }
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found = rdr.headers().map_err(|e| LandmarkError::Format(e.to_string()))?;
    if found.iter().collect::<Vec<_>>() != header {
        return Err(LandmarkError::Format(format!(
            "{}: expected header {:?}, found {:?}",
            path.display(),
            header.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| LandmarkError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet, LandmarkError> {
    let rows: Vec<PointRow> = read_rows(path.as_ref(), &POINT_HEADER)?;
    LandmarkSet::new(
        rows.into_iter()
            .map(|r| Landmark { id: r.id, position: [r.x_mm, r.y_mm, r.z_mm] })
            .collect(),
    )
}

pub fn load_landmark_pairs(path: impl AsRef<Path>) -> Result<LandmarkPairs, LandmarkError> {
    let rows: Vec<PairRow> = read_rows(path.as_ref(), &PAIR_HEADER)?;
    LandmarkPairs::new(
        rows.into_iter()
            .map(|r| LandmarkPair {
                id: r.id,
                fixed: [r.fx_mm, r.fy_mm, r.fz_mm],
                moving: [r.mx_mm, r.my_mm, r.mz_mm],
            })
            .collect(),
    )
}

pub fn save_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<(), LandmarkError> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| LandmarkError::Format(e.to_string()))?;
    w.write_record(POINT_HEADER).map_err(|e| LandmarkError::Format(e.to_string()))?;
    for e in set.entries() {
        w.write_record([
            e.id.clone(),
            e.position[0].to_string(),
            e.position[1].to_string(),
            e.position[2].to_string(),
        ])
        .map_err(|e| LandmarkError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_landmark_pairs(pairs: &LandmarkPairs, path: impl AsRef<Path>) -> Result<(), LandmarkError> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| LandmarkError::Format(e.to_string()))?;
    w.write_record(PAIR_HEADER).map_err(|e| LandmarkError::Format(e.to_string()))?;
    for p in pairs.pairs() {
        let mut rec = vec![p.id.clone()];
        rec.extend(p.fixed.iter().chain(p.moving.iter()).map(|v| v.to_string()));
        w.write_record(rec).map_err(|e| LandmarkError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
