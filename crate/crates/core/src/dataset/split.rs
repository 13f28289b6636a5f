use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;

pub const PUBLISHED_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignment: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitManifest {
    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, s)| **s == split).map(|(p, _)| p.as_str()).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }
}

/// `train = round(f0·n)`, `val = round(f1·n)`, `test = n − train − val`; each
/// split then gets at least one patient, taken from the largest.
fn split_counts(n: usize, fr: [f64; 3]) -> [usize; 3] {
    let train = ((fr[0] * n as f64).round() as usize).min(n);
    let val = ((fr[1] * n as f64).round() as usize).min(n - train);
    let mut c = [train, val, n - train - val];
    for i in 0..3 {
        if c[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (c[j], std::cmp::Reverse(j))).unwrap();
            c[donor] -= 1;
            c[i] += 1;
        }
    }
    c
}

pub fn make_split(patients: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitManifest, DatasetError> {
    let mut ids: Vec<String> = patients.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != patients.len() {
        return Err(DatasetError::InvalidOption("duplicate patient ids".into()));
    }
    if ids.len() < 3 {
        return Err(DatasetError::TooFewPatients(ids.len()));
    }
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DatasetError::InvalidOption(format!("fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = split_counts(ids.len(), fractions);
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        for id in it.by_ref().take(n) {
            assignment.insert(id, split);
        }
    }
    Ok(SplitManifest { assignment, fractions, seed })
}
