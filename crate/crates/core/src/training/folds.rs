//! Patient-grouped, label-stratified k-fold assignment.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Test-fold membership by patient id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// Patient ids of each test fold, sorted.
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| f.binary_search_by(|p| p.as_str().cmp(patient_id)).is_ok())
    }

    /// Patient id -> fold index.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(f, ids)| ids.iter().map(move |id| (id.as_str(), f)))
            .collect()
    }
}

/// Each class is shuffled (seeded) and dealt round-robin; positives continue
/// dealing from where negatives stopped so fold sizes also stay balanced.
/// Per-fold class counts therefore differ by at most one.
pub fn make_folds(patients: &[(String, u8)], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut seen = std::collections::HashSet::new();
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, label) in patients {
        if *label > 1 {
            return Err(Error::Data(format!("patient `{id}` has label {label}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("patient `{id}` listed twice")));
        }
        by_class[*label as usize].push(id);
    }
    for (class, ids) in by_class.iter().enumerate() {
        if ids.len() < k {
            return Err(Error::TooFewPatients(format!(
                "class {class} has {} patients, need at least k = {k}",
                ids.len()
            )));
        }
    }

    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for (class, ids) in by_class.iter_mut().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(seed, class as u64));
        rng.shuffle(ids);
        for id in ids.iter() {
            folds[next % k].push(id.to_string());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit { k, folds })
}
