//! Subject-disjoint splitting into train/val/calib/test.

use super::Segment;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Segment indices (into the source corpus) for each split. All segments
/// of one subject always land in exactly one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplits {
    pub fn split_names() -> [&'static str; 4] {
        ["train", "val", "calib", "test"]
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "calib" => Some(&self.calib),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Materialize one split by cloning the referenced segments.
    pub fn take<'a>(&self, name: &str, corpus: &'a [Segment]) -> Option<Vec<&'a Segment>> {
        self.get(name)
            .map(|idx| idx.iter().map(|&i| &corpus[i]).collect())
    }
}

/// Partition subjects (not segments) into four disjoint splits.
///
/// Subject ids are sorted, shuffled with a seeded SplitMix64 Fisher-Yates
/// pass, then allocated contiguously. The val/calib/test splits each get
/// `floor(n_subjects * fraction)` subjects and every remaining subject goes
/// to train, so no subject is ever lost to rounding.
pub fn split_by_subject(
    segments: &[Segment],
    fractions: (f64, f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplits> {
    let (f_train, f_val, f_calib, f_test) = fractions;
    let fs = [f_train, f_val, f_calib, f_test];
    if fs.iter().any(|&f| f <= 0.0) {
        return Err(Error::validation("split fractions must be positive"));
    }
    let total: f64 = fs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }

    // subject -> segment indices, in first-appearance order within subject
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, seg) in segments.iter().enumerate() {
        by_subject.entry(&seg.subject_id).or_default().push(i);
    }
    let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
    if subjects.len() < 4 {
        return Err(Error::validation(format!(
            "need at least 4 distinct subjects, got {}",
            subjects.len()
        )));
    }

    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut subjects);

    let s = subjects.len();
    let n_val = (s as f64 * f_val).floor() as usize;
    let n_calib = (s as f64 * f_calib).floor() as usize;
    let n_test = (s as f64 * f_test).floor() as usize;
    let n_train = s - n_val - n_calib - n_test;

    let mut splits = DatasetSplits {
        train: Vec::new(),
        val: Vec::new(),
        calib: Vec::new(),
        test: Vec::new(),
    };
    for (rank, subject) in subjects.iter().enumerate() {
        let bucket = if rank < n_train {
            &mut splits.train
        } else if rank < n_train + n_val {
            &mut splits.val
        } else if rank < n_train + n_val + n_calib {
            &mut splits.calib
        } else {
            &mut splits.test
        };
        bucket.extend(by_subject[subject].iter().copied());
    }
    for bucket in [
        &mut splits.train,
        &mut splits.val,
        &mut splits.calib,
        &mut splits.test,
    ] {
        bucket.sort_unstable();
    }
    Ok(splits)
}

/// On-disk splits manifest: split name -> list of (file, line-index)
/// references into the corpus JSONL (0-based lines).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitsManifest {
    pub train: Vec<(String, usize)>,
    pub val: Vec<(String, usize)>,
    pub calib: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
}

impl SplitsManifest {
    pub fn from_splits(splits: &DatasetSplits, corpus_file: &str) -> Self {
        let refs = |idx: &[usize]| {
            idx.iter()
                .map(|&i| (corpus_file.to_string(), i))
                .collect::<Vec<_>>()
        };
        SplitsManifest {
            train: refs(&splits.train),
            val: refs(&splits.val),
            calib: refs(&splits.calib),
            test: refs(&splits.test),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[(String, usize)]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "calib" => Some(&self.calib),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.as_ref().display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }
}
