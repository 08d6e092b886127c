//! Dataset representation and file I/O.
//!
//! The canonical on-disk format is JSONL: one record per line,
//! `{"subject_id": "...", "target": <number>, "signal": [<numbers>]}`.
//! It is streamable, diffable and language-neutral, and float targets
//! round-trip bit-exactly through the shortest-decimal serializer.

pub mod split;
pub mod synth;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub use split::{split_by_subject, DatasetSplits, SplitsManifest};
pub use synth::{generate_synthetic, NoiseProfile, SyntheticShiftSpec};

/// Minimum signal length accepted anywhere in the pipeline; shorter inputs
/// cannot survive the strided pooling stem.
pub const MIN_SIGNAL_LEN: usize = 16;

/// One input signal with its scalar regression target and subject id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub subject_id: String,
    pub target: f64,
    pub signal: Vec<f64>,
}

impl Segment {
    pub fn new(subject_id: impl Into<String>, target: f64, signal: Vec<f64>) -> Result<Self> {
        let seg = Segment {
            subject_id: subject_id.into(),
            target,
            signal,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal.len() < MIN_SIGNAL_LEN {
            return Err(Error::validation(format!(
                "signal for subject {} has length {}, minimum is {MIN_SIGNAL_LEN}",
                self.subject_id,
                self.signal.len()
            )));
        }
        if !self.target.is_finite() {
            return Err(Error::validation(format!(
                "non-finite target for subject {}",
                self.subject_id
            )));
        }
        if let Some(i) = self.signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite sample at index {i} for subject {}",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Load segments from a JSONL file, preserving line order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Segment>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut segments = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: Segment = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        seg.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg,
            },
            other => other,
        })?;
        segments.push(seg);
    }
    Ok(segments)
}

/// Write segments as JSONL; inverse of [`load_dataset`].
pub fn save_dataset(path: impl AsRef<Path>, segments: &[Segment]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for seg in segments {
        serde_json::to_writer(&mut w, seg).map_err(|e| Error::validation(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Arithmetic mean, population standard deviation, and count of targets.
pub fn label_stats(segments: &[Segment]) -> Result<(f64, f64, usize)> {
    if segments.is_empty() {
        return Err(Error::validation("label_stats on empty segment set"));
    }
    let n = segments.len() as f64;
    let mean = segments.iter().map(|s| s.target).sum::<f64>() / n;
    let var = segments
        .iter()
        .map(|s| (s.target - mean) * (s.target - mean))
        .sum::<f64>()
        / n;
    Ok((mean, var.sqrt(), segments.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: &str, target: f64) -> Segment {
        Segment::new(id, target, vec![0.0; MIN_SIGNAL_LEN]).unwrap()
    }

    #[test]
    fn jsonl_round_trip_preserves_order_and_targets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let segs = vec![
            seg("a", 1.25),
            seg("b", -0.1 + 0.2), // deliberately non-representable exactly
            seg("a", 3.0),
        ];
        save_dataset(&path, &segs).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded, segs);
        // bit-exact targets
        for (l, s) in loaded.iter().zip(&segs) {
            assert_eq!(l.target.to_bits(), s.target.to_bits());
        }
    }

    #[test]
    fn empty_file_gives_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn nan_sample_is_a_parse_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&seg("a", 1.0)).unwrap();
        // JSON has no NaN literal; a string where a number belongs exercises
        // the malformed-line path, and a null sample the validation path.
        std::fs::write(&path, format!("{good}\n{{\"subject_id\":\"b\",\"target\":1.0,\"signal\":[\"NaN\",0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]}}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn short_signal_rejected() {
        assert!(Segment::new("a", 1.0, vec![0.0; MIN_SIGNAL_LEN - 1]).is_err());
    }

    #[test]
    fn label_stats_examples() {
        let s = vec![seg("a", 1.0), seg("a", 1.0), seg("b", 1.0)];
        assert_eq!(label_stats(&s).unwrap(), (1.0, 0.0, 3));
        let s = vec![seg("a", 0.0), seg("b", 2.0)];
        let (m, sd, n) = label_stats(&s).unwrap();
        assert_eq!((m, sd, n), (1.0, 1.0, 2));
        assert!(label_stats(&[]).is_err());
    }
}
