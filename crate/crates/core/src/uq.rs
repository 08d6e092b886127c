//! Predictive distributions from trained models.
//!
//! Two epistemic estimators are provided: Monte Carlo dropout (T stochastic
//! passes with dropout active and batch norm on running statistics) and
//! deep ensembles (K members evaluated deterministically). Both decompose
//! predictive variance into an aleatoric part (the Gaussian head's
//! predicted variance, averaged across passes/members) and an epistemic
//! part (the population variance of the per-pass/per-member means), and
//! the total is always their exact sum.
//!
//! Variance normalization is population style (1/T and 1/K), not sample
//! style.

use crate::autodiff::Mode;
use crate::backbone::{HeadKind, Model};
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::rng::stream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::{BufRead, Write};
use std::path::Path;

/// Default number of MC-dropout passes. The source protocol does not state
/// a value; this is artifact configuration, chosen for desk-scale runs.
pub const DEFAULT_MC_PASSES: usize = 20;

/// Per-example predictive distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mu: f64,
    pub var_ale: f64,
    pub var_epi: f64,
    pub var_total: f64,
}

impl PredictiveDistribution {
    /// Construct with `var_total` as the exact sum of the two components.
    pub fn new(mu: f64, var_ale: f64, var_epi: f64) -> Self {
        PredictiveDistribution {
            mu,
            var_ale,
            var_epi,
            var_total: var_ale + var_epi,
        }
    }
}

/// A central interval level under the Gaussian convention:
/// `alpha = 2 * (1 - Phi(z))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalLevel {
    pub z: f64,
    pub alpha: f64,
}

/// The one-sigma level (nominal coverage ~68%). Alpha digits are fixed
/// artifact constants.
pub const LEVEL_1SIGMA: IntervalLevel = IntervalLevel {
    z: 1.0,
    alpha: 0.317311,
};
/// The two-sigma level (nominal coverage ~95%).
pub const LEVEL_2SIGMA: IntervalLevel = IntervalLevel {
    z: 2.0,
    alpha: 0.045500,
};

impl IntervalLevel {
    /// Build a level from z, deriving alpha from the normal CDF.
    pub fn from_z(z: f64) -> Result<Self> {
        if !(z > 0.0) {
            return Err(Error::validation("interval z must be positive"));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(IntervalLevel {
            z,
            alpha: 2.0 * (1.0 - normal.cdf(z)),
        })
    }

    /// Check the `alpha = 2(1 - Phi(z))` consistency invariant.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (self.alpha - 2.0 * (1.0 - normal.cdf(self.z))).abs() <= tol
    }
}

/// Central prediction interval `mu ± z * sqrt(var_total)`.
pub fn interval(pd: &PredictiveDistribution, level: IntervalLevel) -> (f64, f64) {
    let half = level.z * pd.var_total.sqrt();
    (pd.mu - half, pd.mu + half)
}

/// MC-dropout prediction for one signal: T stochastic passes, rng streams
/// keyed by `(seed, segment_index, pass)` so segments can be processed in
/// parallel reproducibly.
pub fn mcd_predict(
    model: &Model,
    signal: &[f64],
    passes: usize,
    seed: u64,
    segment_index: u64,
) -> Result<PredictiveDistribution> {
    let stochastic = model.config.dropout_rate > 0.0;
    if stochastic && passes < 2 {
        return Err(Error::validation(
            "mc-dropout on a stochastic model needs at least 2 passes",
        ));
    }
    if !stochastic && model.config.head == HeadKind::Point {
        return Err(Error::validation(
            "no uncertainty source: point head with dropout rate 0",
        ));
    }
    let effective_passes = if stochastic { passes } else { 1 };
    let mut mus = Vec::with_capacity(effective_passes);
    let mut vars = Vec::with_capacity(effective_passes);
    for t in 0..effective_passes {
        let mut rng = stream(seed, &[segment_index, t as u64]);
        let (mu, var) = model.predict_one(signal, Mode::McDropout, &mut rng)?;
        mus.push(mu);
        if let Some(v) = var {
            vars.push(v);
        }
    }
    Ok(combine_passes(&mus, &vars))
}

/// Deep-ensemble prediction: every member runs deterministically in eval
/// mode; the mean spread is the epistemic part, the average predicted
/// variance the aleatoric part.
pub fn ensemble_predict(members: &[&Model], signal: &[f64]) -> Result<PredictiveDistribution> {
    if members.is_empty() {
        return Err(Error::validation("ensemble_predict needs at least one member"));
    }
    let mut mus = Vec::with_capacity(members.len());
    let mut vars = Vec::with_capacity(members.len());
    for m in members {
        let mut rng = stream(0, &[]); // eval mode consumes no randomness
        let (mu, var) = m.predict_one(signal, Mode::Eval, &mut rng)?;
        mus.push(mu);
        if let Some(v) = var {
            vars.push(v);
        }
    }
    Ok(combine_passes(&mus, &vars))
}

/// Population mean/variance combination shared by MCD and DE.
fn combine_passes(mus: &[f64], vars: &[f64]) -> PredictiveDistribution {
    let k = mus.len() as f64;
    let mu = mus.iter().sum::<f64>() / k;
    let var_epi = mus.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / k;
    let var_ale = if vars.is_empty() {
        0.0
    } else {
        vars.iter().sum::<f64>() / vars.len() as f64
    };
    PredictiveDistribution::new(mu, var_ale, var_epi)
}

/// One scored prediction: the ground truth, the predictive distribution,
/// and optionally explicit intervals (set by interval-native recalibration;
/// otherwise intervals derive from the Gaussian assumption).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub segment_id: String,
    pub y_true: f64,
    pub pd: PredictiveDistribution,
    /// Explicit [1-sigma, 2-sigma] intervals, when interval-native.
    pub intervals: Option<[(f64, f64); 2]>,
}

impl PredRecord {
    /// Interval at one of the two standard levels (0 = 1σ, 1 = 2σ).
    pub fn interval_at(&self, level_idx: usize) -> (f64, f64) {
        match &self.intervals {
            Some(iv) => iv[level_idx],
            None => interval(&self.pd, [LEVEL_1SIGMA, LEVEL_2SIGMA][level_idx]),
        }
    }
}

/// Inference mode for dataset-level prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Mcd,
    Ensemble,
}

/// Predict a whole segment list. Parallel over segments; deterministic.
pub fn predict_dataset(
    members: &[&Model],
    segments: &[&Segment],
    mode: PredictMode,
    passes: usize,
    seed: u64,
) -> Result<Vec<PredRecord>> {
    if members.is_empty() {
        return Err(Error::validation("predict_dataset needs at least one model"));
    }
    segments
        .par_iter()
        .enumerate()
        .map(|(i, seg)| {
            let pd = match mode {
                PredictMode::Mcd => {
                    mcd_predict(members[0], &seg.signal, passes, seed, i as u64)?
                }
                PredictMode::Ensemble => ensemble_predict(members, &seg.signal)?,
            };
            Ok(PredRecord {
                segment_id: format!("{i}"),
                y_true: seg.target,
                pd,
                intervals: None,
            })
        })
        .collect()
}

const BASE_HEADER: &str = "segment_id,y_true,mu,var_ale,var_epi,var_total";
const INTERVAL_HEADER: &str =
    "segment_id,y_true,mu,var_ale,var_epi,var_total,lo1,hi1,lo2,hi2";

/// Write predictions as CSV. Interval columns appear only when some record
/// carries explicit intervals.
pub fn save_predictions(path: impl AsRef<Path>, records: &[PredRecord]) -> Result<()> {
    let with_intervals = records.iter().any(|r| r.intervals.is_some());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "{}",
        if with_intervals {
            INTERVAL_HEADER
        } else {
            BASE_HEADER
        }
    )?;
    for r in records {
        write!(
            w,
            "{},{},{},{},{},{}",
            r.segment_id, r.y_true, r.pd.mu, r.pd.var_ale, r.pd.var_epi, r.pd.var_total
        )?;
        if with_intervals {
            let iv = r
                .intervals
                .ok_or_else(|| Error::validation("mixed interval/plain prediction records"))?;
            write!(w, ",{},{},{},{}", iv[0].0, iv[0].1, iv[1].0, iv[1].1)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Read predictions written by [`save_predictions`].
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(Error::validation("empty predictions file")),
    };
    let with_intervals = match header.trim() {
        h if h == INTERVAL_HEADER => true,
        h if h == BASE_HEADER => false,
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("unknown predictions header: {other}"),
            })
        }
    };
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if with_intervals { 10 } else { 6 };
        if fields.len() != expected {
            return Err(parse_err(
                idx + 1,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(idx + 1, format!("field {}: {e}", i + 1)))
        };
        let pd = PredictiveDistribution {
            mu: num(2)?,
            var_ale: num(3)?,
            var_epi: num(4)?,
            var_total: num(5)?,
        };
        let intervals = if with_intervals {
            Some([(num(6)?, num(7)?), (num(8)?, num(9)?)])
        } else {
            None
        };
        out.push(PredRecord {
            segment_id: fields[0].to_string(),
            y_true: num(1)?,
            pd,
            intervals,
        });
    }
    Ok(out)
}
