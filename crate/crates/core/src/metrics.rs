//! Accuracy and calibration metrics, shift quantification, bootstrap
//! uncertainty, and the tiered statistical comparison.
//!
//! Conventions that cross-language reimplementations must match:
//! - interval scores use the fixed alpha constants of the two standard
//!   levels (0.317311 and 0.045500);
//! - bootstrap confidence intervals are percentile intervals from
//!   B segment-level resamples of the original size, deterministic per
//!   seed (replicate r draws from an rng stream keyed by `(seed, r)`);
//! - quantiles interpolate linearly between order statistics, so the IQR
//!   of {1,2,3,4,5} is exactly 2.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::uq::{PredRecord, LEVEL_1SIGMA, LEVEL_2SIGMA};
use serde::{Deserialize, Serialize};

/// Mean absolute error between point predictions and targets.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::validation("mae needs matching nonempty inputs"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| (p - y).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// MAE of a prediction set.
pub fn mae_records(records: &[PredRecord]) -> Result<f64> {
    let pred: Vec<f64> = records.iter().map(|r| r.pd.mu).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.y_true).collect();
    mae(&pred, &truth)
}

/// Interval score for a central (1-alpha) interval: the width, plus
/// `2/alpha` times the miss distance when the target escapes the interval.
pub fn winkler(lo: f64, hi: f64, y: f64, alpha: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::validation(format!(
            "interval lower bound {lo} exceeds upper bound {hi}"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::validation(format!("alpha {alpha} out of (0,1)")));
    }
    let width = hi - lo;
    Ok(if y < lo {
        width + 2.0 / alpha * (lo - y)
    } else if y > hi {
        width + 2.0 / alpha * (y - hi)
    } else {
        width
    })
}

/// Mean interval scores at the two standard levels plus their equal-weight
/// combination.
pub fn calib_summary(records: &[PredRecord]) -> Result<(f64, f64, f64)> {
    if records.is_empty() {
        return Err(Error::validation("calib_summary on empty records"));
    }
    let mut w1 = 0.0;
    let mut w2 = 0.0;
    for r in records {
        let (lo1, hi1) = r.interval_at(0);
        let (lo2, hi2) = r.interval_at(1);
        w1 += winkler(lo1, hi1, r.y_true, LEVEL_1SIGMA.alpha)?;
        w2 += winkler(lo2, hi2, r.y_true, LEVEL_2SIGMA.alpha)?;
    }
    let n = records.len() as f64;
    let (w1, w2) = (w1 / n, w2 / n);
    Ok((w1, w2, 0.5 * (w1 + w2)))
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions:
/// the area between their CDFs, integrated over the merged sample grid.
pub fn emd_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("emd_1d needs nonempty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (wa, wb) = (1.0 / sa.len() as f64, 1.0 / sb.len() as f64);

    let mut ia = 0;
    let mut ib = 0;
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut prev = f64::NAN;
    let mut total = 0.0;
    while ia < sa.len() || ib < sb.len() {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => unreachable!(),
        };
        if !prev.is_nan() && x > prev {
            total += (fa - fb as f64).abs() * (x - prev);
        }
        while ia < sa.len() && sa[ia] == x {
            fa += wa;
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == x {
            fb += wb;
            ib += 1;
        }
        prev = x;
    }
    Ok(total)
}

/// Percentile bootstrap confidence interval of a metric over segment-level
/// resamples. Returns (point estimate, lo, hi).
pub fn bootstrap_ci<F>(
    records: &[PredRecord],
    metric: F,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64, f64)>
where
    F: Fn(&[PredRecord]) -> Result<f64>,
{
    if records.is_empty() {
        return Err(Error::validation("bootstrap over empty records"));
    }
    if replicates < 100 {
        return Err(Error::validation("bootstrap needs at least 100 replicates"));
    }
    let point = metric(records)?;
    let mut stats = Vec::with_capacity(replicates);
    let mut sample = Vec::with_capacity(records.len());
    for r in 0..replicates {
        let mut rng = stream(seed, &[r as u64]);
        sample.clear();
        for _ in 0..records.len() {
            let idx = rng.next_below(records.len() as u64) as usize;
            sample.push(records[idx].clone());
        }
        stats.push(metric(&sample)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        point,
        quantile_sorted(&stats, 0.025),
        quantile_sorted(&stats, 0.975),
    ))
}

/// Paired bootstrap of a metric difference `metric(a) - metric(b)` with
/// shared resample indices. Inputs must carry identical segment ids in the
/// same order.
pub fn paired_diff<F>(
    a: &[PredRecord],
    b: &[PredRecord],
    metric: F,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64, f64)>
where
    F: Fn(&[PredRecord]) -> Result<f64>,
{
    if a.len() != b.len()
        || a.iter()
            .zip(b)
            .any(|(ra, rb)| ra.segment_id != rb.segment_id)
    {
        return Err(Error::validation(
            "paired_diff requires identical segment ids in both prediction sets",
        ));
    }
    if a.is_empty() {
        return Err(Error::validation("paired_diff over empty records"));
    }
    let point = metric(a)? - metric(b)?;
    let mut diffs = Vec::with_capacity(replicates);
    let mut res_a = Vec::with_capacity(a.len());
    let mut res_b = Vec::with_capacity(a.len());
    for r in 0..replicates {
        let mut rng = stream(seed, &[r as u64]);
        res_a.clear();
        res_b.clear();
        for _ in 0..a.len() {
            let idx = rng.next_below(a.len() as u64) as usize;
            res_a.push(a[idx].clone());
            res_b.push(b[idx].clone());
        }
        diffs.push(metric(&res_a)? - metric(&res_b)?);
    }
    diffs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok((
        point,
        quantile_sorted(&diffs, 0.025),
        quantile_sorted(&diffs, 0.975),
    ))
}

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Median and interquartile range (Q3 - Q1) across per-seed metric values.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::validation("aggregate_seeds on empty values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    Ok((median, iqr))
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::validation("spearman needs two same-length series"));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::validation("spearman undefined for constant input"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Confidence interval pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub lo: f64,
    pub hi: f64,
}

/// Per-method evaluation report with bootstrap confidence intervals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_id: String,
    pub n_segments: usize,
    pub mae: f64,
    pub winkler1: f64,
    pub winkler2: f64,
    pub summary: f64,
    pub mae_ci: Ci,
    pub winkler1_ci: Ci,
    pub winkler2_ci: Ci,
    pub summary_ci: Ci,
}

/// Evaluate one method's predictions: MAE, both interval scores, their
/// summary, and percentile bootstrap CIs for each.
pub fn evaluate(
    method_id: &str,
    records: &[PredRecord],
    replicates: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (w1, w2, summary) = calib_summary(records)?;
    let point_mae = mae_records(records)?;
    let ci = |f: &dyn Fn(&[PredRecord]) -> Result<f64>, salt: u64| -> Result<Ci> {
        let (_, lo, hi) = bootstrap_ci(records, f, replicates, seed ^ salt)?;
        Ok(Ci { lo, hi })
    };
    Ok(EvalReport {
        method_id: method_id.to_string(),
        n_segments: records.len(),
        mae: point_mae,
        winkler1: w1,
        winkler2: w2,
        summary,
        mae_ci: ci(&|r| mae_records(r), 0x6d6165)?,
        winkler1_ci: ci(&|r| Ok(calib_summary(r)?.0), 0x77_31)?,
        winkler2_ci: ci(&|r| Ok(calib_summary(r)?.1), 0x77_32)?,
        summary_ci: ci(&|r| Ok(calib_summary(r)?.2), 0x73756d)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Best,
    Tier1,
    Tier2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TierEntry {
    pub method_id: String,
    pub metric: f64,
    /// Difference to the best method, absent for the best itself.
    pub delta: Option<f64>,
    pub ci: Option<Ci>,
    pub tier: Tier,
}

/// Tiered comparison for one (slice, mode) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TierTable {
    pub slice: String,
    pub mode: String,
    pub best: String,
    pub entries: Vec<TierEntry>,
}

/// Rank methods for one slice/mode. The best method is the metric minimum
/// (method-id lexicographic tiebreak); every method whose paired-bootstrap
/// difference CI contains zero joins Tier 1; of the rest, the three
/// smallest-metric methods are reported as Tier 2.
pub fn tier_methods<F>(
    slice: &str,
    mode: &str,
    methods: &[(String, Vec<PredRecord>)],
    metric: F,
    replicates: usize,
    seed: u64,
) -> Result<TierTable>
where
    F: Fn(&[PredRecord]) -> Result<f64>,
{
    if methods.len() < 2 {
        return Err(Error::validation("tier_methods needs at least 2 methods"));
    }
    let mut points = Vec::with_capacity(methods.len());
    for (id, recs) in methods {
        points.push((id.clone(), metric(recs)?));
    }
    let best_idx = (0..points.len())
        .min_by(|&i, &j| {
            points[i]
                .1
                .partial_cmp(&points[j].1)
                .unwrap()
                .then_with(|| points[i].0.cmp(&points[j].0))
        })
        .expect("nonempty methods");
    let best_id = points[best_idx].0.clone();

    let mut entries = vec![TierEntry {
        method_id: best_id.clone(),
        metric: points[best_idx].1,
        delta: None,
        ci: None,
        tier: Tier::Best,
    }];
    let mut tier2: Vec<TierEntry> = Vec::new();
    for (i, (id, recs)) in methods.iter().enumerate() {
        if i == best_idx {
            continue;
        }
        let (delta, lo, hi) = paired_diff(
            recs,
            &methods[best_idx].1,
            &metric,
            replicates,
            stream(seed, &[i as u64]).next_u64(),
        )?;
        let entry = |tier| TierEntry {
            method_id: id.clone(),
            metric: points[i].1,
            delta: Some(delta),
            ci: Some(Ci { lo, hi }),
            tier,
        };
        if lo <= 0.0 && 0.0 <= hi {
            entries.push(entry(Tier::Tier1));
        } else {
            tier2.push(entry(Tier::Tier2));
        }
    }
    tier2.sort_by(|a, b| {
        a.metric
            .partial_cmp(&b.metric)
            .unwrap()
            .then_with(|| a.method_id.cmp(&b.method_id))
    });
    tier2.truncate(3);
    entries.extend(tier2);

    Ok(TierTable {
        slice: slice.to_string(),
        mode: mode.to_string(),
        best: best_id,
        entries,
    })
}
