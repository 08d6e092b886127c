//! Post-hoc recalibration on a held-out calibration split.
//!
//! Three methods, all leaving point predictions untouched:
//!
//! - **Temperature scaling**: one multiplier `tau` on predictive variance,
//!   fitted by minimizing Gaussian NLL on the calibration set. The NLL
//!   objective was chosen because its optimum has the closed form
//!   `tau* = mean((y - mu)^2 / var)`, which the golden-section search is
//!   checked against.
//! - **Isotonic regression**: a monotone map from predicted variance to
//!   empirical squared residuals, fitted by pool-adjacent-violators.
//! - **Split conformal**: per-level offsets from the finite-sample quantile
//!   of normalized absolute residuals; rewrites intervals, not variances.
//!
//! Fitting sees only calibration records by construction: the fit functions
//! take nothing else.

use crate::error::{Error, Result};
use crate::uq::{IntervalLevel, PredRecord, LEVEL_1SIGMA, LEVEL_2SIGMA};
use serde::{Deserialize, Serialize};

/// Minimum calibration points for TS/IR fits.
const MIN_CALIB_POINTS: usize = 10;
/// Lower bound applied to isotonic-calibrated variances.
pub const IR_VARIANCE_FLOOR: f64 = 1e-6;

/// Global multiplicative rescaling of predictive variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    pub tau: f64,
}

/// Monotone map from predicted variance to calibrated variance; piecewise
/// linear between breakpoints, clamped to the boundary levels outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    pub breakpoints: Vec<f64>,
    pub levels: Vec<f64>,
    pub floor: f64,
}

/// Conformal offsets `q_alpha` for a fixed set of levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalOffset {
    /// (alpha, q) pairs in fit order.
    pub q_alpha: Vec<(f64, f64)>,
    pub n_calib: usize,
}

/// A fitted recalibrator of any method, serializable to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Recalibrator {
    Ts(TemperatureScaler),
    Ir(IsotonicMap),
    Cp(ConformalOffset),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecalMethod {
    Cp,
    Ts,
    Ir,
}

impl RecalMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(RecalMethod::Cp),
            "ts" => Ok(RecalMethod::Ts),
            "ir" => Ok(RecalMethod::Ir),
            other => Err(Error::config(format!("unknown recalibration method {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RecalMethod::Cp => "cp",
            RecalMethod::Ts => "ts",
            RecalMethod::Ir => "ir",
        }
    }
}

fn check_calib(records: &[PredRecord], require_positive_var: bool) -> Result<()> {
    if records.len() < MIN_CALIB_POINTS {
        return Err(Error::validation(format!(
            "recalibration needs at least {MIN_CALIB_POINTS} calibration points, got {}",
            records.len()
        )));
    }
    if require_positive_var && records.iter().any(|r| !(r.pd.var_total > 0.0)) {
        return Err(Error::validation(
            "recalibration requires strictly positive predictive variances",
        ));
    }
    Ok(())
}

/// Fit temperature scaling by golden-section search of the mean Gaussian
/// NLL over `log tau` in [-10, 10], tolerance 1e-6.
pub fn fit_ts(calib: &[PredRecord]) -> Result<TemperatureScaler> {
    check_calib(calib, true)?;
    let nll = |log_tau: f64| -> f64 {
        let tau = log_tau.exp();
        calib
            .iter()
            .map(|r| {
                let var = tau * r.pd.var_total;
                let res = r.y_true - r.pd.mu;
                0.5 * var.ln() + res * res / (2.0 * var)
            })
            .sum::<f64>()
            / calib.len() as f64
    };
    let log_tau = golden_section_min(nll, -10.0, 10.0, 1e-6);
    Ok(TemperatureScaler {
        tau: log_tau.exp(),
    })
}

/// Golden-section minimization of a unimodal function on [lo, hi].
fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Rescale a record's variance components by `tau`; mu unchanged, total
/// rebuilt as the exact sum of the scaled parts.
pub fn apply_ts(scaler: &TemperatureScaler, records: &[PredRecord]) -> Vec<PredRecord> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            out.pd = crate::uq::PredictiveDistribution::new(
                r.pd.mu,
                scaler.tau * r.pd.var_ale,
                scaler.tau * r.pd.var_epi,
            );
            out.intervals = None;
            out
        })
        .collect()
}

/// Pool-adjacent-violators fit of squared residuals against predicted
/// variance. Ties in the predictor are pre-averaged; the result is the
/// least-squares monotone (nondecreasing) fit.
pub fn fit_ir(calib: &[PredRecord]) -> Result<IsotonicMap> {
    check_calib(calib, false)?;
    let mut pairs: Vec<(f64, f64)> = calib
        .iter()
        .map(|r| {
            let res = r.y_true - r.pd.mu;
            (r.pd.var_total, res * res)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // average ties so breakpoints are strictly increasing
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for (x, y) in pairs {
        if xs.last() == Some(&x) {
            let last = xs.len() - 1;
            let w = ws[last];
            ys[last] = (ys[last] * w + y) / (w + 1.0);
            ws[last] = w + 1.0;
        } else {
            xs.push(x);
            ys.push(y);
            ws.push(1.0);
        }
    }

    let levels = pav_nondecreasing(&ys, &ws);
    let levels = levels
        .into_iter()
        .map(|v| v.max(IR_VARIANCE_FLOOR))
        .collect();
    Ok(IsotonicMap {
        breakpoints: xs,
        levels,
        floor: IR_VARIANCE_FLOOR,
    })
}

/// Weighted least-squares monotone (nondecreasing) regression.
pub fn pav_nondecreasing(ys: &[f64], ws: &[f64]) -> Vec<f64> {
    // blocks of (weight, mean, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(ys.len());
    for (&y, &w) in ys.iter().zip(ws) {
        blocks.push((w, y, 1));
        while blocks.len() >= 2 {
            let (w2, m2, c2) = blocks[blocks.len() - 1];
            let (w1, m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            blocks.pop();
            let w = w1 + w2;
            blocks.push((w, (w1 * m1 + w2 * m2) / w, c1 + c2));
        }
    }
    let mut out = Vec::with_capacity(ys.len());
    for (_, m, c) in blocks {
        out.extend(std::iter::repeat(m).take(c));
    }
    out
}

impl IsotonicMap {
    /// Calibrated variance for a predicted variance: linear interpolation
    /// between breakpoints, nearest boundary level outside the fitted range.
    pub fn calibrate(&self, var: f64) -> f64 {
        let n = self.breakpoints.len();
        if var <= self.breakpoints[0] {
            return self.levels[0];
        }
        if var >= self.breakpoints[n - 1] {
            return self.levels[n - 1];
        }
        let hi = self.breakpoints.partition_point(|&b| b < var).min(n - 1);
        if self.breakpoints[hi] == var {
            return self.levels[hi];
        }
        let lo = hi - 1;
        let t = (var - self.breakpoints[lo]) / (self.breakpoints[hi] - self.breakpoints[lo]);
        self.levels[lo] + t * (self.levels[hi] - self.levels[lo])
    }
}

/// Apply an isotonic map: variances rewritten through the monotone map,
/// the aleatoric/epistemic split rescaled proportionally.
pub fn apply_ir(map: &IsotonicMap, records: &[PredRecord]) -> Vec<PredRecord> {
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            let calibrated = map.calibrate(r.pd.var_total);
            let scale = if r.pd.var_total > 0.0 {
                calibrated / r.pd.var_total
            } else {
                0.0
            };
            out.pd = if r.pd.var_total > 0.0 {
                crate::uq::PredictiveDistribution::new(
                    r.pd.mu,
                    scale * r.pd.var_ale,
                    scale * r.pd.var_epi,
                )
            } else {
                // degenerate source variance: put everything in the
                // epistemic slot
                crate::uq::PredictiveDistribution::new(r.pd.mu, 0.0, calibrated)
            };
            out.intervals = None;
            out
        })
        .collect()
}

/// Fit split conformal offsets at the given levels from normalized
/// absolute residuals `|y - mu| / sqrt(var_total)`.
pub fn fit_cp(calib: &[PredRecord], levels: &[IntervalLevel]) -> Result<ConformalOffset> {
    if calib.is_empty() || levels.is_empty() {
        return Err(Error::validation("fit_cp needs calibration points and levels"));
    }
    if calib.iter().any(|r| !(r.pd.var_total > 0.0)) {
        return Err(Error::validation(
            "conformal fitting requires strictly positive predictive variances",
        ));
    }
    let n = calib.len();
    let mut scores: Vec<f64> = calib
        .iter()
        .map(|r| (r.y_true - r.pd.mu).abs() / r.pd.var_total.sqrt())
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut q_alpha = Vec::with_capacity(levels.len());
    for level in levels {
        let alpha = level.alpha;
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::validation(format!("alpha {alpha} out of (0,1)")));
        }
        // finite-sample conformal rank: the ceil((n+1)(1-alpha))-th smallest
        let rank = (((n + 1) as f64) * (1.0 - alpha)).ceil() as usize;
        if rank > n {
            return Err(Error::validation(format!(
                "calibration set of {n} too small for alpha {alpha} \
                 (needs at least {})",
                (1.0 / alpha).ceil() as usize - 1
            )));
        }
        q_alpha.push((alpha, scores[rank - 1]));
    }
    Ok(ConformalOffset { q_alpha, n_calib: n })
}

impl ConformalOffset {
    pub fn q_for(&self, alpha: f64) -> Result<f64> {
        self.q_alpha
            .iter()
            .find(|(a, _)| (a - alpha).abs() < 1e-12)
            .map(|&(_, q)| q)
            .ok_or_else(|| Error::validation(format!("no conformal offset fitted for alpha {alpha}")))
    }
}

/// Apply conformal offsets: variance fields pass through untouched and the
/// records become interval-native, `mu ± q_alpha * sqrt(var_total)`.
pub fn apply_cp(offsets: &ConformalOffset, records: &[PredRecord]) -> Result<Vec<PredRecord>> {
    let q1 = offsets.q_for(LEVEL_1SIGMA.alpha)?;
    let q2 = offsets.q_for(LEVEL_2SIGMA.alpha)?;
    Ok(records
        .iter()
        .map(|r| {
            let sd = r.pd.var_total.sqrt();
            let mut out = r.clone();
            out.intervals = Some([
                (r.pd.mu - q1 * sd, r.pd.mu + q1 * sd),
                (r.pd.mu - q2 * sd, r.pd.mu + q2 * sd),
            ]);
            out
        })
        .collect())
}

/// Fit the requested method on calibration records at the two standard
/// levels.
pub fn fit(method: RecalMethod, calib: &[PredRecord]) -> Result<Recalibrator> {
    match method {
        RecalMethod::Ts => Ok(Recalibrator::Ts(fit_ts(calib)?)),
        RecalMethod::Ir => Ok(Recalibrator::Ir(fit_ir(calib)?)),
        RecalMethod::Cp => Ok(Recalibrator::Cp(fit_cp(
            calib,
            &[LEVEL_1SIGMA, LEVEL_2SIGMA],
        )?)),
    }
}

/// Apply a fitted recalibrator. Point predictions are bit-identical before
/// and after.
pub fn apply_recalibration(
    fitted: &Recalibrator,
    records: &[PredRecord],
) -> Result<Vec<PredRecord>> {
    match fitted {
        Recalibrator::Ts(s) => Ok(apply_ts(s, records)),
        Recalibrator::Ir(m) => Ok(apply_ir(m, records)),
        Recalibrator::Cp(c) => apply_cp(c, records),
    }
}

impl Recalibrator {
    pub fn method(&self) -> RecalMethod {
        match self {
            Recalibrator::Ts(_) => RecalMethod::Ts,
            Recalibrator::Ir(_) => RecalMethod::Ir,
            Recalibrator::Cp(_) => RecalMethod::Cp,
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, SplitMix64};
    use crate::uq::PredictiveDistribution;

    fn record(id: usize, mu: f64, var: f64, y: f64) -> PredRecord {
        PredRecord {
            segment_id: id.to_string(),
            y_true: y,
            pd: PredictiveDistribution::new(mu, var / 2.0, var / 2.0),
            intervals: None,
        }
    }

    fn synthetic_calib(n: usize, tau_true: f64, seed: u64) -> Vec<PredRecord> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let mu = rng.gaussian();
                let var = rng.uniform(0.5, 2.0);
                let y = mu + (tau_true * var).sqrt() * rng.gaussian();
                record(i, mu, var, y)
            })
            .collect()
    }

    #[test]
    fn ts_closed_form_cases() {
        // residuals exactly sqrt(var): tau = 1
        let calib: Vec<PredRecord> = (0..20)
            .map(|i| {
                let var = 0.5 + 0.1 * i as f64;
                record(i, 0.0, var, var.sqrt())
            })
            .collect();
        let s = fit_ts(&calib).unwrap();
        assert!((s.tau - 1.0).abs() < 1e-4, "tau {}", s.tau);
        // residuals doubled: tau = 4
        let calib: Vec<PredRecord> = (0..20)
            .map(|i| {
                let var = 0.5 + 0.1 * i as f64;
                record(i, 0.0, var, 2.0 * var.sqrt())
            })
            .collect();
        let s = fit_ts(&calib).unwrap();
        assert!((s.tau - 4.0).abs() < 1e-3, "tau {}", s.tau);
    }

    #[test]
    fn ts_search_matches_closed_form_on_random_data() {
        for seed in [1u64, 2, 3] {
            let calib = synthetic_calib(200, 1.7, seed);
            let s = fit_ts(&calib).unwrap();
            let closed: f64 = calib
                .iter()
                .map(|r| {
                    let res = r.y_true - r.pd.mu;
                    res * res / r.pd.var_total
                })
                .sum::<f64>()
                / calib.len() as f64;
            assert!(
                (s.tau - closed).abs() / closed < 1e-5,
                "tau {} vs closed form {closed}",
                s.tau
            );
        }
    }

    #[test]
    fn ts_apply_identity_and_doubling() {
        let calib = synthetic_calib(50, 1.0, 9);
        let identity = TemperatureScaler { tau: 1.0 };
        let out = apply_ts(&identity, &calib);
        for (a, b) in out.iter().zip(&calib) {
            assert_eq!(a.pd.mu.to_bits(), b.pd.mu.to_bits());
            assert!((a.pd.var_total - b.pd.var_total).abs() < 1e-15);
        }
        let quad = TemperatureScaler { tau: 4.0 };
        let out = apply_ts(&quad, &calib);
        for (a, b) in out.iter().zip(&calib) {
            // interval widths double at any z when variance quadruples
            let wa = a.interval_at(1).1 - a.interval_at(1).0;
            let wb = b.interval_at(1).1 - b.interval_at(1).0;
            assert!((wa - 2.0 * wb).abs() < 1e-9);
            assert_eq!(a.pd.var_total, a.pd.var_ale + a.pd.var_epi);
        }
    }

    #[test]
    fn ts_requires_positive_variance() {
        let mut calib = synthetic_calib(20, 1.0, 4);
        calib[3].pd.var_total = 0.0;
        assert!(fit_ts(&calib).is_err());
    }

    #[test]
    fn pav_fixed_points() {
        // already monotone data is untouched
        let ys = [1.0, 2.0, 3.0, 4.5];
        let ws = [1.0; 4];
        assert_eq!(pav_nondecreasing(&ys, &ws), ys.to_vec());
        // constant data stays constant
        let ys = [2.5; 6];
        assert_eq!(pav_nondecreasing(&ys, &[1.0; 6]), ys.to_vec());
        // a single violation pools to the mean
        let ys = [1.0, 3.0, 2.0];
        assert_eq!(pav_nondecreasing(&ys, &[1.0; 3]), vec![1.0, 2.5, 2.5]);
    }

    /// Exhaustive minimum-SSE monotone fit for small n: enumerate every
    /// partition into consecutive blocks, level each block at its weighted
    /// mean, keep partitions with nondecreasing means.
    fn brute_force_monotone(ys: &[f64], ws: &[f64]) -> Vec<f64> {
        let n = ys.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1u32 << (n - 1)) {
            let mut fit = Vec::with_capacity(n);
            let mut means = Vec::new();
            let mut start = 0;
            for end in 0..n {
                let boundary = end == n - 1 || (mask >> end) & 1 == 1;
                if boundary {
                    let w: f64 = ws[start..=end].iter().sum();
                    let m: f64 = ys[start..=end]
                        .iter()
                        .zip(&ws[start..=end])
                        .map(|(&y, &wt)| y * wt)
                        .sum::<f64>()
                        / w;
                    means.push(m);
                    for _ in start..=end {
                        fit.push(m);
                    }
                    start = end + 1;
                }
            }
            if means.windows(2).any(|p| p[0] > p[1]) {
                continue;
            }
            let sse: f64 = fit
                .iter()
                .zip(ys)
                .zip(ws)
                .map(|((&f, &y), &w)| w * (f - y) * (f - y))
                .sum();
            if best.as_ref().map_or(true, |(b, _)| sse < *b) {
                best = Some((sse, fit));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn pav_equals_brute_force_on_small_instances() {
        let mut rng = SplitMix64::new(77);
        for trial in 0..100 {
            let n = 2 + (rng.next_below(11) as usize); // 2..=12
            let ys: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let ws = vec![1.0; n];
            let pav = pav_nondecreasing(&ys, &ws);
            let brute = brute_force_monotone(&ys, &ws);
            for (p, b) in pav.iter().zip(&brute) {
                assert!((p - b).abs() < 1e-9, "trial {trial}: {pav:?} vs {brute:?}");
            }
        }
    }

    #[test]
    fn ir_interpolates_monotone_data_exactly() {
        // squared residuals already increasing in variance
        let calib: Vec<PredRecord> = (0..12)
            .map(|i| {
                let var = 0.2 + 0.15 * i as f64;
                record(i, 0.0, var, (0.5 + 0.1 * i as f64).sqrt())
            })
            .collect();
        let map = fit_ir(&calib).unwrap();
        for (i, r) in calib.iter().enumerate() {
            let res = r.y_true - r.pd.mu;
            let got = map.calibrate(r.pd.var_total);
            assert!(
                (got - res * res).abs() < 1e-12,
                "breakpoint {i}: {got} vs {}",
                res * res
            );
        }
        // monotone invariant holds everywhere
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let v = map.calibrate(i as f64 * 0.02);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn ir_constant_residuals_give_constant_map() {
        let calib: Vec<PredRecord> = (0..15)
            .map(|i| record(i, 0.0, 0.1 + i as f64 * 0.1, 1.5))
            .collect();
        let map = fit_ir(&calib).unwrap();
        for v in [0.0, 0.5, 1.0, 5.0] {
            assert!((map.calibrate(v) - 2.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cp_quantile_rule_hand_check() {
        // scores 1..=99, alpha 0.05: rank ceil(100*0.95) = 95, q = 95
        let calib: Vec<PredRecord> = (1..=99)
            .map(|i| record(i, 0.0, 1.0, i as f64))
            .collect();
        let off = fit_cp(&calib, &[IntervalLevel { z: 2.0, alpha: 0.05 }]).unwrap();
        assert_eq!(off.q_alpha[0].1, 95.0);
        assert_eq!(off.n_calib, 99);
    }

    #[test]
    fn cp_constant_scores_and_small_n() {
        let calib: Vec<PredRecord> = (0..30).map(|i| record(i, 0.0, 4.0, 2.0 * 1.5)).collect();
        // scores all 1.5
        let off = fit_cp(&calib, &[LEVEL_1SIGMA, LEVEL_2SIGMA]).unwrap();
        for &(_, q) in &off.q_alpha {
            assert_eq!(q, 1.5);
        }
        // 20 points cannot support alpha = 0.0455
        let small: Vec<PredRecord> = (0..20).map(|i| record(i, 0.0, 1.0, 0.5)).collect();
        assert!(fit_cp(&small, &[LEVEL_2SIGMA]).is_err());
        assert!(fit_cp(&small, &[LEVEL_1SIGMA]).is_ok());
    }

    #[test]
    fn cp_apply_sets_intervals_and_passes_variance_through() {
        let calib = synthetic_calib(100, 1.0, 5);
        let off = fit_cp(&calib, &[LEVEL_1SIGMA, LEVEL_2SIGMA]).unwrap();
        let test = synthetic_calib(20, 1.0, 6);
        let out = apply_cp(&off, &test).unwrap();
        let q2 = off.q_for(LEVEL_2SIGMA.alpha).unwrap();
        for (a, b) in out.iter().zip(&test) {
            assert_eq!(a.pd, b.pd);
            let (lo, hi) = a.interval_at(1);
            let width = hi - lo;
            assert!((width - 2.0 * q2 * b.pd.var_total.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn cp_marginal_coverage_simulation() {
        // exchangeable data: mean coverage over replicates stays near 1-alpha
        let alpha = LEVEL_2SIGMA.alpha;
        let mut total = 0.0;
        let reps = 200;
        for rep in 0..reps {
            let mut rng = stream(9000, &[rep]);
            let gen = |rng: &mut SplitMix64, i: usize| {
                let mu = rng.gaussian();
                let var = rng.uniform(0.5, 2.0);
                // deliberately miscalibrated by 1.3x so CP has work to do
                let y = mu + (1.3 * var).sqrt() * rng.gaussian();
                record(i, mu, var, y)
            };
            let calib: Vec<PredRecord> = (0..500).map(|i| gen(&mut rng, i)).collect();
            let test: Vec<PredRecord> = (0..2000).map(|i| gen(&mut rng, i)).collect();
            let off = fit_cp(&calib, &[LEVEL_1SIGMA, LEVEL_2SIGMA]).unwrap();
            let covered = apply_cp(&off, &test)
                .unwrap()
                .iter()
                .filter(|r| {
                    let (lo, hi) = r.interval_at(1);
                    lo <= r.y_true && r.y_true <= hi
                })
                .count();
            total += covered as f64 / test.len() as f64;
        }
        let mean_cov = total / reps as f64;
        assert!(
            mean_cov >= 1.0 - alpha - 0.01 && mean_cov <= 0.98,
            "mean coverage {mean_cov}"
        );
    }

    #[test]
    fn mu_bit_identical_through_every_method() {
        let calib = synthetic_calib(120, 1.4, 11);
        let test = synthetic_calib(60, 1.4, 12);
        for method in [RecalMethod::Ts, RecalMethod::Ir, RecalMethod::Cp] {
            let fitted = fit(method, &calib).unwrap();
            let out = apply_recalibration(&fitted, &test).unwrap();
            for (a, b) in out.iter().zip(&test) {
                assert_eq!(a.pd.mu.to_bits(), b.pd.mu.to_bits(), "{:?}", method);
            }
        }
    }

    #[test]
    fn recalibrator_json_round_trip() {
        let calib = synthetic_calib(80, 1.2, 13);
        let dir = tempfile::tempdir().unwrap();
        for method in [RecalMethod::Ts, RecalMethod::Ir, RecalMethod::Cp] {
            let fitted = fit(method, &calib).unwrap();
            let path = dir.path().join(format!("{}.json", method.name()));
            fitted.save(&path).unwrap();
            let loaded = Recalibrator::load(&path).unwrap();
            assert_eq!(fitted, loaded);
        }
    }

    #[test]
    fn ir_output_variances_monotone_in_input() {
        let calib = synthetic_calib(150, 2.0, 21);
        let map = fit_ir(&calib).unwrap();
        let mut test = synthetic_calib(50, 2.0, 22);
        test.sort_by(|a, b| a.pd.var_total.partial_cmp(&b.pd.var_total).unwrap());
        let out = apply_ir(&map, &test);
        for w in out.windows(2) {
            assert!(w[0].pd.var_total <= w[1].pd.var_total + 1e-15);
        }
    }
}
