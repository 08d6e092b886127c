//! Full-model gradient verification against finite differences.
//!
//! The training loss of a ReLU/maxpool network is piecewise smooth: a
//! finite-difference step that straddles one of the kinks measures the
//! average of two different slopes instead of the local gradient, and no
//! fixed step size avoids this for every coordinate at once. The oracle
//! here therefore refines its step adaptively: starting from the base step
//! it computes Richardson-extrapolated central differences at `h` and
//! `h/2`, accepts the estimate when the two raw differences agree (the
//! interval is smooth), and otherwise shrinks `h` tenfold, up to two
//! times. Dropout masks and batch-norm behaviour are identical across
//! evaluations because the same rng stream is replayed.
//!
//! The figure of merit per element follows the crate-wide convention:
//! `|analytic - fd| / (|analytic| + 1e-8)`.

use crate::autodiff::{Mode, Tensor};
use crate::backbone::Model;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::train::{loss_and_grads_frozen, loss_frozen, LossKind};
use rayon::prelude::*;

/// Finite differences cannot resolve gradients below this magnitude: the
/// difference of two ~O(1) losses carries rounding noise around 1e-10 at
/// the refined step sizes, so a computed slope under 1e-5 is
/// indistinguishable from zero with orders of margin. Structurally dead
/// parameters (ReLU-dead channels, shift-invariances of train-mode batch
/// norm) produce exact-zero analytic gradients whose FD measurement is
/// pure noise; the relative-error denominator is floored here so the
/// comparison stays meaningful, while every gradient above the floor is
/// held to the full relative tolerance.
pub const FD_RESOLUTION: f64 = 1e-5;

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

/// Summary of one full-model gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst coordinates, descending by relative error (top 16).
    pub worst: Vec<GradMismatch>,
    /// Every coordinate's relative error, descending.
    pub errors_desc: Vec<f64>,
    pub n_elements: usize,
    /// Coordinates whose base step straddled a kink and needed refinement.
    pub n_refined: usize,
}

impl GradCheckReport {
    pub fn count_above(&self, tol: f64) -> usize {
        self.errors_desc.partition_point(|&e| e > tol)
    }
}

/// Relative disagreement with the measurement-resolution floor.
pub fn fd_relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_RESOLUTION)
}

/// Compare every parameter gradient of the loss on one batch against
/// adaptive central finite differences with base step `h`.
pub fn check_model_gradients(
    model: &Model,
    x: &Tensor,
    targets: &[f64],
    kind: LossKind,
    mode: Mode,
    rng_seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::new(rng_seed);
    let (_, analytic) = loss_and_grads_frozen(model, x.clone(), targets, kind, mode, &mut rng)?;

    let jobs: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.tensor.numel()).map(move |ei| (pi, ei)))
        .collect();

    let chunks: Vec<Result<Vec<(f64, bool, (usize, usize))>>> = jobs
        .par_chunks(256)
        .map(|chunk| -> Result<Vec<(f64, bool, (usize, usize))>> {
            let mut local = model.clone();
            let mut out = Vec::with_capacity(chunk.len());
            for &(pi, ei) in chunk {
                let base = local.params()[pi].tensor.data()[ei];
                let mut eval = |delta: f64| -> Result<f64> {
                    local.params_mut()[pi].tensor.data_mut()[ei] = base + delta;
                    let mut rng = SplitMix64::new(rng_seed);
                    loss_frozen(&local, x.clone(), targets, kind, mode, &mut rng)
                };
                let (fd, refined) = adaptive_fd(&mut eval, h)?;
                local.params_mut()[pi].tensor.data_mut()[ei] = base;
                out.push((fd, refined, (pi, ei)));
            }
            Ok(out)
        })
        .collect();

    let mut mismatches: Vec<GradMismatch> = Vec::new();
    let mut n_refined = 0;
    for group in chunks {
        for (fd, refined, (pi, ei)) in group? {
            if refined {
                n_refined += 1;
            }
            let a = analytic[pi].data()[ei];
            mismatches.push(GradMismatch {
                param: model.params()[pi].name.clone(),
                index: ei,
                analytic: a,
                finite_diff: fd,
                rel_err: fd_relative_error(a, fd),
            });
        }
    }
    mismatches.sort_by(|x, y| y.rel_err.partial_cmp(&x.rel_err).unwrap());
    let n_elements = mismatches.len();
    let max_rel_err = mismatches.first().map_or(0.0, |m| m.rel_err);
    let errors_desc: Vec<f64> = mismatches.iter().map(|m| m.rel_err).collect();
    mismatches.truncate(16);
    Ok(GradCheckReport {
        max_rel_err,
        worst: mismatches,
        errors_desc,
        n_elements,
        n_refined,
    })
}

/// Richardson-extrapolated central difference with kink detection: the raw
/// differences at `h` and `h/2` must agree, otherwise the step shrinks.
fn adaptive_fd(
    eval: &mut dyn FnMut(f64) -> Result<f64>,
    base_h: f64,
) -> Result<(f64, bool)> {
    let mut h = base_h;
    let mut refined = false;
    for level in 0..3 {
        let d1 = (eval(h)? - eval(-h)?) / (2.0 * h);
        let d2 = (eval(h / 2.0)? - eval(-h / 2.0)?) / h;
        let richardson = (4.0 * d2 - d1) / 3.0;
        let consistent = (d1 - d2).abs() <= 1e-4 * (d1.abs().max(d2.abs()) + 1e-3);
        if consistent || level == 2 {
            return Ok((richardson, refined));
        }
        refined = true;
        h /= 10.0;
    }
    unreachable!()
}
