// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central-difference oracle for the embedding gradients.
//!
//! The numeric gradient only calls [`ToyDenoiser::loss`], never the backward
//! pass, so it checks the analytic chain rule independently.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::{TextEmbeddings, TokenPartition};
use crate::error::Result;
use crate::fixtures::{grad_instance, GradInstance};
use crate::toy_attention::{Anchor, LossKind, LossWeights, ToyDenoiser};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Denominator floor of the elementwise relative error, as a fraction of the
/// largest analytic gradient entry. Keeps entries that are zero up to
/// cancellation from dividing roundoff by roundoff.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// The three `(pl, nl)` weightings every instance is checked under.
pub const WEIGHT_GRID: [LossWeights; 3] = [
    LossWeights { pl: 1.0, nl: 0.0 },
    LossWeights { pl: 0.0, nl: 1.0 },
    LossWeights { pl: 1.0, nl: 0.5 },
];

#[allow(clippy::too_many_arguments)]
pub fn central_difference(
    model: &ToyDenoiser,
    z: &DMatrix<f64>,
    t: usize,
    anchor: &Anchor,
    c_hat: &TextEmbeddings,
    part: &TokenPartition,
    weights: LossWeights,
    h: f64,
) -> Result<DMatrix<f64>> {
    let base = c_hat.data();
    let mut grad = DMatrix::zeros(base.nrows(), base.ncols());
    let mut probe = base.clone();
    for j in 0..base.ncols() {
        for i in 0..base.nrows() {
            let orig = base[(i, j)];
            probe[(i, j)] = orig + h;
            let plus = model.loss(z, t, anchor, &probe, part, weights)?.total;
            probe[(i, j)] = orig - h;
            let minus = model.loss(z, t, anchor, &probe, part, weights)?.total;
            probe[(i, j)] = orig;
            grad[(i, j)] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// `max_ij |a - n| / max(|a|, |n|, RELATIVE_FLOOR * max|a|)`.
pub fn max_relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let floor = (RELATIVE_FLOOR * analytic.amax()).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub seed: u64,
    pub loss_kind: LossKind,
    pub weights: LossWeights,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub grad_max: f64,
    pub passed: bool,
}

pub fn check_instance(
    inst: &GradInstance,
    seed: u64,
    kind: LossKind,
    weights: LossWeights,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckResult> {
    let anchor = inst
        .model
        .anchor(&inst.latent, inst.timestep, &inst.reference, &inst.partition, kind)?;
    let analytic = inst.model.grad_loss_wrt_embeddings(
        &inst.latent,
        inst.timestep,
        &anchor,
        &inst.candidate,
        &inst.partition,
        weights,
    )?;
    let numeric = central_difference(
        &inst.model,
        &inst.latent,
        inst.timestep,
        &anchor,
        &inst.candidate,
        &inst.partition,
        weights,
        h,
    )?;
    let rel = max_relative_error(&analytic, &numeric);
    Ok(GradCheckResult {
        seed,
        loss_kind: kind,
        weights,
        max_relative_error: rel,
        max_abs_error: (&analytic - &numeric).amax(),
        grad_max: analytic.amax(),
        passed: rel < tolerance,
    })
}

/// Every seed in `seeds` under both loss kinds and all of [`WEIGHT_GRID`].
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, h: f64, tolerance: f64) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    for seed in seeds {
        let inst = grad_instance(seed)?;
        for kind in [LossKind::Attention, LossKind::Value] {
            for weights in WEIGHT_GRID {
                results.push(check_instance(&inst, seed, kind, weights, h, tolerance)?);
            }
        }
    }
    Ok(results)
}
