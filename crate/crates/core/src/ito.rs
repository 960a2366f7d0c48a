// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time text-embedding optimization over the toy denoiser.
//!
//! The embeddings are regularized once, then sampling runs from `t = T` down
//! to `1`. During the first `cutoff` steps every timestep restarts from the
//! regularized embeddings and takes `inner_iters` plain gradient steps on
//! `pl * ||A_hat_pe - A_pe||^2 - nl * ||A_hat_ne - A_ne||^2`, with the anchor
//! maps taken from the original embeddings at the current latent. The latent
//! is then stepped with the optimized embeddings. Later steps use the
//! regularized embeddings unchanged.
//!
//! The anchor only depends on the latent and the timestep, both fixed inside
//! the inner loop, so it is computed once per timestep.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::{TextEmbeddings, TokenPartition};
use crate::error::{Error, Result};
use crate::metrics::attention_mass;
use crate::swr::{suppress_detailed, SpectrumRule, Suppression};
use crate::toy_attention::{attention_blocks, AttentionMaps, ForwardOutput, LossKind, LossWeights, ToyDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateColumns {
    /// Every column of the embedding matrix moves.
    #[default]
    All,
    /// Only negative-target and EOT columns move.
    NegativeAndEot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// Anchors from the embeddings before regularization.
    #[default]
    Original,
    /// Anchors from the regularized embeddings.
    Regularized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoConfig {
    pub timesteps: usize,
    pub cutoff: usize,
    pub inner_iters: usize,
    pub eta: f64,
    pub weights: LossWeights,
    pub loss_kind: LossKind,
    pub update_columns: UpdateColumns,
    pub anchor_source: AnchorSource,
    /// Halve `eta` for the rest of the run whenever the loss goes up between
    /// two inner iterations.
    pub eta_guard: bool,
}

impl Default for ItoConfig {
    fn default() -> Self {
        Self {
            timesteps: 50,
            cutoff: 20,
            inner_iters: 10,
            eta: 0.1,
            weights: LossWeights::default(),
            loss_kind: LossKind::Attention,
            update_columns: UpdateColumns::All,
            anchor_source: AnchorSource::Original,
            eta_guard: true,
        }
    }
}

impl ItoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 {
            return Err(Error::InvalidParameter("inner_iters must be >= 1".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.cutoff > self.timesteps {
            return Err(Error::InvalidParameter(format!(
                "cutoff {} exceeds timesteps {}",
                self.cutoff, self.timesteps
            )));
        }
        if !self.weights.pl.is_finite() || !self.weights.nl.is_finite() {
            return Err(Error::InvalidParameter("loss weights must be finite".into()));
        }
        Ok(())
    }

    /// Number of inner-iteration records a complete run produces.
    pub fn expected_records(&self) -> usize {
        self.cutoff * self.inner_iters
    }
}

/// One inner iteration, measured before its update is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 for `t = T`.
    pub step_index: usize,
    pub t: usize,
    pub ite: usize,
    pub loss: f64,
    pub loss_pl: f64,
    pub loss_nl: f64,
    pub grad_norm: f64,
    pub ne_mass: f64,
    pub pe_deviation: f64,
    pub eta: f64,
}

/// Maps used for one latent update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: usize,
    pub optimized: bool,
    pub ne_mass: f64,
    /// NE mass under the original embeddings at the same latent.
    pub reference_ne_mass: f64,
    /// `||A_hat_pe - A_pe||_F` against the original embeddings.
    pub pe_deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItoTrace {
    pub iterations: Vec<IterationRecord>,
    pub steps: Vec<StepRecord>,
    pub eta_halvings: usize,
    pub final_eta: f64,
}

#[derive(Debug, Clone)]
pub struct ItoRun {
    pub z0: DMatrix<f64>,
    pub regularization: Suppression,
    /// Embeddings used at the last timestep.
    pub final_embeddings: TextEmbeddings,
    /// Optimized embeddings of the last active timestep, if any.
    pub last_optimized: Option<TextEmbeddings>,
    /// Attention maps that stepped the latent at the last active timestep.
    pub active_end_maps: Option<AttentionMaps>,
    pub trace: ItoTrace,
}

/// A run that stopped on a numerical failure, with everything recorded so far.
#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} iteration records)", trace.iterations.len())]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub trace: ItoTrace,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: ItoTrace::default(),
        }
    }
}

fn map_stats(maps: &AttentionMaps, reference: &AttentionMaps, part: &TokenPartition) -> (f64, f64) {
    let (hat_pe, _) = attention_blocks(maps, part);
    let (ref_pe, _) = attention_blocks(reference, part);
    (attention_mass(maps, part.ne_indices()), (hat_pe - ref_pe).norm())
}

fn column_mask(part: &TokenPartition, mode: UpdateColumns) -> Option<Vec<bool>> {
    match mode {
        UpdateColumns::All => None,
        UpdateColumns::NegativeAndEot => {
            let mut mask = vec![false; part.token_count()];
            for j in part.chi_columns() {
                mask[j] = true;
            }
            Some(mask)
        }
    }
}

/// Result of the inner loop at one timestep.
#[derive(Debug, Clone)]
pub struct TimestepOutcome {
    pub embeddings: TextEmbeddings,
    pub records: Vec<IterationRecord>,
    pub eta: f64,
    pub eta_halvings: usize,
}

/// `inner_iters` steps of `c_hat <- c_hat - eta * grad L` at a fixed latent.
///
/// `anchor_source` provides the anchor blocks and `original` the reference
/// maps for the PE deviation in the records.
#[allow(clippy::too_many_arguments)]
pub fn optimize_at_timestep(
    model: &ToyDenoiser,
    z: &DMatrix<f64>,
    t: usize,
    step_index: usize,
    original: &TextEmbeddings,
    anchor_source: &TextEmbeddings,
    c_hat_in: &TextEmbeddings,
    part: &TokenPartition,
    cfg: &ItoConfig,
    eta: f64,
) -> Result<TimestepOutcome> {
    let mut records = Vec::with_capacity(cfg.inner_iters);
    let (embeddings, eta, eta_halvings) = optimize_into(
        model,
        z,
        t,
        step_index,
        original,
        anchor_source,
        c_hat_in,
        part,
        cfg,
        eta,
        &mut records,
    )?;
    Ok(TimestepOutcome {
        embeddings,
        records,
        eta,
        eta_halvings,
    })
}

/// Inner loop that appends each record to `records` as soon as it is
/// measured, so a failure part way keeps everything before it.
#[allow(clippy::too_many_arguments)]
fn optimize_into(
    model: &ToyDenoiser,
    z: &DMatrix<f64>,
    t: usize,
    step_index: usize,
    original: &TextEmbeddings,
    anchor_source: &TextEmbeddings,
    c_hat_in: &TextEmbeddings,
    part: &TokenPartition,
    cfg: &ItoConfig,
    eta: f64,
    records: &mut Vec<IterationRecord>,
) -> Result<(TextEmbeddings, f64, usize)> {
    let anchor = model.anchor(z, t, anchor_source, part, cfg.loss_kind)?;
    let reference = model.forward(z, t, original)?.maps;
    let mask = column_mask(part, cfg.update_columns);

    let mut eta = eta;
    let mut halvings = 0;
    let mut c_hat = c_hat_in.clone();
    let mut prev_loss: Option<f64> = None;
    for ite in 0..cfg.inner_iters {
        let (loss, mut grad, out) = model.loss_and_grad(z, t, &anchor, &c_hat, part, cfg.weights)?;
        if let Some(mask) = &mask {
            for (j, keep) in mask.iter().enumerate() {
                if !keep {
                    grad.column_mut(j).fill(0.0);
                }
            }
        }
        if cfg.eta_guard {
            if let Some(prev) = prev_loss {
                if loss.total > prev + 1e-12 * prev.abs() {
                    eta *= 0.5;
                    halvings += 1;
                }
            }
        }
        prev_loss = Some(loss.total);
        let (ne_mass, pe_deviation) = map_stats(&out.maps, &reference, part);
        records.push(IterationRecord {
            step_index,
            t,
            ite,
            loss: loss.total,
            loss_pl: loss.pl,
            loss_nl: loss.nl,
            grad_norm: grad.norm(),
            ne_mass,
            pe_deviation,
            eta,
        });
        let updated = c_hat.data() - grad * eta;
        c_hat = c_hat.with_data(updated).map_err(|e| Error::Numerical {
            stage: format!("embedding update at t={t}, ite={ite}"),
            diagnostics: e.to_string(),
        })?;
    }
    Ok((c_hat, eta, halvings))
}

/// Regularize `emb_orig` with `rule`, then sample from `z_T` with the
/// per-timestep optimization in the active window.
pub fn run(
    emb_orig: &TextEmbeddings,
    part: &TokenPartition,
    rule: &SpectrumRule,
    model: &ToyDenoiser,
    z_t: &DMatrix<f64>,
    cfg: &ItoConfig,
) -> std::result::Result<ItoRun, RunFailure> {
    cfg.validate()?;
    if cfg.timesteps != model.config().timesteps {
        return Err(Error::InvalidParameter(format!(
            "config has {} timesteps, model has {}",
            cfg.timesteps,
            model.config().timesteps
        ))
        .into());
    }
    part.check_compatible(emb_orig)?;
    let regularization = suppress_detailed(emb_orig, part, rule)?;
    let c_reg = regularization.embeddings.clone();
    let anchor_emb = match cfg.anchor_source {
        AnchorSource::Original => emb_orig,
        AnchorSource::Regularized => &c_reg,
    };

    let mut trace = ItoTrace {
        final_eta: cfg.eta,
        ..ItoTrace::default()
    };
    let mut eta = cfg.eta;
    let mut z = z_t.clone();
    let mut last_optimized = None;
    let mut active_end_maps = None;
    let mut current = c_reg.clone();

    for step_index in 0..cfg.timesteps {
        let t = cfg.timesteps - step_index;
        let active = step_index < cfg.cutoff;
        let fail = |error: Error, trace: &ItoTrace| RunFailure {
            error,
            trace: trace.clone(),
        };
        current = if active {
            let mut records = Vec::with_capacity(cfg.inner_iters);
            let outcome = optimize_into(
                model,
                &z,
                t,
                step_index,
                emb_orig,
                anchor_emb,
                &c_reg,
                part,
                cfg,
                eta,
                &mut records,
            );
            trace.iterations.append(&mut records);
            let (embeddings, new_eta, halvings) = outcome.map_err(|e| fail(e, &trace))?;
            trace.eta_halvings += halvings;
            eta = new_eta;
            trace.final_eta = eta;
            embeddings
        } else {
            c_reg.clone()
        };

        let out: ForwardOutput = model.forward(&z, t, &current).map_err(|e| fail(e, &trace))?;
        let reference = model.forward(&z, t, emb_orig).map_err(|e| fail(e, &trace))?.maps;
        let (ne_mass, pe_deviation) = map_stats(&out.maps, &reference, part);
        trace.steps.push(StepRecord {
            step_index,
            t,
            optimized: active,
            ne_mass,
            reference_ne_mass: attention_mass(&reference, part.ne_indices()),
            pe_deviation,
        });
        if active && step_index + 1 == cfg.cutoff {
            last_optimized = Some(current.clone());
            active_end_maps = Some(out.maps.clone());
        }
        z = model.step_from(&z, &out);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(fail(
                Error::Numerical {
                    stage: format!("latent step at t={t}"),
                    diagnostics: "latent became non-finite".into(),
                },
                &trace,
            ));
        }
    }

    Ok(ItoRun {
        z0: z,
        regularization,
        final_embeddings: current,
        last_optimized,
        active_end_maps,
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub z0: DMatrix<f64>,
    pub steps: Vec<StepRecord>,
    pub maps: Vec<AttentionMaps>,
}

/// Plain sampling with fixed embeddings, recording NE mass at every step.
pub fn rollout(
    model: &ToyDenoiser,
    emb: &TextEmbeddings,
    part: &TokenPartition,
    z_t: &DMatrix<f64>,
) -> Result<Rollout> {
    part.check_compatible(emb)?;
    let steps_total = model.config().timesteps;
    let mut z = z_t.clone();
    let mut steps = Vec::with_capacity(steps_total);
    let mut maps = Vec::with_capacity(steps_total);
    for step_index in 0..steps_total {
        let t = steps_total - step_index;
        let out = model.forward(&z, t, emb)?;
        let ne_mass = attention_mass(&out.maps, part.ne_indices());
        steps.push(StepRecord {
            step_index,
            t,
            optimized: false,
            ne_mass,
            reference_ne_mass: ne_mass,
            pe_deviation: 0.0,
        });
        z = model.step_from(&z, &out);
        maps.push(out.maps);
    }
    Ok(Rollout { z0: z, steps, maps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    /// Step index compared against the baseline (last active step).
    pub compared_step: usize,
    pub baseline_ne_mass: f64,
    pub suppressed_ne_mass: f64,
    /// `1 - suppressed / baseline`.
    pub ne_mass_reduction: f64,
    pub pe_deviation: f64,
    pub iteration_records: usize,
    pub eta_halvings: usize,
    pub final_eta: f64,
    /// Loss of the last inner iteration at each active step.
    pub loss_curve: Vec<f64>,
    pub ne_mass_curve: Vec<f64>,
    pub baseline_ne_mass_curve: Vec<f64>,
}

pub fn suppression_report(trace: &ItoTrace, baseline: &[StepRecord]) -> Result<SuppressionReport> {
    if trace.steps.is_empty() || trace.steps.len() != baseline.len() {
        return Err(Error::Shape(format!(
            "trace has {} steps, baseline has {}",
            trace.steps.len(),
            baseline.len()
        )));
    }
    let compared = trace
        .steps
        .iter()
        .rposition(|s| s.optimized)
        .unwrap_or(trace.steps.len() - 1);
    let base = baseline[compared].ne_mass;
    let sup = trace.steps[compared].ne_mass;
    let mut loss_curve = Vec::new();
    for w in trace.iterations.windows(2) {
        if w[1].step_index != w[0].step_index {
            loss_curve.push(w[0].loss);
        }
    }
    if let Some(last) = trace.iterations.last() {
        loss_curve.push(last.loss);
    }
    Ok(SuppressionReport {
        compared_step: compared,
        baseline_ne_mass: base,
        suppressed_ne_mass: sup,
        ne_mass_reduction: if base == 0.0 { 0.0 } else { 1.0 - sup / base },
        pe_deviation: trace.steps[compared].pe_deviation,
        iteration_records: trace.iterations.len(),
        eta_halvings: trace.eta_halvings,
        final_eta: trace.final_eta,
        loss_curve,
        ne_mass_curve: trace.steps.iter().map(|s| s.ne_mass).collect(),
        baseline_ne_mass_curve: baseline.iter().map(|s| s.ne_mass).collect(),
    })
}
