// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thin SVD and singular-value regularization rules.
//!
//! Every rule maps the singular values of the negative-target matrix to new
//! values while the singular vectors are kept:
//!
//! | rule         | `sigma_hat_i`                         |
//! |--------------|---------------------------------------|
//! | `Soft`       | `exp(-gamma * s_i) * s_i`             |
//! | `Strengthen` | `beta * exp(alpha * s_i) * s_i`       |
//! | `ZeroTop`    | `0` for the first `k`, else `s_i`     |
//! | `ZeroBottom` | `0` for the last `k`, else `s_i`      |
//! | `Wnnm`       | `max(s_i - w_i, 0)`                   |
//!
//! `exp(-s) * s` peaks at `s = 1`, so larger singular values are drained
//! harder than small ones. The weighted soft threshold does the opposite when
//! its weights are `lambda / (s_i + eps)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{build_chi, scatter_chi_back, NegativeTargetMatrix, TextEmbeddings, TokenPartition};
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_STRENGTHEN_ALPHA: f64 = 0.001;
pub const DEFAULT_STRENGTHEN_BETA: f64 = 1.2;
pub const DEFAULT_WNNM_EPSILON: f64 = 1e-6;

/// `U diag(sigma) V^T` with `U: M x r`, `V: c x r`, `r = min(M, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumDecomposition {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SpectrumDecomposition {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        self.sigma.as_slice()
    }
}

/// Thin SVD with singular values sorted nonincreasing and signs fixed so the
/// largest-magnitude entry of every left singular vector is positive.
pub fn svd(matrix: &DMatrix<f64>) -> Result<SpectrumDecomposition> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, c) = matrix.shape();
    if m == 0 || c == 0 {
        return Err(Error::Shape(format!("cannot decompose a {m}x{c} matrix")));
    }
    // nalgebra's bidiagonal SVD can return wrong factors for rank-deficient
    // inputs, which are the norm here (the EOT block is close to rank one).
    let input = faer::Mat::<f64>::from_fn(m, c, |i, j| matrix[(i, j)]);
    let dec = input.thin_svd().map_err(|e| Error::Numerical {
        stage: "svd".into(),
        diagnostics: format!("{e:?}"),
    })?;
    let (u_raw, s_raw, v_raw) = (dec.U(), dec.S().column_vector(), dec.V());
    let r = m.min(c);

    // Stable descending order; ties keep the routine's order.
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s_raw[b].partial_cmp(&s_raw[a]).expect("finite singular values"));

    let mut u = DMatrix::zeros(m, r);
    let mut v = DMatrix::zeros(c, r);
    let mut sigma = DVector::zeros(r);
    for (k, &src) in order.iter().enumerate() {
        let mut uk = DVector::from_fn(m, |i, _| u_raw[(i, src)]);
        let mut vk = DVector::from_fn(c, |i, _| v_raw[(i, src)]);
        let pivot = uk.iter().copied().fold(0.0f64, |best, x| {
            if x.abs() > best.abs() {
                x
            } else {
                best
            }
        });
        if pivot < 0.0 {
            uk.neg_mut();
            vk.neg_mut();
        }
        u.set_column(k, &uk);
        v.set_column(k, &vk);
        sigma[k] = s_raw[src].max(0.0);
    }
    Ok(SpectrumDecomposition { u, sigma, v })
}

fn check_nonnegative(sigma: &[f64]) -> Result<()> {
    match sigma.iter().position(|&s| !(s >= 0.0) || !s.is_finite()) {
        Some(i) => Err(Error::InvalidParameter(format!(
            "singular value {i} is {} (must be finite and nonnegative)",
            sigma[i]
        ))),
        None => Ok(()),
    }
}

/// `exp(-gamma * s) * s` for each entry.
pub fn soft_weight_spectrum(sigma: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_nonnegative(sigma)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(sigma.iter().map(|&s| (-gamma * s).exp() * s).collect())
}

/// `beta * exp(alpha * s) * s` for each entry.
pub fn strengthen_spectrum(sigma: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_nonnegative(sigma)?;
    if !(beta > 0.0) || !beta.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "strengthen needs finite alpha and beta > 0, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(sigma.iter().map(|&s| beta * (alpha * s).exp() * s).collect())
}

pub fn zero_topk(sigma: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(sigma, k)?;
    Ok(sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| if i < k { 0.0 } else { s })
        .collect())
}

pub fn zero_bottomk(sigma: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(sigma, k)?;
    let keep = sigma.len() - k;
    Ok(sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| if i >= keep { 0.0 } else { s })
        .collect())
}

fn check_k(sigma: &[f64], k: usize) -> Result<()> {
    if k > sigma.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds spectrum length {}",
            sigma.len()
        )));
    }
    Ok(())
}

/// Generalized soft threshold `max(s_i - w_i, 0)` with nondecreasing weights.
pub fn wnnm_threshold(sigma: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} singular values but {} weights",
            sigma.len(),
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidParameter(format!("weight {i} is negative")));
    }
    if let Some(i) = weights.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter(format!(
            "weights must be nondecreasing: w[{}]={} > w[{}]={}",
            i,
            weights[i],
            i + 1,
            weights[i + 1]
        )));
    }
    Ok(sigma
        .iter()
        .zip(weights)
        .map(|(&s, &w)| (s - w).max(0.0))
        .collect())
}

/// Weights `lambda / (s_i + eps)`. For a nonincreasing spectrum these are
/// nondecreasing, as the threshold requires.
pub fn wnnm_adaptive_weights(sigma: &[f64], lambda: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_nonnegative(sigma)?;
    if !(lambda >= 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need lambda >= 0 and epsilon > 0, got lambda={lambda}, epsilon={epsilon}"
        )));
    }
    Ok(sigma.iter().map(|&s| lambda / (s + epsilon)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WnnmWeights {
    Explicit { weights: Vec<f64> },
    Adaptive { lambda: f64, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SpectrumRule {
    Soft { gamma: f64 },
    Strengthen { alpha: f64, beta: f64 },
    ZeroTop { k: usize },
    ZeroBottom { k: usize },
    Wnnm(WnnmWeights),
}

impl Default for SpectrumRule {
    fn default() -> Self {
        SpectrumRule::Soft { gamma: DEFAULT_GAMMA }
    }
}

impl SpectrumRule {
    pub fn strengthen_default() -> Self {
        SpectrumRule::Strengthen {
            alpha: DEFAULT_STRENGTHEN_ALPHA,
            beta: DEFAULT_STRENGTHEN_BETA,
        }
    }

    pub fn wnnm_adaptive(lambda: f64) -> Self {
        SpectrumRule::Wnnm(WnnmWeights::Adaptive {
            lambda,
            epsilon: DEFAULT_WNNM_EPSILON,
        })
    }

    /// Rules that leave every spectrum unchanged. `suppress` skips the SVD
    /// for these so the output is bit-identical to the input.
    pub fn is_identity(&self) -> bool {
        match self {
            SpectrumRule::Soft { gamma } => *gamma == 0.0,
            SpectrumRule::Strengthen { alpha, beta } => *alpha == 0.0 && *beta == 1.0,
            SpectrumRule::ZeroTop { k } | SpectrumRule::ZeroBottom { k } => *k == 0,
            SpectrumRule::Wnnm(WnnmWeights::Explicit { weights }) => {
                weights.iter().all(|&w| w == 0.0)
            }
            SpectrumRule::Wnnm(WnnmWeights::Adaptive { lambda, .. }) => *lambda == 0.0,
        }
    }

    pub fn apply(&self, sigma: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpectrumRule::Soft { gamma } => soft_weight_spectrum(sigma, *gamma),
            SpectrumRule::Strengthen { alpha, beta } => strengthen_spectrum(sigma, *alpha, *beta),
            SpectrumRule::ZeroTop { k } => zero_topk(sigma, *k),
            SpectrumRule::ZeroBottom { k } => zero_bottomk(sigma, *k),
            SpectrumRule::Wnnm(WnnmWeights::Explicit { weights }) => wnnm_threshold(sigma, weights),
            SpectrumRule::Wnnm(WnnmWeights::Adaptive { lambda, epsilon }) => {
                let w = wnnm_adaptive_weights(sigma, *lambda, *epsilon)?;
                wnnm_threshold(sigma, &w)
            }
        }
    }
}

/// `U diag(sigma_hat) V^T`.
pub fn reconstruct(dec: &SpectrumDecomposition, sigma_hat: &[f64]) -> Result<DMatrix<f64>> {
    if sigma_hat.len() != dec.sigma.len() {
        return Err(Error::Shape(format!(
            "sigma_hat has {} entries, decomposition has rank bound {}",
            sigma_hat.len(),
            dec.sigma.len()
        )));
    }
    let mut us = dec.u.clone();
    for (k, &s) in sigma_hat.iter().enumerate() {
        us.column_mut(k).scale_mut(s);
    }
    Ok(us * dec.v.transpose())
}

/// Result of one regularization pass, with the spectra for reporting.
#[derive(Debug, Clone)]
pub struct Suppression {
    pub embeddings: TextEmbeddings,
    pub sigma_before: Vec<f64>,
    pub sigma_after: Vec<f64>,
    /// `min(M, cols(chi))`, the rank bound of the decomposition used.
    pub rank_bound: usize,
    /// `min(M, N - p - 1)`, the count the reference formula states.
    pub reference_rank_bound: usize,
}

/// build chi -> SVD -> rule -> reconstruct -> scatter back.
pub fn suppress(emb: &TextEmbeddings, part: &TokenPartition, rule: &SpectrumRule) -> Result<TextEmbeddings> {
    Ok(suppress_detailed(emb, part, rule)?.embeddings)
}

pub fn suppress_detailed(
    emb: &TextEmbeddings,
    part: &TokenPartition,
    rule: &SpectrumRule,
) -> Result<Suppression> {
    let chi = build_chi(emb, part)?;
    let rank_bound = part.chi_rank_bound(emb.embed_dim());
    let reference_rank_bound = part.reference_rank_bound(emb.embed_dim());
    let dec = svd(chi.matrix())?;
    let sigma_before = dec.singular_values().to_vec();
    if rule.is_identity() {
        // Validate parameters even though the spectrum is untouched.
        let sigma_after = rule.apply(&sigma_before)?;
        return Ok(Suppression {
            embeddings: emb.clone(),
            sigma_before,
            sigma_after,
            rank_bound,
            reference_rank_bound,
        });
    }
    let sigma_after = rule.apply(&sigma_before)?;
    let chi_hat = NegativeTargetMatrix::new(reconstruct(&dec, &sigma_after)?, chi.ne_count());
    Ok(Suppression {
        embeddings: scatter_chi_back(emb, &chi_hat, part)?,
        sigma_before,
        sigma_after,
        rank_bound,
        reference_rank_bound,
    })
}

/// Baseline: scale the whole negative-target matrix by a constant factor.
pub fn attenuate(emb: &TextEmbeddings, part: &TokenPartition, factor: f64) -> Result<TextEmbeddings> {
    if !factor.is_finite() {
        return Err(Error::InvalidParameter(format!("attenuation factor {factor}")));
    }
    let chi = build_chi(emb, part)?;
    let scaled = NegativeTargetMatrix::new(chi.matrix() * factor, chi.ne_count());
    scatter_chi_back(emb, &scaled, part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{partition, zero_out_tokens};
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_matrix(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = SeededRng::new(seed);
        DMatrix::from_fn(m, n, |_, _| rng.normal())
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    fn assert_valid(dec: &SpectrumDecomposition, input: &DMatrix<f64>) {
        let r = dec.sigma.len();
        let eye = DMatrix::<f64>::identity(r, r);
        assert!(max_abs(&(dec.u.transpose() * &dec.u - &eye)) <= 1e-10);
        assert!(max_abs(&(dec.v.transpose() * &dec.v - &eye)) <= 1e-10);
        for w in dec.sigma.as_slice().windows(2) {
            assert!(w[0] >= w[1] && w[1] >= 0.0);
        }
        let rec = reconstruct(dec, dec.singular_values()).unwrap();
        let norm = input.norm();
        if norm > 0.0 {
            assert!((rec - input).norm() / norm < 1e-10);
        }
    }

    #[test]
    fn svd_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let dec = svd(&m).unwrap();
        assert_eq!(dec.singular_values(), &[3.0, 2.0, 1.0]);
        assert_valid(&dec, &m);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let m = DMatrix::zeros(6, 4);
        let dec = svd(&m).unwrap();
        assert!(dec.singular_values().iter().all(|&s| s == 0.0));
        assert_eq!(dec.rank_bound(), 4);
    }

    #[test]
    fn svd_random_shapes() {
        for (m, n, seed) in [(8, 5, 1), (5, 8, 2), (768, 72, 3), (24, 9, 4)] {
            let a = random_matrix(m, n, seed);
            let dec = svd(&a).unwrap();
            assert_eq!(dec.rank_bound(), m.min(n));
            assert_valid(&dec, &a);
        }
    }

    #[test]
    fn svd_sign_convention_and_determinism() {
        let a = random_matrix(30, 12, 9);
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert_eq!(d1, d2);
        for k in 0..d1.rank_bound() {
            let col = d1.u.column(k);
            let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = random_matrix(4, 3, 1);
        a[(0, 0)] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn soft_weight_values() {
        let out = soft_weight_spectrum(&[0.0, 1.0, 10.0], 1.0).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!((out[2] - 4.539_992_976_248_485e-4).abs() < 1e-15);

        let sigma = [3.5, 2.0, 0.25];
        assert_eq!(soft_weight_spectrum(&sigma, 0.0).unwrap(), sigma.to_vec());

        let limit = soft_weight_spectrum(&[2.0, 1.0], 1e6).unwrap();
        assert!(limit.iter().all(|&s| s < 1e-300));
        assert!(soft_weight_spectrum(&[-1.0], 1.0).is_err());
        assert!(soft_weight_spectrum(&[1.0], -0.5).is_err());
    }

    #[test]
    fn soft_weight_peak_at_one() {
        let grid: Vec<f64> = (0..10_000).map(|i| 20.0 * i as f64 / 9_999.0).collect();
        let out = soft_weight_spectrum(&grid, 1.0).unwrap();
        let (imax, vmax) = out
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!((grid[imax] - 1.0).abs() < 1e-3);
        assert!((vmax - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn strengthen_values() {
        let out = strengthen_spectrum(&[1.0], 0.001, 1.2).unwrap();
        assert!((out[0] - 1.2 * 0.001f64.exp()).abs() < 1e-15);
        assert!((out[0] - 1.201_200_600_2).abs() < 1e-9);
        let sigma = [4.0, 1.0, 0.0];
        assert_eq!(strengthen_spectrum(&sigma, 0.0, 1.0).unwrap(), sigma.to_vec());
        assert!(strengthen_spectrum(&sigma, 0.1, 0.0).is_err());
        assert!(strengthen_spectrum(&sigma, 0.1, -1.0).is_err());

        let out = strengthen_spectrum(&[5.0, 2.0], 0.01, 1.0).unwrap();
        assert!(out[0] / 5.0 > out[1] / 2.0);
    }

    #[test]
    fn topk_bottomk() {
        assert_eq!(zero_topk(&[5.0, 3.0, 1.0], 2).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(zero_bottomk(&[5.0, 3.0, 1.0], 0).unwrap(), vec![5.0, 3.0, 1.0]);
        assert_eq!(zero_bottomk(&[5.0, 3.0, 1.0], 2).unwrap(), vec![5.0, 0.0, 0.0]);
        assert_eq!(zero_topk(&[5.0, 3.0], 2).unwrap(), vec![0.0, 0.0]);
        assert!(zero_topk(&[5.0, 3.0], 3).is_err());
        assert!(zero_bottomk(&[5.0], 2).is_err());
    }

    #[test]
    fn zero_topk_full_gives_zero_matrix() {
        let a = random_matrix(10, 4, 5);
        let dec = svd(&a).unwrap();
        let z = zero_topk(dec.singular_values(), 4).unwrap();
        assert_eq!(max_abs(&reconstruct(&dec, &z).unwrap()), 0.0);
    }

    #[test]
    fn wnnm_cases() {
        assert_eq!(
            wnnm_threshold(&[5.0, 3.0, 1.0], &[1.0, 1.0, 2.0]).unwrap(),
            vec![4.0, 2.0, 0.0]
        );
        assert_eq!(
            wnnm_threshold(&[5.0, 3.0, 1.0], &[0.0; 3]).unwrap(),
            vec![5.0, 3.0, 1.0]
        );
        let w = wnnm_adaptive_weights(&[4.0, 1.0], 2.0, 1e-6).unwrap();
        let out = wnnm_threshold(&[4.0, 1.0], &w).unwrap();
        assert!((out[0] - (4.0 - 2.0 / (4.0 + 1e-6))).abs() < 1e-15);
        assert!((out[0] - 3.5).abs() < 1e-6);
        assert_eq!(out[1], 0.0);

        assert!(matches!(wnnm_threshold(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(wnnm_threshold(&[5.0, 1.0], &[2.0, 1.0]).is_err());
        assert!(wnnm_threshold(&[5.0, 1.0], &[-1.0, 1.0]).is_err());
    }

    #[test]
    fn reconstruct_length_mismatch() {
        let dec = svd(&random_matrix(5, 3, 2)).unwrap();
        assert!(matches!(reconstruct(&dec, &[1.0, 2.0]), Err(Error::Shape(_))));
        let zero = reconstruct(&dec, &[0.0; 3]).unwrap();
        assert_eq!(max_abs(&zero), 0.0);
    }

    #[test]
    fn soft_weight_shrinks_frobenius_norm() {
        let chi = random_matrix(768, 72, 11);
        let dec = svd(&chi).unwrap();
        let shrunk = soft_weight_spectrum(dec.singular_values(), 1.0).unwrap();
        let chi_hat = reconstruct(&dec, &shrunk).unwrap();
        assert!(chi_hat.norm() < chi.norm());
        // Frobenius norm equals the l2 norm of the spectrum.
        let spec_norm = shrunk.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((chi_hat.norm() - spec_norm).abs() < 1e-9 * chi.norm());
    }

    fn toy_emb(seed: u64) -> (TextEmbeddings, TokenPartition) {
        let emb = TextEmbeddings::new(random_matrix(20, 12, seed), 4).unwrap();
        (emb, partition(4, 12, &[3]).unwrap())
    }

    #[test]
    fn suppress_identity_and_limit() {
        let (emb, part) = toy_emb(21);
        let same = suppress(&emb, &part, &SpectrumRule::Soft { gamma: 0.0 }).unwrap();
        assert_eq!(same, emb);

        let limit = suppress(&emb, &part, &SpectrumRule::Soft { gamma: 1e6 }).unwrap();
        let oracle = zero_out_tokens(&emb, &part.chi_columns()).unwrap();
        let err = (limit.data() - oracle.data()).norm() / emb.data().norm();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn suppress_keeps_sot_and_pe() {
        let (emb, part) = toy_emb(22);
        for rule in [
            SpectrumRule::default(),
            SpectrumRule::strengthen_default(),
            SpectrumRule::ZeroTop { k: 2 },
            SpectrumRule::ZeroBottom { k: 3 },
            SpectrumRule::wnnm_adaptive(1.5),
        ] {
            let out = suppress(&emb, &part, &rule).unwrap();
            for &col in [0].iter().chain(part.pe_indices()) {
                assert_eq!(out.data().column(col), emb.data().column(col), "{rule:?}");
            }
        }
    }

    #[test]
    fn suppress_reports_both_rank_counts() {
        let emb = TextEmbeddings::new(random_matrix(768, 77, 3), 5).unwrap();
        let part = partition(5, 77, &[4, 5]).unwrap();
        let s = suppress_detailed(&emb, &part, &SpectrumRule::default()).unwrap();
        assert_eq!(s.rank_bound, 73);
        assert_eq!(s.reference_rank_bound, 71);
        assert_eq!(s.sigma_before.len(), 73);
    }

    #[test]
    fn suppress_is_bit_deterministic() {
        let (emb, part) = toy_emb(23);
        let a = suppress(&emb, &part, &SpectrumRule::default()).unwrap();
        let b = suppress(&emb, &part, &SpectrumRule::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attenuation_scales_chi_only() {
        let (emb, part) = toy_emb(24);
        let out = attenuate(&emb, &part, 0.1).unwrap();
        for j in 0..emb.token_count() {
            let expected = if part.chi_columns().contains(&j) {
                emb.data().column(j) * 0.1
            } else {
                emb.data().column(j).into_owned()
            };
            assert_eq!(out.data().column(j), expected);
        }
    }

    #[test]
    fn rule_serde_shape() {
        let json = serde_json::to_string(&SpectrumRule::wnnm_adaptive(2.0)).unwrap();
        assert_eq!(json, r#"{"rule":"wnnm","kind":"adaptive","lambda":2.0,"epsilon":1e-6}"#);
        let back: SpectrumRule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SpectrumRule::wnnm_adaptive(2.0));
    }

    proptest! {
        #[test]
        fn soft_shrinkage_law(mut sigma in prop::collection::vec(0.0f64..30.0, 1..20), gamma in 0.01f64..5.0) {
            sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let out = soft_weight_spectrum(&sigma, gamma).unwrap();
            for (s, h) in sigma.iter().zip(&out) {
                prop_assert!(h <= s);
                prop_assert_eq!(h == s, *s == 0.0);
            }
            // factor exp(-gamma s) is nondecreasing along a nonincreasing spectrum
            let factors: Vec<f64> = sigma.iter().map(|&s| (-gamma * s).exp()).collect();
            for w in factors.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn wnnm_rank_nonincreasing_in_lambda(seed in 0u64..500) {
            let dec = svd(&random_matrix(12, 7, seed)).unwrap();
            let mut prev = usize::MAX;
            for i in 0..10 {
                let lambda = 0.5 * i as f64;
                let w = wnnm_adaptive_weights(dec.singular_values(), lambda, DEFAULT_WNNM_EPSILON).unwrap();
                let rank = wnnm_threshold(dec.singular_values(), &w).unwrap().iter().filter(|&&s| s > 0.0).count();
                prop_assert!(rank <= prev);
                prev = rank;
            }
        }

        #[test]
        fn low_rank_inputs_decompose(seed in 0u64..300, rank in 0usize..4) {
            let mut rng = SeededRng::new(seed);
            let (m, n) = if seed % 2 == 0 { (16, 10) } else { (7, 12) };
            let a = DMatrix::from_fn(m, rank, |_, _| rng.normal()) * DMatrix::from_fn(rank, n, |_, _| rng.normal());
            let dec = svd(&a).unwrap();
            assert_valid(&dec, &a);
            prop_assert!(dec.singular_values()[rank.min(dec.rank_bound() - 1)..].iter().all(|&s| s < 1e-10 * (1.0 + a.norm())) || rank >= dec.rank_bound());
        }

        #[test]
        fn eckart_young_truncation(seed in 0u64..200, k in 0usize..6) {
            let a = random_matrix(9, 6, seed);
            let dec = svd(&a).unwrap();
            let kept = zero_bottomk(dec.singular_values(), 6 - k).unwrap();
            let err = (reconstruct(&dec, &kept).unwrap() - &a).norm();
            let tail: f64 = dec.singular_values()[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            prop_assert!((err - tail).abs() < 1e-9);
        }
    }
}
