// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics for the `[EOT]` padding block: pairwise distances, low-rank
//! reconstruction curves, prompt replacement and the mean-padding baseline.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::{zero_out_tokens, TextEmbeddings, TokenPartition};
use crate::error::{Error, Result};
use crate::swr::{reconstruct, svd, zero_bottomk, SpectrumDecomposition};

/// `Psi = [c^EOT_0 .. c^EOT_last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EotMatrix {
    psi: DMatrix<f64>,
}

impl EotMatrix {
    pub fn from_embeddings(emb: &TextEmbeddings) -> Self {
        Self {
            psi: emb.data().columns(emb.prompt_len() + 1, emb.eot_count()).into_owned(),
        }
    }

    pub fn from_matrix(psi: DMatrix<f64>) -> Self {
        Self { psi }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn rank_bound(&self) -> usize {
        self.psi.nrows().min(self.psi.ncols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; a zero column is at distance 1 from any nonzero one.
    Cosine,
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidParameter(format!("unknown distance metric {other:?}"))),
        }
    }
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
        }
    }

    pub fn distance(self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self {
            Self::Euclidean => (a - b).norm(),
            Self::Cosine => {
                let (na, nb) = (a.norm(), b.norm());
                match (na == 0.0, nb == 0.0) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => 1.0,
                    (false, false) => 1.0 - a.dot(b) / (na * nb),
                }
            }
        }
    }
}

/// Symmetric pairwise distance matrix over an arbitrary column set.
pub fn distance_matrix(data: &DMatrix<f64>, columns: &[usize], metric: DistanceMetric) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = columns.iter().map(|&j| data.column(j).into_owned()).collect();
    let n = cols.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = metric.distance(&cols[i], &cols[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

pub fn eot_distance_matrix(emb: &TextEmbeddings, metric: DistanceMetric) -> Result<DMatrix<f64>> {
    if emb.eot_count() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least two EOT columns, found {}",
            emb.eot_count()
        )));
    }
    let cols: Vec<usize> = emb.eot_range().collect();
    Ok(distance_matrix(emb.data(), &cols, metric))
}

/// Mean off-diagonal EOT-EOT distance and mean EOT-to-prompt distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub mean_intra_eot: f64,
    pub max_intra_eot: f64,
    pub mean_eot_to_prompt: f64,
    pub min_eot_to_prompt: f64,
}

pub fn eot_separation(emb: &TextEmbeddings, metric: DistanceMetric) -> Result<SeparationStats> {
    let d = eot_distance_matrix(emb, metric)?;
    let n = d.nrows();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += d[(i, j)];
                max = max.max(d[(i, j)]);
            }
        }
    }
    let (mut cross_sum, mut cross_min, mut count) = (0.0, f64::INFINITY, 0usize);
    for e in emb.eot_range() {
        let ce = emb.data().column(e).into_owned();
        for p in emb.prompt_range() {
            let v = metric.distance(&ce, &emb.data().column(p).into_owned());
            cross_sum += v;
            cross_min = cross_min.min(v);
            count += 1;
        }
    }
    Ok(SeparationStats {
        mean_intra_eot: sum / (n * (n - 1)) as f64,
        max_intra_eot: max,
        mean_eot_to_prompt: if count == 0 { f64::NAN } else { cross_sum / count as f64 },
        min_eot_to_prompt: cross_min,
    })
}

/// Best rank-`k` approximation and its relative Frobenius error.
pub fn rank_k_reconstruct(psi: &EotMatrix, k: usize) -> Result<(DMatrix<f64>, f64)> {
    let dec = svd(psi.matrix())?;
    rank_k_from(&dec, psi.matrix(), k)
}

fn rank_k_from(dec: &SpectrumDecomposition, psi: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, f64)> {
    let r = dec.rank_bound();
    if k > r {
        return Err(Error::InvalidParameter(format!("rank {k} exceeds rank bound {r}")));
    }
    let kept = zero_bottomk(dec.singular_values(), r - k)?;
    let approx = reconstruct(dec, &kept)?;
    let norm = psi.norm();
    let err = if norm == 0.0 { 0.0 } else { (psi - &approx).norm() / norm };
    Ok((approx, err))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub k: usize,
    pub relative_error: f64,
    /// Fraction of `sum sigma_i^2` held by the first `k` singular values.
    pub energy_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub singular_values: Vec<f64>,
    pub points: Vec<RankPoint>,
}

impl RankCurve {
    /// Smallest `k` whose relative error is at most `tolerance`.
    pub fn knee(&self, tolerance: f64) -> Option<usize> {
        self.points.iter().find(|p| p.relative_error <= tolerance).map(|p| p.k)
    }
}

/// Rank-`k` errors for `k = 0..=r`, each from an actual reconstruction.
pub fn rank_curve(psi: &EotMatrix) -> Result<RankCurve> {
    let dec = svd(psi.matrix())?;
    let energy: Vec<f64> = dec.singular_values().iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    let mut points = Vec::with_capacity(dec.rank_bound() + 1);
    let mut kept = 0.0;
    for k in 0..=dec.rank_bound() {
        if k > 0 {
            kept += energy[k - 1];
        }
        let (_, err) = rank_k_from(&dec, psi.matrix(), k)?;
        points.push(RankPoint {
            k,
            relative_error: err,
            energy_fraction: if total == 0.0 { 1.0 } else { kept / total },
        });
    }
    Ok(RankCurve {
        singular_values: dec.singular_values().to_vec(),
        points,
    })
}

/// Overwrite every prompt column with the chosen EOT column.
pub fn replace_prompt_with_eot(emb: &TextEmbeddings, eot_index: usize) -> Result<TextEmbeddings> {
    if !emb.eot_range().contains(&eot_index) {
        return Err(Error::InvalidParameter(format!(
            "column {eot_index} is not an EOT column ({:?})",
            emb.eot_range()
        )));
    }
    let mut data = emb.data().clone();
    let source = emb.data().column(eot_index).into_owned();
    for j in emb.prompt_range() {
        data.set_column(j, &source);
    }
    TextEmbeddings::new(data, emb.prompt_len())
}

pub fn mean_eot_embedding(emb: &TextEmbeddings) -> DVector<f64> {
    EotMatrix::from_embeddings(emb).psi.column_mean()
}

/// Fraction of spectral energy in the leading singular value.
pub fn leading_energy_fraction(m: &DMatrix<f64>) -> Result<f64> {
    let dec = svd(m)?;
    let total: f64 = dec.singular_values().iter().map(|s| s * s).sum();
    Ok(if total == 0.0 { 0.0 } else { dec.singular_values()[0].powi(2) / total })
}

/// Mean-padding baseline: remove the EOT mean from every EOT column and,
/// optionally, zero the negative-target tokens.
pub fn mean_padding_baseline(
    emb: &TextEmbeddings,
    part: &TokenPartition,
    zero_negative: bool,
) -> Result<TextEmbeddings> {
    part.check_compatible(emb)?;
    let mean = mean_eot_embedding(emb);
    let mut data = emb.data().clone();
    for j in emb.eot_range() {
        let centered = data.column(j) - &mean;
        data.set_column(j, &centered);
    }
    let out = TextEmbeddings::new(data, emb.prompt_len())?;
    if zero_negative {
        zero_out_tokens(&out, part.ne_indices())
    } else {
        Ok(out)
    }
}
