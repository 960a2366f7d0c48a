// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison metrics for attention fields and matrices.
//!
//! SSIM uses a uniform square window centered on every pixel and clipped at
//! the borders, with `C1 = (k1 * peak)^2` and `C2 = (k2 * peak)^2`. Uniform
//! windows avoid any dependence on Gaussian kernel truncation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::toy_attention::AttentionMaps;

/// A real `h x w` grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Field2D {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w} field",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn same_shape(&self, other: &Field2D) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!(
                "fields are {}x{} and {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

pub fn mse(a: &Field2D, b: &Field2D) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` when the fields are equal.
pub fn psnr(a: &Field2D, b: &Field2D, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// PSNR of `test` against `reference` with the reference maximum as peak.
pub fn psnr_auto(reference: &Field2D, test: &Field2D) -> Result<f64> {
    psnr(reference, test, reference.max())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

pub fn ssim(a: &Field2D, b: &Field2D, params: SsimParams) -> Result<f64> {
    a.same_shape(b)?;
    let SsimParams { window, k1, k2, peak } = params;
    if window == 0 || a.h < window || a.w < window {
        return Err(Error::Shape(format!(
            "{}x{} field is smaller than the {window}x{window} window",
            a.h, a.w
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    if a == b {
        return Ok(1.0);
    }
    let c1 = (k1 * peak).powi(2);
    let c2 = (k2 * peak).powi(2);
    let before = (window - 1) / 2;
    let after = window / 2;

    let mut total = 0.0;
    for y in 0..a.h {
        let y0 = y.saturating_sub(before);
        let y1 = (y + after).min(a.h - 1);
        for x in 0..a.w {
            let x0 = x.saturating_sub(before);
            let x1 = (x + after).min(a.w - 1);
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let (mut sa, mut sb) = (0.0, 0.0);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    sa += a.get(yy, xx);
                    sb += b.get(yy, xx);
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let da = a.get(yy, xx) - ma;
                    let db = b.get(yy, xx) - mb;
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            vaa /= n;
            vbb /= n;
            vab /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
        }
    }
    Ok(total / (a.h * a.w) as f64)
}

/// Total attention on the listed columns divided by the number of rows, so
/// that all columns together carry mass 1.
pub fn attention_mass(maps: &AttentionMaps, indices: &[usize]) -> f64 {
    let a = maps.matrix();
    let rows = a.nrows().max(1) as f64;
    indices.iter().map(|&j| a.column(j).sum()).sum::<f64>() / rows
}

/// Column `token` of the maps laid out as an `h x w` grid (rows are spatial
/// positions in row-major order).
pub fn token_map(maps: &AttentionMaps, token: usize, h: usize, w: usize) -> Result<Field2D> {
    let a = maps.matrix();
    if token >= a.ncols() || h * w != a.nrows() {
        return Err(Error::Shape(format!(
            "token {token} of a {}x{} map as a {h}x{w} grid",
            a.nrows(),
            a.ncols()
        )));
    }
    Field2D::new(h, w, a.column(token).iter().copied().collect())
}

pub fn relative_frobenius_error(reference: &DMatrix<f64>, test: &DMatrix<f64>) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let norm = reference.norm();
    let diff = (reference - test).norm();
    Ok(if norm == 0.0 { diff } else { diff / norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn psnr_unit_cases() {
        let a = Field2D::new(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Field2D::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 10.0 * 2.0f64.log10()).abs() < 1e-12);
        assert!((v - 3.0103).abs() < 1e-4);
        assert_eq!(v, psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &b, 0.0).is_err());
        let c = Field2D::new(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(psnr(&a, &c, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = SeededRng::new(3);
        let a = Field2D::from_fn(9, 11, |_, _| rng.uniform()).unwrap();
        assert_eq!(ssim(&a, &a, SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negated_checkerboard() {
        // Local means of a checkerboard stay near zero, so only the
        // covariance term carries the sign.
        let a = Field2D::from_fn(12, 12, |y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let b = Field2D::from_fn(12, 12, |y, x| -a.get(y, x)).unwrap();
        let params = SsimParams { peak: 10.0, ..SsimParams::default() };
        assert!(ssim(&a, &b, params).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_noisy_copy_stays_high() {
        let mut rng = SeededRng::new(2024);
        let a = Field2D::from_fn(16, 16, |_, _| rng.uniform()).unwrap();
        let b = Field2D::from_fn(16, 16, |y, x| a.get(y, x) + 0.01 * rng.normal()).unwrap();
        let score = ssim(&a, &b, SsimParams::default()).unwrap();
        assert!(score > 0.9, "{score}");
        assert!(score < 1.0);
    }

    #[test]
    fn ssim_rejects_small_fields() {
        let a = Field2D::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(ssim(&a, &a, SsimParams::default()).is_err());
        let ok = SsimParams { window: 3, ..SsimParams::default() };
        assert_eq!(ssim(&a, &a, ok).unwrap(), 1.0);
    }

    #[test]
    fn token_map_layout() {
        let maps = AttentionMaps::new(DMatrix::from_fn(6, 2, |i, j| (i * 10 + j) as f64));
        let f = token_map(&maps, 1, 2, 3).unwrap();
        assert_eq!(f.get(1, 0), 31.0);
        assert!(token_map(&maps, 2, 2, 3).is_err());
        assert!(token_map(&maps, 0, 3, 3).is_err());
    }

    #[test]
    fn relative_error() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let b = DMatrix::from_element(2, 2, 1.5);
        assert!((relative_frobenius_error(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(relative_frobenius_error(&a, &DMatrix::zeros(3, 2)).is_err());
    }
}
