// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded single-layer, single-head cross-attention denoiser.
//!
//! With latent `z: hw x d_latent` at timestep `t` and embeddings `c: M x N`:
//!
//! ```text
//! Q = (z + 1 time_embed[t-1]) W_Q          hw x d_attn
//! K = c^T W_K,  V = c^T W_V                N  x d_attn
//! A = rowsoftmax(Q K^T / sqrt(d_attn))     hw x N
//! residual = A V W_O                       hw x d_latent
//! ```
//!
//! The forward prediction is `z + residual`; a sampling step moves the latent
//! to `z - residual / T`.
//!
//! Weights come from one [`SeededRng`] stream drawn in the order `W_Q`, `W_K`,
//! `W_V`, `W_O`, `time_embed`, each row-major, each entry uniform in
//! `[-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` the row count of the
//! matrix (`d_latent` for the time table).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::{TextEmbeddings, TokenPartition};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_latent: usize,
    pub d_attn: usize,
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            d_latent: 16,
            d_attn: 32,
            timesteps: 50,
            seed: 0,
        }
    }
}

impl ToyDenoiserConfig {
    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.d_latent == 0 || self.timesteps == 0 {
            return Err(Error::InvalidParameter(format!(
                "all model dimensions must be >= 1: {self:?}"
            )));
        }
        if self.d_attn < 2 {
            return Err(Error::InvalidParameter(format!(
                "d_attn must be >= 2, got {}",
                self.d_attn
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    embed_dim: usize,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub time_embed: DMatrix<f64>,
}

fn seeded_matrix(rng: &mut SeededRng, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let values: Vec<f64> = (0..rows * cols).map(|_| rng.symmetric(bound)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig, embed_dim: usize) -> Result<Self> {
        config.validate()?;
        if embed_dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension is zero".into()));
        }
        let mut rng = SeededRng::new(config.seed);
        let (dl, da) = (config.d_latent, config.d_attn);
        let w_q = seeded_matrix(&mut rng, dl, da, dl);
        let w_k = seeded_matrix(&mut rng, embed_dim, da, embed_dim);
        let w_v = seeded_matrix(&mut rng, embed_dim, da, embed_dim);
        let w_o = seeded_matrix(&mut rng, da, dl, da);
        let time_embed = seeded_matrix(&mut rng, config.timesteps, dl, dl);
        Ok(Self {
            config,
            embed_dim,
            w_q,
            w_k,
            w_v,
            w_o,
            time_embed,
        })
    }

    /// Build from explicit weights, e.g. loaded from a fixture dump.
    pub fn from_weights(
        config: ToyDenoiserConfig,
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        w_v: DMatrix<f64>,
        w_o: DMatrix<f64>,
        time_embed: DMatrix<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let m = w_k.nrows();
        let (dl, da, t) = (config.d_latent, config.d_attn, config.timesteps);
        let expected = [
            ("W_Q", w_q.shape(), (dl, da)),
            ("W_K", w_k.shape(), (m, da)),
            ("W_V", w_v.shape(), (m, da)),
            ("W_O", w_o.shape(), (da, dl)),
            ("time_embed", time_embed.shape(), (t, dl)),
        ];
        for (name, got, want) in expected {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v), ("W_O", &w_o), ("time_embed", &time_embed)] {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(Self {
            config,
            embed_dim: m,
            w_q,
            w_k,
            w_v,
            w_o,
            time_embed,
        })
    }

    /// All weights zero: every forward pass yields a uniform map and no residual.
    pub fn zeroed(config: ToyDenoiserConfig, embed_dim: usize) -> Result<Self> {
        let (dl, da) = (config.d_latent, config.d_attn);
        Self::from_weights(
            config,
            DMatrix::zeros(dl, da),
            DMatrix::zeros(embed_dim, da),
            DMatrix::zeros(embed_dim, da),
            DMatrix::zeros(da, dl),
            DMatrix::zeros(config.timesteps, dl),
        )
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn check_inputs(&self, z: &DMatrix<f64>, t: usize, c: &DMatrix<f64>) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} outside 1..={}",
                self.config.timesteps
            )));
        }
        let want = (self.config.spatial(), self.config.d_latent);
        if z.shape() != want {
            return Err(Error::Shape(format!("latent is {:?}, expected {want:?}", z.shape())));
        }
        if c.nrows() != self.embed_dim {
            return Err(Error::Shape(format!(
                "embeddings have dimension {}, model expects {}",
                c.nrows(),
                self.embed_dim
            )));
        }
        Ok(())
    }

    fn queries(&self, z: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
        let time = self.time_embed.row(t - 1);
        let mut zt = z.clone();
        for mut row in zt.row_iter_mut() {
            row += &time;
        }
        zt * &self.w_q
    }

    pub fn forward(&self, z: &DMatrix<f64>, t: usize, c: &TextEmbeddings) -> Result<ForwardOutput> {
        self.forward_matrix(z, t, c.data())
    }

    pub fn forward_matrix(&self, z: &DMatrix<f64>, t: usize, c: &DMatrix<f64>) -> Result<ForwardOutput> {
        self.check_inputs(z, t, c)?;
        let q = self.queries(z, t);
        let keys = c.transpose() * &self.w_k;
        let values = c.transpose() * &self.w_v;
        let scale = 1.0 / (self.config.d_attn as f64).sqrt();
        let attn = row_softmax(&((&q * keys.transpose()) * scale));
        let residual = &attn * &values * &self.w_o;
        let z_next_pred = z + &residual;
        Ok(ForwardOutput {
            z_next_pred,
            residual,
            maps: AttentionMaps { a: attn },
            queries: q,
            values,
        })
    }

    /// `z_{t-1} = z_t - residual / T`.
    pub fn step_latent(&self, z: &DMatrix<f64>, t: usize, c: &TextEmbeddings) -> Result<DMatrix<f64>> {
        let out = self.forward(z, t, c)?;
        Ok(self.step_from(z, &out))
    }

    pub fn step_from(&self, z: &DMatrix<f64>, out: &ForwardOutput) -> DMatrix<f64> {
        z - &out.residual / self.config.timesteps as f64
    }

    /// Anchor blocks for a loss, computed from the reference embeddings.
    pub fn anchor(
        &self,
        z: &DMatrix<f64>,
        t: usize,
        c: &TextEmbeddings,
        part: &TokenPartition,
        kind: LossKind,
    ) -> Result<Anchor> {
        part.check_compatible(c)?;
        match kind {
            LossKind::Attention => {
                let out = self.forward(z, t, c)?;
                let (pe, ne) = attention_blocks(&out.maps, part);
                Ok(Anchor { kind, pe, ne })
            }
            LossKind::Value => {
                self.check_inputs(z, t, c.data())?;
                let values = c.data().transpose() * &self.w_v;
                let (pe, ne) = value_blocks(&values, part);
                Ok(Anchor { kind, pe, ne })
            }
        }
    }

    /// Loss at `c_hat`, its gradient with respect to every entry of `c_hat`,
    /// and the forward output used to compute them.
    pub fn loss_and_grad(
        &self,
        z: &DMatrix<f64>,
        t: usize,
        anchor: &Anchor,
        c_hat: &TextEmbeddings,
        part: &TokenPartition,
        weights: LossWeights,
    ) -> Result<(LossValue, DMatrix<f64>, ForwardOutput)> {
        part.check_compatible(c_hat)?;
        let out = self.forward(z, t, c_hat)?;
        let n = c_hat.token_count();
        let (loss, grad) = match anchor.kind {
            LossKind::Attention => {
                let (hat_pe, hat_ne) = attention_blocks(&out.maps, part);
                let loss = attention_loss(&hat_pe, &anchor.pe, &hat_ne, &anchor.ne, weights)?;
                let a = out.maps.matrix();
                // dL/dA on the PE and NE columns only.
                let mut g_a = DMatrix::zeros(a.nrows(), n);
                for (k, &j) in part.pe_indices().iter().enumerate() {
                    let d = (hat_pe.column(k) - anchor.pe.column(k)) * (2.0 * weights.pl);
                    g_a.set_column(j, &d);
                }
                for (k, &j) in part.ne_indices().iter().enumerate() {
                    let d = (hat_ne.column(k) - anchor.ne.column(k)) * (-2.0 * weights.nl);
                    g_a.set_column(j, &d);
                }
                let g_s = softmax_backward(a, &g_a);
                // S = Q K^T * scale  =>  dK = scale * dS^T Q ;  K = c^T W_K  =>  dc = W_K dK^T
                let scale = 1.0 / (self.config.d_attn as f64).sqrt();
                let g_k = g_s.transpose() * &out.queries * scale;
                (loss, &self.w_k * g_k.transpose())
            }
            LossKind::Value => {
                let (hat_pe, hat_ne) = value_blocks(&out.values, part);
                let loss = value_loss(&hat_pe, &anchor.pe, &hat_ne, &anchor.ne, weights)?;
                let mut g_v = DMatrix::zeros(n, self.config.d_attn);
                for (k, &j) in part.pe_indices().iter().enumerate() {
                    let d = (hat_pe.row(k) - anchor.pe.row(k)) * (2.0 * weights.pl);
                    g_v.set_row(j, &d);
                }
                for (k, &j) in part.ne_indices().iter().enumerate() {
                    let d = (hat_ne.row(k) - anchor.ne.row(k)) * (-2.0 * weights.nl);
                    g_v.set_row(j, &d);
                }
                (loss, &self.w_v * g_v.transpose())
            }
        };
        if !loss.total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            let bad = grad.iter().filter(|v| !v.is_finite()).count();
            return Err(Error::Numerical {
                stage: format!("loss gradient at t={t}"),
                diagnostics: format!(
                    "loss={:e} (pl={:e}, nl={:e}), {bad} non-finite gradient entries, max |c_hat|={:e}",
                    loss.total,
                    loss.pl,
                    loss.nl,
                    c_hat.data().amax()
                ),
            });
        }
        Ok((loss, grad, out))
    }

    /// Gradient only; see [`ToyDenoiser::loss_and_grad`].
    pub fn grad_loss_wrt_embeddings(
        &self,
        z: &DMatrix<f64>,
        t: usize,
        anchor: &Anchor,
        c_hat: &TextEmbeddings,
        part: &TokenPartition,
        weights: LossWeights,
    ) -> Result<DMatrix<f64>> {
        Ok(self.loss_and_grad(z, t, anchor, c_hat, part, weights)?.1)
    }

    /// Loss value without the backward pass.
    pub fn loss(
        &self,
        z: &DMatrix<f64>,
        t: usize,
        anchor: &Anchor,
        c_hat: &DMatrix<f64>,
        part: &TokenPartition,
        weights: LossWeights,
    ) -> Result<LossValue> {
        match anchor.kind {
            LossKind::Attention => {
                let out = self.forward_matrix(z, t, c_hat)?;
                let (pe, ne) = attention_blocks(&out.maps, part);
                attention_loss(&pe, &anchor.pe, &ne, &anchor.ne, weights)
            }
            LossKind::Value => {
                self.check_inputs(z, t, c_hat)?;
                let values = c_hat.transpose() * &self.w_v;
                let (pe, ne) = value_blocks(&values, part);
                value_loss(&pe, &anchor.pe, &ne, &anchor.ne, weights)
            }
        }
    }
}

pub struct ForwardOutput {
    pub z_next_pred: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub maps: AttentionMaps,
    pub queries: DMatrix<f64>,
    /// `c^T W_V`, one row per token.
    pub values: DMatrix<f64>,
}

/// Row-stochastic `hw x N` cross-attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    a: DMatrix<f64>,
}

impl AttentionMaps {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn token_count(&self) -> usize {
        self.a.ncols()
    }

    pub fn spatial(&self) -> usize {
        self.a.nrows()
    }
}

pub fn row_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Backward of row softmax: `dS = A * (dA - rowsum(dA * A))`.
pub fn softmax_backward(a: &DMatrix<f64>, g_a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g_s = a.component_mul(g_a);
    for (i, mut row) in g_s.row_iter_mut().enumerate() {
        let dot = row.sum();
        for (j, v) in row.iter_mut().enumerate() {
            *v -= a[(i, j)] * dot;
        }
    }
    g_s
}

/// `(A[:, pe], A[:, ne])`, columns in partition order.
pub fn attention_blocks(maps: &AttentionMaps, part: &TokenPartition) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        maps.a.select_columns(part.pe_indices().iter()),
        maps.a.select_columns(part.ne_indices().iter()),
    )
}

/// `(V[pe, :], V[ne, :])` for token-major values `V = c^T W_V`.
pub fn value_blocks(values: &DMatrix<f64>, part: &TokenPartition) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        values.select_rows(part.pe_indices().iter()),
        values.select_rows(part.ne_indices().iter()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Attention,
    Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub kind: LossKind,
    pub pe: DMatrix<f64>,
    pub ne: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pl: f64,
    pub nl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pl: 1.0, nl: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub pl: f64,
    pub nl: f64,
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Preservation term `||A_hat_pe - A_pe||^2`, suppression term
/// `-||A_hat_ne - A_ne||^2`, combined as `pl * L_pl + nl * L_nl`.
pub fn attention_loss(
    hat_pe: &DMatrix<f64>,
    pe: &DMatrix<f64>,
    hat_ne: &DMatrix<f64>,
    ne: &DMatrix<f64>,
    weights: LossWeights,
) -> Result<LossValue> {
    same_shape(hat_pe, pe, "PE blocks")?;
    same_shape(hat_ne, ne, "NE blocks")?;
    let pl = (hat_pe - pe).norm_squared();
    let nl = -(hat_ne - ne).norm_squared();
    Ok(LossValue {
        total: weights.pl * pl + weights.nl * nl,
        pl,
        nl,
    })
}

/// Same functional form as [`attention_loss`] applied to value rows.
pub fn value_loss(
    hat_pe: &DMatrix<f64>,
    pe: &DMatrix<f64>,
    hat_ne: &DMatrix<f64>,
    ne: &DMatrix<f64>,
    weights: LossWeights,
) -> Result<LossValue> {
    attention_loss(hat_pe, pe, hat_ne, ne, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::partition;
    use crate::metrics::attention_mass;

    fn small_config(seed: u64) -> ToyDenoiserConfig {
        ToyDenoiserConfig {
            grid_h: 4,
            grid_w: 4,
            d_latent: 6,
            d_attn: 8,
            timesteps: 10,
            seed,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = SeededRng::new(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn weights_are_seeded_and_bounded() {
        let cfg = small_config(42);
        let a = ToyDenoiser::new(cfg, 24).unwrap();
        let b = ToyDenoiser::new(cfg, 24).unwrap();
        assert_eq!(a, b);
        let c = ToyDenoiser::new(ToyDenoiserConfig { seed: 43, ..cfg }, 24).unwrap();
        assert_ne!(a.w_q, c.w_q);
        assert!(a.w_k.amax() <= 1.0 / 24f64.sqrt());
        assert!(a.w_o.amax() <= 1.0 / 8f64.sqrt());
        // First entry of W_Q is the first draw of the stream.
        let first = SeededRng::new(42).symmetric(1.0 / 6f64.sqrt());
        assert_eq!(a.w_q[(0, 0)], first);
    }

    #[test]
    fn config_validation() {
        let cfg = ToyDenoiserConfig { d_attn: 1, ..small_config(0) };
        assert!(ToyDenoiser::new(cfg, 4).is_err());
        let cfg = ToyDenoiserConfig { grid_h: 0, ..small_config(0) };
        assert!(ToyDenoiser::new(cfg, 4).is_err());
    }

    #[test]
    fn equal_columns_give_uniform_rows() {
        let model = ToyDenoiser::new(small_config(1), 12).unwrap();
        let col = random(12, 1, 5);
        let c = TextEmbeddings::new(DMatrix::from_fn(12, 9, |i, _| col[i]), 3).unwrap();
        let out = model.forward(&random(16, 6, 2), 3, &c).unwrap();
        for v in out.maps.matrix().iter() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_stochastic() {
        for seed in 0..10 {
            let model = ToyDenoiser::new(small_config(seed), 12).unwrap();
            let c = TextEmbeddings::new(random(12, 9, seed + 100), 3).unwrap();
            let out = model.forward(&random(16, 6, seed + 200), 1 + seed as usize % 10, &c).unwrap();
            for row in out.maps.matrix().row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn scaling_an_aligned_token_raises_its_mass() {
        let model = ToyDenoiser::new(small_config(3), 12).unwrap();
        let z = random(16, 6, 4);
        let mut c = random(12, 9, 5);
        // Align token 2 with the mean query so its logits are positive.
        let q_mean = model.queries(&z, 5).row_sum() / 16.0;
        let dir = &model.w_k * q_mean.transpose();
        c.set_column(2, &(dir.normalize() * 0.5));
        let before = model.forward_matrix(&z, 5, &c).unwrap();
        let mut scaled = c.clone();
        scaled.column_mut(2).scale_mut(10.0);
        let after = model.forward_matrix(&z, 5, &scaled).unwrap();
        assert!(attention_mass(&after.maps, &[2]) > attention_mass(&before.maps, &[2]));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = ToyDenoiser::new(small_config(1), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 1), 3).unwrap();
        let z = random(16, 6, 2);
        assert!(model.forward(&z, 0, &c).is_err());
        assert!(model.forward(&z, 11, &c).is_err());
        assert!(model.forward(&random(15, 6, 1), 1, &c).is_err());
        let wrong = TextEmbeddings::new(random(11, 9, 1), 3).unwrap();
        assert!(model.forward(&z, 1, &wrong).is_err());
    }

    #[test]
    fn zero_model_step_is_identity() {
        let model = ToyDenoiser::zeroed(small_config(0), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 1), 3).unwrap();
        let z = random(16, 6, 2);
        assert_eq!(model.step_latent(&z, 4, &c).unwrap(), z);
    }

    #[test]
    fn blocks_and_mass_partition() {
        let model = ToyDenoiser::new(small_config(7), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 8), 3).unwrap();
        let part = partition(3, 9, &[2]).unwrap();
        let out = model.forward(&c_z(), 2, &c).unwrap();
        let (pe, ne) = attention_blocks(&out.maps, &part);
        assert_eq!(pe.ncols(), 2);
        assert_eq!(ne.ncols(), 1);
        assert_eq!(pe.column(0), out.maps.matrix().column(1));
        assert_eq!(pe.column(1), out.maps.matrix().column(3));
        let other: Vec<usize> = std::iter::once(0).chain(part.eot_indices()).collect();
        let total = attention_mass(&out.maps, part.pe_indices())
            + attention_mass(&out.maps, part.ne_indices())
            + attention_mass(&out.maps, &other);
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn c_z() -> DMatrix<f64> {
        random(16, 6, 99)
    }

    #[test]
    fn loss_examples() {
        let a = random(5, 2, 1);
        let b = random(5, 1, 2);
        let w = LossWeights::default();
        let l = attention_loss(&a, &a, &b, &b, w).unwrap();
        assert_eq!((l.total, l.pl, l.nl), (0.0, 0.0, 0.0));

        // ||E||^2 = 4 on the NE block
        let mut e = DMatrix::zeros(5, 1);
        e[(0, 0)] = 2.0;
        let l = attention_loss(&a, &a, &(&b + e), &b, w).unwrap();
        assert!((l.total + 2.0).abs() < 1e-12);
        assert!(attention_loss(&a, &b, &b, &b, w).is_err());

        // translating |ne| value rows of width d by delta
        let v = random(2, 8, 3);
        let shifted = v.map(|x| x + 0.25);
        let l = value_loss(&a, &a, &shifted, &v, LossWeights { pl: 1.0, nl: 1.0 }).unwrap();
        assert!((l.nl + 2.0 * 8.0 * 0.0625).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_anchor() {
        let model = ToyDenoiser::new(small_config(11), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 12), 3).unwrap();
        let part = partition(3, 9, &[3]).unwrap();
        let z = c_z();
        for kind in [LossKind::Attention, LossKind::Value] {
            let anchor = model.anchor(&z, 6, &c, &part, kind).unwrap();
            let g = model
                .grad_loss_wrt_embeddings(&z, 6, &anchor, &c, &part, LossWeights { pl: 1.0, nl: 0.0 })
                .unwrap();
            assert_eq!(g.amax(), 0.0);
        }
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let model = ToyDenoiser::new(small_config(13), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 14), 3).unwrap();
        let c_hat = c.with_data(c.data() + random(12, 9, 15) * 0.3).unwrap();
        let part = partition(3, 9, &[1, 3]).unwrap();
        let z = c_z();
        for kind in [LossKind::Attention, LossKind::Value] {
            let anchor = model.anchor(&z, 2, &c, &part, kind).unwrap();
            let g = |pl, nl| {
                model
                    .grad_loss_wrt_embeddings(&z, 2, &anchor, &c_hat, &part, LossWeights { pl, nl })
                    .unwrap()
            };
            let combo = g(1.0, 0.0) * 0.7 + g(0.0, 1.0) * 0.3;
            assert!((g(0.7, 0.3) - combo).amax() < 1e-12);
        }
    }

    #[test]
    fn permuting_pe_tokens_permutes_maps() {
        let model = ToyDenoiser::new(small_config(17), 12).unwrap();
        let c = TextEmbeddings::new(random(12, 9, 18), 4).unwrap();
        let part = partition(4, 9, &[2]).unwrap();
        let z = c_z();
        let c_hat = c.with_data(c.data() + random(12, 9, 19) * 0.2).unwrap();
        let anchor = model.anchor(&z, 3, &c, &part, LossKind::Attention).unwrap();
        let loss = model.loss(&z, 3, &anchor, c_hat.data(), &part, LossWeights::default()).unwrap();

        let mut swapped = c_hat.data().clone();
        swapped.swap_columns(1, 4);
        let mut c_sw = c.data().clone();
        c_sw.swap_columns(1, 4);
        let c_sw = TextEmbeddings::new(c_sw, 4).unwrap();
        let out = model.forward_matrix(&z, 3, &swapped).unwrap();
        let orig = model.forward_matrix(&z, 3, c_hat.data()).unwrap();
        assert!((out.maps.matrix().column(1) - orig.maps.matrix().column(4)).amax() < 1e-15);
        let anchor_sw = model.anchor(&z, 3, &c_sw, &part, LossKind::Attention).unwrap();
        let loss_sw = model.loss(&z, 3, &anchor_sw, &swapped, &part, LossWeights::default()).unwrap();
        assert!((loss.total - loss_sw.total).abs() < 1e-12);
    }
}
