// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic inputs shared by tests, the acceptance suite and the CLI.

use nalgebra::{DMatrix, DVector};

use crate::embedding::{partition, TextEmbeddings, TokenPartition};
use crate::error::Result;
use crate::rng::SeededRng;
use crate::toy_attention::{ToyDenoiser, ToyDenoiserConfig};

/// Seed of the shipped suppression fixture.
pub const SUPPRESSION_FIXTURE_SEED: u64 = 2024;

fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.normal())
}

fn normal_vector(rng: &mut SeededRng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.normal())
}

fn latent_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Standard-normal `z_T` of shape `hw x d_latent`; the same draw the
/// suppression fixture uses for `seed`.
pub fn seeded_latent(seed: u64, cfg: &ToyDenoiserConfig) -> DMatrix<f64> {
    normal_matrix(&mut latent_rng(seed), cfg.spatial(), cfg.d_latent, 1.0)
}

/// Layout of the suppression fixture: a four-token prompt in the shape of
/// "a man without glasses" whose last token is the negative target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureParams {
    pub embed_dim: usize,
    pub token_count: usize,
    pub prompt_len: usize,
    pub ne_position: usize,
    /// Norm of the negative-target column along the attention-aligned direction.
    pub ne_strength: f64,
    /// Per-entry scale of the SOT and positive-target columns.
    pub token_scale: f64,
    /// Weight of the prompt mean inside every EOT column.
    pub eot_prompt_share: f64,
    /// Per-entry scale of the EOT-specific noise.
    pub eot_noise: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            token_count: 12,
            prompt_len: 4,
            ne_position: 4,
            ne_strength: 20.0,
            token_scale: 0.5,
            eot_prompt_share: 0.8,
            eot_noise: 0.05,
        }
    }
}

/// Model, embeddings, partition and initial latent for a closed-loop run.
#[derive(Debug, Clone)]
pub struct SuppressionFixture {
    pub model: ToyDenoiser,
    pub embeddings: TextEmbeddings,
    pub partition: TokenPartition,
    pub latent: DMatrix<f64>,
}

impl SuppressionFixture {
    pub fn shipped() -> Result<Self> {
        Self::new(SUPPRESSION_FIXTURE_SEED)
    }

    pub fn new(seed: u64) -> Result<Self> {
        Self::with_params(seed, ToyDenoiserConfig::default(), FixtureParams::default())
    }

    pub fn with_params(seed: u64, model_cfg: ToyDenoiserConfig, params: FixtureParams) -> Result<Self> {
        let model = ToyDenoiser::new(ToyDenoiserConfig { seed, ..model_cfg }, params.embed_dim)?;
        let mut rng = latent_rng(seed);
        let latent = normal_matrix(&mut rng, model_cfg.spatial(), model_cfg.d_latent, 1.0);

        let m = params.embed_dim;
        let mut data = normal_matrix(&mut rng, m, params.token_count, params.token_scale);

        // The negative target points where the average query looks at T.
        let t = model_cfg.timesteps;
        let mut z = latent.clone();
        let time = model.time_embed.row(t - 1);
        for mut row in z.row_iter_mut() {
            row += &time;
        }
        let q_mean = (z * &model.w_q).row_sum().transpose() / model_cfg.spatial() as f64;
        let dir = (&model.w_k * q_mean).normalize();
        let ne = &dir * params.ne_strength + normal_vector(&mut rng, m, 0.1 * params.token_scale);
        data.set_column(params.ne_position, &ne);

        let prompt_mean = data.columns(1, params.prompt_len).column_sum() / params.prompt_len as f64;
        for j in params.prompt_len + 1..params.token_count {
            let noise = normal_vector(&mut rng, m, params.eot_noise);
            data.set_column(j, &(&prompt_mean * params.eot_prompt_share + noise));
        }

        let embeddings = TextEmbeddings::new(data, params.prompt_len)?;
        let partition = partition(params.prompt_len, params.token_count, &[params.ne_position])?;
        Ok(Self {
            model,
            embeddings,
            partition,
            latent,
        })
    }
}

/// Small instance for finite-difference checks: `hw = 16`, `N = 12`, `M = 24`.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub model: ToyDenoiser,
    pub latent: DMatrix<f64>,
    pub timestep: usize,
    pub reference: TextEmbeddings,
    pub candidate: TextEmbeddings,
    pub partition: TokenPartition,
}

pub fn grad_instance(seed: u64) -> Result<GradInstance> {
    let cfg = ToyDenoiserConfig {
        grid_h: 4,
        grid_w: 4,
        d_latent: 8,
        d_attn: 16,
        timesteps: 10,
        seed,
    };
    let (m, n, p) = (24, 12, 5);
    let model = ToyDenoiser::new(cfg, m)?;
    let mut rng = SeededRng::new(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0xdead_beef);
    let latent = normal_matrix(&mut rng, cfg.spatial(), cfg.d_latent, 1.0);
    let reference = TextEmbeddings::new(normal_matrix(&mut rng, m, n, 1.0), p)?;
    let candidate = reference.with_data(reference.data() + normal_matrix(&mut rng, m, n, 0.3))?;
    // one or two negative targets, varied by seed
    let ne: Vec<usize> = if seed % 2 == 0 { vec![2] } else { vec![2, 5] };
    let partition = partition(p, n, &ne)?;
    let timestep = 1 + (seed as usize % cfg.timesteps);
    Ok(GradInstance {
        model,
        latent,
        timestep,
        reference,
        candidate,
        partition,
    })
}
