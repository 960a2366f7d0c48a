// SPDX-License-Identifier: MIT OR Apache-2.0

//! Print the shipped suppression fixture as JSON so it can be checked by
//! tools outside this crate. Matrices are nested row-major lists.
//!
//! ```text
//! cargo run -p eots-core --example dump_fixture > fixture.json
//! ```

use eots_core::fixtures::SuppressionFixture;
use nalgebra::DMatrix;
use serde_json::json;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = SuppressionFixture::shipped()?;
    let cfg = f.model.config();
    let out = json!({
        "timesteps": cfg.timesteps,
        "grid": [cfg.grid_h, cfg.grid_w],
        "d_attn": cfg.d_attn,
        "prompt_len": f.embeddings.prompt_len(),
        "ne_indices": f.partition.ne_indices(),
        "pe_indices": f.partition.pe_indices(),
        "w_q": rows(&f.model.w_q),
        "w_k": rows(&f.model.w_k),
        "w_v": rows(&f.model.w_v),
        "w_o": rows(&f.model.w_o),
        "time_embed": rows(&f.model.time_embed),
        "embeddings": rows(f.embeddings.data()),
        "latent": rows(&f.latent),
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
