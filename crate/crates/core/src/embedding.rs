// SPDX-License-Identifier: MIT OR Apache-2.0

//! Structured text-embedding matrices.
//!
//! Tokens are columns of an `M x N` matrix. Column 0 is `[SOT]`, columns
//! `1..=p` are the prompt tokens and the remaining `N - p - 1` columns are
//! `[EOT]` padding. A [`TokenPartition`] splits the prompt tokens into the
//! positive (kept) and negative (suppressed) sets.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default embedding dimension of a CLIP ViT-L/14 text encoder.
pub const DEFAULT_EMBED_DIM: usize = 768;
/// Default padded sequence length.
pub const DEFAULT_TOKEN_COUNT: usize = 77;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    data: DMatrix<f64>,
    prompt_len: usize,
}

impl TextEmbeddings {
    pub fn new(data: DMatrix<f64>, prompt_len: usize) -> Result<Self> {
        let n = data.ncols();
        if n < prompt_len + 2 {
            return Err(Error::Shape(format!(
                "{n} token columns cannot hold SOT, {prompt_len} prompt tokens and at least one EOT"
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::Shape("embedding dimension is zero".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding entry ({}, {})",
                pos % data.nrows(),
                pos / data.nrows()
            )));
        }
        Ok(Self { data, prompt_len })
    }

    pub fn embed_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn token_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// Replace the matrix, keeping the token layout.
    pub fn with_data(&self, data: DMatrix<f64>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::Shape(format!(
                "replacement matrix is {:?}, expected {:?}",
                data.shape(),
                self.data.shape()
            )));
        }
        Self::new(data, self.prompt_len)
    }

    pub fn prompt_range(&self) -> Range<usize> {
        1..self.prompt_len + 1
    }

    pub fn eot_range(&self) -> Range<usize> {
        self.prompt_len + 1..self.token_count()
    }

    pub fn eot_count(&self) -> usize {
        self.token_count() - self.prompt_len - 1
    }
}

/// Index sets for the four column roles. All indices are absolute column
/// positions in the embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenPartition {
    prompt_len: usize,
    token_count: usize,
    pe: Vec<usize>,
    ne: Vec<usize>,
}

/// Split prompt positions `1..=prompt_len` into positive and negative sets.
pub fn partition(
    prompt_len: usize,
    token_count: usize,
    ne_positions: &[usize],
) -> Result<TokenPartition> {
    if token_count < prompt_len + 2 {
        return Err(Error::InvalidPartition(format!(
            "token count {token_count} leaves no EOT column for prompt length {prompt_len}"
        )));
    }
    if ne_positions.is_empty() {
        return Err(Error::InvalidPartition(
            "no negative-target positions given".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for &pos in ne_positions {
        if pos == 0 || pos > prompt_len {
            return Err(Error::InvalidPartition(format!(
                "position {pos} is outside the prompt span 1..={prompt_len}"
            )));
        }
        if !seen.insert(pos) {
            return Err(Error::InvalidPartition(format!(
                "position {pos} listed twice"
            )));
        }
    }
    let ne: Vec<usize> = seen.iter().copied().collect();
    let pe = (1..=prompt_len).filter(|i| !seen.contains(i)).collect();
    Ok(TokenPartition {
        prompt_len,
        token_count,
        pe,
        ne,
    })
}

impl TokenPartition {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn sot_index(&self) -> usize {
        0
    }

    pub fn pe_indices(&self) -> &[usize] {
        &self.pe
    }

    pub fn ne_indices(&self) -> &[usize] {
        &self.ne
    }

    pub fn eot_indices(&self) -> Range<usize> {
        self.prompt_len + 1..self.token_count
    }

    pub fn eot_count(&self) -> usize {
        self.token_count - self.prompt_len - 1
    }

    /// Columns of the negative-target matrix: NE tokens then every EOT column.
    pub fn chi_columns(&self) -> Vec<usize> {
        self.ne.iter().copied().chain(self.eot_indices()).collect()
    }

    /// `n0` as the reference formula counts it, `min(M, N - p - 1)`, which
    /// assumes a single NE column standing in for one EOT slot.
    pub fn reference_rank_bound(&self, embed_dim: usize) -> usize {
        embed_dim.min(self.token_count - self.prompt_len - 1)
    }

    /// Thin-SVD rank actually used: `min(M, cols(chi))`.
    pub fn chi_rank_bound(&self, embed_dim: usize) -> usize {
        embed_dim.min(self.ne.len() + self.eot_count())
    }

    pub fn check_compatible(&self, emb: &TextEmbeddings) -> Result<()> {
        if emb.token_count() != self.token_count || emb.prompt_len() != self.prompt_len {
            return Err(Error::Shape(format!(
                "partition is for N={}, |p|={} but embeddings have N={}, |p|={}",
                self.token_count,
                self.prompt_len,
                emb.token_count(),
                emb.prompt_len()
            )));
        }
        Ok(())
    }
}

/// `chi = [c^NE | c^EOT_0 .. c^EOT_last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeTargetMatrix {
    chi: DMatrix<f64>,
    ne_count: usize,
}

impl NegativeTargetMatrix {
    pub fn new(chi: DMatrix<f64>, ne_count: usize) -> Self {
        Self { chi, ne_count }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.chi
    }

    pub fn ne_count(&self) -> usize {
        self.ne_count
    }

    pub fn eot_count(&self) -> usize {
        self.chi.ncols() - self.ne_count
    }
}

pub fn build_chi(emb: &TextEmbeddings, part: &TokenPartition) -> Result<NegativeTargetMatrix> {
    part.check_compatible(emb)?;
    let cols = part.chi_columns();
    Ok(NegativeTargetMatrix {
        chi: emb.data().select_columns(cols.iter()),
        ne_count: part.ne_indices().len(),
    })
}

/// Write the columns of `chi_hat` back into the NE and EOT slots.
pub fn scatter_chi_back(
    emb: &TextEmbeddings,
    chi_hat: &NegativeTargetMatrix,
    part: &TokenPartition,
) -> Result<TextEmbeddings> {
    part.check_compatible(emb)?;
    let cols = part.chi_columns();
    let expected = (emb.embed_dim(), cols.len());
    if chi_hat.matrix().shape() != expected || chi_hat.ne_count() != part.ne_indices().len() {
        return Err(Error::Shape(format!(
            "chi_hat is {:?} with {} NE columns, expected {:?} with {}",
            chi_hat.matrix().shape(),
            chi_hat.ne_count(),
            expected,
            part.ne_indices().len()
        )));
    }
    let mut data = emb.data().clone();
    for (k, &col) in cols.iter().enumerate() {
        data.set_column(col, &chi_hat.matrix().column(k));
    }
    TextEmbeddings::new(data, emb.prompt_len())
}

pub fn zero_out_tokens(emb: &TextEmbeddings, indices: &[usize]) -> Result<TextEmbeddings> {
    let n = emb.token_count();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!(
            "token index {bad} out of range 0..{n}"
        )));
    }
    let mut data = emb.data().clone();
    for &i in indices {
        data.column_mut(i).fill(0.0);
    }
    TextEmbeddings::new(data, emb.prompt_len())
}
