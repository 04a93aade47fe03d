//! Token, tree-position and context-role embeddings.
//!
//! A token at tree path `a_1 .. a_k` with role `r` is embedded as
//! `E[token] + sum_i P[i][a_i] + R[r]`. The root path contributes zero.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::itr::{Step, TreePath};
use crate::tokenizer::EncodedTrace;

pub const INIT_STD: f64 = 0.02;

/// Syntactic slot a token fills inside its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextRole {
    Structural,
    SrcAddr,
    DstAddr,
    FuncSig,
    Gas,
    Value,
    ParamInType,
    ParamInValue,
    ParamOutType,
    ParamOutValue,
    StateKind,
    StateKey,
    StateVal,
    LogContract,
    LogEvent,
    LogValue,
}

impl ContextRole {
    pub const COUNT: usize = 16;

    pub const ALL: [ContextRole; 16] = [
        ContextRole::Structural,
        ContextRole::SrcAddr,
        ContextRole::DstAddr,
        ContextRole::FuncSig,
        ContextRole::Gas,
        ContextRole::Value,
        ContextRole::ParamInType,
        ContextRole::ParamInValue,
        ContextRole::ParamOutType,
        ContextRole::ParamOutValue,
        ContextRole::StateKind,
        ContextRole::StateKey,
        ContextRole::StateVal,
        ContextRole::LogContract,
        ContextRole::LogEvent,
        ContextRole::LogValue,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Row of the step table for action `step` at depth `depth` (0-based).
pub fn step_row(depth: usize, step: Step) -> usize {
    2 * depth + matches!(step, Step::R) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    /// vocab x d
    pub token: Array2<f64>,
    /// (2 * max_depth) x d, rows ordered (depth 0 L, depth 0 R, depth 1 L, ...)
    pub step: Array2<f64>,
    /// roles x d
    pub role: Array2<f64>,
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl EmbeddingTables {
    pub fn init(vocab_size: usize, d: usize, max_depth: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTables {
            token: normal_matrix(vocab_size, d, INIT_STD, rng),
            step: normal_matrix(2 * max_depth, d, INIT_STD, rng),
            role: normal_matrix(ContextRole::COUNT, d, INIT_STD, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingTables {
            token: Array2::zeros(self.token.raw_dim()),
            step: Array2::zeros(self.step.raw_dim()),
            role: Array2::zeros(self.role.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.token.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token.nrows()
    }

    pub fn max_depth(&self) -> usize {
        self.step.nrows() / 2
    }

    fn check_path(&self, path: &TreePath) -> Result<()> {
        if path.len() > self.max_depth() {
            return Err(Error::DepthExceeded {
                depth: path.len(),
                max: self.max_depth(),
            });
        }
        Ok(())
    }

    fn add_position(&self, path: &TreePath, mut out: ArrayViewMut1<f64>) {
        for (i, &s) in path.steps().iter().enumerate() {
            out += &self.step.row(step_row(i, s));
        }
    }

    pub fn tree_position_embedding(&self, path: &TreePath) -> Result<Array1<f64>> {
        self.check_path(path)?;
        let mut out = Array1::zeros(self.dim());
        self.add_position(path, out.view_mut());
        Ok(out)
    }

    pub fn token_embedding(&self, id: u32) -> Result<ArrayView1<'_, f64>> {
        if id as usize >= self.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(self.token.row(id as usize))
    }

    pub fn local_embedding(&self, id: u32, path: &TreePath, role: ContextRole) -> Result<Array1<f64>> {
        self.check_path(path)?;
        let mut out = self.token_embedding(id)?.to_owned();
        self.add_position(path, out.view_mut());
        out += &self.role.row(role.index());
        Ok(out)
    }

    /// n x d matrix of local embeddings.
    pub fn embed(&self, enc: &EncodedTrace) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((enc.len(), self.dim()));
        for (i, ((&id, path), &role)) in enc.ids.iter().zip(&enc.paths).zip(&enc.roles).enumerate() {
            self.check_path(path)?;
            let mut row = out.row_mut(i);
            row.assign(&self.token_embedding(id)?);
            self.add_position(path, row.view_mut());
            row += &self.role.row(role.index());
        }
        Ok(out)
    }

    /// Scatters `d_out` back onto the table rows used by `embed`. Row `i`
    /// belongs to token `i`; `d_out` may cover only a prefix of the trace.
    pub fn accumulate_grad(&mut self, enc: &EncodedTrace, d_out: ArrayView2<f64>) {
        let tokens = enc.ids.iter().zip(&enc.paths).zip(&enc.roles);
        for (g, ((&id, path), &role)) in d_out.rows().into_iter().zip(tokens) {
            let mut r = self.token.row_mut(id as usize);
            r += &g;
            for (depth, &s) in path.steps().iter().enumerate() {
                let mut r = self.step.row_mut(step_row(depth, s));
                r += &g;
            }
            let mut r = self.role.row_mut(role.index());
            r += &g;
        }
    }
}
