use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `T x n_q` grid of discrete codes, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    n_q: usize,
    codes: Vec<u32>,
}

impl TokenGrid {
    /// Build a grid from row-major codes. Requires at least one frame and
    /// `codes.len()` divisible by `n_q`.
    pub fn new(n_q: usize, codes: Vec<u32>) -> Result<Self> {
        if n_q == 0 {
            return Err(Error::Shape("n_q must be positive".into()));
        }
        if codes.is_empty() || codes.len() % n_q != 0 {
            return Err(Error::Shape(format!(
                "{} codes do not form whole frames of {n_q}",
                codes.len()
            )));
        }
        Ok(Self { n_q, codes })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let n_q = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_q) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(n_q, rows.concat())
    }

    /// Check every code is below `vocab`.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.codes.iter().position(|&c| c as usize >= vocab) {
            Some(i) => Err(Error::InputDomain(format!(
                "code {} at frame {} column {} outside [0, {vocab})",
                self.codes[i],
                i / self.n_q,
                i % self.n_q
            ))),
            None => Ok(()),
        }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn frames(&self) -> usize {
        self.codes.len() / self.n_q
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.codes[t * self.n_q..(t + 1) * self.n_q]
    }

    pub fn get(&self, t: usize, j: usize) -> u32 {
        self.codes[t * self.n_q + j]
    }

    pub fn set(&mut self, t: usize, j: usize, code: u32) {
        self.codes[t * self.n_q + j] = code;
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.codes.chunks_exact(self.n_q)
    }
}
