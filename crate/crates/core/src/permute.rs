//! Block-swap permutation and training batches for both objectives.
//!
//! A causal decoder only sees the past, so to train it on second-to-last
//! prediction every `l`-th token is swapped with its successor: the window
//! `(y0, y1, y2, y3, y4, ...)` becomes `(y0, y1, y2, y4, y3, ...)`. At input
//! position `j*l + l - 1` the model has seen `y_{<j*l+l-1}` followed by
//! `y_{j*l+l}` and its target is the skipped `y_{j*l+l-1}`. Loss is taken
//! only at those positions, for the next-token objective too.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    NextToken,
    SecondToLast,
}

impl Objective {
    pub fn tag(self) -> &'static str {
        match self {
            Objective::NextToken => "next-token",
            Objective::SecondToLast => "second-to-last",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next-token" | "next" | "fn" => Ok(Objective::NextToken),
            "second-to-last" | "second" | "fs" => Ok(Objective::SecondToLast),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationConfig {
    /// Subsequence length.
    pub l: usize,
    /// Window length; a multiple of `l`.
    pub t: usize,
}

impl PermutationConfig {
    pub fn new(l: usize, t: usize) -> Result<Self> {
        let c = PermutationConfig { l, t };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Config(format!("l must be >= 2, got {}", self.l)));
        }
        if self.t == 0 || !self.t.is_multiple_of(self.l) {
            return Err(Error::Config(format!("window length {} is not a positive multiple of l={}", self.t, self.l)));
        }
        Ok(())
    }
}

/// Swaps positions `(j*l + l - 1, j*l + l)` for every `j` with
/// `j*l + l < window.len()`.
pub fn block_swap_permute<T: Copy>(window: &[T], l: usize) -> Result<Vec<T>> {
    if l < 2 {
        return Err(Error::invalid("block_swap_permute", format!("l must be >= 2, got {l}")));
    }
    if window.len() < l + 1 {
        return Err(Error::invalid("block_swap_permute", format!("window of length {} shorter than l + 1 = {}", window.len(), l + 1)));
    }
    let mut out = window.to_vec();
    let mut i = l - 1;
    while i + 1 < out.len() {
        out.swap(i, i + 1);
        i += l;
    }
    Ok(out)
}

/// `true` exactly at positions `i` with `(i + 1) % l == 0`.
pub fn loss_mask(t: usize, l: usize) -> Vec<bool> {
    (0..t).map(|i| (i + 1) % l == 0).collect()
}

/// Inputs, targets and loss mask, each `[batch, T]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutedBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub batch: usize,
    pub t: usize,
    pub objective: Objective,
}

impl PermutedBatch {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.loss_mask.len() as f64
    }
}

/// Builds one row per offset from windows `split[offset..offset + T + 1]`.
pub fn make_batch(split: &[u32], offsets: &[usize], cfg: PermutationConfig, objective: Objective) -> Result<PermutedBatch> {
    cfg.validate()?;
    let t = cfg.t;
    let mask = loss_mask(t, cfg.l);
    let mut inputs = Vec::with_capacity(offsets.len() * t);
    let mut targets = Vec::with_capacity(offsets.len() * t);
    let mut loss_mask = Vec::with_capacity(offsets.len() * t);
    for &offset in offsets {
        let end = offset + t + 1;
        if end > split.len() {
            return Err(Error::WindowOverrun { offset, end, len: split.len() });
        }
        let window = &split[offset..end];
        let seq = match objective {
            Objective::NextToken => window.to_vec(),
            Objective::SecondToLast => block_swap_permute(window, cfg.l)?,
        };
        inputs.extend_from_slice(&seq[..t]);
        targets.extend_from_slice(&seq[1..]);
        loss_mask.extend_from_slice(&mask);
    }
    Ok(PermutedBatch { inputs, targets, loss_mask, batch: offsets.len(), t, objective })
}
