//! Exact operation counts, one multiply-add = 2 FLOPs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlopKind {
    Full,
    Window { w: usize },
    /// ReLU linear attention alone.
    Linear,
    /// Linear attention plus the squeeze dynamic convolution.
    LinearSqueeze { k: usize, hidden: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Q, K, V and output projections: `8·N·d²`.
    pub projections: u64,
    /// Token mixing: `4·N²·d`, `4·N·w²·d` or `4·N·d²`.
    pub attention: u64,
    /// Depthwise convolution over the grid: `2·N·d·k²`.
    pub squeeze_conv: u64,
    /// Kernel generator MLP, once per image: `2·hidden·d·(1+k²)`.
    pub generator: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.squeeze_conv + self.generator
    }

    /// The part of the count that scales with the token count.
    pub fn per_token_total(&self) -> u64 {
        self.projections + self.attention + self.squeeze_conv
    }
}

pub fn attention_flops(kind: FlopKind, n: u64, d_model: u64, heads: u64) -> Result<FlopCount> {
    if n == 0 || d_model == 0 || heads == 0 {
        return Err(Error::Config("flop model parameters must be positive".into()));
    }
    if d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let mut c = FlopCount {
        projections: 8 * n * d_model * d_model,
        ..Default::default()
    };
    match kind {
        FlopKind::Full => c.attention = 4 * n * n * d_model,
        FlopKind::Window { w } => {
            if w == 0 {
                return Err(Error::Config("window side must be positive".into()));
            }
            let w = w as u64;
            c.attention = 4 * n * w * w * d_model;
        }
        FlopKind::Linear => c.attention = 4 * n * d_model * d_model,
        FlopKind::LinearSqueeze { k, hidden } => {
            let kk = (k * k) as u64;
            c.attention = 4 * n * d_model * d_model;
            c.squeeze_conv = 2 * n * d_model * kk;
            c.generator = 2 * hidden as u64 * d_model * (1 + kk);
        }
    }
    Ok(c)
}
