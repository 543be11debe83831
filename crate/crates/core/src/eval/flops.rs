//! Complexity accounting under fixed conventions:
//!
//! | op                          | cost       |
//! |-----------------------------|------------|
//! | matmul `(m,k)×(k,n)`        | `2·m·k·n`  |
//! | depthwise causal conv1d     | `2·L·D·K`  |
//! | selective scan              | `6·L·D·N`  |
//! | elementwise unary           | 1/element  |
//!
//! Additions, normalization and token bookkeeping are not counted. The
//! numbers are a consistent yardstick, not a hardware measurement.

use crate::model::{VimConfig, VimModel};
use crate::tensor::Float;

pub const SCAN_FLOPS_PER_STATE: u64 = 6;

pub fn count_params<T: Float>(model: &VimModel<T>) -> u64 {
    model.num_params() as u64
}

fn matmul(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub patch_embed: u64,
    pub encoder: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.encoder + self.head
    }
}

/// Cost of all blocks over `tokens` positions; exactly linear in `tokens`.
pub fn encoder_flops(cfg: &VimConfig, tokens: usize) -> u64 {
    let (l, d, di) = (tokens as u64, cfg.embed_dim as u64, cfg.inner_dim() as u64);
    let (n, k) = (cfg.state_dim as u64, cfg.conv_kernel as u64);
    let direction = 2 * l * di * k          // conv
        + l * di                            // silu
        + matmul(l, di, 1) + matmul(l, 1, di) // delta projection
        + l * di                            // softplus
        + 2 * matmul(l, di, n)              // B and C
        + SCAN_FLOPS_PER_STATE * l * di * n;
    let block = matmul(l, d, 2 * di) + 2 * direction + l * di + matmul(l, di, d);
    cfg.depth as u64 * block
}

/// Cost of one single-image forward pass.
pub fn count_flops(cfg: &VimConfig) -> FlopsBreakdown {
    FlopsBreakdown {
        patch_embed: matmul(
            cfg.num_patches() as u64,
            cfg.patch_dim() as u64,
            cfg.embed_dim as u64,
        ),
        encoder: encoder_flops(cfg, cfg.seq_len()),
        head: matmul(1, cfg.embed_dim as u64, cfg.num_classes as u64),
    }
}
