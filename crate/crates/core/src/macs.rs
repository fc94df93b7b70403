//! Analytic multiply-accumulate count of one tracking step. Only matrix
//! products are counted; normalizations, activations and the elementwise
//! mask refinement are ignored.

use serde::Serialize;

use crate::head::{stage_widths, BRANCHES};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub patch_embed: u64,
    pub encoder: u64,
    pub head: u64,
    pub sra: u64,
    pub atm: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.encoder + self.head + self.sra + self.atm
    }
}

/// One encoder layer over `n` tokens of width `c`: qkv + projection,
/// the two attention products, and the FFN.
pub fn encoder_layer(n: u64, c: u64, ffn_ratio: u64) -> u64 {
    4 * n * c * c + 2 * n * n * c + 2 * ffn_ratio * n * c * c
}

/// `baseline` drops the CLS token, the presence branch and the mask module.
pub fn count(cfg: &ModelConfig, baseline: bool) -> MacBreakdown {
    let e = &cfg.encoder;
    let c = e.embed_dim as u64;
    let nz = (e.template_side / e.patch_size).pow(2) as u64;
    let nx = (e.search_side / e.patch_size).pow(2) as u64;
    let n = nz + nx + u64::from(!baseline);
    let patch_embed = (nz + nx) * (e.channels * e.patch_size * e.patch_size) as u64 * c;
    let encoder = e.layers as u64 * encoder_layer(n, c, e.ffn_ratio as u64);

    let mut head = 0;
    for (_, k) in BRANCHES {
        let mut cin = c;
        for w in stage_widths(cfg.head_channels) {
            head += nx * 9 * cin * w as u64;
            cin = w as u64;
        }
        head += nx * cin * k as u64;
    }
    if baseline {
        return MacBreakdown {
            patch_embed,
            encoder,
            head,
            sra: 0,
            atm: 0,
        };
    }

    // pooling: q and o on the single CLS row, k/v over the search tokens
    let sra = 2 * c * c + 2 * nx * c * c + 2 * nx * c + c * (c / 2) + (c / 2) * 2;

    let a = &cfg.atm;
    let d = a.hidden as u64;
    let per_layer = 2 * d * d + 2 * nx * d * d + 2 * nx * d + 2 * a.ffn_ratio as u64 * d * d;
    let atm = a.blocks as u64 * (nx * c * d + a.layers_per_block as u64 * per_layer) + d * 2;

    MacBreakdown {
        patch_embed,
        encoder,
        head,
        sra,
        atm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_matches_hand_sum() {
        // toy: P 8, C 64, 1 channel, z 32 → 16 tokens, x 64 → 64 tokens, L 4,
        // head widths 32/16/8, ATM D 32 × 3 blocks × 3 layers (ffn 2)
        let m = count(&ModelConfig::toy(), false);
        assert_eq!(m.patch_embed, 80 * 64 * 64);
        let n = 81u64;
        let layer = 4 * n * 64 * 64 + 2 * n * n * 64 + 8 * n * 64 * 64;
        assert_eq!(m.encoder, 4 * layer);
        let branch = |k: u64| 64 * 9 * (64 * 32 + 32 * 16 + 16 * 8) + 64 * 8 * k;
        assert_eq!(m.head, branch(1) + 2 * branch(2));
        assert_eq!(m.sra, 2 * 4096 + 2 * 64 * 4096 + 2 * 64 * 64 + 64 * 32 + 64);
        let per_layer = 2 * 1024 + 2 * 64 * 1024 + 2 * 64 * 32 + 4 * 1024;
        assert_eq!(m.atm, 3 * (64 * 64 * 32 + 3 * per_layer) + 64);

        let b = count(&ModelConfig::toy(), true);
        assert_eq!((b.sra, b.atm), (0, 0));
        assert_eq!(b.encoder, 4 * (4 * 80 * 4096 + 2 * 80 * 80 * 64 + 8 * 80 * 4096));
    }

    #[test]
    fn full_preset_lands_near_29_and_30_gmacs() {
        let base = count(&ModelConfig::full(), true).total() as f64 / 1e9;
        let full = count(&ModelConfig::full(), false).total() as f64 / 1e9;
        assert!((base / 29.1 - 1.0).abs() < 0.1, "{base}");
        assert!((full / 30.1 - 1.0).abs() < 0.1, "{full}");
        assert!(full > base && (full - base) / base < 0.05);
    }
}
