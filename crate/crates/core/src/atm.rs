//! Attention-to-mask: a learned query cross-attends to backbone taps and its
//! scaled similarity with the keys is read out as a target mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::encoder::{layer_norm_node, linear_node};
use crate::error::{Error, Result};
use crate::sampling::{bilinear_matrix, bilinear_resize};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Encoder layers feeding each block, shallow to deep.
    pub tap_layers: Vec<usize>,
}

impl AtmConfig {
    pub fn toy() -> Self {
        Self {
            blocks: 3,
            layers_per_block: 3,
            hidden: 32,
            heads: 4,
            ffn_ratio: 2,
            tap_layers: vec![2, 3, 4],
        }
    }

    pub fn full() -> Self {
        Self {
            blocks: 3,
            layers_per_block: 3,
            hidden: 384,
            heads: 8,
            ffn_ratio: 2,
            tap_layers: vec![6, 8, 12],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 {
            return Err(Error::Config("ATM needs at least one block and one layer".into()));
        }
        if self.blocks != self.tap_layers.len() {
            return Err(Error::Config(format!(
                "{} ATM blocks but {} tap layers",
                self.blocks,
                self.tap_layers.len()
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "ATM hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self, c: usize) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let f = d * self.ffn_ratio;
        let mut v = vec![("atm.query".to_string(), vec![1, d])];
        for b in 1..=self.blocks {
            v.push((format!("atm.b{b}.in.w"), vec![c, d]));
            v.push((format!("atm.b{b}.in.b"), vec![d]));
            for l in 1..=self.layers_per_block {
                let p = |s: &str| format!("atm.b{b}.l{l}.{s}");
                for ln in ["ln_q", "ln_f"] {
                    v.push((p(&format!("{ln}.w")), vec![d]));
                    v.push((p(&format!("{ln}.b")), vec![d]));
                }
                for proj in ["q", "k", "v", "o"] {
                    v.push((p(&format!("{proj}.w")), vec![d, d]));
                    v.push((p(&format!("{proj}.b")), vec![d]));
                }
                v.push((p("fc1.w"), vec![d, f]));
                v.push((p("fc1.b"), vec![f]));
                v.push((p("fc2.w"), vec![f, d]));
                v.push((p("fc2.b"), vec![d]));
            }
        }
        v.push(("atm.cls.w".into(), vec![d, 2]));
        v.push(("atm.cls.b".into(), vec![2]));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutput<T> {
    /// `[G×G]`, mean of block masks scaled by the target-class probability.
    pub fused_mask: Tensor<T>,
    /// Post-sigmoid `[G×G]` mask of every block.
    pub per_block_masks: Vec<Tensor<T>>,
    /// `(target, background)`.
    pub class_probs: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct AtmNodes {
    pub fused: NodeId,
    pub per_block: Vec<NodeId>,
    pub mask_logits: Vec<NodeId>,
    pub class_probs: NodeId,
}

/// The tap projected into the block's hidden width: `[N_x × D]`.
pub fn project_tap<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, tap: NodeId, block: usize) -> Result<NodeId> {
    linear_node(g, tape, tap, &format!("atm.b{block}.in"))
}

/// One block: `layers` rounds of query cross-attention over the projected tap.
/// Returns the updated query `[1×D]` and the final layer's head-averaged
/// similarity reshaped to `[G×G]`.
pub fn atm_block_nodes<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    cfg: &AtmConfig,
    query: NodeId,
    tap: NodeId,
    block: usize,
) -> Result<(NodeId, NodeId)> {
    let (n, _) = g.value(tap).dims2()?;
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::dim(format!("tap with {n} tokens is not a square grid")));
    }
    let t = project_tap(g, tape, tap, block)?;
    let mut q = query;
    let mut sim = None;
    for l in 1..=cfg.layers_per_block {
        let p = |s: &str| format!("atm.b{block}.l{l}.{s}");
        let qn = layer_norm_node(g, tape, q, &p("ln_q"))?;
        let qp = linear_node(g, tape, qn, &p("q"))?;
        let kp = linear_node(g, tape, t, &p("k"))?;
        let vp = linear_node(g, tape, t, &p("v"))?;
        if l == cfg.layers_per_block {
            sim = Some(g.similarity(qp, kp, cfg.heads)?);
        }
        let a = g.attention(qp, kp, vp, cfg.heads)?;
        let a = linear_node(g, tape, a, &p("o"))?;
        q = g.add(q, a)?;
        let h = layer_norm_node(g, tape, q, &p("ln_f"))?;
        let h = linear_node(g, tape, h, &p("fc1"))?;
        let h = g.gelu(h)?;
        let h = linear_node(g, tape, h, &p("fc2"))?;
        q = g.add(q, h)?;
    }
    let sim = sim.expect("at least one layer");
    let logits = g.reshape(sim, &[grid, grid])?;
    Ok((q, logits))
}

/// Threads the learned query through all blocks (block `i` reads tap `i`).
pub fn atm_nodes<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, cfg: &AtmConfig, taps: &[NodeId]) -> Result<AtmNodes> {
    cfg.validate()?;
    if taps.len() != cfg.blocks {
        return Err(Error::Config(format!("{} taps for {} ATM blocks", taps.len(), cfg.blocks)));
    }
    let mut q = g.param(tape, "atm.query")?;
    let mut per_block = Vec::with_capacity(cfg.blocks);
    let mut mask_logits = Vec::with_capacity(cfg.blocks);
    for (i, &tap) in taps.iter().enumerate() {
        let (nq, logits) = atm_block_nodes(g, tape, cfg, q, tap, i + 1)?;
        q = nq;
        mask_logits.push(logits);
        per_block.push(g.sigmoid(logits)?);
    }
    let cls = linear_node(g, tape, q, "atm.cls")?;
    let class_probs = g.softmax_rows(cls)?;
    let w = T::one() / T::lit(cfg.blocks as f64);
    let terms: Vec<(NodeId, T)> = per_block.iter().map(|&m| (m, w)).collect();
    let mean = g.lin_comb(&terms)?;
    let fused = g.mul_scalar_at(mean, class_probs, 0)?;
    Ok(AtmNodes {
        fused,
        per_block,
        mask_logits,
        class_probs,
    })
}

pub(crate) fn collect<T: Real>(g: &Graph<T>, n: &AtmNodes) -> MaskOutput<T> {
    let p = g.value(n.class_probs).data();
    MaskOutput {
        fused_mask: g.value(n.fused).clone(),
        per_block_masks: n.per_block.iter().map(|&m| g.value(m).clone()).collect(),
        class_probs: [p[0].as_f64(), p[1].as_f64()],
    }
}

/// Forward-only ATM on `[N_x × C]` taps.
pub fn atm_forward<T: Real>(tape: &GradientTape<T>, cfg: &AtmConfig, taps: &[Tensor<T>]) -> Result<MaskOutput<T>> {
    if taps.len() != cfg.blocks {
        return Err(Error::Config(format!("{} taps for {} ATM blocks", taps.len(), cfg.blocks)));
    }
    let mut g = Graph::new();
    let ids = taps
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let n = atm_nodes(&mut g, tape, cfg, &ids)?;
    Ok(collect(&g, &n))
}

/// Elementwise product of the score map with the fused mask.
pub fn refine_scores<T: Real>(score: &Tensor<T>, fused_mask: &Tensor<T>) -> Result<Tensor<T>> {
    score.zip_map(fused_mask, |s, m| s * m)
}

/// Bilinear upsampling of a `[G×G]` mask to `[out×out]`.
pub fn upsample_mask<T: Real>(mask: &Tensor<T>, out_side: usize) -> Result<Tensor<T>> {
    let (g, _) = mask.dims2()?;
    if out_side < g {
        return Err(Error::Parameter(format!("upsample to {out_side} below grid {g}")));
    }
    bilinear_resize(mask, out_side, out_side)
}

/// Differentiable version of [`upsample_mask`] as two constant matmuls.
pub fn upsample_node<T: Real>(g: &mut Graph<T>, mask: NodeId, out_side: usize) -> Result<NodeId> {
    let (grid, _) = g.value(mask).dims2()?;
    let r = bilinear_matrix::<T>(grid, out_side);
    let rt = r.transpose2()?;
    let rn = g.constant(r)?;
    let rtn = g.constant(rt)?;
    let a = g.matmul(rn, mask)?;
    g.matmul(a, rtn)
}

/// Writes a `[H×W]` mask in `[0,1]` as an 8-bit grayscale PNG (`round(255·m)`).
pub fn save_mask_png<T: Real>(mask: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = mask.dims2()?;
    let px: Vec<u8> = mask
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, px).expect("buffer sized from mask");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sra::mha_weights;
    use crate::tensor::{layer_norm, mha};
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn small(blocks: usize) -> AtmConfig {
        AtmConfig {
            blocks,
            layers_per_block: 2,
            hidden: 8,
            heads: 2,
            ffn_ratio: 2,
            tap_layers: (1..=blocks).collect(),
        }
    }

    fn tape(cfg: &AtmConfig, c: usize, seed: u64) -> GradientTape<f64> {
        let mut t = GradientTape::new();
        let mut rng = SplitMix64::seed_from_u64(seed);
        for (n, s) in cfg.param_shapes(c) {
            let v = if n.ends_with("ln_q.w") || n.ends_with("ln_f.w") {
                Tensor::full(&s, 1.0)
            } else {
                Tensor::from_fn(&s, |_| rng.random_range(-1.0..1.0))
            };
            t.register(n, v);
        }
        t
    }

    fn taps(m: usize, n: usize, c: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        (0..m).map(|_| Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn zero_query_gives_half_mask() {
        let cfg = AtmConfig {
            layers_per_block: 1,
            ..small(1)
        };
        let mut t = tape(&cfg, 6, 1);
        // a zero projected query makes every similarity zero
        for n in ["atm.b1.l1.q.w", "atm.b1.l1.q.b"] {
            t.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = atm_forward(&t, &cfg, &taps(1, 16, 6, 2)).unwrap();
        assert!(out.per_block_masks[0].data().iter().all(|&v| v == 0.5));
        let expect = 0.5 * out.class_probs[0];
        assert!(out.fused_mask.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn single_token_mask_is_scaled_dot() {
        let cfg = AtmConfig {
            layers_per_block: 1,
            heads: 1,
            ..small(1)
        };
        let t = tape(&cfg, 6, 3);
        let tap = taps(1, 1, 6, 4);
        let mut g = Graph::new();
        let tn = g.constant(tap[0].clone()).unwrap();
        let q = g.param(&t, "atm.query").unwrap();
        let (_, logits) = atm_block_nodes(&mut g, &t, &cfg, q, tn, 1).unwrap();
        let qn = layer_norm(t.get("atm.query").unwrap(), t.get("atm.b1.l1.ln_q.w").unwrap(), t.get("atm.b1.l1.ln_q.b").unwrap(), 1e-6).unwrap();
        let w = mha_weights(&t, "atm.b1.l1").unwrap();
        let tp = crate::tensor::linear(&tap[0], t.get("atm.b1.in.w").unwrap(), t.get("atm.b1.in.b").unwrap()).unwrap();
        let qp = crate::tensor::linear(&qn, &w.wq, &w.bq).unwrap();
        let kp = crate::tensor::linear(&tp, &w.wk, &w.bk).unwrap();
        let dot: f64 = qp.data().iter().zip(kp.data()).map(|(a, b)| a * b).sum();
        assert_eq!(g.value(logits).shape(), &[1, 1]);
        assert!((g.value(logits).data()[0] - dot / 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mask_logits_equal_head_averaged_mha_scores() {
        for seed in 0..10 {
            let cfg = small(1);
            let t = tape(&cfg, 6, seed);
            let tap = taps(1, 9, 6, seed + 50);
            let mut g = Graph::new();
            let tn = g.constant(tap[0].clone()).unwrap();
            let q0 = g.param(&t, "atm.query").unwrap();
            // the query entering the last layer comes out of the first one
            let (_, logits) = atm_block_nodes(&mut g, &t, &cfg, q0, tn, 1).unwrap();

            let one = AtmConfig {
                layers_per_block: 1,
                ..cfg.clone()
            };
            let mut g1 = Graph::new();
            let tn1 = g1.constant(tap[0].clone()).unwrap();
            let q1 = g1.param(&t, "atm.query").unwrap();
            let (q_mid, _) = atm_block_nodes(&mut g1, &t, &one, q1, tn1, 1).unwrap();

            let tp = crate::tensor::linear(&tap[0], t.get("atm.b1.in.w").unwrap(), t.get("atm.b1.in.b").unwrap()).unwrap();
            let qn = layer_norm(g1.value(q_mid), t.get("atm.b1.l2.ln_q.w").unwrap(), t.get("atm.b1.l2.ln_q.b").unwrap(), 1e-6).unwrap();
            let o = mha(&qn, &tp, &tp, 2, &mha_weights(&t, "atm.b1.l2").unwrap()).unwrap();
            for j in 0..9 {
                let avg = (o.scores.data()[j] + o.scores.data()[9 + j]) / 2.0;
                assert!((g.value(logits).data()[j] - avg).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_block_fusion() {
        let cfg = small(1);
        let t = tape(&cfg, 6, 7);
        let out = atm_forward(&t, &cfg, &taps(1, 16, 6, 8)).unwrap();
        let expect = out.per_block_masks[0].scale(out.class_probs[0]);
        assert!(out.fused_mask.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn fused_range_and_class_probs() {
        for seed in 0..100 {
            let cfg = small(3);
            let t = tape(&cfg, 6, seed);
            let out = atm_forward(&t, &cfg, &taps(3, 16, 6, seed + 7)).unwrap();
            assert!(out.fused_mask.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((out.class_probs[0] + out.class_probs[1] - 1.0).abs() < 1e-6);
            assert_eq!(out.fused_mask.shape(), &[4, 4]);
        }
    }

    #[test]
    fn background_class_suppresses_mask() {
        let cfg = small(2);
        let mut t = tape(&cfg, 6, 9);
        t.get_mut("atm.cls.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        t.get_mut("atm.cls.b").unwrap().data_mut().copy_from_slice(&[-40.0, 40.0]);
        let out = atm_forward(&t, &cfg, &taps(2, 16, 6, 10)).unwrap();
        assert!(out.fused_mask.max_abs() < 1e-30);
    }

    #[test]
    fn tap_count_and_grid_errors() {
        let cfg = small(2);
        let t = tape(&cfg, 6, 1);
        assert!(matches!(atm_forward(&t, &cfg, &taps(1, 16, 6, 2)), Err(Error::Config(_))));
        assert!(matches!(atm_forward(&t, &cfg, &taps(2, 15, 6, 2)), Err(Error::Dimension(_))));
        let bad = AtmConfig {
            hidden: 7,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn refine_cases() {
        let score = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.6, 0.1]]).unwrap();
        assert_eq!(refine_scores(&score, &Tensor::full(&[2, 2], 1.0)).unwrap(), score);
        assert!(refine_scores(&score, &Tensor::zeros(&[2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
        let mask = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let r = refine_scores(&score, &mask).unwrap();
        assert_eq!(score.argmax().0, 1);
        assert_eq!(r.argmax().0, 2);
        assert_eq!(refine_scores(&score, &Tensor::full(&[2, 2], 0.3)).unwrap().argmax().0, 1);
        assert!(refine_scores(&score, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn upsample_cases() {
        let c = Tensor::<f64>::full(&[4, 4], 0.7);
        assert!(upsample_mask(&c, 16).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let mut rng = SplitMix64::seed_from_u64(3);
        let m = Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0));
        assert!(upsample_mask(&m, 4).unwrap().max_abs_diff(&m).unwrap() < 1e-12);
        let cb = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let up = upsample_mask(&cb, 4).unwrap();
        let taps = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for i in 0..4 {
            for j in 0..4 {
                let expect = taps[i][0] * taps[j][0] + taps[i][1] * taps[j][1];
                assert!((up.at2(i, j) - expect).abs() < 1e-12);
            }
        }
        let mut g = Graph::new();
        let n = g.constant(m.clone()).unwrap();
        let u = upsample_node(&mut g, n, 12).unwrap();
        assert!(g.value(u).max_abs_diff(&upsample_mask(&m, 12).unwrap()).unwrap() < 1e-12);
        assert!(upsample_mask(&m, 3).is_err());
    }

    #[test]
    fn mask_png_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Tensor::from_rows(&[vec![0.0, 0.5], vec![1.0, 0.2]]).unwrap();
        save_mask_png(&m, &p).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!(img.into_raw(), vec![0, 128, 255, 51]);
    }
}
