//! Search-region adjustment: presence estimation from the CLS token and the
//! factor state machine that widens the view while the target looks lost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::encoder::linear_node;
use crate::error::{Error, Result};
use crate::tensor::{gelu, linear, mha, softmax, MhaWeights, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SraParams {
    pub f_base: f64,
    pub f_step: f64,
    pub f_max: f64,
    pub t_logits: f64,
    pub t_score: f64,
}

impl Default for SraParams {
    fn default() -> Self {
        Self {
            f_base: 6.0,
            f_step: 1.0,
            f_max: 8.0,
            t_logits: 0.8,
            t_score: 0.5,
        }
    }
}

impl SraParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |t: f64| t > 0.0 && t < 1.0;
        if !(self.f_base > 0.0 && self.f_base <= self.f_max && self.f_step > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < f_base <= f_max and f_step > 0 (got {}, {}, {})",
                self.f_base, self.f_max, self.f_step
            )));
        }
        if !in_unit(self.t_logits) || !in_unit(self.t_score) {
            return Err(Error::Config("thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The low-confidence condition shared by factor growth and absence calls.
    pub fn looks_absent(&self, logits: f64, p_max: f64) -> bool {
        logits < self.t_logits && p_max < self.t_score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SraState {
    pub f: f64,
    pub params: SraParams,
}

impl SraState {
    pub fn new(params: SraParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            f: params.f_base,
            params,
        })
    }

    pub fn at_base(&self) -> bool {
        self.f == self.params.f_base
    }
}

impl Default for SraState {
    fn default() -> Self {
        let params = SraParams::default();
        Self {
            f: params.f_base,
            params,
        }
    }
}

/// One step of the factor schedule: grow while both confidences are low, otherwise reset.
pub fn sra_update(state: SraState, logits: f64, p_max: f64) -> SraState {
    let p = state.params;
    let f = if p.looks_absent(logits, p_max) {
        (state.f + p.f_step).min(p.f_max)
    } else {
        p.f_base
    };
    SraState { f, ..state }
}

/// `(presence, absence)` probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresenceOutput {
    pub probs: [f64; 2],
}

impl PresenceOutput {
    pub fn logits(&self) -> f64 {
        self.probs[0]
    }
}

/// Parameter `(name, shape)` list for the pooling layer and presence MLP.
pub fn param_shapes(c: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for p in ["q", "k", "v", "o"] {
        v.push((format!("sra.pool.{p}.w"), vec![c, c]));
        v.push((format!("sra.pool.{p}.b"), vec![c]));
    }
    v.push(("sra.fc1.w".into(), vec![c, c / 2]));
    v.push(("sra.fc1.b".into(), vec![c / 2]));
    v.push(("sra.fc2.w".into(), vec![c / 2, 2]));
    v.push(("sra.fc2.b".into(), vec![2]));
    v
}

pub(crate) fn mha_weights<T: Real>(tape: &GradientTape<T>, prefix: &str) -> Result<MhaWeights<T>> {
    let g = |p: &str| tape.get(&format!("{prefix}.{p}")).cloned();
    Ok(MhaWeights {
        wq: g("q.w")?,
        bq: g("q.b")?,
        wk: g("k.w")?,
        bk: g("k.b")?,
        wv: g("v.w")?,
        bv: g("v.b")?,
        wo: g("o.w")?,
        bo: g("o.b")?,
    })
}

/// Cross-attention with the CLS token as query over the search tokens, plus a
/// residual. Returns the pooled vector `[1 × C]` and the `[heads × 1 × N_x]` weights.
pub fn attention_pool<T: Real>(
    cls: &Tensor<T>,
    search: &Tensor<T>,
    w: &MhaWeights<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (one, c) = cls.dims2()?;
    let (_, cs) = search.dims2()?;
    if one != 1 || cs != c {
        return Err(Error::dim(format!(
            "attention_pool: cls {:?} vs search {:?}",
            cls.shape(),
            search.shape()
        )));
    }
    let o = mha(cls, search, search, heads, w)?;
    let mut pooled = o.out;
    pooled.add_assign(cls)?;
    Ok((pooled, o.attn))
}

/// `linear → gelu → linear → softmax` on the pooled vector.
pub fn presence_head<T: Real>(
    pooled: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<PresenceOutput> {
    pooled.ensure_finite("presence_head input")?;
    let h = gelu(&linear(pooled, w1, b1)?);
    let p = softmax(&linear(&h, w2, b2)?, 1)?;
    if p.len() != 2 {
        return Err(Error::dim("presence head must emit two classes"));
    }
    Ok(PresenceOutput {
        probs: [p.data()[0].as_f64(), p.data()[1].as_f64()],
    })
}

/// Forward-only presence estimate using the `sra.*` parameters of `tape`.
pub fn presence<T: Real>(tape: &GradientTape<T>, cls: &Tensor<T>, search: &Tensor<T>, heads: usize) -> Result<PresenceOutput> {
    let (pooled, _) = attention_pool(cls, search, &mha_weights(tape, "sra.pool")?, heads)?;
    presence_head(
        &pooled,
        tape.get("sra.fc1.w")?,
        tape.get("sra.fc1.b")?,
        tape.get("sra.fc2.w")?,
        tape.get("sra.fc2.b")?,
    )
}

/// Differentiable presence probabilities `[1 × 2]`.
pub fn presence_node<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    cls: NodeId,
    search: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let q = linear_node(g, tape, cls, "sra.pool.q")?;
    let k = linear_node(g, tape, search, "sra.pool.k")?;
    let v = linear_node(g, tape, search, "sra.pool.v")?;
    let a = g.attention(q, k, v, heads)?;
    let a = linear_node(g, tape, a, "sra.pool.o")?;
    let pooled = g.add(a, cls)?;
    let h = linear_node(g, tape, pooled, "sra.fc1")?;
    let h = g.gelu(h)?;
    let z = linear_node(g, tape, h, "sra.fc2")?;
    g.softmax_rows(z)
}

/// Indices of one training pair. `label` is 1 when both frames come from the
/// same sequence (target present), 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub template_seq: usize,
    pub template_frame: usize,
    pub search_seq: usize,
    pub search_frame: usize,
    pub label: u8,
}

fn pick_visible<R: Rng + ?Sized>(exist: &[bool], rng: &mut R) -> Option<usize> {
    let n = exist.iter().filter(|&&e| e).count();
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    exist.iter().enumerate().filter(|(_, &e)| e).nth(k).map(|(i, _)| i)
}

/// Draws `count` template/search pairs; each is positive with probability `positive_ratio`.
/// `exist[s][t]` says whether the target is visible in frame `t` of sequence `s`.
pub fn sample_pairs<R: Rng + ?Sized>(
    exist: &[Vec<bool>],
    positive_ratio: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PairIndex>> {
    if !(positive_ratio > 0.0 && positive_ratio <= 1.0) {
        return Err(Error::Sampling(format!("positive ratio {positive_ratio} outside (0, 1]")));
    }
    let usable: Vec<usize> = (0..exist.len()).filter(|&s| exist[s].iter().any(|&e| e)).collect();
    if usable.is_empty() {
        return Err(Error::Sampling("no sequence has a visible target".into()));
    }
    if positive_ratio < 1.0 && exist.len() < 2 {
        return Err(Error::Sampling("negative pairs need at least two sequences".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ts = usable[rng.random_range(0..usable.len())];
        let tf = pick_visible(&exist[ts], rng).expect("usable sequence");
        if rng.random_bool(positive_ratio) {
            let sf = pick_visible(&exist[ts], rng).expect("usable sequence");
            out.push(PairIndex {
                template_seq: ts,
                template_frame: tf,
                search_seq: ts,
                search_frame: sf,
                label: 1,
            });
        } else {
            let mut ss = rng.random_range(0..exist.len() - 1);
            if ss >= ts {
                ss += 1;
            }
            let sf = rng.random_range(0..exist[ss].len().max(1));
            out.push(PairIndex {
                template_seq: ts,
                template_frame: tf,
                search_seq: ss,
                search_frame: sf,
                label: 0,
            });
        }
    }
    Ok(out)
}
