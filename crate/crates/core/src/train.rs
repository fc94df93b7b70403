//! Toy-scale training: pair sampling, crop construction, the combined
//! objective and an Adam loop with per-group learning rates and freezing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::atm::upsample_node;
use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::encoder::TemplateInput;
use crate::error::{Error, Result};
use crate::losses::{center_heatmap, HeatmapFocal, LossParts, LossWeights, MaskFocal};
use crate::model::{forward_nodes, ModelConfig};
use crate::sampling::{crop_side, extract_region, rect_mask};
use crate::sra::{sample_pairs, PairIndex};
use crate::synthdata::Sequence;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Single,
    Two,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Phase::Single),
            "two" => Ok(Phase::Two),
            _ => Err(Error::Config(format!("unknown phase {s:?} (single|two)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub positive_ratio: f64,
    pub phase: Phase,
    /// Share of the steps spent in the first phase of two-phase training.
    pub phase1_fraction: f64,
    /// Parameter-name prefixes frozen during the second phase.
    pub phase2_freeze: Vec<String>,
    pub weights: LossWeights,
    pub heatmap_focal: HeatmapFocal,
    pub mask_focal: MaskFocal,
    /// Search factors drawn uniformly from this range for training crops.
    pub search_factor_range: [f64; 2],
    /// Largest target displacement from the crop center, as a fraction of the crop side.
    pub center_jitter: f64,
    pub flip_prob: f64,
    /// Brightness is multiplied by a factor drawn from `1 ± brightness_jitter`.
    pub brightness_jitter: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Pairs in the fixed probe batch used to measure convergence.
    pub probe_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr_backbone: 4e-5,
            lr_heads: 4e-4,
            positive_ratio: 0.7,
            phase: Phase::Single,
            phase1_fraction: 0.7,
            phase2_freeze: ["patch_embed", "cls.", "pos.", "id.", "blk", "head.", "atm."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            weights: LossWeights::default(),
            heatmap_focal: HeatmapFocal::default(),
            mask_focal: MaskFocal::default(),
            search_factor_range: [5.0, 8.5],
            center_jitter: 0.4,
            flip_prob: 0.5,
            brightness_jitter: 0.2,
            grad_clip: 5.0,
            probe_pairs: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_heads >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.positive_ratio > 0.0 && self.positive_ratio <= 1.0) {
            return Err(Error::Config(format!("positive_ratio {} outside (0, 1]", self.positive_ratio)));
        }
        let [lo, hi] = self.search_factor_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("bad search_factor_range".into()));
        }
        if !(0.0..0.5).contains(&self.center_jitter) || !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config("center_jitter must be in [0, 0.5), brightness_jitter in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.phase1_fraction) {
            return Err(Error::Config("phase1_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Backbone parameters get `lr_backbone`; heads, masks and presence get `lr_heads`.
pub fn is_backbone(name: &str) -> bool {
    ["patch_embed.", "cls.", "pos.", "id.", "blk"].iter().any(|p| name.starts_with(p))
}

/// One training example in crop coordinates.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub template: Tensor<T>,
    pub search: Tensor<T>,
    pub label: u8,
    /// Normalized `(cx, cy, w, h)` of the target in the search crop.
    pub gt_box: Option<[f64; 4]>,
    /// Row-major score-grid cell holding the target center.
    pub cell: Option<usize>,
    pub heatmap: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> Sample<T> {
    pub fn cast<U: Real>(&self) -> Sample<U> {
        Sample {
            template: self.template.cast(),
            search: self.search.cast(),
            label: self.label,
            gt_box: self.gt_box,
            cell: self.cell,
            heatmap: self.heatmap.cast(),
            mask: self.mask.cast(),
        }
    }
}

fn flip_h(img: &mut Tensor<f32>) {
    let w = *img.shape().last().expect("rank >= 2");
    for row in img.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

fn jitter_brightness(img: &mut Tensor<f32>, k: f32) {
    for v in img.data_mut() {
        *v = (*v * k).clamp(0.0, 1.0);
    }
}

/// Builds the crops and targets of one pair.
///
/// Positives center the search crop on the target with a random offset of up
/// to `center_jitter` of the crop side; negatives crop the other sequence at a
/// spot where its own target (if any) is out of view.
pub fn build_sample<R: Rng + ?Sized>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    seqs: &[Sequence],
    pair: &PairIndex,
    rng: &mut R,
) -> Result<Sample<f32>> {
    let ts = &seqs[pair.template_seq];
    let tb = ts
        .ann
        .bbox(pair.template_frame)
        .ok_or_else(|| Error::Sampling("template frame without target".into()))?;
    let enc = &model.encoder;
    let (mut template, _) = extract_region(
        &ts.frames[pair.template_frame],
        (tb.cx, tb.cy),
        crop_side(&tb, model.template_factor)?,
        enc.template_side,
    )?;
    let out = enc.search_side;
    let grid = model.grid();
    let [lo, hi] = cfg.search_factor_range;
    let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let ss = &seqs[pair.search_seq];
    let frame = &ss.frames[pair.search_frame];
    let visible = ss.ann.bbox(pair.search_frame);

    let (mut search, mut crop_box) = if pair.label == 1 {
        let b = visible.ok_or_else(|| Error::Sampling("positive search frame without target".into()))?;
        let side = crop_side(&b, f)?;
        let j = cfg.center_jitter * side as f64;
        let (dx, dy) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let (patch, t) = extract_region(frame, (b.cx + dx, b.cy + dy), side, out)?;
        (patch, Some(t.to_crop(&b)))
    } else {
        let side = crop_side(&tb, f)?;
        let (h, w) = match frame.shape() {
            [_, h, w] | [h, w] => (*h as f64, *w as f64),
            _ => return Err(Error::dim("frame must be [H×W] or [ch×H×W]")),
        };
        let half = side as f64 / 2.0;
        // keep the crop inside the frame when it fits, so zero padding is not a label cue
        let span = |len: f64| {
            let (lo, hi) = (half.min(len / 2.0), (len - half).max(len / 2.0));
            if hi > lo {
                lo..hi
            } else {
                lo..lo + 1e-9
            }
        };
        let draw = |rng: &mut R| (rng.random_range(span(w)), rng.random_range(span(h)));
        let mut center = draw(rng);
        if let Some(b) = visible {
            let clear =
                |c: (f64, f64)| (c.0 - b.cx).abs() > half + b.w / 2.0 || (c.1 - b.cy).abs() > half + b.h / 2.0;
            let mut tries = 0;
            while !clear(center) && tries < 64 {
                center = draw(rng);
                tries += 1;
            }
            if !clear(center) {
                center = (b.cx + 2.0 * half + b.w, b.cy);
            }
        }
        let (patch, _) = extract_region(frame, center, side, out)?;
        (patch, None)
    };

    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        flip_h(&mut template);
        flip_h(&mut search);
        if let Some(b) = crop_box.as_mut() {
            b.cx = out as f64 - b.cx;
        }
    }
    let k = cfg.brightness_jitter as f32;
    if k > 0.0 {
        let a = rng.random_range(1.0 - k..=1.0 + k);
        let b = rng.random_range(1.0 - k..=1.0 + k);
        jitter_brightness(&mut template, a);
        jitter_brightness(&mut search, b);
    }

    let o = out as f64;
    let gt_box = crop_box.map(|b| [b.cx / o, b.cy / o, b.w / o, b.h / o]);
    let (cell, heatmap) = match gt_box {
        Some([cx, cy, w, h]) => {
            let g = grid as f64;
            let col = ((cx * g).floor().max(0.0) as usize).min(grid - 1);
            let row = ((cy * g).floor().max(0.0) as usize).min(grid - 1);
            (Some(row * grid + col), center_heatmap(grid, (row, col), (w * g, h * g)))
        }
        None => (None, Tensor::zeros(&[grid, grid])),
    };
    Ok(Sample {
        template,
        search,
        label: pair.label,
        gt_box,
        cell,
        heatmap,
        mask: rect_mask(crop_box.as_ref(), out, 1.0),
    })
}

/// Draws `count` pairs and builds their samples.
pub fn draw_samples<R: Rng + ?Sized>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    seqs: &[Sequence],
    positive_ratio: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Sample<f32>>> {
    let exist = exist_table(seqs);
    sample_pairs(&exist, positive_ratio, count, rng)?
        .iter()
        .map(|p| build_sample(model, cfg, seqs, p, rng))
        .collect()
}

pub fn exist_table(seqs: &[Sequence]) -> Vec<Vec<bool>> {
    seqs.iter().map(|s| s.ann.exist.iter().map(|&e| e == 1).collect()).collect()
}

/// Which loss terms contribute gradients; parts are always reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub localization: bool,
    pub logits: bool,
    pub mask: bool,
}

impl TermMask {
    pub const ALL: Self = Self {
        localization: true,
        logits: true,
        mask: true,
    };
}

/// Loss nodes of one sample; localization terms exist only for positives.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerms {
    pub focal: Option<NodeId>,
    pub l1: Option<NodeId>,
    pub giou: Option<NodeId>,
    pub logits: NodeId,
    pub mask: NodeId,
}

/// Records the forward pass of one sample and its loss terms into `g`.
pub fn sample_terms<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    model: &ModelConfig,
    s: &Sample<T>,
    cfg: &TrainConfig,
) -> Result<SampleTerms> {
    let nodes = forward_nodes(g, tape, model, TemplateInput::Image(&s.template), &s.search, true)?;
    let (mut focal, mut l1, mut giou) = (None, None, None);
    if let (Some(bx), Some(cell)) = (s.gt_box, s.cell) {
        focal = Some(g.focal_heatmap(nodes.head.score, &s.heatmap, cfg.heatmap_focal)?);
        let pred = g.box_at_cell(nodes.head.offset, nodes.head.size, cell, model.grid())?;
        l1 = Some(g.l1_box(pred, bx)?);
        giou = Some(g.giou_loss(pred, bx)?);
    }
    let logits = g.cross_entropy(nodes.presence, if s.label == 1 { 0 } else { 1 })?;
    let atm = nodes.atm.as_ref().expect("built with ATM");
    let up = upsample_node(g, atm.fused, model.encoder.search_side)?;
    let mask = g.focal_mask(up, &s.mask, cfg.mask_focal)?;
    Ok(SampleTerms {
        focal,
        l1,
        giou,
        logits,
        mask,
    })
}

/// Weighted objective terms of one sample within a batch of `n` samples
/// holding `npos` positives.
pub fn weighted_terms<T: Real>(t: &SampleTerms, w: &LossWeights, terms: TermMask, n: usize, npos: usize) -> Vec<(NodeId, T)> {
    let mut v = Vec::new();
    if terms.localization && npos > 0 {
        let k = 1.0 / npos as f64;
        for (node, c) in [(t.focal, w.focal), (t.l1, w.l1), (t.giou, w.giou)] {
            if let Some(node) = node {
                v.push((node, T::lit(c * k)));
            }
        }
    }
    if terms.logits {
        v.push((t.logits, T::lit(w.logits / n as f64)));
    }
    if terms.mask {
        v.push((t.mask, T::lit(w.mask / n as f64)));
    }
    v
}

/// Batch loss. Localization terms are averaged over positive samples, the
/// presence and mask terms over all samples. With `tape_grads`, gradients of
/// the weighted objective (restricted to `terms`) are accumulated into the tape.
pub fn batch_loss<T: Real>(
    model: &ModelConfig,
    tape: &mut GradientTape<T>,
    batch: &[Sample<T>],
    cfg: &TrainConfig,
    terms: TermMask,
    tape_grads: bool,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Sampling("empty batch".into()));
    }
    let npos = batch.iter().filter(|s| s.label == 1).count();
    let n = batch.len();
    let mut sums = [0.0f64; 5];
    for s in batch {
        let mut g = Graph::new();
        let t = sample_terms(&mut g, tape, model, s, cfg)?;
        let val = |g: &Graph<T>, node: NodeId| g.value(node).data()[0].as_f64();
        for (i, node) in [t.focal, t.l1, t.giou].into_iter().enumerate() {
            if let Some(node) = node {
                sums[i] += val(&g, node) / npos as f64;
            }
        }
        sums[3] += val(&g, t.logits) / n as f64;
        sums[4] += val(&g, t.mask) / n as f64;
        let objective = weighted_terms(&t, &cfg.weights, terms, n, npos);
        if tape_grads && !objective.is_empty() {
            let total = g.lin_comb(&objective)?;
            g.backward(total, tape)?;
        }
    }
    let [f, l1, gi, lg, m] = sums;
    Ok(LossParts::new(f, l1, gi, lg, m, &cfg.weights))
}

/// Adam with two learning-rate groups and per-step freezing.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(tape: &GradientTape<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = tape.params().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `lr(name)` returns `None` for frozen parameters.
    pub fn step(&mut self, tape: &mut GradientTape<f32>, lr: impl Fn(&str) -> Option<f64>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, (name, p, g)) in tape.params_and_grads_mut().enumerate() {
            let Some(lr) = lr(name) else { continue };
            if lr == 0.0 {
                continue;
            }
            let step = (lr / bc1) as f32;
            let sc2 = bc2.sqrt() as f32;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                *w -= step * *m / ((*v).sqrt() / sc2 + self.eps as f32);
            }
        }
    }
}

fn clip_grads(tape: &mut GradientTape<f32>, max_norm: f64) -> f64 {
    let sq: f64 = tape
        .params_and_grads_mut()
        .map(|(_, _, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        tape.scale_grads((max_norm / norm) as f32);
    }
    norm
}

fn frozen(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p.as_str()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tape: GradientTape<f32>,
    /// One entry per step, measured on that step's batch before the update.
    pub trace: Vec<LossParts>,
    /// Loss on the fixed probe batch before the first and after the last step.
    pub probe_initial: LossParts,
    pub probe_final: LossParts,
    pub ms_per_step: f64,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from(LossParts::CSV_HEADER);
        s.push('\n');
        for (i, p) in self.trace.iter().enumerate() {
            s.push_str(&p.csv_row(i + 1));
            s.push('\n');
        }
        s
    }
}

/// Trains `tape` (or a fresh init from `cfg.seed`) on the given sequences.
/// `on_step` sees every step's losses as they are produced.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    seqs: &[Sequence],
    init: Option<GradientTape<f32>>,
    mut on_step: impl FnMut(usize, &LossParts),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if seqs.len() < 2 {
        return Err(Error::Sampling("training needs at least two sequences".into()));
    }
    let mut tape = match init {
        Some(t) => {
            crate::model::check_params(model, &t)?;
            t
        }
        None => crate::model::init_params(model, cfg.seed)?,
    };
    let mut probe_rng = SplitMix64::seed_from_u64(cfg.seed ^ 0x5eed_9b0e);
    let probe = draw_samples(model, cfg, seqs, cfg.positive_ratio, cfg.probe_pairs.max(1), &mut probe_rng)?;
    let probe_initial = batch_loss(model, &mut tape, &probe, cfg, TermMask::ALL, false)?;

    let mut rng = SplitMix64::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&tape);
    let phase1_steps = match cfg.phase {
        Phase::Single => 0,
        Phase::Two => ((cfg.steps as f64) * cfg.phase1_fraction).round() as usize,
    };
    let sra_only = vec!["sra.".to_string()];
    let mut trace = Vec::with_capacity(cfg.steps);
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let first_phase = step <= phase1_steps;
        let (ratio, terms, freeze) = if first_phase {
            let terms = TermMask {
                localization: true,
                logits: false,
                mask: true,
            };
            (1.0, terms, &sra_only)
        } else if cfg.phase == Phase::Two {
            (cfg.positive_ratio, TermMask::ALL, &cfg.phase2_freeze)
        } else {
            (cfg.positive_ratio, TermMask::ALL, &Vec::new())
        };
        let batch = draw_samples(model, cfg, seqs, ratio, cfg.batch, &mut rng)?;
        tape.zero_grads();
        let parts = batch_loss(model, &mut tape, &batch, cfg, terms, true)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        on_step(step, &parts);
        trace.push(parts);
        clip_grads(&mut tape, cfg.grad_clip);
        adam.step(&mut tape, |name| {
            if frozen(name, freeze) {
                None
            } else if is_backbone(name) {
                Some(cfg.lr_backbone)
            } else {
                Some(cfg.lr_heads)
            }
        });
    }
    let ms_per_step = started.elapsed().as_secs_f64() * 1e3 / cfg.steps as f64;
    let probe_final = batch_loss(model, &mut tape, &probe, cfg, TermMask::ALL, false)?;
    if !probe_final.total.is_finite() {
        return Err(Error::Divergence { step: cfg.steps });
    }
    Ok(TrainOutcome {
        tape,
        trace,
        probe_initial,
        probe_final,
        ms_per_step,
    })
}

/// Fraction of pairs whose presence prediction (`probs[0] ≥ 0.5` ⇔ present)
/// matches the label.
pub fn presence_accuracy(model: &ModelConfig, tape: &GradientTape<f32>, samples: &[Sample<f32>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("presence accuracy of zero samples".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let nodes = forward_nodes(&mut g, tape, model, TemplateInput::Image(&s.template), &s.search, false)?;
        let p_present = g.value(nodes.presence).data()[0];
        if (p_present >= 0.5) == (s.label == 1) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
