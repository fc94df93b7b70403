//! Per-sequence tracking loop: crop → backbone → head / presence / masks →
//! decode → factor update.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::atm::{refine_scores, upsample_mask};
use crate::autodiff::GradientTape;
use crate::encoder::{embed_template, TemplateInput};
use crate::error::{Error, Result};
use crate::eval::TrackResult;
use crate::head::decode_with;
use crate::model::{infer, ModelConfig};
use crate::sampling::{crop_side, extract_region, hanning2d, BoundingBox};
use crate::sra::{sra_update, SraParams, SraState};
use crate::synthdata::Sequence;
use crate::tensor::Tensor;

/// Smallest box side kept in the tracker state, so crops never collapse.
pub const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub use_sra: bool,
    pub use_atm: bool,
    pub use_window: bool,
    pub sra: SraParams,
    /// Keep the previous box while the target looks absent instead of
    /// following the (unreliable) peak. Off by default.
    pub freeze_on_absent: bool,
    /// Record per-frame wall time; when off the `ms` column is 0 so traces are
    /// byte-reproducible.
    pub timing: bool,
    /// Keep the upsampled pixel mask in each frame output.
    pub keep_masks: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            use_sra: true,
            use_atm: true,
            use_window: true,
            sra: SraParams::default(),
            freeze_on_absent: false,
            timing: false,
            keep_masks: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub template_tokens: Tensor<f32>,
    pub last_box: BoundingBox,
    pub sra: SraState,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    /// Image-coordinate box (center convention).
    pub bbox: BoundingBox,
    /// Presence probability.
    pub logits: f64,
    pub p_max: f64,
    /// Search factor used for this frame's crop.
    pub factor: f64,
    pub window_used: bool,
    pub exist_pred: u8,
    pub mask: Option<Tensor<f32>>,
    pub ms: f64,
}

pub struct Tracker<'a> {
    model: &'a ModelConfig,
    weights: &'a GradientTape<f32>,
    cfg: TrackerConfig,
    window: Tensor<f32>,
    pub state: TrackerState,
}

/// Keeps the box at least [`MIN_BOX_SIDE`], no larger than the frame and
/// centered inside it, so a bad frame cannot blow up the next crop.
fn sane(b: BoundingBox, frame_w: f64, frame_h: f64) -> BoundingBox {
    BoundingBox::new(
        b.cx.clamp(0.0, frame_w),
        b.cy.clamp(0.0, frame_h),
        b.w.clamp(MIN_BOX_SIDE, frame_w.max(MIN_BOX_SIDE)),
        b.h.clamp(MIN_BOX_SIDE, frame_h.max(MIN_BOX_SIDE)),
    )
}

impl<'a> Tracker<'a> {
    /// Crops the template around the initial box and caches its tokens.
    pub fn init(
        model: &'a ModelConfig,
        weights: &'a GradientTape<f32>,
        cfg: TrackerConfig,
        frame: &Tensor<f32>,
        gt: Option<&BoundingBox>,
    ) -> Result<Self> {
        model.validate()?;
        cfg.sra.validate()?;
        let gt = gt.ok_or_else(|| Error::Precondition("tracker init needs a visible target".into()))?;
        gt.validate()?;
        let side = crop_side(gt, model.template_factor)?;
        let (patch, _) = extract_region(frame, (gt.cx, gt.cy), side, model.encoder.template_side)?;
        let template_tokens = embed_template(weights, &model.encoder, &patch)?;
        Ok(Self {
            model,
            weights,
            cfg,
            window: hanning2d(model.grid())?,
            state: TrackerState {
                template_tokens,
                last_box: *gt,
                sra: SraState::new(cfg.sra)?,
                frame_index: 0,
            },
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn step(&mut self, frame: &Tensor<f32>) -> Result<FrameOutput> {
        let started = Instant::now();
        let st = &self.state;
        let factor = st.sra.f;
        let side = crop_side(&st.last_box, factor)?;
        let out_side = self.model.search_side();
        let (patch, t) = extract_region(frame, (st.last_box.cx, st.last_box.cy), side, out_side)?;
        let inf = infer(
            self.weights,
            self.model,
            TemplateInput::Tokens(&st.template_tokens),
            &patch,
            self.cfg.use_atm,
        )?;
        let raw = &inf.head.score;
        let score = match &inf.masks {
            Some(m) => refine_scores(raw, &m.fused_mask)?,
            None => raw.clone(),
        };
        let window_used = self.cfg.use_window && st.sra.at_base();
        let d = decode_with(&inf.head, &score, raw, window_used.then_some(&self.window), out_side)?;
        let logits = inf.presence.logits();
        let absent = self.cfg.sra.looks_absent(logits, d.p_max);
        let shape = frame.shape();
        let (fh, fw) = (shape[shape.len() - 2] as f64, shape[shape.len() - 1] as f64);
        let bbox = sane(t.from_crop(&d.bbox), fw, fh);
        let mask = match (&inf.masks, self.cfg.keep_masks) {
            (Some(m), true) => Some(upsample_mask(&m.fused_mask, out_side)?),
            _ => None,
        };

        let st = &mut self.state;
        st.frame_index += 1;
        if !(self.cfg.freeze_on_absent && absent) {
            st.last_box = bbox;
        }
        if self.cfg.use_sra {
            st.sra = sra_update(st.sra, logits, d.p_max);
        }
        Ok(FrameOutput {
            frame: st.frame_index,
            bbox,
            logits,
            p_max: d.p_max,
            factor,
            window_used,
            exist_pred: u8::from(!absent),
            mask,
            ms: if self.cfg.timing {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        })
    }
}

pub const TRACE_HEADER: &str = "frame,x,y,w,h,logits,p_max,factor,window_used,ms";

/// Trace rows with top-left boxes, one per tracked frame.
pub fn trace_csv(outputs: &[FrameOutput]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for o in outputs {
        let [x, y, w, h] = o.bbox.to_top_left();
        s.push_str(&format!(
            "{},{x:.4},{y:.4},{w:.4},{h:.4},{:.6},{:.6},{:.3},{},{:.3}\n",
            o.frame,
            o.logits,
            o.p_max,
            o.factor,
            u8::from(o.window_used),
            o.ms
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub name: String,
    pub outputs: Vec<FrameOutput>,
    pub result: TrackResult,
}

/// Tracks a whole sequence from its first annotated box. The result file
/// repeats the initial box for frame 0.
pub fn run_sequence(model: &ModelConfig, weights: &GradientTape<f32>, cfg: TrackerConfig, seq: &Sequence) -> Result<SequenceRun> {
    if seq.is_empty() {
        return Err(Error::Precondition(format!("sequence {} has no frames", seq.name)));
    }
    let init = seq.ann.bbox(0);
    let mut tr = Tracker::init(model, weights, cfg, &seq.frames[0], init.as_ref())?;
    let first = init.expect("checked by init");
    let mut outputs = Vec::with_capacity(seq.len() - 1);
    let mut res = vec![first.to_top_left()];
    let mut exist_pred = vec![1u8];
    for f in &seq.frames[1..] {
        let o = tr.step(f)?;
        res.push(o.bbox.to_top_left());
        exist_pred.push(o.exist_pred);
        outputs.push(o);
    }
    Ok(SequenceRun {
        name: seq.name.clone(),
        outputs,
        result: TrackResult { res, exist_pred },
    })
}

/// Worker count: `FOCUSTRACK_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var("FOCUSTRACK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Tracks several sequences on up to `workers` threads; results come back
/// ordered by sequence name.
pub fn run_many(
    model: &ModelConfig,
    weights: &GradientTape<f32>,
    cfg: TrackerConfig,
    seqs: &[Sequence],
    workers: usize,
) -> Vec<(String, Result<SequenceRun>)> {
    let workers = workers.clamp(1, seqs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(String, Result<SequenceRun>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(seq) = seqs.get(i) else { break };
                        local.push((seq.name.clone(), run_sequence(model, weights, cfg, seq)));
                    }
                    local
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("tracking worker panicked"))
            .collect()
    });
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
