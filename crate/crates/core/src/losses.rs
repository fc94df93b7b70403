//! Training objectives: heatmap focal loss, L1 and GIoU box regression,
//! presence cross-entropy, mask focal loss, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::BoundingBox;
use crate::sra::PresenceOutput;
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Penalty-reduced focal loss on the score map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFocal {
    /// Exponent on the prediction term.
    pub alpha: f64,
    /// Exponent of the `(1 − gt)` penalty reduction around the positive cell.
    pub beta: f64,
}

impl Default for HeatmapFocal {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// Pixelwise binary focal loss on the mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskFocal {
    /// Weight of the positive class; negatives get `1 − alpha`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for MaskFocal {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

fn check_pair<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, what: &str) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "{what}: prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn positives<T: Real>(gt: &Tensor<T>) -> usize {
    gt.data().iter().filter(|&&g| g == T::one()).count()
}

/// Focal loss over the score map, normalized by the number of positive cells
/// (at least one). A target with no positive cell contributes only negatives.
pub fn focal_heatmap<T: Real>(score: &Tensor<T>, gt: &Tensor<T>, fp: HeatmapFocal) -> Result<T> {
    check_pair(score, gt, "focal_heatmap")?;
    let npos = positives(gt).max(1) as f64;
    let mut total = 0.0;
    for (&p, &g) in score.data().iter().zip(gt.data()) {
        let (p, _) = clamp_p(p.as_f64());
        let g = g.as_f64();
        total += if g == 1.0 {
            -(1.0 - p).powf(fp.alpha) * p.ln()
        } else {
            -(1.0 - g).powf(fp.beta) * p.powf(fp.alpha) * (1.0 - p).ln()
        };
    }
    Ok(T::lit(total / npos))
}

pub(crate) fn focal_heatmap_grad<T: Real>(score: &Tensor<T>, gt: &Tensor<T>, fp: HeatmapFocal) -> Result<Tensor<T>> {
    check_pair(score, gt, "focal_heatmap")?;
    let npos = positives(gt).max(1) as f64;
    let a = fp.alpha;
    let data = score
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let (p, clamped) = clamp_p(p.as_f64());
            if clamped {
                return T::zero();
            }
            let g = g.as_f64();
            let d = if g == 1.0 {
                a * (1.0 - p).powf(a - 1.0) * p.ln() - (1.0 - p).powf(a) / p
            } else {
                -(1.0 - g).powf(fp.beta) * (a * p.powf(a - 1.0) * (1.0 - p).ln() - p.powf(a) / (1.0 - p))
            };
            T::lit(d / npos)
        })
        .collect();
    Tensor::new(score.shape().to_vec(), data)
}

/// Mean pixelwise binary focal loss.
pub fn focal_mask<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, fp: MaskFocal) -> Result<T> {
    check_pair(pred, gt, "focal_mask")?;
    let mut total = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, _) = clamp_p(p.as_f64());
        total += if g.as_f64() >= 0.5 {
            -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
        } else {
            -(1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).ln()
        };
    }
    Ok(T::lit(total / pred.len() as f64))
}

pub(crate) fn focal_mask_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, fp: MaskFocal) -> Result<Tensor<T>> {
    check_pair(pred, gt, "focal_mask")?;
    let n = pred.len() as f64;
    let gm = fp.gamma;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let (p, clamped) = clamp_p(p.as_f64());
            if clamped {
                return T::zero();
            }
            let d = if g.as_f64() >= 0.5 {
                -fp.alpha * (-gm * (1.0 - p).powf(gm - 1.0) * p.ln() + (1.0 - p).powf(gm) / p)
            } else {
                -(1.0 - fp.alpha) * (gm * p.powf(gm - 1.0) * (1.0 - p).ln() - p.powf(gm) / (1.0 - p))
            };
            T::lit(d / n)
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Mean absolute difference of `(cx, cy, w, h)` divided by `norm_side`.
pub fn l1_box(pred: &BoundingBox, gt: &BoundingBox, norm_side: f64) -> Result<f64> {
    if norm_side <= 0.0 {
        return Err(Error::Parameter(format!("norm_side must be > 0, got {norm_side}")));
    }
    let d = (pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs();
    Ok(d / (4.0 * norm_side))
}

/// Generalized IoU of two boxes.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    giou_with_grad(a.to_array(), b.to_array()).map(|(g, _)| g)
}

/// GIoU of `(cx, cy, w, h)` boxes and its gradient with respect to the first box.
pub(crate) fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> Result<(f64, [f64; 4])> {
    for bx in [a, b] {
        if !(bx[2] > 0.0 && bx[3] > 0.0) || bx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("degenerate box {bx:?}")));
        }
    }
    let (ax1, ax2) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay1, ay2) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, bx2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by1, by2) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);

    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let (iw, ih) = if overlap { (iw_raw, ih_raw) } else { (0.0, 0.0) };
    let inter = iw * ih;
    let area_a = a[2] * a[3];
    let union = area_a + b[2] * b[3] - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let hull = cw * ch;
    let g = inter / union - (hull - union) / hull;

    // partials with respect to the corners (x1, x2, y1, y2) of box a
    let sel = |c: bool| if c { 1.0 } else { 0.0 };
    let d_inter = if overlap {
        [
            -ih * sel(ax1 > bx1),
            ih * sel(ax2 <= bx2),
            -iw * sel(ay1 > by1),
            iw * sel(ay2 <= by2),
        ]
    } else {
        [0.0; 4]
    };
    let d_area = [-a[3], a[3], -a[2], a[2]];
    let d_hull = [
        -ch * sel(ax1 <= bx1),
        ch * sel(ax2 >= bx2),
        -cw * sel(ay1 <= by1),
        cw * sel(ay2 >= by2),
    ];
    let mut dc = [0.0; 4];
    for i in 0..4 {
        let du = d_area[i] - d_inter[i];
        dc[i] = d_inter[i] / union - inter / (union * union) * du + du / hull - union / (hull * hull) * d_hull[i];
    }
    let grad = [dc[0] + dc[1], dc[2] + dc[3], (dc[1] - dc[0]) / 2.0, (dc[3] - dc[2]) / 2.0];
    Ok((g, grad))
}

/// `−log p[class]` where class 0 is "present" (label 1) and class 1 "absent" (label 0).
pub fn ce_presence(probs: &PresenceOutput, label: u8) -> f64 {
    let p = if label == 1 { probs.probs[0] } else { probs.probs[1] };
    -p.max(PROB_EPS).ln()
}

/// Coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    pub focal: f64,
    pub logits: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            focal: 1.0,
            logits: 1.0,
            mask: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_focal: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_logits: f64,
    pub l_mask: f64,
    pub total: f64,
}

impl LossParts {
    pub fn new(l_focal: f64, l_l1: f64, l_giou: f64, l_logits: f64, l_mask: f64, w: &LossWeights) -> Self {
        let mut p = Self {
            l_focal,
            l_l1,
            l_giou,
            l_logits,
            l_mask,
            total: 0.0,
        };
        p.total = total_loss(&p, w);
        p
    }

    pub const CSV_HEADER: &'static str = "step,l_focal,l_l1,l_giou,l_logits,l_mask,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.l_focal, self.l_l1, self.l_giou, self.l_logits, self.l_mask, self.total
        )
    }
}

pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    w.giou * p.l_giou + w.l1 * p.l_l1 + w.focal * p.l_focal + w.logits * p.l_logits + w.mask * p.l_mask
}

/// Gaussian radius for a box of `w × h` cells such that a box shifted by the
/// radius still overlaps the target with at least `min_overlap` IoU.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Ground-truth score map: exactly one cell (the one holding the target
/// center) equals 1, neighbours decay with a size-scaled Gaussian.
pub fn center_heatmap<T: Real>(grid: usize, center_cell: (usize, usize), size_cells: (f64, f64)) -> Tensor<T> {
    let r = gaussian_radius(size_cells.0, size_cells.1, 0.7).max(0.0).floor();
    let sigma = (2.0 * r + 1.0) / 6.0;
    let (cr, cc) = center_cell;
    Tensor::from_fn(&[grid, grid], |i| {
        let dr = (i / grid) as f64 - cr as f64;
        let dc = (i % grid) as f64 - cc as f64;
        if dr == 0.0 && dc == 0.0 {
            T::one()
        } else {
            let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            T::lit(v.min(1.0 - 1e-6))
        }
    })
}
