//! Tracking metrics (success AUC, precision, normalized precision, state
//! accuracy) and the annotation / result file formats they read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::BoundingBox;

pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_RADIUS: f64 = 20.0;
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;
/// Center-error radii 0..=50 px for the precision curve.
pub const PRECISION_CURVE_POINTS: usize = 51;
/// Normalized-error thresholds 0..=0.5 in steps of 0.01.
pub const NORM_CURVE_POINTS: usize = 51;

/// Per-frame ground truth: top-left `[x, y, w, h]` boxes, `None` when the
/// target is not visible.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceAnnotation {
    pub exist: Vec<u8>,
    pub gt_rect: Vec<Option<[f64; 4]>>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    exist: Vec<u8>,
    gt_rect: Vec<Option<Vec<f64>>>,
}

impl SequenceAnnotation {
    pub fn new(exist: Vec<u8>, gt_rect: Vec<Option<[f64; 4]>>) -> Result<Self> {
        let a = Self { exist, gt_rect };
        a.validate()?;
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.exist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exist.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.exist.len() != self.gt_rect.len() {
            return Err(Error::Precondition(format!(
                "{} exist flags but {} boxes",
                self.exist.len(),
                self.gt_rect.len()
            )));
        }
        for (t, (&e, r)) in self.exist.iter().zip(&self.gt_rect).enumerate() {
            if e > 1 || (e == 1) != r.is_some() {
                return Err(Error::Precondition(format!(
                    "frame {t}: exist={e} inconsistent with box {r:?}"
                )));
            }
        }
        Ok(())
    }

    /// Center-convention ground truth of frame `t`.
    pub fn bbox(&self, t: usize) -> Option<BoundingBox> {
        self.gt_rect[t].map(|[x, y, w, h]| BoundingBox::from_top_left(x, y, w, h))
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawAnnotation {
            exist: self.exist.clone(),
            gt_rect: self.gt_rect.iter().map(|r| r.map(|b| b.to_vec())).collect(),
        };
        Ok(serde_json::to_string(&raw)?)
    }

    /// Parses `{"exist": [...], "gt_rect": [[x,y,w,h] | null | [] ...]}`.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let raw: RawAnnotation =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut rects = Vec::with_capacity(raw.gt_rect.len());
        for (t, r) in raw.gt_rect.into_iter().enumerate() {
            rects.push(match r {
                None => None,
                Some(v) if v.is_empty() => None,
                Some(v) if v.len() == 4 => Some([v[0], v[1], v[2], v[3]]),
                Some(v) => {
                    return Err(Error::format(path, format!("frame {t}: box has {} values", v.len())));
                }
            });
        }
        let a = Self {
            exist: raw.exist,
            gt_rect: rects,
        };
        a.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Tracker output file: top-left boxes and per-frame presence calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub res: Vec<[f64; 4]>,
    pub exist_pred: Vec<u8>,
}

impl TrackResult {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.res
            .iter()
            .map(|&[x, y, w, h]| BoundingBox::from_top_left(x, y, w, h))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if r.res.len() != r.exist_pred.len() {
            return Err(Error::format(path, "res and exist_pred lengths differ"));
        }
        Ok(r)
    }
}

fn is_degenerate(b: &BoundingBox) -> bool {
    !(b.w > 0.0 && b.h > 0.0)
}

/// Intersection over union; a degenerate box scores 0 against a proper one.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if is_degenerate(a) && is_degenerate(b) {
        return Err(Error::Precondition("IoU of two degenerate boxes".into()));
    }
    if is_degenerate(a) || is_degenerate(b) {
        return Ok(0.0);
    }
    let iw = ((a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0)).max(0.0);
    let ih = ((a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0)).max(0.0);
    let inter = iw * ih;
    Ok((inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0))
}

fn check_lengths(n_pred: usize, ann: &SequenceAnnotation) -> Result<()> {
    ann.validate()?;
    if n_pred != ann.len() {
        return Err(Error::Precondition(format!(
            "{n_pred} predictions for {} annotated frames",
            ann.len()
        )));
    }
    Ok(())
}

/// Frames that count toward the localization metrics: visible and, when a
/// filter is given, selected by it (e.g. frames carrying some attribute tag).
fn evaluated(ann: &SequenceAnnotation, filter: Option<&[bool]>) -> Result<Vec<usize>> {
    if let Some(f) = filter {
        if f.len() != ann.len() {
            return Err(Error::Precondition("frame filter length differs from sequence".into()));
        }
    }
    let frames: Vec<usize> = (0..ann.len())
        .filter(|&t| ann.exist[t] == 1 && filter.is_none_or(|f| f[t]))
        .collect();
    if frames.is_empty() {
        return Err(Error::UndefinedMetric("no frame with a visible target".into()));
    }
    Ok(frames)
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_THRESHOLDS).map(|i| i as f64 * 0.05).collect()
}

/// Fraction of evaluated frames with IoU strictly above each threshold.
pub fn success_curve(pred: &[BoundingBox], ann: &SequenceAnnotation, filter: Option<&[bool]>) -> Result<Vec<f64>> {
    check_lengths(pred.len(), ann)?;
    let frames = evaluated(ann, filter)?;
    let ious = frames
        .iter()
        .map(|&t| iou(&pred[t], &ann.bbox(t).expect("visible frame")))
        .collect::<Result<Vec<_>>>()?;
    Ok(success_thresholds()
        .into_iter()
        .map(|tau| ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64)
        .collect())
}

pub fn success_auc(pred: &[BoundingBox], ann: &SequenceAnnotation) -> Result<f64> {
    let c = success_curve(pred, ann, None)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

fn center_errors(pred: &[BoundingBox], ann: &SequenceAnnotation, filter: Option<&[bool]>, normalized: bool) -> Result<Vec<f64>> {
    check_lengths(pred.len(), ann)?;
    let frames = evaluated(ann, filter)?;
    Ok(frames
        .iter()
        .map(|&t| {
            let g = ann.bbox(t).expect("visible frame");
            let (dx, dy) = (pred[t].cx - g.cx, pred[t].cy - g.cy);
            if normalized {
                ((dx / g.w).powi(2) + (dy / g.h).powi(2)).sqrt()
            } else {
                (dx * dx + dy * dy).sqrt()
            }
        })
        .collect())
}

fn fraction_within(errs: &[f64], r: f64) -> f64 {
    errs.iter().filter(|&&e| e <= r).count() as f64 / errs.len() as f64
}

pub fn precision_at(pred: &[BoundingBox], ann: &SequenceAnnotation, radius: f64) -> Result<f64> {
    Ok(fraction_within(&center_errors(pred, ann, None, false)?, radius))
}

pub fn precision_curve(pred: &[BoundingBox], ann: &SequenceAnnotation, filter: Option<&[bool]>) -> Result<Vec<f64>> {
    let e = center_errors(pred, ann, filter, false)?;
    Ok((0..PRECISION_CURVE_POINTS).map(|r| fraction_within(&e, r as f64)).collect())
}

/// Fraction of frames whose size-normalized center error is at most 0.2.
pub fn norm_precision(pred: &[BoundingBox], ann: &SequenceAnnotation) -> Result<f64> {
    Ok(fraction_within(&center_errors(pred, ann, None, true)?, NORM_PRECISION_THRESHOLD))
}

pub fn norm_precision_curve(pred: &[BoundingBox], ann: &SequenceAnnotation, filter: Option<&[bool]>) -> Result<Vec<f64>> {
    let e = center_errors(pred, ann, filter, true)?;
    Ok((0..NORM_CURVE_POINTS).map(|i| fraction_within(&e, i as f64 * 0.01)).collect())
}

/// Mean over all frames of IoU on visible frames and of a correct "absent"
/// call on invisible ones.
pub fn state_accuracy(pred: &[BoundingBox], exist_pred: &[u8], ann: &SequenceAnnotation) -> Result<f64> {
    check_lengths(pred.len(), ann)?;
    if exist_pred.len() != ann.len() {
        return Err(Error::Precondition("exist_pred length differs from sequence".into()));
    }
    if ann.is_empty() {
        return Err(Error::UndefinedMetric("empty sequence".into()));
    }
    let mut total = 0.0;
    for t in 0..ann.len() {
        total += match ann.bbox(t) {
            Some(g) => iou(&pred[t], &g)?,
            None => f64::from(u8::from(exist_pred[t] == 0)),
        };
    }
    Ok(total / ann.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub auc: f64,
    pub p20: f64,
    pub pnorm: f64,
    /// Mean of the normalized-precision curve over thresholds 0..=0.5.
    pub pnorm_curve_mean: f64,
    pub sa: f64,
    pub success_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
}

pub fn evaluate(pred: &[BoundingBox], exist_pred: &[u8], ann: &SequenceAnnotation) -> Result<SequenceMetrics> {
    evaluate_filtered(pred, exist_pred, ann, None)
}

/// Like [`evaluate`], restricting the localization metrics to frames where
/// `filter` is true. State accuracy always covers the whole sequence.
pub fn evaluate_filtered(
    pred: &[BoundingBox],
    exist_pred: &[u8],
    ann: &SequenceAnnotation,
    filter: Option<&[bool]>,
) -> Result<SequenceMetrics> {
    let success = success_curve(pred, ann, filter)?;
    let precision = precision_curve(pred, ann, filter)?;
    let norm = norm_precision_curve(pred, ann, filter)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SequenceMetrics {
        auc: mean(&success),
        p20: precision[PRECISION_RADIUS as usize],
        pnorm: norm[(NORM_PRECISION_THRESHOLD * 100.0).round() as usize],
        pnorm_curve_mean: mean(&norm),
        sa: state_accuracy(pred, exist_pred, ann)?,
        success_curve: success,
        precision_curve: precision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub p20: f64,
    pub pnorm: f64,
    pub pnorm_curve_mean: f64,
    pub sa: f64,
    pub per_sequence: BTreeMap<String, SequenceMetrics>,
}

impl MetricsReport {
    /// Sequence-mean of every metric.
    pub fn from_sequences(per_sequence: BTreeMap<String, SequenceMetrics>) -> Result<Self> {
        if per_sequence.is_empty() {
            return Err(Error::UndefinedMetric("no sequences to evaluate".into()));
        }
        let n = per_sequence.len() as f64;
        let avg = |f: fn(&SequenceMetrics) -> f64| per_sequence.values().map(f).sum::<f64>() / n;
        Ok(Self {
            auc: avg(|m| m.auc),
            p20: avg(|m| m.p20),
            pnorm: avg(|m| m.pnorm),
            pnorm_curve_mean: avg(|m| m.pnorm_curve_mean),
            sa: avg(|m| m.sa),
            per_sequence,
        })
    }

    /// Plot-ready `curve,threshold,value` rows of the sequence-mean curves.
    pub fn curves_csv(&self) -> String {
        let n = self.per_sequence.len() as f64;
        let mut s = String::from("curve,threshold,value\n");
        for (i, tau) in success_thresholds().into_iter().enumerate() {
            let v = self.per_sequence.values().map(|m| m.success_curve[i]).sum::<f64>() / n;
            s.push_str(&format!("success,{tau:.2},{v:.6}\n"));
        }
        for r in 0..PRECISION_CURVE_POINTS {
            let v = self.per_sequence.values().map(|m| m.precision_curve[r]).sum::<f64>() / n;
            s.push_str(&format!("precision,{r},{v:.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tl(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::from_top_left(x, y, w, h)
    }

    fn ann(rects: &[Option<[f64; 4]>]) -> SequenceAnnotation {
        SequenceAnnotation::new(rects.iter().map(|r| u8::from(r.is_some())).collect(), rects.to_vec()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = tl(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &tl(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!((iou(&a, &tl(1.0, 0.0, 2.0, 2.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let flat = tl(0.0, 0.0, 0.0, 2.0);
        assert_eq!(iou(&a, &flat).unwrap(), 0.0);
        assert!(matches!(iou(&flat, &flat), Err(Error::Precondition(_))));
    }

    #[test]
    fn auc_cases() {
        let gt = ann(&[Some([0.0, 0.0, 10.0, 10.0]); 3]);
        let perfect = vec![tl(0.0, 0.0, 10.0, 10.0); 3];
        // success is 1 for every threshold below 1 and 0 at 1 (strict comparison)
        assert!((success_auc(&perfect, &gt).unwrap() - 20.0 / 21.0).abs() < 1e-15);
        let miss = vec![tl(50.0, 50.0, 10.0, 10.0); 3];
        assert_eq!(success_auc(&miss, &gt).unwrap(), 0.0);

        // IoUs 1, 0.5, 0: a box sharing half of a 2:1 overlap gives exactly 0.5
        let gt = ann(&[Some([0.0, 0.0, 4.0, 4.0]); 3]);
        let pred = vec![tl(0.0, 0.0, 4.0, 4.0), tl(0.0, 0.0, 4.0, 2.0), tl(10.0, 10.0, 4.0, 4.0)];
        let ious = [1.0, 0.5, 0.0];
        let mut oracle = 0.0;
        for i in 0..21 {
            let tau = i as f64 * 0.05;
            oracle += ious.iter().filter(|&&v| v > tau).count() as f64 / 3.0;
        }
        oracle /= 21.0;
        assert!((success_auc(&pred, &gt).unwrap() - oracle).abs() < 1e-15);
        let curve = success_curve(&pred, &gt, None).unwrap();
        assert!(curve.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn invisible_frames_excluded_and_undefined() {
        let gt = ann(&[Some([0.0, 0.0, 4.0, 4.0]), None]);
        let pred = vec![tl(0.0, 0.0, 4.0, 4.0), tl(90.0, 90.0, 1.0, 1.0)];
        assert!((success_auc(&pred, &gt).unwrap() - 20.0 / 21.0).abs() < 1e-15);
        let none = ann(&[None, None]);
        assert!(matches!(success_auc(&pred, &none), Err(Error::UndefinedMetric(_))));
        assert!(matches!(state_accuracy(&[], &[], &ann(&[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn precision_cases() {
        let gt = ann(&[Some([0.0, 0.0, 10.0, 10.0]); 2]);
        let same = vec![tl(0.0, 0.0, 10.0, 10.0); 2];
        assert_eq!(precision_at(&same, &gt, 20.0).unwrap(), 1.0);
        assert_eq!(norm_precision(&same, &gt).unwrap(), 1.0);
        let shifted = vec![tl(21.0, 0.0, 10.0, 10.0); 2];
        assert_eq!(precision_at(&shifted, &gt, 20.0).unwrap(), 0.0);

        // four frames: center errors 0, 20, 25, 3·√2 with gt 20×10
        let gt = ann(&[Some([0.0, 0.0, 20.0, 10.0]); 4]);
        let pred = vec![
            tl(0.0, 0.0, 20.0, 10.0),
            tl(20.0, 0.0, 20.0, 10.0),
            tl(15.0, 20.0, 20.0, 10.0),
            tl(3.0, 3.0, 20.0, 10.0),
        ];
        let errs = [0.0, 20.0, 25.0, 18f64.sqrt()];
        let norm = [0.0, 1.0, (0.75f64.powi(2) + 4.0).sqrt(), (0.15f64.powi(2) + 0.09).sqrt()];
        let p = errs.iter().filter(|&&e| e <= 20.0).count() as f64 / 4.0;
        let pn = norm.iter().filter(|&&e| e <= 0.2).count() as f64 / 4.0;
        assert_eq!(precision_at(&pred, &gt, 20.0).unwrap(), p);
        assert_eq!(norm_precision(&pred, &gt).unwrap(), pn);
        assert_eq!((p, pn), (0.75, 0.25));
    }

    #[test]
    fn state_accuracy_cases() {
        let gt = ann(&[Some([0.0, 0.0, 4.0, 4.0]); 2]);
        let pred = vec![tl(0.0, 0.0, 4.0, 4.0); 2];
        assert_eq!(state_accuracy(&pred, &[1, 1], &gt).unwrap(), 1.0);
        let gone = ann(&[None, None]);
        assert_eq!(state_accuracy(&pred, &[0, 0], &gone).unwrap(), 1.0);
        let mixed = ann(&[Some([0.0, 0.0, 4.0, 4.0]), None]);
        let pred = vec![tl(0.0, 0.0, 4.0, 2.0), tl(0.0, 0.0, 4.0, 4.0)];
        assert_eq!(state_accuracy(&pred, &[1, 1], &mixed).unwrap(), 0.25);
    }

    #[test]
    fn linearity_over_frames() {
        let rects: Vec<Option<[f64; 4]>> = (0..6).map(|i| Some([i as f64, 0.0, 8.0, 8.0])).collect();
        let gt = ann(&rects);
        let pred: Vec<BoundingBox> = (0..6).map(|i| tl(2.0 * i as f64, 1.0, 8.0, 8.0)).collect();
        let sa = state_accuracy(&pred, &[1; 6], &gt).unwrap();
        let per: f64 = (0..6).map(|t| iou(&pred[t], &gt.bbox(t).unwrap()).unwrap()).sum::<f64>() / 6.0;
        assert!((sa - per).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn translation_invariance(
            boxes in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 1.0f64..20.0), 4),
            gts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..20.0, 1.0f64..20.0), 4),
            dx in -100.0f64..100.0, dy in -100.0f64..100.0,
        ) {
            let rects: Vec<Option<[f64; 4]>> = gts.iter().map(|&(x, y, w, h)| Some([x, y, w, h])).collect();
            let moved: Vec<Option<[f64; 4]>> = gts.iter().map(|&(x, y, w, h)| Some([x + dx, y + dy, w, h])).collect();
            let pred: Vec<BoundingBox> = boxes.iter().map(|&(x, y, w, h)| tl(x, y, w, h)).collect();
            let pred2: Vec<BoundingBox> = boxes.iter().map(|&(x, y, w, h)| tl(x + dx, y + dy, w, h)).collect();
            let a = evaluate(&pred, &[1; 4], &ann(&rects)).unwrap();
            let b = evaluate(&pred2, &[1; 4], &ann(&moved)).unwrap();
            prop_assert!((a.auc - b.auc).abs() < 1e-9);
            prop_assert!((a.sa - b.sa).abs() < 1e-9);
            prop_assert!((a.pnorm - b.pnorm).abs() < 1e-9);
            for m in [a.auc, a.p20, a.pnorm, a.sa] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            prop_assert!(a.success_curve.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn annotation_json_forms() {
        let p = Path::new("ann.json");
        let a = SequenceAnnotation::from_json(r#"{"exist":[1,0,0],"gt_rect":[[1,2,3,4],[],null]}"#, p).unwrap();
        assert_eq!(a.gt_rect, vec![Some([1.0, 2.0, 3.0, 4.0]), None, None]);
        let back = SequenceAnnotation::from_json(&a.to_json().unwrap(), p).unwrap();
        assert_eq!(back, a);
        assert!(matches!(
            SequenceAnnotation::from_json(r#"{"exist":[1],"gt_rect":[null]}"#, p),
            Err(Error::Format { .. })
        ));
        assert!(SequenceAnnotation::from_json(r#"{"exist":[1],"gt_rect":[[1,2]]}"#, p).is_err());
    }

    #[test]
    fn filter_hook_and_report() {
        let gt = ann(&[Some([0.0, 0.0, 4.0, 4.0]); 2]);
        let pred = vec![tl(0.0, 0.0, 4.0, 4.0), tl(40.0, 0.0, 4.0, 4.0)];
        let only_first = evaluate_filtered(&pred, &[1, 1], &gt, Some(&[true, false])).unwrap();
        assert_eq!(only_first.p20, 1.0);
        let all = evaluate(&pred, &[1, 1], &gt).unwrap();
        assert_eq!(all.p20, 0.5);
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), only_first);
        m.insert("a".to_string(), all);
        let r = MetricsReport::from_sequences(m).unwrap();
        assert_eq!(r.p20, 0.75);
        let csv = r.curves_csv();
        assert!(csv.starts_with("curve,threshold,value\nsuccess,0.00,"));
        assert_eq!(csv.lines().count(), 1 + 21 + 51);
    }
}
