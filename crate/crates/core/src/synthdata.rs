//! Synthetic thermal-like sequences: a small bright blob drifting over smooth
//! clutter, with scripted camera jumps and occlusions. Also PNG sequence I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SequenceAnnotation;
use crate::sampling::BoundingBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub frame: usize,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub frame_side: usize,
    pub frames: usize,
    /// Target width/height range in pixels; the size is drawn once per sequence.
    pub target_size: [f64; 2],
    /// Per-axis std of the target's per-frame random walk (pixels).
    pub motion_std: f64,
    /// Whole-scene shifts applied at the start of the given frames.
    pub jumps: Vec<Jump>,
    /// Clutter lattice cells per 100 px (spatial frequency).
    pub clutter_density: f64,
    pub clutter_intensity: f64,
    pub noise_std: f64,
    pub background: f64,
    /// Peak blob brightness above the background.
    pub target_intensity: f64,
    /// Half-open frame ranges `[start, end)` in which the target is hidden.
    pub occlusions: Vec<[usize; 2]>,
    /// Initial target center; `None` places it at the frame center.
    pub start: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frame_side: 160,
            frames: 40,
            target_size: [6.0, 10.0],
            motion_std: 1.0,
            jumps: Vec::new(),
            clutter_density: 5.0,
            clutter_intensity: 0.3,
            noise_std: 0.02,
            background: 0.15,
            target_intensity: 0.6,
            occlusions: Vec::new(),
            start: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_side < 8 || self.frames == 0 {
            return Err(Error::Config("synth: frame_side >= 8 and frames >= 1 required".into()));
        }
        if !(self.target_size[0] >= 2.0 && self.target_size[0] <= self.target_size[1]) {
            return Err(Error::Config(format!("synth: bad target size range {:?}", self.target_size)));
        }
        if let Some(j) = self.jumps.iter().find(|j| j.frame == 0 || j.frame >= self.frames) {
            return Err(Error::Config(format!("synth: jump at frame {} outside 1..{}", j.frame, self.frames)));
        }
        if self.occlusions.iter().any(|o| o[0] == 0 || o[0] >= o[1]) {
            return Err(Error::Config("synth: occlusions must be non-empty and start after frame 0".into()));
        }
        if self.motion_std < 0.0 || self.noise_std < 0.0 || self.clutter_density < 0.0 {
            return Err(Error::Config("synth: negative std or density".into()));
        }
        Ok(())
    }
}

/// Whether a jump of `d` pixels carries a `w×h` target out of a view of factor `f`.
pub fn exits_view(d: f64, f: f64, w: f64, h: f64) -> bool {
    d > f * (w * h).sqrt() / 2.0
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    /// `[ch × H × W]` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub ann: SequenceAnnotation,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]` over unbounded world coordinates.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = hash2(seed, ix, iy) * (1.0 - sx) + hash2(seed, ix + 1, iy) * sx;
    let bot = hash2(seed, ix, iy + 1) * (1.0 - sx) + hash2(seed, ix + 1, iy + 1) * sx;
    top * (1.0 - sy) + bot * sy
}

fn clutter(spec: &SynthSpec, wx: f64, wy: f64) -> f64 {
    if spec.clutter_intensity == 0.0 || spec.clutter_density == 0.0 {
        return 0.0;
    }
    let f = spec.clutter_density / 100.0;
    let a = value_noise(spec.seed ^ 0xA5A5, wx * f, wy * f);
    let b = value_noise(spec.seed ^ 0x5A5A, wx * f * 2.7, wy * f * 2.7);
    // sharpen the sum so clutter forms distinct warm patches
    let v = ((0.65 * a + 0.35 * b - 0.5) * 3.0).clamp(-1.0, 1.0);
    spec.clutter_intensity * 0.5 * (v + 1.0)
}

/// Renders the sequence described by `spec`. The scene lives in world
/// coordinates; a jump shifts the camera so everything moves by `(dx, dy)`.
pub fn generate(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let side = spec.frame_side as f64;
    let w = rng.random_range(spec.target_size[0]..=spec.target_size[1]);
    let h = rng.random_range(spec.target_size[0]..=spec.target_size[1]);
    let [mut cx, mut cy] = spec.start.unwrap_or([side / 2.0, side / 2.0]);
    let (mut shift_x, mut shift_y) = (0.0, 0.0);
    let margin = (w.max(h) / 2.0 + 2.0).min(side / 2.0);
    let n = spec.frame_side;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut exist = Vec::with_capacity(spec.frames);
    let mut rects = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for j in spec.jumps.iter().filter(|j| j.frame == t) {
                shift_x += j.dx;
                shift_y += j.dy;
                cx += j.dx;
                cy += j.dy;
            }
            if spec.motion_std > 0.0 {
                let sx: f64 = rng.sample(StandardNormal);
                let sy: f64 = rng.sample(StandardNormal);
                // reflect at the borders so the target stays inside the frame
                let reflect = |v: f64| {
                    if v < margin {
                        2.0 * margin - v
                    } else if v > side - margin {
                        2.0 * (side - margin) - v
                    } else {
                        v
                    }
                };
                cx = reflect(cx + spec.motion_std * sx).clamp(margin, side - margin);
                cy = reflect(cy + spec.motion_std * sy).clamp(margin, side - margin);
            }
        }
        let visible = !spec.occlusions.iter().any(|o| (o[0]..o[1]).contains(&t));
        let (sx, sy) = (w / 4.0, h / 4.0);
        let mut data = vec![0f32; n * n];
        for (i, px) in data.iter_mut().enumerate() {
            let (u, v) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            let mut val = spec.background + clutter(spec, u - shift_x, v - shift_y);
            if visible {
                let (du, dv) = ((u - cx) / sx, (v - cy) / sy);
                let d2 = du * du + dv * dv;
                if d2 < 40.0 {
                    val += spec.target_intensity * (-0.5 * d2).exp();
                }
            }
            if spec.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                val += spec.noise_std * z;
            }
            *px = val.clamp(0.0, 1.0) as f32;
        }
        frames.push(Tensor::new(vec![1, n, n], data)?);
        exist.push(u8::from(visible));
        rects.push(visible.then(|| BoundingBox::new(cx, cy, w, h).to_top_left()));
    }
    Ok(Sequence {
        name: format!("synth_{:04}", spec.seed),
        frames,
        ann: SequenceAnnotation::new(exist, rects)?,
    })
}

/// Writes `000001.png ...`, `annotation.json` and (if given) `spec.json`.
pub fn save_sequence(seq: &Sequence, spec: Option<&SynthSpec>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let (h, w) = match f.shape() {
            [h, w] | [_, h, w] => (*h, *w),
            s => return Err(Error::dim(format!("frame shape {s:?}"))),
        };
        let px: Vec<u8> = f.data()[..h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = dir.join(format!("{:06}.png", i + 1));
        image::GrayImage::from_raw(w as u32, h as u32, px)
            .expect("sized buffer")
            .save(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    let ann = dir.join("annotation.json");
    fs::write(&ann, seq.ann.to_json()?).map_err(|e| Error::io(&ann, e))?;
    if let Some(s) = spec {
        let p = dir.join("spec.json");
        fs::write(&p, serde_json::to_string_pretty(s)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn frame_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Ok(k) = stem.parse::<u64>() {
            files.push((k, p));
        }
    }
    files.sort();
    Ok(files)
}

/// Loads numbered 8/16-bit grayscale PNG frames plus `annotation.json`,
/// normalizing to `[0, 1]` and replicating to `channels` channels.
pub fn load_sequence(dir: &Path, channels: usize) -> Result<Sequence> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::format(dir, "no numbered PNG frames"));
    }
    let first = files[0].0;
    let mut frames = Vec::with_capacity(files.len());
    for (i, (k, path)) in files.iter().enumerate() {
        if *k != first + i as u64 {
            return Err(Error::format(path, format!("expected frame number {}", first + i as u64)));
        }
        let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane: Vec<f32> = match img {
            image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            other => other.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        };
        if let Some(prev) = frames.first().map(|f: &Tensor<f32>| f.shape().to_vec()) {
            if prev[1..] != [h, w] {
                return Err(Error::format(path, format!("frame is {h}×{w}, earlier frames {}×{}", prev[1], prev[2])));
            }
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels.max(1) {
            data.extend_from_slice(&plane);
        }
        frames.push(Tensor::new(vec![channels.max(1), h, w], data)?);
    }
    let ann_path = dir.join("annotation.json");
    let ann = SequenceAnnotation::load(&ann_path)?;
    if ann.len() != frames.len() {
        return Err(Error::format(
            &ann_path,
            format!("{} annotated frames but {} images", ann.len(), frames.len()),
        ));
    }
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(Sequence { name, frames, ann })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> SynthSpec {
        SynthSpec {
            frame_side: 64,
            frames: 6,
            motion_std: 0.0,
            clutter_intensity: 0.0,
            noise_std: 0.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let s = SynthSpec {
            frames: 5,
            seed: 42,
            ..Default::default()
        };
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.ann, b.ann);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x, y);
        }
        let c = generate(&SynthSpec { seed: 43, ..s }).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn jump_bookkeeping() {
        let s = SynthSpec {
            frame_side: 200,
            frames: 8,
            jumps: vec![Jump {
                frame: 4,
                dx: 40.0,
                dy: 0.0,
            }],
            start: Some([80.0, 100.0]),
            ..quiet(3)
        };
        let q = generate(&s).unwrap();
        let (a, b) = (q.ann.bbox(3).unwrap(), q.ann.bbox(4).unwrap());
        assert_eq!(b.cx - a.cx, 40.0);
        assert_eq!(b.cy, a.cy);
    }

    #[test]
    fn clutter_moves_with_camera() {
        let s = SynthSpec {
            frame_side: 64,
            frames: 3,
            clutter_intensity: 0.4,
            jumps: vec![Jump {
                frame: 2,
                dx: 5.0,
                dy: 3.0,
            }],
            occlusions: vec![[1, 3]],
            ..quiet(8)
        };
        let q = generate(&s).unwrap();
        let (a, b) = (&q.frames[1], &q.frames[2]);
        for v in 10..50 {
            for u in 10..50 {
                assert!((b.data()[(v + 3) * 64 + u + 5] - a.data()[v * 64 + u]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quiet_frame_peaks_at_target() {
        let q = generate(&quiet(5)).unwrap();
        let b = q.ann.bbox(0).unwrap();
        let (idx, _) = q.frames[0].argmax();
        let (u, v) = ((idx % 64) as f64 + 0.5, (idx / 64) as f64 + 0.5);
        assert!((u - b.cx).abs() <= 0.5 && (v - b.cy).abs() <= 0.5);
    }

    #[test]
    fn boxes_are_tight() {
        for seed in 0..5 {
            let s = SynthSpec {
                frame_side: 96,
                frames: 4,
                motion_std: 2.0,
                ..quiet(seed)
            };
            let q = generate(&s).unwrap();
            for t in 0..4 {
                let f = &q.frames[t];
                let b = q.ann.bbox(t).unwrap();
                let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
                for (i, &v) in f.data().iter().enumerate() {
                    let v = v as f64 - s.background;
                    m += v;
                    mx += v * ((i % 96) as f64 + 0.5);
                    my += v * ((i / 96) as f64 + 0.5);
                }
                assert!((mx / m - b.cx).abs() < 0.5 && (my / m - b.cy).abs() < 0.5);
            }
        }
    }

    #[test]
    fn occlusion_hides_target() {
        let s = SynthSpec {
            occlusions: vec![[2, 4]],
            ..quiet(1)
        };
        let q = generate(&s).unwrap();
        assert_eq!(q.ann.exist, vec![1, 1, 0, 0, 1, 1]);
        assert!(q.ann.gt_rect[2].is_none());
        assert!(q.frames[2].data().iter().all(|&v| (v - 0.15).abs() < 1e-6));
    }

    #[test]
    fn view_bound() {
        // 8×8 target, factor 6: half-view 24 px; factor 8: 32 px
        assert!(!exits_view(24.0, 6.0, 8.0, 8.0));
        assert!(exits_view(24.5, 6.0, 8.0, 8.0));
        assert!(!exits_view(28.0, 8.0, 8.0, 8.0));
    }

    #[test]
    fn invalid_specs() {
        let bad = SynthSpec {
            target_size: [1.0, 3.0],
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthSpec {
            jumps: vec![Jump {
                frame: 99,
                dx: 1.0,
                dy: 0.0,
            }],
            ..Default::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            frame_side: 48,
            frames: 3,
            occlusions: vec![[1, 2]],
            seed: 11,
            ..Default::default()
        };
        let q = generate(&spec).unwrap();
        save_sequence(&q, Some(&spec), dir.path()).unwrap();
        assert!(dir.path().join("000001.png").exists());
        let back = load_sequence(dir.path(), 3).unwrap();
        assert_eq!(back.ann, q.ann);
        assert_eq!(back.frames[0].shape(), &[3, 48, 48]);
        for (a, b) in q.frames.iter().zip(&back.frames) {
            for (i, &v) in a.data().iter().enumerate() {
                assert!((v - b.data()[i]).abs() <= 0.5 / 255.0 + 1e-6);
                assert_eq!(b.data()[i], b.data()[i + 2 * 48 * 48]);
            }
        }
        let saved: SynthSpec = serde_json::from_str(&fs::read_to_string(dir.path().join("spec.json")).unwrap()).unwrap();
        assert_eq!(saved, spec);
    }

    #[test]
    fn load_errors_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(dir.path(), 1), Err(Error::Format { .. })));

        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        img.save(dir.path().join("1.png")).unwrap();
        fs::write(dir.path().join("annotation.json"), r#"{"exist":[1],"gt_rect":[[0,0,1,1]]}"#).unwrap();
        let s = load_sequence(dir.path(), 1).unwrap();
        assert_eq!(s.frames[0].data(), &[0.0, 1.0]);

        img.save(dir.path().join("3.png")).unwrap();
        match load_sequence(dir.path(), 1) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with("3.png")),
            other => panic!("{other:?}"),
        }
        fs::remove_file(dir.path().join("3.png")).unwrap();
        img.save(dir.path().join("2.png")).unwrap();
        assert!(matches!(load_sequence(dir.path(), 1), Err(Error::Format { .. })));
    }
}
