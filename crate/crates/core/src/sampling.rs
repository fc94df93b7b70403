//! Crop-and-resize geometry: crop side from a search factor, region extraction
//! with zero padding, crop/image coordinate transforms and the Hann window.

use num_bigint::BigUint;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Axis-aligned box in center form, in image or crop pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// `[x, y, w, h]` with `(x, y)` the top-left corner.
    pub fn to_top_left(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Precondition(format!("invalid box {self:?}")))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Geometric mean of the sides, `√(w·h)`.
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }
}

/// Integer mantissa and power-of-two exponent of a finite positive float.
fn decompose(v: f64) -> (BigUint, i64) {
    let (mant, exp, _) = v.integer_decode();
    (BigUint::from(mant), exp as i64)
}

/// Exact test of `n² ≥ f²·w·h` for positive finite inputs.
fn square_covers(n: u64, f: f64, w: f64, h: f64) -> bool {
    let (mf, ef) = decompose(f);
    let (mw, ew) = decompose(w);
    let (mh, eh) = decompose(h);
    let mut rhs = &mf * &mf * mw * mh;
    let mut lhs = BigUint::from(n) * BigUint::from(n);
    let e = 2 * ef + ew + eh;
    if e >= 0 {
        rhs <<= e as u64;
    } else {
        lhs <<= (-e) as u64;
    }
    lhs >= rhs
}

/// Crop side `⌈factor · √(w·h)⌉`, exact for every finite input.
pub fn crop_side(bbox: &BoundingBox, factor: f64) -> Result<u64> {
    bbox.validate()?;
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Precondition(format!("search factor must be > 0, got {factor}")));
    }
    let x = factor * (bbox.w * bbox.h).sqrt();
    if x > (1u64 << 52) as f64 {
        return Err(Error::Precondition(format!("crop side {x} is out of range")));
    }
    let n = x.round();
    let side = if (x - n).abs() <= 1e-9 * x.max(1.0) && n >= 1.0 {
        // floating-point rounding can land on either side of an integer here
        if square_covers(n as u64, factor, bbox.w, bbox.h) {
            n as u64
        } else {
            n as u64 + 1
        }
    } else {
        x.ceil() as u64
    };
    Ok(side.max(1))
}

/// Maps between image pixels and the resized crop.
#[derive(Debug, Clone, PartialEq)]
pub struct CropTransform {
    /// Center of the source window in image pixels.
    pub center: (f64, f64),
    /// Side of the source window in image pixels.
    pub side: u64,
    pub out_side: usize,
    /// `out_side / side`.
    pub scale: f64,
    /// Row-major `out_side²` flags, true where the sample came from inside the image.
    pub pad_mask: Vec<bool>,
}

impl CropTransform {
    pub fn new(center: (f64, f64), side: u64, out_side: usize) -> Result<Self> {
        if side == 0 || out_side == 0 {
            return Err(Error::Parameter("crop and output sides must be >= 1".into()));
        }
        Ok(Self {
            center,
            side,
            out_side,
            scale: out_side as f64 / side as f64,
            pad_mask: vec![true; out_side * out_side],
        })
    }

    /// Top-left corner of the source window in image pixels.
    pub fn origin(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.center.0 - half, self.center.1 - half)
    }

    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        let (x0, y0) = self.origin();
        BoundingBox::new(
            (b.cx - x0) * self.scale,
            (b.cy - y0) * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn from_crop(&self, b: &BoundingBox) -> BoundingBox {
        let (x0, y0) = self.origin();
        BoundingBox::new(
            b.cx / self.scale + x0,
            b.cy / self.scale + y0,
            b.w / self.scale,
            b.h / self.scale,
        )
    }

    /// Fraction of output pixels that came from the image.
    pub fn valid_fraction(&self) -> f64 {
        self.pad_mask.iter().filter(|&&v| v).count() as f64 / self.pad_mask.len() as f64
    }
}

/// Absent boxes pass through unchanged.
pub fn to_crop(b: Option<&BoundingBox>, t: &CropTransform) -> Option<BoundingBox> {
    b.map(|b| t.to_crop(b))
}

pub fn from_crop(b: Option<&BoundingBox>, t: &CropTransform) -> Option<BoundingBox> {
    b.map(|b| t.from_crop(b))
}

/// Interpolation taps along one axis: `(i0, i1, w1, inside)`; the sample is
/// `(1 − w1)·src[i0] + w1·src[i1]`.
fn axis_taps(origin: f64, scale: f64, out: usize, len: usize) -> Vec<(usize, usize, f64, bool)> {
    (0..out)
        .map(|d| {
            // source pixel-index coordinate, pixel i centered at i + 0.5
            let u = origin + (d as f64 + 0.5) / scale - 0.5;
            let inside = u >= -0.5 && u < len as f64 - 0.5;
            let u = u.clamp(0.0, (len - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, u - i0 as f64, inside)
        })
        .collect()
}

/// Extracts a `side`-pixel square window centered at `center` from a
/// `[ch × H × W]` (or `[H × W]`) frame, zero-padding outside the frame, and
/// resizes it bilinearly to `out_side`.
pub fn extract_region<T: Real>(
    frame: &Tensor<T>,
    center: (f64, f64),
    side: u64,
    out_side: usize,
) -> Result<(Tensor<T>, CropTransform)> {
    let (ch, h, w) = match frame.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("frame must be [H×W] or [ch×H×W], got {s:?}"))),
    };
    let mut t = CropTransform::new(center, side, out_side)?;
    let (x0, y0) = t.origin();
    let xs = axis_taps(x0, t.scale, out_side, w);
    let ys = axis_taps(y0, t.scale, out_side, h);
    let src = frame.data();
    let mut out = vec![T::zero(); ch * out_side * out_side];
    for (oy, &(y_0, y_1, wy, yin)) in ys.iter().enumerate() {
        for (ox, &(x_0, x_1, wx, xin)) in xs.iter().enumerate() {
            let inside = yin && xin;
            t.pad_mask[oy * out_side + ox] = inside;
            if !inside {
                continue;
            }
            let (wx, wy) = (T::lit(wx), T::lit(wy));
            for c in 0..ch {
                let plane = &src[c * h * w..(c + 1) * h * w];
                let top = plane[y_0 * w + x_0] * (T::one() - wx) + plane[y_0 * w + x_1] * wx;
                let bot = plane[y_1 * w + x_0] * (T::one() - wx) + plane[y_1 * w + x_1] * wx;
                out[c * out_side * out_side + oy * out_side + ox] = top * (T::one() - wy) + bot * wy;
            }
        }
    }
    let shape = if frame.rank() == 2 {
        vec![out_side, out_side]
    } else {
        vec![ch, out_side, out_side]
    };
    Ok((Tensor::new(shape, out)?, t))
}

/// `[out × in]` matrix of half-pixel bilinear weights, so resizing a vector is a matmul.
pub fn bilinear_matrix<T: Real>(in_len: usize, out_len: usize) -> Tensor<T> {
    let scale = out_len as f64 / in_len as f64;
    let mut m = Tensor::zeros(&[out_len, in_len]);
    for (d, (i0, i1, w1, _)) in axis_taps(0.0, scale, out_len, in_len).into_iter().enumerate() {
        m.data_mut()[d * in_len + i0] += T::lit(1.0 - w1);
        m.data_mut()[d * in_len + i1] += T::lit(w1);
    }
    m
}

/// Bilinear resize of an `[H × W]` map with the same half-pixel convention as
/// [`extract_region`], edge-clamped.
pub fn bilinear_resize<T: Real>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w) = map.dims2()?;
    let ry = bilinear_matrix::<T>(h, out_h);
    let rx_t = bilinear_matrix::<T>(w, out_w).transpose2()?;
    crate::tensor::matmul(&crate::tensor::matmul(&ry, map)?, &rx_t)
}

/// Outer product of two symmetric Hann windows; `n = 1` gives `[[1]]`.
pub fn hanning2d<T: Real>(n: usize) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Parameter("hanning window size must be >= 1".into()));
    }
    let w: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect()
    };
    Ok(Tensor::from_fn(&[n, n], |i| {
        T::lit((w[i / n] * w[i % n]).clamp(0.0, 1.0))
    }))
}

/// Binary rectangle mask on a `side × side` raster of `cell`-pixel cells: a
/// cell is set when the box covers at least half of its area.
pub fn rect_mask<T: Real>(b: Option<&BoundingBox>, side: usize, cell: f64) -> Tensor<T> {
    let mut m = Tensor::zeros(&[side, side]);
    let Some(b) = b else {
        return m;
    };
    let [x, y, w, h] = b.to_top_left();
    let cover = |lo: f64, len: f64, i: usize| {
        let a = i as f64 * cell;
        ((lo + len).min(a + cell) - lo.max(a)).max(0.0) / cell
    };
    for r in 0..side {
        let cy = cover(y, h, r);
        if cy == 0.0 {
            continue;
        }
        for c in 0..side {
            if cy * cover(x, w, c) >= 0.5 {
                m.data_mut()[r * side + c] = T::one();
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(10.0, 10.0, w, h)
    }

    #[test]
    fn crop_side_examples() {
        assert_eq!(crop_side(&bb(64.0, 64.0), 2.0).unwrap(), 128);
        assert_eq!(crop_side(&bb(32.0, 18.0), 6.0).unwrap(), 144);
        assert_eq!(crop_side(&bb(3.0, 5.0), 4.0).unwrap(), 16);
        assert!(crop_side(&bb(0.0, 5.0), 4.0).is_err());
        assert!(crop_side(&bb(3.0, 5.0), 0.0).is_err());
        assert_eq!(crop_side(&bb(0.01, 0.01), 1.0).unwrap(), 1);
    }

    #[test]
    fn crop_side_exact_on_awkward_products() {
        // 0.1 * 30 rounds above 3 in binary floating point; the exact test settles it
        let s = crop_side(&bb(0.09, 100.0), 1.0).unwrap();
        assert_eq!(s, 3 + u64::from(!square_covers(3, 1.0, 0.09, 100.0)));
        assert_eq!(crop_side(&bb(49.0, 1.0), 1.0).unwrap(), 7);
    }

    proptest! {
        #[test]
        fn crop_side_monotone(w in 1.0f64..200.0, h in 1.0f64..200.0, f1 in 0.5f64..10.0, df in 0.0f64..3.0) {
            let b = bb(w, h);
            prop_assert!(crop_side(&b, f1).unwrap() <= crop_side(&b, f1 + df).unwrap());
            let bigger = bb(w * 1.5, h);
            prop_assert!(crop_side(&b, f1).unwrap() <= crop_side(&bigger, f1).unwrap());
        }

        #[test]
        fn crop_transform_round_trip(cx in -50.0f64..300.0, cy in -50.0f64..300.0, w in 0.5f64..80.0, h in 0.5f64..80.0,
                                     side in 1u64..400, out in 1usize..300) {
            let t = CropTransform::new((120.0, 80.0), side, out).unwrap();
            let b = BoundingBox::new(cx, cy, w, h);
            let r = t.from_crop(&t.to_crop(&b));
            for (a, e) in r.to_array().iter().zip(b.to_array()) {
                prop_assert!((a - e).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn crop_center_maps_to_patch_center() {
        let t = CropTransform::new((40.0, 30.0), 48, 64).unwrap();
        let b = t.to_crop(&BoundingBox::new(40.0, 30.0, 6.0, 3.0));
        assert!((b.cx - 32.0).abs() < 1e-12 && (b.cy - 32.0).abs() < 1e-12);
        assert!((b.w / b.h - 2.0).abs() < 1e-12);
        let unit = CropTransform::new((40.0, 30.0), 64, 64).unwrap();
        let b = unit.to_crop(&BoundingBox::new(50.0, 35.0, 4.0, 4.0));
        assert_eq!(b, BoundingBox::new(42.0, 37.0, 4.0, 4.0));
        assert_eq!(to_crop(None, &unit), None);
    }

    fn ramp(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |i| i as f64)
    }

    #[test]
    fn identity_crop() {
        let f = ramp(16);
        let (p, t) = extract_region(&f, (8.0, 8.0), 16, 16).unwrap();
        assert_eq!(p, f);
        assert!(t.pad_mask.iter().all(|&v| v));
        let back = t.from_crop(&BoundingBox::new(8.0, 8.0, 16.0, 16.0));
        assert!((back.cx - 8.0).abs() < 0.5 && (back.cy - 8.0).abs() < 0.5);
    }

    #[test]
    fn corner_crop_pads() {
        let f = ramp(16);
        let (p, t) = extract_region(&f, (0.0, 0.0), 16, 16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = r >= 8 && c >= 8;
                assert_eq!(t.pad_mask[r * 16 + c], inside);
                if inside {
                    assert_eq!(p.at2(r, c), f.at2(r - 8, c - 8));
                } else {
                    assert_eq!(p.at2(r, c), 0.0);
                }
            }
        }
        assert_eq!(t.valid_fraction(), 0.25);
    }

    #[test]
    fn far_outside_is_all_padding() {
        let f = ramp(8);
        let (p, t) = extract_region(&f, (-100.0, 500.0), 10, 5).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(t.pad_mask.iter().all(|&v| !v));
    }

    #[test]
    fn constant_frame_gives_constant_patch() {
        let f = Tensor::full(&[3, 40, 30], 0.625f64);
        for (c, side, out) in [((15.0, 20.0), 20, 64), ((12.3, 17.9), 7, 32), ((15.0, 20.0), 29, 29)] {
            let (p, _) = extract_region(&f, c, side, out).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.625).abs() < 1e-12));
        }
    }

    #[test]
    fn hanning_cases() {
        assert_eq!(hanning2d::<f64>(1).unwrap().data(), &[1.0]);
        let h3 = hanning2d::<f64>(3).unwrap();
        assert!((h3.at2(1, 1) - 1.0).abs() < 1e-15);
        for (r, c) in [(0, 0), (0, 1), (2, 1), (1, 2)] {
            assert!(h3.at2(r, c).abs() < 1e-15);
        }
        let h = hanning2d::<f64>(16).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert!((h.at2(r, c) - h.at2(15 - r, c)).abs() < 1e-15);
                assert!((h.at2(r, c) - h.at2(r, 15 - c)).abs() < 1e-15);
                assert!((0.0..=1.0).contains(&h.at2(r, c)));
            }
        }
        assert!(hanning2d::<f64>(0).is_err());
    }

    #[test]
    fn bilinear_resize_cases() {
        let c = Tensor::full(&[3, 3], 0.3f64);
        assert!(bilinear_resize(&c, 7, 7).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let r = ramp(5);
        assert!(bilinear_resize(&r, 5, 5).unwrap().max_abs_diff(&r).unwrap() < 1e-12);
        // 2x2 checkerboard to 4x4: per-axis taps are [1,0], [.75,.25], [.25,.75], [0,1]
        let cb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let up = bilinear_resize(&cb, 4, 4).unwrap();
        let taps = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for i in 0..4 {
            for j in 0..4 {
                let e = taps[i][0] * taps[j][0] + taps[i][1] * taps[j][1];
                assert!((up.at2(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rect_mask_coverage() {
        let b = BoundingBox::from_top_left(2.0, 1.0, 3.0, 2.0);
        let m: Tensor<f64> = rect_mask(Some(&b), 8, 1.0);
        assert_eq!(m.sum(), 6.0);
        assert_eq!(m.at2(1, 2), 1.0);
        assert_eq!(m.at2(2, 4), 1.0);
        assert_eq!(m.at2(3, 4), 0.0);
        let half = BoundingBox::from_top_left(0.5, 0.0, 1.0, 1.0);
        assert_eq!(rect_mask::<f64>(Some(&half), 4, 1.0).sum(), 2.0);
        assert_eq!(rect_mask::<f64>(None, 4, 1.0).sum(), 0.0);
    }
}
