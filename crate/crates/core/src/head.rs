//! Center-based box head: score, offset and size maps, and peak decoding.

use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::encoder::linear_node;
use crate::error::{Error, Result};
use crate::sampling::BoundingBox;
use crate::tensor::{Real, Tensor};

pub const BRANCHES: [(&str, usize); 3] = [("score", 1), ("offset", 2), ("size", 2)];
pub const CONV_STAGES: usize = 3;

/// Head maps. `score` is `[G×G]`; `offset` and `size` are `[2×G×G]` with
/// channel 0 along x (columns) and channel 1 along y (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    pub score: Tensor<T>,
    pub offset: Tensor<T>,
    pub size: Tensor<T>,
}

impl<T: Real> HeadOutput<T> {
    pub fn grid(&self) -> usize {
        self.score.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let g = self.grid();
        if self.score.shape() != [g, g] || self.offset.shape() != [2, g, g] || self.size.shape() != [2, g, g] {
            return Err(Error::dim(format!(
                "head maps score {:?} offset {:?} size {:?}",
                self.score.shape(),
                self.offset.shape(),
                self.size.shape()
            )));
        }
        Ok(())
    }
}

/// Channel widths of the conv stack: `first, first/2, first/4`.
pub fn stage_widths(first: usize) -> [usize; CONV_STAGES] {
    [first, (first / 2).max(1), (first / 4).max(1)]
}

pub fn param_shapes(c: usize, first: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for (branch, out) in BRANCHES {
        let mut cin = c;
        for (i, w) in stage_widths(first).into_iter().enumerate() {
            v.push((format!("head.{branch}.conv{}.w", i + 1), vec![9 * cin, w]));
            v.push((format!("head.{branch}.conv{}.b", i + 1), vec![w]));
            cin = w;
        }
        v.push((format!("head.{branch}.out.w"), vec![cin, out]));
        v.push((format!("head.{branch}.out.b"), vec![out]));
    }
    v
}

/// Graph handles of the head, channels-last: score `[G²×1]`, offset/size `[G²×2]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub score: NodeId,
    pub offset: NodeId,
    pub size: NodeId,
}

/// Runs the three branches on channels-last search tokens `[G² × C]`.
pub fn head_nodes<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, search: NodeId, grid: usize) -> Result<HeadNodes> {
    let (n, _) = g.value(search).dims2()?;
    if n != grid * grid {
        return Err(Error::dim(format!("head input has {n} tokens, expected {grid}²")));
    }
    let mut outs = Vec::with_capacity(3);
    for (branch, _) in BRANCHES {
        let mut x = search;
        for i in 1..=CONV_STAGES {
            let cols = g.im2col3x3(x, grid)?;
            let y = linear_node(g, tape, cols, &format!("head.{branch}.conv{i}"))?;
            x = g.relu(y)?;
        }
        let y = linear_node(g, tape, x, &format!("head.{branch}.out"))?;
        outs.push(g.sigmoid(y)?);
    }
    Ok(HeadNodes {
        score: outs[0],
        offset: outs[1],
        size: outs[2],
    })
}

/// `[G²×ch]` channels-last to `[ch×G×G]`.
pub(crate) fn to_planar<T: Real>(t: &Tensor<T>, grid: usize) -> Result<Tensor<T>> {
    let (n, ch) = t.dims2()?;
    let mut out = vec![T::zero(); n * ch];
    for i in 0..n {
        for c in 0..ch {
            out[c * n + i] = t.data()[i * ch + c];
        }
    }
    if ch == 1 {
        Tensor::new(vec![grid, grid], out)
    } else {
        Tensor::new(vec![ch, grid, grid], out)
    }
}

pub(crate) fn collect<T: Real>(g: &Graph<T>, n: &HeadNodes, grid: usize) -> Result<HeadOutput<T>> {
    Ok(HeadOutput {
        score: to_planar(g.value(n.score), grid)?,
        offset: to_planar(g.value(n.offset), grid)?,
        size: to_planar(g.value(n.size), grid)?,
    })
}

/// Forward pass on a search feature map `[C×G×G]`.
pub fn head_forward<T: Real>(tape: &GradientTape<T>, search_map: &Tensor<T>) -> Result<HeadOutput<T>> {
    let (c, grid) = match search_map.shape() {
        [c, h, w] if h == w => (*c, *h),
        s => return Err(Error::dim(format!("search map must be [C×G×G], got {s:?}"))),
    };
    let n = grid * grid;
    let mut tokens = vec![T::zero(); n * c];
    for ch in 0..c {
        for i in 0..n {
            tokens[i * c + ch] = search_map.data()[ch * n + i];
        }
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![n, c], tokens)?)?;
    let nodes = head_nodes(&mut g, tape, x, grid)?;
    collect(&g, &nodes, grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    /// Box in crop-output pixels.
    pub bbox: BoundingBox,
    /// Raw score at the chosen cell, before any window.
    pub p_max: f64,
    /// `(row, column)` of the chosen cell.
    pub cell: (usize, usize),
}

/// Picks the (optionally windowed) score peak; the first maximum in row-major
/// order wins ties. `score` may differ from `h.score` (e.g. after mask refinement);
/// `p_max` is read from `raw`.
pub fn decode_with<T: Real>(
    h: &HeadOutput<T>,
    score: &Tensor<T>,
    raw: &Tensor<T>,
    window: Option<&Tensor<T>>,
    out_side: usize,
) -> Result<Decoded> {
    h.validate()?;
    let g = h.grid();
    score.same_shape(&h.score)?;
    raw.same_shape(&h.score)?;
    let (idx, _) = match window {
        Some(w) => {
            w.same_shape(score)?;
            score.zip_map(w, |a, b| a * b)?.argmax()
        }
        None => score.argmax(),
    };
    let (row, col) = (idx / g, idx % g);
    let n = g * g;
    let stride = out_side as f64 / g as f64;
    let o = h.offset.data();
    let s = h.size.data();
    let bbox = BoundingBox::new(
        (col as f64 + o[idx].as_f64()) * stride,
        (row as f64 + o[n + idx].as_f64()) * stride,
        s[idx].as_f64() * out_side as f64,
        s[n + idx].as_f64() * out_side as f64,
    );
    Ok(Decoded {
        bbox,
        p_max: raw.data()[idx].as_f64(),
        cell: (row, col),
    })
}

pub fn decode<T: Real>(h: &HeadOutput<T>, window: Option<&Tensor<T>>, out_side: usize) -> Result<Decoded> {
    decode_with(h, &h.score, &h.score, window, out_side)
}
