//! Patch embedding and the joint `[cls; template; search]` transformer backbone.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub template_side: usize,
    pub search_side: usize,
    /// 1-based layer indices whose search tokens are exported, strictly increasing.
    pub tap_layers: Vec<usize>,
    pub ffn_ratio: usize,
    /// Input image channels.
    pub channels: usize,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            template_side: 32,
            search_side: 64,
            tap_layers: vec![2, 3, 4],
            ffn_ratio: 4,
            channels: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            template_side: 128,
            search_side: 256,
            tap_layers: vec![6, 8, 12],
            ffn_ratio: 4,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.template_side % p != 0 || self.search_side % p != 0 {
            return Err(Error::Config(format!(
                "template side {} and search side {} must be divisible by patch size {p}",
                self.template_side, self.search_side
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("ffn_ratio and channels must be >= 1".into()));
        }
        let ok = self.tap_layers.windows(2).all(|w| w[0] < w[1])
            && self.tap_layers.iter().all(|&l| l >= 1 && l <= self.layers);
        if !ok {
            return Err(Error::Config(format!(
                "tap layers {:?} must be strictly increasing within 1..={}",
                self.tap_layers, self.layers
            )));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch_size
    }

    pub fn n_template(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn n_search(&self) -> usize {
        self.search_grid().pow(2)
    }

    /// Length of the joint sequence including the CLS token.
    pub fn seq_len(&self) -> usize {
        1 + self.n_template() + self.n_search()
    }

    /// `(name, shape)` of every backbone parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.embed_dim;
        let k = self.channels * self.patch_size * self.patch_size;
        let hidden = c * self.ffn_ratio;
        let mut v = vec![
            ("patch_embed.w".to_string(), vec![k, c]),
            ("patch_embed.b".to_string(), vec![c]),
            ("cls.token".to_string(), vec![1, c]),
            ("pos.cls".to_string(), vec![1, c]),
            ("pos.z".to_string(), vec![self.n_template(), c]),
            ("pos.x".to_string(), vec![self.n_search(), c]),
            ("id.z".to_string(), vec![1, c]),
            ("id.x".to_string(), vec![1, c]),
        ];
        for l in 1..=self.layers {
            let p = |s: &str| format!("blk{l}.{s}");
            v.push((p("ln1.w"), vec![c]));
            v.push((p("ln1.b"), vec![c]));
            v.push((p("qkv.w"), vec![c, 3 * c]));
            v.push((p("qkv.b"), vec![3 * c]));
            v.push((p("proj.w"), vec![c, c]));
            v.push((p("proj.b"), vec![c]));
            v.push((p("ln2.w"), vec![c]));
            v.push((p("ln2.b"), vec![c]));
            v.push((p("fc1.w"), vec![c, hidden]));
            v.push((p("fc1.b"), vec![hidden]));
            v.push((p("fc2.w"), vec![hidden, c]));
            v.push((p("fc2.b"), vec![c]));
        }
        v
    }
}

/// Rearranges a `[ch × S × S]` image into `[(S/P)² × ch·P²]` patch rows, with each
/// row ordered channel-major then row then column.
pub fn unfold_patches<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (ch, h, w) = match image.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dim(format!("image must be [H×W] or [ch×H×W], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let k = ch * patch * patch;
    let src = image.data();
    let mut out = vec![T::zero(); gh * gw * k];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * k..(gy * gw + gx + 1) * k];
            for c in 0..ch {
                for py in 0..patch {
                    let s = c * h * w + (gy * patch + py) * w + gx * patch;
                    let d = c * patch * patch + py * patch;
                    row[d..d + patch].copy_from_slice(&src[s..s + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, k], out)
}

/// Non-overlapping `P×P` patches projected to `C` dims (stride-P convolution).
pub fn patch_embed<T: Real>(image: &Tensor<T>, patch: usize, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = unfold_patches(image, patch)?;
    crate::tensor::linear(&cols, w, b)
}

/// Encoder outputs split by role.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub cls_out: Tensor<T>,
    pub template_out: Tensor<T>,
    pub search_out: Tensor<T>,
    pub taps: Vec<Tensor<T>>,
}

/// Graph handles for the same outputs.
#[derive(Debug, Clone)]
pub struct EncoderNodes {
    pub cls: NodeId,
    pub template: NodeId,
    pub search: NodeId,
    pub taps: Vec<NodeId>,
}

/// Template input to the backbone: raw pixels, or tokens embedded earlier.
pub enum TemplateInput<'a, T> {
    Image(&'a Tensor<T>),
    Tokens(&'a Tensor<T>),
}

pub(crate) fn linear_node<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(tape, &format!("{prefix}.w"))?;
    let b = g.param(tape, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn layer_norm_node<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(tape, &format!("{prefix}.w"))?;
    let b = g.param(tape, &format!("{prefix}.b"))?;
    g.layer_norm(x, w, b, T::lit(LN_EPS))
}

/// Embeds one image: patch projection plus positional and frame-identity terms.
fn embed_node<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    cfg: &EncoderConfig,
    image: &Tensor<T>,
    expect_tokens: usize,
    role: &str,
) -> Result<NodeId> {
    let cols = unfold_patches(image, cfg.patch_size)?;
    let (n, k) = cols.dims2()?;
    if n != expect_tokens || k != cfg.channels * cfg.patch_size * cfg.patch_size {
        return Err(Error::dim(format!(
            "{role} image gives {n} patches of {k} values; config expects {expect_tokens} of {}",
            cfg.channels * cfg.patch_size * cfg.patch_size
        )));
    }
    let cols = g.constant(cols)?;
    let x = linear_node(g, tape, cols, "patch_embed")?;
    let pos = g.param(tape, &format!("pos.{role}"))?;
    let x = g.add(x, pos)?;
    let id = g.param(tape, &format!("id.{role}"))?;
    g.add_row(x, id)
}

/// Embedded template tokens `[N_z × C]`, for caching across frames.
pub fn embed_template<T: Real>(tape: &GradientTape<T>, cfg: &EncoderConfig, template: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let n = embed_node(&mut g, tape, cfg, template, cfg.n_template(), "z")?;
    Ok(g.value(n).clone())
}

fn block<T: Real>(g: &mut Graph<T>, tape: &GradientTape<T>, cfg: &EncoderConfig, x: NodeId, l: usize) -> Result<NodeId> {
    let c = cfg.embed_dim;
    let p = |s: &str| format!("blk{l}.{s}");
    let h = layer_norm_node(g, tape, x, &p("ln1"))?;
    let qkv = linear_node(g, tape, h, &p("qkv"))?;
    let q = g.slice_cols(qkv, 0, c)?;
    let k = g.slice_cols(qkv, c, c)?;
    let v = g.slice_cols(qkv, 2 * c, c)?;
    let a = g.attention(q, k, v, cfg.heads)?;
    let a = linear_node(g, tape, a, &p("proj"))?;
    let x = g.add(x, a)?;
    let h = layer_norm_node(g, tape, x, &p("ln2"))?;
    let f = linear_node(g, tape, h, &p("fc1"))?;
    let f = g.gelu(f)?;
    let f = linear_node(g, tape, f, &p("fc2"))?;
    g.add(x, f)
}

/// Runs the backbone on `[cls; template; search]` and records the search
/// slice after each tap layer.
pub fn encode_nodes<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    cfg: &EncoderConfig,
    template: TemplateInput<'_, T>,
    search: &Tensor<T>,
) -> Result<EncoderNodes> {
    let nz = cfg.n_template();
    let nx = cfg.n_search();
    let z = match template {
        TemplateInput::Image(img) => embed_node(g, tape, cfg, img, nz, "z")?,
        TemplateInput::Tokens(t) => {
            if t.shape() != [nz, cfg.embed_dim] {
                return Err(Error::dim(format!(
                    "cached template tokens {:?}, expected [{nz}, {}]",
                    t.shape(),
                    cfg.embed_dim
                )));
            }
            g.constant(t.clone())?
        }
    };
    let x = embed_node(g, tape, cfg, search, nx, "x")?;
    let cls = g.param(tape, "cls.token")?;
    let pos_cls = g.param(tape, "pos.cls")?;
    let cls = g.add(cls, pos_cls)?;
    let mut seq = g.concat_rows(&[cls, z, x])?;
    let mut taps = Vec::with_capacity(cfg.tap_layers.len());
    for l in 1..=cfg.layers {
        seq = block(g, tape, cfg, seq, l)?;
        if cfg.tap_layers.contains(&l) {
            taps.push(g.slice_rows(seq, 1 + nz, nx)?);
        }
    }
    Ok(EncoderNodes {
        cls: g.slice_rows(seq, 0, 1)?,
        template: g.slice_rows(seq, 1, nz)?,
        search: g.slice_rows(seq, 1 + nz, nx)?,
        taps,
    })
}

/// Forward-only convenience wrapper around [`encode_nodes`].
pub fn encode<T: Real>(
    tape: &GradientTape<T>,
    cfg: &EncoderConfig,
    template: &Tensor<T>,
    search: &Tensor<T>,
) -> Result<EncoderOutput<T>> {
    cfg.validate()?;
    let mut g = Graph::new();
    let n = encode_nodes(&mut g, tape, cfg, TemplateInput::Image(template), search)?;
    Ok(EncoderOutput {
        cls_out: g.value(n.cls).clone(),
        template_out: g.value(n.template).clone(),
        search_out: g.value(n.search).clone(),
        taps: n.taps.iter().map(|&t| g.value(t).clone()).collect(),
    })
}
