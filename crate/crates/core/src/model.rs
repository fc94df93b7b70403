//! Model presets, parameter initialization and the assembled forward pass.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::atm::{self, AtmConfig, AtmNodes, MaskOutput};
use crate::autodiff::{GradientTape, Graph, NodeId};
use crate::encoder::{self, EncoderConfig, EncoderNodes, TemplateInput};
use crate::error::{Error, Result};
use crate::head::{self, HeadNodes, HeadOutput};
use crate::sra::{self, PresenceOutput};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;
/// Score-branch output bias so that initial scores sit near 0.1.
pub const SCORE_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset {s:?} (toy|full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub encoder: EncoderConfig,
    /// Width of the first head conv stage; later stages halve it.
    pub head_channels: usize,
    pub atm: AtmConfig,
    pub sra_heads: usize,
    pub template_factor: f64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            encoder: EncoderConfig::toy(),
            head_channels: 32,
            atm: AtmConfig::toy(),
            sra_heads: 4,
            template_factor: 2.0,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            encoder: EncoderConfig::full(),
            head_channels: 256,
            atm: AtmConfig::full(),
            sra_heads: 8,
            template_factor: 2.0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.atm.validate()?;
        if self.atm.tap_layers != self.encoder.tap_layers {
            return Err(Error::Config(format!(
                "ATM taps {:?} differ from encoder taps {:?}",
                self.atm.tap_layers, self.encoder.tap_layers
            )));
        }
        let c = self.encoder.embed_dim;
        if self.sra_heads == 0 || c % self.sra_heads != 0 || c < 2 {
            return Err(Error::Config(format!("SRA pooling: {c} dims over {} heads", self.sra_heads)));
        }
        if self.head_channels < 4 {
            return Err(Error::Config("head_channels must be at least 4".into()));
        }
        if !(self.template_factor > 0.0) {
            return Err(Error::Config("template factor must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.encoder.search_grid()
    }

    pub fn search_side(&self) -> usize {
        self.encoder.search_side
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.encoder.embed_dim;
        let mut v = self.encoder.param_shapes();
        v.extend(head::param_shapes(c, self.head_channels));
        v.extend(self.atm.param_shapes(c));
        v.extend(sra::param_shapes(c));
        v
    }
}

fn trunc_normal(rng: &mut SplitMix64, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn is_norm_gain(name: &str) -> bool {
    [".ln1.w", ".ln2.w", ".ln_q.w", ".ln_f.w"].iter().any(|s| name.ends_with(s))
}

/// Seeded initialization: norm gains 1, biases 0, weights truncated normal.
/// Head convolutions use a fan-in scaled std so the ReLU stack keeps its signal.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<GradientTape<T>> {
    cfg.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut tape = GradientTape::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if is_norm_gain(&name) {
            Tensor::full(&shape, T::one())
        } else if name == "head.score.out.b" {
            Tensor::full(&shape, T::lit(SCORE_PRIOR_BIAS))
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let std = if name.starts_with("head.") && name.contains(".conv") {
                (2.0 / shape[0] as f64).sqrt()
            } else {
                INIT_STD
            };
            Tensor::from_fn(&shape, |_| T::lit(trunc_normal(&mut rng, std)))
        };
        tape.register(name, t);
    }
    Ok(tape)
}

/// Checks a loaded tape against the parameter list of `cfg`.
pub fn check_params<T: Real>(cfg: &ModelConfig, tape: &GradientTape<T>) -> Result<()> {
    for (name, shape) in cfg.param_shapes() {
        let t = tape
            .get(&name)
            .map_err(|_| Error::Config(format!("weights lack parameter {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub encoder: EncoderNodes,
    pub head: HeadNodes,
    pub presence: NodeId,
    pub atm: Option<AtmNodes>,
}

/// Records the full forward pass (backbone, head, presence, optional ATM).
pub fn forward_nodes<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    cfg: &ModelConfig,
    template: TemplateInput<'_, T>,
    search: &Tensor<T>,
    with_atm: bool,
) -> Result<ForwardNodes> {
    let enc = encoder::encode_nodes(g, tape, &cfg.encoder, template, search)?;
    let head = head::head_nodes(g, tape, enc.search, cfg.grid())?;
    let presence = sra::presence_node(g, tape, enc.cls, enc.search, cfg.sra_heads)?;
    let atm = if with_atm {
        Some(atm::atm_nodes(g, tape, &cfg.atm, &enc.taps)?)
    } else {
        None
    };
    Ok(ForwardNodes {
        encoder: enc,
        head,
        presence,
        atm,
    })
}

#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub head: HeadOutput<T>,
    pub presence: PresenceOutput,
    pub masks: Option<MaskOutput<T>>,
}

/// Forward-only pass on a preprocessed search crop.
pub fn infer<T: Real>(
    tape: &GradientTape<T>,
    cfg: &ModelConfig,
    template: TemplateInput<'_, T>,
    search: &Tensor<T>,
    with_atm: bool,
) -> Result<Inference<T>> {
    let mut g = Graph::new();
    let n = forward_nodes(&mut g, tape, cfg, template, search, with_atm)?;
    let p = g.value(n.presence).data();
    let presence = PresenceOutput {
        probs: [p[0].as_f64(), p[1].as_f64()],
    };
    let grid = cfg.grid();
    let mut masks = n.atm.as_ref().map(|a| atm::collect(&g, a));
    if let Some(m) = masks.as_mut() {
        m.fused_mask = m.fused_mask.clone().reshape(&[grid, grid])?;
    }
    Ok(Inference {
        head: head::collect(&g, &n.head, grid)?,
        presence,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        let mut c = ModelConfig::toy();
        c.atm.tap_layers = vec![1, 2, 3];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!("full".parse::<Preset>().unwrap(), Preset::Full);
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = ModelConfig::toy();
        let a: GradientTape<f32> = init_params(&cfg, 3).unwrap();
        let b: GradientTape<f32> = init_params(&cfg, 3).unwrap();
        let c: GradientTape<f32> = init_params(&cfg, 4).unwrap();
        for (n, t) in a.params() {
            assert_eq!(b.get(n).unwrap(), t);
        }
        assert_ne!(a.get("blk1.qkv.w").unwrap(), c.get("blk1.qkv.w").unwrap());
        assert!(a.get("blk1.qkv.w").unwrap().max_abs() <= 0.04 + 1e-7);
        assert!(a.get("blk2.ln1.w").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("blk2.fc1.b").unwrap().data().iter().all(|&v| v == 0.0));
        check_params(&cfg, &a).unwrap();
    }

    #[test]
    fn infer_shapes_toy() {
        let cfg = ModelConfig::toy();
        let tape: GradientTape<f32> = init_params(&cfg, 1).unwrap();
        let z = Tensor::from_fn(&[1, 32, 32], |i| (i % 7) as f32 / 7.0);
        let x = Tensor::from_fn(&[1, 64, 64], |i| (i % 11) as f32 / 11.0);
        let out = infer(&tape, &cfg, TemplateInput::Image(&z), &x, true).unwrap();
        assert_eq!(out.head.score.shape(), &[8, 8]);
        let m = out.masks.unwrap();
        assert_eq!(m.fused_mask.shape(), &[8, 8]);
        assert_eq!(m.per_block_masks.len(), 3);
        assert!((out.presence.probs[0] + out.presence.probs[1] - 1.0).abs() < 1e-6);

        let tokens = encoder::embed_template(&tape, &cfg.encoder, &z).unwrap();
        let cached = infer(&tape, &cfg, TemplateInput::Tokens(&tokens), &x, true).unwrap();
        assert_eq!(cached.head, out.head);
    }
}
