//! Finite-difference verification of every loss term and the full objective
//! on one small synthetic batch.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use crate::autodiff::{grad_check_directional, GradientTape, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::sra::PairIndex;
use crate::synthdata::{generate, SynthSpec};
use crate::tensor::Real;
use crate::train::{build_sample, sample_terms, weighted_terms, Sample, TermMask, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-4,
            Precision::F32 => 1e-2,
        }
    }

    fn eps(self) -> f64 {
        match self {
            Precision::F64 => 1e-5,
            Precision::F32 => 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TermReport {
    pub term: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub tolerance: f64,
    pub seed: u64,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub const TERMS: [&str; 6] = ["focal", "l1", "giou", "logits", "mask", "total"];

/// One positive and one negative pair cut from two small synthetic sequences.
pub fn probe_batch(model: &ModelConfig, seed: u64) -> Result<Vec<Sample<f32>>> {
    let seqs: Vec<_> = (0..2)
        .map(|i| {
            generate(&SynthSpec {
                frames: 3,
                seed: seed * 2 + i,
                ..SynthSpec::default()
            })
        })
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        flip_prob: 0.0,
        brightness_jitter: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = SplitMix64::seed_from_u64(seed);
    let pairs = [
        PairIndex {
            template_seq: 0,
            template_frame: 0,
            search_seq: 0,
            search_frame: 2,
            label: 1,
        },
        PairIndex {
            template_seq: 0,
            template_frame: 0,
            search_seq: 1,
            search_frame: 1,
            label: 0,
        },
    ];
    pairs.iter().map(|p| build_sample(model, &cfg, &[seqs[0].clone(), seqs[1].clone()], p, &mut rng)).collect()
}

fn term_node<T: Real>(
    g: &mut Graph<T>,
    tape: &GradientTape<T>,
    model: &ModelConfig,
    batch: &[Sample<T>],
    cfg: &TrainConfig,
    term: &str,
) -> Result<NodeId> {
    if term == "total" {
        let npos = batch.iter().filter(|s| s.label == 1).count();
        let mut all = Vec::new();
        for s in batch {
            let t = sample_terms(g, tape, model, s, cfg)?;
            all.extend(weighted_terms::<T>(&t, &cfg.weights, TermMask::ALL, batch.len(), npos));
        }
        return g.lin_comb(&all);
    }
    // single terms are checked on the positive sample, which has all of them
    let s = batch
        .iter()
        .find(|s| s.label == 1)
        .ok_or_else(|| Error::Sampling("gradcheck batch needs a positive".into()))?;
    let t = sample_terms(g, tape, model, s, cfg)?;
    let node = match term {
        "focal" => t.focal,
        "l1" => t.l1,
        "giou" => t.giou,
        "logits" => Some(t.logits),
        "mask" => Some(t.mask),
        _ => return Err(Error::Config(format!("unknown loss term {term:?}"))),
    };
    node.ok_or_else(|| Error::Sampling(format!("{term} undefined on this sample")))
}

fn check_terms<T: Real>(
    model: &ModelConfig,
    seed: u64,
    precision: Precision,
    dirs_per_param: usize,
    terms: &[&str],
) -> Result<GradcheckReport> {
    let batch: Vec<Sample<T>> = probe_batch(model, seed)?.iter().map(Sample::cast).collect();
    let cfg = TrainConfig::default();
    let mut out = Vec::new();
    for &term in terms {
        let mut tape: GradientTape<T> = init_params(model, seed)?;
        let floor_ulps = 100.0 / precision.tolerance();
        let r = grad_check_directional(&mut tape, precision.eps(), dirs_per_param, floor_ulps, seed, |tape| {
            let mut g = Graph::new();
            let node = term_node(&mut g, tape, model, &batch, &cfg, term)?;
            Ok((g, node))
        })?;
        out.push(TermReport {
            term: term.to_string(),
            max_rel_err: r.max_rel_err,
            worst_param: r.worst_param,
            analytic: r.worst_pair.0,
            numeric: r.worst_pair.1,
            coords_checked: r.coords_checked,
        });
    }
    Ok(GradcheckReport {
        precision,
        tolerance: precision.tolerance(),
        seed,
        terms: out,
    })
}

/// Checks `terms` (any of [`TERMS`]) along `dirs_per_param` random
/// directions per parameter tensor.
pub fn run(
    model: &ModelConfig,
    seed: u64,
    precision: Precision,
    dirs_per_param: usize,
    terms: &[&str],
) -> Result<GradcheckReport> {
    match precision {
        Precision::F64 => check_terms::<f64>(model, seed, precision, dirs_per_param, terms),
        Precision::F32 => check_terms::<f32>(model, seed, precision, dirs_per_param, terms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_batch_has_one_pair_of_each_label() {
        let b = probe_batch(&ModelConfig::toy(), 3).unwrap();
        assert_eq!(b.iter().map(|s| s.label).collect::<Vec<_>>(), [1, 0]);
    }

    #[test]
    fn single_term_passes_and_repeats_exactly() {
        let model = ModelConfig::toy();
        let a = run(&model, 1, Precision::F64, 1, &["giou"]).unwrap();
        assert!(a.passed(), "{:?}", a.terms);
        let b = run(&model, 1, Precision::F64, 1, &["giou"]).unwrap();
        assert_eq!(a.terms[0].max_rel_err, b.terms[0].max_rel_err);
        assert!(run(&model, 1, Precision::F64, 1, &["bogus"]).is_err());
    }

    #[test]
    fn precision_policy() {
        assert_eq!(Precision::F64.tolerance(), 1e-4);
        assert_eq!(Precision::F32.tolerance(), 1e-2);
    }
}
