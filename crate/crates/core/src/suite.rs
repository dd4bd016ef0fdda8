//! Finite-difference gradient suite over every block and the full model.
//!
//! Each block is checked on random parameters (std 0.5, so no gradient is
//! trivially small) and random inputs. The scalar loss is a fixed random
//! projection of the block output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionStrategy, ModelConfig};
use crate::data::{gen_dataset, ClipDims, DatasetSpec};
use crate::error::Result;
use crate::integration::{dynamic_pos_embed, synthesizer_update, IntegrationParams};
use crate::model::{self, classify, Classifier};
use crate::paf::{paf_block, PafParams};
use crate::params::{Binder, Init, Initializer, ParamSource, ParamStore};
use crate::patch::patchify;
use crate::tensor::{finite_diff_gradcheck, CheckParam, GradReport, Tensor};
use crate::vit::{vit_block, VitBlockParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const BLOCK_STD: f64 = 0.5;
/// Whole-model init scale. Larger values saturate the softmax, leaving
/// gradients below what central differences can resolve.
const MODEL_STD: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

/// Configuration used for the end-to-end checks.
pub fn tiny_config(fusion: FusionStrategy) -> ModelConfig {
    ModelConfig {
        modalities: 2,
        frames: 2,
        height: 16,
        width: 16,
        channels: 1,
        patch: 8,
        dim: 8,
        heads: 2,
        layers: 2,
        synth_layers: 1,
        classes: 4,
        fusion,
        conv_kernel: 3,
        init_std: MODEL_STD,
        seed: 0,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Either source, so one declaration closure serves initialization and binding.
pub enum Source<'a> {
    Init(&'a mut Initializer),
    Bind(&'a mut Binder<'a>),
}

impl ParamSource for Source<'_> {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match self {
            Source::Init(s) => s.take(name, shape, init),
            Source::Bind(s) => s.take(name, shape, init),
        }
    }
}

/// Runs `block` under gradcheck with its declared parameters plus `inputs`.
fn check_block<P>(
    seed: u64,
    declare: impl Fn(&mut Source<'_>) -> Result<P>,
    inputs: &[(&str, Vec<usize>)],
    block: impl Fn(&P, &[Tensor]) -> Result<Tensor>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed, BLOCK_STD)?;
    declare(&mut Source::Init(&mut init))?;
    let store: ParamStore = init.finish();
    let k = store.len();
    let mut params: Vec<CheckParam> = store
        .entries()
        .iter()
        .map(|e| CheckParam::new(&e.name, &e.shape, perturb(&e.value, &mut rng)))
        .collect();
    for (name, shape) in inputs {
        params.push(CheckParam::new(*name, shape, uniform(&mut rng, shape.iter().product())));
    }
    let run = |t: &[Tensor]| {
        let mut binder = Binder::new(store.entries(), &t[..k]);
        let p = declare(&mut Source::Bind(&mut binder))?;
        block(&p, &t[k..])
    };
    let initial: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::new(&p.shape, p.value.clone()))
        .collect::<Result<_>>()?;
    let shape = run(&initial)?.shape().to_vec();
    let probe = Tensor::new(&shape, uniform(&mut rng, shape.iter().product()))?;
    let f = |t: &[Tensor]| Ok(run(t)?.mul(&probe)?.sum());
    finite_diff_gradcheck(f, &params, STEP, TOLERANCE)
}

/// Norm gains start at one and biases at zero; jitter them so their
/// gradients are exercised away from that special point.
fn perturb(v: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    v.iter().map(|x| x + 0.1 * rng.random_range(-1.0..1.0)).collect()
}

pub fn paf_check(seed: u64) -> Result<GradReport> {
    check_block(
        seed,
        |src| PafParams::declare(src, "paf", 8, 2),
        &[("group", vec![3, 8])],
        |p, x| paf_block(&x[0], p),
    )
}

pub fn dynamic_pos_embed_check(seed: u64) -> Result<GradReport> {
    check_block(
        seed,
        |src| IntegrationParams::declare(src, "integration", 8, 2, 3),
        &[("tokens", vec![2, 4, 2, 8])],
        |p, x| dynamic_pos_embed(&x[0], (2, 2), p),
    )
}

pub fn synthesizer_update_check(seed: u64) -> Result<GradReport> {
    check_block(
        seed,
        |src| IntegrationParams::declare(src, "integration", 8, 2, 3),
        &[("h", vec![8]), ("fused", vec![2, 4, 2, 8])],
        |p, x| synthesizer_update(Some(&x[0]), &x[1], p),
    )
}

pub fn vit_block_check(seed: u64) -> Result<GradReport> {
    check_block(
        seed,
        |src| VitBlockParams::declare(src, "block", 8, 2),
        &[("tokens", vec![5, 8])],
        |p, x| vit_block(&x[0], p),
    )
}

pub fn classify_check(seed: u64) -> Result<GradReport> {
    check_block(
        seed,
        |src| {
            Ok(Classifier {
                weight: src.take("classifier.weight", &[24, 4], Init::Normal)?,
                bias: src.take("classifier.bias", &[4], Init::Zeros)?,
            })
        },
        &[("h", vec![8]), ("class_tokens", vec![2, 8])],
        |p, x| classify(&x[0], &x[1], p),
    )
}

/// Cross-entropy of the tiny model on one synthetic clip, every parameter checked.
pub fn end_to_end_check(fusion: FusionStrategy, seed: u64) -> Result<GradReport> {
    let c = ModelConfig {
        seed,
        ..tiny_config(fusion)
    };
    let m = model::MultiFuser::new(c.clone())?;
    let clip = gen_dataset(&DatasetSpec {
        dims: ClipDims::of_model(&c),
        classes: c.classes,
        samples: 1,
        noise_std: 0.05,
        seed,
    })?
    .remove(0);
    let patches = patchify(&clip, &c)?;
    let params: Vec<CheckParam> = m
        .store()
        .entries()
        .iter()
        .map(|e| CheckParam::new(&e.name, &e.shape, e.value.to_vec()))
        .collect();
    let f = |t: &[Tensor]| {
        let mut binder = Binder::new(m.store().entries(), t);
        let net = model::declare(&mut binder, &c)?;
        model::forward(&net, &c, &patches)?.cross_entropy(clip.label)
    };
    finite_diff_gradcheck(f, &params, STEP, TOLERANCE)
}

/// Every block, then the full model under each strategy.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = vec![
        ("paf_block".to_string(), paf_check(seed)?),
        ("dynamic_pos_embed".to_string(), dynamic_pos_embed_check(seed)?),
        ("synthesizer_update".to_string(), synthesizer_update_check(seed)?),
        ("vit_block".to_string(), vit_block_check(seed)?),
        ("classify".to_string(), classify_check(seed)?),
    ];
    for fusion in [
        FusionStrategy::Parallel,
        FusionStrategy::Cascade,
        FusionStrategy::Early,
        FusionStrategy::Late,
    ] {
        out.push((format!("model_{fusion}"), end_to_end_check(fusion, seed)?));
    }
    Ok(out
        .into_iter()
        .map(|(name, report)| SuiteEntry { name, report })
        .collect())
}
