//! Inter-modality stream: a pre-norm ViT encoder block with one parameter set
//! per modality, applied to each frame independently.

use crate::decompose::{inter_unview, inter_view, InterFrame};
use crate::error::{Error, Result};
use crate::nn::{merge_heads, split_heads, Ffn, Norm};
use crate::params::{Init, ParamSource};
use crate::patch::TokenState;
use crate::tensor::Tensor;

pub struct VitBlockParams {
    pub heads: usize,
    pub norm1: Norm,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub out: Tensor,
    pub norm2: Norm,
    pub ffn: Ffn,
}

impl VitBlockParams {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(VitBlockParams {
            heads,
            norm1: Norm::declare(src, &format!("{prefix}.norm1"), dim)?,
            query: src.take(&format!("{prefix}.query"), &[dim, dim], Init::Normal)?,
            key: src.take(&format!("{prefix}.key"), &[dim, dim], Init::Normal)?,
            value: src.take(&format!("{prefix}.value"), &[dim, dim], Init::Normal)?,
            out: src.take(&format!("{prefix}.out"), &[dim, dim], Init::Normal)?,
            norm2: Norm::declare(src, &format!("{prefix}.norm2"), dim)?,
            ffn: Ffn::declare(src, &format!("{prefix}.ffn"), dim)?,
        })
    }

    pub fn numel(dim: usize) -> usize {
        2 * Norm::numel(dim) + 4 * dim * dim + Ffn::numel(dim)
    }
}

/// Scaled dot-product attention weights of the block on already-normalized
/// tokens: `[.., H, L, L]`.
pub fn self_attention_weights(normed: &Tensor, p: &VitBlockParams) -> Result<Tensor> {
    let dh = normed.shape().last().unwrap() / p.heads;
    let q = split_heads(&normed.matmul(&p.query)?, p.heads)?;
    let k = split_heads(&normed.matmul(&p.key)?, p.heads)?;
    q.matmul(&k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt()).softmax_lastdim()
}

/// Pre-norm encoder block on `[.., L, D]`: attention and FFN, each residual.
pub fn vit_block(x: &Tensor, p: &VitBlockParams) -> Result<Tensor> {
    let normed = p.norm1.apply(x)?;
    let attn = self_attention_weights(&normed, p)?;
    let v = split_heads(&normed.matmul(&p.value)?, p.heads)?;
    let y = merge_heads(&attn.matmul(&v)?)?.matmul(&p.out)?.add(x)?;
    p.ffn.apply(&p.norm2.apply(&y)?)?.add(&y)
}

/// One block parameter set per modality.
pub struct ExpertParams {
    pub experts: Vec<VitBlockParams>,
}

impl ExpertParams {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, modalities: usize, dim: usize, heads: usize) -> Result<Self> {
        let experts = (0..modalities)
            .map(|m| VitBlockParams::declare(src, &format!("{prefix}.expert{m}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(ExpertParams { experts })
    }

    pub fn numel(modalities: usize, dim: usize) -> usize {
        modalities * VitBlockParams::numel(dim)
    }

    fn expert(&self, modality: usize) -> Result<&VitBlockParams> {
        self.experts.get(modality).ok_or_else(|| {
            Error::Contract(format!(
                "modality {modality} has no expert ({} available)",
                self.experts.len()
            ))
        })
    }
}

/// Runs a frame through its modality's expert with the class slot prepended.
pub fn modal_route(frame: &InterFrame, experts: &ExpertParams) -> Result<InterFrame> {
    let p = experts.expert(frame.modality)?;
    let [s, d] = frame.tokens.shape()[..] else {
        return Err(Error::Dimension(format!("frame tokens {:?}", frame.tokens.shape())));
    };
    let seq = Tensor::concat(&[frame.class_slot.reshape(&[1, d])?, frame.tokens.clone()], 0)?;
    let out = vit_block(&seq, p)?;
    Ok(InterFrame {
        tokens: out.narrow(0, 1, s)?,
        modality: frame.modality,
        frame: frame.frame,
        class_slot: out.narrow(0, 0, 1)?.reshape(&[d])?,
    })
}

/// Applies every modality's expert to all of its frames (batched over frames),
/// then sets each class token to the mean of its per-frame updated copies.
pub fn inter_stream_layer(x: &TokenState, experts: &ExpertParams) -> Result<TokenState> {
    let (m, s, t, d) = (x.modalities(), x.spatial(), x.frames(), x.dim());
    if experts.experts.len() != m {
        return Err(Error::Contract(format!(
            "{} experts for {m} modalities",
            experts.experts.len()
        )));
    }
    let frames = inter_view(&x.patches)?;
    let mut tokens = Vec::with_capacity(m);
    let mut classes = Vec::with_capacity(m);
    for mi in 0..m {
        let own = frames.narrow(0, mi, 1)?.reshape(&[t, s, d])?;
        let cls = x.class_tokens.narrow(0, mi, 1)?.reshape(&[1, 1, d])?;
        let slots = Tensor::concat(&vec![cls; t], 0)?;
        let out = vit_block(&Tensor::concat(&[slots, own], 1)?, &experts.experts[mi])?;
        classes.push(out.narrow(1, 0, 1)?.reshape(&[t, d])?.mean_axis(0)?.reshape(&[1, d])?);
        tokens.push(out.narrow(1, 1, s)?.reshape(&[1, t, s, d])?);
    }
    let patches = inter_unview(&Tensor::concat(&tokens, 0)?)?;
    TokenState::new(patches, Tensor::concat(&classes, 0)?, x.synthesizer.clone(), x.grid)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::decompose::inter_decompose;
    use crate::params::Initializer;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn experts(m: usize, seed: u64, std: f64) -> ExpertParams {
        let mut init = Initializer::new(seed, std).unwrap();
        ExpertParams::declare(&mut init, "layer", m, 8, 2).unwrap()
    }

    fn state(m: usize, t: usize, seed: u64) -> TokenState {
        TokenState::new(random(&[m, 4, t, 8], seed), random(&[m, 8], seed + 1), None, (2, 2)).unwrap()
    }

    #[test]
    fn zero_weights_are_identity() {
        let e = experts(2, 0, 0.0);
        let x = random(&[5, 8], 1);
        assert_eq!(vit_block(&x, &e.experts[0]).unwrap().data(), x.data());
        let s = state(2, 3, 2);
        let out = inter_stream_layer(&s, &e).unwrap();
        assert_eq!(out.patches.data(), s.patches.data());
        assert_eq!(out.class_tokens.data(), s.class_tokens.data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let e = experts(1, 3, 0.5);
        let p = &e.experts[0];
        let w = self_attention_weights(&p.norm1.apply(&random(&[3, 5, 8], 4)).unwrap(), p).unwrap();
        assert_eq!(w.shape(), &[3, 2, 5, 5]);
        for row in w.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_is_observable_and_deterministic() {
        let e = experts(2, 5, 0.3);
        let s = state(2, 1, 6);
        let frames = inter_decompose(&s).unwrap();
        let mut a = frames[0].clone();
        a.class_slot = frames[1].class_slot.clone();
        let mut b = a.clone();
        b.modality = 1;
        let ra = modal_route(&a, &e).unwrap();
        let rb = modal_route(&b, &e).unwrap();
        assert_ne!(ra.tokens.data(), rb.tokens.data());
        let ra2 = modal_route(&a, &e).unwrap();
        assert_eq!(ra.tokens.data(), ra2.tokens.data());

        let mut bad = a.clone();
        bad.modality = 2;
        assert!(matches!(modal_route(&bad, &e), Err(Error::Contract(_))));
    }

    #[test]
    fn single_frame_single_modality_is_one_block_call() {
        let e = experts(1, 7, 0.3);
        let s = state(1, 1, 8);
        let out = inter_stream_layer(&s, &e).unwrap();
        let seq = Tensor::concat(&[s.class_tokens.clone(), s.patches.reshape(&[4, 8]).unwrap()], 0).unwrap();
        let direct = vit_block(&seq, &e.experts[0]).unwrap();
        assert_eq!(&direct.data()[8..], out.patches.data());
        assert_eq!(&direct.data()[..8], out.class_tokens.data());
    }

    #[test]
    fn layer_matches_per_frame_routing() {
        let e = experts(2, 9, 0.3);
        let s = state(2, 3, 10);
        let out = inter_stream_layer(&s, &e).unwrap();
        let routed: Vec<InterFrame> = inter_decompose(&s)
            .unwrap()
            .iter()
            .map(|f| modal_route(f, &e).unwrap())
            .collect();
        let out_frames = inter_decompose(&out).unwrap();
        for (a, b) in routed.iter().zip(&out_frames) {
            for (x, y) in a.tokens.data().iter().zip(b.tokens.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for m in 0..2 {
            let mean: Vec<f64> = (0..8)
                .map(|d| routed[m * 3..(m + 1) * 3].iter().map(|f| f.class_slot.data()[d]).sum::<f64>() / 3.0)
                .collect();
            for (x, y) in mean.iter().zip(&out.class_tokens.data()[m * 8..][..8]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frames_are_independent() {
        let e = experts(2, 11, 0.3);
        let s = state(2, 3, 12);
        let base = inter_stream_layer(&s, &e).unwrap();
        // Perturb modality 1, frame 2 (all spatial positions).
        let mut data = s.patches.to_vec();
        for sp in 0..4 {
            for d in 0..8 {
                data[((4 + sp) * 3 + 2) * 8 + d] += 0.5;
            }
        }
        let s2 = TokenState::new(Tensor::new(&[2, 4, 3, 8], data).unwrap(), s.class_tokens.clone(), None, (2, 2)).unwrap();
        let out = inter_stream_layer(&s2, &e).unwrap();
        for mi in 0..2 {
            for sp in 0..4 {
                for t in 0..3 {
                    let o = ((mi * 4 + sp) * 3 + t) * 8;
                    let same = base.patches.data()[o..o + 8] == out.patches.data()[o..o + 8];
                    assert_eq!(same, !(mi == 1 && t == 2), "m={mi} s={sp} t={t}");
                }
            }
        }
        assert_eq!(&base.class_tokens.data()[..8], &out.class_tokens.data()[..8]);
        assert_ne!(&base.class_tokens.data()[8..], &out.class_tokens.data()[8..]);
    }

    #[test]
    fn unused_expert_gets_zero_gradient() {
        let mut init = Initializer::new(13, 0.3).unwrap();
        ExpertParams::declare(&mut init, "layer", 2, 8, 2).unwrap();
        let store = init.finish();
        let leaves = store.leaves(true);
        let mut binder = crate::params::Binder::new(store.entries(), &leaves);
        let e = ExpertParams::declare(&mut binder, "layer", 2, 8, 2).unwrap();
        let s = state(2, 2, 14);
        let out = inter_stream_layer(&s, &e).unwrap();
        // Loss reads only modality-0 outputs.
        out.patches.narrow(0, 0, 1).unwrap().sum().add(&out.class_tokens.narrow(0, 0, 1).unwrap().sum()).unwrap().backward().unwrap();
        for (entry, leaf) in store.entries().iter().zip(&leaves) {
            let g = leaf.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
            if entry.name.contains("expert1") {
                assert!(g.iter().all(|&v| v == 0.0), "{}", entry.name);
            } else {
                assert!(g.iter().any(|&v| v != 0.0), "{}", entry.name);
            }
        }
    }
}
