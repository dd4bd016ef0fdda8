//! Multimodal integration: a depthwise 3D convolution over each modality's
//! `(T, Hp, Wp)` token grid as a dynamic positional embedding, and the
//! synthesizer update by multi-head cross attention over all fused tokens.

use crate::error::{Error, Result};
use crate::nn::{merge_heads, split_heads, Ffn, Norm};
use crate::params::{Init, ParamSource};
use crate::tensor::Tensor;

pub struct IntegrationParams {
    pub heads: usize,
    /// `[k, k, k, D]`.
    pub kernel: Tensor,
    pub norm_query: Norm,
    pub norm_tokens: Norm,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub out: Tensor,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

impl IntegrationParams {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, dim: usize, heads: usize, kernel: usize) -> Result<Self> {
        Ok(IntegrationParams {
            heads,
            kernel: src.take(&format!("{prefix}.kernel"), &[kernel, kernel, kernel, dim], Init::Normal)?,
            norm_query: Norm::declare(src, &format!("{prefix}.norm_query"), dim)?,
            norm_tokens: Norm::declare(src, &format!("{prefix}.norm_tokens"), dim)?,
            query: src.take(&format!("{prefix}.query"), &[dim, dim], Init::Normal)?,
            key: src.take(&format!("{prefix}.key"), &[dim, dim], Init::Normal)?,
            value: src.take(&format!("{prefix}.value"), &[dim, dim], Init::Normal)?,
            out: src.take(&format!("{prefix}.out"), &[dim, dim], Init::Normal)?,
            norm_ffn: Norm::declare(src, &format!("{prefix}.norm_ffn"), dim)?,
            ffn: Ffn::declare(src, &format!("{prefix}.ffn"), dim)?,
        })
    }

    pub fn numel(dim: usize, kernel: usize) -> usize {
        kernel.pow(3) * dim + 3 * Norm::numel(dim) + 4 * dim * dim + Ffn::numel(dim)
    }
}

/// `X̂ = DWConv3d(X') + X'`, each modality convolved on its own grid.
pub fn dynamic_pos_embed(x: &Tensor, grid: (usize, usize), params: &IntegrationParams) -> Result<Tensor> {
    let [m, s, t, d] = x.shape()[..] else {
        return Err(Error::Dimension(format!("dynamic_pos_embed: input {:?}", x.shape())));
    };
    if grid.0 * grid.1 != s {
        return Err(Error::Config(format!(
            "dynamic_pos_embed: grid {grid:?} does not hold {s} tokens"
        )));
    }
    let volume = x.permute(&[0, 2, 1, 3])?.reshape(&[m, t, grid.0, grid.1, d])?;
    let conv = volume
        .depthwise_conv3d(&params.kernel)?
        .reshape(&[m, t, s, d])?
        .permute(&[0, 2, 1, 3])?;
    conv.add(x)
}

fn flatten_tokens(x_hat: &Tensor) -> Result<Tensor> {
    let d = *x_hat.shape().last().unwrap();
    x_hat.reshape(&[x_hat.numel() / d, d])
}

fn attention(h: &Tensor, tokens: &Tensor, params: &IntegrationParams) -> Result<(Tensor, Tensor)> {
    let d = h.numel();
    let q = params.norm_query.apply(&h.reshape(&[1, d])?)?.matmul(&params.query)?;
    let k = tokens.matmul(&params.key)?;
    let q = split_heads(&q, params.heads)?;
    let k = split_heads(&k, params.heads)?;
    let dh = (d / params.heads) as f64;
    let w = q.matmul(&k.transpose_last2()?)?.scale(1.0 / dh.sqrt()).softmax_lastdim()?;
    let v = split_heads(&tokens.matmul(&params.value)?, params.heads)?;
    Ok((w, v))
}

/// Cross-attention weights of the synthesizer over the `M·S·T` normalized
/// fused tokens: `[H, 1, M·S·T]`.
pub fn synthesizer_attention(h: &Tensor, x_hat: &Tensor, params: &IntegrationParams) -> Result<Tensor> {
    let tokens = params.norm_tokens.apply(&flatten_tokens(x_hat)?)?;
    Ok(attention(h, &tokens, params)?.0)
}

/// `h' = MHCA(Norm(h), Norm(X̂)) + h`, then `FFN(Norm(h')) + h'`.
pub fn synthesizer_update(h: Option<&Tensor>, x_hat: &Tensor, params: &IntegrationParams) -> Result<Tensor> {
    let h = h.ok_or_else(|| Error::Contract("synthesizer_update: no synthesizer token".into()))?;
    let d = h.numel();
    if h.shape() != [d] || x_hat.shape().last() != Some(&d) {
        return Err(Error::Dimension(format!(
            "synthesizer_update: h {:?} vs tokens {:?}",
            h.shape(),
            x_hat.shape()
        )));
    }
    let tokens = params.norm_tokens.apply(&flatten_tokens(x_hat)?)?;
    let (w, v) = attention(h, &tokens, params)?;
    let h1 = merge_heads(&w.attend(&v)?)?.matmul(&params.out)?.add(&h.reshape(&[1, d])?)?;
    params.ffn.apply(&params.norm_ffn.apply(&h1)?)?.add(&h1)?.reshape(&[d])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Initializer;

    fn params(seed: u64, std: f64) -> IntegrationParams {
        let mut init = Initializer::new(seed, std).unwrap();
        IntegrationParams::declare(&mut init, "integ", 8, 2, 3).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn kernel_from(f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut v = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    v.extend(std::iter::repeat_n(f(a, b, c), 8));
                }
            }
        }
        Tensor::new(&[3, 3, 3, 8], v).unwrap()
    }

    #[test]
    fn zero_kernel_is_identity() {
        let mut p = params(1, 0.5);
        p.kernel = Tensor::zeros(&[3, 3, 3, 8]);
        let x = random(&[2, 4, 3, 8], 2);
        assert_eq!(dynamic_pos_embed(&x, (2, 2), &p).unwrap().data(), x.data());
    }

    #[test]
    fn delta_kernel_doubles() {
        let mut p = params(1, 0.5);
        p.kernel = kernel_from(|a, b, c| if (a, b, c) == (1, 1, 1) { 1.0 } else { 0.0 });
        let x = random(&[2, 4, 3, 8], 3);
        let y = dynamic_pos_embed(&x, (2, 2), &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let p = params(1, 0.5);
        let x = random(&[2, 4, 3, 8], 3);
        assert!(matches!(dynamic_pos_embed(&x, (1, 3), &p), Err(Error::Config(_))));
    }

    #[test]
    fn modalities_are_convolved_independently() {
        let p = params(4, 0.5);
        let x = random(&[2, 4, 3, 8], 5);
        let base = dynamic_pos_embed(&x, (2, 2), &p).unwrap();
        let mut data = x.to_vec();
        data[4 * 3 * 8 + 7] += 1.0;
        let y = dynamic_pos_embed(&Tensor::new(&[2, 4, 3, 8], data).unwrap(), (2, 2), &p).unwrap();
        assert_eq!(&base.data()[..96], &y.data()[..96]);
    }

    #[test]
    fn zero_output_weights_return_h() {
        let mut p = params(6, 0.5);
        p.out = Tensor::zeros(&[8, 8]);
        p.ffn.w2 = Tensor::zeros(&[32, 8]);
        p.ffn.b2 = Tensor::zeros(&[8]);
        let h = random(&[8], 7);
        let out = synthesizer_update(Some(&h), &random(&[2, 4, 2, 8], 8), &p).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn missing_synthesizer_is_contract_error() {
        let p = params(6, 0.5);
        assert!(matches!(
            synthesizer_update(None, &random(&[2, 4, 2, 8], 8), &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_token_gets_full_weight() {
        let p = params(9, 1.0);
        let w = synthesizer_attention(&random(&[8], 10), &random(&[1, 1, 1, 8], 11), &p).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_is_a_distribution_per_head() {
        let p = params(12, 1.0);
        let w = synthesizer_attention(&random(&[8], 13), &random(&[3, 4, 2, 8], 14), &p).unwrap();
        assert_eq!(w.shape(), &[2, 1, 24]);
        for row in w.data().chunks(24) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn symmetric_kernel_commutes_with_spatial_flip() {
        let mut p = params(15, 0.5);
        // Symmetric under reversal of each spatial axis.
        p.kernel = kernel_from(|a, b, c| 0.1 * (a + 1) as f64 + 0.05 * (b as f64 - 1.0).abs() + 0.02 * (c as f64 - 1.0).abs());
        let (hp, wp, t) = (2, 3, 2);
        let x = random(&[2, hp * wp, t, 8], 16);
        let flip = |x: &Tensor| {
            let mut out = x.to_vec();
            for m in 0..2 {
                for r in 0..hp {
                    for c in 0..wp {
                        let src = ((m * hp * wp + r * wp + c) * t) * 8;
                        let dst = ((m * hp * wp + (hp - 1 - r) * wp + (wp - 1 - c)) * t) * 8;
                        out[dst..dst + t * 8].copy_from_slice(&x.data()[src..src + t * 8]);
                    }
                }
            }
            Tensor::new(x.shape(), out).unwrap()
        };
        let a = dynamic_pos_embed(&flip(&x), (hp, wp), &p).unwrap();
        let b = flip(&dynamic_pos_embed(&x, (hp, wp), &p).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
        let h = random(&[8], 17);
        let ua = synthesizer_update(Some(&h), &a, &p).unwrap();
        let ub = synthesizer_update(Some(&h), &dynamic_pos_embed(&x, (hp, wp), &p).unwrap(), &p).unwrap();
        for (u, v) in ua.data().iter().zip(ub.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn update_is_token_permutation_invariant(seed in any::<u64>(), perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle()) {
            let p = params(seed, 0.4);
            let x = random(&[3, 2, 2, 8], seed ^ 3);
            let h = random(&[8], seed ^ 5);
            let rows = flatten_tokens(&x).unwrap();
            let shuffled: Vec<Tensor> = perm.iter().map(|&i| rows.narrow(0, i, 1).unwrap()).collect();
            let px = Tensor::concat(&shuffled, 0).unwrap().reshape(&[3, 2, 2, 8]).unwrap();
            let a = synthesizer_update(Some(&h), &x, &p).unwrap();
            let b = synthesizer_update(Some(&h), &px, &p).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
