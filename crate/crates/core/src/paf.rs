//! Patch-wise adaptive fusion: multi-head attention among the `M` modality
//! tokens of one intra group, followed by a feed-forward network.
//!
//! Similarities are raw dot products `Q_n(B_m)·K_n(B_t)` with no temperature.
//! Head `n` owns columns `n·dh .. (n+1)·dh` of the stacked `Q`, `K`, `V`
//! matrices. All functions accept a single group `[M, D]` or a batch
//! `[G, M, D]`.

use crate::error::{Error, Result};
use crate::nn::{merge_heads, split_heads, Ffn, Norm};
use crate::params::{Init, ParamSource};
use crate::tensor::Tensor;

pub struct PafParams {
    pub heads: usize,
    pub norm1: Norm,
    /// `[D, D]`, heads stacked along columns.
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// Fusion matrix `U`, `[D, D]`.
    pub fusion: Tensor,
    pub norm2: Norm,
    pub ffn: Ffn,
}

impl PafParams {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(PafParams {
            heads,
            norm1: Norm::declare(src, &format!("{prefix}.norm1"), dim)?,
            query: src.take(&format!("{prefix}.query"), &[dim, dim], Init::Normal)?,
            key: src.take(&format!("{prefix}.key"), &[dim, dim], Init::Normal)?,
            value: src.take(&format!("{prefix}.value"), &[dim, dim], Init::Normal)?,
            fusion: src.take(&format!("{prefix}.fusion"), &[dim, dim], Init::Normal)?,
            norm2: Norm::declare(src, &format!("{prefix}.norm2"), dim)?,
            ffn: Ffn::declare(src, &format!("{prefix}.ffn"), dim)?,
        })
    }

    pub fn numel(dim: usize) -> usize {
        2 * Norm::numel(dim) + 4 * dim * dim + Ffn::numel(dim)
    }

    fn dim(&self) -> usize {
        self.query.shape()[0]
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Row-stochastic affinity `R_n` of head `head`: `[.., M, M]`.
pub fn interrelation(group: &Tensor, params: &PafParams, head: usize) -> Result<Tensor> {
    if head >= params.heads {
        return Err(Error::Contract(format!("head {head} of {}", params.heads)));
    }
    let dh = params.head_dim();
    let q = group.matmul(&params.query.narrow(1, head * dh, dh)?)?;
    let k = group.matmul(&params.key.narrow(1, head * dh, dh)?)?;
    q.matmul(&k.transpose_last2()?)?.softmax_lastdim()
}

/// All heads at once: `[.., H, M, M]`.
pub fn interrelations(group: &Tensor, params: &PafParams) -> Result<Tensor> {
    let q = split_heads(&group.matmul(&params.query)?, params.heads)?;
    let k = split_heads(&group.matmul(&params.key)?, params.heads)?;
    q.matmul(&k.transpose_last2()?)?.softmax_lastdim()
}

/// `Φ(B) = Concat_n(R_n V_n(B)) U`.
pub fn adaptive_fuse(group: &Tensor, params: &PafParams) -> Result<Tensor> {
    let r = interrelations(group, params)?;
    let v = split_heads(&group.matmul(&params.value)?, params.heads)?;
    merge_heads(&r.attend(&v)?)?.matmul(&params.fusion)
}

/// `y = Φ(Norm(B)) + B`, then `FFN(Norm(y)) + y`.
pub fn paf_block(group: &Tensor, params: &PafParams) -> Result<Tensor> {
    let y = adaptive_fuse(&params.norm1.apply(group)?, params)?.add(group)?;
    params.ffn.apply(&params.norm2.apply(&y)?)?.add(&y)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Initializer;

    fn params(dim: usize, heads: usize, seed: u64, std: f64) -> PafParams {
        let mut init = Initializer::new(seed, std).unwrap();
        PafParams::declare(&mut init, "paf", dim, heads).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_group_has_unit_affinity() {
        let p = params(8, 2, 1, 0.5);
        let g = random(&[1, 8], 2);
        for h in 0..2 {
            assert_eq!(interrelation(&g, &p, h).unwrap().data(), &[1.0]);
        }
        // With R = 1, Φ is the V projection pushed through U.
        let phi = adaptive_fuse(&g, &p).unwrap();
        let expected = g.matmul(&p.value).unwrap().matmul(&p.fusion).unwrap();
        for (a, b) in phi.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let p = params(8, 2, 3, 0.5);
        let row = random(&[1, 8], 4);
        let g = Tensor::concat(&[row.clone(), row.clone(), row], 0).unwrap();
        let r = interrelations(&g, &p).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn per_head_matches_all_heads() {
        let p = params(8, 2, 5, 0.5);
        let g = random(&[5, 3, 8], 6);
        let all = interrelations(&g, &p).unwrap();
        for h in 0..2 {
            let one = interrelation(&g, &p, h).unwrap();
            for grp in 0..5 {
                let a = &all.data()[(grp * 2 + h) * 9..][..9];
                let b = &one.data()[grp * 9..][..9];
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_fusion_matrix_zeroes_output() {
        let mut p = params(8, 2, 7, 0.5);
        p.fusion = Tensor::zeros(&[8, 8]);
        assert!(adaptive_fuse(&random(&[3, 8], 8), &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_reduce_block_to_identity() {
        let p = params(8, 2, 9, 0.0);
        let g = random(&[4, 3, 8], 10);
        assert_eq!(paf_block(&g, &p).unwrap().data(), g.data());
    }

    #[test]
    fn rows_sum_to_one() {
        let p = params(16, 4, 11, 1.0);
        let r = interrelations(&random(&[6, 4, 16], 12), &p).unwrap();
        for row in r.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn block_is_permutation_equivariant(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
            let p = params(8, 2, seed, 0.4);
            let g = random(&[4, 8], seed ^ 1);
            let rows: Vec<Tensor> = perm.iter().map(|&i| g.narrow(0, i, 1).unwrap()).collect();
            let pg = Tensor::concat(&rows, 0).unwrap();
            let out = paf_block(&g, &p).unwrap();
            let pout = paf_block(&pg, &p).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&pout.data()[k * 8..][..8], &out.data()[i * 8..][..8]);
            }
        }
    }
}
