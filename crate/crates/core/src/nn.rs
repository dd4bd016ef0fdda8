//! Building blocks shared by the fusion, integration and ViT blocks.

use crate::error::Result;
use crate::params::{Init, ParamSource};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// FFN hidden width as a multiple of the embedding width.
pub const FFN_RATIO: usize = 4;

pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gain: src.take(&format!("{prefix}.gain"), &[dim], Init::Ones)?,
            bias: src.take(&format!("{prefix}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }

    pub fn numel(dim: usize) -> usize {
        2 * dim
    }
}

/// Two-layer perceptron `D -> 4D -> D` with GELU.
pub struct Ffn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Ffn {
    pub fn declare(src: &mut impl ParamSource, prefix: &str, dim: usize) -> Result<Ffn> {
        let hidden = FFN_RATIO * dim;
        Ok(Ffn {
            w1: src.take(&format!("{prefix}.w1"), &[dim, hidden], Init::Normal)?,
            b1: src.take(&format!("{prefix}.b1"), &[hidden], Init::Zeros)?,
            w2: src.take(&format!("{prefix}.w2"), &[hidden, dim], Init::Normal)?,
            b2: src.take(&format!("{prefix}.b2"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add_lastdim(&self.b1)?.gelu();
        h.matmul(&self.w2)?.add_lastdim(&self.b2)
    }

    pub fn numel(dim: usize) -> usize {
        let hidden = FFN_RATIO * dim;
        2 * dim * hidden + hidden + dim
    }
}

/// `[.., L, D] -> [.., H, L, D/H]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let shape = x.shape();
    let n = shape.len();
    let (l, d) = (shape[n - 2], shape[n - 1]);
    let mut split = shape[..n - 2].to_vec();
    split.extend([l, heads, d / heads]);
    let mut axes: Vec<usize> = (0..n + 1).collect();
    axes.swap(n - 2, n - 1);
    x.reshape(&split)?.permute(&axes)
}

/// `[.., H, L, dh] -> [.., L, H·dh]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let n = shape.len();
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 3, n - 2);
    let mut merged = shape[..n - 3].to_vec();
    merged.extend([shape[n - 2], shape[n - 3] * shape[n - 1]]);
    x.permute(&axes)?.reshape(&merged)
}
