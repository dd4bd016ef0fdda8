#![allow(dead_code)]

use multifuser::config::RunConfig;
use multifuser::data::{ClipDims, SyntheticClip};

pub const LN_EPS: f64 = 1e-5;

/// Row-major matrix `[rows, cols]`.
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, v: Vec<f64>) -> Mat {
        assert_eq!(v.len(), rows * cols);
        Mat { rows, cols, v }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.cols + c]
    }
}

pub struct PafWeights {
    pub heads: usize,
    pub g1: Vec<f64>,
    pub b1: Vec<f64>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub u: Mat,
    pub g2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w1: Mat,
    pub c1: Vec<f64>,
    pub w2: Mat,
    pub c2: Vec<f64>,
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x · W[:, lo..hi]`.
fn project(x: &[f64], w: &Mat, lo: usize, hi: usize) -> Vec<f64> {
    (lo..hi).map(|c| (0..w.rows).map(|r| x[r] * w.at(r, c)).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One PAF block on a single `[M, D]` group, written as plain loops.
pub fn paf_oracle(group: &[Vec<f64>], w: &PafWeights) -> Vec<Vec<f64>> {
    let m = group.len();
    let d = group[0].len();
    let dh = d / w.heads;
    let normed: Vec<Vec<f64>> = group.iter().map(|b| layer_norm(b, &w.g1, &w.b1)).collect();
    let mut concat = vec![vec![0.0; d]; m];
    for n in 0..w.heads {
        let (lo, hi) = (n * dh, (n + 1) * dh);
        let q: Vec<Vec<f64>> = normed.iter().map(|x| project(x, &w.q, lo, hi)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| project(x, &w.k, lo, hi)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| project(x, &w.v, lo, hi)).collect();
        for i in 0..m {
            let s: Vec<f64> = (0..m).map(|t| dot(&q[i], &k[t])).collect();
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..dh {
                concat[i][lo + j] = (0..m).map(|t| e[t] / z * v[t][j]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let fused = project(&concat[i], &w.u, 0, d);
        let y: Vec<f64> = fused.iter().zip(&group[i]).map(|(a, b)| a + b).collect();
        let z = layer_norm(&y, &w.g2, &w.b2);
        let h: Vec<f64> = project(&z, &w.w1, 0, w.w1.cols)
            .iter()
            .zip(&w.c1)
            .map(|(a, b)| gelu(a + b))
            .collect();
        let f = project(&h, &w.w2, 0, d);
        out.push((0..d).map(|j| f[j] + w.c2[j] + y[j]).collect());
    }
    out
}

/// Blob centroid `(x, y)` of frame `t` of modality `m`, channel 0.
pub fn centroid(clip: &SyntheticClip, m: usize, t: usize) -> (f64, f64) {
    let d = clip.dims;
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..d.height {
        for x in 0..d.width {
            let p = clip.pixels[d.offset(m, t, y, x, 0)];
            sx += p * x as f64;
            sy += p * y as f64;
            s += p;
        }
    }
    (sx / s, sy / s)
}

/// Horizontal drift decoder: rightward motion reads as 1.
pub fn decode_drift(clip: &SyntheticClip, m: usize) -> usize {
    let last = clip.dims.frames - 1;
    usize::from(centroid(clip, m, last).0 > centroid(clip, m, 0).0)
}

/// Peak level of modality `m` over all frames.
pub fn peak(clip: &SyntheticClip, m: usize) -> f64 {
    let d = clip.dims;
    let per = d.numel() / d.modalities;
    clip.pixels[m * per..(m + 1) * per].iter().cloned().fold(0.0, f64::max)
}

/// Bright-vs-dim decoder for a modality rendered at `contrast`.
pub fn decode_intensity(clip: &SyntheticClip, m: usize, contrast: f64) -> usize {
    usize::from(peak(clip, m) > 0.75 * contrast)
}

pub fn dims(m: usize, t: usize, hw: usize) -> ClipDims {
    ClipDims {
        modalities: m,
        frames: t,
        height: hw,
        width: hw,
        channels: 1,
    }
}

/// A small run used by the CLI and reproducibility checks.
pub fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    let m = &mut run.model;
    m.modalities = 2;
    m.frames = 2;
    m.height = 16;
    m.width = 16;
    m.channels = 1;
    m.dim = 8;
    m.heads = 2;
    m.layers = 2;
    m.synth_layers = 1;
    run.data.train_samples = 12;
    run.data.eval_samples = 6;
    run.train.epochs = 3;
    run.train.batch_size = 4;
    run.train.learning_rate = 1e-3;
    run
}

fn mat(t: &multifuser::Tensor) -> Mat {
    let s = t.shape();
    Mat::new(s[0], s[1], t.to_vec())
}

pub fn paf_weights(p: &multifuser::paf::PafParams) -> PafWeights {
    PafWeights {
        heads: p.heads,
        g1: p.norm1.gain.to_vec(),
        b1: p.norm1.bias.to_vec(),
        q: mat(&p.query),
        k: mat(&p.key),
        v: mat(&p.value),
        u: mat(&p.fusion),
        g2: p.norm2.gain.to_vec(),
        b2: p.norm2.bias.to_vec(),
        w1: mat(&p.ffn.w1),
        c1: p.ffn.b1.to_vec(),
        w2: mat(&p.ffn.w2),
        c2: p.ffn.b2.to_vec(),
    }
}

/// Largest absolute gap between `paf_block` and [`paf_oracle`] over `cases`
/// random groups with `M <= 4` and `D <= 16`.
pub fn paf_oracle_gap(cases: usize, seed: u64) -> f64 {
    use multifuser::paf::{paf_block, PafParams};
    use multifuser::params::Initializer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let m = rng.random_range(1..=4usize);
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=16 / heads);
        let mut init = Initializer::new(seed.wrapping_add(case as u64), 0.4).unwrap();
        let mut p = PafParams::declare(&mut init, "paf", d, heads).unwrap();
        // Move norms and biases off their defaults so every term is exercised.
        for t in [&mut p.norm1.gain, &mut p.norm1.bias, &mut p.norm2.gain, &mut p.norm2.bias, &mut p.ffn.b1, &mut p.ffn.b2] {
            let shape = t.shape().to_vec();
            let v = t.to_vec().iter().map(|x| x + rng.random_range(-0.5..0.5)).collect();
            *t = multifuser::Tensor::new(&shape, v).unwrap();
        }
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let x = multifuser::Tensor::new(&[m, d], rows.concat()).unwrap();
        let fast = paf_block(&x, &p).unwrap().to_vec();
        let slow = paf_oracle(&rows, &paf_weights(&p)).concat();
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
