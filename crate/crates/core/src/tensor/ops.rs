use super::gemm::{gemm, Strided};
use super::{strides, GradSink, Op, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Offsets of each broadcast batch entry into `a`, `b` and the output.
struct BatchPlan {
    batch_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize], a_mat: usize, b_mat: usize) -> Option<BatchPlan> {
    let rank = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut batch_shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return None;
        }
        batch_shape.push(x.max(y));
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = batch_shape.iter().product();
    let mut a_offsets = Vec::with_capacity(total);
    let mut b_offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            if pa[d] != 1 {
                oa += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ob += idx[d] * sb[d];
            }
        }
        a_offsets.push(oa * a_mat);
        b_offsets.push(ob * b_mat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(BatchPlan {
        batch_shape,
        a_offsets,
        b_offsets,
    })
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, BatchPlan)> {
    let err = || {
        Error::Dimension(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ))
    };
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err());
    }
    let (sa, sb) = (a.shape(), b.shape());
    let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if q != q2 {
        return Err(err());
    }
    let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2], p * q, q * r).ok_or_else(err)?;
    Ok((p, q, r, plan))
}

/// Index map for a permutation: `out[i] = input[map[i]]`.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sum in ascending total order: the result depends only on the multiset of
/// terms, not on their arrangement.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Geometry of a depthwise 3D convolution over `[batch.., T, H, W, C]`.
struct ConvGeom {
    batch: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(x: &[usize], k: &[usize]) -> Result<ConvGeom> {
        if k.len() != 4 || x.len() < 4 {
            return Err(Error::Dimension(format!(
                "depthwise_conv3d: input {x:?} must be [.., T, H, W, C] and kernel {k:?} must be [kt, kh, kw, C]"
            )));
        }
        if k.iter().take(3).any(|e| e % 2 == 0) {
            return Err(Error::Config(format!(
                "depthwise_conv3d: kernel extents {:?} must be odd",
                &k[..3]
            )));
        }
        let n = x.len();
        if x[n - 1] != k[3] {
            return Err(Error::Dimension(format!(
                "depthwise_conv3d: input channels {} vs kernel channels {}",
                x[n - 1],
                k[3]
            )));
        }
        Ok(ConvGeom {
            batch: x[..n - 4].iter().product(),
            t: x[n - 4],
            h: x[n - 3],
            w: x[n - 2],
            c: x[n - 1],
            kt: k[0],
            kh: k[1],
            kw: k[2],
        })
    }

    /// Calls `f(out_offset, in_offset, kernel_offset)` for every valid tap, each
    /// addressing a run of `c` channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let frame = self.t * self.h * self.w * self.c;
        for b in 0..self.batch {
            for t in 0..self.t {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let out = b * frame + ((t * self.h + y) * self.w + x) * self.c;
                        for a in 0..self.kt {
                            let Some(tt) = (t + a).checked_sub(pt).filter(|&v| v < self.t) else {
                                continue;
                            };
                            for i in 0..self.kh {
                                let Some(yy) = (y + i).checked_sub(ph).filter(|&v| v < self.h) else {
                                    continue;
                                };
                                for j in 0..self.kw {
                                    let Some(xx) = (x + j).checked_sub(pw).filter(|&v| v < self.w) else {
                                        continue;
                                    };
                                    let inp = b * frame + ((tt * self.h + yy) * self.w + xx) * self.c;
                                    let ker = ((a * self.kh + i) * self.kw + j) * self.c;
                                    f(out, inp, ker);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]`; leading
    /// batch extents broadcast.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (p, q, r, plan) = matmul_dims(self, b)?;
        let mut out = vec![0.0; plan.a_offsets.len() * p * r];
        for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
            gemm(
                &self.data()[oa..],
                Strided::dense(p, q),
                &b.data()[ob..],
                Strided::dense(q, r),
                &mut out[i * p * r..],
                Strided::dense(p, r),
                0.0,
            );
        }
        let mut shape = plan.batch_shape;
        shape.extend([p, r]);
        let track = self.requires_grad() || b.requires_grad();
        Ok(Tensor::derived(shape, out, Op::MatMul { a: self.clone(), b: b.clone() }, track))
    }

    /// Batched `[.., q, k] x [.., k, v] -> [.., q, v]` without broadcasting,
    /// with every contraction over `k` summed in canonical order. Permuting the
    /// `k` axis of both operands leaves the result bitwise unchanged.
    pub fn attend(&self, values: &Tensor) -> Result<Tensor> {
        let (q, k, v, plan) = matmul_dims(self, values)?;
        if self.shape()[..self.ndim() - 2] != values.shape()[..values.ndim() - 2] {
            return Err(Error::Dimension(format!(
                "attend: batch extents of {:?} and {:?} differ",
                self.shape(),
                values.shape()
            )));
        }
        let (w, x) = (self.data(), values.data());
        let mut out = Vec::with_capacity(plan.a_offsets.len() * q * v);
        let mut terms = vec![0.0; k];
        for (&ow, &ox) in plan.a_offsets.iter().zip(&plan.b_offsets) {
            for i in 0..q {
                for j in 0..v {
                    for (t, term) in terms.iter_mut().enumerate() {
                        *term = w[ow + i * k + t] * x[ox + t * v + j];
                    }
                    out.push(canonical_sum(&mut terms));
                }
            }
        }
        let mut shape = plan.batch_shape;
        shape.extend([q, v]);
        let track = self.requires_grad() || values.requires_grad();
        let op = Op::MatMul {
            a: self.clone(),
            b: values.clone(),
        };
        Ok(Tensor::derived(shape, out, op, track))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let track = self.requires_grad() || other.requires_grad();
        Ok(Tensor::derived(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone()), track))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let track = self.requires_grad() || other.requires_grad();
        Ok(Tensor::derived(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone()), track))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let track = self.requires_grad() || other.requires_grad();
        Ok(Tensor::derived(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone()), track))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * factor).collect();
        Tensor::derived(self.shape().to_vec(), data, Op::Scale(self.clone(), factor), self.requires_grad())
    }

    /// Adds a `[D]` vector to every last-axis slice of a `[.., D]` tensor.
    pub fn add_lastdim(&self, v: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if v.shape() != [d] {
            return Err(Error::Dimension(format!(
                "add_lastdim: {:?} vs vector {:?}",
                self.shape(),
                v.shape()
            )));
        }
        let data = self
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(v.data()).map(|(a, b)| a + b))
            .collect();
        let track = self.requires_grad() || v.requires_grad();
        Ok(Tensor::derived(self.shape().to_vec(), data, Op::AddLastDim(self.clone(), v.clone()), track))
    }

    /// Softmax over the last axis, shifted by each slice's maximum.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_lastdim: non-finite input".into()));
        }
        let d = *self.shape().last().unwrap();
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - max).exp()));
            let sum = canonical_sum(&mut out[start..].to_vec());
            out[start..].iter_mut().for_each(|v| *v /= sum);
        }
        Ok(Tensor::derived(self.shape().to_vec(), out, Op::Softmax(self.clone()), self.requires_grad()))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut normalized = Vec::with_capacity(self.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (i, v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normalized.push(n);
                out.push(n * gain.data()[i] + bias.data()[i]);
            }
        }
        let track = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let op = Op::LayerNorm {
            x: self.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            normalized,
            inv_std,
        };
        Ok(Tensor::derived(self.shape().to_vec(), out, op, track))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::derived(self.shape().to_vec(), data, Op::Gelu(self.clone()), self.requires_grad())
    }

    /// Depthwise 3D convolution over `[.., T, H, W, C]` with a `[kt, kh, kw, C]`
    /// kernel and zero padding that preserves the grid.
    pub fn depthwise_conv3d(&self, kernel: &Tensor) -> Result<Tensor> {
        let g = ConvGeom::new(self.shape(), kernel.shape())?;
        let (x, k) = (self.data(), kernel.data());
        let mut out = vec![0.0; self.numel()];
        g.for_each_tap(|o, i, kk| {
            for c in 0..g.c {
                out[o + c] += x[i + c] * k[kk + c];
            }
        });
        let track = self.requires_grad() || kernel.requires_grad();
        let op = Op::DepthwiseConv3d {
            x: self.clone(),
            kernel: kernel.clone(),
        };
        Ok(Tensor::derived(self.shape().to_vec(), out, op, track))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape: {:?} cannot become {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::derived(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.ndim()];
        if axes.len() != self.ndim() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!(
                "permute: {axes:?} is not a permutation of the axes of {:?}",
                self.shape()
            )));
        }
        let map = permute_map(self.shape(), axes);
        let data = map.iter().map(|&i| self.data()[i]).collect();
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        let op = Op::Permute {
            x: self.clone(),
            axes: axes.to_vec(),
        };
        Ok(Tensor::derived(shape, data, op, self.requires_grad()))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::Dimension(format!("transpose_last2: shape {:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no inputs".into()))?;
        if axis >= first.ndim() {
            return Err(Error::Dimension(format!("concat: axis {axis} out of range for {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension(format!(
                    "concat: {:?} does not match {:?} off axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, inner) = outer_inner(first.shape(), axis);
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let track = parts.iter().any(Tensor::requires_grad);
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(Tensor::derived(shape, data, op, track))
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::Dimension(format!(
                "narrow: range {start}..{} on axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let extent = self.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let op = Op::Narrow {
            x: self.clone(),
            axis,
            start,
        };
        Ok(Tensor::derived(shape, data, op, self.requires_grad()))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::derived(vec![1], vec![s], Op::Sum(self.clone()), self.requires_grad())
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() || self.ndim() < 2 {
            return Err(Error::Dimension(format!("mean_axis: axis {axis} of {:?}", self.shape())));
        }
        let (outer, inner) = outer_inner(self.shape(), axis);
        let extent = self.shape()[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                let src = &self.data()[(o * extent + j) * inner..][..inner];
                data[o * inner..][..inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        data.iter_mut().for_each(|d| *d /= extent as f64);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let op = Op::MeanAxis { x: self.clone(), axis };
        Ok(Tensor::derived(shape, data, op, self.requires_grad()))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        let c = self.numel();
        if target >= c {
            return Err(Error::Contract(format!("cross_entropy: target {target} with {c} classes")));
        }
        let max = self.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + max - self.data()[target];
        let probs = exps.iter().map(|e| e / z).collect();
        let op = Op::CrossEntropy {
            logits: self.clone(),
            target,
            probs,
        };
        Ok(Tensor::derived(vec![1], vec![loss], op, self.requires_grad()))
    }
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddLastDim(a, b) => vec![a, b],
            Op::Scale(x, _) | Op::Softmax(x) | Op::Gelu(x) | Op::Reshape(x) | Op::Sum(x) => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::DepthwiseConv3d { x, kernel } => vec![x, kernel],
            Op::Permute { x, .. } | Op::Narrow { x, .. } | Op::MeanAxis { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Pushes `d(loss)/d(input)` contributions given `g = d(loss)/d(out)`.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        match self {
            Op::MatMul { a, b } => {
                let (p, q, r, plan) = matmul_dims(a, b).expect("shapes validated in forward");
                for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                    let gi = &g[i * p * r..];
                    sink.with(a, |ga| {
                        gemm(gi, Strided::dense(p, r), &b.data()[ob..], Strided::dense(q, r).t(), &mut ga[oa..], Strided::dense(p, q), 1.0)
                    });
                    sink.with(b, |gb| {
                        gemm(&a.data()[oa..], Strided::dense(p, q).t(), gi, Strided::dense(p, r), &mut gb[ob..], Strided::dense(q, r), 1.0)
                    });
                }
            }
            Op::Add(a, b) => {
                sink.with(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                sink.with(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                sink.with(a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                sink.with(b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                sink.with(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(b.data()) {
                        *x += y * v;
                    }
                });
                sink.with(b, |gb| {
                    for ((x, y), v) in gb.iter_mut().zip(g).zip(a.data()) {
                        *x += y * v;
                    }
                });
            }
            Op::Scale(x, factor) => sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor)),
            Op::AddLastDim(x, v) => {
                sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let d = v.numel();
                sink.with(v, |gv| {
                    for row in g.chunks_exact(d) {
                        gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *x.shape().last().unwrap();
                sink.with(x, |gx| {
                    for ((gx, gy), y) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.data().chunks_exact(d)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            gx[i] += y[i] * (gy[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = gain.numel();
                sink.with(gain, |gg| {
                    for (gy, n) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for i in 0..d {
                            gg[i] += gy[i] * n[i];
                        }
                    }
                });
                sink.with(bias, |gb| {
                    for gy in g.chunks_exact(d) {
                        gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                });
                sink.with(x, |gx| {
                    let w = gain.data();
                    let mut dn = vec![0.0; d];
                    for (((gx, gy), n), is) in gx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(normalized.chunks_exact(d))
                        .zip(inv_std)
                    {
                        for i in 0..d {
                            dn[i] = gy[i] * w[i];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[i] += is * (dn[i] - mean_dn - n[i] * mean_dn_n);
                        }
                    }
                });
            }
            Op::Gelu(x) => sink.with(x, |gx| {
                for ((a, b), v) in gx.iter_mut().zip(g).zip(x.data()) {
                    *a += b * gelu_deriv(*v);
                }
            }),
            Op::DepthwiseConv3d { x, kernel } => {
                let geom = ConvGeom::new(x.shape(), kernel.shape()).expect("validated in forward");
                let c = geom.c;
                sink.with(x, |gx| {
                    let k = kernel.data();
                    geom.for_each_tap(|o, i, kk| {
                        for ch in 0..c {
                            gx[i + ch] += g[o + ch] * k[kk + ch];
                        }
                    });
                });
                sink.with(kernel, |gk| {
                    let xd = x.data();
                    geom.for_each_tap(|o, i, kk| {
                        for ch in 0..c {
                            gk[kk + ch] += g[o + ch] * xd[i + ch];
                        }
                    });
                });
            }
            Op::Reshape(x) => sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Permute { x, axes } => {
                let map = permute_map(x.shape(), axes);
                sink.with(x, |gx| {
                    for (&src, gy) in map.iter().zip(g) {
                        gx[src] += gy;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let row = out.shape()[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let block = p.shape()[*axis] * inner;
                    sink.with(p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + start..][..block];
                            gp[o * block..][..block].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    start += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let extent = x.shape()[*axis];
                let len = out.shape()[*axis];
                sink.with(x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * extent + start) * inner..][..len * inner];
                        dst.iter_mut().zip(&g[o * len * inner..]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sum(x) => sink.with(x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::MeanAxis { x, axis } => {
                let (outer, inner) = outer_inner(x.shape(), *axis);
                let extent = x.shape()[*axis];
                let w = 1.0 / extent as f64;
                sink.with(x, |gx| {
                    for o in 0..outer {
                        for j in 0..extent {
                            let dst = &mut gx[(o * extent + j) * inner..][..inner];
                            dst.iter_mut().zip(&g[o * inner..]).for_each(|(a, b)| *a += b * w);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, target, probs } => sink.with(logits, |gl| {
                for (i, (a, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    *a += g[0] * (p - onehot);
                }
            }),
        }
    }
}
