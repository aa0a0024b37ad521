// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use std::cell::Cell;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{contract_err, dim_err, Result};

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes run on the current thread so far.
pub fn backward_count() -> u64 {
    BACKWARD_PASSES.with(|c| c.get())
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    TripletHard {
        f: Var,
        active: Vec<(usize, usize, usize)>,
        anchors: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ColumnSum {
        x: Var,
        src: Vec<usize>,
        groups: Vec<Vec<usize>>,
        n_in: usize,
        ops: usize,
    },
    SegmentMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
///
/// Values are computed eagerly as operations are recorded; [`Graph::backward`]
/// walks the records in reverse, so the recording order is a topological
/// order by construction. One graph is built per forward pass and dropped
/// afterwards.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `leaf`; leaves the loss does not depend on yield zeros.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.grads.get(leaf.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(leaf.0).and_then(|g| g.take())
    }

    /// All differentiable leaves with their gradients, in recording order.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn triplet_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let d2: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    d2.max(T::lit(1e-12)).sqrt()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), g))
    }

    /// `x[B×in] · wᵀ + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(dim_err!("linear input {:?} with weight {:?}", sx, sw));
        }
        let (batch, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.value(b).len() != fan_out {
                return Err(dim_err!("bias {:?} for {} outputs", self.shape(b), fan_out));
            }
        }
        let wt = kernels::transpose(self.value(w).data(), fan_out, fan_in);
        let mut out = kernels::gemm(self.value(x).data(), &wt, batch, fan_in, fan_out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out.max(1)) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&[batch, fan_out], out)?, Op::Linear { x, w, b }, g))
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(dim_err!("conv2d input {:?} with kernels {:?}", sx, sw));
        }
        let k = sw[2];
        if stride == 0 || k == 0 || k > sx[2] + 2 * pad || k > sx[3] + 2 * pad {
            return Err(dim_err!(
                "conv2d kernel {} stride {} pad {} on {}x{} input",
                k,
                stride,
                pad,
                sx[2],
                sx[3]
            ));
        }
        let out_ch = sw[0];
        if let Some(b) = b {
            if self.value(b).len() != out_ch {
                return Err(dim_err!("conv bias {:?} for {} filters", self.shape(b), out_ch));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let spatial = oh * ow;
        let plen = geom.patch_len();
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let wt = kernels::transpose(self.value(w).data(), out_ch, plen);
        let flat = kernels::gemm(&cols, &wt, geom.batch * spatial, plen, out_ch);
        let mut out = vec![T::zero(); geom.batch * out_ch * spatial];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for bi in 0..geom.batch {
            for s in 0..spatial {
                let src = &flat[(bi * spatial + s) * out_ch..(bi * spatial + s + 1) * out_ch];
                for (c, &v) in src.iter().enumerate() {
                    let bv = bias.as_ref().map_or(T::zero(), |bb| bb[c]);
                    out[(bi * out_ch + c) * spatial + s] = v + bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.any_grad(&deps);
        let value = Tensor::new(&[geom.batch, out_ch, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols: if g { cols } else { Vec::new() },
            },
            g,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{} {:?} vs {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::new(&shape, data).expect("same shape"), op, g)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let g = self.any_grad(&[x]);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| T::lit(gelu_parts(v.as_f64()).0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(contract_err!("mean of an empty tensor"));
        }
        let s = self.value(x).sum() / T::lit(n as f64);
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// `[B, C, H, W] → [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("global pool expects [B,C,H,W], got {:?}", s));
        }
        let spatial = s[2] * s[3];
        let inv = T::lit(1.0 / spatial as f64);
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[s[0], s[1]], data)?, Op::GlobalAvgPool { x, spatial }, g))
    }

    fn norm_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err!("normalization input {:?}", s));
        }
        let (batch, ch) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(dim_err!(
                "affine pair sizes {:?}/{:?} for {} features",
                self.shape(gamma),
                self.shape(beta),
                ch
            ));
        }
        Ok((batch, ch, spatial))
    }

    /// Batch normalization using batch statistics.
    ///
    /// Returns the output plus the per-channel batch mean and unbiased
    /// variance, for the caller to fold into running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (batch, ch, spatial) = self.norm_layout(x, gamma, beta)?;
        let m = batch * spatial;
        if m < 2 {
            return Err(contract_err!(
                "batch norm in train mode needs at least 2 values per channel"
            ));
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var = vec![T::zero(); ch];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                mean[c] += xv[base..base + spatial].iter().copied().sum::<T>();
            }
        }
        let mf = T::lit(m as f64);
        for v in mean.iter_mut() {
            *v /= mf;
        }
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                var[c] += xv[base..base + spatial]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / mf).collect();
        let unbiased: Vec<T> = var.iter().map(|&v| v / T::lit((m - 1) as f64)).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let out = self.normalize_channels(x, gamma, beta, &mean, &inv_std, batch, ch, spatial);
        let (value, xhat) = out;
        let g = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            g,
        );
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (batch, ch, spatial) = self.norm_layout(x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(dim_err!("running statistics for {} of {} channels", mean.len(), ch));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let (value, xhat) = self.normalize_channels(x, gamma, beta, mean, &inv_std, batch, ch, spatial);
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            g,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch: usize,
        ch: usize,
        spatial: usize,
    ) -> (Tensor<T>, Vec<T>) {
        let xv = self.value(x);
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                for i in base..base + spatial {
                    let h = (xv.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gm[c] * h + bt[c];
                }
            }
        }
        (Tensor::new(xv.shape(), out).expect("same shape"), xhat)
    }

    /// Per-sample normalization over the feature axis of `[B, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (batch, dim, spatial) = self.norm_layout(x, gamma, beta)?;
        if spatial != 1 {
            return Err(dim_err!("layer norm expects [B, D], got {:?}", self.shape(x)));
        }
        let xv = self.value(x).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); batch];
        let df = T::lit(dim as f64);
        for b in 0..batch {
            let row = &xv[b * dim..(b + 1) * dim];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let inv = (var + T::lit(eps)).sqrt().recip();
            inv_std[b] = inv;
            for d in 0..dim {
                let h = (row[d] - mu) * inv;
                xhat[b * dim + d] = h;
                out[b * dim + d] = gm[d] * h + bt[d];
            }
        }
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Mean softmax cross-entropy of `[B, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err!("logits {:?} for {} labels", s, labels.len()));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract_err!("label {} outside [0, {})", bad, classes));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for (b, &y) in labels.iter().enumerate() {
            let row = &lv[b * classes..(b + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..classes {
                probs[b * classes + c] = (row[c] - lse).exp();
            }
            total += (lse - row[y]).as_f64();
        }
        let loss = T::lit(total / labels.len() as f64);
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Batch-hard triplet loss over Euclidean distances of `[B, D]` features.
    ///
    /// Anchors without a same-label partner or without a different-label
    /// sample are left out of the mean.
    pub fn triplet_hard(&mut self, f: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let s = self.shape(f);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("features {:?} for {} labels", s, labels.len()));
        }
        let (n, dim) = (s[0], s[1]);
        let fv = self.value(f).data();
        let row = |i: usize| &fv[i * dim..(i + 1) * dim];
        let margin_t = T::lit(margin);
        let mut total = T::zero();
        let mut anchors = 0usize;
        let mut active = Vec::new();
        for a in 0..n {
            let mut hardest_pos: Option<(usize, T)> = None;
            let mut hardest_neg: Option<(usize, T)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = triplet_dist(row(a), row(j));
                if labels[j] == labels[a] {
                    if hardest_pos.is_none_or(|(_, best)| d > best) {
                        hardest_pos = Some((j, d));
                    }
                } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                    hardest_neg = Some((j, d));
                }
            }
            if let (Some((p, dp)), Some((q, dn))) = (hardest_pos, hardest_neg) {
                anchors += 1;
                let l = dp - dn + margin_t;
                if l > T::zero() {
                    total += l;
                    active.push((a, p, q));
                }
            }
        }
        if anchors == 0 {
            return Err(contract_err!(
                "no anchor in the batch has both a positive and a negative"
            ));
        }
        let loss = total / T::lit(anchors as f64);
        let g = self.any_grad(&[f]);
        Ok(self.push(Tensor::scalar(loss), Op::TripletHard { f, active, anchors }, g))
    }

    /// Row selection along the leading axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(dim_err!("gather on a scalar"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(dim_err!("row {} of {}", bad, s[0]));
        }
        let width = self.value(x).row_width();
        let data = kernels::gather_rows(self.value(x).data(), width, idx);
        let mut shape = s.clone();
        shape[0] = idx.len();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::GatherRows { x, idx: idx.to_vec() }, g))
    }

    /// Differentiable [`kernels::column_sum`] on a `[M, N_in, ops]` row block.
    pub fn column_sum(&mut self, x: Var, src: &[usize], groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("column sum expects [rows, in, ops], got {:?}", s));
        }
        let (m, n_in, ops) = (s[0], s[1], s[2]);
        if src.iter().any(|&j| j >= m) || groups.iter().flatten().any(|&d| d >= n_in) {
            return Err(dim_err!("column sum indices outside {:?}", s));
        }
        let data = kernels::column_sum(self.value(x).data(), n_in, ops, src, groups);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[src.len(), groups.len(), ops], data)?,
            Op::ColumnSum {
                x,
                src: src.to_vec(),
                groups: groups.to_vec(),
                n_in,
                ops,
            },
            g,
        ))
    }

    /// Differentiable [`kernels::segment_mean`] of a vector.
    pub fn segment_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let n = self.value(x).len();
        if groups.iter().any(|g| g.is_empty()) || groups.iter().flatten().any(|&d| d >= n) {
            return Err(dim_err!("segment mean groups invalid for length {}", n));
        }
        let data = kernels::segment_mean(self.value(x).data(), groups);
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[groups.len()], data)?,
            Op::SegmentMean {
                x,
                groups: groups.to_vec(),
            },
            g,
        ))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = self
            .nodes
            .iter()
            .map(|n| {
                matches!(n.op, Op::Leaf)
                    .then_some(())
                    .filter(|_| n.needs_grad)
                    .map(|_| Tensor::zeros(n.value.shape()))
            })
            .collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            // Leaves are visited after all their consumers.
            Op::Leaf => out[i] = Some(Tensor::new(node.value.shape(), g)?),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs_grad(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    self.acc(grads, *a, kernels::gemm(&g, &bt, m, n, k));
                }
                if self.needs_grad(*b) {
                    let at = kernels::transpose(val(*a), m, k);
                    self.acc(grads, *b, kernels::gemm(&at, &g, k, m, n));
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let batch = self.shape(*x)[0];
                if self.needs_grad(*x) {
                    self.acc(grads, *x, kernels::gemm(&g, val(*w), batch, fan_out, fan_in));
                }
                if self.needs_grad(*w) {
                    let gt = kernels::transpose(&g, batch, fan_out);
                    self.acc(grads, *w, kernels::gemm(&gt, val(*x), fan_out, batch, fan_in));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in g.chunks(fan_out.max(1)) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                cols,
            } => {
                let (oh, ow) = geom.out_hw();
                let spatial = oh * ow;
                let rows = geom.batch * spatial;
                let plen = geom.patch_len();
                let out_ch = *out_ch;
                let mut gflat = vec![T::zero(); rows * out_ch];
                for bi in 0..geom.batch {
                    for c in 0..out_ch {
                        let src = &g[(bi * out_ch + c) * spatial..(bi * out_ch + c + 1) * spatial];
                        for (s, &v) in src.iter().enumerate() {
                            gflat[(bi * spatial + s) * out_ch + c] = v;
                        }
                    }
                }
                if self.needs_grad(*w) {
                    let gt = kernels::transpose(&gflat, rows, out_ch);
                    self.acc(grads, *w, kernels::gemm(&gt, cols, out_ch, rows, plen));
                }
                if self.needs_grad(*x) {
                    let dcols = kernels::gemm(&gflat, val(*w), rows, out_ch, plen);
                    self.acc(grads, *x, kernels::col2im(&dcols, geom));
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); out_ch];
                        for row in gflat.chunks(out_ch) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let d = g.iter().zip(val(*x)).map(|(&gv, &xv)| two * xv * gv).collect();
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                self.acc(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| gv * T::lit(gelu_parts(xv.as_f64()).1))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => self.acc(grads, *x, g),
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::lit(1.0 / *spatial as f64);
                let mut d = Vec::with_capacity(g.len() * spatial);
                for &gv in &g {
                    d.extend(std::iter::repeat_n(gv * inv, *spatial));
                }
                self.acc(grads, *x, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (batch, ch) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let base = (bi * ch + c) * spatial;
                        for i in base..base + spatial {
                            dbeta[c] += g[i];
                            dgamma[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::lit((batch * spatial) as f64);
                    for bi in 0..batch {
                        for c in 0..ch {
                            let base = (bi * ch + c) * spatial;
                            for i in base..base + spatial {
                                dx[i] = if *train {
                                    gm[c] * inv_std[c] / m * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    g[i] * gm[c] * inv_std[c]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (batch, dim) = (s[0], s[1]);
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); dim];
                let mut dbeta = vec![T::zero(); dim];
                let mut dx = vec![T::zero(); g.len()];
                let df = T::lit(dim as f64);
                for bi in 0..batch {
                    let r = bi * dim..(bi + 1) * dim;
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for i in r.clone() {
                        let d = i - bi * dim;
                        dbeta[d] += g[i];
                        dgamma[d] += g[i] * xhat[i];
                        let gy = g[i] * gm[d];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat[i];
                    }
                    for i in r {
                        let gy = g[i] * gm[i - bi * dim];
                        dx[i] = inv_std[bi] / df * (df * gy - sum_gy - xhat[i] * sum_gy_xhat);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &y) in labels.iter().enumerate() {
                    d[b * classes + y] -= scale;
                }
                self.acc(grads, *logits, d);
            }
            Op::TripletHard { f, active, anchors } => {
                let dim = self.shape(*f)[1];
                let fv = val(*f);
                let row = |i: usize| &fv[i * dim..(i + 1) * dim];
                let s = g[0] / T::lit(*anchors as f64);
                let mut d = vec![T::zero(); fv.len()];
                for &(a, p, q) in active {
                    let dap = triplet_dist(row(a), row(p));
                    let daq = triplet_dist(row(a), row(q));
                    for k in 0..dim {
                        let up = (fv[a * dim + k] - fv[p * dim + k]) / dap * s;
                        let un = (fv[a * dim + k] - fv[q * dim + k]) / daq * s;
                        d[a * dim + k] += up - un;
                        d[p * dim + k] -= up;
                        d[q * dim + k] += un;
                    }
                }
                self.acc(grads, *f, d);
            }
            Op::GatherRows { x, idx } => {
                let width = self.value(*x).row_width();
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (i, &r) in idx.iter().enumerate() {
                    for k in 0..width {
                        d[r * width + k] += g[i * width + k];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ColumnSum {
                x,
                src,
                groups,
                n_in,
                ops,
            } => {
                let (n_in, ops) = (*n_in, *ops);
                let c_in = groups.len();
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (i, &j) in src.iter().enumerate() {
                    for (gi, group) in groups.iter().enumerate() {
                        let gsrc = &g[(i * c_in + gi) * ops..(i * c_in + gi + 1) * ops];
                        for &col in group {
                            let dst = &mut d[(j * n_in + col) * ops..(j * n_in + col + 1) * ops];
                            for (dv, &gv) in dst.iter_mut().zip(gsrc) {
                                *dv += gv;
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::SegmentMean { x, groups } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (gv, group) in g.iter().zip(groups) {
                    let share = *gv / T::lit(group.len() as f64);
                    for &k in group {
                        d[k] += share;
                    }
                }
                self.acc(grads, *x, d);
            }
        }
        Ok(())
    }
}
