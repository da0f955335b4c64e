//! A small tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of that scalar with respect to every node that was
//! created with `requires_grad` (directly or through its inputs).
//!
//! The operation set is exactly what the re-identification model needs:
//! strided convolutions, group normalization, pooling, per-row spatial
//! statistics, statistic recomposition, linear classifiers and the losses.
//! Everything runs in `f64` on one thread, so two runs over the same inputs
//! produce the same bits.

mod conv;
pub(crate) mod gemm;

use crate::tensor::Tensor;
use conv::ConvGeom;
use gemm::{gemm, MatRef};
use serde::{Deserialize, Serialize};

const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Global spatial pooling flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Avg,
    Max,
}

enum Op {
    Leaf,
    BatchNorm {
        inv_std: Vec<f64>,
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    GlobalPool {
        x: Var,
        kind: Pooling,
        argmax: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SpatialMean {
        x: Var,
    },
    SpatialStd {
        x: Var,
        mean: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    AdaIn {
        x: Var,
        mu_r: Var,
        sig_r: Var,
        mu_d: Var,
        sig_d: Var,
        floor: f64,
    },
    MatMulNT {
        a: Var,
        b: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LinComb {
        a: Var,
        b: Var,
        alpha: f64,
        beta: f64,
    },
    SoftmaxCe {
        logits: Var,
        targets: Tensor,
        probs: Vec<f64>,
    },
    Triplet {
        x: Var,
        /// (anchor, positive, negative, positive distance, negative distance)
        active: Vec<(usize, usize, usize, f64, f64)>,
        count: usize,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Reshape {
        x: Var,
    },
    SelectRows {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled to `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// 2-D convolution of `x` `(N, C, H, W)` with `w` `(O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
        assert_eq!(kh, kw, "conv2d: only square kernels are supported");
        let geom = ConvGeom::new(n, c, h, wd, o, kh, stride, pad);
        let cols = conv::im2col(self.value(x).data(), &geom);
        let np = n * geom.positions();
        let mut out_mat = vec![0.0; o * np];
        gemm(
            o,
            geom.patch_len(),
            np,
            MatRef::row_major(self.value(w).data(), geom.patch_len()),
            MatRef::row_major(&cols, np),
            0.0,
            &mut out_mat,
        );
        let p = geom.positions();
        let mut out = vec![0.0; n * o * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bv = bias.as_ref().map_or(0.0, |b| b[oc]);
            for bi in 0..n {
                let src = &out_mat[oc * np + bi * p..oc * np + (bi + 1) * p];
                let dst = &mut out[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let value = Tensor::from_vec(vec![n, o, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let per = c / groups * h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for gi in 0..n * groups {
            let chunk = &xs[gi * per..(gi + 1) * per];
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (t, &v) in chunk.iter().enumerate() {
                let idx = gi * per + t;
                let ch = (idx / (h * w)) % c;
                let xh = (v - mean) * inv;
                xhat[idx] = xh;
                out[idx] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::from_vec(vec![n, c, h, w], out);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Global spatial pooling `(N, C, H, W) -> (N, C)`.
    pub fn global_pool(&mut self, x: Var, kind: Pooling) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut argmax = Vec::new();
        for (i, o) in out.iter_mut().enumerate() {
            let chunk = &xs[i * hw..(i + 1) * hw];
            match kind {
                Pooling::Avg => *o = chunk.iter().sum::<f64>() / hw as f64,
                Pooling::Max => {
                    let mut best = 0;
                    for (t, &v) in chunk.iter().enumerate() {
                        if v > chunk[best] {
                            best = t;
                        }
                    }
                    *o = chunk[best];
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c], out);
        self.push(value, Op::GlobalPool { x, kind, argmax }, &[x])
    }

    /// Rows `start..end` of the height axis of a rank-4 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(start < end && end <= h, "slice_rows: bad range {start}..{end} for height {h}");
        let xs = self.value(x).data();
        let rows = end - start;
        let mut out = Vec::with_capacity(n * c * rows * w);
        for plane in 0..n * c {
            let base = plane * h * w;
            out.extend_from_slice(&xs[base + start * w..base + end * w]);
        }
        let value = Tensor::from_vec(vec![n, c, rows, w], out);
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    /// Concatenation along the height axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, c, _, w) = self.value(parts[0]).dims4();
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, pc, pw), (n, c, w), "concat_rows: incompatible part shapes");
            total += ph;
        }
        let mut out = Vec::with_capacity(n * c * total * w);
        for plane in 0..n * c {
            for &p in parts {
                let (_, _, ph, _) = self.value(p).dims4();
                let d = self.value(p).data();
                out.extend_from_slice(&d[plane * ph * w..(plane + 1) * ph * w]);
            }
        }
        let value = Tensor::from_vec(vec![n, c, total, w], out);
        self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Per-channel spatial mean `(N, C, H, W) -> (N, C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::from_vec(vec![n, c], out);
        self.push(value, Op::SpatialMean { x }, &[x])
    }

    /// Per-channel spatial population standard deviation `(N, C, H, W) -> (N, C)`.
    pub fn spatial_std(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let mut mean = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for ch in self.value(x).data().chunks(h * w) {
            let m = ch.iter().sum::<f64>() / hw;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
            mean.push(m);
            out.push(var.sqrt());
        }
        let value = Tensor::from_vec(vec![n, c], out);
        self.push(value, Op::SpatialStd { x, mean }, &[x])
    }

    /// Selects entries of the leading axis: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let shape = self.value(x).shape().to_vec();
        let row: usize = shape[1..].iter().product();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            assert!(i < shape[0], "gather: index {i} out of range {}", shape[0]);
            out.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let value = Tensor::from_vec(new_shape, out);
        self.push(value, Op::Gather { x, index: index.to_vec() }, &[x])
    }

    /// Replaces the per-channel statistics of `x` `(N, C, H, W)`:
    /// `sig_d * (x - mu_r) / max(sig_r, floor) + mu_d`, statistics `(N, C)`.
    pub fn adain(&mut self, x: Var, mu_r: Var, sig_r: Var, mu_d: Var, sig_d: Var, floor: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        for s in [mu_r, sig_r, mu_d, sig_d] {
            assert_eq!(self.value(s).shape(), &[n, c], "adain: statistic shape mismatch");
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let (mr, sr) = (self.value(mu_r).data(), self.value(sig_r).data());
        let (md, sd) = (self.value(mu_d).data(), self.value(sig_d).data());
        let mut out = vec![0.0; xs.len()];
        for i in 0..n * c {
            let scale = sd[i] / sr[i].max(floor);
            for t in i * hw..(i + 1) * hw {
                out[t] = scale * (xs[t] - mr[i]) + md[i];
            }
        }
        let value = Tensor::from_vec(vec![n, c, h, w], out);
        self.push(
            value,
            Op::AdaIn {
                x,
                mu_r,
                sig_r,
                mu_d,
                sig_d,
                floor,
            },
            &[x, mu_r, sig_r, mu_d, sig_d],
        )
    }

    /// `a (N, C) * b (K, C)^T -> (N, K)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, c) = self.value(a).dims2();
        let (k, bc) = self.value(b).dims2();
        assert_eq!(c, bc, "matmul_nt: inner dimensions {c} and {bc} differ");
        let mut out = vec![0.0; n * k];
        gemm(
            n,
            c,
            k,
            MatRef::row_major(self.value(a).data(), c),
            MatRef::transposed(self.value(b).data(), c),
            0.0,
            &mut out,
        );
        let value = Tensor::from_vec(vec![n, k], out);
        self.push(value, Op::MatMulNT { a, b }, &[a, b])
    }

    /// L2-normalizes every row of a rank-2 tensor.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let value = Tensor::from_vec(vec![n, c], out);
        self.push(value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Standardizes every column of `(N, C)` over the batch, without affine
    /// parameters.
    pub fn batch_norm(&mut self, x: Var) -> Var {
        let (n, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut inv_std = Vec::with_capacity(c);
        for j in 0..c {
            let mean = (0..n).map(|i| xs[i * c + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (xs[i * c + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            for i in 0..n {
                out[i * c + j] = (xs[i * c + j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_vec(vec![n, c], out);
        self.push(value, Op::BatchNorm { inv_std, x }, &[x])
    }

    /// `alpha * a + beta * b` for same-shaped inputs.
    pub fn lincomb(&mut self, a: Var, b: Var, alpha: f64, beta: f64) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "lincomb: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        self.push(value, Op::LinComb { a, b, alpha, beta }, &[a, b])
    }

    /// Row-wise choice along the leading axis: `out[i] = if take_a[i] { a[i] } else { b[i] }`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape, self.value(b).shape(), "select_rows: shape mismatch");
        assert_eq!(take_a.len(), shape[0], "select_rows: mask length");
        let row: usize = shape[1..].iter().product();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len());
        for (i, &t) in take_a.iter().enumerate() {
            let src = if t { xa } else { xb };
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let value = Tensor::from_vec(shape, out);
        self.push(value, Op::SelectRows { a, b, take_a: take_a.to_vec() }, &[a, b])
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, Op::Reshape { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let zero = self.constant(Tensor::zeros(self.value(x).shape().to_vec()));
        self.lincomb(x, zero, s, 0.0)
    }

    /// Mean over rows of `-sum_k targets[k] * log softmax(logits)[k]`.
    ///
    /// `targets` is a dense `(N, K)` distribution per row (one-hot, smoothed
    /// or mixed).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(targets.shape(), &[n, k], "softmax_cross_entropy: target shape mismatch");
        let ls = self.value(logits).data();
        let ts = targets.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ls[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let mut row_loss = 0.0;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
                let t = ts[i * k + j];
                if t != 0.0 {
                    row_loss -= t * (row[j] - lse);
                }
            }
            loss += row_loss;
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(value, Op::SoftmaxCe { logits, targets, probs }, &[logits])
    }

    /// Batch-hard triplet loss with Euclidean distances.
    ///
    /// For each anchor the farthest same-label sample (the anchor itself when
    /// it is alone) and the closest other-label sample are selected; the
    /// hinge `max(0, d_pos - d_neg + margin)` is averaged over anchors that
    /// have at least one negative.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: f64) -> Var {
        let (n, c) = self.value(x).dims2();
        assert_eq!(labels.len(), n);
        let xs = self.value(x).data();
        let dist = |i: usize, j: usize| -> f64 {
            let (a, b) = (&xs[i * c..(i + 1) * c], &xs[j * c..(j + 1) * c]);
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        let mut total = 0.0;
        let mut count = 0;
        let mut active = Vec::new();
        for i in 0..n {
            let mut pos = (i, 0.0);
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = dist(i, j);
                if labels[j] == labels[i] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if neg.is_none_or(|(_, nd)| d < nd) {
                    neg = Some((j, d));
                }
            }
            let Some(neg) = neg else { continue };
            count += 1;
            let h = pos.1 - neg.1 + margin;
            if h > 0.0 {
                total += h;
                active.push((i, pos.0, neg.0, pos.1, neg.1));
            }
        }
        let value = Tensor::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        self.push(value, Op::Triplet { x, active, count }, &[x])
    }

    /// `sum_i coef_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, coef) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum: terms must be scalars");
            total += coef * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, &inputs)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let (n, o, p) = (geom.n, geom.out_c, geom.positions());
                let np = n * p;
                // dy (N, O, P) -> (O, N*P)
                let mut dmat = vec![0.0; o * np];
                for bi in 0..n {
                    for oc in 0..o {
                        let src = &dy[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                        dmat[oc * np + bi * p..oc * np + (bi + 1) * p].copy_from_slice(src);
                    }
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db: Vec<f64> = dmat.chunks(np).map(|r| r.iter().sum()).collect();
                    accumulate(grads, b, vec![o], &db);
                }
                let k = geom.patch_len();
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * k];
                    gemm(o, np, k, MatRef::row_major(&dmat, np), MatRef::transposed(cols, np), 0.0, &mut dw);
                    accumulate(grads, *w, self.value(*w).shape().to_vec(), &dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; k * np];
                    gemm(
                        k,
                        o,
                        np,
                        MatRef::transposed(self.value(*w).data(), k),
                        MatRef::row_major(&dmat, np),
                        0.0,
                        &mut dcols,
                    );
                    let dx = conv::col2im(&dcols, geom);
                    accumulate(grads, *x, self.value(*x).shape().to_vec(), &dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let g = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, (&d, &xh)) in dy.iter().zip(xhat).enumerate() {
                        let ch = (idx / hw) % c;
                        dg[ch] += d * xh;
                        db[ch] += d;
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, vec![c], &dg);
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, vec![c], &db);
                    }
                }
                if self.wants(*x) {
                    let per = c / groups * hw;
                    let mut dx = vec![0.0; dy.len()];
                    for (gi, &inv) in inv_std.iter().enumerate().take(n * groups) {
                        let range = gi * per..(gi + 1) * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for idx in range.clone() {
                            let dxh = dy[idx] * g[(idx / hw) % c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[idx];
                        }
                        let m = per as f64;
                        for idx in range {
                            let dxh = dy[idx] * g[(idx / hw) % c];
                            dx[idx] = inv / m * (m * dxh - sum_d - xhat[idx] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, vec![n, c, h, w], &dx);
                }
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx: Vec<f64> = dy.iter().zip(xs).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                accumulate(grads, *x, self.value(*x).shape().to_vec(), &dx);
            }
            Op::GlobalPool { x, kind, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    match kind {
                        Pooling::Avg => {
                            let v = dy[i] / hw as f64;
                            dx[i * hw..(i + 1) * hw].iter_mut().for_each(|d| *d = v);
                        }
                        Pooling::Max => dx[i * hw + argmax[i]] = dy[i],
                    }
                }
                accumulate(grads, *x, vec![n, c, h, w], &dx);
            }
            Op::SliceRows { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let rows = node.value.dims4().2;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let dst = plane * h * w + start * w;
                    dx[dst..dst + rows * w].copy_from_slice(&dy[plane * rows * w..(plane + 1) * rows * w]);
                }
                accumulate(grads, *x, vec![n, c, h, w], &dx);
            }
            Op::ConcatRows { parts } => {
                let (n, c, total, w) = node.value.dims4();
                let mut offset = 0;
                for &p in parts {
                    let ph = self.value(p).dims4().2;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * c * ph * w);
                        for plane in 0..n * c {
                            let src = plane * total * w + offset * w;
                            dp.extend_from_slice(&dy[src..src + ph * w]);
                        }
                        accumulate(grads, p, vec![n, c, ph, w], &dp);
                    }
                    offset += ph;
                }
            }
            Op::SpatialMean { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    let v = dy[i] / hw as f64;
                    dx[i * hw..(i + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, vec![n, c, h, w], &dx);
            }
            Op::SpatialStd { x, mean } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let xs = self.value(*x).data();
                let sig = node.value.data();
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    if sig[i] > 0.0 {
                        let k = dy[i] / (hw as f64 * sig[i]);
                        for t in i * hw..(i + 1) * hw {
                            dx[t] = k * (xs[t] - mean[i]);
                        }
                    }
                }
                accumulate(grads, *x, vec![n, c, h, w], &dx);
            }
            Op::Gather { x, index } => {
                let shape = self.value(*x).shape().to_vec();
                let row: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for t in 0..row {
                        dx[i * row + t] += dy[r * row + t];
                    }
                }
                accumulate(grads, *x, shape, &dx);
            }
            Op::AdaIn {
                x,
                mu_r,
                sig_r,
                mu_d,
                sig_d,
                floor,
            } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let xs = self.value(*x).data();
                let (mr, sr) = (self.value(*mu_r).data(), self.value(*sig_r).data());
                let sd = self.value(*sig_d).data();
                let mut dx = vec![0.0; xs.len()];
                let mut dmr = vec![0.0; n * c];
                let mut dsr = vec![0.0; n * c];
                let mut dmd = vec![0.0; n * c];
                let mut dsd = vec![0.0; n * c];
                for i in 0..n * c {
                    let s = sr[i].max(*floor);
                    let scale = sd[i] / s;
                    let mut sum_d = 0.0;
                    let mut sum_dz = 0.0;
                    for t in i * hw..(i + 1) * hw {
                        let z = (xs[t] - mr[i]) / s;
                        dx[t] = dy[t] * scale;
                        sum_d += dy[t];
                        sum_dz += dy[t] * z;
                    }
                    dmr[i] = -scale * sum_d;
                    if sr[i] > *floor {
                        dsr[i] = -scale * sum_dz;
                    }
                    dmd[i] = sum_d;
                    dsd[i] = sum_dz;
                }
                let stat_shape = vec![n, c];
                if self.wants(*x) {
                    accumulate(grads, *x, vec![n, c, h, w], &dx);
                }
                for (v, d) in [(*mu_r, &dmr), (*sig_r, &dsr), (*mu_d, &dmd), (*sig_d, &dsd)] {
                    if self.wants(v) {
                        accumulate(grads, v, stat_shape.clone(), d);
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let (n, c) = self.value(*a).dims2();
                let (k, _) = self.value(*b).dims2();
                if self.wants(*a) {
                    let mut da = vec![0.0; n * c];
                    gemm(n, k, c, MatRef::row_major(dy, k), MatRef::row_major(self.value(*b).data(), c), 0.0, &mut da);
                    accumulate(grads, *a, vec![n, c], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm(k, n, c, MatRef::transposed(dy, k), MatRef::row_major(self.value(*a).data(), c), 0.0, &mut db);
                    accumulate(grads, *b, vec![k, c], &db);
                }
            }
            Op::BatchNorm { inv_std, x } => {
                let (n, c) = self.value(*x).dims2();
                let ys = node.value.data();
                let mut dx = vec![0.0; n * c];
                for j in 0..c {
                    let mean_dy = (0..n).map(|i| dy[i * c + j]).sum::<f64>() / n as f64;
                    let mean_dyy = (0..n).map(|i| dy[i * c + j] * ys[i * c + j]).sum::<f64>() / n as f64;
                    for i in 0..n {
                        let t = i * c + j;
                        dx[t] = inv_std[j] * (dy[t] - mean_dy - ys[t] * mean_dyy);
                    }
                }
                accumulate(grads, *x, vec![n, c], &dx);
            }
            Op::NormalizeRows { x, norms } => {
                let (n, c) = self.value(*x).dims2();
                let ys = node.value.data();
                let mut dx = vec![0.0; n * c];
                for (i, &norm) in norms.iter().enumerate().take(n) {
                    let r = i * c..(i + 1) * c;
                    let dot: f64 = dy[r.clone()].iter().zip(&ys[r.clone()]).map(|(a, b)| a * b).sum();
                    for t in r {
                        dx[t] = (dy[t] - ys[t] * dot) / norm;
                    }
                }
                accumulate(grads, *x, vec![n, c], &dx);
            }
            Op::SelectRows { a, b, take_a } => {
                let shape = node.value.shape().to_vec();
                let row: usize = shape[1..].iter().product();
                for (v, keep) in [(*a, true), (*b, false)] {
                    if self.wants(v) {
                        let mut d = dy.to_vec();
                        for (i, &t) in take_a.iter().enumerate() {
                            if t != keep {
                                d[i * row..(i + 1) * row].iter_mut().for_each(|x| *x = 0.0);
                            }
                        }
                        accumulate(grads, v, shape.clone(), &d);
                    }
                }
            }
            Op::LinComb { a, b, alpha, beta } => {
                let shape = node.value.shape().to_vec();
                if self.wants(*a) {
                    let da: Vec<f64> = dy.iter().map(|d| alpha * d).collect();
                    accumulate(grads, *a, shape.clone(), &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = dy.iter().map(|d| beta * d).collect();
                    accumulate(grads, *b, shape, &db);
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let (n, k) = self.value(*logits).dims2();
                let ts = targets.data();
                let g = dy[0] / n as f64;
                let mut dl = vec![0.0; n * k];
                for i in 0..n {
                    let mass: f64 = ts[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        dl[i * k + j] = g * (probs[i * k + j] * mass - ts[i * k + j]);
                    }
                }
                accumulate(grads, *logits, vec![n, k], &dl);
            }
            Op::Triplet { x, active, count } => {
                let (n, c) = self.value(*x).dims2();
                let xs = self.value(*x).data();
                let g = dy[0] / *count as f64;
                let mut dx = vec![0.0; n * c];
                let mut pull = |i: usize, j: usize, d: f64, sign: f64| {
                    if d <= 0.0 {
                        return;
                    }
                    for t in 0..c {
                        let u = (xs[i * c + t] - xs[j * c + t]) / d * sign * g;
                        dx[i * c + t] += u;
                        dx[j * c + t] -= u;
                    }
                };
                for &(a, p, ng, dp, dn) in active {
                    pull(a, p, dp, 1.0);
                    pull(a, ng, dn, -1.0);
                }
                accumulate(grads, *x, vec![n, c], &dx);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.value(*x).shape().to_vec(), dy);
            }
            Op::WeightedSum { terms } => {
                for &(v, coef) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, vec![1], &[coef * dy[0]]);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: Vec<usize>, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, delta.to_vec())),
    }
}

#[cfg(test)]
mod tests;
