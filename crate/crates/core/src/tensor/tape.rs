//! Wengert-list autodiff: every op appends a node holding its output value
//! and whatever it needs for the backward rule; [`Tape::backward`] walks the
//! list once in reverse.

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch-norm running statistics (per channel).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// A recorded operation together with the state its backward rule needs.
#[derive(Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// `[B, M, N] -> [B, N, M]`
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(Var),
    ConcatBatch(Vec<Var>),
    ConcatChannels(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RowDistance {
        a: Var,
        b: Var,
    },
    PairwiseDistance(Var),
    GroupMean {
        x: Var,
        groups: Vec<usize>,
        counts: Vec<usize>,
    },
    WeightedTriplet {
        dist: Var,
        labels: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AddBias { .. } => "add_bias",
            Op::Matmul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::ConcatBatch(..) => "concat_batch",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceBatch { .. } => "slice_batch",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::RowDistance { .. } => "l2_distance",
            Op::PairwiseDistance(..) => "pairwise_distance",
            Op::GroupMean { .. } => "group_mean",
            Op::WeightedTriplet { .. } => "weighted_triplet",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::GlobalAvgPool(a)
            | Op::PairwiseDistance(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Matmul { a, b, .. } | Op::RowDistance { a, b } => vec![*a, *b],
            Op::ConcatBatch(v) | Op::ConcatChannels(v) => v.clone(),
            Op::SliceBatch { x, .. } | Op::GroupMean { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedTriplet { dist, .. } => vec![*dist],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
}

/// Ordered record of a forward computation.
///
/// A tape and the values on it belong to one thread at a time; independent
/// tapes can run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        assert!($cond, "contract violation: {}", format!($($arg)+))
    };
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), t.requires_grad())
    }

    /// Records a differentiable copy of `t` regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), true)
    }

    /// Takes ownership of a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an intermediate value after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::new(self.shape(v), g.to_vec()))
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Number of recorded ops that read `v`.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&i| i == v).count())
            .sum()
    }

    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        contract!(
            ta.shape() == tb.shape(),
            "{what} shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x + c).collect());
        self.push(out, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x.max(0.0)).collect());
        self.push(out, Op::Relu(a))
    }

    /// `max(c - a, 0)` elementwise.
    pub fn hinge(&mut self, a: Var, c: f64) -> Var {
        let neg = self.scale(a, -1.0);
        let shifted = self.shift(neg, c);
        self.relu(shifted)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        contract!(t.numel() > 0, "mean of empty tensor");
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        contract!(t.ndim() == 3, "transpose expects rank 3, got {:?}", t.shape());
        let (b, m, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            let s = &src[bi * m * n..][..m * n];
            let d = &mut data[bi * m * n..][..m * n];
            for i in 0..m {
                for j in 0..n {
                    d[j * m + i] = s[i * n + j];
                }
            }
        }
        self.push(Tensor::new(&[b, n, m], data), Op::Transpose(a))
    }

    // ── convolution / linear algebra ───────────────────────────────────

    /// 2-D cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        let (ti, tk) = (self.value(input), self.value(kernel));
        contract!(ti.ndim() == 4, "conv2d input rank {:?}", ti.shape());
        contract!(tk.ndim() == 4, "conv2d kernel rank {:?}", tk.shape());
        let (b, c_in, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (c_out, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        contract!(kc == c_in, "conv2d channels: input {c_in}, kernel {kc}");
        contract!(kh == kw && (kh == 1 || kh == 3), "conv2d kernel must be 1x1 or 3x3");
        contract!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let k = kh;
        contract!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d kernel larger than padded input"
        );
        // Output size floors like common frameworks: a 3x3/stride-2/pad-1
        // conv halves an even extent and the trailing pad row goes unused.
        let geom = ConvGeom {
            batch: b,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(ti.data(), &geom);
        let hw = geom.h_out * geom.w_out;
        let mut out_mat = vec![0.0; c_out * geom.col_cols()];
        kernels::gemm(
            c_out,
            geom.col_rows(),
            geom.col_cols(),
            tk.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out_mat,
        );
        let out = kernels::swap_outer(&out_mat, c_out, b, hw);
        let keep_cols = self.nodes[kernel.0].requires_grad;
        self.push(
            Tensor::new(&[b, c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: keep_cols.then_some(cols),
            },
        )
    }

    /// Batch normalization over every axis except axis 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        stats: &mut RunningStats,
    ) -> Var {
        let t = self.value(x);
        contract!(t.ndim() >= 2, "batch_norm input rank {:?}", t.shape());
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let s: usize = t.shape()[2..].iter().product();
        contract!(
            self.value(gamma).numel() == c && self.value(beta).numel() == c,
            "batch_norm affine size vs {c} channels"
        );
        contract!(stats.mean.len() == c, "batch_norm running stats size");
        let train = mode == BnMode::Train;
        if train {
            contract!(b >= 2, "batch_norm in train mode needs batch >= 2, got {b}");
        }
        let n = (b * s) as f64;
        let src = t.data();
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut sum = 0.0;
                for bi in 0..b {
                    sum += src[(bi * c + ch) * s..][..s].iter().sum::<f64>();
                }
                let mu = sum / n;
                let mut sq = 0.0;
                for bi in 0..b {
                    sq += src[(bi * c + ch) * s..][..s]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                let var = sq / n;
                mean[ch] = mu;
                inv_std[ch] = 1.0 / (var + RunningStats::EPS).sqrt();
                let m = RunningStats::MOMENTUM;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mu;
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * sq / (n - 1.0);
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = 1.0 / (stats.var[ch] + RunningStats::EPS).sqrt();
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// `[B, D] + [D]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (t, tb) = (self.value(x), self.value(bias));
        contract!(t.ndim() == 2, "add_bias input rank {:?}", t.shape());
        let d = t.shape()[1];
        contract!(tb.numel() == d, "add_bias size {} vs {d}", tb.numel());
        let bd = tb.data();
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::AddBias { x, bias })
    }

    /// `[M, K] x [K, N] -> [M, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        contract!(ta.ndim() == 2 && tb.ndim() == 2, "matmul expects rank-2 operands");
        let (m, k, k2, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0], tb.shape()[1]);
        contract!(k == k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        self.push(
            Tensor::new(&[m, n], out),
            Op::Matmul {
                a,
                b,
                batch: 1,
                m,
                k,
                n,
            },
        )
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`, one product per batch entry.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        contract!(ta.ndim() == 3 && tb.ndim() == 3, "bmm expects rank-3 operands");
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bs2, k2, n) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        contract!(bs == bs2 && k == k2, "bmm shapes {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..][..m * k],
                false,
                &tb.data()[i * k * n..][..k * n],
                false,
                0.0,
                &mut out[i * m * n..][..m * n],
            );
        }
        self.push(
            Tensor::new(&[bs, m, n], out),
            Op::Matmul {
                a,
                b,
                batch: bs,
                m,
                k,
                n,
            },
        )
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        contract!(t.ndim() >= 1, "softmax of a scalar");
        let len = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        kernels::softmax_rows(&mut data, len);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Softmax(x))
    }

    // ── structural ─────────────────────────────────────────────────────

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::stack_outer(&tensors);
        self.push(out, Op::ConcatBatch(parts.to_vec()))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        contract!(!parts.is_empty(), "empty channel concatenation");
        let first = self.value(parts[0]).shape().to_vec();
        contract!(first.len() >= 2, "concat_channels rank {first:?}");
        let b = first[0];
        let rest = &first[2..];
        let s: usize = rest.iter().product();
        let mut total_c = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            contract!(
                sh.len() == first.len() && sh[0] == b && &sh[2..] == rest,
                "concat_channels shapes {first:?} vs {sh:?}"
            );
            total_c += sh[1];
        }
        let mut data = vec![0.0; b * total_c * s];
        let mut c_off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.shape()[1];
            for bi in 0..b {
                data[(bi * total_c + c_off) * s..][..c * s]
                    .copy_from_slice(&t.data()[bi * c * s..][..c * s]);
            }
            c_off += c;
        }
        let mut shape = vec![b, total_c];
        shape.extend_from_slice(rest);
        self.push(Tensor::new(&shape, data), Op::ConcatChannels(parts.to_vec()))
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        contract!(
            t.ndim() >= 1 && start + len <= t.shape()[0],
            "slice {start}+{len} of {:?}",
            t.shape()
        );
        let out = t.slice_outer(start, len);
        self.push(out, Op::SliceBatch { x, start })
    }

    /// `[B, C, ...] -> [B, C]` by averaging the trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        contract!(t.ndim() >= 2, "global_avg_pool rank {:?}", t.shape());
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let s: usize = t.shape()[2..].iter().product();
        contract!(s > 0, "global_avg_pool over empty map");
        let data = t.data().chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
        self.push(Tensor::new(&[b, c], data), Op::GlobalAvgPool(x))
    }

    // ── losses and distances ───────────────────────────────────────────

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        contract!(t.ndim() == 2, "cross_entropy logits rank {:?}", t.shape());
        let (b, p) = (t.shape()[0], t.shape()[1]);
        contract!(labels.len() == b, "cross_entropy {} labels for {b} rows", labels.len());
        contract!(b > 0, "cross_entropy on empty batch");
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, (&y, lrow)) in labels.iter().zip(t.data().chunks(p)).enumerate() {
            contract!(y < p, "label {y} out of range [0, {p})");
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - lrow[y];
            let prow = &mut probs[row * p..][..p];
            for (pv, &lv) in prow.iter_mut().zip(lrow) {
                *pv = (lv - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Per-row Euclidean distance of two `[B, D]` tensors.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        contract!(
            ta.shape() == tb.shape() && ta.ndim() == 2,
            "l2_distance shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let d = ta.shape()[1];
        let data = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .collect();
        let rows = ta.shape()[0];
        self.push(Tensor::new(&[rows], data), Op::RowDistance { a, b })
    }

    /// `[M, D] -> [M, M]` matrix of Euclidean distances (exact zero diagonal).
    pub fn pairwise_distance(&mut self, x: Var) -> Var {
        let t = self.value(x);
        contract!(t.ndim() == 2, "pairwise_distance rank {:?}", t.shape());
        let (m, d) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let dist = src[i * d..][..d]
                    .iter()
                    .zip(&src[j * d..][..d])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                out[i * m + j] = dist;
                out[j * m + i] = dist;
            }
        }
        self.push(Tensor::new(&[m, m], out), Op::PairwiseDistance(x))
    }

    /// Mean of `x[i]` over each group; every group id in `0..num_groups` must occur.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], num_groups: usize) -> Var {
        let t = self.value(x);
        contract!(
            t.ndim() == 1 && t.numel() == groups.len(),
            "group_mean expects [n] with n group ids"
        );
        let mut counts = vec![0usize; num_groups];
        let mut sums = vec![0.0; num_groups];
        for (&g, &v) in groups.iter().zip(t.data()) {
            contract!(g < num_groups, "group id {g} >= {num_groups}");
            counts[g] += 1;
            sums[g] += v;
        }
        contract!(counts.iter().all(|&c| c > 0), "group_mean with an empty group");
        let data = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        self.push(
            Tensor::new(&[num_groups], data),
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
                counts,
            },
        )
    }

    /// Weighted regularization triplet loss over a `[M, M]` distance matrix.
    ///
    /// For anchor `i`, positive (same label, `j != i`) and negative distances
    /// are each aggregated with softmax-of-distance weights; the anchor term
    /// is `softplus(pos_agg - neg_agg)`. Returns the mean over anchors.
    pub fn weighted_triplet(&mut self, dist: Var, labels: &[usize]) -> Var {
        let t = self.value(dist);
        contract!(t.ndim() == 2 && t.shape()[0] == t.shape()[1], "wrt needs a square matrix");
        let m = t.shape()[0];
        contract!(labels.len() == m, "wrt label count {} vs {m}", labels.len());
        let mut total = 0.0;
        for i in 0..m {
            let (sp, sn) = wrt_aggregates(&t.data()[i * m..][..m], labels, i);
            total += kernels::softplus(sp.agg - sn.agg);
        }
        self.push(
            Tensor::scalar(total / m as f64),
            Op::WeightedTriplet {
                dist,
                labels: labels.to_vec(),
            },
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Gradients of leaves (and of any
    /// value marked with [`Tape::retain_grad`]) are kept for [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) {
        contract!(
            self.nodes[loss.0].value.numel() == 1,
            "backward from non-scalar of shape {:?}",
            self.shape(loss)
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_op(i, &g, &mut grads);
            }
            if node.retain {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((x, gi), o) in ga.iter_mut().zip(g).zip(out.data()) {
                    if *o > 0.0 {
                        *x += gi;
                    }
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / len(*a) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += scale))
            }
            Op::Transpose(a) => {
                // out is [B, N, M]; input is [B, M, N]
                let (b, n, m) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                acc(*a, &mut |ga| {
                    for bi in 0..b {
                        let gs = &g[bi * m * n..][..m * n];
                        let gd = &mut ga[bi * m * n..][..m * n];
                        for j in 0..n {
                            for i in 0..m {
                                gd[i * n + j] += gs[j * m + i];
                            }
                        }
                    }
                })
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let hw = geom.h_out * geom.w_out;
                let gmat = kernels::swap_outer(g, geom.batch, geom.c_out, hw);
                if needs(*kernel) {
                    let cols = cols.as_ref().expect("conv cols kept for kernel grad");
                    acc(*kernel, &mut |gk| {
                        kernels::gemm(
                            geom.c_out,
                            geom.col_cols(),
                            geom.col_rows(),
                            &gmat,
                            false,
                            cols,
                            true,
                            1.0,
                            gk,
                        )
                    });
                }
                if needs(*input) {
                    let mut gcols = vec![0.0; geom.col_rows() * geom.col_cols()];
                    kernels::gemm(
                        geom.col_rows(),
                        geom.c_out,
                        geom.col_cols(),
                        nodes[kernel.0].value.data(),
                        true,
                        &gmat,
                        false,
                        0.0,
                        &mut gcols,
                    );
                    acc(*input, &mut |gi| kernels::col2im_add(&gcols, geom, gi));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = out.shape();
                let (b, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let n = (b * s) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * s;
                        for i in off..off + s {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*beta, &mut |gb| add_into(gb, &sum_g));
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx));
                let gam = nodes[gamma.0].value.data();
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * s;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + s {
                                gx[i] += if *train {
                                    k / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let d = nodes[bias.0].value.numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for i in 0..*batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..][..m * n],
                            false,
                            &vb[i * k * n..][..k * n],
                            true,
                            1.0,
                            &mut ga[i * m * k..][..m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..*batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..][..m * k],
                            true,
                            &g[i * m * n..][..m * n],
                            false,
                            1.0,
                            &mut gb[i * k * n..][..k * n],
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let l = *out.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(l).zip(g.chunks(l)).zip(out.data().chunks(l))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    acc(p, &mut |gp| add_into(gp, &g[off..off + l]));
                    off += l;
                }
            }
            Op::ConcatChannels(parts) => {
                let shape = out.shape();
                let (b, total_c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let mut c_off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for bi in 0..b {
                            add_into(
                                &mut gp[bi * c * s..][..c * s],
                                &g[(bi * total_c + c_off) * s..][..c * s],
                            );
                        }
                    });
                    c_off += c;
                }
            }
            Op::SliceBatch { x, start } => {
                let inner: usize = out.shape()[1..].iter().product();
                acc(*x, &mut |gx| add_into(&mut gx[start * inner..][..g.len()], g));
            }
            Op::GlobalAvgPool(x) => {
                let s = len(*x) / out.numel();
                acc(*x, &mut |gx| {
                    for (plane, gi) in gx.chunks_mut(s).zip(g) {
                        let v = gi / s as f64;
                        plane.iter_mut().for_each(|p| *p += v);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let p = probs.len() / b;
                let scale = g[0] / b as f64;
                acc(*logits, &mut |gl| {
                    for (row, &y) in labels.iter().enumerate() {
                        for j in 0..p {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[row * p + j] += scale * (probs[row * p + j] - onehot);
                        }
                    }
                });
            }
            Op::RowDistance { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let d = va.len() / out.numel();
                let dist = out.data();
                let coef = |r: usize| if dist[r] > 0.0 { g[r] / dist[r] } else { 0.0 };
                acc(*a, &mut |ga| {
                    for r in 0..dist.len() {
                        let c = coef(r);
                        for j in r * d..(r + 1) * d {
                            ga[j] += c * (va[j] - vb[j]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..dist.len() {
                        let c = coef(r);
                        for j in r * d..(r + 1) * d {
                            gb[j] -= c * (va[j] - vb[j]);
                        }
                    }
                });
            }
            Op::PairwiseDistance(x) => {
                let vx = nodes[x.0].value.data();
                let m = out.shape()[0];
                let d = vx.len() / m;
                let dist = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..m {
                            let dij = dist[i * m + j];
                            if i == j || dij <= 0.0 {
                                continue;
                            }
                            let c = g[i * m + j] / dij;
                            for t in 0..d {
                                let diff = vx[i * d + t] - vx[j * d + t];
                                gx[i * d + t] += c * diff;
                                gx[j * d + t] -= c * diff;
                            }
                        }
                    }
                });
            }
            Op::GroupMean { x, groups, counts } => acc(*x, &mut |gx| {
                for (o, &gr) in gx.iter_mut().zip(groups) {
                    *o += g[gr] / counts[gr] as f64;
                }
            }),
            Op::WeightedTriplet { dist, labels } => {
                let dm = nodes[dist.0].value.data();
                let m = labels.len();
                let scale = g[0] / m as f64;
                acc(*dist, &mut |gd| {
                    for i in 0..m {
                        let row = &dm[i * m..][..m];
                        let (sp, sn) = wrt_aggregates(row, labels, i);
                        let s = scale * kernels::sigmoid(sp.agg - sn.agg);
                        for (j, w) in sp.weights {
                            gd[i * m + j] += s * w * (1.0 + row[j] - sp.agg);
                        }
                        for (j, w) in sn.weights {
                            gd[i * m + j] -= s * w * (1.0 + row[j] - sn.agg);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) struct SoftAggregate {
    pub weights: Vec<(usize, f64)>,
    pub agg: f64,
}

/// Softmax-weighted positive and negative distance aggregates for one anchor.
pub(crate) fn wrt_aggregates(
    row: &[f64],
    labels: &[usize],
    anchor: usize,
) -> (SoftAggregate, SoftAggregate) {
    let pos: Vec<usize> = (0..row.len())
        .filter(|&j| j != anchor && labels[j] == labels[anchor])
        .collect();
    let neg: Vec<usize> = (0..row.len()).filter(|&j| labels[j] != labels[anchor]).collect();
    contract!(
        !pos.is_empty() && !neg.is_empty(),
        "anchor {anchor} needs at least one positive and one negative"
    );
    (soft_aggregate(row, &pos), soft_aggregate(row, &neg))
}

fn soft_aggregate(row: &[f64], idx: &[usize]) -> SoftAggregate {
    let max = idx.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = idx.iter().map(|&j| (row[j] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<(usize, f64)> = idx.iter().zip(&exps).map(|(&j, e)| (j, e / z)).collect();
    let agg = weights.iter().map(|&(j, w)| w * row[j]).sum();
    SoftAggregate { weights, agg }
}
