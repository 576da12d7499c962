//! Tape-based reverse-mode autodiff.
//!
//! A `Graph` owns the forward values of every node in execution order plus a
//! parallel gradient store. Forward execution is eager; `backward` replays the
//! recorded operations in exact reverse order, accumulating adjoints with `+=`
//! so a value used twice receives the sum of both contributions. A graph is
//! built fresh per training step and consumed by one backward pass.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{strides, Scalar, Tensor};

/// Handle to a node in a `Graph`. Node ids are assigned in forward order, so
/// every parent id is smaller than its consumer's id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Margin-loss family selector for `margin_logits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    Softmax,
    Cosface,
    Arcface,
    Adaface,
}

impl std::str::FromStr for MarginKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(MarginKind::Softmax),
            "cosface" => Ok(MarginKind::Cosface),
            "arcface" => Ok(MarginKind::Arcface),
            "adaface" => Ok(MarginKind::Adaface),
            other => Err(Error::config(format!("unknown loss kind '{other}'"))),
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    /// Broadcast-add a 1-D vector along `axis` of x.
    AddBroadcast {
        x: Var,
        b: Var,
        axis: usize,
    },
    Relu {
        x: Var,
    },
    PRelu {
        x: Var,
        slope: Var,
        axis: usize,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    L2Normalize {
        x: Var,
        inv_norm: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    /// Margin-adjusted logits; `target_df` holds dF/dcos for each row's
    /// target column, everything else scales by `s`.
    MarginLogits {
        cos: Var,
        labels: Vec<usize>,
        s: T,
        target_df: Vec<T>,
    },
}

struct Node<T: Scalar> {
    data: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// When set, domain violations (log/sqrt of negatives, NaN into softmax)
    /// are surfaced as errors instead of propagating NaN.
    pub checked: bool,
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    pub fn leaf(&mut self, data: Tensor<T>, requires_grad: bool) -> Var {
        self.push(data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Tensor<T>) -> Var {
        self.leaf(data, false)
    }

    pub fn data(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    fn push(&mut self, data: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = {
            let (da, db) = (self.data(a).data(), self.data(b).data());
            let out: Vec<T> = da.iter().zip(db).map(|(&x, &y)| x + y).collect();
            Tensor::new(self.shape(a).to_vec(), out)?
        };
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = {
            let (da, db) = (self.data(a).data(), self.data(b).data());
            let out: Vec<T> = da.iter().zip(db).map(|(&x, &y)| x - y).collect();
            Tensor::new(self.shape(a).to_vec(), out)?
        };
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = {
            let (da, db) = (self.data(a).data(), self.data(b).data());
            let out: Vec<T> = da.iter().zip(db).map(|(&x, &y)| x * y).collect();
            Tensor::new(self.shape(a).to_vec(), out)?
        };
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.data(x).map(|v| v * c);
        self.push(data, self.rg(x), Op::Scale { x, c })
    }

    /// x + b where b is 1-D and broadcast along `axis` of x.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(b) != [xs[axis]] {
            return Err(Error::dim(format!(
                "add_broadcast: x {:?}, b {:?}, axis {axis}",
                xs,
                self.shape(b)
            )));
        }
        let (outer, len, inner) = lane_dims(&xs, axis);
        let bv = self.data(b).data().to_vec();
        let mut out = self.data(x).data().to_vec();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let add = bv[l];
                for v in &mut out[base..base + inner] {
                    *v = *v + add;
                }
            }
        }
        let data = Tensor::new(xs, out)?;
        Ok(self.push(data, self.rg(x) || self.rg(b), Op::AddBroadcast { x, b, axis }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(data, self.rg(x), Op::Relu { x })
    }

    /// PReLU with a per-channel slope vector broadcast along `axis`.
    pub fn prelu(&mut self, x: Var, slope: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(slope) != [xs[axis]] {
            return Err(Error::dim(format!(
                "prelu: x {:?}, slope {:?}, axis {axis}",
                xs,
                self.shape(slope)
            )));
        }
        let (outer, len, inner) = lane_dims(&xs, axis);
        let sv = self.data(slope).data().to_vec();
        let mut out = self.data(x).data().to_vec();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let s = sv[l];
                for v in &mut out[base..base + inner] {
                    if *v <= T::zero() {
                        *v = *v * s;
                    }
                }
            }
        }
        let data = Tensor::new(xs, out)?;
        Ok(self.push(data, self.rg(x) || self.rg(slope), Op::PRelu { x, slope, axis }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.data(x).map(|v| v.exp());
        self.push(data, self.rg(x), Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.checked && self.data(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::domain("log of non-positive input"));
        }
        let data = self.data(x).map(|v| v.ln());
        Ok(self.push(data, self.rg(x), Op::Log { x }))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.checked && self.data(x).data().iter().any(|v| *v < T::zero()) {
            return Err(Error::domain("sqrt of negative input"));
        }
        let data = self.data(x).map(|v| v.sqrt());
        Ok(self.push(data, self.rg(x), Op::Sqrt { x }))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let data = self
            .data(x)
            .map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(data, self.rg(x), Op::Clamp { x, lo, hi })
    }

    // ---- reductions ----

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_dims(&xs, axis);
        let xd = self.data(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[base + i];
                }
            }
        }
        let data = Tensor::new(Self::reduced_shape(&xs, axis), out)?;
        Ok(self.push(data, self.rg(x), Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_dims(&xs, axis);
        let inv = T::one() / T::from_f64((len) as f64);
        let xd = self.data(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xd[base + i];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let data = Tensor::new(Self::reduced_shape(&xs, axis), out)?;
        Ok(self.push(data, self.rg(x), Op::MeanAxis { x, axis }))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_dims(&xs, axis);
        let xd = self.data(x).data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = xd[base + i];
                    let oi = o * inner + i;
                    if v > out[oi] {
                        out[oi] = v;
                        argmax[oi] = l;
                    }
                }
            }
        }
        let data = Tensor::new(Self::reduced_shape(&xs, axis), out)?;
        Ok(self.push(data, self.rg(x), Op::MaxAxis { x, axis, argmax }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self
            .data(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), self.rg(x), Op::SumAll { x })
    }

    // ---- structured ops ----

    /// Matrix product. Supports 2-D x 2-D, and batched forms where `a` has
    /// leading batch dims and `b` either shares them or is a plain 2-D matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul: ranks {:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        let batch_ok = shared_b || sb[..sb.len() - 2] == sa[..sa.len() - 2];
        if k != kb || !batch_ok {
            return Err(Error::dim(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let da = self.data(a).data();
        let db = self.data(b).data();
        let mut out = vec![T::zero(); batch_a * m * n];
        for bi in 0..batch_a {
            let a_s = &da[bi * m * k..(bi + 1) * m * k];
            let b_s = if shared_b {
                db
            } else {
                &db[bi * k * n..(bi + 1) * k * n]
            };
            kernels::matmul_seq(&mut out[bi * m * n..(bi + 1) * m * n], a_s, b_s, m, k, n);
        }
        let mut oshape = sa[..sa.len() - 2].to_vec();
        oshape.push(m);
        oshape.push(n);
        let data = Tensor::new(oshape, out)?;
        Ok(self.push(data, self.rg(a) || self.rg(b), Op::Matmul { a, b }))
    }

    /// conv2d over x [B x Cin x H x W] with kernel [Cout x Cin x kh x kw].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim(format!("conv2d: x {:?}, k {:?}", xs, ks)));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = kernels::conv_out_len(h, kh, stride, padding);
        let wo = kernels::conv_out_len(w, kw, stride, padding);
        let mut out = vec![T::zero(); b * cout * ho * wo];
        kernels::conv2d_forward(
            &mut out,
            self.data(x).data(),
            self.data(k).data(),
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
        );
        let data = Tensor::new(vec![b, cout, ho, wo], out)?;
        Ok(self.push(
            data,
            self.rg(x) || self.rg(k),
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        if self.checked && self.data(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::numerical("NaN input to softmax"));
        }
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_dims(&xs, axis);
        let xd = self.data(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(xd[idx(l)]);
                }
                let mut z = T::zero();
                for l in 0..len {
                    let e = (xd[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    out[idx(l)] = out[idx(l)] / z;
                }
            }
        }
        let data = Tensor::new(xs, out)?;
        Ok(self.push(data, self.rg(x), Op::Softmax { x, axis }))
    }

    /// Mean over the batch of -log softmax(logits)[label], fused log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?}, {} labels",
                ls,
                labels.len()
            )));
        }
        let (bsz, nc) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::data(format!("label {bad} out of range (N_c={nc})")));
        }
        let ld = self.data(logits).data();
        let mut probs = vec![T::zero(); bsz * nc];
        let mut loss = T::zero();
        for i in 0..bsz {
            let row = &ld[i * nc..(i + 1) * nc];
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * nc + j] = e;
                z = z + e;
            }
            for j in 0..nc {
                probs[i * nc + j] = probs[i * nc + j] / z;
            }
            let lse = z.ln() + mx;
            loss = loss + (lse - row[labels[i]]);
        }
        loss = loss / T::from_f64((bsz) as f64);
        let probs = Tensor::new(vec![bsz, nc], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            self.rg(logits),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Per-vector normalization over the last axis, then affine gain/bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::dim("layernorm on scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layernorm: x {:?}, gain {:?}, bias {:?}",
                xs,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.data(x).numel() / d;
        let xd = self.data(x).data();
        let gd = self.data(gain).data().to_vec();
        let bd = self.data(bias).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::from_f64((d) as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu))
                / dn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mu) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        let xhat = Tensor::new(xs.clone(), xhat)?;
        let data = Tensor::new(xs, out)?;
        Ok(self.push(
            data,
            self.rg(x) || self.rg(gain) || self.rg(bias),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-channel batch normalization over x [B x C x H x W].
    ///
    /// In training mode normalizes with batch statistics and returns
    /// `(mean, unbiased var)` for the caller's running-stat update; in eval
    /// mode normalizes with the supplied running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        training: bool,
        eps: T,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!("batchnorm2d: x {:?}", xs)));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if training && b < 2 {
            return Err(Error::dim("batchnorm2d: training mode needs batch >= 2"));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim("batchnorm2d: affine params must be per-channel"));
        }
        let n = b * h * w;
        let nt = T::from_f64((n) as f64);
        let xd = self.data(x).data();
        let gd = self.data(gain).data().to_vec();
        let bd = self.data(bias).data().to_vec();
        let plane = h * w;

        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        s = s + v;
                    }
                }
                let mu = s / nt;
                let mut sq = T::zero();
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for &v in &xd[base..base + plane] {
                        sq = sq + (v - mu) * (v - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / nt; // biased, used for normalization
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };

        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            inv_std[ci] = T::one() / (var[ci] + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (mu, istd, g, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in base..base + plane {
                    let xh = (xd[i] - mu) * istd;
                    xhat[i] = xh;
                    out[i] = xh * g + be;
                }
            }
        }
        let stats = if training {
            // unbiased variance for the running accumulator
            let denom = T::from_f64((n - 1) as f64);
            let unbiased: Vec<T> = var.iter().map(|&v| v * nt / denom).collect();
            Some((
                Tensor::new(vec![c], mean)?,
                Tensor::new(vec![c], unbiased)?,
            ))
        } else {
            None
        };
        let xhat = Tensor::new(xs.clone(), xhat)?;
        let data = Tensor::new(xs, out)?;
        let v = self.push(
            data,
            self.rg(x) || self.rg(gain) || self.rg(bias),
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats: training,
            },
        );
        Ok((v, stats))
    }

    /// Normalize each last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::dim("l2_normalize on scalar"))?;
        let rows = self.data(x).numel() / d;
        let xd = self.data(x).data();
        let mut inv_norm = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ss = row.iter().fold(T::zero(), |a, &v| a + v * v);
            let inv = T::one() / (ss + eps).sqrt();
            inv_norm[r] = inv;
            for j in 0..d {
                out[r * d + j] = row[j] * inv;
            }
        }
        let data = Tensor::new(xs, out)?;
        Ok(self.push(data, self.rg(x), Op::L2Normalize { x, inv_norm }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.data(x).reshaped(shape)?;
        Ok(self.push(data, self.rg(x), Op::Reshape { x }))
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if perm.len() != xs.len() {
            return Err(Error::dim(format!(
                "transpose: perm {:?} for shape {:?}",
                perm, xs
            )));
        }
        let data = permute(self.data(x), perm)?;
        Ok(self.push(
            data,
            self.rg(x),
            Op::Transpose {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let base = self.shape(parts[0]).to_vec();
        self.check_axis(parts[0], axis)?;
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    s, base
                )));
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = lane_dims(&oshape, axis);
        let mut out = vec![T::zero(); oshape.iter().product()];
        let out_lane = total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let len = self.shape(p)[axis];
            let pd = self.data(p).data();
            for o in 0..outer {
                let src = &pd[o * len * inner..(o + 1) * len * inner];
                let dst = &mut out[o * out_lane + offset * inner..o * out_lane + (offset + len) * inner];
                dst.copy_from_slice(src);
            }
            offset += len;
        }
        let data = Tensor::new(oshape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            data,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        if start + len > xs[axis] {
            return Err(Error::dim(format!(
                "slice: [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                xs
            )));
        }
        let (outer, full, inner) = lane_dims(&xs, axis);
        let xd = self.data(x).data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &xd[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut oshape = xs;
        oshape[axis] = len;
        let data = Tensor::new(oshape, out)?;
        Ok(self.push(data, self.rg(x), Op::Slice { x, axis, start }))
    }

    /// Margin-adjusted scaled logits. Non-target columns become s*cos;
    /// the target column becomes s*F(cos_target) per `kind`.
    ///
    /// `adaface_g`, required for the adaface kind, carries the per-sample
    /// (g_angle, g_add) pair computed from detached feature norms.
    pub fn margin_logits(
        &mut self,
        cos: Var,
        labels: &[usize],
        kind: MarginKind,
        s: T,
        m: T,
        adaface_g: Option<&[(T, T)]>,
    ) -> Result<Var> {
        let cs = self.shape(cos).to_vec();
        if cs.len() != 2 || cs[0] != labels.len() {
            return Err(Error::dim(format!(
                "margin_logits: cos {:?}, {} labels",
                cs,
                labels.len()
            )));
        }
        let (bsz, nc) = (cs[0], cs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::data(format!("label {bad} out of range (N_c={nc})")));
        }
        if kind == MarginKind::Adaface && adaface_g.is_none() {
            return Err(Error::config("adaface kind requires per-sample g terms"));
        }
        let cd = self.data(cos).data();
        let mut out: Vec<T> = cd.iter().map(|&v| v * s).collect();
        let mut target_df = vec![T::one(); bsz];
        let one = T::one();
        for (i, &y) in labels.iter().enumerate() {
            let c = cd[i * nc + y];
            let (f, df) = match kind {
                MarginKind::Softmax => (c, one),
                MarginKind::Cosface => (c - m, one),
                MarginKind::Arcface => angular_margin(c, m),
                MarginKind::Adaface => {
                    let (g_angle, g_add) = adaface_g.unwrap()[i];
                    let (fa, dfa) = angular_margin(c, g_angle);
                    (fa - g_add, dfa)
                }
            };
            out[i * nc + y] = f * s;
            target_df[i] = df;
        }
        let data = Tensor::new(cs, out)?;
        Ok(self.push(
            data,
            self.rg(cos),
            Op::MarginLogits {
                cos,
                labels: labels.to_vec(),
                s,
                target_df,
            },
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar output. Populates grads of every reachable
    /// requires_grad node; intermediate grads are freed as they are consumed.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.data(out).numel() != 1 {
            return Err(Error::dim(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        if self.checked && !self.data(out).item()?.is_finite() {
            return Err(Error::numerical("non-finite loss at backward entry"));
        }
        self.grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, g)?;
        }
        Ok(())
    }

    fn acc(&mut self, p: Var, contrib: Tensor<T>) {
        if !self.nodes[p.0].requires_grad {
            return;
        }
        match &mut self.grads[p.0] {
            Some(g) => g.axpy(T::one(), &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, id: usize, g: Tensor<T>) -> Result<()> {
        // Ops are matched by value where the context is small; tensors saved in
        // the op context are read in place.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add { a, b } => {
                self.acc(a, g.clone());
                self.acc(b, g);
            }
            &Op::Sub { a, b } => {
                self.acc(a, g.clone());
                let neg = g.map(|v| -v);
                self.acc(b, neg);
            }
            &Op::Mul { a, b } => {
                let da = {
                    let bd = self.data(b);
                    let mut t = g.clone();
                    for (v, &s) in t.data_mut().iter_mut().zip(bd.data()) {
                        *v = *v * s;
                    }
                    t
                };
                let db = {
                    let ad = self.data(a);
                    let mut t = g.clone();
                    for (v, &s) in t.data_mut().iter_mut().zip(ad.data()) {
                        *v = *v * s;
                    }
                    t
                };
                self.acc(a, da);
                self.acc(b, db);
            }
            &Op::Scale { x, c } => {
                self.acc(x, g.map(|v| v * c));
            }
            &Op::AddBroadcast { x, b, axis } => {
                let xs = self.shape(x).to_vec();
                let (outer, len, inner) = lane_dims(&xs, axis);
                let mut db = vec![T::zero(); len];
                let gd = g.data();
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for &v in &gd[base..base + inner] {
                            db[l] = db[l] + v;
                        }
                    }
                }
                self.acc(x, g.clone());
                self.acc(b, Tensor::new(vec![len], db)?);
            }
            &Op::Relu { x } => {
                let mut dx = g;
                for (v, &xv) in dx.data_mut().iter_mut().zip(self.nodes[x.0].data.data()) {
                    if xv <= T::zero() {
                        *v = T::zero();
                    }
                }
                self.acc(x, dx);
            }
            &Op::PRelu { x, slope, axis } => {
                let xs = self.shape(x).to_vec();
                let (outer, len, inner) = lane_dims(&xs, axis);
                let sv = self.data(slope).data().to_vec();
                let xd = self.data(x).data().to_vec();
                let gd = g.data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut ds = vec![T::zero(); len];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in base..base + inner {
                            if xd[i] > T::zero() {
                                dx[i] = gd[i];
                            } else {
                                dx[i] = gd[i] * sv[l];
                                ds[l] = ds[l] + gd[i] * xd[i];
                            }
                        }
                    }
                }
                self.acc(x, Tensor::new(xs, dx)?);
                self.acc(slope, Tensor::new(vec![len], ds)?);
            }
            &Op::Exp { x } => {
                let mut dx = g;
                for (v, &yv) in dx.data_mut().iter_mut().zip(self.nodes[id].data.data()) {
                    *v = *v * yv;
                }
                self.acc(x, dx);
            }
            &Op::Log { x } => {
                let mut dx = g;
                for (v, &xv) in dx.data_mut().iter_mut().zip(self.nodes[x.0].data.data()) {
                    *v = *v / xv;
                }
                self.acc(x, dx);
            }
            &Op::Sqrt { x } => {
                let half = T::from_f64(0.5);
                let mut dx = g;
                for (v, &yv) in dx.data_mut().iter_mut().zip(self.nodes[id].data.data()) {
                    *v = *v * half / yv;
                }
                self.acc(x, dx);
            }
            &Op::Clamp { x, lo, hi } => {
                let mut dx = g;
                for (v, &xv) in dx.data_mut().iter_mut().zip(self.nodes[x.0].data.data()) {
                    if xv < lo || xv > hi {
                        *v = T::zero();
                    }
                }
                self.acc(x, dx);
            }
            &Op::SumAxis { x, axis } => {
                let dx = expand_along(self.shape(x), axis, g.data(), T::one());
                self.acc(x, dx?);
            }
            &Op::MeanAxis { x, axis } => {
                let n = T::from_f64(self.shape(x)[axis] as f64);
                let dx = expand_along(self.shape(x), axis, g.data(), T::one() / n);
                self.acc(x, dx?);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (x, axis) = (*x, *axis);
                let xs = self.shape(x).to_vec();
                let (outer, len, inner) = lane_dims(&xs, axis);
                let mut dx = vec![T::zero(); self.data(x).numel()];
                let gd = g.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let l = argmax[o * inner + i];
                        dx[(o * len + l) * inner + i] = gd[o * inner + i];
                    }
                }
                self.acc(x, Tensor::new(xs, dx)?);
            }
            &Op::SumAll { x } => {
                let gv = g.item()?;
                self.acc(x, Tensor::full(self.shape(x), gv));
            }
            &Op::Softmax { x, axis } => {
                let xs = self.shape(x).to_vec();
                let (outer, len, inner) = lane_dims(&xs, axis);
                let yd = self.data(Var(id)).data().to_vec();
                let gd = g.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot = dot + gd[idx(l)] * yd[idx(l)];
                        }
                        for l in 0..len {
                            dx[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
                        }
                    }
                }
                self.acc(x, Tensor::new(xs, dx)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let gv = g.item()?;
                let (bsz, nc) = (probs.shape()[0], probs.shape()[1]);
                let scale = gv / T::from_f64((bsz) as f64);
                let mut dl = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * nc + y] = dl[i * nc + y] - T::one();
                }
                for v in &mut dl {
                    *v = *v * scale;
                }
                self.acc(logits, Tensor::new(vec![bsz, nc], dl)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *self.shape(x).last().unwrap();
                let rows = xhat.numel() / d;
                let gd = self.data(gain).data().to_vec();
                let xh = xhat.data();
                let gy = g.data();
                let dn = T::from_f64((d) as f64);
                let mut dx = vec![T::zero(); xh.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let istd = inv_std[r];
                    let mut h = T::zero();
                    let mut h2 = T::zero();
                    for j in 0..d {
                        let dxh = gy[base + j] * gd[j];
                        h = h + dxh;
                        h2 = h2 + dxh * xh[base + j];
                        dgain[j] = dgain[j] + gy[base + j] * xh[base + j];
                        dbias[j] = dbias[j] + gy[base + j];
                    }
                    h = h / dn;
                    h2 = h2 / dn;
                    for j in 0..d {
                        let dxh = gy[base + j] * gd[j];
                        dx[base + j] = istd * (dxh - h - xh[base + j] * h2);
                    }
                }
                self.acc(x, Tensor::new(self.shape(x).to_vec(), dx)?);
                self.acc(gain, Tensor::new(vec![d], dgain)?);
                self.acc(bias, Tensor::new(vec![d], dbias)?);
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gain, bias, batch_stats) = (*x, *gain, *bias, *batch_stats);
                let xs = self.shape(x).to_vec();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let n = b * plane;
                let nt = T::from_f64((n) as f64);
                let gd = self.data(gain).data().to_vec();
                let xh = xhat.data();
                let gy = g.data();
                let mut dx = vec![T::zero(); xh.len()];
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                for ci in 0..c {
                    let istd = inv_std[ci];
                    let gn = gd[ci];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for i in base..base + plane {
                            sum_dy = sum_dy + gy[i];
                            sum_dy_xh = sum_dy_xh + gy[i] * xh[i];
                        }
                    }
                    dgain[ci] = sum_dy_xh;
                    dbias[ci] = sum_dy;
                    if batch_stats {
                        let mean_dy = sum_dy / nt;
                        let mean_dy_xh = sum_dy_xh / nt;
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                dx[i] = gn * istd * (gy[i] - mean_dy - xh[i] * mean_dy_xh);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            let base = (bi * c + ci) * plane;
                            for i in base..base + plane {
                                dx[i] = gn * istd * gy[i];
                            }
                        }
                    }
                }
                self.acc(x, Tensor::new(xs, dx)?);
                self.acc(gain, Tensor::new(vec![c], dgain)?);
                self.acc(bias, Tensor::new(vec![c], dbias)?);
            }
            Op::L2Normalize { x, inv_norm } => {
                let x = *x;
                let xs = self.shape(x).to_vec();
                let d = *xs.last().unwrap();
                let rows = inv_norm.len();
                let yd = self.data(Var(id)).data().to_vec();
                let gy = g.data();
                let mut dx = vec![T::zero(); yd.len()];
                for r in 0..rows {
                    let base = r * d;
                    let inv = inv_norm[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + gy[base + j] * yd[base + j];
                    }
                    for j in 0..d {
                        dx[base + j] = inv * (gy[base + j] - yd[base + j] * dot);
                    }
                }
                self.acc(x, Tensor::new(xs, dx)?);
            }
            &Op::Reshape { x } => {
                let dx = g.reshaped(self.shape(x).to_vec())?;
                self.acc(x, dx);
            }
            Op::Transpose { x, perm } => {
                let x = *x;
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = permute(&g, &inv)?;
                self.acc(x, dx);
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let oshape = self.shape(Var(id)).to_vec();
                let (outer, total, inner) = lane_dims(&oshape, axis);
                let gd = g.data();
                let mut offset = 0usize;
                for &p in &parts {
                    let len = self.shape(p)[axis];
                    let mut dp = vec![T::zero(); self.data(p).numel()];
                    for o in 0..outer {
                        let src = &gd
                            [(o * total + offset) * inner..(o * total + offset + len) * inner];
                        dp[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                    }
                    let shape = self.shape(p).to_vec();
                    self.acc(p, Tensor::new(shape, dp)?);
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = self.shape(x).to_vec();
                let (outer, full, inner) = lane_dims(&xs, axis);
                let len = self.shape(Var(id))[axis];
                let gd = g.data();
                let mut dx = vec![T::zero(); self.data(x).numel()];
                for o in 0..outer {
                    let dst = &mut dx
                        [(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(x, Tensor::new(xs, dx)?);
            }
            Op::MarginLogits {
                cos,
                labels,
                s,
                target_df,
            } => {
                let (cos, s) = (*cos, *s);
                let nc = self.shape(cos)[1];
                let mut dc: Vec<T> = g.data().iter().map(|&v| v * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dc[i * nc + y] = dc[i * nc + y] * target_df[i];
                }
                self.acc(cos, Tensor::new(self.shape(cos).to_vec(), dc)?);
            }
            &Op::Matmul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let shared_b = sb.len() == 2;
                let gd = g.data();
                let ad = self.data(a).data();
                let bd = self.data(b).data();
                let mut da = vec![T::zero(); ad.len()];
                let mut db = vec![T::zero(); bd.len()];
                for bi in 0..batch {
                    let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                    let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                    let b_s = if shared_b {
                        bd
                    } else {
                        &bd[bi * k * n..(bi + 1) * k * n]
                    };
                    // dA = dC * B^T ; dB += A^T * dC
                    kernels::matmul_a_bt(
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        g_s,
                        b_s,
                        m,
                        n,
                        k,
                    );
                    let db_s = if shared_b {
                        &mut db[..]
                    } else {
                        &mut db[bi * k * n..(bi + 1) * k * n]
                    };
                    kernels::matmul_at_b(db_s, a_s, g_s, m, k, n);
                }
                self.acc(a, Tensor::new(sa, da)?);
                self.acc(b, Tensor::new(sb, db)?);
            }
            &Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let xs = self.shape(x).to_vec();
                let ks = self.shape(k).to_vec();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let mut dx = vec![T::zero(); self.data(x).numel()];
                let mut dk = vec![T::zero(); self.data(k).numel()];
                kernels::conv2d_backward(
                    &mut dx,
                    &mut dk,
                    g.data(),
                    self.data(x).data(),
                    self.data(k).data(),
                    b,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    stride,
                    padding,
                );
                self.acc(x, Tensor::new(xs, dx)?);
                self.acc(k, Tensor::new(ks, dk)?);
            }
        }
        Ok(())
    }
}

/// F(cos theta) = cos(theta + m) with the monotone surrogate past pi.
/// Returns (F, dF/dcos).
fn angular_margin<T: Scalar>(c: T, m: T) -> (T, T) {
    let one = T::one();
    let theta = c.min(one).max(-one).acos();
    if theta + m < T::from_f64(std::f64::consts::PI) {
        // forward uses the unfloored sine so F is exact at |cos| = 1 and for
        // m = 0; only the derivative denominator is floored to stay finite
        let sin2 = (one - c * c).max(T::zero());
        let f = c * m.cos() - sin2.sqrt() * m.sin();
        let df = m.cos() + c * m.sin() / sin2.max(T::from_f64(1e-12)).sqrt();
        (f, df)
    } else {
        (c - m * m.sin(), one)
    }
}

fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let mut seen = vec![false; shape.len()];
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::dim(format!("invalid permutation {:?}", perm)));
        }
        seen[p] = true;
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_str = strides(shape);
    let out_str = strides(&oshape);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        // decompose oi into output coordinates
        let mut rem = oi;
        for d in 0..rank {
            idx[d] = rem / out_str[d];
            rem %= out_str[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += idx[d] * in_str[perm[d]];
        }
        *slot = xd[src];
    }
    Tensor::new(oshape, out)
}

/// Broadcast a reduced tensor back along `axis`, scaling each element.
fn expand_along<T: Scalar>(
    shape: &[usize],
    axis: usize,
    reduced: &[T],
    scale: T,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = lane_dims(shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[base + i] = reduced[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[-2.0, 3.0]), false);
        let y = g.relu(x);
        assert_eq!(g.data(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn clamp_boundary_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1], &[1.2]), true);
        let y = g.clamp(x, -1.0, 1.0);
        assert_eq!(g.data(y).data(), &[1.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 3], &[0.0, 0.0, 0.0]), false);
        let y = g.softmax(x, 1).unwrap();
        for &v in g.data(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x2 = g.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let y2 = g.softmax(x2, 1).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (&v, &e) in g.data(y2).data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 2], &[1000.0, 0.0]), false);
        let y = g.softmax(x, 1).unwrap();
        let d = g.data(y).data();
        assert!(d[0] > 0.999999 && d[1] < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_nc() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 4], &[0.5, 0.5, 0.5, 0.5]), false);
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.data(l).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_near_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 3], &[100.0, 0.0, 0.0]), false);
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.data(l).item().unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 3], &[0.0; 3]), false);
        assert!(g.cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn mean_and_sum_reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.data(m).item().unwrap(), 2.5);
        let c = g.leaf(Tensor::full(&[3, 2], 7.0), false);
        let mc = g.mean_axis(c, 0).unwrap();
        assert!(g.data(mc).data().iter().all(|&v| v == 7.0));
        // sum backward: all-ones
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn l2_normalize_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 2], &[3.0, 4.0]), false);
        let y = g.l2_normalize(x, 1e-12).unwrap();
        let d = g.data(y).data();
        assert!((d[0] - 0.6).abs() < 1e-9 && (d[1] - 0.8).abs() < 1e-9);
        // idempotent on unit vectors
        let y2 = g.l2_normalize(y, 1e-12).unwrap();
        for (a, b) in g.data(y2).data().iter().zip(g.data(y).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_constant_vector_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 4], 3.0), false);
        let gain = g.leaf(Tensor::full(&[4], 1.0), false);
        let bias = g.leaf(t64(&[4], &[0.5, 0.5, 0.5, 0.5]), false);
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        for &v in g.data(y).data() {
            assert!((v - 0.5).abs() < 1e-6); // xhat == 0, output == bias
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 3.0]), false);
        let gain = g.leaf(Tensor::full(&[1], 1.0), false);
        let bias = g.leaf(Tensor::full(&[1], 0.0), false);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let (y, stats) = g.batchnorm2d(x, gain, bias, &rm, &rv, false, 0.0).unwrap();
        assert!(stats.is_none());
        for (a, b) in g.data(y).data().iter().zip(g.data(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_training_zero_mean_and_b1_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            t64(&[2, 1, 1, 2], &[1.0, 2.0, 5.0, -1.0]),
            false,
        );
        let gain = g.leaf(Tensor::full(&[1], 1.0), false);
        let bias = g.leaf(Tensor::full(&[1], 0.0), false);
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::full(&[1], 1.0);
        let (y, stats) = g.batchnorm2d(x, gain, bias, &rm, &rv, true, 1e-5).unwrap();
        let mean: f64 = g.data(y).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5);
        assert!(stats.is_some());

        let x1 = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), false);
        assert!(g
            .batchnorm2d(x1, gain, bias, &rm, &rv, true, 1e-5)
            .is_err());
    }

    #[test]
    fn reshape_transpose_roundtrip_bit_exact() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.7).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2, 3, 4], &data), false);
        let t = g.transpose(x, &[2, 0, 1]).unwrap();
        let back = g.transpose(t, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back).data(), g.data(x).data());
        let r = g.reshape(x, vec![6, 4]).unwrap();
        let rb = g.reshape(r, vec![2, 3, 4]).unwrap();
        assert_eq!(g.data(rb).data(), g.data(x).data());
    }

    #[test]
    fn reshape_count_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.reshape(x, vec![7]).is_err());
    }

    #[test]
    fn reshape_backward_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 1.0), true);
        let r = g.reshape(x, vec![6]).unwrap();
        let s = g.sum_all(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4, 2]), false);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"));
    }

    #[test]
    fn shared_value_adjoints_accumulate() {
        // f(x) = sum(x*x) must equal the gradient of sum(x^2): 2x
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3], &[1.0, -2.0, 0.5]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn log_negative_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1], &[-1.0]), false);
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        assert!(matches!(g.sqrt(x), Err(Error::Domain(_))));
    }

    #[test]
    fn max_axis_backward_routes_to_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 3], &[1.0, 5.0, 2.0]), true);
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.data(m).data(), &[5.0]);
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = g.leaf(t64(&[2, 1], &[5.0, 6.0]), false);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.data(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 0, 2).unwrap();
        assert_eq!(g.data(s).data(), g.data(a).data());
    }
}
