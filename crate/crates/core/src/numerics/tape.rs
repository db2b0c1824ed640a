use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::real::{gemm, Real};
use super::tensor::{numel, Tensor};
use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the engine (losses, mostly).
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the output gradient. `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Silu(Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
    },
    AddChannel {
        x: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        /// Per query row `(max, 1/sum)` of the softmax.
        stats: Vec<T>,
        scale: T,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::Softmax { .. } => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::GroupNorm { .. } => "group_norm",
            Op::Dropout { .. } => "dropout",
            Op::ScaleShift { .. } => "scale_shift",
            Op::AddChannel { .. } => "add_channel",
            Op::AddBias { .. } => "add_bias",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Attention { .. } => "attention",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the trainable leaves, keyed by variable.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

/// Record of operations for reverse-mode differentiation. One tape per step.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("param", value.data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("constant", value.data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), kernels::silu)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul over `[batch, .., ..]` operands with optional transposes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, ka) = if trans_a {
            (sa[2], sa[1])
        } else {
            (sa[1], sa[2])
        };
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if ka != kb {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                ka,
                n,
                &da[i * m * ka..(i + 1) * m * ka],
                trans_a,
                &db[i * ka * n..(i + 1) * ka * n],
                trans_b,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    /// 2D convolution over NCHW with "same" padding and stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(mismatch("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// Nearest-neighbour upsampling of the last two axes by 2.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(mismatch("upsample2x", &s, &[]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let nc = numel(&s[..s.len() - 2]);
        let out = kernels::upsample2x_forward(self.value(x).data(), nc, h, w);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        self.push(Tensor::new(shape, out)?, Op::Upsample2x(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(mismatch("softmax", &s, &[axis]));
        }
        let (outer, len, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
        let out = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        self.push(
            Tensor::new(s, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(
            Tensor::scalar(total / T::from_f64(n as f64)),
            Op::Mean(x),
            &[x],
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(mismatch("concat", &s0, &[axis]));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok =
                s.len() == s0.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == s0[i]);
            if !ok {
                return Err(mismatch("concat", &s0, s));
            }
            total_axis += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total_axis;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            parts,
        )
    }

    /// Group normalization of `[n, c, ...]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(mismatch("group_norm", &s, &[groups]));
        }
        let (n, c) = (s[0], s[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm", &s, self.shape(gamma)));
        }
        let sp = numel(&s[2..]);
        let (y, xhat, rstd) = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            sp,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            1e-5,
        );
        self.push(
            Tensor::new(s, y)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout drawing its mask from `rng`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.uniform() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// `x * scale + shift` with `[n, c]` coefficients broadcast over trailing axes of `x`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(scale) != &s[..2] || self.shape(shift) != &s[..2] {
            return Err(mismatch("scale_shift", &s, self.shape(scale)));
        }
        let sp = numel(&s[2..]);
        let (xv, sc, sh) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let mut out = Vec::with_capacity(xv.len());
        for (j, chunk) in xv.chunks(sp).enumerate() {
            out.extend(chunk.iter().map(|&v| v * sc[j] + sh[j]));
        }
        self.push(
            Tensor::new(s, out)?,
            Op::ScaleShift { x, scale, shift },
            &[x, scale, shift],
        )
    }

    /// `x + b` with `b: [n, c]` broadcast over the trailing axes of `x: [n, c, ...]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(b) != &s[..2] {
            return Err(mismatch("add_channel", &s, self.shape(b)));
        }
        let sp = numel(&s[2..]);
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xv.len());
        for (j, chunk) in xv.chunks(sp).enumerate() {
            out.extend(chunk.iter().map(|&v| v + bv[j]));
        }
        self.push(Tensor::new(s, out)?, Op::AddChannel { x, b }, &[x, b])
    }

    /// `x + b` with `b: [c]` broadcast over the leading axes of `x: [..., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if s.is_empty() || self.shape(b) != [c] {
            return Err(mismatch("add_bias", &s, self.shape(b)));
        }
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(c) {
            out.extend(chunk.iter().zip(bv).map(|(&v, &bb)| v + bb));
        }
        self.push(Tensor::new(s, out)?, Op::AddBias { x, b }, &[x, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(mismatch("permute", &s, axes));
        }
        let (out, shape) = kernels::permute(self.value(x).data(), &s, axes);
        self.push(
            Tensor::new(shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(mismatch("narrow", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            Tensor::new(shape, out)?,
            Op::Narrow { x, axis, start },
            &[x],
        )
    }

    /// Scaled dot-product attention: `softmax(q k^T * scale) v` per batch entry.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3
            || sk.len() != 3
            || sv.len() != 3
            || sq[0] != sk[0]
            || sk[0] != sv[0]
            || sq[2] != sk[2]
        {
            return Err(mismatch("attention", &sq, &sk));
        }
        if sk[1] != sv[1] {
            return Err(mismatch("attention", &sk, &sv));
        }
        let (b, lq, d, lk, dv) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
        let scale = T::from_f64(scale);
        let (out, stats) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            b,
            lq,
            lk,
            d,
            dv,
            scale,
        );
        self.push(
            Tensor::new(vec![b, lq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                stats,
                scale,
            },
            &[q, k, v],
        )
    }

    /// Softmax weights `[b, lq, lk]` of an [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q, k, stats, scale, ..
            } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                Some(kernels::attention_weights(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    stats,
                    [sq[0], sq[1], sk[1], sq[2], 0],
                    *scale,
                ))
            }
            _ => None,
        }
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every trainable leaf;
    /// leaves the root does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(mismatch("backward", self.shape(root), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        let mut leaves = BTreeMap::new();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        for g in leaves.values() {
            check_finite("backward", g.data())?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let map2 = |a: &[T], b: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, map2(g, val(*b), &|gg, y| gg * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, map2(g, val(*a), &|gg, x| gg * x));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, map2(g, vb, &|gg, y| gg / y));
                }
                if self.wants(*b) {
                    let d = g
                        .iter()
                        .zip(va)
                        .zip(vb)
                        .map(|((&gg, &x), &y)| -gg * x / (y * y))
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
            Op::Exp(a) => accumulate(grads, *a, map2(g, node.value.data(), &|gg, y| gg * y)),
            Op::Log(a) => accumulate(grads, *a, map2(g, val(*a), &|gg, x| gg / x)),
            Op::Sigmoid(a) => accumulate(
                grads,
                *a,
                map2(g, node.value.data(), &|gg, y| gg * y * (T::one() - y)),
            ),
            Op::Silu(a) => accumulate(
                grads,
                *a,
                map2(g, val(*a), &|gg, x| {
                    let s = kernels::sigmoid(x);
                    gg * s * (T::one() + x * (T::one() - s))
                }),
            ),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, val(*b), true, T::zero(), &mut da);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a), true, g, false, T::zero(), &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let batch = sa[0];
                let (m, k) = if *trans_a {
                    (sa[2], sa[1])
                } else {
                    (sa[1], sa[2])
                };
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let di = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            gemm(k, n, m, bi, *trans_b, gi, true, T::zero(), di);
                        } else {
                            gemm(m, n, k, gi, false, bi, !*trans_b, T::zero(), di);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, *trans_a, T::zero(), di);
                        } else {
                            gemm(k, m, n, ai, !*trans_a, gi, false, T::zero(), di);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let nc = numel(&s[..s.len() - 2]);
                accumulate(grads, *x, kernels::upsample2x_backward(g, nc, h, w));
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                accumulate(
                    grads,
                    *x,
                    kernels::softmax_backward(node.value.data(), g, *outer, *len, *inner),
                );
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let axis_lens: Vec<usize> = parts
                    .iter()
                    .map(|p| self.nodes[p.0].value.numel() / (outer * inner))
                    .collect();
                let total: usize = axis_lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(&axis_lens) {
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, *p, d);
                    }
                    offset += len;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c, sp) = (s[0], s[1], numel(&s[2..]));
                let (dx, dgamma, dbeta) =
                    kernels::group_norm_backward(g, xhat, rstd, val(*gamma), n, c, sp, *groups);
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, map2(g, mask, &|gg, m| gg * m)),
            Op::ScaleShift { x, scale, shift } => {
                let sp = numel(&self.nodes[x.0].value.shape()[2..]);
                let (xv, sc) = (val(*x), val(*scale));
                if self.wants(*x) {
                    let d = g
                        .chunks(sp)
                        .enumerate()
                        .flat_map(|(j, ch)| ch.iter().map(move |&gg| gg * sc[j]))
                        .collect();
                    accumulate(grads, *x, d);
                }
                if self.wants(*scale) {
                    let d = g
                        .chunks(sp)
                        .zip(xv.chunks(sp))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *scale, d);
                }
                if self.wants(*shift) {
                    accumulate(
                        grads,
                        *shift,
                        g.chunks(sp).map(|c| c.iter().copied().sum()).collect(),
                    );
                }
            }
            Op::AddChannel { x, b } => {
                let sp = numel(&self.nodes[x.0].value.shape()[2..]);
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(
                        grads,
                        *b,
                        g.chunks(sp).map(|c| c.iter().copied().sum()).collect(),
                    );
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let c = self.nodes[b.0].value.numel();
                    let mut d = vec![T::zero(); c];
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                    }
                    accumulate(grads, *b, d);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_axes(axes);
                let (d, _) = kernels::permute(g, node.value.shape(), &inv);
                accumulate(grads, *x, d);
            }
            Op::Narrow { x, axis, start } => {
                let s = self.nodes[x.0].value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                stats,
                scale,
            } => {
                let (sq, sk, sv) = (
                    self.nodes[q.0].value.shape(),
                    self.nodes[k.0].value.shape(),
                    self.nodes[v.0].value.shape(),
                );
                let (dq, dk, dv) = kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    stats,
                    g,
                    sq[0],
                    sq[1],
                    sk[1],
                    sq[2],
                    sv[2],
                    *scale,
                );
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> =
                    inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = op.backward(&values, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(invalid(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.len() != self.nodes[inp.0].value.numel() {
                            return Err(mismatch(
                                op.name(),
                                self.nodes[inp.0].value.shape(),
                                &[gi.len()],
                            ));
                        }
                        if self.wants(*inp) {
                            accumulate(grads, *inp, gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
