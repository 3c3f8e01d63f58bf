use super::conv::{self, ConvAlgo, ConvDims, ConvGeometry, ConvSaved};
use super::{strides, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Sqrt,
    Square,
    Relu,
    Exp,
    Log,
    SignedSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op<E> {
    Leaf,
    StopGradient,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        /// Index of the `b` element used for each output element; `None`
        /// when shapes are equal.
        bmap: Option<Vec<usize>>,
    },
    AddScalar(Var),
    MulScalar(Var, E),
    Unary(Unary, Var),
    ClampMin(Var, E),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Reduce {
        kind: Reduce,
        a: Var,
        /// Output index of each input element.
        map: Vec<usize>,
        count: usize,
        /// For max: input index of each output element.
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        dims: ConvDims,
        saved: ConvSaved<E>,
    },
    BatchNorm {
        a: Var,
        inv_std: Vec<E>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    LogSoftmax(Var),
    Concat(Vec<Var>),
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// The tape is append-only; node order is a topological order of the
/// computation. A tape belongs to one training step and is dropped afterwards.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
    eps: E,
    conv_algo: ConvAlgo,
    clamp_events: usize,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of `v`, or `None` if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// For each element of `out_shape`, the index into a tensor of `b_shape`
/// broadcast against it (right-aligned, each `b` dim equal or 1).
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    if b_shape.len() > out_shape.len() {
        return Err(Error::shape(format!("cannot broadcast {b_shape:?} into {out_shape:?}")));
    }
    let offset = out_shape.len() - b_shape.len();
    let bstr = strides(b_shape);
    let mut eff = vec![0usize; out_shape.len()];
    for (i, (&bd, &bs)) in b_shape.iter().zip(&bstr).enumerate() {
        let od = out_shape[offset + i];
        if bd == od {
            eff[offset + i] = bs;
        } else if bd != 1 {
            return Err(Error::shape(format!("cannot broadcast {b_shape:?} into {out_shape:?}")));
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    if numel == 0 {
        return Ok(map);
    }
    // odometer over the outer axes, straight runs along the last one
    let last = out_shape.len() - 1;
    let (run, step) = (out_shape[last], eff[last]);
    let mut idx = vec![0usize; last];
    let mut pos = 0usize;
    for _ in 0..numel / run {
        map.extend((0..run).map(|j| pos + j * step));
        for ax in (0..last).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            eps: E::of(1e-12),
            conv_algo: ConvAlgo::default(),
            clamp_events: 0,
        }
    }

    /// Sets the magnitude floor used by `div`, `log` and the root guards.
    pub fn with_eps(mut self, eps: E) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn eps(&self) -> E {
        self.eps
    }

    /// Number of times an operand was clamped to the epsilon floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "NaN produced by {}",
            self.nodes.len()
        );
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. Gradients are produced for it only if
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Identity forward; blocks every gradient flowing back into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bmap = if ash == bsh {
            None
        } else if self.value(b).numel() == 1 {
            Some(vec![0; self.value(a).numel()])
        } else {
            Some(broadcast_map(&ash, &bsh)?)
        };
        let eps = self.eps;
        let mut clamped = 0usize;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bat = |i: usize| match &bmap {
            Some(m) => bv[m[i]],
            None => bv[i],
        };
        let data: Vec<E> = match kind {
            Binary::Add => av.iter().enumerate().map(|(i, &x)| x + bat(i)).collect(),
            Binary::Sub => av.iter().enumerate().map(|(i, &x)| x - bat(i)).collect(),
            Binary::Mul => av.iter().enumerate().map(|(i, &x)| x * bat(i)).collect(),
            Binary::Div => av
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let d = bat(i);
                    if d.abs() < eps {
                        clamped += 1;
                    }
                    x / guard_divisor(d, eps)
                })
                .collect(),
        };
        self.clamp_events += clamped;
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor { shape: ash, data };
        Ok(self.push(value, Op::Binary { kind, a, b, bmap }, ng))
    }

    /// `a + b`; `b` broadcasts into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `a / b` with divisors below the epsilon floor clamped to `±eps`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: E) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: E) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let eps = self.eps;
        let mut clamped = 0usize;
        let value = {
            let src = self.value(a);
            let data = src
                .data()
                .iter()
                .map(|&x| match kind {
                    Unary::Neg => -x,
                    Unary::Sqrt => x.max(E::zero()).sqrt(),
                    Unary::Square => x * x,
                    Unary::Relu => x.max(E::zero()),
                    Unary::Exp => x.exp(),
                    Unary::Log => {
                        if x < eps {
                            clamped += 1;
                        }
                        x.max(eps).ln()
                    }
                    Unary::SignedSqrt => x.signum() * x.abs().sqrt(),
                })
                .collect();
            Tensor {
                shape: src.shape.clone(),
                data,
            }
        };
        self.clamp_events += clamped;
        let ng = self.ng(a);
        self.push(value, Op::Unary(kind, a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    /// Square root; the backward slope is capped at `1 / (2 eps)`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    /// Natural log of `max(a, eps)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// `sign(a) * sqrt(|a|)`.
    pub fn signed_sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::SignedSqrt, a)
    }

    /// `max(a, min)`; gradient passes only where `a > min`.
    pub fn clamp_min(&mut self, a: Var, min: E) -> Var {
        let mut clamped = 0usize;
        let value = self.value(a).map(|x| {
            if x < min {
                clamped += 1;
            }
            x.max(min)
        });
        self.clamp_events += clamped;
        let ng = self.ng(a);
        self.push(value, Op::ClampMin(a, min), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            E::zero(),
            (&mut out, n as isize, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(Error::shape(format!(
                "transpose needs a 2-D operand, got {:?}",
                self.shape(a)
            )));
        };
        let src = self.value(a).data();
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let value = permute_tensor(self.value(a), perm);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), ng))
    }

    fn reduce(&mut self, kind: Reduce, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return Err(Error::shape(format!(
                    "invalid reduction axes {axes:?} for shape {shape:?}"
                )));
            }
            if shape[ax] == 0 {
                return Err(Error::shape(format!("reduction over empty axis {ax}")));
            }
            reduced[ax] = true;
        }
        if shape.iter().product::<usize>() == 0 {
            return Err(Error::shape("reduction of an empty tensor"));
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let map = broadcast_map(&shape, &kept)?;
        let out_n: usize = kept.iter().product();
        let src = self.value(a).data();
        let mut argmax = Vec::new();
        let data = match kind {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![E::zero(); out_n];
                for (i, &o) in map.iter().enumerate() {
                    acc[o] = acc[o] + src[i];
                }
                if kind == Reduce::Mean {
                    let c = E::from_usize(count);
                    acc.iter_mut().for_each(|v| *v = *v / c);
                }
                acc
            }
            Reduce::Max => {
                argmax = vec![usize::MAX; out_n];
                let mut best = vec![E::neg_infinity(); out_n];
                for (i, &o) in map.iter().enumerate() {
                    if argmax[o] == usize::MAX || src[i] > best[o] {
                        best[o] = src[i];
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let out_shape = if keepdim {
            kept
        } else {
            shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        let ng = self.ng(a);
        Ok(self.push(
            Tensor { shape: out_shape, data },
            Op::Reduce {
                kind,
                a,
                map,
                count,
                argmax,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axes, keepdim)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axes, keepdim)
    }

    /// Maximum over `axes`; ties resolve to the first occurrence.
    pub fn max(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(Reduce::Max, a, axes, keepdim)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.mean(a, &axes, false)
    }

    /// Grouped 2-D cross-correlation, `[N,C,H,W] * [O,C/g,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(input), self.shape(kernel), geom)?;
        let (out, saved) = conv::forward(
            &dims,
            self.value(input).data(),
            self.value(kernel).data(),
            self.conv_algo,
        );
        let ng = self.ng(input) || self.ng(kernel);
        let value = Tensor {
            shape: vec![dims.n, dims.o, dims.ho, dims.wo],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                dims,
                saved,
            },
            ng,
        ))
    }

    /// Normalizes each channel (axis 1) by its batch mean and biased variance.
    ///
    /// Returns the normalized tensor together with the per-channel mean and
    /// biased variance, for running-statistics bookkeeping.
    pub fn batch_norm(&mut self, a: Var, eps: E) -> Result<(Var, Vec<E>, Vec<E>)> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("batch_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        if m < 2 {
            return Err(Error::shape(format!(
                "batch_norm needs at least 2 values per channel, got {m}"
            )));
        }
        let src = self.value(a).data();
        let mut mean = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                mean[ch] += src[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                var[ch] += src[off..off + inner]
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<E> = var.iter().map(|&v| E::of(1.0 / (v + eps.as_f64()).sqrt())).collect();
        let mean_e: Vec<E> = mean.iter().map(|&v| E::of(v)).collect();
        let mut data = vec![E::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    data[i] = (src[i] - mean_e[ch]) * inv_std[ch];
                }
            }
        }
        let ng = self.ng(a);
        let var_e = var.iter().map(|&v| E::of(v)).collect();
        let out = self.push(Tensor { shape, data }, Op::BatchNorm { a, inv_std }, ng);
        Ok((out, mean_e, var_e))
    }

    /// `x * scale[c] + shift[c]` over channel axis 1.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("channel_affine needs [N, C, ...], got {shape:?}")));
        }
        let c = shape[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(format!(
                "channel_affine parameters must be [{c}], got {:?} and {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let (xs, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let data = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * sc[ch] + sh[ch]
            })
            .collect();
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(Tensor { shape, data }, Op::ChannelAffine { x, scale, shift }, ng))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let &[r, k] = self.shape(a) else {
            return Err(Error::shape(format!(
                "log_softmax needs a 2-D operand, got {:?}",
                self.shape(a)
            )));
        };
        let src = self.value(a).data();
        let mut data = vec![E::zero(); r * k];
        for i in 0..r {
            let row = &src[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<E>().ln();
            for j in 0..k {
                data[i * k + j] = row[j] - lse;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                shape: vec![r, k],
                data,
            },
            Op::LogSoftmax(a),
            ng,
        ))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh.is_empty() || sh[1..] != tail[..] {
                return Err(Error::shape(format!("concat shape mismatch {sh:?} vs [_, {tail:?}]")));
            }
            rows += sh[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Reverse pass from a single-element loss with seed 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss), E::one());
        self.backward_with_seed(loss, seed)
    }

    /// Reverse pass from `out` with an explicit upstream gradient.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor<E>) -> Result<Gradients<E>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(format!(
                "seed shape {:?} differs from output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor<E>>], to: Var, g: Tensor<E>) {
        if self.nodes[to.0].needs_grad {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate(&self, node: &Node<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Binary { kind, a, b, bmap } => {
                let av = self.value(*a).data();
                let bt = self.value(*b);
                let bv = bt.data();
                let bi = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
                let eps = self.eps;
                if self.ng(*a) {
                    let da: Vec<E> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * bv[bi(i)]).collect(),
                        Binary::Div => (0..gd.len()).map(|i| gd[i] / guard_divisor(bv[bi(i)], eps)).collect(),
                    };
                    self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![E::zero(); bt.numel()];
                    for i in 0..gd.len() {
                        let j = bi(i);
                        let term = match kind {
                            Binary::Add => gd[i],
                            Binary::Sub => -gd[i],
                            Binary::Mul => gd[i] * av[i],
                            Binary::Div => {
                                let d = guard_divisor(bv[j], eps);
                                -gd[i] * av[i] / (d * d)
                            }
                        };
                        db[j] = db[j] + term;
                    }
                    self.send(grads, *b, Tensor::new(bt.shape(), db).unwrap());
                }
            }
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.send(grads, *a, g.map(|v| v * *s)),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let two = E::of(2.0);
                let eps = self.eps;
                let da = (0..gd.len())
                    .map(|i| {
                        gd[i]
                            * match kind {
                                Unary::Neg => -E::one(),
                                Unary::Sqrt => E::one() / (two * y[i].max(eps)),
                                Unary::Square => two * x[i],
                                Unary::Relu => {
                                    if x[i] > E::zero() {
                                        E::one()
                                    } else {
                                        E::zero()
                                    }
                                }
                                Unary::Exp => y[i],
                                Unary::Log => {
                                    if x[i] < eps {
                                        E::zero()
                                    } else {
                                        E::one() / x[i]
                                    }
                                }
                                Unary::SignedSqrt => E::one() / (two * y[i].abs().max(eps)),
                            }
                    })
                    .collect();
                self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
            }
            Op::ClampMin(a, min) => {
                let x = self.value(*a).data();
                let da = (0..gd.len())
                    .map(|i| if x[i] > *min { gd[i] } else { E::zero() })
                    .collect();
                self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
            }
            Op::Matmul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.ng(*a) {
                    // da [m,k] = g [m,n] x b^T [n,k]
                    let mut da = vec![E::zero(); m * k];
                    E::gemm(
                        m,
                        n,
                        k,
                        E::one(),
                        (gd, n as isize, 1),
                        (bt.data(), 1, n as isize),
                        E::zero(),
                        (&mut da, k as isize, 1),
                    );
                    self.send(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.ng(*b) {
                    // db [k,n] = a^T [k,m] x g [m,n]
                    let mut db = vec![E::zero(); k * n];
                    E::gemm(
                        k,
                        m,
                        n,
                        E::one(),
                        (at.data(), 1, k as isize),
                        (gd, n as isize, 1),
                        E::zero(),
                        (&mut db, n as isize, 1),
                    );
                    self.send(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![E::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = gd[i * c + j];
                    }
                }
                self.send(grads, *a, Tensor::new(&[c, r], da).unwrap());
            }
            Op::Reshape(a) => {
                let da = g.clone().reshape(self.shape(*a)).unwrap();
                self.send(grads, *a, da);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.send(grads, *a, permute_tensor(g, &inv));
            }
            Op::Reduce {
                kind,
                a,
                map,
                count,
                argmax,
            } => {
                let mut da = vec![E::zero(); map.len()];
                match kind {
                    Reduce::Sum => {
                        for (i, &o) in map.iter().enumerate() {
                            da[i] = gd[o];
                        }
                    }
                    Reduce::Mean => {
                        let c = E::from_usize(*count);
                        for (i, &o) in map.iter().enumerate() {
                            da[i] = gd[o] / c;
                        }
                    }
                    Reduce::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            da[i] = gd[o];
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
            }
            Op::Conv2d {
                input,
                kernel,
                dims,
                saved,
            } => {
                let (dx, dk) = conv::backward(
                    dims,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    saved,
                    gd,
                    self.ng(*input),
                    self.ng(*kernel),
                );
                if let Some(dx) = dx {
                    self.send(grads, *input, Tensor::new(self.shape(*input), dx).unwrap());
                }
                if let Some(dk) = dk {
                    self.send(grads, *kernel, Tensor::new(self.shape(*kernel), dk).unwrap());
                }
            }
            Op::BatchNorm { a, inv_std } => {
                let shape = self.shape(*a);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = E::from_usize(n * inner);
                let xhat = node.value.data();
                let mut sum_g = vec![E::zero(); c];
                let mut sum_gx = vec![E::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g[ch] = sum_g[ch] + gd[i];
                            sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i];
                        }
                    }
                }
                let mut da = vec![E::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        let k = inv_std[ch] / m;
                        for i in off..off + inner {
                            da[i] = k * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(shape, da).unwrap());
            }
            Op::ChannelAffine { x, scale, shift } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let xs = self.value(*x).data();
                let sc = self.value(*scale).data();
                if self.ng(*x) {
                    let dx = (0..gd.len()).map(|i| gd[i] * sc[(i / inner) % c]).collect();
                    self.send(grads, *x, Tensor::new(shape, dx).unwrap());
                }
                if self.ng(*scale) || self.ng(*shift) {
                    let mut dsc = vec![E::zero(); c];
                    let mut dsh = vec![E::zero(); c];
                    for i in 0..gd.len() {
                        let ch = (i / inner) % c;
                        dsc[ch] = dsc[ch] + gd[i] * xs[i];
                        dsh[ch] = dsh[ch] + gd[i];
                    }
                    self.send(grads, *scale, Tensor::new(&[c], dsc).unwrap());
                    self.send(grads, *shift, Tensor::new(&[c], dsh).unwrap());
                }
            }
            Op::LogSoftmax(a) => {
                let (r, k) = (g.shape()[0], g.shape()[1]);
                let y = node.value.data();
                let mut da = vec![E::zero(); r * k];
                for i in 0..r {
                    let gs: E = gd[i * k..(i + 1) * k].iter().copied().sum();
                    for j in 0..k {
                        da[i * k + j] = gd[i * k + j] - y[i * k + j].exp() * gs;
                    }
                }
                self.send(grads, *a, Tensor::new(&[r, k], da).unwrap());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let piece = Tensor::new(self.shape(p), gd[off..off + len].to_vec()).unwrap();
                    self.send(grads, p, piece);
                    off += len;
                }
            }
        }
    }
}

#[inline]
fn guard_divisor<E: Element>(d: E, eps: E) -> E {
    if d.abs() >= eps {
        d
    } else if d < E::zero() {
        -eps
    } else {
        eps
    }
}

fn permute_tensor<E: Element>(t: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_str = strides(shape);
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    let src = t.data();
    for _ in 0..numel {
        data.push(src[pos]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            pos += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= src_str[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor { shape: out_shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_backward_with_seed() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 8.0]);
        let g = tape.backward_with_seed(y, t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sqrt_slope_is_half_inverse_root() {
        for (x0, slope) in [(4.0, 0.25), (16.0, 0.125)] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::scalar(x0), true);
            let y = tape.sqrt(x);
            let g = tape.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap().data(), &[slope]);
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);

        let bad = tape.constant(t(&[3, 1], &[0.0; 3]));
        assert!(matches!(tape.matmul(r, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 6.0]), true);
        let m = tape.mean(v, &[0], false).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.25; 4]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(a, &[0], false).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        assert_eq!(tape.shape(s), &[2]);

        let three = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(three, &[0], false).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);

        assert!(tape.sum(a, &[2], false).is_err());
        let empty = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(tape.sum(empty, &[0], false).is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 5.0, 5.0, 7.0, 0.0, 2.0]), true);
        let m = tape.max(x, &[1], false).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let s = tape.sum_all(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_blocks_the_stopped_factor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s).data(), &[3.0]);
        let y = tape.mul(s, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn square_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.square(x);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn two_losses_accumulate_additively() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.5, -0.5]), true);
        let l1 = {
            let s = tape.square(w);
            tape.sum_all(s).unwrap()
        };
        let l2 = {
            let e = tape.exp(w);
            tape.sum_all(e).unwrap()
        };
        let both = tape.add(l1, l2).unwrap();
        let g1 = tape.backward(l1).unwrap().get(w).unwrap().clone();
        let g2 = tape.backward(l2).unwrap().get(w).unwrap().clone();
        let g = tape.backward(both).unwrap().get(w).unwrap().clone();
        for i in 0..2 {
            assert_eq!(g.data()[i], g1.data()[i] + g2.data()[i]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn div_clamps_tiny_divisors_and_counts() {
        let mut tape = Tape::<f64>::new().with_eps(1e-6);
        let a = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 2.0]));
        let y = tape.div(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1e6, 0.5]);
        assert_eq!(tape.clamp_events(), 1);
    }

    #[test]
    fn broadcasting_trailing_and_unit_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let bias = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]), true);
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = tape.leaf(t(&[2, 1], &[2.0, 3.0]), true);
        let z = tape.mul(a, col).unwrap();
        assert_eq!(tape.value(z).data(), &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
        let s = tape.sum_all(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(col).unwrap().data(), &[6.0, 15.0]);

        let bad = tape.constant(t(&[2], &[0.0, 0.0]));
        assert!(tape.add(a, bad).is_err());
        let _ = y;
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(q), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn batch_norm_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let (y, mean, var) = tape.batch_norm(x, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        assert_eq!(mean, vec![2.0]);
        assert_eq!(var, vec![1.0]);
        let one = tape.constant(t(&[1, 1], &[1.0]));
        assert!(tape.batch_norm(one, 0.0).is_err());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        let v = tape.value(y).data();
        let s0: f64 = v[..3].iter().map(|l| l.exp()).sum();
        assert!((s0 - 1.0).abs() < 1e-15);
        assert!((v[3] + 3f64.ln()).abs() < 1e-15);
    }
}
