use super::kernels::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward corruption, used to prove the gradient checker can
/// catch a broken op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackward,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
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
    Reverse {
        x: Var,
        lambda: T,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Bce {
        probs: Var,
        targets: Vec<T>,
        eps: T,
    },
    Entropy(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Values are immutable once recorded. Leaves created with [`Tape::param`]
/// receive gradients; leaves created with [`Tape::constant`] (and anything
/// computed only from constants) do not.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0)?.take()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Tape {
            nodes: Vec::new(),
            fault,
        }
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
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value, but backward contributes nothing to any ancestor.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: T) -> Result<Var> {
        if lambda.is_nan() || lambda < T::zero() {
            return Err(Error::invalid(
                "gradient_reversal",
                format!("lambda must be >= 0, got {lambda}"),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reverse { x, lambda }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = self.nodes[b.0].value.data();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(vb.len()) {
            add_into(chunk, vb);
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::AddSuffix(a, b), t))
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = self.nodes[b.0].value.data();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(vb.len()) {
            for (x, &y) in chunk.iter_mut().zip(vb) {
                *x *= y;
            }
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::MulSuffix(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * c);
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, c), t)
    }

    /// `a[..., m, k] · b[k, n] → [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].value.numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), t))
    }

    /// Batched matmul `a[bt, m, k] · b[bt, k, n]`, or `· b[bt, n, k]ᵀ` when
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bt * m * n];
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for i in 0..bt {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(m, k, n, ai, bi, ci);
            } else {
                gemm_acc(m, k, n, ai, bi, ci);
            }
        }
        let v = Tensor::new(vec![bt, m, n], out)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::BatchMatMul { a, b, trans_b }, t))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} invalid for shape {shape:?}"),
            ));
        }
        let data = kernels::permute(self.nodes[x.0].value.data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let v = Tensor::new(out_shape, data)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Permute(x, axes.to_vec()), t))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Reshape(x), t))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let mut data = src.data().to_vec();
        let n = src.shape().last().copied().unwrap_or(1);
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let v = Tensor::new(src.shape().to_vec(), data).expect("softmax shape");
        let t = self.tracked(&[x]);
        self.push(v, Op::Softmax(x), t)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let src = &self.nodes[x.0].value;
        let n = src.shape().last().copied().unwrap_or(1);
        let nf = T::from_usize(n).unwrap();
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_exact_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(src.shape().to_vec(), data).expect("layer_norm shape");
        let t = self.tracked(&[x]);
        self.push(v, Op::LayerNorm { x, inv_std }, t)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.nodes[x.0].value.map(f);
        let t = self.tracked(&[x]);
        self.push(v, op, t)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let tanh: Vec<T> = src.data().iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let data = src
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| kernels::gelu_with(v, t))
            .collect();
        let v = Tensor::new(src.shape().to_vec(), data).expect("gelu shape");
        let t = self.tracked(&[x]);
        self.push(v, Op::Gelu { x, tanh }, t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Sum of all elements, as a zero-dimensional tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum::<T>();
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.nodes[x.0].value.numel()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                add_into(dst, &src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, out)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::SumAxis { x, axis }, t))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(len).unwrap()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        let t = self.tracked(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let v = Tensor::new(out_shape, out)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, t))
    }

    /// Mean cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = Vec::with_capacity(src.len());
        let mut loss = T::zero();
        for (row, &label) in src.chunks_exact(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
        loss /= T::from_usize(labels.len()).unwrap();
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            t,
        ))
    }

    /// Mean binary cross-entropy of probabilities against targets in [0,1].
    /// Probabilities are clamped to `[eps, 1-eps]`; clamped entries pass no
    /// gradient.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T], eps: T) -> Result<Var> {
        let p = &self.nodes[probs.0].value;
        if p.numel() != targets.len() || targets.is_empty() {
            return Err(Error::invalid(
                "binary_cross_entropy",
                format!("{} probabilities vs {} targets", p.numel(), targets.len()),
            ));
        }
        let one = T::one();
        let mut loss = T::zero();
        for (&pi, &yi) in p.data().iter().zip(targets) {
            let c = pi.max(eps).min(one - eps);
            loss -= yi * c.ln() + (one - yi) * (one - c).ln();
        }
        loss /= T::from_usize(targets.len()).unwrap();
        let t = self.tracked(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            t,
        ))
    }

    /// Natural-log Shannon entropy over the last axis (`0·ln 0 = 0`).
    pub fn entropy(&mut self, p: Var) -> Var {
        let src = &self.nodes[p.0].value;
        let n = src.shape().last().copied().unwrap_or(1);
        let data: Vec<T> = src
            .data()
            .chunks_exact(n)
            .map(|row| -row.iter().filter(|&&v| v > T::zero()).map(|&v| v * v.ln()).sum::<T>())
            .collect();
        let mut shape = src.shape().to_vec();
        shape.pop();
        let v = Tensor::new(shape, data).expect("entropy shape");
        let t = self.tracked(&[p]);
        self.push(v, Op::Entropy(p), t)
    }

    /// Reverse pass from a one-element `output`, seeded with gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must have one element, shape is {:?}", out.shape()),
            ));
        }
        self.backward_with(output, Tensor::ones(out.shape().to_vec()))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // intermediate gradients are kept so callers can probe activations
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, &gy), &y) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * y;
                    }
                });
            }
            Op::AddSuffix(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                let nb = self.nodes[b.0].value.numel();
                self.accumulate(grads, *b, |d| {
                    for chunk in g.chunks_exact(nb) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulSuffix(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                self.accumulate(grads, *a, |d| {
                    for (dc, gc) in d.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for ((x, &gy), &y) in dc.iter_mut().zip(gc).zip(vb) {
                            *x += gy * y;
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (gc, ac) in g.chunks_exact(nb).zip(va.chunks_exact(nb)) {
                        for ((x, &gy), &y) in d.iter_mut().zip(gc).zip(ac) {
                            *x += gy * y;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| {
                    for (x, &gy) in d.iter_mut().zip(g) {
                        *x += gy * *c;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| gemm_nt_acc(m, n, k, g, vb, d));
                self.accumulate(grads, *b, |d| gemm_tn_acc(m, k, n, va, g, d));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let di = &mut d[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b is n×k: dA = G · B
                            gemm_acc(m, n, k, gi, bi, di);
                        } else {
                            gemm_nt_acc(m, n, k, gi, bi, di);
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n×k] = Gᵀ · A
                            gemm_tn_acc(m, n, k, gi, ai, di);
                        } else {
                            gemm_tn_acc(m, k, n, ai, gi, di);
                        }
                    }
                });
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = kernels::permute(g, node.value.shape(), &inverse);
                self.accumulate(grads, *x, |d| add_into(d, &back));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.shape().last().copied().unwrap_or(1);
                let corrupt = self.fault == Some(Fault::SoftmaxBackward);
                self.accumulate(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dx, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dx += if corrupt { yy * gy } else { yy * (gy - dot) };
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.shape().last().copied().unwrap_or(1);
                let nf = T::from_usize(n).unwrap();
                self.accumulate(grads, *x, |d| {
                    for (((dr, gr), yr), &is) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((dx, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dx += is * (gy - mg - yy * mgy);
                        }
                    }
                });
            }
            Op::Gelu { x, tanh } => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for (((dx, &gy), &xx), &t) in d.iter_mut().zip(g).zip(vx).zip(tanh) {
                        *dx += gy * kernels::gelu_grad_with(xx, t);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ((dx, &gy), &xx) in d.iter_mut().zip(g).zip(vx) {
                        if xx > T::zero() {
                            *dx += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((dx, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *dx += gy * yy * (T::one() - yy);
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ((dx, &gy), &xx) in d.iter_mut().zip(g).zip(vx) {
                        *dx += gy / xx;
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((dx, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *dx += gy * yy;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            add_into(&mut d[base..base + inner], src);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    self.accumulate(grads, *p, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let w = node.value.shape()[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + w) * inner];
                        add_into(dst, &g[o * w * inner..(o + 1) * w * inner]);
                    }
                });
            }
            Op::Reverse { x, lambda } => {
                self.accumulate(grads, *x, |d| {
                    for (dx, &gy) in d.iter_mut().zip(g) {
                        *dx -= *lambda * gy;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |d| {
                    for (i, (dr, pr)) in d.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        for (j, (dx, &p)) in dr.iter_mut().zip(pr).enumerate() {
                            let y = if j == labels[i] { T::one() } else { T::zero() };
                            *dx += scale * (p - y);
                        }
                    }
                });
            }
            Op::Bce { probs, targets, eps } => {
                let p = val(*probs);
                let one = T::one();
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                self.accumulate(grads, *probs, |d| {
                    for ((dx, &pi), &yi) in d.iter_mut().zip(p).zip(targets) {
                        if pi > *eps && pi < one - *eps {
                            *dx += scale * (-yi / pi + (one - yi) / (one - pi));
                        }
                    }
                });
            }
            Op::Entropy(x) => {
                let vx = val(*x);
                let n = self.shape(*x).last().copied().unwrap_or(1);
                self.accumulate(grads, *x, |d| {
                    for ((dr, xr), &gy) in d.chunks_exact_mut(n).zip(vx.chunks_exact(n)).zip(g) {
                        for (dx, &p) in dr.iter_mut().zip(xr) {
                            if p > T::zero() {
                                *dx -= gy * (p.ln() + T::one());
                            }
                        }
                    }
                });
            }
        }
    }
}
