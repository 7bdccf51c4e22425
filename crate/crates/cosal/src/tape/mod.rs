//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are methods on [`Tape`]: each computes a fresh output tensor and, when
//! any input requires gradients, records a closure that maps the output
//! gradient to input gradients. [`Tape::backward`] sweeps the records in
//! reverse, accumulating into multi-consumer nodes.
//!
//! A tape is confined to one thread for one forward/backward pass.

mod conv;
mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{CosalError, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, reduce_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<(usize, Tensor<S>)>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    back: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Only leaves with `requires_grad` receive
    /// gradients after backward.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, back: Option<BackFn<S>>) -> ValueId {
        self.nodes.push(Node { value, requires_grad, back });
        ValueId(self.nodes.len() - 1)
    }

    pub(crate) fn record(
        &mut self,
        value: Tensor<S>,
        parents: &[ValueId],
        back: impl Fn(&Tensor<S>) -> Vec<(usize, Tensor<S>)> + 'static,
    ) -> ValueId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        if requires_grad {
            self.push(value, true, Some(Box::new(back)))
        } else {
            self.push(value, false, None)
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: ValueId) -> Result<Gradients<S>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(CosalError::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_vec(root_val.shape.clone(), vec![S::one()]));
        for i in (0..=root.0).rev() {
            let Some(ref back) = self.nodes[i].back else { continue };
            let Some(grad_out) = grads[i].clone() else { continue };
            for (pid, g) in back(&grad_out) {
                if !self.nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.accumulate(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ── Elementwise binary (broadcasting) ───────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        Ok(self.record(out, &[a, b], move |g| {
            vec![(a.0, reduce_to_shape(g, &sa)), (b.0, reduce_to_shape(g, &sb))]
        }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        Ok(self.record(out, &[a, b], move |g| {
            let neg = g.map(|x| -x);
            vec![(a.0, reduce_to_shape(g, &sa)), (b.0, reduce_to_shape(&neg, &sb))]
        }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = broadcast_zip(&va, &vb, |x, y| x * y)?;
        Ok(self.record(out, &[a, b], move |g| {
            let ga = broadcast_zip(g, &vb, |x, y| x * y).unwrap();
            let gb = broadcast_zip(g, &va, |x, y| x * y).unwrap();
            vec![(a.0, reduce_to_shape(&ga, &va.shape)), (b.0, reduce_to_shape(&gb, &vb.shape))]
        }))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: ValueId, c: S) -> ValueId {
        let out = self.value(a).map(|x| x * c);
        self.record(out, &[a], move |g| vec![(a.0, g.map(|x| x * c))])
    }

    // ── Matmul ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(CosalError::shape("matmul expects 2-D operands".to_string()));
        }
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        if k != k2 {
            return Err(CosalError::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, S::one(), &va.data, &vb.data, S::zero(), &mut out);
        let out = Tensor::from_vec(vec![m, n], out);
        Ok(self.record(out, &[a, b], move |g| {
            // dA = dC · Bᵀ, dB = Aᵀ · dC
            let bt = transpose2(&vb);
            let at = transpose2(&va);
            let mut da = vec![S::zero(); m * k];
            S::gemm(m, n, k, S::one(), &g.data, &bt.data, S::zero(), &mut da);
            let mut db = vec![S::zero(); k * n];
            S::gemm(k, m, n, S::one(), &at.data, &g.data, S::zero(), &mut db);
            vec![
                (a.0, Tensor::from_vec(vec![m, k], da)),
                (b.0, Tensor::from_vec(vec![k, n], db)),
            ]
        }))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a).clone();
        let out = va.map(|x| if x > S::zero() { x } else { S::zero() });
        self.record(out, &[a], move |g| {
            let gin = Tensor::from_vec(
                va.shape.clone(),
                va.data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| if x > S::zero() { gy } else { S::zero() })
                    .collect(),
            );
            vec![(a.0, gin)]
        })
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(stable_sigmoid);
        let y = out.clone();
        self.record(out, &[a], move |g| {
            let gin = Tensor::from_vec(
                y.shape.clone(),
                y.data
                    .iter()
                    .zip(&g.data)
                    .map(|(&s, &gy)| gy * s * (S::one() - s))
                    .collect(),
            );
            vec![(a.0, gin)]
        })
    }

    /// Per-sample, per-channel normalization of an N×C×H×W map to zero mean
    /// and unit variance over the spatial axes (no affine part).
    pub fn instance_norm(&mut self, a: ValueId, eps: f64) -> Result<ValueId> {
        let va = self.value(a).clone();
        if va.rank() != 4 {
            return Err(CosalError::shape(format!(
                "instance_norm expects N×C×H×W, got {:?}",
                va.shape
            )));
        }
        let hw = va.shape[2] * va.shape[3];
        let planes = va.shape[0] * va.shape[1];
        let mut out = vec![S::zero(); va.numel()];
        let mut inv_std = vec![0.0f64; planes];
        for p in 0..planes {
            let xs = &va.data[p * hw..(p + 1) * hw];
            let mean = xs.iter().map(|v| v.to_f()).sum::<f64>() / hw as f64;
            let var = xs.iter().map(|v| (v.to_f() - mean).powi(2)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[p] = inv;
            for (o, &x) in out[p * hw..(p + 1) * hw].iter_mut().zip(xs) {
                *o = S::from_f((x.to_f() - mean) * inv);
            }
        }
        let y = Tensor::from_vec(va.shape.clone(), out);
        let y_back = y.clone();
        Ok(self.record(y, &[a], move |g| {
            let mut gin = vec![S::zero(); g.numel()];
            for p in 0..planes {
                let ys = &y_back.data[p * hw..(p + 1) * hw];
                let gs = &g.data[p * hw..(p + 1) * hw];
                let g_mean = gs.iter().map(|v| v.to_f()).sum::<f64>() / hw as f64;
                let gy_mean = gs
                    .iter()
                    .zip(ys)
                    .map(|(gv, yv)| gv.to_f() * yv.to_f())
                    .sum::<f64>()
                    / hw as f64;
                for ((o, &gv), &yv) in gin[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(ys) {
                    *o = S::from_f(inv_std[p] * (gv.to_f() - g_mean - yv.to_f() * gy_mean));
                }
            }
            vec![(a.0, Tensor::from_vec(y_back.shape.clone(), gin))]
        }))
    }

    /// Per-position RMS normalization over the channel axis of an N×C×H×W
    /// map: y = x / sqrt(mean_c x² + eps). Leaves the per-channel scale of
    /// a unit-RMS vector at 1, so downstream magnitudes stay comparable.
    pub fn channel_rms_norm(&mut self, a: ValueId, eps: f64) -> Result<ValueId> {
        let va = self.value(a).clone();
        if va.rank() != 4 {
            return Err(CosalError::shape(format!(
                "channel_rms_norm expects N×C×H×W, got {:?}",
                va.shape
            )));
        }
        let (n, c, hw) = (va.shape[0], va.shape[1], va.shape[2] * va.shape[3]);
        let mut out = vec![S::zero(); va.numel()];
        let mut inv_r = vec![0.0f64; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let base = b * c * hw + p;
                let ms = (0..c)
                    .map(|j| va.data[base + j * hw].to_f().powi(2))
                    .sum::<f64>()
                    / c as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                inv_r[b * hw + p] = inv;
                for j in 0..c {
                    out[base + j * hw] = S::from_f(va.data[base + j * hw].to_f() * inv);
                }
            }
        }
        let y = Tensor::from_vec(va.shape.clone(), out);
        let y_back = y.clone();
        Ok(self.record(y, &[a], move |g| {
            // dx = (g − y · mean_c(g ⊙ y)) / r
            let mut gin = vec![S::zero(); g.numel()];
            for b in 0..n {
                for p in 0..hw {
                    let base = b * c * hw + p;
                    let dot = (0..c)
                        .map(|j| {
                            g.data[base + j * hw].to_f() * y_back.data[base + j * hw].to_f()
                        })
                        .sum::<f64>()
                        / c as f64;
                    let inv = inv_r[b * hw + p];
                    for j in 0..c {
                        let k = base + j * hw;
                        gin[k] =
                            S::from_f((g.data[k].to_f() - y_back.data[k].to_f() * dot) * inv);
                    }
                }
            }
            vec![(a.0, Tensor::from_vec(y_back.shape.clone(), gin))]
        }))
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(CosalError::invalid(format!("softmax axis {axis} out of range")));
        }
        let shape = va.shape.clone();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![S::zero(); va.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..axis_len {
                    mx = mx.max(va.data[base + j * inner]);
                }
                let mut sum = S::zero();
                for j in 0..axis_len {
                    let e = (va.data[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..axis_len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let out = Tensor::from_vec(shape.clone(), out);
        let y = out.clone();
        Ok(self.record(out, &[a], move |g| {
            // dx = y ⊙ (g − Σ_axis g ⊙ y)
            let mut gin = vec![S::zero(); y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = S::zero();
                    for j in 0..axis_len {
                        let k = base + j * inner;
                        dot += g.data[k] * y.data[k];
                    }
                    for j in 0..axis_len {
                        let k = base + j * inner;
                        gin[k] = y.data[k] * (g.data[k] - dot);
                    }
                }
            }
            vec![(a.0, Tensor::from_vec(y.shape.clone(), gin))]
        }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Max over one axis. Returns the reduced values and the recorded
    /// argmax (flat index within each reduced slice, first index on ties).
    pub fn reduce_max(&mut self, a: ValueId, axis: usize) -> Result<(ValueId, Vec<usize>)> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(CosalError::invalid(format!("reduce_max axis {axis} out of range")));
        }
        let shape = va.shape.clone();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out_n = outer * inner;
        let mut vals = vec![S::zero(); out_n];
        let mut arg = vec![0usize; out_n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut best = va.data[base];
                let mut best_j = 0usize;
                for j in 1..axis_len {
                    let v = va.data[base + j * inner];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                vals[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        let arg_clone = arg.clone();
        let in_shape = shape;
        let id = self.record(Tensor::from_vec(out_shape, vals), &[a], move |g| {
            let mut gin = vec![S::zero(); in_shape.iter().product()];
            for o in 0..outer {
                for i in 0..inner {
                    let j = arg_clone[o * inner + i];
                    gin[o * axis_len * inner + j * inner + i] = g.data[o * inner + i];
                }
            }
            vec![(a.0, Tensor::from_vec(in_shape.clone(), gin))]
        });
        Ok((id, arg))
    }

    /// Sum over a set of axes; reduced axes kept as size 1 when `keepdims`.
    pub fn reduce_sum(&mut self, a: ValueId, axes: &[usize], keepdims: bool) -> Result<ValueId> {
        let va = self.value(a);
        let rank = va.rank();
        for &ax in axes {
            if ax >= rank {
                return Err(CosalError::invalid(format!("reduce axis {ax} out of range")));
            }
        }
        let in_shape = va.shape.clone();
        let mut keep_shape = in_shape.clone();
        for &ax in axes {
            keep_shape[ax] = 1;
        }
        let reduced = reduce_to_shape(va, &keep_shape);
        let out = if keepdims {
            reduced
        } else {
            let final_shape: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            Tensor::from_vec(final_shape, reduced.data)
        };
        Ok(self.record(out, &[a], move |g| {
            let gk = Tensor::from_vec(keep_shape.clone(), g.data.clone());
            let ones = Tensor::from_vec(in_shape.clone(), vec![S::one(); in_shape.iter().product()]);
            let gin = broadcast_zip(&gk, &ones, |x, y| x * y).unwrap();
            vec![(a.0, gin)]
        }))
    }

    /// Mean over a set of axes.
    pub fn reduce_mean(&mut self, a: ValueId, axes: &[usize], keepdims: bool) -> Result<ValueId> {
        let count: usize = axes.iter().map(|&ax| self.value(a).shape[ax]).product();
        let s = self.reduce_sum(a, axes, keepdims)?;
        Ok(self.scale(s, S::one() / S::from_f(count as f64)))
    }

    /// Sum of all elements, as a 0-dim scalar.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let va = self.value(a);
        let total = va.data.iter().fold(S::zero(), |acc, &x| acc + x);
        let in_shape = va.shape.clone();
        self.record(Tensor::scalar(total), &[a], move |g| {
            let gv = g.data[0];
            vec![(
                a.0,
                Tensor::from_vec(in_shape.clone(), vec![gv; in_shape.iter().product()]),
            )]
        })
    }

    /// Mean of all elements, as a 0-dim scalar.
    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::from_f(n as f64))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: ValueId, new_shape: &[usize]) -> Result<ValueId> {
        let va = self.value(a);
        if new_shape.iter().product::<usize>() != va.numel() {
            return Err(CosalError::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                va.shape, new_shape
            )));
        }
        let old_shape = va.shape.clone();
        let out = Tensor::from_vec(new_shape.to_vec(), va.data.clone());
        Ok(self.record(out, &[a], move |g| {
            vec![(a.0, Tensor::from_vec(old_shape.clone(), g.data.clone()))]
        }))
    }

    pub fn permute(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        let va = self.value(a);
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(CosalError::invalid(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let out = permute_tensor(va, axes);
        let mut inverse = vec![0usize; rank];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.record(out, &[a], move |g| {
            vec![(a.0, permute_tensor(g, &inverse))]
        }))
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CosalError::invalid("concat of zero tensors".to_string()));
        }
        let first_shape = self.value(parts[0]).shape.clone();
        let rank = first_shape.len();
        if axis >= rank {
            return Err(CosalError::invalid(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if s.len() != rank
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first_shape[i])
            {
                return Err(CosalError::shape(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    s, first_shape
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); out_shape.iter().product()];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            let alen = vp.shape[axis];
            for o in 0..outer {
                let src = &vp.data[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
            spans.push((p.0, offset, alen, vp.shape.clone()));
            offset += alen;
        }
        let out = Tensor::from_vec(out_shape, data);
        let parent_ids: Vec<ValueId> = parts.to_vec();
        Ok(self.record(out, &parent_ids, move |g| {
            spans
                .iter()
                .map(|(pid, off, alen, shape)| {
                    let mut gin = vec![S::zero(); shape.iter().product()];
                    for o in 0..outer {
                        let src_base = o * axis_total * inner + off * inner;
                        gin[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g.data[src_base..src_base + alen * inner]);
                    }
                    (*pid, Tensor::from_vec(shape.clone(), gin))
                })
                .collect()
        }))
    }
}

pub(crate) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn transpose2<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let rank = t.rank();
    let in_strides = t.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| t.shape[ax]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let step: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    for _ in 0..n {
        out.push(t.data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= step[d] * out_shape[d];
        }
    }
    Tensor::from_vec(out_shape, out)
}
