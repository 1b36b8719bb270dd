//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so many tapes can run
//! against the same frozen store concurrently. [`Tape::backward`] walks the
//! record in reverse and returns gradients keyed both by node and by
//! parameter name.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{axis_extents, row_major_strides, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn forward<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
            }
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Gelu => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias(Var, Var),
    Act(Var, Activation),
    Softmax(Var, usize),
    L1Normalize(Var, usize),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    BroadcastTo(Var),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Chamfer {
        pred: Var,
        gt: Var,
        pred_nn: Vec<usize>,
        gt_nn: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T: Real> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter the tape touched.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// Record of one forward pass.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: HashMap<String, Var>,
    macs: u64,
}

impl<'p, T: Real> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            macs: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Multiply-accumulate operations performed by matrix products so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Borrow a named parameter; repeated requests return the same node so
    /// gradients from shared uses accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            value: Cow::Borrowed(&entry.value),
            op: Op::Leaf,
            requires_grad: entry.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `[..., m, k] x [k, n] -> [..., m, n]` with leading axes folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape(format!("matmul {ash:?} x {bsh:?}")));
        }
        let inner = bsh[0];
        let cols = bsh[1];
        let rows = ash.iter().product::<usize>() / inner.max(1);
        let mut out = vec![T::zero(); rows * cols];
        T::gemm(
            rows,
            inner,
            cols,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        self.macs += (rows * inner * cols) as u64;
        let mut shape = ash;
        *shape.last_mut().unwrap() = cols;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            },
            rg,
        ))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::shape(format!("bmm {ash:?} x {bsh:?}")));
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if bk != k {
            return Err(Error::shape(format!(
                "bmm inner mismatch {ash:?} x {bsh:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x [..., c] + bias [c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.forward(v));
        let rg = self.rg(x);
        self.push(out, Op::Act(x, act), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    /// Divide by the l1 norm along `axis`.
    pub fn l1_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let floor = l1_floor::<T>();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| src[at(j)].abs()).sum::<T>().max(floor);
                for j in 0..len {
                    out[at(j)] = src[at(j)] / norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::L1Normalize(x, axis), rg))
    }

    /// Max over `axis` (removed from the shape); ties route gradient to the
    /// lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(Error::shape("max over an empty axis"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for j in 1..len {
                    let at = base + j * inner;
                    if src[at] > src[best] {
                        best = at;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, argmax }, rg))
    }

    /// Mean over `axis` (removed from the shape).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(Error::shape("mean over an empty axis"));
        }
        let src = self.value(x).data();
        // f64 accumulation makes f32 means independent of element order
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    acc[o * inner + i] += src[o * len * inner + j * inner + i].to_f64_lossy();
                }
            }
        }
        let out: Vec<T> = acc.into_iter().map(|v| T::from_f64_lossy(v / len as f64)).collect();
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis(x, axis), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let map = permute_source_indices(&shape, perm);
        let src = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&s| src[s]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat {:?} with {:?} on axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Expand size-1 axes to `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(shape, self.shape(x))?;
        let src = self.value(x).data();
        let out: Vec<T> = map.iter().map(|&s| src[s]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo(x), rg))
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(indices)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectRows(x, indices.to_vec()), rg))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer norm of a scalar"))?;
        if c == 0 || self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "layer norm input {shape:?} with gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let cn = T::from_usize(c).unwrap();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / c;
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Squared-L2 Chamfer distance between `pred [B, P, 3]` and `gt [B, Q, 3]`,
    /// averaged over the B pairs.
    pub fn chamfer_l2(&mut self, pred: Var, gt: Var) -> Result<Var> {
        let (ps, gs) = (self.shape(pred).to_vec(), self.shape(gt).to_vec());
        if ps.len() != 3 || gs.len() != 3 || ps[0] != gs[0] || ps[2] != 3 || gs[2] != 3 {
            return Err(Error::shape(format!("chamfer {ps:?} vs {gs:?}")));
        }
        let (batch, np, ng) = (ps[0], ps[1], gs[1]);
        if batch == 0 || np == 0 || ng == 0 {
            return Err(Error::EmptyPointSet);
        }
        let pd = self.value(pred).data();
        let gd = self.value(gt).data();
        let mut pred_nn = Vec::with_capacity(batch * np);
        let mut gt_nn = Vec::with_capacity(batch * ng);
        let mut total = T::zero();
        for b in 0..batch {
            let p = &pd[b * np * 3..(b + 1) * np * 3];
            let g = &gd[b * ng * 3..(b + 1) * ng * 3];
            let mut forward = T::zero();
            for i in 0..np {
                let (j, d) = nearest(&p[i * 3..i * 3 + 3], g);
                pred_nn.push(j);
                forward = forward + d;
            }
            let mut backward = T::zero();
            for j in 0..ng {
                let (i, d) = nearest(&g[j * 3..j * 3 + 3], p);
                gt_nn.push(i);
                backward = backward + d;
            }
            total = total + forward / T::from_usize(np).unwrap() + backward / T::from_usize(ng).unwrap();
        }
        let loss = total / T::from_usize(batch).unwrap();
        let rg = self.rg(pred) || self.rg(gt);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Chamfer {
                pred,
                gt,
                pred_nn,
                gt_nn,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits [N, C]` against integer labels, with
    /// optional label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape(format!(
                "cross entropy logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelMismatch(format!("label {bad} with {c} classes")));
        }
        let src = self.value(logits).data();
        let eps = T::from_f64_lossy(smoothing);
        let off = eps / T::from_usize(c).unwrap();
        let mut probs = vec![T::zero(); n * c];
        let mut targets = vec![off; n * c];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            targets[r * c + labels[r]] = targets[r * c + labels[r]] + T::one() - eps;
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                loss = loss - targets[r * c + j] * logp;
            }
        }
        let loss = loss / T::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, &v) in &self.param_vars {
            if self.nodes[v.0].requires_grad {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                params.insert(name.clone(), g);
            }
        }
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.rg(v) {
                        let map = broadcast_map(out.shape(), self.shape(v)).unwrap();
                        let acc = slot(grads, v, self.shape(v));
                        let d = acc.data_mut();
                        for (o, &s) in map.iter().enumerate() {
                            d[s] = d[s] + g.data()[o];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&v, &other) in [(a, b), (b, a)] {
                    if self.rg(v) {
                        let map_v = broadcast_map(out.shape(), self.shape(v)).unwrap();
                        let map_o = broadcast_map(out.shape(), self.shape(other)).unwrap();
                        let od = self.value(other).data();
                        let acc = slot(grads, v, self.shape(v));
                        let d = acc.data_mut();
                        for (o, (&s, &t)) in map_v.iter().zip(&map_o).enumerate() {
                            d[s] = d[s] + g.data()[o] * od[t];
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.rg(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    for (d, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + gv * *f;
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
            } => {
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    let acc = slot(grads, *a, self.shape(*a));
                    T::gemm(*rows, *cols, *inner, g.data(), false, bd, true, T::one(), acc.data_mut());
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    let acc = slot(grads, *b, self.shape(*b));
                    T::gemm(*inner, *rows, *cols, ad, true, g.data(), false, T::one(), acc.data_mut());
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    let acc = slot(grads, *a, self.shape(*a));
                    let ad = acc.data_mut();
                    for i in 0..*batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // dA = dC op(B)^T
                        T::gemm(m, n, k, gi, false, bi, !trans_b, T::one(), &mut ad[i * m * k..(i + 1) * m * k]);
                    }
                }
                if self.rg(*b) {
                    let adata = self.value(*a).data();
                    let acc = slot(grads, *b, self.shape(*b));
                    let bd = acc.data_mut();
                    for i in 0..*batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &adata[i * m * k..(i + 1) * m * k];
                        let bi = &mut bd[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored [n, k]: dB = dC^T A
                            T::gemm(n, m, k, gi, true, ai, false, T::one(), bi);
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, T::one(), bi);
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    slot(grads, *x, self.shape(*x)).add_assign(g);
                }
                if self.rg(*bias) {
                    let c = self.shape(*bias)[0];
                    let acc = slot(grads, *bias, &[c]);
                    let d = acc.data_mut();
                    for row in g.data().chunks(c.max(1)) {
                        for (dv, &gv) in d.iter_mut().zip(row) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }
            Op::Act(x, act) => {
                if self.rg(*x) {
                    let xd = self.value(*x).data();
                    let acc = slot(grads, *x, self.shape(*x));
                    for (i, d) in acc.data_mut().iter_mut().enumerate() {
                        *d = *d + g.data()[i] * act.derivative(xd[i], out.data()[i]);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.rg(*x) {
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let y = out.data();
                    let acc = slot(grads, *x, self.shape(*x));
                    let d = acc.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g.data()[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = d[at(j)] + y[at(j)] * (g.data()[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L1Normalize(x, axis) => {
                if self.rg(*x) {
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let xd = self.value(*x).data();
                    let floor = l1_floor::<T>();
                    let acc = slot(grads, *x, self.shape(*x));
                    let d = acc.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let raw: T = (0..len).map(|j| xd[at(j)].abs()).sum();
                            let norm = raw.max(floor);
                            let clamped = raw < floor;
                            let dot: T = (0..len).map(|j| g.data()[at(j)] * xd[at(j)]).sum();
                            for j in 0..len {
                                let mut v = g.data()[at(j)] / norm;
                                if !clamped {
                                    v = v - xd[at(j)].signum() * dot / (norm * norm);
                                }
                                d[at(j)] = d[at(j)] + v;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if self.rg(*x) {
                    let acc = slot(grads, *x, self.shape(*x));
                    let d = acc.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] = d[src] + gv;
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.rg(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (outer, len, inner) = axis_extents(&xs, *axis);
                    let scale = T::one() / T::from_usize(len).unwrap();
                    let acc = slot(grads, *x, &xs);
                    let d = acc.data_mut();
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let at = o * len * inner + j * inner + i;
                                d[at] = d[at] + g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let gv = g.item();
                    let acc = slot(grads, *x, self.shape(*x));
                    for d in acc.data_mut() {
                        *d = *d + gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let acc = slot(grads, *x, self.shape(*x));
                    for (d, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Permute(x, perm) => {
                if self.rg(*x) {
                    let xs = self.shape(*x).to_vec();
                    let map = permute_source_indices(&xs, perm);
                    let acc = slot(grads, *x, &xs);
                    let d = acc.data_mut();
                    for (o, &s) in map.iter().enumerate() {
                        d[s] = d[s] + g.data()[o];
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let acc = slot(grads, v, self.shape(v));
                        let d = acc.data_mut();
                        for o in 0..outer {
                            let src = &g.data()[o * total * inner + offset * inner..o * total * inner + (offset + len) * inner];
                            for (dv, &gv) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *dv = *dv + gv;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::BroadcastTo(x) => {
                if self.rg(*x) {
                    let map = broadcast_map(out.shape(), self.shape(*x)).unwrap();
                    let acc = slot(grads, *x, self.shape(*x));
                    let d = acc.data_mut();
                    for (o, &s) in map.iter().enumerate() {
                        d[s] = d[s] + g.data()[o];
                    }
                }
            }
            Op::SelectRows(x, indices) => {
                if self.rg(*x) {
                    let xs = self.shape(*x).to_vec();
                    let row_len = self.value(*x).len().checked_div(xs[0]).unwrap_or(0);
                    let acc = slot(grads, *x, &xs);
                    let d = acc.data_mut();
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..row_len {
                            d[src * row_len + c] = d[src * row_len + c] + g.data()[r * row_len + c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gain)[0];
                let gd = g.data();
                if self.rg(*gain) {
                    let acc = slot(grads, *gain, &[c]);
                    let d = acc.data_mut();
                    for (r, row) in gd.chunks(c).enumerate() {
                        for j in 0..c {
                            d[j] = d[j] + row[j] * xhat[r * c + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let acc = slot(grads, *bias, &[c]);
                    let d = acc.data_mut();
                    for row in gd.chunks(c) {
                        for j in 0..c {
                            d[j] = d[j] + row[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gain_v = self.value(*gain).data();
                    let cn = T::from_usize(c).unwrap();
                    let acc = slot(grads, *x, self.shape(*x));
                    let d = acc.data_mut();
                    for (r, row) in gd.chunks(c).enumerate() {
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = row[j] * gain_v[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h[j];
                        }
                        mean_dh = mean_dh / cn;
                        mean_dh_h = mean_dh_h / cn;
                        for j in 0..c {
                            let dh = row[j] * gain_v[j];
                            d[r * c + j] = d[r * c + j] + inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Chamfer {
                pred,
                gt,
                pred_nn,
                gt_nn,
            } => {
                let (ps, gs) = (self.shape(*pred).to_vec(), self.shape(*gt).to_vec());
                let (batch, np, ng) = (ps[0], ps[1], gs[1]);
                let gv = g.item();
                let two = T::from_f64_lossy(2.0);
                let bn = T::from_usize(batch).unwrap();
                let wp = two * gv / (bn * T::from_usize(np).unwrap());
                let wg = two * gv / (bn * T::from_usize(ng).unwrap());
                let pd = self.value(*pred).data();
                let gdv = self.value(*gt).data();
                let mut dp = vec![T::zero(); pd.len()];
                let mut dg = vec![T::zero(); gdv.len()];
                for b in 0..batch {
                    for i in 0..np {
                        let j = pred_nn[b * np + i];
                        for c in 0..3 {
                            let pi = (b * np + i) * 3 + c;
                            let gj = (b * ng + j) * 3 + c;
                            let diff = pd[pi] - gdv[gj];
                            dp[pi] = dp[pi] + wp * diff;
                            dg[gj] = dg[gj] - wp * diff;
                        }
                    }
                    for j in 0..ng {
                        let i = gt_nn[b * ng + j];
                        for c in 0..3 {
                            let pi = (b * np + i) * 3 + c;
                            let gj = (b * ng + j) * 3 + c;
                            let diff = gdv[gj] - pd[pi];
                            dg[gj] = dg[gj] + wg * diff;
                            dp[pi] = dp[pi] - wg * diff;
                        }
                    }
                }
                if self.rg(*pred) {
                    let acc = slot(grads, *pred, &ps);
                    for (d, v) in acc.data_mut().iter_mut().zip(dp) {
                        *d = *d + v;
                    }
                }
                if self.rg(*gt) {
                    let acc = slot(grads, *gt, &gs);
                    for (d, v) in acc.data_mut().iter_mut().zip(dg) {
                        *d = *d + v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let n = self.shape(*logits)[0];
                    let scale = g.item() / T::from_usize(n).unwrap();
                    let acc = slot(grads, *logits, self.shape(*logits));
                    for (i, d) in acc.data_mut().iter_mut().enumerate() {
                        *d = *d + scale * (probs[i] - targets[i]);
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::shape(format!("axis {axis} out of range for {shape:?}")))
    } else {
        Ok(())
    }
}

fn l1_floor<T: Real>() -> T {
    T::from_f64_lossy(1e-30).max(T::min_positive_value())
}

/// Index of the nearest point in `set` (flattened xyz) and its squared distance;
/// ties go to the lower index.
fn nearest<T: Real>(q: &[T], set: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, p) in set.chunks_exact(3).enumerate() {
        let d = (q[0] - p[0]) * (q[0] - p[0]) + (q[1] - p[1]) * (q[1] - p[1]) + (q[2] - p[2]) * (q[2] - p[2]);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source with shape `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Result<Vec<usize>> {
    if out_shape.len() != in_shape.len() {
        return Err(Error::shape(format!("cannot broadcast {in_shape:?} to {out_shape:?}")));
    }
    for (&o, &i) in out_shape.iter().zip(in_shape) {
        if i != o && i != 1 {
            return Err(Error::shape(format!("cannot broadcast {in_shape:?} to {out_shape:?}")));
        }
    }
    let total: usize = out_shape.iter().product();
    if out_shape == in_shape {
        return Ok((0..total).collect());
    }
    let in_strides = row_major_strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    Ok(walk(out_shape, &eff, total))
}

/// Source flat index for each output position of a permutation.
fn permute_source_indices(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = row_major_strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = out_shape.iter().product();
    walk(&out_shape, &eff, total)
}

/// Iterate `shape` in row-major order, emitting `sum(index[d] * strides[d])`.
fn walk(shape: &[usize], strides: &[usize], total: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.rank() != b.rank() {
        return Err(Error::shape(format!("broadcast {:?} with {:?}", a.shape(), b.shape())));
    }
    let out_shape: Vec<usize> = a.shape().iter().zip(b.shape()).map(|(&x, &y)| x.max(y)).collect();
    let ma = broadcast_map(&out_shape, a.shape())?;
    let mb = broadcast_map(&out_shape, b.shape())?;
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn walk_matches_manual_permutation() {
        // [2,3] transposed
        let src = permute_source_indices(&[2, 3], &[1, 0]);
        assert_eq!(src, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_mul_and_grad() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.input(t(&[2, 2, 1], &[1., 10., 100., 1000.]));
        let y = tape.mul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert_eq!(tape.value(y).data()[3..6], [10., 20., 30.]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[11., 11., 11., 1100., 1100., 1100.]);
        assert_eq!(g.wrt(b).unwrap().data(), &[6., 6., 15., 15.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -1., 0., 100.]));
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_axis_prefers_lower_index_on_ties() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[2., 2., 1.]));
        let m = tape.max_axis(x, 0).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 0., 0.]);
    }

    #[test]
    fn chamfer_of_single_points() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 1, 3], &[0., 0., 0.]));
        let q = tape.constant(t(&[1, 1, 3], &[1., 0., 0.]));
        let c = tape.chamfer_l2(p, q).unwrap();
        assert_eq!(tape.value(c).item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.input(t(&[2], &[3., 4.]));
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(a).is_none());
        assert_eq!(g.wrt(b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn mac_counter_tracks_products() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[4, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[3, 5]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.mac_count(), 60);
    }
}
