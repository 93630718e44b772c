use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
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
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu { a: Var, inner: Vec<f64> },
    SoftmaxLast(Var),
    SqDist(Var, Var),
    MinLast { a: Var, argmin: Vec<usize> },
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize { a: Var, norms: Vec<f64> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    IndexSelect { a: Var, index: Vec<usize> },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Clamp { a: Var, lo: f64, hi: f64 },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) tracked: bool,
}

/// Accumulated gradients of tracked leaves, keyed by their [`Var`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Reverse-mode tape. Every kernel call appends one node; [`Tape::backward`]
/// walks the nodes in strict reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Gradients,
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[m×n] += a·b` with `a` of logical shape m×k and `b` of k×n, arbitrary
/// element strides; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, rsa, csa));
    assert!(b.len() >= reach(k, n, rsb, csb));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The inner `tanh` of the GELU approximation, via one `exp`.
fn gelu_inner(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly for large |u|.
    1.0 - 2.0 / (math::exp(2.0 * u) + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        if t.requires_grad() {
            t = Tensor::raw(t.shape().to_vec(), t.into_data());
        }
        self.leaf(t)
    }

    fn push(&mut self, kernel: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data().iter().fold(false, |bad, v| bad | !v.is_finite()) {
            return Err(Error::NonFinite { kernel });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(kernel, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn unary(&mut self, kernel: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(kernel, out, op, &[a])
    }

    // ---- linear algebra ------------------------------------------------

    /// `a · b` where `a` is `[.., k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul", a, b, false)
    }

    /// `a · bᵀ` where `a` is `[.., k]` and `b` is `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl("matmul_nt", a, b, true)
    }

    fn matmul_impl(&mut self, kernel: &'static str, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::shape(kernel, &[sa, sb]));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if bk != k {
            return Err(Error::shape(kernel, &[sa, sb]));
        }
        let m = numel(sa) / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![0.0; m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), rsb, csb, 0.0, &mut c);
        let op = Op::MatMul { a, b, trans_b, m, k, n };
        self.push(kernel, Tensor::raw(out_shape, c), op, &[a, b])
    }

    /// Batched product: `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &[sa, sb]));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(Error::shape("bmm", &[sa, sb]));
        }
        let mut c = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                k,
                1,
                &bd[i * k * n..],
                rsb,
                csb,
                0.0,
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let op = Op::BatchMatMul { a, b, trans_b, batch, m, k, n };
        self.push("bmm", Tensor::raw(vec![batch, m, n], c), op, &[a, b])
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::raw(self.shape(a).to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", &[sa, sb]));
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i % w]).collect();
        let out = Tensor::raw(sa.to_vec(), data);
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::raw(self.shape(a).to_vec(), data);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::raw(self.shape(a).to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), math::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), math::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), math::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), math::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let inner: Vec<f64> = x.data().iter().map(|&v| gelu_inner(v)).collect();
        let data = x.data().iter().zip(&inner).map(|(v, t)| 0.5 * v * (1.0 + t)).collect();
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push("gelu", out, Op::Gelu { a, inner }, &[a])
    }

    /// Clamps into `[lo, hi]`; clamped entries receive no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    // ---- row-wise ------------------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("softmax_last", &[&shape]));
        }
        let w = *shape.last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        self.push("softmax_last", Tensor::raw(shape, out), Op::SoftmaxLast(a), &[a])
    }

    /// Layer normalisation over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (sa, sg, sb) = (self.shape(a), self.shape(gain), self.shape(bias));
        let d = sa.last().copied().unwrap_or(0);
        if sa.is_empty() || sg != [d] || sb != [d] {
            return Err(Error::shape("layer_norm", &[sa, sg, sb]));
        }
        let shape = sa.to_vec();
        let (x, g, b) = (self.value(a).data(), self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { a, gain, bias, xhat, rstd };
        self.push("layer_norm", Tensor::raw(shape, out), op, &[a, gain, bias])
    }

    /// Divides every last-axis row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("l2_normalize", &[&shape]));
        }
        let d = *shape.last().unwrap();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(L2_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push("l2_normalize", Tensor::raw(shape, out), Op::L2Normalize { a, norms }, &[a])
    }

    /// Pairwise squared Euclidean distances between rows: `[n, d] × [k, d] → [n, k]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("sq_dist", &[sa, sb]));
        }
        let (n, k, d) = (sa[0], sb[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = sq_dist_rows(&ad[i * d..(i + 1) * d], &bd[j * d..(j + 1) * d]);
            }
        }
        self.push("sq_dist", Tensor::raw(vec![n, k], out), Op::SqDist(a, b), &[a, b])
    }

    /// Minimum over the last axis. The gradient flows only to the argmin,
    /// with ties going to the lowest index.
    pub fn min_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::shape("min_last", &[shape]));
        }
        let w = *shape.last().unwrap();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let mut argmin = Vec::with_capacity(x.len() / w);
        let mut out = Vec::with_capacity(x.len() / w);
        for row in x.data().chunks(w) {
            let j = argmin_lowest(row);
            argmin.push(j);
            out.push(row[j]);
        }
        self.push("min_last", Tensor::raw(out_shape, out), Op::MinLast { a, argmin }, &[a])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &[&shape]));
        }
        let (outer, ext, inner) = around(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &x[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push("sum_axis", Tensor::raw(out_shape, out), Op::SumAxis { a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self.shape(a).get(axis).ok_or_else(|| Error::shape("mean_axis", &[self.shape(a)]))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / ext as f64)
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.shape(*v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let ext = self.shape(*p)[axis];
                let x = self.value(*p).data();
                out.extend_from_slice(&x[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", Tensor::raw(out_shape, out), op, parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &[self.shape(a), shape]));
        }
        let out = Tensor::raw(shape.to_vec(), self.value(a).data().to_vec());
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &[&shape, perm]));
        }
        let out = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute {
            a,
            perm: perm.to_vec(),
        };
        self.push("permute", Tensor::raw(out_shape, out), op, &[a])
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index.is_empty() || index.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("index_select", &[&shape, index]));
        }
        let inner = numel(&shape[1..]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        let op = Op::IndexSelect {
            a,
            index: index.to_vec(),
        };
        self.push("index_select", Tensor::raw(out_shape, out), op, &[a])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &[&shape, &[axis, start, len]]));
        }
        let (outer, ext, inner) = around(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let op = Op::Narrow { a, axis, start, len };
        self.push("narrow", Tensor::raw(out_shape, out), op, &[a])
    }

    // ---- backward ------------------------------------------------------

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads = Gradients::default();
    }

    pub fn gradients(&self) -> &Gradients {
        &self.leaf_grads
    }

    /// Back-propagates from a scalar `root`, adding into the leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<&Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].tracked {
            return Ok(&self.leaf_grads);
        }
        let Tape { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                let entry = leaf_grads
                    .grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (d, s) in entry.data_mut().iter_mut().zip(&g) {
                    *d += s;
                }
                continue;
            }
            propagate(nodes, i, &g, &mut grads);
        }
        Ok(&self.leaf_grads)
    }
}

const L2_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn sq_dist_rows(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn argmin_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v < row[best] {
            best = j;
        }
    }
    best
}

fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    // Trailing axes left in place are copied as contiguous chunks.
    let fixed = perm.iter().rev().enumerate().take_while(|(i, &p)| p == perm.len() - 1 - i).count();
    let outer_axes = perm.len() - fixed;
    let chunk = numel(&shape[outer_axes..]);
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm[..outer_axes].iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm[..outer_axes].iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; outer_axes];
    let mut off = 0usize;
    for _ in 0..x.len() / chunk {
        out.extend_from_slice(&x[off..off + chunk]);
        for ax in (0..outer_axes).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Gradient buffer of `v`, or `None` when `v` is not tracked.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(buf) = slot(grads, nodes, v) {
        for (i, d) in buf.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let bd = val(*b);
            let ad = val(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                // dA = dC · op(B)ᵀ
                let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                gemm(m, n, k, g, n, 1, bd, rs, cs, 1.0, da);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                if *trans_b {
                    // dB[n,k] = dCᵀ · A
                    gemm(n, m, k, g, 1, n, ad, k, 1, 1.0, db);
                } else {
                    // dB[k,n] = Aᵀ · dC
                    gemm(k, m, n, ad, 1, k, g, n, 1, 1.0, db);
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (ad, bd) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                for t in 0..*batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..],
                        n,
                        1,
                        &bd[t * k * n..],
                        rs,
                        cs,
                        1.0,
                        &mut da[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for t in 0..*batch {
                    let gt = &g[t * m * n..];
                    let at = &ad[t * m * k..];
                    let out = &mut db[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gt, 1, n, at, k, 1, 1.0, out);
                    } else {
                        gemm(k, m, n, at, 1, k, gt, n, 1, 1.0, out);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, |j| g[j]);
            add_into(grads, nodes, *b, |j| g[j]);
        }
        Op::AddBroadcast(a, b) => {
            add_into(grads, nodes, *a, |j| g[j]);
            if let Some(db) = slot(grads, nodes, *b) {
                let w = db.len();
                for (j, gj) in g.iter().enumerate() {
                    db[j % w] += gj;
                }
            }
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |j| g[j]);
            add_into(grads, nodes, *b, |j| -g[j]);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            add_into(grads, nodes, *a, |j| g[j] * bd[j]);
            add_into(grads, nodes, *b, |j| g[j] * ad[j]);
        }
        Op::Scale(a, s) => add_into(grads, nodes, *a, |j| g[j] * s),
        Op::AddScalar(a) => add_into(grads, nodes, *a, |j| g[j]),
        Op::Exp(a) => add_into(grads, nodes, *a, |j| g[j] * y[j]),
        Op::Log(a) => {
            let x = val(*a);
            add_into(grads, nodes, *a, |j| g[j] / x[j]);
        }
        Op::Sigmoid(a) => add_into(grads, nodes, *a, |j| g[j] * y[j] * (1.0 - y[j])),
        Op::Tanh(a) => add_into(grads, nodes, *a, |j| g[j] * (1.0 - y[j] * y[j])),
        Op::Gelu { a, inner } => {
            let x = val(*a);
            add_into(grads, nodes, *a, |j| g[j] * gelu_grad(x[j], inner[j]));
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a);
            add_into(grads, nodes, *a, |j| if x[j] < *lo || x[j] > *hi { 0.0 } else { g[j] });
        }
        Op::SoftmaxLast(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                let w = *node.value.shape().last().unwrap();
                for r in 0..y.len() / w {
                    let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..w {
                        da[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gain, bias, xhat, rstd } => {
            let d = nodes[gain.0].value.len();
            let gd = val(*gain);
            let rows = xhat.len() / d;
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gd[j];
                        da[r * d + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let d = *node.value.shape().last().unwrap();
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    if *n <= L2_FLOOR {
                        for j in 0..d {
                            da[r * d + j] += gr[j] / n;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        da[r * d + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
        Op::SqDist(a, b) => {
            let sa = nodes[a.0].value.shape();
            let (n, d) = (sa[0], sa[1]);
            let k = nodes[b.0].value.shape()[0];
            let (ad, bd) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..n {
                    for j in 0..k {
                        let c = 2.0 * g[i * k + j];
                        for t in 0..d {
                            da[i * d + t] += c * (ad[i * d + t] - bd[j * d + t]);
                        }
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..n {
                    for j in 0..k {
                        let c = 2.0 * g[i * k + j];
                        for t in 0..d {
                            db[j * d + t] -= c * (ad[i * d + t] - bd[j * d + t]);
                        }
                    }
                }
            }
        }
        Op::MinLast { a, argmin } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let w = da.len() / argmin.len();
                for (r, j) in argmin.iter().enumerate() {
                    da[r * w + j] += g[r];
                }
            }
        }
        Op::SumAll(a) => add_into(grads, nodes, *a, |_| g[0]),
        Op::SumAxis { a, axis } => {
            let (_, ext, inner) = around(nodes[a.0].value.shape(), *axis);
            add_into(grads, nodes, *a, |j| g[j / (ext * inner) * inner + j % inner]);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = around(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let ext = nodes[p.0].value.shape()[*axis];
                if let Some(dp) = slot(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                        for (d, s) in dp[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += ext;
            }
        }
        Op::Reshape(a) => add_into(grads, nodes, *a, |j| g[j]),
        Op::Permute { a, perm } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                for (d, s) in da.iter_mut().zip(back) {
                    *d += s;
                }
            }
        }
        Op::IndexSelect { a, index } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let inner = g.len() / index.len();
                for (r, &src) in index.iter().enumerate() {
                    for t in 0..inner {
                        da[src * inner + t] += g[r * inner + t];
                    }
                }
            }
        }
        Op::Narrow { a, axis, start, len } => {
            if let Some(da) = slot(grads, nodes, *a) {
                let (outer, ext, inner) = around(nodes[a.0].value.shape(), *axis);
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        da[dst + t] += g[src + t];
                    }
                }
            }
        }
    }
}
