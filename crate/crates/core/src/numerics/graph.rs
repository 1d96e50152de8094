//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates exact analytic adjoints.

use nalgebra::DMatrix;

use super::tensor::{
    axis_split, col2im3, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col3, squeeze_index, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Abs(Var),
    Expand(Var),
    BcastAdd { x: Var, v: Var, axis: usize },
    BcastMul { x: Var, v: Var, axis: usize },
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv3x3(Var, Var),
    Conv1x1(Var, Var),
    LogAbsDet { w: Var, inv_t: Vec<f64> },
    BatchNorm { x: Var, axis: usize, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SumPerItem(Var),
    Reshape(Var),
    Gather { x: Var, src: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or `None` if `v` did not influence the root.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that is differentiated through.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Batch statistics `(mean, var)` recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        va.zip_map(vb, f).map_err(|_| Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| c * x);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.numel() != 1 {
            return Err(Error::shape("expand", format!("source {:?} is not a scalar", v.shape())));
        }
        let t = Tensor::full(shape, v.item());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Expand(a), rg))
    }

    fn check_bcast(&self, x: Var, v: Var, axis: usize, name: &'static str) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if axis >= xs.len() || vs.len() != 1 || vs[0] != xs[axis] {
            return Err(Error::shape(name, format!("x {xs:?}, v {vs:?}, axis {axis}")));
        }
        Ok(axis_split(xs, axis))
    }

    /// `x + v` with `v` broadcast along every axis except `axis`.
    pub fn bcast_add(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_bcast(x, v, axis, "bcast_add")?;
        let mut t = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.data();
        let d = t.data_mut();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for e in &mut d[base..base + inner] {
                    *e += vv[a];
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::BcastAdd { x, v, axis }, rg))
    }

    /// `x · v` with `v` broadcast along every axis except `axis`.
    pub fn bcast_mul(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_bcast(x, v, axis, "bcast_mul")?;
        let mut t = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.data();
        let d = t.data_mut();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for e in &mut d[base..base + inner] {
                    *e *= vv[a];
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(t, Op::BcastMul { x, v, axis }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(log_sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::LogSigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    /// `x[..., m, n] · w[n, p]`, applied to every leading index of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("matmul", format!("{xs:?} x {ws:?}")));
        }
        let (n, p) = (ws[0], ws[1]);
        let rows = self.nodes[x.0].value.numel() / n;
        let mut out = vec![0.0; rows * p];
        gemm_acc(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &mut out, rows, n, p);
        let mut shape = xs;
        *shape.last_mut().unwrap() = p;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(x, w), rg))
    }

    /// Batched `a[b, m, n] · c[b, n, p]`.
    pub fn bmm(&mut self, a: Var, c: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sc = self.shape(c).to_vec();
        if sa.len() != 3 || sc.len() != 3 || sa[0] != sc[0] || sa[2] != sc[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sc:?}")));
        }
        let (b, m, n, p) = (sa[0], sa[1], sa[2], sc[2]);
        let mut out = vec![0.0; b * m * p];
        let (da, dc) = (self.nodes[a.0].value.data(), self.nodes[c.0].value.data());
        for i in 0..b {
            gemm_acc(&da[i * m * n..(i + 1) * m * n], &dc[i * n * p..(i + 1) * n * p], &mut out[i * m * p..(i + 1) * m * p], m, n, p);
        }
        let rg = self.rg(a) || self.rg(c);
        Ok(self.push(Tensor::new(vec![b, m, p], out)?, Op::BatchMatMul(a, c), rg))
    }

    /// 3×3 convolution with zero padding 1 (spatial size preserved), no bias.
    /// `x: [b, ci, h, w]`, `k: [co, ci, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape("conv3x3", format!("x {xs:?}, kernel {ks:?}")));
        }
        let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ks[0];
        let hw = h * w;
        let mut out = vec![0.0; b * co * hw];
        let (dx, dk) = (self.nodes[x.0].value.data(), self.nodes[k.0].value.data());
        for bi in 0..b {
            let cols = im2col3(&dx[bi * ci * hw..(bi + 1) * ci * hw], ci, h, w);
            gemm_acc(dk, &cols, &mut out[bi * co * hw..(bi + 1) * co * hw], co, ci * 9, hw);
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(vec![b, co, h, w], out)?, Op::Conv3x3(x, k), rg))
    }

    /// Channel mixing `y[:, :, i, j] = W · x[:, :, i, j]`. `x: [b, c, h, w]`, `w: [c, c]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("conv1x1", format!("x {xs:?}, w {ws:?}")));
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        let hw = h * wd;
        let mut out = vec![0.0; b * co * hw];
        let (dx, dw) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
        for bi in 0..b {
            gemm_acc(dw, &dx[bi * ci * hw..(bi + 1) * ci * hw], &mut out[bi * co * hw..(bi + 1) * co * hw], co, ci, hw);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![b, co, h, wd], out)?, Op::Conv1x1(x, w), rg))
    }

    /// `log |det W|` of a square matrix, as a one-element tensor.
    pub fn logabsdet(&mut self, w: Var) -> Result<Var> {
        let t = &self.nodes[w.0].value;
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("logabsdet", format!("{s:?} is not square")));
        }
        let n = s[0];
        let m = DMatrix::from_row_slice(n, n, t.data());
        let lu = m.lu();
        let det = lu.determinant();
        if det.is_nan() || det.abs() <= 1e-12 {
            return Err(Error::Singular(format!("logabsdet of {n}x{n} matrix")));
        }
        let inv = lu.try_inverse().ok_or_else(|| Error::Singular("logabsdet".into()))?;
        // row-major W^{-T}: element (i, j) = inv(j, i)
        let mut inv_t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                inv_t[i * n + j] = inv[(j, i)];
            }
        }
        let rg = self.rg(w);
        Ok(self.push(Tensor::scalar(det.abs().ln()), Op::LogAbsDet { w, inv_t }, rg))
    }

    /// Training-mode batch normalization without affine terms: statistics are
    /// taken over every axis except `axis`.
    pub fn batch_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("batch_norm", format!("axis {axis} for {xs:?}")));
        }
        let (outer, len, inner) = axis_split(&xs, axis);
        let cnt = (outer * inner) as f64;
        let d = self.nodes[x.0].value.data();
        let mut mean = vec![0.0; len];
        let mut var = vec![0.0; len];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                mean[a] += d[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                var[a] += d[base..base + inner].iter().map(|v| (v - mean[a]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = d.to_vec();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for e in &mut out[base..base + inner] {
                    *e = (*e - mean[a]) * inv_std[a];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::BatchNorm { x, axis, inv_std, mean, var }, rg))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape("slice", format!("{xs:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, full, inner) = axis_split(&xs, axis);
        let d = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (p, q))| i == axis || p == q);
        if !compatible {
            return Err(Error::shape("concat", format!("{sa:?} ++ {sb:?} along {axis}")));
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&db[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.nodes[x.0].value.mean());
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.nodes[x.0].value.var());
        let rg = self.rg(x);
        self.push(t, Op::Variance(x), rg)
    }

    /// Sum over every axis except the leading one: `[b, ...] -> [b]`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let b = v.shape()[0];
        let inner = v.numel() / b;
        let out: Vec<f64> = v.data().chunks(inner).map(|c| c.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::SumPerItem(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Space-to-channel rearrangement `[b, c, n, n] -> [b, c·h², n/h, n/h]`.
    pub fn squeeze(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (shape, src) = squeeze_index(self.shape(x), factor)?;
        Ok(self.gather(x, shape, src))
    }

    /// Exact inverse of [`Graph::squeeze`].
    pub fn unsqueeze(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] != s[3] || factor == 0 || s[1] % (factor * factor) != 0 {
            return Err(Error::shape("unsqueeze", format!("{s:?} with factor {factor}")));
        }
        let orig = [s[0], s[1] / (factor * factor), s[2] * factor, s[3] * factor];
        let (_, fwd) = squeeze_index(&orig, factor)?;
        let mut src = vec![0; fwd.len()];
        for (out_pos, &in_pos) in fwd.iter().enumerate() {
            src[in_pos] = out_pos;
        }
        Ok(self.gather(x, orig.to_vec(), src))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, src: Vec<usize>) -> Var {
        let d = self.nodes[x.0].value.data();
        let out: Vec<f64> = src.iter().map(|&i| d[i]).collect();
        let rg = self.rg(x);
        let t = Tensor::new(shape, out).expect("gather shape");
        self.push(t, Op::Gather { x, src }, rg)
    }

    /// Reverse accumulation from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape("backward", format!("root shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(vb, |x, y| x / y).unwrap());
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = &node.value;
                    let t = g.zip_map(q, |x, y| x * y).unwrap().zip_map(vb, |x, y| -x / y).unwrap();
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Abs(a) => {
                let t = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Expand(a) => self.accumulate(grads, *a, Tensor::scalar(g.sum())),
            Op::BcastAdd { x, v, axis } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*v) {
                    let (outer, len, inner) = g.axis_split(*axis);
                    let mut gv = vec![0.0; len];
                    for o in 0..outer {
                        for (a, acc) in gv.iter_mut().enumerate() {
                            let base = (o * len + a) * inner;
                            *acc += g.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *v, Tensor::vector(gv));
                }
            }
            Op::BcastMul { x, v, axis } => {
                let (outer, len, inner) = g.axis_split(*axis);
                let vv = val(*v).data();
                if self.rg(*x) {
                    let mut gx = g.clone();
                    let d = gx.data_mut();
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            d[base..base + inner].iter_mut().for_each(|e| *e *= vv[a]);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*v) {
                    let xv = val(*x).data();
                    let mut gv = vec![0.0; len];
                    for o in 0..outer {
                        for (a, acc) in gv.iter_mut().enumerate() {
                            let base = (o * len + a) * inner;
                            *acc += g.data()[base..base + inner]
                                .iter()
                                .zip(&xv[base..base + inner])
                                .map(|(p, q)| p * q)
                                .sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *v, Tensor::vector(gv));
                }
            }
            Op::Sigmoid(a) => {
                let t = g.zip_map(&node.value, |x, s| x * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::LogSigmoid(a) => {
                let t = g.zip_map(val(*a), |x, y| x * sigmoid(-y)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let t = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = g.zip_map(&node.value, |x, y| x * y).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = g.zip_map(val(*a), |x, y| x / y).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, p) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / n;
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * n];
                    gemm_nt_acc(g.data(), vw.data(), &mut gx, rows, p, n);
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; n * p];
                    gemm_tn_acc(vx.data(), g.data(), &mut gw, rows, n, p);
                    self.accumulate(grads, *w, Tensor::new(vec![n, p], gw).unwrap());
                }
            }
            Op::BatchMatMul(a, c) => {
                let (va, vc) = (val(*a), val(*c));
                let (b, m, n, p) = (va.shape()[0], va.shape()[1], va.shape()[2], vc.shape()[2]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; b * m * n];
                    for i in 0..b {
                        gemm_nt_acc(&g.data()[i * m * p..(i + 1) * m * p], &vc.data()[i * n * p..(i + 1) * n * p], &mut ga[i * m * n..(i + 1) * m * n], m, p, n);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![b, m, n], ga).unwrap());
                }
                if self.rg(*c) {
                    let mut gc = vec![0.0; b * n * p];
                    for i in 0..b {
                        gemm_tn_acc(&va.data()[i * m * n..(i + 1) * m * n], &g.data()[i * m * p..(i + 1) * m * p], &mut gc[i * n * p..(i + 1) * n * p], m, n, p);
                    }
                    self.accumulate(grads, *c, Tensor::new(vec![b, n, p], gc).unwrap());
                }
            }
            Op::Conv3x3(x, k) => {
                let (vx, vk) = (val(*x), val(*k));
                let (b, ci, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let co = vk.shape()[0];
                let hw = h * w;
                let mut gx = if self.rg(*x) { Some(vec![0.0; b * ci * hw]) } else { None };
                let mut gk = if self.rg(*k) { Some(vec![0.0; co * ci * 9]) } else { None };
                for bi in 0..b {
                    let gb = &g.data()[bi * co * hw..(bi + 1) * co * hw];
                    if let Some(gk) = gk.as_mut() {
                        let cols = im2col3(&vx.data()[bi * ci * hw..(bi + 1) * ci * hw], ci, h, w);
                        gemm_nt_acc(gb, &cols, gk, co, hw, ci * 9);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut gcols = vec![0.0; ci * 9 * hw];
                        gemm_tn_acc(vk.data(), gb, &mut gcols, co, ci * 9, hw);
                        col2im3(&gcols, ci, h, w, &mut gx[bi * ci * hw..(bi + 1) * ci * hw]);
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *k, Tensor::new(vk.shape().to_vec(), gk).unwrap());
                }
            }
            Op::Conv1x1(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let (b, ci) = (vx.shape()[0], vx.shape()[1]);
                let hw = vx.shape()[2] * vx.shape()[3];
                let co = vw.shape()[0];
                if self.rg(*x) {
                    let mut gx = vec![0.0; b * ci * hw];
                    for bi in 0..b {
                        gemm_tn_acc(vw.data(), &g.data()[bi * co * hw..(bi + 1) * co * hw], &mut gx[bi * ci * hw..(bi + 1) * ci * hw], co, ci, hw);
                    }
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; co * ci];
                    for bi in 0..b {
                        gemm_nt_acc(&g.data()[bi * co * hw..(bi + 1) * co * hw], &vx.data()[bi * ci * hw..(bi + 1) * ci * hw], &mut gw, co, hw, ci);
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![co, ci], gw).unwrap());
                }
            }
            Op::LogAbsDet { w, inv_t } => {
                let s = g.item();
                let shape = val(*w).shape().to_vec();
                let t = Tensor::new(shape, inv_t.iter().map(|v| s * v).collect()).unwrap();
                self.accumulate(grads, *w, t);
            }
            Op::BatchNorm { x, axis, inv_std, .. } => {
                let xhat = &node.value;
                let (outer, len, inner) = xhat.axis_split(*axis);
                let cnt = (outer * inner) as f64;
                let mut sum_g = vec![0.0; len];
                let mut sum_gx = vec![0.0; len];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for e in base..base + inner {
                            sum_g[a] += g.data()[e];
                            sum_gx[a] += g.data()[e] * xhat.data()[e];
                        }
                    }
                }
                let mut gx = vec![0.0; xhat.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for e in base..base + inner {
                            gx[e] = inv_std[a] / cnt
                                * (cnt * g.data()[e] - sum_g[a] - xhat.data()[e] * sum_gx[a]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), gx).unwrap());
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, full, inner) = axis_split(&xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx).unwrap());
            }
            Op::Concat { a, b, axis } => {
                let sa = val(*a).shape().to_vec();
                let sb = val(*b).shape().to_vec();
                let (outer, la, inner) = axis_split(&sa, *axis);
                let lb = sb[*axis];
                let mut ga = Vec::with_capacity(val(*a).numel());
                let mut gb = Vec::with_capacity(val(*b).numel());
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&g.data()[base..base + la * inner]);
                    gb.extend_from_slice(&g.data()[base + la * inner..base + (la + lb) * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(sb, gb).unwrap());
            }
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::Variance(x) => {
                let vx = val(*x);
                let (m, n, s) = (vx.mean(), vx.numel() as f64, g.item());
                self.accumulate(grads, *x, vx.map(|v| s * 2.0 * (v - m) / n));
            }
            Op::SumPerItem(x) => {
                let vx = val(*x);
                let inner = vx.numel() / vx.shape()[0];
                let gx: Vec<f64> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(val(*x).shape()).unwrap();
                self.accumulate(grads, *x, t);
            }
            Op::Gather { x, src } => {
                let vx = val(*x);
                let mut gx = vec![0.0; vx.numel()];
                for (o, &i) in src.iter().enumerate() {
                    gx[i] += g.data()[o];
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
