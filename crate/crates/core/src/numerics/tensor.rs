use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Every extent is at least one; a scalar has shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid extents {shape:?}");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self { shape: vec![data.len()], data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance.
    pub fn var(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Splits the shape around `axis` into (outer, len, inner) extents.
    pub fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        axis_split(&self.shape, axis)
    }

    /// Select one index along the leading axis.
    pub fn index_first(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor { shape, data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// Raw kernels shared by the autodiff graph.

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×p] += aᵀ · b` where a is [n×m], b is [n×p].
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for k in 0..n {
        let brow = &b[k * p..(k + 1) * p];
        for i in 0..m {
            let aki = a[k * m + i];
            if aki == 0.0 {
                continue;
            }
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×p] · bᵀ` where b is [n×p].
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += s;
        }
    }
}

/// 3×3 patches of one [c, h, w] image with zero padding 1: [c·9, h·w].
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let img = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = img[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[ci * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                    }
                }
            }
        }
    }
}

/// Index map of the space-to-channel squeeze: for every output position, the
/// source offset in the [b, c, n, n] input.
pub(crate) fn squeeze_index(shape: &[usize], factor: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::shape("squeeze", format!("expected [b, c, n, n], got {shape:?}")));
    }
    let (b, c, n) = (shape[0], shape[1], shape[2]);
    if factor == 0 || n % factor != 0 {
        return Err(Error::shape("squeeze", format!("factor {factor} does not divide extent {n}")));
    }
    let m = n / factor;
    let oc = c * factor * factor;
    let mut src = Vec::with_capacity(b * c * n * n);
    for bi in 0..b {
        for ch in 0..oc {
            let ci = ch / (factor * factor);
            let a = (ch / factor) % factor;
            let bb = ch % factor;
            for hi in 0..m {
                for hj in 0..m {
                    let i = hi * factor + a;
                    let j = hj * factor + bb;
                    src.push(((bi * c + ci) * n + i) * n + j);
                }
            }
        }
    }
    Ok((vec![b, oc, m, m], src))
}
