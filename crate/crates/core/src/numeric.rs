//! Dense matrix numerics, named differentiable parameters, and the
//! finite-difference harness used to verify every hand-derived gradient.
//!
//! All storage is 64-bit row-major. Nothing here knows about graphs or
//! models; higher modules build on these primitives and check their backward
//! passes with [`finite_diff_check`].

use crate::rng::SeededRng;
use crate::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds from a flat row-major buffer. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer length {} does not match {rows}x{cols}",
            data.len()
        );
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "matmul_tn dimension mismatch");
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "matmul_nt dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &DenseMatrix, c: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Glorot-style uniform init in +-sqrt(6 / (rows + cols)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_in(-bound, bound))
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += c * v`, elementwise.
pub fn axpy(out: &mut [f64], v: &[f64], c: f64) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v) {
        *o += c * x;
    }
}

/// log(sum(exp(v))) computed with a max shift so large inputs do not overflow.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Logistic sigmoid evaluated without overflow on either tail.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: returns x with softplus(x) = y. Requires y > 0.
pub fn inv_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// A named dense parameter and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct DiffParam {
    name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

impl DiffParam {
    pub fn new(name: impl Into<String>, value: DenseMatrix) -> Self {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        DiffParam {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Plain gradient-descent step: value -= lr * grad.
    pub fn sgd_step(&mut self, lr: f64) {
        for (v, g) in self.value.data.iter_mut().zip(&self.grad.data) {
            *v -= lr * g;
        }
    }
}

/// Ordered collection of uniquely named parameters.
///
/// Iteration order is insertion order, which is what makes flattened
/// parameter vectors and checkpoints stable across runs.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    params: Vec<DiffParam>,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: DiffParam) -> Result<()> {
        if self.params.iter().any(|p| p.name == param.name) {
            return Err(Error::DuplicateParam(param.name.clone()));
        }
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DiffParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DiffParam> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&DiffParam> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DiffParam> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            p.sgd_step(lr);
        }
    }

    /// A group of the same names/shapes whose values are this group's grads.
    pub fn grads_as_group(&self) -> ParamGroup {
        let params = self
            .params
            .iter()
            .map(|p| DiffParam::new(p.name.clone(), p.grad.clone()))
            .collect();
        ParamGroup { params }
    }
}

/// Snapshot of parameter values as a fresh group (for the FD harness).
pub fn group_of_values(params: &[&DiffParam]) -> ParamGroup {
    let mut g = ParamGroup::new();
    for p in params {
        g.push(DiffParam::new(p.name().to_string(), p.value.clone()))
            .expect("unique parameter names");
    }
    g
}

/// Snapshot of parameter gradients, stored as the values of a fresh group.
pub fn group_of_grads(params: &[&DiffParam]) -> ParamGroup {
    let mut g = ParamGroup::new();
    for p in params {
        g.push(DiffParam::new(p.name().to_string(), p.grad.clone()))
            .expect("unique parameter names");
    }
    g
}

const REL_ERR_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / REL_ERR_FLOOR.max(a.abs() + n.abs())
}

/// Compares analytic gradients against central finite differences of
/// `loss_fn` and returns the maximum relative error over all entries.
///
/// `analytic` must mirror `params` in names and shapes, with each value
/// matrix holding the gradient of the loss at `params`. The loss must be a
/// pure function of the group; it is evaluated twice up front and any
/// discrepancy is rejected as "loss not reproducible".
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &ParamGroup,
    analytic: &ParamGroup,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&ParamGroup) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::LossNotReproducible);
    }
    let mut max_err = 0.0f64;
    let mut work = params.clone();
    for (pi, p) in params.iter().enumerate() {
        let g = analytic.get(p.name())?;
        if g.value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                p.name(),
                g.value.shape(),
                p.value.shape()
            )));
        }
        for idx in 0..p.value.data().len() {
            let base = p.value.data()[idx];
            work.params[pi].value.data_mut()[idx] = base + epsilon;
            let up = loss_fn(&work);
            work.params[pi].value.data_mut()[idx] = base - epsilon;
            let down = loss_fn(&work);
            work.params[pi].value.data_mut()[idx] = base;
            let numeric = (up - down) / (2.0 * epsilon);
            max_err = max_err.max(rel_err(g.value.data()[idx], numeric));
        }
    }
    Ok(max_err)
}
