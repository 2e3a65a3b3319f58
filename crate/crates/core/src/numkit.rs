//! Dense numerics shared by every other module: a small row-major matrix,
//! temperature softmax, angular distance, top-k statistics and a
//! central-difference gradient checker.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Lower bound applied to `sin(theta)` wherever it appears in a denominator.
pub const SIN_FLOOR: f64 = 1e-6;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax of a single vector with max-subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of `scale * m`.
pub fn softmax_rows(m: &Tensor2, scale: f64) -> Result<Tensor2> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("softmax scale must be positive, got {scale}")));
    }
    if !m.is_finite() {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = Tensor2::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let scaled: Vec<f64> = m.row(r).iter().map(|x| scale * x).collect();
        out.row_mut(r).copy_from_slice(&softmax(&scaled));
    }
    Ok(out)
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Angle between two nonzero vectors, in `[0, pi]`.
///
/// Uses `2 atan2(|u^ - v^|, |u^ + v^|)`, which keeps full relative accuracy
/// near 0 and pi where `acos` of the cosine does not.
pub fn angular_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("angular_distance", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("angular distance of a zero-norm vector"));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a / nu, b / nv);
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

fn clamped_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// Angle between `u` and `v` together with its full derivative with respect
/// to `u`: `-(v_hat - cos * u_hat) / (max(sin, SIN_FLOOR) * |u|)`.
pub fn angular_distance_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let theta = angular_distance(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    let cos = clamped_cos(dot(u, v) / (nu * nv));
    let sin = theta.sin().max(SIN_FLOOR);
    let grad = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| -(vi / nv - cos * ui / nu) / (sin * nu))
        .collect();
    Ok((theta, grad))
}

/// Indices of the `k` largest entries; equal values prefer the lower index.
/// The result is sorted by index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mean of the `k` largest entries of `row`.
pub fn topk_mean(row: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > row.len() {
        return Err(Error::invalid(format!(
            "top-k with k={k} on a row of length {}",
            row.len()
        )));
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate at which the maximum was attained.
    pub worst_index: usize,
    pub numeric: f64,
    pub analytic: f64,
}

/// Compares `analytic` against central differences of `f` around `x0`.
///
/// The relative error per coordinate is
/// `|fd - analytic| / max(1e-8, |fd| + |analytic|)`.
pub fn fd_grad_check<F>(mut f: F, x0: &[f64], eps: f64, analytic: &[f64]) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if x0.len() != analytic.len() {
        return Err(Error::shape("fd_grad_check", x0.len(), analytic.len()));
    }
    let mut x = x0.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        numeric: 0.0,
        analytic: analytic.first().copied().unwrap_or(0.0),
    };
    for i in 0..x.len() {
        x[i] = x0[i] + eps;
        let plus = f(&x);
        x[i] = x0[i] - eps;
        let minus = f(&x);
        x[i] = x0[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteCheck { index: i });
        }
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                numeric: fd,
                analytic: analytic[i],
            };
        }
    }
    Ok(report)
}
