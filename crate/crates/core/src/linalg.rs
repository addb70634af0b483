//! Dense linear algebra kernel: products, norms, symmetric eigendecomposition,
//! and stable rank.
//!
//! Everything operates on row-major `f64` matrices. The eigensolvers are
//! self-contained: cyclic Jacobi when eigenvectors are needed, Householder
//! tridiagonalization plus implicit-shift QL when only the spectrum matters
//! (the Monte Carlo experiments run thousands of 2000-dim spectra, where
//! Jacobi sweeps are too slow).

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Maximum Jacobi sweeps before declaring non-convergence.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal tolerance for Jacobi, relative to the input Frobenius norm.
const JACOBI_OFF_TOL: f64 = 1e-12;
/// Symmetry defect allowed before `symmetric_eig` rejects its input.
const SYMMETRY_DEFECT_TOL: f64 = 1e-10;
/// Relative Rayleigh-quotient tolerance for the power iteration.
const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_CAP: usize = 100_000;
/// Fixed seed for the power-iteration start vector, so spectral norms are
/// reproducible bit-for-bit.
const POWER_ITER_SEED: u64 = 0x5eed_1dea;

/// Dense real matrix, row-major. The universal carrier for weights, updates,
/// and Hessians.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting NaN/Inf and count
    /// mismatches.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "entry count {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::UndefinedInput(
                "matrix entries must be finite".into(),
            ));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64], n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Matrix with i.i.d. Normal(0, std^2) entries drawn from `rng`.
    pub fn gaussian<R: rand::Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard product; `self.cols` must equal `other.rows`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "mul_vec {}x{} by len-{}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// `self^T * v` without materializing the transpose.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::Shape(format!(
                "tr_mul_vec {}x{} by len-{}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i).iter()) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "elementwise {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add_scaled {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest singular value via power iteration on the Gram operator, with
    /// a fixed seeded start vector and a Rayleigh-quotient convergence test.
    pub fn spectral_norm(&self) -> f64 {
        if self.frobenius_norm() == 0.0 {
            return 0.0;
        }
        // Iterate on M^T M or M M^T, whichever is smaller.
        let transpose_side = self.rows < self.cols;
        let dim = self.rows.min(self.cols);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(POWER_ITER_SEED);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        normalize(&mut v);
        let mut lambda = 0.0f64;
        for _ in 0..POWER_ITER_CAP {
            let u = if transpose_side {
                // v lives in row space: u = M (M^T v)
                let w = self.tr_mul_vec(&v).unwrap();
                self.mul_vec(&w).unwrap()
            } else {
                let w = self.mul_vec(&v).unwrap();
                self.tr_mul_vec(&w).unwrap()
            };
            let new_lambda: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v = u;
            for x in v.iter_mut() {
                *x /= norm;
            }
            if (new_lambda - lambda).abs() <= POWER_ITER_TOL * new_lambda.abs().max(1.0) {
                return new_lambda.max(0.0).sqrt();
            }
            lambda = new_lambda;
        }
        lambda.max(0.0).sqrt()
    }

    /// Stable rank ||M||_F^2 / ||M||_2^2, the squared ratio of Frobenius to
    /// spectral norm. Undefined for the zero matrix.
    pub fn stable_rank(&self) -> Result<f64> {
        let fro = self.frobenius_norm();
        if fro == 0.0 {
            return Err(Error::UndefinedInput(
                "stable rank of the zero matrix".into(),
            ));
        }
        let spec = self.spectral_norm();
        Ok((fro / spec) * (fro / spec))
    }

    /// Serializes as "rows cols" followed by one space-separated row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        out.push_str(&format!("{} {}\n", self.rows, self.cols));
        for r in 0..self.rows {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{}", v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }

    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines();
        Self::read_text(&mut lines)
    }

    pub(crate) fn read_text<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Matrix> {
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing matrix header line".into()))?;
        let mut parts = header.split_whitespace();
        let rows: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad matrix header: {header:?}")))?;
        let cols: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad matrix header: {header:?}")))?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing matrix row {r}")))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad entry {tok:?} in row {r}")))?;
                data.push(v);
            }
            if data.len() != (r + 1) * cols {
                return Err(Error::Parse(format!(
                    "row {r} has {} entries, expected {cols}",
                    data.len() - r * cols
                )));
            }
        }
        Matrix::new(rows, cols, data)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Full spectrum of a symmetric matrix, eigenvalues sorted descending with
/// eigenvector columns aligned.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    /// Reconstructs V diag(lambda) V^T; used by the reconstruction checks.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, &lam) in self.eigenvalues.iter().enumerate() {
                    s += v.get(i, k) * lam * v.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        out
    }
}

fn check_square_symmetric(h: &Matrix) -> Result<Matrix> {
    if h.rows() != h.cols() {
        return Err(Error::Shape(format!(
            "symmetric eigensolver needs a square matrix, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    let n = h.rows();
    let mut defect = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            defect = defect.max((h.get(i, j) - h.get(j, i)).abs());
        }
    }
    if defect > SYMMETRY_DEFECT_TOL {
        return Err(Error::UndefinedInput(format!(
            "symmetry defect {defect:.3e} exceeds {SYMMETRY_DEFECT_TOL:.0e}"
        )));
    }
    let mut a = h.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (h.get(i, j) + h.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    Ok(a)
}

/// Full symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// The input is symmetrized first; a symmetry defect above 1e-10 is rejected.
pub fn symmetric_eig(h: &Matrix) -> Result<EigenDecomposition> {
    let mut a = check_square_symmetric(h)?;
    let n = a.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(1.0);
    let tol = JACOBI_OFF_TOL * scale;

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rows/columns p and q of A.
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a.set(k, p, new_kp);
                    a.set(p, k, new_kp);
                    a.set(k, q, new_kq);
                    a.set(q, k, new_kq);
                }
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                // Accumulate the rotation into the eigenvector columns.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(Error::Numeric(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: vectors,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = a.get(i, j);
            s += 2.0 * v * v;
        }
    }
    s.sqrt()
}

/// Eigenvalues only, sorted descending: Householder tridiagonalization
/// followed by implicit-shift QL. Much faster than Jacobi for the
/// 2000-dimensional Monte Carlo spectra.
pub fn symmetric_eigenvalues(h: &Matrix) -> Result<Vec<f64>> {
    let a = check_square_symmetric(h)?;
    let n = a.rows();
    if n == 0 {
        return Ok(vec![]);
    }
    if n == 1 {
        return Ok(vec![a.get(0, 0)]);
    }
    let (mut d, mut e) = tridiagonalize(a);
    ql_implicit(&mut d, &mut e)?;
    d.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(d)
}

/// Householder reduction to tridiagonal form; returns (diagonal, subdiagonal)
/// with the subdiagonal in e[1..].
fn tridiagonalize(mut a: Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a.get(i, k).abs()).sum();
            if scale == 0.0 {
                e[i] = a.get(i, l);
            } else {
                for k in 0..=l {
                    let v = a.get(i, k) / scale;
                    a.set(i, k, v);
                    h += v * v;
                }
                let f = a.get(i, l);
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a.set(i, l, f - g);
                let mut f_acc = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a.get(j, k) * a.get(i, k);
                    }
                    for k in (j + 1)..=l {
                        g += a.get(k, j) * a.get(i, k);
                    }
                    e[j] = g / h;
                    f_acc += e[j] * a.get(i, j);
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a.get(i, j);
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let v = a.get(j, k) - f * e[k] - g * a.get(i, k);
                        a.set(j, k, v);
                    }
                }
            }
        } else {
            e[i] = a.get(i, l);
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = a.get(i, i);
    }
    (d, e)
}

/// Implicit-shift QL on a tridiagonal (d, e); eigenvalues land in `d`.
fn ql_implicit(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::Numeric(
                    "QL iteration did not converge within 50 steps".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
