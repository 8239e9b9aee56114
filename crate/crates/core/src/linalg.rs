//! Dense symmetric linear algebra used outside the differentiated path.
//!
//! Matrices are small (p ≤ a few hundred) and stored row-major in plain
//! vectors. Positive-definiteness is decided by Cholesky with a strict zero
//! pivot tolerance; the Jacobi eigensolver is used for reporting only.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    p: usize,
    data: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl SymMatrix {
    /// Checks `max|A − Aᵀ| ≤ 1e-12 · max|A|` and stores the data unchanged.
    pub fn new(p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != p * p {
            return Err(Error::Dimension(format!(
                "{p}x{p} matrix needs {} values, got {}",
                p * p,
                data.len()
            )));
        }
        let scale = data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for r in 0..p {
            for c in (r + 1)..p {
                let diff = (data[r * p + c] - data[c * p + r]).abs();
                if diff > SYMMETRY_TOL * scale || diff.is_nan() {
                    return Err(Error::Domain(format!(
                        "matrix is not symmetric at ({r}, {c}): difference {diff:e}"
                    )));
                }
            }
        }
        Ok(Self { p, data })
    }

    /// Builds `(X + Xᵀ)/2` from arbitrary square data.
    pub fn symmetrized(p: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != p * p {
            return Err(Error::Dimension(format!(
                "{p}x{p} matrix needs {} values, got {}",
                p * p,
                data.len()
            )));
        }
        symmetrize_in_place(p, &mut data);
        Ok(Self { p, data })
    }

    pub fn from_fn(p: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(p * p);
        for r in 0..p {
            for c in 0..p {
                data.push(f(r, c));
            }
        }
        Self::new(p, data)
    }

    pub fn identity(p: usize) -> Self {
        Self::diagonal(&vec![1.0; p])
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            p,
            data: vec![0.0; p * p],
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let p = diag.len();
        let mut data = vec![0.0; p * p];
        for (k, d) in diag.iter().enumerate() {
            data[k * p + k] = *d;
        }
        Self { p, data }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.p + c]
    }

    /// Sets `(r, c)` and `(c, r)`.
    pub fn set_sym(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.p + c] = value;
        self.data[c * self.p + r] = value;
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.p).map(|k| self.get(k, k)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.p).map(|k| self.get(k, k)).sum()
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &SymMatrix, b: f64) -> Result<SymMatrix> {
        if other.p != self.p {
            return Err(Error::Dimension(format!(
                "cannot combine {}x{} with {}x{}",
                self.p, self.p, other.p, other.p
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(SymMatrix { p: self.p, data })
    }

    pub fn scaled(&self, a: f64) -> SymMatrix {
        SymMatrix {
            p: self.p,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    /// `self + shift·I`.
    pub fn shifted(&self, shift: f64) -> SymMatrix {
        let mut out = self.clone();
        for k in 0..self.p {
            out.data[k * self.p + k] += shift;
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `⟨A, B⟩ = Σ A_ij B_ij`.
    pub fn inner(&self, other: &SymMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Largest off-diagonal magnitude.
    pub fn max_abs_offdiag(&self) -> f64 {
        let mut m = 0.0_f64;
        for r in 0..self.p {
            for c in 0..self.p {
                if r != c {
                    m = m.max(self.get(r, c).abs());
                }
            }
        }
        m
    }

    /// Symmetric conjugation `Q · self · Qᵀ` for a square `q` (row-major).
    pub fn conjugate(&self, q: &[f64]) -> Result<SymMatrix> {
        let p = self.p;
        let qa = matmul(q, &self.data, p, p, p);
        let mut qt = vec![0.0; p * p];
        for r in 0..p {
            for c in 0..p {
                qt[c * p + r] = q[r * p + c];
            }
        }
        SymMatrix::symmetrized(p, matmul(&qa, &qt, p, p, p))
    }

    /// Matrix product `self · other` (not symmetric in general).
    pub fn matmul(&self, other: &SymMatrix) -> Vec<f64> {
        matmul(&self.data, &other.data, self.p, self.p, self.p)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.data, x, self.p)
    }
}

pub(crate) fn symmetrize_in_place(p: usize, data: &mut [f64]) {
    for r in 0..p {
        for c in (r + 1)..p {
            let avg = 0.5 * (data[r * p + c] + data[c * p + r]);
            data[r * p + c] = avg;
            data[c * p + r] = avg;
        }
    }
}

/// Row-major product of an `m × k` and a `k × n` matrix.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..k {
            let arc = a[r * k + c];
            if arc == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(brow) {
                *o += arc * bv;
            }
        }
    }
    out
}

/// `A·x` for a square row-major `A` of dimension `n`.
pub fn matvec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|r| {
            a[r * n..(r + 1) * n]
                .iter()
                .zip(x)
                .map(|(u, v)| u * v)
                .sum()
        })
        .collect()
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    p: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.p
    }

    /// Row-major lower factor (upper triangle is zero).
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// `log det A = 2 Σ log L_kk`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.p)
            .map(|k| self.lower[k * self.p + k].ln())
            .sum::<f64>()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut y = b.to_vec();
        for r in 0..p {
            let mut acc = y[r];
            for c in 0..r {
                acc -= self.lower[r * p + c] * y[c];
            }
            y[r] = acc / self.lower[r * p + r];
        }
        y
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut x = b.to_vec();
        for r in (0..p).rev() {
            let mut acc = x[r];
            for c in (r + 1)..p {
                acc -= self.lower[c * p + r] * x[c];
            }
            x[r] = acc / self.lower[r * p + r];
        }
        x
    }

    /// `A⁻¹`, symmetrised.
    pub fn inverse(&self) -> Vec<f64> {
        let p = self.p;
        // L⁻¹ column by column, then A⁻¹ = L⁻ᵀ L⁻¹
        let mut linv = vec![0.0; p * p];
        let mut e = vec![0.0; p];
        for c in 0..p {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            let col = self.solve_lower(&e);
            for r in 0..p {
                linv[r * p + c] = col[r];
            }
        }
        let mut inv = vec![0.0; p * p];
        for r in 0..p {
            for c in r..p {
                let start = c.max(r);
                let v: f64 = (start..p).map(|k| linv[k * p + r] * linv[k * p + c]).sum();
                inv[r * p + c] = v;
                inv[c * p + r] = v;
            }
        }
        inv
    }
}

fn cholesky_raw(p: usize, a: &[f64]) -> Result<Cholesky> {
    let mut lower = vec![0.0; p * p];
    for c in 0..p {
        let mut pivot = a[c * p + c];
        for k in 0..c {
            pivot -= lower[c * p + k] * lower[c * p + k];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: c,
                value: pivot,
            });
        }
        let d = pivot.sqrt();
        lower[c * p + c] = d;
        for r in (c + 1)..p {
            let mut acc = a[r * p + c];
            for k in 0..c {
                acc -= lower[r * p + k] * lower[c * p + k];
            }
            lower[r * p + c] = acc / d;
        }
    }
    Ok(Cholesky { p, lower })
}

/// Cholesky factorisation with strict positivity of every pivot.
pub fn cholesky(a: &SymMatrix) -> Result<Cholesky> {
    cholesky_raw(a.p, &a.data)
}

/// Strict PD test.
pub fn is_positive_definite(a: &SymMatrix) -> bool {
    cholesky(a).is_ok()
}

/// Inverse through Cholesky, symmetrised by `(X + Xᵀ)/2`.
pub fn spd_inverse(a: &SymMatrix) -> Result<SymMatrix> {
    let inv = cholesky(a)?.inverse();
    SymMatrix::symmetrized(a.p, inv)
}

/// Inverse of the symmetric part of raw square data.
pub(crate) fn spd_inverse_raw(p: usize, data: &[f64]) -> Result<Vec<f64>> {
    let mut sym = data.to_vec();
    symmetrize_in_place(p, &mut sym);
    let mut inv = cholesky_raw(p, &sym)?.inverse();
    symmetrize_in_place(p, &mut inv);
    Ok(inv)
}

/// Partition of a symmetric matrix at pivot `i`: the `(p−1)×(p−1)` block
/// without row/column `i`, the off-diagonal part of column `i`, and the
/// pivot entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub i: usize,
    pub p: usize,
    pub block11: Vec<f64>,
    pub col: Vec<f64>,
    pub diag: f64,
}

impl BlockView {
    /// Indices of the rows kept in `block11`, in order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| j != self.i).collect()
    }
}

pub fn extract_block(a: &SymMatrix, i: usize) -> Result<BlockView> {
    let p = a.p;
    if i >= p {
        return Err(Error::Dimension(format!(
            "pivot {i} out of range for dimension {p}"
        )));
    }
    let idx: Vec<usize> = (0..p).filter(|&j| j != i).collect();
    let mut block11 = Vec::with_capacity((p - 1) * (p - 1));
    for &r in &idx {
        block11.extend(idx.iter().map(|&c| a.get(r, c)));
    }
    let col = idx.iter().map(|&r| a.get(r, i)).collect();
    Ok(BlockView {
        i,
        p,
        block11,
        col,
        diag: a.get(i, i),
    })
}

pub fn embed_block(view: &BlockView) -> Result<SymMatrix> {
    let p = view.p;
    let q = p.saturating_sub(1);
    if view.i >= p || view.block11.len() != q * q || view.col.len() != q {
        return Err(Error::Dimension("inconsistent block view".into()));
    }
    let idx = view.indices();
    let mut data = vec![0.0; p * p];
    for (k, &r) in idx.iter().enumerate() {
        for (l, &c) in idx.iter().enumerate() {
            data[r * p + c] = view.block11[k * q + l];
        }
        data[r * p + view.i] = view.col[k];
        data[view.i * p + r] = view.col[k];
    }
    data[view.i * p + view.i] = view.diag;
    SymMatrix::new(p, data)
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(a: &SymMatrix) -> Vec<f64> {
    let p = a.p;
    let mut m = a.data.clone();
    let total: f64 = m.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return vec![0.0; p];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for r in 0..p {
            for c in (r + 1)..p {
                off += m[r * p + c] * m[r * p + c];
            }
        }
        if off <= 1e-32 * total {
            break;
        }
        for r in 0..p {
            for c in (r + 1)..p {
                let arc = m[r * p + c];
                if arc == 0.0 {
                    continue;
                }
                let arr = m[r * p + r];
                let acc = m[c * p + c];
                let theta = (acc - arr) / (2.0 * arc);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..p {
                    let mkr = m[k * p + r];
                    let mkc = m[k * p + c];
                    m[k * p + r] = cs * mkr - sn * mkc;
                    m[k * p + c] = sn * mkr + cs * mkc;
                }
                for k in 0..p {
                    let mrk = m[r * p + k];
                    let mck = m[c * p + k];
                    m[r * p + k] = cs * mrk - sn * mck;
                    m[c * p + k] = sn * mrk + cs * mck;
                }
                m[r * p + c] = 0.0;
                m[c * p + r] = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..p).map(|k| m[k * p + k]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

/// Extreme eigenvalues and condition number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigDiagnostics {
    pub min: f64,
    pub max: f64,
    pub cond: f64,
}

pub fn eig_diagnostics(a: &SymMatrix) -> EigDiagnostics {
    let eig = symmetric_eigenvalues(a);
    let min = eig.first().copied().unwrap_or(0.0);
    let max = eig.last().copied().unwrap_or(0.0);
    EigDiagnostics {
        min,
        max,
        cond: max / min,
    }
}

/// `‖A·B − I‖∞` (max absolute entry) for square row-major data.
pub fn identity_residual(a: &[f64], b: &[f64], p: usize) -> f64 {
    let prod = matmul(a, b, p, p, p);
    let mut worst = 0.0_f64;
    for r in 0..p {
        for c in 0..p {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((prod[r * p + c] - target).abs());
        }
    }
    worst
}
