//! Model-based precision estimators: graphical lasso, Ledoit-Wolf and OAS.
//!
//! The graphical lasso is solved by block coordinate descent over column-row
//! pairs. For a block, the diagonal is set to its exact minimiser and the
//! off-diagonal column takes proximal-gradient steps with backtracking. Both
//! are written through the same assembly as the learned layer, so `Θ` stays
//! positive definite and `W = Θ⁻¹` is maintained in O(p²) per block.

use serde::{Deserialize, Serialize};

use crate::autodiff::soft_threshold;
use crate::datagen::Samples;
use crate::layer::{assemble_w_plus, theta11_inverse};
use crate::linalg::{self, extract_block, BlockView, SymMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlassoConfig {
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Stop once a sweep lowers the objective by less than this.
    pub tol: f64,
    /// Proximal-gradient steps per block visit.
    pub inner_steps: usize,
    /// Fixed step size; `None` backtracks from `1 / (s₂₂·max diag [Θ₁₁]⁻¹)`.
    pub step: Option<f64>,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            max_sweeps: 2000,
            tol: 1e-12,
            inner_steps: 20,
            step: None,
        }
    }
}

impl GlassoConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if let Some(g) = self.step {
            if !(g > 0.0) {
                return Err(Error::Config(format!("step must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// `−log det Θ + ⟨S, Θ⟩ + λ Σ_{i≠j} |Θ_ij|`.
pub fn glasso_objective(theta: &SymMatrix, s: &SymMatrix, lambda: f64) -> Result<f64> {
    let chol = linalg::cholesky(theta)?;
    let p = theta.dim();
    let mut l1 = 0.0;
    for r in 0..p {
        for c in 0..p {
            if r != c {
                l1 += theta.get(r, c).abs();
            }
        }
    }
    Ok(-chol.logdet() + theta.inner(s) + lambda * l1)
}

/// One proximal-gradient step on the off-diagonal column of block `view`:
/// `ST_{γλ}(θ₁₂ − γ(s₁₂ − w₁₂))`.
pub fn block_gista_step(
    view: &BlockView,
    s12: &[f64],
    w12: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    if s12.len() != view.col.len() || w12.len() != view.col.len() {
        return Err(Error::Dimension(
            "block step vectors differ in length".into(),
        ));
    }
    Ok(view
        .col
        .iter()
        .zip(s12.iter().zip(w12))
        .map(|(t, (s, w))| soft_threshold(t - gamma * (s - w), gamma * lambda))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoResult {
    pub theta: SymMatrix,
    /// Objective before the first sweep and after every sweep.
    pub objectives: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Graphical lasso by block coordinate descent, starting from `(S + I)⁻¹`.
pub fn glasso_solve(s: &SymMatrix, cfg: &GlassoConfig) -> Result<GlassoResult> {
    cfg.validate()?;
    let p = s.dim();
    if p < 2 {
        return Err(Error::Dimension("graphical lasso needs p ≥ 2".into()));
    }
    if s.diag().iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Domain(
            "covariance has a non-positive diagonal entry".into(),
        ));
    }
    if linalg::symmetric_eigenvalues(s)[0] < -1e-10 * s.max_abs() {
        return Err(Error::Domain(
            "covariance is not positive semi-definite".into(),
        ));
    }
    let mut w = s.shifted(1.0);
    let mut theta = linalg::spd_inverse(&w)?;
    let mut objectives = vec![glasso_objective(&theta, s, cfg.lambda)?];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        for i in 0..p {
            let view = extract_block(&theta, i)?;
            let a = theta11_inverse(&extract_block(&w, i)?)?;
            let s_view = extract_block(s, i)?;
            let s22 = s_view.diag;
            let q = p - 1;
            let mut col = view.col.clone();
            let max_diag = (0..q).map(|k| a[k * q + k]).fold(0.0, f64::max);
            let mut gamma = cfg.step.unwrap_or(1.0 / (s22 * max_diag));
            for _ in 0..cfg.inner_steps {
                // W's column once the diagonal sits at its minimiser 1/s₂₂
                let w12: Vec<f64> = linalg::matvec(&a, &col, q)
                    .iter()
                    .map(|x| -s22 * x)
                    .collect();
                let current = BlockView {
                    col: col.clone(),
                    ..view.clone()
                };
                let next = loop {
                    let cand = block_gista_step(&current, &s_view.col, &w12, gamma, cfg.lambda)?;
                    if cfg.step.is_some() {
                        break cand;
                    }
                    let d: Vec<f64> = cand.iter().zip(&col).map(|(x, y)| x - y).collect();
                    let curv = s22 * crate::autodiff::quad(&d, &a);
                    let dd: f64 = d.iter().map(|x| x * x).sum();
                    if curv * gamma <= dd * (1.0 + 1e-12) || dd == 0.0 {
                        break cand;
                    }
                    gamma *= 0.5;
                };
                let moved = next.iter().zip(&col).any(|(x, y)| x != y);
                col = next;
                if !moved {
                    break;
                }
            }
            let v = 1.0 / s22;
            let updated = BlockView {
                diag: v + crate::autodiff::quad(&col, &a),
                col: col.clone(),
                ..view
            };
            theta = linalg::embed_block(&updated)?;
            w = assemble_w_plus(i, &a, &col, v)?;
        }
        sweeps += 1;
        w = linalg::spd_inverse(&theta)?;
        let obj = glasso_objective(&theta, s, cfg.lambda)?;
        let prev = *objectives.last().unwrap();
        objectives.push(obj);
        if prev - obj < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(GlassoResult {
        theta,
        objectives,
        sweeps,
        converged,
    })
}

/// Largest violation of the graphical-lasso optimality conditions at `theta`.
pub fn kkt_residual(theta: &SymMatrix, s: &SymMatrix, lambda: f64) -> Result<f64> {
    let w = linalg::spd_inverse(theta)?;
    let p = theta.dim();
    let mut worst = 0.0_f64;
    for r in 0..p {
        for c in 0..p {
            let g = s.get(r, c) - w.get(r, c);
            let t = theta.get(r, c);
            let res = if r == c {
                g.abs()
            } else if t == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g + lambda * t.signum()).abs()
            };
            worst = worst.max(res);
        }
    }
    Ok(worst)
}

/// Ten log-spaced penalties over `[0.01, 1]·max |S_ij|` (off-diagonal).
pub fn default_lambda_grid(s: &SymMatrix) -> Vec<f64> {
    let top = s.max_abs_offdiag();
    if top == 0.0 {
        return vec![0.0];
    }
    (0..10)
        .map(|k| top * 10f64.powf(-2.0 + 2.0 * k as f64 / 9.0))
        .collect()
}

/// `−log det Θ + ⟨S, Θ⟩`.
pub fn gaussian_nll(theta: &SymMatrix, s: &SymMatrix) -> Result<f64> {
    glasso_objective(theta, s, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambda: f64,
    pub theta: SymMatrix,
    /// Mean held-out score per grid value.
    pub scores: Vec<f64>,
    /// Held-out score per grid value and fold.
    pub fold_scores: Vec<Vec<f64>>,
}

/// Chooses the penalty by K-fold held-out likelihood over contiguous folds
/// and refits on all samples. Ties go to the larger penalty.
pub fn glasso_cv(
    samples: &Samples,
    grid: &[f64],
    folds: usize,
    base: &GlassoConfig,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let n = samples.n;
    let bounds: Vec<(usize, usize)> = (0..folds)
        .map(|f| (f * n / folds, (f + 1) * n / folds))
        .collect();
    if bounds.iter().any(|&(a, b)| b - a < 2 || n - (b - a) < 2) {
        return Err(Error::Config(format!(
            "{n} samples are too few for {folds} folds (each fold needs at least 2)"
        )));
    }
    let mut fold_data = Vec::with_capacity(folds);
    for &(a, b) in &bounds {
        fold_data.push((
            samples.without_rows(a..b).covariance()?,
            samples.rows(a..b).covariance()?,
        ));
    }
    let mut fold_scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = GlassoConfig {
            lambda,
            ..base.clone()
        };
        let mut row = Vec::with_capacity(folds);
        for (train, hold) in &fold_data {
            let fit = glasso_solve(train, &cfg)?;
            row.push(gaussian_nll(&fit.theta, hold)?);
        }
        fold_scores.push(row);
    }
    let scores: Vec<f64> = fold_scores
        .iter()
        .map(|r| r.iter().sum::<f64>() / folds as f64)
        .collect();
    let mut best = 0;
    for k in 1..grid.len() {
        let better =
            scores[k] < scores[best] || (scores[k] == scores[best] && grid[k] > grid[best]);
        if better {
            best = k;
        }
    }
    let lambda = grid[best];
    let theta = glasso_solve(
        &samples.covariance()?,
        &GlassoConfig {
            lambda,
            ..base.clone()
        },
    )?
    .theta;
    Ok(CvResult {
        lambda,
        theta,
        scores,
        fold_scores,
    })
}

/// A shrunk covariance `(1 − ρ)S + ρμI` and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Shrinkage {
    pub shrinkage: f64,
    pub covariance: SymMatrix,
    pub precision: SymMatrix,
}

fn shrink(s: &SymMatrix, rho: f64) -> Result<Shrinkage> {
    let p = s.dim();
    let mu = s.trace() / p as f64;
    let covariance = s.combine(1.0 - rho, &SymMatrix::identity(p), rho * mu)?;
    let precision = linalg::spd_inverse(&covariance)?;
    Ok(Shrinkage {
        shrinkage: rho,
        covariance,
        precision,
    })
}

/// Ledoit-Wolf shrinkage towards `μI` (samples treated as centred).
pub fn ledoit_wolf(samples: &Samples) -> Result<Shrinkage> {
    let s = samples.covariance()?;
    let (n, p) = (samples.n, samples.p);
    if n < 2 {
        return shrink(&s, 1.0);
    }
    let mu = s.trace() / p as f64;
    // Σ_ij Σ_k x_ki² x_kj²
    let mut beta_sum = 0.0;
    for k in 0..n {
        let sq: f64 = samples.row(k).iter().map(|x| x * x).sum();
        beta_sum += sq * sq;
    }
    let nf = n as f64;
    let delta_sum = s.frobenius_sq();
    let beta = (beta_sum / nf - delta_sum) / (p as f64 * nf);
    let delta = (delta_sum - 2.0 * mu * s.trace() + p as f64 * mu * mu) / p as f64;
    let rho = if delta <= 0.0 {
        1.0
    } else {
        beta.min(delta).max(0.0) / delta
    };
    shrink(&s, rho)
}

/// Oracle approximating shrinkage towards `μI`.
pub fn oas(samples: &Samples) -> Result<Shrinkage> {
    let s = samples.covariance()?;
    let (n, p) = (samples.n as f64, samples.p as f64);
    let tr = s.trace();
    let tr2 = s.frobenius_sq();
    let num = (1.0 - 2.0 / p) * tr2 + tr * tr;
    let den = (n + 1.0 - 2.0 / p) * (tr2 - tr * tr / p);
    let rho = if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    };
    shrink(&s, rho)
}
