//! The column-row update layer.
//!
//! Each layer visits every pivot `i` once. For a pivot it
//!
//! 1. reads the blocks `W₁₁, w₁₂, w₂₂` of the running inverse `W = Θ⁻¹`,
//! 2. forms `[Θ₁₁]⁻¹ = W₁₁ − w₁₂w₁₂ᵀ / w₂₂` in O(p²),
//! 3. asks the update functions for a new off-diagonal column `u` and a
//!    strictly positive Schur complement `v`,
//! 4. writes `u` into row/column `i` and `v + uᵀ[Θ₁₁]⁻¹u` on the diagonal,
//!    which keeps `Θ` positive definite for any `u`,
//! 5. refreshes `W` blockwise in O(p²).
//!
//! `W` is re-synchronised with a dense inverse of `Θ` after every layer.
//!
//! Two gradient modes exist. In [`GradMode::Detached`] the running inverse is
//! maintained off the tape, so `[Θ₁₁]⁻¹` and `w₁₂` enter each column update as
//! constants. [`GradMode::Full`] keeps the whole `W` recursion on the tape.

use crate::autodiff::{Tape, Var};
use crate::linalg::{self, extract_block, BlockView, SymMatrix};
use crate::{Error, Result};

/// Quadratic forms at or below this value disable the stabiliser.
pub const STABILIZER_EPS: f64 = 1e-12;

/// How gradients flow through the maintained inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    #[default]
    Detached,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ColumnOrder {
    #[default]
    Natural,
    Custom(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    /// Target of the preactivation rescaling; must be positive.
    pub zeta: f64,
    /// Apply the `ζ` rescaling at all.
    pub stabilize: bool,
    pub num_layers: usize,
    pub column_order: ColumnOrder,
    pub grad_mode: GradMode,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            stabilize: true,
            num_layers: 1,
            column_order: ColumnOrder::Natural,
            grad_mode: GradMode::Detached,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return Err(Error::Config(format!(
                "zeta must be positive, got {}",
                self.zeta
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if let ColumnOrder::Custom(order) = &self.column_order {
            let mut seen = vec![false; p];
            if order.len() != p {
                return Err(Error::Config(format!(
                    "column order has {} entries for dimension {p}",
                    order.len()
                )));
            }
            for &i in order {
                if i >= p || seen[i] {
                    return Err(Error::Config("column order is not a permutation".into()));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub fn order(&self, p: usize) -> Vec<usize> {
        match &self.column_order {
            ColumnOrder::Natural => (0..p).collect(),
            ColumnOrder::Custom(order) => order.clone(),
        }
    }

    /// `Some(ζ)` when the stabiliser is enabled.
    pub fn stabilizer(&self) -> Option<f64> {
        self.stabilize.then_some(self.zeta)
    }
}

// ---------------------------------------------------------------------------
// Plain-valued building blocks

/// `[Θ₁₁]⁻¹ = W₁₁ − w₁₂w₁₂ᵀ / w₂₂` from the partition of `W = Θ⁻¹`.
pub fn theta11_inverse(w_view: &BlockView) -> Result<Vec<f64>> {
    if !(w_view.diag > 0.0) {
        return Err(Error::SpdViolation {
            column: w_view.i,
            detail: format!("w22 = {:e} is not positive", w_view.diag),
        });
    }
    let q = w_view.col.len();
    let mut out = w_view.block11.clone();
    for r in 0..q {
        let wr = w_view.col[r] / w_view.diag;
        for c in 0..q {
            out[r * q + c] -= wr * w_view.col[c];
        }
    }
    linalg::symmetrize_in_place(q, &mut out);
    Ok(out)
}

fn check_schur(column: usize, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "Schur complement v = {v:e} at column {column} must be strictly positive"
        )))
    }
}

/// `Θ⁺`: column `i` replaced by `u`, pivot set to `v + uᵀ[Θ₁₁]⁻¹u`.
pub fn assemble_theta_plus(
    view: &BlockView,
    u: &[f64],
    v: f64,
    theta11_inv: &[f64],
) -> Result<SymMatrix> {
    check_schur(view.i, v)?;
    if u.len() != view.col.len() {
        return Err(Error::Dimension(format!(
            "column update of length {} for block of size {}",
            u.len(),
            view.col.len()
        )));
    }
    let updated = BlockView {
        i: view.i,
        p: view.p,
        block11: view.block11.clone(),
        col: u.to_vec(),
        diag: v + crate::autodiff::quad(u, theta11_inv),
    };
    linalg::embed_block(&updated)
}

/// `W⁺ = (Θ⁺)⁻¹` assembled blockwise from `[Θ₁₁]⁻¹`, `u` and `v`.
pub fn assemble_w_plus(i: usize, theta11_inv: &[f64], u: &[f64], v: f64) -> Result<SymMatrix> {
    check_schur(i, v)?;
    let q = u.len();
    if theta11_inv.len() != q * q {
        return Err(Error::Dimension("theta11 inverse does not match u".into()));
    }
    let au = linalg::matvec(theta11_inv, u, q);
    let mut block11 = theta11_inv.to_vec();
    for r in 0..q {
        let ar = au[r] / v;
        for c in 0..q {
            block11[r * q + c] += ar * au[c];
        }
    }
    linalg::symmetrize_in_place(q, &mut block11);
    linalg::embed_block(&BlockView {
        i,
        p: q + 1,
        block11,
        col: au.iter().map(|x| -x / v).collect(),
        diag: 1.0 / v,
    })
}

/// Rescales `z` so that `zᵀ[Θ₁₁]⁻¹z = ζ`; returns `z` unchanged when the
/// quadratic form is at most [`STABILIZER_EPS`].
pub fn stabilize_preactivation(z: &[f64], theta11_inv: &[f64], zeta: f64) -> Vec<f64> {
    let q = crate::autodiff::quad(z, theta11_inv);
    if q <= STABILIZER_EPS {
        return z.to_vec();
    }
    let scale = zeta.sqrt() / q.sqrt();
    z.iter().map(|x| x * scale).collect()
}

/// Taped version of [`stabilize_preactivation`].
pub fn stabilize_preactivation_var<'t>(
    z: Var<'t>,
    theta11_inv: Var<'t>,
    zeta: f64,
) -> Result<Var<'t>> {
    let q = z.quadratic_form(theta11_inv)?;
    if q.item() <= STABILIZER_EPS {
        return Ok(z);
    }
    let scale = q.sqrt()?.reciprocal()?.scale(zeta.sqrt());
    z.mul(scale)
}

/// Nonzero eigenvalues `(λ₊, λ₋)` of the rank-2 perturbation with
/// off-diagonal column `col_diff` and pivot change `diag_diff`.
pub fn rank2_delta_eigs(col_diff: &[f64], diag_diff: f64) -> (f64, f64) {
    let c2: f64 = col_diff.iter().map(|x| x * x).sum();
    let root = (diag_diff * diag_diff + 4.0 * c2).sqrt();
    ((diag_diff + root) / 2.0, (diag_diff - root) / 2.0)
}

/// Perturbation `Θ⁺ − Θ` of a single column update at pivot `i`, returned as
/// `(column difference, pivot difference)`.
pub fn column_update_delta(before: &SymMatrix, after: &SymMatrix, i: usize) -> (Vec<f64>, f64) {
    let p = before.dim();
    let col = (0..p)
        .filter(|&r| r != i)
        .map(|r| after.get(r, i) - before.get(r, i))
        .collect();
    (col, after.get(i, i) - before.get(i, i))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BauerFikeReport {
    pub holds: bool,
    /// `max_k |λ_k(Θ) − λ_k(Θ⁺)| − ‖Δ‖_op`; non-positive when the bound holds.
    pub max_violation: f64,
    pub max_shift: f64,
}

/// Slack allowed on the eigenvalue perturbation bound.
pub const BAUER_FIKE_SLACK: f64 = 1e-8;

/// Checks `|λ_k(Θ) − λ_k(Θ⁺)| ≤ ‖Δ‖_op` for every `k` with both spectra
/// sorted in the same order.
pub fn bauer_fike_check(
    theta_before: &SymMatrix,
    theta_after: &SymMatrix,
    delta_op_norm: f64,
) -> BauerFikeReport {
    let a = linalg::symmetric_eigenvalues(theta_before);
    let b = linalg::symmetric_eigenvalues(theta_after);
    let max_shift = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max);
    let max_violation = max_shift - delta_op_norm;
    BauerFikeReport {
        holds: max_violation <= BAUER_FIKE_SLACK,
        max_violation,
        max_shift,
    }
}

/// Audits one column update with the rank-2 operator norm.
pub fn audit_column_update(before: &SymMatrix, after: &SymMatrix, i: usize) -> BauerFikeReport {
    let (col, diag) = column_update_delta(before, after, i);
    let (lp, lm) = rank2_delta_eigs(&col, diag);
    bauer_fike_check(before, after, lp.abs().max(lm.abs()))
}

// ---------------------------------------------------------------------------
// Taped layer

/// Everything a column update may look at for pivot `index`.
#[derive(Debug, Clone, Copy)]
pub struct ColumnInputs<'t> {
    pub index: usize,
    pub theta12: Var<'t>,
    pub theta22: Var<'t>,
    pub s12: Var<'t>,
    pub s22: Var<'t>,
    pub w12: Var<'t>,
    pub theta11_inv: Var<'t>,
    /// `Some(ζ)` when the preactivation must be rescaled.
    pub stabilizer: Option<f64>,
}

/// The learned maps of a layer: `f` produces the new column, `g` the
/// strictly positive Schur complement.
pub trait UpdateFns<'t> {
    fn column(&self, tape: &'t Tape, inputs: &ColumnInputs<'t>) -> Result<Var<'t>>;

    fn diagonal(
        &self,
        tape: &'t Tape,
        theta22: Var<'t>,
        s22: Var<'t>,
        schur_quad: Var<'t>,
    ) -> Result<Var<'t>>;
}

#[derive(Debug, Clone)]
pub enum WState<'t> {
    Detached(Vec<f64>),
    Tracked(Var<'t>),
}

/// Running pair `(Θ, W = Θ⁻¹)`.
#[derive(Debug, Clone)]
pub struct SpdState<'t> {
    pub theta: Var<'t>,
    pub w: WState<'t>,
    pub p: usize,
}

impl<'t> SpdState<'t> {
    pub fn theta_matrix(&self) -> Result<SymMatrix> {
        SymMatrix::symmetrized(self.p, self.theta.value())
    }

    pub fn w_values(&self) -> Vec<f64> {
        match &self.w {
            WState::Detached(w) => w.clone(),
            WState::Tracked(v) => v.value(),
        }
    }
}

/// Constants fed to one column update in detached mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnConstants {
    pub theta11_inv: Vec<f64>,
    pub w12: Vec<f64>,
}

/// The detached constants of a whole forward pass, in update order.
pub type DetachedHistory = Vec<ColumnConstants>;

/// One column update as seen by an observer.
#[derive(Debug)]
pub struct UpdateEvent<'a> {
    pub layer: usize,
    /// Position in the column order.
    pub step: usize,
    pub column: usize,
    pub theta_before: &'a [f64],
    pub theta_after: &'a [f64],
    pub w_after: &'a [f64],
}

/// Optional instrumentation of a forward pass.
#[derive(Default)]
pub struct ForwardHooks<'h> {
    /// Replays previously recorded detached constants instead of the live
    /// inverse (detached mode only).
    pub frozen: Option<&'h DetachedHistory>,
    /// Receives the detached constants actually used.
    pub record: Option<&'h mut DetachedHistory>,
    pub observer: Option<&'h mut dyn FnMut(&UpdateEvent<'_>)>,
}

/// One layer: `p` column-row updates in `cfg`'s column order.
pub fn spodnet_layer<'t, F: UpdateFns<'t>>(
    tape: &'t Tape,
    state: SpdState<'t>,
    s: &SymMatrix,
    fns: &F,
    cfg: &LayerConfig,
    layer: usize,
    hooks: &mut ForwardHooks<'_>,
) -> Result<SpdState<'t>> {
    let p = state.p;
    if s.dim() != p {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, state is {p}x{p}",
            s.dim(),
            s.dim()
        )));
    }
    let q = p - 1;
    let SpdState {
        mut theta, mut w, ..
    } = state;
    for (step, i) in cfg.order(p).into_iter().enumerate() {
        let theta_before = hooks.observer.as_ref().map(|_| theta.value());

        // inverse of Θ₁₁ and w₁₂
        let (a_var, w12_var, live) = match &w {
            WState::Detached(wv) => {
                let wm = SymMatrix::symmetrized(p, wv.clone())?;
                let view = extract_block(&wm, i)?;
                let consts = match hooks.frozen {
                    Some(history) => {
                        let k = layer * p + step;
                        history.get(k).cloned().ok_or_else(|| {
                            Error::Contract(format!("frozen history has no entry {k}"))
                        })?
                    }
                    None => ColumnConstants {
                        theta11_inv: theta11_inverse(&view)?,
                        w12: view.col.clone(),
                    },
                };
                if let Some(rec) = hooks.record.as_deref_mut() {
                    rec.push(consts.clone());
                }
                let a = tape.constant(vec![q, q], consts.theta11_inv.clone())?;
                let w12 = tape.constant(vec![q], consts.w12)?;
                (a, w12, Some(consts.theta11_inv))
            }
            WState::Tracked(wv) => {
                let w22 = wv.entry(i, i)?;
                if !(w22.item() > 0.0) {
                    return Err(Error::SpdViolation {
                        column: i,
                        detail: format!("w22 = {:e} is not positive", w22.item()),
                    });
                }
                let w11 = wv.submatrix_excluding(i)?;
                let w12 = wv.column_excluding(i)?;
                let a = w11.sub(w12.outer(w12)?.div(w22)?)?;
                (a, w12, None)
            }
        };

        let s_view = extract_block(s, i)?;
        let inputs = ColumnInputs {
            index: i,
            theta12: theta.column_excluding(i)?,
            theta22: theta.entry(i, i)?,
            s12: tape.constant(vec![q], s_view.col)?,
            s22: tape.scalar(s_view.diag),
            w12: w12_var,
            theta11_inv: a_var,
            stabilizer: cfg.stabilizer(),
        };
        let u = fns.column(tape, &inputs)?;
        if u.len() != q {
            return Err(Error::Dimension(format!(
                "column update returned {} values, expected {q}",
                u.len()
            )));
        }
        let quad = u.quadratic_form(a_var)?;
        let v = fns.diagonal(tape, inputs.theta22, inputs.s22, quad)?;
        let v_val = v.item();
        if !(v_val > 0.0) || !v_val.is_finite() {
            return Err(Error::SpdViolation {
                column: i,
                detail: format!("diagonal map returned v = {v_val:e}"),
            });
        }
        theta = theta.replace_row_col(i, u, v.add(quad)?)?;

        w = match (w, live) {
            (WState::Detached(_), Some(a)) => {
                let u_val = u.value();
                WState::Detached(assemble_w_plus(i, &a, &u_val, v_val)?.into_data())
            }
            (WState::Tracked(_), None) => {
                let au = a_var.matmul(u)?;
                let inv_v = v.reciprocal()?;
                let w11 = a_var.add(au.outer(au)?.mul(inv_v)?)?;
                let w12 = au.mul(inv_v)?.neg();
                WState::Tracked(w11.embed_block(w12, inv_v, i)?)
            }
            _ => unreachable!("W state and constants always agree"),
        };

        if let Some(obs) = hooks.observer.as_deref_mut() {
            let after = theta.value();
            let w_after = match &w {
                WState::Detached(v) => v.clone(),
                WState::Tracked(v) => v.value(),
            };
            obs(&UpdateEvent {
                layer,
                step,
                column: i,
                theta_before: theta_before.as_deref().unwrap_or(&[]),
                theta_after: &after,
                w_after: &w_after,
            });
        }
    }

    // re-synchronise W with a dense inverse of Θ
    let w = match w {
        WState::Detached(_) => WState::Detached(linalg::spd_inverse_raw(p, &theta.value())?),
        WState::Tracked(_) => WState::Tracked(theta.inv_spd()?),
    };
    Ok(SpdState { theta, w, p })
}

/// Initial state `Θ_in = (S + I)⁻¹`, `W_in = S + I`.
pub fn initial_state<'t>(tape: &'t Tape, s: &SymMatrix, mode: GradMode) -> Result<SpdState<'t>> {
    let p = s.dim();
    if p < 2 {
        return Err(Error::Dimension(
            "at least a 2x2 covariance is required".into(),
        ));
    }
    let shifted = s.shifted(1.0);
    let theta_in = linalg::spd_inverse(&shifted)?;
    let theta = tape.constant(vec![p, p], theta_in.into_data())?;
    let w = match mode {
        GradMode::Detached => WState::Detached(shifted.into_data()),
        GradMode::Full => WState::Tracked(tape.constant(vec![p, p], shifted.into_data())?),
    };
    Ok(SpdState { theta, w, p })
}

/// Runs `cfg.num_layers` layers from `Θ_in = (S + I)⁻¹`.
pub fn spodnet_forward<'t, F: UpdateFns<'t>>(
    tape: &'t Tape,
    s: &SymMatrix,
    fns: &F,
    cfg: &LayerConfig,
) -> Result<SpdState<'t>> {
    spodnet_forward_with(tape, s, fns, cfg, &mut ForwardHooks::default())
}

pub fn spodnet_forward_with<'t, F: UpdateFns<'t>>(
    tape: &'t Tape,
    s: &SymMatrix,
    fns: &F,
    cfg: &LayerConfig,
    hooks: &mut ForwardHooks<'_>,
) -> Result<SpdState<'t>> {
    cfg.validate(s.dim())?;
    if hooks.frozen.is_some() && cfg.grad_mode == GradMode::Full {
        return Err(Error::Config(
            "frozen history only applies to detached mode".into(),
        ));
    }
    let mut state = initial_state(tape, s, cfg.grad_mode)?;
    for layer in 0..cfg.num_layers {
        state = spodnet_layer(tape, state, s, fns, cfg, layer, hooks)?;
    }
    Ok(state)
}
