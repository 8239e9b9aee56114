//! Estimation quality metrics and spectral diagnostics.

use serde::{Deserialize, Serialize};

use crate::layer::{self, BauerFikeReport, ForwardHooks, LayerConfig, UpdateEvent};
use crate::linalg::{self, eig_diagnostics, SymMatrix};
use crate::models::ModelParams;
use crate::{autodiff::Tape, Error, Result};

/// Entries at or below this magnitude count as zero when comparing supports.
pub const ZERO_TOL: f64 = 1e-8;

fn check_same_dim(a: &SymMatrix, b: &SymMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{}x{} vs {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `‖Θ̂ − Θ‖²_F / ‖Θ‖²_F` for one pair.
pub fn relative_sq_error(pred: &SymMatrix, truth: &SymMatrix) -> Result<f64> {
    check_same_dim(pred, truth)?;
    let den = truth.frobenius_sq();
    if den == 0.0 {
        return Err(Error::Domain(
            "normalised error against a zero matrix".into(),
        ));
    }
    Ok(pred.combine(1.0, truth, -1.0)?.frobenius_sq() / den)
}

/// Mean relative squared Frobenius error.
pub fn nmse(preds: &[SymMatrix], truths: &[SymMatrix]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += relative_sq_error(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// F1 score of the off-diagonal support of `pred` against `truth`.
pub fn f1_support(pred: &SymMatrix, truth: &SymMatrix, zero_tol: f64) -> Result<f64> {
    check_same_dim(pred, truth)?;
    let p = pred.dim();
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for r in 0..p {
        for c in 0..p {
            if r == c {
                continue;
            }
            match (
                pred.get(r, c).abs() > zero_tol,
                truth.get(r, c).abs() > zero_tol,
            ) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Fraction of off-diagonal entries with magnitude above `zero_tol`.
pub fn density(m: &SymMatrix, zero_tol: f64) -> f64 {
    let p = m.dim();
    if p < 2 {
        return 0.0;
    }
    let nonzero = (0..p)
        .flat_map(|r| (0..p).map(move |c| (r, c)))
        .filter(|&(r, c)| r != c && m.get(r, c).abs() > zero_tol)
        .count();
    nonzero as f64 / (p * (p - 1)) as f64
}

/// Fraction of off-diagonal entries that are exactly zero.
pub fn exact_zero_fraction(m: &SymMatrix) -> f64 {
    1.0 - density(m, 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub nmse: f64,
    pub f1: f64,
    pub min_eig: f64,
    pub cond: f64,
    pub density: f64,
    pub spd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over samples.
    pub nmse: f64,
    /// Mean over samples.
    pub f1: f64,
    /// Minimum over samples.
    pub min_eig: f64,
    /// Maximum over samples.
    pub cond: f64,
    /// Mean over samples.
    pub density: f64,
    pub all_spd: bool,
}

/// Per-sample and aggregate scores of one estimator on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub aggregate: Aggregate,
    pub samples: Vec<SampleMetrics>,
}

pub fn score_sample(
    sample_id: usize,
    pred: &SymMatrix,
    truth: &SymMatrix,
) -> Result<SampleMetrics> {
    let eig = eig_diagnostics(pred);
    Ok(SampleMetrics {
        sample_id,
        nmse: relative_sq_error(pred, truth)?,
        f1: f1_support(pred, truth, ZERO_TOL)?,
        min_eig: eig.min,
        cond: eig.cond,
        density: density(pred, ZERO_TOL),
        spd: linalg::is_positive_definite(pred),
    })
}

pub fn aggregate(samples: &[SampleMetrics]) -> Result<Aggregate> {
    if samples.is_empty() {
        return Err(Error::Dimension("no samples to aggregate".into()));
    }
    let n = samples.len() as f64;
    Ok(Aggregate {
        nmse: samples.iter().map(|s| s.nmse).sum::<f64>() / n,
        f1: samples.iter().map(|s| s.f1).sum::<f64>() / n,
        min_eig: samples
            .iter()
            .map(|s| s.min_eig)
            .fold(f64::INFINITY, f64::min),
        cond: samples.iter().map(|s| s.cond).fold(0.0, f64::max),
        density: samples.iter().map(|s| s.density).sum::<f64>() / n,
        all_spd: samples.iter().all(|s| s.spd),
    })
}

pub fn evaluate(method: &str, preds: &[SymMatrix], truths: &[SymMatrix]) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let samples = preds
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(k, (p, t))| score_sample(k, p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method: method.to_string(),
        aggregate: aggregate(&samples)?,
        samples,
    })
}

/// Spectral summary of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    pub update: usize,
    pub min_eig: f64,
    pub max_diag: f64,
    pub cond: f64,
}

/// One row per snapshot.
pub fn spectral_trace(snapshots: &[SymMatrix]) -> Vec<SpectralRow> {
    snapshots
        .iter()
        .enumerate()
        .map(|(update, m)| {
            let eig = eig_diagnostics(m);
            SpectralRow {
                update,
                min_eig: eig.min,
                max_diag: m.diag().into_iter().fold(f64::NEG_INFINITY, f64::max),
                cond: eig.cond,
            }
        })
        .collect()
}

/// Per-update trace and perturbation audit of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub trace: Vec<SpectralRow>,
    pub audits: Vec<BauerFikeReport>,
    /// Pivot of each update.
    pub columns: Vec<usize>,
}

impl Diagnosis {
    pub fn violations(&self) -> usize {
        self.audits.iter().filter(|a| !a.holds).count()
    }
}

/// Runs `params` on `s`, recording the iterate after every column update.
pub fn diagnose(params: &ModelParams, s: &SymMatrix, cfg: &LayerConfig) -> Result<Diagnosis> {
    match diagnose_partial(params, s, cfg)? {
        (d, None) => Ok(d),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`diagnose`], but a forward pass that breaks down still yields the
/// trace of every update before the breakdown, alongside the error.
pub fn diagnose_partial(
    params: &ModelParams,
    s: &SymMatrix,
    cfg: &LayerConfig,
) -> Result<(Diagnosis, Option<Error>)> {
    params.check_dim(s)?;
    let p = s.dim();
    let mut snapshots = Vec::new();
    let mut audits = Vec::new();
    let mut columns = Vec::new();
    let mut failure = None;
    let mut obs = |ev: &UpdateEvent<'_>| {
        if failure.is_some() {
            return;
        }
        let mut run = || -> Result<()> {
            let before = SymMatrix::symmetrized(p, ev.theta_before.to_vec())?;
            let after = SymMatrix::symmetrized(p, ev.theta_after.to_vec())?;
            audits.push(layer::audit_column_update(&before, &after, ev.column));
            snapshots.push(after);
            columns.push(ev.column);
            Ok(())
        };
        if let Err(e) = run() {
            failure = Some(e);
        }
    };
    let tape = Tape::new();
    let model = params.bind(&tape, false);
    let mut hooks = ForwardHooks {
        observer: Some(&mut obs),
        ..ForwardHooks::default()
    };
    let forward = layer::spodnet_forward_with(&tape, s, &model, cfg, &mut hooks);
    let failure = failure.or(forward.err());
    Ok((
        Diagnosis {
            trace: spectral_trace(&snapshots),
            audits,
            columns,
        },
        failure,
    ))
}
