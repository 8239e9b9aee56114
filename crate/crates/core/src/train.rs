//! Supervised training with a squared Frobenius loss and Adam.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Tape, Tensor, Var};
use crate::datagen::Dataset;
use crate::layer::{
    spodnet_forward, spodnet_forward_with, DetachedHistory, ForwardHooks, GradMode, LayerConfig,
};
use crate::linalg::SymMatrix;
use crate::metrics;
use crate::models::ModelParams;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 10,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// `‖pred − truth‖²_F` on the tape.
pub fn mse_loss<'t>(pred: Var<'t>, truth: &SymMatrix) -> Result<Var<'t>> {
    let p = truth.dim();
    if pred.shape() != [p, p] {
        return Err(Error::Dimension(format!(
            "prediction shape {:?} vs target {p}x{p}",
            pred.shape()
        )));
    }
    let diff = pred.sub(pred.tape().constant(vec![p, p], truth.data().to_vec())?)?;
    Ok(diff.mul(diff)?.sum())
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update on flat buffers.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..theta.len() {
        let g = grad[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let mh = m[k] / c1;
        let vh = v[k] / c2;
        theta[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every tensor of `params`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} tensors",
            grads.len(),
            tensors.len()
        )));
    }
    state.t += 1;
    for (k, t) in tensors.iter_mut().enumerate() {
        if grads[k].len() != t.len() {
            return Err(Error::Dimension(format!(
                "gradient {k} has the wrong length"
            )));
        }
        adam_update(
            t.data_mut(),
            &grads[k],
            &mut state.m[k],
            &mut state.v[k],
            state.t,
            cfg,
        );
    }
    Ok(())
}

/// Loss and parameter gradients for one `(S, Θ_true)` pair.
pub fn sample_gradient(
    params: &ModelParams,
    s: &SymMatrix,
    truth: &SymMatrix,
    layer: &LayerConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    params.check_dim(s)?;
    let tape = Tape::new();
    let model = params.bind(&tape, true);
    let state = spodnet_forward(&tape, s, &model, layer)?;
    let loss = mse_loss(state.theta, truth)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), model.gradients(&grads)))
}

/// Worst relative mismatch between tape gradients of the sample loss and
/// central differences with step `h`.
///
/// In detached mode the inverse-derived constants are recorded once at the
/// unperturbed parameters and replayed for every shifted evaluation, so the
/// differences see the same function the tape differentiates.
pub fn loss_gradient_check(
    params: &ModelParams,
    s: &SymMatrix,
    truth: &SymMatrix,
    layer: &LayerConfig,
    h: f64,
) -> Result<f64> {
    params.check_dim(s)?;
    let frozen = match layer.grad_mode {
        GradMode::Full => None,
        GradMode::Detached => {
            let mut history = DetachedHistory::new();
            let tape = Tape::new();
            let model = params.bind(&tape, false);
            let mut hooks = ForwardHooks {
                record: Some(&mut history),
                ..ForwardHooks::default()
            };
            spodnet_forward_with(&tape, s, &model, layer, &mut hooks)?;
            Some(history)
        }
    };
    let leaves: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    finite_diff_check(
        |tape, vars| {
            let model = params.bind_vars(vars)?;
            let mut hooks = ForwardHooks {
                frozen: frozen.as_ref(),
                ..ForwardHooks::default()
            };
            let state = spodnet_forward_with(tape, s, &model, layer, &mut hooks)?;
            mse_loss(state.theta, truth)
        },
        &leaves,
        h,
    )
}

pub fn predict_all(
    params: &ModelParams,
    ds: &Dataset,
    layer: &LayerConfig,
) -> Result<Vec<SymMatrix>> {
    let run = |k: usize| {
        params
            .predict(&ds.entries[k].s, layer)
            .map_err(|e| tag_sample(e, k, None))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..ds.len()).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..ds.len()).map(run).collect()
    }
}

/// Attaches the sample (and epoch) to failures that arise from the numbers
/// themselves; by the time a sample is run its shapes have been checked.
fn tag_sample(e: Error, sample: usize, epoch: Option<usize>) -> Error {
    match e {
        Error::SpdViolation { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::Domain(_)
        | Error::Contract(_) => Error::Breakdown {
            sample,
            epoch,
            source: Box::new(e),
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_nmse: f64,
    pub test_f1: f64,
    pub min_eig: f64,
    pub max_cond: f64,
    pub mean_density: f64,
}

/// Scores `params` on the whole test set.
pub fn test_metrics(
    epoch: usize,
    train_mse: f64,
    params: &ModelParams,
    test: &Dataset,
    layer: &LayerConfig,
) -> Result<MetricsRow> {
    let preds = predict_all(params, test, layer)?;
    let truths: Vec<SymMatrix> = test.entries.iter().map(|e| e.theta_true.clone()).collect();
    let report = metrics::evaluate("model", &preds, &truths)?;
    let agg = report.aggregate;
    Ok(MetricsRow {
        epoch,
        train_mse,
        test_nmse: agg.nmse,
        test_f1: agg.f1,
        min_eig: agg.min_eig,
        max_cond: agg.cond,
        mean_density: agg.density,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
}

pub fn train(
    params: ModelParams,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    layer: &LayerConfig,
) -> Result<TrainOutcome> {
    train_with(params, train_ds, test_ds, cfg, layer, |_, _| {})
}

/// [`train`] with a callback receiving each epoch's metrics and parameters.
pub fn train_with(
    params: ModelParams,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    layer: &LayerConfig,
    on_epoch: impl FnMut(&MetricsRow, &ModelParams),
) -> Result<TrainOutcome> {
    train_monitored(params, train_ds, test_ds, cfg, layer, on_epoch, |_| {})
}

/// The state of a run at the forward or backward pass that broke it.
#[derive(Debug)]
pub struct TrainFailure<'a> {
    pub epoch: usize,
    /// Index of the failing training sample.
    pub sample: usize,
    /// Parameters the failing pass was run with.
    pub params: &'a ModelParams,
    pub error: &'a Error,
}

/// [`train_with`] plus a callback invoked once, before the error is
/// returned, if a training sample breaks the run.
pub fn train_monitored(
    mut params: ModelParams,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    layer: &LayerConfig,
    mut on_epoch: impl FnMut(&MetricsRow, &ModelParams),
    mut on_failure: impl FnMut(&TrainFailure<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    layer.validate(params.p)?;
    if train_ds.p() != params.p || test_ds.p() != params.p {
        return Err(Error::Dimension(format!(
            "model is for p = {}, datasets have p = {} and {}",
            params.p,
            train_ds.p(),
            test_ds.p()
        )));
    }
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::Config(
            "training and test sets must be non-empty".into(),
        ));
    }
    let mut rng = rng::rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut adam = AdamState::new(&params);
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; train_ds.len()];
        for batch in order.chunks(cfg.batch_size) {
            let run = |&k: &usize| {
                let e = &train_ds.entries[k];
                sample_gradient(&params, &e.s, &e.theta_true, layer)
            };
            #[cfg(feature = "parallel")]
            let attempts: Vec<Result<(f64, Vec<Vec<f64>>)>> = {
                use rayon::prelude::*;
                batch.par_iter().map(run).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let attempts: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch.iter().map(run).collect();
            let mut results = Vec::with_capacity(batch.len());
            // the first failure in batch order is reported, independent of scheduling
            for (&k, attempt) in batch.iter().zip(attempts) {
                match attempt {
                    Ok(r) => results.push(r),
                    Err(error) => {
                        on_failure(&TrainFailure {
                            epoch,
                            sample: k,
                            params: &params,
                            error: &error,
                        });
                        return Err(tag_sample(error, k, Some(epoch)));
                    }
                }
            }

            // reduce in batch order so results do not depend on scheduling
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Vec<f64>> =
                results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
            for (&k, (loss, grads)) in batch.iter().zip(&results) {
                losses[k] = *loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x * scale;
                    }
                }
            }
            adam_step(&mut params, &total, &mut adam, cfg)?;
        }
        // summed in index order so the value does not depend on the shuffle
        let train_mse = losses.iter().sum::<f64>() / train_ds.len() as f64;
        let row = test_metrics(epoch, train_mse, &params, test_ds, layer)?;
        on_epoch(&row, &params);
        rows.push(row);
    }
    Ok(TrainOutcome { params, rows })
}

pub const METRICS_HEADER: &str = "epoch,train_mse,test_nmse,test_f1,min_eig,max_cond,mean_density";

pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_mse, r.test_nmse, r.test_f1, r.min_eig, r.max_cond, r.mean_density
        )?;
    }
    Ok(())
}
