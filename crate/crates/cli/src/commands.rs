use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use spodnet::baselines::{
    default_lambda_grid, glasso_cv, glasso_solve, ledoit_wolf, oas, GlassoConfig,
};
use spodnet::checkpoint::Checkpoint;
use spodnet::datagen::{self, build_dataset, Dataset, GenConfig};
use spodnet::layer::{GradMode, LayerConfig};
use spodnet::metrics::{self, evaluate, EvalReport};
use spodnet::models::init_params;
use spodnet::train::{predict_all, train_with, write_metrics_csv, TrainConfig};
use spodnet::SymMatrix;

use crate::args::{
    BaselineArgs, DiagnoseArgs, EvalArgs, GenDataArgs, GradModeArg, MethodArg, TrainArgs,
};
use crate::Failure;

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    let ds = datagen::load(dir).map_err(|e| match e {
        spodnet::Error::Io(_) | spodnet::Error::Format(_) => io_err(dir, e),
        other => Failure::from(other),
    })?;
    if ds.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: dataset is empty",
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| io_err(path, e))
}

fn check_dims(what: &str, p: usize, ds: &Dataset, dir: &Path) -> CmdResult {
    if ds.p() != p {
        return Err(Failure::Usage(format!(
            "{what} is for p = {p} but {} has p = {}",
            dir.display(),
            ds.p()
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| io_err(path, e))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    let mut out = create(path)?;
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| io_err(path, e))
}

fn truths(ds: &Dataset) -> Vec<SymMatrix> {
    ds.entries.iter().map(|e| e.theta_true.clone()).collect()
}

fn print_aggregate(report: &EvalReport) {
    let a = &report.aggregate;
    println!(
        "{}: nmse {:.6} f1 {:.4} min_eig {:.3e} cond {:.3e} density {:.4} all_spd {}",
        report.method, a.nmse, a.f1, a.min_eig, a.cond, a.density, a.all_spd
    );
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = GenConfig {
        diag_boost: a.diag_boost,
        ..GenConfig::new(a.p, a.n, a.num, a.alpha, a.seed)
    };
    let ds = build_dataset(&cfg, a.keep_samples)?;
    datagen::save(&ds, &a.out).map_err(|e| io_err(&a.out, e))?;
    let density = ds
        .entries
        .iter()
        .map(|e| metrics::density(&e.theta_true, metrics::ZERO_TOL))
        .sum::<f64>()
        / ds.len() as f64;
    println!(
        "p={} n={} N={} alpha={} mean_density={density:.4}",
        cfg.p, cfg.n, cfg.num, cfg.alpha
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let train_ds = load_dataset(&a.train)?;
    let test_ds = load_dataset(&a.test)?;
    let p = train_ds.p();
    check_dims("training set", p, &test_ds, &a.test)?;
    let layer = LayerConfig {
        zeta: a.layer.zeta,
        stabilize: !a.layer.no_stabilizer,
        num_layers: a.layer.layers,
        grad_mode: match a.layer.grad_mode {
            GradModeArg::Detached => GradMode::Detached,
            GradModeArg::Full => GradMode::Full,
        },
        ..LayerConfig::default()
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let init = init_params(a.model.into(), p, a.seed)?;
    let outcome = train_with(init, &train_ds, &test_ds, &cfg, &layer, |row, _| {
        eprintln!(
            "epoch {:>4}  train_mse {:.6}  test_nmse {:.6}  test_f1 {:.4}",
            row.epoch, row.train_mse, row.test_nmse, row.test_f1
        );
    })?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let ck_path = a.out.join("checkpoint.json");
    Checkpoint::new(outcome.params, layer, a.seed)
        .save(&ck_path)
        .map_err(|e| io_err(&ck_path, e))?;
    let csv_path = a.out.join("metrics.csv");
    let mut out = create(&csv_path)?;
    write_metrics_csv(&outcome.rows, &mut out).map_err(|e| io_err(&csv_path, e))?;
    out.flush().map_err(|e| io_err(&csv_path, e))?;
    println!("wrote {} and {}", ck_path.display(), csv_path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_dims("checkpoint", ck.params.p, &ds, &a.data)?;
    let preds = predict_all(&ck.params, &ds, &ck.layer)?;
    let report = evaluate(&ck.params.variant.to_string(), &preds, &truths(&ds))?;
    write_json(&a.out, &report)?;
    print_aggregate(&report);
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> CmdResult {
    let ds = load_dataset(&a.data)?;
    let needs_samples = a.method != MethodArg::Glasso;
    if needs_samples && !ds.has_samples() {
        return Err(Failure::Usage(format!(
            "{} has no raw samples; regenerate it with `gen-data --keep-samples` to use this method",
            a.data.display()
        )));
    }
    let base = GlassoConfig {
        tol: a.tol,
        max_sweeps: a.max_sweeps,
        ..GlassoConfig::with_lambda(a.lambda)
    };
    base.validate()?;
    let estimate = |k: usize| -> spodnet::Result<SymMatrix> {
        let e = &ds.entries[k];
        let samples = || e.samples.as_ref().expect("checked above");
        match a.method {
            MethodArg::Glasso => Ok(glasso_solve(&e.s, &base)?.theta),
            MethodArg::GlassoCv => {
                let grid = a.grid.clone().unwrap_or_else(|| default_lambda_grid(&e.s));
                Ok(glasso_cv(samples(), &grid, a.folds, &base)?.theta)
            }
            MethodArg::Lw => Ok(ledoit_wolf(samples())?.precision),
            MethodArg::Oas => Ok(oas(samples())?.precision),
        }
    };
    let preds: Vec<SymMatrix> = {
        use rayon::prelude::*;
        (0..ds.len())
            .into_par_iter()
            .map(estimate)
            .collect::<spodnet::Result<_>>()?
    };
    let name = match a.method {
        MethodArg::Glasso => "glasso",
        MethodArg::GlassoCv => "glasso-cv",
        MethodArg::Lw => "lw",
        MethodArg::Oas => "oas",
    };
    let report = evaluate(name, &preds, &truths(&ds))?;
    write_json(&a.out, &report)?;
    print_aggregate(&report);
    Ok(())
}

#[derive(Serialize)]
struct AuditReport {
    samples: usize,
    updates: usize,
    violations: usize,
    pass: bool,
    /// Largest `|eig shift| − ‖Δ‖₂` seen; non-positive when every update is within bound.
    max_violation: f64,
    max_shift: f64,
}

pub fn diagnose(a: DiagnoseArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_dims("checkpoint", ck.params.p, &ds, &a.data)?;
    let mut layer = ck.layer.clone();
    if let Some(z) = a.zeta {
        layer.zeta = z;
    }
    if a.no_stabilizer {
        layer.stabilize = false;
    }
    let count = a.limit.unwrap_or(ds.len()).min(ds.len());
    let diagnoses = {
        use rayon::prelude::*;
        (0..count)
            .into_par_iter()
            .map(|k| metrics::diagnose(&ck.params, &ds.entries[k].s, &layer))
            .collect::<spodnet::Result<Vec<_>>>()?
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let trace_path = a.out.join("trace.csv");
    let mut out = create(&trace_path)?;
    let p = ck.params.p;
    let mut report = AuditReport {
        samples: count,
        updates: 0,
        violations: 0,
        pass: true,
        max_violation: f64::NEG_INFINITY,
        max_shift: 0.0,
    };
    let mut write = || -> std::io::Result<()> {
        writeln!(
            out,
            "sample_id,update,layer,column,min_eig,max_diag,cond,bauer_fike_holds"
        )?;
        for (k, d) in diagnoses.iter().enumerate() {
            for ((row, column), audit) in d.trace.iter().zip(&d.columns).zip(&d.audits) {
                writeln!(
                    out,
                    "{k},{},{},{column},{:e},{:e},{:e},{}",
                    row.update,
                    row.update / p,
                    row.min_eig,
                    row.max_diag,
                    row.cond,
                    audit.holds
                )?;
                report.updates += 1;
                report.violations += usize::from(!audit.holds);
                report.max_violation = report.max_violation.max(audit.max_violation);
                report.max_shift = report.max_shift.max(audit.max_shift);
            }
        }
        out.flush()
    };
    write().map_err(|e| io_err(&trace_path, e))?;
    report.pass = report.violations == 0;
    write_json(&a.out.join("audit.json"), &report)?;
    println!(
        "{} updates over {count} samples, {} Bauer-Fike violations",
        report.updates, report.violations
    );
    Ok(())
}
