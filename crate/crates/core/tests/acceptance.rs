//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test -p spodnet --test acceptance`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use spodnet::baselines::{
    block_gista_step, default_lambda_grid, glasso_cv, glasso_solve, kkt_residual, ledoit_wolf, oas,
    GlassoConfig,
};
use spodnet::datagen::{build_dataset, Dataset, GenConfig};
use spodnet::layer::{
    assemble_theta_plus, rank2_delta_eigs, spodnet_forward_with, stabilize_preactivation,
    theta11_inverse, ForwardHooks, GradMode, LayerConfig, UpdateEvent,
};
use spodnet::linalg::{
    eig_diagnostics, extract_block, is_positive_definite, matmul, spd_inverse,
    symmetric_eigenvalues,
};
use spodnet::metrics::{diagnose, diagnose_partial, evaluate, exact_zero_fraction};
use spodnet::models::{
    column_update, init_params, ubg_with_constants, ColumnContext, ModelParams, Variant,
};
use spodnet::rng::{rng_from_seed, Rng64};
use spodnet::train::{predict_all, train, train_monitored, train_with, MetricsRow, TrainConfig};
use spodnet::SymMatrix;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn random_spd(rng: &mut Rng64, p: usize, shift: f64) -> SymMatrix {
    let g: Vec<f64> = (0..p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    SymMatrix::from_fn(p, |r, c| {
        (0..p).map(|k| g[r * p + k] * g[c * p + k]).sum::<f64>()
    })
    .unwrap()
    .shifted(shift)
}

fn log_uniform(rng: &mut Rng64, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Maximum absolute row sum of `a·b − I`.
fn identity_residual_inf(a: &[f64], b: &[f64], p: usize) -> f64 {
    let prod = matmul(a, b, p, p, p);
    (0..p)
        .map(|r| {
            (0..p)
                .map(|c| (prod[r * p + c] - if r == c { 1.0 } else { 0.0 }).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn truths(ds: &Dataset) -> Vec<SymMatrix> {
    ds.entries.iter().map(|e| e.theta_true.clone()).collect()
}

fn strongly_sparse(n: usize, num: usize, seed: u64, keep: bool) -> Result<Dataset, String> {
    build_dataset(&GenConfig::new(20, n, num, 0.95, seed), keep).map_err(err)
}

fn spd_preservation() -> Outcome {
    let mut rng = rng_from_seed(1);
    let dims = [3, 8, 20, 50];
    let mut failures = 0;
    let mut cache: Vec<(SymMatrix, SymMatrix)> = Vec::new();
    for trial in 0..10_000 {
        let p = dims[trial % 4];
        // a fresh Θ every few trials keeps the p = 50 inverses affordable
        if trial % 40 < 4 {
            let shift = log_uniform(&mut rng, 1e-2, 1.0);
            let theta = random_spd(&mut rng, p, shift);
            let w = spd_inverse(&theta).map_err(err)?;
            if cache.len() <= trial % 4 {
                cache.push((theta, w));
            } else {
                cache[trial % 4] = (theta, w);
            }
        }
        let (theta, w) = &cache[trial % 4];
        let i = rng.random_range(0..p);
        let a = theta11_inverse(&extract_block(w, i).map_err(err)?).map_err(err)?;
        let norm = log_uniform(&mut rng, 1e-3, 1e3);
        let dir: Vec<f64> = (0..p - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = dir.iter().map(|x| x * norm / len).collect();
        let v = log_uniform(&mut rng, 1e-6, 10.0);
        let view = extract_block(theta, i).map_err(err)?;
        match assemble_theta_plus(&view, &u, v, &a) {
            Ok(next) if is_positive_definite(&next) => {}
            _ => failures += 1,
        }
    }
    Ok((
        failures == 0,
        format!("{failures} Cholesky failures in 10000 updates"),
    ))
}

fn inverse_maintenance() -> Outcome {
    let p = 50;
    let data = build_dataset(&GenConfig::new(p, 200, 100, 0.9, 7), false).map_err(err)?;
    let layer = LayerConfig::default();
    let mut failures = 0;
    let mut worst_ratio = 0.0_f64;
    for (k, entry) in data.entries.iter().enumerate() {
        let params = init_params(Variant::ALL[k % 3], p, k as u64).map_err(err)?;
        let tape = spodnet::autodiff::Tape::new();
        let model = params.bind(&tape, false);
        let mut obs = |ev: &UpdateEvent<'_>| {
            let theta = SymMatrix::symmetrized(p, ev.theta_after.to_vec()).unwrap();
            let cond = eig_diagnostics(&theta).cond;
            let res = identity_residual_inf(ev.theta_after, ev.w_after, p);
            worst_ratio = worst_ratio.max(res / cond);
            // a NaN residual counts as a failure
            if res.is_nan() || res > 1e-8 * cond {
                failures += 1;
            }
        };
        let mut hooks = ForwardHooks {
            observer: Some(&mut obs),
            ..ForwardHooks::default()
        };
        spodnet_forward_with(&tape, &entry.s, &model, &layer, &mut hooks).map_err(err)?;
    }
    Ok((
        failures == 0,
        format!("{failures} violations over 100 passes x {p} updates, worst residual/cond = {worst_ratio:.1e}"),
    ))
}

fn block_inverse_formula() -> Outcome {
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0_f64;
    for trial in 0..1000 {
        let p = [5, 20, 50][trial % 3];
        let theta = random_spd(&mut rng, p, 0.1);
        let w = spd_inverse(&theta).map_err(err)?;
        let i = rng.random_range(0..p);
        let a = theta11_inverse(&extract_block(&w, i).map_err(err)?).map_err(err)?;
        let view = extract_block(&theta, i).map_err(err)?;
        let dense =
            spd_inverse(&SymMatrix::new(p - 1, view.block11.clone()).map_err(err)?).map_err(err)?;
        let num: f64 = a
            .iter()
            .zip(dense.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(num / dense.frobenius());
    }
    Ok((
        worst <= 1e-9,
        format!("worst relative Frobenius error {worst:.2e}"),
    ))
}

fn gradient_correctness() -> Outcome {
    use spodnet::train::loss_gradient_check;
    let entry = &build_dataset(&GenConfig::new(6, 20, 1, 0.9, 3), false)
        .map_err(err)?
        .entries[0];
    let mut worst = [0.0_f64; 2];
    for (m, mode) in [GradMode::Detached, GradMode::Full].into_iter().enumerate() {
        let layer = LayerConfig {
            grad_mode: mode,
            ..LayerConfig::default()
        };
        for variant in Variant::ALL {
            for seed in 0..4 {
                // evaluated away from the kinks that zero biases sit on at initialisation
                let mut params = init_params(variant, 6, seed).map_err(err)?;
                let mut rng = rng_from_seed(seed + 100);
                for t in params.tensors_mut() {
                    t.data_mut()
                        .iter_mut()
                        .for_each(|x| *x += rng.random_range(-0.05..0.05));
                }
                let e = loss_gradient_check(&params, &entry.s, &entry.theta_true, &layer, 1e-6)
                    .map_err(err)?;
                worst[m] = worst[m].max(e);
            }
        }
    }
    Ok((
        worst.iter().all(|&e| e <= 1e-5),
        format!(
            "max relative error detached {:.1e}, full {:.1e}",
            worst[0], worst[1]
        ),
    ))
}

struct Trained {
    params: ModelParams,
    rows: Vec<MetricsRow>,
    test: Dataset,
    bauer_fike_updates: usize,
    bauer_fike_violations: usize,
    seconds: f64,
}

static STRONG_P20: OnceLock<Result<Trained, String>> = OnceLock::new();

/// UBG at p = 20, n = 100, strongly sparse, trained once and shared.
fn strong_p20() -> Result<&'static Trained, String> {
    STRONG_P20
        .get_or_init(|| {
            let start = Instant::now();
            let train_ds = strongly_sparse(100, 1000, 0, false)?;
            let test = strongly_sparse(100, 100, 1, true)?;
            let layer = LayerConfig::default();
            let cfg = TrainConfig {
                lr: 1e-2,
                batch_size: 10,
                epochs: 100,
                seed: 0,
                ..TrainConfig::default()
            };
            let init = init_params(Variant::Ubg, 20, 0).map_err(err)?;
            let (mut updates, mut violations) = (0, 0);
            let mut audit_err = None;
            let out = train_with(init, &train_ds, &test, &cfg, &layer, |row, params| {
                if row.epoch % 10 != 0 {
                    return;
                }
                for e in &test.entries {
                    match diagnose(params, &e.s, &layer) {
                        Ok(d) => {
                            updates += d.audits.len();
                            violations += d.violations();
                        }
                        Err(e) => {
                            audit_err.get_or_insert(e.to_string());
                        }
                    }
                }
            })
            .map_err(err)?;
            if let Some(e) = audit_err {
                return Err(e);
            }
            Ok(Trained {
                params: out.params,
                rows: out.rows,
                test,
                bauer_fike_updates: updates,
                bauer_fike_violations: violations,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn rank2_and_bauer_fike() -> Outcome {
    let mut rng = rng_from_seed(5);
    let mut worst = 0.0_f64;
    for trial in 0..1000 {
        let p = [4, 10, 30][trial % 3];
        let i = rng.random_range(0..p);
        let scale = log_uniform(&mut rng, 1e-3, 1e2);
        let col: Vec<f64> = (0..p - 1)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let d = scale * rng.random_range(-2.0..2.0);
        let mut full = vec![0.0; p * p];
        for (k, r) in (0..p).filter(|&r| r != i).enumerate() {
            full[r * p + i] = col[k];
            full[i * p + r] = col[k];
        }
        full[i * p + i] = d;
        let eigs = symmetric_eigenvalues(&SymMatrix::new(p, full).map_err(err)?);
        let lo = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (plus, minus) = rank2_delta_eigs(&col, d);
        let tol_scale = plus.abs().max(minus.abs()).max(1.0);
        worst = worst.max(((plus - hi).abs().max((minus - lo).abs())) / tol_scale);
    }
    let trained = strong_p20()?;
    let ok = worst <= 1e-10 && trained.bauer_fike_violations == 0 && trained.bauer_fike_updates > 0;
    Ok((
        ok,
        format!(
            "rank-2 worst scaled error {worst:.1e}; Bauer-Fike {} violations in {} audited updates",
            trained.bauer_fike_violations, trained.bauer_fike_updates
        ),
    ))
}

fn stabilizer_behaviour() -> Outcome {
    let mut rng = rng_from_seed(6);
    let mut worst = 0.0_f64;
    for trial in 0..1000 {
        let q = [3, 10, 29][trial % 3];
        let a = random_spd(&mut rng, q, 0.1);
        let z: Vec<f64> = (0..q)
            .map(|_| log_uniform(&mut rng, 1e-3, 1e3) * rng.random_range(-1.0..1.0))
            .collect();
        let zeta = log_uniform(&mut rng, 0.1, 10.0);
        let scaled = stabilize_preactivation(&z, a.data(), zeta);
        let quad: f64 = a
            .matvec(&scaled)
            .iter()
            .zip(&scaled)
            .map(|(x, y)| x * y)
            .sum();
        worst = worst.max((quad - zeta).abs() / zeta.max(1.0));
    }

    let p = 30;
    let train_ds = build_dataset(&GenConfig::new(p, 100, 200, 0.95, 1), false).map_err(err)?;
    let test = build_dataset(&GenConfig::new(p, 100, 100, 0.95, 2), false).map_err(err)?;
    let cfg = |seed| TrainConfig {
        lr: 1e-2,
        epochs: 30,
        seed,
        ..TrainConfig::default()
    };

    let stab = LayerConfig::default();
    let rows = train(
        init_params(Variant::Ubg, p, 0).map_err(err)?,
        &train_ds,
        &test,
        &cfg(0),
        &stab,
    )
    .map_err(err)?
    .rows;
    let conds: Vec<f64> = rows.iter().map(|r| r.max_cond).collect();
    let ratio = conds.iter().copied().fold(0.0, f64::max)
        / conds.iter().copied().fold(f64::INFINITY, f64::min);

    // Without rescaling, trace the smallest eigenvalue after every update on a
    // few test inputs at the end of each epoch. A run that breaks down mid-epoch
    // is traced on the failing sample with the parameters it failed with, up
    // to the update where the numbers gave out.
    let bare = LayerConfig {
        stabilize: false,
        ..LayerConfig::default()
    };
    let lowest_on = |params: &ModelParams, s: &SymMatrix| -> f64 {
        match diagnose_partial(params, s, &bare) {
            Ok((d, _)) => d
                .trace
                .iter()
                .map(|r| r.min_eig)
                .fold(f64::INFINITY, f64::min),
            Err(_) => f64::INFINITY,
        }
    };
    let probes: Vec<&SymMatrix> = test.entries.iter().take(5).map(|e| &e.s).collect();
    let mut collapsed = Vec::new();
    let mut notes = Vec::new();
    for seed in 0..5 {
        let mut lowest = f64::INFINITY;
        let mut at_failure = None;
        let result = train_monitored(
            init_params(Variant::Ubg, p, seed).map_err(err)?,
            &train_ds,
            &test,
            &cfg(seed),
            &bare,
            |_, params| {
                for s in &probes {
                    lowest = lowest.min(lowest_on(params, s));
                }
            },
            |f| at_failure = Some(lowest_on(f.params, &train_ds.entries[f.sample].s)),
        );
        if let Some(m) = at_failure {
            lowest = lowest.min(m);
        }
        notes.push(match &result {
            Ok(out) => format!(
                "seed {seed}: lowest {lowest:.1e}, final NMSE {:.3}",
                out.rows.last().unwrap().test_nmse
            ),
            Err(e) => format!("seed {seed}: lowest {lowest:.1e}, aborted: {e}"),
        });
        if lowest < 1e-6 {
            collapsed.push(seed);
        }
    }
    let ok = worst <= 1e-10 && ratio <= 1e3 && !collapsed.is_empty();
    Ok((
        ok,
        format!(
            "|x'Ax - zeta| worst {worst:.1e}; stabilized cond ratio {ratio:.1} (range {:.1}..{:.1}); \
             unstabilized min-eig below 1e-6 on seeds {collapsed:?} [{}]",
            conds.iter().copied().fold(f64::INFINITY, f64::min),
            conds.iter().copied().fold(0.0, f64::max),
            notes.join(", ")
        ),
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = rng_from_seed(7);
    let mut step_err = 0.0_f64;
    for trial in 0..500 {
        let p = [3, 8, 20][trial % 3];
        let theta = random_spd(&mut rng, p, 0.5);
        let w = spd_inverse(&theta).map_err(err)?;
        let s = random_spd(&mut rng, p, 0.5);
        let i = rng.random_range(0..p);
        let (gamma, lambda) = (rng.random_range(0.05..2.0), rng.random_range(0.0..0.5));
        let (tv, wv, sv) = (
            extract_block(&theta, i).map_err(err)?,
            extract_block(&w, i).map_err(err)?,
            extract_block(&s, i).map_err(err)?,
        );
        let expected = block_gista_step(&tv, &sv.col, &wv.col, gamma, lambda).map_err(err)?;
        let ctx = ColumnContext {
            theta12: tv.col.clone(),
            theta22: tv.diag,
            s12: sv.col.clone(),
            s22: sv.diag,
            w12: wv.col.clone(),
            theta11_inv: theta11_inverse(&wv).map_err(err)?,
            stabilizer: None,
        };
        let got = column_update(&ubg_with_constants(p, gamma, lambda).map_err(err)?, &ctx)
            .map_err(err)?;
        for (a, b) in got.iter().zip(&expected) {
            step_err = step_err.max((a - b).abs());
        }
    }

    let mut unpenalized = 0.0_f64;
    let mut kkt = 0.0_f64;
    for p in [5, 10] {
        let ds = build_dataset(&GenConfig::new(p, 200, 3, 0.9, 8), false).map_err(err)?;
        for e in &ds.entries {
            let exact = spd_inverse(&e.s).map_err(err)?;
            let fit = glasso_solve(&e.s, &GlassoConfig::with_lambda(0.0)).map_err(err)?;
            let diff = fit.theta.combine(1.0, &exact, -1.0).map_err(err)?;
            unpenalized = unpenalized.max(diff.frobenius() / exact.frobenius());
            for lambda in [0.05, 0.1, 0.5] {
                let fit = glasso_solve(&e.s, &GlassoConfig::with_lambda(lambda)).map_err(err)?;
                kkt = kkt.max(kkt_residual(&fit.theta, &e.s, lambda).map_err(err)?);
            }
        }
    }
    Ok((
        step_err <= 1e-12 && unpenalized <= 1e-4 && kkt <= 1e-6,
        format!("step mismatch {step_err:.1e}; unpenalized relative error {unpenalized:.1e}; worst KKT residual {kkt:.1e}"),
    ))
}

fn sparsity_and_spd() -> Outcome {
    let t = strong_p20()?;
    let preds = predict_all(&t.params, &t.test, &LayerConfig::default()).map_err(err)?;
    let mut bad = 0;
    let mut min_zero = f64::INFINITY;
    for m in &preds {
        let z = exact_zero_fraction(m);
        min_zero = min_zero.min(z);
        if !(z >= 0.01 && is_positive_definite(m)) {
            bad += 1;
        }
    }
    Ok((
        bad == 0,
        format!(
            "{bad} of {} outputs fail; smallest exact-zero fraction {min_zero:.3}",
            preds.len()
        ),
    ))
}

fn shrinkage_reports(ds: &Dataset) -> Result<(f64, f64), String> {
    let (mut lw, mut oa) = (Vec::new(), Vec::new());
    for e in &ds.entries {
        let x = e.samples.as_ref().ok_or("test set lacks samples")?;
        lw.push(ledoit_wolf(x).map_err(err)?.precision);
        oa.push(oas(x).map_err(err)?.precision);
    }
    let t = truths(ds);
    Ok((
        evaluate("lw", &lw, &t).map_err(err)?.aggregate.nmse,
        evaluate("oas", &oa, &t).map_err(err)?.aggregate.nmse,
    ))
}

fn strongly_sparse_ordering() -> Outcome {
    let t = strong_p20()?;
    let last = t.rows.last().ok_or("no epochs")?;
    let (lw, oa) = shrinkage_reports(&t.test)?;
    let base = GlassoConfig {
        tol: 1e-8,
        ..GlassoConfig::default()
    };
    let cv: Vec<SymMatrix> = t
        .test
        .entries
        .iter()
        .map(|e| {
            let x = e
                .samples
                .as_ref()
                .ok_or("test set lacks samples".to_string())?;
            Ok(glasso_cv(x, &default_lambda_grid(&e.s), 5, &base)
                .map_err(err)?
                .theta)
        })
        .collect::<Result<_, String>>()?;
    let cv_f1 = evaluate("glasso-cv", &cv, &truths(&t.test))
        .map_err(err)?
        .aggregate
        .f1;
    let ok = last.test_nmse < lw && last.test_nmse < oa && last.test_f1 >= cv_f1 - 0.05;
    Ok((
        ok,
        format!(
            "UBG NMSE {:.4} (LW {lw:.4}, OAS {oa:.4}); UBG F1 {:.3} vs GLasso-CV F1 {cv_f1:.3}; training {:.0}s",
            last.test_nmse, last.test_f1, t.seconds
        ),
    ))
}

/// UBG with gradients through the maintained inverse, on p = 20 strongly sparse data.
fn train_full_gradient(n: usize) -> Result<MetricsRow, String> {
    let train_ds = strongly_sparse(n, 1000, 10, false)?;
    let test = strongly_sparse(n, 100, 11, false)?;
    let layer = LayerConfig {
        grad_mode: GradMode::Full,
        ..LayerConfig::default()
    };
    let cfg = TrainConfig {
        lr: 1e-2,
        epochs: 100,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train(
        init_params(Variant::Ubg, 20, 0).map_err(err)?,
        &train_ds,
        &test,
        &cfg,
        &layer,
    )
    .map_err(err)?;
    out.rows.last().cloned().ok_or_else(|| "no epochs".into())
}

fn support_recovery_n500() -> Outcome {
    let row = train_full_gradient(500)?;
    Ok((
        row.test_f1 >= 0.70,
        format!("UBG F1 {:.3}, NMSE {:.4}", row.test_f1, row.test_nmse),
    ))
}

fn weakly_sparse_shrinkage() -> Outcome {
    let ds = build_dataset(&GenConfig::new(100, 100, 100, 0.7, 12), true).map_err(err)?;
    let (lw, oa) = shrinkage_reports(&ds)?;
    Ok((
        lw >= 0.75 && oa >= 0.75,
        format!("LW NMSE {lw:.3}, OAS NMSE {oa:.3}"),
    ))
}

fn large_sample_floor() -> Outcome {
    let row = train_full_gradient(5000)?;
    Ok((
        row.test_nmse <= 0.05,
        format!("UBG NMSE {:.4}, F1 {:.3}", row.test_nmse, row.test_f1),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("SPD preservation of assembled updates", spd_preservation),
        ("inverse maintenance at p=50", inverse_maintenance),
        (
            "block inverse formula vs dense inverse",
            block_inverse_formula,
        ),
        (
            "loss gradients vs central differences",
            gradient_correctness,
        ),
        (
            "rank-2 eigenvalues and Bauer-Fike audit",
            rank2_and_bauer_fike,
        ),
        (
            "preactivation rescaling and conditioning",
            stabilizer_behaviour,
        ),
        (
            "proximal-step equivalence and GLasso oracle",
            oracle_equivalence,
        ),
        ("exact zeros and SPD on every output", sparsity_and_spd),
        (
            "p=20 n=100 ordering against baselines",
            strongly_sparse_ordering,
        ),
        ("p=20 n=500 support recovery", support_recovery_n500),
        (
            "p=100 weakly sparse shrinkage NMSE",
            weakly_sparse_shrinkage,
        ),
        ("p=20 n=5000 NMSE floor", large_sample_floor),
    ];
    // ACCEPTANCE_ONLY=5,8,9 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
