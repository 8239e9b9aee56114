//! Browser demo. One synthetic problem lives in a [`Demo`]; the page asks it
//! for a graphical-lasso fit at a chosen penalty, for the output of a
//! SpodNet layer with its per-update spectrum, and for a single hand-driven
//! column update. Results cross into JavaScript as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use spodnet::baselines::{glasso_solve, GlassoConfig};
use spodnet::datagen::{build_entry, Entry, GenConfig};
use spodnet::layer::{assemble_theta_plus, theta11_inverse, LayerConfig};
use spodnet::linalg::{eig_diagnostics, extract_block, is_positive_definite, spd_inverse};
use spodnet::metrics::{self, diagnose, f1_support, relative_sq_error, ZERO_TOL};
use spodnet::models::init_params;
use spodnet::{SymMatrix, Variant};

#[derive(Debug, Serialize)]
pub struct Estimate {
    pub theta: Vec<f64>,
    pub nmse: f64,
    pub f1: f64,
    pub density: f64,
    pub min_eig: f64,
    pub spd: bool,
}

#[derive(Debug, Serialize)]
pub struct GlassoFit {
    #[serde(flatten)]
    pub estimate: Estimate,
    pub sweeps: usize,
}

#[derive(Debug, Serialize)]
pub struct TracePoint {
    pub update: usize,
    pub min_eig: f64,
    pub cond: f64,
}

#[derive(Debug, Serialize)]
pub struct LayerRun {
    #[serde(flatten)]
    pub estimate: Estimate,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Serialize)]
pub struct ColumnEdit {
    pub theta: Vec<f64>,
    pub min_eig_before: f64,
    pub min_eig_after: f64,
    pub spd: bool,
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

/// One generated problem: a sparse precision matrix and its sample covariance.
#[wasm_bindgen]
pub struct Demo {
    entry: Entry,
}

impl Demo {
    pub fn generate(p: usize, n: usize, alpha: f64, seed: u64) -> spodnet::Result<Demo> {
        let cfg = GenConfig::new(p, n, 1, alpha, seed);
        cfg.validate()?;
        Ok(Demo {
            entry: build_entry(&cfg, 0, false)?,
        })
    }

    fn score(&self, theta: SymMatrix) -> spodnet::Result<Estimate> {
        let truth = &self.entry.theta_true;
        Ok(Estimate {
            nmse: relative_sq_error(&theta, truth)?,
            f1: f1_support(&theta, truth, ZERO_TOL)?,
            density: metrics::density(&theta, ZERO_TOL),
            min_eig: eig_diagnostics(&theta).min,
            spd: is_positive_definite(&theta),
            theta: theta.into_data(),
        })
    }

    pub fn glasso_fit(&self, lambda: f64) -> spodnet::Result<GlassoFit> {
        let cfg = GlassoConfig {
            tol: 1e-8,
            ..GlassoConfig::with_lambda(lambda)
        };
        let fit = glasso_solve(&self.entry.s, &cfg)?;
        Ok(GlassoFit {
            sweeps: fit.sweeps,
            estimate: self.score(fit.theta)?,
        })
    }

    /// An untrained model of `variant`, run for one layer from `(S + I)⁻¹`.
    pub fn layer_run(
        &self,
        variant: Variant,
        seed: u64,
        zeta: f64,
        stabilize: bool,
    ) -> spodnet::Result<LayerRun> {
        let p = self.entry.s.dim();
        let params = init_params(variant, p, seed)?;
        let cfg = LayerConfig {
            zeta,
            stabilize,
            ..LayerConfig::default()
        };
        cfg.validate(p)?;
        let diag = diagnose(&params, &self.entry.s, &cfg)?;
        let trace = diag
            .trace
            .iter()
            .map(|r| TracePoint {
                update: r.update,
                min_eig: r.min_eig,
                cond: r.cond,
            })
            .collect();
        Ok(LayerRun {
            estimate: self.score(params.predict(&self.entry.s, &cfg)?)?,
            trace,
        })
    }

    /// Replaces column `i` of the truth by `scale · (its own column)` and the
    /// pivot by `v + uᵀ[Θ₁₁]⁻¹u`; the result stays positive definite for
    /// any scale and any `v > 0`.
    pub fn column_edit(&self, i: usize, scale: f64, v: f64) -> spodnet::Result<ColumnEdit> {
        let theta = &self.entry.theta_true;
        let p = theta.dim();
        if i >= p {
            return Err(spodnet::Error::Dimension(format!(
                "column {i} of a {p}x{p} matrix"
            )));
        }
        let w = spd_inverse(theta)?;
        let a = theta11_inverse(&extract_block(&w, i)?)?;
        let view = extract_block(theta, i)?;
        let u: Vec<f64> = view.col.iter().map(|x| scale * x).collect();
        let next = assemble_theta_plus(&view, &u, v, &a)?;
        Ok(ColumnEdit {
            min_eig_before: eig_diagnostics(theta).min,
            min_eig_after: eig_diagnostics(&next).min,
            spd: is_positive_definite(&next),
            theta: next.into_data(),
        })
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(p: usize, n: usize, alpha: f64, seed: u32) -> Result<Demo, JsError> {
        Demo::generate(p, n, alpha, seed.into()).map_err(js)
    }

    pub fn dim(&self) -> usize {
        self.entry.s.dim()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.entry.theta_true.data().to_vec()
    }

    pub fn covariance(&self) -> Vec<f64> {
        self.entry.s.data().to_vec()
    }

    /// Graphical lasso at `lambda`, as JSON.
    pub fn glasso(&self, lambda: f64) -> Result<String, JsError> {
        to_json(&self.glasso_fit(lambda).map_err(js)?)
    }

    /// One layer of an untrained `variant` ("UBG", "PNP" or "E2E"), as JSON.
    pub fn layer(
        &self,
        variant: &str,
        seed: u32,
        zeta: f64,
        stabilize: bool,
    ) -> Result<String, JsError> {
        let variant: Variant = variant.parse().map_err(js)?;
        to_json(
            &self
                .layer_run(variant, seed.into(), zeta, stabilize)
                .map_err(js)?,
        )
    }

    /// A single column update of the truth, as JSON.
    pub fn edit(&self, column: usize, scale: f64, v: f64) -> Result<String, JsError> {
        to_json(&self.column_edit(column, scale, v).map_err(js)?)
    }
}
