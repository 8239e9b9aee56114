//! Learned column-update functions and the positive diagonal network.
//!
//! Three column maps are provided:
//!
//! - **UBG** unrolls one proximal-gradient step of the graphical lasso with a
//!   learned step size and learned per-entry thresholds.
//! - **PNP** runs the same gradient step through a learned denoiser before
//!   thresholding.
//! - **E2E** maps the current column directly through an MLP.
//!
//! All three end in an elementwise soft-threshold so they can emit exact zeros.
//! The diagonal network maps `(θ₂₂, s₂₂, uᵀ[Θ₁₁]⁻¹u)` to a strictly positive
//! Schur complement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::layer::{self, stabilize_preactivation_var, ColumnInputs, LayerConfig, UpdateFns};
use crate::{rng, Error, Result, SymMatrix};

/// Floor added to the diagonal network's output so that `v > 0` always.
pub const EPS_V: f64 = 1e-8;

/// Multiplier on the threshold network for PNP and E2E.
pub const LEARNED_LAMBDA_SCALE: f64 = 0.1;

const LAMBDA_HIDDEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "UBG")]
    Ubg,
    #[serde(rename = "PNP")]
    Pnp,
    #[serde(rename = "E2E")]
    E2e,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ubg, Variant::Pnp, Variant::E2e];

    pub fn lambda_scale(self) -> f64 {
        match self {
            Variant::Ubg => 1.0,
            Variant::Pnp | Variant::E2e => LEARNED_LAMBDA_SCALE,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ubg => "UBG",
            Variant::Pnp => "PNP",
            Variant::E2e => "E2E",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ubg" => Ok(Variant::Ubg),
            "pnp" => Ok(Variant::Pnp),
            "e2e" => Ok(Variant::E2e),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected ubg, pnp or e2e)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Abs,
}

/// Layer widths of a fully-connected network with relu hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        Ok(Self { widths, output })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// One dense layer: weight `[out, in]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform `(−1/√fan_in, 1/√fan_in)` weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut rng::Rng64) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![fan_out, fan_in], data)
                        .unwrap()
                        .with_grad(),
                    bias: Tensor::zeros(vec![fan_out]).with_grad(),
                }
            })
            .collect();
        Self { spec, layers }
    }

    /// Evaluates the network on plain values.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let input = tape.constant(vec![x.len()], x.to_vec())?;
        Ok(bound.forward(input)?.value())
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.tensor(t)
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec())
                    .unwrap()
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|d| (leaf(&d.weight), leaf(&d.bias)))
                .collect(),
            output: self.spec.output,
        }
    }
}

#[derive(Debug, Clone)]
struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    output: OutputActivation,
}

impl<'t> BoundMlp<'t> {
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = w.matmul(h)?.add(*b)?;
            h = if k < last {
                h.relu()
            } else {
                match self.output {
                    OutputActivation::Identity => h,
                    OutputActivation::Abs => h.abs(),
                }
            };
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// All learned weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub p: usize,
    /// Step-size network; unused by E2E.
    pub gamma_net: Option<Mlp>,
    pub lambda_net: Mlp,
    pub psi_net: Option<Mlp>,
    pub phi_net: Option<Mlp>,
    pub g_net: Mlp,
    pub lambda_scale: f64,
}

/// Network shapes for `variant` at dimension `p`, in parameter order.
pub fn architecture(variant: Variant, p: usize) -> Vec<(&'static str, MlpSpec)> {
    use OutputActivation::*;
    let q = p - 1;
    let spec = |w: Vec<usize>, o| MlpSpec::new(w, o).expect("static widths are valid");
    let mut nets = Vec::new();
    if variant != Variant::E2e {
        nets.push(("gamma_net", spec(vec![q, p / 2, 1], Abs)));
    }
    nets.push(("lambda_net", spec(vec![q, LAMBDA_HIDDEN, q], Abs)));
    match variant {
        Variant::Ubg => {}
        Variant::Pnp => nets.push(("psi_net", spec(vec![q, 2 * p, q], Identity))),
        Variant::E2e => nets.push(("phi_net", spec(vec![q, 10 * p, q], Identity))),
    }
    nets.push(("g_net", spec(vec![3, 3, 3, 1], Abs)));
    nets
}

/// Seeded initialisation: weights uniform in `±1/√fan_in` (the diagonal
/// network's hidden weights are folded to be non-negative), biases zero.
/// The same `(variant, p, seed)` always gives the same bytes.
pub fn init_params(variant: Variant, p: usize, seed: u64) -> Result<ModelParams> {
    if p < 2 {
        return Err(Error::Dimension(format!(
            "dimension must be at least 2, got {p}"
        )));
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut params = ModelParams {
        variant,
        p,
        gamma_net: None,
        lambda_net: Mlp {
            spec: MlpSpec::new(vec![1, 1], OutputActivation::Abs)?,
            layers: vec![],
        },
        psi_net: None,
        phi_net: None,
        g_net: Mlp {
            spec: MlpSpec::new(vec![1, 1], OutputActivation::Abs)?,
            layers: vec![],
        },
        lambda_scale: variant.lambda_scale(),
    };
    for (name, spec) in architecture(variant, p) {
        let mut net = Mlp::init(spec, &mut rng);
        if name == "g_net" {
            // Inputs to the diagonal map are non-negative, so non-negative
            // hidden weights keep every relu alive at initialisation.
            let hidden = net.layers.len() - 1;
            for d in &mut net.layers[..hidden] {
                d.weight.data_mut().iter_mut().for_each(|w| *w = w.abs());
            }
        }
        params.set_net(name, net)?;
    }
    Ok(params)
}

/// A UBG model whose step and threshold networks ignore their input and
/// return `gamma` and `gamma * lambda`: one column update is then exactly a
/// proximal-gradient step of the graphical lasso.
pub fn ubg_with_constants(p: usize, gamma: f64, lambda: f64) -> Result<ModelParams> {
    if !(gamma > 0.0) || !(lambda >= 0.0) {
        return Err(Error::Domain(format!(
            "need gamma > 0 and lambda >= 0, got {gamma}, {lambda}"
        )));
    }
    let mut params = init_params(Variant::Ubg, p, 0)?;
    let fix = |net: &mut Mlp, out: f64| {
        for d in &mut net.layers {
            d.weight.data_mut().fill(0.0);
            d.bias.data_mut().fill(0.0);
        }
        net.layers
            .last_mut()
            .expect("networks have layers")
            .bias
            .data_mut()
            .fill(out);
    };
    fix(
        params.gamma_net.as_mut().expect("UBG has a step network"),
        gamma,
    );
    fix(&mut params.lambda_net, gamma * lambda);
    params.lambda_scale = 1.0;
    Ok(params)
}

enum Slot<'a> {
    Opt(&'a mut Option<Mlp>),
    Req(&'a mut Mlp),
}

impl Slot<'_> {
    fn set(self, net: Mlp) {
        match self {
            Slot::Opt(o) => *o = Some(net),
            Slot::Req(m) => *m = net,
        }
    }
}

impl ModelParams {
    fn slot(&mut self, name: &str) -> Option<Slot<'_>> {
        Some(match name {
            "gamma_net" => Slot::Opt(&mut self.gamma_net),
            "lambda_net" => Slot::Req(&mut self.lambda_net),
            "psi_net" => Slot::Opt(&mut self.psi_net),
            "phi_net" => Slot::Opt(&mut self.phi_net),
            "g_net" => Slot::Req(&mut self.g_net),
            _ => return None,
        })
    }

    /// Replaces the named network.
    pub fn set_net(&mut self, name: &str, net: Mlp) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Format(format!("unknown network {name:?}")))?;
        slot.set(net);
        Ok(())
    }

    /// Networks present for this variant, in parameter order.
    pub fn nets(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = Vec::new();
        if let Some(n) = &self.gamma_net {
            out.push(("gamma_net", n));
        }
        out.push(("lambda_net", &self.lambda_net));
        if let Some(n) = &self.psi_net {
            out.push(("psi_net", n));
        }
        if let Some(n) = &self.phi_net {
            out.push(("phi_net", n));
        }
        out.push(("g_net", &self.g_net));
        out
    }

    /// `(name, tensor)` for every weight and bias, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, net) in self.nets() {
            for (k, d) in net.layers.iter().enumerate() {
                out.push((format!("{name}.{k}.weight"), &d.weight));
                out.push((format!("{name}.{k}.bias"), &d.bias));
            }
        }
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut nets: Vec<&mut Mlp> = Vec::new();
        if let Some(n) = self.gamma_net.as_mut() {
            nets.push(n);
        }
        nets.push(&mut self.lambda_net);
        if let Some(n) = self.psi_net.as_mut() {
            nets.push(n);
        }
        if let Some(n) = self.phi_net.as_mut() {
            nets.push(n);
        }
        nets.push(&mut self.g_net);
        nets.into_iter()
            .flat_map(|n| {
                n.layers
                    .iter_mut()
                    .flat_map(|d| [&mut d.weight, &mut d.bias])
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Checks that every network has the shape required by the variant.
    pub fn validate(&self) -> Result<()> {
        let expected = architecture(self.variant, self.p);
        let got = self.nets();
        if expected.len() != got.len() {
            return Err(Error::Format(format!(
                "{} expects {} networks, found {}",
                self.variant,
                expected.len(),
                got.len()
            )));
        }
        for ((en, es), (gn, g)) in expected.iter().zip(&got) {
            if en != gn || *es != g.spec || g.layers.len() != es.widths.len() - 1 {
                return Err(Error::Format(format!(
                    "network {gn} does not match {en} {:?}",
                    es.widths
                )));
            }
            for (d, w) in g.layers.iter().zip(es.widths.windows(2)) {
                if d.weight.shape() != [w[1], w[0]] || d.bias.shape() != [w[1]] {
                    return Err(Error::Format(format!("layer shape mismatch in {gn}")));
                }
            }
        }
        if !self.all_finite() {
            return Err(Error::Format("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Places all parameters on `tape`; `trainable` leaves record gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        BoundModel {
            variant: self.variant,
            lambda_scale: self.lambda_scale,
            gamma: self.gamma_net.as_ref().map(|n| n.bind(tape, trainable)),
            lambda: self.lambda_net.bind(tape, trainable),
            psi: self.psi_net.as_ref().map(|n| n.bind(tape, trainable)),
            phi: self.phi_net.as_ref().map(|n| n.bind(tape, trainable)),
            g: self.g_net.bind(tape, trainable),
        }
    }

    /// Builds the model from existing leaves, ordered as in [`ModelParams::named_tensors`].
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let expected = self.named_tensors();
        if vars.len() != expected.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors expected, got {}",
                expected.len(),
                vars.len()
            )));
        }
        for ((name, t), v) in expected.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
        }
        let mut rest = vars.iter().copied();
        let mut take = |net: &Mlp| BoundMlp {
            layers: net
                .layers
                .iter()
                .map(|_| (rest.next().unwrap(), rest.next().unwrap()))
                .collect(),
            output: net.spec.output,
        };
        let gamma = self.gamma_net.as_ref().map(&mut take);
        let lambda = take(&self.lambda_net);
        let psi = self.psi_net.as_ref().map(&mut take);
        let phi = self.phi_net.as_ref().map(&mut take);
        let g = take(&self.g_net);
        Ok(BoundModel {
            variant: self.variant,
            lambda_scale: self.lambda_scale,
            gamma,
            lambda,
            psi,
            phi,
            g,
        })
    }

    /// Runs the layer stack on `s` and returns the estimated precision.
    pub fn predict(&self, s: &SymMatrix, cfg: &LayerConfig) -> Result<SymMatrix> {
        self.check_dim(s)?;
        let tape = Tape::new();
        let model = self.bind(&tape, false);
        layer::spodnet_forward(&tape, s, &model, cfg)?.theta_matrix()
    }

    pub(crate) fn check_dim(&self, s: &SymMatrix) -> Result<()> {
        if s.dim() != self.p {
            return Err(Error::Dimension(format!(
                "model is for p = {}, input is {}x{}",
                self.p,
                s.dim(),
                s.dim()
            )));
        }
        Ok(())
    }
}

/// Parameters placed on a tape, implementing the column and diagonal maps.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    variant: Variant,
    lambda_scale: f64,
    gamma: Option<BoundMlp<'t>>,
    lambda: BoundMlp<'t>,
    psi: Option<BoundMlp<'t>>,
    phi: Option<BoundMlp<'t>>,
    g: BoundMlp<'t>,
}

impl<'t> BoundModel<'t> {
    /// Leaves in the order of [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out: Vec<Var<'t>> = Vec::new();
        for net in [
            self.gamma.as_ref(),
            Some(&self.lambda),
            self.psi.as_ref(),
            self.phi.as_ref(),
            Some(&self.g),
        ]
        .into_iter()
        .flatten()
        {
            out.extend(net.vars());
        }
        out
    }

    /// Per-tensor gradients aligned with [`ModelParams::named_tensors`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| grads.wrt_or_zero(v))
            .collect()
    }

    fn gradient_step(&self, inputs: &ColumnInputs<'t>) -> Result<Var<'t>> {
        let gamma = self
            .gamma
            .as_ref()
            .ok_or_else(|| Error::Contract("gradient step needs a step-size network".into()))?
            .forward(inputs.theta12)?;
        inputs.theta12.sub(gamma.mul(inputs.s12.sub(inputs.w12)?)?)
    }

    fn threshold(
        &self,
        pre: Var<'t>,
        lambda_input: Var<'t>,
        inputs: &ColumnInputs<'t>,
    ) -> Result<Var<'t>> {
        let lam = self.lambda.forward(lambda_input)?.scale(self.lambda_scale);
        let pre = match inputs.stabilizer {
            Some(zeta) => stabilize_preactivation_var(pre, inputs.theta11_inv, zeta)?,
            None => pre,
        };
        pre.soft_threshold(lam)
    }
}

impl<'t> UpdateFns<'t> for BoundModel<'t> {
    fn column(&self, _tape: &'t Tape, inputs: &ColumnInputs<'t>) -> Result<Var<'t>> {
        match self.variant {
            Variant::Ubg => {
                let inner = self.gradient_step(inputs)?;
                self.threshold(inner, inner, inputs)
            }
            Variant::Pnp => {
                let inner = self.gradient_step(inputs)?;
                let psi = self
                    .psi
                    .as_ref()
                    .ok_or_else(|| Error::Contract("PNP without psi_net".into()))?;
                self.threshold(psi.forward(inner)?, inner, inputs)
            }
            Variant::E2e => {
                let phi = self
                    .phi
                    .as_ref()
                    .ok_or_else(|| Error::Contract("E2E without phi_net".into()))?;
                self.threshold(phi.forward(inputs.theta12)?, inputs.theta12, inputs)
            }
        }
    }

    fn diagonal(
        &self,
        tape: &'t Tape,
        theta22: Var<'t>,
        s22: Var<'t>,
        schur_quad: Var<'t>,
    ) -> Result<Var<'t>> {
        let x = tape.stack(&[theta22, s22, schur_quad])?;
        self.g.forward(x)?.sum().add(tape.scalar(EPS_V))
    }
}

/// Plain-valued inputs of a single column update.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnContext {
    pub theta12: Vec<f64>,
    pub theta22: f64,
    pub s12: Vec<f64>,
    pub s22: f64,
    pub w12: Vec<f64>,
    pub theta11_inv: Vec<f64>,
    pub stabilizer: Option<f64>,
}

/// Evaluates the variant's column map on plain values.
pub fn column_update(params: &ModelParams, ctx: &ColumnContext) -> Result<Vec<f64>> {
    let q = ctx.theta12.len();
    if q + 1 != params.p
        || ctx.s12.len() != q
        || ctx.w12.len() != q
        || ctx.theta11_inv.len() != q * q
    {
        return Err(Error::Dimension(
            "column context does not match the model".into(),
        ));
    }
    let tape = Tape::new();
    let model = params.bind(&tape, false);
    let c = |v: &[f64]| tape.constant(vec![v.len()], v.to_vec());
    let inputs = ColumnInputs {
        index: 0,
        theta12: c(&ctx.theta12)?,
        theta22: tape.scalar(ctx.theta22),
        s12: c(&ctx.s12)?,
        s22: tape.scalar(ctx.s22),
        w12: c(&ctx.w12)?,
        theta11_inv: tape.constant(vec![q, q], ctx.theta11_inv.clone())?,
        stabilizer: ctx.stabilizer,
    };
    Ok(model.column(&tape, &inputs)?.value())
}

/// The diagonal map on plain values.
pub fn g_eval(params: &ModelParams, theta22: f64, s22: f64, schur_quad: f64) -> Result<f64> {
    if schur_quad < 0.0 {
        return Err(Error::Domain(format!(
            "quadratic form {schur_quad} is negative"
        )));
    }
    let tape = Tape::new();
    let model = params.bind(&tape, false);
    Ok(model
        .diagonal(
            &tape,
            tape.scalar(theta22),
            tape.scalar(s22),
            tape.scalar(schur_quad),
        )?
        .item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eig_diagnostics, spd_inverse};
    use crate::testutil::random_spd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Sets every weight to zero and the final bias to `out`.
    fn constant_net(net: &mut Mlp, out: &[f64]) {
        for d in &mut net.layers {
            d.weight.data_mut().fill(0.0);
            d.bias.data_mut().fill(0.0);
        }
        net.layers
            .last_mut()
            .unwrap()
            .bias
            .data_mut()
            .copy_from_slice(out);
    }

    /// Plain loops, no tape.
    fn mlp_by_hand(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = net.layers.len() - 1;
        for (k, d) in net.layers.iter().enumerate() {
            let (out, inp) = (d.weight.shape()[0], d.weight.shape()[1]);
            h = (0..out)
                .map(|r| {
                    let z = d.bias.data()[r]
                        + (0..inp)
                            .map(|c| d.weight.data()[r * inp + c] * h[c])
                            .sum::<f64>();
                    if k < last {
                        z.max(0.0)
                    } else if net.spec.output == OutputActivation::Abs {
                        z.abs()
                    } else {
                        z
                    }
                })
                .collect();
        }
        h
    }

    fn st(x: f64, t: f64) -> f64 {
        x.signum() * (x.abs() - t).max(0.0)
    }

    fn quad_by_hand(z: &[f64], a: &[f64]) -> f64 {
        let q = z.len();
        (0..q)
            .map(|r| (0..q).map(|c| z[r] * a[r * q + c] * z[c]).sum::<f64>())
            .sum()
    }

    fn scale_by_hand(z: &[f64], a: &[f64], zeta: Option<f64>) -> Vec<f64> {
        match zeta {
            Some(zeta) if quad_by_hand(z, a) > 1e-12 => {
                let s = zeta.sqrt() / quad_by_hand(z, a).sqrt();
                z.iter().map(|x| x * s).collect()
            }
            _ => z.to_vec(),
        }
    }

    fn ctx1(theta12: f64, s12: f64, w12: f64) -> ColumnContext {
        ColumnContext {
            theta12: vec![theta12],
            theta22: 1.0,
            s12: vec![s12],
            s22: 1.0,
            w12: vec![w12],
            theta11_inv: vec![1.0],
            stabilizer: None,
        }
    }

    fn random_ctx(rng: &mut ChaCha8Rng, p: usize, zeta: Option<f64>) -> ColumnContext {
        let q = p - 1;
        let v = |rng: &mut ChaCha8Rng| {
            (0..q)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>()
        };
        ColumnContext {
            theta12: v(rng),
            theta22: 1.3,
            s12: v(rng),
            s22: 0.9,
            w12: v(rng),
            theta11_inv: random_spd(rng, q, 0.5).into_data(),
            stabilizer: zeta,
        }
    }

    #[test]
    fn ubg_hand_example() {
        let mut params = init_params(Variant::Ubg, 2, 0).unwrap();
        constant_net(params.gamma_net.as_mut().unwrap(), &[1.0]);
        constant_net(&mut params.lambda_net, &[0.2]);
        let u = column_update(&params, &ctx1(1.0, 0.5, 0.5)).unwrap();
        assert!((u[0] - 0.8).abs() < 1e-15);

        // thresholds above the inner vector kill it
        constant_net(&mut params.lambda_net, &[1.5]);
        assert_eq!(
            column_update(&params, &ctx1(1.0, 0.5, 0.5)).unwrap(),
            vec![0.0]
        );

        // zero step and threshold leave the column as is
        constant_net(params.gamma_net.as_mut().unwrap(), &[0.0]);
        constant_net(&mut params.lambda_net, &[0.0]);
        assert_eq!(
            column_update(&params, &ctx1(-0.7, 3.0, 0.1)).unwrap(),
            vec![-0.7]
        );
    }

    #[test]
    fn zero_networks_give_zero_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pnp = init_params(Variant::Pnp, 6, 1).unwrap();
        constant_net(pnp.psi_net.as_mut().unwrap(), &[0.0; 5]);
        let mut e2e = init_params(Variant::E2e, 6, 1).unwrap();
        constant_net(e2e.phi_net.as_mut().unwrap(), &[0.0; 5]);
        for params in [&pnp, &e2e] {
            let ctx = random_ctx(&mut rng, 6, Some(1.0));
            assert_eq!(column_update(params, &ctx).unwrap(), vec![0.0; 5]);
        }
    }

    #[test]
    fn large_threshold_kills_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in Variant::ALL {
            let mut params = init_params(variant, 6, 2).unwrap();
            constant_net(&mut params.lambda_net, &[1e6; 5]);
            let ctx = random_ctx(&mut rng, 6, Some(1.0));
            assert_eq!(column_update(&params, &ctx).unwrap(), vec![0.0; 5]);
        }
    }

    #[test]
    fn zero_threshold_passes_scaled_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = init_params(Variant::Pnp, 6, 3).unwrap();
        constant_net(&mut params.lambda_net, &[0.0; 5]);
        let ctx = random_ctx(&mut rng, 6, Some(0.7));
        let gamma = mlp_by_hand(params.gamma_net.as_ref().unwrap(), &ctx.theta12)[0];
        let inner: Vec<f64> = (0..5)
            .map(|k| ctx.theta12[k] - gamma * (ctx.s12[k] - ctx.w12[k]))
            .collect();
        let z = mlp_by_hand(params.psi_net.as_ref().unwrap(), &inner);
        let expected = scale_by_hand(&z, &ctx.theta11_inv, Some(0.7));
        let got = column_update(&params, &ctx).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn variants_match_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for variant in Variant::ALL {
            for zeta in [None, Some(1.0), Some(0.3)] {
                let mut params = init_params(variant, 6, 7).unwrap();
                // make the thresholds bite on some entries
                params
                    .lambda_net
                    .layers
                    .last_mut()
                    .unwrap()
                    .bias
                    .data_mut()
                    .fill(0.05);
                let ctx = random_ctx(&mut rng, 6, zeta);
                let (pre, lam_in) = match variant {
                    Variant::E2e => (
                        mlp_by_hand(params.phi_net.as_ref().unwrap(), &ctx.theta12),
                        ctx.theta12.clone(),
                    ),
                    _ => {
                        let gamma =
                            mlp_by_hand(params.gamma_net.as_ref().unwrap(), &ctx.theta12)[0];
                        let inner: Vec<f64> = (0..5)
                            .map(|k| ctx.theta12[k] - gamma * (ctx.s12[k] - ctx.w12[k]))
                            .collect();
                        let pre = if variant == Variant::Pnp {
                            mlp_by_hand(params.psi_net.as_ref().unwrap(), &inner)
                        } else {
                            inner.clone()
                        };
                        (pre, inner)
                    }
                };
                let lam: Vec<f64> = mlp_by_hand(&params.lambda_net, &lam_in)
                    .iter()
                    .map(|l| l * variant.lambda_scale())
                    .collect();
                let pre = scale_by_hand(&pre, &ctx.theta11_inv, zeta);
                let expected: Vec<f64> = pre.iter().zip(&lam).map(|(x, l)| st(*x, *l)).collect();
                let got = column_update(&params, &ctx).unwrap();
                for (g, e) in got.iter().zip(&expected) {
                    assert!(
                        (g - e).abs() <= 1e-12,
                        "{variant} {zeta:?}: {got:?} vs {expected:?}"
                    );
                    if *e == 0.0 {
                        assert_eq!(*g, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn g_examples() {
        let mut params = init_params(Variant::Ubg, 4, 0).unwrap();
        constant_net(&mut params.g_net, &[0.0]);
        assert_eq!(g_eval(&params, 3.0, 1.0, 2.0).unwrap(), EPS_V);

        // identity path on the first input
        for d in &mut params.g_net.layers {
            d.weight.data_mut().fill(0.0);
            d.bias.data_mut().fill(0.0);
            d.weight.data_mut()[0] = 1.0;
        }
        assert_eq!(g_eval(&params, 2.0, 5.0, 1.0).unwrap(), 2.0 + EPS_V);
        assert!(matches!(
            g_eval(&params, 2.0, 5.0, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn g_is_positive_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..200 {
            let params = init_params(Variant::Ubg, 3, seed).unwrap();
            let x: [f64; 3] = [
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(0.0..10.0),
            ];
            assert!(g_eval(&params, x[0], x[1], x[2]).unwrap() > 0.0);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        for variant in Variant::ALL {
            let a = init_params(variant, 9, 0).unwrap();
            let b = init_params(variant, 9, 0).unwrap();
            let bytes = |m: &ModelParams| {
                m.named_tensors()
                    .iter()
                    .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bytes(&a), bytes(&b));
            assert_ne!(bytes(&a), bytes(&init_params(variant, 9, 1).unwrap()));
            a.validate().unwrap();
            for (name, t) in a.named_tensors() {
                if name.ends_with("bias") {
                    assert!(t.data().iter().all(|&x| x == 0.0));
                } else {
                    let bound = 1.0 / (t.shape()[1] as f64).sqrt();
                    assert!(t.data().iter().all(|x| x.abs() < bound));
                }
            }
        }
        // fan_in 4 at p = 5
        let p5 = init_params(Variant::Ubg, 5, 3).unwrap();
        let w = &p5.gamma_net.as_ref().unwrap().layers[0].weight;
        assert_eq!(w.shape()[1], 4);
        assert!(w.data().iter().all(|x| x.abs() < 0.5));
        assert!(init_params(Variant::Ubg, 1, 0).is_err());
    }

    #[test]
    fn architecture_shapes() {
        let p = 10;
        let m = init_params(Variant::Pnp, p, 0).unwrap();
        let names: Vec<_> = m.nets().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["gamma_net", "lambda_net", "psi_net", "g_net"]);
        assert_eq!(m.gamma_net.as_ref().unwrap().spec.widths, [9, 5, 1]);
        assert_eq!(m.lambda_net.spec.widths, [9, 5, 9]);
        assert_eq!(m.psi_net.as_ref().unwrap().spec.widths, [9, 20, 9]);
        assert_eq!(m.g_net.spec.widths, [3, 3, 3, 1]);
        let e = init_params(Variant::E2e, p, 0).unwrap();
        assert!(e.gamma_net.is_none());
        assert_eq!(e.phi_net.as_ref().unwrap().spec.widths, [9, 100, 9]);
        assert_eq!(m.lambda_scale, 0.1);
        assert_eq!(init_params(Variant::Ubg, p, 0).unwrap().lambda_scale, 1.0);
    }

    #[test]
    fn initial_forward_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for variant in Variant::ALL {
            let params = init_params(variant, 10, 5).unwrap();
            let s = spd_inverse(&random_spd(&mut rng, 10, 0.5)).unwrap();
            let out = params.predict(&s, &LayerConfig::default()).unwrap();
            assert!(out.data().iter().all(|x| x.is_finite()));
            assert!(eig_diagnostics(&out).min > 0.0);
        }
    }

    #[test]
    fn diagonal_network_is_live_at_init() {
        for seed in 0..100 {
            let params = init_params(Variant::Ubg, 6, seed).unwrap();
            assert!(
                g_eval(&params, 0.5, 1.0, 0.1).unwrap() > 10.0 * EPS_V,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("UBG".parse::<Variant>().unwrap(), Variant::Ubg);
        assert_eq!("e2e".parse::<Variant>().unwrap(), Variant::E2e);
        assert!("glad".parse::<Variant>().is_err());
        assert_eq!(Variant::Pnp.to_string(), "PNP");
    }
}
