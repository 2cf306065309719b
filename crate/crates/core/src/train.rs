//! Whole-image training: adaptive-moment optimizer with decoupled decay,
//! the equilibrium (implicit-gradient) training loop, and the unrolled
//! baselines whose tape makes activation memory grow with depth.

use std::time::Instant;

use serde_json::json;

use crate::backward::{
    loss_total, neumann_adjoint, param_gradients_saved, reconstruct, BackwardConfig, LossValue,
    StepJacobian,
};
use crate::classical::{fcls, vca};
use crate::equilibrium::{
    build_step_saved, solve_fixed_point, step_backward, AbundanceMap, EquilibriumLayer,
    GThetaOperator, LayerGrads, SolveMode, SolverConfig, StepSaved,
};
use crate::error::{Result, UnmixError};
use crate::ledger::{LedgerPhase, MemoryLedger};
use crate::tensor::{mode3_product_adjoint, mode3_weight_vjp, Matrix, RngState, Tensor};

/// The trained parameter bundle is the layer itself: Θ = (θ, W, λ-preimage)
/// plus the fixed step/temperature hyperparameters.
pub type ParamSet = EquilibriumLayer;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate of the endmember matrix.
    pub lr_w: f64,
    /// Learning rate of everything else (θ and the λ preimage).
    pub lr_other: f64,
    pub weight_decay_w: f64,
    pub weight_decay_other: f64,
    /// Reconstruction-loss weight in `α·RE + SAD`.
    pub alpha: f64,
    /// Softmax temperature γ.
    pub gamma: f64,
    /// Proximal-gradient step size η.
    pub eta: f64,
    /// Initial sparsity weight λ₀.
    pub lambda0: f64,
    /// Hidden feature channels of the learned operator.
    pub hidden: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub backward: BackwardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr_w: 0.005,
            lr_other: 0.01,
            weight_decay_w: 1e-5,
            weight_decay_other: 1e-5,
            alpha: 1.0,
            gamma: 0.8,
            eta: 0.04,
            lambda0: 0.01,
            hidden: 16,
            seed: 0,
            solver: SolverConfig::default(),
            backward: BackwardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(UnmixError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_w > 0.0 && self.lr_other > 0.0) {
            return Err(UnmixError::Config(format!(
                "learning rates must be > 0, got W {} / other {}",
                self.lr_w, self.lr_other
            )));
        }
        if !(self.weight_decay_w >= 0.0 && self.weight_decay_other >= 0.0) {
            return Err(UnmixError::Config("weight decay must be >= 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(UnmixError::Config(format!(
                "loss weight must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.hidden == 0 {
            return Err(UnmixError::Config("hidden channels must be >= 1".into()));
        }
        self.solver.validate()?;
        self.backward.validate()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Which learning-rate/decay group a parameter slice belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// The endmember matrix (clamped to ≥ 0 after every step).
    W,
    Other,
}

/// Per-group step sizes and decoupled decay.
#[derive(Debug, Clone, Copy)]
pub struct GroupRates {
    pub lr_w: f64,
    pub lr_other: f64,
    pub wd_w: f64,
    pub wd_other: f64,
}

impl GroupRates {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        GroupRates {
            lr_w: cfg.lr_w,
            lr_other: cfg.lr_other,
            wd_w: cfg.weight_decay_w,
            wd_other: cfg.weight_decay_other,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Flat first/second moment buffers over a fixed parameter flattening.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(total_params: usize) -> Self {
        OptimizerState {
            m: vec![0.0; total_params],
            v: vec![0.0; total_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-decay adaptive-moment update over grouped parameter
/// slices. Returns `false` (and leaves parameters and moments untouched)
/// when any gradient entry is non-finite. The `W` group is clamped
/// elementwise to ≥ 0 after the update.
pub fn adam_step(
    params: &mut [(Group, &mut [f64])],
    grads: &[(Group, &[f64])],
    state: &mut OptimizerState,
    rates: &GroupRates,
) -> Result<bool> {
    if params.len() != grads.len()
        || params
            .iter()
            .zip(grads)
            .any(|((pg, p), (gg, g))| pg != gg || p.len() != g.len())
    {
        return Err(UnmixError::dimension(
            "adam_step",
            "parameter and gradient slice layouts differ".into(),
        ));
    }
    let total: usize = params.iter().map(|(_, p)| p.len()).sum();
    if total != state.m.len() {
        return Err(UnmixError::dimension(
            "adam_step",
            format!("{} params vs optimizer sized for {}", total, state.m.len()),
        ));
    }
    if grads
        .iter()
        .any(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        log::warn!("skipping optimizer step: non-finite gradient");
        return Ok(false);
    }

    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);

    let mut off = 0;
    for ((group, p), (_, g)) in params.iter_mut().zip(grads) {
        let (lr, wd) = match group {
            Group::W => (rates.lr_w, rates.wd_w),
            Group::Other => (rates.lr_other, rates.wd_other),
        };
        for (i, (pv, gv)) in p.iter_mut().zip(g.iter()).enumerate() {
            let k = off + i;
            *pv *= 1.0 - lr * wd;
            state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * gv;
            state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * gv * gv;
            *pv -= lr * (state.m[k] / bc1) / ((state.v[k] / bc2).sqrt() + ADAM_EPS);
        }
        if *group == Group::W {
            for pv in p.iter_mut() {
                if *pv < 0.0 {
                    *pv = 0.0;
                }
            }
        }
        off += p.len();
    }
    Ok(true)
}

fn theta_slices_mut(t: &mut GThetaOperator) -> Vec<&mut [f64]> {
    vec![
        t.conv1.weight.data_mut(),
        t.conv1.bias.as_mut_slice(),
        t.att1.w1.data_mut(),
        t.att1.b1.as_mut_slice(),
        t.att1.w2.data_mut(),
        t.att1.b2.as_mut_slice(),
        t.ln_gain.as_mut_slice(),
        t.ln_offset.as_mut_slice(),
        t.conv2.weight.data_mut(),
        t.conv2.bias.as_mut_slice(),
        t.att2.w1.data_mut(),
        t.att2.b1.as_mut_slice(),
        t.att2.w2.data_mut(),
        t.att2.b2.as_mut_slice(),
        t.head.weight.data_mut(),
        t.head.bias.as_mut_slice(),
    ]
}

fn theta_slices(t: &GThetaOperator) -> Vec<&[f64]> {
    vec![
        t.conv1.weight.data(),
        &t.conv1.bias,
        t.att1.w1.data(),
        &t.att1.b1,
        t.att1.w2.data(),
        &t.att1.b2,
        &t.ln_gain,
        &t.ln_offset,
        t.conv2.weight.data(),
        &t.conv2.bias,
        t.att2.w1.data(),
        &t.att2.b1,
        t.att2.w2.data(),
        &t.att2.b2,
        t.head.weight.data(),
        &t.head.bias,
    ]
}

/// One optimizer step on the equilibrium layer's parameter set.
pub fn adam_step_layer(
    layer: &mut EquilibriumLayer,
    grads: &LayerGrads,
    state: &mut OptimizerState,
    rates: &GroupRates,
) -> Result<bool> {
    let mut params: Vec<(Group, &mut [f64])> = theta_slices_mut(&mut layer.gtheta)
        .into_iter()
        .map(|s| (Group::Other, s))
        .collect();
    params.push((Group::W, layer.w.data_mut()));
    params.push((Group::Other, std::slice::from_mut(&mut layer.lambda_raw)));

    let mut gs: Vec<(Group, &[f64])> = theta_slices(&grads.theta)
        .into_iter()
        .map(|s| (Group::Other, s))
        .collect();
    gs.push((Group::W, grads.w.data()));
    gs.push((Group::Other, std::slice::from_ref(&grads.lambda_raw)));

    adam_step(&mut params, &gs, state, rates)
}

/// Total scalar count in the layer's optimizer flattening.
pub fn layer_param_count(layer: &EquilibriumLayer) -> usize {
    layer.gtheta.param_count() + layer.w.data().len() + 1
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Everything a training run produces besides the parameters themselves.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub re_curve: Vec<f64>,
    pub sad_curve: Vec<f64>,
    pub layer: EquilibriumLayer,
    pub seconds_per_epoch: Vec<f64>,
    /// Highest overall retained-scalar peak over all epochs.
    pub ledger_peak: usize,
    pub forward_peak: usize,
    pub backward_peak: usize,
    /// Forward-solver iterations per epoch.
    pub iterations: Vec<usize>,
    /// Epochs whose forward solve hit the tolerance (rather than the cap).
    pub solver_converged: usize,
    /// Epochs whose adjoint series was cut or diverged.
    pub backward_truncated: usize,
    /// Optimizer steps skipped on non-finite gradients.
    pub skipped_steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_curve.last().expect("at least one epoch")
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "epochs": self.loss_curve.len(),
            "loss": self.loss_curve,
            "re": self.re_curve,
            "sad": self.sad_curve,
            "final_loss": self.final_loss(),
            "seconds_per_epoch": self.seconds_per_epoch,
            "ledger": {
                "peak": self.ledger_peak,
                "forward_peak": self.forward_peak,
                "backward_peak": self.backward_peak,
            },
            "solver_iterations": self.iterations,
            "solver_converged_epochs": self.solver_converged,
            "backward_truncated_epochs": self.backward_truncated,
            "skipped_steps": self.skipped_steps,
        })
    }

    /// `epoch,total,re,sad` rows.
    pub fn write_loss_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,total,re,sad")?;
        for i in 0..self.loss_curve.len() {
            writeln!(
                out,
                "{},{},{},{}",
                i + 1,
                self.loss_curve[i],
                self.re_curve[i],
                self.sad_curve[i]
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared initialization
// ---------------------------------------------------------------------------

/// VCA endmembers and FCLS abundances used to start every training mode.
pub struct TrainInit {
    pub w0: Matrix,
    pub a0: Tensor,
}

pub fn classical_init(y: &Tensor, r: usize, rng: &mut RngState) -> Result<TrainInit> {
    let vca_out = vca(y, r, rng)?;
    let fcls_out = fcls(y, &vca_out.endmembers)?;
    Ok(TrainInit {
        w0: vca_out.endmembers,
        a0: fcls_out.abundances,
    })
}

fn check_cube(y: &Tensor) -> Result<()> {
    if y.shape().len() != 3 {
        return Err(UnmixError::dimension(
            "train",
            format!("expected an h x w x L cube, got {:?}", y.shape()),
        ));
    }
    if !y.all_finite() {
        return Err(UnmixError::Domain("cube contains non-finite values".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Equilibrium training
// ---------------------------------------------------------------------------

/// Train the equilibrium model: per epoch one Anderson fixed-point solve,
/// the Neumann adjoint at that fixed point, and one optimizer step. The
/// loss reads `W` both through the fixed point and directly through the
/// reconstruction, so its gradient is the implicit part plus the direct
/// reconstruction term.
pub fn train_deq(y: &Tensor, r: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    check_cube(y)?;
    cfg.validate()?;
    let bands = y.shape()[2];
    let mut rng = RngState::new(cfg.seed);
    let init = classical_init(y, r, &mut rng)?;
    let gtheta = GThetaOperator::xavier(cfg.hidden, bands, &mut rng)?;
    let mut layer = EquilibriumLayer::new(gtheta, init.w0, cfg.lambda0, cfg.eta, cfg.gamma)?;

    let mut state = OptimizerState::new(layer_param_count(&layer));
    let rates = GroupRates::from_config(cfg);
    let mut ledger = MemoryLedger::new();
    let mut report = ReportBuilder::new(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        ledger.reset();
        let (loss, grads, trace_iters, trace_converged, truncated) =
            deq_epoch(y, &init.a0, &layer, cfg, &mut ledger).map_err(|e| match e {
                UnmixError::Solver { message, residuals } => UnmixError::Solver {
                    message: format!("epoch {epoch}: {message}"),
                    residuals,
                },
                UnmixError::Backward(m) => UnmixError::Backward(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
        let applied = adam_step_layer(&mut layer, &grads, &mut state, &rates)?;
        report.push(
            loss,
            t0.elapsed().as_secs_f64(),
            &ledger,
            trace_iters,
            trace_converged,
            truncated,
            !applied,
        );
    }
    Ok(report.finish(layer))
}

/// One forward+backward pass of the equilibrium model; no parameter update.
fn deq_epoch(
    y: &Tensor,
    a0: &Tensor,
    layer: &EquilibriumLayer,
    cfg: &TrainConfig,
    ledger: &mut MemoryLedger,
) -> Result<(LossValue, LayerGrads, usize, bool, bool)> {
    ledger.set_phase(LedgerPhase::ForwardSolve);
    let map = AbundanceMap { layer, y };
    let (a_star, trace) =
        solve_fixed_point(a0, &map, &cfg.solver, SolveMode::Anderson, Some(ledger))?;

    let yhat = reconstruct(&a_star, &layer.w)?;
    let (loss, yhat_grad) = loss_total(y, &yhat, cfg.alpha)?;
    let a_grad = mode3_product_adjoint(&yhat_grad, &layer.w)?;

    ledger.set_phase(LedgerPhase::Backward);
    let jac = StepJacobian::at(layer, &a_star, y)?;
    let saved_cost = jac.saved.scalar_count();
    ledger.retain(saved_cost);
    let adj = neumann_adjoint(&jac, &a_grad, &cfg.backward, Some(ledger))?;
    if adj.diverged {
        log::warn!(
            "adjoint series not contractive; using the truncated {}-term sum",
            adj.t_used
        );
    }
    let mut grads = param_gradients_saved(layer, &jac.saved, &adj.v)?;
    ledger.release(saved_cost);
    ledger.set_phase(LedgerPhase::Idle);

    // direct reconstruction path of W
    let w_direct = mode3_weight_vjp(&yhat_grad, &a_star)?;
    for (d, s) in grads.w.data_mut().iter_mut().zip(w_direct.data()) {
        *d += s;
    }
    Ok((
        loss,
        grads,
        trace.iterations,
        trace.converged,
        adj.diverged || !adj.converged,
    ))
}

// ---------------------------------------------------------------------------
// Unrolled baselines
// ---------------------------------------------------------------------------

/// Finite stack of update layers sharing one endmember matrix. With
/// `share = true` a single (θ, λ) pair drives every layer (Unroll-S);
/// otherwise each depth owns one.
#[derive(Debug, Clone)]
pub struct UnrolledModel {
    pub w: Matrix,
    pub thetas: Vec<GThetaOperator>,
    pub lambda_raws: Vec<f64>,
    pub eta: f64,
    pub gamma: f64,
    pub k_layers: usize,
    pub share: bool,
}

impl UnrolledModel {
    pub fn init(
        w0: Matrix,
        k_layers: usize,
        share: bool,
        cfg: &TrainConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        if k_layers < 1 {
            return Err(UnmixError::Config("k_layers must be >= 1".into()));
        }
        let bands = w0.rows();
        let copies = if share { 1 } else { k_layers };
        let mut thetas = Vec::with_capacity(copies);
        for _ in 0..copies {
            thetas.push(GThetaOperator::xavier(cfg.hidden, bands, rng)?);
        }
        let lambda_raws = vec![crate::equilibrium::softplus_inv(cfg.lambda0); copies];
        Ok(UnrolledModel {
            w: w0,
            thetas,
            lambda_raws,
            eta: cfg.eta,
            gamma: cfg.gamma,
            k_layers,
            share,
        })
    }

    fn theta_index(&self, k: usize) -> usize {
        if self.share {
            0
        } else {
            k
        }
    }

    /// Assembled layer driving depth `k`.
    pub fn layer_view(&self, k: usize) -> EquilibriumLayer {
        let i = self.theta_index(k);
        EquilibriumLayer {
            gtheta: self.thetas[i].clone(),
            w: self.w.clone(),
            lambda_raw: self.lambda_raws[i],
            eta: self.eta,
            gamma: self.gamma,
        }
    }

    /// Learnable scalars: one shared `W` plus every (θ, λ) copy.
    pub fn param_count(&self) -> usize {
        self.w.data().len()
            + self
                .thetas
                .iter()
                .map(|t| t.param_count())
                .sum::<usize>()
            + self.lambda_raws.len()
    }
}

/// Gradients mirroring [`UnrolledModel`]'s layout.
#[derive(Debug, Clone)]
pub struct UnrolledGrads {
    pub w: Matrix,
    pub thetas: Vec<GThetaOperator>,
    pub lambda_raws: Vec<f64>,
}

impl UnrolledGrads {
    fn zeros_like(model: &UnrolledModel) -> Result<Self> {
        let mut thetas = Vec::with_capacity(model.thetas.len());
        for t in &model.thetas {
            thetas.push(GThetaOperator::zeros(t.hidden(), t.bands())?);
        }
        Ok(UnrolledGrads {
            w: Matrix::zeros(model.w.rows(), model.w.cols()),
            thetas,
            lambda_raws: vec![0.0; model.lambda_raws.len()],
        })
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_theta(dst: &mut GThetaOperator, src: &GThetaOperator) {
    add_assign(dst.conv1.weight.data_mut(), src.conv1.weight.data());
    add_assign(&mut dst.conv1.bias, &src.conv1.bias);
    add_assign(dst.att1.w1.data_mut(), src.att1.w1.data());
    add_assign(&mut dst.att1.b1, &src.att1.b1);
    add_assign(dst.att1.w2.data_mut(), src.att1.w2.data());
    add_assign(&mut dst.att1.b2, &src.att1.b2);
    add_assign(&mut dst.ln_gain, &src.ln_gain);
    add_assign(&mut dst.ln_offset, &src.ln_offset);
    add_assign(dst.conv2.weight.data_mut(), src.conv2.weight.data());
    add_assign(&mut dst.conv2.bias, &src.conv2.bias);
    add_assign(dst.att2.w1.data_mut(), src.att2.w1.data());
    add_assign(&mut dst.att2.b1, &src.att2.b1);
    add_assign(dst.att2.w2.data_mut(), src.att2.w2.data());
    add_assign(&mut dst.att2.b2, &src.att2.b2);
    add_assign(dst.head.weight.data_mut(), src.head.weight.data());
    add_assign(&mut dst.head.bias, &src.head.bias);
}

/// Forward through all `k_layers` updates keeping the full tape, then
/// backprop. Activation memory — every layer's saved step — is charged to
/// `ledger` and only released as the backward pass consumes the tape, which
/// is exactly the linear-in-depth footprint the equilibrium mode avoids.
pub fn unrolled_forward_backward(
    model: &UnrolledModel,
    a0: &Tensor,
    y: &Tensor,
    alpha: f64,
    mut ledger: Option<&mut MemoryLedger>,
) -> Result<(LossValue, UnrolledGrads, Tensor)> {
    if let Some(l) = ledger.as_deref_mut() {
        l.set_phase(LedgerPhase::ForwardSolve);
    }
    let mut tape: Vec<StepSaved> = Vec::with_capacity(model.k_layers);
    let mut a = a0.clone();
    for k in 0..model.k_layers {
        let layer = model.layer_view(k);
        let saved = build_step_saved(&a, y, &layer)?;
        a = saved.a_out.clone();
        if let Some(l) = ledger.as_deref_mut() {
            l.retain(saved.scalar_count());
        }
        tape.push(saved);
    }

    let yhat = reconstruct(&a, &model.w)?;
    let (loss, yhat_grad) = loss_total(y, &yhat, alpha)?;

    if let Some(l) = ledger.as_deref_mut() {
        l.set_phase(LedgerPhase::Backward);
    }
    let mut grads = UnrolledGrads::zeros_like(model)?;
    grads.w = mode3_weight_vjp(&yhat_grad, &a)?;
    let mut out_bar = mode3_product_adjoint(&yhat_grad, &model.w)?;

    for k in (0..model.k_layers).rev() {
        let layer = model.layer_view(k);
        let saved = tape.pop().expect("tape entry per layer");
        let (a_bar, layer_grads) = step_backward(&saved, &layer, &out_bar, true)?;
        let lg = layer_grads.expect("parameter cotangents requested");
        let i = model.theta_index(k);
        accumulate_theta(&mut grads.thetas[i], &lg.theta);
        grads.lambda_raws[i] += lg.lambda_raw;
        add_assign(grads.w.data_mut(), lg.w.data());
        if let Some(l) = ledger.as_deref_mut() {
            l.release(saved.scalar_count());
        }
        out_bar = a_bar;
    }
    if let Some(l) = ledger.as_deref_mut() {
        l.set_phase(LedgerPhase::Idle);
    }
    Ok((loss, grads, a))
}

/// One optimizer step over the unrolled model's flattening.
pub fn adam_step_unrolled(
    model: &mut UnrolledModel,
    grads: &UnrolledGrads,
    state: &mut OptimizerState,
    rates: &GroupRates,
) -> Result<bool> {
    let mut params: Vec<(Group, &mut [f64])> = vec![(Group::W, model.w.data_mut())];
    for t in &mut model.thetas {
        params.extend(theta_slices_mut(t).into_iter().map(|s| (Group::Other, s)));
    }
    params.push((Group::Other, model.lambda_raws.as_mut_slice()));

    let mut gs: Vec<(Group, &[f64])> = vec![(Group::W, grads.w.data())];
    for t in &grads.thetas {
        gs.extend(theta_slices(t).into_iter().map(|s| (Group::Other, s)));
    }
    gs.push((Group::Other, grads.lambda_raws.as_slice()));

    adam_step(&mut params, &gs, state, rates)
}

/// Train an unrolled baseline of fixed depth with full-tape backprop.
pub fn train_unrolled(
    y: &Tensor,
    r: usize,
    cfg: &TrainConfig,
    share_params: bool,
    k_layers: usize,
) -> Result<TrainReport> {
    check_cube(y)?;
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let init = classical_init(y, r, &mut rng)?;
    let mut model = UnrolledModel::init(init.w0, k_layers, share_params, cfg, &mut rng)?;

    let mut state = OptimizerState::new(model.param_count());
    let rates = GroupRates::from_config(cfg);
    let mut ledger = MemoryLedger::new();
    let mut report = ReportBuilder::new(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        ledger.reset();
        let (loss, grads, _) =
            unrolled_forward_backward(&model, &init.a0, y, cfg.alpha, Some(&mut ledger))
                .map_err(|e| match e {
                    UnmixError::Solver { message, residuals } => UnmixError::Solver {
                        message: format!("epoch {epoch}: {message}"),
                        residuals,
                    },
                    other => other,
                })?;
        let applied = adam_step_unrolled(&mut model, &grads, &mut state, &rates)?;
        report.push(
            loss,
            t0.elapsed().as_secs_f64(),
            &ledger,
            k_layers,
            true,
            false,
            !applied,
        );
    }

    // the fitted stack's final layer doubles as the inference layer
    let layer = model.layer_view(model.k_layers - 1);
    Ok(report.finish(layer))
}

/// Run a closure against a fresh ledger and hand the ledger back.
pub fn ledger_measure<F>(f: F) -> Result<MemoryLedger>
where
    F: FnOnce(&mut MemoryLedger) -> Result<()>,
{
    let mut ledger = MemoryLedger::new();
    f(&mut ledger)?;
    Ok(ledger)
}

struct ReportBuilder {
    loss_curve: Vec<f64>,
    re_curve: Vec<f64>,
    sad_curve: Vec<f64>,
    seconds: Vec<f64>,
    iterations: Vec<usize>,
    ledger_peak: usize,
    forward_peak: usize,
    backward_peak: usize,
    solver_converged: usize,
    backward_truncated: usize,
    skipped_steps: usize,
}

impl ReportBuilder {
    fn new(epochs: usize) -> Self {
        ReportBuilder {
            loss_curve: Vec::with_capacity(epochs),
            re_curve: Vec::with_capacity(epochs),
            sad_curve: Vec::with_capacity(epochs),
            seconds: Vec::with_capacity(epochs),
            iterations: Vec::with_capacity(epochs),
            ledger_peak: 0,
            forward_peak: 0,
            backward_peak: 0,
            solver_converged: 0,
            backward_truncated: 0,
            skipped_steps: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        loss: LossValue,
        seconds: f64,
        ledger: &MemoryLedger,
        iterations: usize,
        converged: bool,
        truncated: bool,
        skipped: bool,
    ) {
        self.loss_curve.push(loss.total);
        self.re_curve.push(loss.re_component);
        self.sad_curve.push(loss.sad_component);
        self.seconds.push(seconds);
        self.iterations.push(iterations);
        self.ledger_peak = self.ledger_peak.max(ledger.peak());
        self.forward_peak = self.forward_peak.max(ledger.forward_peak());
        self.backward_peak = self.backward_peak.max(ledger.backward_peak());
        if converged {
            self.solver_converged += 1;
        }
        if truncated {
            self.backward_truncated += 1;
        }
        if skipped {
            self.skipped_steps += 1;
        }
    }

    fn finish(self, layer: EquilibriumLayer) -> TrainReport {
        TrainReport {
            loss_curve: self.loss_curve,
            re_curve: self.re_curve,
            sad_curve: self.sad_curve,
            layer,
            seconds_per_epoch: self.seconds,
            ledger_peak: self.ledger_peak,
            forward_peak: self.forward_peak,
            backward_peak: self.backward_peak,
            iterations: self.iterations,
            solver_converged: self.solver_converged,
            backward_truncated: self.backward_truncated,
            skipped_steps: self.skipped_steps,
        }
    }
}
