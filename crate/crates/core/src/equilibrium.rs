//! The equilibrium abundance layer and its fixed-point solvers.
//!
//! One update of the layer is a learned proximal-gradient step on the
//! abundance tensor:
//!
//! ```text
//! step(A) = Softmax_γ( ST_{η·λ}( A − η · Gθ(A ×₃ W, Y) ×₃ Wᵀ ) )
//! ```
//!
//! where `Gθ` is a small convolutional operator on the reconstruction / data
//! pair and `ST` is soft thresholding. The layer's output is the fixed point
//! of this map, found by Picard iteration or Anderson acceleration. Anderson
//! mixing runs in pre-softmax coordinates: mixing feasible iterates directly
//! would move the fixed point, whereas mixing `p` with `A = Softmax_γ(p)`
//! keeps every externally visible iterate on the simplex at the cost of one
//! extra softmax per iteration.

use std::collections::VecDeque;

use crate::autodiff::{
    channel_attention_forward, channel_attention_vjp, conv2d_forward, conv2d_vjp,
    conv3d_forward, conv3d_vjp, layer_norm_forward, layer_norm_vjp, permute_hwl_to_lhw,
    permute_lhw_to_hwl, relu, relu_vjp, sigmoid_scalar, soft_threshold, soft_threshold_vjp,
    softmax_temp, softmax_temp_vjp, split2, stack2, AttentionMlp, AttentionSaved, Conv2d,
    Conv3d, LayerNormSaved,
};
use crate::error::{Result, UnmixError};
use crate::ledger::MemoryLedger;
use crate::tensor::{
    least_squares_solve, mode3_product, mode3_product_adjoint, mode3_weight_vjp, Matrix,
    RngState, Tensor,
};

/// Reduction ratio of the channel-attention MLPs.
pub const ATTENTION_RATIO: usize = 4;

// ---------------------------------------------------------------------------
// Softplus reparameterization of the sparsity weight
// ---------------------------------------------------------------------------

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Preimage of [`softplus`]; values below ~1e-12 map to a large negative
/// preimage (softplus never reaches 0 exactly).
pub fn softplus_inv(y: f64) -> f64 {
    if y < 1e-12 {
        -60.0
    } else if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus_deriv(x: f64) -> f64 {
    sigmoid_scalar(x)
}

// ---------------------------------------------------------------------------
// The learned operator Gθ
// ---------------------------------------------------------------------------

/// Convolutional correction operator on the (reconstruction, observation)
/// pair. Doubles as its own gradient container: every field is a plain
/// tensor of matching shape.
#[derive(Debug, Clone)]
pub struct GThetaOperator {
    /// 3-D conv lifting the 2-channel input to `C` feature channels.
    pub conv1: Conv3d,
    pub att1: AttentionMlp,
    /// Per-channel affine of the layer norm, `[C]` each.
    pub ln_gain: Vec<f64>,
    pub ln_offset: Vec<f64>,
    /// 3-D conv `C → C`.
    pub conv2: Conv3d,
    pub att2: AttentionMlp,
    /// 2-D head collapsing `(C·L)` feature planes back to `L` bands.
    pub head: Conv2d,
}

impl GThetaOperator {
    /// All-zero operator (useful as a gradient container and in tests:
    /// a zero operator reduces the update to the plain data-fidelity step).
    pub fn zeros(hidden: usize, bands: usize) -> Result<Self> {
        if hidden == 0 || bands == 0 {
            return Err(UnmixError::Config(format!(
                "operator needs hidden > 0 and bands > 0, got {hidden}/{bands}"
            )));
        }
        Ok(GThetaOperator {
            conv1: Conv3d::zeros(hidden, 2),
            att1: AttentionMlp::zeros(hidden, ATTENTION_RATIO)?,
            ln_gain: vec![0.0; hidden],
            ln_offset: vec![0.0; hidden],
            conv2: Conv3d::zeros(hidden, hidden),
            att2: AttentionMlp::zeros(hidden, ATTENTION_RATIO)?,
            head: Conv2d::zeros(bands, hidden * bands),
        })
    }

    /// Xavier-uniform initialization of all weights; layer-norm gain 1,
    /// every bias and offset 0.
    pub fn xavier(hidden: usize, bands: usize, rng: &mut RngState) -> Result<Self> {
        let mut op = Self::zeros(hidden, bands)?;
        let fill = |t: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut RngState| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.iter_mut() {
                *v = rng.next_uniform(-limit, limit);
            }
        };
        fill(op.conv1.weight.data_mut(), 2 * 27, hidden * 27, rng);
        fill(op.conv2.weight.data_mut(), hidden * 27, hidden * 27, rng);
        fill(
            op.head.weight.data_mut(),
            hidden * bands * 9,
            bands * 9,
            rng,
        );
        let hid = hidden / ATTENTION_RATIO;
        fill(op.att1.w1.data_mut(), hidden, hid, rng);
        fill(op.att1.w2.data_mut(), hid, hidden, rng);
        fill(op.att2.w1.data_mut(), hidden, hid, rng);
        fill(op.att2.w2.data_mut(), hid, hidden, rng);
        op.ln_gain = vec![1.0; hidden];
        Ok(op)
    }

    pub fn hidden(&self) -> usize {
        self.conv1.c_out()
    }

    pub fn bands(&self) -> usize {
        self.head.c_out()
    }

    pub fn param_count(&self) -> usize {
        self.conv1.weight.len()
            + self.conv1.bias.len()
            + self.att1.w1.data().len()
            + self.att1.b1.len()
            + self.att1.w2.data().len()
            + self.att1.b2.len()
            + self.ln_gain.len()
            + self.ln_offset.len()
            + self.conv2.weight.len()
            + self.conv2.bias.len()
            + self.att2.w1.data().len()
            + self.att2.b1.len()
            + self.att2.w2.data().len()
            + self.att2.b2.len()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    pub fn all_finite(&self) -> bool {
        self.conv1.weight.all_finite()
            && self.conv1.bias.iter().all(|v| v.is_finite())
            && self.att1.w1.all_finite()
            && self.att1.b1.iter().all(|v| v.is_finite())
            && self.att1.w2.all_finite()
            && self.att1.b2.iter().all(|v| v.is_finite())
            && self.ln_gain.iter().all(|v| v.is_finite())
            && self.ln_offset.iter().all(|v| v.is_finite())
            && self.conv2.weight.all_finite()
            && self.conv2.bias.iter().all(|v| v.is_finite())
            && self.att2.w1.all_finite()
            && self.att2.b1.iter().all(|v| v.is_finite())
            && self.att2.w2.all_finite()
            && self.att2.b2.iter().all(|v| v.is_finite())
            && self.head.weight.all_finite()
            && self.head.bias.iter().all(|v| v.is_finite())
    }
}

/// Forward intermediates of one `Gθ` evaluation, kept for its VJP.
#[derive(Debug, Clone)]
pub struct GSaved {
    /// stacked input `[2, L, h, w]`
    pub x0: Tensor,
    /// conv1 output (attention-1 input)
    pub b1: Tensor,
    pub att1: AttentionSaved,
    pub ln: LayerNormSaved,
    /// block-1 output after relu (conv2 input)
    pub b1r: Tensor,
    /// conv2 output (attention-2 input)
    pub b2: Tensor,
    pub att2: AttentionSaved,
    /// block-2 output after relu (head input, pre-reshape)
    pub b2r: Tensor,
}

impl GSaved {
    pub fn scalar_count(&self) -> usize {
        let att = |s: &AttentionSaved| {
            s.avg.len()
                + s.maxval.len()
                + s.argmax.len()
                + s.pre1_avg.len()
                + s.pre1_max.len()
                + s.hid_avg.len()
                + s.hid_max.len()
                + s.gate.len()
        };
        self.x0.len()
            + self.b1.len()
            + att(&self.att1)
            + self.ln.xhat.len()
            + self.ln.inv_std.len()
            + self.b1r.len()
            + self.b2.len()
            + att(&self.att2)
            + self.b2r.len()
    }
}

/// `Gθ` forward pass with saved intermediates.
///
/// `out = (recon − y) + head(block2(block1(stack(recon, y))))`, all in the
/// cube layout `[h, w, L]`; internally the blocks run on `[C, L, h, w]`
/// feature volumes.
pub fn gtheta_apply_saved(
    op: &GThetaOperator,
    recon: &Tensor,
    y: &Tensor,
) -> Result<(Tensor, GSaved)> {
    if recon.shape() != y.shape() || recon.shape().len() != 3 {
        return Err(UnmixError::dimension(
            "gtheta_apply",
            format!("recon {:?} vs y {:?}", recon.shape(), y.shape()),
        ));
    }
    let (h, w, l) = (recon.shape()[0], recon.shape()[1], recon.shape()[2]);
    if l != op.bands() {
        return Err(UnmixError::dimension(
            "gtheta_apply",
            format!("{l} bands vs operator head for {}", op.bands()),
        ));
    }
    let c = op.hidden();

    let rl = permute_hwl_to_lhw(recon)?;
    let yl = permute_hwl_to_lhw(y)?;
    let x0 = stack2(&rl, &yl)?;

    let b1 = conv3d_forward(&x0, &op.conv1)?;
    let (b1a, att1) = channel_attention_forward(&b1, &op.att1)?;
    let (b1n, ln) = layer_norm_forward(&b1a, &op.ln_gain, &op.ln_offset)?;
    let b1r = relu(&b1n);

    let b2 = conv3d_forward(&b1r, &op.conv2)?;
    let (b2a, att2) = channel_attention_forward(&b2, &op.att2)?;
    let b2r = relu(&b2a);

    let flat = b2r.clone().reshaped(&[c * l, h, w])?;
    let hd = conv2d_forward(&flat, &op.head)?;

    // residual branch: (recon − y) in the same [L, h, w] layout
    let mut out_lhw = rl.sub(&yl);
    out_lhw.axpy(1.0, &hd);
    let out = permute_lhw_to_hwl(&out_lhw)?;

    Ok((
        out,
        GSaved {
            x0,
            b1,
            att1,
            ln,
            b1r,
            b2,
            att2,
            b2r,
        },
    ))
}

/// `Gθ` forward pass without retaining intermediates.
pub fn gtheta_apply(op: &GThetaOperator, recon: &Tensor, y: &Tensor) -> Result<Tensor> {
    gtheta_apply_saved(op, recon, y).map(|(out, _)| out)
}

/// VJP of [`gtheta_apply_saved`]: cotangent w.r.t. `recon` and, when
/// `want_params`, w.r.t. every operator parameter.
pub fn gtheta_backward(
    op: &GThetaOperator,
    saved: &GSaved,
    out_bar: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<GThetaOperator>)> {
    let s = saved.x0.shape(); // [2, L, h, w]
    let (l, h, w) = (s[1], s[2], s[3]);
    let c = op.hidden();

    let cot_lhw = permute_hwl_to_lhw(out_bar)?;

    // head path
    let flat = saved.b2r.clone().reshaped(&[c * l, h, w])?;
    let (flat_bar, head_grads) = conv2d_vjp(&flat, &op.head, &cot_lhw)?;
    let b2r_bar = flat_bar.reshaped(&[c, l, h, w])?;

    let b2a_bar = relu_vjp(&saved.b2r, &b2r_bar);
    let (b2_bar, att2_grads) =
        channel_attention_vjp(&saved.b2, &op.att2, &saved.att2, &b2a_bar)?;
    let (b1r_bar, conv2_grads) = conv3d_vjp(&saved.b1r, &op.conv2, &b2_bar)?;

    let b1n_bar = relu_vjp(&saved.b1r, &b1r_bar);
    let (b1a_bar, ln_gain_bar, ln_offset_bar) =
        layer_norm_vjp(&saved.ln, &op.ln_gain, &b1n_bar)?;
    let (b1_bar, att1_grads) =
        channel_attention_vjp(&saved.b1, &op.att1, &saved.att1, &b1a_bar)?;
    let (x0_bar, conv1_grads) = conv3d_vjp(&saved.x0, &op.conv1, &b1_bar)?;

    // recon reaches the output through the stacked input and the residual
    let (mut rl_bar, _yl_bar) = split2(&x0_bar)?;
    rl_bar.axpy(1.0, &cot_lhw);
    let recon_bar = permute_lhw_to_hwl(&rl_bar)?;

    let grads = if want_params {
        Some(GThetaOperator {
            conv1: conv1_grads,
            att1: att1_grads,
            ln_gain: ln_gain_bar,
            ln_offset: ln_offset_bar,
            conv2: conv2_grads,
            att2: att2_grads,
            head: head_grads,
        })
    } else {
        None
    };
    Ok((recon_bar, grads))
}

// ---------------------------------------------------------------------------
// The equilibrium layer
// ---------------------------------------------------------------------------

/// Full parameter/hyperparameter bundle of the fixed-point update.
#[derive(Debug, Clone)]
pub struct EquilibriumLayer {
    pub gtheta: GThetaOperator,
    /// Endmember weights, `L x R`.
    pub w: Matrix,
    /// Softplus preimage of the sparsity weight λ.
    pub lambda_raw: f64,
    /// Gradient step size.
    pub eta: f64,
    /// Softmax temperature.
    pub gamma: f64,
}

impl EquilibriumLayer {
    pub fn new(
        gtheta: GThetaOperator,
        w: Matrix,
        lambda0: f64,
        eta: f64,
        gamma: f64,
    ) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(UnmixError::Config(format!("step size must be > 0, got {eta}")));
        }
        if !(gamma > 0.0) {
            return Err(UnmixError::Config(format!(
                "softmax temperature must be > 0, got {gamma}"
            )));
        }
        if !(lambda0 >= 0.0) {
            return Err(UnmixError::Config(format!(
                "sparsity weight must be >= 0, got {lambda0}"
            )));
        }
        if w.rows() != gtheta.bands() {
            return Err(UnmixError::dimension(
                "EquilibriumLayer::new",
                format!("W has {} rows, operator expects {}", w.rows(), gtheta.bands()),
            ));
        }
        Ok(EquilibriumLayer {
            gtheta,
            w,
            lambda_raw: softplus_inv(lambda0),
            eta,
            gamma,
        })
    }

    /// Current sparsity weight λ = softplus(λ_raw) ≥ 0.
    pub fn lambda(&self) -> f64 {
        softplus(self.lambda_raw)
    }

    /// Soft-threshold level η·λ.
    pub fn threshold(&self) -> f64 {
        self.eta * self.lambda()
    }

    pub fn endmember_count(&self) -> usize {
        self.w.cols()
    }
}

// ---------------------------------------------------------------------------
// Fixed-point maps and solvers
// ---------------------------------------------------------------------------

/// A fixed-point map split into its unconstrained update and its constraint
/// projection: `step = project ∘ pre_update`. The solvers mix iterates in
/// pre-projection coordinates, so a map whose projection is the identity
/// behaves exactly like a plain fixed-point iteration.
pub trait FixedPointMap {
    fn pre_update(&self, a: &Tensor) -> Result<Tensor>;
    fn project(&self, p: &Tensor) -> Result<Tensor>;
}

/// The production abundance update.
pub struct AbundanceMap<'a> {
    pub layer: &'a EquilibriumLayer,
    pub y: &'a Tensor,
}

impl FixedPointMap for AbundanceMap<'_> {
    fn pre_update(&self, a: &Tensor) -> Result<Tensor> {
        let layer = self.layer;
        let recon = mode3_product(a, &layer.w)?;
        let g = gtheta_apply(&layer.gtheta, &recon, self.y)?;
        let grad_dir = mode3_product_adjoint(&g, &layer.w)?;
        let mut pre = a.clone();
        pre.axpy(-layer.eta, &grad_dir);
        soft_threshold(&pre, layer.threshold())
    }

    fn project(&self, p: &Tensor) -> Result<Tensor> {
        softmax_temp(p, self.layer.gamma)
    }
}

/// One full update `Softmax_γ(ST_{η·λ}(A − η·Gθ(A×₃W, Y)×₃Wᵀ))`.
pub fn equilibrium_step(a: &Tensor, y: &Tensor, layer: &EquilibriumLayer) -> Result<Tensor> {
    let map = AbundanceMap { layer, y };
    let pre = map.pre_update(a)?;
    if !pre.all_finite() {
        return Err(UnmixError::Solver {
            message: "non-finite pre-projection iterate in equilibrium step".into(),
            residuals: vec![],
        });
    }
    let out = map.project(&pre)?;
    if !out.all_finite() {
        return Err(UnmixError::Solver {
            message: "non-finite abundance iterate in equilibrium step".into(),
            residuals: vec![],
        });
    }
    Ok(out)
}

/// Forward-solver settings.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub k_max: usize,
    /// Relative-residual tolerance on consecutive feasible iterates.
    pub tol: f64,
    pub anderson_memory: usize,
    /// Ridge added to the normal system of the mixing weights, scaled by
    /// the mean residual energy so the regularization tracks the residual
    /// scale instead of drowning it near convergence.
    pub anderson_ridge: f64,
    /// Damping β of the mixed update (1 = undamped).
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            k_max: 10,
            tol: 1e-3,
            anderson_memory: 5,
            anderson_ridge: 1e-4,
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(UnmixError::Config("k_max must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(UnmixError::Config(format!(
                "solver tolerance must be >= 0, got {}",
                self.tol
            )));
        }
        if self.anderson_memory < 1 || self.anderson_memory > self.k_max {
            return Err(UnmixError::Config(format!(
                "anderson memory must be in [1, k_max], got {} with k_max {}",
                self.anderson_memory, self.k_max
            )));
        }
        if !(self.anderson_ridge >= 0.0) {
            return Err(UnmixError::Config("anderson ridge must be >= 0".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(UnmixError::Config(format!(
                "damping must be in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Picard,
    Anderson,
}

impl std::str::FromStr for SolveMode {
    type Err = UnmixError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picard" => Ok(SolveMode::Picard),
            "anderson" => Ok(SolveMode::Anderson),
            other => Err(UnmixError::Config(format!("unknown solve mode '{other}'"))),
        }
    }
}

/// Convergence record of one fixed-point solve.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub iterations: usize,
    /// `‖A(k) − A(k−1)‖_F / max(‖A(k−1)‖_F, 1e-12)` per iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl SolveTrace {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,residual")?;
        for (k, r) in self.residuals.iter().enumerate() {
            writeln!(out, "{},{}", k + 1, r)?;
        }
        Ok(())
    }
}

fn nonfinite(history: &[f64], what: &str) -> UnmixError {
    UnmixError::Solver {
        message: format!("non-finite {what} during fixed-point solve"),
        residuals: history.to_vec(),
    }
}

/// Iterate `project(pre_update(·))` to a fixed point.
///
/// Terminates when the relative residual between consecutive feasible
/// iterates drops below `cfg.tol` or after `cfg.k_max` iterations. Anderson
/// mode mixes the last `m` pre-projection iterates through a
/// ridge-regularized least-squares problem with damping `β`; the first
/// iteration is always a plain Picard step. Retained solver state (the
/// running iterates and the Anderson history) is charged to `ledger` when
/// one is supplied.
pub fn solve_fixed_point<M: FixedPointMap>(
    a0: &Tensor,
    map: &M,
    cfg: &SolverConfig,
    mode: SolveMode,
    mut ledger: Option<&mut MemoryLedger>,
) -> Result<(Tensor, SolveTrace)> {
    cfg.validate()?;
    let mut charged = 0usize;
    let charge = |l: &mut Option<&mut MemoryLedger>, delta: isize, charged: &mut usize| {
        if let Some(l) = l.as_deref_mut() {
            if delta >= 0 {
                l.retain(delta as usize);
                *charged += delta as usize;
            } else {
                l.release((-delta) as usize);
                *charged -= (-delta) as usize;
            }
        }
    };

    let mut p = map.pre_update(a0)?;
    if !p.all_finite() {
        return Err(nonfinite(&[], "pre-projection iterate"));
    }
    let mut a_prev = a0.clone();
    charge(&mut ledger, (p.len() + a_prev.len()) as isize, &mut charged);

    let mut hist: VecDeque<(Tensor, Tensor)> = VecDeque::new();
    let mut residuals: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut result = None;

    for k in 1..=cfg.k_max {
        let a = map.project(&p)?;
        if !a.all_finite() {
            return Err(nonfinite(&residuals, "abundance iterate"));
        }
        let denom = a_prev.frob_norm().max(1e-12);
        let resid = a.sub(&a_prev).frob_norm() / denom;
        residuals.push(resid);
        if resid < cfg.tol {
            converged = true;
            result = Some(a);
            break;
        }
        if k == cfg.k_max {
            result = Some(a);
            break;
        }

        let fx = map.pre_update(&a)?;
        if !fx.all_finite() {
            return Err(nonfinite(&residuals, "pre-projection iterate"));
        }

        match mode {
            SolveMode::Picard => {
                p = fx;
            }
            SolveMode::Anderson => {
                let g = fx.sub(&p);
                if hist.len() == cfg.anderson_memory {
                    let (op, og) = hist.pop_front().unwrap();
                    charge(&mut ledger, -((op.len() + og.len()) as isize), &mut charged);
                }
                charge(&mut ledger, 2 * p.len() as isize, &mut charged);
                hist.push_back((p.clone(), g));
                let m = hist.len();
                // mixing weights: α ∝ (GᵀG + ridge·I)⁻¹ 1, then normalized
                // to sum 1 (minimizes ‖Σ αᵢ gᵢ‖² + ridge‖α‖² on the affine
                // constraint); the ridge rides on the mean residual energy
                let mut gram = Matrix::zeros(m, m);
                for i in 0..m {
                    for j in i..m {
                        let v = hist[i].1.dot(&hist[j].1);
                        gram.set(i, j, v);
                        gram.set(j, i, v);
                    }
                }
                let trace: f64 = (0..m).map(|i| gram.at(i, i)).sum();
                let ridge = cfg.anderson_ridge * trace / m as f64;
                for i in 0..m {
                    let v = gram.at(i, i) + ridge;
                    gram.set(i, i, v);
                }
                let alpha_raw = least_squares_solve(&gram, &vec![1.0; m], 0.0)?;
                let s: f64 = alpha_raw.iter().sum();
                let mut mixed = Tensor::zeros(p.shape());
                if s.abs() < 1e-300 || !s.is_finite() {
                    // degenerate mixing system: fall back to the plain step
                    mixed = fx.clone();
                } else {
                    for (i, (pi, gi)) in hist.iter().enumerate() {
                        let ai = alpha_raw[i] / s;
                        mixed.axpy(ai, pi);
                        mixed.axpy(ai * cfg.damping, gi);
                    }
                }
                if !mixed.all_finite() {
                    return Err(nonfinite(&residuals, "anderson-mixed iterate"));
                }
                p = mixed;
            }
        }
        a_prev = a;
    }

    if let Some(l) = ledger.as_deref_mut() {
        l.release(charged);
    }
    let a = result.expect("loop always sets a result");
    Ok((
        a,
        SolveTrace {
            iterations: residuals.len(),
            residuals,
            converged,
        },
    ))
}

/// Solve the abundance fixed point for an observation.
pub fn solve_abundances(
    a0: &Tensor,
    y: &Tensor,
    layer: &EquilibriumLayer,
    cfg: &SolverConfig,
    mode: SolveMode,
) -> Result<(Tensor, SolveTrace)> {
    let map = AbundanceMap { layer, y };
    solve_fixed_point(a0, &map, cfg, mode, None)
}

// ---------------------------------------------------------------------------
// One-step tape: saved forward state and its VJP
// ---------------------------------------------------------------------------

/// Everything one backward pass through a single update needs. Unrolled
/// training retains one of these per layer; the implicit backward pass
/// rebuilds a single one at the fixed point, which is what keeps its memory
/// footprint independent of iteration count.
#[derive(Debug, Clone)]
pub struct StepSaved {
    pub a_in: Tensor,
    pub g: GSaved,
    /// Gθ output in cube layout (`[h, w, L]`).
    pub gout: Tensor,
    /// pre-threshold iterate `a − η·(Gθ(..)×₃Wᵀ)`
    pub pre: Tensor,
    /// step output (softmax of the thresholded iterate)
    pub a_out: Tensor,
}

impl StepSaved {
    pub fn scalar_count(&self) -> usize {
        self.a_in.len() + self.g.scalar_count() + self.gout.len() + self.pre.len() + self.a_out.len()
    }
}

/// Gradients of one update w.r.t. every learnable parameter.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub theta: GThetaOperator,
    pub w: Matrix,
    pub lambda_raw: f64,
}

impl LayerGrads {
    pub fn zeros_like(layer: &EquilibriumLayer) -> Result<Self> {
        Ok(LayerGrads {
            theta: GThetaOperator::zeros(layer.gtheta.hidden(), layer.gtheta.bands())?,
            w: Matrix::zeros(layer.w.rows(), layer.w.cols()),
            lambda_raw: 0.0,
        })
    }

    pub fn axpy(&mut self, alpha: f64, other: &LayerGrads) {
        let add = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += alpha * s;
            }
        };
        add(self.theta.conv1.weight.data_mut(), other.theta.conv1.weight.data());
        add(&mut self.theta.conv1.bias, &other.theta.conv1.bias);
        add(self.theta.att1.w1.data_mut(), other.theta.att1.w1.data());
        add(&mut self.theta.att1.b1, &other.theta.att1.b1);
        add(self.theta.att1.w2.data_mut(), other.theta.att1.w2.data());
        add(&mut self.theta.att1.b2, &other.theta.att1.b2);
        add(&mut self.theta.ln_gain, &other.theta.ln_gain);
        add(&mut self.theta.ln_offset, &other.theta.ln_offset);
        add(self.theta.conv2.weight.data_mut(), other.theta.conv2.weight.data());
        add(&mut self.theta.conv2.bias, &other.theta.conv2.bias);
        add(self.theta.att2.w1.data_mut(), other.theta.att2.w1.data());
        add(&mut self.theta.att2.b1, &other.theta.att2.b1);
        add(self.theta.att2.w2.data_mut(), other.theta.att2.w2.data());
        add(&mut self.theta.att2.b2, &other.theta.att2.b2);
        add(self.theta.head.weight.data_mut(), other.theta.head.weight.data());
        add(&mut self.theta.head.bias, &other.theta.head.bias);
        add(self.w.data_mut(), other.w.data());
        self.lambda_raw += alpha * other.lambda_raw;
    }
}

/// Run one update and keep everything its VJP needs.
pub fn build_step_saved(
    a: &Tensor,
    y: &Tensor,
    layer: &EquilibriumLayer,
) -> Result<StepSaved> {
    let recon = mode3_product(a, &layer.w)?;
    let (gout, g) = gtheta_apply_saved(&layer.gtheta, &recon, y)?;
    let grad_dir = mode3_product_adjoint(&gout, &layer.w)?;
    let mut pre = a.clone();
    pre.axpy(-layer.eta, &grad_dir);
    let st = soft_threshold(&pre, layer.threshold())?;
    let a_out = softmax_temp(&st, layer.gamma)?;
    if !a_out.all_finite() {
        return Err(UnmixError::Solver {
            message: "non-finite step output while building saved state".into(),
            residuals: vec![],
        });
    }
    Ok(StepSaved {
        a_in: a.clone(),
        g,
        gout,
        pre,
        a_out,
    })
}

/// VJP of one update at a saved forward state: given the output cotangent,
/// produce the input cotangent and (optionally) all parameter cotangents.
///
/// `W` receives contributions from both of its occurrences — inside the
/// reconstruction fed to `Gθ` and in the `×₃Wᵀ` back-projection. The λ
/// cotangent flows through the soft-threshold level and the softplus
/// reparameterization.
pub fn step_backward(
    saved: &StepSaved,
    layer: &EquilibriumLayer,
    out_bar: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<LayerGrads>)> {
    // softmax
    let st_bar = softmax_temp_vjp(&saved.a_out, layer.gamma, out_bar);
    // soft threshold (t = η·softplus(λ_raw))
    let (pre_bar, t_bar) = soft_threshold_vjp(&saved.pre, layer.threshold(), &st_bar);

    // pre = a − η·grad_dir
    let mut a_bar = pre_bar.clone();
    let grad_dir_bar = pre_bar.scaled(-layer.eta);

    // grad_dir = mode3_product_adjoint(gout, W)
    let gout_bar = mode3_product(&grad_dir_bar, &layer.w)?;
    // Gθ
    let (recon_bar, theta_grads) =
        gtheta_backward(&layer.gtheta, &saved.g, &gout_bar, want_params)?;
    // recon = mode3_product(a, W)
    a_bar.axpy(1.0, &mode3_product_adjoint(&recon_bar, &layer.w)?);

    let grads = if want_params {
        let mut w_bar = mode3_weight_vjp(&recon_bar, &saved.a_in)?;
        // W̄[l,r] += Σ_p gout[p,l] · grad_dir_bar[p,r]
        let w_bar2 = mode3_weight_vjp(&saved.gout, &grad_dir_bar)?;
        for (d, s) in w_bar.data_mut().iter_mut().zip(w_bar2.data().iter()) {
            *d += s;
        }
        let lambda_raw_bar = t_bar * layer.eta * softplus_deriv(layer.lambda_raw);
        Some(LayerGrads {
            theta: theta_grads.expect("requested parameter cotangents"),
            w: w_bar,
            lambda_raw: lambda_raw_bar,
        })
    } else {
        None
    };
    Ok((a_bar, grads))
}
