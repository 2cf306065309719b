//! Differentiable primitives for the equilibrium operator.
//!
//! Each primitive is a pure forward function paired with a hand-derived
//! vector-Jacobian product. There is no general tape: the operator graph is
//! static, so callers save exactly the intermediates each VJP needs and
//! replay the chain in reverse by hand. Every VJP here is validated against
//! central finite differences in the tests below.
//!
//! Feature volumes are `[C, L, h, w]` (channel, spectral, spatial) and image
//! planes are `[C, h, w]`; the abundance/image tensors handled by
//! `softmax_temp`/`soft_threshold` keep the crate-wide `[h, w, last]` layout.

use crate::error::{Result, UnmixError};
use crate::tensor::{axpy, dot, Matrix, Tensor};

// ---------------------------------------------------------------------------
// Elementwise maps
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// ReLU cotangent from the *output* (output > 0 iff input > 0; the kink at 0
/// takes derivative 0).
pub fn relu_vjp(out: &Tensor, gbar: &Tensor) -> Tensor {
    debug_assert_eq!(out.shape(), gbar.shape());
    let mut xbar = gbar.clone();
    for (g, o) in xbar.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
    xbar
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

/// Sigmoid cotangent from the output: s·(1−s)·ḡ.
pub fn sigmoid_vjp(out: &Tensor, gbar: &Tensor) -> Tensor {
    debug_assert_eq!(out.shape(), gbar.shape());
    let mut xbar = gbar.clone();
    for (g, s) in xbar.data_mut().iter_mut().zip(out.data()) {
        *g *= s * (1.0 - s);
    }
    xbar
}

// ---------------------------------------------------------------------------
// Soft threshold
// ---------------------------------------------------------------------------

/// Elementwise `sign(x)·max(|x|−t, 0)`.
pub fn soft_threshold(x: &Tensor, t: f64) -> Result<Tensor> {
    if !(t >= 0.0) {
        return Err(UnmixError::Domain(format!(
            "soft threshold requires t >= 0, got {t}"
        )));
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = if *v > t {
            *v - t
        } else if *v < -t {
            *v + t
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Cotangents of [`soft_threshold`] w.r.t. the tensor and the threshold.
/// The derivative at the kink `|x| = t` is taken as 0 (minimum-norm
/// subgradient), which keeps the update a contraction near sparse points.
pub fn soft_threshold_vjp(x: &Tensor, t: f64, gbar: &Tensor) -> (Tensor, f64) {
    debug_assert_eq!(x.shape(), gbar.shape());
    let mut xbar = gbar.clone();
    let mut tbar = 0.0;
    for (g, &v) in xbar.data_mut().iter_mut().zip(x.data()) {
        if v > t {
            tbar -= *g;
        } else if v < -t {
            tbar += *g;
        } else {
            *g = 0.0;
        }
    }
    (xbar, tbar)
}

// ---------------------------------------------------------------------------
// Tempered softmax over the last axis
// ---------------------------------------------------------------------------

/// Per-pixel softmax of `γ·x` over the last axis, max-stabilized. Outputs
/// are strictly positive and sum to 1.
pub fn softmax_temp(x: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(UnmixError::Domain(format!(
            "softmax temperature must be > 0, got {gamma}"
        )));
    }
    let r = *x.shape().last().ok_or_else(|| {
        UnmixError::dimension("softmax_temp", "zero-rank tensor")
    })?;
    let mut out = x.clone();
    for pix in out.data_mut().chunks_mut(r) {
        let m = pix.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in pix.iter_mut() {
            *v = (gamma * (*v - m)).exp();
            z += *v;
        }
        for v in pix.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Softmax cotangent from the output: `x̄ = γ·s⊙(ḡ − ⟨ḡ, s⟩)` per pixel.
pub fn softmax_temp_vjp(out: &Tensor, gamma: f64, gbar: &Tensor) -> Tensor {
    debug_assert_eq!(out.shape(), gbar.shape());
    let r = *out.shape().last().unwrap();
    let mut xbar = gbar.clone();
    for (pix_bar, pix_s) in xbar.data_mut().chunks_mut(r).zip(out.data().chunks(r)) {
        let inner = dot(pix_bar, pix_s);
        for (b, &s) in pix_bar.iter_mut().zip(pix_s.iter()) {
            *b = gamma * s * (*b - inner);
        }
    }
    xbar
}

// ---------------------------------------------------------------------------
// Dense (linear) layer on plain vectors — used by the attention MLP
// ---------------------------------------------------------------------------

/// `y = W x + b`.
pub fn linear(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), b.len());
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b.iter()) {
        *yi += bi;
    }
    y
}

/// Cotangents of [`linear`]: `(x̄, W̄, b̄) = (Wᵀȳ, ȳ xᵀ, ȳ)`.
pub fn linear_vjp(w: &Matrix, x: &[f64], ybar: &[f64]) -> (Vec<f64>, Matrix, Vec<f64>) {
    let xbar = w.matvec_t(ybar);
    let mut wbar = Matrix::zeros(w.rows(), w.cols());
    for (r, &yb) in ybar.iter().enumerate() {
        axpy(yb, x, wbar.row_mut(r));
    }
    (xbar, wbar, ybar.to_vec())
}

// ---------------------------------------------------------------------------
// 3-D convolution (3x3x3 kernel, stride 1, zero pad 1)
// ---------------------------------------------------------------------------

/// Parameters of a 3x3x3 convolution; also used as its gradient container.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// `[C_out, C_in, 3, 3, 3]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Conv3d {
            weight: Tensor::zeros(&[c_out, c_in, 3, 3, 3]),
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn shifted_range(extent: usize, d: usize) -> (usize, usize) {
    // output indices whose source index (idx + d - 1) stays inside [0, extent)
    let lo = 1usize.saturating_sub(d);
    let hi = (extent + 1).saturating_sub(d).min(extent);
    (lo, hi)
}

/// Cross-correlation of `x` (`[C_in, L, h, w]`) with a 3x3x3 kernel, zero
/// padding 1 on every axis, so output extents equal input extents.
pub fn conv3d_forward(x: &Tensor, p: &Conv3d) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[0] != p.c_in() {
        return Err(UnmixError::dimension(
            "conv3d_forward",
            format!("input {:?} vs kernel {:?}", s, p.weight.shape()),
        ));
    }
    let (cin, l, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = p.c_out();
    let mut out = Tensor::zeros(&[cout, l, h, w]);

    for co in 0..cout {
        let base_o = co * l * h * w;
        out.data_mut()[base_o..base_o + l * h * w].fill(p.bias[co]);
        for ci in 0..cin {
            let base_x = ci * l * h * w;
            for dl in 0..3 {
                let (l_lo, l_hi) = shifted_range(l, dl);
                for di in 0..3 {
                    let (i_lo, i_hi) = shifted_range(h, di);
                    for dj in 0..3 {
                        let wv = p.weight.data()[(((co * cin + ci) * 3 + dl) * 3 + di) * 3 + dj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (j_lo, j_hi) = shifted_range(w, dj);
                        if j_lo >= j_hi {
                            continue;
                        }
                        for lz in l_lo..l_hi {
                            let ls = lz + dl - 1;
                            for iz in i_lo..i_hi {
                                let is = iz + di - 1;
                                let ro = base_o + (lz * h + iz) * w;
                                let rx = base_x + (ls * h + is) * w + (j_lo + dj - 1);
                                let src: Vec<f64> =
                                    x.data()[rx..rx + (j_hi - j_lo)].to_vec();
                                axpy(wv, &src, &mut out.data_mut()[ro + j_lo..ro + j_hi]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact cotangents of [`conv3d_forward`]: `(x̄, {W̄, b̄})`.
pub fn conv3d_vjp(x: &Tensor, p: &Conv3d, gbar: &Tensor) -> Result<(Tensor, Conv3d)> {
    let s = x.shape();
    let expect = [p.c_out(), s[1], s[2], s[3]];
    if gbar.shape() != expect {
        return Err(UnmixError::dimension(
            "conv3d_vjp",
            format!("cotangent {:?}, expected {:?}", gbar.shape(), expect),
        ));
    }
    let (cin, l, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = p.c_out();
    let mut xbar = Tensor::zeros(s);
    let mut grads = Conv3d::zeros(cout, cin);

    for co in 0..cout {
        let base_g = co * l * h * w;
        grads.bias[co] = gbar.data()[base_g..base_g + l * h * w].iter().sum();
        for ci in 0..cin {
            let base_x = ci * l * h * w;
            for dl in 0..3 {
                let (l_lo, l_hi) = shifted_range(l, dl);
                for di in 0..3 {
                    let (i_lo, i_hi) = shifted_range(h, di);
                    for dj in 0..3 {
                        let (j_lo, j_hi) = shifted_range(w, dj);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let widx = (((co * cin + ci) * 3 + dl) * 3 + di) * 3 + dj;
                        let wv = p.weight.data()[widx];
                        let mut wgrad = 0.0;
                        for lz in l_lo..l_hi {
                            let ls = lz + dl - 1;
                            for iz in i_lo..i_hi {
                                let is = iz + di - 1;
                                let rg = base_g + (lz * h + iz) * w + j_lo;
                                let rx = base_x + (ls * h + is) * w + (j_lo + dj - 1);
                                let n = j_hi - j_lo;
                                let grow: Vec<f64> = gbar.data()[rg..rg + n].to_vec();
                                wgrad += dot(&grow, &x.data()[rx..rx + n]);
                                if wv != 0.0 {
                                    axpy(wv, &grow, &mut xbar.data_mut()[rx..rx + n]);
                                }
                            }
                        }
                        grads.weight.data_mut()[widx] = wgrad;
                    }
                }
            }
        }
    }
    Ok((xbar, grads))
}

// ---------------------------------------------------------------------------
// 2-D convolution (3x3 kernel, stride 1, zero pad 1)
// ---------------------------------------------------------------------------

/// Parameters of a 3x3 convolution; also used as its gradient container.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[C_out, C_in, 3, 3]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[c_out, c_in, 3, 3]),
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Cross-correlation of `x` (`[C_in, h, w]`) with a 3x3 kernel, zero pad 1.
pub fn conv2d_forward(x: &Tensor, p: &Conv2d) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] != p.c_in() {
        return Err(UnmixError::dimension(
            "conv2d_forward",
            format!("input {:?} vs kernel {:?}", s, p.weight.shape()),
        ));
    }
    let (cin, h, w) = (s[0], s[1], s[2]);
    let cout = p.c_out();
    let mut out = Tensor::zeros(&[cout, h, w]);

    for co in 0..cout {
        let base_o = co * h * w;
        out.data_mut()[base_o..base_o + h * w].fill(p.bias[co]);
        for ci in 0..cin {
            let base_x = ci * h * w;
            for di in 0..3 {
                let (i_lo, i_hi) = shifted_range(h, di);
                for dj in 0..3 {
                    let wv = p.weight.data()[((co * cin + ci) * 3 + di) * 3 + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j_lo, j_hi) = shifted_range(w, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for iz in i_lo..i_hi {
                        let is = iz + di - 1;
                        let ro = base_o + iz * w;
                        let rx = base_x + is * w + (j_lo + dj - 1);
                        let src: Vec<f64> = x.data()[rx..rx + (j_hi - j_lo)].to_vec();
                        axpy(wv, &src, &mut out.data_mut()[ro + j_lo..ro + j_hi]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact cotangents of [`conv2d_forward`]: `(x̄, {W̄, b̄})`.
pub fn conv2d_vjp(x: &Tensor, p: &Conv2d, gbar: &Tensor) -> Result<(Tensor, Conv2d)> {
    let s = x.shape();
    let expect = [p.c_out(), s[1], s[2]];
    if gbar.shape() != expect {
        return Err(UnmixError::dimension(
            "conv2d_vjp",
            format!("cotangent {:?}, expected {:?}", gbar.shape(), expect),
        ));
    }
    let (cin, h, w) = (s[0], s[1], s[2]);
    let cout = p.c_out();
    let mut xbar = Tensor::zeros(s);
    let mut grads = Conv2d::zeros(cout, cin);

    for co in 0..cout {
        let base_g = co * h * w;
        grads.bias[co] = gbar.data()[base_g..base_g + h * w].iter().sum();
        for ci in 0..cin {
            let base_x = ci * h * w;
            for di in 0..3 {
                let (i_lo, i_hi) = shifted_range(h, di);
                for dj in 0..3 {
                    let (j_lo, j_hi) = shifted_range(w, dj);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let widx = ((co * cin + ci) * 3 + di) * 3 + dj;
                    let wv = p.weight.data()[widx];
                    let mut wgrad = 0.0;
                    for iz in i_lo..i_hi {
                        let is = iz + di - 1;
                        let rg = base_g + iz * w + j_lo;
                        let rx = base_x + is * w + (j_lo + dj - 1);
                        let n = j_hi - j_lo;
                        let grow: Vec<f64> = gbar.data()[rg..rg + n].to_vec();
                        wgrad += dot(&grow, &x.data()[rx..rx + n]);
                        if wv != 0.0 {
                            axpy(wv, &grow, &mut xbar.data_mut()[rx..rx + n]);
                        }
                    }
                    grads.weight.data_mut()[widx] = wgrad;
                }
            }
        }
    }
    Ok((xbar, grads))
}

// ---------------------------------------------------------------------------
// Channel attention (squeeze-and-gate over the channel axis)
// ---------------------------------------------------------------------------

/// Shared two-layer MLP of a channel-attention gate; also its gradient
/// container. Hidden width is `C / r`.
#[derive(Debug, Clone)]
pub struct AttentionMlp {
    /// `[C/r, C]`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `[C, C/r]`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl AttentionMlp {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(UnmixError::Config(format!(
                "channel attention needs channels divisible by ratio, got {channels} / {ratio}"
            )));
        }
        let hidden = channels / ratio;
        Ok(AttentionMlp {
            w1: Matrix::zeros(hidden, channels),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(channels, hidden),
            b2: vec![0.0; channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.cols()
    }
}

/// Intermediates needed by the attention VJP.
#[derive(Debug, Clone)]
pub struct AttentionSaved {
    pub avg: Vec<f64>,
    pub maxval: Vec<f64>,
    /// flat index (within one channel slab) of the first maximum
    pub argmax: Vec<usize>,
    pub pre1_avg: Vec<f64>,
    pub pre1_max: Vec<f64>,
    pub hid_avg: Vec<f64>,
    pub hid_max: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Channel gate: `s = σ(MLP(avgpool(x)) + MLP(maxpool(x)))`, `out[c,·] =
/// s[c]·x[c,·]`, pooling over all non-channel axes of a `[C, L, h, w]`
/// volume.
pub fn channel_attention_forward(
    x: &Tensor,
    p: &AttentionMlp,
) -> Result<(Tensor, AttentionSaved)> {
    let s = x.shape();
    if s.len() != 4 || s[0] != p.channels() {
        return Err(UnmixError::dimension(
            "channel_attention",
            format!("input {:?} vs mlp over {} channels", s, p.channels()),
        ));
    }
    let c = s[0];
    let slab = s[1] * s[2] * s[3];
    let mut avg = vec![0.0; c];
    let mut maxval = vec![f64::NEG_INFINITY; c];
    let mut argmax = vec![0usize; c];
    for ch in 0..c {
        let xs = &x.data()[ch * slab..(ch + 1) * slab];
        avg[ch] = xs.iter().sum::<f64>() / slab as f64;
        for (i, &v) in xs.iter().enumerate() {
            if v > maxval[ch] {
                maxval[ch] = v;
                argmax[ch] = i;
            }
        }
    }

    let pre1_avg = linear(&p.w1, &p.b1, &avg);
    let hid_avg: Vec<f64> = pre1_avg.iter().map(|&v| v.max(0.0)).collect();
    let out_avg = linear(&p.w2, &p.b2, &hid_avg);

    let pre1_max = linear(&p.w1, &p.b1, &maxval);
    let hid_max: Vec<f64> = pre1_max.iter().map(|&v| v.max(0.0)).collect();
    let out_max = linear(&p.w2, &p.b2, &hid_max);

    let gate: Vec<f64> = out_avg
        .iter()
        .zip(out_max.iter())
        .map(|(a, m)| sigmoid_scalar(a + m))
        .collect();

    let mut out = x.clone();
    for ch in 0..c {
        let g = gate[ch];
        for v in &mut out.data_mut()[ch * slab..(ch + 1) * slab] {
            *v *= g;
        }
    }
    Ok((
        out,
        AttentionSaved {
            avg,
            maxval,
            argmax,
            pre1_avg,
            pre1_max,
            hid_avg,
            hid_max,
            gate,
        },
    ))
}

/// Cotangents of [`channel_attention_forward`]. Maxpool routes its gradient
/// to the first maximal element in scan order.
pub fn channel_attention_vjp(
    x: &Tensor,
    p: &AttentionMlp,
    saved: &AttentionSaved,
    gbar: &Tensor,
) -> Result<(Tensor, AttentionMlp)> {
    if gbar.shape() != x.shape() {
        return Err(UnmixError::dimension(
            "channel_attention_vjp",
            format!("cotangent {:?} vs input {:?}", gbar.shape(), x.shape()),
        ));
    }
    let c = x.shape()[0];
    let slab = x.len() / c;

    // gate path: s̄[c] = Σ ḡ[c,·]·x[c,·]; product path: x̄ = s[c]·ḡ.
    let mut xbar = gbar.clone();
    let mut sbar = vec![0.0; c];
    for ch in 0..c {
        let gs = &gbar.data()[ch * slab..(ch + 1) * slab];
        let xs = &x.data()[ch * slab..(ch + 1) * slab];
        sbar[ch] = dot(gs, xs);
        let g = saved.gate[ch];
        for v in &mut xbar.data_mut()[ch * slab..(ch + 1) * slab] {
            *v *= g;
        }
    }

    // through the sigmoid
    let zbar: Vec<f64> = sbar
        .iter()
        .zip(saved.gate.iter())
        .map(|(&sb, &g)| sb * g * (1.0 - g))
        .collect();

    let mut grads = AttentionMlp {
        w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
        b1: vec![0.0; p.b1.len()],
        w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
        b2: vec![0.0; p.b2.len()],
    };

    let pooled_bar = |pre1: &[f64], hid: &[f64], pooled: &[f64], grads: &mut AttentionMlp| {
        let (hbar, w2bar, b2bar) = linear_vjp(&p.w2, hid, &zbar);
        let hbar: Vec<f64> = hbar
            .iter()
            .zip(pre1.iter())
            .map(|(&hb, &pre)| if pre > 0.0 { hb } else { 0.0 })
            .collect();
        let (pbar, w1bar, b1bar) = linear_vjp(&p.w1, pooled, &hbar);
        for (a, b) in grads.w2.data_mut().iter_mut().zip(w2bar.data()) {
            *a += b;
        }
        for (a, b) in grads.b2.iter_mut().zip(b2bar.iter()) {
            *a += b;
        }
        for (a, b) in grads.w1.data_mut().iter_mut().zip(w1bar.data()) {
            *a += b;
        }
        for (a, b) in grads.b1.iter_mut().zip(b1bar.iter()) {
            *a += b;
        }
        pbar
    };

    let avg_bar = pooled_bar(&saved.pre1_avg, &saved.hid_avg, &saved.avg, &mut grads);
    let max_bar = pooled_bar(&saved.pre1_max, &saved.hid_max, &saved.maxval, &mut grads);

    for ch in 0..c {
        let spread = avg_bar[ch] / slab as f64;
        let xb = &mut xbar.data_mut()[ch * slab..(ch + 1) * slab];
        for v in xb.iter_mut() {
            *v += spread;
        }
        xb[saved.argmax[ch]] += max_bar[ch];
    }
    Ok((xbar, grads))
}

// ---------------------------------------------------------------------------
// Layer norm over the (channel, spectral) group at each spatial position
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Intermediates needed by the layer-norm VJP.
#[derive(Debug, Clone)]
pub struct LayerNormSaved {
    /// normalized values, same shape as the input
    pub xhat: Tensor,
    /// 1/σ per spatial position, `[h·w]`
    pub inv_std: Vec<f64>,
}

/// At each spatial position of a `[C, L, h, w]` volume, normalize the
/// `C·L` fiber to zero mean / unit variance (ε = 1e-5), then apply a
/// per-channel affine `gain[c]·x̂ + offset[c]`.
pub fn layer_norm_forward(
    x: &Tensor,
    gain: &[f64],
    offset: &[f64],
) -> Result<(Tensor, LayerNormSaved)> {
    let s = x.shape();
    if s.len() != 4 || gain.len() != s[0] || offset.len() != s[0] {
        return Err(UnmixError::dimension(
            "layer_norm",
            format!("input {:?}, gain {}, offset {}", s, gain.len(), offset.len()),
        ));
    }
    let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
    let group = c * l;
    if group < 2 {
        return Err(UnmixError::Config(
            "layer norm group must have at least 2 elements".into(),
        ));
    }
    let hw = h * w;
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = vec![0.0; hw];
    let mut out = Tensor::zeros(s);

    for pos in 0..hw {
        let mut mean = 0.0;
        for f in 0..group {
            mean += x.data()[f * hw + pos];
        }
        mean /= group as f64;
        let mut var = 0.0;
        for f in 0..group {
            let d = x.data()[f * hw + pos] - mean;
            var += d * d;
        }
        var /= group as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[pos] = istd;
        for f in 0..group {
            let xh = (x.data()[f * hw + pos] - mean) * istd;
            xhat.data_mut()[f * hw + pos] = xh;
            let ch = f / l;
            out.data_mut()[f * hw + pos] = gain[ch] * xh + offset[ch];
        }
    }
    Ok((out, LayerNormSaved { xhat, inv_std }))
}

/// Cotangents of [`layer_norm_forward`]: `(x̄, gain_bar, offset_bar)`.
pub fn layer_norm_vjp(
    saved: &LayerNormSaved,
    gain: &[f64],
    gbar: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let s = saved.xhat.shape();
    if gbar.shape() != s {
        return Err(UnmixError::dimension(
            "layer_norm_vjp",
            format!("cotangent {:?} vs saved {:?}", gbar.shape(), s),
        ));
    }
    let (c, l, h, w) = (s[0], s[1], s[2], s[3]);
    let group = c * l;
    let hw = h * w;
    let mut xbar = Tensor::zeros(s);
    let mut gain_bar = vec![0.0; c];
    let mut offset_bar = vec![0.0; c];

    for pos in 0..hw {
        // d = ḡ·gain (per fiber element), then the two centering corrections
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for f in 0..group {
            let ch = f / l;
            let gb = gbar.data()[f * hw + pos];
            let xh = saved.xhat.data()[f * hw + pos];
            let d = gb * gain[ch];
            mean_d += d;
            mean_dx += d * xh;
            gain_bar[ch] += gb * xh;
            offset_bar[ch] += gb;
        }
        mean_d /= group as f64;
        mean_dx /= group as f64;
        let istd = saved.inv_std[pos];
        for f in 0..group {
            let ch = f / l;
            let gb = gbar.data()[f * hw + pos];
            let xh = saved.xhat.data()[f * hw + pos];
            let d = gb * gain[ch];
            xbar.data_mut()[f * hw + pos] = istd * (d - mean_d - xh * mean_dx);
        }
    }
    Ok((xbar, gain_bar, offset_bar))
}

// ---------------------------------------------------------------------------
// Layout plumbing: permutations and channel stacking
// ---------------------------------------------------------------------------

/// `[h, w, L]` → `[L, h, w]`.
pub fn permute_hwl_to_lhw(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(UnmixError::dimension("permute_hwl_to_lhw", "rank != 3"));
    }
    let (h, w, l) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[l, h, w]);
    for (pix, chunk) in x.data().chunks(l).enumerate() {
        for (lz, &v) in chunk.iter().enumerate() {
            out.data_mut()[lz * h * w + pix] = v;
        }
    }
    Ok(out)
}

/// `[L, h, w]` → `[h, w, L]`. Inverse (and adjoint) of
/// [`permute_hwl_to_lhw`].
pub fn permute_lhw_to_hwl(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(UnmixError::dimension("permute_lhw_to_hwl", "rank != 3"));
    }
    let (l, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[h, w, l]);
    for lz in 0..l {
        let slab = &x.data()[lz * h * w..(lz + 1) * h * w];
        for (pix, &v) in slab.iter().enumerate() {
            out.data_mut()[pix * l + lz] = v;
        }
    }
    Ok(out)
}

/// Stack two `[L, h, w]` volumes into `[2, L, h, w]`.
pub fn stack2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(UnmixError::dimension(
            "stack2",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut shape = vec![2];
    shape.extend_from_slice(a.shape());
    let mut data = Vec::with_capacity(2 * a.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

/// Adjoint of [`stack2`]: split `[2, L, h, w]` back into two volumes.
pub fn split2(g: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = g.shape();
    if s.len() != 4 || s[0] != 2 {
        return Err(UnmixError::dimension("split2", format!("{:?}", s)));
    }
    let inner = &s[1..];
    let half = g.len() / 2;
    Ok((
        Tensor::from_vec(inner, g.data()[..half].to_vec())?,
        Tensor::from_vec(inner, g.data()[half..].to_vec())?,
    ))
}

// ---------------------------------------------------------------------------
// Finite-difference harness
// ---------------------------------------------------------------------------

/// Central-difference check of a VJP: compares `⟨vjp, direction⟩` with the
/// derivative of `s ↦ ⟨cotangent, f(point + s·direction)⟩` at 0 and returns
/// the relative error `|⟨vjp,d⟩ − cd| / (|cd| + 1e-12)`.
pub fn fd_check<F>(
    f: F,
    point: &[f64],
    direction: &[f64],
    cotangent: &[f64],
    vjp: &[f64],
    step: f64,
) -> f64
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let probe = |s: f64| -> f64 {
        let shifted: Vec<f64> = point
            .iter()
            .zip(direction.iter())
            .map(|(p, d)| p + s * d)
            .collect();
        dot(&f(&shifted), cotangent)
    };
    let cd = (probe(step) - probe(-step)) / (2.0 * step);
    let analytic = dot(vjp, direction);
    (analytic - cd).abs() / (cd.abs() + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn rand_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        t
    }

    fn rand_vec(n: usize, rng: &mut RngState) -> Vec<f64> {
        (0..n).map(|_| rng.next_uniform(-1.0, 1.0)).collect()
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_vec(r, c, rand_vec(r * c, rng)).unwrap()
    }

    // -- convolutions --------------------------------------------------

    #[test]
    fn conv3d_delta_kernel_selects_channel() {
        let mut rng = RngState::new(1);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let mut p = Conv3d::zeros(1, 2);
        // center tap of in-channel 1 → out-channel 0
        let idx = (((0 * 2 + 1) * 3 + 1) * 3 + 1) * 3 + 1;
        p.weight.data_mut()[idx] = 1.0;
        let out = conv3d_forward(&x, &p).unwrap();
        let chan1 = &x.data()[3 * 4 * 4..2 * 3 * 4 * 4];
        for (o, e) in out.data().iter().zip(chan1.iter()) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn conv3d_zero_weights_gives_bias() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7);
        let mut p = Conv3d::zeros(2, 1);
        p.bias = vec![-1.5, 2.5];
        let out = conv3d_forward(&x, &p).unwrap();
        assert!(out.data()[..18].iter().all(|&v| v == -1.5));
        assert!(out.data()[18..].iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv3d_matches_naive_loop() {
        let mut rng = RngState::new(2);
        let x = rand_tensor(&[2, 4, 5, 5], &mut rng);
        let mut p = Conv3d::zeros(3, 2);
        for v in p.weight.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        p.bias = rand_vec(3, &mut rng);
        let out = conv3d_forward(&x, &p).unwrap();
        for co in 0..3 {
            for l in 0..4usize {
                for i in 0..5usize {
                    for j in 0..5usize {
                        let mut s = p.bias[co];
                        for ci in 0..2 {
                            for dl in 0..3usize {
                                for di in 0..3usize {
                                    for dj in 0..3usize {
                                        let (ls, is, js) = (
                                            l as isize + dl as isize - 1,
                                            i as isize + di as isize - 1,
                                            j as isize + dj as isize - 1,
                                        );
                                        if ls < 0 || is < 0 || js < 0
                                            || ls >= 4 || is >= 5 || js >= 5
                                        {
                                            continue;
                                        }
                                        let widx =
                                            (((co * 2 + ci) * 3 + dl) * 3 + di) * 3 + dj;
                                        s += p.weight.data()[widx]
                                            * x.at4(ci, ls as usize, is as usize, js as usize);
                                    }
                                }
                            }
                        }
                        assert!(
                            (out.at4(co, l, i, j) - s).abs() < 1e-12,
                            "({co},{l},{i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv3d_repeat_eval_bit_identical() {
        let mut rng = RngState::new(3);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let mut p = Conv3d::zeros(2, 2);
        for v in p.weight.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        let a = conv3d_forward(&x, &p).unwrap();
        let b = conv3d_forward(&x, &p).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn conv3d_vjp_zero_cotangent() {
        let mut rng = RngState::new(4);
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let mut p = Conv3d::zeros(1, 1);
        for v in p.weight.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        let (xbar, grads) = conv3d_vjp(&x, &p, &Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert!(xbar.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_vjp_linear_in_cotangent() {
        let mut rng = RngState::new(5);
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let mut p = Conv3d::zeros(2, 1);
        for v in p.weight.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        let g = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let (x1, p1) = conv3d_vjp(&x, &p, &g).unwrap();
        let (x2, p2) = conv3d_vjp(&x, &p, &g.scaled(2.0)).unwrap();
        for (a, b) in x1.data().iter().zip(x2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in p1.weight.data().iter().zip(p2.weight.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_fd_check_input_and_weights() {
        let mut rng = RngState::new(6);
        for trial in 0..20u64 {
            let mut rng_t = RngState::with_stream(6, trial);
            let x = rand_tensor(&[1, 2, 3, 3], &mut rng_t);
            let mut p = Conv3d::zeros(2, 1);
            for v in p.weight.data_mut() {
                *v = rng_t.next_uniform(-1.0, 1.0);
            }
            p.bias = rand_vec(2, &mut rng_t);
            let cot = rand_tensor(&[2, 2, 3, 3], &mut rng_t);
            let (xbar, grads) = conv3d_vjp(&x, &p, &cot).unwrap();

            // input path
            let dir = rand_vec(x.len(), &mut rng);
            let px = p.clone();
            let shape = x.shape().to_vec();
            let err = fd_check(
                |pt| {
                    let t = Tensor::from_vec(&shape, pt.to_vec()).unwrap();
                    conv3d_forward(&t, &px).unwrap().into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "input fd err {err} (trial {trial})");

            // weight path
            let wdir = rand_vec(p.weight.len(), &mut rng);
            let xc = x.clone();
            let (bias, wshape) = (p.bias.clone(), p.weight.shape().to_vec());
            let err = fd_check(
                |pt| {
                    let pp = Conv3d {
                        weight: Tensor::from_vec(&wshape, pt.to_vec()).unwrap(),
                        bias: bias.clone(),
                    };
                    conv3d_forward(&xc, &pp).unwrap().into_data()
                },
                p.weight.data(),
                &wdir,
                cot.data(),
                grads.weight.data(),
                1e-5,
            );
            assert!(err < 1e-6, "weight fd err {err} (trial {trial})");
        }
    }

    #[test]
    fn conv2d_delta_kernel_and_bias() {
        let mut rng = RngState::new(7);
        let x = rand_tensor(&[3, 4, 4], &mut rng);
        let mut p = Conv2d::zeros(1, 3);
        p.weight.data_mut()[((0 * 3 + 2) * 3 + 1) * 3 + 1] = 1.0; // center tap, channel 2
        let out = conv2d_forward(&x, &p).unwrap();
        for (o, e) in out.data().iter().zip(&x.data()[2 * 16..3 * 16]) {
            assert!((o - e).abs() < 1e-15);
        }

        let pz = Conv2d {
            weight: Tensor::zeros(&[1, 3, 3, 3]),
            bias: vec![4.25],
        };
        let out = conv2d_forward(&x, &pz).unwrap();
        assert!(out.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn conv2d_fd_check() {
        let mut rng = RngState::new(8);
        for trial in 0..20u64 {
            let mut rng_t = RngState::with_stream(8, trial);
            let x = rand_tensor(&[2, 4, 3], &mut rng_t);
            let mut p = Conv2d::zeros(2, 2);
            for v in p.weight.data_mut() {
                *v = rng_t.next_uniform(-1.0, 1.0);
            }
            p.bias = rand_vec(2, &mut rng_t);
            let cot = rand_tensor(&[2, 4, 3], &mut rng_t);
            let (xbar, grads) = conv2d_vjp(&x, &p, &cot).unwrap();

            let dir = rand_vec(x.len(), &mut rng);
            let px = p.clone();
            let shape = x.shape().to_vec();
            let err = fd_check(
                |pt| {
                    let t = Tensor::from_vec(&shape, pt.to_vec()).unwrap();
                    conv2d_forward(&t, &px).unwrap().into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "input fd err {err}");

            let wdir = rand_vec(p.weight.len(), &mut rng);
            let xc = x.clone();
            let (bias, wshape) = (p.bias.clone(), p.weight.shape().to_vec());
            let err = fd_check(
                |pt| {
                    let pp = Conv2d {
                        weight: Tensor::from_vec(&wshape, pt.to_vec()).unwrap(),
                        bias: bias.clone(),
                    };
                    conv2d_forward(&xc, &pp).unwrap().into_data()
                },
                p.weight.data(),
                &wdir,
                cot.data(),
                grads.weight.data(),
                1e-5,
            );
            assert!(err < 1e-6, "weight fd err {err}");
        }
    }

    // -- channel attention ----------------------------------------------

    #[test]
    fn attention_zero_mlp_halves_input() {
        let mut rng = RngState::new(9);
        let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let p = AttentionMlp::zeros(4, 4).unwrap();
        let (out, saved) = channel_attention_forward(&x, &p).unwrap();
        assert!(saved.gate.iter().all(|&g| (g - 0.5).abs() < 1e-15));
        for (o, e) in out.data().iter().zip(x.data()) {
            assert!((o - 0.5 * e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_constant_channels_equal_pools() {
        let mut x = Tensor::zeros(&[2, 2, 2, 2]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = if i < 8 { 0.3 } else { -0.9 };
        }
        let mut rng = RngState::new(10);
        let mut p = AttentionMlp::zeros(2, 2).unwrap();
        for v in p.w1.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        for v in p.w2.data_mut() {
            *v = rng.next_uniform(-1.0, 1.0);
        }
        let (_, saved) = channel_attention_forward(&x, &p).unwrap();
        for (a, m) in saved.avg.iter().zip(saved.maxval.iter()) {
            assert!((a - m).abs() < 1e-15, "avg {a} vs max {m}");
        }
        // gate = sigmoid(2·MLP(pool)) since both branches coincide
        let h: Vec<f64> = linear(&p.w1, &p.b1, &saved.avg)
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let y = linear(&p.w2, &p.b2, &h);
        for (g, &yv) in saved.gate.iter().zip(y.iter()) {
            assert!((g - sigmoid_scalar(2.0 * yv)).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rejects_bad_ratio() {
        assert!(AttentionMlp::zeros(6, 4).is_err());
        assert!(AttentionMlp::zeros(8, 4).is_ok());
    }

    #[test]
    fn attention_fd_check_away_from_ties() {
        let mut checked = 0;
        let mut stream = 0u64;
        while checked < 20 {
            stream += 1;
            assert!(stream < 200, "could not find enough tie-free points");
            let mut rng = RngState::with_stream(11, stream);
            let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
            let mut p = AttentionMlp::zeros(4, 4).unwrap();
            for v in p.w1.data_mut() {
                *v = rng.next_uniform(-1.0, 1.0);
            }
            p.b1 = rand_vec(1, &mut rng);
            for v in p.w2.data_mut() {
                *v = rng.next_uniform(-1.0, 1.0);
            }
            p.b2 = rand_vec(4, &mut rng);
            let (_, saved) = channel_attention_forward(&x, &p).unwrap();
            // skip points near the ReLU kink or maxpool near-ties
            if saved
                .pre1_avg
                .iter()
                .chain(saved.pre1_max.iter())
                .any(|v| v.abs() < 1e-2)
            {
                continue;
            }
            let slab = x.len() / 4;
            let near_tie = (0..4).any(|c| {
                let xs = &x.data()[c * slab..(c + 1) * slab];
                let mx = saved.maxval[c];
                xs.iter().filter(|&&v| (mx - v).abs() < 1e-3).count() > 1
            });
            if near_tie {
                continue;
            }

            let cot = rand_tensor(&[4, 2, 3, 3], &mut rng);
            let (xbar, grads) = channel_attention_vjp(&x, &p, &saved, &cot).unwrap();

            let dir = rand_vec(x.len(), &mut rng);
            let shape = x.shape().to_vec();
            let pc = p.clone();
            let err = fd_check(
                |pt| {
                    let t = Tensor::from_vec(&shape, pt.to_vec()).unwrap();
                    channel_attention_forward(&t, &pc).unwrap().0.into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-5, "input fd err {err} (stream {stream})");

            // mlp parameter path (w1)
            let wdir = rand_vec(p.w1.data().len(), &mut rng);
            let xc = x.clone();
            let pc = p.clone();
            let err = fd_check(
                |pt| {
                    let mut pp = pc.clone();
                    pp.w1 = Matrix::from_vec(pc.w1.rows(), pc.w1.cols(), pt.to_vec()).unwrap();
                    channel_attention_forward(&xc, &pp).unwrap().0.into_data()
                },
                p.w1.data(),
                &wdir,
                cot.data(),
                grads.w1.data(),
                1e-5,
            );
            assert!(err < 1e-5, "w1 fd err {err} (stream {stream})");
            checked += 1;
        }
    }

    // -- layer norm ------------------------------------------------------

    #[test]
    fn layer_norm_constant_group_yields_offset() {
        let x = Tensor::full(&[2, 3, 2, 2], 5.0);
        let (out, _) = layer_norm_forward(&x, &[2.0, 3.0], &[0.25, -1.0]).unwrap();
        for c in 0..2 {
            for f in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let expect = if c == 0 { 0.25 } else { -1.0 };
                        assert!((out.at4(c, f, i, j) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_each_position() {
        let mut rng = RngState::new(12);
        let x = rand_tensor(&[3, 4, 2, 2], &mut rng);
        let (_, saved) = layer_norm_forward(&x, &vec![1.0; 3], &vec![0.0; 3]).unwrap();
        let group = 12;
        for pos in 0..4 {
            let vals: Vec<f64> = (0..group).map(|f| saved.xhat.data()[f * 4 + pos]).collect();
            let mean = vals.iter().sum::<f64>() / group as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            assert!(mean.abs() < 1e-12, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_fd_check() {
        for trial in 0..20u64 {
            let mut rng = RngState::with_stream(13, trial);
            let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
            let gain = rand_vec(2, &mut rng);
            let offset = rand_vec(2, &mut rng);
            let cot = rand_tensor(&[2, 3, 2, 2], &mut rng);
            let (_, saved) = layer_norm_forward(&x, &gain, &offset).unwrap();
            let (xbar, gain_bar, _) = layer_norm_vjp(&saved, &gain, &cot).unwrap();

            let dir = rand_vec(x.len(), &mut rng);
            let shape = x.shape().to_vec();
            let (g2, o2) = (gain.clone(), offset.clone());
            let err = fd_check(
                |pt| {
                    let t = Tensor::from_vec(&shape, pt.to_vec()).unwrap();
                    layer_norm_forward(&t, &g2, &o2).unwrap().0.into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "input fd err {err} (trial {trial})");

            let gdir = rand_vec(2, &mut rng);
            let xc = x.clone();
            let o2 = offset.clone();
            let err = fd_check(
                |pt| {
                    layer_norm_forward(&xc, pt, &o2).unwrap().0.into_data()
                },
                &gain,
                &gdir,
                cot.data(),
                &gain_bar,
                1e-5,
            );
            assert!(err < 1e-6, "gain fd err {err} (trial {trial})");
        }
    }

    // -- soft threshold / softmax -----------------------------------------

    #[test]
    fn soft_threshold_definition() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.8, -0.2]).unwrap();
        let out = soft_threshold(&x, 0.5).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn soft_threshold_zero_is_identity() {
        let mut rng = RngState::new(14);
        let x = rand_tensor(&[2, 2, 3], &mut rng);
        let out = soft_threshold(&x, 0.0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn soft_threshold_rejects_negative() {
        let x = Tensor::zeros(&[1, 1, 1]);
        assert!(soft_threshold(&x, -0.1).is_err());
    }

    #[test]
    fn soft_threshold_fd_check_both_cotangents() {
        for trial in 0..20u64 {
            let mut rng = RngState::with_stream(15, trial);
            let t = 0.3;
            // keep |x| − t away from the kink
            let mut x = Tensor::zeros(&[2, 2, 3]);
            for v in x.data_mut() {
                let mag = rng.next_uniform(0.05, 1.0);
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                *v = sign * if mag > 0.28 && mag < 0.32 { mag + 0.05 } else { mag };
            }
            let cot = rand_tensor(&[2, 2, 3], &mut rng);
            let (xbar, tbar) = soft_threshold_vjp(&x, t, &cot);

            let dir = rand_vec(x.len(), &mut rng);
            let shape = x.shape().to_vec();
            let err = fd_check(
                |pt| {
                    let tt = Tensor::from_vec(&shape, pt.to_vec()).unwrap();
                    soft_threshold(&tt, t).unwrap().into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "x fd err {err} (trial {trial})");

            let xc = x.clone();
            let err = fd_check(
                |pt| soft_threshold(&xc, pt[0]).unwrap().into_data(),
                &[t],
                &[1.0],
                cot.data(),
                &[tbar],
                1e-5,
            );
            assert!(err < 1e-6, "t fd err {err} (trial {trial})");
        }
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        let out = softmax_temp(&x, 3.7).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);

        let x = Tensor::from_vec(&[1, 1, 2], vec![1000.0, 0.0]).unwrap();
        let out = softmax_temp(&x, 1.0).unwrap();
        assert!(out.all_finite());
        assert!(out.data()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = RngState::new(16);
        let x = rand_tensor(&[3, 3, 5], &mut rng);
        let out = softmax_temp(&x, 0.8).unwrap();
        for pix in out.data().chunks(5) {
            let s: f64 = pix.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(pix.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::zeros(&[1, 1, 2]);
        assert!(softmax_temp(&x, 0.0).is_err());
        assert!(softmax_temp(&x, -1.0).is_err());
    }

    #[test]
    fn softmax_fd_check() {
        for trial in 0..20u64 {
            let mut rng = RngState::with_stream(17, trial);
            let x = rand_tensor(&[1, 1, 4], &mut rng);
            let gamma = rng.next_uniform(0.5, 2.0);
            let cot = rand_tensor(&[1, 1, 4], &mut rng);
            let out = softmax_temp(&x, gamma).unwrap();
            let xbar = softmax_temp_vjp(&out, gamma, &cot);

            let dir = rand_vec(4, &mut rng);
            let err = fd_check(
                |pt| {
                    let t = Tensor::from_vec(&[1, 1, 4], pt.to_vec()).unwrap();
                    softmax_temp(&t, gamma).unwrap().into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "fd err {err} (trial {trial})");
        }
    }

    // -- misc primitives ---------------------------------------------------

    #[test]
    fn relu_and_sigmoid_fd() {
        for trial in 0..20u64 {
            let mut rng = RngState::with_stream(18, trial);
            // keep away from the relu kink
            let mut x = Tensor::zeros(&[2, 2, 2]);
            for v in x.data_mut() {
                let mag = rng.next_uniform(0.2, 1.0);
                *v = if rng.next_f64() < 0.5 { -mag } else { mag };
            }
            let cot = rand_tensor(&[2, 2, 2], &mut rng);
            let out = relu(&x);
            let xbar = relu_vjp(&out, &cot);
            let dir = rand_vec(x.len(), &mut rng);
            let err = fd_check(
                |pt| {
                    relu(&Tensor::from_vec(&[2, 2, 2], pt.to_vec()).unwrap()).into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-7, "relu fd err {err}");

            let out = sigmoid(&x);
            let xbar = sigmoid_vjp(&out, &cot);
            let err = fd_check(
                |pt| {
                    sigmoid(&Tensor::from_vec(&[2, 2, 2], pt.to_vec()).unwrap()).into_data()
                },
                x.data(),
                &dir,
                cot.data(),
                xbar.data(),
                1e-5,
            );
            assert!(err < 1e-6, "sigmoid fd err {err}");
        }
    }

    #[test]
    fn fd_check_linear_map_is_exact() {
        let mut rng = RngState::new(19);
        let w = rand_matrix(3, 4, &mut rng);
        let x = rand_vec(4, &mut rng);
        let cot = rand_vec(3, &mut rng);
        let dir = rand_vec(4, &mut rng);
        let (xbar, _, _) = linear_vjp(&w, &x, &cot);
        let wc = w.clone();
        let err = fd_check(
            |pt| linear(&wc, &[0.0; 3], pt),
            &x,
            &dir,
            &cot,
            &xbar,
            1e-3,
        );
        assert!(err < 1e-10, "linear fd err {err}");
    }

    #[test]
    fn permutes_are_mutual_inverses_and_adjoints() {
        let mut rng = RngState::new(20);
        let x = rand_tensor(&[3, 4, 5], &mut rng); // h,w,L
        let p = permute_hwl_to_lhw(&x).unwrap();
        assert_eq!(p.shape(), &[5, 3, 4]);
        let back = permute_lhw_to_hwl(&p).unwrap();
        assert_eq!(back.data(), x.data());

        // adjoint identity: ⟨P x, y⟩ = ⟨x, Pᵀ y⟩
        let y = rand_tensor(&[5, 3, 4], &mut rng);
        let lhs = p.dot(&y);
        let rhs = x.dot(&permute_lhw_to_hwl(&y).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn stack_and_split_roundtrip() {
        let mut rng = RngState::new(21);
        let a = rand_tensor(&[3, 2, 2], &mut rng);
        let b = rand_tensor(&[3, 2, 2], &mut rng);
        let s = stack2(&a, &b).unwrap();
        assert_eq!(s.shape(), &[2, 3, 2, 2]);
        let (a2, b2) = split2(&s).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }
}
