//! Classical unmixing baselines: vertex-component endmember extraction and
//! fully-constrained least-squares abundances.
//!
//! These provide the initialization for the equilibrium solver (W ← VCA
//! endmembers, A⁰ ← FCLS abundances) and the comparison baseline for the
//! quality gates. The VCA variant implemented here is the standard
//! Nascimento–Dias algorithm: an SNR-dependent subspace projection followed
//! by iterative orthogonal-direction maximization; extracted endmembers are
//! exact observed pixel spectra, never denoised reconstructions.

use crate::error::{Result, UnmixError};
use crate::tensor::{dot, least_squares_solve, norm2, sym_eigen, Matrix, RngState, Tensor};

/// Scaling of the sum-to-one row appended for FCLS: the augmented system is
/// `[M; 1ᵀ/δ] a ≈ [y; 1/δ]`.
pub const FCLS_DELTA_DEFAULT: f64 = 1e-3;

/// Relative KKT tolerance for the active-set nonnegative solver.
pub const NNLS_KKT_TOL: f64 = 1e-10;

/// Endmember extraction output.
#[derive(Debug, Clone)]
pub struct VcaResult {
    /// `L x R`; column j is the exact spectrum of pixel `indices[j]`.
    pub endmembers: Matrix,
    /// Flat pixel indices (row-major over h, w) of the selected spectra.
    pub indices: Vec<usize>,
    /// Estimated SNR (dB) of the input; +inf for (near-)noise-free data.
    pub snr_estimate: f64,
    /// Threshold `15 + 10·log10(R)` that picked the projection.
    pub snr_threshold: f64,
    /// True if the high-SNR projective projection was used.
    pub used_projective: bool,
}

/// Per-pixel constrained abundance estimates.
#[derive(Debug, Clone)]
pub struct FclsResult {
    /// `[h, w, R]`, every pixel on the simplex.
    pub abundances: Tensor,
    /// `‖M·a − y‖₂` per pixel (unaugmented system), row-major.
    pub residual_norms: Vec<f64>,
    /// Pixels where the active-set solver hit its step cap and the answer
    /// fell back to a simplex projection of the unconstrained solution.
    pub fallback_count: usize,
}

// ---------------------------------------------------------------------------
// VCA
// ---------------------------------------------------------------------------

/// Top-k eigenvectors of a symmetric PSD matrix as an `n x k` basis.
fn principal_basis(cov: &Matrix, k: usize) -> Result<Matrix> {
    let (_, vecs) = sym_eigen(cov)?;
    let n = cov.rows();
    let mut basis = Matrix::zeros(n, k);
    for j in 0..k {
        for i in 0..n {
            basis.set(i, j, vecs.at(i, j));
        }
    }
    Ok(basis)
}

/// As [`principal_basis`], but fails when the data does not actually span
/// `k` directions (relative eigenvalue cutoff 1e-12).
fn checked_basis(cov: &Matrix, k: usize) -> Result<Matrix> {
    let (vals, vecs) = sym_eigen(cov)?;
    let cutoff = 1e-12 * vals[0].max(1e-300);
    let rank = vals.iter().take_while(|&&v| v > cutoff).count();
    if rank < k {
        return Err(UnmixError::Extraction(format!(
            "projected data spans only {rank} directions, need {k} \
             (leading eigenvalues {:?})",
            &vals[..k.min(vals.len())]
        )));
    }
    let n = cov.rows();
    let mut basis = Matrix::zeros(n, k);
    for j in 0..k {
        for i in 0..n {
            basis.set(i, j, vecs.at(i, j));
        }
    }
    Ok(basis)
}

/// Vertex component analysis. Deterministic given the RNG state; the
/// extracted endmember columns are exact members of the input pixel set.
pub fn vca(y: &Tensor, r: usize, rng: &mut RngState) -> Result<VcaResult> {
    let s = y.shape();
    if s.len() != 3 {
        return Err(UnmixError::dimension("vca", format!("cube rank {}", s.len())));
    }
    let (h, w, l) = (s[0], s[1], s[2]);
    let n = h * w;
    if r == 0 || r > l || r > n {
        return Err(UnmixError::Config(format!(
            "endmember count {r} incompatible with {l} bands / {n} pixels"
        )));
    }
    let pixel = |p: usize| &y.data()[p * l..(p + 1) * l];

    // Band means and second-moment matrix; centered covariance follows as
    // Ry − mean·meanᵀ.
    let mut mean = vec![0.0; l];
    for p in 0..n {
        for (m, &v) in mean.iter_mut().zip(pixel(p)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut ry = Matrix::zeros(l, l);
    for p in 0..n {
        let yp = pixel(p);
        for i in 0..l {
            if yp[i] != 0.0 {
                crate::tensor::axpy(yp[i] / n as f64, yp, ry.row_mut(i));
            }
        }
    }
    let mut ro = ry.clone();
    for i in 0..l {
        for j in 0..l {
            let v = ro.at(i, j) - mean[i] * mean[j];
            ro.set(i, j, v);
        }
    }

    // SNR estimate from the centered R-dimensional projection.
    let basis_c = principal_basis(&ro, r)?;
    let mut p_y = 0.0;
    let mut p_x = 0.0;
    for p in 0..n {
        let yp = pixel(p);
        p_y += dot(yp, yp);
        let centered: Vec<f64> = yp.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
        let proj = basis_c.matvec_t(&centered);
        p_x += dot(&proj, &proj);
    }
    p_y /= n as f64;
    p_x = p_x / n as f64 + dot(&mean, &mean);
    let snr_threshold = 15.0 + 10.0 * (r as f64).log10();
    let noise_power = p_y - p_x;
    let snr_estimate = if noise_power <= f64::EPSILON * p_y.max(1e-300) {
        f64::INFINITY
    } else {
        let sig = (p_x - (r as f64 / l as f64) * p_y).max(f64::MIN_POSITIVE);
        10.0 * (sig / noise_power).log10()
    };

    // R = 1: single strongest direction, no orthogonalization loop.
    if r == 1 {
        let dir = checked_basis(&ry, 1)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for p in 0..n {
            let v = dot(&dir.column(0), pixel(p)).abs();
            if v > best.1 {
                best = (p, v);
            }
        }
        let endmembers = Matrix::from_columns(&[pixel(best.0).to_vec()])?;
        return Ok(VcaResult {
            endmembers,
            indices: vec![best.0],
            snr_estimate,
            snr_threshold,
            used_projective: true,
        });
    }

    let used_projective = snr_estimate > snr_threshold;

    // Working coordinates: R-dimensional points, one per pixel, whose convex
    // hull has the endmembers at its vertices.
    let coords: Vec<Vec<f64>> = if used_projective {
        let basis = checked_basis(&ry, r)?;
        let mut raw: Vec<Vec<f64>> = (0..n).map(|p| basis.matvec_t(pixel(p))).collect();
        let mut u = vec![0.0; r];
        for x in &raw {
            for (ui, &xi) in u.iter_mut().zip(x.iter()) {
                *ui += xi;
            }
        }
        for ui in u.iter_mut() {
            *ui /= n as f64;
        }
        for x in raw.iter_mut() {
            let denom = dot(x, &u);
            let denom = if denom.abs() < 1e-12 {
                1e-12_f64.copysign(denom)
            } else {
                denom
            };
            for xi in x.iter_mut() {
                *xi /= denom;
            }
        }
        raw
    } else {
        let basis = checked_basis(&ro, r - 1)?;
        let mut raw: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                let centered: Vec<f64> =
                    pixel(p).iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
                basis.matvec_t(&centered)
            })
            .collect();
        let c = raw.iter().map(|x| norm2(x)).fold(0.0_f64, f64::max).max(1e-12);
        for x in raw.iter_mut() {
            x.push(c);
        }
        raw
    };

    // Orthogonal-direction maximization: repeatedly pick the pixel whose
    // coordinate has the largest component orthogonal to the span of the
    // already-selected ones.
    let mut sel = Matrix::zeros(r, r);
    sel.set(r - 1, 0, 1.0);
    let mut indices = Vec::with_capacity(r);
    for i in 0..r {
        let mut f = vec![0.0; r];
        let mut ok = false;
        for _attempt in 0..30 {
            let wdir: Vec<f64> = (0..r).map(|_| rng.next_f64()).collect();
            let coef = least_squares_solve(&sel, &wdir, 0.0)?;
            let proj = sel.matvec(&coef);
            for ((fi, &wi), &pi) in f.iter_mut().zip(wdir.iter()).zip(proj.iter()) {
                *fi = wi - pi;
            }
            let nf = norm2(&f);
            if nf > 1e-9 {
                for fi in f.iter_mut() {
                    *fi /= nf;
                }
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(UnmixError::Extraction(format!(
                "projected data spans fewer than {r} directions (rank deficiency at step {i})"
            )));
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (p, x) in coords.iter().enumerate() {
            let v = dot(&f, x).abs();
            if v > best.1 {
                best = (p, v);
            }
        }
        indices.push(best.0);
        for (row, &v) in coords[best.0].iter().enumerate() {
            sel.set(row, i, v);
        }
    }

    let columns: Vec<Vec<f64>> = indices.iter().map(|&p| pixel(p).to_vec()).collect();
    Ok(VcaResult {
        endmembers: Matrix::from_columns(&columns)?,
        indices,
        snr_estimate,
        snr_threshold,
        used_projective,
    })
}

// ---------------------------------------------------------------------------
// Simplex projection
// ---------------------------------------------------------------------------

/// Euclidean projection onto the probability simplex `{a ≥ 0, Σa = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // kill residual rounding in the sum
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for o in out.iter_mut() {
            *o /= s;
        }
    } else {
        out.fill(1.0 / n as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// NNLS + FCLS
// ---------------------------------------------------------------------------

/// Lawson–Hanson active-set nonnegative least squares. Returns the solution
/// and whether the KKT conditions were met within the step cap.
fn nnls(a: &Matrix, b: &[f64], max_steps: usize) -> Result<(Vec<f64>, bool)> {
    let k = a.cols();
    let mut x = vec![0.0; k];
    let mut passive = vec![false; k];
    let atb = a.matvec_t(b);
    let kkt = NNLS_KKT_TOL * atb.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut steps = 0usize;

    loop {
        // gradient of ½‖Ax−b‖² is −w; optimal when w ≤ 0 on the zero set
        let resid: Vec<f64> = {
            let ax = a.matvec(&x);
            b.iter().zip(ax.iter()).map(|(bi, ai)| bi - ai).collect()
        };
        let grad = a.matvec_t(&resid);
        let mut t = None;
        let mut best = kkt;
        for j in 0..k {
            if !passive[j] && grad[j] > best {
                best = grad[j];
                t = Some(j);
            }
        }
        let Some(t) = t else {
            return Ok((x, true));
        };
        passive[t] = true;

        loop {
            steps += 1;
            if steps > max_steps {
                return Ok((x, false));
            }
            let active_cols: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let sub_cols: Vec<Vec<f64>> = active_cols.iter().map(|&j| a.column(j)).collect();
            let sub = Matrix::from_columns(&sub_cols)?;
            let z = least_squares_solve(&sub, b, 0.0)?;

            if z.iter().all(|&v| v > 0.0) {
                for (pos, &j) in active_cols.iter().enumerate() {
                    x[j] = z[pos];
                }
                break;
            }
            // step toward z until the first passive variable hits zero
            let mut alpha = f64::INFINITY;
            for (pos, &j) in active_cols.iter().enumerate() {
                if z[pos] <= 0.0 {
                    let denom = x[j] - z[pos];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (pos, &j) in active_cols.iter().enumerate() {
                x[j] += alpha * (z[pos] - x[j]);
                if x[j] <= 1e-14 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
}

/// Fully-constrained abundances for one spectrum: `argmin ‖M a − y‖²` over
/// the simplex, via NNLS on the δ-augmented system, then exact
/// renormalization. Returns the abundances and whether the solver fell back
/// to a simplex projection.
pub fn fcls_pixel(spectrum: &[f64], m: &Matrix, delta: f64) -> Result<(Vec<f64>, bool)> {
    let (l, r) = (m.rows(), m.cols());
    if spectrum.len() != l {
        return Err(UnmixError::dimension(
            "fcls_pixel",
            format!("spectrum len {} vs {} bands", spectrum.len(), l),
        ));
    }
    // augmented rows: M on top, the ASC row 1ᵀ/δ below
    let mut aug = Matrix::zeros(l + 1, r);
    for i in 0..l {
        aug.row_mut(i).copy_from_slice(m.row(i));
    }
    for j in 0..r {
        aug.set(l, j, 1.0 / delta);
    }
    let mut rhs = spectrum.to_vec();
    rhs.push(1.0 / delta);

    let (raw, converged) = nnls(&aug, &rhs, 3 * r * r)?;
    let mut a;
    let mut fallback = false;
    if converged {
        a = raw;
    } else {
        log::warn!("fcls: active-set cap hit; projecting unconstrained solution");
        fallback = true;
        let unconstrained = least_squares_solve(m, spectrum, 0.0)?;
        a = project_simplex(&unconstrained);
    }
    let sum: f64 = a.iter().sum();
    if sum > 1e-12 {
        for v in a.iter_mut() {
            *v /= sum;
        }
    } else {
        fallback = true;
        a = vec![1.0 / r as f64; r];
    }
    Ok((a, fallback))
}

/// Fully-constrained least squares over every pixel of a cube.
pub fn fcls(y: &Tensor, m: &Matrix) -> Result<FclsResult> {
    fcls_with_delta(y, m, FCLS_DELTA_DEFAULT)
}

/// [`fcls`] with an explicit ASC augmentation weight.
pub fn fcls_with_delta(y: &Tensor, m: &Matrix, delta: f64) -> Result<FclsResult> {
    let s = y.shape();
    if s.len() != 3 || s[2] != m.rows() {
        return Err(UnmixError::dimension(
            "fcls",
            format!("cube {:?} vs endmembers {}x{}", s, m.rows(), m.cols()),
        ));
    }
    if !(delta > 0.0) {
        return Err(UnmixError::Config(format!("fcls delta must be > 0, got {delta}")));
    }
    let (h, w, l) = (s[0], s[1], s[2]);
    let r = m.cols();
    let n = h * w;
    let mut abundances = Tensor::zeros(&[h, w, r]);
    let mut residual_norms = Vec::with_capacity(n);
    let mut fallback_count = 0;

    for p in 0..n {
        let spectrum = &y.data()[p * l..(p + 1) * l];
        let (a, fb) = fcls_pixel(spectrum, m, delta)?;
        if fb {
            fallback_count += 1;
        }
        let recon = m.matvec(&a);
        let rn = spectrum
            .iter()
            .zip(recon.iter())
            .map(|(yv, rv)| (yv - rv) * (yv - rv))
            .sum::<f64>()
            .sqrt();
        residual_norms.push(rn);
        abundances.data_mut()[p * r..(p + 1) * r].copy_from_slice(&a);
    }
    Ok(FclsResult {
        abundances,
        residual_norms,
        fallback_count,
    })
}
