//! Dense tensors, matrices, deterministic RNG, and the small set of
//! linear-algebra kernels the rest of the crate is built on.
//!
//! Layout convention: row-major with the **last axis fastest**. An observed
//! cube is `[h, w, L]` (spectra contiguous per pixel), an abundance tensor is
//! `[h, w, R]`, and convolution feature volumes are `[C, L, h, w]`.

use crate::error::{Result, UnmixError};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Element type for dense storage. Double precision is the default for all
/// solver math; single precision exists for memory-lean payloads.
pub trait Scalar: Copy + PartialOrd + std::fmt::Debug + 'static {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_scalar(self) -> bool;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
}

/// Dense multi-dimensional array, contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The working tensor type used by the solver stack.
pub type Tensor = DenseTensor<f64>;

impl<T: Scalar> DenseTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(UnmixError::dimension(
                "DenseTensor::from_vec",
                format!("shape {:?} needs {} scalars, got {}", shape, expect, data.len()),
            ));
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(UnmixError::dimension(
                "DenseTensor::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_scalar())
    }
}

impl Tensor {
    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn at4(&self, c: usize, d: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (s1, s2, s3) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((c * s1 + d) * s2 + i) * s3 + j]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        let idx = (i * self.shape[1] + j) * self.shape[2] + k;
        self.data[idx] = v;
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        dot(&self.data, &other.data)
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn to_f32(&self) -> DenseTensor<f32> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl DenseTensor<f32> {
    pub fn to_f64(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(UnmixError::dimension(
                "Matrix::from_vec",
                format!("{}x{} needs {} scalars, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from column vectors, all of equal length.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(UnmixError::dimension("Matrix::from_columns", "no columns"));
        }
        let rows = cols[0].len();
        if cols.iter().any(|c| c.len() != rows) {
            return Err(UnmixError::dimension(
                "Matrix::from_columns",
                "columns of unequal length",
            ));
        }
        let mut m = Matrix::zeros(rows, cols.len());
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.data[i * cols.len() + j] = v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn transposed(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y = Aᵀ x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            axpy(x[r], self.row(r), &mut y);
        }
        y
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic, platform-independent random stream.
///
/// Identical `(seed, stream)` pairs yield identical draw sequences on every
/// platform; `fork` hands out child streams for independent repetitions.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child generator on the next stream; advances this state's stream id.
    pub fn fork(&mut self) -> RngState {
        self.stream += 1;
        RngState::with_stream(self.seed, self.stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw (Box-Muller, one value per pair of uniforms).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.next_normal();
        }
    }

    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Mode-3 contraction kernels
// ---------------------------------------------------------------------------

/// Mode-3 product: contract the last axis of `a` (`[h, w, R]`) with the
/// columns of `m` (`L x R`), producing `[h, w, L]`.
///
/// `out[i,j,l] = sum_r m[l,r] * a[i,j,r]`
pub fn mode3_product(a: &Tensor, m: &Matrix) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 3 || shape[2] != m.cols() {
        return Err(UnmixError::dimension(
            "mode3_product",
            format!("tensor {:?} vs matrix {}x{}", shape, m.rows(), m.cols()),
        ));
    }
    let (h, w, r) = (shape[0], shape[1], shape[2]);
    let l = m.rows();
    let mut out = Tensor::zeros(&[h, w, l]);
    for (pix_out, pix_in) in out.data_mut().chunks_mut(l).zip(a.data().chunks(r)) {
        for (li, o) in pix_out.iter_mut().enumerate() {
            *o = dot(m.row(li), pix_in);
        }
    }
    Ok(out)
}

/// Adjoint of [`mode3_product`] in its tensor argument: contracts the last
/// axis of `g` (`[h, w, L]`) with the rows of `m`, producing `[h, w, R]`.
///
/// `out[i,j,r] = sum_l m[l,r] * g[i,j,l]`
pub fn mode3_product_adjoint(g: &Tensor, m: &Matrix) -> Result<Tensor> {
    let shape = g.shape();
    if shape.len() != 3 || shape[2] != m.rows() {
        return Err(UnmixError::dimension(
            "mode3_product_adjoint",
            format!("tensor {:?} vs matrix {}x{}", shape, m.rows(), m.cols()),
        ));
    }
    let (h, w, l) = (shape[0], shape[1], shape[2]);
    let r = m.cols();
    let mut out = Tensor::zeros(&[h, w, r]);
    for (pix_out, pix_in) in out.data_mut().chunks_mut(r).zip(g.data().chunks(l)) {
        for (li, &gv) in pix_in.iter().enumerate() {
            axpy(gv, m.row(li), pix_out);
        }
    }
    Ok(out)
}

/// Cotangent of [`mode3_product`] in its matrix argument:
/// `wbar[l,r] = sum_{i,j} cot[i,j,l] * a[i,j,r]`.
pub fn mode3_weight_vjp(cot: &Tensor, a: &Tensor) -> Result<Matrix> {
    let (cs, as_) = (cot.shape(), a.shape());
    if cs.len() != 3 || as_.len() != 3 || cs[0] != as_[0] || cs[1] != as_[1] {
        return Err(UnmixError::dimension(
            "mode3_weight_vjp",
            format!("cotangent {:?} vs tensor {:?}", cs, as_),
        ));
    }
    let (l, r) = (cs[2], as_[2]);
    let mut wbar = Matrix::zeros(l, r);
    for (pix_cot, pix_a) in cot.data().chunks(l).zip(a.data().chunks(r)) {
        for (li, &cv) in pix_cot.iter().enumerate() {
            axpy(cv, pix_a, wbar.row_mut(li));
        }
    }
    Ok(wbar)
}

// ---------------------------------------------------------------------------
// Least squares
// ---------------------------------------------------------------------------

/// `argmin_x ||A x - b||^2 + ridge * ||x||^2`.
///
/// With `ridge > 0` the regularized normal equations are solved by Cholesky.
/// With `ridge == 0` a column-pivoted Householder QR is used; if the factor
/// is rank-deficient the minimum-norm solution is returned via a complete
/// orthogonal decomposition.
pub fn least_squares_solve(a: &Matrix, b: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(UnmixError::dimension(
            "least_squares_solve",
            format!("matrix {}x{} vs rhs len {}", a.rows(), a.cols(), b.len()),
        ));
    }
    if !(ridge >= 0.0) {
        return Err(UnmixError::Domain(format!("ridge must be >= 0, got {ridge}")));
    }
    let k = a.cols();
    if ridge > 0.0 {
        // (AᵀA + ridge I) x = Aᵀ b
        let mut gram = vec![0.0; k * k];
        for row in 0..a.rows() {
            let ar = a.row(row);
            for i in 0..k {
                let ai = ar[i];
                if ai != 0.0 {
                    axpy(ai, ar, &mut gram[i * k..(i + 1) * k]);
                }
            }
        }
        for i in 0..k {
            gram[i * k + i] += ridge;
        }
        let rhs = a.matvec_t(b);
        return cholesky_solve(&mut gram, k, &rhs);
    }
    qr_min_norm_solve(a, b)
}

/// Solve SPD system in place; `g` is k*k row-major and is overwritten.
fn cholesky_solve(g: &mut [f64], k: usize, rhs: &[f64]) -> Result<Vec<f64>> {
    // Lower-triangular factorization.
    for i in 0..k {
        for j in 0..=i {
            let mut s = g[i * k + j];
            for p in 0..j {
                s -= g[i * k + p] * g[j * k + p];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(UnmixError::Domain(
                        "cholesky: matrix not positive definite".into(),
                    ));
                }
                g[i * k + i] = s.sqrt();
            } else {
                g[i * k + j] = s / g[j * k + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut x = rhs.to_vec();
    for i in 0..k {
        for p in 0..i {
            x[i] -= g[i * k + p] * x[p];
        }
        x[i] /= g[i * k + i];
    }
    for i in (0..k).rev() {
        for p in (i + 1)..k {
            x[i] -= g[p * k + i] * x[p];
        }
        x[i] /= g[i * k + i];
    }
    Ok(x)
}

/// Column-pivoted Householder QR; minimum-norm solution on rank deficiency
/// via a complete orthogonal decomposition of the trapezoidal factor.
fn qr_min_norm_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let k = a.cols();
    let steps = n.min(k);

    // Column-major working copy.
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut qtb = b.to_vec();

    for step in 0..steps {
        // Pivot on the largest remaining column norm.
        let (best, best_norm) = (step..k)
            .map(|j| (j, dot(&cols[j][step..], &cols[j][step..])))
            .fold((step, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best != step {
            cols.swap(step, best);
            perm.swap(step, best);
        }
        if best_norm <= 0.0 {
            break;
        }
        // Householder reflector zeroing cols[step][step+1..].
        let norm = best_norm.sqrt();
        let x0 = cols[step][step];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[step][step..].to_vec();
        v[0] -= alpha;
        let vtv = dot(&v, &v);
        cols[step][step] = alpha;
        for t in step + 1..n {
            cols[step][t] = 0.0;
        }
        if vtv > 0.0 {
            let beta = 2.0 / vtv;
            for col in cols.iter_mut().skip(step + 1) {
                let c = beta * dot(&v, &col[step..]);
                axpy(-c, &v, &mut col[step..]);
            }
            let c = beta * dot(&v, &qtb[step..]);
            axpy(-c, &v, &mut qtb[step..]);
        }
    }

    // Numerical rank from the diagonal of R.
    let diag_max = (0..steps).map(|i| cols[i][i].abs()).fold(0.0_f64, f64::max);
    let tol = f64::EPSILON * (n.max(k) as f64) * diag_max;
    let rank = (0..steps).take_while(|&i| cols[i][i].abs() > tol).count();

    if rank == 0 {
        return Ok(vec![0.0; k]);
    }

    let mut x_perm = vec![0.0; k];
    if rank == k {
        // Full column rank: back substitution on R.
        for i in (0..k).rev() {
            let mut s = qtb[i];
            for j in i + 1..k {
                s -= cols[j][i] * x_perm[j];
            }
            x_perm[i] = s / cols[i][i];
        }
    } else {
        // Complete orthogonal decomposition of the r x k trapezoid
        // [R11 R12]: annihilate R12 with reflectors acting on columns
        // {i} ∪ {rank..k}, giving [T 0] Z.
        let mut t: Vec<Vec<f64>> = (0..rank)
            .map(|i| (0..k).map(|j| if j >= i { cols[j][i] } else { 0.0 }).collect())
            .collect();
        // Reflectors: (beta, tail v over columns rank..k); v_head = 1 implicit.
        let mut reflectors: Vec<(f64, Vec<f64>)> = Vec::with_capacity(rank);
        for i in (0..rank).rev() {
            let tail: Vec<f64> = t[i][rank..].to_vec();
            let tail_sq = dot(&tail, &tail);
            if tail_sq == 0.0 {
                reflectors.push((0.0, tail));
                continue;
            }
            let x0 = t[i][i];
            let norm = (x0 * x0 + tail_sq).sqrt();
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            let v0 = x0 - alpha;
            let vtv = v0 * v0 + tail_sq;
            let beta = 2.0 / vtv;
            // Normalize so the head component is 1.
            let vt: Vec<f64> = tail.iter().map(|&w| w / v0).collect();
            let beta = beta * v0 * v0;
            t[i][i] = alpha;
            for j in rank..k {
                t[i][j] = 0.0;
            }
            for p in 0..i {
                let mut c = t[p][i];
                for (jj, &vj) in vt.iter().enumerate() {
                    c += vj * t[p][rank + jj];
                }
                c *= beta;
                t[p][i] -= c;
                for (jj, &vj) in vt.iter().enumerate() {
                    t[p][rank + jj] -= c * vj;
                }
            }
            reflectors.push((beta, vt));
        }
        reflectors.reverse(); // reflectors[i] now corresponds to row i

        // Solve T u = c on the leading r x r triangle.
        let mut u = vec![0.0; rank];
        for i in (0..rank).rev() {
            let mut s = qtb[i];
            for j in i + 1..rank {
                s -= t[i][j] * u[j];
            }
            u[i] = s / t[i][i];
        }
        // y = Zᵀ [u; 0]: apply H_0, H_1, ..., H_{r-1} in that order.
        let mut y = vec![0.0; k];
        y[..rank].copy_from_slice(&u);
        for (i, (beta, vt)) in reflectors.iter().enumerate() {
            if *beta == 0.0 {
                continue;
            }
            let mut c = y[i];
            for (jj, &vj) in vt.iter().enumerate() {
                c += vj * y[rank + jj];
            }
            c *= beta;
            y[i] -= c;
            for (jj, &vj) in vt.iter().enumerate() {
                y[rank + jj] -= c * vj;
            }
        }
        x_perm = y;
    }

    let mut x = vec![0.0; k];
    for (pos, &orig) in perm.iter().enumerate() {
        x[orig] = x_perm[pos];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// descending order with matching eigenvector columns.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(UnmixError::dimension("sym_eigen", "matrix not square"));
    }
    let n = a.rows();
    let mut m = a.data().to_vec();
    let mut v = Matrix::identity(n);

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m[i * n + j] * m[i * n + j];
            }
        }
        s.sqrt()
    };
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);

    for _sweep in 0..60 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v.at(i, p);
                    let viq = v.at(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigvecs = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs.set(i, new_j, v.at(i, old_j));
        }
    }
    Ok((eigvals, eigvecs))
}
