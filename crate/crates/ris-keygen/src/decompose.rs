//! Factoring the unconstrained design into a feasible probe pair.
//!
//! The water-filling optimum `W` is an arbitrary `D x (N_s V)` matrix, but
//! the probing hardware can only realize Kronecker products
//! `kron(Phi_bar, P)` of a phase pattern and a precoder. Writing `W` in
//! `(M+1) x V` blocks `W_{m,t}` of size `N x N_s`, the misfit expands as
//!
//! ```text
//! ||kron(Phi_bar, P) - W||_F^2
//!     = (M+1) V (||P - C||_F^2 - ||C||_F^2) + sum ||W_{m,t}||_F^2,
//! ```
//!
//! where `C` is the phase-weighted block average of `W`. With `Phi_bar`
//! fixed to the (padded) Sylvester-Hadamard pattern, minimizing over
//! orthonormal `P` is the orthogonal Procrustes problem `min ||P - C||_F`,
//! solved in closed form by the polar factor of `C`. A projected-gradient
//! refiner on the same objective is kept as an independent check of that
//! closed form.

use nalgebra::DMatrix;

use crate::linalg::C64;
use crate::probing::{hadamard_phase_matrix, padded_hadamard_phase_matrix};
use crate::skr::{skr_analytic, EffectiveNoise};
use crate::{Error, Result};

/// A feasible probe pair approximating an unconstrained design.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    /// Phase pattern, `(M+1) x V`, Sylvester-Hadamard rows.
    pub phi_bar: DMatrix<C64>,
    /// Precoder with orthonormal columns, `N x N_s`.
    pub p: DMatrix<C64>,
    /// `||kron(Phi_bar, P) - W||_F`.
    pub residual: f64,
    /// `10 log10(achieved / upper bound)`; nonpositive up to roundoff.
    pub skr_gap_db: f64,
    /// Rate of the feasible pair, bits.
    pub achieved_skr: f64,
}

/// Phase-weighted block average `C = sum_{m,t} conj(phi_{m,t}) W_{m,t} / ((M+1) V)`
/// of a design matrix partitioned into `(M+1) x V` blocks of size `N x N_s`.
pub fn block_average(w: &DMatrix<C64>, phi_bar: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let (m1, v) = phi_bar.shape();
    if !w.nrows().is_multiple_of(m1) || !w.ncols().is_multiple_of(v) {
        return Err(Error::Dimension(format!(
            "{}x{} design does not split into {m1}x{v} blocks",
            w.nrows(),
            w.ncols()
        )));
    }
    let n = w.nrows() / m1;
    let n_s = w.ncols() / v;
    let mut c = DMatrix::<C64>::zeros(n, n_s);
    for m in 0..m1 {
        for t in 0..v {
            let phase = phi_bar[(m, t)].conj();
            let block = w.view((m * n, t * n_s), (n, n_s));
            for j in 0..n_s {
                for i in 0..n {
                    c[(i, j)] += phase * block[(i, j)];
                }
            }
        }
    }
    Ok(c / C64::new((m1 * v) as f64, 0.0))
}

/// Nearest matrix with orthonormal columns: the minimizer of `||P - C||_F`
/// over `P^H P = I`, namely `P = U V^H` from the singular value
/// decomposition `C = U S V^H` (the polar factor of `C`).
///
/// Requires `N_s <= N`. For reproducibility each singular pair is phase
/// normalized (largest-magnitude entry of the left vector made real
/// positive) before the product is formed; this changes nothing when `C`
/// has full rank and fixes the convention when it does not.
pub fn orthonormal_fit(c: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let (n, n_s) = c.shape();
    if n_s > n {
        return Err(Error::Dimension(format!(
            "cannot orthonormalize {n_s} columns in dimension {n}"
        )));
    }
    if c.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Degenerate("block average has non-finite entries".into()));
    }
    let svd = c.clone().svd(true, true);
    let mut u = svd.u.ok_or_else(|| Error::Convergence("SVD did not produce U".into()))?;
    let mut v_t = svd.v_t.ok_or_else(|| Error::Convergence("SVD did not produce V^H".into()))?;
    for j in 0..u.ncols() {
        let (mut idx, mut mag) = (0, 0.0);
        for i in 0..u.nrows() {
            let a = u[(i, j)].norm();
            if a > mag {
                mag = a;
                idx = i;
            }
        }
        if mag > 0.0 {
            let phase = u[(idx, j)] / C64::new(mag, 0.0);
            let rot = phase.conj();
            for i in 0..u.nrows() {
                u[(i, j)] *= rot;
            }
            // Keep the product U V^H invariant on the nonzero spectrum.
            for k in 0..v_t.ncols() {
                v_t[(j, k)] *= phase;
            }
        }
    }
    Ok(u * v_t)
}

/// Squared misfit `||P - C||_F^2`.
fn misfit(p: &DMatrix<C64>, c: &DMatrix<C64>) -> f64 {
    (p - c).norm_squared()
}

/// Projected-gradient descent on `||P - C||_F^2` over the orthonormal
/// constraint: gradient step, polar retraction, and backtracking so the
/// objective never increases. Exists to cross-check [`orthonormal_fit`];
/// zero `step` or `max_iters` returns the start point.
pub fn riemannian_refine(
    p0: &DMatrix<C64>,
    c: &DMatrix<C64>,
    max_iters: usize,
    step: f64,
) -> Result<DMatrix<C64>> {
    let mut p = p0.clone();
    let mut obj = misfit(&p, c);
    let mut step = step;
    for _ in 0..max_iters {
        if step <= 0.0 {
            break;
        }
        // Euclidean gradient of the objective is 2 (P - C).
        let grad = (&p - c) * C64::new(2.0, 0.0);
        let mut improved = false;
        let mut s = step;
        for _ in 0..40 {
            let trial = orthonormal_fit(&(&p - &grad * C64::new(s, 0.0)))?;
            let t_obj = misfit(&trial, c);
            if t_obj < obj {
                p = trial;
                obj = t_obj;
                step = s;
                improved = true;
                break;
            }
            s *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(p)
}

/// Decomposes an unconstrained design into the Hadamard pattern and the
/// Procrustes-optimal precoder, reporting the misfit and the rate gap.
///
/// `v` must match the pattern width for this `m`: `m + 1` when that is a
/// power of two, otherwise the next power of two (the padded pattern).
/// The rate gap compares `skr_analytic` of the feasible pair against the
/// unconstrained design on the same covariance and noise.
pub fn decompose(
    w_dagger: &DMatrix<C64>,
    r_h: &DMatrix<C64>,
    noise: &EffectiveNoise,
    m: usize,
    v: usize,
    k_q: usize,
) -> Result<DecompositionResult> {
    let phi_bar = if v == m + 1 {
        hadamard_phase_matrix(m, k_q)?
    } else if v == (m + 1).next_power_of_two() {
        padded_hadamard_phase_matrix(m, k_q)?
    } else {
        return Err(Error::Dimension(format!(
            "pattern width {v} fits neither the square nor the padded Hadamard for M = {m}"
        )));
    };
    let c = block_average(w_dagger, &phi_bar)?;
    let p = orthonormal_fit(&c)?;
    let feasible = phi_bar.kronecker(&p);
    let residual = (&feasible - w_dagger).norm();
    let achieved = skr_analytic(&feasible, r_h, noise)?;
    let upper = skr_analytic(w_dagger, r_h, noise)?;
    let skr_gap_db = if achieved > 0.0 && upper > 0.0 {
        10.0 * (achieved / upper).log10()
    } else {
        0.0
    };
    Ok(DecompositionResult { phi_bar, p, residual, skr_gap_db, achieved_skr: achieved })
}
