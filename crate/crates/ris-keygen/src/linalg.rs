//! Small dense complex-matrix helpers shared across the crate.
//!
//! Everything here wraps [`nalgebra`] with the conventions the rest of the
//! crate relies on: Hermitian eigendecompositions sorted descending with a
//! deterministic tie-break, eigenvalue clamping with an explicit
//! not-positive-semidefinite error, square-root factors of covariance
//! matrices, circularly-symmetric Gaussian sampling, and a chunked
//! Monte Carlo driver whose results do not depend on the worker count.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::{Error, Result};

/// Complex double-precision scalar used everywhere in the crate.
pub type C64 = Complex<f64>;

/// Eigenvalues below `-REL_PSD_TOL * scale` make a matrix count as indefinite;
/// anything between that and zero is treated as rounding noise and clamped.
pub const REL_PSD_TOL: f64 = 1e-9;

/// Hermitian eigendecomposition with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct HermEigen {
    /// Eigenvalues, descending. Ties keep the pre-sort order.
    pub values: DVector<f64>,
    /// Columns are the eigenvectors matching `values`.
    pub vectors: DMatrix<C64>,
}

/// Force exact Hermitian symmetry: `(a + a^H) / 2`.
pub fn hermitian_part(a: &DMatrix<C64>) -> DMatrix<C64> {
    let mut h = a.adjoint();
    h += a;
    h.scale_mut(0.5);
    h
}

/// Eigendecomposition of a Hermitian matrix, sorted descending by eigenvalue
/// with ties broken by the original index (deterministic for repeated
/// eigenvalues).
///
/// The input is hermitized first, so tiny asymmetries from accumulation are
/// tolerated.
pub fn herm_eigen(a: &DMatrix<C64>) -> HermEigen {
    assert!(a.is_square(), "herm_eigen needs a square matrix");
    let n = a.nrows();
    let se = nalgebra::SymmetricEigen::new(hermitian_part(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        se.eigenvalues[j]
            .partial_cmp(&se.eigenvalues[i])
            .expect("eigenvalues are finite")
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &se.eigenvectors.column(src));
    }
    HermEigen { values, vectors }
}

/// Like [`herm_eigen`], but clamps slightly negative eigenvalues to zero and
/// rejects the matrix when any eigenvalue is below `-REL_PSD_TOL * scale`,
/// where `scale` is the largest eigenvalue magnitude (or 1 for an all-zero
/// matrix).
pub fn herm_eigen_psd(a: &DMatrix<C64>) -> Result<HermEigen> {
    let mut e = herm_eigen(a);
    let scale = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let min = e.values.min();
    if min < -REL_PSD_TOL * scale {
        return Err(Error::NotPsd { min_eig: min, scale });
    }
    for v in e.values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(e)
}

/// A factor `F` with `F F^H = a`, namely `U diag(sqrt(lambda_+))`.
///
/// Works for singular covariance matrices where a Cholesky factor does not
/// exist. Fails if the input is not PSD within [`REL_PSD_TOL`].
pub fn psd_factor(a: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let e = herm_eigen_psd(a)?;
    let mut f = e.vectors;
    for (j, lam) in e.values.iter().enumerate() {
        let s = C64::new(lam.sqrt(), 0.0);
        for v in f.column_mut(j).iter_mut() {
            *v *= s;
        }
    }
    Ok(f)
}

/// `log2 det` of a Hermitian positive-definite matrix via its (clamped)
/// eigenvalues, together with the condition number `max/min` of the
/// unclamped spectrum.
pub fn log2_det_herm(a: &DMatrix<C64>) -> Result<(f64, f64)> {
    let e = herm_eigen_psd(a)?;
    let max = e.values.max();
    let min = e.values.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    let ld = e.values.iter().map(|v| v.max(1e-300).log2()).sum();
    Ok((ld, cond))
}

/// One circularly-symmetric complex Gaussian scalar `CN(0, var)`.
#[inline]
pub fn cn_scalar<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var * 0.5).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

/// Vector of i.i.d. `CN(0, var)` entries.
pub fn cn_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, var: f64) -> DVector<C64> {
    DVector::from_fn(n, |_, _| cn_scalar(rng, var))
}

/// Matrix of i.i.d. `CN(0, var)` entries, filled column-major so the draw
/// order is part of the crate's reproducibility contract.
pub fn cn_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, var: f64) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = cn_scalar(rng, var);
        }
    }
    m
}

/// ChaCha generator for (seed, stream). Distinct streams of one seed are
/// independent, which is how Monte Carlo work is partitioned across workers.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Number of trials per Monte Carlo chunk. Fixed so that chunk boundaries,
/// and therefore floating-point reduction order, never depend on the worker
/// count.
pub const MC_CHUNK: usize = 1024;

/// Run `trials` Monte Carlo iterations split into fixed-size chunks, each
/// chunk on its own RNG stream, and fold the per-chunk results in chunk
/// order. `per_chunk(rng, len)` handles `len` trials with the given stream.
///
/// The fold order is deterministic, so the result is identical for any
/// rayon worker count.
pub fn parallel_mc<T, F, G>(trials: usize, seed: u64, per_chunk: F, fold: G, zero: T) -> T
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
    G: Fn(T, T) -> T,
{
    if trials == 0 {
        return zero;
    }
    let n_chunks = trials.div_ceil(MC_CHUNK);
    let parts: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut rng = stream_rng(seed, c as u64);
            per_chunk(&mut rng, len)
        })
        .collect();
    parts.into_iter().fold(zero, fold)
}
