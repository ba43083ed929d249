//! Secret-key rate of a jointly Gaussian observation pair.
//!
//! After least-squares channel estimation the two terminals hold noisy
//! views of the same probed vector `z = W^T h_r`:
//!
//! ```text
//! z_a = z + e_a,   e_a ~ CN(0, hat_sigma_a^2 I)
//! z_b = z + e_b,   e_b ~ CN(0, hat_sigma_b^2 I)
//! ```
//!
//! For Gaussian `z` with covariance `R_W = W^T R_h conj(W)` the key rate is
//! the mutual information `I(z_a; z_b)`, which separates over the
//! eigenvalues `p_i` of `R_W`:
//!
//! ```text
//! I = sum_i log2(1 + p_i^2 / ((hat_a + hat_b) p_i + hat_a hat_b))
//! ```
//!
//! This module evaluates that sum, its per-eigenvalue derivatives (the
//! quantities the power allocator needs), and a sample-based Gaussian
//! mutual-information estimator used to cross-check the closed form against
//! Monte Carlo probing.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{hermitian_part, herm_eigen_psd, log2_det_herm, C64};
use crate::{Error, Result};

/// Condition-number ceiling for the sample MI estimator.
const MI_COND_LIMIT: f64 = 1e12;

const LN2: f64 = std::f64::consts::LN_2;

/// Post-estimation noise variances at the two terminals.
#[derive(Debug, Clone, Copy)]
pub struct EffectiveNoise {
    /// `hat_sigma_a^2`, at the multi-antenna terminal.
    pub a: f64,
    /// `hat_sigma_b^2`, at the single-antenna terminal.
    pub b: f64,
}

impl EffectiveNoise {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::Config("effective noise variances must be positive".into()));
        }
        Ok(Self { a, b })
    }

    /// Least-squares estimation noise for the probing protocol: terminal A
    /// averages `q` uplink pilots of power `p_b` per probed coefficient,
    /// terminal B despreads length-`n` downlink pilot sequences of
    /// per-symbol power `p_a`.
    pub fn from_probing(
        sigma2_a: f64,
        sigma2_b: f64,
        q: usize,
        p_b: f64,
        n: usize,
        p_a: f64,
    ) -> Result<Self> {
        if q == 0 || n == 0 {
            return Err(Error::Config("pilot counts must be positive".into()));
        }
        Self::new(sigma2_a / (q as f64 * p_b), sigma2_b / (n as f64 * p_a))
    }

    /// `s = hat_a + hat_b`.
    pub fn sum(&self) -> f64 {
        self.a + self.b
    }

    /// `q = hat_a * hat_b`.
    pub fn product(&self) -> f64 {
        self.a * self.b
    }
}

/// Key rate of one subchannel with signal power `p >= 0`, in bits.
pub fn pair_rate(p: f64, noise: &EffectiveNoise) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    (1.0 + p * p / (noise.sum() * p + noise.product())).log2()
}

/// First derivative of [`pair_rate`] in `p`.
///
/// With `s = hat_a + hat_b` and `q = hat_a hat_b`:
/// `I'(p) = p (s p + 2 q) / (ln2 (p^2 + s p + q)(s p + q))`.
/// Positive for all `p > 0` and zero at `p = 0`.
pub fn pair_rate_d1(p: f64, noise: &EffectiveNoise) -> f64 {
    let (s, q) = (noise.sum(), noise.product());
    p * (s * p + 2.0 * q) / (LN2 * (p * p + s * p + q) * (s * p + q))
}

/// Second derivative of [`pair_rate`] in `p`.
///
/// `I''(p) = { [2 (p^2 + s p + q) - (2 p + s)^2] / (p^2 + s p + q)^2
///             + s^2 / (s p + q)^2 } / ln2`.
/// Positive near zero and negative for large `p`: the rate is convex below
/// its inflection point and concave above it, which is what makes the usual
/// water-filling condition `I'(p) = mu` meaningful only on the concave
/// branch.
pub fn pair_rate_d2(p: f64, noise: &EffectiveNoise) -> f64 {
    let (s, q) = (noise.sum(), noise.product());
    let u = p * p + s * p + q;
    let v = s * p + q;
    ((2.0 * u - (2.0 * p + s).powi(2)) / (u * u) + (s * s) / (v * v)) / LN2
}

/// Key rate for a set of subchannel powers (eigenvalues of `R_W`).
pub fn skr_from_eigenvalues(powers: &DVector<f64>, noise: &EffectiveNoise) -> f64 {
    powers.iter().map(|&p| pair_rate(p, noise)).sum()
}

/// Key rate split into its per-subchannel terms.
#[derive(Debug, Clone)]
pub struct SkrReport {
    /// Total rate, `sum(per_subchannel_bits)`.
    pub bits_per_probe: f64,
    /// One term per eigenvalue of `R_W`, descending eigenvalue order.
    pub per_subchannel_bits: DVector<f64>,
}

/// Eigendecomposes `R_W` and reports the rate per subchannel.
pub fn skr_report(r_w: &DMatrix<C64>, noise: &EffectiveNoise) -> Result<SkrReport> {
    let e = herm_eigen_psd(r_w)?;
    let per = e.values.map(|p| pair_rate(p, noise));
    Ok(SkrReport { bits_per_probe: per.sum(), per_subchannel_bits: per })
}

/// Key rate of probing `R_h` with the design matrix `W` (or a feasible
/// `kron(Phi_bar, P)`): the mutual information between the two terminals'
/// estimates of `W^T h_r`.
///
/// Equals `-log2 det(I - R_W (R_W + hat_a I)^-1 R_W (R_W + hat_b I)^-1)`
/// with `R_W = W^T R_h conj(W)`; evaluated through the eigenvalues of
/// `R_W`, where the determinant factors into the per-subchannel terms of
/// [`skr_from_eigenvalues`]. Negative eigenvalues beyond the PSD tolerance
/// are rejected rather than clamped silently.
pub fn skr_analytic(
    w: &DMatrix<C64>,
    r_h: &DMatrix<C64>,
    noise: &EffectiveNoise,
) -> Result<f64> {
    skr_probed(&probed_covariance(w, r_h)?, noise)
}

/// Key rate of the single-antenna scheme for one reflection vector.
///
/// `v_bar = [1, v^T]^T` holds the direct-path coefficient and the `M` RIS
/// phases; the equivalent scalar channel has power
/// `p_e = v_bar^T R_e conj(v_bar)` and the rate is the scalar case of
/// [`pair_rate`]: `log2(1 + p_e / (hat_a + hat_b + hat_a hat_b / p_e))`.
pub fn sa_skr(v_bar: &DVector<C64>, r_e: &DMatrix<C64>, noise: &EffectiveNoise) -> Result<f64> {
    if r_e.nrows() != v_bar.nrows() || !r_e.is_square() {
        return Err(Error::Dimension(format!(
            "reflection vector of length {} does not fit a {}x{} covariance",
            v_bar.nrows(),
            r_e.nrows(),
            r_e.ncols()
        )));
    }
    let quad = (r_e * v_bar.conjugate()).dotc(&v_bar.conjugate());
    // Quadratic form of a Hermitian PSD matrix: real up to roundoff.
    let p_e = quad.re.max(0.0);
    Ok(pair_rate(p_e, noise))
}

/// Covariance of the probed vector: `R_W = W^T R_h conj(W)`.
///
/// Hermitian PSD for any `W` because it is a congruence of `R_h` by
/// `conj(W)`; hermitized to scrub roundoff before eigenanalysis.
pub fn probed_covariance(w: &DMatrix<C64>, r_h: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    if w.nrows() != r_h.nrows() {
        return Err(Error::Dimension(format!(
            "probing matrix has {} rows but R_h is {}x{}",
            w.nrows(),
            r_h.nrows(),
            r_h.ncols()
        )));
    }
    let wc = w.map(|v| v.conj());
    Ok(hermitian_part(&(w.transpose() * r_h * wc)))
}

/// Key rate of a probed covariance: eigendecomposes `R_W` and sums the
/// per-eigenvalue rates.
pub fn skr_probed(r_w: &DMatrix<C64>, noise: &EffectiveNoise) -> Result<f64> {
    let e = herm_eigen_psd(r_w)?;
    Ok(skr_from_eigenvalues(&e.values, noise))
}

/// Sample estimate of the Gaussian mutual information `I(a; b)` from paired
/// columns of `a` (`d_a x T`) and `b` (`d_b x T`), in bits:
/// `log2 det(R_a) + log2 det(R_b) - log2 det(R_ab)`.
///
/// Moments are raw second moments by default, matching how the probing
/// chain treats the line-of-sight mean as usable signal; `subtract_mean`
/// switches to central covariances for observations whose mean carries no
/// key material. Errors with [`Error::IllConditioned`] when any involved
/// covariance has condition number above `1e12`, since the log-determinant
/// difference is meaningless there.
pub fn gaussian_mi_estimate(
    a: &DMatrix<C64>,
    b: &DMatrix<C64>,
    subtract_mean: bool,
) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension("paired sample sets must have equal column counts".into()));
    }
    let (da, db, t) = (a.nrows(), b.nrows(), a.ncols());
    if t < 2 * (da + db) {
        return Err(Error::Degenerate(format!(
            "{t} samples cannot estimate a {}-dimensional joint covariance",
            da + db
        )));
    }
    let mut joint = DMatrix::<C64>::zeros(da + db, t);
    joint.rows_mut(0, da).copy_from(a);
    joint.rows_mut(da, db).copy_from(b);
    let scale = C64::new(1.0 / t as f64, 0.0);
    let mut r = &joint * joint.adjoint() * scale;
    if subtract_mean {
        let mean = joint.column_sum() * scale;
        r.gerc(C64::new(-1.0, 0.0), &mean, &mean, C64::new(1.0, 0.0));
    }
    let r = hermitian_part(&r);
    let det = |m: DMatrix<C64>| -> Result<f64> {
        let (ld, cond) = log2_det_herm(&m)?;
        if !ld.is_finite() || cond > MI_COND_LIMIT {
            return Err(Error::IllConditioned(cond));
        }
        Ok(ld)
    };
    let ld_a = det(r.view((0, 0), (da, da)).clone_owned())?;
    let ld_b = det(r.view((da, da), (db, db)).clone_owned())?;
    let ld_ab = det(r)?;
    Ok(ld_a + ld_b - ld_ab)
}
