//! Reflection design for the single-antenna terminal.
//!
//! With one antenna at each end, every probe measures the same scalar
//! `h_e = v_bar^T c`, where `c` stacks the direct coefficient on top of the
//! element-wise product of the two reflected links. The achievable rate is
//! then a function of one number, the equivalent-channel power
//! `p_e = v_bar^T R_e conj(v_bar)`, so the design problem is a quadratic
//! form maximized over unit-modulus phases on a `K_q`-ary grid: a discrete,
//! NP-hard program attacked here with the usual relaxation toolkit
//! (dominant eigenvector, Gaussian randomization, coordinate polish).
//!
//! `R_e` is the central covariance of `c`. The direct and cascaded parts
//! are independent in the model, so the cross block vanishes and the
//! matrix is block diagonal: the scalar direct-link variance and the
//! `M x M` covariance of the cascaded coefficients.

use nalgebra::{DMatrix, DVector};

use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

use crate::channel::{cascade, sample_channels, ChannelModel};
use crate::linalg::{cn_vector, hermitian_part, parallel_mc, C64};
use crate::skr::{pair_rate, EffectiveNoise};
use crate::{Error, Result};

/// Largest exhaustive search the oracle path will attempt.
const EXHAUSTIVE_LIMIT: u64 = 1 << 22;

/// Quadratic-form maximization instance for the single-antenna design.
#[derive(Debug, Clone)]
pub struct SaProblem {
    /// Equivalent-channel covariance, `(M+1) x (M+1)`, Hermitian PSD.
    pub r_e: DMatrix<C64>,
    /// Effective noise levels after probing.
    pub noise: EffectiveNoise,
    /// Number of phase levels per reflecting element.
    pub k_q: usize,
}

impl SaProblem {
    pub fn new(r_e: DMatrix<C64>, noise: EffectiveNoise, k_q: usize) -> Result<Self> {
        if r_e.nrows() != r_e.ncols() || r_e.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "equivalent covariance must be square with M >= 1, got {}x{}",
                r_e.nrows(),
                r_e.ncols()
            )));
        }
        if k_q < 2 {
            return Err(Error::Config(format!("phase alphabet needs >= 2 levels, got {k_q}")));
        }
        let r_e = hermitian_part(&r_e);
        let eig = crate::linalg::herm_eigen(&r_e);
        let scale = eig.values[0].abs().max(1.0);
        let min = eig.values[eig.values.len() - 1];
        if min < -crate::linalg::REL_PSD_TOL * scale {
            return Err(Error::NotPsd { min_eig: min, scale });
        }
        Ok(Self { r_e, noise, k_q })
    }

    pub fn m(&self) -> usize {
        self.r_e.nrows() - 1
    }
}

/// Outcome of the phase search.
#[derive(Debug, Clone)]
pub struct SaDesign {
    /// Extended reflection vector, `v_bar[0] = 1`, remaining entries on the
    /// `K_q` phase grid.
    pub v_bar: DVector<C64>,
    /// Equivalent-channel power `v_bar^T R_e conj(v_bar)`.
    pub p_e: f64,
    /// Rate of the designed reflection, bits per probe.
    pub achieved_skr: f64,
}

/// Central covariance of the stacked coefficient vector
/// `c = [h; diag(f) g]`, with the direct/cascaded cross block forced to
/// its model value of zero. Requires a single-antenna geometry.
pub fn build_r_e(model: &ChannelModel, trials: usize, seed: u64) -> Result<DMatrix<C64>> {
    if model.geom.n != 1 {
        return Err(Error::Dimension(format!(
            "single-antenna covariance requires N = 1, got N = {}",
            model.geom.n
        )));
    }
    if trials == 0 {
        return Err(Error::Config("covariance estimation needs at least one draw".into()));
    }
    let d = model.geom.d_cascaded();
    let zero = (DVector::<C64>::zeros(d), DMatrix::<C64>::zeros(d, d));
    let (sum, sum_sq) = parallel_mc(
        trials,
        seed,
        |rng, chunk| {
            let mut s = DVector::<C64>::zeros(d);
            let mut ss = DMatrix::<C64>::zeros(d, d);
            for _ in 0..chunk {
                let real = sample_channels(model, rng);
                let c = cascade(&real);
                s += &c;
                ss.gerc(C64::new(1.0, 0.0), &c, &c, C64::new(1.0, 0.0));
            }
            (s, ss)
        },
        |(a, b), (c, d)| (a + c, b + d),
        zero,
    );
    let t = trials as f64;
    let mean = sum / C64::new(t, 0.0);
    let mut cov = sum_sq / C64::new(t, 0.0);
    cov.gerc(C64::new(-1.0, 0.0), &mean, &mean, C64::new(1.0, 0.0));
    cov = hermitian_part(&cov);
    // Independence of the direct and reflected links makes the cross
    // block exactly zero; keep the estimate on that manifold.
    for i in 1..d {
        cov[(0, i)] = C64::new(0.0, 0.0);
        cov[(i, 0)] = C64::new(0.0, 0.0);
    }
    cov[(0, 0)] = C64::new(cov[(0, 0)].re.max(0.0), 0.0);
    Ok(cov)
}

/// Nearest grid vector: rotate so the first entry has phase zero, snap each
/// phase to the `K_q`-ary grid, and pin the first entry to exactly one.
fn quantize_phases(x: &DVector<C64>, k_q: usize) -> DVector<C64> {
    let step = TAU / k_q as f64;
    let rot = if x[0].norm() > 0.0 { x[0].conj() / C64::new(x[0].norm(), 0.0) } else { C64::new(1.0, 0.0) };
    let mut v = DVector::from_fn(x.len(), |i, _| {
        let z = x[i] * rot;
        if z.norm() == 0.0 {
            return C64::new(1.0, 0.0);
        }
        let k = (z.arg() / step).round().rem_euclid(k_q as f64);
        C64::from_polar(1.0, k * step)
    });
    v[0] = C64::new(1.0, 0.0);
    v
}

/// `v_bar^T R conj(v_bar)`, real by Hermitian symmetry.
fn quad_form(r: &DMatrix<C64>, v: &DVector<C64>) -> f64 {
    let g = r * v.map(|z| z.conj());
    v.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<C64>().re
}

/// Greedy coordinate ascent over the grid: repeatedly moves single entries
/// to their best phase level until no move helps. The first entry stays
/// pinned at one. Returns the (recomputed) objective value.
fn polish(r: &DMatrix<C64>, v: &mut DVector<C64>, k_q: usize) -> f64 {
    let d = v.len();
    let step = TAU / k_q as f64;
    let mut g = r * v.map(|z| z.conj());
    let mut p = v.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<C64>().re;
    for _ in 0..64 {
        let mut improved = false;
        for i in 1..d {
            let mut best: Option<(C64, C64, f64)> = None;
            for k in 0..k_q {
                let level = C64::from_polar(1.0, k as f64 * step);
                let delta = level - v[i];
                if delta.norm() < 1e-14 {
                    continue;
                }
                // Single-entry update of the quadratic form.
                let gain = 2.0 * (delta * g[i]).re + delta.norm_sqr() * r[(i, i)].re;
                if gain > 1e-12 * p.abs().max(1.0)
                    && best.is_none_or(|(_, _, bg)| gain > bg)
                {
                    best = Some((level, delta, gain));
                }
            }
            if let Some((level, delta, gain)) = best {
                v[i] = level;
                g += r.column(i) * delta.conj();
                p += gain;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    quad_form(r, v)
}

/// Phase design by eigenvector relaxation with Gaussian randomization.
///
/// Candidate starts are, in order: the flat (all-ones) reflection, the
/// quantized dominant eigenvector of `R_e`, and `n_rand` complex Gaussian
/// perturbations of that eigenvector. Every start is polished by greedy
/// coordinate ascent and the best polished point wins; ties keep the
/// earliest candidate, so doing nothing beats churn. Growing `n_rand` with
/// the same rng therefore never lowers the objective.
pub fn optimize_phase_sa(
    prob: &SaProblem,
    n_rand: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SaDesign> {
    let d = prob.r_e.nrows();
    let eig = crate::linalg::herm_eigen(&prob.r_e);
    let lambda_max = eig.values[0].max(0.0);
    let u: DVector<C64> = eig.vectors.column(0).into_owned();
    let tau = 0.1 * u.iter().map(|z| z.norm()).fold(0.0, f64::max);

    let flat = DVector::from_element(d, C64::new(1.0, 0.0));
    let mut best_v = flat.clone();
    let mut best_p = quad_form(&prob.r_e, &flat);

    let consider = |start: DVector<C64>, best_v: &mut DVector<C64>, best_p: &mut f64| {
        let mut v = start;
        let p = polish(&prob.r_e, &mut v, prob.k_q);
        if p > *best_p {
            *best_p = p;
            *best_v = v;
        }
    };
    consider(flat, &mut best_v, &mut best_p);
    consider(quantize_phases(&u, prob.k_q), &mut best_v, &mut best_p);
    for _ in 0..n_rand {
        let draw = &u + cn_vector(rng, d, tau.max(0.0));
        consider(quantize_phases(&draw, prob.k_q), &mut best_v, &mut best_p);
    }

    let p_e = best_p.max(0.0);
    let bound = d as f64 * lambda_max;
    assert!(
        p_e <= bound * (1.0 + 1e-9) + 1e-12,
        "equivalent power {p_e} exceeds the trace bound {bound}"
    );
    let achieved_skr = pair_rate(p_e, &prob.noise);
    Ok(SaDesign { v_bar: best_v, p_e, achieved_skr })
}

/// Exhaustive grid search over all `K_q^M` reflections. Oracle-grade:
/// refuses problems too large to enumerate.
pub fn exhaustive_phase_search(prob: &SaProblem) -> Result<SaDesign> {
    let m = prob.m();
    let total = (prob.k_q as u64).checked_pow(m as u32).filter(|&t| t <= EXHAUSTIVE_LIMIT);
    let total = total.ok_or_else(|| {
        Error::Config(format!("exhaustive search over {}^{m} reflections is too large", prob.k_q))
    })?;
    let step = TAU / prob.k_q as f64;
    let mut best_v = DVector::from_element(m + 1, C64::new(1.0, 0.0));
    let mut best_p = quad_form(&prob.r_e, &best_v);
    for code in 0..total {
        let mut v = DVector::from_element(m + 1, C64::new(1.0, 0.0));
        let mut rem = code;
        for i in 0..m {
            let k = rem % prob.k_q as u64;
            rem /= prob.k_q as u64;
            v[i + 1] = C64::from_polar(1.0, k as f64 * step);
        }
        let p = quad_form(&prob.r_e, &v);
        if p > best_p {
            best_p = p;
            best_v = v;
        }
    }
    let p_e = best_p.max(0.0);
    Ok(SaDesign { v_bar: best_v, p_e, achieved_skr: pair_rate(p_e, &prob.noise) })
}
