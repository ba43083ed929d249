//! Power allocation across cascaded-channel eigendirections.
//!
//! Diagonalizing the probing problem leaves one scalar decision per
//! eigendirection of `R_h`: the probed power `p_i`, constrained by the
//! total probe energy `sum_i p_i / p_{h,i} = budget` (the Frobenius norm
//! of the design matrix). The per-subchannel rate `I(p)` is convex below
//! an inflection power `p_co` and concave above it, so plain water-filling
//! does not apply: stationarity `y_i(p_i) = mu` with
//! `y_i(p) = p_{h,i} I'(p)` identifies a maximum only on the concave
//! branch `p >= p_co`, and every subchannel carries a power floor
//! `gamma_i = p_{h,i} p_co` below which it is pinned rather than solved.
//!
//! [`water_fill`] runs the resulting two-level scheme: an outer bisection
//! on the water level `mu` binds the budget while an inner bisection per
//! active subchannel inverts `y_i` on the concave branch; subchannels
//! whose peak `y_i(p_co)` sits below the water level can never reach it
//! and are pinned at `gamma_i`, and the active set shrinks monotonically
//! until the Karush-Kuhn-Tucker residuals hold. [`build_w`] then lifts the
//! allocation back to the design matrix `W = conj(U_h) diag(sqrt(p_i / p_{h,i}))`
//! whose probed covariance has exactly the allocated eigenvalues.

use nalgebra::{DMatrix, DVector};

use crate::channel::CorrelationModel;
use crate::linalg::C64;
use crate::skr::{pair_rate_d1, pair_rate_d2, skr_from_eigenvalues, EffectiveNoise};
use crate::{Error, Result};

/// Stationarity tolerance: active subchannels satisfy `|y_i(p_i) - mu| <= EPS_STATIONARITY`.
pub const EPS_STATIONARITY: f64 = 1e-8;
/// Budget tolerance, relative: `|spent - budget| <= EPS_BUDGET_REL * budget`.
pub const EPS_BUDGET_REL: f64 = 1e-6;

const OUTER_CAP: usize = 10_000;

/// Probe energy budget implied by unit-modulus phase patterns over `v`
/// pilot slots and an `n`-column orthonormal precoder: `(m + 1) * v * n`.
/// Equals `(m + 1)^2 n` when the pattern is square (`v = m + 1`).
pub fn probe_budget(m: usize, v: usize, n: usize) -> f64 {
    ((m + 1) * v * n) as f64
}

/// Water-filling output with its KKT certificate data.
#[derive(Debug, Clone)]
pub struct PowerAllocation {
    /// Allocated probed powers, one per eigendirection of `R_h`.
    pub p: DVector<f64>,
    /// Water level `mu`.
    pub mu: f64,
    /// `true` where stationarity `y_i(p_i) = mu` holds; pinned, dropped and
    /// zero-eigenvalue subchannels are `false`.
    pub active: Vec<bool>,
    /// Power floors `gamma_i = p_{h,i} p_co` (zero for dropped or
    /// zero-eigenvalue subchannels).
    pub gamma: DVector<f64>,
    /// Concavity threshold of the rate function.
    pub p_co: f64,
    /// The energy budget the allocation was solved for.
    pub budget: f64,
    /// Subchannels removed entirely because the budget could not cover
    /// their floor cost.
    pub dropped: usize,
}

impl PowerAllocation {
    /// Budget actually consumed: `sum p_i / p_{h,i}` over positive eigenvalues.
    pub fn spent(&self, p_h: &DVector<f64>) -> f64 {
        self.p
            .iter()
            .zip(p_h.iter())
            .filter(|&(_, &ph)| ph > 0.0)
            .map(|(&p, &ph)| p / ph)
            .sum()
    }

    /// Key rate achieved by this allocation.
    pub fn skr(&self, noise: &EffectiveNoise) -> f64 {
        skr_from_eigenvalues(&self.p, noise)
    }
}

/// Marginal-rate function `y_i(p) = p_{h,i} I'(p)`: the gain per unit of
/// probed power on subchannel `i`. Unimodal with its peak at `p_co`.
pub fn rate_function(p: f64, p_hi: f64, noise: &EffectiveNoise) -> f64 {
    p_hi * pair_rate_d1(p, noise)
}

/// Inflection power `p_co` of the rate function: the unique positive root
/// of `I''(p) = 0`, found by sign-change bisection.
///
/// The bracket is seeded at the equal-noise closed form
/// `sqrt(hat_a hat_b) / sqrt(2)` and widened geometrically in both
/// directions until it straddles the sign change, so arbitrarily small
/// noise scales bracket correctly. The bisection runs to floating-point
/// exhaustion, well inside the 1e-10 contract.
pub fn concavity_threshold(noise: &EffectiveNoise) -> Result<f64> {
    let seed = (noise.product()).sqrt() / std::f64::consts::SQRT_2;
    let mut lo = seed;
    let mut grow = 0;
    while pair_rate_d2(lo, noise) <= 0.0 {
        lo *= 0.25;
        grow += 1;
        if grow > 60 || lo < 1e-300 {
            return Err(Error::Convergence(
                "no convex region found below the bracket seed".into(),
            ));
        }
    }
    let mut hi = seed.max(lo * 2.0);
    grow = 0;
    while pair_rate_d2(hi, noise) >= 0.0 {
        hi *= 4.0;
        grow += 1;
        if grow > 60 {
            return Err(Error::Convergence(
                "no concave region found above the bracket seed".into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if pair_rate_d2(mid, noise) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inverts `y_i` on the concave branch: the unique `p >= p_co` with
/// `y_i(p) = mu`, given `y_i(p_co) >= mu`.
fn concave_root(mu: f64, p_hi: f64, p_co: f64, noise: &EffectiveNoise, eps1: f64) -> f64 {
    let mut lo = p_co;
    let mut hi = p_co;
    for _ in 0..4000 {
        hi *= 2.0;
        if rate_function(hi, p_hi, noise) < mu {
            break;
        }
    }
    let mut mid = hi;
    for _ in 0..500 {
        mid = 0.5 * (lo + hi);
        let y = rate_function(mid, p_hi, noise);
        if (y - mu).abs() <= 0.5 * eps1 || hi - lo <= f64::EPSILON * hi {
            return mid;
        }
        if y > mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// One fixed-active-set pass: bisection on the water level `mu` until the
/// budget binds.
///
/// Subchannels are treated as follows at a trial `mu`:
/// * `p_h[i] <= 0`: excluded, `p_i = 0`, no cost;
/// * `active[i] == false`: pinned, `p_i = gamma_i`, costing `p_co`;
/// * active: `p_i` solves `y_i(p_i) = mu` on the concave branch, clamped
///   at the branch edge `p_co` when the peak `y_i(p_co)` sits below `mu`.
///
/// The edge clamp makes the consumed budget continuous and nonincreasing
/// in `mu`, so the bisection always lands on the budget when the bracket
/// straddles it. Clamped subchannels violate stationarity and are the
/// caller's signal to move them to the pinned set; when even the all-edge
/// state at the top of the bracket overshoots the budget, that state is
/// returned as-is (`spent > budget`) for the same pruning treatment.
pub fn bisection_solve(
    p_h: &DVector<f64>,
    budget: f64,
    noise: &EffectiveNoise,
    active: &[bool],
    mu_bounds: (f64, f64),
    eps1: f64,
    eps2: f64,
) -> Result<(DVector<f64>, f64)> {
    let d = p_h.len();
    assert_eq!(active.len(), d, "active-set mask must match the eigenvalue count");
    let p_co = concavity_threshold(noise)?;
    let peaks: Vec<f64> = p_h.iter().map(|&ph| rate_function(p_co, ph, noise)).collect();

    let fill = |mu: f64| -> (DVector<f64>, f64) {
        let mut p = DVector::zeros(d);
        let mut spent = 0.0;
        for i in 0..d {
            if p_h[i] <= 0.0 {
                continue;
            }
            if !active[i] {
                p[i] = p_h[i] * p_co;
                spent += p_co;
            } else if peaks[i] <= mu {
                p[i] = p_co;
                spent += p_co / p_h[i];
            } else {
                p[i] = concave_root(mu, p_h[i], p_co, noise, eps1);
                spent += p[i] / p_h[i];
            }
        }
        (p, spent)
    };

    let max_peak = peaks
        .iter()
        .zip(active)
        .filter(|&(_, &a)| a)
        .map(|(&pk, _)| pk)
        .fold(0.0_f64, f64::max);
    if max_peak == 0.0 {
        // Nothing active: the allocation is fully pinned and mu is moot.
        let (p, _) = fill(f64::INFINITY);
        return Ok((p, f64::INFINITY));
    }

    let (mut lo, mut hi) = mu_bounds;
    hi = hi.max(max_peak * (1.0 + 1e-9));
    lo = lo.clamp(1e-300, hi * 0.5);
    // Everything clamps to the branch edge at the top of the bracket; if
    // even that overshoots the budget, hand the state back for pruning.
    let (p_top, spent_top) = fill(hi);
    if spent_top - budget > eps2 {
        return Ok((p_top, hi));
    }
    // Shrink `lo` until the residual turns positive (consumption grows
    // without bound as mu -> 0 while anything is active).
    loop {
        let (_, spent) = fill(lo);
        if spent - budget > 0.0 {
            break;
        }
        if (spent - budget).abs() <= eps2 {
            let (p, _) = fill(lo);
            return Ok((p, lo));
        }
        lo *= 1e-3;
        if lo < 1e-300 {
            return Err(Error::Convergence(
                "budget residual never turns positive as the water level vanishes".into(),
            ));
        }
    }

    for _ in 0..OUTER_CAP {
        let mu = (lo * hi).sqrt();
        let (p, spent) = fill(mu);
        let r = spent - budget;
        if r.abs() <= eps2 {
            return Ok((p, mu));
        }
        if r > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        if hi - lo <= f64::EPSILON * hi {
            let (p, _) = fill(hi);
            return Ok((p, hi));
        }
    }
    let (_, spent) = fill(0.5 * (lo + hi));
    Err(Error::Convergence(format!(
        "water-level bisection exceeded {OUTER_CAP} iterations, residual {:.3e}",
        spent - budget
    )))
}

/// Allocates probed powers maximizing the key rate under the energy budget.
///
/// `p_h` must be sorted descending and nonnegative; zero eigenvalues are
/// excluded from the allocation. Because the rate is convex below `p_co`,
/// carrying a weak subchannel at its floor `gamma_i` is not always better
/// than removing it and spending its floor cost elsewhere, so the solver
/// compares every prefix of the descending spectrum and keeps the best
/// (a stronger subchannel dominates a weaker one at equal budget share,
/// so optimal supports are prefixes). Subchannels outside the winning
/// prefix are reported in `dropped`; a budget too small for even the
/// strongest subchannel alone is an error.
pub fn water_fill(
    p_h: &DVector<f64>,
    budget: f64,
    noise: &EffectiveNoise,
) -> Result<PowerAllocation> {
    water_fill_with_tol(p_h, budget, noise, EPS_STATIONARITY, EPS_BUDGET_REL * budget)
}

/// [`water_fill`] with explicit stationarity (`eps1`, on `y`) and budget
/// (`eps2`, absolute) tolerances.
pub fn water_fill_with_tol(
    p_h: &DVector<f64>,
    budget: f64,
    noise: &EffectiveNoise,
    eps1: f64,
    eps2: f64,
) -> Result<PowerAllocation> {
    let d = p_h.len();
    if d == 0 {
        return Err(Error::Dimension("empty eigenvalue vector".into()));
    }
    for i in 0..d {
        if !p_h[i].is_finite() || p_h[i] < 0.0 {
            return Err(Error::Config("eigenvalues must be finite and nonnegative".into()));
        }
        if i > 0 && p_h[i] > p_h[i - 1] {
            return Err(Error::Config("eigenvalues must be sorted descending".into()));
        }
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::Config("budget must be positive and finite".into()));
    }
    let p_co = concavity_threshold(noise)?;

    let positives: Vec<usize> = (0..d).filter(|&i| p_h[i] > 0.0).collect();
    if positives.is_empty() {
        return Err(Error::Degenerate("all eigenvalues are zero".into()));
    }
    // Every kept subchannel costs at least its floor p_co, which caps the
    // feasible prefix length.
    let k_max = positives
        .len()
        .min((budget * (1.0 + 1e-12) / p_co).floor() as usize);
    if k_max == 0 {
        return Err(Error::Infeasible(format!(
            "budget {budget:.3e} is below the single-subchannel floor {p_co:.3e}"
        )));
    }

    let mut best: Option<PowerAllocation> = None;
    let mut last_err = None;
    for k in (1..=k_max).rev() {
        match solve_prefix(p_h, &positives[..k], budget, noise, p_co, eps1, eps2) {
            Ok(mut alloc) => {
                alloc.dropped = positives.len() - k;
                let better = match &best {
                    Some(b) => alloc.skr(noise) > b.skr(noise),
                    None => true,
                };
                if better {
                    best = Some(alloc);
                }
            }
            // Prefixes whose budget lands in a band no active set can
            // bind are skipped; some other prefix absorbs the budget.
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one prefix was attempted"))
}

/// KKT solve with the support fixed to `kept` (indices into `p_h`).
fn solve_prefix(
    p_h: &DVector<f64>,
    kept: &[usize],
    budget: f64,
    noise: &EffectiveNoise,
    p_co: f64,
    eps1: f64,
    eps2: f64,
) -> Result<PowerAllocation> {
    let d = p_h.len();
    let mut ph_eff = DVector::zeros(d);
    for &i in kept {
        ph_eff[i] = p_h[i];
    }
    let mut active = vec![false; d];
    for &i in kept {
        active[i] = true;
    }

    // Solve, move rule violators to the pinned set, re-solve: the pinned
    // set grows monotonically, so the loop settles within D rounds.
    for _round in 0..=d + 1 {
        let (p, mu) = bisection_solve(&ph_eff, budget, noise, &active, (1e-30, 1.0), eps1, eps2)?;
        let spent: f64 = kept.iter().map(|&i| p[i] / ph_eff[i]).sum();
        let flips: Vec<usize> = if spent - budget > eps2 {
            // The all-edge state at the top of the water-level bracket
            // already overshoots, so this active set cannot bind the
            // budget at all: retire the weakest active subchannel. The
            // state itself is not a stationary candidate, so the
            // membership rules below do not apply to it.
            kept.iter()
                .copied()
                .filter(|&i| active[i])
                .min_by(|&a, &b| {
                    rate_function(p_co, ph_eff[a], noise)
                        .total_cmp(&rate_function(p_co, ph_eff[b], noise))
                })
                .into_iter()
                .collect()
        } else {
            // A subchannel leaves the active set when its solved power
            // falls to the threshold gamma_i, or when it is stuck at the
            // branch edge because its peak rate cannot reach the water
            // level.
            let mut f: Vec<usize> = kept
                .iter()
                .copied()
                .filter(|&i| active[i])
                .filter(|&i| {
                    p[i] <= ph_eff[i] * p_co * (1.0 + 1e-9)
                        || rate_function(p[i], ph_eff[i], noise) < mu - eps1
                })
                .collect();
            // Pinning every remaining subchannel leaves the all-floor
            // state, which spends exactly kept * p_co and cannot absorb
            // any slack above it: keep the strongest peak active so the
            // slack has somewhere to go.
            let n_act = kept.iter().filter(|&&i| active[i]).count();
            if f.len() == n_act && budget - kept.len() as f64 * p_co > eps2 {
                if let Some(keep) = f.iter().copied().max_by(|&a, &b| {
                    rate_function(p_co, ph_eff[a], noise)
                        .total_cmp(&rate_function(p_co, ph_eff[b], noise))
                }) {
                    f.retain(|&i| i != keep);
                }
            }
            f
        };
        if flips.is_empty() {
            if (spent - budget).abs() <= eps2 {
                let mut gamma = DVector::zeros(d);
                for &i in kept {
                    gamma[i] = ph_eff[i] * p_co;
                }
                return Ok(PowerAllocation { p, mu, active, gamma, p_co, budget, dropped: 0 });
            }
            return Err(Error::Convergence(format!(
                "budget residual {:.3e} exceeds tolerance with no prunable subchannel",
                spent - budget
            )));
        }
        for i in flips {
            active[i] = false;
        }
    }
    Err(Error::Convergence("active-set pruning failed to settle".into()))
}

/// Design matrix realizing an allocation with optimal probing.
#[derive(Debug, Clone)]
pub struct OptimalDesign {
    /// `D x cols` design matrix; `W^T R_h conj(W)` has eigenvalues `p`.
    pub w: DMatrix<C64>,
    /// Key rate of the allocation, in bits.
    pub achieved_skr: f64,
}

/// Lifts an allocation to the design matrix
/// `W = conj(U_h) diag(sqrt(p_i / p_{h,i}))`, padded with zero columns up
/// to `cols`.
///
/// `||W||_F^2` equals the consumed budget, and the probed covariance
/// `W^T R_h conj(W)` reproduces the allocated powers exactly. A positive
/// allocation on a zero eigenvalue is rejected: that direction carries no
/// channel energy to probe.
pub fn build_w(
    alloc: &PowerAllocation,
    corr: &CorrelationModel,
    noise: &EffectiveNoise,
    cols: usize,
) -> Result<OptimalDesign> {
    let d = corr.p_h.len();
    if alloc.p.len() != d {
        return Err(Error::Dimension(format!(
            "allocation has {} entries but the correlation model has {d}",
            alloc.p.len()
        )));
    }
    let used = (0..d).filter(|&i| alloc.p[i] > 0.0).count();
    if cols < used {
        return Err(Error::Dimension(format!(
            "{cols} columns cannot carry {used} allocated subchannels"
        )));
    }
    let mut w = DMatrix::<C64>::zeros(d, cols);
    for i in 0..d.min(cols) {
        if alloc.p[i] == 0.0 {
            continue;
        }
        if corr.p_h[i] <= 0.0 {
            return Err(Error::Degenerate(format!(
                "subchannel {i} has zero eigenvalue but power {:.3e}",
                alloc.p[i]
            )));
        }
        let scale = C64::new((alloc.p[i] / corr.p_h[i]).sqrt(), 0.0);
        let src = corr.u_h.column(i);
        let mut dst = w.column_mut(i);
        for r in 0..d {
            dst[r] = src[r].conj() * scale;
        }
    }
    Ok(OptimalDesign { w, achieved_skr: skr_from_eigenvalues(&alloc.p, noise) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cn_scalar, herm_eigen_psd, hermitian_part, stream_rng};
    use crate::skr::{pair_rate, skr_probed, probed_covariance};
    use nalgebra::dvector;

    fn noise(a: f64, b: f64) -> EffectiveNoise {
        EffectiveNoise::new(a, b).unwrap()
    }

    #[test]
    fn concavity_threshold_matches_equal_noise_closed_form() {
        // At hat_a = hat_b = s the inflection sits at s / sqrt(2).
        for &s in &[1.0, 2.0, 1e-3, 3.7e-12] {
            let got = concavity_threshold(&noise(s, s)).unwrap();
            let want = s / std::f64::consts::SQRT_2;
            assert!(
                (got / want - 1.0).abs() < 1e-10,
                "p_co at noise {s}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn concavity_threshold_is_a_sign_change() {
        let n = noise(0.8, 2.3);
        let p_co = concavity_threshold(&n).unwrap();
        assert!(p_co > 0.0);
        assert!(pair_rate_d2(p_co * (1.0 - 1e-6), &n) > 0.0, "convex below");
        assert!(pair_rate_d2(p_co * (1.0 + 1e-6), &n) < 0.0, "concave above");
        // Smaller noise moves the inflection down.
        let a = concavity_threshold(&noise(1e-6, 1e-6)).unwrap();
        let b = concavity_threshold(&noise(1e-3, 1e-3)).unwrap();
        let c = concavity_threshold(&noise(1.0, 1.0)).unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn rate_function_is_the_scaled_rate_derivative() {
        let n = noise(1.0, 1.0);
        // Centered finite difference of the rate sum at p = 1, p_h = 1.
        let h = 1e-6;
        let fd = (pair_rate(1.0 + h, &n) - pair_rate(1.0 - h, &n)) / (2.0 * h);
        let got = rate_function(1.0, 1.0, &n);
        assert!((got - fd).abs() < 1e-6, "y(1) = {got} vs finite difference {fd}");
        assert_eq!(rate_function(0.0, 5.0, &n), 0.0, "numerator vanishes at p = 0");
        assert!(rate_function(1e12, 5.0, &n) < 1e-10, "derivative saturates at large p");
        // Scaling in p_h is linear.
        let y1 = rate_function(2.0, 1.5, &n);
        let y2 = rate_function(2.0, 3.0, &n);
        assert!((y2 / y1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_eigenvalues_split_the_budget_evenly() {
        let n = noise(1.0, 1.0);
        for &(c, budget) in &[(1.0, 8.0), (2.5, 40.0)] {
            let p_h = DVector::from_element(4, c);
            let alloc = water_fill(&p_h, budget, &n).unwrap();
            let want = c * budget / 4.0;
            for i in 0..4 {
                assert!(
                    (alloc.p[i] / want - 1.0).abs() < 1e-6,
                    "c={c} budget={budget}: p[{i}] = {} want {want}",
                    alloc.p[i]
                );
                assert!(alloc.active[i]);
            }
            assert!((alloc.spent(&p_h) - budget).abs() <= EPS_BUDGET_REL * budget);
        }
        // A tight budget puts the even share barely above the concavity
        // threshold, where three larger shares carry more rate than four
        // even ones: the support shrinks but stays evenly split.
        let p_h = DVector::from_element(4, 1.0);
        let alloc = water_fill(&p_h, 4.0, &n).unwrap();
        let kept: Vec<f64> = alloc.p.iter().copied().filter(|&p| p > 0.0).collect();
        assert_eq!(kept.len(), 3, "one subchannel dropped");
        for &p in &kept {
            assert!((p / (4.0 / 3.0) - 1.0).abs() < 1e-5, "share {p} off the even split");
        }
        assert!(alloc.skr(&n) > 4.0 * pair_rate(1.0, &n), "dropping must beat the even split");
    }

    #[test]
    fn single_subchannel_takes_the_whole_budget() {
        let n = noise(0.5, 2.0);
        let p_h = dvector![3.0];
        let alloc = water_fill(&p_h, 7.0, &n).unwrap();
        // Budget binds within its relative tolerance: |p / p_h - budget| <= eps2.
        assert!(
            (alloc.p[0] - 21.0).abs() <= 3.0 * EPS_BUDGET_REL * 7.0,
            "p = budget * p_h: got {}",
            alloc.p[0]
        );
        assert!((rate_function(alloc.p[0], 3.0, &n) - alloc.mu).abs() <= EPS_STATIONARITY);
    }

    #[test]
    fn kkt_certificate_holds_with_mixed_active_set() {
        // Wide eigenvalue spread at a moderate budget pins the weak tail.
        let n = noise(0.3, 1.2);
        let p_h = dvector![120.0, 40.0, 8.0, 1.0, 0.05, 1e-3, 1e-4];
        let budget = 30.0;
        let alloc = water_fill(&p_h, budget, &n).unwrap();
        let eps2 = EPS_BUDGET_REL * budget;
        assert!((alloc.spent(&p_h) - budget).abs() <= eps2, "budget must bind");
        let mut n_active = 0;
        for i in 0..p_h.len() {
            if alloc.active[i] {
                n_active += 1;
                let y = rate_function(alloc.p[i], p_h[i], &n);
                assert!(
                    (y - alloc.mu).abs() <= EPS_STATIONARITY,
                    "stationarity at {i}: |{y} - {}|",
                    alloc.mu
                );
                assert!(alloc.p[i] >= alloc.gamma[i] * (1.0 - 1e-9), "floor respected");
            } else {
                assert_eq!(alloc.p[i], alloc.gamma[i], "pinned exactly at the floor");
            }
        }
        assert!(n_active >= 2, "strong subchannels stay active");
        assert!(n_active < p_h.len(), "weak tail must pin at this budget");
        // More budget never hurts.
        let richer = water_fill(&p_h, 60.0, &n).unwrap();
        assert!(richer.skr(&n) >= alloc.skr(&n));
    }

    #[test]
    fn two_subchannel_allocation_matches_grid_search() {
        let n = noise(1.0, 1.0);
        let p_h = dvector![2.0, 1.0];
        let budget = 20.0;
        let alloc = water_fill(&p_h, budget, &n).unwrap();
        let skr_wf = alloc.skr(&n);
        // Dense search over p_2 with p_1 = p_h1 (budget - p_2 / p_h2).
        let eval = |p2: f64| {
            let p1 = 2.0 * (budget - p2);
            pair_rate(p1, &n) + pair_rate(p2, &n)
        };
        let mut best = (0.0, f64::MIN);
        let mut step = budget * 1e-3;
        let (mut lo, mut hi) = (0.0, budget);
        for _ in 0..3 {
            let mut p2 = lo;
            while p2 <= hi {
                let v = eval(p2);
                if v > best.1 {
                    best = (p2, v);
                }
                p2 += step;
            }
            lo = (best.0 - step).max(0.0);
            hi = (best.0 + step).min(budget);
            step *= 1e-2;
        }
        assert!(
            skr_wf >= best.1 - 1e-2,
            "water-filling {skr_wf} must reach the grid optimum {}",
            best.1
        );
    }

    #[test]
    fn three_subchannel_allocation_matches_grid_search() {
        let n = noise(0.7, 1.3);
        let p_h = dvector![3.0, 1.0, 0.5];
        let budget = 30.0;
        let skr_wf = water_fill(&p_h, budget, &n).unwrap().skr(&n);
        // Search the simplex of budget shares (t_i = p_i / p_h_i).
        let eval = |t2: f64, t3: f64| {
            let t1 = budget - t2 - t3;
            pair_rate(3.0 * t1, &n) + pair_rate(t2, &n) + pair_rate(0.5 * t3, &n)
        };
        let mut best = (0.0, 0.0, f64::MIN);
        let mut step = budget / 150.0;
        let (mut c2, mut c3) = (budget * 0.5, budget * 0.5);
        let mut span = budget * 0.5;
        for _ in 0..4 {
            let mut t2 = (c2 - span).max(0.0);
            while t2 <= (c2 + span).min(budget) {
                let mut t3 = (c3 - span).max(0.0);
                while t3 <= (c3 + span).min(budget - t2) {
                    let v = eval(t2, t3);
                    if v > best.2 {
                        best = (t2, t3, v);
                    }
                    t3 += step;
                }
                t2 += step;
            }
            c2 = best.0;
            c3 = best.1;
            span = step * 2.0;
            step *= 0.05;
        }
        assert!(
            skr_wf >= best.2 - 1e-2,
            "water-filling {skr_wf} must reach the grid optimum {}",
            best.2
        );
    }

    #[test]
    fn higher_water_level_gives_smaller_powers() {
        let n = noise(1.0, 1.0);
        let p_h = dvector![5.0, 2.0];
        let active = [true, true];
        // Solve at two budgets; the tighter budget must raise mu and shrink p.
        let (p_lo, mu_lo) =
            bisection_solve(&p_h, 40.0, &n, &active, (1e-30, 1.0), 1e-8, 1e-6 * 40.0).unwrap();
        let (p_hi, mu_hi) =
            bisection_solve(&p_h, 10.0, &n, &active, (1e-30, 1.0), 1e-8, 1e-6 * 10.0).unwrap();
        assert!(mu_hi > mu_lo, "smaller budget means higher water level");
        for i in 0..2 {
            assert!(p_hi[i] < p_lo[i], "higher mu must shrink p[{i}]");
        }
    }

    #[test]
    fn infeasible_budget_drops_weak_subchannels() {
        let n = noise(1.0, 1.0);
        let p_co = concavity_threshold(&n).unwrap();
        let p_h = dvector![4.0, 2.0, 1.0, 0.5];
        // Room for only two floors.
        let budget = 2.5 * p_co;
        let alloc = water_fill(&p_h, budget, &n).unwrap();
        assert_eq!(alloc.dropped, 2, "two weakest subchannels dropped");
        assert_eq!(alloc.p[3], 0.0);
        assert_eq!(alloc.gamma[3], 0.0);
        assert!((alloc.spent(&p_h) - budget).abs() <= EPS_BUDGET_REL * budget);
        // Nothing fits: explicit error.
        assert!(matches!(
            water_fill(&p_h, 0.1 * p_co, &n),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn zero_eigenvalues_are_excluded_from_the_allocation() {
        let n = noise(1.0, 1.0);
        let p_h = dvector![2.0, 1.0, 0.0, 0.0];
        let alloc = water_fill(&p_h, 10.0, &n).unwrap();
        assert_eq!(alloc.p[2], 0.0);
        assert_eq!(alloc.p[3], 0.0);
        assert!(!alloc.active[2] && !alloc.active[3]);
        assert!((alloc.spent(&p_h) - 10.0).abs() <= 1e-5);
        assert!(alloc.p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_malformed_inputs() {
        let n = noise(1.0, 1.0);
        assert!(water_fill(&dvector![1.0, 2.0], 5.0, &n).is_err(), "ascending order");
        assert!(water_fill(&dvector![1.0, -0.5], 5.0, &n).is_err(), "negative eigenvalue");
        assert!(water_fill(&dvector![1.0], -1.0, &n).is_err(), "negative budget");
        assert!(water_fill(&dvector![0.0, 0.0], 5.0, &n).is_err(), "all-zero spectrum");
    }

    fn random_correlation(d: usize, seed: u64) -> CorrelationModel {
        let mut rng = stream_rng(seed, 0);
        let x = DMatrix::from_fn(d, d + 2, |_, _| cn_scalar(&mut rng, 1.0));
        let r_h = hermitian_part(&(&x * x.adjoint()));
        let e = herm_eigen_psd(&r_h).unwrap();
        CorrelationModel { r_h, u_h: e.vectors, p_h: e.values }
    }

    #[test]
    fn design_matrix_reproduces_the_allocation() {
        let n = noise(0.4, 0.9);
        let corr = random_correlation(6, 51);
        let budget = 24.0;
        let alloc = water_fill(&corr.p_h, budget, &n).unwrap();
        let design = build_w(&alloc, &corr, &n, 6).unwrap();
        // Frobenius constraint.
        let fro: f64 = design.w.norm_squared();
        assert!((fro / budget - 1.0).abs() < 1e-6, "||W||_F^2 = {fro}, budget {budget}");
        // Probed covariance has the allocated powers as eigenvalues.
        let r_w = probed_covariance(&design.w, &corr.r_h).unwrap();
        let eigs = herm_eigen_psd(&r_w).unwrap().values;
        let mut want: Vec<f64> = alloc.p.iter().copied().collect();
        want.sort_by(|a, b| b.total_cmp(a));
        for i in 0..6 {
            assert!(
                (eigs[i] - want[i]).abs() <= 1e-6 * want[0],
                "eigenvalue {i}: {} vs {}",
                eigs[i],
                want[i]
            );
        }
        // Rate chain: probing with W achieves the allocation's rate.
        let via_probe = skr_probed(&r_w, &n).unwrap();
        assert!(
            (via_probe - design.achieved_skr).abs() < 1e-8,
            "{via_probe} vs {}",
            design.achieved_skr
        );
    }

    #[test]
    fn identity_covariance_yields_orthogonal_uniform_design() {
        let n = noise(1.0, 1.0);
        let d = 4;
        let r_h = DMatrix::<C64>::identity(d, d);
        let e = herm_eigen_psd(&r_h).unwrap();
        let corr = CorrelationModel { r_h: r_h.clone(), u_h: e.vectors, p_h: e.values };
        let budget = 16.0;
        let alloc = water_fill(&corr.p_h, budget, &n).unwrap();
        let design = build_w(&alloc, &corr, &n, d).unwrap();
        // Columns are orthogonal with squared norm budget / D each; the
        // diagonal inherits the solver's relative budget tolerance.
        let gram = design.w.adjoint() * &design.w;
        for i in 0..d {
            for j in 0..d {
                let (want, tol) = if i == j {
                    (budget / d as f64, EPS_BUDGET_REL * budget)
                } else {
                    (0.0, 1e-9)
                };
                assert!(
                    (gram[(i, j)] - C64::new(want, 0.0)).norm() <= tol,
                    "gram[{i},{j}] = {}",
                    gram[(i, j)]
                );
            }
        }
    }

    #[test]
    fn design_pads_extra_columns_with_zeros() {
        let n = noise(1.0, 1.0);
        let corr = random_correlation(4, 77);
        let alloc = water_fill(&corr.p_h, 12.0, &n).unwrap();
        let narrow = build_w(&alloc, &corr, &n, 4).unwrap();
        let wide = build_w(&alloc, &corr, &n, 9).unwrap();
        assert_eq!(wide.w.ncols(), 9);
        assert!(wide.w.columns(4, 5).iter().all(|v| *v == C64::new(0.0, 0.0)));
        assert!((wide.w.norm_squared() - narrow.w.norm_squared()).abs() < 1e-12);
        // Too few columns for the allocated subchannels: error.
        assert!(build_w(&alloc, &corr, &n, 2).is_err());
    }

    #[test]
    fn power_on_a_zero_eigenvalue_is_rejected() {
        let n = noise(1.0, 1.0);
        let corr = {
            let mut c = random_correlation(3, 12);
            c.p_h[2] = 0.0;
            c
        };
        let alloc = PowerAllocation {
            p: dvector![1.0, 1.0, 0.5],
            mu: 1.0,
            active: vec![true, true, true],
            gamma: dvector![0.0, 0.0, 0.0],
            p_co: 0.7,
            budget: 3.0,
            dropped: 0,
        };
        assert!(matches!(build_w(&alloc, &corr, &n, 3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn budget_arithmetic_for_square_and_padded_patterns() {
        assert_eq!(probe_budget(16, 17, 2), 578.0);
        assert_eq!(probe_budget(16, 32, 2), 1088.0);
        assert_eq!(probe_budget(4, 5, 1), 25.0);
    }

    #[test]
    fn water_fill_is_deterministic() {
        let n = noise(0.3, 1.2);
        let p_h = dvector![120.0, 40.0, 8.0, 1.0, 0.05];
        let a = water_fill(&p_h, 30.0, &n).unwrap();
        let b = water_fill(&p_h, 30.0, &n).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.mu, b.mu);
    }
}
