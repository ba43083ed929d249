//! Release gate: one test per exit criterion, covering the optimizer
//! contracts, the geometry-determined anchors, analytic-vs-simulated rate
//! agreement, trend behavior and the key-quality pipeline.
//!
//! Each test prints a `PASS k/10` line with its measured figures, so a
//! `--nocapture` run doubles as a gate report. The suite serializes itself
//! through a global lock so the per-criterion wall-clock limits are
//! measured without contention from sibling tests.

use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use ris_keygen::channel::{estimate_r_h, BlockSampler};
use ris_keygen::decompose::{decompose, orthonormal_fit, riemannian_refine};
use ris_keygen::experiments::{
    build_model, effective_noise, render_csv, run_case, sweep, Algorithm, ScenarioConfig,
    SweepVar,
};
use ris_keygen::linalg::{cn_matrix, cn_scalar, hermitian_part, stream_rng, C64};
use ris_keygen::sa_design::{exhaustive_phase_search, optimize_phase_sa, SaProblem};
use ris_keygen::skr::{pair_rate, EffectiveNoise};
use ris_keygen::waterfill::{
    build_w, concavity_threshold, rate_function, water_fill, EPS_BUDGET_REL, EPS_STATIONARITY,
};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn assert_within(elapsed: Duration, limit_s: u64, what: &str) {
    assert!(
        elapsed <= Duration::from_secs(limit_s),
        "{what} took {elapsed:?}, over the {limit_s} s limit"
    );
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `skr_bits` column of a rendered CSV report, in row order.
fn csv_skr_column(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .collect()
}

#[test]
fn gate_01_waterfill_kkt_certificates_hold_on_random_instances() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = stream_rng(0xACC0_0001, 0);
    let (mut worst_stat, mut worst_budget) = (0.0f64, 0.0f64);
    for inst in 0..200 {
        let d = rng.random_range(1..=40usize);
        let mut vals: Vec<f64> = (0..d)
            .map(|_| {
                cn_scalar(&mut rng, 1.0).norm_sqr() * 10f64.powf(rng.random_range(-1.5..1.5))
            })
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        // A fifth of the instances carry zero eigenvalues.
        if inst % 5 == 0 && d > 2 {
            let z = rng.random_range(1..=(d - 1).min(3));
            let len = vals.len();
            for v in &mut vals[len - z..] {
                *v = 0.0;
            }
        }
        let p_h = DVector::from_vec(vals);
        let noise = EffectiveNoise::new(
            10f64.powf(rng.random_range(-4.0..0.5)),
            10f64.powf(rng.random_range(-4.0..0.5)),
        )
        .unwrap();
        let p_co = concavity_threshold(&noise).unwrap();
        // Cheapest all-active state: every subchannel at the branch edge.
        // Budgets below that sit in bands no active set can bind.
        let base: f64 = p_h
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| p_co * (1.0 / x).max(1.0))
            .sum();
        let budget = base * 10f64.powf(rng.random_range(0.1..1.3));
        let alloc = water_fill(&p_h, budget, &noise).unwrap();
        for i in 0..d {
            if alloc.active[i] {
                let r = (rate_function(alloc.p[i], p_h[i], &noise) - alloc.mu).abs();
                assert!(r <= EPS_STATIONARITY, "instance {inst}, channel {i}: |y - mu| = {r:.3e}");
                worst_stat = worst_stat.max(r);
            } else {
                assert_eq!(alloc.p[i], alloc.gamma[i], "instance {inst}, channel {i}: pin");
            }
        }
        let resid = (alloc.spent(&p_h) - budget).abs();
        assert!(resid <= EPS_BUDGET_REL * budget, "instance {inst}: budget residual {resid:.3e}");
        worst_budget = worst_budget.max(resid / budget);
    }
    let dt = t0.elapsed();
    assert_within(dt, 30, "KKT certificate suite");
    eprintln!(
        "PASS 1/10 kkt-certificates: 200 instances, worst stationarity {worst_stat:.2e}, \
         worst relative budget residual {worst_budget:.2e}, {dt:.1?}"
    );
}

/// Best rate over a dense grid on the budget simplex, the allocation search
/// space with no structure assumed (boundary points included).
fn simplex_grid_best(p_h: &DVector<f64>, budget: f64, noise: &EffectiveNoise) -> f64 {
    match p_h.len() {
        2 => {
            let steps = 20_000;
            let mut best = f64::MIN;
            for s in 0..=steps {
                let b1 = budget * s as f64 / steps as f64;
                let r = pair_rate(p_h[0] * b1, noise) + pair_rate(p_h[1] * (budget - b1), noise);
                best = best.max(r);
            }
            best
        }
        3 => {
            let steps = 600;
            let mut best = f64::MIN;
            for s1 in 0..=steps {
                let b1 = budget * s1 as f64 / steps as f64;
                for s2 in 0..=(steps - s1) {
                    let b2 = budget * s2 as f64 / steps as f64;
                    let r = pair_rate(p_h[0] * b1, noise)
                        + pair_rate(p_h[1] * b2, noise)
                        + pair_rate(p_h[2] * (budget - b1 - b2), noise);
                    best = best.max(r);
                }
            }
            best
        }
        _ => unreachable!("grid search supports two or three subchannels"),
    }
}

#[test]
fn gate_02_waterfill_matches_brute_force_on_small_problems() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = stream_rng(0xACC0_0002, 0);
    let mut worst = 0.0f64;
    for inst in 0..20 {
        let d = 2 + inst % 2;
        let mut vals: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.5)).collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let p_h = DVector::from_vec(vals);
        let noise = EffectiveNoise::new(
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        )
        .unwrap();
        let p_co = concavity_threshold(&noise).unwrap();
        let budget = d as f64 * p_co * rng.random_range(2.0..6.0);
        let wf = water_fill(&p_h, budget, &noise).unwrap().skr(&noise);
        let grid = simplex_grid_best(&p_h, budget, &noise);
        let gap = (wf - grid).abs();
        assert!(gap <= 1e-2, "instance {inst} (D={d}): water-fill {wf} vs grid {grid}");
        worst = worst.max(gap);
    }
    let dt = t0.elapsed();
    assert_within(dt, 120, "brute-force comparison");
    eprintln!("PASS 2/10 brute-force-optimality: 20 instances, worst |gap| {worst:.2e} bits, {dt:.1?}");
}

#[test]
fn gate_03_default_operating_point_concentrates_on_seventeen_subchannels() {
    let _g = gate();
    let t0 = Instant::now();
    let cfg = ScenarioConfig::default();
    let model = build_model(&cfg).unwrap();
    let n = cfg.geometry.n;
    let noise = effective_noise(&cfg, n).unwrap();
    let budget = cfg.budget();
    let mut counts = Vec::new();
    for seed in 0..10u64 {
        let mut srng = stream_rng(3_000 + seed, 0);
        let sampler = BlockSampler::new(&model, cfg.ensemble().unwrap(), &mut srng);
        let corr = estimate_r_h(&sampler, 100_000, 4_000 + seed, true).unwrap();
        let alloc = water_fill(&corr.p_h, budget, &noise).unwrap();
        let active = alloc.active.iter().filter(|&&a| a).count();
        assert!(
            (15..=19).contains(&active),
            "seed {seed}: {active} active subchannels, expected 17 +/- 2"
        );
        counts.push(active);
    }
    let dt = t0.elapsed();
    assert_within(dt, 120, "subchannel concentration check");
    eprintln!("PASS 3/10 seventeen-subchannels: active counts {counts:?}, {dt:.1?}");
}

#[test]
fn gate_04_feasible_pair_stays_within_one_db_of_the_upper_bound() {
    let _g = gate();
    let t0 = Instant::now();
    let cfg = ScenarioConfig::default();
    let model = build_model(&cfg).unwrap();
    let n = cfg.geometry.n;
    let m = cfg.geometry.m;
    let (v, _) = cfg.probe_dims(n);
    let noise = effective_noise(&cfg, n).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..20u64 {
        let mut srng = stream_rng(5_000 + seed, 0);
        let sampler = BlockSampler::new(&model, cfg.ensemble().unwrap(), &mut srng);
        let corr = estimate_r_h(&sampler, 30_000, 6_000 + seed, true).unwrap();
        let alloc = water_fill(&corr.p_h, cfg.budget(), &noise).unwrap();
        let design = build_w(&alloc, &corr, &noise, n * v).unwrap();
        let fit = decompose(&design.w, &corr.r_h, &noise, m, v, cfg.probing.k_q).unwrap();
        assert!(
            fit.achieved_skr <= design.achieved_skr + 1e-9,
            "seed {seed}: feasible pair {} exceeds the bound {}",
            fit.achieved_skr,
            design.achieved_skr
        );
        gaps.push(-fit.skr_gap_db);
    }
    let avg = mean(&gaps);
    assert!(avg <= 1.0, "average decomposition gap {avg:.3} dB exceeds 1 dB");
    let dt = t0.elapsed();
    assert_within(dt, 300, "upper-bound chain");
    eprintln!(
        "PASS 4/10 upper-bound-chain: 20 realizations, average gap {avg:.3} dB, \
         worst {:.3} dB, {dt:.1?}",
        gaps.iter().cloned().fold(0.0, f64::max)
    );
}

#[test]
fn gate_05_case_ordering_holds_across_the_power_sweep() {
    let _g = gate();
    let t0 = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.run.trials = 6_000;
    cfg.run.key_rounds = 256;
    cfg.run.algorithms = ["upper_bound", "proposed", "ma_ris_raw", "ma_no_ris"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let grid: Vec<f64> = (0..=10).map(|i| 2.0 * i as f64).collect();
    let rows = sweep(&cfg, SweepVar::Pt, &grid).unwrap();
    assert_eq!(rows.len(), 4 * grid.len());
    let mut gaps_db = Vec::new();
    for (point, chunk) in rows.chunks(4).enumerate() {
        let (upper, proposed, raw, no_ris) =
            (chunk[0].skr_bits, chunk[1].skr_bits, chunk[2].skr_bits, chunk[3].skr_bits);
        let pt = chunk[0].sweep_value;
        assert!(upper >= proposed - 1e-9, "P_t = {pt}: upper {upper} < proposed {proposed}");
        assert!(proposed >= raw - 1e-9, "P_t = {pt}: proposed {proposed} < raw {raw}");
        assert!(proposed > no_ris, "P_t = {pt}: proposed {proposed} <= direct-only {no_ris}");
        let _ = point;
        gaps_db.push(10.0 * (proposed / no_ris).log10());
    }
    let avg_gap = mean(&gaps_db);
    assert!(avg_gap > 6.0, "optimized-vs-direct average gap {avg_gap:.2} dB is under 6 dB");
    let dt = t0.elapsed();
    assert_within(dt, 300, "case-ordering sweep");
    eprintln!(
        "PASS 5/10 case-ordering: {} grid points, optimized-vs-direct average gap \
         {avg_gap:.2} dB, {dt:.1?}",
        grid.len()
    );
}

#[test]
fn gate_06_monte_carlo_rate_matches_the_analytic_rate() {
    let _g = gate();
    let t0 = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.geometry.m = 4;
    cfg.run.trials = 100_000;
    cfg.run.key_rounds = 512;
    let row = run_case(&cfg, Algorithm::UpperBound).unwrap();
    let rel = (row.skr_bits - row.skr_mc_bits).abs() / row.skr_bits;
    assert!(
        rel < 0.05,
        "analytic {} vs Monte Carlo {} differ by {:.2}%",
        row.skr_bits,
        row.skr_mc_bits,
        100.0 * rel
    );
    let dt = t0.elapsed();
    assert_within(dt, 120, "analytic-vs-Monte-Carlo check");
    eprintln!(
        "PASS 6/10 analytic-vs-mc: {} vs {} bits ({:.2}% relative), {dt:.1?}",
        row.skr_bits, row.skr_mc_bits, 100.0 * rel
    );
}

fn misfit(p: &DMatrix<C64>, c: &DMatrix<C64>) -> f64 {
    (p - c).norm_squared()
}

/// Special-unitary 2x2 element for the exhaustive angle grid.
fn su2(theta: f64, a: f64, b: f64) -> DMatrix<C64> {
    let (ct, st) = (theta.cos(), theta.sin());
    DMatrix::from_row_slice(
        2,
        2,
        &[
            C64::from_polar(ct, a),
            C64::from_polar(st, b),
            C64::from_polar(-st, -b),
            C64::from_polar(ct, -a),
        ],
    )
}

/// Best feasible objective when each column may carry a free phase: the
/// optimal phase aligns the column with its target in closed form.
fn misfit_with_free_column_phases(q: &DMatrix<C64>, c: &DMatrix<C64>) -> f64 {
    let mut total = 0.0;
    for k in 0..q.ncols() {
        let qk = q.column(k);
        let ck = c.column(k);
        let inner: C64 = qk.dotc(&ck);
        total += qk.norm_squared() + ck.norm_squared() - 2.0 * inner.norm();
    }
    total
}

#[test]
fn gate_07_procrustes_fit_is_unbeaten_by_sampling_grids_and_refinement() {
    let _g = gate();
    let t0 = Instant::now();
    let shapes = [(2usize, 1usize), (2, 2), (3, 2), (4, 2), (4, 3)];
    for idx in 0..100u64 {
        let (n, n_s) = shapes[(idx % 5) as usize];
        let mut rng = stream_rng(7_000 + idx, 0);
        let c = cn_matrix(&mut rng, n, n_s, 1.0);
        let star = orthonormal_fit(&c).unwrap();
        let best = misfit(&star, &c);
        // Random orthonormal competitors.
        for _ in 0..10_000 {
            let q = orthonormal_fit(&cn_matrix(&mut rng, n, n_s, 1.0)).unwrap();
            assert!(misfit(&q, &c) >= best - 1e-9, "sampled competitor beat the closed form");
        }
        // Exhaustive angle grid in two dimensions (free column phases are
        // optimized in closed form, which covers the full unitary group).
        if n == 2 {
            let steps = 40;
            for i in 0..steps {
                let theta = i as f64 / steps as f64 * std::f64::consts::FRAC_PI_2;
                for j in 0..steps {
                    let a = j as f64 / steps as f64 * std::f64::consts::TAU;
                    for k in 0..steps {
                        let b = k as f64 / steps as f64 * std::f64::consts::TAU;
                        let q = su2(theta, a, b);
                        let q = q.columns(0, n_s).into_owned();
                        assert!(
                            misfit_with_free_column_phases(&q, &c) >= best - 1e-9,
                            "grid competitor beat the closed form"
                        );
                    }
                }
            }
        }
        // Manifold refinement from random starts lands on the same optimum.
        for start in 0..10u64 {
            let mut rrng = stream_rng(8_000 + idx, start);
            let p0 = orthonormal_fit(&cn_matrix(&mut rrng, n, n_s, 1.0)).unwrap();
            let refined = riemannian_refine(&p0, &c, 500, 0.2).unwrap();
            let got = misfit(&refined, &c);
            assert!(
                got <= best + 1e-6,
                "refinement from start {start} reached {got}, closed form {best}"
            );
        }
    }
    let dt = t0.elapsed();
    assert_within(dt, 60, "nearest-orthonormal optimality check");
    eprintln!("PASS 7/10 procrustes-optimality: 100 targets, sampling + grid + refinement, {dt:.1?}");
}

#[test]
fn gate_08_rate_trends_follow_power_elements_rician_factor_and_spacing() {
    let _g = gate();
    let t0 = Instant::now();
    let mut cfg = ScenarioConfig::default();
    cfg.run.trials = 12_000;
    cfg.run.key_rounds = 256;
    cfg.run.algorithms = vec!["proposed".into()];

    let tolerant_monotone = |vals: &[f64], up: bool, what: &str| {
        let range = vals.iter().cloned().fold(f64::MIN, f64::max)
            - vals.iter().cloned().fold(f64::MAX, f64::min);
        for w in vals.windows(2) {
            let d = if up { w[1] - w[0] } else { w[0] - w[1] };
            assert!(d >= -0.01 * range, "{what}: {vals:?} not monotone");
        }
    };

    let pt = csv_skr_column(&render_csv(&sweep(&cfg, SweepVar::Pt, &[0.0, 10.0, 20.0]).unwrap()));
    tolerant_monotone(&pt, true, "transmit power");

    let m = csv_skr_column(&render_csv(&sweep(&cfg, SweepVar::M, &[4.0, 10.0, 16.0]).unwrap()));
    tolerant_monotone(&m, true, "element count");

    let k = csv_skr_column(&render_csv(&sweep(&cfg, SweepVar::K, &[0.0, 10.0, 20.0]).unwrap()));
    tolerant_monotone(&k, false, "Rician factor");

    // Element-spacing sensitivity is reported at 5 dBm, where the rate
    // tracks the gradual decorrelation instead of fine eigenvalue
    // structure near the uncorrelated limit.
    let mut dr_cfg = cfg.clone();
    dr_cfg.power.p_t_dbm = 5.0;
    dr_cfg.run.trials = 30_000;
    let dr = csv_skr_column(&render_csv(
        &sweep(&dr_cfg, SweepVar::Dr, &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap(),
    ));
    // Strict rise while the elements decorrelate, then convergence to a
    // maximum: every point past the rise stays within 5% of the peak
    // (the near-uncorrelated regime reorders eigenvalues slightly, so
    // the plateau is a band, not an exact monotone tail).
    assert!(dr[1] > dr[0] && dr[2] > dr[1], "rising segment broken: {dr:?}");
    let peak = dr.iter().cloned().fold(f64::MIN, f64::max);
    for (i, &v) in dr.iter().enumerate().skip(2) {
        assert!(v >= 0.95 * peak, "point {i} leaves the plateau: {dr:?}");
    }
    let first_step = dr[1] - dr[0];
    let last_step = (dr[4] - dr[3]).abs();
    assert!(dr[4] > dr[0], "spacing sweep must increase overall: {dr:?}");
    assert!(
        last_step <= 0.35 * first_step,
        "no saturation: first step {first_step:.4}, last step {last_step:.4}"
    );
    let dt = t0.elapsed();
    assert_within(dt, 600, "trend sweeps");
    eprintln!(
        "PASS 8/10 rate-trends: power {pt:?}, elements {m:?}, rician {k:?}, spacing {dr:?}, {dt:.1?}"
    );
}

#[test]
fn gate_09_keys_improve_with_power_and_pass_the_randomness_battery() {
    let _g = gate();
    let t0 = Instant::now();
    // Bit disagreement falls strictly as transmit power rises.
    let mut cfg = ScenarioConfig::default();
    cfg.run.trials = 20_000;
    cfg.run.key_rounds = 4_096;
    cfg.run.algorithms = vec!["proposed".into()];
    let rows = sweep(&cfg, SweepVar::Pt, &[0.0, 10.0, 20.0]).unwrap();
    let bdr: Vec<f64> = rows.iter().map(|r| r.bdr).collect();
    assert!(
        bdr[0] > bdr[1] && bdr[1] > bdr[2],
        "bit disagreement must fall with power: {bdr:?}"
    );

    // Generated keys clear the battery on at least 90% of seeds.
    let mut kcfg = ScenarioConfig::default();
    kcfg.run.trials = 8_192;
    kcfg.run.key_rounds = 4_096;
    let families = ["monobit", "block_frequency", "runs", "cusum_fwd", "cusum_rev"];
    let mut pass = 0;
    for seed in 0..20u64 {
        kcfg.run.seed = 100 + seed;
        let row = run_case(&kcfg, Algorithm::Proposed).unwrap();
        let ok = families.iter().all(|f| {
            let p = row.p_values.get(*f).copied().unwrap_or(0.0);
            p > 0.01
        });
        if ok {
            pass += 1;
        }
    }
    assert!(pass >= 18, "only {pass}/20 seeds passed the randomness battery");
    let dt = t0.elapsed();
    assert_within(dt, 300, "key-quality suite");
    eprintln!(
        "PASS 9/10 key-quality: disagreement {bdr:?} falling, battery {pass}/20 seeds, {dt:.1?}"
    );
}

#[test]
fn gate_10_randomized_phase_search_matches_exhaustive_enumeration() {
    let _g = gate();
    let t0 = Instant::now();
    let mut rng = stream_rng(0xACC0_000A, 0);
    for inst in 0..50 {
        let a = cn_matrix(&mut rng, 4, 6, 1.0);
        let r_e = hermitian_part(&(&a * a.adjoint()));
        let noise = EffectiveNoise::new(
            10f64.powf(rng.random_range(-3.0..0.0)),
            10f64.powf(rng.random_range(-3.0..0.0)),
        )
        .unwrap();
        let prob = SaProblem::new(r_e, noise, 2).unwrap();
        let mut orng = stream_rng(9_000 + inst, 0);
        let got = optimize_phase_sa(&prob, 64, &mut orng).unwrap();
        let best = exhaustive_phase_search(&prob).unwrap();
        assert!(
            (got.p_e - best.p_e).abs() <= 1e-9 * best.p_e.max(1e-12),
            "instance {inst}: randomized {} vs exhaustive {}",
            got.p_e,
            best.p_e
        );
    }
    let dt = t0.elapsed();
    assert_within(dt, 60, "exhaustive phase comparison");
    eprintln!("PASS 10/10 randomized-vs-exhaustive: 50 instances matched, {dt:.1?}");
}
