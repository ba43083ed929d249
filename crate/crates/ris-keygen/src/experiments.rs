//! Scenario runner: from a declarative config to benchmark CSV rows.
//!
//! A scenario fixes the geometry, link statistics, powers, and probing
//! shape. Five benchmark algorithms run against it:
//!
//! * `ma_no_ris`: probing of the direct channel only,
//! * `ma_ris_raw`: flat reflection (`v = 1`) with an identity precoder,
//! * `sa_ris_opt`: single-antenna terminals with the optimized reflection,
//! * `upper_bound`: water-filled unconstrained design (not realizable),
//! * `proposed`: the water-filled design decomposed into a feasible
//!   phase-pattern/precoder pair and pushed through the full protocol.
//!
//! Every case reports the analytic rate for its design, a Monte Carlo rate
//! from the Gaussian mutual-information estimator on simulated
//! measurements, and the bit disagreement rate of the quantized keys.
//! All randomness derives from the configured seed, so a config produces
//! byte-identical CSV on every run at any worker count.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::channel::{
    corr_matrix_bs, corr_matrix_ris, equivalent_channel, estimate_r_h, BlockSampler,
    ChannelModel, Ensemble, LinkParams, Links, SpatialCorrelation, SystemGeometry,
};
use crate::decompose::decompose;
use crate::keypipe::{generate_keys, MeasurementSeries};
use crate::linalg::{cn_scalar, stream_rng, C64};
use crate::probing::{probe_block, ProbeDesign};
use crate::sa_design::{build_r_e, optimize_phase_sa, SaProblem};
use crate::skr::{gaussian_mi_estimate, skr_analytic, EffectiveNoise};
use crate::waterfill::{probe_budget, water_fill, build_w};
use crate::{Error, Result};

/// Exact header of every emitted CSV.
pub const CSV_HEADER: &str = "algorithm,sweep_var,sweep_value,skr_bits,skr_mc_bits,bdr";

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// dBm to watts.
pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Near-square factoring of an element count into a `(rows, columns)`
/// panel shape: the divisor pair closest to a square.
pub fn split_elements(m: usize) -> (usize, usize) {
    let mut best = (1, m);
    let mut d = 1;
    while d * d <= m {
        if m.is_multiple_of(d) {
            best = (d, m / d);
        }
        d += 1;
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// BS antennas.
    pub n: usize,
    /// Reflecting elements (factored into a near-square panel).
    pub m: usize,
    /// BS element spacing in wavelengths.
    pub d_a_over_lambda: f64,
    /// Panel element spacing in wavelengths.
    pub d_r_over_lambda: f64,
    /// Carrier wavelength, meters.
    pub lambda: f64,
    pub bs_pos: [f64; 3],
    pub ris_pos: [f64; 3],
    pub ue_pos: [f64; 3],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            n: 2,
            m: 16,
            d_a_over_lambda: 0.5,
            d_r_over_lambda: 0.5,
            lambda: 0.1,
            bs_pos: [0.0, 0.0, 1.0],
            ris_pos: [39.0, 4.9, 4.9],
            ue_pos: [39.0, 4.2, 5.4],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksConfig {
    /// Rician factor, dB, applied to all three links.
    pub rician_k_db: f64,
    /// Reference path loss at `d0`, dB.
    pub beta0_db: f64,
    /// Reference distance, meters.
    pub d0: f64,
    pub exp_bs_ris: f64,
    pub exp_ue_ris: f64,
    pub exp_ue_bs: f64,
    /// Scale of the panel spatial correlation kernel.
    pub gamma: f64,
    /// BS exponential correlation coefficient.
    pub r_bs: f64,
    /// Scatterer count for the path-sum sampler.
    pub paths: usize,
}

impl Default for LinksConfig {
    fn default() -> Self {
        Self {
            rician_k_db: 10.0,
            beta0_db: -30.0,
            d0: 1.0,
            exp_bs_ris: 2.0,
            exp_ue_ris: 2.0,
            exp_ue_bs: 3.67,
            gamma: 1.0,
            r_bs: 0.0,
            paths: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    /// Per-terminal transmit power, dBm (both directions).
    pub p_t_dbm: f64,
    /// Receiver noise power, dBm.
    pub noise_dbm: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { p_t_dbm: 20.0, noise_dbm: -96.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbingConfig {
    /// Packets per probing block; 0 picks the smallest full-rank
    /// Hadamard schedule for `m`.
    pub v: usize,
    /// Uplink pilot repetitions per packet; 0 matches the precoder width.
    pub q: usize,
    /// Phase quantization levels.
    pub k_q: usize,
}

impl Default for ProbingConfig {
    fn default() -> Self {
        Self { v: 0, q: 0, k_q: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Monte Carlo rounds per case (covariance estimation and
    /// measurement simulation alike).
    pub trials: usize,
    /// Rounds retained for key generation (caps key length and memory).
    pub key_rounds: usize,
    /// Randomization draws for the single-antenna phase search.
    pub sa_rand: usize,
    pub algorithms: Vec<String>,
    /// `quasi_static` (BS-panel link frozen per session) or `iid`.
    pub ensemble: String,
    /// Remove sample means before covariance/MI estimation, making all
    /// rates refer to the fluctuating part of the channel.
    pub subtract_mean: bool,
    /// Optional default sweep, used when the CLI gives no explicit one.
    pub sweep_var: Option<String>,
    pub sweep_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 20_000,
            key_rounds: 4096,
            sa_rand: 100,
            algorithms: Algorithm::ALL.iter().map(|a| a.name().to_string()).collect(),
            ensemble: "quasi_static".into(),
            subtract_mean: true,
            sweep_var: None,
            sweep_grid: Vec::new(),
        }
    }
}

/// Full scenario description. Every block has working defaults, so a
/// config file only has to name what it changes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub geometry: GeometryConfig,
    pub links: LinksConfig,
    pub power: PowerConfig,
    pub probing: ProbingConfig,
    pub run: RunConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.n == 0 || g.m == 0 {
            return Err(Error::Config("antenna and element counts must be positive".into()));
        }
        for (name, x) in [
            ("d_a_over_lambda", g.d_a_over_lambda),
            ("d_r_over_lambda", g.d_r_over_lambda),
            ("lambda", g.lambda),
            ("d0", self.links.d0),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {x}")));
            }
        }
        let pos = |a: [f64; 3]| Vector3::from(a);
        for (name, a, b) in [
            ("BS-RIS", g.bs_pos, g.ris_pos),
            ("UE-RIS", g.ue_pos, g.ris_pos),
            ("UE-BS", g.ue_pos, g.bs_pos),
        ] {
            if (pos(a) - pos(b)).norm() <= 0.0 {
                return Err(Error::Config(format!("{name} distance must be positive")));
            }
        }
        if !self.power.p_t_dbm.is_finite() || !self.power.noise_dbm.is_finite() {
            return Err(Error::Config("powers must be finite".into()));
        }
        if self.probing.k_q < 2 {
            return Err(Error::Config("k_q must be at least 2".into()));
        }
        if self.probing.v != 0 && self.probing.v < g.m + 1 {
            return Err(Error::Config(format!(
                "{} packets cannot excite {} cascaded directions",
                self.probing.v,
                g.m + 1
            )));
        }
        if self.run.trials < 32 {
            return Err(Error::Config("trials must be at least 32".into()));
        }
        if self.run.key_rounds < 2 {
            return Err(Error::Config("key_rounds must be at least 2".into()));
        }
        for name in &self.run.algorithms {
            Algorithm::parse(name)?;
        }
        self.ensemble()?;
        if let Some(var) = &self.run.sweep_var {
            SweepVar::parse(var)?;
        }
        Ok(())
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        match self.run.ensemble.as_str() {
            "quasi_static" => Ok(Ensemble::QuasiStaticBsRis),
            "iid" => Ok(Ensemble::Iid),
            other => Err(Error::Config(format!(
                "unknown ensemble '{other}' (expected quasi_static or iid)"
            ))),
        }
    }

    pub fn algorithms(&self) -> Result<Vec<Algorithm>> {
        self.run.algorithms.iter().map(|s| Algorithm::parse(s)).collect()
    }

    /// `(V, Q)` after resolving the automatic values for a case whose
    /// precoder has `n_s` columns.
    pub fn probe_dims(&self, n_s: usize) -> (usize, usize) {
        let v = if self.probing.v == 0 {
            (self.geometry.m + 1).next_power_of_two()
        } else {
            self.probing.v
        };
        let q = if self.probing.q == 0 { n_s.max(1) } else { self.probing.q };
        (v, q)
    }

    /// Probing energy budget `(M + 1) V N`.
    pub fn budget(&self) -> f64 {
        let (v, _) = self.probe_dims(self.geometry.n);
        probe_budget(self.geometry.m, v, self.geometry.n)
    }
}

/// The five benchmark cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    MaNoRis,
    MaRisRaw,
    SaRisOpt,
    UpperBound,
    Proposed,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::MaNoRis,
        Algorithm::MaRisRaw,
        Algorithm::SaRisOpt,
        Algorithm::UpperBound,
        Algorithm::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MaNoRis => "ma_no_ris",
            Algorithm::MaRisRaw => "ma_ris_raw",
            Algorithm::SaRisOpt => "sa_ris_opt",
            Algorithm::UpperBound => "upper_bound",
            Algorithm::Proposed => "proposed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

/// Swept parameter of a benchmark series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    /// Transmit power, dBm.
    Pt,
    /// Reflecting element count.
    M,
    /// Element spacing, wavelengths.
    Dr,
    /// Rician factor, dB.
    K,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::Pt => "pt",
            SweepVar::M => "m",
            SweepVar::Dr => "dr",
            SweepVar::K => "k",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pt" => Ok(SweepVar::Pt),
            "m" => Ok(SweepVar::M),
            "dr" => Ok(SweepVar::Dr),
            "k" => Ok(SweepVar::K),
            other => Err(Error::Config(format!(
                "unknown sweep variable '{other}' (expected pt, m, dr or k)"
            ))),
        }
    }

    /// A copy of the scenario with this variable set to `value`.
    pub fn apply(self, cfg: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut out = cfg.clone();
        match self {
            SweepVar::Pt => out.power.p_t_dbm = value,
            SweepVar::M => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "element count must be a positive integer, got {value}"
                    )));
                }
                out.geometry.m = value as usize;
            }
            SweepVar::Dr => {
                if !(value > 0.0) {
                    return Err(Error::Config(format!("spacing must be positive, got {value}")));
                }
                out.geometry.d_r_over_lambda = value;
            }
            SweepVar::K => out.links.rician_k_db = value,
        }
        out.validate()?;
        Ok(out)
    }
}

/// One benchmark result.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub algorithm: String,
    pub sweep_var: String,
    pub sweep_value: f64,
    /// Analytic rate of the case's design, bits per probing round.
    pub skr_bits: f64,
    /// Monte Carlo mutual-information estimate, bits per probing round.
    pub skr_mc_bits: f64,
    /// Bit disagreement rate of the quantized keys.
    pub bdr: f64,
    /// Randomness screening of the BS key (empty when too short).
    pub p_values: BTreeMap<String, f64>,
}

impl ReportRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.algorithm, self.sweep_var, self.sweep_value, self.skr_bits, self.skr_mc_bits,
            self.bdr
        )
    }
}

/// Derives an independent sub-seed from the base seed and a role tag, so
/// grid points and algorithms draw from disjoint, reproducible streams.
pub fn derive_seed(base: u64, label: &str, var: &str, value: f64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let eat = |h: &mut u64, bytes: &[u8]| {
        for &b in bytes {
            *h ^= b as u64;
            *h = h.wrapping_mul(PRIME);
        }
    };
    eat(&mut h, &base.to_le_bytes());
    eat(&mut h, label.as_bytes());
    eat(&mut h, &[0]);
    eat(&mut h, var.as_bytes());
    eat(&mut h, &[0]);
    eat(&mut h, &value.to_bits().to_le_bytes());
    h
}

/// Builds the physical model from the config with the given antenna count.
fn build_model_n(cfg: &ScenarioConfig, n: usize) -> Result<ChannelModel> {
    let g = &cfg.geometry;
    let (m_y, m_z) = split_elements(g.m);
    let geom = SystemGeometry::new(
        n,
        g.d_a_over_lambda * g.lambda,
        m_y,
        m_z,
        g.d_r_over_lambda * g.lambda,
        g.lambda,
        g.bs_pos,
        g.ris_pos,
        g.ue_pos,
    )?;
    let l = &cfg.links;
    let k_lin = db_to_linear(l.rician_k_db);
    let beta0 = db_to_linear(l.beta0_db);
    let dist = |a: [f64; 3], b: [f64; 3]| (Vector3::from(a) - Vector3::from(b)).norm();
    let link = |d: f64, exp: f64| -> Result<LinkParams> {
        let mut p = LinkParams::from_distance(beta0, d, l.d0, exp, k_lin)?;
        p.paths = l.paths;
        Ok(p)
    };
    let links = Links {
        bs_ris: link(dist(g.bs_pos, g.ris_pos), l.exp_bs_ris)?,
        ue_ris: link(dist(g.ue_pos, g.ris_pos), l.exp_ue_ris)?,
        ue_bs: link(dist(g.ue_pos, g.bs_pos), l.exp_ue_bs)?,
    };
    let corr =
        SpatialCorrelation::new(corr_matrix_ris(&geom, l.gamma), corr_matrix_bs(n, l.r_bs))?;
    ChannelModel::new(geom, links, corr)
}

/// The multi-antenna model described by the config.
pub fn build_model(cfg: &ScenarioConfig) -> Result<ChannelModel> {
    build_model_n(cfg, cfg.geometry.n)
}

/// The single-antenna reduction of the config (same geometry, `N = 1`).
pub fn build_sa_model(cfg: &ScenarioConfig) -> Result<ChannelModel> {
    build_model_n(cfg, 1)
}

/// Post-estimation noise for a case with `n_s` precoder columns.
pub fn effective_noise(cfg: &ScenarioConfig, n_s: usize) -> Result<EffectiveNoise> {
    let sigma2 = dbm_to_watt(cfg.power.noise_dbm);
    let p_t = dbm_to_watt(cfg.power.p_t_dbm);
    let (_, q) = cfg.probe_dims(n_s);
    EffectiveNoise::from_probing(sigma2, sigma2, q, p_t, n_s, p_t)
}

/// How a case turns channel realizations into measurements.
enum McPath {
    /// `z = W^T h_r + noise` on both sides (design-level abstraction).
    /// The measurement is already expressed in design coordinates, so keys
    /// quantize it directly.
    Linear(DMatrix<C64>),
    /// The full pilot protocol for a feasible design. Both terminals
    /// least-squares-estimate the cascaded channel from their stacked
    /// measurements (a sufficient statistic, so the mutual information is
    /// untouched) and extract keys in the design coordinates `W^T h_hat`,
    /// where the probed covariance is diagonal and the quantized bits do
    /// not inherit cross-dimension redundancy.
    Protocol { probe: Box<ProbeDesign>, key_w: DMatrix<C64> },
}

fn simulate_case(
    sampler: &BlockSampler,
    path: &McPath,
    noise: &EffectiveNoise,
    cfg: &ScenarioConfig,
    mc_seed: u64,
) -> Result<(f64, f64, BTreeMap<String, f64>)> {
    let trials = cfg.run.trials;
    let mut rng = stream_rng(mc_seed, 0);
    let (wt, dims) = match path {
        McPath::Linear(w) => {
            let wt = w.transpose();
            let d = wt.nrows();
            (Some(wt), d)
        }
        McPath::Protocol { probe, .. } => (None, probe.est_len()),
    };
    let mut za = DMatrix::<C64>::zeros(dims, trials);
    let mut zb = DMatrix::<C64>::zeros(dims, trials);
    for t in 0..trials {
        let real = sampler.draw(&mut rng);
        match path {
            McPath::Linear(_) => {
                let sig = wt.as_ref().unwrap() * crate::channel::cascade(&real);
                for i in 0..dims {
                    za[(i, t)] = sig[i] + cn_scalar(&mut rng, noise.a);
                }
                for i in 0..dims {
                    zb[(i, t)] = sig[i] + cn_scalar(&mut rng, noise.b);
                }
            }
            McPath::Protocol { probe, .. } => {
                let pair = probe_block(&real, probe, &mut rng);
                za.column_mut(t).copy_from(&probe.ls_estimate(&pair.z_a));
                zb.column_mut(t).copy_from(&probe.ls_estimate(&pair.z_b));
            }
        }
    }
    let mi = gaussian_mi_estimate(&za, &zb, cfg.run.subtract_mean)?;
    let kr = cfg.run.key_rounds.min(trials);
    let series = match path {
        McPath::Linear(_) => MeasurementSeries::new(
            za.columns(0, kr).transpose(),
            zb.columns(0, kr).transpose(),
        )?,
        McPath::Protocol { key_w, .. } => {
            let kt = key_w.transpose();
            MeasurementSeries::new(
                (&kt * za.columns(0, kr)).transpose(),
                (&kt * zb.columns(0, kr)).transpose(),
            )?
        }
    };
    let keys = generate_keys(&series)?;
    Ok((mi, keys.bdr, keys.p_values))
}

fn run_ma_case(
    cfg: &ScenarioConfig,
    algo: Algorithm,
    var: &str,
    value: f64,
) -> Result<ReportRow> {
    let model = build_model(cfg)?;
    let n = cfg.geometry.n;
    let m = cfg.geometry.m;
    let (v, q) = cfg.probe_dims(n);
    let noise = effective_noise(cfg, n)?;
    let seed = cfg.run.seed;
    // The session (frozen BS-panel link) and its covariance estimate are
    // shared by all algorithms at a grid point, so their rates are
    // comparable realization by realization.
    let mut session_rng = stream_rng(derive_seed(seed, "session", var, value), 0);
    let sampler = BlockSampler::new(&model, cfg.ensemble()?, &mut session_rng);
    let corr = estimate_r_h(
        &sampler,
        cfg.run.trials,
        derive_seed(seed, "covariance", var, value),
        cfg.run.subtract_mean,
    )?;
    let eye = DMatrix::<C64>::identity(n, n);
    let (path, analytic) = match algo {
        Algorithm::MaNoRis => {
            // Direct-path probing: the reflection rows never contribute.
            let mut pattern = DMatrix::<C64>::zeros(m + 1, v);
            pattern.row_mut(0).fill(C64::new(1.0, 0.0));
            let w = pattern.kronecker(&eye);
            let rate = skr_analytic(&w, &corr.r_h, &noise)?;
            (McPath::Linear(w), rate)
        }
        Algorithm::MaRisRaw => {
            let pattern = DMatrix::<C64>::from_element(m + 1, v, C64::new(1.0, 0.0));
            let w = pattern.kronecker(&eye);
            let rate = skr_analytic(&w, &corr.r_h, &noise)?;
            (McPath::Linear(w), rate)
        }
        Algorithm::UpperBound => {
            let alloc = water_fill(&corr.p_h, probe_budget(m, v, n), &noise)?;
            let design = build_w(&alloc, &corr, &noise, n * v)?;
            (McPath::Linear(design.w), design.achieved_skr)
        }
        Algorithm::Proposed => {
            let alloc = water_fill(&corr.p_h, probe_budget(m, v, n), &noise)?;
            let design = build_w(&alloc, &corr, &noise, n * v)?;
            let fit = decompose(&design.w, &corr.r_h, &noise, m, v, cfg.probing.k_q)?;
            let p_t = dbm_to_watt(cfg.power.p_t_dbm);
            let sigma2 = dbm_to_watt(cfg.power.noise_dbm);
            let probe = ProbeDesign::new(
                fit.phi_bar.clone(),
                fit.p.clone(),
                q,
                p_t,
                p_t,
                sigma2,
                sigma2,
                cfg.probing.k_q,
            )?;
            // Key coordinates: the allocated design directions only; the
            // zero-padded columns carry no probing power.
            let used: Vec<usize> = (0..design.w.ncols())
                .filter(|&c| design.w.column(c).iter().any(|e| e.norm_sqr() > 0.0))
                .collect();
            let key_w = design.w.select_columns(&used);
            (McPath::Protocol { probe: Box::new(probe), key_w }, fit.achieved_skr)
        }
        Algorithm::SaRisOpt => unreachable!("dispatched to the single-antenna path"),
    };
    let (mi, bdr, p_values) =
        simulate_case(&sampler, &path, &noise, cfg, derive_seed(seed, algo.name(), var, value))?;
    Ok(ReportRow {
        algorithm: algo.name().into(),
        sweep_var: var.into(),
        sweep_value: value,
        skr_bits: analytic,
        skr_mc_bits: mi,
        bdr,
        p_values,
    })
}

fn run_sa_case(cfg: &ScenarioConfig, var: &str, value: f64) -> Result<ReportRow> {
    let model = build_sa_model(cfg)?;
    let noise = effective_noise(cfg, 1)?;
    let seed = cfg.run.seed;
    let r_e = build_r_e(&model, cfg.run.trials, derive_seed(seed, "sa-covariance", var, value))?;
    let prob = SaProblem::new(r_e, noise, cfg.probing.k_q)?;
    let mut opt_rng = stream_rng(derive_seed(seed, "sa-design", var, value), 0);
    let design = optimize_phase_sa(&prob, cfg.run.sa_rand, &mut opt_rng)?;
    // The single-antenna covariance is an ensemble average, so the
    // measurements are drawn i.i.d. regardless of the configured ensemble.
    let mut session_rng = stream_rng(derive_seed(seed, "sa-session", var, value), 0);
    let sampler = BlockSampler::new(&model, Ensemble::Iid, &mut session_rng);
    let v_ris: DVector<C64> = design.v_bar.rows(1, cfg.geometry.m).into_owned();
    let trials = cfg.run.trials;
    let mut rng = stream_rng(derive_seed(seed, Algorithm::SaRisOpt.name(), var, value), 0);
    let mut za = DMatrix::<C64>::zeros(1, trials);
    let mut zb = DMatrix::<C64>::zeros(1, trials);
    for t in 0..trials {
        let real = sampler.draw(&mut rng);
        let h_e = equivalent_channel(&real, &v_ris)[0];
        za[(0, t)] = h_e + cn_scalar(&mut rng, noise.a);
        zb[(0, t)] = h_e + cn_scalar(&mut rng, noise.b);
    }
    let mi = gaussian_mi_estimate(&za, &zb, cfg.run.subtract_mean)?;
    let kr = cfg.run.key_rounds.min(trials);
    let series = MeasurementSeries::new(
        za.columns(0, kr).transpose(),
        zb.columns(0, kr).transpose(),
    )?;
    let keys = generate_keys(&series)?;
    Ok(ReportRow {
        algorithm: Algorithm::SaRisOpt.name().into(),
        sweep_var: var.into(),
        sweep_value: value,
        skr_bits: design.achieved_skr,
        skr_mc_bits: mi,
        bdr: keys.bdr,
        p_values: keys.p_values,
    })
}

fn execute(cfg: &ScenarioConfig, algo: Algorithm, var: &str, value: f64) -> Result<ReportRow> {
    match algo {
        Algorithm::SaRisOpt => run_sa_case(cfg, var, value),
        _ => run_ma_case(cfg, algo, var, value),
    }
}

/// Runs one benchmark case at the config's operating point.
pub fn run_case(cfg: &ScenarioConfig, algo: Algorithm) -> Result<ReportRow> {
    cfg.validate()?;
    execute(cfg, algo, "pt", cfg.power.p_t_dbm)
}

/// Runs every configured algorithm at the operating point.
pub fn run_all(cfg: &ScenarioConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    cfg.algorithms()?
        .into_iter()
        .map(|a| execute(cfg, a, "pt", cfg.power.p_t_dbm))
        .collect()
}

/// Sweeps `var` over `grid`, running every configured algorithm at each
/// point. Grid points run in parallel; the row order (grid-major, then
/// algorithm) and all numbers are independent of the worker count.
pub fn sweep(cfg: &ScenarioConfig, var: SweepVar, grid: &[f64]) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".into()));
    }
    let algos = cfg.algorithms()?;
    use rayon::prelude::*;
    let nested: Result<Vec<Vec<ReportRow>>> = grid
        .par_iter()
        .map(|&value| {
            let point_cfg = var.apply(cfg, value)?;
            algos.iter().map(|&a| execute(&point_cfg, a, var.name(), value)).collect()
        })
        .collect();
    Ok(nested?.into_concat())
}

trait Concat<T> {
    fn into_concat(self) -> Vec<T>;
}

impl<T> Concat<T> for Vec<Vec<T>> {
    fn into_concat(self) -> Vec<T> {
        self.into_iter().flatten().collect()
    }
}

/// Renders rows to CSV text with the fixed header.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Writes the CSV report to a file.
pub fn write_csv<P: AsRef<Path>>(path: P, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, render_csv(rows))?;
    Ok(())
}

/// Caps the global worker pool from `RIS_KEYGEN_THREADS` (first call wins).
pub fn init_thread_pool() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if let Some(k) = std::env::var("RIS_KEYGEN_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&k| k >= 1)
        {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    });
}
