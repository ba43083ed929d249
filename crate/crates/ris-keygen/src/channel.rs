//! Correlated Rician synthesis of the direct and RIS-cascaded channels.
//!
//! Geometry: a base station (BS) with an `N`-element uniform linear array,
//! a RIS with `M = M_y * M_z` elements on a uniform planar array in a plane
//! of constant `x` (elements offset along `y` and `z`), and a single-antenna
//! user (UE). Three links matter:
//!
//! * `h in C^N`: UE -> BS direct channel,
//! * `f in C^M`: UE -> RIS channel,
//! * `G in C^{M x N}`: BS -> RIS channel.
//!
//! Each is Rician: a deterministic line-of-sight response scaled by
//! `sqrt(K beta / (1+K))` plus correlated Gaussian scattering scaled by
//! `sqrt(beta / (1+K))`. RIS-side correlation follows the isotropic
//! `sin(2 pi d / lambda) / (2 pi d / lambda)` kernel over element distances;
//! BS-side correlation is exponential, `r^(|i-j|)`.
//!
//! The probing chain never sees `(h, f, G)` separately: it sees the cascaded
//! vector `h_r = vec([h, G^T diag(f)])` of dimension `D = N (M+1)`, whose
//! covariance `R_h = E{h_r h_r^H}` (second moment; the LoS mean stays in
//! unless explicitly subtracted) drives every key-rate computation. For any
//! RIS phase vector `v`, the equivalent channel obeys
//! `h + G^T diag(v) f = (conj-free) ([1, v^T] kron I_N) h_r`, which is the
//! identity the probing module builds on.
//!
//! Two fading ensembles are supported. `Ensemble::Iid` redraws all three
//! links every block. `Ensemble::QuasiStaticBsRis` draws `G` once per
//! session and redraws only `h` and `f` per block: both BS and RIS are
//! static infrastructure, so their link decorrelates orders of magnitude
//! slower than anything involving the user. The session covariance then
//! has rank at most `M + N`, which is what concentrates the key rate on
//! roughly `M + 1` subchannels at the default operating point.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use crate::linalg::{self, cn_matrix, cn_scalar, cn_vector, herm_eigen_psd, psd_factor, C64};
use crate::{Error, Result};

/// Array geometry and node positions. Lengths are in meters.
#[derive(Debug, Clone)]
pub struct SystemGeometry {
    /// BS antenna count `N`.
    pub n: usize,
    /// BS antenna spacing `d_a` (meters).
    pub d_a: f64,
    /// RIS columns along `y`.
    pub m_y: usize,
    /// RIS rows along `z`.
    pub m_z: usize,
    /// RIS element side length `d_r` (meters).
    pub d_r: f64,
    /// Carrier wavelength `lambda` (meters).
    pub lambda: f64,
    /// BS reference position.
    pub bs_pos: Vector3<f64>,
    /// Position of RIS element 1 (the grid reference corner).
    pub ris_pos: Vector3<f64>,
    /// UE position.
    pub ue_pos: Vector3<f64>,
}

impl SystemGeometry {
    /// Validated constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        d_a: f64,
        m_y: usize,
        m_z: usize,
        d_r: f64,
        lambda: f64,
        bs_pos: [f64; 3],
        ris_pos: [f64; 3],
        ue_pos: [f64; 3],
    ) -> Result<Self> {
        if n == 0 || m_y == 0 || m_z == 0 {
            return Err(Error::Dimension("antenna and RIS grid sizes must be positive".into()));
        }
        if !(lambda > 0.0) || !(d_a > 0.0) || !(d_r > 0.0) {
            return Err(Error::Config("spacings and wavelength must be positive".into()));
        }
        Ok(Self {
            n,
            d_a,
            m_y,
            m_z,
            d_r,
            lambda,
            bs_pos: Vector3::from(bs_pos),
            ris_pos: Vector3::from(ris_pos),
            ue_pos: Vector3::from(ue_pos),
        })
    }

    /// RIS element count `M`.
    pub fn m(&self) -> usize {
        self.m_y * self.m_z
    }

    /// Cascaded-channel dimension `D = N (M + 1)`.
    pub fn d_cascaded(&self) -> usize {
        self.n * (self.m() + 1)
    }

    /// Position of RIS element `m` (0-based): the grid walks `y` fastest,
    /// `u_m = u_0 + d_r (0, m mod M_y, m div M_y)`.
    pub fn element_position(&self, m: usize) -> Vector3<f64> {
        assert!(m < self.m(), "RIS element index out of range");
        let y = (m % self.m_y) as f64;
        let z = (m / self.m_y) as f64;
        self.ris_pos + Vector3::new(0.0, y * self.d_r, z * self.d_r)
    }
}

/// Large-scale parameters of one link.
#[derive(Debug, Clone, Copy)]
pub struct LinkParams {
    /// Path gain `beta` (linear).
    pub beta: f64,
    /// Rician factor `K` (linear, `>= 0`).
    pub rician_k: f64,
    /// Scattering path count for the discrete-path cross-check generator.
    pub paths: usize,
    /// Per-path gain variance for the discrete-path generator.
    pub path_gain_var: f64,
}

impl LinkParams {
    /// Distance-law path gain: `beta = beta0 (d / d0)^(-exponent)`.
    pub fn from_distance(beta0: f64, d: f64, d0: f64, exponent: f64, rician_k: f64) -> Result<Self> {
        if !(d > 0.0) || !(d0 > 0.0) || !(beta0 > 0.0) {
            return Err(Error::Config("distances and reference gain must be positive".into()));
        }
        if rician_k < 0.0 {
            return Err(Error::Config("Rician factor must be nonnegative".into()));
        }
        Ok(Self {
            beta: beta0 * (d / d0).powf(-exponent),
            rician_k,
            paths: 10,
            path_gain_var: 1.0,
        })
    }

    /// LoS amplitude `sqrt(K beta / (1+K))`.
    fn los_scale(&self) -> f64 {
        (self.rician_k * self.beta / (1.0 + self.rician_k)).sqrt()
    }

    /// Scattering amplitude `sqrt(beta / (1+K))`.
    fn nlos_scale(&self) -> f64 {
        (self.beta / (1.0 + self.rician_k)).sqrt()
    }
}

/// The three links of the system.
#[derive(Debug, Clone, Copy)]
pub struct Links {
    /// BS -> RIS.
    pub bs_ris: LinkParams,
    /// UE -> RIS.
    pub ue_ris: LinkParams,
    /// UE -> BS.
    pub ue_bs: LinkParams,
}

/// ULA steering vector: entry `n` is `exp(j 2 pi n d_a sin(psi) / lambda)`,
/// `n = 0..N-1`.
pub fn ula_response(psi: f64, n: usize, d_a: f64, lambda: f64) -> DVector<C64> {
    let step = 2.0 * std::f64::consts::PI * d_a * psi.sin() / lambda;
    DVector::from_fn(n, |i, _| C64::from_polar(1.0, step * i as f64))
}

/// UPA steering vector for azimuth `theta` and elevation `phi`.
///
/// Entry `m` carries the phase accumulated at element position
/// `u_m - u_0 = d_r (0, y_m, z_m)` for a plane wave with direction cosines
/// `cos(phi) sin(theta)` along `y` and `sin(phi)` along `z`; equivalently
/// `a = a_z(phi) kron a_y(theta, phi)` with `a_y` over the `M_y` axis.
pub fn upa_response(theta: f64, phi: f64, geom: &SystemGeometry) -> DVector<C64> {
    let ky = 2.0 * std::f64::consts::PI * geom.d_r * phi.cos() * theta.sin() / geom.lambda;
    let kz = 2.0 * std::f64::consts::PI * geom.d_r * phi.sin() / geom.lambda;
    DVector::from_fn(geom.m(), |m, _| {
        let y = (m % geom.m_y) as f64;
        let z = (m / geom.m_y) as f64;
        C64::from_polar(1.0, ky * y + kz * z)
    })
}

/// RIS spatial correlation: `[R_r]_{n,m} = gamma sin(x)/x` with
/// `x = 2 pi |u_n - u_m| / lambda`, so the diagonal equals `gamma`.
pub fn corr_matrix_ris(geom: &SystemGeometry, gamma: f64) -> DMatrix<C64> {
    let m = geom.m();
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            return C64::new(gamma, 0.0);
        }
        let d = (geom.element_position(i) - geom.element_position(j)).norm();
        let x = 2.0 * std::f64::consts::PI * d / geom.lambda;
        C64::new(gamma * x.sin() / x, 0.0)
    })
}

/// BS spatial correlation: `[R_a]_{i,j} = r^(|i-j|)`, `0 <= r < 1`.
pub fn corr_matrix_bs(n: usize, r: f64) -> DMatrix<C64> {
    assert!((0.0..1.0).contains(&r), "BS correlation coefficient must be in [0, 1)");
    DMatrix::from_fn(n, n, |i, j| C64::new(r.powi((i as i32 - j as i32).abs()), 0.0))
}

/// Input-side correlation matrices with their sampling factors.
#[derive(Debug, Clone)]
pub struct SpatialCorrelation {
    /// RIS-side correlation `R_r` (`M x M`).
    pub r_r: DMatrix<C64>,
    /// BS-side correlation `R_a` (`N x N`).
    pub r_a: DMatrix<C64>,
    r_r_factor: DMatrix<C64>,
    r_a_factor: DMatrix<C64>,
}

impl SpatialCorrelation {
    /// Validates positive semidefiniteness and precomputes factors
    /// `F F^H = R` used by the samplers. Eigen-based, so singular
    /// correlation matrices are accepted.
    pub fn new(r_r: DMatrix<C64>, r_a: DMatrix<C64>) -> Result<Self> {
        if !r_r.is_square() || !r_a.is_square() {
            return Err(Error::Dimension("correlation matrices must be square".into()));
        }
        let r_r_factor = psd_factor(&r_r)?;
        let r_a_factor = psd_factor(&r_a)?;
        Ok(Self { r_r, r_a, r_r_factor, r_a_factor })
    }
}

/// Line-of-sight angles implied by the node positions.
///
/// At the RIS (plane of constant `x`) the direction toward a source has
/// cosines `cos(phi) sin(theta) = u_y` and `sin(phi) = u_z`; at the BS ULA
/// (elements along `y`) the steering angle obeys `sin(psi) = u_y`.
#[derive(Debug, Clone, Copy)]
pub struct LosAngles {
    /// Azimuth/elevation of the BS seen from the RIS.
    pub ris_from_bs: (f64, f64),
    /// Azimuth/elevation of the UE seen from the RIS.
    pub ris_from_ue: (f64, f64),
    /// BS steering angle toward the RIS.
    pub bs_to_ris: f64,
    /// BS steering angle toward the UE.
    pub bs_to_ue: f64,
}

fn ris_angles(target: &Vector3<f64>, ris: &Vector3<f64>) -> (f64, f64) {
    let u = (target - ris).normalize();
    let phi = u.z.clamp(-1.0, 1.0).asin();
    let sin_theta = if phi.cos().abs() > 1e-12 { u.y / phi.cos() } else { 0.0 };
    (sin_theta.clamp(-1.0, 1.0).asin(), phi)
}

fn bs_angle(target: &Vector3<f64>, bs: &Vector3<f64>) -> f64 {
    let u = (target - bs).normalize();
    u.y.clamp(-1.0, 1.0).asin()
}

/// Full statistical description of the three links.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub geom: SystemGeometry,
    pub links: Links,
    pub corr: SpatialCorrelation,
    pub angles: LosAngles,
    los_h: DVector<C64>,
    los_f: DVector<C64>,
    los_g: DMatrix<C64>,
}

/// How the BS-RIS link evolves across fading blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ensemble {
    /// All three links are redrawn every block.
    Iid,
    /// `G` is drawn once per session; `h` and `f` are redrawn per block.
    QuasiStaticBsRis,
}

/// One realization of the three links.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// UE -> BS, `N`-vector.
    pub h: DVector<C64>,
    /// UE -> RIS, `M`-vector.
    pub f: DVector<C64>,
    /// BS -> RIS, `M x N`.
    pub g: DMatrix<C64>,
}

impl ChannelModel {
    /// Builds the model, deriving all LoS responses from the geometry.
    pub fn new(geom: SystemGeometry, links: Links, corr: SpatialCorrelation) -> Result<Self> {
        if corr.r_r.nrows() != geom.m() {
            return Err(Error::Dimension(format!(
                "R_r is {}x{} but the RIS has {} elements",
                corr.r_r.nrows(),
                corr.r_r.ncols(),
                geom.m()
            )));
        }
        if corr.r_a.nrows() != geom.n {
            return Err(Error::Dimension(format!(
                "R_a is {}x{} but the BS has {} antennas",
                corr.r_a.nrows(),
                corr.r_a.ncols(),
                geom.n
            )));
        }
        let angles = LosAngles {
            ris_from_bs: ris_angles(&geom.bs_pos, &geom.ris_pos),
            ris_from_ue: ris_angles(&geom.ue_pos, &geom.ris_pos),
            bs_to_ris: bs_angle(&geom.ris_pos, &geom.bs_pos),
            bs_to_ue: bs_angle(&geom.ue_pos, &geom.bs_pos),
        };
        let los_h = ula_response(angles.bs_to_ue, geom.n, geom.d_a, geom.lambda);
        let los_f = upa_response(angles.ris_from_ue.0, angles.ris_from_ue.1, &geom);
        let a_ar = upa_response(angles.ris_from_bs.0, angles.ris_from_bs.1, &geom);
        let b_ar = ula_response(angles.bs_to_ris, geom.n, geom.d_a, geom.lambda);
        let los_g = &a_ar * b_ar.adjoint();
        Ok(Self { geom, links, corr, angles, los_h, los_f, los_g })
    }

    fn draw_h<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<C64> {
        let w = cn_vector(rng, self.geom.n, 1.0);
        let lp = &self.links.ue_bs;
        self.los_h.map(|v| v * C64::new(lp.los_scale(), 0.0))
            + &self.corr.r_a_factor * w * C64::new(lp.nlos_scale(), 0.0)
    }

    fn draw_f<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<C64> {
        let w = cn_vector(rng, self.geom.m(), 1.0);
        let lp = &self.links.ue_ris;
        self.los_f.map(|v| v * C64::new(lp.los_scale(), 0.0))
            + &self.corr.r_r_factor * w * C64::new(lp.nlos_scale(), 0.0)
    }

    fn draw_g<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<C64> {
        let w = cn_matrix(rng, self.geom.m(), self.geom.n, 1.0);
        let lp = &self.links.bs_ris;
        let nlos = &self.corr.r_r_factor * w * self.corr.r_a_factor.transpose();
        self.los_g.map(|v| v * C64::new(lp.los_scale(), 0.0)) + nlos * C64::new(lp.nlos_scale(), 0.0)
    }
}

/// Draws one i.i.d. realization of all three links. The RNG is consumed in
/// the fixed order `h`, `f`, `G`, which is part of the reproducibility
/// contract.
pub fn sample_channels<R: Rng + ?Sized>(model: &ChannelModel, rng: &mut R) -> ChannelRealization {
    let h = model.draw_h(rng);
    let f = model.draw_f(rng);
    let g = model.draw_g(rng);
    ChannelRealization { h, f, g }
}

/// Discrete-path cross-check generator: scattering as an explicit sum of
/// `L` planar wavefronts with i.i.d. complex gains of the configured
/// variance and angles drawn uniformly. Used only to sanity-check the
/// correlated-Gaussian synthesis; the central-limit route is the default.
pub fn sample_channels_pathsum<R: Rng + ?Sized>(model: &ChannelModel, rng: &mut R) -> ChannelRealization {
    let geom = &model.geom;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let angle = |rng: &mut R| rng.random_range(-half_pi..half_pi);

    let lp = model.links.ue_bs;
    let mut h = model.los_h.map(|v| v * C64::new(lp.los_scale(), 0.0));
    for _ in 0..lp.paths {
        let c = cn_scalar(rng, lp.path_gain_var / lp.paths as f64);
        h += ula_response(angle(rng), geom.n, geom.d_a, geom.lambda) * (c * lp.nlos_scale());
    }

    let lp = model.links.ue_ris;
    let mut f = model.los_f.map(|v| v * C64::new(lp.los_scale(), 0.0));
    for _ in 0..lp.paths {
        let c = cn_scalar(rng, lp.path_gain_var / lp.paths as f64);
        f += upa_response(angle(rng), angle(rng), geom) * (c * lp.nlos_scale());
    }

    let lp = model.links.bs_ris;
    let mut g = model.los_g.map(|v| v * C64::new(lp.los_scale(), 0.0));
    for _ in 0..lp.paths {
        let c = cn_scalar(rng, lp.path_gain_var / lp.paths as f64);
        let a = upa_response(angle(rng), angle(rng), geom);
        let b = ula_response(angle(rng), geom.n, geom.d_a, geom.lambda);
        g += (&a * b.adjoint()) * (c * lp.nlos_scale());
    }

    ChannelRealization { h, f, g }
}

/// Stacks one realization into the cascaded vector
/// `h_r = vec([h, G^T diag(f)])`: the first `N` entries are `h`, then one
/// `N`-block `f_m * g_m` per RIS element, where `g_m` is the `m`-th column
/// of `G^T`.
pub fn cascade(real: &ChannelRealization) -> DVector<C64> {
    let n = real.h.nrows();
    let m = real.f.nrows();
    let mut h_r = DVector::zeros(n * (m + 1));
    h_r.rows_mut(0, n).copy_from(&real.h);
    for j in 0..m {
        let fm = real.f[j];
        for i in 0..n {
            // G^T column j equals G row j.
            h_r[(j + 1) * n + i] = real.g[(j, i)] * fm;
        }
    }
    h_r
}

/// Equivalent channel for a RIS phase vector `v`: `h + G^T diag(v) f`.
pub fn equivalent_channel(real: &ChannelRealization, v: &DVector<C64>) -> DVector<C64> {
    assert_eq!(v.nrows(), real.f.nrows(), "phase vector length must match the RIS size");
    let mut out = real.h.clone();
    for j in 0..real.f.nrows() {
        let w = v[j] * real.f[j];
        for i in 0..real.h.nrows() {
            out[i] += real.g[(j, i)] * w;
        }
    }
    out
}

/// Per-block channel source for one session, holding the BS-RIS link fixed
/// when the ensemble is quasi-static.
#[derive(Debug, Clone)]
pub struct BlockSampler<'a> {
    model: &'a ChannelModel,
    frozen_g: Option<DMatrix<C64>>,
}

impl<'a> BlockSampler<'a> {
    /// Creates the session source. In the quasi-static ensemble this draws
    /// the session's `G` from `rng` immediately.
    pub fn new<R: Rng + ?Sized>(model: &'a ChannelModel, ensemble: Ensemble, rng: &mut R) -> Self {
        let frozen_g = match ensemble {
            Ensemble::Iid => None,
            Ensemble::QuasiStaticBsRis => Some(model.draw_g(rng)),
        };
        Self { model, frozen_g }
    }

    /// Draws the channel state of one fading block.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let h = self.model.draw_h(rng);
        let f = self.model.draw_f(rng);
        let g = match &self.frozen_g {
            Some(g) => g.clone(),
            None => self.model.draw_g(rng),
        };
        ChannelRealization { h, f, g }
    }

    /// The model behind this session.
    pub fn model(&self) -> &ChannelModel {
        self.model
    }
}

/// Cascaded-channel covariance with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    /// `R_h = E{h_r h_r^H}` (`D x D`), hermitized.
    pub r_h: DMatrix<C64>,
    /// Eigenvectors of `R_h`, columns matching `p_h`.
    pub u_h: DMatrix<C64>,
    /// Eigenvalues of `R_h`, descending, clamped at zero.
    pub p_h: DVector<f64>,
}

/// Estimates `R_h` over `trials` Monte Carlo blocks drawn from `sampler`.
///
/// By default the LoS mean stays inside the second moment; pass
/// `subtract_mean` to estimate the central covariance instead. The
/// computation is chunked over fixed RNG streams derived from `seed`, so the
/// result is bit-for-bit reproducible for any worker count.
pub fn estimate_r_h(
    sampler: &BlockSampler,
    trials: usize,
    seed: u64,
    subtract_mean: bool,
) -> Result<CorrelationModel> {
    if trials == 0 {
        return Err(Error::Degenerate("covariance estimation needs at least one draw".into()));
    }
    let d = sampler.model().geom.d_cascaded();
    let zero = (DMatrix::<C64>::zeros(d, d), DVector::<C64>::zeros(d));
    let (sum_outer, sum_vec) = linalg::parallel_mc(
        trials,
        seed,
        |rng, len| {
            let mut outer = DMatrix::<C64>::zeros(d, d);
            let mut mean = DVector::<C64>::zeros(d);
            for _ in 0..len {
                let h_r = cascade(&sampler.draw(rng));
                outer.gerc(C64::new(1.0, 0.0), &h_r, &h_r, C64::new(1.0, 0.0));
                mean += &h_r;
            }
            (outer, mean)
        },
        |(a0, a1), (b0, b1)| (a0 + b0, a1 + b1),
        zero,
    );
    let t = C64::new(trials as f64, 0.0);
    let mut r_h = sum_outer / t;
    if subtract_mean {
        let mean = sum_vec / t;
        r_h.gerc(C64::new(-1.0, 0.0), &mean, &mean, C64::new(1.0, 0.0));
    }
    let e = herm_eigen_psd(&r_h)?;
    Ok(CorrelationModel { r_h: linalg::hermitian_part(&r_h), u_h: e.vectors, p_h: e.values })
}
