//! Bidirectional channel probing with RIS phase patterns.
//!
//! One fading block is probed over `V` packets. During packet `t` the RIS
//! holds the phase column `v_t` (column `t` of the pattern matrix, rows
//! `1..`), so both directions see the same equivalent channel
//! `h_e(v_t) = h + G^T diag(v_t) f`. The UE sends `Q` repeated scalar
//! pilots of power `P_b` and the BS combines its least-squares estimate
//! with the precoder transpose; the BS answers with a scaled-unitary pilot
//! matrix through the precoder `P`, which the UE despreads. Stacking the
//! `V` packets gives both terminals the same linear view of the cascaded
//! channel,
//!
//! ```text
//! z = kron(Phi_bar^T, P^T) h_r + estimation noise,
//! ```
//!
//! with white noise of variance `sigma_a^2 / (Q P_b)` at the BS and
//! `sigma_b^2 / (N_s P_a)` at the UE. Reciprocity makes the signal parts
//! identical by construction; only the noises differ.
//!
//! Each probing function exists in two forms that consume the RNG
//! identically and return bit-identical results: the fast path applies the
//! stacked linear map, while the `_full` path simulates the transmitted
//! pilots, the received samples, and the least-squares estimator. The fast
//! path is used everywhere; the full path exists to pin the algebra down.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::channel::{cascade, equivalent_channel, ChannelRealization};
use crate::linalg::{cn_vector, C64};
use crate::skr::EffectiveNoise;
use crate::{Error, Result};

/// Unit-modulus tolerance for validating phase patterns.
const PHASE_TOL: f64 = 1e-9;

/// Sylvester-Hadamard phase pattern of order `M + 1`.
///
/// Entries are +-1, the first row is all ones, and the rows are orthogonal
/// (`Phi Phi^T = (M+1) I`). Requires `M + 1` to be a power of two and an
/// even `k_q` so that -1 is a representable phase level.
pub fn hadamard_phase_matrix(m: usize, k_q: usize) -> Result<DMatrix<C64>> {
    let order = m + 1;
    if !order.is_power_of_two() {
        return Err(Error::Config(format!(
            "Hadamard pattern needs M + 1 to be a power of two, got {order}; pad to the next power instead"
        )));
    }
    if k_q < 2 || !k_q.is_multiple_of(2) {
        return Err(Error::Config(
            "phase quantization must be even so -1 is representable".into(),
        ));
    }
    let mut h = DMatrix::<f64>::from_element(1, 1, 1.0);
    while h.nrows() < order {
        let k = h.nrows();
        let mut next = DMatrix::<f64>::zeros(2 * k, 2 * k);
        next.view_mut((0, 0), (k, k)).copy_from(&h);
        next.view_mut((0, k), (k, k)).copy_from(&h);
        next.view_mut((k, 0), (k, k)).copy_from(&h);
        next.view_mut((k, k), (k, k)).copy_from(&(-&h));
        h = next;
    }
    Ok(h.map(|v| C64::new(v, 0.0)))
}

/// Hadamard pattern for arbitrary `M`: the first `M + 1` rows of the
/// Sylvester matrix of order `next_power_of_two(M + 1)`.
///
/// Row orthogonality survives the row slice (`Phi Phi^T = V I_{M+1}` with
/// `V` the padded order), so the pattern still excites all `M + 1`
/// cascaded directions; the price is `V > M + 1` packets per block when
/// `M + 1` is not a power of two.
pub fn padded_hadamard_phase_matrix(m: usize, k_q: usize) -> Result<DMatrix<C64>> {
    let v = (m + 1).next_power_of_two();
    let full = hadamard_phase_matrix(v - 1, k_q)?;
    Ok(full.rows(0, m + 1).clone_owned())
}

/// Probing configuration for one session.
#[derive(Debug, Clone)]
pub struct ProbeDesign {
    /// Phase pattern, `(M+1) x V`: row 0 is the direct path (all ones),
    /// rows `1..` hold the per-packet RIS phases.
    pub phi_bar: DMatrix<C64>,
    /// Precoder with orthonormal columns, `N x N_s`.
    pub p: DMatrix<C64>,
    /// Uplink pilot repetitions per packet.
    pub q: usize,
    /// Downlink per-antenna pilot power (watts).
    pub p_a: f64,
    /// Uplink pilot power (watts).
    pub p_b: f64,
    /// BS-side noise variance (watts).
    pub sigma2_a: f64,
    /// UE-side noise variance (watts).
    pub sigma2_b: f64,
    /// Phase quantization levels (`2^bits`).
    pub k_q: usize,
    /// `kron(Phi_bar^T, P^T)`, precomputed: maps `h_r` to the stacked
    /// noiseless measurement.
    map: DMatrix<C64>,
    /// Pseudo-inverse of `map`: recovers the cascaded-channel estimate
    /// from the stacked measurement.
    pinv: DMatrix<C64>,
    /// Downlink pilot matrix `S_d = sqrt(P_a) F` with `F` the unnormalized
    /// DFT, so `S_d^H S_d = N_s P_a I`.
    s_d: DMatrix<C64>,
}

impl ProbeDesign {
    /// Validated constructor. Checks the phase-pattern constraints (ones
    /// row, unit modulus on the quantization grid, full row rank), the
    /// precoder orthonormality, and positivity of powers and noises.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        phi_bar: DMatrix<C64>,
        p: DMatrix<C64>,
        q: usize,
        p_a: f64,
        p_b: f64,
        sigma2_a: f64,
        sigma2_b: f64,
        k_q: usize,
    ) -> Result<Self> {
        let (m1, v) = phi_bar.shape();
        if v < m1 {
            return Err(Error::Config(format!(
                "{v} packets cannot excite {m1} cascaded directions"
            )));
        }
        if k_q < 2 {
            return Err(Error::Config("need at least two phase levels".into()));
        }
        for t in 0..v {
            if (phi_bar[(0, t)] - C64::new(1.0, 0.0)).norm() > PHASE_TOL {
                return Err(Error::Config("first pattern row must be all ones".into()));
            }
            for r in 1..m1 {
                let e = phi_bar[(r, t)];
                if (e.norm() - 1.0).abs() > PHASE_TOL {
                    return Err(Error::Config(format!(
                        "pattern entry ({r},{t}) is not unit modulus"
                    )));
                }
                let step = std::f64::consts::TAU / k_q as f64;
                let k = (e.arg() / step).round();
                if (e - C64::from_polar(1.0, k * step)).norm() > PHASE_TOL {
                    return Err(Error::Config(format!(
                        "pattern entry ({r},{t}) is off the {k_q}-level phase grid"
                    )));
                }
            }
        }
        let sv = phi_bar.clone().svd(false, false).singular_values;
        if sv[sv.len() - 1] <= 1e-9 * sv[0] {
            return Err(Error::Config("phase pattern must have full row rank".into()));
        }
        let gram = p.adjoint() * &p;
        let n_s = p.ncols();
        if (gram - DMatrix::<C64>::identity(n_s, n_s)).norm() > 1e-10 {
            return Err(Error::Config("precoder columns must be orthonormal".into()));
        }
        if q == 0 || !(p_a > 0.0) || !(p_b > 0.0) || !(sigma2_a > 0.0) || !(sigma2_b > 0.0) {
            return Err(Error::Config(
                "pilot count, powers and noise variances must be positive".into(),
            ));
        }
        let map = phi_bar.transpose().kronecker(&p.transpose());
        let pinv = map
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Config(format!("stacked probe map is not invertible: {e}")))?;
        let root_pa = C64::new(p_a.sqrt(), 0.0);
        let s_d = DMatrix::from_fn(n_s, n_s, |r, c| {
            C64::from_polar(1.0, -std::f64::consts::TAU * (r * c) as f64 / n_s as f64) * root_pa
        });
        Ok(Self { phi_bar, p, q, p_a, p_b, sigma2_a, sigma2_b, k_q, map, pinv, s_d })
    }

    /// Square-Hadamard design (`V = M + 1`); `M + 1` must be a power of two.
    #[allow(clippy::too_many_arguments)]
    pub fn hadamard_square(
        m: usize,
        n: usize,
        q: usize,
        p_a: f64,
        p_b: f64,
        sigma2_a: f64,
        sigma2_b: f64,
        k_q: usize,
    ) -> Result<Self> {
        let phi = hadamard_phase_matrix(m, k_q)?;
        Self::new(phi, DMatrix::identity(n, n), q, p_a, p_b, sigma2_a, sigma2_b, k_q)
    }

    /// Padded-Hadamard design (`V = next_power_of_two(M + 1)`), valid for
    /// any `M`, with an identity precoder.
    #[allow(clippy::too_many_arguments)]
    pub fn hadamard_padded(
        m: usize,
        n: usize,
        q: usize,
        p_a: f64,
        p_b: f64,
        sigma2_a: f64,
        sigma2_b: f64,
        k_q: usize,
    ) -> Result<Self> {
        let phi = padded_hadamard_phase_matrix(m, k_q)?;
        Self::new(phi, DMatrix::identity(n, n), q, p_a, p_b, sigma2_a, sigma2_b, k_q)
    }

    /// RIS element count `M`.
    pub fn m(&self) -> usize {
        self.phi_bar.nrows() - 1
    }

    /// Packets per block `V`.
    pub fn v(&self) -> usize {
        self.phi_bar.ncols()
    }

    /// BS antenna count `N`.
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    /// Precoded dimension `N_s`.
    pub fn n_s(&self) -> usize {
        self.p.ncols()
    }

    /// Measurement length `V * N_s`.
    pub fn z_len(&self) -> usize {
        self.v() * self.n_s()
    }

    /// Length of the least-squares channel estimate, `N * (M + 1)`.
    pub fn est_len(&self) -> usize {
        self.pinv.nrows()
    }

    /// The stacked linear map `kron(Phi_bar^T, P^T)`.
    pub fn probe_map(&self) -> &DMatrix<C64> {
        &self.map
    }

    /// Least-squares estimate of the cascaded channel from one stacked
    /// measurement (minimum-norm solution when the precoder is thin). When
    /// `V > M + 1` the extra packets carry no new signal directions, so the
    /// estimate keeps everything the measurement says about the channel
    /// while shedding the redundant noise-only coordinates.
    pub fn ls_estimate(&self, z: &DVector<C64>) -> DVector<C64> {
        &self.pinv * z
    }

    /// Effective post-estimation noise pair for this design.
    pub fn effective_noise(&self) -> Result<EffectiveNoise> {
        EffectiveNoise::from_probing(self.sigma2_a, self.sigma2_b, self.q, self.p_b, self.n_s(), self.p_a)
    }

    /// RIS phase column for packet `t` (rows `1..` of the pattern).
    pub fn ris_phases(&self, t: usize) -> DVector<C64> {
        self.phi_bar.column(t).rows(1, self.m()).clone_owned()
    }

    /// Stacked estimation noise at the BS: per packet, `Q` received noise
    /// vectors are averaged and combined through `P^T`. One call consumes
    /// exactly `V * Q` draws of `N` samples.
    fn uplink_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<C64> {
        let (n, n_s, v) = (self.n(), self.n_s(), self.v());
        let scale = C64::new(1.0 / (self.q as f64 * self.p_b.sqrt()), 0.0);
        let pt = self.p.transpose();
        let mut z = DVector::zeros(v * n_s);
        for t in 0..v {
            let mut acc = DVector::<C64>::zeros(n);
            for _ in 0..self.q {
                acc += cn_vector(rng, n, self.sigma2_a);
            }
            z.rows_mut(t * n_s, n_s).copy_from(&(&pt * acc * scale));
        }
        z
    }

    /// Stacked estimation noise at the UE: per packet, one received noise
    /// vector despread by `S_d^H`. One call consumes `V` draws of `N_s`
    /// samples.
    fn downlink_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<C64> {
        let (n_s, v) = (self.n_s(), self.v());
        let scale = C64::new(1.0 / (n_s as f64 * self.p_a), 0.0);
        let s_d_conj = self.s_d.map(|e| e.conj());
        let mut z = DVector::zeros(v * n_s);
        for t in 0..v {
            let eta = cn_vector(rng, n_s, self.sigma2_b);
            z.rows_mut(t * n_s, n_s).copy_from(&(&s_d_conj * eta * scale));
        }
        z
    }
}

/// Both terminals' stacked measurements for one fading block.
#[derive(Debug, Clone)]
pub struct MeasurementPair {
    /// BS-side estimate of `kron(Phi_bar^T, P^T) h_r`.
    pub z_a: DVector<C64>,
    /// UE-side estimate of the same vector.
    pub z_b: DVector<C64>,
}

/// BS-side probing of one block: the stacked map applied to the cascaded
/// channel plus least-squares estimation noise.
pub fn uplink_probe<R: Rng + ?Sized>(
    real: &ChannelRealization,
    design: &ProbeDesign,
    rng: &mut R,
) -> DVector<C64> {
    design.probe_map() * cascade(real) + design.uplink_noise(rng)
}

/// UE-side probing of one block; the signal part equals the uplink's by
/// reciprocity.
pub fn downlink_probe<R: Rng + ?Sized>(
    real: &ChannelRealization,
    design: &ProbeDesign,
    rng: &mut R,
) -> DVector<C64> {
    design.probe_map() * cascade(real) + design.downlink_noise(rng)
}

/// Full-pilot uplink simulation: transmits the `Q` scalar pilots, applies
/// the channel per packet, least-squares-estimates the equivalent channel
/// and combines with `P^T`. Consumes the RNG exactly like [`uplink_probe`]
/// and matches it bit for bit up to floating-point association.
pub fn uplink_probe_full<R: Rng + ?Sized>(
    real: &ChannelRealization,
    design: &ProbeDesign,
    rng: &mut R,
) -> DVector<C64> {
    let (n_s, v) = (design.n_s(), design.v());
    let pt = design.p.transpose();
    let ls_scale = C64::new(1.0 / (design.q as f64 * design.p_b.sqrt()), 0.0);
    let pilot = C64::new(design.p_b.sqrt(), 0.0);
    let mut z = DVector::zeros(v * n_s);
    for t in 0..v {
        let h_e = equivalent_channel(real, &design.ris_phases(t));
        // Q received vectors y_q = h_e * pilot + noise, then LS averaging.
        let mut acc = DVector::<C64>::zeros(design.n());
        for _ in 0..design.q {
            acc += &h_e * pilot + cn_vector(rng, design.n(), design.sigma2_a);
        }
        let h_hat = acc * ls_scale;
        z.rows_mut(t * n_s, n_s).copy_from(&(&pt * h_hat));
    }
    z
}

/// Full-pilot downlink simulation: the BS transmits `P S_d` over `N_s`
/// symbol slots, the UE receives a row vector per packet and despreads by
/// `S_d^H / (N_s P_a)`. RNG-compatible with [`downlink_probe`].
pub fn downlink_probe_full<R: Rng + ?Sized>(
    real: &ChannelRealization,
    design: &ProbeDesign,
    rng: &mut R,
) -> DVector<C64> {
    let (n_s, v) = (design.n_s(), design.v());
    let despread = C64::new(1.0 / (n_s as f64 * design.p_a), 0.0);
    let mut z = DVector::zeros(v * n_s);
    for t in 0..v {
        let h_e = equivalent_channel(real, &design.ris_phases(t));
        // Received row: y = h_e^T P S_d + eta^T, one sample per slot.
        let tx = &design.p * &design.s_d;
        let y_t = tx.transpose() * &h_e + cn_vector(rng, n_s, design.sigma2_b);
        // Despread: z_t = conj(S_d) y / (N_s P_a).
        let zt = design.s_d.map(|e| e.conj()) * y_t * despread;
        z.rows_mut(t * n_s, n_s).copy_from(&zt);
    }
    z
}

/// Probes one block in both directions: uplink first, then downlink (the
/// RNG consumption order is part of the reproducibility contract).
pub fn probe_block<R: Rng + ?Sized>(
    real: &ChannelRealization,
    design: &ProbeDesign,
    rng: &mut R,
) -> MeasurementPair {
    let z_a = uplink_probe(real, design, rng);
    let z_b = downlink_probe(real, design, rng);
    MeasurementPair { z_a, z_b }
}
