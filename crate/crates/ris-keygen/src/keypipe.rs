//! From channel measurements to key bits.
//!
//! Both parties hold a series of complex measurement vectors that agree up
//! to independent noise. The pipeline removes the predictable part (the
//! per-dimension sample mean, which absorbs the static line-of-sight
//! component), normalizes to unit mean power, and quantizes each real
//! dimension against the party's own empirical median, one bit per value.
//! Disagreement between the two bit strings is summarized by the bit
//! disagreement rate; the marginal quality of a string is screened with a
//! subset of the standard statistical randomness tests (monobit, block
//! frequency, runs, longest run of ones, cumulative sums), each reported
//! as a p-value with the conventional 0.01 pass threshold.
//!
//! Real and imaginary parts are quantized as separate streams: under
//! circular symmetry they carry independent randomness. The threshold is
//! the exact median (single-bit, no guard band), so each party's string is
//! balanced by construction.

use nalgebra::DMatrix;
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;
use std::collections::BTreeMap;
use std::path::Path;

use crate::linalg::C64;
use crate::{Error, Result};

/// Conventional pass threshold for the randomness p-values.
pub const PASS_THRESHOLD: f64 = 0.01;

/// Paired measurement series, one `T_d x D` matrix per party.
/// Rows are probing rounds, columns are measurement dimensions.
#[derive(Debug, Clone)]
pub struct MeasurementSeries {
    pub bs: DMatrix<C64>,
    pub ue: DMatrix<C64>,
}

impl MeasurementSeries {
    pub fn new(bs: DMatrix<C64>, ue: DMatrix<C64>) -> Result<Self> {
        if bs.shape() != ue.shape() {
            return Err(Error::Dimension(format!(
                "parties disagree on series shape: {:?} vs {:?}",
                bs.shape(),
                ue.shape()
            )));
        }
        if bs.nrows() == 0 || bs.ncols() == 0 {
            return Err(Error::Dimension("measurement series is empty".into()));
        }
        Ok(Self { bs, ue })
    }

    /// Rounds in the series.
    pub fn rounds(&self) -> usize {
        self.bs.nrows()
    }

    /// Measurement dimensions per round.
    pub fn dims(&self) -> usize {
        self.bs.ncols()
    }
}

/// Quantized keys with their quality summary.
#[derive(Debug, Clone)]
pub struct KeyMaterial {
    pub bits_a: Vec<u8>,
    pub bits_b: Vec<u8>,
    pub bdr: f64,
    pub p_values: BTreeMap<String, f64>,
}

impl KeyMaterial {
    /// Key length in bits.
    pub fn l_k(&self) -> usize {
        self.bits_a.len()
    }

    /// True when every computed p-value clears the pass threshold.
    pub fn passes_randomness(&self) -> bool {
        !self.p_values.is_empty() && self.p_values.values().all(|&p| p > PASS_THRESHOLD)
    }
}

fn center_and_scale(x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let t = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / C64::new(t, 0.0);
        col.add_scalar_mut(-mean);
    }
    let power = out.norm_squared() / (out.nrows() * out.ncols()) as f64;
    if power <= 0.0 || !power.is_finite() {
        return Err(Error::Degenerate(
            "series has no variation after mean removal; nothing to quantize".into(),
        ));
    }
    Ok(out / C64::new(power.sqrt(), 0.0))
}

/// Per-party mean removal and power normalization.
///
/// Each party independently subtracts its per-dimension sample mean over
/// the rounds and divides by the root of its empirical mean power, so the
/// output has zero mean and unit power per entry. Idempotent. Needs at
/// least two rounds; a series that is constant in every dimension is
/// rejected as degenerate.
pub fn preprocess(series: &MeasurementSeries) -> Result<MeasurementSeries> {
    if series.rounds() < 2 {
        return Err(Error::Dimension(format!(
            "mean removal needs at least 2 rounds, got {}",
            series.rounds()
        )));
    }
    MeasurementSeries::new(center_and_scale(&series.bs)?, center_and_scale(&series.ue)?)
}

/// Empirical median (mean of the two central order statistics when the
/// count is even).
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let n = v.len();
    let (_, mid, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    let hi = *mid;
    if n % 2 == 1 {
        hi
    } else {
        let (_, lo, _) = v.select_nth_unstable_by(n / 2 - 1, f64::total_cmp);
        (hi + *lo) / 2.0
    }
}

fn quantize_party(x: &DMatrix<C64>) -> Vec<u8> {
    // Real parts of all entries (column-major), then imaginary parts, so
    // both parties index their streams identically.
    let mut values = Vec::with_capacity(2 * x.len());
    values.extend(x.iter().map(|z| z.re));
    values.extend(x.iter().map(|z| z.im));
    let thr = median(&values);
    values.iter().map(|&v| u8::from(v > thr)).collect()
}

/// Single-bit quantization against each party's own empirical median:
/// a value strictly above the median becomes 1, anything else 0. Output
/// length is `2 * rounds * dims` per party. Rank-based, so any monotone
/// increasing transform of the values leaves the bits unchanged.
pub fn cdf_quantize(series: &MeasurementSeries) -> (Vec<u8>, Vec<u8>) {
    (quantize_party(&series.bs), quantize_party(&series.ue))
}

/// Fraction of positions where the two bit strings differ.
pub fn bdr(bits_a: &[u8], bits_b: &[u8]) -> Result<f64> {
    if bits_a.len() != bits_b.len() {
        return Err(Error::Dimension(format!(
            "bit strings differ in length: {} vs {}",
            bits_a.len(),
            bits_b.len()
        )));
    }
    if bits_a.is_empty() {
        return Err(Error::Dimension("cannot compare empty bit strings".into()));
    }
    let mismatches = bits_a.iter().zip(bits_b).filter(|(a, b)| a != b).count();
    Ok(mismatches as f64 / bits_a.len() as f64)
}

fn check_bits(bits: &[u8]) -> Result<()> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Config("bit strings must contain only 0 and 1".into()));
    }
    Ok(())
}

/// Monobit frequency test: p = erfc(|S_n| / sqrt(2 n)) for the signed sum.
pub fn monobit_p(bits: &[u8]) -> Result<f64> {
    check_bits(bits)?;
    if bits.is_empty() {
        return Err(Error::Dimension("monobit test needs a nonempty sequence".into()));
    }
    let s: i64 = bits.iter().map(|&b| 2 * b as i64 - 1).sum();
    let s_obs = s.abs() as f64 / (bits.len() as f64).sqrt();
    Ok(erfc(s_obs / std::f64::consts::SQRT_2))
}

/// Block frequency test with the given block length: chi-square of the
/// per-block ones proportions against one half, tail from the upper
/// regularized incomplete gamma.
pub fn block_frequency_p(bits: &[u8], block_len: usize) -> Result<f64> {
    check_bits(bits)?;
    if block_len == 0 || bits.len() < block_len {
        return Err(Error::Dimension(format!(
            "block frequency test needs at least one block of {block_len} bits"
        )));
    }
    let n_blocks = bits.len() / block_len;
    let mut chi = 0.0;
    for b in 0..n_blocks {
        let ones: u32 = bits[b * block_len..(b + 1) * block_len].iter().map(|&x| x as u32).sum();
        let pi = ones as f64 / block_len as f64;
        chi += (pi - 0.5).powi(2);
    }
    chi *= 4.0 * block_len as f64;
    Ok(gamma_ur(n_blocks as f64 / 2.0, chi / 2.0))
}

/// Runs test: compares the number of maximal runs against its expectation
/// under independence. Sequences whose ones proportion is already too far
/// from one half fail outright (p = 0), the standard prerequisite rule.
pub fn runs_p(bits: &[u8]) -> Result<f64> {
    check_bits(bits)?;
    let n = bits.len();
    if n < 2 {
        return Err(Error::Dimension("runs test needs at least 2 bits".into()));
    }
    let pi = bits.iter().map(|&b| b as f64).sum::<f64>() / n as f64;
    if (pi - 0.5).abs() >= 2.0 / (n as f64).sqrt() {
        return Ok(0.0);
    }
    let v = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let num = (v as f64 - 2.0 * n as f64 * pi * (1.0 - pi)).abs();
    let den = 2.0 * (2.0 * n as f64).sqrt() * pi * (1.0 - pi);
    Ok(erfc(num / den))
}

/// Longest-run-of-ones test. Block size and class probabilities follow the
/// standard three-tier table; needs at least 128 bits.
pub fn longest_run_p(bits: &[u8]) -> Result<f64> {
    check_bits(bits)?;
    let n = bits.len();
    // (block length, class boundaries [lo..=hi], class probabilities)
    let (m, lo, hi, pi): (usize, usize, usize, &[f64]) = if n < 128 {
        return Err(Error::Dimension(format!("longest-run test needs >= 128 bits, got {n}")));
    } else if n < 6272 {
        (8, 1, 4, &[0.2148, 0.3672, 0.2305, 0.1875])
    } else if n < 750_000 {
        (128, 4, 9, &[0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124])
    } else {
        (10_000, 10, 16, &[0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727])
    };
    let n_blocks = n / m;
    let mut nu = vec![0usize; hi - lo + 1];
    for b in 0..n_blocks {
        let (mut run, mut best) = (0usize, 0usize);
        for &bit in &bits[b * m..(b + 1) * m] {
            run = if bit == 1 { run + 1 } else { 0 };
            best = best.max(run);
        }
        nu[best.clamp(lo, hi) - lo] += 1;
    }
    let nb = n_blocks as f64;
    let chi: f64 = nu
        .iter()
        .zip(pi)
        .map(|(&v, &p)| (v as f64 - nb * p).powi(2) / (nb * p))
        .sum();
    let k = (hi - lo) as f64;
    Ok(gamma_ur(k / 2.0, chi / 2.0))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Cumulative sums test: the maximum partial-sum excursion of the signed
/// sequence (reversed first when `reverse` is set), with the random-walk
/// boundary-crossing tail.
pub fn cusum_p(bits: &[u8], reverse: bool) -> Result<f64> {
    check_bits(bits)?;
    let n = bits.len();
    if n == 0 {
        return Err(Error::Dimension("cumulative sums test needs a nonempty sequence".into()));
    }
    let signed = |b: u8| 2.0 * b as f64 - 1.0;
    let mut s = 0.0;
    let mut z: f64 = 0.0;
    if reverse {
        for &b in bits.iter().rev() {
            s += signed(b);
            z = z.max(s.abs());
        }
    } else {
        for &b in bits {
            s += signed(b);
            z = z.max(s.abs());
        }
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let root = nf.sqrt();
    let lo1 = ((-nf / z + 1.0) / 4.0).floor() as i64;
    let hi1 = ((nf / z - 1.0) / 4.0).floor() as i64;
    let mut t1 = 0.0;
    for k in lo1..=hi1 {
        let k = k as f64;
        t1 += std_normal_cdf((4.0 * k + 1.0) * z / root) - std_normal_cdf((4.0 * k - 1.0) * z / root);
    }
    let lo2 = ((-nf / z - 3.0) / 4.0).floor() as i64;
    let mut t2 = 0.0;
    for k in lo2..=hi1 {
        let k = k as f64;
        t2 += std_normal_cdf((4.0 * k + 3.0) * z / root) - std_normal_cdf((4.0 * k + 1.0) * z / root);
    }
    Ok((1.0 - t1 + t2).clamp(0.0, 1.0))
}

/// Runs the full test subset on a sequence of at least 128 bits. Tests
/// that cannot run on a given length are omitted from the map.
pub fn randomness_tests(bits: &[u8]) -> Result<BTreeMap<String, f64>> {
    if bits.len() < 128 {
        return Err(Error::Dimension(format!(
            "randomness screening needs >= 128 bits, got {}",
            bits.len()
        )));
    }
    let mut map = BTreeMap::new();
    let mut put = |name: &str, r: Result<f64>| {
        if let Ok(p) = r {
            map.insert(name.to_string(), p);
        }
    };
    put("monobit", monobit_p(bits));
    put("block_frequency", block_frequency_p(bits, 16));
    put("runs", runs_p(bits));
    put("longest_run", longest_run_p(bits));
    put("cusum_fwd", cusum_p(bits, false));
    put("cusum_rev", cusum_p(bits, true));
    Ok(map)
}

/// Full pipeline: preprocess, quantize, compare, and screen. The p-values
/// are computed on the BS string when it is long enough, otherwise left
/// empty.
pub fn generate_keys(series: &MeasurementSeries) -> Result<KeyMaterial> {
    let clean = preprocess(series)?;
    let (bits_a, bits_b) = cdf_quantize(&clean);
    let rate = bdr(&bits_a, &bits_b)?;
    let p_values =
        if bits_a.len() >= 128 { randomness_tests(&bits_a)? } else { BTreeMap::new() };
    Ok(KeyMaterial { bits_a, bits_b, bdr: rate, p_values })
}

/// Packs 0/1 bits into bytes, most significant bit first, zero-padding the
/// final byte.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Writes the packed bits to a file for external test suites.
pub fn export_bits<P: AsRef<Path>>(path: P, bits: &[u8]) -> Result<()> {
    std::fs::write(path, pack_bits(bits))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cn_scalar, stream_rng};
    use rand::Rng;

    fn parse(s: &str) -> Vec<u8> {
        s.bytes().map(|c| c - b'0').collect()
    }

    fn random_series(t: usize, d: usize, seed: u64) -> MeasurementSeries {
        let mut rng = stream_rng(seed, 0);
        let bs = DMatrix::from_fn(t, d, |_, _| cn_scalar(&mut rng, 1.0));
        let ue = DMatrix::from_fn(t, d, |_, _| cn_scalar(&mut rng, 1.0));
        MeasurementSeries::new(bs, ue).unwrap()
    }

    #[test]
    fn monobit_reference_value() {
        let p = monobit_p(&parse("1011010101")).unwrap();
        assert!((p - 0.5270892568655381).abs() < 1e-8);
    }

    #[test]
    fn block_frequency_reference_value() {
        let p = block_frequency_p(&parse("0110011010"), 3).unwrap();
        assert!((p - 0.8012519569012009).abs() < 1e-8);
    }

    #[test]
    fn runs_reference_value() {
        let p = runs_p(&parse("1001101011")).unwrap();
        assert!((p - 0.1472322553636657).abs() < 1e-8);
        // Prerequisite: grossly biased sequences fail outright.
        // n = 16 all-ones gives |pi - 1/2| = 1/2 = 2 / sqrt(16).
        assert_eq!(runs_p(&parse("1111111111111111")).unwrap(), 0.0);
    }

    #[test]
    fn longest_run_reference_value() {
        // Sixteen 8-bit blocks engineered to land in the run-length
        // classes with counts (4, 9, 3, 0).
        let mut s = String::new();
        for _ in 0..4 {
            s.push_str("01010101");
        }
        for _ in 0..9 {
            s.push_str("01100101");
        }
        for _ in 0..3 {
            s.push_str("01110010");
        }
        let p = longest_run_p(&parse(&s)).unwrap();
        assert!((p - 0.18059797678555792).abs() < 1e-8, "got {p}");
        assert!(longest_run_p(&parse("10101010")).is_err(), "too short");
    }

    #[test]
    fn cusum_reference_value() {
        let bits = parse("1011010111");
        let p = cusum_p(&bits, false).unwrap();
        assert!((p - 0.4115847182525979).abs() < 1e-8, "got {p}");
        let p_rev = cusum_p(&bits, true).unwrap();
        assert!((p_rev - 0.4115847182525979).abs() < 1e-8, "got {p_rev}");
    }

    #[test]
    fn extreme_sequences_fail_their_tests() {
        let zeros = vec![0u8; 1024];
        assert!(monobit_p(&zeros).unwrap() < 1e-10);
        let alternating: Vec<u8> = (0..1024).map(|i| (i % 2) as u8).collect();
        assert!(runs_p(&alternating).unwrap() < PASS_THRESHOLD);
        assert!(cusum_p(&zeros, false).unwrap() < 1e-10);
    }

    #[test]
    fn good_rng_bits_pass_the_suite() {
        let mut passes = 0;
        for seed in 0..100u64 {
            let mut rng = stream_rng(seed, 9);
            let bits: Vec<u8> = (0..4096).map(|_| rng.random_range(0..2u8)).collect();
            let map = randomness_tests(&bits).unwrap();
            assert_eq!(map.len(), 6, "all six tests must run at this length");
            if map.values().all(|&p| p > PASS_THRESHOLD) {
                passes += 1;
            }
        }
        assert!(passes >= 95, "only {passes}/100 seeds passed the suite");
    }

    #[test]
    fn preprocess_centers_and_normalizes() {
        let s = random_series(64, 5, 1);
        let out = preprocess(&s).unwrap();
        for party in [&out.bs, &out.ue] {
            for col in party.column_iter() {
                assert!((col.sum() / C64::new(64.0, 0.0)).norm() < 1e-10);
            }
            let power = party.norm_squared() / party.len() as f64;
            assert!((power - 1.0).abs() < 1e-10);
        }
        // Idempotent.
        let twice = preprocess(&out).unwrap();
        assert!((&twice.bs - &out.bs).norm() < 1e-9);
        assert!((&twice.ue - &out.ue).norm() < 1e-9);
    }

    #[test]
    fn preprocess_rejects_degenerate_series() {
        let flat = DMatrix::from_element(8, 3, C64::new(2.5, -1.0));
        let s = MeasurementSeries::new(flat.clone(), flat).unwrap();
        assert!(matches!(preprocess(&s), Err(Error::Degenerate(_))));
        let short = random_series(1, 3, 2);
        assert!(matches!(preprocess(&short), Err(Error::Dimension(_))));
    }

    #[test]
    fn preprocess_strips_the_static_component() {
        // A large constant offset plus small fluctuation: the output must
        // be the normalized fluctuation, not the offset.
        let mut rng = stream_rng(3, 0);
        let fluct = DMatrix::from_fn(256, 2, |_, _| cn_scalar(&mut rng, 1.0));
        let series = MeasurementSeries::new(
            fluct.map(|z| C64::new(1e6, -1e6) + z * 0.01),
            fluct.map(|z| C64::new(1e6, -1e6) + z * 0.01),
        )
        .unwrap();
        let out = preprocess(&series).unwrap();
        // Compare against preprocessing the fluctuation alone.
        let bare = preprocess(
            &MeasurementSeries::new(fluct.clone(), fluct).unwrap(),
        )
        .unwrap();
        assert!((&out.bs - &bare.bs).norm() < 1e-6 * bare.bs.norm());
    }

    #[test]
    fn quantization_splits_at_the_median() {
        let bs = DMatrix::from_row_slice(2, 1, &[C64::new(-1.0, 5.0), C64::new(1.0, -3.0)]);
        let s = MeasurementSeries::new(bs.clone(), bs).unwrap();
        let (a, b) = cdf_quantize(&s);
        // Values flattened as [re(col-major), im(col-major)] = [-1, 1, 5, -3],
        // median 0: strictly above gives 1.
        assert_eq!(a, vec![0, 1, 1, 0]);
        assert_eq!(a, b);
    }

    #[test]
    fn quantization_is_rank_based() {
        let s = random_series(128, 3, 4);
        let (a, _) = cdf_quantize(&s);
        // Any strictly increasing transform of the real values preserves
        // order, hence bits. Cubing acts monotonically on re and im parts.
        let transformed = MeasurementSeries::new(
            s.bs.map(|z| C64::new(z.re.powi(3), z.im.powi(3))),
            s.ue.map(|z| C64::new(z.re.powi(3), z.im.powi(3))),
        )
        .unwrap();
        let (a2, _) = cdf_quantize(&transformed);
        assert_eq!(a, a2);
    }

    #[test]
    fn quantization_is_permutation_equivariant() {
        let s = random_series(16, 2, 5);
        let (a, _) = cdf_quantize(&s);
        // Reverse the rounds: bits move with their samples.
        let rev_rows: Vec<usize> = (0..16).rev().collect();
        let perm = |m: &DMatrix<C64>| DMatrix::from_fn(16, 2, |i, j| m[(rev_rows[i], j)]);
        let (ap, _) = cdf_quantize(&MeasurementSeries::new(perm(&s.bs), perm(&s.ue)).unwrap());
        let (t, d) = (16, 2);
        for j in 0..d {
            for i in 0..t {
                // Entry (i, j) of stream k maps to flat index k*t*d + j*t + i.
                for k in 0..2 {
                    let orig = k * t * d + j * t + i;
                    let moved = k * t * d + j * t + (t - 1 - i);
                    assert_eq!(a[orig], ap[moved]);
                }
            }
        }
    }

    #[test]
    fn ones_fraction_is_balanced() {
        let s = preprocess(&random_series(2048, 4, 6)).unwrap();
        let (a, _) = cdf_quantize(&s);
        let ones = a.iter().map(|&b| b as usize).sum::<usize>() as f64 / a.len() as f64;
        assert!((ones - 0.5).abs() < 0.02, "ones fraction {ones}");
    }

    #[test]
    fn bdr_basics() {
        assert_eq!(bdr(&[1, 0, 1], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(bdr(&[1, 0, 1], &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(bdr(&[0; 8], &[1, 0, 0, 0, 0, 0, 0, 0]).unwrap(), 0.125);
        let x = vec![1, 1, 0, 1];
        let y = vec![1, 0, 0, 0];
        assert_eq!(bdr(&x, &y).unwrap(), bdr(&y, &x).unwrap());
        assert!(bdr(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn packing_is_big_endian_and_padded() {
        assert_eq!(pack_bits(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 1]), vec![0xB2, 0xC0]);
        assert_eq!(pack_bits(&[]), Vec::<u8>::new());
        assert_eq!(pack_bits(&[1]), vec![0x80]);
    }

    #[test]
    fn export_writes_packed_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        let bits = vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 1];
        export_bits(&path, &bits).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), vec![0xB2, 0xC0]);
    }

    #[test]
    fn correlated_measurements_give_low_disagreement() {
        // Shared randomness plus small independent noise: keys should
        // mostly agree, be the right length, and pass screening.
        let mut rng = stream_rng(7, 0);
        let shared = DMatrix::from_fn(1024, 4, |_, _| cn_scalar(&mut rng, 1.0));
        let noisy = |rng: &mut _, shared: &DMatrix<C64>| {
            shared.map(|z| z + cn_scalar(rng, 1e-4))
        };
        let series = MeasurementSeries::new(
            noisy(&mut rng, &shared),
            noisy(&mut rng, &shared),
        )
        .unwrap();
        let keys = generate_keys(&series).unwrap();
        assert_eq!(keys.l_k(), 2 * 1024 * 4);
        assert!(keys.bdr < 0.05, "bdr {}", keys.bdr);
        assert_eq!(keys.p_values.len(), 6);
        assert!(keys.passes_randomness(), "p-values {:?}", keys.p_values);
        // Independent parties disagree about half the time.
        let indep = random_series(1024, 4, 8);
        let k2 = generate_keys(&indep).unwrap();
        assert!((k2.bdr - 0.5).abs() < 0.05, "independent bdr {}", k2.bdr);
    }
}
