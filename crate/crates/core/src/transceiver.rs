//! 16-QAM symbol generation, WDM multiplexing and BER/Q measurement.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{param, Error, Result};
use crate::signal::{fft, frequency_shift, ifft, rrc_response, DualPolField};
use crate::units::dbm_to_watt;

/// Gray-coded 4-PAM levels indexed by the 2-bit label (b0 b1).
const PAM4: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

fn norm() -> f64 {
    10f64.sqrt()
}

fn pam_label(v: f64) -> usize {
    // Decision thresholds at -2, 0, +2 (unnormalized).
    match v {
        v if v < -2.0 => 0,
        v if v < 0.0 => 1,
        v if v < 2.0 => 3,
        _ => 2,
    }
}

/// Gray-mapped 16-QAM with unit mean power: bits (b0 b1) select the in-phase
/// level, (b2 b3) the quadrature level.
pub fn qam16_modulate(bits: &[u8]) -> Result<Vec<Complex64>> {
    if bits.len() % 4 != 0 {
        return param(format!("16-QAM needs a multiple of 4 bits, got {}", bits.len()));
    }
    if bits.iter().any(|&b| b > 1) {
        return param("bits must be 0 or 1");
    }
    Ok(bits
        .chunks_exact(4)
        .map(|b| {
            let i = PAM4[(b[0] as usize) << 1 | b[1] as usize];
            let q = PAM4[(b[2] as usize) << 1 | b[3] as usize];
            Complex64::new(i, q) / norm()
        })
        .collect())
}

/// Minimum-distance hard decisions.
pub fn qam16_demodulate(symbols: &[Complex64]) -> Vec<u8> {
    let mut bits = Vec::with_capacity(symbols.len() * 4);
    for s in symbols {
        let z = s * norm();
        for label in [pam_label(z.re), pam_label(z.im)] {
            bits.push((label >> 1) as u8);
            bits.push((label & 1) as u8);
        }
    }
    bits
}

/// The nearest constellation point to each symbol.
pub fn qam16_slice(s: Complex64) -> Complex64 {
    let z = s * norm();
    Complex64::new(PAM4[pam_label(z.re)], PAM4[pam_label(z.im)]) / norm()
}

pub fn constellation() -> Vec<Complex64> {
    (0..16u8)
        .flat_map(|k| qam16_modulate(&[k >> 3 & 1, k >> 2 & 1, k >> 1 & 1, k & 1]).unwrap())
        .collect()
}

/// Independent purposes that draw from the seeded generators. Seeds of
/// different domains never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedDomain {
    Train,
    Validation,
    Test,
    Link,
    Noise,
}

impl SeedDomain {
    fn tag(self) -> u64 {
        match self {
            SeedDomain::Train => 1,
            SeedDomain::Validation => 2,
            SeedDomain::Test => 3,
            SeedDomain::Link => 4,
            SeedDomain::Noise => 5,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for item `index` of `domain` under the experiment seed `base`.
/// The domain occupies the top byte so ranges are disjoint by construction.
pub fn derive_seed(base: u64, domain: SeedDomain, index: u64) -> u64 {
    (domain.tag() << 56) | (splitmix(base ^ splitmix(index)) >> 8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolFrame {
    pub bits_x: Vec<u8>,
    pub bits_y: Vec<u8>,
    pub symbols_x: Vec<Complex64>,
    pub symbols_y: Vec<Complex64>,
    /// Symbols per second.
    pub baud: f64,
}

impl SymbolFrame {
    /// Random dual-polarization 16-QAM frame from a counter-based generator.
    pub fn random(n_symbols: usize, baud: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..4 * n_symbols).map(|_| rng.random_range(0..2u8)).collect::<Vec<_>>();
        let bits_x = draw();
        let bits_y = draw();
        Self::from_bits(bits_x, bits_y, baud).expect("4 bits per symbol")
    }

    pub fn from_bits(bits_x: Vec<u8>, bits_y: Vec<u8>, baud: f64) -> Result<Self> {
        if bits_x.len() != bits_y.len() {
            return param("both polarizations need the same number of bits");
        }
        Ok(Self {
            symbols_x: qam16_modulate(&bits_x)?,
            symbols_y: qam16_modulate(&bits_y)?,
            bits_x,
            bits_y,
            baud,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols_x.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdmConfig {
    pub n_channels: usize,
    /// Hz.
    pub spacing: f64,
    /// Symbols per second.
    pub baud: f64,
    pub rolloff: f64,
    /// Per channel, both polarizations together.
    pub launch_power_dbm: f64,
}

impl WdmConfig {
    pub fn paper_default() -> Self {
        Self { n_channels: 5, spacing: 37.5e9, baud: 32e9, rolloff: 0.06, launch_power_dbm: -4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels % 2 == 0 {
            return Err(Error::Configuration("channel count must be odd so a center channel exists".into()));
        }
        if self.n_channels > 1 && self.spacing <= self.baud * (1.0 + self.rolloff) {
            return Err(Error::Configuration("channel spacing must exceed the occupied bandwidth".into()));
        }
        if !(0.0..=1.0).contains(&self.rolloff) || self.baud <= 0.0 {
            return Err(Error::Configuration("invalid roll-off or symbol rate".into()));
        }
        Ok(())
    }

    /// Carrier offset of channel `i` (0-based, lowest frequency first).
    pub fn channel_offset(&self, i: usize) -> f64 {
        (i as f64 - (self.n_channels as f64 - 1.0) / 2.0) * self.spacing
    }

    pub fn center_index(&self) -> usize {
        self.n_channels / 2
    }
}

/// Upsamples and RRC-shapes one polarization's symbols (circularly).
fn shape(symbols: &[Complex64], sps: usize, amplitude: f64, response: &[Complex64]) -> Vec<Complex64> {
    let mut up = vec![Complex64::new(0.0, 0.0); symbols.len() * sps];
    for (k, s) in symbols.iter().enumerate() {
        up[k * sps] = s * amplitude;
    }
    fft(&mut up);
    up.iter_mut().zip(response).for_each(|(a, h)| *a *= h);
    ifft(&mut up);
    up
}

/// RRC-shaped, power-scaled, frequency-multiplexed WDM field.
///
/// Each channel carries `launch_power_dbm` split equally between the two
/// polarizations. Pulse shaping is circular, so the block is periodic.
pub fn build_wdm(frames: &[SymbolFrame], cfg: &WdmConfig, sps: usize) -> Result<DualPolField> {
    cfg.validate()?;
    if frames.len() != cfg.n_channels {
        return param(format!("{} frames for {} channels", frames.len(), cfg.n_channels));
    }
    let n_sym = frames[0].len();
    if n_sym == 0 || frames.iter().any(|f| f.len() != n_sym) {
        return param("all channels need the same nonzero symbol count");
    }
    let fs = sps as f64 * cfg.baud;
    let edge = cfg.channel_offset(cfg.n_channels - 1) + cfg.baud * (1.0 + cfg.rolloff) / 2.0;
    if edge >= fs / 2.0 {
        return Err(Error::Configuration(format!(
            "WDM band edge {edge:.3e} Hz aliases at {sps} samples/symbol"
        )));
    }
    let amplitude = (dbm_to_watt(cfg.launch_power_dbm) / 2.0 * sps as f64).sqrt();
    let response = rrc_response(n_sym * sps, fs, cfg.baud, cfg.rolloff)?;
    let mut total = DualPolField::zeros(n_sym * sps, fs);
    for (i, frame) in frames.iter().enumerate() {
        let ch = DualPolField {
            x: shape(&frame.symbols_x, sps, amplitude, &response),
            y: shape(&frame.symbols_y, sps, amplitude, &response),
            sample_rate: fs,
            center_offset: cfg.channel_offset(i),
        };
        let placed = frequency_shift(&ch, cfg.channel_offset(i))?;
        for (t, p) in total.x.iter_mut().zip(&placed.x) {
            *t += p;
        }
        for (t, p) in total.y.iter_mut().zip(&placed.y) {
            *t += p;
        }
    }
    Ok(total)
}

/// Gaussian-equivalent Q-factor in dB: 20 log10(sqrt(2) erfc^-1(2 BER)).
pub fn q_from_ber(ber: f64) -> Result<f64> {
    if !(ber > 0.0 && ber < 0.5) {
        return param(format!("Q is defined for 0 < BER < 0.5, got {ber}"));
    }
    Ok(20.0 * (2f64.sqrt() * erfc_inv(2.0 * ber)).log10())
}

/// Gray-mapped square 16-QAM bit error rate on an AWGN channel at
/// symbol SNR `snr` (linear Es/N0).
pub fn ber_16qam_awgn(snr: f64) -> f64 {
    let q = |x: f64| 0.5 * erfc(x / 2f64.sqrt());
    let a = (snr / 5.0).sqrt();
    0.75 * q(a) + 0.5 * q(3.0 * a) - 0.25 * q(5.0 * a)
}

/// Q from error counts; a zero count is clamped to BER = 1/(2 n_bits).
pub fn q_from_counts(errors: u64, n_bits: u64) -> Result<(f64, bool)> {
    if n_bits == 0 {
        return param("no bits counted");
    }
    if errors == 0 {
        return Ok((q_from_ber(0.5 / n_bits as f64)?, true));
    }
    Ok((q_from_ber(errors as f64 / n_bits as f64)?, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ber: f64,
    pub q_db: f64,
    /// Error-vector magnitude, dB; `-inf` for a perfect match.
    pub evm_db: f64,
    pub n_bits: u64,
    pub bit_errors: u64,
    /// Set when the error count was zero and Q was computed from the clamp.
    pub q_clamped: bool,
    /// Q of the Gaussian-noise BER at the measured SNR (1 / EVM); resolves
    /// error rates far below what the counted bits can.
    pub q_snr_db: f64,
}

impl Metrics {
    pub fn from_counts(bit_errors: u64, n_bits: u64, error_energy: f64, reference_energy: f64) -> Result<Self> {
        let ber = bit_errors as f64 / n_bits.max(1) as f64;
        if ber >= 0.5 {
            return Err(Error::Numeric(format!("BER {ber} is at or beyond chance level")));
        }
        let (q_db, q_clamped) = q_from_counts(bit_errors, n_bits)?;
        let evm_db = if error_energy == 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * (error_energy / reference_energy).log10()
        };
        let q_snr_db = if error_energy == 0.0 {
            f64::INFINITY
        } else {
            q_from_ber(ber_16qam_awgn(reference_energy / error_energy).clamp(1e-300, 0.49))?
        };
        Ok(Self { ber, q_db, evm_db, n_bits, bit_errors, q_clamped, q_snr_db })
    }
}

/// Accumulates error statistics across blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorCounter {
    pub bit_errors: u64,
    pub n_bits: u64,
    pub error_energy: f64,
    pub reference_energy: f64,
}

impl ErrorCounter {
    pub fn add(&mut self, received: &[Complex64], sent: &[Complex64], sent_bits: &[u8]) {
        let bits = qam16_demodulate(received);
        self.bit_errors += bits.iter().zip(sent_bits).filter(|(a, b)| a != b).count() as u64;
        self.n_bits += bits.len().min(sent_bits.len()) as u64;
        for (r, s) in received.iter().zip(sent) {
            self.error_energy += (r - s).norm_sqr();
            self.reference_energy += s.norm_sqr();
        }
    }

    pub fn merge(&mut self, other: &ErrorCounter) {
        self.bit_errors += other.bit_errors;
        self.n_bits += other.n_bits;
        self.error_energy += other.error_energy;
        self.reference_energy += other.reference_energy;
    }

    pub fn metrics(&self) -> Result<Metrics> {
        Metrics::from_counts(self.bit_errors, self.n_bits, self.error_energy, self.reference_energy)
    }
}

/// Bit errors, BER, Q and EVM over both polarizations, skipping `guard`
/// symbols at each end. Inputs must already be synchronized.
pub fn measure(received_x: &[Complex64], received_y: &[Complex64], reference: &SymbolFrame, guard: usize) -> Result<Metrics> {
    let n = reference.len();
    if received_x.len() != n || received_y.len() != n {
        return param(format!(
            "received lengths ({}, {}) differ from the reference ({n})",
            received_x.len(),
            received_y.len()
        ));
    }
    if 2 * guard >= n {
        return param("guard leaves no symbols to count");
    }
    let r = guard..n - guard;
    let b = 4 * guard..4 * (n - guard);
    let mut c = ErrorCounter::default();
    c.add(&received_x[r.clone()], &reference.symbols_x[r.clone()], &reference.bits_x[b.clone()]);
    c.add(&received_y[r.clone()], &reference.symbols_y[r], &reference.bits_y[b]);
    c.metrics()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::fft;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn round_trip_4096_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bits: Vec<u8> = (0..4096).map(|_| rng.random_range(0..2)).collect();
        assert_eq!(qam16_demodulate(&qam16_modulate(&bits).unwrap()), bits);
        assert!(qam16_modulate(&bits[..5]).is_err());
    }

    #[test]
    fn unit_mean_power() {
        let c = constellation();
        assert_eq!(c.len(), 16);
        let p: f64 = c.iter().map(|s| s.norm_sqr()).sum::<f64>() / 16.0;
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gray_neighbors_differ_in_one_bit() {
        let pts = constellation();
        let labels: Vec<Vec<u8>> = pts.iter().map(|p| qam16_demodulate(&[*p])).collect();
        let d = 2.0 / 10f64.sqrt();
        let mut pairs = 0;
        for i in 0..16 {
            for j in i + 1..16 {
                if ((pts[i] - pts[j]).norm() - d).abs() < 1e-9 {
                    pairs += 1;
                    let ham = labels[i].iter().zip(&labels[j]).filter(|(a, b)| a != b).count();
                    assert_eq!(ham, 1, "{i} {j}");
                }
            }
        }
        assert_eq!(pairs, 24);
    }

    #[test]
    fn q_values() {
        assert!((q_from_ber(1e-3).unwrap() - 9.80).abs() < 0.005);
        assert!((q_from_ber(0.0227).unwrap() - 6.02).abs() < 0.01);
        assert!(q_from_ber(0.5).is_err());
        assert!(q_from_ber(0.0).is_err());
        let (q, clamped) = q_from_counts(0, 1_000_000).unwrap();
        assert!(clamped && (q - q_from_ber(5e-7).unwrap()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let q = q_from_ber(k as f64 * 0.00499).unwrap();
            assert!(q < prev);
            prev = q;
        }
    }

    #[test]
    fn measure_counts() {
        let frame = SymbolFrame::random(10_000, 32e9, 3);
        let m = measure(&frame.symbols_x, &frame.symbols_y, &frame, 0).unwrap();
        assert_eq!(m.bit_errors, 0);
        assert!(m.q_clamped && m.evm_db == f64::NEG_INFINITY);

        // Move one symbol to a nearest neighbor: exactly one bit flips.
        let mut rx = frame.symbols_x.clone();
        let s = rx[500];
        let step = if s.re > 0.0 { -2.0 } else { 2.0 } / 10f64.sqrt();
        rx[500] = s + Complex64::new(step, 0.0);
        let m = measure(&rx, &frame.symbols_y, &frame, 0).unwrap();
        assert_eq!(m.bit_errors, 1);
        assert!((m.ber - 1.0 / 80_000.0).abs() < 1e-15);
        assert!(measure(&rx[1..], &frame.symbols_y, &frame, 0).is_err());
    }

    #[test]
    fn evm_of_awgn() {
        let frame = SymbolFrame::random(50_000, 32e9, 4);
        let sigma2: f64 = 0.01;
        let n = Normal::new(0.0, (sigma2 / 2.0).sqrt()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut noisy = |v: &[Complex64]| -> Vec<Complex64> {
            v.iter().map(|s| s + Complex64::new(n.sample(&mut rng), n.sample(&mut rng))).collect()
        };
        let rx = noisy(&frame.symbols_x);
        let ry = noisy(&frame.symbols_y);
        let m = measure(&rx, &ry, &frame, 0).unwrap();
        assert!((m.evm_db - 10.0 * sigma2.log10()).abs() < 0.2);
    }

    #[test]
    fn seeds_are_disjoint_by_domain() {
        let a: Vec<u64> = (0..1000).map(|i| derive_seed(7, SeedDomain::Train, i)).collect();
        let b: Vec<u64> = (0..1000).map(|i| derive_seed(7, SeedDomain::Test, i)).collect();
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    fn spectrum_db(f: &DualPolField) -> Vec<f64> {
        let mut s = f.x.clone();
        fft(&mut s);
        s.iter().map(|z| z.norm_sqr()).collect()
    }

    #[test]
    fn single_channel_spectrum_is_confined() {
        let cfg = WdmConfig { n_channels: 1, ..WdmConfig::paper_default() };
        let frames = vec![SymbolFrame::random(4096, cfg.baud, 1)];
        let f = build_wdm(&frames, &cfg, 16).unwrap();
        let p = spectrum_db(&f);
        let n = p.len();
        let fs = f.sample_rate;
        let edge = cfg.baud * (1.0 + cfg.rolloff) / 2.0;
        let total: f64 = p.iter().sum();
        let outside: f64 = (0..n)
            .filter(|&k| {
                let fk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * fs / n as f64;
                fk.abs() > edge
            })
            .map(|k| p[k])
            .sum();
        assert!(10.0 * (outside / total).log10() < -40.0);
        // Launch power per channel.
        assert!((f.mean_power() / dbm_to_watt(cfg.launch_power_dbm) - 1.0).abs() < 0.02);
    }

    #[test]
    fn five_channel_lobes_and_power_additivity() {
        let cfg = WdmConfig::paper_default();
        let frames: Vec<_> = (0..5).map(|i| SymbolFrame::random(2048, cfg.baud, 10 + i)).collect();
        let f = build_wdm(&frames, &cfg, 16).unwrap();
        let p = spectrum_db(&f);
        let n = p.len();
        let fs = f.sample_rate;
        let bin = |hz: f64| ((hz / fs * n as f64).round() as isize).rem_euclid(n as isize) as usize;
        let df = fs / n as f64;
        let band = |c: f64, half: f64| -> f64 {
            let m = (half / df) as isize;
            (-m..=m).map(|d| p[bin(c + d as f64 * df)]).sum::<f64>() / (2 * m + 1) as f64
        };
        for k in -2..=2 {
            let lobe = band(k as f64 * 37.5e9, 10e9);
            let gap = band(k as f64 * 37.5e9 + 18.75e9, 1.5e9);
            assert!(lobe > 1e3 * gap, "channel {k}");
        }
        let single = build_wdm(&frames[2..3], &WdmConfig { n_channels: 1, ..cfg }, 16).unwrap();
        let ratio_db = 10.0 * (f.mean_power() / single.mean_power()).log10();
        assert!((ratio_db - 10.0 * 5f64.log10()).abs() < 0.1);
        assert!(build_wdm(&frames, &cfg, 2).is_err());
    }

    #[test]
    fn wdm_is_linear_per_channel() {
        let cfg = WdmConfig { n_channels: 3, ..WdmConfig::paper_default() };
        let frames: Vec<_> = (0..3).map(|i| SymbolFrame::random(512, cfg.baud, 20 + i)).collect();
        let base = build_wdm(&frames, &cfg, 8).unwrap();
        let mut scaled = frames.clone();
        let s0 = &mut scaled[0];
        s0.symbols_x.iter_mut().chain(s0.symbols_y.iter_mut()).for_each(|s| *s *= 2.0);
        let more = build_wdm(&scaled, &cfg, 8).unwrap();
        let mut only = frames.clone();
        for f in [1, 2] {
            let o = &mut only[f];
            o.symbols_x.iter_mut().chain(o.symbols_y.iter_mut()).for_each(|s| *s = Complex64::new(0.0, 0.0));
        }
        let lobe0 = build_wdm(&only, &cfg, 8).unwrap();
        for k in 0..base.len() {
            let want = base.x[k] + lobe0.x[k];
            assert!((more.x[k] - want).norm() < 1e-12);
        }
    }
}
