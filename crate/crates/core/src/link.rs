//! Forward model of the dispersion-managed dual-polarization link.
//!
//! Every span is an SMF followed by an amplifier, then a DCF followed by a
//! second amplifier. Propagation inside a fiber uses the symmetric split-step
//! Fourier method; the frequency-domain operator of a step of length `dz` is
//! `exp(dz (-alpha/2 + j beta2 w^2 / 2))`, whose negation is the back-propagation
//! operator `alpha/2 - j beta2 w^2 / 2`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmd::{FiberPmd, PmdRealization, PmdSection};
use crate::signal::{angular_frequencies, fft, ifft, DualPolField};
use crate::units::{
    alpha_db_km_to_per_m, carrier_frequency, d_to_beta2, db_to_linear, dispersion_to_beta2_length,
    effective_length, PLANCK,
};

/// Physical fiber parameters in the units they are usually quoted in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiberParams {
    pub length_km: f64,
    pub alpha_db_km: f64,
    pub d_ps_nm_km: f64,
    pub gamma_per_w_km: f64,
    pub pmd_ps_sqrt_km: f64,
}

impl FiberParams {
    pub fn smf() -> Self {
        Self { length_km: 72.0, alpha_db_km: 0.2, d_ps_nm_km: 17.0, gamma_per_w_km: 1.4, pmd_ps_sqrt_km: 0.1 }
    }

    pub fn dcf() -> Self {
        Self { length_km: 13.0, alpha_db_km: 0.5, d_ps_nm_km: -80.0, gamma_per_w_km: 2.8, pmd_ps_sqrt_km: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length_km > 0.0
            && self.alpha_db_km >= 0.0
            && self.gamma_per_w_km >= 0.0
            && self.pmd_ps_sqrt_km >= 0.0
            && self.d_ps_nm_km.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Configuration(format!("invalid fiber parameters {self:?}")))
        }
    }

    pub fn length_m(&self) -> f64 {
        self.length_km * 1e3
    }

    pub fn alpha_per_m(&self) -> f64 {
        alpha_db_km_to_per_m(self.alpha_db_km)
    }

    pub fn beta2(&self, wavelength: f64) -> f64 {
        d_to_beta2(self.d_ps_nm_km, wavelength)
    }

    pub fn gamma_per_w_m(&self) -> f64 {
        self.gamma_per_w_km * 1e-3
    }

    /// Accumulated dispersion of the whole fiber, ps/nm.
    pub fn dispersion_ps_nm(&self) -> f64 {
        self.d_ps_nm_km * self.length_km
    }

    pub fn loss_db(&self) -> f64 {
        self.alpha_db_km * self.length_km
    }

    pub fn effective_length_km(&self) -> f64 {
        effective_length(self.alpha_per_m() * 1e3, self.length_km)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanConfig {
    pub smf: FiberParams,
    pub dcf: FiberParams,
    pub gain_smf_db: f64,
    pub gain_dcf_db: f64,
    /// `None` disables ASE.
    pub noise_figure_db: Option<f64>,
}

impl SpanConfig {
    /// 72 km SMF + 13 km DCF, loss-matched amplifiers, 5 dB noise figure.
    pub fn paper_default() -> Self {
        Self::loss_matched(FiberParams::smf(), FiberParams::dcf(), Some(5.0))
    }

    pub fn loss_matched(smf: FiberParams, dcf: FiberParams, noise_figure_db: Option<f64>) -> Self {
        Self { smf, dcf, gain_smf_db: smf.loss_db(), gain_dcf_db: dcf.loss_db(), noise_figure_db }
    }

    pub fn net_dispersion_ps_nm(&self) -> f64 {
        self.smf.dispersion_ps_nm() + self.dcf.dispersion_ps_nm()
    }

    pub fn length_km(&self) -> f64 {
        self.smf.length_km + self.dcf.length_km
    }

    pub fn validate(&self) -> Result<()> {
        self.smf.validate()?;
        self.dcf.validate()?;
        if !self.gain_smf_db.is_finite() || !self.gain_dcf_db.is_finite() {
            return Err(Error::Configuration("amplifier gains must be finite".into()));
        }
        Ok(())
    }
}

/// How the dispersion element at the end of the link is realized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalElement {
    /// Lossless, linear all-pass element.
    #[default]
    Ideal,
    /// A real fiber (DCF or SMF depending on sign) with loss, Kerr effect and
    /// a loss-matched amplifier.
    Physical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionMap {
    pub precompensation_ps_nm: f64,
    pub spans: Vec<SpanConfig>,
    pub terminal_dispersion_ps_nm: f64,
    #[serde(default)]
    pub terminal: TerminalElement,
}

impl DispersionMap {
    /// A map whose terminal element brings the residual dispersion at the
    /// receiver to exactly zero.
    pub fn closing(precompensation_ps_nm: f64, spans: Vec<SpanConfig>) -> Self {
        let net: f64 = spans.iter().map(SpanConfig::net_dispersion_ps_nm).sum();
        Self {
            precompensation_ps_nm,
            spans,
            terminal_dispersion_ps_nm: -(precompensation_ps_nm + net),
            terminal: TerminalElement::Ideal,
        }
    }

    /// The 28-span link: -1224 ps/nm pre-compensation, 85 % in-line
    /// compensation per span, zero residual at the receiver.
    pub fn paper_default() -> Self {
        Self::closing(-1224.0, vec![SpanConfig::paper_default(); 28])
    }

    pub fn validate(&self) -> Result<()> {
        if self.spans.is_empty() {
            return Err(Error::Configuration("dispersion map needs at least one span".into()));
        }
        self.spans.iter().try_for_each(SpanConfig::validate)
    }

    pub fn length_km(&self) -> f64 {
        self.spans.iter().map(SpanConfig::length_km).sum()
    }

    pub fn residual_at_rx_ps_nm(&self) -> f64 {
        self.precompensation_ps_nm
            + self.spans.iter().map(SpanConfig::net_dispersion_ps_nm).sum::<f64>()
            + self.terminal_dispersion_ps_nm
    }

    /// Accumulated dispersion (ps/nm) at distance `z_km` from the transmitter.
    /// The terminal element sits at the very end of the link and is included
    /// only for `z_km` at or beyond the link length.
    pub fn accumulated(&self, z_km: f64) -> f64 {
        let mut acc = self.precompensation_ps_nm;
        let mut z = z_km.max(0.0);
        for span in &self.spans {
            for fiber in [&span.smf, &span.dcf] {
                let l = z.min(fiber.length_km);
                acc += fiber.d_ps_nm_km * l;
                z -= l;
                if z <= 0.0 {
                    return acc;
                }
            }
        }
        acc + self.terminal_dispersion_ps_nm
    }

    /// Fiber `i` in link order (`2s` = SMF of span `s`, `2s+1` = DCF).
    pub fn fiber(&self, i: usize) -> &FiberParams {
        let s = &self.spans[i / 2];
        if i % 2 == 0 {
            &s.smf
        } else {
            &s.dcf
        }
    }

    /// Gain of the amplifier following fiber `i`, dB.
    pub fn gain_after_fiber(&self, i: usize) -> f64 {
        let s = &self.spans[i / 2];
        if i % 2 == 0 {
            s.gain_smf_db
        } else {
            s.gain_dcf_db
        }
    }

    /// Fiber realizing the terminal dispersion when it is physical.
    pub fn terminal_fiber(&self) -> Option<FiberParams> {
        let d = self.terminal_dispersion_ps_nm;
        if self.terminal != TerminalElement::Physical || d == 0.0 {
            return None;
        }
        let template = if d < 0.0 { self.spans[0].dcf } else { self.spans[0].smf };
        Some(FiberParams { length_km: d / template.d_ps_nm_km, pmd_ps_sqrt_km: 0.0, ..template })
    }
}

/// Kerr coupling used in the nonlinear substep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearModel {
    /// |X|^2 + 2/3 |Y|^2 cross-polarization coupling.
    #[default]
    Cnlse,
    /// 8/9 (|X|^2 + |Y|^2), averaged over polarization states.
    Manakov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsfmConfig {
    pub steps_smf: usize,
    pub steps_dcf: usize,
    /// Upper bound on the per-step nonlinear phase, rad.
    pub max_phase: Option<f64>,
    #[serde(default)]
    pub nonlinearity: NonlinearModel,
}

impl Default for SsfmConfig {
    fn default() -> Self {
        Self { steps_smf: 72, steps_dcf: 13, max_phase: None, nonlinearity: NonlinearModel::Cnlse }
    }
}

impl SsfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_smf == 0 || self.steps_dcf == 0 {
            return Err(Error::Configuration("SSFM needs at least one step per fiber".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Per-bin response of a lossy dispersive piece of length `dz` (m).
pub fn linear_response(omega: &[f64], beta2: f64, alpha: f64, dz: f64, direction: Direction) -> Vec<Complex64> {
    let s = direction.sign() * dz;
    omega
        .iter()
        .map(|w| Complex64::new(-alpha / 2.0, beta2 * w * w / 2.0) * s)
        .map(Complex64::exp)
        .collect()
}

/// All-pass response of an element with accumulated dispersion `d_acc_ps_nm`.
pub fn dispersion_response(omega: &[f64], d_acc_ps_nm: f64, wavelength: f64) -> Vec<Complex64> {
    let b2l = dispersion_to_beta2_length(d_acc_ps_nm, wavelength);
    omega.iter().map(|w| Complex64::from_polar(1.0, b2l * w * w / 2.0)).collect()
}

pub fn linear_step(field: &DualPolField, beta2: f64, alpha: f64, dz: f64, direction: Direction) -> DualPolField {
    let omega = angular_frequencies(field.len(), field.sample_rate);
    let mut out = field.clone();
    out.apply_frequency_response(&linear_response(&omega, beta2, alpha, dz, direction));
    out
}

/// Ideal dispersive element (e.g. the pre-compensation module).
pub fn dispersion_element(field: &DualPolField, d_acc_ps_nm: f64, wavelength: f64) -> DualPolField {
    let mut out = field.clone();
    if d_acc_ps_nm != 0.0 {
        let omega = angular_frequencies(field.len(), field.sample_rate);
        out.apply_frequency_response(&dispersion_response(&omega, d_acc_ps_nm, wavelength));
    }
    out
}

/// Kerr phase rotation in place. `phase_per_watt` is gamma * dz (rad/W),
/// positive for forward propagation.
pub fn kerr_rotate(x: &mut [Complex64], y: &mut [Complex64], model: NonlinearModel, phase_per_watt: f64) {
    if phase_per_watt == 0.0 {
        return;
    }
    match model {
        NonlinearModel::Cnlse => {
            for (a, b) in x.iter_mut().zip(y.iter_mut()) {
                let (pa, pb) = (a.norm_sqr(), b.norm_sqr());
                *a *= Complex64::cis(phase_per_watt * (pa + 2.0 / 3.0 * pb));
                *b *= Complex64::cis(phase_per_watt * (pb + 2.0 / 3.0 * pa));
            }
        }
        NonlinearModel::Manakov => {
            let k = 8.0 / 9.0 * phase_per_watt;
            for (a, b) in x.iter_mut().zip(y.iter_mut()) {
                let r = Complex64::cis(k * (a.norm_sqr() + b.norm_sqr()));
                *a *= r;
                *b *= r;
            }
        }
    }
}

pub fn nonlinear_step_cnlse(field: &DualPolField, gamma: f64, dz: f64) -> DualPolField {
    let mut out = field.clone();
    kerr_rotate(&mut out.x, &mut out.y, NonlinearModel::Cnlse, gamma * dz);
    out
}

pub fn nonlinear_step_manakov(field: &DualPolField, gamma: f64, dz: f64) -> DualPolField {
    let mut out = field.clone();
    kerr_rotate(&mut out.x, &mut out.y, NonlinearModel::Manakov, gamma * dz);
    out
}

pub fn apply_pmd_section(field: &DualPolField, section: &PmdSection) -> DualPolField {
    let omega = angular_frequencies(field.len(), field.sample_rate);
    let mut out = field.clone();
    fft(&mut out.x);
    fft(&mut out.y);
    section.apply_spectrum(&mut out.x, &mut out.y, &omega);
    ifft(&mut out.x);
    ifft(&mut out.y);
    out
}

pub fn invert_pmd_section(field: &DualPolField, section: &PmdSection) -> DualPolField {
    let omega = angular_frequencies(field.len(), field.sample_rate);
    let mut out = field.clone();
    fft(&mut out.x);
    fft(&mut out.y);
    section.invert_spectrum(&mut out.x, &mut out.y, &omega);
    ifft(&mut out.x);
    ifft(&mut out.y);
    out
}

/// ASE power spectral density per polarization, W/Hz.
pub fn ase_psd(gain_db: f64, noise_figure_db: f64, wavelength: f64) -> f64 {
    let g = db_to_linear(gain_db);
    let n_sp = db_to_linear(noise_figure_db) / 2.0;
    n_sp * PLANCK * carrier_frequency(wavelength) * (g - 1.0)
}

fn edfa_in_place<R: Rng + ?Sized>(
    field: &mut DualPolField,
    gain_db: f64,
    noise_figure_db: Option<f64>,
    wavelength: f64,
    rng: &mut R,
) {
    field.scale(10f64.powf(gain_db / 20.0));
    if let Some(nf) = noise_figure_db {
        let var = ase_psd(gain_db, nf, wavelength) * field.sample_rate;
        if var > 0.0 {
            let sd = (var / 2.0).sqrt();
            for pol in field.polarizations_mut() {
                for v in pol.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *v += Complex64::new(re, im) * sd;
                }
            }
        }
    }
}

/// Lumped amplifier: amplitude gain 10^(G/20) plus white circular Gaussian
/// ASE over the simulation bandwidth. `noise_figure_db = None` is noiseless.
pub fn edfa<R: Rng + ?Sized>(
    field: &DualPolField,
    gain_db: f64,
    noise_figure_db: Option<f64>,
    wavelength: f64,
    rng: &mut R,
) -> Result<DualPolField> {
    if gain_db < 0.0 {
        return Err(Error::Parameter(format!("amplifier gain must be >= 0 dB, got {gain_db}")));
    }
    let mut out = field.clone();
    edfa_in_place(&mut out, gain_db, noise_figure_db, wavelength, rng);
    Ok(out)
}

/// Symmetric split-step propagation through one fiber, PMD sections applied
/// at step boundaries. Works in place on a time-domain field.
pub fn propagate_fiber(
    field: &mut DualPolField,
    fiber: &FiberParams,
    steps: usize,
    pmd: &FiberPmd,
    ssfm: &SsfmConfig,
    wavelength: f64,
) -> Result<()> {
    let omega = angular_frequencies(field.len(), field.sample_rate);
    let dz = fiber.length_m() / steps as f64;
    let beta2 = fiber.beta2(wavelength);
    let alpha = fiber.alpha_per_m();
    let half = linear_response(&omega, beta2, alpha, dz / 2.0, Direction::Forward);
    let full: Vec<Complex64> = half.iter().map(|h| h * h).collect();
    let phase_per_watt = fiber.gamma_per_w_m() * dz;
    let DualPolField { x, y, .. } = field;
    let mul = |v: &mut [Complex64], h: &[Complex64]| v.iter_mut().zip(h).for_each(|(a, b)| *a *= b);

    fft(x);
    fft(y);
    mul(x, &half);
    mul(y, &half);
    for j in 0..steps {
        ifft(x);
        ifft(y);
        if let Some(limit) = ssfm.max_phase {
            let peak = x.iter().zip(y.iter()).map(|(a, b)| a.norm_sqr() + b.norm_sqr()).fold(0.0, f64::max);
            if peak * phase_per_watt > limit {
                return Err(Error::Configuration(format!(
                    "nonlinear phase per step {:.3e} rad exceeds the {limit:.3e} rad bound; increase the step count",
                    peak * phase_per_watt
                )));
            }
        }
        kerr_rotate(x, y, ssfm.nonlinearity, phase_per_watt);
        fft(x);
        fft(y);
        let mut sections = pmd.sections_after_step(j, steps).peekable();
        if sections.peek().is_none() && j + 1 < steps {
            mul(x, &full);
            mul(y, &full);
        } else {
            mul(x, &half);
            mul(y, &half);
            for s in sections {
                s.apply_spectrum(x, y, &omega);
            }
            if j + 1 < steps {
                mul(x, &half);
                mul(y, &half);
            }
        }
    }
    ifft(x);
    ifft(y);
    Ok(())
}

/// Number of split steps used for fiber `i` of the map.
pub fn steps_for_fiber(i: usize, ssfm: &SsfmConfig) -> usize {
    if i % 2 == 0 {
        ssfm.steps_smf
    } else {
        ssfm.steps_dcf
    }
}

/// Steps for the physical terminal fiber, matching the in-line step length.
pub fn terminal_steps(map: &DispersionMap, ssfm: &SsfmConfig) -> Option<usize> {
    map.terminal_fiber().map(|f| {
        let template = if f.d_ps_nm_km < 0.0 {
            (map.spans[0].dcf.length_km, ssfm.steps_dcf)
        } else {
            (map.spans[0].smf.length_km, ssfm.steps_smf)
        };
        ((f.length_km / (template.0 / template.1 as f64)).ceil() as usize).max(1)
    })
}

/// Full transmission: pre-compensation, per span SMF + amplifier + DCF +
/// amplifier, then the terminal dispersion element.
pub fn propagate_link<R: Rng + ?Sized>(
    field: &DualPolField,
    map: &DispersionMap,
    ssfm: &SsfmConfig,
    pmd: &PmdRealization,
    wavelength: f64,
    rng: &mut R,
) -> Result<DualPolField> {
    field.validate()?;
    map.validate()?;
    ssfm.validate()?;
    pmd.check_geometry(map)?;
    let mut f = dispersion_element(field, map.precompensation_ps_nm, wavelength);
    for (s, span) in map.spans.iter().enumerate() {
        for k in 0..2 {
            let i = 2 * s + k;
            propagate_fiber(&mut f, map.fiber(i), steps_for_fiber(i, ssfm), &pmd.fibers[i], ssfm, wavelength)?;
            edfa_in_place(&mut f, map.gain_after_fiber(i), span.noise_figure_db, wavelength, rng);
        }
    }
    match map.terminal_fiber() {
        Some(fiber) => {
            let steps = terminal_steps(map, ssfm).unwrap_or(1);
            propagate_fiber(&mut f, &fiber, steps, &FiberPmd::default(), ssfm, wavelength)?;
            edfa_in_place(&mut f, fiber.loss_db(), map.spans[0].noise_figure_db, wavelength, rng);
        }
        None => f = dispersion_element(&f, map.terminal_dispersion_ps_nm, wavelength),
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::DEFAULT_WAVELENGTH as LAMBDA;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(n: usize, fs: f64, t0: f64) -> DualPolField {
        let x = (0..n)
            .map(|k| {
                let t = (k as f64 - n as f64 / 2.0) / fs;
                Complex64::new((-t * t / (2.0 * t0 * t0)).exp(), 0.0)
            })
            .collect();
        DualPolField::new(x, vec![Complex64::new(0.0, 0.0); n], fs).unwrap()
    }

    fn rms_width(v: &[Complex64], fs: f64) -> f64 {
        let n = v.len();
        let w: Vec<f64> = v.iter().map(|z| z.norm_sqr()).collect();
        let e: f64 = w.iter().sum();
        let t = |k: usize| (k as f64 - n as f64 / 2.0) / fs;
        let mean = w.iter().enumerate().map(|(k, p)| t(k) * p).sum::<f64>() / e;
        (w.iter().enumerate().map(|(k, p)| (t(k) - mean).powi(2) * p).sum::<f64>() / e).sqrt()
    }

    #[test]
    fn lossless_dispersionless_step_is_identity() {
        let f = gaussian(256, 1e12, 5e-12);
        let out = linear_step(&f, 0.0, 0.0, 1e3, Direction::Forward);
        for (a, b) in out.x.iter().zip(&f.x) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn gaussian_broadening_follows_closed_form() {
        let fs = 2e12;
        let t0 = 10e-12;
        let f = gaussian(1 << 14, fs, t0);
        let beta2 = d_to_beta2(17.0, LAMBDA);
        let z = 100e3;
        let out = linear_step(&f, beta2, 0.0, z, Direction::Forward);
        let ratio = rms_width(&out.x, fs) / rms_width(&f.x, fs);
        let expected = (1.0 + (beta2 * z / (t0 * t0)).powi(2)).sqrt();
        assert!((ratio / expected - 1.0).abs() < 5e-3, "{ratio} vs {expected}");
    }

    #[test]
    fn backward_step_inverts_forward() {
        let f = gaussian(512, 1e12, 3e-12);
        let a = alpha_db_km_to_per_m(0.2);
        let b2 = d_to_beta2(17.0, LAMBDA);
        let there = linear_step(&f, b2, a, 20e3, Direction::Forward);
        let back = linear_step(&there, b2, a, 20e3, Direction::Backward);
        let err: f64 = back.x.iter().zip(&f.x).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        assert!(err / f.energy().sqrt() < 1e-12);
    }

    #[test]
    fn nonlinear_steps() {
        let n = 64;
        let p: f64 = 2e-3;
        let cw = DualPolField::new(vec![Complex64::new(p.sqrt(), 0.0); n], vec![Complex64::new(0.0, 0.0); n], 1e9).unwrap();
        let gamma = 1.4e-3;
        let dz = 500.0;
        assert_eq!(nonlinear_step_cnlse(&cw, 0.0, dz), cw);
        assert_eq!(nonlinear_step_manakov(&cw, 0.0, dz), cw);
        let out = nonlinear_step_cnlse(&cw, gamma, dz);
        assert!((out.x[3].arg() - gamma * p * dz).abs() < 1e-15);
        for (a, b) in out.x.iter().zip(&cw.x) {
            assert!((a.norm() - b.norm()).abs() < 1e-15);
        }

        let half = Complex64::new((p / 2.0).sqrt(), 0.0);
        let split = DualPolField::new(vec![half; n], vec![half; n], 1e9).unwrap();
        let m = nonlinear_step_manakov(&split, gamma, dz);
        let want = 8.0 / 9.0 * gamma * p * dz;
        assert!((m.x[0].arg() - want).abs() < 1e-15 && (m.y[0].arg() - want).abs() < 1e-15);
        assert!((m.energy() - split.energy()).abs() < 1e-15 * split.energy().max(1.0));
    }

    #[test]
    fn pmd_section_identity_and_inverse() {
        let f = gaussian(256, 1e12, 3e-12);
        let id = apply_pmd_section(&f, &PmdSection::identity());
        for (a, b) in id.x.iter().zip(&f.x) {
            assert!((a - b).norm() < 1e-14);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = PmdSection::random_rotation(4e-12, &mut rng);
        let there = apply_pmd_section(&f, &s);
        assert!((there.energy() - f.energy()).abs() < 1e-12 * f.energy());
        let back = invert_pmd_section(&there, &s);
        for (a, b) in back.x.iter().zip(&f.x).chain(back.y.iter().zip(&f.y)) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn edfa_gain_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = gaussian(1024, 1e12, 3e-12);
        assert_eq!(edfa(&f, 0.0, None, LAMBDA, &mut rng).unwrap(), f);
        let g = edfa(&f, 14.4, None, LAMBDA, &mut rng).unwrap();
        assert!((g.energy() / f.energy() - 10f64.powf(1.44)).abs() < 1e-12 * 27.6);
        assert!(edfa(&f, -1.0, None, LAMBDA, &mut rng).is_err());

        let n = 1 << 16;
        let fs = 512e9;
        let zero = DualPolField::zeros(n, fs);
        let noisy = edfa(&zero, 14.4, Some(5.0), LAMBDA, &mut rng).unwrap();
        let measured = crate::signal::energy(&noisy.x) / n as f64;
        let expected = ase_psd(14.4, 5.0, LAMBDA) * fs;
        assert!((measured / expected - 1.0).abs() < 0.05, "{measured:e} vs {expected:e}");
    }

    #[test]
    fn gains_match_span_losses() {
        let s = SpanConfig::paper_default();
        assert!((s.gain_smf_db - 14.4).abs() < 1e-12);
        assert!((s.gain_dcf_db - 6.5).abs() < 1e-12);
    }

    #[test]
    fn dispersion_map_bookkeeping() {
        let map = DispersionMap::paper_default();
        assert_eq!(map.spans.len(), 28);
        assert!((map.spans[0].net_dispersion_ps_nm() - 184.0).abs() < 1e-9);
        assert!(map.residual_at_rx_ps_nm().abs() < 1e-9);
        assert_eq!(map.accumulated(0.0), -1224.0);
        assert!((map.accumulated(72.0) - 0.0).abs() < 1e-9);
        assert!((map.accumulated(85.0) - (-1224.0 + 184.0)).abs() < 1e-9);
        assert!(map.accumulated(map.length_km() + 1.0).abs() < 1e-9);
        // Piecewise linear with the fiber slopes.
        let a = map.accumulated(100.0);
        let b = map.accumulated(110.0);
        assert!(((b - a) / 10.0 - 17.0).abs() < 1e-9);
    }

    #[test]
    fn single_span_loss_matched_preserves_power() {
        let mut span = SpanConfig::paper_default();
        span.noise_figure_db = None;
        span.smf.gamma_per_w_km = 0.0;
        span.dcf.gamma_per_w_km = 0.0;
        let map = DispersionMap::closing(0.0, vec![span]);
        let f = gaussian(1024, 256e9, 20e-12);
        let pmd = PmdRealization::none(&map);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = propagate_link(&f, &map, &SsfmConfig::default(), &pmd, LAMBDA, &mut rng).unwrap();
        assert!((out.energy() / f.energy() - 1.0).abs() < 1e-9);
        for (a, b) in out.x.iter().zip(&f.x) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn max_phase_guard_trips() {
        let span = SpanConfig::paper_default();
        let map = DispersionMap::closing(0.0, vec![span]);
        let mut f = gaussian(256, 256e9, 20e-12);
        f.scale(10.0);
        let ssfm = SsfmConfig { max_phase: Some(1e-4), ..SsfmConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = propagate_link(&f, &map, &ssfm, &PmdRealization::none(&map), LAMBDA, &mut rng);
        assert!(matches!(r, Err(Error::Configuration(_))));
    }

    #[test]
    fn seeded_propagation_is_bit_reproducible() {
        let map = DispersionMap::closing(-1224.0, vec![SpanConfig::paper_default(); 1]);
        let mut f = gaussian(512, 256e9, 20e-12);
        f.scale(0.05);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pmd = PmdRealization::draw(&map, 8, 0, &mut rng);
            propagate_link(&f, &map, &SsfmConfig::default(), &pmd, LAMBDA, &mut rng).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn physical_terminal_fiber_length() {
        let mut map = DispersionMap::paper_default();
        map.terminal = TerminalElement::Physical;
        let t = map.terminal_fiber().unwrap();
        assert!((t.dispersion_ps_nm() - map.terminal_dispersion_ps_nm).abs() < 1e-9);
        assert!(t.length_km > 0.0);
    }
}
