//! Dual-polarization sample grids and the basic filtering, shifting and
//! rate-conversion operations every other stage is built from.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized forward DFT in place.
pub fn fft(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// Inverse DFT in place, normalized by 1/N so that `ifft(fft(x)) == x`.
pub fn ifft(buf: &mut [Complex64]) {
    let n = buf.len();
    if n > 1 {
        plan(n, true).process(buf);
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Angular frequency (rad/s) of every DFT bin, in FFT order.
pub fn angular_frequencies(n: usize, sample_rate: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
            2.0 * PI * k * sample_rate / n as f64
        })
        .collect()
}

pub fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Complex samples of both polarizations on a common uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPolField {
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
    /// Hz.
    pub sample_rate: f64,
    /// Frequency of the grid center relative to the WDM center, Hz.
    pub center_offset: f64,
}

impl DualPolField {
    pub fn new(x: Vec<Complex64>, y: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        let f = Self { x, y, sample_rate, center_offset: 0.0 };
        f.validate()?;
        Ok(f)
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self {
            x: vec![Complex64::new(0.0, 0.0); len],
            y: vec![Complex64::new(0.0, 0.0); len],
            sample_rate,
            center_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() || self.x.len() != self.y.len() {
            return param(format!(
                "polarization lengths must match and be nonzero (x={}, y={})",
                self.x.len(),
                self.y.len()
            ));
        }
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return param(format!("sample rate must be positive, got {}", self.sample_rate));
        }
        if self.x.iter().chain(&self.y).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric("field contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Total energy, sum of |x|^2 + |y|^2.
    pub fn energy(&self) -> f64 {
        energy(&self.x) + energy(&self.y)
    }

    /// Mean power per sample summed over both polarizations (W).
    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn scale(&mut self, factor: f64) {
        self.x.iter_mut().chain(self.y.iter_mut()).for_each(|v| *v *= factor);
    }

    pub fn polarizations_mut(&mut self) -> [&mut Vec<Complex64>; 2] {
        [&mut self.x, &mut self.y]
    }

    /// Multiplies both polarizations by `response` in the frequency domain.
    pub fn apply_frequency_response(&mut self, response: &[Complex64]) {
        debug_assert_eq!(response.len(), self.len());
        for pol in self.polarizations_mut() {
            fft(pol);
            pol.iter_mut().zip(response).for_each(|(v, h)| *v *= h);
            ifft(pol);
        }
    }

    /// Samples `start, start+step, ...` of both polarizations.
    pub fn decimate(&self, start: usize, step: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let pick = |v: &[Complex64]| v.iter().skip(start).step_by(step).copied().collect();
        (pick(&self.x), pick(&self.y))
    }

    /// Contiguous circular slice of length `len` starting at `start` (may wrap).
    pub fn circular_window(&self, start: isize, len: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.len() as isize;
        let take = |v: &[Complex64]| {
            (0..len as isize).map(|i| v[(start + i).rem_euclid(n) as usize]).collect()
        };
        (take(&self.x), take(&self.y))
    }
}

/// A complex FIR filter. `group_delay` is the index of the tap treated as time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<Complex64>,
    pub group_delay: usize,
}

impl FirFilter {
    pub fn new(taps: Vec<Complex64>, group_delay: usize) -> Result<Self> {
        let e = energy(&taps);
        if taps.is_empty() || !(e > 0.0) || !e.is_finite() {
            return param("filter taps must have finite nonzero energy");
        }
        if group_delay >= taps.len() {
            return param("group delay must index a tap");
        }
        Ok(Self { taps, group_delay })
    }

    pub fn identity() -> Self {
        Self { taps: vec![Complex64::new(1.0, 0.0)], group_delay: 0 }
    }

    pub fn energy(&self) -> f64 {
        energy(&self.taps)
    }

    /// Circular frequency response on an `n`-point grid, with the group-delay
    /// tap placed at lag zero. Taps longer than `n` wrap around.
    pub fn circular_response(&self, n: usize) -> Vec<Complex64> {
        let mut kernel = vec![Complex64::new(0.0, 0.0); n];
        for (k, t) in self.taps.iter().enumerate() {
            let lag = (k as isize - self.group_delay as isize).rem_euclid(n as isize) as usize;
            kernel[lag] += t;
        }
        fft(&mut kernel);
        kernel
    }
}

/// Root-raised-cosine taps, unit energy, `span_symbols * sps + 1` long and
/// symmetric about the center tap.
pub fn rrc_taps(rolloff: f64, sps: usize, span_symbols: usize) -> Result<FirFilter> {
    if !(0.0..=1.0).contains(&rolloff) {
        return param(format!("roll-off must lie in [0, 1], got {rolloff}"));
    }
    if sps < 1 {
        return param("samples per symbol must be >= 1");
    }
    if span_symbols < 2 || (span_symbols * sps) % 2 != 0 {
        return param("RRC span must be >= 2 symbols with an even total tap span");
    }
    let len = span_symbols * sps + 1;
    let center = (len - 1) / 2;
    let b = rolloff;
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let t = (n as f64 - center as f64) / sps as f64;
            if t == 0.0 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && (1.0 - (4.0 * b * t).powi(2)).abs() < 1e-10 {
                let a = PI / (4.0 * b);
                b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                num / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    // Exact symmetry regardless of rounding in the closed form.
    for n in 0..center {
        let avg = 0.5 * (taps[n] + taps[len - 1 - n]);
        taps[n] = avg;
        taps[len - 1 - n] = avg;
    }
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    FirFilter::new(taps.iter().map(|t| Complex64::new(t / norm, 0.0)).collect(), center)
}

/// Root-raised-cosine frequency response on the DFT grid of an `n`-sample
/// block at `sample_rate`, scaled like a unit-energy filter. A transmit and
/// receive pair is exactly Nyquist on a periodic block whose length is a
/// whole number of symbols.
pub fn rrc_response(n: usize, sample_rate: f64, baud: f64, rolloff: f64) -> Result<Vec<Complex64>> {
    if !(0.0..=1.0).contains(&rolloff) {
        return param(format!("roll-off must lie in [0, 1], got {rolloff}"));
    }
    if !(baud > 0.0 && baud <= sample_rate) {
        return param("symbol rate must be positive and at most the sample rate");
    }
    let scale = (sample_rate / baud).sqrt();
    let (lo, hi) = ((1.0 - rolloff) * baud / 2.0, (1.0 + rolloff) * baud / 2.0);
    Ok(angular_frequencies(n, sample_rate)
        .into_iter()
        .map(|w| {
            let f = (w / (2.0 * PI)).abs();
            let p = if f <= lo {
                1.0
            } else if f <= hi {
                (PI / (2.0 * rolloff * baud) * (f - lo)).cos()
            } else {
                0.0
            };
            Complex64::new(p * scale, 0.0)
        })
        .collect())
}

/// Circular RRC filtering of both polarizations.
pub fn apply_rrc(field: &DualPolField, baud: f64, rolloff: f64) -> Result<DualPolField> {
    let h = rrc_response(field.len(), field.sample_rate, baud, rolloff)?;
    let mut out = field.clone();
    out.apply_frequency_response(&h);
    Ok(out)
}

fn convolve_same(x: &[Complex64], filter: &FirFilter) -> Vec<Complex64> {
    let n = x.len();
    let l = filter.taps.len();
    let gd = filter.group_delay as isize;
    if l <= 32 {
        return (0..n as isize)
            .map(|i| {
                filter
                    .taps
                    .iter()
                    .enumerate()
                    .filter_map(|(k, t)| {
                        let j = i + gd - k as isize;
                        (0..n as isize).contains(&j).then(|| t * x[j as usize])
                    })
                    .sum()
            })
            .collect();
    }
    let m = (n + l - 1).next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    a[..n].copy_from_slice(x);
    b[..l].copy_from_slice(&filter.taps);
    fft(&mut a);
    fft(&mut b);
    a.iter_mut().zip(&b).for_each(|(u, v)| *u *= v);
    ifft(&mut a);
    a[filter.group_delay..filter.group_delay + n].to_vec()
}

/// Linear convolution of each polarization with "same" output length; the
/// group delay is removed and the edges see zero padding.
pub fn apply_fir(field: &DualPolField, filter: &FirFilter) -> DualPolField {
    DualPolField {
        x: convolve_same(&field.x, filter),
        y: convolve_same(&field.y, filter),
        sample_rate: field.sample_rate,
        center_offset: field.center_offset,
    }
}

/// Circular convolution; used where the whole simulation block is periodic.
pub fn apply_fir_circular(field: &DualPolField, filter: &FirFilter) -> DualPolField {
    let mut out = field.clone();
    let h = filter.circular_response(field.len());
    out.apply_frequency_response(&h);
    out
}

/// Circular convolution of a single sequence.
pub fn filter_circular(v: &[Complex64], filter: &FirFilter) -> Vec<Complex64> {
    let h = filter.circular_response(v.len());
    let mut out = v.to_vec();
    fft(&mut out);
    out.iter_mut().zip(&h).for_each(|(a, b)| *a *= b);
    ifft(&mut out);
    out
}

/// Band-limited rate conversion by an integer up or down factor.
///
/// The block is treated as one period of a periodic signal and resampled in
/// the frequency domain, so a signal whose spectrum fits the narrower band is
/// reproduced exactly at the common sampling instants.
pub fn resample(field: &DualPolField, new_rate: f64) -> Result<DualPolField> {
    if !(new_rate > 0.0) {
        return param("target sample rate must be positive");
    }
    let ratio = new_rate / field.sample_rate;
    let n = field.len();
    let (up, down) = if (ratio - 1.0).abs() < 1e-12 {
        return Ok(field.clone());
    } else if ratio > 1.0 {
        let r = ratio.round();
        if (ratio - r).abs() > 1e-9 * r {
            return param(format!("rate ratio {ratio} is not an integer"));
        }
        (r as usize, 1)
    } else {
        let r = (1.0 / ratio).round();
        if (1.0 / ratio - r).abs() > 1e-9 * r {
            return param(format!("rate ratio 1/{} is not an integer", 1.0 / ratio));
        }
        (1, r as usize)
    };
    if n % down != 0 {
        return param(format!("length {n} is not divisible by the decimation factor {down}"));
    }
    let m = n * up / down;
    let convert = |v: &[Complex64]| -> Vec<Complex64> {
        let mut spec = v.to_vec();
        fft(&mut spec);
        let mut out = vec![Complex64::new(0.0, 0.0); m];
        let small = n.min(m);
        out[0] = spec[0];
        for k in 1..=(small - 1) / 2 {
            out[k] = spec[k];
            out[m - k] = spec[n - k];
        }
        if small % 2 == 0 {
            let h = small / 2;
            if m > n {
                // Split the Nyquist bin between +fs/2 and -fs/2 of the wider grid.
                out[h] = spec[h] * 0.5;
                out[m - h] = spec[h] * 0.5;
            } else {
                // Fold both band edges onto the new Nyquist bin.
                out[h] = spec[h] + spec[n - h];
            }
        }
        ifft(&mut out);
        let gain = m as f64 / n as f64;
        out.iter_mut().for_each(|z| *z *= gain);
        out
    };
    Ok(DualPolField {
        x: convert(&field.x),
        y: convert(&field.y),
        sample_rate: new_rate,
        center_offset: field.center_offset,
    })
}

/// Multiplies by exp(j 2 pi delta_f n / fs). Content moves up by `delta_f`,
/// so the grid center now sits `delta_f` lower relative to the WDM center.
pub fn frequency_shift(field: &DualPolField, delta_f: f64) -> Result<DualPolField> {
    if delta_f.abs() >= field.sample_rate / 2.0 {
        return param(format!(
            "shift of {delta_f} Hz aliases at sample rate {} Hz",
            field.sample_rate
        ));
    }
    let mut out = field.clone();
    if delta_f != 0.0 {
        let w = 2.0 * PI * delta_f / field.sample_rate;
        for pol in out.polarizations_mut() {
            for (n, v) in pol.iter_mut().enumerate() {
                *v *= Complex64::from_polar(1.0, w * n as f64);
            }
        }
    }
    out.center_offset = field.center_offset - delta_f;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random_field(n: usize, seed: u64) -> DualPolField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let x = (0..n).map(|_| g()).collect();
        let y = (0..n).map(|_| g()).collect();
        DualPolField::new(x, y, 1.0).unwrap()
    }

    #[test]
    fn rrc_is_symmetric_unit_energy_and_peaks_at_center() {
        let f = rrc_taps(0.06, 16, 64).unwrap();
        assert_eq!(f.taps.len(), 64 * 16 + 1);
        assert_relative_eq!(f.energy(), 1.0, epsilon = 1e-12);
        let mid = f.group_delay;
        let peak = (0..f.taps.len()).max_by(|&a, &b| f.taps[a].re.total_cmp(&f.taps[b].re)).unwrap();
        assert_eq!(peak, mid);
        for k in 0..mid {
            assert_eq!(f.taps[k], f.taps[f.taps.len() - 1 - k]);
        }
    }

    #[test]
    fn zero_rolloff_is_sinc() {
        let f = rrc_taps(0.0, 2, 16).unwrap();
        for k in (0..f.taps.len()).filter(|&k| k != f.group_delay && (k as isize - f.group_delay as isize) % 2 == 0) {
            assert!(f.taps[k].norm() < 1e-15, "tap {k} = {}", f.taps[k]);
        }
    }

    #[test]
    fn rrc_rejects_bad_parameters() {
        assert!(rrc_taps(1.5, 4, 8).is_err());
        assert!(rrc_taps(-0.1, 4, 8).is_err());
        assert!(rrc_taps(0.1, 0, 8).is_err());
        assert!(rrc_taps(0.1, 4, 1).is_err());
    }

    #[test]
    fn rrc_cascade_is_nyquist() {
        // Numeric convolution of the RRC pair, sampled at symbol instants.
        let sps = 8;
        let f = rrc_taps(0.06, sps, 64).unwrap();
        let h: Vec<f64> = f.taps.iter().map(|t| t.re).collect();
        let l = h.len();
        let mut rc = vec![0.0; 2 * l - 1];
        for i in 0..l {
            for j in 0..l {
                rc[i + j] += h[i] * h[j];
            }
        }
        let mid = l - 1;
        let main = rc[mid];
        let worst = (1..(mid / sps))
            .flat_map(|k| [rc[mid + k * sps], rc[mid - k * sps]])
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst / main < 1e-3, "ISI {}", worst / main);
    }

    #[test]
    fn identity_filter_is_identity() {
        let f = random_field(100, 1);
        assert_eq!(apply_fir(&f, &FirFilter::identity()), f);
    }

    #[test]
    fn impulse_returns_taps() {
        let taps: Vec<Complex64> = (0..41).map(|k| Complex64::new(k as f64 * 0.1, -(k as f64))).collect();
        let filt = FirFilter::new(taps.clone(), 20).unwrap();
        let mut x = vec![c(0.0); 200];
        x[100] = c(1.0);
        let field = DualPolField::new(x.clone(), x, 1.0).unwrap();
        let out = apply_fir(&field, &filt);
        for (k, t) in taps.iter().enumerate() {
            assert!((out.x[100 - 20 + k] - t).norm() < 1e-12);
        }
        let corr: Complex64 = taps.iter().enumerate().map(|(k, t)| out.x[80 + k] * t.conj()).sum();
        assert!(corr.norm() >= 0.999999 * filt.energy());
    }

    #[test]
    fn white_noise_power_scales_with_tap_energy() {
        let f = random_field(1 << 16, 3);
        let filt = rrc_taps(0.3, 4, 16).unwrap();
        let mut filt2 = filt.clone();
        filt2.taps.iter_mut().for_each(|t| *t *= 0.7);
        let out = apply_fir(&f, &filt2);
        let ratio = out.energy() / f.energy();
        assert_relative_eq!(ratio, filt2.energy(), max_relative = 0.01);
    }

    #[test]
    fn resample_identity_and_round_trip() {
        let f = random_field(256, 4);
        assert_eq!(resample(&f, 1.0).unwrap(), f);
        for n in [256usize, 255] {
            let f = random_field(n, 5);
            let up = resample(&f, 2.0).unwrap();
            assert_eq!(up.len(), 2 * n);
            let back = resample(&up, 1.0).unwrap();
            for (a, b) in back.x.iter().zip(&f.x) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn resample_rejects_fractional_ratio() {
        let f = random_field(96, 6);
        assert!(resample(&f, 1.5).is_err());
        assert!(resample(&f, 0.4).is_err());
        assert!(resample(&random_field(97, 6), 0.5).is_err());
    }

    #[test]
    fn frequency_shift_round_trip_and_peak() {
        let f = random_field(512, 7);
        let z = frequency_shift(&f, 0.0).unwrap();
        assert_eq!(z.x, f.x);
        let there = frequency_shift(&f, 0.123).unwrap();
        let back = frequency_shift(&there, -0.123).unwrap();
        for (a, b) in back.x.iter().zip(&f.x) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_relative_eq!(there.energy(), f.energy(), max_relative = 1e-12);
        assert!(frequency_shift(&f, 0.5).is_err());

        // A DC tone moved by one WDM spacing.
        let fs = 512e9;
        let n = 4096;
        let tone = DualPolField::new(vec![c(1.0); n], vec![c(0.0); n], fs).unwrap();
        let mut s = frequency_shift(&tone, 37.5e9).unwrap().x;
        fft(&mut s);
        let peak = (0..n).max_by(|&a, &b| s[a].norm().total_cmp(&s[b].norm())).unwrap();
        assert_eq!(peak, (37.5e9 / fs * n as f64).round() as usize);
    }
}
