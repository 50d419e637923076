//! Receiver linear DSP: channel selection, bulk CD compensation, the 2x2
//! butterfly equalizer and frame synchronization.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::link::dispersion_element;
use crate::signal::{apply_rrc, fft, ifft, DualPolField};
use crate::transceiver::qam16_slice;

/// Brings the channel at `channel_offset` to baseband and applies the RRC
/// matched filter. The filter is circular, like the simulated block.
pub fn channel_select(field: &DualPolField, channel_offset: f64, rolloff: f64, baud: f64) -> Result<DualPolField> {
    let sps = field.sample_rate / baud;
    if (sps - sps.round()).abs() > 1e-9 || sps < 1.0 {
        return param(format!("sample rate is not an integer multiple of the symbol rate ({sps} sps)"));
    }
    let shifted = crate::signal::frequency_shift(field, -channel_offset)?;
    apply_rrc(&shifted, baud, rolloff)
}

/// All-pass inverse of `residual_dispersion_ps_nm` of accumulated dispersion.
pub fn cd_compensate(field: &DualPolField, residual_dispersion_ps_nm: f64, wavelength: f64) -> DualPolField {
    dispersion_element(field, -residual_dispersion_ps_nm, wavelength)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimoMode {
    TrainDataAided,
    DecisionDirected,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MimoOutput {
    /// One output per symbol (even input samples), for decisions.
    SymbolSpaced,
    /// One output per input sample, for a following nonlinear equalizer.
    SampleSpaced,
}

/// Butterfly FIR equalizer operating on 2 samples/symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mimo2x2State {
    pub xx: Vec<Complex64>,
    pub xy: Vec<Complex64>,
    pub yx: Vec<Complex64>,
    pub yy: Vec<Complex64>,
    pub step_size: f64,
    pub mode: MimoMode,
}

const DIVERGENCE_ENERGY: f64 = 1e3;

impl Mimo2x2State {
    /// Center-spike diagonal taps, zero cross taps.
    pub fn new(n_taps: usize, step_size: f64) -> Result<Self> {
        if n_taps % 2 == 0 || n_taps == 0 {
            return param("MIMO tap count must be odd");
        }
        if !(step_size >= 0.0) {
            return param("step size must be non-negative");
        }
        let zero = vec![Complex64::new(0.0, 0.0); n_taps];
        let mut spike = zero.clone();
        spike[n_taps / 2] = Complex64::new(1.0, 0.0);
        Ok(Self {
            xx: spike.clone(),
            xy: zero.clone(),
            yx: zero,
            yy: spike,
            step_size,
            mode: MimoMode::TrainDataAided,
        })
    }

    pub fn n_taps(&self) -> usize {
        self.xx.len()
    }

    pub fn tap_energy(&self) -> f64 {
        [&self.xx, &self.xy, &self.yx, &self.yy].iter().flat_map(|v| v.iter()).map(|t| t.norm_sqr()).sum()
    }

    fn output_at(&self, x: &[Complex64], y: &[Complex64], n: usize) -> (Complex64, Complex64) {
        let len = x.len() as isize;
        let c = (self.n_taps() / 2) as isize;
        let mut ox = Complex64::new(0.0, 0.0);
        let mut oy = Complex64::new(0.0, 0.0);
        for k in 0..self.n_taps() {
            let i = (n as isize + c - k as isize).rem_euclid(len) as usize;
            ox += self.xx[k] * x[i] + self.xy[k] * y[i];
            oy += self.yx[k] * x[i] + self.yy[k] * y[i];
        }
        (ox, oy)
    }

    fn update(&mut self, x: &[Complex64], y: &[Complex64], n: usize, ex: Complex64, ey: Complex64) {
        let len = x.len() as isize;
        let c = (self.n_taps() / 2) as isize;
        let mu = self.step_size;
        for k in 0..self.n_taps() {
            let i = (n as isize + c - k as isize).rem_euclid(len) as usize;
            let (cx, cy) = (x[i].conj() * mu, y[i].conj() * mu);
            self.xx[k] += ex * cx;
            self.xy[k] += ex * cy;
            self.yx[k] += ey * cx;
            self.yy[k] += ey * cy;
        }
    }

    /// Runs the equalizer over `field` (2 samples/symbol, treated as
    /// periodic). Taps adapt at symbol instants unless frozen; data-aided
    /// training needs `reference` symbols (x, y).
    pub fn equalize(
        &mut self,
        field: &DualPolField,
        reference: Option<(&[Complex64], &[Complex64])>,
        output: MimoOutput,
    ) -> Result<DualPolField> {
        let n = field.len();
        if n % 2 != 0 {
            return param("MIMO input must hold an even number of samples (2 samples/symbol)");
        }
        if self.mode == MimoMode::TrainDataAided {
            match reference {
                Some((rx, ry)) if rx.len() >= n / 2 && ry.len() >= n / 2 => {}
                _ => return param("data-aided training needs reference symbols for the whole input"),
            }
        }
        let step = match output {
            MimoOutput::SymbolSpaced => 2,
            MimoOutput::SampleSpaced => 1,
        };
        let (x, y) = (&field.x, &field.y);
        let mut out_x = Vec::with_capacity(n / step);
        let mut out_y = Vec::with_capacity(n / step);
        for i in (0..n).step_by(step) {
            let (ox, oy) = self.output_at(x, y, i);
            out_x.push(ox);
            out_y.push(oy);
            if i % 2 != 0 {
                continue;
            }
            let desired = match self.mode {
                MimoMode::Frozen => None,
                MimoMode::TrainDataAided => reference.map(|(rx, ry)| (rx[i / 2], ry[i / 2])),
                MimoMode::DecisionDirected => Some((qam16_slice(ox), qam16_slice(oy))),
            };
            if let Some((dx, dy)) = desired {
                self.update(x, y, i, dx - ox, dy - oy);
                if (i / 2) % 256 == 0 && self.tap_energy() > DIVERGENCE_ENERGY {
                    return Err(Error::Adaptation(format!(
                        "tap energy {:.3e} after {} symbols; reduce the step size",
                        self.tap_energy(),
                        i / 2
                    )));
                }
            }
        }
        if !self.tap_energy().is_finite() || self.tap_energy() > DIVERGENCE_ENERGY {
            return Err(Error::Adaptation(format!("tap energy {:.3e}", self.tap_energy())));
        }
        Ok(DualPolField {
            x: out_x,
            y: out_y,
            sample_rate: field.sample_rate / step as f64,
            center_offset: field.center_offset,
        })
    }

    /// Data-aided training over the first `n_symbols` symbols, repeated
    /// `passes` times; the state is frozen afterwards.
    pub fn train(
        &mut self,
        field: &DualPolField,
        ref_x: &[Complex64],
        ref_y: &[Complex64],
        n_symbols: usize,
        passes: usize,
    ) -> Result<()> {
        let n_symbols = n_symbols.min(field.len() / 2).min(ref_x.len());
        let prefix = DualPolField {
            x: field.x[..2 * n_symbols].to_vec(),
            y: field.y[..2 * n_symbols].to_vec(),
            sample_rate: field.sample_rate,
            center_offset: field.center_offset,
        };
        self.mode = MimoMode::TrainDataAided;
        for _ in 0..passes {
            self.equalize(&prefix, Some((&ref_x[..n_symbols], &ref_y[..n_symbols])), MimoOutput::SymbolSpaced)?;
        }
        self.mode = MimoMode::Frozen;
        Ok(())
    }
}

/// Convenience wrapper matching the stage signature: returns the equalized
/// field and the updated state.
pub fn mimo_equalize(
    field: &DualPolField,
    state: Mimo2x2State,
    reference: Option<(&[Complex64], &[Complex64])>,
    output: MimoOutput,
) -> Result<(DualPolField, Mimo2x2State)> {
    let mut state = state;
    let out = state.equalize(field, reference, output)?;
    Ok((out, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResult {
    /// `received[n + lag]` lines up with `reference[n]`.
    pub lag: isize,
    /// Rotation of the received constellation in multiples of 90 degrees.
    pub quarter_turns: u8,
}

impl SyncResult {
    /// Removes the lag (circularly) and the rotation.
    pub fn apply(&self, received: &[Complex64]) -> Vec<Complex64> {
        let n = received.len() as isize;
        let derot = Complex64::new(0.0, -1.0).powu(self.quarter_turns as u32);
        (0..n).map(|i| received[(i + self.lag).rem_euclid(n) as usize] * derot).collect()
    }
}

pub const MIN_SYNC_OVERLAP: usize = 1000;

/// Finds the lag (within `max_lag`) maximizing |cross-correlation| and the
/// 90-degree rotation resolving the constellation ambiguity.
pub fn synchronize(received: &[Complex64], reference: &[Complex64], max_lag: usize) -> Result<SyncResult> {
    let (nr, ns) = (received.len(), reference.len());
    if nr.min(ns) < MIN_SYNC_OVERLAP + max_lag {
        return Err(Error::Sync(format!(
            "sequences of {nr} and {ns} symbols overlap less than {MIN_SYNC_OVERLAP} symbols"
        )));
    }
    let m = (nr + ns).next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); m];
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    a[..nr].copy_from_slice(received);
    b[..ns].copy_from_slice(reference);
    fft(&mut a);
    fft(&mut b);
    a.iter_mut().zip(&b).for_each(|(u, v)| *u *= v.conj());
    ifft(&mut a);
    // a[l] = sum_n r[n + l] s*[n] for lag l (negative lags wrap to the end).
    let corr = |l: isize| a[l.rem_euclid(m as isize) as usize];
    let lags: Vec<isize> = (-(max_lag as isize)..=max_lag as isize).collect();
    let best = *lags
        .iter()
        .max_by(|&&p, &&q| corr(p).norm().total_cmp(&corr(q).norm()))
        .expect("non-empty lag range");
    let peak = corr(best).norm();
    let others: Vec<f64> = lags.iter().filter(|&&l| l != best).map(|&l| corr(l).norm()).collect();
    if !others.is_empty() {
        let background = others.iter().sum::<f64>() / others.len() as f64;
        if peak < 3.0 * background {
            return Err(Error::Sync(format!(
                "correlation peak {peak:.3e} is below 3x the background {background:.3e}"
            )));
        }
    }
    let angle = corr(best).arg();
    let quarter_turns = ((angle / std::f64::consts::FRAC_PI_2).round() as i64).rem_euclid(4) as u8;
    Ok(SyncResult { lag: best, quarter_turns })
}

/// Least-squares complex gain mapping `received` onto `reference`.
pub fn complex_gain(received: &[Complex64], reference: &[Complex64]) -> Complex64 {
    let num: Complex64 = received.iter().zip(reference).map(|(r, s)| s * r.conj()).sum();
    let den: f64 = received.iter().take(reference.len()).map(|r| r.norm_sqr()).sum();
    if den == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        num / den
    }
}
