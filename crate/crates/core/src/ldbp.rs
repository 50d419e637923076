//! Learned DBP: M + 1 circular convolution layers with M Kerr activations in
//! between, hand-derived gradients and a deterministic training loop.
//!
//! Gradients use the real-gradient convention: for a complex quantity `z`
//! the gradient of the real loss is `dL/dRe z + j dL/dIm z`.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbp::DbpPlan;
use crate::error::{param, Error, Result};
use crate::link::NonlinearModel;
use crate::signal::{angular_frequencies, fft, ifft, DualPolField};
use crate::transceiver::{qam16_demodulate, ErrorCounter, Metrics};

const MANAKOV: f64 = 8.0 / 9.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdbpLayer {
    pub taps_x: Vec<Complex64>,
    /// `None` when tied to `taps_x`.
    pub taps_y: Option<Vec<Complex64>>,
    /// 1/(W km); unused on the last layer.
    pub gamma_bar: f64,
    /// km.
    pub delta: f64,
    /// W per unit input power.
    pub power_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdbpModel {
    pub layers: Vec<LdbpLayer>,
    pub input_len: usize,
    pub output_len: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// X' = X exp(-j 8/9 gamma_bar delta power_scale (|X|^2 + |Y|^2)), same for Y.
pub fn kerr_activation(
    x: &[Complex64],
    y: &[Complex64],
    gamma_bar: f64,
    delta: f64,
    power_scale: f64,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let c = MANAKOV * gamma_bar * delta * power_scale;
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let r = Complex64::cis(-c * (a.norm_sqr() + b.norm_sqr()));
            (a * r, b * r)
        })
        .unzip()
}

/// Position of every real parameter of one layer in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Slots {
    taps_x: usize,
    taps_y: Option<usize>,
    gamma: Option<usize>,
}

/// Tensors kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Spectra of each layer's input.
    inputs_f: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    /// Convolution outputs (pre-activation).
    conv: Vec<(Vec<Complex64>, Vec<Complex64>)>,
}

/// Kernel spectra of a model, computed once per parameter set.
pub struct Prepared<'a> {
    model: &'a LdbpModel,
    kernels: Vec<(Vec<Complex64>, Vec<Complex64>)>,
}

fn lag_index(i: usize, taps: usize, n: usize) -> usize {
    (i as isize - (taps / 2) as isize).rem_euclid(n as isize) as usize
}

fn kernel_spectrum(taps: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut k = vec![Complex64::new(0.0, 0.0); n];
    for (i, t) in taps.iter().enumerate() {
        k[lag_index(i, taps.len(), n)] += t;
    }
    fft(&mut k);
    k
}

fn mul_ifft(a: &[Complex64], b: &[Complex64], conj_b: bool) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = a.iter().zip(b).map(|(u, v)| if conj_b { u * v.conj() } else { u * v }).collect();
    ifft(&mut out);
    out
}

fn spectrum(v: &[Complex64]) -> Vec<Complex64> {
    let mut s = v.to_vec();
    fft(&mut s);
    s
}

impl LdbpModel {
    /// Steps (Kerr activations) of the model.
    pub fn m(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn crop_offset(&self) -> usize {
        (self.input_len - self.output_len) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return param("LDBP needs at least one layer");
        }
        if self.output_len == 0 || self.output_len > self.input_len || (self.input_len - self.output_len) % 2 != 0 {
            return param("output length must be positive, at most the input length, with an even margin");
        }
        for (m, l) in self.layers.iter().enumerate() {
            let t = l.taps_x.len();
            if t == 0 || t > self.input_len || (t % 2 == 0 && t != self.input_len) {
                return param(format!("layer {m}: tap count {t} must be odd or equal the input length"));
            }
            if l.taps_y.as_ref().is_some_and(|v| v.len() != t) {
                return param(format!("layer {m}: polarization tap counts differ"));
            }
            let finite = l.taps_x.iter().chain(l.taps_y.iter().flatten()).all(|z| z.re.is_finite() && z.im.is_finite());
            if !finite || !l.gamma_bar.is_finite() {
                return Err(Error::Numeric(format!("layer {m}: non-finite parameter")));
            }
        }
        Ok(())
    }

    /// Identity taps of length `taps` and the given nonlinearity per step.
    pub fn identity(m: usize, taps: usize, input_len: usize, output_len: usize, gamma_bar: f64, delta: f64, power_scale: f64) -> Result<Self> {
        let mut t = vec![Complex64::new(0.0, 0.0); taps];
        if taps > 0 {
            t[taps / 2] = Complex64::new(1.0, 0.0);
        }
        let layers = (0..=m)
            .map(|k| LdbpLayer {
                taps_x: t.clone(),
                taps_y: None,
                gamma_bar: if k < m { gamma_bar } else { 0.0 },
                delta,
                power_scale,
            })
            .collect();
        let model = Self { layers, input_len, output_len, warnings: vec![] };
        model.validate()?;
        Ok(model)
    }

    fn slots(&self) -> Vec<Slots> {
        let mut at = 0;
        let m = self.m();
        self.layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let t = l.taps_x.len();
                let taps_x = at;
                at += 2 * t;
                let taps_y = l.taps_y.as_ref().map(|_| {
                    let s = at;
                    at += 2 * t;
                    s
                });
                let gamma = (k < m).then(|| {
                    at += 1;
                    at - 1
                });
                Slots { taps_x, taps_y, gamma }
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .map(|(k, l)| 2 * l.taps_x.len() * (1 + usize::from(l.taps_y.is_some())) + usize::from(k < self.m()))
            .sum()
    }

    /// Flat real parameter vector: per layer the x taps (re, im interleaved),
    /// the y taps when untied, then gamma_bar for layers with an activation.
    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params()];
        for (l, s) in self.layers.iter().zip(self.slots()) {
            for (i, t) in l.taps_x.iter().enumerate() {
                p[s.taps_x + 2 * i] = t.re;
                p[s.taps_x + 2 * i + 1] = t.im;
            }
            if let (Some(ty), Some(o)) = (&l.taps_y, s.taps_y) {
                for (i, t) in ty.iter().enumerate() {
                    p[o + 2 * i] = t.re;
                    p[o + 2 * i + 1] = t.im;
                }
            }
            if let Some(g) = s.gamma {
                p[g] = l.gamma_bar;
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return param(format!("{} parameters for a model with {}", p.len(), self.n_params()));
        }
        let slots = self.slots();
        for (l, s) in self.layers.iter_mut().zip(slots) {
            for (i, t) in l.taps_x.iter_mut().enumerate() {
                *t = Complex64::new(p[s.taps_x + 2 * i], p[s.taps_x + 2 * i + 1]);
            }
            if let (Some(ty), Some(o)) = (&mut l.taps_y, s.taps_y) {
                for (i, t) in ty.iter_mut().enumerate() {
                    *t = Complex64::new(p[o + 2 * i], p[o + 2 * i + 1]);
                }
            }
            if let Some(g) = s.gamma {
                l.gamma_bar = p[g];
            }
        }
        Ok(())
    }

    /// Indices of the gamma_bar entries in the flat parameter vector.
    pub fn gamma_indices(&self) -> Vec<usize> {
        self.slots().iter().filter_map(|s| s.gamma).collect()
    }

    pub fn prepare(&self) -> Prepared<'_> {
        let n = self.input_len;
        let kernels = self
            .layers
            .iter()
            .map(|l| {
                let kx = kernel_spectrum(&l.taps_x, n);
                let ky = l.taps_y.as_ref().map_or_else(|| kx.clone(), |t| kernel_spectrum(t, n));
                (kx, ky)
            })
            .collect();
        Prepared { model: self, kernels }
    }

    /// Product of all layers' frequency responses (x polarization).
    pub fn linear_response(&self) -> Vec<Complex64> {
        let mut h = vec![Complex64::new(1.0, 0.0); self.input_len];
        for l in &self.layers {
            for (a, b) in h.iter_mut().zip(kernel_spectrum(&l.taps_x, self.input_len)) {
                *a *= b;
            }
        }
        h
    }

    /// Convenience wrapper around [`Prepared::forward`].
    pub fn forward(&self, x0: &[Complex64], y0: &[Complex64]) -> Result<(Vec<Complex64>, Vec<Complex64>, ForwardCache)> {
        self.prepare().forward(x0, y0)
    }
}

impl Prepared<'_> {
    pub fn model(&self) -> &LdbpModel {
        self.model
    }

    /// Runs the layers and crops the output to `output_len` samples.
    pub fn forward(&self, x0: &[Complex64], y0: &[Complex64]) -> Result<(Vec<Complex64>, Vec<Complex64>, ForwardCache)> {
        let model = self.model;
        let n = model.input_len;
        if x0.len() != n || y0.len() != n {
            return param(format!("LDBP input of {} / {} samples, expected {n}", x0.len(), y0.len()));
        }
        let mut cache = ForwardCache { inputs_f: Vec::with_capacity(model.layers.len()), conv: Vec::with_capacity(model.layers.len()) };
        let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
        for (k, (layer, (kx, ky))) in model.layers.iter().zip(&self.kernels).enumerate() {
            let (xf, yf) = (spectrum(&x), spectrum(&y));
            let u = mul_ifft(&xf, kx, false);
            let v = mul_ifft(&yf, ky, false);
            (x, y) = if k < model.m() {
                kerr_activation(&u, &v, layer.gamma_bar, layer.delta, layer.power_scale)
            } else {
                (u.clone(), v.clone())
            };
            cache.inputs_f.push((xf, yf));
            cache.conv.push((u, v));
        }
        let o = model.crop_offset();
        let out_x = x[o..o + model.output_len].to_vec();
        let out_y = y[o..o + model.output_len].to_vec();
        Ok((out_x, out_y, cache))
    }

    /// Gradient of the loss with respect to every parameter (flat layout of
    /// [`LdbpModel::params`]), given the loss gradient at the cropped output.
    pub fn backward(&self, cache: &ForwardCache, grad_x: &[Complex64], grad_y: &[Complex64]) -> Result<Vec<f64>> {
        let model = self.model;
        let n = model.input_len;
        if cache.conv.len() != model.layers.len() {
            return param("forward cache does not match the model");
        }
        if grad_x.len() != model.output_len || grad_y.len() != model.output_len {
            return param("output gradient length differs from the model output length");
        }
        let o = model.crop_offset();
        let mut gx = vec![Complex64::new(0.0, 0.0); n];
        let mut gy = gx.clone();
        gx[o..o + model.output_len].copy_from_slice(grad_x);
        gy[o..o + model.output_len].copy_from_slice(grad_y);

        let slots = model.slots();
        let mut grads = vec![0.0; model.n_params()];
        for k in (0..model.layers.len()).rev() {
            let layer = &model.layers[k];
            let (u, v) = &cache.conv[k];
            let (gu, gv) = if k < model.m() {
                let c = MANAKOV * layer.delta * layer.power_scale;
                let kappa = c * layer.gamma_bar;
                let mut gu = Vec::with_capacity(n);
                let mut gv = Vec::with_capacity(n);
                let mut g_gamma = 0.0;
                for i in 0..n {
                    let p = u[i].norm_sqr() + v[i].norm_sqr();
                    let rot = Complex64::cis(-kappa * p);
                    let (xo, yo) = (u[i] * rot, v[i] * rot);
                    let s = -(gx[i].conj() * xo + gy[i].conj() * yo).im;
                    gu.push(gx[i] * rot.conj() - u[i] * (2.0 * kappa * s));
                    gv.push(gy[i] * rot.conj() - v[i] * (2.0 * kappa * s));
                    g_gamma += s * (-c * p);
                }
                if let Some(g) = slots[k].gamma {
                    grads[g] = g_gamma;
                }
                (gu, gv)
            } else {
                (std::mem::take(&mut gx), std::mem::take(&mut gy))
            };
            let (guf, gvf) = (spectrum(&gu), spectrum(&gv));
            let (xf, yf) = &cache.inputs_f[k];
            let gkx = mul_ifft(&guf, xf, true);
            let gky = mul_ifft(&gvf, yf, true);
            let t = layer.taps_x.len();
            let put = |grads: &mut [f64], at: usize, f: &dyn Fn(usize) -> Complex64| {
                for i in 0..t {
                    let g = f(lag_index(i, t, n));
                    grads[at + 2 * i] += g.re;
                    grads[at + 2 * i + 1] += g.im;
                }
            };
            match slots[k].taps_y {
                None => put(&mut grads, slots[k].taps_x, &|j| gkx[j] + gky[j]),
                Some(oy) => {
                    put(&mut grads, slots[k].taps_x, &|j| gkx[j]);
                    put(&mut grads, oy, &|j| gky[j]);
                }
            }
            if k > 0 {
                let (kx, ky) = &self.kernels[k];
                gx = mul_ifft(&guf, kx, true);
                gy = mul_ifft(&gvf, ky, true);
            }
        }
        Ok(grads)
    }
}

/// Builds the model whose layers realize the plan's M + 1 linear stages and
/// M Kerr stages. Taps are the centered truncation of each stage's impulse
/// response on the `input_len`-point grid at `sample_rate`, renormalized to
/// the full response energy.
pub fn init_from_dbp(plan: &DbpPlan, taps: usize, input_len: usize, output_len: usize, sample_rate: f64) -> Result<LdbpModel> {
    if taps == 0 || taps > input_len || (taps % 2 == 0 && taps != input_len) {
        return param(format!("tap count {taps} must be odd and at most {input_len}, or equal to it"));
    }
    let omega = angular_frequencies(input_len, sample_rate);
    let mut warnings = Vec::new();
    let mut layers = Vec::with_capacity(plan.m() + 1);
    for k in 0..=plan.m() {
        let h = plan.linear_stage(k).scalar_response(&omega, plan.wavelength).ok_or_else(|| {
            Error::Configuration("LDBP layers are polarization-symmetric; the plan carries PMD sections".into())
        })?;
        let mut imp = h;
        ifft(&mut imp);
        let mut t: Vec<Complex64> = (0..taps).map(|i| imp[lag_index(i, taps, input_len)]).collect();
        if taps < input_len {
            let full: f64 = imp.iter().map(|z| z.norm_sqr()).sum();
            let kept: f64 = t.iter().map(|z| z.norm_sqr()).sum();
            let captured = kept / full;
            if captured < 0.99 {
                let w = format!("layer {k}: {taps} taps capture {:.2}% of the impulse response energy", 100.0 * captured);
                log::warn!("{w}");
                warnings.push(w);
            }
            let s = (full / kept).sqrt();
            t.iter_mut().for_each(|z| *z *= s);
        }
        let (gamma_bar, delta, power_scale) = match plan.steps.get(k) {
            Some(st) => {
                if st.nonlinear.model != NonlinearModel::Manakov {
                    return Err(Error::Configuration("LDBP activations use the Manakov nonlinearity".into()));
                }
                (st.nonlinear.gamma_eff, st.nonlinear.nonlinear_length, st.nonlinear.power_scale)
            }
            None => (0.0, 0.0, plan.steps.last().map_or(0.0, |s| s.nonlinear.power_scale)),
        };
        layers.push(LdbpLayer { taps_x: t, taps_y: None, gamma_bar, delta, power_scale });
    }
    let model = LdbpModel { layers, input_len, output_len, warnings };
    model.validate()?;
    Ok(model)
}

/// Fraction of the impulse response energy kept by `taps` centered taps.
pub fn captured_energy(plan: &DbpPlan, stage: usize, taps: usize, input_len: usize, sample_rate: f64) -> Option<f64> {
    let omega = angular_frequencies(input_len, sample_rate);
    let mut imp = plan.linear_stage(stage).scalar_response(&omega, plan.wavelength)?;
    ifft(&mut imp);
    let full: f64 = imp.iter().map(|z| z.norm_sqr()).sum();
    let kept: f64 = (0..taps.min(input_len)).map(|i| imp[lag_index(i, taps, input_len)].norm_sqr()).sum();
    Some(kept / full)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error over every output sample.
    #[default]
    MseWaveform,
    /// Mean squared error over symbol instants (even samples at 2 sps).
    MseSymbols,
}

/// Loss and its gradient with respect to the outputs.
pub fn loss(
    out_x: &[Complex64],
    out_y: &[Complex64],
    target_x: &[Complex64],
    target_y: &[Complex64],
    kind: LossKind,
) -> Result<(f64, Vec<Complex64>, Vec<Complex64>)> {
    let n = target_x.len();
    if out_x.len() != n || out_y.len() != n || target_y.len() != n || n == 0 {
        return param("loss needs outputs and targets of one common nonzero length");
    }
    let step = match kind {
        LossKind::MseWaveform => 1,
        LossKind::MseSymbols => 2,
    };
    let count = n.div_ceil(step) as f64;
    let mut total = 0.0;
    let mut gx = vec![Complex64::new(0.0, 0.0); n];
    let mut gy = gx.clone();
    for i in (0..n).step_by(step) {
        let (ex, ey) = (out_x[i] - target_x[i], out_y[i] - target_y[i]);
        total += ex.norm_sqr() + ey.norm_sqr();
        gx[i] = ex / count;
        gy[i] = ey / count;
    }
    Ok((total / (2.0 * count), gx, gy))
}

/// One training example: the equalizer input and the waveform it should
/// produce, with the symbols carried by the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input_x: Vec<Complex64>,
    pub input_y: Vec<Complex64>,
    pub target_x: Vec<Complex64>,
    pub target_y: Vec<Complex64>,
    pub symbols_x: Vec<Complex64>,
    pub symbols_y: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_len: usize,
    pub output_len: usize,
    pub symbols_per_window: usize,
    pub sample_rate: f64,
    pub launch_power_dbm: f64,
    /// Opaque identifier of the data-generating configuration.
    pub tag: [u8; 32],
    pub windows: Vec<Window>,
}

const DATASET_MAGIC: &[u8; 8] = b"DMLDBPDS";
pub const DATASET_VERSION: u32 = 1;

fn put_c(w: &mut impl Write, v: &[Complex64]) -> std::io::Result<()> {
    for z in v {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_c(r: &mut impl Read, n: usize) -> Result<Vec<Complex64>> {
    (0..n).map(|_| Ok(Complex64::new(get_f64(r)?, get_f64(r)?))).collect()
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.windows.iter().enumerate() {
            let ok = w.input_x.len() == self.input_len
                && w.input_y.len() == self.input_len
                && w.target_x.len() == self.output_len
                && w.target_y.len() == self.output_len
                && w.symbols_x.len() == self.symbols_per_window
                && w.symbols_y.len() == self.symbols_per_window;
            if !ok {
                return Err(Error::Format(format!("window {i} does not match the dataset dimensions")));
            }
        }
        Ok(())
    }

    /// Little-endian binary: magic, version, dimensions, metadata, tag, then
    /// per window the input, target and symbol vectors of both polarizations
    /// as interleaved (re, im) f64 pairs.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.validate()?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for d in [self.windows.len(), self.input_len, self.output_len, self.symbols_per_window] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&self.launch_power_dbm.to_le_bytes())?;
        w.write_all(&self.tag)?;
        for win in &self.windows {
            for v in [&win.input_x, &win.input_y, &win.target_x, &win.target_y, &win.symbols_x, &win.symbols_y] {
                put_c(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
        }
        r.read_exact(&mut b4)?;
        let count = get_u64(r)? as usize;
        let input_len = get_u64(r)? as usize;
        let output_len = get_u64(r)? as usize;
        let symbols_per_window = get_u64(r)? as usize;
        if [input_len, output_len, symbols_per_window].iter().any(|&d| d > 1 << 24) {
            return Err(Error::Format("implausible dataset dimensions".into()));
        }
        let sample_rate = get_f64(r)?;
        let launch_power_dbm = get_f64(r)?;
        let mut tag = [0u8; 32];
        r.read_exact(&mut tag)?;
        let mut windows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            windows.push(Window {
                input_x: get_c(r, input_len)?,
                input_y: get_c(r, input_len)?,
                target_x: get_c(r, output_len)?,
                target_y: get_c(r, output_len)?,
                symbols_x: get_c(r, symbols_per_window)?,
                symbols_y: get_c(r, symbols_per_window)?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last window".into()));
        }
        Ok(Self { input_len, output_len, symbols_per_window, sample_rate, launch_power_dbm, tag, windows })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const CHECKPOINT_FORMAT: &str = "dm-ldbp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    steps: usize,
    convolutions: usize,
    #[serde(flatten)]
    model: LdbpModel,
}

impl LdbpModel {
    /// JSON checkpoint; complex taps are `[re, im]` pairs and every float
    /// survives the round trip bit for bit.
    pub fn to_json(&self) -> Result<String> {
        let c = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            steps: self.m(),
            convolutions: self.layers.len(),
            model: self.clone(),
        };
        serde_json::to_string_pretty(&c).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if c.convolutions != c.model.layers.len() || c.steps + 1 != c.model.layers.len() {
            return Err(Error::Format("checkpoint layer counts are inconsistent".into()));
        }
        c.model.validate()?;
        Ok(c.model)
    }
}

/// Equalizes a whole periodic block with overlapping windows: each window of
/// `input_len` samples contributes its central `output_len` samples; the last
/// window is aligned to the end of the block.
pub fn ldbp_equalize(model: &LdbpModel, field: &DualPolField) -> Result<DualPolField> {
    let n = field.len();
    let (w, o) = (model.input_len, model.output_len);
    if n < o {
        return param(format!("block of {n} samples is shorter than one output window ({o})"));
    }
    let margin = model.crop_offset() as isize;
    let starts: Vec<usize> = {
        let mut s: Vec<usize> = (0..n / o).map(|k| k * o).collect();
        if n % o != 0 {
            s.push(n - o);
        }
        s
    };
    let prepared = model.prepare();
    let outputs: Vec<_> = starts
        .par_iter()
        .map(|&s| {
            let (x, y) = field.circular_window(s as isize - margin, w);
            prepared.forward(&x, &y).map(|(a, b, _)| (a, b))
        })
        .collect::<Result<_>>()?;
    let mut out = field.clone();
    for (&s, (a, b)) in starts.iter().zip(outputs) {
        out.x[s..s + o].copy_from_slice(&a);
        out.y[s..s + o].copy_from_slice(&b);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Keep every gamma_bar at its initial value.
    pub freeze_gamma: bool,
    /// One gamma_bar shared by all layers.
    pub tie_gamma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            loss: LossKind::MseWaveform,
            freeze_gamma: false,
            tie_gamma: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Configuration("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_q_db: f64,
    pub val_q_snr_db: f64,
    pub val_ber: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LdbpModel,
    pub trace: Vec<EpochStats>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean loss and gradient over a set of windows; the reduction runs in a
/// fixed order, so the result does not depend on the thread count.
pub fn batch_gradient(model: &LdbpModel, windows: &[&Window], kind: LossKind) -> Result<(f64, Vec<f64>)> {
    let prepared = model.prepare();
    let parts: Vec<(f64, Vec<f64>)> = windows
        .par_iter()
        .map(|w| {
            let (ox, oy, cache) = prepared.forward(&w.input_x, &w.input_y)?;
            let (l, gx, gy) = loss(&ox, &oy, &w.target_x, &w.target_y, kind)?;
            Ok((l, prepared.backward(&cache, &gx, &gy)?))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / windows.len() as f64;
    let mut grad = vec![0.0; model.n_params()];
    let mut total = 0.0;
    for (l, g) in &parts {
        total += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|a| *a *= scale);
    Ok((total * scale, grad))
}

/// Hard-decision statistics of equalized windows. The symbol instants are
/// the even output samples; one least-squares complex gain per polarization
/// (over all windows) removes any bulk rotation first.
pub fn window_metrics(outputs: &[(Vec<Complex64>, Vec<Complex64>)], windows: &[&Window]) -> Result<Metrics> {
    let pick = |v: &[Complex64], n: usize| -> Vec<Complex64> { v.iter().step_by(2).take(n).copied().collect() };
    let mut rx = (Vec::new(), Vec::new());
    let mut tx = (Vec::new(), Vec::new());
    for ((ox, oy), w) in outputs.iter().zip(windows) {
        let n = w.symbols_x.len();
        rx.0.extend(pick(ox, n));
        rx.1.extend(pick(oy, n));
        tx.0.extend_from_slice(&w.symbols_x);
        tx.1.extend_from_slice(&w.symbols_y);
    }
    let gx = crate::rxdsp::complex_gain(&rx.0, &tx.0);
    let gy = crate::rxdsp::complex_gain(&rx.1, &tx.1);
    rx.0.iter_mut().for_each(|z| *z *= gx);
    rx.1.iter_mut().for_each(|z| *z *= gy);
    let mut c = ErrorCounter::default();
    c.add(&rx.0, &tx.0, &qam16_demodulate(&tx.0));
    c.add(&rx.1, &tx.1, &qam16_demodulate(&tx.1));
    c.metrics()
}

/// Mean loss and hard-decision metrics of the model over `windows`.
pub fn evaluate_windows(model: &LdbpModel, windows: &[&Window], kind: LossKind) -> Result<(f64, Metrics)> {
    let prepared = model.prepare();
    let outs: Vec<(f64, (Vec<Complex64>, Vec<Complex64>))> = windows
        .par_iter()
        .map(|w| {
            let (ox, oy, _) = prepared.forward(&w.input_x, &w.input_y)?;
            let (l, _, _) = loss(&ox, &oy, &w.target_x, &w.target_y, kind)?;
            Ok((l, (ox, oy)))
        })
        .collect::<Result<_>>()?;
    let mean = outs.iter().map(|(l, _)| l).sum::<f64>() / windows.len().max(1) as f64;
    let outputs: Vec<_> = outs.into_iter().map(|(_, o)| o).collect();
    Ok((mean, window_metrics(&outputs, windows)?))
}

/// Mini-batch training. Returns the model with the lowest validation loss
/// (epoch 0 is the initial model) and the per-epoch trace.
pub fn train(model: &LdbpModel, train_set: &[Window], validation: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return param("training and validation sets must be nonempty");
    }
    let mut current = model.clone();
    let gammas = current.gamma_indices();
    let mut p = current.params();
    if cfg.tie_gamma && !gammas.is_empty() {
        let mean = gammas.iter().map(|&i| p[i]).sum::<f64>() / gammas.len() as f64;
        gammas.iter().for_each(|&i| p[i] = mean);
        current.set_params(&p)?;
    }
    let val: Vec<&Window> = validation.iter().collect();
    let all: Vec<&Window> = train_set.iter().collect();
    let stats = |m: &LdbpModel, epoch: usize, train_loss: f64| -> Result<EpochStats> {
        let (val_loss, metrics) = evaluate_windows(m, &val, cfg.loss)?;
        Ok(EpochStats { epoch, train_loss, val_loss, val_q_db: metrics.q_db, val_q_snr_db: metrics.q_snr_db, val_ber: metrics.ber })
    };
    let init_loss = evaluate_windows(&current, &all, cfg.loss)?.0;
    let mut trace = vec![stats(&current, 0, init_loss)?];
    let mut best = (current.clone(), trace[0].val_loss, 0);
    let mut adam = Adam { m: vec![0.0; p.len()], v: vec![0.0; p.len()], t: 0 };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let wins: Vec<&Window> = batch.iter().map(|&i| &train_set[i]).collect();
            let (l, mut g) = batch_gradient(&current, &wins, cfg.loss)?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch} (loss {l}); lower the learning rate ({})",
                    cfg.learning_rate
                )));
            }
            sum += l * wins.len() as f64;
            if cfg.freeze_gamma {
                gammas.iter().for_each(|&i| g[i] = 0.0);
            } else if cfg.tie_gamma && !gammas.is_empty() {
                let mean = gammas.iter().map(|&i| g[i]).sum::<f64>() / gammas.len() as f64;
                gammas.iter().for_each(|&i| g[i] = mean);
            }
            match cfg.optimizer {
                Optimizer::Sgd => p.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.learning_rate * b),
                Optimizer::Adam => adam.step(&mut p, &g, cfg.learning_rate),
            }
            current.set_params(&p)?;
        }
        let s = stats(&current, epoch, sum / train_set.len() as f64)?;
        log::info!("epoch {epoch}: train {:.4e} val {:.4e} Q {:.2} dB", s.train_loss, s.val_loss, s.val_q_db);
        if s.val_loss < best.1 {
            best = (current.clone(), s.val_loss, epoch);
        }
        trace.push(s);
    }
    Ok(TrainOutcome { model: best.0, trace, best_epoch: best.2 })
}
