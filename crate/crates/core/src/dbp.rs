//! Digital back-propagation for dispersion-managed links.
//!
//! A plan is a list of steps in receiver-to-transmitter order. Each step is
//! a linear stage followed by a Kerr de-rotation; a final linear stage closes
//! the plan. Linear stages are stored as numbers (accumulated dispersion,
//! gain, inverse PMD sections) and realized on the grid of the field being
//! processed, so one plan serves any block length and sample rate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{dispersion_response, kerr_rotate, steps_for_fiber, terminal_steps, DispersionMap, NonlinearModel, SsfmConfig};
use crate::pmd::{PmdRealization, PmdSection};
use crate::signal::{angular_frequencies, fft, ifft, DualPolField};
use crate::units::{db_to_linear, dbm_to_watt};

/// All-pass dispersion, flat gain and inverse PMD sections. Dispersion and
/// gain commute with everything else in the stage; PMD sections are applied
/// in list order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearStage {
    pub dispersion_ps_nm: f64,
    /// Power gain, dB.
    pub gain_db: f64,
    pub pmd_inverse: Vec<PmdSection>,
}

impl LinearStage {
    fn is_identity(&self) -> bool {
        self.dispersion_ps_nm == 0.0 && self.gain_db == 0.0 && self.pmd_inverse.is_empty()
    }

    /// Scalar frequency response (dispersion and gain); `None` if the stage
    /// carries PMD sections and is therefore not polarization-symmetric.
    pub fn scalar_response(&self, omega: &[f64], wavelength: f64) -> Option<Vec<Complex64>> {
        if !self.pmd_inverse.is_empty() {
            return None;
        }
        let g = db_to_linear(self.gain_db).sqrt();
        Some(dispersion_response(omega, self.dispersion_ps_nm, wavelength).into_iter().map(|h| h * g).collect())
    }

    /// Applies the stage to a time-domain field in place.
    pub fn apply(&self, field: &mut DualPolField, wavelength: f64) {
        if self.is_identity() {
            return;
        }
        let omega = angular_frequencies(field.len(), field.sample_rate);
        let g = db_to_linear(self.gain_db).sqrt();
        let h: Vec<Complex64> = dispersion_response(&omega, self.dispersion_ps_nm, wavelength)
            .into_iter()
            .map(|v| v * g)
            .collect();
        let DualPolField { x, y, .. } = field;
        fft(x);
        fft(y);
        for ((a, b), v) in x.iter_mut().zip(y.iter_mut()).zip(&h) {
            *a *= v;
            *b *= v;
        }
        for s in &self.pmd_inverse {
            s.invert_spectrum(x, y, &omega);
        }
        ifft(x);
        ifft(y);
    }
}

/// Kerr de-rotation of one step. The applied phase is
/// `-gamma_eff * nonlinear_length * power_scale * P`, with `P` the model's
/// power term (`8/9 (|X|^2 + |Y|^2)` for Manakov).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearStage {
    /// 1/(W km).
    pub gamma_eff: f64,
    /// km.
    pub nonlinear_length: f64,
    /// Physical power (W) of unit input power.
    pub power_scale: f64,
    pub model: NonlinearModel,
    /// Link segment covered by the step, km from the transmitter.
    pub z_start_km: f64,
    pub z_end_km: f64,
}

impl NonlinearStage {
    pub fn apply(&self, field: &mut DualPolField) {
        let phase = -self.gamma_eff * self.nonlinear_length * self.power_scale;
        kerr_rotate(&mut field.x, &mut field.y, self.model, phase);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbpStep {
    pub linear: LinearStage,
    pub nonlinear: NonlinearStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbpPlan {
    /// Receiver-to-transmitter order.
    pub steps: Vec<DbpStep>,
    pub tail: LinearStage,
    pub wavelength: f64,
}

/// Where the Kerr stage sits inside a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearPlacement {
    /// Half of the segment's linear inverse on either side (half steps at
    /// both ends of the plan).
    #[default]
    Symmetric,
    /// After the whole segment's linear inverse.
    AfterLinear,
}

/// How fibers of a segment are averaged into one nonlinear coefficient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaWeighting {
    /// (sum gamma_i L_i) / (sum L_i).
    #[default]
    Length,
    /// (sum gamma_i p_i Leff_i) / (sum p_i Leff_i), exact for the first-order
    /// phase when every fiber is launched at relative power p_i.
    EffectiveLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbpOptions {
    pub placement: NonlinearPlacement,
    pub gamma_weighting: GammaWeighting,
    pub model: NonlinearModel,
    pub wavelength: f64,
}

impl Default for DbpOptions {
    fn default() -> Self {
        Self {
            placement: NonlinearPlacement::Symmetric,
            gamma_weighting: GammaWeighting::Length,
            model: NonlinearModel::Manakov,
            wavelength: crate::units::DEFAULT_WAVELENGTH,
        }
    }
}

/// Splits `units` into `m` contiguous groups whose sizes differ by at most
/// one; the first `units % m` groups (in link order) get the extra unit.
pub fn partition(units: usize, m: usize) -> Vec<std::ops::Range<usize>> {
    let (q, r) = (units / m, units % m);
    let mut start = 0;
    (0..m)
        .map(|i| {
            let len = q + usize::from(i < r);
            let g = start..start + len;
            start += len;
            g
        })
        .collect()
}

struct Segment {
    fibers: std::ops::Range<usize>,
    dispersion_ps_nm: f64,
    gamma_eff: f64,
    nonlinear_length: f64,
    z_start_km: f64,
    z_end_km: f64,
}

/// Relative launch power of every fiber from the gain/loss schedule.
fn fiber_powers(map: &DispersionMap) -> Vec<f64> {
    let mut p = 1.0;
    (0..2 * map.spans.len())
        .map(|i| {
            let here = p;
            p *= db_to_linear(map.gain_after_fiber(i) - map.fiber(i).loss_db());
            here
        })
        .collect()
}

fn fiber_start_km(map: &DispersionMap, i: usize) -> f64 {
    (0..i).map(|k| map.fiber(k).length_km).sum()
}

fn segments(map: &DispersionMap, m: usize, weighting: GammaWeighting) -> Result<Vec<Segment>> {
    let spans = map.spans.len();
    if m == 0 {
        return Err(Error::Configuration("DBP needs at least one step".into()));
    }
    if m > 2 * spans {
        return Err(Error::Configuration(format!(
            "{m} DBP steps exceed the {} fibers of a {spans}-span link",
            2 * spans
        )));
    }
    let groups: Vec<std::ops::Range<usize>> = if m <= spans {
        partition(spans, m).into_iter().map(|g| 2 * g.start..2 * g.end).collect()
    } else {
        partition(2 * spans, m)
    };
    let powers = fiber_powers(map);
    Ok(groups
        .into_iter()
        .map(|fibers| {
            let (mut disp, mut len, mut gl, mut leff, mut gleff) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in fibers.clone() {
                let f = map.fiber(i);
                let w = f.effective_length_km() * powers[i];
                disp += f.dispersion_ps_nm();
                len += f.length_km;
                gl += f.gamma_per_w_km * f.length_km;
                leff += w;
                gleff += f.gamma_per_w_km * w;
            }
            let gamma_eff = match weighting {
                GammaWeighting::Length => gl / len,
                GammaWeighting::EffectiveLength => gleff / leff,
            };
            Segment {
                z_start_km: fiber_start_km(map, fibers.start),
                z_end_km: fiber_start_km(map, fibers.end),
                fibers,
                dispersion_ps_nm: disp,
                gamma_eff,
                nonlinear_length: leff,
            }
        })
        .collect())
}

fn terminal_inverse(map: &DispersionMap) -> LinearStage {
    LinearStage { dispersion_ps_nm: -map.terminal_dispersion_ps_nm, ..Default::default() }
}

/// DBP plan with `m` steps over the map. Steps cover whole spans when
/// `m <= spans` and individual fibers when `spans < m <= 2 spans`.
/// `launch_power_dbm` is the per-channel launch power; the input of
/// [`dbp_equalize`] is expected at unit mean power per polarization.
pub fn build_dbp_plan(map: &DispersionMap, m: usize, launch_power_dbm: f64, opts: &DbpOptions) -> Result<DbpPlan> {
    build_plan_inner(map, m, launch_power_dbm, opts, None)
}

/// As [`build_dbp_plan`] with the inverse of every PMD section of `pmd`
/// inserted on the correct side of each Kerr stage.
pub fn build_pmd_aware_plan(
    map: &DispersionMap,
    m: usize,
    launch_power_dbm: f64,
    opts: &DbpOptions,
    pmd: &PmdRealization,
) -> Result<DbpPlan> {
    pmd.check_geometry(map)?;
    build_plan_inner(map, m, launch_power_dbm, opts, Some(pmd))
}

fn build_plan_inner(
    map: &DispersionMap,
    m: usize,
    launch_power_dbm: f64,
    opts: &DbpOptions,
    pmd: Option<&PmdRealization>,
) -> Result<DbpPlan> {
    map.validate()?;
    let segs = segments(map, m, opts.gamma_weighting)?;
    let power_scale = dbm_to_watt(launch_power_dbm) / 2.0;

    // Inverse PMD sections of a segment, receiver side first, split at the
    // Kerr stage position.
    let split_pmd = |seg: &Segment| -> (Vec<PmdSection>, Vec<PmdSection>) {
        let (mut rx_side, mut tx_side) = (Vec::new(), Vec::new());
        let Some(pmd) = pmd else { return (rx_side, tx_side) };
        let cut = match opts.placement {
            NonlinearPlacement::Symmetric => (seg.z_start_km + seg.z_end_km) / 2.0,
            NonlinearPlacement::AfterLinear => seg.z_start_km,
        };
        for i in seg.fibers.clone().rev() {
            let f = &pmd.fibers[i];
            let z0 = fiber_start_km(map, i);
            for k in (0..f.sections.len()).rev() {
                let z = z0 + f.position(k) * map.fiber(i).length_km;
                if z > cut {
                    rx_side.push(f.sections[k]);
                } else {
                    tx_side.push(f.sections[k]);
                }
            }
        }
        (rx_side, tx_side)
    };

    let mut current = terminal_inverse(map);
    let mut steps = Vec::with_capacity(segs.len());
    for seg in segs.iter().rev() {
        let (rx_side, tx_side) = split_pmd(seg);
        let (before, after) = match opts.placement {
            NonlinearPlacement::Symmetric => (-seg.dispersion_ps_nm / 2.0, -seg.dispersion_ps_nm / 2.0),
            NonlinearPlacement::AfterLinear => (-seg.dispersion_ps_nm, 0.0),
        };
        current.dispersion_ps_nm += before;
        current.pmd_inverse.extend(rx_side);
        steps.push(DbpStep {
            linear: std::mem::take(&mut current),
            nonlinear: NonlinearStage {
                gamma_eff: seg.gamma_eff,
                nonlinear_length: seg.nonlinear_length,
                power_scale,
                model: opts.model,
                z_start_km: seg.z_start_km,
                z_end_km: seg.z_end_km,
            },
        });
        current.dispersion_ps_nm = after;
        current.pmd_inverse = tx_side;
    }
    current.dispersion_ps_nm -= map.precompensation_ps_nm;
    Ok(DbpPlan { steps, tail: current, wavelength: opts.wavelength })
}

/// Plan that exactly reverses the split-step forward model (noise aside):
/// every SSFM substep of every fiber, amplifier gains, PMD sections and the
/// ideal or physical terminal element. The input is the received field in
/// physical units.
pub fn build_mirror_plan(
    map: &DispersionMap,
    ssfm: &SsfmConfig,
    pmd: &PmdRealization,
    wavelength: f64,
) -> Result<DbpPlan> {
    map.validate()?;
    ssfm.validate()?;
    pmd.check_geometry(map)?;
    let mut steps = Vec::new();
    let mut current = LinearStage::default();

    let mut reverse_fiber = |fiber: &crate::link::FiberParams,
                             n_steps: usize,
                             sections: &crate::pmd::FiberPmd,
                             gain_db: f64,
                             z0: f64,
                             current: &mut LinearStage| {
        let h_km = fiber.length_km / n_steps as f64;
        let half = LinearStage {
            dispersion_ps_nm: -fiber.d_ps_nm_km * h_km / 2.0,
            gain_db: fiber.alpha_db_km * h_km / 2.0,
            pmd_inverse: Vec::new(),
        };
        current.gain_db -= gain_db;
        for j in (0..n_steps).rev() {
            let mut after: Vec<PmdSection> = sections.sections_after_step(j, n_steps).copied().collect();
            after.reverse();
            current.pmd_inverse.extend(after);
            current.dispersion_ps_nm += half.dispersion_ps_nm;
            current.gain_db += half.gain_db;
            steps.push(DbpStep {
                linear: std::mem::take(current),
                nonlinear: NonlinearStage {
                    gamma_eff: fiber.gamma_per_w_km,
                    nonlinear_length: h_km,
                    power_scale: 1.0,
                    model: ssfm.nonlinearity,
                    z_start_km: z0 + j as f64 * h_km,
                    z_end_km: z0 + (j + 1) as f64 * h_km,
                },
            });
            *current = half.clone();
        }
    };

    let length = map.length_km();
    match map.terminal_fiber() {
        Some(fiber) => {
            let n = terminal_steps(map, ssfm).unwrap_or(1);
            reverse_fiber(&fiber, n, &Default::default(), fiber.loss_db(), length, &mut current);
        }
        None => current = terminal_inverse(map),
    }
    for i in (0..2 * map.spans.len()).rev() {
        reverse_fiber(
            map.fiber(i),
            steps_for_fiber(i, ssfm),
            &pmd.fibers[i],
            map.gain_after_fiber(i),
            fiber_start_km(map, i),
            &mut current,
        );
    }
    current.dispersion_ps_nm -= map.precompensation_ps_nm;
    Ok(DbpPlan { steps, tail: current, wavelength })
}

impl DbpPlan {
    pub fn m(&self) -> usize {
        self.steps.len()
    }

    /// Stage `k` of the M + 1 linear stages (the last one is the tail).
    pub fn linear_stage(&self, k: usize) -> &LinearStage {
        if k < self.steps.len() {
            &self.steps[k].linear
        } else {
            &self.tail
        }
    }

    pub fn total_dispersion_ps_nm(&self) -> f64 {
        self.steps.iter().map(|s| s.linear.dispersion_ps_nm).sum::<f64>() + self.tail.dispersion_ps_nm
    }

    pub fn has_pmd(&self) -> bool {
        (0..=self.m()).any(|k| !self.linear_stage(k).pmd_inverse.is_empty())
    }

    /// Human-readable table of the plan, one line per stage.
    pub fn export_text(&self) -> String {
        let mut s = String::from("stage\tkind\tdispersion_ps_nm\tgain_db\tpmd_sections\tz_start_km\tz_end_km\tgamma_eff\tnonlinear_length_km\tpower_scale_w\n");
        let lin = |s: &mut String, k: usize, l: &LinearStage| {
            s.push_str(&format!("{k}\tlinear\t{}\t{}\t{}\t\t\t\t\t\n", l.dispersion_ps_nm, l.gain_db, l.pmd_inverse.len()));
        };
        for (k, st) in self.steps.iter().enumerate() {
            lin(&mut s, k, &st.linear);
            let n = &st.nonlinear;
            s.push_str(&format!(
                "{k}\tkerr\t\t\t\t{}\t{}\t{}\t{}\t{}\n",
                n.z_start_km, n.z_end_km, n.gamma_eff, n.nonlinear_length, n.power_scale
            ));
        }
        lin(&mut s, self.steps.len(), &self.tail);
        s
    }
}

/// Runs the plan over a time-domain field (treated as periodic).
pub fn dbp_equalize(field: &DualPolField, plan: &DbpPlan) -> Result<DualPolField> {
    field.validate()?;
    let mut f = field.clone();
    for step in &plan.steps {
        step.linear.apply(&mut f, plan.wavelength);
        step.nonlinear.apply(&mut f);
    }
    plan.tail.apply(&mut f, plan.wavelength);
    Ok(f)
}

/// DBP with the exact PMD realization of the forward run.
pub fn pmd_aware_dbp(
    field: &DualPolField,
    map: &DispersionMap,
    m: usize,
    launch_power_dbm: f64,
    opts: &DbpOptions,
    pmd: &PmdRealization,
) -> Result<DualPolField> {
    dbp_equalize(field, &build_pmd_aware_plan(map, m, launch_power_dbm, opts, pmd)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{propagate_link, FiberParams, SpanConfig};
    use crate::units::DEFAULT_WAVELENGTH as LAMBDA;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, fs: f64, power: f64, seed: u64) -> DualPolField {
        // Band-limited random waveform (half the band occupied).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        let mut y = x.clone();
        for k in (0..n / 4).chain(3 * n / 4..n) {
            x[k] = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            y[k] = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        ifft(&mut x);
        ifft(&mut y);
        let mut f = DualPolField::new(x, y, fs).unwrap();
        let p = f.mean_power();
        f.scale((power / p).sqrt());
        f
    }

    fn rel_rms(a: &DualPolField, b: &DualPolField) -> f64 {
        let d: f64 = a.x.iter().zip(&b.x).chain(a.y.iter().zip(&b.y)).map(|(u, v)| (u - v).norm_sqr()).sum();
        (d / b.energy()).sqrt()
    }

    fn linear_map(spans: usize, pre: f64) -> DispersionMap {
        let mut span = SpanConfig::paper_default();
        span.smf.gamma_per_w_km = 0.0;
        span.dcf.gamma_per_w_km = 0.0;
        span.noise_figure_db = None;
        DispersionMap::closing(pre, vec![span; spans])
    }

    #[test]
    fn partition_ties_go_first() {
        let sizes: Vec<usize> = partition(28, 8).iter().map(|g| g.len()).collect();
        assert_eq!(sizes, [4, 4, 4, 4, 3, 3, 3, 3]);
        assert_eq!(partition(28, 7).iter().map(|g| g.len()).collect::<Vec<_>>(), [4; 7]);
        assert_eq!(partition(3, 3), vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn per_fiber_steps_follow_fiber_boundaries() {
        let map = DispersionMap::closing(-1224.0, vec![SpanConfig::paper_default(); 3]);
        let plan = build_dbp_plan(&map, 6, -4.0, &DbpOptions::default()).unwrap();
        let mut z = 0.0;
        let mut bounds = vec![];
        for i in 0..6 {
            bounds.push((z, z + map.fiber(i).length_km));
            z += map.fiber(i).length_km;
        }
        bounds.reverse();
        for (st, (a, b)) in plan.steps.iter().zip(bounds) {
            assert!((st.nonlinear.z_start_km - a).abs() < 1e-12 && (st.nonlinear.z_end_km - b).abs() < 1e-12);
        }
        assert!(build_dbp_plan(&map, 7, -4.0, &DbpOptions::default()).is_err());
        assert!(build_dbp_plan(&map, 0, -4.0, &DbpOptions::default()).is_err());
    }

    #[test]
    fn seven_steps_over_28_spans() {
        let map = DispersionMap::paper_default();
        let plan = build_dbp_plan(&map, 7, -4.0, &DbpOptions::default()).unwrap();
        assert_eq!(plan.m(), 7);
        let four_span = 4.0 * (17.0 * 72.0 - 80.0 * 13.0);
        for st in &plan.steps {
            assert!((st.nonlinear.z_end_km - st.nonlinear.z_start_km - 4.0 * 85.0).abs() < 1e-9);
        }
        // Inner stages join two half steps: a full 4-span inverse each.
        let omega = angular_frequencies(1024, 64e9);
        let want = dispersion_response(&omega, -four_span, LAMBDA);
        for k in 1..7 {
            let got = plan.linear_stage(k).scalar_response(&omega, LAMBDA).unwrap();
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "stage {k}: {err}");
        }
        let af = build_dbp_plan(&map, 7, -4.0, &DbpOptions { placement: NonlinearPlacement::AfterLinear, ..Default::default() }).unwrap();
        for k in 1..7 {
            assert!((af.linear_stage(k).dispersion_ps_nm + four_span).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_eff_is_length_weighted() {
        let map = DispersionMap::closing(-1224.0, vec![SpanConfig::paper_default(); 4]);
        let plan = build_dbp_plan(&map, 4, -4.0, &DbpOptions::default()).unwrap();
        let want: f64 = (1.4 * 72.0 + 2.8 * 13.0) / 85.0;
        assert!((want - 1.614).abs() < 5e-4);
        for st in &plan.steps {
            assert!((st.nonlinear.gamma_eff - want).abs() < 1e-12);
            let leff = FiberParams::smf().effective_length_km() + FiberParams::dcf().effective_length_km();
            assert!((st.nonlinear.nonlinear_length - leff).abs() < 1e-9);
            assert!((st.nonlinear.power_scale - dbm_to_watt(-4.0) / 2.0).abs() < 1e-18);
        }
        let eff = build_dbp_plan(&map, 4, -4.0, &DbpOptions { gamma_weighting: GammaWeighting::EffectiveLength, ..Default::default() })
            .unwrap();
        let (ls, ld) = (FiberParams::smf().effective_length_km(), FiberParams::dcf().effective_length_km());
        let want = (1.4 * ls + 2.8 * ld) / (ls + ld);
        assert!((eff.steps[0].nonlinear.gamma_eff - want).abs() < 1e-12);
    }

    #[test]
    fn composition_invariance() {
        let map = DispersionMap::closing(-1224.0, vec![SpanConfig::paper_default(); 8]);
        let omega = angular_frequencies(512, 64e9);
        let total = |plan: &DbpPlan| {
            let mut acc = vec![Complex64::new(1.0, 0.0); omega.len()];
            for k in 0..=plan.m() {
                for (a, h) in acc.iter_mut().zip(plan.linear_stage(k).scalar_response(&omega, LAMBDA).unwrap()) {
                    *a *= h;
                }
            }
            acc
        };
        for m in [1, 2, 4, 8] {
            let a = total(&build_dbp_plan(&map, m, 0.0, &DbpOptions::default()).unwrap());
            let b = total(&build_dbp_plan(&map, 2 * m, 0.0, &DbpOptions::default()).unwrap());
            let err = a.iter().zip(&b).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "M={m}: {err}");
        }
        // Non-closing map: the plan inverts the link's total dispersion.
        let mut open = map.clone();
        open.terminal_dispersion_ps_nm = 0.0;
        let plan = build_dbp_plan(&open, 3, 0.0, &DbpOptions::default()).unwrap();
        assert!((plan.total_dispersion_ps_nm() + open.residual_at_rx_ps_nm()).abs() < 1e-9);
    }

    #[test]
    fn linear_link_is_inverted_for_any_step_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (spans, pre) in [(7, -1224.0), (2, 0.0), (3, 500.0)] {
            let map = linear_map(spans, pre);
            let tx = random_field(2048, 64e9, 1e-3, 2);
            let pmd = PmdRealization::none(&map);
            let rx = propagate_link(&tx, &map, &SsfmConfig { steps_smf: 4, steps_dcf: 2, ..Default::default() }, &pmd, LAMBDA, &mut rng)
                .unwrap();
            for m in [1, 2, 7] {
                if m > 2 * spans {
                    continue;
                }
                let out = dbp_equalize(&rx, &build_dbp_plan(&map, m, 0.0, &DbpOptions::default()).unwrap()).unwrap();
                assert!(rel_rms(&out, &tx) < 1e-9, "spans {spans} M {m}: {}", rel_rms(&out, &tx));
                assert_eq!(out.len(), rx.len());
                assert_eq!(out.sample_rate, rx.sample_rate);
            }
        }
    }

    #[test]
    fn mirror_plan_inverts_nonlinear_ssfm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut span = SpanConfig::paper_default();
        span.noise_figure_db = None;
        span.smf.pmd_ps_sqrt_km = 0.5;
        let map = DispersionMap::closing(-300.0, vec![span; 2]);
        let ssfm = SsfmConfig { steps_smf: 12, steps_dcf: 3, ..Default::default() };
        let pmd = PmdRealization::draw(&map, 4, 0, &mut rng);
        let tx = random_field(1024, 64e9, 5e-3, 4);
        let rx = propagate_link(&tx, &map, &ssfm, &pmd, LAMBDA, &mut rng).unwrap();
        assert!(rel_rms(&rx, &tx) > 1e-2);
        let plan = build_mirror_plan(&map, &ssfm, &pmd, LAMBDA).unwrap();
        assert_eq!(plan.m(), 2 * 15);
        let out = dbp_equalize(&rx, &plan).unwrap();
        assert!(rel_rms(&out, &tx) < 1e-9, "{}", rel_rms(&out, &tx));

        let mut phys = map.clone();
        phys.terminal = crate::link::TerminalElement::Physical;
        let rx = propagate_link(&tx, &phys, &ssfm, &pmd, LAMBDA, &mut rng).unwrap();
        let out = dbp_equalize(&rx, &build_mirror_plan(&phys, &ssfm, &pmd, LAMBDA).unwrap()).unwrap();
        assert!(rel_rms(&out, &tx) < 1e-9, "{}", rel_rms(&out, &tx));
    }

    #[test]
    fn more_steps_leave_less_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut span = SpanConfig::paper_default();
        span.noise_figure_db = None;
        span.smf.pmd_ps_sqrt_km = 0.0;
        let map = DispersionMap::closing(-1224.0, vec![span; 4]);
        let ssfm = SsfmConfig { steps_smf: 24, steps_dcf: 6, nonlinearity: NonlinearModel::Manakov, ..Default::default() };
        let p_dbm = 6.0;
        let tx = random_field(4096, 128e9, dbm_to_watt(p_dbm) / 2.0, 6);
        let rx = propagate_link(&tx, &map, &ssfm, &PmdRealization::none(&map), LAMBDA, &mut rng).unwrap();
        let mut norm = rx.clone();
        norm.scale((2.0 / dbm_to_watt(p_dbm)).sqrt());
        let mut reference = tx.clone();
        reference.scale((2.0 / dbm_to_watt(p_dbm)).sqrt());
        let err = |m: usize| {
            let out = dbp_equalize(&norm, &build_dbp_plan(&map, m, p_dbm, &DbpOptions::default()).unwrap()).unwrap();
            rel_rms(&out, &reference)
        };
        let (e0, e1, e4, e8) = (
            dbp_equalize(&norm, &build_dbp_plan(&map, 1, -100.0, &DbpOptions::default()).unwrap()).map(|o| rel_rms(&o, &reference)).unwrap(),
            err(1),
            err(4),
            err(8),
        );
        assert!(e1 < e0, "{e1} vs linear {e0}");
        assert!(e4 < e1 && e8 < e4, "{e1} {e4} {e8}");
    }

    #[test]
    fn kerr_stage_preserves_magnitude() {
        let f = random_field(256, 64e9, 1.0, 7);
        let mut g = f.clone();
        NonlinearStage { gamma_eff: 1.6, nonlinear_length: 27.0, power_scale: 0.05, model: NonlinearModel::Manakov, z_start_km: 0.0, z_end_km: 1.0 }
            .apply(&mut g);
        for (a, b) in f.x.iter().zip(&g.x) {
            assert!((a.norm() - b.norm()).abs() < 1e-14);
        }
        assert!(f.x.iter().zip(&g.x).any(|(a, b)| (a - b).norm() > 1e-3));
    }

    #[test]
    fn pmd_aware_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = linear_map(3, -1224.0);
        let mut pmd_map = map.clone();
        for s in &mut pmd_map.spans {
            s.smf.pmd_ps_sqrt_km = 0.5;
        }
        let opts = DbpOptions::default();
        let none = PmdRealization::none(&map);
        let tx = random_field(2048, 64e9, 1e-3, 9);
        let a = dbp_equalize(&tx, &build_dbp_plan(&map, 3, 0.0, &opts).unwrap()).unwrap();
        let b = pmd_aware_dbp(&tx, &map, 3, 0.0, &opts, &none).unwrap();
        assert!(rel_rms(&a, &b) < 1e-12);

        let pmd = PmdRealization::draw(&pmd_map, 8, 0, &mut rng);
        assert!(pmd.total_dgd() > 0.0);
        let ssfm = SsfmConfig { steps_smf: 8, steps_dcf: 2, ..Default::default() };
        let rx = propagate_link(&tx, &pmd_map, &ssfm, &pmd, LAMBDA, &mut rng).unwrap();
        for m in [1, 3, 6] {
            for placement in [NonlinearPlacement::Symmetric, NonlinearPlacement::AfterLinear] {
                let o = DbpOptions { placement, ..opts };
                let out = pmd_aware_dbp(&rx, &pmd_map, m, 0.0, &o, &pmd).unwrap();
                assert!(rel_rms(&out, &tx) < 1e-9, "M {m}: {}", rel_rms(&out, &tx));
            }
        }
        let plain = dbp_equalize(&rx, &build_dbp_plan(&pmd_map, 3, 0.0, &opts).unwrap()).unwrap();
        assert!(rel_rms(&plain, &tx) > 1e-3);

        let short = DispersionMap::closing(0.0, vec![SpanConfig::paper_default(); 2]);
        assert!(build_pmd_aware_plan(&short, 2, 0.0, &opts, &pmd).is_err());
    }

    #[test]
    fn export_lists_every_stage() {
        let plan = build_dbp_plan(&DispersionMap::paper_default(), 14, -4.0, &DbpOptions::default()).unwrap();
        let text = plan.export_text();
        assert_eq!(text.lines().count(), 1 + 14 * 2 + 1);
        assert!(text.lines().nth(2).unwrap().contains("kerr"));
        let back: DbpPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
