//! End-to-end chain: transmitter, link, receiver front end, linear DSP,
//! nonlinear equalizer and hard decisions, plus training-set generation.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbp::{build_dbp_plan, build_pmd_aware_plan, dbp_equalize, DbpOptions, DbpPlan};
use crate::error::{param, Error, Result};
use crate::ldbp::{ldbp_equalize, Dataset, LdbpModel, Window};
use crate::link::{propagate_link, DispersionMap, SsfmConfig};
use crate::pmd::PmdRealization;
use crate::rxdsp::{cd_compensate, channel_select, complex_gain, synchronize, Mimo2x2State, MimoOutput};
use crate::signal::{fft, ifft, resample, rrc_response, DualPolField};
use crate::transceiver::{build_wdm, derive_seed, ErrorCounter, Metrics, SeedDomain, SymbolFrame, WdmConfig};
use crate::units::dbm_to_watt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmdSettings {
    pub enabled: bool,
    pub sections_per_smf: usize,
    pub sections_per_dcf: usize,
}

impl Default for PmdSettings {
    fn default() -> Self {
        Self { enabled: true, sections_per_smf: 8, sections_per_dcf: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MimoSettings {
    pub taps: usize,
    pub step_size: f64,
    pub training_symbols: usize,
    pub passes: usize,
}

impl Default for MimoSettings {
    fn default() -> Self {
        Self { taps: 15, step_size: 1e-3, training_symbols: 4096, passes: 4 }
    }
}

/// Everything needed to turn a seed into a received block.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub map: DispersionMap,
    pub ssfm: SsfmConfig,
    pub wdm: WdmConfig,
    /// Samples per symbol of the link simulation.
    pub sim_sps: usize,
    pub wavelength: f64,
    pub pmd: PmdSettings,
    pub mimo: MimoSettings,
    /// Symbols per polarization in one periodic simulation block.
    pub block_symbols: usize,
    /// Largest lag searched by frame synchronization (symbols).
    pub max_lag: usize,
}

impl System {
    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.ssfm.validate()?;
        self.wdm.validate()?;
        if self.sim_sps < 2 || self.sim_sps % 2 != 0 {
            return Err(Error::Configuration(format!("simulation needs an even number of samples/symbol >= 2, got {}", self.sim_sps)));
        }
        if self.mimo.training_symbols + crate::rxdsp::MIN_SYNC_OVERLAP + self.max_lag > self.block_symbols {
            return Err(Error::Configuration(format!(
                "block of {} symbols leaves too few payload symbols after {} training symbols",
                self.block_symbols, self.mimo.training_symbols
            )));
        }
        Ok(())
    }

    /// Link PMD for the experiment: drawn once from the link seed, shared
    /// by every block and known to the genie equalizer.
    pub fn draw_pmd(&self, seed: u64) -> PmdRealization {
        if !self.pmd.enabled {
            return PmdRealization::none(&self.map);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Link, 0));
        PmdRealization::draw(&self.map, self.pmd.sections_per_smf, self.pmd.sections_per_dcf, &mut rng)
    }
}

/// One simulated block of the center channel.
#[derive(Debug, Clone)]
pub struct Block {
    /// Front-end output at 2 samples/symbol, scaled to unit symbol power.
    pub received: DualPolField,
    /// The same channel, transmitted alone and passed through the front end.
    pub target: DualPolField,
    pub frame: SymbolFrame,
}

/// Noise-free center-channel waveform at 2 samples/symbol after transmit
/// and receive RRC filtering, with unit-amplitude symbol instants.
pub fn reference_waveform(frame: &SymbolFrame, rolloff: f64) -> Result<DualPolField> {
    let n = 2 * frame.len();
    let fs = 2.0 * frame.baud;
    let h = rrc_response(n, fs, frame.baud, rolloff)?;
    let shape = |s: &[Complex64]| {
        let mut up = vec![Complex64::new(0.0, 0.0); n];
        for (k, v) in s.iter().enumerate() {
            up[2 * k] = *v;
        }
        fft(&mut up);
        up.iter_mut().zip(&h).for_each(|(a, g)| *a *= g * g);
        ifft(&mut up);
        up
    };
    DualPolField::new(shape(&frame.symbols_x), shape(&frame.symbols_y), fs)
}

/// Channel selection, rate conversion to 2 samples/symbol and scaling so that
/// symbol instants of an undistorted signal equal the transmitted symbols.
pub fn front_end(field: &DualPolField, wdm: &WdmConfig, sim_sps: usize, channel: usize) -> Result<DualPolField> {
    let selected = channel_select(field, wdm.channel_offset(channel), wdm.rolloff, wdm.baud)?;
    let mut out = resample(&selected, 2.0 * wdm.baud)?;
    out.center_offset = 0.0;
    out.scale(1.0 / (dbm_to_watt(wdm.launch_power_dbm) / 2.0 * sim_sps as f64).sqrt());
    Ok(out)
}

/// Transmits one block from `seed` over the link and returns the center
/// channel after the front end. Channel `c` of block `seed` uses symbol
/// seed `derive_seed(seed, domain, c)`.
pub fn simulate_block(sys: &System, launch_power_dbm: f64, pmd: &PmdRealization, domain: SeedDomain, seed: u64) -> Result<Block> {
    let mut wdm = sys.wdm;
    wdm.launch_power_dbm = launch_power_dbm;
    let frames: Vec<SymbolFrame> = (0..wdm.n_channels)
        .map(|c| SymbolFrame::random(sys.block_symbols, wdm.baud, derive_seed(seed, domain, c as u64)))
        .collect();
    let tx = build_wdm(&frames, &wdm, sys.sim_sps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Noise, domain as u64));
    let rx = propagate_link(&tx, &sys.map, &sys.ssfm, pmd, sys.wavelength, &mut rng)?;
    let center = wdm.center_index();
    let received = front_end(&rx, &wdm, sys.sim_sps, center)?;
    if received.x.iter().chain(&received.y).any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric(format!("non-finite samples after the link at {launch_power_dbm} dBm")));
    }
    let frame = frames[center].clone();
    let target = reference_waveform(&frame, wdm.rolloff)?;
    Ok(Block { received, target, frame })
}

/// Residual CD removal and the data-aided 2x2 equalizer, trained on the
/// block's leading symbols, frozen, then run at 2 samples/symbol.
pub fn linear_chain(sys: &System, block: &Block) -> Result<DualPolField> {
    let f = cd_compensate(&block.received, sys.map.residual_at_rx_ps_nm(), sys.wavelength);
    adaptive_equalize(sys, &f, &block.frame)
}

fn adaptive_equalize(sys: &System, f: &DualPolField, frame: &SymbolFrame) -> Result<DualPolField> {
    let mut mimo = Mimo2x2State::new(sys.mimo.taps, sys.mimo.step_size)?;
    mimo.train(f, &frame.symbols_x, &frame.symbols_y, sys.mimo.training_symbols, sys.mimo.passes)?;
    mimo.equalize(f, None, MimoOutput::SampleSpaced)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Equalizer {
    Linear,
    Dbp { m: usize, options: DbpOptions },
    Ldbp(Box<LdbpModel>),
    PmdAwareDbp { m: usize, options: DbpOptions },
}

impl Equalizer {
    pub fn id(&self) -> &'static str {
        match self {
            Equalizer::Linear => "linear",
            Equalizer::Dbp { .. } => "dbp",
            Equalizer::Ldbp(_) => "ldbp",
            Equalizer::PmdAwareDbp { .. } => "pmd_aware_dbp",
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Equalizer::Linear => 0,
            Equalizer::Dbp { m, .. } | Equalizer::PmdAwareDbp { m, .. } => *m,
            Equalizer::Ldbp(model) => model.m(),
        }
    }
}

/// Plans are built once per (equalizer, power) and reused for every block.
enum Prepared<'a> {
    Linear,
    Dbp(DbpPlan),
    Ldbp(&'a LdbpModel),
    PmdAware(DbpPlan),
}

fn prepare<'a>(sys: &System, eq: &'a Equalizer, launch_power_dbm: f64, pmd: &PmdRealization) -> Result<Prepared<'a>> {
    Ok(match eq {
        Equalizer::Linear => Prepared::Linear,
        Equalizer::Dbp { m, options } => Prepared::Dbp(build_dbp_plan(&sys.map, *m, launch_power_dbm, options)?),
        Equalizer::Ldbp(model) => Prepared::Ldbp(model),
        Equalizer::PmdAwareDbp { m, options } => {
            Prepared::PmdAware(build_pmd_aware_plan(&sys.map, *m, launch_power_dbm, options, pmd)?)
        }
    })
}

/// `chain` is the block's linear-chain output when already computed.
fn run_equalizer(sys: &System, prepared: &Prepared, block: &Block, chain: Option<&DualPolField>) -> Result<DualPolField> {
    let lin = || chain.map_or_else(|| linear_chain(sys, block), |c| Ok(c.clone()));
    match prepared {
        Prepared::Linear => lin(),
        Prepared::Dbp(plan) => dbp_equalize(&lin()?, plan),
        Prepared::Ldbp(model) => ldbp_equalize(model, &lin()?),
        // The genie inverts the link PMD inside back-propagation; the same
        // adaptive equalizer then follows, as for every other receiver.
        Prepared::PmdAware(plan) => {
            let f = cd_compensate(&block.received, sys.map.residual_at_rx_ps_nm(), sys.wavelength);
            adaptive_equalize(sys, &dbp_equalize(&f, plan)?, &block.frame)
        }
    }
}

/// Symbols decided from an equalized block, with the counters that produced
/// the metrics. Symbols before `skip` (the equalizer preamble) are not counted.
#[derive(Debug, Clone)]
pub struct Decisions {
    pub counter: ErrorCounter,
    /// Gain-corrected symbol estimates (x polarization), for constellations.
    pub symbols_x: Vec<Complex64>,
}

/// Picks the symbol instants, synchronizes each polarization against the
/// transmitted frame, removes a least-squares complex gain and counts errors.
pub fn decide(equalized: &DualPolField, frame: &SymbolFrame, skip: usize, max_lag: usize) -> Result<Decisions> {
    let (rx, ry) = equalized.decimate(0, 2);
    let n = frame.len();
    if rx.len() != n || skip >= n {
        return param(format!("{} symbol instants for a frame of {n}", rx.len()));
    }
    let mut counter = ErrorCounter::default();
    let mut kept = Vec::new();
    for (r, s, bits) in [(&rx, &frame.symbols_x, &frame.bits_x), (&ry, &frame.symbols_y, &frame.bits_y)] {
        let sync = synchronize(r, s, max_lag)?;
        let aligned = sync.apply(r);
        let g = complex_gain(&aligned[skip..], &s[skip..]);
        let est: Vec<Complex64> = aligned[skip..].iter().map(|z| z * g).collect();
        counter.add(&est, &s[skip..], &bits[4 * skip..]);
        if kept.is_empty() {
            kept = est;
        }
    }
    Ok(Decisions { counter, symbols_x: kept })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Up to the requested number of equalized x-polarization symbols.
    pub constellation: Vec<Complex64>,
    pub sync_failures: usize,
    pub blocks: usize,
}

/// Runs `n_blocks` test blocks through the chain and `eq`. Blocks are
/// independent and processed in parallel; counts are merged in block order.
pub fn evaluate(
    sys: &System,
    eq: &Equalizer,
    launch_power_dbm: f64,
    pmd: &PmdRealization,
    n_blocks: usize,
    seed: u64,
    constellation_points: usize,
) -> Result<Evaluation> {
    let mut all = evaluate_many(sys, std::slice::from_ref(eq), launch_power_dbm, pmd, n_blocks, seed, constellation_points)?;
    all.remove(0)
}

/// Like [`evaluate`] for several equalizers on the same test blocks, so the
/// comparison is matched. A failing equalizer only fails its own entry.
pub fn evaluate_many(
    sys: &System,
    eqs: &[Equalizer],
    launch_power_dbm: f64,
    pmd: &PmdRealization,
    n_blocks: usize,
    seed: u64,
    constellation_points: usize,
) -> Result<Vec<Result<Evaluation>>> {
    sys.validate()?;
    if n_blocks == 0 {
        return param("at least one test block is needed");
    }
    let prepared: Vec<Result<Prepared>> = eqs.iter().map(|eq| prepare(sys, eq, launch_power_dbm, pmd)).collect();
    let per_block: Vec<Vec<Result<Decisions>>> = (0..n_blocks as u64)
        .into_par_iter()
        .map(|b| -> Result<Vec<Result<Decisions>>> {
            let block = simulate_block(sys, launch_power_dbm, pmd, SeedDomain::Test, derive_seed(seed, SeedDomain::Test, b))?;
            let mut chain: Option<Result<DualPolField>> = None;
            Ok(prepared
                .iter()
                .map(|p| {
                    let p = p.as_ref().map_err(Clone::clone)?;
                    let out = if let Prepared::PmdAware(_) = p {
                        run_equalizer(sys, p, &block, None)?
                    } else {
                        let lin = chain.get_or_insert_with(|| linear_chain(sys, &block)).as_ref().map_err(Clone::clone)?;
                        run_equalizer(sys, p, &block, Some(lin))?
                    };
                    decide(&out, &block.frame, sys.mimo.training_symbols, sys.max_lag)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..eqs.len())
        .map(|e| {
            let mut counter = ErrorCounter::default();
            let mut constellation = Vec::new();
            let mut sync_failures = 0;
            for block in &per_block {
                match &block[e] {
                    Ok(d) => {
                        counter.merge(&d.counter);
                        let room = constellation_points.saturating_sub(constellation.len());
                        constellation.extend(d.symbols_x.iter().take(room));
                    }
                    Err(Error::Sync(msg)) => {
                        log::warn!("block dropped: {msg}");
                        sync_failures += 1;
                    }
                    Err(err) => return Err(err.clone()),
                }
            }
            if sync_failures == n_blocks {
                return Err(Error::Sync(format!("all {n_blocks} blocks failed to synchronize")));
            }
            Ok(Evaluation { metrics: counter.metrics()?, constellation, sync_failures, blocks: n_blocks })
        })
        .collect())
}

/// Cuts overlap-free training windows from an equalizer-input block: each
/// window's target is `output_len` samples of the reference, its input the
/// `input_len` samples centered on them (circularly).
pub fn cut_windows(input: &DualPolField, target: &DualPolField, frame: &SymbolFrame, input_len: usize, output_len: usize) -> Result<Vec<Window>> {
    if output_len % 2 != 0 || input_len < output_len || (input_len - output_len) % 2 != 0 {
        return param("window lengths must be even with an even margin");
    }
    let n = input.len();
    if target.len() != n || frame.len() * 2 != n {
        return param("input, target and frame lengths disagree");
    }
    let margin = ((input_len - output_len) / 2) as isize;
    Ok((0..n / output_len)
        .map(|k| {
            let s = k * output_len;
            let (input_x, input_y) = input.circular_window(s as isize - margin, input_len);
            Window {
                input_x,
                input_y,
                target_x: target.x[s..s + output_len].to_vec(),
                target_y: target.y[s..s + output_len].to_vec(),
                symbols_x: frame.symbols_x[s / 2..(s + output_len) / 2].to_vec(),
                symbols_y: frame.symbols_y[s / 2..(s + output_len) / 2].to_vec(),
            }
        })
        .collect())
}

/// Simulates blocks under `domain` until `count` windows are collected.
/// Blocks whose linear chain fails to adapt are dropped and logged.
pub fn generate_dataset(
    sys: &System,
    launch_power_dbm: f64,
    pmd: &PmdRealization,
    count: usize,
    input_len: usize,
    output_len: usize,
    domain: SeedDomain,
    seed: u64,
) -> Result<Dataset> {
    sys.validate()?;
    if count == 0 {
        return param("dataset needs at least one window");
    }
    let per_block = 2 * sys.block_symbols / output_len;
    if per_block == 0 {
        return param("block is shorter than one output window");
    }
    let mut windows = Vec::with_capacity(count);
    let mut next = 0u64;
    let mut dropped = 0usize;
    while windows.len() < count {
        let need = (count - windows.len()).div_ceil(per_block);
        let batch: Vec<Result<Vec<Window>>> = (next..next + need as u64)
            .into_par_iter()
            .map(|b| {
                let block = simulate_block(sys, launch_power_dbm, pmd, domain, derive_seed(seed, domain, b))?;
                let eq_in = linear_chain(sys, &block)?;
                cut_windows(&eq_in, &block.target, &block.frame, input_len, output_len)
            })
            .collect();
        next += need as u64;
        for r in batch {
            match r {
                Ok(w) => windows.extend(w),
                Err(e @ (Error::Adaptation(_) | Error::Sync(_))) => {
                    log::warn!("block dropped: {e}");
                    dropped += 1;
                    if dropped > 10 + count / per_block {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    windows.truncate(count);
    Ok(Dataset {
        input_len,
        output_len,
        symbols_per_window: output_len / 2,
        sample_rate: 2.0 * sys.wdm.baud,
        launch_power_dbm,
        tag: [0; 32],
        windows,
    })
}
