//! Experiment configuration: TOML with unit-suffixed physical values,
//! unknown keys rejected, `key=value` overrides and content hashes.

use dmldbp::dbp::{DbpOptions, GammaWeighting, NonlinearPlacement};
use dmldbp::ldbp::{LossKind, Optimizer, TrainConfig};
use dmldbp::link::{DispersionMap, FiberParams, NonlinearModel, SpanConfig, SsfmConfig, TerminalElement};
use dmldbp::pipeline::{MimoSettings, PmdSettings, System};
use dmldbp::transceiver::WdmConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::quantity::{parse, Dim};
use crate::CliError;

/// Omitted fields take the SMF or DCF default of the section they are in.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberSection {
    pub length: Option<String>,
    pub alpha: Option<String>,
    pub dispersion: Option<String>,
    pub gamma: Option<String>,
    pub pmd: Option<String>,
}

impl FiberSection {
    fn full(length: &str, alpha: &str, dispersion: &str, gamma: &str, pmd: &str) -> Self {
        Self {
            length: Some(length.into()),
            alpha: Some(alpha.into()),
            dispersion: Some(dispersion.into()),
            gamma: Some(gamma.into()),
            pmd: Some(pmd.into()),
        }
    }

    fn smf() -> Self {
        Self::full("72 km", "0.2 dB/km", "17 ps/nm/km", "1.4 1/W/km", "0.1 ps/sqrt(km)")
    }

    fn dcf() -> Self {
        Self::full("13 km", "0.5 dB/km", "-80 ps/nm/km", "2.8 1/W/km", "0 ps/sqrt(km)")
    }

    fn fill_from(&mut self, d: Self) {
        let pairs = [
            (&mut self.length, d.length),
            (&mut self.alpha, d.alpha),
            (&mut self.dispersion, d.dispersion),
            (&mut self.gamma, d.gamma),
            (&mut self.pmd, d.pmd),
        ];
        for (f, v) in pairs {
            if f.is_none() {
                *f = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    pub spans: usize,
    pub precompensation: String,
    /// Accumulated dispersion left at the receiver; the terminal element
    /// is sized to reach it.
    pub residual_at_rx: String,
    pub terminal: TerminalElement,
    /// Loss-matched when absent.
    pub gain_smf: Option<String>,
    pub gain_dcf: Option<String>,
    /// `"off"` disables ASE.
    pub noise_figure: String,
    pub wavelength: String,
    pub smf: FiberSection,
    pub dcf: FiberSection,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            spans: 28,
            precompensation: "-1224 ps/nm".into(),
            residual_at_rx: "0 ps/nm".into(),
            terminal: TerminalElement::Ideal,
            gain_smf: None,
            gain_dcf: None,
            noise_figure: "5 dB".into(),
            wavelength: "1550 nm".into(),
            smf: FiberSection::smf(),
            dcf: FiberSection::dcf(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmdSection {
    pub enabled: bool,
    pub sections_per_smf: usize,
    pub sections_per_dcf: usize,
}

impl Default for PmdSection {
    fn default() -> Self {
        let d = PmdSettings::default();
        Self { enabled: d.enabled, sections_per_smf: d.sections_per_smf, sections_per_dcf: d.sections_per_dcf }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsfmSection {
    pub steps_smf: usize,
    pub steps_dcf: usize,
    pub model: NonlinearModel,
    pub max_phase: Option<String>,
}

impl Default for SsfmSection {
    fn default() -> Self {
        Self { steps_smf: 72, steps_dcf: 13, model: NonlinearModel::Cnlse, max_phase: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WdmSection {
    pub channels: usize,
    pub spacing: String,
    pub symbol_rate: String,
    pub rolloff: f64,
    /// Per channel.
    pub launch_power: String,
    pub samples_per_symbol: usize,
}

impl Default for WdmSection {
    fn default() -> Self {
        Self {
            channels: 5,
            spacing: "37.5 GHz".into(),
            symbol_rate: "32 GBd".into(),
            rolloff: 0.06,
            launch_power: "-4 dBm".into(),
            samples_per_symbol: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverSection {
    pub mimo_taps: usize,
    pub mimo_step_size: f64,
    pub training_symbols: usize,
    pub mimo_passes: usize,
    pub max_lag: usize,
}

impl Default for ReceiverSection {
    fn default() -> Self {
        let m = MimoSettings::default();
        Self { mimo_taps: m.taps, mimo_step_size: m.step_size, training_symbols: m.training_symbols, mimo_passes: m.passes, max_lag: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub block_symbols: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { block_symbols: 16384, input_len: 512, output_len: 384, train_windows: 32768, validation_windows: 2048 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizerKind {
    Linear,
    Dbp,
    Ldbp,
    PmdAwareDbp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqualizerSection {
    pub kind: EqualizerKind,
    pub steps: usize,
    /// LDBP taps per layer; odd, or equal to the window length.
    pub taps: usize,
    pub untied_polarizations: bool,
    pub placement: NonlinearPlacement,
    pub gamma_weighting: GammaWeighting,
}

impl Default for EqualizerSection {
    fn default() -> Self {
        Self {
            kind: EqualizerKind::Ldbp,
            steps: 7,
            taps: 77,
            untied_polarizations: false,
            placement: NonlinearPlacement::Symmetric,
            gamma_weighting: GammaWeighting::Length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub freeze_gamma: bool,
    pub tie_gamma: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            loss: t.loss,
            freeze_gamma: t.freeze_gamma,
            tie_gamma: t.tie_gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Empty: the WDM launch power only.
    pub powers: Vec<String>,
    pub test_blocks: usize,
    pub constellation_points: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { powers: vec![], test_blocks: 4, constellation_points: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub powers: Vec<String>,
    /// `linear`, `dbp:M`, `ldbp:M`, `pmd_aware_dbp:M`.
    pub equalizers: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            powers: (-8..=0).map(|p| format!("{p} dBm")).collect(),
            equalizers: ["linear", "dbp:2", "dbp:7", "ldbp:2", "ldbp:7", "pmd_aware_dbp:7"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub link: LinkSection,
    pub pmd: PmdSection,
    pub ssfm: SsfmSection,
    pub wdm: WdmSection,
    pub receiver: ReceiverSection,
    pub data: DataSection,
    pub equalizer: EqualizerSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EqualizerSpec {
    pub kind: EqualizerKind,
    pub steps: usize,
}

impl EqualizerSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        let (name, m) = match s.split_once(':') {
            Some((n, m)) => (n, Some(m.trim().parse::<usize>().map_err(|_| format!("'{s}': steps must be an integer"))?)),
            None => (s, None),
        };
        let kind = match name.trim() {
            "linear" => EqualizerKind::Linear,
            "dbp" => EqualizerKind::Dbp,
            "ldbp" => EqualizerKind::Ldbp,
            "pmd_aware_dbp" => EqualizerKind::PmdAwareDbp,
            other => return Err(format!("unknown equalizer '{other}'")),
        };
        match (kind, m) {
            (EqualizerKind::Linear, None) => Ok(Self { kind, steps: 0 }),
            (EqualizerKind::Linear, Some(_)) => Err(format!("'{s}': the linear equalizer takes no step count")),
            (_, Some(m)) if m >= 1 => Ok(Self { kind, steps: m }),
            _ => Err(format!("'{s}': expected '<name>:<steps>' with steps >= 1")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EqualizerKind::Linear => "linear",
            EqualizerKind::Dbp => "dbp",
            EqualizerKind::Ldbp => "ldbp",
            EqualizerKind::PmdAwareDbp => "pmd_aware_dbp",
        }
    }
}

/// A validated experiment with every value in SI-style canonical units.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub raw: RawConfig,
    pub system: System,
    pub launch_power_dbm: f64,
    pub dbp: DbpOptions,
    pub equalizer: EqualizerSpec,
    pub taps: usize,
    pub untied: bool,
    pub input_len: usize,
    pub output_len: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub training: TrainConfig,
    pub eval_powers: Vec<f64>,
    pub test_blocks: usize,
    pub constellation_points: usize,
    pub sweep_powers: Vec<f64>,
    pub sweep_equalizers: Vec<EqualizerSpec>,
}

fn q(field: &str, text: &str, dim: Dim) -> Result<f64, CliError> {
    parse(text, dim).map_err(|e| CliError::Config(format!("{field}: {e}")))
}

fn fiber(name: &str, f: &FiberSection) -> Result<FiberParams, CliError> {
    let get = |key: &str, v: &Option<String>, dim: Dim| {
        let field = format!("link.{name}.{key}");
        let text = v.as_deref().ok_or_else(|| CliError::Config(format!("{field}: missing")))?;
        q(&field, text, dim)
    };
    Ok(FiberParams {
        length_km: get("length", &f.length, Dim::Length)?,
        alpha_db_km: get("alpha", &f.alpha, Dim::Attenuation)?,
        d_ps_nm_km: get("dispersion", &f.dispersion, Dim::DispersionCoefficient)?,
        gamma_per_w_km: get("gamma", &f.gamma, Dim::Nonlinearity)?,
        pmd_ps_sqrt_km: get("pmd", &f.pmd, Dim::PmdCoefficient)?,
    })
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.into()))
    }
}

impl RawConfig {
    pub fn resolve(&self) -> Result<Experiment, CliError> {
        let l = &self.link;
        check(l.spans >= 1, "link.spans: at least one span")?;
        let smf = fiber("smf", &l.smf)?;
        let dcf = fiber("dcf", &l.dcf)?;
        let nf = match l.noise_figure.trim() {
            "off" => None,
            t => Some(q("link.noise_figure", t, Dim::Decibel)?),
        };
        let mut span = SpanConfig::loss_matched(smf, dcf, nf);
        if let Some(g) = &l.gain_smf {
            span.gain_smf_db = q("link.gain_smf", g, Dim::Decibel)?;
        }
        if let Some(g) = &l.gain_dcf {
            span.gain_dcf_db = q("link.gain_dcf", g, Dim::Decibel)?;
        }
        let mut map = DispersionMap::closing(q("link.precompensation", &l.precompensation, Dim::Dispersion)?, vec![span; l.spans]);
        map.terminal_dispersion_ps_nm += q("link.residual_at_rx", &l.residual_at_rx, Dim::Dispersion)?;
        map.terminal = l.terminal;
        let wavelength = q("link.wavelength", &l.wavelength, Dim::Wavelength)?;
        check(wavelength > 0.0, "link.wavelength must be positive")?;

        let s = &self.ssfm;
        let ssfm = SsfmConfig {
            steps_smf: s.steps_smf,
            steps_dcf: s.steps_dcf,
            max_phase: s.max_phase.as_deref().map(|t| q("ssfm.max_phase", t, Dim::Phase)).transpose()?,
            nonlinearity: s.model,
        };

        let w = &self.wdm;
        let launch_power_dbm = q("wdm.launch_power", &w.launch_power, Dim::Power)?;
        let wdm = WdmConfig {
            n_channels: w.channels,
            spacing: q("wdm.spacing", &w.spacing, Dim::Frequency)?,
            baud: q("wdm.symbol_rate", &w.symbol_rate, Dim::SymbolRate)?,
            rolloff: w.rolloff,
            launch_power_dbm,
        };

        let r = &self.receiver;
        let d = &self.data;
        let system = System {
            map,
            ssfm,
            wdm,
            sim_sps: w.samples_per_symbol,
            wavelength,
            pmd: PmdSettings { enabled: self.pmd.enabled, sections_per_smf: self.pmd.sections_per_smf, sections_per_dcf: self.pmd.sections_per_dcf },
            mimo: MimoSettings { taps: r.mimo_taps, step_size: r.mimo_step_size, training_symbols: r.training_symbols, passes: r.mimo_passes },
            block_symbols: d.block_symbols,
            max_lag: r.max_lag,
        };
        system.validate().map_err(|e| CliError::Config(e.to_string()))?;
        check(r.mimo_taps % 2 == 1, "receiver.mimo_taps must be odd")?;
        check(r.mimo_step_size >= 0.0 && r.mimo_step_size.is_finite(), "receiver.mimo_step_size must be finite and >= 0")?;
        check(d.output_len % 2 == 0 && d.output_len > 0, "data.output_len must be even and positive")?;
        check(
            d.input_len >= d.output_len && (d.input_len - d.output_len) % 2 == 0,
            "data.input_len must be at least data.output_len with an even margin",
        )?;
        check(2 * d.block_symbols >= d.output_len, "data.block_symbols is shorter than one output window")?;

        let e = &self.equalizer;
        check(e.kind == EqualizerKind::Linear || e.steps >= 1, "equalizer.steps must be >= 1")?;
        check(
            e.taps >= 1 && e.taps <= d.input_len && (e.taps % 2 == 1 || e.taps == d.input_len),
            format!("equalizer.taps must be odd and at most data.input_len ({}), or equal to it", d.input_len),
        )?;
        let steps = if e.kind == EqualizerKind::Linear { 0 } else { e.steps };

        let t = &self.training;
        let training = TrainConfig {
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: 0,
            loss: t.loss,
            freeze_gamma: t.freeze_gamma,
            tie_gamma: t.tie_gamma,
        };
        training.validate().map_err(|e| CliError::Config(format!("training: {e}")))?;

        let powers = |field: &str, list: &[String]| -> Result<Vec<f64>, CliError> {
            list.iter().enumerate().map(|(i, p)| q(&format!("{field}[{i}]"), p, Dim::Power)).collect()
        };
        let mut eval_powers = powers("evaluation.powers", &self.evaluation.powers)?;
        if eval_powers.is_empty() {
            eval_powers.push(launch_power_dbm);
        }
        check(self.evaluation.test_blocks >= 1, "evaluation.test_blocks must be >= 1")?;
        let sweep_powers = powers("sweep.powers", &self.sweep.powers)?;
        let sweep_equalizers = self
            .sweep
            .equalizers
            .iter()
            .map(|s| EqualizerSpec::parse(s).map_err(|e| CliError::Config(format!("sweep.equalizers: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Experiment {
            raw: self.clone(),
            system,
            launch_power_dbm,
            dbp: DbpOptions { placement: e.placement, gamma_weighting: e.gamma_weighting, model: NonlinearModel::Manakov, wavelength },
            equalizer: EqualizerSpec { kind: e.kind, steps },
            taps: e.taps,
            untied: e.untied_polarizations,
            input_len: d.input_len,
            output_len: d.output_len,
            train_windows: d.train_windows,
            validation_windows: d.validation_windows,
            training,
            eval_powers,
            test_blocks: self.evaluation.test_blocks,
            constellation_points: self.evaluation.constellation_points,
            sweep_powers,
            sweep_equalizers,
        })
    }
}

/// Reads `text`, applies `key.path=value` overrides and deserializes.
/// Override values are TOML literals; anything that does not parse as one
/// is taken as a string, so `wdm.launch_power=-2 dBm` works unquoted.
pub fn load(text: &str, overrides: &[String]) -> Result<RawConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for o in overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| CliError::Config(format!("override '{o}' is not key=value")))?;
        let value = value.trim();
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut table;
        for part in &path[..path.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("override '{key}': '{part}' is not a section")))?;
        }
        node.insert(path[path.len() - 1].to_string(), parsed);
    }
    let mut raw = RawConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))?;
    raw.link.smf.fill_from(FiberSection::smf());
    raw.link.dcf.fill_from(FiberSection::dcf());
    Ok(raw)
}

fn sha(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().into()
}

impl RawConfig {
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(sha(&[&self.canonical()]))
    }

    /// Identifies the data-generating part of the configuration and the seed;
    /// stored in dataset headers so training refuses foreign data.
    pub fn data_tag(&self, seed: u64) -> [u8; 32] {
        #[derive(Serialize)]
        struct DataPart<'a> {
            link: &'a LinkSection,
            pmd: &'a PmdSection,
            ssfm: &'a SsfmSection,
            wdm: &'a WdmSection,
            receiver: &'a ReceiverSection,
            data: &'a DataSection,
        }
        let part = DataPart { link: &self.link, pmd: &self.pmd, ssfm: &self.ssfm, wdm: &self.wdm, receiver: &self.receiver, data: &self.data };
        sha(&[&toml::to_string(&part).expect("config serializes"), &seed.to_string()])
    }
}
