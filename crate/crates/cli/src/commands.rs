//! The `simulate`, `train`, `evaluate` and `sweep` commands.
//!
//! Seeds: the PMD realization, the training/validation blocks and the test
//! blocks all derive from `--seed` through disjoint seed domains, so every
//! command sees the same link for the same seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dmldbp::dbp::build_dbp_plan;
use dmldbp::ldbp::{init_from_dbp, train, Dataset, LdbpModel, TrainOutcome};
use dmldbp::pipeline::{evaluate_many, generate_dataset, Equalizer, Evaluation};
use dmldbp::pmd::PmdRealization;
use dmldbp::transceiver::SeedDomain;
use dmldbp::units::dbm_to_watt;
use serde::Serialize;

use crate::config::{self, EqualizerKind, EqualizerSpec, Experiment};
use crate::output::{io_err, num, Csv, Outputs, Timings};
use crate::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "dm-ldbp", version, about = "Learned digital back-propagation for dispersion-managed links")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and validation datasets and link metadata.
    Simulate(Common),
    /// Train an LDBP model on a simulated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.bin and validation.bin (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint instead of the DBP initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate one equalizer at the configured powers.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// LDBP checkpoint; required for the ldbp equalizer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every (power, equalizer) cell; LDBP cells are trained per power.
    Sweep(Common),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value`, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Simulate(c) | Command::Sweep(c) => c,
        Command::Train { common, .. } | Command::Evaluate { common, .. } => common,
    };
    if common.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    let exp = load_experiment(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", common.workers)))?;
    pool.install(|| match &cli.command {
        Command::Simulate(c) => simulate(&exp, c),
        Command::Train { common, data, resume } => train_cmd(&exp, common, data.as_deref(), resume.as_deref()),
        Command::Evaluate { common, checkpoint } => evaluate_cmd(&exp, common, checkpoint.as_deref()),
        Command::Sweep(c) => sweep(&exp, c),
    })
}

pub fn load_experiment(c: &Common) -> Result<Experiment> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", c.config.display())))?;
    config::load(&text, &c.overrides)?.resolve()
}

fn power_label(p: f64) -> String {
    format!("P{}dBm", num(p))
}

fn cell_label(spec: EqualizerSpec, p: f64) -> String {
    match spec.kind {
        EqualizerKind::Linear => format!("linear_{}", power_label(p)),
        _ => format!("{}_M{}_{}", spec.name(), spec.steps, power_label(p)),
    }
}

fn read_checkpoint(path: &Path) -> Result<LdbpModel> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(LdbpModel::from_json(&text)?)
}

/// DBP-initialized model for `m` steps at launch power `p`.
pub fn initial_model(exp: &Experiment, m: usize, p: f64) -> Result<LdbpModel> {
    let plan = build_dbp_plan(&exp.system.map, m, p, &exp.dbp)?;
    let mut model = init_from_dbp(&plan, exp.taps, exp.input_len, exp.output_len, 2.0 * exp.system.wdm.baud)?;
    if exp.untied {
        for l in &mut model.layers {
            l.taps_y = Some(l.taps_x.clone());
        }
    }
    Ok(model)
}

/// The nonlinear stages scale with the launch power like DBP does.
fn at_power(model: &LdbpModel, p: f64) -> LdbpModel {
    let mut m = model.clone();
    for l in &mut m.layers {
        l.power_scale = dbm_to_watt(p) / 2.0;
    }
    m
}

fn equalizer(exp: &Experiment, spec: EqualizerSpec, model: Option<LdbpModel>) -> Equalizer {
    match spec.kind {
        EqualizerKind::Linear => Equalizer::Linear,
        EqualizerKind::Dbp => Equalizer::Dbp { m: spec.steps, options: exp.dbp },
        EqualizerKind::PmdAwareDbp => Equalizer::PmdAwareDbp { m: spec.steps, options: exp.dbp },
        EqualizerKind::Ldbp => Equalizer::Ldbp(Box::new(model.expect("LDBP cells carry a model"))),
    }
}

fn dataset_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    d.write_to(&mut v)?;
    Ok(v)
}

fn pmd_for(exp: &Experiment, seed: u64) -> PmdRealization {
    exp.system.draw_pmd(seed)
}

fn datasets(exp: &Experiment, pmd: &PmdRealization, p: f64, seed: u64) -> dmldbp::Result<(Dataset, Dataset)> {
    let sys = &exp.system;
    let tag = exp.raw.data_tag(seed);
    let mut tr = generate_dataset(sys, p, pmd, exp.train_windows, exp.input_len, exp.output_len, SeedDomain::Train, seed)?;
    let mut va = generate_dataset(sys, p, pmd, exp.validation_windows, exp.input_len, exp.output_len, SeedDomain::Validation, seed)?;
    tr.tag = tag;
    va.tag = tag;
    Ok((tr, va))
}

#[derive(Serialize)]
struct LinkInfo<'a> {
    config_hash: String,
    seed: u64,
    launch_power_dbm: f64,
    sim_samples_per_symbol: usize,
    wavelength_m: f64,
    wdm: &'a dmldbp::transceiver::WdmConfig,
    map: &'a dmldbp::link::DispersionMap,
    /// The sampled PMD, as used by the PMD-aware equalizer.
    pmd: &'a PmdRealization,
}

fn simulate(exp: &Experiment, c: &Common) -> Result<()> {
    let start = Instant::now();
    let pmd = pmd_for(exp, c.seed);
    let p = exp.launch_power_dbm;
    let (tr, va) = datasets(exp, &pmd, p, c.seed)?;
    let mut out = Outputs::new(&c.out);
    out.bytes("train.bin", &dataset_bytes(&tr)?)?;
    out.bytes("validation.bin", &dataset_bytes(&va)?)?;
    let info = LinkInfo {
        config_hash: exp.raw.hash(),
        seed: c.seed,
        launch_power_dbm: p,
        sim_samples_per_symbol: exp.system.sim_sps,
        wavelength_m: exp.system.wavelength,
        wdm: &exp.system.wdm,
        map: &exp.system.map,
        pmd: &pmd,
    };
    out.json("link.json", &info)?;
    out.finish("simulate", &exp.raw.hash(), c.seed, &exp.raw.canonical())?;
    let mut t = Timings::default();
    t.push("simulate", start.elapsed().as_secs_f64());
    t.write(&c.out)
}

fn load_dataset(path: &Path, exp: &Experiment, seed: u64) -> Result<Dataset> {
    let d = Dataset::load(path).map_err(|e| match e {
        dmldbp::Error::Io(source) => CliError::Io { path: path.display().to_string(), source },
        e => CliError::Core(e),
    })?;
    if d.tag != exp.raw.data_tag(seed) {
        return Err(CliError::Config(format!(
            "{} was generated with a different link/data configuration or seed; rerun simulate",
            path.display()
        )));
    }
    Ok(d)
}

pub const TRAINING_HEADER: [&str; 7] = ["epoch", "train_loss", "val_loss", "val_q_db", "val_q_snr_db", "val_ber", "best"];

fn training_csv(o: &TrainOutcome) -> Csv {
    let mut csv = Csv::new(&TRAINING_HEADER);
    for s in &o.trace {
        csv.row(&[
            s.epoch.to_string(),
            num(s.train_loss),
            num(s.val_loss),
            num(s.val_q_db),
            num(s.val_q_snr_db),
            num(s.val_ber),
            u8::from(s.epoch == o.best_epoch).to_string(),
        ]);
    }
    csv
}

fn train_cmd(exp: &Experiment, c: &Common, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    if exp.equalizer.kind != EqualizerKind::Ldbp {
        return Err(CliError::Config("equalizer.kind: train needs the ldbp equalizer".into()));
    }
    let dir = data.unwrap_or(&c.out);
    let tr = load_dataset(&dir.join("train.bin"), exp, c.seed)?;
    let va = load_dataset(&dir.join("validation.bin"), exp, c.seed)?;
    let model = match resume {
        Some(path) => read_checkpoint(path)?,
        None => initial_model(exp, exp.equalizer.steps, exp.launch_power_dbm)?,
    };
    if (model.input_len, model.output_len) != (tr.input_len, tr.output_len) {
        return Err(CliError::Config(format!(
            "model windows {}/{} do not match the dataset's {}/{}",
            model.input_len, model.output_len, tr.input_len, tr.output_len
        )));
    }
    let cfg = dmldbp::ldbp::TrainConfig { seed: c.seed, ..exp.training };
    let outcome = train(&model, &tr.windows, &va.windows, &cfg)?;
    let mut out = Outputs::new(&c.out);
    out.bytes("checkpoint.json", outcome.model.to_json()?.as_bytes())?;
    out.csv("training.csv", &training_csv(&outcome))?;
    out.finish("train", &exp.raw.hash(), c.seed, &exp.raw.canonical())?;
    let mut t = Timings::default();
    t.push("train", start.elapsed().as_secs_f64());
    t.write(&c.out)
}

pub const RESULT_HEADER: [&str; 16] = [
    "equalizer",
    "steps",
    "convolutions",
    "launch_power_dbm",
    "ber",
    "q_db",
    "q_snr_db",
    "evm_db",
    "n_bits",
    "bit_errors",
    "q_clamped",
    "blocks",
    "sync_failures",
    "error_flag",
    "seed",
    "config_hash",
];

/// Blocks failing synchronization above this fraction flag the row.
const SYNC_FAILURE_LIMIT: f64 = 0.01;

fn result_row(csv: &mut Csv, spec: EqualizerSpec, p: f64, r: &std::result::Result<Evaluation, String>, seed: u64, hash: &str) {
    let convolutions = if spec.kind == EqualizerKind::Linear { 1 } else { spec.steps + 1 };
    let mut row = vec![spec.name().to_string(), spec.steps.to_string(), convolutions.to_string(), num(p)];
    match r {
        Ok(e) => {
            let m = &e.metrics;
            let flag = e.sync_failures as f64 > SYNC_FAILURE_LIMIT * e.blocks as f64;
            row.extend([
                num(m.ber),
                num(m.q_db),
                num(m.q_snr_db),
                num(m.evm_db),
                m.n_bits.to_string(),
                m.bit_errors.to_string(),
                u8::from(m.q_clamped).to_string(),
                e.blocks.to_string(),
                e.sync_failures.to_string(),
                u8::from(flag).to_string(),
            ]);
        }
        Err(_) => row.extend(["nan", "nan", "nan", "nan", "0", "0", "0", "0", "0", "1"].map(String::from)),
    }
    row.extend([seed.to_string(), hash.to_string()]);
    csv.row(&row);
}

fn constellation_csv(points: &[num_complex::Complex64]) -> Csv {
    let mut csv = Csv::new(&["re", "im"]);
    for z in points {
        csv.row(&[num(z.re), num(z.im)]);
    }
    csv
}

fn evaluate_cmd(exp: &Experiment, c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let spec = exp.equalizer;
    let model = match (spec.kind, checkpoint) {
        (EqualizerKind::Ldbp, Some(p)) => Some(read_checkpoint(p)?),
        (EqualizerKind::Ldbp, None) => return Err(CliError::Config("the ldbp equalizer needs --checkpoint".into())),
        _ => None,
    };
    let spec = match &model {
        Some(m) => EqualizerSpec { steps: m.m(), ..spec },
        None => spec,
    };
    let pmd = pmd_for(exp, c.seed);
    let hash = exp.raw.hash();
    let mut out = Outputs::new(&c.out);
    let mut rows = Csv::new(&RESULT_HEADER);
    let mut timings = Timings::default();
    let mut first_error = None;
    for &p in &exp.eval_powers {
        let start = Instant::now();
        let eq = equalizer(exp, spec, model.as_ref().map(|m| at_power(m, p)));
        let r = evaluate_many(&exp.system, std::slice::from_ref(&eq), p, &pmd, exp.test_blocks, c.seed, exp.constellation_points)
            .and_then(|mut v| v.remove(0));
        timings.push(cell_label(spec, p), start.elapsed().as_secs_f64());
        match r {
            Ok(e) => {
                if exp.constellation_points > 0 {
                    out.csv(&format!("constellation_{}.csv", cell_label(spec, p)), &constellation_csv(&e.constellation))?;
                }
                result_row(&mut rows, spec, p, &Ok(e), c.seed, &hash);
            }
            Err(e) => {
                log::error!("{}: {e}", cell_label(spec, p));
                result_row(&mut rows, spec, p, &Err(e.to_string()), c.seed, &hash);
                first_error.get_or_insert(e);
            }
        }
    }
    out.csv("results.csv", &rows)?;
    out.finish("evaluate", &hash, c.seed, &exp.raw.canonical())?;
    timings.write(&c.out)?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub const FAILURE_HEADER: [&str; 5] = ["equalizer", "steps", "launch_power_dbm", "exit_code", "message"];
pub const PEAK_HEADER: [&str; 6] = ["equalizer", "steps", "peak_power_dbm", "peak_q_db", "peak_q_snr_power_dbm", "peak_q_snr_db"];

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n', '"'], ";")
}

fn sweep(exp: &Experiment, c: &Common) -> Result<()> {
    if exp.sweep_powers.is_empty() || exp.sweep_equalizers.is_empty() {
        return Err(CliError::Config("sweep.powers and sweep.equalizers must be non-empty".into()));
    }
    let specs = &exp.sweep_equalizers;
    let pmd = pmd_for(exp, c.seed);
    let hash = exp.raw.hash();
    let mut out = Outputs::new(&c.out);
    let mut rows = Csv::new(&RESULT_HEADER);
    let mut failures = Csv::new(&FAILURE_HEADER);
    let mut timings = Timings::default();
    let mut results: Vec<Vec<Option<Evaluation>>> = vec![vec![]; specs.len()];
    let mut first_error: Option<CliError> = None;
    let mut fail = |failures: &mut Csv, spec: EqualizerSpec, p: f64, e: CliError| {
        log::error!("{}: {e}", cell_label(spec, p));
        failures.row(&[spec.name().to_string(), spec.steps.to_string(), num(p), e.exit_code().to_string(), sanitize(&e.to_string())]);
        first_error.get_or_insert(e);
    };

    for &p in &exp.sweep_powers {
        let start = Instant::now();
        // One dataset per power, shared by every LDBP depth.
        let data = if specs.iter().any(|s| s.kind == EqualizerKind::Ldbp) {
            Some(datasets(exp, &pmd, p, c.seed))
        } else {
            None
        };
        timings.push(format!("data_{}", power_label(p)), start.elapsed().as_secs_f64());

        let mut cells: Vec<(usize, Equalizer)> = Vec::new();
        for (i, &spec) in specs.iter().enumerate() {
            if spec.kind != EqualizerKind::Ldbp {
                cells.push((i, equalizer(exp, spec, None)));
                continue;
            }
            let start = Instant::now();
            let trained = match data.as_ref().expect("LDBP cells have data") {
                Err(e) => Err(CliError::Core(e.clone())),
                Ok((tr, va)) => initial_model(exp, spec.steps, p).and_then(|m| {
                    let cfg = dmldbp::ldbp::TrainConfig { seed: c.seed, ..exp.training };
                    Ok(train(&m, &tr.windows, &va.windows, &cfg)?)
                }),
            };
            timings.push(format!("train_{}", cell_label(spec, p)), start.elapsed().as_secs_f64());
            match trained {
                Ok(o) => {
                    out.bytes(&format!("checkpoint_{}.json", cell_label(spec, p)), o.model.to_json()?.as_bytes())?;
                    out.csv(&format!("training_{}.csv", cell_label(spec, p)), &training_csv(&o))?;
                    cells.push((i, equalizer(exp, spec, Some(o.model))));
                }
                Err(e) => {
                    fail(&mut failures, spec, p, e);
                    results[i].push(None);
                }
            }
        }

        let start = Instant::now();
        let eqs: Vec<Equalizer> = cells.iter().map(|(_, e)| e.clone()).collect();
        let evals = evaluate_many(&exp.system, &eqs, p, &pmd, exp.test_blocks, c.seed, exp.constellation_points);
        timings.push(format!("evaluate_{}", power_label(p)), start.elapsed().as_secs_f64());
        let evals: Vec<dmldbp::Result<Evaluation>> = match evals {
            Ok(v) => v,
            Err(e) => cells.iter().map(|_| Err(e.clone())).collect(),
        };
        let mut done = vec![false; specs.len()];
        for ((i, _), r) in cells.iter().zip(evals) {
            done[*i] = true;
            let spec = specs[*i];
            match r {
                Ok(e) => {
                    result_row(&mut rows, spec, p, &Ok(e.clone()), c.seed, &hash);
                    if exp.constellation_points > 0 {
                        out.csv(&format!("constellation_{}.csv", cell_label(spec, p)), &constellation_csv(&e.constellation))?;
                    }
                    results[*i].push(Some(e));
                }
                Err(e) => {
                    result_row(&mut rows, spec, p, &Err(e.to_string()), c.seed, &hash);
                    fail(&mut failures, spec, p, e.into());
                    results[*i].push(None);
                }
            }
        }
        for (i, d) in done.iter().enumerate() {
            if !d {
                result_row(&mut rows, specs[i], p, &Err(String::new()), c.seed, &hash);
            }
        }
    }

    let mut peaks = Csv::new(&PEAK_HEADER);
    for (i, &spec) in specs.iter().enumerate() {
        let cells: Vec<(f64, &Evaluation)> =
            exp.sweep_powers.iter().zip(&results[i]).filter_map(|(&p, e)| e.as_ref().map(|e| (p, e))).collect();
        let best = |key: fn(&Evaluation) -> f64| {
            cells.iter().fold(None::<(f64, f64)>, |acc, &(p, e)| match acc {
                Some((_, q)) if q >= key(e) => acc,
                _ => Some((p, key(e))),
            })
        };
        let (Some(q), Some(s)) = (best(|e| e.metrics.q_db), best(|e| e.metrics.q_snr_db)) else {
            continue;
        };
        peaks.row(&[spec.name().to_string(), spec.steps.to_string(), num(q.0), num(q.1), num(s.0), num(s.1)]);
    }

    out.csv("sweep.csv", &rows)?;
    out.csv("failures.csv", &failures)?;
    out.csv("peaks.csv", &peaks)?;
    out.finish("sweep", &hash, c.seed, &exp.raw.canonical())?;
    timings.write(&c.out)?;
    let all_failed = results.iter().all(|r| r.iter().all(Option::is_none));
    match first_error {
        Some(e) if all_failed => Err(e),
        _ => Ok(()),
    }
}
