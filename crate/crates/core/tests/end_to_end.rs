use dmldbp::dbp::{build_dbp_plan, build_mirror_plan, dbp_equalize, DbpOptions};
use dmldbp::ldbp::{init_from_dbp, LdbpModel};
use dmldbp::link::{propagate_link, DispersionMap, FiberParams, SpanConfig, SsfmConfig, TerminalElement};
use dmldbp::pipeline::*;
use dmldbp::pmd::PmdRealization;
use dmldbp::transceiver::{SeedDomain, WdmConfig};
use dmldbp::units::DEFAULT_WAVELENGTH;
use dmldbp::{Complex64, DualPolField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn span(gamma: bool, pmd_ps_sqrt_km: f64) -> SpanConfig {
    let (mut smf, mut dcf) = (FiberParams::smf(), FiberParams::dcf());
    if !gamma {
        smf.gamma_per_w_km = 0.0;
        dcf.gamma_per_w_km = 0.0;
    }
    smf.pmd_ps_sqrt_km = pmd_ps_sqrt_km;
    SpanConfig::loss_matched(smf, dcf, None)
}

fn system(map: DispersionMap) -> System {
    System {
        map,
        ssfm: SsfmConfig { steps_smf: 4, steps_dcf: 1, ..SsfmConfig::default() },
        wdm: WdmConfig { n_channels: 1, ..WdmConfig::paper_default() },
        sim_sps: 4,
        wavelength: DEFAULT_WAVELENGTH,
        pmd: PmdSettings { enabled: true, ..PmdSettings::default() },
        mimo: MimoSettings::default(),
        block_symbols: 8192,
        max_lag: 16,
    }
}

fn rel_rms(a: &DualPolField, b: &DualPolField) -> f64 {
    let err: f64 = a.x.iter().zip(&b.x).chain(a.y.iter().zip(&b.y)).map(|(p, q)| (p - q).norm_sqr()).sum();
    (err / b.energy()).sqrt()
}

#[test]
fn mirror_plan_undoes_nonlinear_link_with_pmd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut map = DispersionMap::closing(-600.0, vec![span(true, 0.5); 2]);
    map.terminal = TerminalElement::Physical;
    let pmd = PmdRealization::draw(&map, 6, 0, &mut rng);
    assert!(!pmd.is_trivial());
    let n = 2048;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Complex64> {
        (0..n).map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.15).collect()
    };
    let tx = DualPolField::new(draw(&mut rng), draw(&mut rng), 128e9).unwrap();
    let ssfm = SsfmConfig { steps_smf: 8, steps_dcf: 2, ..SsfmConfig::default() };
    let rx = propagate_link(&tx, &map, &ssfm, &pmd, DEFAULT_WAVELENGTH, &mut rng).unwrap();
    assert!(rel_rms(&rx, &tx) > 0.1);
    let out = dbp_equalize(&rx, &build_mirror_plan(&map, &ssfm, &pmd, DEFAULT_WAVELENGTH).unwrap()).unwrap();
    assert!(rel_rms(&out, &tx) < 1e-9, "{}", rel_rms(&out, &tx));
}

#[test]
fn matched_evaluation_shares_test_blocks() {
    let sys = system(DispersionMap::closing(-1224.0, vec![span(true, 0.1); 1]));
    let pmd = sys.draw_pmd(5);
    let eqs = [Equalizer::Linear, Equalizer::Dbp { m: 1, options: DbpOptions::default() }, Equalizer::Linear];
    let many = evaluate_many(&sys, &eqs, 2.0, &pmd, 2, 8, 16).unwrap();
    let (a, b) = (many[0].as_ref().unwrap(), many[2].as_ref().unwrap());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.constellation, b.constellation);
    let alone = evaluate(&sys, &eqs[1], 2.0, &pmd, 2, 8, 16).unwrap();
    assert_eq!(many[1].as_ref().unwrap().metrics, alone.metrics);
    assert_eq!(a.blocks, 2);
}

#[test]
fn pmd_aware_receiver_on_linear_pmd_link_is_error_free() {
    let sys = system(DispersionMap::closing(-1224.0, vec![span(false, 1.0); 2]));
    let pmd = sys.draw_pmd(2);
    assert!(pmd.total_dgd() > 5e-12);
    let eqs = [Equalizer::Linear, Equalizer::PmdAwareDbp { m: 2, options: DbpOptions::default() }];
    let out = evaluate_many(&sys, &eqs, 0.0, &pmd, 1, 4, 0).unwrap();
    let (linear, genie) = (out[0].as_ref().unwrap(), out[1].as_ref().unwrap());
    assert_eq!(linear.metrics.bit_errors, 0);
    assert!(linear.metrics.evm_db < -25.0, "{}", linear.metrics.evm_db);
    // Exact inversion leaves the adaptive stage nothing to correct.
    assert_eq!(genie.metrics.bit_errors, 0);
    assert!(genie.metrics.evm_db < -100.0, "{}", genie.metrics.evm_db);
}

#[test]
fn dataset_and_checkpoint_round_trip_bit_exactly() {
    let sys = system(DispersionMap::closing(-1224.0, vec![span(true, 0.1); 1]));
    let pmd = sys.draw_pmd(1);
    let ds = generate_dataset(&sys, 1.0, &pmd, 6, 128, 96, SeedDomain::Train, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    ds.save(&path).unwrap();
    assert_eq!(dmldbp::ldbp::Dataset::load(&path).unwrap(), ds);

    let plan = build_dbp_plan(&sys.map, 2, 1.0, &DbpOptions::default()).unwrap();
    let model = init_from_dbp(&plan, 21, 128, 96, ds.sample_rate).unwrap();
    let json = model.to_json().unwrap();
    let back = LdbpModel::from_json(&json).unwrap();
    let bits = |m: &LdbpModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&model));
    assert_eq!(back.to_json().unwrap(), json);
}
