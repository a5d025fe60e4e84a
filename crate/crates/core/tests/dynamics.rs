use dnpr_core::dynamics::*;
use dnpr_core::motif::{find_motifs, MotifOptions};
use dnpr_core::presets::ClusterPreset;
use dnpr_core::spectra::{eigenlevels, lac_gaps, trio_manifold_start};
use dnpr_core::spinsys::{Coupling, Spin, SpinSpecies, SpinSystemSpec};
use dnpr_core::C64;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn trio() -> SpinSystemSpec {
    ClusterPreset::trio().build().unwrap()
}

/// Spin 1 (D = 10 MHz, slope +1 MHz/mT) and spin 1/2 (slope -2 MHz/mT) with a
/// flip-flop coupling: |-1, up> and |0, down> cross at 10/3 mT with gap 2c and
/// a relative slope of 3 MHz/mT.
fn lz_toy(c: f64) -> SpinSystemSpec {
    let a = SpinSpecies {
        label: "A".into(),
        spin: Spin::One,
        gamma: -1.0,
        zero_field: Some(10.0),
        axis: None,
    };
    let b = SpinSpecies {
        label: "B".into(),
        spin: Spin::Half,
        gamma: 2.0,
        zero_field: None,
        axis: None,
    };
    let j = c * 2f64.sqrt();
    SpinSystemSpec {
        species: vec![a, b],
        couplings: vec![Coupling::new(
            0,
            1,
            Matrix3::from_diagonal(&Vector3::new(j, j, 0.0)),
        )],
        theta_deg: 0.0,
        phi_deg: 0.0,
    }
}

const TOY_SLOPE_MHZ_PER_MT: f64 = 3.0;
const TOY_CROSSING_MT: f64 = 10.0 / 3.0;
/// Basis index of |m_A = -1, m_B = +1/2>.
const TOY_START: usize = 4;

/// Eigenvector of `H(b)` closest to basis state `k`.
fn branch_of(spec: &SpinSystemSpec, b: f64, k: usize) -> Vec<C64> {
    let e = eigenlevels(&spec.build_hamiltonian(b).unwrap()).unwrap();
    let j = (0..e.values.len())
        .max_by(|&x, &y| {
            e.vectors[(k, x)]
                .norm_sqr()
                .total_cmp(&e.vectors[(k, y)].norm_sqr())
        })
        .unwrap();
    e.vectors.column(j).iter().copied().collect()
}

/// Diabatic survival probability after sweeping the toy up through its
/// crossing, measured in the eigenbasis at both ends.
fn toy_survival(c: f64, rate_mt_per_ms: f64, half_width_mt: f64) -> f64 {
    let spec = lz_toy(c);
    let (b0, b1) = (
        TOY_CROSSING_MT - half_width_mt,
        TOY_CROSSING_MT + half_width_mt,
    );
    let rho = DensityMatrix::pure(&branch_of(&spec, b0, TOY_START)).unwrap();
    let traj = FieldTrajectory::ramp(b0, b1, (b1 - b0) / rate_mt_per_ms).unwrap();
    let out = propagate(&rho, &spec, &traj, &StepControl::default()).unwrap();
    let end = nalgebra::DVector::from_vec(branch_of(&spec, b1, TOY_START));
    (end.adjoint() * out.final_state().matrix() * &end)[(0, 0)].re
}

/// Landau-Zener survival in cyclic units: `exp(-4π² c² / v)`, `v` in MHz/µs.
fn lz_formula(c: f64, rate_mt_per_ms: f64) -> f64 {
    let v = TOY_SLOPE_MHZ_PER_MT * rate_mt_per_ms * 1e-3;
    (-4.0 * std::f64::consts::PI.powi(2) * c * c / v).exp()
}

/// Rate giving survival `p` for coupling `c`.
fn rate_for(c: f64, p: f64) -> f64 {
    let v = 4.0 * std::f64::consts::PI.powi(2) * c * c / (-p.ln());
    v / (TOY_SLOPE_MHZ_PER_MT * 1e-3)
}

#[test]
fn landau_zener_midrange() {
    let c = 0.02;
    let r = rate_for(c, 0.5);
    let p = toy_survival(c, r, 0.5);
    assert!((p / lz_formula(c, r) - 1.0).abs() < 0.02, "{p}");
}

#[test]
fn pure_states_stay_pure_without_reset() {
    let spec = trio();
    let psi: Vec<C64> = (0..12)
        .map(|k| C64::new((k as f64).cos(), 0.1 * k as f64))
        .collect();
    let rho = DensityMatrix::pure(&psi).unwrap();
    let traj = FieldTrajectory::ramp(50.8, 51.6, 2.0).unwrap();
    let ctrl = StepControl {
        record_interval_ms: Some(0.5),
        ..Default::default()
    };
    let out = propagate(&rho, &spec, &traj, &ctrl).unwrap();
    assert!(out.samples.len() >= 5);
    for s in &out.samples {
        assert!((s.state.purity() - 1.0).abs() < 1e-8);
    }
    assert!(out.health.is_healthy(1e-9));
}

#[test]
fn maximally_mixed_reset_pumps_only_the_nv() {
    let spec = trio();
    let r = optical_reset(&DensityMatrix::maximally_mixed(12), &spec.dims(), 0).unwrap();
    assert_eq!(r.matrix(), pumped_state(&spec, 0).unwrap().matrix());
    assert_eq!(carbon_polarization(&r, &spec, 2).unwrap(), 0.0);
}

#[test]
fn very_slow_passage_of_the_inner_gap_is_adiabatic() {
    let spec = trio();
    let r = lac_gaps(&spec, (50.8, 51.6), trio_manifold_start(&spec)).unwrap();
    let b = r.delta1.unwrap().field_mt;
    let seg = SweepSegment::new((b - 0.05, b + 0.05), 0.001, Direction::Up).unwrap();
    let p = single_sweep_polarization(&spec, &seg, &SweepOptions::default())
        .unwrap()
        .p;
    assert!(p.abs() < 0.01, "{p}");
}

#[test]
fn up_sweep_at_reference_rate_is_positive() {
    let spec = trio();
    let o = SweepOptions::default();
    let up = single_sweep_polarization(
        &spec,
        &SweepSegment::new((50.8, 51.6), 0.26, Direction::Up).unwrap(),
        &o,
    )
    .unwrap();
    let dn = single_sweep_polarization(
        &spec,
        &SweepSegment::new((50.8, 51.6), 0.26, Direction::Down).unwrap(),
        &o,
    )
    .unwrap();
    assert!(up.p > 0.0 && dn.p < 0.0, "{} {}", up.p, dn.p);
    assert!((up.p / -dn.p - 1.0).abs() < 0.1);
    assert_eq!(up.trajectory.len(), o.trajectory_points);
}

#[test]
fn rate_scan_limits() {
    let rates: Vec<f64> = (0..9)
        .map(|i| 0.01 * 10f64.powf(i as f64 * 3.0 / 8.0))
        .collect();
    let scan = rate_scan(
        &trio(),
        (50.8, 51.6),
        &rates,
        Direction::Up,
        &SweepOptions::default(),
    )
    .unwrap();
    let peak = scan.p.iter().fold(0f64, |m, p| m.max(p.abs()));
    let opt = scan.argmax();
    assert!(opt < 1.0, "{opt}");
    // slowest rate is adiabatic, the fastest is 100x past the optimum
    assert!(scan.p[0].abs() < 0.1 * peak, "{:?}", scan.p);
    assert!(scan.p[8].abs() < 0.5 * peak, "{:?}", scan.p);
    assert!(scan.to_csv().starts_with("rate_mT_per_ms,P\n"));
    assert!(rate_scan(
        &trio(),
        (50.8, 51.6),
        &rates[..4],
        Direction::Up,
        &SweepOptions::default()
    )
    .is_err());
}

fn fig2_protocol(t_lh: f64) -> ProtocolSpec {
    let sweep = FieldSweepSpec {
        b_center_mt: 51.2,
        delta_b_mt: 6.0,
        t_lh_ms: t_lh,
        t_hl_ms: 20.3 - t_lh,
        n_cycles: None,
        start_direction: Direction::Up,
    };
    ProtocolSpec::new(trio(), sweep)
}

#[test]
fn buildup_protocols() {
    let slow_up = multi_cycle_protocol(&fig2_protocol(20.3 * 10.0 / 11.0)).unwrap();
    let slow_down = multi_cycle_protocol(&fig2_protocol(20.3 / 11.0)).unwrap();
    let equal = multi_cycle_protocol(&fig2_protocol(10.15)).unwrap();
    assert!(slow_up.final_p() > 0.0 && slow_down.final_p() < 0.0);
    assert!(slow_up.p.windows(2).all(|w| w[1] >= w[0]));
    let tau = slow_up.tau_ms.unwrap();
    assert!((2500.0..10_000.0).contains(&tau), "{tau}");
    assert!(equal.final_p().abs() <= 1e-3);
    assert_eq!(slow_up.p.len(), (10_000.0 / 20.3f64).floor() as usize + 1);
    assert!(slow_up.to_csv().starts_with("t_ms,P\n"));
}

#[test]
fn spectrum_vanishes_far_from_matching() {
    let spec = ClusterPreset::quartet().build().unwrap();
    let s = dnp_spectrum(
        &spec,
        &[30.0, 40.0, 62.0, 70.0],
        &SpectrumOptions::default(),
    )
    .unwrap();
    assert!(s.p.iter().all(|p| p.abs() <= 1e-3), "{:?}", s.p);
    assert!(s.health.is_healthy(1e-9));
    assert!(s.to_csv("B0_mT").starts_with("B0_mT,P\n"));
}

#[test]
fn spectrum_motifs_are_antisymmetric() {
    let spec = ClusterPreset::quartet().build().unwrap();
    let fields: Vec<f64> = (0..=4000).map(|i| 46.0 + 0.0025 * i as f64).collect();
    let s = dnp_spectrum(&spec, &fields, &SpectrumOptions::default()).unwrap();
    let motifs = find_motifs(&s.fields_mt, &s.p, &MotifOptions::default()).unwrap();
    assert_eq!(motifs.len(), 3, "{motifs:?}");
    let mut centres = matching_fields(&spec).unwrap();
    centres.sort_by(f64::total_cmp);
    for (m, b) in motifs.iter().zip(centres) {
        assert!((m.center_mt - b).abs() < 0.05, "{m:?} vs {b}");
        assert!(m.mirror_asymmetry < 0.15, "{m:?}");
    }
}

#[test]
fn range_scan_follows_sweep_direction() {
    let spec = ClusterPreset::quartet().build().unwrap();
    let opts = RangeScanOptions {
        n_cycles: 1,
        ..Default::default()
    };
    let up = sweep_range_scan(&spec, 46.0, &[0.0, 0.3, 10.0], Direction::Up, &opts).unwrap();
    let down = sweep_range_scan(&spec, 56.0, &[0.0, 0.3, 10.0], Direction::Down, &opts).unwrap();
    for s in [&up, &down] {
        assert_eq!(s.p[0], 0.0);
        assert!(s.p[1].abs() < 1e-4);
        assert!(s.health.is_healthy(1e-9));
    }
    assert!(up.p[2] > 0.0 && down.p[2] < 0.0, "{:?} {:?}", up.p, down.p);
    assert!(up.to_csv("deltaB_mT").starts_with("deltaB_mT,P\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn landau_zener_survival_matches_formula(c in 0.005f64..0.03, p in 0.1f64..0.9) {
        let r = rate_for(c, p);
        let got = toy_survival(c, r, 0.5);
        prop_assert!((got / p - 1.0).abs() < 0.02, "c {} p {} got {}", c, p, got);
    }

    #[test]
    fn reset_keeps_carbon_marginal(re in prop::collection::vec(-1.0f64..1.0, 12), im in prop::collection::vec(-1.0f64..1.0, 12)) {
        let spec = trio();
        let psi: Vec<C64> = re.iter().zip(&im).map(|(a, b)| C64::new(*a, *b)).collect();
        prop_assume!(psi.iter().map(|z| z.norm_sqr()).sum::<f64>() > 1e-3);
        let rho = DensityMatrix::pure(&psi).unwrap();
        let reset = optical_reset(&rho, &spec.dims(), 0).unwrap();
        let h = reset.health();
        prop_assert!(h.is_healthy(1e-9));
        let d = carbon_polarization(&rho, &spec, 2).unwrap() - carbon_polarization(&reset, &spec, 2).unwrap();
        prop_assert!(d.abs() < 1e-12);
    }
}
