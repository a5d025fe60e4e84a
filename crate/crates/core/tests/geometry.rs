use dnpr_core::geometry::*;
use proptest::prelude::*;
use statrs::function::gamma::gamma;

/// Mean nearest-neighbour distance of a Poisson process of density `rho`.
fn poisson_nn_mean(rho: f64) -> f64 {
    gamma(4.0 / 3.0) * (4.0 * std::f64::consts::PI * rho / 3.0).powf(-1.0 / 3.0)
}

fn poisson_nn_cdf(rho: f64, d: f64) -> f64 {
    1.0 - (-4.0 * std::f64::consts::PI * rho * d.powi(3) / 3.0).exp()
}

fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn fixed_seed_is_bit_identical() {
    let spec = DefectEnsembleSpec::default().with_seed(42);
    assert_eq!(
        sample_ensemble(&spec).unwrap(),
        sample_ensemble(&spec).unwrap()
    );
    assert_ne!(
        sample_ensemble(&spec).unwrap(),
        sample_ensemble(&spec.clone().with_seed(43)).unwrap()
    );
}

#[test]
fn counts_are_poisson_consistent() {
    let spec = DefectEnsembleSpec {
        box_edge_nm: Some(20.0),
        target_count: None,
        ..Default::default()
    };
    let expect = spec.expected_count();
    let counts: Vec<f64> = (0..100u64)
        .map(|s| sample_ensemble(&spec.clone().with_seed(s)).unwrap().len() as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / 100.0;
    // sigma of the mean of 100 Poisson draws
    let sigma = (expect / 100.0).sqrt();
    assert!((mean - expect).abs() < 3.0 * sigma, "{mean} vs {expect}");
}

#[test]
fn doubling_volume_doubles_expected_count() {
    let a = DefectEnsembleSpec {
        box_edge_nm: Some(20.0),
        target_count: None,
        ..Default::default()
    };
    let b = DefectEnsembleSpec {
        box_edge_nm: Some(20.0 * 2f64.cbrt()),
        ..a.clone()
    };
    assert!((b.expected_count() / a.expected_count() - 2.0).abs() < 1e-12);
}

#[test]
fn nearest_neighbour_distances_follow_poisson_law() {
    let spec = DefectEnsembleSpec::with_concentrations(50.0, 10.0).with_seed(7);
    let d = nn_distances(&spec, 10_000).unwrap();
    let rho = spec.p1_density();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!(
        (mean / poisson_nn_mean(rho) - 1.0).abs() < 0.02,
        "{mean} vs {}",
        poisson_nn_mean(rho)
    );
    let ks = ks_distance(&d, |x| poisson_nn_cdf(rho, x));
    assert!(ks < 0.02, "KS = {ks}");
}

#[test]
fn mean_distance_scales_with_cube_root_of_density() {
    let a =
        nn_distance_stats(&DefectEnsembleSpec::with_concentrations(50.0, 10.0), 10_000).unwrap();
    let b = nn_distance_stats(
        &DefectEnsembleSpec::with_concentrations(100.0, 20.0),
        10_000,
    )
    .unwrap();
    assert!((b.mean_nm / a.mean_nm / 2f64.powf(-1.0 / 3.0) - 1.0).abs() < 0.03);
    assert!(a.histogram.bin_hi[0] - a.histogram.bin_lo[0] <= 0.2);
    assert!(a.stderr_nm > 0.0 && a.stderr_nm < 0.05);
}

#[test]
fn close_pairs_dominate_mean_coupling() {
    let c = coupling_stats(&DefectEnsembleSpec::default(), 10_000, None).unwrap();
    assert!(c.mean_mhz > 2.0 * c.at_mean_distance_mhz, "{c:?}");
    assert!(c.median_mhz < c.mean_mhz);
}

/// Independent O(N²) implementation of the cluster rule.
fn brute_cluster(e: &Ensemble, nv: usize, f: f64, floor: f64) -> usize {
    let j = |a: usize, b: usize| coupling_magnitude_mhz(e.distance(a, b), floor);
    let p1 = e
        .indices(Defect::P1)
        .min_by(|&a, &b| {
            e.distance(nv, a)
                .total_cmp(&e.distance(nv, b))
                .then(a.cmp(&b))
        })
        .unwrap();
    let jd = j(nv, p1);
    let mut members = vec![nv, p1];
    loop {
        let mut best: Option<(usize, f64)> = None;
        'cand: for c in 0..e.len() {
            if members.contains(&c) {
                continue;
            }
            let mut weakest = f64::INFINITY;
            for &m in &members {
                let v = j(c, m);
                if v <= f * jd || (e.species[c] != e.species[m] && v > jd) {
                    continue 'cand;
                }
                weakest = weakest.min(v);
            }
            if best.is_none_or(|(_, w)| weakest > w) {
                best = Some((c, weakest));
            }
        }
        match best {
            Some((c, _)) => members.push(c),
            None => return members.len(),
        }
    }
}

#[test]
fn cluster_growth_matches_brute_force() {
    let spec = DefectEnsembleSpec {
        target_count: Some(400.0),
        ..DefectEnsembleSpec::with_concentrations(50.0, 10.0)
    };
    let rule = ClusterRule::default();
    for seed in 0..5 {
        let e = sample_ensemble(&spec.clone().with_seed(seed)).unwrap();
        for nv in e.indices(Defect::Nv) {
            assert_eq!(
                cluster_size(&e, nv, &rule).unwrap(),
                brute_cluster(&e, nv, rule.threshold_fraction, rule.floor_nm),
                "seed {seed} nv {nv}"
            );
        }
    }
}

#[test]
fn pairs_dominate_at_reference_concentration() {
    let pmf = cluster_distribution(
        &DefectEnsembleSpec::with_concentrations(50.0, 10.0),
        &ClusterRule::default(),
        5000,
    )
    .unwrap();
    assert_eq!(pmf.mode(), 2);
    let total: f64 = pmf.pmf.iter().map(|x| x.1).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn unit_threshold_admits_only_the_seed_pair() {
    let rule = ClusterRule {
        threshold_fraction: 1.0,
        ..Default::default()
    };
    let pmf = cluster_distribution(&DefectEnsembleSpec::default(), &rule, 5000).unwrap();
    assert_eq!(pmf.probability(2), 1.0);
}

#[test]
fn relative_threshold_makes_pmf_scale_free() {
    // with a fixed P1:NV ratio and every distance scaled by the same factor,
    // cluster membership is unchanged
    let rule = ClusterRule::default();
    let a = cluster_distribution(
        &DefectEnsembleSpec::with_concentrations(50.0, 10.0),
        &rule,
        5000,
    )
    .unwrap();
    let b = cluster_distribution(
        &DefectEnsembleSpec::with_concentrations(0.5, 0.1),
        &rule,
        5000,
    )
    .unwrap();
    assert_eq!(a.pmf, b.pmf);
}

#[test]
fn distance_curve_has_cube_root_slope() {
    let ppm = [1.0, 3.0, 10.0, 30.0, 100.0, 200.0];
    let curve =
        mean_distance_vs_concentration(&DefectEnsembleSpec::default(), &ppm, 5.0, 5000).unwrap();
    assert!(curve.mean_d_nm.windows(2).all(|w| w[1] < w[0]));
    let x: Vec<f64> = ppm.iter().map(|p| p.ln()).collect();
    let y: Vec<f64> = curve.mean_d_nm.iter().map(|d| d.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 6.0, y.iter().sum::<f64>() / 6.0);
    let slope = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope / (-1.0 / 3.0) - 1.0).abs() < 0.05, "slope {slope}");
    let again =
        mean_distance_vs_concentration(&DefectEnsembleSpec::default(), &ppm, 5.0, 5000).unwrap();
    assert_eq!(curve, again);
    assert!(curve.to_csv().starts_with("ppm,mean_d_nm,stderr_nm\n"));
}

#[test]
fn rejects_invalid_curves() {
    let b = DefectEnsembleSpec::default();
    assert!(mean_distance_vs_concentration(&b, &[10.0, 5.0], 5.0, 100).is_err());
    assert!(mean_distance_vs_concentration(&b, &[], 5.0, 100).is_err());
    assert!(cluster_distribution(
        &b,
        &ClusterRule {
            threshold_fraction: 0.0,
            ..Default::default()
        },
        10
    )
    .is_err());
}

proptest! {
    #[test]
    fn minimum_image_is_symmetric_and_bounded(
        a in prop::array::uniform3(0.0f64..10.0),
        b in prop::array::uniform3(0.0f64..10.0),
    ) {
        let d = min_image_distance(&a, &b, 10.0);
        prop_assert_eq!(d, min_image_distance(&b, &a, 10.0));
        prop_assert!(d <= 10.0 * 3f64.sqrt() / 2.0 + 1e-12);
    }

    #[test]
    fn realizations_are_reproducible(seed in any::<u64>(), index in 0u64..1000) {
        let spec = DefectEnsembleSpec { target_count: Some(200.0), ..Default::default() }.with_seed(seed);
        prop_assert_eq!(sample_realization(&spec, index).unwrap(), sample_realization(&spec, index).unwrap());
    }
}
