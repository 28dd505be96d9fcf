use circuitscope::stats::{
    bonferroni, bootstrap_ci, cohens_d, ks_test, power_two_sample, welch_t_test, SampleSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(label: &str, rng: &mut ChaCha8Rng, n: usize, mean: f64) -> SampleSet {
    SampleSet::new(label, (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Fraction of 1,000 same-distribution replications with `p < 0.05`.
fn null_rejection_rate() -> f64 {
    let mut hits = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian("a", &mut rng, 30, 0.0);
        let b = gaussian("b", &mut rng, 30, 0.0);
        if welch_t_test(&a, &b).unwrap().p < 0.05 {
            hits += 1;
        }
    }
    hits as f64 / 1000.0
}

#[test]
fn welch_is_calibrated_under_the_null() {
    let rate = null_rejection_rate();
    assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
}

#[test]
fn bootstrap_interval_covers_zero_difference() {
    let mut covered = 0;
    for rep in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + rep);
        let a = gaussian("a", &mut rng, 100, 0.0);
        let b = gaussian("b", &mut rng, 100, 0.0);
        let (lo, hi) = bootstrap_ci(&a, &b, 10_000, 0.95, rep).unwrap();
        if lo <= 0.0 && 0.0 <= hi {
            covered += 1;
        }
    }
    assert!(covered >= 186, "covered {covered} of 200");
}

#[test]
fn cohens_d_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gaussian("a", &mut rng, 40, 0.0);
    let b = gaussian("b", &mut rng, 55, 0.7);
    let d = cohens_d(&a, &b).unwrap().d;
    // Shifts large relative to the scaled spread lose precision when the
    // transformed samples are formed, before cohens_d ever sees them.
    for (alpha, beta) in [(2.5, -3.0), (0.125, 40.0), (7.0, 0.5), (1e3, -1e4)] {
        let map = |s: &SampleSet| SampleSet::new("x", s.values().iter().map(|v| alpha * v + beta).collect()).unwrap();
        let d2 = cohens_d(&map(&a), &map(&b)).unwrap().d;
        assert!((d - d2).abs() < 1e-12, "alpha={alpha} beta={beta}: {d} vs {d2}");
    }
}

#[test]
fn welch_antisymmetry_and_ks_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (na, nb) = (rng.random_range(2..40), rng.random_range(2..40));
        let a = gaussian("a", &mut rng, na, 0.0);
        let b = gaussian("b", &mut rng, nb, 0.3);
        let (ab, ba) = (welch_t_test(&a, &b).unwrap(), welch_t_test(&b, &a).unwrap());
        assert_eq!(ab.statistic, -ba.statistic);
        assert_eq!(ab.p, ba.p);
        let ks = ks_test(&a, &b);
        assert!((0.0..=1.0).contains(&ks.statistic));
        assert_eq!(ks_test(&a, &a).statistic, 0.0);
    }
}

#[test]
fn power_grid_is_monotone() {
    let ds = [0.1, 0.2, 0.5, 0.8, 1.2];
    let ns = [5, 10, 30, 100, 300];
    for (i, &d) in ds.iter().enumerate() {
        for (j, &n) in ns.iter().enumerate() {
            let p = power_two_sample(d, n, 0.05).unwrap();
            if i > 0 {
                assert!(p > power_two_sample(ds[i - 1], n, 0.05).unwrap());
            }
            if j > 0 {
                assert!(p > power_two_sample(d, ns[j - 1], 0.05).unwrap());
            }
        }
    }
}

#[test]
fn bonferroni_never_lowers_and_preserves_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps: Vec<f64> = (0..20).map(|_| rng.random::<f64>().powi(3)).collect();
    let adj = bonferroni(&ps);
    for (i, (&p, &q)) in ps.iter().zip(&adj).enumerate() {
        assert!(q >= p && q <= 1.0);
        for (&p2, &q2) in ps.iter().zip(&adj).skip(i + 1) {
            if p < p2 {
                assert!(q <= q2);
            }
        }
    }
}
