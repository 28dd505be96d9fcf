use circuitscope::faces::{build_dataset, load_external_images, save_png, DatasetConfig, RenderStyle};
use circuitscope::metrics::{
    attention_entropy, binned_entropy, divergence, feature_complexity, information_flow_efficiency, max_entropy,
    mutual_information, AttentionMap, EntropyNormalization,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Direct plug-in sum `p(x,y) log2(p(x,y) / (p(x) p(y)))` with its own binning.
fn mi_oracle(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let bin = |v: &[f64]| -> Vec<usize> {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|&a| (((a - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1))
            .collect()
    };
    let (bx, by) = (bin(x), bin(y));
    let n = x.len() as f64;
    let mut joint = std::collections::HashMap::new();
    let (mut px, mut py) = (vec![0.0; bins], vec![0.0; bins]);
    for (&i, &j) in bx.iter().zip(&by) {
        *joint.entry((i, j)).or_insert(0.0) += 1.0 / n;
        px[i] += 1.0 / n;
        py[j] += 1.0 / n;
    }
    joint.iter().map(|(&(i, j), &p)| p * (p / (px[i] * py[j])).log2()).sum()
}

#[test]
fn mi_of_a_variable_with_itself_is_its_binned_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [64, 1000, 20_000] {
        let x = normals(&mut rng, n);
        for bins in [8, 64] {
            let h = binned_entropy(&x, bins).unwrap();
            assert_eq!(mutual_information(&x, &x, bins).unwrap(), h);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            assert!((mutual_information(&x, &neg, bins).unwrap() - h).abs() < 1e-9);
        }
    }
}

#[test]
fn mi_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rho in [0.0, 0.3, 0.9] {
        let x = normals(&mut rng, 5000);
        let y: Vec<f64> = x
            .iter()
            .map(|&a| rho * a + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mi = mutual_information(&x, &y, 32).unwrap();
        assert!((mi - mi_oracle(&x, &y, 32)).abs() < 1e-9, "rho={rho}");
        assert!(mi >= 0.0);
    }
}

#[test]
fn independent_samples_have_small_mi_and_ife() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    assert!(mutual_information(&x, &y, 64).unwrap() < 0.05);
    assert!(information_flow_efficiency(&x, &y, 64).unwrap() < 0.05);
}

#[test]
fn ife_identity_symmetry_and_partial_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = normals(&mut rng, 20_000);
    let same = information_flow_efficiency(&x, &x, 64).unwrap();
    assert!((same - 1.0).abs() < 1e-9);
    let y = normals(&mut rng, 20_000);
    let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 0.5 * b).collect();
    assert_eq!(
        information_flow_efficiency(&x, &mixed, 64).unwrap(),
        information_flow_efficiency(&mixed, &x, 64).unwrap()
    );
    let clipped: Vec<f64> = x.iter().map(|v| v.clamp(-0.3, 0.3)).collect();
    let partial = information_flow_efficiency(&x, &clipped, 64).unwrap();
    let independent = information_flow_efficiency(&x, &y, 64).unwrap();
    assert!(partial > independent && partial < same, "{independent} < {partial} < {same}");
}

fn random_map(rng: &mut ChaCha8Rng, q: usize, k: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(q * k);
    for _ in 0..q {
        let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|v| v / s));
    }
    w
}

#[test]
fn entropy_is_invariant_to_key_permutation_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (q, k) = (rng.random_range(1..20), rng.random_range(2..40));
        let w = random_map(&mut rng, q, k);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f64> = w.chunks(k).flat_map(|r| perm.iter().map(move |&j| r[j])).collect();
        let a = AttentionMap::new(q, k, w).unwrap();
        let b = AttentionMap::new(q, k, shuffled).unwrap();
        for norm in [EntropyNormalization::Joint, EntropyNormalization::PerRow] {
            let h = attention_entropy(&a, norm);
            assert_eq!(h, attention_entropy(&b, norm));
            assert!(h >= 0.0 && h <= max_entropy(&a, norm) + 1e-12);
        }
    }
}

#[test]
fn complexity_scales_quadratically_when_sparsity_is_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut f: Vec<f32> = (0..200).map(|_| rng.random_range(1.0f32..3.0) * if rng.random() { 1.0 } else { -1.0 }).collect();
    f[..17].fill(0.0);
    let c = feature_complexity(&f, 1e-6).unwrap();
    assert!(c > 0.0);
    for alpha in [0.5f32, 2.0, 8.0] {
        let scaled: Vec<f32> = f.iter().map(|v| v * alpha).collect();
        let cs = feature_complexity(&scaled, 1e-6).unwrap();
        assert!((cs - (alpha as f64).powi(2) * c).abs() < 1e-6 * cs, "alpha={alpha}");
    }
}

#[test]
fn divergence_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ts = [20usize, 60, 120, 180];
    let a: Vec<(usize, f64)> = ts.iter().map(|&t| (t, rng.random())).collect();
    let b: Vec<(usize, f64)> = ts.iter().map(|&t| (t, rng.random())).collect();
    let d = divergence(&a, &b).unwrap();
    for ((t, v), (x, y)) in d.iter().zip(a.iter().zip(&b)) {
        assert_eq!(*t, x.0);
        assert_eq!(*v, (x.1 - y.1).abs());
    }
    let shifted: Vec<(usize, f64)> = a.iter().map(|&(t, v)| (t, v + 0.1)).collect();
    assert!(divergence(&a, &shifted).unwrap().iter().all(|(_, v)| (v - 0.1).abs() < 1e-12));
    assert!(divergence(&a, &a[..3]).is_err());
}

#[test]
fn textured_images_are_more_complex_than_crisp() {
    let base = DatasetConfig {
        count: 100,
        seed: 21,
        ..Default::default()
    };
    let crisp = build_dataset(&base).unwrap();
    let textured = build_dataset(&DatasetConfig {
        style: RenderStyle::Textured,
        ..base
    })
    .unwrap();
    assert_eq!(crisp.manifest, textured.manifest);
    let mean = |d: &circuitscope::faces::Dataset| {
        d.images.iter().map(|i| feature_complexity(i.data(), 1e-6).unwrap()).sum::<f64>() / d.len() as f64
    };
    let (c, t) = (mean(&crisp), mean(&textured));
    assert!(t > c, "textured {t} vs crisp {c}");
}

#[test]
fn png_round_trip_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    for (channels, style) in [(3, RenderStyle::Textured), (1, RenderStyle::Crisp)] {
        let d = build_dataset(&DatasetConfig {
            count: 4,
            channels,
            style,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let sub = dir.path().join(format!("c{channels}"));
        std::fs::create_dir(&sub).unwrap();
        for (i, img) in d.images.iter().enumerate() {
            save_png(img, &sub.join(format!("{i:03}.png"))).unwrap();
        }
        let back = load_external_images(&sub, 32, channels).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.images.iter().zip(&back.images) {
            let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1.0 / 127.0, "max error {worst}");
        }
    }
}
