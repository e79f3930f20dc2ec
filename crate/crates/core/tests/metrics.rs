use mindsem::metrics::{
    pixcorr, roi_importance, ssim, two_way_from_correlations, two_way_identification, ExtractorBank,
};
use mindsem::mimevis::Granularity;
use mindsem::nncore::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_pixcorr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Direct per-window SSIM with uniform 8x8 windows and population moments.
fn brute_ssim(a: &[f64], b: &[f64], side: usize) -> f64 {
    let (k, c1, c2) = (8usize, 1e-4, 9e-4);
    let mut vals = Vec::new();
    for y0 in 0..=side - k {
        for x0 in 0..=side - k {
            let idx: Vec<usize> = (0..k).flat_map(|dy| (0..k).map(move |dx| (y0 + dy) * side + x0 + dx)).collect();
            let n = idx.len() as f64;
            let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
            let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
            let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / n;
            let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / n;
            let cov = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / n;
            vals.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn image(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    (0..side * side).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn fast_metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let side = [8, 12, 16][i % 3];
        let a = image(&mut rng, side);
        let w = (i % 4) as f64 / 3.0;
        let b: Vec<f64> = a.iter().map(|&v| w * v + (1.0 - w) * rng.random::<f64>()).collect();
        assert!((pixcorr(&a, &b).unwrap() - brute_pixcorr(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b, side).unwrap() - brute_ssim(&a, &b, side)).abs() < 1e-6);
    }
}

#[test]
fn independent_images_are_weakly_correlated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let small = (0..1000)
        .filter(|_| pixcorr(&image(&mut rng, 16), &image(&mut rng, 16)).unwrap().abs() < 0.2)
        .count();
    assert!(small >= 950, "{small}/1000");
}

#[test]
fn constant_images_ssim_closed_form() {
    let c1 = 1e-4;
    let got = ssim(&[0.0; 256], &[1.0; 256], 16).unwrap();
    assert!((got - c1 / (1.0 + c1)).abs() < 1e-12);
    assert!((got - 9.999e-5).abs() < 1e-8);
}

#[test]
fn two_way_hand_matrix() {
    assert_eq!(two_way_from_correlations(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap(), 100.0);
    assert_eq!(two_way_from_correlations(&[vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap(), 0.0);
}

#[test]
fn unrelated_features_identify_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let recon: Vec<Vec<f64>> = (0..500).map(|_| (0..32).map(|_| rng.random::<f64>()).collect()).collect();
    let truth: Vec<Vec<f64>> = (0..500).map(|_| (0..32).map(|_| rng.random::<f64>()).collect()).collect();
    let score = two_way_identification(&recon, &truth).unwrap();
    assert!((score - 50.0).abs() <= 3.0, "{score}");
}

#[test]
fn self_evaluation_is_the_exact_upper_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth: Vec<Vec<f64>> = (0..20).map(|_| image(&mut rng, 16)).collect();
    let row = ExtractorBank::new(16).unwrap().score(&truth, &truth).unwrap();
    assert_eq!(row.pixcorr, 1.0);
    assert_eq!(row.ssim, 1.0);
    assert_eq!(row.two_way, [100.0; 4]);
    assert_eq!(row.distance, [0.0; 2]);
}

fn pair(side: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let n = side * side;
    (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0.0f64..1.0, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric_and_bounded((a, b) in pair(16)) {
        let (p, q) = (pixcorr(&a, &b).unwrap(), pixcorr(&b, &a).unwrap());
        prop_assert!((p - q).abs() < 1e-12 && p <= 1.0 && p >= -1.0);
        let (s, t) = (ssim(&a, &b, 16).unwrap(), ssim(&b, &a, 16).unwrap());
        prop_assert!((s - t).abs() < 1e-12 && s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force((a, b) in pair(12)) {
        prop_assert!((ssim(&a, &b, 12).unwrap() - brute_ssim(&a, &b, 12)).abs() < 1e-6);
    }

    #[test]
    fn two_way_stays_in_range(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect() };
        let (r, t) = (f(&mut rng), f(&mut rng));
        let s = two_way_identification(&r, &t).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
    }

    #[test]
    fn roi_maps_are_distributions_invariant_to_scale(
        w in prop::collection::vec(-3.0f64..3.0, 24),
        c in 1e-3f64..1e3,
    ) {
        prop_assume!(w.iter().any(|v| v.abs() > 1e-9));
        let wt = Tensor::new(vec![8, 3], w.clone()).unwrap();
        let m = roi_importance(&wt, 0, Granularity::Words(30)).unwrap();
        prop_assert!(m.weights.iter().all(|&x| x >= 0.0));
        prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let scaled = Tensor::new(vec![8, 3], w.iter().map(|v| v * c).collect()).unwrap();
        let s = roi_importance(&scaled, 0, Granularity::Words(30)).unwrap();
        for (x, y) in m.weights.iter().zip(&s.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
