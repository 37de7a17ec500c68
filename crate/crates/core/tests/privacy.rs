use flk_core::privacy::{add_noise, clip, gaussian_sigma, pairwise_mask, MaskSeedTable};
use flk_core::seed::SplitMix64;
use flk_core::types::ResidueVector;
use flk_core::ParameterVector;

#[test]
fn sigma_formula() {
    let expected = (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
    let s = gaussian_sigma(1.0, 1.0, 1e-5).unwrap();
    assert_eq!(s, expected);
    assert!((s - 4.8448).abs() <= 1e-4);
}

#[test]
fn noise_moments() {
    let n = 100_000;
    let noisy = add_noise(&ParameterVector::zeros(n), 2.0, 42);
    let xs = noisy.as_slice();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var.sqrt() / 2.0 - 1.0).abs() < 0.02, "std {}", var.sqrt());
}

#[test]
fn clipped_norm_is_bounded() {
    let mut rng = SplitMix64::new(7);
    for _ in 0..10_000 {
        let dim = 1 + rng.below(50) as usize;
        let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
        let x = ParameterVector::new((0..dim).map(|_| scale * rng.standard_normal()).collect()).unwrap();
        let c = rng.uniform(0.01, 5.0);
        let y = clip(&x, c);
        assert!(y.l2_norm() <= c + 1e-9);
        if x.l2_norm() <= c {
            assert_eq!(y, x);
        }
    }
}

#[test]
fn pairwise_masks_cancel() {
    let table = MaskSeedTable::new("federation-token");
    for n in 2..=16u32 {
        let participants: Vec<u32> = (0..n).map(|i| 3 * i + 1).collect();
        for dim in [1usize, 5, 1000] {
            let mut sum = ResidueVector::zeros(dim);
            for &c in &participants {
                sum.wrapping_add_assign(&pairwise_mask(c, &participants, 9, &table, dim)).unwrap();
            }
            assert!(sum.0.iter().all(|v| *v == 0), "n={n} dim={dim}");
        }
    }
}
