use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::*;
use crate::autograd::{Graph, ParameterSet, Tensor};

fn oracle_mass(m: f64, mu: f64, sigma: f64) -> f64 {
    let n = Normal::new(mu, sigma).unwrap();
    n.cdf(m + 0.5) - n.cdf(m - 0.5)
}

fn random_gmm(rng: &mut impl Rng, len: usize, k: usize, max_scale: f64) -> GmmConditional {
    let logits: Vec<f64> = (0..len * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let means = (0..len * k).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let scales = (0..len * k).map(|_| rng.gen_range(SIGMA_MIN_TEST..max_scale)).collect();
    GmmConditional::from_logits(k, &logits, means, scales).unwrap()
}

const SIGMA_MIN_TEST: f64 = crate::autograd::SIGMA_MIN;

#[test]
fn unit_gaussian_mass_at_zero() {
    let params = GmmConditional::new(1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
    let p = gmm_pmf(&[0], &params).unwrap()[0];
    assert!((p - 0.3829249).abs() < 5e-8, "{p}");
    assert!((p - oracle_mass(0.0, 0.0, 1.0)).abs() < 1e-12);
}

#[test]
fn gmm_matches_normal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mu = rng.gen_range(-20.0..20.0);
        let sigma = rng.gen_range(0.05..30.0);
        let m = rng.gen_range(-40..40);
        let params = GmmConditional::new(1, vec![1.0], vec![mu], vec![sigma]).unwrap();
        let p = params.pmf(0, m as f64);
        let q = oracle_mass(m as f64, mu, sigma);
        // statrs' erfc is accurate to roughly 1e-9 relative
        assert!((p - q).abs() < 1e-12 + 1e-8 * q, "{p} vs {q}");
    }
}

#[test]
fn identical_components_collapse_to_one() {
    let single = GmmConditional::new(1, vec![1.0], vec![0.7], vec![1.3]).unwrap();
    let triple = GmmConditional::new(3, vec![0.2, 0.5, 0.3], vec![0.7; 3], vec![1.3; 3]).unwrap();
    for m in -6..=6 {
        let (a, b) = (single.pmf(0, m as f64), triple.pmf(0, m as f64));
        assert!((a - b).abs() < 1e-15, "m={m}");
    }
}

#[test]
fn zero_mean_pmf_is_symmetric() {
    let params = GmmConditional::new(2, vec![0.4, 0.6], vec![0.0, 0.0], vec![0.5, 3.0]).unwrap();
    for m in 1..30 {
        assert_eq!(params.pmf(0, m as f64), params.pmf(0, -m as f64));
    }
}

#[test]
fn weights_must_sum_to_one() {
    assert!(GmmConditional::new(2, vec![0.5, 0.6], vec![0.0; 2], vec![1.0; 2]).is_err());
    assert!(GmmConditional::new(2, vec![0.5, 0.5 + 5e-7], vec![0.0; 2], vec![1.0; 2]).is_ok());
    assert!(GmmConditional::new(2, vec![0.5], vec![0.0; 2], vec![1.0; 2]).is_err());
}

#[test]
fn small_scales_clamped_and_counted() {
    let params = GmmConditional::new(1, vec![1.0, 1.0], vec![0.0, 0.0], vec![1e-9, 0.5]).unwrap();
    assert_eq!(params.clamped_scales(), 1);
    let expected = oracle_mass(0.0, 0.0, SIGMA_MIN_TEST);
    assert!((params.pmf(0, 0.0) - expected).abs() < 1e-12);
}

#[test]
fn gmm_mass_sums_to_one_over_wide_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = random_gmm(&mut rng, 20, 3, 100.0);
    for i in 0..params.len() {
        let total: f64 = (-10_000..=10_000).map(|m| params.pmf(i, m as f64)).sum();
        assert!(total >= 1.0 - 1e-6 && total <= 1.0 + 1e-12, "element {i}: {total}");
    }
}

#[test]
fn gmm_pmf_checks_lengths() {
    let params = GmmConditional::new(1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
    assert!(gmm_pmf(&[0, 1], &params).is_err());
}

#[test]
fn gmm_tail_is_positive_far_from_mean() {
    let params = GmmConditional::new(1, vec![1.0], vec![0.0], vec![1.0]).unwrap();
    let p = params.pmf(0, 30.0);
    assert!(p > 0.0 && p < 1e-150);
    assert!(params.survival(0, 20.0) > 0.0);
}

#[test]
fn fresh_factorized_density_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParameterSet::new();
    FactorizedDensity::init_params(&mut params, &mut rng, "hp", 4).unwrap();
    let density = FactorizedDensity::from_params(&params, "hp").unwrap();
    for c in 0..4 {
        let mut total = 0.0;
        for z in -1000..=1000 {
            let p = density.pmf(c, z as f64);
            assert!(p >= 0.0);
            total += p;
        }
        assert!((1.0 - 1e-4..=1.0 + 1e-12).contains(&total), "channel {c}: {total}");
    }
}

#[test]
fn factorized_cdf_is_monotone_on_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let density = FactorizedDensity::random(3, &mut rng).unwrap();
        for c in 0..3 {
            let mut prev = 0.0;
            for i in -4000..=4000 {
                let v = density.cdf(c, i as f64 * 0.01);
                assert!(v >= prev, "channel {c} at {}", i as f64 * 0.01);
                prev = v;
            }
            assert!(density.cdf(c, -1e6) < 1e-6 && density.survival(c, 1e6) < 1e-6);
        }
    }
}

#[test]
fn factorized_pmf_matches_grid_integration() {
    // integrate a numerically differentiated cdf over each unit interval
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let density = FactorizedDensity::random(2, &mut rng).unwrap();
    let h = 1e-3;
    let steps = 1000;
    for c in 0..2 {
        for z in -8..=8 {
            let lo = z as f64 - 0.5;
            let density_at = |t: f64| (density.cdf(c, t + 1e-5) - density.cdf(c, t - 1e-5)) / 2e-5;
            let mut integral = 0.0;
            for i in 0..steps {
                let (a, b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
                integral += h / 6.0 * (density_at(a) + 4.0 * density_at(0.5 * (a + b)) + density_at(b));
            }
            let p = density.pmf(c, z as f64);
            assert!((p - integral).abs() < 1e-6, "channel {c} z={z}: {p} vs {integral}");
        }
    }
}

#[test]
fn factorized_pmf_over_tensor_uses_channel_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let density = FactorizedDensity::random(2, &mut rng).unwrap();
    let z = Tensor::new(&[1, 2, 1, 2], vec![0.0, 1.0, 0.0, -3.0]).unwrap();
    let p = factorized_pmf(&z, &density).unwrap();
    assert_eq!(p.data()[1], density.pmf(0, 1.0));
    assert_eq!(p.data()[3], density.pmf(1, -3.0));
    let wrong = Tensor::zeros(&[1, 3, 1, 1]);
    assert!(factorized_pmf(&wrong, &density).is_err());
}

#[test]
fn factorized_graph_op_matches_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParameterSet::new();
    FactorizedDensity::init_params(&mut params, &mut rng, "d", 2).unwrap();
    let density = FactorizedDensity::from_params(&params, "d").unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 1, 3], vec![-1.0, 0.0, 2.0, 0.5, -0.25, 7.0]).unwrap());
    let vars: Vec<_> = FactorizedDensity::param_names("d")
        .iter()
        .map(|n| g.param(&params, n).unwrap())
        .collect();
    let p = g.factorized_likelihood(x, &vars).unwrap();
    for (i, &v) in g.value(x).data().iter().enumerate() {
        assert_eq!(g.value(p).data()[i], density.pmf(i / 3, v));
    }
}

#[test]
fn infer_rounds_half_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(&[5], vec![1.5, -1.5, 0.4, -0.4, 2.5]).unwrap();
    let q = quantize(&x, QuantizeMode::Infer, &mut rng);
    assert_eq!(q.data(), &[2.0, -2.0, 0.0, 0.0, 3.0]);
}

#[test]
fn train_noise_is_bounded_and_reproducible() {
    let x = Tensor::new(&[1000], (0..1000).map(|i| i as f64 * 0.37 - 100.0).collect()).unwrap();
    let a = quantize(&x, QuantizeMode::Train, &mut ChaCha8Rng::seed_from_u64(9));
    let b = quantize(&x, QuantizeMode::Train, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&x) <= 0.5);
    assert!(a.max_abs_diff(&x) > 0.4);
}

#[test]
fn quantize_var_passes_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in [QuantizeMode::Train, QuantizeMode::Infer] {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3], vec![0.3, -1.2, 4.9]).unwrap());
        let q = quantize_var(&mut g, x, mode, &mut rng).unwrap();
        let loss = g.sum(q);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);
    }
}

#[test]
fn rate_of_halves_and_certainties() {
    assert_eq!(rate_bits(&[0.5; 8]), 8.0);
    assert_eq!(rate_bits(&[1.0]), 0.0);
    assert_eq!(rate_bits(&[0.0]), 24.0);
}

#[test]
fn rate_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p: Vec<f64> = (0..500).map(|_| rng.gen_range(1e-6..1.0)).collect();
    let oracle: f64 = p.iter().map(|v| -v.ln()).sum::<f64>() / std::f64::consts::LN_2;
    assert!((rate_bits(&p) - oracle).abs() < 1e-9);
}

#[test]
fn table_mass_at_zero_matches_normal_cdf() {
    let t = gaussian_table(1.0, -16, 16, 16).unwrap();
    let p = t.quantized_pmf()[16];
    let oracle = oracle_mass(0.0, 0.0, 1.0);
    // 24 of the 33 bins hold less than one count and are raised to one; the
    // 21 surplus counts come out of the 9 remaining bins, about 2.4 each
    assert!((p - oracle).abs() < 3.0 * 2f64.powi(-16), "{p} vs {oracle}");
    let narrow = gaussian_table(1.0, -4, 4, 16).unwrap();
    let p = narrow.quantized_pmf()[4];
    assert!((p - oracle).abs() < 2f64.powi(-15), "{p} vs {oracle}");
}

#[test]
fn folded_tails_go_to_extreme_bins() {
    let params = GmmConditional::new(1, vec![1.0], vec![10.0], vec![1.0]).unwrap();
    let t = build_cdf_table(PmfSource::Gmm { params: &params, index: 0 }, -2, 2, 16).unwrap();
    let counts = t.counts();
    assert_eq!(counts[..4], [1, 1, 1, 1]);
    assert_eq!(counts[4], 65536 - 4);
}

#[test]
fn factorized_tables_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let density = FactorizedDensity::random(2, &mut rng).unwrap();
    for c in 0..2 {
        let t = build_cdf_table(PmfSource::Factorized { density: &density, channel: c }, -20, 20, 16).unwrap();
        assert_eq!(t.cdf()[0], 0);
        assert_eq!(*t.cdf().last().unwrap(), 65536);
        assert!(t.counts().iter().all(|&n| n >= 1));
    }
}

proptest! {
    #[test]
    fn quantize_infer_is_idempotent(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[values.len()], values).unwrap();
        let once = quantize(&x, QuantizeMode::Infer, &mut rng);
        let twice = quantize(&once, QuantizeMode::Infer, &mut rng);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn tables_are_strictly_increasing(
        pmf in prop::collection::vec(0.0f64..1.0, 1..300),
        precision in 9u32..=16,
    ) {
        let t = CdfTable::from_pmf(&pmf, -7, precision).unwrap();
        prop_assert_eq!(t.cdf()[0], 0);
        prop_assert_eq!(*t.cdf().last().unwrap() as u64, 1u64 << precision);
        prop_assert!(t.cdf().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn quantized_pmf_within_two_counts(
        raw in prop::collection::vec(0.0f64..1.0, 2..200),
        precision in 8u32..=16,
    ) {
        // every probability at least one count, so no bin is lifted
        let total = (1u64 << precision) as f64;
        let floor = 1.0 / total;
        let n = raw.len() as f64;
        prop_assume!(n * floor < 0.5);
        let sum: f64 = raw.iter().sum();
        prop_assume!(sum > 0.0);
        let pmf: Vec<f64> = raw.iter().map(|p| floor + (1.0 - n * floor) * p / sum).collect();
        let t = CdfTable::from_pmf(&pmf, 0, precision).unwrap();
        for (q, p) in t.quantized_pmf().iter().zip(&pmf) {
            prop_assert!((q - p).abs() < 2.0 / total, "{} vs {}", q, p);
        }
    }

    #[test]
    fn gmm_gradient_logits_means_scales(
        x in -3i32..3,
        logits in prop::collection::vec(-2.0f64..2.0, 2),
        means in prop::collection::vec(-2.0f64..2.0, 2),
        scales in prop::collection::vec(0.3f64..3.0, 2),
    ) {
        let eval = |l: &[f64], m: &[f64], s: &[f64]| {
            GmmConditional::from_logits(2, l, m.to_vec(), s.to_vec()).unwrap().pmf(0, x as f64)
        };
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[1, 1, 1, 1], vec![x as f64]).unwrap());
        let lv = g.variable(Tensor::new(&[1, 2, 1, 1], logits.clone()).unwrap());
        let mv = g.variable(Tensor::new(&[1, 2, 1, 1], means.clone()).unwrap());
        let sv = g.variable(Tensor::new(&[1, 2, 1, 1], scales.clone()).unwrap());
        let p = g.gmm_likelihood(xv, lv, mv, sv, 2).unwrap();
        prop_assert!((g.value(p).item() - eval(&logits, &means, &scales)).abs() < 1e-15);
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let h = 1e-4;
        for (which, var) in [lv, mv, sv].into_iter().enumerate() {
            for k in 0..2 {
                let mut args = [logits.clone(), means.clone(), scales.clone()];
                args[which][k] += h;
                let up = eval(&args[0], &args[1], &args[2]);
                args[which][k] -= 2.0 * h;
                let down = eval(&args[0], &args[1], &args[2]);
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.grad(var).unwrap()[k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                prop_assert!(rel < 1e-4, "param {} k {}: {} vs {}", which, k, analytic, numeric);
            }
        }
    }
}
