use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::transforms::Model;

fn model() -> Model {
    Model::new(ModelConfig::toy(), 21).unwrap()
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

const MODES: [ResidualMode; 2] = [ResidualMode::Pixel, ResidualMode::Feature];

#[test]
fn equal_inputs_with_zero_analysis_give_zero_latents() {
    let mut m = model();
    layers::zero_parameters(&mut m.params, "px.a");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let out = encode(&m.params, &m.config, ResidualMode::Pixel, &x, &x, QuantizeMode::Infer, &mut rng).unwrap();
    assert!(out.latents.data().iter().all(|&v| v == 0.0));
    assert_eq!(out.latents.shape(), &[1, 12, 2, 2]);
    assert!(out.rate_latents >= 0.0 && out.rate_hyper >= 0.0);
}

#[test]
fn shared_encoder_cancels_equal_inputs() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 3, 32, 64], 0.0, 1.0);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x);
    let f1 = feature_encoder(&mut g, &m.params, a).unwrap();
    let f2 = feature_encoder(&mut g, &m.params, b).unwrap();
    let r = g.sub(f1, f2).unwrap();
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(r), &[1, 12, 8, 16]);
}

#[test]
fn pixel_zero_latents_with_zero_synthesis_return_prediction() {
    let mut m = model();
    layers::zero_parameters(&mut m.params, "px.s");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xbar = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let out = decode(&m.params, ResidualMode::Pixel, &Tensor::zeros(&[1, 12, 2, 2]), &xbar).unwrap();
    assert_eq!(out, xbar);
}

/// Stride-2, kernel-5 weights linking pixel `(2y + a, 2x + b)` of channel `c`
/// with pixel `(y, x)` of channel `4c + 2a + b`. The same index pattern serves
/// convolutions (out, in, k, k) and transposed convolutions (in, out, k, k).
fn space_to_depth(params: &mut ParameterSet, name: &str, inputs: usize) {
    let w = params.get_mut(&format!("{name}.w")).unwrap();
    let shape = w.shape().to_vec();
    w.data_mut().fill(0.0);
    for c in 0..inputs {
        for a in 0..2 {
            for b in 0..2 {
                let o = 4 * c + 2 * a + b;
                let idx = ((o * shape[1] + c) * 5 + 2 + a) * 5 + 2 + b;
                w.data_mut()[idx] = 1.0;
            }
        }
    }
    params.get_mut(&format!("{name}.b")).unwrap().data_mut().fill(0.0);
}

#[test]
fn inverse_initialized_decoder_reproduces_prediction() {
    let mut cfg = ModelConfig::toy();
    cfg.n_feature = 48;
    let mut m = Model::new(cfg, 4).unwrap();
    layers::zero_parameters(&mut m.params, "ft.e0r");
    layers::zero_parameters(&mut m.params, "ft.e1r");
    layers::zero_parameters(&mut m.params, "ft.d0r");
    layers::zero_parameters(&mut m.params, "ft.d1r");
    layers::zero_parameters(&mut m.params, "ft.rs");
    space_to_depth(&mut m.params, "ft.e0", 3);
    space_to_depth(&mut m.params, "ft.e1", 12);
    // D's first stage undoes E's second
    space_to_depth(&mut m.params, "ft.d0", 12);
    space_to_depth(&mut m.params, "ft.d1", 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xbar = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let out = decode(&m.params, ResidualMode::Feature, &Tensor::zeros(&[1, 48, 2, 2]), &xbar).unwrap();
    assert!(out.max_abs_diff(&xbar) < 1e-12, "{}", out.max_abs_diff(&xbar));
}

#[test]
fn mixture_weights_sum_to_one() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random(&mut rng, &[1, 12, 1, 1], -3.0, 3.0).map(f64::round);
    let gmm = decode_conditional(&m.params, &m.config, ResidualMode::Feature, &z, (2, 2)).unwrap();
    assert_eq!(gmm.len(), 12 * 4);
    assert_eq!(gmm.mixtures(), 3);
    for i in 0..gmm.len() {
        assert!((gmm.weights(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let px = decode_conditional(&m.params, &m.config, ResidualMode::Pixel, &z, (2, 2)).unwrap();
    assert_eq!(px.mixtures(), 1);
}

#[test]
fn conditional_is_cropped_to_latent_grid() {
    // 96 / 16 = 6 latents, hyper-latents ceil(6 / 4) = 2 → 8, cropped to 6
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x1 = random(&mut rng, &[1, 3, 96, 32], 0.0, 1.0);
    let xbar = random(&mut rng, &[1, 3, 96, 32], 0.0, 1.0);
    for mode in MODES {
        let out = encode(&m.params, &m.config, mode, &x1, &xbar, QuantizeMode::Infer, &mut rng).unwrap();
        assert_eq!(out.latents.shape()[2..], [6, 2]);
        assert_eq!(out.hyper.shape()[2..], [2, 1]);
        let gmm = decode_conditional(&m.params, &m.config, mode, &out.hyper, (6, 2)).unwrap();
        assert_eq!(gmm.len(), out.latents.numel());
    }
}

#[test]
fn decode_is_deterministic_and_in_range() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xbar = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    for mode in MODES {
        let latents = random(&mut rng, &[1, 12, 2, 2], -20.0, 20.0).map(f64::round);
        let a = decode(&m.params, mode, &latents, &xbar).unwrap();
        assert_eq!(decode(&m.params, mode, &latents, &xbar).unwrap(), a);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
    let b = random(&mut rng, &[1, 3, 32, 48], 0.0, 1.0);
    let c = random(&mut rng, &[1, 3, 24, 32], 0.0, 1.0);
    for mode in MODES {
        assert!(encode(&m.params, &m.config, mode, &a, &b, QuantizeMode::Infer, &mut rng).is_err());
        assert!(encode(&m.params, &m.config, mode, &c, &c, QuantizeMode::Infer, &mut rng).is_err());
        assert!(decode(&m.params, mode, &Tensor::zeros(&[1, 12, 3, 3]), &a).is_err());
    }
}

/// Training-mode forward with seeded noise is smooth in the parameters, so
/// it can be checked against central differences.
#[test]
fn training_forward_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x1 = random(&mut rng, &[1, 3, 32, 32], 0.3, 0.7);
    let xbar = random(&mut rng, &[1, 3, 32, 32], 0.3, 0.7);
    let weights = random(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    for mode in MODES {
        let mut m = model();
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        // shrink weights to stay clear of the output clamp; offset biases so
        // no pre-activation sits on a rectifier kink
        for n in &names {
            if !n.starts_with(prefix(mode)) || n.contains("prior") {
                continue;
            }
            let t = m.params.get_mut(n).unwrap().data_mut();
            if n.ends_with(".w") {
                t.iter_mut().for_each(|v| *v *= 0.3);
            } else if n.ends_with(".b") {
                t.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let loss = |params: &ParameterSet| {
            let mut g = Graph::new();
            let a = g.constant(x1.clone());
            let b = g.constant(xbar.clone());
            let mut noise = ChaCha8Rng::seed_from_u64(99);
            let f = forward(&mut g, params, &m.config, mode, a, b, QuantizeMode::Train, &mut noise).unwrap();
            let w = g.constant(weights.clone());
            let d = g.mul(f.x_hat, w).unwrap();
            let d = g.sum(d);
            let r = g.add(f.rate_latents, f.rate_hyper).unwrap();
            let r = g.scale(r, 0.01);
            let l = g.add(r, d).unwrap();
            (g, l)
        };
        let (mut g, l) = loss(&m.params);
        g.backward(l).unwrap();
        g.write_gradients(&mut m.params);
        let p = prefix(mode);
        let checked: Vec<String> = match mode {
            ResidualMode::Pixel => ["a0.w", "a3.b", "s0.w", "ha1.w", "hs2.w", "hprior.m0"]
                .iter()
                .map(|s| format!("{p}.{s}"))
                .collect(),
            ResidualMode::Feature => ["e0.w", "e1r.c1.w", "d1.w", "ra0.w", "rs1.b", "ha0.w", "hs1.w", "p1.w", "p0.b"]
                .iter()
                .map(|s| format!("{p}.{s}"))
                .collect(),
        };
        let h = 1e-6;
        for name in checked {
            let analytic = m.params.grad(&name).unwrap_or_else(|| panic!("no grad for {name}")).to_vec();
            let step = (analytic.len() / 5).max(1);
            for i in (0..analytic.len()).step_by(step) {
                let mut plus = m.params.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = m.params.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                let (gp, lp) = loss(&plus);
                let (gm, lm) = loss(&minus);
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (analytic[i] - numeric).abs() / scale < 1e-4,
                    "{name}[{i}]: {} vs {numeric}",
                    analytic[i]
                );
            }
        }
    }
}
