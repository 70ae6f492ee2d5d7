//! Finite-difference verification of every analytic gradient path.
//!
//! The oracle is central differences over the loss evaluated through the
//! plain forward pass only, so it shares no code with the backward passes
//! it checks.

use advloop_core::nn::{loss_value, Layer, LayerStack, LossSpec};
use advloop_core::tensor::Tensor;
use advloop_core::warp::{bilinear_warp, warp_flow_gradient, FlowField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(lo..hi))
            .collect(),
    )
    .unwrap()
}

/// A random small model: conv/relu/pool/dense stacks up to 4 layers.
fn random_model(rng: &mut ChaCha8Rng, input: [usize; 3], classes: usize) -> LayerStack {
    let [c, h, w] = input;
    let filters = rng.random_range(2..5usize);
    let k = if rng.random::<bool>() { 3 } else { 2 };
    let conv = Layer::Conv2d {
        weight: random_tensor(rng, &[filters, c, k, k], -0.5, 0.5),
        bias: (0..filters).map(|_| rng.random_range(-0.1..0.1)).collect(),
        stride: (1, 1),
    };
    let (h1, w1) = (h - k + 1, w - k + 1);
    let mut layers = vec![conv, Layer::Relu];
    let (fh, fw) = if h1 >= 4 && w1 >= 4 && rng.random::<bool>() {
        layers.push(Layer::AvgPool { window: (2, 2) });
        (h1 / 2, w1 / 2)
    } else {
        (h1, w1)
    };
    layers.push(Layer::Flatten);
    let flat = filters * fh * fw;
    layers.push(Layer::Dense {
        weight: random_tensor(rng, &[classes, flat], -0.4, 0.4),
        bias: (0..classes).map(|_| rng.random_range(-0.1..0.1)).collect(),
    });
    LayerStack::new(input, layers).unwrap()
}

/// Central difference, or `None` when the one-sided slopes disagree —
/// the coordinate straddles a relu kink and no subgradient convention can
/// match a two-sided probe there.
fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, index: usize, step: f64) -> Option<f64> {
    let mut plus = x.clone();
    plus.data_mut()[index] += step;
    let mut minus = x.clone();
    minus.data_mut()[index] -= step;
    let (fp, fm, f0) = (f(&plus), f(&minus), f(x));
    let fd_plus = (fp - f0) / step;
    let fd_minus = (f0 - fm) / step;
    if (fd_plus - fd_minus).abs() > 0.05 * fd_plus.abs().max(fd_minus.abs()) + 1e-4 {
        return None;
    }
    Some((fp - fm) / (2.0 * step))
}

fn check_close(analytic: f64, numeric: f64, rel_tol: f64, context: &str) {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return; // both effectively zero
    }
    let rel = (analytic - numeric).abs() / scale;
    assert!(
        rel <= rel_tol,
        "{context}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
    );
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..20 {
        let input = [rng.random_range(1..4usize), 8, 8];
        let classes = rng.random_range(2..4usize);
        let model = random_model(&mut rng, input, classes);
        let x = random_tensor(&mut rng, &input, 0.05, 0.95);
        let loss = if case % 2 == 0 {
            LossSpec::CrossEntropyTarget(rng.random_range(0..classes))
        } else {
            LossSpec::Logit(rng.random_range(0..classes))
        };
        let grad = model.input_gradient(&x, &loss).unwrap();
        assert!(grad.all_finite());
        let f = |t: &Tensor| loss_value(&model.forward(t).unwrap(), &loss).unwrap();
        for _ in 0..20 {
            let idx = rng.random_range(0..x.len());
            if let Some(numeric) = central_diff(f, &x, idx, 1e-4) {
                check_close(grad.data()[idx], numeric, 1e-4, &format!("case {case} idx {idx}"));
            }
        }
    }
}

#[test]
fn logit_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for case in 0..20 {
        let input = [rng.random_range(1..3usize), 7, 7];
        let classes = 2;
        let model = random_model(&mut rng, input, classes);
        let x = random_tensor(&mut rng, &input, 0.05, 0.95);
        let jac = model.logit_jacobian(&x).unwrap();
        for k in 0..classes {
            let f = |t: &Tensor| model.forward(t).unwrap().data()[k];
            for _ in 0..10 {
                let idx = rng.random_range(0..x.len());
                if let Some(numeric) = central_diff(f, &x, idx, 1e-4) {
                    check_close(
                        jac.data()[k * x.len() + idx],
                        numeric,
                        1e-4,
                        &format!("case {case} row {k} idx {idx}"),
                    );
                }
            }
        }
    }
}

#[test]
fn warp_flow_gradient_matches_central_differences_off_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for case in 0..20 {
        let input = [rng.random_range(1..3usize), 8, 8];
        let model = random_model(&mut rng, input, 2);
        let x = random_tensor(&mut rng, &input, 0.05, 0.95);
        // Non-integer flows keep the check away from the interpolation kinks.
        let mut flow = FlowField::zeros(8, 8);
        for v in flow.du.data_mut() {
            *v = rng.random_range(-0.7..0.7);
            if v.fract().abs() < 0.05 {
                *v += 0.11;
            }
        }
        for v in flow.dv.data_mut() {
            *v = rng.random_range(-0.7..0.7);
            if v.fract().abs() < 0.05 {
                *v += 0.11;
            }
        }
        let loss = LossSpec::CrossEntropyTarget(rng.random_range(0..2));
        let (gdu, gdv) = warp_flow_gradient(&model, &x, &flow, &loss).unwrap();

        let eval = |f: &FlowField| {
            let warped = bilinear_warp(&x, f).unwrap();
            loss_value(&model.forward(&warped).unwrap(), &loss).unwrap()
        };
        let f_mid = eval(&flow);
        let probe = |component: usize, idx: usize, analytic: f64, what: String| {
            let mut plus = flow.clone();
            let mut minus = flow.clone();
            if component == 0 {
                plus.du.data_mut()[idx] += 1e-4;
                minus.du.data_mut()[idx] -= 1e-4;
            } else {
                plus.dv.data_mut()[idx] += 1e-4;
                minus.dv.data_mut()[idx] -= 1e-4;
            }
            let (fp, fm) = (eval(&plus), eval(&minus));
            let fd_plus = (fp - f_mid) / 1e-4;
            let fd_minus = (f_mid - fm) / 1e-4;
            if (fd_plus - fd_minus).abs() > 0.05 * fd_plus.abs().max(fd_minus.abs()) + 1e-4 {
                return; // relu kink under the warp
            }
            check_close(analytic, (fp - fm) / 2e-4, 1e-3, &what);
        };
        for _ in 0..10 {
            let idx = rng.random_range(0..64);
            probe(0, idx, gdu.data()[idx], format!("case {case} du {idx}"));
            probe(1, idx, gdv.data()[idx], format!("case {case} dv {idx}"));
        }
    }
}

#[test]
fn warp_gradient_at_zero_flow_matches_one_sided_differences() {
    // The analytic derivative at integer offsets is the right-facing one;
    // forward differences agree with it exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let input = [2usize, 8, 8];
    let model = random_model(&mut rng, input, 2);
    let x = random_tensor(&mut rng, &input, 0.05, 0.95);
    let flow = FlowField::zeros(8, 8);
    let loss = LossSpec::CrossEntropyTarget(0);
    let (gdu, gdv) = warp_flow_gradient(&model, &x, &flow, &loss).unwrap();

    let eval = |f: &FlowField| {
        let warped = bilinear_warp(&x, f).unwrap();
        loss_value(&model.forward(&warped).unwrap(), &loss).unwrap()
    };
    let base = eval(&flow);
    for idx in [0usize, 9, 27, 36, 54, 63] {
        let mut plus = flow.clone();
        plus.du.data_mut()[idx] += 1e-5;
        let numeric = (eval(&plus) - base) / 1e-5;
        check_close(gdu.data()[idx], numeric, 1e-3, &format!("du {idx}"));

        let mut plus = flow.clone();
        plus.dv.data_mut()[idx] += 1e-5;
        let numeric = (eval(&plus) - base) / 1e-5;
        check_close(gdv.data()[idx], numeric, 1e-3, &format!("dv {idx}"));
    }
}

#[test]
fn single_flow_entry_probe_moves_loss_along_gradient_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let input = [1usize, 8, 8];
    let model = random_model(&mut rng, input, 2);
    let x = random_tensor(&mut rng, &input, 0.05, 0.95);
    let mut flow = FlowField::zeros(8, 8);
    for v in flow.du.data_mut() {
        *v = rng.random_range(-0.4..0.4) + 0.13;
    }
    let loss = LossSpec::CrossEntropyTarget(1);
    let (gdu, _) = warp_flow_gradient(&model, &x, &flow, &loss).unwrap();
    let eval = |f: &FlowField| {
        let warped = bilinear_warp(&x, f).unwrap();
        loss_value(&model.forward(&warped).unwrap(), &loss).unwrap()
    };
    let base = eval(&flow);
    let mut checked = 0;
    for idx in 0..64 {
        let g = gdu.data()[idx];
        if g.abs() < 1e-6 {
            continue;
        }
        let mut probe = flow.clone();
        probe.du.data_mut()[idx] -= 1e-3 * g.signum();
        assert!(
            eval(&probe) < base + 1e-12,
            "stepping against the gradient should not increase the loss (idx {idx})"
        );
        checked += 1;
    }
    assert!(checked > 10, "too few live coordinates ({checked})");
}
