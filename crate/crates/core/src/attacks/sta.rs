//! Spatially transformed attack.
//!
//! Optimizes a per-pixel flow field instead of additive noise: greedy
//! descent on `L(f) = -ln mean_m p_m(t | warp(x, f)) + theta * L_flow(f)`,
//! where `L_flow` penalizes displacement differences between 4-neighbors.
//! Steps that fail to decrease `L` are rejected and halve the working step,
//! so a huge `theta` pins the flow at its smoothest feasible point. Flow
//! components start at a random scale of `s_min` (zero means a
//! deterministic identity start) and are hard-clamped to `s_max`.
//!
//! The returned delta is `warp(x, f*) - x` re-projected onto the l-inf
//! budget and the image box: the warp enjoys no budget exemption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{finish, AttackInput, AttackMethod, CandidateDelta, StaParams};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::warp::{bilinear_warp, FlowField};

pub fn sta_generate(input: &AttackInput<'_>, params: &StaParams) -> Result<CandidateDelta> {
    params.validate()?;
    let x = input.x;
    let (h, w) = (x.shape()[1], x.shape()[2]);

    if params.t_sta == 0 {
        let baseline = input.surrogates.mean_target_prob(x, input.target)?;
        let mut out = CandidateDelta::zero(AttackMethod::Sta, x, input.eps, baseline);
        out.diagnostics.flow_max = Some(0.0);
        return Ok(out);
    }

    let mut flow = init_flow(h, w, params, input.seed);
    flow.clamp_in_place(params.s_max);

    let (mut prob, mut grad) = input.surrogates.ce_flow_gradient(x, &flow, input.target)?;
    let mut objective = -prob.ln() + params.theta * flow_smoothness(&flow);
    let mut best_flow = flow.clone();
    let mut best_prob = prob;
    let mut aborted = false;
    let mut step = params.gamma;
    let mut iterations_used = 0;

    for it in 0..params.t_sta {
        if !objective.is_finite() || !grad.du.all_finite() || !grad.dv.all_finite() {
            aborted = true;
            break;
        }
        let (sdu, sdv) = flow_smoothness_gradient(&flow);
        let mut proposal = flow.clone();
        proposal.du.axpy(-step, &grad.du)?;
        proposal.du.axpy(-step * params.theta, &sdu)?;
        proposal.dv.axpy(-step, &grad.dv)?;
        proposal.dv.axpy(-step * params.theta, &sdv)?;
        proposal.clamp_in_place(params.s_max);

        let (p_new, g_new) = input.surrogates.ce_flow_gradient(x, &proposal, input.target)?;
        let obj_new = -p_new.ln() + params.theta * flow_smoothness(&proposal);
        iterations_used = it + 1;
        if obj_new.is_finite() && obj_new < objective {
            flow = proposal;
            prob = p_new;
            grad = g_new;
            objective = obj_new;
            if prob > best_prob {
                best_prob = prob;
                best_flow = flow.clone();
            }
        } else {
            step *= 0.5;
        }
    }

    let warped = bilinear_warp(x, &best_flow)?;
    let raw_delta = warped.sub(x)?;
    let mut out = finish(AttackMethod::Sta, raw_delta, input, iterations_used)?;
    out.diagnostics.flow_max = Some(best_flow.max_magnitude());
    out.diagnostics.aborted_non_finite = aborted;
    Ok(out)
}

fn init_flow(h: usize, w: usize, params: &StaParams, seed: u64) -> FlowField {
    let mut flow = FlowField::zeros(h, w);
    if params.s_min > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in flow.du.data_mut() {
            *v = rng.random_range(-params.s_min..params.s_min);
        }
        for v in flow.dv.data_mut() {
            *v = rng.random_range(-params.s_min..params.s_min);
        }
    }
    flow
}

/// Smoothness prior: summed squared displacement differences to all four
/// neighbors, for both components. Each undirected neighbor pair is counted
/// from both sides, so an isolated spike of height `h` in one component
/// costs `2 * 4 * h^2`. Zero iff the flow is constant.
pub fn flow_smoothness(flow: &FlowField) -> f64 {
    let (h, w) = (flow.height(), flow.width());
    let mut total = 0.0;
    for comp in [&flow.du, &flow.dv] {
        for i in 0..h {
            for j in 0..w {
                let v = comp.at2(i, j);
                if i > 0 {
                    total += sq(v - comp.at2(i - 1, j));
                }
                if i + 1 < h {
                    total += sq(v - comp.at2(i + 1, j));
                }
                if j > 0 {
                    total += sq(v - comp.at2(i, j - 1));
                }
                if j + 1 < w {
                    total += sq(v - comp.at2(i, j + 1));
                }
            }
        }
    }
    total
}

/// Gradient of [`flow_smoothness`]: `4 * sum_n (f_p - f_n)` per component.
pub fn flow_smoothness_gradient(flow: &FlowField) -> (Tensor, Tensor) {
    let (h, w) = (flow.height(), flow.width());
    let mut out = (Tensor::zeros(&[h, w]), Tensor::zeros(&[h, w]));
    for (comp, g) in [(&flow.du, &mut out.0), (&flow.dv, &mut out.1)] {
        for i in 0..h {
            for j in 0..w {
                let v = comp.at2(i, j);
                let mut acc = 0.0;
                if i > 0 {
                    acc += v - comp.at2(i - 1, j);
                }
                if i + 1 < h {
                    acc += v - comp.at2(i + 1, j);
                }
                if j > 0 {
                    acc += v - comp.at2(i, j - 1);
                }
                if j + 1 < w {
                    acc += v - comp.at2(i, j + 1);
                }
                g.set2(i, j, 4.0 * acc);
            }
        }
    }
    out
}

fn sq(v: f64) -> f64 {
    v * v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_flow_has_zero_smoothness() {
        let mut f = FlowField::zeros(4, 4);
        for v in f.du.data_mut() {
            *v = 0.7;
        }
        for v in f.dv.data_mut() {
            *v = -0.3;
        }
        assert_eq!(flow_smoothness(&f), 0.0);
    }

    #[test]
    fn interior_spike_costs_eight_h_squared() {
        let mut f = FlowField::zeros(5, 5);
        let h = 0.25;
        f.du.set2(2, 2, h);
        let expected = 2.0 * 4.0 * h * h;
        assert!((flow_smoothness(&f) - expected).abs() < 1e-15);
    }

    #[test]
    fn smoothness_is_symmetric_in_components() {
        let mut a = FlowField::zeros(4, 4);
        for (i, v) in a.du.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let mut b = FlowField::zeros(4, 4);
        b.dv = a.du.clone();
        assert_eq!(flow_smoothness(&a), flow_smoothness(&b));
    }

    #[test]
    fn smoothing_a_rough_flow_decreases_the_prior() {
        let mut rough = FlowField::zeros(6, 6);
        for (i, v) in rough.du.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.5 } else { -0.5 };
        }
        let before = flow_smoothness(&rough);
        // One averaging pass over the 4-neighborhood.
        let mut smoothed = rough.clone();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = rough.du.at2(i, j);
                let mut n = 1.0;
                if i > 0 {
                    acc += rough.du.at2(i - 1, j);
                    n += 1.0;
                }
                if i < 5 {
                    acc += rough.du.at2(i + 1, j);
                    n += 1.0;
                }
                if j > 0 {
                    acc += rough.du.at2(i, j - 1);
                    n += 1.0;
                }
                if j < 5 {
                    acc += rough.du.at2(i, j + 1);
                    n += 1.0;
                }
                smoothed.du.set2(i, j, acc / n);
            }
        }
        assert!(flow_smoothness(&smoothed) < before);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut f = FlowField::zeros(4, 4);
        for (i, v) in f.du.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.31).cos() * 0.4;
        }
        for (i, v) in f.dv.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.17).sin() * 0.3;
        }
        let (gdu, gdv) = flow_smoothness_gradient(&f);
        let h = 1e-6;
        for idx in [0usize, 5, 10, 15] {
            let mut plus = f.clone();
            plus.du.data_mut()[idx] += h;
            let mut minus = f.clone();
            minus.du.data_mut()[idx] -= h;
            let fd = (flow_smoothness(&plus) - flow_smoothness(&minus)) / (2.0 * h);
            assert!((fd - gdu.data()[idx]).abs() < 1e-6, "du[{idx}]: {fd} vs {}", gdu.data()[idx]);

            let mut plus = f.clone();
            plus.dv.data_mut()[idx] += h;
            let mut minus = f.clone();
            minus.dv.data_mut()[idx] -= h;
            let fd = (flow_smoothness(&plus) - flow_smoothness(&minus)) / (2.0 * h);
            assert!((fd - gdv.data()[idx]).abs() < 1e-6, "dv[{idx}]: {fd} vs {}", gdv.data()[idx]);
        }
    }
}
