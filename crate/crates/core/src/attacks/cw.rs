//! l2-regularized dense attack.
//!
//! Projected gradient descent on `J(delta) = ||delta||_2^2 + c * L_ce`,
//! where `L_ce = -ln mean_m p_m(t | x + delta)` over the surrogate
//! ensemble. Every step is clipped to the l-inf budget and the image box,
//! so all iterates are feasible. The best iterate by surrogate mean
//! probability is returned (ties to the earliest).

use crate::attacks::{finish, AttackInput, AttackMethod, CandidateDelta, CwParams};
use crate::error::Result;
use crate::tensor::Tensor;

/// Runs the CW-style search. A non-finite loss aborts the search and the
/// best prior iterate is returned with `aborted_non_finite` set.
pub fn cw_generate(input: &AttackInput<'_>, params: &CwParams) -> Result<CandidateDelta> {
    cw_generate_traced(input, params, None)
}

/// [`cw_generate`] that also records the objective `J` at every visited
/// iterate, including the initial zero delta.
pub fn cw_generate_traced(
    input: &AttackInput<'_>,
    params: &CwParams,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<CandidateDelta> {
    params.validate()?;
    let x = input.x;
    let mut delta = Tensor::zeros(x.shape());
    let mut best_delta = delta.clone();
    let mut best_prob = input.surrogates.mean_target_prob(x, input.target)?;
    let mut aborted = false;
    let mut iterations_used = 0;

    for it in 0..params.iterations {
        let adv = x.add(&delta)?;
        let (prob, ce_grad) = input.surrogates.ce_input_gradient(&adv, input.target)?;
        if !prob.is_finite() || !ce_grad.all_finite() {
            aborted = true;
            break;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(delta.l2_norm_sq() + params.c * -prob.ln());
        }
        if prob > best_prob {
            best_prob = prob;
            best_delta = delta.clone();
        }
        // grad J = 2*delta + c * grad L_ce; the saliency prior only steers
        // the adversarial term.
        let mut step = delta.scale(2.0);
        match input.saliency {
            Some(mask) => step.axpy(params.c, &boost_by_saliency(&ce_grad, mask))?,
            None => step.axpy(params.c, &ce_grad)?,
        }
        delta.axpy(-params.eta, &step)?;
        // Budget, then box feasibility.
        for (d, xv) in delta.data_mut().iter_mut().zip(x.data()) {
            *d = d.clamp(-input.eps, input.eps);
            *d = (*xv + *d).clamp(0.0, 1.0) - *xv;
        }
        iterations_used = it + 1;
    }

    if !aborted {
        let adv = x.add(&delta)?;
        let prob = input.surrogates.mean_target_prob(&adv, input.target)?;
        if prob.is_finite() {
            if let Some(t) = trace {
                t.push(delta.l2_norm_sq() + params.c * -prob.ln());
            }
            if prob > best_prob {
                best_delta = delta;
            }
        }
    }

    let mut out = finish(AttackMethod::Cw, best_delta, input, iterations_used)?;
    out.diagnostics.aborted_non_finite = aborted;
    Ok(out)
}

/// Scales a gradient by `1 + mask[y, x]` per pixel, broadcasting over
/// channels; the info agent's soft prior.
fn boost_by_saliency(grad: &Tensor, mask: &Tensor) -> Tensor {
    let (c, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let mut boosted = grad.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = boosted.at3(ch, y, x) * (1.0 + mask.at2(y, x));
                boosted.set3(ch, y, x, v);
            }
        }
    }
    boosted
}
