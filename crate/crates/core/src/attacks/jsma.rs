//! Sparse saliency-pair attack.
//!
//! Each iteration scores tensor coordinates from the ensemble-mean logit
//! Jacobian: `a_i = dZ_t/dx_i` (pull toward the target) and
//! `b_i = sum_{j != t} dZ_j/dx_i` (push on the other logits). Pairs
//! `(p, q)` are scored by `-(a_p + a_q)(b_p + b_q)` subject to
//! `a_p + a_q > 0` and `b_p + b_q < 0`; the winning coordinates move by
//! `+step` and the delta is re-projected.
//!
//! The exact pair search is O(d^2), so candidates are first narrowed to
//! the 64 best coordinates by `a` (restricted to salient regions when a
//! saliency prior exists), then paired exhaustively within that pool.
//! When no pair satisfies both sign constraints the iteration falls back
//! to maximizing `a_p + a_q` alone, which keeps tiny models moving.

use std::collections::BTreeSet;

use crate::attacks::{finish, AttackInput, AttackMethod, CandidateDelta, JsmaParams};
use crate::error::Result;
use crate::tensor::Tensor;

const POOL_SIZE: usize = 64;
/// Coordinates this close to the budget or box ceiling cannot move and are
/// excluded from the candidate pool.
const SATURATION_SLACK: f64 = 1e-12;
/// Surrogate mean probability above which the search stops early.
const SUCCESS_PROB: f64 = 0.5;

pub fn jsma_generate(input: &AttackInput<'_>, params: &JsmaParams) -> Result<CandidateDelta> {
    params.validate()?;
    let x = input.x;
    let d = x.len();
    let k = input.surrogates.num_classes();
    let mut delta = Tensor::zeros(x.shape());
    let mut active: BTreeSet<usize> = BTreeSet::new();
    let mut iterations_used = 0;

    for it in 0..params.iterations {
        let adv = x.add(&delta)?;
        if input.surrogates.mean_target_prob(&adv, input.target)? > SUCCESS_PROB {
            break;
        }
        let jac = input.surrogates.mean_logit_jacobian(&adv)?;
        if !jac.all_finite() {
            break;
        }
        let mut scores_a = vec![0.0; d];
        let mut scores_b = vec![0.0; d];
        for i in 0..d {
            scores_a[i] = jac.data()[input.target * d + i];
            for j in 0..k {
                if j != input.target {
                    scores_b[i] += jac.data()[j * d + i];
                }
            }
        }

        let pool = candidate_pool(input, &delta, &scores_a);
        if pool.is_empty() {
            break;
        }
        let selection = match params.top_k {
            1 => select_single(&pool, &scores_a, &scores_b),
            _ => select_pair(&pool, &scores_a, &scores_b),
        };
        let Some(coords) = selection else { break };

        for &i in &coords {
            delta.data_mut()[i] += params.step;
            active.insert(i);
        }
        for (dv, xv) in delta.data_mut().iter_mut().zip(x.data()) {
            *dv = dv.clamp(-input.eps, input.eps);
            *dv = (*xv + *dv).clamp(0.0, 1.0) - *xv;
        }
        iterations_used = it + 1;
    }

    let mut out = finish(AttackMethod::Jsma, delta, input, iterations_used)?;
    out.diagnostics.active_coords = Some(active.len());
    Ok(out)
}

/// Movable coordinates ranked by `a` descending (ties to the lower index),
/// truncated to the pool size. Salient regions, when provided, filter the
/// pool first; an empty filtered pool falls back to all coordinates.
fn candidate_pool(input: &AttackInput<'_>, delta: &Tensor, scores_a: &[f64]) -> Vec<usize> {
    let x = input.x;
    let movable = |i: usize| {
        delta.data()[i] < input.eps - SATURATION_SLACK
            && x.data()[i] + delta.data()[i] < 1.0 - SATURATION_SLACK
    };
    let in_saliency = |i: usize| match input.saliency {
        Some(mask) => {
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let pixel = i % (h * w);
            mask.data()[pixel] > 0.0
        }
        None => true,
    };
    let mut pool: Vec<usize> = (0..x.len()).filter(|&i| movable(i) && in_saliency(i)).collect();
    if pool.is_empty() && input.saliency.is_some() {
        pool = (0..x.len()).filter(|&i| movable(i)).collect();
    }
    pool.sort_by(|&p, &q| {
        scores_a[q]
            .partial_cmp(&scores_a[p])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(p.cmp(&q))
    });
    pool.truncate(POOL_SIZE);
    pool
}

fn select_single(pool: &[usize], a: &[f64], b: &[f64]) -> Option<Vec<usize>> {
    let mut best: Option<(f64, usize)> = None;
    for &p in pool {
        if a[p] > 0.0 && b[p] < 0.0 {
            let s = -a[p] * b[p];
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, p));
            }
        }
    }
    if best.is_none() {
        // Relaxed fallback: strongest pull toward the target.
        for &p in pool {
            if best.is_none_or(|(bs, _)| a[p] > bs) {
                best = Some((a[p], p));
            }
        }
    }
    best.map(|(_, p)| vec![p])
}

fn select_pair(pool: &[usize], a: &[f64], b: &[f64]) -> Option<Vec<usize>> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (pi, &p) in pool.iter().enumerate() {
        for &q in &pool[pi + 1..] {
            let alpha = a[p] + a[q];
            let beta = b[p] + b[q];
            if alpha > 0.0 && beta < 0.0 {
                let s = -alpha * beta;
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, p, q));
                }
            }
        }
    }
    if best.is_none() {
        for (pi, &p) in pool.iter().enumerate() {
            for &q in &pool[pi + 1..] {
                let alpha = a[p] + a[q];
                if best.is_none_or(|(bs, _, _)| alpha > bs) {
                    best = Some((alpha, p, q));
                }
            }
        }
    }
    match best {
        Some((_, p, q)) => Some(vec![p, q]),
        // A single movable coordinate left: degrade to top_k = 1.
        None if pool.len() == 1 => Some(vec![pool[0]]),
        None => None,
    }
}
