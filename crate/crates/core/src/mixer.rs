//! Blending candidate perturbations with simplex weights.
//!
//! The blend is the convex combination of the three candidate deltas,
//! re-projected onto the l-inf budget and the image box. Weights are scored
//! by `S(w) = lambda * p_bb + (1 - lambda) * p_surr - mu * max(0, tau - ssim)`
//! and searched by randomized hill climbing seeded at the uniform point, the
//! three vertices, and optionally the previous round's winner — so the
//! search never returns anything worse than plain averaging or any single
//! method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{project_box, project_linf, CandidateDelta};
use crate::error::{Error, Result};
use crate::metrics::{ssim, SsimConfig};
use crate::models::{BlindProbe, SurrogateView};
use crate::tensor::Tensor;

/// A point on the 3-simplex weighting (CW, JSMA, STA).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights([f64; 3]);

impl MixWeights {
    /// Validates nonnegativity and unit sum (to 1e-12).
    pub fn new(w: [f64; 3]) -> Result<Self> {
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config(format!("negative or non-finite weight in {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights {w:?} sum to {sum}, not 1")));
        }
        Ok(MixWeights(w))
    }

    pub fn uniform() -> Self {
        MixWeights([1.0 / 3.0; 3])
    }

    /// The vertex putting all weight on one method (by mixer index).
    pub fn vertex(index: usize) -> Self {
        let mut w = [0.0; 3];
        w[index] = 1.0;
        MixWeights(w)
    }

    /// Projects arbitrary reals onto the simplex: negatives clip to zero,
    /// then the result renormalizes. A degenerate all-zero vector maps to
    /// the uniform point.
    pub fn project(raw: [f64; 3]) -> Self {
        let mut w = raw.map(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 });
        let sum: f64 = w.iter().sum();
        if sum <= 1e-12 {
            return MixWeights::uniform();
        }
        for v in &mut w {
            *v /= sum;
        }
        MixWeights(w)
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

/// Mixer settings. `lambda` prioritizes black-box confidence over surrogate
/// stability; `mu` prices SSIM violations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub lambda: f64,
    pub mu: f64,
    pub hill_iters: usize,
    pub proposal_sigma: f64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            lambda: 0.7,
            mu: 2.0,
            hill_iters: 500,
            proposal_sigma: 0.15,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("mixer lambda {} outside (0, 1)", self.lambda)));
        }
        if self.mu <= 0.0 {
            return Err(Error::Config(format!("mixer mu {} must be positive", self.mu)));
        }
        if self.proposal_sigma <= 0.0 {
            return Err(Error::Config(format!(
                "mixer proposal sigma {} must be positive",
                self.proposal_sigma
            )));
        }
        Ok(())
    }
}

/// Convex combination of the candidate deltas, clipped to the budget and
/// the image box. Output stays within `eps` of `x` in l-inf and in `[0,1]`.
pub fn blend(
    deltas: &[CandidateDelta; 3],
    w: &MixWeights,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut mix = Tensor::zeros(x.shape());
    for (delta, &weight) in deltas.iter().zip(&w.0) {
        mix.axpy(weight, delta.delta.delta())?;
    }
    let mix = project_linf(&mix, eps);
    Ok(project_box(&x.add(&mix)?))
}

/// Everything `score` needs to evaluate a weight vector.
pub struct ScoreContext<'a> {
    pub x: &'a Tensor,
    pub deltas: &'a [CandidateDelta; 3],
    pub eps: f64,
    pub tau: f64,
    pub target: usize,
    pub surrogates: &'a SurrogateView<'a>,
    pub probe: &'a BlindProbe<'a>,
    pub config: &'a MixerConfig,
    pub ssim_config: &'a SsimConfig,
}

/// Scores one weight vector; `None` when the blind query budget ran out.
/// Every call consumes one blind query.
pub fn score(w: &MixWeights, ctx: &ScoreContext<'_>) -> Result<Option<f64>> {
    let candidate = blend(ctx.deltas, w, ctx.x, ctx.eps)?;
    let Some(p_bb) = ctx.probe.target_prob(&candidate, ctx.target)? else {
        return Ok(None);
    };
    let p_surr = ctx.surrogates.mean_target_prob(&candidate, ctx.target)?;
    let sim = ssim(ctx.x, &candidate, ctx.ssim_config)?;
    let penalty = ctx.config.mu * (ctx.tau - sim).max(0.0);
    Ok(Some(
        ctx.config.lambda * p_bb + (1.0 - ctx.config.lambda) * p_surr - penalty,
    ))
}

/// Result of a hill-climb search.
#[derive(Clone, Copy, Debug)]
pub struct HillClimbOutcome {
    pub weights: MixWeights,
    pub score: f64,
    /// Scoring stopped early because the blind budget ran out.
    pub exhausted: bool,
    pub evaluations: usize,
}

/// Randomized hill climbing over the simplex against the real score
/// function. Returns `None` when not even one seed point could be scored.
pub fn hill_climb(
    ctx: &ScoreContext<'_>,
    seed_point: Option<MixWeights>,
    rng_seed: u64,
) -> Result<Option<HillClimbOutcome>> {
    let mut score_fn = |w: &MixWeights| score(w, ctx);
    hill_climb_fn(
        &mut score_fn,
        ctx.config.hill_iters,
        ctx.config.proposal_sigma,
        seed_point,
        rng_seed,
    )
}

/// Hill climbing against an arbitrary score oracle; the oracle returns
/// `Ok(None)` to signal that evaluation is no longer possible.
///
/// Seeds the uniform point first, then the optional carry-over point, then
/// the three vertices; proposals perturb the incumbent with isotropic
/// Gaussian noise re-projected onto the simplex. Only strict improvements
/// are accepted, so the result always dominates every seed that was scored.
pub fn hill_climb_fn<F>(
    score_fn: &mut F,
    iterations: usize,
    proposal_sigma: f64,
    seed_point: Option<MixWeights>,
    rng_seed: u64,
) -> Result<Option<HillClimbOutcome>>
where
    F: FnMut(&MixWeights) -> Result<Option<f64>>,
{
    let mut best: Option<(MixWeights, f64)> = None;
    let mut evaluations = 0usize;
    let mut exhausted = false;

    let mut seeds = vec![MixWeights::uniform()];
    if let Some(p) = seed_point {
        seeds.push(p);
    }
    seeds.extend((0..3).map(MixWeights::vertex));

    let consider = |w: MixWeights, s: f64, best: &mut Option<(MixWeights, f64)>| {
        if best.as_ref().is_none_or(|(_, bs)| s > *bs) {
            *best = Some((w, s));
        }
    };

    for w in seeds {
        match score_fn(&w)? {
            Some(s) => {
                evaluations += 1;
                consider(w, s, &mut best);
            }
            None => {
                exhausted = true;
                break;
            }
        }
    }

    if !exhausted {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for _ in 0..iterations {
            let (incumbent, _) = best.as_ref().expect("seeded above");
            let mut raw = incumbent.as_array();
            for v in &mut raw {
                *v += proposal_sigma * gaussian(&mut rng);
            }
            let proposal = MixWeights::project(raw);
            match score_fn(&proposal)? {
                Some(s) => {
                    evaluations += 1;
                    consider(proposal, s, &mut best);
                }
                None => {
                    exhausted = true;
                    break;
                }
            }
        }
    }

    Ok(best.map(|(weights, score)| HillClimbOutcome {
        weights,
        score,
        exhausted,
        evaluations,
    }))
}

/// Standard normal draw via Box-Muller, fed from the seeded stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(v: f64) -> Result<Option<f64>> {
        Ok(Some(v))
    }

    #[test]
    fn weights_validate() {
        assert!(MixWeights::new([0.5, 0.25, 0.25]).is_ok());
        assert!(MixWeights::new([0.5, 0.6, -0.1]).is_err());
        assert!(MixWeights::new([0.5, 0.25, 0.2]).is_err());
    }

    #[test]
    fn project_clips_and_renormalizes() {
        let w = MixWeights::project([2.0, -1.0, 2.0]).as_array();
        assert_eq!(w, [0.5, 0.0, 0.5]);
        assert_eq!(
            MixWeights::project([0.0, 0.0, 0.0]).as_array(),
            MixWeights::uniform().as_array()
        );
        assert_eq!(
            MixWeights::project([f64::NAN, -3.0, 0.0]).as_array(),
            MixWeights::uniform().as_array()
        );
    }

    #[test]
    fn flat_score_returns_uniform() {
        let mut f = |_: &MixWeights| ok(0.42);
        let out = hill_climb_fn(&mut f, 50, 0.15, None, 7).unwrap().unwrap();
        assert_eq!(out.weights.as_array(), MixWeights::uniform().as_array());
        assert_eq!(out.score, 0.42);
    }

    #[test]
    fn affine_score_finds_the_vertex() {
        let mut f = |w: &MixWeights| ok(w.as_array()[0]);
        let out = hill_climb_fn(&mut f, 50, 0.15, None, 7).unwrap().unwrap();
        assert!((out.weights.as_array()[0] - 1.0).abs() < 1e-9);
        assert!((out.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn concave_quadratic_approaches_grid_optimum() {
        // Maximum at an interior simplex point.
        let peak = [0.5, 0.3, 0.2];
        let mut f = |w: &MixWeights| {
            let a = w.as_array();
            ok(-(0..3).map(|i| (a[i] - peak[i]).powi(2)).sum::<f64>())
        };
        let out = hill_climb_fn(&mut f, 500, 0.15, None, 3).unwrap().unwrap();

        // 0.01-step brute-force grid over the simplex.
        let mut grid_best = f64::NEG_INFINITY;
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                let s = -(0..3).map(|k| (w[k] - peak[k]).powi(2)).sum::<f64>();
                grid_best = grid_best.max(s);
            }
        }
        assert!(
            out.score >= grid_best - 1e-2,
            "hill climb {} vs grid {grid_best}",
            out.score
        );
    }

    #[test]
    fn dominates_every_seed() {
        // Deterministic but lumpy landscape.
        let mut f = |w: &MixWeights| {
            let a = w.as_array();
            ok((a[0] * 7.3).sin() + (a[1] * 3.1).cos() * 0.5 - a[2] * a[2])
        };
        let out = hill_climb_fn(&mut f, 200, 0.15, None, 11).unwrap().unwrap();
        let mut seeds = vec![MixWeights::uniform()];
        seeds.extend((0..3).map(MixWeights::vertex));
        for s in seeds {
            let v = f(&s).unwrap().unwrap();
            assert!(out.score >= v - 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let make = || {
            let mut f = |w: &MixWeights| {
                let a = w.as_array();
                ok(a[0] * 0.2 + (a[1] * 9.0).sin() * 0.3)
            };
            hill_climb_fn(&mut f, 100, 0.15, None, 99).unwrap().unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.weights.as_array(), b.weights.as_array());
        assert_eq!(a.score, b.score);
    }

    #[test]
    fn exhaustion_mid_search_returns_best_so_far() {
        let mut calls = 0;
        let mut f = |w: &MixWeights| {
            calls += 1;
            if calls > 6 {
                Ok(None)
            } else {
                ok(w.as_array()[1])
            }
        };
        let out = hill_climb_fn(&mut f, 100, 0.15, None, 5).unwrap().unwrap();
        assert!(out.exhausted);
        assert!((out.score - 1.0).abs() < 1e-12); // vertex 1 was seeded
    }

    #[test]
    fn immediate_exhaustion_returns_none() {
        let mut f = |_: &MixWeights| -> Result<Option<f64>> { Ok(None) };
        assert!(hill_climb_fn(&mut f, 10, 0.15, None, 5).unwrap().is_none());
    }
}
