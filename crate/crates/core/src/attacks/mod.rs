//! Candidate perturbation generators.
//!
//! Each generator consumes the same [`AttackInput`] — the clean image, the
//! target class, the l-inf budget, and gradient access to the surrogate
//! ensemble — and emits a [`CandidateDelta`]: a budget-certified
//! perturbation plus lightweight diagnostics. Generators are pure given
//! their inputs and seed, so they can run concurrently over shared
//! read-only models.

mod cw;
mod jsma;
mod sta;

pub use cw::{cw_generate, cw_generate_traced};
pub use jsma::jsma_generate;
pub use sta::{flow_smoothness, flow_smoothness_gradient, sta_generate};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SurrogateView;
use crate::tensor::Tensor;

/// The three perturbation geometries, in mixer index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Cw,
    Jsma,
    Sta,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 3] = [AttackMethod::Cw, AttackMethod::Jsma, AttackMethod::Sta];

    pub fn index(self) -> usize {
        match self {
            AttackMethod::Cw => 0,
            AttackMethod::Jsma => 1,
            AttackMethod::Sta => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Cw => "cw",
            AttackMethod::Jsma => "jsma",
            AttackMethod::Sta => "sta",
        }
    }
}

/// CW settings: `c` weighs the adversarial term against the l2 norm,
/// `eta` is the descent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwParams {
    pub c: f64,
    pub eta: f64,
    pub iterations: usize,
}

impl Default for CwParams {
    fn default() -> Self {
        CwParams {
            c: 10.0,
            eta: 0.01,
            iterations: 1000,
        }
    }
}

impl CwParams {
    pub fn validate(&self) -> Result<()> {
        if self.c <= 0.0 || self.eta <= 0.0 {
            return Err(Error::Config(format!(
                "cw params must be positive: c={}, eta={}",
                self.c, self.eta
            )));
        }
        Ok(())
    }
}

/// JSMA settings: per-pixel increment, pixels per iteration (1 or 2),
/// and the iteration cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JsmaParams {
    pub step: f64,
    pub top_k: usize,
    pub iterations: usize,
}

impl Default for JsmaParams {
    fn default() -> Self {
        JsmaParams {
            step: 8.0 / 255.0,
            top_k: 2,
            iterations: 80,
        }
    }
}

impl JsmaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Config(format!(
                "jsma step {} outside (0, 1]",
                self.step
            )));
        }
        if !(self.top_k == 1 || self.top_k == 2) {
            return Err(Error::Config(format!(
                "jsma top_k {} must be 1 or 2",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// STA settings: flow descent step `gamma`, iteration count, initial flow
/// scale `s_min`, hard per-component flow clamp `s_max`, and smoothness
/// weight `theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaParams {
    pub gamma: f64,
    pub t_sta: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub theta: f64,
}

impl Default for StaParams {
    fn default() -> Self {
        StaParams {
            gamma: 0.5,
            t_sta: 60,
            s_min: 0.0,
            s_max: 2.0,
            theta: 0.1,
        }
    }
}

impl StaParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!("sta gamma {} must be positive", self.gamma)));
        }
        if !(0.0 <= self.s_min && self.s_min <= self.s_max) {
            return Err(Error::Config(format!(
                "sta flow bounds need 0 <= s_min <= s_max, got {} and {}",
                self.s_min, self.s_max
            )));
        }
        if self.theta < 0.0 {
            return Err(Error::Config(format!(
                "sta theta {} must be nonnegative",
                self.theta
            )));
        }
        Ok(())
    }
}

/// A perturbation with its l-inf budget certificate: construction projects
/// onto the budget and the image box, so `x + delta` is always feasible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    delta: Tensor,
    eps: f64,
}

impl Perturbation {
    /// Certifies `delta` against `eps` and the `[0,1]` box around `x`.
    pub fn certify(delta: Tensor, x: &Tensor, eps: f64) -> Result<Self> {
        let mut d = project_linf(&delta, eps);
        let adv = project_box(&x.add(&d)?);
        d = adv.sub(x)?;
        Ok(Perturbation { delta: d, eps })
    }

    pub fn zero(x: &Tensor, eps: f64) -> Self {
        Perturbation {
            delta: Tensor::zeros(x.shape()),
            eps,
        }
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Per-candidate diagnostics published into the run history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Surrogate mean target probability of the projected candidate.
    pub surrogate_mean_prob: f64,
    pub iterations_used: usize,
    /// Coordinates touched by JSMA.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub active_coords: Option<usize>,
    /// Largest flow magnitude reached by STA, in pixels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_max: Option<f64>,
    /// Set when a non-finite loss aborted the search early.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted_non_finite: bool,
}

impl Diagnostics {
    fn new(surrogate_mean_prob: f64, iterations_used: usize) -> Self {
        Diagnostics {
            surrogate_mean_prob,
            iterations_used,
            active_coords: None,
            flow_max: None,
            aborted_non_finite: false,
        }
    }
}

/// One generator's output: the certified delta plus diagnostics.
#[derive(Clone, Debug)]
pub struct CandidateDelta {
    pub method: AttackMethod,
    pub delta: Perturbation,
    pub diagnostics: Diagnostics,
}

impl CandidateDelta {
    /// A do-nothing candidate carrying the baseline probability.
    pub fn zero(method: AttackMethod, x: &Tensor, eps: f64, baseline_prob: f64) -> Self {
        CandidateDelta {
            method,
            delta: Perturbation::zero(x, eps),
            diagnostics: Diagnostics::new(baseline_prob, 0),
        }
    }
}

/// Everything a generator needs: shared, read-only.
pub struct AttackInput<'a> {
    pub x: &'a Tensor,
    pub target: usize,
    pub eps: f64,
    pub surrogates: &'a SurrogateView<'a>,
    /// Optional `[h, w]` saliency prior in `[0, 1]` from the info agent.
    pub saliency: Option<&'a Tensor>,
    pub seed: u64,
}

/// Clips every entry to `[-eps, eps]` (idempotent).
pub fn project_linf(delta: &Tensor, eps: f64) -> Tensor {
    delta.map(|v| v.clamp(-eps, eps))
}

/// Clips every entry to `[0, 1]` (idempotent).
pub fn project_box(x_plus_delta: &Tensor) -> Tensor {
    x_plus_delta.map(|v| v.clamp(0.0, 1.0))
}

/// Certifies a raw delta and measures its post-projection diagnostics.
pub(crate) fn finish_candidate(
    method: AttackMethod,
    raw_delta: Tensor,
    input: &AttackInput<'_>,
    iterations_used: usize,
) -> Result<CandidateDelta> {
    let delta = Perturbation::certify(raw_delta, input.x, input.eps)?;
    let adv = input.x.add(delta.delta())?;
    let prob = input.surrogates.mean_target_prob(&adv, input.target)?;
    Ok(CandidateDelta {
        method,
        delta,
        diagnostics: Diagnostics::new(prob, iterations_used),
    })
}

pub(crate) use finish_candidate as finish;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_linf_clips_and_is_idempotent() {
        let eps = 8.0 / 255.0;
        let t = Tensor::from_vec(&[3], vec![0.9, -0.5, 0.01]).unwrap();
        let once = project_linf(&t, eps);
        assert_eq!(once.data()[0], eps);
        assert_eq!(once.data()[1], -eps);
        assert_eq!(once.data()[2], 0.01);
        let twice = project_linf(&once, eps);
        assert_eq!(once, twice);
    }

    #[test]
    fn project_linf_leaves_feasible_delta_unchanged() {
        let t = Tensor::from_vec(&[3], vec![0.01, -0.02, 0.0]).unwrap();
        assert_eq!(project_linf(&t, 0.05), t);
    }

    #[test]
    fn project_box_clips_and_is_idempotent() {
        let t = Tensor::from_vec(&[3], vec![1.2, -0.1, 0.5]).unwrap();
        let once = project_box(&t);
        assert_eq!(once.data(), &[1.0, 0.0, 0.5]);
        assert_eq!(project_box(&once), once);
    }

    #[test]
    fn certify_enforces_budget_and_box() {
        let x = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.5, 0.99]).unwrap();
        let raw = Tensor::from_vec(&[4], vec![-0.5, 0.5, 0.02, 0.03]).unwrap();
        let eps = 0.03;
        let p = Perturbation::certify(raw, &x, eps).unwrap();
        for (d, xv) in p.delta().data().iter().zip(x.data()) {
            assert!(d.abs() <= eps + 1e-15);
            let adv = xv + d;
            assert!((0.0..=1.0).contains(&adv));
        }
    }

    #[test]
    fn params_validate_ranges() {
        assert!(CwParams { c: 0.0, ..CwParams::default() }.validate().is_err());
        assert!(JsmaParams { top_k: 3, ..JsmaParams::default() }.validate().is_err());
        assert!(JsmaParams { step: 0.0, ..JsmaParams::default() }.validate().is_err());
        assert!(StaParams { s_min: 2.0, s_max: 1.0, ..StaParams::default() }
            .validate()
            .is_err());
        assert!(CwParams::default().validate().is_ok());
        assert!(JsmaParams::default().validate().is_ok());
        assert!(StaParams::default().validate().is_ok());
    }
}
