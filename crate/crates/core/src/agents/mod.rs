//! The agent society around the attack loop.
//!
//! * info agent — summarizes the image into a semantic report (salient
//!   regions by windowed variance, plus a texture statistic),
//! * conductor — turns the report and baseline predictions into the attack
//!   constraints (budget, SSIM floor, target class),
//! * advisor — retunes each generator's hyperparameters from the history,
//! * critique — measures a blended candidate (black-box confidence,
//!   surrogate mean, SSIM),
//! * strategist — detects stagnation over a sliding window and escalates
//!   the constraints.
//!
//! Every agent has a deterministic heuristic policy. The info agent and
//! advisor can also delegate to a remote chat-completions backend
//! ([`remote`]); remote failures always fall back to the heuristic and are
//! reported as events, never as errors.

pub mod remote;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackMethod, CwParams, Diagnostics, JsmaParams, StaParams};
use crate::error::Result;
use crate::metrics::{ssim, SsimConfig};
use crate::mixer::MixWeights;
use crate::models::{BlindProbe, SurrogateView};
use crate::tensor::Tensor;

pub use remote::{RemoteClient, RemoteConfig};

/// Texture statistic (mean absolute adjacent-pixel difference) below which
/// an image reads as smooth, and above which as heavily textured.
const TEXTURE_LOW: f64 = 0.10;
const TEXTURE_HIGH: f64 = 0.25;
/// How much the conductor moves the SSIM floor on a non-neutral texture.
const TAU_TEXTURE_STEP: f64 = 0.03;
/// Most salient blocks reported per image.
const MAX_REGIONS: usize = 3;

/// Advisor safety caps for heuristic and remote proposals.
const CW_C_MAX: f64 = 1e6;
const CW_ETA_MIN: f64 = 1e-9;
const STA_GAMMA_MAX: f64 = 8.0;
const ITERATIONS_MAX: usize = 100_000;

/// An axis-aligned salient region, half-open pixel bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalientRegion {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    /// Relative saliency in `[0, 1]`.
    pub score: f64,
    pub label: String,
}

/// What the info agent saw in the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticReport {
    pub regions: Vec<SalientRegion>,
    /// Global texture statistic; higher is busier.
    pub texture: f64,
    pub summary: String,
}

impl SemanticReport {
    /// Neutral report used when the info agent is ablated away: no regions
    /// and a mid-band texture, so the conductor applies no adjustment.
    pub fn empty() -> Self {
        SemanticReport {
            regions: Vec::new(),
            texture: (TEXTURE_LOW + TEXTURE_HIGH) / 2.0,
            summary: String::new(),
        }
    }
}

/// The per-run attack constraints set by the conductor and escalated by
/// the strategist.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConstraints {
    pub eps: f64,
    pub tau: f64,
    pub target: usize,
}

/// Starting values for the constraints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDefaults {
    pub eps: f64,
    pub tau: f64,
    /// Fallback target when the conductor is ablated away.
    pub target: usize,
}

impl Default for ConstraintDefaults {
    fn default() -> Self {
        ConstraintDefaults {
            eps: 8.0 / 255.0,
            tau: 0.90,
            target: 0,
        }
    }
}

/// Baseline predictions of the three models on the clean image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselinePredictions {
    pub surrogate_a: usize,
    pub surrogate_b: usize,
    pub blind: usize,
}

impl BaselinePredictions {
    /// Majority vote; three voters over two classes never tie.
    pub fn majority(&self) -> usize {
        let votes = [self.surrogate_a, self.surrogate_b, self.blind];
        let ones = votes.iter().filter(|&&v| v == 1).count();
        usize::from(ones >= 2)
    }
}

/// The per-round feedback vector: black-box confidence, surrogate mean,
/// and SSIM, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritiqueVector {
    pub black_box: f64,
    pub surrogate_mean: f64,
    pub ssim: f64,
}

/// One closed-loop round in the history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Generator diagnostics in mixer order (CW, JSMA, STA).
    pub diagnostics: [Diagnostics; 3],
    pub weights: MixWeights,
    pub critique: CritiqueVector,
    /// Mixer score of the chosen weights this round.
    pub score: f64,
    /// Running maximum of `score` since the last constraint change.
    pub best_score_so_far: f64,
    /// Constraints escalated after this round.
    pub escalated: bool,
    pub eps: f64,
    pub tau: f64,
}

/// Stagnation and escalation policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategistConfig {
    /// Sliding window length.
    pub window: usize,
    /// Confidence ceiling under which the run counts as stuck.
    pub kappa: f64,
    /// Improvement range under which the run counts as flat.
    pub rho: f64,
    pub d_tau: f64,
    pub d_eps: f64,
    pub tau_min: f64,
    pub eps_max: f64,
}

impl Default for StrategistConfig {
    fn default() -> Self {
        StrategistConfig {
            window: 3,
            kappa: 0.5,
            rho: 0.01,
            d_tau: 0.05,
            d_eps: 2.0 / 255.0,
            tau_min: 0.60,
            eps_max: 16.0 / 255.0,
        }
    }
}

impl StrategistConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.window == 0 {
            return Err(Error::Config("strategist window must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa {} outside (0, 1)", self.kappa)));
        }
        if self.rho <= 0.0 || self.d_tau <= 0.0 || self.d_eps <= 0.0 {
            return Err(Error::Config(
                "rho, d_tau, and d_eps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_min) {
            return Err(Error::Config(format!("tau_min {} outside [0, 1]", self.tau_min)));
        }
        if !(self.eps_max > 0.0 && self.eps_max <= 1.0) {
            return Err(Error::Config(format!("eps_max {} outside (0, 1]", self.eps_max)));
        }
        Ok(())
    }
}

/// The generator hyperparameters the advisor tunes.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodParams {
    pub cw: CwParams,
    pub jsma: JsmaParams,
    pub sta: StaParams,
}

/// Which policy backs the info agent and advisor.
pub enum AgentBackend {
    Heuristic,
    Remote(RemoteClient),
}

/// Analyzes the image into a semantic report.
///
/// The heuristic computes windowed variance over a block grid and reports
/// the most salient blocks plus a texture statistic. The remote backend
/// sends the image to a vision endpoint and parses a structured reply; any
/// failure falls back to the heuristic and returns an event message.
pub fn info_analyze(x: &Tensor, backend: &AgentBackend) -> (SemanticReport, Option<String>) {
    match backend {
        AgentBackend::Heuristic => (heuristic_report(x), None),
        AgentBackend::Remote(client) => match client.analyze_image(x) {
            Ok(report) => (report, None),
            Err(e) => (
                heuristic_report(x),
                Some(format!("info agent fell back to heuristic: {e}")),
            ),
        },
    }
}

/// Local-variance saliency over a block grid plus a gradient-energy texture
/// statistic. A constant image yields no regions.
pub fn heuristic_report(x: &Tensor) -> SemanticReport {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    // Channel-mean plane.
    let mut plane = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] += x.at3(ch, i, j) / c as f64;
            }
        }
    }

    let block = (h.min(w) / 4).max(2);
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    let mut by = 0;
    while by + block <= h {
        let mut bx = 0;
        while bx + block <= w {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in by..by + block {
                for j in bx..bx + block {
                    let v = plane[i * w + j];
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let n = (block * block) as f64;
            let var = (sum_sq / n - (sum / n).powi(2)).max(0.0);
            blocks.push((var, by, bx));
            bx += block;
        }
        by += block;
    }
    blocks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let max_var = blocks.first().map_or(0.0, |b| b.0);

    let regions: Vec<SalientRegion> = blocks
        .iter()
        .take(MAX_REGIONS)
        .filter(|(var, _, _)| *var > 1e-9)
        .map(|&(var, by, bx)| SalientRegion {
            y0: by,
            x0: bx,
            y1: by + block,
            x1: bx + block,
            score: var / max_var,
            label: "high-variance block".to_string(),
        })
        .collect();

    // Mean absolute horizontal difference: cheap spectral proxy.
    let mut diff_sum = 0.0;
    let mut diff_count = 0usize;
    for i in 0..h {
        for j in 0..w - 1 {
            diff_sum += (plane[i * w + j + 1] - plane[i * w + j]).abs();
            diff_count += 1;
        }
    }
    let texture = if diff_count == 0 {
        0.0
    } else {
        diff_sum / diff_count as f64
    };

    let summary = format!(
        "{} salient block(s); texture statistic {:.4}",
        regions.len(),
        texture
    );
    SemanticReport {
        regions,
        texture,
        summary,
    }
}

/// Renders the report's regions into an `[h, w]` mask holding the maximum
/// region score per pixel. `None` when the report has no regions.
pub fn saliency_mask(report: &SemanticReport, h: usize, w: usize) -> Option<Tensor> {
    if report.regions.is_empty() {
        return None;
    }
    let mut mask = Tensor::zeros(&[h, w]);
    for r in &report.regions {
        for i in r.y0..r.y1.min(h) {
            for j in r.x0..r.x1.min(w) {
                let cur = mask.at2(i, j);
                mask.set2(i, j, cur.max(r.score.clamp(0.0, 1.0)));
            }
        }
    }
    Some(mask)
}

/// Sets the attack constraints from the report and baseline predictions:
/// smooth images tighten the SSIM floor, busy ones relax it, and the
/// target is the class the baseline majority did not predict.
pub fn conduct(
    report: &SemanticReport,
    baseline: &BaselinePredictions,
    defaults: &ConstraintDefaults,
    strategist: &StrategistConfig,
    num_classes: usize,
) -> AttackConstraints {
    let mut tau = defaults.tau;
    if report.texture < TEXTURE_LOW {
        tau += TAU_TEXTURE_STEP;
    } else if report.texture > TEXTURE_HIGH {
        tau -= TAU_TEXTURE_STEP;
    }
    AttackConstraints {
        eps: defaults.eps.min(strategist.eps_max),
        tau: tau.clamp(0.0, 1.0),
        target: (baseline.majority() + 1) % num_classes,
    }
}

/// Proposes updated hyperparameters for one method.
///
/// Heuristic: with fewer than two history entries the parameters stand;
/// when the surrogate mean fell since the previous round, CW doubles `c`
/// and halves `eta`, JSMA grows its step by 1.5x (clamped to the budget),
/// and STA shrinks `theta` to 2/3 while growing `gamma` by 1.25x. A remote
/// proposal replaces the heuristic only if it parses and passes range
/// validation; otherwise the heuristic result is used and an event is
/// returned.
pub fn advise(
    history: &[HistoryEntry],
    method: AttackMethod,
    params: &MethodParams,
    eps: f64,
    backend: &AgentBackend,
) -> (MethodParams, Option<String>) {
    if let AgentBackend::Remote(client) = backend {
        match client
            .propose_params(history, method, params, eps)
            .and_then(|p| {
                validate_proposal(&p, method, eps)?;
                Ok(p)
            }) {
            Ok(p) => return (p, None),
            Err(e) => {
                let heuristic = heuristic_advise(history, method, params, eps);
                return (
                    heuristic,
                    Some(format!("advisor({}) fell back to heuristic: {e}", method.name())),
                );
            }
        }
    }
    (heuristic_advise(history, method, params, eps), None)
}

fn heuristic_advise(
    history: &[HistoryEntry],
    method: AttackMethod,
    params: &MethodParams,
    eps: f64,
) -> MethodParams {
    let mut out = params.clone();
    let n = history.len();
    if n < 2 {
        return out;
    }
    let falling =
        history[n - 1].critique.surrogate_mean < history[n - 2].critique.surrogate_mean;
    if !falling {
        return out;
    }
    match method {
        AttackMethod::Cw => {
            out.cw.c = (out.cw.c * 2.0).min(CW_C_MAX);
            out.cw.eta = (out.cw.eta * 0.5).max(CW_ETA_MIN);
        }
        AttackMethod::Jsma => {
            out.jsma.step = (out.jsma.step * 1.5).min(eps).min(1.0);
        }
        AttackMethod::Sta => {
            out.sta.theta *= 2.0 / 3.0;
            out.sta.gamma = (out.sta.gamma * 1.25).min(STA_GAMMA_MAX);
        }
    }
    out
}

/// Range validation applied to remote advisor proposals.
fn validate_proposal(p: &MethodParams, method: AttackMethod, eps: f64) -> Result<()> {
    use crate::error::Error;
    match method {
        AttackMethod::Cw => {
            p.cw.validate()?;
            if p.cw.c > CW_C_MAX || p.cw.eta > 1.0 || p.cw.iterations > ITERATIONS_MAX {
                return Err(Error::Remote(format!(
                    "cw proposal out of range: c={}, eta={}, iterations={}",
                    p.cw.c, p.cw.eta, p.cw.iterations
                )));
            }
        }
        AttackMethod::Jsma => {
            p.jsma.validate()?;
            if p.jsma.step > eps || p.jsma.iterations > ITERATIONS_MAX {
                return Err(Error::Remote(format!(
                    "jsma proposal out of range: step={} (eps {eps}), iterations={}",
                    p.jsma.step, p.jsma.iterations
                )));
            }
        }
        AttackMethod::Sta => {
            p.sta.validate()?;
            if p.sta.gamma > STA_GAMMA_MAX || p.sta.t_sta > ITERATIONS_MAX || p.sta.s_max > 8.0 {
                return Err(Error::Remote(format!(
                    "sta proposal out of range: gamma={}, t_sta={}, s_max={}",
                    p.sta.gamma, p.sta.t_sta, p.sta.s_max
                )));
            }
        }
    }
    Ok(())
}

/// Measures a blended candidate. Consumes one blind query; `None` when the
/// budget is exhausted.
pub fn critique(
    x: &Tensor,
    x_master: &Tensor,
    probe: &BlindProbe<'_>,
    surrogates: &SurrogateView<'_>,
    target: usize,
    ssim_config: &SsimConfig,
) -> Result<Option<CritiqueVector>> {
    let Some(black_box) = probe.target_prob(x_master, target)? else {
        return Ok(None);
    };
    let surrogate_mean = surrogates.mean_target_prob(x_master, target)?;
    let sim = ssim(x, x_master, ssim_config)?.clamp(0.0, 1.0);
    Ok(Some(CritiqueVector {
        black_box,
        surrogate_mean,
        ssim: sim,
    }))
}

/// True when the last `window` rounds are both unconfident (max black-box
/// confidence below `kappa`) and flat (range below `rho`). Needs at least
/// two rounds so a range is defined.
pub fn detect_stagnation(history: &[HistoryEntry], cfg: &StrategistConfig) -> bool {
    if history.len() < 2 {
        return false;
    }
    let start = history.len().saturating_sub(cfg.window);
    let window = &history[start..];
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for entry in window {
        max = max.max(entry.critique.black_box);
        min = min.min(entry.critique.black_box);
    }
    max < cfg.kappa && (max - min) < cfg.rho
}

/// Relaxes the SSIM floor and widens the budget, both bounded.
pub fn escalate(constraints: &AttackConstraints, cfg: &StrategistConfig) -> AttackConstraints {
    AttackConstraints {
        eps: (constraints.eps + cfg.d_eps).min(cfg.eps_max),
        tau: (constraints.tau - cfg.d_tau).max(cfg.tau_min),
        target: constraints.target,
    }
}
