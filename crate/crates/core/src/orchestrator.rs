//! The end-to-end attack loop.
//!
//! One run: analyze the image and fix the constraints, then iterate —
//! retune each generator, produce the three candidate deltas concurrently,
//! search blend weights, measure the blend, and escalate the constraints
//! when progress stalls — until the blind confidence clears the success
//! threshold, the iteration cap is reached, or the blind query budget runs
//! out. Blind mode returns the last blended image; white-box mode picks the
//! best of the pure candidates and the blend by a confidence-and-SSIM
//! score.
//!
//! Determinism: given the same image, models, config, and heuristic
//! backends, a run reproduces bit-identical results; all randomness derives
//! from the config seed.

use serde::{Deserialize, Serialize};

use crate::agents::{
    advise, conduct, critique, detect_stagnation, escalate, info_analyze, saliency_mask,
    AgentBackend, AttackConstraints, BaselinePredictions, ConstraintDefaults, CritiqueVector,
    HistoryEntry, MethodParams, SemanticReport, StrategistConfig,
};
use crate::attacks::{
    cw_generate, jsma_generate, sta_generate, AttackInput, AttackMethod, CandidateDelta,
};
use crate::error::{Error, Result};
use crate::metrics::{ssim, SsimConfig};
use crate::mixer::{blend, hill_climb, MixWeights, MixerConfig, ScoreContext};
use crate::models::{ModelRole, ModelSet};
use crate::tensor::Tensor;

/// Output rule: blind returns the blend, white-box selects among the pure
/// attacks and the blend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Blind,
    Whitebox,
}

/// Which parts of the loop are active, mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Everything on.
    Full,
    /// No weight search: the blend is fixed at the uniform point.
    UniformAveraging,
    /// The info agent is replaced by an empty report.
    NoInfo,
    /// Additionally the constraints stay at their defaults for the whole
    /// run: no conductor adjustment and no escalation.
    NoInfoNoConductor,
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Success,
    Budget,
    Iterations,
}

/// Full configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub ablation: AblationMode,
    /// Lock the blend onto one generator (the single-method baselines).
    pub single_method: Option<AttackMethod>,
    pub max_iterations: usize,
    pub max_blind_queries: u64,
    /// Blind confidence above which the run counts as converged.
    pub success_threshold: f64,
    pub defaults: ConstraintDefaults,
    pub mixer: MixerConfig,
    pub strategist: StrategistConfig,
    pub methods: MethodParams,
    pub ssim: SsimConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Blind,
            ablation: AblationMode::Full,
            single_method: None,
            max_iterations: 8,
            max_blind_queries: 10_000,
            success_threshold: 0.5,
            defaults: ConstraintDefaults::default(),
            mixer: MixerConfig::default(),
            strategist: StrategistConfig::default(),
            methods: MethodParams::default(),
            ssim: SsimConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_blind_queries == 0 {
            return Err(Error::Config("max_blind_queries must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return Err(Error::Config(format!(
                "success_threshold {} outside [0, 1]",
                self.success_threshold
            )));
        }
        if !(self.defaults.eps > 0.0 && self.defaults.eps <= 1.0) {
            return Err(Error::Config(format!(
                "default eps {} outside (0, 1]",
                self.defaults.eps
            )));
        }
        if !(0.0..=1.0).contains(&self.defaults.tau) {
            return Err(Error::Config(format!(
                "default tau {} outside [0, 1]",
                self.defaults.tau
            )));
        }
        self.mixer.validate()?;
        self.strategist.validate()?;
        self.methods.cw.validate()?;
        self.methods.jsma.validate()?;
        self.methods.sta.validate()?;
        Ok(())
    }
}

/// Everything a run produced.
#[derive(Debug, Serialize)]
pub struct RunResult {
    /// The adversarial image selected by the output rule.
    #[serde(skip)]
    pub final_image: Tensor,
    /// Which candidate the output rule picked.
    pub selection: String,
    pub reason: StopReason,
    /// Blind queries consumed by this run.
    pub query_count: u64,
    pub history: Vec<HistoryEntry>,
    pub final_critique: Option<CritiqueVector>,
    pub final_constraints: AttackConstraints,
    /// Baseline predictions on the clean image.
    pub baseline: BaselinePredictions,
    /// Remote fallbacks, escalations, and budget cut-offs.
    pub events: Vec<String>,
}

/// Executes the loop against a trained model set.
pub fn run(
    x: &Tensor,
    models: &ModelSet,
    config: &RunConfig,
    backend: &AgentBackend,
) -> Result<RunResult> {
    config.validate()?;
    if x.shape() != models.input_shape() {
        return Err(Error::Config(format!(
            "image shape {:?} does not match the models' {:?}",
            x.shape(),
            models.input_shape()
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("image entries must lie in [0, 1]".into()));
    }
    if config.defaults.target >= models.num_classes() {
        return Err(Error::Config(format!(
            "default target {} out of range for {} classes",
            config.defaults.target,
            models.num_classes()
        )));
    }

    let surrogates = models.surrogates();
    let probe = models.blind_probe(config.max_blind_queries);
    let mut events: Vec<String> = Vec::new();

    // Phase 1: reconnaissance, baseline, constraints.
    let report = match config.ablation {
        AblationMode::Full | AblationMode::UniformAveraging => {
            let (report, fallback) = info_analyze(x, backend);
            if let Some(event) = fallback {
                events.push(event);
            }
            report
        }
        AblationMode::NoInfo | AblationMode::NoInfoNoConductor => SemanticReport::empty(),
    };
    let (pred_a, _) = models.evaluate_offline(ModelRole::SurrogateA, x)?;
    let (pred_b, _) = models.evaluate_offline(ModelRole::SurrogateB, x)?;
    let Some(blind_probs) = probe.probabilities(x)? else {
        return Ok(finish_run(
            x, None, &[], None, baseline_stub(pred_a, pred_b), &probe,
            StopReason::Budget, default_constraints(config), events, models, config,
        ));
    };
    let baseline = BaselinePredictions {
        surrogate_a: pred_a,
        surrogate_b: pred_b,
        blind: argmax(&blind_probs),
    };
    let mut constraints = match config.ablation {
        AblationMode::NoInfoNoConductor => default_constraints(config),
        _ => conduct(
            &report,
            &baseline,
            &config.defaults,
            &config.strategist,
            models.num_classes(),
        ),
    };
    let mask = saliency_mask(&report, x.shape()[1], x.shape()[2]);
    let baseline_surr_prob = surrogates.mean_target_prob(x, constraints.target)?;

    let mut params = config.methods.clone();
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut prev_weights: Option<MixWeights> = None;
    let mut segment_best: Option<f64> = None;
    let mut last_round: Option<(Tensor, [CandidateDelta; 3])> = None;
    let mut final_critique: Option<CritiqueVector> = None;
    let mut reason = StopReason::Iterations;

    for k in 1..=config.max_iterations {
        // Local adaptation, per method.
        for method in AttackMethod::ALL {
            let (updated, event) =
                advise(&history, method, &params, constraints.eps, backend);
            params = updated;
            if let Some(e) = event {
                events.push(format!("iteration {k}: {e}"));
            }
        }

        // Parallel candidate generation.
        let deltas = generate_candidates(
            x,
            &surrogates,
            &constraints,
            &params,
            mask.as_ref(),
            config,
            baseline_surr_prob,
            k,
        )?;

        // Weight search (or the ablated fixed weights).
        let fixed_weights = match (config.single_method, config.ablation) {
            (Some(m), _) => Some(MixWeights::vertex(m.index())),
            (None, AblationMode::UniformAveraging) => Some(MixWeights::uniform()),
            _ => None,
        };
        let (weights, searched_score) = match fixed_weights {
            Some(w) => (w, None),
            None => {
                let ctx = ScoreContext {
                    x,
                    deltas: &deltas,
                    eps: constraints.eps,
                    tau: constraints.tau,
                    target: constraints.target,
                    surrogates: &surrogates,
                    probe: &probe,
                    config: &config.mixer,
                    ssim_config: &config.ssim,
                };
                match hill_climb(&ctx, prev_weights, derive_seed(config.seed, k as u64, 3))? {
                    Some(outcome) if !outcome.exhausted => {
                        (outcome.weights, Some(outcome.score))
                    }
                    Some(outcome) => {
                        events.push(format!(
                            "iteration {k}: blind budget exhausted during weight search"
                        ));
                        reason = StopReason::Budget;
                        // The partial search still yields a usable blend for
                        // the output rule, but no critique can follow.
                        let master = blend(&deltas, &outcome.weights, x, constraints.eps)?;
                        last_round = Some((master, deltas));
                        break;
                    }
                    None => {
                        events.push(format!(
                            "iteration {k}: blind budget exhausted before any weight was scored"
                        ));
                        reason = StopReason::Budget;
                        break;
                    }
                }
            }
        };

        let master = blend(&deltas, &weights, x, constraints.eps)?;

        // Critique and bookkeeping.
        let Some(c) = critique(x, &master, &probe, &surrogates, constraints.target, &config.ssim)?
        else {
            events.push(format!(
                "iteration {k}: blind budget exhausted during critique"
            ));
            reason = StopReason::Budget;
            last_round = Some((master, deltas));
            break;
        };
        let score = searched_score.unwrap_or_else(|| {
            config.mixer.lambda * c.black_box
                + (1.0 - config.mixer.lambda) * c.surrogate_mean
                - config.mixer.mu * (constraints.tau - c.ssim).max(0.0)
        });
        let best_so_far = segment_best.map_or(score, |b: f64| b.max(score));
        segment_best = Some(best_so_far);

        history.push(HistoryEntry {
            iteration: k,
            diagnostics: [
                deltas[0].diagnostics.clone(),
                deltas[1].diagnostics.clone(),
                deltas[2].diagnostics.clone(),
            ],
            weights,
            critique: c,
            score,
            best_score_so_far: best_so_far,
            escalated: false,
            eps: constraints.eps,
            tau: constraints.tau,
        });

        if config.ablation != AblationMode::NoInfoNoConductor
            && detect_stagnation(&history, &config.strategist)
        {
            let escalated = escalate(&constraints, &config.strategist);
            if escalated != constraints {
                events.push(format!(
                    "iteration {k}: escalated to eps {:.6}, tau {:.4}",
                    escalated.eps, escalated.tau
                ));
                history.last_mut().expect("just pushed").escalated = true;
                constraints = escalated;
                segment_best = None;
            }
        }

        prev_weights = Some(weights);
        last_round = Some((master, deltas));
        final_critique = Some(c);

        if c.black_box > config.success_threshold {
            reason = StopReason::Success;
            break;
        }
        if probe.exhausted() {
            reason = StopReason::Budget;
            break;
        }
    }

    Ok(finish_run(
        x,
        last_round,
        &history,
        final_critique,
        baseline,
        &probe,
        reason,
        constraints,
        events,
        models,
        config,
    ))
}

#[allow(clippy::too_many_arguments)]
fn generate_candidates(
    x: &Tensor,
    surrogates: &crate::models::SurrogateView<'_>,
    constraints: &AttackConstraints,
    params: &MethodParams,
    mask: Option<&Tensor>,
    config: &RunConfig,
    baseline_surr_prob: f64,
    k: usize,
) -> Result<[CandidateDelta; 3]> {
    let input_for = |method: AttackMethod| AttackInput {
        x,
        target: constraints.target,
        eps: constraints.eps,
        surrogates,
        saliency: mask,
        seed: derive_seed(config.seed, k as u64, method.index() as u64),
    };
    if let Some(only) = config.single_method {
        let generated = match only {
            AttackMethod::Cw => cw_generate(&input_for(only), &params.cw)?,
            AttackMethod::Jsma => jsma_generate(&input_for(only), &params.jsma)?,
            AttackMethod::Sta => sta_generate(&input_for(only), &params.sta)?,
        };
        let mut out = AttackMethod::ALL.map(|m| {
            CandidateDelta::zero(m, x, constraints.eps, baseline_surr_prob)
        });
        out[only.index()] = generated;
        return Ok(out);
    }
    let (cw, (jsma, sta)) = rayon::join(
        || cw_generate(&input_for(AttackMethod::Cw), &params.cw),
        || {
            rayon::join(
                || jsma_generate(&input_for(AttackMethod::Jsma), &params.jsma),
                || sta_generate(&input_for(AttackMethod::Sta), &params.sta),
            )
        },
    );
    Ok([cw?, jsma?, sta?])
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    x: &Tensor,
    last_round: Option<(Tensor, [CandidateDelta; 3])>,
    history: &[HistoryEntry],
    final_critique: Option<CritiqueVector>,
    baseline: BaselinePredictions,
    probe: &crate::models::BlindProbe<'_>,
    reason: StopReason,
    final_constraints: AttackConstraints,
    events: Vec<String>,
    models: &ModelSet,
    config: &RunConfig,
) -> RunResult {
    let (final_image, selection) =
        select_output(x, last_round, config, models, final_constraints.target);
    RunResult {
        final_image,
        selection,
        reason,
        query_count: probe.used(),
        history: history.to_vec(),
        final_critique,
        final_constraints,
        baseline,
        events,
    }
}

/// Applies the per-mode output rule to the final round.
///
/// Blind mode returns the blended image. White-box mode scores the three
/// pure candidates and the blend with
/// `sel = lambda * p_target(t | a) + (1 - lambda) * ssim(x, a)` and picks
/// the argmax, ties favoring the blend. With no completed round the
/// original image comes back unchanged.
fn select_output(
    x: &Tensor,
    last_round: Option<(Tensor, [CandidateDelta; 3])>,
    config: &RunConfig,
    models: &ModelSet,
    target: usize,
) -> (Tensor, String) {
    let Some((master, deltas)) = last_round else {
        return (x.clone(), "original (no completed iteration)".to_string());
    };
    match config.mode {
        Mode::Blind => (master, "blend".to_string()),
        Mode::Whitebox => {
            let sel = |img: &Tensor| -> f64 {
                let p = models
                    .evaluate_offline(ModelRole::Blind, img)
                    .map(|(_, probs)| probs.data()[target])
                    .unwrap_or(0.0);
                let sim = ssim(x, img, &config.ssim).unwrap_or(0.0);
                config.mixer.lambda * p + (1.0 - config.mixer.lambda) * sim
            };
            let mut best_name = "blend".to_string();
            let mut best_score = sel(&master);
            let mut best_image = master;
            for delta in &deltas {
                let candidate = x
                    .add(delta.delta.delta())
                    .map(|t| crate::attacks::project_box(&t))
                    .unwrap_or_else(|_| x.clone());
                let s = sel(&candidate);
                if s > best_score {
                    best_score = s;
                    best_name = delta.method.name().to_string();
                    best_image = candidate;
                }
            }
            (best_image, best_name)
        }
    }
}

fn default_constraints(config: &RunConfig) -> AttackConstraints {
    AttackConstraints {
        eps: config.defaults.eps.min(config.strategist.eps_max),
        tau: config.defaults.tau,
        target: config.defaults.target,
    }
}

fn baseline_stub(pred_a: usize, pred_b: usize) -> BaselinePredictions {
    BaselinePredictions {
        surrogate_a: pred_a,
        surrogate_b: pred_b,
        blind: 0,
    }
}

fn argmax(probs: &Tensor) -> usize {
    let mut best = 0;
    for (i, &p) in probs.data().iter().enumerate() {
        if p > probs.data()[best] {
            best = i;
        }
    }
    best
}

/// Splitmix64-style seed derivation, so sub-streams never collide.
fn derive_seed(base: u64, k: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
