//! Desk-scale classifiers and the synthetic two-class dataset.
//!
//! Three roles mirror the transfer setting: two convolutional surrogates
//! whose gradients drive the attacks, and an architecturally distinct
//! dense-only "blind" model that may only ever be queried for
//! probabilities. Class 0 plays "real" (smooth low-frequency images),
//! class 1 plays "fake" (high-frequency texture).
//!
//! [`ModelSet`] is the only way attack code reaches the models. Gradient
//! access goes through [`SurrogateView`] and is counted per role;
//! probability access to the blind model goes through [`BlindProbe`],
//! which enforces the query budget atomically.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_probs, Layer, LayerStack, LossSpec};
use crate::tensor::Tensor;
use crate::warp::{warp_loss_and_flow_gradient, FlowField};

/// Which classifier a call is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelRole {
    SurrogateA,
    SurrogateB,
    Blind,
}

impl ModelRole {
    pub const ALL: [ModelRole; 3] = [ModelRole::SurrogateA, ModelRole::SurrogateB, ModelRole::Blind];

    fn index(self) -> usize {
        match self {
            ModelRole::SurrogateA => 0,
            ModelRole::SurrogateB => 1,
            ModelRole::Blind => 2,
        }
    }
}

/// Parameters of the procedural two-class image generator.
///
/// Both classes share smooth low-frequency base content; the "fake" class
/// additionally carries a small high-frequency artifact. The artifact
/// amplitude controls how hard the classes are to attack: it is sized so a
/// desk-scale l-inf budget can plausibly mask it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Total sample count; must be even so labels balance.
    pub samples: usize,
    pub seed: u64,
    /// Spatial frequency range of the shared base content.
    pub base_freq: (f64, f64),
    /// Carrier frequency range of the fake-class texture artifact.
    pub artifact_freq: (f64, f64),
    /// Amplitude range of the fake-class texture artifact.
    pub artifact_amp: (f64, f64),
    /// Amplitude range of the fake-class ridge artifact (smooth bumps at
    /// fixed positions; too wide for small conv kernels to resolve, too
    /// tall for an additive budget to erase).
    pub ridge_amp: (f64, f64),
    /// Ridge profile width in pixels.
    pub ridge_sigma: f64,
    /// Per-pixel uniform noise applied to both classes.
    pub noise: f64,
}

impl DatasetSpec {
    pub fn new(channels: usize, height: usize, width: usize, samples: usize, seed: u64) -> Self {
        DatasetSpec {
            channels,
            height,
            width,
            samples,
            seed,
            base_freq: (0.4, 1.4),
            artifact_freq: (4.0, 7.0),
            artifact_amp: (0.05, 0.12),
            ridge_amp: (0.12, 0.18),
            ridge_sigma: 1.2,
            noise: 0.01,
        }
    }
}

/// Labeled images; `labels[i]` is 0 ("real") or 1 ("fake").
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl Dataset {
    /// Images of a single class, in generation order.
    pub fn of_class(&self, label: u8) -> Vec<&Tensor> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(img, _)| img)
            .collect()
    }
}

/// Generates a balanced two-class dataset, bit-reproducible from the spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::Config(format!(
            "image size {}x{} below the 8x8 minimum",
            spec.height, spec.width
        )));
    }
    if spec.channels == 0 || spec.samples == 0 || !spec.samples.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "need a positive even sample count and >=1 channel, got {} samples, {} channels",
            spec.samples, spec.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Dataset-level artifact structure: a small fixed bank of carrier
    // frequencies, plus one horizontal and one vertical ridge at fixed
    // positions. Phase and amplitudes still vary per image.
    let carriers: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(spec.artifact_freq.0..spec.artifact_freq.1),
                rng.random_range(spec.artifact_freq.0..spec.artifact_freq.1),
            )
        })
        .collect();
    let margin_h = (spec.height / 4).max(2);
    let margin_w = (spec.width / 4).max(2);
    let ridge_row = rng.random_range(margin_h..spec.height - margin_h) as f64;
    let ridge_col = rng.random_range(margin_w..spec.width - margin_w) as f64;
    let structure = ArtifactStructure {
        carriers,
        ridge_row,
        ridge_col,
    };
    let mut images = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = (i % 2) as u8;
        images.push(synth_image(spec, label, &structure, &mut rng));
        labels.push(label);
    }
    Ok(Dataset { images, labels })
}

struct ArtifactStructure {
    carriers: Vec<(f64, f64)>,
    ridge_row: f64,
    ridge_col: f64,
}

fn synth_image(
    spec: &DatasetSpec,
    label: u8,
    structure: &ArtifactStructure,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let tau = std::f64::consts::TAU;
    let fx: f64 = rng.random_range(spec.base_freq.0..spec.base_freq.1);
    let fy: f64 = rng.random_range(spec.base_freq.0..spec.base_freq.1);
    let phase: f64 = rng.random_range(0.0..tau);
    let amp: f64 = rng.random_range(0.22..0.36);
    let channel_shift: f64 = rng.random_range(0.0..0.8);
    let artifact = (label == 1).then(|| {
        let (gx, gy) = structure.carriers[rng.random_range(0..structure.carriers.len())];
        (
            gx,
            gy,
            rng.random_range(0.0..tau),
            rng.random_range(spec.artifact_amp.0..spec.artifact_amp.1),
            rng.random_range(spec.ridge_amp.0..spec.ridge_amp.1),
        )
    });
    let two_sigma_sq = 2.0 * spec.ridge_sigma * spec.ridge_sigma;

    let mut img = Tensor::zeros(&[spec.channels, spec.height, spec.width]);
    for c in 0..spec.channels {
        let ph = phase + channel_shift * c as f64;
        for y in 0..spec.height {
            for x in 0..spec.width {
                let u = x as f64 / spec.width as f64;
                let v = y as f64 / spec.height as f64;
                let mut value = 0.5 + amp * (tau * (fx * u + fy * v) + ph).sin();
                if let Some((gx, gy, psi, a, ra)) = artifact {
                    value += a * (tau * (gx * u + gy * v) + psi).sin();
                    let dr = y as f64 - structure.ridge_row;
                    let dc = x as f64 - structure.ridge_col;
                    value += ra
                        * ((-dr * dr / two_sigma_sq).exp() + (-dc * dc / two_sigma_sq).exp());
                }
                if spec.noise > 0.0 {
                    value += rng.random_range(-spec.noise..spec.noise);
                }
                img.set3(c, y, x, value.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// SGD settings for [`train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Classical momentum; 0 disables it.
    pub momentum: f64,
    /// Uniform input-noise augmentation amplitude; 0 disables it.
    pub input_noise: f64,
    /// Per-class loss weights; upweighting a class pushes the decision
    /// boundary away from its examples.
    pub class_weights: [f64; 2],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            learning_rate: 0.01,
            batch_size: 16,
            momentum: 0.5,
            input_noise: 0.0,
            class_weights: [1.0, 1.0],
            seed: 0,
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub final_mean_loss: f64,
    pub epochs_run: usize,
}

/// Minibatch SGD (with classical momentum) on target cross-entropy.
/// Deterministic given the seed; zero epochs leaves the parameters
/// untouched.
pub fn train(
    mut model: LayerStack,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(LayerStack, TrainReport)> {
    if data.images.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "learning rate {} and batch size {} must be positive",
            cfg.learning_rate, cfg.batch_size
        )));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!(
            "momentum {} outside [0, 1)",
            cfg.momentum
        )));
    }
    if cfg.class_weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Config(format!(
            "class weights {:?} must be positive",
            cfg.class_weights
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..data.images.len()).collect();
    let mut velocity: Vec<Option<crate::nn::ParamGrad>> = Vec::new();
    let mut mean_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Option<crate::nn::ParamGrad>> = Vec::new();
            for &idx in batch {
                let image = if cfg.input_noise > 0.0 {
                    let mut noisy = data.images[idx].clone();
                    for v in noisy.data_mut() {
                        *v = (*v + rng.random_range(-cfg.input_noise..cfg.input_noise))
                            .clamp(0.0, 1.0);
                    }
                    noisy
                } else {
                    data.images[idx].clone()
                };
                let (loss, sample_grads) =
                    model.ce_param_gradients(&image, data.labels[idx] as usize)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_no}, sample {idx}"
                    )));
                }
                let class_weight = cfg.class_weights[data.labels[idx] as usize];
                loss_sum += class_weight * loss;
                if grads.is_empty() {
                    grads = sample_grads;
                    for g in &mut grads {
                        if let Some(g) = g.as_mut() {
                            g.weight = g.weight.scale(class_weight);
                            for b in &mut g.bias {
                                *b *= class_weight;
                            }
                        }
                    }
                } else {
                    for (acc, g) in grads.iter_mut().zip(sample_grads) {
                        if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                            acc.weight.axpy(class_weight, &g.weight)?;
                            for (a, b) in acc.bias.iter_mut().zip(&g.bias) {
                                *a += class_weight * b;
                            }
                        }
                    }
                }
            }
            // v <- m*v + mean batch gradient; params <- params - lr*v
            let inv = 1.0 / batch.len() as f64;
            if velocity.is_empty() {
                for g in &mut grads {
                    if let Some(g) = g.as_mut() {
                        g.weight = g.weight.scale(inv);
                        for b in &mut g.bias {
                            *b *= inv;
                        }
                    }
                }
                velocity = grads;
            } else {
                for (v, g) in velocity.iter_mut().zip(&grads) {
                    if let (Some(v), Some(g)) = (v.as_mut(), g) {
                        v.weight = v.weight.scale(cfg.momentum);
                        v.weight.axpy(inv, &g.weight)?;
                        for (vb, gb) in v.bias.iter_mut().zip(&g.bias) {
                            *vb = cfg.momentum * *vb + inv * gb;
                        }
                    }
                }
            }
            for (layer, v) in model.layers_mut().iter_mut().zip(&velocity) {
                if let Some(v) = v {
                    match layer {
                        Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                            weight.axpy(-cfg.learning_rate, &v.weight)?;
                            for (b, vb) in bias.iter_mut().zip(&v.bias) {
                                *b -= cfg.learning_rate * vb;
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        mean_loss = loss_sum / data.images.len() as f64;
    }
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let (pred, _) = evaluate(&model, img)?;
        if pred == label as usize {
            correct += 1;
        }
    }
    let report = TrainReport {
        train_accuracy: correct as f64 / data.images.len() as f64,
        final_mean_loss: mean_loss,
        epochs_run: cfg.epochs,
    };
    Ok((model, report))
}

/// Predicted label and softmax probabilities; ties break toward the lower
/// class index.
pub fn evaluate(model: &LayerStack, x: &Tensor) -> Result<(usize, Tensor)> {
    let probs = softmax_probs(&model.forward(x)?);
    let mut best = 0usize;
    for (i, &p) in probs.data().iter().enumerate() {
        if p > probs.data()[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

fn xavier_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("init length matches shape")
}

/// Surrogate A: two 3x3 conv blocks with pooling, then a dense head.
pub fn conv_net_a(input: [usize; 3], classes: usize, seed: u64) -> LayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    let w1 = xavier_init(&mut rng, &[8, c, 3, 3], c * 9, 8 * 9);
    let (h1, w1d) = (h - 2, w - 2);
    let (hp, wp) = (h1 / 2, w1d / 2);
    let w2 = xavier_init(&mut rng, &[12, 8, 3, 3], 8 * 9, 12 * 9);
    let (h2, w2d) = (hp - 2, wp - 2);
    let flat = 12 * h2 * w2d;
    let wd = xavier_init(&mut rng, &[classes, flat], flat, classes);
    LayerStack::new(
        input,
        vec![
            Layer::Conv2d {
                weight: w1,
                bias: vec![0.02; 8],
                stride: (1, 1),
            },
            Layer::Relu,
            Layer::AvgPool { window: (2, 2) },
            Layer::Conv2d {
                weight: w2,
                bias: vec![0.02; 12],
                stride: (1, 1),
            },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense {
                weight: wd,
                bias: vec![0.0; classes],
            },
        ],
    )
    .expect("conv_net_a composes for inputs >= 8x8")
}

/// Surrogate B: one wider 5x5 conv block, shallower than A.
pub fn conv_net_b(input: [usize; 3], classes: usize, seed: u64) -> LayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    let w1 = xavier_init(&mut rng, &[8, c, 5, 5], c * 25, 8 * 25);
    let (h1, w1d) = (h - 4, w - 4);
    let (hp, wp) = (h1 / 2, w1d / 2);
    let flat = 8 * hp * wp;
    let wd = xavier_init(&mut rng, &[classes, flat], flat, classes);
    LayerStack::new(
        input,
        vec![
            Layer::Conv2d {
                weight: w1,
                bias: vec![0.02; 8],
                stride: (1, 1),
            },
            Layer::Relu,
            Layer::AvgPool { window: (2, 2) },
            Layer::Flatten,
            Layer::Dense {
                weight: wd,
                bias: vec![0.0; classes],
            },
        ],
    )
    .expect("conv_net_b composes for inputs >= 8x8")
}

/// Blind model: a dense-only MLP, architecturally unlike the surrogates.
pub fn mlp_blind(input: [usize; 3], classes: usize, seed: u64) -> LayerStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = input.iter().product::<usize>();
    let hidden = 48;
    let w1 = xavier_init(&mut rng, &[hidden, d], d, hidden);
    let w2 = xavier_init(&mut rng, &[classes, hidden], hidden, classes);
    LayerStack::new(
        input,
        vec![
            Layer::Flatten,
            Layer::Dense {
                weight: w1,
                bias: vec![0.02; hidden],
            },
            Layer::Relu,
            Layer::Dense {
                weight: w2,
                bias: vec![0.0; classes],
            },
        ],
    )
    .expect("mlp composes for any input")
}

/// Per-role access counters shared by every view into a [`ModelSet`].
#[derive(Debug, Default)]
pub struct RoleCounters {
    gradient_calls: [AtomicU64; 3],
    blind_queries: AtomicU64,
}

impl RoleCounters {
    fn count_gradient(&self, role: ModelRole) {
        self.gradient_calls[role.index()].fetch_add(1, Ordering::SeqCst);
    }
}

/// The trained trio plus its audit counters.
pub struct ModelSet {
    surrogate_a: LayerStack,
    surrogate_b: LayerStack,
    blind: LayerStack,
    counters: Arc<RoleCounters>,
}

impl ModelSet {
    /// Assembles a set, requiring identical input shapes and class counts.
    pub fn new(surrogate_a: LayerStack, surrogate_b: LayerStack, blind: LayerStack) -> Result<Self> {
        for m in [&surrogate_b, &blind] {
            if m.input_shape() != surrogate_a.input_shape() {
                return Err(Error::Config(format!(
                    "model input shapes disagree: {:?} vs {:?}",
                    surrogate_a.input_shape(),
                    m.input_shape()
                )));
            }
            if m.num_classes() != surrogate_a.num_classes() {
                return Err(Error::Config(format!(
                    "model class counts disagree: {} vs {}",
                    surrogate_a.num_classes(),
                    m.num_classes()
                )));
            }
        }
        Ok(ModelSet {
            surrogate_a,
            surrogate_b,
            blind,
            counters: Arc::new(RoleCounters::default()),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.surrogate_a.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.surrogate_a.num_classes()
    }

    /// Gradient-capable view of the two surrogates.
    pub fn surrogates(&self) -> SurrogateView<'_> {
        SurrogateView {
            models: [
                (ModelRole::SurrogateA, &self.surrogate_a),
                (ModelRole::SurrogateB, &self.surrogate_b),
            ],
            counters: &self.counters,
        }
    }

    /// Budgeted probability access to the blind model.
    pub fn blind_probe(&self, max_queries: u64) -> BlindProbe<'_> {
        BlindProbe {
            model: &self.blind,
            counters: &self.counters,
            limit: max_queries,
            used: AtomicU64::new(0),
        }
    }

    /// Direct forward evaluation for baselines, metrics, and white-box
    /// output selection. Not budget-tracked; never exposes gradients.
    pub fn evaluate_offline(&self, role: ModelRole, x: &Tensor) -> Result<(usize, Tensor)> {
        evaluate(self.model(role), x)
    }

    /// Gradient calls recorded for a role since construction.
    pub fn gradient_calls(&self, role: ModelRole) -> u64 {
        self.counters.gradient_calls[role.index()].load(Ordering::SeqCst)
    }

    /// Total blind probability queries across all probes.
    pub fn blind_queries_total(&self) -> u64 {
        self.counters.blind_queries.load(Ordering::SeqCst)
    }

    fn model(&self, role: ModelRole) -> &LayerStack {
        match role {
            ModelRole::SurrogateA => &self.surrogate_a,
            ModelRole::SurrogateB => &self.surrogate_b,
            ModelRole::Blind => &self.blind,
        }
    }
}

/// Read-only gradient access to the surrogate ensemble.
///
/// Attack objectives use the ensemble mean target probability
/// `mean_m p_m(t|x)`; its cross-entropy gradient composes from the
/// per-model gradients as `sum_m p_m g_m / sum_m p_m` where
/// `g_m = grad(-ln p_m)`.
#[derive(Clone, Copy)]
pub struct SurrogateView<'a> {
    models: [(ModelRole, &'a LayerStack); 2],
    counters: &'a RoleCounters,
}

impl<'a> SurrogateView<'a> {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_shape(&self) -> &[usize] {
        self.models[0].1.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.models[0].1.num_classes()
    }

    /// Mean target-class probability over the ensemble (forward only).
    pub fn mean_target_prob(&self, x: &Tensor, target: usize) -> Result<f64> {
        let mut sum = 0.0;
        for (_, m) in &self.models {
            sum += softmax_probs(&m.forward(x)?).data()[target];
        }
        Ok(sum / self.models.len() as f64)
    }

    /// Mean probability and the input gradient of `-ln mean_m p_m(t|x)`.
    pub fn ce_input_gradient(&self, x: &Tensor, target: usize) -> Result<(f64, Tensor)> {
        let mut probs = [0.0; 2];
        let mut grads: Vec<Tensor> = Vec::with_capacity(2);
        for (i, (role, m)) in self.models.iter().enumerate() {
            self.counters.count_gradient(*role);
            let p = softmax_probs(&m.forward(x)?).data()[target];
            let g = m.input_gradient(x, &LossSpec::CrossEntropyTarget(target))?;
            probs[i] = p;
            grads.push(g);
        }
        let total: f64 = probs.iter().sum();
        let mut out = Tensor::zeros(x.shape());
        for (p, g) in probs.iter().zip(&grads) {
            out.axpy(combine_weight(*p, total, self.models.len()), g)?;
        }
        Ok((total / self.models.len() as f64, out))
    }

    /// Mean of the per-model logit Jacobians, shape `[K, d]`.
    pub fn mean_logit_jacobian(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (role, m) in &self.models {
            self.counters.count_gradient(*role);
            let jac = m.logit_jacobian(x)?;
            acc = Some(match acc {
                None => jac,
                Some(mut a) => {
                    a.axpy(1.0, &jac)?;
                    a
                }
            });
        }
        Ok(acc.expect("two models").scale(1.0 / self.models.len() as f64))
    }

    /// Mean probability at the warped image and the flow gradient of
    /// `-ln mean_m p_m(t|warp(x, f))`.
    pub fn ce_flow_gradient(
        &self,
        x: &Tensor,
        flow: &FlowField,
        target: usize,
    ) -> Result<(f64, FlowField)> {
        let mut probs = [0.0; 2];
        let mut grads: Vec<(Tensor, Tensor)> = Vec::with_capacity(2);
        for (i, (role, m)) in self.models.iter().enumerate() {
            self.counters.count_gradient(*role);
            let (loss, g) =
                warp_loss_and_flow_gradient(m, x, flow, &LossSpec::CrossEntropyTarget(target))?;
            probs[i] = (-loss).exp();
            grads.push(g);
        }
        let total: f64 = probs.iter().sum();
        let (h, w) = (flow.height(), flow.width());
        let mut out = FlowField::zeros(h, w);
        for (p, (gdu, gdv)) in probs.iter().zip(&grads) {
            let k = combine_weight(*p, total, self.models.len());
            out.du.axpy(k, gdu)?;
            out.dv.axpy(k, gdv)?;
        }
        Ok((total / self.models.len() as f64, out))
    }
}

/// Relative weight `p / total` for the ensemble gradient, falling back to
/// equal weights when every probability has underflowed to zero.
fn combine_weight(p: f64, total: f64, n: usize) -> f64 {
    if total > 0.0 && total.is_finite() {
        p / total
    } else {
        1.0 / n as f64
    }
}

/// Probability oracle for the blind model with an atomic query budget.
///
/// Each successful call consumes one unit; once the budget is spent every
/// call returns `None` and the counter stays at the limit.
pub struct BlindProbe<'a> {
    model: &'a LayerStack,
    counters: &'a RoleCounters,
    limit: u64,
    used: AtomicU64,
}

impl<'a> BlindProbe<'a> {
    /// Full probability vector, or `None` when the budget is exhausted.
    pub fn probabilities(&self, x: &Tensor) -> Result<Option<Tensor>> {
        if !self.try_consume() {
            return Ok(None);
        }
        Ok(Some(softmax_probs(&self.model.forward(x)?)))
    }

    /// Target-class probability, or `None` when the budget is exhausted.
    pub fn target_prob(&self, x: &Tensor, target: usize) -> Result<Option<f64>> {
        Ok(self.probabilities(x)?.map(|p| p.data()[target]))
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn exhausted(&self) -> bool {
        self.used() >= self.limit
    }

    fn try_consume(&self) -> bool {
        let granted = self
            .used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                (u < self.limit).then_some(u + 1)
            })
            .is_ok();
        if granted {
            self.counters.blind_queries.fetch_add(1, Ordering::SeqCst);
        }
        granted
    }
}
