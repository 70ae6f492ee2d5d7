//! Structural similarity and attack evaluation statistics.
//!
//! SSIM follows the standard windowed formulation: an 11x11 Gaussian
//! window with sigma 1.5, stabilizers K1 = 0.01 and K2 = 0.03 at dynamic
//! range 1, computed per channel over all valid window positions and
//! averaged. The window shrinks to the largest odd size that fits small
//! images. These constants are fixed so independent implementations agree
//! to 1e-9.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelRole;
use crate::tensor::Tensor;

/// SSIM window settings; the defaults are the interoperable standard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the data; 1 for images in `[0, 1]`.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Mean SSIM between two same-shape `[c, h, w]` images.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim on {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects [c, h, w] images, got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut win = cfg.window.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(Error::Config("image too small for any ssim window".into()));
    }
    let kernel = gaussian_kernel(win, cfg.sigma);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        // Separable weighted sums of x, y, x^2, y^2, xy.
        let plane = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64, o: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    out[i * w + j] = f(t.at3(ch, i, j), o.at3(ch, i, j));
                }
            }
            out
        };
        let planes = [
            plane(x, &|a, _| a, y),
            plane(y, &|a, _| a, x),
            plane(x, &|a, _| a * a, y),
            plane(y, &|a, _| a * a, x),
            plane(x, &|a, b| a * b, y),
        ];
        let filtered: Vec<Vec<f64>> = planes
            .iter()
            .map(|p| separable_filter(p, h, w, &kernel))
            .collect();
        let (oh, ow) = (h - win + 1, w - win + 1);
        for i in 0..oh {
            for j in 0..ow {
                let idx = i * ow + j;
                let mu_x = filtered[0][idx];
                let mu_y = filtered[1][idx];
                let sigma_x = filtered[2][idx] - mu_x * mu_x;
                let sigma_y = filtered[3][idx] - mu_y * mu_y;
                let sigma_xy = filtered[4][idx] - mu_x * mu_y;
                let num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2);
                let den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable 2-D filtering with a symmetric 1-D kernel.
fn separable_filter(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let win = kernel.len();
    let ow = w - win + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[i * w + j + k];
            }
            rows[i * ow + j] = acc;
        }
    }
    let oh = h - win + 1;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * rows[(i + k) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// One attacked image: ground truth, the three models' predictions on the
/// adversarial image, and its SSIM against the original.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: u8,
    pub pred_surrogate_a: u8,
    pub pred_surrogate_b: u8,
    pub pred_blind: u8,
    /// Raw SSIM in `[-1, 1]`; clamped to `[0, 1]` where it weights wASR.
    pub ssim: f64,
}

impl PredictionRecord {
    pub fn prediction(&self, role: ModelRole) -> u8 {
        match role {
            ModelRole::SurrogateA => self.pred_surrogate_a,
            ModelRole::SurrogateB => self.pred_surrogate_b,
            ModelRole::Blind => self.pred_blind,
        }
    }

    pub fn flipped(&self, role: ModelRole) -> bool {
        self.prediction(role) != self.truth
    }

    fn surrogate_flip(&self) -> bool {
        self.flipped(ModelRole::SurrogateA) || self.flipped(ModelRole::SurrogateB)
    }
}

/// Attack success rate for one model: the fraction of records whose
/// prediction differs from the ground truth.
pub fn asr(records: &[PredictionRecord], role: ModelRole) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("asr over empty records".into()));
    }
    let flips = records.iter().filter(|r| r.flipped(role)).count();
    Ok(flips as f64 / records.len() as f64)
}

/// SSIM-weighted attack success rate; always at most the plain ASR.
pub fn wasr(records: &[PredictionRecord], role: ModelRole) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("wasr over empty records".into()));
    }
    let sum: f64 = records
        .iter()
        .filter(|r| r.flipped(role))
        .map(|r| r.ssim.clamp(0.0, 1.0))
        .sum();
    Ok(sum / records.len() as f64)
}

/// Transfer statistics over a record set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    /// Success on at least one surrogate.
    pub p_surr: f64,
    /// Success on the blind model.
    pub p_tgt: f64,
    /// P(blind success | surrogate success); `None` when no record succeeds
    /// on any surrogate.
    pub p_cond: Option<f64>,
    /// Records backing the conditional denominator.
    pub surrogate_success_count: usize,
    /// `p_surr - p_tgt`.
    pub delta_asr: f64,
}

/// Computes `p_surr`, `p_tgt`, `p_cond`, and their gap.
pub fn transfer_stats(records: &[PredictionRecord]) -> Result<TransferStats> {
    if records.is_empty() {
        return Err(Error::Config("transfer stats over empty records".into()));
    }
    let n = records.len() as f64;
    let surr = records.iter().filter(|r| r.surrogate_flip()).count();
    let tgt = records.iter().filter(|r| r.flipped(ModelRole::Blind)).count();
    let joint = records
        .iter()
        .filter(|r| r.surrogate_flip() && r.flipped(ModelRole::Blind))
        .count();
    let p_surr = surr as f64 / n;
    let p_tgt = tgt as f64 / n;
    Ok(TransferStats {
        p_surr,
        p_tgt,
        p_cond: (surr > 0).then(|| joint as f64 / surr as f64),
        surrogate_success_count: surr,
        delta_asr: p_surr - p_tgt,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population statistics of a sample.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Per-model metric aggregated across seeds, with both a per-seed spread
/// and a pooled per-image spread (the latter matches Bernoulli-style
/// reporting).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMetric {
    pub mean: f64,
    pub std_over_seeds: f64,
    pub std_over_images: f64,
}

/// Aggregated metrics for one model role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub role: ModelRole,
    pub asr: AggregatedMetric,
    pub wasr: AggregatedMetric,
    pub ssim: AggregatedMetric,
}

/// Aggregated transfer statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferAggregate {
    pub p_surr: MeanStd,
    pub p_tgt: MeanStd,
    /// Mean over the seeds where the conditional was defined.
    pub p_cond: Option<MeanStd>,
    pub delta_asr: MeanStd,
}

/// The full evaluation report across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: usize,
    pub images_per_seed: Vec<usize>,
    pub per_model: Vec<ModelAggregate>,
    pub transfer: TransferAggregate,
}

/// Aggregates per-seed record sets into means with per-seed and pooled
/// per-image standard deviations.
pub fn aggregate(per_seed: &[Vec<PredictionRecord>]) -> Result<MetricsReport> {
    if per_seed.is_empty() || per_seed.iter().any(|r| r.is_empty()) {
        return Err(Error::Config("aggregate needs at least one nonempty seed".into()));
    }
    let pooled: Vec<PredictionRecord> = per_seed.iter().flatten().copied().collect();

    let mut per_model = Vec::new();
    for role in ModelRole::ALL {
        let seed_asr: Vec<f64> = per_seed
            .iter()
            .map(|r| asr(r, role))
            .collect::<Result<_>>()?;
        let seed_wasr: Vec<f64> = per_seed
            .iter()
            .map(|r| wasr(r, role))
            .collect::<Result<_>>()?;
        let seed_ssim: Vec<f64> = per_seed
            .iter()
            .map(|r| r.iter().map(|p| p.ssim).sum::<f64>() / r.len() as f64)
            .collect();
        let image_asr: Vec<f64> = pooled
            .iter()
            .map(|r| if r.flipped(role) { 1.0 } else { 0.0 })
            .collect();
        let image_wasr: Vec<f64> = pooled
            .iter()
            .map(|r| {
                if r.flipped(role) {
                    r.ssim.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let image_ssim: Vec<f64> = pooled.iter().map(|r| r.ssim).collect();
        per_model.push(ModelAggregate {
            role,
            asr: agg(&seed_asr, &image_asr),
            wasr: agg(&seed_wasr, &image_wasr),
            ssim: agg(&seed_ssim, &image_ssim),
        });
    }

    let transfers: Vec<TransferStats> = per_seed
        .iter()
        .map(|r| transfer_stats(r))
        .collect::<Result<_>>()?;
    let conds: Vec<f64> = transfers.iter().filter_map(|t| t.p_cond).collect();
    let transfer = TransferAggregate {
        p_surr: mean_std(&transfers.iter().map(|t| t.p_surr).collect::<Vec<_>>()),
        p_tgt: mean_std(&transfers.iter().map(|t| t.p_tgt).collect::<Vec<_>>()),
        p_cond: (!conds.is_empty()).then(|| mean_std(&conds)),
        delta_asr: mean_std(&transfers.iter().map(|t| t.delta_asr).collect::<Vec<_>>()),
    };

    Ok(MetricsReport {
        seeds: per_seed.len(),
        images_per_seed: per_seed.iter().map(|r| r.len()).collect(),
        per_model,
        transfer,
    })
}

fn agg(seed_values: &[f64], image_values: &[f64]) -> AggregatedMetric {
    let seeds = mean_std(seed_values);
    let images = mean_std(image_values);
    AggregatedMetric {
        mean: seeds.mean,
        std_over_seeds: seeds.std,
        std_over_images: images.std,
    }
}
