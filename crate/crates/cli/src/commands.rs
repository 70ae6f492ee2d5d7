//! The five subcommands: dataset generation, training, attacking,
//! offline evaluation, and the ablation sweep.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use advloop_core::agents::AgentBackend;
use advloop_core::attacks::AttackMethod;
use advloop_core::imageio::{
    export_dataset, image_read, image_write, import_dataset, list_pngs, DatasetManifest,
};
use advloop_core::metrics::{
    aggregate, ssim, MetricsReport, PredictionRecord, SsimConfig,
};
use advloop_core::modelfile::{load_model, save_model};
use advloop_core::models::{
    conv_net_a, conv_net_b, generate_dataset, mlp_blind, train, Dataset, ModelRole, ModelSet,
    TrainReport,
};
use advloop_core::orchestrator::{run, AblationMode, RunResult};
use advloop_core::{Error, Result};

use crate::config::FullConfig;

const REPORT_VERSION: u32 = 1;

/// Generates the synthetic set and exports a train/holdout split.
pub fn gen_data(config: &FullConfig, out_dir: &Path, seed: u64) -> Result<()> {
    let spec = config.dataset_spec(seed);
    let all = generate_dataset(&spec)?;
    let n_train = config.dataset.train_samples;
    let train_set = Dataset {
        images: all.images[..n_train].to_vec(),
        labels: all.labels[..n_train].to_vec(),
    };
    let holdout = Dataset {
        images: all.images[n_train..].to_vec(),
        labels: all.labels[n_train..].to_vec(),
    };
    export_dataset(&train_set, &spec, &out_dir.join("train"))?;
    export_dataset(&holdout, &spec, &out_dir.join("holdout"))?;
    eprintln!(
        "wrote {} training and {} holdout images under {}",
        train_set.images.len(),
        holdout.images.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainingSummary {
    version: u32,
    seed: u64,
    surrogate_a: TrainReport,
    surrogate_b: TrainReport,
    blind: TrainReport,
}

/// Trains the two surrogates and the blind model on a dataset directory.
pub fn train_models(config: &FullConfig, data_dir: &Path, out_dir: &Path, seed: u64) -> Result<()> {
    let (data, _) = import_dataset(data_dir)?;
    let input = [config.image.channels, config.image.height, config.image.width];
    let cfg = config.train_config(seed);
    std::fs::create_dir_all(out_dir)?;

    let (a, report_a) = train(conv_net_a(input, 2, seed * 7 + 1), &data, &cfg)?;
    let (b, report_b) = train(conv_net_b(input, 2, seed * 7 + 2), &data, &cfg)?;
    let (m, report_m) = train(mlp_blind(input, 2, seed * 7 + 3), &data, &cfg)?;
    save_model(&a, &out_dir.join("surrogate_a.alm"))?;
    save_model(&b, &out_dir.join("surrogate_b.alm"))?;
    save_model(&m, &out_dir.join("blind.alm"))?;

    let summary = TrainingSummary {
        version: REPORT_VERSION,
        seed,
        surrogate_a: report_a,
        surrogate_b: report_b,
        blind: report_m,
    };
    std::fs::write(
        out_dir.join("training.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("summary encode: {e}")))?,
    )?;
    eprintln!(
        "trained models -> {} (accuracies {:.3} / {:.3} / {:.3})",
        out_dir.display(),
        summary.surrogate_a.train_accuracy,
        summary.surrogate_b.train_accuracy,
        summary.blind.train_accuracy
    );
    Ok(())
}

fn load_models(models_dir: &Path) -> Result<ModelSet> {
    ModelSet::new(
        load_model(&models_dir.join("surrogate_a.alm"))?,
        load_model(&models_dir.join("surrogate_b.alm"))?,
        load_model(&models_dir.join("blind.alm"))?,
    )
}

/// One attacked image in the report.
#[derive(Serialize)]
pub struct ImageReport {
    pub version: u32,
    pub file: String,
    pub label: u8,
    pub record: PredictionRecord,
    pub run: RunResult,
}

#[derive(Serialize)]
pub struct SkippedImage {
    pub file: String,
    pub reason: String,
}

/// The machine-readable output of one attack pass: everything needed to
/// recompute the metrics offline.
#[derive(Serialize)]
pub struct AttackReport {
    pub version: u32,
    pub ablation: AblationMode,
    pub single_method: Option<AttackMethod>,
    pub seed: u64,
    pub config: FullConfig,
    pub images: Vec<ImageReport>,
    pub skipped: Vec<SkippedImage>,
    pub metrics: Option<MetricsReport>,
}

pub struct AttackArgs<'a> {
    pub config: &'a FullConfig,
    pub models_dir: &'a Path,
    pub input: &'a Path,
    pub out_dir: &'a Path,
    pub ablation: AblationMode,
    pub single_method: Option<AttackMethod>,
    pub seed: u64,
    pub max_queries: Option<u64>,
    pub remote: bool,
    pub verbose: bool,
}

/// Collects the input images with their labels. A manifest supplies
/// labels; bare files are assumed fake (label 1).
fn collect_inputs(input: &Path) -> Result<Vec<(PathBuf, u8)>> {
    if input.is_file() {
        return Ok(vec![(input.to_path_buf(), 1)]);
    }
    let manifest_path = input.join("manifest.json");
    if manifest_path.exists() {
        let manifest: DatasetManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path)?,
        )
        .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
        return Ok(manifest
            .images
            .iter()
            .map(|e| (input.join(&e.file), e.label))
            .collect());
    }
    eprintln!(
        "note: {} has no manifest.json; assuming every image is fake (label 1)",
        input.display()
    );
    Ok(list_pngs(input)?.into_iter().map(|p| (p, 1)).collect())
}

fn backend_for(remote: bool, verbose: bool) -> Result<AgentBackend> {
    if !remote {
        return Ok(AgentBackend::Heuristic);
    }
    let config = advloop_core::agents::RemoteConfig::from_env().ok_or_else(|| {
        Error::Config(format!(
            "remote backend requested but {} is not set",
            advloop_core::agents::remote::ENV_BASE_URL
        ))
    })?;
    Ok(AgentBackend::Remote(advloop_core::agents::RemoteClient::new(
        config, verbose,
    )))
}

fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the loop over every input image and writes images, per-run JSON,
/// the aggregate report, and the metrics CSV.
pub fn attack(args: &AttackArgs<'_>) -> Result<AttackReport> {
    let models = load_models(args.models_dir)?;
    let backend = backend_for(args.remote, args.verbose)?;
    let inputs = collect_inputs(args.input)?;
    let images_dir = args.out_dir.join("images");
    let runs_dir = args.out_dir.join("runs");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&runs_dir)?;

    let ssim_config = SsimConfig::default();
    let outcomes: Vec<std::result::Result<ImageReport, SkippedImage>> = inputs
        .par_iter()
        .enumerate()
        .map(|(index, (path, label))| {
            let file = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("image_{index}"));
            let skip = |reason: String| SkippedImage {
                file: file.clone(),
                reason,
            };
            let x = match image_read(path) {
                Ok(x) => x,
                Err(e) => return Err(skip(e.to_string())),
            };
            let run_config = args.config.run_config(
                args.ablation,
                args.single_method,
                derive_seed(args.seed, index as u64),
                args.max_queries,
            );
            let result = match run(&x, &models, &run_config, &backend) {
                Ok(r) => r,
                Err(e) => return Err(skip(e.to_string())),
            };
            let adv = &result.final_image;
            let record = PredictionRecord {
                truth: *label,
                pred_surrogate_a: models
                    .evaluate_offline(ModelRole::SurrogateA, adv)
                    .map(|(p, _)| p as u8)
                    .unwrap_or(0),
                pred_surrogate_b: models
                    .evaluate_offline(ModelRole::SurrogateB, adv)
                    .map(|(p, _)| p as u8)
                    .unwrap_or(0),
                pred_blind: models
                    .evaluate_offline(ModelRole::Blind, adv)
                    .map(|(p, _)| p as u8)
                    .unwrap_or(0),
                ssim: ssim(&x, adv, &ssim_config).unwrap_or(0.0),
            };
            Ok(ImageReport {
                version: REPORT_VERSION,
                file,
                label: *label,
                record,
                run: result,
            })
        })
        .collect();

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(report) => images.push(report),
            Err(s) => {
                eprintln!("warning: skipped {}: {}", s.file, s.reason);
                skipped.push(s);
            }
        }
    }
    images.sort_by(|a, b| a.file.cmp(&b.file));
    skipped.sort_by(|a, b| a.file.cmp(&b.file));

    for report in &images {
        let stem = report.file.trim_end_matches(".png");
        image_write(&report.run.final_image, &images_dir.join(format!("{stem}_adv.png")))?;
        std::fs::write(
            runs_dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(report)
                .map_err(|e| Error::Config(format!("run report encode: {e}")))?,
        )?;
    }

    let records: Vec<PredictionRecord> = images.iter().map(|r| r.record).collect();
    let metrics = if records.is_empty() {
        None
    } else {
        Some(aggregate(&[records])?)
    };
    let report = AttackReport {
        version: REPORT_VERSION,
        ablation: args.ablation,
        single_method: args.single_method,
        seed: args.seed,
        config: args.config.clone(),
        images,
        skipped,
        metrics,
    };
    std::fs::write(
        args.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report encode: {e}")))?,
    )?;
    if let Some(metrics) = &report.metrics {
        std::fs::write(
            args.out_dir.join("metrics.csv"),
            metrics_csv(&[(mode_name(args.ablation, args.single_method), metrics)]),
        )?;
    }
    eprintln!(
        "attacked {} image(s), skipped {} -> {}",
        report.images.len(),
        report.skipped.len(),
        args.out_dir.display()
    );
    Ok(report)
}

pub fn mode_name(ablation: AblationMode, single: Option<AttackMethod>) -> String {
    if let Some(m) = single {
        return format!("{}_only", m.name());
    }
    match ablation {
        AblationMode::Full => "full".into(),
        AblationMode::UniformAveraging => "uniform_averaging".into(),
        AblationMode::NoInfo => "no_info".into(),
        AblationMode::NoInfoNoConductor => "no_info_no_conductor".into(),
    }
}

/// One row per (mode, model), mirroring the headline results table layout.
fn metrics_csv(reports: &[(String, &MetricsReport)]) -> String {
    let mut out = String::from(
        "mode,model,asr_mean,asr_std_seeds,asr_std_images,wasr_mean,wasr_std_seeds,wasr_std_images,ssim_mean,ssim_std_seeds,ssim_std_images\n",
    );
    for (mode, report) in reports {
        for m in &report.per_model {
            let model = match m.role {
                ModelRole::SurrogateA => "surrogate_a",
                ModelRole::SurrogateB => "surrogate_b",
                ModelRole::Blind => "blind",
            };
            out.push_str(&format!(
                "{mode},{model},{},{},{},{},{},{},{},{},{}\n",
                m.asr.mean,
                m.asr.std_over_seeds,
                m.asr.std_over_images,
                m.wasr.mean,
                m.wasr.std_over_seeds,
                m.wasr.std_over_images,
                m.ssim.mean,
                m.ssim.std_over_seeds,
                m.ssim.std_over_images,
            ));
        }
    }
    out
}

/// Recomputes the metrics offline from original and adversarial images.
pub fn evaluate(
    models_dir: &Path,
    originals: &Path,
    adversarial: &Path,
    out_dir: &Path,
) -> Result<()> {
    let models = load_models(models_dir)?;
    let inputs = collect_inputs(originals)?;
    std::fs::create_dir_all(out_dir)?;
    let ssim_config = SsimConfig::default();

    let mut records = Vec::new();
    let mut missing = 0usize;
    for (path, label) in &inputs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let adv_path = adversarial.join(format!("{stem}_adv.png"));
        if !adv_path.exists() {
            missing += 1;
            continue;
        }
        let x = image_read(path)?;
        let adv = image_read(&adv_path)?;
        records.push(PredictionRecord {
            truth: *label,
            pred_surrogate_a: models.evaluate_offline(ModelRole::SurrogateA, &adv)?.0 as u8,
            pred_surrogate_b: models.evaluate_offline(ModelRole::SurrogateB, &adv)?.0 as u8,
            pred_blind: models.evaluate_offline(ModelRole::Blind, &adv)?.0 as u8,
            ssim: ssim(&x, &adv, &ssim_config)?,
        });
    }
    if records.is_empty() {
        return Err(Error::Config(format!(
            "no original/adversarial pairs found under {} and {}",
            originals.display(),
            adversarial.display()
        )));
    }
    let metrics = aggregate(&[records])?;
    std::fs::write(
        out_dir.join("evaluation.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Config(format!("metrics encode: {e}")))?,
    )?;
    std::fs::write(
        out_dir.join("metrics.csv"),
        metrics_csv(&[("evaluate".to_string(), &metrics)]),
    )?;
    eprintln!(
        "evaluated {} pair(s) ({missing} originals had no adversarial counterpart) -> {}",
        metrics.images_per_seed[0],
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    mode: String,
    seeds: Vec<u64>,
    metrics: MetricsReport,
}

/// Runs the four loop configurations across seeds and tabulates blind-model
/// metrics per mode.
pub fn ablate(
    config: &FullConfig,
    models_dir: &Path,
    input: &Path,
    out_dir: &Path,
    seeds: &[u64],
    remote: bool,
    verbose: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let modes = [
        AblationMode::Full,
        AblationMode::UniformAveraging,
        AblationMode::NoInfo,
        AblationMode::NoInfoNoConductor,
    ];
    let mut rows = Vec::new();
    for ablation in modes {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let sub_dir = out_dir
                .join(mode_name(ablation, None))
                .join(format!("seed_{seed}"));
            std::fs::create_dir_all(&sub_dir)?;
            let report = attack(&AttackArgs {
                config,
                models_dir,
                input,
                out_dir: &sub_dir,
                ablation,
                single_method: None,
                seed,
                max_queries: None,
                remote,
                verbose,
            })?;
            per_seed.push(report.images.iter().map(|r| r.record).collect::<Vec<_>>());
        }
        if per_seed.iter().any(|r| r.is_empty()) {
            return Err(Error::Config("ablation pass produced no records".into()));
        }
        rows.push(AblationRow {
            mode: mode_name(ablation, None),
            seeds: seeds.to_vec(),
            metrics: aggregate(&per_seed)?,
        });
    }

    let mut csv = String::from(
        "mode,blind_asr_mean,blind_asr_std_seeds,blind_wasr_mean,blind_wasr_std_seeds,blind_ssim_mean,blind_ssim_std_seeds\n",
    );
    for row in &rows {
        let blind = row
            .metrics
            .per_model
            .iter()
            .find(|m| m.role == ModelRole::Blind)
            .expect("blind aggregate present");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.mode,
            blind.asr.mean,
            blind.asr.std_over_seeds,
            blind.wasr.mean,
            blind.wasr.std_over_seeds,
            blind.ssim.mean,
            blind.ssim.std_over_seeds,
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Config(format!("ablation encode: {e}")))?,
    )?;
    eprintln!("ablation sweep complete -> {}", out_dir.display());
    Ok(())
}
