//! End-to-end experiment runs: data, training, calibration, attacks,
//! evaluation and transfer, each cell seeded from (global seed, cell id).

use std::path::{Path, PathBuf};
use std::time::Instant;

use deepbayes_tensor::RngStream;
use log::info;
use rayon::prelude::*;

use super::config::{AttackEntry, DatasetSpec, ExperimentConfig, ModelEntry, ModelSpec};
use super::metrics::{
    evaluate_crafted, min_perturbation, run_attack_eval, transfer_eval, SettingMetrics,
};
use super::report::{write_metadata, write_report, ReportRow, RunMetadata};
use crate::attacks::{
    craft_rows, save_adversarial_batch, supports, train_substitute, AdversarialBatch, AttackKind,
};
use crate::data::{load_feature_vectors, load_idx, sample_two_rings, subset_binary, AffineMap, Dataset};
use crate::detection::{calibrate, DetectorCalibration};
use crate::error::{Error, Result};
use crate::lvm::{
    accuracy, predict, BnnConfig, Checkpoint, DeepBayesModel, MlpClassifier, ModelConfig,
    StoredModel, TrainOptions, TwoRingsClassifier, TwoRingsSpec,
};

/// Stable 64-bit FNV-1a hash of a cell id.
fn cell_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// The random stream owned by one pipeline cell.
pub fn cell_rng(seed: u64, cell: &str) -> RngStream {
    RngStream::new(seed, cell_hash(cell))
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Ring parameters in the coordinates of `train`, for two-rings data.
    pub rings: Option<TwoRingsSpec>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn limit(data: Dataset, n: Option<usize>) -> Result<Dataset> {
    match n {
        Some(n) if n < data.len() => data.take(n),
        _ => Ok(data),
    }
}

/// Loads or samples the experiment's data. Relative paths are resolved
/// against `base_dir`.
pub fn load_data(cfg: &ExperimentConfig, base_dir: &Path) -> Result<PreparedData> {
    match &cfg.dataset {
        DatasetSpec::TwoRings {
            spec,
            n_per_class,
            test_per_class,
            normalize,
        } => {
            let train = sample_two_rings(spec, *n_per_class, &mut cell_rng(cfg.seed, "data/train"))?;
            let mut rng = cell_rng(cfg.seed, "data/test");
            let test = sample_two_rings(spec, *test_per_class, &mut rng)?;
            // Interleave the classes so leading rows cover both rings.
            let test = test.subset(&rng.permutation(test.len()))?;
            if !normalize {
                return Ok(PreparedData {
                    train,
                    test,
                    rings: Some(spec.clone()),
                });
            }
            let (scale, shift) = spec.unit_box_map();
            let map = AffineMap::isotropic(2, scale, shift.to_vec());
            Ok(PreparedData {
                train: map.apply_dataset(&train)?,
                test: map.apply_dataset(&test)?,
                rings: Some(spec.transformed(scale, shift)),
            })
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            train_limit,
            test_limit,
        } => {
            let mut train = load_idx(&resolve(base_dir, train_images), &resolve(base_dir, train_labels))?;
            let mut test = load_idx(&resolve(base_dir, test_images), &resolve(base_dir, test_labels))?;
            if let Some([a, b]) = classes {
                train = subset_binary(&train, *a, *b)?;
                test = subset_binary(&test, *a, *b)?;
            }
            Ok(PreparedData {
                train: limit(train, *train_limit)?,
                test: limit(test, *test_limit)?,
                rings: None,
            })
        }
        DatasetSpec::Features { train, test } => Ok(PreparedData {
            train: load_feature_vectors(&resolve(base_dir, train))?.data,
            test: load_feature_vectors(&resolve(base_dir, test))?.data,
            rings: None,
        }),
    }
}

/// Builds and trains one model; returns it with its per-epoch trace.
pub fn train_model(
    entry: &ModelEntry,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(StoredModel, Vec<f64>)> {
    let name = entry.name();
    let mut rng = cell_rng(cfg.seed, &format!("train/{name}"));
    let d = data.train.input_dim();
    let c = data.train.class_count().max(data.test.class_count());
    let opts: &TrainOptions = entry.training.as_ref().unwrap_or(&cfg.training);
    info!("training {name} for {} epochs", opts.epochs);
    match &entry.model {
        ModelSpec::DeepBayes {
            factorization,
            latent_dim,
            hidden,
            activation,
            obs_variance,
        } => {
            let mut mc = ModelConfig::new(*factorization, d, c);
            mc.latent_dim = *latent_dim;
            mc.hidden = hidden.clone();
            mc.activation = *activation;
            mc.obs_variance = *obs_variance;
            mc.samples = cfg.samples;
            let mut model = DeepBayesModel::build(mc, &mut rng)?;
            let report = model.train(&data.train, opts, &mut rng)?;
            Ok((StoredModel::DeepBayes(model), report.elbo_trace))
        }
        ModelSpec::Bnn {
            hidden,
            width_multiplier,
            dropout,
            activation,
        } => {
            let mut bc = BnnConfig::new(d, c);
            bc.hidden = hidden.clone();
            bc.width_multiplier = *width_multiplier;
            bc.dropout = *dropout;
            bc.activation = *activation;
            bc.samples = cfg.samples;
            let mut model = MlpClassifier::build(bc, &mut rng)?;
            let trace = model.train(&data.train, opts, &mut rng)?;
            Ok((StoredModel::Mlp(model), trace))
        }
        ModelSpec::Mlp { hidden, activation } => {
            let mut bc = BnnConfig::plain(d, c, hidden.clone());
            bc.activation = *activation;
            let mut model = MlpClassifier::build(bc, &mut rng)?;
            let trace = model.train(&data.train, opts, &mut rng)?;
            Ok((StoredModel::Mlp(model), trace))
        }
        ModelSpec::TwoRings => {
            let spec = data.rings.clone().ok_or_else(|| {
                Error::Config("the analytic two-rings model needs two-rings data".into())
            })?;
            Ok((StoredModel::TwoRings(TwoRingsClassifier::new(spec)?), Vec::new()))
        }
    }
}

pub fn calibrate_model(
    name: &str,
    model: &StoredModel,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<DetectorCalibration> {
    let mut rng = cell_rng(cfg.seed, &format!("calibrate/{name}"));
    calibrate(model, &data.train, cfg.detection, cfg.samples, &mut rng)
}

/// Clean test accuracy and per-detector rejection rate of clean test inputs.
pub fn clean_rows(
    name: &str,
    model: &StoredModel,
    calib: Option<&DetectorCalibration>,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Vec<ReportRow>> {
    let mut rng = cell_rng(cfg.seed, &format!("clean/{name}"));
    let labels = data.test.labels();
    let clean = evaluate_crafted(
        model,
        calib,
        labels,
        data.test.inputs().clone(),
        0.0,
        cfg.samples,
        &mut rng,
    )?;
    let mut rows = vec![ReportRow::new(
        name,
        "none",
        None,
        "clean_accuracy",
        Some(accuracy(labels, &clean.predicted)),
    )];
    for (kind, out) in &clean.detections {
        let rejected = out.accepted.iter().filter(|a| !**a).count();
        rows.push(ReportRow::new(
            name,
            "none",
            None,
            format!("fpr_{}", kind.name()),
            Some(rejected as f64 / out.accepted.len() as f64),
        ));
    }
    Ok(rows)
}

/// Crafts and evaluates one (model, attack) cell over its settings.
/// Whether a (model, attack) cell can run. The sampling-aware attack needs
/// a latent-variable victim, so it never runs on a substitute.
pub fn cell_applies(model: &StoredModel, entry: &AttackEntry) -> bool {
    match entry.substitute {
        Some(_) => entry.attack.kind != AttackKind::Wbs,
        None => supports(model, &entry.attack),
    }
}

pub fn attack_cell(
    name: &str,
    model: &StoredModel,
    calib: Option<&DetectorCalibration>,
    entry: &AttackEntry,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<AdversarialBatch> {
    let cell = format!("attack/{name}/{}", entry.name());
    let mut rng = cell_rng(cfg.seed, &cell);
    let n = cfg.attack_inputs.min(data.test.len());
    let rows: Vec<usize> = (0..n).collect();
    let clean = data.test.inputs().select_rows(&rows)?;
    let labels = data.test.labels()[..n].to_vec();

    let (source, source_calib, source_name) = match &entry.substitute {
        Some(sub) => {
            let mut sub_rng = rng.fork();
            let out = train_substitute(model, sub, &data.train, &mut sub_rng)?;
            info!("{cell}: substitute trained with {} queries", out.queries);
            (StoredModel::Mlp(out.substitute), None, format!("substitute of {name}"))
        }
        None => (model.clone(), calib.cloned(), name.to_string()),
    };

    let mut settings = Vec::new();
    for (i, value) in entry.settings().into_iter().enumerate() {
        let attack = entry.attack.at_setting(value);
        let base = rng.substream(i as u64);
        let crafted = craft_rows(&source, source_calib.as_ref(), &clean, &labels, &attack, &base)?;
        let mut eval_rng = rng.substream(1_000_000 + i as u64);
        settings.push(evaluate_crafted(
            model,
            calib,
            &labels,
            crafted,
            value,
            cfg.samples,
            &mut eval_rng,
        )?);
        info!("{cell}: setting {value} done");
    }
    Ok(AdversarialBatch {
        source_model: source_name,
        attack: entry.attack.clone(),
        seed: cfg.seed,
        clean,
        labels,
        settings,
    })
}

fn metric_rows(model: &str, attack: &str, m: &SettingMetrics, prefix: &str) -> Vec<ReportRow> {
    let s = Some(m.setting);
    let mut rows = vec![
        ReportRow::new(model, attack, s, format!("{prefix}victim_accuracy"), m.victim_accuracy),
        ReportRow::new(model, attack, s, format!("{prefix}success_rate"), m.success_rate),
        ReportRow::new(model, attack, s, format!("{prefix}successes"), Some(m.successes as f64)),
    ];
    for (kind, tp) in &m.tp_rate {
        rows.push(ReportRow::new(model, attack, s, format!("{prefix}tp_{}", kind.name()), *tp));
    }
    rows
}

/// Report rows for one crafted batch.
pub fn attack_rows(model: &str, attack: &str, batch: &AdversarialBatch) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for m in run_attack_eval(batch) {
        rows.extend(metric_rows(model, attack, &m, ""));
    }
    if batch.attack.kind == AttackKind::Cw {
        for s in &batch.settings {
            let dists: Vec<f64> = (0..batch.labels.len())
                .filter(|&i| s.success[i])
                .map(|i| {
                    s.crafted
                        .row(i)
                        .iter()
                        .zip(batch.clean.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let mean = (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64);
            rows.push(ReportRow::new(model, attack, Some(s.setting), "mean_l2_distortion", mean));
        }
    } else if !batch.settings.is_empty() {
        let grid: Vec<f64> = batch.settings.iter().map(|s| s.setting).collect();
        let flags: Vec<Vec<bool>> = batch.settings.iter().map(|s| s.success.clone()).collect();
        let mp = min_perturbation(&flags, &grid)?;
        rows.push(ReportRow::new(model, attack, None, "mean_min_perturbation", Some(mp.mean)));
    }
    Ok(rows)
}

/// Rows for replaying `batch` (crafted on `source`) on `target`.
pub fn transfer_rows(
    source: &str,
    attack: &str,
    batch: &AdversarialBatch,
    target_name: &str,
    target: &StoredModel,
    calib: Option<&DetectorCalibration>,
    cfg: &ExperimentConfig,
) -> Result<Vec<ReportRow>> {
    let mut rng = cell_rng(cfg.seed, &format!("transfer/{source}/{attack}/{target_name}"));
    let pair = format!("{source}->{target_name}");
    let mut rows = Vec::new();
    for t in transfer_eval(batch, target, calib, cfg.samples, &mut rng)? {
        rows.push(ReportRow::new(
            &pair,
            attack,
            Some(t.setting),
            "transferred",
            Some(t.transferred as f64),
        ));
        rows.extend(metric_rows(&pair, attack, &t.metrics, "transfer_"));
    }
    Ok(rows)
}

/// Trained model with its calibration.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub name: String,
    pub model: StoredModel,
    pub calibration: DetectorCalibration,
    pub trace: Vec<f64>,
}

pub fn train_and_calibrate(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<TrainedModel>> {
    cfg.models
        .par_iter()
        .map(|entry| {
            let name = entry.name();
            let (model, trace) = train_model(entry, cfg, data)?;
            let calibration = calibrate_model(&name, &model, cfg, data)?;
            Ok(TrainedModel {
                name,
                model,
                calibration,
                trace,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub models: Vec<TrainedModel>,
    pub batches: Vec<(String, String, AdversarialBatch)>,
    pub report: Vec<ReportRow>,
    pub transfer: Vec<ReportRow>,
}

/// Runs every cell of the experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig, data: &PreparedData) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let models = train_and_calibrate(cfg, data)?;
    let mut report = Vec::new();
    for m in &models {
        report.extend(clean_rows(&m.name, &m.model, Some(&m.calibration), cfg, data)?);
    }
    let cells: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|i| (0..cfg.attacks.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| {
            let applies = cell_applies(&models[i].model, &cfg.attacks[j]);
            if !applies {
                info!("skipping {} on {}", cfg.attacks[j].name(), models[i].name);
            }
            applies
        })
        .collect();
    let batches = cells
        .par_iter()
        .map(|&(i, j)| {
            let m = &models[i];
            let entry = &cfg.attacks[j];
            let batch = attack_cell(&m.name, &m.model, Some(&m.calibration), entry, cfg, data)?;
            Ok((m.name.clone(), entry.name(), batch))
        })
        .collect::<Result<Vec<_>>>()?;
    for (model, attack, batch) in &batches {
        report.extend(attack_rows(model, attack, batch)?);
    }
    let mut transfer = Vec::new();
    if cfg.transfer {
        for (source, attack, batch) in &batches {
            for target in models.iter().filter(|t| &t.name != source) {
                transfer.extend(transfer_rows(
                    source,
                    attack,
                    batch,
                    &target.name,
                    &target.model,
                    Some(&target.calibration),
                    cfg,
                )?);
            }
        }
    }
    Ok(PipelineOutcome {
        models,
        batches,
        report,
        transfer,
    })
}

pub fn model_path(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(format!("{name}.json"))
}

pub fn batch_path(out: &Path, model: &str, attack: &str) -> PathBuf {
    out.join("batches").join(format!("{model}__{attack}.json"))
}

/// Runs the experiment on a pool of `jobs` threads and writes checkpoints,
/// batches, `report.csv`, `transfer.csv` (when enabled) and `run.json`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out: &Path,
    jobs: usize,
) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let data = load_data(cfg, base_dir)?;
    let outcome = pool.install(|| run_experiment(cfg, &data))?;
    let mut artifacts = Vec::new();
    for m in &outcome.models {
        let path = model_path(out, &m.name);
        crate::lvm::save_checkpoint(
            &path,
            &Checkpoint {
                model: m.model.clone(),
                seed: cfg.seed,
                calibration: Some(m.calibration.clone()),
            },
        )?;
        artifacts.push(path);
    }
    for (model, attack, batch) in &outcome.batches {
        let path = batch_path(out, model, attack);
        save_adversarial_batch(&path, batch)?;
        artifacts.push(path);
    }
    let report = out.join("report.csv");
    write_report(&report, &outcome.report)?;
    artifacts.push(report);
    if cfg.transfer {
        let path = out.join("transfer.csv");
        write_report(&path, &outcome.transfer)?;
        artifacts.push(path);
    }
    write_metadata(
        &out.join("run.json"),
        &RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            jobs,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            artifacts: artifacts
                .iter()
                .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
                .collect(),
        },
    )?;
    Ok(outcome)
}

/// Test-set predictions, used by CLI subcommands that work on checkpoints.
pub fn predict_test(
    name: &str,
    model: &StoredModel,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<Vec<usize>> {
    let mut rng = cell_rng(cfg.seed, &format!("predict/{name}"));
    Ok(predict(model, data.test.inputs(), cfg.samples, &mut rng)?.labels)
}
