//! Config-driven experiment orchestration: dataset preparation, training any
//! variant, evaluation on held-out instances, and artifact emission. Every
//! run writes six artifacts under its output directory: metrics.json,
//! roc.csv, predictions.csv, train_log.csv, checkpoints/, resolved_config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, HarvestMode, SweepPlan, SynthConfig, Task, Variant};
use crate::domain::{
    annotate_bag_ratios, instance_truth_from_mask, to_binary_instances, Bag, BagLabel, BagSpec,
    InstanceId, InstanceRecord, InstanceSet, RegionLabel,
};
use crate::idx::load_split;
use crate::metrics::{evaluate, MetricsReport};
use crate::mil::{
    derive_seed, fsb_train, harvest_positives, retrain, train, Checkpoint, Ensemble, ModelFactory,
    TrainOutput,
};
use crate::nn::save_checkpoint;
use crate::pgm::read_pgm;
use crate::synth::{make_synthetic_slides, SynthOutput};
use crate::tile::read_manifest;

/// Seed-stream labels; every run-internal random decision derives from the
/// run seed through these.
const SEED_BAGS: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_RETRAIN: u64 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Train(String),
    #[error("artifact: {0}")]
    Artifact(String),
}

impl RunError {
    /// Process exit status: 0 success, 2 config, 3 data, 4 training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Train(_) | RunError::Artifact(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> RunError {
    RunError::Data(e.to_string())
}

fn train_err(e: impl std::fmt::Display) -> RunError {
    RunError::Train(e.to_string())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: MetricsReport,
    pub out_dir: PathBuf,
}

struct EvalData {
    ids: Vec<InstanceId>,
    features: Array2<f32>,
    truth: Vec<bool>,
}

struct TaskData {
    set: InstanceSet,
    bags: Vec<Bag>,
    eval: EvalData,
}

/// End-to-end experiment: ingest, bag assembly, training (with optional
/// harvest-and-retrain), checkpoint ensembling, held-out evaluation, and
/// artifact emission.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let mut data = match config.task {
        Task::MnistMil => prepare_mnist(config)?,
        Task::SyntheticTiles => prepare_tiles(config)?,
    };
    if config.standardize {
        standardize_features(&mut data)?;
    }

    let input_dim = data.set.feature_len();
    let mut dims = vec![input_dim];
    dims.extend(&config.hidden);
    dims.push(2);
    let factory = ModelFactory { dims };

    let mut phases: Vec<(&'static str, TrainOutput)> = Vec::new();
    let final_checkpoints: Vec<Checkpoint>;
    if config.variant == Variant::Fsb {
        let out = fsb_train(
            &config.train_config(derive_seed(config.seed, SEED_TRAIN)),
            &data.set,
            &factory,
        )
        .map_err(train_err)?;
        final_checkpoints = out.checkpoints.clone();
        phases.push(("fsb", out));
    } else {
        let phase1 = train(
            &config.train_config(derive_seed(config.seed, SEED_TRAIN)),
            &data.set,
            &data.bags,
            &factory,
        )
        .map_err(train_err)?;
        if config.retrain {
            let harvest_ensemble = match config.harvest_mode {
                HarvestMode::Ensemble => Ensemble::from_checkpoints(&phase1.checkpoints),
                HarvestMode::Final => Ensemble::final_checkpoint_only(&phase1.checkpoints),
            }
            .map_err(train_err)?;
            let harvest = harvest_positives(
                &harvest_ensemble,
                &data.set,
                &data.bags,
                config.harvest_threshold,
            )
            .map_err(train_err)?;
            let phase2 = retrain(
                &config.train_config(derive_seed(config.seed, SEED_RETRAIN)),
                &data.set,
                &data.bags,
                &harvest,
                &factory,
            )
            .map_err(train_err)?;
            final_checkpoints = phase2.checkpoints.clone();
            phases.push(("train", phase1));
            phases.push(("retrain", phase2));
        } else {
            final_checkpoints = phase1.checkpoints.clone();
            phases.push(("train", phase1));
        }
    }

    let ensemble = Ensemble::from_checkpoints(&final_checkpoints).map_err(train_err)?;
    let scores = ensemble.predict(data.eval.features.view()).map_err(train_err)?;
    let (report, curve) =
        evaluate(&scores, &data.eval.truth, config.eval_threshold).map_err(train_err)?;

    write_artifacts(
        config,
        &phases,
        &final_checkpoints,
        &data.eval,
        &scores,
        &report,
        &curve.to_csv(),
    )?;
    Ok(RunOutcome {
        metrics: report,
        out_dir: config.out_dir.clone(),
    })
}

fn prepare_mnist(config: &ExperimentConfig) -> Result<TaskData, RunError> {
    let train_split = load_split(
        Path::new(&config.train_images),
        Path::new(&config.train_labels),
    )
    .map_err(data_err)?;
    let test_split = load_split(
        Path::new(&config.test_images),
        Path::new(&config.test_labels),
    )
    .map_err(data_err)?;
    if train_split.is_empty() || test_split.is_empty() {
        return Err(RunError::Data("empty split".into()));
    }

    let records = to_binary_instances(&train_split, config.target);
    let set = InstanceSet::new(records).map_err(data_err)?;

    let spec = BagSpec {
        size: config.size,
        target: config.target,
        n_pos_bags: config.n_pos_bags,
        n_neg_bags: config.n_neg_bags,
        pos_count_max: config.pos_count_max,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SEED_BAGS));
    let mut bags =
        crate::domain::build_mnist_bags(set.records(), &spec, &mut rng).map_err(data_err)?;
    if config.variant.uses_ratio() {
        annotate_bag_ratios(&mut bags, &set).map_err(data_err)?;
    }

    let n_test = test_split.len();
    let feature_len = test_split[0].features.len();
    let mut features = Array2::<f32>::zeros((n_test, feature_len));
    let mut truth = Vec::with_capacity(n_test);
    for (i, ex) in test_split.iter().enumerate() {
        features
            .row_mut(i)
            .iter_mut()
            .zip(&ex.features)
            .for_each(|(o, &f)| *o = f);
        truth.push(ex.label == config.target);
    }

    Ok(TaskData {
        set,
        bags,
        eval: EvalData {
            ids: (0..n_test).collect(),
            features,
            truth,
        },
    })
}

fn prepare_tiles(config: &ExperimentConfig) -> Result<TaskData, RunError> {
    let slides_dir = Path::new(&config.slides_dir);
    let rows = read_manifest(&slides_dir.join("manifest.csv")).map_err(data_err)?;
    if rows.is_empty() {
        return Err(RunError::Data("manifest has no tiles".into()));
    }

    // Slide ids in first-appearance order; the first `train_slides` train.
    let mut slide_ids: Vec<String> = Vec::new();
    for row in &rows {
        if !slide_ids.contains(&row.slide_id) {
            slide_ids.push(row.slide_id.clone());
        }
    }
    if config.train_slides >= slide_ids.len() {
        return Err(RunError::Data(format!(
            "train_slides = {} leaves no test slides out of {}",
            config.train_slides,
            slide_ids.len()
        )));
    }
    let is_train: BTreeMap<&str, bool> = slide_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i < config.train_slides))
        .collect();

    let mut images = BTreeMap::new();
    for id in &slide_ids {
        let img = read_pgm(&slides_dir.join(format!("{id}.pgm"))).map_err(data_err)?;
        let mask_img = read_pgm(&slides_dir.join(format!("{id}_mask.pgm"))).map_err(data_err)?;
        let mask = crate::tile::Mask::new(
            mask_img.width,
            mask_img.height,
            mask_img.pixels.iter().map(|&p| p > 0).collect(),
        )
        .map_err(data_err)?;
        images.insert(id.as_str(), (img, mask));
    }

    let tile = config.tile;
    let patch = config.instance;
    let per_side = tile / patch;
    let mut next_id: InstanceId = 0;
    let mut train_records: Vec<InstanceRecord> = Vec::new();
    let mut eval_ids = Vec::new();
    let mut eval_rows: Vec<Vec<f32>> = Vec::new();
    let mut eval_truth = Vec::new();
    let mut bags: Vec<Bag> = Vec::new();

    for row in &rows {
        let (img, mask) = &images[row.slide_id.as_str()];
        let x0 = row.tile_x * tile;
        let y0 = row.tile_y * tile;
        if x0 + tile > img.width || y0 + tile > img.height {
            return Err(RunError::Data(format!(
                "tile ({},{}) of {} lies outside the {}x{} slide at tile size {}",
                row.tile_x, row.tile_y, row.slide_id, img.width, img.height, tile
            )));
        }
        let train = is_train[row.slide_id.as_str()];
        let mut tile_instance_ids = Vec::with_capacity(per_side * per_side);
        for py in 0..per_side {
            for px in 0..per_side {
                let ox = x0 + px * patch;
                let oy = y0 + py * patch;
                let mut features = Vec::with_capacity(patch * patch);
                for y in oy..oy + patch {
                    for x in ox..ox + patch {
                        features.push(img.get(x, y) as f32 / 255.0);
                    }
                }
                let truth = instance_truth_from_mask(&mask.crop(ox, oy, patch, patch), patch, patch)
                    .map_err(data_err)?;
                let id = next_id;
                next_id += 1;
                if train {
                    tile_instance_ids.push(id);
                    train_records.push(InstanceRecord {
                        id,
                        features,
                        truth: Some(truth),
                    });
                } else {
                    eval_ids.push(id);
                    eval_rows.push(features);
                    eval_truth.push(truth);
                }
            }
        }

        if train && row.region_label != RegionLabel::Discarded {
            let label = if row.region_label == RegionLabel::Positive {
                BagLabel::Positive
            } else {
                BagLabel::Negative
            };
            let ratio = (config.variant.uses_ratio() && label == BagLabel::Positive)
                .then_some(row.cancer_ratio);
            bags.push(Bag {
                id: bags.len(),
                instance_ids: tile_instance_ids,
                label,
                ratio,
                source_id: slide_ids
                    .iter()
                    .position(|s| s == &row.slide_id)
                    .unwrap_or(0),
            });
        }
    }

    if eval_rows.is_empty() {
        return Err(RunError::Data("no evaluation instances".into()));
    }
    let feature_len = eval_rows[0].len();
    let mut features = Array2::<f32>::zeros((eval_rows.len(), feature_len));
    for (i, row) in eval_rows.iter().enumerate() {
        features
            .row_mut(i)
            .iter_mut()
            .zip(row)
            .for_each(|(o, &f)| *o = f);
    }

    let set = InstanceSet::new(train_records).map_err(data_err)?;
    Ok(TaskData {
        set,
        bags,
        eval: EvalData {
            ids: eval_ids,
            features,
            truth: eval_truth,
        },
    })
}

/// Per-feature standardization with training-set statistics, applied to the
/// training instances and the evaluation batch alike.
fn standardize_features(data: &mut TaskData) -> Result<(), RunError> {
    let dim = data.set.feature_len();
    let n = data.set.len() as f64;
    if n == 0.0 {
        return Err(RunError::Data("cannot standardize an empty set".into()));
    }
    let mut mean = vec![0.0f64; dim];
    for rec in data.set.records() {
        for (m, &f) in mean.iter_mut().zip(&rec.features) {
            *m += f as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for rec in data.set.records() {
        for ((v, &f), &m) in var.iter_mut().zip(&rec.features).zip(&mean) {
            let d = f as f64 - m;
            *v += d * d;
        }
    }
    let scale: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / ((v / n).sqrt() + 1e-6)) as f32)
        .collect();
    let shift: Vec<f32> = mean.iter().map(|&m| m as f32).collect();

    let mut records = data.set.records().to_vec();
    for rec in records.iter_mut() {
        for ((f, &mu), &s) in rec.features.iter_mut().zip(&shift).zip(&scale) {
            *f = (*f - mu) * s;
        }
    }
    data.set = InstanceSet::new(records).map_err(data_err)?;
    for mut row in data.eval.features.rows_mut() {
        for ((f, &mu), &s) in row.iter_mut().zip(&shift).zip(&scale) {
            *f = (*f - mu) * s;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    std::fs::write(path, contents)
        .map_err(|e| RunError::Artifact(format!("{}: {e}", path.display())))
}

fn write_artifacts(
    config: &ExperimentConfig,
    phases: &[(&'static str, TrainOutput)],
    final_checkpoints: &[Checkpoint],
    eval: &EvalData,
    scores: &[f64],
    report: &MetricsReport,
    roc_csv: &str,
) -> Result<(), RunError> {
    let dir = &config.out_dir;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| RunError::Artifact(format!("{}: {e}", ckpt_dir.display())))?;

    let metrics_json = serde_json::to_string_pretty(report)
        .map_err(|e| RunError::Artifact(e.to_string()))?
        + "\n";
    write_file(&dir.join("metrics.json"), &metrics_json)?;
    write_file(&dir.join("roc.csv"), roc_csv)?;

    let mut predictions = String::from("instance_id,score,truth\n");
    for ((id, score), truth) in eval.ids.iter().zip(scores).zip(&eval.truth) {
        writeln!(predictions, "{},{},{}", id, score, u8::from(*truth)).unwrap();
    }
    write_file(&dir.join("predictions.csv"), &predictions)?;

    let mut log_csv = format!("phase,{}\n", crate::mil::TrainLogRow::CSV_HEADER);
    for (phase, output) in phases {
        for row in &output.log {
            writeln!(log_csv, "{phase},{}", row.to_csv_row()).unwrap();
        }
    }
    write_file(&dir.join("train_log.csv"), &log_csv)?;

    for ckpt in final_checkpoints {
        let path = ckpt_dir.join(format!("epoch_{:02}.ckpt", ckpt.epoch));
        save_checkpoint(&path, &ckpt.params, ckpt.epoch as u32)
            .map_err(|e| RunError::Artifact(e.to_string()))?;
    }

    write_file(&dir.join("resolved_config"), &config.to_resolved_string())
}

/// Summary row of one sweep child.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub size: usize,
    pub target: u8,
    pub t_percent: f64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary_path: PathBuf,
    pub any_failed: bool,
}

fn opt_metric(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs every combination of a sweep, recording child failures without
/// stopping, and writes one summary row per child.
pub fn sweep(plan: &SweepPlan) -> Result<SweepOutcome, RunError> {
    std::fs::create_dir_all(&plan.out_dir)
        .map_err(|e| RunError::Artifact(format!("{}: {e}", plan.out_dir.display())))?;
    let mut rows = Vec::with_capacity(plan.combos.len());
    for (i, combo) in plan.combos.iter().enumerate() {
        let outcome = plan
            .child_config(i)
            .map_err(RunError::from)
            .and_then(|child| run(&child));
        match outcome {
            Ok(out) => rows.push(SweepRow {
                size: combo.size,
                target: combo.target,
                t_percent: combo.t_percent,
                metrics: Some(out.metrics),
                error: None,
            }),
            Err(e) => {
                log::error!("sweep child {i} failed: {e}");
                rows.push(SweepRow {
                    size: combo.size,
                    target: combo.target,
                    t_percent: combo.t_percent,
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let mut csv =
        String::from("size,target,t_percent,sensitivity,specificity,f1,auc,status\n");
    for row in &rows {
        match &row.metrics {
            Some(m) => writeln!(
                csv,
                "{},{},{},{},{},{},{},ok",
                row.size,
                row.target,
                row.t_percent,
                opt_metric(m.sensitivity),
                opt_metric(m.specificity),
                opt_metric(m.f1),
                m.auc
            )
            .unwrap(),
            None => writeln!(
                csv,
                "{},{},{},,,,,failed",
                row.size, row.target, row.t_percent
            )
            .unwrap(),
        }
    }
    let summary_path = plan.out_dir.join("summary.csv");
    write_file(&summary_path, &csv)?;

    let any_failed = rows.iter().any(|r| r.error.is_some());
    Ok(SweepOutcome {
        rows,
        summary_path,
        any_failed,
    })
}

/// Generates the synthetic slide corpus described by a synth config.
pub fn synth(config: &SynthConfig) -> Result<SynthOutput, RunError> {
    make_synthetic_slides(&config.params, config.seed, &config.out_dir).map_err(data_err)
}
