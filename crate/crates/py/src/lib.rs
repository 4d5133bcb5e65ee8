//! Python bindings for the core types and operations: region labeling,
//! instance selection, Otsu thresholding, evaluation metrics, the learning
//! rate schedule, IDX parsing, and the classifier with its weakly supervised
//! training entry point.

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topmil_core::domain::{
    build_mnist_bags, classify_region_label as classify_impl, BagLabel, BagSpec, InstanceRecord,
    InstanceSet, SelectionPolicy,
};
use topmil_core::metrics;
use topmil_core::mil;
use topmil_core::nn;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_array(rows: &[Vec<f32>]) -> PyResult<Array2<f32>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("batch is empty"));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("ragged batch"));
    }
    let mut out = Array2::<f32>::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        out.row_mut(i)
            .iter_mut()
            .zip(row)
            .for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}

fn policy_from(name: &str, t_percent: Option<f64>, ratio: Option<f64>) -> PyResult<(SelectionPolicy, Option<f64>)> {
    match name {
        "top_fixed" => {
            let t = t_percent
                .ok_or_else(|| PyValueError::new_err("top_fixed needs t_percent"))?;
            Ok((SelectionPolicy::TopFixed { t_percent: t }, ratio))
        }
        "per_bag_ratio" => Ok((SelectionPolicy::PerBagRatio, ratio)),
        "max_instance" => Ok((SelectionPolicy::MaxInstance, ratio)),
        "all_instances" => Ok((SelectionPolicy::AllInstances, ratio)),
        other => Err(PyValueError::new_err(format!(
            "unknown policy `{other}` (top_fixed | per_bag_ratio | max_instance | all_instances)"
        ))),
    }
}

/// Three-way region labeling by cancerous-area ratio.
#[pyfunction]
#[pyo3(signature = (cancer_ratio, pos_threshold = 0.20))]
fn classify_region_label(cancer_ratio: f64, pos_threshold: f64) -> PyResult<String> {
    classify_impl(cancer_ratio, pos_threshold)
        .map(|label| label.as_str().to_string())
        .map_err(value_err)
}

/// floor(n * t / 100) clamped up to 1.
#[pyfunction]
fn selection_count(n: usize, t_percent: f64) -> PyResult<usize> {
    if n == 0 {
        return Err(PyValueError::new_err("bag must be non-empty"));
    }
    if !(t_percent > 0.0 && t_percent <= 100.0) {
        return Err(PyValueError::new_err("t must lie in (0, 100]"));
    }
    Ok(mil::selection_count(n, t_percent))
}

/// Training labels for one bag: list of (instance index, positive) pairs.
#[pyfunction]
#[pyo3(signature = (probs, positive_bag, policy, t_percent = None, ratio = None))]
fn select_instances(
    probs: Vec<f64>,
    positive_bag: bool,
    policy: &str,
    t_percent: Option<f64>,
    ratio: Option<f64>,
) -> PyResult<Vec<(usize, bool)>> {
    let (policy, ratio) = policy_from(policy, t_percent, ratio)?;
    let bag = topmil_core::domain::Bag {
        id: 0,
        instance_ids: (0..probs.len()).collect(),
        label: if positive_bag {
            BagLabel::Positive
        } else {
            BagLabel::Negative
        },
        ratio,
        source_id: 0,
    };
    mil::select_instances(&probs, &bag, &policy).map_err(value_err)
}

/// Between-class-variance threshold of a 256-bin histogram.
#[pyfunction]
fn otsu_threshold(histogram: Vec<u64>) -> PyResult<u8> {
    let hist: [u64; 256] = histogram
        .try_into()
        .map_err(|_| PyValueError::new_err("histogram must have exactly 256 bins"))?;
    topmil_core::tile::otsu_threshold(&hist).map_err(value_err)
}

/// Area under the ROC curve (ties count half).
#[pyfunction]
fn roc_auc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &truth)
        .map(|(_, auc)| auc)
        .map_err(value_err)
}

/// Confusion-derived rates plus AUC as a dict; 0/0 rates come back as None.
#[pyfunction]
#[pyo3(signature = (scores, truth, threshold = 0.5))]
fn binary_metrics<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    truth: Vec<bool>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (report, _) = metrics::evaluate(&scores, &truth, threshold).map_err(value_err)?;
    let dict = PyDict::new(py);
    dict.set_item("tp", report.tp)?;
    dict.set_item("fp", report.fp)?;
    dict.set_item("tn", report.tn)?;
    dict.set_item("fn", report.fneg)?;
    dict.set_item("sensitivity", report.sensitivity)?;
    dict.set_item("specificity", report.specificity)?;
    dict.set_item("precision", report.precision)?;
    dict.set_item("f1", report.f1)?;
    dict.set_item("accuracy", report.accuracy)?;
    dict.set_item("auc", report.auc)?;
    Ok(dict)
}

/// Learning rate for a 1-based epoch under the halving schedule.
#[pyfunction]
#[pyo3(signature = (epoch, initial = 0.001, halve_every = 5))]
fn lr_at_epoch(epoch: usize, initial: f64, halve_every: usize) -> PyResult<f64> {
    if epoch == 0 {
        return Err(PyValueError::new_err("epochs are 1-based"));
    }
    if initial <= 0.0 || halve_every == 0 {
        return Err(PyValueError::new_err("invalid schedule"));
    }
    Ok(nn::lr_at_epoch(
        epoch,
        &nn::LrSchedule {
            initial,
            halve_every,
        },
    ))
}

/// Parses IDX bytes into (dims, payload).
#[pyfunction]
fn parse_idx<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(Vec<usize>, Bound<'py, PyBytes>)> {
    let tensor = topmil_core::idx::parse_idx(data).map_err(value_err)?;
    Ok((tensor.dims, PyBytes::new(py, &tensor.data)))
}

/// Slide-level score: "max" or mean of the k largest.
#[pyfunction]
#[pyo3(signature = (probs, rule = "max", k = None))]
fn bag_score(probs: Vec<f64>, rule: &str, k: Option<usize>) -> PyResult<f64> {
    let rule = match rule {
        "max" => mil::BagScoreRule::Max,
        "topk_mean" => mil::BagScoreRule::TopkMean(
            k.ok_or_else(|| PyValueError::new_err("topk_mean needs k"))?,
        ),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown rule `{other}` (max | topk_mean)"
            )))
        }
    };
    mil::bag_score(&probs, rule).map_err(value_err)
}

/// SplitMix64 seed derivation.
#[pyfunction]
fn derive_seed(seed: u64, label: u64) -> u64 {
    mil::derive_seed(seed, label)
}

/// Dense rectifier network with a two-way softmax head.
#[pyclass]
struct Mlp {
    params: nn::MlpParams<f32>,
}

#[pymethods]
impl Mlp {
    /// Glorot-initialized network for layer widths [input, hidden..., 2].
    #[new]
    fn new(dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Mlp {
            params: nn::MlpParams::glorot(&dims, &mut rng).map_err(value_err)?,
        })
    }

    fn dims(&self) -> Vec<usize> {
        self.params.dims()
    }

    /// Positive-class probability per row.
    fn predict_proba(&self, batch: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let array = rows_to_array(&batch)?;
        nn::predict_positive_probs(&self.params, array.view()).map_err(value_err)
    }

    /// Writes a checkpoint file tagged with an epoch number.
    #[pyo3(signature = (path, epoch = 0))]
    fn save(&self, path: &str, epoch: u32) -> PyResult<()> {
        nn::save_checkpoint(std::path::Path::new(path), &self.params, epoch).map_err(value_err)
    }

    /// Loads a checkpoint file; returns the model and its epoch tag.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Mlp, u32)> {
        let (params, epoch) =
            nn::load_checkpoint(std::path::Path::new(path)).map_err(value_err)?;
        Ok((Mlp { params }, epoch))
    }
}

/// Mean-probability ensemble of congruent models.
#[pyclass]
struct Ensemble {
    inner: mil::Ensemble,
}

#[pymethods]
impl Ensemble {
    fn predict_proba(&self, batch: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let array = rows_to_array(&batch)?;
        self.inner.predict(array.view()).map_err(value_err)
    }

    fn len(&self) -> usize {
        self.inner.members().len()
    }

    /// The final member as a standalone model.
    fn final_member(&self) -> Mlp {
        Mlp {
            params: self.inner.members().last().unwrap().clone(),
        }
    }
}

/// Weakly supervised training on in-memory instances: groups them into
/// positive/negative bags by the target class, trains with top-t% selection
/// (optionally harvest-and-retrain), and returns the checkpoint ensemble.
#[pyfunction]
#[pyo3(signature = (features, labels, target, size, n_pos_bags, n_neg_bags,
                    t_percent = 10.0, epochs = 20, hidden = vec![256],
                    lr_initial = 0.001, retrain = true, seed = 0,
                    pos_count_max = None, checkpoint_epochs = None))]
#[allow(clippy::too_many_arguments)]
fn train_mnist_mil(
    features: Vec<Vec<f32>>,
    labels: Vec<u8>,
    target: u8,
    size: usize,
    n_pos_bags: usize,
    n_neg_bags: usize,
    t_percent: f64,
    epochs: usize,
    hidden: Vec<usize>,
    lr_initial: f64,
    retrain: bool,
    seed: u64,
    pos_count_max: Option<usize>,
    checkpoint_epochs: Option<Vec<usize>>,
) -> PyResult<Ensemble> {
    if features.len() != labels.len() {
        return Err(PyValueError::new_err("features/labels length mismatch"));
    }
    let records: Vec<InstanceRecord> = features
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(id, (features, &label))| InstanceRecord {
            id,
            features,
            truth: Some(label == target),
        })
        .collect();
    let set = InstanceSet::new(records).map_err(value_err)?;

    let spec = BagSpec {
        size,
        target,
        n_pos_bags,
        n_neg_bags,
        pos_count_max: pos_count_max.unwrap_or_else(|| size.min(1000)),
    };
    let mut bag_rng = ChaCha8Rng::seed_from_u64(mil::derive_seed(seed, 1));
    let bags = build_mnist_bags(set.records(), &spec, &mut bag_rng).map_err(value_err)?;

    let mut dims = vec![set.feature_len()];
    dims.extend(hidden);
    dims.push(2);
    let factory = mil::ModelFactory { dims };
    let config = mil::TrainConfig {
        policy: SelectionPolicy::TopFixed { t_percent },
        epochs,
        checkpoint_epochs: checkpoint_epochs.unwrap_or_else(|| default_checkpoint_epochs(epochs)),
        schedule: nn::LrSchedule {
            initial: lr_initial,
            halve_every: 5,
        },
        seed: mil::derive_seed(seed, 2),
        ..mil::TrainConfig::default()
    };

    let phase1 = mil::train(&config, &set, &bags, &factory).map_err(value_err)?;
    let final_checkpoints = if retrain {
        let ensemble = mil::Ensemble::from_checkpoints(&phase1.checkpoints).map_err(value_err)?;
        let harvest = mil::harvest_positives(&ensemble, &set, &bags, 0.5).map_err(value_err)?;
        let retrain_config = mil::TrainConfig {
            seed: mil::derive_seed(seed, 3),
            ..config
        };
        mil::retrain(&retrain_config, &set, &bags, &harvest, &factory)
            .map_err(value_err)?
            .checkpoints
    } else {
        phase1.checkpoints
    };
    Ok(Ensemble {
        inner: mil::Ensemble::from_checkpoints(&final_checkpoints).map_err(value_err)?,
    })
}

/// The standard late-epoch checkpoint set, scaled down for short runs.
fn default_checkpoint_epochs(epochs: usize) -> Vec<usize> {
    if epochs >= 20 {
        vec![12, 14, 16, 18, 20]
    } else {
        let start = epochs.saturating_sub(4).max(1);
        (start..=epochs).collect()
    }
}

#[pymodule]
fn topmil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mlp>()?;
    m.add_class::<Ensemble>()?;
    m.add_function(wrap_pyfunction!(classify_region_label, m)?)?;
    m.add_function(wrap_pyfunction!(selection_count, m)?)?;
    m.add_function(wrap_pyfunction!(select_instances, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(parse_idx, m)?)?;
    m.add_function(wrap_pyfunction!(bag_score, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(train_mnist_mil, m)?)?;
    Ok(())
}
