//! The weakly supervised training procedures: per-bag scoring, instance
//! selection under each policy, the training loop with balanced bag batches,
//! harvest-and-retrain refinement, checkpoint ensembling, and the
//! fully supervised / max-instance baselines.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{
    subsample_bag, Bag, BagLabel, DomainError, InstanceId, InstanceSet, SelectionPolicy,
};
use crate::nn::{
    adam_step, backward, batch_softmax_ce, forward, lr_at_epoch, positive_probs,
    predict_positive_probs, AdamState, ForwardCache, LrSchedule, MlpParams, NnError,
};

#[derive(Debug, Error)]
pub enum MilError {
    #[error("probs length {probs} does not match bag size {bag}")]
    ProbsMismatch { probs: usize, bag: usize },
    #[error("positive bag {0} has no ratio annotation")]
    MissingRatio(usize),
    #[error("dataset has {pos} positive / {neg} negative bags, need {need_pos}/{need_neg} per step")]
    InsufficientBags {
        pos: usize,
        neg: usize,
        need_pos: usize,
        need_neg: usize,
    },
    #[error("checkpoint epochs {0:?} must be non-empty and within 1..={1}")]
    BadCheckpointEpochs(Vec<usize>, usize),
    #[error("bags or instances per step must be at least 1")]
    ZeroBagsPerStep,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("retrain threshold {0} outside (0, 1)")]
    BadRetrainThreshold(f64),
    #[error("no positive instance selected in epoch {epoch} step {step}")]
    EmptySelection { epoch: usize, step: usize },
    #[error("harvest for positive bag {0} is empty")]
    EmptyHarvest(usize),
    #[error("instance {0} missing a truth label")]
    MissingTruth(InstanceId),
    #[error("ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("ensemble members have mismatched architectures")]
    IncongruentEnsemble,
    #[error("bag score input is empty")]
    EmptyScores,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// What to do when a training step selects no positive instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptySelectionPolicy {
    Fail,
    Skip,
}

/// Knobs of one training phase.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub policy: SelectionPolicy,
    pub epochs: usize,
    pub pos_bags_per_step: usize,
    pub neg_bags_per_step: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Instance cap applied per bag appearance (512 when a bag is a slide).
    pub slide_cap: Option<usize>,
    /// Harvested-share threshold steering retraining selection.
    pub retrain_threshold: f64,
    pub on_empty_selection: EmptySelectionPolicy,
    /// Abort instead of skipping positive bags whose harvest is empty.
    pub strict_harvest: bool,
    /// Minibatch size for instance-supervised training.
    pub instances_per_step: usize,
    /// Record per-step positive selections (used by verification runs).
    pub trace_selections: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: SelectionPolicy::TopFixed { t_percent: 20.0 },
            epochs: 20,
            pos_bags_per_step: 2,
            neg_bags_per_step: 2,
            checkpoint_epochs: vec![12, 14, 16, 18, 20],
            schedule: LrSchedule::default(),
            seed: 0,
            slide_cap: None,
            retrain_threshold: 0.20,
            on_empty_selection: EmptySelectionPolicy::Fail,
            strict_harvest: false,
            instances_per_step: 256,
            trace_selections: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MilError> {
        if self.epochs == 0 {
            return Err(MilError::ZeroEpochs);
        }
        if self.pos_bags_per_step == 0
            || self.neg_bags_per_step == 0
            || self.instances_per_step == 0
        {
            return Err(MilError::ZeroBagsPerStep);
        }
        if self.checkpoint_epochs.is_empty()
            || self
                .checkpoint_epochs
                .iter()
                .any(|&e| e == 0 || e > self.epochs)
        {
            return Err(MilError::BadCheckpointEpochs(
                self.checkpoint_epochs.clone(),
                self.epochs,
            ));
        }
        if !(self.retrain_threshold > 0.0 && self.retrain_threshold < 1.0) {
            return Err(MilError::BadRetrainThreshold(self.retrain_threshold));
        }
        Ok(())
    }
}

/// Instance ids predicted positive, per positive bag.
pub type HarvestSet = BTreeMap<usize, BTreeSet<InstanceId>>;

/// Builds fresh Glorot-initialized networks of a fixed architecture.
#[derive(Debug, Clone)]
pub struct ModelFactory {
    pub dims: Vec<usize>,
}

impl ModelFactory {
    pub fn build(&self, rng: &mut impl Rng) -> Result<MlpParams<f32>, NnError> {
        MlpParams::glorot(&self.dims, rng)
    }
}

/// SplitMix64 mixing, used to derive independent seeds from one root seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of instances the top-t% rule selects from a bag of `n`:
/// floor(n * t / 100) clamped up to 1 so positive bags always teach.
pub fn selection_count(n: usize, t_percent: f64) -> usize {
    assert!(n >= 1, "bag must be non-empty");
    assert!(
        t_percent > 0.0 && t_percent <= 100.0,
        "t must lie in (0, 100]"
    );
    let k = (n as f64 * t_percent / 100.0).floor() as usize;
    k.clamp(1, n)
}

/// Indices of the top `k` probabilities, ties broken toward the lower index;
/// the result is in ascending index order.
fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_unstable_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Assigns training labels inside one bag given per-instance positive
/// probabilities. Negative bags contribute every instance with a negative
/// label under every policy; positive bags follow the selection policy.
/// A pure function of its inputs.
pub fn select_instances(
    probs: &[f64],
    bag: &Bag,
    policy: &SelectionPolicy,
) -> Result<Vec<(usize, bool)>, MilError> {
    let n = bag.len();
    if probs.len() != n {
        return Err(MilError::ProbsMismatch {
            probs: probs.len(),
            bag: n,
        });
    }
    if bag.label == BagLabel::Negative {
        return Ok((0..n).map(|i| (i, false)).collect());
    }
    let selected = match policy {
        SelectionPolicy::TopFixed { t_percent } => {
            top_k_indices(probs, selection_count(n, *t_percent))
        }
        SelectionPolicy::PerBagRatio => {
            let ratio = bag.ratio.ok_or(MilError::MissingRatio(bag.id))?;
            top_k_indices(probs, selection_count(n, ratio * 100.0))
        }
        SelectionPolicy::MaxInstance => top_k_indices(probs, 1),
        SelectionPolicy::AllInstances => (0..n).collect(),
    };
    Ok(selected.into_iter().map(|i| (i, true)).collect())
}

/// Positive selection during retraining: only harvested ids are candidates.
/// When the harvested share of the full bag strictly exceeds the threshold,
/// the top `selection_count(n, threshold*100)` harvested ids by current
/// probability are taken; otherwise every harvested id is.
pub fn retrain_selection(
    probs: &[f64],
    bag: &Bag,
    harvested: &BTreeSet<InstanceId>,
    full_bag_size: usize,
    retrain_threshold: f64,
) -> Vec<usize> {
    let candidates: Vec<usize> = bag
        .instance_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| harvested.contains(id))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let share = harvested.len() as f64 / full_bag_size as f64;
    if share > retrain_threshold {
        let k = selection_count(full_bag_size, retrain_threshold * 100.0).min(candidates.len());
        let cand_probs: Vec<f64> = candidates.iter().map(|&i| probs[i]).collect();
        top_k_indices(&cand_probs, k)
            .into_iter()
            .map(|ci| candidates[ci])
            .collect()
    } else {
        candidates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub positives_selected: usize,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,mean_loss,positives_selected";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.mean_loss, self.positives_selected
        )
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: MlpParams<f32>,
}

/// One recorded positive selection, for containment verification.
#[derive(Debug, Clone)]
pub struct SelectionEvent {
    pub epoch: usize,
    pub step: usize,
    pub bag_id: usize,
    pub positive_ids: Vec<InstanceId>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<TrainLogRow>,
    pub selection_trace: Vec<SelectionEvent>,
}

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Weak-label training: each step samples the configured bag mix, scores all
/// instances, selects training labels per policy, and Adam-updates on the
/// mean cross-entropy over the selected instances. One epoch is one full pass
/// over the positive bags, with negatives cycled as needed. Fully
/// deterministic from the config seed.
pub fn train(
    config: &TrainConfig,
    set: &InstanceSet,
    bags: &[Bag],
    factory: &ModelFactory,
) -> Result<TrainOutput, MilError> {
    train_inner(config, set, bags, factory, None)
}

/// Retraining from scratch with positive selection restricted to harvested
/// ids. Positive bags with an empty harvest are skipped with a warning, or
/// abort the run in strict mode.
pub fn retrain(
    config: &TrainConfig,
    set: &InstanceSet,
    bags: &[Bag],
    harvest: &HarvestSet,
    factory: &ModelFactory,
) -> Result<TrainOutput, MilError> {
    train_inner(config, set, bags, factory, Some(harvest))
}

fn train_inner(
    config: &TrainConfig,
    set: &InstanceSet,
    bags: &[Bag],
    factory: &ModelFactory,
    harvest: Option<&HarvestSet>,
) -> Result<TrainOutput, MilError> {
    config.validate()?;

    let mut pos_bags: Vec<&Bag> = bags
        .iter()
        .filter(|b| b.label == BagLabel::Positive)
        .collect();
    let neg_bags: Vec<&Bag> = bags
        .iter()
        .filter(|b| b.label == BagLabel::Negative)
        .collect();

    if let Some(harvest) = harvest {
        let mut kept = Vec::with_capacity(pos_bags.len());
        for bag in pos_bags {
            let empty = harvest.get(&bag.id).map_or(true, |h| h.is_empty());
            if empty {
                if config.strict_harvest {
                    return Err(MilError::EmptyHarvest(bag.id));
                }
                log::warn!("skipping positive bag {}: empty harvest", bag.id);
            } else {
                kept.push(bag);
            }
        }
        pos_bags = kept;
    }
    if pos_bags.len() < config.pos_bags_per_step || neg_bags.len() < config.neg_bags_per_step {
        return Err(MilError::InsufficientBags {
            pos: pos_bags.len(),
            neg: neg_bags.len(),
            need_pos: config.pos_bags_per_step,
            need_neg: config.neg_bags_per_step,
        });
    }

    let mut init_rng = rng_for(config.seed, STREAM_INIT);
    let mut data_rng = rng_for(config.seed, STREAM_DATA);
    let mut params = factory.build(&mut init_rng)?;
    let mut adam = AdamState::new(&params);

    let mut output = TrainOutput {
        checkpoints: Vec::new(),
        log: Vec::new(),
        selection_trace: Vec::new(),
    };

    for epoch in 1..=config.epochs {
        let lr = lr_at_epoch(epoch, &config.schedule);

        let mut pos_order: Vec<usize> = (0..pos_bags.len()).collect();
        pos_order.shuffle(&mut data_rng);
        let mut neg_order: Vec<usize> = (0..neg_bags.len()).collect();
        neg_order.shuffle(&mut data_rng);
        let mut neg_cursor = 0usize;

        let steps = pos_order.len().div_ceil(config.pos_bags_per_step);
        for step in 0..steps {
            let hi = ((step + 1) * config.pos_bags_per_step).min(pos_order.len());
            let mut step_bags: Vec<&Bag> = pos_order[step * config.pos_bags_per_step..hi]
                .iter()
                .map(|&i| pos_bags[i])
                .collect();
            for _ in 0..config.neg_bags_per_step {
                step_bags.push(neg_bags[neg_order[neg_cursor % neg_order.len()]]);
                neg_cursor += 1;
            }

            let mut logit_parts: Vec<Array2<f32>> = Vec::new();
            let mut cache_parts: Vec<ForwardCache<f32>> = Vec::new();
            let mut labels: Vec<bool> = Vec::new();
            let mut positives = 0usize;

            for bag in step_bags {
                let view: Bag = match config.slide_cap {
                    Some(cap) if bag.len() > cap => subsample_bag(bag, cap, &mut data_rng)?,
                    _ => bag.clone(),
                };
                let feats = set.features_matrix(&view.instance_ids)?;
                let (logits, cache) = forward(&params, feats)?;
                let probs = positive_probs(&logits);

                let selected: Vec<(usize, bool)> = match (harvest, view.label) {
                    (Some(harvest), BagLabel::Positive) => retrain_selection(
                        &probs,
                        &view,
                        &harvest[&view.id],
                        bag.len(),
                        config.retrain_threshold,
                    )
                    .into_iter()
                    .map(|i| (i, true))
                    .collect(),
                    _ => select_instances(&probs, &view, &config.policy)?,
                };
                if selected.is_empty() {
                    continue;
                }

                let rows: Vec<usize> = selected.iter().map(|&(i, _)| i).collect();
                let pos_here = selected.iter().filter(|&&(_, label)| label).count();
                positives += pos_here;
                if config.trace_selections && pos_here > 0 {
                    output.selection_trace.push(SelectionEvent {
                        epoch,
                        step,
                        bag_id: view.id,
                        positive_ids: selected
                            .iter()
                            .filter(|&&(_, label)| label)
                            .map(|&(i, _)| view.instance_ids[i])
                            .collect(),
                    });
                }
                labels.extend(selected.iter().map(|&(_, label)| label));
                logit_parts.push(logits.select(Axis(0), &rows));
                cache_parts.push(cache.select_rows(&rows));
            }

            if positives == 0 {
                match config.on_empty_selection {
                    EmptySelectionPolicy::Fail => {
                        return Err(MilError::EmptySelection { epoch, step });
                    }
                    EmptySelectionPolicy::Skip => {
                        log::warn!("epoch {epoch} step {step}: no positives selected, skipping");
                        continue;
                    }
                }
            }

            let logits = concat_rows(&logit_parts);
            let cache = concat_caches(&cache_parts);
            let (mean_loss, dlogits) = batch_softmax_ce(&logits, &labels)?;
            let grads = backward(&params, &cache, &dlogits)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;

            output.log.push(TrainLogRow {
                epoch,
                step,
                lr,
                mean_loss,
                positives_selected: positives,
            });
        }

        if config.checkpoint_epochs.contains(&epoch) {
            output.checkpoints.push(Checkpoint {
                epoch,
                params: params.clone(),
            });
        }
    }
    Ok(output)
}

fn concat_rows(parts: &[Array2<f32>]) -> Array2<f32> {
    let views: Vec<ArrayView2<f32>> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("row widths agree")
}

fn concat_caches(parts: &[ForwardCache<f32>]) -> ForwardCache<f32> {
    let depth = parts[0].layer_inputs.len();
    let layer_inputs = (0..depth)
        .map(|l| {
            let views: Vec<ArrayView2<f32>> =
                parts.iter().map(|c| c.layer_inputs[l].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("row widths agree")
        })
        .collect();
    ForwardCache { layer_inputs }
}

/// Instance-supervised training on truth labels with the same optimizer,
/// schedule, and checkpointing; the comparison ceiling.
pub fn fsb_train(
    config: &TrainConfig,
    set: &InstanceSet,
    factory: &ModelFactory,
) -> Result<TrainOutput, MilError> {
    config.validate()?;
    let mut truths = Vec::with_capacity(set.len());
    for rec in set.records() {
        truths.push(rec.truth.ok_or(MilError::MissingTruth(rec.id))?);
    }

    let mut init_rng = rng_for(config.seed, STREAM_INIT);
    let mut data_rng = rng_for(config.seed, STREAM_DATA);
    let mut params = factory.build(&mut init_rng)?;
    let mut adam = AdamState::new(&params);
    let ids: Vec<InstanceId> = set.records().iter().map(|r| r.id).collect();
    let all_features = set.features_matrix(&ids)?;

    let mut output = TrainOutput {
        checkpoints: Vec::new(),
        log: Vec::new(),
        selection_trace: Vec::new(),
    };
    for epoch in 1..=config.epochs {
        let lr = lr_at_epoch(epoch, &config.schedule);
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut data_rng);
        for (step, rows) in order.chunks(config.instances_per_step).enumerate() {
            let batch = all_features.select(Axis(0), rows);
            let labels: Vec<bool> = rows.iter().map(|&i| truths[i]).collect();
            let (logits, cache) = forward(&params, batch)?;
            let (mean_loss, dlogits) = batch_softmax_ce(&logits, &labels)?;
            let grads = backward(&params, &cache, &dlogits)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;
            output.log.push(TrainLogRow {
                epoch,
                step,
                lr,
                mean_loss,
                positives_selected: labels.iter().filter(|&&l| l).count(),
            });
        }
        if config.checkpoint_epochs.contains(&epoch) {
            output.checkpoints.push(Checkpoint {
                epoch,
                params: params.clone(),
            });
        }
    }
    Ok(output)
}

/// Mean-probability ensemble over congruent checkpoints.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<MlpParams<f32>>,
}

impl Ensemble {
    pub fn new(members: Vec<MlpParams<f32>>) -> Result<Self, MilError> {
        if members.is_empty() {
            return Err(MilError::EmptyEnsemble);
        }
        let dims = members[0].dims();
        if members.iter().any(|m| m.dims() != dims) {
            return Err(MilError::IncongruentEnsemble);
        }
        Ok(Ensemble { members })
    }

    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self, MilError> {
        Ensemble::new(checkpoints.iter().map(|c| c.params.clone()).collect())
    }

    /// Only the last saved checkpoint, for single-model harvesting.
    pub fn final_checkpoint_only(checkpoints: &[Checkpoint]) -> Result<Self, MilError> {
        let last = checkpoints.last().ok_or(MilError::EmptyEnsemble)?;
        Ensemble::new(vec![last.params.clone()])
    }

    pub fn members(&self) -> &[MlpParams<f32>] {
        &self.members
    }

    pub fn predict(&self, batch: ArrayView2<f32>) -> Result<Vec<f64>, MilError> {
        ensemble_predict(self, batch)
    }
}

/// Arithmetic mean of member positive probabilities.
pub fn ensemble_predict(ensemble: &Ensemble, batch: ArrayView2<f32>) -> Result<Vec<f64>, MilError> {
    let mut sums = vec![0.0f64; batch.nrows()];
    for member in &ensemble.members {
        let probs = predict_positive_probs(member, batch)?;
        for (acc, p) in sums.iter_mut().zip(probs) {
            *acc += p;
        }
    }
    let inv = 1.0 / ensemble.members.len() as f64;
    Ok(sums.into_iter().map(|s| s * inv).collect())
}

/// Classifies every instance of each positive bag and saves the ids predicted
/// positive (probability at or above the decision threshold).
pub fn harvest_positives(
    ensemble: &Ensemble,
    set: &InstanceSet,
    bags: &[Bag],
    decision_threshold: f64,
) -> Result<HarvestSet, MilError> {
    let mut harvest = HarvestSet::new();
    for bag in bags.iter().filter(|b| b.label == BagLabel::Positive) {
        let feats = set.features_matrix(&bag.instance_ids)?;
        let probs = ensemble.predict(feats.view())?;
        let kept: BTreeSet<InstanceId> = bag
            .instance_ids
            .iter()
            .zip(&probs)
            .filter(|&(_, &p)| p >= decision_threshold)
            .map(|(&id, _)| id)
            .collect();
        harvest.insert(bag.id, kept);
    }
    Ok(harvest)
}

/// Slide-level score from instance probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagScoreRule {
    Max,
    /// Mean of the k largest probabilities, k clamped to the bag size.
    TopkMean(usize),
}

pub fn bag_score(probs: &[f64], rule: BagScoreRule) -> Result<f64, MilError> {
    if probs.is_empty() {
        return Err(MilError::EmptyScores);
    }
    match rule {
        BagScoreRule::Max => Ok(probs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))),
        BagScoreRule::TopkMean(k) => {
            let k = k.clamp(1, probs.len());
            let mut sorted = probs.to_vec();
            sorted.sort_unstable_by(|a, b| b.total_cmp(a));
            Ok(sorted[..k].iter().sum::<f64>() / k as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::InstanceRecord;
    use proptest::prelude::*;

    fn bag(id: usize, n: usize, label: BagLabel, ratio: Option<f64>) -> Bag {
        Bag {
            id,
            instance_ids: (0..n).collect(),
            label,
            ratio,
            source_id: id,
        }
    }

    /// Brute-force reference: enumerate index/probability pairs, full stable
    /// sort, take the prefix. Independent of the selection implementation.
    fn brute_force_selection(
        probs: &[f64],
        bag: &Bag,
        policy: &SelectionPolicy,
    ) -> Vec<(usize, bool)> {
        if bag.label == BagLabel::Negative {
            return (0..bag.len()).map(|i| (i, false)).collect();
        }
        let k = match policy {
            SelectionPolicy::TopFixed { t_percent } => {
                let raw = (bag.len() as f64 * t_percent / 100.0).floor() as usize;
                raw.max(1).min(bag.len())
            }
            SelectionPolicy::PerBagRatio => {
                let raw = (bag.len() as f64 * bag.ratio.unwrap() * 100.0 / 100.0).floor() as usize;
                raw.max(1).min(bag.len())
            }
            SelectionPolicy::MaxInstance => 1,
            SelectionPolicy::AllInstances => bag.len(),
        };
        let mut pairs: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let mut idx: Vec<usize> = pairs[..k].iter().map(|&(i, _)| i).collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| (i, true)).collect()
    }

    #[test]
    fn selection_count_floor_and_clamp() {
        assert_eq!(selection_count(256, 20.0), 51);
        assert_eq!(selection_count(3, 20.0), 1);
        assert_eq!(selection_count(10, 100.0), 10);
        assert_eq!(selection_count(1000, 10.0), 100);
        assert_eq!(selection_count(1, 0.5), 1);
    }

    #[test]
    fn select_instances_worked_examples() {
        let probs = [0.9, 0.1, 0.8, 0.3, 0.5];
        let pos = bag(0, 5, BagLabel::Positive, None);

        let picked =
            select_instances(&probs, &pos, &SelectionPolicy::TopFixed { t_percent: 40.0 })
                .unwrap();
        assert_eq!(picked, vec![(0, true), (2, true)]);

        let neg = bag(1, 5, BagLabel::Negative, None);
        let picked =
            select_instances(&probs, &neg, &SelectionPolicy::TopFixed { t_percent: 40.0 })
                .unwrap();
        assert_eq!(picked.len(), 5);
        assert!(picked.iter().all(|&(_, label)| !label));

        let picked = select_instances(&probs, &pos, &SelectionPolicy::MaxInstance).unwrap();
        assert_eq!(picked, vec![(0, true)]);

        let ratio_bag = bag(2, 4, BagLabel::Positive, Some(0.5));
        let picked =
            select_instances(&probs[..4], &ratio_bag, &SelectionPolicy::PerBagRatio).unwrap();
        assert_eq!(picked.len(), 2);

        let no_ratio = bag(3, 4, BagLabel::Positive, None);
        assert!(matches!(
            select_instances(&probs[..4], &no_ratio, &SelectionPolicy::PerBagRatio),
            Err(MilError::MissingRatio(3))
        ));

        assert!(select_instances(&probs[..3], &pos, &SelectionPolicy::MaxInstance).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let probs = [0.5, 0.9, 0.9, 0.5, 0.1];
        let pos = bag(0, 5, BagLabel::Positive, None);
        let picked =
            select_instances(&probs, &pos, &SelectionPolicy::TopFixed { t_percent: 60.0 })
                .unwrap();
        // k = 3: both 0.9s, then the first 0.5.
        assert_eq!(picked, vec![(0, true), (1, true), (2, true)]);
    }

    #[test]
    fn selection_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..500 {
            let n = rng.random_range(1..=200);
            // Quantized probabilities force ties.
            let probs: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..=10) as f64 / 10.0)
                .collect();
            let policy = match case % 4 {
                0 => SelectionPolicy::TopFixed {
                    t_percent: rng.random_range(1..=100) as f64,
                },
                1 => SelectionPolicy::PerBagRatio,
                2 => SelectionPolicy::MaxInstance,
                _ => SelectionPolicy::AllInstances,
            };
            let label = if rng.random_bool(0.3) {
                BagLabel::Negative
            } else {
                BagLabel::Positive
            };
            let ratio = Some(rng.random_range(1..=100) as f64 / 100.0);
            let b = bag(case, n, label, ratio);
            assert_eq!(
                select_instances(&probs, &b, &policy).unwrap(),
                brute_force_selection(&probs, &b, &policy),
                "case {case} policy {policy:?}"
            );
        }
    }

    #[test]
    fn retrain_selection_branches() {
        // Bag of 10; harvest of 3 (30% > 20%): take the top 2 by probability.
        let b = bag(0, 10, BagLabel::Positive, None);
        let probs = [0.1, 0.95, 0.2, 0.9, 0.3, 0.85, 0.4, 0.1, 0.1, 0.1];
        let harvested: BTreeSet<usize> = [1, 3, 5].into_iter().collect();
        assert_eq!(retrain_selection(&probs, &b, &harvested, 10, 0.20), vec![1, 3]);

        // Harvest of 1 (10% <= 20%): keep that single id.
        let harvested: BTreeSet<usize> = [6].into_iter().collect();
        assert_eq!(retrain_selection(&probs, &b, &harvested, 10, 0.20), vec![6]);

        // Exactly at the threshold (20% of 10 = 2): not strictly greater,
        // keep all harvested ids.
        let harvested: BTreeSet<usize> = [2, 4].into_iter().collect();
        assert_eq!(retrain_selection(&probs, &b, &harvested, 10, 0.20), vec![2, 4]);

        let empty = BTreeSet::new();
        assert!(retrain_selection(&probs, &b, &empty, 10, 0.20).is_empty());
    }

    fn toy_set(n_pos: usize, n_neg: usize) -> InstanceSet {
        // Two separable blobs in three dimensions.
        let records: Vec<InstanceRecord> = (0..n_pos + n_neg)
            .map(|i| {
                let positive = i < n_pos;
                let wiggle = (i % 7) as f32 / 70.0;
                InstanceRecord {
                    id: i,
                    features: if positive {
                        vec![0.8 + wiggle, 0.2, 0.7]
                    } else {
                        vec![0.1 + wiggle, 0.7, 0.2]
                    },
                    truth: Some(positive),
                }
            })
            .collect();
        InstanceSet::new(records).unwrap()
    }

    fn toy_bags(set: &InstanceSet, n_pos_bags: usize, n_neg_bags: usize, size: usize) -> Vec<Bag> {
        let pos_ids: Vec<usize> = set
            .records()
            .iter()
            .filter(|r| r.truth == Some(true))
            .map(|r| r.id)
            .collect();
        let neg_ids: Vec<usize> = set
            .records()
            .iter()
            .filter(|r| r.truth == Some(false))
            .map(|r| r.id)
            .collect();
        let mut bags = Vec::new();
        for b in 0..n_pos_bags {
            let mut ids: Vec<usize> = (0..size / 2)
                .map(|i| pos_ids[(b * 31 + i) % pos_ids.len()])
                .collect();
            ids.extend((0..size - size / 2).map(|i| neg_ids[(b * 17 + i) % neg_ids.len()]));
            bags.push(Bag {
                id: b,
                instance_ids: ids,
                label: BagLabel::Positive,
                ratio: Some(0.5),
                source_id: b,
            });
        }
        for b in 0..n_neg_bags {
            let ids: Vec<usize> = (0..size)
                .map(|i| neg_ids[(b * 13 + i) % neg_ids.len()])
                .collect();
            bags.push(Bag {
                id: n_pos_bags + b,
                instance_ids: ids,
                label: BagLabel::Negative,
                ratio: None,
                source_id: n_pos_bags + b,
            });
        }
        bags
    }

    /// The default initial rate suits wide inputs; the 3-feature toys here
    /// need larger steps to move in a handful of epochs.
    fn toy_schedule() -> LrSchedule {
        LrSchedule {
            initial: 0.05,
            halve_every: 5,
        }
    }

    fn quick_config(policy: SelectionPolicy, epochs: usize) -> TrainConfig {
        TrainConfig {
            policy,
            epochs,
            checkpoint_epochs: vec![epochs],
            seed: 5,
            schedule: toy_schedule(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_emits_checkpoints_deterministically_and_learns() {
        let set = toy_set(60, 60);
        let bags = toy_bags(&set, 4, 4, 20);
        let factory = ModelFactory {
            dims: vec![3, 8, 2],
        };
        let config = TrainConfig {
            policy: SelectionPolicy::TopFixed { t_percent: 50.0 },
            epochs: 20,
            seed: 11,
            schedule: toy_schedule(),
            ..TrainConfig::default()
        };
        let out = train(&config, &set, &bags, &factory).unwrap();
        assert_eq!(
            out.checkpoints.iter().map(|c| c.epoch).collect::<Vec<_>>(),
            vec![12, 14, 16, 18, 20]
        );
        let again = train(&config, &set, &bags, &factory).unwrap();
        for (a, b) in out.checkpoints.iter().zip(&again.checkpoints) {
            assert_eq!(a.params, b.params);
        }
        assert_eq!(out.log, again.log);
        // Loss shrinks by at least 10x on this separable toy set.
        let first = out.log.first().unwrap().mean_loss;
        let last = out.log.last().unwrap().mean_loss;
        assert!(last < first / 10.0, "loss did not shrink: {first} -> {last}");
    }

    #[test]
    fn training_requires_enough_bags() {
        let set = toy_set(20, 20);
        let bags = toy_bags(&set, 1, 1, 10);
        let factory = ModelFactory {
            dims: vec![3, 4, 2],
        };
        let config = quick_config(SelectionPolicy::MaxInstance, 4);
        assert!(matches!(
            train(&config, &set, &bags, &factory),
            Err(MilError::InsufficientBags { .. })
        ));
    }

    #[test]
    fn slide_cap_path_is_deterministic() {
        let set = toy_set(100, 100);
        let bags = toy_bags(&set, 2, 2, 80);
        let factory = ModelFactory {
            dims: vec![3, 4, 2],
        };
        let mut config = quick_config(SelectionPolicy::TopFixed { t_percent: 10.0 }, 2);
        config.slide_cap = Some(16);
        let a = train(&config, &set, &bags, &factory).unwrap();
        let b = train(&config, &set, &bags, &factory).unwrap();
        assert_eq!(
            a.checkpoints.last().unwrap().params,
            b.checkpoints.last().unwrap().params
        );
    }

    #[test]
    fn harvest_thresholds_and_retrain_containment() {
        let set = toy_set(80, 80);
        let bags = toy_bags(&set, 3, 3, 24);
        let factory = ModelFactory {
            dims: vec![3, 8, 2],
        };
        let config = TrainConfig {
            policy: SelectionPolicy::TopFixed { t_percent: 50.0 },
            epochs: 12,
            checkpoint_epochs: vec![8, 10, 12],
            seed: 3,
            schedule: toy_schedule(),
            ..TrainConfig::default()
        };
        let first = train(&config, &set, &bags, &factory).unwrap();
        let ensemble = Ensemble::from_checkpoints(&first.checkpoints).unwrap();
        let harvest = harvest_positives(&ensemble, &set, &bags, 0.5).unwrap();
        assert_eq!(harvest.len(), 3);
        // Brute-force threshold filter on one bag.
        let bag0 = &bags[0];
        let probs = ensemble
            .predict(set.features_matrix(&bag0.instance_ids).unwrap().view())
            .unwrap();
        let expect: BTreeSet<usize> = bag0
            .instance_ids
            .iter()
            .zip(&probs)
            .filter(|&(_, &p)| p >= 0.5)
            .map(|(&id, _)| id)
            .collect();
        assert_eq!(harvest[&0], expect);

        let retrain_config = TrainConfig {
            trace_selections: true,
            seed: 4,
            ..config
        };
        let second = retrain(&retrain_config, &set, &bags, &harvest, &factory).unwrap();
        assert!(!second.selection_trace.is_empty());
        for event in &second.selection_trace {
            let harvested = &harvest[&event.bag_id];
            for id in &event.positive_ids {
                assert!(harvested.contains(id), "id {id} not harvested");
            }
        }
    }

    #[test]
    fn degenerate_harvests_obey_error_policy() {
        let set = toy_set(40, 40);
        let bags = toy_bags(&set, 3, 2, 10);
        let factory = ModelFactory {
            dims: vec![3, 4, 2],
        };
        let mut harvest = HarvestSet::new();
        harvest.insert(0, BTreeSet::new());
        harvest.insert(1, [bags[1].instance_ids[0]].into_iter().collect());
        harvest.insert(2, [bags[2].instance_ids[0]].into_iter().collect());

        // Default: bag 0 is skipped with a warning and the run proceeds.
        let config = quick_config(SelectionPolicy::TopFixed { t_percent: 50.0 }, 4);
        assert!(retrain(&config, &set, &bags, &harvest, &factory).is_ok());

        // Strict mode aborts.
        let strict = TrainConfig {
            strict_harvest: true,
            ..config.clone()
        };
        assert!(matches!(
            retrain(&strict, &set, &bags, &harvest, &factory),
            Err(MilError::EmptyHarvest(0))
        ));

        // All harvests empty: no positive bags survive.
        let mut all_empty = HarvestSet::new();
        for b in 0..3 {
            all_empty.insert(b, BTreeSet::new());
        }
        assert!(retrain(&config, &set, &bags, &all_empty, &factory).is_err());
    }

    #[test]
    fn ensemble_means_member_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = MlpParams::<f32>::glorot(&[3, 4, 2], &mut rng).unwrap();
        let b = MlpParams::<f32>::glorot(&[3, 4, 2], &mut rng).unwrap();
        let batch = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f32 / 5.0);

        let pa = predict_positive_probs(&a, batch.view()).unwrap();
        let pb = predict_positive_probs(&b, batch.view()).unwrap();
        let ens = Ensemble::new(vec![a.clone(), b]).unwrap();
        let mean = ens.predict(batch.view()).unwrap();
        for i in 0..6 {
            assert!((mean[i] - (pa[i] + pb[i]) / 2.0).abs() < 1e-15);
        }

        let single = Ensemble::new(vec![a]).unwrap();
        let ps = single.predict(batch.view()).unwrap();
        for i in 0..6 {
            assert!((ps[i] - pa[i]).abs() < 1e-15);
        }
        assert!(Ensemble::new(vec![]).is_err());
    }

    #[test]
    fn fsb_reaches_ceiling_on_separable_data() {
        let set = toy_set(120, 120);
        let factory = ModelFactory {
            dims: vec![3, 8, 2],
        };
        let config = TrainConfig {
            epochs: 10,
            checkpoint_epochs: vec![8, 10],
            seed: 21,
            instances_per_step: 32,
            schedule: toy_schedule(),
            ..TrainConfig::default()
        };
        let out = fsb_train(&config, &set, &factory).unwrap();
        let ens = Ensemble::from_checkpoints(&out.checkpoints).unwrap();
        let ids: Vec<usize> = set.records().iter().map(|r| r.id).collect();
        let probs = ens
            .predict(set.features_matrix(&ids).unwrap().view())
            .unwrap();
        let truth: Vec<bool> = set.records().iter().map(|r| r.truth.unwrap()).collect();
        let (report, _) = crate::metrics::evaluate(&probs, &truth, 0.5).unwrap();
        assert!(report.f1.unwrap() >= 0.95, "f1 {:?}", report.f1);

        let again = fsb_train(&config, &set, &factory).unwrap();
        assert_eq!(
            out.checkpoints.last().unwrap().params,
            again.checkpoints.last().unwrap().params
        );

        let mut records = set.records().to_vec();
        records[0].truth = None;
        let broken = InstanceSet::new(records).unwrap();
        assert!(matches!(
            fsb_train(&config, &broken, &factory),
            Err(MilError::MissingTruth(0))
        ));
    }

    #[test]
    fn bag_scores() {
        assert_eq!(bag_score(&[0.1, 0.9], BagScoreRule::Max).unwrap(), 0.9);
        let top2 = bag_score(&[0.4, 0.6, 0.8], BagScoreRule::TopkMean(2)).unwrap();
        assert!((top2 - 0.7).abs() < 1e-15);
        assert_eq!(bag_score(&[0.3], BagScoreRule::Max).unwrap(), 0.3);
        assert_eq!(bag_score(&[0.3], BagScoreRule::TopkMean(5)).unwrap(), 0.3);
        assert!(bag_score(&[], BagScoreRule::Max).is_err());
    }

    proptest! {
        /// For fixed probabilities the TopFixed selection grows with t:
        /// the smaller-t selection is a subset of the larger-t selection.
        #[test]
        fn topfixed_selection_is_monotone_in_t(
            quantized in proptest::collection::vec(0u8..20, 1..120),
            t_lo in 1u8..=100,
            t_hi in 1u8..=100,
        ) {
            let (t1, t2) = if t_lo <= t_hi { (t_lo, t_hi) } else { (t_hi, t_lo) };
            let probs: Vec<f64> = quantized.iter().map(|&q| q as f64 / 19.0).collect();
            let b = Bag {
                id: 0,
                instance_ids: (0..probs.len()).collect(),
                label: BagLabel::Positive,
                ratio: None,
                source_id: 0,
            };
            let small: BTreeSet<usize> =
                select_instances(&probs, &b, &SelectionPolicy::TopFixed { t_percent: t1 as f64 })
                    .unwrap().into_iter().map(|(i, _)| i).collect();
            let large: BTreeSet<usize> =
                select_instances(&probs, &b, &SelectionPolicy::TopFixed { t_percent: t2 as f64 })
                    .unwrap().into_iter().map(|(i, _)| i).collect();
            prop_assert!(small.is_subset(&large));
        }

        /// Negative bags contribute only negative labels under every policy.
        #[test]
        fn negative_bags_always_all_negative(
            n in 1usize..80,
            policy_pick in 0u8..4,
        ) {
            let probs: Vec<f64> = (0..n).map(|i| (i % 10) as f64 / 10.0).collect();
            let b = Bag {
                id: 0,
                instance_ids: (0..n).collect(),
                label: BagLabel::Negative,
                ratio: Some(0.5),
                source_id: 0,
            };
            let policy = match policy_pick {
                0 => SelectionPolicy::TopFixed { t_percent: 25.0 },
                1 => SelectionPolicy::PerBagRatio,
                2 => SelectionPolicy::MaxInstance,
                _ => SelectionPolicy::AllInstances,
            };
            let got = select_instances(&probs, &b, &policy).unwrap();
            prop_assert_eq!(got.len(), n);
            prop_assert!(got.iter().all(|&(_, label)| !label));
        }
    }
}

