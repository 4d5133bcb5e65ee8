//! Bag/instance data model, bag-labeling rules, and bag assembly.
//!
//! Instances carry features and an optional ground-truth label used only for
//! evaluation and the fully supervised baseline. A bag references instances
//! by id and carries the weak (bag-level) label; weak supervision never looks
//! at instance truth.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::idx::LabeledExample;
use crate::tile::Mask;

pub type InstanceId = usize;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("cancer ratio {0} outside [0, 1]")]
    RatioOutOfRange(f64),
    #[error("positive threshold {0} outside (0, 1)")]
    ThresholdOutOfRange(f64),
    #[error("bag size must be at least 1")]
    SizeZero,
    #[error("pos_count_max {pos_count_max} invalid for bag size {size}")]
    BadPosCountMax { pos_count_max: usize, size: usize },
    #[error("target group is empty")]
    EmptyTargetGroup,
    #[error("non-target group is empty")]
    EmptyNonTargetGroup,
    #[error("instance {0} has no truth label")]
    MissingTruth(InstanceId),
    #[error("subsample cap must be at least 1")]
    CapZero,
    #[error("mask is {got_w}x{got_h}, instance patch is {want_w}x{want_h}")]
    MaskDimMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("feature length {got} differs from dataset feature length {want}")]
    FeatureLenMismatch { got: usize, want: usize },
    #[error("duplicate instance id {0}")]
    DuplicateId(InstanceId),
    #[error("unknown instance id {0}")]
    UnknownInstance(InstanceId),
    #[error("positive bag {0} contains no true-positive instances")]
    ZeroRatio(usize),
}

/// One classifiable unit: a flattened patch or feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub features: Vec<f32>,
    /// Ground truth, used only for evaluation and the supervised baseline.
    pub truth: Option<bool>,
}

/// Weak label attached to a whole bag. Discarded regions never become bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagLabel {
    Positive,
    Negative,
}

/// Outcome of labeling a tiled region by its cancerous-area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Positive,
    Negative,
    Discarded,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Positive => "positive",
            RegionLabel::Negative => "negative",
            RegionLabel::Discarded => "discarded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" => Some(RegionLabel::Positive),
            "negative" => Some(RegionLabel::Negative),
            "discarded" => Some(RegionLabel::Discarded),
            _ => None,
        }
    }
}

/// Ordered collection of instance references under one weak label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: usize,
    pub instance_ids: Vec<InstanceId>,
    pub label: BagLabel,
    /// Per-bag positive-region ratio in (0, 1]; present only in ratio-policy runs.
    pub ratio: Option<f64>,
    /// Identifier of the originating slide or group.
    pub source_id: usize,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }
}

/// Which instances inside a bag receive training labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionPolicy {
    /// Top t% of a positive bag by predicted positive probability.
    TopFixed { t_percent: f64 },
    /// Top share set by each bag's own ratio annotation.
    PerBagRatio,
    /// Single highest-probability instance per positive bag.
    MaxInstance,
    /// Every instance labeled positive; diagnostics only.
    AllInstances,
}

/// Recipe for synthesizing one group of multiple-instance bags.
#[derive(Debug, Clone)]
pub struct BagSpec {
    /// Instances per bag.
    pub size: usize,
    /// Digit class treated as the positive concept.
    pub target: u8,
    pub n_pos_bags: usize,
    pub n_neg_bags: usize,
    /// Upper bound of the per-bag positive-count draw.
    pub pos_count_max: usize,
}

impl BagSpec {
    fn validate(&self) -> Result<(), DomainError> {
        if self.size == 0 {
            return Err(DomainError::SizeZero);
        }
        if self.pos_count_max == 0 || self.pos_count_max > self.size {
            return Err(DomainError::BadPosCountMax {
                pos_count_max: self.pos_count_max,
                size: self.size,
            });
        }
        Ok(())
    }
}

/// Three-way partition of a region by its cancerous-area ratio: positive at or
/// above the threshold, negative when cancer free, discarded in between.
pub fn classify_region_label(
    cancer_ratio: f64,
    pos_threshold: f64,
) -> Result<RegionLabel, DomainError> {
    if !cancer_ratio.is_finite() || !(0.0..=1.0).contains(&cancer_ratio) {
        return Err(DomainError::RatioOutOfRange(cancer_ratio));
    }
    if !pos_threshold.is_finite() || pos_threshold <= 0.0 || pos_threshold >= 1.0 {
        return Err(DomainError::ThresholdOutOfRange(pos_threshold));
    }
    Ok(if cancer_ratio >= pos_threshold {
        RegionLabel::Positive
    } else if cancer_ratio == 0.0 {
        RegionLabel::Negative
    } else {
        RegionLabel::Discarded
    })
}

/// Draws `count` ids from a group, without replacement when the group is
/// large enough and with replacement otherwise.
fn sample_ids<R: Rng>(group: &[InstanceId], count: usize, rng: &mut R) -> Vec<InstanceId> {
    if count <= group.len() {
        rand::seq::index::sample(rng, group.len(), count)
            .iter()
            .map(|i| group[i])
            .collect()
    } else {
        (0..count)
            .map(|_| group[rng.random_range(0..group.len())])
            .collect()
    }
}

/// Assembles positive and negative bags from a binarized instance pool.
///
/// Every instance of a negative bag is drawn from the non-target group. Each
/// positive bag holds `k` target instances with `k` uniform on
/// `{1, ..., pos_count_max}` and `size - k` non-target instances. Bag order
/// and contents are a pure function of the spec and the generator state.
pub fn build_mnist_bags<R: Rng>(
    pool: &[InstanceRecord],
    spec: &BagSpec,
    rng: &mut R,
) -> Result<Vec<Bag>, DomainError> {
    spec.validate()?;
    let mut target_ids = Vec::new();
    let mut other_ids = Vec::new();
    for rec in pool {
        match rec.truth {
            Some(true) => target_ids.push(rec.id),
            Some(false) => other_ids.push(rec.id),
            None => return Err(DomainError::MissingTruth(rec.id)),
        }
    }
    if target_ids.is_empty() {
        return Err(DomainError::EmptyTargetGroup);
    }
    if other_ids.is_empty() {
        return Err(DomainError::EmptyNonTargetGroup);
    }

    let mut bags = Vec::with_capacity(spec.n_pos_bags + spec.n_neg_bags);
    for b in 0..spec.n_pos_bags {
        let k = rng.random_range(1..=spec.pos_count_max);
        let mut ids = sample_ids(&target_ids, k, rng);
        ids.extend(sample_ids(&other_ids, spec.size - k, rng));
        ids.shuffle(rng);
        bags.push(Bag {
            id: b,
            instance_ids: ids,
            label: BagLabel::Positive,
            ratio: None,
            source_id: b,
        });
    }
    for b in 0..spec.n_neg_bags {
        let id = spec.n_pos_bags + b;
        bags.push(Bag {
            id,
            instance_ids: sample_ids(&other_ids, spec.size, rng),
            label: BagLabel::Negative,
            ratio: None,
            source_id: id,
        });
    }
    Ok(bags)
}

/// Caps a bag at `cap` instances by uniform subsampling without duplicates.
/// Bags at or under the cap are returned unchanged.
pub fn subsample_bag<R: Rng>(bag: &Bag, cap: usize, rng: &mut R) -> Result<Bag, DomainError> {
    if cap == 0 {
        return Err(DomainError::CapZero);
    }
    if bag.instance_ids.len() <= cap {
        return Ok(bag.clone());
    }
    let mut positions: Vec<usize> =
        rand::seq::index::sample(rng, bag.instance_ids.len(), cap).into_vec();
    positions.sort_unstable();
    Ok(Bag {
        id: bag.id,
        instance_ids: positions.iter().map(|&p| bag.instance_ids[p]).collect(),
        label: bag.label,
        ratio: bag.ratio,
        source_id: bag.source_id,
    })
}

/// Instance-level ground truth from an annotation mask patch: positive iff
/// the patch contains at least one set pixel.
pub fn instance_truth_from_mask(
    patch: &Mask,
    want_w: usize,
    want_h: usize,
) -> Result<bool, DomainError> {
    if patch.width != want_w || patch.height != want_h {
        return Err(DomainError::MaskDimMismatch {
            got_w: patch.width,
            got_h: patch.height,
            want_w,
            want_h,
        });
    }
    Ok(patch.bits.iter().any(|&b| b))
}

/// Converts class-labeled examples into binary instances for one target class.
/// Ids are assigned sequentially from zero.
pub fn to_binary_instances(examples: &[LabeledExample], target: u8) -> Vec<InstanceRecord> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| InstanceRecord {
            id: i,
            features: ex.features.clone(),
            truth: Some(ex.label == target),
        })
        .collect()
}

/// Attaches the true positive-instance fraction to every positive bag,
/// for ratio-policy runs.
pub fn annotate_bag_ratios(bags: &mut [Bag], set: &InstanceSet) -> Result<(), DomainError> {
    for bag in bags.iter_mut() {
        if bag.label != BagLabel::Positive {
            continue;
        }
        let mut positives = 0usize;
        for &id in &bag.instance_ids {
            match set.get(id)?.truth {
                Some(true) => positives += 1,
                Some(false) => {}
                None => return Err(DomainError::MissingTruth(id)),
            }
        }
        if positives == 0 {
            return Err(DomainError::ZeroRatio(bag.id));
        }
        bag.ratio = Some(positives as f64 / bag.instance_ids.len() as f64);
    }
    Ok(())
}

/// Instance storage with id lookup and batch feature gathering.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    records: Vec<InstanceRecord>,
    by_id: HashMap<InstanceId, usize>,
    feature_len: usize,
}

impl InstanceSet {
    pub fn new(records: Vec<InstanceRecord>) -> Result<Self, DomainError> {
        let feature_len = records.first().map(|r| r.features.len()).unwrap_or(0);
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.features.len() != feature_len {
                return Err(DomainError::FeatureLenMismatch {
                    got: rec.features.len(),
                    want: feature_len,
                });
            }
            if by_id.insert(rec.id, i).is_some() {
                return Err(DomainError::DuplicateId(rec.id));
            }
        }
        Ok(Self {
            records,
            by_id,
            feature_len,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn get(&self, id: InstanceId) -> Result<&InstanceRecord, DomainError> {
        self.by_id
            .get(&id)
            .map(|&i| &self.records[i])
            .ok_or(DomainError::UnknownInstance(id))
    }

    /// Gathers the feature rows for `ids`, in order, as one dense batch.
    pub fn features_matrix(&self, ids: &[InstanceId]) -> Result<Array2<f32>, DomainError> {
        let mut out = Array2::<f32>::zeros((ids.len(), self.feature_len));
        for (row, &id) in ids.iter().enumerate() {
            let rec = self.get(id)?;
            out.row_mut(row)
                .iter_mut()
                .zip(&rec.features)
                .for_each(|(o, &f)| *o = f);
        }
        Ok(out)
    }
}
