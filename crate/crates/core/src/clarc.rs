//! Conditional suppression of artifact directions at a model's split layer.
//!
//! The non-reactive correction replaces the component of an activation `a`
//! along a bank of concept directions `V` with that of a clean anchor `z`:
//! `p = a - V (V^T V)^{-1} V^T (a - z)`, the closed form of minimally moving
//! `a` onto the affine subspace `{p : V^T (p - z) = 0}`. The reactive variant
//! computes a per-sample subset of concepts from a condition (predicted
//! class, artifact probes, or both) and applies the correction only to that
//! subset; when the subset is empty the sample passes through bit-unchanged.
//!
//! A bank whose `layer` is 0 lives in input space: corrections are applied
//! to `x` itself before the full forward pass. Any other layer must equal
//! the model's split layer, and corrections apply between feature extractor
//! and head.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{Cav, ConceptError};
use crate::linalg::{project_onto_span, MathError, Matrix, Vector};
use crate::nn::{argmax, MlpModel, NnError};
use crate::rng::SplitMix64;
use crate::svm::{fit_svm, SvmConfig, SvmError};

#[derive(Debug, Error)]
pub enum ClarcError {
    #[error("bank must contain at least one direction")]
    EmptyBank,
    #[error("bank limited to 64 directions, got {0}")]
    BankTooLarge(usize),
    #[error("duplicate concept id {0}")]
    DuplicateConcept(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(String),
    #[error("bank mixes layers or dimensions (concept {0})")]
    InconsistentBank(String),
    #[error("negative sets do not line up with bank directions (concept {0})")]
    MisalignedNegatives(String),
    #[error("negative sets of {} have an empty intersection", concept_ids.join(", "))]
    EmptyIntersection { concept_ids: Vec<String> },
    #[error("condition config is missing an entry for bank concept {0}")]
    MissingConditionEntry(String),
    #[error("bank layer {bank} does not match the model split layer {model_split}")]
    WrongLayer { bank: usize, model_split: usize },
    #[error("correction mode needs a bank but none was given")]
    MissingBank,
    #[error("subset index {index} out of range for bank of {len}")]
    InvalidSubset { index: usize, len: usize },
    #[error("probe training: {0}")]
    ProbeData(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("file {path}: {detail}")]
    BadFile { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type ClarcResult<T> = Result<T, ClarcError>;

/// Activations of the samples that do NOT carry a given concept, kept with
/// their sample ids so intersections across concepts are well-defined.
#[derive(Debug, Clone)]
pub struct NegativeSet {
    pub concept_id: String,
    pub ids: Vec<u64>,
    pub activations: Vec<Vector>,
}

impl NegativeSet {
    pub fn new(concept_id: String, ids: Vec<u64>, activations: Vec<Vector>) -> ClarcResult<Self> {
        if ids.len() != activations.len() || ids.is_empty() {
            return Err(ClarcError::MisalignedNegatives(concept_id));
        }
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(ClarcError::MisalignedNegatives(concept_id));
        }
        Ok(NegativeSet { concept_id, ids, activations })
    }
}

/// Mean activation over the samples present in every given negative set.
/// The mean is accumulated in ascending id order, so it is deterministic
/// regardless of input ordering.
pub fn mean_of_intersection(sets: &[&NegativeSet]) -> ClarcResult<Vector> {
    let first = sets.first().ok_or(ClarcError::EmptyBank)?;
    let mut shared: BTreeSet<u64> = first.ids.iter().copied().collect();
    for set in &sets[1..] {
        let ids: BTreeSet<u64> = set.ids.iter().copied().collect();
        shared = shared.intersection(&ids).copied().collect();
    }
    if shared.is_empty() {
        return Err(ClarcError::EmptyIntersection {
            concept_ids: sets.iter().map(|s| s.concept_id.clone()).collect(),
        });
    }
    let index: HashMap<u64, usize> =
        first.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let picked: Vec<Vector> =
        shared.iter().map(|id| first.activations[index[id]].clone()).collect();
    Ok(Vector::mean(&picked)?)
}

/// Single-direction suppression: `a - v <v, a - z>`.
pub fn pclarc_apply(a: &Vector, cav: &Cav) -> ClarcResult<Vector> {
    if a.dim() != cav.dim() {
        return Err(ClarcError::Math(MathError::DimensionMismatch {
            expected: cav.dim(),
            got: a.dim(),
        }));
    }
    let coeff = cav.direction.dot(&a.sub(&cav.z_neg)?)?;
    Ok(a.sub(&cav.direction.scale(coeff))?)
}

/// A set of concept directions sharing one activation space, with the
/// negative sets needed to anchor joint corrections.
pub struct CavBank {
    cavs: Vec<Cav>,
    negatives: Vec<NegativeSet>,
    layer: usize,
    dim: usize,
    /// Basis matrix and joint anchor per concept subset, keyed by bitmask.
    subset_cache: Mutex<HashMap<u64, Arc<(Matrix, Vector)>>>,
}

impl std::fmt::Debug for CavBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CavBank")
            .field("layer", &self.layer)
            .field("dim", &self.dim)
            .field("concepts", &self.concept_ids())
            .finish()
    }
}

impl CavBank {
    /// `negatives[i]` must describe the same concept as `cavs[i]`.
    pub fn new(cavs: Vec<Cav>, negatives: Vec<NegativeSet>) -> ClarcResult<Self> {
        if cavs.is_empty() {
            return Err(ClarcError::EmptyBank);
        }
        if cavs.len() > 64 {
            return Err(ClarcError::BankTooLarge(cavs.len()));
        }
        let layer = cavs[0].layer;
        let dim = cavs[0].dim();
        let mut seen = BTreeSet::new();
        for cav in &cavs {
            cav.validate()?;
            if cav.layer != layer || cav.dim() != dim || cav.z_neg.dim() != dim {
                return Err(ClarcError::InconsistentBank(cav.concept_id.clone()));
            }
            if !seen.insert(cav.concept_id.clone()) {
                return Err(ClarcError::DuplicateConcept(cav.concept_id.clone()));
            }
        }
        if negatives.len() != cavs.len() {
            return Err(ClarcError::MisalignedNegatives(format!(
                "{} sets for {} directions",
                negatives.len(),
                cavs.len()
            )));
        }
        for (cav, set) in cavs.iter().zip(&negatives) {
            if set.concept_id != cav.concept_id {
                return Err(ClarcError::MisalignedNegatives(set.concept_id.clone()));
            }
            if set.activations.iter().any(|a| a.dim() != dim) {
                return Err(ClarcError::MisalignedNegatives(set.concept_id.clone()));
            }
        }
        Ok(CavBank { cavs, negatives, layer, dim, subset_cache: Mutex::new(HashMap::new()) })
    }

    pub fn len(&self) -> usize {
        self.cavs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cavs.is_empty()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cavs(&self) -> &[Cav] {
        &self.cavs
    }

    pub fn negatives(&self) -> &[NegativeSet] {
        &self.negatives
    }

    pub fn concept_ids(&self) -> Vec<String> {
        self.cavs.iter().map(|c| c.concept_id.clone()).collect()
    }

    pub fn index_of(&self, concept_id: &str) -> ClarcResult<usize> {
        self.cavs
            .iter()
            .position(|c| c.concept_id == concept_id)
            .ok_or_else(|| ClarcError::UnknownConcept(concept_id.to_string()))
    }

    /// Joint clean anchor for a subset: the single CAV's anchor for a
    /// singleton, otherwise the mean activation over the intersection of the
    /// subset's negative sets.
    pub fn joint_z_neg(&self, subset: &[usize]) -> ClarcResult<Vector> {
        self.check_subset(subset)?;
        if subset.len() == 1 {
            return Ok(self.cavs[subset[0]].z_neg.clone());
        }
        let sets: Vec<&NegativeSet> = subset.iter().map(|&i| &self.negatives[i]).collect();
        mean_of_intersection(&sets)
    }

    fn check_subset(&self, subset: &[usize]) -> ClarcResult<()> {
        for window in subset.windows(2) {
            if window[0] >= window[1] {
                return Err(ClarcError::InvalidSubset { index: window[1], len: self.len() });
            }
        }
        if let Some(&index) = subset.iter().find(|&&i| i >= self.len()) {
            return Err(ClarcError::InvalidSubset { index, len: self.len() });
        }
        Ok(())
    }

    fn subset_mask(subset: &[usize]) -> u64 {
        subset.iter().fold(0u64, |mask, &i| mask | (1u64 << i))
    }

    /// Basis matrix and joint anchor for a non-empty subset, cached.
    fn subset_operator(&self, subset: &[usize]) -> ClarcResult<Arc<(Matrix, Vector)>> {
        let mask = Self::subset_mask(subset);
        if let Some(hit) = self.subset_cache.lock().expect("cache lock").get(&mask) {
            return Ok(hit.clone());
        }
        let columns: Vec<Vector> =
            subset.iter().map(|&i| self.cavs[i].direction.clone()).collect();
        let basis = Matrix::from_columns(&columns)?;
        let z_neg = self.joint_z_neg(subset)?;
        let op = Arc::new((basis, z_neg));
        self.subset_cache.lock().expect("cache lock").insert(mask, op.clone());
        Ok(op)
    }
}

/// Result of a (possibly multi-direction) correction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedActivation {
    pub activation: Vector,
    /// True when the Gram solve needed ridge regularization (collinear bank).
    pub regularized: bool,
}

/// Joint suppression of a subset of the bank's directions:
/// `a - V (V^T V)^{-1} V^T (a - z)`. `subset` holds strictly increasing bank
/// indices; an empty subset returns `a` unchanged.
pub fn multi_pclarc_apply(
    a: &Vector,
    bank: &CavBank,
    subset: &[usize],
) -> ClarcResult<CorrectedActivation> {
    if subset.is_empty() {
        return Ok(CorrectedActivation { activation: a.clone(), regularized: false });
    }
    bank.check_subset(subset)?;
    if a.dim() != bank.dim() {
        return Err(ClarcError::Math(MathError::DimensionMismatch {
            expected: bank.dim(),
            got: a.dim(),
        }));
    }
    let op = bank.subset_operator(subset)?;
    let (basis, z_neg) = op.as_ref();
    let diff = a.sub(z_neg)?;
    let projected = project_onto_span(basis, &diff)?;
    Ok(CorrectedActivation {
        activation: a.sub(&projected.projection)?,
        regularized: projected.regularized,
    })
}

/// Linear artifact detector `<w, a> + b > 0` in the bank's activation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub concept_id: String,
    pub weight: Vector,
    pub bias: f64,
    pub holdout_accuracy: f64,
    pub seed: u64,
    pub converged: bool,
}

impl LinearProbe {
    pub fn score(&self, a: &Vector) -> ClarcResult<f64> {
        Ok(self.weight.dot(a)? + self.bias)
    }

    /// Fires strictly above 0; a score of exactly 0 does not fire.
    pub fn detects(&self, a: &Vector) -> ClarcResult<bool> {
        Ok(self.score(a)? > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub svm: SvmConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { svm: SvmConfig::default(), seed: 0 }
    }
}

const PROBE_NEGATIVE_CAP_RATIO: usize = 5;
const PROBE_HOLDOUT_FRACTION: f64 = 0.2;

/// Trains a linear artifact probe on activations with and without the
/// artifact. Negatives are capped at 5x the positives by seeded subsampling,
/// then a seeded 80/20 split provides a holdout set for the reported
/// accuracy. Deterministic given the config seed.
pub fn train_artifact_probe(
    concept_id: &str,
    positives: &[Vector],
    negatives: &[Vector],
    config: &ProbeConfig,
) -> ClarcResult<LinearProbe> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(ClarcError::ProbeData(format!(
            "concept {concept_id}: need positives and negatives"
        )));
    }
    let mut rng = SplitMix64::new(config.seed);

    let cap = positives.len().saturating_mul(PROBE_NEGATIVE_CAP_RATIO);
    let negative_pool: Vec<&Vector> = if negatives.len() > cap {
        rng.choose_distinct(negatives.len(), cap).into_iter().map(|i| &negatives[i]).collect()
    } else {
        negatives.iter().collect()
    };

    let mut samples: Vec<Vector> = Vec::with_capacity(positives.len() + negative_pool.len());
    let mut labels: Vec<bool> = Vec::with_capacity(positives.len() + negative_pool.len());
    samples.extend(positives.iter().cloned());
    labels.extend(std::iter::repeat(true).take(positives.len()));
    samples.extend(negative_pool.iter().map(|v| (*v).clone()));
    labels.extend(std::iter::repeat(false).take(negative_pool.len()));

    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let holdout_count = ((n as f64 * PROBE_HOLDOUT_FRACTION).round() as usize).clamp(1, n - 1);
    let (holdout_idx, train_idx) = order.split_at(holdout_count);

    let train_samples: Vec<Vector> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    let fit = fit_svm(&train_samples, &train_labels, &config.svm)?;

    let mut correct = 0usize;
    for &i in holdout_idx {
        let fired = fit.weight.dot(&samples[i])? + fit.bias > 0.0;
        if fired == labels[i] {
            correct += 1;
        }
    }
    Ok(LinearProbe {
        concept_id: concept_id.to_string(),
        weight: fit.weight,
        bias: fit.bias,
        holdout_accuracy: correct as f64 / holdout_count as f64,
        seed: config.seed,
        converged: fit.converged,
    })
}

/// Concepts whose associated-class set contains the predicted label.
pub fn class_condition(
    predicted_label: usize,
    class_map: &BTreeMap<String, BTreeSet<usize>>,
) -> BTreeSet<String> {
    class_map
        .iter()
        .filter(|(_, classes)| classes.contains(&predicted_label))
        .map(|(id, _)| id.clone())
        .collect()
}

/// Concepts whose probe fires on the activation (score strictly above 0).
pub fn artifact_condition(
    a: &Vector,
    probes: &BTreeMap<String, LinearProbe>,
) -> ClarcResult<BTreeSet<String>> {
    let mut fired = BTreeSet::new();
    for (id, probe) in probes {
        if probe.detects(a)? {
            fired.insert(id.clone());
        }
    }
    Ok(fired)
}

/// Intersection of the class and artifact conditions.
pub fn combined_condition(
    a: &Vector,
    predicted_label: usize,
    class_map: &BTreeMap<String, BTreeSet<usize>>,
    probes: &BTreeMap<String, LinearProbe>,
) -> ClarcResult<BTreeSet<String>> {
    let by_class = class_condition(predicted_label, class_map);
    let by_probe = artifact_condition(a, probes)?;
    Ok(by_class.intersection(&by_probe).cloned().collect())
}

/// Per-sample subset selector for reactive correction.
#[derive(Debug, Clone)]
pub enum Condition {
    /// Every bank concept, every sample (non-reactive behavior).
    Always,
    /// Concepts associated with the predicted class.
    Class { class_map: BTreeMap<String, BTreeSet<usize>> },
    /// Concepts whose linear probe fires on the activation.
    Artifact { probes: BTreeMap<String, LinearProbe> },
    /// Intersection of the class and artifact conditions.
    Both { class_map: BTreeMap<String, BTreeSet<usize>>, probes: BTreeMap<String, LinearProbe> },
}

impl Condition {
    /// Every bank concept must have an entry in the maps the condition uses.
    pub fn validate_coverage(&self, bank: &CavBank) -> ClarcResult<()> {
        let check = |keys: Vec<&String>| -> ClarcResult<()> {
            for id in bank.concept_ids() {
                if !keys.iter().any(|k| **k == id) {
                    return Err(ClarcError::MissingConditionEntry(id));
                }
            }
            Ok(())
        };
        match self {
            Condition::Always => Ok(()),
            Condition::Class { class_map } => check(class_map.keys().collect()),
            Condition::Artifact { probes } => check(probes.keys().collect()),
            Condition::Both { class_map, probes } => {
                check(class_map.keys().collect())?;
                check(probes.keys().collect())
            }
        }
    }

    /// Bank indices (ascending) selected for one sample. `a` is the
    /// activation in the bank's space; `predicted_label` comes from the
    /// uncorrected forward pass.
    pub fn select(
        &self,
        bank: &CavBank,
        a: &Vector,
        predicted_label: usize,
    ) -> ClarcResult<Vec<usize>> {
        self.validate_coverage(bank)?;
        let chosen: BTreeSet<String> = match self {
            Condition::Always => bank.concept_ids().into_iter().collect(),
            Condition::Class { class_map } => class_condition(predicted_label, class_map),
            Condition::Artifact { probes } => artifact_condition(a, probes)?,
            Condition::Both { class_map, probes } => {
                combined_condition(a, predicted_label, class_map, probes)?
            }
        };
        Ok((0..bank.len())
            .filter(|&i| chosen.contains(&bank.cavs()[i].concept_id))
            .collect())
    }
}

/// How inference should treat the bank.
#[derive(Debug, Clone)]
pub enum CorrectionMode {
    /// No correction at all.
    Vanilla,
    /// Unconditional suppression of every bank direction.
    PClArC,
    /// Conditional suppression of the subset the condition selects.
    RClArC(Condition),
}

/// Everything needed to apply (or skip) a correction for one sample.
#[derive(Debug, Clone)]
pub struct CorrectionPlan {
    /// Activation in the bank's space (the input itself for layer-0 banks).
    pub features: Vector,
    /// Logits of the uncorrected forward pass.
    pub vanilla_logits: Vector,
    /// Bank indices to suppress; empty means pass through unchanged.
    pub subset: Vec<usize>,
}

/// Computes the uncorrected activations and the subset the mode would
/// suppress, without applying anything yet.
pub fn plan_correction(
    model: &MlpModel,
    x: &Vector,
    mode: &CorrectionMode,
    bank: Option<&CavBank>,
) -> ClarcResult<CorrectionPlan> {
    match mode {
        CorrectionMode::Vanilla => {
            let features = model.forward_features(x)?;
            let vanilla_logits = model.forward_head(&features)?;
            Ok(CorrectionPlan { features, vanilla_logits, subset: Vec::new() })
        }
        CorrectionMode::PClArC | CorrectionMode::RClArC(_) => {
            let bank = bank.ok_or(ClarcError::MissingBank)?;
            let input_space = bank.layer() == 0;
            if !input_space && bank.layer() != model.split_layer() {
                return Err(ClarcError::WrongLayer {
                    bank: bank.layer(),
                    model_split: model.split_layer(),
                });
            }
            let features = if input_space { x.clone() } else { model.forward_features(x)? };
            let vanilla_logits = if input_space {
                model.forward(x)?
            } else {
                model.forward_head(&features)?
            };
            let subset = match mode {
                CorrectionMode::PClArC => (0..bank.len()).collect(),
                CorrectionMode::RClArC(condition) => {
                    condition.select(bank, &features, argmax(&vanilla_logits))?
                }
                CorrectionMode::Vanilla => unreachable!(),
            };
            Ok(CorrectionPlan { features, vanilla_logits, subset })
        }
    }
}

/// Logits after conditional correction, plus what was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedForward {
    pub logits: Vector,
    /// Concept ids actually suppressed, in bank order; empty for pass-through.
    pub applied: Vec<String>,
    pub regularized: bool,
}

/// Runs the model with the given correction mode. When the selected subset
/// is empty (including Vanilla mode), the returned logits are bit-identical
/// to `model.forward(x)`: the uncorrected logits are computed once and
/// reused, never recomputed along a different path.
pub fn corrected_forward(
    model: &MlpModel,
    x: &Vector,
    mode: &CorrectionMode,
    bank: Option<&CavBank>,
) -> ClarcResult<CorrectedForward> {
    let plan = plan_correction(model, x, mode, bank)?;
    if plan.subset.is_empty() {
        return Ok(CorrectedForward {
            logits: plan.vanilla_logits,
            applied: Vec::new(),
            regularized: false,
        });
    }
    let bank = bank.ok_or(ClarcError::MissingBank)?;
    let corrected = multi_pclarc_apply(&plan.features, bank, &plan.subset)?;
    let logits = if bank.layer() == 0 {
        model.forward(&corrected.activation)?
    } else {
        model.forward_head(&corrected.activation)?
    };
    Ok(CorrectedForward {
        logits,
        applied: plan.subset.iter().map(|&i| bank.cavs()[i].concept_id.clone()).collect(),
        regularized: corrected.regularized,
    })
}

// --- File formats -----------------------------------------------------------

/// One bank entry as stored on disk. `negative_ids` records which dataset
/// samples served as negatives, so the joint anchors can be reassembled
/// against the dataset without storing activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavRecord {
    pub concept_id: String,
    pub layer: usize,
    pub direction: Vector,
    pub z_neg: Vector,
    pub method: crate::concepts::CavMethod,
    pub converged: bool,
    pub n_positives: usize,
    pub negative_ids: Vec<u64>,
    pub seed: u64,
}

impl CavRecord {
    pub fn to_cav(&self) -> ClarcResult<Cav> {
        let cav = Cav {
            concept_id: self.concept_id.clone(),
            layer: self.layer,
            direction: self.direction.clone(),
            z_neg: self.z_neg.clone(),
            method: self.method,
            converged: self.converged,
        };
        cav.validate()?;
        Ok(cav)
    }
}

/// Writes a bank as a JSON array of records. Round-trips bit-exactly.
pub fn save_bank(path: &Path, records: &[CavRecord]) -> ClarcResult<()> {
    let json = serde_json::to_string_pretty(records).expect("bank serializes");
    crate::nn::write_text(path, &json).map_err(ClarcError::Nn)
}

pub fn load_bank(path: &Path) -> ClarcResult<Vec<CavRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ClarcError::Io { path: path.display().to_string(), source })?;
    let records: Vec<CavRecord> = serde_json::from_str(&text).map_err(|e| ClarcError::BadFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    for record in &records {
        record.to_cav()?;
    }
    Ok(records)
}

pub fn save_probe(path: &Path, probe: &LinearProbe) -> ClarcResult<()> {
    let json = serde_json::to_string_pretty(probe).expect("probe serializes");
    crate::nn::write_text(path, &json).map_err(ClarcError::Nn)
}

pub fn load_probe(path: &Path) -> ClarcResult<LinearProbe> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ClarcError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| ClarcError::BadFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::CavMethod;

    fn unit_cav(id: &str, direction: &[f64], z_neg: &[f64]) -> Cav {
        Cav::new(
            id.to_string(),
            1,
            Vector::from_slice(direction).unwrap(),
            Vector::from_slice(z_neg).unwrap(),
            CavMethod::Pattern,
            true,
        )
        .unwrap()
    }

    fn negatives_from(id: &str, ids: &[u64], rows: &[&[f64]]) -> NegativeSet {
        NegativeSet::new(
            id.to_string(),
            ids.to_vec(),
            rows.iter().map(|r| Vector::from_slice(r).unwrap()).collect(),
        )
        .unwrap()
    }

    fn two_direction_bank() -> CavBank {
        let cavs = vec![
            unit_cav("a0", &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]),
            unit_cav("a1", &[1.0, 1.0, 0.0], &[0.0, 0.0, 0.0]),
        ];
        let negatives = vec![
            negatives_from("a0", &[0, 1, 2], &[&[0.0; 3], &[0.0; 3], &[1.0, 2.0, 3.0]]),
            negatives_from("a1", &[1, 2, 3], &[&[0.0; 3], &[1.0, 2.0, 3.0], &[5.0; 3]]),
        ];
        CavBank::new(cavs, negatives).unwrap()
    }

    #[test]
    fn single_direction_suppression_removes_component() {
        let cav = unit_cav("a", &[0.0, 1.0], &[1.0, 2.0]);
        let a = Vector::from_slice(&[3.0, 7.0]).unwrap();
        let p = pclarc_apply(&a, &cav).unwrap();
        // Component along e_y collapses to the anchor's, e_x untouched.
        assert_eq!(p.as_slice(), &[3.0, 2.0]);
        // Anchor itself is a fixed point, exactly.
        assert_eq!(pclarc_apply(&cav.z_neg, &cav).unwrap(), cav.z_neg);
        // Idempotent.
        assert_eq!(pclarc_apply(&p, &cav).unwrap(), p);
    }

    #[test]
    fn intersection_mean_uses_shared_ids_only() {
        let bank = two_direction_bank();
        // Shared ids of the two sets are {1, 2} with activations
        // (0,0,0) and (1,2,3) in the first set.
        let z = bank.joint_z_neg(&[0, 1]).unwrap();
        assert_eq!(z.as_slice(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn empty_intersection_reports_concepts() {
        let cavs = vec![
            unit_cav("a0", &[1.0, 0.0], &[0.0, 0.0]),
            unit_cav("a1", &[0.0, 1.0], &[0.0, 0.0]),
        ];
        let negatives = vec![
            negatives_from("a0", &[0], &[&[0.0, 0.0]]),
            negatives_from("a1", &[1], &[&[0.0, 0.0]]),
        ];
        let bank = CavBank::new(cavs, negatives).unwrap();
        match bank.joint_z_neg(&[0, 1]) {
            Err(ClarcError::EmptyIntersection { concept_ids }) => {
                assert_eq!(concept_ids, vec!["a0".to_string(), "a1".to_string()]);
            }
            other => panic!("expected EmptyIntersection, got {other:?}"),
        }
    }

    #[test]
    fn multi_apply_satisfies_constraint_and_idempotence() {
        let bank = two_direction_bank();
        let a = Vector::from_slice(&[2.0, -3.0, 5.0]).unwrap();
        let res = multi_pclarc_apply(&a, &bank, &[0, 1]).unwrap();
        let z = bank.joint_z_neg(&[0, 1]).unwrap();
        let shifted = res.activation.sub(&z).unwrap();
        for i in [0usize, 1usize] {
            let dot = bank.cavs()[i].direction.dot(&shifted).unwrap();
            assert!(dot.abs() <= 1e-9 * a.norm().max(1.0), "constraint violated: {dot:e}");
        }
        let again = multi_pclarc_apply(&res.activation, &bank, &[0, 1]).unwrap();
        let drift = again.activation.sub(&res.activation).unwrap().norm();
        assert!(drift <= 1e-9 * a.norm().max(1.0));
    }

    #[test]
    fn multi_apply_with_empty_subset_is_identity() {
        let bank = two_direction_bank();
        let a = Vector::from_slice(&[2.0, -3.0, 5.0]).unwrap();
        let res = multi_pclarc_apply(&a, &bank, &[]).unwrap();
        assert_eq!(res.activation, a);
        assert!(!res.regularized);
    }

    #[test]
    fn singleton_multi_apply_matches_single_formula() {
        let bank = two_direction_bank();
        let a = Vector::from_slice(&[0.3, 1.7, -2.2]).unwrap();
        let via_multi = multi_pclarc_apply(&a, &bank, &[1]).unwrap();
        let via_single = pclarc_apply(&a, &bank.cavs()[1]).unwrap();
        let gap = via_multi.activation.sub(&via_single).unwrap().norm();
        assert!(gap <= 1e-12, "k=1 joint form deviates by {gap:e}");
    }

    #[test]
    fn subset_validation_rejects_disorder_and_range() {
        let bank = two_direction_bank();
        let a = Vector::from_slice(&[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            multi_pclarc_apply(&a, &bank, &[1, 0]),
            Err(ClarcError::InvalidSubset { .. })
        ));
        assert!(matches!(
            multi_pclarc_apply(&a, &bank, &[0, 5]),
            Err(ClarcError::InvalidSubset { index: 5, .. })
        ));
    }

    #[test]
    fn conditions_select_expected_subsets() {
        let mut class_map = BTreeMap::new();
        class_map.insert("a0".to_string(), BTreeSet::from([0usize]));
        class_map.insert("a1".to_string(), BTreeSet::from([0usize, 1]));
        assert_eq!(
            class_condition(0, &class_map),
            BTreeSet::from(["a0".to_string(), "a1".to_string()])
        );
        assert_eq!(class_condition(1, &class_map), BTreeSet::from(["a1".to_string()]));
        assert_eq!(class_condition(7, &class_map), BTreeSet::new());

        let mut probes = BTreeMap::new();
        probes.insert(
            "a0".to_string(),
            LinearProbe {
                concept_id: "a0".into(),
                weight: Vector::from_slice(&[1.0, 0.0]).unwrap(),
                bias: -1.0,
                holdout_accuracy: 1.0,
                seed: 0,
                converged: true,
            },
        );
        let hot = Vector::from_slice(&[2.0, 0.0]).unwrap();
        let cold = Vector::from_slice(&[0.5, 0.0]).unwrap();
        let boundary = Vector::from_slice(&[1.0, 0.0]).unwrap();
        assert_eq!(artifact_condition(&hot, &probes).unwrap().len(), 1);
        assert_eq!(artifact_condition(&cold, &probes).unwrap().len(), 0);
        // Score exactly 0 must not fire.
        assert_eq!(artifact_condition(&boundary, &probes).unwrap().len(), 0);

        let combined = combined_condition(&hot, 0, &class_map, &probes).unwrap();
        assert_eq!(combined, BTreeSet::from(["a0".to_string()]));
        let vetoed = combined_condition(&cold, 0, &class_map, &probes).unwrap();
        assert!(vetoed.is_empty());
    }

    #[test]
    fn condition_coverage_is_enforced() {
        let bank = two_direction_bank();
        let mut class_map = BTreeMap::new();
        class_map.insert("a0".to_string(), BTreeSet::from([0usize]));
        let condition = Condition::Class { class_map };
        let a = Vector::from_slice(&[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            condition.select(&bank, &a, 0),
            Err(ClarcError::MissingConditionEntry(id)) if id == "a1"
        ));
    }

    #[test]
    fn probe_training_caps_negatives_and_holds_out() {
        let positives: Vec<Vector> =
            (0..20).map(|i| Vector::from_slice(&[3.0 + 0.01 * i as f64, 0.0]).unwrap()).collect();
        let negatives: Vec<Vector> = (0..500)
            .map(|i| Vector::from_slice(&[-3.0 - 0.001 * i as f64, 0.0]).unwrap())
            .collect();
        let probe =
            train_artifact_probe("a", &positives, &negatives, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.concept_id, "a");
        assert!(probe.holdout_accuracy >= 0.95, "holdout {}", probe.holdout_accuracy);
        assert!(probe.detects(&Vector::from_slice(&[3.0, 0.0]).unwrap()).unwrap());
        assert!(!probe.detects(&Vector::from_slice(&[-3.0, 0.0]).unwrap()).unwrap());
    }

    #[test]
    fn bank_records_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let records = vec![CavRecord {
            concept_id: "a0".into(),
            layer: 1,
            direction: Vector::from_slice(&[1.0 / 3.0f64.sqrt(); 3]).unwrap(),
            z_neg: Vector::from_slice(&[0.1 + 0.2, -1e-300, 2.0f64.powi(-52)]).unwrap(),
            method: CavMethod::Pattern,
            converged: true,
            n_positives: 17,
            negative_ids: vec![3, 1, 4],
            seed: 99,
        }];
        save_bank(&path, &records).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(records, back);
        // Byte-identical on re-save.
        let first = std::fs::read(&path).unwrap();
        save_bank(&path, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn bank_rejects_inconsistent_directions() {
        let cavs = vec![
            unit_cav("a0", &[1.0, 0.0, 0.0], &[0.0; 3]),
            Cav::new(
                "a1".into(),
                2, // different layer
                Vector::from_slice(&[0.0, 1.0, 0.0]).unwrap(),
                Vector::zeros(3),
                CavMethod::Pattern,
                true,
            )
            .unwrap(),
        ];
        let negatives = vec![
            negatives_from("a0", &[0], &[&[0.0; 3]]),
            negatives_from("a1", &[0], &[&[0.0; 3]]),
        ];
        assert!(matches!(
            CavBank::new(cavs, negatives),
            Err(ClarcError::InconsistentBank(_))
        ));
    }
}
