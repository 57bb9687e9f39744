//! Concept activation vectors: unit directions in a chosen activation space
//! that point from artifact-free samples toward samples carrying an artifact.
//!
//! Two estimators are provided. The pattern direction is the difference of
//! the positive and negative activation means, which tracks how the artifact
//! actually shifts activations. The filter direction is the weight vector of
//! a linear SVM separating the two sets, which captures what distinguishes
//! the classes but mixes in whatever helps separation. [`alignment_score`]
//! quantifies the difference against ground-truth paired samples.
//!
//! Layer index 0 denotes the input space itself; any other value is the
//! model's split-layer activation space.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cosine_similarity, MathError, Vector};
use crate::svm::{fit_svm, SvmConfig, SvmError};

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("concept {0}: positive and negative sets must be non-empty")]
    EmptySet(String),
    #[error("concept {0}: positive and negative means coincide, no direction")]
    DegenerateConcept(String),
    #[error("all pairs are degenerate (zero difference)")]
    AllPairsDegenerate,
    #[error("paired set is empty")]
    EmptyPairs,
    #[error("concept definition {0}: positive and negative ids overlap")]
    OverlappingSets(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Svm(#[from] SvmError),
}

pub type ConceptResult<T> = Result<T, ConceptError>;

/// Declares an artifact concept: which samples carry it, which are clean of
/// it, and which classes it is associated with (used by the class condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDef {
    pub id: String,
    pub positive_ids: Vec<u64>,
    pub negative_ids: Vec<u64>,
    pub associated_classes: BTreeSet<usize>,
}

impl ConceptDef {
    pub fn new(
        id: String,
        positive_ids: Vec<u64>,
        negative_ids: Vec<u64>,
        associated_classes: BTreeSet<usize>,
    ) -> ConceptResult<Self> {
        if positive_ids.is_empty() || negative_ids.is_empty() {
            return Err(ConceptError::EmptySet(id));
        }
        let pos: BTreeSet<u64> = positive_ids.iter().copied().collect();
        if negative_ids.iter().any(|n| pos.contains(n)) {
            return Err(ConceptError::OverlappingSets(id));
        }
        Ok(ConceptDef { id, positive_ids, negative_ids, associated_classes })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CavMethod {
    Pattern,
    Filter,
}

/// A unit-norm concept direction plus the clean anchor it was estimated
/// against. `layer == 0` means the direction lives in input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept_id: String,
    pub layer: usize,
    pub direction: Vector,
    pub z_neg: Vector,
    pub method: CavMethod,
    /// False when the underlying SVM hit its iteration budget (pattern
    /// directions are always converged).
    pub converged: bool,
}

impl Cav {
    pub fn new(
        concept_id: String,
        layer: usize,
        direction: Vector,
        z_neg: Vector,
        method: CavMethod,
        converged: bool,
    ) -> ConceptResult<Self> {
        if direction.dim() != z_neg.dim() {
            return Err(ConceptError::Math(MathError::DimensionMismatch {
                expected: direction.dim(),
                got: z_neg.dim(),
            }));
        }
        let direction = direction.normalized().map_err(|_| {
            ConceptError::DegenerateConcept(concept_id.clone())
        })?;
        Ok(Cav { concept_id, layer, direction, z_neg, method, converged })
    }

    pub fn dim(&self) -> usize {
        self.direction.dim()
    }

    /// Checks the unit-norm and dimension invariants, e.g. after
    /// deserializing records from disk.
    pub fn validate(&self) -> ConceptResult<()> {
        if self.direction.dim() != self.z_neg.dim() {
            return Err(ConceptError::Math(MathError::DimensionMismatch {
                expected: self.direction.dim(),
                got: self.z_neg.dim(),
            }));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(ConceptError::DegenerateConcept(self.concept_id.clone()));
        }
        Ok(())
    }
}

/// Matched clean/artifact activation pairs differing only by the artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    pairs: Vec<(Vector, Vector)>,
}

impl PairedSet {
    /// Pairs are `(clean, with_artifact)` in a common activation space.
    pub fn new(pairs: Vec<(Vector, Vector)>) -> ConceptResult<Self> {
        let first = match pairs.first() {
            None => return Err(ConceptError::EmptyPairs),
            Some((clean, _)) => clean.dim(),
        };
        for (clean, poisoned) in &pairs {
            if clean.dim() != first || poisoned.dim() != first {
                return Err(ConceptError::Math(MathError::DimensionMismatch {
                    expected: first,
                    got: if clean.dim() != first { clean.dim() } else { poisoned.dim() },
                }));
            }
        }
        Ok(PairedSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Vector, Vector)] {
        &self.pairs
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.dim()
    }

    /// Clean halves of the pairs.
    pub fn clean(&self) -> Vec<Vector> {
        self.pairs.iter().map(|(c, _)| c.clone()).collect()
    }

    /// Artifact halves of the pairs.
    pub fn poisoned(&self) -> Vec<Vector> {
        self.pairs.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Pattern direction: normalized difference of the activation means,
/// anchored at the negative mean.
pub fn pattern_cav(
    concept_id: &str,
    layer: usize,
    positives: &[Vector],
    negatives: &[Vector],
) -> ConceptResult<Cav> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(ConceptError::EmptySet(concept_id.to_string()));
    }
    let mean_pos = Vector::mean(positives)?;
    let mean_neg = Vector::mean(negatives)?;
    let diff = mean_pos.sub(&mean_neg)?;
    if diff.norm() < 1e-12 {
        return Err(ConceptError::DegenerateConcept(concept_id.to_string()));
    }
    Cav::new(
        concept_id.to_string(),
        layer,
        diff,
        mean_neg,
        CavMethod::Pattern,
        true,
    )
}

/// Filter direction: normalized weight vector of a class-weighted linear SVM.
/// The SVM labels positives `+1`, so the direction points toward them.
pub fn filter_cav(
    concept_id: &str,
    layer: usize,
    positives: &[Vector],
    negatives: &[Vector],
    config: &SvmConfig,
) -> ConceptResult<Cav> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(ConceptError::EmptySet(concept_id.to_string()));
    }
    let samples: Vec<Vector> = positives.iter().chain(negatives).cloned().collect();
    let labels: Vec<bool> =
        positives.iter().map(|_| true).chain(negatives.iter().map(|_| false)).collect();
    let fit = fit_svm(&samples, &labels, config)?;
    let mean_neg = Vector::mean(negatives)?;
    Cav::new(
        concept_id.to_string(),
        layer,
        fit.weight,
        mean_neg,
        CavMethod::Filter,
        fit.converged,
    )
}

/// Mean signed cosine between the CAV and each pair's activation difference.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentScore {
    pub value: f64,
    /// Pairs whose difference was exactly zero and therefore skipped.
    pub skipped_pairs: usize,
}

/// How well `cav.direction` matches the per-pair activation shifts:
/// `mean_i cos(v, poisoned_i - clean_i)` over non-degenerate pairs.
pub fn alignment_score(cav: &Cav, pairs: &PairedSet) -> ConceptResult<AlignmentScore> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (clean, poisoned) in pairs.pairs() {
        let diff = poisoned.sub(clean)?;
        if diff.norm() == 0.0 {
            skipped += 1;
            continue;
        }
        sum += cosine_similarity(&cav.direction, &diff)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(ConceptError::AllPairsDegenerate);
    }
    Ok(AlignmentScore { value: sum / counted as f64, skipped_pairs: skipped })
}

/// Signed coordinate of `a` along the concept direction, measured from the
/// clean anchor: `<v, a - z_neg>`.
pub fn cav_activation(cav: &Cav, a: &Vector) -> ConceptResult<f64> {
    Ok(cav.direction.dot(&a.sub(&cav.z_neg)?)?)
}

/// Cosines between each CAV and each class direction, where the class
/// direction is that class's mean clean activation minus the global clean
/// mean. `None` marks classes whose direction is degenerate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCosineTable {
    pub concept_ids: Vec<String>,
    /// `values[i][d]` pairs concept `i` with class `d`.
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn class_direction_cosines(
    cavs: &[Cav],
    per_class_clean_means: &[Vector],
    global_clean_mean: &Vector,
) -> ConceptResult<ClassCosineTable> {
    let mut values = Vec::with_capacity(cavs.len());
    for cav in cavs {
        let mut row = Vec::with_capacity(per_class_clean_means.len());
        for class_mean in per_class_clean_means {
            let direction = class_mean.sub(global_clean_mean)?;
            if direction.norm() == 0.0 {
                row.push(None);
            } else {
                row.push(Some(cosine_similarity(&cav.direction, &direction)?));
            }
        }
        values.push(row);
    }
    Ok(ClassCosineTable {
        concept_ids: cavs.iter().map(|c| c.concept_id.clone()).collect(),
        values,
    })
}
