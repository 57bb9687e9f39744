//! Input attributions for (optionally corrected) forward passes, used to
//! check whether a correction actually removed the model's reliance on
//! artifact coordinates rather than just flipping outputs.
//!
//! Layer-wise relevance propagation (epsilon rule) runs over the same graph
//! the corrected forward pass uses: the suppression step appears as an
//! explicit affine layer `p = (I - P) a + P z`, where `P` is the projector
//! onto the bank subspace. Relevance flowing through a unit `j` of any
//! affine step is redistributed as `u_i A_ji / (z_j + eps_j sign(z_j))`,
//! with the stabilizer scaled per layer to `epsilon * mean|z|`.
//!
//! Gradient-times-input differentiates the same graph instead; on locally
//! linear, bias-free regions the two coincide as epsilon goes to zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clarc::{plan_correction, CavBank, ClarcError, CorrectionMode};
use crate::linalg::{span_projector_matrix, MathError, Matrix, Vector};
use crate::nn::{MlpModel, NnError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("total relevance is zero; shares are undefined")]
    ZeroRelevance,
    #[error("mask index {index} out of range for {dim} coordinates")]
    MaskOutOfRange { index: usize, dim: usize },
    #[error("mask must contain at least one coordinate")]
    EmptyMask,
    #[error("stabilizer epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("target label {label} out of range for {n_classes} classes")]
    BadTarget { label: usize, n_classes: usize },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Clarc(#[from] ClarcError),
}

pub type AttributionResult<T> = Result<T, AttributionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    LrpEpsilon,
    GradientXInput,
}

/// Per-input-coordinate relevance for one sample and target logit.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub values: Vector,
    pub target_label: usize,
    pub method: AttributionMethod,
}

impl RelevanceMap {
    /// Values divided by the maximum absolute relevance (unchanged if that
    /// maximum is zero); convenient for rendering.
    pub fn normalized(&self) -> RelevanceMap {
        let max = self.values.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return self.clone();
        }
        RelevanceMap {
            values: self.values.scale(1.0 / max),
            target_label: self.target_label,
            method: self.method,
        }
    }
}

/// Input coordinates occupied by an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMask {
    pub indices: BTreeSet<usize>,
}

impl ArtifactMask {
    pub fn new(indices: BTreeSet<usize>) -> AttributionResult<Self> {
        if indices.is_empty() {
            return Err(AttributionError::EmptyMask);
        }
        Ok(ArtifactMask { indices })
    }

    pub fn from_slice(indices: &[usize]) -> AttributionResult<Self> {
        Self::new(indices.iter().copied().collect())
    }
}

/// One affine stage of the attribution graph: `z = A u + c`.
struct AffineStep {
    matrix: Matrix,
    offset: Vector,
    /// Whether a ReLU follows this step in the forward pass.
    relu: bool,
}

/// Flattens model plus (optional) correction into a chain of affine steps and
/// runs the forward pass, recording each step's input and pre-activation.
struct Graph {
    steps: Vec<AffineStep>,
    inputs: Vec<Vector>,
    pre_activations: Vec<Vector>,
}

fn build_graph(
    model: &MlpModel,
    x: &Vector,
    mode: &CorrectionMode,
    bank: Option<&CavBank>,
) -> AttributionResult<Graph> {
    let plan = plan_correction(model, x, mode, bank)?;
    let mut steps: Vec<AffineStep> = Vec::new();

    let correction_step = if plan.subset.is_empty() {
        None
    } else {
        let bank = bank.expect("plan with subset implies a bank");
        let columns: Vec<Vector> =
            plan.subset.iter().map(|&i| bank.cavs()[i].direction.clone()).collect();
        let basis = Matrix::from_columns(&columns)?;
        let (projector, _) = span_projector_matrix(&basis)?;
        let z_neg = bank.joint_z_neg(&plan.subset)?;
        let offset = projector.matvec(&z_neg)?;
        let mut keep = Matrix::identity(projector.n_rows());
        for r in 0..projector.n_rows() {
            for c in 0..projector.n_cols() {
                keep.set(r, c, keep.get(r, c) - projector.get(r, c));
            }
        }
        Some((bank.layer(), AffineStep { matrix: keep, offset, relu: false }))
    };

    let n_layers = model.n_layers();
    let mut pending = correction_step;
    if pending.as_ref().is_some_and(|(layer, _)| *layer == 0) {
        steps.push(pending.take().unwrap().1);
    }
    for k in 0..n_layers {
        let (w, b) = model.layer_params(k);
        steps.push(AffineStep { matrix: w.clone(), offset: b.clone(), relu: k + 1 < n_layers });
        if pending.as_ref().is_some_and(|(layer, _)| *layer == k + 1) {
            steps.push(pending.take().unwrap().1);
        }
    }

    let mut inputs = Vec::with_capacity(steps.len());
    let mut pre_activations = Vec::with_capacity(steps.len());
    let mut current = x.clone();
    for step in &steps {
        inputs.push(current.clone());
        let z = step.matrix.matvec(&current)?.add(&step.offset)?;
        pre_activations.push(z.clone());
        current = if step.relu {
            Vector::new(z.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())?
        } else {
            z
        };
    }
    Ok(Graph { steps, inputs, pre_activations })
}

fn check_target(model: &MlpModel, target_label: usize) -> AttributionResult<()> {
    if target_label >= model.output_dim() {
        return Err(AttributionError::BadTarget {
            label: target_label,
            n_classes: model.output_dim(),
        });
    }
    Ok(())
}

/// LRP with the epsilon rule through the corrected graph. The relevance seed
/// at the output layer is the target logit itself; the per-layer stabilizer
/// is `epsilon * mean|z|` (or `epsilon` when that mean is zero).
pub fn lrp_epsilon(
    model: &MlpModel,
    x: &Vector,
    target_label: usize,
    epsilon: f64,
    mode: &CorrectionMode,
    bank: Option<&CavBank>,
) -> AttributionResult<RelevanceMap> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AttributionError::BadEpsilon(epsilon));
    }
    check_target(model, target_label)?;
    let graph = build_graph(model, x, mode, bank)?;

    let logits = graph.pre_activations.last().expect("graph has steps");
    let mut relevance = vec![0.0; logits.dim()];
    relevance[target_label] = logits.get(target_label);

    for idx in (0..graph.steps.len()).rev() {
        let step = &graph.steps[idx];
        let u = &graph.inputs[idx];
        let z = &graph.pre_activations[idx];
        let mean_abs =
            z.as_slice().iter().map(|v| v.abs()).sum::<f64>() / z.dim().max(1) as f64;
        let eps_eff = if mean_abs > 0.0 { epsilon * mean_abs } else { epsilon };

        let mut next = vec![0.0; u.dim()];
        for j in 0..z.dim() {
            let r_j = relevance[j];
            if r_j == 0.0 {
                continue;
            }
            let zj = z.get(j);
            let denom = zj + eps_eff * if zj < 0.0 { -1.0 } else { 1.0 };
            let scale = r_j / denom;
            for i in 0..u.dim() {
                next[i] += u.get(i) * step.matrix.get(j, i) * scale;
            }
        }
        relevance = next;
    }

    Ok(RelevanceMap {
        values: Vector::new(relevance)?,
        target_label,
        method: AttributionMethod::LrpEpsilon,
    })
}

/// Gradient of the target logit with respect to the input, elementwise times
/// the input, through the corrected graph. ReLU uses the subgradient
/// `1[z > 0]`, matching training.
pub fn gradient_x_input(
    model: &MlpModel,
    x: &Vector,
    target_label: usize,
    mode: &CorrectionMode,
    bank: Option<&CavBank>,
) -> AttributionResult<RelevanceMap> {
    check_target(model, target_label)?;
    let graph = build_graph(model, x, mode, bank)?;

    let n_out = graph.pre_activations.last().expect("graph has steps").dim();
    let mut grad = vec![0.0; n_out];
    grad[target_label] = 1.0;

    for idx in (0..graph.steps.len()).rev() {
        let step = &graph.steps[idx];
        let z = &graph.pre_activations[idx];
        if step.relu {
            for (j, g) in grad.iter_mut().enumerate() {
                if z.get(j) <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut next = vec![0.0; step.matrix.n_cols()];
        for (j, &g) in grad.iter().enumerate() {
            if g != 0.0 {
                for (i, n) in next.iter_mut().enumerate() {
                    *n += step.matrix.get(j, i) * g;
                }
            }
        }
        grad = next;
    }

    let values: Vec<f64> = grad.iter().zip(x.as_slice()).map(|(g, xv)| g * xv).collect();
    Ok(RelevanceMap {
        values: Vector::new(values)?,
        target_label,
        method: AttributionMethod::GradientXInput,
    })
}

/// Fraction of total absolute relevance falling on the masked coordinates.
pub fn relevance_share(map: &RelevanceMap, mask: &ArtifactMask) -> AttributionResult<f64> {
    let dim = map.values.dim();
    if let Some(&index) = mask.indices.iter().find(|&&i| i >= dim) {
        return Err(AttributionError::MaskOutOfRange { index, dim });
    }
    let total: f64 = map.values.as_slice().iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return Err(AttributionError::ZeroRelevance);
    }
    let masked: f64 = mask.indices.iter().map(|&i| map.values.get(i).abs()).sum();
    Ok(masked / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{Cav, CavMethod};
    use crate::clarc::NegativeSet;
    use crate::rng::SplitMix64;

    fn bias_free_net(dims: &[usize], seed: u64) -> MlpModel {
        // He-init weights, biases already zero at init.
        MlpModel::new(dims, 1, seed).unwrap()
    }

    /// All-positive weights guarantee every ReLU is active for positive
    /// inputs, making the graph locally linear.
    fn positive_net(dims: &[usize], seed: u64) -> MlpModel {
        let base = MlpModel::new(dims, 1, seed).unwrap();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..base.n_layers() {
            let (w, b) = base.layer_params(k);
            let mut abs = Matrix::zeros(w.n_rows(), w.n_cols());
            for r in 0..w.n_rows() {
                for c in 0..w.n_cols() {
                    abs.set(r, c, w.get(r, c).abs() + 0.05);
                }
            }
            weights.push(abs);
            biases.push(b.clone());
        }
        MlpModel::from_parts(dims, 1, weights, biases).unwrap()
    }

    #[test]
    fn conservation_holds_on_bias_free_nets() {
        let mut rng = SplitMix64::new(314);
        for seed in [1u64, 2, 3] {
            let model = bias_free_net(&[6, 10, 8, 3], seed);
            let x = Vector::new((0..6).map(|_| rng.next_normal()).collect()).unwrap();
            let target = 1;
            let map =
                lrp_epsilon(&model, &x, target, 1e-9, &CorrectionMode::Vanilla, None).unwrap();
            let logit = model.forward(&x).unwrap().get(target);
            let total: f64 = map.values.as_slice().iter().sum();
            assert!(
                (total - logit).abs() <= 1e-6 * logit.abs().max(1e-12),
                "seed {seed}: sum {total} vs logit {logit}"
            );
        }
    }

    #[test]
    fn lrp_matches_gradient_x_input_in_linear_region() {
        let model = positive_net(&[4, 6, 2], 7);
        let x = Vector::from_slice(&[0.5, 1.0, 0.25, 2.0]).unwrap();
        let lrp =
            lrp_epsilon(&model, &x, 0, 1e-12, &CorrectionMode::Vanilla, None).unwrap();
        let gxi = gradient_x_input(&model, &x, 0, &CorrectionMode::Vanilla, None).unwrap();
        for i in 0..4 {
            let a = lrp.values.get(i);
            let b = gxi.values.get(i);
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "coord {i}: {a} vs {b}");
        }
    }

    #[test]
    fn single_linear_layer_gives_weighted_inputs() {
        // One hidden layer wide enough to stay active, identity-like head.
        let weights = vec![
            Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
            Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        ];
        let biases = vec![Vector::zeros(2), Vector::zeros(2)];
        let model = MlpModel::from_parts(&[2, 2, 2], 1, weights, biases).unwrap();
        let x = Vector::from_slice(&[5.0, 7.0]).unwrap();
        let map = lrp_epsilon(&model, &x, 0, 1e-12, &CorrectionMode::Vanilla, None).unwrap();
        // Logit 0 = 2 * x0; all relevance must land on coordinate 0.
        assert!((map.values.get(0) - 10.0).abs() < 1e-6);
        assert!(map.values.get(1).abs() < 1e-9);
    }

    #[test]
    fn relevance_share_and_mask_validation() {
        let map = RelevanceMap {
            values: Vector::from_slice(&[1.0, -1.0, 2.0]).unwrap(),
            target_label: 0,
            method: AttributionMethod::LrpEpsilon,
        };
        let mask = ArtifactMask::from_slice(&[2]).unwrap();
        assert_eq!(relevance_share(&map, &mask).unwrap(), 0.5);
        let bad = ArtifactMask::from_slice(&[9]).unwrap();
        assert!(matches!(
            relevance_share(&map, &bad),
            Err(AttributionError::MaskOutOfRange { index: 9, dim: 3 })
        ));
        let zero = RelevanceMap {
            values: Vector::zeros(3),
            target_label: 0,
            method: AttributionMethod::LrpEpsilon,
        };
        assert!(matches!(relevance_share(&zero, &mask), Err(AttributionError::ZeroRelevance)));
        assert!(ArtifactMask::from_slice(&[]).is_err());
    }

    #[test]
    fn corrected_graph_reduces_relevance_on_suppressed_coordinate() {
        // Input-space bank along e_2; correction should strip coordinate 2's
        // influence, so its relevance share must drop.
        let model = positive_net(&[3, 8, 2], 21);
        let cav = Cav::new(
            "a".into(),
            0,
            Vector::from_slice(&[0.0, 0.0, 1.0]).unwrap(),
            Vector::zeros(3),
            CavMethod::Pattern,
            true,
        )
        .unwrap();
        let negatives =
            NegativeSet::new("a".into(), vec![0], vec![Vector::zeros(3)]).unwrap();
        let bank = CavBank::new(vec![cav], vec![negatives]).unwrap();
        let x = Vector::from_slice(&[1.0, 0.5, 4.0]).unwrap();
        let mask = ArtifactMask::from_slice(&[2]).unwrap();

        let vanilla =
            lrp_epsilon(&model, &x, 0, 1e-6, &CorrectionMode::Vanilla, None).unwrap();
        let corrected =
            lrp_epsilon(&model, &x, 0, 1e-6, &CorrectionMode::PClArC, Some(&bank)).unwrap();
        let share_vanilla = relevance_share(&vanilla, &mask).unwrap();
        let share_corrected = relevance_share(&corrected, &mask).unwrap();
        assert!(
            share_corrected < share_vanilla,
            "share {share_corrected} should drop below {share_vanilla}"
        );
        // The corrected coordinate contributes (numerically) nothing.
        assert!(share_corrected <= 1e-9, "share {share_corrected}");
    }

    #[test]
    fn normalized_map_peaks_at_one() {
        let map = RelevanceMap {
            values: Vector::from_slice(&[2.0, -8.0, 4.0]).unwrap(),
            target_label: 0,
            method: AttributionMethod::GradientXInput,
        };
        let norm = map.normalized();
        assert_eq!(norm.values.as_slice(), &[0.25, -1.0, 0.5]);
    }
}
