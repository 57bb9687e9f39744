//! Experiment orchestration: config files, metrics, evaluation reports, and
//! the prepared pipelines the CLI drives.
//!
//! A single `ExperimentConfig` describes dataset, model, direction
//! estimation, probes, and modes. Resolving it against a seed rewrites every
//! sub-seed from one root (data = seed, training = seed + 1, directions =
//! seed + 2, probes = seed + 3, report sampling = seed + 4), so one integer
//! pins the whole run. Reports carry a SHA-256 hash of the resolved config
//! and contain no timestamps or other ambient state; identical config and
//! seed produce byte-identical output files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{lrp_epsilon, relevance_share, ArtifactMask, AttributionError};
use crate::clarc::{
    corrected_forward, multi_pclarc_apply, train_artifact_probe, CavBank, CavRecord, ClarcError,
    Condition, CorrectionMode, LinearProbe, NegativeSet, ProbeConfig,
};
use crate::concepts::{
    cav_activation, class_direction_cosines, filter_cav, pattern_cav, Cav, CavMethod, ConceptError,
};
use crate::linalg::{MathError, Matrix, Vector};
use crate::nn::{train, MlpModel, NnError, Optimizer, TrainConfig, TrainReport};
use crate::rng::SplitMix64;
use crate::svm::SvmConfig;
use crate::synthdata::{
    gen_backdoor, gen_paired, gen_shortcut, gen_toy3d, LabeledDataset, Split, SynthConfig,
    SynthError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Clarc(#[from] ClarcError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type HarnessResult<T> = Result<T, HarnessError>;

// --- Metrics -----------------------------------------------------------------

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> HarnessResult<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(HarnessError::ConfigError(format!(
            "accuracy needs matching non-empty slices, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Unweighted mean of per-class F1 over all `n_classes` configured classes.
/// A class absent from both predictions and labels contributes an F1 of 0,
/// so a constant classifier cannot hide behind the classes it ignores.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> HarnessResult<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() || n_classes == 0 {
        return Err(HarnessError::ConfigError(format!(
            "macro f1 needs matching non-empty slices and classes, got {}, {}, {}",
            predictions.len(),
            labels.len(),
            n_classes
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= n_classes) {
        return Err(HarnessError::ConfigError(format!(
            "label {bad} outside the {n_classes} configured classes"
        )));
    }
    let mut total = 0.0;
    for class in 0..n_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / n_classes as f64)
}

// --- Experiment configuration ------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy3d,
    Backdoor { synth: SynthConfig },
    Shortcut { synth: SynthConfig },
    File { data: PathBuf, manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    /// Defaults to the direction layer (or 1 for input-space directions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_layer: Option<usize>,
    /// Load this model file instead of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CavSource {
    /// Seeded clean/poisoned counterfactual pairs from the artifact's clean
    /// host pool.
    Generated,
    /// The dataset's own flagged and clean samples.
    #[default]
    DataSubset,
}

fn default_cav_method() -> CavMethod {
    CavMethod::Pattern
}

fn default_n_pairs() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavSpec {
    #[serde(default = "default_cav_method")]
    pub method: CavMethod,
    /// 0 estimates directions in input space; any other value must equal the
    /// model's split layer.
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub source: CavSource,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default)]
    pub svm: SvmConfig,
}

impl Default for CavSpec {
    fn default() -> Self {
        CavSpec {
            method: CavMethod::Pattern,
            layer: 0,
            source: CavSource::DataSubset,
            n_pairs: default_n_pairs(),
            svm: SvmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProbeSpec {
    #[serde(default)]
    pub svm: SvmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    Vanilla,
    Pclarc,
    RclarcClass,
    RclarcArtifact,
    RclarcBoth,
}

impl ModeSpec {
    pub fn all() -> Vec<ModeSpec> {
        vec![
            ModeSpec::Vanilla,
            ModeSpec::Pclarc,
            ModeSpec::RclarcClass,
            ModeSpec::RclarcArtifact,
            ModeSpec::RclarcBoth,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModeSpec::Vanilla => "vanilla",
            ModeSpec::Pclarc => "pclarc",
            ModeSpec::RclarcClass => "rclarc-class",
            ModeSpec::RclarcArtifact => "rclarc-artifact",
            ModeSpec::RclarcBoth => "rclarc-both",
        }
    }

    pub fn parse(text: &str) -> HarnessResult<ModeSpec> {
        Self::all()
            .into_iter()
            .find(|m| m.label() == text)
            .ok_or_else(|| HarnessError::ConfigError(format!("unknown mode {text:?}")))
    }
}

fn default_modes() -> Vec<ModeSpec> {
    ModeSpec::all()
}

fn default_lrp_epsilon() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub training: TrainConfig,
    #[serde(default)]
    pub cav: CavSpec,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeSpec>,
    #[serde(default = "default_lrp_epsilon")]
    pub lrp_epsilon: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Rewrites every sub-seed from the root seed (the override when given).
    /// Prepared runs and reports always come from a resolved config.
    pub fn resolve(&self, seed_override: Option<u64>) -> ExperimentConfig {
        let seed = seed_override.unwrap_or(self.seed);
        let mut resolved = self.clone();
        resolved.seed = seed;
        match &mut resolved.dataset {
            DatasetSpec::Backdoor { synth } | DatasetSpec::Shortcut { synth } => {
                synth.seed = seed;
            }
            DatasetSpec::Toy3d | DatasetSpec::File { .. } => {}
        }
        resolved.training.seed = seed.wrapping_add(1);
        resolved
    }

    fn validate(&self) -> HarnessResult<()> {
        if self.modes.is_empty() {
            return Err(HarnessError::ConfigError("modes must not be empty".into()));
        }
        if !(self.lrp_epsilon > 0.0) || !self.lrp_epsilon.is_finite() {
            return Err(HarnessError::ConfigError(format!(
                "lrp_epsilon {} must be positive",
                self.lrp_epsilon
            )));
        }
        let split = self.split_layer();
        if self.cav.layer != 0 && self.cav.layer != split {
            return Err(HarnessError::ConfigError(format!(
                "direction layer {} does not match model split layer {split}",
                self.cav.layer
            )));
        }
        if split == 0 || split > self.model.hidden_dims.len() + 1 {
            return Err(HarnessError::ConfigError(format!(
                "split layer {split} outside 1..={}",
                self.model.hidden_dims.len() + 1
            )));
        }
        Ok(())
    }

    pub fn split_layer(&self) -> usize {
        self.model.split_layer.unwrap_or_else(|| self.cav.layer.max(1))
    }

    pub fn seeds(&self) -> SubSeeds {
        SubSeeds {
            data: self.seed,
            training: self.seed.wrapping_add(1),
            directions: self.seed.wrapping_add(2),
            probes: self.seed.wrapping_add(3),
            sampling: self.seed.wrapping_add(4),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SubSeeds {
    pub data: u64,
    pub training: u64,
    pub directions: u64,
    pub probes: u64,
    pub sampling: u64,
}

/// Hex SHA-256 of the resolved config's canonical JSON.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: &Path) -> HarnessResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| {
        HarnessError::ConfigError(format!("{}: {e}", path.display()))
    })
}

// --- Preparation ---------------------------------------------------------------

/// Everything a set of evaluations shares: data, model, direction bank,
/// probes, and the class association map.
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset: LabeledDataset,
    pub model: MlpModel,
    /// Present when the model was trained here rather than loaded.
    pub train_report: Option<TrainReport>,
    pub records: Vec<CavRecord>,
    pub negative_sets: Vec<NegativeSet>,
    pub bank: Option<CavBank>,
    pub probes: BTreeMap<String, LinearProbe>,
    pub class_map: BTreeMap<String, BTreeSet<usize>>,
}

/// Activations of the chosen dataset rows in the layer's space: the raw
/// inputs for layer 0, otherwise the model's split-layer features.
pub fn activations_at_layer(
    model: &MlpModel,
    layer: usize,
    dataset: &LabeledDataset,
    rows: &[usize],
) -> HarnessResult<Vec<Vector>> {
    if layer == 0 {
        return Ok(rows.iter().map(|&r| dataset.sample(r)).collect());
    }
    if layer != model.split_layer() {
        return Err(HarnessError::ConfigError(format!(
            "layer {layer} is not the model's split layer {}",
            model.split_layer()
        )));
    }
    rows.iter().map(|&r| Ok(model.forward_features(&dataset.sample(r))?)).collect()
}

fn build_dataset(config: &ExperimentConfig) -> HarnessResult<LabeledDataset> {
    Ok(match &config.dataset {
        DatasetSpec::Toy3d => gen_toy3d(config.seed),
        DatasetSpec::Backdoor { synth } => gen_backdoor(synth)?,
        DatasetSpec::Shortcut { synth } => gen_shortcut(synth)?,
        DatasetSpec::File { data, manifest } => LabeledDataset::load(data, manifest)?,
    })
}

fn build_model(
    config: &ExperimentConfig,
    dataset: &LabeledDataset,
) -> HarnessResult<(MlpModel, Option<TrainReport>)> {
    if let Some(path) = &config.model.load {
        let loaded = MlpModel::load(path)?;
        if loaded.model.input_dim() != dataset.input_dim()
            || loaded.model.output_dim() != dataset.n_classes
        {
            return Err(HarnessError::ConfigError(format!(
                "loaded model is {}->{} but the dataset needs {}->{}",
                loaded.model.input_dim(),
                loaded.model.output_dim(),
                dataset.input_dim(),
                dataset.n_classes
            )));
        }
        return Ok((loaded.model, None));
    }
    let mut layer_dims = vec![dataset.input_dim()];
    layer_dims.extend_from_slice(&config.model.hidden_dims);
    layer_dims.push(dataset.n_classes);
    let model = MlpModel::new(&layer_dims, config.split_layer(), config.seeds().training)?;

    let train_rows = dataset.split_indices(Split::Train);
    let mut flat = Vec::with_capacity(train_rows.len() * dataset.input_dim());
    let mut labels = Vec::with_capacity(train_rows.len());
    for &r in &train_rows {
        flat.extend_from_slice(dataset.sample(r).as_slice());
        labels.push(dataset.labels[r]);
    }
    let inputs = Matrix::new(train_rows.len(), dataset.input_dim(), flat)?;
    let (model, report) = train(model, &inputs, &labels, &config.training)?;
    Ok((model, Some(report)))
}

/// Fits one direction record per dataset artifact, in dataset order, plus
/// the negative sets that anchor joint corrections. Every artifact draws its
/// negatives with the same seed, so artifacts sharing a clean host pool get
/// identical negative ids and joint anchors stay well-defined.
pub fn fit_bank_records(
    dataset: &LabeledDataset,
    model: &MlpModel,
    cav: &CavSpec,
    seed: u64,
) -> HarnessResult<(Vec<CavRecord>, Vec<NegativeSet>)> {
    let mut records = Vec::new();
    let mut sets = Vec::new();
    for spec in &dataset.artifacts {
        let (positives, negatives, negative_ids) = match cav.source {
            CavSource::DataSubset => {
                let pos_rows = dataset.positives_of(&spec.id);
                let neg_rows = dataset.clean_host_pool(&spec.id)?;
                let positives = activations_at_layer(model, cav.layer, dataset, &pos_rows)?;
                let negatives = activations_at_layer(model, cav.layer, dataset, &neg_rows)?;
                let ids: Vec<u64> = neg_rows.iter().map(|&r| r as u64).collect();
                (positives, negatives, ids)
            }
            CavSource::Generated => {
                let generated = gen_paired(dataset, &spec.id, cav.n_pairs, seed)?;
                let mut positives = Vec::with_capacity(generated.pairs.len());
                let mut negatives = Vec::with_capacity(generated.pairs.len());
                for (clean, poisoned) in generated.pairs.pairs() {
                    negatives.push(to_layer(model, cav.layer, clean)?);
                    positives.push(to_layer(model, cav.layer, poisoned)?);
                }
                (positives, negatives, generated.clean_ids)
            }
        };
        let fitted: Cav = match cav.method {
            CavMethod::Pattern => pattern_cav(&spec.id, cav.layer, &positives, &negatives)?,
            CavMethod::Filter => {
                filter_cav(&spec.id, cav.layer, &positives, &negatives, &cav.svm)?
            }
        };
        records.push(CavRecord {
            concept_id: fitted.concept_id.clone(),
            layer: fitted.layer,
            direction: fitted.direction.clone(),
            z_neg: fitted.z_neg.clone(),
            method: fitted.method,
            converged: fitted.converged,
            n_positives: positives.len(),
            negative_ids: negative_ids.clone(),
            seed,
        });
        sets.push(NegativeSet::new(spec.id.clone(), negative_ids, negatives)?);
    }
    Ok((records, sets))
}

fn to_layer(model: &MlpModel, layer: usize, x: &Vector) -> HarnessResult<Vector> {
    if layer == 0 {
        Ok(x.clone())
    } else {
        Ok(model.forward_features(x)?)
    }
}

/// Rebuilds the negative sets a bank file refers to by pushing the recorded
/// sample ids back through the dataset (and model, for latent banks).
pub fn negative_sets_for_records(
    dataset: &LabeledDataset,
    model: &MlpModel,
    records: &[CavRecord],
) -> HarnessResult<Vec<NegativeSet>> {
    records
        .iter()
        .map(|record| {
            let rows: Vec<usize> = record
                .negative_ids
                .iter()
                .map(|&id| {
                    let row = id as usize;
                    if row >= dataset.n() {
                        return Err(HarnessError::ConfigError(format!(
                            "negative id {id} outside the dataset ({} samples)",
                            dataset.n()
                        )));
                    }
                    Ok(row)
                })
                .collect::<HarnessResult<_>>()?;
            let activations = activations_at_layer(model, record.layer, dataset, &rows)?;
            Ok(NegativeSet::new(record.concept_id.clone(), record.negative_ids.clone(), activations)?)
        })
        .collect()
}

pub fn bank_from_records(
    records: &[CavRecord],
    negative_sets: &[NegativeSet],
) -> HarnessResult<CavBank> {
    let cavs: Vec<Cav> =
        records.iter().map(|r| r.to_cav()).collect::<Result<_, _>>()?;
    Ok(CavBank::new(cavs, negative_sets.to_vec())?)
}

/// Trains one artifact probe per dataset artifact in the direction layer's
/// space. Positives are the flagged train samples, negatives everything else
/// in the train split (capped and held out inside the probe trainer).
pub fn fit_probes(
    dataset: &LabeledDataset,
    model: &MlpModel,
    layer: usize,
    svm: &SvmConfig,
    seed: u64,
) -> HarnessResult<BTreeMap<String, LinearProbe>> {
    let mut probes = BTreeMap::new();
    for spec in &dataset.artifacts {
        let pos_rows = dataset.positives_of(&spec.id);
        let neg_rows = dataset.negatives_of(&spec.id);
        let positives = activations_at_layer(model, layer, dataset, &pos_rows)?;
        let negatives = activations_at_layer(model, layer, dataset, &neg_rows)?;
        let probe = train_artifact_probe(
            &spec.id,
            &positives,
            &negatives,
            &ProbeConfig { svm: svm.clone(), seed },
        )?;
        probes.insert(spec.id.clone(), probe);
    }
    Ok(probes)
}

/// Builds dataset, model, direction bank, and probes from a resolved config.
pub fn prepare(config: &ExperimentConfig) -> HarnessResult<PreparedExperiment> {
    config.validate()?;
    let hash = config_hash(config);
    let dataset = build_dataset(config)?;
    let (model, train_report) = build_model(config, &dataset)?;
    let seeds = config.seeds();

    let (records, negative_sets, bank) = if dataset.artifacts.is_empty() {
        (Vec::new(), Vec::new(), None)
    } else {
        let (records, sets) = fit_bank_records(&dataset, &model, &config.cav, seeds.directions)?;
        let bank = bank_from_records(&records, &sets)?;
        (records, sets, Some(bank))
    };
    let probes = if dataset.artifacts.is_empty() {
        BTreeMap::new()
    } else {
        fit_probes(&dataset, &model, config.cav.layer, &config.probe.svm, seeds.probes)?
    };
    let class_map: BTreeMap<String, BTreeSet<usize>> = dataset
        .artifacts
        .iter()
        .map(|a| (a.id.clone(), a.associated_classes.clone()))
        .collect();

    Ok(PreparedExperiment {
        config: config.clone(),
        config_hash: hash,
        dataset,
        model,
        train_report,
        records,
        negative_sets,
        bank,
        probes,
        class_map,
    })
}

impl PreparedExperiment {
    /// The runtime correction mode a report row evaluates.
    pub fn correction_mode(&self, mode: ModeSpec) -> CorrectionMode {
        match mode {
            ModeSpec::Vanilla => CorrectionMode::Vanilla,
            ModeSpec::Pclarc => CorrectionMode::PClArC,
            ModeSpec::RclarcClass => {
                CorrectionMode::RClArC(Condition::Class { class_map: self.class_map.clone() })
            }
            ModeSpec::RclarcArtifact => {
                CorrectionMode::RClArC(Condition::Artifact { probes: self.probes.clone() })
            }
            ModeSpec::RclarcBoth => CorrectionMode::RClArC(Condition::Both {
                class_map: self.class_map.clone(),
                probes: self.probes.clone(),
            }),
        }
    }
}

// --- Evaluation ----------------------------------------------------------------

/// One mode's scores. Accuracies and F1 are fractions in [0, 1]; the
/// artifact columns are absent when the dataset has no artifact test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ModeSpec,
    pub n_clean: usize,
    pub accuracy_clean: f64,
    pub f1_clean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_artifact: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_artifact: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_artifact: Option<f64>,
    /// Mean fraction of absolute input relevance inside the artifact masks,
    /// over every flagged test sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_relevance_share: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

fn predictions_for_rows(
    prepared: &PreparedExperiment,
    mode: &CorrectionMode,
    rows: &[usize],
) -> HarnessResult<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            let out = corrected_forward(
                &prepared.model,
                &prepared.dataset.sample(r),
                mode,
                prepared.bank.as_ref(),
            )?;
            Ok(crate::nn::argmax(&out.logits))
        })
        .collect()
}

/// Union of the masks of the artifacts a sample carries.
fn sample_mask(dataset: &LabeledDataset, row: usize) -> HarnessResult<Option<ArtifactMask>> {
    let mut indices = BTreeSet::new();
    for id in &dataset.artifact_flags[row] {
        indices.extend(dataset.artifact_spec(id)?.mask.indices.iter().copied());
    }
    if indices.is_empty() {
        return Ok(None);
    }
    Ok(Some(ArtifactMask::new(indices)?))
}

/// Evaluates one mode: accuracy and macro F1 on the clean and artifact test
/// splits, plus the mean relevance share inside artifact masks over every
/// flagged test sample. The relevance target is the label the corrected
/// model actually predicts.
pub fn evaluate_mode(prepared: &PreparedExperiment, mode: ModeSpec) -> HarnessResult<EvalReport> {
    let correction = prepared.correction_mode(mode);
    let dataset = &prepared.dataset;

    let clean_rows = dataset.split_indices(Split::Test);
    if clean_rows.is_empty() {
        return Err(HarnessError::ConfigError("dataset has no test split".into()));
    }
    let clean_labels: Vec<usize> = clean_rows.iter().map(|&r| dataset.labels[r]).collect();
    let clean_preds = predictions_for_rows(prepared, &correction, &clean_rows)?;
    let accuracy_clean = accuracy(&clean_preds, &clean_labels)?;
    let f1_clean = macro_f1(&clean_preds, &clean_labels, dataset.n_classes)?;

    let artifact_rows = dataset.split_indices(Split::TestArtifact);
    let (n_artifact, accuracy_artifact, f1_artifact) = if artifact_rows.is_empty() {
        (None, None, None)
    } else {
        let labels: Vec<usize> = artifact_rows.iter().map(|&r| dataset.labels[r]).collect();
        let preds = predictions_for_rows(prepared, &correction, &artifact_rows)?;
        (
            Some(artifact_rows.len()),
            Some(accuracy(&preds, &labels)?),
            Some(macro_f1(&preds, &labels, dataset.n_classes)?),
        )
    };

    let mut shares = Vec::new();
    for &row in clean_rows.iter().chain(&artifact_rows) {
        let Some(mask) = sample_mask(dataset, row)? else { continue };
        let x = dataset.sample(row);
        let out =
            corrected_forward(&prepared.model, &x, &correction, prepared.bank.as_ref())?;
        let target = crate::nn::argmax(&out.logits);
        let map = lrp_epsilon(
            &prepared.model,
            &x,
            target,
            prepared.config.lrp_epsilon,
            &correction,
            prepared.bank.as_ref(),
        )?;
        shares.push(relevance_share(&map, &mask)?);
    }
    let mean_relevance_share = if shares.is_empty() {
        None
    } else {
        Some(shares.iter().sum::<f64>() / shares.len() as f64)
    };

    Ok(EvalReport {
        mode,
        n_clean: clean_rows.len(),
        accuracy_clean,
        f1_clean,
        n_artifact,
        accuracy_artifact,
        f1_artifact,
        mean_relevance_share,
        seed: prepared.config.seed,
        config_hash: prepared.config_hash.clone(),
    })
}

pub fn evaluate_all(prepared: &PreparedExperiment) -> HarnessResult<Vec<EvalReport>> {
    prepared.config.modes.iter().map(|&m| evaluate_mode(prepared, m)).collect()
}

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_default()
}

/// Report table as CSV. Scores are percentages with four decimals.
pub fn eval_reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "mode,n_clean,accuracy_clean,f1_clean,n_artifact,accuracy_artifact,f1_artifact,mean_relevance_share\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.mode.label(),
            r.n_clean,
            pct(r.accuracy_clean),
            pct(r.f1_clean),
            r.n_artifact.map(|n| n.to_string()).unwrap_or_default(),
            opt_pct(r.accuracy_artifact),
            opt_pct(r.f1_artifact),
            opt_pct(r.mean_relevance_share),
        ));
    }
    out
}

// --- Frozen experiment defaults --------------------------------------------

/// Four-cluster 3-d experiment at its documented scale: a 3-30-2 network
/// trained with Adam at learning rate 0.01 for 5000 epochs, directions
/// estimated in input space from the cluster memberships.
pub fn toy3d_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Toy3d,
        model: ModelSpec { hidden_dims: vec![30], split_layer: Some(1), load: None },
        training: TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            epochs: 5000,
            batch_size: None,
            seed: 0,
        },
        cav: CavSpec {
            method: CavMethod::Pattern,
            layer: 0,
            source: CavSource::DataSubset,
            n_pairs: default_n_pairs(),
            svm: SvmConfig::default(),
        },
        probe: ProbeSpec::default(),
        modes: ModeSpec::all(),
        lrp_epsilon: default_lrp_epsilon(),
        seed,
    }
    .resolve(None)
}

/// Backdoor experiment: two classes, one artifact, every poisoned train
/// label flipped to the target class.
pub fn backdoor_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Backdoor {
            synth: SynthConfig {
                n_classes: 2,
                input_dim: 12,
                samples_per_class: 500,
                artifact_count: 1,
                artifact_magnitude: 4.0,
                poison_fraction: 0.3,
                label_flip_fraction: 1.0,
                seed: 0,
            },
        },
        model: ModelSpec { hidden_dims: vec![16], split_layer: Some(1), load: None },
        training: TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: None,
            seed: 0,
        },
        cav: CavSpec {
            method: CavMethod::Pattern,
            layer: 1,
            source: CavSource::Generated,
            n_pairs: 200,
            svm: SvmConfig::default(),
        },
        probe: ProbeSpec::default(),
        modes: ModeSpec::all(),
        lrp_epsilon: default_lrp_epsilon(),
        seed,
    }
    .resolve(None)
}

/// Shortcut experiment with ten artifacts riding on class 0, used by the
/// bank-size sweep. The pair count stays below the clean half of the host
/// class's train pool.
pub fn shortcut_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Shortcut {
            synth: SynthConfig {
                n_classes: 10,
                input_dim: 32,
                samples_per_class: 400,
                artifact_count: 10,
                artifact_magnitude: 5.0,
                poison_fraction: 0.5,
                label_flip_fraction: 0.0,
                seed: 0,
            },
        },
        model: ModelSpec { hidden_dims: vec![32], split_layer: Some(1), load: None },
        training: TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: None,
            seed: 0,
        },
        cav: CavSpec {
            method: CavMethod::Pattern,
            layer: 1,
            source: CavSource::Generated,
            n_pairs: 150,
            svm: SvmConfig::default(),
        },
        probe: ProbeSpec::default(),
        modes: ModeSpec::all(),
        lrp_epsilon: default_lrp_epsilon(),
        seed,
    }
    .resolve(None)
}

// --- Cluster experiment ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy3dOutcome {
    pub mode: ModeSpec,
    /// Accuracy over the whole held-out test split.
    pub accuracy: f64,
    /// Held-out samples of the artifact-free minority class the mode got
    /// wrong; collateral damage shows up here.
    pub minority_errors: usize,
    pub minority_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy3dReport {
    pub vanilla_accuracy: f64,
    pub outcomes: Vec<Toy3dOutcome>,
    pub seed: u64,
    pub config_hash: String,
}

/// Runs every configured mode on the cluster dataset and reports overall
/// test accuracy plus the error count on the minority class (the class the
/// always-on correction is expected to damage). When `out_dir` is given,
/// writes one point-cloud CSV per mode with the corrected coordinates.
pub fn run_toy3d(
    prepared: &PreparedExperiment,
    out_dir: Option<&Path>,
) -> HarnessResult<Toy3dReport> {
    let dataset = &prepared.dataset;
    let minority = dataset.n_classes - 1;
    let test_rows = dataset.split_indices(Split::Test);
    let labels: Vec<usize> = test_rows.iter().map(|&r| dataset.labels[r]).collect();

    let mut outcomes = Vec::new();
    let mut vanilla_accuracy = None;
    for &mode in &prepared.config.modes {
        let correction = prepared.correction_mode(mode);
        let preds = predictions_for_rows(prepared, &correction, &test_rows)?;
        let acc = accuracy(&preds, &labels)?;
        if mode == ModeSpec::Vanilla {
            vanilla_accuracy = Some(acc);
        }
        let minority_errors = test_rows
            .iter()
            .zip(&preds)
            .filter(|(&r, &p)| dataset.labels[r] == minority && p != minority)
            .count();
        let minority_total = labels.iter().filter(|&&l| l == minority).count();
        outcomes.push(Toy3dOutcome { mode, accuracy: acc, minority_errors, minority_total });

        if let Some(dir) = out_dir {
            let path = dir.join(format!("points_{}.csv", mode.label()));
            write_point_cloud(prepared, &correction, &test_rows, &preds, &path)?;
        }
    }
    let vanilla_accuracy = vanilla_accuracy.ok_or_else(|| {
        HarnessError::ConfigError("cluster experiment needs the vanilla mode in modes".into())
    })?;
    Ok(Toy3dReport {
        vanilla_accuracy,
        outcomes,
        seed: prepared.config.seed,
        config_hash: prepared.config_hash.clone(),
    })
}

/// Corrected coordinates of the given rows (input-space banks only), one
/// CSV row per sample.
fn write_point_cloud(
    prepared: &PreparedExperiment,
    correction: &CorrectionMode,
    rows: &[usize],
    preds: &[usize],
    path: &Path,
) -> HarnessResult<()> {
    let dataset = &prepared.dataset;
    let mut text = String::from("id,label,predicted");
    for d in 0..dataset.input_dim() {
        text.push_str(&format!(",x{d}"));
    }
    text.push('\n');
    for (&row, &pred) in rows.iter().zip(preds) {
        let x = dataset.sample(row);
        let corrected = match (correction, prepared.bank.as_ref()) {
            (CorrectionMode::Vanilla, _) | (_, None) => x.clone(),
            (mode, Some(bank)) if bank.layer() == 0 => {
                let plan = crate::clarc::plan_correction(&prepared.model, &x, mode, Some(bank))?;
                multi_pclarc_apply(&x, bank, &plan.subset)?.activation
            }
            _ => x.clone(),
        };
        text.push_str(&format!("{row},{},{pred}", dataset.labels[row]));
        for v in corrected.as_slice() {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

// --- Bank-size sweep ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: ModeSpec,
    /// Number of directions in the bank (0 = no correction possible).
    pub k: usize,
    pub accuracy_clean: f64,
    pub accuracy_artifact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub seed: u64,
    pub config_hash: String,
}

/// Sweeps the bank size from 0 to the full artifact count: dataset, model,
/// directions, and probes are built once, then each step corrects only the
/// first `k` directions. Relevance is skipped here; the sweep tracks
/// accuracy only.
pub fn run_sweep(prepared: &PreparedExperiment) -> HarnessResult<SweepReport> {
    let dataset = &prepared.dataset;
    let clean_rows = dataset.split_indices(Split::Test);
    let artifact_rows = dataset.split_indices(Split::TestArtifact);
    if clean_rows.is_empty() || artifact_rows.is_empty() {
        return Err(HarnessError::ConfigError(
            "the sweep needs both a clean and an artifact test split".into(),
        ));
    }
    let clean_labels: Vec<usize> = clean_rows.iter().map(|&r| dataset.labels[r]).collect();
    let artifact_labels: Vec<usize> =
        artifact_rows.iter().map(|&r| dataset.labels[r]).collect();

    let mut rows = Vec::new();
    for k in 0..=prepared.records.len() {
        let bank_k = if k == 0 {
            None
        } else {
            Some(bank_from_records(&prepared.records[..k], &prepared.negative_sets[..k])?)
        };
        for &mode in &prepared.config.modes {
            let correction =
                if k == 0 { CorrectionMode::Vanilla } else { prepared.correction_mode(mode) };
            let predict = |eval_rows: &[usize]| -> HarnessResult<Vec<usize>> {
                eval_rows
                    .iter()
                    .map(|&r| {
                        let out = corrected_forward(
                            &prepared.model,
                            &dataset.sample(r),
                            &correction,
                            bank_k.as_ref(),
                        )?;
                        Ok(crate::nn::argmax(&out.logits))
                    })
                    .collect()
            };
            let clean_preds = predict(&clean_rows)?;
            let artifact_preds = predict(&artifact_rows)?;
            rows.push(SweepRow {
                mode,
                k,
                accuracy_clean: accuracy(&clean_preds, &clean_labels)?,
                accuracy_artifact: accuracy(&artifact_preds, &artifact_labels)?,
            });
        }
    }
    Ok(SweepReport {
        rows,
        seed: prepared.config.seed,
        config_hash: prepared.config_hash.clone(),
    })
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("mode,k,accuracy_clean,accuracy_artifact\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.mode.label(),
            row.k,
            pct(row.accuracy_clean),
            pct(row.accuracy_artifact)
        ));
    }
    out
}

// --- Diagnostics exports -----------------------------------------------------

const HISTOGRAM_CLEAN_SAMPLES: usize = 500;

/// Per-direction activation samples for histogram plots: every flagged train
/// sample (group `artifact`) and up to 500 seeded clean train samples (group
/// `clean`), scored as `<v, a - z>`.
pub fn export_histograms(prepared: &PreparedExperiment, path: &Path) -> HarnessResult<()> {
    let Some(bank) = prepared.bank.as_ref() else {
        return Err(HarnessError::ConfigError("no directions to export".into()));
    };
    let dataset = &prepared.dataset;
    let layer = bank.layer();
    let clean_rows: Vec<usize> = dataset
        .split_indices(Split::Train)
        .into_iter()
        .filter(|&r| dataset.is_clean(r))
        .collect();
    let mut rng = SplitMix64::new(prepared.config.seeds().sampling);
    let picked = if clean_rows.len() > HISTOGRAM_CLEAN_SAMPLES {
        rng.choose_distinct(clean_rows.len(), HISTOGRAM_CLEAN_SAMPLES)
            .into_iter()
            .map(|i| clean_rows[i])
            .collect()
    } else {
        clean_rows
    };

    let mut text = String::from("concept_id,sample_id,label,group,activation\n");
    for cav in bank.cavs() {
        let flagged = dataset.positives_of(&cav.concept_id);
        for (rows, group) in [(&flagged, "artifact"), (&picked, "clean")] {
            for &row in rows {
                let a = to_layer(&prepared.model, layer, &dataset.sample(row))?;
                let score = cav_activation(cav, &a)?;
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cav.concept_id, row, dataset.labels[row], group, score
                ));
            }
        }
    }
    std::fs::write(path, text)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

/// Cosines between each direction and each class's clean mean direction
/// (class mean minus global clean mean in the direction layer's space).
pub fn export_class_cosines(prepared: &PreparedExperiment, path: &Path) -> HarnessResult<()> {
    let Some(bank) = prepared.bank.as_ref() else {
        return Err(HarnessError::ConfigError("no directions to export".into()));
    };
    let dataset = &prepared.dataset;
    let layer = bank.layer();
    let mut per_class = Vec::with_capacity(dataset.n_classes);
    let mut all_clean = Vec::new();
    for class in 0..dataset.n_classes {
        let rows: Vec<usize> = dataset
            .split_indices(Split::Train)
            .into_iter()
            .filter(|&r| dataset.labels[r] == class && dataset.is_clean(r))
            .collect();
        if rows.is_empty() {
            return Err(HarnessError::ConfigError(format!(
                "class {class} has no clean train samples"
            )));
        }
        let acts = activations_at_layer(&prepared.model, layer, dataset, &rows)?;
        per_class.push(Vector::mean(&acts)?);
        all_clean.extend(acts);
    }
    let global = Vector::mean(&all_clean)?;
    let table = class_direction_cosines(bank.cavs(), &per_class, &global)?;

    let mut text = String::from("concept_id,class,cosine\n");
    for (i, concept_id) in table.concept_ids.iter().enumerate() {
        for (class, value) in table.values[i].iter().enumerate() {
            let cell = value.map(|v| format!("{v}")).unwrap_or_default();
            text.push_str(&format!("{concept_id},{class},{cell}\n"));
        }
    }
    std::fs::write(path, text)
        .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn macro_f1_matches_hand_computation() {
        // Two classes: preds [0,0,1,1], labels [0,1,1,1].
        // Class 0: tp=1 fp=1 fn=0, p=0.5 r=1, f1=2/3.
        // Class 1: tp=2 fp=0 fn=1, p=1 r=2/3, f1=0.8.
        let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        // Constant classifier on a balanced two-class set: the predicted
        // class scores f1 = 2/3, the ignored class 0, mean 1/3.
        let f1 = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
        // Classes beyond those seen still dilute the average.
        let f1_three = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 3).unwrap();
        assert!((f1_three - 2.0 / 9.0).abs() < 1e-12);
        assert!(accuracy(&[0, 1], &[0]).is_err());
        assert!(macro_f1(&[3], &[0], 2).is_err());
    }

    fn tiny_backdoor_experiment(seed: u64) -> ExperimentConfig {
        let mut config = backdoor_experiment(seed);
        if let DatasetSpec::Backdoor { synth } = &mut config.dataset {
            synth.samples_per_class = 80;
        }
        config.training.epochs = 60;
        config.cav.n_pairs = 30;
        config.resolve(None)
    }

    #[test]
    fn seed_resolution_rewrites_sub_seeds() {
        let config = backdoor_experiment(9);
        assert_eq!(config.seed, 9);
        match &config.dataset {
            DatasetSpec::Backdoor { synth } => assert_eq!(synth.seed, 9),
            _ => panic!("wrong dataset kind"),
        }
        assert_eq!(config.training.seed, 10);
        let re = config.resolve(Some(40));
        assert_eq!(re.training.seed, 41);
        assert_ne!(config_hash(&config), config_hash(&re));
        assert_eq!(config_hash(&config), config_hash(&config.resolve(None)));
    }

    #[test]
    fn config_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = shortcut_experiment(3);
        std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, config);
        // Mode labels match their serialized names.
        for mode in ModeSpec::all() {
            let json = serde_json::to_string(&mode).unwrap();
            assert_eq!(json, format!("\"{}\"", mode.label()));
            assert_eq!(ModeSpec::parse(mode.label()).unwrap(), mode);
        }
    }

    #[test]
    fn prepared_backdoor_learns_and_probes_separate() {
        let prepared = prepare(&tiny_backdoor_experiment(11)).unwrap();
        let report = prepared.train_report.as_ref().unwrap();
        assert!(report.final_accuracy > 0.9, "training accuracy {}", report.final_accuracy);
        let bank = prepared.bank.as_ref().unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.layer(), 1);
        let probe = &prepared.probes["artifact-0"];
        assert!(probe.holdout_accuracy > 0.9, "probe holdout {}", probe.holdout_accuracy);
        assert_eq!(prepared.class_map["artifact-0"], BTreeSet::from([1]));
    }

    #[test]
    fn evaluation_is_deterministic_per_seed() {
        let config = tiny_backdoor_experiment(11);
        let a = evaluate_all(&prepare(&config).unwrap()).unwrap();
        let b = evaluate_all(&prepare(&config).unwrap()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let csv = eval_reports_csv(&a);
        assert_eq!(csv, eval_reports_csv(&b));
        assert_eq!(csv.lines().count(), a.len() + 1);
        assert!(csv.starts_with("mode,n_clean,"));
    }

    #[test]
    fn sweep_row_layout_covers_every_k_and_mode() {
        let mut config = shortcut_experiment(2);
        if let DatasetSpec::Shortcut { synth } = &mut config.dataset {
            synth.samples_per_class = 60;
            synth.artifact_count = 3;
            synth.input_dim = 16;
        }
        config.training.epochs = 40;
        config.cav.n_pairs = 20;
        config.modes = vec![ModeSpec::Vanilla, ModeSpec::Pclarc, ModeSpec::RclarcBoth];
        let config = config.resolve(None);
        let prepared = prepare(&config).unwrap();
        let report = run_sweep(&prepared).unwrap();
        assert_eq!(report.rows.len(), 4 * 3);
        // k = 0 rows are identical across modes (no bank, pure vanilla).
        let k0: Vec<&SweepRow> = report.rows.iter().filter(|r| r.k == 0).collect();
        assert!(k0.windows(2).all(|w| {
            w[0].accuracy_clean == w[1].accuracy_clean
                && w[0].accuracy_artifact == w[1].accuracy_artifact
        }));
        let csv = sweep_csv(&report);
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn exports_write_well_formed_tables() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&tiny_backdoor_experiment(5)).unwrap();
        let hist = dir.path().join("hist.csv");
        export_histograms(&prepared, &hist).unwrap();
        let text = std::fs::read_to_string(&hist).unwrap();
        assert!(text.starts_with("concept_id,sample_id,label,group,activation\n"));
        assert!(text.lines().skip(1).all(|l| l.starts_with("artifact-0,")));
        assert!(text.lines().any(|l| l.contains(",artifact,")));
        assert!(text.lines().any(|l| l.contains(",clean,")));

        let cosines = dir.path().join("cosines.csv");
        export_class_cosines(&prepared, &cosines).unwrap();
        let text = std::fs::read_to_string(&cosines).unwrap();
        // One row per (concept, class) pair plus the header.
        assert_eq!(text.lines().count(), 3);
    }
}
