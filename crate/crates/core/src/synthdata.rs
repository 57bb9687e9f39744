//! Controlled datasets with known, masked artifacts.
//!
//! Three generators cover the experiment families: a 3-d four-cluster toy
//! problem whose geometry makes correction side effects visible, a backdoor
//! dataset (artifact plus label flip onto a target class), and a shortcut
//! dataset (several artifacts correlated with one class, labels untouched).
//! Every sample records which artifacts it carries and which split it
//! belongs to, and generation order is fully documented so a seed pins the
//! dataset bit-for-bit.
//!
//! Artifacts are additive block offsets: sample plus `magnitude * direction`
//! where the direction's support is exactly the artifact's coordinate mask.
//! Coordinates outside the mask always equal the clean counterfactual.

use std::collections::BTreeSet;
use std::io::{BufRead, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::ArtifactMask;
use crate::concepts::{ConceptError, PairedSet};
use crate::linalg::{MathError, Matrix, Vector};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset config: {0}")]
    ConfigError(String),
    #[error("unknown artifact id {0}")]
    ConceptUnknown(String),
    #[error("not enough clean host-class samples: need {needed}, have {available}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("dataset file {path}: {detail}")]
    BadFile { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type SynthResult<T> = Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestArtifact,
}

/// Where an artifact lives and which class it rides on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub id: String,
    pub mask: ArtifactMask,
    /// Unit offset direction, zero outside the mask.
    pub direction: Vector,
    pub magnitude: f64,
    /// Class whose training samples carry the artifact.
    pub host_class: usize,
    /// Classes the class condition associates with the artifact.
    pub associated_classes: BTreeSet<usize>,
}

impl ArtifactSpec {
    /// `sample + magnitude * direction`.
    pub fn apply(&self, sample: &Vector) -> SynthResult<Vector> {
        Ok(sample.add(&self.direction.scale(self.magnitude))?)
    }
}

/// Sample matrix plus labels, artifact flags, and split assignment. Sample
/// ids are the row indices.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub artifact_flags: Vec<BTreeSet<String>>,
    pub splits: Vec<Split>,
    pub artifacts: Vec<ArtifactSpec>,
    pub n_classes: usize,
    /// Pre-artifact counterfactuals, present for generated datasets.
    pub clean_base: Option<Matrix>,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.samples.n_rows()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.n_cols()
    }

    pub fn sample(&self, i: usize) -> Vector {
        self.samples.row_vector(i)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn is_clean(&self, i: usize) -> bool {
        self.artifact_flags[i].is_empty()
    }

    pub fn artifact_spec(&self, id: &str) -> SynthResult<&ArtifactSpec> {
        self.artifacts
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| SynthError::ConceptUnknown(id.to_string()))
    }

    /// Train-split samples flagged with the artifact.
    pub fn positives_of(&self, id: &str) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.splits[i] == Split::Train && self.artifact_flags[i].contains(id))
            .collect()
    }

    /// Train-split samples of the artifact's host class carrying no artifact
    /// at all: the clean pool CAV anchors and probes sample negatives from.
    pub fn clean_host_pool(&self, id: &str) -> SynthResult<Vec<usize>> {
        let spec = self.artifact_spec(id)?;
        Ok((0..self.n())
            .filter(|&i| {
                self.splits[i] == Split::Train
                    && self.labels[i] == spec.host_class
                    && self.is_clean(i)
            })
            .collect())
    }

    /// Train-split samples not flagged with the artifact (any class).
    pub fn negatives_of(&self, id: &str) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.splits[i] == Split::Train && !self.artifact_flags[i].contains(id))
            .collect()
    }

    pub fn concept_ids(&self) -> Vec<String> {
        self.artifacts.iter().map(|a| a.id.clone()).collect()
    }
}

/// Knobs for the backdoor and shortcut generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    /// Train-pool size per class (a seeded 10% of the pool becomes `val`).
    pub samples_per_class: usize,
    pub artifact_count: usize,
    pub artifact_magnitude: f64,
    /// Fraction of host-class train samples that receive artifacts.
    pub poison_fraction: f64,
    /// Fraction of the poisoned samples whose label flips to the target.
    pub label_flip_fraction: f64,
    pub seed: u64,
}

const CLASS_SEPARATION: f64 = 4.0;
const ARTIFACT_BLOCK_WIDTH: usize = 2;
const VAL_FRACTION: f64 = 0.1;
/// Fixed evaluation protocol: 100 clean and 100 artifact-bearing test
/// samples per class, freshly drawn.
pub const TEST_PER_CLASS: usize = 100;

impl SynthConfig {
    fn validate(&self) -> SynthResult<()> {
        if self.n_classes < 2 {
            return Err(SynthError::ConfigError("need at least 2 classes".into()));
        }
        if self.samples_per_class < 10 {
            return Err(SynthError::ConfigError("need at least 10 samples per class".into()));
        }
        if self.artifact_count == 0 {
            return Err(SynthError::ConfigError("need at least one artifact".into()));
        }
        if self.artifact_count > 64 {
            return Err(SynthError::ConfigError("at most 64 artifacts supported".into()));
        }
        let needed = self.n_classes + ARTIFACT_BLOCK_WIDTH * self.artifact_count;
        if self.input_dim < needed {
            return Err(SynthError::ConfigError(format!(
                "input_dim {} too small: {} classes plus {} artifact blocks of width {} need {}",
                self.input_dim,
                self.n_classes,
                self.artifact_count,
                ARTIFACT_BLOCK_WIDTH,
                needed
            )));
        }
        for (name, v) in
            [("poison_fraction", self.poison_fraction), ("label_flip_fraction", self.label_flip_fraction)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::ConfigError(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.artifact_magnitude > 0.0) || !self.artifact_magnitude.is_finite() {
            return Err(SynthError::ConfigError(format!(
                "artifact_magnitude {} must be positive",
                self.artifact_magnitude
            )));
        }
        Ok(())
    }

    /// Artifact `index` occupies a 2-wide block after the class coordinates,
    /// offset in the direction `(1, 1)/sqrt(2)` within the block.
    fn artifact_spec(&self, index: usize, host_class: usize, associated: BTreeSet<usize>) -> ArtifactSpec {
        let start = self.n_classes + ARTIFACT_BLOCK_WIDTH * index;
        let mut direction = vec![0.0; self.input_dim];
        let component = 1.0 / (ARTIFACT_BLOCK_WIDTH as f64).sqrt();
        for d in 0..ARTIFACT_BLOCK_WIDTH {
            direction[start + d] = component;
        }
        ArtifactSpec {
            id: format!("artifact-{index}"),
            mask: ArtifactMask::from_slice(
                &(start..start + ARTIFACT_BLOCK_WIDTH).collect::<Vec<_>>(),
            )
            .expect("non-empty mask"),
            direction: Vector::new(direction).expect("finite"),
            magnitude: self.artifact_magnitude,
            host_class,
            associated_classes: associated,
        }
    }
}

/// Standard-normal sample around the class mean `CLASS_SEPARATION * e_class`.
fn draw_class_sample(rng: &mut SplitMix64, config: &SynthConfig, class: usize) -> Vec<f64> {
    let mut values = Vec::with_capacity(config.input_dim);
    for d in 0..config.input_dim {
        let mean = if d == class { CLASS_SEPARATION } else { 0.0 };
        values.push(mean + rng.next_normal());
    }
    values
}

struct Builder {
    rows: Vec<Vec<f64>>,
    base_rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    flags: Vec<BTreeSet<String>>,
    splits: Vec<Split>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            rows: Vec::new(),
            base_rows: Vec::new(),
            labels: Vec::new(),
            flags: Vec::new(),
            splits: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<f64>, label: usize, split: Split) -> usize {
        self.rows.push(row.clone());
        self.base_rows.push(row);
        self.labels.push(label);
        self.flags.push(BTreeSet::new());
        self.splits.push(split);
        self.rows.len() - 1
    }

    fn add_artifact(&mut self, index: usize, spec: &ArtifactSpec) {
        for (d, u) in spec.direction.as_slice().iter().enumerate() {
            if *u != 0.0 {
                self.rows[index][d] += spec.magnitude * u;
            }
        }
        self.flags[index].insert(spec.id.clone());
    }

    fn finish(
        self,
        artifacts: Vec<ArtifactSpec>,
        n_classes: usize,
        input_dim: usize,
    ) -> SynthResult<LabeledDataset> {
        let n = self.rows.len();
        let flat: Vec<f64> = self.rows.into_iter().flatten().collect();
        let base: Vec<f64> = self.base_rows.into_iter().flatten().collect();
        Ok(LabeledDataset {
            samples: Matrix::new(n, input_dim, flat)?,
            labels: self.labels,
            artifact_flags: self.flags,
            splits: self.splits,
            artifacts,
            n_classes,
            clean_base: Some(Matrix::new(n, input_dim, base)?),
        })
    }
}

/// Rounding used for all "fraction of a set" counts.
fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Draws `count` distinct artifact indices (ascending) after drawing the
/// count uniformly from `1..=artifact_count`: the rule for every
/// artifact-bearing shortcut sample.
fn draw_artifact_subset(rng: &mut SplitMix64, artifact_count: usize) -> Vec<usize> {
    let count = 1 + rng.next_below(artifact_count as u64) as usize;
    rng.choose_distinct(artifact_count, count)
}

/// Backdoor dataset: the single artifact lands on `poison_fraction` of
/// class 0's train pool and `label_flip_fraction` of those flip to class 1.
/// Test sets are fresh: `TEST_PER_CLASS` clean and `TEST_PER_CLASS`
/// artifact-bearing (true-labeled) samples per class.
///
/// Draw order from one stream seeded `config.seed`: train-pool features
/// (class-major), poison selection, flip selection, val selection, clean
/// test features, artifact test features.
pub fn gen_backdoor(config: &SynthConfig) -> SynthResult<LabeledDataset> {
    config.validate()?;
    if config.artifact_count != 1 {
        return Err(SynthError::ConfigError(
            "backdoor generation uses exactly one artifact".into(),
        ));
    }
    let host_class = 0usize;
    let target_class = 1usize;
    let spec = config.artifact_spec(0, host_class, BTreeSet::from([target_class]));

    let mut rng = SplitMix64::new(config.seed);
    let mut builder = Builder::new();

    for class in 0..config.n_classes {
        for _ in 0..config.samples_per_class {
            let row = draw_class_sample(&mut rng, config, class);
            builder.push(row, class, Split::Train);
        }
    }

    // Host-class pool rows are 0..samples_per_class.
    let mut host_rows: Vec<usize> = (0..config.samples_per_class).collect();
    rng.shuffle(&mut host_rows);
    let n_poisoned = round_count(config.poison_fraction, config.samples_per_class);
    let mut poisoned: Vec<usize> = host_rows[..n_poisoned].to_vec();
    poisoned.sort_unstable();
    for &row in &poisoned {
        builder.add_artifact(row, &spec);
    }

    let mut flip_order = poisoned.clone();
    rng.shuffle(&mut flip_order);
    let n_flipped = round_count(config.label_flip_fraction, poisoned.len());
    let mut flipped: Vec<usize> = flip_order[..n_flipped].to_vec();
    flipped.sort_unstable();
    for &row in &flipped {
        builder.labels[row] = target_class;
    }

    assign_val_split(&mut rng, &mut builder);
    push_test_sets(&mut rng, config, &mut builder, &[spec.clone()], BackdoorTest)?;

    builder.finish(vec![spec], config.n_classes, config.input_dim)
}

/// Shortcut dataset: `poison_fraction` of class 0's train pool receive a
/// uniform-random count (1..=artifact_count) of distinct artifacts; labels
/// never flip unless configured. The artifact test set places the same
/// random artifact subsets on every class.
///
/// Draw order from one stream seeded `config.seed`: train-pool features
/// (class-major), poison selection, per-poisoned-sample artifact subsets
/// (ascending row order), flip selection, val selection, clean test
/// features, artifact test features with per-sample subsets.
pub fn gen_shortcut(config: &SynthConfig) -> SynthResult<LabeledDataset> {
    config.validate()?;
    let host_class = 0usize;
    let specs: Vec<ArtifactSpec> = (0..config.artifact_count)
        .map(|i| config.artifact_spec(i, host_class, BTreeSet::from([host_class])))
        .collect();

    let mut rng = SplitMix64::new(config.seed);
    let mut builder = Builder::new();

    for class in 0..config.n_classes {
        for _ in 0..config.samples_per_class {
            let row = draw_class_sample(&mut rng, config, class);
            builder.push(row, class, Split::Train);
        }
    }

    let mut host_rows: Vec<usize> = (0..config.samples_per_class).collect();
    rng.shuffle(&mut host_rows);
    let n_poisoned = round_count(config.poison_fraction, config.samples_per_class);
    let mut poisoned: Vec<usize> = host_rows[..n_poisoned].to_vec();
    poisoned.sort_unstable();
    for &row in &poisoned {
        for artifact in draw_artifact_subset(&mut rng, config.artifact_count) {
            builder.add_artifact(row, &specs[artifact]);
        }
    }

    let mut flip_order = poisoned.clone();
    rng.shuffle(&mut flip_order);
    let n_flipped = round_count(config.label_flip_fraction, poisoned.len());
    for &row in &flip_order[..n_flipped] {
        builder.labels[row] = (builder.labels[row] + 1) % config.n_classes;
    }

    assign_val_split(&mut rng, &mut builder);
    push_test_sets(&mut rng, config, &mut builder, &specs, ShortcutTest)?;

    builder.finish(specs, config.n_classes, config.input_dim)
}

/// Seeded reassignment of 10% of the train pool to the validation split.
fn assign_val_split(rng: &mut SplitMix64, builder: &mut Builder) {
    let pool: Vec<usize> = (0..builder.splits.len()).collect();
    let mut order = pool;
    rng.shuffle(&mut order);
    let n_val = round_count(VAL_FRACTION, order.len());
    for &row in &order[..n_val] {
        builder.splits[row] = Split::Val;
    }
}

struct BackdoorTest;
struct ShortcutTest;

trait TestProtocol {
    /// Which artifacts an artifact-test sample receives.
    fn subsets(&self, rng: &mut SplitMix64, n_artifacts: usize) -> Vec<usize>;
}

impl TestProtocol for BackdoorTest {
    fn subsets(&self, _rng: &mut SplitMix64, _n_artifacts: usize) -> Vec<usize> {
        vec![0]
    }
}

impl TestProtocol for ShortcutTest {
    fn subsets(&self, rng: &mut SplitMix64, n_artifacts: usize) -> Vec<usize> {
        draw_artifact_subset(rng, n_artifacts)
    }
}

fn push_test_sets<P: TestProtocol>(
    rng: &mut SplitMix64,
    config: &SynthConfig,
    builder: &mut Builder,
    specs: &[ArtifactSpec],
    protocol: P,
) -> SynthResult<()> {
    for class in 0..config.n_classes {
        for _ in 0..TEST_PER_CLASS {
            let row = draw_class_sample(rng, config, class);
            builder.push(row, class, Split::Test);
        }
    }
    for class in 0..config.n_classes {
        for _ in 0..TEST_PER_CLASS {
            let row = draw_class_sample(rng, config, class);
            let index = builder.push(row, class, Split::TestArtifact);
            for artifact in protocol.subsets(rng, specs.len()) {
                builder.add_artifact(index, &specs[artifact]);
            }
        }
    }
    Ok(())
}

/// Four Gaussian clusters in 3-d: a clean cluster and two artifact clusters
/// of class 0, plus a class-1 cluster. Both artifact clusters sit at high
/// `z` (coordinate 2), which is the artifact mask. 500 samples per cluster;
/// the first 400 of each are `train`, the last 100 `test`. Labels: clusters
/// 0..2 are class 0, cluster 3 is class 1.
///
/// Cluster means (covariance): (0,8,0) (I), (1,8,8) (I), (1,1,8) (I),
/// (6,1,1) (1.8 I). Draw order: cluster-major, sample-major, coordinate-major
/// from one stream seeded `seed`.
pub fn gen_toy3d(seed: u64) -> LabeledDataset {
    const PER_CLUSTER: usize = 500;
    const TRAIN_PER_CLUSTER: usize = 400;
    let clusters: [([f64; 3], f64, usize, Option<&str>); 4] = [
        ([0.0, 8.0, 0.0], 1.0, 0, None),
        ([1.0, 8.0, 8.0], 1.0, 0, Some("artifact-1")),
        ([1.0, 1.0, 8.0], 1.0, 0, Some("artifact-2")),
        ([6.0, 1.0, 1.0], 1.8, 1, None),
    ];
    let artifacts: Vec<ArtifactSpec> = ["artifact-1", "artifact-2"]
        .iter()
        .map(|id| ArtifactSpec {
            id: (*id).to_string(),
            mask: ArtifactMask::from_slice(&[2]).expect("non-empty"),
            direction: Vector::from_slice(&[0.0, 0.0, 1.0]).expect("finite"),
            magnitude: 8.0,
            host_class: 0,
            associated_classes: BTreeSet::from([0usize]),
        })
        .collect();

    let mut rng = SplitMix64::new(seed);
    let mut builder = Builder::new();
    for (mean, variance, label, flag) in clusters {
        let scale = variance.sqrt();
        for s in 0..PER_CLUSTER {
            let row: Vec<f64> =
                mean.iter().map(|m| m + scale * rng.next_normal()).collect();
            let split = if s < TRAIN_PER_CLUSTER { Split::Train } else { Split::Test };
            let index = builder.push(row, label, split);
            if let Some(id) = flag {
                builder.flags[index].insert(id.to_string());
            }
        }
    }
    // The artifact clusters are drawn directly (not offset counterfactuals),
    // so no clean base exists for them.
    let mut ds = builder.finish(artifacts, 2, 3).expect("static dims are valid");
    ds.clean_base = None;
    ds
}

/// Paired clean/artifact input samples for one artifact: `n_pairs` clean
/// samples drawn (seeded, without replacement) from the artifact's clean
/// host pool, each paired with itself plus the artifact offset. The same
/// seed draws the same clean ids for every artifact sharing a host pool,
/// which keeps joint anchors well-defined.
pub struct GeneratedPairs {
    pub pairs: PairedSet,
    /// Dataset ids of the clean halves.
    pub clean_ids: Vec<u64>,
}

pub fn gen_paired(
    dataset: &LabeledDataset,
    concept_id: &str,
    n_pairs: usize,
    seed: u64,
) -> SynthResult<GeneratedPairs> {
    if n_pairs == 0 {
        return Err(SynthError::ConfigError("n_pairs must be positive".into()));
    }
    let spec = dataset.artifact_spec(concept_id)?.clone();
    let pool = dataset.clean_host_pool(concept_id)?;
    if pool.len() < n_pairs {
        return Err(SynthError::PoolTooSmall { needed: n_pairs, available: pool.len() });
    }
    let mut rng = SplitMix64::new(seed);
    let chosen = rng.choose_distinct(pool.len(), n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut ids = Vec::with_capacity(n_pairs);
    for pick in chosen {
        let row = pool[pick];
        let clean = dataset.sample(row);
        let poisoned = spec.apply(&clean)?;
        pairs.push((clean, poisoned));
        ids.push(row as u64);
    }
    Ok(GeneratedPairs { pairs: PairedSet::new(pairs)?, clean_ids: ids })
}

// --- File formats -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    id: u64,
    features: Vec<f64>,
    label: usize,
    artifacts: Vec<String>,
    split: Split,
}

/// Companion document describing how a dataset file was generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub kind: String,
    pub seed: u64,
    pub n_classes: usize,
    pub input_dim: usize,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SynthConfig>,
    pub artifacts: Vec<ArtifactSpec>,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub test_artifact: usize,
    pub flagged_train: usize,
}

const DATASET_FORMAT: &str = "rclarc-dataset-v1";

impl LabeledDataset {
    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.split_indices(Split::Train).len(),
            val: self.split_indices(Split::Val).len(),
            test: self.split_indices(Split::Test).len(),
            test_artifact: self.split_indices(Split::TestArtifact).len(),
            flagged_train: (0..self.n())
                .filter(|&i| self.splits[i] == Split::Train && !self.is_clean(i))
                .count(),
        }
    }

    pub fn manifest(&self, kind: &str, seed: u64, config: Option<&SynthConfig>) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            kind: kind.to_string(),
            seed,
            n_classes: self.n_classes,
            input_dim: self.input_dim(),
            n_samples: self.n(),
            config: config.cloned(),
            artifacts: self.artifacts.clone(),
            counts: self.split_counts(),
        }
    }

    /// Writes one JSON object per sample. Ids equal row order.
    pub fn save_jsonl(&self, path: &Path) -> SynthResult<()> {
        let file = std::fs::File::create(path)
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
        let mut out = std::io::BufWriter::new(file);
        for i in 0..self.n() {
            let row = SampleRow {
                id: i as u64,
                features: self.sample(i).as_slice().to_vec(),
                label: self.labels[i],
                artifacts: self.artifact_flags[i].iter().cloned().collect(),
                split: self.splits[i],
            };
            let line = serde_json::to_string(&row).expect("row serializes");
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }

    pub fn save_manifest(
        &self,
        path: &Path,
        kind: &str,
        seed: u64,
        config: Option<&SynthConfig>,
    ) -> SynthResult<()> {
        let manifest = self.manifest(kind, seed, config);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(path, format!("{json}\n"))
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })
    }

    pub fn load(jsonl_path: &Path, manifest_path: &Path) -> SynthResult<LabeledDataset> {
        let manifest_text = std::fs::read_to_string(manifest_path)
            .map_err(|source| SynthError::Io { path: manifest_path.display().to_string(), source })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&manifest_text).map_err(|e| SynthError::BadFile {
                path: manifest_path.display().to_string(),
                detail: e.to_string(),
            })?;
        if manifest.format != DATASET_FORMAT {
            return Err(SynthError::BadFile {
                path: manifest_path.display().to_string(),
                detail: format!("unknown format marker {:?}", manifest.format),
            });
        }
        let file = std::fs::File::open(jsonl_path)
            .map_err(|source| SynthError::Io { path: jsonl_path.display().to_string(), source })?;
        let reader = std::io::BufReader::new(file);
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        let mut flags = Vec::new();
        let mut splits = Vec::new();
        let mut count = 0usize;
        for (line_no, line) in reader.lines().enumerate() {
            let line = line
                .map_err(|source| SynthError::Io { path: jsonl_path.display().to_string(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SampleRow = serde_json::from_str(&line).map_err(|e| SynthError::BadFile {
                path: jsonl_path.display().to_string(),
                detail: format!("line {}: {e}", line_no + 1),
            })?;
            if row.id != count as u64 {
                return Err(SynthError::BadFile {
                    path: jsonl_path.display().to_string(),
                    detail: format!("line {}: id {} out of order", line_no + 1, row.id),
                });
            }
            if row.features.len() != manifest.input_dim {
                return Err(SynthError::BadFile {
                    path: jsonl_path.display().to_string(),
                    detail: format!("line {}: expected {} features", line_no + 1, manifest.input_dim),
                });
            }
            rows.extend_from_slice(&row.features);
            labels.push(row.label);
            flags.push(row.artifacts.into_iter().collect::<BTreeSet<String>>());
            splits.push(row.split);
            count += 1;
        }
        if count != manifest.n_samples {
            return Err(SynthError::BadFile {
                path: jsonl_path.display().to_string(),
                detail: format!("{} samples but manifest says {}", count, manifest.n_samples),
            });
        }
        Ok(LabeledDataset {
            samples: Matrix::new(count, manifest.input_dim, rows)?,
            labels,
            artifact_flags: flags,
            splits,
            artifacts: manifest.artifacts,
            n_classes: manifest.n_classes,
            clean_base: None,
        })
    }

    /// Flat CSV export for plotting: id, label, split, artifact flags
    /// (semicolon-joined), then one column per coordinate.
    pub fn export_csv(&self, path: &Path) -> SynthResult<()> {
        let mut text = String::new();
        text.push_str("id,label,split,artifacts");
        for d in 0..self.input_dim() {
            text.push_str(&format!(",x{d}"));
        }
        text.push('\n');
        for i in 0..self.n() {
            let split = match self.splits[i] {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
                Split::TestArtifact => "test_artifact",
            };
            let flags: Vec<String> = self.artifact_flags[i].iter().cloned().collect();
            text.push_str(&format!("{},{},{},{}", i, self.labels[i], split, flags.join(";")));
            for v in self.sample(i).as_slice() {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|source| SynthError::Io { path: path.display().to_string(), source })
    }
}
