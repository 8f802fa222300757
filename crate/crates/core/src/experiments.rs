//! Experiment presets, two-fold cross-validation runs, MAD metrics, error
//! histograms and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    extended_inputs, split_mix_zeta, split_sep_zeta, window_count, zeta_grid, Dataset, SplitSpec, WindowRef,
};
use crate::error::{Error, Result};
use crate::features::{FeatureNormalizer, Featurizer};
use crate::nn::{
    load_weights, predict_samples, save_weights, train_with_progress, CellKind, EpochStats, ModelSpec, ModelWeights, SampleSet, TrainConfig,
    WeightsHeader,
};
use crate::seed::derive_seed;
use crate::sim::{InputSignal, Trajectory};

/// Window stride of the reduced ("desk") runs: 141 windows per trajectory.
pub const DESK_STRIDE: usize = 50;
/// Mini-batch size of the reduced runs.
pub const DESK_BATCH_SIZE: usize = 2;
/// Step magnitudes of the generalization test.
pub const STEP_MAGNITUDES: [f64; 8] = [-10.0, -5.0, -2.0, -1.0, 1.0, 2.0, 5.0, 10.0];
pub const EXPERIMENT_IDS: [&str; 8] = ["Exp1", "Exp2", "Exp3", "Exp4", "Exp5", "Exp6a", "Exp6b", "Exp7"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Base,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SepZeta,
    MixZeta,
}

/// Time span of a trajectory. A window belongs to it when it lies entirely
/// inside, i.e. its start is in `[start_s, end_s − window duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

impl Interval {
    pub const FULL: Interval = Interval::new(0.0, 10.0);
    pub const EARLY: Interval = Interval::new(0.0, 3.0);
    pub const MIDDLE: Interval = Interval::new(3.0, 6.0);
    pub const LATE: Interval = Interval::new(6.0, 9.0);
    pub const END: Interval = Interval::new(7.0, 10.0);
    pub const PRESETS: [Interval; 4] = [Self::EARLY, Self::MIDDLE, Self::LATE, Self::END];

    pub const fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn label(&self) -> String {
        format!("{}-{}s", self.start_s, self.end_s)
    }

    pub fn contains(&self, start: usize, window_len: usize, fs: f64) -> bool {
        let first = self.start_s * fs;
        let last = self.end_s * fs;
        let eps = 1e-6;
        start as f64 >= first - eps && (start + window_len - 1) as f64 <= last + eps
    }
}

impl std::str::FromStr for Interval {
    type Err = Error;

    /// Parses `a-b` (seconds), with an optional trailing `s`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("interval must look like 3-6, got {s:?}"));
        let body = s.trim().trim_end_matches('s');
        let (a, b) = body.split_once('-').ok_or_else(bad)?;
        let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if !(a >= 0.0 && b > a) {
            return Err(bad());
        }
        Ok(Self::new(a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputFilter {
    All,
    Steps,
    /// Inputs whose label (`step+1`, `ramp1`, `sine10@2hz`, …) is listed.
    Labels { labels: Vec<String> },
}

impl InputFilter {
    pub fn matches(&self, input: &InputSignal) -> bool {
        match self {
            InputFilter::All => true,
            InputFilter::Steps => input.is_step(),
            InputFilter::Labels { labels } => labels.iter().any(|l| *l == input.label()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InputFilter::All => "all".into(),
            InputFilter::Steps => "step".into(),
            InputFilter::Labels { labels } => labels.join("+"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub dataset: DatasetKind,
    pub split: SplitMode,
    pub cell_kind: CellKind,
    pub train: TrainConfig,
    pub stride: usize,
    /// z-score features with statistics of each fold's training split.
    pub normalize_features: bool,
    /// BiLSTM with 128 units per direction (256 in total) instead of 256 per direction.
    pub split_bilstm_hidden: bool,
    pub eval_filter: InputFilter,
    pub eval_interval: Interval,
    /// Evaluation-only experiment reusing the models of another one.
    pub reuse_models_of: Option<String>,
}

impl ExperimentSpec {
    /// Full-scale configuration of a named experiment.
    pub fn preset(id: &str) -> Result<Self> {
        let (split, cell) = match id {
            "Exp1" => (SplitMode::SepZeta, CellKind::Gru),
            "Exp2" => (SplitMode::SepZeta, CellKind::Lstm),
            "Exp3" => (SplitMode::SepZeta, CellKind::BiLstm),
            "Exp4" => (SplitMode::MixZeta, CellKind::Gru),
            "Exp5" => (SplitMode::MixZeta, CellKind::Lstm),
            "Exp6a" | "Exp6b" | "Exp7" => (SplitMode::MixZeta, CellKind::BiLstm),
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown experiment {id:?}, expected one of {}",
                    EXPERIMENT_IDS.join(", ")
                )))
            }
        };
        let mut spec = Self {
            id: id.to_string(),
            dataset: DatasetKind::Base,
            split,
            cell_kind: cell,
            train: TrainConfig::default(),
            stride: 1,
            normalize_features: true,
            split_bilstm_hidden: false,
            eval_filter: InputFilter::All,
            eval_interval: Interval::FULL,
            reuse_models_of: None,
        };
        match id {
            "Exp6b" => {
                spec.eval_filter = InputFilter::Steps;
                spec.eval_interval = Interval::MIDDLE;
                spec.reuse_models_of = Some("Exp6a".into());
            }
            "Exp7" => {
                spec.dataset = DatasetKind::Extended;
                spec.train = TrainConfig::long_schedule();
            }
            _ => {}
        }
        Ok(spec)
    }

    /// Reduced run: window stride 50 and small mini-batches.
    pub fn desk(mut self) -> Self {
        self.stride = DESK_STRIDE;
        self.train.batch_size = DESK_BATCH_SIZE;
        self
    }

    pub fn model_spec(&self) -> ModelSpec {
        let spec = ModelSpec::standard(self.cell_kind);
        if self.split_bilstm_hidden {
            spec.with_split_hidden(256)
        } else {
            spec
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        self.train.validate()?;
        self.model_spec().validate()
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Mean absolute deviation `mean |p − t|`.
pub fn mad(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySelection("MAD of an empty set".into()));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Feature tensors of a set of windows, featurized once and shared by both folds.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub windows: Vec<WindowRef>,
    pub samples: SampleSet,
    index: HashMap<WindowRef, usize>,
}

impl FeatureStore {
    pub fn build(dataset: &Dataset, windows: &[WindowRef], featurizer: &Featurizer) -> Result<Self> {
        let steps = featurizer.steps();
        let feats = windows
            .par_iter()
            .map(|w| {
                let (u, y) = dataset.window_slices(w);
                featurizer.featurize_pair(u, y)
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = feats.first().map_or(0, |f| f.rows());
        let mut features = Array3::<f32>::zeros((windows.len(), rows, steps));
        for (mut dst, f) in features.outer_iter_mut().zip(&feats) {
            dst.zip_mut_with(&f.values, |d, &v| *d = v as f32);
        }
        let targets = windows.iter().map(|w| dataset.zeta_of(w) as f32).collect();
        Ok(Self {
            windows: windows.to_vec(),
            samples: SampleSet::new(features, targets)?,
            index: windows.iter().enumerate().map(|(i, w)| (*w, i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn indices(&self, windows: &[WindowRef]) -> Result<Vec<usize>> {
        windows
            .iter()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::EmptySelection(format!("window {w:?} was not featurized")))
            })
            .collect()
    }

    /// The listed windows, normalized when a normalizer is given.
    pub fn select(&self, windows: &[WindowRef], normalizer: Option<&FeatureNormalizer>) -> Result<SampleSet> {
        let mut set = self.samples.subset(&self.indices(windows)?);
        if let Some(n) = normalizer {
            for x in set.features.outer_iter_mut() {
                n.apply(x);
            }
        }
        Ok(set)
    }
}

/// One window's prediction, kept for histograms and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub trajectory: usize,
    pub start: usize,
    pub window_len: usize,
    pub input: InputSignal,
    pub zeta: f64,
    pub fold: u8,
    pub predicted: f64,
}

impl Prediction {
    pub fn abs_error(&self) -> f64 {
        (self.predicted - self.zeta).abs()
    }
}

/// A trained fold model with everything needed to evaluate it again.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: u8,
    pub weights: ModelWeights<f32>,
    pub header: WeightsHeader,
    pub split: SplitSpec,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: u8,
    pub train_mad: Option<f64>,
    pub test_mad: f64,
    pub train_windows: usize,
    pub test_windows: usize,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramCell {
    pub mean_abs_err: f64,
    pub count: usize,
}

/// Mean absolute ζ error per (ζ, input) cell for windows inside one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram2D {
    pub interval: Interval,
    pub input_set: String,
    pub zetas: Vec<f64>,
    pub inputs: Vec<String>,
    /// `cells[zeta][input]`, `None` when no window fell into the cell.
    pub cells: Vec<Vec<Option<HistogramCell>>>,
}

impl ErrorHistogram2D {
    pub fn total_count(&self) -> usize {
        self.cells.iter().flatten().flatten().map(|c| c.count).sum()
    }

    /// Count-weighted mean of the cells.
    pub fn weighted_mad(&self) -> Option<f64> {
        let n = self.total_count();
        (n > 0).then(|| {
            self.cells
                .iter()
                .flatten()
                .flatten()
                .map(|c| c.mean_abs_err * c.count as f64)
                .sum::<f64>()
                / n as f64
        })
    }

    /// Header row of input labels, first column ζ, cells `mean_abs_err:count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("zeta");
        for i in &self.inputs {
            out.push(',');
            out.push_str(i);
        }
        out.push('\n');
        for (z, row) in self.zetas.iter().zip(&self.cells) {
            out.push_str(&format!("{z}"));
            for c in row {
                out.push(',');
                if let Some(c) = c {
                    out.push_str(&format!("{:.6}:{}", c.mean_abs_err, c.count));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn same_zeta(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Aggregates predictions of windows inside `interval` that pass `filter`.
pub fn error_histogram(
    predictions: &[Prediction],
    fs: f64,
    interval: Interval,
    filter: &InputFilter,
) -> Result<ErrorHistogram2D> {
    let selected: Vec<&Prediction> = predictions
        .iter()
        .filter(|p| filter.matches(&p.input) && interval.contains(p.start, p.window_len, fs))
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no {} windows in {}",
            filter.label(),
            interval.label()
        )));
    }
    let mut zetas: Vec<f64> = Vec::new();
    let mut inputs: Vec<InputSignal> = Vec::new();
    for p in &selected {
        if !zetas.iter().any(|&z| same_zeta(z, p.zeta)) {
            zetas.push(p.zeta);
        }
        if !inputs.contains(&p.input) {
            inputs.push(p.input);
        }
    }
    zetas.sort_by(f64::total_cmp);
    let catalog = extended_inputs();
    let order = |i: &InputSignal| catalog.iter().position(|c| c == i).unwrap_or(usize::MAX);
    inputs.sort_by(|a, b| order(a).cmp(&order(b)).then(a.label().cmp(&b.label())));

    let mut sums = vec![vec![(0.0f64, 0usize); inputs.len()]; zetas.len()];
    for p in &selected {
        let zi = zetas.iter().position(|&z| same_zeta(z, p.zeta)).expect("collected above");
        let ii = inputs.iter().position(|i| *i == p.input).expect("collected above");
        sums[zi][ii].0 += p.abs_error();
        sums[zi][ii].1 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|(s, n)| {
                    (n > 0).then(|| HistogramCell {
                        mean_abs_err: s / n as f64,
                        count: n,
                    })
                })
                .collect()
        })
        .collect();
    Ok(ErrorHistogram2D {
        interval,
        input_set: filter.label(),
        zetas,
        inputs: inputs.iter().map(InputSignal::label).collect(),
        cells,
    })
}

/// MAD over predictions of windows inside `interval` that pass `filter`.
pub fn interval_eval(predictions: &[Prediction], fs: f64, filter: &InputFilter, interval: Interval) -> Result<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) = predictions
        .iter()
        .filter(|p| filter.matches(&p.input) && interval.contains(p.start, p.window_len, fs))
        .map(|p| (p.predicted, p.zeta))
        .unzip();
    if p.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no {} windows in {}",
            filter.label(),
            interval.label()
        )));
    }
    mad(&p, &t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    pub config_hash: String,
    pub folds: Vec<FoldReport>,
    /// Fold average; absent for evaluation-only experiments.
    pub train_mad: Option<f64>,
    /// Fold average over all test windows.
    pub test_mad: f64,
    /// MAD restricted to the experiment's evaluation filter and interval.
    pub filtered_test_mad: f64,
    pub eval_filter: InputFilter,
    pub eval_interval: Interval,
    pub histograms: Vec<ErrorHistogram2D>,
    pub test_predictions: Vec<Prediction>,
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: EvalReport,
    pub models: Vec<FoldModel>,
}

/// The split of `fold`. Its seed depends on the master seed only, so every
/// experiment with the same split mode sees the same partition.
pub fn fold_split(spec: &ExperimentSpec, dataset: &Dataset, windows: &[WindowRef], fold: u8, master_seed: u64) -> Result<SplitSpec> {
    let seed = derive_seed(master_seed, "split");
    match spec.split {
        SplitMode::SepZeta => split_sep_zeta(dataset, windows, fold, seed),
        SplitMode::MixZeta => split_mix_zeta(windows, seed, fold),
    }
}

fn predictions_for(
    dataset: &Dataset,
    store: &FeatureStore,
    model: &FoldModel,
    windows: &[WindowRef],
) -> Result<Vec<Prediction>> {
    let set = store.select(windows, model.header.normalizer.as_ref())?;
    let preds = predict_samples(&model.weights, &set, 256)?;
    Ok(windows
        .iter()
        .zip(preds)
        .map(|(w, p)| Prediction {
            trajectory: w.trajectory,
            start: w.start,
            window_len: w.len,
            input: dataset.input_of(w),
            zeta: dataset.zeta_of(w),
            fold: model.fold,
            predicted: f64::from(p),
        })
        .collect())
}

fn abs_mad(preds: &[Prediction]) -> Result<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.predicted, p.zeta)).unzip();
    mad(&p, &t)
}

/// Trains one model per fold. `on_epoch` receives `(fold, stats)`.
pub fn train_folds(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    store: &FeatureStore,
    master_seed: u64,
    mut on_epoch: impl FnMut(u8, &EpochStats),
) -> Result<Vec<FoldModel>> {
    spec.validate()?;
    let mut models = Vec::with_capacity(2);
    for fold in 1..=2u8 {
        let split = fold_split(spec, dataset, &store.windows, fold, master_seed)?;
        let normalizer = if spec.normalize_features {
            let idx = store.indices(&split.train)?;
            Some(FeatureNormalizer::fit(idx.iter().map(|&i| store.samples.sample(i)))?)
        } else {
            None
        };
        let train_set = store.select(&split.train, normalizer.as_ref())?;
        let val_set = store.select(&split.validation, normalizer.as_ref())?;
        let cfg = TrainConfig {
            seed: derive_seed(master_seed, &format!("{}/fold{fold}/train", spec.id)),
            ..spec.train.clone()
        };
        let model_spec = spec.model_spec();
        let outcome = train_with_progress(&model_spec, &cfg, &train_set, Some(&val_set), |s| on_epoch(fold, s))?;
        let mut header = WeightsHeader::new(model_spec);
        header.train_config = Some(cfg);
        header.normalizer = normalizer;
        header.data_fingerprint = Some(split_fingerprint(&split));
        header.model_id = format!("{}-fold{fold}-{}", spec.id, &spec.config_hash()[..8]);
        models.push(FoldModel {
            fold,
            weights: outcome.weights,
            header,
            split,
            history: outcome.history,
        });
    }
    Ok(models)
}

/// SHA-256 over the train/validation/test window lists.
pub fn split_fingerprint(split: &SplitSpec) -> String {
    let json = serde_json::to_vec(&(&split.train, &split.validation, &split.test)).expect("windows serialize");
    Sha256::digest(&json).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Evaluates fold models: train/test MAD per fold and histograms over the
/// test windows of both folds (each judged by its own fold's model).
pub fn evaluate_folds(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    store: &FeatureStore,
    models: &[FoldModel],
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::EmptySelection("no fold models to evaluate".into()));
    }
    let fs = dataset.manifest.fs;
    let eval_only = spec.reuse_models_of.is_some();
    let mut folds = Vec::new();
    let mut test_predictions = Vec::new();
    for m in models {
        let test = predictions_for(dataset, store, m, &m.split.test)?;
        let train_mad = if eval_only {
            None
        } else {
            Some(abs_mad(&predictions_for(dataset, store, m, &m.split.train)?)?)
        };
        folds.push(FoldReport {
            fold: m.fold,
            train_mad,
            test_mad: abs_mad(&test)?,
            train_windows: m.split.train.len(),
            test_windows: m.split.test.len(),
            history: m.history.clone(),
        });
        test_predictions.extend(test);
    }
    let n = folds.len() as f64;
    let train_mad = if eval_only {
        None
    } else {
        Some(folds.iter().filter_map(|f| f.train_mad).sum::<f64>() / n)
    };
    let test_mad = folds.iter().map(|f| f.test_mad).sum::<f64>() / n;
    let filtered_test_mad = interval_eval(&test_predictions, fs, &spec.eval_filter, spec.eval_interval)?;

    let mut histograms = Vec::new();
    let filters = match &spec.eval_filter {
        InputFilter::All => vec![InputFilter::All],
        other => vec![InputFilter::All, other.clone()],
    };
    for filter in &filters {
        for interval in std::iter::once(Interval::FULL).chain(Interval::PRESETS) {
            match error_histogram(&test_predictions, fs, interval, filter) {
                Ok(h) => histograms.push(h),
                Err(Error::EmptySelection(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EvalReport {
        experiment_id: spec.id.clone(),
        config_hash: spec.config_hash(),
        folds,
        train_mad,
        test_mad,
        filtered_test_mad,
        eval_filter: spec.eval_filter.clone(),
        eval_interval: spec.eval_interval,
        histograms,
        test_predictions,
    })
}

/// Featurizes the experiment's windows, trains both folds and evaluates them.
pub fn run_experiment(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    featurizer: &Featurizer,
    master_seed: u64,
    on_epoch: impl FnMut(u8, &EpochStats),
) -> Result<ExperimentRun> {
    check_dataset(spec, dataset)?;
    let windows = dataset.windows(spec.stride)?;
    let store = FeatureStore::build(dataset, &windows, featurizer)?;
    let models = train_folds(spec, dataset, &store, master_seed, on_epoch)?;
    let report = evaluate_folds(spec, dataset, &store, &models)?;
    Ok(ExperimentRun { report, models })
}

pub fn check_dataset(spec: &ExperimentSpec, dataset: &Dataset) -> Result<()> {
    let extended = spec.dataset == DatasetKind::Extended;
    if dataset.manifest.extended != extended {
        return Err(Error::SpecMismatch(format!(
            "{} needs the {} dataset",
            spec.id,
            if extended { "extended" } else { "base" }
        )));
    }
    Ok(())
}

const EXPERIMENT_FILE: &str = "experiment.json";

fn fold_file(fold: u8) -> String {
    format!("fold{fold}.dmw")
}

fn history_file(fold: u8) -> String {
    format!("fold{fold}.history.json")
}

/// Writes `experiment.json`, `fold<k>.dmw` and `fold<k>.history.json` into `dir`.
pub fn save_fold_models(spec: &ExperimentSpec, models: &[FoldModel], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(EXPERIMENT_FILE), &serde_json::to_vec_pretty(spec)?)?;
    for m in models {
        save_weights(&m.weights, &m.header, &dir.join(fold_file(m.fold)))?;
        write_atomic(&dir.join(history_file(m.fold)), &serde_json::to_vec_pretty(&m.history)?)?;
    }
    Ok(())
}

pub fn load_experiment_spec(dir: &Path) -> Result<ExperimentSpec> {
    Ok(serde_json::from_slice(&fs::read(dir.join(EXPERIMENT_FILE))?)?)
}

/// Loads fold models saved by [`save_fold_models`]. Each fold's split is
/// recomputed from `master_seed` and must match the fingerprint stored with
/// the model, so a model is never evaluated on windows it was trained on.
pub fn load_fold_models(dir: &Path, dataset: &Dataset, master_seed: u64) -> Result<(ExperimentSpec, Vec<FoldModel>)> {
    let spec = load_experiment_spec(dir)?;
    check_dataset(&spec, dataset)?;
    let windows = dataset.windows(spec.stride)?;
    let mut models = Vec::new();
    for fold in 1..=2u8 {
        let (weights, header) = load_weights::<f32>(&dir.join(fold_file(fold)), Some(spec.cell_kind))?;
        let split = fold_split(&spec, dataset, &windows, fold, master_seed)?;
        if header.data_fingerprint.as_deref() != Some(split_fingerprint(&split).as_str()) {
            return Err(Error::SpecMismatch(format!(
                "fold {fold} model was trained on a different split (dataset or master seed changed)"
            )));
        }
        let history = match fs::read(dir.join(history_file(fold))) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        models.push(FoldModel {
            fold,
            weights,
            header,
            split,
            history,
        });
    }
    Ok((spec, models))
}

/// Evaluates saved models under `spec`'s filter and interval, e.g. the
/// evaluation-only experiment on top of the models of the one it reuses.
pub fn evaluate_saved(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    featurizer: &Featurizer,
    models_dir: &Path,
    master_seed: u64,
) -> Result<EvalReport> {
    let (trained, models) = load_fold_models(models_dir, dataset, master_seed)?;
    if let Some(src) = &spec.reuse_models_of {
        if *src != trained.id {
            return Err(Error::SpecMismatch(format!("{} reuses {src} models, found {}", spec.id, trained.id)));
        }
    }
    let eval_spec = ExperimentSpec {
        stride: trained.stride,
        ..spec.clone()
    };
    let store = FeatureStore::build(dataset, &dataset.windows(trained.stride)?, featurizer)?;
    evaluate_folds(&eval_spec, dataset, &store, &models)
}

/// Histograms of one model on fresh step trajectories of several magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGeneralization {
    pub magnitudes: Vec<f64>,
    /// True for magnitudes absent from the training catalog.
    pub unseen: Vec<bool>,
    pub histograms: Vec<ErrorHistogram2D>,
    pub predictions: Vec<Prediction>,
}

/// Simulates steps of every magnitude in [`STEP_MAGNITUDES`] for every ζ and
/// evaluates `model` on their windows (stride `stride`).
pub fn step_generalization_eval(
    model: &FoldModel,
    featurizer: &Featurizer,
    noise_sigma: f64,
    master_seed: u64,
    stride: usize,
) -> Result<StepGeneralization> {
    let catalog = extended_inputs();
    let fs = featurizer.config().fs;
    let duration = 10.0;
    let inputs: Vec<InputSignal> = STEP_MAGNITUDES.iter().map(|&m| InputSignal::Step { magnitude: m }).collect();
    let unseen = inputs.iter().map(|i| !catalog.contains(i)).collect();
    let pairs: Vec<(InputSignal, f64)> = inputs
        .iter()
        .flat_map(|&i| zeta_grid().into_iter().map(move |z| (i, z)))
        .collect();
    let trajectories = pairs
        .par_iter()
        .map(|&(input, zeta)| {
            let seed = derive_seed(master_seed, &format!("generalization/{}/{zeta}", input.label()));
            Trajectory::simulate(input, zeta, duration, fs, noise_sigma, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let window_len = featurizer.window_samples();
    let mut predictions = Vec::new();
    for (ti, t) in trajectories.iter().enumerate() {
        let starts: Vec<usize> = (0..window_count(t.len(), window_len)?).step_by(stride.max(1)).collect();
        let feats = starts
            .par_iter()
            .map(|&s| featurizer.featurize_pair(&t.u[s..s + window_len], &t.y[s..s + window_len]))
            .collect::<Result<Vec<_>>>()?;
        let rows = feats[0].rows();
        let mut x = Array3::<f32>::zeros((feats.len(), rows, featurizer.steps()));
        for (mut dst, f) in x.outer_iter_mut().zip(&feats) {
            dst.zip_mut_with(&f.values, |d, &v| *d = v as f32);
            if let Some(n) = &model.header.normalizer {
                n.apply(dst);
            }
        }
        let set = SampleSet::new(x, vec![t.zeta as f32; starts.len()])?;
        let preds = predict_samples(&model.weights, &set, 256)?;
        predictions.extend(starts.iter().zip(preds).map(|(&start, p)| Prediction {
            trajectory: ti,
            start,
            window_len,
            input: t.input,
            zeta: t.zeta,
            fold: model.fold,
            predicted: f64::from(p),
        }));
    }
    let histograms = Interval::PRESETS
        .iter()
        .map(|&iv| error_histogram(&predictions, fs, iv, &InputFilter::Steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepGeneralization {
        magnitudes: STEP_MAGNITUDES.to_vec(),
        unseen,
        histograms,
        predictions,
    })
}

/// Machine-readable summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub experiment_id: String,
    pub config_hash: String,
    pub folds: Vec<FoldSummary>,
    pub train_mad: Option<f64>,
    pub test_mad: f64,
    pub filtered_test_mad: f64,
    pub eval_filter: InputFilter,
    pub eval_interval: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: u8,
    pub train_mad: Option<f64>,
    pub test_mad: f64,
}

impl EvalReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            experiment_id: self.experiment_id.clone(),
            config_hash: self.config_hash.clone(),
            folds: self
                .folds
                .iter()
                .map(|f| FoldSummary {
                    fold: f.fold,
                    train_mad: f.train_mad,
                    test_mad: f.test_mad,
                })
                .collect(),
            train_mad: self.train_mad,
            test_mad: self.test_mad,
            filtered_test_mad: self.filtered_test_mad,
            eval_filter: self.eval_filter.clone(),
            eval_interval: self.eval_interval,
        }
    }
}

fn histogram_file(h: &ErrorHistogram2D) -> String {
    format!("hist_{}_{}.csv", h.interval.label(), h.input_set)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `summary.json`, one CSV per histogram, `predictions.csv` and an
/// `index.json` listing them. With `deterministic` the index carries no timestamp.
pub fn write_report(report: &EvalReport, dir: &Path, deterministic: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let summary = dir.join("summary.json");
    write_atomic(&summary, &serde_json::to_vec_pretty(&report.summary())?)?;
    files.push(summary);
    for h in &report.histograms {
        let p = dir.join(histogram_file(h));
        write_atomic(&p, h.to_csv().as_bytes())?;
        files.push(p);
    }
    let mut csv = String::from("trajectory,input,zeta,start,fold,predicted,abs_error\n");
    for p in &report.test_predictions {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.trajectory,
            p.input.label(),
            p.zeta,
            p.start,
            p.fold,
            p.predicted,
            p.abs_error()
        );
    }
    let preds = dir.join("predictions.csv");
    write_atomic(&preds, csv.as_bytes())?;
    files.push(preds);
    write_index(dir, &files, deterministic)?;
    Ok(files)
}

/// Writes the histograms of a step-generalization run plus an index.
pub fn write_generalization_report(g: &StepGeneralization, dir: &Path, deterministic: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for h in &g.histograms {
        let p = dir.join(format!("hist_{}_steps.csv", h.interval.label()));
        write_atomic(&p, h.to_csv().as_bytes())?;
        files.push(p);
    }
    let flags: BTreeMap<String, bool> = g
        .magnitudes
        .iter()
        .zip(&g.unseen)
        .map(|(m, u)| (InputSignal::Step { magnitude: *m }.label(), *u))
        .collect();
    let p = dir.join("unseen_magnitudes.json");
    write_atomic(&p, &serde_json::to_vec_pretty(&flags)?)?;
    files.push(p);
    write_index(dir, &files, deterministic)?;
    Ok(files)
}

fn write_index(dir: &Path, files: &[PathBuf], deterministic: bool) -> Result<()> {
    let names: Vec<String> = files
        .iter()
        .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let mut index = serde_json::json!({ "files": names });
    if !deterministic {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        index["created_unix"] = serde_json::json!(now);
    }
    write_atomic(&dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)
}
