//! Training loop, evaluation and the per-model default settings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::{apply_augments, rebalance, BalancedBatchSampler, LabeledExample, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::labeling::{label_cohort, lead_time_days, LabelingScheme};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::{apply_bn_updates, Classifier, Mode, ModelKind};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::params::ParamStore;
use crate::scan_io::{read_volume, resolve_volume_path, SubjectRecord, VoxelVolume};
use crate::tensor::Tensor;

fn default_batch_size() -> usize {
    8
}

fn default_scheme() -> LabelingScheme {
    LabelingScheme::ExcludeDevelopedAd
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_scheme")]
    pub scheme: LabelingScheme,
}

impl TrainConfig {
    /// Settings reported for the full-size experiments.
    pub fn full_scale(model: ModelKind) -> Self {
        let (epochs, optimizer) = match model {
            ModelKind::Cnn3d => (50, OptimizerSpec::adamw(1e-5, 0.1)),
            ModelKind::Rvn => (200, OptimizerSpec::adamw(1e-4, 0.01)),
            ModelKind::Transformer => (200, OptimizerSpec::sgd(1e-4, 9e-4, true)),
        };
        Self {
            model,
            epochs,
            batch_size: default_batch_size(),
            seed: 0,
            optimizer,
            scheme: default_scheme(),
        }
    }

    /// Same optimizer families with step sizes and budgets for desk-scale
    /// architectures and synthetic cohorts.
    pub fn desk_default(model: ModelKind) -> Self {
        let (epochs, optimizer) = match model {
            ModelKind::Cnn3d => (12, OptimizerSpec::adamw(2e-3, 0.1)),
            ModelKind::Rvn => (30, OptimizerSpec::adamw(5e-4, 0.01)),
            ModelKind::Transformer => (15, OptimizerSpec::sgd(1e-2, 0.9, true)),
        };
        Self {
            model,
            epochs,
            batch_size: default_batch_size(),
            seed: 0,
            optimizer,
            scheme: default_scheme(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 == 1 {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        self.optimizer.validate()
    }
}

/// Labeled, non-excluded examples of every session in the cohort.
pub fn labeled_examples(subjects: &[SubjectRecord], scheme: LabelingScheme) -> Result<Vec<LabeledExample>> {
    let (decisions, _) = label_cohort(subjects, scheme)?;
    Ok(decisions.iter().filter_map(LabeledExample::from_decision).collect())
}

pub fn examples_in(split: &SplitAssignment, which: Split, examples: &[LabeledExample]) -> Vec<LabeledExample> {
    examples
        .iter()
        .filter(|e| split.get(&e.subject_id) == Some(which))
        .cloned()
        .collect()
}

/// Examples turned into model inputs.
pub struct PreparedSet {
    pub examples: Vec<LabeledExample>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.subject_id.as_str()).collect()
    }
}

/// Load, augment and prepare every example; volume paths resolve against
/// the manifest's directory.
pub fn prepare_set(model: &dyn Classifier, examples: &[LabeledExample], manifest: &Path) -> Result<PreparedSet> {
    let mut cache: HashMap<&str, VoxelVolume> = HashMap::new();
    let mut inputs = Vec::with_capacity(examples.len());
    for e in examples {
        if !cache.contains_key(e.volume_path.as_str()) {
            let v = read_volume(resolve_volume_path(manifest, &e.volume_path))?;
            cache.insert(&e.volume_path, v);
        }
        let volume = &cache[e.volume_path.as_str()];
        let input = if e.augment.is_empty() {
            model.prepare(volume)?
        } else {
            model.prepare(&apply_augments(volume, &e.augment)?)?
        };
        inputs.push(input);
    }
    Ok(PreparedSet {
        labels: examples.iter().map(|e| e.label).collect(),
        examples: examples.to_vec(),
        inputs,
    })
}

/// Train/validation/test inputs for one model. The training part is
/// rebalanced to equal class counts before preparation.
pub struct ExperimentData {
    pub train: PreparedSet,
    pub val: PreparedSet,
    pub test: PreparedSet,
}

pub fn prepare_experiment(
    model: &dyn Classifier,
    examples: &[LabeledExample],
    split: &SplitAssignment,
    manifest: &Path,
    seed: u64,
) -> Result<ExperimentData> {
    let train_examples = examples_in(split, Split::Train, examples);
    let first = train_examples
        .first()
        .ok_or_else(|| Error::Validation("training split has no labeled scans".into()))?;
    let shape = read_volume(resolve_volume_path(manifest, &first.volume_path))?.shape();
    let balanced = rebalance(&train_examples, 1.0, shape, seed)?;
    Ok(ExperimentData {
        train: prepare_set(model, &balanced, manifest)?,
        val: prepare_set(model, &examples_in(split, Split::Val, examples), manifest)?,
        test: prepare_set(model, &examples_in(split, Split::Test, examples), manifest)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: MetricReport,
    /// Batch-averaged loss components, when the model reports them.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the model holds after training.
    pub best_epoch: usize,
}

const PREDICT_CHUNK: usize = 16;

pub fn predict_all(model: &dyn Classifier, inputs: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        out.extend(model.predict(&refs)?);
    }
    Ok(out)
}

fn mean_bce(probs: &[f64], labels: &[u8]) -> f64 {
    let eps = 1e-12;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / probs.len().max(1) as f64
}

pub fn threshold(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

fn score(model: &dyn Classifier, set: &PreparedSet) -> Result<(f64, MetricReport)> {
    let probs = predict_all(model, &set.inputs)?;
    let cm = ConfusionMatrix::from_predictions(&set.labels, &threshold(&probs))?;
    Ok((mean_bce(&probs, &set.labels), cm.report()?))
}

/// Train with class-balanced batches; afterwards the model holds the
/// parameters of the epoch with the best validation F1 (ties: lower
/// validation loss, then earlier epoch).
pub fn train(
    model: &mut dyn Classifier,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Validation("train and validation sets must be non-empty".into()));
    }
    let train_subjects = train_set.subjects();
    if let Some(s) = val_set.subjects().iter().find(|s| train_subjects.contains(*s)) {
        return Err(Error::Contamination(vec![s.to_string()]));
    }
    let sampler = BalancedBatchSampler::new(&train_set.labels, cfg.batch_size, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let batches = sampler.epoch(epoch as u64 - 1);
        for batch in &batches {
            let inputs: Vec<&Tensor> = batch.iter().map(|&i| &train_set.inputs[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut tape = Tape::new();
            let out = model.batch_loss(&mut tape, &inputs, &labels, Mode::Train, &mut rng)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Validation(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = tape.backward(out.loss)?;
            drop(tape);
            optimizer.step(model.store_mut(), &grads);
            apply_bn_updates(model.store_mut(), &out.bn_updates);
            loss_sum += loss;
            for (name, v) in out.terms {
                *term_sums.entry(name.to_string()).or_default() += v;
            }
        }
        let n = batches.len() as f64;
        let (val_loss, val) = score(model, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss,
            val,
            terms: term_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        };
        on_epoch(&record);
        let better = match &best {
            None => true,
            Some((f1, vl, _, _)) => val.f1 > *f1 || (val.f1 == *f1 && val_loss < *vl),
        };
        if better {
            best = Some((val.f1, val_loss, epoch, model.store().clone()));
        }
        history.push(record);
    }
    let (_, _, best_epoch, store) = best.expect("at least one epoch");
    *model.store_mut() = store;
    Ok(TrainOutcome { history, best_epoch })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub day: u32,
    pub volume_path: String,
    pub label: u8,
    pub probability: f64,
    pub predicted: u8,
}

/// Days from a correctly flagged scan to later diagnoses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeadTimeRow {
    pub subject_id: String,
    pub day: u32,
    pub to_first_uncertain: Option<u32>,
    pub to_first_ad: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub predictions: Vec<PredictionRow>,
    pub lead_times: Vec<LeadTimeRow>,
}

/// Fail if any test subject was used for training.
pub fn check_contamination<'a>(
    test_subjects: impl IntoIterator<Item = &'a str>,
    training_subjects: &[String],
) -> Result<()> {
    let trained: BTreeSet<&str> = training_subjects.iter().map(String::as_str).collect();
    let overlap: BTreeSet<String> = test_subjects
        .into_iter()
        .filter(|s| trained.contains(s))
        .map(str::to_string)
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Contamination(overlap.into_iter().collect()))
    }
}

/// Score per-example probabilities and build the lead-time table for true
/// positives.
pub fn report_predictions(
    examples: &[LabeledExample],
    probabilities: &[f64],
    subjects: &[SubjectRecord],
) -> Result<EvalReport> {
    if examples.len() != probabilities.len() {
        return Err(Error::Validation("one probability per example required".into()));
    }
    let predicted = threshold(probabilities);
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let metrics = ConfusionMatrix::from_predictions(&labels, &predicted)?.report()?;
    let by_id: HashMap<&str, &SubjectRecord> = subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let mut predictions = Vec::with_capacity(examples.len());
    let mut lead_times = Vec::new();
    for ((e, &p), &yhat) in examples.iter().zip(probabilities).zip(&predicted) {
        predictions.push(PredictionRow {
            subject_id: e.subject_id.clone(),
            day: e.day,
            volume_path: e.volume_path.clone(),
            label: e.label,
            probability: p,
            predicted: yhat,
        });
        if e.label == 1 && yhat == 1 {
            let subject = by_id
                .get(e.subject_id.as_str())
                .ok_or_else(|| Error::Validation(format!("no clinical record for {}", e.subject_id)))?;
            let session = subject
                .sessions
                .iter()
                .find(|s| s.day == e.day && s.volume_path == e.volume_path)
                .ok_or_else(|| Error::Validation(format!("no session {} for {}", e.day, e.subject_id)))?;
            let lt = lead_time_days(subject, session)?;
            lead_times.push(LeadTimeRow {
                subject_id: e.subject_id.clone(),
                day: e.day,
                to_first_uncertain: lt.to_first_uncertain,
                to_first_ad: lt.to_first_ad,
            });
        }
    }
    Ok(EvalReport {
        metrics,
        predictions,
        lead_times,
    })
}

/// Deterministic evaluation on a held-out set, refusing training subjects.
pub fn evaluate(
    model: &dyn Classifier,
    test_set: &PreparedSet,
    subjects: &[SubjectRecord],
    training_subjects: &[String],
) -> Result<EvalReport> {
    check_contamination(test_set.subjects(), training_subjects)?;
    let probs = predict_all(model, &test_set.inputs)?;
    report_predictions(&test_set.examples, &probs, subjects)
}
