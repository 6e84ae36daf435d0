//! Synthetic-cohort training runs at desk scale.

use std::path::Path;
use std::time::Instant;

use voxattn::dataset::{person_disjoint_split, DEFAULT_RATIOS};
use voxattn::metrics::MetricReport;
use voxattn::model::{Classifier, ModelConfig, ModelKind};
use voxattn::synth::{generate_cohort, SynthCohort, SynthSpec};
use voxattn::tensor::Tensor;
use voxattn::train::{
    evaluate, labeled_examples, prepare_experiment, train, ExperimentData, TrainConfig, TrainOutcome,
};
use voxattn::Result;

pub struct DeskCohort {
    pub spec: SynthSpec,
    pub cohort: SynthCohort,
}

pub fn desk_cohort(n_subjects: usize, seed: u64, dir: &Path) -> Result<DeskCohort> {
    let spec = SynthSpec {
        n_subjects,
        seed,
        ..SynthSpec::default()
    };
    let cohort = generate_cohort(&spec, dir)?;
    Ok(DeskCohort { spec, cohort })
}

pub struct DeskRun {
    pub model: Box<dyn Classifier>,
    pub data: ExperimentData,
    pub outcome: TrainOutcome,
    pub test: MetricReport,
    pub seconds: f64,
}

impl DeskRun {
    pub fn test_positives(&self) -> Vec<&Tensor> {
        self.data
            .test
            .inputs
            .iter()
            .zip(&self.data.test.labels)
            .filter(|(_, &y)| y == 1)
            .map(|(x, _)| x)
            .collect()
    }
}

/// Split, balance, train and score one model on a generated cohort.
/// `init` runs on the freshly built model before training.
pub fn desk_run(
    desk: &DeskCohort,
    config: &ModelConfig,
    cfg: &TrainConfig,
    init: impl FnOnce(&mut dyn Classifier) -> Result<()>,
) -> Result<DeskRun> {
    let start = Instant::now();
    let examples = labeled_examples(&desk.cohort.subjects, cfg.scheme)?;
    let ids: Vec<&str> = desk.cohort.subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let split = person_disjoint_split(&ids, DEFAULT_RATIOS, cfg.seed)?;
    let mut model = config.build(cfg.seed)?;
    init(model.as_mut())?;
    let data = prepare_experiment(model.as_ref(), &examples, &split, &desk.cohort.manifest_path, cfg.seed)?;
    let outcome = train(model.as_mut(), &data.train, &data.val, cfg, |_| {})?;
    let training: Vec<String> = data.train.subjects().iter().map(|s| s.to_string()).collect();
    let test = evaluate(model.as_ref(), &data.test, &desk.cohort.subjects, &training)?.metrics;
    Ok(DeskRun {
        model,
        data,
        outcome,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn desk_defaults(kind: ModelKind) -> (ModelConfig, TrainConfig) {
    (ModelConfig::desk(kind), TrainConfig::desk_default(kind))
}
