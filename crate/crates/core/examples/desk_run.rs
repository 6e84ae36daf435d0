//! Generate a synthetic cohort, train one model at desk scale and report
//! test metrics.
//!
//! cargo run --release -p voxattn-core --example desk_run -- <cnn3d|rvn|transformer> [epochs] [subjects] [seed]
//!
//! 300 subjects with the default epoch budgets is the acceptance setting.

use std::time::Instant;

use voxattn::dataset::{person_disjoint_split, DEFAULT_RATIOS};
use voxattn::model::{ModelConfig, ModelKind};
use voxattn::synth::{generate_cohort, glimpse_localization, roi_oracle, SynthSpec};
use voxattn::train::{evaluate, labeled_examples, prepare_experiment, train, TrainConfig};

fn main() -> voxattn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind: ModelKind = args.get(1).map_or("cnn3d", String::as_str).parse()?;
    let mut cfg = TrainConfig::desk_default(kind);
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(s) = args.get(4) {
        cfg.seed = s.parse().expect("seed");
    }
    let spec = SynthSpec {
        n_subjects: args.get(3).map_or(300, |s| s.parse().expect("subjects")),
        seed: 11 + cfg.seed,
        ..SynthSpec::default()
    };
    let dir = std::env::temp_dir().join(format!("voxattn-desk-{}", spec.seed));
    let start = Instant::now();
    let cohort = generate_cohort(&spec, &dir)?;
    println!("cohort: {} subjects in {:.1?}", cohort.subjects.len(), start.elapsed());
    println!("roi oracle AUC {:.3}", roi_oracle(&cohort, &spec)?);

    let examples = labeled_examples(&cohort.subjects, cfg.scheme)?;
    let ids: Vec<&str> = cohort.subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let split = person_disjoint_split(&ids, DEFAULT_RATIOS, cfg.seed)?;
    let mut model = ModelConfig::desk(kind).build(cfg.seed)?;
    let data = prepare_experiment(model.as_ref(), &examples, &split, &cohort.manifest_path, cfg.seed)?;
    println!(
        "train {} / val {} / test {} examples",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let start = Instant::now();
    let outcome = train(model.as_mut(), &data.train, &data.val, &cfg, |r| {
        println!(
            "epoch {:>3} loss {:.4} val loss {:.4} val f1 {:.3} acc {:.3} {:?} [{:.1?}]",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val.f1,
            r.val.accuracy,
            r.terms,
            start.elapsed()
        );
    })?;
    let training: Vec<String> = data.train.subjects().iter().map(|s| s.to_string()).collect();
    let report = evaluate(model.as_ref(), &data.test, &cohort.subjects, &training)?;
    println!("best epoch {}", outcome.best_epoch);
    println!("test {:?}", report.metrics);
    if let Some(rvn) = model.as_rvn() {
        let positives: Vec<_> = data
            .test
            .inputs
            .iter()
            .zip(&data.test.labels)
            .filter(|(_, &y)| y == 1)
            .map(|(x, _)| x)
            .collect();
        println!("localization {:?}", glimpse_localization(rvn, &positives, &spec, 1)?);
        let shape = rvn.config().input_shape;
        println!("lesion centre {:?}", spec.lesion_center_in(shape));
        for t in rvn.trajectories(&positives[..3.min(positives.len())], None, false, 0)? {
            let coords: Vec<_> = t
                .locations
                .iter()
                .map(|l| voxattn::model::rvn::location_to_coords(*l, shape).map(|c| (c * 10.0).round() / 10.0))
                .collect();
            println!("p={:.3} {:?}", t.probability, coords);
        }
    }
    Ok(())
}
