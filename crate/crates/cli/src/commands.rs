use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voxattn::checkpoint::{load_checkpoint, load_pretrained_backbone, save_checkpoint, CheckpointMeta, SCRATCH};
use voxattn::dataset::{person_disjoint_split, Split, SplitAssignment};
use voxattn::labeling::label_cohort;
use voxattn::model::rvn::{export_trajectory, load_trajectory};
use voxattn::model::{ModelConfig, ModelKind};
use voxattn::scan_io::{load_manifest, read_volume, resolve_volume_path, write_manifest};
use voxattn::synth::{generate_cohort, SynthSpec};
use voxattn::train::{
    evaluate, examples_in, labeled_examples, predict_all, prepare_experiment, prepare_set, threshold, train,
    TrainConfig,
};
use voxattn::{Error, Result};

use crate::plot::render_trajectory;
use crate::{
    Command, EvaluateArgs, IngestArgs, LabelArgs, PredictArgs, SplitArgs, SynthArgs, TrainArgs, TrajectoryArgs,
};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        _ => 2,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Label(a) => label(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Trajectory(a) => trajectory(a),
        Command::Synth(a) => synth(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Serialize)]
struct IngestSummary {
    subjects: usize,
    visits: usize,
    sessions: usize,
    /// Volume shape → number of scans with it.
    shapes: BTreeMap<String, usize>,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut subjects = load_manifest(&a.manifest)?;
    let mut shapes = BTreeMap::new();
    for s in &mut subjects {
        for session in &mut s.sessions {
            let path = resolve_volume_path(&a.manifest, &session.volume_path);
            let volume = read_volume(&path)?;
            if volume.plane() != session.plane {
                return Err(Error::Validation(format!(
                    "{}: manifest says {:?}, sidecar says {:?}",
                    path.display(),
                    session.plane,
                    volume.plane()
                )));
            }
            *shapes.entry(format!("{:?}", volume.shape())).or_insert(0) += 1;
            // The canonical copy lives elsewhere, so paths must not depend on it.
            let absolute = fs::canonicalize(voxattn::scan_io::sidecar_path(&path)).map_err(|e| io_error(&path, e))?;
            let absolute = absolute.with_extension("");
            session.volume_path = absolute.to_string_lossy().into_owned();
        }
    }
    create_dir(&a.out)?;
    write_manifest(&subjects, a.out.join("manifest.jsonl"))?;
    let summary = IngestSummary {
        subjects: subjects.len(),
        visits: subjects.iter().map(|s| s.visits.len()).sum(),
        sessions: subjects.iter().map(|s| s.sessions.len()).sum(),
        shapes,
    };
    write_json(&a.out.join("ingest.json"), &summary)?;
    println!(
        "{} subjects, {} visits, {} sessions",
        summary.subjects, summary.visits, summary.sessions
    );
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let subjects = load_manifest(&a.manifest)?;
    let (decisions, summary) = label_cohort(&subjects, a.scheme)?;
    let mut lines = String::new();
    for d in &decisions {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    match a.out {
        Some(dir) => {
            create_dir(&dir)?;
            let path = dir.join("labels.jsonl");
            fs::write(&path, lines).map_err(|e| io_error(&path, e))?;
            write_json(&dir.join("label_summary.json"), &summary)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        None => {
            print!("{lines}");
            println!("{}", serde_json::to_string(&serde_json::json!({ "summary": summary }))?);
        }
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let subjects = load_manifest(&a.manifest)?;
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let assignment = person_disjoint_split(&ids, a.ratios, a.seed)?;
    match a.out {
        Some(dir) => {
            create_dir(&dir)?;
            write_json(&dir.join("split.json"), &assignment)?;
            let counts: Vec<String> = [Split::Train, Split::Val, Split::Test]
                .iter()
                .map(|&s| format!("{s:?} {}", assignment.count(s)))
                .collect();
            println!("{}", counts.join(", "));
        }
        None => println!("{}", serde_json::to_string_pretty(&assignment)?),
    }
    Ok(())
}

fn architecture(arch: &str, kind: ModelKind) -> Result<ModelConfig> {
    let config = match arch {
        "full" => ModelConfig::default_for(kind),
        "desk" => ModelConfig::desk(kind),
        path => read_json(Path::new(path))?,
    };
    if config.kind() != kind {
        return Err(Error::Config(format!(
            "architecture is a {}, training asked for {kind}",
            config.kind()
        )));
    }
    Ok(config)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, a.model) {
        (Some(path), model) => {
            let cfg: TrainConfig = read_json(path)?;
            if model.is_some_and(|m| m != cfg.model) {
                return Err(Error::Config(format!(
                    "--model disagrees with config model {}",
                    cfg.model
                )));
            }
            cfg
        }
        (None, Some(kind)) if a.arch == "desk" => TrainConfig::desk_default(kind),
        (None, Some(kind)) => TrainConfig::full_scale(kind),
        (None, None) => return Err(Error::Config("either --config or --model is required".into())),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(s) = a.scheme {
        cfg.scheme = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let config = architecture(&a.arch, cfg.model)?;
    let subjects = load_manifest(&a.manifest)?;
    let assignment: SplitAssignment = read_json(&a.split)?;
    let examples = labeled_examples(&subjects, cfg.scheme)?;

    let mut model = config.build(cfg.seed)?;
    let backbone_init = match &a.pretrained {
        Some(path) => {
            let copied = load_pretrained_backbone(model.as_mut(), path)?;
            println!("loaded {copied} backbone tensors from {}", path.display());
            format!("pretrained:{}", path.display())
        }
        None => SCRATCH.to_string(),
    };
    let data = prepare_experiment(model.as_ref(), &examples, &assignment, &a.manifest, cfg.seed)?;
    println!("train {} / val {} examples", data.train.len(), data.val.len());
    let outcome = train(model.as_mut(), &data.train, &data.val, &cfg, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  val loss {:.4}  val f1 {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val.f1
        );
    })?;
    let training_subjects: Vec<String> = data.train.subjects().iter().map(|s| s.to_string()).collect();
    let meta = CheckpointMeta {
        model: config,
        seed: cfg.seed,
        epoch: outcome.best_epoch,
        backbone_init,
        scheme: cfg.scheme,
        training_subjects,
    };
    create_dir(&a.out)?;
    save_checkpoint(a.out.join("model.ckpt"), &meta, model.as_ref())?;
    write_json(&a.out.join("history.json"), &outcome)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    println!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (meta, model) = load_checkpoint(&a.checkpoint)?;
    let subjects = load_manifest(&a.manifest)?;
    let assignment: SplitAssignment = read_json(&a.split)?;
    let which = if a.subset == "val" { Split::Val } else { Split::Test };
    let examples = examples_in(&assignment, which, &labeled_examples(&subjects, meta.scheme)?);
    // Refuse before spending time on loading volumes.
    voxattn::train::check_contamination(examples.iter().map(|e| e.subject_id.as_str()), &meta.training_subjects)?;
    let set = prepare_set(model.as_ref(), &examples, &a.manifest)?;
    let report = evaluate(model.as_ref(), &set, &subjects, &meta.training_subjects)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    let m = &report.metrics;
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  fn rate {:.4}  ({:?})",
        m.accuracy, m.precision, m.recall, m.f1, m.false_negative_rate, m.confusion
    );
    Ok(())
}

/// Accept `scan`, `scan.json` or `scan.raw` for the volume stored as `scan.{json,raw}`.
fn volume_base(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

#[derive(Serialize)]
struct Prediction {
    volume: String,
    probability: f64,
    predicted: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory: Option<String>,
}

fn predict(a: PredictArgs) -> Result<()> {
    let (_, model) = load_checkpoint(&a.checkpoint)?;
    let mut inputs = Vec::with_capacity(a.volumes.len());
    for path in &a.volumes {
        inputs.push(model.prepare(&read_volume(volume_base(path))?)?);
    }
    let probs = predict_all(model.as_ref(), &inputs)?;
    create_dir(&a.out)?;
    let mut paths = vec![None; inputs.len()];
    if let Some(rvn) = model.as_rvn() {
        let dir = a.out.join("trajectories");
        create_dir(&dir)?;
        let refs: Vec<_> = inputs.iter().collect();
        for (i, t) in rvn.trajectories(&refs, None, false, 0)?.iter().enumerate() {
            let path = dir.join(format!("{i:04}.json"));
            export_trajectory(t, rvn.config().input_shape, &path)?;
            paths[i] = Some(path.to_string_lossy().into_owned());
        }
    }
    let rows: Vec<Prediction> = a
        .volumes
        .iter()
        .zip(threshold(&probs))
        .zip(&probs)
        .zip(paths)
        .map(|(((v, predicted), &probability), trajectory)| Prediction {
            volume: v.to_string_lossy().into_owned(),
            probability,
            predicted,
            trajectory,
        })
        .collect();
    write_json(&a.out.join("predictions.json"), &rows)?;
    for r in &rows {
        println!("{}\t{:.4}\t{}", r.volume, r.probability, r.predicted);
    }
    Ok(())
}

fn trajectory(a: TrajectoryArgs) -> Result<()> {
    let traj = load_trajectory(&a.input)?;
    let volume = a.volume.as_deref().map(|p| read_volume(volume_base(p))).transpose()?;
    create_dir(&a.out)?;
    let png = a.out.join("trajectory.png");
    render_trajectory(&traj, volume.as_ref())?
        .save(&png)
        .map_err(|e| Error::Io {
            path: png.clone(),
            source: std::io::Error::other(e),
        })?;
    let mut text = String::from("step\tx_d\tx_h\tx_w\tvoxel_d\tvoxel_h\tvoxel_w\n");
    for (t, (l, v)) in traj.locations.iter().zip(&traj.voxels).enumerate() {
        text.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
            t + 1,
            l[0],
            l[1],
            l[2],
            v[0],
            v[1],
            v[2]
        ));
    }
    let txt = a.out.join("trajectory.txt");
    fs::write(&txt, &text).map_err(|e| io_error(&txt, e))?;
    print!("{text}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    spec.seed = a.seed;
    if let Some(n) = a.subjects {
        spec.n_subjects = n;
    }
    spec.validate()?;
    let cohort = generate_cohort(&spec, &a.out)?;
    let positives = cohort.truth.values().filter(|&&v| v).count();
    println!(
        "{} subjects, {} scans ({} with lesion) -> {}",
        cohort.subjects.len(),
        cohort.truth.len(),
        positives,
        cohort.manifest_path.display()
    );
    Ok(())
}
