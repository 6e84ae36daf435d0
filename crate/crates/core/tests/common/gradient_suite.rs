//! Gradient checks of the three miniature models, shared by the test suite
//! and the acceptance harness.

use voxattn::autograd::{Tape, Var};
use voxattn::model::cnn3d::Cnn3d;
use voxattn::model::layers::Mode;
use voxattn::model::rvn::{Rvn, Steering};
use voxattn::model::transformer::FrameTransformer;
use voxattn::model::Classifier;
use voxattn::tensor::Tensor;

use super::*;

pub const TOL: f64 = 1e-4;
pub const WORST: f64 = 1e-3;
pub const AMPLIFY: f64 = 100.0;

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.fraction_within() >= 0.95 && self.worst <= WORST
    }
}

fn classifier_loss<'a>(
    inputs: &'a [Tensor],
    labels: &'a [u8],
    mode: Mode,
) -> impl Fn(&dyn Classifier, &mut Tape) -> Var + 'a {
    move |m, tape| {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        m.batch_loss(tape, &refs, labels, mode, &mut rng(5)).expect("loss").loss
    }
}

fn cnn_blocks() -> Vec<(String, String)> {
    (0..5)
        .map(|i| (format!("block{i}.conv"), format!("block{i}.bn")))
        .collect()
}

/// Eval mode (running statistics) and train mode (batch statistics).
pub fn cnn_checks() -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    for (mode, seed, labels) in [(Mode::Eval, 1, &[0u8, 1][..]), (Mode::Train, 3, &[1, 0, 1][..])] {
        let mut model = Cnn3d::new(tiny_cnn(), seed).unwrap();
        amplify_blocks(&mut model, &cnn_blocks(), AMPLIFY);
        let inputs = random_inputs(&[1, 32, 32, 32], labels.len(), seed + 1);
        let report = gradient_check(&mut model, TOL, classifier_loss(&inputs, labels, mode));
        out.push((format!("cnn {mode:?}"), report));
    }
    out
}

fn fixed_path(steps: usize, batch: usize) -> Vec<Vec<[f64; 3]>> {
    (0..steps)
        .map(|t| {
            (0..batch)
                .map(|b| {
                    let s = (t * batch + b) as f64;
                    [0.3 * (s * 1.7).sin(), 0.4 * (s * 0.9).cos(), -0.2 + 0.1 * s]
                })
                .collect()
        })
        .collect()
}

/// The hybrid loss along a fixed path of location samples, split into the
/// supervised terms and the score-function term.
pub fn rvn_checks() -> Vec<(String, GradCheck)> {
    let config = tiny_rvn();
    let glimpse_blocks: Vec<_> = (0..config.glimpse_channels.len())
        .map(|i| (format!("glimpse.conv{i}"), format!("glimpse.bn{i}")))
        .collect();
    let inputs = random_inputs(&config.input_shape, 3, 7);
    let labels = [1u8, 0, 1];
    let path = fixed_path(config.steps, inputs.len());
    let mut out = Vec::new();
    for mode in [Mode::Eval, Mode::Train] {
        let mut model = Rvn::new(config.clone(), 6).unwrap();
        amplify_blocks(&mut model, &glimpse_blocks, AMPLIFY);
        let loss = |m: &dyn Classifier, tape: &mut Tape| {
            let refs: Vec<&Tensor> = inputs.iter().collect();
            m.as_rvn()
                .expect("rvn")
                .steered_loss(tape, &refs, &labels, mode, &mut rng(0), Steering::Given(&path))
                .expect("loss")
        };
        let supervised = gradient_check(&mut model, TOL, |m, tape| {
            let l = loss(m, tape);
            tape.add(l.classification, l.baseline).unwrap()
        });
        out.push((format!("rvn {mode:?} supervised"), supervised));
        // Baselines enter the score-function term only through the advantage,
        // which is held constant there.
        let policy = gradient_check_some(
            &mut model,
            TOL,
            |name| name != "baselines",
            |m, tape| loss(m, tape).reinforce,
        );
        out.push((format!("rvn {mode:?} policy"), policy));
    }
    out
}

pub fn transformer_checks() -> Vec<(String, GradCheck)> {
    let config = tiny_transformer();
    let [h, w] = config.frame_size;
    let mut model = FrameTransformer::new(config.clone(), 8).unwrap();
    let inputs = random_inputs(&[config.n_frames, 1, 1, h, w], 2, 9);
    let report = gradient_check(&mut model, TOL, classifier_loss(&inputs, &[1, 0], Mode::Eval));
    vec![("transformer".to_string(), report)]
}
