//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod desk;
pub mod gradient_suite;
pub mod pipeline;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxattn::autograd::{Tape, Var};
use voxattn::model::cnn3d::Cnn3dConfig;
use voxattn::model::rvn::RvnConfig;
use voxattn::model::transformer::TransformerConfig;
use voxattn::model::Classifier;
use voxattn::params::ParamStore;
use voxattn::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// Gradients whose analytic and numeric magnitudes are both below this are
/// indistinguishable from finite-difference round-off and count as matching.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
    pub worst_param: String,
}

impl GradCheck {
    pub fn fraction_within(&self) -> f64 {
        self.within as f64 / self.checked.max(1) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare backprop gradients of `loss` against central differences on
/// every trainable scalar of the model.
pub fn gradient_check<F>(model: &mut dyn Classifier, tolerance: f64, loss: F) -> GradCheck
where
    F: Fn(&dyn Classifier, &mut Tape) -> Var,
{
    gradient_check_some(model, tolerance, |_| true, loss)
}

/// [`gradient_check`] over the parameters whose names `include` accepts.
pub fn gradient_check_some<F>(
    model: &mut dyn Classifier,
    tolerance: f64,
    include: impl Fn(&str) -> bool,
    loss: F,
) -> GradCheck
where
    F: Fn(&dyn Classifier, &mut Tape) -> Var,
{
    let eval = |m: &dyn Classifier| {
        let mut tape = Tape::new();
        let v = loss(m, &mut tape);
        tape.value(v).item()
    };
    let mut tape = Tape::new();
    let v = loss(&*model, &mut tape);
    let grads = tape.backward(v).expect("backward");
    let ids: Vec<_> = model
        .store()
        .trainable_ids()
        .filter(|&id| include(model.store().name(id)))
        .collect();
    let mut report = GradCheck {
        checked: 0,
        within: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    for id in ids {
        let n = model.store().get(id).len();
        let zeros = Tensor::zeros(model.store().get(id).shape());
        let analytic = grads.get(id).cloned().unwrap_or(zeros);
        for i in 0..n {
            let original = model.store().get(id).data()[i];
            model.store_mut().get_mut(id).data_mut()[i] = original + FD_STEP;
            let up = eval(&*model);
            model.store_mut().get_mut(id).data_mut()[i] = original - FD_STEP;
            let down = eval(&*model);
            model.store_mut().get_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[i], numeric);
            report.checked += 1;
            if err <= tolerance {
                report.within += 1;
            }
            if err > report.worst {
                report.worst = err;
                report.worst_param = format!("{}[{i}]", model.store().name(id));
            }
        }
    }
    report
}

/// Move a stack of conv → batch-norm → ReLU → max-pool blocks to an
/// equivalent point with every conv weight and every block output but the
/// last scaled by `factor`, adjusting biases and running statistics so both
/// train and eval mode compute the same function (up to the norm's epsilon).
/// A fixed finite-difference step then moves activations `factor` times less
/// relative to their spread and rarely crosses a ReLU or max-pool switch.
pub fn amplify_blocks(model: &mut dyn Classifier, blocks: &[(String, String)], factor: f64) {
    let store = model.store_mut();
    let scale = |store: &mut ParamStore, name: &str, by: f64| {
        let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        for v in store.get_mut(id).data_mut() {
            *v *= by;
        }
    };
    let mut input_scale = 1.0;
    for (i, (conv, bn)) in blocks.iter().enumerate() {
        let out = input_scale * factor;
        scale(store, &format!("{conv}.weight"), factor);
        scale(store, &format!("{conv}.bias"), out);
        scale(store, &format!("{bn}.running_mean"), out);
        scale(store, &format!("{bn}.running_var"), out * out);
        if i + 1 < blocks.len() {
            scale(store, &format!("{bn}.gamma"), factor);
            scale(store, &format!("{bn}.beta"), factor);
            input_scale = factor;
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_inputs(shape: &[usize], count: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..count).map(|_| Tensor::randn(shape, 1.0, &mut r)).collect()
}

pub fn tiny_cnn() -> Cnn3dConfig {
    Cnn3dConfig {
        input_shape: [32, 32, 32],
        channels: [2, 2, 3, 3, 2],
        kernel: 3,
        pool: 2,
        dropout: 0.0,
        fc: [4, 3, 1],
    }
}

pub fn tiny_rvn() -> RvnConfig {
    RvnConfig {
        input_shape: [10, 10, 10],
        glimpse_side: 4,
        glimpse_channels: vec![2, 2],
        kernel: 3,
        pool: 2,
        embed_dim: 4,
        hidden: 3,
        steps: 3,
        sigma: 0.2,
        rollouts: 1,
    }
}

pub fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        n_frames: 2,
        frame_size: [4, 4],
        backbone: vec![vec![2], vec![2]],
        d_model: 4,
        heads: 2,
        ff_dim: 6,
    }
}

/// Probability that `N(mean, sigma²)` falls in `[lo, hi]`.
pub fn interval_probability(mean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(mean, sigma).expect("valid normal");
    n.cdf(hi) - n.cdf(lo)
}

/// Score-function gradient of a box reward for a frozen one-step location
/// policy, against central differences of the closed-form expected reward.
/// Returns the relative error ‖estimate − exact‖ / ‖exact‖.
pub fn reinforce_box_check(samples: usize, seed: u64) -> f64 {
    use voxattn::model::layers::{Forward, Mode};
    use voxattn::model::rvn::Rvn;

    let config = tiny_rvn();
    let rvn = Rvn::new(config.clone(), seed).expect("rvn");
    let hidden_row: Vec<f64> = (0..config.hidden)
        .map(|i| 0.6 * ((i as f64) * 1.3 + 0.4).sin())
        .collect();
    let sigma = config.sigma;
    let store = rvn.store();
    let w_id = store.id("locator.weight").unwrap();
    let b_id = store.id("locator.bias").unwrap();

    let mean_of = |w: &[f64], b: &[f64]| -> [f64; 3] {
        std::array::from_fn(|c| {
            let z: f64 = (0..config.hidden).map(|j| hidden_row[j] * w[j * 3 + c]).sum::<f64>() + b[c];
            z.tanh()
        })
    };
    let w0 = store.get(w_id).data().to_vec();
    let b0 = store.get(b_id).data().to_vec();
    let mu0 = mean_of(&w0, &b0);
    // Box offset from the mean along every axis so each coordinate matters.
    let lo: [f64; 3] = std::array::from_fn(|c| mu0[c] - 0.1);
    let hi: [f64; 3] = std::array::from_fn(|c| mu0[c] + 0.4);
    let expected = |w: &[f64], b: &[f64]| {
        let mu = mean_of(w, b);
        (0..3)
            .map(|c| interval_probability(mu[c], sigma, lo[c], hi[c]))
            .product::<f64>()
    };

    let mut exact = Vec::new();
    let h = 1e-5;
    for (which, base) in [(0, &w0), (1, &b0)] {
        for i in 0..base.len() {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += h;
            down[i] -= h;
            let (eu, ed) = if which == 0 {
                (expected(&up, &b0), expected(&down, &b0))
            } else {
                (expected(&w0, &up), expected(&w0, &down))
            };
            exact.push((eu - ed) / (2.0 * h));
        }
    }

    let mut r = rng(seed ^ 0x5eed);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(store, Mode::Eval, &mut r);
    let rows: Vec<f64> = (0..samples).flat_map(|_| hidden_row.iter().copied()).collect();
    let hidden = tape.constant(Tensor::new(vec![samples, config.hidden], rows).unwrap());
    let step = rvn.location_network(&mut tape, &mut fwd, hidden, true).unwrap();
    let rewards: Vec<f64> = step
        .location
        .data()
        .chunks(3)
        .map(|l| f64::from(u8::from((0..3).all(|c| l[c] >= lo[c] && l[c] <= hi[c]))))
        .collect();
    let weighted = tape.mul_const(step.log_prob, Tensor::from_vec(rewards)).unwrap();
    let total = tape.sum(weighted);
    let objective = tape.scale(total, 1.0 / samples as f64);
    let grads = tape.backward(objective).unwrap();
    let estimate: Vec<f64> = grads
        .get(w_id)
        .unwrap()
        .data()
        .iter()
        .chain(grads.get(b_id).unwrap().data())
        .copied()
        .collect();

    let diff: f64 = estimate
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}
