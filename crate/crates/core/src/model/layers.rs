//! Parameterized building blocks shared by the three classifiers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::params::{fan_in_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses and records batch statistics,
    /// stochastic policies sample.
    Train,
    /// Deterministic: no dropout, running statistics, policy means.
    Eval,
}

/// Everything a forward pass needs besides the tape.
pub struct Forward<'a> {
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            mode,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id)
    }
}

pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// Fold batch statistics into running averages (unbiased variance).
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let n = u.stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, &m) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weight stored as `inputs × outputs`; `y = x·W + b`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            fan_in_normal(&[inputs, outputs], inputs, gain, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, fwd: &Forward, x: Var) -> Result<Var> {
        let w = fwd.param(tape, self.weight);
        let b = fwd.param(tape, self.bias);
        tape.linear(x, w, b)
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: [usize; 3],
}

impl Conv {
    /// "Same" padding for odd kernels.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let weight = store.add(
            &format!("{name}.weight"),
            fan_in_normal(&[out_ch, in_ch, kernel[0], kernel[1], kernel[2]], fan_in, gain, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            padding: kernel.map(|k| (k - 1) / 2),
        }
    }

    pub fn forward(&self, tape: &mut Tape, fwd: &Forward, x: Var) -> Result<Var> {
        let w = fwd.param(tape, self.weight);
        let b = fwd.param(tape, self.bias);
        tape.conv(x, w, b, self.padding)
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: [usize; 3]) -> usize {
        out_ch * in_ch * kernel.iter().product::<usize>() + out_ch
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, fwd: &mut Forward, x: Var) -> Result<Var> {
        let gamma = fwd.param(tape, self.gamma);
        let beta = fwd.param(tape, self.beta);
        match fwd.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, None)?;
                if let Some(stats) = stats {
                    fwd.bn_updates.push(BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = fwd.store.get(self.running_mean).data();
                let var = fwd.store.get(self.running_var).data();
                Ok(tape.batch_norm(x, gamma, beta, Some((mean, var)))?.0)
            }
        }
    }

    /// Trainable scalars only (running statistics are buffers).
    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, fwd: &Forward, x: Var) -> Result<Var> {
        let g = fwd.param(tape, self.gamma);
        let b = fwd.param(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Inverted dropout; identity outside training or for `rate == 0`.
pub fn dropout(tape: &mut Tape, fwd: &mut Forward, x: Var, rate: f64) -> Result<Var> {
    if fwd.mode == Mode::Eval || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| {
            if fwd.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}

/// Hidden and cell state of one LSTM layer, `batch × hidden` each.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

/// One LSTM layer with gate order (input, forget, candidate, output).
/// Initial forget-gate bias; keeps early inputs in the cell state instead of
/// halving them at every step.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input_weight: store.add(
                &format!("{name}.input_weight"),
                fan_in_normal(&[inputs, 4 * hidden], inputs, 1.0, rng),
            ),
            hidden_weight: store.add(
                &format!("{name}.hidden_weight"),
                fan_in_normal(&[hidden, 4 * hidden], hidden, 1.0, rng),
            ),
            bias: store.add(
                &format!("{name}.bias"),
                Tensor::new(
                    vec![4 * hidden],
                    (0..4 * hidden)
                        .map(|k| if k / hidden == 1 { FORGET_BIAS } else { 0.0 })
                        .collect(),
                )
                .expect("bias shape"),
            ),
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState {
            hidden: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            cell: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    pub fn step(&self, tape: &mut Tape, fwd: &Forward, x: Var, state: LstmState) -> Result<LstmState> {
        let wx = fwd.param(tape, self.input_weight);
        let wh = fwd.param(tape, self.hidden_weight);
        let b = fwd.param(tape, self.bias);
        let from_input = tape.matmul(x, wx)?;
        let from_hidden = tape.matmul(state.hidden, wh)?;
        let pre = tape.add(from_input, from_hidden)?;
        let pre = tape.add_row_bias(pre, b)?;
        let n = self.hidden;
        let i = tape.slice_cols(pre, 0, n)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(pre, n, n)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(pre, 2 * n, n)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(pre, 3 * n, n)?;
        let o = tape.sigmoid(o);
        let kept = tape.mul(f, state.cell)?;
        let written = tape.mul(i, g)?;
        let cell = tape.add(kept, written)?;
        let squashed = tape.tanh(cell);
        let hidden = tape.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }
}
