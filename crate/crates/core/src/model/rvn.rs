//! Recurrent visual attention over volumes.
//!
//! At each step the agent looks at a cube around its current location, fuses
//! "what" (conv features of the cube) with "where" (a linear code of the
//! location) by elementwise product, advances a two-layer LSTM core and draws
//! the next location from an isotropic normal around `tanh(fc(h))`. After the
//! last step a sigmoid unit on the top hidden state classifies the volume.
//!
//! Training mixes binary cross-entropy on the classifier with a score-function
//! term for the location policy (reward 1 when the thresholded prediction is
//! correct) and a squared-error fit of per-step baselines. Locations enter the
//! glimpse path as constants, so the policy only learns through the score
//! function.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, Forward, Linear, Lstm, LstmState, Mode, RELU_GAIN};
use super::{BatchLoss, Classifier, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::dataset::preprocess_volume;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scan_io::VoxelVolume;
use crate::tensor::Tensor;

pub const CORE_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvnConfig {
    pub input_shape: [usize; 3],
    pub glimpse_side: usize,
    pub glimpse_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub sigma: f64,
    /// Stochastic rollouts drawn per training example; each contributes its
    /// own reward and score-function term.
    #[serde(default = "one")]
    pub rollouts: usize,
}

fn one() -> usize {
    1
}

impl Default for RvnConfig {
    fn default() -> Self {
        Self {
            input_shape: [64, 64, 64],
            glimpse_side: 40,
            glimpse_channels: vec![8, 16],
            kernel: 3,
            pool: 2,
            embed_dim: 128,
            hidden: 128,
            steps: 6,
            sigma: 0.2,
            rollouts: 1,
        }
    }
}

impl RvnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.glimpse_side == 0 {
            return Err(Error::Config("rvn input and glimpse sizes must be positive".into()));
        }
        if self.steps == 0 || self.rollouts == 0 {
            return Err(Error::Config("rvn needs at least one step and one rollout".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "policy sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.kernel.is_multiple_of(2) || self.pool == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("invalid rvn layer sizes".into()));
        }
        if self.glimpse_channels.is_empty() || self.glimpse_channels.contains(&0) {
            return Err(Error::Config("glimpse network needs positive channel counts".into()));
        }
        self.glimpse_feature_side().map(|_| ())
    }

    fn glimpse_feature_side(&self) -> Result<usize> {
        let mut side = self.glimpse_side;
        for _ in &self.glimpse_channels {
            side /= self.pool;
            if side == 0 {
                return Err(Error::Config(format!(
                    "glimpse side {} collapses under pooling",
                    self.glimpse_side
                )));
            }
        }
        Ok(side)
    }

    fn glimpse_features(&self) -> Result<usize> {
        let side = self.glimpse_feature_side()?;
        Ok(side.pow(3) * self.glimpse_channels.last().copied().unwrap_or(1))
    }
}

/// Continuous voxel coordinates of a location in `[-1,1]³`
/// (−1 → index 0, +1 → last index).
pub fn location_to_coords(location: [f64; 3], shape: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (location[i].clamp(-1.0, 1.0) + 1.0) / 2.0 * (shape[i] - 1) as f64)
}

/// Nearest voxel to a location.
pub fn location_to_voxel(location: [f64; 3], shape: [usize; 3]) -> [usize; 3] {
    location_to_coords(location, shape).map(|c| c.round() as usize)
}

fn glimpse_into(data: &[f64], shape: [usize; 3], location: [f64; 3], side: usize, out: &mut [f64]) {
    let center = location_to_voxel(location, shape);
    let start: [isize; 3] = std::array::from_fn(|i| center[i] as isize - (side / 2) as isize);
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for a in 0..side {
        let d = start[0] + a as isize;
        for b in 0..side {
            let h = start[1] + b as isize;
            let row = &mut out[(a * side + b) * side..][..side];
            if !inside(d, shape[0]) || !inside(h, shape[1]) {
                row.fill(0.0);
                continue;
            }
            let base = (d as usize * shape[1] + h as usize) * shape[2];
            for (c, o) in row.iter_mut().enumerate() {
                let w = start[2] + c as isize;
                *o = if inside(w, shape[2]) {
                    data[base + w as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Cube of `side` voxels centred on the voxel nearest `location`; voxels
/// outside the volume read as zero.
pub fn extract_glimpse(volume: &VoxelVolume, location: [f64; 3], side: usize) -> VoxelVolume {
    let data: Vec<f64> = volume.voxels().iter().map(|&v| f64::from(v)).collect();
    let mut out = vec![0.0; side.pow(3)];
    glimpse_into(&data, volume.shape(), location, side, &mut out);
    VoxelVolume::from_fn([side; 3], |a, b, c| out[(a * side + b) * side + c] as f32).with_plane(volume.plane())
}

/// The three glimpse representations, each `batch × embed_dim`.
#[derive(Clone, Copy, Debug)]
pub struct GlimpseVars {
    pub what: Var,
    pub place: Var,
    pub fused: Var,
}

pub type CoreState = [LstmState; CORE_LAYERS];

/// Output of one location-policy evaluation.
#[derive(Clone, Debug)]
pub struct LocationStep {
    pub mean: Var,
    /// Unclamped draw, `batch × 3`; equals the mean when not sampling.
    pub sample: Tensor,
    /// The draw clamped to `[-1,1]³`.
    pub location: Tensor,
    /// Gaussian log-density of `sample`, one entry per row.
    pub log_prob: Var,
}

/// Tape handles for one batched rollout.
pub struct Rollout {
    pub logits: Var,
    pub log_probs: Vec<Var>,
    /// `locations[t][b]`: where example `b` looked at step `t`.
    pub locations: Vec<Vec<[f64; 3]>>,
    pub state: CoreState,
}

/// Where each step's next location comes from.
#[derive(Clone, Copy, Debug)]
pub enum Steering<'a> {
    /// The policy mean.
    Mean,
    /// A draw around the mean.
    Sample,
    /// Fixed unclamped samples indexed `[step][example]`; the last step's
    /// sample is only scored, never visited.
    Given(&'a [Vec<[f64; 3]>]),
}

/// One example's visit-ordered glimpse path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub locations: Vec<[f64; 3]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvnLossTerms {
    pub total: f64,
    pub classification: f64,
    pub reinforce: f64,
    pub baseline: f64,
}

/// Loss decomposition for a single rollout.
pub fn loss_terms(probability: f64, label: u8, log_probs: &[f64], baselines: &[f64]) -> Result<RvnLossTerms> {
    if log_probs.len() != baselines.len() {
        return Err(Error::Validation(format!(
            "{} log-probabilities for {} baselines",
            log_probs.len(),
            baselines.len()
        )));
    }
    let y = f64::from(label);
    let reward = reward(probability, label);
    let classification = -(y * probability.ln() + (1.0 - y) * (1.0 - probability).ln());
    let reinforce = -log_probs
        .iter()
        .zip(baselines)
        .map(|(lp, b)| lp * (reward - b))
        .sum::<f64>();
    let baseline = baselines.iter().map(|b| (b - reward).powi(2)).sum::<f64>();
    Ok(RvnLossTerms {
        total: classification + reinforce + baseline,
        classification,
        reinforce,
        baseline,
    })
}

/// 1 when the thresholded prediction matches the label.
pub fn reward(probability: f64, label: u8) -> f64 {
    if u8::from(probability >= 0.5) == label {
        1.0
    } else {
        0.0
    }
}

struct GlimpseBlock {
    conv: Conv,
    norm: BatchNorm,
}

pub struct Rvn {
    config: RvnConfig,
    store: ParamStore,
    glimpse_blocks: Vec<GlimpseBlock>,
    what_fc: Linear,
    where_fc: Linear,
    core: Vec<Lstm>,
    locator: Linear,
    classifier: Linear,
    baselines: crate::params::ParamId,
}

impl Rvn {
    pub fn new(config: RvnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let k = [config.kernel; 3];
        let mut glimpse_blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in config.glimpse_channels.iter().enumerate() {
            glimpse_blocks.push(GlimpseBlock {
                conv: Conv::new(
                    &mut store,
                    &format!("glimpse.conv{i}"),
                    in_ch,
                    out_ch,
                    k,
                    RELU_GAIN,
                    &mut rng,
                ),
                norm: BatchNorm::new(&mut store, &format!("glimpse.bn{i}"), out_ch),
            });
            in_ch = out_ch;
        }
        let what_fc = Linear::new(
            &mut store,
            "glimpse.what",
            config.glimpse_features()?,
            config.embed_dim,
            RELU_GAIN,
            &mut rng,
        );
        let where_fc = Linear::new(&mut store, "glimpse.where", 3, config.embed_dim, 1.0, &mut rng);
        // Start the "where" code around 1 so the product keeps the "what" signal.
        store.set(where_fc.bias, Tensor::full(&[config.embed_dim], 1.0))?;
        let mut core = Vec::with_capacity(CORE_LAYERS);
        let mut width = config.embed_dim;
        for i in 0..CORE_LAYERS {
            core.push(Lstm::new(
                &mut store,
                &format!("core.lstm{i}"),
                width,
                config.hidden,
                &mut rng,
            ));
            width = config.hidden;
        }
        let locator = Linear::new(&mut store, "locator", config.hidden, 3, 0.5, &mut rng);
        let classifier = Linear::new(&mut store, "classifier", config.hidden, 1, 1.0, &mut rng);
        let baselines = store.add("baselines", Tensor::zeros(&[config.steps]));
        Ok(Self {
            config,
            store,
            glimpse_blocks,
            what_fc,
            where_fc,
            core,
            locator,
            classifier,
            baselines,
        })
    }

    pub fn config(&self) -> &RvnConfig {
        &self.config
    }

    pub fn baselines(&self) -> &[f64] {
        self.store.get(self.baselines).data()
    }

    /// Batched glimpse cubes for `volumes` (each `D×H×W`) at `locations`.
    pub fn glimpses(&self, volumes: &[&Tensor], locations: &[[f64; 3]]) -> Result<Tensor> {
        let side = self.config.glimpse_side;
        let per = side.pow(3);
        let mut data = vec![0.0; volumes.len() * per];
        for ((v, loc), out) in volumes.iter().zip(locations).zip(data.chunks_mut(per)) {
            glimpse_into(v.data(), self.config.input_shape, *loc, side, out);
        }
        Tensor::new(vec![volumes.len(), 1, side, side, side], data)
    }

    /// `patches`: `B×1×g×g×g`; `locations`: `B×3`.
    pub fn glimpse_network(
        &self,
        tape: &mut Tape,
        fwd: &mut Forward,
        patches: Var,
        locations: Var,
    ) -> Result<GlimpseVars> {
        let batch = tape.shape(patches)[0];
        let pool = [self.config.pool; 3];
        let mut h = patches;
        for block in &self.glimpse_blocks {
            h = block.conv.forward(tape, fwd, h)?;
            h = block.norm.forward(tape, fwd, h)?;
            h = tape.relu(h);
            h = tape.max_pool(h, pool)?;
        }
        h = tape.reshape(h, &[batch, self.config.glimpse_features()?])?;
        let what = self.what_fc.forward(tape, fwd, h)?;
        let what = tape.relu(what);
        let place = self.where_fc.forward(tape, fwd, locations)?;
        let fused = tape.mul(what, place)?;
        Ok(GlimpseVars { what, place, fused })
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> CoreState {
        std::array::from_fn(|i| self.core[i].zero_state(tape, batch))
    }

    pub fn core_step(&self, tape: &mut Tape, fwd: &Forward, state: CoreState, input: Var) -> Result<CoreState> {
        let lower = self.core[0].step(tape, fwd, input, state[0])?;
        let upper = self.core[1].step(tape, fwd, lower.hidden, state[1])?;
        Ok([lower, upper])
    }

    /// Policy mean `tanh(fc(hidden))` and, when `stochastic`, a normal draw around it.
    pub fn location_network(
        &self,
        tape: &mut Tape,
        fwd: &mut Forward,
        hidden: Var,
        stochastic: bool,
    ) -> Result<LocationStep> {
        let pre = self.locator.forward(tape, fwd, hidden)?;
        let mean = tape.tanh(pre);
        let mut sample = tape.value(mean).clone();
        if stochastic {
            for v in sample.data_mut() {
                let z: f64 = StandardNormal.sample(&mut *fwd.rng);
                *v += self.config.sigma * z;
            }
        }
        self.score(tape, mean, sample)
    }

    /// Location step whose (unclamped) sample is given rather than drawn.
    pub fn location_network_at(
        &self,
        tape: &mut Tape,
        fwd: &mut Forward,
        hidden: Var,
        sample: Tensor,
    ) -> Result<LocationStep> {
        let pre = self.locator.forward(tape, fwd, hidden)?;
        let mean = tape.tanh(pre);
        self.score(tape, mean, sample)
    }

    fn score(&self, tape: &mut Tape, mean: Var, sample: Tensor) -> Result<LocationStep> {
        let location = sample.map(|v| v.clamp(-1.0, 1.0));
        let log_prob = tape.gaussian_log_prob(mean, &sample, self.config.sigma)?;
        Ok(LocationStep {
            mean,
            sample,
            location,
            log_prob,
        })
    }

    /// Logits `batch × 1`.
    pub fn classification_network(&self, tape: &mut Tape, fwd: &Forward, hidden: Var) -> Result<Var> {
        self.classifier.forward(tape, fwd, hidden)
    }

    pub fn rollout(
        &self,
        tape: &mut Tape,
        fwd: &mut Forward,
        volumes: &[&Tensor],
        stochastic: bool,
    ) -> Result<Rollout> {
        let steering = if stochastic { Steering::Sample } else { Steering::Mean };
        self.rollout_steered(tape, fwd, volumes, steering)
    }

    pub fn rollout_steered(
        &self,
        tape: &mut Tape,
        fwd: &mut Forward,
        volumes: &[&Tensor],
        steering: Steering<'_>,
    ) -> Result<Rollout> {
        if let Steering::Given(path) = steering {
            if path.len() != self.config.steps || path.iter().any(|p| p.len() != volumes.len()) {
                return Err(Error::Shape(format!(
                    "given path must hold {} steps of {} samples",
                    self.config.steps,
                    volumes.len()
                )));
            }
        }
        for v in volumes {
            if v.shape() != self.config.input_shape {
                return Err(Error::Shape(format!(
                    "rvn expects volumes of {:?}, got {:?}",
                    self.config.input_shape,
                    v.shape()
                )));
            }
        }
        let batch = volumes.len();
        let mut current = vec![[0.0; 3]; batch];
        let mut state = self.zero_state(tape, batch);
        let mut log_probs = Vec::with_capacity(self.config.steps);
        let mut locations = Vec::with_capacity(self.config.steps);
        for t in 0..self.config.steps {
            let patches = tape.constant(self.glimpses(volumes, &current)?);
            let loc = tape.constant(Tensor::new(
                vec![batch, 3],
                current.iter().flatten().copied().collect(),
            )?);
            let g = self.glimpse_network(tape, fwd, patches, loc)?;
            state = self.core_step(tape, fwd, state, g.fused)?;
            let top = state[CORE_LAYERS - 1].hidden;
            let step = match steering {
                Steering::Mean => self.location_network(tape, fwd, top, false)?,
                Steering::Sample => self.location_network(tape, fwd, top, true)?,
                Steering::Given(path) => {
                    let sample = Tensor::new(vec![batch, 3], path[t].iter().flatten().copied().collect())?;
                    self.location_network_at(tape, fwd, top, sample)?
                }
            };
            locations.push(std::mem::take(&mut current));
            log_probs.push(step.log_prob);
            current = step.location.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        }
        let logits = self.classification_network(tape, fwd, state[CORE_LAYERS - 1].hidden)?;
        let logits = tape.reshape(logits, &[batch])?;
        Ok(Rollout {
            logits,
            log_probs,
            locations,
            state,
        })
    }

    /// Eval-mode rollouts returning each example's path; deterministic unless
    /// `stochastic`, in which case `seed` drives the draws.
    pub fn trajectories(
        &self,
        inputs: &[&Tensor],
        labels: Option<&[u8]>,
        stochastic: bool,
        seed: u64,
    ) -> Result<Vec<Trajectory>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fwd = Forward::new(&self.store, Mode::Eval, &mut rng);
        let mut tape = Tape::new();
        let r = self.rollout(&mut tape, &mut fwd, inputs, stochastic)?;
        let logits = tape.value(r.logits).data().to_vec();
        Ok((0..inputs.len())
            .map(|b| {
                let probability = crate::autograd::sigmoid(logits[b]);
                let reward = labels.map_or(0.0, |l| reward(probability, l[b]));
                Trajectory {
                    locations: r.locations.iter().map(|step| step[b]).collect(),
                    log_probs: r.log_probs.iter().map(|&v| tape.value(v).data()[b]).collect(),
                    rewards: vec![reward; self.config.steps],
                    probability,
                }
            })
            .collect())
    }
}

impl Classifier for Rvn {
    fn config(&self) -> ModelConfig {
        ModelConfig::Rvn(self.config.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, volume: &VoxelVolume) -> Result<Tensor> {
        let v = preprocess_volume(volume, self.config.input_shape)?;
        Tensor::new(
            self.config.input_shape.to_vec(),
            v.voxels().iter().map(|&x| f64::from(x)).collect(),
        )
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        labels: &[u8],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchLoss> {
        let copies = if mode == Mode::Train { self.config.rollouts } else { 1 };
        let inputs: Vec<&Tensor> = (0..copies).flat_map(|_| inputs.iter().copied()).collect();
        let labels: Vec<u8> = (0..copies).flat_map(|_| labels.iter().copied()).collect();
        let steering = if mode == Mode::Train {
            Steering::Sample
        } else {
            Steering::Mean
        };
        Ok(self.steered_loss(tape, &inputs, &labels, mode, rng, steering)?.batch)
    }

    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<f64>> {
        Ok(self
            .trajectories(inputs, None, false, 0)?
            .into_iter()
            .map(|t| t.probability)
            .collect())
    }

    fn as_rvn(&self) -> Option<&Rvn> {
        Some(self)
    }
}

/// The hybrid loss with its three terms still on the tape.
pub struct SteeredLoss {
    pub batch: BatchLoss,
    pub classification: Var,
    /// Score-function term; the advantages inside are constants.
    pub reinforce: Var,
    pub baseline: Var,
}

impl Rvn {
    /// Hybrid loss of one rollout per input, steered as given.
    pub fn steered_loss(
        &self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        labels: &[u8],
        mode: Mode,
        rng: &mut ChaCha8Rng,
        steering: Steering<'_>,
    ) -> Result<SteeredLoss> {
        if inputs.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let batch = inputs.len();
        let mut fwd = Forward::new(&self.store, mode, rng);
        let r = self.rollout_steered(tape, &mut fwd, inputs, steering)?;
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let classification = tape.bce_with_logits(r.logits, &targets)?;

        let rewards: Vec<f64> = tape
            .value(r.logits)
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &l)| reward(crate::autograd::sigmoid(z), l))
            .collect();
        let baselines = self.store.get(self.baselines).data().to_vec();
        let mut policy_terms = Vec::with_capacity(self.config.steps);
        for (t, &lp) in r.log_probs.iter().enumerate() {
            let advantage = Tensor::new(vec![batch], rewards.iter().map(|r| r - baselines[t]).collect())?;
            let weighted = tape.mul_const(lp, advantage)?;
            policy_terms.push(tape.sum(weighted));
        }
        let mut reinforce = policy_terms[0];
        for &p in &policy_terms[1..] {
            reinforce = tape.add(reinforce, p)?;
        }
        let reinforce = tape.scale(reinforce, -1.0 / batch as f64);

        let b = fwd.param(tape, self.baselines);
        let b = tape.broadcast_rows(b, batch)?;
        let neg_rewards = Tensor::new(
            vec![batch, self.config.steps],
            rewards
                .iter()
                .flat_map(|&r| std::iter::repeat_n(-r, self.config.steps))
                .collect(),
        )?;
        let residual = tape.add_const(b, &neg_rewards)?;
        let baseline = tape.sum_squares(residual);
        let baseline = tape.scale(baseline, 1.0 / batch as f64);

        let terms = vec![
            ("classification", tape.value(classification).item()),
            ("reinforce", tape.value(reinforce).item()),
            ("baseline", tape.value(baseline).item()),
            ("reward", rewards.iter().sum::<f64>() / batch as f64),
        ];
        let loss = tape.add(classification, reinforce)?;
        let loss = tape.add(loss, baseline)?;
        Ok(SteeredLoss {
            batch: BatchLoss {
                loss,
                bn_updates: fwd.bn_updates,
                terms,
            },
            classification,
            reinforce,
            baseline,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub volume_shape: [usize; 3],
    pub probability: f64,
    /// Location in `[-1,1]³` per visited step, first glimpse first.
    pub locations: Vec<[f64; 3]>,
    /// The same points as voxel indices.
    pub voxels: Vec<[usize; 3]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl TrajectoryFile {
    pub fn new(trajectory: &Trajectory, volume_shape: [usize; 3]) -> Result<Self> {
        if trajectory.locations.is_empty() {
            return Err(Error::Validation("empty trajectory".into()));
        }
        Ok(Self {
            volume_shape,
            probability: trajectory.probability,
            locations: trajectory.locations.clone(),
            voxels: trajectory
                .locations
                .iter()
                .map(|&l| location_to_voxel(l, volume_shape))
                .collect(),
            log_probs: trajectory.log_probs.clone(),
            rewards: trajectory.rewards.clone(),
        })
    }
}

pub fn export_trajectory(trajectory: &Trajectory, volume_shape: [usize; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = TrajectoryFile::new(trajectory, volume_shape)?;
    fs::write(path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(path, e))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<TrajectoryFile> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RvnConfig {
        RvnConfig {
            input_shape: [8, 8, 8],
            glimpse_side: 4,
            glimpse_channels: vec![2, 2],
            kernel: 3,
            pool: 2,
            embed_dim: 5,
            hidden: 4,
            steps: 3,
            sigma: 0.2,
            rollouts: 1,
        }
    }

    #[test]
    fn centre_glimpse_of_64_cube() {
        let v = VoxelVolume::from_fn([64, 64, 64], |d, h, w| (d * 4096 + h * 64 + w) as f32);
        let g = extract_glimpse(&v, [0.0; 3], 40);
        assert_eq!(location_to_voxel([0.0; 3], [64; 3]), [32, 32, 32]);
        assert_eq!(g.at(20, 20, 20), v.at(32, 32, 32));
        assert_eq!(g.at(0, 0, 0), v.at(12, 12, 12));
    }

    #[test]
    fn corner_glimpse_is_mostly_padding() {
        let v = VoxelVolume::from_fn([64, 64, 64], |_, _, _| 1.0);
        let g = extract_glimpse(&v, [-1.0; 3], 40);
        let filled = g.voxels().iter().filter(|&&x| x == 1.0).count();
        assert_eq!(filled, 20 * 20 * 20);
    }

    #[test]
    fn full_side_glimpse_is_identity() {
        let v = VoxelVolume::from_fn([8, 8, 8], |d, h, w| (d + 2 * h + 3 * w) as f32);
        assert_eq!(extract_glimpse(&v, [0.0; 3], 8), v);
    }

    #[test]
    fn deterministic_rollouts_repeat() {
        let m = Rvn::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
        let a = m.trajectories(&[&x], None, false, 5).unwrap();
        let b = m.trajectories(&[&x], None, false, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].locations.len(), 3);
        assert_eq!(a[0].locations[0], [0.0; 3]);
    }

    #[test]
    fn stochastic_locations_stay_in_bounds() {
        let mut cfg = tiny();
        cfg.sigma = 3.0;
        let m = Rvn::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8, 8, 8], 1.0, &mut rng);
        let t = m.trajectories(&[&x, &x], None, true, 5).unwrap();
        for traj in &t {
            for l in &traj.locations {
                assert!(l.iter().all(|c| (-1.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn loss_terms_edge_cases() {
        let lp = [-1.0, -2.0, -0.5];
        let t = loss_terms(0.9, 1, &lp, &[1.0; 3]).unwrap();
        assert_eq!(t.reinforce, 0.0);
        let t = loss_terms(0.9, 0, &lp, &[0.0; 3]).unwrap();
        assert_eq!(t.reinforce, 0.0);
        assert!(loss_terms(0.9, 0, &lp, &[0.0; 2]).is_err());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let traj = Trajectory {
            locations: vec![[0.0; 3], [0.5, -0.5, 1.0]],
            log_probs: vec![0.1, 0.2],
            rewards: vec![1.0, 1.0],
            probability: 0.7,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        export_trajectory(&traj, [64; 3], &p).unwrap();
        let f = load_trajectory(&p).unwrap();
        assert_eq!(f.voxels[0], [32, 32, 32]);
        assert_eq!(f.locations, traj.locations);
    }
}
