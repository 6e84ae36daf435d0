//! Baseline volumetric CNN: five conv→BN→ReLU→dropout→max-pool blocks, then
//! three fully connected layers and a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dropout, BatchNorm, Conv, Forward, Linear, Mode, RELU_GAIN};
use super::{BatchLoss, Classifier, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::dataset::preprocess_volume;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scan_io::VoxelVolume;
use crate::tensor::Tensor;

pub const BLOCKS: usize = 5;
pub const FC_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cnn3dConfig {
    pub input_shape: [usize; 3],
    pub channels: [usize; BLOCKS],
    pub kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    /// Widths of the three fc layers; the last must be 1.
    pub fc: [usize; FC_LAYERS],
}

impl Default for Cnn3dConfig {
    fn default() -> Self {
        Self {
            input_shape: [64, 64, 64],
            channels: [8, 16, 32, 64, 64],
            kernel: 3,
            pool: 2,
            dropout: 0.3,
            fc: [256, 64, 1],
        }
    }
}

impl Cnn3dConfig {
    /// Spatial dims after the last pooling stage.
    pub fn pooled_shape(&self) -> Result<[usize; 3]> {
        let mut dims = self.input_shape;
        for block in 0..BLOCKS {
            for d in &mut dims {
                *d /= self.pool;
                if *d == 0 {
                    return Err(Error::Config(format!(
                        "pooling by {} collapses input {:?} at block {}",
                        self.pool,
                        self.input_shape,
                        block + 1
                    )));
                }
            }
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) || self.channels.contains(&0) || self.fc.contains(&0) {
            return Err(Error::Config("cnn3d sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.pool == 0 {
            return Err(Error::Config("pool factor must be positive".into()));
        }
        if self.fc[FC_LAYERS - 1] != 1 {
            return Err(Error::Config("last fc layer must have width 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        self.pooled_shape().map(|_| ())
    }

    pub fn flat_features(&self) -> Result<usize> {
        Ok(self.pooled_shape()?.iter().product::<usize>() * self.channels[BLOCKS - 1])
    }
}

struct Block {
    conv: Conv,
    norm: BatchNorm,
}

pub struct Cnn3d {
    config: Cnn3dConfig,
    store: ParamStore,
    blocks: Vec<Block>,
    fc: Vec<Linear>,
}

impl Cnn3d {
    pub fn new(config: Cnn3dConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let k = [config.kernel; 3];
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut in_ch = 1;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            blocks.push(Block {
                conv: Conv::new(
                    &mut store,
                    &format!("block{i}.conv"),
                    in_ch,
                    out_ch,
                    k,
                    RELU_GAIN,
                    &mut rng,
                ),
                norm: BatchNorm::new(&mut store, &format!("block{i}.bn"), out_ch),
            });
            in_ch = out_ch;
        }
        let mut fc = Vec::with_capacity(FC_LAYERS);
        let mut width = config.flat_features()?;
        for (i, &out) in config.fc.iter().enumerate() {
            let gain = if i + 1 < FC_LAYERS { RELU_GAIN } else { 1.0 };
            fc.push(Linear::new(&mut store, &format!("fc{i}"), width, out, gain, &mut rng));
            width = out;
        }
        Ok(Self {
            config,
            store,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &Cnn3dConfig {
        &self.config
    }

    /// Logits for a `B×1×D×H×W` batch.
    pub fn logits(&self, tape: &mut Tape, fwd: &mut Forward, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let expected = [
            1,
            self.config.input_shape[0],
            self.config.input_shape[1],
            self.config.input_shape[2],
        ];
        if shape.len() != 5 || shape[1..] != expected {
            return Err(Error::Shape(format!("cnn3d expects B×{expected:?}, got {shape:?}")));
        }
        let batch = shape[0];
        let pool = [self.config.pool; 3];
        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(tape, fwd, h)?;
            h = block.norm.forward(tape, fwd, h)?;
            h = tape.relu(h);
            h = dropout(tape, fwd, h, self.config.dropout)?;
            h = tape.max_pool(h, pool)?;
        }
        let flat = self.config.flat_features()?;
        h = tape.reshape(h, &[batch, flat])?;
        for (i, layer) in self.fc.iter().enumerate() {
            h = layer.forward(tape, fwd, h)?;
            if i + 1 < self.fc.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

fn stack_inputs(inputs: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

impl Classifier for Cnn3d {
    fn config(&self) -> ModelConfig {
        ModelConfig::Cnn3d(self.config.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, volume: &VoxelVolume) -> Result<Tensor> {
        let v = preprocess_volume(volume, self.config.input_shape)?;
        let [d, h, w] = self.config.input_shape;
        Tensor::new(vec![1, d, h, w], v.voxels().iter().map(|&x| f64::from(x)).collect())
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        labels: &[u8],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchLoss> {
        let mut fwd = Forward::new(&self.store, mode, rng);
        let x = tape.constant(stack_inputs(inputs)?);
        let z = self.logits(tape, &mut fwd, x)?;
        let z = tape.reshape(z, &[inputs.len()])?;
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let loss = tape.bce_with_logits(z, &targets)?;
        Ok(BatchLoss {
            loss,
            bn_updates: fwd.bn_updates,
            terms: Vec::new(),
        })
    }

    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward::new(&self.store, Mode::Eval, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(stack_inputs(inputs)?);
        let z = self.logits(&mut tape, &mut fwd, x)?;
        let p = tape.sigmoid(z);
        Ok(tape.value(p).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Cnn3dConfig {
        Cnn3dConfig {
            input_shape: [8, 8, 8],
            channels: [2, 2, 3, 3, 3],
            kernel: 3,
            pool: 1,
            dropout: 0.3,
            fc: [4, 3, 1],
        }
    }

    #[test]
    fn default_config_audit() {
        let c = Cnn3dConfig::default();
        assert_eq!(c.pooled_shape().unwrap(), [2, 2, 2]);
        let m = Cnn3d::new(c, 1).unwrap();
        let s = m.store();
        assert_eq!(s.get(s.id("block0.conv.weight").unwrap()).shape(), &[8, 1, 3, 3, 3]);
        assert_eq!(s.get(s.id("block4.conv.weight").unwrap()).shape(), &[64, 64, 3, 3, 3]);
        assert_eq!(s.get(s.id("fc0.weight").unwrap()).shape(), &[512, 256]);
        assert_eq!(s.get(s.id("fc2.weight").unwrap()).shape(), &[64, 1]);
    }

    #[test]
    fn collapsing_pool_rejected() {
        let c = Cnn3dConfig {
            input_shape: [16, 16, 16],
            ..Cnn3dConfig::default()
        };
        assert!(matches!(Cnn3d::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_params() {
        let a = Cnn3d::new(tiny(), 4).unwrap();
        let b = Cnn3d::new(tiny(), 4).unwrap();
        for (x, y) in a.store().entries().iter().zip(b.store().entries()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn eval_is_deterministic_and_in_unit_interval() {
        let m = Cnn3d::new(tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let a = m.predict(&[&x]).unwrap();
        let b = m.predict(&[&x]).unwrap();
        assert_eq!(a, b);
        assert!(a[0] > 0.0 && a[0] < 1.0);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut m = Cnn3d::new(tiny(), 2).unwrap();
        let ids: Vec<_> = m.store().trainable_ids().collect();
        for id in ids {
            let shape = m.store().get(id).shape().to_vec();
            m.store_mut().set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        assert_eq!(m.predict(&[&x]).unwrap(), vec![0.5]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = Cnn3d::new(tiny(), 2).unwrap();
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        assert!(matches!(m.predict(&[&x]), Err(Error::Shape(_))));
    }
}
