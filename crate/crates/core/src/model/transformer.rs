//! Frame-sequence transformer.
//!
//! Each of the middle `n_frames` axial slices goes through a 1→3 channel stem
//! convolution and a VGG-style 2D stack, then a linear projection to `d`
//! features. Sinusoidal position codes are added, and a learned query vector
//! is refined against the frame memory by three block head units
//! (multi-head attention and a feed-forward layer, each with a residual
//! connection and layer norm). A two-way softmax classifier reads the query.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Forward, LayerNorm, Linear, Mode, RELU_GAIN};
use super::{BatchLoss, Classifier, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::dataset::{resize_slice, select_frames, standardize};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scan_io::VoxelVolume;
use crate::tensor::Tensor;

pub const BLOCK_HEAD_UNITS: usize = 3;
pub const STEM_CHANNELS: usize = 3;
const FRAME_KERNEL: [usize; 3] = [1, 3, 3];
const FRAME_POOL: [usize; 3] = [1, 2, 2];

/// Prefixes of the parameters that a pretrained backbone provides.
pub const BACKBONE_PREFIXES: [&str; 2] = ["stem.", "backbone."];

pub fn vgg16_stages() -> Vec<Vec<usize>> {
    vec![
        vec![64, 64],
        vec![128, 128],
        vec![256, 256, 256],
        vec![512, 512, 512],
        vec![512, 512, 512],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_frames: usize,
    pub frame_size: [usize; 2],
    /// Conv output channels per pooled stage.
    pub backbone: Vec<Vec<usize>>,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_frames: 96,
            frame_size: [224, 224],
            backbone: vgg16_stages(),
            d_model: 512,
            heads: 8,
            ff_dim: 2048,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.frame_size.contains(&0) || self.ff_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.d_model == 0 || self.d_model % 2 == 1 {
            return Err(Error::Config(format!(
                "positional encoding needs an even feature dim, got {}",
                self.d_model
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature dim {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.backbone.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Config("every backbone stage needs positive channels".into()));
        }
        self.pooled_frame().map(|_| ())
    }

    fn pooled_frame(&self) -> Result<[usize; 2]> {
        let mut dims = self.frame_size;
        for _ in &self.backbone {
            dims = dims.map(|d| d / 2);
            if dims.contains(&0) {
                return Err(Error::Config(format!(
                    "frame {:?} collapses under {} pooled stages",
                    self.frame_size,
                    self.backbone.len()
                )));
            }
        }
        Ok(dims)
    }

    fn backbone_out_channels(&self) -> usize {
        self.backbone
            .last()
            .and_then(|s| s.last())
            .copied()
            .unwrap_or(STEM_CHANNELS)
    }

    pub fn frame_features(&self) -> Result<usize> {
        let [h, w] = self.pooled_frame()?;
        Ok(h * w * self.backbone_out_channels())
    }

    /// Trainable scalars, computed from the config alone.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let d = self.d_model;
        let mut total = Conv::param_count(1, STEM_CHANNELS, FRAME_KERNEL);
        let mut in_ch = STEM_CHANNELS;
        for stage in &self.backbone {
            for &out in stage {
                total += Conv::param_count(in_ch, out, FRAME_KERNEL);
                in_ch = out;
            }
        }
        total += Linear::param_count(self.frame_features()?, d);
        total += d;
        let unit = 4 * Linear::param_count(d, d)
            + 2 * 2 * d
            + Linear::param_count(d, self.ff_dim)
            + Linear::param_count(self.ff_dim, d);
        total += BLOCK_HEAD_UNITS * unit;
        total += Linear::param_count(d, 2);
        Ok(total)
    }
}

/// `PE(p, 2i) = sin(p / 10000^(2i/d))`, `PE(p, 2i+1) = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d % 2 == 1 {
        return Err(Error::Config(format!("positional encoding needs an even dim, got {d}")));
    }
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d], data)
}

pub fn positional_encode(features: &Tensor) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    let mut out = positional_encoding(n, d)?;
    out.add_assign(features);
    Ok(out)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (_, dq) = tape.value(q).dims2()?;
    let (nk, dk) = tape.value(k).dims2()?;
    let (nv, _) = tape.value(v).dims2()?;
    if dq != dk || nk != nv {
        return Err(Error::Shape(format!(
            "attention with Q·{dq}, K {nk}×{dk}, V with {nv} rows"
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

pub struct BlockHeadUnit {
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub out_proj: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub heads: usize,
}

impl BlockHeadUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{d} features cannot split into {heads} heads")));
        }
        Ok(Self {
            query_proj: Linear::new(store, &format!("{name}.query"), d, d, 1.0, rng),
            key_proj: Linear::new(store, &format!("{name}.key"), d, d, 1.0, rng),
            value_proj: Linear::new(store, &format!("{name}.value"), d, d, 1.0, rng),
            out_proj: Linear::new(store, &format!("{name}.out"), d, d, 1.0, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, ff, RELU_GAIN, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff, d, 1.0, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
            heads,
        })
    }

    /// Multi-head attention of `query` (rows × d) over `memory` (n × d),
    /// before the residual connection.
    pub fn multi_head_attention(&self, tape: &mut Tape, fwd: &Forward, query: Var, memory: Var) -> Result<Var> {
        let d = tape.value(query).dims2()?.1;
        let q = self.query_proj.forward(tape, fwd, query)?;
        let k = self.key_proj.forward(tape, fwd, memory)?;
        let v = self.value_proj.forward(tape, fwd, memory)?;
        let width = d / self.heads;
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * width, width)?;
            let kh = tape.slice_cols(k, h * width, width)?;
            let vh = tape.slice_cols(v, h * width, width)?;
            outputs.push(attention(tape, qh, kh, vh)?);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat_cols(&outputs)?
        };
        self.out_proj.forward(tape, fwd, joined)
    }

    pub fn forward(&self, tape: &mut Tape, fwd: &Forward, query: Var, memory: Var) -> Result<Var> {
        let attended = self.multi_head_attention(tape, fwd, query, memory)?;
        let x = tape.add(query, attended)?;
        let x = self.attn_norm.forward(tape, fwd, x)?;
        let hidden = self.ff_in.forward(tape, fwd, x)?;
        let hidden = tape.relu(hidden);
        let ff = self.ff_out.forward(tape, fwd, hidden)?;
        let y = tape.add(x, ff)?;
        self.ff_norm.forward(tape, fwd, y)
    }
}

pub struct FrameTransformer {
    config: TransformerConfig,
    store: ParamStore,
    stem: Conv,
    backbone: Vec<Vec<Conv>>,
    projection: Linear,
    query: ParamId,
    units: Vec<BlockHeadUnit>,
    classifier: Linear,
}

impl FrameTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let stem = Conv::new(&mut store, "stem", 1, STEM_CHANNELS, FRAME_KERNEL, 1.0, &mut rng);
        let mut backbone = Vec::with_capacity(config.backbone.len());
        let mut in_ch = STEM_CHANNELS;
        for (s, stage) in config.backbone.iter().enumerate() {
            let mut convs = Vec::with_capacity(stage.len());
            for (c, &out) in stage.iter().enumerate() {
                convs.push(Conv::new(
                    &mut store,
                    &format!("backbone.stage{s}.conv{c}"),
                    in_ch,
                    out,
                    FRAME_KERNEL,
                    RELU_GAIN,
                    &mut rng,
                ));
                in_ch = out;
            }
            backbone.push(convs);
        }
        let d = config.d_model;
        let projection = Linear::new(&mut store, "projection", config.frame_features()?, d, 1.0, &mut rng);
        let query = store.add("query", Tensor::randn(&[1, d], 1.0, &mut rng));
        let units = (0..BLOCK_HEAD_UNITS)
            .map(|u| {
                BlockHeadUnit::new(
                    &mut store,
                    &format!("unit{u}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(&mut store, "classifier", d, 2, 1.0, &mut rng);
        Ok(Self {
            config,
            store,
            stem,
            backbone,
            projection,
            query,
            units,
            classifier,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn units(&self) -> &[BlockHeadUnit] {
        &self.units
    }

    /// Copy stem and backbone weights from another model's parameters.
    pub fn load_backbone(&mut self, source: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for prefix in BACKBONE_PREFIXES {
            copied += self.store.copy_prefix_from(source, prefix)?;
        }
        Ok(copied)
    }

    /// `frames`: `F×1×1×H×W` (any F) → stem output `F×3×1×H×W`.
    pub fn stem_conv(&self, tape: &mut Tape, fwd: &Forward, frames: Var) -> Result<Var> {
        self.stem.forward(tape, fwd, frames)
    }

    /// Per-frame features `F×d`; frames never interact.
    pub fn base_features(&self, tape: &mut Tape, fwd: &Forward, frames: Var) -> Result<Var> {
        let count = tape.shape(frames)[0];
        let [h, w] = self.config.frame_size;
        if tape.shape(frames) != [count, 1, 1, h, w] {
            return Err(Error::Shape(format!(
                "frames must be F×1×1×{h}×{w}, got {:?}",
                tape.shape(frames)
            )));
        }
        let mut x = self.stem_conv(tape, fwd, frames)?;
        for stage in &self.backbone {
            for conv in stage {
                x = conv.forward(tape, fwd, x)?;
                x = tape.relu(x);
            }
            x = tape.max_pool(x, FRAME_POOL)?;
        }
        let x = tape.reshape(x, &[count, self.config.frame_features()?])?;
        self.projection.forward(tape, fwd, x)
    }

    /// Refine the learned query against `memory` (n × d, position-coded).
    pub fn decode(&self, tape: &mut Tape, fwd: &Forward, memory: Var) -> Result<Var> {
        let mut q = fwd.param(tape, self.query);
        for unit in &self.units {
            q = unit.forward(tape, fwd, q, memory)?;
        }
        Ok(q)
    }

    /// Two-class logits, one row per example.
    pub fn logits(&self, tape: &mut Tape, fwd: &Forward, inputs: &[&Tensor]) -> Result<Var> {
        let n = self.config.n_frames;
        let [h, w] = self.config.frame_size;
        let mut data = Vec::with_capacity(inputs.len() * n * h * w);
        for t in inputs {
            if t.shape() != [n, 1, 1, h, w] {
                return Err(Error::Shape(format!(
                    "expected {n} frames of {h}×{w}, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let frames = tape.constant(Tensor::new(vec![inputs.len() * n, 1, 1, h, w], data)?);
        let features = self.base_features(tape, fwd, frames)?;
        let pe = positional_encoding(n, self.config.d_model)?;
        let mut queries = Vec::with_capacity(inputs.len());
        for b in 0..inputs.len() {
            let rows = tape.slice_rows(features, b * n, n)?;
            let memory = tape.add_const(rows, &pe)?;
            queries.push(self.decode(tape, fwd, memory)?);
        }
        let q = if queries.len() == 1 {
            queries[0]
        } else {
            tape.concat_rows(&queries)?
        };
        self.classifier.forward(tape, fwd, q)
    }

    /// Class probabilities, one `[p0, p1]` pair per example.
    pub fn probabilities(&self, inputs: &[&Tensor]) -> Result<Vec<[f64; 2]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = Forward::new(&self.store, Mode::Eval, &mut rng);
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, &fwd, inputs)?;
        let p = tape.softmax_rows(z)?;
        Ok(tape.value(p).data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

impl Classifier for FrameTransformer {
    fn config(&self) -> ModelConfig {
        ModelConfig::Transformer(self.config.clone())
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn prepare(&self, volume: &VoxelVolume) -> Result<Tensor> {
        let mut v = volume.clone();
        standardize(v.voxels_mut());
        let [h, w] = self.config.frame_size;
        let frames = select_frames(&v, self.config.n_frames)?;
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in &frames {
            data.extend(resize_slice(f, h, w)?.pixels.iter().map(|&x| f64::from(x)));
        }
        Tensor::new(vec![frames.len(), 1, 1, h, w], data)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        labels: &[u8],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchLoss> {
        let fwd = Forward::new(&self.store, mode, rng);
        let z = self.logits(tape, &fwd, inputs)?;
        let targets: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        let loss = tape.softmax_cross_entropy(z, &targets)?;
        Ok(BatchLoss {
            loss,
            bn_updates: Vec::new(),
            terms: Vec::new(),
        })
    }

    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<f64>> {
        Ok(self.probabilities(inputs)?.into_iter().map(|p| p[1]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_conv_parameter_count() {
        let mut total = 0;
        let mut in_ch = 3;
        for stage in vgg16_stages() {
            for out in stage {
                total += Conv::param_count(in_ch, out, FRAME_KERNEL);
                in_ch = out;
            }
        }
        assert_eq!(total, 14_714_688);
    }

    #[test]
    fn default_config_is_valid() {
        let c = TransformerConfig::default();
        assert_eq!(c.frame_features().unwrap(), 512 * 7 * 7);
        assert!(c.param_count().unwrap() > 14_714_688);
    }

    #[test]
    fn odd_dim_and_bad_heads_rejected() {
        let c = TransformerConfig {
            d_model: 511,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TransformerConfig {
            heads: 7,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(positional_encoding(2, 3).is_err());
    }

    #[test]
    fn position_zero_alternates() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoding_is_not_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let once = positional_encode(&x).unwrap();
        let twice = positional_encode(&once).unwrap();
        assert!(once.max_abs_diff(&twice) > 0.1);
    }
}
