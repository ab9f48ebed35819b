//! The shallow triple-stream network: three parallel conv(3x3, pad 1) →
//! ReLU → max-pool(3, stride 3, pad 1) streams with 3, 5 and 8 kernels,
//! channel merge, 2x2 average pool, flatten to 400, one dense 400→3 layer
//! and softmax. Backpropagation is written out per layer.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::EmotionClass;
use crate::flow::{FlowCube, CUBE_CHANNELS, CUBE_SIDE};
use crate::numerics::{
    avg_pool, concat_channels, conv2d_multi, max_pool_with_argmax, Grid3, ShapeError,
};

pub const STREAM_KERNELS: [usize; 3] = [3, 5, 8];
pub const KERNEL_SIDE: usize = 3;
pub const KERNEL_LEN: usize = KERNEL_SIDE * KERNEL_SIDE * CUBE_CHANNELS;
pub const POOLED_SIDE: usize = 10;
pub const MERGED_CHANNELS: usize = 16;
pub const AVG_SIDE: usize = 5;
pub const FEATURES: usize = AVG_SIDE * AVG_SIDE * MERGED_CHANNELS;
pub const CLASSES: usize = EmotionClass::COUNT;

pub const MODEL_MAGIC: &[u8; 4] = b"STSM";
pub const MODEL_VERSION: u8 = 1;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("input must be {CUBE_SIDE}x{CUBE_SIDE}x{CUBE_CHANNELS}, got {0:?}")]
    InputShape((usize, usize, usize)),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One convolution stream: `kernels.len()` kernels of 3x3x3 and one bias each.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub kernels: Vec<Grid3>,
    pub bias: Vec<f64>,
}

impl Stream {
    fn zeros(n: usize) -> Self {
        Self {
            kernels: vec![Grid3::zeros(KERNEL_SIDE, KERNEL_SIDE, CUBE_CHANNELS); n],
            bias: vec![0.0; n],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.iter().map(|k| k.data().len()).sum::<usize>() + self.bias.len()
    }
}

/// All learnable scalars. `fc_weights` is `CLASSES x FEATURES`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub streams: [Stream; 3],
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros() -> Self {
        Self {
            streams: STREAM_KERNELS.map(Stream::zeros),
            fc_weights: vec![0.0; CLASSES * FEATURES],
            fc_bias: vec![0.0; CLASSES],
        }
    }

    /// Zero biases; weights uniform in `±1/sqrt(fan_in)`.
    pub fn init(rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros();
        let conv_bound = 1.0 / (KERNEL_LEN as f64).sqrt();
        for s in &mut p.streams {
            for k in &mut s.kernels {
                for v in k.data_mut() {
                    *v = rng.random_range(-conv_bound..conv_bound);
                }
            }
        }
        let fc_bound = 1.0 / (FEATURES as f64).sqrt();
        for v in &mut p.fc_weights {
            *v = rng.random_range(-fc_bound..fc_bound);
        }
        p
    }

    /// Visits every scalar in canonical order: per stream, kernel weights
    /// (kernel-major, then row, column, channel) then biases; then the
    /// classifier weights and biases.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for s in &mut self.streams {
            for k in &mut s.kernels {
                k.data_mut().iter_mut().for_each(&mut f);
            }
            s.bias.iter_mut().for_each(&mut f);
        }
        self.fc_weights.iter_mut().for_each(&mut f);
        self.fc_bias.iter_mut().for_each(&mut f);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(count_parameters(self));
        let mut c = self.clone();
        c.for_each_mut(|v| out.push(*v));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Learnable scalar count.
pub fn count_parameters(params: &NetworkParams) -> usize {
    params
        .streams
        .iter()
        .map(Stream::parameter_count)
        .sum::<usize>()
        + params.fc_weights.len()
        + params.fc_bias.len()
}

/// Gradients share the parameter layout.
pub type Gradients = NetworkParams;

#[cfg(test)]
impl NetworkParams {
    fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        let mut src = other.flatten().into_iter();
        self.for_each_mut(|v| *v += scale * src.next().expect("same layout"));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTape {
    /// Pre-activation conv output, 28x28xk.
    pub conv: Grid3,
    /// After ReLU.
    pub relu: Grid3,
    /// Max-pooled, 10x10xk.
    pub pooled: Grid3,
    pub argmax: Vec<usize>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    pub input: Grid3,
    pub streams: Vec<StreamTape>,
    /// 10x10x16
    pub merged: Grid3,
    /// 5x5x16, also the flattened feature vector in row-major channel-last order.
    pub averaged: Grid3,
    pub logits: [f64; CLASSES],
    pub probabilities: [f64; CLASSES],
}

pub fn softmax(logits: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

pub fn forward(params: &NetworkParams, input: &Grid3) -> Result<ActivationTape, ModelError> {
    if input.shape() != (CUBE_SIDE, CUBE_SIDE, CUBE_CHANNELS) {
        return Err(ModelError::InputShape(input.shape()));
    }
    let mut streams = Vec::with_capacity(3);
    for s in &params.streams {
        let conv = conv2d_multi(input, &s.kernels, &s.bias, (1, 1), 1)?;
        let relu = Grid3::new(
            conv.height(),
            conv.width(),
            conv.channels(),
            conv.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let pool = max_pool_with_argmax(&relu, (3, 3), (3, 3), 1)?;
        streams.push(StreamTape {
            conv,
            relu,
            pooled: pool.pooled,
            argmax: pool.argmax,
        });
    }
    let merged = concat_channels(&streams.iter().map(|s| &s.pooled).collect::<Vec<_>>())?;
    let averaged = avg_pool(&merged, (2, 2), (2, 2))?;
    let features = averaged.data();
    let mut logits = [0.0; CLASSES];
    for (c, z) in logits.iter_mut().enumerate() {
        let row = &params.fc_weights[c * FEATURES..(c + 1) * FEATURES];
        *z = params.fc_bias[c] + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
    }
    let probabilities = softmax(&logits);
    Ok(ActivationTape {
        input: input.clone(),
        streams,
        merged,
        averaged,
        logits,
        probabilities,
    })
}

/// Cross-entropy `-ln p[label]`, with `p` floored at 1e-12.
pub fn loss(probabilities: &[f64; CLASSES], label: EmotionClass) -> f64 {
    -probabilities[label.index()].max(PROB_FLOOR).ln()
}

/// Gradients of [`loss`] for the recorded forward pass.
pub fn backward(params: &NetworkParams, tape: &ActivationTape, label: EmotionClass) -> Gradients {
    let mut dlogits = tape.probabilities;
    dlogits[label.index()] -= 1.0;
    backward_from_logits(params, tape, &dlogits)
}

/// Backpropagates an arbitrary upstream gradient on the logits.
pub fn backward_from_logits(
    params: &NetworkParams,
    tape: &ActivationTape,
    dlogits: &[f64; CLASSES],
) -> Gradients {
    let mut g = NetworkParams::zeros();
    let features = tape.averaged.data();
    let mut dfeat = vec![0.0; FEATURES];
    for c in 0..CLASSES {
        let d = dlogits[c];
        g.fc_bias[c] = d;
        let row = &params.fc_weights[c * FEATURES..(c + 1) * FEATURES];
        for i in 0..FEATURES {
            g.fc_weights[c * FEATURES + i] = d * features[i];
            dfeat[i] += d * row[i];
        }
    }

    // Average pool: each merged cell receives a quarter of its window's gradient.
    let mut dmerged = Grid3::zeros(POOLED_SIDE, POOLED_SIDE, MERGED_CHANNELS);
    for y in 0..POOLED_SIDE {
        for x in 0..POOLED_SIDE {
            for c in 0..MERGED_CHANNELS {
                let i = ((y / 2) * AVG_SIDE + x / 2) * MERGED_CHANNELS + c;
                dmerged.set(y, x, c, dfeat[i] / 4.0);
            }
        }
    }

    let input = &tape.input;
    let mut offset = 0;
    for (si, st) in tape.streams.iter().enumerate() {
        let k = st.pooled.channels();
        let dpooled = dmerged
            .channel_range(offset, offset + k)
            .expect("stream channels");
        offset += k;

        // Max pool routes to the recorded argmax; ReLU passes where conv > 0.
        let mut dconv = vec![0.0; st.conv.data().len()];
        for (o, &src) in st.argmax.iter().enumerate() {
            dconv[src] += dpooled.data()[o];
        }
        for (d, &pre) in dconv.iter_mut().zip(st.conv.data()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }

        let gs = &mut g.streams[si];
        let (h, w) = (st.conv.height(), st.conv.width());
        for y in 0..h {
            for x in 0..w {
                for kk in 0..k {
                    let d = dconv[(y * w + x) * k + kk];
                    if d == 0.0 {
                        continue;
                    }
                    gs.bias[kk] += d;
                    let kernel = gs.kernels[kk].data_mut();
                    for dy in 0..KERNEL_SIDE {
                        let iy = y as isize + dy as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..KERNEL_SIDE {
                            let ix = x as isize + dx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ip = input.index(iy as usize, ix as usize, 0);
                            let kp = (dy * KERNEL_SIDE + dx) * CUBE_CHANNELS;
                            for c in 0..CUBE_CHANNELS {
                                kernel[kp + c] += d * input.data()[ip + c];
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

/// Argmax of the probabilities; ties go to the lower class index
/// (Negative < Positive < Surprise).
pub fn argmax_class(scores: &[f64; CLASSES]) -> EmotionClass {
    let mut best = 0;
    for c in 1..CLASSES {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    EmotionClass::from_index(best).expect("class index")
}

pub fn predict(params: &NetworkParams, cube: &FlowCube) -> Result<EmotionClass, ModelError> {
    Ok(argmax_class(&forward(params, &cube.data)?.probabilities))
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" | "sgdmomentum" | "sgd_momentum" | "momentum" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            max_epochs: 500,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(
                "learning rate must be finite and >= 0".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(ModelError::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
struct OptimizerState {
    kind: Optimizer,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn apply(&mut self, params: &mut NetworkParams, grads: &[f64], lr: f64) {
        self.step += 1;
        let mut i = 0;
        match self.kind {
            Optimizer::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
                params.for_each_mut(|p| {
                    let g = grads[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    i += 1;
                });
            }
            Optimizer::Sgd => {
                params.for_each_mut(|p| {
                    self.m[i] = SGD_MOMENTUM * self.m[i] + grads[i];
                    *p -= lr * self.m[i];
                    i += 1;
                });
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean training loss of each epoch (computed during the epoch).
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch training from a seeded initialisation. The batch gradient is
/// the mean of per-sample gradients, summed in sample order.
pub fn train(
    samples: &[(&Grid3, EmotionClass)],
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NetworkParams::init(&mut rng);
    let n_params = count_parameters(&params);
    let mut opt = OptimizerState::new(config.optimizer, n_params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = config.batch_size.min(samples.len());
    let mut epoch_losses = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut acc = vec![0.0; n_params];
            for &i in chunk {
                let (x, y) = samples[i];
                let tape = forward(&params, x)?;
                let l = loss(&tape.probabilities, y);
                if !l.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b + 1,
                    });
                }
                epoch_loss += l;
                for (a, g) in acc.iter_mut().zip(backward(&params, &tape, y).flatten()) {
                    *a += g;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|g| *g *= inv);
            opt.apply(&mut params, &acc, config.learning_rate);
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    if !params.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            epoch: config.max_epochs,
            batch: 0,
        });
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

/// Convenience wrapper over [`train`] for flow cubes.
pub fn train_cubes(cubes: &[&FlowCube], config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    let samples: Vec<_> = cubes.iter().map(|c| (&c.data, c.label)).collect();
    train(&samples, config)
}

// ---------------------------------------------------------------------------
// Model file: "STSM", version byte, u8 section count, then per section
//   u8 tag (stream index 0..=2, or 0xFF for the classifier),
//   u32 LE outputs, u32 LE kernel height, u32 LE kernel width, u32 LE in-channels,
//   outputs*kh*kw*cin f64 LE weights, outputs f64 LE biases.
// The classifier is written as 3 outputs of a 1x1 kernel over 400 inputs.

const CLASSIFIER_TAG: u8 = 0xFF;

fn section_header(tag: u8, outputs: usize, kh: usize, kw: usize, cin: usize) -> Vec<u8> {
    let mut h = vec![tag];
    for v in [outputs, kh, kw, cin] {
        h.extend_from_slice(&(v as u32).to_le_bytes());
    }
    h
}

pub fn encode_model(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.push(4);
    for (i, s) in params.streams.iter().enumerate() {
        out.extend(section_header(
            i as u8,
            s.kernels.len(),
            KERNEL_SIDE,
            KERNEL_SIDE,
            CUBE_CHANNELS,
        ));
        for k in &s.kernels {
            k.data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        s.bias
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out.extend(section_header(CLASSIFIER_TAG, CLASSES, 1, 1, FEATURES));
    params
        .fc_weights
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    params
        .fc_bias
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

fn fmt_err(m: impl Into<String>) -> ModelError {
    ModelError::Format(m.into())
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkParams, ModelError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if bytes.len() - pos < n {
            return Err(fmt_err(format!("truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != MODEL_MAGIC {
        return Err(fmt_err("bad magic bytes"));
    }
    let version = take(1)?[0];
    if version != MODEL_VERSION {
        return Err(fmt_err(format!(
            "unsupported model version {version} (this build reads version {MODEL_VERSION})"
        )));
    }
    if take(1)?[0] != 4 {
        return Err(fmt_err("expected 4 sections"));
    }
    let mut params = NetworkParams::zeros();
    let expected: [(u8, usize, usize, usize, usize); 4] = [
        (
            0,
            STREAM_KERNELS[0],
            KERNEL_SIDE,
            KERNEL_SIDE,
            CUBE_CHANNELS,
        ),
        (
            1,
            STREAM_KERNELS[1],
            KERNEL_SIDE,
            KERNEL_SIDE,
            CUBE_CHANNELS,
        ),
        (
            2,
            STREAM_KERNELS[2],
            KERNEL_SIDE,
            KERNEL_SIDE,
            CUBE_CHANNELS,
        ),
        (CLASSIFIER_TAG, CLASSES, 1, 1, FEATURES),
    ];
    for (tag, outputs, kh, kw, cin) in expected {
        let t = take(1)?[0];
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        if t != tag || dims != [outputs, kh, kw, cin] {
            return Err(fmt_err(format!(
                "section {t:#x} has shape {dims:?}, expected tag {tag:#x} with {:?}",
                [outputs, kh, kw, cin]
            )));
        }
        let n = outputs * kh * kw * cin + outputs;
        let raw = take(n * 8)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err(format!("non-finite weight in section {t:#x}")));
        }
        let (weights, bias) = vals.split_at(outputs * kh * kw * cin);
        if tag == CLASSIFIER_TAG {
            params.fc_weights = weights.to_vec();
            params.fc_bias = bias.to_vec();
        } else {
            let s = &mut params.streams[tag as usize];
            for (k, chunk) in s.kernels.iter_mut().zip(weights.chunks_exact(KERNEL_LEN)) {
                k.data_mut().copy_from_slice(chunk);
            }
            s.bias = bias.to_vec();
        }
    }
    if pos != bytes.len() {
        return Err(fmt_err(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(params)
}

pub fn save_model(path: &std::path::Path, params: &NetworkParams) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_model(params))?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<NetworkParams, ModelError> {
    decode_model(&std::fs::read(path)?)
}
