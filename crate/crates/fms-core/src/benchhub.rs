//! Desk-scale benchmark hub: train small target networks across sampled
//! hyperparameter configurations on synthetic tasks, caching per-epoch
//! validation curves and weight checkpoints on disk.
//!
//! Directory layout:
//!
//! ```text
//! <hub>/hubspec.json          spec echo + hash, written first (resume guard)
//! <hub>/manifest.json         written last once every config completed
//! <hub>/curves/<id>.json      per-config curve and divergence flag
//! <hub>/ckpt/<id>/<epoch>.fmsw
//! ```
//!
//! Config ids are zero-padded decimal indices. Training is f32 end to end so
//! replaying a stored checkpoint bit-reproduces the cached accuracies.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{ArchDescriptor, CheckpointedWeights, LayerKind, LayerSpec, LayerWeights};
use crate::error::{FmsError, Result};
use crate::exec;
use crate::space::{HyperparameterConfig, LearningCurve, SearchSpace};
use crate::surrogate::PreparedWeights;
use crate::weightgraph::LEAKY_SLOPE;

pub const MANIFEST_VERSION: u32 = 1;
/// Samples per synthetic task before the 80/20 split.
pub const TASK_SAMPLES: usize = 500;
pub const VECTOR_DIM: usize = 16;
pub const IMAGE_SIDE: usize = 8;
pub const N_CLASSES: usize = 4;

/// Target-network architecture in the hub roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetArch {
    /// Dense net on the 16-dimensional vector task.
    Mlp { hidden: Vec<usize> },
    /// One 3×3 conv layer on the 8×8 image task, then a dense head.
    Conv { channels: usize },
}

impl TargetArch {
    pub fn descriptor(&self) -> ArchDescriptor {
        match self {
            TargetArch::Mlp { hidden } => {
                let mut layers = Vec::new();
                let mut prev = VECTOR_DIM;
                for &h in hidden {
                    layers.push(LayerSpec::dense(prev, h));
                    prev = h;
                }
                layers.push(LayerSpec::dense(prev, N_CLASSES));
                ArchDescriptor { layers }
            }
            TargetArch::Conv { channels } => {
                let spatial = (IMAGE_SIDE - 2) * (IMAGE_SIDE - 2);
                ArchDescriptor {
                    layers: vec![
                        LayerSpec::conv2d(1, *channels, 3),
                        LayerSpec::dense_after_flatten(*channels, spatial, N_CLASSES),
                    ],
                }
            }
        }
    }

    pub fn uses_image_task(&self) -> bool {
        matches!(self, TargetArch::Conv { .. })
    }
}

/// Hub generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubSpec {
    pub task_seed: u64,
    pub roster: Vec<TargetArch>,
    pub n_cfg: usize,
    pub b_max: usize,
    pub space: SearchSpace,
}

impl HubSpec {
    /// Default desk-scale hub: four MLP variants and three conv variants,
    /// 50 configurations, 20 epochs each.
    pub fn desk_default() -> Self {
        let roster = vec![
            TargetArch::Mlp { hidden: vec![4] },
            TargetArch::Mlp { hidden: vec![8] },
            TargetArch::Mlp { hidden: vec![4, 4] },
            TargetArch::Mlp { hidden: vec![8, 8] },
            TargetArch::Conv { channels: 2 },
            TargetArch::Conv { channels: 4 },
            TargetArch::Conv { channels: 8 },
        ];
        let space = SearchSpace::desk_scale(roster.len());
        HubSpec {
            task_seed: 1,
            roster,
            n_cfg: 50,
            b_max: 20,
            space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cfg < 2 {
            return Err(FmsError::InvalidArgument("n_cfg must be >= 2".into()));
        }
        if self.b_max < 2 {
            return Err(FmsError::InvalidArgument("b_max must be >= 2".into()));
        }
        if self.roster.is_empty() {
            return Err(FmsError::InvalidArgument("empty architecture roster".into()));
        }
        if self.space.n_models != self.roster.len() {
            return Err(FmsError::InvalidArgument(format!(
                "search space lists {} models, roster has {}",
                self.space.n_models,
                self.roster.len()
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A labeled classification dataset, f32 inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

/// Train/validation splits for both synthetic tasks.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub vector_train: Dataset,
    pub vector_val: Dataset,
    pub image_train: Dataset,
    pub image_val: Dataset,
}

impl SynthTask {
    pub fn train_for(&self, arch: &TargetArch) -> &Dataset {
        if arch.uses_image_task() {
            &self.image_train
        } else {
            &self.vector_train
        }
    }

    pub fn val_for(&self, arch: &TargetArch) -> &Dataset {
        if arch.uses_image_task() {
            &self.image_val
        } else {
            &self.vector_val
        }
    }
}

fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

fn split_80_20(dim: usize, inputs: Vec<f32>, labels: Vec<usize>) -> (Dataset, Dataset) {
    let n = labels.len();
    let n_train = n * 4 / 5;
    let train = Dataset {
        dim,
        inputs: inputs[..n_train * dim].to_vec(),
        labels: labels[..n_train].to_vec(),
    };
    let val = Dataset {
        dim,
        inputs: inputs[n_train * dim..].to_vec(),
        labels: labels[n_train..].to_vec(),
    };
    (train, val)
}

/// Deterministic synthetic data: a 4-class Gaussian mixture in 16 dimensions
/// for the MLPs and 8×8 blob/stripe images for the conv net. Labels are
/// assigned round-robin, so class counts are balanced by construction.
pub fn synth_task(seed: u64) -> SynthTask {
    // Vector task.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f3759df);
    let means: Vec<f32> = (0..N_CLASSES * VECTOR_DIM)
        .map(|_| 1.6 * normal_f32(&mut rng))
        .collect();
    let mut v_inputs = Vec::with_capacity(TASK_SAMPLES * VECTOR_DIM);
    let mut v_labels = Vec::with_capacity(TASK_SAMPLES);
    for i in 0..TASK_SAMPLES {
        let class = i % N_CLASSES;
        v_labels.push(class);
        for d in 0..VECTOR_DIM {
            v_inputs.push(means[class * VECTOR_DIM + d] + normal_f32(&mut rng));
        }
    }
    let (vector_train, vector_val) = split_80_20(VECTOR_DIM, v_inputs, v_labels);

    // Image task: horizontal stripes, vertical stripes, center blob,
    // corner blobs; classes share the same additive noise level.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
    let dim = IMAGE_SIDE * IMAGE_SIDE;
    let mut i_inputs = Vec::with_capacity(TASK_SAMPLES * dim);
    let mut i_labels = Vec::with_capacity(TASK_SAMPLES);
    for i in 0..TASK_SAMPLES {
        let class = i % N_CLASSES;
        i_labels.push(class);
        let phase = rng.random_range(0..2usize);
        let cx = 3.5 + 0.5 * normal_f32(&mut rng);
        let cy = 3.5 + 0.5 * normal_f32(&mut rng);
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let signal = match class {
                    0 => if (r + phase) % 2 == 0 { 1.0 } else { -1.0 },
                    1 => if (c + phase) % 2 == 0 { 1.0 } else { -1.0 },
                    2 => {
                        let d2 = (r as f32 - cy).powi(2) + (c as f32 - cx).powi(2);
                        2.0 * (-d2 / 6.0).exp() - 0.5
                    }
                    _ => {
                        let dr = (r as f32).min((IMAGE_SIDE - 1 - r) as f32);
                        let dc = (c as f32).min((IMAGE_SIDE - 1 - c) as f32);
                        2.0 * (-(dr * dr + dc * dc) / 4.0).exp() - 0.5
                    }
                };
                i_inputs.push(signal + 0.9 * normal_f32(&mut rng));
            }
        }
    }
    let (image_train, image_val) = split_80_20(dim, i_inputs, i_labels);

    SynthTask {
        vector_train,
        vector_val,
        image_train,
        image_val,
    }
}

// ── Target-network training (f32) ────────────────────────────────────────

fn init_weights(arch: &ArchDescriptor, seed: u64) -> CheckpointedWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layers
        .iter()
        .map(|spec| {
            let fan_in = match spec.kind {
                LayerKind::Dense => spec.fan_in,
                LayerKind::Conv2d => {
                    let k = spec.kernel.unwrap();
                    spec.fan_in * k * k
                }
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            LayerWeights {
                weights: (0..spec.weight_len())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
                bias: vec![0.0; spec.fan_out],
            }
        })
        .collect();
    CheckpointedWeights {
        arch: arch.clone(),
        layers,
    }
}

fn leaky_f32(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE as f32 * v
    }
}

struct ForwardCache {
    /// Input to each layer (post-activation, post-dropout of the previous one).
    layer_inputs: Vec<Vec<f32>>,
    /// Pre-activation of each non-final layer.
    pre_acts: Vec<Vec<f32>>,
    /// Dropout keep masks (scaled) per non-final layer.
    masks: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

fn layer_forward(spec: &LayerSpec, lw: &LayerWeights, input: &[f32]) -> Vec<f32> {
    match spec.kind {
        LayerKind::Dense => {
            let mut out = lw.bias.clone();
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &lw.weights[o * spec.fan_in..(o + 1) * spec.fan_in];
                let mut s = 0.0f32;
                for (w, x) in row.iter().zip(input) {
                    s += w * x;
                }
                *out_v += s;
            }
            out
        }
        LayerKind::Conv2d => {
            // Valid 3x3 convolution on an 8x8 single-channel image,
            // channel-major flattened output.
            let k = spec.kernel.unwrap();
            let out_side = IMAGE_SIDE - k + 1;
            let mut out = vec![0.0f32; spec.fan_out * out_side * out_side];
            for c in 0..spec.fan_out {
                let kbase = c * spec.fan_in * k * k;
                for i in 0..out_side {
                    for j in 0..out_side {
                        let mut s = lw.bias[c];
                        for di in 0..k {
                            for dj in 0..k {
                                s += lw.weights[kbase + di * k + dj]
                                    * input[(i + di) * IMAGE_SIDE + (j + dj)];
                            }
                        }
                        out[c * out_side * out_side + i * out_side + j] = s;
                    }
                }
            }
            out
        }
    }
}

/// Forward pass for evaluation (no dropout).
fn forward_logits(net: &CheckpointedWeights, input: &[f32]) -> Vec<f32> {
    let last = net.arch.layers.len() - 1;
    let mut h = input.to_vec();
    for (l, (spec, lw)) in net.arch.layers.iter().zip(&net.layers).enumerate() {
        let mut out = layer_forward(spec, lw, &h);
        if l < last {
            for v in &mut out {
                *v = leaky_f32(*v);
            }
        }
        h = out;
    }
    h
}

fn forward_train(
    net: &CheckpointedWeights,
    input: &[f32],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> ForwardCache {
    let last = net.arch.layers.len() - 1;
    let keep = 1.0 - dropout;
    let mut layer_inputs = Vec::with_capacity(net.arch.layers.len());
    let mut pre_acts = Vec::new();
    let mut masks = Vec::new();
    let mut h = input.to_vec();
    for (l, (spec, lw)) in net.arch.layers.iter().zip(&net.layers).enumerate() {
        layer_inputs.push(h.clone());
        let out = layer_forward(spec, lw, &h);
        if l < last {
            pre_acts.push(out.clone());
            let mask: Vec<f32> = out
                .iter()
                .map(|_| {
                    if keep <= 0.0 {
                        0.0
                    } else if rng.random_range(0.0..1.0) < keep {
                        (1.0 / keep) as f32
                    } else {
                        0.0
                    }
                })
                .collect();
            h = out
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| leaky_f32(v) * m)
                .collect();
            masks.push(mask);
        } else {
            h = out;
        }
    }
    ForwardCache {
        layer_inputs,
        pre_acts,
        masks,
        logits: h,
    }
}

/// Stable softmax cross-entropy; returns (loss, dlogits).
fn cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let grad: Vec<f32> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

fn backward_into(
    net: &CheckpointedWeights,
    cache: &ForwardCache,
    dlogits: &[f32],
    grads: &mut [LayerWeights],
) {
    let last = net.arch.layers.len() - 1;
    let mut dout = dlogits.to_vec();
    for l in (0..=last).rev() {
        let spec = &net.arch.layers[l];
        let lw = &net.layers[l];
        let input = &cache.layer_inputs[l];
        if l < last {
            // Back through dropout and the leaky rectifier.
            let mask = &cache.masks[l];
            let pre = &cache.pre_acts[l];
            for ((d, &m), &p) in dout.iter_mut().zip(mask).zip(pre) {
                let slope = if p > 0.0 { 1.0 } else { LEAKY_SLOPE as f32 };
                *d *= m * slope;
            }
        }
        match spec.kind {
            LayerKind::Dense => {
                let g = &mut grads[l];
                for o in 0..spec.fan_out {
                    let d = dout[o];
                    g.bias[o] += d;
                    let row = &mut g.weights[o * spec.fan_in..(o + 1) * spec.fan_in];
                    for (gw, &x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
                if l > 0 {
                    let mut dinput = vec![0.0f32; spec.fan_in];
                    for o in 0..spec.fan_out {
                        let d = dout[o];
                        let row = &lw.weights[o * spec.fan_in..(o + 1) * spec.fan_in];
                        for (di, &w) in dinput.iter_mut().zip(row) {
                            *di += d * w;
                        }
                    }
                    dout = dinput;
                }
            }
            LayerKind::Conv2d => {
                // Always the first layer here; no input gradient needed.
                let k = spec.kernel.unwrap();
                let out_side = IMAGE_SIDE - k + 1;
                let g = &mut grads[l];
                for c in 0..spec.fan_out {
                    let kbase = c * spec.fan_in * k * k;
                    for i in 0..out_side {
                        for j in 0..out_side {
                            let d = dout[c * out_side * out_side + i * out_side + j];
                            g.bias[c] += d;
                            for di in 0..k {
                                for dj in 0..k {
                                    g.weights[kbase + di * k + dj] +=
                                        d * input[(i + di) * IMAGE_SIDE + (j + dj)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Validation accuracy of a network on a dataset; argmax ties resolve to the
/// lowest class index.
pub fn evaluate_accuracy(net: &CheckpointedWeights, data: &Dataset) -> f64 {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = forward_logits(net, data.input(i));
        let mut best = 0usize;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / data.len() as f64
}

/// Output of training one configuration.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub curve: LearningCurve,
    pub checkpoints: Vec<CheckpointedWeights>,
    /// Epoch (1-based) at which the loss went non-finite, if it did; the
    /// curve and checkpoints are frozen from the last finite state onward.
    pub diverged_at: Option<usize>,
}

/// SGD with momentum, weight decay and dropout under the given configuration;
/// cross-entropy loss; records validation accuracy and a checkpoint after
/// every epoch.
pub fn train_target(
    arch: &TargetArch,
    hp: &HyperparameterConfig,
    task: &SynthTask,
    b_max: usize,
    seed: u64,
) -> TrainResult {
    let desc = arch.descriptor();
    let train = task.train_for(arch);
    let val = task.val_for(arch);
    let mut net = init_weights(&desc, seed ^ 0xa076_1d64);
    let mut velocity: Vec<LayerWeights> = desc
        .layers
        .iter()
        .map(|s| LayerWeights {
            weights: vec![0.0; s.weight_len()],
            bias: vec![0.0; s.fan_out],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe703_7ed1);

    let lr = hp.learning_rate as f32;
    let momentum = hp.momentum as f32;
    let wd = hp.weight_decay as f32;

    let mut curve = Vec::with_capacity(b_max);
    let mut checkpoints = Vec::with_capacity(b_max);
    let mut diverged_at = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=b_max {
        // Freeze once diverged: repeat the last finite accuracy/checkpoint.
        if diverged_at.is_some() {
            let last_acc = *curve.last().unwrap();
            curve.push(last_acc);
            checkpoints.push(checkpoints.last().cloned().unwrap());
            continue;
        }
        let snapshot = net.clone();
        // Deterministic shuffle.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut grads: Vec<LayerWeights> = desc
            .layers
            .iter()
            .map(|s| LayerWeights {
                weights: vec![0.0; s.weight_len()],
                bias: vec![0.0; s.fan_out],
            })
            .collect();
        for batch in order.chunks(hp.batch_size) {
            for g in &mut grads {
                g.weights.fill(0.0);
                g.bias.fill(0.0);
            }
            let mut batch_loss = 0.0f32;
            for &idx in batch {
                let cache = forward_train(&net, train.input(idx), hp.dropout, &mut rng);
                let (loss, dlogits) = cross_entropy(&cache.logits, train.labels[idx]);
                batch_loss += loss;
                backward_into(&net, &cache, &dlogits, &mut grads);
            }
            if !batch_loss.is_finite() {
                // Roll back to the epoch-start snapshot and freeze.
                net = snapshot;
                diverged_at = Some(epoch);
                let acc = if let Some(last) = curve.last() {
                    *last
                } else {
                    evaluate_accuracy(&net, val)
                };
                curve.push(acc);
                checkpoints.push(net.clone());
                continue 'epochs;
            }
            let scale = 1.0 / batch.len() as f32;
            for ((lw, g), v) in net.layers.iter_mut().zip(&grads).zip(&mut velocity) {
                for i in 0..lw.weights.len() {
                    let grad = g.weights[i] * scale + wd * lw.weights[i];
                    v.weights[i] = momentum * v.weights[i] + grad;
                    lw.weights[i] -= lr * v.weights[i];
                }
                for i in 0..lw.bias.len() {
                    let grad = g.bias[i] * scale;
                    v.bias[i] = momentum * v.bias[i] + grad;
                    lw.bias[i] -= lr * v.bias[i];
                }
            }
        }
        if net
            .layers
            .iter()
            .any(|lw| lw.weights.iter().chain(&lw.bias).any(|v| !v.is_finite()))
        {
            net = snapshot;
            diverged_at = Some(epoch);
        }
        let acc = evaluate_accuracy(&net, val);
        curve.push(acc);
        checkpoints.push(net.clone());
    }

    TrainResult {
        curve: LearningCurve(curve),
        checkpoints,
        diverged_at,
    }
}

// ── Hub generation and loading ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HubConfigEntry {
    pub id: usize,
    pub config: HyperparameterConfig,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HubManifest {
    pub format_version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub spec: HubSpec,
    pub configs: Vec<HubConfigEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecEcho {
    format_version: u32,
    spec_hash: String,
    seed: u64,
    spec: HubSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CurveFile {
    id: usize,
    accuracy: Vec<f64>,
    diverged_at: Option<usize>,
}

pub fn config_id_string(id: usize) -> String {
    format!("{id:04}")
}

fn curve_path(dir: &Path, id: usize) -> PathBuf {
    dir.join("curves").join(format!("{}.json", config_id_string(id)))
}

fn ckpt_path(dir: &Path, id: usize, epoch: usize) -> PathBuf {
    dir.join("ckpt")
        .join(config_id_string(id))
        .join(format!("{epoch}.fmsw"))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Sample the hub's configurations; pure function of (spec, seed).
pub fn sample_hub_configs(spec: &HubSpec, seed: u64) -> Vec<HyperparameterConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00);
    (0..spec.n_cfg).map(|_| spec.space.sample(&mut rng)).collect()
}

/// Generate (or resume) a benchmark hub. Completed configurations are
/// skipped; a prior partial run with a different spec hash is refused.
pub fn generate_hub(spec: &HubSpec, seed: u64, dir: &Path) -> Result<BenchmarkTable> {
    spec.validate()?;
    let spec_hash = spec.hash();
    fs::create_dir_all(dir.join("curves"))?;
    fs::create_dir_all(dir.join("ckpt"))?;

    let echo_path = dir.join("hubspec.json");
    if echo_path.exists() {
        let prior: SpecEcho = serde_json::from_slice(&fs::read(&echo_path)?)?;
        if prior.spec_hash != spec_hash || prior.seed != seed {
            return Err(FmsError::SpecHashMismatch {
                dir: dir.display().to_string(),
                expected: format!("{spec_hash}/seed {seed}"),
                found: format!("{}/seed {}", prior.spec_hash, prior.seed),
            });
        }
    } else {
        write_json_atomic(
            &echo_path,
            &SpecEcho {
                format_version: MANIFEST_VERSION,
                spec_hash: spec_hash.clone(),
                seed,
                spec: spec.clone(),
            },
        )?;
    }

    let configs = sample_hub_configs(spec, seed);
    let task = synth_task(spec.task_seed);

    let entries = exec::try_map_indexed(configs.len(), |id| -> Result<HubConfigEntry> {
        let hp = &configs[id];
        let complete = curve_path(dir, id).exists()
            && (1..=spec.b_max).all(|e| ckpt_path(dir, id, e).exists());
        if complete {
            let curve: CurveFile = serde_json::from_slice(&fs::read(curve_path(dir, id))?)?;
            return Ok(HubConfigEntry {
                id,
                config: hp.clone(),
                diverged_at: curve.diverged_at,
            });
        }
        let arch = &spec.roster[hp.model_index];
        let result = train_target(arch, hp, &task, spec.b_max, seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        fs::create_dir_all(dir.join("ckpt").join(config_id_string(id)))?;
        for (e, ckpt) in result.checkpoints.iter().enumerate() {
            ckpt.write_to(&ckpt_path(dir, id, e + 1))?;
        }
        write_json_atomic(
            &curve_path(dir, id),
            &CurveFile {
                id,
                accuracy: result.curve.0.clone(),
                diverged_at: result.diverged_at,
            },
        )?;
        Ok(HubConfigEntry {
            id,
            config: hp.clone(),
            diverged_at: result.diverged_at,
        })
    })?;

    let manifest = HubManifest {
        format_version: MANIFEST_VERSION,
        spec_hash,
        seed,
        spec: spec.clone(),
        configs: entries,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)?;
    BenchmarkTable::load(dir)
}

/// Cache of prepared checkpoints with an access counter for the underlying
/// file loads (used to verify that weight-free methods never touch them).
#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    cache: Mutex<HashMap<(usize, usize), Arc<PreparedWeights>>>,
    loads: AtomicU64,
}

impl CheckpointStore {
    fn new(dir: PathBuf) -> Self {
        CheckpointStore {
            dir,
            cache: Mutex::new(HashMap::new()),
            loads: AtomicU64::new(0),
        }
    }

    pub fn prepared(&self, config: usize, epoch: usize) -> Result<Arc<PreparedWeights>> {
        if let Some(hit) = self.cache.lock().unwrap().get(&(config, epoch)) {
            return Ok(Arc::clone(hit));
        }
        let path = ckpt_path(&self.dir, config, epoch);
        let ckpt = CheckpointedWeights::read_from(&path)?;
        self.loads.fetch_add(1, Ordering::Relaxed);
        let prepared = Arc::new(PreparedWeights::from_checkpoint(&ckpt)?);
        self.cache
            .lock()
            .unwrap()
            .insert((config, epoch), Arc::clone(&prepared));
        Ok(prepared)
    }

    pub fn raw(&self, config: usize, epoch: usize) -> Result<CheckpointedWeights> {
        self.loads.fetch_add(1, Ordering::Relaxed);
        CheckpointedWeights::read_from(&ckpt_path(&self.dir, config, epoch))
    }

    pub fn load_count(&self) -> u64 {
        self.loads.load(Ordering::Relaxed)
    }
}

/// An on-disk hub opened for simulation: full curves in memory, checkpoints
/// loaded (and cached) on demand.
#[derive(Debug)]
pub struct BenchmarkTable {
    pub dir: PathBuf,
    pub manifest: HubManifest,
    curves: Vec<LearningCurve>,
    store: CheckpointStore,
}

impl BenchmarkTable {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(FmsError::Benchmark(format!(
                "no manifest.json in {} (incomplete hub?)",
                dir.display()
            )));
        }
        let manifest: HubManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(FmsError::Benchmark(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        if manifest.spec_hash != manifest.spec.hash() {
            return Err(FmsError::Benchmark("manifest spec hash mismatch".into()));
        }
        let mut curves = Vec::with_capacity(manifest.configs.len());
        for entry in &manifest.configs {
            let cf: CurveFile = serde_json::from_slice(&fs::read(curve_path(dir, entry.id))?)?;
            let curve = LearningCurve(cf.accuracy);
            if curve.len() != manifest.spec.b_max {
                return Err(FmsError::Benchmark(format!(
                    "config {} curve has {} epochs, expected {}",
                    entry.id,
                    curve.len(),
                    manifest.spec.b_max
                )));
            }
            curve.validate()?;
            for e in 1..=manifest.spec.b_max {
                if !ckpt_path(dir, entry.id, e).exists() {
                    return Err(FmsError::Benchmark(format!(
                        "missing checkpoint for config {} epoch {e}",
                        entry.id
                    )));
                }
            }
            curves.push(curve);
        }
        Ok(BenchmarkTable {
            dir: dir.to_path_buf(),
            store: CheckpointStore::new(dir.to_path_buf()),
            manifest,
            curves,
        })
    }

    pub fn n_configs(&self) -> usize {
        self.manifest.configs.len()
    }

    pub fn b_max(&self) -> usize {
        self.manifest.spec.b_max
    }

    pub fn space(&self) -> &SearchSpace {
        &self.manifest.spec.space
    }

    pub fn config(&self, id: usize) -> &HyperparameterConfig {
        &self.manifest.configs[id].config
    }

    /// Cached validation accuracy of `config` after `epoch` epochs (1-based).
    /// Missing entries are a hard failure: tables must be complete.
    pub fn accuracy(&self, config: usize, epoch: usize) -> Result<f64> {
        if config >= self.curves.len() || epoch == 0 || epoch > self.b_max() {
            return Err(FmsError::Benchmark(format!(
                "no cached evaluation for config {config} epoch {epoch}"
            )));
        }
        Ok(self.curves[config].0[epoch - 1])
    }

    /// Curve prefix `Y₁..Y_upto` (values observed so far).
    pub fn curve_prefix(&self, config: usize, upto: usize) -> LearningCurve {
        LearningCurve(self.curves[config].0[..upto.min(self.b_max())].to_vec())
    }

    pub fn full_curve(&self, config: usize) -> &LearningCurve {
        &self.curves[config]
    }

    pub fn prepared_weights(&self, config: usize, epoch: usize) -> Result<Arc<PreparedWeights>> {
        self.store.prepared(config, epoch)
    }

    pub fn raw_checkpoint(&self, config: usize, epoch: usize) -> Result<CheckpointedWeights> {
        self.store.raw(config, epoch)
    }

    pub fn checkpoint_loads(&self) -> u64 {
        self.store.load_count()
    }

    /// Best cached accuracy at any epoch over all configurations.
    pub fn y_opt(&self) -> f64 {
        self.curves
            .iter()
            .flat_map(|c| c.0.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Full-budget accuracy per configuration (the τ ground truth).
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.curves.iter().map(|c| *c.0.last().unwrap()).collect()
    }

    /// Regenerate this hub's synthetic task (pure function of the spec).
    pub fn task(&self) -> SynthTask {
        synth_task(self.manifest.spec.task_seed)
    }

    pub fn arch_for_config(&self, id: usize) -> &TargetArch {
        &self.manifest.spec.roster[self.config(id).model_index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> HubSpec {
        let roster = vec![
            TargetArch::Mlp { hidden: vec![4] },
            TargetArch::Conv { channels: 2 },
        ];
        let space = SearchSpace::desk_scale(roster.len());
        HubSpec {
            task_seed: 3,
            roster,
            n_cfg: 3,
            b_max: 4,
            space,
        }
    }

    #[test]
    fn synth_task_is_deterministic_and_balanced() {
        let a = synth_task(9);
        let b = synth_task(9);
        assert_eq!(a.vector_train.inputs, b.vector_train.inputs);
        assert_eq!(a.image_val.inputs, b.image_val.inputs);

        let mut counts = [0usize; N_CLASSES];
        for &l in a.vector_train.labels.iter().chain(&a.vector_val.labels) {
            counts[l] += 1;
        }
        let expect = TASK_SAMPLES / N_CLASSES;
        for c in counts {
            assert!(c.abs_diff(expect) <= 1, "class counts {counts:?}");
        }
    }

    #[test]
    fn mlp_learns_above_chance() {
        let task = synth_task(5);
        let arch = TargetArch::Mlp { hidden: vec![8, 8] };
        let hp = HyperparameterConfig {
            model_index: 0,
            dropout: 0.05,
            batch_size: 16,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
        };
        let result = train_target(&arch, &hp, &task, 20, 7);
        assert!(result.diverged_at.is_none());
        let final_acc = *result.curve.0.last().unwrap();
        assert!(final_acc > 0.25, "final accuracy {final_acc} not above chance");
    }

    #[test]
    fn curve_and_checkpoint_counts_match_budget() {
        let task = synth_task(5);
        let arch = TargetArch::Conv { channels: 2 };
        let hp = HyperparameterConfig {
            model_index: 1,
            dropout: 0.2,
            batch_size: 32,
            learning_rate: 1e-2,
            momentum: 0.5,
            weight_decay: 1e-4,
        };
        let result = train_target(&arch, &hp, &task, 6, 3);
        assert_eq!(result.curve.len(), 6);
        assert_eq!(result.checkpoints.len(), 6);
        for ckpt in &result.checkpoints {
            ckpt.validate().unwrap();
        }
    }

    #[test]
    fn zero_learning_rate_keeps_accuracy_constant() {
        let task = synth_task(5);
        let arch = TargetArch::Mlp { hidden: vec![4] };
        let hp = HyperparameterConfig {
            model_index: 0,
            dropout: 0.0,
            batch_size: 16,
            learning_rate: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let result = train_target(&arch, &hp, &task, 5, 11);
        let first = result.curve.0[0];
        assert!(result.curve.0.iter().all(|&a| a == first));
    }

    #[test]
    fn divergent_training_freezes_curve_and_checkpoints() {
        let task = synth_task(5);
        let arch = TargetArch::Mlp { hidden: vec![8] };
        // Absurd learning rate to force a non-finite loss quickly. The run
        // must keep going with the last finite accuracy and frozen weights.
        let hp = HyperparameterConfig {
            model_index: 0,
            dropout: 0.0,
            batch_size: 16,
            learning_rate: 1e18,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let result = train_target(&arch, &hp, &task, 6, 7);
        let at = result.diverged_at.expect("run should diverge");
        assert_eq!(result.curve.len(), 6);
        assert_eq!(result.checkpoints.len(), 6);
        for e in at..6 {
            assert_eq!(result.curve.0[e - 1], result.curve.0[at - 1]);
            assert_eq!(result.checkpoints[e - 1], result.checkpoints[at - 1]);
        }
        for ckpt in &result.checkpoints {
            assert!(ckpt
                .layers
                .iter()
                .all(|lw| lw.weights.iter().chain(&lw.bias).all(|v| v.is_finite())));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let task = synth_task(6);
        let arch = TargetArch::Mlp { hidden: vec![8] };
        let hp = HyperparameterConfig {
            model_index: 0,
            dropout: 0.3,
            batch_size: 8,
            learning_rate: 5e-3,
            momentum: 0.5,
            weight_decay: 1e-4,
        };
        let a = train_target(&arch, &hp, &task, 4, 13);
        let b = train_target(&arch, &hp, &task, 4, 13);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn generate_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let table = generate_hub(&spec, 17, dir.path()).unwrap();
        assert_eq!(table.n_configs(), 3);
        assert_eq!(table.b_max(), 4);

        // All curves complete and in range.
        for id in 0..3 {
            for e in 1..=4 {
                let acc = table.accuracy(id, e).unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
        }
        // Checkpoints load and replay to the cached accuracy.
        let task = table.task();
        for id in 0..3 {
            let ckpt = table.raw_checkpoint(id, 2).unwrap();
            let val = task.val_for(table.arch_for_config(id));
            let replay = evaluate_accuracy(&ckpt, val);
            let cached = table.accuracy(id, 2).unwrap();
            assert!(
                (replay - cached).abs() < 1e-6,
                "config {id}: replay {replay} vs cached {cached}"
            );
        }
    }

    #[test]
    fn regeneration_is_pure() {
        let spec = tiny_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_hub(&spec, 23, d1.path()).unwrap();
        generate_hub(&spec, 23, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
        let c1 = fs::read(ckpt_path(d1.path(), 1, 3)).unwrap();
        let c2 = fs::read(ckpt_path(d2.path(), 1, 3)).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn different_seeds_sample_different_configs() {
        let spec = tiny_spec();
        let a = sample_hub_configs(&spec, 1);
        let b = sample_hub_configs(&spec, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn resume_skips_completed_and_checks_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate_hub(&spec, 29, dir.path()).unwrap();
        // Resume with the same spec succeeds (everything skipped).
        generate_hub(&spec, 29, dir.path()).unwrap();
        // A different spec is refused.
        let mut other = spec.clone();
        other.task_seed += 1;
        let err = generate_hub(&other, 29, dir.path()).unwrap_err();
        assert!(matches!(err, FmsError::SpecHashMismatch { .. }));
    }

    #[test]
    fn checkpoint_store_counts_loads_once() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let table = generate_hub(&spec, 31, dir.path()).unwrap();
        assert_eq!(table.checkpoint_loads(), 0);
        table.prepared_weights(0, 1).unwrap();
        table.prepared_weights(0, 1).unwrap();
        assert_eq!(table.checkpoint_loads(), 1);
    }

    #[test]
    fn sampled_hyperparameters_stay_in_domain() {
        let spec = tiny_spec();
        for cfg in sample_hub_configs(&spec, 37) {
            spec.space.validate(&cfg).unwrap();
        }
    }
}
