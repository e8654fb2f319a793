//! Music-conditioned group dance generator.
//!
//! A transformer encodes the music window, an MLP predicts each dancer's
//! first pose from the mean audio code and its start position, and a stack
//! of group-encoder layers (LSTM followed by cross-entity attention, fused by
//! addition) drives an autoregressive decoder.

mod net;
pub(crate) mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyShape, MotionSequence, Pose, DEFAULT_FPS, POSE_DIM};
use crate::error::{Error, Result};
use crate::features::MusicFeatures;
use crate::numerics::graph::Graph;
use crate::numerics::Tensor;

pub use net::spatial_encoding;
pub use train::{
    teacher_forcing_probability, train, GeneratorLoss, TrainConfig, TrainOutcome, TrainSample, TrainTraceRow,
};

/// Dimension of the root translation used by the spatial encoding.
pub const TAU_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Audio feature width.
    pub d_in: usize,
    /// Shared width of audio codes and dancer hidden states.
    pub d_model: usize,
    pub music_layers: usize,
    pub music_heads: usize,
    /// Position-wise feed-forward width inside the music transformer.
    pub ff_dim: usize,
    pub group_layers: usize,
    pub heads: usize,
    /// Per-head key and value width.
    pub d_k: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    /// Training window length in frames.
    pub window: usize,
}

impl GeneratorConfig {
    /// Full-size architecture.
    pub fn full_scale(d_in: usize) -> Self {
        GeneratorConfig {
            d_in,
            d_model: 1024,
            music_layers: 2,
            music_heads: 8,
            ff_dim: 2048,
            group_layers: 3,
            heads: 8,
            d_k: 64,
            mlp_hidden: 512,
            mlp_layers: 3,
            window: 240,
        }
    }

    /// The same architecture at 1/32 width, small enough to train on a desk.
    pub fn test_profile(d_in: usize) -> Self {
        GeneratorConfig {
            d_in,
            d_model: 32,
            music_layers: 2,
            music_heads: 2,
            ff_dim: 64,
            group_layers: 3,
            heads: 2,
            d_k: 8,
            mlp_hidden: 16,
            mlp_layers: 3,
            window: 32,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("music_layers", self.music_layers),
            ("music_heads", self.music_heads),
            ("ff_dim", self.ff_dim),
            ("group_layers", self.group_layers),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_layers", self.mlp_layers),
            ("window", self.window),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config {
                    path: format!("{prefix}.{name}"),
                    message: "must be at least 1".into(),
                });
            }
        }
        for (name, heads) in [("heads", self.heads), ("music_heads", self.music_heads)] {
            if heads * self.d_k > self.d_model {
                return Err(Error::Config {
                    path: format!("{prefix}.{name}"),
                    message: format!(
                        "{heads} heads x d_k {} exceeds d_model {}",
                        self.d_k, self.d_model
                    ),
                });
            }
        }
        Ok(())
    }

    /// Name and shape of every tensor, in storage order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let hk = self.d_k;
        let mut t: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| t.push((name, shape));
        push("music.in.w".into(), vec![self.d_in, d]);
        push("music.in.b".into(), vec![1, d]);
        for l in 0..self.music_layers {
            let p = format!("music.{l}");
            for h in 0..self.music_heads {
                for m in ["wq", "wk", "wv"] {
                    push(format!("{p}.h{h}.{m}"), vec![d, hk]);
                }
            }
            push(format!("{p}.wo"), vec![self.music_heads * hk, d]);
            push(format!("{p}.bo"), vec![1, d]);
            push(format!("{p}.ln1.g"), vec![1, d]);
            push(format!("{p}.ln1.b"), vec![1, d]);
            push(format!("{p}.ff1.w"), vec![d, self.ff_dim]);
            push(format!("{p}.ff1.b"), vec![1, self.ff_dim]);
            push(format!("{p}.ff2.w"), vec![self.ff_dim, d]);
            push(format!("{p}.ff2.b"), vec![1, d]);
            push(format!("{p}.ln2.g"), vec![1, d]);
            push(format!("{p}.ln2.b"), vec![1, d]);
        }
        mlp_shapes(&mut push, "init", d + TAU_DIM, self.mlp_hidden, self.mlp_layers, POSE_DIM);
        for l in 0..self.group_layers {
            let p = format!("group.{l}");
            let input = if l == 0 { POSE_DIM } else { d };
            push(format!("{p}.lstm.wx"), vec![input, 4 * d]);
            push(format!("{p}.lstm.wh"), vec![d, 4 * d]);
            push(format!("{p}.lstm.b"), vec![1, 4 * d]);
            for h in 0..self.heads {
                for m in ["wq", "wk", "wv"] {
                    push(format!("{p}.h{h}.{m}"), vec![d, hk]);
                }
                push(format!("{p}.h{h}.gamma"), vec![1, hk]);
            }
            push(format!("{p}.wo"), vec![self.heads * hk, d]);
            push(format!("{p}.bo"), vec![1, d]);
        }
        mlp_shapes(&mut push, "dec", 2 * d, self.mlp_hidden, self.mlp_layers, POSE_DIM);
        push(NORM_MEAN.into(), vec![1, POSE_DIM]);
        push(NORM_STD.into(), vec![1, POSE_DIM]);
        t
    }
}

fn mlp_shapes(
    push: &mut impl FnMut(String, Vec<usize>),
    prefix: &str,
    input: usize,
    hidden: usize,
    layers: usize,
    output: usize,
) {
    let mut fan_in = input;
    for l in 0..layers {
        push(format!("{prefix}.{l}.w"), vec![fan_in, hidden]);
        push(format!("{prefix}.{l}.b"), vec![1, hidden]);
        fan_in = hidden;
    }
    push(format!("{prefix}.out.w"), vec![fan_in, output]);
    push(format!("{prefix}.out.b"), vec![1, output]);
}

/// Pose normalisation statistics; fixed during training.
pub(crate) const NORM_MEAN: &str = "norm.mean";
pub(crate) const NORM_STD: &str = "norm.std";

/// Floor on per-coordinate pose spread used for normalisation.
pub const MIN_POSE_STD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: GeneratorConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Uniform fan-in initialisation from a seed.
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate("generator")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        let d = config.d_model;
        for (name, shape) in config.shape_table() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == NORM_STD || name.ends_with(".g") {
                vec![1.0; n]
            } else if name == NORM_MEAN || name.ends_with(".ln1.b") || name.ends_with(".ln2.b") {
                vec![0.0; n]
            } else if name.ends_with(".lstm.b") {
                // forget gate starts open
                (0..n).map(|i| if (d..2 * d).contains(&i) { 1.0 } else { 0.0 }).collect()
            } else if name.ends_with(".b") || name.ends_with(".bo") {
                vec![0.0; n]
            } else {
                let fan_in = if shape[0] == 1 { shape[1] } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("norm.")
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| Self::is_trainable(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Trainable values flattened in name order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .filter(|(k, _)| Self::is_trainable(k))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_trainable() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_trainable(),
                x.len()
            )));
        }
        let mut at = 0;
        for (k, t) in self.tensors.iter_mut() {
            if Self::is_trainable(k) {
                let n = t.len();
                t.data_mut().copy_from_slice(&x[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Install pose statistics used to normalise decoder inputs and outputs.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != POSE_DIM || std.len() != POSE_DIM {
            return Err(Error::invalid("pose statistics must have 72 entries"));
        }
        if mean.iter().chain(std).any(|v| !v.is_finite()) || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("pose statistics must be finite with positive spread"));
        }
        self.tensors.insert(NORM_MEAN.into(), Tensor::row_vector(mean.to_vec()));
        self.tensors.insert(NORM_STD.into(), Tensor::row_vector(std.to_vec()));
        Ok(())
    }

    /// Shapes must equal the config's table and every value must be finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate("generator")?;
        let table = self.config.shape_table();
        if table.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "model has {} tensors, config expects {}",
                self.tensors.len(),
                table.len()
            )));
        }
        for (name, shape) in table {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("model is missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("tensor `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_string(&self.config).map_err(|source| Error::Json {
            context: "generator config".into(),
            source,
        })?;
        crate::io::write_atomic(path, &crate::io::encode_checkpoint(&cfg, &self.tensors)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_bytes(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (cfg, tensors) = crate::io::decode_checkpoint(bytes)?;
        let config: GeneratorConfig = serde_json::from_str(&cfg).map_err(|source| Error::Json {
            context: "checkpoint config".into(),
            source,
        })?;
        let p = ModelParams { config, tensors };
        p.validate()?;
        Ok(p)
    }
}

/// Per-dancer recurrent state between generation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState {
    /// Per group-encoder layer: hidden and cell states, one row per dancer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Last emitted pose per dancer, N×72.
    pub poses: Tensor,
}

impl GroupState {
    /// Zero recurrent state after the initial poses.
    pub fn new(initial_poses: Tensor, config: &GeneratorConfig) -> Result<Self> {
        if initial_poses.cols() != POSE_DIM || initial_poses.rows() == 0 {
            return Err(Error::invalid("initial poses must be N×72 with N ≥ 1"));
        }
        let n = initial_poses.rows();
        let z = Tensor::zeros(&[n, config.d_model]);
        Ok(GroupState {
            layers: vec![(z.clone(), z); config.group_layers],
            poses: initial_poses,
        })
    }

    pub fn dancers(&self) -> usize {
        self.poses.rows()
    }

    /// Root translations of the last poses.
    pub fn taus(&self) -> Vec<[f64; 3]> {
        (0..self.dancers())
            .map(|i| {
                let r = self.poses.row(i);
                [r[0], r[1], r[2]]
            })
            .collect()
    }

    pub fn validate(&self, config: &GeneratorConfig) -> Result<()> {
        let n = self.dancers();
        if self.layers.len() != config.group_layers {
            return Err(Error::invalid("state layer count differs from the config"));
        }
        for (h, c) in &self.layers {
            if h.shape() != [n, config.d_model] || c.shape() != [n, config.d_model] {
                return Err(Error::invalid("state tensors must be N×d_model"));
            }
            if !h.is_finite() || !c.is_finite() {
                return Err(Error::invalid("state has non-finite entries"));
            }
        }
        if !self.poses.is_finite() {
            return Err(Error::invalid("state poses are non-finite"));
        }
        Ok(())
    }
}

fn check_features(features: &Tensor, params: &ModelParams) -> Result<()> {
    if features.shape().len() != 2 || features.rows() == 0 {
        return Err(Error::invalid("music features must be a non-empty T×d matrix"));
    }
    if features.cols() != params.config.d_in {
        return Err(Error::invalid(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            params.config.d_in
        )));
    }
    if !features.is_finite() {
        return Err(Error::invalid("music features contain non-finite values"));
    }
    Ok(())
}

/// Audio codes a_t (T×d_model) and the attention weights of every layer and head.
pub fn encode_music_with_attention(features: &Tensor, params: &ModelParams) -> Result<(Tensor, Vec<Tensor>)> {
    check_features(features, params)?;
    let mut g = Graph::new();
    let ids = net::bind(&mut g, params, false);
    let x = g.constant(features.clone());
    let mut attn = Vec::new();
    let a = net::encode_music(&mut g, &ids, &params.config, x, Some(&mut attn));
    Ok((g.value(a).clone(), attn.into_iter().map(|n| g.value(n).clone()).collect()))
}

pub fn encode_music(features: &Tensor, params: &ModelParams) -> Result<Tensor> {
    Ok(encode_music_with_attention(features, params)?.0)
}

/// First pose of one dancer from the mean audio code and its start position.
pub fn initial_pose(audio: &Tensor, tau0: [f64; 3], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(initial_poses(audio, &[tau0], params)?.row(0).to_vec())
}

pub fn initial_poses(audio: &Tensor, taus0: &[[f64; 3]], params: &ModelParams) -> Result<Tensor> {
    check_audio(audio, params)?;
    check_taus(taus0)?;
    let mut g = Graph::new();
    let ids = net::bind(&mut g, params, false);
    let a = g.constant(audio.clone());
    let taus = g.constant(taus_tensor(taus0));
    let y = net::initial_pose(&mut g, &ids, &params.config, a, taus);
    Ok(g.value(y).clone())
}

fn check_audio(audio: &Tensor, params: &ModelParams) -> Result<()> {
    if audio.shape().len() != 2 || audio.rows() == 0 || audio.cols() != params.config.d_model {
        return Err(Error::invalid(format!(
            "audio codes must be T×{} with T ≥ 1",
            params.config.d_model
        )));
    }
    Ok(())
}

fn check_taus(taus: &[[f64; 3]]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::invalid("at least one dancer is required"));
    }
    if taus.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("dancer positions must be finite"));
    }
    Ok(())
}

fn taus_tensor(taus: &[[f64; 3]]) -> Tensor {
    Tensor::matrix(taus.len(), TAU_DIM, taus.iter().flatten().copied().collect())
}

/// Output of one cross-entity attention layer.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    /// Projected global-aware representations g^i, N×d_model.
    pub output: Tensor,
    /// Per head: attention weights α (N×N).
    pub weights: Vec<Tensor>,
    /// Per head: values v^j (N×d_k).
    pub values: Vec<Tensor>,
    /// Per head: Σ_j α_ij (v^j + e_ij γ) before the output projection.
    pub head_outputs: Vec<Tensor>,
    /// Pre-softmax logits per head.
    pub logits: Vec<Tensor>,
}

/// Cross-entity attention of group-encoder layer `layer`.
pub fn cross_entity_attention(
    hiddens: &Tensor,
    taus: &[[f64; 3]],
    params: &ModelParams,
    layer: usize,
) -> Result<CrossAttention> {
    check_taus(taus)?;
    let cfg = &params.config;
    if layer >= cfg.group_layers {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    if hiddens.shape() != [taus.len(), cfg.d_model] {
        return Err(Error::invalid("hiddens must be N×d_model with one row per position"));
    }
    let mut g = Graph::new();
    let ids = net::bind(&mut g, params, false);
    let h = g.constant(hiddens.clone());
    let t = g.constant(taus_tensor(taus));
    let e = net::spatial_matrix(&mut g, t);
    let mut trace = net::AttentionTrace::default();
    let out = net::cross_attention(&mut g, &ids, cfg, layer, h, e, Some(&mut trace));
    let vals = |v: Vec<_>| v.into_iter().map(|n| g.value(n).clone()).collect();
    Ok(CrossAttention {
        output: g.value(out).clone(),
        weights: vals(trace.weights),
        values: vals(trace.values),
        head_outputs: vals(trace.heads),
        logits: vals(trace.logits),
    })
}

/// One generation step for the whole group.
pub fn group_step(state: &GroupState, a_t: &[f64], params: &ModelParams) -> Result<(Tensor, GroupState)> {
    let cfg = &params.config;
    state.validate(cfg)?;
    if a_t.len() != cfg.d_model {
        return Err(Error::invalid(format!("audio code has {} entries, expected {}", a_t.len(), cfg.d_model)));
    }
    let mut g = Graph::new();
    let ids = net::bind(&mut g, params, false);
    let mut st = net::bind_state(&mut g, state);
    let prev = g.constant(state.poses.clone());
    let a = g.constant(Tensor::row_vector(a_t.to_vec()));
    let y = net::group_step(&mut g, &ids, cfg, &mut st, prev, a);
    let poses = g.value(y).clone();
    let next = GroupState {
        layers: st
            .iter()
            .map(|(h, c)| (g.value(*h).clone(), g.value(*c).clone()))
            .collect(),
        poses: poses.clone(),
    };
    Ok((poses, next))
}

/// Autoregressive generation: frame 0 from the initial-pose MLP, then one
/// group step per remaining music frame.
pub fn generate(features: &MusicFeatures, taus0: &[[f64; 3]], params: &ModelParams) -> Result<Vec<MotionSequence>> {
    params.validate()?;
    check_taus(taus0)?;
    let audio = encode_music(&features.data, params)?;
    let frames = audio.rows();
    let first = initial_poses(&audio, taus0, params)?;
    let mut out: Vec<Vec<Pose>> = vec![Vec::with_capacity(frames); taus0.len()];
    let push = |out: &mut Vec<Vec<Pose>>, y: &Tensor| -> Result<()> {
        for (i, seq) in out.iter_mut().enumerate() {
            seq.push(crate::body::unpack_pose(y.row(i))?);
        }
        Ok(())
    };
    push(&mut out, &first)?;
    let mut state = GroupState::new(first, &params.config)?;
    for t in 1..frames {
        let (y, next) = group_step(&state, audio.row(t), params)?;
        if !y.is_finite() {
            return Err(Error::invalid(format!("generation diverged at frame {t}")));
        }
        push(&mut out, &y)?;
        state = next;
    }
    let fps = if features.fps > 0.0 { features.fps } else { DEFAULT_FPS };
    out.into_iter()
        .map(|poses| MotionSequence::new(poses, BodyShape::default(), fps))
        .collect()
}

#[cfg(test)]
mod tests;
