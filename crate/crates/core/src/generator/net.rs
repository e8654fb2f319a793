//! Graph builders shared by inference, training and the gradient check.

use std::collections::BTreeMap;

use crate::body::POSE_DIM;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::Tensor;

use super::{GeneratorConfig, GroupState, ModelParams, NORM_MEAN, NORM_STD, TAU_DIM};

const LN_EPS: f64 = 1e-5;

pub(crate) struct Bound {
    ids: BTreeMap<String, NodeId>,
    /// 1/std for normalising decoder inputs.
    inv_std: NodeId,
    neg_mean: NodeId,
}

impl Bound {
    fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub(crate) fn node(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}

/// Puts every tensor on the graph; trainable ones as parameters when `train`.
pub(crate) fn bind(g: &mut Graph, params: &ModelParams, train: bool) -> Bound {
    let mut ids = BTreeMap::new();
    for (k, t) in &params.tensors {
        let id = if train && ModelParams::is_trainable(k) {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        };
        ids.insert(k.clone(), id);
    }
    let mean = params.get(NORM_MEAN);
    let std = params.get(NORM_STD);
    let inv_std = g.constant(std.map(|s| 1.0 / s));
    let neg_mean = g.constant(mean.map(|m| -m));
    Bound { ids, inv_std, neg_mean }
}

pub(crate) fn bind_state(g: &mut Graph, state: &GroupState) -> Vec<(NodeId, NodeId)> {
    state
        .layers
        .iter()
        .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
        .collect()
}

fn linear(g: &mut Graph, b: &Bound, x: NodeId, w: &str, bias: &str) -> NodeId {
    let y = g.matmul(x, b.id(w));
    g.add_row(y, b.id(bias))
}

fn layer_norm(g: &mut Graph, b: &Bound, x: NodeId, prefix: &str) -> NodeId {
    let n = g.normalize_rows(x, LN_EPS);
    let s = g.mul_row(n, b.id(&format!("{prefix}.g")));
    g.add_row(s, b.id(&format!("{prefix}.b")))
}

fn mlp(g: &mut Graph, b: &Bound, x: NodeId, prefix: &str, layers: usize) -> NodeId {
    let mut h = x;
    for l in 0..layers {
        let z = linear(g, b, h, &format!("{prefix}.{l}.w"), &format!("{prefix}.{l}.b"));
        h = g.relu(z);
    }
    linear(g, b, h, &format!("{prefix}.out.w"), &format!("{prefix}.out.b"))
}

/// Fixed sinusoidal position encoding, T×d.
pub(crate) fn position_encoding(frames: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * d);
    for t in 0..frames {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * k / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(frames, d, data)
}

/// Music transformer over the whole window (no mask).
pub(crate) fn encode_music(
    g: &mut Graph,
    b: &Bound,
    cfg: &GeneratorConfig,
    features: NodeId,
    mut attn: Option<&mut Vec<NodeId>>,
) -> NodeId {
    let frames = g.value(features).rows();
    let proj = linear(g, b, features, "music.in.w", "music.in.b");
    let pe = g.constant(position_encoding(frames, cfg.d_model));
    let mut x = g.add(proj, pe);
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    for l in 0..cfg.music_layers {
        let p = format!("music.{l}");
        let mut heads = Vec::with_capacity(cfg.music_heads);
        for h in 0..cfg.music_heads {
            let q = g.matmul(x, b.id(&format!("{p}.h{h}.wq")));
            let k = g.matmul(x, b.id(&format!("{p}.h{h}.wk")));
            let v = g.matmul(x, b.id(&format!("{p}.h{h}.wv")));
            let s = g.matmul_t(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            if let Some(list) = attn.as_deref_mut() {
                list.push(a);
            }
            heads.push(g.matmul(a, v));
        }
        let cat = g.concat_cols(&heads);
        let o = linear(g, b, cat, &format!("{p}.wo"), &format!("{p}.bo"));
        let r = g.add(x, o);
        let x1 = layer_norm(g, b, r, &format!("{p}.ln1"));
        let f = linear(g, b, x1, &format!("{p}.ff1.w"), &format!("{p}.ff1.b"));
        let f = g.relu(f);
        let f = linear(g, b, f, &format!("{p}.ff2.w"), &format!("{p}.ff2.b"));
        let r = g.add(x1, f);
        x = layer_norm(g, b, r, &format!("{p}.ln2"));
    }
    x
}

fn denormalize(g: &mut Graph, b: &Bound, raw: NodeId) -> NodeId {
    let s = g.mul_row(raw, b.id(NORM_STD));
    g.add_row(s, b.id(NORM_MEAN))
}

fn normalize(g: &mut Graph, b: &Bound, pose: NodeId) -> NodeId {
    let c = g.add_row(pose, b.neg_mean);
    g.mul_row(c, b.inv_std)
}

/// N×72 first poses from the temporal mean of the audio codes and N×3 positions.
pub(crate) fn initial_pose(g: &mut Graph, b: &Bound, cfg: &GeneratorConfig, audio: NodeId, taus: NodeId) -> NodeId {
    let n = g.value(taus).rows();
    let mean = g.mean_rows(audio);
    let rep = g.repeat_rows(mean, n);
    let x = g.concat_cols(&[rep, taus]);
    let raw = mlp(g, b, x, "init", cfg.mlp_layers);
    denormalize(g, b, raw)
}

/// Scalar spatial encoding between two root positions.
pub fn spatial_encoding(tau_i: [f64; 3], tau_j: [f64; 3]) -> f64 {
    let d2: f64 = (0..3).map(|k| (tau_i[k] - tau_j[k]).powi(2)).sum();
    (-d2 / (TAU_DIM as f64).sqrt()).exp()
}

/// N×N matrix of spatial encodings from N×3 positions.
pub(crate) fn spatial_matrix(g: &mut Graph, taus: NodeId) -> NodeId {
    let d2 = g.pairwise_sq_dist(taus);
    let s = g.scale(d2, -1.0 / (TAU_DIM as f64).sqrt());
    g.exp(s)
}

#[derive(Default)]
pub(crate) struct AttentionTrace {
    pub weights: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub heads: Vec<NodeId>,
    pub logits: Vec<NodeId>,
}

pub(crate) fn cross_attention(
    g: &mut Graph,
    b: &Bound,
    cfg: &GeneratorConfig,
    layer: usize,
    hiddens: NodeId,
    e: NodeId,
    mut trace: Option<&mut AttentionTrace>,
) -> NodeId {
    let p = format!("group.{layer}");
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.matmul(hiddens, b.id(&format!("{p}.h{h}.wq")));
        let k = g.matmul(hiddens, b.id(&format!("{p}.h{h}.wk")));
        let v = g.matmul(hiddens, b.id(&format!("{p}.h{h}.wv")));
        let s = g.matmul_t(q, k);
        let s = g.scale(s, scale);
        let logits = g.add(s, e);
        let alpha = g.softmax_rows(logits);
        let av = g.matmul(alpha, v);
        // Σ_j α_ij e_ij γ = (row sums of α∘E) ⊗ γ
        let ae = g.mul(alpha, e);
        let w = g.row_sum(ae);
        let bias = g.matmul(w, b.id(&format!("{p}.h{h}.gamma")));
        let out = g.add(av, bias);
        if let Some(t) = trace.as_deref_mut() {
            t.weights.push(alpha);
            t.values.push(v);
            t.heads.push(out);
            t.logits.push(logits);
        }
        heads.push(out);
    }
    let cat = g.concat_cols(&heads);
    linear(g, b, cat, &format!("{p}.wo"), &format!("{p}.bo"))
}

fn lstm(g: &mut Graph, b: &Bound, d: usize, prefix: &str, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
    let zx = g.matmul(x, b.id(&format!("{prefix}.wx")));
    let zh = g.matmul(h, b.id(&format!("{prefix}.wh")));
    let z = g.add(zx, zh);
    let z = g.add_row(z, b.id(&format!("{prefix}.b")));
    let gate = |g: &mut Graph, k: usize| g.slice_cols(z, k * d, (k + 1) * d);
    let i = gate(g, 0);
    let f = gate(g, 1);
    let cand = gate(g, 2);
    let o = gate(g, 3);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let fc = g.mul(f, c);
    let ic = g.mul(i, cand);
    let c2 = g.add(fc, ic);
    let tc = g.tanh(c2);
    let h2 = g.mul(o, tc);
    (h2, c2)
}

/// One autoregressive step; `state` is updated in place, returns N×72 poses.
pub(crate) fn group_step(
    g: &mut Graph,
    b: &Bound,
    cfg: &GeneratorConfig,
    state: &mut [(NodeId, NodeId)],
    prev_pose: NodeId,
    a_t: NodeId,
) -> NodeId {
    let n = g.value(prev_pose).rows();
    let taus = g.slice_cols(prev_pose, 0, TAU_DIM);
    let e = spatial_matrix(g, taus);
    let mut x = normalize(g, b, prev_pose);
    for (l, (h, c)) in state.iter_mut().enumerate() {
        let (h2, c2) = lstm(g, b, cfg.d_model, &format!("group.{l}.lstm"), x, *h, *c);
        *h = h2;
        *c = c2;
        let gl = cross_attention(g, b, cfg, l, h2, e, None);
        x = g.add(h2, gl);
    }
    let a = g.repeat_rows(a_t, n);
    let input = g.concat_cols(&[x, a]);
    let raw = mlp(g, b, input, "dec", cfg.mlp_layers);
    debug_assert_eq!(g.value(raw).cols(), POSE_DIM);
    denormalize(g, b, raw)
}

/// Whole-window forward pass; `teacher[t]` chooses the ground-truth previous
/// pose for step t (index 0 unused). Returns the per-frame N×72 predictions.
pub(crate) fn rollout(
    g: &mut Graph,
    b: &Bound,
    cfg: &GeneratorConfig,
    features: &Tensor,
    targets: &[Tensor],
    taus0: &Tensor,
    teacher: &[bool],
) -> Vec<NodeId> {
    let f = g.constant(features.clone());
    let audio = encode_music(g, b, cfg, f, None);
    let t0 = g.constant(taus0.clone());
    let mut y = initial_pose(g, b, cfg, audio, t0);
    let n = taus0.rows();
    let zeros = Tensor::zeros(&[n, cfg.d_model]);
    let mut state: Vec<(NodeId, NodeId)> = (0..cfg.group_layers)
        .map(|_| (g.constant(zeros.clone()), g.constant(zeros.clone())))
        .collect();
    let mut out = vec![y];
    for t in 1..targets.len() {
        let prev = if teacher[t] {
            g.constant(targets[t - 1].clone())
        } else {
            y
        };
        let a = g.slice_rows(audio, t, t + 1);
        y = group_step(g, b, cfg, &mut state, prev, a);
        out.push(y);
    }
    out
}
