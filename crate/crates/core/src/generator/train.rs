use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{pack_pose, MotionSequence, POSE_DIM};
use crate::error::{Error, Result};
use crate::features::MusicFeatures;
use crate::numerics::graph::Graph;
use crate::numerics::optim::Adam;
use crate::numerics::{DifferentiableFunction, Tensor};

use super::{net, GeneratorConfig, ModelParams, MIN_POSE_STD, TAU_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Number of optimizer updates.
    pub steps: usize,
    /// Teacher-forcing probability at the first step.
    pub tf_start: f64,
    /// Probability reached at the end of the decay and held afterwards.
    pub tf_end: f64,
    /// Fraction of the steps over which the probability decays linearly.
    pub tf_decay_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            steps: 1000,
            tf_start: 1.0,
            tf_end: 0.1,
            tf_decay_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |field: &str, message: &str| Error::Config {
            path: format!("{prefix}.{field}"),
            message: message.into(),
        };
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(err("lr", "must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be at least 1"));
        }
        for (f, v) in [("tf_start", self.tf_start), ("tf_end", self.tf_end), ("tf_decay_fraction", self.tf_decay_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(err(f, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Linear decay from `tf_start` to `tf_end` over the first part of training.
pub fn teacher_forcing_probability(step: usize, cfg: &TrainConfig) -> f64 {
    let span = cfg.tf_decay_fraction * cfg.steps as f64;
    if span <= 0.0 {
        return cfg.tf_end;
    }
    let u = (step as f64 / span).min(1.0);
    cfg.tf_start + (cfg.tf_end - cfg.tf_start) * u
}

/// One music clip with the group dancing to it.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub features: MusicFeatures,
    pub group: Vec<MotionSequence>,
}

impl TrainSample {
    fn frames(&self) -> usize {
        self.group
            .iter()
            .map(|m| m.len())
            .min()
            .unwrap_or(0)
            .min(self.features.frames())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTraceRow {
    pub step: usize,
    pub loss: f64,
    pub teacher_forcing: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TrainTraceRow>,
}

/// A training window laid out for the graph.
#[derive(Clone, Debug)]
pub(crate) struct Window {
    pub features: Tensor,
    /// Per frame, N×72 ground truth.
    pub targets: Vec<Tensor>,
    pub taus0: Tensor,
}

impl Window {
    pub(crate) fn cut(sample: &TrainSample, start: usize, len: usize) -> Result<Self> {
        let d = sample.features.dim();
        let rows = (start..start + len)
            .flat_map(|t| sample.features.data.row(t).iter().copied())
            .collect();
        let features = Tensor::matrix(len, d, rows);
        let n = sample.group.len();
        let mut targets = Vec::with_capacity(len);
        for t in start..start + len {
            let mut data = Vec::with_capacity(n * POSE_DIM);
            for m in &sample.group {
                data.extend(pack_pose(&m.poses[t])?);
            }
            targets.push(Tensor::matrix(n, POSE_DIM, data));
        }
        let taus0 = Tensor::matrix(
            n,
            TAU_DIM,
            (0..n).flat_map(|i| targets[0].row(i)[..TAU_DIM].to_vec()).collect(),
        );
        Ok(Window {
            features,
            targets,
            taus0,
        })
    }
}

/// Mean squared error over every dancer, frame and coordinate, plus the
/// gradient of the trainable parameters when requested.
pub(crate) fn window_loss(
    params: &ModelParams,
    w: &Window,
    teacher: &[bool],
    need_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let mut g = Graph::new();
    let b = net::bind(&mut g, params, need_grad);
    let preds = net::rollout(&mut g, &b, &params.config, &w.features, &w.targets, &w.taus0, teacher);
    let mut total = None;
    for (y, target) in preds.iter().zip(&w.targets) {
        let l = g.mse(*y, target.clone());
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let total = total.expect("window has at least one frame");
    let loss = g.scale(total, 1.0 / preds.len() as f64);
    let value = g.value(loss).data()[0];
    if !need_grad {
        return (value, None);
    }
    let grads = g.backward(loss);
    let mut flat = Vec::with_capacity(params.num_trainable());
    for (k, t) in &params.tensors {
        if !ModelParams::is_trainable(k) {
            continue;
        }
        match b.node(k).and_then(|id| grads.get(id)) {
            Some(gt) => flat.extend_from_slice(gt.data()),
            None => flat.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    (value, Some(flat))
}

fn check_dataset(dataset: &[TrainSample], gcfg: &GeneratorConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for (s, sample) in dataset.iter().enumerate() {
        if sample.group.is_empty() {
            return Err(Error::invalid(format!("sample {s} has no dancers")));
        }
        sample.features.validate()?;
        for m in &sample.group {
            m.validate()?;
        }
        if sample.features.dim() != gcfg.d_in {
            return Err(Error::invalid(format!(
                "sample {s}: features have {} columns, generator expects {}",
                sample.features.dim(),
                gcfg.d_in
            )));
        }
        if sample.frames() < gcfg.window {
            return Err(Error::invalid(format!(
                "sample {s} has {} frames, shorter than the window of {}",
                sample.frames(),
                gcfg.window
            )));
        }
    }
    Ok(())
}

/// Per-coordinate pose mean and spread over the whole training set.
pub(crate) fn pose_statistics(dataset: &[TrainSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sum = vec![0.0; POSE_DIM];
    let mut sq = vec![0.0; POSE_DIM];
    let mut n = 0.0;
    for s in dataset {
        for m in &s.group {
            for p in &m.poses {
                for (k, v) in pack_pose(p)?.into_iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_POSE_STD))
        .collect();
    Ok((mean, std))
}

/// Adam on the mean squared pose error with scheduled sampling.
///
/// Each batch entry is a whole group window, so all dancers of a group are
/// processed jointly. Row `k` of the trace is the loss of the parameters
/// before update `k`.
pub fn train(dataset: &[TrainSample], cfg: &TrainConfig, gcfg: &GeneratorConfig) -> Result<TrainOutcome> {
    cfg.validate("train")?;
    gcfg.validate("generator")?;
    check_dataset(dataset, gcfg)?;
    let mut params = ModelParams::init(gcfg, cfg.seed)?;
    let (mean, std) = pose_statistics(dataset)?;
    params.set_normalization(&mean, &std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f7a1);
    let mut x = params.flat();
    let mut adam = Adam::new(x.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let len = gcfg.window;
    for step in 0..cfg.steps {
        let p_tf = teacher_forcing_probability(step, cfg);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = rng.random_range(0..dataset.len());
            let start = rng.random_range(0..=dataset[s].frames() - len);
            let teacher: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < p_tf).collect();
            batch.push((Window::cut(&dataset[s], start, len)?, teacher));
        }
        // Summed in batch order so the result does not depend on the pool size.
        let parts: Vec<(f64, Option<Vec<f64>>)> = batch
            .par_iter()
            .map(|(w, teacher)| window_loss(&params, w, teacher, true))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (l, gr) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(gr.expect("gradient requested")) {
                *a += b;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingFailed {
                epoch: step,
                reason: format!("loss became {loss}"),
            });
        }
        trace.push(TrainTraceRow {
            step,
            loss,
            teacher_forcing: p_tf,
        });
        grad.iter_mut().for_each(|v| *v *= inv);
        adam.step(&mut x, &grad, cfg.lr);
        params.set_flat(&x)?;
    }
    Ok(TrainOutcome { params, trace })
}

/// Teacher-forced window loss as a function of every trainable parameter.
pub struct GeneratorLoss {
    params: ModelParams,
    window: Window,
    teacher: Vec<bool>,
}

impl GeneratorLoss {
    /// Loss on `sample[start..start+len]`; `teacher` picks the previous-pose
    /// source per step exactly as in training.
    pub fn new(params: ModelParams, sample: &TrainSample, start: usize, len: usize, teacher: Vec<bool>) -> Result<Self> {
        params.validate()?;
        if start + len > sample.frames() || len == 0 || teacher.len() != len {
            return Err(Error::invalid("window out of range or teacher mask of wrong length"));
        }
        let window = Window::cut(sample, start, len)?;
        Ok(GeneratorLoss {
            params,
            window,
            teacher,
        })
    }

    pub fn initial(&self) -> Vec<f64> {
        self.params.flat()
    }

    /// Names and flat offsets of the trainable tensors.
    pub fn layout(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut at = 0;
        self.params
            .tensors
            .iter()
            .filter(|(k, _)| ModelParams::is_trainable(k))
            .map(|(k, t)| {
                let r = at..at + t.len();
                at += t.len();
                (k.clone(), r)
            })
            .collect()
    }

    fn with(&self, x: &[f64]) -> Result<ModelParams> {
        let mut p = self.params.clone();
        p.set_flat(x)?;
        Ok(p)
    }
}

impl DifferentiableFunction for GeneratorLoss {
    fn dim(&self) -> usize {
        self.params.num_trainable()
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(window_loss(&self.with(x)?, &self.window, &self.teacher, false).0)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(window_loss(&self.with(x)?, &self.window, &self.teacher, true)
            .1
            .expect("gradient requested"))
    }
}
