//! Policy interface and the toy backbones trained by imitation.
//!
//! Four capacity tiers share one parameter layout convention: a flat
//! parameter vector carved into named blocks.
//!
//! * `linear`: affine map from the concatenated clip frames to controls.
//! * `mlp`: two tanh hidden layers over the concatenated clip frames.
//! * `frozen_encoder_head`: a fixed random tanh projection per frame,
//!   mean-pooled over the clip, followed by a trainable affine head.
//! * `recurrent`: a gated running state over frames with an affine readout.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driving_sim::{expert_controls, Controls, EpisodeState, Observation, Route, SimParams, OBS_DIM};

pub const ENCODER_DIM: usize = 64;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_RECURRENT_STATE: usize = 16;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("window has {got} frames, policy clip expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("invalid clip: frames and stride must both be at least 1")]
    BadClip,
    #[error("{kind} policy requires an encoder")]
    MissingEncoder { kind: PolicyKind },
    #[error("parameter vector has {got} entries, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Format(#[from] serde_json::Error),
}

/// Temporal clip: `frames` observations taken every `stride` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipSpec {
    pub frames: usize,
    pub stride: usize,
}

impl ClipSpec {
    pub const SINGLE: ClipSpec = ClipSpec { frames: 1, stride: 1 };

    pub fn new(frames: usize, stride: usize) -> Result<Self, PolicyError> {
        if frames == 0 || stride == 0 {
            return Err(PolicyError::BadClip);
        }
        Ok(ClipSpec { frames, stride })
    }

    pub fn is_single_frame(&self) -> bool {
        self.frames == 1
    }
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec::SINGLE
    }
}

/// Window ending at step `t` of `history`, oldest frame first. Frames before
/// the start of the episode are zero observations.
pub fn build_window(history: &[Observation], t: usize, clip: ClipSpec) -> Vec<Observation> {
    (0..clip.frames)
        .rev()
        .map(|back| {
            let offset = back * clip.stride;
            if offset > t {
                Observation::zeros()
            } else {
                history[t - offset]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Linear,
    Mlp,
    FrozenEncoderHead,
    Recurrent,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Linear => "linear",
            PolicyKind::Mlp => "mlp",
            PolicyKind::FrozenEncoderHead => "frozen_encoder_head",
            PolicyKind::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(PolicyKind::Linear),
            "mlp" => Ok(PolicyKind::Mlp),
            "frozen_encoder_head" | "encoder" => Ok(PolicyKind::FrozenEncoderHead),
            "recurrent" => Ok(PolicyKind::Recurrent),
            other => Err(format!("unknown policy kind '{other}'")),
        }
    }
}

/// Fixed random feature extractor. Never touched by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    pub id: String,
    pub seed: u64,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FrozenEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / (OBS_DIM as f64).sqrt()).unwrap();
        let b = Normal::new(0.0, 0.1).unwrap();
        let weights = (0..ENCODER_DIM * OBS_DIM).map(|_| w.sample(&mut rng)).collect();
        let bias = (0..ENCODER_DIM).map(|_| b.sample(&mut rng)).collect();
        FrozenEncoder { id: format!("fenc-{seed}"), seed, weights, bias }
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let x = obs.to_vec();
        (0..ENCODER_DIM)
            .map(|i| {
                let row = &self.weights[i * OBS_DIM..(i + 1) * OBS_DIM];
                (dot(row, &x) + self.bias[i]).tanh()
            })
            .collect()
    }

    /// Little-endian bytes of every parameter, for frozenness checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.weights.iter().chain(&self.bias).flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub fn encode(encoder: &FrozenEncoder, obs: &Observation) -> Vec<f64> {
    encoder.encode(obs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    fn new(name: &str, shape: &[usize]) -> Self {
        ParamBlock { name: name.to_string(), shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-feature affine input standardization, frozen after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Fit from feature rows; scales below `floor` are raised to it.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, floor: f64) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for j in 0..dim {
                let delta = row[j] - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (row[j] - mean[j]);
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let scale = m2.iter().map(|s| (s / n as f64).sqrt().max(floor)).collect();
        Normalizer { mean, scale }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }
}

/// Per-output affine map from network units to control units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl TargetScale {
    pub const IDENTITY: TargetScale = TargetScale { mean: [0.0; 2], scale: [1.0; 2] };

    /// Fit from control targets; scales below `floor` are raised to it.
    pub fn fit(targets: &[Controls], floor: f64) -> Self {
        if targets.is_empty() {
            return Self::IDENTITY;
        }
        let n = targets.len() as f64;
        let cols = |f: fn(&Controls) -> f64| {
            let m = targets.iter().map(f).sum::<f64>() / n;
            let v = targets.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt().max(floor))
        };
        let (ms, ss) = cols(|c| c.steer);
        let (mt, st) = cols(|c| c.throttle);
        TargetScale { mean: [ms, mt], scale: [ss, st] }
    }
}

impl Default for TargetScale {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Network input after feature extraction and normalization.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared {
    Flat(Vec<f64>),
    Sequence(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub kind: PolicyKind,
    pub clip: ClipSpec,
    pub encoder: Option<FrozenEncoder>,
    pub hidden: usize,
    pub blocks: Vec<ParamBlock>,
    pub params: Vec<f64>,
    pub normalizer: Normalizer,
    #[serde(default)]
    pub target_scale: TargetScale,
    /// Digest of the training configuration that produced the parameters.
    pub train_digest: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W x + b` for a row-major `W` of shape `[out.len(), x.len()]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * n..(i + 1) * n], x) + b[i];
    }
}

/// Accumulate `dW += dy x^T`, `db += dy` and return `W^T dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (i, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[i] += g;
        let row = &w[i * n..(i + 1) * n];
        let grow = &mut gw[i * n..(i + 1) * n];
        for j in 0..n {
            grow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

impl Policy {
    /// Freshly initialized policy. Affine readouts start at zero; hidden
    /// layers get scaled Gaussian weights drawn from `seed`.
    pub fn new(kind: PolicyKind, clip: ClipSpec, encoder: Option<FrozenEncoder>, seed: u64) -> Result<Self, PolicyError> {
        if clip.frames == 0 || clip.stride == 0 {
            return Err(PolicyError::BadClip);
        }
        if kind == PolicyKind::FrozenEncoderHead && encoder.is_none() {
            return Err(PolicyError::MissingEncoder { kind });
        }
        let hidden = match kind {
            PolicyKind::Recurrent => DEFAULT_RECURRENT_STATE,
            PolicyKind::Mlp => DEFAULT_HIDDEN,
            _ => 0,
        };
        let frame_dim = if kind == PolicyKind::FrozenEncoderHead { ENCODER_DIM } else { OBS_DIM };
        let blocks = Self::layout(kind, clip, frame_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for b in &blocks {
            let fan_in = *b.shape.last().unwrap();
            let is_weight = b.shape.len() == 2;
            let is_readout = b.name.starts_with("w_out") || b.name.starts_with("b_out");
            if is_weight && !is_readout {
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
                params.extend((0..b.len()).map(|_| dist.sample(&mut rng)));
            } else {
                params.extend(std::iter::repeat_n(0.0, b.len()));
            }
        }
        let id = match &encoder {
            Some(e) => format!("{}+{}-T{}s{}", e.id, kind.name(), clip.frames, clip.stride),
            None => format!("{}-T{}s{}", kind.name(), clip.frames, clip.stride),
        };
        Ok(Policy {
            id,
            kind,
            clip,
            encoder,
            hidden,
            blocks,
            params,
            normalizer: Normalizer::identity(frame_dim),
            target_scale: TargetScale::IDENTITY,
            train_digest: None,
        })
    }

    fn layout(kind: PolicyKind, clip: ClipSpec, frame_dim: usize, hidden: usize) -> Vec<ParamBlock> {
        match kind {
            PolicyKind::Linear => {
                let d = frame_dim * clip.frames;
                vec![ParamBlock::new("w_out", &[2, d]), ParamBlock::new("b_out", &[2])]
            }
            PolicyKind::Mlp => {
                let d = frame_dim * clip.frames;
                vec![
                    ParamBlock::new("w1", &[hidden, d]),
                    ParamBlock::new("b1", &[hidden]),
                    ParamBlock::new("w2", &[hidden, hidden]),
                    ParamBlock::new("b2", &[hidden]),
                    ParamBlock::new("w_out", &[2, hidden]),
                    ParamBlock::new("b_out", &[2]),
                ]
            }
            PolicyKind::FrozenEncoderHead => {
                vec![ParamBlock::new("w_out", &[2, frame_dim]), ParamBlock::new("b_out", &[2])]
            }
            PolicyKind::Recurrent => vec![
                ParamBlock::new("w_gate", &[hidden, frame_dim]),
                ParamBlock::new("b_gate", &[hidden]),
                ParamBlock::new("w_cand", &[hidden, frame_dim]),
                ParamBlock::new("u_cand", &[hidden, hidden]),
                ParamBlock::new("b_cand", &[hidden]),
                ParamBlock::new("w_out", &[2, hidden]),
                ParamBlock::new("b_out", &[2]),
            ],
        }
    }

    /// Width of one frame's feature vector as seen by the network.
    pub fn frame_dim(&self) -> usize {
        if self.kind == PolicyKind::FrozenEncoderHead {
            ENCODER_DIM
        } else {
            OBS_DIM
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    /// Start offset of each block in the flat parameter vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = off;
                off += b.len();
                o
            })
            .collect()
    }

    fn split<'a>(&self, params: &'a [f64]) -> Vec<&'a [f64]> {
        let mut rest = params;
        self.blocks
            .iter()
            .map(|b| {
                let (head, tail) = rest.split_at(b.len());
                rest = tail;
                head
            })
            .collect()
    }

    fn split_mut<'a>(&self, params: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        let mut rest = params;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(b.len());
            out.push(head);
            rest = tail;
        }
        out
    }

    /// Raw per-frame features before normalization.
    pub fn frame_features(&self, obs: &Observation) -> Vec<f64> {
        match &self.encoder {
            Some(enc) if self.kind == PolicyKind::FrozenEncoderHead => enc.encode(obs),
            _ => obs.to_vec(),
        }
    }

    /// Extract, normalize and arrange the window for the network.
    pub fn prepare(&self, window: &[Observation]) -> Result<Prepared, PolicyError> {
        if window.len() != self.clip.frames {
            return Err(PolicyError::WindowLength { expected: self.clip.frames, got: window.len() });
        }
        let frames: Vec<Vec<f64>> = window
            .iter()
            .map(|o| {
                let mut f = self.frame_features(o);
                self.normalizer.apply(&mut f);
                f
            })
            .collect();
        Ok(self.arrange(frames))
    }

    /// Arrange already-normalized frame features.
    pub fn arrange(&self, frames: Vec<Vec<f64>>) -> Prepared {
        match self.kind {
            PolicyKind::Linear | PolicyKind::Mlp => Prepared::Flat(frames.concat()),
            PolicyKind::FrozenEncoderHead => {
                let n = frames.len() as f64;
                let mut pooled = vec![0.0; ENCODER_DIM];
                for f in &frames {
                    for (p, v) in pooled.iter_mut().zip(f) {
                        *p += v / n;
                    }
                }
                Prepared::Flat(pooled)
            }
            PolicyKind::Recurrent => Prepared::Sequence(frames),
        }
    }

    /// Network output for prepared input, before control clipping.
    pub fn forward(&self, params: &[f64], x: &Prepared) -> [f64; 2] {
        let p = self.split(params);
        let mut out = [0.0; 2];
        match (self.kind, x) {
            (PolicyKind::Linear | PolicyKind::FrozenEncoderHead, Prepared::Flat(x)) => {
                affine(p[0], p[1], x, &mut out);
            }
            (PolicyKind::Mlp, Prepared::Flat(x)) => {
                let (h1, h2) = self.mlp_hidden(&p, x);
                let _ = h1;
                affine(p[4], p[5], &h2, &mut out);
            }
            (PolicyKind::Recurrent, Prepared::Sequence(seq)) => {
                let trace = self.recurrent_trace(&p, seq);
                let h = trace.last().map(|s| s.h.clone()).unwrap_or_else(|| vec![0.0; self.hidden]);
                affine(p[5], p[6], &h, &mut out);
            }
            _ => unreachable!("prepared input does not match policy kind"),
        }
        let ts = &self.target_scale;
        [ts.mean[0] + ts.scale[0] * out[0], ts.mean[1] + ts.scale[1] * out[1]]
    }

    fn mlp_hidden(&self, p: &[&[f64]], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h1 = vec![0.0; self.hidden];
        affine(p[0], p[1], x, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = vec![0.0; self.hidden];
        affine(p[2], p[3], &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        (h1, h2)
    }

    fn recurrent_trace(&self, p: &[&[f64]], seq: &[Vec<f64>]) -> Vec<RecurrentStep> {
        let s = self.hidden;
        let mut h = vec![0.0; s];
        let mut out = Vec::with_capacity(seq.len());
        for x in seq {
            let mut z = vec![0.0; s];
            affine(p[0], p[1], x, &mut z);
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut a = vec![0.0; s];
            affine(p[2], p[4], x, &mut a);
            for (i, ai) in a.iter_mut().enumerate() {
                *ai += dot(&p[3][i * s..(i + 1) * s], &h);
            }
            let c: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..s).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
            out.push(RecurrentStep { h_prev: h, z, c, h: h_new.clone() });
            h = h_new;
        }
        out
    }

    /// Accumulate into `grad` the gradient of `dout . forward(params, x)`.
    pub fn backward(&self, params: &[f64], x: &Prepared, dout: [f64; 2], grad: &mut [f64]) {
        let dout = [dout[0] * self.target_scale.scale[0], dout[1] * self.target_scale.scale[1]];
        let p = self.split(params);
        let mut g = self.split_mut(grad);
        match (self.kind, x) {
            (PolicyKind::Linear | PolicyKind::FrozenEncoderHead, Prepared::Flat(x)) => {
                let (gw, gb) = g.split_at_mut(1);
                affine_backward(p[0], x, &dout, gw[0], gb[0]);
            }
            (PolicyKind::Mlp, Prepared::Flat(x)) => {
                let (h1, h2) = self.mlp_hidden(&p, x);
                let (g01, g2345) = g.split_at_mut(2);
                let (g23, g45) = g2345.split_at_mut(2);
                let (gwo, gbo) = g45.split_at_mut(1);
                let dh2 = affine_backward(p[4], &h2, &dout, gwo[0], gbo[0]);
                let da2: Vec<f64> = dh2.iter().zip(&h2).map(|(d, h)| d * (1.0 - h * h)).collect();
                let (gw2, gb2) = g23.split_at_mut(1);
                let dh1 = affine_backward(p[2], &h1, &da2, gw2[0], gb2[0]);
                let da1: Vec<f64> = dh1.iter().zip(&h1).map(|(d, h)| d * (1.0 - h * h)).collect();
                let (gw1, gb1) = g01.split_at_mut(1);
                affine_backward(p[0], x, &da1, gw1[0], gb1[0]);
            }
            (PolicyKind::Recurrent, Prepared::Sequence(seq)) => {
                let s = self.hidden;
                let trace = self.recurrent_trace(&p, seq);
                let h_last = trace.last().map(|t| t.h.clone()).unwrap_or_else(|| vec![0.0; s]);
                let mut dh = {
                    let (gwo, gbo) = g[5..].split_at_mut(1);
                    affine_backward(p[5], &h_last, &dout, gwo[0], gbo[0])
                };
                for (t, step) in trace.iter().enumerate().rev() {
                    let x = &seq[t];
                    let dz: Vec<f64> = (0..s)
                        .map(|i| dh[i] * (step.c[i] - step.h_prev[i]) * step.z[i] * (1.0 - step.z[i]))
                        .collect();
                    let da: Vec<f64> = (0..s).map(|i| dh[i] * step.z[i] * (1.0 - step.c[i] * step.c[i])).collect();
                    {
                        let (gwz, gbz) = g[0..2].split_at_mut(1);
                        affine_backward(p[0], x, &dz, gwz[0], gbz[0]);
                    }
                    for i in 0..s {
                        if da[i] == 0.0 {
                            continue;
                        }
                        g[4][i] += da[i];
                        let row = &mut g[2][i * x.len()..(i + 1) * x.len()];
                        for (r, xv) in row.iter_mut().zip(x) {
                            *r += da[i] * xv;
                        }
                        let urow = &mut g[3][i * s..(i + 1) * s];
                        for (r, hv) in urow.iter_mut().zip(&step.h_prev) {
                            *r += da[i] * hv;
                        }
                    }
                    let mut dh_prev: Vec<f64> = (0..s).map(|i| dh[i] * (1.0 - step.z[i])).collect();
                    for i in 0..s {
                        for (j, d) in dh_prev.iter_mut().enumerate() {
                            *d += p[3][i * s + j] * da[i];
                        }
                    }
                    dh = dh_prev;
                }
            }
            _ => unreachable!("prepared input does not match policy kind"),
        }
    }

    /// Controls for a window, clipped into the admissible box.
    pub fn predict(&self, window: &[Observation]) -> Result<Controls, PolicyError> {
        let x = self.prepare(window)?;
        let y = self.forward(&self.params, &x);
        Ok(Controls::clipped(y[0], y[1]))
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), PolicyError> {
        if params.len() != self.param_count() {
            return Err(PolicyError::ParamCount { expected: self.param_count(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: Policy = serde_json::from_str(text)?;
        if p.params.len() != p.param_count() {
            return Err(PolicyError::ParamCount { expected: p.param_count(), got: p.params.len() });
        }
        Ok(p)
    }
}

struct RecurrentStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

pub fn predict(policy: &Policy, window: &[Observation]) -> Result<Controls, PolicyError> {
    policy.predict(window)
}

/// Anything that can close the loop: learned policies, the privileged
/// expert, or scripted test drivers.
pub trait Driver: Sync {
    fn name(&self) -> String;

    fn clip(&self) -> ClipSpec;

    fn act(&self, window: &[Observation], state: &EpisodeState, route: &Route, sim: &SimParams) -> Result<Controls, PolicyError>;
}

impl Driver for Policy {
    fn name(&self) -> String {
        self.id.clone()
    }

    fn clip(&self) -> ClipSpec {
        self.clip
    }

    fn act(&self, window: &[Observation], _: &EpisodeState, _: &Route, _: &SimParams) -> Result<Controls, PolicyError> {
        self.predict(window)
    }
}

/// The demonstrator, driving from privileged state.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert;

impl Driver for Expert {
    fn name(&self) -> String {
        "expert".to_string()
    }

    fn clip(&self) -> ClipSpec {
        ClipSpec::SINGLE
    }

    fn act(&self, _: &[Observation], state: &EpisodeState, route: &Route, sim: &SimParams) -> Result<Controls, PolicyError> {
        Ok(expert_controls(state, route, sim))
    }
}

/// Open-loop constant controls.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub Controls);

impl Driver for Constant {
    fn name(&self) -> String {
        format!("constant({:.3},{:.3})", self.0.steer, self.0.throttle)
    }

    fn clip(&self) -> ClipSpec {
        ClipSpec::SINGLE
    }

    fn act(&self, _: &[Observation], _: &EpisodeState, _: &Route, _: &SimParams) -> Result<Controls, PolicyError> {
        Ok(Controls::clipped(self.0.steer, self.0.throttle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driving_sim::{generate_route, observe};
    use crate::factor_space::{parse_tag, Scene};

    fn sample_window(n: usize, seed: u64) -> Vec<Observation> {
        let sim = SimParams::default();
        let route = generate_route(seed, Scene::Urban, &sim);
        let cfg = parse_tag("USpRNA").unwrap();
        let mut st = EpisodeState::with_pose(seed, 30.0, 0.3, 0.05, 9.0);
        (0..n).map(|_| observe(&mut st, &route, &cfg, &sim)).collect()
    }

    #[test]
    fn zero_linear_policy_outputs_zero() {
        let p = Policy::new(PolicyKind::Linear, ClipSpec::SINGLE, None, 0).unwrap();
        assert_eq!(p.predict(&sample_window(1, 1)).unwrap(), Controls::ZERO);
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let p = Policy::new(PolicyKind::Mlp, ClipSpec::new(3, 2).unwrap(), None, 0).unwrap();
        assert!(matches!(p.predict(&sample_window(2, 1)), Err(PolicyError::WindowLength { expected: 3, got: 2 })));
    }

    #[test]
    fn encoder_head_needs_encoder() {
        assert!(Policy::new(PolicyKind::FrozenEncoderHead, ClipSpec::SINGLE, None, 0).is_err());
    }

    #[test]
    fn predictions_are_deterministic_and_clipped() {
        for kind in [PolicyKind::Linear, PolicyKind::Mlp, PolicyKind::Recurrent, PolicyKind::FrozenEncoderHead] {
            let enc = (kind == PolicyKind::FrozenEncoderHead).then(|| FrozenEncoder::new(5));
            let mut p = Policy::new(kind, ClipSpec::new(2, 2).unwrap(), enc, 9).unwrap();
            let huge: Vec<f64> = (0..p.param_count()).map(|i| if i % 2 == 0 { 50.0 } else { -30.0 }).collect();
            p.set_params(huge).unwrap();
            let w = sample_window(2, 4);
            let a = p.predict(&w).unwrap();
            assert_eq!(a, p.predict(&w).unwrap());
            assert!(a.is_admissible(), "{kind}: {a:?}");
        }
    }

    #[test]
    fn encoder_head_is_head_of_pooled_encoding() {
        let enc = FrozenEncoder::new(17);
        let mut p = Policy::new(PolicyKind::FrozenEncoderHead, ClipSpec::new(3, 1).unwrap(), Some(enc.clone()), 2).unwrap();
        let params: Vec<f64> = (0..p.param_count()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1e-3).collect();
        p.set_params(params.clone()).unwrap();
        let w = sample_window(3, 8);

        let feats: Vec<Vec<f64>> = w.iter().map(|o| encode(&enc, o)).collect();
        let mut pooled = vec![0.0; ENCODER_DIM];
        for f in &feats {
            for (a, b) in pooled.iter_mut().zip(f) {
                *a += b / 3.0;
            }
        }
        let head_w = &params[..2 * ENCODER_DIM];
        let head_b = &params[2 * ENCODER_DIM..];
        let steer: f64 = head_w[..ENCODER_DIM].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() + head_b[0];
        let throttle: f64 = head_w[ENCODER_DIM..].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>() + head_b[1];
        let c = p.predict(&w).unwrap();
        assert!((c.steer - Controls::clipped(steer, throttle).steer).abs() < 1e-12);
        assert!((c.throttle - Controls::clipped(steer, throttle).throttle).abs() < 1e-12);
    }

    #[test]
    fn encoders_differ_by_seed() {
        let probe = sample_window(1, 3)[0];
        let a = FrozenEncoder::new(1).encode(&probe);
        let b = FrozenEncoder::new(2).encode(&probe);
        assert_eq!(a, FrozenEncoder::new(1).encode(&probe));
        assert_ne!(a, b);
    }

    #[test]
    fn window_pads_with_zeros() {
        let hist = sample_window(5, 2);
        let clip = ClipSpec::new(4, 2).unwrap();
        let w = build_window(&hist, 3, clip);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], Observation::zeros());
        assert_eq!(w[1], Observation::zeros());
        assert_eq!(w[2], hist[1]);
        assert_eq!(w[3], hist[3]);
        let w = build_window(&hist, 0, ClipSpec::SINGLE);
        assert_eq!(w, vec![hist[0]]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = Policy::new(PolicyKind::Recurrent, ClipSpec::new(2, 1).unwrap(), None, 3).unwrap();
        p.save(&path).unwrap();
        assert_eq!(Policy::load(&path).unwrap(), p);
    }
}
