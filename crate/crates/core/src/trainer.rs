//! Expert demonstrations and imitation training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::driving_sim::{expert_controls, generate_route, observe, step, Controls, EpisodeState, Observation, SimParams, DT, HORIZON};
use crate::factor_space::IdSupport;
use crate::policies::{build_window, ClipSpec, Normalizer, Policy, PolicyError, Prepared, TargetScale};
use crate::split_builder::stable_hash;

/// Seed domains for demonstrations; distinct from the evaluation domains.
const DEMO_DOMAIN: &str = "demo";
const DEMO_ROUTE_DOMAIN: &str = "demo-route";

/// Lower bound on fitted feature scales.
pub const NORMALIZER_FLOOR: f64 = 0.05;

/// Lower bound on fitted control target scales.
pub const TARGET_SCALE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("demonstration dataset is empty")]
    EmptyData,
    #[error("dataset clip {data:?} does not match policy clip {policy:?}")]
    ClipMismatch { data: ClipSpec, policy: ClipSpec },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One expert episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: usize,
    pub tag: String,
    pub seed: u64,
    pub route_seed: u64,
    pub frames: Vec<Observation>,
    pub targets: Vec<Controls>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub clip: ClipSpec,
    pub traces: Vec<Trace>,
}

impl DemoDataset {
    pub fn sample_count(&self) -> usize {
        self.traces.iter().map(|t| t.targets.len()).sum()
    }

    pub fn trace_count(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count() == 0
    }

    /// Every (window, target, tag, trace id) sample.
    pub fn samples(&self) -> impl Iterator<Item = (Vec<Observation>, Controls, &str, usize)> + '_ {
        self.traces.iter().flat_map(move |tr| {
            (0..tr.targets.len()).map(move |t| (build_window(&tr.frames, t, self.clip), tr.targets[t], tr.tag.as_str(), tr.id))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Run the expert for a full horizon per trace and log every step.
pub fn collect_demos(support: &IdSupport, traces_per_config: usize, clip: ClipSpec, seed: u64, sim: &SimParams) -> DemoDataset {
    let mut traces = Vec::new();
    for config in support.members() {
        let tag = config.tag();
        for i in 0..traces_per_config {
            let ep_seed = seed ^ stable_hash(DEMO_DOMAIN, &tag, i as u64);
            let route_seed = seed ^ stable_hash(DEMO_ROUTE_DOMAIN, "", i as u64);
            let route = generate_route(route_seed, config.scene, sim);
            let mut state = EpisodeState::new(ep_seed, sim.expert_v_ref);
            let mut frames = Vec::with_capacity(HORIZON);
            let mut targets = Vec::with_capacity(HORIZON);
            for _ in 0..HORIZON {
                frames.push(observe(&mut state, &route, config, sim));
                let c = expert_controls(&state, &route, sim);
                targets.push(c);
                if step(&mut state, &route, c, DT, sim).any() {
                    break;
                }
            }
            traces.push(Trace { id: traces.len(), tag: tag.clone(), seed: ep_seed, route_seed, frames, targets });
        }
    }
    DemoDataset { clip, traces }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub steer: f64,
    pub throttle: f64,
}

/// Default steering weight. Curvature targets are a few thousandths of a
/// 1/m while throttle spans [-1, 1], so steering error is weighted up until
/// it dominates the objective.
pub const DEFAULT_STEER_WEIGHT: f64 = 1e6;

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { steer: DEFAULT_STEER_WEIGHT, throttle: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steer < 0.0 || self.throttle < 0.0 || (self.steer == 0.0 && self.throttle == 0.0) {
            return Err(TrainError::Config(format!("loss weights {self:?} must be non-negative and not both zero")));
        }
        Ok(())
    }
}

/// Weighted squared error for one sample; batch loss is the mean of these.
pub fn loss(pred: Controls, target: Controls, w: LossWeights) -> f64 {
    w.steer * (target.steer - pred.steer).powi(2) + w.throttle * (target.throttle - pred.throttle).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Optimizer steps between validation checks.
    pub validate_every: usize,
    /// Fit per-feature input standardization on the training split.
    pub normalize_inputs: bool,
    /// Standardize control targets so both outputs train at unit scale.
    #[serde(default = "default_true")]
    pub normalize_targets: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 200,
            early_stop_patience: 10,
            validation_fraction: 0.2,
            seed: 0,
            batch_size: 64,
            momentum: 0.9,
            validate_every: 200,
            normalize_inputs: true,
            normalize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::Config("early_stop_patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(TrainError::Config("batch_size and validate_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the config and loss weights.
    pub fn digest(&self, w: &LossWeights) -> String {
        let body = serde_json::json!({ "train": self, "loss_weights": w });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }
}

/// Split trace ids into (train, validation). Whole traces only. With a single
/// trace the same trace serves both roles.
pub fn split_traces(n_traces: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n_traces).collect();
    if n_traces < 2 {
        return (ids.clone(), ids);
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let n_val = ((n_traces as f64 * fraction).round() as usize).clamp(1, n_traces - 1);
    let mut val = ids[..n_val].to_vec();
    let mut train = ids[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub digest: String,
    pub seed: u64,
    pub train_traces: Vec<usize>,
    pub val_traces: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// (optimizer step, validation loss) at every check, including step 0.
    pub checks: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Plain-text manifest with the loss curve as CSV.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digest: {}", self.digest);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "train_traces: {:?}", self.train_traces);
        let _ = writeln!(s, "val_traces: {:?}", self.val_traces);
        let _ = writeln!(s, "best_step: {}", self.best_step);
        let _ = writeln!(s, "best_val_loss: {:.8}", self.best_val_loss);
        let _ = writeln!(s, "stopped_early: {}", self.stopped_early);
        let _ = writeln!(s, "epoch,train_loss,val_loss");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.8},{:.8}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub report: TrainReport,
}

struct Batch {
    inputs: Vec<Prepared>,
    targets: Vec<Controls>,
}

fn prepare_traces(policy: &Policy, data: &DemoDataset, ids: &[usize]) -> Batch {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for &id in ids {
        let tr = &data.traces[id];
        let feats: Vec<Vec<f64>> = tr
            .frames
            .iter()
            .map(|o| {
                let mut f = policy.frame_features(o);
                policy.normalizer.apply(&mut f);
                f
            })
            .collect();
        let pad = {
            let mut f = policy.frame_features(&Observation::zeros());
            policy.normalizer.apply(&mut f);
            f
        };
        for t in 0..tr.targets.len() {
            let frames: Vec<Vec<f64>> = (0..data.clip.frames)
                .rev()
                .map(|back| {
                    let off = back * data.clip.stride;
                    if off > t {
                        pad.clone()
                    } else {
                        feats[t - off].clone()
                    }
                })
                .collect();
            inputs.push(policy.arrange(frames));
            targets.push(tr.targets[t]);
        }
    }
    Batch { inputs, targets }
}

/// Mean weighted loss of `params` over a prepared set.
fn mean_loss(policy: &Policy, params: &[f64], set: &Batch, w: LossWeights) -> f64 {
    if set.inputs.is_empty() {
        return 0.0;
    }
    let total: f64 = set
        .inputs
        .iter()
        .zip(&set.targets)
        .map(|(x, t)| {
            let y = policy.forward(params, x);
            loss(Controls { steer: y[0], throttle: y[1] }, *t, w)
        })
        .sum();
    total / set.inputs.len() as f64
}

/// Mean weighted loss over the whole dataset for the policy as-is.
pub fn dataset_loss(policy: &Policy, data: &DemoDataset, w: LossWeights) -> f64 {
    let ids: Vec<usize> = (0..data.traces.len()).collect();
    mean_loss(policy, &policy.params, &prepare_traces(policy, data, &ids), w)
}

/// Loss and its gradient over a list of sample indices.
fn loss_and_grad(policy: &Policy, params: &[f64], set: &Batch, idx: &[usize], w: LossWeights, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = idx.len() as f64;
    let mut total = 0.0;
    for &i in idx {
        let x = &set.inputs[i];
        let t = set.targets[i];
        let y = policy.forward(params, x);
        let es = y[0] - t.steer;
        let et = y[1] - t.throttle;
        total += w.steer * es * es + w.throttle * et * et;
        policy.backward(params, x, [2.0 * w.steer * es / n, 2.0 * w.throttle * et / n], grad);
    }
    total / n
}

/// Fit `policy_init` to the demonstrations with SGD + momentum under a cosine
/// schedule, keeping the parameters with the lowest validation loss.
pub fn train(policy_init: &Policy, data: &DemoDataset, cfg: &TrainConfig, w: LossWeights) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    w.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if data.clip != policy_init.clip {
        return Err(TrainError::ClipMismatch { data: data.clip, policy: policy_init.clip });
    }
    let digest = cfg.digest(&w);
    let (train_ids, val_ids) = split_traces(data.trace_count(), cfg.validation_fraction, cfg.seed);

    let mut policy = policy_init.clone();
    if cfg.max_epochs == 0 {
        let report = TrainReport {
            digest,
            seed: cfg.seed,
            train_traces: train_ids,
            val_traces: val_ids,
            epochs: vec![],
            checks: vec![],
            best_step: 0,
            best_val_loss: f64::NAN,
            stopped_early: false,
        };
        return Ok(TrainOutcome { policy, report });
    }

    if cfg.normalize_inputs {
        let rows: Vec<Vec<f64>> = train_ids
            .iter()
            .flat_map(|&id| data.traces[id].frames.iter().map(|o| policy.frame_features(o)))
            .collect();
        policy.normalizer = Normalizer::fit(rows.iter().map(Vec::as_slice), policy.frame_dim(), NORMALIZER_FLOOR);
    }
    if cfg.normalize_targets {
        let targets: Vec<Controls> = train_ids.iter().flat_map(|&id| data.traces[id].targets.iter().copied()).collect();
        policy.target_scale = TargetScale::fit(&targets, TARGET_SCALE_FLOOR);
    }
    let train_set = prepare_traces(&policy, data, &train_ids);
    let val_set = prepare_traces(&policy, data, &val_ids);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train_set.inputs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.max_epochs) as f64;

    let mut params = policy.params.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..n).collect();

    let mut best_params = params.clone();
    let mut best_val = mean_loss(&policy, &params, &val_set, w);
    let mut best_step = 0;
    let mut checks = vec![(0usize, best_val)];
    let mut since_best = 0usize;
    let mut last_val = best_val;
    let mut epochs = Vec::new();
    let mut global_step = 0usize;
    let mut stopped_early = false;

    'outer: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = 0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * global_step as f64 / total_steps).cos());
            let l = loss_and_grad(&policy, &params, &train_set, chunk, w, &mut grad);
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, step: global_step, loss: l });
            }
            epoch_loss += l * chunk.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            global_step += 1;

            if global_step.is_multiple_of(cfg.validate_every) {
                let vl = mean_loss(&policy, &params, &val_set, w);
                if !vl.is_finite() {
                    return Err(TrainError::Diverged { epoch, step: global_step, loss: vl });
                }
                checks.push((global_step, vl));
                last_val = vl;
                if vl < best_val {
                    best_val = vl;
                    best_params.clone_from(&params);
                    best_step = global_step;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        epochs.push(EpochRecord { epoch, train_loss: epoch_loss / n as f64, val_loss: last_val });
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
        epochs.push(EpochRecord { epoch, train_loss: epoch_loss / n as f64, val_loss: last_val });
    }

    if !stopped_early && !global_step.is_multiple_of(cfg.validate_every) {
        let vl = mean_loss(&policy, &params, &val_set, w);
        checks.push((global_step, vl));
        if vl.is_finite() && vl < best_val {
            best_val = vl;
            best_params.clone_from(&params);
            best_step = global_step;
        }
    }

    policy.set_params(best_params)?;
    policy.train_digest = Some(digest.clone());
    let report = TrainReport {
        digest,
        seed: cfg.seed,
        train_traces: train_ids,
        val_traces: val_ids,
        epochs,
        checks,
        best_step,
        best_val_loss: best_val,
        stopped_early,
    };
    Ok(TrainOutcome { policy, report })
}

/// Worst relative error of one probe block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub probes: usize,
    pub max_rel_error: f64,
}

/// Compare analytic gradients with central finite differences of the batch
/// loss. Each probe draws a random parameter point near the policy's
/// parameters and a random coordinate inside the block.
pub fn gradient_check(policy: &Policy, data: &DemoDataset, w: LossWeights, probes_per_block: usize, seed: u64) -> Vec<BlockCheck> {
    let ids: Vec<usize> = (0..data.traces.len()).collect();
    let full = prepare_traces(policy, data, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick: Vec<usize> = (0..full.inputs.len().min(16)).map(|_| rng.random_range(0..full.inputs.len())).collect();
    let set = Batch { inputs: pick.iter().map(|&i| full.inputs[i].clone()).collect(), targets: pick.iter().map(|&i| full.targets[i]).collect() };
    let all: Vec<usize> = (0..set.inputs.len()).collect();
    let offsets = policy.block_offsets();
    let h = 1e-5;
    let mut grad = vec![0.0; policy.param_count()];
    policy
        .blocks
        .iter()
        .zip(&offsets)
        .map(|(block, &off)| {
            let mut worst: f64 = 0.0;
            for _ in 0..probes_per_block {
                let point: Vec<f64> = policy.params.iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
                let j = off + rng.random_range(0..block.len());
                loss_and_grad(policy, &point, &set, &all, w, &mut grad);
                let mut plus = point.clone();
                plus[j] += h;
                let mut minus = point.clone();
                minus[j] -= h;
                let numeric = (mean_loss(policy, &plus, &set, w) - mean_loss(policy, &minus, &set, w)) / (2.0 * h);
                let analytic = grad[j];
                let denom = analytic.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
            BlockCheck { block: block.name.clone(), probes: probes_per_block, max_rel_error: worst }
        })
        .collect()
}
