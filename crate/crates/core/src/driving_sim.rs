//! Desk-scale closed-loop lane-keeping simulator.
//!
//! The ego vehicle moves in a road-aligned frame: `u` is arc length along the
//! centerline, `d` the signed lateral offset (positive to the left) and `psi`
//! the heading error relative to the centerline tangent. Routes are
//! piecewise-constant curvature profiles with static obstacles. The
//! environment configuration never changes the physics of a route; it only
//! changes what the policy observes.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::factor_space::{Agent, EnvConfig, Scene, Season, TimeOfDay, Weather};

pub const RAY_COUNT: usize = 16;
pub const OBSTACLE_DIM: usize = 4;
pub const CLUTTER_DIM: usize = 8;
pub const OBS_DIM: usize = RAY_COUNT + OBSTACLE_DIM + CLUTTER_DIM + 1;

/// Control period of the closed loop, seconds.
pub const DT: f64 = 1.0 / 30.0;
/// Steps per evaluation episode.
pub const HORIZON: usize = 200;
pub const LANE_HALF_WIDTH: f64 = 2.0;
pub const V_MAX: f64 = 15.0;
pub const A_MAX: f64 = 4.0;
pub const STEER_MAX: f64 = 0.2;
pub const SEGMENT_LENGTH: f64 = 20.0;

/// Every invented constant of the simulator in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub route_length: f64,
    pub kappa_max: f64,
    pub rural_kappa_std: f64,
    /// Urban curvature std is this multiple of the rural one.
    pub urban_kappa_factor: f64,
    /// Rural gap between consecutive obstacles is uniform in this range, meters.
    pub rural_obstacle_gap: (f64, f64),
    /// Urban obstacle density is this multiple of the rural one.
    pub urban_density_factor: f64,
    pub first_obstacle_min: f64,
    pub obstacle_offset: f64,
    pub obstacle_jitter: f64,
    pub collision_longitudinal: f64,
    pub collision_lateral: f64,

    pub ray_lookahead: [f64; RAY_COUNT],
    /// Ray range scale: ray i is normalized by `half_width * (1 + s_i / ray_range_scale)`.
    pub ray_range_scale: f64,
    pub base_noise_std: f64,
    pub night_gain: f64,
    pub night_noise_std: f64,
    pub rain_noise_std: f64,
    pub snow_noise_std: f64,
    pub snow_gain: f64,
    pub season_bias_amplitude: f64,
    pub clutter_amplitude: f64,
    pub clutter_kappa_gain: f64,
    pub rural_clutter_std: f64,
    pub car_width_signature: f64,
    pub animal_width_signature: f64,
    pub animal_oscillation: f64,
    /// Obstacle proximity weight is 1 within `[-behind, near]` of the obstacle
    /// and ramps to 0 at `far` ahead.
    pub proximity_near: f64,
    pub proximity_far: f64,
    pub proximity_behind: f64,

    pub expert_k_d: f64,
    pub expert_k_psi: f64,
    pub expert_lookahead: f64,
    pub expert_v_ref: f64,
    pub expert_v_slow: f64,
    pub expert_slow_zone: f64,
    pub expert_avoid_offset: f64,
    pub expert_k_v: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        let mut ray_lookahead = [0.0; RAY_COUNT];
        for (i, s) in ray_lookahead.iter_mut().enumerate() {
            *s = 2.0 * (i as f64 + 1.0);
        }
        SimParams {
            route_length: 140.0,
            kappa_max: 0.02,
            rural_kappa_std: 0.003,
            urban_kappa_factor: 2.0,
            rural_obstacle_gap: (40.0, 80.0),
            urban_density_factor: 2.0,
            first_obstacle_min: 30.0,
            obstacle_offset: 0.5,
            obstacle_jitter: 2.0,
            collision_longitudinal: 2.0,
            collision_lateral: 1.0,

            ray_lookahead,
            ray_range_scale: 8.0,
            base_noise_std: 0.02,
            night_gain: 0.35,
            night_noise_std: 0.15,
            rain_noise_std: 0.05,
            snow_noise_std: 0.12,
            snow_gain: 0.6,
            season_bias_amplitude: 0.1,
            clutter_amplitude: 0.4,
            clutter_kappa_gain: 20.0,
            rural_clutter_std: 0.01,
            car_width_signature: 1.0,
            animal_width_signature: 0.45,
            animal_oscillation: 0.3,
            proximity_near: 20.0,
            proximity_far: 35.0,
            proximity_behind: 4.0,

            expert_k_d: 0.05,
            expert_k_psi: 0.5,
            expert_lookahead: 8.0,
            expert_v_ref: 10.0,
            expert_v_slow: 4.0,
            expert_slow_zone: 15.0,
            expert_avoid_offset: 1.2,
            expert_k_v: 0.5,
        }
    }
}

impl SimParams {
    /// Additive observation noise std for a configuration.
    pub fn noise_std(&self, config: &EnvConfig) -> f64 {
        let mut sigma = self.base_noise_std;
        if config.time == TimeOfDay::Night {
            sigma += self.night_noise_std;
        }
        match config.weather {
            Weather::Dry => {}
            Weather::Rain => sigma += self.rain_noise_std,
            Weather::Snow => sigma += self.snow_noise_std,
        }
        sigma
    }

    /// Multiplicative gain applied to the boundary rays.
    pub fn ray_gain(&self, config: &EnvConfig) -> f64 {
        let mut g = 1.0;
        if config.time == TimeOfDay::Night {
            g *= self.night_gain;
        }
        if config.weather == Weather::Snow {
            g *= self.snow_gain;
        }
        g
    }

    /// Fixed per-season ray bias. Patterns are rows of a 16x16 Sylvester
    /// Hadamard matrix, hence mutually orthogonal.
    pub fn season_bias(&self, season: Season) -> [f64; RAY_COUNT] {
        let row = season.index() + 1;
        let mut out = [0.0; RAY_COUNT];
        for (col, v) in out.iter_mut().enumerate() {
            let sign = if (row & col).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            *v = sign * self.season_bias_amplitude;
        }
        out
    }

    pub fn kappa_std(&self, scene: Scene) -> f64 {
        match scene {
            Scene::Rural => self.rural_kappa_std,
            Scene::Urban => self.rural_kappa_std * self.urban_kappa_factor,
        }
    }

    fn obstacle_gap(&self, scene: Scene) -> (f64, f64) {
        let (lo, hi) = self.rural_obstacle_gap;
        match scene {
            Scene::Rural => (lo, hi),
            Scene::Urban => (lo / self.urban_density_factor, hi / self.urban_density_factor),
        }
    }

    /// Obstacle proximity weight as a function of `gap = u_obs - u`.
    pub fn proximity(&self, gap: f64) -> f64 {
        if gap < -self.proximity_behind || gap > self.proximity_far {
            0.0
        } else if gap <= self.proximity_near {
            1.0
        } else {
            (self.proximity_far - gap) / (self.proximity_far - self.proximity_near)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub u: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub seed: u64,
    pub scene: Scene,
    pub length: f64,
    /// Curvature of each 20 m segment, 1/m.
    pub curvature: Vec<f64>,
    pub lane_half_width: f64,
    pub obstacles: Vec<Obstacle>,
}

impl Route {
    /// Curvature at arc length `u`; the end segments extend beyond the route.
    pub fn kappa(&self, u: f64) -> f64 {
        let idx = (u / SEGMENT_LENGTH).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(self.curvature.len() - 1) };
        self.curvature[idx]
    }

    /// Integral of `(s - x) * kappa(u + x)` for x in [0, s]: lateral
    /// displacement of the centerline over a straight tangent at distance `s`.
    pub fn bend(&self, u: f64, s: f64) -> f64 {
        let mut acc = 0.0;
        let mut x = 0.0;
        while x < s {
            let at = u + x;
            let seg_end = ((at / SEGMENT_LENGTH).floor() + 1.0) * SEGMENT_LENGTH - u;
            let next = seg_end.min(s).max(x + 1e-9);
            let k = self.kappa(at + 1e-9);
            // closed form of the integral of (s - t) over [x, next]
            acc += k * ((s - x).powi(2) - (s - next).powi(2)) / 2.0;
            x = next;
        }
        acc
    }

    /// Nearest obstacle not yet passed by more than `behind` meters.
    pub fn next_obstacle(&self, u: f64, behind: f64) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| o.u - u >= -behind)
    }
}

/// Deterministic route for `(seed, scene)`.
pub fn generate_route(seed: u64, scene: Scene, params: &SimParams) -> Route {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_seg = (params.route_length / SEGMENT_LENGTH).ceil() as usize;
    let normal = Normal::new(0.0, params.kappa_std(scene)).expect("finite std");
    // The first segment is straight so every episode starts settled.
    let curvature = (0..n_seg)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                normal.sample(&mut rng).clamp(-params.kappa_max, params.kappa_max)
            }
        })
        .collect();
    let (lo, hi) = params.obstacle_gap(scene);
    let gap = Uniform::new(lo, hi).expect("valid gap range");
    let mut obstacles = Vec::new();
    let jitter = Uniform::new_inclusive(-params.obstacle_jitter, params.obstacle_jitter).expect("valid jitter");
    // Obstacles sit near segment midpoints, away from curvature steps.
    let mut u = params.first_obstacle_min + rng.random::<f64>() * (hi - lo);
    while u < params.route_length {
        let mid = (u / SEGMENT_LENGTH).floor() * SEGMENT_LENGTH + SEGMENT_LENGTH / 2.0;
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        obstacles.push(Obstacle { u: mid + jitter.sample(&mut rng), d: side * params.obstacle_offset });
        u = mid + gap.sample(&mut rng);
    }
    Route { seed, scene, length: params.route_length, curvature, lane_half_width: LANE_HALF_WIDTH, obstacles }
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub u: f64,
    pub d: f64,
    pub psi: f64,
    pub v: f64,
    pub step_index: usize,
    pub terminated: bool,
    rng: ChaCha8Rng,
}

impl EpisodeState {
    pub fn new(seed: u64, v0: f64) -> Self {
        EpisodeState { u: 0.0, d: 0.0, psi: 0.0, v: v0, step_index: 0, terminated: false, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn with_pose(seed: u64, u: f64, d: f64, psi: f64, v: f64) -> Self {
        EpisodeState { u, d, psi, v, ..Self::new(seed, v) }
    }

    /// Position of the noise stream, for replay checks.
    pub fn rng_word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rays: [f64; RAY_COUNT],
    pub obstacle: [f64; OBSTACLE_DIM],
    pub clutter: [f64; CLUTTER_DIM],
    pub speed_norm: f64,
}

impl Observation {
    pub fn zeros() -> Self {
        Observation { rays: [0.0; RAY_COUNT], obstacle: [0.0; OBSTACLE_DIM], clutter: [0.0; CLUTTER_DIM], speed_norm: 0.0 }
    }

    /// Flat 29-vector: rays, obstacle, clutter, speed.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        self.write_into(&mut v);
        v
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.rays);
        out.extend_from_slice(&self.obstacle);
        out.extend_from_slice(&self.clutter);
        out.push(self.speed_norm);
    }

    pub fn ray_energy(&self) -> f64 {
        self.rays.iter().map(|r| r * r).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    /// Commanded path curvature, 1/m.
    pub steer: f64,
    pub throttle: f64,
}

impl Controls {
    pub const ZERO: Controls = Controls { steer: 0.0, throttle: 0.0 };

    /// Clip into the admissible control box. Non-finite values map to zero.
    pub fn clipped(steer: f64, throttle: f64) -> Self {
        let fix = |x: f64| if x.is_finite() { x } else { 0.0 };
        Controls { steer: fix(steer).clamp(-STEER_MAX, STEER_MAX), throttle: fix(throttle).clamp(-1.0, 1.0) }
    }

    pub fn is_admissible(&self) -> bool {
        self.steer.abs() <= STEER_MAX && self.throttle.abs() <= 1.0
    }
}

/// Terminal events raised by a single step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub collision: bool,
    pub out_of_lane: bool,
    pub off_road: bool,
    pub stability: bool,
}

impl Events {
    pub fn any(&self) -> bool {
        self.collision || self.out_of_lane || self.off_road || self.stability
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.collision {
            v.push("collision");
        }
        if self.out_of_lane {
            v.push("out_of_lane");
        }
        if self.off_road {
            v.push("off_road");
        }
        if self.stability {
            v.push("stability");
        }
        v
    }
}

/// Advance one control period.
///
/// # Panics
/// If `state` is already terminated.
pub fn step(state: &mut EpisodeState, route: &Route, controls: Controls, dt: f64, params: &SimParams) -> Events {
    assert!(!state.terminated, "step called on a terminated episode");
    let c = Controls::clipped(controls.steer, controls.throttle);
    state.v = (state.v + c.throttle * A_MAX * dt).clamp(0.0, V_MAX);
    state.psi += state.v * (c.steer - route.kappa(state.u)) * dt;
    state.d += state.v * state.psi.sin() * dt;
    state.u += state.v * state.psi.cos() * dt;
    state.step_index += 1;

    let hw = route.lane_half_width;
    let events = Events {
        collision: route.obstacles.iter().any(|o| {
            (state.u - o.u).abs() < params.collision_longitudinal && (state.d - o.d).abs() < params.collision_lateral
        }),
        out_of_lane: state.d.abs() > hw,
        off_road: state.d.abs() > 2.0 * hw,
        stability: state.psi.abs() > FRAC_PI_2,
    };
    if events.any() {
        state.terminated = true;
    }
    events
}

/// Render the observation for `config`. Draws noise from the episode stream.
pub fn observe(state: &mut EpisodeState, route: &Route, config: &EnvConfig, params: &SimParams) -> Observation {
    let hw = route.lane_half_width;
    let gain = params.ray_gain(config);
    let sigma = params.noise_std(config);
    let bias = params.season_bias(config.season);
    let noise = Normal::new(0.0, sigma).expect("finite std");

    let mut rays = [0.0; RAY_COUNT];
    for (i, r) in rays.iter_mut().enumerate() {
        let s = params.ray_lookahead[i];
        let lateral = -state.d - s * state.psi.sin() + route.bend(state.u, s);
        let clean = lateral / (hw * (1.0 + s / params.ray_range_scale));
        *r = gain * clean + bias[i] + noise.sample(&mut state.rng);
    }

    let mut obstacle = [0.0; OBSTACLE_DIM];
    if let Some(o) = route.next_obstacle(state.u, params.proximity_behind) {
        let w = params.proximity(o.u - state.u);
        if w > 0.0 {
            obstacle[0] = w;
            obstacle[1] = w * o.d / hw;
            let (width, osc) = match config.agent {
                Agent::Car => (params.car_width_signature, 0.0),
                Agent::Animal => {
                    let phase = 2.0 * PI * state.step_index as f64 / 15.0;
                    (params.animal_width_signature, params.animal_oscillation * phase.sin())
                }
            };
            obstacle[2] = w * width;
            obstacle[3] = w * osc;
        }
    }

    let mut clutter = [0.0; CLUTTER_DIM];
    match config.scene {
        Scene::Urban => {
            for (i, c) in clutter.iter_mut().enumerate() {
                let k = route.kappa(state.u + 4.0 * i as f64);
                *c = params.clutter_amplitude * (0.3 * state.u + i as f64).sin() + params.clutter_kappa_gain * k;
            }
        }
        Scene::Rural => {
            let n = Normal::new(0.0, params.rural_clutter_std).expect("finite std");
            for c in clutter.iter_mut() {
                *c = n.sample(&mut state.rng);
            }
        }
    }

    Observation { rays, obstacle, clutter, speed_norm: state.v / V_MAX }
}

/// Privileged demonstrator: curvature feed-forward with lateral and heading
/// feedback, slowing down and sidestepping around obstacles.
pub fn expert_controls(state: &EpisodeState, route: &Route, params: &SimParams) -> Controls {
    let mut target_d = 0.0;
    let mut v_ref = params.expert_v_ref;
    if let Some(o) = route.next_obstacle(state.u, params.proximity_behind) {
        let gap = o.u - state.u;
        let w = params.proximity(gap);
        let side = o.d.signum();
        target_d = w * (o.d - side * params.expert_avoid_offset);
        if gap >= -params.collision_longitudinal && gap <= params.expert_slow_zone {
            v_ref = params.expert_v_slow;
        }
    }
    let steer = route.kappa(state.u + params.expert_lookahead)
        - params.expert_k_d * (state.d - target_d)
        - params.expert_k_psi * state.psi;
    let throttle = params.expert_k_v * (v_ref - state.v);
    Controls::clipped(steer, throttle)
}
