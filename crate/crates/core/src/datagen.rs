//! Synthetic scenario generation.
//!
//! The generator draws per-actor kinematic parameters and a control profile
//! for one of seven scenario kinds, rolls the profile through the bicycle
//! model, and splits the result into an actor-frame history and future. The
//! future states are exactly the rollout of the stored future controls, so
//! every sample is self-consistent and, because the profiles respect the
//! actor's steering and radius limits, kinematically feasible.
//!
//! Profiles are phase-locked to the history window (maneuvers begin at or
//! before the anchor and their parameters are visible in the past states),
//! so noiseless futures are predictable from the history alone. The
//! multimodal intersection kind is the deliberate exception: branches share
//! bit-identical pasts, which is what exercises multi-mode prediction.
//!
//! Per-sample RNG streams are derived from `(seed, index)`, so generation
//! order (or parallelism) cannot change the output.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_feasibility, to_actor_frame, Trajectory};
use crate::jsonio::{fmt_f64, json_escape};
use crate::kinematics::{rollout, ControlInput, KinematicParams, VehicleState};
use crate::models::SteeringEnvelope;

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kappa: KinematicParams,
    pub dt: f64,
    /// K+1 actor-frame states, oldest first; the last is the anchor (0,0,0,v).
    pub past: Vec<VehicleState>,
    /// H actor-frame future states.
    pub future: Vec<VehicleState>,
    /// The H controls whose rollout from the anchor reproduces `future`.
    pub future_controls: Vec<ControlInput>,
    pub scenario: String,
    /// Branch label for multimodal scenarios, empty otherwise.
    pub branch: String,
}

impl Sample {
    pub fn anchor(&self) -> &VehicleState {
        self.past.last().expect("past is non-empty")
    }

    pub fn future_trajectory(&self) -> Trajectory {
        Trajectory::new(self.dt, self.future.clone()).expect("future is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ConstantVelocity,
    Accelerate,
    BrakeToStop,
    ConstantTurn,
    RightTurn,
    SCurve,
    IntersectionMultimodal,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::ConstantVelocity => "constant_velocity",
            ScenarioKind::Accelerate => "accelerate",
            ScenarioKind::BrakeToStop => "brake_to_stop",
            ScenarioKind::ConstantTurn => "constant_turn",
            ScenarioKind::RightTurn => "right_turn",
            ScenarioKind::SCurve => "s_curve",
            ScenarioKind::IntersectionMultimodal => "intersection_multimodal",
        }
    }

    /// The non-multimodal kinds.
    pub fn unimodal() -> [ScenarioKind; 6] {
        [
            ScenarioKind::ConstantVelocity,
            ScenarioKind::Accelerate,
            ScenarioKind::BrakeToStop,
            ScenarioKind::ConstantTurn,
            ScenarioKind::RightTurn,
            ScenarioKind::SCurve,
        ]
    }
}

fn d_speed() -> (f64, f64) {
    (3.0, 12.0)
}
fn d_accel() -> (f64, f64) {
    (0.5, 3.0)
}
fn d_brake() -> (f64, f64) {
    (1.0, 4.0)
}
fn d_radius() -> (f64, f64) {
    (3.8, 12.0)
}
fn d_branch() -> (f64, f64, f64) {
    (0.5, 0.3, 0.2)
}
fn d_wheelbase() -> (f64, f64) {
    (2.5, 3.2)
}
fn d_group() -> usize {
    5
}
fn d_horizon() -> usize {
    60
}
fn d_history() -> usize {
    10
}
fn d_dt() -> f64 {
    0.1
}

/// Parameter ranges for one scenario kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    #[serde(default = "d_speed")]
    pub speed_range: (f64, f64),
    #[serde(default = "d_accel")]
    pub accel_range: (f64, f64),
    #[serde(default = "d_brake")]
    pub brake_range: (f64, f64),
    #[serde(default = "d_radius")]
    pub radius_range: (f64, f64),
    /// AR(1) control-noise scale on the acceleration channel, m/s^2.
    #[serde(default)]
    pub noise_sigma_accel: f64,
    /// AR(1) control-noise scale on the steering channel, rad.
    #[serde(default)]
    pub noise_sigma_steer: f64,
    #[serde(default = "d_branch")]
    pub branch_probs: (f64, f64, f64),
    #[serde(default = "d_wheelbase")]
    pub wheelbase_range: (f64, f64),
    /// Samples sharing one underlying past in the multimodal kind.
    #[serde(default = "d_group")]
    pub group_size: usize,
    #[serde(default = "d_horizon", rename = "H")]
    pub horizon: usize,
    #[serde(default = "d_history", rename = "K")]
    pub history: usize,
    #[serde(default = "d_dt")]
    pub dt: f64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        // The three turning kinds default to disjoint radius bands so the
        // curvature visible in the history identifies the maneuver; with
        // overlapping bands a mid-turn past cannot reveal whether the actor
        // will keep circling, straighten after 90 degrees, or swing back,
        // and the future becomes irreducibly ambiguous. Tight radii go to
        // the corner turn, mid radii to the lane change, and wide sweeping
        // arcs to the constant turn (whose speeds are capped so the heading
        // change stays under half a revolution within the window).
        let radius_range = match kind {
            ScenarioKind::RightTurn => (3.8, 5.5),
            ScenarioKind::SCurve => (6.0, 9.0),
            ScenarioKind::ConstantTurn => (10.0, 14.0),
            _ => d_radius(),
        };
        Self {
            kind,
            speed_range: d_speed(),
            accel_range: d_accel(),
            brake_range: d_brake(),
            radius_range,
            noise_sigma_accel: 0.0,
            noise_sigma_steer: 0.0,
            branch_probs: d_branch(),
            wheelbase_range: d_wheelbase(),
            group_size: d_group(),
            horizon: d_horizon(),
            history: d_history(),
            dt: d_dt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("speed_range", self.speed_range),
            ("accel_range", self.accel_range),
            ("brake_range", self.brake_range),
            ("radius_range", self.radius_range),
            ("wheelbase_range", self.wheelbase_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive and ordered, got ({lo}, {hi})")));
            }
        }
        if self.speed_range.0 < 0.5 {
            return Err(Error::InvalidParam("speeds below 0.5 m/s describe a non-moving actor".into()));
        }
        // Ground truth must itself be feasible: turn radii never undercut r_min.
        if self.radius_range.0 < crate::kinematics::DEFAULT_R_MIN {
            return Err(Error::InvalidParam(format!(
                "radius_range must stay at or above r_min = {}",
                crate::kinematics::DEFAULT_R_MIN
            )));
        }
        if self.noise_sigma_accel < 0.0 || self.noise_sigma_steer < 0.0 {
            return Err(Error::InvalidParam("noise sigmas must be >= 0".into()));
        }
        let (p0, p1, p2) = self.branch_probs;
        if p0 < 0.0 || p1 < 0.0 || p2 < 0.0 || ((p0 + p1 + p2) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!("branch_probs must be a distribution, got {:?}", self.branch_probs)));
        }
        if self.group_size == 0 || self.horizon == 0 || self.history == 0 || self.dt.is_nan() || self.dt <= 0.0 {
            return Err(Error::InvalidParam("group_size, H, K must be >= 1 and dt > 0".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent stream seed for `(seed, tag, index)`.
fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index)
}

fn uniform_in(rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal truncated at three sigma.
fn trunc_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

/// Steering angle whose continuous turning radius is `radius`.
fn steer_for_radius(kappa: &KinematicParams, radius: f64) -> f64 {
    let sin_beta = (kappa.l_r / radius).min(1.0);
    let beta = sin_beta.asin();
    (beta.tan() / kappa.slip_ratio()).atan()
}

struct Profile {
    v_start: f64,
    controls: Vec<ControlInput>,
    branch: String,
}

/// Steering angle that realizes turn rate `omega` at speed `v`.
fn steer_for_turn_rate(kappa: &KinematicParams, v: f64, omega: f64) -> f64 {
    let sin_beta = (omega * kappa.l_r / v).clamp(-1.0, 1.0);
    let beta = sin_beta.asin();
    (beta.tan() / kappa.slip_ratio()).atan()
}

/// Raised-cosine window: ramps 0 -> 1 over `tau`, holds for `plateau`,
/// ramps back. Its integral is `plateau + tau`.
fn turn_window(t: f64, tau: f64, plateau: f64) -> f64 {
    if t <= 0.0 || t >= 2.0 * tau + plateau {
        0.0
    } else if t < tau {
        0.5 * (1.0 - (std::f64::consts::PI * t / tau).cos())
    } else if t <= tau + plateau {
        1.0
    } else {
        let s = t - tau - plateau;
        0.5 * (1.0 + (std::f64::consts::PI * s / tau).cos())
    }
}

/// Constant-speed turn through `delta_psi` radians (signed) at plateau
/// radius `radius`, starting at the beginning of the sequence.
///
/// The turn rate follows a raised-cosine window, so every control is a
/// smooth function of `(v, radius, kappa)`. Discontinuous templates (state
/// machines switching at step boundaries) make the past-to-future map a
/// staircase in the scenario parameters, which caps how well any smooth
/// predictor can recover it.
fn smooth_turn_controls(
    kappa: &KinematicParams,
    v: f64,
    radius: f64,
    delta_psi: f64,
    tau: f64,
    steps: usize,
    dt: f64,
) -> Vec<ControlInput> {
    let omega_peak = v / radius;
    // Window integral must equal |delta_psi| / omega_peak; shrink the peak
    // rate (grow the radius) if the ramps alone would overshoot.
    let needed = delta_psi.abs() / omega_peak;
    let (omega_peak, plateau) =
        if needed >= tau { (omega_peak, needed - tau) } else { (delta_psi.abs() / tau, 0.0) };
    (0..steps)
        .map(|h| {
            let t = h as f64 * dt;
            let omega = delta_psi.signum() * omega_peak * turn_window(t, tau, plateau);
            ControlInput::new(0.0, steer_for_turn_rate(kappa, v, omega))
        })
        .collect()
}

/// Constant-speed S-shaped maneuver: one full sine period of turn rate, so
/// the heading swings to `theta` (signed) and returns to zero. Smooth in all
/// scenario parameters.
fn smooth_s_curve_controls(
    kappa: &KinematicParams,
    v: f64,
    radius: f64,
    theta: f64,
    steps: usize,
    dt: f64,
) -> Vec<ControlInput> {
    let omega_peak = v / radius;
    let period = std::f64::consts::PI * theta.abs() / omega_peak;
    (0..steps)
        .map(|h| {
            let t = h as f64 * dt;
            let omega = if t >= period {
                0.0
            } else {
                theta.signum() * omega_peak * (2.0 * std::f64::consts::PI * t / period).sin()
            };
            ControlInput::new(0.0, steer_for_turn_rate(kappa, v, omega))
        })
        .collect()
}

fn draw_kappa(rng: &mut ChaCha12Rng, spec: &ScenarioSpec) -> KinematicParams {
    let wb = uniform_in(rng, spec.wheelbase_range);
    KinematicParams {
        l_r: wb / 2.0,
        l_f: wb / 2.0,
        a_max: crate::kinematics::DEFAULT_A_MAX,
        gamma_max: crate::kinematics::DEFAULT_GAMMA_MAX,
        r_min: crate::kinematics::DEFAULT_R_MIN,
    }
}

fn unimodal_profile(
    kind: ScenarioKind,
    rng: &mut ChaCha12Rng,
    kappa: &KinematicParams,
    spec: &ScenarioSpec,
) -> Profile {
    let steps = spec.history + spec.horizon;
    let dt = spec.dt;
    let past_secs = spec.history as f64 * dt;
    match kind {
        ScenarioKind::ConstantVelocity => {
            let v = uniform_in(rng, spec.speed_range);
            Profile { v_start: v, controls: vec![ControlInput::new(0.0, 0.0); steps], branch: String::new() }
        }
        ScenarioKind::Accelerate => {
            let a = uniform_in(rng, spec.accel_range);
            let lo = spec.speed_range.0.max(a * past_secs + 0.5);
            let v_anchor = uniform_in(rng, (lo, spec.speed_range.1.max(lo)));
            Profile {
                v_start: v_anchor - a * past_secs,
                controls: vec![ControlInput::new(a, 0.0); steps],
                branch: String::new(),
            }
        }
        ScenarioKind::BrakeToStop => {
            let b = uniform_in(rng, spec.brake_range);
            // Anchor speed low enough that the stop lands inside the horizon.
            let max_anchor = (b * (spec.horizon as f64 * dt - 0.5)).min(spec.speed_range.1);
            let lo = 2.0f64.max(spec.speed_range.0).min(max_anchor);
            let v_anchor = uniform_in(rng, (lo, max_anchor.max(lo)));
            let v_start = v_anchor + b * past_secs;
            let mut controls = Vec::with_capacity(steps);
            let mut v = v_start;
            for _ in 0..steps {
                let a = if v > b * dt {
                    -b
                } else if v > 0.0 {
                    -v / dt // exact stop
                } else {
                    0.0
                };
                controls.push(ControlInput::new(a, 0.0));
                v += a * dt;
            }
            Profile { v_start, controls, branch: String::new() }
        }
        ScenarioKind::ConstantTurn => {
            // Sweeping arc: speed capped so the heading change over the full
            // window stays under half a revolution, keeping the endpoint an
            // injective function of the turn rate.
            let radius = uniform_in(rng, spec.radius_range);
            let window_secs = (spec.history + spec.horizon) as f64 * dt;
            let v_max_arc = std::f64::consts::PI / window_secs * radius;
            let lo = spec.speed_range.0.max(2.0);
            let v = uniform_in(rng, (lo, spec.speed_range.1.min(v_max_arc).max(lo)));
            let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let gamma = sign * steer_for_radius(kappa, radius);
            Profile { v_start: v, controls: vec![ControlInput::new(0.0, gamma); steps], branch: String::new() }
        }
        ScenarioKind::RightTurn => {
            // 90-degree corner turn beginning at the start of the history
            // window, so the maneuver's phase and radius are visible; speed
            // bounded by lateral comfort on the tight radius.
            let radius = uniform_in(rng, spec.radius_range);
            let lo = spec.speed_range.0.max(3.0);
            let v_comfort = (3.0 * radius).sqrt();
            let v = uniform_in(rng, (lo, spec.speed_range.1.min(v_comfort).max(lo)));
            let controls =
                smooth_turn_controls(kappa, v, radius, -std::f64::consts::FRAC_PI_2, 0.9, steps, dt);
            Profile { v_start: v, controls, branch: String::new() }
        }
        ScenarioKind::SCurve => {
            // Lane-change-like S: heading swings to +/- 45 degrees and back.
            // Speed is tied to the radius so the full S completes well before
            // the window ends (the straight tail anchors the exit line).
            let radius = uniform_in(rng, spec.radius_range);
            let window_secs = (spec.history + spec.horizon) as f64 * dt - 1.5;
            let v_min_fit = std::f64::consts::PI * std::f64::consts::PI / 4.0 * radius / window_secs;
            let lo = spec.speed_range.0.max(3.0).max(v_min_fit);
            let v = uniform_in(rng, (lo, spec.speed_range.1.clamp(lo, 8.0).max(lo)));
            let sign = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
            let controls =
                smooth_s_curve_controls(kappa, v, radius, sign * std::f64::consts::FRAC_PI_4, steps, dt);
            Profile { v_start: v, controls, branch: String::new() }
        }
        ScenarioKind::IntersectionMultimodal => unreachable!("handled by the grouped path"),
    }
}

/// Applies AR(1) noise to a control template, honoring the clamp limits and
/// never letting the speed go negative.
fn apply_noise(
    rng: &mut ChaCha12Rng,
    kappa: &KinematicParams,
    spec: &ScenarioSpec,
    v_start: f64,
    controls: &mut [ControlInput],
    skip: usize,
) {
    if spec.noise_sigma_accel == 0.0 && spec.noise_sigma_steer == 0.0 {
        return;
    }
    let phi = 0.9;
    let inc = (1.0f64 - phi * phi).sqrt();
    let gamma_lim = steer_for_radius(kappa, kappa.r_min * 1.1).min(kappa.gamma_max);
    let mut na = 0.0;
    let mut ng = 0.0;
    let mut v = v_start;
    for (i, c) in controls.iter_mut().enumerate() {
        na = phi * na + inc * spec.noise_sigma_accel * trunc_normal(rng);
        ng = phi * ng + inc * spec.noise_sigma_steer * trunc_normal(rng);
        if i >= skip {
            let stopped = c.accel == 0.0 && v <= 1e-9;
            if !stopped {
                let mut a = (c.accel + na).clamp(-kappa.a_max, kappa.a_max);
                if v + a * spec.dt < 0.0 {
                    a = -v / spec.dt;
                }
                c.accel = a;
                c.steer = (c.steer + ng).clamp(-gamma_lim, gamma_lim);
            }
        }
        v += c.accel * spec.dt;
    }
}

/// Rolls a profile out in the start frame and re-anchors it: states are
/// transformed into the anchor frame and the future is re-rolled from the
/// anchor so that `future == rollout(anchor, future_controls)` bit-exactly.
fn assemble(
    spec: &ScenarioSpec,
    kappa: &KinematicParams,
    profile: &Profile,
    id: String,
    scenario: &str,
) -> Result<Sample> {
    let init = VehicleState::new(0.0, 0.0, 0.0, profile.v_start);
    let world = rollout(&init, &profile.controls, kappa, spec.dt)?;
    let anchor = world[spec.history - 1];
    let mut past_world = Vec::with_capacity(spec.history + 1);
    past_world.push(init);
    past_world.extend_from_slice(&world[..spec.history]);
    let mut past = to_actor_frame(&past_world, &anchor)?;
    // Pin the anchor entry to exact zeros (the transform is exact up to
    // floating-point cancellation noise).
    let k = past.len() - 1;
    past[k] = VehicleState::new(0.0, 0.0, 0.0, anchor.v);
    let future_controls: Vec<ControlInput> = profile.controls[spec.history..].to_vec();
    let future = rollout(&past[k], &future_controls, kappa, spec.dt)?;
    Ok(Sample {
        id,
        kappa: *kappa,
        dt: spec.dt,
        past,
        future,
        future_controls,
        scenario: scenario.to_string(),
        branch: profile.branch.clone(),
    })
}

/// Multimodal branch templates: straight, right 90-degree turn, left
/// 90-degree turn, all beginning at the anchor. The turn radius is a fixed
/// function of approach speed so the future is determined by the branch.
fn branch_profile(
    kappa: &KinematicParams,
    spec: &ScenarioSpec,
    v: f64,
    branch: usize,
) -> (Vec<ControlInput>, &'static str) {
    let steps = spec.horizon;
    match branch {
        0 => (vec![ControlInput::new(0.0, 0.0); steps], "straight"),
        b => {
            let radius = (v * v / 2.5).clamp(spec.radius_range.0.max(6.0), spec.radius_range.1.max(6.5));
            let sign = if b == 1 { -1.0 } else { 1.0 };
            let controls = smooth_turn_controls(
                kappa,
                v,
                radius,
                sign * std::f64::consts::FRAC_PI_2,
                0.9,
                steps,
                spec.dt,
            );
            (controls, if b == 1 { "right" } else { "left" })
        }
    }
}

fn generate_multimodal(spec: &ScenarioSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let group = (i / spec.group_size) as u64;
        // Group stream: shared approach (speed, kappa, past noise).
        let mut grng = ChaCha12Rng::seed_from_u64(stream_seed(seed, 0x67_72_6f_75_70, group));
        let kappa = draw_kappa(&mut grng, spec);
        let v = uniform_in(&mut grng, (spec.speed_range.0.max(3.0), spec.speed_range.1.clamp(3.5, 9.0)));
        let mut past_controls = vec![ControlInput::new(0.0, 0.0); spec.history];
        apply_noise(&mut grng, &kappa, spec, v, &mut past_controls, 0);

        // Sample stream: branch draw and future noise.
        let mut srng = ChaCha12Rng::seed_from_u64(stream_seed(seed, 0x73_61_6d_70, i as u64));
        let u: f64 = srng.random();
        let branch = if u < spec.branch_probs.0 {
            0
        } else if u < spec.branch_probs.0 + spec.branch_probs.1 {
            1
        } else {
            2
        };
        let sample = (|| {
            for _attempt in 0..50 {
                let (mut future_controls, label) = branch_profile(&kappa, spec, v, branch);
                // Anchor speed: the past is straight at constant template
                // speed, so the anchor speed equals the past rollout's.
                let init = VehicleState::new(0.0, 0.0, 0.0, v);
                let past_world = rollout(&init, &past_controls, &kappa, spec.dt)?;
                let anchor_v = past_world[spec.history - 1].v;
                apply_noise(&mut srng, &kappa, spec, anchor_v, &mut future_controls, 0);
                let mut controls = past_controls.clone();
                controls.extend_from_slice(&future_controls);
                let profile = Profile { v_start: v, controls, branch: label.to_string() };
                let s = assemble(spec, &kappa, &profile, format!("intersection_multimodal-{i:06}"), spec.kind.name())?;
                if check_feasibility(&s.future_trajectory(), &kappa).feasible
                    && SteeringEnvelope::fits(&s.future_controls, s.anchor().v, &kappa, spec.dt)
                {
                    return Ok(s);
                }
            }
            Err(Error::InvalidParam("could not draw a feasible multimodal future in 50 attempts".into()))
        })()?;
        out.push(sample);
    }
    Ok(out)
}

/// Draws `count` samples of the spec's scenario kind.
pub fn generate(spec: &ScenarioSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if spec.kind == ScenarioKind::IntersectionMultimodal {
        return generate_multimodal(spec, count, seed);
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, 0x75_6e_69, i as u64));
        let sample = (|| {
            for _attempt in 0..50 {
                let kappa = draw_kappa(&mut rng, spec);
                let mut profile = unimodal_profile(spec.kind, &mut rng, &kappa, spec);
                apply_noise(&mut rng, &kappa, spec, profile.v_start, &mut profile.controls, 0);
                let s = assemble(
                    spec,
                    &kappa,
                    &profile,
                    format!("{}-{i:06}", spec.kind.name()),
                    spec.kind.name(),
                )?;
                if s.anchor().v >= 0.5
                    && check_feasibility(&s.future_trajectory(), &kappa).feasible
                    && SteeringEnvelope::fits(&s.future_controls, s.anchor().v, &kappa, spec.dt)
                {
                    return Ok(s);
                }
            }
            Err(Error::InvalidParam(format!(
                "could not draw a feasible {} sample in 50 attempts",
                spec.kind.name()
            )))
        })()?;
        out.push(sample);
    }
    Ok(out)
}

/// Draws a weighted mix; per-spec counts use largest-remainder rounding and
/// sample ids get a global index suffix.
pub fn generate_mix(specs: &[(ScenarioSpec, f64)], count: usize, seed: u64) -> Result<Vec<Sample>> {
    if specs.is_empty() {
        return Err(Error::InvalidParam("mix needs at least one scenario spec".into()));
    }
    let total_w: f64 = specs.iter().map(|(_, w)| w).sum();
    if total_w.is_nan() || total_w <= 0.0 {
        return Err(Error::InvalidParam("mix weights must sum to a positive value".into()));
    }
    let mut counts: Vec<usize> =
        specs.iter().map(|(_, w)| (count as f64 * w / total_w).floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> = specs
        .iter()
        .enumerate()
        .map(|(k, (_, w))| (count as f64 * w / total_w - counts[k] as f64, k))
        .collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let missing = count - counts.iter().sum::<usize>();
    for &(_, k) in rem.iter().take(missing) {
        counts[k] += 1;
    }
    let mut out = Vec::with_capacity(count);
    for (k, ((spec, _), n)) in specs.iter().zip(&counts).enumerate() {
        let part = generate(spec, *n, splitmix64(seed ^ (k as u64).wrapping_mul(0x9e37)))?;
        out.extend(part);
    }
    Ok(out)
}

fn state_row(s: &VehicleState) -> String {
    format!("[{},{},{},{}]", fmt_f64(s.x), fmt_f64(s.y), fmt_f64(s.psi), fmt_f64(s.v))
}

/// One JSONL line per sample; floats carry 17 significant digits so
/// `read(write(x)) == x` exactly.
pub fn dataset_to_string(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&format!(
            "{{\"id\":{},\"dt\":{},\"kappa\":{{\"l_r\":{},\"l_f\":{},\"a_max\":{},\"gamma_max\":{},\"r_min\":{}}},\"past\":[{}],\"future\":[{}],\"controls\":[{}],\"scenario\":{},\"branch\":{}}}\n",
            json_escape(&s.id),
            fmt_f64(s.dt),
            fmt_f64(s.kappa.l_r),
            fmt_f64(s.kappa.l_f),
            fmt_f64(s.kappa.a_max),
            fmt_f64(s.kappa.gamma_max),
            fmt_f64(s.kappa.r_min),
            s.past.iter().map(state_row).collect::<Vec<_>>().join(","),
            s.future.iter().map(state_row).collect::<Vec<_>>().join(","),
            s.future_controls
                .iter()
                .map(|c| format!("[{},{}]", fmt_f64(c.accel), fmt_f64(c.steer)))
                .collect::<Vec<_>>()
                .join(","),
            json_escape(&s.scenario),
            json_escape(&s.branch),
        ));
    }
    out
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(dataset_to_string(samples).as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
struct RawSample {
    id: String,
    dt: f64,
    kappa: KinematicParams,
    past: Vec<[f64; 4]>,
    future: Vec<[f64; 4]>,
    controls: Vec<[f64; 2]>,
    scenario: String,
    branch: String,
}

fn sample_from_raw(raw: RawSample, line: usize) -> Result<Sample> {
    let schema_err = |msg: String| Error::Schema { line, msg };
    if raw.past.is_empty() {
        return Err(schema_err("past must contain at least one state".into()));
    }
    if raw.future.len() != raw.controls.len() {
        return Err(schema_err(format!(
            "future has {} states but controls has {} entries",
            raw.future.len(),
            raw.controls.len()
        )));
    }
    if raw.dt.is_nan() || raw.dt <= 0.0 {
        return Err(schema_err(format!("dt must be > 0, got {}", raw.dt)));
    }
    raw.kappa.validate().map_err(|e| schema_err(e.to_string()))?;
    let to_state = |r: &[f64; 4]| VehicleState::new(r[0], r[1], r[2], r[3]);
    let sample = Sample {
        id: raw.id,
        kappa: raw.kappa,
        dt: raw.dt,
        past: raw.past.iter().map(to_state).collect(),
        future: raw.future.iter().map(to_state).collect(),
        future_controls: raw.controls.iter().map(|c| ControlInput::new(c[0], c[1])).collect(),
        scenario: raw.scenario,
        branch: raw.branch,
    };
    if sample.past.iter().chain(&sample.future).any(|s| !s.is_finite())
        || sample.future_controls.iter().any(|c| !c.is_finite())
    {
        return Err(schema_err("non-finite value in sample".into()));
    }
    Ok(sample)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line)
            .map_err(|e| Error::Schema { line: i + 1, msg: e.to_string() })?;
        out.push(sample_from_raw(raw, i + 1)?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 0usize;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line)
            .map_err(|e| Error::Schema { line: lineno, msg: e.to_string() })?;
        out.push(sample_from_raw(raw, lineno)?);
    }
    Ok(out)
}

fn past_key(s: &Sample) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    feed(s.kappa.l_r.to_bits());
    feed(s.kappa.l_f.to_bits());
    for p in &s.past {
        feed(p.x.to_bits());
        feed(p.y.to_bits());
        feed(p.psi.to_bits());
        feed(p.v.to_bits());
    }
    h
}

/// Deterministic shuffled 3:1:1 split. Samples sharing one underlying past
/// (multimodal branches) stay in the same part.
pub fn split(samples: &[Sample], seed: u64) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    // Group by identical past, first-appearance order.
    let mut group_order: Vec<u64> = Vec::new();
    let mut groups: std::collections::HashMap<u64, Vec<usize>> = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = past_key(s);
        groups.entry(key).or_insert_with(|| {
            group_order.push(key);
            Vec::new()
        });
        groups.get_mut(&key).unwrap().push(i);
    }
    let mut order: Vec<usize> = (0..group_order.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, 0x73_70_6c_69_74, 0));
    // Fisher-Yates for a deterministic shuffle.
    for i in (1..order.len()).rev() {
        let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let n = samples.len();
    let t_train = (3 * n) / 5;
    let t_val = n / 5;
    let t_test = n - t_train - t_val;
    let mut deficits = [t_train as i64, t_val as i64, t_test as i64];
    let mut assignment = vec![0usize; samples.len()];
    for &gi in &order {
        let members = &groups[&group_order[gi]];
        let part = (0..3).max_by_key(|&p| (deficits[p], std::cmp::Reverse(p))).unwrap();
        for &m in members {
            assignment[m] = part;
        }
        deficits[part] -= members.len() as i64;
    }
    let mut parts: [Vec<Sample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        parts[assignment[i]].push(s.clone());
    }
    let [train, val, test] = parts;
    (train, val, test)
}
