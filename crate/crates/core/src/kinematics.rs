//! Vehicle motion models.
//!
//! The core of the crate is the kinematic bicycle model: a two-axle,
//! no-slip vehicle whose state `(x, y, psi, v)` evolves under controls
//! `(accel, steer)`. This module provides the state derivatives, a single
//! explicit-Euler step, multi-step rollouts, and the two non-learned
//! propagation baselines built on the same integrator (constant turn rate
//! and acceleration, and constant controls).
//!
//! Everything here is a pure function over immutable values; all ops are
//! deterministic and safe to call concurrently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Motion state of one actor at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position, meters.
    pub x: f64,
    /// Position, meters.
    pub y: f64,
    /// Heading, radians. Stored unwrapped so multi-turn rollouts accumulate
    /// continuously; consumers wrap only for display or metrics.
    pub psi: f64,
    /// Speed, meters/second.
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self { x, y, psi, v }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite() && self.v.is_finite()
    }
}

/// Control input for one step: longitudinal acceleration and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Longitudinal acceleration, meters/second^2.
    pub accel: f64,
    /// Steering angle, radians.
    pub steer: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.steer.is_finite()
    }
}

/// Per-actor kinematic parameters: axle distances, control limits, and the
/// minimum feasible turning radius used by the feasibility check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    /// Center-to-rear-axle distance, meters.
    pub l_r: f64,
    /// Center-to-front-axle distance, meters.
    pub l_f: f64,
    /// Maximum absolute acceleration, meters/second^2.
    pub a_max: f64,
    /// Maximum absolute steering angle, radians.
    pub gamma_max: f64,
    /// Minimum feasible turning radius, meters.
    pub r_min: f64,
}

/// Default control limits of a midsize sedan: |a| <= 8 m/s^2, |steer| <= 45 deg,
/// minimum turning radius 3 m.
pub const DEFAULT_A_MAX: f64 = 8.0;
pub const DEFAULT_GAMMA_MAX: f64 = std::f64::consts::FRAC_PI_4;
pub const DEFAULT_R_MIN: f64 = 3.0;

impl KinematicParams {
    pub fn new(l_r: f64, l_f: f64, a_max: f64, gamma_max: f64, r_min: f64) -> Result<Self> {
        let p = Self { l_r, l_f, a_max, gamma_max, r_min };
        p.validate()?;
        Ok(p)
    }

    /// Midsize sedan defaults (2.8 m wheelbase split evenly).
    pub fn midsize_sedan() -> Self {
        Self {
            l_r: 1.4,
            l_f: 1.4,
            a_max: DEFAULT_A_MAX,
            gamma_max: DEFAULT_GAMMA_MAX,
            r_min: DEFAULT_R_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.l_r > 0.0
            && self.l_f > 0.0
            && self.a_max > 0.0
            && self.gamma_max > 0.0
            && self.gamma_max < std::f64::consts::FRAC_PI_2
            && self.r_min > 0.0
            && self.l_r.is_finite()
            && self.l_f.is_finite()
            && self.a_max.is_finite()
            && self.r_min.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("kinematic params out of range: {self:?}")))
        }
    }

    /// Ratio `l_r / (l_f + l_r)` relating steering angle to slip angle.
    pub fn slip_ratio(&self) -> f64 {
        self.l_r / (self.l_f + self.l_r)
    }

    /// Slip angle for a given steering angle.
    pub fn slip_angle(&self, steer: f64) -> f64 {
        (self.slip_ratio() * steer.tan()).atan()
    }

    /// Continuous-model turning radius at a given steering angle, `l_r / sin(beta)`.
    /// Infinite for zero steering.
    pub fn turning_radius(&self, steer: f64) -> f64 {
        let s = self.slip_angle(steer).sin().abs();
        if s == 0.0 {
            f64::INFINITY
        } else {
            self.l_r / s
        }
    }

    /// Largest steering magnitude that keeps the continuous-model turning
    /// radius at or above `r_min`, capped at `gamma_max`.
    ///
    /// For the default sedan this equals `gamma_max`; it only tightens when
    /// the wheelbase is short enough that full steering would undercut
    /// `r_min`. Constrained decoders clip steering to this value so their
    /// trajectories respect the same radius threshold the feasibility check
    /// applies.
    pub fn steering_limit(&self) -> f64 {
        let sin_beta = (self.l_r / self.r_min).min(1.0);
        let beta = sin_beta.asin();
        let gamma = (beta.tan() / self.slip_ratio()).atan();
        gamma.min(self.gamma_max)
    }
}

/// Time derivatives of the state under the bicycle model, plus the slip
/// angle they were computed with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
    pub dv: f64,
    /// Slip angle between the velocity vector and the heading, radians.
    pub beta: f64,
}

/// Bicycle-model state derivatives:
///
/// ```text
/// beta = atan(l_r / (l_f + l_r) * tan(steer))
/// dx   = v * cos(psi + beta)
/// dy   = v * sin(psi + beta)
/// dpsi = v / l_r * sin(beta)
/// dv   = accel
/// ```
pub fn bicycle_derivatives(
    state: &VehicleState,
    control: &ControlInput,
    params: &KinematicParams,
) -> Result<StateDerivative> {
    if !state.is_finite() {
        return Err(Error::NonFinite("vehicle state"));
    }
    if !control.is_finite() {
        return Err(Error::NonFinite("control input"));
    }
    params.validate()?;
    let beta = (params.slip_ratio() * control.steer.tan()).atan();
    let course = state.psi + beta;
    Ok(StateDerivative {
        dx: state.v * course.cos(),
        dy: state.v * course.sin(),
        dpsi: state.v / params.l_r * beta.sin(),
        dv: control.accel,
        beta,
    })
}

/// Explicit-Euler step: `s' = s + sdot * dt` with the derivatives evaluated
/// at the pre-step state.
pub fn bicycle_step(
    state: &VehicleState,
    control: &ControlInput,
    params: &KinematicParams,
    dt: f64,
) -> Result<VehicleState> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
    }
    let d = bicycle_derivatives(state, control, params)?;
    Ok(VehicleState {
        x: state.x + d.dx * dt,
        y: state.y + d.dy * dt,
        psi: state.psi + d.dpsi * dt,
        v: state.v + d.dv * dt,
    })
}

/// Multi-step rollout. Element `h` of the output is the state after `h + 1`
/// Euler steps; the initial state is not included.
pub fn rollout(
    initial: &VehicleState,
    controls: &[ControlInput],
    params: &KinematicParams,
    dt: f64,
) -> Result<Vec<VehicleState>> {
    if controls.is_empty() {
        return Err(Error::InvalidParam("rollout needs at least one control".into()));
    }
    let mut out = Vec::with_capacity(controls.len());
    let mut state = *initial;
    for c in controls {
        state = bicycle_step(&state, c, params, dt)?;
        out.push(state);
    }
    Ok(out)
}

/// Constant turning rate and acceleration propagation: Euler integration of
/// `dpsi = turn_rate`, `dv = accel`, `dx = v cos(psi)`, `dy = v sin(psi)`.
///
/// `v` is not clamped at zero here; it may pass through zero and go negative.
/// Any clamping is a decoder-level policy.
pub fn ctra_rollout(
    initial: &VehicleState,
    accel: f64,
    turn_rate: f64,
    horizon: usize,
    dt: f64,
) -> Result<Vec<VehicleState>> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidParam(format!("dt must be > 0, got {dt}")));
    }
    if horizon == 0 {
        return Err(Error::InvalidParam("ctra_rollout needs horizon >= 1".into()));
    }
    if !initial.is_finite() || !accel.is_finite() || !turn_rate.is_finite() {
        return Err(Error::NonFinite("ctra inputs"));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut s = *initial;
    for _ in 0..horizon {
        s = VehicleState {
            x: s.x + s.v * s.psi.cos() * dt,
            y: s.y + s.v * s.psi.sin() * dt,
            psi: s.psi + turn_rate * dt,
            v: s.v + accel * dt,
        };
        out.push(s);
    }
    Ok(out)
}

/// Propagates the state forward holding the given control fixed; equals
/// [`rollout`] with `initial_control` repeated `horizon` times.
pub fn constant_controls_propagate(
    initial: &VehicleState,
    initial_control: &ControlInput,
    params: &KinematicParams,
    horizon: usize,
    dt: f64,
) -> Result<Vec<VehicleState>> {
    if horizon == 0 {
        return Err(Error::InvalidParam("propagation needs horizon >= 1".into()));
    }
    let controls = vec![*initial_control; horizon];
    rollout(initial, &controls, params, dt)
}
