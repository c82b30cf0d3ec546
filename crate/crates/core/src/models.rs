//! The shared backbone encoder and the family of trajectory decoder heads.
//!
//! Every head consumes the same hidden vector and emits the same
//! [`PredictionSet`] shape (M modes with soft-max probabilities), so training
//! and evaluation are head-agnostic:
//!
//! - `um` regresses future positions directly; headings are interpolated.
//! - `um_velo` regresses per-step displacements, cumulatively summed.
//! - `um_heading` additionally predicts headings as normalized (sin, cos)
//!   pairs.
//! - `poly1`/`poly2`/`poly3` regress polynomial curve coefficients.
//! - `ctra` predicts one (acceleration, turn rate) pair per mode and rolls it
//!   out with the constant-turn-rate-and-acceleration model.
//! - `dkm` predicts per-step (acceleration, steering) controls, clips them to
//!   the actor's limits, and rolls them through the kinematic bicycle model,
//!   so its trajectories are kinematically feasible by construction. The
//!   whole decode sits on the autodiff tape, so training needs no
//!   ground-truth control labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamBinding, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{interpolate_headings, Trajectory};
use crate::kinematics::{ControlInput, KinematicParams, VehicleState};

/// Decoder head selector. The serialized names are the config-file contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Um,
    UmVelo,
    UmHeading,
    Poly1,
    Poly2,
    Poly3,
    Ctra,
    Dkm,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Um => "um",
            HeadKind::UmVelo => "um_velo",
            HeadKind::UmHeading => "um_heading",
            HeadKind::Poly1 => "poly1",
            HeadKind::Poly2 => "poly2",
            HeadKind::Poly3 => "poly3",
            HeadKind::Ctra => "ctra",
            HeadKind::Dkm => "dkm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "um" => Ok(HeadKind::Um),
            "um_velo" => Ok(HeadKind::UmVelo),
            "um_heading" => Ok(HeadKind::UmHeading),
            "poly1" => Ok(HeadKind::Poly1),
            "poly2" => Ok(HeadKind::Poly2),
            "poly3" => Ok(HeadKind::Poly3),
            "ctra" => Ok(HeadKind::Ctra),
            "dkm" => Ok(HeadKind::Dkm),
            other => Err(Error::InvalidParam(format!("unknown head {other:?}"))),
        }
    }

    fn poly_degree(&self) -> Option<usize> {
        match self {
            HeadKind::Poly1 => Some(1),
            HeadKind::Poly2 => Some(2),
            HeadKind::Poly3 => Some(3),
            _ => None,
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Control limits in config units (degrees for the steering angle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub a_max: f64,
    pub gamma_max_deg: f64,
    pub r_min: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { a_max: 8.0, gamma_max_deg: 45.0, r_min: 3.0 }
    }
}

fn default_horizon() -> usize {
    60
}
fn default_dt() -> f64 {
    0.1
}
fn default_modes() -> usize {
    3
}
fn default_history() -> usize {
    10
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_ctra_omega_max() -> f64 {
    // Keeps the implied CTRA turning radius at or above r_min for speeds of
    // at least 3.6 m/s.
    1.2
}

/// Model configuration; the JSON field names are the config-file contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    #[serde(rename = "H", default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(rename = "M", default = "default_modes")]
    pub modes: usize,
    #[serde(rename = "K", default = "default_history")]
    pub history: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub limits: Limits,
    /// Maximum turn-rate magnitude the ctra head may emit, rad/s.
    #[serde(default = "default_ctra_omega_max")]
    pub ctra_omega_max: f64,
    /// Replace the hard control clip with a tanh squashing of the same range.
    /// Off by default; the hard clip is the reference behavior.
    #[serde(default)]
    pub smooth_clamp: bool,
}

impl ModelConfig {
    pub fn new(head: HeadKind) -> Self {
        Self {
            head,
            horizon: default_horizon(),
            dt: default_dt(),
            modes: default_modes(),
            history: default_history(),
            hidden: default_hidden(),
            limits: Limits::default(),
            ctra_omega_max: default_ctra_omega_max(),
            smooth_clamp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.modes == 0 || self.history == 0 {
            return Err(Error::InvalidParam("H, M, K must all be >= 1".into()));
        }
        if self.dt.is_nan() || self.dt <= 0.0 {
            return Err(Error::InvalidParam(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParam("hidden layers must be non-empty and positive".into()));
        }
        if self.ctra_omega_max.is_nan() || self.ctra_omega_max <= 0.0 {
            return Err(Error::InvalidParam("ctra_omega_max must be > 0".into()));
        }
        self.default_kinematic_params().validate()
    }

    /// Kinematic parameters built from the configured limits and the default
    /// sedan wheelbase; per-sample parameters normally come with the data.
    pub fn default_kinematic_params(&self) -> KinematicParams {
        KinematicParams {
            l_r: 1.4,
            l_f: 1.4,
            a_max: self.limits.a_max,
            gamma_max: self.limits.gamma_max_deg.to_radians(),
            r_min: self.limits.r_min,
        }
    }

    pub fn feature_len(&self) -> usize {
        (self.history + 1) * 5 + 3
    }

    /// Width of the head's final linear layer.
    pub fn head_out_dim(&self) -> usize {
        let (h, m) = (self.horizon, self.modes);
        match self.head {
            HeadKind::Um | HeadKind::UmVelo | HeadKind::Dkm => 2 * h * m + m,
            HeadKind::UmHeading => 4 * h * m + m,
            HeadKind::Ctra => 2 * m + m,
            HeadKind::Poly1 | HeadKind::Poly2 | HeadKind::Poly3 => {
                let n = self.head.poly_degree().unwrap();
                2 * n * m + m
            }
        }
    }
}

/// Flattened encoding of the K+1 most recent actor-frame states plus the
/// current speed and the actor's axle distances.
///
/// Layout per step, oldest first: `x, y, sin(psi), cos(psi), v`; then
/// `v_current, l_r, l_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Encodes an actor-frame history into a [`FeatureVector`]. The final state
/// is the anchor and must sit at the frame origin.
pub fn encode(past: &[VehicleState], params: &KinematicParams) -> Result<FeatureVector> {
    if past.is_empty() {
        return Err(Error::LengthMismatch("history must contain at least one state".into()));
    }
    let mut data = Vec::with_capacity(past.len() * 5 + 3);
    for s in past {
        if !s.is_finite() {
            return Err(Error::NonFinite("history state"));
        }
        data.push(s.x);
        data.push(s.y);
        data.push(s.psi.sin());
        data.push(s.psi.cos());
        data.push(s.v);
    }
    data.push(past[past.len() - 1].v);
    data.push(params.l_r);
    data.push(params.l_f);
    Ok(FeatureVector(data))
}

/// Inverse of [`encode`] for headings in (-pi, pi]; recovers the input states
/// and the trailing scalars.
pub fn decode_features(f: &FeatureVector) -> Result<(Vec<VehicleState>, f64, f64, f64)> {
    if f.0.len() < 8 || !(f.0.len() - 3).is_multiple_of(5) {
        return Err(Error::LengthMismatch(format!("bad feature length {}", f.0.len())));
    }
    let steps = (f.0.len() - 3) / 5;
    let mut states = Vec::with_capacity(steps);
    for i in 0..steps {
        let b = i * 5;
        states.push(VehicleState {
            x: f.0[b],
            y: f.0[b + 1],
            psi: f.0[b + 2].atan2(f.0[b + 3]),
            v: f.0[b + 4],
        });
    }
    let tail = steps * 5;
    Ok((states, f.0[tail], f.0[tail + 1], f.0[tail + 2]))
}

/// One decoded trajectory with its probability; `controls` is present for
/// the dkm and ctra heads. For ctra the `steer` slot of each control carries
/// the predicted turn rate (rad/s) rather than a steering angle.
#[derive(Debug, Clone)]
pub struct ModePrediction {
    pub trajectory: Trajectory,
    pub probability: f64,
    pub controls: Option<Vec<ControlInput>>,
}

/// All modes of one decode.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub method: HeadKind,
    pub modes: Vec<ModePrediction>,
}

impl PredictionSet {
    /// Highest-probability mode; ties resolve to the lowest index.
    pub fn top_ranked(&self) -> &ModePrediction {
        let mut best = 0;
        for (i, m) in self.modes.iter().enumerate() {
            if m.probability > self.modes[best].probability {
                best = i;
            }
        }
        &self.modes[best]
    }
}

/// Per-vertex steering envelope of the dkm decoder.
///
/// The discrete turning radius at a rollout polyline vertex is at least
/// `(L1 + L2) / (4 sin(|delta| / 2))` with `delta` the change of segment
/// direction `dpsi_prev + (beta - beta_prev)` and `L1`, `L2` the adjacent
/// segment lengths. Bounding `|delta|` by `2 asin((L1 + L2) / (4 r_min m))`
/// with margin `m > 1` therefore keeps every vertex radius at or above
/// `r_min * m` no matter how rough the raw steering outputs are; without
/// it, per-step steering jitter from a mid-trained network zigzags the
/// polyline tightly enough to fail the radius check even though each
/// individual angle is within its limit. Vertices with a segment shorter
/// than [`EPS_STILL`] carry no turning evidence for the check and are
/// exempt, matching the checker.
///
/// The same envelope gates the scenario generator, so every generated
/// control sequence is exactly representable by the decoder.
#[derive(Debug, Clone)]
pub struct SteeringEnvelope {
    prev_v: f64,
    prev_beta: f64,
    prev_dpsi: f64,
    step: usize,
}

const ENVELOPE_MARGIN: f64 = 1.02;

impl SteeringEnvelope {
    pub fn new() -> Self {
        Self { prev_v: 0.0, prev_beta: 0.0, prev_dpsi: 0.0, step: 0 }
    }

    /// Allowed steering interval for the next step entering at speed `v`.
    pub fn bounds(&self, v: f64, kappa: &KinematicParams, dt: f64) -> (f64, f64) {
        let gamma_lim = kappa.steering_limit();
        if self.step == 0 {
            // No preceding future segment: only the static limit applies.
            return (-gamma_lim, gamma_lim);
        }
        let l1 = self.prev_v.max(0.0) * dt;
        let l2 = v.max(0.0) * dt;
        if l1.min(l2) < crate::geometry::EPS_STILL {
            return (-gamma_lim, gamma_lim);
        }
        let budget = 2.0 * ((l1 + l2) / (4.0 * kappa.r_min * ENVELOPE_MARGIN)).min(1.0).asin();
        let ratio = kappa.slip_ratio();
        let gamma_for_beta = |beta: f64| (beta.clamp(-1.2, 1.2).tan() / ratio).atan();
        let lo = gamma_for_beta(self.prev_beta - budget - self.prev_dpsi).max(-gamma_lim);
        let hi = gamma_for_beta(self.prev_beta + budget - self.prev_dpsi).min(gamma_lim);
        (lo.min(hi), hi.max(lo))
    }

    /// Records the steering actually taken at speed `v`.
    pub fn advance(&mut self, gamma: f64, v: f64, kappa: &KinematicParams, dt: f64) {
        let beta = kappa.slip_angle(gamma);
        self.prev_dpsi = v.max(0.0) / kappa.l_r * beta.sin() * dt;
        self.prev_beta = beta;
        self.prev_v = v;
        self.step += 1;
    }

    /// Whether a whole control sequence stays inside the envelope from the
    /// given initial speed.
    pub fn fits(controls: &[ControlInput], v0: f64, kappa: &KinematicParams, dt: f64) -> bool {
        let mut env = Self::new();
        let mut v = v0;
        for c in controls {
            let (lo, hi) = env.bounds(v, kappa, dt);
            if c.steer < lo - 1e-12 || c.steer > hi + 1e-12 {
                return false;
            }
            env.advance(c.steer, v, kappa, dt);
            v += c.accel * dt;
        }
        true
    }
}

impl Default for SteeringEnvelope {
    fn default() -> Self {
        Self::new()
    }
}

/// Rollout state handles of one decoded mode on the tape.
#[derive(Debug, Clone, Copy)]
pub struct RolloutVars {
    pub x: Var,
    pub y: Var,
    pub psi: Var,
    pub v: Var,
}

/// One mode of an on-tape decode.
#[derive(Debug, Clone)]
pub struct DecodedMode {
    /// Predicted positions, one (x, y) pair per horizon.
    pub positions: Vec<(Var, Var)>,
    /// Full rollout states for the dkm/ctra heads.
    pub states: Option<Vec<RolloutVars>>,
    /// Normalized (sin, cos) heading channel of the um_heading head.
    pub heading_sincos: Option<Vec<(Var, Var)>>,
    /// Clipped controls of the dkm head, or the (accel, turn-rate) pair of
    /// the ctra head repeated per step.
    pub controls: Option<Vec<(Var, Var)>>,
    /// The same controls before clipping. Supervised control-label terms
    /// train against these: their targets always lie inside the clamp
    /// ranges, so the gradient survives even while a clip saturates.
    pub raw_controls: Option<Vec<(Var, Var)>>,
}

/// On-tape decode of all modes plus the mode logits.
#[derive(Debug, Clone)]
pub struct DecodedPrediction {
    pub modes: Vec<DecodedMode>,
    pub logits: Vec<Var>,
}

/// A configured model: its parameters plus the layout of layer entries.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Initializes parameters: fully connected layers use uniform(-k, k) with
    /// k = 1/sqrt(fan_in); the final output layer is scaled by 0.01 with zero
    /// bias so initial decodes are near the trivial prediction (umـheading
    /// gets cos-slot biases of 1 so its heading channel starts at zero
    /// heading).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut in_dim = config.feature_len();
        for (l, &out_dim) in config.hidden.iter().enumerate() {
            let k = 1.0 / (in_dim as f64).sqrt();
            let w: Vec<f64> = (0..out_dim * in_dim).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * k).collect();
            params.add(&format!("backbone.{l}.w"), vec![out_dim, in_dim], w)?;
            params.add(&format!("backbone.{l}.b"), vec![out_dim], vec![0.0; out_dim])?;
            in_dim = out_dim;
        }
        let out_dim = config.head_out_dim();
        let k = 0.01 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * k).collect();
        params.add("head.w", vec![out_dim, in_dim], w)?;
        let mut b = vec![0.0; out_dim];
        if config.head == HeadKind::UmHeading {
            let (h, m) = (config.horizon, config.modes);
            for mode in 0..m {
                for step in 0..h {
                    b[mode * 4 * h + 2 * h + 2 * step + 1] = 1.0;
                }
            }
        }
        params.add("head.b", vec![out_dim], b)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from a config value and a checkpoint's parameters.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    /// Runs the decode for one actor and materializes the result.
    pub fn predict(&self, past: &[VehicleState], kappa: &KinematicParams) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, &self.params);
        let decoded = forward_on_tape(&mut tape, &binding, self, past, kappa)?;
        materialize(&tape, &self.config, &decoded)
    }
}

/// Multilayer fully connected network with relu activations.
pub fn backbone_forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    model: &Model,
    features: &[Var],
) -> Result<Vec<Var>> {
    if features.len() != model.config.feature_len() {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects {} features, got {}",
            model.config.feature_len(),
            features.len()
        )));
    }
    let mut input: Vec<Var> = features.to_vec();
    let mut pairs: Vec<(Var, Var)> = Vec::new();
    for l in 0..model.config.hidden.len() {
        let w_idx = model
            .params
            .index_of(&format!("backbone.{l}.w"))
            .ok_or_else(|| Error::InvalidParam(format!("missing backbone.{l}.w")))?;
        let b_idx = model.params.index_of(&format!("backbone.{l}.b")).unwrap();
        input = dense(tape, binding, &model.params, w_idx, b_idx, &input, true, &mut pairs);
    }
    Ok(input)
}

#[allow(clippy::too_many_arguments)]
fn dense(
    tape: &mut Tape,
    binding: &ParamBinding,
    store: &ParameterStore,
    w_idx: usize,
    b_idx: usize,
    input: &[Var],
    relu: bool,
    pairs: &mut Vec<(Var, Var)>,
) -> Vec<Var> {
    let shape = &store.entry(w_idx).shape;
    let (out_dim, in_dim) = (shape[0], shape[1]);
    debug_assert_eq!(in_dim, input.len());
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        pairs.clear();
        for (i, &x) in input.iter().enumerate() {
            pairs.push((binding.var(w_idx, o * in_dim + i), x));
        }
        let z = tape.dot(pairs);
        let b = binding.var(b_idx, o);
        let zb = tape.add(z, b);
        out.push(if relu { tape.relu(zb) } else { zb });
    }
    out
}

/// Full forward pass on the tape: encode, backbone, head decode.
///
/// `past` must be K+1 actor-frame states whose last element is the anchor
/// at the frame origin.
pub fn forward_on_tape(
    tape: &mut Tape,
    binding: &ParamBinding,
    model: &Model,
    past: &[VehicleState],
    kappa: &KinematicParams,
) -> Result<DecodedPrediction> {
    let cfg = &model.config;
    if past.len() != cfg.history + 1 {
        return Err(Error::LengthMismatch(format!(
            "expected {} past states, got {}",
            cfg.history + 1,
            past.len()
        )));
    }
    let anchor = past[past.len() - 1];
    if anchor.x.abs() > 1e-6 || anchor.y.abs() > 1e-6 || anchor.psi.abs() > 1e-6 {
        return Err(Error::InvalidParam(format!(
            "history is not in the actor frame: anchor at ({}, {}, psi={})",
            anchor.x, anchor.y, anchor.psi
        )));
    }
    kappa.validate()?;
    let features = encode(past, kappa)?;
    let fvars: Vec<Var> = features.0.iter().map(|&v| tape.leaf(v)).collect();
    let hidden = backbone_forward(tape, binding, model, &fvars)?;

    let w_idx = model.params.index_of("head.w").ok_or_else(|| Error::InvalidParam("missing head.w".into()))?;
    let b_idx = model.params.index_of("head.b").unwrap();
    let mut pairs = Vec::new();
    let raw = dense(tape, binding, &model.params, w_idx, b_idx, &hidden, false, &mut pairs);

    decode_raw(tape, cfg, &raw, anchor.v, kappa)
}

/// Splits the head's raw outputs into modes and runs the head-specific
/// decoding; `raw` layout is mode-major with the M logits last.
fn decode_raw(
    tape: &mut Tape,
    cfg: &ModelConfig,
    raw: &[Var],
    anchor_v: f64,
    kappa: &KinematicParams,
) -> Result<DecodedPrediction> {
    debug_assert_eq!(raw.len(), cfg.head_out_dim());
    let (h, m) = (cfg.horizon, cfg.modes);
    let logits = raw[raw.len() - m..].to_vec();
    let mut modes = Vec::with_capacity(m);
    for mode in 0..m {
        let decoded = match cfg.head {
            HeadKind::Um => decode_um(&raw[mode * 2 * h..(mode + 1) * 2 * h], h),
            HeadKind::UmVelo => decode_um_velo(tape, &raw[mode * 2 * h..(mode + 1) * 2 * h], h),
            HeadKind::UmHeading => {
                decode_um_heading(tape, &raw[mode * 4 * h..(mode + 1) * 4 * h], h)?
            }
            HeadKind::Poly1 | HeadKind::Poly2 | HeadKind::Poly3 => {
                let n = cfg.head.poly_degree().unwrap();
                decode_poly(tape, &raw[mode * 2 * n..(mode + 1) * 2 * n], n, h, cfg.dt)
            }
            HeadKind::Ctra => {
                decode_ctra(tape, &raw[mode * 2..mode * 2 + 2], h, cfg.dt, anchor_v, kappa, cfg)
            }
            HeadKind::Dkm => {
                decode_dkm(tape, &raw[mode * 2 * h..(mode + 1) * 2 * h], h, cfg.dt, anchor_v, kappa, cfg)?
            }
        };
        modes.push(decoded);
    }
    Ok(DecodedPrediction { modes, logits })
}

fn decode_um(raw: &[Var], h: usize) -> DecodedMode {
    let positions: Vec<(Var, Var)> = (0..h).map(|i| (raw[2 * i], raw[2 * i + 1])).collect();
    DecodedMode { positions, states: None, heading_sincos: None, controls: None, raw_controls: None }
}

fn decode_um_velo(tape: &mut Tape, raw: &[Var], h: usize) -> DecodedMode {
    let mut positions = Vec::with_capacity(h);
    let (mut x, mut y) = (raw[0], raw[1]);
    positions.push((x, y));
    for i in 1..h {
        x = tape.add(x, raw[2 * i]);
        y = tape.add(y, raw[2 * i + 1]);
        positions.push((x, y));
    }
    DecodedMode { positions, states: None, heading_sincos: None, controls: None, raw_controls: None }
}

fn decode_um_heading(tape: &mut Tape, raw: &[Var], h: usize) -> Result<DecodedMode> {
    let positions: Vec<(Var, Var)> = (0..h).map(|i| (raw[2 * i], raw[2 * i + 1])).collect();
    // Tiny floor keeps the norm positive without disturbing unit length.
    let floor = tape.constant(1e-24);
    let mut sincos = Vec::with_capacity(h);
    for i in 0..h {
        let s = raw[2 * h + 2 * i];
        let c = raw[2 * h + 2 * i + 1];
        let ss = tape.mul(s, s);
        let cc = tape.mul(c, c);
        let sum = tape.add(ss, cc);
        let sum = tape.add(sum, floor);
        let norm = tape.sqrt(sum)?;
        let sn = tape.div(s, norm)?;
        let cn = tape.div(c, norm)?;
        sincos.push((sn, cn));
    }
    Ok(DecodedMode { positions, states: None, heading_sincos: Some(sincos), controls: None, raw_controls: None })
}

fn decode_poly(tape: &mut Tape, raw: &[Var], n: usize, h: usize, dt: f64) -> DecodedMode {
    // raw = [q_1..q_n, r_1..r_n]; x(t) = sum_d q_d t^d with t = dt * (h + 1).
    // No constant term: the curve starts at the actor-frame origin.
    let mut positions = Vec::with_capacity(h);
    for step in 0..h {
        let t = dt * (step as f64 + 1.0);
        let mut x = None;
        let mut y = None;
        let mut power = t;
        for d in 0..n {
            let c = tape.constant(power);
            let qx = tape.mul(raw[d], c);
            let qy = tape.mul(raw[n + d], c);
            x = Some(match x {
                None => qx,
                Some(acc) => tape.add(acc, qx),
            });
            y = Some(match y {
                None => qy,
                Some(acc) => tape.add(acc, qy),
            });
            power *= t;
        }
        positions.push((x.unwrap(), y.unwrap()));
    }
    DecodedMode { positions, states: None, heading_sincos: None, controls: None, raw_controls: None }
}

fn decode_ctra(
    tape: &mut Tape,
    raw: &[Var],
    h: usize,
    dt: f64,
    anchor_v: f64,
    kappa: &KinematicParams,
    cfg: &ModelConfig,
) -> DecodedMode {
    let accel = squash_or_clamp(tape, raw[0], -kappa.a_max, kappa.a_max, cfg.smooth_clamp);
    let omega = squash_or_clamp(tape, raw[1], -cfg.ctra_omega_max, cfg.ctra_omega_max, cfg.smooth_clamp);
    let dt_c = tape.constant(dt);
    let mut x = tape.constant(0.0);
    let mut y = tape.constant(0.0);
    let mut psi = tape.constant(0.0);
    let mut v = tape.constant(anchor_v);
    let mut states = Vec::with_capacity(h);
    let mut positions = Vec::with_capacity(h);
    for _ in 0..h {
        // Mirrors kinematics::ctra_rollout operation for operation.
        let cos_psi = tape.cos(psi);
        let sin_psi = tape.sin(psi);
        let vx = tape.mul(v, cos_psi);
        let vy = tape.mul(v, sin_psi);
        let step_x = tape.mul(vx, dt_c);
        let step_y = tape.mul(vy, dt_c);
        x = tape.add(x, step_x);
        y = tape.add(y, step_y);
        let dpsi = tape.mul(omega, dt_c);
        psi = tape.add(psi, dpsi);
        let dv = tape.mul(accel, dt_c);
        v = tape.add(v, dv);
        states.push(RolloutVars { x, y, psi, v });
        positions.push((x, y));
    }
    let controls = vec![(accel, omega); h];
    let raw_controls = vec![(raw[0], raw[1]); h];
    DecodedMode { positions, states: Some(states), heading_sincos: None, controls: Some(controls), raw_controls: Some(raw_controls) }
}

#[allow(clippy::too_many_arguments)]
fn decode_dkm(
    tape: &mut Tape,
    raw: &[Var],
    h: usize,
    dt: f64,
    anchor_v: f64,
    kappa: &KinematicParams,
    cfg: &ModelConfig,
) -> Result<DecodedMode> {
    // Steering is clipped to the actor's limit (tightened so the implied
    // turning radius cannot undercut r_min even at full lock) and to the
    // per-vertex envelope that keeps the discrete polyline's turning radius
    // above r_min regardless of the raw outputs. Envelope bounds are plain
    // values; gradients keep the usual clamp convention.
    let gamma_lim = kappa.steering_limit();
    let ratio = tape.constant(kappa.slip_ratio());
    let l_r = tape.constant(kappa.l_r);
    let dt_c = tape.constant(dt);
    let mut x = tape.constant(0.0);
    let mut y = tape.constant(0.0);
    let mut psi = tape.constant(0.0);
    let mut v = tape.constant(anchor_v);
    let mut states = Vec::with_capacity(h);
    let mut positions = Vec::with_capacity(h);
    let mut controls = Vec::with_capacity(h);
    let mut raw_controls = Vec::with_capacity(h);
    let mut envelope = SteeringEnvelope::new();
    for step in 0..h {
        // Acceleration may not push the speed below zero: reversing out of a
        // forward rollout is a decoder-level policy choice, and it protects
        // the feasibility check from cusp artifacts near stops.
        let v_val = tape.value(v).max(0.0);
        let lo = (-kappa.a_max).max(-v_val / dt);
        let accel = if cfg.smooth_clamp {
            let sq = squash(tape, raw[2 * step], kappa.a_max);
            tape.clamp(sq, lo, kappa.a_max)
        } else {
            tape.clamp(raw[2 * step], lo, kappa.a_max)
        };

        let (g_lo, g_hi) = envelope.bounds(v_val, kappa, dt);
        let gamma = if cfg.smooth_clamp {
            let sq = squash(tape, raw[2 * step + 1], gamma_lim);
            tape.clamp(sq, g_lo, g_hi)
        } else {
            tape.clamp(raw[2 * step + 1], g_lo, g_hi)
        };
        envelope.advance(tape.value(gamma), v_val, kappa, dt);
        controls.push((accel, gamma));
        raw_controls.push((raw[2 * step], raw[2 * step + 1]));

        // Mirrors kinematics::bicycle_step operation for operation.
        let tan_g = tape.tan(gamma);
        let pre_beta = tape.mul(ratio, tan_g);
        let beta = tape.atan(pre_beta);
        let course = tape.add(psi, beta);
        let cos_c = tape.cos(course);
        let sin_c = tape.sin(course);
        let dx = tape.mul(v, cos_c);
        let dy = tape.mul(v, sin_c);
        let v_over_lr = tape.div(v, l_r)?;
        let sin_b = tape.sin(beta);
        let dpsi = tape.mul(v_over_lr, sin_b);
        let sx = tape.mul(dx, dt_c);
        let sy = tape.mul(dy, dt_c);
        let spsi = tape.mul(dpsi, dt_c);
        let sv = tape.mul(accel, dt_c);
        x = tape.add(x, sx);
        y = tape.add(y, sy);
        psi = tape.add(psi, spsi);
        v = tape.add(v, sv);
        states.push(RolloutVars { x, y, psi, v });
        positions.push((x, y));
    }
    Ok(DecodedMode { positions, states: Some(states), heading_sincos: None, controls: Some(controls), raw_controls: Some(raw_controls) })
}

fn squash(tape: &mut Tape, raw: Var, limit: f64) -> Var {
    let inv = tape.constant(1.0 / limit);
    let scaled = tape.mul(raw, inv);
    let t = tape.tanh(scaled);
    let lim = tape.constant(limit);
    tape.mul(lim, t)
}

fn squash_or_clamp(tape: &mut Tape, raw: Var, lo: f64, hi: f64, smooth: bool) -> Var {
    if smooth {
        debug_assert!((-lo - hi).abs() < 1e-12, "smooth squash expects a symmetric range");
        squash(tape, raw, hi)
    } else {
        tape.clamp(raw, lo, hi)
    }
}

/// Soft-max with max-shift for stability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Turns an on-tape decode into value-level trajectories.
///
/// Position-only heads get headings by interpolation and speeds by backward
/// differences against the anchor origin; the dkm/ctra heads report their
/// rollout headings and speeds directly, which is the point of constraining
/// the decoder.
pub fn materialize(tape: &Tape, cfg: &ModelConfig, decoded: &DecodedPrediction) -> Result<PredictionSet> {
    let logit_values: Vec<f64> = decoded.logits.iter().map(|&l| tape.value(l)).collect();
    let probs = softmax(&logit_values);
    let mut modes = Vec::with_capacity(decoded.modes.len());
    for (mode, &p) in decoded.modes.iter().zip(&probs) {
        let positions: Vec<(f64, f64)> =
            mode.positions.iter().map(|&(x, y)| (tape.value(x), tape.value(y))).collect();
        let points: Vec<VehicleState> = if let Some(states) = &mode.states {
            states
                .iter()
                .map(|s| VehicleState {
                    x: tape.value(s.x),
                    y: tape.value(s.y),
                    psi: tape.value(s.psi),
                    v: tape.value(s.v),
                })
                .collect()
        } else {
            let headings = match &mode.heading_sincos {
                Some(sincos) => sincos
                    .iter()
                    .map(|&(s, c)| tape.value(s).atan2(tape.value(c)))
                    .collect::<Vec<f64>>(),
                None => interpolate_headings(&positions, cfg.dt, 0.0),
            };
            let mut prev = (0.0, 0.0);
            positions
                .iter()
                .zip(&headings)
                .map(|(&(x, y), &psi)| {
                    let v = ((x - prev.0).powi(2) + (y - prev.1).powi(2)).sqrt() / cfg.dt;
                    prev = (x, y);
                    VehicleState { x, y, psi, v }
                })
                .collect()
        };
        let controls = mode.controls.as_ref().map(|cs| {
            cs.iter()
                .map(|&(a, g)| ControlInput { accel: tape.value(a), steer: tape.value(g) })
                .collect()
        });
        modes.push(ModePrediction {
            trajectory: Trajectory::new(cfg.dt, points)?,
            probability: p,
            controls,
        });
    }
    Ok(PredictionSet { method: cfg.head, modes })
}
