//! Winner-takes-all multimodal training.
//!
//! The per-horizon loss is the Euclidean distance between predicted and
//! observed positions, aggregated over the horizon (mean by default, sum via
//! config). Of the M modes, the one closest to the ground truth wins; the
//! total loss is the winner's displacement plus `alpha` times the soft-max
//! cross-entropy of its probability. Gradients reach the winning mode's
//! trajectory outputs and, through the soft-max, every mode's logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, ParamBinding, Tape, Var, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricReport};
use crate::geometry::Trajectory;
use crate::kinematics::ControlInput;
use crate::models::{forward_on_tape, DecodedPrediction, HeadKind, Model, ModelConfig, PredictionSet};

/// How per-horizon distances reduce to one displacement number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    #[default]
    Mean,
    Sum,
}

/// Weights of the optional supervised terms on speed, heading, acceleration,
/// and steering. All zero by default: the multimodal loss needs no control
/// labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ExtraLossWeights {
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub heading: f64,
    #[serde(default)]
    pub accel: f64,
    #[serde(default)]
    pub steer: f64,
}

impl ExtraLossWeights {
    pub fn any(&self) -> bool {
        self.speed != 0.0 || self.heading != 0.0 || self.accel != 0.0 || self.steer != 0.0
    }
}

fn d_lr0() -> f64 {
    1e-4
}
fn d_decay() -> f64 {
    0.9
}
fn d_decay_every() -> usize {
    20_000
}
fn d_max_iters() -> usize {
    20_000
}
fn d_batch() -> usize {
    64
}
fn d_alpha() -> f64 {
    1.0
}
fn d_val_every() -> usize {
    1_000
}

/// Optimization settings. Defaults: Adam at lr 1e-4 decayed by 0.9 every
/// 20,000 iterations, batch size 64, alpha = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_val_every")]
    pub val_every: usize,
    #[serde(default)]
    pub aggregation: LossAggregation,
    #[serde(default)]
    pub extra: ExtraLossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: d_lr0(),
            lr_decay: d_decay(),
            lr_decay_every: d_decay_every(),
            max_iters: d_max_iters(),
            batch_size: d_batch(),
            alpha: d_alpha(),
            seed: 0,
            val_every: d_val_every(),
            aggregation: LossAggregation::default(),
            extra: ExtraLossWeights::default(),
        }
    }
}

/// Step-decayed learning rate: `lr0 * decay^floor(iter / every)`.
pub fn learning_rate(lr0: f64, decay: f64, every: usize, iter: usize) -> f64 {
    lr0 * decay.powi((iter / every) as i32)
}

/// The pieces of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Winning mode's displacement term.
    pub displacement: f64,
    /// `-log p` of the winning mode.
    pub mode_xent: f64,
    pub winning_mode_index: usize,
    /// Heading term of the um_heading head (weight 1), when present.
    pub heading_term: Option<f64>,
    /// Supervised extra terms, when enabled.
    pub extra_term: Option<f64>,
}

/// Aggregated Euclidean position error between two equal-length
/// trajectories (mean over horizons).
pub fn displacement_loss(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    displacement_loss_with(pred, truth, LossAggregation::Mean)
}

pub fn displacement_loss_with(
    pred: &Trajectory,
    truth: &Trajectory,
    agg: LossAggregation,
) -> Result<f64> {
    if pred.points.len() != truth.points.len() {
        return Err(Error::LengthMismatch(format!(
            "trajectory lengths differ: {} vs {}",
            pred.points.len(),
            truth.points.len()
        )));
    }
    let sum: f64 = pred
        .points
        .iter()
        .zip(&truth.points)
        .map(|(p, t)| ((p.x - t.x).powi(2) + (p.y - t.y).powi(2)).sqrt())
        .sum();
    Ok(match agg {
        LossAggregation::Mean => sum / pred.points.len() as f64,
        LossAggregation::Sum => sum,
    })
}

fn winning_mode(displacements: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in displacements.iter().enumerate() {
        if d < displacements[best] {
            best = i;
        }
    }
    best
}

/// Value-level winner-takes-all loss over a materialized prediction.
/// Ties break to the lowest mode index.
pub fn multimodal_loss(preds: &PredictionSet, truth: &Trajectory, alpha: f64) -> Result<LossBreakdown> {
    multimodal_loss_with(preds, truth, alpha, LossAggregation::Mean)
}

pub fn multimodal_loss_with(
    preds: &PredictionSet,
    truth: &Trajectory,
    alpha: f64,
    agg: LossAggregation,
) -> Result<LossBreakdown> {
    if preds.modes.is_empty() {
        return Err(Error::InvalidParam("need at least one mode".into()));
    }
    let disps = preds
        .modes
        .iter()
        .map(|m| displacement_loss_with(&m.trajectory, truth, agg))
        .collect::<Result<Vec<f64>>>()?;
    let winner = winning_mode(&disps);
    let xent = -preds.modes[winner].probability.ln();
    let heading_term = (preds.method == HeadKind::UmHeading).then(|| {
        let pts = &preds.modes[winner].trajectory.points;
        pts.iter().zip(&truth.points).map(|(p, t)| 1.0 - (p.psi - t.psi).cos()).sum::<f64>()
            / pts.len() as f64
    });
    let total = disps[winner] + alpha * xent + heading_term.unwrap_or(0.0);
    Ok(LossBreakdown {
        total,
        displacement: disps[winner],
        mode_xent: xent,
        winning_mode_index: winner,
        heading_term,
        extra_term: None,
    })
}

/// Optional supervised terms computed on the winning mode: mean |v - v*|,
/// mean (1 - cos(psi - psi*)), mean |a - a*|, mean |gamma - gamma*|, each
/// scaled by its weight. Control terms need the mode to carry controls.
pub fn supervised_extra_losses(
    preds: &PredictionSet,
    truth_states: &[crate::kinematics::VehicleState],
    truth_controls: &[ControlInput],
    weights: &ExtraLossWeights,
) -> Result<f64> {
    if !weights.any() {
        return Ok(0.0);
    }
    let truth_traj = Trajectory::new(preds.modes[0].trajectory.dt, truth_states.to_vec())?;
    let disps = preds
        .modes
        .iter()
        .map(|m| displacement_loss(&m.trajectory, &truth_traj))
        .collect::<Result<Vec<f64>>>()?;
    let winner = &preds.modes[winning_mode(&disps)];
    let pts = &winner.trajectory.points;
    if pts.len() != truth_states.len() {
        return Err(Error::LengthMismatch("state label length".into()));
    }
    let n = pts.len() as f64;
    let mut total = 0.0;
    if weights.speed != 0.0 {
        total += weights.speed * pts.iter().zip(truth_states).map(|(p, t)| (p.v - t.v).abs()).sum::<f64>() / n;
    }
    if weights.heading != 0.0 {
        total += weights.heading
            * pts.iter().zip(truth_states).map(|(p, t)| 1.0 - (p.psi - t.psi).cos()).sum::<f64>()
            / n;
    }
    if weights.accel != 0.0 || weights.steer != 0.0 {
        let controls = winner
            .controls
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("control-label terms need a control-emitting head".into()))?;
        if controls.len() != truth_controls.len() {
            return Err(Error::LengthMismatch("control label length".into()));
        }
        let m = controls.len() as f64;
        if weights.accel != 0.0 {
            total += weights.accel
                * controls.iter().zip(truth_controls).map(|(c, t)| (c.accel - t.accel).abs()).sum::<f64>()
                / m;
        }
        if weights.steer != 0.0 {
            total += weights.steer
                * controls.iter().zip(truth_controls).map(|(c, t)| (c.steer - t.steer).abs()).sum::<f64>()
                / m;
        }
    }
    Ok(total)
}

fn abs_var(tape: &mut Tape, x: Var) -> Var {
    let pos = tape.relu(x);
    let neg = tape.neg(x);
    let negr = tape.relu(neg);
    tape.add(pos, negr)
}

/// Builds the winner-takes-all loss on the tape over a decode and returns
/// the scalar root plus the value-level breakdown.
///
/// The winner is selected by value; the selection itself carries no
/// gradient, so non-winning modes' trajectory outputs receive exactly zero
/// while all logits receive soft-max gradients.
pub fn build_loss(
    tape: &mut Tape,
    decoded: &DecodedPrediction,
    sample: &Sample,
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let truth = &sample.future;
    if truth.len() != cfg.horizon {
        return Err(Error::LengthMismatch(format!(
            "sample {} future length {} != H {}",
            sample.id,
            truth.len(),
            cfg.horizon
        )));
    }
    // Per-mode displacement nodes. The tiny epsilon inside the square root
    // keeps the gradient finite at exact overlap.
    let eps = tape.constant(1e-12);
    let mut disp_nodes = Vec::with_capacity(decoded.modes.len());
    for mode in &decoded.modes {
        let mut acc: Option<Var> = None;
        for (&(x, y), t) in mode.positions.iter().zip(truth) {
            let tx = tape.constant(t.x);
            let ty = tape.constant(t.y);
            let dx = tape.sub(x, tx);
            let dy = tape.sub(y, ty);
            let dx2 = tape.mul(dx, dx);
            let dy2 = tape.mul(dy, dy);
            let d2 = tape.add(dx2, dy2);
            let d2e = tape.add(d2, eps);
            let d = tape.sqrt(d2e)?;
            acc = Some(match acc {
                None => d,
                Some(a) => tape.add(a, d),
            });
        }
        let sum = acc.expect("H >= 1");
        let node = match tc.aggregation {
            LossAggregation::Sum => sum,
            LossAggregation::Mean => {
                let inv = tape.constant(1.0 / cfg.horizon as f64);
                tape.mul(sum, inv)
            }
        };
        disp_nodes.push(node);
    }
    let disp_values: Vec<f64> = disp_nodes.iter().map(|&d| tape.value(d)).collect();
    let winner = winning_mode(&disp_values);

    // Soft-max cross-entropy of the winner: log(sum exp(l - max)) - (l_w - max).
    let max_logit = decoded.logits.iter().map(|&l| tape.value(l)).fold(f64::NEG_INFINITY, f64::max);
    let max_c = tape.constant(max_logit);
    let mut sum_exp: Option<Var> = None;
    for &l in &decoded.logits {
        let shifted = tape.sub(l, max_c);
        let e = tape.exp(shifted);
        sum_exp = Some(match sum_exp {
            None => e,
            Some(a) => tape.add(a, e),
        });
    }
    let log_sum = tape.log(sum_exp.expect("M >= 1"))?;
    let shifted_w = tape.sub(decoded.logits[winner], max_c);
    let xent = tape.sub(log_sum, shifted_w);

    let alpha_c = tape.constant(tc.alpha);
    let weighted_xent = tape.mul(alpha_c, xent);
    let mut total = tape.add(disp_nodes[winner], weighted_xent);

    // um_heading: 1 - cos(psi - psi*) through the normalized (sin, cos)
    // channel, weight 1.
    let mut heading_term = None;
    if cfg.head == HeadKind::UmHeading {
        let sincos = decoded.modes[winner]
            .heading_sincos
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("um_heading decode lacks a heading channel".into()))?;
        let one = tape.constant(1.0);
        let mut acc: Option<Var> = None;
        for (&(s, c), t) in sincos.iter().zip(truth) {
            let ts = tape.constant(t.psi.sin());
            let tc_ = tape.constant(t.psi.cos());
            let a = tape.mul(c, tc_);
            let b = tape.mul(s, ts);
            let cosd = tape.add(a, b);
            let term = tape.sub(one, cosd);
            acc = Some(match acc {
                None => term,
                Some(x) => tape.add(x, term),
            });
        }
        let sum = acc.expect("H >= 1");
        let inv = tape.constant(1.0 / cfg.horizon as f64);
        let mean = tape.mul(sum, inv);
        heading_term = Some(tape.value(mean));
        total = tape.add(total, mean);
    }

    // Optional supervised terms on the winning mode.
    let mut extra_term = None;
    if tc.extra.any() {
        let states = decoded.modes[winner].states.as_ref().ok_or_else(|| {
            Error::InvalidParam("supervised extra losses need a state-emitting head (dkm or ctra)".into())
        })?;
        let controls = decoded.modes[winner].controls.as_ref().expect("state heads carry controls");
        let inv_h = tape.constant(1.0 / cfg.horizon as f64);
        let mut extra_total: Option<Var> = None;
        let add_term = |tape: &mut Tape, term: Var, weight: f64, acc: &mut Option<Var>| {
            let w = tape.constant(weight);
            let scaled = tape.mul(w, term);
            *acc = Some(match *acc {
                None => scaled,
                Some(a) => tape.add(a, scaled),
            });
        };
        if tc.extra.speed != 0.0 {
            let mut acc: Option<Var> = None;
            for (sv, t) in states.iter().zip(truth) {
                let tv = tape.constant(t.v);
                let d = tape.sub(sv.v, tv);
                let a = abs_var(tape, d);
                acc = Some(match acc {
                    None => a,
                    Some(x) => tape.add(x, a),
                });
            }
            let s = acc.unwrap();
            let mean = tape.mul(s, inv_h);
            add_term(tape, mean, tc.extra.speed, &mut extra_total);
        }
        if tc.extra.heading != 0.0 {
            let one = tape.constant(1.0);
            let mut acc: Option<Var> = None;
            for (sv, t) in states.iter().zip(truth) {
                let tpsi = tape.constant(t.psi);
                let d = tape.sub(sv.psi, tpsi);
                let cosd = tape.cos(d);
                let term = tape.sub(one, cosd);
                acc = Some(match acc {
                    None => term,
                    Some(x) => tape.add(x, term),
                });
            }
            let s = acc.unwrap();
            let mean = tape.mul(s, inv_h);
            add_term(tape, mean, tc.extra.heading, &mut extra_total);
        }
        if tc.extra.accel != 0.0 || tc.extra.steer != 0.0 {
            // Label terms train the raw (pre-clip) outputs where available:
            // the labels always lie inside the clamp ranges, so the gradient
            // survives clip saturation.
            let controls = decoded.modes[winner].raw_controls.as_ref().unwrap_or(controls);
            if sample.future_controls.len() != controls.len() {
                return Err(Error::LengthMismatch("control labels".into()));
            }
            let inv_n = tape.constant(1.0 / controls.len() as f64);
            if tc.extra.accel != 0.0 {
                let mut acc: Option<Var> = None;
                for (&(a, _), t) in controls.iter().zip(&sample.future_controls) {
                    let ta = tape.constant(t.accel);
                    let d = tape.sub(a, ta);
                    let ab = abs_var(tape, d);
                    acc = Some(match acc {
                        None => ab,
                        Some(x) => tape.add(x, ab),
                    });
                }
                let s = acc.unwrap();
                let mean = tape.mul(s, inv_n);
                add_term(tape, mean, tc.extra.accel, &mut extra_total);
            }
            if tc.extra.steer != 0.0 {
                let mut acc: Option<Var> = None;
                for (&(_, g), t) in controls.iter().zip(&sample.future_controls) {
                    let tg = tape.constant(t.steer);
                    let d = tape.sub(g, tg);
                    let ab = abs_var(tape, d);
                    acc = Some(match acc {
                        None => ab,
                        Some(x) => tape.add(x, ab),
                    });
                }
                let s = acc.unwrap();
                let mean = tape.mul(s, inv_n);
                add_term(tape, mean, tc.extra.steer, &mut extra_total);
            }
        }
        let e = extra_total.expect("some weight is nonzero");
        extra_term = Some(tape.value(e));
        total = tape.add(total, e);
    }

    let breakdown = LossBreakdown {
        total: tape.value(total),
        displacement: disp_values[winner],
        mode_xent: tape.value(xent),
        winning_mode_index: winner,
        heading_term,
        extra_term,
    };
    Ok((total, breakdown))
}

/// Validation metrics attached to a log row.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSummary {
    pub l2_3s: Option<f64>,
    pub l2_6s: Option<f64>,
    pub heading_3s: Option<f64>,
    pub heading_6s: Option<f64>,
    pub infeasible_pct: f64,
}

impl From<&MetricReport> for ValSummary {
    fn from(r: &MetricReport) -> Self {
        Self {
            l2_3s: r.l2_3s_m,
            l2_6s: r.l2_6s_m,
            heading_3s: r.heading_3s_deg,
            heading_6s: r.heading_6s_deg,
            infeasible_pct: r.infeasible_pct,
        }
    }
}

/// One metrics-log row (batch means; validation columns on periodic rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_disp: f64,
    pub loss_xent: f64,
    pub val: Option<ValSummary>,
}

pub const METRICS_HEADER: &str = "iteration,lr,loss_total,loss_disp,loss_xent,val_l2_3s,val_l2_6s,val_heading_3s,val_heading_6s,val_infeasible_pct";

pub fn metrics_to_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let (a, b, c, d, e) = match &r.val {
            None => (String::new(), String::new(), String::new(), String::new(), String::new()),
            Some(v) => (
                opt(v.l2_3s),
                opt(v.l2_6s),
                opt(v.heading_3s),
                opt(v.heading_6s),
                format!("{:.6}", v.infeasible_pct),
            ),
        };
        out.push_str(&format!(
            "{},{:.10e},{:.9},{:.9},{:.9},{a},{b},{c},{d},{e}\n",
            r.iteration, r.lr, r.loss_total, r.loss_disp, r.loss_xent
        ));
    }
    out
}

/// A finished training run.
pub struct TrainOutput {
    pub model: Model,
    pub adam: AdamState,
    pub rows: Vec<TrainRow>,
}

/// Mini-batch Adam over the winner-takes-all loss, returning the trained
/// model, optimizer state, and per-iteration metrics log.
///
/// Deterministic for a given seed, config, and data: shuffling, batching,
/// and accumulation order are all fixed. Aborts with the offending sample id
/// if a loss goes non-finite. Validation metrics are computed every
/// `val_every` iterations when a validation set is provided.
pub fn train(
    cfg: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutput> {
    if train_set.is_empty() {
        return Err(Error::InvalidParam("training set is empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::InvalidParam("batch_size must be >= 1".into()));
    }
    let mut model = Model::new(cfg.clone(), tc.seed)?;
    let mut adam = AdamState::new(&model.params);
    let rows = train_loop(&mut model, &mut adam, train_set, val_set, tc)?;
    Ok(TrainOutput { model, adam, rows })
}

// The loop is factored out so resumed training could reuse it; it returns
// the per-iteration log.
fn train_loop(
    model: &mut Model,
    adam: &mut AdamState,
    train_set: &[Sample],
    val_set: &[Sample],
    tc: &TrainConfig,
) -> Result<Vec<TrainRow>> {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, &model.params);
    let mark = tape.mark();
    let mut grads_buf: Vec<f64> = Vec::new();
    let mut accum = model.params.zeros_like();
    let mut rows = Vec::with_capacity(tc.max_iters);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed ^ 0x0053_4855_4646_4c45_u64);
    let mut cursor = order.len(); // force an initial shuffle
    let scale = 1.0 / tc.batch_size as f64;

    for iter in 0..tc.max_iters {
        let lr = learning_rate(tc.lr0, tc.lr_decay, tc.lr_decay_every, iter);
        for a in accum.iter_mut() {
            a.fill(0.0);
        }
        let mut batch_total = 0.0;
        let mut batch_disp = 0.0;
        let mut batch_xent = 0.0;
        for _ in 0..tc.batch_size {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let sample = &train_set[order[cursor]];
            cursor += 1;

            tape.reset_to(mark);
            let decoded = forward_on_tape(&mut tape, &binding, model, &sample.past, &sample.kappa)?;
            let (root, breakdown) = build_loss(&mut tape, &decoded, sample, &model.config, tc)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { iter, sample_id: sample.id.clone() });
            }
            tape.backward_into(root, &mut grads_buf);
            binding.add_scaled(&grads_buf, &model.params, &mut accum, scale);
            batch_total += breakdown.total * scale;
            batch_disp += breakdown.displacement * scale;
            batch_xent += breakdown.mode_xent * scale;
        }
        adam_step(&mut model.params, &accum, adam, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        binding.refresh(&mut tape, &model.params);

        let val = if !val_set.is_empty() && (iter + 1) % tc.val_every == 0 {
            Some(ValSummary::from(&evaluate(model, val_set)?))
        } else {
            None
        };
        rows.push(TrainRow {
            iteration: iter,
            lr,
            loss_total: batch_total,
            loss_disp: batch_disp,
            loss_xent: batch_xent,
            val,
        });
    }
    Ok(rows)
}
