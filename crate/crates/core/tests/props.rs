//! Cross-module invariants, mostly property-based.

use proptest::prelude::*;

use kinpred::autodiff::{ParamBinding, Tape};
use kinpred::datagen::{generate, ScenarioKind, ScenarioSpec};
use kinpred::evaluation::wasserstein_1d;
use kinpred::geometry::{interpolate_headings, to_actor_frame, turning_radii};
use kinpred::kinematics::{rollout, ControlInput, KinematicParams, VehicleState};
use kinpred::models::{forward_on_tape, HeadKind, Model, ModelConfig};
use kinpred::training::{build_loss, TrainConfig};

fn sedan() -> KinematicParams {
    KinematicParams::midsize_sedan()
}

fn control_seq(n: usize) -> impl Strategy<Value = Vec<ControlInput>> {
    proptest::collection::vec((-8.0..8.0f64, -0.78..0.78f64), n..=n)
        .prop_map(|v| v.into_iter().map(|(a, g)| ControlInput::new(a, g)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rotating the initial state by theta and rotating the rollout back
    /// reproduces the actor-frame rollout to 1e-9 per coordinate.
    #[test]
    fn rollout_is_frame_equivariant(
        theta in -3.1..3.1f64,
        v0 in 0.0..15.0f64,
        controls in control_seq(40),
    ) {
        let params = sedan();
        let local = rollout(&VehicleState::new(0.0, 0.0, 0.0, v0), &controls, &params, 0.1).unwrap();
        let anchor = VehicleState::new(0.0, 0.0, theta, v0);
        let world = rollout(&anchor, &controls, &params, 0.1).unwrap();
        let back = to_actor_frame(&world, &anchor).unwrap();
        for (a, b) in local.iter().zip(&back) {
            prop_assert!((a.x - b.x).abs() < 1e-9);
            prop_assert!((a.y - b.y).abs() < 1e-9);
            prop_assert!((a.psi - b.psi).abs() < 1e-9);
            prop_assert!((a.v - b.v).abs() < 1e-12);
        }
    }

    /// Repeated rollouts are bit-identical (purity).
    #[test]
    fn rollout_is_pure(v0 in 0.0..15.0f64, controls in control_seq(20)) {
        let params = sedan();
        let init = VehicleState::new(1.0, -2.0, 0.5, v0);
        let a = rollout(&init, &controls, &params, 0.1).unwrap();
        let b = rollout(&init, &controls, &params, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.x.to_bits(), y.x.to_bits());
            prop_assert_eq!(x.psi.to_bits(), y.psi.to_bits());
        }
    }

    /// Final speed equals the initial speed plus the per-step accelerations
    /// integrated in rollout order, exactly.
    #[test]
    fn velocity_integral_is_exact(v0 in 0.0..15.0f64, controls in control_seq(60)) {
        let out = rollout(&VehicleState::new(0.0, 0.0, 0.0, v0), &controls, &sedan(), 0.1).unwrap();
        let expected = controls.iter().fold(v0, |v, c| v + c.accel * 0.1);
        prop_assert_eq!(out.last().unwrap().v.to_bits(), expected.to_bits());
    }

    /// Rotating positions about the anchor origin adds the rotation angle to
    /// every interpolated heading, to 1e-9.
    #[test]
    fn heading_interpolation_is_rotation_equivariant(
        theta in -1.5..1.5f64,
        raw in proptest::collection::vec((0.1..5.0f64, -1.0..1.0f64), 3..30),
    ) {
        // Build a forward-moving polyline so no stillness fallback triggers.
        let mut x = 1.0;
        let positions: Vec<(f64, f64)> = raw
            .iter()
            .map(|&(dx, y)| {
                x += dx;
                (x, y)
            })
            .collect();
        let base = interpolate_headings(&positions, 0.1, 0.0);
        let rot: Vec<(f64, f64)> = positions
            .iter()
            .map(|&(px, py)| (px * theta.cos() - py * theta.sin(), px * theta.sin() + py * theta.cos()))
            .collect();
        let rotated = interpolate_headings(&rot, 0.1, theta);
        for (a, b) in base.iter().zip(&rotated) {
            let diff = (b - a - theta).rem_euclid(2.0 * std::f64::consts::PI);
            let wrapped = diff.min(2.0 * std::f64::consts::PI - diff);
            prop_assert!(wrapped < 1e-9, "heading shift {diff}");
        }
    }

    /// Turning radii: invariant under rotation about the anchor, covariant
    /// under scaling about the anchor, and (for triples not involving the
    /// anchor) invariant under translation.
    #[test]
    fn turning_radii_equivariances(
        theta in -3.0..3.0f64,
        scale in 0.3..4.0f64,
        shift in (-20.0..20.0f64, -20.0..20.0f64),
        raw in proptest::collection::vec((0.2..3.0f64, -0.8..0.8f64), 4..25),
    ) {
        let mut x = 0.5;
        let positions: Vec<(f64, f64)> = raw
            .iter()
            .map(|&(dx, y)| {
                x += dx;
                (x, y)
            })
            .collect();
        let base = turning_radii(&positions).unwrap();

        let rot: Vec<(f64, f64)> = positions
            .iter()
            .map(|&(px, py)| (px * theta.cos() - py * theta.sin(), px * theta.sin() + py * theta.cos()))
            .collect();
        for (a, b) in base.iter().zip(&turning_radii(&rot).unwrap()) {
            if a.is_finite() {
                prop_assert!((a - b).abs() / a < 1e-9, "rotation changed radius {a} -> {b}");
            } else {
                prop_assert!(!b.is_finite());
            }
        }

        let scaled: Vec<(f64, f64)> = positions.iter().map(|&(px, py)| (px * scale, py * scale)).collect();
        for (a, b) in base.iter().zip(&turning_radii(&scaled).unwrap()) {
            if a.is_finite() {
                prop_assert!((a * scale - b).abs() / (a * scale) < 1e-9, "scaling broke covariance");
            }
        }

        // Translation moves the implicit anchor too, so only radii of
        // interior triples (indices >= 1) are preserved.
        let moved: Vec<(f64, f64)> = positions.iter().map(|&(px, py)| (px + shift.0, py + shift.1)).collect();
        let shifted = turning_radii(&moved).unwrap();
        for (a, b) in base.iter().zip(&shifted).skip(1) {
            if a.is_finite() && *a < 1e12 {
                prop_assert!((a - b).abs() / a < 1e-6, "translation changed interior radius {a} -> {b}");
            }
        }
    }

    /// W1 is symmetric, satisfies the triangle inequality, and is
    /// translation covariant.
    #[test]
    fn wasserstein_metric_properties(
        a in proptest::collection::vec(-10.0..10.0f64, 1..12),
        b in proptest::collection::vec(-10.0..10.0f64, 1..12),
        c in proptest::collection::vec(-10.0..10.0f64, 1..12),
        shift in -5.0..5.0f64,
    ) {
        let dab = wasserstein_1d(&a, &b).unwrap();
        let dba = wasserstein_1d(&b, &a).unwrap();
        prop_assert!((dab - dba).abs() < 1e-9);
        let dac = wasserstein_1d(&a, &c).unwrap();
        let dcb = wasserstein_1d(&c, &b).unwrap();
        prop_assert!(dab <= dac + dcb + 1e-9, "triangle violated: {dab} > {dac} + {dcb}");
        let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
        prop_assert!((wasserstein_1d(&a2, &b2).unwrap() - dab).abs() < 1e-9);
    }
}

/// um and um_velo decode the same trajectory when their final layers are
/// built to represent it (cumulative-sum identity).
#[test]
fn um_and_um_velo_agree_on_the_same_trajectory() {
    let mut cfg = ModelConfig::new(HeadKind::Um);
    cfg.hidden = vec![8];
    cfg.horizon = 15;
    let mut cfg_velo = cfg.clone();
    cfg_velo.head = HeadKind::UmVelo;

    let mut um = Model::new(cfg, 3).unwrap();
    let mut velo = Model::new(cfg_velo, 3).unwrap();
    um.params.get_mut("head.w").unwrap().data.fill(0.0);
    velo.params.get_mut("head.w").unwrap().data.fill(0.0);

    // Displacements of a wavy path; um gets their cumulative sums.
    let disps: Vec<(f64, f64)> =
        (0..15).map(|h| (0.5 + 0.01 * h as f64, 0.2 * (h as f64 * 0.7).sin())).collect();
    {
        let b = velo.params.get_mut("head.b").unwrap();
        for m in 0..3 {
            for (h, &(dx, dy)) in disps.iter().enumerate() {
                b.data[m * 30 + 2 * h] = dx;
                b.data[m * 30 + 2 * h + 1] = dy;
            }
        }
    }
    {
        let b = um.params.get_mut("head.b").unwrap();
        for m in 0..3 {
            let (mut cx, mut cy) = (0.0, 0.0);
            for (h, &(dx, dy)) in disps.iter().enumerate() {
                cx += dx;
                cy += dy;
                b.data[m * 30 + 2 * h] = cx;
                b.data[m * 30 + 2 * h + 1] = cy;
            }
        }
    }
    let past: Vec<VehicleState> =
        (0..=10).map(|i| VehicleState::new(-(10 - i) as f64 * 0.5, 0.0, 0.0, 5.0)).collect();
    let pu = um.predict(&past, &sedan()).unwrap();
    let pv = velo.predict(&past, &sedan()).unwrap();
    for (mu, mv) in pu.modes.iter().zip(&pv.modes) {
        for (a, b) in mu.trajectory.points.iter().zip(&mv.trajectory.points) {
            assert!((a.x - b.x).abs() < 1e-9);
            assert!((a.y - b.y).abs() < 1e-9);
        }
    }
}

/// um_heading decodes the same positions as um when both share the
/// position-channel weights; its extra channel only adds headings.
#[test]
fn um_heading_positions_match_um_for_shared_weights() {
    let mut cfg = ModelConfig::new(HeadKind::Um);
    cfg.hidden = vec![8];
    cfg.horizon = 12;
    let mut cfg_h = cfg.clone();
    cfg_h.head = HeadKind::UmHeading;

    let um = Model::new(cfg, 9).unwrap();
    let mut umh = Model::new(cfg_h, 9).unwrap();
    // Copy um's position rows (per-mode leading 2H rows) into um_heading's
    // final layer; um_heading's blocks are 4H tall.
    let h = 12usize;
    let hid = 8usize;
    let src_w = um.params.get("head.w").unwrap().data.clone();
    let src_b = um.params.get("head.b").unwrap().data.clone();
    {
        let w = umh.params.get_mut("head.w").unwrap();
        for m in 0..3 {
            for row in 0..2 * h {
                for i in 0..hid {
                    w.data[(m * 4 * h + row) * hid + i] = src_w[(m * 2 * h + row) * hid + i];
                }
            }
        }
        let b = umh.params.get_mut("head.b").unwrap();
        for m in 0..3 {
            for row in 0..2 * h {
                b.data[m * 4 * h + row] = src_b[m * 2 * h + row];
            }
        }
    }
    let past: Vec<VehicleState> =
        (0..=10).map(|i| VehicleState::new(-(10 - i) as f64 * 0.6, 0.0, 0.0, 6.0)).collect();
    let pu = um.predict(&past, &sedan()).unwrap();
    let ph = umh.predict(&past, &sedan()).unwrap();
    for (a, b) in pu.modes.iter().zip(&ph.modes) {
        for (p, q) in a.trajectory.points.iter().zip(&b.trajectory.points) {
            assert!((p.x - q.x).abs() < 1e-12);
            assert!((p.y - q.y).abs() < 1e-12);
        }
    }
}

/// 60-step decoder losses have finite gradients for every parameter across
/// 100 random seeds, and three random coordinates agree with central
/// finite differences.
#[test]
fn long_rollout_gradients_are_finite_and_match_fd() {
    let mut spec = ScenarioSpec::new(ScenarioKind::RightTurn);
    spec.noise_sigma_steer = 0.01;
    let samples = generate(&spec, 4, 0xBEEF).unwrap();
    let mut cfg = ModelConfig::new(HeadKind::Dkm);
    cfg.hidden = vec![10, 8];
    let tc = TrainConfig::default();

    for seed in 0..100u64 {
        let model = Model::new(cfg.clone(), seed).unwrap();
        let sample = &samples[(seed % 4) as usize];
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, &model.params);
        let decoded = forward_on_tape(&mut tape, &binding, &model, &sample.past, &sample.kappa).unwrap();
        let (root, breakdown) = build_loss(&mut tape, &decoded, sample, &cfg, &tc).unwrap();
        assert!(breakdown.total.is_finite());
        let grads = tape.backward(root);
        let by_entry = binding.gradients(&grads, &model.params);
        for (entry, g) in model.params.entries().iter().zip(&by_entry) {
            assert!(g.iter().all(|x| x.is_finite()), "non-finite gradient in {}", entry.name);
        }

        if seed < 3 {
            // Finite-difference agreement on three scattered coordinates.
            let h = 1e-5;
            let loss_at = |m: &Model| -> f64 {
                let mut t = Tape::new();
                let b = ParamBinding::bind(&mut t, &m.params);
                let d = forward_on_tape(&mut t, &b, m, &sample.past, &sample.kappa).unwrap();
                let (r, _) = build_loss(&mut t, &d, sample, &cfg, &tc).unwrap();
                t.value(r)
            };
            for (k, i) in [(0usize, 7usize), (2, 3), (4, 11)] {
                let mut plus = model.clone();
                plus.params.entry_mut(k).data[i] += h;
                let mut minus = model.clone();
                minus.params.entry_mut(k).data[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let g = by_entry[k][i];
                let denom = g.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (g - fd).abs() / denom < 1e-4,
                    "seed {seed} entry {k}[{i}]: {g} vs fd {fd}"
                );
            }
        }
    }
}

/// Generated ground truth always passes the feasibility check it will be
/// scored against.
#[test]
fn ground_truth_feasibility_holds_across_kinds() {
    use kinpred::geometry::check_feasibility;
    for kind in ScenarioKind::unimodal() {
        let mut spec = ScenarioSpec::new(kind);
        spec.noise_sigma_accel = 0.25;
        spec.noise_sigma_steer = 0.015;
        for s in generate(&spec, 50, 0xFEA5).unwrap() {
            let rep = check_feasibility(&s.future_trajectory(), &s.kappa);
            assert!(rep.feasible, "{}: {}", s.id, rep.min_radius_observed);
        }
    }
}
