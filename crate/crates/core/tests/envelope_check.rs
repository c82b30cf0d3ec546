//! The dkm decoder's per-vertex steering envelope must be able to express
//! every control sequence the generator produces, or training could never
//! fit the ground truth exactly.

use kinpred::datagen::{generate, ScenarioKind, ScenarioSpec};
use kinpred::models::SteeringEnvelope;

#[test]
fn generator_controls_fit_inside_the_decoder_envelope() {
    for kind in ScenarioKind::unimodal().into_iter().chain([ScenarioKind::IntersectionMultimodal]) {
        for &(sa, sg) in &[(0.0, 0.0), (0.3, 0.02)] {
            let mut spec = ScenarioSpec::new(kind);
            spec.noise_sigma_accel = sa;
            spec.noise_sigma_steer = sg;
            let samples = generate(&spec, 60, 0xE17).unwrap();
            for s in &samples {
                assert!(
                    SteeringEnvelope::fits(&s.future_controls, s.anchor().v, &s.kappa, s.dt),
                    "{} ({kind:?}, noise {sa}/{sg}) clipped by the decoder envelope",
                    s.id
                );
            }
        }
    }
}

/// A decode whose raw steering zigzags violently still yields a polyline
/// whose every vertex radius clears the actor's minimum.
#[test]
fn envelope_bounds_are_sufficient_for_the_radius_check() {
    use kinpred::geometry::{check_feasibility, Trajectory};
    use kinpred::kinematics::{rollout, ControlInput, KinematicParams};

    let kappa = KinematicParams::midsize_sedan();
    let dt = 0.1;
    for seed in 0..50u64 {
        // Adversarial raw sequence: alternating full-lock requests with an
        // aggressive speed profile.
        let mut v: f64 = 1.0 + (seed % 12) as f64;
        let mut env = SteeringEnvelope::new();
        let mut controls = Vec::new();
        let mut state = seed;
        for step in 0..60 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let want_gamma: f64 = if step % 2 == 0 { 0.785 } else { -0.785 };
            let want_accel: f64 = if (state >> 20) % 2 == 0 { 8.0 } else { -8.0 };
            let accel = want_accel.clamp(-(v.max(0.0)) / dt, 8.0);
            let (lo, hi) = env.bounds(v.max(0.0), &kappa, dt);
            let gamma = want_gamma.clamp(lo, hi);
            env.advance(gamma, v.max(0.0), &kappa, dt);
            controls.push(ControlInput::new(accel, gamma));
            v += accel * dt;
        }
        let v0 = 1.0 + (seed % 12) as f64;
        let states = rollout(
            &kinpred::kinematics::VehicleState::new(0.0, 0.0, 0.0, v0),
            &controls,
            &kappa,
            dt,
        )
        .unwrap();
        let rep = check_feasibility(&Trajectory::new(dt, states).unwrap(), &kappa);
        assert!(
            rep.feasible,
            "seed {seed}: adversarial zigzag broke the radius check (min {})",
            rep.min_radius_observed
        );
    }
}
