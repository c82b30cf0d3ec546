//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers.
//!
//! 1. Rollout agreement with an independently written scalar transcription
//!    of the bicycle-model equations (<= 1e-9 over 1,000 random tuples).
//! 2. Analytic gradients of the full multimodal loss match central finite
//!    differences for every decoder head (rel err <= 1e-4, >= 20 instances,
//!    away from clamp boundaries).
//! 3. Feasibility guarantee: 10,000 random-parameter dkm decodes with zero
//!    feasibility failures; likewise ctra and poly1; an untrained um on
//!    slow-speed scenarios shows a strictly positive infeasible rate.
//! 4. Model-class recovery: dkm trained on noiseless bicycle-generated data
//!    reaches l2@6s <= 0.1 m and heading@6s <= 1 degree.
//! 5. Directional ordering on noisy turning + braking data: trained dkm
//!    beats trained um on heading@6s and the turn-rate Wasserstein distance.
//! 6. Multimodal coverage: trained dkm's min-over-N l2@6s under 25% of its
//!    top-ranked l2@6s, and learned mode probabilities within 0.15 of the
//!    branch frequencies.
//! 7. wasserstein_1d equals a brute-force assignment search on all
//!    equal-size integer sets of up to 6 elements in [-3, 3].
//! 8. Two identically seeded generate -> train -> eval pipelines produce
//!    byte-identical checkpoints and reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use kinpred::autodiff::{write_checkpoint_string, ParamBinding, Tape};
use kinpred::datagen::{generate, generate_mix, split, Sample, ScenarioKind, ScenarioSpec};
use kinpred::evaluation::{evaluate, evaluate_with, wasserstein_1d, EvalOptions};
use kinpred::geometry::check_feasibility;
use kinpred::kinematics::{rollout, ControlInput, KinematicParams, VehicleState};
use kinpred::models::{forward_on_tape, HeadKind, Model, ModelConfig};
use kinpred::training::{build_loss, train, TrainConfig};

// ---------------------------------------------------------------------------
// Criterion 1: kinematics oracle equivalence
// ---------------------------------------------------------------------------

/// Independent transcription of the bicycle update, kept deliberately
/// separate from the library implementation.
mod oracle {
    pub fn step(s: [f64; 4], accel: f64, steer: f64, l_r: f64, l_f: f64, dt: f64) -> [f64; 4] {
        let beta = ((l_r / (l_f + l_r)) * steer.tan()).atan();
        let x_dot = s[3] * (s[2] + beta).cos();
        let y_dot = s[3] * (s[2] + beta).sin();
        let psi_dot = s[3] / l_r * beta.sin();
        let v_dot = accel;
        [s[0] + x_dot * dt, s[1] + y_dot * dt, s[2] + psi_dot * dt, s[3] + v_dot * dt]
    }
}

#[test]
fn criterion_1_kinematics_oracle_equivalence() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xACC1);
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let l_r = 1.0 + rng.random::<f64>() * 0.8;
        let l_f = 1.0 + rng.random::<f64>() * 0.8;
        let params = KinematicParams::new(l_r, l_f, 8.0, 0.785, 3.0).unwrap();
        let dt = 0.05 + rng.random::<f64>() * 0.15;
        let steps = 1 + (rng.random::<u64>() % 60) as usize;
        let init = VehicleState::new(
            (rng.random::<f64>() - 0.5) * 100.0,
            (rng.random::<f64>() - 0.5) * 100.0,
            (rng.random::<f64>() - 0.5) * 4.0 * std::f64::consts::PI,
            (rng.random::<f64>() - 0.5) * 40.0,
        );
        let controls: Vec<ControlInput> = (0..steps)
            .map(|_| {
                ControlInput::new(
                    (rng.random::<f64>() - 0.5) * 16.0,
                    (rng.random::<f64>() - 0.5) * 1.57,
                )
            })
            .collect();
        let ours = rollout(&init, &controls, &params, dt).unwrap();
        let mut s = [init.x, init.y, init.psi, init.v];
        for (c, o) in controls.iter().zip(&ours) {
            s = oracle::step(s, c.accel, c.steer, l_r, l_f, dt);
            for (a, b) in s.iter().zip(&[o.x, o.y, o.psi, o.v]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-9, "worst deviation {worst}");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "oracle sweep took {secs:.2}s");
    println!("ACCEPTANCE 1 PASS: rollout vs oracle, worst |diff| {worst:.3e} over 1000 tuples in {secs:.2}s");
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient correctness for every head
// ---------------------------------------------------------------------------

fn gradcheck_config(head: HeadKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(head);
    cfg.hidden = vec![8, 6];
    cfg.horizon = 30;
    cfg
}

/// Loss value at the current parameters; used as the finite-difference
/// oracle.
fn loss_value(model: &Model, sample: &Sample, tc: &TrainConfig) -> f64 {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, &model.params);
    let decoded = forward_on_tape(&mut tape, &binding, model, &sample.past, &sample.kappa).unwrap();
    let (root, _) = build_loss(&mut tape, &decoded, sample, &model.config, tc).unwrap();
    tape.value(root)
}

/// Rejects instances where a clamp sits near its boundary or two modes are
/// nearly tied (the winner selection would flip under perturbation).
fn instance_is_clean(model: &Model, sample: &Sample) -> bool {
    let mut tape = Tape::new();
    let binding = ParamBinding::bind(&mut tape, &model.params);
    let decoded = forward_on_tape(&mut tape, &binding, model, &sample.past, &sample.kappa).unwrap();
    let glim = sample.kappa.steering_limit();
    let g_bound = if model.config.head == HeadKind::Ctra { model.config.ctra_omega_max } else { glim };
    for mode in &decoded.modes {
        let Some(controls) = &mode.controls else { continue };
        for &(a, g) in controls {
            if tape.value(a).abs() > sample.kappa.a_max - 1e-3
                || tape.value(g).abs() > g_bound - 1e-3
            {
                return false;
            }
        }
    }
    // Mode displacements must be separated for a stable winner.
    let truth = sample.future_trajectory();
    let preds = model.predict(&sample.past, &sample.kappa).unwrap();
    let mut disps: Vec<f64> = preds
        .modes
        .iter()
        .map(|m| kinpred::training::displacement_loss(&m.trajectory, &truth).unwrap())
        .collect();
    disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    disps.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-4)
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let heads = [
        HeadKind::Um,
        HeadKind::UmVelo,
        HeadKind::UmHeading,
        HeadKind::Poly1,
        HeadKind::Poly2,
        HeadKind::Poly3,
        HeadKind::Ctra,
        HeadKind::Dkm,
    ];
    let mut spec = ScenarioSpec::new(ScenarioKind::ConstantTurn);
    spec.horizon = 30;
    spec.noise_sigma_accel = 0.3;
    spec.noise_sigma_steer = 0.02;
    let pool = {
        let mut specs: Vec<(ScenarioSpec, f64)> = Vec::new();
        for kind in [ScenarioKind::ConstantTurn, ScenarioKind::BrakeToStop, ScenarioKind::RightTurn] {
            let mut s = spec.clone();
            s.kind = kind;
            specs.push((s, 1.0));
        }
        generate_mix(&specs, 60, 0xACC2).unwrap()
    };
    let tc = TrainConfig::default();
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for head in heads {
        let mut instances = 0;
        let mut seed = 0u64;
        while instances < 20 {
            seed += 1;
            let model = Model::new(gradcheck_config(head), 0x9000 + seed).unwrap();
            let sample = &pool[(seed as usize * 7 + instances) % pool.len()];
            if !instance_is_clean(&model, sample) {
                continue;
            }
            instances += 1;

            // Analytic gradient.
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, &model.params);
            let decoded =
                forward_on_tape(&mut tape, &binding, &model, &sample.past, &sample.kappa).unwrap();
            let (root, _) = build_loss(&mut tape, &decoded, sample, &model.config, &tc).unwrap();
            let grads = tape.backward(root);
            let by_entry = binding.gradients(&grads, &model.params);

            // Central finite differences, elementwise over all parameters.
            #[allow(clippy::needless_range_loop)]
            for (k, entry) in model.params.entries().iter().enumerate() {
                for i in 0..entry.data.len() {
                    let mut plus = model.clone();
                    plus.params.entry_mut(k).data[i] += h;
                    let mut minus = model.clone();
                    minus.params.entry_mut(k).data[i] -= h;
                    let fd = (loss_value(&plus, sample, &tc) - loss_value(&minus, sample, &tc)) / (2.0 * h);
                    let g = by_entry[k][i];
                    // rel err <= 1e-4 with an absolute floor of 1e-7 on the
                    // difference (finite-difference roundoff dominates tiny
                    // gradients).
                    let denom = g.abs().max(fd.abs());
                    let diff = (g - fd).abs();
                    if 1e-4 * denom >= 1e-7 {
                        // Report the worst case where the relative bound is
                        // the binding one.
                        worst_rel = worst_rel.max(diff / denom);
                    }
                    assert!(
                        diff <= (1e-4 * denom).max(1e-7),
                        "{head:?} {}[{}]: analytic {g:.9e}, fd {fd:.9e}, diff {diff:.3e}",
                        entry.name,
                        i
                    );
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient check took {secs:.1}s");
    println!(
        "ACCEPTANCE 2 PASS: all 8 heads, 20 instances each, worst rel err {worst_rel:.3e} in {secs:.1}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: feasibility guarantee
// ---------------------------------------------------------------------------

fn decode_pool(count: usize, seed: u64) -> Vec<Sample> {
    let specs: Vec<(ScenarioSpec, f64)> = ScenarioKind::unimodal()
        .into_iter()
        .map(|k| {
            let mut s = ScenarioSpec::new(k);
            s.noise_sigma_accel = 0.3;
            s.noise_sigma_steer = 0.02;
            (s, 1.0)
        })
        .collect();
    generate_mix(&specs, count, seed).unwrap()
}

fn feasibility_sweep(head: HeadKind, draws: usize, pool: &[Sample]) -> usize {
    let mut cfg = ModelConfig::new(head);
    cfg.hidden = vec![64, 64];
    let mut failures = 0usize;
    for draw in 0..draws {
        let model = Model::new(cfg.clone(), 0xF000 + draw as u64).unwrap();
        let sample = &pool[draw % pool.len()];
        let pred = model.predict(&sample.past, &sample.kappa).unwrap();
        for mode in &pred.modes {
            let rep = check_feasibility(&mode.trajectory, &sample.kappa);
            if !rep.feasible {
                failures += 1;
            }
        }
    }
    failures
}

#[test]
fn criterion_3_feasibility_guarantee() {
    let pool = decode_pool(500, 0xACC3);
    let draws = 10_000;

    let dkm_failures = feasibility_sweep(HeadKind::Dkm, draws, &pool);
    assert_eq!(dkm_failures, 0, "dkm feasibility failures");
    let ctra_failures = feasibility_sweep(HeadKind::Ctra, draws, &pool);
    assert_eq!(ctra_failures, 0, "ctra feasibility failures");
    let poly1_failures = feasibility_sweep(HeadKind::Poly1, draws, &pool);
    assert_eq!(poly1_failures, 0, "poly1 feasibility failures");

    // Untrained um on slow scenarios: strictly positive infeasible rate.
    let mut slow = ScenarioSpec::new(ScenarioKind::ConstantVelocity);
    slow.speed_range = (1.0, 3.0);
    let slow_samples = generate(&slow, 200, 0xACC33).unwrap();
    let mut um_cfg = ModelConfig::new(HeadKind::Um);
    um_cfg.hidden = vec![64, 64];
    let um = Model::new(um_cfg, 0xF0F0).unwrap();
    let rep = evaluate(&um, &slow_samples).unwrap();
    assert!(rep.infeasible_pct > 0.0, "um infeasible rate {}", rep.infeasible_pct);

    println!(
        "ACCEPTANCE 3 PASS: dkm 0/{draws}, ctra 0/{draws}, poly1 0/{draws} infeasible decodes; untrained um infeasible {:.1}%",
        rep.infeasible_pct
    );
}

// ---------------------------------------------------------------------------
// Criteria 4-6: training-based checks (thresholds from the reference build)
// ---------------------------------------------------------------------------

// Step-decay schedule compressed to the 20,000-iteration desk run,
// confirmed against the reference build (test l2@6s ~ 0.07 m). The
// supervised speed/heading/steer label terms are enabled: the synthetic
// data carries exact control labels, and sustained-turn scenarios otherwise
// leave the endpoint loss with phase-offset local minima that cap recovery
// precision far above the data's noise floor (which is zero here).
fn recovery_train_config() -> TrainConfig {
    TrainConfig {
        max_iters: 20_000,
        batch_size: 32,
        lr0: 2e-3,
        lr_decay: 0.75,
        lr_decay_every: 1_200,
        seed: 1,
        val_every: 100_000,
        extra: kinpred::training::ExtraLossWeights { speed: 0.3, heading: 0.3, accel: 0.0, steer: 1.0 },
        ..Default::default()
    }
}

#[test]
fn criterion_4_model_class_recovery() {
    let started = std::time::Instant::now();
    let specs: Vec<(ScenarioSpec, f64)> =
        ScenarioKind::unimodal().into_iter().map(|k| (ScenarioSpec::new(k), 1.0)).collect();
    let samples = generate_mix(&specs, 5_000, 42).unwrap();
    let (train_set, _val, test_set) = split(&samples, 7);
    let cfg = ModelConfig::new(HeadKind::Dkm);
    let out = train(&cfg, &train_set, &[], &recovery_train_config()).unwrap();
    let rep = evaluate(&out.model, &test_set).unwrap();
    let l2 = rep.l2_6s_m.unwrap();
    let heading = rep.heading_6s_deg.unwrap();
    assert!(l2 <= 0.1, "l2@6s {l2} m over threshold");
    assert!(heading <= 1.0, "heading@6s {heading} deg over threshold");
    let mins = started.elapsed().as_secs_f64() / 60.0;
    assert!(mins < 30.0, "recovery run took {mins:.1} min");
    println!(
        "ACCEPTANCE 4 PASS: dkm recovery l2@6s {l2:.4} m (<= 0.1), heading@6s {heading:.4} deg (<= 1.0) in {mins:.1} min"
    );
}

fn noisy_mix(count: usize, seed: u64) -> Vec<Sample> {
    let kinds =
        [ScenarioKind::ConstantTurn, ScenarioKind::RightTurn, ScenarioKind::SCurve, ScenarioKind::BrakeToStop];
    let specs: Vec<(ScenarioSpec, f64)> = kinds
        .into_iter()
        .map(|k| {
            let mut s = ScenarioSpec::new(k);
            s.noise_sigma_accel = 0.3;
            s.noise_sigma_steer = 0.02;
            (s, 1.0)
        })
        .collect();
    generate_mix(&specs, count, seed).unwrap()
}

#[test]
fn criterion_5_directional_heading_ordering() {
    let samples = noisy_mix(2_500, 0xACC5);
    let (train_set, _val, test_set) = split(&samples, 9);
    let tc = TrainConfig {
        max_iters: 6_000,
        batch_size: 32,
        lr0: 1e-3,
        lr_decay: 0.8,
        lr_decay_every: 1_000,
        seed: 2,
        val_every: 100_000,
        ..Default::default()
    };
    let dkm = train(&ModelConfig::new(HeadKind::Dkm), &train_set, &[], &tc).unwrap();
    let um = train(&ModelConfig::new(HeadKind::Um), &train_set, &[], &tc).unwrap();
    let rep_dkm = evaluate(&dkm.model, &test_set).unwrap();
    let rep_um = evaluate(&um.model, &test_set).unwrap();
    let (hd, hu) = (rep_dkm.heading_6s_deg.unwrap(), rep_um.heading_6s_deg.unwrap());
    assert!(
        hd < hu,
        "dkm heading@6s {hd:.3} deg not below um {hu:.3} deg (l2: dkm {:.3}, um {:.3})",
        rep_dkm.l2_6s_m.unwrap(),
        rep_um.l2_6s_m.unwrap()
    );
    assert!(
        rep_dkm.w1_turnrate < rep_um.w1_turnrate,
        "dkm W1 turn rate {:.4} not below um {:.4}",
        rep_dkm.w1_turnrate,
        rep_um.w1_turnrate
    );
    println!(
        "ACCEPTANCE 5 PASS: heading@6s dkm {hd:.3} < um {hu:.3} deg; W1 turn-rate dkm {:.4} < um {:.4}",
        rep_dkm.w1_turnrate, rep_um.w1_turnrate
    );
}

#[test]
fn criterion_6_multimodal_coverage() {
    let spec = ScenarioSpec::new(ScenarioKind::IntersectionMultimodal);
    let samples = generate(&spec, 2_500, 0xACC6).unwrap();
    let (train_set, _val, test_set) = split(&samples, 11);
    let tc = TrainConfig {
        max_iters: 8_000,
        batch_size: 32,
        lr0: 1e-3,
        lr_decay: 0.8,
        lr_decay_every: 1_200,
        seed: 4,
        val_every: 100_000,
        ..Default::default()
    };
    let out = train(&ModelConfig::new(HeadKind::Dkm), &train_set, &[], &tc).unwrap();
    let top = evaluate(&out.model, &test_set).unwrap();
    let min_n = evaluate_with(&out.model, &test_set, EvalOptions { min_over_n: true }).unwrap();
    let (top_l2, min_l2) = (top.l2_6s_m.unwrap(), min_n.l2_6s_m.unwrap());
    assert!(
        min_l2 < 0.25 * top_l2,
        "min-over-N l2@6s {min_l2:.3} not under 25% of top-ranked {top_l2:.3}"
    );

    // Learned mode probabilities against branch frequencies (sorted).
    let mut mean_probs = vec![0.0f64; 3];
    for s in &test_set {
        let pred = out.model.predict(&s.past, &s.kappa).unwrap();
        for (i, m) in pred.modes.iter().enumerate() {
            mean_probs[i] += m.probability / test_set.len() as f64;
        }
    }
    let mut freqs = vec![0.0f64; 3];
    for s in &test_set {
        let b = match s.branch.as_str() {
            "straight" => 0,
            "right" => 1,
            _ => 2,
        };
        freqs[b] += 1.0 / test_set.len() as f64;
    }
    mean_probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    freqs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (p, f) in mean_probs.iter().zip(&freqs) {
        assert!(
            (p - f).abs() <= 0.15,
            "mode probability {p:.3} vs branch frequency {f:.3} (probs {mean_probs:?}, freqs {freqs:?})"
        );
    }
    println!(
        "ACCEPTANCE 6 PASS: min-over-N l2@6s {min_l2:.3} m < 25% of top-ranked {top_l2:.3} m; probs {mean_probs:?} vs freqs {freqs:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: Wasserstein brute-force oracle
// ---------------------------------------------------------------------------

/// Minimum mean |a_i - b_perm(i)| over all pairings, via bitmask DP on the
/// assignment problem.
#[allow(clippy::needless_range_loop)]
fn brute_force_w1(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let full = (1usize << n) - 1;
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for mask in 0..full {
        let i = (mask as u32).count_ones() as usize;
        if dp[mask].is_infinite() {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let cost = dp[mask] + (a[i] - b[j]).abs();
                if cost < dp[next] {
                    dp[next] = cost;
                }
            }
        }
    }
    dp[full] / n as f64
}

fn multisets(n: usize, lo: i64, hi: i64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fn rec(out: &mut Vec<Vec<f64>>, cur: &mut Vec<f64>, n: usize, from: i64, hi: i64) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for v in from..=hi {
            cur.push(v as f64);
            rec(out, cur, n, v, hi);
            cur.pop();
        }
    }
    rec(&mut out, &mut cur, n, lo, hi);
    out
}

#[test]
fn criterion_7_wasserstein_brute_force_oracle() {
    let mut checked = 0usize;
    for n in 1..=6usize {
        let sets = multisets(n, -3, 3);
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i..] {
                let fast = wasserstein_1d(a, b).unwrap();
                let brute = brute_force_w1(a, b);
                assert_eq!(fast, brute, "n={n}, a={a:?}, b={b:?}");
                checked += 1;
            }
        }
    }
    println!("ACCEPTANCE 7 PASS: wasserstein_1d equals brute force on {checked} set pairs");
}

// ---------------------------------------------------------------------------
// Criterion 8: end-to-end determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_pipeline_determinism() {
    let run = || -> (String, String) {
        let samples = noisy_mix(300, 0xACC8);
        let (train_set, _val, test_set) = split(&samples, 13);
        let tc = TrainConfig {
            max_iters: 1_000,
            batch_size: 16,
            lr0: 1e-3,
            seed: 5,
            val_every: 100_000,
            ..Default::default()
        };
        let cfg = ModelConfig::new(HeadKind::Dkm);
        let out = train(&cfg, &train_set, &[], &tc).unwrap();
        let config_value = serde_json::to_value(&cfg).unwrap();
        let ckpt = write_checkpoint_string(&out.model.params, Some(&out.adam), Some(&config_value));
        let report = evaluate(&out.model, &test_set).unwrap().to_csv();
        (ckpt, report)
    };
    let (ckpt_a, report_a) = run();
    let (ckpt_b, report_b) = run();
    assert_eq!(ckpt_a.as_bytes(), ckpt_b.as_bytes(), "checkpoints differ");
    assert_eq!(report_a.as_bytes(), report_b.as_bytes(), "reports differ");
    println!(
        "ACCEPTANCE 8 PASS: generate -> train 1000 iters -> eval twice, byte-identical checkpoint ({} bytes) and report",
        ckpt_a.len()
    );
}
