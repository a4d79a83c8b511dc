//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vi_sensitivity::bounds::{
    bounds_from_excitation, excitation_constants, excitation_inputs, gauge_within_bounds,
    BoundsConfig,
};
use vi_sensitivity::excitation::{excitation_min, excitation_report, SignalWindow};
use vi_sensitivity::experiment::{
    drift_bias_spec, run_bounds_sweep, run_gravity_init_experiment, run_montecarlo, to_json,
    AggregateStats, ExperimentConfig,
};
use vi_sensitivity::geometry::{hat, random_rotation, spectral_norm, Pose, Rotation};
use vi_sensitivity::indistinguishability::{
    apply_zero_input_gauge, induced_biases, measurement_discrepancy, two_direction_degenerate,
    GaugeTransform, ZeroInputGauge,
};
use vi_sensitivity::sensors::{ideal_imu_stream, BiasTrajectory, Scene};
use vi_sensitivity::trajectory::{
    integrate_mechanization, make_calibration_trajectory, CalibrationSpec, NavState,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize()
}

fn gauge_indistinguishability() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let scene = random_scene(i);
        let zg = ZeroInputGauge {
            theta: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            translation: unit(&mut rng) * rng.gen_range(0.0..5.0),
        };
        let moved = apply_zero_input_gauge(&scene, &zg).unwrap();
        let times = camera_times(scene.trajectory.duration);
        worst = worst.max(measurement_discrepancy(&scene, &moved, &times).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-9 && secs < 10.0,
        format!("max discrepancy {worst:.2e} (< 1e-9), {secs:.2} s (< 10 s)"),
    )
}

fn induced_bias_reproduction() -> Verdict {
    let dt = 1e-3;
    let biases = BiasTrajectory::constant(
        Vector3::new(3e-3, -2e-3, 1e-3),
        Vector3::new(0.05, -0.02, 0.03),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let scene = random_scene(500 + i);
        let gt = GaugeTransform::new(
            Pose::new(
                Rotation::exp(&(unit(&mut rng) * rng.gen_range(0.0..1e-2))),
                unit(&mut rng) * rng.gen_range(0.0..1e-2),
            ),
            Pose::new(
                Rotation::exp(&(unit(&mut rng) * rng.gen_range(0.0..1e-2))),
                unit(&mut rng) * rng.gen_range(0.0..1.0),
            ),
            1.0 + rng.gen_range(-1e-2..1e-2),
        )
        .unwrap();
        let target = scene
            .trajectory
            .transformed(&gt.left, &gt.right, gt.scale)
            .unwrap();
        let kin: Vec<_> = scene
            .trajectory
            .sample_uniform(dt)
            .into_iter()
            .filter(|k| k.t <= 10.0 + 1e-9)
            .collect();
        let imu = ideal_imu_stream(&kin, &biases.sample_uniform(&kin), &GRAVITY);
        let induced = induced_biases(&gt, &scene, &biases);
        let tilde: Vec<_> = kin.iter().map(|k| induced.at(k.t)).collect();
        let k0 = target.kinematics(0.0).unwrap();
        let init = NavState {
            t: 0.0,
            pose: k0.pose(),
            velocity: k0.velocity,
        };
        let out = integrate_mechanization(&imu, &tilde, &GRAVITY, &init, dt).unwrap();
        for s in &out.states {
            worst = worst.max((s.pose.translation - target.pose(s.t).translation).norm());
        }
    }
    verdict(
        worst < 1e-6,
        format!("max position error {worst:.2e} m over 10 s (< 1e-6)"),
    )
}

fn bound_soundness() -> Verdict {
    let traj = make_calibration_trajectory(&CalibrationSpec::default(), &GRAVITY, 1).unwrap();
    let scene = Scene::build(traj, &[], &[], alignment(), GRAVITY).unwrap();
    let biases = BiasTrajectory::zero();
    let cfg = BoundsConfig::default();
    let ex = excitation_inputs(&scene.trajectory, &biases, &GRAVITY, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut inside = 0;
    for _ in 0..200 {
        let size = 10f64.powf(rng.gen_range(-6.0..-3.0));
        let gt = GaugeTransform::new(
            Pose::new(
                Rotation::exp(&(unit(&mut rng) * size * rng.gen_range(0.0..1.0))),
                unit(&mut rng) * size * rng.gen_range(0.0..1.0),
            ),
            Pose::new(
                Rotation::exp(&(unit(&mut rng) * size * rng.gen_range(0.0..1.0))),
                unit(&mut rng) * rng.gen_range(0.0..5.0),
            ),
            1.0 + size * rng.gen_range(-1.0..1.0),
        )
        .unwrap();
        // Constant true biases: the pair's drift is that of the induced biases.
        let eps = induced_biases(&gt, &scene, &biases).max_drift(
            0.0,
            scene.trajectory.duration,
            cfg.sample_step,
        );
        let report = bounds_from_excitation(&cfg.with_epsilon(eps), &ex).unwrap();
        inside += gauge_within_bounds(&gt, &report, &GRAVITY).inside as usize;
    }
    let rhs: Vec<[f64; 4]> = [1e-5, 1e-4, 1e-3]
        .iter()
        .map(|e| {
            bounds_from_excitation(&cfg.with_epsilon(*e), &ex)
                .unwrap()
                .rhs()
        })
        .collect();
    let ratios: Vec<f64> = rhs
        .windows(2)
        .flat_map(|w| (0..4).map(move |i| w[1][i] / w[0][i]))
        .collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    verdict(
        inside == 200 && lo >= 9.9 && hi <= 10.1,
        format!("{inside}/200 inside; ε-ratios in [{lo:.6}, {hi:.6}] (within [9.9, 10.1])"),
    )
}

fn constants_check() -> Verdict {
    let cfg = BoundsConfig {
        max_scale: 1.0,
        max_translation: 0.0,
        gravity_norm: 9.8,
        ..Default::default()
    };
    let k = excitation_constants(&cfg);
    let close = |a: f64, b: f64| (a - b).abs() <= 2.0 * f64::EPSILON * b;
    verdict(
        close(k.0, 32.4) && close(k.1, 38.4) && k.2 == 5.0,
        format!(
            "(k1, k2, k3) = ({}, {}, {}) vs (32.4, 38.4, 5) to 2 ulp",
            k.0, k.1, k.2
        ),
    )
}

fn excitation_functionals() -> Verdict {
    let sweep =
        SignalWindow::new(0.0, 1.0, vec![Vector3::x(), Vector3::y(), Vector3::z()]).unwrap();
    let m = excitation_min(&sweep, 4096, 50).unwrap().value;
    let gap = (m - 1.0 / 3f64.sqrt()).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..200 {
        let n = rng.gen_range(5..30);
        let values = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let f = SignalWindow::new(0.0, 0.1, values).unwrap();
        let rep = excitation_report(&f).unwrap();
        let r = random_rotation(&mut rng);
        let sup = |a: &Matrix3<f64>| f.values.iter().map(|v| (a * v).norm()).fold(0.0, f64::max);
        let (c1, c2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let a = Matrix3::identity() * c1 + r.matrix() * c2;
        violations += (sup(&a) < spectral_norm(&a) * rep.m_bar - 1e-12) as usize;
        let a = Matrix3::identity() - r.matrix();
        violations += (sup(&a) < spectral_norm(&a) * rep.m - 1e-12) as usize;
    }
    verdict(
        gap <= 1e-3 && violations == 0,
        format!("|m − 1/√3| = {gap:.2e} (≤ 1e-3); {violations} lemma violations in 200 instances"),
    )
}

fn singular_value_lemma() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    let mut zero_cases = 0;
    for i in 0..1000 {
        let s = random_rotation(&mut rng);
        let w = if i % 50 == 0 {
            Vector3::zeros()
        } else {
            Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0))
        };
        let sdot = s.matrix() * hat(&w);
        let a = if i % 4 == 0 {
            0.0
        } else {
            rng.gen_range(-3.0..3.0)
        };
        let sv = (a * s.matrix() + sdot).singular_values();
        if a != 0.0 {
            failures += (sv.min() < a.abs() - 1e-12) as usize;
        } else {
            zero_cases += 1;
            let rank = sv.iter().filter(|&&x| x > 1e-9).count();
            failures += (rank != 0 && rank != 2) as usize;
        }
    }
    verdict(
        failures == 0,
        format!("{failures} failures in 1000 instances ({zero_cases} with a = 0)"),
    )
}

fn montecarlo(cfg: &ExperimentConfig) -> AggregateStats {
    run_montecarlo(cfg).unwrap()
}

fn baseline() -> ExperimentConfig {
    ExperimentConfig {
        seed: 7,
        trials: 50,
        ..Default::default()
    }
}

fn drift(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.bias = drift_bias_spec(&c.noise, c.trajectory.duration, 5.0);
    c
}

fn fmt6(v: &[f64; 6]) -> String {
    let s: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", s.join(", "))
}

fn constant_bias_convergence(stats: &AggregateStats) -> Verdict {
    let last = stats.std.last().copied().unwrap_or([f64::NAN; 6]);
    let prior = stats.prior_std[0];
    let std_ok = (0..3).all(|i| last[i] <= 0.1 * prior);
    let mse = &stats.mse_translation;
    let from = mse.len() / 5;
    let steps = mse.len() - from - 1;
    let up = (from + 1..mse.len())
        .filter(|&k| mse[k] > mse[k - 1])
        .count();
    let frac = up as f64 / steps as f64;
    verdict(
        std_ok && frac <= 0.05 && stats.diverged == 0,
        format!(
            "final translation std [{:.2e}, {:.2e}, {:.2e}] m vs 10% of prior {:.1e}; \
             MSE increases on {up}/{steps} steps ({:.1}%, allowed 5%); {} diverged",
            last[0],
            last[1],
            last[2],
            0.1 * prior,
            100.0 * frac,
            stats.diverged
        ),
    )
}

fn drift_separation(base: &AggregateStats, drifted: &AggregateStats) -> Verdict {
    let ratios: [f64; 6] =
        std::array::from_fn(|i| drifted.converged_std[i] / base.converged_std[i]);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        min >= 2.0,
        format!(
            "drift/constant converged-std ratios {} (min {min:.2}, need ≥ 2)",
            fmt6(&ratios)
        ),
    )
}

fn orderings(
    drifted: &AggregateStats,
    gentle: &AggregateStats,
    inflated: &AggregateStats,
) -> Verdict {
    let larger = |s: &AggregateStats| {
        (0..6)
            .filter(|&i| s.converged_std[i] > drifted.converged_std[i])
            .count()
    };
    let (g, f) = (larger(gentle), larger(inflated));
    verdict(
        g == 6 && f == 6,
        format!(
            "gentler motion larger on {g}/6 axes, inflated ε on {f}/6; baseline {}, gentle {}, inflated {}",
            fmt6(&drifted.converged_std),
            fmt6(&gentle.converged_std),
            fmt6(&inflated.converged_std)
        ),
    )
}

fn gravity_initialization() -> Verdict {
    let report = run_gravity_init_experiment(&ExperimentConfig {
        seed: 10,
        ..Default::default()
    })
    .unwrap();
    let worst = report
        .rows
        .iter()
        .map(|r| r.max_normalized_error)
        .fold(0.0, f64::max);
    let ratios_ok = report.doubling_ratios.len() == 2
        && report
            .doubling_ratios
            .iter()
            .all(|r| (1.9..=2.1).contains(r));
    let d1 = Vector3::new(1.0, 0.2, 0.0);
    let d2 = Vector3::new(-0.3, 1.0, 0.0);
    let tilted = Rotation::exp(&Vector3::new(0.0, 1e-3, 0.0)) * d1;
    let flag_ok = two_direction_degenerate(&d1, &d2, &GRAVITY)
        && !two_direction_degenerate(&tilted, &d2, &GRAVITY);
    let ratios: Vec<String> = report
        .doubling_ratios
        .iter()
        .map(|r| format!("{r:.3}"))
        .collect();
    verdict(
        worst < 3.0 && ratios_ok && flag_ok,
        format!(
            "max |estimate − prediction|/σ {worst:.2} (< 3); doubling ratios [{}]; degeneracy flag flips: {flag_ok}",
            ratios.join(", ")
        ),
    )
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig {
        seed: 11,
        trials: 3,
        ..Default::default()
    };
    let mut c = cfg.clone();
    c.trajectory.duration = 5.0;
    let a = to_json(&run_montecarlo(&c).unwrap()).unwrap();
    let b = to_json(&run_montecarlo(&c).unwrap()).unwrap();
    let sa = run_bounds_sweep(&cfg).unwrap().to_csv();
    let sb = run_bounds_sweep(&cfg).unwrap().to_csv();
    verdict(
        a == b && sa == sb,
        format!(
            "Monte Carlo JSON ({} bytes) identical: {}; sweep CSV identical: {}",
            a.len(),
            a == b,
            sa == sb
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict, f64)> = vec![];
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n:2} [{name}]: {} ({}; {secs:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v, secs));
    };
    record(
        1,
        "gauge indistinguishability",
        &mut gauge_indistinguishability,
    );
    record(
        2,
        "induced-bias reproduction",
        &mut induced_bias_reproduction,
    );
    record(3, "bound soundness and scaling", &mut bound_soundness);
    record(4, "excitation constants", &mut constants_check);
    record(5, "excitation functionals", &mut excitation_functionals);
    record(6, "singular-value lemma", &mut singular_value_lemma);

    let base = baseline();
    let t = Instant::now();
    let constant = montecarlo(&base);
    let drifted = montecarlo(&drift(&base));
    let mut gentle_cfg = drift(&base);
    gentle_cfg.trajectory.wobble = gentle_cfg.trajectory.wobble.gentler(4.0);
    let gentle = montecarlo(&gentle_cfg);
    let mut inflated_cfg = drift(&base);
    inflated_cfg.bias.epsilon *= 4.0;
    let inflated = montecarlo(&inflated_cfg);
    println!(
        "(four 50-trial Monte Carlo runs took {:.1} s)",
        t.elapsed().as_secs_f64()
    );
    record(7, "constant-bias convergence", &mut || {
        constant_bias_convergence(&constant)
    });
    record(8, "drifting-bias spread", &mut || {
        drift_separation(&constant, &drifted)
    });
    record(9, "gentle and inflated orderings", &mut || {
        orderings(&drifted, &gentle, &inflated)
    });
    record(10, "gravity initialization", &mut gravity_initialization);
    record(11, "determinism", &mut determinism);

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
