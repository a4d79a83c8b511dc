mod common;

use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vi_sensitivity::geometry::{random_rotation, Pose, Rotation};
use vi_sensitivity::indistinguishability::{
    apply_full_gauge, apply_zero_input_gauge, induced_biases, measurement_discrepancy,
    GaugeTransform, ZeroInputGauge,
};
use vi_sensitivity::sensors::{ideal_imu_stream, BiasTrajectory};
use vi_sensitivity::trajectory::{integrate_mechanization, NavState};

fn small_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation {
    let axis = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
    Rotation::exp(&(axis * rng.gen_range(0.0..max_angle)))
}

fn small_vector(rng: &mut ChaCha8Rng, max_norm: f64) -> Vector3<f64> {
    let axis = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
    axis * rng.gen_range(0.0..max_norm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn zero_input_gauges_preserve_every_measurement(
        seed in 0u64..1_000_000,
        theta in -std::f64::consts::PI..std::f64::consts::PI,
        dir in prop::array::uniform3(-1.0f64..1.0),
        norm in 0.0f64..5.0,
    ) {
        let scene = random_scene(seed);
        let d = Vector3::from(dir);
        let translation = if d.norm() > 1e-9 { d.normalize() * norm } else { Vector3::zeros() };
        let zg = ZeroInputGauge { theta, translation };
        let moved = apply_zero_input_gauge(&scene, &zg).unwrap();
        let times = camera_times(scene.trajectory.duration);
        let gap = measurement_discrepancy(&scene, &moved, &times).unwrap();
        prop_assert!(gap < 1e-9, "discrepancy {gap:e}");
        prop_assert_eq!(moved.alignment, scene.alignment);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn full_gauges_with_group_frames_preserve_every_measurement(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(seed);
        let mut gt = GaugeTransform::new(
            Pose::new(small_rotation(&mut rng, 0.2), small_vector(&mut rng, 0.3)),
            Pose::new(random_rotation(&mut rng), small_vector(&mut rng, 5.0)),
            rng.gen_range(0.5..2.0),
        )
        .unwrap();
        // A perturbed frame for the second group.
        let g1 = scene.groups[1].reference;
        gt.group_frames = vec![None, Some(Pose::new(
            g1.rotation * small_rotation(&mut rng, 0.05),
            g1.translation + small_vector(&mut rng, 0.05),
        ))];
        let moved = apply_full_gauge(&scene, &gt).unwrap();
        let times = camera_times(scene.trajectory.duration);
        let gap = measurement_discrepancy(&scene, &moved, &times).unwrap();
        prop_assert!(gap < 1e-9, "discrepancy {gap:e}");
    }
}

#[test]
fn a_moved_point_is_not_indistinguishable() {
    let scene = random_scene(7);
    let mut other = scene.clone();
    other.groups[0].features[0].depth *= 1.1;
    let gap =
        measurement_discrepancy(&scene, &other, &camera_times(scene.trajectory.duration)).unwrap();
    assert!(gap > 1e-4);
}

#[test]
fn induced_biases_reproduce_the_transformed_trajectory() {
    let dt = 1e-3;
    let biases = BiasTrajectory::constant(
        Vector3::new(3e-3, -2e-3, 1e-3),
        Vector3::new(0.05, -0.02, 0.03),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let scene = random_scene(100 + i);
        let gt = GaugeTransform::new(
            Pose::new(small_rotation(&mut rng, 1e-2), small_vector(&mut rng, 1e-2)),
            Pose::new(small_rotation(&mut rng, 1e-2), small_vector(&mut rng, 1.0)),
            1.0 + rng.gen_range(-1e-2..1e-2),
        )
        .unwrap();
        let horizon = scene
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
        let k0 = horizon.kinematics(0.0).unwrap();
        let init = NavState {
            t: 0.0,
            pose: k0.pose(),
            velocity: k0.velocity,
        };
        let out = integrate_mechanization(&imu, &tilde, &GRAVITY, &init, dt).unwrap();
        for s in &out.states {
            let truth = horizon.pose(s.t);
            worst = worst.max((s.pose.translation - truth.translation).norm());
        }
    }
    assert!(worst < 1e-6, "worst position error {worst:e}");
}
