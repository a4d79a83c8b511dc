#![allow(dead_code)]

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vi_sensitivity::estimator::{
    filter_init, imu_intervals, Filter, FilterConfig, Frame, GroupEvents, InitialGuess,
    Measurement, UpdateStats,
};
use vi_sensitivity::experiment::{default_circle, ExperimentConfig};
use vi_sensitivity::geometry::{Pose, Rotation};
use vi_sensitivity::sensors::{imu_stream, pi, spawn_point_cloud, BiasTrajectory, ImuSample};
use vi_sensitivity::trajectory::{make_circular_trajectory, AnalyticTrajectory, Kinematics};

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, 9.8);
pub const DT: f64 = 5e-3;
pub const STRIDE: usize = 10;

pub fn alignment() -> Pose {
    Pose::new(
        Rotation::exp(&Vector3::new(0.02, -0.01, 0.03)),
        Vector3::new(0.05, 0.02, -0.03),
    )
}

pub fn circle(duration: f64, seed: u64) -> AnalyticTrajectory {
    let mut spec = default_circle();
    spec.duration = duration;
    make_circular_trajectory(&spec, seed).unwrap()
}

/// A world point observed during `[start, end)`.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub point: Vector3<f64>,
    pub start: f64,
    pub end: f64,
}

/// Points in the default scene region, observed during `[start, end)`.
pub fn landmarks(n: usize, seed: u64, start: f64, end: f64) -> Vec<Landmark> {
    let region = ExperimentConfig::default().scene.region;
    spawn_point_cloud(n, &region, seed)
        .unwrap()
        .into_iter()
        .map(|point| Landmark { point, start, end })
        .collect()
}

pub struct Sim {
    pub kin: Vec<Kinematics>,
    pub imu: Vec<ImuSample>,
    /// One frame every `STRIDE` IMU samples; feature ids are landmark indices.
    pub frames: Vec<Frame>,
}

pub fn simulate(
    traj: &AnalyticTrajectory,
    marks: &[Landmark],
    alignment: &Pose,
    biases: &BiasTrajectory,
    imu_noise: (f64, f64),
    pixel_noise: f64,
    seed: u64,
) -> Sim {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kin = traj.sample_uniform(DT);
    let b = biases.sample_uniform(&kin);
    let imu = imu_stream(&kin, &b, &GRAVITY, imu_noise.0, imu_noise.1, &mut rng);
    let normal = Normal::new(0.0, pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
    let frames = kin
        .iter()
        .step_by(STRIDE)
        .map(|k| {
            let to_cam = *alignment * k.pose().inverse();
            let measurements = marks
                .iter()
                .enumerate()
                .filter(|(_, m)| m.start <= k.t && k.t < m.end)
                .filter_map(|(id, m)| {
                    let xc = to_cam.act(&m.point);
                    (xc.z > 0.01).then(|| {
                        let mut y = pi(&xc);
                        if pixel_noise > 0.0 {
                            y.x += normal.sample(&mut rng);
                            y.y += normal.sample(&mut rng);
                        }
                        Measurement { feature: id, y }
                    })
                })
                .collect();
            Frame {
                t: k.t,
                measurements,
            }
        })
        .collect();
    Sim { kin, imu, frames }
}

/// Initial guess equal to the truth at the first sample.
pub fn true_guess(sim: &Sim, alignment: Pose, biases: &BiasTrajectory) -> InitialGuess {
    let k0 = &sim.kin[0];
    let b = biases.at(k0.t);
    InitialGuess {
        attitude: Some(k0.rotation),
        position: k0.translation,
        velocity: k0.velocity,
        gyro_bias: b.gyro,
        accel_bias: b.accel,
        alignment,
    }
}

/// Runs the filter over a simulation, calling `inspect` after every frame.
pub fn run(
    cfg: &FilterConfig,
    sim: &Sim,
    guess: &InitialGuess,
    mut inspect: impl FnMut(&Filter, &GroupEvents, &UpdateStats),
) -> Filter {
    let n_init = cfg.min_init_samples;
    let state = filter_init(cfg, &sim.imu[..n_init], &GRAVITY, guess).unwrap();
    let mut filter = Filter::new(*cfg, GRAVITY, state);
    let intervals = imu_intervals(&sim.imu);
    for k in (n_init - 1)..sim.imu.len() {
        if k % STRIDE == 0 {
            let (ev, st) = filter.process_frame(&sim.frames[k / STRIDE]);
            inspect(&filter, &ev, &st);
        }
        if let Some(iv) = intervals.get(k) {
            filter.predict(iv).unwrap();
        }
    }
    filter
}

/// Random orbit with two feature groups (born at 0 s and 5 s), each made of
/// the points in front of the camera at birth.
pub fn random_scene(seed: u64) -> vi_sensitivity::sensors::Scene {
    let traj = circle(12.0, seed);
    let points: Vec<Vector3<f64>> = landmarks(40, seed + 1000, 0.0, 0.0)
        .into_iter()
        .map(|l| l.point)
        .collect();
    let align = alignment();
    let in_front = |t: f64| -> Vec<usize> {
        let to_cam = align * traj.pose(t).inverse();
        (0..points.len())
            .filter(|&i| to_cam.act(&points[i]).z > 0.5)
            .collect()
    };
    let groups = [(0.0, in_front(0.0)), (5.0, in_front(5.0))];
    vi_sensitivity::sensors::Scene::build(traj, &points, &groups, align, GRAVITY).unwrap()
}

/// Camera times every 0.05 s over the scene's duration.
pub fn camera_times(duration: f64) -> Vec<f64> {
    let n = (duration / 0.05).floor() as usize;
    (0..=n).map(|k| k as f64 * 0.05).collect()
}
