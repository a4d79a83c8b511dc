//! IMU and bearing measurement synthesis, bias trajectories and scenes.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::trajectory::{AnalyticTrajectory, Kinematics};

/// Camera depth below which a feature is treated as not visible (m).
pub const NEAR_PLANE: f64 = 0.01;

/// Default noise levels: gyro (rad/s), accel (m/s²), image (normalized units).
pub const DEFAULT_GYRO_NOISE: f64 = 1e-3;
pub const DEFAULT_ACCEL_NOISE: f64 = 1e-2;
pub const DEFAULT_PIXEL_NOISE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// ω_imu (rad/s).
    pub gyro: Vector3<f64>,
    /// α_imu (m/s²).
    pub accel: Vector3<f64>,
}

/// Gyro and accelerometer biases at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasSample {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Vector3<f64> {
    if std == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// `ω + ω_b + n`.
pub fn measure_gyro<R: Rng + ?Sized>(
    kin: &Kinematics,
    bias: &Vector3<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Vector3<f64> {
    kin.angular_velocity + bias + gaussian3(rng, noise_std)
}

/// `Rᵀ(α − γ) + α_b + n`.
pub fn measure_accel<R: Rng + ?Sized>(
    kin: &Kinematics,
    bias: &Vector3<f64>,
    gravity: &Vector3<f64>,
    noise_std: f64,
    rng: &mut R,
) -> Vector3<f64> {
    kin.rotation.matrix().transpose() * (kin.acceleration - gravity)
        + bias
        + gaussian3(rng, noise_std)
}

/// Noise-free IMU reading.
pub fn ideal_imu(kin: &Kinematics, bias: &BiasSample, gravity: &Vector3<f64>) -> ImuSample {
    ImuSample {
        t: kin.t,
        gyro: kin.angular_velocity + bias.gyro,
        accel: kin.rotation.matrix().transpose() * (kin.acceleration - gravity) + bias.accel,
    }
}

pub fn ideal_imu_stream(
    kin: &[Kinematics],
    biases: &[BiasSample],
    gravity: &Vector3<f64>,
) -> Vec<ImuSample> {
    kin.iter()
        .zip(biases)
        .map(|(k, b)| ideal_imu(k, b, gravity))
        .collect()
}

/// Noisy IMU stream.
pub fn imu_stream<R: Rng + ?Sized>(
    kin: &[Kinematics],
    biases: &[BiasSample],
    gravity: &Vector3<f64>,
    gyro_noise: f64,
    accel_noise: f64,
    rng: &mut R,
) -> Vec<ImuSample> {
    kin.iter()
        .zip(biases)
        .map(|(k, b)| ImuSample {
            t: k.t,
            gyro: measure_gyro(k, &b.gyro, gyro_noise, rng),
            accel: measure_accel(k, &b.accel, gravity, accel_noise, rng),
        })
        .collect()
}

/// IMU signals and the derivatives consumed by the excitation bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSignals {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub gyro_dot: Vector3<f64>,
    pub gyro_ddot: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub accel_dot: Vector3<f64>,
    /// ω_imu − ω_b.
    pub gyro_unbiased: Vector3<f64>,
}

/// Noise-free IMU signals and their time derivatives.
pub fn imu_signals(kin: &Kinematics, bias: &BiasJet, gravity: &Vector3<f64>) -> ImuSignals {
    let rt = kin.rotation.matrix().transpose();
    let spec = kin.acceleration - gravity;
    ImuSignals {
        t: kin.t,
        gyro: kin.angular_velocity + bias.gyro[0],
        gyro_dot: kin.angular_acceleration + bias.gyro[1],
        gyro_ddot: kin.angular_jerk + bias.gyro[2],
        accel: rt * spec + bias.accel[0],
        accel_dot: kin.r_dot.transpose() * spec + rt * kin.jerk + bias.accel[1],
        gyro_unbiased: kin.angular_velocity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasKind {
    Constant,
    SinusoidalBounded,
    /// Integrated white noise. Violates any deterministic drift bound.
    RandomWalk,
}

/// Parameters of [`make_bias_trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSpec {
    pub kind: BiasKind,
    /// Drift bound ε; for random walks, the white-noise density of the rate.
    pub epsilon: f64,
    /// Per-axis amplitude of the gyro bias wander (rad/s).
    pub gyro_amplitude: f64,
    /// Per-axis amplitude of the accel bias wander (m/s²).
    pub accel_amplitude: f64,
    /// Standard deviation of the random constant part, gyro (rad/s).
    pub gyro_offset_std: f64,
    /// Standard deviation of the random constant part, accel (m/s²).
    pub accel_offset_std: f64,
    /// Lowest admissible wander frequency (Hz).
    #[serde(default)]
    pub min_frequency: f64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            kind: BiasKind::Constant,
            epsilon: 0.0,
            gyro_amplitude: 0.0,
            accel_amplitude: 0.0,
            gyro_offset_std: 5e-3,
            accel_offset_std: 5e-2,
            min_frequency: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    pub phase: f64,
}

/// One bias channel (gyro or accel): offset plus either per-axis sinusoids
/// or a sampled random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasChannel {
    pub offset: Vector3<f64>,
    pub sines: Vec<[SineTerm; 3]>,
    pub walk_dt: f64,
    pub walk: Vec<Vector3<f64>>,
}

impl BiasChannel {
    fn constant(offset: Vector3<f64>) -> Self {
        BiasChannel {
            offset,
            sines: vec![],
            walk_dt: 0.0,
            walk: vec![],
        }
    }

    /// Value, first and second derivative at `t`.
    pub fn jet(&self, t: f64) -> [Vector3<f64>; 3] {
        let mut out = [self.offset, Vector3::zeros(), Vector3::zeros()];
        for terms in &self.sines {
            for (i, s) in terms.iter().enumerate() {
                let w = std::f64::consts::TAU * s.frequency;
                let (sn, cs) = (w * t + s.phase).sin_cos();
                out[0][i] += s.amplitude * sn;
                out[1][i] += s.amplitude * w * cs;
                out[2][i] -= s.amplitude * w * w * sn;
            }
        }
        if !self.walk.is_empty() {
            let n = self.walk.len();
            let x = (t / self.walk_dt).max(0.0);
            let k = (x.floor() as usize).min(n.saturating_sub(2));
            if n == 1 {
                out[0] += self.walk[0];
            } else {
                let f = (x - k as f64).min(1.0);
                let slope = (self.walk[k + 1] - self.walk[k]) / self.walk_dt;
                out[0] += self.walk[k] + f * (self.walk[k + 1] - self.walk[k]);
                out[1] += slope;
            }
        }
        out
    }
}

/// Value and first two derivatives of both biases at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasJet {
    pub gyro: [Vector3<f64>; 3],
    pub accel: [Vector3<f64>; 3],
}

impl BiasJet {
    pub fn sample(&self) -> BiasSample {
        BiasSample {
            gyro: self.gyro[0],
            accel: self.accel[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTrajectory {
    pub kind: BiasKind,
    pub epsilon: f64,
    pub gyro: BiasChannel,
    pub accel: BiasChannel,
}

impl BiasTrajectory {
    pub fn constant(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        BiasTrajectory {
            kind: BiasKind::Constant,
            epsilon: 0.0,
            gyro: BiasChannel::constant(gyro),
            accel: BiasChannel::constant(accel),
        }
    }

    pub fn zero() -> Self {
        Self::constant(Vector3::zeros(), Vector3::zeros())
    }

    pub fn at(&self, t: f64) -> BiasSample {
        BiasSample {
            gyro: self.gyro.jet(t)[0],
            accel: self.accel.jet(t)[0],
        }
    }

    pub fn jet(&self, t: f64) -> BiasJet {
        BiasJet {
            gyro: self.gyro.jet(t),
            accel: self.accel.jet(t),
        }
    }

    pub fn sample_uniform(&self, kin: &[Kinematics]) -> Vec<BiasSample> {
        kin.iter().map(|k| self.at(k.t)).collect()
    }

    /// Whether this kind is meant to respect the drift bound.
    pub fn claims_drift_bound(&self) -> bool {
        self.kind != BiasKind::RandomWalk
    }

    /// Largest of `‖ω̇_b‖`, `‖α̇_b‖`, `‖ω̈_b‖` on the grid `0, step, …, duration`.
    pub fn max_drift(&self, duration: f64, step: f64) -> f64 {
        let n = (duration / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|k| {
                let j = self.jet(k as f64 * step);
                j.gyro[1]
                    .norm()
                    .max(j.accel[1].norm())
                    .max(j.gyro[2].norm())
            })
            .fold(0.0, f64::max)
    }
}

/// Highest frequency (Hz) for which `a·sin(2πft)` on each of three axes keeps
/// the vector rate and acceleration norms below `epsilon`.
pub fn max_wander_frequency(epsilon: f64, amplitude: f64) -> f64 {
    if amplitude <= 0.0 {
        return f64::INFINITY;
    }
    let per_axis = epsilon / 3f64.sqrt();
    let tau = std::f64::consts::TAU;
    (per_axis / (tau * amplitude)).min((per_axis / amplitude).sqrt() / tau)
}

/// Random bias trajectory of the requested kind.
pub fn make_bias_trajectory(spec: &BiasSpec, duration: f64, seed: u64) -> Result<BiasTrajectory> {
    let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
    if !(finite_nonneg(spec.epsilon)
        && finite_nonneg(spec.gyro_amplitude)
        && finite_nonneg(spec.accel_amplitude)
        && finite_nonneg(spec.gyro_offset_std)
        && finite_nonneg(spec.accel_offset_std)
        && finite_nonneg(spec.min_frequency))
    {
        return Err(Error::InvalidBias(
            "parameters must be finite and nonnegative".into(),
        ));
    }
    if !(duration > 0.0) {
        return Err(Error::InvalidBias("duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gyro_offset = gaussian3(&mut rng, spec.gyro_offset_std);
    let accel_offset = gaussian3(&mut rng, spec.accel_offset_std);
    let mut out = BiasTrajectory {
        kind: spec.kind,
        epsilon: spec.epsilon,
        gyro: BiasChannel::constant(gyro_offset),
        accel: BiasChannel::constant(accel_offset),
    };
    match spec.kind {
        BiasKind::Constant => {}
        BiasKind::SinusoidalBounded => {
            if spec.epsilon == 0.0 {
                return Ok(out);
            }
            for (channel, amplitude) in [
                (&mut out.gyro, spec.gyro_amplitude),
                (&mut out.accel, spec.accel_amplitude),
            ] {
                if amplitude == 0.0 {
                    continue;
                }
                let fmax = max_wander_frequency(spec.epsilon, amplitude);
                if fmax < spec.min_frequency {
                    return Err(Error::InvalidBias(format!(
                        "amplitude {amplitude} admits no frequency above {} Hz at epsilon {}",
                        spec.min_frequency, spec.epsilon
                    )));
                }
                let lo = spec.min_frequency.max(0.5 * fmax);
                let terms = std::array::from_fn(|_| SineTerm {
                    amplitude,
                    frequency: if fmax > lo {
                        rng.gen_range(lo..=fmax)
                    } else {
                        fmax
                    },
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                });
                channel.sines.push(terms);
            }
        }
        BiasKind::RandomWalk => {
            let dt = 5e-3;
            let n = (duration / dt).ceil() as usize + 2;
            for channel in [&mut out.gyro, &mut out.accel] {
                let mut x = Vector3::zeros();
                channel.walk_dt = dt;
                channel.walk = (0..n)
                    .map(|_| {
                        let v = x;
                        x += gaussian3(&mut rng, spec.epsilon * dt.sqrt());
                        v
                    })
                    .collect();
            }
        }
    }
    Ok(out)
}

/// A landmark stored relative to its group: camera-frame bearing `[y; 1]`
/// and depth at the group's birth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: usize,
    pub bearing: Vector3<f64>,
    pub depth: f64,
}

impl Feature {
    /// Camera-frame coordinates at birth.
    pub fn camera_point(&self) -> Vector3<f64> {
        self.bearing * self.depth
    }
}

/// Landmarks sharing a reference pose (the body pose at the group's birth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub id: usize,
    pub birth_time: f64,
    pub reference: Pose,
    pub features: Vec<Feature>,
}

/// A simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub trajectory: AnalyticTrajectory,
    pub groups: Vec<FeatureGroup>,
    /// Camera-from-body alignment `g_cb`.
    pub alignment: Pose,
    pub gravity: Vector3<f64>,
}

impl Scene {
    /// Builds a scene whose groups are born at the given times with the listed
    /// point indices. Bearings and depths are computed from the true body pose
    /// at birth.
    pub fn build(
        trajectory: AnalyticTrajectory,
        points: &[Vector3<f64>],
        groups: &[(f64, Vec<usize>)],
        alignment: Pose,
        gravity: Vector3<f64>,
    ) -> Result<Scene> {
        let mut out = Vec::with_capacity(groups.len());
        for (j, (birth, members)) in groups.iter().enumerate() {
            let reference = trajectory.kinematics(*birth)?.pose();
            let to_cam = alignment * reference.inverse();
            let mut features = Vec::with_capacity(members.len());
            for &i in members {
                let p = points.get(i).ok_or_else(|| {
                    Error::InvalidTrajectory(format!("group {j} references missing point {i}"))
                })?;
                let xc = to_cam.act(p);
                if xc.z <= NEAR_PLANE {
                    return Err(Error::InvalidTrajectory(format!(
                        "point {i} is behind the camera at the birth of group {j}"
                    )));
                }
                features.push(Feature {
                    id: i,
                    bearing: xc / xc.z,
                    depth: xc.z,
                });
            }
            out.push(FeatureGroup {
                id: j,
                birth_time: *birth,
                reference,
                features,
            });
        }
        Ok(Scene {
            trajectory,
            groups: out,
            alignment,
            gravity,
        })
    }

    /// Spatial coordinates `g_i g_cb⁻¹ (ȳ Z)` of every feature, by group.
    pub fn spatial_points(&self) -> Vec<(usize, Vector3<f64>)> {
        let inv = self.alignment.inverse();
        self.groups
            .iter()
            .flat_map(|g| {
                let h = g.reference * inv;
                g.features
                    .iter()
                    .map(move |f| (f.id, h.act(&f.camera_point())))
            })
            .collect()
    }

    /// Noise-free projections at time `t`.
    pub fn project(&self, t: f64) -> Vec<Observation> {
        let body = self.trajectory.pose(t);
        project_features(&body, &self.alignment, &self.groups, 0.0, &mut NoRng)
    }
}

/// One bearing measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub feature: usize,
    pub group: usize,
    pub y: Vector2<f64>,
    pub visible: bool,
}

/// Canonical perspective projection `[X1/X3, X2/X3]`.
pub fn pi(x: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(x.x / x.z, x.y / x.z)
}

/// `y = π(g_cb g⁻¹ g_i g_cb⁻¹ ȳZ) + n` for every feature of every group.
pub fn project_features<R: Rng + ?Sized>(
    body_pose: &Pose,
    alignment: &Pose,
    groups: &[FeatureGroup],
    noise_std: f64,
    rng: &mut R,
) -> Vec<Observation> {
    let to_cam = *alignment * body_pose.inverse();
    let inv = alignment.inverse();
    let mut out = Vec::new();
    for g in groups {
        let h = to_cam * g.reference * inv;
        for f in &g.features {
            let xc = h.act(&f.camera_point());
            let visible = xc.z > NEAR_PLANE;
            let mut y = if visible { pi(&xc) } else { Vector2::zeros() };
            if visible && noise_std > 0.0 {
                let n = gaussian3(rng, noise_std);
                y += Vector2::new(n.x, n.y);
            }
            out.push(Observation {
                feature: f.id,
                group: g.id,
                y,
                visible,
            });
        }
    }
    out
}

/// Placeholder RNG for noise-free projection; never sampled.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("noise-free projection does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("noise-free projection does not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("noise-free projection does not sample")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("noise-free projection does not sample")
    }
}

/// Axis-aligned box `center ± half_extent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Region {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl Default for Region {
    fn default() -> Self {
        Region {
            center: [0.0; 3],
            half_extent: [1.5; 3],
        }
    }
}

/// Smallest singular value of the centered point matrix.
pub fn coplanarity(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    if n < 4 {
        return 0.0;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / n as f64;
    let m = DMatrix::from_fn(n, 3, |i, j| points[i][j] - mean[j]);
    m.singular_values().min()
}

/// `n ≥ 4` i.i.d. uniform points in `region`, redrawn until they are not coplanar.
pub fn spawn_point_cloud(n: usize, region: &Region, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if n < 4 {
        return Err(Error::DegenerateRegion(format!(
            "need at least 4 points, got {n}"
        )));
    }
    let h = region.half_extent;
    if h.iter().any(|x| !(x.is_finite() && *x > 0.0))
        || region.center.iter().any(|c| !c.is_finite())
    {
        return Err(Error::DegenerateRegion(format!(
            "half extents {h:?} must be positive"
        )));
    }
    let extent = 2.0 * h.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::from_fn(|i, _| region.center[i] + rng.gen_range(-h[i]..h[i])))
            .collect();
        if coplanarity(&pts) > 1e-6 * extent {
            return Ok(pts);
        }
    }
    Err(Error::DegenerateRegion(
        "could not draw a non-coplanar set".into(),
    ))
}

/// Rejects three points that are coplanar with `origin` (linearly dependent
/// directions), which cannot anchor a group's orientation.
pub fn check_anchor_triplet(points: &[Vector3<f64>; 3], origin: &Vector3<f64>) -> Result<()> {
    let m = Matrix3::from_columns(&[
        (points[0] - origin).normalize(),
        (points[1] - origin).normalize(),
        (points[2] - origin).normalize(),
    ]);
    let s = m.singular_values().min();
    if s > 1e-6 {
        Ok(())
    } else {
        Err(Error::Coplanar(s))
    }
}

/// Camera frame times: every `stride`-th IMU sample.
pub fn camera_indices(n_imu: usize, stride: usize) -> Vec<usize> {
    (0..n_imu).step_by(stride.max(1)).collect()
}
