//! Experiment configuration and orchestration: Monte Carlo alignment
//! studies, bound sweeps, gauge checks and the gravity-initialization study.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    bounds_from_excitation, excitation_inputs, gauge_within_bounds, BoundsConfig, BoundsReport,
    Membership,
};
use crate::error::{Error, Result};
use crate::estimator::{
    filter_init, imu_intervals, Filter, FilterConfig, Frame, InitialGuess, Measurement,
    ReferencePin, UpdateStats,
};
use crate::geometry::{Pose, Rotation};
use crate::indistinguishability::{
    apply_full_gauge, measurement_discrepancy, GaugeTransform, ZeroInputGauge,
};
use crate::sensors::{
    imu_stream, make_bias_trajectory, project_features, spawn_point_cloud, BiasKind, BiasSpec,
    BiasTrajectory, Region, Scene, DEFAULT_ACCEL_NOISE, DEFAULT_GYRO_NOISE, DEFAULT_PIXEL_NOISE,
};
use crate::trajectory::{
    make_calibration_trajectory, make_circular_trajectory, AnalyticTrajectory, CalibrationSpec,
    CircularSpec,
};

/// Version of the configuration and report schemas.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Montecarlo,
    BoundsSweep,
    GaugeCheck,
    GravityInit,
}

/// Sensor noise levels (per-sample standard deviations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// rad/s
    pub gyro: f64,
    /// m/s²
    pub accel: f64,
    /// normalized image units
    pub pixel: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gyro: DEFAULT_GYRO_NOISE,
            accel: DEFAULT_ACCEL_NOISE,
            pixel: DEFAULT_PIXEL_NOISE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// IMU rate (Hz).
    pub imu_rate_hz: f64,
    /// IMU samples per camera frame.
    pub camera_stride: usize,
    /// Gravity magnitude (m/s²).
    pub gravity: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            imu_rate_hz: 200.0,
            camera_stride: 10,
            gravity: 9.8,
        }
    }
}

impl SensorConfig {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.imu_rate_hz
    }
}

/// A pose written as a rotation vector (rad) and a translation (m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSpec {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseSpec {
    pub fn to_pose(&self) -> Pose {
        Pose::new(
            Rotation::exp(&Vector3::from(self.rotation)),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub points: usize,
    pub region: Region,
    /// True camera-from-body alignment.
    pub alignment: PoseSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            points: 20,
            region: Region::default(),
            alignment: PoseSpec {
                rotation: [0.02, -0.01, 0.03],
                translation: [0.05, 0.02, -0.03],
            },
        }
    }
}

/// Grid for [`run_bounds_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    /// Excitation levels as divisors of the calibration motion (1 = nominal).
    pub gentleness: Vec<f64>,
    pub calibration: CalibrationSpec,
    pub bounds: BoundsConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            epsilons: vec![0.0, 1e-5, 1e-4, 1e-3],
            gentleness: vec![1.0, 4.0],
            calibration: CalibrationSpec::default(),
            bounds: BoundsConfig::default(),
        }
    }
}

/// Gauges for [`run_gauge_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaugeCheckConfig {
    pub zero_input: Vec<ZeroInputSpec>,
    pub full: Vec<FullGaugeSpec>,
    pub bounds: BoundsConfig,
    pub calibration: CalibrationSpec,
}

impl Default for GaugeCheckConfig {
    fn default() -> Self {
        GaugeCheckConfig {
            zero_input: vec![ZeroInputSpec {
                theta: 1.0,
                translation: [1.0, -2.0, 0.5],
            }],
            full: vec![
                FullGaugeSpec {
                    right: PoseSpec {
                        rotation: [1e-3, 0.0, 0.0],
                        translation: [0.5, 0.0, 0.0],
                    },
                    left: PoseSpec {
                        rotation: [0.0, 0.0, 0.3],
                        translation: [1.0, 0.0, 0.0],
                    },
                    scale: 1.0 + 1e-3,
                },
                FullGaugeSpec {
                    right: PoseSpec {
                        rotation: [0.0; 3],
                        translation: [60.0, 0.0, 0.0],
                    },
                    ..Default::default()
                },
            ],
            bounds: BoundsConfig {
                epsilon: 1e-2,
                ..Default::default()
            },
            calibration: CalibrationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroInputSpec {
    /// rad
    pub theta: f64,
    /// m
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullGaugeSpec {
    pub right: PoseSpec,
    pub left: PoseSpec,
    pub scale: f64,
}

impl Default for FullGaugeSpec {
    fn default() -> Self {
        FullGaugeSpec {
            right: PoseSpec::default(),
            left: PoseSpec::default(),
            scale: 1.0,
        }
    }
}

impl FullGaugeSpec {
    pub fn to_transform(&self) -> Result<GaugeTransform> {
        GaugeTransform::new(self.right.to_pose(), self.left.to_pose(), self.scale)
    }
}

/// Parameters of [`run_gravity_init_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GravityInitConfig {
    /// Misalignment angles (rad).
    pub angles: Vec<f64>,
    /// Misalignment axis (normalized).
    pub axis: [f64; 3],
    /// Stationary run length (s).
    pub duration: f64,
    /// True accel bias (m/s²).
    pub accel_bias: [f64; 3],
}

impl Default for GravityInitConfig {
    fn default() -> Self {
        GravityInitConfig {
            angles: vec![0.005, 0.01, 0.02],
            axis: [1.0, 0.0, 0.0],
            duration: 20.0,
            accel_bias: [0.0; 3],
        }
    }
}

/// Monte Carlo orbit: 30 s with a rotational wobble strong enough to
/// excite every alignment direction.
pub fn default_circle() -> CircularSpec {
    let mut spec = CircularSpec {
        duration: 30.0,
        ..Default::default()
    };
    spec.wobble.rotation_amplitude = 0.3;
    spec
}

/// Bounded sinusoidal biases whose peak-to-peak wander over one run is
/// `wander` times the sensor noise std on each axis, at the ε whose fastest
/// admissible accel wander completes one period per run.
pub fn drift_bias_spec(noise: &NoiseConfig, duration: f64, wander: f64) -> BiasSpec {
    let accel_amplitude = 0.5 * wander * noise.accel;
    let rate = 3f64.sqrt() * std::f64::consts::TAU / duration;
    BiasSpec {
        kind: BiasKind::SinusoidalBounded,
        epsilon: rate * accel_amplitude,
        gyro_amplitude: 0.5 * wander * noise.gyro,
        accel_amplitude,
        ..Default::default()
    }
}

/// Top-level experiment configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub trials: usize,
    pub trajectory: CircularSpec,
    pub bias: BiasSpec,
    pub noise: NoiseConfig,
    pub sensors: SensorConfig,
    pub scene: SceneConfig,
    pub filter: FilterConfig,
    /// Fraction of diverged trials above which a run fails.
    pub divergence_threshold: f64,
    pub sweep: SweepConfig,
    pub gauge_check: GaugeCheckConfig,
    pub gravity_init: GravityInitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scenario: ScenarioKind::Montecarlo,
            seed: 0,
            trials: 50,
            trajectory: default_circle(),
            bias: BiasSpec::default(),
            noise: NoiseConfig::default(),
            sensors: SensorConfig::default(),
            scene: SceneConfig::default(),
            filter: FilterConfig::default(),
            divergence_threshold: 0.1,
            sweep: SweepConfig::default(),
            gauge_check: GaugeCheckConfig::default(),
            gravity_init: GravityInitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.sensors.imu_rate_hz > 0.0
            && self.sensors.camera_stride > 0
            && self.sensors.gravity >= 0.0)
        {
            return Err(Error::Config("invalid sensor configuration".into()));
        }
        if self.sensors.dt() > crate::trajectory::MAX_INTEGRATION_STEP {
            return Err(Error::Config("IMU rate must be at least 100 Hz".into()));
        }
        if !(0.0..=1.0).contains(&self.divergence_threshold) {
            return Err(Error::Config(
                "divergence_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.scene.points < 4 {
            return Err(Error::Config("at least 4 points are required".into()));
        }
        let n = self.noise;
        if ![n.gyro, n.accel, n.pixel]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            return Err(Error::Config(
                "noise levels must be finite and nonnegative".into(),
            ));
        }
        self.filter.validate()?;
        Ok(())
    }
}

/// Independent RNG of one trial: stream `trial` of the master seed.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Outcome of one filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub diverged: bool,
    /// Camera times (s).
    pub times: Vec<f64>,
    /// Alignment errors per frame: translation (m) x, y, z then rotation (rad) x, y, z.
    pub errors: Vec<[f64; 6]>,
    /// Mean error over the final 10% of frames.
    pub converged: [f64; 6],
    /// Filter 1σ of the alignment at the end.
    pub final_sigma: [f64; 6],
    /// Mean normalized innovation squared per degree of freedom.
    pub mean_nis: f64,
}

/// Alignment error `[T̂ − T, log(Rᵀ R̂)]`.
pub fn alignment_error(estimate: &Pose, truth: &Pose) -> [f64; 6] {
    let dt = estimate.translation - truth.translation;
    let dr = (truth.rotation.inverse() * estimate.rotation)
        .log()
        .unwrap_or_else(|_| Vector3::repeat(f64::NAN));
    [dt.x, dt.y, dt.z, dr.x, dr.y, dr.z]
}

fn converged_mean(errors: &[[f64; 6]]) -> [f64; 6] {
    let n = errors.len();
    let tail = (n / 10).max(1).min(n);
    let mut out = [0.0; 6];
    for e in &errors[n - tail..] {
        for i in 0..6 {
            out[i] += e[i] / tail as f64;
        }
    }
    out
}

fn gaussian3<R: rand::Rng + ?Sized>(rng: &mut R, std: f64) -> Vector3<f64> {
    if std == 0.0 {
        return Vector3::zeros();
    }
    let n = Normal::new(0.0, std).expect("finite std");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Simulated inputs of one trial.
pub struct TrialWorld {
    pub scene: Scene,
    pub biases: BiasTrajectory,
    pub imu: Vec<crate::sensors::ImuSample>,
    pub frames: Vec<Frame>,
    pub guess: InitialGuess,
}

/// Samples trajectory, points, biases, sensor streams and the alignment prior.
pub fn simulate_world(cfg: &ExperimentConfig, trial: usize) -> Result<TrialWorld> {
    let mut rng = trial_rng(cfg.seed, trial);
    let gravity = cfg.sensors.gravity_vector();
    let traj = make_circular_trajectory(&cfg.trajectory, rng.next_u64())?;
    let points = spawn_point_cloud(cfg.scene.points, &cfg.scene.region, rng.next_u64())?;
    let biases = make_bias_trajectory(&cfg.bias, traj.duration, rng.next_u64())?;
    let alignment = cfg.scene.alignment.to_pose();
    let scene = Scene::build(
        traj,
        &points,
        &[(0.0, (0..points.len()).collect())],
        alignment,
        gravity,
    )?;
    let dt = cfg.sensors.dt();
    let kin = scene.trajectory.sample_uniform(dt);
    let bias_samples = biases.sample_uniform(&kin);
    let imu = imu_stream(
        &kin,
        &bias_samples,
        &gravity,
        cfg.noise.gyro,
        cfg.noise.accel,
        &mut rng,
    );
    let mut frames = vec![];
    for (k, kn) in kin.iter().enumerate().step_by(cfg.sensors.camera_stride) {
        let obs = project_features(
            &kn.pose(),
            &alignment,
            &scene.groups,
            cfg.noise.pixel,
            &mut rng,
        );
        frames.push(Frame {
            t: kn.t,
            measurements: obs
                .iter()
                .filter(|o| o.visible)
                .map(|o| Measurement {
                    feature: o.feature,
                    y: o.y,
                })
                .collect(),
        });
        debug_assert!((kn.t - k as f64 * dt).abs() < 1e-9);
    }
    let f = &cfg.filter;
    let d_rot = gaussian3(&mut rng, f.alignment_rotation_std);
    let d_trans = gaussian3(&mut rng, f.alignment_translation_std);
    let k0 = &kin[0];
    let guess = InitialGuess {
        attitude: Some(k0.rotation),
        position: k0.translation,
        velocity: k0.velocity,
        gyro_bias: Vector3::zeros(),
        accel_bias: Vector3::zeros(),
        alignment: Pose::new(
            alignment.rotation * Rotation::exp(&d_rot),
            alignment.translation + d_trans,
        ),
    };
    Ok(TrialWorld {
        scene,
        biases,
        imu,
        frames,
        guess,
    })
}

/// Runs the filter over a simulated world. Returns per-frame alignment
/// errors and innovation statistics.
pub fn run_filter(
    cfg: &ExperimentConfig,
    world: &TrialWorld,
    trial: usize,
) -> Result<(TrialResult, Vec<UpdateStats>)> {
    let gravity = cfg.sensors.gravity_vector();
    let n_init = cfg.filter.min_init_samples;
    if world.imu.len() < n_init + 1 {
        return Err(Error::FilterInit(
            "trajectory shorter than the initialization window".into(),
        ));
    }
    let state = filter_init(&cfg.filter, &world.imu[..n_init], &gravity, &world.guess)?;
    let mut filter = Filter::new(cfg.filter, gravity, state);
    let intervals = imu_intervals(&world.imu);
    let stride = cfg.sensors.camera_stride;
    let truth = world.scene.alignment;
    let mut times = vec![];
    let mut errors = vec![];
    let mut stats = vec![];
    let mut diverged = false;
    for k in (n_init - 1)..world.imu.len() {
        if k % stride == 0 {
            let frame = &world.frames[k / stride];
            let (_, st) = filter.process_frame(frame);
            stats.push(st);
            let e = alignment_error(&filter.state.alignment, &truth);
            if e.iter().any(|v| !v.is_finite())
                || filter.state.covariance.iter().any(|v| !v.is_finite())
            {
                diverged = true;
                break;
            }
            times.push(frame.t);
            errors.push(e);
        }
        if let Some(iv) = intervals.get(k) {
            filter.predict(iv)?;
        }
    }
    let p = filter.state.alignment_covariance();
    let final_sigma = [3, 4, 5, 0, 1, 2].map(|i| p[(i, i)].max(0.0).sqrt());
    let (nis, dof) = stats
        .iter()
        .fold((0.0, 0usize), |(a, d), s| (a + s.nis, d + s.dof));
    Ok((
        TrialResult {
            trial,
            diverged,
            converged: if errors.is_empty() {
                [f64::NAN; 6]
            } else {
                converged_mean(&errors)
            },
            times,
            errors,
            final_sigma,
            mean_nis: if dof > 0 { nis / dof as f64 } else { 0.0 },
        },
        stats,
    ))
}

pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let world = simulate_world(cfg, trial)?;
    Ok(run_filter(cfg, &world, trial)?.0)
}

/// Column names of the alignment CSV.
pub const CSV_COLUMNS: [&str; 13] = [
    "t_s",
    "align_tx_err_m_mean",
    "align_tx_err_m_std",
    "align_ty_err_m_mean",
    "align_ty_err_m_std",
    "align_tz_err_m_mean",
    "align_tz_err_m_std",
    "align_rx_err_rad_mean",
    "align_rx_err_rad_std",
    "align_ry_err_rad_mean",
    "align_ry_err_rad_std",
    "align_rz_err_rad_mean",
    "align_rz_err_rad_std",
];

/// Cross-trial statistics of the alignment error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub trials: usize,
    pub diverged: usize,
    pub times: Vec<f64>,
    /// Per frame, per component: mean and std across trials.
    pub mean: Vec<[f64; 6]>,
    pub std: Vec<[f64; 6]>,
    /// Mean over trials of ‖translation error‖² per frame (m²).
    pub mse_translation: Vec<f64>,
    /// Cross-trial std of the converged values.
    pub converged_std: [f64; 6],
    pub converged_mean: [f64; 6],
    /// Prior std of the alignment, same component order.
    pub prior_std: [f64; 6],
    pub per_trial: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub diverged: bool,
    pub converged: [f64; 6],
    pub final_sigma: [f64; 6],
    pub mean_nis: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Aggregates trial results in trial order.
pub fn aggregate(cfg: &ExperimentConfig, results: &[TrialResult]) -> AggregateStats {
    let ok: Vec<&TrialResult> = results.iter().filter(|r| !r.diverged).collect();
    let frames = ok.iter().map(|r| r.times.len()).min().unwrap_or(0);
    let times = ok
        .first()
        .map(|r| r.times[..frames].to_vec())
        .unwrap_or_default();
    let mut mean = Vec::with_capacity(frames);
    let mut std = Vec::with_capacity(frames);
    let mut mse = Vec::with_capacity(frames);
    for k in 0..frames {
        let mut m = [0.0; 6];
        let mut s = [0.0; 6];
        for i in 0..6 {
            (m[i], s[i]) = mean_std(ok.iter().map(|r| r.errors[k][i]));
        }
        mean.push(m);
        std.push(s);
        mse.push(
            ok.iter()
                .map(|r| r.errors[k][..3].iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / ok.len() as f64,
        );
    }
    let mut converged_std = [0.0; 6];
    let mut converged_mean = [0.0; 6];
    for i in 0..6 {
        (converged_mean[i], converged_std[i]) = mean_std(ok.iter().map(|r| r.converged[i]));
    }
    let f = &cfg.filter;
    let (pt, pr) = (f.alignment_translation_std, f.alignment_rotation_std);
    AggregateStats {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        trials: results.len(),
        diverged: results.len() - ok.len(),
        times,
        mean,
        std,
        mse_translation: mse,
        converged_std,
        converged_mean,
        prior_std: [pt, pt, pt, pr, pr, pr],
        per_trial: results
            .iter()
            .map(|r| TrialSummary {
                trial: r.trial,
                diverged: r.diverged,
                converged: r.converged,
                final_sigma: r.final_sigma,
                mean_nis: r.mean_nis,
            })
            .collect(),
    }
}

/// Runs all trials in parallel and aggregates them in trial order.
pub fn run_montecarlo(cfg: &ExperimentConfig) -> Result<AggregateStats> {
    cfg.validate()?;
    let results: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t))
        .collect::<Result<_>>()?;
    Ok(aggregate(cfg, &results))
}

impl AggregateStats {
    pub fn divergence_fraction(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.diverged as f64 / self.trials as f64
        }
    }

    /// Header plus one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for i in 0..6 {
                out.push_str(&format!(",{},{}", self.mean[k][i], self.std[k][i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Output format of [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Writes `text` to `path`, reporting the path on failure.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        context: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

/// Writes the Monte Carlo report as CSV (time series) or JSON (everything).
pub fn emit_report(stats: &AggregateStats, path: &Path, format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => stats.to_csv(),
        Format::Json => to_json(stats)?,
    };
    write_text(path, &text)
}

/// One row of a bound sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub gentleness: f64,
    pub report: BoundsReport,
    pub volume_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
}

/// Calibration trajectory with its motion divided by `gentleness`.
pub fn gentle_calibration(spec: &CalibrationSpec, gentleness: f64) -> CalibrationSpec {
    CalibrationSpec {
        jerk_amplitude: spec.jerk_amplitude / gentleness,
        slow_rate: spec.slow_rate / gentleness,
        dither_gain: spec.dither_gain / gentleness,
        ..spec.clone()
    }
}

/// Bounds over the (ε, excitation) grid. Excitation values are computed
/// once per excitation level and reused across ε.
pub fn run_bounds_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let gravity = cfg.sensors.gravity_vector();
    let biases = BiasTrajectory::zero();
    let mut rows = vec![];
    for &g in &cfg.sweep.gentleness {
        if !(g > 0.0) {
            return Err(Error::Config("gentleness must be positive".into()));
        }
        let spec = gentle_calibration(&cfg.sweep.calibration, g);
        let traj = make_calibration_trajectory(&spec, &gravity, cfg.seed)?;
        let ex = excitation_inputs(&traj, &biases, &gravity, &cfg.sweep.bounds)?;
        for &eps in &cfg.sweep.epsilons {
            let report = bounds_from_excitation(&cfg.sweep.bounds.with_epsilon(eps), &ex)?;
            rows.push(SweepRow {
                epsilon: eps,
                gentleness: g,
                volume_proxy: report.volume_proxy(),
                report,
            });
        }
    }
    Ok(SweepReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epsilon,gentleness,rhs_rotation,rhs_scale,rhs_translation_m,rhs_gravity_m_s2,volume_proxy\n",
        );
        for r in &self.rows {
            let b = &r.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epsilon,
                r.gentleness,
                b.rhs_rotation,
                b.rhs_scale,
                b.rhs_translation,
                b.rhs_gravity,
                r.volume_proxy
            ));
        }
        out
    }
}

/// Verdict for one configured gauge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeVerdict {
    pub label: String,
    pub discrepancy: f64,
    pub membership: Membership,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeCheckReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub bounds: BoundsReport,
    pub verdicts: Vec<GaugeVerdict>,
}

/// Applies each configured gauge to a calibration scene and reports the
/// measurement discrepancy and the bound verdict.
pub fn run_gauge_check(cfg: &ExperimentConfig) -> Result<GaugeCheckReport> {
    cfg.validate()?;
    let gc = &cfg.gauge_check;
    let gravity = cfg.sensors.gravity_vector();
    let traj = make_calibration_trajectory(&gc.calibration, &gravity, cfg.seed)?;
    let scene = calibration_scene(cfg, traj)?;
    let biases = BiasTrajectory::zero();
    let bounds = crate::bounds::indistinguishable_set_bounds(
        &scene.trajectory,
        &biases,
        &gravity,
        &gc.bounds,
    )?;
    let times: Vec<f64> = {
        let n = (scene.trajectory.duration / 0.05).floor() as usize;
        (0..=n).map(|k| k as f64 * 0.05).collect()
    };
    let mut verdicts = vec![];
    for (i, z) in gc.zero_input.iter().enumerate() {
        let zg = ZeroInputGauge {
            theta: z.theta,
            translation: Vector3::from(z.translation),
        };
        let gt = zg.to_transform(&gravity);
        let other = apply_full_gauge(&scene, &gt)?;
        verdicts.push(GaugeVerdict {
            label: format!("zero-input[{i}]"),
            discrepancy: measurement_discrepancy(&scene, &other, &times)?,
            membership: gauge_within_bounds(&gt, &bounds, &gravity),
        });
    }
    for (i, f) in gc.full.iter().enumerate() {
        let gt = f.to_transform()?;
        let other = apply_full_gauge(&scene, &gt)?;
        verdicts.push(GaugeVerdict {
            label: format!("full[{i}]"),
            discrepancy: measurement_discrepancy(&scene, &other, &times)?,
            membership: gauge_within_bounds(&gt, &bounds, &gravity),
        });
    }
    Ok(GaugeCheckReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        bounds,
        verdicts,
    })
}

impl GaugeCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "gauge,discrepancy,inside,rotation,scale,translation_m,gravity_m_s2,\
             slack_rotation,slack_scale,slack_translation_m,slack_gravity_m_s2\n",
        );
        for v in &self.verdicts {
            let m = &v.membership;
            let a = m.values.as_array();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                v.label,
                v.discrepancy,
                m.inside,
                a[0],
                a[1],
                a[2],
                a[3],
                m.slack[0],
                m.slack[1],
                m.slack[2],
                m.slack[3]
            ));
        }
        out
    }
}

/// Scene with points placed in front of the camera at `t = 0`.
fn calibration_scene(cfg: &ExperimentConfig, traj: AnalyticTrajectory) -> Result<Scene> {
    let alignment = cfg.scene.alignment.to_pose();
    let gravity = cfg.sensors.gravity_vector();
    let cam0 = traj.kinematics(0.0)?.pose() * alignment.inverse();
    let region = Region {
        center: [0.0, 0.0, 4.0],
        ..cfg.scene.region
    };
    let local = spawn_point_cloud(cfg.scene.points, &region, cfg.seed)?;
    let points: Vec<Vector3<f64>> = local.iter().map(|p| cam0.act(p)).collect();
    Scene::build(
        traj,
        &points,
        &[(0.0, (0..points.len()).collect())],
        alignment,
        gravity,
    )
}

/// One misalignment angle of the gravity-initialization study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityInitRow {
    pub angle: f64,
    /// α_b + Rᵀ(R₀ − I)γ.
    pub predicted_bias: [f64; 3],
    pub estimated_bias: [f64; 3],
    /// Filter 1σ per axis.
    pub sigma: [f64; 3],
    /// Largest |estimate − prediction| / σ over axes.
    pub max_normalized_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityInitReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub rows: Vec<GravityInitRow>,
    /// ‖Δb(2θ)‖ / ‖Δb(θ)‖ for consecutive doubling angles.
    pub doubling_ratios: Vec<f64>,
}

/// Stationary scene viewed by a filter whose initial attitude is off by
/// `R₀`: the filter frame is `R₀ᵀ` times the true frame, so the accel-bias
/// estimate absorbs `Rᵀ(R₀ − I)γ`.
pub fn run_gravity_init_experiment(cfg: &ExperimentConfig) -> Result<GravityInitReport> {
    cfg.validate()?;
    let gi = &cfg.gravity_init;
    let gravity = cfg.sensors.gravity_vector();
    let axis = Vector3::from(gi.axis);
    if !(axis.norm() > 0.0) {
        return Err(Error::Config("gravity_init.axis must be nonzero".into()));
    }
    let axis = axis.normalize();
    let mut rows = vec![];
    for (i, &angle) in gi.angles.iter().enumerate() {
        let body = Pose::identity();
        let traj = AnalyticTrajectory::stationary(body, gi.duration)?;
        let mut c = cfg.clone();
        c.bias = BiasSpec {
            gyro_offset_std: 0.0,
            accel_offset_std: 0.0,
            ..BiasSpec::default()
        };
        let alignment = c.scene.alignment.to_pose();
        let cam0 = body * alignment.inverse();
        let region = Region {
            center: [0.0, 0.0, 4.0],
            ..c.scene.region
        };
        let mut rng = trial_rng(c.seed, i);
        let local = spawn_point_cloud(c.scene.points, &region, rng.next_u64())?;
        let points: Vec<Vector3<f64>> = local.iter().map(|p| cam0.act(p)).collect();
        let scene = Scene::build(
            traj,
            &points,
            &[(0.0, (0..points.len()).collect())],
            alignment,
            gravity,
        )?;
        let accel_bias = Vector3::from(gi.accel_bias);
        let biases = BiasTrajectory::constant(Vector3::zeros(), accel_bias);
        let dt = c.sensors.dt();
        let kin = scene.trajectory.sample_uniform(dt);
        let bias_samples = biases.sample_uniform(&kin);
        let imu = imu_stream(
            &kin,
            &bias_samples,
            &gravity,
            c.noise.gyro,
            c.noise.accel,
            &mut rng,
        );
        let mut frames = vec![];
        for kn in kin.iter().step_by(c.sensors.camera_stride) {
            let obs = project_features(
                &kn.pose(),
                &alignment,
                &scene.groups,
                c.noise.pixel,
                &mut rng,
            );
            frames.push(Frame {
                t: kn.t,
                measurements: obs
                    .iter()
                    .filter(|o| o.visible)
                    .map(|o| Measurement {
                        feature: o.feature,
                        y: o.y,
                    })
                    .collect(),
            });
        }
        let r0 = Rotation::exp(&(axis * angle));
        let guess = InitialGuess {
            attitude: Some(r0.inverse() * body.rotation),
            alignment,
            ..Default::default()
        };
        let world = TrialWorld {
            scene,
            biases,
            imu,
            frames,
            guess,
        };
        // Alignment known, and the reference pose pinned whole at the
        // misaligned initial estimate: the study isolates the attitude/bias
        // trade.
        c.filter.alignment_rotation_std = 0.0;
        c.filter.alignment_translation_std = 0.0;
        c.filter.reference_pin = ReferencePin::Full;
        let filter = run_stationary_filter(&c, &world)?;
        let rt = body.r().transpose();
        let predicted = accel_bias + rt * (r0.matrix() - nalgebra::Matrix3::identity()) * gravity;
        let est = filter.state.accel_bias;
        let cov = filter.state.accel_bias_covariance();
        let sigma = [0, 1, 2].map(|k| cov[(k, k)].max(0.0).sqrt());
        let max_normalized_error = (0..3)
            .map(|k| (est[k] - predicted[k]).abs() / sigma[k])
            .fold(0.0, f64::max);
        rows.push(GravityInitRow {
            angle,
            predicted_bias: predicted.into(),
            estimated_bias: est.into(),
            sigma,
            max_normalized_error,
        });
    }
    let mut doubling_ratios = vec![];
    for a in rows.iter().filter(|a| a.angle != 0.0) {
        if let Some(b) = rows
            .iter()
            .find(|b| (b.angle - 2.0 * a.angle).abs() < 1e-12 * a.angle.abs().max(1.0))
        {
            let base = Vector3::from(gi.accel_bias);
            let da = (Vector3::from(a.estimated_bias) - base).norm();
            let db = (Vector3::from(b.estimated_bias) - base).norm();
            doubling_ratios.push(db / da);
        }
    }
    Ok(GravityInitReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        doubling_ratios,
    })
}

impl GravityInitReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "angle_rad,predicted_x_m_s2,predicted_y_m_s2,predicted_z_m_s2,\
             estimated_x_m_s2,estimated_y_m_s2,estimated_z_m_s2,\
             sigma_x_m_s2,sigma_y_m_s2,sigma_z_m_s2,max_normalized_error\n",
        );
        for r in &self.rows {
            let p = r.predicted_bias;
            let e = r.estimated_bias;
            let s = r.sigma;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.angle,
                p[0],
                p[1],
                p[2],
                e[0],
                e[1],
                e[2],
                s[0],
                s[1],
                s[2],
                r.max_normalized_error
            ));
        }
        out
    }
}

fn run_stationary_filter(cfg: &ExperimentConfig, world: &TrialWorld) -> Result<Filter> {
    let gravity = cfg.sensors.gravity_vector();
    let n_init = cfg.filter.min_init_samples;
    let state = filter_init(&cfg.filter, &world.imu[..n_init], &gravity, &world.guess)?;
    let mut filter = Filter::new(cfg.filter, gravity, state);
    let intervals = imu_intervals(&world.imu);
    let stride = cfg.sensors.camera_stride;
    for k in (n_init - 1)..world.imu.len() {
        if k % stride == 0 {
            filter.process_frame(&world.frames[k / stride]);
        }
        if let Some(iv) = intervals.get(k) {
            filter.predict(iv)?;
        }
    }
    Ok(filter)
}
