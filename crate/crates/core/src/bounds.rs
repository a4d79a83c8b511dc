//! Sensitivity bounds on the indistinguishable set: how far `(R_A, σ, T_A, R_B)`
//! can move when the IMU biases drift at rate at most `ε`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{
    excitation_max, excitation_min, Interval, MinExcitation, SignalWindow, DEFAULT_DIRECTIONS,
    DEFAULT_REFINE_ITERS,
};
use crate::geometry::spectral_norm;
use crate::indistinguishability::GaugeTransform;
use crate::sensors::{imu_signals, BiasTrajectory, ImuSignals};
use crate::trajectory::AnalyticTrajectory;

/// Denominators below this make a bound vacuous (+∞).
pub const DENOMINATOR_FLOOR: f64 = 1e-9;

/// Default grid step for interval detection and excitation sampling (s).
pub const DEFAULT_SAMPLE_STEP: f64 = 1e-3;

fn default_threshold() -> f64 {
    1e-2
}

fn default_step() -> f64 {
    DEFAULT_SAMPLE_STEP
}

fn default_directions() -> usize {
    DEFAULT_DIRECTIONS
}

/// Bias drift bound and configuration-space limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsConfig {
    /// Bound on ‖α̇_b‖, ‖ω̇_b‖, ‖ω̈_b‖.
    pub epsilon: f64,
    /// M_A: bound on ‖T_A‖ (m).
    pub max_translation: f64,
    /// m_σ.
    pub min_scale: f64,
    /// M_σ.
    pub max_scale: f64,
    /// ‖γ‖ (m/s²).
    pub gravity_norm: f64,
    /// Kinematic threshold defining the calibration intervals. Kept separate
    /// from `epsilon` so the intervals stay fixed across an `epsilon` sweep.
    #[serde(default = "default_threshold")]
    pub interval_threshold: f64,
    /// Grid step (s) for interval detection and signal sampling.
    #[serde(default = "default_step")]
    pub sample_step: f64,
    /// Number of sphere lattice directions for `m`.
    #[serde(default = "default_directions")]
    pub directions: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            epsilon: 1e-3,
            max_translation: 0.1,
            min_scale: 0.5,
            max_scale: 2.0,
            gravity_norm: 9.8,
            interval_threshold: default_threshold(),
            sample_step: default_step(),
            directions: default_directions(),
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon >= 0.0
            && self.max_translation >= 0.0
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.gravity_norm >= 0.0
            && self.interval_threshold > 0.0
            && self.sample_step > 0.0
            && self.directions >= 4
            && [
                self.epsilon,
                self.max_translation,
                self.max_scale,
                self.gravity_norm,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid bounds configuration {self:?}"
            )))
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        BoundsConfig { epsilon, ..*self }
    }
}

/// `(k1, k2, k3)`.
pub fn excitation_constants(cfg: &BoundsConfig) -> (f64, f64, f64) {
    let ms = cfg.max_scale;
    let g = cfg.gravity_norm;
    let k1 = 2.0 * ms * cfg.max_translation + (2.0 * ms + 1.0) * (g + 1.0);
    let k2 = (2.0 * ms + 1.0) * (g + 3.0);
    let k3 = 2.0 * ms + 3.0;
    (k1, k2, k3)
}

/// Longest quiescent sub-interval of each kind; `None` when absent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationIntervals {
    /// ‖Ṙ‖, ‖R̈‖, ‖R⃛‖ ≤ threshold.
    pub i1: Option<Interval>,
    /// ‖Ṙ‖, ‖R̈‖, ‖T̈ − γ‖ ≤ threshold.
    pub i2: Option<Interval>,
    /// ‖R̈‖, ‖R⃛‖, ‖T̈ − γ‖ ≤ threshold.
    pub i3: Option<Interval>,
}

/// Pointwise quiescence flags `[I1, I2, I3]` at `t`.
pub fn quiescence(
    traj: &AnalyticTrajectory,
    gravity: &Vector3<f64>,
    threshold: f64,
    t: f64,
) -> [bool; 3] {
    let k = traj.kinematics_unchecked(t);
    let r1 = spectral_norm(&k.r_dot) <= threshold;
    let r2 = spectral_norm(&k.r_ddot) <= threshold;
    let r3 = spectral_norm(&k.r_dddot) <= threshold;
    let fall = (k.acceleration - gravity).norm() <= threshold;
    [r1 && r2 && r3, r1 && r2 && fall, r2 && r3 && fall]
}

/// Grid times `0, step, …` up to the duration (the endpoint included).
fn grid(duration: f64, step: f64) -> Vec<f64> {
    let n = (duration / step + 1e-9).floor() as usize;
    let mut ts: Vec<f64> = (0..=n).map(|k| k as f64 * step).collect();
    if duration - ts[n] > 1e-9 * duration.max(1.0) {
        ts.push(duration);
    }
    ts
}

fn longest_run(times: &[f64], flags: impl Iterator<Item = bool>) -> Option<Interval> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    let consider = |s: usize, e: usize, best: &mut Option<(usize, usize)>| {
        if e > s && best.is_none_or(|(a, b)| times[e] - times[s] > times[b] - times[a]) {
            *best = Some((s, e));
        }
    };
    let mut last = 0;
    for (i, f) in flags.enumerate() {
        last = i;
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                consider(s, i - 1, &mut best);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        consider(s, last, &mut best);
    }
    best.map(|(s, e)| Interval::new(times[s], times[e]))
}

/// Longest sub-intervals of each calibration kind on a grid of the given step.
pub fn find_calibration_intervals(
    traj: &AnalyticTrajectory,
    gravity: &Vector3<f64>,
    threshold: f64,
    step: f64,
) -> Result<CalibrationIntervals> {
    if !(step > 0.0 && threshold >= 0.0) {
        return Err(Error::Config(
            "interval search needs step > 0 and threshold ≥ 0".into(),
        ));
    }
    let ts = grid(traj.duration, step);
    let flags: Vec<[bool; 3]> = ts
        .iter()
        .map(|&t| quiescence(traj, gravity, threshold, t))
        .collect();
    Ok(CalibrationIntervals {
        i1: longest_run(&ts, flags.iter().map(|f| f[0])),
        i2: longest_run(&ts, flags.iter().map(|f| f[1])),
        i3: longest_run(&ts, flags.iter().map(|f| f[2])),
    })
}

/// Excitation values entering the denominators; `ε`-independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationInputs {
    /// Horizon standing in for ℝ⁺.
    pub horizon: Interval,
    pub intervals: CalibrationIntervals,
    /// m(ω̇_imu : horizon).
    pub gyro_rate: Option<MinExcitation>,
    /// m(α̇_imu : I1).
    pub accel_rate: Option<MinExcitation>,
    /// m(ω̈_imu : I2).
    pub gyro_accel: Option<MinExcitation>,
    /// m(ω_imu − ω_b : I3).
    pub rotation_rate: Option<MinExcitation>,
    /// M(ω_imu − ω_b : I3).
    pub rotation_rate_max: Option<f64>,
}

fn window(
    interval: Option<Interval>,
    step: f64,
    signals: impl Fn(f64) -> ImuSignals,
    pick: impl Fn(&ImuSignals) -> Vector3<f64>,
) -> Result<Option<SignalWindow>> {
    match interval {
        Some(i) if i.length() >= step => {
            Ok(Some(SignalWindow::from_fn(i, step, |t| pick(&signals(t)))?))
        }
        _ => Ok(None),
    }
}

/// Samples the IMU signal derivatives on the calibration intervals and
/// evaluates their minimum excitation.
pub fn excitation_inputs(
    traj: &AnalyticTrajectory,
    biases: &BiasTrajectory,
    gravity: &Vector3<f64>,
    cfg: &BoundsConfig,
) -> Result<ExcitationInputs> {
    cfg.validate()?;
    let intervals =
        find_calibration_intervals(traj, gravity, cfg.interval_threshold, cfg.sample_step)?;
    let signals = |t: f64| imu_signals(&traj.kinematics_unchecked(t), &biases.jet(t), gravity);
    let horizon = Interval::new(0.0, traj.duration);
    let step = cfg.sample_step;
    let n = cfg.directions;
    let min = |w: Option<SignalWindow>| -> Result<Option<MinExcitation>> {
        w.map(|w| excitation_min(&w, n, DEFAULT_REFINE_ITERS))
            .transpose()
    };
    let gyro_rate = min(window(Some(horizon), step, signals, |s| s.gyro_dot)?)?;
    let accel_rate = min(window(intervals.i1, step, signals, |s| s.accel_dot)?)?;
    let gyro_accel = min(window(intervals.i2, step, signals, |s| s.gyro_ddot)?)?;
    let rot = window(intervals.i3, step, signals, |s| s.gyro_unbiased)?;
    let rotation_rate_max = rot.as_ref().map(excitation_max).transpose()?;
    let rotation_rate = min(rot)?;
    Ok(ExcitationInputs {
        horizon,
        intervals,
        gyro_rate,
        accel_rate,
        gyro_accel,
        rotation_rate,
        rotation_rate_max,
    })
}

/// Evaluated bounds with the constants and excitation values used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub config: BoundsConfig,
    /// Bound on ‖I − R_A‖.
    pub rhs_rotation: f64,
    /// Bound on |σ − 1|.
    pub rhs_scale: f64,
    /// Bound on ‖T_A‖ (m).
    pub rhs_translation: f64,
    /// Bound on ‖(I − R_Bᵀ)γ‖ (m/s²).
    pub rhs_gravity: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub excitation: ExcitationInputs,
}

impl BoundsReport {
    pub fn rhs(&self) -> [f64; 4] {
        [
            self.rhs_rotation,
            self.rhs_scale,
            self.rhs_translation,
            self.rhs_gravity,
        ]
    }

    /// Product of the four bounds, a proxy for the set's volume.
    pub fn volume_proxy(&self) -> f64 {
        let r = self.rhs();
        if r.contains(&0.0) {
            0.0
        } else {
            r.iter().product()
        }
    }
}

fn ratio(num: f64, den: Option<f64>) -> f64 {
    match den {
        Some(d) if d >= DENOMINATOR_FLOOR => num / d,
        _ if num == 0.0 => 0.0,
        _ => f64::INFINITY,
    }
}

/// Evaluates the four bounds from precomputed excitation values. Unknowns on
/// the right-hand sides are replaced by the bounds already computed, in the
/// order rotation, scale, translation, gravity.
pub fn bounds_from_excitation(cfg: &BoundsConfig, ex: &ExcitationInputs) -> Result<BoundsReport> {
    cfg.validate()?;
    let (k1, k2, k3) = excitation_constants(cfg);
    let eps = cfg.epsilon;
    let ms = cfg.max_scale;
    let lower = |m: &Option<MinExcitation>| m.map(|m| m.lower);

    let rhs_rotation = ratio(2.0 * eps, lower(&ex.gyro_rate));
    let rhs_scale = ratio(k1 * eps + ms * rhs_rotation, lower(&ex.accel_rate));
    let rhs_translation = ratio(
        eps * (k2 + (2.0 * ms + 1.0) * cfg.max_translation),
        lower(&ex.gyro_accel).map(|m| cfg.min_scale * m),
    );
    let big_m = ex.rotation_rate_max.unwrap_or(f64::INFINITY);
    let grav_num =
        eps * (k3 + ms * cfg.max_translation) + (rhs_scale + eps) * big_m * cfg.gravity_norm;
    // 0·∞ arises only when ε = 0 and the scale bound is 0: the bound is 0.
    let grav_num = if grav_num.is_nan() { 0.0 } else { grav_num };
    let rhs_gravity = ratio(
        grav_num,
        lower(&ex.rotation_rate).map(|m| cfg.min_scale * m),
    );
    Ok(BoundsReport {
        config: *cfg,
        rhs_rotation,
        rhs_scale,
        rhs_translation,
        rhs_gravity,
        k1,
        k2,
        k3,
        excitation: *ex,
    })
}

/// Bounds for the scene's trajectory driven by the given biases.
pub fn indistinguishable_set_bounds(
    traj: &AnalyticTrajectory,
    biases: &BiasTrajectory,
    gravity: &Vector3<f64>,
    cfg: &BoundsConfig,
) -> Result<BoundsReport> {
    let ex = excitation_inputs(traj, biases, gravity, cfg)?;
    bounds_from_excitation(cfg, &ex)
}

/// The four quantities the bounds constrain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeMagnitudes {
    pub rotation: f64,
    pub scale: f64,
    pub translation: f64,
    pub gravity: f64,
}

impl GaugeMagnitudes {
    pub fn of(gt: &GaugeTransform, gravity: &Vector3<f64>) -> Self {
        let i3 = Matrix3::identity();
        GaugeMagnitudes {
            rotation: spectral_norm(&(i3 - gt.right.r())),
            scale: (gt.scale - 1.0).abs(),
            translation: gt.right.translation.norm(),
            gravity: ((i3 - gt.left.r().transpose()) * gravity).norm(),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.rotation, self.scale, self.translation, self.gravity]
    }
}

/// Membership verdict with per-constraint slack (bound minus value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub inside: bool,
    pub values: GaugeMagnitudes,
    /// Slack for rotation, scale, translation, gravity.
    pub slack: [f64; 4],
}

impl Membership {
    /// Indices of violated constraints (0 rotation … 3 gravity).
    pub fn violated(&self) -> Vec<usize> {
        (0..4).filter(|&i| self.slack[i] < 0.0).collect()
    }
}

pub fn gauge_within_bounds(
    gt: &GaugeTransform,
    report: &BoundsReport,
    gravity: &Vector3<f64>,
) -> Membership {
    let values = GaugeMagnitudes::of(gt, gravity);
    let rhs = report.rhs();
    let v = values.as_array();
    let slack = [0, 1, 2, 3].map(|i| {
        if rhs[i].is_infinite() {
            f64::INFINITY
        } else {
            rhs[i] - v[i]
        }
    });
    Membership {
        inside: slack.iter().all(|s| *s >= 0.0),
        values,
        slack,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::Interval;
    use crate::geometry::{Pose, Rotation};
    use crate::trajectory::{Expr, RotationFactor};

    fn cfg() -> BoundsConfig {
        BoundsConfig {
            epsilon: 1e-3,
            max_translation: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            gravity_norm: 9.8,
            ..Default::default()
        }
    }

    #[test]
    fn constants_at_reference_point() {
        let (k1, k2, k3) = excitation_constants(&cfg());
        assert!((k1 - 32.4).abs() < 1e-12 && (k2 - 38.4).abs() < 1e-12 && k3 == 5.0);
        let (k1, k2, k3) = excitation_constants(&BoundsConfig {
            gravity_norm: 0.0,
            ..cfg()
        });
        assert_eq!((k1, k2, k3), (3.0, 9.0, 5.0));
    }

    #[test]
    fn constants_monotone_on_grid() {
        let vals = [0.0, 0.5, 1.0, 2.0, 5.0];
        for &ms in &vals[1..] {
            for &ma in &vals {
                for &g in &vals {
                    let base = BoundsConfig {
                        max_scale: ms,
                        max_translation: ma,
                        gravity_norm: g,
                        min_scale: 0.1,
                        ..cfg()
                    };
                    let (k1, k2, _) = excitation_constants(&base);
                    for bumped in [
                        BoundsConfig {
                            max_scale: ms + 0.1,
                            ..base
                        },
                        BoundsConfig {
                            max_translation: ma + 0.1,
                            ..base
                        },
                        BoundsConfig {
                            gravity_norm: g + 0.1,
                            ..base
                        },
                    ] {
                        let (b1, b2, _) = excitation_constants(&bumped);
                        assert!(b1 >= k1 && b2 >= k2);
                    }
                }
            }
        }
    }

    fn free_fall_prefix() -> AnalyticTrajectory {
        // Free fall for 2 s, then a spin ramping in.
        let g = 9.8;
        let translation = [
            Expr::zero(),
            Expr::zero(),
            Expr::Poly {
                coeffs: vec![0.0, 0.0, 0.5 * g],
            },
        ];
        let spin = Expr::Sum {
            terms: vec![Expr::Sine {
                amplitude: 1.0,
                rate: 3.0,
                phase: 0.0,
            }
            .times(Expr::SmoothStep {
                start: 2.0,
                rise: 1.0,
            })],
        };
        AnalyticTrajectory::new(
            vec![RotationFactor::axis(Vector3::new(1.0, 1.0, 0.0), spin)],
            translation,
            6.0,
        )
        .unwrap()
    }

    #[test]
    fn quiescent_prefix_is_found() {
        let gravity = Vector3::new(0.0, 0.0, 9.8);
        let iv = find_calibration_intervals(&free_fall_prefix(), &gravity, 1e-3, 1e-3).unwrap();
        for i in [iv.i1, iv.i2, iv.i3] {
            let i = i.unwrap();
            assert!(i.start <= 0.0 && i.end >= 2.0, "{i:?}");
        }
        // Grid oracle: every grid point inside I2 satisfies the conditions.
        let i2 = iv.i2.unwrap();
        let mut t = i2.start;
        while t <= i2.end {
            assert!(quiescence(&free_fall_prefix(), &gravity, 1e-3, t)[1]);
            t += 1e-3;
        }
    }

    #[test]
    fn aggressive_motion_has_no_intervals() {
        let gravity = Vector3::new(0.0, 0.0, 9.8);
        let traj = AnalyticTrajectory::new(
            vec![RotationFactor::axis(
                Vector3::new(0.3, 1.0, 0.2),
                Expr::sine(1.0, 2.0, 0.3),
            )],
            [
                Expr::sine(1.0, 1.3, 0.0),
                Expr::sine(1.0, 1.7, 1.0),
                Expr::sine(1.0, 2.1, 2.0),
            ],
            5.0,
        )
        .unwrap();
        let iv = find_calibration_intervals(&traj, &gravity, 1e-6, 1e-2).unwrap();
        assert_eq!(iv, CalibrationIntervals::default());
    }

    fn fake_inputs(m: f64) -> ExcitationInputs {
        let mk = |v: f64| {
            Some(MinExcitation {
                value: v,
                direction: Vector3::x(),
                lattice_min: v,
                lower: v,
            })
        };
        let i = Some(Interval::new(0.0, 1.0));
        ExcitationInputs {
            horizon: Interval::new(0.0, 10.0),
            intervals: CalibrationIntervals {
                i1: i,
                i2: i,
                i3: i,
            },
            gyro_rate: mk(0.5),
            accel_rate: mk(0.7),
            gyro_accel: mk(m),
            rotation_rate: mk(0.05),
            rotation_rate_max: Some(0.1),
        }
    }

    #[test]
    fn zero_epsilon_collapses() {
        let r = bounds_from_excitation(&cfg().with_epsilon(0.0), &fake_inputs(0.3)).unwrap();
        assert_eq!(r.rhs(), [0.0; 4]);
        assert_eq!(r.volume_proxy(), 0.0);
    }

    #[test]
    fn linear_in_epsilon() {
        let ex = fake_inputs(0.3);
        let a = bounds_from_excitation(&cfg().with_epsilon(1e-3), &ex)
            .unwrap()
            .rhs();
        let b = bounds_from_excitation(&cfg().with_epsilon(2e-3), &ex)
            .unwrap()
            .rhs();
        for i in 0..4 {
            assert!((b[i] / a[i] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_bound_inverse_in_excitation() {
        let a = bounds_from_excitation(&cfg(), &fake_inputs(0.3)).unwrap();
        let b = bounds_from_excitation(&cfg(), &fake_inputs(1.2)).unwrap();
        assert!((a.rhs_translation / b.rhs_translation - 4.0).abs() < 1e-12);
        assert_eq!(a.rhs_rotation, b.rhs_rotation);
    }

    #[test]
    fn missing_interval_is_vacuous() {
        let mut ex = fake_inputs(0.3);
        ex.gyro_accel = None;
        let r = bounds_from_excitation(&cfg(), &ex).unwrap();
        assert!(r.rhs_translation.is_infinite());
        assert!(r.rhs_rotation.is_finite());
    }

    #[test]
    fn membership_checks() {
        let gravity = Vector3::new(0.0, 0.0, 9.8);
        let r = bounds_from_excitation(&cfg(), &fake_inputs(0.3)).unwrap();
        let m = gauge_within_bounds(&GaugeTransform::identity(), &r, &gravity);
        assert!(m.inside);
        assert_eq!(m.slack, r.rhs());
        let gt = GaugeTransform::new(
            Pose::from_translation(Vector3::new(0.0, 2.0 * r.rhs_translation, 0.0)),
            Pose::identity(),
            1.0,
        )
        .unwrap();
        let m = gauge_within_bounds(&gt, &r, &gravity);
        assert!(!m.inside);
        assert_eq!(m.violated(), vec![2]);
        // Rotation about gravity is free.
        let gt = GaugeTransform::new(
            Pose::identity(),
            Pose::from_rotation(Rotation::about_axis(&gravity, 2.0)),
            1.0,
        )
        .unwrap();
        assert!(gauge_within_bounds(&gt, &r, &gravity).values.gravity < 1e-12);
    }
}
