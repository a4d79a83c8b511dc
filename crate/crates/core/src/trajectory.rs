//! Closed-form trajectories with derivatives up to third order, and numerical
//! integration of the mechanization equations driven by IMU readings.
//!
//! A trajectory is described by small expression trees in time ([`Expr`]).
//! The orientation is a product of fixed rotations and rotations about fixed
//! axes by scalar angle programs, so `R(t)` and its first three derivatives are
//! exact; body angular velocity and its derivatives follow from them.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, vee, Pose, Rotation};
use crate::jet::Jet;
use crate::sensors::{BiasSample, ImuSample};

/// Largest IMU step accepted by [`integrate_mechanization`].
pub const MAX_INTEGRATION_STEP: f64 = 0.01;

/// Scalar function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Const {
        value: f64,
    },
    /// `Σ coeffs[k] t^k`.
    Poly {
        coeffs: Vec<f64>,
    },
    /// `amplitude · sin(rate t + phase)`, rate in rad/s.
    Sine {
        amplitude: f64,
        rate: f64,
        phase: f64,
    },
    /// 0 before `start`, 1 after `start + rise`, C³ smootherstep between.
    SmoothStep {
        start: f64,
        rise: f64,
    },
    /// Time integral of the matching `SmoothStep`, zero before `start`.
    RampIntegral {
        start: f64,
        rise: f64,
    },
    Sum {
        terms: Vec<Expr>,
    },
    Product {
        factors: Vec<Expr>,
    },
    SinOf {
        arg: Box<Expr>,
    },
    CosOf {
        arg: Box<Expr>,
    },
}

// Smootherstep of degree 7 and its antiderivative, as functions of u in [0, 1].
fn smoothstep_poly(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let w = 1.0 - u;
    [
        u2 * u2 * (35.0 - 84.0 * u + 70.0 * u2 - 20.0 * u3),
        140.0 * u3 * w * w * w,
        420.0 * u2 * w * w * (1.0 - 2.0 * u),
        840.0 * u * w * (1.0 - 5.0 * u + 5.0 * u2),
    ]
}

fn ramp_integral_poly(u: f64) -> f64 {
    let u5 = u.powi(5);
    u5 * (7.0 - 14.0 * u + 10.0 * u * u - 2.5 * u * u * u)
}

impl Default for Expr {
    fn default() -> Self {
        Expr::zero()
    }
}

impl Expr {
    pub fn zero() -> Self {
        Expr::Const { value: 0.0 }
    }

    pub fn constant(value: f64) -> Self {
        Expr::Const { value }
    }

    /// `c0 + c1 t`.
    pub fn linear(c0: f64, c1: f64) -> Self {
        Expr::Poly {
            coeffs: vec![c0, c1],
        }
    }

    pub fn sine(amplitude: f64, rate: f64, phase: f64) -> Self {
        Expr::Sine {
            amplitude,
            rate,
            phase,
        }
    }

    pub fn scaled(self, c: f64) -> Self {
        Expr::Product {
            factors: vec![Expr::constant(c), self],
        }
    }

    pub fn times(self, other: Expr) -> Self {
        Expr::Product {
            factors: vec![self, other],
        }
    }

    pub fn plus(self, other: Expr) -> Self {
        Expr::Sum {
            terms: vec![self, other],
        }
    }

    /// `1 − SmoothStep`.
    pub fn fade_out(start: f64, rise: f64) -> Self {
        Expr::Sum {
            terms: vec![
                Expr::constant(1.0),
                Expr::SmoothStep { start, rise }.scaled(-1.0),
            ],
        }
    }

    /// Smooth bump that rises over `[a, a + rise]` and falls over `[b, b + rise]`.
    pub fn window(a: f64, b: f64, rise: f64) -> Self {
        Expr::SmoothStep { start: a, rise }.times(Expr::fade_out(b, rise))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrajectory(m.to_string()));
        match self {
            Expr::Const { value } if !value.is_finite() => bad("non-finite constant"),
            Expr::Poly { coeffs } if coeffs.iter().any(|c| !c.is_finite()) => {
                bad("non-finite polynomial coefficient")
            }
            Expr::Sine {
                amplitude,
                rate,
                phase,
            } if !(amplitude.is_finite() && rate.is_finite() && phase.is_finite()) => {
                bad("non-finite sinusoid")
            }
            Expr::SmoothStep { start, rise } | Expr::RampIntegral { start, rise }
                if !(start.is_finite() && rise.is_finite() && *rise > 0.0) =>
            {
                bad("smooth step needs a finite start and positive rise")
            }
            Expr::Sum { terms: es } | Expr::Product { factors: es } => {
                es.iter().try_for_each(Expr::validate)
            }
            Expr::SinOf { arg } | Expr::CosOf { arg } => arg.validate(),
            _ => Ok(()),
        }
    }

    pub fn jet(&self, t: f64) -> Jet {
        match self {
            Expr::Const { value } => Jet::constant(*value),
            Expr::Poly { coeffs } => {
                let x = Jet::variable(t);
                coeffs
                    .iter()
                    .rev()
                    .fold(Jet::constant(0.0), |acc, &c| acc * x + Jet::constant(c))
            }
            Expr::Sine {
                amplitude,
                rate,
                phase,
            } => {
                let (s, c) = (rate * t + phase).sin_cos();
                let a = *amplitude;
                let w = *rate;
                Jet([a * s, a * w * c, -a * w * w * s, -a * w * w * w * c])
            }
            Expr::SmoothStep { start, rise } => {
                let u = (t - start) / rise;
                if u <= 0.0 {
                    Jet::constant(0.0)
                } else if u >= 1.0 {
                    Jet::constant(1.0)
                } else {
                    let p = smoothstep_poly(u);
                    Jet([
                        p[0],
                        p[1] / rise,
                        p[2] / (rise * rise),
                        p[3] / (rise * rise * rise),
                    ])
                }
            }
            Expr::RampIntegral { start, rise } => {
                let u = (t - start) / rise;
                if u <= 0.0 {
                    Jet::constant(0.0)
                } else if u >= 1.0 {
                    Jet([0.5 * rise + (t - start - rise), 1.0, 0.0, 0.0])
                } else {
                    let p = smoothstep_poly(u);
                    Jet([
                        rise * ramp_integral_poly(u),
                        p[0],
                        p[1] / rise,
                        p[2] / (rise * rise),
                    ])
                }
            }
            Expr::Sum { terms } => terms
                .iter()
                .fold(Jet::constant(0.0), |acc, e| acc + e.jet(t)),
            Expr::Product { factors } => factors
                .iter()
                .fold(Jet::constant(1.0), |acc, e| acc * e.jet(t)),
            Expr::SinOf { arg } => arg.jet(t).sin_cos().0,
            Expr::CosOf { arg } => arg.jet(t).sin_cos().1,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.jet(t).value()
    }
}

/// One factor of the orientation product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RotationFactor {
    Fixed {
        rotation: Rotation,
    },
    /// Rotation about the unit `axis` by `angle(t)` radians.
    Axis {
        axis: Vector3<f64>,
        angle: Expr,
    },
}

impl RotationFactor {
    pub fn axis(axis: Vector3<f64>, angle: Expr) -> Self {
        RotationFactor::Axis {
            axis: axis.normalize(),
            angle,
        }
    }

    fn jet(&self, t: f64) -> [Matrix3<f64>; 4] {
        match self {
            RotationFactor::Fixed { rotation } => [
                *rotation.matrix(),
                Matrix3::zeros(),
                Matrix3::zeros(),
                Matrix3::zeros(),
            ],
            RotationFactor::Axis { axis, angle } => {
                let Jet([a, a1, a2, a3]) = angle.jet(t);
                let k = hat(axis);
                let k2 = k * k;
                let f = *Rotation::exp(&(axis * a)).matrix();
                // K commutes with exp(aK) and K³ = −K for a unit axis.
                [
                    f,
                    a1 * k * f,
                    (a2 * k + a1 * a1 * k2) * f,
                    ((a3 - a1 * a1 * a1) * k + 3.0 * a1 * a2 * k2) * f,
                ]
            }
        }
    }
}

fn mat_jet_mul(a: &[Matrix3<f64>; 4], b: &[Matrix3<f64>; 4]) -> [Matrix3<f64>; 4] {
    [
        a[0] * b[0],
        a[1] * b[0] + a[0] * b[1],
        a[2] * b[0] + 2.0 * a[1] * b[1] + a[0] * b[2],
        a[3] * b[0] + 3.0 * a[2] * b[1] + 3.0 * a[1] * b[2] + a[0] * b[3],
    ]
}

/// Full motion state at one instant. Rates are expressed in the body frame,
/// translational quantities in the spatial frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub t: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Time derivative of `acceleration`.
    pub jerk: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub angular_acceleration: Vector3<f64>,
    pub angular_jerk: Vector3<f64>,
    pub r_dot: Matrix3<f64>,
    pub r_ddot: Matrix3<f64>,
    pub r_dddot: Matrix3<f64>,
}

impl Kinematics {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// Trajectory `t ↦ (R(t), T(t))` on `[0, duration]` with
/// `T(t) = frame · p(t) + offset + R(t) · lever`, where `p` is the per-axis
/// translation program. The extra affine terms let scaled rigid changes of
/// frame act on a trajectory without leaving the closed-form family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTrajectory {
    pub rotation: Vec<RotationFactor>,
    pub translation: [Expr; 3],
    #[serde(default = "Matrix3::identity")]
    pub frame: Matrix3<f64>,
    #[serde(default)]
    pub offset: Vector3<f64>,
    #[serde(default)]
    pub lever: Vector3<f64>,
    pub duration: f64,
}

impl AnalyticTrajectory {
    pub fn new(
        rotation: Vec<RotationFactor>,
        translation: [Expr; 3],
        duration: f64,
    ) -> Result<Self> {
        let traj = AnalyticTrajectory {
            rotation,
            translation,
            frame: Matrix3::identity(),
            offset: Vector3::zeros(),
            lever: Vector3::zeros(),
            duration,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidTrajectory(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        for f in &self.rotation {
            if let RotationFactor::Axis { axis, angle } = f {
                if !((axis.norm() - 1.0).abs() < 1e-9) {
                    return Err(Error::InvalidTrajectory(
                        "rotation axis must be a unit vector".into(),
                    ));
                }
                angle.validate()?;
            }
        }
        self.translation.iter().try_for_each(Expr::validate)
    }

    /// Constant pose held for `duration` seconds.
    pub fn stationary(pose: Pose, duration: f64) -> Result<Self> {
        let t = pose.translation;
        Self::new(
            vec![RotationFactor::Fixed {
                rotation: pose.rotation,
            }],
            [
                Expr::constant(t.x),
                Expr::constant(t.y),
                Expr::constant(t.z),
            ],
            duration,
        )
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Kinematics at `t`; errors outside `[0, duration]`.
    pub fn kinematics(&self, t: f64) -> Result<Kinematics> {
        let tol = 1e-9 * self.duration.max(1.0);
        if !(t >= -tol && t <= self.duration + tol) {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(self.kinematics_unchecked(t))
    }

    /// Kinematics at `t` without a range check; the closed forms extend past the ends.
    pub fn kinematics_unchecked(&self, t: f64) -> Kinematics {
        let ident = [
            Matrix3::identity(),
            Matrix3::zeros(),
            Matrix3::zeros(),
            Matrix3::zeros(),
        ];
        let r = self
            .rotation
            .iter()
            .fold(ident, |acc, f| mat_jet_mul(&acc, &f.jet(t)));
        let p: Vec<Jet> = self.translation.iter().map(|e| e.jet(t)).collect();
        let pd = |k: usize| self.frame * Vector3::new(p[0].d(k), p[1].d(k), p[2].d(k));
        let rt = r[0].transpose();
        Kinematics {
            t,
            rotation: Rotation::from_matrix_unchecked(r[0]),
            translation: pd(0) + self.offset + r[0] * self.lever,
            velocity: pd(1) + r[1] * self.lever,
            acceleration: pd(2) + r[2] * self.lever,
            jerk: pd(3) + r[3] * self.lever,
            angular_velocity: vee(&(rt * r[1])),
            angular_acceleration: vee(&(rt * r[2])),
            angular_jerk: vee(&(r[2].transpose() * r[1]
                + 2.0 * r[1].transpose() * r[2]
                + rt * r[3])),
            r_dot: r[1],
            r_ddot: r[2],
            r_dddot: r[3],
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.kinematics_unchecked(t).pose()
    }

    /// Number of samples on the uniform grid `0, dt, 2dt, …` within the duration.
    pub fn grid_len(&self, dt: f64) -> usize {
        (self.duration / dt + 1e-9).floor() as usize + 1
    }

    pub fn sample_uniform(&self, dt: f64) -> Vec<Kinematics> {
        (0..self.grid_len(dt))
            .map(|k| self.kinematics_unchecked(k as f64 * dt))
            .collect()
    }

    /// The trajectory `t ↦ σ(g_B g(t) g_A)`.
    pub fn transformed(&self, left: &Pose, right: &Pose, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::NonPositiveScale(scale));
        }
        let rb = *left.r();
        let mut rotation = Vec::with_capacity(self.rotation.len() + 2);
        push_fixed(&mut rotation, left.rotation);
        for f in &self.rotation {
            match f {
                RotationFactor::Fixed { rotation: r } => push_fixed(&mut rotation, *r),
                other => rotation.push(other.clone()),
            }
        }
        push_fixed(&mut rotation, right.rotation);
        Ok(AnalyticTrajectory {
            rotation,
            translation: self.translation.clone(),
            frame: scale * rb * self.frame,
            offset: scale * (rb * self.offset + left.translation),
            lever: scale * right.r().transpose() * (self.lever + right.translation),
            duration: self.duration,
        })
    }
}

fn push_fixed(factors: &mut Vec<RotationFactor>, r: Rotation) {
    if let Some(RotationFactor::Fixed { rotation }) = factors.last_mut() {
        *rotation = Rotation::from_matrix(rotation.matrix() * r.matrix());
    } else {
        factors.push(RotationFactor::Fixed { rotation: r });
    }
}

/// Evaluates `traj` at `t`.
pub fn sample_kinematics(traj: &AnalyticTrajectory, t: f64) -> Result<Kinematics> {
    traj.kinematics(t)
}

/// Random sinusoidal perturbation added on top of the circular path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WobbleSpec {
    /// Peak amplitude per translation axis (m).
    pub translation_amplitude: f64,
    /// Peak amplitude per body rotation axis (rad).
    pub rotation_amplitude: f64,
    /// Sinusoids per axis.
    pub terms: usize,
    /// Frequency range of the sinusoids (rad/s).
    pub min_rate: f64,
    pub max_rate: f64,
}

impl Default for WobbleSpec {
    fn default() -> Self {
        WobbleSpec {
            translation_amplitude: 0.3,
            rotation_amplitude: 0.08,
            terms: 2,
            min_rate: 0.8,
            max_rate: 2.5,
        }
    }
}

impl WobbleSpec {
    pub fn none() -> Self {
        WobbleSpec {
            translation_amplitude: 0.0,
            rotation_amplitude: 0.0,
            ..Default::default()
        }
    }

    /// Same frequencies, amplitudes divided by `factor`.
    pub fn gentler(&self, factor: f64) -> Self {
        WobbleSpec {
            translation_amplitude: self.translation_amplitude / factor,
            rotation_amplitude: self.rotation_amplitude / factor,
            ..self.clone()
        }
    }
}

/// Circular orbit around `center` in the horizontal plane, body z axis
/// pointing at the center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircularSpec {
    /// Orbit radius (m).
    pub radius: f64,
    /// Orbit rate (rad/s).
    pub angular_rate: f64,
    /// Orbit center (m).
    pub center: [f64; 3],
    /// Total duration (s).
    pub duration: f64,
    /// Initial stationary hold (s).
    pub hold: f64,
    /// Smooth spin-up time after the hold (s); 0 starts at full rate.
    pub ramp: f64,
    pub wobble: WobbleSpec,
}

impl Default for CircularSpec {
    fn default() -> Self {
        CircularSpec {
            radius: 4.0,
            angular_rate: 0.3,
            center: [0.0; 3],
            duration: 20.0,
            hold: 0.5,
            ramp: 2.0,
            wobble: WobbleSpec::default(),
        }
    }
}

fn random_sines(rng: &mut ChaCha8Rng, amplitude: f64, w: &WobbleSpec) -> Expr {
    let n = w.terms.max(1);
    let terms = (0..n)
        .map(|_| {
            let a = amplitude * rng.gen_range(0.5..1.0) / n as f64;
            let rate = if w.max_rate > w.min_rate {
                rng.gen_range(w.min_rate..w.max_rate)
            } else {
                w.min_rate
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Expr::sine(a, rate, phase)
        })
        .collect();
    Expr::Sum { terms }
}

/// Orientation whose body z axis points along −x, body y along −z (down).
pub fn inward_facing_base() -> Rotation {
    #[rustfmt::skip]
    let m = Matrix3::new(
        0.0, 0.0, -1.0,
        1.0, 0.0, 0.0,
        0.0, -1.0, 0.0,
    );
    Rotation::from_matrix_unchecked(m)
}

/// Orbit around the point cloud with random sinusoidal wobble.
pub fn make_circular_trajectory(spec: &CircularSpec, seed: u64) -> Result<AnalyticTrajectory> {
    if !(spec.radius > 0.0 && spec.radius.is_finite()) {
        return Err(Error::InvalidTrajectory("radius must be positive".into()));
    }
    if spec.angular_rate == 0.0 || !spec.angular_rate.is_finite() {
        return Err(Error::InvalidTrajectory(
            "orbit rate must be nonzero".into(),
        ));
    }
    let w = &spec.wobble;
    if !(w.translation_amplitude >= 0.0 && w.rotation_amplitude >= 0.0 && w.min_rate > 0.0)
        || w.max_rate < w.min_rate
    {
        return Err(Error::InvalidTrajectory(
            "invalid wobble specification".into(),
        ));
    }
    if !(spec.hold >= 0.0 && spec.ramp >= 0.0 && spec.hold + spec.ramp < spec.duration) {
        return Err(Error::InvalidTrajectory(
            "hold and ramp must fit in the duration".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);

    // Envelope gating the motion after the hold, and the orbit phase.
    let (envelope, travelled) = if spec.ramp > 0.0 {
        (
            Expr::SmoothStep {
                start: spec.hold,
                rise: spec.ramp,
            },
            Expr::RampIntegral {
                start: spec.hold,
                rise: spec.ramp,
            },
        )
    } else if spec.hold > 0.0 {
        return Err(Error::InvalidTrajectory(
            "a hold needs a positive ramp".into(),
        ));
    } else {
        (Expr::constant(1.0), Expr::linear(0.0, 1.0))
    };
    let phi = Expr::constant(phase0).plus(travelled.scaled(spec.angular_rate));

    let gate = |e: Expr| envelope.clone().times(e);
    let c = spec.center;
    let x = Expr::Sum {
        terms: vec![
            Expr::constant(c[0]),
            Expr::CosOf {
                arg: Box::new(phi.clone()),
            }
            .scaled(spec.radius),
            gate(random_sines(&mut rng, w.translation_amplitude, w)),
        ],
    };
    let y = Expr::Sum {
        terms: vec![
            Expr::constant(c[1]),
            Expr::SinOf {
                arg: Box::new(phi.clone()),
            }
            .scaled(spec.radius),
            gate(random_sines(&mut rng, w.translation_amplitude, w)),
        ],
    };
    let z = Expr::constant(c[2]).plus(gate(random_sines(&mut rng, w.translation_amplitude, w)));

    let yaw = phi.plus(gate(random_sines(&mut rng, w.rotation_amplitude, w)));
    let tilt_x = gate(random_sines(&mut rng, w.rotation_amplitude, w));
    let tilt_y = gate(random_sines(&mut rng, w.rotation_amplitude, w));
    let rotation = vec![
        RotationFactor::axis(Vector3::z(), yaw),
        RotationFactor::Fixed {
            rotation: inward_facing_base(),
        },
        RotationFactor::axis(Vector3::x(), tilt_x),
        RotationFactor::axis(Vector3::y(), tilt_y),
    ];
    AnalyticTrajectory::new(rotation, [x, y, z], spec.duration)
}

/// Trajectory made of three consecutive quiescent segments, each satisfying
/// one family of derivative conditions at the configured threshold:
/// frozen orientation with rich translational jerk; free fall with a tiny
/// fast rotational dither; free fall with a slow rotation that sweeps the
/// angular-velocity direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Derivative threshold the segments are designed for.
    pub threshold: f64,
    /// Lengths of the three segments (s).
    pub segments: [f64; 3],
    /// Transition time between segments (s).
    pub transition: f64,
    /// Translation amplitude in the first segment (m).
    pub jerk_amplitude: f64,
    /// Dither rates in the second segment (rad/s).
    pub dither_rates: [f64; 3],
    /// Dither amplitude as a fraction of the largest one that keeps the
    /// second segment quiescent.
    pub dither_gain: f64,
    /// Angular rate of the slow rotation in the third segment (rad/s).
    pub slow_rate: f64,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            threshold: 1e-2,
            segments: [6.0, 2.0, 40.0],
            transition: 1.0,
            jerk_amplitude: 0.5,
            dither_rates: [80.0, 100.0, 120.0],
            dither_gain: 1.0,
            slow_rate: 0.05,
        }
    }
}

/// Builds the three-segment trajectory of [`CalibrationSpec`] under gravity `gravity`.
pub fn make_calibration_trajectory(
    spec: &CalibrationSpec,
    gravity: &Vector3<f64>,
    seed: u64,
) -> Result<AnalyticTrajectory> {
    let [d1, d2, d3] = spec.segments;
    let tr = spec.transition;
    if !(d1 > 0.0
        && d2 > 0.0
        && d3 > 0.0
        && tr > 0.0
        && spec.threshold > 0.0
        && (0.0..=1.0).contains(&spec.dither_gain))
    {
        return Err(Error::InvalidTrajectory(
            "calibration segments must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t1 = d1; // end of segment 1
    let t2 = t1 + tr + d2; // end of segment 2
    let t3 = t2 + tr; // start of segment 3 (after the spin-up)
    let duration = t3 + d3;

    // Segment 1: translation sinusoids with distinct rates per axis, then free fall.
    let rates = [1.1, 1.9, 2.7];
    let fall_start = t1 + tr;
    let mut translation: [Expr; 3] = Default::default();
    for (axis, tr_expr) in translation.iter_mut().enumerate() {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let wiggle = Expr::sine(spec.jerk_amplitude, rates[axis], phase);
        let g = gravity[axis];
        // Free fall from rest relative to the segment start.
        let fall = Expr::Poly {
            coeffs: vec![0.5 * g * fall_start * fall_start, -g * fall_start, 0.5 * g],
        };
        *tr_expr = Expr::Sum {
            terms: vec![
                Expr::fade_out(t1, tr).times(wiggle),
                Expr::SmoothStep {
                    start: t1,
                    rise: tr,
                }
                .times(fall),
            ],
        };
    }

    // Segment 2: tiny dither about each axis, sized so that ‖Ṙ‖ and ‖R̈‖ stay
    // below a quarter of the threshold.
    let mut rotation = Vec::new();
    let wmax = spec.dither_rates.iter().cloned().fold(0.0, f64::max);
    let amp = spec.dither_gain * 0.25 * spec.threshold / (3.0 * wmax * wmax);
    let window = Expr::window(t1, t2 - tr, tr);

    // Segment 3: yaw and pitch ramps at the slow rate.
    let ramp = Expr::RampIntegral {
        start: t2,
        rise: tr,
    }
    .scaled(spec.slow_rate);
    rotation.push(RotationFactor::axis(Vector3::z(), ramp.clone()));
    rotation.push(RotationFactor::axis(Vector3::y(), ramp));
    for (k, axis) in [Vector3::x(), Vector3::y(), Vector3::z()]
        .into_iter()
        .enumerate()
    {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let dither = Expr::sine(amp, spec.dither_rates[k], phase).times(window.clone());
        rotation.push(RotationFactor::axis(axis, dither));
    }
    AnalyticTrajectory::new(rotation, translation, duration)
}

/// Navigation state `(R, T, v)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

/// Uniformly sampled output of [`integrate_mechanization`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub dt: f64,
    pub states: Vec<NavState>,
}

impl SampledTrajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s.t)
    }
}

/// Bias-compensated IMU input `(ω_imu − ω_b, α_imu − α_b)`.
pub type CompensatedInput = (Vector3<f64>, Vector3<f64>);

/// Cubic Lagrange weights at local coordinate `s` for nodes 0, 1, 2, 3.
fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0,
        s * (s - 2.0) * (s - 3.0) / 2.0,
        -s * (s - 1.0) * (s - 3.0) / 2.0,
        s * (s - 1.0) * (s - 2.0) / 6.0,
    ]
}

/// Input at `t_k + dt/2` interpolated from the neighbouring samples.
pub fn interpolate_midpoint(inputs: &[CompensatedInput], k: usize) -> CompensatedInput {
    let n = inputs.len();
    if n < 4 {
        let a = inputs[k];
        let b = inputs[(k + 1).min(n - 1)];
        return (0.5 * (a.0 + b.0), 0.5 * (a.1 + b.1));
    }
    let j0 = k.saturating_sub(1).min(n - 4);
    let w = cubic_weights(k as f64 + 0.5 - j0 as f64);
    let mut out = (Vector3::zeros(), Vector3::zeros());
    for (i, wi) in w.iter().enumerate() {
        out.0 += *wi * inputs[j0 + i].0;
        out.1 += *wi * inputs[j0 + i].1;
    }
    out
}

/// One fourth-order Runge-Kutta step of `Ṙ = R û_ω`, `Ṫ = v`, `v̇ = R u_α + γ`.
pub fn rk4_step(
    state: &NavState,
    u0: &CompensatedInput,
    umid: &CompensatedInput,
    u1: &CompensatedInput,
    gravity: &Vector3<f64>,
    dt: f64,
) -> NavState {
    let f = |r: &Matrix3<f64>, v: &Vector3<f64>, u: &CompensatedInput| {
        (r * hat(&u.0), *v, r * u.1 + gravity)
    };
    let r0 = *state.pose.r();
    let v0 = state.velocity;
    let h = 0.5 * dt;
    let k1 = f(&r0, &v0, u0);
    let k2 = f(&(r0 + h * k1.0), &(v0 + h * k1.2), umid);
    let k3 = f(&(r0 + h * k2.0), &(v0 + h * k2.2), umid);
    let k4 = f(&(r0 + dt * k3.0), &(v0 + dt * k3.2), u1);
    let s = dt / 6.0;
    let r = r0 + s * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
    let t = state.pose.translation + s * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    let v = v0 + s * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
    NavState {
        t: state.t + dt,
        pose: Pose::new(Rotation::from_matrix(r), t),
        velocity: v,
    }
}

/// Integrates the mechanization equations over the IMU stream. `biases[k]`
/// is the bias in effect at `imu[k].t`. The returned states are aligned with
/// the IMU timestamps.
pub fn integrate_mechanization(
    imu: &[ImuSample],
    biases: &[BiasSample],
    gravity: &Vector3<f64>,
    initial: &NavState,
    dt: f64,
) -> Result<SampledTrajectory> {
    if !(dt > 0.0 && dt <= MAX_INTEGRATION_STEP) {
        return Err(Error::StepTooLarge(dt));
    }
    if imu.len() != biases.len() {
        return Err(Error::InvalidBias(format!(
            "{} IMU samples but {} bias samples",
            imu.len(),
            biases.len()
        )));
    }
    if imu.is_empty() {
        return Ok(SampledTrajectory { dt, states: vec![] });
    }
    let t0 = imu[0].t;
    for (k, s) in imu.iter().enumerate() {
        if (s.t - t0 - k as f64 * dt).abs() > 1e-6 * dt {
            return Err(Error::NonUniformTimestamps { index: k });
        }
    }
    let inputs: Vec<CompensatedInput> = imu
        .iter()
        .zip(biases)
        .map(|(s, b)| (s.gyro - b.gyro, s.accel - b.accel))
        .collect();
    let mut states = Vec::with_capacity(imu.len());
    let mut x = NavState { t: t0, ..*initial };
    states.push(x);
    for k in 0..inputs.len() - 1 {
        let mid = interpolate_midpoint(&inputs, k);
        x = rk4_step(&x, &inputs[k], &mid, &inputs[k + 1], gravity, dt);
        x.t = t0 + (k + 1) as f64 * dt;
        states.push(x);
    }
    Ok(SampledTrajectory { dt, states })
}
