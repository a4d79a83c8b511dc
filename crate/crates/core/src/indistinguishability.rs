//! Gauge transformations of a scene that leave every bearing measurement
//! unchanged, the IMU biases they induce, and gauge canonicalization.
//!
//! A full transform `(g_A, g_B, σ, ḡ_i)` maps
//! `g ↦ σ(g_B g g_A)`, `g_i ↦ σ(g_B ḡ_i g_A)`, `g_cb ↦ σ(g_cb g_A)` and
//! re-expresses each feature so that every projection is preserved.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, scale_pose, vee, Pose, Rotation};
use crate::sensors::{imu_signals, pi, BiasSample, BiasTrajectory, Feature, Scene, NEAR_PLANE};

/// `(g_A, g_B, σ)` plus optional per-group frames `ḡ_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeTransform {
    /// Right factor `g_A`, acting in the body frame.
    pub right: Pose,
    /// Left factor `g_B`, acting in the spatial frame.
    pub left: Pose,
    pub scale: f64,
    /// `ḡ_i` by group index; a missing entry keeps the group's own frame.
    #[serde(default)]
    pub group_frames: Vec<Option<Pose>>,
}

impl Default for GaugeTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl GaugeTransform {
    pub fn identity() -> Self {
        GaugeTransform {
            right: Pose::identity(),
            left: Pose::identity(),
            scale: 1.0,
            group_frames: vec![],
        }
    }

    pub fn new(right: Pose, left: Pose, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::NonPositiveScale(scale));
        }
        Ok(GaugeTransform {
            right,
            left,
            scale,
            group_frames: vec![],
        })
    }

    fn group_frame(&self, j: usize) -> Option<Pose> {
        self.group_frames.get(j).copied().flatten()
    }
}

/// Rotation by `theta` about gravity plus a global translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ZeroInputGauge {
    pub theta: f64,
    pub translation: Vector3<f64>,
}

impl ZeroInputGauge {
    /// The equivalent left factor `(exp(θ γ̂/‖γ‖), T_B)`.
    pub fn left_pose(&self, gravity: &Vector3<f64>) -> Pose {
        Pose::new(Rotation::about_axis(gravity, self.theta), self.translation)
    }

    pub fn to_transform(&self, gravity: &Vector3<f64>) -> GaugeTransform {
        GaugeTransform {
            left: self.left_pose(gravity),
            ..GaugeTransform::identity()
        }
    }
}

/// Applies the full gauge transform to every part of the scene.
pub fn apply_full_gauge(scene: &Scene, gt: &GaugeTransform) -> Result<Scene> {
    let s = gt.scale;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonPositiveScale(s));
    }
    let trajectory = scene.trajectory.transformed(&gt.left, &gt.right, s)?;
    let cb = scene.alignment;
    let alignment = scale_pose(&(cb * gt.right), s)?;
    let mut groups = scene.groups.clone();
    for (j, g) in groups.iter_mut().enumerate() {
        let frame = gt.group_frame(j).unwrap_or(g.reference);
        // Points move by σ·(g_cb ḡ⁻¹ g_i g_cb⁻¹) in birth-camera coordinates.
        let move_pts = cb * frame.inverse() * g.reference * cb.inverse();
        for f in g.features.iter_mut() {
            let x = s * move_pts.act(&f.camera_point());
            if x.z <= NEAR_PLANE * s.min(1.0) * 1e-3 {
                return Err(Error::InvalidGauge(format!(
                    "feature {} ends up behind its group's camera",
                    f.id
                )));
            }
            *f = Feature {
                id: f.id,
                bearing: x / x.z,
                depth: x.z,
            };
        }
        g.reference = scale_pose(&(gt.left * frame * gt.right), s)?;
    }
    Ok(Scene {
        trajectory,
        groups,
        alignment,
        gravity: scene.gravity,
    })
}

/// `T ↦ exp(γ̂θ)T + T_B`, `R ↦ exp(γ̂θ)R` applied to the trajectory and group
/// frames; alignment and gravity unchanged.
pub fn apply_zero_input_gauge(scene: &Scene, zg: &ZeroInputGauge) -> Result<Scene> {
    apply_full_gauge(scene, &zg.to_transform(&scene.gravity))
}

/// Largest distance between noise-free projections of corresponding
/// co-visible features at the given times.
pub fn measurement_discrepancy(a: &Scene, b: &Scene, times: &[f64]) -> Result<f64> {
    if (a.trajectory.duration - b.trajectory.duration).abs() > 1e-9 {
        return Err(Error::MismatchedScenes("durations differ".into()));
    }
    let ids = |s: &Scene| -> Vec<(usize, Vec<usize>)> {
        s.groups
            .iter()
            .map(|g| (g.id, g.features.iter().map(|f| f.id).collect()))
            .collect()
    };
    if ids(a) != ids(b) {
        return Err(Error::MismatchedScenes(
            "feature correspondence differs".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for &t in times {
        if t < 0.0 || t > a.trajectory.duration + 1e-9 {
            return Err(Error::TimeOutOfRange {
                t,
                duration: a.trajectory.duration,
            });
        }
        for (oa, ob) in a.project(t).iter().zip(b.project(t).iter()) {
            if oa.visible && ob.visible {
                worst = worst.max((oa.y - ob.y).norm());
            }
        }
    }
    Ok(worst)
}

/// Biases under which the transformed trajectory satisfies the mechanization
/// equations driven by the original IMU stream.
#[derive(Debug, Clone)]
pub struct InducedBiases<'a> {
    pub gauge: GaugeTransform,
    pub scene: &'a Scene,
    pub biases: &'a BiasTrajectory,
}

/// Induced gyro and accel biases with their first derivatives (and the
/// second derivative of the gyro bias).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InducedBiasJet {
    pub gyro: [Vector3<f64>; 3],
    pub accel: [Vector3<f64>; 2],
}

impl InducedBiasJet {
    pub fn sample(&self) -> BiasSample {
        BiasSample {
            gyro: self.gyro[0],
            accel: self.accel[0],
        }
    }

    /// Largest of the rates constrained by the drift bound.
    pub fn drift(&self) -> f64 {
        self.gyro[1]
            .norm()
            .max(self.accel[1].norm())
            .max(self.gyro[2].norm())
    }
}

impl InducedBiases<'_> {
    pub fn jet(&self, t: f64) -> InducedBiasJet {
        let k = self.scene.trajectory.kinematics_unchecked(t);
        let b = self.biases.jet(t);
        let gamma = self.scene.gravity;
        let imu = imu_signals(&k, &b, &gamma);
        let ra = *self.gauge.right.r();
        let rat = ra.transpose();
        let ta = self.gauge.right.translation;
        let rb = *self.gauge.left.r();
        let s = self.gauge.scale;
        let i3 = Matrix3::identity();
        let r = k.rotation.matrix();

        let gyro = [
            rat * b.gyro[0] + (i3 - rat) * imu.gyro,
            rat * b.gyro[1] + (i3 - rat) * imu.gyro_dot,
            rat * b.gyro[2] + (i3 - rat) * imu.gyro_ddot,
        ];
        let grav = (s * i3 - rb.transpose()) * gamma;
        let accel0 = rat
            * (s * b.accel[0]
                - (s * i3 - ra) * imu.accel
                - s * r.transpose() * k.r_ddot * ta
                - r.transpose() * grav);
        let accel1 = rat
            * (s * b.accel[1]
                - (s * i3 - ra) * imu.accel_dot
                - s * (k.r_dot.transpose() * k.r_ddot + r.transpose() * k.r_dddot) * ta
                - k.r_dot.transpose() * grav);
        InducedBiasJet {
            gyro,
            accel: [accel0, accel1],
        }
    }

    pub fn at(&self, t: f64) -> BiasSample {
        self.jet(t).sample()
    }

    /// Largest drift rate on the grid `interval` with step `dt`.
    pub fn max_drift(&self, start: f64, end: f64, dt: f64) -> f64 {
        let n = ((end - start) / dt + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|k| self.jet(start + k as f64 * dt).drift())
            .fold(0.0, f64::max)
    }
}

/// Induced biases `(ω̃_b, α̃_b)` of `gt` for the scene's trajectory and true biases.
pub fn induced_biases<'a>(
    gt: &GaugeTransform,
    scene: &'a Scene,
    true_biases: &'a BiasTrajectory,
) -> InducedBiases<'a> {
    InducedBiases {
        gauge: gt.clone(),
        scene,
        biases: true_biases,
    }
}

/// First-order expansion of the induced biases in `(log R_A, T_A, σ − 1, log R_B)`.
pub fn induced_biases_first_order(
    gt: &GaugeTransform,
    scene: &Scene,
    true_biases: &BiasTrajectory,
    t: f64,
) -> Result<BiasSample> {
    let k = scene.trajectory.kinematics_unchecked(t);
    let b = true_biases.jet(t);
    let imu = imu_signals(&k, &b, &scene.gravity);
    let wa = gt.right.rotation.log()?;
    let wb = gt.left.rotation.log()?;
    let ta = gt.right.translation;
    let ds = gt.scale - 1.0;
    let rt = k.rotation.matrix().transpose();
    Ok(BiasSample {
        gyro: b.gyro[0] + wa.cross(&(imu.gyro - b.gyro[0])),
        accel: b.accel[0] - ds * rt * k.acceleration + wa.cross(&(imu.accel - b.accel[0]))
            - rt * k.r_ddot * ta
            - rt * wb.cross(&scene.gravity),
    })
}

/// Which gauge directions [`fix_gauge`] pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinReport {
    pub reference_group: usize,
    /// Rotation about gravity removed from the estimate (rad).
    pub yaw_removed: f64,
    /// Global translation removed (m).
    pub translation_removed: Vector3<f64>,
    /// Off-gravity rotation between the reference frame and its target, left
    /// in place because it is not a gauge direction (rad).
    pub residual_tilt: f64,
    /// Groups whose three bearings were pinned.
    pub pinned_groups: Vec<usize>,
    /// Groups that could not be pinned (fewer than three usable features).
    pub unpinned_groups: Vec<usize>,
}

/// Gauge-fixing data: which features anchor each group, the bearings they
/// are pinned to, and the pose the reference group is pinned to.
/// Anchor feature indices of one group and their target bearings.
pub type GroupPins = ([usize; 3], [Vector2<f64>; 3]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeAnchors {
    pub reference_group: usize,
    pub reference_pose: Pose,
    /// Per group: indices into the group's feature list and target bearings.
    pub pins: Vec<Option<GroupPins>>,
}

impl GaugeAnchors {
    /// Anchors that pin the current state of `scene`: the first three
    /// mutually independent bearings of each group and the reference frame.
    pub fn from_scene(scene: &Scene, reference_group: usize) -> Result<Self> {
        let g = scene
            .groups
            .get(reference_group)
            .ok_or_else(|| Error::InvalidGauge(format!("no group {reference_group}")))?;
        let pins = scene
            .groups
            .iter()
            .map(|g| {
                choose_anchor_triplet(&g.features.iter().map(|f| f.bearing).collect::<Vec<_>>())
                    .map(|idx| {
                        let b = idx.map(|i| g.features[i].bearing.xy());
                        (idx, b)
                    })
            })
            .collect();
        Ok(GaugeAnchors {
            reference_group,
            reference_pose: g.reference,
            pins,
        })
    }
}

/// Picks three bearings spanning the largest volume (most non-coplanar).
pub fn choose_anchor_triplet(bearings: &[Vector3<f64>]) -> Option<[usize; 3]> {
    let n = bearings.len();
    if n < 3 {
        return None;
    }
    let unit: Vec<Vector3<f64>> = bearings.iter().map(|b| b.normalize()).collect();
    let mut best = (0.0, [0, 1, 2]);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let v = unit[i].dot(&unit[j].cross(&unit[k])).abs();
                if v > best.0 {
                    best = (v, [i, j, k]);
                }
            }
        }
    }
    (best.0 > 1e-6).then_some(best.1)
}

/// Rigid `Q` with `π(Q X_k) = y_k` for three points; Gauss-Newton from identity.
fn solve_three_bearings(points: &[Vector3<f64>; 3], targets: &[Vector2<f64>; 3]) -> Option<Pose> {
    let mut q = Pose::identity();
    for _ in 0..50 {
        let mut r = Vector6::zeros();
        let mut jac = Matrix6::zeros();
        for k in 0..3 {
            let x = q.act(&points[k]);
            let e = pi(&x) - targets[k];
            r[2 * k] = e.x;
            r[2 * k + 1] = e.y;
            let dpi = nalgebra::Matrix2x3::new(
                1.0 / x.z,
                0.0,
                -x.x / (x.z * x.z),
                0.0,
                1.0 / x.z,
                -x.y / (x.z * x.z),
            );
            // Left perturbation: x ↦ exp(δθ) x + δT.
            let dx_dtheta = -hat(&x);
            let j_rot = dpi * dx_dtheta;
            for c in 0..3 {
                jac[(2 * k, c)] = j_rot[(0, c)];
                jac[(2 * k + 1, c)] = j_rot[(1, c)];
                jac[(2 * k, 3 + c)] = dpi[(0, c)];
                jac[(2 * k + 1, 3 + c)] = dpi[(1, c)];
            }
        }
        if r.norm() < 1e-15 {
            return Some(q);
        }
        let step = jac.lu().solve(&(-r))?;
        let dq = Pose::new(
            Rotation::exp(&Vector3::new(step[0], step[1], step[2])),
            Vector3::new(step[3], step[4], step[5]),
        );
        q = dq * q;
        if step.norm() < 1e-15 {
            break;
        }
    }
    let ok = (0..3).all(|k| (pi(&q.act(&points[k])) - targets[k]).norm() < 1e-10);
    ok.then_some(q)
}

/// Angle `θ` of the rotation about unit `n` closest to `d`.
pub fn closest_yaw(d: &Matrix3<f64>, n: &Vector3<f64>) -> f64 {
    let a = d.trace() - n.dot(&(d * n));
    let b = 2.0 * n.dot(&vee(d));
    b.atan2(a)
}

/// Canonicalizes an estimate: pins three bearings per group by re-choosing
/// each group frame, then removes the rotation about gravity and the global
/// translation that carry the reference group's frame to its pinned pose.
pub fn fix_gauge(estimate: &Scene, anchors: &GaugeAnchors) -> Result<(Scene, PinReport)> {
    let cb = estimate.alignment;
    let mut frames = vec![None; estimate.groups.len()];
    let mut pinned = vec![];
    let mut unpinned = vec![];
    for (j, g) in estimate.groups.iter().enumerate() {
        let Some(Some((idx, targets))) = anchors.pins.get(j) else {
            unpinned.push(j);
            continue;
        };
        if idx.iter().any(|&i| i >= g.features.len()) {
            unpinned.push(j);
            continue;
        }
        let pts = idx.map(|i| g.features[i].camera_point());
        let Some(q) = solve_three_bearings(&pts, targets) else {
            unpinned.push(j);
            continue;
        };
        // Q = g_cb ḡ⁻¹ g_i g_cb⁻¹  ⇒  ḡ = g_i g_cb⁻¹ Q⁻¹ g_cb.
        frames[j] = Some(g.reference * cb.inverse() * q.inverse() * cb);
        pinned.push(j);
    }
    let per_group = GaugeTransform {
        group_frames: frames,
        ..GaugeTransform::identity()
    };
    let staged = apply_full_gauge(estimate, &per_group)?;

    let reference = staged
        .groups
        .get(anchors.reference_group)
        .ok_or_else(|| Error::InvalidGauge(format!("no group {}", anchors.reference_group)))?
        .reference;
    let n = estimate.gravity.normalize();
    let d = anchors.reference_pose.r() * reference.r().transpose();
    let theta = closest_yaw(&d, &n);
    let yaw = Rotation::about_axis(&n, theta);
    let tilt = (yaw.inverse() * Rotation::from_matrix_unchecked(d)).angle();
    let tb = anchors.reference_pose.translation - yaw * reference.translation;
    let zg = ZeroInputGauge {
        theta,
        translation: tb,
    };
    let out = apply_zero_input_gauge(&staged, &zg)?;
    Ok((
        out,
        PinReport {
            reference_group: anchors.reference_group,
            yaw_removed: theta,
            translation_removed: tb,
            residual_tilt: tilt,
            pinned_groups: pinned,
            unpinned_groups: unpinned,
        },
    ))
}

/// Tolerance (rad) for a direction to count as lying in the plane ⟂ gravity.
pub const HORIZON_TOL: f64 = 1e-6;

/// Whether pinning only two directions leaves the rotation about gravity
/// free: happens exactly when both directions are orthogonal to gravity.
pub fn two_direction_degenerate(
    d1: &Vector3<f64>,
    d2: &Vector3<f64>,
    gravity: &Vector3<f64>,
) -> bool {
    let n = gravity.normalize();
    let elevation = |d: &Vector3<f64>| d.normalize().dot(&n).clamp(-1.0, 1.0).asin().abs();
    elevation(d1) < HORIZON_TOL && elevation(d2) < HORIZON_TOL
}
