//! Error-state EKF on the reduced model: body pose, velocity, IMU biases,
//! camera-body alignment, feature-group poses and per-feature bearing and
//! log-depth. Gauge directions are pinned by excluding them from the error
//! state.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, Pose, Rotation};
use crate::indistinguishability::choose_anchor_triplet;
use crate::sensors::{ImuSample, DEFAULT_ACCEL_NOISE, DEFAULT_GYRO_NOISE, DEFAULT_PIXEL_NOISE};
use crate::trajectory::{interpolate_midpoint, rk4_step, CompensatedInput, NavState};

/// Dimension of the body block `[δθ, δT, δv, δb_g, δb_a]`.
pub const CORE_DIM: usize = 15;
/// Offset of the alignment block `[δθ_cb, δT_cb]`.
pub const ALIGNMENT_OFFSET: usize = CORE_DIM;
/// Body block plus alignment block.
pub const FIXED_DIM: usize = CORE_DIM + 6;

/// 99% quantile of χ² with 2 degrees of freedom, `−2 ln 0.01`.
pub fn chi2_2dof_99() -> f64 {
    -2.0 * 0.01f64.ln()
}

type Matrix15 = SMatrix<f64, CORE_DIM, CORE_DIM>;

/// Noise levels, priors and bookkeeping thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Per-sample gyro noise std (rad/s).
    pub gyro_noise: f64,
    /// Per-sample accel noise std (m/s²).
    pub accel_noise: f64,
    /// Bearing noise std (normalized image units).
    pub pixel_noise: f64,
    /// Gyro bias random-walk density (rad/s/√s).
    pub gyro_bias_walk: f64,
    /// Accel bias random-walk density (m/s²/√s).
    pub accel_bias_walk: f64,
    /// Prior std of the initial attitude (rad).
    pub attitude_std: f64,
    /// Prior std of the initial velocity (m/s).
    pub velocity_std: f64,
    /// Prior std of the gyro bias (rad/s).
    pub gyro_bias_std: f64,
    /// Prior std of the accel bias (m/s²).
    pub accel_bias_std: f64,
    /// Prior std of the alignment rotation (rad).
    pub alignment_rotation_std: f64,
    /// Prior std of the alignment translation (m).
    pub alignment_translation_std: f64,
    /// Depth assigned to new features (m).
    pub initial_depth: f64,
    /// Prior std of new features' log-depth.
    pub log_depth_std: f64,
    /// Number of co-appearing new features that opens a group.
    pub min_group_features: usize,
    /// Per-feature Mahalanobis gate.
    pub gate: f64,
    /// Minimum stationary IMU samples for initialization.
    pub min_init_samples: usize,
    /// Largest accel std (m/s², per axis) accepted as stationary.
    pub stationary_accel_std: f64,
    pub reference_pin: ReferencePin,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            gyro_noise: DEFAULT_GYRO_NOISE,
            accel_noise: DEFAULT_ACCEL_NOISE,
            pixel_noise: DEFAULT_PIXEL_NOISE,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            attitude_std: 1e-2,
            velocity_std: 1e-2,
            gyro_bias_std: 1e-2,
            accel_bias_std: 1e-1,
            alignment_rotation_std: 2e-2,
            alignment_translation_std: 5e-2,
            initial_depth: 4.0,
            log_depth_std: 0.5,
            min_group_features: 5,
            gate: chi2_2dof_99(),
            min_init_samples: 10,
            stationary_accel_std: 0.1,
            reference_pin: ReferencePin::YawTranslation,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gyro_noise,
            self.accel_noise,
            self.pixel_noise,
            self.initial_depth,
            self.log_depth_std,
            self.gate,
            self.stationary_accel_std,
        ];
        let nonneg = [
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.attitude_std,
            self.velocity_std,
            self.gyro_bias_std,
            self.accel_bias_std,
            self.alignment_rotation_std,
            self.alignment_translation_std,
        ];
        if positive.iter().all(|v| *v > 0.0 && v.is_finite())
            && nonneg.iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.min_group_features >= 3
            && self.min_init_samples >= 1
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid filter configuration {self:?}"
            )))
        }
    }
}

/// A landmark in the filter: bearing at its group's birth and log-depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub id: usize,
    pub bearing: Vector2<f64>,
    pub log_depth: f64,
    /// Bearing excluded from the error state (one of the group's anchors).
    pub bearing_pinned: bool,
}

impl FeatureState {
    pub fn camera_point(&self) -> Vector3<f64> {
        Vector3::new(self.bearing.x, self.bearing.y, 1.0) * self.log_depth.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub id: usize,
    pub birth_time: f64,
    /// Body pose at birth.
    pub pose: Pose,
    /// Pose excluded from the error state (reference group).
    pub pinned: bool,
    pub features: Vec<FeatureState>,
}

/// Filter mean and error-state covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub alignment: Pose,
    pub groups: Vec<GroupState>,
    /// Id of the reference group.
    pub reference: Option<usize>,
    pub reference_pin: ReferencePin,
    pub covariance: DMatrix<f64>,
}

/// Error-state offsets of the per-group blocks, in state order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub dim: usize,
    /// Per group: offset of `[δφ, δT]`. A pinned group keeps only the tilt
    /// `δφ_x, δφ_y`; yaw and translation are gauge and excluded.
    pub group_pose: Vec<GroupBlock>,
    /// Per group, per feature: bearing offset (if not pinned), log-depth offset.
    pub features: Vec<Vec<(Option<usize>, usize)>>,
}

/// Directions of the reference group pose removed from the error state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferencePin {
    /// Yaw about gravity and translation; the tilt stays estimated.
    #[default]
    YawTranslation,
    /// The whole pose, tilt included.
    Full,
}

impl ReferencePin {
    /// Group-pose dimensions left in the state after pinning.
    pub fn kept(self) -> usize {
        match self {
            ReferencePin::YawTranslation => 2,
            ReferencePin::Full => 0,
        }
    }
}

/// Position of a group pose `[δφ, δT]` in the error state; `dim` is 6, or
/// what a reference pin keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupBlock {
    pub offset: usize,
    pub dim: usize,
}

impl GroupBlock {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Offset of the yaw and translation entries, absent when pinned.
    pub fn yaw_translation(&self) -> Option<usize> {
        (self.dim == 6).then_some(self.offset + 2)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim()
    }
}

impl FilterState {
    pub fn layout(&self) -> Layout {
        let mut k = FIXED_DIM;
        let mut group_pose = Vec::with_capacity(self.groups.len());
        let mut features = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let block = GroupBlock {
                offset: k,
                dim: if g.pinned {
                    self.reference_pin.kept()
                } else {
                    6
                },
            };
            k += block.dim();
            group_pose.push(block);
            let mut fs = Vec::with_capacity(g.features.len());
            for f in &g.features {
                let b = if f.bearing_pinned {
                    None
                } else {
                    k += 2;
                    Some(k - 2)
                };
                fs.push((b, k));
                k += 1;
            }
            features.push(fs);
        }
        Layout {
            dim: k,
            group_pose,
            features,
        }
    }

    /// Applies an error-state correction `x ⊞ dx` to the mean.
    pub fn retract(&mut self, dx: &DVector<f64>) {
        let layout = self.layout();
        let layout = &layout;
        let v3 = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        let s = self;
        s.pose = Pose::new(
            s.pose.rotation * Rotation::exp(&v3(0)),
            s.pose.translation + v3(3),
        );
        s.velocity += v3(6);
        s.gyro_bias += v3(9);
        s.accel_bias += v3(12);
        s.alignment = Pose::new(
            s.alignment.rotation * Rotation::exp(&v3(ALIGNMENT_OFFSET)),
            s.alignment.translation + v3(ALIGNMENT_OFFSET + 3),
        );
        for (gi, g) in s.groups.iter_mut().enumerate() {
            let gb = layout.group_pose[gi];
            let o = gb.offset;
            let (yaw, dt) = match gb.yaw_translation() {
                Some(_) => (dx[o + 2], v3(o + 3)),
                None => (0.0, Vector3::zeros()),
            };
            let tilt = if gb.dim() >= 2 {
                [dx[o], dx[o + 1]]
            } else {
                [0.0; 2]
            };
            let dphi = Vector3::new(tilt[0], tilt[1], yaw);
            g.pose = Pose::new(
                Rotation::exp(&dphi) * g.pose.rotation,
                g.pose.translation + dt,
            );
            for (fi, f) in g.features.iter_mut().enumerate() {
                let (b, d) = layout.features[gi][fi];
                if let Some(o) = b {
                    f.bearing += Vector2::new(dx[o], dx[o + 1]);
                }
                f.log_depth += dx[d];
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn nav(&self) -> NavState {
        NavState {
            t: self.t,
            pose: self.pose,
            velocity: self.velocity,
        }
    }

    pub fn feature_ids(&self) -> BTreeSet<usize> {
        self.groups
            .iter()
            .flat_map(|g| g.features.iter().map(|f| f.id))
            .collect()
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance.clone().symmetric_eigenvalues().min()
    }

    /// Marginal covariance of the alignment block `[δθ_cb, δT_cb]`.
    pub fn alignment_covariance(&self) -> SMatrix<f64, 6, 6> {
        self.covariance
            .fixed_view::<6, 6>(ALIGNMENT_OFFSET, ALIGNMENT_OFFSET)
            .into_owned()
    }

    /// Marginal covariance of the accel bias.
    pub fn accel_bias_covariance(&self) -> Matrix3<f64> {
        self.covariance.fixed_view::<3, 3>(12, 12).into_owned()
    }

    fn symmetrize(&mut self) {
        let p = &self.covariance;
        self.covariance = 0.5 * (p + p.transpose());
    }

    /// Removes the given error-state indices (marginalization).
    fn remove_indices(&mut self, idx: &[usize]) {
        let drop: BTreeSet<usize> = idx.iter().copied().collect();
        let keep: Vec<usize> = (0..self.dim()).filter(|i| !drop.contains(i)).collect();
        self.covariance = self.covariance.select_rows(&keep).select_columns(&keep);
    }

    /// Conditions on the given indices being exact, then removes them.
    fn pin_indices(&mut self, idx: &[usize]) {
        let p = &self.covariance;
        let pjj = p.select_rows(idx).select_columns(idx);
        let pxj = p.select_columns(idx);
        if let Ok(inv) = pjj.pseudo_inverse(1e-15) {
            self.covariance = p - &pxj * inv * pxj.transpose();
        }
        self.symmetrize();
        self.remove_indices(idx);
    }
}

/// Prior knowledge supplied at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InitialGuess {
    /// Attitude; estimated from the stationary accel average when absent.
    pub attitude: Option<Rotation>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub alignment: Pose,
}

/// Smallest rotation taking direction `a` to direction `b`.
fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Rotation {
    let (a, b) = (a.normalize(), b.normalize());
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    if s < 1e-15 {
        if c > 0.0 {
            return Rotation::identity();
        }
        let perp = if a.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        return Rotation::exp(&(a.cross(&perp).normalize() * std::f64::consts::PI));
    }
    Rotation::exp(&(axis / s * s.atan2(c)))
}

/// Initializes the filter from a stationary IMU window: the attitude aligns
/// the averaged specific force with `−γ` (yaw left at zero) unless supplied.
pub fn filter_init(
    cfg: &FilterConfig,
    window: &[ImuSample],
    gravity: &Vector3<f64>,
    guess: &InitialGuess,
) -> Result<FilterState> {
    cfg.validate()?;
    if window.len() < cfg.min_init_samples {
        return Err(Error::FilterInit(format!(
            "{} IMU samples, need at least {}",
            window.len(),
            cfg.min_init_samples
        )));
    }
    let n = window.len() as f64;
    let mean = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let var = window
        .iter()
        .map(|s| (s.accel - mean).norm_squared())
        .sum::<f64>()
        / (3.0 * n);
    if var.sqrt() > cfg.stationary_accel_std {
        return Err(Error::FilterInit(format!(
            "accel std {:.3e} exceeds stationary threshold {:.3e}",
            var.sqrt(),
            cfg.stationary_accel_std
        )));
    }
    // Stationary: α_imu = −Rᵀγ + α_b, so R maps the mean to −γ.
    let attitude = guess
        .attitude
        .unwrap_or_else(|| rotation_between(&(mean - guess.accel_bias), &(-gravity)));
    let mut p = DMatrix::zeros(FIXED_DIM, FIXED_DIM);
    let diag = [
        (0, cfg.attitude_std),
        (6, cfg.velocity_std),
        (9, cfg.gyro_bias_std),
        (12, cfg.accel_bias_std),
        (15, cfg.alignment_rotation_std),
        (18, cfg.alignment_translation_std),
    ];
    for (k, s) in diag {
        for i in 0..3 {
            p[(k + i, k + i)] = s * s;
        }
    }
    Ok(FilterState {
        t: window.last().map(|s| s.t).unwrap_or(0.0),
        pose: Pose::new(attitude, guess.position),
        velocity: guess.velocity,
        gyro_bias: guess.gyro_bias,
        accel_bias: guess.accel_bias,
        alignment: guess.alignment,
        groups: vec![],
        reference: None,
        reference_pin: cfg.reference_pin,
        covariance: p,
    })
}

/// Raw IMU over one step: samples at both ends and the interpolated midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuInterval {
    pub t0: f64,
    pub dt: f64,
    pub start: CompensatedInput,
    pub mid: CompensatedInput,
    pub end: CompensatedInput,
}

/// Steps between consecutive samples with cubic midpoints.
pub fn imu_intervals(samples: &[ImuSample]) -> Vec<ImuInterval> {
    let raw: Vec<CompensatedInput> = samples.iter().map(|s| (s.gyro, s.accel)).collect();
    (0..samples.len().saturating_sub(1))
        .map(|k| ImuInterval {
            t0: samples[k].t,
            dt: samples[k + 1].t - samples[k].t,
            start: raw[k],
            mid: interpolate_midpoint(&raw, k),
            end: raw[k + 1],
        })
        .collect()
}

/// One bearing measurement in a camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub feature: usize,
    pub y: Vector2<f64>,
}

/// All tracked measurements at one camera time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    Dropped,
}

/// Time-ordered measurements of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub feature: usize,
    pub group: Option<usize>,
    pub measurements: Vec<(f64, Vector2<f64>)>,
    pub status: TrackStatus,
}

/// Innovation statistics of one vision update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub t: f64,
    /// Accepted features and their innovations.
    pub innovations: Vec<(usize, Vector2<f64>)>,
    /// Normalized innovation squared of the accepted stack.
    pub nis: f64,
    /// Degrees of freedom of `nis`.
    pub dof: usize,
    pub rejected: usize,
    /// Set when the frame was skipped (singular innovation covariance).
    pub skipped: Option<String>,
}

/// Structural changes made by [`Filter::manage_groups`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupEvents {
    pub dropped_features: Vec<usize>,
    pub removed_groups: Vec<usize>,
    pub created_group: Option<usize>,
    /// Features initialized this frame (not used in its update).
    pub initialized: Vec<usize>,
    pub reference_switch: Option<(Option<usize>, usize)>,
}

/// Filter with its configuration and bookkeeping.
#[derive(Debug, Clone)]
pub struct Filter {
    pub config: FilterConfig,
    pub gravity: Vector3<f64>,
    pub state: FilterState,
    next_group: usize,
    pub tracks: Vec<FeatureTrack>,
}

/// Camera point of a feature and the transforms used by its Jacobian.
struct Chain {
    xc: Vector3<f64>,
    pb: Vector3<f64>,
    qb: Vector3<f64>,
    qc: Vector3<f64>,
}

fn chain(state: &FilterState, group: &GroupState, f: &FeatureState) -> Chain {
    let cb = state.alignment;
    let xc = f.camera_point();
    let pb = cb.inverse().act(&xc);
    let ps = group.pose.act(&pb);
    let qb = state.pose.inverse().act(&ps);
    let qc = cb.act(&qb);
    Chain { xc, pb, qb, qc }
}

fn projection_jacobian(x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    Matrix2x3::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz)
}

impl Filter {
    pub fn new(config: FilterConfig, gravity: Vector3<f64>, state: FilterState) -> Self {
        let next_group = state.groups.iter().map(|g| g.id + 1).max().unwrap_or(0);
        Filter {
            config,
            gravity,
            state,
            next_group,
            tracks: vec![],
        }
    }

    /// Propagates mean (RK4) and covariance over one IMU step.
    pub fn predict(&mut self, iv: &ImuInterval) -> Result<()> {
        if !(iv.dt > 0.0) {
            return Err(Error::StepTooLarge(iv.dt));
        }
        let s = &mut self.state;
        let comp = |u: &CompensatedInput| (u.0 - s.gyro_bias, u.1 - s.accel_bias);
        let (u0, um, u1) = (comp(&iv.start), comp(&iv.mid), comp(&iv.end));
        let r0 = *s.pose.r();
        let next = rk4_step(&s.nav(), &u0, &um, &u1, &self.gravity, iv.dt);

        let mut f = Matrix15::zeros();
        let i3 = Matrix3::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&um.0)));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-i3));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&i3);
        f.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-r0 * hat(&um.1)));
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r0));
        let fd = f * iv.dt;
        let phi = Matrix15::identity() + fd + 0.5 * fd * fd;

        let c = &self.config;
        let dt = iv.dt;
        let mut q = Matrix15::zeros();
        for i in 0..3 {
            q[(i, i)] = (c.gyro_noise * dt).powi(2);
            q[(6 + i, 6 + i)] = (c.accel_noise * dt).powi(2);
            q[(9 + i, 9 + i)] = c.gyro_bias_walk.powi(2) * dt;
            q[(12 + i, 12 + i)] = c.accel_bias_walk.powi(2) * dt;
        }

        let n = s.dim();
        let p = &mut s.covariance;
        let pcc: Matrix15 = p.fixed_view::<CORE_DIM, CORE_DIM>(0, 0).into_owned();
        p.fixed_view_mut::<CORE_DIM, CORE_DIM>(0, 0)
            .copy_from(&(phi * pcc * phi.transpose() + q));
        if n > CORE_DIM {
            let rest = n - CORE_DIM;
            let pcr = p.view((0, CORE_DIM), (CORE_DIM, rest)).into_owned();
            let new = phi * pcr;
            p.view_mut((0, CORE_DIM), (CORE_DIM, rest)).copy_from(&new);
            p.view_mut((CORE_DIM, 0), (rest, CORE_DIM))
                .copy_from(&new.transpose());
        }
        s.symmetrize();
        s.t = next.t;
        s.pose = next.pose;
        s.velocity = next.velocity;
        Ok(())
    }

    /// Predicted measurement of a feature and its 2×dim Jacobian.
    fn predict_measurement(
        &self,
        gi: usize,
        fi: usize,
        layout: &Layout,
    ) -> (Vector2<f64>, DMatrix<f64>) {
        let s = &self.state;
        let g = &s.groups[gi];
        let f = &g.features[fi];
        let ch = chain(s, g, f);
        let dpi = projection_jacobian(&ch.qc);
        let rcb = *s.alignment.r();
        let rt = s.pose.r().transpose();
        let rj = *g.pose.r();
        let c = rcb * rt * rj * rcb.transpose();
        let mut h = DMatrix::zeros(2, layout.dim);
        let mut put = |col: usize, block: Matrix3<f64>, cols: usize| {
            let j = dpi * block;
            for r in 0..2 {
                for k in 0..cols {
                    h[(r, col + k)] += j[(r, k)];
                }
            }
        };
        // Body pose.
        put(0, rcb * hat(&ch.qb), 3);
        put(3, -rcb * rt, 3);
        // Alignment.
        put(
            ALIGNMENT_OFFSET,
            -rcb * hat(&ch.qb) + rcb * rt * rj * hat(&ch.pb),
            3,
        );
        put(ALIGNMENT_OFFSET + 3, Matrix3::identity() - c, 3);
        // Group pose, rotation perturbed in the world frame.
        let gb = layout.group_pose[gi];
        put(gb.offset, -rcb * rt * hat(&(rj * ch.pb)), gb.dim().min(3));
        if let Some(o) = gb.yaw_translation() {
            put(o + 1, rcb * rt, 3);
        }
        // Feature.
        let (b, d) = layout.features[gi][fi];
        let z = f.log_depth.exp();
        if let Some(o) = b {
            let dy = c * Matrix3::identity().fixed_columns::<2>(0) * z;
            let j = dpi * dy;
            for r in 0..2 {
                for k in 0..2 {
                    h[(r, o + k)] += j[(r, k)];
                }
            }
        }
        let jd = dpi * c * ch.xc;
        h[(0, d)] += jd.x;
        h[(1, d)] += jd.y;
        (Vector2::new(ch.qc.x / ch.qc.z, ch.qc.y / ch.qc.z), h)
    }

    /// Predicted bearing of a tracked feature and its Jacobian with respect
    /// to the error state.
    pub fn measurement(&self, feature: usize) -> Option<(Vector2<f64>, DMatrix<f64>)> {
        let (gi, fi) = self.find(feature)?;
        Some(self.predict_measurement(gi, fi, &self.state.layout()))
    }

    /// Locates a feature id as (group index, feature index).
    fn find(&self, id: usize) -> Option<(usize, usize)> {
        self.state.groups.iter().enumerate().find_map(|(gi, g)| {
            g.features
                .iter()
                .position(|f| f.id == id)
                .map(|fi| (gi, fi))
        })
    }

    /// EKF update with the frame's measurements of tracked features.
    pub fn update_vision(&mut self, frame: &Frame, skip: &[usize]) -> UpdateStats {
        let mut stats = UpdateStats {
            t: frame.t,
            ..Default::default()
        };
        let layout = self.state.layout();
        let r_var = self.config.pixel_noise.powi(2);
        let mut rows: Vec<(usize, Vector2<f64>, DMatrix<f64>)> = vec![];
        for m in &frame.measurements {
            if skip.contains(&m.feature) {
                continue;
            }
            let Some((gi, fi)) = self.find(m.feature) else {
                continue;
            };
            let (pred, h) = self.predict_measurement(gi, fi, &layout);
            let ch = chain(
                &self.state,
                &self.state.groups[gi],
                &self.state.groups[gi].features[fi],
            );
            if ch.qc.z <= 0.0 {
                stats.rejected += 1;
                continue;
            }
            rows.push((m.feature, m.y - pred, h));
        }
        // Per-feature gate on the marginal innovation covariance.
        let p = &self.state.covariance;
        rows.retain(|(_, r, h)| {
            let s = h * p * h.transpose() + DMatrix::identity(2, 2) * r_var;
            let ok = s
                .clone()
                .cholesky()
                .map(|c| {
                    let rv = DVector::from_column_slice(r.as_slice());
                    rv.dot(&c.solve(&rv)) <= self.config.gate
                })
                .unwrap_or(false);
            if !ok {
                stats.rejected += 1;
            }
            ok
        });
        if rows.is_empty() {
            return stats;
        }
        let m = 2 * rows.len();
        let n = layout.dim;
        let mut h = DMatrix::zeros(m, n);
        let mut r = DVector::zeros(m);
        for (k, (id, res, hk)) in rows.iter().enumerate() {
            h.view_mut((2 * k, 0), (2, n)).copy_from(hk);
            r[2 * k] = res.x;
            r[2 * k + 1] = res.y;
            stats.innovations.push((*id, *res));
        }
        let pht = p * h.transpose();
        let s = &h * &pht + DMatrix::identity(m, m) * r_var;
        let Some(chol) = s.cholesky() else {
            stats.innovations.clear();
            stats.skipped = Some("innovation covariance not positive definite".into());
            return stats;
        };
        stats.nis = r.dot(&chol.solve(&r));
        stats.dof = m;
        let k = chol.solve(&pht.transpose()).transpose();
        let dx = &k * &r;
        let p = &self.state.covariance;
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let joseph = &ikh * p * ikh.transpose() + (&k * k.transpose()) * r_var;
        self.state.covariance = joseph;
        self.state.symmetrize();
        self.state.retract(&dx);
        stats
    }

    /// Pins group `gi` as the reference: conditions on the pinned pose
    /// directions and removes them.
    fn pin_group(&mut self, gi: usize) {
        let layout = self.state.layout();
        let gb = layout.group_pose[gi];
        if gb.yaw_translation().is_some() {
            let start = gb.offset + self.state.reference_pin.kept();
            let idx: Vec<usize> = (start..gb.offset + 6).collect();
            self.state.pin_indices(&idx);
        }
        self.state.groups[gi].pinned = true;
        self.state.reference = Some(self.state.groups[gi].id);
    }

    /// Drops lost features and empty groups, switches the reference group
    /// when it is lost, and opens a group when enough new features co-appear.
    pub fn manage_groups(&mut self, frame: &Frame) -> GroupEvents {
        let mut ev = GroupEvents::default();
        let seen: BTreeSet<usize> = frame.measurements.iter().map(|m| m.feature).collect();

        // Drop features not seen in this frame.
        let layout = self.state.layout();
        let mut remove = vec![];
        for (gi, g) in self.state.groups.iter().enumerate() {
            for (fi, f) in g.features.iter().enumerate() {
                if !seen.contains(&f.id) {
                    let (b, d) = layout.features[gi][fi];
                    if let Some(o) = b {
                        remove.extend([o, o + 1]);
                    }
                    remove.push(d);
                    ev.dropped_features.push(f.id);
                }
            }
            if g.features.iter().all(|f| !seen.contains(&f.id)) {
                remove.extend(layout.group_pose[gi].range());
            }
        }
        if !remove.is_empty() {
            self.state.remove_indices(&remove);
        }
        for g in &mut self.state.groups {
            g.features.retain(|f| seen.contains(&f.id));
        }
        let before: Vec<usize> = self.state.groups.iter().map(|g| g.id).collect();
        self.state.groups.retain(|g| !g.features.is_empty());
        ev.removed_groups = before
            .into_iter()
            .filter(|id| !self.state.groups.iter().any(|g| g.id == *id))
            .collect();
        for t in &mut self.tracks {
            if ev.dropped_features.contains(&t.feature) {
                t.status = TrackStatus::Dropped;
            }
        }

        // Reference lost: the oldest remaining group takes over.
        let old = self.state.reference;
        if old.is_some_and(|id| ev.removed_groups.contains(&id)) {
            self.state.reference = None;
            if !self.state.groups.is_empty() {
                self.pin_group(0);
                ev.reference_switch = Some((old, self.state.groups[0].id));
            }
        }

        // New features.
        let known = self.state.feature_ids();
        let fresh: Vec<&Measurement> = frame
            .measurements
            .iter()
            .filter(|m| !known.contains(&m.feature))
            .collect();
        if fresh.len() >= self.config.min_group_features {
            let id = self.next_group;
            self.next_group += 1;
            // A wholly pinned reference frame leaves no gauge for anchors.
            let anchored =
                self.state.reference.is_some() || self.state.reference_pin != ReferencePin::Full;
            self.open_group(id, frame.t, &fresh, anchored);
            ev.created_group = Some(id);
            ev.initialized = fresh.iter().map(|m| m.feature).collect();
            if self.state.reference.is_none() {
                let gi = self.state.groups.len() - 1;
                self.pin_group(gi);
                ev.reference_switch = Some((old, id));
            }
        }
        for m in &frame.measurements {
            match self
                .tracks
                .iter_mut()
                .find(|t| t.feature == m.feature && t.status == TrackStatus::Active)
            {
                Some(t) => t.measurements.push((frame.t, m.y)),
                None if self.state.feature_ids().contains(&m.feature) => {
                    self.tracks.push(FeatureTrack {
                        feature: m.feature,
                        group: self
                            .state
                            .groups
                            .iter()
                            .find(|g| g.features.iter().any(|f| f.id == m.feature))
                            .map(|g| g.id),
                        measurements: vec![(frame.t, m.y)],
                        status: TrackStatus::Active,
                    })
                }
                None => {}
            }
        }
        ev
    }

    /// Appends a group at the current pose with the given first measurements.
    fn open_group(&mut self, id: usize, t: f64, fresh: &[&Measurement], anchored: bool) {
        let c = self.config;
        let bearings: Vec<Vector3<f64>> = fresh
            .iter()
            .map(|m| Vector3::new(m.y.x, m.y.y, 1.0))
            .collect();
        let anchors = choose_anchor_triplet(&bearings)
            .filter(|_| anchored)
            .unwrap_or([usize::MAX; 3]);
        let features: Vec<FeatureState> = fresh
            .iter()
            .enumerate()
            .map(|(k, m)| FeatureState {
                id: m.feature,
                bearing: m.y,
                log_depth: c.initial_depth.ln(),
                bearing_pinned: anchors.contains(&k),
            })
            .collect();
        let n = self.state.dim();
        let extra = 6 + features
            .iter()
            .map(|f| if f.bearing_pinned { 1 } else { 3 })
            .sum::<usize>();
        // Sources: existing state, anchor bearing noise (6), then per feature
        // free-bearing noise (2) and log-depth prior (1).
        let n_src = 6 + features
            .iter()
            .map(|f| if f.bearing_pinned { 1 } else { 3 })
            .sum::<usize>();
        let mut gs = DMatrix::zeros(extra, n);
        let mut gn = DMatrix::zeros(extra, n_src);
        let mut noise = DVector::zeros(n_src);
        // Group rotation error is world-frame: δφ = R δθ.
        gs.view_mut((0, 0), (3, 3)).copy_from(self.state.pose.r());
        gs.view_mut((3, 3), (3, 3))
            .copy_from(&DMatrix::identity(3, 3));
        // Pinned anchor bearings carry their first-measurement noise. It is
        // equivalent to a perturbation δ of the group frame with J_a δ = n_a,
        // so the group pose and the free bearings absorb it.
        let jac = |f: &FeatureState| -> SMatrix<f64, 2, 6> {
            let xc = Vector3::new(f.bearing.x, f.bearing.y, 1.0) * c.initial_depth;
            let a = &self.state.alignment;
            let pb = a.r().transpose() * (xc - a.translation);
            let mut m = SMatrix::<f64, 3, 6>::zeros();
            m.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(a.r() * hat(&pb) * self.state.pose.r().transpose()));
            m.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-a.r() * self.state.pose.r().transpose()));
            projection_jacobian(&xc) * m
        };
        let mut ja = SMatrix::<f64, 6, 6>::zeros();
        let mut row = 0;
        for f in features.iter().filter(|f| f.bearing_pinned) {
            ja.fixed_view_mut::<2, 6>(row, 0).copy_from(&jac(f));
            row += 2;
        }
        let ja_inv = if row == 6 { ja.try_inverse() } else { None };
        if let Some(inv) = ja_inv {
            gn.view_mut((0, 0), (6, 6)).copy_from(&(-inv));
        }
        for k in 0..6 {
            noise[k] = c.pixel_noise.powi(2);
        }
        let (mut r, mut s_col) = (6, 6);
        for f in &features {
            if !f.bearing_pinned {
                gn[(r, s_col)] = 1.0;
                gn[(r + 1, s_col + 1)] = 1.0;
                noise[s_col] = c.pixel_noise.powi(2);
                noise[s_col + 1] = c.pixel_noise.powi(2);
                if let Some(inv) = ja_inv {
                    gn.view_mut((r, 0), (2, 6)).copy_from(&(-jac(f) * inv));
                }
                r += 2;
                s_col += 2;
            }
            gn[(r, s_col)] = 1.0;
            noise[s_col] = c.log_depth_std.powi(2);
            r += 1;
            s_col += 1;
        }
        let p_old = &self.state.covariance;
        let cross = &gs * p_old;
        let block = &cross * gs.transpose() + &gn * DMatrix::from_diagonal(&noise) * gn.transpose();
        let mut p = DMatrix::zeros(n + extra, n + extra);
        p.view_mut((0, 0), (n, n)).copy_from(p_old);
        p.view_mut((n, 0), (extra, n)).copy_from(&cross);
        p.view_mut((0, n), (n, extra)).copy_from(&cross.transpose());
        p.view_mut((n, n), (extra, extra)).copy_from(&block);
        self.state.covariance = p;
        self.state.groups.push(GroupState {
            id,
            birth_time: t,
            pose: self.state.pose,
            pinned: false,
            features,
        });
    }

    /// Group management followed by the vision update.
    pub fn process_frame(&mut self, frame: &Frame) -> (GroupEvents, UpdateStats) {
        let ev = self.manage_groups(frame);
        let stats = self.update_vision(frame, &ev.initialized);
        (ev, stats)
    }
}
