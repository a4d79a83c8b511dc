//! Minimum-excitation functionals of a vector signal over an interval:
//!
//! * `M(f:I) = sup_t ‖f(t)‖`
//! * `m(f:I) = inf_{‖x‖=1} sup_t |f(t)·x|`
//! * `m̄(f:I) = sqrt(max(0, 2m² − M²))`
//!
//! `m` is found by evaluating a Fibonacci lattice on the half sphere (the
//! objective is even in `x`) and refining the best lattice directions with
//! golden-section line searches in tangent coordinates. The refined value is
//! attained at an actual direction, so it bounds the infimum from above. A
//! pessimistic lower envelope, the lattice minimum minus a Lipschitz
//! correction `M · r_cover`, is reported alongside for use in denominators.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIRECTIONS: usize = 4096;
pub const DEFAULT_REFINE_ITERS: usize = 50;

/// Chord covering radius of the half-sphere lattice with `n` points is below
/// `COVER_CONSTANT / sqrt(n)` (checked in the tests).
pub const COVER_CONSTANT: f64 = 2.5;

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
const GOLDEN_RATIO_INV: f64 = 0.618_033_988_749_895;
const LINE_SEARCH_STEPS: usize = 30;
const REFINE_STARTS: usize = 4;

/// Closed time interval `[start, end]` (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Uniformly sampled 3-vector signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<Vector3<f64>>,
}

impl SignalWindow {
    pub fn new(t0: f64, dt: f64, values: Vec<Vector3<f64>>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::EmptyWindow(values.len()));
        }
        Ok(SignalWindow { t0, dt, values })
    }

    /// Samples `f` on `[interval.start, interval.end]` with step `dt`.
    pub fn from_fn(interval: Interval, dt: f64, f: impl Fn(f64) -> Vector3<f64>) -> Result<Self> {
        let n = (interval.length() / dt + 1e-9).floor() as usize + 1;
        Self::new(
            interval.start,
            dt,
            (0..n).map(|k| f(interval.start + k as f64 * dt)).collect(),
        )
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.t0, self.t0 + self.dt * (self.values.len() - 1) as f64)
    }

    /// `sup_t |f(t)·x|`.
    pub fn support(&self, x: &Vector3<f64>) -> f64 {
        self.values
            .iter()
            .map(|f| f.dot(x).abs())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        SignalWindow {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// `M(f:I)`.
pub fn excitation_max(f: &SignalWindow) -> Result<f64> {
    if f.values.is_empty() {
        return Err(Error::EmptyWindow(0));
    }
    Ok(f.values.iter().map(|v| v.norm()).fold(0.0, f64::max))
}

/// Result of the sphere search for `m(f:I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinExcitation {
    /// Refined value, attained at `direction`.
    pub value: f64,
    pub direction: Vector3<f64>,
    /// Minimum over the lattice before refinement.
    pub lattice_min: f64,
    /// Certified lower bound on the infimum over the sphere (for the sampled
    /// signal): every direction lies in a cell where the support function,
    /// being `M`-Lipschitz, stays above it.
    pub lower: f64,
}

/// Fibonacci lattice of `n` unit vectors covering the upper half sphere.
pub fn half_sphere_lattice(n: usize) -> Vec<Vector3<f64>> {
    let total = 2 * n;
    (0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / total as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = k as f64 * GOLDEN_ANGLE;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn tangent_basis(x: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if x.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = x.cross(&helper).normalize();
    let w = x.cross(&u);
    (u, w)
}

/// Golden-section refinement from `x0`; returns the best direction and value.
fn refine(f: &SignalWindow, x0: Vector3<f64>, radius: f64, iters: usize) -> (Vector3<f64>, f64) {
    let (u, w) = tangent_basis(&x0);
    let point = |a: f64, b: f64| (x0 + a * u + b * w).normalize();
    let (mut a, mut b) = (0.0, 0.0);
    let mut best = f.support(&x0);
    let mut r = radius;
    for i in 0..iters {
        let theta = i as f64 * GOLDEN_ANGLE;
        let (ds, dc) = theta.sin_cos();
        let eval = |s: f64| f.support(&point(a + s * dc, b + s * ds));
        let (mut lo, mut hi) = (-r, r);
        let mut x1 = hi - GOLDEN_RATIO_INV * (hi - lo);
        let mut x2 = lo + GOLDEN_RATIO_INV * (hi - lo);
        let mut f1 = eval(x1);
        let mut f2 = eval(x2);
        for _ in 0..LINE_SEARCH_STEPS {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - GOLDEN_RATIO_INV * (hi - lo);
                f1 = eval(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + GOLDEN_RATIO_INV * (hi - lo);
                f2 = eval(x2);
            }
        }
        let (s, fs) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if fs < best {
            best = fs;
            a += s * dc;
            b += s * ds;
            // Keep the bracket when the minimum sits near its edge.
            if s.abs() < 0.5 * r {
                r *= 0.8;
            }
        } else {
            r *= 0.8;
        }
    }
    (point(a, b), best)
}

/// `m(f:I)` by lattice search with `n_directions` points and `refine_iters`
/// golden-section line searches.
pub fn excitation_min(
    f: &SignalWindow,
    n_directions: usize,
    refine_iters: usize,
) -> Result<MinExcitation> {
    if f.values.is_empty() {
        return Err(Error::EmptyWindow(0));
    }
    let n = n_directions.max(8);
    let lattice = half_sphere_lattice(n);
    let values: Vec<f64> = lattice.par_iter().map(|x| f.support(x)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let lattice_min = values[order[0]];
    let cover = COVER_CONSTANT / (n as f64).sqrt();
    let big_m = excitation_max(f)?;

    let mut best = (lattice[order[0]], lattice_min);
    for &i in order.iter().take(REFINE_STARTS) {
        let cand = refine(f, lattice[i], cover, refine_iters);
        if cand.1 < best.1 {
            best = cand;
        }
    }
    let lower = certified_lower(f, &lattice, &values, cover, big_m, best.1);
    Ok(MinExcitation {
        value: best.1,
        direction: best.0,
        lattice_min,
        lower,
    })
}

/// Fraction of the refined value the lower bound aims to certify.
pub const LOWER_TARGET: f64 = 0.95;
/// Maximum subdivision depth of the certification.
const MAX_CELL_DEPTH: usize = 20;
/// Cap on support evaluations spent on certification.
const MAX_CELL_EVALS: usize = 60_000;

/// Square cell in the gnomonic chart of a lattice point: centre `(a, b)`,
/// half-side `half`. The chart is 1-Lipschitz onto the sphere, so every
/// direction of the cell is within `half·√2` of the centre's image.
#[derive(Clone, Copy)]
struct Cell {
    root: usize,
    a: f64,
    b: f64,
    half: f64,
    bound: f64,
}

/// Branch and bound over lattice cells: prune a cell once `h(c) − M·half·√2`
/// reaches the target, subdivide otherwise.
fn certified_lower(
    f: &SignalWindow,
    lattice: &[Vector3<f64>],
    values: &[f64],
    cover: f64,
    big_m: f64,
    upper: f64,
) -> f64 {
    let target = LOWER_TARGET * upper;
    if target <= 0.0 {
        return 0.0;
    }
    let bases: Vec<_> = lattice.iter().map(tangent_basis).collect();
    // A square of half-side tan(r) covers the spherical cap of radius r.
    let half0 = cover.min(1.0).tan();
    let radius = std::f64::consts::SQRT_2;
    let mut active: Vec<Cell> = values
        .iter()
        .enumerate()
        .map(|(root, &h)| Cell {
            root,
            a: 0.0,
            b: 0.0,
            half: half0,
            bound: h - big_m * half0 * radius,
        })
        .filter(|c| c.bound < target)
        .collect();
    let mut evals = 0;
    for _ in 0..MAX_CELL_DEPTH {
        if active.is_empty() || evals + 4 * active.len() > MAX_CELL_EVALS {
            break;
        }
        evals += 4 * active.len();
        active = active
            .par_iter()
            .flat_map_iter(|c| {
                let q = 0.5 * c.half;
                let (u, w) = bases[c.root];
                let x0 = lattice[c.root];
                [(-q, -q), (-q, q), (q, -q), (q, q)]
                    .into_iter()
                    .map(move |(da, db)| {
                        let (a, b) = (c.a + da, c.b + db);
                        let h = f.support(&(x0 + a * u + b * w).normalize());
                        Cell {
                            root: c.root,
                            a,
                            b,
                            half: q,
                            bound: h - big_m * q * radius,
                        }
                    })
            })
            .filter(|c| c.bound < target)
            .collect();
    }
    active
        .iter()
        .map(|c| c.bound)
        .fold(target, f64::min)
        .max(0.0)
}

/// `sqrt(max(0, 2m² − M²))`.
pub fn bar_from(m: f64, big_m: f64) -> f64 {
    (2.0 * m * m - big_m * big_m).max(0.0).sqrt()
}

/// `m̄(f:I)` with default search settings.
pub fn excitation_bar(f: &SignalWindow) -> Result<f64> {
    let m = excitation_min(f, DEFAULT_DIRECTIONS, DEFAULT_REFINE_ITERS)?;
    Ok(bar_from(m.value, excitation_max(f)?))
}

/// All functionals of one signal over one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub interval: Interval,
    /// Refined `m`, an upper estimate of the infimum.
    pub m: f64,
    /// Pessimistic lower envelope of `m`.
    pub m_lower: f64,
    #[serde(rename = "m_max")]
    pub big_m: f64,
    pub m_bar: f64,
    pub direction: Vector3<f64>,
}

pub fn excitation_report(f: &SignalWindow) -> Result<ExcitationReport> {
    let min = excitation_min(f, DEFAULT_DIRECTIONS, DEFAULT_REFINE_ITERS)?;
    let big_m = excitation_max(f)?;
    Ok(ExcitationReport {
        interval: f.interval(),
        m: min.value,
        m_lower: min.lower,
        big_m,
        m_bar: bar_from(min.value, big_m),
        direction: min.direction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, spectral_norm};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(values: Vec<Vector3<f64>>) -> SignalWindow {
        SignalWindow::new(0.0, 1.0, values).unwrap()
    }

    fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> SignalWindow {
        // Anisotropic so that m, M and m̄ differ.
        let scale = Vector3::new(
            rng.gen_range(0.2..2.0),
            rng.gen_range(0.2..2.0),
            rng.gen_range(0.2..2.0),
        );
        window(
            (0..n)
                .map(|_| Vector3::from_fn(|i, _| scale[i] * rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn max_examples() {
        let f = window(vec![Vector3::new(3.0, 0.0, 0.0); 5]);
        assert_eq!(excitation_max(&f).unwrap(), 3.0);
        let circ = SignalWindow::from_fn(Interval::new(0.0, std::f64::consts::TAU), 1e-3, |t| {
            Vector3::new(t.cos(), t.sin(), 0.0)
        })
        .unwrap();
        assert!((excitation_max(&circ).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_signal(&mut rng, 50);
        let brute = f.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert_eq!(excitation_max(&f).unwrap(), brute);
        assert!(SignalWindow::new(0.0, 1.0, vec![]).is_err());
        assert!(matches!(
            SignalWindow::new(0.0, 1.0, vec![Vector3::x()]),
            Err(Error::EmptyWindow(1))
        ));
    }

    #[test]
    fn min_of_constant_is_zero() {
        let f = window(vec![Vector3::x(); 4]);
        let m = excitation_min(&f, 4096, 50).unwrap();
        assert!(m.value < 1e-6, "{}", m.value);
        assert!(m.direction.x.abs() < 1e-6);
    }

    #[test]
    fn min_of_axis_sweep() {
        let f = window(vec![Vector3::x(), Vector3::y(), Vector3::z()]);
        let m = excitation_min(&f, 4096, 50).unwrap();
        let expect = 1.0 / 3f64.sqrt();
        assert!((m.value - expect).abs() < 1e-3, "{}", m.value);
        assert!(m.value >= expect - 1e-12);
        // Brute-force grid over the sphere agrees.
        let mut grid_min = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            let th = std::f64::consts::PI * i as f64 / n as f64;
            for j in 0..2 * n {
                let ph = std::f64::consts::PI * j as f64 / n as f64;
                let x = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                grid_min = grid_min.min(f.support(&x));
            }
        }
        assert!((grid_min - expect).abs() < 1e-2);
        assert_eq!(bar_from(m.value, 1.0), 0.0);
    }

    fn sphere_signal(r: f64) -> SignalWindow {
        // Spiral densely covering the sphere.
        let n = 40_000;
        window(
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let phi = k as f64 * GOLDEN_ANGLE;
                    r * Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
                })
                .collect(),
        )
    }

    #[test]
    fn dense_sphere_gives_radius() {
        let r = 2.5;
        let f = sphere_signal(r);
        let m = excitation_min(&f, 4096, 50).unwrap();
        assert!((m.value - r).abs() < 1e-3);
        assert!((excitation_max(&f).unwrap() - r).abs() < 1e-12);
        let bar = bar_from(m.value, excitation_max(&f).unwrap());
        assert!((bar - r).abs() < 1e-2);
    }

    #[test]
    fn ordering_and_lower_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let f = random_signal(&mut rng, 40);
            let r = excitation_report(&f).unwrap();
            assert!(r.big_m >= r.m && r.m >= r.m_bar && r.m_bar >= 0.0);
            assert!(r.m_lower <= r.m);
            // The lower envelope sits below a much finer search.
            let fine = excitation_min(&f, 65_536, 50).unwrap();
            assert!(r.m_lower <= fine.value + 1e-12);
            assert!(r.m <= fine.lattice_min + 1e-9);
            // Certification reaches its target on well-spread signals.
            assert!(r.m_lower >= 0.5 * r.m, "{} vs {}", r.m_lower, r.m);
        }
    }

    #[test]
    fn lattice_covering_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[256usize, 1024, 4096] {
            let lattice = half_sphere_lattice(n);
            let mut worst: f64 = 0.0;
            for _ in 0..4000 {
                let mut x = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64));
                x.normalize_mut();
                if x.z < 0.0 {
                    x = -x;
                }
                let d = lattice
                    .iter()
                    .map(|l| (l - x).norm().min((l + x).norm()))
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(d);
            }
            assert!(
                worst < COVER_CONSTANT / (n as f64).sqrt(),
                "n={n} worst={worst}"
            );
        }
    }

    #[test]
    fn scaling_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_signal(&mut rng, 30);
        let a = excitation_report(&f).unwrap();
        for c in [-2.0, 0.5, 3.0] {
            let b = excitation_report(&f.scaled(c)).unwrap();
            assert!((b.big_m - c.abs() * a.big_m).abs() < 1e-12);
            assert!((b.m - c.abs() * a.m).abs() < 1e-6 * c.abs());
            assert!((b.m_bar - c.abs() * a.m_bar).abs() < 1e-5 * c.abs());
        }
    }

    #[test]
    fn converse_cauchy_schwarz_lemmas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut violations = 0;
        for _ in 0..200 {
            let f = random_signal(&mut rng, 25);
            let rep = excitation_report(&f).unwrap();
            let r = random_rotation(&mut rng);
            let sup =
                |a: &Matrix3<f64>| f.values.iter().map(|v| (a * v).norm()).fold(0.0, f64::max);

            let (c1, c2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let a = Matrix3::identity() * c1 + r.matrix() * c2;
            if sup(&a) < spectral_norm(&a) * rep.m_bar - 1e-12 {
                violations += 1;
            }
            let a = Matrix3::identity() - r.matrix();
            if sup(&a) < spectral_norm(&a) * rep.m - 1e-12 {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }
}
