//! Scalar truncated Taylor jets carrying a value and its first three time derivatives.

use std::ops::{Add, Mul, Neg, Sub};

/// `[f, f', f'', f''']` at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet(pub [f64; 4]);

impl Jet {
    pub fn constant(c: f64) -> Self {
        Jet([c, 0.0, 0.0, 0.0])
    }

    /// The identity function `t ↦ t` at `t`.
    pub fn variable(t: f64) -> Self {
        Jet([t, 1.0, 0.0, 0.0])
    }

    pub fn value(&self) -> f64 {
        self.0[0]
    }

    pub fn d(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn scale(self, c: f64) -> Self {
        Jet(self.0.map(|x| x * c))
    }

    /// `(sin u, cos u)` with chain-rule derivatives.
    pub fn sin_cos(self) -> (Jet, Jet) {
        let [u, u1, u2, u3] = self.0;
        let (s, c) = u.sin_cos();
        let sin = Jet([
            s,
            c * u1,
            -s * u1 * u1 + c * u2,
            -c * u1 * u1 * u1 - 3.0 * s * u1 * u2 + c * u3,
        ]);
        let cos = Jet([
            c,
            -s * u1,
            -c * u1 * u1 - s * u2,
            s * u1 * u1 * u1 - 3.0 * c * u1 * u2 - s * u3,
        ]);
        (sin, cos)
    }

    /// Composition `f(self)` given `[f, f', f'', f''']` evaluated at `self.value()`.
    pub fn compose(self, f: [f64; 4]) -> Jet {
        let [_, u1, u2, u3] = self.0;
        Jet([
            f[0],
            f[1] * u1,
            f[2] * u1 * u1 + f[1] * u2,
            f[3] * u1 * u1 * u1 + 3.0 * f[2] * u1 * u2 + f[1] * u3,
        ])
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet([
            self.0[0] + o.0[0],
            self.0[1] + o.0[1],
            self.0[2] + o.0[2],
            self.0[3] + o.0[3],
        ])
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let [a0, a1, a2, a3] = self.0;
        let [b0, b1, b2, b3] = o.0;
        Jet([
            a0 * b0,
            a1 * b0 + a0 * b1,
            a2 * b0 + 2.0 * a1 * b1 + a0 * b2,
            a3 * b0 + 3.0 * a2 * b1 + 3.0 * a1 * b2 + a0 * b3,
        ])
    }
}
