//! Dual numbers for exact scalar partial derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn var(x: f64) -> Self {
        Self { re: x, eps: 1.0 }
    }

    pub fn constant(x: f64) -> Self {
        Self { re: x, eps: 0.0 }
    }

    pub fn tanh(self) -> Self {
        let t = super::tape::tanh(self.re);
        Self {
            re: t,
            eps: self.eps * (1.0 - t * t),
        }
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Self {
            re: e,
            eps: self.eps * e,
        }
    }

    pub fn ln(self) -> Self {
        Self {
            re: self.re.ln(),
            eps: self.eps / self.re,
        }
    }

    pub fn sigmoid(self) -> Self {
        let s = crate::autodiff::tape::sigmoid(self.re);
        Self {
            re: s,
            eps: self.eps * s * (1.0 - s),
        }
    }

    pub fn powi(self, n: i32) -> Self {
        Self {
            re: self.re.powi(n),
            eps: self.eps * n as f64 * self.re.powi(n - 1),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            re: self.re / o.re,
            eps: (self.eps * o.re - self.re * o.eps) / (o.re * o.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual {
            re: self.re + o,
            eps: self.eps,
        }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual {
            re: self.re * o,
            eps: self.eps * o,
        }
    }
}

impl Mul<Dual> for f64 {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        o * self
    }
}
