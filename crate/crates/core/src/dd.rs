//! Double-double arithmetic: a value is the unevaluated sum `hi + lo` with
//! `|lo| <= ulp(hi) / 2`, which carries about 106 bits.
//!
//! Only what evaluation needs is here: sums, products, division, and `exp`
//! and `ln` accurate to a few parts in 1e30, so that a perplexity computed
//! through them is the correctly rounded value of the exact expression.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    /// `a - b` without rounding.
    pub fn diff(a: f64, b: f64) -> Dd {
        let (s, e) = two_sum(a, -b);
        quick_two_sum(s, e)
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }

    /// Multiplication by `2^k`, exact barring overflow or underflow.
    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi > 709.8 {
            return Dd::from(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // |r| <= ln 2 / 2^11 after the shift.
        let r = (self - LN2 * k).ldexp(-10);
        // s = exp(r) - 1, squared back up as (1 + s)^2 - 1 = 2s + s^2 so
        // that rounding stays relative to s rather than to 1 + s.
        let mut p = Dd::ONE;
        for i in (2..=10).rev() {
            p = Dd::ONE + r * p / i as f64;
        }
        let mut s = r * p;
        for _ in 0..10 {
            s = s * 2.0 + s * s;
        }
        (s + Dd::ONE).ldexp(k as i32)
    }

    pub fn ln(self) -> Dd {
        if !(self.hi > 0.0) || !self.is_finite() {
            return Dd::from(self.hi.ln());
        }
        // One Newton step on exp(y) = x doubles the 53 correct bits.
        let y = Dd::from(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return Dd::from(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let head = quick_two_sum(s, e + t);
        quick_two_sum(head.hi, head.lo + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        if !p.is_finite() {
            return Dd::from(p);
        }
        let e = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        quick_two_sum(p, e)
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    fn mul(self, o: f64) -> Dd {
        self * Dd::from(o)
    }
}

impl Div<f64> for Dd {
    type Output = Dd;
    fn div(self, o: f64) -> Dd {
        let q1 = self.hi / o;
        if !q1.is_finite() {
            return Dd::from(q1);
        }
        let r = self - Dd::from(o) * q1;
        let q2 = r.hi / o;
        let r = r - Dd::from(o) * q2;
        let q3 = r.hi / o;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

impl std::iter::Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}
