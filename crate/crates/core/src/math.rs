//! `f64` helpers backed by `libm` so the crate stays `no_std`.

pub use core::f64::consts::PI;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * floor((a + PI) / two_pi);
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

/// `ceil(ratio * n)` computed without float drift for ratios like 0.5.
pub fn ceil_fraction(ratio: f64, n: usize) -> usize {
    let raw = ratio * n as f64;
    let r = round(raw);
    let k = if (raw - r).abs() < 1e-9 { r } else { ceil(raw) };
    (k as usize).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for i in -100..100 {
            let a = i as f64 * 0.37;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w));
            assert!((sin(w) - sin(a)).abs() < 1e-9 && (cos(w) - cos(a)).abs() < 1e-9);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn ceil_fraction_half() {
        assert_eq!(ceil_fraction(0.5, 1), 1);
        assert_eq!(ceil_fraction(0.5, 10), 5);
        assert_eq!(ceil_fraction(0.5, 11), 6);
        assert_eq!(ceil_fraction(0.3, 10), 3);
        assert_eq!(ceil_fraction(1.0, 7), 7);
    }

    #[test]
    fn sigmoid_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
