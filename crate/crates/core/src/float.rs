//! Thin wrappers over `libm` so the crate computes identically with and
//! without `std`.

pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub(crate) fn pow(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub(crate) fn cbrt(x: f64) -> f64 {
    libm::cbrt(x)
}

/// Integer power by repeated multiplication; exact operation order keeps
/// results reproducible across platforms.
pub(crate) fn ipow(x: f64, k: u32) -> f64 {
    let mut out = 1.0;
    for _ in 0..k {
        out *= x;
    }
    out
}

/// Odd k-th root extended to negative arguments, `sign(x) * |x|^(1/k)`.
pub(crate) fn odd_root(x: f64, k: u32) -> f64 {
    debug_assert!(k % 2 == 1);
    let mag = match k {
        1 => return x,
        3 => cbrt(x.abs()),
        _ => pow(x.abs(), 1.0 / k as f64),
    };
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}
