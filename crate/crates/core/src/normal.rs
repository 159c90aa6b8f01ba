//! Standard normal tail masses in log space.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use libm::erfc;

/// Past this point `erfc` is evaluated through the scaled form
/// `erfc(x) = exp(-x²) · erfcx(x)`.
const SCALED_ERFC_FROM: f64 = 8.0;

/// `exp(x²) erfc(x)` for `x >= 8` by backward evaluation of the Laplace
/// continued fraction.
fn erfcx_large(x: f64) -> f64 {
    let mut k = x;
    for j in (1..=60).rev() {
        k = x + (j as f64 * 0.5) / k;
    }
    1.0 / (PI.sqrt() * k)
}

/// `ln erfc(x)`, finite for every finite `x`.
pub fn ln_erfc(x: f64) -> f64 {
    if x == f64::INFINITY {
        f64::NEG_INFINITY
    } else if x >= SCALED_ERFC_FROM {
        erfcx_large(x).ln() - x * x
    } else {
        erfc(x).ln()
    }
}

/// `ln P(N(0,1) > x)`.
pub fn ln_upper_tail(x: f64) -> f64 {
    if x >= 0.0 {
        ln_erfc(x * FRAC_1_SQRT_2) - LN_2
    } else {
        (-0.5 * erfc(-x * FRAC_1_SQRT_2)).ln_1p()
    }
}

/// `P(N(0,1) > x)`.
pub fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `ln(1 - e^x)` for `x <= 0`.
pub fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln P(lo < N(0,1) < hi)`, accurate far into either tail.
pub fn ln_interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return f64::NEG_INFINITY;
    }
    if lo >= 0.0 {
        let a = ln_upper_tail(lo);
        let b = ln_upper_tail(hi);
        a + ln_one_minus_exp(b - a)
    } else if hi <= 0.0 {
        ln_interval_mass(-hi, -lo)
    } else {
        (-(upper_tail(-lo) + upper_tail(hi))).ln_1p()
    }
}
