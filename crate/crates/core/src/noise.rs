//! Standardized non-Gaussian noise families and their calibration to a
//! target 1-Wasserstein distance from N(0, 1).
//!
//! Every family contains the standard normal as a limit member:
//!
//! | kind            | shape            | Gaussian member |
//! |-----------------|------------------|-----------------|
//! | skewnorm        | skewness `α`     | `α = 0`         |
//! | exponnorm       | `K` (exp. scale) | `K = 0`         |
//! | gennorm_steep   | `β < 2`          | `β = 2`         |
//! | gennorm_flat    | `β > 2`          | `β = 2`         |
//! | student_t       | degrees `ν > 2`  | `ν = ∞`         |
//!
//! `W₁(F, Φ) = ∫₀¹ |F⁻¹(u) − Φ⁻¹(u)| du` is evaluated with Gauss–Legendre
//! quadrature on the quantile functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use libm::erfc;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::normal::{ln_upper_tail, upper_tail};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Skewnorm,
    Exponnorm,
    GennormSteep,
    GennormFlat,
    StudentT,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] =
        [NoiseKind::Skewnorm, NoiseKind::Exponnorm, NoiseKind::GennormSteep, NoiseKind::GennormFlat, NoiseKind::StudentT];

    pub fn gaussian_shape(self) -> f64 {
        match self {
            NoiseKind::Skewnorm | NoiseKind::Exponnorm => 0.0,
            NoiseKind::GennormSteep | NoiseKind::GennormFlat => 2.0,
            NoiseKind::StudentT => f64::INFINITY,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Skewnorm => "skewnorm",
            NoiseKind::Exponnorm => "exponnorm",
            NoiseKind::GennormSteep => "gennorm_steep",
            NoiseKind::GennormFlat => "gennorm_flat",
            NoiseKind::StudentT => "student_t",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "skewnorm" => Ok(NoiseKind::Skewnorm),
            "exponnorm" | "exponorm" => Ok(NoiseKind::Exponnorm),
            "gennorm_steep" | "gennormsteep" => Ok(NoiseKind::GennormSteep),
            "gennorm_flat" | "gennormflat" => Ok(NoiseKind::GennormFlat),
            "student_t" | "t" => Ok(NoiseKind::StudentT),
            other => Err(Error::Config(format!("unknown noise family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFamily {
    pub kind: NoiseKind,
    pub shape: f64,
    /// Shift and scale to mean 0, variance 1.
    #[serde(default = "default_true")]
    pub standardized: bool,
}

fn default_true() -> bool {
    true
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

fn ln_phi(x: f64) -> f64 {
    ln_upper_tail(-x)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Owen's T function `T(h, a)`.
fn owens_t(h: f64, a: f64) -> f64 {
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    let h = h.abs();
    if a <= 1.0 {
        // (1/2π) ∫₀ᵃ exp(-h²(1+x²)/2) / (1+x²) dx
        let (nodes, weights) = gauss_legendre(64);
        let half = 0.5 * a;
        let sum: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(&t, &w)| {
                let x = half * (t + 1.0);
                let q = 1.0 + x * x;
                w * (-0.5 * h * h * q).exp() / q
            })
            .sum();
        sum * half / (2.0 * PI)
    } else {
        let ah = a * h;
        0.5 * phi(h) + 0.5 * phi(ah) - phi(h) * phi(ah) - owens_t(ah, 1.0 / a)
    }
}

fn lower_gamma_reg(a: f64, x: f64) -> f64 {
    if x.is_infinite() {
        1.0
    } else if x <= 0.0 {
        0.0
    } else {
        gamma_lr(a, x)
    }
}

/// Inverse of the regularized lower incomplete gamma function in `x`, by
/// Newton steps on `ln x` inside a bisection bracket.
fn inverse_gamma_p(a: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let ln_ga = ln_gamma(a);
    // small-x series P(a, x) ≈ x^a / Γ(a + 1)
    let mut t = ((p.ln() + ln_gamma(a + 1.0)) / a).min(a.max(1.0).ln() + 1.0);
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..300 {
        let x = t.exp();
        let f = lower_gamma_reg(a, x) - p;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        // dP/dt = x · density(x)
        let slope = (a * t - x - ln_ga).exp();
        let mut next = t - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                (false, false) => t,
            };
        }
        if (next - t).abs() < 1e-15 * (1.0 + t.abs()) {
            return next.exp();
        }
        t = next;
    }
    t.exp()
}

impl NoiseFamily {
    pub fn gaussian(kind: NoiseKind) -> Self {
        NoiseFamily { kind, shape: kind.gaussian_shape(), standardized: true }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        let ok = match self.kind {
            NoiseKind::Skewnorm => s.is_finite(),
            NoiseKind::Exponnorm => s.is_finite() && s >= 0.0,
            NoiseKind::GennormSteep => s > 0.0 && s <= 2.0,
            NoiseKind::GennormFlat => s >= 2.0 && s.is_finite(),
            NoiseKind::StudentT => s > 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("shape {s} is invalid for {}", self.kind)))
        }
    }

    /// Mean and standard deviation of the unstandardized member.
    fn raw_moments(&self) -> (f64, f64) {
        let s = self.shape;
        match self.kind {
            NoiseKind::Skewnorm => {
                let delta = s / (1.0 + s * s).sqrt();
                let m = delta * (2.0 / PI).sqrt();
                (m, (1.0 - m * m).sqrt())
            }
            NoiseKind::Exponnorm => (s, (1.0 + s * s).sqrt()),
            NoiseKind::GennormSteep | NoiseKind::GennormFlat => {
                (0.0, (ln_gamma(3.0 / s) - ln_gamma(1.0 / s)).exp().sqrt())
            }
            NoiseKind::StudentT => {
                if s.is_infinite() {
                    (0.0, 1.0)
                } else {
                    (0.0, (s / (s - 2.0)).sqrt())
                }
            }
        }
    }

    fn affine(&self) -> (f64, f64) {
        if self.standardized {
            self.raw_moments()
        } else {
            (0.0, 1.0)
        }
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        let s = self.shape;
        match self.kind {
            NoiseKind::Skewnorm => {
                if x < 0.0 && s > 1.0 {
                    // left tail without cancellation against Φ(x)
                    let h = -x;
                    let q = upper_tail(s * h);
                    (2.0 * owens_t(s * h, 1.0 / s) - q * (1.0 - 2.0 * upper_tail(h))).max(0.0)
                } else {
                    (phi(x) - 2.0 * owens_t(x, s)).clamp(0.0, 1.0)
                }
            }
            NoiseKind::Exponnorm => {
                if s == 0.0 {
                    return phi(x);
                }
                let tail = (-x / s + 0.5 / (s * s) + ln_phi(x - 1.0 / s)).exp();
                (phi(x) - tail).clamp(0.0, 1.0)
            }
            NoiseKind::GennormSteep | NoiseKind::GennormFlat => {
                if s == 2.0 {
                    return phi(x * SQRT_2);
                }
                let p = 0.5 * lower_gamma_reg(1.0 / s, x.abs().powf(s));
                if x >= 0.0 {
                    0.5 + p
                } else {
                    0.5 - p
                }
            }
            NoiseKind::StudentT => {
                if s.is_infinite() {
                    phi(x)
                } else {
                    StudentsT::new(0.0, 1.0, s).expect("valid dof").cdf(x)
                }
            }
        }
    }

    fn raw_pdf(&self, x: f64) -> f64 {
        let s = self.shape;
        match self.kind {
            NoiseKind::Skewnorm => 2.0 * normal_pdf(x) * phi(s * x),
            NoiseKind::Exponnorm => {
                if s == 0.0 {
                    normal_pdf(x)
                } else {
                    (-x / s + 0.5 / (s * s) + ln_phi(x - 1.0 / s)).exp() / s
                }
            }
            _ => unreachable!("closed-form quantiles are used for this family"),
        }
    }

    fn raw_quantile(&self, u: f64) -> f64 {
        let s = self.shape;
        match self.kind {
            NoiseKind::GennormSteep | NoiseKind::GennormFlat => {
                if s == 2.0 {
                    return std_normal().inverse_cdf(u) * FRAC_1_SQRT_2;
                }
                let r = inverse_gamma_p(1.0 / s, (2.0 * u - 1.0).abs()).powf(1.0 / s);
                if u >= 0.5 {
                    r
                } else {
                    -r
                }
            }
            NoiseKind::StudentT => {
                if s.is_infinite() {
                    std_normal().inverse_cdf(u)
                } else {
                    StudentsT::new(0.0, 1.0, s).expect("valid dof").inverse_cdf(u)
                }
            }
            NoiseKind::Skewnorm | NoiseKind::Exponnorm => self.invert_cdf(u),
        }
    }

    /// Newton iteration safeguarded by a bisection bracket.
    fn invert_cdf(&self, u: f64) -> f64 {
        let (m, sd) = self.raw_moments();
        let x0 = m + sd * std_normal().inverse_cdf(u);
        let (mut lo, mut hi) = (x0, x0);
        let mut step = sd;
        while self.raw_cdf(lo) > u {
            lo -= step;
            step *= 2.0;
        }
        step = sd;
        while self.raw_cdf(hi) < u {
            hi += step;
            step *= 2.0;
        }
        let mut x = x0.clamp(lo, hi);
        for _ in 0..200 {
            let f = self.raw_cdf(x) - u;
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let dens = self.raw_pdf(x);
            let mut next = x - f / dens;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) || hi - lo <= 1e-14 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (m, sd) = self.affine();
        self.raw_cdf(m + sd * x)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (m, sd) = self.affine();
        (self.raw_quantile(u) - m) / sd
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = self.shape;
        let raw = match self.kind {
            NoiseKind::Skewnorm => {
                let delta = s / (1.0 + s * s).sqrt();
                let u0: f64 = rng.sample(StandardNormal);
                let u1: f64 = rng.sample(StandardNormal);
                delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1
            }
            NoiseKind::Exponnorm => {
                let n: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(Exp1);
                n + s * e
            }
            NoiseKind::GennormSteep | NoiseKind::GennormFlat => {
                let g = Gamma::new(1.0 / s, 1.0).expect("positive shape");
                let r = g.sample(rng).powf(1.0 / s);
                if rng.random::<bool>() {
                    r
                } else {
                    -r
                }
            }
            NoiseKind::StudentT => {
                if s.is_infinite() {
                    rng.sample(StandardNormal)
                } else {
                    StudentT::new(s).expect("valid dof").sample(rng)
                }
            }
        };
        let (m, sd) = self.affine();
        (raw - m) / sd
    }

    /// `W₁` to N(0, 1) by `nodes`-point Gauss–Legendre quadrature over
    /// quantile levels.
    pub fn wasserstein_to_normal(&self, nodes: usize) -> f64 {
        let (x, w) = gauss_legendre(nodes);
        let normal = std_normal();
        x.iter()
            .zip(w)
            .map(|(&t, &wt)| {
                let u = 0.5 * (t + 1.0);
                0.5 * wt * (self.quantile(u) - normal.inverse_cdf(u)).abs()
            })
            .sum()
    }
}

/// Quadrature order used for calibration.
pub const CALIBRATION_NODES: usize = 2048;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, cached per order.
pub fn gauss_legendre(n: usize) -> (&'static [f64], &'static [f64]) {
    static CACHE: OnceLock<std::sync::Mutex<Vec<(usize, &'static [f64], &'static [f64])>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    if let Some(&(_, x, w)) = guard.iter().find(|e| e.0 == n) {
        return (x, w);
    }
    let (x, w) = compute_gauss_legendre(n);
    let x: &'static [f64] = Box::leak(x.into_boxed_slice());
    let w: &'static [f64] = Box::leak(w.into_boxed_slice());
    guard.push((n, x, w));
    (x, w)
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut t = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // P_n(t) by the three-term recurrence
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * t * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (t * pn - pn1) / (t * t - 1.0);
            let dt = pn / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Search interval of the shape parameter for each kind, oriented so that
/// `W₁` increases from the first endpoint to the second.
fn shape_bracket(kind: NoiseKind) -> (f64, f64) {
    match kind {
        NoiseKind::Skewnorm => (0.0, 60.0),
        NoiseKind::Exponnorm => (0.0, 30.0),
        NoiseKind::GennormSteep => (2.0, 0.25),
        NoiseKind::GennormFlat => (2.0, 60.0),
        // searched as 1/ν
        NoiseKind::StudentT => (0.0, 1.0 / 2.05),
    }
}

fn family_at(kind: NoiseKind, param: f64) -> NoiseFamily {
    let shape = match kind {
        NoiseKind::StudentT => {
            if param == 0.0 {
                f64::INFINITY
            } else {
                1.0 / param
            }
        }
        _ => param,
    };
    NoiseFamily { kind, shape, standardized: true }
}

/// Finds the member of `kind` whose `W₁` distance to N(0, 1) is `target` by
/// 60 bisection steps, checking monotonicity of `W₁` along the way.
pub fn calibrate_noise(kind: NoiseKind, target: f64) -> Result<NoiseFamily> {
    if !(target > 0.0 && target <= 0.2) {
        return Err(Error::CalibrationFailed(format!("target distance {target} outside (0, 0.2]")));
    }
    let w1 = |p: f64| family_at(kind, p).wasserstein_to_normal(CALIBRATION_NODES);
    let (mut lo, mut hi) = shape_bracket(kind);
    let (mut w_lo, mut w_hi) = (w1(lo), w1(hi));
    if !(w_lo <= target && target <= w_hi) {
        return Err(Error::CalibrationFailed(format!(
            "{kind}: target {target} outside attainable range [{w_lo:.6}, {w_hi:.6}]"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let w_mid = w1(mid);
        if !(w_lo - 1e-9 <= w_mid && w_mid <= w_hi + 1e-9) {
            return Err(Error::CalibrationFailed(format!("{kind}: W1 is not monotone near shape {mid}")));
        }
        if w_mid < target {
            lo = mid;
            w_lo = w_mid;
        } else {
            hi = mid;
            w_hi = w_mid;
        }
    }
    let (param, w) = if (w_lo - target).abs() <= (w_hi - target).abs() { (lo, w_lo) } else { (hi, w_hi) };
    if (w - target).abs() >= 1e-4 {
        return Err(Error::CalibrationFailed(format!("{kind}: reached W1 = {w}, target {target}")));
    }
    Ok(family_at(kind, param))
}
