//! Confluent hypergeometric machinery: Tricomi's U, the companion function V,
//! the boundary function g, the harmonic function h of the generator
//! y d/dx + (1/2) d^2/dy^2, its asymptotic regimes, and gamma-family helpers.

use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::quad::{integrate_1d, Domain1D, QuadSpec, Substitution};
use crate::state::{alpha, State};

/// Parameters (a, c, z) of the confluent hypergeometric functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypergeometricParams {
    pub a: f64,
    pub c: f64,
    pub z: f64,
}

impl HypergeometricParams {
    pub fn new(a: f64, c: f64, z: f64) -> Self {
        HypergeometricParams { a, c, z }
    }
}

/// The three limit regimes of h(x, y) as x -> 0: x^{-1/3} y tending to a
/// finite constant, to +infinity, or to -infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AsymptoticRegime {
    FiniteRatio(f64),
    PlusInfinity,
    MinusInfinity,
}

// Lanczos coefficients (g = 7, n = 9), as circulated via GSL; ~15 significant
// digits on the positive axis.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_P: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// Gamma function via the Lanczos approximation with reflection for x < 1/2.
pub fn gamma(x: f64) -> f64 {
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let t = x - 1.0;
        let mut acc = LANCZOS_P[0];
        for (i, p) in LANCZOS_P.iter().enumerate().skip(1) {
            acc += p / (t + i as f64);
        }
        let w = t + LANCZOS_G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * w.powf(t + 0.5) * (-w).exp() * acc
    }
}

/// log Gamma on the positive axis.
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0, "ln_gamma needs x > 0");
    if x < 0.5 {
        return std::f64::consts::PI.ln()
            - ((std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let t = x - 1.0;
    let mut acc = LANCZOS_P[0];
    for (i, p) in LANCZOS_P.iter().enumerate().skip(1) {
        acc += p / (t + i as f64);
    }
    let w = t + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (t + 0.5) * w.ln() - w + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn reg_gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series representation.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        1.0 - reg_gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn reg_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - reg_gamma_p(a, x)
    } else {
        reg_gamma_q_cf(a, x)
    }
}

// Continued fraction for Q(a, x), modified Lentz.
fn reg_gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Rising factorial (a)_s: (a)_0 = 1, (a)_s = a (a+1) ... (a+s-1).
pub fn pochhammer(a: f64, s: u32) -> f64 {
    let mut acc = 1.0;
    for k in 0..s {
        acc *= a + k as f64;
    }
    acc
}

// Relative size the smallest asymptotic term must reach before the series is
// trusted; below this we fall back to the Laplace integral.
const U_SERIES_CUTOFF: f64 = 1e-12;

/// The asymptotic series z^{-a} sum_s (-1)^s (a)_s (1+a-c)_s / (s! z^s),
/// truncated at its smallest term. Returns None when the smallest term is not
/// below the relative cutoff.
fn u_series(a: f64, c: f64, z: f64) -> Option<f64> {
    let b = 1.0 + a - c;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut best_rel = f64::INFINITY;
    for s in 0..400u32 {
        let next = -term * (a + s as f64) * (b + s as f64) / ((s as f64 + 1.0) * z);
        if next.abs() >= term.abs() {
            // Divergence sets in; truncate at the smallest term.
            best_rel = best_rel.min(term.abs() / sum.abs().max(f64::MIN_POSITIVE));
            break;
        }
        term = next;
        sum += term;
        let rel = term.abs() / sum.abs().max(f64::MIN_POSITIVE);
        best_rel = best_rel.min(rel);
        if rel < 1e-17 {
            break;
        }
    }
    if best_rel <= U_SERIES_CUTOFF {
        Some(z.powf(-a) * sum)
    } else {
        None
    }
}

// Laplace-type integral U(a,c,z) = (1/Gamma(a)) int_0^inf e^{-zt} t^{a-1} (1+t)^{c-a-1} dt,
// valid for a > 0, z > 0.
fn u_laplace(a: f64, c: f64, z: f64) -> Result<f64> {
    let spec = QuadSpec::new(1e-12, 1e-300).with_substitution(Substitution::SqrtSingularity);
    let e = c - a - 1.0;
    let r = integrate_1d(
        |t: f64| (-z * t + (a - 1.0) * t.ln() + e * t.ln_1p()).exp(),
        Domain1D::SemiInfinite(0.0),
        &spec,
    );
    if !r.converged {
        return Err(Error::NonConvergence {
            what: format!("tricomi_u Laplace integral at (a={a}, c={c}, z={z})"),
            value: r.value,
            error_estimate: r.error_estimate,
            failed_axis: None,
        });
    }
    Ok(r.value / gamma(a))
}

/// Tricomi's function U(a, c, z) on the positive real axis.
///
/// Uses the large-z asymptotic series truncated at its smallest term when that
/// term is below 1e-12 relative, and the Laplace integral representation
/// otherwise (requires a > 0 there).
pub fn tricomi_u(p: HypergeometricParams) -> Result<f64> {
    let HypergeometricParams { a, c, z } = p;
    if !(z > 0.0) {
        return Err(Error::Domain(format!("tricomi_u needs z > 0, got {z}")));
    }
    if let Some(v) = u_series(a, c, z) {
        return Ok(v);
    }
    if a <= 0.0 {
        return Err(Error::Domain(format!(
            "tricomi_u outside the asymptotic range needs a > 0 for the integral route, got a = {a}"
        )));
    }
    u_laplace(a, c, z)
}

/// The companion function V(a, c, z) = e^z U(c-a, c, -z), for a > 0 and z < 0
/// (the only arguments the boundary function needs).
pub fn confluent_v(p: HypergeometricParams) -> Result<f64> {
    let HypergeometricParams { a, c, z } = p;
    if !(a > 0.0) {
        return Err(Error::Domain(format!("confluent_v needs a > 0, got {a}")));
    }
    let u = tricomi_u(HypergeometricParams::new(c - a, c, -z))?;
    Ok(z.exp() * u)
}

/// g(0) = (2/9)^{-1/6} Gamma(1/3) / Gamma(1/6).
pub fn g_zero() -> f64 {
    (2.0f64 / 9.0).powf(-1.0 / 6.0) * gamma(1.0 / 3.0) / gamma(1.0 / 6.0)
}

/// Boundary function g(y) = h(1, y), via its hypergeometric representation:
///
///   g(y) = (2/9)^{1/6} y U(1/6, 4/3, (2/9) y^3)            for y > 0,
///   g(y) = -(2/9)^{1/6} (1/6) y V(1/6, 4/3, (2/9) y^3)     for y < 0,
///   g(0) = (2/9)^{-1/6} Gamma(1/3)/Gamma(1/6).
pub fn g_boundary(y: f64) -> f64 {
    static SIXTH_ROOT: LazyLock<f64> = LazyLock::new(|| (2.0f64 / 9.0).powf(1.0 / 6.0));
    let sixth_root = *SIXTH_ROOT;
    if y == 0.0 {
        return g_zero();
    }
    let z = 2.0 / 9.0 * y * y * y;
    if y > 0.0 {
        if !z.is_finite() {
            // Beyond representable z the correction terms are below machine
            // precision; the leading order y^{1/2} is exact at this scale.
            return y.sqrt();
        }
        let u = tricomi_u(HypergeometricParams::new(1.0 / 6.0, 4.0 / 3.0, z))
            .expect("U(1/6, 4/3, z) is defined for all z > 0");
        sixth_root * y * u
    } else {
        if z < -740.0 {
            // e^z underflows; g is below the smallest positive double.
            return 0.0;
        }
        let v = confluent_v(HypergeometricParams::new(1.0 / 6.0, 4.0 / 3.0, z))
            .expect("V(1/6, 4/3, z) is defined for all z < 0");
        -sixth_root / 6.0 * y * v
    }
}

/// Harmonic function h(x, y) = x^{1/6} g(x^{-1/3} y) for x > 0.
pub fn h_hypergeometric(z: State) -> Result<f64> {
    let x = z.t_coord;
    if !(x > 0.0) {
        return Err(Error::Domain(format!(
            "h is evaluated on the open half-plane x > 0, got x = {x}; callers treat h(0, .) as 0"
        )));
    }
    Ok(x.powf(1.0 / 6.0) * g_boundary(x.powf(-1.0 / 3.0) * z.s_coord))
}

// Cubic-spline table of ln g on [-12, 12]; outside this range the
// hypergeometric asymptotics are both cheap and accurate, inside it the
// Laplace integral would dominate sampler runtime.
struct LnGSpline {
    y0: f64,
    step: f64,
    vals: Vec<f64>,
    second: Vec<f64>,
}

impl LnGSpline {
    fn build() -> Self {
        let y0 = -12.0;
        let y1 = 12.0;
        let n = 1537usize;
        let step = (y1 - y0) / (n - 1) as f64;
        let vals: Vec<f64> = (0..n)
            .map(|i| g_boundary(y0 + i as f64 * step).ln())
            .collect();
        // Natural cubic spline second derivatives (tridiagonal solve).
        let mut second = vec![0.0f64; n];
        let mut u = vec![0.0f64; n];
        for i in 1..n - 1 {
            let p = 0.5 * second[i - 1] + 2.0;
            second[i] = -0.5 / p;
            let d = (vals[i + 1] - 2.0 * vals[i] + vals[i - 1]) * 3.0 / (step * step);
            u[i] = (d - 0.5 * u[i - 1]) / p;
        }
        for i in (1..n - 1).rev() {
            second[i] = second[i] * second[i + 1] + u[i];
        }
        LnGSpline { y0, step, vals, second }
    }

    fn eval(&self, y: f64) -> f64 {
        let pos = (y - self.y0) / self.step;
        let i = (pos.floor() as usize).min(self.vals.len() - 2);
        let a = self.y0 + i as f64 * self.step;
        let t = (y - a) / self.step;
        let (v0, v1) = (self.vals[i], self.vals[i + 1]);
        let (s0, s1) = (self.second[i], self.second[i + 1]);
        let h2 = self.step * self.step / 6.0;
        let va = 1.0 - t;
        (va * v0 + t * v1 + ((va * va * va - va) * s0 + (t * t * t - t) * s1) * h2).exp()
    }
}

static LN_G_SPLINE: LazyLock<LnGSpline> = LazyLock::new(LnGSpline::build);

/// Fast g: spline-backed on [-12, 12], hypergeometric asymptotics outside.
/// Relative accuracy ~1e-8; used in samplers and DP sweeps.
pub fn g_fast(y: f64) -> f64 {
    if (-12.0..=12.0).contains(&y) {
        LN_G_SPLINE.eval(y)
    } else {
        g_boundary(y)
    }
}

/// Fast h built on `g_fast`. Same domain contract as `h_hypergeometric`.
pub fn h_fast(z: State) -> Result<f64> {
    let x = z.t_coord;
    if !(x > 0.0) {
        return Err(Error::Domain(format!("h_fast needs x > 0, got {x}")));
    }
    Ok(x.powf(1.0 / 6.0) * g_fast(x.powf(-1.0 / 3.0) * z.s_coord))
}

/// Leading-order approximation of h in the given regime. The caller is
/// responsible for being inside the regime's validity region; mismatches that
/// are detectable (wrong sign of y) are rejected.
pub fn h_asymptotic(z: State, regime: AsymptoticRegime) -> Result<f64> {
    let (x, y) = (z.t_coord, z.s_coord);
    if !(x > 0.0) {
        return Err(Error::Domain(format!("h_asymptotic needs x > 0, got {x}")));
    }
    match regime {
        AsymptoticRegime::FiniteRatio(c) => Ok(x.powf(1.0 / 6.0) * g_boundary(c)),
        AsymptoticRegime::PlusInfinity => {
            if y <= 0.0 {
                return Err(Error::Domain(format!(
                    "plus_infinity regime needs y > 0, got y = {y}"
                )));
            }
            Ok(y.sqrt())
        }
        AsymptoticRegime::MinusInfinity => {
            if y >= 0.0 {
                return Err(Error::Domain(format!(
                    "minus_infinity regime needs y < 0, got y = {y}"
                )));
            }
            Ok(0.75 * x * (-y).powf(-2.5) * (2.0 / 9.0 * y * y * y / x).exp())
        }
    }
}

/// Bound C alpha(z)^{1/2 - 3i - j} on |d^{i+j} h / dx^i dy^j|. The
/// multiplicative constant is a test parameter; the analysis leaves it
/// unspecified.
pub fn h_gradient_bound(z: State, i: u32, j: u32, c: f64) -> Result<f64> {
    if i + j == 0 {
        return Err(Error::Domain("gradient bound needs i + j >= 1".into()));
    }
    let a = alpha(z);
    if a == 0.0 {
        return Err(Error::Domain("gradient bound undefined at alpha = 0".into()));
    }
    Ok(c * a.powf(0.5 - 3.0 * i as f64 - j as f64))
}
