//! Analytic densities of the Kolmogorov diffusion killed at the boundary
//! {first coordinate = 0}: the free transition density, its antisymmetrized
//! form, the first-hitting density of the boundary, the killed density along
//! two independent routes, the integral representation of the harmonic
//! function, the auxiliary kernel behind the meander limit, survival
//! probabilities, the proportionality constant of the exit-time law, and the
//! meander/bridge limit densities.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion;
use crate::error::{Error, Result};
use crate::quad::{integrate_nd, Domain1D, QuadResult, QuadSpec, Substitution};
use crate::specfun;
use crate::state::{RngStream, State};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const PI: f64 = std::f64::consts::PI;

/// A (start, target, time) triple for a transition density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub from: State,
    pub to: State,
    pub t: f64,
}

impl DensityPoint {
    pub fn new(from: State, to: State, t: f64) -> Self {
        DensityPoint { from, to, t }
    }
}

/// A density value together with its quadrature error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityValue {
    pub value: f64,
    pub error_estimate: f64,
}

impl DensityValue {
    fn from_quad(r: &QuadResult) -> Self {
        DensityValue {
            value: r.value,
            error_estimate: r.error_estimate,
        }
    }
}

/// Relative tolerances per axis of the iterated integrals, outermost first.
/// The innermost axes run tighter so the composed error stays near the outer
/// target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadBudget {
    pub rel_s: f64,
    pub rel_z: f64,
    pub rel_r: f64,
    pub rel_w: f64,
    /// Characteristic magnitude of the quantity being assembled; correction
    /// terms far below rel * scale stop refining early. Set internally from
    /// the free density or the probability scale.
    scale: f64,
}

impl QuadBudget {
    /// Balanced preset: composed relative error around 1e-4..1e-3.
    pub fn balanced() -> Self {
        QuadBudget {
            rel_s: 3e-5,
            rel_z: 1e-5,
            rel_r: 3e-6,
            rel_w: 1e-6,
            scale: 1.0,
        }
    }

    /// Tight preset for route-agreement checks.
    pub fn tight() -> Self {
        QuadBudget {
            rel_s: 1e-5,
            rel_z: 3e-6,
            rel_r: 1e-6,
            rel_w: 3e-7,
            scale: 1.0,
        }
    }

    /// Fast preset for table building and exploratory runs.
    pub fn fast() -> Self {
        QuadBudget {
            rel_s: 3e-4,
            rel_z: 1e-4,
            rel_r: 3e-5,
            rel_w: 1e-5,
            scale: 1.0,
        }
    }

    // The route integrands vanish at panel ends; plain adaptive panels are
    // the cheap choice there. Short-time features of width x^{2/3} in time
    // and x^{1/3} in velocity are brought to order one by the rescaling
    // plan; without it the quadruple integral is intractable for starts near
    // the corner. The tanh-sinh plan is reserved for the axes with genuine
    // endpoint singularities (the kernels behind h and hbar).
    fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale.max(1e-12);
        self
    }
    fn abs_floor(&self, rel: f64) -> f64 {
        (0.02 * rel * self.scale).max(1e-300)
    }
    fn spec_s(&self, x: f64) -> QuadSpec {
        QuadSpec::new(self.rel_s, self.abs_floor(self.rel_s))
            .with_substitution(Substitution::PaperSScaling { scale: x.powf(2.0 / 3.0) })
    }
    // The 2-D kernels (h, hbar) are cheap and of unknown magnitude up
    // front; they keep hard absolute floors and capped relative tolerances
    // instead of scale-derived ones.
    fn spec_s_singular(&self) -> QuadSpec {
        QuadSpec::new(self.rel_s.min(1e-5), 1e-14).with_substitution(Substitution::SqrtSingularity)
    }
    fn spec_z(&self, x: f64) -> QuadSpec {
        QuadSpec::new(self.rel_z, self.abs_floor(self.rel_z))
            .with_substitution(Substitution::PaperSScaling { scale: x.powf(1.0 / 3.0) })
    }
    fn spec_r(&self, x: f64, t: f64) -> QuadSpec {
        QuadSpec::new(self.rel_r, self.abs_floor(self.rel_r))
            .with_substitution(Substitution::PaperSScaling { scale: x.powf(2.0 / 3.0) / t })
    }
    fn spec_w(&self, x: f64) -> QuadSpec {
        QuadSpec::new(self.rel_w, self.abs_floor(self.rel_w))
            .with_substitution(Substitution::PaperSScaling { scale: x.powf(1.0 / 3.0) })
    }
    fn spec_plain_w(&self) -> QuadSpec {
        QuadSpec::new(self.rel_w.min(3e-7), 1e-16)
    }
}

impl Default for QuadBudget {
    fn default() -> Self {
        QuadBudget::balanced()
    }
}

// e^{a+b} - e^{a-b}, stable when b is small relative to a.
#[inline]
pub(crate) fn exp_diff(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        -(a + b).exp() * (-2.0 * b).exp_m1()
    } else {
        (a - b).exp() * (2.0 * b).exp_m1()
    }
}

/// Free transition density, unchecked arguments.
#[inline]
pub(crate) fn p_free_raw(t: f64, x: f64, y: f64, u: f64, v: f64) -> f64 {
    let a = u - x - t * y;
    let b = v - y;
    SQRT3 / (PI * t * t) * (-6.0 * a * a / (t * t * t) + 6.0 * a * b / (t * t) - 2.0 * b * b / t).exp()
}

/// q_t(x, y; 0, -w) = p_t(x, y; 0, -w) - p_t(x, y; 0, w), evaluated without
/// cancellation.
#[inline]
pub(crate) fn q_bnd(t: f64, x: f64, y: f64, w: f64) -> f64 {
    let t2 = t * t;
    let a = -6.0 * x * x / (t2 * t) - 6.0 * x * y / t2 - 2.0 * (y * y + w * w) / t;
    let b = 6.0 * x * w / t2 + 2.0 * y * w / t;
    SQRT3 / (PI * t2) * exp_diff(a, b)
}

/// First-return density of the integrated coordinate from (0, -|z|): the
/// theta integral reduces to an error function.
#[inline]
pub(crate) fn lachal_base(s: f64, z: f64, w: f64) -> f64 {
    if s <= 0.0 || z <= 0.0 || w <= 0.0 {
        return 0.0;
    }
    SQRT3 * w / (PI * s * s)
        * (-(2.0 / s) * (z * z - z * w + w * w)).exp()
        * libm::erf((6.0 * z * w / s).sqrt())
}

/// Standard normal CDF.
#[inline]
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Free transition density p_t(from; to).
pub fn p_free(pt: &DensityPoint) -> Result<f64> {
    if !(pt.t > 0.0) {
        return Err(Error::Domain(format!("p_free needs t > 0, got {}", pt.t)));
    }
    Ok(p_free_raw(
        pt.t,
        pt.from.t_coord,
        pt.from.s_coord,
        pt.to.t_coord,
        pt.to.s_coord,
    ))
}

/// Antisymmetrized density q_t(x, y; u, v) = p_t(x, y; u, v) - p_t(x, y; u, -v).
pub fn q_antisym(pt: &DensityPoint) -> Result<f64> {
    if !(pt.t > 0.0) {
        return Err(Error::Domain(format!("q_antisym needs t > 0, got {}", pt.t)));
    }
    let (t, x, y, u, v) = (
        pt.t,
        pt.from.t_coord,
        pt.from.s_coord,
        pt.to.t_coord,
        pt.to.s_coord,
    );
    // Shift to the boundary form when u = 0, otherwise direct difference.
    if u == 0.0 {
        Ok(q_bnd(t, x, y, -v))
    } else {
        Ok(p_free_raw(t, x, y, u, v) - p_free_raw(t, x, y, u, -v))
    }
}

/// Joint density of (first hitting time of `level` by the integrated
/// coordinate, velocity at that instant), evaluated at time `t`, velocity `z`.
///
/// The start-on-the-level case is the closed-form first-return law; away from
/// the level the recursive representation subtracts the double-passage mass,
/// evaluated by iterated quadrature.
pub fn lachal_first_hit(
    start: State,
    level: f64,
    t: f64,
    z: f64,
    budget: &QuadBudget,
) -> Result<DensityValue> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("lachal_first_hit needs t > 0, got {t}")));
    }
    let (x, y) = (start.t_coord, start.s_coord);
    if x == level {
        if y == 0.0 {
            return Err(Error::Domain(
                "first-return density from rest on the level is degenerate".into(),
            ));
        }
        // From (level, y): returns with velocity of the opposite sign of y.
        let value = if y < 0.0 {
            if z >= 0.0 {
                lachal_base(t, -y, z)
            } else {
                0.0
            }
        } else if z <= 0.0 {
            lachal_base(t, y, -z)
        } else {
            0.0
        };
        return Ok(DensityValue { value, error_estimate: 0.0 });
    }
    // Admissible arrival velocities point from the start side toward the level.
    let admissible = if x < level { z >= 0.0 } else { z <= 0.0 };
    if !admissible || z == 0.0 {
        return Ok(DensityValue { value: 0.0, error_estimate: 0.0 });
    }
    let sign = if level > x { 1.0 } else { -1.0 }; // varsigma = sign(level - x)
    let direct = p_free_raw(t, x, y, level, z);
    let za = z.abs();
    let budget = &budget.with_scale(direct.max(1e-12));
    // Correction: double integral of the first-return kernel against the free
    // density toward the mirrored arrival velocity.
    let corr = integrate_nd(
        |p: &[f64]| {
            let (s, w) = (p[0], p[1]);
            lachal_base(s, za, w) * p_free_raw(t - s, x, y, level, -sign * w)
        },
        &[Domain1D::Finite(0.0, t), Domain1D::SemiInfinite(0.0)],
        &[budget.spec_s(start.t_coord.max(1e-6)), budget.spec_plain_w()],
    );
    if !corr.converged {
        return Err(Error::NonConvergence {
            what: "lachal_first_hit correction".into(),
            value: corr.value,
            error_estimate: corr.error_estimate,
            failed_axis: corr.failed_axis,
        });
    }
    Ok(DensityValue {
        value: za * (direct - corr.value),
        error_estimate: za * corr.error_estimate,
    })
}

fn check_killed_args(pt: &DensityPoint) -> Result<(f64, f64, f64, f64, f64)> {
    let (t, x, y, u, v) = (
        pt.t,
        pt.from.t_coord,
        pt.from.s_coord,
        pt.to.t_coord,
        pt.to.s_coord,
    );
    if !(t > 0.0) || !(x > 0.0) || !(u > 0.0) {
        return Err(Error::Domain(format!(
            "killed density needs t, x, u > 0; got t={t}, x={x}, u={u}"
        )));
    }
    Ok((t, x, y, u, v))
}

/// Killed transition density via the first-passage route: the free density
/// minus the mass that has already touched the boundary, decomposed through
/// the hitting density.
pub fn p_killed_route_a(pt: &DensityPoint, budget: &QuadBudget) -> Result<DensityValue> {
    let (t, x, y, u, v) = check_killed_args(pt)?;
    let free = p_free_raw(t, x, y, u, v);
    let budget = &budget.with_scale(free);

    // Single-passage mass: hit at (0, -zeta) at time s, then move freely.
    let i2 = integrate_nd(
        |p: &[f64]| {
            let (s, zeta) = (p[0], p[1]);
            zeta * p_free_raw(s, x, y, 0.0, -zeta) * p_free_raw(t - s, 0.0, -zeta, u, v)
        },
        &[Domain1D::Finite(0.0, t), Domain1D::SemiInfinite(0.0)],
        &[budget.spec_s(x), budget.spec_z(x)],
    );
    fail_if_diverged(&i2, "route A single-passage term")?;

    // Double-passage correction, with the inner time rescaled to a fixed box.
    let i4 = integrate_nd(
        |p: &[f64]| {
            let (s, zeta, rho, w) = (p[0], p[1], p[2], p[3]);
            // r = s (1 - rho): the short-time concentration of the free
            // density sits at rho = 0 where offsets are exact.
            zeta * lachal_base(s * (1.0 - rho), zeta, w)
                * p_free_raw(s * rho, x, y, 0.0, w)
                * p_free_raw(t - s, 0.0, -zeta, u, v)
                * s
        },
        &[
            Domain1D::Finite(0.0, t),
            Domain1D::SemiInfinite(0.0),
            Domain1D::Finite(0.0, 1.0),
            Domain1D::SemiInfinite(0.0),
        ],
        &[budget.spec_s(x), budget.spec_z(x), budget.spec_r(x, t), budget.spec_w(x)],
    );
    fail_if_diverged(&i4, "route A double-passage term")?;

    Ok(DensityValue {
        value: free - i2.value + i4.value,
        error_estimate: i2.error_estimate + i4.error_estimate,
    })
}

/// Killed transition density via the reflection decomposition: free density
/// minus its reflected image, minus an antisymmetrized double integral, plus
/// an antisymmetrized quadruple integral.
pub fn p_killed_route_b(pt: &DensityPoint, budget: &QuadBudget) -> Result<DensityValue> {
    let (t, x, y, u, v) = check_killed_args(pt)?;
    // Time reversal maps (x, y; u, v) to (u, -v; x, -y); evaluating with the
    // smaller integrated coordinate in the start slot keeps the short-time
    // concentration at the left endpoint of the inner axes.
    if u < x {
        let rev = DensityPoint::new(State::new(u, -v), State::new(x, -y), t);
        return p_killed_route_b(&rev, budget);
    }
    let free = p_free_raw(t, x, y, u, v);
    let budget = &budget.with_scale(free);
    let reflected = p_free_raw(t, x, y, -u, -v);

    // q_{t-s}(u, -v; 0, +zeta) = -q_bnd(t-s, u, -v, zeta)
    let t2 = integrate_nd(
        |p: &[f64]| {
            let (s, zeta) = (p[0], p[1]);
            -q_bnd(t - s, u, -v, zeta) * zeta * q_bnd(s, x, y, zeta)
        },
        &[Domain1D::Finite(0.0, t), Domain1D::SemiInfinite(0.0)],
        &[budget.spec_s(x), budget.spec_z(x)],
    );
    fail_if_diverged(&t2, "route B double-integral term")?;

    // The two antisymmetrized kernels enter as q_{t-s}(u,-v; 0, +zeta) and
    // q_{s-r}(x,y; 0, +w); their boundary-form signs cancel. (The +w slot is
    // the one the derivation produces; writing -w there flips the term's sign
    // and breaks both route agreement and the corner limit.)
    let t4 = integrate_nd(
        |p: &[f64]| {
            let (s, zeta, rho, w) = (p[0], p[1], p[2], p[3]);
            zeta * q_bnd(t - s, u, -v, zeta)
                * lachal_base(s * (1.0 - rho), zeta, w)
                * q_bnd(s * rho, x, y, w)
                * s
        },
        &[
            Domain1D::Finite(0.0, t),
            Domain1D::SemiInfinite(0.0),
            Domain1D::Finite(0.0, 1.0),
            Domain1D::SemiInfinite(0.0),
        ],
        &[budget.spec_s(x), budget.spec_z(x), budget.spec_r(x, t), budget.spec_w(x)],
    );
    fail_if_diverged(&t4, "route B quadruple-integral term")?;

    Ok(DensityValue {
        value: free - reflected - t2.value + t4.value,
        error_estimate: t2.error_estimate + t4.error_estimate,
    })
}

fn fail_if_diverged(r: &QuadResult, what: &str) -> Result<()> {
    if r.converged {
        Ok(())
    } else {
        Err(Error::NonConvergence {
            what: what.into(),
            value: r.value,
            error_estimate: r.error_estimate,
            failed_axis: r.failed_axis,
        })
    }
}

/// Integral representation of the harmonic function:
/// h(x, y) = int_0^inf int_0^inf w^{3/2} q_s(x, y; 0, -w) ds dw,
/// evaluated after the s -> 1/s change of variable that turns the exponent
/// polynomial.
pub fn h_integral(z: State, budget: &QuadBudget) -> Result<DensityValue> {
    let (x, y) = (z.t_coord, z.s_coord);
    if !(x > 0.0) {
        return Err(Error::Domain(format!("h_integral needs x > 0, got {x}")));
    }
    // Inner velocity scaled by sigma^{-1/2}: the transverse integral becomes
    // a fixed-scale Gaussian for every sigma and the sigma^{-3/4} endpoint
    // singularity sits at zero, where the clustered rules keep full offset
    // precision.
    let r = integrate_nd(
        |p: &[f64]| {
            let (sig, om) = (p[0], p[1]);
            if sig <= 0.0 {
                return 0.0;
            }
            let a = -6.0 * x * x * sig.powi(3) - 6.0 * x * y * sig * sig
                - 2.0 * y * y * sig
                - 2.0 * om * om;
            let b = 2.0 * om * sig.sqrt() * (3.0 * x * sig + y);
            sig.powf(-1.25) * om.powf(1.5) * SQRT3 / PI * exp_diff(a, b)
        },
        &[Domain1D::SemiInfinite(0.0), Domain1D::SemiInfinite(0.0)],
        &[budget.spec_s_singular(), budget.spec_plain_w()],
    );
    fail_if_diverged(&r, "h integral representation")?;
    Ok(DensityValue::from_quad(&r))
}

/// The auxiliary kernel of the meander limit:
/// hbar(t, x, y) = (4 sqrt(3) / sqrt(2 pi)) int_0^t int_0^inf w^{3/2} s^{-1/2}
///                 p_s(0, w; 0, 0) q_{t-s}(x, y; 0, -w) dw ds,
/// with p_s(0, w; 0, 0) = sqrt(3)/(pi s^2) e^{-2 w^2 / s} in closed form.
/// Meander targets (u, v) enter as hbar(t, u, -v).
pub fn h_bar(t: f64, x: f64, y: f64, budget: &QuadBudget) -> Result<DensityValue> {
    if !(t > 0.0) || !(x > 0.0) {
        return Err(Error::Domain(format!("h_bar needs t > 0 and x > 0, got t={t}, x={x}")));
    }
    let c = 12.0 / (PI * (2.0 * PI).sqrt());
    // Inner variable scaled by sqrt(s) so the Gaussian peak stays at order
    // one; the resulting s^{-3/4} endpoint singularity sits at s = 0 where
    // the clustered rule keeps full offset precision.
    let r = integrate_nd(
        |p: &[f64]| {
            let (s, om) = (p[0], p[1]);
            if s <= 0.0 || s >= t {
                return 0.0;
            }
            s.powf(-1.25) * om.powf(1.5) * (-2.0 * om * om).exp() * q_bnd(t - s, x, y, s.sqrt() * om)
        },
        &[Domain1D::Finite(0.0, t), Domain1D::SemiInfinite(0.0)],
        &[budget.spec_s_singular(), budget.spec_plain_w()],
    );
    fail_if_diverged(&r, "h_bar")?;
    Ok(DensityValue {
        value: c * r.value,
        error_estimate: c * r.error_estimate,
    })
}

/// How a survival probability is computed.
#[derive(Debug, Clone, Copy)]
pub enum SurvivalMethod {
    /// Integrate the killed density over the quarter-plane; the target
    /// integral is carried out in closed form (Gaussian orthant mass), the
    /// boundary-flux terms by iterated quadrature.
    Quadrature(QuadBudget),
    /// Killed-path simulation, delegated to the diffusion engine.
    MonteCarlo {
        paths: u64,
        dt: f64,
        stream: RngStream,
    },
}

pub use crate::diffusion::SurvivalEstimate;

/// P(exit time > t) from `z`.
pub fn survival_probability(z: State, t: f64, method: SurvivalMethod) -> Result<SurvivalEstimate> {
    let (x, y) = (z.t_coord, z.s_coord);
    if !(x > 0.0) || !(t > 0.0) {
        return Err(Error::Domain(format!(
            "survival needs x > 0 and t > 0; got x={x}, t={t}"
        )));
    }
    match method {
        SurvivalMethod::MonteCarlo { paths, dt, stream } => {
            diffusion::survival_mc(z, t, dt, paths, stream, diffusion::KillMode::LinearRefine)
        }
        SurvivalMethod::Quadrature(budget) => {
            let budget = budget.with_scale(1.0);
            let free_mass = phi((x + t * y) * (3.0 / (t * t * t)).sqrt());
            let d = integrate_nd(
                |p: &[f64]| {
                    let (s, zeta) = (p[0], p[1]);
                    zeta * p_free_raw(s, x, y, 0.0, -zeta) * phi(-zeta * (3.0 / (t - s)).sqrt())
                },
                &[Domain1D::Finite(0.0, t), Domain1D::SemiInfinite(0.0)],
                &[budget.spec_s(x), budget.spec_z(x)],
            );
            fail_if_diverged(&d, "survival single-passage term")?;
            let q = integrate_nd(
                |p: &[f64]| {
                    let (s, zeta, rho, w) = (p[0], p[1], p[2], p[3]);
                    zeta * lachal_base(s * (1.0 - rho), zeta, w)
                        * p_free_raw(s * rho, x, y, 0.0, w)
                        * phi(-zeta * (3.0 / (t - s)).sqrt())
                        * s
                },
                &[
                    Domain1D::Finite(0.0, t),
                    Domain1D::SemiInfinite(0.0),
                    Domain1D::Finite(0.0, 1.0),
                    Domain1D::SemiInfinite(0.0),
                ],
                &[budget.spec_s(x), budget.spec_z(x), budget.spec_r(x, t), budget.spec_w(x)],
            );
            fail_if_diverged(&q, "survival double-passage term")?;
            let p = (free_mass - d.value + q.value).clamp(0.0, 1.0);
            Ok(SurvivalEstimate {
                p,
                stderr: d.error_estimate + q.error_estimate,
                samples: d.evaluations + q.evaluations,
            })
        }
    }
}

/// Estimate of the exit-law proportionality constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: KappaMethod,
    /// Per-start ratios t^{1/4} P(tau > t) / h(z).
    pub per_start: Vec<(State, f64, f64)>,
    /// Set when the per-start spread exceeds five pooled standard errors.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KappaMethod {
    QuadratureRatio,
    MonteCarlo,
}

/// Pooled estimate of t^{1/4} P_z(tau > t) / h(z) over small-gauge starts.
/// The constant is measured, not assumed: the exit-time asymptotics and the
/// transform formulas are normalization-sensitive, so every caller takes the
/// measured value as input.
pub fn estimate_kappa(starts: &[State], t: f64, method: SurvivalMethod) -> Result<KappaEstimate> {
    if starts.is_empty() {
        return Err(Error::Domain("estimate_kappa needs at least one start".into()));
    }
    let mut per_start = Vec::with_capacity(starts.len());
    for &z in starts {
        let h = specfun::h_hypergeometric(z)?;
        let est = survival_probability(z, t, method_clone(&method, per_start.len() as u64))?;
        let ratio = t.powf(0.25) * est.p / h;
        let se = t.powf(0.25) * est.stderr / h;
        per_start.push((z, ratio, se));
    }
    let weights: Vec<f64> = per_start
        .iter()
        .map(|&(_, _, se)| 1.0 / (se * se).max(1e-300))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let value = per_start
        .iter()
        .zip(&weights)
        .map(|(&(_, r, _), &w)| r * w)
        .sum::<f64>()
        / wsum;
    let stderr = (1.0 / wsum).sqrt();
    let spread = per_start
        .iter()
        .map(|&(_, r, _)| (r - value).abs())
        .fold(0.0f64, f64::max);
    let flagged = spread > 5.0 * stderr.max(1e-12);
    let kind = match method {
        SurvivalMethod::Quadrature(_) => KappaMethod::QuadratureRatio,
        SurvivalMethod::MonteCarlo { .. } => KappaMethod::MonteCarlo,
    };
    Ok(KappaEstimate {
        value,
        stderr,
        method: kind,
        per_start,
        flagged,
    })
}

fn method_clone(m: &SurvivalMethod, idx: u64) -> SurvivalMethod {
    match *m {
        SurvivalMethod::Quadrature(b) => SurvivalMethod::Quadrature(b),
        SurvivalMethod::MonteCarlo { paths, dt, stream } => SurvivalMethod::MonteCarlo {
            paths,
            dt,
            // Non-overlapping substreams per start.
            stream: stream.substream(idx.wrapping_mul(1 << 32)),
        },
    }
}

/// Survival probability of the unit-horizon problem tabulated over starts,
/// built from one simulated ensemble: each path yields, per velocity column,
/// the threshold the integrated coordinate must clear, computed as the upper
/// envelope of the lines -IB_k - t_k y. The diffusion scaling maps any
/// (start, horizon) query onto the table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalTable {
    y_grid: Vec<f64>,
    /// Sorted thresholds per velocity column.
    thresholds: Vec<Vec<f64>>,
    pub n_paths: u64,
    pub steps: usize,
    pub stream: RngStream,
}

impl SurvivalTable {
    pub fn build(stream: RngStream, n_paths: u64, steps: usize, y_min: f64, y_max: f64, y_count: usize) -> Self {
        let y_grid: Vec<f64> = (0..y_count)
            .map(|j| y_min + (y_max - y_min) * j as f64 / (y_count - 1) as f64)
            .collect();
        let dt = 1.0 / steps as f64;
        let per_path: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.substream(i).rng();
                // Lines (slope, intercept) = (-t_k, -IB_k), k = 0..steps.
                let mut slopes = Vec::with_capacity(steps + 1);
                let mut intercepts = Vec::with_capacity(steps + 1);
                let (mut ib, mut b) = (0.0f64, 0.0f64);
                slopes.push(0.0);
                intercepts.push(0.0);
                for k in 1..=steps {
                    let (du, dv) = diffusion::exact_increment(b, dt, &mut rng);
                    ib += du;
                    b += dv;
                    slopes.push(-(k as f64) * dt);
                    intercepts.push(-ib);
                }
                upper_envelope_eval(&slopes, &intercepts, &y_grid)
            })
            .collect();
        let mut thresholds = vec![Vec::with_capacity(n_paths as usize); y_grid.len()];
        for row in &per_path {
            for (j, &m) in row.iter().enumerate() {
                thresholds[j].push(m);
            }
        }
        for col in &mut thresholds {
            col.sort_unstable_by(|a, b| a.total_cmp(b));
        }
        SurvivalTable {
            y_grid,
            thresholds,
            n_paths,
            steps,
            stream,
        }
    }

    /// P(tau > 1) from (x, y); linear interpolation across velocity columns.
    pub fn survival_unit(&self, x: f64, y: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let ylo = self.y_grid[0];
        let yhi = *self.y_grid.last().unwrap();
        let yc = y.clamp(ylo, yhi);
        let stepy = (yhi - ylo) / (self.y_grid.len() - 1) as f64;
        let j = (((yc - ylo) / stepy).floor() as usize).min(self.y_grid.len() - 2);
        let theta = ((yc - self.y_grid[j]) / stepy).clamp(0.0, 1.0);
        let pj = self.column_survival(j, x);
        let pj1 = self.column_survival(j + 1, x);
        (1.0 - theta) * pj + theta * pj1
    }

    fn column_survival(&self, j: usize, x: f64) -> f64 {
        let col = &self.thresholds[j];
        let count = col.partition_point(|&m| m < x);
        count as f64 / self.n_paths as f64
    }

    /// P(tau > horizon) from z via the exact diffusion scaling.
    pub fn survival(&self, z: State, horizon: f64) -> f64 {
        if horizon <= 0.0 {
            return 1.0;
        }
        let xs = z.t_coord / horizon.powf(1.5);
        let ys = z.s_coord / horizon.sqrt();
        self.survival_unit(xs, ys)
    }

    /// Binomial standard error at the tabulated resolution.
    pub fn stderr(&self, z: State, horizon: f64) -> f64 {
        let p = self.survival(z, horizon);
        (p * (1.0 - p) / self.n_paths as f64).sqrt()
    }

    pub fn velocity_range(&self) -> (f64, f64) {
        (self.y_grid[0], *self.y_grid.last().unwrap())
    }
}

// Evaluate max_k (slope_k * y + intercept_k) at the ascending query points,
// via the convex upper envelope; slopes arrive strictly decreasing, so they
// are reversed into increasing order first.
fn upper_envelope_eval(slopes: &[f64], intercepts: &[f64], queries: &[f64]) -> Vec<f64> {
    let n = slopes.len();
    // Hull as indices into the reversed order (increasing slope).
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(64);
    let cross_ge = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| -> bool {
        // Intersection x of (a, c) <= intersection x of (a, b): b is never on
        // the upper envelope. Arranged as a cross-multiply to avoid division.
        (c.1 - a.1) * (b.0 - a.0) >= (b.1 - a.1) * (c.0 - a.0)
    };
    for i in (0..n).rev() {
        let line = (slopes[i], intercepts[i]);
        if let Some(&last) = hull.last() {
            if last.0 == line.0 {
                if line.1 <= last.1 {
                    continue;
                }
                hull.pop();
            }
        }
        while hull.len() >= 2 && cross_ge(hull[hull.len() - 2], hull[hull.len() - 1], line) {
            hull.pop();
        }
        hull.push(line);
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut ptr = 0usize;
    for &y in queries {
        while ptr + 1 < hull.len() {
            let a = hull[ptr];
            let b = hull[ptr + 1];
            if b.0 * y + b.1 >= a.0 * y + a.1 {
                ptr += 1;
            } else {
                break;
            }
        }
        let l = hull[ptr];
        out.push(l.0 * y + l.1);
    }
    out
}

/// The meander endpoint/marginal density at time `t` of the meander of length
/// `horizon` started at the corner: proportional to
/// P_{(u,v)}(tau > horizon - t) * hbar(t, u, -v). The normalization constant
/// is computed once per (t, horizon) and cached.
pub struct MeanderLimitDensity<'a> {
    pub t: f64,
    pub horizon: f64,
    table: &'a SurvivalTable,
    budget: QuadBudget,
    norm: OnceLock<DensityValue>,
}

impl<'a> MeanderLimitDensity<'a> {
    pub fn new(t: f64, horizon: f64, table: &'a SurvivalTable, budget: QuadBudget) -> Result<Self> {
        if !(t > 0.0 && t <= horizon) {
            return Err(Error::Domain(format!(
                "meander density needs 0 < t <= horizon, got t={t}, horizon={horizon}"
            )));
        }
        Ok(MeanderLimitDensity {
            t,
            horizon,
            table,
            budget,
            norm: OnceLock::new(),
        })
    }

    pub fn unnormalized(&self, target: State) -> Result<DensityValue> {
        let (u, v) = (target.t_coord, target.s_coord);
        if !(u > 0.0) {
            return Ok(DensityValue { value: 0.0, error_estimate: 0.0 });
        }
        let hb = h_bar(self.t, u, -v, &self.budget)?;
        let remaining = self.horizon - self.t;
        let (surv, surv_err) = if remaining > 0.0 {
            (
                self.table.survival(target, remaining),
                self.table.stderr(target, remaining),
            )
        } else {
            (1.0, 0.0)
        };
        Ok(DensityValue {
            value: hb.value * surv,
            error_estimate: hb.error_estimate * surv + hb.value.abs() * surv_err,
        })
    }

    /// Total unnormalized mass, cached after the first call.
    pub fn normalization(&self) -> Result<DensityValue> {
        if let Some(v) = self.norm.get() {
            return Ok(*v);
        }
        let inner_budget = self.budget;
        let remaining = self.horizon - self.t;
        let t = self.t;
        let table = self.table;
        let r = integrate_nd(
            |p: &[f64]| {
                let (u, v) = (p[0], p[1]);
                let hb = match h_bar(t, u, -v, &inner_budget) {
                    Ok(d) => d.value,
                    Err(_) => 0.0,
                };
                let surv = if remaining > 0.0 {
                    table.survival(State::new(u, v), remaining)
                } else {
                    1.0
                };
                hb * surv
            },
            &[Domain1D::SemiInfinite(0.0), Domain1D::Real],
            &[
                QuadSpec::new(3e-4, 1e-10),
                QuadSpec::new(1e-4, 1e-10),
            ],
        );
        fail_if_diverged(&r, "meander normalization")?;
        let dv = DensityValue::from_quad(&r);
        let _ = self.norm.set(dv);
        Ok(dv)
    }

    /// Normalized density at `target`.
    pub fn density(&self, target: State) -> Result<DensityValue> {
        let un = self.unnormalized(target)?;
        let norm = self.normalization()?;
        Ok(DensityValue {
            value: un.value / norm.value,
            error_estimate: (un.error_estimate
                + un.value.abs() * norm.error_estimate / norm.value.abs())
                / norm.value.abs(),
        })
    }
}

/// Meander density from an interior start:
/// pbar_t(z; target) P_target(tau > horizon - t) / P_z(tau > horizon).
pub fn meander_density_from_start(
    z: State,
    t: f64,
    target: State,
    horizon: f64,
    table: &SurvivalTable,
    budget: &QuadBudget,
) -> Result<DensityValue> {
    if !(t > 0.0 && t < horizon) {
        return Err(Error::Domain(format!(
            "meander from start needs 0 < t < horizon, got t={t}, horizon={horizon}"
        )));
    }
    let pbar = p_killed_route_b(&DensityPoint::new(z, target, t), budget)?;
    let surv_target = table.survival(target, horizon - t);
    let surv_start = table.survival(z, horizon);
    if surv_start <= 0.0 {
        return Err(Error::Domain(
            "start survival is zero at table resolution".into(),
        ));
    }
    let value = pbar.value * surv_target / surv_start;
    let rel = pbar.error_estimate / pbar.value.abs().max(1e-300)
        + table.stderr(target, horizon - t) / surv_target.max(1e-12)
        + table.stderr(z, horizon) / surv_start;
    Ok(DensityValue {
        value,
        error_estimate: value.abs() * rel,
    })
}

/// Density of the pinned limit process at interior time t in (0, 1):
/// kappa t^{-1/4} (1-t)^{-9/4} h(z1, -z2) p_1(0, 0; z1, -z2)
///   hbar(t, z1, -z2) P_{(z1,z2)}(tau > 1-t).
/// The measured kappa is an input; the normalizations conflict across the
/// source formulas, so nothing here hard-codes it.
pub fn bridge_density(
    t: f64,
    z: State,
    kappa: f64,
    table: &SurvivalTable,
    budget: &QuadBudget,
) -> Result<DensityValue> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("bridge density needs 0 < t < 1, got {t}")));
    }
    let (z1, z2) = (z.t_coord, z.s_coord);
    if !(z1 > 0.0) {
        return Ok(DensityValue { value: 0.0, error_estimate: 0.0 });
    }
    let h = specfun::h_hypergeometric(State::new(z1, -z2))?;
    let p1 = p_free_raw(1.0, 0.0, 0.0, z1, -z2);
    let hb = h_bar(t, z1, -z2, budget)?;
    let surv = table.survival(z, 1.0 - t);
    let pref = kappa * t.powf(-0.25) * (1.0 - t).powf(-2.25) * h * p1;
    Ok(DensityValue {
        value: pref * hb.value * surv,
        error_estimate: pref * (hb.error_estimate * surv + hb.value * table.stderr(z, 1.0 - t)),
    })
}

/// One row of an exported density grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityGridRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
    pub value: f64,
    pub err: f64,
}

/// CSV export with 17 significant digits, enough for bit-exact round trips.
pub fn write_grid_csv<W: Write>(w: &mut W, rows: &[DensityGridRow]) -> Result<()> {
    writeln!(w, "t,x,y,u,v,value,err")?;
    for r in rows {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t, r.x, r.y, r.u, r.v, r.value, r.err
        )?;
    }
    Ok(())
}

pub fn read_grid_csv<R: BufRead>(r: R) -> Result<Vec<DensityGridRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "t,x,y,u,v,value,err" {
                return Err(Error::Parse(format!("unexpected grid header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse(format!("grid row {i} has {} fields", fields.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
        };
        rows.push(DensityGridRow {
            t: parse(fields[0])?,
            x: parse(fields[1])?,
            y: parse(fields[2])?,
            u: parse(fields[3])?,
            v: parse(fields[4])?,
            value: parse(fields[5])?,
            err: parse(fields[6])?,
        });
    }
    Ok(rows)
}

pub fn write_grid_json<W: Write>(w: &mut W, rows: &[DensityGridRow]) -> Result<()> {
    serde_json::to_writer(w, rows).map_err(|e| Error::Parse(e.to_string()))
}

pub fn read_grid_json<R: std::io::Read>(r: R) -> Result<Vec<DensityGridRow>> {
    serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rnd(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn p_free_at_origin() {
        let pt = DensityPoint::new(State::new(0.0, 0.0), State::new(0.0, 0.0), 1.0);
        assert!((p_free(&pt).unwrap() - SQRT3 / PI).abs() < 1e-16);
        assert!(p_free(&DensityPoint::new(State::new(0.0, 0.0), State::new(0.0, 0.0), 0.0)).is_err());
    }

    #[test]
    fn p_free_two_algebraic_forms_agree() {
        // The completed-square form and the expanded form of the exponent.
        let mut seed = 42u64;
        for _ in 0..1000 {
            // Ranges keep the exponent below ~40 so that its last-bit rounding
            // stays within the 1e-14 relative budget.
            let t = 0.8 + 1.2 * rnd(&mut seed);
            let (x, y, u, v) = (
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
            );
            let lhs = p_free_raw(t, x, y, u, v);
            let d = u - x;
            let expanded = SQRT3 / (PI * t * t)
                * (-6.0 * d * d / t.powi(3) + 6.0 * d * (v + y) / (t * t)
                    - 2.0 * (v * v + v * y + y * y) / t)
                    .exp();
            assert!(
                (lhs - expanded).abs() <= 1e-13 * lhs.max(1e-300),
                "forms disagree at t={t} x={x} y={y} u={u} v={v}"
            );
        }
    }

    #[test]
    fn p_free_time_reversal() {
        let mut seed = 7u64;
        for _ in 0..1000 {
            let t = 0.8 + 1.2 * rnd(&mut seed);
            let (x, y, u, v) = (
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
                1.4 * rnd(&mut seed) - 0.7,
            );
            let a = p_free_raw(t, x, y, u, v);
            let b = p_free_raw(t, u, -v, x, -y);
            assert!((a - b).abs() <= 1e-14 * a.max(1e-300));
        }
    }

    #[test]
    fn p_free_integrates_to_one() {
        let r = integrate_nd(
            |p| p_free_raw(1.0, 0.0, 0.0, p[0], p[1]),
            &[Domain1D::Real, Domain1D::Real],
            &[QuadSpec::new(1e-8, 1e-12), QuadSpec::new(1e-9, 1e-13)],
        );
        assert!(r.converged);
        assert!((r.value - 1.0).abs() < 1e-6, "mass {}", r.value);
    }

    #[test]
    fn chapman_kolmogorov() {
        let (x, y, u, v) = (0.3, -0.2, 0.6, 0.4);
        let (s, t) = (0.4, 1.0);
        let r = integrate_nd(
            |p| p_free_raw(s, x, y, p[0], p[1]) * p_free_raw(t - s, p[0], p[1], u, v),
            &[Domain1D::Real, Domain1D::Real],
            &[QuadSpec::new(1e-8, 1e-12), QuadSpec::new(1e-9, 1e-13)],
        );
        assert!(r.converged);
        let direct = p_free_raw(t, x, y, u, v);
        assert!(
            (r.value - direct).abs() < 1e-5 * direct,
            "ck {} vs direct {}",
            r.value,
            direct
        );
    }

    #[test]
    fn q_antisym_properties() {
        let pt = DensityPoint::new(State::new(1.0, 1.0), State::new(0.5, 0.0), 1.0);
        assert_eq!(q_antisym(&pt).unwrap(), 0.0);
        let mut seed = 3u64;
        for _ in 0..200 {
            let t = 0.2 + 2.0 * rnd(&mut seed);
            let (x, y, u, v) = (
                rnd(&mut seed),
                2.0 * rnd(&mut seed) - 1.0,
                rnd(&mut seed),
                2.0 * rnd(&mut seed) - 1.0,
            );
            let a = q_antisym(&DensityPoint::new(State::new(x, y), State::new(u, v), t)).unwrap();
            let b = q_antisym(&DensityPoint::new(State::new(x, y), State::new(u, -v), t)).unwrap();
            assert!((a + b).abs() <= 1e-13 * a.abs().max(1e-300), "sign flip broken");
        }
        // Direct recomputation from two free densities.
        let q = q_antisym(&DensityPoint::new(State::new(1.0, 1.0), State::new(0.0, 1.0), 1.0)).unwrap();
        let direct = p_free_raw(1.0, 1.0, 1.0, 0.0, 1.0) - p_free_raw(1.0, 1.0, 1.0, 0.0, -1.0);
        assert!((q - direct).abs() <= 1e-12 * direct.abs().max(1e-300));
    }

    #[test]
    fn q_bnd_matches_direct_difference() {
        let mut seed = 91u64;
        for _ in 0..500 {
            let t = 0.05 + 2.0 * rnd(&mut seed);
            let x = 2.0 * rnd(&mut seed);
            let y = 2.0 * rnd(&mut seed) - 1.0;
            let w = 2.0 * rnd(&mut seed);
            let stable = q_bnd(t, x, y, w);
            let direct = p_free_raw(t, x, y, 0.0, -w) - p_free_raw(t, x, y, 0.0, w);
            assert!(
                (stable - direct).abs() <= 1e-10 * stable.abs().max(1e-12),
                "q_bnd mismatch at t={t} x={x} y={y} w={w}: {stable} vs {direct}"
            );
        }
    }

    #[test]
    fn lachal_base_reference_value() {
        // Against the theta-integral form, reduced independently with
        // arbitrary precision.
        let v = lachal_base(0.5, 2.0, 1.3);
        assert!((v - 1.228950249192331e-5).abs() < 1e-18, "v = {v}");
        let v2 = lachal_base(0.7, 1.0, 0.4);
        assert!((v2 - 0.05086088480198388).abs() < 1e-14, "v2 = {v2}");
        assert_eq!(lachal_base(0.5, 0.0, 1.0), 0.0);
        assert_eq!(lachal_base(0.5, 1.0, 0.0), 0.0);
    }

    #[test]
    fn lachal_base_theta_form_agrees() {
        // The raw theta-integral form as an in-test oracle.
        let (s, z, w) = (0.7f64, 1.0f64, 0.4f64);
        let theta = crate::quad::integrate_1d(
            |th: f64| th.powf(-0.5) * (-1.5 * th).exp(),
            Domain1D::Finite(0.0, 4.0 * z * w / s),
            &QuadSpec::new(1e-12, 1e-16).with_substitution(Substitution::SqrtSingularity),
        );
        assert!(theta.converged);
        let oracle = 3.0 * w / (PI * (2.0 * PI).sqrt() * s * s)
            * (-(2.0 / s) * (z * z - z * w + w * w)).exp()
            * theta.value;
        assert!((lachal_base(s, z, w) - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn lachal_first_hit_sign_constraints() {
        let budget = QuadBudget::fast();
        // From x > level, arrivals with positive velocity are impossible.
        let v = lachal_first_hit(State::new(1.0, 0.0), 0.0, 1.0, 0.5, &budget).unwrap();
        assert_eq!(v.value, 0.0);
        // Base case at z = 0.
        let v = lachal_first_hit(State::new(0.0, -1.0), 0.0, 1.0, 0.0, &budget).unwrap();
        assert_eq!(v.value, 0.0);
        // Base case from below moving down: returns with positive velocity.
        let v = lachal_first_hit(State::new(0.0, -1.0), 0.0, 0.7, 0.4, &budget).unwrap();
        assert!((v.value - lachal_base(0.7, 1.0, 0.4)).abs() < 1e-15);
        let v = lachal_first_hit(State::new(0.0, -1.0), 0.0, 0.7, -0.4, &budget).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn lachal_total_hitting_probability() {
        // The diffusion from (0, -1) returns to the level almost surely.
        // Inverted time sigma = 1/s with velocity scaled by sqrt(sigma) turns
        // the s^{-5/4} large-time tail into an integrable endpoint.
        let r = integrate_nd(
            |p| {
                let (sig, om) = (p[0], p[1]);
                if sig <= 0.0 {
                    return 0.0;
                }
                lachal_base(1.0 / sig, 1.0, om / sig.sqrt()) * sig.powf(-2.5)
            },
            &[Domain1D::SemiInfinite(0.0), Domain1D::SemiInfinite(0.0)],
            &[
                QuadSpec::new(1e-7, 1e-12).with_substitution(Substitution::SqrtSingularity),
                QuadSpec::new(1e-8, 1e-13),
            ],
        );
        assert!(r.converged, "not converged: {r:?}");
        assert!((r.value - 1.0).abs() < 1e-4, "total mass {}", r.value);
    }

    #[test]
    fn h_integral_reference() {
        let budget = QuadBudget::balanced();
        let g0 = specfun::g_zero();
        let h = h_integral(State::new(1.0, 0.0), &budget).unwrap();
        assert!((h.value - g0).abs() < 1e-5 * g0, "h(1,0) = {}", h.value);
        // Scaling: h(8, 0) / h(1, 0) = 8^{1/6}.
        let h8 = h_integral(State::new(8.0, 0.0), &budget).unwrap();
        assert!(
            (h8.value / h.value - 8.0f64.powf(1.0 / 6.0)).abs() < 1e-4,
            "scaling ratio {}",
            h8.value / h.value
        );
        // Cross-representation agreement at y = +-1.
        for y in [1.0, -1.0] {
            let hi = h_integral(State::new(1.0, y), &budget).unwrap();
            let hg = specfun::g_boundary(y);
            assert!(
                (hi.value - hg).abs() < 1e-4 * hg,
                "h_integral(1,{y}) = {} vs g = {hg}",
                hi.value
            );
        }
        assert!(h_integral(State::new(0.0, 1.0), &budget).is_err());
    }

    #[test]
    fn h_bar_reference_values() {
        // Frozen from independent arbitrary-precision quadrature.
        let budget = QuadBudget::balanced();
        let cases = [
            (1.0, 1.0, 0.0, 0.0065706073532705, 5e-5),
            (1.0, 0.5, 0.5, 0.065532357546837, 5e-5),
            (1.0, 0.5, -0.5, 0.96013833132572, 5e-5),
            (1.0, 2.0, -1.0, 2.8388554260627e-6, 2e-4),
            (1.0, 0.1, 0.3, 0.80402146987435, 5e-5),
            (1.0, 1.0, -1.0, 0.29542370146828, 5e-5),
            (1.0, 0.1, -0.5, 0.33655028263591, 1e-4),
            (1.0, 0.01, -0.5, 0.0035301782048172, 5e-4),
            (1.0, 0.1, 0.5, 0.58759512683855, 1e-4),
        ];
        for (t, x, y, want, tol) in cases {
            let got = h_bar(t, x, y, &budget).unwrap();
            assert!(
                (got.value - want).abs() < tol * want.abs(),
                "h_bar({t},{x},{y}) = {} want {want}",
                got.value
            );
        }
    }

    #[test]
    fn h_bar_scaling_identity() {
        // hbar(t, x, y) = t^{-9/4} hbar(1, x t^{-3/2}, y t^{-1/2}).
        let budget = QuadBudget::balanced();
        let (t, x, y) = (0.5, 0.3, -0.2);
        let lhs = h_bar(t, x, y, &budget).unwrap().value;
        let rhs = t.powf(-2.25)
            * h_bar(1.0, x / t.powf(1.5), y / t.sqrt(), &budget).unwrap().value;
        assert!((lhs - rhs).abs() < 2e-4 * lhs.abs(), "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn h_bar_vanishes_toward_corner_with_downward_slot() {
        // hbar(1, u, -v) for fixed v > 0 decays as u -> 0.
        let budget = QuadBudget::balanced();
        let a = h_bar(1.0, 0.1, -0.5, &budget).unwrap().value;
        let b = h_bar(1.0, 0.01, -0.5, &budget).unwrap().value;
        assert!(b < a && b < 0.01, "no decay: {a} -> {b}");
    }

    #[test]
    fn survival_deep_start_is_one() {
        let est = survival_probability(
            State::new(100.0, 0.0),
            1.0,
            SurvivalMethod::Quadrature(QuadBudget::fast()),
        )
        .unwrap();
        assert!((est.p - 1.0).abs() < 1e-6, "p = {}", est.p);
    }

    #[test]
    fn grid_roundtrip_csv_json() {
        let rows = vec![
            DensityGridRow {
                t: 1.0,
                x: 0.3,
                y: 0.1,
                u: 0.5,
                v: std::f64::consts::PI,
                value: 0.123456789012345678,
                err: 1.5e-7,
            },
            DensityGridRow {
                t: 0.5,
                x: 1e-8,
                y: -2.25,
                u: 7.5,
                v: -0.0,
                value: 3.9e-200,
                err: 0.0,
            },
        ];
        let mut csv = Vec::new();
        write_grid_csv(&mut csv, &rows).unwrap();
        let back = read_grid_csv(std::io::Cursor::new(&csv)).unwrap();
        assert_eq!(rows.len(), back.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!(a.v.to_bits(), b.v.to_bits());
        }
        let mut js = Vec::new();
        write_grid_json(&mut js, &rows).unwrap();
        let back = read_grid_json(std::io::Cursor::new(&js)).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn survival_table_basics() {
        let table = SurvivalTable::build(RngStream::new(101, 0), 4000, 512, -3.0, 3.0, 31);
        // Deterministic rebuild.
        let table2 = SurvivalTable::build(RngStream::new(101, 0), 4000, 512, -3.0, 3.0, 31);
        assert_eq!(table.survival_unit(0.5, 0.0), table2.survival_unit(0.5, 0.0));
        // Monotone in the integrated coordinate.
        let mut prev = 0.0;
        for &x in &[0.01, 0.05, 0.2, 0.5, 1.0, 3.0] {
            let p = table.survival_unit(x, 0.0);
            assert!(p >= prev);
            prev = p;
        }
        // Deep starts survive.
        assert!(table.survival_unit(50.0, 0.0) > 0.999);
        // Upward velocity helps.
        assert!(table.survival_unit(0.1, 1.0) > table.survival_unit(0.1, -1.0));
        // Scaling pass-through.
        let p1 = table.survival(State::new(8.0, 2.0), 4.0);
        let p2 = table.survival_unit(1.0, 1.0);
        assert_eq!(p1, p2);
    }

    #[test]
    fn upper_envelope_matches_bruteforce() {
        let mut seed = 5u64;
        for _ in 0..50 {
            let n = 40;
            let slopes: Vec<f64> = (0..n).map(|k| -(k as f64) / n as f64).collect();
            let intercepts: Vec<f64> = (0..n).map(|_| 2.0 * rnd(&mut seed) - 1.0).collect();
            let queries: Vec<f64> = (0..21).map(|j| -2.0 + 0.2 * j as f64).collect();
            let fast = upper_envelope_eval(&slopes, &intercepts, &queries);
            for (j, &y) in queries.iter().enumerate() {
                let brute = slopes
                    .iter()
                    .zip(&intercepts)
                    .map(|(&m, &b)| m * y + b)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    (fast[j] - brute).abs() < 1e-12,
                    "envelope mismatch at y={y}: {} vs {brute}",
                    fast[j]
                );
            }
        }
    }
}
