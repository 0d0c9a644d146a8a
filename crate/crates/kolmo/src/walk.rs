//! Discrete-time engine: step laws (lattice, Gaussian, exponentially tilted),
//! the Markov chain pairing an integrated random walk with its driving walk,
//! exit times at zero and at quadratic barriers, scaled paths, and exact
//! dynamic-programming tables for lattice laws.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{RngStream, State};

/// Step distribution of the driving walk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StepKind {
    /// +-1 with probability 1/2 each.
    Rademacher,
    /// Arbitrary weights over integer support.
    Lattice(Vec<(i64, f64)>),
    /// Standard normal.
    Gaussian,
    /// Exponentially tilted base law at parameter t.
    Tilted { base: Box<StepLaw>, t_param: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLaw {
    pub kind: StepKind,
    pub mean: f64,
    pub variance: f64,
    pub mgf_available: bool,
    /// Cumulative weights for lattice sampling.
    #[serde(skip)]
    cumulative: Vec<(f64, f64)>,
}

impl StepLaw {
    pub fn rademacher() -> Self {
        StepLaw {
            kind: StepKind::Rademacher,
            mean: 0.0,
            variance: 1.0,
            mgf_available: true,
            cumulative: Vec::new(),
        }
    }

    pub fn gaussian() -> Self {
        StepLaw {
            kind: StepKind::Gaussian,
            mean: 0.0,
            variance: 1.0,
            mgf_available: true,
            cumulative: Vec::new(),
        }
    }

    /// A lattice law from (point, weight) pairs. Weights must be
    /// non-negative and sum to one; the support differences must generate
    /// the full integer lattice (aperiodicity), or the law is rejected as a
    /// configuration error.
    pub fn lattice(mut support: Vec<(i64, f64)>) -> Result<Self> {
        support.retain(|&(_, w)| w != 0.0);
        support.sort_by_key(|&(x, _)| x);
        if support.len() < 2 {
            return Err(Error::Domain("lattice law needs at least two support points".into()));
        }
        let mut sum = 0.0;
        for &(_, w) in &support {
            if !(w > 0.0) {
                return Err(Error::Domain(format!("negative or NaN lattice weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("lattice weights sum to {sum}, not 1")));
        }
        let mut g: i64 = 0;
        for win in support.windows(2) {
            g = gcd(g, win[1].0 - win[0].0);
        }
        if g != 1 {
            return Err(Error::Domain(format!(
                "lattice law is periodic: support differences share factor {g}"
            )));
        }
        let mean: f64 = support.iter().map(|&(x, w)| x as f64 * w).sum();
        let variance: f64 = support
            .iter()
            .map(|&(x, w)| (x as f64 - mean).powi(2) * w)
            .sum();
        let cumulative = cumulative_of(&support);
        Ok(StepLaw {
            kind: StepKind::Lattice(support),
            mean,
            variance,
            mgf_available: true,
            cumulative,
        })
    }

    /// Exponential tilting at parameter `t`: weights reweighted by e^{t x},
    /// normalized by the moment generating function.
    pub fn tilted(base: StepLaw, t_param: f64) -> Result<Self> {
        if !base.mgf_available {
            return Err(Error::Domain("tilting needs a law with finite exponential moments".into()));
        }
        let mean = base.log_mgf_d1(t_param);
        let variance = base.log_mgf_d2(t_param);
        let cumulative = match base.lattice_weights() {
            Some(w) => {
                let m = base.mgf(t_param).expect("lattice mgf is finite");
                let tilted: Vec<(i64, f64)> = w
                    .iter()
                    .map(|&(x, p)| (x, p * (t_param * x as f64).exp() / m))
                    .collect();
                cumulative_of(&tilted)
            }
            None => Vec::new(),
        };
        Ok(StepLaw {
            kind: StepKind::Tilted {
                base: Box::new(base),
                t_param,
            },
            mean,
            variance,
            mgf_available: true,
            cumulative,
        })
    }

    /// Integer support with weights when the law lives on the lattice.
    pub fn lattice_weights(&self) -> Option<Vec<(i64, f64)>> {
        match &self.kind {
            StepKind::Rademacher => Some(vec![(-1, 0.5), (1, 0.5)]),
            StepKind::Lattice(w) => Some(w.clone()),
            StepKind::Tilted { base, t_param } => base.lattice_weights().map(|w| {
                let m = base.mgf(*t_param).expect("lattice mgf is finite");
                w.into_iter()
                    .map(|(x, p)| (x, p * (t_param * x as f64).exp() / m))
                    .collect()
            }),
            StepKind::Gaussian => None,
        }
    }

    /// Moment generating function E[e^{tX}].
    pub fn mgf(&self, t: f64) -> Option<f64> {
        match &self.kind {
            StepKind::Rademacher => Some(t.cosh()),
            StepKind::Gaussian => Some((t * t / 2.0).exp()),
            StepKind::Lattice(w) => Some(w.iter().map(|&(x, p)| p * (t * x as f64).exp()).sum()),
            StepKind::Tilted { base, t_param } => {
                Some(base.mgf(t + t_param)? / base.mgf(*t_param)?)
            }
        }
    }

    /// (log M)'(t): the mean of the t-tilted law.
    pub fn log_mgf_d1(&self, t: f64) -> f64 {
        match &self.kind {
            StepKind::Rademacher => t.tanh(),
            StepKind::Gaussian => t,
            StepKind::Lattice(w) => {
                let m: f64 = w.iter().map(|&(x, p)| p * (t * x as f64).exp()).sum();
                let d: f64 = w.iter().map(|&(x, p)| p * x as f64 * (t * x as f64).exp()).sum();
                d / m
            }
            StepKind::Tilted { base, t_param } => base.log_mgf_d1(t + t_param),
        }
    }

    /// (log M)''(t): the variance of the t-tilted law.
    pub fn log_mgf_d2(&self, t: f64) -> f64 {
        match &self.kind {
            StepKind::Rademacher => 1.0 - t.tanh().powi(2),
            StepKind::Gaussian => 1.0,
            StepKind::Lattice(w) => {
                let m: f64 = w.iter().map(|&(x, p)| p * (t * x as f64).exp()).sum();
                let d1: f64 = w.iter().map(|&(x, p)| p * x as f64 * (t * x as f64).exp()).sum();
                let d2: f64 = w
                    .iter()
                    .map(|&(x, p)| p * (x as f64).powi(2) * (t * x as f64).exp())
                    .sum();
                d2 / m - (d1 / m).powi(2)
            }
            StepKind::Tilted { base, t_param } => base.log_mgf_d2(t + t_param),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match &self.kind {
            StepKind::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            StepKind::Gaussian => rng.sample(StandardNormal),
            StepKind::Lattice(_) | StepKind::Tilted { .. } => {
                if self.cumulative.is_empty() {
                    // Tilted Gaussian: normal with shifted mean.
                    let z: f64 = rng.sample(StandardNormal);
                    return self.mean + z;
                }
                let u: f64 = rng.gen();
                for &(c, x) in &self.cumulative {
                    if u <= c {
                        return x;
                    }
                }
                self.cumulative.last().unwrap().1
            }
        }
    }
}

fn cumulative_of(support: &[(i64, f64)]) -> Vec<(f64, f64)> {
    let mut acc = 0.0;
    support
        .iter()
        .map(|&(x, w)| {
            acc += w;
            (acc, x as f64)
        })
        .collect()
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// One transition of the chain: (T, S) -> (T + S + x, S + x).
pub fn step_chain(z: State, x: f64) -> State {
    State::new(z.t_coord + z.s_coord + x, z.s_coord + x)
}

/// A simulated chain path. `tau` is the first index with T <= 0, including
/// index zero, or None if the path never crossed within its length.
#[derive(Debug, Clone)]
pub struct ChainPath {
    pub start: State,
    pub steps: Vec<f64>,
    pub states: Vec<State>,
    pub tau: Option<usize>,
}

pub fn simulate_path(
    start: State,
    law: &StepLaw,
    n: usize,
    stream: RngStream,
    stop_at_tau: bool,
) -> ChainPath {
    let mut rng = stream.rng();
    simulate_path_with(start, law, n, &mut rng, stop_at_tau)
}

pub fn simulate_path_with(
    start: State,
    law: &StepLaw,
    n: usize,
    rng: &mut ChaCha12Rng,
    stop_at_tau: bool,
) -> ChainPath {
    let mut states = Vec::with_capacity(n + 1);
    let mut steps = Vec::with_capacity(n);
    states.push(start);
    let mut tau = if start.t_coord <= 0.0 { Some(0) } else { None };
    if tau.is_some() && stop_at_tau {
        return ChainPath { start, steps, states, tau };
    }
    let mut z = start;
    for k in 0..n {
        let x = law.sample(rng);
        z = step_chain(z, x);
        steps.push(x);
        states.push(z);
        if tau.is_none() && z.t_coord <= 0.0 {
            tau = Some(k + 1);
            if stop_at_tau {
                break;
            }
        }
    }
    ChainPath { start, steps, states, tau }
}

/// The rescaled step function (T([tn]) n^{-3/2}, S([tn]) n^{-1/2}) on [0, 1].
#[derive(Debug, Clone)]
pub struct ScaledPath {
    states: Vec<State>,
    n: usize,
    /// Quadratic centering (c, sigma); (0, 1) is the plain scaling.
    c: f64,
    sigma: f64,
}

impl ScaledPath {
    pub fn eval(&self, t: f64) -> State {
        let k = ((t * self.n as f64).floor() as usize).min(self.n);
        let z = self.states[k];
        let kf = k as f64;
        let tc = (z.t_coord - kf * (kf + 1.0) / 2.0 * self.c)
            / (self.sigma.powi(3) * (self.n as f64).powf(1.5));
        let sc = (z.s_coord - kf * self.c) / (self.sigma * (self.n as f64).sqrt());
        State::new(tc, sc)
    }
}

pub fn scaled_path(path: &ChainPath, n: usize) -> Result<ScaledPath> {
    if path.states.len() < n + 1 {
        return Err(Error::Domain(format!(
            "path has {} states, need {} for horizon {n}",
            path.states.len(),
            n + 1
        )));
    }
    Ok(ScaledPath {
        states: path.states[..=n].to_vec(),
        n,
        c: 0.0,
        sigma: 1.0,
    })
}

/// Drift-corrected scaling: T([ns]) recentred by the quadratic ramp
/// ns(ns+1)c/2 and S([ns]) by the linear ramp, both normalized by sigma.
pub fn drift_scaled_path(path: &ChainPath, c: f64, sigma: f64, n: usize) -> Result<ScaledPath> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if path.states.len() < n + 1 {
        return Err(Error::Domain(format!(
            "path has {} states, need {}",
            path.states.len(),
            n + 1
        )));
    }
    Ok(ScaledPath {
        states: path.states[..=n].to_vec(),
        n,
        c,
        sigma,
    })
}

/// First index k >= 0 with T(k) <= k(k+1)c/2, or None.
pub fn tau_quadratic(path: &ChainPath, c: f64) -> Option<usize> {
    for (k, z) in path.states.iter().enumerate() {
        let kf = k as f64;
        if z.t_coord <= kf * (kf + 1.0) / 2.0 * c {
            return Some(k);
        }
    }
    None
}

/// Solve (log M)'(t) = c by bracketed bisection, to 1e-12.
pub fn tilt_parameter(law: &StepLaw, c: f64) -> Result<f64> {
    if !law.mgf_available {
        return Err(Error::Domain("tilt parameter needs exponential moments".into()));
    }
    if c == law.mean {
        return Ok(0.0);
    }
    // Attainable drifts lie strictly inside the convex hull of the support.
    if let Some(w) = law.lattice_weights() {
        let lo = w.first().unwrap().0 as f64;
        let hi = w.last().unwrap().0 as f64;
        if c <= lo || c >= hi {
            return Err(Error::Domain(format!(
                "drift {c} outside the attainable range ({lo}, {hi})"
            )));
        }
    }
    let (mut a, mut b) = if c > law.mean { (0.0, 1.0) } else { (-1.0, 0.0) };
    let mut expand = 0;
    while expand < 200 {
        let (fa, fb) = (law.log_mgf_d1(a) - c, law.log_mgf_d1(b) - c);
        if fa * fb <= 0.0 {
            break;
        }
        if c > law.mean {
            b *= 2.0;
        } else {
            a *= 2.0;
        }
        expand += 1;
        if !b.is_finite() || !a.is_finite() {
            break;
        }
    }
    let (fa, fb) = (law.log_mgf_d1(a) - c, law.log_mgf_d1(b) - c);
    if fa * fb > 0.0 {
        return Err(Error::Domain(format!(
            "no tilt parameter brackets drift {c} in [{a}, {b}]"
        )));
    }
    let mut lo = a;
    let mut hi = b;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = law.log_mgf_d1(mid) - c;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (law.log_mgf_d1(lo) - c) * fm < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Which law of motion a table was built under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionTag {
    /// (T, S) -> (T + S + X, S + X): the innovation enters both coordinates.
    Standard,
    /// (T, S) -> (T + S, S + X): the innovation enters the velocity only;
    /// this is the law of motion of the time-reversed chain.
    ReversedInnovation,
}

/// Description of the time-reversed bridge problem: counting paths from `z`
/// to `y` surviving n steps equals counting reversed-motion paths from
/// (y1, -y2) to (z1, -z2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReversedProblem {
    pub start: (i64, i64),
    pub end: (i64, i64),
    pub motion: MotionTag,
    pub n: usize,
}

pub fn time_reverse(z: (i64, i64), y: (i64, i64), n: usize) -> ReversedProblem {
    ReversedProblem {
        start: (y.0, -y.1),
        end: (z.0, -z.1),
        motion: MotionTag::ReversedInnovation,
        n,
    }
}

/// State budget for dense DP layers.
#[derive(Debug, Clone, Copy)]
pub struct DpBudget {
    pub max_states: usize,
    pub max_horizon: usize,
}

impl Default for DpBudget {
    fn default() -> Self {
        DpBudget {
            max_states: 80_000_000,
            max_horizon: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct DpLayer {
    t_min: i64,
    s_min: i64,
    t_count: usize,
    s_count: usize,
    w: Vec<f64>,
}

impl DpLayer {
    fn idx(&self, t: i64, s: i64) -> Option<usize> {
        if t < self.t_min || s < self.s_min {
            return None;
        }
        let ti = (t - self.t_min) as usize;
        let si = (s - self.s_min) as usize;
        if ti >= self.t_count || si >= self.s_count {
            return None;
        }
        Some(ti * self.s_count + si)
    }

    fn get(&self, t: i64, s: i64) -> f64 {
        self.idx(t, s).map(|i| self.w[i]).unwrap_or(0.0)
    }
}

/// Exact survival table: layer k holds P(Z(k) = (T, S), tau > k) for all
/// lattice states with every partial integrated coordinate above the barrier.
#[derive(Debug, Clone)]
pub struct DpTable {
    pub start: (i64, i64),
    pub n: usize,
    pub motion: MotionTag,
    support: Vec<(i64, f64)>,
    layers: Vec<DpLayer>,
}

/// Survival condition at step k: the state survives iff T > barrier(k).
pub trait Barrier {
    fn value(&self, k: usize) -> f64;
}

/// The plain exit condition tau: barrier identically zero.
pub struct ZeroBarrier;
impl Barrier for ZeroBarrier {
    fn value(&self, _k: usize) -> f64 {
        0.0
    }
}

/// Quadratic barrier k(k+1)c/2 of the drift case.
pub struct QuadraticBarrier(pub f64);
impl Barrier for QuadraticBarrier {
    fn value(&self, k: usize) -> f64 {
        let kf = k as f64;
        kf * (kf + 1.0) / 2.0 * self.0
    }
}

pub fn exact_survival_dp(
    start: (i64, i64),
    law: &StepLaw,
    n: usize,
    budget: &DpBudget,
) -> Result<DpTable> {
    exact_survival_dp_with(start, law, n, budget, &ZeroBarrier, MotionTag::Standard)
}

pub fn exact_survival_dp_with(
    start: (i64, i64),
    law: &StepLaw,
    n: usize,
    budget: &DpBudget,
    barrier: &dyn Barrier,
    motion: MotionTag,
) -> Result<DpTable> {
    let support = law.lattice_weights().ok_or_else(|| {
        Error::Domain("exact dp requires a lattice step law".into())
    })?;
    if n > budget.max_horizon {
        return Err(Error::Domain(format!(
            "dp horizon {n} exceeds cap {}",
            budget.max_horizon
        )));
    }
    let x_min = support.first().unwrap().0;
    let x_max = support.last().unwrap().0;

    let mut layers: Vec<DpLayer> = Vec::with_capacity(n + 1);
    let alive0 = start.0 as f64 > barrier.value(0);
    let layer0 = DpLayer {
        t_min: start.0,
        s_min: start.1,
        t_count: 1,
        s_count: 1,
        w: vec![if alive0 { 1.0 } else { 0.0 }],
    };
    let mut total_states = 1usize;
    layers.push(layer0);

    for k in 0..n {
        let prev = &layers[k];
        // Bounds of the next layer from the current bounds and the support.
        let (t_min_prev, t_max_prev) = (prev.t_min, prev.t_min + prev.t_count as i64 - 1);
        let (s_min_prev, s_max_prev) = (prev.s_min, prev.s_min + prev.s_count as i64 - 1);
        let (t_min, t_max, s_min, s_max) = match motion {
            MotionTag::Standard => (
                t_min_prev + s_min_prev + x_min,
                t_max_prev + s_max_prev + x_max,
                s_min_prev + x_min,
                s_max_prev + x_max,
            ),
            MotionTag::ReversedInnovation => (
                t_min_prev + s_min_prev,
                t_max_prev + s_max_prev,
                s_min_prev + x_min,
                s_max_prev + x_max,
            ),
        };
        let bar = barrier.value(k + 1);
        let t_floor = (bar.floor() as i64 + 1).max(t_min);
        if t_floor > t_max {
            // Everything dead from here on.
            layers.push(DpLayer {
                t_min: t_floor,
                s_min,
                t_count: 1,
                s_count: 1,
                w: vec![0.0],
            });
            continue;
        }
        let t_count = (t_max - t_floor + 1) as usize;
        let s_count = (s_max - s_min + 1) as usize;
        total_states = total_states.saturating_add(t_count.saturating_mul(s_count));
        if total_states > budget.max_states {
            return Err(Error::DpOverflow {
                states: total_states,
                budget: budget.max_states,
            });
        }
        let mut next = DpLayer {
            t_min: t_floor,
            s_min,
            t_count,
            s_count,
            w: vec![0.0; t_count * s_count],
        };
        for ti in 0..prev.t_count {
            let t = prev.t_min + ti as i64;
            for si in 0..prev.s_count {
                let p = prev.w[ti * prev.s_count + si];
                if p == 0.0 {
                    continue;
                }
                let s = prev.s_min + si as i64;
                for &(x, wx) in &support {
                    let (t_new, s_new) = match motion {
                        MotionTag::Standard => (t + s + x, s + x),
                        MotionTag::ReversedInnovation => (t + s, s + x),
                    };
                    if (t_new as f64) <= bar {
                        continue;
                    }
                    if let Some(i) = next.idx(t_new, s_new) {
                        next.w[i] += p * wx;
                    }
                }
            }
        }
        layers.push(next);
    }
    Ok(DpTable {
        start,
        n,
        motion,
        support,
        layers,
    })
}

impl DpTable {
    /// P(tau > k): total surviving mass at layer k.
    pub fn survival(&self, k: usize) -> f64 {
        self.layers[k].w.iter().sum()
    }

    /// Surviving states and weights at layer k.
    pub fn marginal(&self, k: usize) -> Vec<((i64, i64), f64)> {
        let layer = &self.layers[k];
        let mut out = Vec::new();
        for ti in 0..layer.t_count {
            for si in 0..layer.s_count {
                let w = layer.w[ti * layer.s_count + si];
                if w > 0.0 {
                    out.push((
                        (layer.t_min + ti as i64, layer.s_min + si as i64),
                        w,
                    ));
                }
            }
        }
        out
    }

    /// Conditional law of Z(k) given survival to k.
    pub fn conditional_marginal(&self, k: usize) -> Vec<((i64, i64), f64)> {
        let total = self.survival(k);
        self.marginal(k)
            .into_iter()
            .map(|(z, w)| (z, w / total))
            .collect()
    }

    pub fn weight(&self, k: usize, t: i64, s: i64) -> f64 {
        self.layers[k].get(t, s)
    }

    /// One-step transition probability of the underlying motion.
    fn step_weight(&self, from: (i64, i64), to: (i64, i64)) -> f64 {
        for &(x, wx) in &self.support {
            let next = match self.motion {
                MotionTag::Standard => (from.0 + from.1 + x, from.1 + x),
                MotionTag::ReversedInnovation => (from.0 + from.1, from.1 + x),
            };
            if next == to {
                return wx;
            }
        }
        0.0
    }

    /// Exact backward sampling of a surviving path pinned at `end`:
    /// P(Z(k-1) = z' | Z(k) = z, survival) is proportional to the forward
    /// weight of z' times the one-step transition into z.
    pub fn sample_bridge(&self, end: (i64, i64), rng: &mut ChaCha12Rng) -> Result<Vec<(i64, i64)>> {
        if self.weight(self.n, end.0, end.1) <= 0.0 {
            return Err(Error::Unreachable(format!(
                "endpoint {end:?} carries zero dp mass at horizon {}",
                self.n
            )));
        }
        let mut path = vec![(0i64, 0i64); self.n + 1];
        path[self.n] = end;
        let mut current = end;
        for k in (1..=self.n).rev() {
            // Predecessors under the motion: x determined by the velocity step.
            let mut options: Vec<((i64, i64), f64)> = Vec::with_capacity(self.support.len());
            let mut total = 0.0;
            for &(x, wx) in &self.support {
                let prev = match self.motion {
                    MotionTag::Standard => (current.0 - current.1, current.1 - x),
                    MotionTag::ReversedInnovation => {
                        let s_prev = current.1 - x;
                        (current.0 - s_prev, s_prev)
                    }
                };
                let fw = self.weight(k - 1, prev.0, prev.1);
                if fw > 0.0 {
                    let p = fw * wx;
                    options.push((prev, p));
                    total += p;
                }
            }
            if options.is_empty() || total <= 0.0 {
                return Err(Error::Unreachable(format!(
                    "no predecessor for {current:?} at layer {k}"
                )));
            }
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = options[0].0;
            for (z, p) in options {
                acc += p;
                if u <= acc {
                    chosen = z;
                    break;
                }
            }
            path[k - 1] = chosen;
            current = chosen;
        }
        Ok(path)
    }

    /// CSV export of the conditional marginal at layer k.
    pub fn write_marginal_csv<W: Write>(&self, w: &mut W, k: usize) -> Result<()> {
        writeln!(w, "T,S,probability")?;
        for ((t, s), p) in self.conditional_marginal(k) {
            writeln!(w, "{t},{s},{p:.16e}")?;
        }
        Ok(())
    }
}

/// Binary chain-path dump: (magic, n, start, steps as f64).
pub fn write_chain_binary<W: Write>(w: &mut W, path: &ChainPath) -> Result<()> {
    w.write_all(b"KWLK")?;
    w.write_all(&(path.steps.len() as u64).to_le_bytes())?;
    w.write_all(&path.start.t_coord.to_le_bytes())?;
    w.write_all(&path.start.s_coord.to_le_bytes())?;
    for x in &path.steps {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_chain_binary<R: std::io::Read>(r: &mut R) -> Result<ChainPath> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"KWLK" {
        return Err(Error::Parse("bad chain path magic".into()));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let t0 = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let s0 = f64::from_le_bytes(b8);
    let start = State::new(t0, s0);
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        steps.push(f64::from_le_bytes(b8));
    }
    // Rebuild states and tau from the recurrence.
    let mut states = Vec::with_capacity(n + 1);
    states.push(start);
    let mut z = start;
    let mut tau = if start.t_coord <= 0.0 { Some(0) } else { None };
    for (k, &x) in steps.iter().enumerate() {
        z = step_chain(z, x);
        states.push(z);
        if tau.is_none() && z.t_coord <= 0.0 {
            tau = Some(k + 1);
        }
    }
    Ok(ChainPath { start, steps, states, tau })
}

/// CSV dump of a chain path.
pub fn write_chain_csv<W: Write>(w: &mut W, path: &ChainPath) -> Result<()> {
    writeln!(w, "k,T,S")?;
    for (k, z) in path.states.iter().enumerate() {
        writeln!(w, "{k},{:.16e},{:.16e}", z.t_coord, z.s_coord)?;
    }
    Ok(())
}

/// Exhaustive enumeration of all step sequences for small lattice problems:
/// an independent oracle for the dp tables. Returns the map from surviving
/// endpoints to probabilities of {path survives, Z(n) = endpoint}.
pub fn enumerate_survival(
    start: (i64, i64),
    law: &StepLaw,
    n: usize,
    barrier: &dyn Barrier,
) -> Result<HashMap<(i64, i64), f64>> {
    let support = law
        .lattice_weights()
        .ok_or_else(|| Error::Domain("enumeration needs a lattice law".into()))?;
    if support.len().pow(n as u32) > 20_000_000 {
        return Err(Error::Domain(format!(
            "enumeration of {}^{n} paths is too large",
            support.len()
        )));
    }
    let mut out: HashMap<(i64, i64), f64> = HashMap::new();
    let mut stack: Vec<((i64, i64), f64, usize)> = Vec::new();
    if start.0 as f64 > barrier.value(0) {
        stack.push((start, 1.0, 0));
    }
    while let Some((z, p, k)) = stack.pop() {
        if k == n {
            *out.entry(z).or_insert(0.0) += p;
            continue;
        }
        for &(x, wx) in &support {
            let next = (z.0 + z.1 + x, z.1 + x);
            if next.0 as f64 > barrier.value(k + 1) {
                stack.push((next, p * wx, k + 1));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_chain_examples() {
        let z = step_chain(State::new(0.0, 0.0), 1.0);
        assert_eq!((z.t_coord, z.s_coord), (1.0, 1.0));
        let z = step_chain(State::new(1.0, 1.0), -1.0);
        assert_eq!((z.t_coord, z.s_coord), (1.0, 0.0));
    }

    #[test]
    fn matrix_and_summation_forms_agree() {
        // T(n) = x + n y + sum_i (n - i + 1) X_i, exactly, on a random path.
        let law = StepLaw::lattice(vec![(-2, 0.25), (0, 0.25), (1, 0.5)]).unwrap();
        let path = simulate_path(State::new(3.0, -1.0), &law, 20, RngStream::new(5, 1), false);
        for n in 0..=20usize {
            let direct = path.states[n].t_coord;
            let mut acc = 3.0 + n as f64 * (-1.0);
            for (i, &x) in path.steps[..n].iter().enumerate() {
                acc += (n - i) as f64 * x; // step i (0-based) gets weight n - i
            }
            assert_eq!(direct, acc, "mismatch at n={n}");
        }
    }

    #[test]
    fn tau_convention_includes_index_zero() {
        let p = simulate_path(State::new(0.0, 5.0), &StepLaw::rademacher(), 4, RngStream::new(1, 0), false);
        assert_eq!(p.tau, Some(0));
        let p = simulate_path(State::new(-1.0, 5.0), &StepLaw::rademacher(), 4, RngStream::new(1, 0), true);
        assert_eq!(p.tau, Some(0));
        assert!(p.steps.is_empty());
    }

    #[test]
    fn rademacher_two_step_survival_is_half() {
        // Exhaustive: of the 4 equally likely step pairs from (1, 0), exactly
        // the two starting with +1 survive.
        let law = StepLaw::rademacher();
        let table = exact_survival_dp((1, 0), &law, 2, &DpBudget::default()).unwrap();
        assert_eq!(table.survival(2), 0.5);
        let en = enumerate_survival((1, 0), &law, 2, &ZeroBarrier).unwrap();
        let total: f64 = en.values().sum();
        assert_eq!(total, 0.5);
        // Monte Carlo cross-check.
        let mut rng = RngStream::new(7, 0).rng();
        let mut alive = 0u64;
        let n = 100_000u64;
        for _ in 0..n {
            let p = simulate_path_with(State::new(1.0, 0.0), &law, 2, &mut rng, true);
            if p.tau.is_none() {
                alive += 1;
            }
        }
        let phat = alive as f64 / n as f64;
        assert!((phat - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn dp_matches_enumeration_exactly() {
        let law = StepLaw::lattice(vec![(-1, 0.3), (0, 0.2), (2, 0.5)]).unwrap();
        let table = exact_survival_dp((2, 0), &law, 9, &DpBudget::default()).unwrap();
        let en = enumerate_survival((2, 0), &law, 9, &ZeroBarrier).unwrap();
        let en_total: f64 = en.values().sum();
        assert!((table.survival(9) - en_total).abs() < 1e-14);
        for (z, p) in table.marginal(9) {
            let q = en.get(&z).copied().unwrap_or(0.0);
            assert!((p - q).abs() < 1e-14, "state {z:?}: dp {p} enum {q}");
        }
    }

    #[test]
    fn dp_layer_zero_and_monotonicity() {
        let law = StepLaw::rademacher();
        let t = exact_survival_dp((1, 0), &law, 16, &DpBudget::default()).unwrap();
        assert_eq!(t.survival(0), 1.0);
        let dead = exact_survival_dp((0, 3), &law, 4, &DpBudget::default()).unwrap();
        assert_eq!(dead.survival(0), 0.0);
        let mut prev = 1.0;
        for k in 0..=16 {
            let s = t.survival(k);
            assert!(s <= prev + 1e-15, "survival increased at {k}");
            prev = s;
        }
    }

    #[test]
    fn dp_overflow_is_an_error() {
        let law = StepLaw::rademacher();
        let budget = DpBudget {
            max_states: 100,
            max_horizon: 64,
        };
        match exact_survival_dp((1, 0), &law, 30, &budget) {
            Err(Error::DpOverflow { .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn time_reversal_identity_on_dp() {
        // P_(1,0)(Z(4) = (3,1), tau > 4) = P_(3,-1)(Z~(4) = (1,0), tau~ > 4).
        let law = StepLaw::rademacher();
        let fwd = exact_survival_dp((1, 0), &law, 4, &DpBudget::default()).unwrap();
        let rp = time_reverse((1, 0), (3, 1), 4);
        assert_eq!(rp.start, (3, -1));
        assert_eq!(rp.end, (1, 0));
        let rev = exact_survival_dp_with(
            rp.start,
            &law,
            4,
            &DpBudget::default(),
            &ZeroBarrier,
            rp.motion,
        )
        .unwrap();
        let lhs = fwd.weight(4, 3, 1);
        let rhs = rev.weight(4, 1, 0);
        assert!(lhs > 0.0);
        assert!((lhs - rhs).abs() < 1e-15, "{lhs} vs {rhs}");
        // Full-layer identity over all endpoints.
        for ((t, s), p) in fwd.marginal(4) {
            let rp = time_reverse((1, 0), (t, s), 4);
            let rev = exact_survival_dp_with(
                rp.start,
                &law,
                4,
                &DpBudget::default(),
                &ZeroBarrier,
                rp.motion,
            )
            .unwrap();
            assert!((rev.weight(4, 1, 0) - p).abs() < 1e-15);
        }
        // Reversing twice returns the original endpoints.
        let twice = time_reverse(rp.start, rp.end, 4);
        assert_eq!(twice.start, (1, 0));
        assert_eq!(twice.end, (3, -1));
    }

    #[test]
    fn reversed_recurrence_hand_case() {
        // T~_l = T~_{l-1} + S~_{l-1}: the innovation reaches T one step late.
        let law = StepLaw::rademacher();
        let t = exact_survival_dp_with(
            (2, 1),
            &law,
            1,
            &DpBudget::default(),
            &ZeroBarrier,
            MotionTag::ReversedInnovation,
        )
        .unwrap();
        // From (2, 1): T' = 3 regardless of X; S' in {0, 2}.
        let m = t.marginal(1);
        assert_eq!(m.len(), 2);
        for ((tt, ss), p) in m {
            assert_eq!(tt, 3);
            assert!(ss == 0 || ss == 2);
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn scaled_path_evaluation() {
        let law = StepLaw::rademacher();
        let n = 64usize;
        let path = simulate_path(State::new(2.0, 1.0), &law, n, RngStream::new(3, 9), false);
        let sp = scaled_path(&path, n).unwrap();
        let z0 = sp.eval(0.0);
        assert_eq!(z0.t_coord, 2.0 / (n as f64).powf(1.5));
        assert_eq!(z0.s_coord, 1.0 / (n as f64).sqrt());
        let z1 = sp.eval(1.0);
        assert_eq!(z1.t_coord, path.states[n].t_coord / (n as f64).powf(1.5));
        assert_eq!(z1.s_coord, path.states[n].s_coord / (n as f64).sqrt());
        // Floor indexing against an independent recomputation on a query grid.
        for j in 0..100 {
            let t = j as f64 / 100.0;
            let k = (t * n as f64).floor() as usize;
            let expect = path.states[k];
            let got = sp.eval(t);
            assert_eq!(got.t_coord, expect.t_coord / (n as f64).powf(1.5));
        }
        assert!(scaled_path(&path, n + 1).is_err());
    }

    #[test]
    fn tilt_parameter_closed_form() {
        let law = StepLaw::rademacher();
        assert_eq!(tilt_parameter(&law, 0.0).unwrap(), 0.0);
        // f(t) = tanh t for unit steps, so c = tanh(1) inverts to 1.
        let c = 1.0f64.tanh();
        let t = tilt_parameter(&law, c).unwrap();
        assert!((t - 1.0).abs() < 1e-11, "t = {t}");
        assert!(tilt_parameter(&law, 1.5).is_err());
    }

    #[test]
    fn tilted_law_moments_and_sampling() {
        let base = StepLaw::rademacher();
        let c = 0.2f64;
        let t = tilt_parameter(&base, c).unwrap();
        let tilted = StepLaw::tilted(base, t).unwrap();
        assert!((tilted.mean - c).abs() < 1e-12);
        assert!((tilted.variance - (1.0 - c * c)).abs() < 1e-10);
        let w = tilted.lattice_weights().unwrap();
        let sum: f64 = w.iter().map(|&(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-14);
        // Sample mean within 4 standard errors at a million draws.
        let mut rng = RngStream::new(21, 0).rng();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += tilted.sample(&mut rng);
        }
        let mean = acc / n as f64;
        let se = (tilted.variance / n as f64).sqrt();
        assert!((mean - c).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn tau_quadratic_cases() {
        let law = StepLaw::rademacher();
        let path = simulate_path(State::new(1.0, 0.0), &law, 32, RngStream::new(2, 4), false);
        assert_eq!(tau_quadratic(&path, 0.0), path.tau);
        let z0 = simulate_path(State::new(0.0, 2.0), &law, 4, RngStream::new(2, 5), false);
        assert_eq!(tau_quadratic(&z0, 0.5), Some(0));
        // Hand-built path against a hand-computed barrier: steps +1,+1,-1,-1,+1
        // from (1, 0) give T = 1, 2, 4, 5, 5, 6; barrier k(k+1)/2 * 0.9 =
        // 0, 0.9, 2.7, 5.4, 9, 13.5 first exceeds T at k = 3.
        let mut states = vec![State::new(1.0, 0.0)];
        for &x in &[1.0, 1.0, -1.0, -1.0, 1.0f64] {
            states.push(step_chain(*states.last().unwrap(), x));
        }
        let path = ChainPath {
            start: states[0],
            steps: vec![1.0, 1.0, -1.0, -1.0, 1.0],
            states,
            tau: None,
        };
        assert_eq!(tau_quadratic(&path, 0.9), Some(3));
    }

    #[test]
    fn drift_scaling_degenerates_to_plain() {
        let law = StepLaw::rademacher();
        let n = 32;
        let path = simulate_path(State::new(1.0, 0.0), &law, n, RngStream::new(11, 0), false);
        let plain = scaled_path(&path, n).unwrap();
        let drift = drift_scaled_path(&path, 0.0, 1.0, n).unwrap();
        for j in 0..=10 {
            let t = j as f64 / 10.0;
            assert_eq!(plain.eval(t).t_coord, drift.eval(t).t_coord);
            assert_eq!(plain.eval(t).s_coord, drift.eval(t).s_coord);
        }
        let from_origin = ChainPath {
            start: State::new(0.0, 0.0),
            steps: vec![],
            states: vec![State::new(0.0, 0.0)],
            tau: Some(0),
        };
        let d = drift_scaled_path(&from_origin, 0.3, 0.9, 0).unwrap();
        let z = d.eval(0.0);
        assert_eq!((z.t_coord, z.s_coord), (0.0, 0.0));
        assert!(drift_scaled_path(&path, 0.1, 0.0, n).is_err());
    }

    #[test]
    fn quadratic_barrier_reduction_via_change_of_measure() {
        // P_tilted(tau_c > n) equals the exponentially reweighted base-law
        // sum over surviving endpoints, exactly, on small dp instances.
        let base = StepLaw::rademacher();
        let c = 0.2f64;
        let tc = tilt_parameter(&base, c).unwrap();
        let tilted = StepLaw::tilted(base.clone(), tc).unwrap();
        let n = 12usize;
        let barrier = QuadraticBarrier(c);
        let start = (1i64, 0i64);
        let tilted_dp =
            exact_survival_dp_with(start, &tilted, n, &DpBudget::default(), &barrier, MotionTag::Standard)
                .unwrap();
        let base_dp =
            exact_survival_dp_with(start, &base, n, &DpBudget::default(), &barrier, MotionTag::Standard)
                .unwrap();
        let m = base.mgf(tc).unwrap();
        let mut reweighted = 0.0;
        for ((_, s), p) in base_dp.marginal(n) {
            reweighted += p * (tc * (s - start.1) as f64).exp();
        }
        reweighted /= m.powi(n as i32);
        let direct = tilted_dp.survival(n);
        assert!(
            (direct - reweighted).abs() < 1e-13,
            "tilted {direct} vs reweighted {reweighted}"
        );
    }

    #[test]
    fn bridge_sampler_unique_path() {
        // From (1, 0) over two unit steps, endpoint (4, 2) forces +1, +1.
        let law = StepLaw::rademacher();
        let table = exact_survival_dp((1, 0), &law, 2, &DpBudget::default()).unwrap();
        let mut rng = RngStream::new(8, 0).rng();
        let path = table.sample_bridge((4, 2), &mut rng).unwrap();
        assert_eq!(path, vec![(1, 0), (2, 1), (4, 2)]);
        assert!(table.sample_bridge((100, 0), &mut rng).is_err());
    }

    #[test]
    fn aperiodicity_enforced() {
        assert!(StepLaw::lattice(vec![(-2, 0.5), (2, 0.5)]).is_err());
        assert!(StepLaw::lattice(vec![(-1, 0.5), (1, 0.5)]).is_ok());
        assert!(StepLaw::lattice(vec![(-1, 0.6), (1, 0.6)]).is_err());
    }

    #[test]
    fn chain_dump_roundtrip() {
        let law = StepLaw::gaussian();
        let p = simulate_path(State::new(1.5, -0.25), &law, 33, RngStream::new(14, 3), false);
        let mut buf = Vec::new();
        write_chain_binary(&mut buf, &p).unwrap();
        let q = read_chain_binary(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(p.steps.len(), q.steps.len());
        assert_eq!(p.tau, q.tau);
        for (a, b) in p.states.iter().zip(&q.states) {
            assert_eq!(a.t_coord.to_bits(), b.t_coord.to_bits());
        }
    }
}
