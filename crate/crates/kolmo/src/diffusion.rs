//! Simulation of the pair (integrated Brownian motion, Brownian motion) with
//! exact joint-Gaussian increments, exit detection at the boundary {first
//! coordinate = 0}, and the distributional scaling check.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::state::{RngStream, State};

/// A simulated path on a uniform grid.
#[derive(Debug, Clone)]
pub struct DiffusionPath {
    pub dt: f64,
    pub states: Vec<State>,
    /// First grid index at which a crossing was detected, if any.
    pub killed_index: Option<usize>,
    /// Whether the in-step linear refinement flagged the crossing.
    pub refined_kill: bool,
}

/// Exit-detection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillMode {
    None,
    /// Kill when a grid state has first coordinate <= 0.
    Grid,
    /// Grid detection plus the in-step linear surrogate u + s v, which flags
    /// crossings the grid would miss when the step starts with steeply
    /// negative velocity. A bias-reduction heuristic; the residual bias is
    /// measured by the dt ladder, not assumed.
    LinearRefine,
}

/// One exact increment over dt from velocity v: (du, dv) = (dt v + g1, g2)
/// with (g1, g2) centered Gaussian, covariance [[dt^3/3, dt^2/2], [dt^2/2, dt]].
pub fn exact_increment(v: f64, dt: f64, rng: &mut ChaCha12Rng) -> (f64, f64) {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let g1 = dt.powf(1.5) / 3.0f64.sqrt() * z1;
    let g2 = 0.75f64.sqrt() * dt.sqrt() * z1 + 0.5 * dt.sqrt() * z2;
    (dt * v + g1, g2)
}

fn checked_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::Domain(format!(
            "horizon and dt must be positive, got horizon {horizon}, dt {dt}"
        )));
    }
    if dt > horizon {
        return Err(Error::Domain(format!("dt {dt} exceeds horizon {horizon}")));
    }
    let n = horizon / dt;
    if (n - n.round()).abs() > 1e-9 * n {
        return Err(Error::Domain(format!(
            "dt {dt} does not divide horizon {horizon} within rounding"
        )));
    }
    Ok(n.round() as usize)
}

/// Simulate a path from `start` over `horizon` on a grid of spacing `dt`.
/// With a kill mode, stops at the first detected crossing.
pub fn simulate_diffusion(
    start: State,
    horizon: f64,
    dt: f64,
    stream: RngStream,
    kill: KillMode,
) -> Result<DiffusionPath> {
    let n = checked_steps(horizon, dt)?;
    let mut rng = stream.rng();
    let mut states = Vec::with_capacity(n + 1);
    states.push(start);
    let (mut u, mut v) = (start.t_coord, start.s_coord);
    let mut killed_index = None;
    let mut refined = false;
    if kill != KillMode::None && u <= 0.0 {
        killed_index = Some(0);
    }
    for k in 0..n {
        if killed_index.is_some() {
            break;
        }
        let (u_prev, v_prev) = (u, v);
        let (du, dv) = exact_increment(v, dt, &mut rng);
        u += du;
        v += dv;
        states.push(State::new(u, v));
        match kill {
            KillMode::None => {}
            KillMode::Grid => {
                if u <= 0.0 {
                    killed_index = Some(k + 1);
                }
            }
            KillMode::LinearRefine => {
                if u <= 0.0 {
                    killed_index = Some(k + 1);
                } else if u_prev + dt * v_prev <= 0.0 {
                    killed_index = Some(k + 1);
                    refined = true;
                }
            }
        }
    }
    Ok(DiffusionPath {
        dt,
        states,
        killed_index,
        refined_kill: refined,
    })
}

/// Monte Carlo estimate of a survival-weighted functional of the endpoint:
/// mean of f(W(horizon)) on {survival}, dead paths contributing zero.
/// Returns (mean, stderr). Work is sharded across substreams, one per path,
/// so the result does not depend on worker scheduling.
pub fn mc_survival_functional<F>(
    start: State,
    horizon: f64,
    dt: f64,
    n_paths: u64,
    stream: RngStream,
    kill: KillMode,
    f: F,
) -> Result<(f64, f64)>
where
    F: Fn(State) -> f64 + Sync,
{
    let n = checked_steps(horizon, dt)?;
    let (sum, sumsq) = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            let (mut u, mut v) = (start.t_coord, start.s_coord);
            if u <= 0.0 && kill != KillMode::None {
                return (0.0, 0.0);
            }
            for _ in 0..n {
                let (u_prev, v_prev) = (u, v);
                let (du, dv) = exact_increment(v, dt, &mut rng);
                u += du;
                v += dv;
                match kill {
                    KillMode::None => {}
                    KillMode::Grid => {
                        if u <= 0.0 {
                            return (0.0, 0.0);
                        }
                    }
                    KillMode::LinearRefine => {
                        if u <= 0.0 || u_prev + dt * v_prev <= 0.0 {
                            return (0.0, 0.0);
                        }
                    }
                }
            }
            let val = f(State::new(u, v));
            (val, val * val)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean = sum / n_paths as f64;
    let var = (sumsq / n_paths as f64 - mean * mean).max(0.0);
    Ok((mean, (var / n_paths as f64).sqrt()))
}

/// Survival probability estimate with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEstimate {
    pub p: f64,
    pub stderr: f64,
    pub samples: u64,
}

use serde::{Deserialize, Serialize};

/// Monte Carlo survival probability over `horizon`.
pub fn survival_mc(
    start: State,
    horizon: f64,
    dt: f64,
    n_paths: u64,
    stream: RngStream,
    kill: KillMode,
) -> Result<SurvivalEstimate> {
    let (p, stderr) = mc_survival_functional(start, horizon, dt, n_paths, stream, kill, |_| 1.0)?;
    Ok(SurvivalEstimate {
        p,
        stderr,
        samples: n_paths,
    })
}

/// Survival estimates at a ladder of monitoring resolutions, all detected on
/// the same underlying fine paths: the fine grid is simulated once per path
/// and coarser levels subsample it, so coarse survival >= fine survival holds
/// pathwise and the ladder is monotone by construction.
pub fn survival_mc_ladder(
    start: State,
    horizon: f64,
    fine_dt: f64,
    coarsenings: &[u32],
    n_paths: u64,
    stream: RngStream,
    kill: KillMode,
) -> Result<Vec<(f64, SurvivalEstimate)>> {
    let n = checked_steps(horizon, fine_dt)?;
    for &c in coarsenings {
        let step = 1usize << c;
        if n % step != 0 {
            return Err(Error::Domain(format!(
                "coarsening 2^{c} does not divide the fine grid ({n} steps)"
            )));
        }
    }
    let survived_counts: Vec<u64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            let (mut u, mut v) = (start.t_coord, start.s_coord);
            let mut us = Vec::with_capacity(n + 1);
            let mut vs = Vec::with_capacity(n + 1);
            us.push(u);
            vs.push(v);
            for _ in 0..n {
                let (du, dv) = exact_increment(v, fine_dt, &mut rng);
                u += du;
                v += dv;
                us.push(u);
                vs.push(v);
            }
            let mut bits = 0u64;
            for (level, &c) in coarsenings.iter().enumerate() {
                let stride = 1usize << c;
                let dt_level = fine_dt * stride as f64;
                let mut alive = us[0] > 0.0;
                if alive {
                    let mut k = stride;
                    while k <= n {
                        let u_now = us[k];
                        let u_prev = us[k - stride];
                        let v_prev = vs[k - stride];
                        let crossed = match kill {
                            KillMode::None => false,
                            KillMode::Grid => u_now <= 0.0,
                            KillMode::LinearRefine => {
                                u_now <= 0.0 || u_prev + dt_level * v_prev <= 0.0
                            }
                        };
                        if crossed {
                            alive = false;
                            break;
                        }
                        k += stride;
                    }
                }
                if alive {
                    bits |= 1 << level;
                }
            }
            bits
        })
        .fold(
            || vec![0u64; coarsenings.len()],
            |mut acc, bits| {
                for (level, a) in acc.iter_mut().enumerate() {
                    *a += (bits >> level) & 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; coarsenings.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    Ok(coarsenings
        .iter()
        .zip(survived_counts)
        .map(|(&c, count)| {
            let p = count as f64 / n_paths as f64;
            let stderr = (p * (1.0 - p) / n_paths as f64).sqrt();
            (
                fine_dt * (1u64 << c) as f64,
                SurvivalEstimate {
                    p,
                    stderr,
                    samples: n_paths,
                },
            )
        })
        .collect())
}

/// Endpoint samples of the (optionally killed) diffusion; killed paths are
/// dropped. Deterministic per stream.
pub fn endpoint_samples(
    start: State,
    horizon: f64,
    dt: f64,
    n_paths: u64,
    stream: RngStream,
    kill: KillMode,
) -> Result<Vec<State>> {
    let n = checked_steps(horizon, dt)?;
    let samples: Vec<Option<State>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            let (mut u, mut v) = (start.t_coord, start.s_coord);
            if u <= 0.0 && kill != KillMode::None {
                return None;
            }
            for _ in 0..n {
                let (u_prev, v_prev) = (u, v);
                let (du, dv) = exact_increment(v, dt, &mut rng);
                u += du;
                v += dv;
                match kill {
                    KillMode::None => {}
                    KillMode::Grid => {
                        if u <= 0.0 {
                            return None;
                        }
                    }
                    KillMode::LinearRefine => {
                        if u <= 0.0 || u_prev + dt * v_prev <= 0.0 {
                            return None;
                        }
                    }
                }
            }
            Some(State::new(u, v))
        })
        .collect();
    Ok(samples.into_iter().flatten().collect())
}

/// Report of the distributional scaling check: per-coordinate two-sample KS
/// distances between a_t-rescaled endpoints over [0, t] and endpoints over
/// [0, 1] started at the rescaled point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub ks_u: f64,
    pub ks_v: f64,
    pub critical_value: f64,
    pub pass: bool,
    pub survival_gap_sigmas: f64,
}

/// Check a_t(W over [0, t] from z) against W over [0, 1] from a_t(z), in
/// distribution: endpoint marginals per coordinate and killed survival.
pub fn diffusion_scaling_check(
    start: State,
    t: f64,
    samples: u64,
    dt_unit: f64,
    stream: RngStream,
    level_critical: f64,
) -> Result<ScalingReport> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("scaling check needs t > 0, got {t}")));
    }
    let scaled_start = crate::state::scale_down(start, crate::state::TimeHorizon::new(t)?);
    // Long-horizon run, rescaled.
    let long = endpoint_samples(start, t, dt_unit * t, samples, stream, KillMode::LinearRefine)?;
    let unit = endpoint_samples(
        scaled_start,
        1.0,
        dt_unit,
        samples,
        stream.substream(samples),
        KillMode::LinearRefine,
    )?;
    let t_pow = t.powf(1.5);
    let long_u: Vec<f64> = long.iter().map(|s| s.t_coord / t_pow).collect();
    let long_v: Vec<f64> = long.iter().map(|s| s.s_coord / t.sqrt()).collect();
    let unit_u: Vec<f64> = unit.iter().map(|s| s.t_coord).collect();
    let unit_v: Vec<f64> = unit.iter().map(|s| s.s_coord).collect();

    let ks_u = two_sample_ks(&long_u, &unit_u);
    let ks_v = two_sample_ks(&long_v, &unit_v);
    let (n, m) = (long_u.len() as f64, unit_u.len() as f64);
    let critical = level_critical * ((n + m) / (n * m)).sqrt();

    let p_long = long.len() as f64 / samples as f64;
    let p_unit = unit.len() as f64 / samples as f64;
    let se = (p_long * (1.0 - p_long) / samples as f64 + p_unit * (1.0 - p_unit) / samples as f64)
        .sqrt();
    let gap_sigmas = if se > 0.0 { (p_long - p_unit).abs() / se } else { 0.0 };

    Ok(ScalingReport {
        ks_u,
        ks_v,
        critical_value: critical,
        pass: ks_u < critical && ks_v < critical && gap_sigmas < 3.0,
        survival_gap_sigmas: gap_sigmas,
    })
}

fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_unstable_by(|p, q| p.total_cmp(q));
    ys.sort_unstable_by(|p, q| p.total_cmp(q));
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i].min(ys[j]);
        while i < n && xs[i] <= x {
            i += 1;
        }
        while j < m && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Binary path dump: header (magic, dt, n, start), then (u, v) pairs as f64.
pub fn write_path_binary<W: std::io::Write>(w: &mut W, path: &DiffusionPath) -> Result<()> {
    w.write_all(b"KDIF")?;
    w.write_all(&path.dt.to_le_bytes())?;
    w.write_all(&(path.states.len() as u64).to_le_bytes())?;
    let killed = path.killed_index.map(|i| i as i64).unwrap_or(-1);
    w.write_all(&killed.to_le_bytes())?;
    for s in &path.states {
        w.write_all(&s.t_coord.to_le_bytes())?;
        w.write_all(&s.s_coord.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_path_binary<R: std::io::Read>(r: &mut R) -> Result<DiffusionPath> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"KDIF" {
        return Err(Error::Parse("bad diffusion path magic".into()));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let dt = f64::from_le_bytes(buf8);
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let killed = i64::from_le_bytes(buf8);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf8)?;
        let u = f64::from_le_bytes(buf8);
        r.read_exact(&mut buf8)?;
        let v = f64::from_le_bytes(buf8);
        states.push(State::new(u, v));
    }
    Ok(DiffusionPath {
        dt,
        states,
        killed_index: if killed < 0 { None } else { Some(killed as usize) },
        refined_kill: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_moments() {
        let mut rng = RngStream::new(11, 0).rng();
        let dt = 0.25;
        let v0 = 0.7;
        let n = 1_000_000usize;
        let (mut s_du, mut s_dv, mut s_du2, mut s_dv2, mut s_cross) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (du, dv) = exact_increment(v0, dt, &mut rng);
            let g1 = du - dt * v0;
            s_du += g1;
            s_dv += dv;
            s_du2 += g1 * g1;
            s_dv2 += dv * dv;
            s_cross += g1 * dv;
        }
        let nf = n as f64;
        let var_dv = s_dv2 / nf;
        let var_du = s_du2 / nf;
        let cov = s_cross / nf;
        // 4-sigma bands around the exact moments.
        let se_var = (2.0f64 / nf).sqrt();
        assert!((s_dv / nf).abs() < 4.0 * (dt / nf).sqrt());
        assert!((var_dv - dt).abs() < 4.0 * se_var * dt);
        assert!((var_du - dt.powi(3) / 3.0).abs() < 4.0 * se_var * dt.powi(3) / 3.0);
        assert!((cov - dt * dt / 2.0).abs() < 4.0 * se_var * dt * dt / 2.0);
    }

    #[test]
    fn increment_correlation_sqrt3_over_2() {
        let mut rng = RngStream::new(12, 0).rng();
        let n = 1_000_000usize;
        let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (du, dv) = exact_increment(0.0, 1.0, &mut rng);
            s11 += du * du;
            s22 += dv * dv;
            s12 += du * dv;
        }
        let corr = s12 / (s11.sqrt() * s22.sqrt());
        assert!((corr - 0.75f64.sqrt()).abs() < 0.005, "corr = {corr}");
    }

    #[test]
    fn deep_start_never_killed() {
        for i in 0..1000u64 {
            let p = simulate_diffusion(
                State::new(1e6, 0.0),
                1.0,
                1.0 / 64.0,
                RngStream::new(5, i),
                KillMode::LinearRefine,
            )
            .unwrap();
            assert!(p.killed_index.is_none());
        }
    }

    #[test]
    fn determinism_per_stream() {
        let a = simulate_diffusion(State::new(0.3, 0.1), 1.0, 1.0 / 256.0, RngStream::new(9, 3), KillMode::Grid).unwrap();
        let b = simulate_diffusion(State::new(0.3, 0.1), 1.0, 1.0 / 256.0, RngStream::new(9, 3), KillMode::Grid).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        for (s, t) in a.states.iter().zip(&b.states) {
            assert_eq!(s.t_coord.to_bits(), t.t_coord.to_bits());
            assert_eq!(s.s_coord.to_bits(), t.s_coord.to_bits());
        }
    }

    #[test]
    fn start_on_boundary_killed_at_zero() {
        let p = simulate_diffusion(State::new(0.0, 1.0), 1.0, 0.25, RngStream::new(1, 0), KillMode::Grid).unwrap();
        assert_eq!(p.killed_index, Some(0));
    }

    #[test]
    fn ladder_is_monotone_pathwise() {
        let ladder = survival_mc_ladder(
            State::new(0.2, 0.0),
            1.0,
            1.0 / 4096.0,
            &[4, 2, 0],
            20_000,
            RngStream::new(77, 0),
            KillMode::Grid,
        )
        .unwrap();
        // Coarser detection (larger dt) can only miss crossings.
        assert!(ladder[0].1.p >= ladder[1].1.p);
        assert!(ladder[1].1.p >= ladder[2].1.p);
        assert!(ladder[0].0 > ladder[1].0 && ladder[1].0 > ladder[2].0);
    }

    #[test]
    fn dt_must_divide_horizon() {
        assert!(simulate_diffusion(State::new(1.0, 0.0), 1.0, 0.3, RngStream::new(0, 0), KillMode::None).is_err());
        assert!(simulate_diffusion(State::new(1.0, 0.0), 1.0, -0.1, RngStream::new(0, 0), KillMode::None).is_err());
    }

    #[test]
    fn path_binary_roundtrip() {
        let p = simulate_diffusion(State::new(0.5, -0.2), 0.5, 1.0 / 32.0, RngStream::new(4, 2), KillMode::Grid).unwrap();
        let mut buf = Vec::new();
        write_path_binary(&mut buf, &p).unwrap();
        let q = read_path_binary(&mut std::io::Cursor::new(buf)).unwrap();
        assert_eq!(p.states.len(), q.states.len());
        assert_eq!(p.killed_index, q.killed_index);
        for (s, t) in p.states.iter().zip(&q.states) {
            assert_eq!(s.t_coord.to_bits(), t.t_coord.to_bits());
        }
    }
}
