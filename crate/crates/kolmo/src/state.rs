//! Phase-space state, scaling maps and the gauge function of the
//! (3/2, 1/2)-self-similar geometry, plus seeded RNG streams.

use std::sync::LazyLock;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the plane R_+ x R: the integrated coordinate and the velocity
/// coordinate. Positivity is checked by operations, not by the type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub t_coord: f64,
    pub s_coord: f64,
}

impl State {
    pub fn new(t_coord: f64, s_coord: f64) -> Self {
        State { t_coord, s_coord }
    }

    pub fn is_finite(&self) -> bool {
        self.t_coord.is_finite() && self.s_coord.is_finite()
    }
}

impl From<(f64, f64)> for State {
    fn from((t, s): (f64, f64)) -> Self {
        State::new(t, s)
    }
}

/// A strictly positive time horizon (continuous time or a step count).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeHorizon(f64);

impl TimeHorizon {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(TimeHorizon(t))
        } else {
            Err(Error::Domain(format!("time horizon must be positive, got {t}")))
        }
    }

    pub fn steps(n: u64) -> Result<Self> {
        if n > 0 {
            Ok(TimeHorizon(n as f64))
        } else {
            Err(Error::Domain("step count must be positive".into()))
        }
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Exponent in the mild start-sequence condition log(1/alpha^{1/2}) = O(alpha^{-q0}).
pub static Q0: LazyLock<f64> = LazyLock::new(|| (9.0f64 / 8.0).ln() / 2.0f64.ln());

/// Gauge function alpha(x, y) = max(|x|^{1/3}, |y|).
///
/// The cube root goes through |x| so a negative integrated coordinate cannot
/// produce a NaN.
pub fn alpha(z: State) -> f64 {
    z.t_coord.abs().cbrt().max(z.s_coord.abs())
}

/// The contraction a_t(x, y) = (x t^{-3/2}, y t^{-1/2}).
pub fn scale_down(z: State, t: TimeHorizon) -> State {
    let t = t.get();
    State::new(z.t_coord / t.powf(1.5), z.s_coord / t.sqrt())
}

/// The dilation b_t = a_t^{-1}, i.e. (x t^{3/2}, y t^{1/2}).
pub fn scale_up(z: State, t: TimeHorizon) -> State {
    let t = t.get();
    State::new(z.t_coord * t.powf(1.5), z.s_coord * t.sqrt())
}

/// Whether log(1/alpha^{1/2}) <= bound_constant * alpha^{-q0}.
pub fn mild_condition_holds(alpha_value: f64, bound_constant: f64) -> Result<bool> {
    if alpha_value <= 0.0 || !alpha_value.is_finite() {
        return Err(Error::Domain(format!(
            "mild condition needs alpha > 0, got {alpha_value}"
        )));
    }
    let lhs = (1.0 / alpha_value.sqrt()).ln();
    let rhs = bound_constant * alpha_value.powf(-*Q0);
    Ok(lhs <= rhs)
}

/// A seeded, splittable random stream. Identical (seed, stream_id) pairs
/// reproduce identical draws; distinct stream ids never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// The i-th substream. Callers sharding work across workers hand each
    /// worker `stream.substream(i)`.
    pub fn substream(&self, i: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: self.stream_id.wrapping_add(i),
        }
    }
}
