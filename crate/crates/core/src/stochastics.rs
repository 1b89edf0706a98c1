//! Seeded random streams and the sampling kernels used by the Gibbs sampler.
//!
//! Every chain owns one [`RngStream`], a ChaCha8 generator keyed by a master
//! seed and selected by a 64-bit stream id. Distinct ids give disjoint
//! keystreams, so windows and chains never share state, and the full position
//! of a stream can be captured in an [`RngState`] and restored bit-exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::NoiseSpec;
use crate::error::{param_err, Result};

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    /// Offset into the keystream, in 32-bit words.
    pub word_pos: u128,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream_id);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn std_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Continuous distributions the sampler draws from.
///
/// Gamma is parameterized by shape and *rate*.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StandardKind {
    Normal { mean: f64, var: f64 },
    Gamma { shape: f64, rate: f64 },
    Beta { a: f64, b: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        param_err(format!("{name} must be positive and finite, got {v}"))
    }
}

impl StandardKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StandardKind::Normal { mean, var } => {
                if !mean.is_finite() {
                    return param_err("normal mean must be finite");
                }
                positive("normal variance", var)
            }
            StandardKind::Gamma { shape, rate } => {
                positive("gamma shape", shape)?;
                positive("gamma rate", rate)
            }
            StandardKind::Beta { a, b } => {
                positive("beta a", a)?;
                positive("beta b", b)
            }
        }
    }
}

/// One draw from a normal, gamma or beta density.
pub fn sample_standard(kind: StandardKind, rng: &mut RngStream) -> Result<f64> {
    kind.validate()?;
    Ok(match kind {
        StandardKind::Normal { mean, var } => mean + var.sqrt() * rng.std_normal(),
        StandardKind::Gamma { shape, rate } => sample_log_gamma(shape, rate, rng).exp(),
        StandardKind::Beta { a, b } => beta_from_log_gammas(a, b, rng),
    })
}

/// Log of a Gamma(shape, rate) draw.
///
/// Shapes below one use the boost `G(a) = G(a + 1) * U^(1/a)` evaluated in
/// log space, so draws from vague priors such as Gamma(1e-3, 1e-3) keep their
/// magnitude even when the value itself underflows a double.
pub(crate) fn sample_log_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0)
            .expect("validated gamma shape")
            .sample(&mut rng.rng);
        g.ln() - rate.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0)
            .expect("validated gamma shape")
            .sample(&mut rng.rng);
        let u = rng.open01();
        g.ln() + u.ln() / shape - rate.ln()
    }
}

fn beta_from_log_gammas(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let la = sample_log_gamma(a, 1.0, rng);
    let lb = sample_log_gamma(b, 1.0, rng);
    1.0 / (1.0 + (lb - la).exp())
}

/// Draw from a finite zero-mean Gaussian mixture. The empty mixture is the
/// zero-noise limit and returns exactly 0 without consuming randomness.
pub fn sample_mixture_noise(noise: &NoiseSpec, rng: &mut RngStream) -> Result<f64> {
    noise.validate()?;
    if noise.components.is_empty() {
        return Ok(0.0);
    }
    let u = rng.open01();
    let mut acc = 0.0;
    let last = noise.components.len() - 1;
    let mut var = noise.components[last].variance;
    for (i, c) in noise.components.iter().enumerate() {
        acc += c.weight;
        if u < acc || i == last {
            var = c.variance;
            break;
        }
    }
    Ok(var.sqrt() * rng.std_normal())
}

/// Draw `N >= min_n` with `P(N) ∝ (1 - lambda)^(N - 1)`.
pub fn sample_truncated_geometric(lambda: f64, min_n: usize, rng: &mut RngStream) -> Result<usize> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return param_err(format!("geometric parameter must lie in (0, 1), got {lambda}"));
    }
    if min_n < 1 {
        return param_err("min_n must be at least 1");
    }
    let failures = Geometric::new(lambda)
        .expect("validated geometric parameter")
        .sample(&mut rng.rng);
    Ok(min_n + failures as usize)
}

/// Index `i` (0-based) with probability `weights[i] / sum(weights)`.
pub fn sample_categorical(weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return param_err("categorical weights must be finite and nonnegative");
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return param_err("categorical weights are all zero");
    }
    let u = rng.open01() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Categorical draw from unnormalized log-weights.
pub(crate) fn sample_log_categorical(log_weights: &[f64], rng: &mut RngStream) -> usize {
    debug_assert!(!log_weights.is_empty());
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_weights.iter().map(|lw| (lw - max).exp()).sum();
    let u = rng.open01() * total;
    let mut acc = 0.0;
    for (i, lw) in log_weights.iter().enumerate() {
        acc += (lw - max).exp();
        if u < acc {
            return i;
        }
    }
    log_weights.len() - 1
}

/// `ln Γ(x)`.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Log density of Gamma(shape, rate) at `x`.
pub fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of Beta(a, b) at `x`.
pub fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
}
