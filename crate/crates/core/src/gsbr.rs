//! Geometric stick-breaking reconstruction sampler.
//!
//! The observed series `x_{1:n}` is modelled as `x_i = g(θ, x_{i-2}, x_{i-1}) + e_i`
//! with `e_i` drawn from an infinite mixture of zero-mean Gaussians with
//! geometric weights `λ(1-λ)^{k-1}` and precisions `τ_k`. The chain also
//! carries `T + 2` latent values before `x_1`: the `T`-shifted initial point
//! `(x_{-T-1}, x_{-T})` and the intermediates `x_{-T+1:0}`, all restricted to
//! the open interval `trunc`.
//!
//! Internally the augmented series is `z = (latent_x, obs_x)` and the
//! `M = n + T` likelihood terms are indexed by `m = 0..M`, term `m` being the
//! residual `z[m+2] − g(θ, z[m], z[m+1])`, i.e. observation index `i = m − T + 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{basis_size, fill_features, TimeSeries};
use crate::error::{param_err, Error, Result};
use crate::stochastics::{
    beta_ln_pdf, gamma_ln_pdf, sample_log_categorical, sample_log_gamma, sample_truncated_geometric, RngState,
    RngStream,
};

/// Diagonal jitter added to the coefficient precision. It doubles as a
/// vanishingly weak Gaussian prior on `θ` so the joint density stays coherent.
pub const THETA_JITTER: f64 = 1e-10;

/// `λ` is kept inside `[LAMBDA_EPS, 1 − LAMBDA_EPS]`.
pub const LAMBDA_EPS: f64 = 1e-12;

const TARGET_ACCEPTANCE: f64 = 0.44;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Iteration budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 200000 sweeps, 50000 burn-in, thinning 150.
    Paper,
    /// 20000 sweeps, 5000 burn-in, thinning 15.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile '{s}' (paper, desk)"))),
        }
    }
}

/// Sampler configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GsbrConfig {
    /// Backward horizon.
    #[serde(rename = "T")]
    pub t: usize,
    pub delay: usize,
    pub degree: usize,
    /// Restriction interval for every latent coordinate, open at both ends.
    pub trunc: [f64; 2],
    pub alpha: f64,
    pub beta: f64,
    /// Gamma shape of the precision prior.
    pub b1: f64,
    /// Gamma rate of the precision prior.
    pub b2: f64,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_scale0: f64,
    pub adapt: bool,
    /// Turning this off freezes the latent values at their initial draw.
    pub sample_latent: bool,
}

impl Default for GsbrConfig {
    fn default() -> Self {
        Self {
            t: 3,
            delay: 2,
            degree: 2,
            trunc: [-3.0, 3.0],
            alpha: 0.5,
            beta: 0.5,
            b1: 1e-3,
            b2: 1e-3,
            iters: 200_000,
            burn_in: 50_000,
            thin: 150,
            proposal_scale0: 0.1,
            adapt: true,
            sample_latent: true,
        }
    }
}

impl GsbrConfig {
    pub fn desk() -> Self {
        Self::default().with_profile(Profile::Desk)
    }

    /// Replace the iteration budget by the one of `profile`.
    pub fn with_profile(mut self, profile: Profile) -> Self {
        let (iters, burn_in, thin) = match profile {
            Profile::Paper => (200_000, 50_000, 150),
            Profile::Desk => (20_000, 5_000, 15),
        };
        self.iters = iters;
        self.burn_in = burn_in;
        self.thin = thin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay != 2 || !(self.degree == 2 || self.degree == 3) {
            return Err(Error::UnsupportedModel {
                delay: self.delay,
                degree: self.degree,
            });
        }
        let [lo, hi] = self.trunc;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return param_err(format!("trunc must be a bounded nonempty interval, got ({lo}, {hi})"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("b1", self.b1), ("b2", self.b2)] {
            if !(v > 0.0 && v.is_finite()) {
                return param_err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.proposal_scale0 > 0.0 && self.proposal_scale0.is_finite()) {
            return param_err("proposal_scale0 must be positive");
        }
        if self.iters == 0 {
            return param_err("iters must be positive");
        }
        if self.burn_in >= self.iters {
            return param_err(format!("burn_in ({}) must be below iters ({})", self.burn_in, self.iters));
        }
        if self.thin == 0 {
            return param_err("thin must be at least 1");
        }
        Ok(())
    }

    pub fn basis_size(&self) -> usize {
        basis_size(self.delay, self.degree)
    }

    /// Number of latent values `x_{-T-1:0}`.
    pub fn latent_len(&self) -> usize {
        self.t + self.delay
    }

    /// Number of retained samples produced by a full run.
    pub fn retained_count(&self) -> usize {
        (self.iters - self.burn_in) / self.thin
    }

    fn in_trunc(&self, x: f64) -> bool {
        x > self.trunc[0] && x < self.trunc[1]
    }
}

/// Complete Gibbs state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub lambda: f64,
    /// Realized prefix of `τ_{1:∞}`; `tau[k]` is component `k + 1`.
    pub tau: Vec<f64>,
    /// 1-based allocations, one per likelihood term.
    pub alloc_d: Vec<usize>,
    pub slice_n: Vec<usize>,
    pub theta: Vec<f64>,
    /// `x_{-T-1}, …, x_0`.
    pub latent_x: Vec<f64>,
    pub obs_x: Vec<f64>,
}

#[inline]
fn model_g(theta: &[f64], degree: usize, older: f64, recent: f64) -> f64 {
    let mut f = [0.0; 10];
    fill_features(recent, older, degree, &mut f);
    theta.iter().zip(&f).map(|(c, x)| c * x).sum()
}

impl ChainState {
    /// Number of likelihood terms `M = n + T`.
    pub fn pairs(&self) -> usize {
        self.latent_x.len() + self.obs_x.len() - 2
    }

    fn degree(&self) -> usize {
        if self.theta.len() == 10 {
            3
        } else {
            2
        }
    }

    /// `z[q]` of the augmented series.
    #[inline]
    pub fn value(&self, q: usize) -> f64 {
        let nl = self.latent_x.len();
        if q < nl {
            self.latent_x[q]
        } else {
            self.obs_x[q - nl]
        }
    }

    /// Residual of likelihood term `m`.
    #[inline]
    pub fn residual(&self, m: usize) -> f64 {
        self.value(m + 2) - model_g(&self.theta, self.degree(), self.value(m), self.value(m + 1))
    }

    pub fn residuals(&self) -> Vec<f64> {
        (0..self.pairs()).map(|m| self.residual(m)).collect()
    }

    /// `N* = max N_i`.
    pub fn n_star(&self) -> usize {
        self.slice_n.iter().copied().max().unwrap_or(0)
    }

    /// Check every structural invariant of the state.
    pub fn check(&self, config: &GsbrConfig) -> Result<()> {
        let m = self.pairs();
        if self.alloc_d.len() != m || self.slice_n.len() != m {
            return param_err("allocation vectors do not match the number of terms");
        }
        if self.latent_x.len() != config.latent_len() || self.theta.len() != config.basis_size() {
            return param_err("state shape does not match the configuration");
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return param_err(format!("lambda {} outside (0, 1)", self.lambda));
        }
        if self.tau.iter().any(|t| !(*t > 0.0)) {
            return param_err("tau entries must be positive");
        }
        if self.tau.len() < self.n_star() {
            return param_err("tau is shorter than N*");
        }
        if self.alloc_d.iter().zip(&self.slice_n).any(|(&d, &n)| d < 1 || d > n) {
            return param_err("allocation outside 1..=N");
        }
        if self.latent_x.iter().any(|&x| !config.in_trunc(x)) {
            return param_err("latent value outside the restriction interval");
        }
        Ok(())
    }

    /// One retained draw.
    pub fn sample(&self, sweep_index: usize) -> PosteriorSample {
        PosteriorSample {
            theta: self.theta.clone(),
            lambda: self.lambda,
            initial_point: [self.latent_x[0], self.latent_x[1]],
            intermediates: self.latent_x[2..].to_vec(),
            sweep_index,
        }
    }
}

/// One retained posterior draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub theta: Vec<f64>,
    pub lambda: f64,
    /// `(x_{-T-1}, x_{-T})`.
    pub initial_point: [f64; 2],
    /// `x_{-T+1:0}`.
    pub intermediates: Vec<f64>,
    pub sweep_index: usize,
}

/// Log of the unnormalized augmented posterior.
pub fn log_joint(state: &ChainState, config: &GsbrConfig) -> f64 {
    if state.latent_x.iter().any(|&x| !config.in_trunc(x)) {
        return f64::NEG_INFINITY;
    }
    let lam = state.lambda;
    let (ln_l, ln_1ml) = (lam.ln(), (-lam).ln_1p());
    let mut lj = beta_ln_pdf(lam, config.alpha, config.beta);
    lj += state.tau.iter().map(|&t| gamma_ln_pdf(t, config.b1, config.b2)).sum::<f64>();
    lj -= 0.5 * THETA_JITTER * state.theta.iter().map(|c| c * c).sum::<f64>();
    lj -= 2.0 * (config.trunc[1] - config.trunc[0]).ln();
    for m in 0..state.pairs() {
        let tau = state.tau[state.alloc_d[m] - 1];
        let r = state.residual(m);
        lj += 2.0 * ln_l + (state.slice_n[m] - 1) as f64 * ln_1ml;
        lj += 0.5 * tau.ln() - 0.5 * LN_2PI - 0.5 * tau * r * r;
    }
    lj
}

fn draw_lambda(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    let la = sample_log_gamma(a, 1.0, rng);
    let lb = sample_log_gamma(b, 1.0, rng);
    (1.0 / (1.0 + (lb - la).exp())).clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS)
}

fn draw_tau(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    sample_log_gamma(shape, rate, rng).exp().clamp(f64::MIN_POSITIVE, f64::MAX)
}

/// Ordinary least squares on the fully observed terms; `None` when the design
/// is numerically rank deficient.
fn ols_theta(obs: &[f64], degree: usize) -> Option<Vec<f64>> {
    let p = basis_size(2, degree);
    let rows = obs.len().saturating_sub(2);
    if rows < p {
        return None;
    }
    let mut phi = DMatrix::<f64>::zeros(rows, p);
    let mut f = [0.0; 10];
    for j in 0..rows {
        fill_features(obs[j + 1], obs[j], degree, &mut f);
        for c in 0..p {
            phi[(j, c)] = f[c];
        }
    }
    let y = DVector::from_column_slice(&obs[2..]);
    let svd = phi.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() < 1e-12 * smax {
        return None;
    }
    let sol = svd.solve(&y, 0.0).ok()?;
    let theta: Vec<f64> = sol.iter().copied().collect();
    theta.iter().all(|c| c.is_finite()).then_some(theta)
}

/// Older lag `u` in the open interval `trunc` minimizing `|g(θ, u, recent) − next|`:
/// a grid scan followed by bisection on the bracketing cell when `g − next`
/// changes sign there.
fn solve_older(theta: &[f64], degree: usize, recent: f64, next: f64, trunc: [f64; 2]) -> f64 {
    const CELLS: usize = 600;
    let [lo, hi] = trunc;
    let h = (hi - lo) / CELLS as f64;
    let f = |u: f64| model_g(theta, degree, u, recent) - next;
    // interior grid, so the result stays strictly inside the interval
    let grid = |i: usize| lo + h * (i as f64 + 0.5);
    let mut best = (f64::INFINITY, grid(0));
    let mut prev = (grid(0), f(grid(0)));
    for i in 0..CELLS {
        let u = grid(i);
        let v = f(u);
        if v.abs() < best.0 {
            best = (v.abs(), u);
        }
        if i > 0 && v.signum() != prev.1.signum() {
            let (mut a, mut fa, mut b) = (prev.0, prev.1, u);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if fm.signum() == fa.signum() {
                    (a, fa) = (m, fm);
                } else {
                    b = m;
                }
            }
            let m = 0.5 * (a + b);
            if f(m).abs() < best.0 {
                best = (f(m).abs(), m);
            }
        }
        prev = (u, v);
    }
    best.1
}

/// Initial state: `λ` from its prior (kept within `[1e-3, 1 − 1e-3]`), one
/// precision drawn from its prior, all pairs at `(1, 1)` and `θ` from least
/// squares on the observed part. Latent values are the fitted model solved
/// backward from the first observations, newest first; when the fit is
/// degenerate they are uniform on `trunc` instead.
pub fn init_chain(config: &GsbrConfig, series: &TimeSeries, rng: &mut RngStream) -> Result<ChainState> {
    config.validate()?;
    let n = series.len();
    let p = config.basis_size();
    if n < p + 1 {
        return param_err(format!("series of length {n} is too short for a basis of size {p}"));
    }
    if series.values.iter().any(|x| !x.is_finite()) {
        return param_err("series contains non-finite values");
    }
    let lambda = draw_lambda(config.alpha, config.beta, rng).clamp(1e-3, 1.0 - 1e-3);
    let tau = vec![draw_tau(config.b1, config.b2, rng)];
    let [lo, hi] = config.trunc;
    let nl = config.latent_len();
    let (theta, latent_x) = match ols_theta(&series.values, config.degree) {
        Some(theta) => {
            // z = latent ++ obs; fill z[q] from z[q + 1], z[q + 2]
            let mut z = vec![0.0; nl];
            z.extend_from_slice(&series.values[..2]);
            for q in (0..nl).rev() {
                z[q] = solve_older(&theta, config.degree, z[q + 1], z[q + 2], config.trunc);
            }
            z.truncate(nl);
            (theta, z)
        }
        None => {
            log::warn!("degenerate design matrix at initialization, starting from theta = 0");
            (vec![0.0; p], (0..nl).map(|_| lo + (hi - lo) * rng.open01()).collect())
        }
    };
    let m = n + config.t;
    Ok(ChainState {
        lambda,
        tau,
        alloc_d: vec![1; m],
        slice_n: vec![1; m],
        theta,
        latent_x,
        obs_x: series.values.clone(),
    })
}

/// Beta parameters of the `λ` full conditional.
pub fn lambda_conditional(state: &ChainState, config: &GsbrConfig) -> (f64, f64) {
    let m = state.slice_n.len() as f64;
    let excess: usize = state.slice_n.iter().map(|n| n - 1).sum();
    (config.alpha + 2.0 * m, config.beta + excess as f64)
}

pub fn update_lambda(state: &mut ChainState, config: &GsbrConfig, rng: &mut RngStream) {
    let (a, b) = lambda_conditional(state, config);
    state.lambda = draw_lambda(a, b, rng);
}

/// Gamma `(shape, rate)` of the full conditional of each of the first
/// `components` precisions.
pub fn tau_conditional(state: &ChainState, config: &GsbrConfig, components: usize) -> Vec<(f64, f64)> {
    let mut counts = vec![0usize; components];
    let mut sums = vec![0.0; components];
    for m in 0..state.pairs() {
        let j = state.alloc_d[m] - 1;
        if j < components {
            let r = state.residual(m);
            counts[j] += 1;
            sums[j] += r * r;
        }
    }
    counts
        .iter()
        .zip(&sums)
        .map(|(&c, &s)| (config.b1 + 0.5 * c as f64, config.b2 + 0.5 * s))
        .collect()
}

/// Draw every realized precision from its full conditional. Entries beyond
/// `N*` are independent prior draws that nothing depends on, so they are
/// dropped first.
pub fn update_tau(state: &mut ChainState, config: &GsbrConfig, rng: &mut RngStream) {
    let k = state.n_star().max(1);
    state.tau.truncate(k);
    let params = tau_conditional(state, config, state.tau.len());
    for (t, (shape, rate)) in state.tau.iter_mut().zip(params) {
        *t = draw_tau(shape, rate, rng);
    }
}

/// Normalized probabilities of `d = 1..=n_slice` given residual `r`.
pub fn alloc_probabilities(tau: &[f64], n_slice: usize, r: f64) -> Vec<f64> {
    let lw: Vec<f64> = tau[..n_slice].iter().map(|&t| 0.5 * t.ln() - 0.5 * t * r * r).collect();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// For every term: `N | d` from the truncated geometric, then `d | N`
/// from its categorical conditional. New components get prior draws.
pub fn update_alloc_pairs(state: &mut ChainState, config: &GsbrConfig, rng: &mut RngStream) -> Result<()> {
    let mut lw = Vec::new();
    for m in 0..state.pairs() {
        let n = sample_truncated_geometric(state.lambda, state.alloc_d[m], rng)?;
        while state.tau.len() < n {
            state.tau.push(draw_tau(config.b1, config.b2, rng));
        }
        state.slice_n[m] = n;
        state.alloc_d[m] = if n == 1 {
            1
        } else {
            let r = state.residual(m);
            lw.clear();
            lw.extend(state.tau[..n].iter().map(|&t| 0.5 * t.ln() - 0.5 * t * r * r));
            sample_log_categorical(&lw, rng) + 1
        };
    }
    Ok(())
}

/// Precision `Φᵀ W Φ + jitter·I` and right-hand side `Φᵀ W z` of the `θ`
/// normal equations.
fn theta_normal_equations(state: &ChainState) -> (DMatrix<f64>, DVector<f64>) {
    let p = state.theta.len();
    let degree = state.degree();
    let mut prec = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut f = [0.0; 10];
    for m in 0..state.pairs() {
        let w = state.tau[state.alloc_d[m] - 1];
        fill_features(state.value(m + 1), state.value(m), degree, &mut f);
        let y = state.value(m + 2);
        for a in 0..p {
            let wa = w * f[a];
            rhs[a] += wa * y;
            for b in 0..=a {
                prec[(a, b)] += wa * f[b];
            }
        }
    }
    for a in 0..p {
        prec[(a, a)] += THETA_JITTER;
        for b in 0..a {
            prec[(b, a)] = prec[(a, b)];
        }
    }
    (prec, rhs)
}

/// Mean and precision of the Gaussian full conditional of `θ`.
pub fn theta_conditional(state: &ChainState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (prec, rhs) = theta_normal_equations(state);
    let (mean, _, _) = solve_scaled(&prec, &rhs)?;
    Ok((mean, prec))
}

/// Solve `P x = b` through a Cholesky factorization of the diagonally
/// equilibrated `D P D`. Returns the solution, `D` and the factor.
fn solve_scaled(prec: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let p = prec.nrows();
    let d = DVector::from_iterator(p, (0..p).map(|i| 1.0 / prec[(i, i)].sqrt()));
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularModel("coefficient precision has a non-positive diagonal".into()));
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| prec[(i, j)] * d[i] * d[j]);
    let chol = scaled
        .cholesky()
        .ok_or_else(|| Error::SingularModel("coefficient precision is not positive definite".into()))?;
    let scaled_rhs = rhs.component_mul(&d);
    let mean = chol.solve(&scaled_rhs).component_mul(&d);
    Ok((mean, d, chol.l()))
}

/// Draw `θ` from its Gaussian full conditional.
pub fn update_theta(state: &mut ChainState, rng: &mut RngStream) -> Result<()> {
    let (prec, rhs) = theta_normal_equations(state);
    let (mean, d, l) = solve_scaled(&prec, &rhs)?;
    // (D P D) = L Lᵀ  ⇒  θ = mean + D L⁻ᵀ ε has covariance P⁻¹
    let eps = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.std_normal()));
    let w = l
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::SingularModel("singular Cholesky factor".into()))?;
    let theta = mean + w.component_mul(&d);
    if theta.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularModel("non-finite coefficient draw".into()));
    }
    state.theta.copy_from_slice(theta.as_slice());
    Ok(())
}

/// Terms of the log target that involve latent coordinate `pos`; equal to
/// the log joint up to an additive constant in that coordinate.
pub fn latent_log_target(state: &ChainState, config: &GsbrConfig, pos: usize) -> f64 {
    if !config.in_trunc(state.latent_x[pos]) {
        return f64::NEG_INFINITY;
    }
    let m_end = (pos + 1).min(state.pairs());
    let mut s = 0.0;
    for m in pos.saturating_sub(2)..m_end {
        let r = state.residual(m);
        s -= 0.5 * state.tau[state.alloc_d[m] - 1] * r * r;
    }
    s
}

/// Per-coordinate random-walk proposal scales and acceptance bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentProposal {
    pub scales: Vec<f64>,
    /// Outcome of the most recent update of each coordinate.
    pub last_accepted: Vec<bool>,
}

impl LatentProposal {
    pub fn new(config: &GsbrConfig) -> Self {
        Self {
            scales: vec![config.proposal_scale0; config.latent_len()],
            last_accepted: vec![false; config.latent_len()],
        }
    }

    /// Robbins–Monro step on the log scales toward the target acceptance.
    pub fn adapt(&mut self, sweep: usize) {
        let gain = (1.0 + sweep as f64 / 100.0).powf(-0.6);
        for (s, &acc) in self.scales.iter_mut().zip(&self.last_accepted) {
            let a = if acc { 1.0 } else { 0.0 };
            *s = (s.ln() + gain * (a - TARGET_ACCEPTANCE)).exp().clamp(1e-300, 1e3);
        }
    }
}

/// Single-site random-walk Metropolis over the latent values, oldest first.
pub fn update_latent(state: &mut ChainState, config: &GsbrConfig, proposal: &mut LatentProposal, rng: &mut RngStream) {
    for pos in 0..state.latent_x.len() {
        let old = state.latent_x[pos];
        let cand = old + proposal.scales[pos] * rng.std_normal();
        let u = rng.open01();
        if !config.in_trunc(cand) {
            proposal.last_accepted[pos] = false;
            continue;
        }
        let before = latent_log_target(state, config, pos);
        state.latent_x[pos] = cand;
        let after = latent_log_target(state, config, pos);
        let accept = u.ln() < after - before;
        if !accept {
            state.latent_x[pos] = old;
        }
        proposal.last_accepted[pos] = accept;
    }
}

/// One full sweep: pairs, precisions, `λ`, `θ`, latent values.
pub fn gibbs_sweep(
    state: &mut ChainState,
    config: &GsbrConfig,
    proposal: &mut LatentProposal,
    rng: &mut RngStream,
) -> Result<()> {
    update_alloc_pairs(state, config, rng)?;
    update_tau(state, config, rng);
    update_lambda(state, config, rng);
    update_theta(state, rng)?;
    if config.sample_latent {
        update_latent(state, config, proposal, rng);
    }
    Ok(())
}

/// Running statistics accumulated by a [`Chain`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub accepted: Vec<u64>,
    pub proposed: u64,
    pub n_star_max: usize,
    pub n_star_sum: u64,
    pub lambda_sum: f64,
    pub lambda_sq_sum: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Summary reported at the end of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sweeps: usize,
    pub burn_in: usize,
    pub retained: usize,
    /// Post burn-in acceptance rate of each latent coordinate, oldest first.
    pub acceptance: Vec<f64>,
    pub proposal_scales: Vec<f64>,
    pub n_star_max: usize,
    pub n_star_mean: f64,
    pub n_star_final: usize,
    pub lambda_mean: f64,
    pub lambda_sd: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// Serialized chain: everything needed to continue bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: GsbrConfig,
    pub sweep: usize,
    pub state: ChainState,
    pub proposal: LatentProposal,
    pub rng: RngState,
    pub stats: ChainStats,
    pub samples: Vec<PosteriorSample>,
}

/// A running chain.
#[derive(Clone, Debug)]
pub struct Chain {
    config: GsbrConfig,
    sweep: usize,
    state: ChainState,
    proposal: LatentProposal,
    rng: RngStream,
    stats: ChainStats,
    samples: Vec<PosteriorSample>,
}

impl Chain {
    pub fn new(config: GsbrConfig, series: &TimeSeries, mut rng: RngStream) -> Result<Self> {
        let state = init_chain(&config, series, &mut rng)?;
        let proposal = LatentProposal::new(&config);
        let stats = ChainStats {
            accepted: vec![0; config.latent_len()],
            lambda_min: f64::INFINITY,
            lambda_max: f64::NEG_INFINITY,
            ..ChainStats::default()
        };
        Ok(Self {
            config,
            sweep: 0,
            state,
            proposal,
            rng,
            stats,
            samples: Vec::new(),
        })
    }

    pub fn config(&self) -> &GsbrConfig {
        &self.config
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn sweep(&self) -> usize {
        self.sweep
    }

    pub fn samples(&self) -> &[PosteriorSample] {
        &self.samples
    }

    pub fn is_done(&self) -> bool {
        self.sweep >= self.config.iters
    }

    /// Advance by one sweep, adapting during burn-in and retaining thinned
    /// draws after it.
    pub fn step(&mut self) -> Result<()> {
        gibbs_sweep(&mut self.state, &self.config, &mut self.proposal, &mut self.rng)?;
        self.sweep += 1;
        let s = self.sweep;
        if s <= self.config.burn_in {
            if self.config.adapt && self.config.sample_latent {
                self.proposal.adapt(s);
            }
            return Ok(());
        }
        let st = &mut self.stats;
        if self.config.sample_latent {
            st.proposed += 1;
            for (a, &ok) in st.accepted.iter_mut().zip(&self.proposal.last_accepted) {
                *a += ok as u64;
            }
        }
        let ns = self.state.n_star();
        st.n_star_max = st.n_star_max.max(ns);
        st.n_star_sum += ns as u64;
        if (s - self.config.burn_in) % self.config.thin == 0 {
            let lam = self.state.lambda;
            st.lambda_sum += lam;
            st.lambda_sq_sum += lam * lam;
            st.lambda_min = st.lambda_min.min(lam);
            st.lambda_max = st.lambda_max.max(lam);
            self.samples.push(self.state.sample(s));
        }
        Ok(())
    }

    /// Run the remaining sweeps.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let st = &self.stats;
        let post = self.sweep.saturating_sub(self.config.burn_in);
        let k = self.samples.len() as f64;
        let lambda_mean = if k > 0.0 { st.lambda_sum / k } else { f64::NAN };
        let lambda_var = if k > 1.0 {
            ((st.lambda_sq_sum - k * lambda_mean * lambda_mean) / (k - 1.0)).max(0.0)
        } else {
            0.0
        };
        Diagnostics {
            sweeps: self.sweep,
            burn_in: self.config.burn_in,
            retained: self.samples.len(),
            acceptance: st
                .accepted
                .iter()
                .map(|&a| if st.proposed > 0 { a as f64 / st.proposed as f64 } else { f64::NAN })
                .collect(),
            proposal_scales: self.proposal.scales.clone(),
            n_star_max: st.n_star_max,
            n_star_mean: if post > 0 { st.n_star_sum as f64 / post as f64 } else { f64::NAN },
            n_star_final: self.state.n_star(),
            lambda_mean,
            lambda_sd: lambda_var.sqrt(),
            lambda_min: st.lambda_min,
            lambda_max: st.lambda_max,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            sweep: self.sweep,
            state: self.state.clone(),
            proposal: self.proposal.clone(),
            rng: self.rng.state(),
            stats: self.stats.clone(),
            samples: self.samples.clone(),
        }
    }

    pub fn restore(cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        cp.state.check(&cp.config)?;
        Ok(Self {
            config: cp.config,
            sweep: cp.sweep,
            state: cp.state,
            proposal: cp.proposal,
            rng: RngStream::from_state(&cp.rng),
            stats: cp.stats,
            samples: cp.samples,
        })
    }

    pub fn into_output(self) -> ChainOutput {
        let diagnostics = self.diagnostics();
        ChainOutput {
            config: self.config,
            samples: self.samples,
            diagnostics,
            final_state: self.state,
        }
    }
}

/// Result of a complete run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub config: GsbrConfig,
    pub samples: Vec<PosteriorSample>,
    pub diagnostics: Diagnostics,
    pub final_state: ChainState,
}

/// Run a chain to completion.
pub fn run_chain(config: &GsbrConfig, series: &TimeSeries, rng: RngStream) -> Result<ChainOutput> {
    let mut chain = Chain::new(config.clone(), series, rng)?;
    chain.run()?;
    let out = chain.into_output();
    log::debug!(
        "chain done: {} samples, acceptance {:?}, N* max {}",
        out.samples.len(),
        out.diagnostics.acceptance,
        out.diagnostics.n_star_max
    );
    Ok(out)
}

/// A posterior predictive draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `e_{n+1}`.
    pub noise: f64,
    /// `x_{n+1}, …, x_{n+horizon}`.
    pub path: Vec<f64>,
}

fn predictive_noise(state: &ChainState, config: &GsbrConfig, rng: &mut RngStream) -> Result<f64> {
    let k = sample_truncated_geometric(state.lambda, 1, rng)?;
    let tau = if k <= state.tau.len() {
        state.tau[k - 1]
    } else {
        draw_tau(config.b1, config.b2, rng)
    };
    Ok(rng.std_normal() / tau.sqrt())
}

/// Draw the next noise term and, for `horizon > 0`, a forward path from the
/// last two observations.
pub fn posterior_predict(state: &ChainState, config: &GsbrConfig, rng: &mut RngStream, horizon: i64) -> Result<Prediction> {
    if horizon < 0 {
        return param_err(format!("horizon must be nonnegative, got {horizon}"));
    }
    let noise = predictive_noise(state, config, rng)?;
    let n = state.obs_x.len();
    let (mut older, mut recent) = (state.value(state.latent_x.len() + n - 2), state.obs_x[n - 1]);
    let mut path = Vec::with_capacity(horizon as usize);
    for j in 0..horizon {
        let e = if j == 0 { noise } else { predictive_noise(state, config, rng)? };
        let x = model_g(&state.theta, state.degree(), older, recent) + e;
        path.push(x);
        older = recent;
        recent = x;
    }
    Ok(Prediction { noise, path })
}
