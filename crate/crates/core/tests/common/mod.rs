#![allow(dead_code)]

use gsbr_core::dynamics::{simulate, MapSpec, NoiseSpec, TimeSeries};
use gsbr_core::gsbr::{ChainState, GsbrConfig};
use gsbr_core::stochastics::RngStream;
use gsbr_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Random but valid chain state for a toy problem with `n` observations.
pub fn toy_state(config: &GsbrConfig, n: usize, rng: &mut RngStream) -> ChainState {
    let m = n + config.t;
    let slice_n: Vec<usize> = (0..m).map(|_| 1 + (rng.open01() * 4.0) as usize).collect();
    let alloc_d = slice_n.iter().map(|&k| 1 + (rng.open01() * k as f64) as usize).collect();
    let k = *slice_n.iter().max().unwrap();
    let tau = (0..k).map(|_| 0.5 + 3.0 * rng.open01()).collect();
    let henon = [1.0, 0.0, 0.3, 0.0, -1.4, 0.0];
    let theta = henon.iter().map(|c| c + 0.1 * rng.std_normal()).collect();
    let [lo, hi] = config.trunc;
    let latent_x = (0..config.latent_len()).map(|_| lo + (hi - lo) * rng.open01()).collect();
    let obs_x = (0..n).map(|_| 0.8 * rng.std_normal()).collect();
    ChainState {
        lambda: 0.05 + 0.9 * rng.open01(),
        tau,
        alloc_d,
        slice_n,
        theta,
        latent_x,
        obs_x,
    }
}

/// First series from seeds `first_seed, first_seed + 1, …` whose orbit does
/// not escape, with the seed used.
pub fn bounded_series(map: &MapSpec, noise: &NoiseSpec, x0: [f64; 2], n: usize, first_seed: u64) -> (TimeSeries, u64) {
    for seed in first_seed..first_seed + 1000 {
        match simulate(map, noise, &x0, n, seed) {
            Ok(s) => return (s, seed),
            Err(Error::Escape { .. }) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    panic!("no bounded orbit in 1000 seeds");
}

/// Pearson chi-square test; cells with expected count below 5 are pooled
/// into one. Returns `(statistic, degrees of freedom, p-value)`.
pub fn chi_square(observed: &[u64], expected: &[f64]) -> (f64, usize, f64) {
    let (mut obs, mut exp) = (Vec::new(), Vec::new());
    let (mut rest_o, mut rest_e) = (0u64, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= 5.0 {
            obs.push(o);
            exp.push(e);
        } else {
            rest_o += o;
            rest_e += e;
        }
    }
    if rest_e > 0.0 {
        obs.push(rest_o);
        exp.push(rest_e);
    }
    let stat: f64 = obs
        .iter()
        .zip(&exp)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let df = obs.len() - 1;
    let p = 1.0 - ChiSquared::new(df as f64).unwrap().cdf(stat);
    (stat, df, p)
}
