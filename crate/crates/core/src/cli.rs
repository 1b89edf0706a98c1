//! Command-line front end: config resolution, subcommands and run manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dynamics::{find_saddle, forward_orbit, simulate, trace_stable_manifold, MapSpec, NoiseSpec, Rect, TimeSeries, TraceOptions};
use crate::error::{param_err, Error, Result};
use crate::gsbr::{run_chain, Diagnostics, GsbrConfig, PosteriorSample, Profile};
use crate::io;
use crate::manifold::{approximate_manifold_multi, approximate_manifold_sliding, cloud_metrics, hpdr_grid, sliding_windows, CloudMode, ManifoldCloud};
use crate::stochastics::RngStream;

/// Map selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub preset: String,
    /// Replaces the preset coefficients when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            preset: "henon".into(),
            coeffs: None,
            degree: None,
        }
    }
}

impl MapConfig {
    pub fn resolve(&self) -> Result<MapSpec> {
        match &self.coeffs {
            None => MapSpec::preset(&self.preset),
            Some(c) => {
                let degree = self.degree.unwrap_or(if c.len() == 10 { 3 } else { 2 });
                MapSpec::new(2, degree, c.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    /// Number of windows in the plan the reconstructed window is taken from.
    pub k: usize,
    /// 1-based window index.
    pub window: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self { k: 1, window: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldConfig {
    pub mode: CloudMode,
    /// Sliding mode: number of windows.
    pub k: usize,
    /// Multi mode: number of series.
    pub r: usize,
    /// Multi mode: map generating the starting points.
    pub start_preset: String,
    /// Multi mode: first point of the starting orbit.
    pub start: [f64; 2],
    /// Multi mode: orbit index of the first starting point.
    pub offset: usize,
    /// HPDR grid `[cols, rows]`.
    pub grid: [usize; 2],
    /// HPDR bounds `[xmin, xmax, ymin, ymax]`.
    pub bounds: [f64; 4],
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            mode: CloudMode::Sliding,
            k: 500,
            r: 250,
            start_preset: "henon-138".into(),
            start: [-0.61, 1.37],
            offset: 1,
            grid: [200, 200],
            bounds: [-3.0, 3.0, -3.0, 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    /// Interval searched for saddles.
    pub search: [f64; 2],
    /// Index into the saddles found, in increasing order of location.
    pub saddle: usize,
    pub eps: f64,
    pub n_back: usize,
    /// Clipping window `[xmin, xmax, ymin, ymax]`.
    pub window: [f64; 4],
    pub max_points: usize,
    pub resolution: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        let t = TraceOptions::default();
        Self {
            search: [0.0, 3.0],
            saddle: 0,
            eps: t.eps,
            n_back: t.n_back,
            window: [t.window.xmin, t.window.xmax, t.window.ymin, t.window.ymax],
            max_points: t.max_points,
            resolution: t.resolution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloud: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub tol: f64,
    pub max_gap: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            cloud: None,
            truth: None,
            tol: 0.05,
            max_gap: 0.05,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
    /// Series CSV; when absent the series is simulated from `map`, `noise`, `x0` and `n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub map: MapConfig,
    /// `(weight, variance)` pairs; empty for the zero-noise limit.
    pub noise: Vec<[f64; 2]>,
    pub x0: [f64; 2],
    pub n: usize,
    pub sampler: GsbrConfig,
    pub reconstruct: ReconstructConfig,
    pub manifold: ManifoldConfig,
    pub truth: TruthConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            jobs: None,
            profile: None,
            input: None,
            map: MapConfig::default(),
            noise: Vec::new(),
            x0: [-1.0, 0.5],
            n: 2000,
            sampler: GsbrConfig::default(),
            reconstruct: ReconstructConfig::default(),
            manifold: ManifoldConfig::default(),
            truth: TruthConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::mixture(&self.noise.iter().map(|c| (c[0], c[1])).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.map.resolve()?;
        self.noise_spec()?;
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        let m = &self.manifold;
        if m.k < 1 || m.r < 1 || m.grid[0] < 1 || m.grid[1] < 1 {
            return Err(Error::Config("manifold.k, manifold.r and manifold.grid must be positive".into()));
        }
        rect(m.bounds, "manifold.bounds")?;
        rect(self.truth.window, "truth.window")?;
        if self.reconstruct.window < 1 || self.reconstruct.window > self.reconstruct.k {
            return Err(Error::Config("reconstruct.window must lie in 1..=reconstruct.k".into()));
        }
        if !(self.evaluate.tol > 0.0 && self.evaluate.max_gap > 0.0) {
            return Err(Error::Config("evaluate.tol and evaluate.max_gap must be positive".into()));
        }
        if !(self.truth.eps > 0.0 && self.truth.resolution > 0.0) {
            return Err(Error::Config("truth.eps and truth.resolution must be positive".into()));
        }
        Ok(())
    }

    fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("seed is required (set `seed` in the config or pass --seed)".into()))
    }
}

fn rect(v: [f64; 4], key: &str) -> Result<Rect> {
    Rect::new(v[0], v[1], v[2], v[3]).map_err(|_| Error::Config(format!("{key} is not a valid rectangle")))
}

#[derive(Parser, Debug)]
#[command(name = "gsbr", version, about = "Stable manifold reconstruction from noisy time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Simulate a noisy orbit.
    Simulate(Overrides),
    /// Trace the stable manifold of a saddle of an invertible map.
    GroundTruth(Overrides),
    /// Run one chain on one window and write its posterior samples.
    Reconstruct(Overrides),
    /// Build a manifold cloud from many chains and its HPDR grid.
    Manifold(Overrides),
    /// Score a cloud against a ground-truth polyline.
    Evaluate(Overrides),
    /// Re-run a command from a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory, defaults to the one recorded in the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::GroundTruth(_) => "ground-truth",
            Command::Reconstruct(_) => "reconstruct",
            Command::Manifold(_) => "manifold",
            Command::Evaluate(_) => "evaluate",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Comma-separated list of numbers on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Floats(pub Vec<f64>);

fn parse_floats(s: &str) -> std::result::Result<Floats, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<std::result::Result<_, _>>()
        .map(Floats)
}

/// Command-line overrides; every flag maps to one config key.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<i64>,
    /// Iteration budget: paper or desk.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated map coefficients.
    #[arg(long, value_parser = parse_floats, allow_hyphen_values = true)]
    pub coeffs: Option<Floats>,
    /// `none` or comma-separated `weight:variance` pairs.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long, value_parser = parse_floats, allow_hyphen_values = true)]
    pub x0: Option<Floats>,
    #[arg(long)]
    pub n: Option<i64>,
    #[arg(long = "T")]
    pub t: Option<i64>,
    #[arg(long)]
    pub degree: Option<i64>,
    #[arg(long, value_parser = parse_floats, allow_hyphen_values = true)]
    pub trunc: Option<Floats>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub b1: Option<f64>,
    #[arg(long)]
    pub b2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub iters: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub burn_in: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub thin: Option<i64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k: Option<i64>,
    #[arg(long)]
    pub r: Option<i64>,
    #[arg(long)]
    pub window: Option<i64>,
    #[arg(long)]
    pub n_back: Option<i64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
}

fn noise_value(s: &str) -> Result<toml::Value> {
    if s == "none" {
        return Ok(toml::Value::Array(Vec::new()));
    }
    let mut comps = Vec::new();
    for part in s.split(',') {
        let (w, v) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("noise component '{part}' is not weight:variance")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("noise: '{x}' is not a number")))
        };
        comps.push(toml::Value::Array(vec![parse(w)?.into(), parse(v)?.into()]));
    }
    Ok(toml::Value::Array(comps))
}

fn floats(v: &[f64]) -> toml::Value {
    toml::Value::Array(v.iter().map(|&x| x.into()).collect())
}

impl Overrides {
    /// Overrides as `(dotted key, value)` pairs.
    fn entries(&self) -> Result<Vec<(&'static str, toml::Value)>> {
        let mut e: Vec<(&'static str, toml::Value)> = Vec::new();
        let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        macro_rules! put {
            ($key:expr, $field:expr, $conv:expr) => {
                if let Some(v) = &$field {
                    e.push(($key, $conv(v)));
                }
            };
        }
        put!("seed", self.seed, |v: &u64| toml::Value::Integer(*v as i64));
        put!("out", self.out, path);
        put!("jobs", self.jobs, |v: &i64| toml::Value::Integer(*v));
        put!("input", self.input, path);
        put!("map.preset", self.preset, |v: &String| toml::Value::String(v.clone()));
        put!("map.coeffs", self.coeffs, |v: &Floats| floats(&v.0));
        put!("x0", self.x0, |v: &Floats| floats(&v.0));
        put!("n", self.n, |v: &i64| toml::Value::Integer(*v));
        put!("sampler.T", self.t, |v: &i64| toml::Value::Integer(*v));
        put!("sampler.degree", self.degree, |v: &i64| toml::Value::Integer(*v));
        put!("sampler.trunc", self.trunc, |v: &Floats| floats(&v.0));
        put!("sampler.alpha", self.alpha, |v: &f64| toml::Value::Float(*v));
        put!("sampler.beta", self.beta, |v: &f64| toml::Value::Float(*v));
        put!("sampler.b1", self.b1, |v: &f64| toml::Value::Float(*v));
        put!("sampler.b2", self.b2, |v: &f64| toml::Value::Float(*v));
        put!("sampler.iters", self.iters, |v: &i64| toml::Value::Integer(*v));
        put!("sampler.burn_in", self.burn_in, |v: &i64| toml::Value::Integer(*v));
        put!("sampler.thin", self.thin, |v: &i64| toml::Value::Integer(*v));
        put!("manifold.mode", self.mode, |v: &String| toml::Value::String(v.clone()));
        put!("manifold.k", self.k, |v: &i64| toml::Value::Integer(*v));
        put!("manifold.r", self.r, |v: &i64| toml::Value::Integer(*v));
        put!("reconstruct.window", self.window, |v: &i64| toml::Value::Integer(*v));
        put!("truth.n_back", self.n_back, |v: &i64| toml::Value::Integer(*v));
        put!("truth.eps", self.eps, |v: &f64| toml::Value::Float(*v));
        put!("evaluate.cloud", self.cloud, path);
        put!("evaluate.truth", self.truth, path);
        put!("evaluate.tol", self.tol, |v: &f64| toml::Value::Float(*v));
        if let Some(n) = &self.noise {
            e.push(("noise", noise_value(n)?));
        }
        if let Some(p) = &self.profile {
            e.push(("profile", toml::Value::String(p.clone())));
        }
        if let (Some(k), true) = (self.k, self.window.is_some()) {
            e.push(("reconstruct.k", toml::Value::Integer(k)));
        }
        Ok(e)
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let sub = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !sub.is_table() {
                *sub = toml::Value::Table(toml::Table::new());
            }
            set_dotted(sub.as_table_mut().expect("just made a table"), rest, value);
        }
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolve a config from an optional TOML text plus overrides.
///
/// Precedence, lowest first: built-in defaults, the iteration budget of the
/// selected profile, keys set in the file, command-line flags.
pub fn resolve_config(file_text: Option<&str>, overrides: &Overrides) -> Result<RunConfig> {
    let file: toml::Table = match file_text {
        Some(text) => text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    let mut cli = toml::Table::new();
    for (k, v) in overrides.entries()? {
        set_dotted(&mut cli, k, v);
    }
    let profile = cli
        .get("profile")
        .or_else(|| file.get("profile"))
        .map(|v| {
            v.as_str()
                .ok_or_else(|| Error::Config("profile must be a string".into()))
                .and_then(str::parse::<Profile>)
        })
        .transpose()?;
    let mut base = RunConfig::default();
    if let Some(p) = profile {
        base.sampler = base.sampler.with_profile(p);
    }
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, file);
    merge(&mut table, cli);
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
    config.validate().map_err(|e| match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    })?;
    Ok(config)
}

/// Read the config file named by `--config` (if any) and apply overrides.
pub fn parse_config(overrides: &Overrides) -> Result<RunConfig> {
    let text = match &overrides.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve_config(text.as_deref(), overrides).map_err(|e| match (&overrides.config, e) {
        (Some(p), Error::Config(m)) => Error::Config(format!("{}: {m}", p.display())),
        (_, e) => e,
    })
}

/// Record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_s: f64,
    /// Output file names, relative to `config.out`.
    pub outputs: Vec<String>,
}

/// Posterior samples of one window, as written by `reconstruct`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOutput {
    pub config: GsbrConfig,
    pub window: usize,
    pub k: usize,
    pub samples: Vec<PosteriorSample>,
    pub diagnostics: Diagnostics,
}

/// Load `input` or simulate the configured series.
fn load_series(config: &RunConfig) -> Result<TimeSeries> {
    match &config.input {
        Some(p) => io::read_series(p),
        None => {
            let map = config.map.resolve()?;
            let x0 = config.x0;
            simulate(&map, &config.noise_spec()?, &x0, config.n, config.require_seed()?)
        }
    }
}

/// Simulation seed for series `j` in multi mode: the first draw of stream
/// `(seed, 2^32 + j)` whose noisy orbit stays bounded.
fn bounded_series(map: &MapSpec, noise: &NoiseSpec, x0: [f64; 2], n: usize, seed: u64, j: usize) -> Result<TimeSeries> {
    let mut rng = RngStream::new(seed, (1u64 << 32) + j as u64);
    let mut last = None;
    for _ in 0..100 {
        match simulate(map, noise, &x0, n, rng.next_u64()) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Escape { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Series for multi mode: orbit points `(y_j, y_{j+1})` of the start map,
/// `j = offset..offset + r`, each continued by the configured map and noise.
pub fn multi_series(config: &RunConfig, seed: u64) -> Result<Vec<TimeSeries>> {
    let m = &config.manifold;
    let start_map = MapSpec::preset(&m.start_preset)?;
    let orbit = forward_orbit(&start_map, m.start, m.offset + m.r);
    let map = config.map.resolve()?;
    let noise = config.noise_spec()?;
    (0..m.r)
        .map(|j| {
            let x0 = if m.offset + j == 0 { m.start } else { orbit[m.offset + j - 1] };
            bounded_series(&map, &noise, x0, config.n, seed, j + 1)
        })
        .collect()
}

/// Run one subcommand with a resolved config. Returns the output files written.
pub fn execute(command: &str, config: &RunConfig) -> Result<Vec<String>> {
    config.validate()?;
    let out = &config.out;
    let at = |name: &str| out.join(name);
    let mut files = Vec::new();
    match command {
        "simulate" => {
            let series = {
                let map = config.map.resolve()?;
                simulate(&map, &config.noise_spec()?, &config.x0, config.n, config.require_seed()?)?
            };
            io::write_series(&at("series.csv"), &series)?;
            files.extend(["series.csv".to_string(), "series.json".to_string()]);
        }
        "ground-truth" => {
            let map = config.map.resolve()?;
            let t = &config.truth;
            let saddles = find_saddle(&map, t.search[0], t.search[1])?;
            let saddle = saddles
                .get(t.saddle)
                .ok_or_else(|| Error::Parameter(format!("no saddle #{} in {:?} ({} found)", t.saddle, t.search, saddles.len())))?;
            let opts = TraceOptions {
                eps: t.eps,
                n_back: t.n_back,
                window: rect(t.window, "truth.window")?,
                max_points: t.max_points,
                resolution: t.resolution,
                ..TraceOptions::default()
            };
            let line = trace_stable_manifold(&map, saddle, &opts)?;
            if line.is_empty() {
                return param_err("traced manifold has no points inside the window");
            }
            io::write_polyline(&at("truth.csv"), &line)?;
            io::write_json(&at("saddle.json"), &serde_json::json!({ "saddle": saddle, "truncated": line.truncated }))?;
            files.extend(["truth.csv".to_string(), "saddle.json".to_string()]);
        }
        "reconstruct" => {
            let seed = config.require_seed()?;
            let series = load_series(config)?;
            let r = &config.reconstruct;
            let plan = sliding_windows(&series, r.k, &config.sampler)?;
            let window = plan.window(&series, r.window);
            let out = run_chain(&config.sampler, &window, RngStream::new(seed, r.window as u64))?;
            io::write_json(
                &at("samples.json"),
                &ReconstructOutput {
                    config: out.config,
                    window: r.window,
                    k: r.k,
                    samples: out.samples,
                    diagnostics: out.diagnostics,
                },
            )?;
            files.push("samples.json".to_string());
        }
        "manifold" => {
            let seed = config.require_seed()?;
            let m = &config.manifold;
            let cloud: ManifoldCloud = match m.mode {
                CloudMode::Sliding => {
                    let series = load_series(config)?;
                    approximate_manifold_sliding(&series, m.k, &config.sampler, seed, config.jobs)?
                }
                CloudMode::Multi => {
                    let list = multi_series(config, seed)?;
                    approximate_manifold_multi(&list, &config.sampler, seed, config.jobs)?
                }
            };
            io::write_cloud(&at("cloud.csv"), &cloud.points)?;
            let grid = hpdr_grid(&cloud.xy(), rect(m.bounds, "manifold.bounds")?, m.grid[0], m.grid[1])?;
            io::write_grid(&at("hpdr.csv"), &at("hpdr.json"), &grid)?;
            io::write_json(
                &at("sources.json"),
                &serde_json::json!({ "mode": cloud.mode, "sources": cloud.sources, "failures": cloud.failures }),
            )?;
            files.extend(["cloud.csv", "hpdr.csv", "hpdr.json", "sources.json"].map(String::from));
        }
        "evaluate" => {
            let e = &config.evaluate;
            let (Some(cloud), Some(truth)) = (&e.cloud, &e.truth) else {
                return Err(Error::Config("evaluate needs both a cloud and a truth file".into()));
            };
            let points: Vec<_> = io::read_cloud(cloud)?.iter().map(|p| [p.x, p.y]).collect();
            let line = io::read_polyline(truth)?;
            let metrics = cloud_metrics(&points, &line, e.tol, e.max_gap)?;
            io::write_json(&at("metrics.json"), &metrics)?;
            files.push("metrics.json".to_string());
        }
        other => return Err(Error::Config(format!("unknown command '{other}'"))),
    }
    Ok(files)
}

/// Execute and write `manifest.json`.
pub fn execute_with_manifest(command: &str, config: &RunConfig) -> Result<Manifest> {
    let start = Instant::now();
    let outputs = execute(command, config)?;
    let manifest = Manifest {
        command: command.to_string(),
        config: config.clone(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    io::write_json(&config.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Re-run the command recorded in a manifest, optionally into another directory.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>, jobs: Option<usize>) -> Result<Manifest> {
    let manifest: Manifest = io::read_json(manifest_path)?;
    let mut config = manifest.config;
    if let Some(o) = out {
        config.out = o;
    }
    if jobs.is_some() {
        config.jobs = jobs;
    }
    execute_with_manifest(&manifest.command, &config)
}

/// Exit status for an error: 2 for invalid input, 3 for failed computations.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

/// Machine-readable error record.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = Error::Config(e.to_string().trim().to_string());
            eprintln!("{}", error_json(&err));
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Replay { manifest, out, jobs } => replay(manifest, out.clone(), *jobs),
        cmd @ (Command::Simulate(o)
        | Command::GroundTruth(o)
        | Command::Reconstruct(o)
        | Command::Manifold(o)
        | Command::Evaluate(o)) => parse_config(o).and_then(|c| execute_with_manifest(cmd.name(), &c)),
    };
    match result {
        Ok(m) => {
            println!("{}", serde_json::json!({ "command": m.command, "out": m.config.out, "outputs": m.outputs }));
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
