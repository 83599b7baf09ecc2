//! Experiment orchestration: configuration ingestion, seeded parallel trial
//! execution, and CSV/manifest emission.
//!
//! Configuration is a flat `key = value` text format (dotted keys, `#`
//! comments); presets provide named key sets and command-line flags override
//! file keys. Every run writes a JSON manifest holding the fully resolved
//! configuration and a content hash of each output file, and a manifest can
//! itself be passed back as the config to reproduce a run byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{breakdown_scan, stability, theory_stability, BreakdownScan, ScanOutcome, StabilityReport};
use crate::cascade::{CascadeConfig, CascadeRunner, ClockRunResult};
use crate::ensemble::{EnsembleSpec, MeasurementProtocol, PriorRule};
use crate::error::{ClockError, Result};
use crate::noise::{FminPolicy, NoiseKind, NoiseModel};
use crate::rng::trial_rng;
use crate::spectrum::spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Run,
    SweepN,
    ScanBeta,
    Spectrum,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::SweepN => "sweep-n",
            Mode::ScanBeta => "scan-beta",
            Mode::Spectrum => "spectrum",
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub seed: u64,
    pub trials: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub noise: NoiseModel,
    pub ensembles: usize,
    pub multiplier: u32,
    pub t1: f64,
    pub steps: u64,
    pub atoms: u64,
    pub protocol: MeasurementProtocol,
    pub rounds: u32,
    pub posterior_points: usize,
    pub prior_gamma_eff: Option<f64>,
    pub gains: Vec<f64>,
    pub omega: f64,
    pub segments: usize,
    pub sweep_multipliers: Vec<u32>,
    pub sweep_m: Vec<usize>,
    pub sweep_beta1: f64,
    pub sweep_steps: u64,
    pub scan_grid: Vec<f64>,
    pub scan_protocols: Vec<MeasurementProtocol>,
    pub scan_runs: u64,
    pub scan_atoms: u64,
    pub scan_steps: u64,
    pub scan_gaussian_fast: bool,
    pub spectrum_m: Vec<usize>,
    pub debug_traces: bool,
    pub debug_records: bool,
    /// The flat key map this spec resolved from, embedded in the manifest.
    pub resolved: BTreeMap<String, String>,
}

/// Names of the built-in presets.
pub fn available_presets() -> &'static [&'static str] {
    &["fig1b", "fig2", "fig3", "figs1-white", "figs1-pink"]
}

fn preset_keys(name: &str) -> Result<Vec<(&'static str, String)>> {
    let s = |v: &str| v.to_string();
    Ok(match name {
        // Spectrum whitening: 1/f input, N = 20, T1 = 0.1/gamma, cascade of
        // up to 3 ensembles at n = 2. Long traces so the lowest decade sits
        // well under every loop bandwidth.
        "fig1b" => vec![
            ("noise.kind", s("one-over-f")),
            ("noise.gamma", s("1.0")),
            ("ensemble.atoms", s("20")),
            ("ensemble.protocol", s("conventional")),
            ("cascade.t1", s("0.1")),
            ("cascade.n", s("2")),
            ("cascade.m", s("3")),
            ("cascade.steps", s("65536")),
            ("cascade.alpha", s("0.5,0.5,0.5")),
            ("trials", s("8")),
            ("spectrum.m", s("0,1,2,3")),
        ],
        // Conventional-protocol stability sweep: points n = 2..10 with
        // N = ceil(n / beta1), beta1 = 0.1, 1 to 4 ensembles.
        "fig2" => vec![
            ("noise.kind", s("white")),
            ("noise.gamma", s("1.0")),
            ("ensemble.protocol", s("conventional")),
            ("sweep.beta1", s("0.1")),
            ("sweep.multipliers", s("2,3,4,5,6,7,8,9,10")),
            ("sweep.m", s("1,2,3,4")),
            ("sweep.steps", s("8192")),
            ("trials", s("200")),
        ],
        // Adaptive-protocol sweep, beta1 = 0.3 (white).
        "fig3" => vec![
            ("noise.kind", s("white")),
            ("noise.gamma", s("1.0")),
            ("ensemble.protocol", s("adaptive")),
            ("sweep.beta1", s("0.3")),
            ("sweep.multipliers", s("2,3,4,5,6,7,8,9,10")),
            ("sweep.m", s("1,2,3,4")),
            ("sweep.steps", s("4096")),
            ("trials", s("100")),
        ],
        // Ramsey-time break-down scans. The scan runs at the visibility
        // scale N = 1e5 (conventional legs use the Gaussian fast path, the
        // adaptive protocol groups batch outcomes into binomial counts) so
        // the break-down is not blurred by the atomic noise floor.
        "figs1-white" => vec![
            ("noise.kind", s("white")),
            ("noise.gamma", s("1.0")),
            ("cascade.alpha", s("0.01")),
            ("scan.atoms", s("100000")),
            ("scan.steps", s("10000")),
            ("scan.runs", s("24")),
            ("scan.grid", s("0.05,0.08,0.12,0.16,0.2,0.25,0.3,0.35,0.4,0.45,0.5,0.6")),
            ("scan.protocols", s("conventional,adaptive")),
            ("ensemble.posterior-grid", s("512")),
        ],
        "figs1-pink" => vec![
            ("noise.kind", s("one-over-f")),
            ("noise.gamma", s("1.0")),
            ("cascade.alpha", s("0.5")),
            ("scan.atoms", s("100000")),
            ("scan.steps", s("10000")),
            ("scan.runs", s("100")),
            ("scan.grid", s("0.05,0.08,0.12,0.16,0.2,0.25,0.3,0.35,0.4,0.5")),
            ("scan.protocols", s("conventional,adaptive")),
            ("ensemble.posterior-grid", s("512")),
        ],
        other => {
            return Err(ClockError::config(format!(
                "unknown preset '{other}'; available: {}",
                available_presets().join(", ")
            )))
        }
    })
}

/// Parse a flat `key = value` config text into a key map. `#` starts a
/// comment; keys may repeat (last wins).
fn parse_flat_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ClockError::config(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Extract the embedded config map from a manifest JSON file.
fn parse_manifest_config(text: &str) -> Result<BTreeMap<String, String>> {
    let v: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| ClockError::config(format!("manifest parse error: {e}")))?;
    let Some(cfg) = v.get("config").and_then(|c| c.as_object()) else {
        return Err(ClockError::config("manifest has no 'config' object"));
    };
    let mut map = BTreeMap::new();
    for (k, val) in cfg {
        let Some(s) = val.as_str() else {
            return Err(ClockError::config(format!("manifest config key '{k}' is not a string")));
        };
        map.insert(k.clone(), s.to_string());
    }
    Ok(map)
}

/// Key map that tracks consumption so leftovers can be reported as unknown
/// keys with their full paths.
struct Keys {
    map: BTreeMap<String, String>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                ClockError::config(format!("key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    fn parse_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| ClockError::config(format!("key '{key}': cannot parse '{s}'")))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<String> = self.map.keys().cloned().collect();
            Err(ClockError::config(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}

fn parse_protocol(v: &str) -> Result<MeasurementProtocol> {
    match v {
        "conventional" => Ok(MeasurementProtocol::Conventional),
        "conventional-gaussian" => Ok(MeasurementProtocol::ConventionalGaussian),
        "adaptive" => Ok(MeasurementProtocol::Adaptive),
        "ideal" => Ok(MeasurementProtocol::Ideal),
        other => Err(ClockError::config(format!(
            "key 'ensemble.protocol': unknown protocol '{other}'"
        ))),
    }
}

/// Default phase-jump budget beta for a protocol under a noise kind.
pub fn default_beta(protocol: MeasurementProtocol, kind: NoiseKind) -> f64 {
    match (protocol, kind) {
        (MeasurementProtocol::Adaptive, NoiseKind::White) => 0.3,
        (MeasurementProtocol::Adaptive, NoiseKind::OneOverF) => 0.2,
        _ => 0.1,
    }
}

/// Default per-ensemble gains: weak servo for white noise; for 1/f a strong
/// first loop (0.5) with weak loops above, since the first lock whitens the
/// noise seen downstream.
pub fn default_gains(kind: NoiseKind, m: usize) -> Vec<f64> {
    match kind {
        NoiseKind::White => vec![0.01; m],
        NoiseKind::OneOverF => {
            let mut g = vec![0.01; m];
            if let Some(first) = g.first_mut() {
                *first = 0.5;
            }
            g
        }
    }
}

/// Parse a configuration from raw text (flat key=value lines, or a manifest
/// JSON) plus overrides. This is the path language bindings use.
pub fn parse_config_text(
    mode: Mode,
    text: &str,
    overrides: &[(String, String)],
) -> Result<ExperimentSpec> {
    let mut merged = if text.trim_start().starts_with('{') {
        parse_manifest_config(text)?
    } else {
        parse_flat_text(text)?
    };
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    build_spec(mode, merged)
}

/// Build the experiment spec for `mode` from preset, config file, and
/// command-line overrides (later sources win key by key).
pub fn parse_config(
    mode: Mode,
    preset: Option<&str>,
    config_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentSpec> {
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    if let Some(name) = preset {
        for (k, v) in preset_keys(name)? {
            merged.insert(k.to_string(), v);
        }
    }
    if let Some(path) = config_path {
        let text = fs::read_to_string(path).map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file_map = if text.trim_start().starts_with('{') {
            parse_manifest_config(&text)?
        } else {
            parse_flat_text(&text)?
        };
        merged.extend(file_map);
    }
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    build_spec(mode, merged)
}

fn build_spec(mode: Mode, merged: BTreeMap<String, String>) -> Result<ExperimentSpec> {
    let mut keys = Keys { map: merged };

    let seed = keys.parse("seed", 1u64)?;
    let trials = keys.parse("trials", 100u64)?;
    let workers = keys.parse("workers", 0usize)?;
    let out_dir = PathBuf::from(keys.take("out").unwrap_or_else(|| "out".into()));

    let kind = match keys.take("noise.kind").as_deref() {
        None | Some("white") => NoiseKind::White,
        Some("one-over-f") => NoiseKind::OneOverF,
        Some(other) => {
            return Err(ClockError::config(format!("key 'noise.kind': unknown kind '{other}'")))
        }
    };
    let gamma = keys.parse("noise.gamma", 1.0f64)?;
    let f_min = match keys.take("noise.f-min").as_deref() {
        None | Some("auto") => FminPolicy::InverseTotalTime,
        Some(v) => FminPolicy::Fixed(v.parse().map_err(|_| {
            ClockError::config(format!("key 'noise.f-min': cannot parse '{v}'"))
        })?),
    };
    let noise = NoiseModel { kind, gamma, f_min_policy: f_min };

    let protocol = match keys.take("ensemble.protocol") {
        None => MeasurementProtocol::Conventional,
        Some(v) => parse_protocol(&v)?,
    };
    let atoms = keys.parse("ensemble.atoms", 20u64)?;
    let rounds = keys.parse("ensemble.rounds", 4u32)?;
    let posterior_points = keys.parse("ensemble.posterior-grid", 4096usize)?;
    let prior_gamma_eff = match keys.take("ensemble.prior-gamma-eff").as_deref() {
        None | Some("auto") => None,
        Some(v) => Some(v.parse().map_err(|_| {
            ClockError::config(format!("key 'ensemble.prior-gamma-eff': cannot parse '{v}'"))
        })?),
    };

    let ensembles = keys.parse("cascade.m", 1usize)?;
    let multiplier = keys.parse("cascade.n", 2u32)?;
    let t1 = match keys.take("cascade.t1").as_deref() {
        None | Some("auto") => {
            if gamma > 0.0 {
                default_beta(protocol, kind) / gamma
            } else {
                1.0
            }
        }
        Some(v) => v
            .parse()
            .map_err(|_| ClockError::config(format!("key 'cascade.t1': cannot parse '{v}'")))?,
    };
    let steps = keys.parse("cascade.steps", 16_384u64)?;
    let gains = match keys.take("cascade.alpha").as_deref() {
        None | Some("auto") => default_gains(kind, ensembles),
        Some(v) => {
            let parts: Vec<f64> = v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        ClockError::config(format!("key 'cascade.alpha': cannot parse '{s}'"))
                    })
                })
                .collect::<Result<_>>()?;
            if parts.len() == 1 {
                vec![parts[0]; ensembles]
            } else if parts.len() == ensembles {
                parts
            } else {
                return Err(ClockError::config(format!(
                    "key 'cascade.alpha': got {} gains for {ensembles} ensembles",
                    parts.len()
                )));
            }
        }
    };

    let omega = keys.parse("analysis.omega", 1.0f64)?;
    let segments = keys.parse("analysis.segments", 8usize)?;

    let sweep_multipliers = keys.parse_list("sweep.multipliers", vec![2u32, 3, 4, 5, 6, 7, 8, 9, 10])?;
    let sweep_m = keys.parse_list("sweep.m", vec![1usize, 2, 3])?;
    let sweep_beta1 = keys.parse("sweep.beta1", default_beta(protocol, kind))?;
    let sweep_steps = keys.parse("sweep.steps", 8192u64)?;

    let scan_grid = keys.parse_list(
        "scan.grid",
        vec![0.05, 0.08, 0.12, 0.16, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.6],
    )?;
    let scan_protocols = match keys.take("scan.protocols") {
        None => vec![MeasurementProtocol::Conventional, MeasurementProtocol::Adaptive],
        Some(v) => v.split(',').map(|s| parse_protocol(s.trim())).collect::<Result<_>>()?,
    };
    let scan_runs = keys.parse("scan.runs", 24u64)?;
    let scan_atoms = keys.parse("scan.atoms", 100_000u64)?;
    let scan_steps = keys.parse("scan.steps", 10_000u64)?;
    let scan_gaussian_fast = keys.parse("scan.gaussian-fast", true)?;

    let spectrum_m = keys.parse_list("spectrum.m", vec![0usize, 1, 2, 3])?;
    let debug_traces = keys.parse("debug.traces", false)?;
    let debug_records = keys.parse("debug.records", false)?;

    keys.finish()?;

    let spec = ExperimentSpec {
        mode,
        seed,
        trials,
        workers,
        out_dir,
        noise,
        ensembles,
        multiplier,
        t1,
        steps,
        atoms,
        protocol,
        rounds,
        posterior_points,
        prior_gamma_eff,
        gains,
        omega,
        segments,
        sweep_multipliers,
        sweep_m,
        sweep_beta1,
        sweep_steps,
        scan_grid,
        scan_protocols,
        scan_runs,
        scan_atoms,
        scan_steps,
        scan_gaussian_fast,
        spectrum_m,
        debug_traces,
        debug_records,
        resolved: BTreeMap::new(),
    };
    spec.validate()?;
    Ok(ExperimentSpec { resolved: spec.flat_map(), ..spec })
}

impl ExperimentSpec {
    fn ensemble_spec(&self, n_atoms: u64) -> EnsembleSpec {
        EnsembleSpec {
            n_atoms,
            protocol: self.protocol,
            feedback_rounds: self.rounds,
            prior: match self.prior_gamma_eff {
                None => PriorRule::Auto,
                Some(g) => PriorRule::GammaEff(g),
            },
        }
    }

    /// Cascade config for this spec's own (m, steps) with traces retained as
    /// requested.
    pub fn cascade_config(&self, keep_traces: bool) -> CascadeConfig {
        CascadeConfig {
            ensembles: vec![self.ensemble_spec(self.atoms); self.ensembles],
            t1: self.t1,
            multiplier: self.multiplier,
            gains: self.gains.clone(),
            steps: self.steps,
            noise: self.noise,
            seed: self.seed,
            trials: self.trials,
            posterior_points: self.posterior_points,
            keep_traces,
            keep_interrogation_log: self.debug_records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(ClockError::config("trials must be >= 2"));
        }
        match self.mode {
            Mode::Run => {
                self.cascade_config(false).validate()?;
            }
            Mode::Spectrum => {
                self.cascade_config(true).validate()?;
                for &m in &self.spectrum_m {
                    if m > self.ensembles {
                        return Err(ClockError::config(format!(
                            "key 'spectrum.m': {m} exceeds cascade.m = {}",
                            self.ensembles
                        )));
                    }
                }
            }
            Mode::SweepN => {
                if self.sweep_multipliers.is_empty() || self.sweep_m.is_empty() {
                    return Err(ClockError::config("sweep needs multipliers and m lists"));
                }
                if self.sweep_beta1.is_nan() || self.sweep_beta1 <= 0.0 {
                    return Err(ClockError::config("key 'sweep.beta1': must be > 0"));
                }
                if self.sweep_multipliers.iter().any(|n| *n < 2) {
                    return Err(ClockError::config("key 'sweep.multipliers': all must be >= 2"));
                }
            }
            Mode::ScanBeta => {
                if self.scan_grid.is_empty() {
                    return Err(ClockError::config("key 'scan.grid': must not be empty"));
                }
                if self.scan_protocols.is_empty() {
                    return Err(ClockError::config("key 'scan.protocols': must not be empty"));
                }
            }
        }
        Ok(())
    }

    /// The fully resolved flat key map (what the manifest records).
    pub fn flat_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("trials", self.trials.to_string());
        // Worker count affects scheduling only, never results, so it is not
        // part of the experiment's identity.
        put("noise.kind", match self.noise.kind {
            NoiseKind::White => "white".into(),
            NoiseKind::OneOverF => "one-over-f".into(),
        });
        put("noise.gamma", self.noise.gamma.to_string());
        put("noise.f-min", match self.noise.f_min_policy {
            FminPolicy::InverseTotalTime => "auto".into(),
            FminPolicy::Fixed(f) => f.to_string(),
        });
        put("ensemble.atoms", self.atoms.to_string());
        put("ensemble.protocol", protocol_name(self.protocol).into());
        put("ensemble.rounds", self.rounds.to_string());
        put("ensemble.posterior-grid", self.posterior_points.to_string());
        put(
            "ensemble.prior-gamma-eff",
            self.prior_gamma_eff.map_or("auto".into(), |g| g.to_string()),
        );
        put("cascade.m", self.ensembles.to_string());
        put("cascade.n", self.multiplier.to_string());
        put("cascade.t1", self.t1.to_string());
        put("cascade.steps", self.steps.to_string());
        put(
            "cascade.alpha",
            self.gains.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
        );
        put("analysis.omega", self.omega.to_string());
        put("analysis.segments", self.segments.to_string());
        put(
            "sweep.multipliers",
            self.sweep_multipliers.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("sweep.m", self.sweep_m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        put("sweep.beta1", self.sweep_beta1.to_string());
        put("sweep.steps", self.sweep_steps.to_string());
        put(
            "scan.grid",
            self.scan_grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put(
            "scan.protocols",
            self.scan_protocols.iter().map(|p| protocol_name(*p)).collect::<Vec<_>>().join(","),
        );
        put("scan.runs", self.scan_runs.to_string());
        put("scan.atoms", self.scan_atoms.to_string());
        put("scan.steps", self.scan_steps.to_string());
        put("scan.gaussian-fast", self.scan_gaussian_fast.to_string());
        put(
            "spectrum.m",
            self.spectrum_m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        put("debug.traces", self.debug_traces.to_string());
        put("debug.records", self.debug_records.to_string());
        m
    }
}

fn protocol_name(p: MeasurementProtocol) -> &'static str {
    match p {
        MeasurementProtocol::Conventional => "conventional",
        MeasurementProtocol::ConventionalGaussian => "conventional-gaussian",
        MeasurementProtocol::Adaptive => "adaptive",
        MeasurementProtocol::Ideal => "ideal",
    }
}

/// FNV-1a over file bytes; stable across runs and platforms.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Serialize)]
struct ManifestOutput {
    file: String,
    bytes: u64,
    fnv64: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    mode: &'static str,
    completed: bool,
    /// FNV-1a of the resolved config map; every output in `outputs` belongs
    /// to this configuration.
    config_fnv64: String,
    config: &'a BTreeMap<String, String>,
    outputs: Vec<ManifestOutput>,
}

/// What an experiment produced, for callers and for the CLI summary.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub stability: Option<StabilityReport>,
    pub sweep_rows: Vec<SweepRow>,
    pub scans: Vec<(String, ScanOutcome)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub multiplier: u32,
    pub m: usize,
    pub atoms: u64,
    pub steps: u64,
    pub sigma: f64,
    pub sigma_stderr: f64,
    pub figure_of_merit: f64,
    pub theory_sigma: f64,
    pub theory_figure_of_merit: f64,
    pub abort_rate: f64,
}

struct OutputTracker {
    dir: PathBuf,
    written: Vec<ManifestOutput>,
}

impl OutputTracker {
    fn new(dir: &Path) -> Result<OutputTracker> {
        fs::create_dir_all(dir).map_err(|e| ClockError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        Ok(OutputTracker { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).and_then(|_| {
            rows.iter().try_for_each(|r| w.write_record(r))
        }).map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        let bytes = w.into_inner().map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
        self.commit(&path, &bytes)?;
        Ok(path)
    }

    fn commit(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.written.push(ManifestOutput {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            fnv64: format!("{:016x}", fnv64(bytes)),
        });
        Ok(())
    }

    fn write_manifest(&mut self, spec: &ExperimentSpec, completed: bool) -> Result<PathBuf> {
        let mut config_bytes = Vec::new();
        for (k, v) in &spec.resolved {
            config_bytes.extend_from_slice(k.as_bytes());
            config_bytes.push(b'=');
            config_bytes.extend_from_slice(v.as_bytes());
            config_bytes.push(b'\n');
        }
        let manifest = Manifest {
            tool: "cascade-clock",
            version: env!("CARGO_PKG_VERSION"),
            mode: spec.mode.as_str(),
            completed,
            config_fnv64: format!("{:016x}", fnv64(&config_bytes)),
            config: &spec.resolved,
            outputs: self.written.clone(),
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let mut f = fs::File::create(&path).map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(text.as_bytes()).map_err(|e| ClockError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Execute an experiment end to end, writing outputs and the manifest into
/// `spec.out_dir`. Results are independent of worker count.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| ClockError::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_experiment_inner(spec))
}

fn run_experiment_inner(spec: &ExperimentSpec) -> Result<RunSummary> {
    let mut out = OutputTracker::new(&spec.out_dir)?;
    let mut summary = RunSummary::default();

    let run = match spec.mode {
        Mode::Run => run_mode(spec, &mut out, &mut summary),
        Mode::SweepN => sweep_mode(spec, &mut out, &mut summary),
        Mode::ScanBeta => scan_mode(spec, &mut out, &mut summary),
        Mode::Spectrum => spectrum_mode(spec, &mut out, &mut summary),
    };
    if let Err(e) = run {
        // Record whatever was committed before the failure.
        let _ = out.write_manifest(spec, false);
        return Err(e);
    }

    summary.outputs = out.written.iter().map(|o| out.dir.join(&o.file)).collect();
    summary.manifest = out.write_manifest(spec, true)?;
    Ok(summary)
}

fn collect_trials(runner: &CascadeRunner, trials: u64) -> Vec<Result<ClockRunResult>> {
    (0..trials).into_par_iter().map(|t| runner.run_trial(t)).collect()
}

fn run_mode(spec: &ExperimentSpec, out: &mut OutputTracker, summary: &mut RunSummary) -> Result<()> {
    let cfg = spec.cascade_config(spec.debug_traces);
    let runner = CascadeRunner::new(cfg)?;
    let results = collect_trials(&runner, spec.trials);

    let mut rows = Vec::with_capacity(results.len());
    let mut offsets = Vec::new();
    let mut aborted = 0u64;
    for (t, res) in results.iter().enumerate() {
        match res {
            Ok(r) => {
                offsets.push(r.mean_frequency_offset);
                rows.push(vec![t.to_string(), fmt(r.mean_frequency_offset), "0".into()]);
            }
            Err(_) => {
                aborted += 1;
                rows.push(vec![t.to_string(), String::new(), "1".into()]);
            }
        }
    }
    out.write_csv("trials.csv", &["trial", "omega_bar", "aborted"], &rows)?;

    let tau = spec.steps as f64 * spec.t1;
    let report = stability(&offsets, aborted, spec.omega, tau, spec.noise.gamma)?;
    out.write_csv(
        "stability.csv",
        &["sigma", "sigma_stderr", "figure_of_merit", "abort_rate", "tau", "trials"],
        &[vec![
            fmt(report.sigma),
            fmt(report.sigma_stderr),
            fmt(report.figure_of_merit),
            fmt(report.abort_rate),
            fmt(tau),
            report.trials_completed.to_string(),
        ]],
    )?;

    if spec.debug_traces {
        if let Some(Ok(first)) = results.first() {
            let noise = first.noise_increments.as_ref().expect("traces kept");
            let locked = first.locked_delta_omega.as_ref().expect("traces kept");
            let rows: Vec<Vec<String>> = noise
                .iter()
                .zip(locked)
                .enumerate()
                .map(|(k, (inc, dw))| vec![(k + 1).to_string(), fmt(*inc), fmt(*dw)])
                .collect();
            out.write_csv("trace_trial0.csv", &["step", "delta_phi0", "locked_delta_omega"], &rows)?;
        }
    }
    if spec.debug_records {
        if let Some(Ok(first)) = results.first() {
            let mut rows = Vec::new();
            for rec in first.interrogations.as_deref().unwrap_or(&[]) {
                if let Some(outc) = &rec.outcome {
                    let sizes = crate::ensemble::batch_sizes(spec.atoms, spec.rounds);
                    let mut idx = 0usize;
                    let mut rotation = 0.0f64;
                    for (b, step) in sizes.iter().zip(&outc.rotations) {
                        for &bit in outc.record.get(idx..idx + *b as usize).unwrap_or(&[]) {
                            rows.push(vec![
                                "0".into(),
                                rec.ensemble.to_string(),
                                rec.step.to_string(),
                                (bit as u8).to_string(),
                                fmt(rotation),
                            ]);
                        }
                        idx += *b as usize;
                        rotation += step;
                    }
                }
            }
            out.write_csv(
                "records_trial0.csv",
                &["trial", "ensemble", "step", "bit", "rotation"],
                &rows,
            )?;
        }
    }

    summary.stability = Some(report);
    Ok(())
}

fn round_up_to_multiple(target: u64, base: u64) -> u64 {
    target.div_ceil(base) * base
}

fn sweep_mode(spec: &ExperimentSpec, out: &mut OutputTracker, summary: &mut RunSummary) -> Result<()> {
    let beta1 = spec.sweep_beta1;
    let t1 = beta1 / spec.noise.gamma;
    let mut rows = Vec::new();
    for &m in &spec.sweep_m {
        for &n in &spec.sweep_multipliers {
            let atoms = crate::analysis::min_atoms(n as f64, beta1);
            let slowest = (n as u64).pow(m as u32 - 1);
            let steps = round_up_to_multiple(spec.sweep_steps, slowest);
            let cfg = CascadeConfig {
                ensembles: vec![spec.ensemble_spec(atoms); m],
                t1,
                multiplier: n,
                gains: default_gains(spec.noise.kind, m),
                steps,
                noise: spec.noise,
                seed: spec.seed ^ (m as u64) << 32 ^ n as u64,
                trials: spec.trials,
                posterior_points: spec.posterior_points,
                keep_traces: false,
                keep_interrogation_log: false,
            };
            let runner = CascadeRunner::new(cfg)?;
            let results = collect_trials(&runner, spec.trials);
            let offsets: Vec<f64> =
                results.iter().filter_map(|r| r.as_ref().ok().map(|x| x.mean_frequency_offset)).collect();
            let aborted = spec.trials - offsets.len() as u64;
            let tau = steps as f64 * t1;
            let report = stability(&offsets, aborted, spec.omega, tau, spec.noise.gamma)?;
            // Per-stage budget actually realized by integer N: beta = n / N.
            let beta = n as f64 / atoms as f64;
            let theory =
                theory_stability(m as u32, atoms, beta1, beta, spec.noise.gamma, tau, spec.omega);
            let theory_f = spec.omega * spec.omega * theory * theory * tau / spec.noise.gamma;
            rows.push(SweepRow {
                multiplier: n,
                m,
                atoms,
                steps,
                sigma: report.sigma,
                sigma_stderr: report.sigma_stderr,
                figure_of_merit: report.figure_of_merit,
                theory_sigma: theory,
                theory_figure_of_merit: theory_f,
                abort_rate: report.abort_rate,
            });
        }
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.atoms.to_string(),
                r.m.to_string(),
                r.multiplier.to_string(),
                r.steps.to_string(),
                fmt(r.sigma),
                fmt(r.sigma_stderr),
                fmt(r.figure_of_merit),
                fmt(r.theory_sigma),
                fmt(r.theory_figure_of_merit),
                fmt(r.abort_rate),
            ]
        })
        .collect();
    out.write_csv(
        "sweep.csv",
        &["atoms", "m", "n", "steps", "sigma", "sigma_stderr", "F", "theory_sigma", "theory_F", "abort_rate"],
        &csv_rows,
    )?;
    summary.sweep_rows = rows;
    Ok(())
}

fn scan_mode(spec: &ExperimentSpec, out: &mut OutputTracker, summary: &mut RunSummary) -> Result<()> {
    let mut summary_rows = Vec::new();
    for &protocol in &spec.scan_protocols {
        let effective = match protocol {
            MeasurementProtocol::Conventional if spec.scan_gaussian_fast => {
                MeasurementProtocol::ConventionalGaussian
            }
            p => p,
        };
        let gain = spec.gains.first().copied().unwrap_or(0.01);
        let scan = BreakdownScan {
            protocol: effective,
            noise: spec.noise,
            n_atoms: spec.scan_atoms,
            steps: spec.scan_steps,
            runs_per_point: spec.scan_runs,
            grid: spec.scan_grid.clone(),
            gain,
            feedback_rounds: spec.rounds,
            posterior_points: spec.posterior_points,
            omega: spec.omega,
            seed: spec.seed ^ fnv64(protocol_name(protocol).as_bytes()),
        };
        let outcome = breakdown_scan(&scan)?;
        let rows: Vec<Vec<String>> = outcome
            .curve
            .iter()
            .map(|p| vec![fmt(p.gamma_t), fmt(p.sigma), fmt(p.sigma_stderr), p.aborts.to_string()])
            .collect();
        out.write_csv(
            &format!("scan_{}.csv", protocol_name(protocol)),
            &["gamma_t", "sigma", "sigma_stderr", "aborts"],
            &rows,
        )?;
        summary_rows.push(vec![
            protocol_name(protocol).to_string(),
            fmt(outcome.beta_estimate),
            outcome.low_confidence.to_string(),
        ]);
        summary.scans.push((protocol_name(protocol).to_string(), outcome));
    }
    out.write_csv(
        "scan_summary.csv",
        &["protocol", "beta_estimate", "low_confidence"],
        &summary_rows,
    )?;
    Ok(())
}

fn spectrum_mode(spec: &ExperimentSpec, out: &mut OutputTracker, summary: &mut RunSummary) -> Result<()> {
    for &m in &spec.spectrum_m {
        let traces: Vec<Vec<f64>> = if m == 0 {
            (0..spec.trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = trial_rng(spec.seed, t);
                    spec.noise
                        .generate(spec.t1, spec.steps as usize, &mut rng)
                        .map(|tr| tr.delta_omega())
                })
                .collect::<Result<_>>()?
        } else {
            let mut cfg = spec.cascade_config(true);
            cfg.ensembles.truncate(m);
            cfg.gains.truncate(m);
            cfg.keep_interrogation_log = false;
            let runner = CascadeRunner::new(cfg)?;
            collect_trials(&runner, spec.trials)
                .into_iter()
                .map(|r| r.map(|res| res.locked_delta_omega.expect("traces kept")))
                .collect::<Result<_>>()?
        };

        let mut avg: Vec<f64> = Vec::new();
        let mut freqs: Vec<f64> = Vec::new();
        for trace in &traces {
            let (f, psd) = spectrum(trace, spec.t1, spec.segments)?;
            if avg.is_empty() {
                avg = psd;
                freqs = f;
            } else {
                for (a, p) in avg.iter_mut().zip(&psd) {
                    *a += p;
                }
            }
        }
        for a in avg.iter_mut() {
            *a /= traces.len() as f64;
        }
        let rows: Vec<Vec<String>> =
            freqs.iter().zip(&avg).map(|(f, s)| vec![fmt(*f), fmt(*s)]).collect();
        let name = if m == 0 { "spectrum_unlocked.csv".to_string() } else { format!("spectrum_m{m}.csv") };
        out.write_csv(&name, &["f", "S"], &rows)?;
    }
    let _ = summary;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_text_parsing_and_unknown_keys() {
        let spec = parse_config(
            Mode::Run,
            None,
            None,
            &[("cascade.m".into(), "1".into()), ("ensemble.atoms".into(), "100".into())],
        )
        .unwrap();
        assert_eq!(spec.atoms, 100);
        assert_eq!(spec.ensembles, 1);
        // documented defaults
        assert_eq!(spec.seed, 1);
        assert_eq!(spec.multiplier, 2);
        assert_eq!(spec.posterior_points, 4096);
        assert_eq!(spec.protocol, MeasurementProtocol::Conventional);
        assert!((spec.t1 - 0.1).abs() < 1e-15, "conventional default beta 0.1 over gamma 1");

        let err = parse_config(Mode::Run, None, None, &[("cascde.m".into(), "1".into())])
            .unwrap_err();
        assert!(err.to_string().contains("cascde.m"), "{err}");
    }

    #[test]
    fn divisibility_is_rejected_not_rounded() {
        // 10^4 steps with three ensembles at n = 3 would need a multiple of 9.
        let err = parse_config(
            Mode::Run,
            None,
            None,
            &[
                ("cascade.m".into(), "3".into()),
                ("cascade.n".into(), "3".into()),
                ("cascade.steps".into(), "10000".into()),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
        // n = 2 at 10^4 steps is fine: 10^4 is a multiple of n^(m-1) = 4.
        assert!(parse_config(
            Mode::Run,
            None,
            None,
            &[
                ("cascade.m".into(), "3".into()),
                ("cascade.n".into(), "2".into()),
                ("cascade.steps".into(), "10000".into()),
            ],
        )
        .is_ok());
    }

    #[test]
    fn invalid_combination_mentions_key() {
        let err = parse_config(
            Mode::Run,
            None,
            None,
            &[("cascade.m".into(), "2".into()), ("cascade.n".into(), "1".into())],
        )
        .unwrap_err();
        assert!(err.to_string().contains("cascade.n"), "{err}");
    }

    #[test]
    fn adaptive_defaults_follow_noise_kind() {
        let white = parse_config(
            Mode::Run,
            None,
            None,
            &[("ensemble.protocol".into(), "adaptive".into())],
        )
        .unwrap();
        assert!((white.t1 - 0.3).abs() < 1e-15);
        let pink = parse_config(
            Mode::Run,
            None,
            None,
            &[
                ("ensemble.protocol".into(), "adaptive".into()),
                ("noise.kind".into(), "one-over-f".into()),
                ("cascade.m".into(), "2".into()),
            ],
        )
        .unwrap();
        assert!((pink.t1 - 0.2).abs() < 1e-15);
        assert_eq!(pink.gains, vec![0.5, 0.01]);
    }

    #[test]
    fn preset_fig2_matches_published_parameters() {
        let spec = parse_config(Mode::SweepN, Some("fig2"), None, &[]).unwrap();
        assert!((spec.sweep_beta1 - 0.1).abs() < 1e-15);
        assert_eq!(spec.sweep_multipliers, vec![2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(spec.sweep_m, vec![1, 2, 3, 4]);
        // N = ceil(n / beta1) runs from 20 to 100 across the sweep.
        assert_eq!(crate::analysis::min_atoms(2.0, spec.sweep_beta1), 20);
        assert_eq!(crate::analysis::min_atoms(10.0, spec.sweep_beta1), 100);
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let err = parse_config(Mode::Run, Some("fig9"), None, &[]).unwrap_err();
        assert!(matches!(err, ClockError::Config(_)));
    }

    #[test]
    fn fnv64_is_stable() {
        assert_eq!(fnv64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
