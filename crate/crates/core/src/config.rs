//! Experiment configuration: a TOML document with `[model]`, `[grid]`,
//! `[experiment]` and `[output]` sections, dotted-path overrides and a
//! content hash that identifies compatible replica batches.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::malliavin::WindowKind;
use crate::model::{DiffusionField, SigmaFamily};
use crate::solver::{Grid, GridSpec};

/// Every physical and statistical default in one place.
///
/// | key                          | default                  |
/// |------------------------------|--------------------------|
/// | `grid.t_final`               | 1                        |
/// | `grid.dx`                    | 0.05                     |
/// | `grid.dt`                    | 1e-3                     |
/// | `grid.padding`               | 6 (half-width ≥ R + 6√(2T)) |
/// | `grid.output_times`          | `[T]`                    |
/// | `experiment.radii`           | `[2, 4, 8, 16, 32]`      |
/// | `experiment.replicas`        | 2000                     |
/// | `experiment.seed`            | 0                        |
/// | `experiment.workers`         | 1                        |
/// | `experiment.eta_dt`          | 0.01                     |
/// | `experiment.projections`     | 64                       |
/// | `experiment.moment_order`    | 4                        |
/// | `experiment.volterra_tol`    | 1e-8                     |
/// | `tolerances.se_factor`       | 3                        |
/// | `tolerances.discretization`  | 0.05                     |
/// | `tolerances.alpha`           | 0.01                     |
/// | `output.directory`           | `out`                    |
pub mod defaults {
    pub const T_FINAL: f64 = 1.0;
    pub const DX: f64 = 0.05;
    pub const DT: f64 = 1e-3;
    pub const PADDING: f64 = 6.0;
    pub const RADII: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 32.0];
    pub const REPLICAS: usize = 2000;
    pub const SEED: u64 = 0;
    pub const WORKERS: usize = 1;
    pub const ETA_DT: f64 = 0.01;
    pub const PROJECTIONS: usize = 64;
    pub const MOMENT_ORDER: f64 = 4.0;
    pub const VOLTERRA_TOL: f64 = 1e-8;
    pub const VOLTERRA_STEPS: usize = 64;
    pub const SE_FACTOR: f64 = 3.0;
    pub const DISCRETIZATION: f64 = 0.05;
    pub const ALPHA: f64 = 0.01;
    pub const OUTPUT_DIR: &str = "out";
}

/// Experiment kinds run by the command line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    H1,
    Covariance,
    Rate,
    Fclt,
    Malliavin,
    Oracle,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::H1 => "h1",
            ExperimentKind::Covariance => "covariance",
            ExperimentKind::Rate => "rate",
            ExperimentKind::Fclt => "fclt",
            ExperimentKind::Malliavin => "malliavin",
            ExperimentKind::Oracle => "oracle",
        }
    }

    /// Whether the experiment simulates replicas.
    pub fn is_monte_carlo(self) -> bool {
        matches!(self, ExperimentKind::Covariance | ExperimentKind::Fclt | ExperimentKind::Malliavin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    #[serde(flatten)]
    pub sigma: SigmaFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "d_t_final")]
    pub t_final: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_dx")]
    pub dx: f64,
    #[serde(default = "d_padding")]
    pub padding: f64,
    /// Defaults to `[t_final]`.
    #[serde(default)]
    pub output_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "d_se_factor")]
    pub se_factor: f64,
    #[serde(default = "d_discretization")]
    pub discretization: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            se_factor: defaults::SE_FACTOR,
            discretization: defaults::DISCRETIZATION,
            alpha: defaults::ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "d_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    /// First replica id of this batch.
    #[serde(default)]
    pub replica_offset: u64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_workers")]
    pub workers: usize,
    /// Evaluation time; defaults to the last output time.
    #[serde(default)]
    pub t: Option<f64>,
    /// Spacing of the η records.
    #[serde(default = "d_eta_dt")]
    pub eta_dt: f64,
    #[serde(default = "d_projections")]
    pub projections: usize,
    #[serde(default = "d_moment_order")]
    pub moment_order: f64,
    #[serde(default)]
    pub window: WindowKind,
    #[serde(default = "d_volterra_tol")]
    pub volterra_tol: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "d_output_dir")]
    pub directory: PathBuf,
    #[serde(default = "d_formats")]
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: d_output_dir(),
            formats: d_formats(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default = "d_grid")]
    pub grid: GridConfig,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputConfig,
}

fn d_t_final() -> f64 {
    defaults::T_FINAL
}
fn d_dt() -> f64 {
    defaults::DT
}
fn d_dx() -> f64 {
    defaults::DX
}
fn d_padding() -> f64 {
    defaults::PADDING
}
fn d_se_factor() -> f64 {
    defaults::SE_FACTOR
}
fn d_discretization() -> f64 {
    defaults::DISCRETIZATION
}
fn d_alpha() -> f64 {
    defaults::ALPHA
}
fn d_radii() -> Vec<f64> {
    defaults::RADII.to_vec()
}
fn d_replicas() -> usize {
    defaults::REPLICAS
}
fn d_seed() -> u64 {
    defaults::SEED
}
fn d_workers() -> usize {
    defaults::WORKERS
}
fn d_eta_dt() -> f64 {
    defaults::ETA_DT
}
fn d_projections() -> usize {
    defaults::PROJECTIONS
}
fn d_moment_order() -> f64 {
    defaults::MOMENT_ORDER
}
fn d_volterra_tol() -> f64 {
    defaults::VOLTERRA_TOL
}
fn d_output_dir() -> PathBuf {
    PathBuf::from(defaults::OUTPUT_DIR)
}
fn d_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Json, OutputFormat::Csv]
}
fn d_grid() -> GridConfig {
    GridConfig {
        t_final: defaults::T_FINAL,
        dt: defaults::DT,
        dx: defaults::DX,
        padding: defaults::PADDING,
        output_times: Vec::new(),
    }
}

/// Parses a `KEY=VALUE` override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `root` to `value`, creating intermediate tables.
fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("malformed override key '{path}'")));
    }
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override '{path}': '{key}' is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Model, grid and the validated configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub field: DiffusionField,
    pub grid: Grid,
    /// Evaluation time.
    pub t: f64,
}

impl ExperimentConfig {
    /// Parses TOML text and applies `KEY=VALUE` overrides on dotted paths.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config does not parse: {e}")))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not KEY=VALUE")))?;
            set_path(&mut doc, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring batch size, batch
    /// offset, worker count and output location.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            if let Some(e) = obj.get_mut("experiment").and_then(|e| e.as_object_mut()) {
                e.remove("replicas");
                e.remove("replica_offset");
                e.remove("workers");
            }
        }
        let canonical = serde_json::to_string(&v).expect("json serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output times with the evaluation time included, sorted.
    fn resolved_times(&self) -> (Vec<f64>, f64) {
        let mut times = if self.grid.output_times.is_empty() {
            vec![self.grid.t_final]
        } else {
            self.grid.output_times.clone()
        };
        let t = self
            .experiment
            .t
            .unwrap_or_else(|| times.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        if !times.iter().any(|&s| (s - t).abs() <= 1e-12 * t.max(1.0)) {
            times.push(t);
        }
        times.sort_by(f64::total_cmp);
        (times, t)
    }

    /// Checks every invariant and builds the model and grid.
    pub fn prepare(&self) -> Result<Prepared> {
        let e = &self.experiment;
        let field = DiffusionField::new(self.model.d, self.model.m, self.model.sigma.clone())?;
        if e.radii.is_empty() {
            return Err(Error::config("experiment.radii is empty"));
        }
        if e.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config("experiment.radii must be positive"));
        }
        if e.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("experiment.radii must be sorted ascending without repeats"));
        }
        if e.kind.is_monte_carlo() && e.replicas < 2 {
            return Err(Error::config(format!("experiment.replicas must be at least 2, got {}", e.replicas)));
        }
        if e.workers == 0 {
            return Err(Error::config("experiment.workers must be positive"));
        }
        if e.projections == 0 || !(e.moment_order > 0.0) || !(e.volterra_tol > 0.0) {
            return Err(Error::config("experiment.projections, moment_order and volterra_tol must be positive"));
        }
        let tol = &e.tolerances;
        if !(tol.se_factor > 0.0) || !(tol.discretization >= 0.0) || !(tol.alpha > 0.0 && tol.alpha < 1.0) {
            return Err(Error::config("tolerances must satisfy se_factor > 0, discretization ≥ 0, 0 < alpha < 1"));
        }
        let g = &self.grid;
        if !(g.dx > 0.0) || !(g.dt > 0.0) {
            return Err(Error::config("grid.dx and grid.dt must be positive"));
        }
        if g.dt > 0.5 * g.dx * g.dx * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "explicit scheme is unstable: dt={} exceeds dx²/2={}",
                g.dt,
                0.5 * g.dx * g.dx
            )));
        }
        let (times, t) = self.resolved_times();
        if !(t > 0.0) {
            return Err(Error::config(format!("evaluation time must be positive, got {t}")));
        }
        let r_max = if e.kind.is_monte_carlo() { *e.radii.last().unwrap() } else { 0.0 };
        let grid = Grid::new(&GridSpec {
            t_final: g.t_final,
            dt: g.dt,
            dx: g.dx,
            r_max,
            padding: g.padding,
            output_times: times,
        })?;
        if e.kind.is_monte_carlo() {
            for &r in &e.radii {
                grid.window_range(r)?;
            }
            let stride = (e.eta_dt / g.dt).round();
            if stride < 1.0 || (stride * g.dt - e.eta_dt).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "experiment.eta_dt={} is not a positive multiple of dt={}",
                    e.eta_dt, g.dt
                )));
            }
        }
        if e.kind == ExperimentKind::Malliavin && !field.has_jacobian() {
            return Err(Error::config("malliavin experiments need a differentiable σ family"));
        }
        Ok(Prepared {
            config: self.clone(),
            field,
            grid,
            t,
        })
    }
}
