//! Experiment configuration (JSON) with dot-path overrides and sweep grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use icem::contact::InitialGuess;
use icem::field::{MediumKind, WeightMode};
use icem::linsolve::Method;
use icem::mesh::Geometry;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometryName {
    #[serde(alias = "all_contact", alias = "allcontact")]
    AllContact,
    #[serde(rename = "MixedDNC", alias = "mixed_dnc", alias = "mixeddnc")]
    MixedDnc,
}

impl From<GeometryName> for Geometry {
    fn from(g: GeometryName) -> Self {
        match g {
            GeometryName::AllContact => Geometry::AllContact,
            GeometryName::MixedDnc => Geometry::MixedDnc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediumName {
    Inclusions,
    Channels,
    #[serde(alias = "MixedC", alias = "mixedc")]
    MixedC,
}

impl From<MediumName> for MediumKind {
    fn from(m: MediumName) -> Self {
        match m {
            MediumName::Inclusions => MediumKind::Inclusions,
            MediumName::Channels => MediumKind::Channels,
            MediumName::MixedC => MediumKind::MixedC,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    pub kind: MediumName,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(rename = "kappa_R")]
    pub kappa_r: f64,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceName {
    Zero,
    F1,
    F2,
    F3,
    /// Per-cell values from `source_file`.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeumannName {
    Zero,
    /// One value per Neumann edge from `p_file`.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialName {
    #[serde(rename = "u00")]
    U00,
    #[serde(rename = "u01")]
    U01,
    #[serde(rename = "u02")]
    U02,
}

impl From<InitialName> for InitialGuess {
    fn from(i: InitialName) -> Self {
        match i {
            InitialName::U00 => InitialGuess::Zero,
            InitialName::U01 => InitialGuess::Linear,
            InitialName::U02 => InitialGuess::Quadratic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Direct,
    Cg,
}

impl From<MethodName> for Method {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Direct => Method::Direct,
            MethodName::Cg => Method::Cg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightName {
    Simplified,
    LagrangeSum,
}

impl From<WeightName> for WeightMode {
    fn from(w: WeightName) -> Self {
        match w {
            WeightName::Simplified => WeightMode::Simplified,
            WeightName::LagrangeSum => WeightMode::LagrangeSum,
        }
    }
}

/// Which solvers to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fine,
    Cem,
    /// Fine reference and multiscale run from the same initial guess, with paired errors.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_method")]
    pub method: MethodName,
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
}

fn default_method() -> MethodName {
    MethodName::Direct
}

fn default_solver_tol() -> f64 {
    1e-12
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            tol: default_solver_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub dump_fields: bool,
    #[serde(default)]
    pub dump_basis: bool,
    /// Fill the `phase_ms` column. Off by default so records are reproducible byte for byte.
    #[serde(default)]
    pub record_timings: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            dump_fields: true,
            dump_basis: false,
            record_timings: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_geometry")]
    pub geometry: GeometryName,
    #[serde(default = "default_nx_fine")]
    pub nx_fine: usize,
    #[serde(rename = "Nx_coarse", default = "default_nx_coarse")]
    pub nx_coarse: usize,
    #[serde(default)]
    pub medium: Option<MediumConfig>,
    /// Per-cell permeability table (`.csv` rows from the bottom, or `.bin` grid dump).
    #[serde(default)]
    pub field_file: Option<PathBuf>,
    #[serde(default = "default_source")]
    pub source: SourceName,
    #[serde(default)]
    pub source_file: Option<PathBuf>,
    #[serde(default = "default_p")]
    pub p: NeumannName,
    #[serde(default)]
    pub p_file: Option<PathBuf>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_layers")]
    pub m: usize,
    #[serde(default = "default_layers")]
    pub l_m: usize,
    #[serde(default = "default_initial")]
    pub initial: InitialName,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_weight")]
    pub weight: WeightName,
    /// Sweep axes: dot-path → list of values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<BTreeMap<String, Vec<Value>>>,
}

fn default_geometry() -> GeometryName {
    GeometryName::MixedDnc
}
fn default_nx_fine() -> usize {
    160
}
fn default_nx_coarse() -> usize {
    20
}
fn default_source() -> SourceName {
    SourceName::F1
}
fn default_p() -> NeumannName {
    NeumannName::Zero
}
fn default_eps() -> f64 {
    1e-4
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    50
}
fn default_layers() -> usize {
    3
}
fn default_initial() -> InitialName {
    InitialName::U00
}
fn default_mode() -> Mode {
    Mode::Both
}
fn default_weight() -> WeightName {
    WeightName::Simplified
}

impl Config {
    pub fn from_value(value: Value) -> Result<Self> {
        let config: Config = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        match (&self.medium, &self.field_file) {
            (Some(_), Some(_)) => return bad("give either `medium` or `field_file`, not both".into()),
            (None, None) => return bad("one of `medium` or `field_file` is required".into()),
            _ => {}
        }
        if self.source == SourceName::File && self.source_file.is_none() {
            return bad("source `file` needs `source_file`".into());
        }
        if self.p == NeumannName::File && self.p_file.is_none() {
            return bad("p `file` needs `p_file`".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol must be nonnegative, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

/// Reads a JSON config and applies `key=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    resolve_paths(&mut value, path.parent().unwrap_or(Path::new(".")));
    Config::from_value(value)
}

/// Relative input file paths are taken relative to the config file.
fn resolve_paths(value: &mut Value, base: &Path) {
    for key in ["field_file", "source_file", "p_file"] {
        if let Some(Value::String(s)) = value.get_mut(key) {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, path, parsed)
}

pub fn set_path(root: &mut Value, path: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("empty key in `{path}`")));
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{path}`: `{part}` is not inside an object")))?;
        if k + 1 == parts.len() {
            obj.insert((*part).to_string(), new);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// One point of a sweep grid.
#[derive(Clone, Debug)]
pub struct GridPoint {
    /// Directory name, e.g. `l_m=2,m=3`.
    pub label: String,
    pub config: Config,
}

fn label_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands the `sweep` table into the cartesian product of its axes (keys in sorted order,
/// last key varying fastest). Without a `sweep` table the grid is the config itself.
pub fn expand_grid(config: &Config) -> Result<Vec<GridPoint>> {
    let axes: Vec<(String, Vec<Value>)> = config
        .sweep
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(CliError::Config("sweep axes must be nonempty".into()));
    }
    let mut base = config.to_value();
    base.as_object_mut().expect("config is an object").remove("sweep");
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut points = Vec::with_capacity(total);
    for idx in 0..total {
        let mut value = base.clone();
        let mut labels = Vec::new();
        let mut rem = idx;
        let mut picks = vec![0; axes.len()];
        for (a, (_, vals)) in axes.iter().enumerate().rev() {
            picks[a] = rem % vals.len();
            rem /= vals.len();
        }
        for (a, (key, vals)) in axes.iter().enumerate() {
            let v = &vals[picks[a]];
            set_path(&mut value, key, v.clone())?;
            labels.push(format!("{key}={}", label_value(v)));
        }
        let mut point = Config::from_value(value)?;
        let label = if labels.is_empty() { String::new() } else { labels.join(",") };
        if !label.is_empty() {
            point.outputs.dir = config.outputs.dir.join(&label);
        }
        points.push(GridPoint { label, config: point });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "geometry": "MixedDNC",
            "nx_fine": 16,
            "Nx_coarse": 4,
            "medium": {"kind": "inclusions", "seed": 3, "kappa_R": 1000.0},
            "outputs": {"dir": "out"}
        })
    }

    #[test]
    fn defaults_fill_in() {
        let c = Config::from_value(base()).unwrap();
        assert_eq!(c.eps, 1e-4);
        assert_eq!(c.tol, 1e-8);
        assert_eq!((c.m, c.l_m), (3, 3));
        assert_eq!(c.initial, InitialName::U00);
        assert_eq!(c.mode, Mode::Both);
        assert!(c.outputs.dump_fields);
        assert!(!c.outputs.record_timings);
    }

    #[test]
    fn overrides_use_dot_paths() {
        let mut v = base();
        apply_override(&mut v, "medium.kappa_R=10").unwrap();
        apply_override(&mut v, "geometry=AllContact").unwrap();
        apply_override(&mut v, "solver.method=cg").unwrap();
        let c = Config::from_value(v).unwrap();
        assert_eq!(c.medium.unwrap().kappa_r, 10.0);
        assert_eq!(c.geometry, GeometryName::AllContact);
        assert_eq!(c.solver.method, MethodName::Cg);
        let mut v = base();
        assert!(apply_override(&mut v, "no_equals_sign").is_err());
        apply_override(&mut v, "bogus=1").unwrap();
        assert!(Config::from_value(v).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut v = base();
        v["eps"] = json!(0.0);
        assert!(Config::from_value(v).is_err());
        let mut v = base();
        v.as_object_mut().unwrap().remove("medium");
        assert!(Config::from_value(v).is_err());
        let mut v = base();
        v["source"] = json!("file");
        assert!(Config::from_value(v).is_err());
    }

    #[test]
    fn grid_is_cartesian_with_distinct_dirs() {
        let mut v = base();
        v["sweep"] = json!({"m": [2, 3], "l_m": [2, 3]});
        let c = Config::from_value(v).unwrap();
        let grid = expand_grid(&c).unwrap();
        assert_eq!(grid.len(), 4);
        let labels: Vec<&str> = grid.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["l_m=2,m=2", "l_m=2,m=3", "l_m=3,m=2", "l_m=3,m=3"]);
        assert_eq!((grid[1].config.l_m, grid[1].config.m), (2, 3));
        let mut dirs: Vec<_> = grid.iter().map(|p| p.config.outputs.dir.clone()).collect();
        dirs.dedup();
        assert_eq!(dirs.len(), 4);
        assert!(grid.iter().all(|p| p.config.sweep.is_none()));
    }

    #[test]
    fn one_point_grid_is_the_config() {
        let c = Config::from_value(base()).unwrap();
        let grid = expand_grid(&c).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].config, c);
    }
}
