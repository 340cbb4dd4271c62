//! Experiment configuration: sources, suites, budgets and the defaults table.
//!
//! TOML is the primary format; a file ending in `.json` is read as JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeSource};
use crate::functions::{MatrixFn, OverlapFn, WeightedFn};
use crate::identity::Binning;
use crate::invariance::{MuMode, PartitionSpec};
use crate::measure::{Budget, DiracSource};
use crate::spin::{EnumeratedSpinSource, GibbsChainSource, MCParams, MixedPSpinModel, PSpinTerm, PerturbationTerm};

/// Every numeric default used by the runner.
///
/// | key            | default | meaning                                        |
/// |----------------|---------|------------------------------------------------|
/// | `realizations` | 400     | realizations of the measure per block          |
/// | `tuples`       | 4       | replica tuples per realization                 |
/// | `bootstrap`    | 200     | bootstrap resamples                            |
/// | `inner_m`      | 256     | inner samples for non-atomic inner averages    |
/// | `significance` | 3.0     | pass iff `|z|` is below this                   |
/// | `epsilon`      | 0.02    | global approximation tolerance                 |
/// | `h`            | 0.1     | finite-difference step at `t = 0`              |
/// | `budget_scale` | 1.0     | multiplier on every realization count          |
/// | `out_dir`      | `out`   | output directory                               |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default = "d_realizations")]
    pub realizations: usize,
    #[serde(default = "d_tuples")]
    pub tuples: usize,
    #[serde(default = "d_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "d_inner_m")]
    pub inner_m: usize,
    #[serde(default = "d_significance")]
    pub significance: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_h")]
    pub h: f64,
    #[serde(default = "d_budget_scale")]
    pub budget_scale: f64,
}

fn d_realizations() -> usize {
    400
}
fn d_tuples() -> usize {
    4
}
fn d_bootstrap() -> usize {
    200
}
fn d_inner_m() -> usize {
    256
}
fn d_significance() -> f64 {
    3.0
}
fn d_epsilon() -> f64 {
    0.02
}
fn d_h() -> f64 {
    0.1
}
fn d_budget_scale() -> f64 {
    1.0
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            realizations: d_realizations(),
            tuples: d_tuples(),
            bootstrap: d_bootstrap(),
            inner_m: d_inner_m(),
            significance: d_significance(),
            epsilon: d_epsilon(),
            h: d_h(),
            budget_scale: d_budget_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Cascade {
        zetas: Vec<f64>,
        overlaps: Vec<f64>,
        #[serde(default = "default_truncation", alias = "K")]
        truncation: usize,
        #[serde(default)]
        dimension: usize,
    },
    /// Sherrington-Kirkpatrick sampled by Monte Carlo.
    Sk {
        n: usize,
        beta: f64,
        #[serde(default)]
        perturbation: Vec<PerturbationTerm>,
        mc: MCParams,
    },
    /// Mixed p-spin sampled by Monte Carlo.
    Pspin { model: MixedPSpinModel, mc: MCParams },
    /// Exact enumeration of a small model.
    Enumerated { model: MixedPSpinModel },
    Dirac { q_star: f64 },
}

fn default_truncation() -> usize {
    crate::cascade::DEFAULT_TRUNCATION
}

/// A validated, constructed source.
#[derive(Debug, Clone)]
pub enum Source {
    Cascade(CascadeSource),
    Chain(GibbsChainSource),
    Enumerated(EnumeratedSpinSource),
    Dirac(DiracSource),
}

impl SourceConfig {
    pub fn build(&self) -> crate::Result<Source> {
        Ok(match self {
            SourceConfig::Cascade { zetas, overlaps, truncation, dimension } => {
                let mut c = CascadeConfig::new(zetas.clone(), overlaps.clone(), *truncation)?;
                c.dimension = *dimension;
                Source::Cascade(CascadeSource::new(c)?)
            }
            SourceConfig::Sk { n, beta, perturbation, mc } => {
                let model = MixedPSpinModel { n: *n, terms: vec![PSpinTerm { p: 2, beta: *beta }], perturbation: perturbation.clone() };
                Source::Chain(GibbsChainSource::new(model, mc.clone())?)
            }
            SourceConfig::Pspin { model, mc } => Source::Chain(GibbsChainSource::new(model.clone(), mc.clone())?),
            SourceConfig::Enumerated { model } => Source::Enumerated(EnumeratedSpinSource::new(model.clone())?),
            SourceConfig::Dirac { q_star } => Source::Dirac(DiracSource::new(*q_star)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GgCase {
    pub n: usize,
    #[serde(default = "unit_fn")]
    pub f: MatrixFn,
    pub psi: OverlapFn,
}

fn unit_fn() -> MatrixFn {
    MatrixFn::constant(1.0)
}

fn default_three() -> usize {
    3
}

fn default_tree_n() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarycenterCase {
    pub m: usize,
    pub q_star: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuiteKind {
    Gg {
        cases: Vec<GgCase>,
    },
    Mixture {
        n: usize,
        #[serde(default = "exact_binning")]
        binning: Binning,
    },
    Invariance {
        phi: MatrixFn,
        fs: Vec<OverlapFn>,
        t_grid: Vec<f64>,
        #[serde(default)]
        h: Option<f64>,
        #[serde(default)]
        mu: MuMode,
    },
    Theorem2 {
        partition: PartitionSpec,
        varphi: WeightedFn,
        fs: Vec<OverlapFn>,
        #[serde(default)]
        mu: MuMode,
    },
    Ultrametric {
        /// Replicas per census sample (all triples are classified).
        #[serde(default = "default_three")]
        n: usize,
        /// Replicas in each tree reconstruction sample.
        #[serde(default = "default_tree_n")]
        tree_n: usize,
    },
    Extension {
        n: usize,
        #[serde(default)]
        off_diagonal: Option<f64>,
        /// Full row-major matrix (diagonal ignored and set to `q*`).
        #[serde(default)]
        entries: Option<Vec<f64>>,
    },
    Barycenter {
        #[serde(default)]
        cases: Vec<BarycenterCase>,
        /// Random PSD `(a, b, c, q*, m)` tuples to check.
        #[serde(default)]
        random: usize,
        /// Pattern `(a, b, c, q*)` whose smallest non-PSD group size is searched.
        #[serde(default)]
        contradiction: Option<[f64; 4]>,
        #[serde(default = "default_max_m")]
        max_m: usize,
    },
}

fn exact_binning() -> Binning {
    Binning::Exact
}

fn default_max_m() -> usize {
    1024
}

impl SuiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Gg { .. } => "gg",
            SuiteKind::Mixture { .. } => "mixture",
            SuiteKind::Invariance { .. } => "invariance",
            SuiteKind::Theorem2 { .. } => "theorem2",
            SuiteKind::Ultrametric { .. } => "ultrametric",
            SuiteKind::Extension { .. } => "extension",
            SuiteKind::Barycenter { .. } => "barycenter",
        }
    }

    pub fn needs_source(&self) -> bool {
        !matches!(self, SuiteKind::Barycenter { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub name: String,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub realizations: Option<usize>,
    #[serde(default)]
    pub tuples: Option<usize>,
    #[serde(flatten)]
    pub kind: SuiteKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; required so that no run depends on the clock.
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub sources: BTreeMap<String, SourceConfig>,
    #[serde(default)]
    pub suites: Vec<SuiteConfig>,
}

/// A configuration problem, anchored to a line of the file when possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.path.display(), l, self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line containing `needle`, 1-based.
fn line_containing(text: &str, needle: &str) -> Option<usize> {
    text.lines().position(|l| l.contains(needle)).map(|i| i + 1)
}

/// Parses and validates configuration text; `path` is used for messages and
/// to pick the format.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let err = |line: Option<usize>, message: String| ConfigError { path: path.to_path_buf(), line, message };
    let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(text).map_err(|e| err(Some(e.line()), e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            err(line, e.message().to_string())
        })?
    };
    validate(&cfg, text).map_err(|(needle, message)| err(needle.and_then(|n| line_containing(text, &n)), message))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError { path: path.to_path_buf(), line: None, message: e.to_string() })?;
    parse_config(&text, path)
}

/// Returns `(text to locate, message)` on failure.
fn validate(cfg: &ExperimentConfig, _text: &str) -> Result<(), (Option<String>, String)> {
    let d = &cfg.defaults;
    if d.realizations == 0 || d.tuples == 0 || d.bootstrap < 2 || d.inner_m == 0 {
        return Err((Some("[defaults]".into()), "defaults need positive budgets and at least 2 bootstrap resamples".into()));
    }
    if !(d.significance > 0.0 && d.epsilon > 0.0 && d.h > 0.0 && d.budget_scale > 0.0) {
        return Err((Some("[defaults]".into()), "significance, epsilon, h and budget_scale must be positive".into()));
    }
    for (name, s) in &cfg.sources {
        s.build().map_err(|e| (Some(format!("[sources.{name}]")), format!("source `{name}`: {e}")))?;
    }
    let mut seen = std::collections::BTreeSet::new();
    for suite in &cfg.suites {
        let at = Some(format!("\"{}\"", suite.name));
        if !seen.insert(suite.name.as_str()) {
            return Err((at, format!("duplicate suite name `{}`", suite.name)));
        }
        if suite.name.is_empty() || !suite.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err((at, format!("suite name `{}` must be non-empty ASCII letters, digits, '-' or '_'", suite.name)));
        }
        match (&suite.source, suite.kind.needs_source()) {
            (None, true) => return Err((at, format!("suite `{}` needs a source", suite.name))),
            (Some(src), _) if !cfg.sources.contains_key(src) => {
                return Err((Some(format!("\"{src}\"")), format!("suite `{}` references undefined source `{src}`", suite.name)));
            }
            _ => {}
        }
        if suite.realizations == Some(0) || suite.tuples == Some(0) {
            return Err((at, format!("suite `{}` has a zero budget", suite.name)));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Budget of a suite after overrides and scaling.
    pub fn budget_for(&self, suite: &SuiteConfig, scale: f64) -> Budget {
        let b = Budget::new(
            suite.realizations.unwrap_or(self.defaults.realizations),
            suite.tuples.unwrap_or(self.defaults.tuples),
        );
        if scale == 1.0 {
            b
        } else {
            b.scaled(scale, crate::identity::MIN_BOOTSTRAP_REALIZATIONS)
        }
    }
}
