//! Suite execution, report persistence and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Source, SuiteConfig, SuiteKind};
use crate::identity::{gg_identity_test, mixture_law_check, TestOptions, TestReport, Verdict};
use crate::invariance::{invariance_test, theorem2_test, BoundedFunctionFamily, InvarianceOptions};
use crate::measure::{Budget, MeasureSource};
use crate::overlap::ConstraintMatrix;
use crate::seed::SeedKey;
use crate::ultrametric::{
    barycenter_on_pattern, build_ultrametric_tree, census_of_samples, extension_probe, sample_overlaps, smallest_failing_m,
    ultrametricity_stat,
};

/// JSON has no infinities or NaN; they are written as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub suite: String,
    pub test: String,
    pub n: usize,
    #[serde(with = "nonfinite")]
    pub lhs: f64,
    #[serde(with = "nonfinite")]
    pub rhs: f64,
    #[serde(with = "nonfinite")]
    pub se: f64,
    #[serde(with = "nonfinite")]
    pub z: f64,
    pub verdict: Verdict,
}

impl SummaryRow {
    fn from_report(suite: &str, r: &TestReport) -> Self {
        SummaryRow {
            suite: suite.to_string(),
            test: r.name.clone(),
            n: r.metadata.n,
            lhs: r.lhs.mean,
            rhs: r.rhs.mean,
            se: r.difference.std_error,
            z: r.z_score,
            verdict: r.verdict(),
        }
    }
}

/// A plot-ready data file: name relative to the plot directory, and text.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotFile {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub kind: String,
    pub source: Option<String>,
    pub seed: u64,
    pub budget: Budget,
    pub rows: Vec<SummaryRow>,
    pub details: serde_json::Value,
    #[serde(skip)]
    pub plots: Vec<(String, String)>,
}

impl SuiteReport {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.verdict.is_failure())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub suite: String,
    pub path: PathBuf,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub budget_scale: f64,
    pub reports: Vec<ReportEntry>,
    pub summary: PathBuf,
    pub pass: bool,
    pub failing_suites: Vec<String>,
    pub runtime_seconds: f64,
}

/// Command-line overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub budget_scale: Option<f64>,
}

fn to_value<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("reports serialize")
}

macro_rules! with_source {
    ($src:expr, $s:ident => $body:expr) => {
        match $src {
            Source::Cascade($s) => $body,
            Source::Chain($s) => $body,
            Source::Enumerated($s) => $body,
            Source::Dirac($s) => $body,
        }
    };
}

fn row(suite: &str, test: impl Into<String>, n: usize, lhs: f64, rhs: f64, se: f64, z: f64, verdict: Verdict) -> SummaryRow {
    SummaryRow { suite: suite.to_string(), test: test.into(), n, lhs, rhs, se, z, verdict }
}

fn assert_or_report(asserted: bool, ok: bool) -> Verdict {
    match (asserted, ok) {
        (false, _) => Verdict::Report,
        (true, true) => Verdict::Pass,
        (true, false) => Verdict::Fail,
    }
}

/// Runs one suite and returns its report (rows, JSON details, plot data).
pub fn run_suite(cfg: &ExperimentConfig, suite: &SuiteConfig, master: u64, scale: f64) -> crate::Result<SuiteReport> {
    let key = SeedKey::new(master).named(&suite.name);
    let budget = cfg.budget_for(suite, scale);
    let d = &cfg.defaults;
    let opts = TestOptions { bootstrap: d.bootstrap, threshold: d.significance, inner_m: d.inner_m };
    let name = suite.name.as_str();
    let source = match &suite.source {
        Some(s) => Some(cfg.sources[s].build()?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    let details = match &suite.kind {
        SuiteKind::Gg { cases } => {
            let src = source.as_ref().expect("validated");
            let mut reports = Vec::new();
            for (k, case) in cases.iter().enumerate() {
                let r = with_source!(src, s => gg_identity_test(s, &case.f, &case.psi, case.n, budget, key.child(k as u64), &opts))?;
                let mut r = r;
                r.name = format!("gg case {k} n={}", case.n);
                rows.push(SummaryRow::from_report(name, &r));
                reports.push(r);
            }
            to_value(&reports)
        }
        SuiteKind::Mixture { n, binning } => {
            let src = source.as_ref().expect("validated");
            let r = with_source!(src, s => mixture_law_check(s, *n, *binning, budget, key, &opts))?;
            for (k, bin) in r.bins.iter().enumerate() {
                let worst = bin.cells.iter().map(|c| c.z_score.abs()).fold(0.0, f64::max);
                let verdict = if bin.empty {
                    Verdict::NotApplicable
                } else if bin.count < r.min_count {
                    Verdict::Report
                } else {
                    assert_or_report(r.asserted, worst < opts.threshold)
                };
                rows.push(row(name, format!("mixture bin {k} {:?}", bin.pattern), r.n, bin.tv, 0.0, bin.tv_std_error, worst, verdict));
            }
            to_value(&r)
        }
        SuiteKind::Invariance { phi, fs, t_grid, h, mu } => {
            let src = source.as_ref().expect("validated");
            let fam = BoundedFunctionFamily::new(fs.clone())?;
            let iopts = InvarianceOptions { test: opts, mu: mu.clone(), h: h.unwrap_or(d.h) };
            let r = with_source!(src, s => invariance_test(phi, &fam, s, t_grid, budget, key, &iopts))?;
            for t in &r.per_t {
                rows.push(SummaryRow::from_report(name, t));
            }
            rows.push(SummaryRow::from_report(name, &r.derivative));
            let mut text = String::from("# t estimate se\n");
            if let Some(first) = r.per_t.first() {
                text.push_str(&format!("0 {} {}\n", first.rhs.mean, first.rhs.std_error));
            }
            for p in &r.curve {
                text.push_str(&format!("{} {} {}\n", p.t, p.estimate.mean, p.estimate.std_error));
            }
            plots.push((format!("{name}_phi.dat"), text));
            to_value(&r)
        }
        SuiteKind::Theorem2 { partition, varphi, fs, mu } => {
            let src = source.as_ref().expect("validated");
            let fam = BoundedFunctionFamily::new(fs.clone())?;
            let iopts = InvarianceOptions { test: opts, mu: mu.clone(), h: d.h };
            let r = with_source!(src, s => theorem2_test(s, partition, varphi, &fam, budget, key, &iopts))?;
            rows.push(SummaryRow::from_report(name, &r));
            to_value(&r)
        }
        SuiteKind::Ultrametric { n, tree_n } => {
            let src = source.as_ref().expect("validated");
            let (stat, census, trees, reference) = with_source!(src, s => {
                let stat = ultrametricity_stat(s, budget, key.child(0))?;
                let (mats, emb) = sample_overlaps(s, *n, budget, key.child(1))?;
                let census = census_of_samples(&mats, Some(&emb), d.epsilon)?;
                let (tree_mats, _) = sample_overlaps(s, *tree_n, Budget::new(budget.realizations.min(50), 1), key.child(2))?;
                let mut worst = 0.0f64;
                let mut newick = Vec::new();
                for (k, m) in tree_mats.iter().enumerate() {
                    let t = build_ultrametric_tree(m, d.epsilon)?;
                    worst = worst.max(t.reconstruction_error(m)?);
                    if k < 3 {
                        newick.push(t.newick());
                    }
                }
                (stat, census, (worst, newick, tree_mats.len()), s.is_gg_reference())
            });
            rows.push(row(
                name,
                "ultrametricity statistic",
                3,
                stat.estimate.mean,
                1.0,
                stat.estimate.std_error,
                stat.estimate.z_against(1.0),
                assert_or_report(reference, stat.violations == 0),
            ));
            rows.push(row(
                name,
                "census violating triples",
                *n,
                census.violating as f64,
                0.0,
                0.0,
                0.0,
                assert_or_report(reference, census.violating == 0),
            ));
            rows.push(row(
                name,
                "tree reconstruction error",
                *tree_n,
                trees.0,
                0.0,
                0.0,
                0.0,
                assert_or_report(reference, trees.0 < 1e-9),
            ));
            let mut text = String::from("# margin_lo margin_hi count\n");
            for (lo, hi, c) in census.histogram_rows() {
                text.push_str(&format!("{lo} {hi} {c}\n"));
            }
            plots.push((format!("{name}_census.dat"), text));
            serde_json::json!({
                "statistic": stat,
                "census": census,
                "tree": { "max_reconstruction_error": trees.0, "samples": trees.2, "newick": trees.1 },
            })
        }
        SuiteKind::Extension { n, off_diagonal, entries } => {
            let src = source.as_ref().expect("validated");
            let q = with_source!(src, s => s.q_star());
            let a = match (off_diagonal, entries) {
                (Some(x), None) => ConstraintMatrix::uniform(*n, q, d.epsilon, *x)?,
                (None, Some(e)) => ConstraintMatrix::new_relaxed(*n, q, d.epsilon, e.clone())?,
                _ => return Err(crate::Error::InvalidInput(format!("suite `{name}` needs exactly one of off_diagonal, entries"))),
            };
            let r = with_source!(src, s => extension_probe(s, &a, budget, key, d.significance))?;
            let z = crate::estimate::z_score(r.event.mean, r.event.std_error);
            rows.push(row(name, "extension event", *n, r.event.mean, 0.0, r.event.std_error, z, r.verdict));
            to_value(&r)
        }
        SuiteKind::Barycenter { cases, random, contradiction, max_m } => {
            let mut reports = Vec::new();
            for (k, c) in cases.iter().enumerate() {
                match barycenter_on_pattern(c.m, c.q_star, c.a, c.b, c.c) {
                    Ok(r) => {
                        let v = if r.all_hold() { Verdict::Pass } else { Verdict::Fail };
                        rows.push(row(name, format!("barycenter case {k} m={}", c.m), c.m, r.gap, r.gap_bound, 0.0, 0.0, v));
                        reports.push(serde_json::json!({ "case": k, "report": r }));
                    }
                    Err(e) => {
                        rows.push(row(name, format!("barycenter case {k} m={} (not PSD)", c.m), c.m, f64::NAN, f64::NAN, 0.0, 0.0, Verdict::NotApplicable));
                        reports.push(serde_json::json!({ "case": k, "error": e.to_string() }));
                    }
                }
            }
            let mut rng = key.child(0).stream();
            let mut checked = 0usize;
            let mut held = 0usize;
            let mut attempts = 0usize;
            while checked < *random && attempts < 1000 * random.max(&1) {
                attempts += 1;
                let q: f64 = rng.random_range(0.2..1.0);
                let mut v = [rng.random_range(-q..q), rng.random_range(-q..q), rng.random_range(-q..q)];
                v.sort_by(f64::total_cmp);
                let (a, b, c) = (v[0], v[1], v[2]);
                let m = rng.random_range(1..=12);
                if !(a < b && b <= c && c < q) {
                    continue;
                }
                if let Ok(r) = barycenter_on_pattern(m, q, a, b, c) {
                    checked += 1;
                    held += usize::from(r.all_hold());
                }
            }
            if *random > 0 {
                let v = if held == checked && checked == *random { Verdict::Pass } else { Verdict::Fail };
                rows.push(row(name, "barycenter random PSD tuples", 0, held as f64, checked as f64, 0.0, 0.0, v));
            }
            let mut found = None;
            if let Some([a, b, c, q]) = contradiction {
                found = smallest_failing_m(*q, *a, *b, *c, *max_m);
                let v = if a < b { if found.is_some() { Verdict::Pass } else { Verdict::Fail } } else { Verdict::Report };
                rows.push(row(name, "pattern Gram fails PSD", found.unwrap_or(0), found.map_or(f64::NAN, |m| m as f64), *max_m as f64, 0.0, 0.0, v));
            }
            serde_json::json!({ "cases": reports, "random": { "requested": random, "checked": checked, "held": held }, "smallest_failing_m": found })
        }
    };
    Ok(SuiteReport {
        suite: name.to_string(),
        kind: suite.kind.name().to_string(),
        source: suite.source.clone(),
        seed: key.value(),
        budget,
        rows,
        details,
        plots,
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["suite", "test", "n", "lhs", "rhs", "se", "z", "verdict"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.suite.clone(),
            r.test.clone(),
            r.n.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.se.to_string(),
            r.z.to_string(),
            r.verdict.as_str().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] super::config::ConfigError),
    #[error("suite `{suite}`: {source}")]
    Suite { suite: String, source: crate::Error },
    #[error("invalid option: {0}")]
    Options(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Process exit code: configuration problems are usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Options(_) | RunError::Suite { .. } => 2,
            RunError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Runs every suite of a config file and writes reports, plot data,
/// `summary.csv` and `manifest.json` under the output directory.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let start = Instant::now();
    let text = std::fs::read(config_path).map_err(io_err(config_path))?;
    let cfg = super::config::parse_config(&String::from_utf8_lossy(&text), config_path)?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    let scale = opts.budget_scale.unwrap_or(cfg.defaults.budget_scale);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RunError::Options("budget scale must be positive".into()));
    }
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let jobs = opts.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Options(format!("thread pool: {e}")))?;
    let results: Vec<Result<SuiteReport, RunError>> = pool.install(|| {
        cfg.suites
            .par_iter()
            .map(|s| run_suite(&cfg, s, seed, scale).map_err(|e| RunError::Suite { suite: s.name.clone(), source: e }))
            .collect()
    });
    let reports: Vec<SuiteReport> = results.into_iter().collect::<Result<_, _>>()?;

    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for r in &reports {
        let rel = PathBuf::from("reports").join(format!("{}.json", r.suite));
        let path = out.join(&rel);
        let json = serde_json::to_vec_pretty(r).expect("reports serialize");
        write_atomic(&path, &json).map_err(io_err(&path))?;
        for (file, body) in &r.plots {
            let p = out.join("plots").join(file);
            write_atomic(&p, body.as_bytes()).map_err(io_err(&p))?;
        }
        entries.push(ReportEntry { suite: r.suite.clone(), path: rel, pass: !r.failed() });
        rows.extend(r.rows.iter().cloned());
    }
    let summary = PathBuf::from("summary.csv");
    let sp = out.join(&summary);
    write_atomic(&sp, summary_csv(&rows).as_bytes()).map_err(io_err(&sp))?;

    let mut hasher = Sha256::new();
    hasher.update(&text);
    let failing: Vec<String> = reports.iter().filter(|r| r.failed()).map(|r| r.suite.clone()).collect();
    let manifest = RunManifest {
        config_hash: format!("{:x}", hasher.finalize()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        budget_scale: scale,
        reports: entries,
        summary,
        pass: failing.is_empty(),
        failing_suites: failing,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    let mp = out.join("manifest.json");
    write_atomic(&mp, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&mp))?;
    Ok(manifest)
}
