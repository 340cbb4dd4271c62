//! Reweighting invariance: the exponents `F`, `F_l`, the functional `phi(t)`,
//! partition weights `W` and their reweighting maps `T`, `T_t`.
//!
//! For replicas `s^1..s^n` and a new configuration `s`,
//! `F(s) = sum_l f_l(s . s^l)` and, for `l <= n`,
//! `F_l = F(s^l) - f_l(s^l . s^l) + E<f_l(R_{1,2})>`.
//! All inner averages `<exp tF>_` are log-sum-exp normalized by total mass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{bootstrap_std, resampled_mean, Estimate, RunningMean};
use crate::functions::{MatrixFn, OverlapFn, WeightedFn};
use crate::identity::{check_bootstrap_budget, over_realizations, pair_mean, ReportMetadata, TestOptions, TestReport};
use crate::measure::{groups_or_sampled, overlaps_of, sample_points, Budget, Group, MeasureSource, Realization};
use crate::overlap::OverlapMatrix;
use crate::seed::SeedKey;

/// Tolerance on the total of a weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-10;

/// `f_1..f_n`, one per replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundedFunctionFamily {
    pub fs: Vec<OverlapFn>,
}

impl BoundedFunctionFamily {
    pub fn new(fs: Vec<OverlapFn>) -> Result<Self> {
        let fam = BoundedFunctionFamily { fs };
        fam.validate()?;
        Ok(fam)
    }

    pub fn zeros(n: usize) -> Self {
        BoundedFunctionFamily { fs: vec![OverlapFn::zero(); n] }
    }

    pub fn n(&self) -> usize {
        self.fs.len()
    }

    /// `L = max_l sup |f_l|` on `[-q*, q*]`.
    pub fn bound(&self, q_star: f64) -> f64 {
        self.fs.iter().map(|f| f.bound(q_star)).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs.is_empty() {
            return invalid("function family needs n >= 1");
        }
        self.fs.iter().try_for_each(OverlapFn::validate)
    }
}

/// `F = sum_l f_l(overlaps[l])`.
pub fn eval_f(fs: &BoundedFunctionFamily, overlaps: &[f64]) -> Result<f64> {
    if overlaps.len() != fs.n() {
        return Err(Error::DimensionMismatch { expected: fs.n(), found: overlaps.len() });
    }
    Ok(f_sum(fs, overlaps))
}

#[inline]
fn f_sum(fs: &BoundedFunctionFamily, overlaps: &[f64]) -> f64 {
    fs.fs.iter().zip(overlaps).map(|(f, &x)| f.eval(x)).sum()
}

/// `F_l` for 1-based `l`, with `mu[l-1] = E<f_l(R_{1,2})>`; equal to `F` for `l > n`.
pub fn eval_f_l(fs: &BoundedFunctionFamily, overlaps: &[f64], l: usize, mu: &[f64]) -> Result<f64> {
    if l == 0 {
        return invalid("F_l is indexed from l = 1");
    }
    if mu.len() != fs.n() {
        return Err(Error::DimensionMismatch { expected: fs.n(), found: mu.len() });
    }
    let f = eval_f(fs, overlaps)?;
    if l > fs.n() {
        return Ok(f);
    }
    Ok(f + (mu[l - 1] - fs.fs[l - 1].eval(overlaps[l - 1])))
}

/// Where `E<f_l(R_{1,2})>` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MuMode {
    /// Independent block of realizations (bootstrapped with the rest).
    #[default]
    Estimated,
    /// Known values, e.g. from an exact overlap law.
    Given { values: Vec<f64> },
}

struct MuBlock {
    /// Per-realization values, `rows[r][l]`; empty when given.
    rows: Vec<Vec<f64>>,
    point: Vec<f64>,
}

impl MuBlock {
    fn resampled(&self, idx: &[usize]) -> Vec<f64> {
        if self.rows.is_empty() {
            return self.point.clone();
        }
        (0..self.rows[0].len())
            .map(|l| {
                let mut m = RunningMean::default();
                for &r in idx {
                    m.push(self.rows[r][l]);
                }
                m.mean()
            })
            .collect()
    }

    /// `sum_l (mu*_l - mu_l)`, the shift of every `F_l` under a resample.
    fn shift(&self, idx: &[usize]) -> f64 {
        self.resampled(idx).iter().zip(&self.point).map(|(a, b)| a - b).sum()
    }
}

fn mu_block<S: MeasureSource>(source: &S, fs: &BoundedFunctionFamily, mode: &MuMode, budget: Budget, key: SeedKey) -> Result<MuBlock> {
    match mode {
        MuMode::Given { values } => {
            if values.len() != fs.n() {
                return Err(Error::DimensionMismatch { expected: fs.n(), found: values.len() });
            }
            Ok(MuBlock { rows: Vec::new(), point: values.clone() })
        }
        MuMode::Estimated => {
            let rows: Vec<Vec<f64>> = over_realizations(source, key, budget.realizations, |real, rng| {
                fs.fs.iter().map(|f| pair_mean(real, &|x| f.eval(x), budget.tuples, rng)).collect()
            });
            let all: Vec<usize> = (0..rows.len()).collect();
            let mut block = MuBlock { rows, point: Vec::new() };
            block.point = block.resampled(&all);
            Ok(block)
        }
    }
}

/// Per-tuple ingredients of the reweighting ratio.
struct Ratio {
    /// `F_l` at `t = 1`, for `l = 1..n`.
    f_l: Vec<f64>,
    /// `(mass, F)` for each inner group.
    groups: Vec<(f64, f64)>,
}

impl Ratio {
    fn new(fs: &BoundedFunctionFamily, mu: &[f64], r: &OverlapMatrix, groups: &[Group]) -> Self {
        let n = fs.n();
        let f_l = (0..n)
            .map(|l| {
                let row: Vec<f64> = (0..n).map(|k| r.get(l, k)).collect();
                f_sum(fs, &row) + (mu[l] - fs.fs[l].eval(r.get(l, l)))
            })
            .collect();
        let groups = groups.iter().map(|g| (g.mass, f_sum(fs, &g.overlaps))).collect();
        Ratio { f_l, groups }
    }

    /// `log <exp tF>_`, normalized by total mass.
    fn log_inner(&self, t: f64) -> f64 {
        log_mean_exp(self.groups.iter().map(|&(m, f)| (m, t * f)))
    }

    /// `sum_l (t F_l - log <exp tF>_)`.
    fn log_ratio(&self, t: f64) -> f64 {
        let lz = self.log_inner(t);
        self.f_l.iter().map(|f| t * f - lz).sum()
    }
}

/// `log( sum m_i exp(x_i) / sum m_i )`.
fn log_mean_exp(items: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let top = items.clone().filter(|(m, _)| *m > 0.0).map(|(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    let mut total = 0.0;
    for (m, x) in items {
        if m > 0.0 {
            s += m * (x - top).exp();
            total += m;
        }
    }
    top + (s / total).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOptions {
    #[serde(flatten)]
    pub test: TestOptions,
    #[serde(default)]
    pub mu: MuMode,
    /// Step of the finite-difference derivative at `t = 0`.
    #[serde(default = "default_h")]
    pub h: f64,
}

fn default_h() -> f64 {
    0.1
}

impl Default for InvarianceOptions {
    fn default() -> Self {
        InvarianceOptions { test: TestOptions::default(), mu: MuMode::default(), h: default_h() }
    }
}

/// Per-realization ratio averages `v_r(t)` on a grid, plus whether inner
/// averages were exact everywhere.
struct PhiRows {
    values: Vec<Vec<f64>>,
    exact: bool,
}

fn phi_rows<S: MeasureSource>(
    source: &S,
    phi: &MatrixFn,
    fs: &BoundedFunctionFamily,
    mu: &[f64],
    grid: &[f64],
    budget: Budget,
    inner_m: usize,
    key: SeedKey,
) -> PhiRows {
    let n = fs.n();
    let rows: Vec<(Vec<f64>, bool)> = over_realizations(source, key, budget.realizations, |real, rng| {
        let mut acc = vec![RunningMean::default(); grid.len()];
        let mut exact = true;
        let mut inner = SeedKey::new(rng.random()).stream();
        for _ in 0..budget.tuples {
            let pts = sample_points(real, n, rng);
            let r = overlaps_of(real, &pts);
            let (groups, ex) = groups_or_sampled(real, &pts, inner_m, &mut inner);
            exact &= ex;
            let ratio = Ratio::new(fs, mu, &r, &groups);
            let p = phi.eval(&r);
            for (a, &t) in acc.iter_mut().zip(grid) {
                a.push(p * ratio.log_ratio(t).exp());
            }
        }
        (acc.iter().map(RunningMean::mean).collect(), exact)
    });
    let exact = rows.iter().all(|r| r.1);
    PhiRows { values: rows.into_iter().map(|r| r.0).collect(), exact }
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

fn check_phi_inputs(phi: &MatrixFn, fs: &BoundedFunctionFamily, budget: &Budget, opts: &InvarianceOptions) -> Result<()> {
    fs.validate()?;
    phi.validate(fs.n())?;
    check_bootstrap_budget(budget)?;
    opts.test.validate()?;
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return invalid("derivative step h must be positive");
    }
    Ok(())
}

const RATIO_BIAS_NOTE: &str = "inner averages sampled; ratio bias of order 1/inner_m";

/// Estimate of `phi(t) = E< Phi exp(sum_l t F_l) / <exp tF>_^n >`.
pub fn phi_estimate<S: MeasureSource>(
    t: f64,
    phi: &MatrixFn,
    fs: &BoundedFunctionFamily,
    source: &S,
    budget: Budget,
    key: SeedKey,
    opts: &InvarianceOptions,
) -> Result<Estimate> {
    if !(t >= 0.0 && t.is_finite()) {
        return invalid("t must be finite and non-negative");
    }
    check_phi_inputs(phi, fs, &budget, opts)?;
    let mu = mu_block(source, fs, &opts.mu, budget, key.child(1))?;
    let rows = phi_rows(source, phi, fs, &mu.point, &[t], budget, opts.test.inner_m, key.child(0));
    let v = column(&rows.values, 0);
    let stat = |ia: &[usize], im: &[usize]| (t * mu.shift(im)).exp() * resampled_mean(&v, ia);
    let all: Vec<usize> = (0..v.len()).collect();
    let mean = resampled_mean(&v, &all);
    let se = bootstrap_std(opts.test.bootstrap, &[v.len(), v.len()], key.child(2), |idx| stat(&idx[0], &idx[1]));
    Ok(Estimate::new(mean, se, v.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// `phi(t)` against `phi(0)`, one per grid point.
    pub per_t: Vec<TestReport>,
    /// `(phi(h) - phi(0)) / h` against 0.
    pub derivative: TestReport,
    pub curve: Vec<CurvePoint>,
    pub inner_exact: bool,
}

/// Compares `phi(t)` with `phi(0)` on common tuples at every grid point and
/// reports the finite-difference derivative at 0.
pub fn invariance_test<S: MeasureSource>(
    phi: &MatrixFn,
    fs: &BoundedFunctionFamily,
    source: &S,
    t_grid: &[f64],
    budget: Budget,
    key: SeedKey,
    opts: &InvarianceOptions,
) -> Result<InvarianceReport> {
    check_phi_inputs(phi, fs, &budget, opts)?;
    if t_grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return invalid("t grid values must be finite and non-negative");
    }
    let mu = mu_block(source, fs, &opts.mu, budget, key.child(1))?;
    let mut grid = vec![0.0, opts.h];
    grid.extend_from_slice(t_grid);
    let rows = phi_rows(source, phi, fs, &mu.point, &grid, budget, opts.test.inner_m, key.child(0));
    let m = budget.realizations;
    let cols: Vec<Vec<f64>> = (0..grid.len()).map(|k| column(&rows.values, k)).collect();
    let all: Vec<usize> = (0..m).collect();
    let phi_at = |k: usize, ia: &[usize], im: &[usize]| (grid[k] * mu.shift(im)).exp() * resampled_mean(&cols[k], ia);
    let boot = key.child(2);
    let blocks = [m, m];
    let se = |stat: &dyn Fn(&[usize], &[usize]) -> f64| bootstrap_std(opts.test.bootstrap, &blocks, boot, |idx| stat(&idx[0], &idx[1]));

    let mut notes = Vec::new();
    if !rows.exact {
        notes.push(format!("{RATIO_BIAS_NOTE} = {}", opts.test.inner_m));
    }
    let meta = |name: &str| ReportMetadata {
        n: fs.n(),
        budget,
        seed: key.value(),
        source: source.describe(),
        notes: {
            let mut v = notes.clone();
            v.push(name.to_string());
            v
        },
    };
    let asserted = source.is_gg_reference();
    let phi0 = Estimate::new(phi_at(0, &all, &all), se(&|a, b| phi_at(0, a, b)), m);
    let curve: Vec<CurvePoint> = (2..grid.len())
        .map(|k| CurvePoint { t: grid[k], estimate: Estimate::new(phi_at(k, &all, &all), se(&|a, b| phi_at(k, a, b)), m) })
        .collect();
    let per_t = (2..grid.len())
        .map(|k| {
            let diff = |a: &[usize], b: &[usize]| phi_at(k, a, b) - phi_at(0, a, b);
            TestReport::build(
                format!("invariance t={}", grid[k]),
                curve[k - 2].estimate,
                phi0,
                Estimate::new(diff(&all, &all), se(&diff), m),
                opts.test.threshold,
                asserted,
                meta(&format!("t = {}", grid[k])),
            )
        })
        .collect();
    let h = opts.h;
    let deriv = |a: &[usize], b: &[usize]| (phi_at(1, a, b) - phi_at(0, a, b)) / h;
    let derivative = TestReport::build(
        "invariance derivative",
        Estimate::new(deriv(&all, &all), se(&deriv), m),
        Estimate::exact(0.0),
        Estimate::new(deriv(&all, &all), se(&deriv), m),
        opts.test.threshold,
        asserted,
        meta(&format!("finite difference, h = {h}")),
    );
    Ok(InvarianceReport { per_t, derivative, curve, inner_exact: rows.exact })
}

/// Threshold cells on the overlap with one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAxis {
    /// 1-based replica index.
    pub replica: usize,
    /// Cut points; sorted descending internally.
    pub thresholds: Vec<f64>,
}

/// Product partition of the space by threshold cells on each axis. On an axis
/// with cuts `c_1 > c_2 > ...`, bucket 0 is `{x >= c_1}`, bucket `k` is
/// `{c_{k+1} <= x < c_k}` and the last is `{x < c_last}`. No axes means a
/// single cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PartitionSpec {
    #[serde(default)]
    pub axes: Vec<PartitionAxis>,
}

impl PartitionSpec {
    pub fn whole() -> Self {
        PartitionSpec { axes: Vec::new() }
    }

    /// `B_1 = {s . s^replica >= c}` and its complement.
    pub fn threshold(replica: usize, c: f64) -> Self {
        PartitionSpec { axes: vec![PartitionAxis { replica, thresholds: vec![c] }] }
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.thresholds.len() + 1).product()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for a in &self.axes {
            if a.replica == 0 || a.replica > n {
                return invalid(format!("partition axis references replica {} of {n}", a.replica));
            }
            if a.thresholds.iter().any(|c| !c.is_finite()) {
                return invalid("partition thresholds must be finite");
            }
        }
        Ok(())
    }

    /// Cell of a configuration with overlaps `overlaps[l]` with replica `l + 1`.
    pub fn cell(&self, overlaps: &[f64]) -> usize {
        let mut idx = 0;
        for a in &self.axes {
            let mut cuts = a.thresholds.clone();
            cuts.sort_by(|x, y| y.total_cmp(x));
            let x = overlaps[a.replica - 1];
            let bucket = cuts.iter().take_while(|&&c| x < c).count();
            idx = idx * (cuts.len() + 1) + bucket;
        }
        idx
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return invalid("weights must lie in [0, 1]");
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return invalid(format!("weights sum to {s}, not 1"));
    }
    Ok(())
}

/// `W_alpha = G(B_alpha)` from an exact group decomposition.
pub fn partition_weights<R: Realization>(real: &mut R, replicas: &[R::Point], partition: &PartitionSpec) -> Result<Vec<f64>> {
    partition.validate(replicas.len())?;
    let groups = real
        .groups(replicas)
        .ok_or_else(|| Error::Unsupported("partition weights need an atomic realization".into()))?;
    Ok(weights_from_groups(&groups, partition))
}

fn weights_from_groups(groups: &[Group], partition: &PartitionSpec) -> Vec<f64> {
    let mut w = vec![0.0; partition.cells()];
    for g in groups {
        w[partition.cell(&g.overlaps)] += g.mass;
    }
    w
}

/// `Delta_t(W) = W_1 e^t + 1 - W_1`, evaluated as `1 + W_1 (e^t - 1)`.
pub fn delta_t(w1: f64, t: f64) -> f64 {
    1.0 + w1 * t.exp_m1()
}

/// Two-cell map `T_t(W) = (W_1 e^t / Delta, (1 - W_1) / Delta)`, with `Delta`.
pub fn t_map(w: &[f64], t: f64) -> Result<([f64; 2], f64)> {
    if w.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: w.len() });
    }
    check_weights(w)?;
    if !t.is_finite() {
        return invalid("t must be finite");
    }
    let d = delta_t(w[0], t);
    Ok(([w[0] * t.exp() / d, (1.0 - w[0]) / d], d))
}

/// `T(W)_alpha = <I_{B_alpha} e^F>_ / <e^F>_` over cells, from items
/// `(cell, mass, F)`.
pub fn general_t(cells: usize, items: &[(usize, f64, f64)]) -> Result<Vec<f64>> {
    if items.iter().any(|&(c, m, f)| c >= cells || !(m >= 0.0) || !f.is_finite()) {
        return invalid("items need a valid cell, non-negative mass and finite exponent");
    }
    let top = items.iter().filter(|i| i.1 > 0.0).map(|i| i.2).fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return invalid("no positive mass");
    }
    let mut w = vec![0.0; cells];
    let mut total = 0.0;
    for &(c, m, f) in items {
        if m > 0.0 {
            let x = m * (f - top).exp();
            w[c] += x;
            total += x;
        }
    }
    for x in &mut w {
        *x /= total;
    }
    Ok(w)
}

/// Tests `E<phi(R^n, W)> = E< phi(R^n, T(W)) exp(sum_l F_l) / <exp F>_^n >`.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_test<S: MeasureSource>(
    source: &S,
    partition: &PartitionSpec,
    varphi: &WeightedFn,
    fs: &BoundedFunctionFamily,
    budget: Budget,
    key: SeedKey,
    opts: &InvarianceOptions,
) -> Result<TestReport> {
    let n = fs.n();
    fs.validate()?;
    partition.validate(n)?;
    varphi.validate(n, partition.cells())?;
    check_bootstrap_budget(&budget)?;
    opts.test.validate()?;
    let mu = mu_block(source, fs, &opts.mu, budget, key.child(1))?;
    let cells = partition.cells();
    let rows: Vec<(f64, f64, bool)> = over_realizations(source, key.child(0), budget.realizations, |real, rng| {
        let mut lhs = RunningMean::default();
        let mut rhs = RunningMean::default();
        let mut exact = true;
        let mut inner = SeedKey::new(rng.random()).stream();
        for _ in 0..budget.tuples {
            let pts = sample_points(real, n, rng);
            let r = overlaps_of(real, &pts);
            let (groups, ex) = groups_or_sampled(real, &pts, opts.test.inner_m, &mut inner);
            exact &= ex;
            let w = weights_from_groups(&groups, partition);
            let ratio = Ratio::new(fs, &mu.point, &r, &groups);
            let items: Vec<(usize, f64, f64)> =
                groups.iter().zip(&ratio.groups).map(|(g, &(m, f))| (partition.cell(&g.overlaps), m, f)).collect();
            let tw = general_t(cells, &items).expect("groups carry positive mass");
            lhs.push(varphi.eval(&r, &w));
            rhs.push(varphi.eval(&r, &tw) * ratio.log_ratio(1.0).exp());
        }
        (lhs.mean(), rhs.mean(), exact)
    });
    let exact = rows.iter().all(|r| r.2);
    let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let m = budget.realizations;
    let all: Vec<usize> = (0..m).collect();
    let lhs_of = |ia: &[usize]| resampled_mean(&a, ia);
    let rhs_of = |ia: &[usize], im: &[usize]| mu.shift(im).exp() * resampled_mean(&b, ia);
    let boot = key.child(2);
    let se = |stat: &dyn Fn(&[usize], &[usize]) -> f64| bootstrap_std(opts.test.bootstrap, &[m, m], boot, |idx| stat(&idx[0], &idx[1]));
    let diff = |ia: &[usize], im: &[usize]| lhs_of(ia) - rhs_of(ia, im);
    let mut notes = Vec::new();
    if !exact {
        notes.push(format!("{RATIO_BIAS_NOTE} = {}", opts.test.inner_m));
    }
    Ok(TestReport::build(
        "theorem2",
        Estimate::new(lhs_of(&all), se(&|a, _| lhs_of(a)), m),
        Estimate::new(rhs_of(&all, &all), se(&rhs_of), m),
        Estimate::new(diff(&all, &all), se(&diff), m),
        opts.test.threshold,
        source.is_gg_reference(),
        ReportMetadata { n, budget, seed: key.value(), source: source.describe(), notes },
    ))
}

/// Plain estimator of `E<Phi>` over the same realizations and tuples that
/// `phi_estimate` uses.
pub fn plain_phi_mean<S: MeasureSource>(phi: &MatrixFn, n: usize, source: &S, budget: Budget, key: SeedKey) -> Result<f64> {
    phi.validate(n)?;
    budget.validate()?;
    let rows: Vec<f64> = over_realizations(source, key.child(0), budget.realizations, |real, rng| {
        let mut acc = RunningMean::default();
        let _inner_seed: u64 = rng.random();
        for _ in 0..budget.tuples {
            let pts = sample_points(real, n, rng);
            acc.push(phi.eval(&overlaps_of(real, &pts)));
        }
        acc.mean()
    });
    let all: Vec<usize> = (0..rows.len()).collect();
    Ok(resampled_mean(&rows, &all))
}
