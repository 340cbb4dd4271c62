//! Monte Carlo tests of the Ghirlanda-Guerra identities and their mixture form.
//!
//! Every test splits its seed into independent blocks of realizations. Block
//! statistics are per-realization averages over replica tuples, and standard
//! errors come from a bootstrap over realizations (the outer expectation).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{bootstrap_std, resampled_mean, z_score, Estimate, RunningMean};
use crate::functions::{MatrixFn, OverlapFn};
use crate::measure::{overlaps_of, sample_points, Budget, MeasureSource, Realization};
use crate::seed::{SeedKey, Stream};

/// Fewest realizations per block for which a bootstrap is attempted.
pub const MIN_BOOTSTRAP_REALIZATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// Pass iff `|z| < threshold`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Inner samples for non-atomic inner averages.
    #[serde(default = "default_inner_m")]
    pub inner_m: usize,
}

fn default_bootstrap() -> usize {
    200
}

fn default_threshold() -> f64 {
    3.0
}

fn default_inner_m() -> usize {
    256
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions { bootstrap: default_bootstrap(), threshold: default_threshold(), inner_m: default_inner_m() }
    }
}

impl TestOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap < 2 {
            return invalid("need at least 2 bootstrap resamples");
        }
        if !(self.threshold > 0.0) {
            return invalid("threshold must be positive");
        }
        if self.inner_m == 0 {
            return invalid("inner_m must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n: usize,
    pub budget: Budget,
    pub seed: u64,
    pub source: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub difference: Estimate,
    pub z_score: f64,
    pub pass: bool,
    /// Whether `pass` is a claim (reference sources) or only recorded.
    pub asserted: bool,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Report,
    NotApplicable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Report => "report",
            Verdict::NotApplicable => "not-applicable",
        }
    }

    /// Only an asserted failure fails a suite.
    pub fn is_failure(&self) -> bool {
        *self == Verdict::Fail
    }
}

impl TestReport {
    /// Builds a report whose difference is given separately from the two
    /// sides, so exact cancellations survive rounding in `lhs - rhs`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        name: impl Into<String>,
        lhs: Estimate,
        rhs: Estimate,
        difference: Estimate,
        threshold: f64,
        asserted: bool,
        metadata: ReportMetadata,
    ) -> Self {
        let z = z_score(difference.mean, difference.std_error);
        TestReport {
            name: name.into(),
            lhs,
            rhs,
            difference,
            z_score: z,
            pass: z.abs() < threshold,
            asserted,
            metadata,
        }
    }

    pub fn verdict(&self) -> Verdict {
        match (self.asserted, self.pass) {
            (false, _) => Verdict::Report,
            (true, true) => Verdict::Pass,
            (true, false) => Verdict::Fail,
        }
    }
}

pub(crate) fn check_bootstrap_budget(budget: &Budget) -> Result<()> {
    budget.validate()?;
    if budget.realizations < MIN_BOOTSTRAP_REALIZATIONS {
        return Err(Error::BudgetTooSmall(format!(
            "{} realizations per block; the bootstrap needs at least {MIN_BOOTSTRAP_REALIZATIONS}",
            budget.realizations
        )));
    }
    Ok(())
}

/// Runs `per` on `count` realizations keyed `block.child(r)` in parallel,
/// returning results in realization order.
pub(crate) fn over_realizations<S, T, F>(source: &S, block: SeedKey, count: usize, per: F) -> Vec<T>
where
    S: MeasureSource,
    T: Send,
    F: Fn(&mut S::Realization, &mut Stream) -> T + Sync,
{
    (0..count)
        .into_par_iter()
        .map(|r| {
            let key = block.child(r as u64);
            let mut real = source.realize(key.child(0));
            let mut rng = key.child(1).stream();
            per(&mut real, &mut rng)
        })
        .collect()
}

/// Per-realization estimate of `<psi(R_{1,2})>`, exact when the realization
/// provides pair averages.
pub(crate) fn pair_mean<R: Realization>(real: &mut R, psi: &dyn Fn(f64) -> f64, tuples: usize, rng: &mut Stream) -> f64 {
    if let Some(v) = real.pair_average(psi) {
        return v;
    }
    let mut m = RunningMean::default();
    for _ in 0..tuples {
        let a = real.sample(rng);
        let b = real.sample(rng);
        m.push(psi(real.overlap(&a, &b)));
    }
    m.mean()
}

struct GgRow {
    a: f64,
    b: f64,
    c: Vec<f64>,
}

/// Tests `E<f psi(R_{1,n+1})> = (1/n) E<f> E<psi(R_{1,2})> + (1/n) sum_{l=2}^n E<f psi(R_{1,l})>`.
///
/// The new replica's inner average is exact when the realization is atomic.
/// `E<psi(R_{1,2})>` comes from an independent block of realizations.
pub fn gg_identity_test<S: MeasureSource>(
    source: &S,
    f: &MatrixFn,
    psi: &OverlapFn,
    n: usize,
    budget: Budget,
    key: SeedKey,
    opts: &TestOptions,
) -> Result<TestReport> {
    if n < 2 {
        return invalid("the identity needs n >= 2");
    }
    check_bootstrap_budget(&budget)?;
    opts.validate()?;
    f.validate(n)?;
    psi.validate()?;

    let rows: Vec<GgRow> = over_realizations(source, key.child(0), budget.realizations, |real, rng| {
        let mut a = RunningMean::default();
        let mut b = RunningMean::default();
        let mut c = vec![RunningMean::default(); n - 1];
        for _ in 0..budget.tuples {
            let pts = sample_points(real, n, rng);
            let r = overlaps_of(real, &pts);
            let fv = f.eval(&r);
            let new = match real.groups(&pts[..1]) {
                Some(groups) => groups.iter().map(|g| g.mass * psi.eval(g.overlaps[0])).sum::<f64>(),
                None => {
                    let s = real.sample(rng);
                    psi.eval(real.overlap(&pts[0], &s))
                }
            };
            a.push(fv * new);
            b.push(fv);
            for (l, cl) in c.iter_mut().enumerate() {
                cl.push(fv * psi.eval(r.get(0, l + 1)));
            }
        }
        GgRow { a: a.mean(), b: b.mean(), c: c.iter().map(RunningMean::mean).collect() }
    });
    let d: Vec<f64> = over_realizations(source, key.child(1), budget.realizations, |real, rng| {
        pair_mean(real, &|x| psi.eval(x), budget.tuples, rng)
    });

    let a: Vec<f64> = rows.iter().map(|r| r.a).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.b).collect();
    let c: Vec<Vec<f64>> = (0..n - 1).map(|l| rows.iter().map(|r| r.c[l]).collect()).collect();
    let nf = n as f64;

    let sides = |ia: &[usize], id: &[usize]| {
        let am = resampled_mean(&a, ia);
        let bm = resampled_mean(&b, ia);
        let dm = resampled_mean(&d, id);
        let cm: Vec<f64> = c.iter().map(|cl| resampled_mean(cl, ia)).collect();
        let rhs = (bm * dm + cm.iter().sum::<f64>()) / nf;
        let diff = ((am - bm * dm) + cm.iter().map(|x| am - x).sum::<f64>()) / nf;
        (am, rhs, diff)
    };
    let all: Vec<usize> = (0..budget.realizations).collect();
    let (lhs, rhs, diff) = sides(&all, &all);
    let blocks = [budget.realizations, budget.realizations];
    let boot = key.child(2);
    let se = |pick: fn((f64, f64, f64)) -> f64| bootstrap_std(opts.bootstrap, &blocks, boot, |idx| pick(sides(&idx[0], &idx[1])));
    let m = budget.realizations;
    let report = TestReport::build(
        "gg",
        Estimate::new(lhs, se(|s| s.0), m),
        Estimate::new(rhs, se(|s| s.1), 2 * m),
        Estimate::new(diff, se(|s| s.2), 2 * m),
        opts.threshold,
        source.is_gg_reference(),
        ReportMetadata { n, budget, seed: key.value(), source: source.describe(), notes: Vec::new() },
    );
    Ok(report)
}

/// How values of `R^n` and of the new overlap are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Binning {
    /// Exact overlap values (atomic sources with finitely many levels).
    Exact,
    /// `count` equal bins on `[-q*, q*]`.
    Uniform { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureCell {
    pub value: f64,
    pub conditional: f64,
    pub mixture: f64,
    pub std_error: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureBin {
    /// Representative off-diagonal values of `R^n`, row-major upper triangle.
    pub pattern: Vec<f64>,
    pub count: usize,
    pub cells: Vec<MixtureCell>,
    pub tv: f64,
    pub tv_std_error: f64,
    pub empty: bool,
}

impl MixtureBin {
    pub fn cell_at(&self, value: f64) -> Option<&MixtureCell> {
        self.cells.iter().find(|c| c.value == value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub n: usize,
    pub binning: Binning,
    pub bins: Vec<MixtureBin>,
    /// Bins with fewer tuples than this are reported but not tested.
    pub min_count: usize,
    pub pass: bool,
    pub asserted: bool,
    pub metadata: ReportMetadata,
}

impl MixtureReport {
    /// Bin whose pattern equals `pattern` exactly.
    pub fn bin(&self, pattern: &[f64]) -> Option<&MixtureBin> {
        self.bins.iter().find(|b| b.pattern == pattern)
    }

    pub fn verdict(&self) -> Verdict {
        match (self.asserted, self.pass) {
            (false, _) => Verdict::Report,
            (true, true) => Verdict::Pass,
            (true, false) => Verdict::Fail,
        }
    }
}

/// Raw overlaps of one tuple: `R^n` off-diagonals, `R_{1,n+1}`, `R_{1,l}` for `l = 2..n`.
struct TupleRaw {
    pattern: Vec<f64>,
    new: f64,
}

struct Grid {
    values: Vec<f64>,
    binning: Binning,
    q_star: f64,
}

impl Grid {
    fn new(binning: Binning, q_star: f64, observed: impl Iterator<Item = f64>) -> Self {
        let values = match binning {
            Binning::Exact => {
                let mut v: Vec<f64> = observed.collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
            Binning::Uniform { count } => {
                let w = 2.0 * q_star / count as f64;
                (0..count).map(|k| -q_star + (k as f64 + 0.5) * w).collect()
            }
        };
        Grid { values, binning, q_star }
    }

    fn index(&self, x: f64) -> usize {
        match self.binning {
            Binning::Exact => self.values.binary_search_by(|v| v.total_cmp(&x)).expect("observed value"),
            Binning::Uniform { count } => {
                let u = (x + self.q_star) / (2.0 * self.q_star) * count as f64;
                (u.floor().max(0.0) as usize).min(count - 1)
            }
        }
    }
}

/// Compares the conditional law of `R_{1,n+1}` given the binned `R^n` with
/// the mixture `(1/n) mu + (1/n) sum_{l=2}^n delta_{R_{1,l}}`, where `mu` is
/// estimated from an independent block.
pub fn mixture_law_check<S: MeasureSource>(
    source: &S,
    n: usize,
    binning: Binning,
    budget: Budget,
    key: SeedKey,
    opts: &TestOptions,
) -> Result<MixtureReport> {
    if n < 2 {
        return invalid("the mixture law needs n >= 2");
    }
    if let Binning::Uniform { count } = binning {
        if count == 0 {
            return invalid("need at least one bin");
        }
    }
    check_bootstrap_budget(&budget)?;
    opts.validate()?;
    let q_star = source.q_star();

    let main: Vec<Vec<TupleRaw>> = over_realizations(source, key.child(0), budget.realizations, |real, rng| {
        (0..budget.tuples)
            .map(|_| {
                let pts = sample_points(real, n + 1, rng);
                let r = overlaps_of(real, &pts);
                let mut pattern = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in (i + 1)..n {
                        pattern.push(r.get(i, j));
                    }
                }
                TupleRaw { pattern, new: r.get(0, n) }
            })
            .collect()
    });
    let mu_raw: Vec<Vec<f64>> = over_realizations(source, key.child(1), budget.realizations, |real, rng| {
        (0..budget.tuples)
            .map(|_| {
                let a = real.sample(rng);
                let b = real.sample(rng);
                real.overlap(&a, &b)
            })
            .collect()
    });

    let observed = main
        .iter()
        .flatten()
        .flat_map(|t| t.pattern.iter().copied().chain(std::iter::once(t.new)))
        .chain(mu_raw.iter().flatten().copied());
    let grid = Grid::new(binning, q_star, observed);
    let nv = grid.values.len();

    // Bin keys over all observed patterns, in sorted order.
    let mut bin_of: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let main_idx: Vec<Vec<(Vec<usize>, usize)>> = main
        .iter()
        .map(|ts| ts.iter().map(|t| (t.pattern.iter().map(|&x| grid.index(x)).collect(), grid.index(t.new))).collect())
        .collect();
    for (p, _) in main_idx.iter().flatten() {
        bin_of.entry(p.clone()).or_insert(0);
    }
    for (k, v) in bin_of.values_mut().enumerate() {
        *v = k;
    }
    let nb = bin_of.len();
    // Positions of R_{1,l}, l = 2..n, in the upper-triangle pattern: the first row.
    let rows: Vec<Vec<(usize, usize, Vec<usize>)>> = main_idx
        .iter()
        .map(|ts| ts.iter().map(|(p, new)| (bin_of[p], *new, p[..n - 1].to_vec())).collect())
        .collect();
    let mu_idx: Vec<Vec<usize>> = mu_raw.iter().map(|xs| xs.iter().map(|&x| grid.index(x)).collect()).collect();

    // Per-bin conditional and mixture laws from resampled realizations.
    let tables = |ia: &[usize], im: &[usize]| {
        let mut mu = vec![0.0; nv];
        let mut mu_total = 0.0;
        for &r in im {
            for &v in &mu_idx[r] {
                mu[v] += 1.0;
                mu_total += 1.0;
            }
        }
        let mut count = vec![0.0; nb];
        let mut cond = vec![vec![0.0; nv]; nb];
        let mut prior = vec![vec![0.0; nv]; nb];
        for &r in ia {
            for (b, new, firsts) in &rows[r] {
                count[*b] += 1.0;
                cond[*b][*new] += 1.0;
                for &v in firsts {
                    prior[*b][v] += 1.0;
                }
            }
        }
        let nf = n as f64;
        (0..nb)
            .map(|b| {
                (0..nv)
                    .map(|v| {
                        if count[b] == 0.0 {
                            (f64::NAN, f64::NAN)
                        } else {
                            (cond[b][v] / count[b], mu[v] / (mu_total * nf) + prior[b][v] / (count[b] * nf))
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let tv_of = |t: &[(f64, f64)]| 0.5 * t.iter().map(|(c, m)| (c - m).abs()).sum::<f64>();

    let all: Vec<usize> = (0..budget.realizations).collect();
    let point = tables(&all, &all);
    let counts: Vec<usize> = {
        let mut c = vec![0usize; nb];
        for (b, _, _) in rows.iter().flatten() {
            c[*b] += 1;
        }
        c
    };

    // Bootstrap: Welford accumulators per cell difference and per-bin TV,
    // skipping resamples in which a bin is empty.
    let mut acc = vec![vec![(0usize, 0.0f64, 0.0f64); nv + 1]; nb];
    let mut rng = key.child(2).stream();
    let mut ia = vec![0usize; budget.realizations];
    let mut im = vec![0usize; budget.realizations];
    for _ in 0..opts.bootstrap {
        for slot in ia.iter_mut().chain(im.iter_mut()) {
            *slot = rand::Rng::random_range(&mut rng, 0..budget.realizations);
        }
        let t = tables(&ia, &im);
        for b in 0..nb {
            if t[b][0].0.is_nan() {
                continue;
            }
            let stats = t[b].iter().map(|(c, m)| c - m).chain(std::iter::once(tv_of(&t[b])));
            for (slot, x) in acc[b].iter_mut().zip(stats) {
                slot.0 += 1;
                let d = x - slot.1;
                slot.1 += d / slot.0 as f64;
                slot.2 += d * (x - slot.1);
            }
        }
    }
    let sd = |s: &(usize, f64, f64)| if s.0 > 1 { (s.2 / (s.0 - 1) as f64).sqrt() } else { f64::NAN };

    let min_count = 20;
    let mut pass = true;
    let reps: Vec<Vec<usize>> = bin_of.keys().cloned().collect();
    let bins: Vec<MixtureBin> = (0..nb)
        .map(|b| {
            let cells: Vec<MixtureCell> = (0..nv)
                .map(|v| {
                    let (c, m) = point[b][v];
                    let se = sd(&acc[b][v]);
                    let z = z_score(c - m, if se.is_nan() { 0.0 } else { se });
                    MixtureCell { value: grid.values[v], conditional: c, mixture: m, std_error: se, z_score: z }
                })
                .filter(|cell| cell.conditional > 0.0 || cell.mixture > 0.0)
                .collect();
            if counts[b] >= min_count && cells.iter().any(|c| c.z_score.abs() >= opts.threshold) {
                pass = false;
            }
            MixtureBin {
                pattern: reps[b].iter().map(|&i| grid.values[i]).collect(),
                count: counts[b],
                cells,
                tv: tv_of(&point[b]),
                tv_std_error: sd(&acc[b][nv]),
                empty: counts[b] == 0,
            }
        })
        .collect();
    Ok(MixtureReport {
        n,
        binning,
        bins,
        min_count,
        pass,
        asserted: source.is_gg_reference(),
        metadata: ReportMetadata { n, budget, seed: key.value(), source: source.describe(), notes: Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{CascadeConfig, CascadeSource};
    use crate::measure::DiracSource;
    use crate::spin::{EnumeratedSpinSource, MixedPSpinModel};

    fn one_level(zeta: f64) -> CascadeSource {
        CascadeSource::new(CascadeConfig::one_level(zeta, 0.2, 0.8, 512).unwrap()).unwrap()
    }

    #[test]
    fn dirac_is_bit_exact() {
        let src = DiracSource::new(0.7).unwrap();
        for psi in [OverlapFn::threshold(0.1), OverlapFn::Polynomial { coeffs: vec![0.1, -0.9, 2.3] }] {
            for n in 2..=4 {
                let mut f = MatrixFn::pair(1, 2, OverlapFn::Polynomial { coeffs: vec![0.3, 1.7] });
                if n > 2 {
                    f = f.and(2, 3, OverlapFn::threshold(0.5));
                }
                let r = gg_identity_test(&src, &f, &psi, n, Budget::new(10, 3), SeedKey::new(1), &TestOptions::default())
                    .unwrap();
                assert_eq!(r.difference.mean, 0.0);
                assert_eq!(r.difference.std_error, 0.0);
                assert_eq!(r.z_score, 0.0);
                assert_eq!(r.verdict(), Verdict::Pass);
            }
        }
    }

    #[test]
    fn small_budget_rejected() {
        let src = DiracSource::new(0.7).unwrap();
        let err = gg_identity_test(&src, &MatrixFn::constant(1.0), &OverlapFn::zero(), 2, Budget::new(3, 5), SeedKey::new(1), &TestOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall(_)));
        assert!(gg_identity_test(&src, &MatrixFn::constant(1.0), &OverlapFn::zero(), 1, Budget::new(30, 5), SeedKey::new(1), &TestOptions::default()).is_err());
    }

    #[test]
    fn exchangeability_channel_on_spin_model() {
        let src = EnumeratedSpinSource::new(MixedPSpinModel::sk(5, 1.5)).unwrap();
        let r = gg_identity_test(&src, &MatrixFn::constant(1.0), &OverlapFn::threshold(0.5), 2, Budget::new(300, 20), SeedKey::new(2), &TestOptions::default())
            .unwrap();
        assert!(r.z_score.abs() < 3.0, "{r:?}");
        assert_eq!(r.verdict(), Verdict::Report);
    }

    #[test]
    fn one_level_cascade_passes() {
        let src = one_level(0.5);
        let f = MatrixFn::pair(1, 2, OverlapFn::threshold(0.5));
        let r = gg_identity_test(&src, &f, &OverlapFn::threshold(0.5), 3, Budget::new(1000, 4), SeedKey::new(3), &TestOptions::default())
            .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.difference.std_error > 0.0);
        assert!((r.difference.mean - (r.lhs.mean - r.rhs.mean)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_reports() {
        let src = one_level(0.4);
        let f = MatrixFn::pair(1, 2, OverlapFn::threshold(0.5));
        let run = || gg_identity_test(&src, &f, &OverlapFn::threshold(0.5), 2, Budget::new(40, 3), SeedKey::new(9), &TestOptions::default()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn mixture_on_dirac() {
        let src = DiracSource::new(0.6).unwrap();
        let r = mixture_law_check(&src, 3, Binning::Exact, Budget::new(10, 5), SeedKey::new(1), &TestOptions::default()).unwrap();
        assert_eq!(r.bins.len(), 1);
        let cell = r.bins[0].cell_at(0.6).unwrap();
        assert_eq!(cell.conditional, 1.0);
        assert!((cell.mixture - 1.0).abs() < 1e-15);
        assert!(r.pass);
    }

    #[test]
    fn mixture_masses_on_one_level_cascade() {
        let zeta = 0.5;
        let src = one_level(zeta);
        let r = mixture_law_check(&src, 2, Binning::Exact, Budget::new(1500, 20), SeedKey::new(5), &TestOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
        let top = r.bin(&[0.8]).unwrap().cell_at(0.8).unwrap();
        assert!(((top.conditional - 0.75) / top.std_error).abs() < 3.0, "{top:?}");
        let low = r.bin(&[0.2]).unwrap().cell_at(0.8).unwrap();
        assert!(((low.conditional - 0.5 * (1.0 - zeta)) / low.std_error).abs() < 3.0, "{low:?}");
    }
}
