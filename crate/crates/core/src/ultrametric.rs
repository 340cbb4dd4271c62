//! Ultrametricity diagnostics: the triangle statistic and census, support and
//! extension probes, barycenter bounds on pattern Gram matrices, and
//! single-linkage tree reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{Estimate, RunningMean};
use crate::identity::{over_realizations, Verdict};
use crate::linalg::{is_psd, pivoted_cholesky};
use crate::measure::{overlaps_of, sample_points, Budget, MeasureSource, Realization};
use crate::overlap::{a_star, approx_leading, overlap_matrix, ultrametric_indicator, ConstraintMatrix, OverlapMatrix, ReplicaVector};
use crate::seed::SeedKey;
use crate::spin::EnumeratedGibbs;

/// Tolerance used when checking the barycenter inequalities.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltraStat {
    /// `E<I(R_{1,2} >= min(R_{1,3}, R_{2,3}))>` over realizations.
    pub estimate: Estimate,
    pub triples: usize,
    /// Sampled triples with the indicator equal to 0.
    pub violations: usize,
}

/// Monte Carlo estimate of the ultrametric indicator on i.i.d. triples.
pub fn ultrametricity_stat<S: MeasureSource>(source: &S, budget: Budget, key: SeedKey) -> Result<UltraStat> {
    budget.validate()?;
    let rows: Vec<(f64, usize)> = over_realizations(source, key, budget.realizations, |real, rng| {
        let mut m = RunningMean::default();
        let mut bad = 0;
        for _ in 0..budget.tuples {
            let p = sample_points(real, 3, rng);
            let ok = ultrametric_indicator(real.overlap(&p[0], &p[1]), real.overlap(&p[0], &p[2]), real.overlap(&p[1], &p[2]));
            bad += usize::from(!ok);
            m.push(if ok { 1.0 } else { 0.0 });
        }
        (m.mean(), bad)
    });
    let means: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(UltraStat {
        estimate: Estimate::from_samples(&means),
        triples: budget.realizations * budget.tuples,
        violations: rows.iter().map(|r| r.1).sum(),
    })
}

/// Largest N for which [`exact_ultrametricity`] sums over all triples.
pub const EXACT_TRIPLE_LIMIT: usize = 8;

/// `sum_{a,b,c} G(a) G(b) G(c) I(R_ab >= min(R_ac, R_bc))` for one enumerated measure.
pub fn exact_ultrametricity(measure: &EnumeratedGibbs) -> Result<f64> {
    if measure.n() > EXACT_TRIPLE_LIMIT {
        return Err(Error::EnumerationBudget { n: measure.n(), limit: EXACT_TRIPLE_LIMIT });
    }
    let w = measure.weights();
    let k = w.len() as u32;
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            let rab = measure.overlap(&a, &b);
            let wab = w[a as usize] * w[b as usize];
            for c in 0..k {
                if ultrametric_indicator(rab, measure.overlap(&a, &c), measure.overlap(&b, &c)) {
                    total += wab * w[c as usize];
                }
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriangleClass {
    Equilateral,
    Isosceles,
    Violating,
}

/// Classifies an unordered triple: with sorted values `s0 <= s1 <= s2`, it is
/// equilateral if `s2 - s0 < eps`, isosceles if the two smallest agree
/// (`s1 - s0 < eps`), and violating otherwise. Also returns `s1 - s0`, the
/// largest of `min(r13, r23) - r12` over orderings.
pub fn classify_triple(r12: f64, r13: f64, r23: f64, eps: f64) -> (TriangleClass, f64) {
    let mut s = [r12, r13, r23];
    s.sort_by(f64::total_cmp);
    let margin = s[1] - s[0];
    let class = if s[2] - s[0] < eps {
        TriangleClass::Equilateral
    } else if margin < eps {
        TriangleClass::Isosceles
    } else {
        TriangleClass::Violating
    };
    (class, margin)
}

/// Norm form on squared distances: the largest exceeds the middle one by
/// less than `2 eps` (the same slack as the overlap form on a sphere).
fn norm_form_valid(d12: f64, d13: f64, d23: f64, eps: f64) -> bool {
    let mut d = [d12, d13, d23];
    d.sort_by(f64::total_cmp);
    d[2] - d[1] < 2.0 * eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleCensus {
    pub total: usize,
    pub equilateral: usize,
    pub isosceles: usize,
    pub violating: usize,
    pub worst_margin: f64,
    pub epsilon: f64,
    /// Triples checked in norm form, and how many of them agreed with the overlap form.
    pub norm_checked: usize,
    pub norm_agreement: usize,
    /// Counts of `s1 - s0` in equal bins on `[0, histogram_max]`.
    pub histogram: Vec<usize>,
    pub histogram_max: f64,
}

pub const CENSUS_BINS: usize = 20;

impl TriangleCensus {
    fn empty(epsilon: f64, histogram_max: f64) -> Self {
        TriangleCensus {
            total: 0,
            equilateral: 0,
            isosceles: 0,
            violating: 0,
            worst_margin: f64::NEG_INFINITY,
            epsilon,
            norm_checked: 0,
            norm_agreement: 0,
            histogram: vec![0; CENSUS_BINS],
            histogram_max,
        }
    }

    fn push(&mut self, r: [f64; 3], dist: Option<[f64; 3]>) {
        let (class, margin) = classify_triple(r[0], r[1], r[2], self.epsilon);
        self.total += 1;
        match class {
            TriangleClass::Equilateral => self.equilateral += 1,
            TriangleClass::Isosceles => self.isosceles += 1,
            TriangleClass::Violating => self.violating += 1,
        }
        self.worst_margin = self.worst_margin.max(margin);
        let bin = ((margin / self.histogram_max) * CENSUS_BINS as f64).floor();
        self.histogram[(bin.max(0.0) as usize).min(CENSUS_BINS - 1)] += 1;
        if let Some(d) = dist {
            self.norm_checked += 1;
            if norm_form_valid(d[0], d[1], d[2], self.epsilon) == (class != TriangleClass::Violating) {
                self.norm_agreement += 1;
            }
        }
    }

    /// `(bin lower edge, bin upper edge, count)` rows.
    pub fn histogram_rows(&self) -> Vec<(f64, f64, usize)> {
        let w = self.histogram_max / CENSUS_BINS as f64;
        self.histogram.iter().enumerate().map(|(k, &c)| (k as f64 * w, (k + 1) as f64 * w, c)).collect()
    }
}

/// Census over raw triples `(r12, r13, r23)`.
pub fn triangle_census(triples: &[[f64; 3]], epsilon: f64) -> Result<TriangleCensus> {
    if !(epsilon > 0.0) {
        return invalid("census epsilon must be positive");
    }
    let top = triples.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut c = TriangleCensus::empty(epsilon, (2.0 * top).max(epsilon));
    for t in triples {
        c.push(*t, None);
    }
    Ok(c)
}

/// Census over every triple `i < j < k` of each sample, in norm form as well
/// when embeddings are given (one list of vectors per sample).
pub fn census_of_samples(samples: &[OverlapMatrix], embeddings: Option<&[Vec<ReplicaVector>]>, epsilon: f64) -> Result<TriangleCensus> {
    if !(epsilon > 0.0) {
        return invalid("census epsilon must be positive");
    }
    if let Some(e) = embeddings {
        if e.len() != samples.len() {
            return Err(Error::SizeMismatch(format!("{} embeddings for {} samples", e.len(), samples.len())));
        }
    }
    let q = samples.iter().map(|s| s.q_star).fold(0.0, f64::max);
    let mut c = TriangleCensus::empty(epsilon, (2.0 * q).max(epsilon));
    for (s, r) in samples.iter().enumerate() {
        let vecs = embeddings.map(|e| &e[s]).filter(|v| !v.is_empty());
        for i in 0..r.n {
            for j in (i + 1)..r.n {
                for k in (j + 1)..r.n {
                    let dist = match vecs {
                        Some(v) => {
                            let d = |a: usize, b: usize| v[a].distance(&v[b]).map(|x| x * x);
                            Some([d(i, j)?, d(i, k)?, d(j, k)?])
                        }
                        None => None,
                    };
                    c.push([r.get(i, j), r.get(i, k), r.get(j, k)], dist);
                }
            }
        }
    }
    Ok(c)
}

/// Samples `budget` tuples of `n` replicas with overlap matrices and, when
/// available, embeddings.
pub fn sample_overlaps<S: MeasureSource>(source: &S, n: usize, budget: Budget, key: SeedKey) -> Result<(Vec<OverlapMatrix>, Vec<Vec<ReplicaVector>>)> {
    budget.validate()?;
    if n == 0 {
        return invalid("need n >= 1 replicas");
    }
    let rows: Vec<Vec<(OverlapMatrix, Vec<ReplicaVector>)>> = over_realizations(source, key, budget.realizations, |real, rng| {
        (0..budget.tuples)
            .map(|_| {
                let p = sample_points(real, n, rng);
                let e = real.embed(&p).unwrap_or_default();
                (overlaps_of(real, &p), e)
            })
            .collect()
    });
    Ok(rows.into_iter().flatten().unzip())
}

/// `E<I(R^n ~ A)>` with `n` the size of `A`.
pub fn support_probe<S: MeasureSource>(source: &S, a: &ConstraintMatrix, budget: Budget, key: SeedKey) -> Result<Estimate> {
    budget.validate()?;
    let rows: Vec<f64> = over_realizations(source, key, budget.realizations, |real, rng| {
        let mut m = RunningMean::default();
        for _ in 0..budget.tuples {
            let p = sample_points(real, a.n, rng);
            m.push(if approx_leading(&overlaps_of(real, &p), a) { 1.0 } else { 0.0 });
        }
        m.mean()
    });
    Ok(Estimate::from_samples(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub support: Estimate,
    pub support_positive: bool,
    pub a_star: f64,
    /// `a_n* + eps < q*`.
    pub gap_holds: bool,
    /// Probability of `R^n ~ A`, `R_{l,n+1} ~ a_{l,n}` for `l < n`, and `R_{n,n+1} < a_n* + eps`.
    pub event: Estimate,
    /// `E<I(R_{1,2} >= a_n* + eps)>`.
    pub gamma: Estimate,
    pub verdict: Verdict,
    pub note: String,
}

/// Probes the extension event for `A`. Positivity of the event is asserted
/// only when the support estimate is positive at `threshold` standard errors,
/// the gap condition holds and the source is a reference measure; "support"
/// here means a positive Monte Carlo estimate, not a topological statement.
pub fn extension_probe<S: MeasureSource>(source: &S, a: &ConstraintMatrix, budget: Budget, key: SeedKey, threshold: f64) -> Result<ExtensionReport> {
    budget.validate()?;
    let n = a.n;
    let astar = a_star(a)?;
    let eps = a.epsilon;
    let q_star = source.q_star();
    let rows: Vec<(f64, f64, f64)> = over_realizations(source, key, budget.realizations, |real, rng| {
        let (mut sup, mut ev, mut gam) = (RunningMean::default(), RunningMean::default(), RunningMean::default());
        for _ in 0..budget.tuples {
            let p = sample_points(real, n + 1, rng);
            let r = overlaps_of(real, &p);
            let inside = approx_leading(&r, a);
            let extends = inside
                && (0..n - 1).all(|l| (r.get(l, n) - a.get(l, n - 1)).abs() < eps)
                && r.get(n - 1, n) < astar + eps;
            sup.push(if inside { 1.0 } else { 0.0 });
            ev.push(if extends { 1.0 } else { 0.0 });
            gam.push(if r.get(0, 1) >= astar + eps { 1.0 } else { 0.0 });
        }
        (sup.mean(), ev.mean(), gam.mean())
    });
    let col = |k: usize| -> Vec<f64> { rows.iter().map(|r| [r.0, r.1, r.2][k]).collect() };
    let support = Estimate::from_samples(&col(0));
    let event = Estimate::from_samples(&col(1));
    let gamma = Estimate::from_samples(&col(2));
    let support_positive = support.mean - threshold * support.std_error > 0.0;
    let gap_holds = astar + eps < q_star;
    let (verdict, note) = if !gap_holds {
        (Verdict::NotApplicable, format!("a_n* + eps = {} is not below q* = {q_star}", astar + eps))
    } else if !support_positive {
        (Verdict::NotApplicable, "support estimate not positive at the configured significance".to_string())
    } else if !source.is_gg_reference() {
        (Verdict::Report, "source is not a reference measure; recorded only".to_string())
    } else if event.mean - threshold * event.std_error > 0.0 {
        (Verdict::Pass, "extension event has positive probability".to_string())
    } else {
        (Verdict::Fail, "extension event not positive at the configured significance".to_string())
    };
    Ok(ExtensionReport { support, support_positive, a_star: astar, gap_holds, event, gamma, verdict, note })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterReport {
    pub m: usize,
    pub q_star: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `||sbar^j||^2` for the three groups.
    pub norms: [f64; 3],
    /// `sbar^1 . sbar^2`, `sbar^1 . sbar^3`, `sbar^2 . sbar^3`.
    pub products: [f64; 3],
    /// `(m q* + m(m-1) c) / m^2`.
    pub norm_bound: f64,
    /// `||sbar^2 - sbar^3||^2`.
    pub distance_sq: f64,
    /// `2 (q* - c) / m`.
    pub distance_bound: f64,
    /// `b - a` measured as `sbar^1 . sbar^3 - sbar^1 . sbar^2`.
    pub gap: f64,
    /// `sqrt(2 q* (q* - c) / m)`.
    pub gap_bound: f64,
    pub norms_ok: bool,
    pub distance_ok: bool,
    pub gap_ok: bool,
}

impl BarycenterReport {
    pub fn all_hold(&self) -> bool {
        self.norms_ok && self.distance_ok && self.gap_ok
    }

    /// `K` in `b - a <= K m^{-1/2}`.
    pub fn k_constant(&self) -> f64 {
        (2.0 * self.q_star * (self.q_star - self.c)).sqrt()
    }
}

/// Barycenter bounds for three disjoint index groups of equal size.
#[allow(clippy::too_many_arguments)]
pub fn barycenter_diagnostic(replicas: &[ReplicaVector], groups: [&[usize]; 3], q_star: f64, a: f64, b: f64, c: f64) -> Result<BarycenterReport> {
    let m = groups[0].len();
    if m == 0 || groups.iter().any(|g| g.len() != m) {
        return Err(Error::SizeMismatch(format!(
            "groups must share one positive size, got {}, {}, {}",
            groups[0].len(),
            groups[1].len(),
            groups[2].len()
        )));
    }
    let mut seen = vec![false; replicas.len()];
    for &i in groups.iter().flat_map(|g| g.iter()) {
        if i >= replicas.len() {
            return invalid(format!("index {i} outside {} replicas", replicas.len()));
        }
        if std::mem::replace(&mut seen[i], true) {
            return invalid(format!("index {i} appears in more than one group"));
        }
    }
    let dim = replicas.iter().map(ReplicaVector::dimension).max().unwrap_or(0);
    let bar: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut s = vec![0.0; dim];
            for &i in g.iter() {
                for (x, y) in s.iter_mut().zip(replicas[i].coords()) {
                    *x += y / m as f64;
                }
            }
            s
        })
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let norms = [dot(&bar[0], &bar[0]), dot(&bar[1], &bar[1]), dot(&bar[2], &bar[2])];
    let products = [dot(&bar[0], &bar[1]), dot(&bar[0], &bar[2]), dot(&bar[1], &bar[2])];
    let mf = m as f64;
    let norm_bound = (mf * q_star + mf * (mf - 1.0) * c) / (mf * mf);
    let distance_sq = bar[1].iter().zip(&bar[2]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let distance_bound = 2.0 * (q_star - c) / mf;
    let gap = products[1] - products[0];
    let gap_bound = (2.0 * q_star * (q_star - c) / mf).sqrt();
    Ok(BarycenterReport {
        m,
        q_star,
        a,
        b,
        c,
        norms,
        products,
        norm_bound,
        distance_sq,
        distance_bound,
        gap,
        gap_bound,
        norms_ok: norms.iter().all(|x| *x <= norm_bound + BOUND_TOLERANCE),
        distance_ok: distance_sq <= distance_bound + BOUND_TOLERANCE,
        gap_ok: gap <= gap_bound + BOUND_TOLERANCE,
    })
}

/// Gram matrix of `3m` points: diagonal `q*`, `within` inside each group,
/// `a` between groups 1 and 2, `b` between 1 and 3, `c` between 2 and 3.
pub fn pattern_gram(m: usize, q_star: f64, a: f64, b: f64, c: f64, within: f64) -> Vec<f64> {
    let n = 3 * m;
    let between = [[within, a, b], [a, within, c], [b, c, within]];
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = if i == j { q_star } else { between[i / m][j / m] };
        }
    }
    g
}

/// Points realizing a PSD Gram matrix, one per row.
pub fn realize_gram(g: &[f64], n: usize) -> Result<Vec<ReplicaVector>> {
    if g.len() != n * n {
        return Err(Error::SizeMismatch(format!("{} entries for a {n} x {n} matrix", g.len())));
    }
    let f = pivoted_cholesky(g, n).map_err(|e| Error::InvalidInput(format!("Gram matrix is not PSD (residual {})", e.residual)))?;
    f.rows.into_iter().map(ReplicaVector::new).collect()
}

/// Builds the pattern Gram with `within = c`, realizes it and runs the
/// barycenter diagnostic on groups `0..m`, `m..2m`, `2m..3m`.
pub fn barycenter_on_pattern(m: usize, q_star: f64, a: f64, b: f64, c: f64) -> Result<BarycenterReport> {
    let g = pattern_gram(m, q_star, a, b, c, c);
    let pts = realize_gram(&g, 3 * m)?;
    let idx: Vec<usize> = (0..3 * m).collect();
    barycenter_diagnostic(&pts, [&idx[..m], &idx[m..2 * m], &idx[2 * m..]], q_star, a, b, c)
}

/// Smallest `m <= max_m` at which the pattern Gram (with `within = c`) is
/// not PSD. Failure is monotone in `m`, so doubling and bisection suffice.
pub fn smallest_failing_m(q_star: f64, a: f64, b: f64, c: f64, max_m: usize) -> Option<usize> {
    let fails = |m: usize| !is_psd(&pattern_gram(m, q_star, a, b, c, c), 3 * m);
    let mut hi = 1;
    while !fails(hi) {
        if hi >= max_m {
            return None;
        }
        hi = (2 * hi).min(max_m);
    }
    let mut lo = hi / 2;
    if lo == 0 {
        return Some(hi);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fails(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// One agglomeration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// Single-linkage tree on `d = q* - R`. Leaves are `0..n`; merge `i` creates cluster `n + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltrametricTree {
    pub n: usize,
    pub q_star: f64,
    pub merges: Vec<Merge>,
    /// Distinct merge heights, grouped within `epsilon`.
    pub levels: Vec<f64>,
}

pub fn build_ultrametric_tree(r: &OverlapMatrix, epsilon: f64) -> Result<UltrametricTree> {
    if !(epsilon >= 0.0) {
        return invalid("epsilon must be non-negative");
    }
    if !r.is_symmetric() {
        return invalid("overlap matrix must be symmetric");
    }
    let n = r.n;
    let mut merges = Vec::new();
    if n >= 2 {
        let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                condensed.push(r.q_star - r.get(i, j));
            }
        }
        let dendro = kodama::linkage(&mut condensed, n, kodama::Method::Single);
        merges = dendro
            .steps()
            .iter()
            .map(|s| Merge { left: s.cluster1, right: s.cluster2, height: s.dissimilarity, size: s.size })
            .collect();
    }
    let mut heights: Vec<f64> = merges.iter().map(|m| m.height).collect();
    heights.sort_by(f64::total_cmp);
    let mut levels: Vec<f64> = Vec::new();
    for h in heights {
        match levels.last() {
            Some(&l) if h - l <= epsilon => {}
            _ => levels.push(h),
        }
    }
    Ok(UltrametricTree { n, q_star: r.q_star, merges, levels })
}

impl UltrametricTree {
    fn members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = (0..self.n).map(|i| vec![i]).collect();
        for m in &self.merges {
            let mut v = members[m.left].clone();
            v.extend_from_slice(&members[m.right]);
            members.push(v);
        }
        members
    }

    /// Overlaps induced by the tree: `q* - height` of the merge joining `i` and `j`.
    pub fn cophenetic(&self) -> OverlapMatrix {
        let n = self.n;
        let members = self.members();
        let mut e = vec![self.q_star; n * n];
        for m in &self.merges {
            for &i in &members[m.left] {
                for &j in &members[m.right] {
                    e[i * n + j] = self.q_star - m.height;
                    e[j * n + i] = self.q_star - m.height;
                }
            }
        }
        OverlapMatrix { n, q_star: self.q_star, entries: e }
    }

    /// Largest off-diagonal `|cophenetic - R|`.
    pub fn reconstruction_error(&self, r: &OverlapMatrix) -> Result<f64> {
        if r.n != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: r.n });
        }
        let c = self.cophenetic();
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    worst = worst.max((c.get(i, j) - r.get(i, j)).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Newick text; leaves are named `1..n`, branch lengths are height differences.
    pub fn newick(&self) -> String {
        if self.n == 0 {
            return ";".into();
        }
        if self.merges.is_empty() {
            return "1;".into();
        }
        let height = |label: usize| if label < self.n { 0.0 } else { self.merges[label - self.n].height };
        fn render(t: &UltrametricTree, label: usize, parent: f64, height: &dyn Fn(usize) -> f64, out: &mut String) {
            if label < t.n {
                out.push_str(&format!("{}", label + 1));
            } else {
                let m = &t.merges[label - t.n];
                out.push('(');
                render(t, m.left, m.height, height, out);
                out.push(',');
                render(t, m.right, m.height, height, out);
                out.push(')');
            }
            out.push_str(&format!(":{}", parent - height(label)));
        }
        let root = self.n + self.merges.len() - 1;
        let m = &self.merges[root - self.n];
        let mut out = String::from("(");
        render(self, m.left, m.height, &height, &mut out);
        out.push(',');
        render(self, m.right, m.height, &height, &mut out);
        out.push_str(");");
        out
    }
}

/// Tree of the overlaps of explicit vectors.
pub fn tree_of_vectors(v: &[ReplicaVector], epsilon: f64) -> Result<UltrametricTree> {
    build_ultrametric_tree(&overlap_matrix(v)?, epsilon)
}
