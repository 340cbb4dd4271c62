//! The measure-source abstraction shared by every estimator.
//!
//! A [`MeasureSource`] produces independent realizations of the random
//! measure `G`, keyed by seed. A [`Realization`] draws i.i.d. replicas, reports
//! their overlaps and, when `G` is atomic, decomposes it exactly into groups of
//! atoms that share an overlap pattern with a given list of replicas. The outer
//! expectation `E` is approximated by averaging over realizations, the inner
//! Gibbs average by replicas (or exactly through the group decomposition).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::overlap::{OverlapMatrix, ReplicaVector};
use crate::seed::{SeedKey, Stream};

/// Realizations of `G` times replica tuples per realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub realizations: usize,
    pub tuples: usize,
}

impl Budget {
    pub fn new(realizations: usize, tuples: usize) -> Self {
        Budget { realizations, tuples }
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 || self.tuples == 0 {
            return invalid("budget needs at least one realization and one tuple");
        }
        Ok(())
    }

    /// Scales the realization count, never below `floor`.
    pub fn scaled(&self, factor: f64, floor: usize) -> Budget {
        let r = ((self.realizations as f64) * factor).round() as usize;
        Budget { realizations: r.max(floor).max(1), tuples: self.tuples }
    }
}

/// Atoms of a realization sharing one overlap vector with a list of replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub mass: f64,
    /// `overlaps[l]` is the overlap of every atom in the group with replica `l`.
    pub overlaps: Vec<f64>,
}

pub trait Realization {
    type Point: Clone;

    fn q_star(&self) -> f64;

    fn sample(&mut self, rng: &mut Stream) -> Self::Point;

    fn overlap(&self, a: &Self::Point, b: &Self::Point) -> f64;

    /// Exact decomposition of `G` relative to `replicas`; `None` when the
    /// realization is not atomic (callers then fall back to inner sampling).
    fn groups(&mut self, _replicas: &[Self::Point]) -> Option<Vec<Group>> {
        None
    }

    /// Exact `<f(R_{1,2})>` under this realization, when cheaply available.
    fn pair_average(&mut self, _f: &dyn Fn(f64) -> f64) -> Option<f64> {
        None
    }

    /// Explicit embeddings of the given points, all of one dimension.
    fn embed(&mut self, _points: &[Self::Point]) -> Option<Vec<ReplicaVector>> {
        None
    }
}

pub trait MeasureSource: Sync {
    type Realization: Realization;

    fn q_star(&self) -> f64;

    fn realize(&self, key: SeedKey) -> Self::Realization;

    /// Whether the source satisfies the identities exactly (up to truncation),
    /// so that statistical tests on it are asserted rather than reported.
    fn is_gg_reference(&self) -> bool;

    fn describe(&self) -> String;
}

pub fn sample_points<R: Realization>(real: &mut R, k: usize, rng: &mut Stream) -> Vec<R::Point> {
    (0..k).map(|_| real.sample(rng)).collect()
}

/// Overlap matrix of sampled points, diagonal set to `q*`.
pub fn overlaps_of<R: Realization>(real: &R, points: &[R::Point]) -> OverlapMatrix {
    OverlapMatrix::from_fn(points.len(), real.q_star(), |i, j| real.overlap(&points[i], &points[j]))
}

/// Draws `n` i.i.d. replicas from one realization keyed by `key`, returning
/// their embeddings (empty when the source has none) and overlap matrix.
pub fn sample_replicas<S: MeasureSource>(source: &S, n: usize, key: SeedKey) -> Result<(Vec<ReplicaVector>, OverlapMatrix)> {
    if n == 0 {
        return invalid("need n >= 1 replicas");
    }
    let mut real = source.realize(key.child(0));
    let mut rng = key.child(1).stream();
    let points = sample_points(&mut real, n, &mut rng);
    let r = overlaps_of(&real, &points);
    let vectors = real.embed(&points).unwrap_or_default();
    Ok((vectors, r))
}

/// Exact groups, or `inner_m` fresh samples of mass `1/inner_m` each.
pub fn groups_or_sampled<R: Realization>(
    real: &mut R,
    replicas: &[R::Point],
    inner_m: usize,
    rng: &mut Stream,
) -> (Vec<Group>, bool) {
    if let Some(g) = real.groups(replicas) {
        return (g, true);
    }
    let m = inner_m.max(1);
    let mass = 1.0 / m as f64;
    let groups = (0..m)
        .map(|_| {
            let s = real.sample(rng);
            Group { mass, overlaps: replicas.iter().map(|p| real.overlap(&s, p)).collect() }
        })
        .collect();
    (groups, false)
}

/// The single-atom measure: every replica equals one point of norm `sqrt(q*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiracSource {
    pub q_star: f64,
}

impl DiracSource {
    pub fn new(q_star: f64) -> Result<Self> {
        if !(q_star > 0.0 && q_star <= 1.0) {
            return invalid("q* must lie in (0, 1]");
        }
        Ok(DiracSource { q_star })
    }
}

#[derive(Debug, Clone)]
pub struct DiracRealization {
    q_star: f64,
}

impl Realization for DiracRealization {
    type Point = ();

    fn q_star(&self) -> f64 {
        self.q_star
    }

    fn sample(&mut self, _rng: &mut Stream) {}

    fn overlap(&self, _a: &(), _b: &()) -> f64 {
        self.q_star
    }

    fn groups(&mut self, replicas: &[()]) -> Option<Vec<Group>> {
        Some(vec![Group { mass: 1.0, overlaps: vec![self.q_star; replicas.len()] }])
    }

    fn pair_average(&mut self, f: &dyn Fn(f64) -> f64) -> Option<f64> {
        Some(f(self.q_star))
    }

    fn embed(&mut self, points: &[()]) -> Option<Vec<ReplicaVector>> {
        let v = ReplicaVector::new(vec![self.q_star.sqrt()]).ok()?;
        Some(vec![v; points.len()])
    }
}

impl MeasureSource for DiracSource {
    type Realization = DiracRealization;

    fn q_star(&self) -> f64 {
        self.q_star
    }

    fn realize(&self, _key: SeedKey) -> DiracRealization {
        DiracRealization { q_star: self.q_star }
    }

    fn is_gg_reference(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("dirac(q*={})", self.q_star)
    }
}
