//! Poisson-Dirichlet cascades: exactly ultrametric atomic random measures.
//!
//! An `r`-level cascade is a tree of depth `r` in which every internal node at
//! depth `j` carries independent PD(`zeta_{j+1}`) weights over its children.
//! Two leaves whose deepest common ancestor sits at depth `j` have overlap
//! `q_j`; a leaf has self-overlap `q_r = q*`. Nodes are generated lazily from
//! seeds derived from their path, so a realization only materializes the part
//! of the tree that has been visited.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{Group, MeasureSource, Realization};
use crate::overlap::ReplicaVector;
use crate::seed::{SeedKey, Stream};

pub const DEFAULT_TRUNCATION: usize = 512;

/// Leaves above this count are not enumerated for exact pair averages.
const EXACT_PAIR_LEAF_LIMIT: usize = 1 << 12;
/// Sticks drawn per retained child weight below the root.
const STICK_OVERSAMPLING: usize = 4;

/// Normalized largest points of a Poisson process with intensity
/// `x^(-zeta-1)`, in decreasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonDirichletWeights {
    pub zeta: f64,
    pub weights: Vec<f64>,
}

impl PoissonDirichletWeights {
    pub fn truncation(&self) -> usize {
        self.weights.len()
    }

    pub fn sum_squares(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// The `k`-th largest point is `(zeta * Gamma_k)^(-1/zeta)` where `Gamma_k` is
/// the `k`-th arrival of a unit-rate process; the factor `zeta` cancels on
/// normalization.
pub fn sample_pd_weights(zeta: f64, k: usize, rng: &mut Stream) -> Result<PoissonDirichletWeights> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return invalid(format!("zeta must lie in (0, 1), got {zeta}"));
    }
    if k < 2 {
        return invalid("truncation must be at least 2");
    }
    Ok(PoissonDirichletWeights { zeta, weights: pd_weights_unchecked(zeta, k, rng) })
}

fn pd_weights_unchecked(zeta: f64, k: usize, rng: &mut Stream) -> Vec<f64> {
    let inv = 1.0 / zeta;
    let mut arrival = 0.0f64;
    let mut logs = Vec::with_capacity(k);
    for _ in 0..k {
        let e: f64 = rng.sample(Exp1);
        arrival += e;
        logs.push(-inv * arrival.ln());
    }
    let top = logs[0];
    let mut w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Ranked two-parameter weights `PD(alpha, theta)` by stick-breaking: draws
/// `STICK_OVERSAMPLING * k` sticks, keeps the `k` largest and renormalizes.
pub fn sample_pitman_yor_weights(alpha: f64, theta: f64, k: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) || !(theta > -alpha) {
        return invalid(format!("PD({alpha}, {theta}) needs 0 < alpha < 1 and theta > -alpha"));
    }
    if k < 2 {
        return invalid("truncation must be at least 2");
    }
    Ok(pitman_yor_unchecked(alpha, theta, k, rng))
}

fn pitman_yor_unchecked(alpha: f64, theta: f64, k: usize, rng: &mut Stream) -> Vec<f64> {
    let mut rest = 1.0f64;
    let mut w: Vec<f64> = (1..=STICK_OVERSAMPLING * k)
        .map(|j| {
            let v = Beta::new(1.0 - alpha, theta + j as f64 * alpha).expect("valid parameters").sample(rng);
            let piece = rest * v;
            rest -= piece;
            piece
        })
        .collect();
    w.sort_by(|a, b| b.total_cmp(a));
    w.truncate(k);
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// `zeta_1 < ... < zeta_r`, one per level.
    pub zetas: Vec<f64>,
    /// `q_0 < q_1 < ... < q_r = q*`.
    pub overlaps: Vec<f64>,
    #[serde(default = "default_truncation", alias = "K")]
    pub truncation: usize,
    /// Minimum ambient dimension of embeddings (padding only).
    #[serde(default)]
    pub dimension: usize,
}

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

impl CascadeConfig {
    pub fn new(zetas: Vec<f64>, overlaps: Vec<f64>, truncation: usize) -> Result<Self> {
        let c = CascadeConfig { zetas, overlaps, truncation, dimension: 0 };
        c.validate()?;
        Ok(c)
    }

    pub fn one_level(zeta: f64, q0: f64, q_star: f64, truncation: usize) -> Result<Self> {
        Self::new(vec![zeta], vec![q0, q_star], truncation)
    }

    pub fn levels(&self) -> usize {
        self.zetas.len()
    }

    pub fn q_star(&self) -> f64 {
        *self.overlaps.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.zetas.len();
        if r == 0 {
            return invalid("cascade needs at least one level");
        }
        if self.overlaps.len() != r + 1 {
            return invalid(format!("{} levels need {} overlaps, got {}", r, r + 1, self.overlaps.len()));
        }
        if self.zetas.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
            return invalid("every zeta must lie in (0, 1)");
        }
        if self.zetas.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("zetas must be strictly increasing");
        }
        if self.overlaps.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("overlaps must be strictly increasing");
        }
        if self.overlaps[0] < 0.0 {
            return invalid("q_0 must be non-negative");
        }
        if self.q_star() > 1.0 {
            return invalid("q* must not exceed 1");
        }
        if self.truncation < 2 {
            return invalid("truncation must be at least 2");
        }
        Ok(())
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.overlaps.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Reference source of cascade realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSource {
    config: CascadeConfig,
}

impl CascadeSource {
    pub fn new(config: CascadeConfig) -> Result<Self> {
        config.validate()?;
        Ok(CascadeSource { config })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }
}

impl MeasureSource for CascadeSource {
    type Realization = Cascade;

    fn q_star(&self) -> f64 {
        self.config.q_star()
    }

    fn realize(&self, key: SeedKey) -> Cascade {
        Cascade::new(self.config.clone(), key)
    }

    fn is_gg_reference(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!(
            "cascade(zetas={:?}, overlaps={:?}, K={})",
            self.config.zetas, self.config.overlaps, self.config.truncation
        )
    }
}

/// Validates the configuration and realizes one cascade.
pub fn build_cascade(config: CascadeConfig, key: SeedKey) -> Result<Cascade> {
    config.validate()?;
    Ok(Cascade::new(config, key))
}

/// A leaf, identified by its child indices from the root.
pub type Leaf = Vec<u32>;

#[derive(Debug, Clone)]
struct Node {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

/// One realized cascade measure.
#[derive(Debug, Clone)]
pub struct Cascade {
    config: CascadeConfig,
    key: SeedKey,
    nodes: HashMap<Vec<u32>, Node>,
    directions: HashMap<Vec<u32>, usize>,
}

impl Cascade {
    fn new(config: CascadeConfig, key: SeedKey) -> Self {
        Cascade { config, key, nodes: HashMap::new(), directions: HashMap::new() }
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    fn node_key(&self, path: &[u32]) -> SeedKey {
        path.iter().fold(self.key, |k, &i| k.child(u64::from(i)))
    }

    fn node(&mut self, path: &[u32]) -> &Node {
        if !self.nodes.contains_key(path) {
            let depth = path.len();
            // Below the root, children of a level-d node are PD(zeta_{d+1}, -zeta_d).
            let zeta = self.config.zetas[depth];
            let k = self.config.truncation;
            let mut rng = self.node_key(path).stream();
            let weights = match depth {
                0 => pd_weights_unchecked(zeta, k, &mut rng),
                _ => pitman_yor_unchecked(zeta, -self.config.zetas[depth - 1], k, &mut rng),
            };
            let mut acc = 0.0;
            let cumulative = weights
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            self.nodes.insert(path.to_vec(), Node { weights, cumulative });
        }
        &self.nodes[path]
    }

    /// PD weights of the children of the node at `path`.
    pub fn child_weights(&mut self, path: &[u32]) -> Result<Vec<f64>> {
        if path.len() >= self.config.levels() {
            return invalid("leaves have no children");
        }
        Ok(self.node(path).weights.clone())
    }

    /// Product of child weights along the path.
    pub fn mass(&mut self, path: &[u32]) -> f64 {
        let mut m = 1.0;
        for d in 0..path.len() {
            m *= self.node(&path[..d]).weights[path[d] as usize];
        }
        m
    }

    /// Overlap at the deepest common ancestor.
    pub fn leaf_overlap(&self, a: &[u32], b: &[u32]) -> f64 {
        let d = a.iter().zip(b).take_while(|(x, y)| x == y).count();
        self.config.overlaps[d]
    }

    /// `S_j = sum over depth-j nodes of mass^2`, for `j = 0..=r`.
    fn depth_square_sums(&mut self) -> Vec<f64> {
        let r = self.config.levels();
        let mut sums = vec![0.0; r + 1];
        let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
        sums[0] = 1.0;
        for depth in 1..=r {
            let mut next = Vec::with_capacity(frontier.len() * self.config.truncation);
            for (path, m) in &frontier {
                let weights = self.node(path).weights.clone();
                for (i, w) in weights.iter().enumerate() {
                    let mm = m * w;
                    sums[depth] += mm * mm;
                    if depth < r {
                        let mut p = path.clone();
                        p.push(i as u32);
                        next.push((p, mm));
                    }
                }
            }
            frontier = next;
        }
        sums
    }

    fn groups_below(&mut self, path: &mut Vec<u32>, mass: f64, members: &[usize], current: &mut [f64], replicas: &[Leaf], out: &mut Vec<Group>) {
        let depth = path.len();
        let r = self.config.levels();
        let q_here = self.config.overlaps[depth];
        for &l in members {
            current[l] = q_here;
        }
        if depth == r {
            out.push(Group { mass, overlaps: current.to_vec() });
            return;
        }
        // children visited by some replica, in first-visit order
        let mut children: Vec<(u32, Vec<usize>)> = Vec::new();
        for &l in members {
            let c = replicas[l][depth];
            match children.iter_mut().find(|(idx, _)| *idx == c) {
                Some((_, v)) => v.push(l),
                None => children.push((c, vec![l])),
            }
        }
        let weights = self.node(path).weights.clone();
        let off: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !children.iter().any(|(c, _)| *c as usize == *i))
            .map(|(_, w)| w)
            .sum();
        if off > 0.0 {
            out.push(Group { mass: mass * off, overlaps: current.to_vec() });
        }
        for (c, sub) in children {
            path.push(c);
            let saved = current.to_vec();
            self.groups_below(path, mass * weights[c as usize], &sub, current, replicas, out);
            current.copy_from_slice(&saved);
            path.pop();
        }
    }

    fn direction(&mut self, prefix: &[u32]) -> usize {
        let next = self.directions.len();
        *self.directions.entry(prefix.to_vec()).or_insert(next)
    }
}

impl Realization for Cascade {
    type Point = Leaf;

    fn q_star(&self) -> f64 {
        self.config.q_star()
    }

    fn sample(&mut self, rng: &mut Stream) -> Leaf {
        let r = self.config.levels();
        let mut path = Vec::with_capacity(r);
        for _ in 0..r {
            let node = self.node(&path);
            let total = *node.cumulative.last().expect("truncation >= 2");
            let u = rng.random::<f64>() * total;
            let idx = node.cumulative.partition_point(|&c| c <= u).min(node.cumulative.len() - 1);
            path.push(idx as u32);
        }
        path
    }

    fn overlap(&self, a: &Leaf, b: &Leaf) -> f64 {
        self.leaf_overlap(a, b)
    }

    fn groups(&mut self, replicas: &[Leaf]) -> Option<Vec<Group>> {
        let members: Vec<usize> = (0..replicas.len()).collect();
        let mut current = vec![self.config.overlaps[0]; replicas.len()];
        let mut out = Vec::new();
        self.groups_below(&mut Vec::new(), 1.0, &members, &mut current, replicas, &mut out);
        Some(out)
    }

    fn pair_average(&mut self, f: &dyn Fn(f64) -> f64) -> Option<f64> {
        let r = self.config.levels();
        let leaves = (self.config.truncation as f64).powi(r as i32);
        if leaves > EXACT_PAIR_LEAF_LIMIT as f64 {
            return None;
        }
        let s = self.depth_square_sums();
        let mut avg = 0.0;
        for j in 0..=r {
            let next = if j < r { s[j + 1] } else { 0.0 };
            avg += f(self.config.overlaps[j]) * (s[j] - next);
        }
        Some(avg)
    }

    fn embed(&mut self, points: &[Leaf]) -> Option<Vec<ReplicaVector>> {
        let q = self.config.overlaps.clone();
        let mut sparse = Vec::with_capacity(points.len());
        for leaf in points {
            let mut coords = Vec::with_capacity(leaf.len() + 1);
            if q[0] > 0.0 {
                coords.push((self.direction(&[]), q[0].sqrt()));
            }
            for j in 1..=leaf.len() {
                coords.push((self.direction(&leaf[..j]), (q[j] - q[j - 1]).sqrt()));
            }
            sparse.push(coords);
        }
        let dim = self.directions.len().max(self.config.dimension).max(1);
        sparse
            .into_iter()
            .map(|coords| {
                let mut v = vec![0.0; dim];
                for (i, x) in coords {
                    v[i] = x;
                }
                ReplicaVector::new(v).ok()
            })
            .collect()
    }
}

/// Law of one overlap `R_{1,2}` for a one-level cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapLaw {
    /// `(value, mass)` pairs.
    pub atoms: Vec<(f64, f64)>,
    /// Approximate size of the shift of the mass at `q*` caused by truncating
    /// at `K` atoms (arrival times replaced by their means).
    pub truncation_bias_bound: f64,
}

impl OverlapLaw {
    pub fn mass_at(&self, value: f64) -> f64 {
        self.atoms.iter().filter(|(v, _)| *v == value).map(|(_, m)| m).sum()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|(v, m)| m * f(*v)).sum()
    }
}

/// `mu = (1 - zeta) delta_{q*} + zeta delta_{q_0}` in the untruncated limit.
pub fn exact_overlap_law(config: &CascadeConfig) -> Result<OverlapLaw> {
    config.validate()?;
    if config.levels() != 1 {
        return Err(Error::Unsupported(format!(
            "exact overlap law is only available for one-level cascades (got {} levels)",
            config.levels()
        )));
    }
    let zeta = config.zetas[0];
    let tail = tail_fraction(1.0 / zeta, config.truncation);
    let bias = (1.0 - zeta) * ((1.0 - tail).powi(-2) - 1.0);
    Ok(OverlapLaw {
        atoms: vec![(config.q_star(), 1.0 - zeta), (config.overlaps[0], zeta)],
        truncation_bias_bound: bias,
    })
}

/// `sum_{k > K} k^-s / sum_k k^-s` with an Euler-Maclaurin tail.
fn tail_fraction(s: f64, k: usize) -> f64 {
    let head: f64 = (1..=k).map(|i| (i as f64).powf(-s)).sum();
    let kf = k as f64;
    let tail = kf.powf(1.0 - s) / (s - 1.0) - 0.5 * kf.powf(-s) + s * kf.powf(-s - 1.0) / 12.0;
    tail / (head + tail)
}
