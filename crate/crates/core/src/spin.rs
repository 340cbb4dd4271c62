//! Finite-N mixed p-spin Gibbs measures.
//!
//! `H_p(s) = N^{-(p-1)/2} sum_{i_1 < ... < i_p} g_{i_1..i_p} s_{i_1} ... s_{i_p}` with
//! i.i.d. standard normal couplings; the model energy is
//! `sum_p beta_p H_p(s)` plus any perturbation terms `x_p H'_p(s)` with their
//! own couplings. The Gibbs weight is proportional to `exp(energy)`.
//! Overlaps are normalized, `R = (1/N) s . s'`, so `q* = 1`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{Group, MeasureSource, Realization};
use crate::overlap::{OverlapMatrix, ReplicaVector};
use crate::seed::{SeedKey, Stream};

/// Largest N accepted by exact enumeration.
pub const ENUMERATION_LIMIT: usize = 22;

const MAX_TUPLES: usize = 5_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PSpinTerm {
    pub p: usize,
    pub beta: f64,
}

/// Perturbation term with couplings drawn from its own seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTerm {
    pub p: usize,
    pub magnitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPSpinModel {
    #[serde(alias = "N")]
    pub n: usize,
    pub terms: Vec<PSpinTerm>,
    #[serde(default)]
    pub perturbation: Vec<PerturbationTerm>,
}

impl MixedPSpinModel {
    /// Sherrington-Kirkpatrick: a single `p = 2` term.
    pub fn sk(n: usize, beta: f64) -> Self {
        MixedPSpinModel { n, terms: vec![PSpinTerm { p: 2, beta }], perturbation: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return invalid("model needs N >= 1");
        }
        if self.terms.is_empty() {
            return invalid("model needs at least one term");
        }
        let ps = self.terms.iter().map(|t| (t.p, t.beta)).chain(self.perturbation.iter().map(|t| (t.p, t.magnitude)));
        for (p, x) in ps {
            if p == 0 || p > self.n {
                return invalid(format!("term order p = {p} must lie in 1..={}", self.n));
            }
            if !x.is_finite() || x < 0.0 {
                return invalid("term magnitudes must be finite and non-negative");
            }
            if binomial(self.n, p) > MAX_TUPLES {
                return invalid(format!("p = {p} with N = {} has too many couplings", self.n));
            }
        }
        Ok(())
    }
}

/// Appends perturbation terms `(p, x_p)` whose couplings come from `seed`.
pub fn add_perturbation(model: &MixedPSpinModel, schedule: &[(usize, f64)], seed: u64) -> Result<MixedPSpinModel> {
    if schedule.iter().any(|(_, x)| !x.is_finite()) {
        return invalid("perturbation magnitudes must be finite");
    }
    let mut out = model.clone();
    out.perturbation.extend(schedule.iter().map(|&(p, magnitude)| PerturbationTerm { p, magnitude, seed }));
    Ok(out)
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k as u128 {
        acc = acc * (n as u128 - i) / (i + 1);
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Index tuples `i_1 < ... < i_p` in lexicographic order.
fn combinations(n: usize, p: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::with_capacity(binomial(n, p));
    let mut cur: Vec<u16> = (0..p as u16).collect();
    if p == 0 || p > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = p;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if (cur[i] as usize) < n - p + i {
                break;
            }
        }
        cur[i] += 1;
        for j in (i + 1)..p {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Interaction {
    /// `beta_p * N^{-(p-1)/2}` (or `x_p * ...` for perturbations).
    prefactor: f64,
    tuples: Vec<Vec<u16>>,
    couplings: Vec<f64>,
    /// Tuple indices containing each spin.
    by_spin: Vec<Vec<u32>>,
}

/// One draw of every coupling tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderRealization {
    pub seed: u64,
    n: usize,
    interactions: Vec<Interaction>,
}

impl DisorderRealization {
    /// Couplings of main term `k`, then of perturbation terms, in declaration order.
    pub fn couplings(&self, k: usize) -> &[f64] {
        &self.interactions[k].couplings
    }

    /// Replaces every coupling of term `k` (tests and hand-built instances).
    pub fn set_couplings(&mut self, k: usize, g: Vec<f64>) -> Result<()> {
        let it = self.interactions.get_mut(k).ok_or_else(|| Error::InvalidInput(format!("no term {k}")))?;
        if it.couplings.len() != g.len() {
            return Err(Error::SizeMismatch(format!("term {k} has {} couplings", it.couplings.len())));
        }
        it.couplings = g;
        Ok(())
    }

    fn delta_flip(&self, sigma: &[i8], i: usize) -> f64 {
        let mut local = 0.0;
        for it in &self.interactions {
            let mut s = 0.0;
            for &t in &it.by_spin[i] {
                let t = t as usize;
                let prod: i32 = it.tuples[t].iter().map(|&k| i32::from(sigma[k as usize])).product();
                s += it.couplings[t] * f64::from(prod);
            }
            local += it.prefactor * s;
        }
        -2.0 * local
    }
}

/// Draws couplings: main term `k` from `(seed, k)`, perturbation term `j` from
/// `(its own seed, j)`, so the two families never share randomness.
pub fn draw_disorder(model: &MixedPSpinModel, seed: u64) -> Result<DisorderRealization> {
    model.validate()?;
    let n = model.n;
    let mut interactions = Vec::new();
    let main = SeedKey::new(seed).named("main");
    let specs = model
        .terms
        .iter()
        .enumerate()
        .map(|(k, t)| (t.p, t.beta, main.child(k as u64)))
        .chain(
            model
                .perturbation
                .iter()
                .enumerate()
                .map(|(j, t)| (t.p, t.magnitude, SeedKey::new(t.seed).named("perturbation").child(j as u64))),
        );
    for (p, weight, key) in specs {
        let tuples = combinations(n, p);
        let mut rng = key.stream();
        let couplings: Vec<f64> = (0..tuples.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut by_spin = vec![Vec::new(); n];
        for (t, tup) in tuples.iter().enumerate() {
            for &i in tup {
                by_spin[i as usize].push(t as u32);
            }
        }
        let prefactor = weight * (n as f64).powf(-((p as f64) - 1.0) / 2.0);
        interactions.push(Interaction { prefactor, tuples, couplings, by_spin });
    }
    Ok(DisorderRealization { seed, n, interactions })
}

pub fn energy(model: &MixedPSpinModel, disorder: &DisorderRealization, sigma: &[i8]) -> Result<f64> {
    if sigma.len() != model.n || disorder.n != model.n {
        return Err(Error::DimensionMismatch { expected: model.n, found: sigma.len() });
    }
    Ok(energy_unchecked(disorder, sigma))
}

fn energy_unchecked(disorder: &DisorderRealization, sigma: &[i8]) -> f64 {
    disorder
        .interactions
        .iter()
        .map(|it| {
            let s: f64 = it
                .tuples
                .iter()
                .zip(&it.couplings)
                .map(|(tup, g)| g * f64::from(tup.iter().map(|&k| i32::from(sigma[k as usize])).product::<i32>()))
                .sum();
            it.prefactor * s
        })
        .sum()
}

/// Configuration `index` (bit `i` set means spin `i` is `+1`).
pub fn config_from_index(n: usize, index: u32) -> Vec<i8> {
    (0..n).map(|i| if (index >> i) & 1 == 1 { 1 } else { -1 }).collect()
}

pub fn config_index(sigma: &[i8]) -> u32 {
    sigma.iter().enumerate().fold(0, |acc, (i, &s)| if s > 0 { acc | (1 << i) } else { acc })
}

/// Normalized overlap `(1/N) sum_i s_i s'_i`.
pub fn spin_overlap(a: &[i8], b: &[i8]) -> f64 {
    let dot: i32 = a.iter().zip(b).map(|(&x, &y)| i32::from(x) * i32::from(y)).sum();
    f64::from(dot) / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCParams {
    /// Sweeps after burn-in.
    pub sweeps: usize,
    pub burn_in: usize,
    /// Inverse-temperature multipliers; the first must be 1 (the target).
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_ladder() -> Vec<f64> {
    vec![1.0]
}

fn default_thinning() -> usize {
    10
}

impl MCParams {
    pub fn new(sweeps: usize, burn_in: usize, seed: u64) -> Self {
        MCParams { sweeps, burn_in, ladder: default_ladder(), thinning: default_thinning(), seed }
    }

    /// Geometric ladder `1, r, r^2, ..., lowest` with `levels` rungs.
    pub fn with_geometric_ladder(mut self, levels: usize, lowest: f64) -> Self {
        self.ladder = if levels <= 1 {
            vec![1.0]
        } else {
            (0..levels).map(|k| lowest.powf(k as f64 / (levels - 1) as f64)).collect()
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return invalid("thinning must be positive");
        }
        if self.ladder.first() != Some(&1.0) {
            return invalid("temperature ladder must start at 1");
        }
        if self.ladder.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return invalid("ladder multipliers must be positive");
        }
        Ok(())
    }
}

/// Replicas at every rung of a tempering ladder.
struct Tempered<'a> {
    disorder: &'a DisorderRealization,
    ladder: &'a [f64],
    states: Vec<Vec<i8>>,
    energies: Vec<f64>,
}

impl<'a> Tempered<'a> {
    fn new(disorder: &'a DisorderRealization, ladder: &'a [f64], rng: &mut Stream) -> Self {
        let n = disorder.n;
        let states: Vec<Vec<i8>> = ladder
            .iter()
            .map(|_| (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
            .collect();
        let energies = states.iter().map(|s| energy_unchecked(disorder, s)).collect();
        Tempered { disorder, ladder, states, energies }
    }

    /// `N` random-site Metropolis proposals per rung, then adjacent swaps.
    fn sweep(&mut self, rng: &mut Stream) {
        let n = self.disorder.n;
        for (k, &lambda) in self.ladder.iter().enumerate() {
            let state = &mut self.states[k];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                let d = self.disorder.delta_flip(state, i);
                if d >= 0.0 || rng.random::<f64>() < (lambda * d).exp() {
                    state[i] = -state[i];
                    self.energies[k] += d;
                }
            }
        }
        for k in 0..self.ladder.len().saturating_sub(1) {
            let a = (self.ladder[k] - self.ladder[k + 1]) * (self.energies[k + 1] - self.energies[k]);
            if a >= 0.0 || rng.random::<f64>() < a.exp() {
                self.states.swap(k, k + 1);
                self.energies.swap(k, k + 1);
            }
        }
    }

    fn target(&self) -> &[i8] {
        &self.states[0]
    }
}

/// One chain at the target temperature, sampled every `thinning` sweeps
/// after burn-in.
pub fn run_chain(model: &MixedPSpinModel, disorder: &DisorderRealization, mc: &MCParams, key: SeedKey) -> Result<Vec<Vec<i8>>> {
    model.validate()?;
    mc.validate()?;
    let mut rng = key.stream();
    let mut t = Tempered::new(disorder, &mc.ladder, &mut rng);
    for _ in 0..mc.burn_in {
        t.sweep(&mut rng);
    }
    let mut out = Vec::with_capacity(mc.sweeps / mc.thinning);
    for s in 1..=mc.sweeps {
        t.sweep(&mut rng);
        if s % mc.thinning == 0 {
            out.push(t.target().to_vec());
        }
    }
    Ok(out)
}

fn final_state(disorder: &DisorderRealization, mc: &MCParams, key: SeedKey) -> Vec<i8> {
    let mut rng = key.stream();
    let mut t = Tempered::new(disorder, &mc.ladder, &mut rng);
    for _ in 0..(mc.burn_in + mc.sweeps) {
        t.sweep(&mut rng);
    }
    t.target().to_vec()
}

/// `n` replicas from `n` independent chains seeded from `mc.seed`.
pub fn gibbs_sample_replicas(
    model: &MixedPSpinModel,
    disorder: &DisorderRealization,
    n: usize,
    mc: &MCParams,
) -> Result<(Vec<Vec<i8>>, OverlapMatrix)> {
    model.validate()?;
    mc.validate()?;
    if n == 0 {
        return invalid("need n >= 1 replicas");
    }
    let root = SeedKey::new(mc.seed).named("replicas");
    let configs: Vec<Vec<i8>> = (0..n).map(|l| final_state(disorder, mc, root.child(l as u64))).collect();
    let r = OverlapMatrix::from_fn(n, 1.0, |i, j| spin_overlap(&configs[i], &configs[j]));
    Ok((configs, r))
}

/// Exact Boltzmann weights over all `2^N` configurations.
#[derive(Debug, Clone)]
pub struct EnumeratedGibbs {
    n: usize,
    weights: Arc<Vec<f64>>,
    cumulative: Arc<Vec<f64>>,
}

pub fn enumerate_gibbs_exact(model: &MixedPSpinModel, disorder: &DisorderRealization) -> Result<EnumeratedGibbs> {
    model.validate()?;
    let n = model.n;
    if n > ENUMERATION_LIMIT {
        return Err(Error::EnumerationBudget { n, limit: ENUMERATION_LIMIT });
    }
    let count = 1usize << n;
    let energies: Vec<f64> = (0..count).map(|i| energy_unchecked(disorder, &config_from_index(n, i as u32))).collect();
    let top = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = energies.iter().map(|e| (e - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= z;
    }
    let mut acc = 0.0;
    let cumulative = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    Ok(EnumeratedGibbs { n, weights: Arc::new(weights), cumulative: Arc::new(cumulative) })
}

impl EnumeratedGibbs {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn index_overlap(&self, a: u32, b: u32) -> f64 {
        let d = (a ^ b).count_ones() as f64;
        (self.n as f64 - 2.0 * d) / self.n as f64
    }
}

/// Group decomposition enumerates every atom; above this N callers sample instead.
const GROUP_LIMIT: usize = 14;
const PAIR_LIMIT: usize = 11;

impl Realization for EnumeratedGibbs {
    type Point = u32;

    fn q_star(&self) -> f64 {
        1.0
    }

    fn sample(&mut self, rng: &mut Stream) -> u32 {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1) as u32
    }

    fn overlap(&self, a: &u32, b: &u32) -> f64 {
        self.index_overlap(*a, *b)
    }

    fn groups(&mut self, replicas: &[u32]) -> Option<Vec<Group>> {
        if self.n > GROUP_LIMIT {
            return None;
        }
        Some(
            self.weights
                .iter()
                .enumerate()
                .map(|(i, &w)| Group { mass: w, overlaps: replicas.iter().map(|&r| self.index_overlap(i as u32, r)).collect() })
                .collect(),
        )
    }

    fn pair_average(&mut self, f: &dyn Fn(f64) -> f64) -> Option<f64> {
        if self.n > PAIR_LIMIT {
            return None;
        }
        let mut acc = 0.0;
        for (a, wa) in self.weights.iter().enumerate() {
            for (b, wb) in self.weights.iter().enumerate() {
                acc += wa * wb * f(self.index_overlap(a as u32, b as u32));
            }
        }
        Some(acc)
    }

    fn embed(&mut self, points: &[u32]) -> Option<Vec<ReplicaVector>> {
        let s = 1.0 / (self.n as f64).sqrt();
        points
            .iter()
            .map(|&p| ReplicaVector::new(config_from_index(self.n, p).iter().map(|&x| f64::from(x) * s).collect()).ok())
            .collect()
    }
}

/// Fixed-disorder enumerated measure used as a (deterministic) source.
impl MeasureSource for EnumeratedGibbs {
    type Realization = EnumeratedGibbs;

    fn q_star(&self) -> f64 {
        1.0
    }

    fn realize(&self, _key: SeedKey) -> EnumeratedGibbs {
        self.clone()
    }

    fn is_gg_reference(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("enumerated-fixed(N={})", self.n)
    }
}

/// Enumerated Gibbs measures with fresh disorder per realization.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedSpinSource {
    pub model: MixedPSpinModel,
}

impl EnumeratedSpinSource {
    pub fn new(model: MixedPSpinModel) -> Result<Self> {
        model.validate()?;
        if model.n > ENUMERATION_LIMIT {
            return Err(Error::EnumerationBudget { n: model.n, limit: ENUMERATION_LIMIT });
        }
        Ok(EnumeratedSpinSource { model })
    }
}

impl MeasureSource for EnumeratedSpinSource {
    type Realization = EnumeratedGibbs;

    fn q_star(&self) -> f64 {
        1.0
    }

    fn realize(&self, key: SeedKey) -> EnumeratedGibbs {
        let disorder = draw_disorder(&self.model, key.value()).expect("model validated");
        enumerate_gibbs_exact(&self.model, &disorder).expect("size validated")
    }

    fn is_gg_reference(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("enumerated(N={}, terms={:?})", self.model.n, self.model.terms)
    }
}

/// Monte Carlo Gibbs measures with fresh disorder per realization; each
/// replica is the final state of an independent chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsChainSource {
    pub model: MixedPSpinModel,
    pub mc: MCParams,
}

impl GibbsChainSource {
    pub fn new(model: MixedPSpinModel, mc: MCParams) -> Result<Self> {
        model.validate()?;
        mc.validate()?;
        Ok(GibbsChainSource { model, mc })
    }
}

pub struct ChainRealization {
    disorder: DisorderRealization,
    mc: MCParams,
}

impl Realization for ChainRealization {
    type Point = Vec<i8>;

    fn q_star(&self) -> f64 {
        1.0
    }

    fn sample(&mut self, rng: &mut Stream) -> Vec<i8> {
        let key = SeedKey::new(rng.random());
        final_state(&self.disorder, &self.mc, key)
    }

    fn overlap(&self, a: &Vec<i8>, b: &Vec<i8>) -> f64 {
        spin_overlap(a, b)
    }

    fn embed(&mut self, points: &[Vec<i8>]) -> Option<Vec<ReplicaVector>> {
        let s = 1.0 / (self.disorder.n as f64).sqrt();
        points.iter().map(|p| ReplicaVector::new(p.iter().map(|&x| f64::from(x) * s).collect()).ok()).collect()
    }
}

impl MeasureSource for GibbsChainSource {
    type Realization = ChainRealization;

    fn q_star(&self) -> f64 {
        1.0
    }

    fn realize(&self, key: SeedKey) -> ChainRealization {
        let disorder = draw_disorder(&self.model, key.value()).expect("model validated");
        ChainRealization { disorder, mc: self.mc.clone() }
    }

    fn is_gg_reference(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("gibbs-mc(N={}, terms={:?})", self.model.n, self.model.terms)
    }
}

/// Total-variation distance between the empirical law of `samples` and
/// exact enumeration weights.
pub fn tv_to_exact(exact: &EnumeratedGibbs, samples: &[Vec<i8>]) -> f64 {
    let mut counts = vec![0usize; exact.weights.len()];
    for s in samples {
        counts[config_index(s) as usize] += 1;
    }
    let m = samples.len() as f64;
    0.5 * counts.iter().zip(exact.weights.iter()).map(|(&c, &w)| (c as f64 / m - w).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::Estimate;

    fn hand_model(beta: f64, g: f64) -> (MixedPSpinModel, DisorderRealization) {
        let model = MixedPSpinModel::sk(2, beta);
        let mut d = draw_disorder(&model, 0).unwrap();
        d.set_couplings(0, vec![g]).unwrap();
        (model, d)
    }

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(4, 2)[0], vec![0, 1]);
        assert_eq!(combinations(4, 2)[5], vec![2, 3]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(5, 1).len(), 5);
    }

    #[test]
    fn zero_couplings_give_zero_energy() {
        let (model, d) = hand_model(1.3, 0.0);
        for idx in 0..4 {
            assert_eq!(energy(&model, &d, &config_from_index(2, idx)).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_spin_hand_evaluation() {
        let (beta, g) = (0.7, 1.9);
        let (model, d) = hand_model(beta, g);
        let e = energy(&model, &d, &[1, -1]).unwrap();
        assert!((e - beta * 2f64.powf(-0.5) * g * -1.0).abs() < 1e-15);
        assert!(energy(&model, &d, &[1, 1, 1]).is_err());
    }

    #[test]
    fn even_p_is_flip_invariant() {
        let model = MixedPSpinModel {
            n: 6,
            terms: vec![PSpinTerm { p: 2, beta: 1.0 }, PSpinTerm { p: 4, beta: 0.5 }],
            perturbation: Vec::new(),
        };
        let d = draw_disorder(&model, 3).unwrap();
        for idx in [0u32, 5, 17, 42] {
            let s = config_from_index(6, idx);
            let flipped: Vec<i8> = s.iter().map(|x| -x).collect();
            let (a, b) = (energy(&model, &d, &s).unwrap(), energy(&model, &d, &flipped).unwrap());
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_flip_matches_energy_difference() {
        let model = MixedPSpinModel {
            n: 7,
            terms: vec![PSpinTerm { p: 1, beta: 0.3 }, PSpinTerm { p: 3, beta: 0.9 }],
            perturbation: Vec::new(),
        };
        let d = draw_disorder(&model, 9).unwrap();
        let s = config_from_index(7, 77);
        for i in 0..7 {
            let mut t = s.clone();
            t[i] = -t[i];
            let diff = energy(&model, &d, &t).unwrap() - energy(&model, &d, &s).unwrap();
            assert!((diff - d.delta_flip(&s, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_two_spins_uniform_and_hand() {
        let (model, d) = hand_model(1.0, 0.0);
        let e = enumerate_gibbs_exact(&model, &d).unwrap();
        assert_eq!(e.weights(), &[0.25; 4]);

        let (beta, g) = (1.1, 0.8);
        let (model, d) = hand_model(beta, g);
        let e = enumerate_gibbs_exact(&model, &d).unwrap();
        let a = (beta * 2f64.powf(-0.5) * g).exp();
        let z = 2.0 * a + 2.0 / a;
        // aligned configurations are indices 0 (--) and 3 (++)
        assert!((e.weights()[0] - a / z).abs() < 1e-14);
        assert!((e.weights()[1] - 1.0 / (a * z)).abs() < 1e-14);
        assert!((e.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_budget_guard() {
        let model = MixedPSpinModel::sk(23, 1.0);
        let err = EnumeratedSpinSource::new(model).unwrap_err();
        assert!(err.to_string().contains("2^23"));
    }

    #[test]
    fn zero_perturbation_leaves_energies() {
        let model = MixedPSpinModel::sk(5, 1.0);
        let pert = add_perturbation(&model, &[(2, 0.0), (3, 0.0)], 99).unwrap();
        let d0 = draw_disorder(&model, 4).unwrap();
        let d1 = draw_disorder(&pert, 4).unwrap();
        for idx in 0..32 {
            let s = config_from_index(5, idx);
            assert_eq!(energy(&model, &d0, &s).unwrap(), energy(&pert, &d1, &s).unwrap());
        }
    }

    #[test]
    fn perturbation_seed_is_separate() {
        let model = add_perturbation(&MixedPSpinModel::sk(5, 1.0), &[(3, 0.1)], 99).unwrap();
        let a = draw_disorder(&model, 1).unwrap();
        let b = draw_disorder(&model, 2).unwrap();
        assert_ne!(a.couplings(0), b.couplings(0));
        assert_eq!(a.couplings(1), b.couplings(1));
    }

    #[test]
    fn perturbation_shift_is_linear() {
        let base = MixedPSpinModel::sk(8, 1.0);
        let shift = |x: f64| {
            let m = add_perturbation(&base, &[(3, x)], 5).unwrap();
            let d0 = draw_disorder(&base, 2).unwrap();
            let d1 = draw_disorder(&m, 2).unwrap();
            let mut rng = SeedKey::new(8).stream();
            let total: f64 = (0..200)
                .map(|_| {
                    let s: Vec<i8> = (0..8).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
                    (energy(&m, &d1, &s).unwrap() - energy(&base, &d0, &s).unwrap()).abs()
                })
                .sum();
            total / 200.0
        };
        let (s1, s2) = (shift(0.01), shift(0.02));
        assert!(s1 > 0.0);
        assert!((s2 / s1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn chain_matches_enumeration() {
        let model = MixedPSpinModel::sk(4, 1.0);
        let d = draw_disorder(&model, 21).unwrap();
        let exact = enumerate_gibbs_exact(&model, &d).unwrap();
        let mut mc = MCParams::new(200_000, 1000, 0);
        mc.thinning = 1;
        let samples = run_chain(&model, &d, &mc, SeedKey::new(3)).unwrap();
        let tv = tv_to_exact(&exact, &samples);
        assert!(tv < 0.02, "tv = {tv}");
    }

    #[test]
    fn tempered_chain_matches_enumeration() {
        let model = MixedPSpinModel::sk(4, 2.0);
        let d = draw_disorder(&model, 22).unwrap();
        let exact = enumerate_gibbs_exact(&model, &d).unwrap();
        let mut mc = MCParams::new(100_000, 1000, 0).with_geometric_ladder(3, 0.3);
        mc.thinning = 1;
        let samples = run_chain(&model, &d, &mc, SeedKey::new(4)).unwrap();
        assert!(tv_to_exact(&exact, &samples) < 0.02);
    }

    #[test]
    fn infinite_temperature_overlap_moments() {
        // uniform measure: E R12 = 0, Var R12 = 1/N
        let n = 10;
        let model = MixedPSpinModel::sk(n, 0.0);
        let d = draw_disorder(&model, 0).unwrap();
        let pairs = 4000;
        let mut r = Vec::with_capacity(pairs);
        for k in 0..pairs {
            let mc = MCParams::new(2, 1, k as u64);
            let (_, m) = gibbs_sample_replicas(&model, &d, 2, &mc).unwrap();
            r.push(m.get(0, 1));
        }
        let e = Estimate::from_samples(&r);
        assert!(e.z_against(0.0).abs() < 3.0);
        let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
        let e2 = Estimate::from_samples(&sq);
        assert!(e2.z_against(1.0 / n as f64).abs() < 3.0, "{e2:?}");
    }

    #[test]
    fn replicas_are_deterministic_with_unit_diagonal() {
        let model = MixedPSpinModel::sk(6, 1.0);
        let d = draw_disorder(&model, 1).unwrap();
        let mc = MCParams::new(20, 5, 77);
        let a = gibbs_sample_replicas(&model, &d, 3, &mc).unwrap();
        let b = gibbs_sample_replicas(&model, &d, 3, &mc).unwrap();
        assert_eq!(a, b);
        for i in 0..3 {
            assert_eq!(a.1.get(i, i), 1.0);
            for j in 0..3 {
                assert!(a.1.get(i, j).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn enumerated_groups_and_pairs() {
        let model = MixedPSpinModel::sk(4, 1.0);
        let src = EnumeratedSpinSource::new(model).unwrap();
        let mut real = src.realize(SeedKey::new(2));
        let groups = real.groups(&[0, 5]).unwrap();
        assert_eq!(groups.len(), 16);
        assert!((groups.iter().map(|g| g.mass).sum::<f64>() - 1.0).abs() < 1e-12);
        let p = real.pair_average(&|x| if x == 1.0 { 1.0 } else { 0.0 }).unwrap();
        let sq: f64 = real.weights().iter().map(|w| w * w).sum();
        assert!((p - sq).abs() < 1e-15);
        assert_eq!(real.overlap(&3, &3), 1.0);
    }
}
