//! Local sampling of random interlacements on a finite window K of Z^d.
//!
//! At level u the trace on K is that of Poisson(u cap(K)) independent walks
//! started from the normalized equilibrium measure of K. Infinite walks are
//! cut when they leave a large box around K; the chance that a cut walk would
//! have come back is bounded and reported alongside every sample.

use std::io::Write;

use base64::Engine;
use bitvec::prelude::*;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoxGrid, LocalSet, Site};
use crate::potential::{hit_prob_far_bound, EquilibriumMeasure, GreenTable};
use crate::stats::{chi_square_two_sample, ChiSquareTest};

/// Where the simulated walks are stopped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    /// Walks stop on leaving B(center(K), radius).
    pub radius: usize,
}

impl TruncationPolicy {
    /// Eight times the radius of the smallest box around K.
    pub fn default_for(k: &LocalSet) -> Self {
        let r = k.bounding_ball().map_or(0, |(_, r)| r);
        TruncationPolicy { radius: 8 * r.max(1) }
    }

    /// Upper envelope on the probability that a stopped walk would have returned to K.
    pub fn budget(&self, k: &LocalSet) -> f64 {
        let (r, dim) = (k.bounding_ball().map_or(0, |(_, r)| r), k.dim().unwrap_or(3));
        hit_prob_far_bound((r.max(1)) as f64, self.radius as f64, dim).min(1.0)
    }
}

/// Trace of the interlacement at one level on the window K.
#[derive(Clone, Debug, PartialEq)]
pub struct InterlacementSample {
    pub level: f64,
    /// visited[i] refers to `window.sites()[i]`.
    pub visited: BitVec,
    pub trajectories: usize,
    pub trunc_radius: usize,
    pub budget: f64,
}

impl InterlacementSample {
    pub fn visited_count(&self) -> usize {
        self.visited.count_ones()
    }

    pub fn is_vacant(&self, i: usize) -> bool {
        !self.visited[i]
    }

    pub fn visited_sites<'a>(&'a self, window: &'a LocalSet) -> impl Iterator<Item = &'a Site> {
        window.sites().iter().zip(self.visited.iter()).filter(|(_, v)| **v).map(|(s, _)| s)
    }

    /// One JSON line: level, visited count and the vacancy bitmap (bit i set when
    /// window site i is vacant, least significant bit first) in standard base64.
    pub fn write_json_line<W: Write>(&self, mut out: W) -> Result<()> {
        let mut vacancy: BitVec<u8, Lsb0> = BitVec::with_capacity(self.visited.len());
        vacancy.extend(self.visited.iter().map(|v| !*v));
        let line = SampleLine {
            u: self.level,
            visited_count: self.visited_count(),
            vacancy_bitmap_base64: base64::engine::general_purpose::STANDARD.encode(vacancy.as_raw_slice()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SampleLine {
    u: f64,
    visited_count: usize,
    vacancy_bitmap_base64: String,
}

/// Decodes a vacancy bitmap written by [`InterlacementSample::write_json_line`].
pub fn decode_vacancy_bitmap(encoded: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(encoded)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let bits = BitVec::<u8, Lsb0>::from_vec(bytes);
    if bits.len() < len {
        return Err(Error::InvalidArgument("bitmap shorter than the window".into()));
    }
    Ok(bits.iter().take(len).map(|b| *b).collect())
}

/// Sampler bound to a window, its equilibrium measure and a truncation policy.
pub struct InterlacementSampler {
    window: LocalSet,
    capacity: f64,
    starts: Vec<usize>,
    alias: WeightedAliasIndex<f64>,
    grid: BoxGrid,
    offset: Site,
    /// Window slot per grid cell, u32::MAX outside the window.
    slot: Vec<u32>,
    policy: TruncationPolicy,
    budget: f64,
}

/// Trajectories with their labels; the trace at level u uses those with label <= u.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub max_level: f64,
    pub labels: Vec<f64>,
    pub traces: Vec<Vec<u32>>,
    window_len: usize,
    trunc_radius: usize,
    budget: f64,
}

impl LabeledBatch {
    pub fn at_level(&self, u: f64) -> InterlacementSample {
        let mut visited = bitvec![0; self.window_len];
        let mut used = 0;
        for (label, trace) in self.labels.iter().zip(&self.traces) {
            if *label <= u {
                used += 1;
                for &i in trace {
                    visited.set(i as usize, true);
                }
            }
        }
        InterlacementSample { level: u, visited, trajectories: used, trunc_radius: self.trunc_radius, budget: self.budget }
    }
}

impl InterlacementSampler {
    pub fn new(eq: &EquilibriumMeasure, policy: TruncationPolicy) -> Result<Self> {
        let window = eq.set.clone();
        let (center, r) = window.bounding_ball().ok_or(Error::EmptySet("window"))?;
        if policy.radius <= r {
            return Err(Error::InvalidArgument(format!(
                "truncation radius {} must exceed the window radius {r}",
                policy.radius
            )));
        }
        let starts: Vec<usize> = (0..window.len()).filter(|&i| eq.weights[i] > 0.0).collect();
        let alias = WeightedAliasIndex::new(starts.iter().map(|&i| eq.weights[i]).collect())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let grid = BoxGrid::new(window.dim().unwrap(), policy.radius);
        let mut slot = vec![u32::MAX; grid.len()];
        for (i, x) in window.sites().iter().enumerate() {
            slot[grid.index_of(&(x - &center)).unwrap()] = i as u32;
        }
        let budget = policy.budget(&window);
        Ok(InterlacementSampler {
            capacity: eq.capacity,
            starts,
            alias,
            grid,
            offset: center,
            slot,
            policy,
            budget,
            window,
        })
    }

    pub fn window(&self) -> &LocalSet {
        &self.window
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    /// Window slots visited by one walk from window slot `start` until it leaves the box.
    fn trace<R: Rng + ?Sized>(&self, start: usize, rng: &mut R, seen: &mut Vec<u32>) {
        let mut x = self.grid.index_of(&(&self.window.sites()[start] - &self.offset)).unwrap();
        let dirs = 2 * self.grid.dim();
        seen.clear();
        seen.push(start as u32);
        loop {
            match self.grid.neighbor(x, rng.random_range(0..dirs)) {
                None => break,
                Some(y) => x = y,
            }
            let s = self.slot[x];
            if s != u32::MAX {
                seen.push(s);
            }
        }
        seen.sort_unstable();
        seen.dedup();
    }

    /// Labeled trajectories for all levels up to `max_level` at once.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, max_level: f64, rng: &mut R) -> Result<LabeledBatch> {
        if !(max_level >= 0.0) {
            return Err(Error::InvalidArgument(format!("level {max_level} must be >= 0")));
        }
        let mean = max_level * self.capacity;
        let n = if mean > 0.0 { Poisson::new(mean).unwrap().sample(rng) as usize } else { 0 };
        let mut labels = Vec::with_capacity(n);
        let mut traces = Vec::with_capacity(n);
        let mut seen = Vec::new();
        for _ in 0..n {
            labels.push(rng.random::<f64>() * max_level);
            let start = self.starts[self.alias.sample(rng)];
            self.trace(start, rng, &mut seen);
            traces.push(seen.clone());
        }
        Ok(LabeledBatch {
            max_level,
            labels,
            traces,
            window_len: self.window.len(),
            trunc_radius: self.policy.radius,
            budget: self.budget,
        })
    }

    /// Trace at level `u`.
    pub fn sample<R: Rng + ?Sized>(&self, u: f64, rng: &mut R) -> Result<InterlacementSample> {
        Ok(self.sample_labeled(u, rng)?.at_level(u))
    }
}

/// One-shot sampling of the trace on K at level u.
pub fn sample_interlacement<R: Rng + ?Sized>(
    u: f64,
    eq: &EquilibriumMeasure,
    policy: TruncationPolicy,
    rng: &mut R,
) -> Result<InterlacementSample> {
    if u < 0.0 {
        return Err(Error::InvalidArgument(format!("level {u} must be >= 0")));
    }
    InterlacementSampler::new(eq, policy)?.sample(u, rng)
}

/// Probability that a given site is vacant at level u.
pub fn vacancy_one(u: f64, g0: f64) -> f64 {
    (-u / g0).exp()
}

/// Probability that 0 and x are both vacant at level u.
pub fn vacancy_two(u: f64, x: &Site, green: &GreenTable) -> Result<f64> {
    if x.is_origin() {
        return Err(Error::InvalidArgument("two-point vacancy needs x != 0".into()));
    }
    Ok((-2.0 * u / (green.g0() + green.value(x))).exp())
}

/// Sum over v in K of the two-point vacancy of {0, v}, with its envelope
/// |K| exp(-2u/g0) exp(2u g_max / (g0 (g0 + g_max))).
pub fn two_point_sum(k: &LocalSet, u: f64, green: &GreenTable) -> Result<(f64, f64)> {
    if k.contains(&Site::origin(green.dim())) {
        return Err(Error::InvalidArgument("window contains the origin".into()));
    }
    let g0 = green.g0();
    let gs: Vec<f64> = k.sites().iter().map(|v| green.value(v)).collect();
    let sum = gs.iter().map(|g| (-2.0 * u / (g0 + g)).exp()).sum();
    let g_max = gs.iter().cloned().fold(0.0, f64::max);
    // exp(-2u/g0) exp(2u g_max/(g0(g0+g_max))) equals the largest summand exactly.
    let envelope = k.len() as f64 * (-2.0 * u / (g0 + g_max)).exp();
    Ok((sum, envelope))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub test: ChiSquareTest,
    /// Histogram of the number of vacant window sites, union arm.
    pub union_counts: Vec<u64>,
    /// Same histogram, direct arm at level u + v.
    pub direct_counts: Vec<u64>,
}

/// Compares the union of independent traces at levels u and v with a direct
/// trace at level u + v through the law of the number of vacant sites.
pub fn additivity_check<R: Rng + ?Sized>(
    sampler: &InterlacementSampler,
    u: f64,
    v: f64,
    samples: usize,
    rng: &mut R,
) -> Result<AdditivityReport> {
    if u < 0.0 || v < 0.0 {
        return Err(Error::InvalidArgument("levels must be >= 0".into()));
    }
    let n = sampler.window().len();
    let mut union_counts = vec![0u64; n + 1];
    let mut direct_counts = vec![0u64; n + 1];
    for _ in 0..samples {
        let mut a = sampler.sample(u, rng)?.visited;
        a |= sampler.sample(v, rng)?.visited;
        union_counts[n - a.count_ones()] += 1;
        let b = sampler.sample(u + v, rng)?;
        direct_counts[n - b.visited_count()] += 1;
    }
    Ok(AdditivityReport { test: chi_square_two_sample(&union_counts, &direct_counts), union_counts, direct_counts })
}
