//! The walk killed on entering a removed set: its sub-stochastic kernel, the
//! quasistationary distribution and the leading spectral gap.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{BoxSpec, SiteSet, TorusGeometry};
use crate::linalg::{dot, norm2, ScaledAdjacency};
use crate::potential::EquilibriumMeasure;

const NONE: u32 = u32::MAX;

/// P restricted to the states outside a removed set.
#[derive(Clone, Debug)]
pub struct ConditionedKernel {
    geom: TorusGeometry,
    /// Torus index of each state, increasing.
    states: Vec<usize>,
    /// State number per torus index, `u32::MAX` for removed sites.
    slot: Vec<u32>,
    adj: ScaledAdjacency,
}

/// Builds the kernel on the complement of `removed`; the complement must be connected.
pub fn build_kernel(geom: &TorusGeometry, removed: &SiteSet) -> Result<ConditionedKernel> {
    if removed.is_full() {
        return Err(Error::EmptySet("no states left"));
    }
    let states: Vec<usize> = (0..geom.volume()).filter(|&i| !removed.contains(i)).collect();
    if states.len() > NONE as usize {
        return Err(Error::InvalidArgument("too many states".into()));
    }
    let mut slot = vec![NONE; geom.volume()];
    for (k, &i) in states.iter().enumerate() {
        slot[i] = k as u32;
    }
    let mut offsets = Vec::with_capacity(states.len() + 1);
    let mut cols = Vec::with_capacity(states.len() * 2 * geom.dim());
    offsets.push(0);
    for &i in &states {
        for dir in 0..2 * geom.dim() {
            let j = slot[geom.neighbor(i, dir)];
            if j != NONE {
                cols.push(j);
            }
        }
        offsets.push(cols.len());
    }
    let kernel = ConditionedKernel {
        geom: *geom,
        states,
        slot,
        adj: ScaledAdjacency { offsets, cols, weight: 1.0 / (2 * geom.dim()) as f64 },
    };
    if !kernel.is_connected() {
        return Err(Error::Disconnected);
    }
    Ok(kernel)
}

impl ConditionedKernel {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn geometry(&self) -> &TorusGeometry {
        &self.geom
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// State number of a torus index.
    pub fn state_of(&self, index: usize) -> Option<usize> {
        self.slot.get(index).copied().filter(|&s| s != NONE).map(|s| s as usize)
    }

    pub fn row_sum(&self, state: usize) -> f64 {
        self.adj.row(state).len() as f64 * self.adj.weight
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.adj.matvec(x, y)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in self.adj.row(i) {
                if !seen[j as usize] {
                    seen[j as usize] = true;
                    count += 1;
                    queue.push_back(j as usize);
                }
            }
        }
        count == self.len()
    }

    /// Dense copy of the kernel, for small instances.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for &j in self.adj.row(i) {
                m[(i, j as usize)] = self.adj.weight;
            }
        }
        m
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuasistationaryResult {
    /// Quasistationary distribution, indexed by state.
    pub sigma: Vec<f64>,
    /// Perron vector with unit Euclidean norm and positive entries.
    pub v1: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gap: f64,
    /// Max-norm eigen residuals for the unit-norm eigenvectors.
    pub residual1: f64,
    pub residual2: f64,
    pub iterations1: usize,
    pub iterations2: usize,
}

struct RitzPairs {
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    iterations: usize,
}

fn orthonormalize(block: &mut [Vec<f64>], against: &[Vec<f64>]) {
    for k in 0..block.len() {
        let (done, rest) = block.split_at_mut(k);
        let v = &mut rest[0];
        for _ in 0..2 {
            for q in against.iter().chain(done.iter()) {
                let c = dot(q, v);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let n = norm2(v);
        v.iter_mut().for_each(|vi| *vi /= n);
    }
}

/// Block subspace iteration with Rayleigh-Ritz on the lazy kernel (I + P)/2,
/// kept orthogonal to `deflate`. Converges the top `wanted` pairs of P.
fn subspace_iteration(
    k: &ConditionedKernel,
    block: usize,
    wanted: usize,
    deflate: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> Result<RitzPairs> {
    let n = k.len();
    let block = block.min(n - deflate.len());
    // Deterministic, generic starting block.
    let mut q: Vec<Vec<f64>> = (0..block)
        .map(|b| (0..n).map(|i| 1.0 + 0.5 * (((i * 7919 + b * 104_729) % 1009) as f64 / 1009.0 - 0.5)).collect())
        .collect();
    orthonormalize(&mut q, deflate);
    let mut pq: Vec<Vec<f64>> = vec![vec![0.0; n]; block];
    let mut last = RitzPairs { values: vec![], vectors: vec![], residuals: vec![f64::INFINITY], iterations: 0 };
    for it in 1..=max_iter {
        for (v, w) in q.iter().zip(pq.iter_mut()) {
            k.apply(v, w);
        }
        // Rayleigh-Ritz on span(q) for P.
        let mut h = DMatrix::<f64>::zeros(block, block);
        for a in 0..block {
            for b in a..block {
                let x = dot(&q[a], &pq[b]);
                h[(a, b)] = x;
                h[(b, a)] = x;
            }
        }
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let combine = |src: &[Vec<f64>], col: usize| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (a, s) in src.iter().enumerate() {
                let c = eig.eigenvectors[(a, col)];
                out.iter_mut().zip(s).for_each(|(o, x)| *o += c * x);
            }
            out
        };
        let ritz: Vec<Vec<f64>> = order.iter().map(|&c| combine(&q, c)).collect();
        let pritz: Vec<Vec<f64>> = order.iter().map(|&c| combine(&pq, c)).collect();
        let values: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c]).collect();
        let residuals: Vec<f64> = (0..wanted)
            .map(|j| {
                pritz[j].iter().zip(&ritz[j]).map(|(p, v)| (p - values[j] * v).abs()).fold(0.0, f64::max)
            })
            .collect();
        let done = residuals.iter().all(|&r| r <= tol);
        last = RitzPairs {
            values: values[..wanted].to_vec(),
            vectors: ritz[..wanted].to_vec(),
            residuals,
            iterations: it,
        };
        if done {
            return Ok(last);
        }
        // Next block: lazy step applied to the Ritz vectors.
        q = ritz.iter().zip(&pritz).map(|(v, p)| v.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect()).collect();
        orthonormalize(&mut q, deflate);
    }
    Err(Error::EigenNotConverged { residual: last.residuals.iter().cloned().fold(0.0, f64::max), iterations: max_iter })
}

/// Perron pair, second eigenvalue and quasistationary distribution of the kernel.
pub fn quasistationary(k: &ConditionedKernel, tol: f64, max_iter: usize) -> Result<QuasistationaryResult> {
    if k.len() < 2 {
        return Err(Error::InvalidArgument("need at least two states".into()));
    }
    let top = subspace_iteration(k, 4, 1, &[], tol, max_iter)?;
    let mut v1 = top.vectors[0].clone();
    if v1.iter().sum::<f64>() < 0.0 {
        v1.iter_mut().for_each(|x| *x = -*x);
    }
    let second = subspace_iteration(k, 6, 1, std::slice::from_ref(&v1), tol, max_iter)?;
    let total: f64 = v1.iter().sum();
    let sigma: Vec<f64> = v1.iter().map(|x| (x / total).max(0.0)).collect();
    let (lambda1, lambda2) = (top.values[0], second.values[0]);
    Ok(QuasistationaryResult {
        sigma,
        v1,
        lambda1,
        lambda2,
        gap: lambda1 - lambda2,
        residual1: top.residuals[0],
        residual2: second.residuals[0],
        iterations1: top.iterations,
        iterations2: second.iterations,
    })
}

/// Time evolution used for conditioned distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Clock {
    /// Steps of (I + P)/2.
    Lazy,
    /// Continuous time, by uniformization of exp(-t(I - P)).
    Continuous,
}

/// Law of the walk started at `start` (a state number) after `t` units, conditioned on
/// not having been killed. For the lazy clock `t` counts steps.
pub fn conditioned_distribution(k: &ConditionedKernel, start: usize, t: f64, clock: Clock) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time {t} must be >= 0")));
    }
    if start >= k.len() {
        return Err(Error::InvalidArgument("start is not a state".into()));
    }
    let n = k.len();
    let mut p = vec![0.0; n];
    p[start] = 1.0;
    let mut tmp = vec![0.0; n];
    let out = match clock {
        Clock::Lazy => {
            for _ in 0..t.round() as usize {
                k.apply(&p, &mut tmp);
                p.iter_mut().zip(&tmp).for_each(|(a, b)| *a = 0.5 * (*a + b));
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|a| *a /= s);
            }
            p
        }
        Clock::Continuous => {
            // sum_j Poisson(t; j) P^j e_start, renormalized as we go to avoid underflow.
            let mut acc = vec![0.0; n];
            let mut weight = (-t).exp();
            let mut log_scale = 0.0f64;
            let jmax = (t + 12.0 * t.sqrt() + 30.0).ceil() as usize;
            for j in 0..=jmax {
                acc.iter_mut().zip(&p).for_each(|(a, x)| *a += weight * x);
                k.apply(&p, &mut tmp);
                let s: f64 = tmp.iter().sum();
                if s == 0.0 {
                    break;
                }
                p.iter_mut().zip(&tmp).for_each(|(a, b)| *a = b / s);
                log_scale += s.ln();
                weight = (-t + (j + 1) as f64 * t.max(f64::MIN_POSITIVE).ln() - statrs::function::gamma::ln_gamma((j + 2) as f64) + log_scale).exp();
            }
            acc
        }
    };
    let s: f64 = out.iter().sum();
    Ok(out.iter().map(|x| x / s).collect())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Least-squares slope of ln(TV to sigma) against time over the points with TV in [lo, hi].
pub fn tv_decay_slope(k: &ConditionedKernel, sigma: &[f64], start: usize, lo: f64, hi: f64, max_steps: usize) -> Result<f64> {
    let n = k.len();
    let mut p = vec![0.0; n];
    p[start] = 1.0;
    let mut tmp = vec![0.0; n];
    let mut pts = Vec::new();
    for step in 1..=max_steps {
        k.apply(&p, &mut tmp);
        p.iter_mut().zip(&tmp).for_each(|(a, b)| *a = 0.5 * (*a + b));
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|a| *a /= s);
        let tv = total_variation(&p, sigma);
        if tv < lo {
            break;
        }
        if tv <= hi {
            pts.push((step as f64, tv.ln()));
        }
    }
    if pts.len() < 3 {
        return Err(Error::InvalidArgument("too few points in the fitting window".into()));
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(num / den)
}

/// CSV of sigma: site coordinates and mass, one row per state.
pub fn write_sigma_csv<W: Write>(k: &ConditionedKernel, sigma: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=k.geom.dim()).map(|a| format!("x{a}")).collect();
    header.push("mass".into());
    w.write_record(&header)?;
    for (s, &i) in k.states.iter().enumerate() {
        let mut rec: Vec<String> = k.geom.site(i).coords().iter().map(|c| c.to_string()).collect();
        rec.push(format!("{:.15e}", sigma[s]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HittingComparison {
    pub hits: usize,
    /// Torus index of each inner-boundary site of the union of boxes.
    pub sites: Vec<usize>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub max_relative_deviation: f64,
}

/// Starts walks from sigma and records where they first enter the union of the
/// boxes `a_boxes`; compares with e_A(x - x_i) / (n cap A).
pub fn hitting_from_sigma<R: Rng + ?Sized>(
    k: &ConditionedKernel,
    sigma: &[f64],
    a_boxes: &[BoxSpec],
    eq_a: &EquilibriumMeasure,
    hits: usize,
    rng: &mut R,
) -> Result<HittingComparison> {
    let geom = k.geom;
    let mut a_union = SiteSet::empty(&geom);
    let mut predicted_at = vec![0.0; geom.volume()];
    let n_boxes = a_boxes.len() as f64;
    for (b, bx) in a_boxes.iter().enumerate() {
        let sites = bx.torus_sites(&geom)?;
        if !sites.is_disjoint(&a_union) {
            let other = a_boxes[..b]
                .iter()
                .position(|o| !o.torus_sites(&geom).map(|s| s.is_disjoint(&sites)).unwrap_or(true))
                .unwrap_or(0);
            return Err(Error::OverlappingBoxes(other, b));
        }
        a_union = a_union.union(&sites);
        for (x, w) in eq_a.set.sites().iter().zip(&eq_a.weights) {
            let i = geom.index(&(x + &bx.center))?;
            predicted_at[i] = w / (n_boxes * eq_a.capacity);
        }
    }
    if a_union.indices().iter().any(|&i| k.state_of(i).is_some()) {
        return Err(Error::InvalidArgument("the boxes must lie inside the removed set".into()));
    }
    let alias = WeightedAliasIndex::new(sigma.to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut counts = vec![0u64; geom.volume()];
    let dirs = 2 * geom.dim();
    for _ in 0..hits {
        let mut x = k.states[alias.sample(rng)];
        while !a_union.contains(x) {
            x = geom.neighbor(x, rng.random_range(0..dirs));
        }
        counts[x] += 1;
    }
    let sites: Vec<usize> = a_union.indices().into_iter().filter(|&i| predicted_at[i] > 0.0 || counts[i] > 0).collect();
    let observed: Vec<f64> = sites.iter().map(|&i| counts[i] as f64 / hits as f64).collect();
    let predicted: Vec<f64> = sites.iter().map(|&i| predicted_at[i]).collect();
    let max_relative_deviation = observed
        .iter()
        .zip(&predicted)
        .map(|(o, p)| if *p > 0.0 { (o / p - 1.0).abs() } else { f64::INFINITY })
        .fold(0.0, f64::max);
    Ok(HittingComparison { hits, sites, observed, predicted, max_relative_deviation })
}
