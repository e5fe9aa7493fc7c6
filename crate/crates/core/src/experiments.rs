//! Monte Carlo harness: cover-time fluctuations, late points, the process of
//! last-covered sites, vacancy on the torus, hitting-time and excursion
//! calibrations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{separation, BoxSpec, Site, SiteSet, TorusGeometry};
use crate::linalg::{conjugate_gradient, LinearOperator};
use crate::potential::{equilibrium_measure, g0, u_of_z, DEFAULT_ENV_RADIUS, SOLVE_TOL};
use crate::rng::RngStream;
use crate::stats::{chi_square_gof, gumbel_cdf, ks_distance, ChiSquareTest, Proportion, Summary};
use crate::walk::{excursions, hitting_time, run_cover, CoverOptions, HitKind, RandomWalk, Start};

pub const DEFAULT_Z_GRID: [f64; 6] = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
pub const DEFAULT_LEVELS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Which sites must be covered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    FullTorus,
    Sites(Vec<Site>),
    /// `count` singletons on a regular sub-grid, pairwise at least `min_separation` apart.
    Separated { count: usize, min_separation: usize },
}

impl TargetSpec {
    pub fn resolve(&self, geom: &TorusGeometry) -> Result<SiteSet> {
        match self {
            TargetSpec::FullTorus => Ok(SiteSet::full(geom)),
            TargetSpec::Sites(s) => {
                let set = SiteSet::from_sites(geom, s)?;
                if set.is_empty() {
                    return Err(Error::EmptySet("target"));
                }
                Ok(set)
            }
            TargetSpec::Separated { count, min_separation } => {
                let d = geom.dim();
                let mut per_axis = 1usize;
                while per_axis.pow(d as u32) < *count {
                    per_axis += 1;
                }
                let spacing = geom.side() / per_axis;
                let mut idx = Vec::with_capacity(*count);
                for k in 0..*count {
                    let mut rest = k;
                    let coords: Vec<i64> = (0..d)
                        .map(|_| {
                            let c = rest % per_axis;
                            rest /= per_axis;
                            (c * spacing) as i64
                        })
                        .rev()
                        .collect();
                    idx.push(geom.index(&Site::new(coords))?);
                }
                let sep = (0..idx.len())
                    .flat_map(|i| (i + 1..idx.len()).map(move |j| (i, j)))
                    .map(|(i, j)| geom.dist_inf_idx(idx[i], idx[j]))
                    .min()
                    .unwrap_or(geom.side());
                if *count == 0 || sep < *min_separation {
                    return Err(Error::InvalidArgument(format!(
                        "cannot place {count} sites {min_separation} apart on side {}",
                        geom.side()
                    )));
                }
                Ok(SiteSet::from_indices(geom, idx))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub side: usize,
    pub trials: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Horizon as a multiple of g0 N^d log N^d.
    pub horizon_multiplier: f64,
    pub target: TargetSpec,
    pub z_grid: Vec<f64>,
    pub rho: f64,
    pub levels: Vec<f64>,
    pub keep_hit_times: bool,
}

impl ExperimentConfig {
    pub fn new(dim: usize, side: usize, trials: usize, seed: u64) -> Self {
        ExperimentConfig {
            dim,
            side,
            trials,
            seed,
            threads: None,
            horizon_multiplier: 50.0,
            target: TargetSpec::FullTorus,
            z_grid: DEFAULT_Z_GRID.to_vec(),
            rho: 0.25,
            levels: DEFAULT_LEVELS.to_vec(),
            keep_hit_times: false,
        }
    }

    pub fn validate(&self) -> Result<TorusGeometry> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("at least one trial is needed".into()));
        }
        if self.z_grid.iter().any(|z| !z.is_finite()) || self.z_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("z grid must be finite and sorted".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!("rho = {} must lie in (0, 1)", self.rho)));
        }
        if !(self.horizon_multiplier > 0.0) {
            return Err(Error::InvalidArgument("horizon multiplier must be positive".into()));
        }
        TorusGeometry::new(self.dim, self.side)
    }

    pub fn horizon(&self, geom: &TorusGeometry, g0: f64) -> f64 {
        let v = geom.volume() as f64;
        self.horizon_multiplier * g0 * v * v.ln().max(1.0)
    }
}

/// Runs `trial(i, rng_i)` for every trial index with its own stream; results come back in trial order.
pub fn run_trials<T, F>(cfg: &ExperimentConfig, trial: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut RngStream) -> Result<T> + Sync,
{
    let work = || (0..cfg.trials).into_par_iter().map(|i| trial(i, &mut RngStream::new(cfg.seed, i as u64))).collect();
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(work),
        None => work(),
    }
}

/// One cover sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverTrial {
    pub trial: usize,
    /// None when the horizon was reached first.
    pub cover_time: Option<f64>,
    pub normalized: Option<f64>,
    /// Last covered sites, most recent first.
    pub last_k: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GumbelFit {
    pub g0: f64,
    pub target_size: usize,
    pub trials: Vec<CoverTrial>,
    /// Indices of trials cut by the horizon.
    pub truncated: Vec<usize>,
    pub summary: Summary,
    pub variance_std_error: f64,
    pub ks: f64,
    /// KS distance to the law of the maximum of |F| independent exponentials, (1 - e^{-z}/|F|)^|F|.
    pub ks_independent: f64,
}

impl GumbelFit {
    pub fn normalized(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.normalized.unwrap_or(f64::INFINITY)).collect()
    }
}

/// Law of the maximum of n independent Exp(1) variables after the same centering.
pub fn independent_max_cdf(n: usize, z: f64) -> f64 {
    let n = n as f64;
    let base = 1.0 - (-z).exp() / n;
    if base <= 0.0 {
        0.0
    } else {
        base.powf(n)
    }
}

/// Cover times of the target, normalized as C/(g0 N^d) - ln|F|.
pub fn run_gumbel(cfg: &ExperimentConfig, tail: usize) -> Result<GumbelFit> {
    let geom = cfg.validate()?;
    let g0 = g0(cfg.dim)?;
    let target = cfg.target.resolve(&geom)?;
    let opts = CoverOptions { horizon: cfg.horizon(&geom, g0), keep_hit_times: false, tail };
    let scale = g0 * geom.volume() as f64;
    let ln_f = (target.len() as f64).ln();
    let trials = run_trials(cfg, |i, rng| {
        let start = Start::Uniform.resolve(&geom, rng);
        let rec = run_cover(&geom, &target, start, &opts, &mut RandomWalk::new(geom, rng))?;
        let cover_time = rec.covered.then_some(rec.last_time);
        Ok(CoverTrial {
            trial: i,
            cover_time,
            normalized: cover_time.map(|c| c / scale - ln_f),
            last_k: rec.tail.iter().rev().copied().collect(),
        })
    })?;
    let truncated: Vec<usize> = trials.iter().filter(|t| t.cover_time.is_none()).map(|t| t.trial).collect();
    let all: Vec<f64> = trials.iter().map(|t| t.normalized.unwrap_or(f64::INFINITY)).collect();
    let finite: Vec<f64> = trials.iter().filter_map(|t| t.normalized).collect();
    let n = target.len();
    Ok(GumbelFit {
        g0,
        target_size: n,
        summary: Summary::of(&finite),
        variance_std_error: Summary::variance_std_error(&finite),
        ks: ks_distance(&all, gumbel_cdf),
        ks_independent: ks_distance(&all, |z| independent_max_cdf(n, z)),
        truncated,
        trials,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VacancyReport {
    pub u: f64,
    pub time: f64,
    pub estimate: Proportion,
    pub prediction: f64,
    /// Second site for the two-point version.
    pub partner: Option<Site>,
    pub vacant: Vec<bool>,
}

/// P[sites not visited by time u N^d] from a uniform start; one site, or the
/// origin together with `partner`.
pub fn vacancy_experiment(cfg: &ExperimentConfig, u: f64, partner: Option<Site>) -> Result<VacancyReport> {
    let geom = cfg.validate()?;
    if !(u >= 0.0) {
        return Err(Error::InvalidArgument(format!("level {u} must be >= 0")));
    }
    let g0 = g0(cfg.dim)?;
    let mut sites = vec![0];
    if let Some(p) = &partner {
        let j = geom.index(p)?;
        if j == 0 {
            return Err(Error::InvalidArgument("partner must differ from the origin".into()));
        }
        sites.push(j);
    }
    let target = SiteSet::from_indices(&geom, sites.iter().copied());
    let time = u * geom.volume() as f64;
    let vacant = run_trials(cfg, |_, rng| {
        if time == 0.0 {
            return Ok(true);
        }
        let start = Start::Uniform.resolve(&geom, rng);
        Ok(hitting_time(&mut RandomWalk::new(geom, rng), start, &target, HitKind::Entrance, time)?.is_none())
    })?;
    let one = (-u / g0).exp();
    Ok(VacancyReport {
        u,
        time,
        estimate: Proportion::new(vacant.iter().filter(|v| **v).count(), vacant.len()),
        prediction: if partner.is_some() { one * one } else { one },
        partner,
        vacant,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatePointReport {
    pub rho: f64,
    /// t(rho) = N^d (1 - rho) g0 ln|F|.
    pub t_rho: f64,
    pub f_size: usize,
    /// |F|^rho
    pub expected_size: f64,
    pub sizes: Vec<usize>,
    /// Smallest pairwise distance inside F_rho (None when |F_rho| < 2).
    pub min_separations: Vec<Option<usize>>,
    pub good: Vec<bool>,
    pub size_summary: Summary,
    pub mean_ratio: f64,
    pub good_fraction: f64,
}

/// Is `late` a good set: size within |F|^{2 rho/3} of |F|^rho and pairwise at least |F|^{1/(2d)} apart.
pub fn is_good_set(geom: &TorusGeometry, late: &[usize], f_size: usize, rho: f64) -> (bool, Option<usize>) {
    let f = f_size as f64;
    let size_ok = (late.len() as f64 - f.powf(rho)).abs() <= f.powf(2.0 * rho / 3.0);
    let min_sep = min_pairwise_distance(geom, late);
    let sep_ok = min_sep.map_or(true, |s| s as f64 >= f.powf(1.0 / (2.0 * geom.dim() as f64)));
    (size_ok && sep_ok, min_sep)
}

/// Smallest pairwise Euclidean torus distance.
pub fn min_pairwise_euclidean(geom: &TorusGeometry, sites: &[usize]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            let d = geom.displacement(sites[i], sites[j]).norm2();
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

/// Smallest pairwise l-infinity torus distance.
pub fn min_pairwise_distance(geom: &TorusGeometry, sites: &[usize]) -> Option<usize> {
    let mut best = None;
    for i in 0..sites.len() {
        for j in i + 1..sites.len() {
            let d = geom.dist_inf_idx(sites[i], sites[j]);
            best = Some(best.map_or(d, |b: usize| b.min(d)));
        }
    }
    best
}

/// Sites of F not visited by time t(rho).
pub fn run_late_points(cfg: &ExperimentConfig) -> Result<LatePointReport> {
    let geom = cfg.validate()?;
    let g0 = g0(cfg.dim)?;
    let target = cfg.target.resolve(&geom)?;
    let f_size = target.len();
    let rho = cfg.rho;
    let t_rho = geom.volume() as f64 * (1.0 - rho) * g0 * (f_size as f64).ln();
    let per_trial = run_trials(cfg, |_, rng| {
        let start = Start::Uniform.resolve(&geom, rng);
        let late = if t_rho <= 0.0 {
            target.indices()
        } else {
            let opts = CoverOptions { horizon: t_rho, keep_hit_times: true, tail: 0 };
            let rec = run_cover(&geom, &target, start, &opts, &mut RandomWalk::new(geom, rng))?;
            let h = rec.hit_times.unwrap();
            target.indices().into_iter().filter(|&x| h[x] > t_rho).collect()
        };
        let (good, sep) = is_good_set(&geom, &late, f_size, rho);
        Ok((late.len(), sep, good))
    })?;
    let sizes: Vec<usize> = per_trial.iter().map(|t| t.0).collect();
    let size_summary = Summary::of(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>());
    let expected_size = (f_size as f64).powf(rho);
    let good: Vec<bool> = per_trial.iter().map(|t| t.2).collect();
    Ok(LatePointReport {
        rho,
        t_rho,
        f_size,
        expected_size,
        mean_ratio: size_summary.mean / expected_size,
        good_fraction: good.iter().filter(|g| **g).count() as f64 / good.len() as f64,
        min_separations: per_trial.iter().map(|t| t.1).collect(),
        sizes,
        good,
        size_summary,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LastPointsLevel {
    pub z: f64,
    /// g0 N^d (ln N^d + z)
    pub time: f64,
    pub counts: Vec<usize>,
    /// Per trial, counts in each of the 2^d congruent sub-boxes.
    pub subbox_counts: Vec<Vec<usize>>,
    pub summary: Summary,
    pub p_zero: Proportion,
    /// Limit intensity e^{-z}.
    pub limit_mean: f64,
    /// Pooled sub-box totals against a uniform split.
    pub split_test: ChiSquareTest,
    /// Sub-box counts against a Poisson law with the fitted mean.
    pub poisson_test: ChiSquareTest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LastPointsProcess {
    pub levels: Vec<LastPointsLevel>,
    /// Per trial and z, positions x/N of the sites still unvisited.
    pub points: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

fn subbox_of(geom: &TorusGeometry, x: usize) -> usize {
    (0..geom.dim()).fold(0, |acc, a| 2 * acc + usize::from(2 * geom.coord(x, a) >= geom.side()))
}

/// Unvisited sites of the whole torus at times g0 N^d (ln N^d + z) over the z grid.
pub fn run_last_points(cfg: &ExperimentConfig) -> Result<LastPointsProcess> {
    let geom = cfg.validate()?;
    if cfg.z_grid.is_empty() {
        return Err(Error::InvalidArgument("empty z grid".into()));
    }
    let g0 = g0(cfg.dim)?;
    let target = SiteSet::full(&geom);
    let v = geom.volume();
    let times: Vec<f64> = cfg.z_grid.iter().map(|&z| v as f64 * u_of_z(v, z, g0)).collect();
    let horizon = times.iter().cloned().fold(0.0, f64::max);
    let boxes = 1usize << cfg.dim;
    let keep_points = cfg.keep_hit_times;
    let per_trial = run_trials(cfg, |_, rng| {
        let start = Start::Uniform.resolve(&geom, rng);
        let opts = CoverOptions { horizon, keep_hit_times: true, tail: 0 };
        let rec = run_cover(&geom, &target, start, &opts, &mut RandomWalk::new(geom, rng))?;
        let h = rec.hit_times.unwrap();
        let mut by_z = Vec::with_capacity(times.len());
        let mut pts = Vec::new();
        for &t in &times {
            let late: Vec<usize> = (0..v).filter(|&x| h[x] > t).collect();
            let mut sub = vec![0usize; boxes];
            for &x in &late {
                sub[subbox_of(&geom, x)] += 1;
            }
            if keep_points {
                pts.push(
                    late.iter()
                        .map(|&x| (0..geom.dim()).map(|a| geom.coord(x, a) as f64 / geom.side() as f64).collect())
                        .collect::<Vec<Vec<f64>>>(),
                );
            }
            by_z.push((late.len(), sub));
        }
        Ok((by_z, pts))
    })?;
    let mut levels = Vec::new();
    for (zi, &z) in cfg.z_grid.iter().enumerate() {
        let counts: Vec<usize> = per_trial.iter().map(|t| t.0[zi].0).collect();
        let subbox_counts: Vec<Vec<usize>> = per_trial.iter().map(|t| t.0[zi].1.clone()).collect();
        let summary = Summary::of(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
        let zeros = counts.iter().filter(|&&c| c == 0).count();
        let mut pooled = vec![0.0; boxes];
        for s in &subbox_counts {
            for (p, &c) in pooled.iter_mut().zip(s) {
                *p += c as f64;
            }
        }
        let total: f64 = pooled.iter().sum();
        let split_test = chi_square_gof(&pooled, &vec![total / boxes as f64; boxes], 0);
        let sub_mean = total / (boxes * counts.len()) as f64;
        let max_c = subbox_counts.iter().flatten().copied().max().unwrap_or(0);
        let mut hist = vec![0.0; max_c + 2];
        for &c in subbox_counts.iter().flatten() {
            hist[c] += 1.0;
        }
        let cells = (boxes * counts.len()) as f64;
        let mut expected: Vec<f64> = (0..=max_c).map(|k| cells * crate::stats::poisson_pmf(k, sub_mean)).collect();
        expected.push(cells - expected.iter().sum::<f64>());
        let poisson_test = chi_square_gof(&hist, &expected, 1);
        levels.push(LastPointsLevel {
            z,
            time: times[zi],
            counts,
            subbox_counts,
            summary,
            p_zero: Proportion::new(zeros, per_trial.len()),
            limit_mean: (-z).exp(),
            split_test,
            poisson_test,
        });
    }
    let points = keep_points.then(|| per_trial.into_iter().map(|t| t.1).collect());
    Ok(LastPointsProcess { levels, points })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LastKReport {
    pub k: usize,
    /// Per trial, min pairwise Euclidean distance of the last k covered sites divided by N.
    pub min_distances: Vec<f64>,
    pub deltas: Vec<f64>,
    pub tail: Vec<f64>,
    /// Same probabilities for k independent uniform sites.
    pub oracle: Vec<f64>,
}

/// P[min pairwise distance of k independent uniform torus sites <= delta N], by simulation.
pub fn uniform_min_distance_tail<R: Rng + ?Sized>(
    geom: &TorusGeometry,
    k: usize,
    deltas: &[f64],
    samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut hits = vec![0usize; deltas.len()];
    let mut pts = vec![0usize; k];
    for _ in 0..samples {
        pts.iter_mut().for_each(|p| *p = rng.random_range(0..geom.volume()));
        let m = min_pairwise_euclidean(geom, &pts).unwrap() / geom.side() as f64;
        for (h, &d) in hits.iter_mut().zip(deltas) {
            if m <= d {
                *h += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / samples as f64).collect()
}

pub fn run_last_k_separation(cfg: &ExperimentConfig, k: usize, deltas: &[f64]) -> Result<LastKReport> {
    let geom = cfg.validate()?;
    if k < 2 || k > geom.volume() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 2..=N^d")));
    }
    let mut sub = cfg.clone();
    sub.target = TargetSpec::FullTorus;
    let fit = run_gumbel(&sub, k)?;
    let min_distances: Vec<f64> = fit
        .trials
        .iter()
        .filter(|t| t.cover_time.is_some())
        .map(|t| min_pairwise_euclidean(&geom, &t.last_k).unwrap() / geom.side() as f64)
        .collect();
    let tail = deltas
        .iter()
        .map(|&d| min_distances.iter().filter(|&&m| m <= d).count() as f64 / min_distances.len() as f64)
        .collect();
    let mut rng = RngStream::new(cfg.seed, u64::MAX);
    let oracle = uniform_min_distance_tail(&geom, k, deltas, 200_000, &mut rng);
    Ok(LastKReport { k, min_distances, deltas: deltas.to_vec(), tail, oracle })
}

/// `I - P` on the torus with the sites of `absorbing` held at zero.
struct TorusStencil {
    geom: TorusGeometry,
    active: Vec<bool>,
}

impl LinearOperator for TorusStencil {
    fn len(&self) -> usize {
        self.active.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let w = 1.0 / (2 * self.geom.dim()) as f64;
        y.par_chunks_mut(4096).enumerate().for_each(|(c, ys)| {
            for (k, yi) in ys.iter_mut().enumerate() {
                let i = c * 4096 + k;
                *yi = if self.active[i] {
                    x[i] - w * (0..2 * self.geom.dim()).map(|d| x[self.geom.neighbor(i, d)]).sum::<f64>()
                } else {
                    0.0
                };
            }
        });
    }
}

/// E_x[H_V] for every torus site, by solving (I - P)h = 1 off V with h = 0 on V.
pub fn expected_hitting_times(geom: &TorusGeometry, v: &SiteSet) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptySet("V"));
    }
    let active: Vec<bool> = (0..geom.volume()).map(|i| !v.contains(i)).collect();
    let b: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let mut h = vec![0.0; geom.volume()];
    let op = TorusStencil { geom: *geom, active };
    conjugate_gradient(&op, &b, &mut h, SOLVE_TOL, 100 * geom.volume())?;
    Ok(h)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HittingTimeReport {
    pub boxes: Vec<BoxSpec>,
    pub times: Vec<f64>,
    pub summary: Summary,
    pub capacities: Vec<f64>,
    pub capacity_sum: f64,
    /// mean H_V * sum cap / N^d
    pub ratio: f64,
    pub ratio_std_error: f64,
}

/// Mean entrance time of the union of boxes from a uniform start, scaled by the capacities.
pub fn run_hitting_time_check(cfg: &ExperimentConfig, boxes: &[BoxSpec]) -> Result<HittingTimeReport> {
    let geom = cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::EmptySet("V"));
    }
    let mut v = SiteSet::empty(&geom);
    for (i, b) in boxes.iter().enumerate() {
        if 4 * b.radius >= geom.side() {
            return Err(Error::WindowTooLarge(format!("box {i} of radius {} on side {}", b.radius, geom.side())));
        }
        let s = b.torus_sites(&geom)?;
        if !s.is_disjoint(&v) {
            return Err(Error::OverlappingBoxes(i.saturating_sub(1), i));
        }
        v = v.union(&s);
    }
    let capacities: Vec<f64> = boxes
        .iter()
        .map(|b| equilibrium_measure(&BoxSpec::new(Site::origin(cfg.dim), b.radius).sites(), DEFAULT_ENV_RADIUS.max(4 * b.radius)).map(|e| e.capacity))
        .collect::<Result<_>>()?;
    let capacity_sum: f64 = capacities.iter().sum();
    let times = run_trials(cfg, |_, rng| {
        let start = Start::Uniform.resolve(&geom, rng);
        hitting_time(&mut RandomWalk::new(geom, rng), start, &v, HitKind::Entrance, f64::MAX)?
            .ok_or(Error::HorizonExceeded { horizon: f64::MAX })
    })?;
    let summary = Summary::of(&times);
    let scale = capacity_sum / geom.volume() as f64;
    Ok(HittingTimeReport {
        boxes: boxes.to_vec(),
        ratio: summary.mean * scale,
        ratio_std_error: summary.std_error * scale,
        times,
        summary,
        capacities,
        capacity_sum,
    })
}

/// Radii (A, B, C) = (s^{1-eps}, s^{1-eps/2}, s^{1-eps/4}), rounded down.
pub fn box_radii(separation: usize, epsilon: f64) -> (usize, usize, usize) {
    let s = separation as f64;
    let r = |e: f64| s.powf(1.0 - e).floor() as usize;
    (r(epsilon), r(epsilon / 2.0), r(epsilon / 4.0))
}

/// t* = N^{2 + eps/100}.
pub fn default_t_star(side: usize, epsilon: f64) -> f64 {
    (side as f64).powf(2.0 + epsilon / 100.0)
}

/// Radii and watch time for the excursion experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionPlan {
    pub separation: usize,
    pub epsilon: f64,
    pub a_radius: usize,
    pub c_radius: usize,
    pub t_star: f64,
    /// The C radius from the policy left no room between boxes and was replaced by the B radius.
    pub c_clamped: bool,
}

/// Policy radii for boxes at the given centers: A = s^{1-eps}, C = s^{1-eps/4} (or
/// s^{1-eps/2} when C-boxes of that size would touch), t* = N^{2+eps/100}.
pub fn excursion_plan(geom: &TorusGeometry, centers: &[Site], epsilon: f64) -> Result<ExcursionPlan> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon = {epsilon} must lie in (0, 1)")));
    }
    let separation = separation(centers, geom)?;
    let (a_radius, b_radius, c_radius) = box_radii(separation, epsilon);
    let fits = |r: usize| 2 * r + 1 < separation;
    let (c_radius, c_clamped) = match (fits(c_radius), fits(b_radius)) {
        (true, _) => (c_radius, false),
        (false, true) => (b_radius, true),
        (false, false) => {
            return Err(Error::WindowTooLarge(format!("no room for C boxes at separation {separation}")));
        }
    };
    Ok(ExcursionPlan {
        separation,
        epsilon,
        a_radius,
        c_radius,
        t_star: default_t_star(geom.side(), epsilon),
        c_clamped,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcursionReport {
    pub centers: Vec<Site>,
    pub a_radius: usize,
    pub c_radius: usize,
    pub u: f64,
    pub t_star: f64,
    pub capacity: f64,
    pub counts: Vec<usize>,
    pub summary: Summary,
    /// u n cap(A)
    pub prediction: f64,
    pub ratio: f64,
    pub ratio_std_error: f64,
}

/// Complete excursions from the A boxes to outside the C boxes by time u N^d.
pub fn run_excursion_calibration(
    cfg: &ExperimentConfig,
    centers: &[Site],
    a_radius: usize,
    c_radius: usize,
    u: f64,
    t_star: f64,
) -> Result<ExcursionReport> {
    let geom = cfg.validate()?;
    if centers.is_empty() {
        return Err(Error::EmptySet("box centers"));
    }
    if c_radius < a_radius {
        return Err(Error::InvalidArgument("C must contain A".into()));
    }
    if !(u >= 0.0) {
        return Err(Error::InvalidArgument(format!("level {u} must be >= 0")));
    }
    let mut a_union = SiteSet::empty(&geom);
    let mut c_union = SiteSet::empty(&geom);
    for (i, c) in centers.iter().enumerate() {
        let cs = geom.ball(c, c_radius)?;
        if !cs.is_disjoint(&c_union) {
            return Err(Error::OverlappingBoxes(i.saturating_sub(1), i));
        }
        c_union = c_union.union(&cs);
        a_union = a_union.union(&geom.ball(c, a_radius)?);
    }
    if c_union.is_full() {
        return Err(Error::WindowTooLarge(format!("C boxes of radius {c_radius} cover the torus")));
    }
    let a_shape = BoxSpec::new(Site::origin(cfg.dim), a_radius).sites();
    let capacity = equilibrium_measure(&a_shape, DEFAULT_ENV_RADIUS.max(4 * a_radius))?.capacity;
    let horizon = u * geom.volume() as f64;
    let counts = run_trials(cfg, |_, rng| {
        if horizon == 0.0 {
            return Ok(0);
        }
        let start = Start::Uniform.resolve(&geom, rng);
        let rec = excursions(&a_union, &c_union, t_star, horizon, start, &mut RandomWalk::new(geom, rng))?;
        Ok(rec.complete())
    })?;
    let summary = Summary::of(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let prediction = u * centers.len() as f64 * capacity;
    let (ratio, ratio_std_error) = if prediction > 0.0 {
        (summary.mean / prediction, summary.std_error / prediction)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ExcursionReport {
        centers: centers.to_vec(),
        a_radius,
        c_radius,
        u,
        t_star,
        capacity,
        counts,
        summary,
        prediction,
        ratio,
        ratio_std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::EULER_GAMMA;

    fn cfg(side: usize, trials: usize) -> ExperimentConfig {
        ExperimentConfig::new(3, side, trials, 17)
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 0).validate().is_err());
        let mut c = cfg(10, 5);
        c.z_grid = vec![1.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = cfg(10, 5);
        c.rho = 1.0;
        assert!(c.validate().is_err());
        assert!(cfg(10, 5).validate().is_ok());
        let json = serde_json::to_value(ExperimentConfig { threads: Some(4), ..cfg(10, 5) }).unwrap();
        assert!(json.get("threads").is_none());
    }

    #[test]
    fn separated_targets() {
        let g = TorusGeometry::new(3, 24).unwrap();
        let t = TargetSpec::Separated { count: 8, min_separation: 6 }.resolve(&g).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(min_pairwise_distance(&g, &t.indices()), Some(12));
        assert!(TargetSpec::Separated { count: 8, min_separation: 13 }.resolve(&g).is_err());
    }

    #[test]
    fn trials_do_not_depend_on_threads() {
        let mut c = cfg(6, 12);
        c.threads = Some(1);
        let a = run_gumbel(&c, 3).unwrap();
        c.threads = Some(3);
        let b = run_gumbel(&c, 3).unwrap();
        assert_eq!(a.trials, b.trials);
    }

    #[test]
    fn gumbel_record_consistency() {
        let c = cfg(8, 40);
        let fit = run_gumbel(&c, 4).unwrap();
        assert!(fit.truncated.is_empty());
        for t in &fit.trials {
            assert_eq!(t.last_k.len(), 4);
            // C <= u_F(z) N^d exactly when the normalized time is <= z.
            let c_time = t.cover_time.unwrap();
            for z in [-1.0, 0.0, 0.5, 2.0] {
                let level = u_of_z(512, z, fit.g0) * 512.0;
                if (c_time - level).abs() > 1e-9 * level {
                    assert_eq!(c_time <= level, t.normalized.unwrap() <= z);
                }
            }
        }
        assert!((fit.summary.mean - EULER_GAMMA).abs() < 1.5);
    }

    #[test]
    fn independent_maximum_law() {
        assert!((independent_max_cdf(1, 0.0) - 0.0).abs() < 1e-15);
        assert!((independent_max_cdf(1_000_000, 0.7) - gumbel_cdf(0.7)).abs() < 1e-6);
    }

    #[test]
    fn vacancy_limits() {
        let r = vacancy_experiment(&cfg(10, 50), 0.0, None).unwrap();
        assert_eq!(r.estimate.estimate, 1.0);
        assert!(vacancy_experiment(&cfg(10, 5), 1.0, Some(Site::origin(3))).is_err());
        let r = vacancy_experiment(&cfg(10, 200), 0.01, Some(Site::from([5, 5, 5]))).unwrap();
        assert!(r.estimate.estimate > 0.9);
    }

    #[test]
    fn late_points_near_rho_one_keep_everything() {
        let mut c = cfg(6, 5);
        c.rho = 1.0 - 1e-12;
        let r = run_late_points(&c).unwrap();
        assert!(r.sizes.iter().all(|&s| s >= 215));
    }

    #[test]
    fn late_points_match_z_level_sets() {
        // F_rho from the hit times equals the z-level set at z = -rho ln|F|.
        let geom = TorusGeometry::new(3, 8).unwrap();
        let g0 = g0(3).unwrap();
        let v = geom.volume();
        let rho = 0.3;
        let t_rho = v as f64 * (1.0 - rho) * g0 * (v as f64).ln();
        let z = -rho * (v as f64).ln();
        let t_z = v as f64 * u_of_z(v, z, g0);
        assert!((t_rho - t_z).abs() <= 1e-9 * t_rho);
        let mut rng = RngStream::new(8, 0);
        let opts = CoverOptions { horizon: 1e12, keep_hit_times: true, tail: 0 };
        let rec = run_cover(&geom, &SiteSet::full(&geom), 0, &opts, &mut RandomWalk::new(geom, &mut rng)).unwrap();
        let a = rec.unhit_at(t_rho).unwrap();
        let b = rec.unhit_at(t_z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn last_points_counts_are_monotone() {
        let mut c = cfg(8, 30);
        c.keep_hit_times = true;
        let p = run_last_points(&c).unwrap();
        for t in 0..30 {
            for w in p.levels.windows(2) {
                assert!(w[1].counts[t] <= w[0].counts[t]);
            }
            for l in &p.levels {
                assert_eq!(l.subbox_counts[t].iter().sum::<usize>(), l.counts[t]);
            }
        }
        let pts = p.points.unwrap();
        assert_eq!(pts[0][0].len(), p.levels[0].counts[0]);
    }

    #[test]
    fn last_k_tail_is_monotone_and_oracle_sane() {
        let r = run_last_k_separation(&cfg(8, 30), 2, &[0.1, 0.25, 0.9]).unwrap();
        assert!(r.tail.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.oracle.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*r.oracle.last().unwrap(), 1.0);
        assert!(run_last_k_separation(&cfg(8, 3), 1, &[0.1]).is_err());
        // Two uniform points: P[d <= 0] = 1/N^d.
        let g = TorusGeometry::new(3, 8).unwrap();
        let mut rng = RngStream::new(1, 1);
        let p = uniform_min_distance_tail(&g, 2, &[0.0], 400_000, &mut rng)[0];
        assert!((p - 1.0 / 512.0).abs() < 4.0 * (1.0 / 512.0 / 400_000.0f64).sqrt());
    }

    #[test]
    fn hitting_time_errors_and_exact_oracle() {
        let c = cfg(10, 5);
        assert!(run_hitting_time_check(&c, &[BoxSpec::new(Site::origin(3), 3)]).is_err());
        let geom = TorusGeometry::new(3, 10).unwrap();
        assert!(expected_hitting_times(&geom, &SiteSet::empty(&geom)).is_err());
        let h = expected_hitting_times(&geom, &SiteSet::full(&geom)).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        // Kac: the mean return time to a site is N^d, i.e. 1 + mean of h over neighbours = N^d.
        let h = expected_hitting_times(&geom, &SiteSet::from_indices(&geom, [0])).unwrap();
        let ret = 1.0 + (0..6).map(|d| h[geom.neighbor(0, d)]).sum::<f64>() / 6.0;
        assert!((ret - 1000.0).abs() < 1e-6, "{ret}");
    }

    #[test]
    fn hitting_time_mc_matches_exact() {
        let c = cfg(10, 3000);
        let b = [BoxSpec::new(Site::origin(3), 1)];
        let rep = run_hitting_time_check(&c, &b).unwrap();
        let geom = TorusGeometry::new(3, 10).unwrap();
        let h = expected_hitting_times(&geom, &b[0].torus_sites(&geom).unwrap()).unwrap();
        let exact = h.iter().sum::<f64>() / 1000.0;
        assert!((rep.summary.mean - exact).abs() < 4.0 * rep.summary.std_error, "{} vs {exact}", rep.summary.mean);
    }

    #[test]
    fn excursion_edge_cases() {
        let c = cfg(12, 4);
        let r = run_excursion_calibration(&c, &[Site::origin(3)], 1, 2, 0.0, 10.0).unwrap();
        assert!(r.counts.iter().all(|&k| k == 0));
        assert!(run_excursion_calibration(&c, &[Site::origin(3), Site::from([3, 0, 0])], 1, 2, 1.0, 10.0).is_err());
        assert!(run_excursion_calibration(&c, &[Site::origin(3)], 1, 6, 1.0, 10.0).is_err());
        assert_eq!(box_radii(20, 0.5), (4, 9, 13));
        assert!((default_t_star(20, 0.0) - 400.0).abs() < 1e-9);
        let g = TorusGeometry::new(3, 20).unwrap();
        let p = excursion_plan(&g, &[Site::origin(3)], 0.7).unwrap();
        assert_eq!((p.a_radius, p.c_radius, p.c_clamped), (2, 7, true));
        assert!(excursion_plan(&g, &[Site::origin(3)], 0.2).is_err());
    }

    mod properties {
        use super::*;
        use crate::walk::Trajectory;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn z_counts_are_monotone_and_match_normalization(seed in any::<u64>(), side in 4usize..8) {
                let geom = TorusGeometry::new(3, side).unwrap();
                let v = geom.volume();
                let g0 = g0(3).unwrap();
                let mut rng = RngStream::new(seed, 0);
                let opts = CoverOptions { horizon: 1e12, keep_hit_times: true, tail: 0 };
                let rec = run_cover(&geom, &SiteSet::full(&geom), 0, &opts, &mut RandomWalk::new(geom, &mut rng)).unwrap();
                let c = rec.cover_time().unwrap();
                let normalized = c / (g0 * v as f64) - (v as f64).ln();
                let mut last = usize::MAX;
                for z in [-3.0, -1.5, -0.2, 0.0, 0.4, 1.0, 2.5] {
                    let level = u_of_z(v, z, g0) * v as f64;
                    let count = rec.unhit_at(level).unwrap().len();
                    prop_assert!(count <= last);
                    last = count;
                    if (c - level).abs() > 1e-9 * level {
                        prop_assert_eq!(c <= level, normalized <= z);
                        prop_assert_eq!(c <= level, count == 0);
                    }
                }
            }

            #[test]
            fn late_points_equal_z_level_set(seed in any::<u64>(), rho in 0.05f64..0.95) {
                let geom = TorusGeometry::new(3, 6).unwrap();
                let v = geom.volume();
                let g0 = g0(3).unwrap();
                let t_rho = v as f64 * (1.0 - rho) * g0 * (v as f64).ln();
                let t_z = v as f64 * u_of_z(v, -rho * (v as f64).ln(), g0);
                let mut rng = RngStream::new(seed, 1);
                let opts = CoverOptions { horizon: 1e12, keep_hit_times: true, tail: 0 };
                let rec = run_cover(&geom, &SiteSet::full(&geom), 0, &opts, &mut RandomWalk::new(geom, &mut rng)).unwrap();
                let h = rec.hit_times.as_ref().unwrap();
                let off_boundary = h.iter().all(|&x| (x - t_rho).abs() > 1e-9 * t_rho);
                if off_boundary {
                    prop_assert_eq!(rec.unhit_at(t_rho), rec.unhit_at(t_z));
                }
            }

            #[test]
            fn excursion_times_interlace(seed in any::<u64>(), t_star in 1.0f64..40.0, a in 0usize..2) {
                let geom = TorusGeometry::new(3, 10).unwrap();
                let a_set = geom.ball(&Site::origin(3), a).unwrap();
                let c_set = geom.ball(&Site::origin(3), a + 2).unwrap();
                let mut rng = RngStream::new(seed, 2);
                let traj = Trajectory::sample(&geom, 0, 20_000.0, &mut rng);
                let rec = excursions(&a_set, &c_set, t_star, 20_000.0, 0, &mut crate::walk::Replay::new(&traj)).unwrap();
                prop_assert!(rec.returns.len() >= rec.departures.len());
                prop_assert!(rec.returns.len() <= rec.departures.len() + 1);
                let mut prev = 0.0;
                for k in 0..rec.returns.len() {
                    prop_assert!(rec.returns[k] >= prev);
                    if let Some(&u) = rec.departures.get(k) {
                        prop_assert!(u - rec.returns[k] >= t_star);
                        prev = u;
                    }
                }
            }

            #[test]
            fn trial_results_ignore_thread_count(seed in any::<u64>(), threads in 1usize..4) {
                let mut c = ExperimentConfig::new(3, 5, 6, seed);
                let base = run_gumbel(&c, 2).unwrap();
                c.threads = Some(threads);
                prop_assert_eq!(run_gumbel(&c, 2).unwrap().trials, base.trials);
            }
        }
    }
}
