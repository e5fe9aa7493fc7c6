//! Potential theory of the simple random walk on Z^d: Green function,
//! equilibrium measures and capacities.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::lattice::{BoxGrid, LocalSet, Site};
use crate::linalg::{conjugate_gradient, MaskedStencil};

/// Closed-form value of g(0) for d = 3 (Watson's integral).
pub const WATSON_G0: f64 = 1.516_386_059_1;

pub const SOLVE_TOL: f64 = 1e-12;
const GREEN_TOL: f64 = 1e-13;
const MAX_CELLS: usize = 1 << 28;

/// Rectangular piece of Z^d with a one-cell halo on every side.
#[derive(Clone, Debug)]
struct PaddedGrid {
    lo: Vec<i64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl PaddedGrid {
    /// Covers the closed box [lo, hi].
    fn covering(lo: &[i64], hi: &[i64]) -> Result<Self> {
        let lo: Vec<i64> = lo.iter().map(|l| l - 1).collect();
        let shape: Vec<usize> = lo.iter().zip(hi).map(|(l, h)| (h + 1 - l + 1) as usize).collect();
        let mut strides = vec![0; shape.len()];
        let mut len: usize = 1;
        for a in (0..shape.len()).rev() {
            strides[a] = len;
            len = len
                .checked_mul(shape[a])
                .filter(|&l| l <= MAX_CELLS)
                .ok_or_else(|| Error::InvalidArgument("solve domain too large".into()))?;
        }
        Ok(PaddedGrid { lo, shape, strides, len })
    }

    fn index(&self, x: &Site) -> Option<usize> {
        let mut idx = 0;
        for a in 0..self.shape.len() {
            let c = x.coords()[a] - self.lo[a];
            if c < 0 || c as usize >= self.shape[a] {
                return None;
            }
            idx += c as usize * self.strides[a];
        }
        Some(idx)
    }

    fn is_halo(&self, idx: usize) -> bool {
        self.strides.iter().zip(&self.shape).any(|(&s, &n)| {
            let c = (idx / s) % n;
            c == 0 || c + 1 == n
        })
    }
}

/// Constant in the asymptotics g(x) ~ c_d |x|^{2-d}.
pub fn green_constant(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    dim as f64 * gamma(h - 1.0) / (2.0 * std::f64::consts::PI.powf(h))
}

/// Leading-order Green function c_d |x|^{2-d} at Euclidean distance `r`.
pub fn green_asymptotic(dim: usize, r: f64) -> f64 {
    green_constant(dim) * r.powf(2.0 - dim as f64)
}

/// Green function of the walk killed on leaving B(0, radius), at every site of B(0, table_radius).
fn killed_green(dim: usize, radius: usize, table_radius: usize) -> Result<Vec<f64>> {
    let r = radius as i64;
    let grid = PaddedGrid::covering(&vec![-r; dim], &vec![r; dim])?;
    let active: Vec<bool> = (0..grid.len).map(|i| !grid.is_halo(i)).collect();
    let op = MaskedStencil::new(grid.strides.clone(), active);
    let mut b = vec![0.0; grid.len];
    b[grid.index(&Site::origin(dim)).unwrap()] = 1.0;
    let mut x = vec![0.0; grid.len];
    conjugate_gradient(&op, &b, &mut x, GREEN_TOL, 40 * grid.len.min(1 << 20))?;
    let table = BoxGrid::new(dim, table_radius);
    Ok((0..table.len()).map(|i| x[grid.index(&table.site(i)).unwrap()]).collect())
}

/// Weights w with sum 1 that cancel the error terms t^{p} for p = dim-2, dim-1, ...
fn richardson_weights(dim: usize, radii: &[usize]) -> Result<Vec<f64>> {
    let m = radii.len();
    let t: Vec<f64> = radii.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect();
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for j in 0..m {
        a[(0, j)] = 1.0;
        for k in 1..m {
            a[(k, j)] = t[j].powi((dim - 3 + k) as i32);
        }
    }
    rhs[0] = 1.0;
    let w = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("degenerate extrapolation schedule".into()))?;
    Ok(w.iter().copied().collect())
}

pub fn default_schedule(dim: usize) -> Vec<usize> {
    match dim {
        3 => vec![12, 16, 24, 32, 40],
        4 => vec![8, 10, 12, 16, 20],
        _ => vec![8, 9, 10, 11, 12],
    }
}

/// Values of g(0, x) on the box B(0, radius).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GreenTable {
    dim: usize,
    radius: usize,
    values: Vec<f64>,
    pub schedule: Vec<usize>,
    /// g(0) extrapolated from the first k solves, k = 1..=schedule.len().
    pub origin_trail: Vec<f64>,
    /// |change of g(0) between the last two extrapolation levels|.
    pub error_estimate: f64,
    /// Largest |(I - P)g - delta_0| over interior table sites.
    pub harmonic_residual: f64,
}

impl GreenTable {
    /// Solves the Dirichlet problem on each box of `schedule` and extrapolates to infinite volume.
    pub fn compute(dim: usize, table_radius: usize, schedule: &[usize]) -> Result<Self> {
        if dim < 3 {
            return Err(Error::InvalidArgument(format!("Green function needs d >= 3, got {dim}")));
        }
        if schedule.len() < 2 {
            return Err(Error::InvalidArgument("need at least two solve radii".into()));
        }
        if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] < 8 || schedule[0] < table_radius {
            return Err(Error::InvalidArgument(format!(
                "solve radii must increase, start at >= 8 and cover the table radius {table_radius}"
            )));
        }
        let solves: Vec<Vec<f64>> =
            schedule.iter().map(|&r| killed_green(dim, r, table_radius)).collect::<Result<_>>()?;
        let table = BoxGrid::new(dim, table_radius);
        let origin = table.center();
        let mut origin_trail = vec![solves[0][origin]];
        for k in 2..=schedule.len() {
            let w = richardson_weights(dim, &schedule[..k])?;
            origin_trail.push(w.iter().zip(&solves).map(|(w, s)| w * s[origin]).sum());
        }
        let w = richardson_weights(dim, schedule)?;
        let values: Vec<f64> =
            (0..table.len()).map(|i| w.iter().zip(&solves).map(|(w, s)| w * s[i]).sum()).collect();
        let n = origin_trail.len();
        let mut out = GreenTable {
            dim,
            radius: table_radius,
            values,
            schedule: schedule.to_vec(),
            error_estimate: (origin_trail[n - 1] - origin_trail[n - 2]).abs(),
            origin_trail,
            harmonic_residual: 0.0,
        };
        out.harmonic_residual = out.max_harmonic_residual();
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn g0(&self) -> f64 {
        self.values[BoxGrid::new(self.dim, self.radius).center()]
    }

    /// Table value, if x lies in the table.
    pub fn get(&self, x: &Site) -> Option<f64> {
        BoxGrid::new(self.dim, self.radius).index_of(x).map(|i| self.values[i])
    }

    /// Table value, falling back to the asymptotic form outside the table.
    pub fn value(&self, x: &Site) -> f64 {
        self.get(x).unwrap_or_else(|| green_asymptotic(self.dim, x.norm2()))
    }

    fn max_harmonic_residual(&self) -> f64 {
        let grid = BoxGrid::new(self.dim, self.radius);
        let inv = 1.0 / (2 * self.dim) as f64;
        let mut worst: f64 = 0.0;
        for i in 0..grid.len() {
            let nbrs: Option<Vec<usize>> = (0..2 * self.dim).map(|dir| grid.neighbor(i, dir)).collect();
            let Some(nbrs) = nbrs else { continue };
            let avg: f64 = nbrs.iter().map(|&j| self.values[j]).sum::<f64>() * inv;
            let delta = if i == grid.center() { 1.0 } else { 0.0 };
            worst = worst.max((self.values[i] - avg - delta).abs());
        }
        worst
    }

    /// CSV with columns x1..xd,g in lexicographic coordinate order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|a| format!("x{a}")).collect();
        header.push("g".into());
        w.write_record(&header)?;
        let grid = BoxGrid::new(self.dim, self.radius);
        for i in 0..grid.len() {
            let mut rec: Vec<String> = grid.site(i).coords().iter().map(|c| c.to_string()).collect();
            rec.push(format!("{:.15e}", self.values[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Green table for `dim` with the default schedule and table radius 8, computed once per process.
pub fn green_table(dim: usize) -> Result<&'static GreenTable> {
    static CACHE: OnceLock<Mutex<HashMap<usize, &'static GreenTable>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    if let Some(t) = map.get(&dim) {
        return Ok(t);
    }
    let schedule = default_schedule(dim);
    let table: &'static GreenTable = Box::leak(Box::new(GreenTable::compute(dim, 8.min(schedule[0]), &schedule)?));
    map.insert(dim, table);
    Ok(table)
}

/// g(0) for `dim`, memoized.
pub fn g0(dim: usize) -> Result<f64> {
    Ok(green_table(dim)?.g0())
}

/// Domain a relative equilibrium measure is taken with respect to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Ball { center: Site, radius: usize },
    Sites(LocalSet),
}

impl Region {
    fn contains(&self, x: &Site) -> bool {
        match self {
            Region::Ball { center, radius } => (x - center).norm_inf() <= *radius as i64,
            Region::Sites(s) => s.contains(x),
        }
    }

    fn bounds(&self, dim: usize) -> (Vec<i64>, Vec<i64>) {
        match self {
            Region::Ball { center, radius } => {
                let r = *radius as i64;
                (center.coords().iter().map(|c| c - r).collect(), center.coords().iter().map(|c| c + r).collect())
            }
            Region::Sites(s) => {
                let mut lo = vec![i64::MAX; dim];
                let mut hi = vec![i64::MIN; dim];
                for x in s.sites() {
                    for (a, &c) in x.coords().iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
                (lo, hi)
            }
        }
    }
}

/// Escape probabilities of a finite set K, indexed like `set.sites()`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumMeasure {
    pub set: LocalSet,
    /// Point estimate of e_K (or e_{K,U} for a relative measure).
    pub weights: Vec<f64>,
    pub capacity: f64,
    /// Relative half-width of the bracket around each weight (0 for exact relative measures).
    pub relative_error: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub env_radius: Option<usize>,
}

impl EquilibriumMeasure {
    /// Sites of positive mass with their weights.
    pub fn support(&self) -> impl Iterator<Item = (&Site, f64)> {
        self.set.sites().iter().zip(self.weights.iter().copied()).filter(|(_, w)| *w > 0.0)
    }

    pub fn weight(&self, x: &Site) -> f64 {
        self.set.position(x).map_or(0.0, |i| self.weights[i])
    }

    pub fn capacity_bounds(&self) -> (f64, f64) {
        (self.lower.iter().sum(), self.upper.iter().sum())
    }

    /// Hitting distribution from infinity, e_K / cap(K).
    pub fn normalized(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.capacity).collect()
    }
}

/// e_{K,U}(x) = P_x[return to K after leaving U], computed exactly by a linear solve.
pub fn relative_equilibrium(k: &LocalSet, u: &Region) -> Result<EquilibriumMeasure> {
    let dim = k.dim().ok_or(Error::EmptySet("K"))?;
    if let Some(bad) = k.sites().iter().find(|x| !u.contains(x)) {
        return Err(Error::InvalidArgument(format!("K is not inside U: {bad:?}")));
    }
    let (lo, hi) = u.bounds(dim);
    let grid = PaddedGrid::covering(&lo, &hi)?;
    let mut in_k = vec![false; grid.len];
    for x in k.sites() {
        in_k[grid.index(x).unwrap()] = true;
    }
    let active: Vec<bool> = match u {
        Region::Ball { .. } => (0..grid.len).map(|i| !grid.is_halo(i) && !in_k[i]).collect(),
        Region::Sites(s) => {
            let mut a = vec![false; grid.len];
            for x in s.sites() {
                let i = grid.index(x).unwrap();
                a[i] = !in_k[i];
            }
            a
        }
    };
    let inv = 1.0 / (2 * dim) as f64;
    let nbrs = |i: usize| grid.strides.iter().flat_map(move |&s| [i + s, i - s]);
    let b: Vec<f64> =
        (0..grid.len).map(|i| if active[i] { nbrs(i).filter(|&j| in_k[j]).count() as f64 * inv } else { 0.0 }).collect();
    let mut h = vec![0.0; grid.len];
    let op = MaskedStencil::new(grid.strides.clone(), active);
    conjugate_gradient(&op, &b, &mut h, SOLVE_TOL, 40 * grid.len.min(1 << 20))?;
    let active = op.active();
    let weights: Vec<f64> = k
        .sites()
        .iter()
        .map(|x| {
            let i = grid.index(x).unwrap();
            let escape: f64 = nbrs(i)
                .map(|j| if in_k[j] { 0.0 } else if active[j] { 1.0 - h[j] } else { 1.0 })
                .sum();
            (escape * inv).clamp(0.0, 1.0)
        })
        .collect();
    let capacity = weights.iter().sum();
    Ok(EquilibriumMeasure {
        set: k.clone(),
        lower: weights.clone(),
        upper: weights.clone(),
        weights,
        capacity,
        relative_error: 0.0,
        env_radius: None,
    })
}

pub const DEFAULT_ENV_RADIUS: usize = 64;

/// Equilibrium measure of K bracketed through the measure relative to B(0, env_radius).
///
/// A walk that leaves the box returns to K with probability at most
/// cap(K) times the largest Green function value from the box boundary, so
/// e_K lies between e_{K,U}(1 - q) and e_{K,U}; the midpoint is returned.
pub fn equilibrium_measure(k: &LocalSet, env_radius: usize) -> Result<EquilibriumMeasure> {
    let dim = k.dim().ok_or(Error::EmptySet("K"))?;
    let rk = k.enclosing_radius();
    if 4 * rk > env_radius || env_radius < 4 {
        return Err(Error::InvalidArgument(format!(
            "environment radius {env_radius} too small for a set of radius {rk}"
        )));
    }
    let rel = relative_equilibrium(k, &Region::Ball { center: Site::origin(dim), radius: env_radius })?;
    let q = (rel.capacity * green_asymptotic(dim, (env_radius + 1 - rk) as f64)).min(1.0);
    let weights: Vec<f64> = rel.weights.iter().map(|w| w * (1.0 - q / 2.0)).collect();
    Ok(EquilibriumMeasure {
        set: rel.set,
        capacity: weights.iter().sum(),
        lower: rel.weights.iter().map(|w| w * (1.0 - q)).collect(),
        upper: rel.weights,
        weights,
        relative_error: q / 2.0,
        env_radius: Some(env_radius),
    })
}

/// u_F(z) = g0 (ln |F| + z).
pub fn u_of_z(f_size: usize, z: f64, g0: f64) -> f64 {
    g0 * ((f_size.max(1) as f64).ln() + z)
}

/// Envelope (r1/r2)^{d-2} for the probability of ever reaching B(0, r1) from distance r2.
pub fn hit_prob_far_bound(r1: f64, r2: f64, dim: usize) -> f64 {
    (r1 / r2).powf(dim as f64 - 2.0)
}
