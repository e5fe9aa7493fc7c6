//! Continuous-time simple random walk on the torus.
//!
//! The walk is the discrete jump chain together with rate-1 exponential
//! holding times, accumulated exactly; no step-count approximation of the
//! time axis is made anywhere.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{SiteSet, TorusGeometry};

/// One jump: the walk holds at its current site for `holding`, then moves to `target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub target: usize,
    pub holding: f64,
}

/// Single step of the walk from `state`.
#[inline]
pub fn step<R: Rng + ?Sized>(geom: &TorusGeometry, state: usize, rng: &mut R) -> (usize, f64) {
    let holding: f64 = rng.sample(Exp1);
    let dir = rng.random_range(0..2 * geom.dim());
    (geom.neighbor(state, dir), holding)
}

/// Anything that can drive the walk one jump at a time.
pub trait PathSource {
    /// Next jump from `current`, or `None` when the path stays put forever.
    fn next_jump(&mut self, current: usize) -> Option<Jump>;
}

/// Fresh randomness.
pub struct RandomWalk<'a, R: ?Sized> {
    geom: TorusGeometry,
    rng: &'a mut R,
}

impl<'a, R: Rng + ?Sized> RandomWalk<'a, R> {
    pub fn new(geom: TorusGeometry, rng: &'a mut R) -> Self {
        RandomWalk { geom, rng }
    }
}

impl<R: Rng + ?Sized> PathSource for RandomWalk<'_, R> {
    #[inline]
    fn next_jump(&mut self, current: usize) -> Option<Jump> {
        let (target, holding) = step(&self.geom, current, self.rng);
        Some(Jump { target, holding })
    }
}

/// Replays a recorded trajectory; after its last jump the walk stays where it is.
pub struct Replay<'a> {
    jumps: std::slice::Iter<'a, Jump>,
}

impl<'a> Replay<'a> {
    pub fn new(traj: &'a Trajectory) -> Self {
        Replay { jumps: traj.jumps.iter() }
    }
}

impl PathSource for Replay<'_> {
    fn next_jump(&mut self, _current: usize) -> Option<Jump> {
        self.jumps.next().copied()
    }
}

/// A finite piece of a walk path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    pub jumps: Vec<Jump>,
}

const DUMP_MAGIC: [u8; 4] = *b"CTRJ";

impl Trajectory {
    /// Records a walk from `start` until the first jump after `duration`.
    pub fn sample<R: Rng + ?Sized>(geom: &TorusGeometry, start: usize, duration: f64, rng: &mut R) -> Self {
        let mut jumps = Vec::new();
        let mut t = 0.0;
        let mut pos = start;
        while t <= duration {
            let (target, holding) = step(geom, pos, rng);
            t += holding;
            jumps.push(Jump { target, holding });
            pos = target;
        }
        Trajectory { start, jumps }
    }

    pub fn elapsed(&self) -> f64 {
        self.jumps.iter().map(|j| j.holding).sum()
    }

    pub fn end(&self) -> usize {
        self.jumps.last().map_or(self.start, |j| j.target)
    }

    /// Checks nearest-neighbour moves and positive holding times.
    pub fn validate(&self, geom: &TorusGeometry) -> Result<()> {
        let mut pos = self.start;
        for (k, j) in self.jumps.iter().enumerate() {
            if !(j.holding > 0.0 && j.holding.is_finite()) {
                return Err(Error::InvalidArgument(format!("jump {k}: holding {}", j.holding)));
            }
            if j.target >= geom.volume() || geom.dist_inf_idx(pos, j.target) != 1
                || (0..geom.dim()).filter(|&a| geom.coord(pos, a) != geom.coord(j.target, a)).count() != 1
            {
                return Err(Error::InvalidArgument(format!("jump {k}: not a nearest-neighbour move")));
            }
            pos = j.target;
        }
        Ok(())
    }

    /// Binary dump: 16-byte header (magic, d, N, record count as u32 LE) and then
    /// one `(site, holding)` record per visited site. Sites are u32 when the torus
    /// has at most 2^32 sites and u64 otherwise; holdings are f64. The final record
    /// carries holding 0.0 because the observation ends on arrival.
    pub fn write_dump<W: Write>(&self, geom: &TorusGeometry, mut out: W) -> Result<()> {
        let count = u32::try_from(self.jumps.len() + 1)
            .map_err(|_| Error::InvalidArgument("trajectory too long to dump".into()))?;
        out.write_all(&DUMP_MAGIC)?;
        out.write_all(&(geom.dim() as u32).to_le_bytes())?;
        out.write_all(&(geom.side() as u32).to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        let wide = wide_sites(geom);
        let mut site = self.start;
        for j in self.jumps.iter().map(|j| (j.holding, j.target)).chain(std::iter::once((0.0, 0))) {
            if wide {
                out.write_all(&(site as u64).to_le_bytes())?;
            } else {
                out.write_all(&(site as u32).to_le_bytes())?;
            }
            out.write_all(&j.0.to_le_bytes())?;
            site = j.1;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<(TorusGeometry, Trajectory)> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if header[..4] != DUMP_MAGIC {
            return Err(Error::InvalidArgument("bad trajectory magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let geom = TorusGeometry::new(word(4) as usize, word(8) as usize)?;
        let count = word(12) as usize;
        if count == 0 {
            return Err(Error::InvalidArgument("empty trajectory dump".into()));
        }
        let wide = wide_sites(&geom);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let site = if wide {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                u64::from_le_bytes(b) as usize
            } else {
                let mut b = [0u8; 4];
                input.read_exact(&mut b)?;
                u32::from_le_bytes(b) as usize
            };
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            records.push((site, f64::from_le_bytes(b)));
        }
        let jumps = records.windows(2).map(|w| Jump { target: w[1].0, holding: w[0].1 }).collect();
        Ok((geom, Trajectory { start: records[0].0, jumps }))
    }
}

fn wide_sites(geom: &TorusGeometry) -> bool {
    geom.volume() > u32::MAX as usize + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitKind {
    /// H_U = inf{t >= 0 : Y_t in U}
    Entrance,
    /// inf{t >= first jump time : Y_t in U}
    Return,
    /// T_U = inf{t >= 0 : Y_t not in U}
    Exit,
}

/// Entrance, return or exit time of `target`, or `None` past `horizon`.
pub fn hitting_time<S: PathSource>(
    source: &mut S,
    start: usize,
    target: &SiteSet,
    kind: HitKind,
    horizon: f64,
) -> Result<Option<f64>> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
    }
    if kind != HitKind::Exit && target.is_empty() {
        return Err(Error::EmptySet("hitting target"));
    }
    let wanted = |x: usize| match kind {
        HitKind::Exit => !target.contains(x),
        _ => target.contains(x),
    };
    if kind != HitKind::Return && wanted(start) {
        return Ok(Some(0.0));
    }
    let mut t = 0.0;
    let mut pos = start;
    while let Some(j) = source.next_jump(pos) {
        t += j.holding;
        if t > horizon {
            return Ok(None);
        }
        pos = j.target;
        if wanted(pos) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Where a walk starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Start {
    Site(usize),
    Uniform,
}

impl Start {
    pub fn resolve<R: Rng + ?Sized>(&self, geom: &TorusGeometry, rng: &mut R) -> usize {
        match self {
            Start::Site(i) => *i,
            Start::Uniform => rng.random_range(0..geom.volume()),
        }
    }
}

/// 50 g(0) N^d log N^d.
pub fn default_horizon(geom: &TorusGeometry, g0: f64) -> f64 {
    let v = geom.volume() as f64;
    50.0 * g0 * v * v.ln().max(1.0)
}

#[derive(Clone, Debug)]
pub struct CoverOptions {
    pub horizon: f64,
    pub keep_hit_times: bool,
    /// How many of the most recently covered sites to remember.
    pub tail: usize,
}

/// Outcome of a cover sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct HitRecord {
    /// First-entrance time per torus index (infinite when not hit or not a target).
    pub hit_times: Option<Vec<f64>>,
    pub covered: bool,
    /// Largest entrance time recorded so far; the cover time when `covered`.
    pub last_time: f64,
    pub target_size: usize,
    pub remaining: usize,
    /// Most recently covered sites, in covering order.
    pub tail: Vec<usize>,
    /// Time the sweep stopped at.
    pub elapsed: f64,
}

impl HitRecord {
    pub fn cover_time(&self) -> Result<f64> {
        if self.covered {
            Ok(self.last_time)
        } else {
            Err(Error::HorizonExceeded { horizon: self.elapsed })
        }
    }

    pub fn hit_time(&self, index: usize) -> Option<f64> {
        self.hit_times.as_ref().and_then(|h| h.get(index).copied()).filter(|t| t.is_finite())
    }

    /// Sites of the target not hit by time `t` (needs retained hit times).
    pub fn unhit_at(&self, t: f64) -> Option<Vec<usize>> {
        let h = self.hit_times.as_ref()?;
        Some((0..h.len()).filter(|&i| h[i] > t).collect())
    }
}

/// Runs until every site of `target` has been entered or `horizon` passes.
pub fn run_cover<S: PathSource>(
    geom: &TorusGeometry,
    target: &SiteSet,
    start: usize,
    opts: &CoverOptions,
    source: &mut S,
) -> Result<HitRecord> {
    if target.is_empty() {
        return Err(Error::EmptySet("cover target"));
    }
    let full = target.is_full();
    let is_target = |x: usize| full || target.contains(x);
    let mut hit = vec![f64::INFINITY; geom.volume()];
    let mut remaining = target.len();
    let mut tail: Vec<usize> = Vec::with_capacity(opts.tail + 1);
    let mut last_time = 0.0;
    let mut t = 0.0;
    let mut pos = start;
    let mut mark = |x: usize, t: f64, remaining: &mut usize, tail: &mut Vec<usize>, last: &mut f64| {
        if is_target(x) && hit[x] == f64::INFINITY {
            hit[x] = t;
            *remaining -= 1;
            *last = t;
            if opts.tail > 0 {
                if tail.len() == opts.tail {
                    tail.remove(0);
                }
                tail.push(x);
            }
        }
    };
    mark(pos, 0.0, &mut remaining, &mut tail, &mut last_time);
    while remaining > 0 {
        let Some(j) = source.next_jump(pos) else {
            t = f64::INFINITY;
            break;
        };
        let next = t + j.holding;
        if next > opts.horizon {
            t = opts.horizon;
            break;
        }
        t = next;
        pos = j.target;
        mark(pos, t, &mut remaining, &mut tail, &mut last_time);
    }
    let covered = remaining == 0;
    Ok(HitRecord {
        hit_times: opts.keep_hit_times.then_some(hit),
        covered,
        last_time,
        target_size: target.len(),
        remaining,
        tail,
        elapsed: if covered { last_time } else { t },
    })
}

/// Successive returns R_k to A and departures U_k from C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcursionRecord {
    pub returns: Vec<f64>,
    /// U_1, U_2, ... (U_0 = 0 is implicit).
    pub departures: Vec<f64>,
    pub t_star: f64,
    pub horizon: f64,
}

impl ExcursionRecord {
    /// Excursions with U_k <= horizon.
    pub fn complete(&self) -> usize {
        self.departures.len()
    }
}

/// Decomposes the path into excursions: R_k is the first entrance to `a_union`
/// after U_{k-1}; U_k is the first time after R_k at which the walk has spent
/// the preceding `t_star` units entirely outside `c_union`.
pub fn excursions<S: PathSource>(
    a_union: &SiteSet,
    c_union: &SiteSet,
    t_star: f64,
    horizon: f64,
    start: usize,
    source: &mut S,
) -> Result<ExcursionRecord> {
    if a_union.is_empty() {
        return Err(Error::EmptySet("excursion set A"));
    }
    if !(t_star > 0.0) {
        return Err(Error::InvalidArgument(format!("t* = {t_star} must be positive")));
    }
    if !a_union.is_subset(c_union) {
        return Err(Error::InvalidArgument("A is not contained in C".into()));
    }
    let mut rec = ExcursionRecord { returns: Vec::new(), departures: Vec::new(), t_star, horizon };
    // None while seeking A; Some(left) while watching, with `left` the time the
    // walk last stepped out of C (None when inside C).
    let mut watch: Option<Option<f64>> = None;
    let mut t = 0.0;
    let mut pos = start;
    if a_union.contains(pos) {
        rec.returns.push(0.0);
        watch = Some(None);
    }
    loop {
        let jump = source.next_jump(pos);
        let next = jump.map_or(f64::INFINITY, |j| t + j.holding);
        if let Some(Some(left)) = watch {
            let u = left + t_star;
            if u < next {
                if u > horizon {
                    break;
                }
                rec.departures.push(u);
                watch = None;
            }
        }
        let Some(j) = jump else { break };
        if next > horizon {
            break;
        }
        t = next;
        pos = j.target;
        match watch {
            None => {
                if a_union.contains(pos) {
                    rec.returns.push(t);
                    watch = Some(None);
                }
            }
            Some(left) => {
                if c_union.contains(pos) {
                    watch = Some(None);
                } else if left.is_none() {
                    watch = Some(Some(t));
                }
            }
        }
    }
    Ok(rec)
}
