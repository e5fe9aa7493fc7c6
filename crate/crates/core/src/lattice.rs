//! Geometry of the discrete torus and of finite pieces of the integer lattice.
//!
//! Torus sites are flat row-major indices (last coordinate fastest) and are
//! converted to coordinate vectors only at API boundaries. Subsets of the
//! torus are dense bit-sets when the torus has at most 2^31 sites and sorted
//! index lists otherwise.

use std::fmt;
use std::ops::{Add, Sub};

use bitvec::vec::BitVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 12;

const DENSE_LIMIT: usize = 1 << 31;

/// A lattice point, either a canonical torus representative or a point of Z^d.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site(Vec<i64>);

impl Site {
    pub fn new(coords: Vec<i64>) -> Self {
        Site(coords)
    }

    pub fn origin(dim: usize) -> Self {
        Site(vec![0; dim])
    }

    /// `sign * e_axis`.
    pub fn unit(dim: usize, axis: usize, sign: i64) -> Self {
        let mut c = vec![0; dim];
        c[axis] = sign;
        Site(c)
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_inf(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt()
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Neighbor in direction `dir` (axis `dir / 2`, positive when `dir` is even).
    pub fn step(&self, dir: usize) -> Site {
        let mut c = self.0.clone();
        if dir % 2 == 0 {
            c[dir / 2] += 1;
        } else {
            c[dir / 2] -= 1;
        }
        Site(c)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = Site> + '_ {
        (0..2 * self.dim()).map(move |dir| self.step(dir))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl From<&[i64]> for Site {
    fn from(c: &[i64]) -> Self {
        Site(c.to_vec())
    }
}

impl<const D: usize> From<[i64; D]> for Site {
    fn from(c: [i64; D]) -> Self {
        Site(c.to_vec())
    }
}

impl Add for &Site {
    type Output = Site;
    fn add(self, rhs: &Site) -> Site {
        Site(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Site {
    type Output = Site;
    fn sub(self, rhs: &Site) -> Site {
        Site(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

/// The discrete torus (Z / N Z)^d.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct TorusGeometry {
    dim: usize,
    side: usize,
    volume: usize,
    strides: [usize; MAX_DIM],
}

impl fmt::Debug for TorusGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TorusGeometry(d={}, N={})", self.dim, self.side)
    }
}

impl TorusGeometry {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidGeometry(format!("dimension {dim} not in 1..={MAX_DIM}")));
        }
        if side < 3 {
            return Err(Error::InvalidGeometry(format!("side {side} < 3")));
        }
        let mut strides = [0usize; MAX_DIM];
        let mut volume: usize = 1;
        for axis in (0..dim).rev() {
            strides[axis] = volume;
            volume = volume
                .checked_mul(side)
                .ok_or_else(|| Error::InvalidGeometry("site count overflows".into()))?;
        }
        Ok(TorusGeometry { dim, side, volume, strides })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// N^d.
    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn wrap(&self, raw: &[i64]) -> Result<Site> {
        self.check_dim(raw.len())?;
        let n = self.side as i64;
        Ok(Site(raw.iter().map(|c| c.rem_euclid(n)).collect()))
    }

    pub fn index(&self, site: &Site) -> Result<usize> {
        self.check_dim(site.dim())?;
        let n = self.side as i64;
        Ok(site
            .coords()
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| c.rem_euclid(n) as usize * s)
            .sum())
    }

    pub fn site(&self, index: usize) -> Site {
        Site(
            self.strides[..self.dim]
                .iter()
                .map(|s| ((index / s) % self.side) as i64)
                .collect(),
        )
    }

    #[inline]
    pub fn coord(&self, index: usize, axis: usize) -> usize {
        (index / self.strides[axis]) % self.side
    }

    /// Neighbor of a flat index in direction `dir` in `0..2d`.
    #[inline]
    pub fn neighbor(&self, index: usize, dir: usize) -> usize {
        let axis = dir >> 1;
        let s = self.strides[axis];
        let c = (index / s) % self.side;
        if dir & 1 == 0 {
            if c + 1 == self.side {
                index - (self.side - 1) * s
            } else {
                index + s
            }
        } else if c == 0 {
            index + (self.side - 1) * s
        } else {
            index - s
        }
    }

    /// Minimal-image displacement `y - x` with each coordinate in `(-N/2, N/2]`.
    pub fn displacement(&self, x: usize, y: usize) -> Site {
        let n = self.side as i64;
        Site(
            (0..self.dim)
                .map(|a| {
                    let d = (self.coord(y, a) as i64 - self.coord(x, a) as i64).rem_euclid(n);
                    if 2 * d > n {
                        d - n
                    } else {
                        d
                    }
                })
                .collect(),
        )
    }

    pub fn dist_inf(&self, x: &Site, y: &Site) -> Result<usize> {
        Ok(self.dist_inf_idx(self.index(x)?, self.index(y)?))
    }

    pub fn dist_inf_idx(&self, x: usize, y: usize) -> usize {
        (0..self.dim)
            .map(|a| {
                let d = self.coord(x, a).abs_diff(self.coord(y, a));
                d.min(self.side - d)
            })
            .max()
            .unwrap_or(0)
    }

    /// Closed l-infinity ball B(center, radius) in the torus.
    pub fn ball(&self, center: &Site, radius: usize) -> Result<SiteSet> {
        self.check_dim(center.dim())?;
        let span = (2 * radius + 1).min(self.side);
        let r = radius as i64;
        let mut set = SiteSet::empty(self);
        let mut offset = vec![0usize; self.dim];
        loop {
            let raw: Vec<i64> = center
                .coords()
                .iter()
                .zip(&offset)
                .map(|(c, &o)| c - r + o as i64)
                .collect();
            set.insert(self.index(&Site(raw))?);
            let mut axis = 0;
            loop {
                if axis == self.dim {
                    return Ok(set);
                }
                offset[axis] += 1;
                if offset[axis] < span {
                    break;
                }
                offset[axis] = 0;
                axis += 1;
            }
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            Err(Error::DimensionMismatch { expected: self.dim, got })
        } else {
            Ok(())
        }
    }
}

/// Closed l-infinity ball B(center, radius).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: Site,
    pub radius: usize,
}

impl BoxSpec {
    pub fn new(center: Site, radius: usize) -> Self {
        BoxSpec { center, radius }
    }

    pub fn contains(&self, x: &Site) -> bool {
        (x - &self.center).norm_inf() <= self.radius as i64
    }

    /// The box as a subset of Z^d.
    pub fn sites(&self) -> LocalSet {
        let grid = BoxGrid::new(self.center.dim(), self.radius);
        LocalSet::from_sites((0..grid.len()).map(|i| &grid.site(i) + &self.center))
    }

    pub fn torus_sites(&self, geom: &TorusGeometry) -> Result<SiteSet> {
        geom.ball(&self.center, self.radius)
    }
}

/// Subset of the torus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteSet {
    volume: usize,
    repr: Repr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Repr {
    Dense { bits: BitVec, len: usize },
    Sparse(Vec<usize>),
}

impl SiteSet {
    pub fn empty(geom: &TorusGeometry) -> Self {
        Self::with_volume(geom.volume())
    }

    fn with_volume(volume: usize) -> Self {
        let repr = if volume <= DENSE_LIMIT {
            Repr::Dense { bits: BitVec::repeat(false, volume), len: 0 }
        } else {
            Repr::Sparse(Vec::new())
        };
        SiteSet { volume, repr }
    }

    pub fn full(geom: &TorusGeometry) -> Self {
        Self::from_indices(geom, 0..geom.volume())
    }

    pub fn from_indices(geom: &TorusGeometry, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(geom);
        for i in indices {
            s.insert(i);
        }
        s
    }

    pub fn from_sites(geom: &TorusGeometry, sites: &[Site]) -> Result<Self> {
        let mut s = Self::empty(geom);
        for x in sites {
            s.insert(geom.index(x)?);
        }
        Ok(s)
    }

    /// Inserts a flat index; returns true when it was absent.
    pub fn insert(&mut self, index: usize) -> bool {
        assert!(index < self.volume, "index {index} out of range");
        match &mut self.repr {
            Repr::Dense { bits, len } => {
                if bits[index] {
                    false
                } else {
                    bits.set(index, true);
                    *len += 1;
                    true
                }
            }
            Repr::Sparse(v) => match v.binary_search(&index) {
                Ok(_) => false,
                Err(pos) => {
                    v.insert(pos, index);
                    true
                }
            },
        }
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        match &self.repr {
            Repr::Dense { bits, .. } => index < self.volume && bits[index],
            Repr::Sparse(v) => v.binary_search(&index).is_ok(),
        }
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Dense { len, .. } => *len,
            Repr::Sparse(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.volume
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    /// Members in increasing index order.
    pub fn indices(&self) -> Vec<usize> {
        match &self.repr {
            Repr::Dense { bits, .. } => bits.iter_ones().collect(),
            Repr::Sparse(v) => v.clone(),
        }
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        let mut out = self.clone();
        for i in other.indices() {
            out.insert(i);
        }
        out
    }

    pub fn is_subset(&self, other: &SiteSet) -> bool {
        self.indices().into_iter().all(|i| other.contains(i))
    }

    pub fn is_disjoint(&self, other: &SiteSet) -> bool {
        self.indices().into_iter().all(|i| !other.contains(i))
    }

    pub fn complement(&self) -> SiteSet {
        let mut out = Self::with_volume(self.volume);
        for i in 0..self.volume {
            if !self.contains(i) {
                out.insert(i);
            }
        }
        out
    }
}

/// Inner boundary {x in U : some neighbor of x lies outside U}.
pub fn inner_boundary(geom: &TorusGeometry, set: &SiteSet) -> Result<SiteSet> {
    check_proper(set)?;
    let d2 = 2 * geom.dim();
    Ok(SiteSet::from_indices(
        geom,
        set.indices()
            .into_iter()
            .filter(|&x| (0..d2).any(|dir| !set.contains(geom.neighbor(x, dir)))),
    ))
}

/// Outer boundary {x outside U : some neighbor of x lies in U}.
pub fn outer_boundary(geom: &TorusGeometry, set: &SiteSet) -> Result<SiteSet> {
    check_proper(set)?;
    let d2 = 2 * geom.dim();
    let mut out = SiteSet::empty(geom);
    for x in set.indices() {
        for dir in 0..d2 {
            let y = geom.neighbor(x, dir);
            if !set.contains(y) {
                out.insert(y);
            }
        }
    }
    Ok(out)
}

fn check_proper(set: &SiteSet) -> Result<()> {
    if set.is_empty() {
        Err(Error::DegenerateBoundary("empty"))
    } else if set.is_full() {
        Err(Error::DegenerateBoundary("the whole torus"))
    } else {
        Ok(())
    }
}

/// Finite subset of Z^d stored as a sorted, deduplicated list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalSet {
    sites: Vec<Site>,
}

impl LocalSet {
    pub fn from_sites(sites: impl IntoIterator<Item = Site>) -> Self {
        let mut sites: Vec<Site> = sites.into_iter().collect();
        sites.sort();
        sites.dedup();
        LocalSet { sites }
    }

    pub fn singleton(site: Site) -> Self {
        LocalSet { sites: vec![site] }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, x: &Site) -> bool {
        self.sites.binary_search(x).is_ok()
    }

    pub fn position(&self, x: &Site) -> Option<usize> {
        self.sites.binary_search(x).ok()
    }

    pub fn dim(&self) -> Option<usize> {
        self.sites.first().map(Site::dim)
    }

    /// Smallest r with the set inside B(0, r).
    pub fn enclosing_radius(&self) -> usize {
        self.sites.iter().map(|s| s.norm_inf() as usize).max().unwrap_or(0)
    }

    /// Center of the bounding box (rounded down) and the l-infinity radius about it.
    pub fn bounding_ball(&self) -> Option<(Site, usize)> {
        let d = self.dim()?;
        let mut lo = vec![i64::MAX; d];
        let mut hi = vec![i64::MIN; d];
        for s in &self.sites {
            for (a, &c) in s.coords().iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c);
            }
        }
        let center: Vec<i64> = lo.iter().zip(&hi).map(|(l, h)| (l + h).div_euclid(2)).collect();
        let radius = lo
            .iter()
            .zip(&hi)
            .zip(&center)
            .map(|((l, h), c)| (c - l).max(h - c) as usize)
            .max()
            .unwrap_or(0);
        Some((Site(center), radius))
    }

    pub fn translate(&self, by: &Site) -> LocalSet {
        LocalSet::from_sites(self.sites.iter().map(|s| s + by))
    }

    pub fn is_subset(&self, other: &LocalSet) -> bool {
        self.sites.iter().all(|s| other.contains(s))
    }

    /// Places the set on the torus.
    pub fn on_torus(&self, geom: &TorusGeometry) -> Result<SiteSet> {
        SiteSet::from_sites(geom, &self.sites)
    }
}

/// Inner boundary of a finite subset of Z^d.
pub fn inner_boundary_zd(set: &LocalSet) -> Result<LocalSet> {
    if set.is_empty() {
        return Err(Error::DegenerateBoundary("empty"));
    }
    Ok(LocalSet {
        sites: set
            .sites
            .iter()
            .filter(|x| x.neighbors().any(|y| !set.contains(&y)))
            .cloned()
            .collect(),
    })
}

/// Outer boundary of a finite subset of Z^d.
pub fn outer_boundary_zd(set: &LocalSet) -> Result<LocalSet> {
    if set.is_empty() {
        return Err(Error::DegenerateBoundary("empty"));
    }
    Ok(LocalSet::from_sites(
        set.sites.iter().flat_map(|x| x.neighbors().filter(|y| !set.contains(y)).collect::<Vec<_>>()),
    ))
}

/// Separation of box centers: N for a single center, else the minimal pairwise distance.
pub fn separation(centers: &[Site], geom: &TorusGeometry) -> Result<usize> {
    if centers.is_empty() {
        return Err(Error::EmptySet("no centers"));
    }
    if centers.len() == 1 {
        geom.index(&centers[0])?;
        return Ok(geom.side());
    }
    let idx: Vec<usize> = centers.iter().map(|c| geom.index(c)).collect::<Result<_>>()?;
    let mut best = usize::MAX;
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            let d = geom.dist_inf_idx(idx[i], idx[j]);
            if d == 0 {
                return Err(Error::DuplicateCenters(i, j));
            }
            best = best.min(d);
        }
    }
    Ok(best)
}

/// Row-major indexing of the box B(0, radius) in Z^d.
#[derive(Clone, Debug)]
pub struct BoxGrid {
    dim: usize,
    radius: usize,
    side: usize,
    len: usize,
    strides: Vec<usize>,
}

impl BoxGrid {
    pub fn new(dim: usize, radius: usize) -> Self {
        let side = 2 * radius + 1;
        let mut strides = vec![0; dim];
        let mut len = 1;
        for axis in (0..dim).rev() {
            strides[axis] = len;
            len *= side;
        }
        BoxGrid { dim, radius, side, len, strides }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        if x.dim() != self.dim {
            return None;
        }
        let r = self.radius as i64;
        let mut idx = 0;
        for (c, s) in x.coords().iter().zip(&self.strides) {
            if c.abs() > r {
                return None;
            }
            idx += (c + r) as usize * s;
        }
        Some(idx)
    }

    pub fn center(&self) -> usize {
        self.strides.iter().map(|s| s * self.radius).sum()
    }

    pub fn site(&self, index: usize) -> Site {
        let r = self.radius as i64;
        Site(
            self.strides
                .iter()
                .map(|s| ((index / s) % self.side) as i64 - r)
                .collect(),
        )
    }

    /// Neighbor in direction `dir`, or `None` when it leaves the box.
    #[inline]
    pub fn neighbor(&self, index: usize, dir: usize) -> Option<usize> {
        let s = self.strides[dir >> 1];
        let c = (index / s) % self.side;
        if dir & 1 == 0 {
            (c + 1 < self.side).then(|| index + s)
        } else {
            (c > 0).then(|| index - s)
        }
    }
}
