//! Sparse linear algebra for lattice problems: conjugate gradient and the
//! masked nearest-neighbour stencil it is applied to.

use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 1 << 14;

pub trait LinearOperator: Sync {
    fn len(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Dot product with a fixed summation order, independent of the thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.par_iter().map(|x| x.abs()).reduce(|| 0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// Final ||b - Ax||_2 / ||b||_2.
    pub relative_residual: f64,
}

/// Conjugate gradient for a symmetric positive definite operator, starting from `x`.
pub fn conjugate_gradient<A: LinearOperator>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgReport> {
    let n = a.len();
    assert_eq!(b.len(), n);
    assert_eq!(x.len(), n);
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    r.par_iter_mut().zip(b.par_iter()).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        let rel = rr.sqrt() / bnorm;
        if rel <= tol {
            return Ok(CgReport { iterations: it, relative_residual: rel });
        }
        a.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        // x += alpha p and r -= alpha Ap in one sweep, accumulating |r|^2 per chunk.
        let partial: Vec<f64> = x
            .par_chunks_mut(CHUNK)
            .zip(r.par_chunks_mut(CHUNK))
            .zip(p.par_chunks(CHUNK).zip(ap.par_chunks(CHUNK)))
            .map(|((x, r), (p, ap))| {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    x[i] += alpha * p[i];
                    r[i] -= alpha * ap[i];
                    acc += r[i] * r[i];
                }
                acc
            })
            .collect();
        let rr_new: f64 = partial.iter().sum();
        let beta = rr_new / rr;
        rr = rr_new;
        p.par_chunks_mut(CHUNK).zip(r.par_chunks(CHUNK)).for_each(|(p, r)| {
            for (pi, ri) in p.iter_mut().zip(r) {
                *pi = ri + beta * *pi;
            }
        });
    }
    // Recompute the true residual before giving up; the recursive one drifts.
    a.apply(x, &mut ap);
    let res: Vec<f64> = b.iter().zip(&ap).map(|(b, y)| b - y).collect();
    let rel = norm2(&res) / bnorm;
    if rel <= tol {
        Ok(CgReport { iterations: max_iter, relative_residual: rel })
    } else {
        Err(Error::SolverNotConverged { residual: rel, iterations: max_iter })
    }
}

/// `I - P` for the simple random walk on a rectangular grid, restricted to the
/// active cells and with zero values everywhere else. The grid must carry a
/// halo of inactive cells so every active cell has all its neighbours in range.
pub struct MaskedStencil {
    strides: Vec<usize>,
    active: Vec<bool>,
    inv_deg: f64,
}

impl MaskedStencil {
    pub fn new(strides: Vec<usize>, active: Vec<bool>) -> Self {
        let inv_deg = 1.0 / (2 * strides.len()) as f64;
        MaskedStencil { strides, active, inv_deg }
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    #[inline]
    pub fn neighbour_sum(&self, x: &[f64], i: usize) -> f64 {
        self.strides.iter().map(|&s| x[i + s] + x[i - s]).sum()
    }
}

impl LinearOperator for MaskedStencil {
    fn len(&self) -> usize {
        self.active.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let w = self.inv_deg;
        y.par_chunks_mut(CHUNK).enumerate().for_each(|(c, ys)| {
            let base = c * CHUNK;
            let active = &self.active[base..base + ys.len()];
            if let [s0, s1, s2] = self.strides[..] {
                for (k, yi) in ys.iter_mut().enumerate() {
                    let i = base + k;
                    *yi = if active[k] {
                        x[i] - w * (x[i + s0] + x[i - s0] + x[i + s1] + x[i - s1] + x[i + s2] + x[i - s2])
                    } else {
                        0.0
                    };
                }
            } else {
                for (k, yi) in ys.iter_mut().enumerate() {
                    let i = base + k;
                    *yi = if active[k] { x[i] - w * self.neighbour_sum(x, i) } else { 0.0 };
                }
            }
        });
    }
}

/// Sparse symmetric 0/1 adjacency scaled by a constant weight.
#[derive(Clone, Debug)]
pub struct ScaledAdjacency {
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub weight: f64,
}

impl ScaledAdjacency {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(4096).enumerate().for_each(|(c, ys)| {
            let base = c * 4096;
            for (k, yi) in ys.iter_mut().enumerate() {
                let s: f64 = self.row(base + k).iter().map(|&j| x[j as usize]).sum();
                *yi = self.weight * s;
            }
        });
    }
}
