//! Rigid kernel-point convolution support: kernel layout and precomputed
//! neighbor influences.

use super::tape::Matrix;
use crate::error::{Error, Result};
use crate::geom::{KdIndex, Point3};

/// Supported kernel size: center plus the six octahedron vertices.
pub const KERNEL_POINTS: usize = 7;

/// Kernel point offsets for a convolution of the given radius: the origin
/// and the six axis-aligned points at distance `radius / 2`.
pub fn kernel_point_positions(count: usize, radius: f64) -> Result<[Point3; KERNEL_POINTS]> {
    if count != KERNEL_POINTS {
        return Err(Error::InvalidParameter(format!(
            "only the {KERNEL_POINTS}-point kernel layout is supported, got {count}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("kernel radius must be > 0, got {radius}")));
    }
    let r = radius / 2.0;
    Ok([
        Point3::ORIGIN,
        Point3::new(r, 0.0, 0.0),
        Point3::new(-r, 0.0, 0.0),
        Point3::new(0.0, r, 0.0),
        Point3::new(0.0, -r, 0.0),
        Point3::new(0.0, 0.0, r),
        Point3::new(0.0, 0.0, -r),
    ])
}

/// Linear kernel influence of a neighbor at `offset = q - p`.
pub fn kernel_influence(offset: &Point3, kernel: &[Point3; KERNEL_POINTS], sigma: f64) -> [f64; KERNEL_POINTS] {
    let mut h = [0.0; KERNEL_POINTS];
    for (hk, xk) in h.iter_mut().zip(kernel) {
        *hk = (1.0 - offset.dist(xk) / sigma).max(0.0);
    }
    h
}

/// Sparse query-to-support influence table for one convolution.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    offsets: Vec<usize>,
    support: Vec<usize>,
    influence: Vec<[f64; KERNEL_POINTS]>,
    n_support: usize,
}

impl Neighborhood {
    /// Neighbors of each query within `radius` among `supports`. A query with
    /// no support in range keeps its nearest support, so every receptive
    /// field is non-empty; when queries and supports coincide each point is
    /// its own neighbor. Influences are divided by the neighbor count, so the
    /// aggregate is a kernel-weighted neighborhood mean and does not scale
    /// with sampling density.
    pub fn build(queries: &[Point3], supports: &[Point3], index: &KdIndex, radius: f64) -> Self {
        debug_assert_eq!(index.len(), supports.len());
        let kernel = kernel_point_positions(KERNEL_POINTS, radius).expect("radius checked by config");
        let sigma = radius / 2.0;
        let mut offsets = Vec::with_capacity(queries.len() + 1);
        let mut support = Vec::new();
        let mut influence = Vec::new();
        offsets.push(0);
        for p in queries {
            let mut nbrs = index.within_radius(p, radius);
            if nbrs.is_empty() {
                nbrs.push(index.nearest(p));
            }
            let inv_n = 1.0 / nbrs.len() as f64;
            for n in nbrs {
                support.push(n.index);
                influence.push(kernel_influence(&(supports[n.index] - *p), &kernel, sigma).map(|h| h * inv_n));
            }
            offsets.push(support.len());
        }
        Neighborhood {
            offsets,
            support,
            influence,
            n_support: supports.len(),
        }
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn neighbors(&self, query: usize) -> &[usize] {
        &self.support[self.offsets[query]..self.offsets[query + 1]]
    }

    /// `queries x (KERNEL_POINTS * C)` aggregated features.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.nrows(), self.n_support, "support feature rows");
        let c = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let mut out = Matrix::zeros((self.n_queries(), KERNEL_POINTS * c));
        let os = out.as_slice_mut().unwrap();
        for p in 0..self.n_queries() {
            let row = &mut os[p * KERNEL_POINTS * c..(p + 1) * KERNEL_POINTS * c];
            for e in self.offsets[p]..self.offsets[p + 1] {
                let src = &xs[self.support[e] * c..(self.support[e] + 1) * c];
                for (k, &h) in self.influence[e].iter().enumerate() {
                    if h == 0.0 {
                        continue;
                    }
                    for (d, s) in row[k * c..(k + 1) * c].iter_mut().zip(src) {
                        *d += h * s;
                    }
                }
            }
        }
        out
    }

    /// Vector-Jacobian product of [`Self::forward`].
    pub fn backward(&self, g: &Matrix, n_support: usize) -> Matrix {
        debug_assert_eq!(n_support, self.n_support);
        let c = g.ncols() / KERNEL_POINTS;
        let gs = g.as_standard_layout();
        let gs = gs.as_slice().unwrap();
        let mut gx = Matrix::zeros((n_support, c));
        let xs = gx.as_slice_mut().unwrap();
        for p in 0..self.n_queries() {
            let row = &gs[p * KERNEL_POINTS * c..(p + 1) * KERNEL_POINTS * c];
            for e in self.offsets[p]..self.offsets[p + 1] {
                let dst = &mut xs[self.support[e] * c..(self.support[e] + 1) * c];
                for (k, &h) in self.influence[e].iter().enumerate() {
                    if h == 0.0 {
                        continue;
                    }
                    for (d, s) in dst.iter_mut().zip(&row[k * c..(k + 1) * c]) {
                        *d += h * s;
                    }
                }
            }
        }
        gx
    }
}
