//! Geometry primitives, grid subsampling, the k-d index and cylinder tiling.

mod io;
mod kdtree;
pub(crate) mod subsample;
pub(crate) mod tiling;

use std::ops::{Add, Mul, Sub};

pub use io::{read_cloud, write_cloud};
pub use kdtree::{KdIndex, Neighbor};
pub use subsample::grid_subsample;
pub use tiling::{extract_cylinder, sample_tile_centers, Epoch, Tile};

use crate::error::{Error, Result};

/// A point in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn dot(&self, o: &Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn dist2(&self, o: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    #[inline]
    pub fn dist(&self, o: &Point3) -> f64 {
        self.dist2(o).sqrt()
    }

    /// Squared distance in the horizontal plane.
    #[inline]
    pub fn dist2_xy(&self, cx: f64, cy: f64) -> f64 {
        let (dx, dy) = (self.x - cx, self.y - cy);
        dx * dx + dy * dy
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Ordered points with optional per-point change labels (`true` = changed).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::LengthMismatch {
                what: "labels vs points",
                left: labels.len(),
                right: points.len(),
            });
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rejects non-finite coordinates and mislabeled lengths.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if let Some(l) = &self.labels {
            if l.len() != self.points.len() {
                return Err(Error::LengthMismatch {
                    what: "labels vs points",
                    left: l.len(),
                    right: self.points.len(),
                });
            }
        }
        Ok(())
    }

    pub fn bbox(&self) -> Option<Bbox> {
        Bbox::of(&self.points)
    }

    /// Subset of the cloud (labels carried along).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox {
    pub min: Point3,
    pub max: Point3,
}

impl Bbox {
    pub fn of(points: &[Point3]) -> Option<Bbox> {
        let first = *points.first()?;
        let mut b = Bbox {
            min: first,
            max: first,
        };
        for p in &points[1..] {
            b.min.x = b.min.x.min(p.x);
            b.min.y = b.min.y.min(p.y);
            b.min.z = b.min.z.min(p.z);
            b.max.x = b.max.x.max(p.x);
            b.max.y = b.max.y.max(p.y);
            b.max.z = b.max.z.max(p.z);
        }
        Some(b)
    }

    pub fn union(&self, o: &Bbox) -> Bbox {
        Bbox {
            min: Point3::new(
                self.min.x.min(o.min.x),
                self.min.y.min(o.min.y),
                self.min.z.min(o.min.z),
            ),
            max: Point3::new(
                self.max.x.max(o.max.x),
                self.max.y.max(o.max.y),
                self.max.z.max(o.max.z),
            ),
        }
    }
}
