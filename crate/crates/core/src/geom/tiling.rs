use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{KdIndex, PointCloud};
use crate::error::{Error, Result};

/// Acquisition epoch of the parent cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Epoch {
    Older,
    Newer,
}

/// A vertical cylinder of points, unbounded in z.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub center: [f64; 2],
    pub radius: f64,
    /// Sorted indices into the parent cloud.
    pub point_indices: Vec<usize>,
    pub epoch: Epoch,
}

impl Tile {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Every point of `cloud` within horizontal distance `radius` of `center`.
/// `index` must be built over `cloud`. An empty tile is a valid result.
pub fn extract_cylinder(
    cloud: &PointCloud,
    index: &KdIndex,
    center: [f64; 2],
    radius: f64,
    epoch: Epoch,
) -> Result<Tile> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("radius must be > 0, got {radius}")));
    }
    debug_assert_eq!(index.len(), cloud.len());
    Ok(Tile {
        center,
        radius,
        point_indices: index.within_cylinder(center[0], center[1], radius),
        epoch,
    })
}

/// `count` centers drawn uniformly from the horizontal bounding box.
pub fn sample_tile_centers(cloud: &PointCloud, count: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if count == 0 {
        return Err(Error::InvalidParameter("center count must be >= 1".into()));
    }
    let bb = cloud.bbox().ok_or(Error::Empty("cannot sample centers on an empty cloud"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_in_box(&mut rng, bb.min.x, bb.max.x, bb.min.y, bb.max.y, count))
}

pub(crate) fn sample_in_box<R: Rng>(rng: &mut R, x0: f64, x1: f64, y0: f64, y1: f64, count: usize) -> Vec<[f64; 2]> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            [x0 + u * (x1 - x0), y0 + v * (y1 - y0)]
        })
        .collect()
}
