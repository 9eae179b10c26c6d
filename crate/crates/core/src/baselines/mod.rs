//! Distance-based change detection baselines.

mod m3c2;

pub use m3c2::{estimate_normal, m3c2, write_core_points, CoreResult, M3c2Output, M3c2Params};

use crate::dcva::{ChangeMap, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::geom::{KdIndex, PointCloud};
use crate::par;

/// Cloud-to-cloud: each newer point's distance to its nearest older point,
/// binarized with Otsu. No cleaning.
pub fn c2c(pc1: &PointCloud, pc2: &PointCloud, index1: &KdIndex) -> Result<ChangeMap> {
    if pc1.is_empty() || pc2.is_empty() {
        return Err(Error::Empty("c2c needs two non-empty clouds"));
    }
    let d = par::map_slice(&pc2.points, |p| index1.nearest(p).distance);
    ChangeMap::from_magnitudes(d, DEFAULT_BINS)
}
