use std::collections::BTreeMap;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Default)]
struct Cell {
    sum: Point3,
    count: usize,
    changed: usize,
}

/// One barycenter per occupied cubic cell of side `cell`. Output order is
/// the lexicographic order of integer cell coordinates, so it does not depend
/// on input order. Labels become the per-cell majority; ties are unchanged.
pub fn grid_subsample(cloud: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::InvalidParameter(format!("cell must be > 0, got {cell}")));
    }
    cloud.validate()?;
    let mut cells: BTreeMap<[i64; 3], Cell> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cells.entry(cell_key(p, cell)).or_default();
        c.sum = c.sum + *p;
        c.count += 1;
        if cloud.labels.as_ref().is_some_and(|l| l[i]) {
            c.changed += 1;
        }
    }
    let points = cells
        .values()
        .map(|c| c.sum * (1.0 / c.count as f64))
        .collect();
    let labels = cloud
        .labels
        .as_ref()
        .map(|_| cells.values().map(|c| 2 * c.changed > c.count).collect());
    Ok(PointCloud { points, labels })
}

/// Barycenters only; the caller guarantees finite input.
pub(crate) fn subsample_points(points: &[Point3], cell: f64) -> Vec<Point3> {
    let mut cells: BTreeMap<[i64; 3], (Point3, usize)> = BTreeMap::new();
    for p in points {
        let c = cells.entry(cell_key(p, cell)).or_default();
        c.0 = c.0 + *p;
        c.1 += 1;
    }
    cells.values().map(|(s, n)| *s * (1.0 / *n as f64)).collect()
}

#[inline]
pub(crate) fn cell_key(p: &Point3, cell: f64) -> [i64; 3] {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}
