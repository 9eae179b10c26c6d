use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::dcva::{format_sig6, ChangeMap};
use crate::error::{Error, Result};
use crate::geom::{grid_subsample, KdIndex, Point3, PointCloud};
use crate::par;

const LOD_Z: f64 = 1.96;
/// Second eigenvalue below this fraction of the largest means a line, not a
/// surface.
const COLLINEAR_RATIO: f64 = 1e-9;
const VERTICAL_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct M3c2Params {
    /// Neighborhood radius for normal estimation.
    pub normal_scale: f64,
    /// Projection cylinder radius.
    pub projection_radius: f64,
    /// Half-length of the projection cylinder along the normal.
    pub max_depth: f64,
    pub registration_error: f64,
    /// Grid cell for core point selection.
    pub core_cell: f64,
}

impl Default for M3c2Params {
    fn default() -> Self {
        M3c2Params {
            normal_scale: 5.0,
            projection_radius: 0.5,
            max_depth: 10.0,
            registration_error: 0.07,
            core_cell: 1.0,
        }
    }
}

impl M3c2Params {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("normal_scale", self.normal_scale),
            ("projection_radius", self.projection_radius),
            ("max_depth", self.max_depth),
            ("registration_error", self.registration_error),
            ("core_cell", self.core_cell),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("m3c2 {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unit normal of the points within `scale` of `p`: smallest-eigenvalue
/// eigenvector of their covariance, oriented to +z. Vertical normals point
/// to +x (then +y); line-like neighborhoods give +z.
pub fn estimate_normal(cloud: &PointCloud, index: &KdIndex, p: &Point3, scale: f64) -> Result<Point3> {
    let nb = index.within_radius(p, scale);
    if nb.len() < 3 {
        return Err(Error::Degenerate("fewer than 3 neighbors for a normal"));
    }
    let n = nb.len() as f64;
    let mean = nb.iter().fold(Point3::ORIGIN, |a, q| a + cloud.points[q.index]) * (1.0 / n);
    let mut cov = Matrix3::<f64>::zeros();
    for q in &nb {
        let d = cloud.points[q.index] - mean;
        let v = nalgebra::Vector3::new(d.x, d.y, d.z);
        cov += v * v.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let up = Point3::new(0.0, 0.0, 1.0);
    if l2 <= 0.0 || l1 <= COLLINEAR_RATIO * l2 {
        return Ok(up);
    }
    let v = eig.eigenvectors.column(order[0]);
    let mut normal = Point3::new(v[0], v[1], v[2]);
    normal = normal * (1.0 / normal.norm());
    let flip = if normal.z.abs() > VERTICAL_EPS {
        normal.z < 0.0
    } else if normal.x.abs() > VERTICAL_EPS {
        normal.x < 0.0
    } else {
        normal.y < 0.0
    };
    if flip {
        normal = normal * -1.0;
    }
    Ok(normal)
}

/// Per-core-point M3C2 result. `distance` is `None` when either projection
/// cylinder is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreResult {
    pub point: Point3,
    pub normal: Point3,
    pub distance: Option<f64>,
    pub lod: f64,
    pub n1: usize,
    pub n2: usize,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct M3c2Output {
    pub cores: Vec<CoreResult>,
    /// Verdict of the nearest core point, per newer point.
    pub map: ChangeMap,
}

/// Mean and population variance of the signed projections onto `normal` of
/// points inside the cylinder around `core`.
fn project(cloud: &PointCloud, index: &KdIndex, core: &Point3, normal: &Point3, radius: f64, depth: f64) -> (usize, f64, f64) {
    let reach = (radius * radius + depth * depth).sqrt();
    let mut proj = Vec::new();
    for nb in index.within_radius(core, reach) {
        let d = cloud.points[nb.index] - *core;
        let along = d.dot(normal);
        let radial2 = d.dot(&d) - along * along;
        if along.abs() <= depth && radial2 <= radius * radius {
            proj.push(along);
        }
    }
    let n = proj.len();
    if n == 0 {
        return (0, 0.0, 0.0);
    }
    let mean = proj.iter().sum::<f64>() / n as f64;
    let var = proj.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (n, mean, var)
}

/// Single-scale M3C2 with core points on a grid subsample of the older cloud.
pub fn m3c2(pc1: &PointCloud, pc2: &PointCloud, params: &M3c2Params) -> Result<M3c2Output> {
    params.validate()?;
    if pc1.is_empty() || pc2.is_empty() {
        return Err(Error::Empty("m3c2 needs two non-empty clouds"));
    }
    let index1 = KdIndex::build(pc1)?;
    let index2 = KdIndex::build(pc2)?;
    let cores = grid_subsample(pc1, params.core_cell)?.points;
    let up = Point3::new(0.0, 0.0, 1.0);
    let results = par::map_slice(&cores, |c| {
        let normal = estimate_normal(pc1, &index1, c, params.normal_scale).unwrap_or(up);
        let (n1, m1, v1) = project(pc1, &index1, c, &normal, params.projection_radius, params.max_depth);
        let (n2, m2, v2) = project(pc2, &index2, c, &normal, params.projection_radius, params.max_depth);
        if n1 == 0 || n2 == 0 {
            return CoreResult {
                point: *c,
                normal,
                distance: None,
                lod: params.registration_error,
                n1,
                n2,
                significant: false,
            };
        }
        let distance = m2 - m1;
        let lod = LOD_Z * (v1 / n1 as f64 + v2 / n2 as f64).sqrt() + params.registration_error;
        CoreResult {
            point: *c,
            normal,
            distance: Some(distance),
            lod,
            n1,
            n2,
            significant: distance.abs() > lod,
        }
    });
    let core_index = KdIndex::new(&cores)?;
    let (magnitude, changed) = par::map_slice(&pc2.points, |p| {
        let r = &results[core_index.nearest(p).index];
        (r.distance.map_or(0.0, f64::abs), r.significant)
    })
    .into_iter()
    .unzip();
    Ok(M3c2Output {
        cores: results,
        map: ChangeMap { magnitude, changed, threshold: None },
    })
}

/// Core point dump: `x y z magnitude decision distance`; cores without a
/// distance get `nan` in the last column.
pub fn write_core_points(path: &Path, cores: &[CoreResult]) -> Result<()> {
    crate::io_util::write_atomic(path, |w| {
        for c in cores {
            let d = c.distance.map_or("nan".to_string(), format_sig6);
            writeln!(
                w,
                "{} {} {} {} {} {}",
                c.point.x,
                c.point.y,
                c.point.z,
                format_sig6(c.distance.map_or(0.0, f64::abs)),
                u8::from(c.significant),
                d
            )?;
        }
        Ok(())
    })
}
