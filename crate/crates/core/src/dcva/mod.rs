//! Deep change vector analysis in 3D: tap per-point features of both epochs
//! with a trained network, difference each newer point's feature against its
//! nearest older point, and binarize the L2 magnitude with Otsu's threshold.

mod clean;
mod otsu;

use std::io::Write;
use std::path::Path;

pub use clean::{clean_isolated, DEFAULT_CLEAN_K};
pub use otsu::{otsu_bin, otsu_threshold, Histogram, DEFAULT_BINS};

use crate::error::{Error, Result};
use crate::geom::{Bbox, KdIndex, Point3, PointCloud};
use crate::net::{FeatureTap, Matrix, Network};
use crate::par;

/// Per-point features of a whole cloud at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    /// `N x d`, row `i` belongs to point `i`.
    pub features: Matrix,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Per-point change magnitudes and binary decisions on the newer cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    pub magnitude: Vec<f64>,
    pub changed: Vec<bool>,
    /// Global threshold, when the decisions came from one.
    pub threshold: Option<f64>,
}

impl ChangeMap {
    /// Decisions `magnitude > threshold`; a constant field (no Otsu split)
    /// maps to all unchanged.
    pub fn from_magnitudes(magnitude: Vec<f64>, bins: usize) -> Result<Self> {
        match otsu_threshold(&magnitude, bins) {
            Ok(t) => Ok(ChangeMap {
                changed: magnitude.iter().map(|&m| m > t).collect(),
                magnitude,
                threshold: Some(t),
            }),
            Err(Error::Degenerate(_)) => Ok(ChangeMap {
                changed: vec![false; magnitude.len()],
                magnitude,
                threshold: None,
            }),
            Err(e) => Err(e),
        }
    }

    pub fn len(&self) -> usize {
        self.changed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.changed.is_empty()
    }

    pub fn changed_count(&self) -> usize {
        self.changed.iter().filter(|c| **c).count()
    }

    /// Applies [`clean_isolated`] to the decisions.
    pub fn cleaned(mut self, points: &[Point3], index: &KdIndex, k: usize) -> Self {
        self.changed = clean_isolated(&self.changed, points, index, k);
        self
    }
}

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Text change map: `x y z magnitude decision` per point.
pub fn write_change_map(path: &Path, points: &[Point3], map: &ChangeMap) -> Result<()> {
    if points.len() != map.len() {
        return Err(Error::LengthMismatch {
            what: "change map vs points",
            left: map.len(),
            right: points.len(),
        });
    }
    crate::io_util::write_atomic(path, |w| {
        for (i, p) in points.iter().enumerate() {
            writeln!(
                w,
                "{} {} {} {} {}",
                p.x,
                p.y,
                p.z,
                format_sig6(map.magnitude[i]),
                u8::from(map.changed[i])
            )?;
        }
        Ok(())
    })
}

/// Reads a change map; extra trailing columns are ignored.
pub fn read_change_map(path: &Path) -> Result<(Vec<Point3>, ChangeMap)> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut magnitude = Vec::new();
    let mut changed = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 5 {
            return Err(err(format!("expected at least 5 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        points.push(Point3::new(num(f[0])?, num(f[1])?, num(f[2])?));
        magnitude.push(num(f[3])?);
        changed.push(match f[4] {
            "0" => false,
            "1" => true,
            o => return Err(err(format!("decision must be 0 or 1, got {o:?}"))),
        });
    }
    Ok((points, ChangeMap { magnitude, changed, threshold: None }))
}

/// Centers of a hexagonal lattice with spacing `stride` covering `bbox`
/// horizontally. Every point of the box lies within `stride / sqrt(3)` of a
/// center.
pub fn hex_grid(bbox: &Bbox, stride: f64) -> Vec<[f64; 2]> {
    let row_h = stride * 3f64.sqrt() / 2.0;
    let rows = ((bbox.max.y - bbox.min.y) / row_h).ceil() as usize + 1;
    let cols = ((bbox.max.x - bbox.min.x) / stride).ceil() as usize + 2;
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y = bbox.min.y + r as f64 * row_h;
        let off = if r % 2 == 1 { 0.5 * stride } else { 0.0 };
        for c in 0..cols {
            centers.push([bbox.min.x - 0.5 * stride + off + c as f64 * stride, y]);
        }
    }
    centers
}

/// Index of the horizontally closest center per point; ties resolve to the
/// lower center index.
pub fn assign_to_centers(points: &[Point3], centers: &[[f64; 2]]) -> Result<Vec<usize>> {
    let flat: Vec<Point3> = centers.iter().map(|c| Point3::new(c[0], c[1], 0.0)).collect();
    let index = KdIndex::new(&flat)?;
    Ok(par::map_slice(points, |p| index.nearest(&Point3::new(p.x, p.y, 0.0)).index))
}

/// Full-cloud features on an explicit set of tile centers. Each point takes
/// its feature from the tile of its closest center.
pub fn extract_features_on_grid(
    net: &Network,
    cloud: &PointCloud,
    tap: FeatureTap,
    tile_radius: f64,
    centers: &[[f64; 2]],
) -> Result<FeatureMap> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot extract features of an empty cloud"));
    }
    if tap.0 > net.num_layers() {
        return Err(Error::InvalidParameter(format!("feature tap {} outside 0..={}", tap.0, net.num_layers())));
    }
    let index = KdIndex::build(cloud)?;
    let owner = assign_to_centers(&cloud.points, centers)?;
    let r2 = tile_radius * tile_radius;
    for (i, &c) in owner.iter().enumerate() {
        if cloud.points[i].dist2_xy(centers[c][0], centers[c][1]) > r2 {
            return Err(Error::Uncovered(i));
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, &c) in owner.iter().enumerate() {
        members[c].push(i);
    }
    let used: Vec<usize> = (0..centers.len()).filter(|&c| !members[c].is_empty()).collect();
    let dim = net.config.layer_channels(tap.0);
    let tiles = par::try_map_range(used.len(), |t| {
        let c = used[t];
        let tile = index.within_cylinder(centers[c][0], centers[c][1], tile_radius);
        let pts: Vec<Point3> = tile.iter().map(|&i| cloud.points[i]).collect();
        let out = net.forward(&pts, &[tap])?;
        let feats = &out.features[0];
        let rows: Vec<(usize, Vec<f64>)> = members[c]
            .iter()
            .map(|&i| {
                let row = tile.binary_search(&i).expect("assigned point lies in its tile");
                (i, feats.row(row).to_vec())
            })
            .collect();
        Ok::<_, Error>(rows)
    })?;
    let mut features = Matrix::zeros((cloud.len(), dim));
    for rows in tiles {
        for (i, f) in rows {
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
    }
    Ok(FeatureMap { layer: tap.0, features })
}

/// Full-cloud features with tiles on a hexagonal grid of spacing `stride`
/// over the cloud's own bounding box.
pub fn extract_features(net: &Network, cloud: &PointCloud, tap: FeatureTap, tile_radius: f64, stride: f64) -> Result<FeatureMap> {
    check_tiling(tile_radius, stride)?;
    let bb = cloud.bbox().ok_or(Error::Empty("cannot extract features of an empty cloud"))?;
    extract_features_on_grid(net, cloud, tap, tile_radius, &hex_grid(&bb, stride))
}

fn check_tiling(tile_radius: f64, stride: f64) -> Result<()> {
    if !(tile_radius > 0.0) || !(stride > 0.0) {
        return Err(Error::InvalidParameter("tile radius and stride must be > 0".into()));
    }
    if stride > tile_radius * 3f64.sqrt() {
        return Err(Error::InvalidParameter(format!(
            "stride {stride} leaves gaps between tiles of radius {tile_radius}"
        )));
    }
    Ok(())
}

/// `||f2_i - f1_j||_2` with `j` the nearest older point to newer point `i`.
pub fn delta_magnitude(f1: &FeatureMap, f2: &FeatureMap, pc1: &PointCloud, pc2: &PointCloud, index1: &KdIndex) -> Result<Vec<f64>> {
    if f1.dim() != f2.dim() {
        return Err(Error::LengthMismatch {
            what: "feature dimensions",
            left: f1.dim(),
            right: f2.dim(),
        });
    }
    if f1.features.nrows() != pc1.len() || f2.features.nrows() != pc2.len() {
        return Err(Error::LengthMismatch {
            what: "feature rows vs points",
            left: f2.features.nrows(),
            right: pc2.len(),
        });
    }
    Ok(par::map_range(pc2.len(), |i| {
        let j = index1.nearest(&pc2.points[i]).index;
        f2.features
            .row(i)
            .iter()
            .zip(f1.features.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectParams {
    pub tap: FeatureTap,
    pub tile_radius: f64,
    /// Tile center spacing; defaults to the radius.
    pub stride: f64,
    pub bins: usize,
    /// Neighbors for the cleaning pass; `None` skips it.
    pub clean_k: Option<usize>,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            tap: FeatureTap(8),
            tile_radius: 20.0,
            stride: 20.0,
            bins: DEFAULT_BINS,
            clean_k: Some(DEFAULT_CLEAN_K),
        }
    }
}

/// Features of both epochs on a shared tile grid, nearest-point
/// differencing, Otsu binarization and optional cleaning.
pub fn detect_changes(net: &Network, pc1: &PointCloud, pc2: &PointCloud, params: &DetectParams) -> Result<ChangeMap> {
    check_tiling(params.tile_radius, params.stride)?;
    let bb1 = pc1.bbox().ok_or(Error::Empty("older cloud is empty"))?;
    let bb2 = pc2.bbox().ok_or(Error::Empty("newer cloud is empty"))?;
    let centers = hex_grid(&bb1.union(&bb2), params.stride);
    let f1 = extract_features_on_grid(net, pc1, params.tap, params.tile_radius, &centers)?;
    let f2 = extract_features_on_grid(net, pc2, params.tap, params.tile_radius, &centers)?;
    let index1 = KdIndex::build(pc1)?;
    let magnitude = delta_magnitude(&f1, &f2, pc1, pc2, &index1)?;
    let map = ChangeMap::from_magnitudes(magnitude, params.bins)?;
    Ok(match params.clean_k {
        Some(k) => {
            let index2 = KdIndex::build(pc2)?;
            map.cleaned(&pc2.points, &index2, k)
        }
        None => map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, extent: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..3.0)))
                .collect(),
        )
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(3.14159265), "3.14159");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(1.5e-9), "1.50000e-9");
    }

    #[test]
    fn hex_grid_covers_box() {
        let bb = Bbox { min: Point3::new(-3.0, 2.0, 0.0), max: Point3::new(41.0, 17.0, 0.0) };
        let g = hex_grid(&bb, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let p = Point3::new(rng.random_range(-3.0..41.0), rng.random_range(2.0..17.0), 0.0);
            let best = g.iter().map(|q| p.dist2_xy(q[0], q[1])).fold(f64::INFINITY, f64::min).sqrt();
            assert!(best <= 5.0 / 3f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn equidistant_point_goes_to_lower_center() {
        let centers = [[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(assign_to_centers(&[Point3::new(1.0, 5.0, 3.0)], &centers).unwrap(), vec![0]);
    }

    #[test]
    fn small_cloud_single_tile() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        let c = random_cloud(200, 8.0, 3);
        let f = extract_features(&net, &c, FeatureTap(8), 20.0, 20.0).unwrap();
        assert_eq!(f.features.dim(), (200, 32));
        // one tile holding the whole cloud: identical to a direct forward
        let direct = net.forward(&c.points, &[FeatureTap(8)]).unwrap();
        assert_eq!(f.features, direct.features[0]);
    }

    #[test]
    fn coverage_on_multi_tile_cloud() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        let c = random_cloud(3000, 60.0, 4);
        let bb = c.bbox().unwrap();
        let centers = hex_grid(&bb, 10.0);
        let owner = assign_to_centers(&c.points, &centers).unwrap();
        for (p, &o) in c.points.iter().zip(&owner) {
            assert!(p.dist2_xy(centers[o][0], centers[o][1]) <= 100.0);
        }
        let f = extract_features(&net, &c, FeatureTap(8), 10.0, 10.0).unwrap();
        assert!(f.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn delta_examples() {
        let pc1 = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 0.0, 0.0)]);
        let pc2 = PointCloud::new(vec![Point3::new(0.1, 0.0, 0.0), Point3::new(9.0, 0.0, 0.0)]);
        let f1 = FeatureMap { layer: 1, features: ndarray::array![[1.0, 0.0], [5.0, 5.0]] };
        let f2 = FeatureMap { layer: 1, features: ndarray::array![[0.0, 1.0], [5.0, 5.0]] };
        let idx = KdIndex::build(&pc1).unwrap();
        let m = delta_magnitude(&f1, &f2, &pc1, &pc2, &idx).unwrap();
        assert!((m[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m[1], 0.0);
        let bad = FeatureMap { layer: 1, features: ndarray::array![[1.0], [2.0]] };
        assert!(delta_magnitude(&bad, &f2, &pc1, &pc2, &idx).is_err());
    }

    #[test]
    fn identical_clouds_are_unchanged() {
        let net = Network::new(NetworkConfig::default()).unwrap();
        let c = random_cloud(1500, 30.0, 5);
        let params = DetectParams { tile_radius: 10.0, stride: 10.0, ..Default::default() };
        let m = detect_changes(&net, &c, &c, &params).unwrap();
        assert_eq!(m.len(), c.len());
        assert!(m.magnitude.iter().all(|&v| v == 0.0));
        assert_eq!(m.changed_count(), 0);
        assert_eq!(m.threshold, None);
    }

    #[test]
    fn change_map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let pts = vec![Point3::new(1.0, 2.0, 3.0), Point3::new(-0.5, 0.25, 7.0)];
        let map = ChangeMap { magnitude: vec![0.1234567, 42.0], changed: vec![false, true], threshold: Some(1.0) };
        write_change_map(&path, &pts, &map).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "1 2 3 0.123457 0\n-0.5 0.25 7 42 1\n");
        let (p, m) = read_change_map(&path).unwrap();
        assert_eq!(p, pts);
        assert_eq!(m.changed, map.changed);
    }
}
