use crate::geom::{KdIndex, Point3};
use crate::par;

pub const DEFAULT_CLEAN_K: usize = 15;

/// One synchronous majority-vote pass: each point takes the majority
/// decision of its `k` nearest neighbors (itself included, `k` clamped to
/// the cloud size). Ties resolve to unchanged.
pub fn clean_isolated(decisions: &[bool], points: &[Point3], index: &KdIndex, k: usize) -> Vec<bool> {
    assert_eq!(decisions.len(), points.len());
    assert!(k >= 1, "k must be >= 1");
    par::map_slice(points, |p| {
        let nbrs = index.knn(p, k);
        let changed = nbrs.iter().filter(|n| decisions[n.index]).count();
        2 * changed > nbrs.len()
    })
}
