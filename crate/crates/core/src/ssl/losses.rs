//! The three self-supervised objectives. Each returns its value together
//! with the gradient with respect to every tile's raw output matrix, which
//! seeds the backward pass of that tile's tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{KdIndex, Point3};
use crate::net::Matrix;

/// Per-row argmax; ties go to the lowest column.
pub fn pseudo_labels(y: &Matrix) -> Result<Vec<usize>> {
    if y.ncols() < 2 {
        return Err(Error::InvalidParameter(format!("need K >= 2 output columns, got {}", y.ncols())));
    }
    Ok(y.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Inverse-square-root frequency weights over the pooled pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    pub alpha: f64,
}

/// `W_k = 1 / sqrt(alpha * C_k)` with `alpha = K * sum(C)`. Empty clusters
/// take the largest weight among non-empty ones.
pub fn cluster_weights(labels_1: &[usize], labels_2: &[usize], k: usize) -> Result<ClusterWeights> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("K must be >= 2, got {k}")));
    }
    let mut counts = vec![0usize; k];
    for &c in labels_1.iter().chain(labels_2) {
        if c >= k {
            return Err(Error::InvalidParameter(format!("label {c} outside 0..{k}")));
        }
        counts[c] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no pseudo-labels to weight"));
    }
    let alpha = (k * total) as f64;
    let mut weights: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / (alpha * c as f64).sqrt() } else { f64::NAN })
        .collect();
    let fallback = weights.iter().copied().filter(|w| !w.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    for w in &mut weights {
        if w.is_nan() {
            *w = fallback;
        }
    }
    Ok(ClusterWeights { weights, counts, alpha })
}

/// A loss value with per-tile output gradients for both epochs.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_1: Vec<Matrix>,
    pub grad_2: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct DeepClusteringLoss {
    /// `(l1 + l2) / 2`
    pub l_dc: f64,
    pub l1: f64,
    pub l2: f64,
    /// Gradients of `l_dc`.
    pub grad_1: Vec<Matrix>,
    pub grad_2: Vec<Matrix>,
}

/// Weighted cross-entropy of softmax outputs against their own argmax,
/// normalized by the summed weights. Returns the loss and `dL/dy` per tile.
fn weighted_self_ce(ys: &[&Matrix], weights: &[f64]) -> Result<(f64, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut wsum = 0.0;
    let mut grads = Vec::with_capacity(ys.len());
    for y in ys {
        let labels = pseudo_labels(y)?;
        let mut g = Matrix::zeros(y.dim());
        for (i, row) in y.rows().into_iter().enumerate() {
            let c = labels[i];
            let w = weights[c];
            let m = row[c];
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            total += w * z.ln();
            wsum += w;
            for (k, v) in row.iter().enumerate() {
                g[[i, k]] = w * (v - m).exp() / z;
            }
            g[[i, c]] -= w;
        }
        grads.push(g);
    }
    if wsum == 0.0 {
        return Ok((0.0, grads));
    }
    for g in &mut grads {
        *g /= wsum;
    }
    Ok((total / wsum, grads))
}

pub fn deep_clustering_loss(y1: &[&Matrix], y2: &[&Matrix], weights: &ClusterWeights) -> Result<DeepClusteringLoss> {
    let (l1, mut g1) = weighted_self_ce(y1, &weights.weights)?;
    let (l2, mut g2) = weighted_self_ce(y2, &weights.weights)?;
    for g in g1.iter_mut().chain(g2.iter_mut()) {
        *g *= 0.5;
    }
    Ok(DeepClusteringLoss {
        l_dc: 0.5 * (l1 + l2),
        l1,
        l2,
        grad_1: g1,
        grad_2: g2,
    })
}

/// For each point of the second tile, the index of the nearest point of the
/// first tile, comparing coordinates relative to each tile's center. `None`
/// when the first tile is empty.
pub fn nearest_pairing(tile1: &[Point3], center1: [f64; 2], tile2: &[Point3], center2: [f64; 2]) -> Option<Vec<usize>> {
    let shift1 = Point3::new(center1[0], center1[1], 0.0);
    let shift2 = Point3::new(center2[0], center2[1], 0.0);
    let local1: Vec<Point3> = tile1.iter().map(|p| *p - shift1).collect();
    let index = KdIndex::new(&local1).ok()?;
    Some(tile2.iter().map(|p| index.nearest(&(*p - shift2)).index).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over all second-epoch points of `||y1[pair] - y2||_1`. Tiles whose
/// pairing is `None` are skipped.
pub fn temporal_consistency_loss(y1: &[&Matrix], y2: &[&Matrix], pairs: &[Option<Vec<usize>>]) -> PairLoss {
    let identity: Vec<usize> = (0..y2.len()).collect();
    paired_loss(y1, y2, &identity, pairs, false)
}

/// Mean over all shuffled second-epoch points of `exp(-||y1[pair] - y2'||_1)`,
/// where tile `b` of the shuffled batch is `y2[shuffle[b]]` and
/// `pairs[b]` pairs it with `y1[b]`.
pub fn contrastive_loss(y1: &[&Matrix], y2: &[&Matrix], shuffle: &[usize], pairs: &[Option<Vec<usize>>]) -> PairLoss {
    paired_loss(y1, y2, shuffle, pairs, true)
}

fn paired_loss(y1: &[&Matrix], y2: &[&Matrix], order: &[usize], pairs: &[Option<Vec<usize>>], contrastive: bool) -> PairLoss {
    assert_eq!(y1.len(), order.len());
    assert_eq!(pairs.len(), order.len());
    let mut grad_1: Vec<Matrix> = y1.iter().map(|y| Matrix::zeros(y.dim())).collect();
    let mut grad_2: Vec<Matrix> = y2.iter().map(|y| Matrix::zeros(y.dim())).collect();
    let count: usize = order
        .iter()
        .zip(pairs)
        .filter(|(_, p)| p.is_some())
        .map(|(&o, _)| y2[o].nrows())
        .sum();
    if count == 0 {
        return PairLoss { value: 0.0, grad_1, grad_2 };
    }
    let inv_n = 1.0 / count as f64;
    let mut total = 0.0;
    for (b, (&o, pair)) in order.iter().zip(pairs).enumerate() {
        let Some(pair) = pair else { continue };
        let (a, c) = (y1[b], y2[o]);
        assert_eq!(pair.len(), c.nrows(), "pairing length");
        for (i, &j) in pair.iter().enumerate() {
            let l1: f64 = a.row(j).iter().zip(c.row(i)).map(|(u, v)| (u - v).abs()).sum();
            // d value / d (y1 - y2) per unit sign
            let scale = if contrastive {
                let e = (-l1).exp();
                total += e;
                -e * inv_n
            } else {
                total += l1;
                inv_n
            };
            for k in 0..a.ncols() {
                let s = sign(a[[j, k]] - c[[i, k]]) * scale;
                grad_1[b][[j, k]] += s;
                grad_2[o][[i, k]] -= s;
            }
        }
    }
    PairLoss {
        value: total * inv_n,
        grad_1,
        grad_2,
    }
}

/// A uniformly random cyclic permutation (Sattolo), hence no fixed point.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidParameter("shuffling needs at least 2 tiles per batch".into()));
    }
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}
