use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 256;

/// Histogram of `values` over `[min, max]` with equal-width bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidParameter(format!("need >= 2 bins, got {bins}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("histogram values must be finite".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || !(max > min) {
            return Err(Error::Degenerate("fewer than two distinct values"));
        }
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for v in values {
            counts[bin_of(*v, min, width, bins)] += 1;
        }
        Ok(Histogram { min, width, counts })
    }

    /// Value of the lower edge of bin `j`.
    pub fn edge(&self, j: usize) -> f64 {
        self.min + j as f64 * self.width
    }
}

#[inline]
pub(crate) fn bin_of(v: f64, min: f64, width: f64, bins: usize) -> usize {
    (((v - min) / width).floor() as usize).min(bins - 1)
}

/// Between-class variance of splitting before bin `j`, up to the constant
/// factor `1 / N^2`, with class means in bin-index units. `None` when either
/// class is empty.
pub(crate) fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> Option<f64> {
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let diff = n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128;
    let d = diff as f64;
    Some(d * d / (n0 as f64 * n1 as f64))
}

/// Index `j` of the bin edge maximizing between-class variance, where class
/// 0 holds bins `< j`. Ties resolve to the lowest `j`.
pub fn otsu_bin(counts: &[u64]) -> Option<usize> {
    let n: u64 = counts.iter().sum();
    let s: u64 = counts.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for j in 1..counts.len() {
        n0 += counts[j - 1];
        s0 += (j as u64 - 1) * counts[j - 1];
        if let Some(score) = split_score(n0, s0, n - n0, s - s0) {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Otsu threshold: values strictly above it form the upper class.
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64> {
    let h = Histogram::new(values, bins)?;
    let j = otsu_bin(&h.counts).ok_or(Error::Degenerate("no split with two non-empty classes"))?;
    Ok(h.edge(j))
}
