use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{
    cluster_weights, contrastive_loss, deep_clustering_loss, derangement, nearest_pairing, pseudo_labels,
    temporal_consistency_loss,
};
use crate::error::{Error, Result};
use crate::geom::tiling::sample_in_box;
use crate::geom::{KdIndex, Point3, PointCloud};
use crate::net::{learning_rate, Matrix, Moments, Network, NormMode, Sgd, Tape, TileGeometry, NORM_MOMENTUM};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub cylinders_per_epoch: usize,
    pub batch_size: usize,
    /// Cylinder radius (meters).
    pub tile_radius: f64,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Redraws allowed per center before giving up on an empty cylinder.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            cylinders_per_epoch: 100,
            batch_size: 10,
            tile_radius: 20.0,
            learning_rate: 0.01,
            lr_decay: 0.95,
            momentum: 0.98,
            max_resample: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.epochs == 0 || self.cylinders_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, cylinders per epoch and batch size must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2 for the shuffled contrastive batch".into());
        }
        if self.cylinders_per_epoch % self.batch_size != 0 {
            return bad(format!(
                "cylinders per epoch ({}) must be divisible by batch size ({})",
                self.cylinders_per_epoch, self.batch_size
            ));
        }
        if !(self.tile_radius > 0.0) || !(self.learning_rate > 0.0) {
            return bad("tile radius and learning rate must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.lr_decay > 0.0) {
            return bad("momentum must lie in [0, 1) and lr decay be > 0".into());
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.cylinders_per_epoch / self.batch_size
    }
}

/// Which objective drives the update at a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppliedLoss {
    DeepClustering,
    Temporal,
    Contrastive,
}

impl AppliedLoss {
    /// `i mod 3`: 0 deep clustering, 1 temporal consistency, 2 contrastive.
    pub fn for_iteration(i: usize) -> Self {
        match i % 3 {
            0 => AppliedLoss::DeepClustering,
            1 => AppliedLoss::Temporal,
            _ => AppliedLoss::Contrastive,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AppliedLoss::DeepClustering => "dc",
            AppliedLoss::Temporal => "temporal",
            AppliedLoss::Contrastive => "contrastive",
        }
    }
}

/// All loss values at one iteration; only `applied` drove the update.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub iteration: usize,
    pub applied: AppliedLoss,
    pub l_dc: f64,
    pub l1: f64,
    pub l2: f64,
    pub l12: f64,
    pub l12_contrastive: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,iter,applied_loss,L_DC,L1,L2,L12,L12p";

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.applied.name(),
            self.l_dc,
            self.l1,
            self.l2,
            self.l12,
            self.l12_contrastive
        )
    }
}

pub fn write_loss_log(path: &Path, log: &[LossReport]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{LOSS_LOG_HEADER}").unwrap();
    for r in log {
        writeln!(text, "{}", r.csv_line()).unwrap();
    }
    crate::io_util::write_atomic(path, |w| w.write_all(text.as_bytes()))
}

struct TilePair {
    center: [f64; 2],
    older: Vec<Point3>,
    newer: Vec<Point3>,
}

fn sample_pairs(
    pc1: &PointCloud,
    idx1: &KdIndex,
    pc2: &PointCloud,
    idx2: &KdIndex,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TilePair>> {
    let bb = pc1.bbox().ok_or(Error::Empty("older cloud is empty"))?;
    let mut out = Vec::with_capacity(cfg.cylinders_per_epoch);
    for _ in 0..cfg.cylinders_per_epoch {
        let mut attempts = 0;
        loop {
            let center = sample_in_box(rng, bb.min.x, bb.max.x, bb.min.y, bb.max.y, 1)[0];
            let i1 = idx1.within_cylinder(center[0], center[1], cfg.tile_radius);
            let i2 = idx2.within_cylinder(center[0], center[1], cfg.tile_radius);
            if !i1.is_empty() && !i2.is_empty() {
                out.push(TilePair {
                    center,
                    older: i1.iter().map(|&i| pc1.points[i]).collect(),
                    newer: i2.iter().map(|&i| pc2.points[i]).collect(),
                });
                break;
            }
            attempts += 1;
            if attempts > cfg.max_resample {
                return Err(Error::SamplingExhausted(attempts));
            }
        }
    }
    Ok(out)
}

struct Forwarded {
    tape: Tape,
    y: crate::net::Var,
    moments: Vec<Moments>,
}

fn forward_tile(net: &Network, points: &[Point3]) -> Result<Forwarded> {
    let geom = TileGeometry::new(points, &net.config)?;
    let mut tape = Tape::new();
    let out = net.forward_on_tape(&geom, &[], NormMode::Tile, &mut tape)?;
    let moments = out.pre_norm.iter().map(|v| Moments::of(tape.value(*v))).collect();
    Ok(Forwarded { tape, y: out.y, moments })
}

/// Per-block moments pooled over every tile of the batch, in tile order.
fn pooled_moments(fwd: &[Forwarded]) -> Vec<Moments> {
    let mut pooled = fwd[0].moments.clone();
    for f in &fwd[1..] {
        for (p, m) in pooled.iter_mut().zip(&f.moments) {
            *p = p.merge(m);
        }
    }
    pooled
}

/// Trains `net` in place and returns one report per iteration.
///
/// Each epoch draws `cylinders_per_epoch` centers on the older cloud and
/// extracts the co-located cylinder from both clouds; the centers are then
/// consumed `batch_size` at a time. Within an epoch, iteration `i` applies
/// the objective selected by [`AppliedLoss::for_iteration`]. Forward passes
/// normalize with per-tile statistics; their pooled moments update the
/// running statistics used at inference.
pub fn train(net: &mut Network, pc1: &PointCloud, pc2: &PointCloud, cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    pc1.validate()?;
    pc2.validate()?;
    if pc1.is_empty() || pc2.is_empty() {
        return Err(Error::Empty("training needs two non-empty clouds"));
    }
    let idx1 = KdIndex::build(pc1)?;
    let idx2 = KdIndex::build(pc2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opt = Sgd { momentum: cfg.momentum };
    let k = net.config.k;
    let b = cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.epochs * cfg.iterations_per_epoch());

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.learning_rate, cfg.lr_decay, epoch);
        let pairs = sample_pairs(pc1, &idx1, pc2, &idx2, cfg, &mut rng)?;
        for (iteration, batch) in pairs.chunks(b).enumerate() {
            let shuffle = derangement(b, &mut rng)?;
            let net_ref: &Network = net;
            let fwd = par::try_map_range(2 * b, |t| {
                let tile = &batch[t % b];
                forward_tile(net_ref, if t < b { &tile.older } else { &tile.newer })
            })?;
            let (f1, f2) = fwd.split_at(b);
            let y1: Vec<&Matrix> = f1.iter().map(|f| f.tape.value(f.y)).collect();
            let y2: Vec<&Matrix> = f2.iter().map(|f| f.tape.value(f.y)).collect();

            let mut labels_1 = Vec::new();
            let mut labels_2 = Vec::new();
            for y in &y1 {
                labels_1.extend(pseudo_labels(y)?);
            }
            for y in &y2 {
                labels_2.extend(pseudo_labels(y)?);
            }
            let weights = cluster_weights(&labels_1, &labels_2, k)?;
            let dc = deep_clustering_loss(&y1, &y2, &weights)?;

            let temporal_pairs: Vec<Option<Vec<usize>>> = par::map_slice(batch, |t| {
                nearest_pairing(&t.older, t.center, &t.newer, t.center)
            });
            let temporal = temporal_consistency_loss(&y1, &y2, &temporal_pairs);
            let shuffled_pairs: Vec<Option<Vec<usize>>> = par::map_range(b, |i| {
                let s = &batch[shuffle[i]];
                nearest_pairing(&batch[i].older, batch[i].center, &s.newer, s.center)
            });
            let contrastive = contrastive_loss(&y1, &y2, &shuffle, &shuffled_pairs);

            let applied = AppliedLoss::for_iteration(iteration);
            let (g1, g2) = match applied {
                AppliedLoss::DeepClustering => (dc.grad_1.clone(), dc.grad_2.clone()),
                AppliedLoss::Temporal => (temporal.grad_1.clone(), temporal.grad_2.clone()),
                AppliedLoss::Contrastive => (contrastive.grad_1.clone(), contrastive.grad_2.clone()),
            };
            let seeds: Vec<Matrix> = g1.into_iter().chain(g2).collect();
            let grads = par::map_range(2 * b, |t| fwd[t].tape.backward(&[(fwd[t].y, seeds[t].clone())]));

            net.zero_grad();
            for g in &grads {
                net.accumulate_grads(g);
            }
            opt.step(&mut net.params, lr);
            net.update_running_stats(&pooled_moments(&fwd), NORM_MOMENTUM)?;

            log.push(LossReport {
                epoch,
                iteration,
                applied,
                l_dc: dc.l_dc,
                l1: dc.l1,
                l2: dc.l2,
                l12: temporal.value,
                l12_contrastive: contrastive.value,
            });
        }
    }
    Ok(log)
}
