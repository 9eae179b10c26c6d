//! Encoder-decoder of kernel-point convolutions with nearest-neighbor
//! upsampling and skip connections.
//!
//! Layer numbering: 0 is the input feature layer, `1..=n` the encoder
//! blocks, `n + 1` the bottleneck and `n + 2..=2n + 1` the decoder blocks,
//! where `n` is the number of encoder blocks. The prediction head that maps
//! the last decoder block to `K` channels is not a numbered layer.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{Neighborhood, KERNEL_POINTS};
use super::tape::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::geom::subsample::subsample_points;
use crate::geom::{KdIndex, Point3};

const LEAKY_SLOPE: f64 = 0.1;

/// Number of input channels: a constant 1 and the height above the tile's
/// lowest point.
pub const INPUT_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Total numbered layers `L`; must equal `2 * encoder_channels.len() + 1`.
    pub num_blocks: usize,
    pub encoder_channels: Vec<usize>,
    /// Output dimension, the number of clusters.
    pub k: usize,
    /// Convolution radius at the first level, doubled per stride (meters).
    pub conv_radius: f64,
    pub kernel_point_count: usize,
    /// Subsampling cell at the first level, doubled per stride (meters).
    pub first_cell: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_blocks: 9,
            encoder_channels: vec![16, 32, 64, 64],
            k: 6,
            conv_radius: 1.0,
            kernel_point_count: KERNEL_POINTS,
            first_cell: 0.5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k < 2 {
            return bad(format!("K must be >= 2, got {}", self.k));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder channels must be non-empty and positive".into());
        }
        if self.num_blocks != 2 * self.encoder_channels.len() + 1 {
            return bad(format!(
                "num_blocks {} does not match {} encoder blocks (expected {})",
                self.num_blocks,
                self.encoder_channels.len(),
                2 * self.encoder_channels.len() + 1
            ));
        }
        if !(self.conv_radius > 0.0 && self.conv_radius.is_finite()) {
            return bad(format!("conv radius must be > 0, got {}", self.conv_radius));
        }
        if !(self.first_cell > 0.0 && self.first_cell.is_finite()) {
            return bad(format!("subsampling cell must be > 0, got {}", self.first_cell));
        }
        if self.kernel_point_count != KERNEL_POINTS {
            return bad(format!("kernel_point_count must be {KERNEL_POINTS}"));
        }
        Ok(())
    }

    pub fn encoder_blocks(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn cell(&self, level: usize) -> f64 {
        self.first_cell * f64::powi(2.0, level as i32)
    }

    pub fn radius(&self, level: usize) -> f64 {
        self.conv_radius * f64::powi(2.0, level as i32)
    }

    /// Resolution level a numbered layer lives at.
    pub fn layer_level(&self, layer: usize) -> usize {
        let n = self.encoder_blocks();
        match layer {
            0 => 0,
            l if l <= n + 1 => l - 1,
            l => 2 * n + 1 - l,
        }
    }

    /// Feature width of a numbered layer.
    pub fn layer_channels(&self, layer: usize) -> usize {
        let n = self.encoder_blocks();
        match layer {
            0 => INPUT_FEATURES,
            l if l <= n => self.encoder_channels[l - 1],
            l if l == n + 1 => self.encoder_channels[n - 1],
            l => self.encoder_channels[2 * n + 1 - l],
        }
    }

    /// Weight shapes in declaration order: conv blocks, decoder blocks, head;
    /// each followed by its bias row.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.encoder_blocks();
        let mut shapes = Vec::new();
        for layer in 1..=n + 1 {
            let cin = self.layer_channels(layer - 1);
            let cout = self.layer_channels(layer);
            shapes.push((KERNEL_POINTS * cin, cout));
            shapes.push((1, cout));
        }
        for layer in n + 2..=2 * n + 1 {
            let up = self.layer_channels(layer - 1);
            let skip = self.layer_channels(2 * n + 2 - layer);
            let cout = self.layer_channels(layer);
            shapes.push((up + skip, cout));
            shapes.push((1, cout));
        }
        shapes.push((self.layer_channels(2 * n + 1), self.k));
        shapes.push((1, self.k));
        shapes
    }
}

/// A layer index whose per-point activations should be returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureTap(pub usize);

/// Weights with their gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Matrix,
    pub grad: Matrix,
    pub momentum: Matrix,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let dim = value.dim();
        Parameter {
            value,
            grad: Matrix::zeros(dim),
            momentum: Matrix::zeros(dim),
        }
    }
}

/// Per-point network output for one tile at its original resolution.
#[derive(Clone, Debug)]
pub struct TileOutput {
    /// `N x K` raw outputs.
    pub y: Matrix,
    /// One `N x d_l` matrix per requested tap, in request order.
    pub features: Vec<Matrix>,
}

/// Weight-independent structure of one tile: subsampled levels, convolution
/// neighborhoods and the nearest-neighbor maps between levels.
#[derive(Debug)]
pub struct TileGeometry {
    levels: Vec<Vec<Point3>>,
    indices: Vec<KdIndex>,
    convs: Vec<Arc<Neighborhood>>,
    /// `ups[l]`: for each point at level `l`, its nearest point at level `l + 1`.
    ups: Vec<Arc<[usize]>>,
    original: Vec<Point3>,
    z_min: f64,
}

impl TileGeometry {
    pub fn new(points: &[Point3], cfg: &NetworkConfig) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("tile has no points; resample it"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let n = cfg.encoder_blocks();
        let mut levels = Vec::with_capacity(n + 1);
        levels.push(subsample_points(points, cfg.cell(0)));
        for l in 1..=n {
            let next = subsample_points(&levels[l - 1], cfg.cell(l));
            levels.push(next);
        }
        let indices: Vec<KdIndex> = levels.iter().map(|l| KdIndex::new(l).unwrap()).collect();
        let mut convs = Vec::with_capacity(n + 1);
        for l in 0..=n {
            let src = l.saturating_sub(1);
            convs.push(Arc::new(Neighborhood::build(&levels[l], &levels[src], &indices[src], cfg.radius(l))));
        }
        let ups = (0..n)
            .map(|l| nearest_map(&levels[l], &indices[l + 1]))
            .collect();
        let z_min = points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        Ok(TileGeometry {
            levels,
            indices,
            convs,
            ups,
            original: points.to_vec(),
            z_min,
        })
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    /// Map from each original point to its nearest point at `level`.
    pub fn original_to_level(&self, level: usize) -> Arc<[usize]> {
        nearest_map(&self.original, &self.indices[level])
    }

    fn input_features(&self) -> Matrix {
        let l0 = &self.levels[0];
        let mut m = Matrix::zeros((l0.len(), INPUT_FEATURES));
        for (i, p) in l0.iter().enumerate() {
            m[[i, 0]] = 1.0;
            m[[i, 1]] = p.z - self.z_min;
        }
        m
    }
}

fn nearest_map(from: &[Point3], to: &KdIndex) -> Arc<[usize]> {
    from.iter().map(|p| to.nearest(p).index).collect::<Vec<_>>().into()
}

/// Per-channel statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    /// Zero mean, unit variance: normalization is a no-op.
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Row count, mean and sum of squared deviations per column; merges
/// exactly (Chan et al.) so pooled statistics do not depend on how rows were
/// split into tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub n: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Moments {
    pub fn of(x: &Matrix) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n.max(1.0)).collect();
        let m2 = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum())
            .collect();
        Moments { n, mean, m2 }
    }

    pub fn merge(&self, o: &Moments) -> Moments {
        let n = self.n + o.n;
        if n == 0.0 {
            return self.clone();
        }
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut m2 = Vec::with_capacity(self.mean.len());
        for c in 0..self.mean.len() {
            let d = o.mean[c] - self.mean[c];
            mean.push(self.mean[c] + d * o.n / n);
            m2.push(self.m2[c] + o.m2[c] + d * d * self.n * o.n / n);
        }
        Moments { n, mean, m2 }
    }

    pub fn var(&self) -> Vec<f64> {
        self.m2.iter().map(|v| v / self.n.max(1.0)).collect()
    }
}

/// Normalization source for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the tile itself; used while training.
    Tile,
    /// The network's running statistics; used for inference, so a point's
    /// features do not depend on what else is in its tile.
    Running,
}

/// Weight of the newest batch in the running statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

/// The point-convolution network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Parameter>,
    /// One entry per numbered block, in block order.
    pub norm: Vec<NormStats>,
}

/// Tape handles produced by [`Network::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeOutput {
    pub y: Var,
    pub features: Vec<Var>,
    /// Pre-normalization activations of each block.
    pub pre_norm: Vec<Var>,
}

impl Network {
    /// Glorot-uniform weights, zero biases, drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    return Parameter::new(Matrix::zeros((1, c)));
                }
                let bound = (6.0 / (r + c) as f64).sqrt();
                Parameter::new(Matrix::from_shape_fn((r, c), |_| rng.random_range(-bound..bound)))
            })
            .collect();
        let norm = Self::identity_norm(&config);
        Ok(Network { config, params, norm })
    }

    fn identity_norm(config: &NetworkConfig) -> Vec<NormStats> {
        (1..=config.num_blocks).map(|l| NormStats::identity(config.layer_channels(l))).collect()
    }

    pub fn from_params(config: NetworkConfig, values: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                values.len()
            )));
        }
        for (i, (s, v)) in shapes.iter().zip(&values).enumerate() {
            if *s != v.dim() {
                return Err(Error::InvalidParameter(format!("parameter {i}: shape {:?}, expected {s:?}", v.dim())));
            }
        }
        Ok(Network {
            norm: Self::identity_norm(&config),
            config,
            params: values.into_iter().map(Parameter::new).collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_blocks
    }

    /// Adds one backward pass's parameter gradients.
    pub fn accumulate_grads(&mut self, grads: &Gradients) {
        for (pid, g) in grads.param_grads() {
            self.params[pid].grad += g;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Blends pooled batch moments (one per block) into the running
    /// statistics.
    pub fn update_running_stats(&mut self, batch: &[Moments], momentum: f64) -> Result<()> {
        if batch.len() != self.norm.len() {
            return Err(Error::LengthMismatch {
                what: "normalization layers",
                left: batch.len(),
                right: self.norm.len(),
            });
        }
        for (s, m) in self.norm.iter_mut().zip(batch) {
            let var = m.var();
            for c in 0..s.mean.len() {
                s.mean[c] = (1.0 - momentum) * s.mean[c] + momentum * m.mean[c];
                s.var[c] = (1.0 - momentum) * s.var[c] + momentum * var[c];
            }
        }
        Ok(())
    }

    fn check_taps(&self, taps: &[FeatureTap]) -> Result<()> {
        match taps.iter().find(|t| t.0 > self.num_layers()) {
            Some(t) => Err(Error::InvalidParameter(format!(
                "feature tap {} outside 0..={}",
                t.0,
                self.num_layers()
            ))),
            None => Ok(()),
        }
    }

    /// Records a forward pass on `tape`. Outputs and taps have one row per
    /// original tile point.
    pub fn forward_on_tape(&self, geom: &TileGeometry, taps: &[FeatureTap], mode: NormMode, tape: &mut Tape) -> Result<TapeOutput> {
        self.check_taps(taps)?;
        let n = self.config.encoder_blocks();
        let mut layers: Vec<Var> = Vec::with_capacity(2 * n + 2);
        let mut pre_norm = Vec::with_capacity(2 * n + 1);
        layers.push(tape.input(geom.input_features()));
        let mut pid = 0;
        let norm = |block: usize| match mode {
            NormMode::Tile => None,
            NormMode::Running => Some(&self.norm[block]),
        };
        for l in 0..=n {
            let w = tape.param(pid, &self.params[pid].value);
            let b = tape.param(pid + 1, &self.params[pid + 1].value);
            pid += 2;
            let x = *layers.last().unwrap();
            let agg = tape.aggregate(x, geom.convs[l].clone());
            let (out, pre) = unary_block(tape, agg, w, b, norm(pre_norm.len()));
            pre_norm.push(pre);
            layers.push(out);
        }
        for j in 0..n {
            let level = n - 1 - j;
            let w = tape.param(pid, &self.params[pid].value);
            let b = tape.param(pid + 1, &self.params[pid + 1].value);
            pid += 2;
            let coarse = *layers.last().unwrap();
            let up = tape.gather(coarse, geom.ups[level].clone());
            let skip = layers[level + 1];
            let cat = tape.concat(up, skip);
            let (out, pre) = unary_block(tape, cat, w, b, norm(pre_norm.len()));
            pre_norm.push(pre);
            layers.push(out);
        }
        let w = tape.param(pid, &self.params[pid].value);
        let b = tape.param(pid + 1, &self.params[pid + 1].value);
        let last = *layers.last().unwrap();
        let head = tape.matmul(last, w);
        let head = tape.add_bias(head, b);
        let y = tape.gather(head, geom.original_to_level(0));
        let features = taps
            .iter()
            .map(|t| tape.gather(layers[t.0], geom.original_to_level(self.config.layer_level(t.0))))
            .collect();
        Ok(TapeOutput { y, features, pre_norm })
    }

    /// Inference on a tile's points with the running statistics.
    pub fn forward(&self, points: &[Point3], taps: &[FeatureTap]) -> Result<TileOutput> {
        self.forward_with(points, taps, NormMode::Running)
    }

    pub fn forward_with(&self, points: &[Point3], taps: &[FeatureTap], mode: NormMode) -> Result<TileOutput> {
        self.check_taps(taps)?;
        let geom = TileGeometry::new(points, &self.config)?;
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&geom, taps, mode, &mut tape)?;
        Ok(TileOutput {
            y: tape.value(out.y).clone(),
            features: out.features.iter().map(|v| tape.value(*v).clone()).collect(),
        })
    }
}

/// Linear map, normalization, bias, leaky ReLU. Returns the block output
/// and the pre-normalization node. A convolution block is this applied to
/// the kernel aggregation of its input.
fn unary_block(tape: &mut Tape, x: Var, w: Var, b: Var, stats: Option<&NormStats>) -> (Var, Var) {
    let lin = tape.matmul(x, w);
    let norm = match stats {
        None => tape.standardize(lin),
        Some(s) => tape.normalize_fixed(lin, &s.mean, &s.var),
    };
    let biased = tape.add_bias(norm, b);
    (tape.leaky_relu(biased, LEAKY_SLOPE), lin)
}
