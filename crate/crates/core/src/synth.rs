//! Deterministic bi-temporal scene generator with exact change labels.
//!
//! Scenes are a flat noisy ground plane with flat-roofed box buildings,
//! box-shaped clutter and Gaussian vegetation blobs. Surfaces are sampled by
//! jittered stratification (one point per cell of side `1/sqrt(density)`),
//! which keeps counts at `density * area` and bounds the gap between the two
//! epochs' samplings of an unchanged surface. Noise is vertical only.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

/// Closed axis-aligned rectangle in the horizontal plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x0 <= o.x1 && o.x0 <= self.x1 && self.y0 <= o.y1 && o.y0 <= self.y1
    }

    fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0
    }
}

/// Something standing on the ground.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SceneObject {
    Building { footprint: Rect, height: f64 },
    /// Vehicle-scale box.
    Clutter { footprint: Rect, height: f64 },
    Vegetation { center: [f64; 2], radius: f64, height: f64 },
}

/// Lowest z of a vegetation point; vegetation change regions start here.
pub const VEGETATION_BASE: f64 = 0.5;
/// Vegetation region floor used by the label oracle, below the base and far
/// above ground noise.
pub const VEGETATION_REGION_FLOOR: f64 = 0.25;

impl SceneObject {
    fn bounds(&self) -> Rect {
        match *self {
            SceneObject::Building { footprint, .. } | SceneObject::Clutter { footprint, .. } => footprint,
            SceneObject::Vegetation { center, radius, .. } => {
                Rect::new(center[0] - radius, center[1] - radius, center[0] + radius, center[1] + radius)
            }
        }
    }

    fn height(&self) -> f64 {
        match *self {
            SceneObject::Building { height, .. }
            | SceneObject::Clutter { height, .. }
            | SceneObject::Vegetation { height, .. } => height,
        }
    }

    /// Box footprint that hides the ground below it.
    fn occluding_footprint(&self) -> Option<Rect> {
        match *self {
            SceneObject::Building { footprint, .. } | SceneObject::Clutter { footprint, .. } => Some(footprint),
            SceneObject::Vegetation { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChangeOp {
    /// Present only at the second epoch.
    Appear(SceneObject),
    /// A building present only at the first epoch; its exposed ground
    /// footprint is labeled changed.
    Demolish { footprint: Rect, height: f64 },
}

impl ChangeOp {
    pub fn new_building(footprint: Rect, height: f64) -> Self {
        ChangeOp::Appear(SceneObject::Building { footprint, height })
    }

    pub fn new_vegetation(center: [f64; 2], radius: f64, height: f64) -> Self {
        ChangeOp::Appear(SceneObject::Vegetation { center, radius, height })
    }

    pub fn new_clutter(footprint: Rect, height: f64) -> Self {
        ChangeOp::Appear(SceneObject::Clutter { footprint, height })
    }

    pub fn demolish_building(footprint: Rect, height: f64) -> Self {
        ChangeOp::Demolish { footprint, height }
    }

    fn bounds(&self) -> Rect {
        match self {
            ChangeOp::Appear(o) => o.bounds(),
            ChangeOp::Demolish { footprint, .. } => *footprint,
        }
    }

    /// Geometric oracle: whether a second-epoch point at `p` lies in the
    /// region this change labels.
    pub fn region_contains(&self, p: &Point3) -> bool {
        match *self {
            ChangeOp::Appear(SceneObject::Building { footprint, .. })
            | ChangeOp::Appear(SceneObject::Clutter { footprint, .. })
            | ChangeOp::Demolish { footprint, .. } => footprint.contains(p.x, p.y),
            ChangeOp::Appear(SceneObject::Vegetation { center, radius, .. }) => {
                p.dist2_xy(center[0], center[1]) <= radius * radius && p.z > VEGETATION_REGION_FLOOR
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Side of the square scene (meters), anchored at the origin.
    pub extent: f64,
    /// Points per square meter at each epoch.
    pub density_t1: f64,
    pub density_t2: f64,
    /// Standard deviation of vertical noise (meters).
    pub noise_sigma: f64,
    /// Wall sampling density relative to horizontal surfaces (airborne scans see
    /// walls at grazing incidence, so this is well below 1).
    pub wall_density_factor: f64,
    /// Objects present at both epochs.
    pub static_objects: Vec<SceneObject>,
    pub change_ops: Vec<ChangeOp>,
    pub seed: u64,
}

impl Default for SceneConfig {
    /// A 60 m scene with two unchanged buildings, two new buildings, a
    /// demolition, a new tree and a new vehicle.
    fn default() -> Self {
        SceneConfig {
            extent: 60.0,
            density_t1: 12.0,
            density_t2: 22.0,
            noise_sigma: 0.05,
            wall_density_factor: 0.25,
            static_objects: vec![
                SceneObject::Building { footprint: Rect::new(4.0, 40.0, 18.0, 50.0), height: 8.0 },
                SceneObject::Building { footprint: Rect::new(42.0, 6.0, 52.0, 16.0), height: 5.0 },
            ],
            change_ops: vec![
                ChangeOp::new_building(Rect::new(10.0, 10.0, 20.0, 20.0), 6.0),
                ChangeOp::new_building(Rect::new(40.0, 38.0, 48.0, 50.0), 9.0),
                ChangeOp::demolish_building(Rect::new(24.0, 24.0, 36.0, 36.0), 7.0),
                ChangeOp::new_vegetation([52.0, 28.0], 3.5, 8.0),
                ChangeOp::new_clutter(Rect::new(28.0, 50.0, 32.5, 52.0), 1.6),
            ],
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// A bare ground plane of side `extent`.
    pub fn empty(extent: f64) -> Self {
        SceneConfig {
            extent,
            static_objects: Vec::new(),
            change_ops: Vec::new(),
            ..Default::default()
        }
    }

    /// A 50 m scene whose only content is one new 10 x 10 x 6 m building.
    pub fn single_new_building() -> Self {
        SceneConfig {
            change_ops: vec![ChangeOp::new_building(Rect::new(20.0, 20.0, 30.0, 30.0), 6.0)],
            ..Self::empty(50.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scene(m));
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad(format!("extent must be > 0, got {}", self.extent));
        }
        if !(self.density_t1 > 0.0 && self.density_t2 > 0.0) {
            return bad("densities must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(self.wall_density_factor > 0.0) {
            return bad("wall density factor must be > 0".into());
        }
        let all: Vec<(Rect, f64, String)> = self
            .static_objects
            .iter()
            .map(|o| (o.bounds(), o.height(), format!("{o:?}")))
            .chain(self.change_ops.iter().map(|c| {
                let h = match c {
                    ChangeOp::Appear(o) => o.height(),
                    ChangeOp::Demolish { height, .. } => *height,
                };
                (c.bounds(), h, format!("{c:?}"))
            }))
            .collect();
        let scene = Rect::new(0.0, 0.0, self.extent, self.extent);
        for (r, h, name) in &all {
            if !r.is_valid() || !(*h > VEGETATION_BASE) {
                return bad(format!("degenerate object {name}"));
            }
            if !(scene.contains(r.x0, r.y0) && scene.contains(r.x1, r.y1)) {
                return bad(format!("{name} extends outside the scene"));
            }
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].0.overlaps(&all[j].0) {
                    return bad(format!("overlapping objects: {} and {}", all[i].2, all[j].2));
                }
            }
        }
        Ok(())
    }

    /// `key = value` description of the configuration.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "extent = {}", self.extent).unwrap();
        writeln!(s, "density_t1 = {}", self.density_t1).unwrap();
        writeln!(s, "density_t2 = {}", self.density_t2).unwrap();
        writeln!(s, "noise_sigma = {}", self.noise_sigma).unwrap();
        writeln!(s, "wall_density_factor = {}", self.wall_density_factor).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        for (i, o) in self.static_objects.iter().enumerate() {
            writeln!(s, "static.{i} = {o:?}").unwrap();
        }
        for (i, c) in self.change_ops.iter().enumerate() {
            writeln!(s, "change.{i} = {c:?}").unwrap();
        }
        s
    }
}

/// Generated pair. `newer.labels` holds the change labels; `older` is
/// unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub older: PointCloud,
    pub newer: PointCloud,
}

impl Scene {
    pub fn changed_fraction(&self) -> f64 {
        let l = self.newer.labels.as_deref().unwrap_or(&[]);
        l.iter().filter(|&&c| c).count() as f64 / l.len().max(1) as f64
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Sampler {
    fn noise(&mut self) -> f64 {
        match &self.noise {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        }
    }

    /// Jittered stratified samples over `[0, a] x [0, b]` at `density`.
    fn stratified(&mut self, a: f64, b: f64, density: f64) -> Vec<(f64, f64)> {
        let step = 1.0 / density.sqrt();
        let na = ((a / step).round() as usize).max(1);
        let nb = ((b / step).round() as usize).max(1);
        let (sa, sb) = (a / na as f64, b / nb as f64);
        let mut out = Vec::with_capacity(na * nb);
        for i in 0..na {
            for j in 0..nb {
                let u: f64 = self.rng.random();
                let v: f64 = self.rng.random();
                out.push(((i as f64 + u) * sa, (j as f64 + v) * sb));
            }
        }
        out
    }

    fn ground(&mut self, extent: f64, density: f64, holes: &[Rect], out: &mut Vec<Point3>) {
        for (x, y) in self.stratified(extent, extent, density) {
            let z = self.noise();
            if !holes.iter().any(|h| h.contains(x, y)) {
                out.push(Point3::new(x, y, z));
            }
        }
    }

    fn box_surfaces(&mut self, r: Rect, h: f64, density: f64, wall_factor: f64, out: &mut Vec<Point3>) {
        for (u, v) in self.stratified(r.x1 - r.x0, r.y1 - r.y0, density) {
            let z = h + self.noise();
            out.push(Point3::new(r.x0 + u, r.y0 + v, z));
        }
        let wall = density * wall_factor;
        for (len, fixed, along_x) in [
            (r.x1 - r.x0, r.y0, true),
            (r.x1 - r.x0, r.y1, true),
            (r.y1 - r.y0, r.x0, false),
            (r.y1 - r.y0, r.x1, false),
        ] {
            for (s, t) in self.stratified(len, h, wall) {
                let z = t + self.noise();
                out.push(if along_x {
                    Point3::new(r.x0 + s, fixed, z)
                } else {
                    Point3::new(fixed, r.y0 + s, z)
                });
            }
        }
    }

    fn vegetation(&mut self, center: [f64; 2], radius: f64, height: f64, density: f64, out: &mut Vec<Point3>) {
        let count = (density * PI * radius * radius * 1.5).round() as usize;
        let xy = Normal::new(0.0, radius / 2.0).unwrap();
        let zd = Normal::new(0.6 * height, height / 4.0).unwrap();
        let mut n = 0;
        while n < count {
            let dx = xy.sample(&mut self.rng);
            let dy = xy.sample(&mut self.rng);
            let z = zd.sample(&mut self.rng);
            if dx * dx + dy * dy > radius * radius || !(VEGETATION_BASE..=height).contains(&z) {
                continue;
            }
            out.push(Point3::new(center[0] + dx, center[1] + dy, z));
            n += 1;
        }
    }

    fn object(&mut self, o: &SceneObject, density: f64, wall_factor: f64, out: &mut Vec<Point3>) {
        match *o {
            SceneObject::Building { footprint, height } | SceneObject::Clutter { footprint, height } => {
                self.box_surfaces(footprint, height, density, wall_factor, out)
            }
            SceneObject::Vegetation { center, radius, height } => self.vegetation(center, radius, height, density, out),
        }
    }
}

/// Samples one epoch. Returns the points, the number of ground points
/// (which come first) and the point count contributed by each object in
/// order.
fn sample_epoch(cfg: &SceneConfig, objects: &[SceneObject], density: f64, seed: u64) -> Result<(Vec<Point3>, usize, Vec<usize>)> {
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Scene(e.to_string()))?)
    } else {
        None
    };
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        noise,
    };
    let holes: Vec<Rect> = objects.iter().filter_map(|o| o.occluding_footprint()).collect();
    let mut pts = Vec::new();
    s.ground(cfg.extent, density, &holes, &mut pts);
    let ground = pts.len();
    let mut counts = Vec::with_capacity(objects.len());
    for o in objects {
        let before = pts.len();
        s.object(o, density, cfg.wall_density_factor, &mut pts);
        counts.push(pts.len() - before);
    }
    Ok((pts, ground, counts))
}

/// Generates both epochs. Equal configs give bit-identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut t1 = cfg.static_objects.clone();
    let mut t2 = cfg.static_objects.clone();
    let mut demolished = Vec::new();
    for op in &cfg.change_ops {
        match *op {
            ChangeOp::Appear(o) => t2.push(o),
            ChangeOp::Demolish { footprint, height } => {
                t1.push(SceneObject::Building { footprint, height });
                demolished.push(footprint);
            }
        }
    }
    let base = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let (older, _, _) = sample_epoch(cfg, &t1, cfg.density_t1, base ^ 1)?;
    let (newer, ground, counts) = sample_epoch(cfg, &t2, cfg.density_t2, base ^ 2)?;

    let mut labels: Vec<bool> = newer[..ground]
        .iter()
        .map(|p| demolished.iter().any(|r| r.contains(p.x, p.y)))
        .collect();
    for (i, n) in counts.into_iter().enumerate() {
        let appeared = i >= cfg.static_objects.len();
        labels.extend(std::iter::repeat_n(appeared, n));
    }
    Ok(Scene {
        older: PointCloud::new(older),
        newer: PointCloud::with_labels(newer, labels)?,
    })
}

/// Oracle labels for the second epoch from the declared change regions.
pub fn region_labels(cfg: &SceneConfig, points: &[Point3]) -> Vec<bool> {
    points
        .iter()
        .map(|p| cfg.change_ops.iter().any(|c| c.region_contains(p)))
        .collect()
}
