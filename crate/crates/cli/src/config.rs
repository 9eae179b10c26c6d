//! `key = value` run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pcchange::baselines::M3c2Params;
use pcchange::dcva::DEFAULT_BINS;
use pcchange::net::NetworkConfig;
use pcchange::ssl::TrainConfig;
use pcchange::synth::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenePreset {
    Default,
    SingleNewBuilding,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    C2c,
    M3c2,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::C2c => "c2c",
            Method::M3c2 => "m3c2",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub scene_preset: ScenePreset,
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub detect_tap: usize,
    pub detect_tile_radius: f64,
    pub detect_stride: f64,
    pub detect_bins: usize,
    pub method: Method,
    pub m3c2: M3c2Params,
    pub clean_k: usize,
    pub ground_mask: Option<PathBuf>,
    pub pc1: Option<PathBuf>,
    pub pc2: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub change_map: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            seed: 0,
            scene_preset: ScenePreset::Default,
            scene: SceneConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            detect_tap: 8,
            detect_tile_radius: 20.0,
            detect_stride: 20.0,
            detect_bins: DEFAULT_BINS,
            method: Method::C2c,
            m3c2: M3c2Params::default(),
            clean_k: 15,
            ground_mask: None,
            pc1: None,
            pc2: None,
            truth: None,
            checkpoint: None,
            loss_log: None,
            change_map: None,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("out", "output directory"),
    ("seed", "seed for scene, weight init and training"),
    ("scene.preset", "default | single_new_building | empty"),
    ("scene.extent", "scene side in meters"),
    ("scene.density_t1", "older epoch points per m^2"),
    ("scene.density_t2", "newer epoch points per m^2"),
    ("scene.noise_sigma", "vertical noise std in meters"),
    ("scene.wall_density_factor", "wall density relative to roofs"),
    ("net.num_blocks", "numbered layers, 2 * encoder blocks + 1"),
    ("net.encoder_channels", "comma-separated encoder widths"),
    ("net.k", "output clusters"),
    ("net.conv_radius", "first-level convolution radius in meters"),
    ("net.kernel_points", "kernel points per convolution"),
    ("net.first_cell", "first-level subsampling cell in meters"),
    ("train.epochs", "training epochs"),
    ("train.cylinders_per_epoch", "tile pairs per epoch"),
    ("train.batch_size", "tile pairs per iteration"),
    ("train.tile_radius", "training cylinder radius in meters"),
    ("train.learning_rate", "initial learning rate"),
    ("train.lr_decay", "per-epoch learning rate factor"),
    ("train.momentum", "SGD momentum"),
    ("train.max_resample", "redraws per empty cylinder"),
    ("detect.tap", "feature layer for differencing"),
    ("detect.tile_radius", "inference cylinder radius in meters"),
    ("detect.stride", "inference tile spacing in meters"),
    ("detect.bins", "Otsu histogram bins"),
    ("baseline.method", "c2c | m3c2"),
    ("m3c2.normal_scale", "normal estimation radius in meters"),
    ("m3c2.projection_radius", "projection cylinder radius in meters"),
    ("m3c2.max_depth", "projection cylinder half-length in meters"),
    ("m3c2.registration_error", "additive level-of-detection term in meters"),
    ("m3c2.core_cell", "core point grid cell in meters"),
    ("eval.clean_k", "neighbors for the cleaning pass, 0 disables"),
    ("eval.ground_mask", "file of 0/1 per newer point; 1 excludes it"),
    ("eval.truth", "labeled cloud holding ground truth (default: pc2)"),
    ("pc1", "older cloud (default: <out>/pc1.txt)"),
    ("pc2", "newer cloud (default: <out>/pc2.txt)"),
    ("checkpoint", "model file (default: <out>/model.bin)"),
    ("loss_log", "training log (default: <out>/loss_log.csv)"),
    ("change_map", "change map written by detect/baseline, read by eval"),
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                bail!("line {}: duplicate key {k}", n + 1);
            }
            self.set(k, v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "scene.preset" => {
                self.scene_preset = match v {
                    "default" => ScenePreset::Default,
                    "single_new_building" => ScenePreset::SingleNewBuilding,
                    "empty" => ScenePreset::Empty,
                    _ => bail!("scene.preset: unknown preset {v:?}"),
                };
                let keep = self.scene.clone();
                self.scene = match self.scene_preset {
                    ScenePreset::Default => SceneConfig::default(),
                    ScenePreset::SingleNewBuilding => SceneConfig::single_new_building(),
                    ScenePreset::Empty => SceneConfig::empty(keep.extent),
                };
            }
            "scene.extent" => self.scene.extent = num(key, v)?,
            "scene.density_t1" => self.scene.density_t1 = num(key, v)?,
            "scene.density_t2" => self.scene.density_t2 = num(key, v)?,
            "scene.noise_sigma" => self.scene.noise_sigma = num(key, v)?,
            "scene.wall_density_factor" => self.scene.wall_density_factor = num(key, v)?,
            "net.num_blocks" => self.network.num_blocks = num(key, v)?,
            "net.encoder_channels" => {
                self.network.encoder_channels =
                    v.split(',').map(|c| num(key, c.trim())).collect::<Result<Vec<usize>>>()?;
            }
            "net.k" => self.network.k = num(key, v)?,
            "net.conv_radius" => self.network.conv_radius = num(key, v)?,
            "net.kernel_points" => self.network.kernel_point_count = num(key, v)?,
            "net.first_cell" => self.network.first_cell = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.cylinders_per_epoch" => self.train.cylinders_per_epoch = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.tile_radius" => self.train.tile_radius = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = num(key, v)?,
            "train.momentum" => self.train.momentum = num(key, v)?,
            "train.max_resample" => self.train.max_resample = num(key, v)?,
            "detect.tap" => self.detect_tap = num(key, v)?,
            "detect.tile_radius" => self.detect_tile_radius = num(key, v)?,
            "detect.stride" => self.detect_stride = num(key, v)?,
            "detect.bins" => self.detect_bins = num(key, v)?,
            "baseline.method" => {
                self.method = match v {
                    "c2c" => Method::C2c,
                    "m3c2" => Method::M3c2,
                    _ => bail!("baseline.method: expected c2c or m3c2, got {v:?}"),
                }
            }
            "m3c2.normal_scale" => self.m3c2.normal_scale = num(key, v)?,
            "m3c2.projection_radius" => self.m3c2.projection_radius = num(key, v)?,
            "m3c2.max_depth" => self.m3c2.max_depth = num(key, v)?,
            "m3c2.registration_error" => self.m3c2.registration_error = num(key, v)?,
            "m3c2.core_cell" => self.m3c2.core_cell = num(key, v)?,
            "eval.clean_k" => self.clean_k = num(key, v)?,
            "eval.ground_mask" => self.ground_mask = path(),
            "eval.truth" => self.truth = path(),
            "pc1" => self.pc1 = path(),
            "pc2" => self.pc2 = path(),
            "checkpoint" => self.checkpoint = path(),
            "loss_log" => self.loss_log = path(),
            "change_map" => self.change_map = path(),
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig { seed: self.seed, ..self.scene.clone() }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig { seed: self.seed, ..self.network.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    fn or_out(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn pc1_path(&self) -> PathBuf {
        self.or_out(&self.pc1, "pc1.txt")
    }

    pub fn pc2_path(&self) -> PathBuf {
        self.or_out(&self.pc2, "pc2.txt")
    }

    pub fn truth_path(&self) -> PathBuf {
        self.truth.clone().unwrap_or_else(|| self.pc2_path())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.or_out(&self.checkpoint, "model.bin")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.or_out(&self.loss_log, "loss_log.csv")
    }

    /// Where `detect` writes. `baseline` uses `change_<method>.txt` unless
    /// `change_map` is set.
    pub fn dcva_map_path(&self) -> PathBuf {
        self.or_out(&self.change_map, "change_dcva.txt")
    }

    pub fn baseline_map_path(&self) -> PathBuf {
        self.or_out(&self.change_map, &format!("change_{}.txt", self.method.name()))
    }
}
