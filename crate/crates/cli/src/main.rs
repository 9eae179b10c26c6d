//! `pcchange`: generate scenes, train, detect changes, run baselines, score.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use pcchange::baselines::{c2c, m3c2, write_core_points};
use pcchange::dcva::{detect_changes, read_change_map, write_change_map, DetectParams};
use pcchange::geom::{read_cloud, write_cloud, KdIndex, PointCloud};
use pcchange::metrics::{confusion, scores, CSV_HEADER};
use pcchange::net::{checkpoint, FeatureTap, Network};
use pcchange::ssl::{train, write_loss_log};
use pcchange::synth::generate_scene;

use config::{Method, RunConfig};

#[derive(Parser)]
#[command(name = "pcchange", version, about = "Unsupervised 3D point cloud change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene pair (pc1.txt, pc2.txt with labels).
    Generate,
    /// Self-supervised training; writes the checkpoint and loss log.
    Train,
    /// SSL-DCVA change map from a checkpoint (decisions before cleaning).
    Detect,
    /// C2C or M3C2 change map, per `baseline.method`.
    Baseline,
    /// Clean a change map and score it against labels.
    Eval,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PC_CHANGE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("PC_CHANGE_THREADS must be a positive integer, got {v:?}"))?;
        pcchange::par::init_threads(n);
    }
    Ok(())
}

/// Runs a library file operation, naming the file in any error.
fn at<T>(path: &Path, f: impl FnOnce(&Path) -> pcchange::error::Result<T>) -> Result<T> {
    f(path).with_context(|| path.display().to_string())
}

fn load(path: &Path) -> Result<PointCloud> {
    at(path, read_cloud)
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let scene_cfg = cfg.scene_config();
    let scene = generate_scene(&scene_cfg)?;
    at(&cfg.pc1_path(), |p| write_cloud(p, &scene.older))?;
    at(&cfg.pc2_path(), |p| write_cloud(p, &scene.newer))?;
    let manifest = cfg.out.join("scene.manifest");
    std::fs::write(&manifest, scene_cfg.manifest()).with_context(|| format!("writing {}", manifest.display()))?;
    println!(
        "pc1 {} points, pc2 {} points, {:.2}% changed",
        scene.older.len(),
        scene.newer.len(),
        100.0 * scene.changed_fraction()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let pc1 = load(&cfg.pc1_path())?;
    let pc2 = load(&cfg.pc2_path())?;
    let mut net = Network::new(cfg.network_config())?;
    let t = Instant::now();
    let log = train(&mut net, &pc1, &pc2, &cfg.train_config())?;
    at(&cfg.checkpoint_path(), |p| checkpoint::save(p, &net))?;
    write_loss_log(&cfg.loss_log_path(), &log)?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint {}",
        log.len(),
        t.elapsed().as_secs_f64(),
        cfg.checkpoint_path().display()
    );
    Ok(())
}

fn cmd_detect(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let net = at(&cfg.checkpoint_path(), checkpoint::load)?;
    let pc1 = load(&cfg.pc1_path())?;
    let pc2 = load(&cfg.pc2_path())?;
    let params = DetectParams {
        tap: FeatureTap(cfg.detect_tap),
        tile_radius: cfg.detect_tile_radius,
        stride: cfg.detect_stride,
        bins: cfg.detect_bins,
        clean_k: None,
    };
    let map = detect_changes(&net, &pc1, &pc2, &params)?;
    at(&cfg.dcva_map_path(), |p| write_change_map(p, &pc2.points, &map))?;
    report_map(&cfg.dcva_map_path(), map.changed_count(), map.len(), map.threshold);
    Ok(())
}

fn report_map(path: &Path, changed: usize, total: usize, threshold: Option<f64>) {
    let t = threshold.map_or("none".to_string(), |t| format!("{t}"));
    println!("{changed}/{total} points changed (threshold {t}); wrote {}", path.display());
}

fn cmd_baseline(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let pc1 = load(&cfg.pc1_path())?;
    let pc2 = load(&cfg.pc2_path())?;
    let path = cfg.baseline_map_path();
    let map = match cfg.method {
        Method::C2c => c2c(&pc1, &pc2, &KdIndex::build(&pc1)?)?,
        Method::M3c2 => {
            let out = m3c2(&pc1, &pc2, &cfg.m3c2)?;
            at(&cfg.out.join("m3c2_cores.txt"), |p| write_core_points(p, &out.cores))?;
            out.map
        }
    };
    at(&path, |p| write_change_map(p, &pc2.points, &map))?;
    report_map(&path, map.changed_count(), map.len(), map.threshold);
    Ok(())
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            o => bail!("{}:{}: mask entries must be 0 or 1, got {o:?}", path.display(), n + 1),
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let map_path = cfg.change_map.clone().unwrap_or_else(|| cfg.dcva_map_path());
    let (points, mut map) = at(&map_path, read_change_map)?;
    let truth_cloud = load(&cfg.truth_path())?;
    let truth = truth_cloud
        .labels
        .with_context(|| format!("{} has no label column", cfg.truth_path().display()))?;
    if truth.len() != map.len() {
        bail!(
            "change map {} has {} points but ground truth {} has {}",
            map_path.display(),
            map.len(),
            cfg.truth_path().display(),
            truth.len()
        );
    }
    if cfg.clean_k > 0 {
        let index = KdIndex::new(&points)?;
        map = map.cleaned(&points, &index, cfg.clean_k);
    }
    let mask = cfg.ground_mask.as_deref().map(read_mask).transpose()?;
    if let Some(m) = &mask {
        if m.len() != truth.len() {
            bail!("ground mask has {} entries but ground truth has {} points", m.len(), truth.len());
        }
    }
    let cm = confusion(&map.changed, &truth, mask.as_deref())?;
    let s = scores(&cm)?;
    println!("{}: TP {} FP {} FN {} TN {}", map_path.display(), cm.tp, cm.fp, cm.fn_, cm.tn);
    println!("{s}");
    println!("{CSV_HEADER}");
    println!("{}", s.csv_line());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Detect => cmd_detect(&cfg),
        Command::Baseline => cmd_baseline(&cfg),
        Command::Eval => cmd_eval(&cfg),
    }
}

/// `--help` epilogue listing every configuration key.
fn keys_help() -> String {
    let width = config::KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (config file `key = value`, or --set key=value):\n");
    for (k, d) in config::KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
