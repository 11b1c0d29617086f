//! Command-line front end: phantom generation, training, sampling, metric
//! reports, mask utilities, and the controlled conditioning-strategy
//! diversity experiment.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::FullConfig;
use crate::error::{PowdrError, Result};
use crate::maskgen::{self, VolumeDistribution};
use crate::metrics::{diversity_report, DiversityReport};
use crate::phantom::{generate_all, PhantomSpec};
use crate::sampler::{sample, SampleRequest};
use crate::schedule::linear_schedule;
use crate::trainer::{train, write_loss_csv, ConditioningMode, TrainingExample};
use crate::volume::{read_mask, read_volume, write_mask, write_volume};

#[derive(Parser)]
#[command(
    name = "powdr",
    version,
    about = "Pathology-preserving 3D outpainting with a conditioned wavelet diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with lesion masks and a manifest
    GenPhantoms(GenPhantomsArgs),
    /// Train a denoiser from a config file and a phantom dataset
    Train(TrainArgs),
    /// Draw repeated samples conditioned on a masked volume
    Sample(SampleArgs),
    /// Diversity metrics over a set of sample volumes
    Metrics(MetricsArgs),
    /// Mask utilities
    Mask(MaskArgs),
    /// Train both conditioning strategies and compare sample diversity
    DiversityExperiment(ExperimentArgs),
}

#[derive(Args)]
struct GenPhantomsArgs {
    #[arg(long)]
    count: usize,
    /// Cubic edge length in voxels (must be even)
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    lesion_min: u64,
    #[arg(long, default_value_t = 40)]
    lesion_max: u64,
    #[arg(long, default_value_t = 0.1)]
    texture: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for checkpoint.pwdr and loss.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Condition volume (PVOL)
    #[arg(long)]
    condition: PathBuf,
    /// Condition mask (PVOL mask)
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite masked voxels with the condition after reconstruction
    #[arg(long)]
    hard_composite: bool,
    /// Clamp outputs to [0, 1]
    #[arg(long)]
    clamp: bool,
    /// Files are written as <prefix><k>.pvol plus <prefix>meta.json
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct MetricsArgs {
    /// Sample volumes (at least two)
    #[arg(required = true, num_args = 2..)]
    samples: Vec<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// JSON report path; mean/std maps land next to it
    #[arg(long)]
    out: PathBuf,
    /// Per-pair CSV path (default: report path with .csv extension)
    #[arg(long)]
    pairs_csv: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[command(subcommand)]
    cmd: MaskCommand,
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Grow random 6-connected masks
    Gen(MaskGenArgs),
    /// Verify connectivity and report voxel counts
    Check(MaskCheckArgs),
}

#[derive(Args)]
struct MaskGenArgs {
    /// Cubic edge length in voxels
    #[arg(long)]
    size: usize,
    /// Fixed target voxel count (alternative to --volumes)
    #[arg(long, conflicts_with = "volumes")]
    target: Option<u64>,
    /// Reference volume distribution file, one integer per line
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MaskCheckArgs {
    #[arg(required = true, num_args = 1..)]
    masks: Vec<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    config_a: PathBuf,
    #[arg(long)]
    config_b: PathBuf,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Overrides the training seed in both configs and the sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON result path
    #[arg(long)]
    out: PathBuf,
}

// --- dataset manifest -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: [usize; 3],
    pub seed: u64,
    pub texture_amplitude: f64,
    pub cases: Vec<ManifestCase>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestCase {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub lesion_voxels: u64,
}

pub fn load_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        PowdrError::argument(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(data_dir: &Path) -> Result<(Vec<TrainingExample>, Vec<u64>)> {
    let manifest = load_manifest(data_dir)?;
    if manifest.cases.is_empty() {
        return Err(PowdrError::argument("manifest lists no cases"));
    }
    let mut dataset = Vec::with_capacity(manifest.cases.len());
    let mut volumes = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        dataset.push(TrainingExample {
            image: read_volume(data_dir.join(&case.image))?,
            pathology_mask: read_mask(data_dir.join(&case.mask))?,
        });
        volumes.push(case.lesion_voxels);
    }
    Ok((dataset, volumes))
}

// --- commands ---------------------------------------------------------------

fn cmd_gen_phantoms(args: &GenPhantomsArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: (args.size, args.size, args.size),
        n_cases: args.count,
        lesion_volume_range: (args.lesion_min, args.lesion_max),
        texture_amplitude: args.texture,
        seed: args.seed,
    };
    spec.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let cases = generate_all(&spec)?;
    let mut manifest = Manifest {
        dims: [args.size, args.size, args.size],
        seed: args.seed,
        texture_amplitude: args.texture,
        cases: Vec::with_capacity(cases.len()),
    };
    for (i, ex) in cases.iter().enumerate() {
        let image = format!("case{i}.pvol");
        let mask = format!("case{i}_mask.pvol");
        write_volume(&ex.image, args.out_dir.join(&image))?;
        write_mask(&ex.pathology_mask, args.out_dir.join(&mask))?;
        manifest.cases.push(ManifestCase {
            index: i,
            image,
            mask,
            lesion_voxels: ex.pathology_mask.count_true() as u64,
        });
    }
    std::fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} cases to {}", cases.len(), args.out_dir.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = FullConfig::from_file(&args.config)?;
    let (dataset, volumes) = load_dataset(&args.data_dir)?;
    let sched = linear_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let dist = if cfg.train.conditioning_mode == ConditioningMode::RandomConnected {
        Some(VolumeDistribution::new(volumes, 0.1)?)
    } else {
        None
    };
    std::fs::create_dir_all(&args.out)?;
    let checkpoint_path = args.out.join("checkpoint.pwdr");
    let out = train(
        &dataset,
        &cfg.train,
        &sched,
        &cfg.net,
        dist.as_ref(),
        Some((&checkpoint_path, cfg.checkpoint_interval)),
    )?;
    write_loss_csv(&out.loss_curve, args.out.join("loss.csv"))?;
    let final_loss = out.loss_curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations, final loss {final_loss:.6}, checkpoint {}",
        cfg.train.iterations,
        checkpoint_path.display()
    );
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let condition_image = read_volume(&args.condition)?;
    let condition_mask = read_mask(&args.mask)?;
    let req = SampleRequest {
        condition_image,
        condition_mask,
        steps: ck.t_max,
        seed: args.seed,
        hard_composite: args.hard_composite,
        repeats: args.repeats,
    };
    let mut vols = sample(&ck, &req)?;
    if args.clamp {
        for v in &mut vols {
            for x in v.data.iter_mut() {
                *x = x.clamp(0.0, 1.0);
            }
        }
    }
    let mut files = Vec::new();
    for (k, v) in vols.iter().enumerate() {
        let path = format!("{}{k}.pvol", args.out_prefix);
        write_volume(v, &path)?;
        files.push(path);
    }
    let meta = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "checkpoint_sha256": sha256_file(&args.checkpoint)?,
        "condition": args.condition.display().to_string(),
        "mask": args.mask.display().to_string(),
        "steps": ck.t_max,
        "seed": args.seed,
        "repeats": args.repeats,
        "hard_composite": args.hard_composite,
        "clamp": args.clamp,
        "files": files,
    });
    std::fs::write(
        format!("{}meta.json", args.out_prefix),
        serde_json::to_string_pretty(&meta)?,
    )?;
    println!("wrote {} samples with prefix {}", args.repeats, args.out_prefix);
    Ok(())
}

fn report_scalars(r: &DiversityReport) -> serde_json::Value {
    serde_json::json!({
        "n_samples": r.n_samples,
        "pair_count": r.pair_count,
        "mean_pairwise_cosine": r.mean_pairwise_cosine,
        "std_pairwise_cosine": r.std_pairwise_cosine,
        "mean_pairwise_kl": r.mean_pairwise_kl,
        "std_pairwise_kl": r.std_pairwise_kl,
        "outside": r.outside.map(|o| serde_json::json!({
            "mean_pairwise_cosine": o.mean_cosine,
            "std_pairwise_cosine": o.std_cosine,
            "mean_pairwise_kl": o.mean_kl,
            "std_pairwise_kl": o.std_kl,
        })),
    })
}

fn write_pairs_csv(r: &DiversityReport, path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "i,j,cosine,kl,cosine_outside,kl_outside")?;
    for p in &r.per_pair {
        let fmt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.i,
            p.j,
            p.cosine,
            p.kl,
            fmt(p.cosine_outside),
            fmt(p.kl_outside)
        )?;
    }
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let samples = args
        .samples
        .iter()
        .map(read_volume)
        .collect::<Result<Vec<_>>>()?;
    let mask = args.mask.as_ref().map(read_mask).transpose()?;
    let report = diversity_report(&samples, mask.as_ref())?;
    let stem = args.out.with_extension("");
    let mean_path = PathBuf::from(format!("{}_mean.pvol", stem.display()));
    let std_path = PathBuf::from(format!("{}_std.pvol", stem.display()));
    write_volume(&report.voxelwise_mean, &mean_path)?;
    write_volume(&report.voxelwise_std, &std_path)?;
    let csv_path = args
        .pairs_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    write_pairs_csv(&report, &csv_path)?;
    let mut json = report_scalars(&report);
    json["voxelwise_mean_path"] = serde_json::json!(mean_path.display().to_string());
    json["voxelwise_std_path"] = serde_json::json!(std_path.display().to_string());
    json["pairs_csv_path"] = serde_json::json!(csv_path.display().to_string());
    std::fs::write(&args.out, serde_json::to_string_pretty(&json)?)?;
    println!(
        "cosine {:.4} +/- {:.4}, kl {:.5} +/- {:.5} over {} pairs",
        report.mean_pairwise_cosine,
        report.std_pairwise_cosine,
        report.mean_pairwise_kl,
        report.std_pairwise_kl,
        report.pair_count
    );
    Ok(())
}

fn cmd_mask_gen(args: &MaskGenArgs) -> Result<()> {
    if args.size == 0 {
        return Err(PowdrError::argument("size must be >= 1"));
    }
    let dist = match (&args.volumes, args.target) {
        (Some(path), None) => Some(VolumeDistribution::from_file(path, args.jitter)?),
        (None, Some(t)) => Some(VolumeDistribution::new(vec![t], args.jitter)?),
        (None, None) => {
            return Err(PowdrError::argument("need --target or --volumes"));
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
    .unwrap();
    std::fs::create_dir_all(&args.out_dir)?;
    let dims = (args.size, args.size, args.size);
    let total = (args.size * args.size * args.size) as u64;
    for i in 0..args.count {
        let mut rng = crate::rng::derive_rng(args.seed, crate::rng::stream::MASK, i as u64);
        let target = maskgen::sample_target_volume(&dist, &mut rng).min(total);
        let mask = maskgen::grow_connected_mask(dims, target, &mut rng)?;
        write_mask(&mask, args.out_dir.join(format!("mask{i}.pvol")))?;
    }
    println!("wrote {} masks to {}", args.count, args.out_dir.display());
    Ok(())
}

fn cmd_mask_check(args: &MaskCheckArgs) -> Result<()> {
    let mut all_ok = true;
    for path in &args.masks {
        let mask = read_mask(path)?;
        let connected = maskgen::check_6_connected(&mask);
        all_ok &= connected;
        println!(
            "{}: {} voxels, {}",
            path.display(),
            mask.count_true(),
            if connected { "6-connected" } else { "NOT 6-connected" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(PowdrError::contract("one or more masks failed the connectivity check"))
    }
}

/// Train one conditioning strategy and measure sample diversity on the
/// held-out condition. The seed overrides the config's training seed and
/// also drives sampling, so both strategies see identical noise streams.
pub fn run_strategy(
    cfg: &FullConfig,
    train_set: &[TrainingExample],
    held_out: &TrainingExample,
    volumes: &[u64],
    repeats: usize,
    seed: u64,
) -> Result<DiversityReport> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let sched = linear_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let dist = VolumeDistribution::new(volumes.to_vec(), 0.1)?;
    let out = train(train_set, &train_cfg, &sched, &cfg.net, Some(&dist), None)?;
    let req = SampleRequest {
        condition_image: held_out.image.clone(),
        condition_mask: held_out.pathology_mask.clone(),
        steps: cfg.t_max,
        seed,
        hard_composite: true,
        repeats,
    };
    let samples = sample(&out.checkpoint, &req)?;
    diversity_report(&samples, Some(&held_out.pathology_mask))
}

fn cmd_diversity_experiment(args: &ExperimentArgs) -> Result<()> {
    let start = Instant::now();
    let cfg_a = FullConfig::from_file(&args.config_a)?;
    let cfg_b = FullConfig::from_file(&args.config_b)?;
    if !cfg_a.same_except_conditioning(&cfg_b) {
        return Err(PowdrError::argument(
            "configs must differ only in conditioning_mode",
        ));
    }
    if cfg_a.train.conditioning_mode == cfg_b.train.conditioning_mode {
        return Err(PowdrError::argument(
            "configs use the same conditioning_mode; nothing to compare",
        ));
    }
    if args.repeats < 2 {
        return Err(PowdrError::argument("repeats must be >= 2"));
    }
    let (dataset, volumes) = load_dataset(&args.data_dir)?;
    if dataset.len() < 2 {
        return Err(PowdrError::argument(
            "need at least 2 cases (last one is held out as the condition)",
        ));
    }
    // the last case is held out: its pathology conditions sampling for both
    // strategies and never enters training
    let held_out = dataset.last().unwrap().clone();
    let train_set = &dataset[..dataset.len() - 1];
    let train_volumes = &volumes[..volumes.len() - 1];

    let mut fixed = None;
    let mut random = None;
    for cfg in [&cfg_a, &cfg_b] {
        let report = run_strategy(cfg, train_set, &held_out, train_volumes, args.repeats, args.seed)?;
        match cfg.train.conditioning_mode {
            ConditioningMode::FixedPathology => fixed = Some(report),
            ConditioningMode::RandomConnected => random = Some(report),
        }
    }
    let (fixed, random) = (fixed.unwrap(), random.unwrap());
    let delta_cosine = random.mean_pairwise_cosine - fixed.mean_pairwise_cosine;
    let delta_kl = random.mean_pairwise_kl - fixed.mean_pairwise_kl;
    let runtime = start.elapsed().as_secs_f64();

    let json = serde_json::json!({
        "fixed_pathology": report_scalars(&fixed),
        "random_connected": report_scalars(&random),
        "delta_cosine": delta_cosine,
        "delta_kl": delta_kl,
        "repeats": args.repeats,
        "seed": args.seed,
        "runtime_seconds": runtime,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&json)?)?;
    println!(
        "delta_cosine {delta_cosine:+.5}, delta_kl {delta_kl:+.5} ({runtime:.1}s)"
    );
    Ok(())
}

// --- entry point ------------------------------------------------------------

fn init_thread_pool() {
    if let Ok(v) = std::env::var("POWDR_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                // ignore failure: the global pool may already exist
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::GenPhantoms(a) => cmd_gen_phantoms(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Mask(a) => match &a.cmd {
            MaskCommand::Gen(g) => cmd_mask_gen(g),
            MaskCommand::Check(c) => cmd_mask_check(c),
        },
        Command::DiversityExperiment(a) => cmd_diversity_experiment(a),
    }
}

/// Usage errors exit 2, runtime errors exit 1.
pub fn exit_code(err: &PowdrError) -> i32 {
    match err {
        PowdrError::Argument(_) => 2,
        _ => 1,
    }
}

pub fn main() {
    init_thread_pool();
    let cli = Cli::parse(); // clap exits 2 on usage errors
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
