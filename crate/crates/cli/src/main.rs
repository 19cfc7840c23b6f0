use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use dualprior::array_io::{load_array, save_array, Array};
use dualprior::fusion::PriorsMode;
use dualprior::harness::check::{self, Suite};
use dualprior::harness::eval::{self, EvalOptions};
use dualprior::harness::plots;
use dualprior::harness::train::{self, Models};
use dualprior::harness::{Checkpoint, RunConfig, StageId, TrainData, TrainOptions};
use dualprior::metrics::EvalReport;
use dualprior::video::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Split, VideoClip};

#[derive(Parser)]
#[command(name = "dualprior", version, about = "Toy one-step video face restoration with dual-codebook priors")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the small toy preset instead of the desk-scale defaults.
    #[arg(long, global = true)]
    toy: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// none | spatial | temporal | both
    #[arg(long, global = true)]
    priors: Option<String>,
    #[arg(long, global = true)]
    tstar: Option<f64>,
    /// Output directory for data, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset into <out>/data.
    GenData,
    /// Pretrain the VAE stand-in.
    TrainStage0(TrainArgs),
    /// Learn the dual codebooks from HQ reconstruction.
    TrainStage1(TrainArgs),
    /// Train the code-prediction transformers on LQ inputs.
    TrainStage1p(TrainArgs),
    /// Train the one-step restorer.
    TrainStage2(TrainArgs),
    /// Restore one clip stored as a (T, H, W, 3) f32 array file.
    Restore {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate the Stage-2 checkpoint of this config on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Accept a checkpoint trained under a different config.
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Run the property checks.
    Check {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from the partial checkpoint of this stage.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations in total and save a partial checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
}

fn parse_priors(s: &str) -> Result<PriorsMode> {
    Ok(match s {
        "none" => PriorsMode::None,
        "spatial" => PriorsMode::Spatial,
        "temporal" => PriorsMode::Temporal,
        "both" => PriorsMode::Both,
        other => bail!("unknown priors mode {other:?} (none|spatial|temporal|both)"),
    })
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.toy => RunConfig::toy(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.priors {
        cfg.restorer.fusion.priors = parse_priors(p)?;
    }
    if let Some(t) = cli.tstar {
        cfg.restorer.t_star = t;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

const DATASET_CONFIG_FILE: &str = "dataset_config.json";

/// The dataset under `<out>/data` when it was generated from the same
/// dataset settings, otherwise a fresh in-memory generation.
fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.data_dir();
    let stamp = dir.join(DATASET_CONFIG_FILE);
    if let Ok(text) = std::fs::read_to_string(&stamp) {
        let stored: DatasetConfig = serde_json::from_str(&text).context("reading dataset stamp")?;
        if stored == cfg.dataset {
            log::info!("loading dataset from {}", dir.display());
            return Ok(load_dataset(&dir)?);
        }
        log::warn!("{} was generated with other settings; regenerating in memory", dir.display());
    }
    Ok(generate_dataset(&cfg.dataset)?)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let ds = generate_dataset(&cfg.dataset)?;
    let dir = cfg.data_dir();
    save_dataset(&dir, &ds)?;
    std::fs::write(dir.join(DATASET_CONFIG_FILE), serde_json::to_string_pretty(&cfg.dataset)?)?;
    let lq = eval::evaluate_lq(cfg, &ds)?;
    println!(
        "wrote {} clips to {} (test LQ PSNR {:.2} dB, SSIM {:.4})",
        ds.clips.len(),
        dir.display(),
        lq.aggregate.psnr,
        lq.aggregate.ssim
    );
    Ok(())
}

fn load_required(path: &Path, what: &str) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("{what} checkpoint {} (train that stage first)", path.display()))
}

fn stage_path(cfg: &RunConfig, stage: StageId) -> PathBuf {
    match stage {
        StageId::Stage2 => cfg.stage2_checkpoint_path(),
        s => cfg.checkpoint_path(s.name()),
    }
}

const CURVES: [(StageId, &[&str]); 4] = [
    (StageId::Stage0, &["total"]),
    (StageId::Stage1, &["total", "l1", "per", "feat", "adv_g", "adv_d"]),
    (StageId::Stage1p, &["total", "ce_s", "ce_t", "cf"]),
    (StageId::Stage2, &["total", "rec_latent", "rec_pixel", "temp"]),
];

fn train_stage(cfg: &RunConfig, stage: StageId, args: &TrainArgs) -> Result<()> {
    let ds = dataset(cfg)?;
    let data = TrainData::new(&ds, &Device::Cpu)?;
    let path = stage_path(cfg, stage);
    let resume = if args.resume && path.exists() { Some(Checkpoint::load(&path)?) } else { None };
    let opts = TrainOptions { resume, stop_after: args.stop_after };
    let start = std::time::Instant::now();
    let ckpt = match stage {
        StageId::Stage0 => train::train_stage0(cfg, &data, &opts)?,
        StageId::Stage1 => train::train_stage1(cfg, &data, &opts)?,
        StageId::Stage1p => {
            let s1 = load_required(&cfg.checkpoint_path(StageId::Stage1.name()), "stage1")?;
            train::train_stage1p(cfg, &data, &s1, &opts)?
        }
        StageId::Stage2 => {
            let s1p = load_required(&cfg.checkpoint_path(StageId::Stage1p.name()), "stage1p")?;
            let s0 = load_required(&cfg.checkpoint_path(StageId::Stage0.name()), "stage0")?;
            train::train_stage2(cfg, &data, &s1p, &s0, &opts)?
        }
    };
    ckpt.save(&path)?;
    let name = stage.name();
    let report_dir = cfg.report_dir();
    let components = CURVES.iter().find(|(s, _)| *s == stage).map(|(_, c)| *c).unwrap_or(&["total"]);
    plots::save_png(&plots::loss_curves(&ckpt.header.history, components)?, &report_dir.join(format!("{name}_loss.png")))?;
    let history: String = ckpt
        .header
        .history
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    std::fs::write(report_dir.join(format!("{name}_history.jsonl")), history)?;
    println!(
        "{name}: {}/{} iterations in {:.1}s -> {}",
        ckpt.header.iteration,
        ckpt.header.total_iterations,
        start.elapsed().as_secs_f64(),
        path.display()
    );
    for (k, v) in &ckpt.header.extra {
        println!("  {k} = {v:.6}");
    }
    Ok(())
}

fn clip_from_array(a: &Array) -> Result<VideoClip> {
    let data = a.as_f32().context("clip array must be f32")?;
    match a.shape[..] {
        [t, h, w, 3] => Ok(VideoClip::new(t, h, w, data.to_vec())?),
        _ => bail!("clip array must have shape (T, H, W, 3), got {:?}", a.shape),
    }
}

fn restore(cfg: &RunConfig, input: &Path, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.stage2_checkpoint_path());
    let ckpt = load_required(&path, "stage2")?;
    let clip = clip_from_array(&load_array(input)?)?;
    let device = Device::Cpu;
    let models = Models::from_checkpoint(cfg, &ckpt, &device)?;
    let x = clip.to_tensor(&device, DType::F32)?.unsqueeze(0)?;
    let y = VideoClip::from_tensor(&models.restorer.one_step_restore(&x, &models.stdc)?.get(0)?)?;
    let (t, h, w, c) = y.dims();
    save_array(output, &Array::f32(vec![t, h, w, c], y.data().to_vec()).map_err(anyhow::Error::msg)?)?;
    println!("restored {} -> {}", input.display(), output.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "{:<20} PSNR {:7.3} dB  SSIM {:.4}  Ewarp {:.6}  ({} clips)",
        r.label, r.aggregate.psnr, r.aggregate.ssim, r.aggregate.ewarp, r.aggregate.clips
    );
}

fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, allow_hash_mismatch: bool) -> Result<()> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.stage2_checkpoint_path());
    let ckpt = load_required(&path, "stage2")?;
    let ds = dataset(cfg)?;
    let opts = EvalOptions { allow_hash_mismatch, label: None };
    let restored = eval::evaluate(cfg, &ckpt, &ds, &opts)?;
    let lq = eval::evaluate_lq(cfg, &ds)?;
    let dir = cfg.report_dir();
    let stem = format!("eval-{}-{}", eval::priors_label(cfg), &restored.config_hash[..12]);
    restored.write(&dir, &stem)?;
    lq.write(&dir, "eval-lq")?;
    plots::save_png(&plots::metric_bars(&[&lq, &restored])?, &dir.join(format!("{stem}_psnr.png")))?;

    let models = Models::from_checkpoint(cfg, &ckpt, &Device::Cpu)?;
    let clips = eval::restore_test_split(&models, &ds, &Device::Cpu)?;
    if let (Some(rec), Some((_, out))) = (ds.split(Split::Test).next(), clips.first()) {
        let y = rec.hq.height() / 2;
        plots::save_png(&plots::temporal_slices(&[&rec.lq, out, &rec.hq], y, 4)?, &dir.join(format!("{stem}_slices.png")))?;
    }
    print_report(&lq);
    print_report(&restored);
    println!("reports in {}", dir.display());
    Ok(())
}

fn run_checks(cfg: &RunConfig, suite: &str) -> Result<bool> {
    let suite: Suite = suite.parse().map_err(anyhow::Error::msg)?;
    let report = check::run(suite);
    print!("{}", report.to_lines());
    let dir = cfg.report_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("check-{}.json", suite.name())), serde_json::to_string_pretty(&report)?)?;
    let failed = report.failures().count();
    println!("{} checks, {} failed", report.outcomes.len(), failed);
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| match &cli.command {
        Command::GenData => gen_data(&cfg).map(|_| true),
        Command::TrainStage0(a) => train_stage(&cfg, StageId::Stage0, a).map(|_| true),
        Command::TrainStage1(a) => train_stage(&cfg, StageId::Stage1, a).map(|_| true),
        Command::TrainStage1p(a) => train_stage(&cfg, StageId::Stage1p, a).map(|_| true),
        Command::TrainStage2(a) => train_stage(&cfg, StageId::Stage2, a).map(|_| true),
        Command::Restore { input, output, checkpoint } => restore(&cfg, input, output, checkpoint.as_deref()).map(|_| true),
        Command::Eval { checkpoint, allow_hash_mismatch } => evaluate(&cfg, checkpoint.as_deref(), *allow_hash_mismatch).map(|_| true),
        Command::Check { suite } => run_checks(&cfg, suite),
        Command::ShowConfig => cfg.to_toml().map(|s| print!("{s}")).map(|_| true).map_err(Into::into),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
