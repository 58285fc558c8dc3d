use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wmu_core::checkpoint::load_ensemble;
use wmu_core::config::TrainConfig;
use wmu_core::data::{self, DatasetIndex, Split, SplitSizes};
use wmu_core::trainer::{self, argmax_maps, ensemble_probs, predict_probs, FitSummary, Objective};
use wmu_core::{Result, TensorGrid, WmuError};

/// Scribble-supervised segmentation with three co-trained networks.
#[derive(Parser, Debug)]
#[command(name = "wmu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cardiac-like dataset with dense labels, scribbles and splits.
    GenData(GenArgs),
    /// Derive scribbles from the dense labels of a dataset.
    Scribblify(ScribbleArgs),
    /// Train three networks with cross supervision.
    Train(TrainArgs),
    /// Train one network on scribbles only.
    TrainBaseline(TrainArgs),
    /// Score a checkpoint on a dataset split and print report CSV.
    Eval(EvalArgs),
    /// Segment one PGM image.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total samples, split 70/10/20 unless --train/--val/--test are given.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    coverage: f64,
}

#[derive(Args, Debug)]
struct ScribbleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    coverage: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML file of training options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated backbones, e.g. cnn,attn,ssm.
    #[arg(long)]
    backbones: Option<String>,
    /// Override any config key, e.g. --set iterations=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory to also write report.csv into.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a colour overlay as overlay.ppm.
    #[arg(long)]
    overlay: bool,
}

/// Error split by exit code: 1 for usage, 2 for everything at runtime.
enum Failure {
    Usage(String),
    Runtime(WmuError),
}

impl From<WmuError> for Failure {
    fn from(e: WmuError) -> Self {
        Failure::Runtime(e)
    }
}

fn threads() -> std::result::Result<usize, Failure> {
    match std::env::var("WMU_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("WMU_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

/// Config file plus flag overrides; any problem here is a usage error.
fn train_config(args: &TrainArgs, baseline: bool) -> std::result::Result<TrainConfig, Failure> {
    let usage = |e: WmuError| Failure::Usage(e.to_string());
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if baseline && args.backbones.is_none() {
        cfg.backbones = "cnn".into();
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = &args.backbones {
        cfg.backbones = b.clone();
    }
    cfg.validate().map_err(usage)?;
    let want = if baseline { 1 } else { 3 };
    let got = cfg.backbone_list().map_err(usage)?.len();
    if got != want {
        return Err(Failure::Usage(format!("expected {want} backbone(s), got {got} in {:?}", cfg.backbones)));
    }
    Ok(cfg)
}

fn print_summary(s: &FitSummary) {
    eprintln!(
        "best validation dice {:.4} at iteration {}; run written to {}",
        s.best_val_dice,
        s.best_iteration,
        s.run_dir.display()
    );
    if let Some(t) = &s.test {
        println!("test mean dice {:.4}", t.ensemble.mean_dice());
    }
}

const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [230, 60, 60], [60, 200, 80], [70, 110, 240], [240, 200, 40], [200, 80, 220]];

fn predict(args: &PredictArgs, threads: usize) -> Result<()> {
    let ens = load_ensemble(&args.ckpt)?;
    let arch = ens.nets[0].arch;
    let img = data::read_pgm(&args.image)?;
    if (img.width, img.height) != (arch.image_size, arch.image_size) {
        return Err(WmuError::data(
            &args.image,
            format!(
                "image is {}x{} but the checkpoint expects {}x{}",
                img.width, img.height, arch.image_size, arch.image_size
            ),
        ));
    }
    let scale = 1.0 / img.maxval as f32;
    let s = arch.image_size;
    let x = TensorGrid::from_vec(&[1, 1, s, s], img.data.iter().map(|&v| v as f32 * scale).collect());
    let mut nets: Vec<_> = ens.nets.iter().collect();
    let probs = trainer::par_map(&mut nets, threads, |n| predict_probs(n, &x, 1));
    let probs: Vec<_> = probs.into_iter().collect::<Result<_>>()?;
    let pred = argmax_maps(&ensemble_probs(&probs))?.remove(0);
    data::write_label_pgm(&args.out.join("pred.pgm"), &pred)?;
    if args.overlay {
        let mut rgb = Vec::with_capacity(3 * s * s);
        for (&g, &c) in img.data.iter().zip(&pred.data) {
            let base = (g as f32 * scale * 255.0) as f32;
            let col = PALETTE[c as usize % PALETTE.len()];
            for ch in col {
                let v = if c == 0 { base } else { 0.5 * base + 0.5 * ch as f32 };
                rgb.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        data::write_ppm(&args.out.join("overlay.ppm"), s, s, &rgb)?;
    }
    Ok(())
}

fn open_data(root: &Path) -> Result<DatasetIndex> {
    let index = DatasetIndex::open(root)?;
    index.verify_files()?;
    Ok(index)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let threads = threads()?;
    match cli.command {
        Command::GenData(a) => {
            let sizes = match (a.train, a.val, a.test) {
                (None, None, None) => SplitSizes::from_total(a.n),
                (t, v, s) => SplitSizes {
                    train: t.unwrap_or(0),
                    val: v.unwrap_or(0),
                    test: s.unwrap_or(0),
                },
            };
            let index = data::gen_synthetic(sizes, a.size, a.seed, a.coverage, &a.out)?;
            eprintln!(
                "wrote {} train / {} val / {} test samples to {}",
                index.train.len(),
                index.val.len(),
                index.test.len(),
                a.out.display()
            );
        }
        Command::Scribblify(a) => {
            let index = DatasetIndex::open(&a.data)?;
            let n = data::scribblify_dataset(&index, &a.out, a.coverage, a.seed)?;
            eprintln!("wrote {n} scribble maps to {}", a.out.join("scribbles").display());
        }
        Command::Train(a) => {
            let cfg = train_config(&a, false)?;
            let index = open_data(&a.data)?;
            print_summary(&trainer::fit(&cfg, &index, &a.out, Objective::CrossSupervised, threads)?);
        }
        Command::TrainBaseline(a) => {
            let cfg = train_config(&a, true)?;
            let index = open_data(&a.data)?;
            print_summary(&trainer::fit_baseline_pce(&cfg, &index, &a.out, threads)?);
        }
        Command::Eval(a) => {
            let split: Split = a.split.parse().map_err(|e: WmuError| Failure::Usage(e.to_string()))?;
            let index = DatasetIndex::open(&a.data)?;
            let csv = trainer::evaluate_checkpoint(&a.ckpt, &index, split, 8, threads)?;
            if let Some(out) = &a.out {
                data::write_text(&out.join(trainer::REPORT_CSV), &csv)?;
            }
            print!("{csv}");
        }
        Command::Predict(a) => predict(&a, threads)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
