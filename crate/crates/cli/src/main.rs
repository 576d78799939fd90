use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use voxmae::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use voxmae::data::{generate_dataset, read_dataset, write_dataset, Split, SplitCounts};
use voxmae::experiment::{emit_report, run_experiment, ExperimentConfig, InitStrategy};
use voxmae::mae::pretrain;
use voxmae::metrics::{evaluate, MetricReport};
use voxmae::seg::{finetune, SegModel, TrainedSegmenter};
use voxmae::selfcheck::{check_models, check_ops, CheckResult};
use voxmae::{Error, Init, ParamStore, Result};

/// Masked-autoencoder pretraining and segmentation fine-tuning on synthetic
/// volumetric phantoms.
#[derive(Parser, Debug)]
#[command(name = "voxmae", version)]
struct Cli {
    /// Seed for the command's random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config; sections `phantom`, `counts`, `mae`, `seg` plus the
    /// experiment keys at top level.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", visible_alias = "out-dir", default_value = "out")]
    out: PathBuf,
    /// Worker threads for experiment arms (0 = one per core). Never changes results.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset directory.
    GenData(GenData),
    /// Pretrain the encoder as a masked autoencoder on the unlabeled split.
    Pretrain(DataArgs),
    /// Fine-tune the segmenter on the labeled split.
    Finetune(Finetune),
    /// Score a fine-tuned checkpoint on a split.
    Evaluate(Evaluate),
    /// Run the scratch vs pretrained comparison across label fractions and seeds.
    Experiment,
    /// Finite-difference check of every op and both tiny models.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenData {
    /// Items per split: unlabeled,labeled,validation,test.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    counts: Option<Vec<usize>>,
    /// Volume extents: depth,height,width.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    extents: Option<Vec<usize>>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    data: DataArgs,
    /// `scratch` or `checkpoint:PATH`.
    #[arg(long, default_value = "scratch", value_parser = parse_init)]
    init: InitArg,
    /// Train only the decoder.
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Skip the whole-model checks.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Debug, Clone)]
enum InitArg {
    Scratch,
    Checkpoint(PathBuf),
}

fn parse_init(s: &str) -> std::result::Result<InitArg, String> {
    match s.split_once(':') {
        _ if s == "scratch" => Ok(InitArg::Scratch),
        Some(("checkpoint", path)) if !path.is_empty() => Ok(InitArg::Checkpoint(path.into())),
        _ => Err(format!("expected `scratch` or `checkpoint:PATH`, got `{s}`")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.as_str() == s)
        .ok_or_else(|| format!("unknown split `{s}`"))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

fn print_report(label: &str, r: &MetricReport) {
    let classes: Vec<String> = r.per_class.iter().enumerate().map(|(c, d)| format!("class {c} {d:.4}")).collect();
    println!("{label}: mean Dice {:.4} over {} items ({})", r.mean_dice, r.items, classes.join(", "));
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    match cli.command {
        Command::GenData(args) => {
            if let Some(c) = args.counts {
                cfg.counts = SplitCounts::new(c[0], c[1], c[2], c[3]);
            }
            if let Some(e) = args.extents {
                cfg.phantom.extents = [e[0], e[1], e[2]];
            }
            if let Some(s) = args.noise_sigma {
                cfg.phantom.noise_sigma = s;
            }
            let seed = cli.seed.unwrap_or(cfg.data_seed);
            let ds = generate_dataset(&cfg.phantom, cfg.counts, seed)?;
            write_dataset(out, &ds)?;
            println!("wrote {} items to {}", ds.items.len(), out.display());
        }
        Command::Pretrain(args) => {
            let ds = read_dataset(&args.data_dir)?;
            if let Some(s) = cli.seed {
                cfg.mae.seed = s;
            }
            let res = pretrain(&ds, &cfg.mae)?;
            let path = out.join("pretrain.ckpt");
            save_checkpoint(&path, &res.checkpoint)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in res.losses.iter().enumerate() {
                let _ = writeln!(csv, "{},{l}", e + 1);
            }
            write_text(&out.join("pretrain_loss.csv"), &csv)?;
            if let (Some(first), Some(last)) = (res.losses.first(), res.losses.last()) {
                println!("pretraining loss {first:.5} -> {last:.5} (ratio {:.3})", last / first);
            }
            println!("checkpoint: {}", path.display());
        }
        Command::Finetune(args) => {
            let ds = read_dataset(&args.data.data_dir)?;
            let mut seg = cfg.seg;
            if let Some(s) = cli.seed {
                seg.seed = s;
            }
            seg.freeze_encoder |= args.freeze_encoder;
            let pretrained = match &args.init {
                InitArg::Scratch => None,
                InitArg::Checkpoint(p) => Some(load_checkpoint::<f32>(p)?),
            };
            let res = finetune(&ds, &seg, pretrained.as_ref())?;
            let path = out.join("finetune.ckpt");
            save_checkpoint(&path, &res.checkpoint)?;
            let mut csv = String::from("epoch,train_loss,val_mean_dice\n");
            for (e, (l, d)) in res.train_loss.iter().zip(&res.val_dice).enumerate() {
                let _ = writeln!(csv, "{},{l},{d}", e + 1);
            }
            write_text(&out.join("curves.csv"), &csv)?;
            write_json(&out.join("seg_config.json"), &seg)?;
            println!(
                "fine-tuned {} epochs ({} parameters transferred); final validation mean Dice {:.4}",
                seg.epochs,
                res.transferred.len(),
                res.val_dice.last().copied().unwrap_or(f64::NAN)
            );
            println!("checkpoint: {}", path.display());
        }
        Command::Evaluate(args) => {
            let ds = read_dataset(&args.data.data_dir)?;
            let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
            if ckpt.provenance != Provenance::Finetuned {
                warn!("checkpoint provenance is {}, expected a fine-tuned model", ckpt.provenance);
            }
            if ckpt.encoder_fingerprint != cfg.seg.encoder.fingerprint() {
                return Err(Error::Config(format!(
                    "{} was trained with a different encoder config; pass the config used for fine-tuning",
                    args.checkpoint.display()
                )));
            }
            let mut params = ParamStore::<f32>::new();
            let model = SegModel::new(&mut params, &Init::new(0), &cfg.seg)?;
            ckpt.load_into(&mut params)?;
            let report = evaluate(&TrainedSegmenter { model, params }, &ds, ds.split(args.split))?;
            print_report(args.split.as_str(), &report);
            write_json(&out.join(format!("metrics-{}.json", args.split.as_str())), &report)?;
        }
        Command::Experiment => {
            if let Some(s) = cli.seed {
                cfg.data_seed = s;
            }
            let report = run_experiment(&cfg, cli.threads)?;
            emit_report(&report, out)?;
            for c in &report.cells {
                println!(
                    "{:>14} fraction {:<5} median test Dice {:.4}, median epochs to {} {}",
                    c.init.as_str(),
                    c.label_fraction,
                    c.median_test_dice,
                    report.threshold,
                    c.median_epochs_to_threshold.map_or("never".into(), |e| e.to_string())
                );
            }
            if cfg.inits.contains(&InitStrategy::MaePretrained) {
                info!("pretrained {} encoders", report.pretraining.len());
            }
            println!("published reference figures included ({})", report.reference.status);
            println!("report: {}", out.display());
        }
        Command::Gradcheck(args) => {
            let seed = cli.seed.unwrap_or(0);
            let mut results = check_ops(seed)?;
            if !args.ops_only {
                results.extend(check_models(seed)?);
            }
            let mut failed = Vec::new();
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:>10.3e} < {:.0e} {verdict}", r.name, r.max_rel_error, r.tolerance);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            write_json(&out.join("gradcheck.json"), &results as &Vec<CheckResult>)?;
            if !failed.is_empty() {
                return Err(Error::Contract(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
