use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tripinet::backbone::BackbonePreset;
use tripinet::config::{parse_entries, RunConfig};
use tripinet::harness::{self, run_root, AblationAxis};
use tripinet::train::RunDir;
use tripinet::{Error, Result};

#[derive(Parser)]
#[command(name = "tripinet", version, about = "Image manipulation localization: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate, inspect or resume from.
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (defaults to a directory under the run root).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Backbone preset: vgg16, vgg11 or desk.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; `--ckpt` resumes from a saved state.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score the test split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write binarized predicted masks.
        #[arg(long)]
        save_masks: bool,
    },
    /// Score the test split under every JPEG and blur attack.
    Robustness {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score every variant along one component axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// fusion, pooling, loss or backbone.
        #[arg(long)]
        axis: String,
    },
    /// Write per-channel feature maps of one encoder stage as PNGs.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Stage index, 1 to 5.
        #[arg(long)]
        stage: usize,
    },
    /// Generate the synthetic forgery dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let entries = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            parse_entries(&text)?
        }
        None => BTreeMap::new(),
    };
    let preset = c.preset.as_deref().map(str::parse::<BackbonePreset>).transpose()?;
    RunConfig::with_overrides(entries, c.seed, preset)
}

fn out_dir(c: &Common, default_name: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| run_root().join(default_name))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("`--{flag}` is required for this command")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = run_config(&common)?;
            let name = format!("{}-seed{}", cfg.model.preset, cfg.model.seed);
            let run = RunDir::new(out_dir(&common, &name))?;
            let summary = harness::cmd_train(&cfg, &run, common.data.as_deref(), common.ckpt.as_deref())?;
            let last = summary.log.last();
            info!("trained {} epochs into {}", last.map_or(0, |r| r.epoch), run.root.display());
            println!("{}", run.ckpt_best().display());
        }
        Command::Eval { common, save_masks } => {
            let out = out_dir(&common, "eval");
            let report =
                harness::cmd_eval(required(&common.ckpt, "ckpt")?, required(&common.data, "data")?, &out, save_masks)?;
            println!("mean_f1={} mean_iou={}", report.mean_f1(), report.mean_iou());
        }
        Command::Robustness { common } => {
            let out = out_dir(&common, "robustness");
            let rows = harness::cmd_robustness(required(&common.ckpt, "ckpt")?, required(&common.data, "data")?, &out)?;
            print!("{}", harness::robustness_csv(&rows));
        }
        Command::Ablate { common, axis } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = run_config(&common)?;
            let out = out_dir(&common, &format!("ablate-{}", format!("{axis:?}").to_lowercase()));
            let rows = harness::cmd_ablate(&cfg, axis, &out, common.data.as_deref())?;
            print!("{}", harness::ablation_csv(axis, cfg.model.seed, &rows));
        }
        Command::DumpFeatures { common, image, stage } => {
            let out = out_dir(&common, "features");
            let counts = harness::cmd_dump_features(required(&common.ckpt, "ckpt")?, &image, stage, &out)?;
            for (name, n) in counts {
                println!("{name}: {n} channels");
            }
        }
        Command::GenData { common } => {
            let cfg = run_config(&common)?;
            let out = common.data.clone().or(common.out.clone()).unwrap_or_else(|| run_root().join("data"));
            let ds = harness::cmd_gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
