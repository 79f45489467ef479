mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "vuga", version, about = "Blind quality assessment for omnidirectional images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering shared by every command that builds a model.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub backbone_weights: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Resolution,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest; writes a run directory.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Independent runs with seeds seed, seed+1, ...; reports median SRCC and PLCC.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Replace an existing run directory with the same config and seed.
        #[arg(long)]
        force: bool,
    },
    /// Score a split of a manifest and write eval_result.json.
    Eval {
        /// Checkpoint file, or `best` / `last` of a run directory.
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run directory used to resolve `best` / `last` (default: newest run).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        backbone_weights: Option<PathBuf>,
        /// Output file (default: eval_result.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print `image_id<TAB>score` for each image.
    Predict {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        backbone_weights: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train on 80% of one database and test on all of another.
    Crossdb {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Select image pairs that separate two models.
    Gmad {
        /// Defender scores: eval_result.json or `image_id<TAB>score` lines.
        #[arg(long)]
        defender: PathBuf,
        #[arg(long)]
        attacker: PathBuf,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        /// Defender score tolerance (default: 1% of its range).
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 1)]
        pairs_per_level: usize,
        /// Manifest with image paths; enables montage output.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a family of configurations.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resolutions for `--kind resolution`.
        #[arg(long, value_delimiter = ',', default_value = "224,512,768,1024")]
        resolutions: Vec<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Write seeded stand-in backbone weights.
    InitBackbone {
        #[arg(long, default_value = "swinv2_t")]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic blur-severity dataset (PNG files plus manifest).
    SynthBlur {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "blur")]
        name: String,
        #[arg(long, default_value_t = 16)]
        levels: usize,
        /// Blur sigma increment between levels.
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        height: usize,
        #[arg(long, default_value_t = 448)]
        width: usize,
    },
    /// List configuration keys.
    Keys,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            manifest,
            cfg,
            repeats,
            force,
        } => commands::train(&manifest, &cfg, repeats, force),
        Command::Eval {
            ckpt,
            manifest,
            split,
            run_dir,
            backbone_weights,
            out,
        } => commands::eval(&ckpt, &manifest, split, run_dir.as_deref(), backbone_weights.as_deref(), out.as_deref()),
        Command::Predict {
            ckpt,
            run_dir,
            backbone_weights,
            images,
        } => commands::predict(&ckpt, run_dir.as_deref(), backbone_weights.as_deref(), &images),
        Command::Crossdb { train, test, cfg, force } => commands::crossdb(&train, &test, &cfg, force),
        Command::Gmad {
            defender,
            attacker,
            levels,
            tolerance,
            pairs_per_level,
            images,
            out,
        } => commands::gmad(&defender, &attacker, levels, tolerance, pairs_per_level, images.as_deref(), &out),
        Command::Sweep {
            kind,
            manifest,
            cfg,
            resolutions,
            force,
        } => commands::sweep(kind, &manifest, &cfg, &resolutions, force),
        Command::InitBackbone { arch, seed, out } => commands::init_backbone(&arch, seed, &out),
        Command::SynthBlur {
            out,
            name,
            levels,
            step,
            seed,
            height,
            width,
        } => commands::synth_blur(&out, &name, levels, step, seed, height, width),
        Command::Keys => {
            for (k, doc) in vuga::config::KEYS {
                println!("{k}\t{doc}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
