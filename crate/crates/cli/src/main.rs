//! `cct`: command-line front end for the CCT radiograph pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cct_core::dataset::{ClassMap, Split};

#[derive(Parser, Debug)]
#[command(
    name = "cct",
    version,
    about = "Compact convolutional transformer for chest radiographs"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Log level for stderr output.
    #[arg(long, global = true, default_value = "info")]
    log: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Preprocess images and write the model-input previews.
    Preprocess(PreprocessArgs),
    /// Write augmented variants of one image.
    AugmentPreview(AugmentPreviewArgs),
    /// Build or split a dataset manifest.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of its dataset.
    Eval(EvalArgs),
    /// Per-image pixel statistics and their class densities.
    Stats(StatsArgs),
    /// Grad-CAM heatmap and overlay for one image.
    Explain(ExplainArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Input images (PNG or BMP).
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Run configuration supplying preprocessing settings and input size.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also write the native-resolution CLAHE and Ben Graham stages here.
    #[arg(long, value_name = "DIR")]
    dump_intermediate: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentPreviewArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of variants.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Scan `<root>/<ClassName>/*.png` into a manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_enum, default_value_t = ClassMapArg::Binary)]
        class_map: ClassMapArg,
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
    },
    /// Assign stratified train/val/test splits to a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output path; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ClassMapArg {
    Binary,
    FourClass,
}

impl From<ClassMapArg> for ClassMap {
    fn from(c: ClassMapArg) -> Self {
        match c {
            ClassMapArg::Binary => ClassMap::Binary,
            ClassMapArg::FourClass => ClassMap::FourClass,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Defaults to the config's `out_dir`, else `out`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Use this configuration's data section instead of the one stored in
    /// the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to test, falling back to val when the test split is empty.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Dataset root laid out as `<root>/<ClassName>/*.png`.
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    root: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ClassMapArg::Binary)]
    class_map: ClassMapArg,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum SaliencyArg {
    /// Grad-CAM at the last tokenizer feature map.
    Gradcam,
    /// Sequence-pooling weights on the token grid.
    Pool,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Target class index, or `auto` for the predicted class.
    #[arg(long, default_value = "auto")]
    class: String,
    /// Heatmap PNG; the overlay and JSON sidecar are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Heatmap opacity in the overlay.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = SaliencyArg::Gradcam)]
    method: SaliencyArg,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Print the table as JSON.
    #[arg(long)]
    json: bool,
}

/// Failure with the exit code it maps to.
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<cct_core::Error> for Failure {
    fn from(e: cct_core::Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Preprocess(a) => commands::preprocess(
            &a.images,
            a.config.as_deref(),
            &a.out_dir,
            a.dump_intermediate.as_deref(),
        ),
        Command::AugmentPreview(a) => {
            commands::augment_preview(&a.image, a.config.as_deref(), a.n, &a.out_dir)
        }
        Command::Dataset(DatasetCommand::Scan {
            root,
            class_map,
            out,
        }) => commands::dataset_scan(&root, class_map.into(), &out),
        Command::Dataset(DatasetCommand::Split {
            manifest,
            fractions,
            seed,
            out,
        }) => {
            let [t, v, e] = fractions[..] else {
                return Err(Failure::usage(format!(
                    "--fractions takes three comma-separated values, got {}",
                    fractions.len()
                )));
            };
            commands::dataset_split(&manifest, (t, v, e), seed, out.as_deref())
        }
        Command::Train(a) => commands::train(&a.config, a.out_dir, a.resume.as_deref()),
        Command::Eval(a) => commands::eval(
            &a.ckpt,
            a.config.as_deref(),
            a.split.map(Into::into),
            &a.out_dir,
        ),
        Command::Stats(a) => commands::stats(
            a.root.as_deref(),
            a.manifest.as_deref(),
            a.class_map.into(),
            &a.out_dir,
        ),
        Command::Explain(a) => {
            let class = match a.class.as_str() {
                "auto" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    Failure::usage(format!(
                        "--class must be a class index or `auto`, got `{s}`"
                    ))
                })?),
            };
            commands::explain(
                &a.image,
                &a.ckpt,
                class,
                &a.out,
                a.alpha,
                a.method == SaliencyArg::Pool,
            )
        }
        Command::Selftest(a) => commands::selftest(a.json),
    }
}
