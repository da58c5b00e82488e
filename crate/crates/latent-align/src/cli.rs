//! Argument parsing, dispatch and run manifests.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Parser, Debug)]
#[command(
    name = "latent-align",
    version,
    about = "Measure, train and evaluate alignment between frozen embedding spaces"
)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "LATENT_ALIGN_THREADS")]
    pub threads: Option<usize>,

    /// Directory that receives the run manifest (run.json).
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// Re-run the command recorded in a run manifest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Silence progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// CKA between two embedding files.
    Cka(CkaArgs),
    /// Rank every vision × text encoder pair by CKA.
    RankPairs(RankPairsArgs),
    /// Synthetic CKA vs. minimum CLIP-loss sweep.
    ToySweep(ToySweepArgs),
    /// Fit one linear map from A to B under the CLIP loss.
    FitLinear(FitLinearArgs),
    /// Train projector stacks with symmetric InfoNCE.
    Train(TrainArgs),
    /// Concept-balanced selection from a caption-embedding pool.
    Curate(CurateArgs),
    /// Zero-shot classification accuracy.
    EvalClassify(EvalClassifyArgs),
    /// Image/text retrieval recall@k.
    EvalRetrieve(EvalRetrieveArgs),
    /// Zero-shot patch segmentation mIoU.
    EvalSegment(EvalSegmentArgs),
    /// Describe an EMBF file, checkpoint or data directory.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Cka(_) => "cka",
            Command::RankPairs(_) => "rank-pairs",
            Command::ToySweep(_) => "toy-sweep",
            Command::FitLinear(_) => "fit-linear",
            Command::Train(_) => "train",
            Command::Curate(_) => "curate",
            Command::EvalClassify(_) => "eval-classify",
            Command::EvalRetrieve(_) => "eval-retrieve",
            Command::EvalSegment(_) => "eval-segment",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelArg {
    Linear,
    Rbf,
    RbfMedian,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOpts {
    #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
    pub kernel: KernelArg,
    /// Bandwidth for `--kernel rbf`.
    #[arg(long, required_if_eq("kernel", "rbf"))]
    pub gamma: Option<f64>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub kernel: KernelOpts,
    /// Reorder B's rows to A's item ids using the sidecar manifests.
    #[arg(long)]
    pub align: bool,
    /// Use the Gram/HSIC route for the linear kernel.
    #[arg(long)]
    pub gram: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPairsArgs {
    /// Vision candidate as NAME=PATH (repeatable).
    #[arg(long = "vision", value_name = "NAME=PATH", required = true)]
    pub vision: Vec<String>,
    /// Text candidate as NAME=PATH (repeatable).
    #[arg(long = "text", value_name = "NAME=PATH", required = true)]
    pub text: Vec<String>,
    #[command(flatten)]
    pub kernel: KernelOpts,
    /// Also write the ranking as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySweepArgs {
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Vectors per set.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// MLP hidden width (default 16·d).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Derives both the noise and weight seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub weight_seed: Option<u64>,
    /// Per-instance rows: instance_index, cka, min_loss, final_loss.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Identity,
    Uniform,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLinearArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub align: bool,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Identity)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the fitted d×d map as EMBF.
    #[arg(long)]
    pub out_map: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Adamw,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotArg {
    Identity,
    Mlp,
    Token,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalArg {
    Identity,
    Mlp,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Pairs directory with pooled vision.embf / text.embf.
    #[arg(long, required_unless_present = "tokens_vision", conflicts_with_all = ["tokens_vision", "tokens_text"])]
    pub pairs: Option<PathBuf>,
    /// Vision token directory (or pooled .embf).
    #[arg(long, requires = "tokens_text")]
    pub tokens_vision: Option<PathBuf>,
    /// Text token directory (or pooled .embf).
    #[arg(long, requires = "tokens_vision")]
    pub tokens_text: Option<PathBuf>,
    #[arg(long, default_value_t = 768)]
    pub d_out: usize,
    /// Hidden width of every two-layer branch (default 2·d_out).
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub warmup_epochs: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Vision uses only the CLS token; text uses its pooled vector.
    #[arg(long)]
    pub pooled_only: bool,
    #[arg(long)]
    pub freeze_temperature: bool,
    #[arg(long, value_enum, default_value_t = SlotArg::Token)]
    pub vision_local: SlotArg,
    #[arg(long, value_enum, default_value_t = SlotArg::Token)]
    pub vision_cls: SlotArg,
    #[arg(long, value_enum, default_value_t = SlotArg::Token)]
    pub text_local: SlotArg,
    #[arg(long, value_enum, default_value_t = GlobalArg::Mlp)]
    pub text_global: GlobalArg,
    /// Checkpoint rewritten after every epoch.
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Checkpoint of the lowest-loss epoch.
    #[arg(long)]
    pub best_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report_json: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurateArgs {
    /// Directory of `<concept>.embf` few-shot image embeddings.
    #[arg(long)]
    pub few_shot: PathBuf,
    /// Caption-embedding pool (.embf with optional sidecar manifest).
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub quota: usize,
    #[arg(long, default_value_t = 25_000)]
    pub top_k: usize,
    #[arg(long, default_value_t = 128)]
    pub support_cap: usize,
    /// L2-normalize pool rows that are not flagged as normalized.
    #[arg(long)]
    pub normalize_pool: bool,
    /// Full assignments as JSON (otherwise printed on stdout).
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long)]
    pub rarity_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalClassifyArgs {
    /// Image bundles; manifest `label` holds the class id.
    #[arg(long)]
    pub images: PathBuf,
    /// Prompt bundles; manifest `label` names the class each prompt describes.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Projector checkpoint (default: identity stack).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub per_item: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRetrieveArgs {
    #[arg(long, required_unless_present = "vision", conflicts_with_all = ["vision", "text"])]
    pub pairs: Option<PathBuf>,
    #[arg(long, requires = "text")]
    pub vision: Option<PathBuf>,
    #[arg(long, requires = "vision")]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    pub ks: Vec<usize>,
    /// Partner rank of every query, both directions.
    #[arg(long)]
    pub per_item: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSegmentArgs {
    /// Segmentation directory (token layout plus masks.jsonl).
    #[arg(long)]
    pub images: PathBuf,
    /// Class prompt bundles; manifest `label` is the numeric class id.
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub background: u32,
    /// Score every declared class, not only those in each image.
    #[arg(long)]
    pub all_classes: bool,
    /// Bilinear upsampling of similarity maps instead of nearest on labels.
    #[arg(long)]
    pub bilinear: bool,
    #[arg(long)]
    pub per_item: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// What `run.json` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub argv: Vec<String>,
    pub threads: Option<usize>,
    pub command: Command,
}

/// Progress output on stderr.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub quiet: bool,
}

impl Ctx {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Errors detected after parsing that still count as usage errors.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn write_manifest(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(RUN_MANIFEST);
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn resolve(cli: Cli, argv: &[OsString]) -> anyhow::Result<(RunManifest, Ctx, PathBuf)> {
    let ctx = Ctx { quiet: cli.quiet };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let manifest = match (cli.command, cli.config) {
        (Some(_), Some(_)) => {
            return Err(UsageError(
                "--config replays a recorded command; do not also give a subcommand".into(),
            )
            .into())
        }
        (None, None) => return Err(UsageError("no subcommand given (see --help)".into()).into()),
        (Some(command), None) => RunManifest {
            tool: "latent-align".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv,
            threads: cli.threads,
            command,
        },
        (None, Some(path)) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            let mut recorded: RunManifest = serde_json::from_str(&text)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            recorded.threads = cli.threads.or(recorded.threads);
            recorded.argv = argv;
            recorded
        }
    };
    Ok((manifest, ctx, cli.out_dir))
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = resolve(cli, &argv).and_then(|(manifest, ctx, out_dir)| {
        configure_threads(manifest.threads)?;
        write_manifest(&out_dir, &manifest)?;
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        commands::dispatch(&manifest.command, &ctx, &mut out)?;
        out.flush()?;
        Ok(())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {u}");
                eprintln!("\nFor more information, try '--help'.");
                EXIT_USAGE
            } else {
                eprintln!("error: {e:#}");
                EXIT_DOMAIN
            }
        }
    }
}
