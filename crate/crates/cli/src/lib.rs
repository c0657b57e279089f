//! Subcommands behind the `graphfuse` binary. Each command writes its outputs
//! under one root and a JSON run manifest describing how they were made.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use graphfuse::checkpoint::Checkpoint;
use graphfuse::config::RunConfig;
use graphfuse::dataset::{self, SourcePair};
use graphfuse::image::{load_image, save_image, Image};
use graphfuse::metrics::{evaluate_pair, MetricReport};
use graphfuse::net::{default_patch_size, fuse, fuse_color, NetworkConfig};
use graphfuse::train::{history_csv, train, TrainConfig, TrainOptions, CHECKPOINT_FILE};
use graphfuse::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "graphfuse", version, about = "Infrared/visible image fusion with dynamic graph convolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut aligned source pairs into training crops.
    Prepare(PrepareArgs),
    /// Train a fusion network on prepared crops.
    Train(TrainArgs),
    /// Fuse an image pair, or every pair of two directories.
    Fuse(FuseArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[arg(long, requires = "vis_dir", conflicts_with = "pairs")]
    pub ir_dir: Option<PathBuf>,
    #[arg(long, requires = "ir_dir")]
    pub vis_dir: Option<PathBuf>,
    /// Tab-separated `ir<TAB>vis` list instead of two directories.
    #[arg(long, required_unless_present = "ir_dir")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub stride: usize,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat TOML file with training and network keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use this k in every block.
    #[arg(long)]
    pub fixed_k: Option<usize>,
    /// Dilation 1 in every block.
    #[arg(long)]
    pub no_dilation: bool,
    /// Drop the inter-modal branch.
    #[arg(long)]
    pub no_inter_modal: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Infrared image, or a directory of them.
    #[arg(long)]
    pub ir: PathBuf,
    /// Visible image (gray or RGB), or a directory of them.
    #[arg(long)]
    pub vis: PathBuf,
    /// Output file, or output directory when the inputs are directories.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fused_dir: PathBuf,
    #[arg(long)]
    pub ir_dir: PathBuf,
    #[arg(long)]
    pub vis_dir: PathBuf,
    /// Report CSV; the manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl CliError {
    /// 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(Error::Config(_)) => 2,
            CliError::Run(Error::Numeric(_)) => 4,
            CliError::Run(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Record of one command invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub checkpoint: Option<String>,
    /// Output path (relative to the manifest) to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            seed: None,
            inputs: Vec::new(),
            checkpoint: None,
            outputs: BTreeMap::new(),
        }
    }

    fn record_output(&mut self, root: &Path, file: &Path) -> CliResult<()> {
        let bytes = fs::read(file).map_err(|e| Error::Io {
            path: file.to_path_buf(),
            source: e,
        })?;
        let rel = file.strip_prefix(root).unwrap_or(file);
        self.outputs.insert(rel.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, format!("{text}\n").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| {
        CliError::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Fuse(a) => cmd_fuse(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    }
}

pub fn cmd_prepare(args: &PrepareArgs) -> CliResult<RunManifest> {
    if args.size == 0 || args.stride == 0 {
        return Err(CliError::Usage("--size and --stride must be positive".into()));
    }
    let pairs: Vec<SourcePair> = match (&args.ir_dir, &args.vis_dir, &args.pairs) {
        (Some(ir), Some(vis), None) => dataset::pair_directories(ir, vis)?,
        (None, None, Some(list)) => dataset::read_pair_list(list)?,
        _ => return Err(CliError::Usage("give --ir-dir with --vis-dir, or --pairs".into())),
    };
    create_dir(&args.out)?;
    let names = dataset::prepare_crops(&pairs, &args.out, args.size, args.stride)?;

    let mut m = RunManifest::new("prepare", serde_json::json!({ "size": args.size, "stride": args.stride }));
    m.inputs = pairs
        .iter()
        .flat_map(|p| [display(&p.ir), display(&p.vis)])
        .collect();
    for name in &names {
        for sub in [dataset::IR_DIR, dataset::VIS_DIR] {
            m.record_output(&args.out, &args.out.join(sub).join(name))?;
        }
    }
    m.write(&args.out.join(MANIFEST_FILE))?;
    println!("wrote {} crop pairs from {} sources to {}", names.len(), pairs.len(), args.out.display());
    Ok(m)
}

/// Resolves defaults, then the config file, then flags.
pub fn resolve_train_config(args: &TrainArgs, data_dims: (usize, usize)) -> CliResult<(NetworkConfig, TrainConfig)> {
    let file = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        epochs: args.epochs,
        max_steps: args.max_steps,
        seed: args.seed,
        lr0: args.lr0,
        decay: args.decay,
        batch: args.batch,
        lambda: args.lambda,
        feature_dim: args.feature_dim,
        patch_size: args.patch_size,
        fixed_k: args.fixed_k,
        no_dilation: args.no_dilation.then_some(true),
        no_inter_modal: args.no_inter_modal.then_some(true),
        ..RunConfig::default()
    };
    let mut net = NetworkConfig {
        patch_size: default_patch_size(data_dims.0, data_dims.1),
        ..NetworkConfig::default()
    };
    let mut tc = TrainConfig::default();
    file.overlay(flags).apply(&mut net, &mut tc)?;
    Ok((net, tc))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<RunManifest> {
    let data = dataset::load_training_set(&args.data)?;
    let dims = data[0].ir.dims();
    let (net, tc) = resolve_train_config(args, dims)?;
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load_expecting(p, &net)?),
        None => None,
    };
    create_dir(&args.out)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume,
    };
    let outcome = train(&data, &net, &tc, &opts)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        // nothing left to run: persist the resumed state unchanged
        outcome.checkpoint(&net).save(&ckpt_path)?;
    }
    let hist_path = args.out.join(HISTORY_FILE);
    write_file(&hist_path, history_csv(&outcome.history).as_bytes())?;

    let mut m = RunManifest::new(
        "train",
        serde_json::json!({
            "network": net,
            "training": tc,
            "executed_schedule": net.executed_schedule(),
        }),
    );
    m.seed = Some(tc.seed);
    m.inputs = data
        .iter()
        .map(|p| p.name.clone())
        .map(|n| display(&args.data.join(dataset::IR_DIR).join(format!("{n}.png"))))
        .collect();
    if let Some(c) = &args.config {
        m.inputs.push(display(c));
    }
    m.checkpoint = Some(display(&ckpt_path));
    m.record_output(&args.out, &ckpt_path)?;
    m.record_output(&args.out, &hist_path)?;
    m.write(&args.out.join(MANIFEST_FILE))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "trained {} steps ({} epochs): loss {:.6} -> {:.6}",
            outcome.steps, outcome.epochs_completed, first.loss.total, last.loss.total
        );
    }
    Ok(m)
}

fn fuse_one(ck: &Checkpoint, ir_path: &Path, vis_path: &Path) -> CliResult<Image> {
    let ir = dataset::to_gray(load_image(ir_path)?);
    let vis = load_image(vis_path)?;
    let out = if vis.channels() == 3 {
        fuse_color(&ir, &vis, &ck.params, &ck.config)?
    } else {
        fuse(&ir, &vis, &ck.params, &ck.config)?
    };
    Ok(out)
}

pub fn cmd_fuse(args: &FuseArgs) -> CliResult<RunManifest> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let mut m = RunManifest::new("fuse", serde_json::to_value(&ck.config).expect("config serializes"));
    m.checkpoint = Some(display(&args.ckpt));
    let manifest_path;
    match (args.ir.is_dir(), args.vis.is_dir()) {
        (true, true) => {
            let pairs = dataset::pair_directories(&args.ir, &args.vis)?;
            create_dir(&args.out)?;
            for p in &pairs {
                let fused = fuse_one(&ck, &p.ir, &p.vis)?;
                let dst = args.out.join(format!("{}.png", p.name));
                save_image(&fused, &dst)?;
                m.inputs.extend([display(&p.ir), display(&p.vis)]);
                m.record_output(&args.out, &dst)?;
            }
            manifest_path = args.out.join(MANIFEST_FILE);
        }
        (false, false) => {
            let fused = fuse_one(&ck, &args.ir, &args.vis)?;
            if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_image(&fused, &args.out)?;
            m.inputs = vec![display(&args.ir), display(&args.vis)];
            let root = args.out.parent().unwrap_or(Path::new(""));
            m.record_output(root, &args.out)?;
            manifest_path = sibling_manifest(&args.out);
        }
        _ => return Err(CliError::Usage("--ir and --vis must both be files or both be directories".into())),
    }
    m.write(&manifest_path)?;
    println!("fused {} image(s) into {}", m.outputs.len(), args.out.display());
    Ok(m)
}

/// `report.csv` → `report.manifest.json`
pub fn sibling_manifest(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<RunManifest> {
    let fused_vs_ir = dataset::pair_directories(&args.fused_dir, &args.ir_dir)?;
    let fused_vs_vis = dataset::pair_directories(&args.fused_dir, &args.vis_dir)?;
    let mut rows = Vec::with_capacity(fused_vs_ir.len());
    let mut m = RunManifest::new("eval", serde_json::json!({ "metrics": ["ssim", "psnr", "cc", "nabf"] }));
    for (a, b) in fused_vs_ir.iter().zip(&fused_vs_vis) {
        let fused = load_image(&a.ir)?;
        let ir = load_image(&a.vis)?;
        let vis = load_image(&b.vis)?;
        if fused.dims() != ir.dims() || fused.dims() != vis.dims() {
            return Err(Error::Data(format!("{}: fused and source sizes differ", a.name)).into());
        }
        rows.push(evaluate_pair(&a.name, &fused, &ir, &vis)?);
        m.inputs.extend([display(&a.ir), display(&a.vis), display(&b.vis)]);
    }
    let report = MetricReport::new(rows)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, report.to_csv().as_bytes())?;
    if !report.flagged.is_empty() {
        eprintln!("correlation undefined (constant image) for: {}", report.flagged.join(", "));
    }
    m.record_output(args.out.parent().unwrap_or(Path::new("")), &args.out)?;
    m.write(&sibling_manifest(&args.out))?;
    println!("evaluated {} pairs into {}", report.pairs.len(), args.out.display());
    Ok(m)
}
