//! Command implementations behind the `geodepth` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use geodepth::autodiff::gradcheck::{run_op_suite, CheckOutcome};
use geodepth::autodiff::{checkpoint, Mode, OpKind, ParamStore};
use geodepth::camera::{CameraIntrinsics, DepthMap};
use geodepth::config::Config;
use geodepth::dataio::{
    load_manifest, read_depth_png, read_manifest, read_rgb_png, train_seeds, val_seeds, write_corpus,
    write_depth_png, SceneSpec,
};
use geodepth::metrics::{aggregate, evaluate, MetricReport};
use geodepth::net::{gradcheck_model, CompletionNet, SampleRef};
use geodepth::train::{format_log, train};
use geodepth::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 usage, 2 data or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::CheckFailed(_) | CliError::Core(Error::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "geodepth", version, about = "Geometry-guided depth completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict a dense depth image for one sample.
    Infer(InferArgs),
    /// Dump per-point geometric embeddings of one sparse depth image.
    Embed(EmbedArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub count: usize,
    /// First scene seed within the split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Valid pixels kept in each sparse map.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub sparse: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Output 16-bit depth image.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sparse: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Output text dump.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Negate the backward rule of one op, to check that the suite notices.
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            Ok(Config::read(p)?)
        }
        None => Ok(Config::default()),
    }
}

/// Uses `path` if given, else the config saved beside `checkpoint` by `train`,
/// else the defaults.
fn model_config(path: Option<&Path>, checkpoint: &Path) -> CliResult<Config> {
    if path.is_none() {
        let beside = checkpoint.with_file_name(CONFIG_FILE);
        if beside.is_file() {
            return Ok(Config::read(&beside)?);
        }
    }
    load_config(path)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<PathBuf> {
    let spec = SceneSpec {
        height: args.height,
        width: args.width,
        sparse_count: args.samples,
        ..SceneSpec::default()
    };
    spec.validate()?;
    if args.samples > args.height * args.width {
        return Err(CliError::Usage(format!(
            "--samples {} exceeds the {} pixels of a scene",
            args.samples,
            args.height * args.width
        )));
    }
    let seeds = match args.split {
        Split::Train => train_seeds(args.seed, args.count),
        Split::Val => val_seeds(args.seed, args.count),
    };
    Ok(write_corpus(&args.out, &spec, &seeds)?)
}

/// Builds the network for `config` and loads `checkpoint` into it.
pub fn load_model(config: &Config, checkpoint: &Path) -> CliResult<(CompletionNet, ParamStore<f32>)> {
    require_file(checkpoint, "checkpoint")?;
    let mut store = ParamStore::new();
    let net = CompletionNet::new(&mut store, config.net.clone(), 0)?;
    checkpoint::load_into(&mut store, checkpoint)?;
    Ok((net, store))
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Trains from scratch; the checkpoint is rewritten after every epoch.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutput> {
    let config = load_config(args.config.as_deref())?;
    require_file(&args.manifest, "manifest")?;
    let samples = load_manifest(&args.manifest)?;
    let (h, w) = (samples[0].gt.height(), samples[0].gt.width());
    if let Some(i) = samples.iter().position(|s| (s.gt.height(), s.gt.width()) != (h, w)) {
        return Err(Error::Contract(format!("sample {i} has a different extent than sample 0")).into());
    }
    geodepth::net::check_extent(h, w)?;
    let mut store = ParamStore::new();
    let net = CompletionNet::new(&mut store, config.net.clone(), args.seed)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write(&args.out.join(CONFIG_FILE), &config.to_text())?;
    let ck = args.out.join(CHECKPOINT_FILE);
    let log_path = args.out.join(LOSS_LOG_FILE);
    let log = train(&net, &mut store, &samples, &config.train, args.seed, |epoch, store, log| {
        checkpoint::save(store, &ck)?;
        fs::write(&log_path, format_log(log)).map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {epoch}: {} steps, loss {:e}", log.len(), log.last().map_or(f64::NAN, |r| r.loss));
        Ok(())
    })?;
    write(&log_path, &format_log(&log))?;
    Ok(TrainOutput {
        checkpoint: ck,
        loss_log: log_path,
    })
}

/// Per-image and pooled metric table.
pub fn report_text(names: &[String], reports: &[MetricReport]) -> CliResult<String> {
    let pooled = aggregate(reports)?;
    let mut s = format!("index\tsample\t{}\n", MetricReport::record_header());
    for (i, (n, r)) in names.iter().zip(reports).enumerate() {
        writeln!(s, "{i}\t{n}\t{}", r.to_record()).unwrap();
    }
    writeln!(s, "pooled\tall\t{}", pooled.to_record()).unwrap();
    s.push_str(&pooled.to_text());
    Ok(s)
}

/// Evaluates predictions against ground truth, one report per pair.
pub fn evaluate_all(preds: &[DepthMap], gts: &[DepthMap]) -> CliResult<Vec<MetricReport>> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| evaluate(p, g).map_err(CliError::from))
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<(MetricReport, String)> {
    let config = model_config(args.config.as_deref(), &args.checkpoint)?;
    require_file(&args.manifest, "manifest")?;
    let entries = read_manifest(&args.manifest)?;
    let samples = load_manifest(&args.manifest)?;
    let (net, mut store) = load_model(&config, &args.checkpoint)?;
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let p = net
            .predict(&mut store, &[s.as_ref()])
            .map_err(|e| Error::Contract(format!("sample {i} ({}): {e}", entries[i].rgb.display())))?;
        preds.extend(p);
    }
    let gts: Vec<DepthMap> = samples.into_iter().map(|s| s.gt).collect();
    let reports = evaluate_all(&preds, &gts)?;
    let names: Vec<String> = entries
        .iter()
        .map(|e| e.rgb.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
        .collect();
    let text = report_text(&names, &reports)?;
    write(&args.out, &text)?;
    Ok((aggregate(&reports)?, text))
}

pub fn cmd_infer(args: &InferArgs) -> CliResult<DepthMap> {
    let config = model_config(args.config.as_deref(), &args.checkpoint)?;
    for (p, what) in [(&args.rgb, "rgb"), (&args.sparse, "sparse"), (&args.intrinsics, "intrinsics")] {
        require_file(p, what)?;
    }
    let rgb = read_rgb_png(&args.rgb)?;
    let sparse = read_depth_png(&args.sparse)?;
    let k = CameraIntrinsics::read(&args.intrinsics)?;
    let (net, mut store) = load_model(&config, &args.checkpoint)?;
    let pred = net
        .predict(
            &mut store,
            &[SampleRef {
                rgb: &rgb,
                sparse: &sparse,
                intrinsics: &k,
            }],
        )?
        .remove(0);
    write_depth_png(&pred, &args.out)?;
    Ok(pred)
}

/// One line per point: `u v x y z` followed by the embedding values.
pub fn cmd_embed(args: &EmbedArgs) -> CliResult<usize> {
    let config = model_config(args.config.as_deref(), &args.checkpoint)?;
    require_file(&args.sparse, "sparse")?;
    require_file(&args.intrinsics, "intrinsics")?;
    let sparse = read_depth_png(&args.sparse)?;
    let k = CameraIntrinsics::read(&args.intrinsics)?;
    let (net, store) = load_model(&config, &args.checkpoint)?;
    let dgr = net
        .dgr
        .as_ref()
        .ok_or_else(|| CliError::Usage("embed needs a model with geometry_input=embedding".into()))?;
    let mut store = store.cast::<f64>();
    let pts = geodepth::camera::backproject(&sparse, &k)?;
    let emb = dgr.embed(&mut store, &pts, Mode::Eval)?;
    let mut s = String::new();
    for i in 0..pts.len() {
        let (u, v) = pts.pixel[i];
        let [x, y, z] = pts.coords[i];
        write!(s, "{u} {v} {x:?} {y:?} {z:?}").unwrap();
        for e in emb.row(i) {
            write!(s, " {e:?}").unwrap();
        }
        s.push('\n');
    }
    write(&args.out, &s)?;
    Ok(pts.len())
}

/// Points in the end-to-end model check.
pub const MODEL_CHECK_PARAMS: usize = 10;

pub fn gradcheck_outcomes(args: &GradcheckArgs) -> CliResult<Vec<CheckOutcome>> {
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
        })?),
        None => None,
    };
    let mut out = run_op_suite(args.instances, args.seed, fault);
    out.push(match gradcheck_model(args.seed, MODEL_CHECK_PARAMS, fault) {
        Ok(o) => o,
        Err(e) => CheckOutcome {
            name: "model".into(),
            instances: MODEL_CHECK_PARAMS,
            max_rel_err: f64::INFINITY,
            tolerance: geodepth::net::MODEL_TOLERANCE,
            error: Some(e.to_string()),
        },
    });
    Ok(out)
}

pub fn gradcheck_table(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::from("op\tinstances\tmax_rel_err\ttolerance\tresult\n");
    for o in outcomes {
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        write!(s, "{}\t{}\t{:.3e}\t{:.0e}\t{verdict}", o.name, o.instances, o.max_rel_err, o.tolerance).unwrap();
        if let Some(e) = &o.error {
            write!(s, "\t{e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<String> {
    let outcomes = gradcheck_outcomes(args)?;
    let table = gradcheck_table(&outcomes);
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(CliError::CheckFailed(format!("{table}gradient check failed for: {}", failed.join(", "))))
    }
}

/// Runs a parsed command, printing its results to standard output.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let m = cmd_synth(&a)?;
            println!("wrote {} scenes, manifest {}", a.count, m.display());
        }
        Command::Train(a) => {
            let o = cmd_train(&a)?;
            println!("checkpoint {}\nloss log {}", o.checkpoint.display(), o.loss_log.display());
        }
        Command::Eval(a) => {
            let (_, text) = cmd_eval(&a)?;
            print!("{text}");
        }
        Command::Infer(a) => {
            cmd_infer(&a)?;
            println!("wrote {}", a.out.display());
        }
        Command::Embed(a) => {
            let n = cmd_embed(&a)?;
            println!("wrote {n} points to {}", a.out.display());
        }
        Command::Gradcheck(a) => print!("{}", cmd_gradcheck(&a)?),
    }
    Ok(())
}
