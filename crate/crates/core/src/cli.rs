//! `collabctx` command line: synth, preprocess, train, eval, inspect.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{
    cold_item_split, cold_item_split_count, k_core_filter, load_embeddings, load_interactions, read_embedding_file,
    read_embedding_header, retain_items, SplitBundle, SplitManifest, SplitRatios,
};
use crate::error::{Error, Result};
use crate::eval::{export_projections, full_ranking, EvalReport, EvalSplit, InferenceMode, DEFAULT_KS};
use crate::io::{sha256_file, write_atomic};
use crate::objective::UniformityMode;
use crate::synth::{generate_planted, PlantedConfig};
use crate::trainer::{
    read_checkpoint_header, read_resume, train_from, write_resume, EpochRecord, PhaseRecord, TrainConfig,
    TrainObserver, TrainState, TrainedModel, TrainingData,
};

pub const MODEL_FILE: &str = "model.ccmdl";
pub const RESUME_FILE: &str = "resume.ccmdl";
pub const METRICS_FILE: &str = "metrics.log";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_MANIFEST_FILE: &str = "split.json";

#[derive(Debug, Parser)]
#[command(
    name = "collabctx",
    version,
    about = "Collaborative tutoring over frozen item text embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted-cluster interactions and item embeddings.
    Synth(SynthArgs),
    /// Filter, split and index an interaction file.
    Preprocess(PreprocessArgs),
    /// Run the tutoring schedule and write a model checkpoint.
    Train(TrainArgs),
    /// Full-ranking evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Dump file headers or export embedding projections.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 120)]
    pub items: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.3)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    #[arg(long, default_value_t = 1.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Tab-separated `user<TAB>item` file.
    #[arg(long)]
    pub interactions: PathBuf,
    /// CCEMB1 file; items without a vector are dropped before filtering.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    #[arg(long, default_value_t = 0.05, conflicts_with = "cold_count")]
    pub cold_fraction: f64,
    /// Hold out exactly this many items instead of a fraction.
    #[arg(long)]
    pub cold_count: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub valid_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_ratio: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file mirroring the training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from `<out>/resume.ccmdl` with its stored config.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Propagation depth.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub uniformity: Option<UniformityArg>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub mlp_layers: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum UniformityArg {
    Squared,
    Literal,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(lr => learning_rate);
        set!(weight_decay => weight_decay);
        set!(layers => layers);
        set!(patience => patience);
        set!(max_epochs => max_epochs);
        set!(rounds => rounds);
        set!(dim => dim);
        set!(batch_size => loss.batch_size);
        set!(normalize => loss.normalize);
        set!(mlp_layers => adapter.layers);
        set!(mlp_hidden => adapter.hidden);
        set!(dropout => adapter.dropout);
        if let Some(u) = self.uniformity {
            cfg.loss.uniformity = match u {
                UniformityArg::Squared => UniformityMode::Squared,
                UniformityArg::Literal => UniformityMode::Literal,
            };
        }
    }

    fn any(&self) -> bool {
        let mut probe = TrainConfig::default();
        self.apply(&mut probe);
        probe != TrainConfig::default() || self.seed.is_some()
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Warm-item report (the default when neither --warm nor --cold is given).
    #[arg(long)]
    pub warm: bool,
    /// Cold-item report.
    #[arg(long)]
    pub cold: bool,
    /// Restrict to one inference mode.
    #[arg(long)]
    pub mode: Option<InferenceMode>,
    /// Comma-separated cutoffs replacing 10,50.
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
    /// Warm split to score.
    #[arg(long, default_value = "test")]
    pub split: WarmSplitArg,
    /// Print single-line JSON records instead of key-value text.
    #[arg(long)]
    pub json: bool,
    /// Also write the reports (JSON lines) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum WarmSplitArg {
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// CCEMB1 or CCMDL1 file.
    #[arg(long, required_unless_present = "model")]
    pub file: Option<PathBuf>,
    /// Print header fields only.
    #[arg(long)]
    pub header: bool,
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write contextual, mapped and user projections to this TSV.
    #[arg(long, requires = "model")]
    pub projections: Option<PathBuf>,
}

/// Provenance of one command run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, config: impl Serialize, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    /// Records sha256 checksums of `files` (relative to `dir`) and writes the manifest there.
    fn finish(mut self, dir: &Path, files: &[&str]) -> Result<()> {
        for name in files {
            self.outputs.insert((*name).to_string(), sha256_file(dir.join(name))?);
        }
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = PlantedConfig {
        clusters: args.clusters,
        users: args.users,
        items: args.items,
        dim: args.dim,
        p_in: args.p_in,
        p_out: args.p_out,
        center_scale: args.center_scale,
        noise: args.noise,
        seed: args.seed,
    };
    let data = generate_planted(&cfg)?;
    data.write_dir(&args.out)?;
    let manifest = RunManifest::new("synth", &cfg, cfg.seed);
    manifest.finish(&args.out, &["interactions.tsv", "items.ccemb"])?;
    println!(
        "wrote {} interactions over {} items to {}",
        data.interactions.len(),
        data.item_ids.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    require_file(&args.interactions, "interactions file")?;
    if let Some(e) = &args.embeddings {
        require_file(e, "embedding file")?;
    }
    let ratios = SplitRatios {
        train: args.train_ratio,
        valid: args.valid_ratio,
        test: args.test_ratio,
    };
    ratios.validate()?;

    let raw = load_interactions(&args.interactions)?;
    let raw_count = raw.len();
    let mut set = raw;
    if let Some(path) = &args.embeddings {
        let (ids, _, _) = read_embedding_file(path)?;
        let known: std::collections::HashSet<String> = ids.into_iter().collect();
        let before = set.item_count();
        set = retain_items(&set, |id| known.contains(id))?;
        if set.item_count() < before {
            log::warn!("dropped {} items without embeddings", before - set.item_count());
        }
    }
    let filtered = k_core_filter(&set, args.k_core)?;
    let cold = match args.cold_count {
        Some(n) => cold_item_split_count(&filtered, n, args.seed)?,
        None => cold_item_split(&filtered, args.cold_fraction, args.seed)?,
    };
    let bundle = SplitBundle::assemble(cold, ratios, args.seed)?;
    bundle.write_dir(&args.out)?;

    let summary = SplitManifest {
        seed: args.seed,
        k_core: args.k_core,
        cold_fraction: args
            .cold_count
            .map(|n| n as f64 / filtered.item_count() as f64)
            .unwrap_or(args.cold_fraction),
        ratios,
        raw_interactions: raw_count,
        users: filtered.user_count(),
        items: filtered.item_count(),
        interactions: filtered.len(),
        cold_items: bundle.cold_items.len(),
        train: bundle.train.len(),
        valid: bundle.valid.len(),
        test: bundle.test.len(),
        cold_test: bundle.cold_test.len(),
    };
    let text = serde_json::to_string_pretty(&summary).expect("split manifest serializes");
    write_atomic(args.out.join(SPLIT_MANIFEST_FILE), text.as_bytes())?;

    let mut manifest = RunManifest::new("preprocess", &summary, args.seed);
    manifest.inputs.insert("interactions".into(), args.interactions.clone());
    if let Some(e) = &args.embeddings {
        manifest.inputs.insert("embeddings".into(), e.clone());
    }
    let mut files: Vec<&str> = crate::dataset::SPLIT_DIR_FILES.to_vec();
    files.push(SPLIT_MANIFEST_FILE);
    manifest.finish(&args.out, &files)?;
    println!(
        "{} users, {} items ({} cold), train/valid/test/cold_test = {}/{}/{}/{}",
        summary.users, summary.items, summary.cold_items, summary.train, summary.valid, summary.test, summary.cold_test
    );
    Ok(())
}

/// Appends epoch lines to the metric log and refreshes the resume file at
/// every phase boundary.
struct RunLogger<'a> {
    log: File,
    dir: &'a Path,
    config: &'a TrainConfig,
    data: &'a TrainingData,
    phases_logged: usize,
}

fn phase_end_line(p: &PhaseRecord) -> String {
    format!(
        "# end {} epochs_run={} best_epoch={} valid_recall@10={:.8} valid_ndcg@10={:.8}",
        p.phase, p.epochs_run, p.best_epoch, p.valid_recall, p.valid_ndcg
    )
}

fn write_log_line(log: &mut File, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io(METRICS_FILE, e))
}

impl TrainObserver for RunLogger<'_> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        write_log_line(&mut self.log, &record.log_line())
    }

    fn on_phase_end(&mut self, state: &TrainState) -> Result<()> {
        for p in &state.history.phases[self.phases_logged..] {
            write_log_line(&mut self.log, &phase_end_line(p))?;
        }
        self.phases_logged = state.history.phases.len();
        self.log.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        write_resume(
            self.dir.join(RESUME_FILE),
            self.config,
            state,
            self.data.splits.users(),
            self.data.splits.items(),
        )
    }
}

/// Rewrites the metric log from a saved history so a resumed run's log
/// matches an uninterrupted one.
fn rewrite_log(path: &Path, state: &TrainState) -> Result<File> {
    let mut text = format!("{}\n", EpochRecord::LOG_HEADER);
    let mut phase_iter = state.history.phases.iter();
    let mut current = None;
    for e in &state.history.epochs {
        if current.is_some_and(|c| c != e.phase) {
            if let Some(p) = phase_iter.next() {
                text.push_str(&phase_end_line(p));
                text.push('\n');
            }
        }
        current = Some(e.phase);
        text.push_str(&e.log_line());
        text.push('\n');
    }
    for p in phase_iter {
        text.push_str(&phase_end_line(p));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?
        }
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    require_file(&args.embeddings, "embedding file")?;
    if !args.data.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "data directory {} does not exist",
            args.data.display()
        )));
    }
    let splits = SplitBundle::read_dir(&args.data)?;
    create_dir(&args.out)?;
    let log_path = args.out.join(METRICS_FILE);

    let (config, state, log) = if args.resume {
        let resume_path = args.out.join(RESUME_FILE);
        require_file(&resume_path, "resume checkpoint")?;
        if args.config.is_some() || args.overrides.any() {
            log::warn!("--resume uses the stored config; --config and override flags are ignored");
        }
        let (config, state) = read_resume(&resume_path, splits.users(), splits.items())?;
        let log = rewrite_log(&log_path, &state)?;
        log::info!("resuming after {} completed phases", state.completed_phases);
        (config, Some(state), log)
    } else {
        let config = resolve_config(args)?;
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        write_log_line(&mut log, EpochRecord::LOG_HEADER)?;
        (config, None, log)
    };
    config.validate()?;

    let header = read_embedding_header(&args.embeddings)?;
    if header.dim != config.dim {
        return Err(Error::DimensionMismatch {
            expected: config.dim,
            found: header.dim,
            context: format!("{} vs configured dim", args.embeddings.display()),
        });
    }
    let items = load_embeddings(&args.embeddings, splits.items(), Some(config.dim))?;
    let data = TrainingData::new(splits, items)?;
    let state = match state {
        Some(s) => s,
        None => TrainState::fresh(&config, &data)?,
    };
    let mut logger = RunLogger {
        log,
        dir: &args.out,
        config: &config,
        data: &data,
        phases_logged: state.history.phases.len(),
    };
    let model = train_from(&config, &data, state, &mut logger)?;
    drop(logger);
    model.save(args.out.join(MODEL_FILE))?;

    let mut manifest = RunManifest::new("train", &config, config.seed);
    manifest.config_path = args.config.clone();
    manifest.inputs.insert("data".into(), args.data.clone());
    manifest.inputs.insert("embeddings".into(), args.embeddings.clone());
    manifest.finish(&args.out, &[MODEL_FILE, METRICS_FILE, RESUME_FILE])?;
    if let Some(best) = model.best_phase() {
        println!(
            "best phase {best}; model written to {}",
            args.out.join(MODEL_FILE).display()
        );
    }
    Ok(())
}

/// Reports in output order: warm then cold, with_mlp then without_mlp.
pub fn eval_reports(
    model: &TrainedModel,
    splits: &SplitBundle,
    warm: bool,
    cold: bool,
    mode: Option<InferenceMode>,
    warm_split: EvalSplit,
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let (warm, cold) = if !warm && !cold { (true, false) } else { (warm, cold) };
    let modes: Vec<InferenceMode> = match mode {
        Some(m) => vec![m],
        None => vec![InferenceMode::WithMlp, InferenceMode::WithoutMlp],
    };
    let mut out = Vec::new();
    for (enabled, split) in [(warm, warm_split), (cold, EvalSplit::ColdTest)] {
        if !enabled {
            continue;
        }
        for &m in &modes {
            out.push(full_ranking(model, splits, split, m, ks)?);
        }
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_file(&args.model, "model checkpoint")?;
    let splits = SplitBundle::read_dir(&args.data)?;
    let header = read_checkpoint_header(&args.model)?;
    if header.users != splits.users().len() || header.items != splits.items().len() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} users / {} items, splits have {} / {}",
            header.users,
            header.items,
            splits.users().len(),
            splits.items().len()
        )));
    }
    if header.dim != header.config.dim {
        return Err(Error::DimensionMismatch {
            expected: header.config.dim,
            found: header.dim,
            context: "checkpoint tensors vs its config".into(),
        });
    }
    let model = TrainedModel::load(&args.model, &splits)?;
    let ks = args.topk.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("--topk values must be positive".into()));
    }
    let split = match args.split {
        WarmSplitArg::Valid => EvalSplit::Valid,
        WarmSplitArg::Test => EvalSplit::Test,
    };
    let reports = eval_reports(&model, &splits, args.warm, args.cold, args.mode, split, &ks)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&r.to_json_line());
        lines.push('\n');
        if args.json {
            println!("{}", r.to_json_line());
        } else {
            println!("{}", r.to_kv_text());
        }
    }
    if let Some(path) = &args.out {
        write_atomic(path, lines.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    if let Some(file) = &args.file {
        require_file(file, "file")?;
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        if bytes.starts_with(crate::trainer::MODEL_MAGIC) {
            let header = read_checkpoint_header(file)?;
            print!("{}", toml::to_string(&header).expect("header serializes"));
        } else {
            let h = read_embedding_header(file)?;
            println!("magic\tCCEMB1\ncount\t{}\ndim\t{}", h.count, h.dim);
            if !args.header {
                let (ids, _, data) = read_embedding_file(file)?;
                for (r, id) in ids.iter().enumerate().take(5) {
                    let row = &data[r * h.dim..(r + 1) * h.dim];
                    let head: Vec<String> = row.iter().take(4).map(|v| format!("{v:.4}")).collect();
                    println!("{id}\t{}", head.join("\t"));
                }
            }
        }
    }
    if let (Some(model_path), Some(data)) = (&args.model, &args.data) {
        let splits = SplitBundle::read_dir(data)?;
        let model = TrainedModel::load(model_path, &splits)?;
        if let Some(out) = &args.projections {
            let rows = export_projections(&model, out)?;
            println!("wrote {rows} projection rows to {}", out.display());
        } else {
            let header = read_checkpoint_header(model_path)?;
            print!("{}", toml::to_string(&header).expect("header serializes"));
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("CC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("CC_THREADS ignored: {e}");
                }
            }
            _ => log::warn!("CC_THREADS={v:?} is not a positive integer; ignored"),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses arguments, runs the command and maps failures to exit codes
/// 1 (runtime) and 2 (usage or configuration).
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
