use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segzsl::classify::ClassifierKind;
use segzsl::data::{gen_synthetic_benchmark, load_container, save_container, Standardizer, SyntheticSpec};
use segzsl::networks::checkpoint_bytes;
use segzsl::objectives::LatentMode;
use segzsl::protocol::{
    exemplar_sweep, run_ablation_no_feedback, run_gzsl, run_zsl, sweep_svg, ProtocolConfig, DEFAULT_SWEEP_COUNTS,
};
use segzsl::synthesis::SynthMode;
use segzsl::trainer::{train, TrainConfig};
use segzsl::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "segzsl", version, about = "Zero-shot learning by exemplar synthesis with regressor feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark container plus its generating truth.
    GenSynth(GenSynthArgs),
    /// Train the generative model on every seen-class row of a container.
    Train(TrainCmd),
    /// Run an evaluation protocol and write its metrics report.
    Run(RunCmd),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 15)]
    classes_seen: usize,
    #[arg(long, default_value_t = 5)]
    classes_unseen: usize,
    #[arg(long, default_value_t = 32)]
    features: usize,
    #[arg(long, default_value_t = 16)]
    attributes: usize,
    /// Rows per class.
    #[arg(long, default_value_t = 150)]
    per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 4)]
    nuisance_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for [`TrainConfig`] fields.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    #[arg(long)]
    unsup_samples_per_batch: Option<usize>,
    #[arg(long, value_enum)]
    latent_mode: Option<LatentModeArg>,
    /// Enables plateau early stopping with this patience.
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long, requires = "early_stop_patience")]
    early_stop_rel_tol: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.lr, self.lr);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.pretrain_epochs, self.pretrain_epochs);
        set(&mut c.joint_epochs, self.joint_epochs);
        set(&mut c.latent_dim, self.latent_dim);
        set(&mut c.hidden, self.hidden);
        set(&mut c.weights.lambda_r, self.lambda_r);
        set(&mut c.weights.lambda_c, self.lambda_c);
        set(&mut c.weights.lambda_reg, self.lambda_reg);
        set(&mut c.weights.lambda_e, self.lambda_e);
        if self.unsup_samples_per_batch.is_some() {
            c.unsup_samples_per_batch = self.unsup_samples_per_batch;
        }
        if let Some(m) = self.latent_mode {
            c.latent_mode = m.into();
        }
        if let Some(patience) = self.early_stop_patience {
            let mut es = c.early_stop.unwrap_or_default();
            es.patience = patience;
            set(&mut es.rel_tol, self.early_stop_rel_tol);
            c.early_stop = Some(es);
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LatentModeArg {
    Posterior,
    Prior,
    Both,
}

impl From<LatentModeArg> for LatentMode {
    fn from(m: LatentModeArg) -> Self {
        match m {
            LatentModeArg::Posterior => LatentMode::Posterior,
            LatentModeArg::Prior => LatentMode::Prior,
            LatentModeArg::Both => LatentMode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Svm,
    Softmax,
    Knn,
}

impl From<KindArg> for ClassifierKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Svm => ClassifierKind::Svm,
            KindArg::Softmax => ClassifierKind::Softmax,
            KindArg::Knn => ClassifierKind::Knn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthModeArg {
    Sample,
    Mean,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Zsl,
    Gzsl,
    Ablate,
    Sweep,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Zsl => "zsl",
            Mode::Gzsl => "gzsl",
            Mode::Ablate => "ablate",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset container directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    /// Checkpoint path. The log, standardizer and run manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// JSON protocol config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum)]
    classifier: Option<KindArg>,
    /// SVM regularization constant.
    #[arg(long)]
    c: Option<f64>,
    /// Classifier passes over its training set.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    softmax_lr: Option<f64>,
    #[arg(long)]
    softmax_l2: Option<f64>,
    #[arg(long)]
    softmax_batch: Option<usize>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long, value_enum)]
    synth_mode: Option<SynthModeArg>,
    #[arg(long)]
    seen_weight: Option<f64>,
    #[arg(long)]
    unseen_weight: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment_seen: Option<bool>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    /// Exemplar counts for the sweep.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Sweep chart output.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Metrics report path.
    #[arg(long)]
    out: PathBuf,
}

impl RunCmd {
    fn config(&self) -> Result<ProtocolConfig, CliError> {
        let mut c: ProtocolConfig = read_config(self.config.as_deref())?;
        set(&mut c.seed, self.seed);
        self.train.apply(&mut c.train);
        if let Some(k) = self.classifier {
            c.classifier.kind = k.into();
        }
        set(&mut c.classifier.c, self.c);
        set(&mut c.classifier.epochs, self.epochs);
        set(&mut c.classifier.softmax_lr, self.softmax_lr);
        set(&mut c.classifier.softmax_l2, self.softmax_l2);
        set(&mut c.classifier.softmax_batch, self.softmax_batch);
        set(&mut c.n_per_class, self.n_per_class);
        if let Some(m) = self.synth_mode {
            c.synth_mode = match m {
                SynthModeArg::Sample => SynthMode::Sample,
                SynthModeArg::Mean => SynthMode::Mean,
            };
        }
        set(&mut c.seen_weight, self.seen_weight);
        set(&mut c.unseen_weight, self.unseen_weight);
        set(&mut c.augment_seen, self.augment_seen);
        set(&mut c.split_fraction, self.split_fraction);
        set(&mut c.standardize, self.standardize);
        c.validate()?;
        Ok(c.effective())
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_INVALID,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Usage(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(fail)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(fail)?;
    std::fs::rename(&tmp, path).map_err(fail)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Record of one invocation; the only output carrying wall-clock data.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    argv: Vec<String>,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    threads: usize,
    wall_secs: f64,
}

struct Outcome {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    manifest: PathBuf,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("SEGZSL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("SEGZSL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn gen_synth(a: &GenSynthArgs) -> Result<Outcome, CliError> {
    let spec = SyntheticSpec {
        seen: a.classes_seen,
        unseen: a.classes_unseen,
        features: a.features,
        attributes: a.attributes,
        n_per_class: a.per_class,
        noise_sigma: a.noise_sigma,
        nuisance_dim: a.nuisance_dim,
        seed: a.seed,
    };
    let (ds, truth) = gen_synthetic_benchmark(&spec)?;
    save_container(&ds, &a.out)?;
    let truth_path = a.out.join("truth.json");
    write_atomic(&truth_path, truth.to_json().as_bytes())?;
    println!(
        "wrote {} rows ({} seen, {} unseen classes) to {}",
        ds.len(),
        ds.seen.len(),
        ds.unseen.len(),
        a.out.display()
    );
    Ok(Outcome {
        command: "gen-synth",
        seed: a.seed,
        config: serde_json::to_value(spec).expect("serializable"),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::from([("container".into(), a.out.clone()), ("truth".into(), truth_path)]),
        manifest: a.out.join("run.json"),
    })
}

fn train_cmd(a: &TrainCmd) -> Result<Outcome, CliError> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    a.train.apply(&mut cfg);
    cfg.validate()?;
    let ds = load_container(&a.data)?;
    let rows = ds.rows_of_classes(&ds.seen);
    let st = Standardizer::fit(&ds.feature_tensor(), &rows)?;
    let mut batch = ds.batch(&rows)?;
    batch.x = st.apply(&batch.x)?;
    let bank = ds.bank()?;
    let (params, log) = train(&batch, &bank, &cfg)?;

    let log_path = sibling(&a.out, ".log.jsonl");
    let st_path = sibling(&a.out, ".standardizer.json");
    write_atomic(&a.out, &checkpoint_bytes(&params))?;
    write_atomic(&log_path, log.without_timing().to_jsonl().as_bytes())?;
    write_atomic(&st_path, pretty(&st).as_bytes())?;
    if let Some(last) = log.epochs.last() {
        println!("trained {} epochs; final VAE objective {:.4}", log.epochs.len(), last.vae);
    }
    Ok(Outcome {
        command: "train",
        seed: cfg.seed,
        config: serde_json::to_value(&cfg).expect("serializable"),
        inputs: BTreeMap::from([("data".into(), a.data.clone())]),
        outputs: BTreeMap::from([
            ("checkpoint".into(), a.out.clone()),
            ("log".into(), log_path),
            ("standardizer".into(), st_path),
        ]),
        manifest: sibling(&a.out, ".run.json"),
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

fn run_cmd(a: &RunCmd) -> Result<Outcome, CliError> {
    let cfg = a.config()?;
    if a.mode != Mode::Sweep && (a.counts.is_some() || a.svg.is_some()) {
        return Err(CliError::Usage("--counts and --svg apply to --mode sweep only".into()));
    }
    let threads = threads()?;
    let ds = load_container(&a.data)?;
    let mut outputs = BTreeMap::from([("metrics".to_string(), a.out.clone())]);
    match a.mode {
        Mode::Zsl | Mode::Gzsl => {
            let report = if a.mode == Mode::Zsl { run_zsl(&ds, &cfg)? } else { run_gzsl(&ds, &cfg)? };
            write_atomic(&a.out, report.to_json().as_bytes())?;
            println!(
                "acc_seen {}  acc_unseen {}  H {}  acc_zsl {}",
                fmt_acc(report.acc_seen),
                fmt_acc(report.acc_unseen),
                fmt_acc(report.h),
                fmt_acc(report.acc_zsl)
            );
        }
        Mode::Ablate => {
            let report = run_ablation_no_feedback(&ds, &cfg)?;
            write_atomic(&a.out, report.to_json().as_bytes())?;
            println!(
                "acc_zsl full {}  no-feedback {}  delta {:+.1}",
                fmt_acc(report.full.acc_zsl),
                fmt_acc(report.ablated.acc_zsl),
                100.0 * report.delta_zsl
            );
        }
        Mode::Sweep => {
            let counts = a.counts.clone().unwrap_or_else(|| DEFAULT_SWEEP_COUNTS.to_vec());
            let report = exemplar_sweep(&ds, &cfg, &counts, threads)?;
            write_atomic(&a.out, report.to_json().as_bytes())?;
            if let Some(svg) = &a.svg {
                write_atomic(svg, sweep_svg(&report).as_bytes())?;
                outputs.insert("svg".into(), svg.clone());
            }
            print!("{}", report.table());
        }
    }
    Ok(Outcome {
        command: a.mode.name(),
        seed: cfg.seed,
        config: serde_json::to_value(&cfg).expect("serializable"),
        inputs: BTreeMap::from([("data".into(), a.data.clone())]),
        outputs,
        manifest: sibling(&a.out, ".run.json"),
    })
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::GenSynth(a) => gen_synth(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Run(a) => run_cmd(a)?,
    };
    let command = match &cli.command {
        Command::Run(_) => format!("run --mode {}", outcome.command),
        _ => outcome.command.to_string(),
    };
    let manifest = RunManifest {
        tool: "segzsl",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv: std::env::args().collect(),
        seed: outcome.seed,
        config: outcome.config,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        threads: threads()?,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&outcome.manifest, pretty(&manifest).as_bytes())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
