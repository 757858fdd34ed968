//! Command-line front end.
//!
//! Exit status: 0 on success, 1 on a usage error (bad flags, bad config or
//! override), 2 on a runtime error (data, training divergence, I/O, failed
//! gradient check). Every file a subcommand writes goes into its output
//! directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::checkpoint::load_checkpoint;
use crate::data::{gen_synthetic, write_split_dir, Split};
use crate::gradcheck::{model_gradcheck, op_catalog, op_gradcheck, GradcheckSettings, ModelGradcheck};
use crate::losses::LossWeights;
use crate::metrics::MetricReport;
use crate::model::ModelConfig;
use crate::modulation::{ModulationConfig, RatioVariant};
use crate::trainer::{
    ablation_csv, ablation_row, config_to_json, evaluate, prepare_data, read_jsonl, run_ablation, train,
    write_config, write_run, AblationRow, EpochMetrics, TraceRecord, TrainConfig, Toggles, ABLATION_ROWS,
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, TRACE_FILE,
};

pub const OUT_DIR_ENV: &str = "MODBAL_OUT_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

fn runtime(m: impl Into<String>) -> CliError {
    CliError::Runtime(m.into())
}

fn with_default<T: std::fmt::Display>(text: &str, value: T) -> String {
    format!("{text} [default: {value}]")
}

#[derive(Debug, Parser)]
#[command(name = "modbal", version, about = "Multimodal sentiment regression with gradient modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as train/val/test feature files.
    GenData(GenDataArgs),
    /// Train one model and write its config, trace, metrics and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or all splits.
    Eval(EvalArgs),
    /// Run ablation rows over several seeds and write a summary table.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert a run's trace and metrics files into long-format CSV.
    ExportTraces(ExportArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
}

/// Flags shared by every subcommand that builds a training config. They are
/// applied on top of `--config`, then `--set` overrides are applied in order.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON training config; omitted fields are not allowed, unknown ones are rejected
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, help = with_default("Training seed (parameters, noise, shuffling)", TrainConfig::default().seed))]
    pub seed: Option<u64>,
    #[arg(long, help = with_default("Number of epochs", TrainConfig::default().epochs))]
    pub epochs: Option<usize>,
    #[arg(long, help = with_default("Mini-batch size", TrainConfig::default().batch_size))]
    pub batch_size: Option<usize>,
    #[arg(long = "lr", help = with_default("Peak learning rate", TrainConfig::default().learning_rate))]
    pub learning_rate: Option<f64>,
    #[arg(long, help = with_default("Fraction of all steps spent in linear warmup", TrainConfig::default().warmup_ratio))]
    pub warmup_ratio: Option<f64>,
    #[arg(long, help = with_default("Decoupled weight decay", TrainConfig::default().weight_decay))]
    pub weight_decay: Option<f64>,
    #[arg(long, help = with_default("Modulation strength alpha", ModulationConfig::default().alpha))]
    pub alpha: Option<f64>,
    #[arg(long, help = with_default("Conflict penalty factor eta, in (0, 1)", ModulationConfig::default().eta))]
    pub eta: Option<f64>,
    #[arg(long, help = with_default("First epoch of the modulation window", ModulationConfig::default().window_start))]
    pub window_start: Option<usize>,
    #[arg(long, help = with_default("End of the modulation window (exclusive)", ModulationConfig::default().window_end))]
    pub window_end: Option<usize>,
    #[arg(long, value_enum, help = with_default("Score ratio fed to tanh", "as-written"))]
    pub ratio_variant: Option<RatioArg>,
    #[arg(long, help = with_default("Residual injection weight beta", ModelConfig::default().beta))]
    pub beta: Option<f64>,
    #[arg(long, help = with_default("Weight of the reconstruction loss", LossWeights::default().lambda_recon))]
    pub lambda_recon: Option<f64>,
    #[arg(long, help = with_default("Weight of the unimodal loss", LossWeights::default().lambda_uni))]
    pub lambda_uni: Option<f64>,
    #[arg(long, help = with_default("Weight of the latent-entropy loss", LossWeights::default().lambda_div))]
    pub lambda_div: Option<f64>,
    #[arg(long, help = with_default("Weight of the statistical loss", LossWeights::default().lambda_stat))]
    pub lambda_stat: Option<f64>,
    /// Enabled components: comma list of ame,gm,ge,cp,sl, or `none`, or an
    /// ablation row name such as A4 [default: ame,gm,cp,sl]
    #[arg(long, value_name = "LIST")]
    pub toggles: Option<String>,
    /// Read train/val/test.jsonl from this directory instead of generating data
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Override any config field by dotted path, e.g. `modulation.eta=0.3`
    /// or `data.synthetic.n_samples=500`; repeatable, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RatioArg {
    AsWritten,
    RatioMinusOne,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// JSON training config whose `data` section is used
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, help = with_default("Generator seed", 0))]
    pub seed: Option<u64>,
    #[arg(long, help = with_default("Number of utterances", 2000))]
    pub n_samples: Option<usize>,
    #[arg(long, help = with_default("Text informativeness", 1.0))]
    pub w_t: Option<f64>,
    #[arg(long, help = with_default("Acoustic informativeness", 0.4))]
    pub w_a: Option<f64>,
    #[arg(long, help = with_default("Visual informativeness", 0.2))]
    pub w_v: Option<f64>,
    #[arg(long, help = with_default("Label noise standard deviation", 0.1))]
    pub noise_std: Option<f64>,
    /// Override a config field by dotted path (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Run directory written by `train`; supplies config and checkpoint
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Checkpoint file (overrides the one in --run-dir)
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Comma-separated rows, e.g. A0,A4,A6,C4 [default: every row]
    #[arg(long, value_name = "LIST")]
    pub rows: Option<String>,
    /// Comma-separated training seeds
    #[arg(long, value_name = "LIST", default_value = "0,1,2")]
    pub seeds: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelSize {
    /// The model described by the training config
    Config,
    /// A few units per layer; fast enough for many seeds
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// First seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds
    #[arg(long, default_value_t = 1)]
    pub n_seeds: u64,
    /// Batch size of the check batch
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    /// Which model to check
    #[arg(long, value_enum, default_value = "config")]
    pub model: ModelSize,
    /// JSON training config supplying the model and loss settings
    #[arg(long = "config", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Run directory holding trace.jsonl and metrics.jsonl
    #[arg(long, value_name = "DIR")]
    pub run_dir: PathBuf,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportTraces(a) => export_cmd(a),
    }
}

/// Reads a JSON training config.
pub fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("config: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config: {}: {e}", path.display())))
}

/// Applies one `dotted.path=value` override. The path must name an existing
/// field; the value is parsed as JSON, falling back to a plain string.
pub fn apply_override(cfg: &TrainConfig, arg: &str) -> Result<TrainConfig, CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{arg}`: expected KEY=VALUE")))?;
    let mut root = serde_json::to_value(cfg).map_err(|e| runtime(format!("config: {e}")))?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override `{arg}`: `{}` is not a section", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| usage(format!("override `{arg}`: unknown config key `{}`", parts[..=i].join("."))))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    serde_json::from_value(root).map_err(|e| usage(format!("override `{arg}`: {e}")))
}

/// Parses a toggle list: `none`, an ablation row name, or a comma list of
/// component names.
pub fn parse_toggles(arg: &str) -> Result<Toggles, CliError> {
    let arg = arg.trim();
    if arg.eq_ignore_ascii_case("none") {
        return Ok(Toggles::ALL_OFF);
    }
    if let Some(row) = ablation_row(arg) {
        return Ok(row.toggles);
    }
    let mut t = Toggles::ALL_OFF;
    for part in arg.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "ame" => t.ame = true,
            "gm" => t.gm = true,
            "ge" => t.ge = true,
            "cp" => t.cp = true,
            "sl" => t.sl = true,
            other => return Err(usage(format!("--toggles: unknown component `{other}` (expected ame, gm, ge, cp, sl)"))),
        }
    }
    Ok(t)
}

fn parse_list<T: std::str::FromStr>(flag: &str, arg: &str) -> Result<Vec<T>, CliError> {
    arg.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| usage(format!("{flag}: cannot parse `{s}`"))))
        .collect()
}

impl ConfigArgs {
    /// Config file (or defaults), then named flags, then `--set` overrides.
    pub fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig, CliError> {
        let mut c = match (&self.config, base) {
            (Some(p), _) => load_config(p)?,
            (None, Some(b)) => b,
            (None, None) => TrainConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.epochs, self.epochs);
        set!(c.batch_size, self.batch_size);
        set!(c.learning_rate, self.learning_rate);
        set!(c.warmup_ratio, self.warmup_ratio);
        set!(c.weight_decay, self.weight_decay);
        set!(c.modulation.alpha, self.alpha);
        set!(c.modulation.eta, self.eta);
        set!(c.modulation.window_start, self.window_start);
        set!(c.modulation.window_end, self.window_end);
        set!(
            c.modulation.ratio_variant,
            self.ratio_variant.map(|r| match r {
                RatioArg::AsWritten => RatioVariant::AsWritten,
                RatioArg::RatioMinusOne => RatioVariant::RatioMinusOne,
            })
        );
        set!(c.model.beta, self.beta);
        set!(c.loss.lambda_recon, self.lambda_recon);
        set!(c.loss.lambda_uni, self.lambda_uni);
        set!(c.loss.lambda_div, self.lambda_div);
        set!(c.loss.lambda_stat, self.lambda_stat);
        if let Some(t) = &self.toggles {
            c.toggles = parse_toggles(t)?;
        }
        if let Some(d) = &self.data_dir {
            c.data.dir = Some(d.clone());
        }
        for o in &self.overrides {
            c = apply_override(&c, o)?;
        }
        c.validate().map_err(|e| usage(format!("config: {e}")))?;
        Ok(c)
    }
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("output directory {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn gen_data_cmd(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let s = &mut cfg.data.synthetic;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.n_samples {
        s.n_samples = v;
    }
    if let Some(v) = a.w_t {
        s.w_t = v;
    }
    if let Some(v) = a.w_a {
        s.w_a = v;
    }
    if let Some(v) = a.w_v {
        s.w_v = v;
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    for o in &a.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    cfg.data.synthetic.validate().map_err(|e| usage(format!("gen-data: {e}")))?;
    let splits = gen_synthetic(&cfg.data.synthetic)
        .and_then(|ds| ds.split_three(cfg.data.val_fraction, cfg.data.test_fraction))
        .map_err(|e| usage(format!("gen-data: {e}")))?;
    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    write_split_dir(&splits, dir).map_err(|e| runtime(format!("gen-data: {e}")))?;
    write_json(&cfg.data, &dir.join("data_config.json"))?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(())
}

fn print_report(label: &str, r: &MetricReport) {
    println!(
        "{label:<6} acc2 {:.4}  f1 {:.4}  mae {:.4}  corr {:.4}  (n_eval {})",
        r.acc2, r.f1, r.mae, r.corr, r.n_eval
    );
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve(None)?;
    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    write_config(&cfg, &dir.join(CONFIG_FILE)).map_err(|e| runtime(format!("train: {e}")))?;
    let data = prepare_data(&cfg).map_err(|e| runtime(format!("train: {e}")))?;
    let mut art = train(&cfg, &data).map_err(|e| runtime(format!("train: {e}")))?;
    write_run(&mut art, dir).map_err(|e| runtime(format!("train: {e}")))?;
    if let Some(m) = art.final_metrics() {
        println!("epoch {} step {} train loss {:.4}", m.epoch, m.step, m.train_loss);
        print_report("val", &m.val);
        print_report("test", &m.test);
    }
    println!("run written to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    reports: Vec<(Split, MetricReport)>,
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let base = match &a.run_dir {
        Some(d) => Some(load_config(&d.join(CONFIG_FILE))?),
        None => None,
    };
    let cfg = a.config.resolve(base)?;
    let ck = a
        .checkpoint
        .clone()
        .or_else(|| a.run_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)))
        .ok_or_else(|| usage("eval: pass --checkpoint or --run-dir"))?;
    let params = load_checkpoint(&ck).map_err(|e| runtime(format!("eval: {e}")))?;
    if params.config() != &cfg.model {
        log::warn!("checkpoint model config differs from the training config; using the checkpoint's");
    }
    let data = prepare_data(&cfg).map_err(|e| runtime(format!("eval: {e}")))?;
    let splits: Vec<Split> = match a.split {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Val => vec![Split::Val],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => vec![Split::Train, Split::Val, Split::Test],
    };
    let mut reports = Vec::new();
    for s in splits {
        let r = evaluate(&params, data.get(s), &cfg).map_err(|e| runtime(format!("eval: {e}")))?;
        print_report(s.as_str(), &r);
        reports.push((s, r));
    }
    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    write_config(&cfg, &dir.join(CONFIG_FILE)).map_err(|e| runtime(format!("eval: {e}")))?;
    write_json(&EvalOutput { checkpoint: ck, reports }, &dir.join("eval.json"))
}

fn ablate_cmd(a: AblateArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve(None)?;
    let rows: Vec<AblationRow> = match &a.rows {
        None => ABLATION_ROWS.to_vec(),
        Some(arg) => parse_list::<String>("--rows", arg)?
            .iter()
            .map(|n| ablation_row(n).ok_or_else(|| usage(format!("--rows: unknown row `{n}`"))))
            .collect::<Result<_, _>>()?,
    };
    let seeds: Vec<u64> = parse_list("--seeds", &a.seeds)?;
    if rows.is_empty() || seeds.is_empty() {
        return Err(usage("ablate: need at least one row and one seed"));
    }
    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    write_config(&cfg, &dir.join(CONFIG_FILE)).map_err(|e| runtime(format!("ablate: {e}")))?;
    let data = prepare_data(&cfg).map_err(|e| runtime(format!("ablate: {e}")))?;
    let results = run_ablation(&cfg, &data, &rows, &seeds).map_err(|e| runtime(format!("ablate: {e}")))?;
    write_json(&results, &dir.join("ablation.json"))?;
    let csv = ablation_csv(&results);
    fs::write(dir.join("ablation.csv"), &csv).map_err(|e| runtime(format!("ablate: writing ablation.csv: {e}")))?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct OpResult {
    op: &'static str,
    seeds: u64,
    max_rel_err: f64,
    passed: bool,
}

#[derive(Serialize)]
struct GradcheckOutput {
    settings: GradcheckSettings,
    ops: Vec<OpResult>,
    model: Vec<ModelGradcheck>,
    passed: bool,
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<(), CliError> {
    let base = ConfigArgs {
        config: a.config.clone(),
        overrides: a.overrides.clone(),
        ..ConfigArgs::default()
    };
    let cfg = base.resolve(None)?;
    if !(a.h > 0.0 && a.tol > 0.0) {
        return Err(usage("gradcheck: --h and --tol must be positive"));
    }
    if a.batch_size == 0 || a.n_seeds == 0 {
        return Err(usage("gradcheck: --batch-size and --n-seeds must be >= 1"));
    }
    let mut settings = match a.model {
        ModelSize::Config => GradcheckSettings::new(cfg.model.clone()),
        ModelSize::Tiny => GradcheckSettings::tiny(),
    };
    settings.weights = cfg.loss;
    settings.task_loss = cfg.task_loss;
    settings.recon_reduction = cfg.recon_reduction;
    settings.batch_size = a.batch_size;
    settings.h = a.h;
    settings.tol = a.tol;

    let seeds = a.seed..a.seed + a.n_seeds;
    let ops: Vec<OpResult> = op_catalog()
        .iter()
        .map(|k| {
            let worst = seeds
                .clone()
                .map(|s| op_gradcheck(k, s, a.h, a.tol).max_rel_err())
                .fold(0.0, f64::max);
            OpResult {
                op: k.name(),
                seeds: a.n_seeds,
                max_rel_err: worst,
                passed: worst < a.tol,
            }
        })
        .collect();
    let mut model = Vec::new();
    for s in seeds {
        model.push(model_gradcheck(&settings, s).map_err(|e| runtime(format!("gradcheck: {e}")))?);
    }
    let passed = ops.iter().all(|o| o.passed) && model.iter().all(|m| m.passed);
    let worst_op = ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let worst_model = model.iter().map(|m| m.max_rel_err).fold(0.0, f64::max);
    println!("ops:   {} op kinds, max relative error {worst_op:.3e}", ops.len());
    println!("model: {} seed(s), max relative error {worst_model:.3e}", model.len());

    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    write_json(
        &GradcheckOutput {
            settings,
            ops,
            model,
            passed,
        },
        &dir.join("gradcheck.json"),
    )?;
    if passed {
        println!("gradcheck passed (tol {:e})", a.tol);
        Ok(())
    } else {
        Err(runtime(format!(
            "gradcheck: relative error above {:e}; details in {}",
            a.tol,
            dir.join("gradcheck.json").display()
        )))
    }
}

fn scalar_cell(v: &Value) -> Option<String> {
    match v {
        Value::Bool(b) => Some(if *b { "1" } else { "0" }.to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// `step,epoch,series,value` rows, one per traced quantity per step.
pub fn trace_long_csv(trace: &[TraceRecord]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| runtime(format!("export-traces: {e}"));
    w.write_record(["step", "epoch", "series", "value"]).map_err(err)?;
    for r in trace {
        let v = serde_json::to_value(r).map_err(|e| runtime(format!("export-traces: {e}")))?;
        let obj = v.as_object().expect("records serialize as objects");
        for (k, val) in obj {
            if k == "step" || k == "epoch" {
                continue;
            }
            if let Some(cell) = scalar_cell(val) {
                w.write_record([r.step.to_string(), r.epoch.to_string(), k.clone(), cell])
                    .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| runtime(format!("export-traces: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `epoch,step,split,metric,value` rows.
pub fn metrics_long_csv(metrics: &[EpochMetrics]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| runtime(format!("export-traces: {e}"));
    w.write_record(["epoch", "step", "split", "metric", "value"]).map_err(err)?;
    for m in metrics {
        let (e, s) = (m.epoch.to_string(), m.step.to_string());
        w.write_record([e.as_str(), s.as_str(), "train", "loss", &m.train_loss.to_string()])
            .map_err(err)?;
        for (split, r) in [("train", &m.train), ("val", &m.val), ("test", &m.test)] {
            for (name, value) in [
                ("acc2", r.acc2),
                ("f1", r.f1),
                ("mae", r.mae),
                ("corr", r.corr),
                ("n_eval", r.n_eval as f64),
            ] {
                w.write_record([e.as_str(), s.as_str(), split, name, &value.to_string()])
                    .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| runtime(format!("export-traces: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn export_cmd(a: ExportArgs) -> Result<(), CliError> {
    let trace: Vec<TraceRecord> =
        read_jsonl(&a.run_dir.join(TRACE_FILE)).map_err(|e| runtime(format!("export-traces: {e}")))?;
    let metrics: Vec<EpochMetrics> =
        read_jsonl(&a.run_dir.join(METRICS_FILE)).map_err(|e| runtime(format!("export-traces: {e}")))?;
    let dir = &a.out.out_dir;
    create_out_dir(dir)?;
    for (name, body) in [("trace.csv", trace_long_csv(&trace)?), ("metrics.csv", metrics_long_csv(&metrics)?)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| runtime(format!("export-traces: writing {}: {e}", p.display())))?;
    }
    println!(
        "exported {} trace records and {} metric records to {}",
        trace.len(),
        metrics.len(),
        dir.display()
    );
    Ok(())
}

/// The canonical config text, as `train` writes it.
pub fn default_config_json() -> String {
    config_to_json(&TrainConfig::default()).expect("default config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_by_dotted_path() {
        let c = TrainConfig::default();
        let c = apply_override(&c, "modulation.eta=0.3").unwrap();
        assert_eq!(c.modulation.eta, 0.3);
        let c = apply_override(&c, "data.dir=some/where").unwrap();
        assert_eq!(c.data.dir, Some(PathBuf::from("some/where")));
        let c = apply_override(&c, "data.dir=null").unwrap();
        assert_eq!(c.data.dir, None);
        let c = apply_override(&c, "toggles.ge=true").unwrap();
        assert!(c.toggles.ge);
        let c = apply_override(&c, "modulation.ratio_variant=ratio_minus_one").unwrap();
        assert_eq!(c.modulation.ratio_variant, RatioVariant::RatioMinusOne);

        for bad in ["modulation.etaa=1", "epochs", "epochs=abc", "seed.x=1", "epochs=-3"] {
            let e = apply_override(&c, bad).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn toggle_lists() {
        assert_eq!(parse_toggles("none").unwrap(), Toggles::ALL_OFF);
        assert_eq!(parse_toggles("ame,gm,ge,cp,sl").unwrap(), Toggles::ALL_ON);
        assert_eq!(parse_toggles("C4").unwrap(), ablation_row("C4").unwrap().toggles);
        let t = parse_toggles("GM, cp").unwrap();
        assert!(t.gm && t.cp && !t.ame && !t.ge && !t.sl);
        assert!(parse_toggles("gm,xx").is_err());
    }

    #[test]
    fn flags_then_overrides() {
        let a = ConfigArgs {
            eta: Some(0.2),
            overrides: vec!["modulation.eta=0.4".into()],
            epochs: Some(3),
            toggles: Some("A0".into()),
            ..ConfigArgs::default()
        };
        let c = a.resolve(None).unwrap();
        assert_eq!(c.modulation.eta, 0.4);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.toggles, Toggles::ALL_OFF);
        let bad = ConfigArgs {
            eta: Some(1.5),
            ..ConfigArgs::default()
        };
        assert_eq!(bad.resolve(None).unwrap_err().exit_code(), 1);
    }

    fn help_of(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string()
    }

    #[test]
    fn help_lists_defaults() {
        for sub in ["train", "ablate"] {
            let h = help_of(sub);
            for needle in [
                "--alpha",
                "Modulation strength alpha [default: 1]",
                "--eta",
                "[default: 0.5]",
                "--beta",
                "--lambda-recon",
                "--lambda-uni",
                "--lambda-div",
                "--lambda-stat",
                "First epoch of the modulation window [default: 0]",
                "(exclusive) [default: 25]",
                "Weight of the reconstruction loss [default: 1]",
                "Weight of the unimodal loss [default: 0.5]",
                "Weight of the latent-entropy loss [default: 0.1]",
                "Weight of the statistical loss [default: 0.1]",
                "Residual injection weight beta [default: 1]",
            ] {
                assert!(h.contains(needle), "{sub} help lacks `{needle}`:\n{h}");
            }
        }
        let g = help_of("gradcheck");
        assert!(g.contains("[default: 0.0001]") && g.contains("[default: 0.00001]"), "{g}");
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["modbal", "train", "--no-such-flag"]), 1);
        assert_eq!(run_cli(["modbal", "frobnicate"]), 1);
        assert_eq!(run_cli(["modbal"]), 1);
        assert_eq!(run_cli(["modbal", "train", "--help"]), 0);
        assert_eq!(run_cli(["modbal", "train", "--set", "nope=1"]), 1);
    }

    #[test]
    fn default_config_round_trips() {
        let text = default_config_json();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        assert_eq!(config_to_json(&back).unwrap(), text);
    }
}
