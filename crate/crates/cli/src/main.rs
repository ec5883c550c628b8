//! `dpw`: reproducible experiments with differentially private Wasserstein
//! gradients. Every command writes its outputs and a `manifest.json` from
//! which `dpw replay` reproduces them byte for byte.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use dpwgrad::data::{fmt_f64, generate_biased, load_dataset, save_dataset, BiasedConfig, DatasetMeta};
use dpwgrad::privacy::{calibrate_noise, AccountantState, PrivacyBudget, ACCOUNTANT_FORMULA};
use dpwgrad::sensitivity::{run_audit, w2_counterexample_gap, wp_counterexample, AuditKind, AuditSetup};
use dpwgrad::train::{
    dpsgd_train, metrics, output_rows, write_histogram_csv, write_outputs_csv, write_steps_csv, Task, TrainConfig,
};

use config::{file_section, resolve, Flags};

/// Config file sections, one per command.
pub const SECTIONS: &[&str] = &["generate", "train", "calibrate_noise", "sensitivity_audit", "counterexample"];

const MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; one message per offending field.
    Validation(Vec<String>),
    Failure(String),
}

impl From<dpwgrad::Error> for CliError {
    fn from(e: dpwgrad::Error) -> Self {
        match e {
            dpwgrad::Error::Validation(v) => Self::Validation(v),
            dpwgrad::Error::InvalidArgument(m) => Self::Validation(vec![m]),
            other => Self::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failure(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Failure(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "dpw", version, about = "Differentially private (sliced) Wasserstein gradients")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "DPW_OUT_DIR", default_value = "dpw-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a biased synthetic dataset (CSV plus JSON sidecar).
    #[command(allow_negative_numbers = true)]
    Generate(GenerateArgs),
    /// Train a fairness-penalized model with DP-SGD.
    #[command(allow_negative_numbers = true)]
    Train(TrainArgs),
    /// Smallest noise meeting an (epsilon, delta) target.
    #[command(allow_negative_numbers = true)]
    CalibrateNoise(CalibrateArgs),
    /// Probe a clipped gradient with random neighbors and compare to its bound.
    #[command(allow_negative_numbers = true)]
    SensitivityAudit(AuditArgs),
    /// W_p gradient gaps that do not shrink with n.
    Counterexample(CounterexampleArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, run independently into `seed-<s>/` subdirectories.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    d_core: Option<usize>,
    #[arg(long)]
    d_sp: Option<usize>,
    #[arg(long)]
    var_core: Option<f64>,
    #[arg(long)]
    var_sp: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// classification_sp, classification_eo, regression_sp, autoencoder_sp or generation.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Target epsilon; `inf` trains without noise.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Per-sample loss-gradient clip C.
    #[arg(long)]
    clip_c: Option<f64>,
    /// Activation clip M.
    #[arg(long)]
    clip_m: Option<f64>,
    /// Jacobian clip L (both sides).
    #[arg(long)]
    clip_l: Option<f64>,
    #[arg(long)]
    batch_divisor: Option<usize>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    resample_directions: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    /// Training set size when generating data.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Probability that a = y in generated data.
    #[arg(long)]
    p: Option<f64>,
    /// Train on a CSV written by `generate` instead of generating data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Sampling rate p = batch size / class size.
    #[arg(long)]
    rate: Option<f64>,
    /// l2-sensitivity of one step's gradient.
    #[arg(long)]
    sensitivity: Option<f64>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// one_sided, two_sided, sp or eo.
    #[arg(long)]
    kind: Option<String>,
    /// Activation clip M.
    #[arg(long)]
    activation: Option<f64>,
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    loss_clip: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct CounterexampleArgs {
    #[command(flatten)]
    common: Common,
    /// Sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    /// Orders p of W_p.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Fully merged settings of the run.
    pub config: Value,
    pub seed: Option<u64>,
    pub library_version: String,
    pub accountant_formula: String,
    /// Files written next to the manifest.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainData {
    data: BiasedConfig,
    n_test: usize,
    data_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrateSpec {
    epsilon: f64,
    delta: f64,
    steps: u64,
    sampling_rate: f64,
    sensitivity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CounterexampleSpec {
    n: Vec<usize>,
    p: Vec<f64>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("settings serialize")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn train_defaults(task: Task) -> Value {
    let mut v = to_value(&TrainConfig::for_task(task));
    let extra = to_value(&TrainData {
        data: BiasedConfig::default(),
        n_test: 10_000,
        data_path: None,
    });
    config::merge(&mut v, extra);
    v
}

/// Splits merged train settings into the data part and the trainer part.
fn parse_train(merged: &Value) -> CliResult<(TrainData, TrainConfig)> {
    let mut obj: Map<String, Value> = merged
        .as_object()
        .cloned()
        .ok_or_else(|| CliError::Validation(vec!["train settings must be a table".into()]))?;
    let mut data = Map::new();
    for key in ["data", "n_test", "data_path"] {
        if let Some(v) = obj.remove(key) {
            data.insert(key.to_string(), v);
        }
    }
    let bad = |e: serde_json::Error| CliError::Validation(vec![e.to_string()]);
    let data: TrainData = serde_json::from_value(Value::Object(data)).map_err(bad)?;
    let cfg: TrainConfig = serde_json::from_value(Value::Object(obj)).map_err(bad)?;
    Ok((data, cfg))
}

fn check_spec(command: &str, spec: &Value) -> CliResult<()> {
    match command {
        "generate" => serde_json::from_value::<BiasedConfig>(spec.clone())
            .map_err(|e| CliError::Validation(vec![e.to_string()]))?
            .validate()?,
        "train" => {
            let (data, cfg) = parse_train(spec)?;
            let mut bad = Vec::new();
            if let Err(dpwgrad::Error::Validation(v)) = data.data.validate() {
                bad.extend(v.into_iter().map(|m| format!("data: {m}")));
            }
            if data.n_test == 0 {
                bad.push("n_test must be >= 1".into());
            }
            if let Err(dpwgrad::Error::Validation(v)) = cfg.validate() {
                bad.extend(v);
            }
            if !bad.is_empty() {
                return Err(CliError::Validation(bad));
            }
        }
        "sensitivity_audit" => serde_json::from_value::<AuditSetup>(spec.clone())
            .map_err(|e| CliError::Validation(vec![e.to_string()]))?
            .validate()?,
        _ => {}
    }
    Ok(())
}

fn seed_paths(command: &str) -> &'static [&'static str] {
    match command {
        "generate" | "sensitivity_audit" => &["seed"],
        "train" => &["seed", "data.seed"],
        _ => &[],
    }
}

fn set_seed(spec: &mut Value, command: &str, seed: u64) {
    for path in seed_paths(command) {
        let mut node = &mut *spec;
        let keys: Vec<&str> = path.split('.').collect();
        for k in &keys[..keys.len() - 1] {
            node = &mut node[*k];
        }
        node[keys[keys.len() - 1]] = Value::from(seed);
    }
}

fn seed_of(spec: &Value, command: &str) -> Option<u64> {
    seed_paths(command).first().and_then(|k| spec.get(*k)).and_then(Value::as_u64)
}

/// Runs one command with fully merged settings and writes its manifest.
fn run_and_record(command: &str, spec: &Value, out: &Path) -> CliResult<RunManifest> {
    std::fs::create_dir_all(out)?;
    let (outputs, outcome) = execute(command, spec, out)?;
    let mut all = outputs;
    all.push(MANIFEST.to_string());
    let manifest = RunManifest {
        command: command.to_string(),
        config: spec.clone(),
        seed: seed_of(spec, command),
        library_version: dpwgrad::VERSION.to_string(),
        accountant_formula: ACCOUNTANT_FORMULA.to_string(),
        outputs: all,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    outcome?;
    Ok(manifest)
}

/// Returns the files written and whether the run's invariants held.
fn execute(command: &str, spec: &Value, out: &Path) -> CliResult<(Vec<String>, CliResult<()>)> {
    check_spec(command, spec)?;
    match command {
        "generate" => {
            let cfg: BiasedConfig = serde_json::from_value(spec.clone())?;
            let ds = generate_biased(&cfg)?;
            save_dataset(&ds, &out.join("data.csv"))?;
            let meta = DatasetMeta::of(&ds);
            println!(
                "generated {} records (dim {}), sizes by a: {:?}, by (a, y): {:?}",
                meta.n, meta.dim, meta.sizes_by_a, meta.sizes_by_a_and_y
            );
            Ok((vec!["data.csv".into(), "data.json".into()], Ok(())))
        }
        "train" => run_train(spec, out),
        "calibrate_noise" => {
            let s: CalibrateSpec = serde_json::from_value(spec.clone())
                .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
            let target = PrivacyBudget {
                epsilon: s.epsilon,
                delta: s.delta,
            };
            let cal = calibrate_noise(target, s.steps, s.sampling_rate, s.sensitivity)?;
            println!("sigma = {}", cal.sigma);
            println!("noise multiplier = {}", cal.noise_multiplier);
            println!("mu = {}", cal.mu);
            println!("{:>10} {:>22}", "steps", "epsilon");
            let mut table = Vec::new();
            let mut acc = AccountantState::new(cal.noise_multiplier, s.sampling_rate, s.delta)?;
            let marks: Vec<u64> = [10, 4, 2, 1]
                .iter()
                .map(|d| (s.steps / d).max(1))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for t in marks {
                acc.steps = t;
                let eps = acc.epsilon()?;
                println!("{t:>10} {eps:>22.12}");
                table.push(serde_json::json!({"steps": t, "epsilon": eps}));
            }
            write_json(
                &out.join("calibration.json"),
                &serde_json::json!({"settings": s, "calibration": cal, "budget": table}),
            )?;
            Ok((vec!["calibration.json".into()], Ok(())))
        }
        "sensitivity_audit" => {
            let setup: AuditSetup = serde_json::from_value(spec.clone())?;
            let report = run_audit(&setup)?;
            println!(
                "bound = {}, empirical max = {}, ratio = {}, trials = {}",
                report.theoretical_bound, report.empirical_max, report.ratio, report.trials
            );
            write_json(&out.join("report.json"), &report)?;
            let outcome = if report.within_bound() {
                Ok(())
            } else {
                Err(CliError::Failure("empirical sensitivity exceeds the closed-form bound".into()))
            };
            Ok((vec!["report.json".into()], outcome))
        }
        "counterexample" => {
            let s: CounterexampleSpec = serde_json::from_value(spec.clone())
                .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
            let mut w = csv::Writer::from_path(out.join("counterexample.csv")).map_err(|e| CliError::Failure(e.to_string()))?;
            let header = ["n", "p", "grad_x", "grad_xtilde", "gap", "w2_gap", "w2_bound"];
            w.write_record(header).map_err(|e| CliError::Failure(e.to_string()))?;
            println!("{:>8} {:>5} {:>10} {:>12} {:>8} {:>12} {:>12}", "n", "p", "grad_x", "grad_xtilde", "gap", "w2_gap", "w2_bound");
            let mut ok = true;
            for &n in &s.n {
                let (w2_gap, w2_bound) = w2_counterexample_gap(n)?;
                for &p in &s.p {
                    let c = wp_counterexample(n, p)?;
                    ok &= (c.gap - 2.0).abs() < 1e-9 && w2_gap <= w2_bound;
                    println!(
                        "{n:>8} {p:>5} {:>10.6} {:>12.6} {:>8.6} {w2_gap:>12.6e} {w2_bound:>12.6e}",
                        c.grad_x, c.grad_xtilde, c.gap
                    );
                    w.write_record([
                        n.to_string(),
                        fmt_f64(p),
                        fmt_f64(c.grad_x),
                        fmt_f64(c.grad_xtilde),
                        fmt_f64(c.gap),
                        fmt_f64(w2_gap),
                        fmt_f64(w2_bound),
                    ])
                    .map_err(|e| CliError::Failure(e.to_string()))?;
                }
            }
            w.flush()?;
            let outcome = if ok {
                Ok(())
            } else {
                Err(CliError::Failure("counterexample gap differs from 2".into()))
            };
            Ok((vec!["counterexample.csv".into()], outcome))
        }
        other => Err(CliError::Validation(vec![format!("unknown command '{other}'")])),
    }
}

fn run_train(spec: &Value, out: &Path) -> CliResult<(Vec<String>, CliResult<()>)> {
    let (data, cfg) = parse_train(spec)?;
    let ds = match &data.data_path {
        Some(p) => load_dataset(p)?,
        None => generate_biased(&data.data)?,
    };
    let test = generate_biased(&ds.config.test_split(data.n_test))?;
    let mut record = dpsgd_train(&cfg, &ds)?;
    let table = metrics(&test, &record.model, &cfg)?;
    record.metrics = Some(table.clone());
    write_json(&out.join("record.json"), &record)?;
    record.model.save_json(&out.join("model.json"))?;
    write_steps_csv(&out.join("steps.csv"), &record.steps)?;
    let rows = output_rows(&test, &record.model, &cfg)?;
    write_outputs_csv(&out.join("outputs.csv"), &rows)?;
    write_histogram_csv(&out.join("histogram.csv"), &rows, 20)?;
    println!("task {} on {} records, batches {:?}", cfg.task.name(), record.n_train, record.batch_sizes);
    println!("sensitivity = {}, sigma = {}", record.sensitivity, record.sigma);
    match record.spent {
        Some(b) => println!("spent epsilon = {} at delta = {:e}", b.epsilon, b.delta),
        None => println!("non-private run"),
    }
    if let Some(last) = record.steps.last() {
        println!("final loss: total {}, erm {}, wasserstein {}", last.total, last.erm_loss, last.w_loss);
    }
    for (k, v) in &table.0 {
        match v {
            Some(v) => println!("{k} = {v}"),
            None => println!("{k} = undefined"),
        }
    }
    Ok((
        ["record.json", "model.json", "steps.csv", "outputs.csv", "histogram.csv"]
            .map(String::from)
            .to_vec(),
        Ok(()),
    ))
}

/// Runs `command` once, or once per seed into `seed-<s>/` in parallel.
fn dispatch(command: &str, spec: Value, seeds: &[u64], out: &Path) -> CliResult<()> {
    if seeds.is_empty() {
        return run_and_record(command, &spec, out).map(|_| ());
    }
    check_spec(command, &spec)?;
    let results: Vec<CliResult<RunManifest>> = seeds
        .par_iter()
        .map(|&s| {
            let mut sp = spec.clone();
            set_seed(&mut sp, command, s);
            run_and_record(command, &sp, &out.join(format!("seed-{s}")))
        })
        .collect();
    results.into_iter().try_for_each(|r| r.map(|_| ()))
}

fn seed_flag(flags: &mut Flags, command: &str, seed: Option<u64>) {
    for path in seed_paths(command) {
        flags.put(path, seed);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out;
    match cli.command {
        Command::Generate(a) => {
            let mut f = Flags::default();
            f.put("n", a.n)
                .put("p", a.p)
                .put("d_core", a.d_core)
                .put("d_sp", a.d_sp)
                .put("var_core", a.var_core)
                .put("var_sp", a.var_sp);
            seed_flag(&mut f, "generate", a.seeds.seed);
            let file = file_section(a.common.config.as_deref(), "generate")?;
            let (_, spec): (BiasedConfig, Value) = resolve(to_value(&BiasedConfig::default()), file, f.into_value())?;
            dispatch("generate", spec, &a.seeds.seeds, &out)
        }
        Command::Train(a) => {
            let file = file_section(a.common.config.as_deref(), "train")?;
            let task_name = a
                .task
                .clone()
                .or_else(|| file.get("task").and_then(Value::as_str).map(String::from))
                .unwrap_or_else(|| "classification_sp".into());
            let task: Task = task_name.parse()?;
            let mut f = Flags::default();
            f.put("task", Some(task))
                .put("steps", a.steps)
                .put("learning_rate", a.lr)
                .put("alpha", a.alpha)
                .put("delta", a.delta)
                .put("clip.loss_grad", a.clip_c)
                .put("clip.activation", a.clip_m)
                .put("clip.jacobian_g", a.clip_l)
                .put("clip.jacobian_h", a.clip_l)
                .put("batch_divisor", a.batch_divisor)
                .put("num_directions", a.directions)
                .put("resample_directions", a.resample_directions.then_some(true))
                .put("hidden", a.hidden)
                .put("latent", a.latent)
                .put("data.n", a.n)
                .put("data.p", a.p)
                .put("n_test", a.n_test)
                .put("data_path", a.data.clone());
            if let Some(eps) = a.epsilon {
                f.put("epsilon", Some(if eps.is_finite() { Value::from(eps) } else { Value::Null }));
            }
            seed_flag(&mut f, "train", a.seeds.seed);
            let (_, spec): (Value, Value) = resolve(train_defaults(task), file, f.into_value())?;
            check_spec("train", &spec)?;
            dispatch("train", spec, &a.seeds.seeds, &out)
        }
        Command::CalibrateNoise(a) => {
            let mut f = Flags::default();
            f.put("epsilon", a.epsilon)
                .put("delta", a.delta)
                .put("steps", a.steps)
                .put("sampling_rate", a.rate)
                .put("sensitivity", a.sensitivity);
            let defaults = to_value(&CalibrateSpec {
                epsilon: 1.0,
                delta: 1e-5,
                steps: 500,
                sampling_rate: 0.2,
                sensitivity: 1.0,
            });
            let file = file_section(a.common.config.as_deref(), "calibrate_noise")?;
            let (_, spec): (CalibrateSpec, Value) = resolve(defaults, file, f.into_value())?;
            dispatch("calibrate_noise", spec, &[], &out)
        }
        Command::SensitivityAudit(a) => {
            let mut f = Flags::default();
            let kind = match a.kind.as_deref() {
                None => None,
                Some(k) => Some(
                    serde_json::from_value::<AuditKind>(Value::from(k))
                        .map_err(|_| CliError::Validation(vec![format!("kind: unknown audit kind '{k}'")]))?,
                ),
            };
            f.put("kind", kind)
                .put("activation", a.activation)
                .put("l1", a.l1)
                .put("l2", a.l2)
                .put("loss_clip", a.loss_clip)
                .put("alpha", a.alpha)
                .put("n", a.n)
                .put("m", a.m)
                .put("dim", a.dim)
                .put("directions", a.directions)
                .put("trials", a.trials);
            seed_flag(&mut f, "sensitivity_audit", a.seeds.seed);
            let file = file_section(a.common.config.as_deref(), "sensitivity_audit")?;
            let (_, spec): (AuditSetup, Value) = resolve(to_value(&AuditSetup::default()), file, f.into_value())?;
            dispatch("sensitivity_audit", spec, &a.seeds.seeds, &out)
        }
        Command::Counterexample(a) => {
            let mut f = Flags::default();
            f.put("n", (!a.n.is_empty()).then_some(a.n)).put("p", (!a.p.is_empty()).then_some(a.p));
            let defaults = to_value(&CounterexampleSpec {
                n: vec![10, 100, 1000],
                p: vec![1.0, 2.0],
            });
            let file = file_section(a.common.config.as_deref(), "counterexample")?;
            let (_, spec): (CounterexampleSpec, Value) = resolve(defaults, file, f.into_value())?;
            dispatch("counterexample", spec, &[], &out)
        }
        Command::Replay(a) => {
            let text = std::fs::read_to_string(&a.manifest)
                .map_err(|e| CliError::Failure(format!("cannot read {}: {e}", a.manifest.display())))?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(vec![format!("manifest: {e}")]))?;
            if manifest.library_version != dpwgrad::VERSION {
                eprintln!(
                    "warning: manifest was written by version {}, running {}",
                    manifest.library_version,
                    dpwgrad::VERSION
                );
            }
            run_and_record(&manifest.command, &manifest.config, &out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(fields)) => {
            eprintln!("validation error:");
            for f in fields {
                eprintln!("  - {f}");
            }
            ExitCode::from(3)
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
