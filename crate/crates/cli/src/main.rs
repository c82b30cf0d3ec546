//! Command-line pipeline: generate scenarios, train a model, evaluate it,
//! compare reports, and inspect single rollouts.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numeric
//! failure (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use kinpred::autodiff::{read_checkpoint, write_checkpoint};
use kinpred::datagen::{generate_mix, read_dataset, split, write_dataset, Sample, ScenarioSpec};
use kinpred::error::Error;
use kinpred::evaluation::{
    compare, evaluate_by_scenario, evaluate_with, parse_report_csv, EvalOptions, MetricReport,
    REPORT_HEADER,
};
use kinpred::kinematics::{rollout, ControlInput, KinematicParams, VehicleState};
use kinpred::models::{HeadKind, Model, ModelConfig};
use kinpred::training::{metrics_to_csv, train, TrainConfig};

#[derive(Parser)]
#[command(name = "kinpred", version, about = "Trajectory prediction with a kinematic-bicycle decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset (JSONL) plus a metadata sidecar.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a metrics-log CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset and write a report CSV.
    Eval(EvalArgs),
    /// Merge report CSVs into a comparison table.
    Compare(CompareArgs),
    /// Print a bicycle-model rollout as CSV rows for desk verification.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario spec JSON: a single spec object or {"scenarios": [...]}.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON; may carry a "train" object with optimizer settings.
    #[arg(long)]
    config: PathBuf,
    /// Training dataset (JSONL). Split 3:1:1 internally unless --val-data is given.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's decoder head.
    #[arg(long)]
    head: Option<String>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate on this dataset instead of an internal split.
    #[arg(long)]
    val_data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    report: PathBuf,
    /// Score the best mode per sample instead of the top-ranked one.
    #[arg(long)]
    min_over_n: bool,
    /// Append per-scenario rows to the report.
    #[arg(long)]
    by_scenario: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Report CSVs, row order preserved.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    /// Initial state as "x,y,psi,v".
    #[arg(long)]
    state: String,
    /// Control file: one "accel,steer" line per step.
    #[arg(long)]
    controls: Option<PathBuf>,
    /// Constant control as "accel,steer", repeated over the horizon.
    #[arg(long)]
    constant: Option<String>,
    /// Kinematic params JSON {"l_r","l_f","a_max","gamma_max","r_min"};
    /// defaults to a midsize sedan.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long = "H", default_value_t = 60)]
    h: usize,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Version/help requests are successful exits; everything else is
            // a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Rollout(a) => cmd_rollout(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}

/// Writes the resolved run configuration next to an output file, as
/// `<output name>.run.json`.
fn write_run_config(out: &Path, value: serde_json::Value) -> Result<(), Error> {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    let sidecar = out.with_file_name(name);
    std::fs::write(&sidecar, format!("{}\n", serde_json::to_string_pretty(&value)?))?;
    Ok(())
}

fn parse_spec_file(path: &Path) -> Result<Vec<(ScenarioSpec, f64)>, Error> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(list) = value.get("scenarios") {
        #[derive(serde::Deserialize)]
        struct Weighted {
            #[serde(flatten)]
            spec: ScenarioSpec,
            #[serde(default = "one")]
            weight: f64,
        }
        fn one() -> f64 {
            1.0
        }
        let entries: Vec<Weighted> = serde_json::from_value(list.clone())?;
        if entries.is_empty() {
            return Err(Error::InvalidParam("spec file has an empty scenarios list".into()));
        }
        Ok(entries.into_iter().map(|w| (w.spec, w.weight)).collect())
    } else {
        let spec: ScenarioSpec = serde_json::from_value(value)?;
        Ok(vec![(spec, 1.0)])
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult {
    let specs = parse_spec_file(&a.spec)?;
    for (spec, _) in &specs {
        spec.validate()?;
    }
    let samples = generate_mix(&specs, a.count, a.seed)?;
    write_dataset(&samples, &a.out).map_err(CliError::from)?;

    let mut counts = std::collections::BTreeMap::new();
    for s in &samples {
        *counts.entry(s.scenario.clone()).or_insert(0u64) += 1;
    }
    let meta = serde_json::json!({
        "command": "generate",
        "spec": specs.iter().map(|(s, w)| serde_json::json!({"spec": s, "weight": w})).collect::<Vec<_>>(),
        "seed": a.seed,
        "count": a.count,
        "counts_by_scenario": counts,
        "out": a.out.display().to_string(),
    });
    let sidecar = a.out.with_extension("meta.json");
    std::fs::write(&sidecar, format!("{}\n", serde_json::to_string_pretty(&meta).map_err(Error::from)?))
        .map_err(Error::from)?;
    write_run_config(&a.out, meta)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_train_file(path: &Path) -> Result<(ModelConfig, TrainConfig), Error> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let model: ModelConfig = serde_json::from_value(value.clone())?;
    let tc: TrainConfig = match value.get("train") {
        Some(t) => serde_json::from_value(t.clone())?,
        None => TrainConfig::default(),
    };
    Ok((model, tc))
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let (mut cfg, mut tc) = load_train_file(&a.config)?;
    if let Some(head) = &a.head {
        cfg.head = HeadKind::parse(head)?;
    }
    if let Some(iters) = a.iters {
        tc.max_iters = iters;
    }
    if let Some(seed) = a.seed {
        tc.seed = seed;
    }
    cfg.validate()?;

    let data = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("dataset {} is empty", a.data.display())));
    }
    let (train_set, val_set): (Vec<Sample>, Vec<Sample>) = match &a.val_data {
        Some(vp) => (data, read_dataset(vp)?),
        None => {
            let (t, v, _test) = split(&data, tc.seed);
            (t, v)
        }
    };

    let out = train(&cfg, &train_set, &val_set, &tc)?;
    let config_value = serde_json::to_value(&cfg).map_err(Error::from)?;
    write_checkpoint(&a.out, &out.model.params, Some(&out.adam), Some(&config_value))?;
    let metrics_path = a.out.with_extension("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(&out.rows)).map_err(Error::from)?;
    write_run_config(
        &a.out,
        serde_json::json!({
            "command": "train",
            "model_config": cfg,
            "train_config": tc,
            "data": a.data.display().to_string(),
            "val_data": a.val_data.as_ref().map(|p| p.display().to_string()),
            "out": a.out.display().to_string(),
            "metrics": metrics_path.display().to_string(),
        }),
    )?;
    let final_loss = out.rows.last().map(|r| r.loss_total);
    println!(
        "trained {} for {} iterations, final loss {}",
        cfg.head,
        tc.max_iters,
        final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model, Error> {
    let ck = read_checkpoint(ckpt)?;
    let config_value = ck
        .model_config
        .clone()
        .ok_or_else(|| Error::InvalidParam(format!("checkpoint {} carries no model_config", ckpt.display())))?;
    let cfg: ModelConfig = serde_json::from_value(config_value)?;
    let mut model = Model::new(cfg, 0)?;
    ck.apply_params(&mut model.params)?;
    Ok(model)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let model = load_model(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("test set {} is empty", a.data.display())));
    }
    let opts = EvalOptions { min_over_n: a.min_over_n };
    let report = evaluate_with(&model, &data, opts)?;
    let mut csv = report.to_csv();
    if a.by_scenario {
        for (_, rep) in evaluate_by_scenario(&model, &data)? {
            csv.push_str(&rep.csv_row());
            csv.push('\n');
        }
    }
    std::fs::write(&a.report, csv).map_err(Error::from)?;
    write_run_config(
        &a.report,
        serde_json::json!({
            "command": "eval",
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "report": a.report.display().to_string(),
            "min_over_n": a.min_over_n,
            "by_scenario": a.by_scenario,
            "heading_error_definition": "mean absolute wrapped heading difference at the horizon point, degrees",
        }),
    )?;
    println!("{}", report.to_csv().trim_end());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CliResult {
    let mut reports: Vec<MetricReport> = Vec::new();
    for path in &a.reports {
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        let mut rows = parse_report_csv(&text)?;
        reports.append(&mut rows);
    }
    let table = compare(&reports)?;
    std::fs::write(&a.out, table.to_csv()).map_err(Error::from)?;
    write_run_config(
        &a.out,
        serde_json::json!({
            "command": "compare",
            "reports": a.reports.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "out": a.out.display().to_string(),
            "columns": REPORT_HEADER,
        }),
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn parse_csv_numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != n {
        return Err(CliError::Usage(format!("{what} needs {n} comma-separated numbers, got {:?}", s)));
    }
    parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("{what}: bad number {p:?}: {e}")))
        })
        .collect()
}

fn cmd_rollout(a: RolloutArgs) -> CliResult {
    let st = parse_csv_numbers(&a.state, 4, "--state")?;
    let initial = VehicleState::new(st[0], st[1], st[2], st[3]);
    let params: KinematicParams = match &a.params {
        None => KinematicParams::midsize_sedan(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            let k: KinematicParams = serde_json::from_str(&text).map_err(Error::from)?;
            k.validate()?;
            k
        }
    };
    let controls: Vec<ControlInput> = match (&a.controls, &a.constant) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--controls and --constant are mutually exclusive".into()))
        }
        (None, None) => {
            return Err(CliError::Usage("one of --controls or --constant is required".into()))
        }
        (None, Some(c)) => {
            let v = parse_csv_numbers(c, 2, "--constant")?;
            vec![ControlInput::new(v[0], v[1]); a.h]
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v = parse_csv_numbers(line, 2, &format!("controls line {}", i + 1))
                    .map_err(|e| match e {
                        CliError::Usage(m) => CliError::Data(m),
                        other => other,
                    })?;
                out.push(ControlInput::new(v[0], v[1]));
            }
            if out.is_empty() {
                return Err(CliError::Data(format!("control file {} is empty", path.display())));
            }
            out.truncate(a.h);
            out
        }
    };
    let states = rollout(&initial, &controls, &params, a.dt)?;
    // Tolerate a closing pipe (e.g. piping into `head`).
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if writeln!(out, "h,x,y,psi,v").is_err() {
        return Ok(());
    }
    for (i, s) in states.iter().enumerate() {
        if writeln!(out, "{},{:.9},{:.9},{:.9},{:.9}", i + 1, s.x, s.y, s.psi, s.v).is_err() {
            return Ok(());
        }
    }
    Ok(())
}
