use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agefair::data::{generate_synthetic, load_csv, save_csv};
use agefair::error::{Error, Result};
use agefair::fairness::{delta_eo, grouped_rates, make_age_groups, read_predictions};
use agefair::harness::{gradcheck_suite, run_experiment, ExperimentConfig};
use agefair::models::{probe_age, ModelKind, ProbeConfig};

#[derive(Parser)]
#[command(
    name = "agefair",
    version,
    about = "Age-disentangled impairment classifiers and their equalized-odds score"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated experiment over the configured models.
    Run(RunArgs),
    /// Equalized-odds score of a predictions CSV (`id,true_label,pred_label,age`).
    Metric(MetricArgs),
    /// Cross-validated age regression on a feature CSV.
    ProbeAge(ProbeArgs),
    /// Write a synthetic dataset and its generative parameters.
    Synth(SynthArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated group counts, e.g. `2,5`.
    #[arg(long)]
    groups: Option<String>,
    /// Model kind; repeat or comma-separate for several.
    #[arg(long = "model", value_delimiter = ',')]
    models: Vec<ModelKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoupled weight decay of the trained models.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Any configuration key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct MetricArgs {
    predictions: PathBuf,
    #[arg(long, default_value = "2,5")]
    groups: String,
}

#[derive(Args)]
struct ProbeArgs {
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    /// Write the per-fold result as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment config whose `synth.*` keys set the generator.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `data.csv` and `ground_truth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let message = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {message}");
            eprintln!("run `agefair --help` for usage");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Metric(a) => metric(a),
        Command::ProbeAge(a) => probe(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(folds) = a.folds {
        cfg.folds = folds;
    }
    if let Some(groups) = &a.groups {
        cfg.set("groups", groups)?;
    }
    if !a.models.is_empty() {
        cfg.models = a.models;
    }
    if let Some(out) = a.out {
        cfg.out_dir = Some(out);
    }
    if let Some(wd) = a.weight_decay {
        cfg.train.adam.weight_decay = wd;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg)?;
    report.check_consistency()?;
    print!("{}", report.to_markdown());
    if let Some(dir) = &cfg.out_dir {
        println!("\nwrote {}", dir.join("report.json").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_groups(text: &str) -> Result<Vec<usize>> {
    let groups =
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>().ok().filter(|&n| n >= 1).ok_or_else(|| {
                    Error::Input(format!("group count {s:?} is not a positive integer"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
    if groups.is_empty() {
        return Err(Error::Input("no group counts given".into()));
    }
    Ok(groups)
}

fn metric(a: MetricArgs) -> Result<ExitCode> {
    let groups = parse_groups(&a.groups)?;
    let preds = read_predictions(&a.predictions)?;
    let ages: Vec<f64> = preds.iter().map(|p| p.age).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.true_label).collect();
    for n in groups {
        let grouping = make_age_groups(&ages, &labels, n)?;
        let value = delta_eo(&grouped_rates(&preds, &grouping)?)?;
        println!("delta_eo({n}) = {value:?}");
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(a: ProbeArgs) -> Result<ExitCode> {
    let loaded = load_csv(&a.data)?;
    if loaded.dropped_rows > 0 {
        eprintln!(
            "dropped {} rows with missing age or label",
            loaded.dropped_rows
        );
    }
    let mut cfg = ProbeConfig {
        folds: a.folds,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    let result = probe_age(&loaded.matrix, &cfg)?;
    println!(
        "age MAE {:.3} ± {:.3} years over {} folds (mean predictor {:.3})",
        result.mean,
        result.std,
        result.fold_scores.len(),
        result.reference_mean
    );
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&result)? + "\n";
        std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let synth = cfg
        .synth_config()
        .ok_or_else(|| Error::Config("the config names a CSV source, not synthetic data".into()))?;
    let ds = generate_synthetic(&synth)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let data = a.out.join("data.csv");
    save_csv(&data, &ds.matrix)?;
    let truth = a.out.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&ds.truth)? + "\n";
    std::fs::write(&truth, json).map_err(|e| Error::io(&truth, e))?;
    println!(
        "wrote {} ({} samples, {} features) and {}",
        data.display(),
        ds.matrix.len(),
        ds.matrix.n_features(),
        truth.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cases = gradcheck_suite(a.seed)?;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:>4}  {:.3e} < {:.0e}  {}",
            c.max_relative_error, c.tolerance, c.name
        );
        worst = worst.max(c.max_relative_error);
        failed += usize::from(!c.passed());
    }
    println!("max relative error {worst:.3e}");
    if failed > 0 {
        eprintln!("error[numeric]: {failed} gradient check(s) exceeded tolerance");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
