use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ratiovr::eval::{analyze_experiment, run_table};
use ratiovr::io::{self, AnalysisConfig, Format, IngestOptions};
use ratiovr::ratio::compute_retention_components;
use ratiovr::sim::{EffectDistribution, SimConfig, SuiteConfig};
use ratiovr::{CovariateSet, Error, Experiment, Result, UnitRecord, VrConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "ratiovr", version, about = "Variance-reduced tests for ratio metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a suite of synthetic retention experiments.
    Simulate(SimulateArgs),
    /// Test one experiment, raw and variance-reduced.
    Analyze(AnalyzeArgs),
    /// Compare methods over A/B and A/A suites.
    Evaluate(EvaluateArgs),
    /// Turn a day-level activity file into unit records.
    Retention(RetentionArgs),
    /// Print the program and schema versions.
    Version,
}

#[derive(Args)]
struct SimulateArgs {
    /// Suite description (generator, effects, n_experiments, seed); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Expected users per variant.
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Additive effect on the retention probability (the mean when spread).
    #[arg(long, allow_hyphen_values = true)]
    effect: Option<f64>,
    /// Draw per-experiment effects from a normal with this standard deviation.
    #[arg(long, conflicts_with = "effect_max")]
    effect_sd: Option<f64>,
    /// Draw per-experiment effects uniformly from [effect, effect-max].
    #[arg(long, allow_hyphen_values = true)]
    effect_max: Option<f64>,
    #[arg(long)]
    base_retention: Option<f64>,
    #[arg(long)]
    heterogeneity: Option<f64>,
    #[arg(long)]
    pre_post_correlation: Option<f64>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    signal_fraction: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    new_user_fraction: Option<f64>,
    #[arg(long)]
    experiments: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output directory; receives one file per experiment and a manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Label of the control variant.
    #[arg(long)]
    control: Option<String>,
    /// One of raw, pre, pred, union.
    #[arg(long)]
    method: Option<String>,
    /// Cross-fitting folds for the GBDT predictions (0 = in-sample).
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Analysis settings (metric, GBDT parameters, alpha).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite directory of A/B experiments.
    #[arg(long)]
    ab: PathBuf,
    /// Suite directory of A/A experiments for type-I error.
    #[arg(long)]
    aa: Option<PathBuf>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "pre,pred,union")]
    method: Vec<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print the aligned text table to standard output.
    #[arg(long)]
    table: bool,
    /// Per-experiment rows as CSV, for plotting.
    #[arg(long)]
    details: Option<PathBuf>,
}

#[derive(Args)]
struct RetentionArgs {
    /// Activity CSV: unit_id,variant,d0,...,d{n-1}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Accepted for uniformity; the conversion is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut suite = match &args.config {
        Some(p) => load_json::<SuiteConfig>(p)?,
        None => SuiteConfig {
            generator: SimConfig::default(),
            effects: EffectDistribution::Fixed { value: 0.0 },
            n_experiments: 1,
            seed: 0,
        },
    };
    let g = &mut suite.generator;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.users, g.n_users);
    set!(args.days, g.window_days);
    set!(args.base_retention, g.base_retention);
    set!(args.heterogeneity, g.user_heterogeneity);
    set!(args.pre_post_correlation, g.pre_post_correlation);
    set!(args.features, g.n_features);
    set!(args.signal_fraction, g.feature_signal_fraction);
    set!(args.feature_noise, g.feature_noise);
    set!(args.new_user_fraction, g.new_user_fraction);
    set!(args.experiments, suite.n_experiments);
    set!(args.seed, suite.seed);
    if args.effect.is_some() || args.effect_sd.is_some() || args.effect_max.is_some() {
        let value = args.effect.unwrap_or(0.0);
        suite.effects = match (args.effect_sd, args.effect_max) {
            (Some(sd), _) => EffectDistribution::Normal { mean: value, sd },
            (None, Some(high)) => EffectDistribution::Uniform { low: value, high },
            (None, None) => EffectDistribution::Fixed { value },
        };
    }
    let generated = suite.generate()?;
    io::write_suite(&args.out, &generated, &suite.generator, suite.effects, suite.seed, args.format)?;
    Ok(())
}

fn analysis_config(path: Option<&Path>) -> Result<AnalysisConfig> {
    match path {
        Some(p) => AnalysisConfig::load(p),
        None => Ok(AnalysisConfig::default()),
    }
}

fn apply_overrides(config: &mut AnalysisConfig, folds: Option<usize>, alpha: Option<f64>, seed: Option<u64>) {
    if let Some(f) = folds {
        config.vr.cross_fit_folds = f;
    }
    if let Some(a) = alpha {
        config.alpha = a;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.vr.gbdt_params.seed = config.seed;
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut config = analysis_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.folds, args.alpha, args.seed);
    if let Some(c) = args.control {
        config.control_variant = c;
    }
    if let Some(m) = &args.method {
        config.vr.covariate_set = CovariateSet::from_label(m)?;
    }
    if let Some(p) = args.input {
        config.input = Some(p);
    }
    if let Some(p) = args.output {
        config.output = Some(p);
    }
    config.validate()?;
    let input = config
        .input
        .clone()
        .ok_or_else(|| Error::config("no input file (use --input or the config's 'input')"))?;
    let format = args
        .format
        .or(config.format)
        .or_else(|| Format::from_path(&input))
        .ok_or_else(|| Error::config("cannot infer the input format; pass --format"))?;
    let opts = IngestOptions {
        metric: Some(&config.metric),
        reject_threshold: config.reject_threshold,
    };
    let ingested = io::ingest(&input, format, &opts)?;
    if !ingested.records.iter().any(|u| u.variant == config.control_variant) {
        return Err(Error::config(format!(
            "no units in control variant '{}'; name the control with --control",
            config.control_variant
        )));
    }
    let id = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let experiment = Experiment::from_units(id, ingested.records, &config.control_variant)?;
    let mut report = analyze_experiment(&experiment, &config.metric, &config.vr, config.alpha)?;
    report.validation = Some(ingested.report);
    write_output(config.output.as_deref(), &report.to_json()?)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config = analysis_config(args.config.as_deref())?;
    apply_overrides(&mut config, args.folds, args.alpha, args.seed);
    config.validate()?;
    let methods = args
        .method
        .iter()
        .map(|m| {
            Ok(VrConfig {
                covariate_set: CovariateSet::from_label(m.trim())?,
                ..config.vr.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = IngestOptions {
        metric: Some(&config.metric),
        reject_threshold: config.reject_threshold,
    };
    let ab = io::read_suite(&args.ab, &opts)?;
    let aa = match &args.aa {
        Some(dir) => io::read_suite(dir, &opts)?,
        None => Vec::new(),
    };
    let report = run_table(&ab, &aa, &methods, &config.metric, config.alpha)?;
    if let Some(p) = &args.details {
        std::fs::write(p, report.details_csv()?).map_err(|e| Error::io(p, e))?;
    }
    match (&args.output, args.table) {
        (Some(p), table) => {
            write_output(Some(p), &report.to_json()?)?;
            if table {
                write_output(None, &report.to_text())?;
            }
        }
        (None, true) => write_output(None, &report.to_text())?,
        (None, false) => write_output(None, &report.to_json()?)?,
    }
    Ok(())
}

fn retention(args: RetentionArgs) -> Result<()> {
    let format = args
        .format
        .or_else(|| Format::from_path(&args.output))
        .unwrap_or(Format::Csv);
    let activity = io::read_activity(&args.input)?;
    let (variants, days): (Vec<String>, Vec<_>) = activity.into_iter().unzip();
    let by_id: std::collections::HashMap<&str, &str> = days
        .iter()
        .zip(&variants)
        .map(|(d, v)| (d.unit_id.as_str(), v.as_str()))
        .collect();
    let records: Vec<UnitRecord> = compute_retention_components(&days)?
        .into_iter()
        .map(|c| UnitRecord {
            variant: by_id[c.unit_id.as_str()].to_string(),
            unit_id: c.unit_id,
            numerator: c.numerator,
            denominator: c.denominator,
            pre_numerator: None,
            pre_denominator: None,
            features: Vec::new(),
        })
        .collect();
    io::write_units(&args.output, &records, format)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Retention(a) => retention(a),
        Command::Version => write_output(
            None,
            &format!("ratiovr {} (schema {SCHEMA_VERSION})\n", env!("CARGO_PKG_VERSION")),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
