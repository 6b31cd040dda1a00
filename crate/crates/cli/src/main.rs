//! `aaud`: authority audits, interventions and GAC over activation dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aaud_core::audit::{run_audit, run_gac, run_interventions, RunOptions};
use aaud_core::authority::predict_joint_margin;
use aaud_core::dumpio::{
    assemble_records, read_dump, write_dump, AssembledSuite, ExperimentManifest,
};
use aaud_core::geometry::DEFAULT_RANK_TOL;
use aaud_core::interventions::{InterventionKind, DEFAULT_GAC_LAYERS, DEFAULT_SAFETY};
use aaud_core::refmodel::{
    build_reference_model, GroundTruth, ReferenceModelConfig, Regime, SyntheticInstance,
};
use aaud_core::AuditError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_VALIDATION: u8 = 3;
const EXIT_COMPUTATION: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "aaud", version, about = "Residual-stream authority audit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose perturbations, measure authority forces and aggregate.
    Audit {
        #[command(flatten)]
        input: Input,
    },
    /// Residual-state ablations and injections plus per-layer patching.
    Intervene {
        #[command(flatten)]
        input: Input,
        /// Comma-separated intervention kinds.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "ablate_user_predictive,ablate_random,ablate_null,inject_theory,inject_random"
        )]
        kinds: Vec<String>,
        /// Seeded draws per instance for the random controls.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        trials: u32,
        /// Multiplier on the minimal flipping injection magnitude.
        #[arg(long, default_value_t = DEFAULT_SAFETY, value_parser = at_least_one)]
        safety: f64,
        /// Fixed injection magnitude instead of the computed one.
        #[arg(long, value_parser = non_negative)]
        magnitude: Option<f64>,
    },
    /// Geometric authority calibration at the highest-importance layers.
    Gac {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 0.1, value_parser = unit_interval)]
        alpha: f64,
        /// Number of critical layers.
        #[arg(long, default_value_t = DEFAULT_GAC_LAYERS)]
        layers: usize,
    },
    /// Generate a reference-model suite with a ground-truth sidecar.
    Synth {
        /// JSON synthesis config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        self != Format::Csv
    }

    fn csv(self) -> bool {
        self != Format::Json
    }
}

fn finite(s: &str) -> Result<f64, String> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{s}` is not a finite number"))
}

fn unit_interval(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(format!("{v} is outside [0, 1]"))
        }
    })
}

fn at_least_one(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| {
        if v >= 1.0 {
            Ok(v)
        } else {
            Err(format!("{v} is below 1"))
        }
    })
}

fn non_negative(s: &str) -> Result<f64, String> {
    finite(s).and_then(|v| {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(format!("{v} is negative"))
        }
    })
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Computation(String),
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => EXIT_VALIDATION,
            Failure::Computation(_) => EXIT_COMPUTATION,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Computation(m) | Failure::Io(m) => m,
        }
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        let msg = e.to_string();
        match &e {
            AuditError::Io { .. } => Failure::Io(msg),
            AuditError::Format(f) if f.code() == "io" => Failure::Io(msg),
            _ if e.is_validation() => Failure::Validation(msg),
            _ => Failure::Computation(msg),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Synthesis request for `aaud synth`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    #[serde(default)]
    model: ReferenceModelConfig,
    /// `har_like`, `casas_like`, `health_like` or `inversion`.
    suite: String,
    count: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_label")]
    model_label: String,
}

fn default_label() -> String {
    "reference".into()
}

/// Values measured on the in-memory states before export.
#[derive(Debug, Serialize)]
struct Measured {
    force_sensor: f64,
    force_user: f64,
    interaction: f64,
    aai: f64,
    cir_s: f64,
    cir_u: f64,
    baseline_margin: f64,
    observed_joint_margin: f64,
}

#[derive(Debug, Serialize)]
struct SidecarEntry<'a> {
    truth: &'a GroundTruth,
    measured: Measured,
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    model: &'a ReferenceModelConfig,
    suite: &'a str,
    count: usize,
    seed: u64,
    instances: Vec<SidecarEntry<'a>>,
}

fn load_suite(input: &Input) -> Outcome<AssembledSuite> {
    let manifest = ExperimentManifest::load(&input.manifest)?;
    let dump = read_dump(&input.dump).map_err(AuditError::from)?;
    Ok(assemble_records(&manifest, &dump, input.rank_tol)?)
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Computation(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Outcome {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn options(input: &Input) -> RunOptions {
    RunOptions {
        rank_tol: input.rank_tol,
        seed: input.seed,
        ..Default::default()
    }
}

fn audit(input: &Input) -> Outcome {
    let suite = load_suite(input)?;
    let report = run_audit(&suite, &options(input))?;
    prepare_out(&input.out)?;
    if input.format.json() {
        write_json(&input.out.join("audit.json"), &report)?;
    }
    if input.format.csv() {
        write_csv(&input.out.join("audit_rows.csv"), &report.rows)?;
    }
    let a = &report.aggregates;
    eprintln!(
        "audited {} instances: trust_s {:.3}, trust_u {:.3}, mean AAI {}",
        a.trust.n,
        a.trust.trust_s,
        a.trust.trust_u,
        a.aai_mean.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn intervene(
    input: &Input,
    kinds: &[String],
    trials: u32,
    safety: f64,
    magnitude: Option<f64>,
) -> Outcome {
    let kinds = kinds
        .iter()
        .map(|k| k.trim().parse::<InterventionKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Validation(e.to_string()))?;
    let opts = RunOptions {
        random_trials: trials as usize,
        safety,
        fixed_magnitude: magnitude,
        ..options(input)
    };
    let suite = load_suite(input)?;
    let report = run_interventions(&suite, &kinds, &opts)?;
    prepare_out(&input.out)?;
    if input.format.json() {
        write_json(&input.out.join("interventions.json"), &report)?;
    }
    if input.format.csv() {
        write_csv(&input.out.join("intervention_rows.csv"), &report.rows)?;
        write_csv(&input.out.join("layer_importance.csv"), &report.layer_rows)?;
    }
    for s in &report.summaries {
        eprintln!(
            "{}: {} trials, flip rate {}",
            s.kind.as_str(),
            s.trials,
            s.flip_rate.map_or("n/a".into(), |r| format!("{r:.3}"))
        );
    }
    Ok(())
}

fn gac(input: &Input, alpha: f64, layers: usize) -> Outcome {
    let opts = RunOptions {
        alpha,
        layers,
        ..options(input)
    };
    let suite = load_suite(input)?;
    let report = run_gac(&suite, &opts)?;
    prepare_out(&input.out)?;
    if input.format.json() {
        write_json(&input.out.join("gac.json"), &report)?;
    }
    if input.format.csv() {
        write_csv(&input.out.join("gac_rows.csv"), &report.rows)?;
    }
    let s = &report.summary;
    eprintln!(
        "alpha {} on layers {:?}: accuracy {:.3} -> {:.3}",
        s.alpha, s.critical_layers, s.accuracy_without, s.accuracy_with
    );
    Ok(())
}

fn measure(
    inst: &SyntheticInstance,
    model: &aaud_core::refmodel::ReferenceModel,
) -> Outcome<Measured> {
    let rep = predict_joint_margin(&inst.record, &inst.subspace, model.unembedding())?;
    Ok(Measured {
        force_sensor: rep.force_sensor,
        force_user: rep.force_user,
        interaction: rep.interaction,
        aai: rep.aai.value,
        cir_s: inst.record.decomposed.sensor_only.cir,
        cir_u: inst.record.decomposed.user_only.cir,
        baseline_margin: rep.baseline_margin,
        observed_joint_margin: rep.observed_joint_margin,
    })
}

fn synth(config: &Path, out: &Path) -> Outcome {
    let text = fs::read_to_string(config).map_err(|e| io_err(config, e))?;
    let cfg: SynthConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", config.display())))?;
    let model = build_reference_model(&cfg.model)?;
    let instances = match cfg.suite.as_str() {
        "inversion" => model.inversion_suite(cfg.count, cfg.seed)?,
        other => {
            let regime: Regime = other
                .parse()
                .map_err(|e: AuditError| Failure::Validation(e.to_string()))?;
            model.generate_conflict_suite(regime, cfg.count, cfg.seed)?
        }
    };
    let (set, manifest) = model.export(&cfg.model_label, &instances)?;
    let sidecar = Sidecar {
        model: model.config(),
        suite: &cfg.suite,
        count: cfg.count,
        seed: cfg.seed,
        instances: instances
            .iter()
            .map(|i| {
                Ok(SidecarEntry {
                    truth: &i.truth,
                    measured: measure(i, &model)?,
                })
            })
            .collect::<Outcome<_>>()?,
    };
    prepare_out(out)?;
    write_dump(&set, &out.join("dump.aaud")).map_err(AuditError::from)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("ground_truth.json"), &sidecar)?;
    eprintln!("wrote {} instances to {}", instances.len(), out.display());
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var("AAUD_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Validation(format!(
            "AAUD_THREADS = `{value}` is not a positive integer"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Computation(e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::Audit { input } => audit(&input),
        Command::Intervene {
            input,
            kinds,
            trials,
            safety,
            magnitude,
        } => intervene(&input, &kinds, trials, safety, magnitude),
        Command::Gac {
            input,
            alpha,
            layers,
        } => gac(&input, alpha, layers),
        Command::Synth { config, out } => synth(&config, &out),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
