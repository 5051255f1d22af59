//! `multiwave`: run simulation experiments and drive live review sessions
//! from the shell. Exit status is 0 on success, 1 on domain errors and 2 on
//! usage errors.

use std::fs::{self, File};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use multiwave::cohort::{
    gen_cohort, gen_labels, Cohort, LinkageMode, ScenarioConfig, Skew, StratumSpec,
};
use multiwave::engine::{
    ReviewRecord, SessionConfig, SessionState, StopMode, StoppingRule, SESSION_SCHEMA_VERSION,
};
use multiwave::forecast::{
    predict_session_rate, predict_stopping_sim, ForecastMethod, DEFAULT_HORIZON,
    DEFAULT_REPLICATIONS,
};
use multiwave::intervals::IntervalMethod;
use multiwave::sampling::{SamplingPolicy, Strategy};
use multiwave::simharness::{
    emit_trajectory, run_replications, summary_json, write_summary_csv, write_trajectory_csv,
    ExperimentSpec, SummaryRow,
};
use multiwave_service::{AppState, PredictionResponse};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "multiwave",
    version,
    about = "Adaptive multi-wave chart validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated experiment and write summary.csv / summary.json.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, env = "MULTIWAVE_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Override the spec's repetition count.
        #[arg(long)]
        repetitions: Option<usize>,
        /// Override the spec's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write band trajectories for the first N replications of each pair.
        #[arg(long, default_value_t = 0)]
        trajectories: usize,
    },
    /// Write a synthetic cohort (and optionally its hidden labels) as CSV.
    GenCohort {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        ppv: f64,
        #[arg(long, default_value_t = 0.0)]
        linkage_sd: f64,
        #[arg(long, value_parser = parse_linkage, default_value = "exact")]
        linkage_mode: LinkageMode,
        #[arg(long, value_parser = parse_skew, default_value = "balanced")]
        skew: Skew,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write `patient_id,label` reference labels.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Create a session file from a cohort CSV.
    #[command(group(ArgGroup::new("rule").args(["tau1", "tau2", "width_limit"]).multiple(true)))]
    SessionInit {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        session: PathBuf,
        /// Full session configuration (TOML); excludes the individual flags.
        #[arg(long, conflicts_with_all = [
            "strategy", "method", "batch_size", "tau1", "tau2", "width_limit",
            "alpha", "min_per_stratum", "intersect_bands",
        ])]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long, value_parser = parse_method)]
        method: Option<IntervalMethod>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        tau1: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        width_limit: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        min_per_stratum: Option<usize>,
        #[arg(long)]
        intersect_bands: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stratum cut points, comma separated; frailty strata by default.
        #[arg(long, value_delimiter = ',')]
        boundaries: Option<Vec<f64>>,
        /// Overwrite an existing session file.
        #[arg(long)]
        force: bool,
    },
    /// Allocate the next wave (idempotent until labels are recorded).
    SessionAlloc {
        #[arg(long)]
        session: PathBuf,
        /// Reviewer worksheet: `patient_id,stratum,label` with blank labels.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record reference labels (`patient_id,label` CSV) for the pending wave.
    SessionRecord {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Print the latest band and stopping decision as JSON.
    SessionStatus {
        #[arg(long)]
        session: PathBuf,
    },
    /// Forecast the number of remaining waves.
    SessionPredict {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_parser = parse_forecast, default_value = "simulate")]
        method: ForecastMethod,
        #[arg(long, default_value_t = DEFAULT_REPLICATIONS)]
        replications: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
    },
    /// Band history of a session as CSV or JSON.
    Report {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_parser = ["csv", "json"], default_value = "csv")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "MULTIWAVE_DATA_DIR", default_value = "sessions")]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "MULTIWAVE_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<IntervalMethod, String> {
    s.parse::<IntervalMethod>().map_err(|e| e.to_string())
}

fn parse_forecast(s: &str) -> Result<ForecastMethod, String> {
    s.parse::<ForecastMethod>().map_err(|e| e.to_string())
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_skew(s: &str) -> Result<Skew, String> {
    parse_enum(s)
}

fn parse_linkage(s: &str) -> Result<LinkageMode, String> {
    parse_enum(s)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load(path: &Path) -> Result<SessionState> {
    SessionState::load(path).with_context(|| format!("loading session {}", path.display()))
}

fn save(session: &SessionState, path: &Path) -> Result<()> {
    session
        .save(path)
        .with_context(|| format!("writing session {}", path.display()))
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<12} {:<6} {:>8} {:>9} {:>8}  ci95",
        "strategy", "method", "stopped", "futility", "batches"
    );
    for r in rows {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        println!(
            "{:<12} {:<6} {:>8.2} {:>9.2} {:>8}  ({}, {})",
            r.strategy.name(),
            r.method.name(),
            r.prop_stopped,
            r.prop_futility,
            f(r.mean_batches),
            f(r.batch_ci_low),
            f(r.batch_ci_high)
        );
    }
}

fn simulate(
    spec_path: &Path,
    out: &Path,
    repetitions: Option<usize>,
    seed: Option<u64>,
    trajectories: usize,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec_path)
        .with_context(|| format!("reading experiment {}", spec_path.display()))?;
    if let Some(r) = repetitions {
        spec.repetitions = r;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let rows = run_replications(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_summary_csv(&rows, File::create(out.join("summary.csv"))?)?;
    fs::write(out.join("summary.json"), summary_json(&spec, &rows)?)?;
    if trajectories > 0 {
        let dir = out.join("trajectories");
        fs::create_dir_all(&dir)?;
        for &s in &spec.strategies {
            for &m in &spec.methods {
                for r in 0..trajectories.min(spec.repetitions) {
                    let t = emit_trajectory(&spec, s, m, r)?;
                    let stem = format!("{}_{}_{r:03}", s.name(), m.name());
                    write_trajectory_csv(&t, File::create(dir.join(format!("{stem}.csv")))?)?;
                    fs::write(
                        dir.join(format!("{stem}.json")),
                        serde_json::to_string_pretty(&t)?,
                    )?;
                }
            }
        }
    }
    print_summary(&rows);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_cohort_cmd(
    n: usize,
    ppv: f64,
    linkage_sd: f64,
    linkage_mode: LinkageMode,
    skew: Skew,
    seed: u64,
    out: &Path,
    truth: Option<&Path>,
) -> Result<()> {
    let scenario = ScenarioConfig {
        n,
        ppv,
        linkage_sd,
        linkage_mode,
        skew,
        seed,
    };
    let cohort = gen_cohort(&scenario, &StratumSpec::frailty())?;
    cohort.write_csv(File::create(out)?)?;
    if let Some(path) = truth {
        let t = gen_labels(&cohort, &scenario, seed)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "label"])?;
        for (row, y) in cohort.rows().iter().zip(&t.labels) {
            w.write_record([row.patient_id.as_str(), if *y { "1" } else { "0" }])?;
        }
        w.flush()?;
    }
    Ok(())
}

struct InitFlags {
    strategy: Option<Strategy>,
    method: Option<IntervalMethod>,
    batch_size: Option<usize>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    width_limit: Option<f64>,
    alpha: Option<f64>,
    min_per_stratum: Option<usize>,
    intersect_bands: bool,
}

impl InitFlags {
    fn into_config(self) -> Result<SessionConfig> {
        let has_thresholds = self.tau1.is_some() || self.tau2.is_some();
        let mode = match (has_thresholds, self.width_limit.is_some()) {
            (true, true) => StopMode::Both,
            (true, false) => StopMode::Thresholds,
            (false, true) => StopMode::Width,
            (false, false) => bail!("give --tau1/--tau2 and/or --width-limit, or --config"),
        };
        let rule = StoppingRule {
            tau1: self.tau1,
            tau2: self.tau2,
            width_limit: self.width_limit,
            mode,
        };
        let mut policy = SamplingPolicy::new(
            self.strategy.unwrap_or(Strategy::Random),
            self.batch_size.unwrap_or(100),
        );
        if let Some(m) = self.min_per_stratum {
            policy.min_per_stratum = m;
        }
        let mut cfg = SessionConfig::new(policy, rule, self.method.unwrap_or(IntervalMethod::Lai));
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        cfg.intersect_bands = self.intersect_bands;
        Ok(cfg)
    }
}

fn session_init(
    cohort_path: &Path,
    session_path: &Path,
    config: Option<&Path>,
    flags: InitFlags,
    seed: u64,
    boundaries: Option<Vec<f64>>,
    force: bool,
) -> Result<()> {
    if session_path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            session_path.display()
        );
    }
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SessionConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => flags.into_config()?,
    };
    if config.is_none() || seed != 0 {
        cfg.seed = seed;
    }
    let spec = match boundaries {
        Some(b) => StratumSpec::new(b, None)?,
        None => StratumSpec::frailty(),
    };
    let file = File::open(cohort_path)
        .with_context(|| format!("reading cohort {}", cohort_path.display()))?;
    let cohort = Cohort::read_csv(file, spec)?;
    let session = SessionState::create(cfg, cohort)?;
    save(&session, session_path)?;
    print_json(&session.status_view())
}

fn session_alloc(path: &Path, out: Option<&Path>) -> Result<()> {
    let mut session = load(path)?;
    let before = session.clone();
    let result = session.next_allocation().map(|_| ());
    if session != before {
        save(&session, path)?;
    }
    result?;
    let view = session.allocation_view().expect("allocation pending");
    if let Some(out) = out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["patient_id", "stratum", "label"])?;
        for p in &view.patients {
            w.write_record([p.patient_id.as_str(), &p.stratum.to_string(), ""])?;
        }
        w.flush()?;
    }
    print_json(&view)
}

fn read_labels(path: &Path) -> Result<Vec<ReviewRecord>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    let headers = r.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "patient_id");
    let label_col = headers.iter().position(|h| h == "label");
    let (Some(id_col), Some(label_col)) = (id_col, label_col) else {
        bail!("labels file needs `patient_id` and `label` columns");
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let label = match rec[label_col].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!(
                "row {}: label {other:?} for {} is not binary (use 1/0)",
                i + 2,
                &rec[id_col]
            ),
        };
        out.push(ReviewRecord::new(rec[id_col].trim(), label));
    }
    Ok(out)
}

fn session_record(path: &Path, labels: &Path) -> Result<()> {
    let mut session = load(path)?;
    let records = read_labels(labels)?;
    session.record_wave(&records)?;
    save(&session, path)?;
    print_json(&session.status_view())
}

fn session_predict(
    path: &Path,
    method: ForecastMethod,
    replications: usize,
    seed: Option<u64>,
    horizon: usize,
) -> Result<()> {
    let session = load(path)?;
    let forecast = match method {
        ForecastMethod::Simulate => predict_stopping_sim(
            &session,
            replications,
            seed.unwrap_or(session.config.seed),
            horizon,
        )?,
        ForecastMethod::Rate => predict_session_rate(&session, horizon)?,
    };
    print_json(&PredictionResponse {
        schema_version: SESSION_SCHEMA_VERSION,
        wave: session.wave(),
        forecast,
    })
}

fn report(path: &Path, format: &str, out: Option<&Path>) -> Result<()> {
    let session = load(path)?;
    let history = session.history_view();
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    if format == "json" {
        serde_json::to_writer_pretty(&mut sink, &history)?;
        writeln!(sink)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "wave",
        "k",
        "s",
        "point",
        "lower",
        "upper",
        "k_eff",
        "allocation",
    ])?;
    for e in &history.entries {
        let alloc: Vec<String> = e.allocation.iter().map(usize::to_string).collect();
        w.write_record([
            e.wave.to_string(),
            e.k.to_string(),
            e.s.to_string(),
            e.interval.point.to_string(),
            e.interval.lower.to_string(),
            e.interval.upper.to_string(),
            e.interval.k_eff.to_string(),
            alloc.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            spec,
            out,
            repetitions,
            seed,
            trajectories,
        } => simulate(&spec, &out, repetitions, seed, trajectories),
        Command::GenCohort {
            n,
            ppv,
            linkage_sd,
            linkage_mode,
            skew,
            seed,
            out,
            truth,
        } => gen_cohort_cmd(
            n,
            ppv,
            linkage_sd,
            linkage_mode,
            skew,
            seed,
            &out,
            truth.as_deref(),
        ),
        Command::SessionInit {
            cohort,
            session,
            config,
            strategy,
            method,
            batch_size,
            tau1,
            tau2,
            width_limit,
            alpha,
            min_per_stratum,
            intersect_bands,
            seed,
            boundaries,
            force,
        } => session_init(
            &cohort,
            &session,
            config.as_deref(),
            InitFlags {
                strategy,
                method,
                batch_size,
                tau1,
                tau2,
                width_limit,
                alpha,
                min_per_stratum,
                intersect_bands,
            },
            seed,
            boundaries,
            force,
        ),
        Command::SessionAlloc { session, out } => session_alloc(&session, out.as_deref()),
        Command::SessionRecord { session, labels } => session_record(&session, &labels),
        Command::SessionStatus { session } => print_json(&load(&session)?.status_view()),
        Command::SessionPredict {
            session,
            method,
            replications,
            seed,
            horizon,
        } => session_predict(&session, method, replications, seed, horizon),
        Command::Report {
            session,
            format,
            out,
        } => report(&session, &format, out.as_deref()),
        Command::Serve { dir, addr, token } => {
            let state = AppState::open(&dir, token)?;
            eprintln!("serving {} on http://{addr}", dir.display());
            tokio::runtime::Runtime::new()?.block_on(multiwave_service::serve(addr, state))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
