//! Command-line driver. One config file feeds every subcommand; flags
//! override its scalars.

pub mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{LoadedConfig, RunConfig};
pub use output::{config_digest, Artifact, Provenance};

use crate::cohort::{load_cohort, write_cohort, Cohort, CohortError};
use crate::diagnostics::{
    pca_agreement, positivity_report, smd_over_time, write_tidy, DiagnosticsError, PositivityOptions,
};
use crate::engine::{
    bootstrap_evaluate, simulate_cohort, with_workers, EngineError, Estimate, EvaluationOptions, EvaluationReport,
    SimulationOptions,
};
use crate::models::{fit_all, FittedModels, ModelError};
use crate::strategy::{StrategyDef, StrategyError};
use crate::synth::{exact_psi, generate, DgpSpec, ExactResult, SynthError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("oracle: {0}")]
    Overflow(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Fit(_) => 4,
            Self::Overflow(_) => 5,
            Self::Io(_) => 1,
        }
    }
}

impl From<CohortError> for CliError {
    fn from(e: CohortError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Cohort(c) => c.into(),
            ModelError::UnknownCovariate(_) | ModelError::Ordering(_) => Self::Config(e.to_string()),
            other => Self::Fit(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::Strategy(s) => s.into(),
            EngineError::Sample { .. } | EngineError::TooManyDropped { .. } => Self::Fit(e.to_string()),
            EngineError::Empty => Self::Data(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Overflow { .. } => Self::Overflow(e.to_string()),
            SynthError::Model(m) => m.into(),
            SynthError::Cohort(c) => c.into(),
            SynthError::Glm { .. } => Self::Fit(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Strategy(s) => s.into(),
            DiagnosticsError::Model(m) => m.into(),
            DiagnosticsError::Glm(_) => Self::Fit(e.to_string()),
            DiagnosticsError::Csv(_) => Self::Io(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "stopeval",
    version,
    about = "Evaluate ICU stopping strategies with the parametric g-formula"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "stopeval.toml")]
    pub config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic cohort and write its ground truth.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the model suite.
    Fit,
    /// Simulate each strategy under the fitted models.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Point estimates with bootstrap intervals.
    Evaluate {
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        n_simulated: Option<usize>,
    },
    /// Positivity, calibration and PCA exports.
    Diagnose,
    /// Merge evaluation outputs into one comparison table.
    Report {
        /// Evaluation JSON files; defaults to the config's inputs.
        inputs: Vec<PathBuf>,
    },
}

/// Parse arguments, run, print errors, and map them to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stopeval: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Run one subcommand; returns the artifacts written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let mut loaded = LoadedConfig::load(&cli.common.config)?;
    let c = &mut loaded.config;
    if let Some(s) = cli.common.seed {
        c.seed = s;
    }
    if cli.common.workers.is_some() {
        c.workers = cli.common.workers;
    }
    if let Some(o) = cli.common.out {
        // flags are relative to the working directory, not the config
        c.output_dir = std::env::current_dir()
            .map_err(|e| CliError::Io(e.to_string()))?
            .join(o);
    }
    match &cli.command {
        Command::Synth { n: Some(n) } => c.synth.n = *n,
        Command::Simulate { n: Some(n) } => c.simulate.n = *n,
        Command::Evaluate {
            replicates,
            n_simulated,
        } => {
            if let Some(b) = replicates {
                c.evaluate.replicates = *b;
            }
            if let Some(n) = n_simulated {
                c.evaluate.n_simulated = *n;
            }
        }
        _ => {}
    }
    let workers = loaded.config.workers;
    let runner = Runner::new(loaded);
    with_workers(workers, || match cli.command {
        Command::Synth { .. } => runner.synth(),
        Command::Fit => runner.fit(),
        Command::Simulate { .. } => runner.simulate(),
        Command::Evaluate { .. } => runner.evaluate(),
        Command::Diagnose => runner.diagnose(),
        Command::Report { inputs } => runner.report(&inputs),
    })?
}

pub struct Runner {
    cfg: LoadedConfig,
    provenance: Provenance,
    written: std::sync::Mutex<Vec<PathBuf>>,
}

impl Runner {
    pub fn new(cfg: LoadedConfig) -> Self {
        let provenance = Provenance::new(&cfg.config);
        Self {
            cfg,
            provenance,
            written: Default::default(),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.config.seed
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        let dir = self.cfg.output_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(dir.join(name))
    }

    fn create(&self, path: &Path) -> Result<std::fs::File, CliError> {
        self.written.lock().expect("unpoisoned").push(path.to_path_buf());
        std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name)?;
        self.written.lock().expect("unpoisoned").push(path.clone());
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, data: &T) -> Result<(), CliError> {
        let text = Artifact::new(self.provenance.clone(), data).to_json();
        self.write_text(name, &text)
    }

    fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut buf = format!("# {}\n", self.provenance.comment()).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let err = |e: csv::Error| CliError::Io(e.to_string());
            w.write_record(header).map_err(err)?;
            for r in rows {
                w.write_record(r).map_err(err)?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
        self.write_text(name, &String::from_utf8(buf).expect("csv is utf-8"))
    }

    fn finish(&self) -> Vec<PathBuf> {
        self.written.lock().expect("unpoisoned").clone()
    }

    fn cohort(&self) -> Result<Cohort, CliError> {
        let schema = self.cfg.schema()?;
        let loaded = load_cohort(
            &self.cfg.epochs_path(),
            &self.cfg.baseline_path(),
            &schema,
            &self.cfg.config.data.filters,
        )?;
        if !loaded.exclusions.is_empty() {
            eprintln!("stopeval: {} subjects excluded", loaded.exclusions.len());
        }
        Ok(loaded.cohort)
    }

    fn models(&self) -> Result<FittedModels, CliError> {
        let path = self.cfg.models_path();
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Config(format!(
                "cannot read models {} ({e}); run `stopeval fit` first",
                path.display()
            ))
        })?;
        Artifact::<FittedModels>::from_json(&text)
            .map(|a| a.data)
            .or_else(|_| FittedModels::from_json(&text))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn synth(&self) -> Result<Vec<PathBuf>, CliError> {
        let process = &self.cfg.config.synth.process;
        let spec = match process.as_str() {
            "discrete" | "continuous" => DgpSpec::bundled(process)?,
            path => {
                let p = self.cfg.resolve(Path::new(path));
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Config(format!("cannot read process {}: {e}", p.display())))?;
                DgpSpec::from_toml(&text)?
            }
        };
        let cohort = generate(&spec, self.cfg.config.synth.n, self.seed())?;
        let epochs = self.create(&self.path("cohort_epochs.csv")?)?;
        let baseline = self.create(&self.path("cohort_baseline.csv")?)?;
        let comment = self.provenance.comment();
        write_cohort(
            &cohort,
            std::io::BufWriter::new(epochs),
            std::io::BufWriter::new(baseline),
            Some(&comment),
        )?;
        let schema = toml::to_string(&cohort.schema).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_text("schema.toml", &format!("# {comment}\n{schema}"))?;

        let mut exact: Vec<(String, ExactResult)> = Vec::new();
        if spec.is_discrete() {
            for g in self.cfg.strategies()? {
                exact.push((g.name.clone(), exact_psi(&spec, &g)?));
            }
        }
        let observed =
            cohort.trajectories.iter().filter(|t| t.event_epoch().is_some()).count() as f64 / cohort.len() as f64;
        self.write_json(
            "ground_truth.json",
            &serde_json::json!({
                "spec": spec,
                "n": cohort.len(),
                "observed_event_rate": observed,
                "exact": exact.iter().map(|(n, r)| serde_json::json!({"strategy": n, "result": r})).collect::<Vec<_>>(),
            }),
        )?;
        Ok(self.finish())
    }

    pub fn fit(&self) -> Result<Vec<PathBuf>, CliError> {
        let cohort = self.cohort()?;
        let models = fit_all(&cohort, &self.cfg.config.models.options())?;
        for w in &models.warnings {
            eprintln!("stopeval: warning: {w}");
        }
        let path = self.cfg.models_path();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(e.to_string()))?;
        }
        self.written.lock().expect("unpoisoned").push(path.clone());
        std::fs::write(&path, Artifact::new(self.provenance.clone(), &models).to_json())
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(self.finish())
    }

    pub fn simulate(&self) -> Result<Vec<PathBuf>, CliError> {
        let models = self.models()?;
        let s = &self.cfg.config.simulate;
        let mut rows = Vec::new();
        let mut estimates = Vec::new();
        let mut paths = Vec::new();
        for g in self.cfg.strategies()? {
            let opts = SimulationOptions {
                n: s.n,
                seed: self.seed(),
                retain_paths: s.retain_paths,
                workers: None,
            };
            let sims = simulate_cohort(&models, &g, &opts)?;
            estimates.push(serde_json::json!({"strategy": g.name, "estimate": Estimate::from_sims(&sims)?}));
            for t in &sims {
                rows.push(vec![
                    g.name.clone(),
                    t.subject.to_string(),
                    u8::from(t.outcome).to_string(),
                    t.event_epoch.map(|e| e.to_string()).unwrap_or_default(),
                    t.tau.to_string(),
                    u8::from(t.stopped).to_string(),
                    u8::from(t.died_in_treatment).to_string(),
                ]);
            }
            if s.retain_paths {
                paths.push(serde_json::json!({"strategy": g.name, "trajectories": sims}));
            }
        }
        self.write_csv(
            "simulated.csv",
            &[
                "strategy",
                "subject",
                "outcome",
                "event_epoch",
                "tau",
                "stopped",
                "died_in_treatment",
            ],
            &rows,
        )?;
        self.write_json("simulation_summary.json", &estimates)?;
        if s.retain_paths {
            self.write_json("simulated_paths.json", &paths)?;
        }
        Ok(self.finish())
    }

    pub fn evaluate(&self) -> Result<Vec<PathBuf>, CliError> {
        let cohort = self.cohort()?;
        let e = &self.cfg.config.evaluate;
        let opts = EvaluationOptions {
            n_simulated: e.n_simulated,
            replicates: e.replicates,
            seed: self.seed(),
            confidence: e.confidence,
            max_dropped_fraction: e.max_dropped_fraction,
            workers: None,
        };
        let reports = bootstrap_evaluate(
            &cohort,
            &self.cfg.strategies()?,
            &self.cfg.config.models.options(),
            &opts,
        )?;
        for r in &reports {
            for w in &r.warnings {
                eprintln!("stopeval: {}: warning: {w}", r.strategy);
            }
        }
        self.write_json("evaluation.json", &reports)?;
        let (header, rows) = evaluation_table(&reports);
        self.write_csv("evaluation.csv", &header, &rows)?;
        Ok(self.finish())
    }

    pub fn diagnose(&self) -> Result<Vec<PathBuf>, CliError> {
        let cohort = self.cohort()?;
        let d = &self.cfg.config.diagnose;
        let models = match self.models() {
            Ok(m) => m,
            Err(CliError::Config(_)) => fit_all(&cohort, &self.cfg.config.models.options())?,
            Err(e) => return Err(e),
        };
        let opts = PositivityOptions {
            history: d.history,
            warning_threshold: d.warning_threshold,
            near_violation: d.near_violation,
        };
        for g in self.cfg.strategies()? {
            let slug = slug(&g.name);
            let report = positivity_report(&cohort, &g, Some(&models), &opts)?;
            for w in &report.warnings {
                eprintln!("stopeval: {}: {w}", g.name);
            }
            self.write_json(&format!("positivity_{slug}.json"), &report)?;
            let path = self.path(&format!("positivity_{slug}.csv"))?;
            write_tidy(&report.tidy(), self.create(&path)?, Some(&self.provenance.comment()))?;
            if !d.pca_epochs.is_empty() && !g.is_natural_course() {
                let pca = pca_agreement(&cohort, &g, &d.pca_epochs, d.history)?;
                self.write_json(&format!("pca_{slug}.json"), &pca)?;
            }
        }
        if d.calibration_n > 0 {
            let sims = simulate_cohort(
                &models,
                &StrategyDef::natural_course(),
                &SimulationOptions {
                    n: d.calibration_n,
                    seed: self.seed(),
                    retain_paths: true,
                    workers: None,
                },
            )?;
            let report = smd_over_time(&cohort, &sims)?;
            self.write_json("calibration.json", &report)?;
            let path = self.path("calibration.csv")?;
            write_tidy(&report.tidy(), self.create(&path)?, Some(&self.provenance.comment()))?;
        }
        Ok(self.finish())
    }

    pub fn report(&self, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
        let files: Vec<PathBuf> = if !inputs.is_empty() {
            inputs.to_vec()
        } else if !self.cfg.config.report.inputs.is_empty() {
            self.cfg
                .config
                .report
                .inputs
                .iter()
                .map(|p| self.cfg.resolve(p))
                .collect()
        } else {
            vec![self.cfg.output("evaluation.json")]
        };
        let mut merged: Vec<EvaluationReport> = Vec::new();
        for f in &files {
            let text = std::fs::read_to_string(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
            let reports = Artifact::<Vec<EvaluationReport>>::from_json(&text)
                .map(|a| a.data)
                .or_else(|_| serde_json::from_str::<Vec<EvaluationReport>>(&text))
                .map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
            for r in reports {
                if let Some(prev) = merged.iter().find(|m| m.strategy == r.strategy) {
                    if prev != &r {
                        return Err(CliError::Data(format!(
                            "strategy {:?} appears in several inputs with different results",
                            r.strategy
                        )));
                    }
                    continue;
                }
                merged.push(r);
            }
        }
        let (header, rows) = evaluation_table(&merged);
        self.write_csv("report.csv", &header, &rows)?;
        let scatter: Vec<Vec<String>> = merged
            .iter()
            .map(|r| {
                vec![
                    r.strategy.clone(),
                    r.psi.to_string(),
                    r.los_days.mean.to_string(),
                    r.los_days.median.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            "scatter.csv",
            &["strategy", "psi", "los_mean_days", "los_median_days"],
            &scatter,
        )?;
        Ok(self.finish())
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Comparison table: one row per strategy.
pub fn evaluation_table(reports: &[EvaluationReport]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec![
        "strategy",
        "psi",
        "psi_lo",
        "psi_hi",
        "diff_nc",
        "diff_nc_lo",
        "diff_nc_hi",
        "in_treatment",
        "post_stop",
        "los_median_days",
        "los_q1_days",
        "los_q3_days",
        "los_mean_days",
        "los_mean_lo",
        "los_mean_hi",
        "n_subjects",
        "n_simulated",
        "replicates",
        "dropped",
    ];
    let rows = reports
        .iter()
        .map(|r| {
            let d = &r.difference_to_natural_course;
            vec![
                r.strategy.clone(),
                r.psi.to_string(),
                r.psi_ci[0].to_string(),
                r.psi_ci[1].to_string(),
                d.point.to_string(),
                d.ci[0].to_string(),
                d.ci[1].to_string(),
                r.mortality_split.in_treatment.to_string(),
                r.mortality_split.post_stop.to_string(),
                r.los_days.median.to_string(),
                r.los_days.q1.to_string(),
                r.los_days.q3.to_string(),
                r.los_days.mean.to_string(),
                r.los_mean_ci[0].to_string(),
                r.los_mean_ci[1].to_string(),
                r.n_subjects.to_string(),
                r.n_simulated.to_string(),
                r.bootstrap_replicates.to_string(),
                r.dropped_replicates.to_string(),
            ]
        })
        .collect();
    (header, rows)
}
