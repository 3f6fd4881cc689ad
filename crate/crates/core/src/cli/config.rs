//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::cohort::{Filters, Schema};
use crate::diagnostics::HistoryMatching;
use crate::glm::FitOptions;
use crate::models::ModelOptions;
use crate::strategy::{bundled_icu_schema, schema_from_toml, StrategyDef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub strategies: StrategiesSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format epoch table; defaults to the synth output.
    pub epochs: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    /// Schema file, or `"icu"` for the bundled ICU schema.
    pub schema_file: Option<String>,
    /// Inline schema; takes precedence over `schema_file`.
    pub schema: Option<Schema>,
    pub filters: Filters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Bundled process name (`discrete`, `continuous`) or a path to a process file.
    pub process: String,
    pub n: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            process: "discrete".into(),
            n: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    /// Fitted suite read by later stages; written by `fit`.
    pub path: Option<PathBuf>,
    pub ordering: Option<Vec<String>>,
    pub time_degree: u32,
    pub treatment_time: bool,
    pub min_post_stop_events: f64,
    pub fit: FitOptions,
}

impl Default for ModelsSection {
    fn default() -> Self {
        let o = ModelOptions::default();
        Self {
            path: None,
            ordering: o.ordering,
            time_degree: o.time_degree,
            treatment_time: o.treatment_time,
            min_post_stop_events: o.min_post_stop_events,
            fit: o.fit,
        }
    }
}

impl ModelsSection {
    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            ordering: self.ordering.clone(),
            time_degree: self.time_degree,
            treatment_time: self.treatment_time,
            min_post_stop_events: self.min_post_stop_events,
            fit: self.fit.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategiesSection {
    /// `natural-course`, `ds1`, `knight`.
    pub bundled: Vec<String>,
    /// Static stop epochs.
    #[serde(rename = "static")]
    pub static_stops: Vec<u32>,
    pub files: Vec<PathBuf>,
    pub inline: Vec<StrategyDef>,
}

impl Default for StrategiesSection {
    fn default() -> Self {
        Self {
            bundled: vec!["natural-course".into()],
            static_stops: Vec::new(),
            files: Vec::new(),
            inline: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n: usize,
    pub retain_paths: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n: 10_000,
            retain_paths: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub n_simulated: usize,
    pub replicates: usize,
    pub confidence: f64,
    pub max_dropped_fraction: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            n_simulated: 10_000,
            replicates: 100,
            confidence: 0.95,
            max_dropped_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub history: HistoryMatching,
    pub warning_threshold: f64,
    pub near_violation: f64,
    /// Epochs shown in PCA panels; empty skips the export.
    pub pca_epochs: Vec<u32>,
    /// Natural-course subjects simulated for calibration; 0 skips it.
    pub calibration_n: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            history: HistoryMatching::Exact,
            warning_threshold: 0.3,
            near_violation: crate::diagnostics::NEAR_VIOLATION,
            pca_epochs: Vec::new(),
            calibration_n: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Evaluation JSON files to merge; defaults to the `evaluate` output.
    pub inputs: Vec<PathBuf>,
}

/// A parsed config with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{e}")))?;
        Ok(Self {
            config,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir().join(name)
    }

    pub fn epochs_path(&self) -> PathBuf {
        match &self.config.data.epochs {
            Some(p) => self.resolve(p),
            None => self.output("cohort_epochs.csv"),
        }
    }

    pub fn baseline_path(&self) -> PathBuf {
        match &self.config.data.baseline {
            Some(p) => self.resolve(p),
            None => self.output("cohort_baseline.csv"),
        }
    }

    pub fn models_path(&self) -> PathBuf {
        match &self.config.models.path {
            Some(p) => self.resolve(p),
            None => self.output("models.json"),
        }
    }

    /// Inline schema, schema file, bundled ICU schema, or the schema written by `synth`.
    pub fn schema(&self) -> Result<Schema, CliError> {
        if let Some(s) = &self.config.data.schema {
            return Ok(s.clone());
        }
        let path = match self.config.data.schema_file.as_deref() {
            Some("icu") => return Ok(bundled_icu_schema()),
            Some(p) => self.resolve(Path::new(p)),
            None => self.output("schema.toml"),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read schema {}: {e}", path.display())))?;
        schema_from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Configured strategies in declaration order: bundled, static, files, inline.
    pub fn strategies(&self) -> Result<Vec<StrategyDef>, CliError> {
        let s = &self.config.strategies;
        let mut out = Vec::new();
        for name in &s.bundled {
            out.push(StrategyDef::bundled(name).map_err(|e| CliError::Config(e.to_string()))?);
        }
        out.extend(s.static_stops.iter().map(|&k| StrategyDef::static_stop(k)));
        for f in &s.files {
            let path = self.resolve(f);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("cannot read strategy {}: {e}", path.display())))?;
            out.push(StrategyDef::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?);
        }
        out.extend(s.inline.iter().cloned());
        if out.is_empty() {
            return Err(CliError::Config("strategies: none configured".into()));
        }
        let mut names: Vec<&str> = out.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("strategies: duplicate name {:?}", w[0])));
        }
        Ok(out)
    }
}
