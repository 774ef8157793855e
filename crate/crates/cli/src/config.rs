//! The run configuration file and command-line overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use uhlm_core::backend::{BackendConfig, ExternalBackendConfig, NGramPairConfig, SyntheticPairConfig};
use uhlm_core::engine::{EngineConfig, Method};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub engine: EngineConfig,
    /// Seeds for `run`; empty means just `engine.seed`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    pub backend: BackendConfig,
    pub calibration: CalibrationSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    pub output: OutputConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            seeds: Vec::new(),
            backend: BackendConfig::default(),
            calibration: CalibrationSection::default(),
            sweep: None,
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdChoice {
    Averse,
    Prone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// HLM rounds used by `calibrate`.
    pub rounds: usize,
    /// Number of equal-width histogram bins; defaults to one bin per
    /// attainable value of `u`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Calibration file read by `run` and `sweep` when UHLM has no `u_th`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub threshold: ThresholdChoice,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { rounds: 10_000, bins: None, path: None, threshold: ThresholdChoice::Prone }
    }
}

/// Sweep grid. Each present axis must be non-empty; absent axes take the
/// single value from the rest of the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_th: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_m: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_dbm: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl SweepAxes {
    pub fn validate(&self) -> Result<()> {
        let axes: [(&str, Option<usize>); 5] = [
            ("methods", self.methods.as_ref().map(Vec::len)),
            ("u_th", self.u_th.as_ref().map(Vec::len)),
            ("rho_m", self.rho_m.as_ref().map(Vec::len)),
            ("p_dbm", self.p_dbm.as_ref().map(Vec::len)),
            ("seeds", self.seeds.as_ref().map(Vec::len)),
        ];
        if axes.iter().all(|(_, n)| n.is_none()) {
            return Err(CliError::Config("sweep needs at least one axis".into()));
        }
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == Some(0)) {
            return Err(CliError::Config(format!("sweep axis {name} is empty")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub summary: String,
    pub trace_prefix: String,
    pub calibration: String,
    pub sweep: String,
    pub ngram_model: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            summary: "summary.csv".into(),
            trace_prefix: "trace".into(),
            calibration: "calibration.json".into(),
            sweep: "sweep.csv".into(),
            ngram_model: "ngram.json".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Synthetic,
    Ngram,
    External,
}

/// Flags shared by the experiment commands; each one overrides the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML or JSON config file (JSON when the extension is `.json`).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long = "u-th", allow_negative_numbers = true)]
    pub u_th: Option<f64>,
    /// Calibration file providing the UHLM threshold.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Evaluate the LLM on skipped rounds for counterfactual metrics.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Switch backend kind; the new backend starts from its defaults.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Box::new(e) as Box<dyn std::error::Error + Send + Sync>)
        } else {
            toml::from_str(&text).map_err(|e| Box::new(e) as Box<dyn std::error::Error + Send + Sync>)
        };
        parsed.map_err(|source| CliError::ConfigParse { path: path.to_path_buf(), source })
    }

    /// Loads the file named by `--config` (or defaults) and applies the
    /// remaining flags.
    pub fn resolve(flags: &Overrides) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(seed) = flags.seed {
            log::info!("override: seed {} -> {seed}", self.engine.seed);
            self.engine.seed = seed;
            self.seeds = vec![seed];
        }
        if let Some(m) = flags.method {
            log::info!("override: method {} -> {m}", self.engine.method);
            self.engine.method = m;
        }
        if let Some(u) = flags.u_th {
            log::info!("override: u_th {:?} -> {u}", self.engine.u_th);
            self.engine.u_th = Some(u);
        }
        if let Some(p) = &flags.calibration {
            log::info!("override: calibration file {}", p.display());
            self.calibration.path = Some(p.clone());
        }
        if flags.oracle && !self.engine.oracle_mode {
            log::info!("override: oracle mode on");
            self.engine.oracle_mode = true;
        }
        if let Some(out) = &flags.out {
            log::info!("override: output dir {} -> {}", self.output.dir.display(), out.display());
            self.output.dir = out.clone();
        }
        if let Some(kind) = flags.backend {
            let same = matches!(
                (kind, &self.backend),
                (BackendKind::Synthetic, BackendConfig::Synthetic(_))
                    | (BackendKind::Ngram, BackendConfig::Ngram(_))
                    | (BackendKind::External, BackendConfig::External(_))
            );
            if !same {
                log::info!("override: backend {} -> {kind:?} (defaults)", self.backend.name());
                self.backend = match kind {
                    BackendKind::Synthetic => BackendConfig::Synthetic(SyntheticPairConfig::default()),
                    BackendKind::Ngram => BackendConfig::Ngram(NGramPairConfig::default()),
                    BackendKind::External => BackendConfig::External(ExternalBackendConfig::default()),
                };
            }
        }
        if let Some(r) = flags.rounds {
            log::info!("override: rounds {:?} -> {r}", self.engine.rounds);
            self.engine.rounds = Some(r);
        }
    }

    /// Structural checks that do not need a calibration file.
    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.engine.channel.validate()?;
        self.engine.latency.validate()?;
        self.engine.perturbation.validate()?;
        if self.calibration.rounds == 0 {
            return Err(CliError::Config("calibration.rounds must be >= 1".into()));
        }
        if self.calibration.bins == Some(0) {
            return Err(CliError::Config("calibration.bins must be >= 1".into()));
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.engine.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seeds = [1, 2]

[engine]
method = "UHLM"
u_th = 0.3
r_max = 32

[engine.channel]
rho_m = 2000.0
payload_vocab_size = 32000

[backend]
kind = "synthetic"
vocab_size = 128

[sweep]
u_th = [0.1, 0.2]

[output]
dir = "results"
"#;

    #[test]
    fn parses_toml() {
        let cfg: RunConfigFile = toml::from_str(SAMPLE).unwrap();
        assert_eq!(cfg.engine.method, Method::Uhlm);
        assert_eq!(cfg.engine.channel.rho_m, 2000.0);
        assert_eq!(cfg.engine.channel.payload_vocab_size, Some(32000));
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert!(matches!(cfg.backend, BackendConfig::Synthetic(ref s) if s.vocab_size == 128));
        assert!(cfg.validate().is_ok());
        // the JSON echo parses back to the same config
        let back: RunConfigFile = serde_json::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfigFile>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfigFile>("[engine]\ncolour = 1").is_err());
        assert!(toml::from_str::<RunConfigFile>("[backend]\nkind = \"synthetic\"\ncolour = 1").is_err());
        assert!(toml::from_str::<RunConfigFile>("[sweep]\nsnr = [1.0]").is_err());
    }

    #[test]
    fn empty_axis() {
        let cfg: RunConfigFile = toml::from_str("[sweep]\nu_th = []").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("u_th"), "{err}");
        let none: RunConfigFile = toml::from_str("[sweep]").unwrap();
        assert!(none.validate().is_err());
    }

    #[test]
    fn flags_override() {
        let mut cfg: RunConfigFile = toml::from_str(SAMPLE).unwrap();
        let flags = Overrides {
            seed: Some(9),
            method: Some(Method::Hlm),
            oracle: true,
            rounds: Some(50),
            backend: Some(BackendKind::Ngram),
            ..Default::default()
        };
        cfg.apply(&flags);
        assert_eq!(cfg.engine.seed, 9);
        assert_eq!(cfg.run_seeds(), vec![9]);
        assert_eq!(cfg.engine.method, Method::Hlm);
        assert!(cfg.engine.oracle_mode);
        assert_eq!(cfg.engine.rounds, Some(50));
        assert_eq!(cfg.backend.name(), "ngram");
        // the fresh ngram backend has no corpus
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"engine": {"method": "HLM"}, "backend": {"kind": "synthetic"}}"#).unwrap();
        assert_eq!(RunConfigFile::load(&path).unwrap().engine.method, Method::Hlm);
        std::fs::write(&path, r#"{"engine": {"method": "XYZ"}}"#).unwrap();
        assert_eq!(RunConfigFile::load(&path).unwrap_err().exit_code(), 2);
    }
}
