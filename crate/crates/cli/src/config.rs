//! Run configuration: a JSON file merged with command-line flags (flags win).

use std::path::{Path, PathBuf};

use panelcf::dgp::{ArDgpParams, DgpParams, EventDgpParams, Pipeline};
use panelcf::dyngmm::{GmmSpec, Step};
use panelcf::eventstudy::ForecastVariance;
use panelcf::FeatureSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    /// Count panel for the control-function estimator.
    #[default]
    Cf,
    Event,
    Ar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventConfig {
    pub outcome: String,
    pub aggregate: String,
    pub controls: Vec<String>,
    /// Column that is positive in event years.
    pub event_column: String,
    pub year_dummies: bool,
    pub forecast_variance: ForecastVariance,
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig {
            outcome: "growth".into(),
            aggregate: "sector_growth".into(),
            controls: vec!["x1".into()],
            event_column: "recall".into(),
            year_dummies: false,
            forecast_variance: ForecastVariance::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub spec: Option<FeatureSpec>,
    /// Inclusive year range `FROM:TO`.
    pub window: Option<String>,
    pub alpha: f64,
    pub seed: u64,
    /// Bootstrap replications for `cf-poisson`, Monte Carlo replications for
    /// `monte-carlo`.
    pub reps: Option<usize>,
    pub event: EventConfig,
    pub gmm: GmmSpec,
    pub gmm_step: Step,
    pub simulate: SimKind,
    pub dgp: DgpParams,
    pub event_dgp: EventDgpParams,
    pub ar_dgp: ArDgpParams,
    pub pipeline: Pipeline,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            spec: None,
            window: None,
            alpha: 0.05,
            seed: 1,
            reps: None,
            event: EventConfig::default(),
            gmm: GmmSpec::default(),
            gmm_step: Step::Two,
            simulate: SimKind::default(),
            dgp: DgpParams::default(),
            event_dgp: EventDgpParams::default(),
            ar_dgp: ArDgpParams::default(),
            pipeline: Pipeline::ControlFunction,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub alpha: Option<f64>,
    pub window: Option<String>,
    pub collapse_instruments: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config("config_unreadable", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::config("invalid_config", format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &flags.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = flags.reps {
            cfg.reps = Some(v);
        }
        if let Some(v) = flags.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = &flags.window {
            cfg.window = Some(v.clone());
        }
        if flags.collapse_instruments {
            cfg.gmm.collapse = Some(true);
        }
        // the seed flag reaches every generator
        cfg.dgp.seed = cfg.seed;
        cfg.event_dgp.seed = cfg.seed;
        cfg.ar_dgp.seed = cfg.seed;
        if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
            return Err(Failure::config(
                "invalid_alpha",
                format!("alpha must lie in (0, 1), got {}", cfg.alpha),
            ));
        }
        cfg.window_bounds()?;
        Ok(cfg)
    }

    pub fn window_bounds(&self) -> Result<Option<(i64, i64)>, Failure> {
        let Some(w) = &self.window else {
            return Ok(None);
        };
        let bad = || {
            Failure::config(
                "invalid_window",
                format!("window must be FROM:TO with FROM <= TO, got `{w}`"),
            )
        };
        let (a, b) = w.split_once(':').ok_or_else(bad)?;
        let from: i64 = a.trim().parse().map_err(|_| bad())?;
        let to: i64 = b.trim().parse().map_err(|_| bad())?;
        if from > to {
            return Err(bad());
        }
        Ok(Some((from, to)))
    }

    pub fn input_path(&self) -> Result<&Path, Failure> {
        let p = self
            .input
            .as_deref()
            .ok_or_else(|| Failure::config("missing_input", "this subcommand needs --input".into()))?;
        if !p.is_file() {
            return Err(Failure::config(
                "input_not_found",
                format!("no such file: {}", p.display()),
            ));
        }
        Ok(p)
    }

    pub fn feature_spec(&self) -> Result<&FeatureSpec, Failure> {
        self.spec
            .as_ref()
            .ok_or_else(|| Failure::config("missing_spec", "the config must define `spec`".into()))
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::data("io", format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
