//! Run configuration: one TOML document merged over profile defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use siamts::analysis::{method_allowed, Pipeline, SweepSpec};
use siamts::data::{DatasetProfile, ScenarioId, SessionPlan, SynthParams};
use siamts::training::Method;

use crate::CliError;

fn default_out() -> PathBuf {
    PathBuf::from("siamts-out")
}

/// Fully resolved settings of a `run`, `sweep` or `synth` invocation.
///
/// Every field has a profile default, so a config file only lists what it
/// changes. The serialized form is complete and loads back to the same value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    /// Corpus file or CSV directory; the synthetic generator is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub synth: SynthParams,
    pub scenario: u32,
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    /// Share of users assigned to Dataset 1.
    pub d1_fraction: f64,
    pub window_len: usize,
    /// Overlap of training windows; validation and test windows never overlap.
    pub train_overlap: f64,
    pub sessions: SessionPlan,
    pub probe_samples_per_user: usize,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_out", skip_serializing)]
    pub out: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
}

impl RunConfig {
    pub fn for_profile(profile: &DatasetProfile) -> Self {
        RunConfig {
            profile: profile.name.clone(),
            corpus: None,
            synth: SynthParams {
                channels: profile.channels,
                ..SynthParams::default()
            },
            scenario: 1,
            methods: vec![Method::Simsiam, Method::Supervised],
            fractions: vec![0.1, 0.2, 0.4, 0.7, 1.0],
            d1_fraction: 0.5,
            window_len: profile.window_len,
            train_overlap: 0.5,
            sessions: SessionPlan::default(),
            probe_samples_per_user: profile.probe_samples_per_user,
            pipeline: Pipeline::for_profile(profile),
            seed: 0,
            runs: 10,
            sweep: None,
            out: default_out(),
        }
    }

    /// Parses `text` and fills every missing field from the profile it
    /// names (or `overrides.profile`, or `synth`).
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let name = match (&overrides.profile, user.get("profile")) {
            (Some(p), _) => p.clone(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(CliError::Config(format!("profile must be a string, got {other}"))),
            (None, None) => "synth".to_string(),
        };
        let profile = DatasetProfile::by_name(&name)?;
        let mut merged =
            toml::Table::try_from(RunConfig::for_profile(&profile)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("profile".into(), toml::Value::String(name));
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(runs) = o.runs {
            self.runs = runs;
        }
    }

    pub fn scenario_id(&self) -> Result<ScenarioId, CliError> {
        Ok(ScenarioId::from_number(self.scenario)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let scenario = self.scenario_id()?;
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        for &m in &self.methods {
            method_allowed(m, scenario)?;
        }
        if self.fractions.is_empty() {
            return bad("fractions must not be empty".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("label fractions must lie in (0, 1], got {f}"));
        }
        if !(self.d1_fraction > 0.0 && self.d1_fraction < 1.0) {
            return bad(format!("d1_fraction must lie in (0, 1), got {}", self.d1_fraction));
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.window_len == 0 || self.probe_samples_per_user == 0 {
            return bad("window_len and probe_samples_per_user must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train_overlap) {
            return bad(format!("train_overlap must lie in [0, 1), got {}", self.train_overlap));
        }
        if self.corpus.is_none() {
            self.synth.validate()?;
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        self.pipeline.validate()?;
        Ok(())
    }

    /// The complete config as TOML; loading it back yields `self`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Recursively overlays `over` onto `base`. Tables merge key by key; any
/// other value, arrays included, replaces what was there.
pub fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
