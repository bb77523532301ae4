//! Experiment spec files.
//!
//! A spec is a TOML document:
//!
//! ```toml
//! name = "bounds-localist"
//! scenario = "bounds"
//! seed = 7
//!
//! [generator]
//! n = 16
//!
//! [dial]
//! preset = "localist"
//! anchor_k = 4
//! ```
//!
//! Keys of `[dial]` override the named preset. `[training]` and `[options]`
//! are optional.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use localist_core::dial::preset;
use localist_core::{DialConfig, GeneratorSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Bounds,
    Theorem1,
    Recruitment,
    Hierarchy,
    Healthcare,
    Regimes,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Bounds,
        Scenario::Theorem1,
        Scenario::Recruitment,
        Scenario::Hierarchy,
        Scenario::Healthcare,
        Scenario::Regimes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Bounds => "bounds",
            Scenario::Theorem1 => "theorem1",
            Scenario::Recruitment => "recruitment",
            Scenario::Hierarchy => "hierarchy",
            Scenario::Healthcare => "healthcare",
            Scenario::Regimes => "regimes",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Scenario::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Scenario::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!("unknown scenario '{s}' (expected one of {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub max_iters: usize,
    pub tol: f64,
    pub step: f64,
    pub init_std: f64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-8,
            step: 0.1,
            init_std: 0.3,
        }
    }
}

/// Scenario knobs. Each scenario reads only its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOptions {
    pub n_grid: Vec<usize>,
    pub delta_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    pub instances_per_cell: usize,
    pub theta_sweep: Vec<f64>,
    pub max_rounds: usize,
    pub initial_anchors: usize,
    pub windows: usize,
    pub window_size: usize,
    pub classifier_iters: usize,
    pub d_v: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            n_grid: vec![8, 16, 64],
            delta_grid: vec![0.5, 1.0, 2.0],
            tau_grid: vec![0.1, 0.5, 1.0],
            instances_per_cell: 40,
            theta_sweep: vec![0.1, 0.5],
            max_rounds: 100,
            initial_anchors: 1,
            windows: 3,
            window_size: 20,
            classifier_iters: 300,
            d_v: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub dial: DialConfig,
    pub training: TrainingSpec,
    pub options: ScenarioOptions,
}

fn take_table(root: &mut toml::Table, key: &str) -> Result<toml::Table, CliError> {
    match root.remove(key) {
        None => Ok(toml::Table::new()),
        Some(toml::Value::Table(t)) => Ok(t),
        Some(_) => Err(CliError::Usage(format!("[{key}] must be a table"))),
    }
}

fn from_table<T: serde::de::DeserializeOwned>(t: toml::Table, what: &str) -> Result<T, CliError> {
    toml::Value::Table(t)
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid [{what}]: {e}")))
}

/// `[dial]` keys over the named preset's values, or over the defaults.
fn resolve_dial(mut t: toml::Table) -> Result<DialConfig, CliError> {
    let Some(name) = t.remove("preset") else {
        return from_table(t, "dial");
    };
    let name = name
        .as_str()
        .ok_or_else(|| CliError::Usage("dial.preset must be a string".into()))?
        .to_string();
    let base = preset(&name).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut merged = match toml::Value::try_from(&base) {
        Ok(toml::Value::Table(m)) => m,
        _ => return Err(CliError::Usage("cannot encode preset".into())),
    };
    for (k, v) in t {
        merged.insert(k, v);
    }
    from_table(merged, "dial")
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut root: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("spec is not valid TOML: {e}")))?;
        let name = match root.remove("name") {
            Some(toml::Value::String(s)) if !s.trim().is_empty() => s,
            _ => return Err(CliError::Usage("spec needs a nonempty `name`".into())),
        };
        let scenario: Scenario = match root.remove("scenario") {
            Some(toml::Value::String(s)) => s.parse()?,
            _ => return Err(CliError::Usage("spec needs a `scenario` string".into())),
        };
        let seed = match root.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if i >= 0 => i as u64,
            Some(_) => return Err(CliError::Usage("`seed` must be a nonnegative integer".into())),
        };
        let output_dir = match root.remove("output_dir") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(CliError::Usage("`output_dir` must be a string".into())),
        };
        let generator = from_table(take_table(&mut root, "generator")?, "generator")?;
        let dial = resolve_dial(take_table(&mut root, "dial")?)?;
        let training = from_table(take_table(&mut root, "training")?, "training")?;
        let options = from_table(take_table(&mut root, "options")?, "options")?;
        if let Some(k) = root.keys().next() {
            return Err(CliError::Usage(format!("unknown top-level key `{k}`")));
        }
        let spec = Self {
            name,
            scenario,
            seed,
            output_dir,
            generator,
            dial,
            training,
            options,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dial.validate().map_err(|e| CliError::Usage(format!("dial: {e}")))?;
        self.generator.validate().map_err(|e| CliError::Usage(format!("generator: {e}")))?;
        if !(self.training.tol > 0.0 && self.training.step > 0.0 && self.training.init_std > 0.0) {
            return Err(CliError::Usage("training tol, step and init_std must be > 0".into()));
        }
        Ok(())
    }

    /// Copy with the master seed replaced; the generator seed follows it.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        out.generator.seed = seed;
        out
    }

    /// SHA-256 of the resolved spec as JSON, excluding the output location.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_keys_are_overridable() {
        let s = ExperimentSpec::parse("name = \"x\"\nscenario = \"regimes\"\n[dial]\npreset = \"localist\"\nanchor_k = 2\n").unwrap();
        assert_eq!(s.dial.group_penalty_base, 10.0);
        assert_eq!(s.dial.anchor_k, 2);
        assert_eq!(s.dial.preset_name.as_deref(), Some("localist"));
    }

    #[test]
    fn unknown_scenario_is_a_usage_error() {
        let e = ExperimentSpec::parse("name = \"x\"\nscenario = \"nope\"\n").unwrap_err();
        assert!(matches!(e, CliError::Usage(m) if m.contains("nope")));
    }

    #[test]
    fn empty_name_and_unknown_keys_are_rejected() {
        assert!(ExperimentSpec::parse("name = \"\"\nscenario = \"bounds\"\n").is_err());
        assert!(ExperimentSpec::parse("name = \"x\"\nscenario = \"bounds\"\nfoo = 1\n").is_err());
        assert!(ExperimentSpec::parse("name = \"x\"\nscenario = \"bounds\"\n[training]\nbogus = 1\n").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_and_tracks_seed() {
        let a = ExperimentSpec::parse("name = \"x\"\nscenario = \"bounds\"\n").unwrap();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), a.with_seed(3).config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
