//! Scenario drivers.

use std::time::Instant;

use crate::artifacts::Outcome;
use crate::error::CliError;
use crate::spec::{ExperimentSpec, Scenario};

pub mod bounds;
pub mod healthcare;
pub mod hierarchy;
pub mod recruitment;
pub mod regimes;
pub mod theorem1;

/// Executes the spec's scenario.
pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let mut out = match spec.scenario {
        Scenario::Bounds => bounds::run(spec)?,
        Scenario::Theorem1 => theorem1::run(spec)?,
        Scenario::Recruitment => recruitment::run(spec)?,
        Scenario::Hierarchy => hierarchy::run(spec)?,
        Scenario::Healthcare => healthcare::run(spec)?,
        Scenario::Regimes => regimes::run(spec)?,
    };
    out.timing("scenario", start.elapsed().as_secs_f64());
    Ok(out)
}

/// Mixes a master seed with a stream tag and an index.
pub fn child_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn fmt_e(v: f64) -> String {
    format!("{v:.6e}")
}

/// Check names, one per acceptance criterion.
pub mod criteria {
    pub const OFF_BLOCK_MASS: &str = "off_block_mass_bound";
    pub const ENTROPY_FIDELITY: &str = "entropy_fidelity_bounds";
    pub const TRAINED_LOCALIZATION: &str = "trained_localization";
    pub const GRADIENT: &str = "gradient_check";
    pub const TERMINATION: &str = "recruitment_termination";
    pub const SPECTRAL_ORACLE: &str = "spectral_vs_exhaustive";
    pub const PRESERVATION: &str = "install_preserves_certificates";
    pub const HIERARCHY: &str = "specialist_recruitment";
    pub const REGIMES: &str = "regime_targets";
    pub const RULES: &str = "rule_injection";
    pub const DETERMINISM: &str = "determinism";
}
