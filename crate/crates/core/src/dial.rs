//! Locality-dial configuration, presets and effective group penalties.

use serde::{Deserialize, Serialize};

use crate::attention::BlockPartition;
use crate::bounds::{theorem1_threshold, RegularityEstimate};
use crate::{Error, Result};

/// Allowed range of `θ_LLM / θ_block` for preset dials.
pub const THRESHOLD_RATIO_RANGE: (f64, f64) = (50.0, 200.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Localist,
    Distributed,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Localist, Preset::Distributed];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Localist => "localist",
            Preset::Distributed => "distributed",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown preset `{name}`")))
    }
}

/// Which normalizer divides the summed per-token entropy reduction of a
/// candidate cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionNormalizer {
    /// Size of the whole confused set.
    #[default]
    Confused,
    /// Size of the candidate cluster.
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialConfig {
    pub group_penalty_base: f64,
    pub tau: f64,
    pub target_delta: f64,
    pub theta_block: f64,
    pub theta_llm: f64,
    pub lambda_pen: f64,
    pub epsilon: f64,
    pub c_param: f64,
    pub c_llm: f64,
    pub tau_domain: f64,
    pub anchor_k: usize,
    pub preset_name: Option<String>,
    pub beta: f64,
    /// Penalty on each head's own (focus) column group.
    pub focus_penalty: f64,
    /// Multiplier on the stationarity threshold when computing penalties.
    pub safety_factor: f64,
    pub k_max_domains: usize,
    pub h_min: f64,
    pub h_domain_min: f64,
    pub warmup_steps: usize,
    pub normalizer: ReductionNormalizer,
}

impl Default for DialConfig {
    fn default() -> Self {
        Self {
            group_penalty_base: 1.0,
            tau: 0.5,
            target_delta: 1.0,
            theta_block: 1.0,
            theta_llm: 100.0,
            lambda_pen: 10.0,
            epsilon: 0.1,
            c_param: 0.05,
            c_llm: 0.1,
            tau_domain: 0.3,
            anchor_k: 4,
            preset_name: None,
            beta: 0.01,
            focus_penalty: 0.0,
            safety_factor: 1.0,
            k_max_domains: 8,
            h_min: 0.0,
            h_domain_min: 0.0,
            warmup_steps: 200,
            normalizer: ReductionNormalizer::Confused,
        }
    }
}

/// `(group_penalty_base, target_delta, tau, theta_block, theta_llm)` of a preset.
pub fn preset_values(p: Preset) -> (f64, f64, f64, f64, f64) {
    match p {
        Preset::Localist => (10.0, 2.0, 0.1, 0.5, 50.0),
        Preset::Distributed => (0.01, 0.1, 1.0, 5.0, 200.0),
    }
}

pub fn preset(name: &str) -> Result<DialConfig> {
    let p = Preset::from_name(name)?;
    let (base, delta, tau, theta_block, theta_llm) = preset_values(p);
    let dial = DialConfig {
        group_penalty_base: base,
        target_delta: delta,
        tau,
        theta_block,
        theta_llm,
        preset_name: Some(p.name().to_string()),
        ..DialConfig::default()
    };
    dial.validate()?;
    Ok(dial)
}

pub fn threshold_ratio_ok(theta_block: f64, theta_llm: f64) -> bool {
    let r = theta_llm / theta_block;
    (THRESHOLD_RATIO_RANGE.0..=THRESHOLD_RATIO_RANGE.1).contains(&r)
}

impl DialConfig {
    /// Whether the thresholds are exactly those of the named preset.
    /// The distributed preset's own ratio (40) lies outside the tuning
    /// range, so canonical preset thresholds are exempt from the ratio check.
    pub fn canonical_thresholds(&self) -> bool {
        match self.preset_name.as_deref().map(Preset::from_name) {
            Some(Ok(p)) => {
                let (_, _, _, tb, tl) = preset_values(p);
                tb == self.theta_block && tl == self.theta_llm
            }
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let param = |m: String| Err(Error::Parameter(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return param(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.theta_block > 0.0) {
            return param(format!("theta_block must be > 0, got {}", self.theta_block));
        }
        if !(self.theta_llm > self.theta_block) {
            return param(format!(
                "theta_llm ({}) must exceed theta_block ({})",
                self.theta_llm, self.theta_block
            ));
        }
        if self.preset_name.is_some() && !self.canonical_thresholds() && !threshold_ratio_ok(self.theta_block, self.theta_llm) {
            return param(format!(
                "theta_llm / theta_block = {} outside [50, 200]",
                self.theta_llm / self.theta_block
            ));
        }
        for (name, v) in [
            ("group_penalty_base", self.group_penalty_base),
            ("lambda_pen", self.lambda_pen),
            ("epsilon", self.epsilon),
            ("c_param", self.c_param),
            ("focus_penalty", self.focus_penalty),
            ("safety_factor", self.safety_factor),
            ("h_min", self.h_min),
            ("h_domain_min", self.h_domain_min),
            ("tau_domain", self.tau_domain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return param(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.c_llm > 0.0) {
            return param(format!("c_llm must be > 0, got {}", self.c_llm));
        }
        if !(self.beta > 0.0) {
            return param(format!("beta must be > 0, got {}", self.beta));
        }
        if self.anchor_k == 0 || self.k_max_domains == 0 {
            return param("anchor_k and k_max_domains must be >= 1".into());
        }
        Ok(())
    }
}

/// Why a group carries the penalty it does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltySource {
    /// The dial base dominates the stationarity threshold.
    Dial,
    /// The scaled stationarity threshold dominates the dial base.
    Threshold,
    /// The head's own group.
    Focus,
    /// Set directly by a caller.
    Manual,
}

/// Per-head, per-block group penalties plus the smooth-part coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// `group_penalties[h][i]`: penalty on block `i`'s column group in head `h`.
    pub group_penalties: Vec<Vec<f64>>,
    pub source: Vec<Vec<PenaltySource>>,
    pub beta: f64,
    pub tau: f64,
}

impl PenaltyConfig {
    pub fn uniform(num_heads: usize, num_blocks: usize, penalty: f64, beta: f64, tau: f64) -> Self {
        Self {
            group_penalties: vec![vec![penalty; num_blocks]; num_heads],
            source: vec![vec![PenaltySource::Manual; num_blocks]; num_heads],
            beta,
            tau,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.group_penalties.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.group_penalties.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_penalties.iter().flatten().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::Parameter("group penalties must be finite and >= 0".into()));
        }
        if self.group_penalties.iter().any(|row| row.len() != self.num_blocks()) {
            return Err(Error::Contract("ragged penalty table".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Appends one block column with the given per-head penalty.
    pub fn with_block(&self, penalty: f64) -> Self {
        let mut out = self.clone();
        out.group_penalties.iter_mut().for_each(|r| r.push(penalty));
        out.source.iter_mut().for_each(|r| r.push(PenaltySource::Manual));
        out
    }
}

impl PenaltyConfig {
    /// Appends a head row: `focus_value` on block `focus`, `value` elsewhere.
    pub fn with_head(&self, focus: usize, focus_value: f64, value: f64) -> Self {
        let mut out = self.clone();
        let b = self.num_blocks();
        out.group_penalties
            .push((0..b).map(|i| if i == focus { focus_value } else { value }).collect());
        out.source.push(vec![PenaltySource::Manual; b]);
        out
    }
}

/// Per-block penalty `max(base, safety · threshold(|X_i|))` for off-focus
/// groups and `dial.focus_penalty` on each head's focus group
/// (`focus[h]` is head `h`'s block).
pub fn effective_penalties(
    dial: &DialConfig,
    reg: &RegularityEstimate,
    partition: &BlockPartition,
    focus: &[usize],
) -> Result<PenaltyConfig> {
    let mut group_penalties = Vec::with_capacity(focus.len());
    let mut source = Vec::with_capacity(focus.len());
    let mut block_values = Vec::with_capacity(partition.num_blocks());
    for block in partition.blocks() {
        let lambda = dial.safety_factor * theorem1_threshold(reg, block.len(), dial.tau)?;
        block_values.push(if dial.group_penalty_base >= lambda {
            (dial.group_penalty_base, PenaltySource::Dial)
        } else {
            (lambda, PenaltySource::Threshold)
        });
    }
    for &f in focus {
        if f >= partition.num_blocks() {
            return Err(Error::Contract(format!("focus block {f} out of range")));
        }
        let mut row = Vec::with_capacity(block_values.len());
        let mut src = Vec::with_capacity(block_values.len());
        for (i, &(v, s)) in block_values.iter().enumerate() {
            if i == f {
                row.push(dial.focus_penalty);
                src.push(PenaltySource::Focus);
            } else {
                row.push(v);
                src.push(s);
            }
        }
        group_penalties.push(row);
        source.push(src);
    }
    Ok(PenaltyConfig {
        group_penalties,
        source,
        beta: dial.beta,
        tau: dial.tau,
    })
}
