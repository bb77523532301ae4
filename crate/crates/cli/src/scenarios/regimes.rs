//! Localist and distributed presets on the same data and stream.

use localist_core::attention::diagnostics;
use localist_core::dial::preset;
use localist_core::recruit::{run_recruitment, TokenAttention};
use localist_core::synth::generate;
use localist_core::{BlockPartition, DialConfig, GeneratorSpec};
use serde::Serialize;

use super::criteria::REGIMES;
use crate::artifacts::Outcome;
use crate::error::CliError;
use crate::spec::ExperimentSpec;

pub const FIDELITY_TARGET: f64 = 0.98;
/// Allowed excess over `log2|A|`, in bits.
pub const ENTROPY_SLACK_BITS: f64 = 0.05;
/// Localist must accept at least this many times the distributed count.
pub const RECRUITMENT_RATIO: usize = 3;

#[derive(Debug, Serialize)]
struct RegimeRow {
    preset: String,
    tau: f64,
    target_delta: f64,
    fidelity: f64,
    mean_entropy_bits: f64,
    entropy_budget_bits: f64,
    mean_off_block_mass: f64,
    stream_mean_entropy_nats: f64,
    accepted: usize,
    p_max_bound: usize,
}

/// The stream used for recruitment counts: four planted blocks at `N = 64`.
pub fn recruitment_stream(base: &GeneratorSpec) -> GeneratorSpec {
    GeneratorSpec {
        n: 64,
        num_blocks: 4,
        anchors_per_block: 4,
        num_sequences: 16,
        num_domains: 1,
        domain_mix: vec![1.0],
        domain_blocks: None,
        ..base.clone()
    }
}

fn regime(spec: &ExperimentSpec, dial: &DialConfig) -> Result<RegimeRow, CliError> {
    let data = generate(&spec.generator)?;
    let calibrated = |g: &GeneratorSpec| {
        GeneratorSpec {
            target_margin: dial.target_delta,
            ..g.clone()
        }
        .identity_head(dial.tau)
    };
    let head = calibrated(&spec.generator)?;
    let partition = &data.partitions[0];
    let mut fidelity = 0.0;
    let mut entropy = 0.0;
    let mut off = 0.0;
    for x in &data.embeddings {
        let d = diagnostics(&head.weights(x)?, partition, &data.targets[0])?;
        fidelity += d.fidelity;
        entropy += d.mean_entropy_bits();
        off += d.mean_off_block_mass();
    }
    let s = data.len() as f64;
    let stream_spec = recruitment_stream(&spec.generator);
    let stream = generate(&stream_spec)?;
    let attn = TokenAttention::from_head(&stream.embeddings, &calibrated(&stream_spec)?)?;
    let start = BlockPartition::single(stream_spec.n, vec![0])?;
    let (_, ledger) = run_recruitment(&attn, &start, dial, spec.options.max_rounds)?;
    Ok(RegimeRow {
        preset: dial.preset_name.clone().unwrap_or_else(|| "custom".into()),
        tau: dial.tau,
        target_delta: dial.target_delta,
        fidelity: fidelity / s,
        mean_entropy_bits: entropy / s,
        entropy_budget_bits: (spec.generator.anchors_per_block as f64).log2() + ENTROPY_SLACK_BITS,
        mean_off_block_mass: off / s,
        stream_mean_entropy_nats: attn.entropy.iter().flatten().sum::<f64>() / attn.num_tokens() as f64,
        accepted: ledger.accepted(),
        p_max_bound: ledger.p_max_bound,
    })
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let loc = regime(spec, &preset("localist")?)?;
    let dist = regime(spec, &preset("distributed")?)?;
    let mut out = Outcome::default();
    let ok = loc.fidelity >= FIDELITY_TARGET
        && loc.mean_entropy_bits <= loc.entropy_budget_bits
        && dist.mean_entropy_bits > loc.mean_entropy_bits
        && loc.accepted > 0
        && loc.accepted >= RECRUITMENT_RATIO * dist.accepted;
    out.check(
        REGIMES,
        ok,
        format!(
            "localist fidelity {:.6}, entropy {:.4} bits (budget {:.4}); distributed entropy {:.4} bits; accepted recruitments localist {} vs distributed {}",
            loc.fidelity, loc.mean_entropy_bits, loc.entropy_budget_bits, dist.mean_entropy_bits, loc.accepted, dist.accepted
        ),
    );
    out.metric("localist_fidelity", format!("{:.6}", loc.fidelity));
    out.metric("localist_entropy_bits", format!("{:.6}", loc.mean_entropy_bits));
    out.metric("distributed_entropy_bits", format!("{:.6}", dist.mean_entropy_bits));
    out.metric("localist_accepted", loc.accepted);
    out.metric("distributed_accepted", dist.accepted);
    out.csv("regimes.csv", &[loc, dist])?;
    Ok(out)
}
