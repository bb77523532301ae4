//! Closed-form bounds against planted instances over an `(N, δ, τ)` grid.

use std::time::Instant;

use localist_core::bounds::{corollary1_entropy_bound, corollary2_fidelity_bound, reports_to_csv, verify_bounds, BoundReport};
use localist_core::synth::generate;
use localist_core::{BoundKind, GeneratorSpec, RegularityEstimate};
use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::criteria::{ENTROPY_FIDELITY, OFF_BLOCK_MASS};
use super::{child_seed, fmt_e};
use crate::artifacts::Outcome;
use crate::error::CliError;
use crate::spec::ExperimentSpec;

/// Wall-clock budget for the off-block grid.
pub const GRID_SECONDS: f64 = 30.0;
pub const MIN_INSTANCES: usize = 1000;
/// Tolerance on the one-bit anchor-doubling identity.
pub const DOUBLING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct InstanceRow {
    pub instance: usize,
    pub n: usize,
    pub delta: f64,
    pub tau: f64,
    pub seed: u64,
    pub num_blocks: usize,
    pub anchors_per_block: usize,
    pub target_margin: f64,
    pub noise_std: f64,
    pub cross_coherence: f64,
    pub queries: usize,
    pub excluded: usize,
    pub side_condition: bool,
    pub max_off_block_mass: f64,
    pub off_block_bound: f64,
    pub max_entropy_gap: f64,
    pub min_fidelity_gap: f64,
    pub off_block_violations: usize,
    pub entropy_violations: usize,
    pub fidelity_violations: usize,
}

fn instance_spec(base: &GeneratorSpec, n: usize, delta: f64, seed: u64) -> GeneratorSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_blocks = (base.d_model - 1).min(4).min(n);
    let num_blocks = rng.random_range(1..=max_blocks);
    let anchors = rng.random_range(1..=(n / num_blocks).min(3));
    GeneratorSpec {
        n,
        num_blocks,
        anchors_per_block: anchors,
        target_margin: delta * [1.05, 1.5, 3.0].choose(&mut rng).copied().unwrap_or(1.05),
        noise_std: [0.0, 1e-3, 1e-2].choose(&mut rng).copied().unwrap_or(0.0),
        cross_coherence: [0.0, 0.2].choose(&mut rng).copied().unwrap_or(0.0),
        non_anchor_scale: [0.5, 0.8].choose(&mut rng).copied().unwrap_or(0.5),
        num_domains: 1,
        domain_mix: vec![1.0],
        domain_blocks: None,
        num_sequences: 1,
        seed,
        ..base.clone()
    }
}

fn run_instance(
    index: usize,
    spec: &GeneratorSpec,
    delta: f64,
    tau: f64,
    violations: &mut Vec<BoundReport>,
) -> Result<InstanceRow, CliError> {
    let batch = generate(spec)?;
    let head = spec.identity_head(tau)?;
    let partition = &batch.partitions[0];
    let v = verify_bounds(
        &batch.embeddings,
        &head,
        partition,
        &batch.targets[0],
        &RegularityEstimate::unit(delta),
    )?;
    let of = |k: BoundKind| v.reports.iter().filter(move |r| r.kind == k);
    let count = |k: BoundKind| of(k).filter(|r| r.is_violation()).count();
    let off = of(BoundKind::OffBlockMass);
    let gap = |k: BoundKind| of(k).filter(|r| r.condition_met).map(|r| r.empirical - r.theoretical);
    violations.extend(v.reports.iter().filter(|r| r.is_violation()).cloned());
    Ok(InstanceRow {
        instance: index,
        n: spec.n,
        delta,
        tau,
        seed: spec.seed,
        num_blocks: spec.num_blocks,
        anchors_per_block: spec.anchors_per_block,
        target_margin: spec.target_margin,
        noise_std: spec.noise_std,
        cross_coherence: spec.cross_coherence,
        queries: v.queries,
        excluded: v.excluded,
        side_condition: localist_core::bounds::side_condition(spec.n, delta, tau),
        max_off_block_mass: off.clone().map(|r| r.empirical).fold(0.0, f64::max),
        off_block_bound: off.map(|r| r.theoretical).fold(0.0, f64::max),
        max_entropy_gap: gap(BoundKind::Entropy).fold(f64::NEG_INFINITY, f64::max),
        min_fidelity_gap: gap(BoundKind::Fidelity).fold(f64::INFINITY, f64::min),
        off_block_violations: count(BoundKind::OffBlockMass),
        entropy_violations: count(BoundKind::Entropy),
        fidelity_violations: count(BoundKind::Fidelity),
    })
}

/// Largest deviation of `H(2a) − H(a)` from one bit and of the fidelity
/// bound across the anchor doubling, over the grid and `a ∈ 1..=8`.
fn doubling_deviation(spec: &ExperimentSpec) -> Result<(f64, f64), CliError> {
    let (mut entropy_dev, mut fidelity_dev) = (0.0f64, 0.0f64);
    for &n in &spec.options.n_grid {
        for &delta in &spec.options.delta_grid {
            for &tau in &spec.options.tau_grid {
                for a in (1..=8).filter(|a| 2 * a <= n) {
                    let (h1, _) = corollary1_entropy_bound(a, n, delta, tau)?;
                    let (h2, _) = corollary1_entropy_bound(2 * a, n, delta, tau)?;
                    entropy_dev = entropy_dev.max((h2 - h1 - 1.0).abs());
                    let (f1, _) = corollary2_fidelity_bound(n, delta, tau)?;
                    let (f2, _) = corollary2_fidelity_bound(n, delta, tau)?;
                    fidelity_dev = fidelity_dev.max((f2 - f1).abs());
                }
            }
        }
    }
    Ok((entropy_dev, fidelity_dev))
}

type CellRows = (Vec<InstanceRow>, Vec<BoundReport>);

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let o = &spec.options;
    let mut cells = Vec::new();
    for &n in &o.n_grid {
        for &delta in &o.delta_grid {
            for &tau in &o.tau_grid {
                cells.push((n, delta, tau));
            }
        }
    }
    if cells.is_empty() || o.instances_per_cell == 0 {
        return Err(CliError::Usage("bounds grid is empty".into()));
    }
    let start = Instant::now();
    let per_cell: Vec<Result<CellRows, CliError>> = cells
        .par_iter()
        .enumerate()
        .map(|(c, &(n, delta, tau))| {
            let mut rows = Vec::with_capacity(o.instances_per_cell);
            let mut violations = Vec::new();
            for i in 0..o.instances_per_cell {
                let seed = child_seed(spec.seed, c as u64, i as u64);
                let inst = instance_spec(&spec.generator, n, delta, seed);
                rows.push(run_instance(c * o.instances_per_cell + i, &inst, delta, tau, &mut violations)?);
            }
            Ok((rows, violations))
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for r in per_cell {
        let (mut a, mut b) = r?;
        rows.append(&mut a);
        violations.append(&mut b);
    }
    let total = |f: fn(&InstanceRow) -> usize| rows.iter().map(f).sum::<usize>();
    let queries = total(|r| r.queries);
    let excluded = total(|r| r.excluded);
    let off_v = total(|r| r.off_block_violations);
    let ent_v = total(|r| r.entropy_violations);
    let fid_v = total(|r| r.fidelity_violations);
    let side_rows = rows.iter().filter(|r| r.side_condition).count();
    let max_ent_gap = rows.iter().map(|r| r.max_entropy_gap).fold(f64::NEG_INFINITY, f64::max);
    let min_fid_gap = rows.iter().map(|r| r.min_fidelity_gap).fold(f64::INFINITY, f64::min);
    let (ent_dev, fid_dev) = doubling_deviation(spec)?;

    let mut out = Outcome::default();
    out.check(
        OFF_BLOCK_MASS,
        rows.len() >= MIN_INSTANCES && off_v == 0 && elapsed < GRID_SECONDS,
        format!(
            "{} instances (minimum {MIN_INSTANCES}), {} queries checked ({} below margin), {off_v} violations, {elapsed:.2}s (limit {GRID_SECONDS}s)",
            rows.len(),
            queries - excluded,
            excluded
        ),
    );
    out.check(
        ENTROPY_FIDELITY,
        ent_v == 0 && fid_v == 0 && ent_dev <= DOUBLING_TOL && fid_dev <= DOUBLING_TOL,
        format!(
            "{side_rows} instances meet e^(delta/tau) >= 2N; entropy violations {ent_v} (max excess {}), fidelity violations {fid_v} (min margin {}); anchor doubling deviates {} bits, fidelity {}",
            fmt_e(max_ent_gap),
            fmt_e(min_fid_gap),
            fmt_e(ent_dev),
            fmt_e(fid_dev)
        ),
    );
    out.metric("instances", rows.len());
    out.metric("queries", queries);
    out.metric("excluded_queries", excluded);
    out.metric("off_block_violations", off_v);
    out.metric("side_condition_instances", side_rows);
    out.metric("entropy_violations", ent_v);
    out.metric("fidelity_violations", fid_v);
    out.metric("max_entropy_excess_bits", fmt_e(max_ent_gap));
    out.metric("min_fidelity_margin", fmt_e(min_fid_gap));
    out.metric("doubling_entropy_deviation", fmt_e(ent_dev));
    out.timing("grid", elapsed);
    out.csv("instances.csv", &rows)?;
    out.text("violations.csv", reports_to_csv(&violations));
    Ok(out)
}
