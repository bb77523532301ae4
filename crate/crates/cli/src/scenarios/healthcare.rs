//! Scripted clinical schedule: general traffic, a radiology surge, a
//! pharmacology surge, then a new radiology concept.

use localist_core::hierarchy::{hier_total, theorem4_check, DecisionKind, ModelRegistry};
use localist_core::synth::{generate, healthcare_schedule};
use localist_core::{GeneratorSpec, LabeledBatch, ModelInstance, RoutingMode};
use serde::Serialize;

use super::child_seed;
use super::hierarchy::{fit_classifier, process};
use crate::artifacts::{add_registry, Outcome};
use crate::error::CliError;
use crate::spec::ExperimentSpec;

pub const CAPACITY: &str = "capacity_bounds";
const DOMAIN_NAMES: [&str; 3] = ["general", "pharmacology", "radiology"];

#[derive(Debug, Serialize)]
struct PhaseRow {
    phase: String,
    kind: DecisionKind,
    delta_l: f64,
    h_domain: f64,
    dominant_domain: String,
    models: usize,
    total_after: f64,
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let phases = healthcare_schedule(&spec.generator);
    let mut windows: Vec<LabeledBatch> = phases
        .iter()
        .enumerate()
        .map(|(i, p)| {
            generate(&GeneratorSpec {
                num_sequences: spec.options.window_size,
                seed: child_seed(spec.seed, 10, i as u64),
                ..p.spec.clone()
            })
        })
        .collect::<Result<_, _>>()?;
    let pool_spec = GeneratorSpec {
        domain_mix: vec![1.0 / 3.0; 3],
        num_sequences: 3 * spec.options.window_size,
        seed: child_seed(spec.seed, 11, 0),
        ..phases[0].spec.clone()
    };
    let mut pool = generate(&pool_spec)?;
    let classes = windows.iter().map(|w| w.num_classes).max().unwrap_or(1).max(pool.num_classes);
    windows.iter_mut().for_each(|w| w.num_classes = classes);
    pool.num_classes = classes;
    let classifier = fit_classifier(&pool, 3, spec.options.classifier_iters)?;
    let general = pool.domain_slice(0);
    if general.is_empty() {
        return Err(CliError::Usage("pool holds no general-domain sequences".into()));
    }
    let base = ModelInstance::install(
        0,
        0,
        &general,
        pool.partitions[0].clone(),
        &spec.dial,
        spec.options.d_v,
        child_seed(spec.seed, 12, 0),
    )?;
    let registry = ModelRegistry::new(base, classifier, RoutingMode::Hard)?;
    let (registry, rows, _) = process(spec, registry, &windows)?;

    let mut out = Outcome::default();
    let mut table = Vec::new();
    for (r, p) in rows.iter().zip(&phases) {
        table.push(PhaseRow {
            phase: p.name.clone(),
            kind: r.kind,
            delta_l: r.delta_l,
            h_domain: r.h_domain,
            dominant_domain: DOMAIN_NAMES.get(r.dominant_domain).copied().unwrap_or("unknown").to_string(),
            models: r.models_after,
            total_after: r.total_after,
        });
    }
    let t4 = theorem4_check(&registry, &spec.dial);
    out.check(
        CAPACITY,
        t4.ok,
        format!(
            "{} models, {} recruited (k_max {}), (recruited, bound) blocks per model {:?}",
            registry.models.len(),
            t4.recruited_models,
            t4.k_max,
            t4.blocks
        ),
    );
    let specialists: Vec<String> = registry.models[1..]
        .iter()
        .map(|m| DOMAIN_NAMES.get(m.domain_tag).copied().unwrap_or("unknown").to_string())
        .collect();
    out.metric("models", registry.models.len());
    out.metric("specialists", specialists.join("+"));
    out.metric("recruited_blocks", t4.total_blocks);
    out.metric(
        "final_total",
        format!(
            "{:.6}",
            hier_total(&registry, windows.last().expect("four phases"), &spec.dial)?.total
        ),
    );
    out.csv("phases.csv", &table)?;
    out.jsonl("events.jsonl", &registry.events)?;
    add_registry(&mut out, "registry", &registry, spec.seed, &spec.config_hash())?;
    Ok(out)
}
