//! Specialist recruitment on a two-domain stream under hard routing.

use localist_core::hierarchy::{
    apply_decision, embed, hier_decide, hier_total, routed_certificates, theorem4_check, theorem5_check, DecisionKind, DomainClassifier,
};
use localist_core::synth::generate;
use localist_core::{Error as CoreError, GeneratorSpec, LabeledBatch, Matrix, ModelInstance, ModelRegistry, RoutingMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::child_seed;
use super::criteria::HIERARCHY;
use crate::artifacts::{add_registry, Outcome};
use crate::error::CliError;
use crate::spec::ExperimentSpec;

/// Step size of the domain classifier's gradient descent.
pub const CLASSIFIER_LR: f64 = 2.0;

#[derive(Debug, Serialize)]
pub struct WindowRow {
    pub window: usize,
    pub sequences: usize,
    pub kind: DecisionKind,
    pub delta_l: f64,
    pub h_domain: f64,
    pub dominant_domain: usize,
    pub perplexity: f64,
    pub models_after: usize,
    pub total_before: f64,
    pub total_after: f64,
    pub routing_cost_after: f64,
}

pub fn windows(spec: &ExperimentSpec, tag: u64) -> Result<Vec<LabeledBatch>, CliError> {
    (0..spec.options.windows.max(1))
        .map(|w| {
            let g = GeneratorSpec {
                num_sequences: spec.options.window_size,
                seed: child_seed(spec.seed, tag, w as u64),
                ..spec.generator.clone()
            };
            Ok(generate(&g)?)
        })
        .collect()
}

pub fn fit_classifier(pool: &LabeledBatch, num_domains: usize, iters: usize) -> Result<DomainClassifier, CliError> {
    let e: Vec<Vec<f64>> = pool.embeddings.iter().map(embed).collect();
    Ok(DomainClassifier::train(&e, &pool.domain_tags, num_domains, iters, CLASSIFIER_LR)?)
}

/// Final registry, per-window rows, and the registry before the first
/// specialist with that window's index.
pub type Processed = (ModelRegistry, Vec<WindowRow>, Option<(ModelRegistry, usize)>);

/// Runs every window through decide-then-apply. Returns the registry, the
/// per-window rows and the registry just before the first specialist.
pub fn process(spec: &ExperimentSpec, registry: ModelRegistry, stream: &[LabeledBatch]) -> Result<Processed, CliError> {
    let mut registry = registry;
    let mut rows = Vec::new();
    let mut before_first = None;
    for (w, window) in stream.iter().enumerate() {
        let total_before = hier_total(&registry, window, &spec.dial)?.total;
        let decision = hier_decide(window, &registry, &spec.dial, child_seed(spec.seed, 7, w as u64))?;
        let kind = decision.kind;
        let (delta_l, h_domain, dominant, perplexity) =
            (decision.delta_l, decision.h_domain, decision.dominant_domain, decision.perplexity);
        if kind == DecisionKind::Llm && before_first.is_none() {
            before_first = Some((registry.clone(), w));
        }
        apply_decision(&mut registry, decision, window)?;
        let after = hier_total(&registry, window, &spec.dial)?;
        rows.push(WindowRow {
            window: w,
            sequences: window.len(),
            kind,
            delta_l,
            h_domain,
            dominant_domain: dominant,
            perplexity,
            models_after: registry.models.len(),
            total_before,
            total_after: after.total,
            routing_cost_after: after.routing_cost,
        });
    }
    Ok((registry, rows, before_first))
}

/// Copy of `batch` in which every sequence not routed to `keep` has its
/// rows shuffled and the order of those sequences is shuffled too. Pooled
/// embeddings, and hence routes, are unchanged.
fn permute_others(batch: &LabeledBatch, routes: &[usize], keep: usize, seed: u64) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut others: Vec<usize> = (0..batch.len()).filter(|&s| routes[s] != keep).collect();
    let slots = others.clone();
    others.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for (slot, src) in slots.iter().zip(&others) {
        order[*slot] = *src;
    }
    let mut out = batch.select(&order);
    for (s, &src) in order.iter().enumerate() {
        if routes[src] == keep {
            continue;
        }
        let x = &out.embeddings[s];
        let mut perm: Vec<usize> = (0..x.rows()).collect();
        perm.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&t| x.row(t).to_vec()).collect();
        out.embeddings[s] = Matrix::from_rows(&rows).expect("same shape");
    }
    out
}

/// Whether each model's certificates survive permutation of every other
/// model's data bit for bit.
pub fn permutation_invariant(registry: &ModelRegistry, data: &LabeledBatch, seed: u64) -> Result<bool, CliError> {
    let base = routed_certificates(registry, data)?;
    let routes = registry.route_batch(data)?;
    for j in 0..registry.models.len() {
        let permuted = permute_others(data, &routes, j, child_seed(seed, 8, j as u64));
        if registry.route_batch(&permuted)?.iter().filter(|&&r| r == j).count() != routes.iter().filter(|&&r| r == j).count() {
            return Ok(false);
        }
        let certs = routed_certificates(registry, &permuted)?;
        if certs[j] != base[j] {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `theorem5_check` on soft-mode copies; `Ok(message)` when it is refused.
pub fn soft_refusal(before: &ModelRegistry, after: &ModelRegistry, data: &LabeledBatch) -> Result<Option<String>, CliError> {
    let mut b = before.clone();
    let mut a = after.clone();
    b.router.mode = RoutingMode::Soft;
    a.router.mode = RoutingMode::Soft;
    match theorem5_check(&b, &a, data) {
        Err(e @ CoreError::HardRoutingRequired) => Ok(Some(e.to_string())),
        Err(e) => Err(e.into()),
        Ok(_) => Ok(None),
    }
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let stream = windows(spec, 6)?;
    let first = &stream[0];
    let classifier = fit_classifier(first, spec.generator.num_domains, spec.options.classifier_iters)?;
    let base_slice = first.domain_slice(0);
    if base_slice.is_empty() {
        return Err(CliError::Usage(
            "first window holds no domain-0 sequences for the base model".into(),
        ));
    }
    let base = ModelInstance::install(
        0,
        0,
        &base_slice,
        first.partitions[0].clone(),
        &spec.dial,
        spec.options.d_v,
        child_seed(spec.seed, 9, 0),
    )?;
    let registry = ModelRegistry::new(base, classifier, RoutingMode::Hard)?;
    let (registry, rows, before_first) = process(spec, registry, &stream)?;

    let specialists = rows.iter().filter(|r| r.kind == DecisionKind::Llm).count();
    let t4 = theorem4_check(&registry, &spec.dial);
    let pooled = stream.iter().skip(1).try_fold(first.clone(), |acc, w| acc.concat(w))?;
    let (t5, refusal) = match &before_first {
        Some((before, w)) => {
            let after = &registry;
            (
                theorem5_check(before, after, &stream[*w])?,
                soft_refusal(before, after, &stream[*w])?,
            )
        }
        None => (false, soft_refusal(&registry, &registry, first)?),
    };
    let invariant = permutation_invariant(&registry, &pooled, spec.seed)?;
    let mut out = Outcome::default();
    out.check(
        HIERARCHY,
        specialists == 1 && t4.ok && t5 && invariant && refusal.is_some(),
        format!(
            "{specialists} specialist recruitments; recruited models {} (k_max {}), (recruited, bound) blocks per model {:?}; certificates permutation-invariant {invariant}; preservation check {t5}; soft mode refused: {}",
            t4.recruited_models,
            t4.k_max,
            t4.blocks,
            refusal.as_deref().unwrap_or("no")
        ),
    );
    out.metric("specialists", specialists);
    out.metric("models", registry.models.len());
    out.metric("k_max", t4.k_max);
    out.metric("total_recruited_blocks", t4.total_blocks);
    if let Some(r) = rows.iter().find(|r| r.kind == DecisionKind::Llm) {
        out.metric("specialist_delta_l", format!("{:.6}", r.delta_l));
    }
    out.csv("windows.csv", &rows)?;
    out.jsonl("events.jsonl", &registry.events)?;
    add_registry(&mut out, "registry", &registry, spec.seed, &spec.config_hash())?;
    Ok(out)
}
