//! Trained localization at desk scale, gradient verification and rule
//! injection on the trained model.

use std::time::Instant;

use localist_core::bounds::{estimate_regularity, theorem1_threshold, DEFAULT_MARGIN_QUANTILE};
use localist_core::dial::effective_penalties;
use localist_core::hierarchy::KKT_TOL;
use localist_core::synth::generate;
use localist_core::trainer::{
    certify_kkt, finite_difference_error, inject_rule, resume, stationarity_residual, train_to_stationarity, violation_rate, InjectedRule,
    ModelShape, Objective,
};
use localist_core::{AttentionModel, GeneratorSpec, LabeledBatch, PenaltyConfig, RuleSpec, TrainOptions, TrainState};
use rayon::prelude::*;
use serde::Serialize;

use super::child_seed;
use super::criteria::{GRADIENT, RULES, TRAINED_LOCALIZATION};
use crate::artifacts::{checkpoint_manifest, encode_checkpoint, model_tensors, Outcome};
use crate::error::CliError;
use crate::spec::ExperimentSpec;

pub const RESIDUAL_TOL: f64 = 1e-8;
/// Off-block norm every group must exceed in the unpenalized contrast.
pub const CONTRAST_FLOOR: f64 = 1e-3;
pub const CONTRAST_ITERS: usize = 2000;
pub const TRAIN_SECONDS: f64 = 300.0;
pub const GRADIENT_INSTANCES: usize = 20;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const NEUTRAL_RULE_TOL: f64 = 1e-10;
pub const RULE_STEPS: usize = 500;

#[derive(Debug, Serialize)]
struct GroupRow {
    run: &'static str,
    head: usize,
    block: usize,
    focus: bool,
    norm: f64,
    penalty: f64,
    threshold: f64,
    kkt_ok: Option<bool>,
    kkt_residual: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TraceRow {
    step: usize,
    objective: f64,
}

#[derive(Debug, Serialize)]
struct GradientRow {
    instance: usize,
    seed: u64,
    params: usize,
    with_rule: bool,
    relative_error: f64,
}

fn options(spec: &ExperimentSpec, max_iters: usize) -> TrainOptions {
    TrainOptions {
        max_iters,
        tol: spec.training.tol,
        initial_step: spec.training.step,
        ..TrainOptions::default()
    }
}

fn gradient_instance(i: usize, seed: u64, beta: f64) -> Result<GradientRow, CliError> {
    let gen = GeneratorSpec {
        n: 5,
        d_model: 4,
        num_blocks: 2,
        anchors_per_block: 1,
        noise_std: 0.3,
        num_sequences: 2,
        seed,
        ..GeneratorSpec::default()
    };
    let batch = generate(&gen)?;
    let shape = ModelShape {
        d_model: 4,
        num_heads: 2,
        num_blocks: 2,
        group_width: 1,
        d_v: 2,
        num_classes: batch.num_classes,
        tau: 0.5,
        init_std: 0.5,
    };
    let model = AttentionModel::random(&shape, seed)?;
    let mut obj = Objective::new(PenaltyConfig::uniform(2, 2, 0.0, beta, shape.tau));
    let with_rule = i % 2 == 1;
    if with_rule {
        obj.rules.push(InjectedRule {
            rule: RuleSpec::ClassMass {
                positions: vec![0, 3],
                allowed: vec![1],
            },
            gamma: 0.5,
        });
    }
    Ok(GradientRow {
        instance: i,
        seed,
        params: model.param_count(),
        with_rule,
        relative_error: finite_difference_error(&model, &batch, &obj, FD_STEP)?,
    })
}

/// Positions of the first block outside its anchors, with every other class allowed.
fn violated_rule(batch: &LabeledBatch) -> Option<RuleSpec> {
    let p = &batch.partitions[0];
    if p.num_blocks() < 2 {
        return None;
    }
    let positions: Vec<usize> = p.block(0).iter().copied().filter(|&t| !p.is_anchor(t)).collect();
    let positions = if positions.is_empty() { p.block(0).to_vec() } else { positions };
    Some(RuleSpec::ClassMass {
        positions,
        allowed: (1..batch.num_classes).collect(),
    })
}

pub fn run(spec: &ExperimentSpec) -> Result<Outcome, CliError> {
    let dial = &spec.dial;
    let batch = generate(&spec.generator)?;
    let partition = batch.partitions[0].clone();
    let shape = ModelShape {
        d_model: spec.generator.d_model,
        num_blocks: partition.num_blocks(),
        num_classes: batch.num_classes,
        tau: dial.tau,
        init_std: spec.training.init_std,
        ..ModelShape::default()
    };
    let init = AttentionModel::random(&shape, child_seed(spec.seed, 1, 0))?;
    let head = spec.generator.identity_head(dial.tau)?;
    let reg = estimate_regularity(&batch.embeddings, &partition, &head, DEFAULT_MARGIN_QUANTILE, None)?;
    let penalties = effective_penalties(dial, &reg, &partition, &init.focus)?;
    let thresholds: Vec<f64> = partition
        .blocks()
        .iter()
        .map(|b| theorem1_threshold(&reg, b.len(), dial.tau))
        .collect::<Result<_, _>>()?;
    let compliant = (0..init.num_heads()).all(|h| {
        (0..partition.num_blocks()).filter(|&i| i != init.focus[h]).all(|i| {
            let v = penalties.group_penalties[h][i];
            v >= thresholds[i] && v >= dial.group_penalty_base
        })
    });
    let obj = Objective::new(penalties.clone());

    let start = Instant::now();
    let (state, converged) = train_to_stationarity(&init, &batch, &obj, &options(spec, spec.training.max_iters))?;
    let train_secs = start.elapsed().as_secs_f64();
    let cert = certify_kkt(&state.model, &batch, &obj, KKT_TOL)?;
    let off_max = state.model.max_off_focus_norm();

    let zero = Objective::new(PenaltyConfig::uniform(
        init.num_heads(),
        init.num_blocks(),
        0.0,
        dial.beta,
        dial.tau,
    ));
    let (contrast, _) = train_to_stationarity(&init, &batch, &zero, &options(spec, CONTRAST_ITERS))?;
    let contrast_min = contrast.model.min_off_focus_norm();

    let mut out = Outcome::default();
    out.check(
        TRAINED_LOCALIZATION,
        compliant
            && converged
            && state.stationarity_residual <= RESIDUAL_TOL
            && off_max == 0.0
            && cert.all_ok()
            && contrast_min > CONTRAST_FLOOR
            && train_secs < TRAIN_SECONDS,
        format!(
            "penalties compliant {compliant}; converged {converged} after {} steps, residual {:.3e}; max off-block norm {off_max:e}; KKT all pass {} (free residual {:.2e}); unpenalized min off-block norm {contrast_min:.3e}; {train_secs:.1}s",
            state.step,
            state.stationarity_residual,
            cert.all_ok(),
            cert.free_residual
        ),
    );
    out.metric("train_steps", state.step);
    out.metric("stationarity_residual", format!("{:.6e}", state.stationarity_residual));
    out.metric("max_off_block_norm", format!("{off_max:e}"));
    out.metric("contrast_min_off_block_norm", format!("{contrast_min:.6e}"));
    out.metric(
        "final_objective",
        format!("{:.12}", state.objective_history.last().copied().unwrap_or(f64::NAN)),
    );
    out.timing("train", train_secs);

    let mut groups = Vec::new();
    for (run, model, c) in [("penalized", &state.model, Some(&cert)), ("unpenalized", &contrast.model, None)] {
        let norms = model.group_norms();
        for (h, row) in norms.iter().enumerate() {
            for (i, &norm) in row.iter().enumerate() {
                let entry = c.and_then(|c| c.entry(h, i));
                groups.push(GroupRow {
                    run,
                    head: h,
                    block: i,
                    focus: model.focus[h] == i,
                    norm,
                    penalty: if c.is_some() { penalties.group_penalties[h][i] } else { 0.0 },
                    threshold: thresholds[i],
                    kkt_ok: entry.map(|e| e.kkt_ok),
                    kkt_residual: entry.map(|e| e.residual),
                });
            }
        }
    }
    out.csv("groups.csv", &groups)?;
    let trace: Vec<TraceRow> = state
        .objective_history
        .iter()
        .enumerate()
        .map(|(step, &objective)| TraceRow { step, objective })
        .collect();
    out.csv("trajectory.csv", &trace)?;
    out.bytes("model.lckp", encode_checkpoint(&model_tensors(&state.model)));
    out.text(
        "model.lckp.manifest",
        checkpoint_manifest(&state.model, spec.seed, &spec.config_hash()),
    );

    let grads: Vec<GradientRow> = (0..GRADIENT_INSTANCES)
        .into_par_iter()
        .map(|i| gradient_instance(i, child_seed(spec.seed, 2, i as u64), dial.beta))
        .collect::<Result<_, _>>()?;
    let worst = grads.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    out.check(
        GRADIENT,
        grads.len() >= GRADIENT_INSTANCES && worst <= GRADIENT_TOL,
        format!(
            "{} instances, worst relative error {worst:.3e} (limit {GRADIENT_TOL:e})",
            grads.len()
        ),
    );
    out.metric("gradient_worst_relative_error", format!("{worst:.6e}"));
    out.csv("gradient.csv", &grads)?;

    rule_checks(spec, &batch, &state, &obj, &mut out)?;
    Ok(out)
}

fn rule_checks(
    spec: &ExperimentSpec,
    batch: &LabeledBatch,
    state: &TrainState,
    obj: &Objective,
    out: &mut Outcome,
) -> Result<(), CliError> {
    let step = spec.training.step;
    let base = stationarity_residual(&state.model, batch, obj, step)?;
    let neutral = RuleSpec::ClassMass {
        positions: (0..batch.partitions[0].n()).collect(),
        allowed: (0..batch.num_classes).collect(),
    };
    let with_neutral = inject_rule(obj, neutral, 1.0)?;
    let moved = (stationarity_residual(&state.model, batch, &with_neutral, step)? - base).abs();
    let Some(rule) = violated_rule(batch) else {
        out.check(RULES, false, "needs at least two blocks for a violated rule");
        return Ok(());
    };
    let before = violation_rate(&state.model, batch, &rule)?;
    let injected = inject_rule(obj, rule.clone(), 1.0)?;
    let (after_state, _) = resume(state.clone(), batch, &injected, &options(spec, RULE_STEPS))?;
    let after = violation_rate(&after_state.model, batch, &rule)?;
    let resumed = after_state.step - state.step;
    out.check(
        RULES,
        moved <= NEUTRAL_RULE_TOL && after < before && resumed <= RULE_STEPS,
        format!("satisfied rule moves residual by {moved:.3e}; violated rule rate {before:.4} -> {after:.4} after {resumed} resumed steps"),
    );
    out.metric("neutral_rule_residual_change", format!("{moved:.6e}"));
    out.metric("violation_rate_before", format!("{before:.6}"));
    out.metric("violation_rate_after", format!("{after:.6}"));
    Ok(())
}
