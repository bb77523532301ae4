//! Penalized-likelihood accounting in nats and block recruitment.
//!
//! Attention is held fixed while candidates are screened: installing a block
//! changes only which anchor set governs each token, never the attention
//! rows themselves.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::{BlockPartition, HeadParams};
use crate::dial::{DialConfig, ReductionNormalizer};
use crate::linalg::{entropy_of, EntropyUnit, Matrix, ProbVector};
use crate::spectral::spectral_clusters;
use crate::trainer::{AttentionModel, KktCertificate};
use crate::{Error, Result};

/// Attention rows and their nat entropies for every token of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttention {
    /// `rows[s][t]`: attention of position `t` in sequence `s`.
    pub rows: Vec<Vec<Vec<f64>>>,
    pub entropy: Vec<Vec<f64>>,
}

impl TokenAttention {
    pub fn from_rows(rows: Vec<Vec<ProbVector>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 || rows.iter().any(|r| r.len() != n || r.iter().any(|p| p.len() != n)) {
            return Err(Error::Contract("attention rows must be N x N per sequence".into()));
        }
        let entropy = rows
            .iter()
            .map(|seq| seq.iter().map(|p| entropy_of(p.as_slice(), EntropyUnit::Nats)).collect())
            .collect();
        let rows = rows
            .into_iter()
            .map(|seq| seq.into_iter().map(ProbVector::into_inner).collect())
            .collect();
        Ok(Self { rows, entropy })
    }

    /// Rows of a single head.
    pub fn from_head(data: &[Matrix], head: &HeadParams) -> Result<Self> {
        Self::from_rows(data.iter().map(|x| head.weights(x)).collect::<Result<_>>()?)
    }

    /// Each token read from the head whose focus is the token's block
    /// (head 0 when no head focuses there).
    pub fn from_model(model: &AttentionModel, data: &[Matrix], partition: &BlockPartition) -> Result<Self> {
        let mut rows = Vec::with_capacity(data.len());
        for x in data {
            let per_head: Vec<Vec<ProbVector>> = (0..model.num_heads()).map(|h| model.attention(x, h)).collect::<Result<_>>()?;
            rows.push(
                (0..x.rows())
                    .map(|t| {
                        let g = partition.block_of(t);
                        let h = model.focus.iter().position(|&f| f == g).unwrap_or(0);
                        per_head[h][t].clone()
                    })
                    .collect(),
            );
        }
        Self::from_rows(rows)
    }

    pub fn n(&self) -> usize {
        self.rows[0].len()
    }

    pub fn num_sequences(&self) -> usize {
        self.rows.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.rows.len() * self.n()
    }
}

/// `Σ_i [ln|A_i| + c_param·|A_i|]` for the given anchor-set sizes.
pub fn anchor_cost(anchor_sizes: &[usize], c_param: f64) -> f64 {
    anchor_sizes.iter().map(|&a| (a as f64).ln() + c_param * a as f64).sum()
}

pub fn model_cost(partition: &BlockPartition, c_param: f64) -> f64 {
    let sizes: Vec<usize> = partition.anchor_sets().iter().map(Vec::len).collect();
    anchor_cost(&sizes, c_param)
}

/// `H + λ·max(0, H − ln|A| − ε)²`.
pub fn penalized_entropy(h: f64, anchor_size: usize, lambda_pen: f64, epsilon: f64) -> f64 {
    let excess = (h - (anchor_size as f64).ln() - epsilon).max(0.0);
    h + lambda_pen * excess * excess
}

/// Mean penalized entropy over every token.
pub fn data_cost(attn: &TokenAttention, partition: &BlockPartition, lambda_pen: f64, epsilon: f64) -> f64 {
    let mut total = 0.0;
    for seq in &attn.entropy {
        for (t, &h) in seq.iter().enumerate() {
            let a = partition.anchors(partition.block_of(t)).len();
            total += penalized_entropy(h, a, lambda_pen, epsilon);
        }
    }
    total / attn.num_tokens() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdlAccount {
    pub model_cost: f64,
    pub data_cost: f64,
    pub total: f64,
    pub p: usize,
    pub c_param: f64,
    pub lambda_pen: f64,
    pub epsilon: f64,
}

pub fn account(attn: &TokenAttention, partition: &BlockPartition, dial: &DialConfig) -> MdlAccount {
    let model_cost = model_cost(partition, dial.c_param);
    let data_cost = data_cost(attn, partition, dial.lambda_pen, dial.epsilon);
    MdlAccount {
        model_cost,
        data_cost,
        total: model_cost + data_cost,
        p: partition.num_blocks(),
        c_param: dial.c_param,
        lambda_pen: dial.lambda_pen,
        epsilon: dial.epsilon,
    }
}

/// Tokens `(sequence, position)` with `H_t > ln|A_{i*(t)}| + ε`.
pub fn confused_tokens(attn: &TokenAttention, partition: &BlockPartition, epsilon: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, seq) in attn.entropy.iter().enumerate() {
        for (t, &h) in seq.iter().enumerate() {
            let a = partition.anchors(partition.block_of(t)).len() as f64;
            if h > a.ln() + epsilon {
                out.push((s, t));
            }
        }
    }
    out
}

/// Distinct positions holding at least one confused token.
pub fn confused_positions(tokens: &[(usize, usize)]) -> Vec<usize> {
    tokens.iter().map(|&(_, t)| t).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Spectral clusters of confused positions by their mean attention rows
/// over the confused tokens at each position.
pub fn cluster_co_attention(tokens: &[(usize, usize)], attn: &TokenAttention) -> Vec<Vec<usize>> {
    let positions = confused_positions(tokens);
    let n = attn.n();
    let rows: Vec<Vec<f64>> = positions
        .iter()
        .map(|&t| {
            let mut mean = vec![0.0; n];
            let mut count = 0.0;
            for &(s, tt) in tokens.iter().filter(|&&(_, tt)| tt == t) {
                debug_assert_eq!(tt, t);
                mean.iter_mut().zip(&attn.rows[s][t]).for_each(|(m, v)| *m += v);
                count += 1.0;
            }
            mean.iter_mut().for_each(|m| *m /= count);
            mean
        })
        .collect();
    spectral_clusters(&rows)
        .into_iter()
        .map(|g| g.into_iter().map(|i| positions[i]).collect())
        .collect()
}

/// Mean, over sequences, of the entropy of position `t`'s attention
/// restricted to and renormalized over `block`.
fn within_cluster_entropy(attn: &TokenAttention, t: usize, block: &[usize]) -> f64 {
    let mut total = 0.0;
    for seq in &attn.rows {
        let row = &seq[t];
        let mass: f64 = block.iter().map(|&j| row[j]).sum();
        total += if mass > 0.0 {
            let p: Vec<f64> = block.iter().map(|&j| row[j] / mass).collect();
            entropy_of(&p, EntropyUnit::Nats)
        } else {
            (block.len() as f64).ln()
        };
    }
    total / attn.num_sequences() as f64
}

/// A screened block candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub block: Vec<usize>,
    pub anchors: Vec<usize>,
    pub delta_h_est: f64,
    pub new_block_cost: f64,
    pub delta_l: f64,
}

/// Evaluates installing `positions` (minus existing anchors) as a new block.
/// Every token at those positions changes governing block, so the estimate
/// covers all of them. Returns `None` when no position remains.
pub fn evaluate_candidate(
    positions: &[usize],
    attn: &TokenAttention,
    partition: &BlockPartition,
    dial: &DialConfig,
    confused_count: usize,
) -> Option<Candidate> {
    let block: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|&t| !partition.is_anchor(t))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if block.is_empty() || confused_count == 0 {
        return None;
    }
    let k = dial.anchor_k.min(block.len());
    let mut scored: Vec<(f64, usize)> = block.iter().map(|&t| (within_cluster_entropy(attn, t, &block), t)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut anchors: Vec<usize> = scored[..k].iter().map(|&(_, t)| t).collect();
    anchors.sort_unstable();
    let (sum, cluster_tokens) = entropy_reduction_sum(&block, anchors.len(), attn, partition, dial);
    let normalizer = match dial.normalizer {
        ReductionNormalizer::Confused => confused_count,
        ReductionNormalizer::Cluster => cluster_tokens,
    } as f64;
    let delta_h_est = sum / normalizer;
    let new_block_cost = anchor_cost(&[anchors.len()], dial.c_param);
    let delta_l = new_block_cost - (confused_count as f64 / attn.num_tokens() as f64) * delta_h_est;
    Some(Candidate {
        block,
        anchors,
        delta_h_est,
        new_block_cost,
        delta_l,
    })
}

/// `Σ_{t∈C}[H^pen_t(p) − H^pen_t(p+1|C)]` over every token at the block's
/// positions, and the number of such tokens.
fn entropy_reduction_sum(
    block: &[usize],
    new_anchor_size: usize,
    attn: &TokenAttention,
    partition: &BlockPartition,
    dial: &DialConfig,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for seq in &attn.entropy {
        for &t in block {
            let h = seq[t];
            let old = partition.anchors(partition.block_of(t)).len();
            sum += penalized_entropy(h, old, dial.lambda_pen, dial.epsilon)
                - penalized_entropy(h, new_anchor_size, dial.lambda_pen, dial.epsilon);
            count += 1;
        }
    }
    (sum, count)
}

/// `ΔH_est` for a cluster with the given anchors, normalized by `|S_confused|`.
pub fn estimate_entropy_reduction(
    cluster: &[usize],
    anchors: usize,
    attn: &TokenAttention,
    partition: &BlockPartition,
    dial: &DialConfig,
    confused_count: usize,
) -> f64 {
    let (sum, _) = entropy_reduction_sum(cluster, anchors, attn, partition, dial);
    sum / confused_count.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecruitmentDecision {
    pub recruit: bool,
    pub candidate_block: Option<Vec<usize>>,
    pub candidate_anchors: Option<Vec<usize>>,
    pub delta_l: f64,
    pub confused_set_size: usize,
    /// Number of candidate clusters screened.
    pub clusters: usize,
}

impl RecruitmentDecision {
    fn none(confused: usize) -> Self {
        Self {
            recruit: false,
            candidate_block: None,
            candidate_anchors: None,
            delta_l: 0.0,
            confused_set_size: confused,
            clusters: 0,
        }
    }
}

/// Best spectral candidate (lowest `ΔL`) and the decision `ΔL < −θ_block`.
pub fn recruit_block(attn: &TokenAttention, partition: &BlockPartition, dial: &DialConfig) -> Result<RecruitmentDecision> {
    if !(dial.theta_block > 0.0) {
        return Err(Error::Parameter("theta_block must be > 0".into()));
    }
    if attn.n() != partition.n() {
        return Err(Error::Contract("attention and partition lengths differ".into()));
    }
    let tokens = confused_tokens(attn, partition, dial.epsilon);
    if tokens.is_empty() {
        return Ok(RecruitmentDecision::none(0));
    }
    let clusters = cluster_co_attention(&tokens, attn);
    let best = clusters
        .iter()
        .filter_map(|c| evaluate_candidate(c, attn, partition, dial, tokens.len()))
        .min_by(|a, b| a.delta_l.total_cmp(&b.delta_l));
    let Some(best) = best else {
        return Ok(RecruitmentDecision {
            clusters: clusters.len(),
            ..RecruitmentDecision::none(tokens.len())
        });
    };
    Ok(RecruitmentDecision {
        recruit: best.delta_l < -dial.theta_block,
        delta_l: best.delta_l,
        candidate_block: Some(best.block),
        candidate_anchors: Some(best.anchors),
        confused_set_size: tokens.len(),
        clusters: clusters.len(),
    })
}

/// Lowest `ΔL` over every nonempty subset of the confused positions.
/// Exponential; intended as an oracle for at most ~16 positions.
pub fn exhaustive_best(attn: &TokenAttention, partition: &BlockPartition, dial: &DialConfig) -> Result<Option<Candidate>> {
    let tokens = confused_tokens(attn, partition, dial.epsilon);
    let positions = confused_positions(&tokens);
    if positions.len() > 20 {
        return Err(Error::Parameter(format!(
            "{} confused positions is too many to enumerate",
            positions.len()
        )));
    }
    let mut best: Option<Candidate> = None;
    for mask in 1u32..(1u32 << positions.len()) {
        let subset: Vec<usize> = (0..positions.len()).filter(|&i| mask >> i & 1 == 1).map(|i| positions[i]).collect();
        if let Some(c) = evaluate_candidate(&subset, attn, partition, dial, tokens.len()) {
            if best.as_ref().is_none_or(|b| c.delta_l < b.delta_l) {
                best = Some(c);
            }
        }
    }
    Ok(best)
}

/// `⌈(ln N − H_min)/θ⌉`.
pub fn p_max_bound(n: usize, h_min: f64, theta: f64) -> usize {
    (((n as f64).ln() - h_min) / theta).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    /// Block count when the decision was taken.
    pub p: usize,
    pub decision: RecruitmentDecision,
    pub before: MdlAccount,
    /// Account with the candidate installed, when one was accepted.
    pub after: Option<MdlAccount>,
}

impl LedgerEntry {
    /// Flat audit record: step, p, ΔL, accepted, |C|, |A|.
    pub fn record(&self) -> LedgerRecord {
        LedgerRecord {
            step: self.step,
            p: self.p,
            delta_l: self.decision.delta_l,
            accepted: self.decision.recruit,
            cluster_size: self.decision.candidate_block.as_ref().map_or(0, Vec::len),
            anchor_size: self.decision.candidate_anchors.as_ref().map_or(0, Vec::len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub step: usize,
    pub p: usize,
    pub delta_l: f64,
    pub accepted: bool,
    pub cluster_size: usize,
    pub anchor_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecruitmentLedger {
    pub history: Vec<LedgerEntry>,
    pub theta: f64,
    pub n: usize,
    pub p_max_bound: usize,
    pub h_min_estimate: f64,
}

impl RecruitmentLedger {
    pub fn new(n: usize, theta: f64, h_min: f64) -> Self {
        Self {
            history: Vec::new(),
            theta,
            n,
            p_max_bound: p_max_bound(n, h_min, theta),
            h_min_estimate: h_min,
        }
    }

    pub fn accepted(&self) -> usize {
        self.history.iter().filter(|e| e.decision.recruit).count()
    }

    pub fn records(&self) -> Vec<LedgerRecord> {
        self.history.iter().map(LedgerEntry::record).collect()
    }

    /// Every accepted entry lowered the tracked total by more than `θ`.
    pub fn decreases_ok(&self) -> bool {
        self.history
            .iter()
            .filter(|e| e.decision.recruit)
            .all(|e| e.decision.delta_l < -self.theta && e.after.is_some_and(|a| a.total < e.before.total - self.theta))
    }
}

/// Accepted recruitments within `⌈(ln N − H_min)/θ⌉`.
pub fn ledger_check(ledger: &RecruitmentLedger) -> bool {
    ledger.accepted() <= p_max_bound(ledger.n, ledger.h_min_estimate, ledger.theta)
}

/// Repeats screening and installation until a candidate is rejected or
/// `max_rounds` decisions have been logged.
pub fn run_recruitment(
    attn: &TokenAttention,
    partition: &BlockPartition,
    dial: &DialConfig,
    max_rounds: usize,
) -> Result<(BlockPartition, RecruitmentLedger)> {
    let mut ledger = RecruitmentLedger::new(partition.n(), dial.theta_block, dial.h_min);
    let mut current = partition.clone();
    for step in 0..max_rounds {
        let before = account(attn, &current, dial);
        let decision = recruit_block(attn, &current, dial)?;
        let mut after = None;
        let accepted = decision.recruit;
        if accepted {
            let block = decision.candidate_block.as_ref().expect("accepted decisions carry a block");
            let anchors = decision.candidate_anchors.as_ref().expect("accepted decisions carry anchors");
            current = current.carve(block, anchors)?;
            after = Some(account(attn, &current, dial));
        }
        ledger.history.push(LedgerEntry {
            step,
            p: before.p,
            decision,
            before,
            after,
        });
        if !accepted {
            break;
        }
    }
    Ok((current, ledger))
}

/// Whether every pre-existing (head, block) keeps its pass status and every
/// group of the recruited block passes. `new_block` is `None` when nothing
/// was recruited.
pub fn preserve_localization_check(before: &KktCertificate, after: &KktCertificate, new_block: Option<usize>) -> bool {
    let Some(new_block) = new_block else {
        return true;
    };
    let old_unchanged = before
        .entries
        .iter()
        .all(|b| after.entry(b.head, b.block).is_some_and(|a| a.kkt_ok == b.kkt_ok));
    let new_ok = after.entries.iter().filter(|e| e.block == new_block).all(|e| e.kkt_ok);
    let new_present = after.entries.iter().any(|e| e.block == new_block);
    old_unchanged && new_ok && new_present
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dial() -> DialConfig {
        DialConfig {
            lambda_pen: 2.0,
            epsilon: 0.1,
            c_param: 0.05,
            theta_block: 0.1,
            ..DialConfig::default()
        }
    }

    #[test]
    fn model_cost_examples() {
        assert_eq!(anchor_cost(&[], 0.3), 0.0);
        let one = BlockPartition::single(3, vec![0]).unwrap();
        assert!((model_cost(&one, 0.1) - 0.1).abs() < 1e-15);
        let three = BlockPartition::contiguous(&[2, 4, 8], &[2, 4, 8]).unwrap();
        let want = 6.0 * std::f64::consts::LN_2 + 0.7;
        assert!((model_cost(&three, 0.05) - want).abs() < 1e-14);
    }

    #[test]
    fn penalized_entropy_examples() {
        assert_eq!(penalized_entropy(0.5, 2, 3.0, 0.1), 0.5);
        let h = 4.0_f64.ln() + 0.1 + 1.0;
        assert!((penalized_entropy(h, 4, 2.0, 0.1) - (h + 2.0)).abs() < 1e-14);
        assert_eq!(penalized_entropy(3.3, 1, 0.0, 0.0), 3.3);
    }

    fn uniform_attention(n: usize, seqs: usize) -> TokenAttention {
        TokenAttention::from_rows(vec![vec![ProbVector::uniform(n); n]; seqs]).unwrap()
    }

    #[test]
    fn data_cost_examples() {
        let point = TokenAttention::from_rows(vec![(0..4).map(|t| ProbVector::point_mass(4, t)).collect()]).unwrap();
        let p = BlockPartition::single(4, vec![0]).unwrap();
        assert_eq!(data_cost(&point, &p, 5.0, 0.0), 0.0);
        let u = uniform_attention(8, 2);
        let all = BlockPartition::single(8, (0..8).collect()).unwrap();
        assert!((data_cost(&u, &all, 7.0, 0.0) - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confused_examples() {
        let p = BlockPartition::contiguous(&[8, 8], &[2, 2]).unwrap();
        let u = uniform_attention(16, 1);
        assert_eq!(confused_tokens(&u, &p, 0.1).len(), 16);
        let point = TokenAttention::from_rows(vec![(0..16).map(|t| ProbVector::point_mass(16, t)).collect()]).unwrap();
        assert!(confused_tokens(&point, &p, 0.1).is_empty());
        let d = recruit_block(&point, &p, &dial()).unwrap();
        assert!(!d.recruit && d.candidate_block.is_none());
        // Half of the positions spread over four slots, half point masses.
        let rows: Vec<ProbVector> = (0..16)
            .map(|t| {
                if t % 2 == 0 {
                    ProbVector::new((0..16).map(|j| if j < 4 { 0.25 } else { 0.0 }).collect()).unwrap()
                } else {
                    ProbVector::point_mass(16, t)
                }
            })
            .collect();
        let half = TokenAttention::from_rows(vec![rows]).unwrap();
        let got: Vec<usize> = confused_tokens(&half, &p, 0.1).iter().map(|&(_, t)| t).collect();
        assert_eq!(got, (0..16).step_by(2).collect::<Vec<_>>());
    }

    fn planted() -> (TokenAttention, BlockPartition) {
        // Positions 8..14 spread over 8..14; the rest attend to their anchor.
        let n = 16;
        let rows: Vec<ProbVector> = (0..n)
            .map(|t| {
                if (8..14).contains(&t) {
                    ProbVector::new((0..n).map(|j| if (8..14).contains(&j) { 1.0 / 6.0 } else { 0.0 }).collect()).unwrap()
                } else {
                    ProbVector::point_mass(n, 0)
                }
            })
            .collect();
        let attn = TokenAttention::from_rows(vec![rows; 3]).unwrap();
        (attn, BlockPartition::single(n, vec![0]).unwrap())
    }

    #[test]
    fn planted_concept_is_recruited() {
        let (attn, p) = planted();
        let d = recruit_block(&attn, &p, &dial()).unwrap();
        assert!(d.recruit);
        assert_eq!(d.candidate_block.as_deref(), Some(&[8, 9, 10, 11, 12, 13][..]));
        assert_eq!(d.candidate_anchors.as_ref().unwrap().len(), 4);
        let best = exhaustive_best(&attn, &p, &dial()).unwrap().unwrap();
        assert!(d.delta_l <= best.delta_l * 0.9 || (d.delta_l - best.delta_l).abs() <= 0.1 * best.delta_l.abs());
        let huge = DialConfig {
            theta_block: 1e9,
            theta_llm: 2e9,
            ..dial()
        };
        assert!(!recruit_block(&attn, &p, &huge).unwrap().recruit);
    }

    #[test]
    fn estimate_matches_full_recomputation() {
        let (attn, p) = planted();
        let dial = dial();
        let tokens = confused_tokens(&attn, &p, dial.epsilon);
        let c = evaluate_candidate(&[8, 9, 10, 11, 12, 13], &attn, &p, &dial, tokens.len()).unwrap();
        let carved = p.carve(&c.block, &c.anchors).unwrap();
        let before = data_cost(&attn, &p, dial.lambda_pen, dial.epsilon);
        let after = data_cost(&attn, &carved, dial.lambda_pen, dial.epsilon);
        let brute = (before - after) * attn.num_tokens() as f64 / tokens.len() as f64;
        assert!((c.delta_h_est - brute).abs() <= 1e-12 * brute.abs().max(1.0));
        let direct = estimate_entropy_reduction(&c.block, c.anchors.len(), &attn, &p, &dial, tokens.len());
        assert_eq!(direct, c.delta_h_est);
        // ΔL equals the realized change in the total.
        let realized = account(&attn, &carved, &dial).total - account(&attn, &p, &dial).total;
        assert!((c.delta_l - realized).abs() < 1e-12);
    }

    #[test]
    fn ledger_bound_examples() {
        assert_eq!(p_max_bound(1024, 0.0, 0.5), 14);
        assert_eq!(p_max_bound(64, 0.0, 64.0_f64.ln()), 1);
        assert_eq!(p_max_bound(64, 0.0, 10.0), 1);
        assert!(ledger_check(&RecruitmentLedger::new(16, 0.5, 0.0)));
    }

    #[test]
    fn recruitment_loop_halts_within_bound() {
        let (attn, p) = planted();
        let (part, ledger) = run_recruitment(&attn, &p, &dial(), 100).unwrap();
        assert!(ledger.accepted() >= 1);
        assert!(ledger_check(&ledger));
        assert!(ledger.decreases_ok());
        assert_eq!(part.num_blocks(), 1 + ledger.accepted());
        assert!(!ledger.history.last().unwrap().decision.recruit);
    }

    #[test]
    fn cluster_normalizer_switch() {
        let (attn, p) = planted();
        let d = DialConfig {
            normalizer: ReductionNormalizer::Cluster,
            ..dial()
        };
        let tokens = confused_tokens(&attn, &p, d.epsilon);
        let c = evaluate_candidate(&[8, 9, 10], &attn, &p, &d, tokens.len()).unwrap();
        let (sum, count) = entropy_reduction_sum(&c.block, c.anchors.len(), &attn, &p, &d);
        assert_eq!(c.delta_h_est, sum / count as f64);
    }

    proptest! {
        #[test]
        fn penalized_entropy_is_convex(a in 0.0f64..5.0, b in 0.0f64..5.0, size in 1usize..9, lam in 0.0f64..10.0, eps in 0.0f64..0.5) {
            let mid = penalized_entropy((a + b) / 2.0, size, lam, eps);
            let avg = (penalized_entropy(a, size, lam, eps) + penalized_entropy(b, size, lam, eps)) / 2.0;
            prop_assert!(mid <= avg + 1e-12);
        }
    }
}
