//! Model registry, routing, hierarchical penalized-likelihood accounting and
//! specialist recruitment.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockPartition, HeadParams};
use crate::bounds::{estimate_regularity, DEFAULT_MARGIN_QUANTILE};
use crate::dial::{effective_penalties, DialConfig, PenaltyConfig};
use crate::linalg::{dot, norm2, softmax_temp, softmax_unchecked, Matrix, ProbVector};
use crate::recruit::data_cost as block_data_cost;
use crate::recruit::{model_cost as block_model_cost, p_max_bound, recruit_block, TokenAttention};
use crate::synth::LabeledBatch;
use crate::trainer::{certify_kkt, resume, task_loss, AttentionModel, KktCertificate, Objective, TrainOptions, TrainState};
use crate::{Error, Result};

/// Tolerance used for per-model stationarity certificates.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Hard,
    Soft,
    Hierarchical,
}

/// Affine score `w·e + b` over a pooled embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Scorer {
    pub fn score(&self, e: &[f64]) -> f64 {
        dot(&self.weights, e) + self.bias
    }
}

/// Mean of a sequence's rows.
pub fn embed(x: &Matrix) -> Vec<f64> {
    let mut e = vec![0.0; x.cols()];
    for t in 0..x.rows() {
        e.iter_mut().zip(x.row(t)).for_each(|(a, b)| *a += b);
    }
    e.iter_mut().for_each(|a| *a /= x.rows() as f64);
    e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub scorers: Vec<Scorer>,
    pub mode: RoutingMode,
}

impl Router {
    pub fn new(scorers: Vec<Scorer>, mode: RoutingMode) -> Result<Self> {
        if scorers.is_empty() {
            return Err(Error::Contract("router needs at least one scorer".into()));
        }
        Ok(Self { scorers, mode })
    }

    pub fn scores(&self, e: &[f64]) -> Result<Vec<f64>> {
        if self.scorers.iter().any(|s| s.weights.len() != e.len()) {
            return Err(Error::Contract("embedding width does not match scorers".into()));
        }
        Ok(self.scorers.iter().map(|s| s.score(e)).collect())
    }
}

/// `p(M_j | x)`: softmax of the model scores.
pub fn route_probs(e: &[f64], router: &Router) -> Result<ProbVector> {
    softmax_temp(&router.scores(e)?, 1.0)
}

/// Argmax of the routing distribution; ties go to the lowest index.
pub fn hard_route(e: &[f64], router: &Router) -> Result<usize> {
    let s = router.scores(e)?;
    let mut best = 0;
    for (j, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = j;
        }
    }
    Ok(best)
}

/// `−Σ p ln p` of a routing or domain distribution.
pub fn domain_entropy(p: &ProbVector) -> f64 {
    crate::linalg::entropy(p, crate::linalg::EntropyUnit::Nats)
}

/// `Σ_j p(M_j|x) M_j(x)` over model logits.
pub fn soft_route_output(x: &Matrix, router: &Router, models: &[ModelInstance]) -> Result<Matrix> {
    if models.len() != router.scorers.len() {
        return Err(Error::Contract("one scorer per model".into()));
    }
    let p = route_probs(&embed(x), router)?;
    let mut out: Option<Matrix> = None;
    for (m, &w) in models.iter().zip(p.as_slice()) {
        let z = m.model.logits(x)?;
        match out.as_mut() {
            None => out = Some(z.scale(w)),
            Some(o) => {
                if o.shape() != z.shape() {
                    return Err(Error::Contract("models disagree on output shape".into()));
                }
                o.add_scaled(&z, w)?;
            }
        }
    }
    out.ok_or_else(|| Error::Contract("no models".into()))
}

/// Demonstration path for delegation: rows in each flagged span come from
/// the named specialist, all other rows from the base model (index 0).
pub fn hierarchical_output(x: &Matrix, spans: &[(std::ops::Range<usize>, usize)], models: &[ModelInstance]) -> Result<Matrix> {
    let base = models.first().ok_or_else(|| Error::Contract("no models".into()))?;
    let mut out = base.model.logits(x)?;
    for (range, j) in spans {
        let m = models.get(*j).ok_or_else(|| Error::Contract(format!("no model {j}")))?;
        let z = m.model.logits(x)?;
        if z.shape() != out.shape() || range.end > x.rows() {
            return Err(Error::Contract("span does not fit the output".into()));
        }
        for t in range.clone() {
            out.row_mut(t).copy_from_slice(z.row(t));
        }
    }
    Ok(out)
}

/// Softmax logistic regression from pooled embeddings to domain tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    pub scorers: Vec<Scorer>,
}

impl DomainClassifier {
    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn train(embeddings: &[Vec<f64>], tags: &[usize], num_domains: usize, iters: usize, lr: f64) -> Result<Self> {
        if embeddings.is_empty() || embeddings.len() != tags.len() {
            return Err(Error::Contract("one tag per embedding".into()));
        }
        if tags.iter().any(|&d| d >= num_domains) {
            return Err(Error::Contract("tag outside the domain range".into()));
        }
        let d = embeddings[0].len();
        let mut scorers = vec![
            Scorer {
                weights: vec![0.0; d],
                bias: 0.0,
            };
            num_domains
        ];
        let m = embeddings.len() as f64;
        for _ in 0..iters {
            let mut gw = vec![vec![0.0; d]; num_domains];
            let mut gb = vec![0.0; num_domains];
            for (e, &y) in embeddings.iter().zip(tags) {
                let s: Vec<f64> = scorers.iter().map(|sc| sc.score(e)).collect();
                let p = softmax_unchecked(&s, 1.0);
                for k in 0..num_domains {
                    let r = p[k] - f64::from(u8::from(k == y));
                    gw[k].iter_mut().zip(e).for_each(|(g, v)| *g += r * v / m);
                    gb[k] += r / m;
                }
            }
            for k in 0..num_domains {
                scorers[k].weights.iter_mut().zip(&gw[k]).for_each(|(w, g)| *w -= lr * g);
                scorers[k].bias -= lr * gb[k];
            }
        }
        Ok(Self { scorers })
    }

    pub fn num_domains(&self) -> usize {
        self.scorers.len()
    }

    pub fn posterior(&self, e: &[f64]) -> Result<ProbVector> {
        Router::new(self.scorers.clone(), RoutingMode::Hard).and_then(|r| route_probs(e, &r))
    }

    /// Mean domain posterior over a batch.
    pub fn mean_posterior(&self, batch: &LabeledBatch) -> Result<ProbVector> {
        let mut acc = vec![0.0; self.num_domains()];
        for x in &batch.embeddings {
            let p = self.posterior(&embed(x))?;
            acc.iter_mut().zip(p.as_slice()).for_each(|(a, b)| *a += b);
        }
        let n = batch.len().max(1) as f64;
        let mut v: Vec<f64> = acc.iter().map(|a| a / n).collect();
        let total: f64 = v.iter().sum();
        v.iter_mut().for_each(|a| *a /= total);
        ProbVector::new(v)
    }

    /// Router whose model `j` scores with the classifier row of `tags[j]`.
    pub fn router_for(&self, tags: &[usize], mode: RoutingMode) -> Result<Router> {
        let scorers = tags
            .iter()
            .map(|&t| {
                self.scorers
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("classifier has no domain {t}")))
            })
            .collect::<Result<_>>()?;
        Router::new(scorers, mode)
    }
}

/// One registered model with its own partition, dial and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInstance {
    pub id: usize,
    pub partition: BlockPartition,
    pub dial: DialConfig,
    pub model: AttentionModel,
    pub objective: Objective,
    pub param_count: usize,
    pub domain_tag: usize,
    /// Blocks added after installation.
    pub recruited_blocks: usize,
}

/// Unit direction of the mean anchor embedding of each block.
fn anchor_directions(data: &[Matrix], partition: &BlockPartition) -> Vec<Vec<f64>> {
    let d = data[0].cols();
    partition
        .anchor_sets()
        .iter()
        .map(|anchors| {
            let mut u = vec![0.0; d];
            for x in data {
                for &a in anchors {
                    u.iter_mut().zip(x.row(a)).for_each(|(s, v)| *s += v);
                }
            }
            let n = norm2(&u);
            if n > 0.0 {
                u.iter_mut().for_each(|s| *s /= n);
            }
            u
        })
        .collect()
}

/// Scale `s` such that `s² · min_t p_t (min_{A} x_a·u − max_{j∉A} x_j·u) = δ`
/// over queries of the block with positive projection `p_t = x_t·u`.
fn design_scale(data: &[Matrix], partition: &BlockPartition, block: usize, u: &[f64], delta: f64) -> f64 {
    let anchors = partition.anchors(block);
    let mut min_gap = f64::INFINITY;
    for x in data {
        let proj: Vec<f64> = (0..x.rows()).map(|t| dot(x.row(t), u)).collect();
        let own = anchors.iter().map(|&a| proj[a]).fold(f64::INFINITY, f64::min);
        let rival = (0..x.rows())
            .filter(|j| !anchors.contains(j))
            .map(|j| proj[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let spread = if rival.is_finite() { own - rival } else { own };
        for &t in partition.block(block) {
            if proj[t] > 0.0 {
                min_gap = min_gap.min(proj[t] * spread);
            }
        }
    }
    if min_gap.is_finite() && min_gap > 0.0 {
        (delta / min_gap).sqrt()
    } else {
        1.0
    }
}

/// One head per block whose single live query/key column is `s·u_h`, with
/// `u_h` the block's mean anchor direction and `s` calibrated so that the
/// block's anchors beat every other position by `delta`.
pub fn anchor_designed_model(
    data: &[Matrix],
    partition: &BlockPartition,
    delta: f64,
    tau: f64,
    d_v: usize,
    num_classes: usize,
    seed: u64,
) -> Result<AttentionModel> {
    if data.is_empty() {
        return Err(Error::Contract("cannot design heads without data".into()));
    }
    let p = partition.num_blocks();
    let d = data[0].cols();
    let shape = crate::trainer::ModelShape {
        d_model: d,
        num_heads: p,
        num_blocks: p,
        group_width: 1,
        d_v,
        num_classes,
        tau,
        init_std: 0.02,
    };
    let mut model = AttentionModel::random(&shape, seed)?;
    let dirs = anchor_directions(data, partition);
    for (h, u) in dirs.iter().enumerate() {
        let col = designed_columns(data, partition, h, u, delta, p);
        model.heads[h].w_q = col.clone();
        model.heads[h].w_k = col;
    }
    model.focus = (0..p).collect();
    Ok(model)
}

/// `d × width` matrix whose column `block` is the calibrated `s·u`.
fn designed_columns(data: &[Matrix], partition: &BlockPartition, block: usize, u: &[f64], delta: f64, width: usize) -> Matrix {
    let s = design_scale(data, partition, block, u, delta);
    Matrix::from_fn(u.len(), width, |r, c| if c == block { s * u[r] } else { 0.0 })
}

impl ModelInstance {
    /// Designs heads from the slice, sets penalties from the dial and the
    /// measured regularity constants, then runs `dial.warmup_steps`
    /// proximal steps on the slice.
    pub fn install(
        id: usize,
        domain_tag: usize,
        slice: &LabeledBatch,
        partition: BlockPartition,
        dial: &DialConfig,
        d_v: usize,
        seed: u64,
    ) -> Result<Self> {
        dial.validate()?;
        let model = anchor_designed_model(
            &slice.embeddings,
            &partition,
            dial.target_delta,
            dial.tau,
            d_v,
            slice.num_classes,
            seed,
        )?;
        let reg = estimate_regularity(&slice.embeddings, &partition, &model.heads[0], DEFAULT_MARGIN_QUANTILE, None)?;
        let reg = crate::bounds::RegularityEstimate {
            delta: if reg.delta.is_finite() { reg.delta } else { dial.target_delta },
            rho_max: reg.rho_max.min(0.999),
            ..reg
        };
        let penalties = effective_penalties(dial, &reg, &partition, &model.focus)?;
        let objective = Objective::new(penalties);
        let state = TrainState::new(model);
        let opts = TrainOptions {
            max_iters: dial.warmup_steps,
            ..TrainOptions::default()
        };
        let (state, _) = if dial.warmup_steps > 0 {
            resume(state, slice, &objective, &opts)?
        } else {
            (state, false)
        };
        let param_count = state.model.param_count();
        Ok(Self {
            id,
            partition,
            dial: dial.clone(),
            model: state.model,
            objective,
            param_count,
            domain_tag,
            recruited_blocks: 0,
        })
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.model.heads
    }

    /// `c_LLM·ln|θ| + Σ_i [ln|A_i| + c_param·|A_i|]`.
    pub fn model_cost(&self) -> f64 {
        self.dial.c_llm * (self.param_count as f64).ln() + block_model_cost(&self.partition, self.dial.c_param)
    }

    pub fn attention(&self, slice: &LabeledBatch) -> Result<TokenAttention> {
        TokenAttention::from_model(&self.model, &slice.embeddings, &self.partition)
    }

    /// Mean penalized entropy over the slice; 0 for an empty slice.
    pub fn data_cost(&self, slice: &LabeledBatch) -> Result<f64> {
        if slice.is_empty() {
            return Ok(0.0);
        }
        Ok(block_data_cost(
            &self.attention(slice)?,
            &self.partition,
            self.dial.lambda_pen,
            self.dial.epsilon,
        ))
    }

    /// `exp` of the mean task cross-entropy on the slice.
    pub fn perplexity(&self, slice: &LabeledBatch) -> Result<f64> {
        if slice.is_empty() {
            return Ok(1.0);
        }
        Ok(task_loss(&self.model, slice, 0.0)?.exp())
    }

    pub fn certificate(&self, slice: &LabeledBatch) -> Result<Option<KktCertificate>> {
        if slice.is_empty() {
            return Ok(None);
        }
        certify_kkt(&self.model, slice, &self.objective, KKT_TOL).map(Some)
    }

    /// Installs a recruited block: the partition is carved, every head gains
    /// a zero column group with the off-focus `penalty`, and a head designed
    /// from the new anchors joins with zero readout rows. Logits on any input
    /// are unchanged by the installation.
    pub fn install_block(&mut self, block: &[usize], anchors: &[usize], penalty: f64, slice: &LabeledBatch) -> Result<()> {
        if slice.is_empty() {
            return Err(Error::Contract("cannot design a head without data".into()));
        }
        let partition = self.partition.carve(block, anchors)?;
        let grown = self.model.add_block(1);
        let new_block = partition.num_blocks() - 1;
        let u = anchor_directions(&slice.embeddings, &partition).swap_remove(new_block);
        let cols = designed_columns(
            &slice.embeddings,
            &partition,
            new_block,
            &u,
            self.dial.target_delta,
            grown.heads[0].d_head(),
        );
        let seed = (self.id as u64) << 32 | self.recruited_blocks as u64;
        let fresh = AttentionModel::random(
            &crate::trainer::ModelShape {
                d_model: grown.d_model(),
                num_heads: 1,
                num_blocks: 1,
                group_width: 1,
                d_v: grown.d_v(),
                num_classes: grown.num_classes(),
                tau: grown.tau(),
                init_std: 0.02,
            },
            seed,
        )?;
        let head = HeadParams::new(cols.clone(), cols, fresh.heads[0].w_v.clone(), grown.tau())?;
        self.model = grown.add_head(head, new_block)?;
        self.partition = partition;
        self.objective.penalties = self
            .objective
            .penalties
            .with_block(penalty)
            .with_head(new_block, self.dial.focus_penalty, penalty);
        self.param_count = self.model.param_count();
        self.recruited_blocks += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DecisionKind {
    Llm,
    Block,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierEvent {
    pub step: usize,
    pub kind: DecisionKind,
    pub delta_l: f64,
    pub h_domain: f64,
    pub dominant_domain: usize,
    pub model: usize,
    pub perplexity: f64,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub models: Vec<ModelInstance>,
    pub router: Router,
    pub classifier: DomainClassifier,
    pub events: Vec<HierEvent>,
}

impl ModelRegistry {
    pub fn new(base: ModelInstance, classifier: DomainClassifier, mode: RoutingMode) -> Result<Self> {
        let router = classifier.router_for(&[base.domain_tag], mode)?;
        Ok(Self {
            models: vec![base],
            router,
            classifier,
            events: Vec::new(),
        })
    }

    pub fn mode(&self) -> RoutingMode {
        self.router.mode
    }

    pub fn serves(&self, domain: usize) -> bool {
        self.models.iter().any(|m| m.domain_tag == domain)
    }

    pub fn tags(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.domain_tag).collect()
    }

    /// Adds a model and rebuilds the router from the classifier.
    pub fn add_model(&mut self, model: ModelInstance) -> Result<()> {
        self.models.push(model);
        self.router = self.classifier.router_for(&self.tags(), self.router.mode)?;
        Ok(())
    }

    /// Hard-routed model index of every sequence.
    pub fn route_batch(&self, batch: &LabeledBatch) -> Result<Vec<usize>> {
        batch.embeddings.iter().map(|x| hard_route(&embed(x), &self.router)).collect()
    }

    /// Per-model sub-batches under hard routing, each in original order.
    pub fn slices(&self, batch: &LabeledBatch) -> Result<Vec<LabeledBatch>> {
        let routes = self.route_batch(batch)?;
        Ok((0..self.models.len())
            .map(|j| {
                let idx: Vec<usize> = (0..batch.len()).filter(|&s| routes[s] == j).collect();
                batch.select(&idx)
            })
            .collect())
    }

    /// Model whose tag matches the input's domain, else the hard-routed one.
    fn optimal_model(&self, tag: usize, e: &[f64]) -> Result<usize> {
        match self.models.iter().position(|m| m.domain_tag == tag) {
            Some(j) => Ok(j),
            None => hard_route(e, &self.router),
        }
    }

    /// Recruited models and recruited blocks per model.
    pub fn recruited_models(&self) -> usize {
        self.models.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierAccount {
    pub model_costs: Vec<f64>,
    pub data_costs: Vec<f64>,
    pub routing_cost: f64,
    pub total: f64,
    pub c_llm: f64,
    pub k_max_domains: usize,
    pub tau_domain: f64,
    pub theta_llm: f64,
}

/// `Σ_j [L_model(M_j) + L_data|M_j] + L_routing` on a batch routed by hard assignment.
pub fn hier_total(registry: &ModelRegistry, batch: &LabeledBatch, dial: &DialConfig) -> Result<HierAccount> {
    let slices = registry.slices(batch)?;
    let mut model_costs = Vec::with_capacity(registry.models.len());
    let mut data_costs = Vec::with_capacity(registry.models.len());
    for (m, slice) in registry.models.iter().zip(&slices) {
        model_costs.push(m.model_cost());
        data_costs.push(m.data_cost(slice)?);
    }
    let mut routing = 0.0;
    for (x, &tag) in batch.embeddings.iter().zip(&batch.domain_tags) {
        let e = embed(x);
        let j = registry.optimal_model(tag, &e)?;
        let p = route_probs(&e, &registry.router)?;
        routing -= p[j].max(f64::MIN_POSITIVE).ln();
    }
    let routing_cost = if batch.is_empty() { 0.0 } else { routing / batch.len() as f64 };
    let total = model_costs.iter().sum::<f64>() + data_costs.iter().sum::<f64>() + routing_cost;
    Ok(HierAccount {
        model_costs,
        data_costs,
        routing_cost,
        total,
        c_llm: dial.c_llm,
        k_max_domains: dial.k_max_domains,
        tau_domain: dial.tau_domain,
        theta_llm: dial.theta_llm,
    })
}

/// Outcome of one hierarchical decision, with what to install.
#[derive(Debug, Clone, PartialEq)]
pub struct HierDecision {
    pub kind: DecisionKind,
    pub delta_l: f64,
    pub h_domain: f64,
    pub dominant_domain: usize,
    /// Model the block branch examined.
    pub model: usize,
    pub perplexity: f64,
    pub specialist: Option<ModelInstance>,
    pub block: Option<(Vec<usize>, Vec<usize>)>,
}

/// Index of the model receiving most of the batch (lowest on ties).
fn busiest_model(registry: &ModelRegistry, batch: &LabeledBatch) -> Result<usize> {
    let routes = registry.route_batch(batch)?;
    let mut counts = vec![0usize; registry.models.len()];
    routes.iter().for_each(|&j| counts[j] += 1);
    let mut best = 0;
    for (j, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Top `k` positions by attention they receive under a head aligned with
/// the slice's mean embedding direction.
fn received_mass_anchors(slice: &LabeledBatch, k: usize, tau: f64) -> Result<Vec<usize>> {
    let n = slice.embeddings[0].rows();
    let d = slice.embeddings[0].cols();
    let mut u = vec![0.0; d];
    for x in &slice.embeddings {
        embed(x).iter().zip(u.iter_mut()).for_each(|(a, b)| *b += a);
    }
    let nu = norm2(&u);
    if nu > 0.0 {
        u.iter_mut().for_each(|v| *v /= nu);
    }
    let col = Matrix::from_fn(d, 1, |r, _| u[r]);
    let head = HeadParams::new(col.clone(), col, Matrix::identity(d), tau)?;
    let mut mass = vec![0.0; n];
    for x in &slice.embeddings {
        for row in head.weights(x)? {
            mass.iter_mut().zip(row.as_slice()).for_each(|(m, v)| *m += v);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut anchors: Vec<usize> = order[..k.min(n)].to_vec();
    anchors.sort_unstable();
    Ok(anchors)
}

/// Counterfactual specialist for the `domain` slice: one block over every
/// position, anchors by received attention mass, then installation with warm-up.
pub fn candidate_specialist(
    registry: &ModelRegistry,
    window: &LabeledBatch,
    domain: usize,
    dial: &DialConfig,
    seed: u64,
) -> Result<Option<ModelInstance>> {
    let slice = window.domain_slice(domain);
    if slice.is_empty() {
        return Ok(None);
    }
    let n = slice.embeddings[0].rows();
    let anchors = received_mass_anchors(&slice, dial.anchor_k, 1.0)?;
    let partition = BlockPartition::single(n, anchors)?;
    let d_v = registry.models[0].model.d_v();
    ModelInstance::install(registry.models.len(), domain, &slice, partition, dial, d_v, seed).map(Some)
}

/// One pass of the hierarchical decision on a window of recent inputs.
///
/// The domain entropy is taken over the window's mean domain posterior.
/// Above `τ_domain` an unserved dominant domain is screened for a
/// specialist by full recomputation of the hierarchical total; otherwise
/// the busiest model's mean entropy excess decides whether block
/// recruitment is screened.
pub fn hier_decide(window: &LabeledBatch, registry: &ModelRegistry, dial: &DialConfig, seed: u64) -> Result<HierDecision> {
    let posterior = registry.classifier.mean_posterior(window)?;
    let h_domain = domain_entropy(&posterior);
    let mut dominant = 0;
    for (d, &p) in posterior.as_slice().iter().enumerate() {
        if p > posterior[dominant] {
            dominant = d;
        }
    }
    let j = busiest_model(registry, window)?;
    let slices = registry.slices(window)?;
    let perplexity = registry.models[j].perplexity(&slices[j])?;
    let mut decision = HierDecision {
        kind: DecisionKind::None,
        delta_l: 0.0,
        h_domain,
        dominant_domain: dominant,
        model: j,
        perplexity,
        specialist: None,
        block: None,
    };
    if h_domain > dial.tau_domain {
        if !registry.serves(dominant) {
            if let Some(spec) = candidate_specialist(registry, window, dominant, dial, seed)? {
                let before = hier_total(registry, window, dial)?;
                let mut after_reg = registry.clone();
                after_reg.add_model(spec.clone())?;
                let after = hier_total(&after_reg, window, dial)?;
                decision.delta_l = after.total - before.total;
                if decision.delta_l < -dial.theta_llm {
                    decision.kind = DecisionKind::Llm;
                    decision.specialist = Some(spec);
                }
            }
        }
        return Ok(decision);
    }
    let m = &registry.models[j];
    let slice = &slices[j];
    if slice.is_empty() {
        return Ok(decision);
    }
    let attn = m.attention(slice)?;
    let mut excess = 0.0;
    for seq in &attn.entropy {
        for (t, &h) in seq.iter().enumerate() {
            excess += h - (m.partition.anchors(m.partition.block_of(t)).len() as f64).ln();
        }
    }
    excess /= attn.num_tokens() as f64;
    if excess > m.dial.epsilon {
        let r = recruit_block(&attn, &m.partition, &m.dial)?;
        decision.delta_l = r.delta_l;
        if r.recruit {
            decision.kind = DecisionKind::Block;
            decision.block = r.candidate_block.zip(r.candidate_anchors);
        }
    }
    Ok(decision)
}

/// Installs what a decision carries and logs it. `window` is the batch the
/// decision was taken on.
pub fn apply_decision(registry: &mut ModelRegistry, decision: HierDecision, window: &LabeledBatch) -> Result<()> {
    let step = registry.events.len();
    let mut model = decision.model;
    let mut warmup = 0;
    match decision.kind {
        DecisionKind::Llm => {
            let spec = decision
                .specialist
                .ok_or_else(|| Error::Contract("LLM decision without a specialist".into()))?;
            model = registry.models.len();
            warmup = spec.dial.warmup_steps;
            registry.add_model(spec)?;
        }
        DecisionKind::Block => {
            let (block, anchors) = decision
                .block
                .ok_or_else(|| Error::Contract("BLOCK decision without a block".into()))?;
            let slice = registry.slices(window)?.swap_remove(model);
            let m = &mut registry.models[model];
            let penalty = m.dial.group_penalty_base;
            m.install_block(&block, &anchors, penalty, &slice)?;
        }
        DecisionKind::None => {}
    }
    registry.events.push(HierEvent {
        step,
        kind: decision.kind,
        delta_l: decision.delta_l,
        h_domain: decision.h_domain,
        dominant_domain: decision.dominant_domain,
        model,
        perplexity: decision.perplexity,
        warmup_steps: warmup,
    });
    Ok(())
}

/// `k_max = ⌈(ln K_max − H_domain,min)/θ_LLM⌉`.
pub fn k_max_bound(dial: &DialConfig) -> usize {
    (((dial.k_max_domains as f64).ln() - dial.h_domain_min) / dial.theta_llm)
        .ceil()
        .max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    pub recruited_models: usize,
    pub k_max: usize,
    /// `(recruited blocks, bound)` per model.
    pub blocks: Vec<(usize, usize)>,
    pub total_blocks: usize,
    pub total_bound: usize,
    pub ok: bool,
}

/// Model count, per-model recruited blocks and total capacity against
/// their termination bounds.
pub fn theorem4_check(registry: &ModelRegistry, dial: &DialConfig) -> Theorem4Report {
    let k_max = k_max_bound(dial);
    let blocks: Vec<(usize, usize)> = registry
        .models
        .iter()
        .map(|m| (m.recruited_blocks, p_max_bound(m.partition.n(), m.dial.h_min, m.dial.theta_block)))
        .collect();
    let total_blocks = blocks.iter().map(|b| b.0).sum();
    let max_bound = blocks.iter().map(|b| b.1).max().unwrap_or(0);
    let total_bound = k_max * max_bound;
    let ok = registry.recruited_models() <= k_max && blocks.iter().all(|(b, bound)| b <= bound) && total_blocks <= total_bound;
    Theorem4Report {
        recruited_models: registry.recruited_models(),
        k_max,
        blocks,
        total_blocks,
        total_bound,
        ok,
    }
}

/// Per-model certificates on hard-routed slices, in model order.
pub fn routed_certificates(registry: &ModelRegistry, data: &LabeledBatch) -> Result<Vec<Option<KktCertificate>>> {
    let slices = registry.slices(data)?;
    registry.models.iter().zip(&slices).map(|(m, s)| m.certificate(s)).collect()
}

/// Localization preservation across a specialist recruitment: every model
/// present before keeps the zero/nonzero pattern and zero-group KKT status
/// of its groups on its routed slice, and every added model meets the KKT
/// bound on all of its zero groups.
pub fn theorem5_check(before: &ModelRegistry, after: &ModelRegistry, data: &LabeledBatch) -> Result<bool> {
    if before.mode() != RoutingMode::Hard || after.mode() != RoutingMode::Hard {
        return Err(Error::HardRoutingRequired);
    }
    if after.models.len() == before.models.len() {
        return Ok(true);
    }
    let old = routed_certificates(before, data)?;
    let new = routed_certificates(after, data)?;
    for (j, b) in old.iter().enumerate() {
        if let (Some(b), Some(a)) = (b, &new[j]) {
            if b.localization_statuses() != a.localization_statuses() {
                return Ok(false);
            }
        }
    }
    Ok(new[before.models.len()..]
        .iter()
        .all(|c| c.as_ref().is_none_or(KktCertificate::zero_groups_ok)))
}

/// Fresh penalty table for a model with `heads × blocks` groups at one value.
pub fn flat_penalties(model: &AttentionModel, value: f64, dial: &DialConfig) -> PenaltyConfig {
    PenaltyConfig::uniform(model.num_heads(), model.num_blocks(), value, dial.beta, model.tau())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GeneratorSpec};
    use proptest::prelude::*;

    fn scorer(w: Vec<f64>, b: f64) -> Scorer {
        Scorer { weights: w, bias: b }
    }

    #[test]
    fn route_prob_examples() {
        let r = Router::new(vec![scorer(vec![0.0], 0.0), scorer(vec![0.0], 0.0)], RoutingMode::Hard).unwrap();
        let p = route_probs(&[1.0], &r).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        assert!((domain_entropy(&p) - 2.0_f64.ln()).abs() < 1e-15);
        assert_eq!(hard_route(&[1.0], &r).unwrap(), 0);
        let one = Router::new(vec![scorer(vec![2.0], 1.0)], RoutingMode::Hard).unwrap();
        assert_eq!(route_probs(&[3.0], &one).unwrap().as_slice(), &[1.0]);
        let three = Router::new(
            vec![scorer(vec![0.0], 1.0), scorer(vec![0.0], 0.0), scorer(vec![0.0], -1.0)],
            RoutingMode::Soft,
        )
        .unwrap();
        let p = route_probs(&[0.0], &three).unwrap();
        let oracle = [0.66524095577482188953, 0.24472847105479765247, 0.09003057317038045800];
        for (a, b) in p.as_slice().iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(Router::new(vec![], RoutingMode::Hard).is_err());
    }

    #[test]
    fn k_max_example() {
        let dial = DialConfig {
            theta_llm: 1.0,
            theta_block: 0.01,
            k_max_domains: 8,
            ..DialConfig::default()
        };
        assert_eq!(k_max_bound(&dial), 3);
    }

    fn two_domain_setup() -> (LabeledBatch, ModelRegistry, DialConfig) {
        let spec = GeneratorSpec {
            n: 64,
            num_domains: 2,
            domain_mix: vec![0.2, 0.8],
            num_sequences: 20,
            ..Default::default()
        };
        let batch = generate(&spec).unwrap();
        let dial = DialConfig {
            warmup_steps: 10,
            ..crate::dial::preset("localist").unwrap()
        };
        let base_slice = batch.domain_slice(0);
        let base = ModelInstance::install(0, 0, &base_slice, batch.partitions[0].clone(), &dial, 2, 1).unwrap();
        let e: Vec<Vec<f64>> = batch.embeddings.iter().map(embed).collect();
        let clf = DomainClassifier::train(&e, &batch.domain_tags, 2, 300, 2.0).unwrap();
        (batch, ModelRegistry::new(base, clf, RoutingMode::Hard).unwrap(), dial)
    }

    #[test]
    fn soft_output_matches_weighted_sum() {
        let (batch, mut reg, dial) = two_domain_setup();
        let spec = candidate_specialist(&reg, &batch, 1, &dial, 3).unwrap().unwrap();
        reg.add_model(spec).unwrap();
        let x = &batch.embeddings[0];
        let out = soft_route_output(x, &reg.router, &reg.models).unwrap();
        let p = route_probs(&embed(x), &reg.router).unwrap();
        let z0 = reg.models[0].model.logits(x).unwrap();
        let z1 = reg.models[1].model.logits(x).unwrap();
        for t in 0..x.rows() {
            for c in 0..z0.cols() {
                let want = p[0] * z0.get(t, c) + p[1] * z1.get(t, c);
                assert!((out.get(t, c) - want).abs() < 1e-12);
            }
        }
        let same = Router::new(vec![reg.router.scorers[0].clone(); 2], RoutingMode::Soft).unwrap();
        let twins = vec![reg.models[0].clone(), reg.models[0].clone()];
        let o = soft_route_output(x, &same, &twins).unwrap();
        for (a, b) in o.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_model_perfect_router_has_no_routing_cost() {
        let (batch, reg, dial) = two_domain_setup();
        let acc = hier_total(&reg, &batch.domain_slice(0), &dial).unwrap();
        assert_eq!(acc.routing_cost, 0.0);
        let total = acc.model_costs.iter().sum::<f64>() + acc.data_costs.iter().sum::<f64>() + acc.routing_cost;
        assert!((acc.total - total).abs() < 1e-12);
    }

    #[test]
    fn uniform_router_costs_ln_two() {
        let (batch, mut reg, _) = two_domain_setup();
        let mut twin = reg.models[0].clone();
        twin.domain_tag = 1;
        reg.models.push(twin);
        reg.router = Router::new(vec![scorer(vec![0.0; 16], 0.0); 2], RoutingMode::Hard).unwrap();
        let acc = hier_total(&reg, &batch, &DialConfig::default()).unwrap();
        assert!((acc.routing_cost - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_mode_is_refused() {
        let (batch, reg, _) = two_domain_setup();
        let mut soft = reg.clone();
        soft.router.mode = RoutingMode::Soft;
        assert!(matches!(theorem5_check(&soft, &soft, &batch), Err(Error::HardRoutingRequired)));
        assert!(theorem5_check(&reg, &reg, &batch).unwrap());
    }

    #[test]
    fn unserved_domain_triggers_specialist() {
        let (batch, mut reg, dial) = two_domain_setup();
        let d = hier_decide(&batch, &reg, &dial, 5).unwrap();
        assert!(d.h_domain > dial.tau_domain);
        assert_eq!(d.dominant_domain, 1);
        assert_eq!(d.kind, DecisionKind::Llm, "ΔL = {}", d.delta_l);
        let before = reg.clone();
        apply_decision(&mut reg, d, &batch).unwrap();
        assert_eq!(reg.models.len(), 2);
        assert!(theorem5_check(&before, &reg, &batch).unwrap());
        let again = hier_decide(&batch, &reg, &dial, 5).unwrap();
        assert_ne!(again.kind, DecisionKind::Llm);
        assert!(theorem4_check(&reg, &dial).recruited_models == 1);
    }

    #[test]
    fn single_domain_localized_is_none() {
        let (batch, reg, dial) = two_domain_setup();
        let d = hier_decide(&batch.domain_slice(0), &reg, &dial, 5).unwrap();
        assert_eq!(d.kind, DecisionKind::None);
    }

    proptest! {
        #[test]
        fn hard_route_shift_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 1..6), shift in -100.0f64..100.0) {
            let r = Router::new(scores.iter().map(|&s| scorer(vec![0.0], s)).collect(), RoutingMode::Hard).unwrap();
            let shifted = Router::new(scores.iter().map(|&s| scorer(vec![0.0], s + shift)).collect(), RoutingMode::Hard).unwrap();
            let p = route_probs(&[0.0], &r).unwrap();
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut best = 0;
            for (j, &s) in scores.iter().enumerate() { if s > scores[best] { best = j; } }
            prop_assert_eq!(hard_route(&[0.0], &r).unwrap(), best);
            // Shifting can change which of near-equal sums rounds higher; only exact ties are excluded.
            let gap = scores.iter().enumerate().filter(|&(j, _)| j != best).map(|(_, &s)| scores[best] - s).fold(f64::INFINITY, f64::min);
            if gap > 1e-9 {
                prop_assert_eq!(hard_route(&[0.0], &shifted).unwrap(), best);
            }
        }
    }
}
