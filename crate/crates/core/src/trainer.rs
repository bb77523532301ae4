//! Multi-head attention classifier, its penalized objective, proximal
//! gradient training with group soft-thresholding, stationarity
//! certificates and rule penalties.
//!
//! Each head's `W_Q` and `W_K` are split into column groups, one per block.
//! The penalty on group `i` of head `h` is `λ_{h,i}(‖W_Q[:,G_i]‖_F + ‖W_K[:,G_i]‖_F)`.
//! The smooth part is the mean token cross-entropy of a linear readout of the
//! concatenated head outputs against label-smoothed targets, plus
//! `β (Σ_h ‖W_V‖_F² + ‖W_R‖_F²)` and any injected rule penalties.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::HeadParams;
use crate::dial::PenaltyConfig;
use crate::linalg::{softmax_unchecked, Matrix, ProbVector};
use crate::synth::LabeledBatch;
use crate::{Error, Result};

/// Shape and initialization of an [`AttentionModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Columns per block group in `W_Q` and `W_K`.
    pub group_width: usize,
    pub d_v: usize,
    pub num_classes: usize,
    pub tau: f64,
    pub init_std: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 16,
            num_heads: 2,
            num_blocks: 2,
            group_width: 4,
            d_v: 4,
            num_classes: 2,
            tau: 0.1,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModel {
    pub heads: Vec<HeadParams>,
    /// `(H·d_v) × C` readout.
    pub readout: Matrix,
    /// `column_groups[i]`: the columns of every head's `W_Q`/`W_K` owned by block `i`.
    pub column_groups: Vec<Vec<usize>>,
    /// Block each head is meant to attend within.
    pub focus: Vec<usize>,
}

impl AttentionModel {
    pub fn new(heads: Vec<HeadParams>, readout: Matrix, column_groups: Vec<Vec<usize>>, focus: Vec<usize>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::Contract("model needs at least one head".into()));
        };
        let (d_model, d_head, d_v) = (first.d_model(), first.d_head(), first.w_v.cols());
        for h in &heads {
            if h.d_model() != d_model || h.d_head() != d_head || h.w_v.cols() != d_v || h.tau != first.tau {
                return Err(Error::Contract("heads must share shapes and temperature".into()));
            }
        }
        if readout.rows() != heads.len() * d_v {
            return Err(Error::Contract("readout rows must equal H·d_v".into()));
        }
        let mut seen = vec![false; d_head];
        for g in &column_groups {
            for &c in g {
                if c >= d_head || seen[c] {
                    return Err(Error::Contract(format!("column {c} out of range or in two groups")));
                }
                seen[c] = true;
            }
        }
        if focus.len() != heads.len() || focus.iter().any(|&f| f >= column_groups.len()) {
            return Err(Error::Contract("one valid focus block per head".into()));
        }
        Ok(Self {
            heads,
            readout,
            column_groups,
            focus,
        })
    }

    /// Gaussian initialization; head `h` focuses on block `h mod p`.
    pub fn random(shape: &ModelShape, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, shape.init_std).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_head = shape.num_blocks * shape.group_width;
        let mut draw = |r, c| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let mut heads = Vec::with_capacity(shape.num_heads);
        for _ in 0..shape.num_heads {
            let w_q = draw(shape.d_model, d_head);
            let w_k = draw(shape.d_model, d_head);
            let w_v = draw(shape.d_model, shape.d_v);
            heads.push(HeadParams::new(w_q, w_k, w_v, shape.tau)?);
        }
        let readout = draw(shape.num_heads * shape.d_v, shape.num_classes);
        Self::new(heads, readout, Self::contiguous_groups(shape), Self::default_focus(shape))
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        let d_head = shape.num_blocks * shape.group_width;
        let heads = (0..shape.num_heads)
            .map(|_| {
                HeadParams::new(
                    Matrix::zeros(shape.d_model, d_head),
                    Matrix::zeros(shape.d_model, d_head),
                    Matrix::zeros(shape.d_model, shape.d_v),
                    shape.tau,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let readout = Matrix::zeros(shape.num_heads * shape.d_v, shape.num_classes);
        Self::new(heads, readout, Self::contiguous_groups(shape), Self::default_focus(shape))
    }

    fn contiguous_groups(shape: &ModelShape) -> Vec<Vec<usize>> {
        (0..shape.num_blocks)
            .map(|i| (i * shape.group_width..(i + 1) * shape.group_width).collect())
            .collect()
    }

    fn default_focus(shape: &ModelShape) -> Vec<usize> {
        (0..shape.num_heads).map(|h| h % shape.num_blocks.max(1)).collect()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.column_groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.readout.cols()
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].d_model()
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].w_v.cols()
    }

    pub fn tau(&self) -> f64 {
        self.heads[0].tau
    }

    /// Installs a new block: every head gains `width` zero columns in `W_Q`
    /// and `W_K`, owned by a new trailing group. Scores are unchanged.
    pub fn add_block(&self, width: usize) -> Self {
        let mut out = self.clone();
        let start = self.heads[0].d_head();
        for h in &mut out.heads {
            h.w_q = h.w_q.with_extra_columns(width);
            h.w_k = h.w_k.with_extra_columns(width);
        }
        out.column_groups.push((start..start + width).collect());
        out
    }

    /// Appends a head focused on `focus` with zero readout rows, so logits
    /// are unchanged.
    pub fn add_head(&self, head: HeadParams, focus: usize) -> Result<Self> {
        let mut heads = self.heads.clone();
        heads.push(head);
        let mut f = self.focus.clone();
        f.push(focus);
        Self::new(heads, self.readout.with_extra_rows(self.d_v()), self.column_groups.clone(), f)
    }

    /// `‖W_Q[:,G_i]‖_F + ‖W_K[:,G_i]‖_F` for every head and block.
    pub fn group_norms(&self) -> Vec<Vec<f64>> {
        self.heads
            .iter()
            .map(|h| {
                self.column_groups
                    .iter()
                    .map(|g| h.w_q.columns_norm(g) + h.w_k.columns_norm(g))
                    .collect()
            })
            .collect()
    }

    /// Largest group norm outside each head's focus block.
    pub fn max_off_focus_norm(&self) -> f64 {
        let norms = self.group_norms();
        let mut best = 0.0_f64;
        for (h, row) in norms.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if i != self.focus[h] {
                    best = best.max(v);
                }
            }
        }
        best
    }

    /// Smallest off-focus group norm, the quantity a penalty-free run keeps away from zero.
    pub fn min_off_focus_norm(&self) -> f64 {
        let norms = self.group_norms();
        let mut best = f64::INFINITY;
        for (h, row) in norms.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if i != self.focus[h] {
                    best = best.min(v);
                }
            }
        }
        best
    }

    pub fn param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.w_q.data().len() + h.w_k.data().len() + h.w_v.data().len())
            .sum::<usize>()
            + self.readout.data().len()
    }

    /// Parameters flattened head by head (`W_Q`, `W_K`, `W_V`), then the readout.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for h in &self.heads {
            v.extend_from_slice(h.w_q.data());
            v.extend_from_slice(h.w_k.data());
            v.extend_from_slice(h.w_v.data());
        }
        v.extend_from_slice(self.readout.data());
        v
    }

    pub fn from_flat(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.param_count() {
            return Err(Error::Contract("flat parameter length mismatch".into()));
        }
        let mut out = self.clone();
        let mut at = 0;
        let mut fill = |m: &mut Matrix| {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&v[at..at + n]);
            at += n;
        };
        for h in &mut out.heads {
            fill(&mut h.w_q);
            fill(&mut h.w_k);
            fill(&mut h.w_v);
        }
        fill(&mut out.readout);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training("non-finite parameter".into()));
        }
        Ok(out)
    }

    /// Flat indices of group `i` in head `h`, for `W_Q` and `W_K` separately.
    pub(crate) fn group_indices(&self, h: usize, i: usize) -> (Vec<usize>, Vec<usize>) {
        let per_head: usize = self.heads[0].w_q.data().len() * 2 + self.heads[0].w_v.data().len();
        let d_head = self.heads[0].d_head();
        let base_q = h * per_head;
        let base_k = base_q + self.heads[0].w_q.data().len();
        let mut q = Vec::new();
        let mut k = Vec::new();
        for r in 0..self.d_model() {
            for &c in &self.column_groups[i] {
                q.push(base_q + r * d_head + c);
                k.push(base_k + r * d_head + c);
            }
        }
        (q, k)
    }

    /// Attention rows of head `h` on one sequence.
    pub fn attention(&self, x: &Matrix, h: usize) -> Result<Vec<ProbVector>> {
        self.heads[h].weights(x)
    }

    /// Logits `Z = [O_1 … O_H] W_R` of one sequence.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.z)
    }

    fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.d_model() {
            return Err(Error::Contract(format!(
                "embedding width {} but model expects {}",
                x.cols(),
                self.d_model()
            )));
        }
        let n = x.rows();
        let dv = self.d_v();
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut f = Matrix::zeros(n, dv * self.heads.len());
        for (hi, h) in self.heads.iter().enumerate() {
            let q = x.matmul(&h.w_q)?;
            let k = x.matmul(&h.w_k)?;
            let v = x.matmul(&h.w_v)?;
            let s = q.matmul_t(&k)?;
            let mut a = Matrix::zeros(n, n);
            for t in 0..n {
                a.row_mut(t).copy_from_slice(&softmax_unchecked(s.row(t), h.tau));
            }
            let o = a.matmul(&v)?;
            for t in 0..n {
                f.row_mut(t)[hi * dv..(hi + 1) * dv].copy_from_slice(o.row(t));
            }
            heads.push(HeadCache { q, k, v, a });
        }
        let z = f.matmul(&self.readout)?;
        Ok(Forward { heads, f, z })
    }
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
}

struct Forward {
    heads: Vec<HeadCache>,
    f: Matrix,
    z: Matrix,
}

/// A differentiable or counting constraint on model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RuleSpec {
    /// Mean softmax mass on `allowed` classes over `positions`.
    ClassMass { positions: Vec<usize>, allowed: Vec<usize> },
    /// 1 when every listed position's argmax class is allowed, else 0.
    ArgmaxIn { positions: Vec<usize>, allowed: Vec<usize> },
}

impl RuleSpec {
    fn parts(&self) -> (&[usize], &[usize]) {
        match self {
            RuleSpec::ClassMass { positions, allowed } | RuleSpec::ArgmaxIn { positions, allowed } => (positions, allowed),
        }
    }

    fn validate(&self, n: usize, classes: usize) -> Result<()> {
        let (positions, allowed) = self.parts();
        if positions.is_empty() || allowed.is_empty() {
            return Err(Error::Parameter("rule needs positions and allowed classes".into()));
        }
        if positions.iter().any(|&t| t >= n) || allowed.iter().any(|&c| c >= classes) {
            return Err(Error::Contract("rule refers to a missing position or class".into()));
        }
        Ok(())
    }

    /// Satisfaction in `[0, 1]` for one sequence's logits.
    pub fn satisfaction(&self, z: &Matrix) -> f64 {
        let (positions, allowed) = self.parts();
        match self {
            RuleSpec::ClassMass { .. } => {
                let total: f64 = positions
                    .iter()
                    .map(|&t| {
                        let p = softmax_unchecked(z.row(t), 1.0);
                        allowed.iter().map(|&c| p[c]).sum::<f64>()
                    })
                    .sum();
                (total / positions.len() as f64).clamp(0.0, 1.0)
            }
            RuleSpec::ArgmaxIn { .. } => {
                let ok = positions.iter().all(|&t| allowed.contains(&argmax(z.row(t))));
                f64::from(u8::from(ok))
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedRule {
    pub rule: RuleSpec,
    pub gamma: f64,
}

/// Everything that defines the training objective besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub penalties: PenaltyConfig,
    pub label_smoothing: f64,
    pub rules: Vec<InjectedRule>,
}

impl Objective {
    pub fn new(penalties: PenaltyConfig) -> Self {
        Self {
            penalties,
            label_smoothing: 0.1,
            rules: Vec::new(),
        }
    }

    fn validate(&self, model: &AttentionModel) -> Result<()> {
        self.penalties.validate()?;
        if self.penalties.num_heads() != model.num_heads() || self.penalties.num_blocks() != model.num_blocks() {
            return Err(Error::Contract(format!(
                "penalty table is {}x{} but model has {} heads and {} blocks",
                self.penalties.num_heads(),
                self.penalties.num_blocks(),
                model.num_heads(),
                model.num_blocks()
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adds `γ·E_x[1 − satisfaction]` to the objective. `γ = 0` returns the
/// objective unchanged; negative or non-finite `γ` is rejected.
pub fn inject_rule(objective: &Objective, rule: RuleSpec, gamma: f64) -> Result<Objective> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("rule weight must be >= 0, got {gamma}")));
    }
    let mut out = objective.clone();
    if gamma > 0.0 {
        out.rules.push(InjectedRule { rule, gamma });
    }
    Ok(out)
}

/// Fraction of (sequence, listed position) pairs whose argmax class is not allowed.
pub fn violation_rate(model: &AttentionModel, batch: &LabeledBatch, rule: &RuleSpec) -> Result<f64> {
    let (positions, allowed) = rule.parts();
    let mut bad = 0usize;
    for x in &batch.embeddings {
        let z = model.logits(x)?;
        bad += positions.iter().filter(|&&t| !allowed.contains(&argmax(z.row(t)))).count();
    }
    Ok(bad as f64 / (batch.len() * positions.len()).max(1) as f64)
}

/// Rule penalty `Σ_R γ_R · mean_x(1 − sat_R(x))`.
pub fn rule_penalty(model: &AttentionModel, batch: &LabeledBatch, objective: &Objective) -> Result<f64> {
    if objective.rules.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in &batch.embeddings {
        let z = model.logits(x)?;
        for r in &objective.rules {
            total += r.gamma * (1.0 - r.rule.satisfaction(&z));
        }
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the smooth part with the model's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub readout: Matrix,
}

impl Gradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for h in 0..self.w_q.len() {
            v.extend_from_slice(self.w_q[h].data());
            v.extend_from_slice(self.w_k[h].data());
            v.extend_from_slice(self.w_v[h].data());
        }
        v.extend_from_slice(self.readout.data());
        v
    }
}

fn check_batch(model: &AttentionModel, batch: &LabeledBatch, objective: &Objective) -> Result<()> {
    objective.validate(model)?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for (x, y) in batch.embeddings.iter().zip(&batch.task_labels) {
        if y.len() != x.rows() {
            return Err(Error::Contract("one label per position".into()));
        }
        if y.iter().any(|&c| c >= model.num_classes()) {
            return Err(Error::Contract("label outside readout classes".into()));
        }
        for r in &objective.rules {
            r.rule.validate(x.rows(), model.num_classes())?;
        }
    }
    Ok(())
}

/// Smoothed target distribution for label `y`.
fn target(y: usize, classes: usize, smoothing: f64) -> impl Fn(usize) -> f64 {
    let base = smoothing / classes as f64;
    move |c| if c == y { 1.0 - smoothing + base } else { base }
}

/// Smooth part of the objective and, when requested, its gradient.
fn smooth_eval(model: &AttentionModel, batch: &LabeledBatch, objective: &Objective, want_grad: bool) -> Result<(f64, Option<Gradient>)> {
    check_batch(model, batch, objective)?;
    let c = model.num_classes();
    let dv = model.d_v();
    let tokens: usize = batch.embeddings.iter().map(Matrix::rows).sum();
    let scale = 1.0 / tokens as f64;
    let b = batch.len() as f64;
    let mut grad = want_grad.then(|| Gradient {
        w_q: model.heads.iter().map(|h| Matrix::zeros(h.w_q.rows(), h.w_q.cols())).collect(),
        w_k: model.heads.iter().map(|h| Matrix::zeros(h.w_k.rows(), h.w_k.cols())).collect(),
        w_v: model.heads.iter().map(|h| Matrix::zeros(h.w_v.rows(), h.w_v.cols())).collect(),
        readout: Matrix::zeros(model.readout.rows(), c),
    });
    let mut loss = 0.0;
    for (x, y) in batch.embeddings.iter().zip(&batch.task_labels) {
        let fw = model.forward(x)?;
        let n = x.rows();
        let mut dz = Matrix::zeros(n, c);
        for t in 0..n {
            let zt = fw.z.row(t);
            let max = zt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zt.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let tgt = target(y[t], c, objective.label_smoothing);
            for k in 0..c {
                let logp = zt[k] - lse;
                loss -= scale * tgt(k) * logp;
                dz.set(t, k, scale * (logp.exp() - tgt(k)));
            }
        }
        for r in &objective.rules {
            loss += r.gamma / b * (1.0 - r.rule.satisfaction(&fw.z));
            if let RuleSpec::ClassMass { positions, allowed } = &r.rule {
                let w = r.gamma / (b * positions.len() as f64);
                for &t in positions {
                    let p = softmax_unchecked(fw.z.row(t), 1.0);
                    let mass: f64 = allowed.iter().map(|&k| p[k]).sum();
                    for k in 0..c {
                        let inside = f64::from(u8::from(allowed.contains(&k)));
                        let v = dz.get(t, k) - w * p[k] * (inside - mass);
                        dz.set(t, k, v);
                    }
                }
            }
        }
        let Some(g) = grad.as_mut() else { continue };
        g.readout.add_scaled(&fw.f.t_matmul(&dz)?, 1.0)?;
        let df = dz.matmul_t(&model.readout)?;
        for (hi, (h, cache)) in model.heads.iter().zip(&fw.heads).enumerate() {
            let d_o = Matrix::from_fn(n, dv, |t, j| df.get(t, hi * dv + j));
            let da = d_o.matmul_t(&cache.v)?;
            let d_v = cache.a.t_matmul(&d_o)?;
            let mut ds = Matrix::zeros(n, n);
            for t in 0..n {
                let a = cache.a.row(t);
                let dat = da.row(t);
                let inner: f64 = a.iter().zip(dat).map(|(p, q)| p * q).sum();
                for (j, out) in ds.row_mut(t).iter_mut().enumerate() {
                    *out = a[j] * (dat[j] - inner) / h.tau;
                }
            }
            let dq = ds.matmul(&cache.k)?;
            let dk = ds.t_matmul(&cache.q)?;
            g.w_q[hi].add_scaled(&x.t_matmul(&dq)?, 1.0)?;
            g.w_k[hi].add_scaled(&x.t_matmul(&dk)?, 1.0)?;
            g.w_v[hi].add_scaled(&x.t_matmul(&d_v)?, 1.0)?;
        }
    }
    let beta = objective.penalties.beta;
    for (hi, h) in model.heads.iter().enumerate() {
        let sq: f64 = h.w_v.data().iter().map(|v| v * v).sum();
        loss += beta * sq;
        if let Some(g) = grad.as_mut() {
            g.w_v[hi].add_scaled(&h.w_v, 2.0 * beta)?;
        }
    }
    let sq: f64 = model.readout.data().iter().map(|v| v * v).sum();
    loss += beta * sq;
    if let Some(g) = grad.as_mut() {
        g.readout.add_scaled(&model.readout, 2.0 * beta)?;
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite loss".into()));
    }
    Ok((loss, grad))
}

/// Mean smoothed cross-entropy of the readout, in nats.
pub fn task_loss(model: &AttentionModel, batch: &LabeledBatch, label_smoothing: f64) -> Result<f64> {
    let mut objective = Objective::new(PenaltyConfig::uniform(model.num_heads(), model.num_blocks(), 0.0, 1.0, model.tau()));
    objective.label_smoothing = label_smoothing;
    let (v, _) = smooth_eval(model, batch, &objective, false)?;
    let wv: f64 = model.heads.iter().map(|h| h.w_v.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let wr: f64 = model.readout.data().iter().map(|v| v * v).sum();
    Ok(v - wv - wr)
}

/// Analytic gradient of the smooth part (task loss, value ridge, rules).
pub fn task_gradient(model: &AttentionModel, batch: &LabeledBatch, objective: &Objective) -> Result<(f64, Gradient)> {
    let (v, g) = smooth_eval(model, batch, objective, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Largest gap between the analytic smooth gradient and central
/// differences with step `h`, relative to the largest analytic entry.
pub fn finite_difference_error(model: &AttentionModel, batch: &LabeledBatch, obj: &Objective, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Parameter("difference step must be > 0".into()));
    }
    let (_, g) = task_gradient(model, batch, obj)?;
    let g = g.to_flat();
    let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let theta = model.to_flat();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let mut up = theta.clone();
        up[i] += h;
        let mut dn = theta.clone();
        dn[i] -= h;
        let fu = smooth_eval(&model.from_flat(&up)?, batch, obj, false)?.0;
        let fd = smooth_eval(&model.from_flat(&dn)?, batch, obj, false)?.0;
        worst = worst.max(((fu - fd) / (2.0 * h) - g[i]).abs() / scale);
    }
    Ok(worst)
}

/// Sum of group penalties `Σ_h Σ_i λ_{h,i}(‖W_Q[:,G_i]‖ + ‖W_K[:,G_i]‖)`.
pub fn group_penalty(model: &AttentionModel, penalties: &PenaltyConfig) -> f64 {
    let norms = model.group_norms();
    norms
        .iter()
        .zip(&penalties.group_penalties)
        .map(|(n, p)| n.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Full composite objective.
pub fn objective(model: &AttentionModel, batch: &LabeledBatch, objective: &Objective) -> Result<f64> {
    let (smooth, _) = smooth_eval(model, batch, objective, false)?;
    Ok(smooth + group_penalty(model, &objective.penalties))
}

/// Shrinks `v[idx]` by `threshold` in norm, zeroing it when the norm does not exceed the threshold.
fn group_soft_threshold(v: &mut [f64], idx: &[usize], threshold: f64) {
    let norm = idx.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
    let factor = if norm <= threshold { 0.0 } else { 1.0 - threshold / norm };
    for &i in idx {
        v[i] *= factor;
    }
}

fn prox_flat(model: &AttentionModel, v: &mut [f64], penalties: &PenaltyConfig, step: f64) {
    for h in 0..model.num_heads() {
        for i in 0..model.num_blocks() {
            let lambda = penalties.group_penalties[h][i];
            if lambda == 0.0 {
                continue;
            }
            let (q, k) = model.group_indices(h, i);
            group_soft_threshold(v, &q, step * lambda);
            group_soft_threshold(v, &k, step * lambda);
        }
    }
}

/// One proximal gradient step: `prox_{s·g}(θ − s∇f)` with block-wise group
/// soft-thresholding of every (head, block) group of `W_Q` and `W_K`.
pub fn prox_group_step(model: &AttentionModel, gradient: &Gradient, penalties: &PenaltyConfig, step: f64) -> Result<AttentionModel> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("step size must be > 0, got {step}")));
    }
    let g = gradient.to_flat();
    let mut v = model.to_flat();
    if g.len() != v.len() {
        return Err(Error::Contract("gradient shape does not match model".into()));
    }
    v.iter_mut().zip(&g).for_each(|(p, d)| *p -= step * d);
    prox_flat(model, &mut v, penalties, step);
    model.from_flat(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub max_iters: usize,
    /// Stop once `‖θ_{k+1} − θ_k‖ / s ≤ tol`.
    pub tol: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-8,
            initial_step: 0.1,
            min_step: 1e-18,
            max_step: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: AttentionModel,
    pub step: usize,
    pub objective_history: Vec<f64>,
    pub stationarity_residual: f64,
    pub step_size: f64,
}

impl TrainState {
    pub fn new(model: AttentionModel) -> Self {
        Self {
            model,
            step: 0,
            objective_history: Vec::new(),
            stationarity_residual: f64::INFINITY,
            step_size: 0.1,
        }
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.model.heads
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Continues proximal gradient descent from `state` until the residual
/// drops to `opts.tol` or `opts.max_iters` further iterations have run.
/// The trial step is a Barzilai–Borwein estimate, halved until the
/// sufficient-decrease test holds.
pub fn resume(mut state: TrainState, batch: &LabeledBatch, obj: &Objective, opts: &TrainOptions) -> Result<(TrainState, bool)> {
    if !(opts.tol > 0.0) {
        return Err(Error::Parameter("tolerance must be > 0".into()));
    }
    if opts.max_iters == 0 {
        return Ok((state, false));
    }
    let mut theta = state.model.to_flat();
    let (mut f, g) = task_gradient(&state.model, batch, obj)?;
    let mut grad = g.to_flat();
    if state.objective_history.is_empty() {
        state.objective_history.push(f + group_penalty(&state.model, &obj.penalties));
    }
    let mut trial = if state.step == 0 { opts.initial_step } else { state.step_size };
    for _ in 0..opts.max_iters {
        let mut s = trial;
        let (cand_model, cand, f_new, d) = loop {
            let mut v: Vec<f64> = theta.iter().zip(&grad).map(|(p, g)| p - s * g).collect();
            prox_flat(&state.model, &mut v, &obj.penalties, s);
            let d: Vec<f64> = v.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let cand_model = state.model.from_flat(&v)?;
            let f_new = match smooth_eval(&cand_model, batch, obj, false) {
                Ok((val, _)) => val,
                Err(Error::Training(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let bound = f + dot(&grad, &d) + dot(&d, &d) / (2.0 * s);
            if f_new <= bound + 4.0 * f64::EPSILON * f.abs() {
                break (cand_model, v, f_new, d);
            }
            s *= 0.5;
            if s < opts.min_step {
                return Err(Error::Training(format!(
                    "line search failed at iteration {} (objective {f}, residual {})",
                    state.step, state.stationarity_residual
                )));
            }
        };
        let residual = dot(&d, &d).sqrt() / s;
        let (_, g_new) = task_gradient(&cand_model, batch, obj)?;
        let g_new = g_new.to_flat();
        let dg: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let curvature = dot(&d, &dg);
        trial = if curvature > 0.0 {
            (dot(&d, &d) / curvature).clamp(opts.min_step * 1e3, opts.max_step)
        } else {
            (2.0 * s).min(opts.max_step)
        };
        theta = cand;
        grad = g_new;
        f = f_new;
        state.model = cand_model;
        state.step += 1;
        state.step_size = s;
        state.stationarity_residual = residual;
        state.objective_history.push(f + group_penalty(&state.model, &obj.penalties));
        if residual <= opts.tol {
            state.step_size = trial;
            return Ok((state, true));
        }
    }
    state.step_size = trial;
    Ok((state, false))
}

/// Trains from `init` until stationary or out of iterations.
pub fn train_to_stationarity(
    init: &AttentionModel,
    batch: &LabeledBatch,
    obj: &Objective,
    opts: &TrainOptions,
) -> Result<(TrainState, bool)> {
    let mut state = TrainState::new(init.clone());
    state.step_size = opts.initial_step;
    resume(state, batch, obj, opts)
}

/// Proximal-gradient residual `‖prox_{s g}(θ − s∇f) − θ‖ / s` at a fixed step.
pub fn stationarity_residual(model: &AttentionModel, batch: &LabeledBatch, obj: &Objective, step: f64) -> Result<f64> {
    let (_, g) = task_gradient(model, batch, obj)?;
    let next = prox_group_step(model, &g, &obj.penalties, step)?;
    let d: Vec<f64> = next.to_flat().iter().zip(model.to_flat()).map(|(a, b)| a - b).collect();
    Ok(dot(&d, &d).sqrt() / step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktEntry {
    pub head: usize,
    pub block: usize,
    pub is_zero_block: bool,
    /// Larger of the smooth-gradient norms over the group's `W_Q` and `W_K` columns.
    pub grad_norm: f64,
    pub penalty: f64,
    /// Zero part: `max(0, ‖∇‖ − λ)`; nonzero part: `‖∇ + λ G/‖G‖‖`. Largest of the two parts.
    pub residual: f64,
    pub kkt_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktCertificate {
    pub entries: Vec<KktEntry>,
    /// Gradient norm over unpenalized parameters (`W_V`, readout).
    pub free_residual: f64,
    pub tol: f64,
}

impl KktCertificate {
    pub fn entry(&self, head: usize, block: usize) -> Option<&KktEntry> {
        self.entries.iter().find(|e| e.head == head && e.block == block)
    }

    pub fn groups_ok(&self) -> bool {
        self.entries.iter().all(|e| e.kkt_ok)
    }

    pub fn all_ok(&self) -> bool {
        self.groups_ok() && self.free_residual <= self.tol
    }

    /// Whether every zero group meets its KKT bound.
    pub fn zero_groups_ok(&self) -> bool {
        self.entries.iter().filter(|e| e.is_zero_block).all(|e| e.kkt_ok)
    }

    /// Per (head, block): `Some(kkt_ok)` for zero groups, `None` otherwise.
    pub fn localization_statuses(&self) -> Vec<((usize, usize), Option<bool>)> {
        self.entries
            .iter()
            .map(|e| ((e.head, e.block), e.is_zero_block.then_some(e.kkt_ok)))
            .collect()
    }

    /// Pass status per (head, block).
    pub fn statuses(&self) -> Vec<((usize, usize), bool)> {
        self.entries.iter().map(|e| ((e.head, e.block), e.kkt_ok)).collect()
    }
}

fn part_check(theta: &[f64], grad: &[f64], idx: &[usize], lambda: f64, tol: f64) -> (bool, f64, f64, bool) {
    let gnorm = idx.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
    let wnorm = idx.iter().map(|&i| theta[i] * theta[i]).sum::<f64>().sqrt();
    if wnorm == 0.0 {
        let excess = (gnorm - lambda).max(0.0);
        (true, gnorm, excess, gnorm <= lambda + tol)
    } else {
        let r = idx
            .iter()
            .map(|&i| {
                let v = grad[i] + lambda * theta[i] / wnorm;
                v * v
            })
            .sum::<f64>()
            .sqrt();
        (false, gnorm, r, r <= tol)
    }
}

/// Checks first-order optimality group by group. Zero groups need
/// `‖∇_G f‖ ≤ λ + tol` for both `W_Q` and `W_K`; nonzero groups need the
/// subgradient equation `∇_G f + λ G/‖G‖ = 0` to within `tol`.
pub fn certify_kkt(model: &AttentionModel, batch: &LabeledBatch, obj: &Objective, tol: f64) -> Result<KktCertificate> {
    let (_, g) = task_gradient(model, batch, obj)?;
    let grad = g.to_flat();
    let theta = model.to_flat();
    let mut entries = Vec::new();
    let mut penalized = vec![false; theta.len()];
    for h in 0..model.num_heads() {
        for i in 0..model.num_blocks() {
            let lambda = obj.penalties.group_penalties[h][i];
            let (q, k) = model.group_indices(h, i);
            q.iter().chain(&k).for_each(|&j| penalized[j] = true);
            let (zq, gq, rq, okq) = part_check(&theta, &grad, &q, lambda, tol);
            let (zk, gk, rk, okk) = part_check(&theta, &grad, &k, lambda, tol);
            entries.push(KktEntry {
                head: h,
                block: i,
                is_zero_block: zq && zk,
                grad_norm: gq.max(gk),
                penalty: lambda,
                residual: rq.max(rk),
                kkt_ok: okq && okk,
            });
        }
    }
    let free_residual = grad
        .iter()
        .zip(&penalized)
        .filter(|(_, &p)| !p)
        .map(|(g, _)| g * g)
        .sum::<f64>()
        .sqrt();
    Ok(KktCertificate {
        entries,
        free_residual,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RuleTargets;
    use crate::BlockPartition;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_batch(seed: u64, n: usize, d: usize, seqs: usize, classes: usize) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = BlockPartition::single(n, vec![0]).unwrap();
        LabeledBatch {
            embeddings: (0..seqs)
                .map(|_| Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            governing_block: vec![vec![0; n]; seqs],
            targets: vec![RuleTargets::anchors_of(&p)],
            partitions: vec![p],
            task_labels: (0..seqs).map(|_| (0..n).map(|_| rng.random_range(0..classes)).collect()).collect(),
            domain_tags: vec![0; seqs],
            num_classes: classes,
        }
    }

    fn tiny_shape(d: usize, classes: usize) -> ModelShape {
        ModelShape {
            d_model: d,
            num_heads: 2,
            num_blocks: 2,
            group_width: 2,
            d_v: 2,
            num_classes: classes,
            tau: 0.7,
            init_std: 0.5,
        }
    }

    fn plain(model: &AttentionModel, penalty: f64, beta: f64) -> Objective {
        Objective::new(PenaltyConfig::uniform(
            model.num_heads(),
            model.num_blocks(),
            penalty,
            beta,
            model.tau(),
        ))
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let batch = tiny_batch(1, 4, 3, 3, 5);
        let model = AttentionModel::zeros(&tiny_shape(3, 5)).unwrap();
        let obj = plain(&model, 3.0, 0.2);
        let v = objective(&model, &batch, &obj).unwrap();
        assert!((v - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn task_loss_excludes_ridges() {
        let batch = tiny_batch(1, 4, 3, 3, 5);
        let mut model = AttentionModel::random(&tiny_shape(3, 5), 2).unwrap();
        model.readout = Matrix::zeros(model.readout.rows(), model.readout.cols());
        assert!((task_loss(&model, &batch, 0.0).unwrap() - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_recomputation() {
        let batch = tiny_batch(2, 4, 3, 3, 3);
        let model = AttentionModel::random(&tiny_shape(3, 3), 9).unwrap();
        let mut obj = plain(&model, 0.0, 0.05);
        obj.penalties.group_penalties = vec![vec![0.3, 1.1], vec![0.0, 2.0]];
        let got = objective(&model, &batch, &obj).unwrap();
        // Independent recomputation through the public building blocks.
        let mut ce = 0.0;
        for (x, y) in batch.embeddings.iter().zip(&batch.task_labels) {
            let mut f = Matrix::zeros(4, 4);
            for (hi, h) in model.heads.iter().enumerate() {
                let (o, _) = crate::attention::attend(x, h).unwrap();
                for t in 0..4 {
                    for j in 0..2 {
                        f.set(t, hi * 2 + j, o.get(t, j));
                    }
                }
            }
            let z = f.matmul(&model.readout).unwrap();
            for t in 0..4 {
                let p = crate::linalg::softmax_temp(z.row(t), 1.0).unwrap();
                for c in 0..3 {
                    let tgt = if c == y[t] { 0.9 + 0.1 / 3.0 } else { 0.1 / 3.0 };
                    ce -= tgt * p[c].ln() / 12.0;
                }
            }
        }
        let ridge: f64 = model
            .heads
            .iter()
            .map(|h| 0.05 * crate::linalg::frobenius_norm(&h.w_v).powi(2))
            .sum::<f64>()
            + 0.05 * crate::linalg::frobenius_norm(&model.readout).powi(2);
        let mut pen = 0.0;
        for (h, head) in model.heads.iter().enumerate() {
            for (i, g) in model.column_groups.iter().enumerate() {
                pen += obj.penalties.group_penalties[h][i] * (head.w_q.columns_norm(g) + head.w_k.columns_norm(g));
            }
        }
        assert!((got - (ce + ridge + pen)).abs() < 1e-12, "{got} vs {}", ce + ridge + pen);
        let no_pen = plain(&model, 0.0, 0.05);
        assert!((objective(&model, &batch, &no_pen).unwrap() - (ce + ridge)).abs() < 1e-12);
    }

    fn finite_difference_check(seed: u64, obj_rules: &[InjectedRule]) -> f64 {
        let batch = tiny_batch(seed, 4, 3, 2, 3);
        let model = AttentionModel::random(&tiny_shape(3, 3), seed + 100).unwrap();
        let mut obj = plain(&model, 0.0, 0.03);
        obj.rules = obj_rules.to_vec();
        finite_difference_error(&model, &batch, &obj, 1e-5).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            assert!(finite_difference_check(seed, &[]) < 1e-5);
        }
        let rule = InjectedRule {
            rule: RuleSpec::ClassMass {
                positions: vec![0, 2],
                allowed: vec![1],
            },
            gamma: 0.7,
        };
        assert!(finite_difference_check(7, &[rule]) < 1e-5);
    }

    #[test]
    fn zero_weights_have_zero_projection_gradient() {
        let batch = tiny_batch(3, 4, 3, 3, 2);
        let mut model = AttentionModel::random(&tiny_shape(3, 2), 4).unwrap();
        for h in &mut model.heads {
            h.w_q = Matrix::zeros(3, 4);
            h.w_k = Matrix::zeros(3, 4);
        }
        let (_, g) = task_gradient(&model, &batch, &plain(&model, 0.0, 0.1)).unwrap();
        assert!(g.w_q.iter().chain(&g.w_k).all(Matrix::is_zero));
    }

    #[test]
    fn ridge_gradient_is_two_beta_w() {
        let batch = tiny_batch(4, 4, 3, 2, 2);
        let model = AttentionModel::random(&tiny_shape(3, 2), 5).unwrap();
        let (_, a) = task_gradient(&model, &batch, &plain(&model, 0.0, 0.0 + 1e-300)).unwrap();
        let (_, b) = task_gradient(&model, &batch, &plain(&model, 0.0, 0.25)).unwrap();
        for h in 0..2 {
            for (j, (x, y)) in a.w_v[h].data().iter().zip(b.w_v[h].data()).enumerate() {
                assert!((y - x - 0.5 * model.heads[h].w_v.data()[j]).abs() < 1e-15);
            }
        }
        for (j, (x, y)) in a.readout.data().iter().zip(b.readout.data()).enumerate() {
            assert!((y - x - 0.5 * model.readout.data()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn prox_examples() {
        let model = AttentionModel::random(&tiny_shape(3, 2), 6).unwrap();
        let zero_grad = Gradient {
            w_q: model.heads.iter().map(|h| Matrix::zeros(3, h.d_head())).collect(),
            w_k: model.heads.iter().map(|h| Matrix::zeros(3, h.d_head())).collect(),
            w_v: model.heads.iter().map(|_| Matrix::zeros(3, 2)).collect(),
            readout: Matrix::zeros(4, 2),
        };
        let big = PenaltyConfig::uniform(2, 2, 1e6, 0.1, 0.7);
        let out = prox_group_step(&model, &zero_grad, &big, 1.0).unwrap();
        assert!(out.group_norms().iter().flatten().all(|&v| v == 0.0));
        let none = PenaltyConfig::uniform(2, 2, 0.0, 0.1, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut grad = zero_grad.clone();
        grad.w_q[1] = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let out = prox_group_step(&model, &grad, &none, 0.3).unwrap();
        for (a, (b, g)) in out.heads[1]
            .w_q
            .data()
            .iter()
            .zip(model.heads[1].w_q.data().iter().zip(grad.w_q[1].data()))
        {
            assert!((a - (b - 0.3 * g)).abs() < 1e-15);
        }
        // Closed form on one group: max(0, 1 − sλ/‖v‖)·v.
        let lam = PenaltyConfig {
            group_penalties: vec![vec![0.0, 0.2], vec![0.0, 0.0]],
            ..none.clone()
        };
        let out = prox_group_step(&model, &zero_grad, &lam, 0.5).unwrap();
        let g = &model.column_groups[1];
        let v = model.heads[0].w_q.columns_norm(g);
        let factor = (1.0 - 0.5 * 0.2 / v).max(0.0);
        for r in 0..3 {
            for &c in g {
                assert!((out.heads[0].w_q.get(r, c) - factor * model.heads[0].w_q.get(r, c)).abs() < 1e-15);
            }
        }
        assert!(prox_group_step(&model, &zero_grad, &none, 0.0).is_err());
    }

    #[test]
    fn zero_init_is_already_stationary() {
        let batch = tiny_batch(5, 4, 3, 3, 2);
        let model = AttentionModel::zeros(&tiny_shape(3, 2)).unwrap();
        let obj = plain(&model, 1.0, 0.1);
        let (state, ok) = train_to_stationarity(&model, &batch, &obj, &TrainOptions::default()).unwrap();
        assert!(ok);
        assert!(state.step <= 1);
        let (state, ok) = train_to_stationarity(
            &model,
            &batch,
            &obj,
            &TrainOptions {
                max_iters: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!ok);
        assert_eq!(state.model, model);
    }

    #[test]
    fn kkt_examples() {
        let batch = tiny_batch(6, 4, 3, 3, 2);
        let mut model = AttentionModel::random(&tiny_shape(3, 2), 7).unwrap();
        for h in &mut model.heads {
            h.w_q.scale_columns(&[2, 3], 0.0);
            h.w_k.scale_columns(&[2, 3], 0.0);
        }
        let high = plain(&model, 1e3, 0.1);
        let cert = certify_kkt(&model, &batch, &high, 1e-6).unwrap();
        let e = cert.entry(0, 1).unwrap();
        assert!(e.is_zero_block && e.kkt_ok);
        let zero = plain(&model, 0.0, 0.1);
        let cert = certify_kkt(&model, &batch, &zero, 1e-6).unwrap();
        let e = cert.entry(0, 1).unwrap();
        assert!(e.is_zero_block && e.grad_norm == 0.0 && e.kkt_ok);
        // A zero query part facing a live key part has a nonzero gradient.
        let mut half = AttentionModel::random(&tiny_shape(3, 2), 7).unwrap();
        half.heads[0].w_q.scale_columns(&[2, 3], 0.0);
        let cert = certify_kkt(&half, &batch, &plain(&half, 0.0, 0.1), 1e-6).unwrap();
        let e = cert.entry(0, 1).unwrap();
        assert!(e.grad_norm > 0.0 && !e.kkt_ok);
    }

    #[test]
    fn rule_injection_examples() {
        let batch = tiny_batch(8, 4, 3, 4, 2);
        let model = AttentionModel::random(&tiny_shape(3, 2), 8).unwrap();
        let base = plain(&model, 0.1, 0.1);
        let always = RuleSpec::ArgmaxIn {
            positions: vec![0, 1],
            allowed: vec![0, 1],
        };
        let with = inject_rule(&base, always, 2.0).unwrap();
        assert_eq!(objective(&model, &batch, &with).unwrap(), objective(&model, &batch, &base).unwrap());
        assert_eq!(
            inject_rule(
                &base,
                RuleSpec::ArgmaxIn {
                    positions: vec![0],
                    allowed: vec![0]
                },
                0.0
            )
            .unwrap(),
            base
        );
        assert!(inject_rule(
            &base,
            RuleSpec::ArgmaxIn {
                positions: vec![0],
                allowed: vec![0]
            },
            -1.0
        )
        .is_err());
        // Binary rule violated on exactly half the sequences: penalty γ/2.
        let z: Vec<usize> = batch.embeddings.iter().map(|x| argmax(model.logits(x).unwrap().row(0))).collect();
        let class = z[0];
        let hits = z.iter().filter(|&&c| c == class).count();
        let rule = RuleSpec::ArgmaxIn {
            positions: vec![0],
            allowed: vec![class],
        };
        let obj = inject_rule(&base, rule, 3.0).unwrap();
        let expected = 3.0 * (batch.len() - hits) as f64 / batch.len() as f64;
        assert!((rule_penalty(&model, &batch, &obj).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn added_block_keeps_outputs() {
        let batch = tiny_batch(9, 4, 3, 2, 2);
        let model = AttentionModel::random(&tiny_shape(3, 2), 9).unwrap();
        let bigger = model.add_block(2);
        assert_eq!(bigger.num_blocks(), 3);
        for x in &batch.embeddings {
            assert_eq!(model.logits(x).unwrap(), bigger.logits(x).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn accepted_steps_never_increase_objective(seed in 0u64..1000) {
            let batch = tiny_batch(seed, 4, 3, 2, 2);
            let model = AttentionModel::random(&tiny_shape(3, 2), seed).unwrap();
            let obj = plain(&model, 0.05, 0.1);
            let (state, _) = train_to_stationarity(&model, &batch, &obj, &TrainOptions { max_iters: 40, ..Default::default() }).unwrap();
            for w in state.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
        }
    }
}
