//! Rule-governed synthetic sequences with planted blocks.
//!
//! Every block of every domain owns a prototype direction
//! `u = √(1−c)·e_axis + √c·e_shared`, so any two prototypes have inner
//! product exactly `c`. Anchor positions carry the unit prototype; other
//! positions of the block carry `a·u` with `a = non_anchor_scale`. Under the
//! identity projection scaled by [`GeneratorSpec::head_scale`] the minimum
//! anchor margin is `target_margin` exactly when there is no noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{BlockPartition, HeadParams, RuleTargets};
use crate::bounds::{estimate_regularity, RegularityEstimate};
use crate::linalg::{norm2, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub anchors_per_block: usize,
    pub target_margin: f64,
    pub cross_coherence: f64,
    pub noise_std: f64,
    pub num_domains: usize,
    pub domain_mix: Vec<f64>,
    pub seed: u64,
    pub num_sequences: usize,
    pub non_anchor_scale: f64,
    /// Per-domain block counts; `num_blocks` for every domain when absent.
    pub domain_blocks: Option<Vec<usize>>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n: 16,
            d_model: 16,
            num_blocks: 2,
            anchors_per_block: 2,
            target_margin: 2.0,
            cross_coherence: 0.0,
            noise_std: 0.001,
            num_domains: 1,
            domain_mix: vec![1.0],
            seed: 0,
            num_sequences: 32,
            non_anchor_scale: 0.5,
            domain_blocks: None,
        }
    }
}

impl GeneratorSpec {
    pub fn blocks_per_domain(&self) -> Vec<usize> {
        self.domain_blocks
            .clone()
            .unwrap_or_else(|| vec![self.num_blocks; self.num_domains])
    }

    pub fn validate(&self) -> Result<()> {
        let param = |m: String| Err(Error::Parameter(m));
        if self.n == 0 || self.d_model == 0 {
            return param("N and d_model must be >= 1".into());
        }
        if self.num_domains == 0 || self.domain_mix.len() != self.num_domains {
            return param("domain_mix needs one probability per domain".into());
        }
        if self.domain_mix.iter().any(|p| !(*p >= 0.0)) || (self.domain_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return param("domain_mix must be nonnegative and sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.cross_coherence) {
            return param(format!("cross_coherence {} not in [0, 1)", self.cross_coherence));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return param("noise_std must be finite and >= 0".into());
        }
        if !(self.target_margin >= 0.0 && self.target_margin.is_finite()) {
            return param("target_margin must be finite and >= 0".into());
        }
        if !(self.non_anchor_scale > 0.0 && self.non_anchor_scale <= 1.0) {
            return param("non_anchor_scale must lie in (0, 1]".into());
        }
        if self.anchors_per_block == 0 {
            return param("anchors_per_block must be >= 1".into());
        }
        let blocks = self.blocks_per_domain();
        if blocks.len() != self.num_domains {
            return param("domain_blocks needs one count per domain".into());
        }
        for (d, &k) in blocks.iter().enumerate() {
            if k == 0 {
                return param(format!("domain {d} has no blocks"));
            }
            if k * self.anchors_per_block > self.n {
                return param(format!("{k} blocks x {} anchors exceed N = {}", self.anchors_per_block, self.n));
            }
        }
        let needed = blocks.iter().sum::<usize>() + usize::from(self.cross_coherence > 0.0);
        if needed > self.d_model {
            return param(format!("d_model {} too small for {needed} prototype axes", self.d_model));
        }
        Ok(())
    }

    /// Projection scale `s` with `s²·a(1−c) = target_margin`.
    pub fn head_scale(&self) -> f64 {
        let a = self.non_anchor_scale.min(1.0);
        (self.target_margin / (a * (1.0 - self.cross_coherence))).sqrt()
    }

    /// Identity-projection head realizing the target margin.
    pub fn identity_head(&self, tau: f64) -> Result<HeadParams> {
        HeadParams::identity_scaled(self.d_model, self.head_scale(), tau)
    }

    /// Contiguous partition of domain `d`; anchors are the first positions of each block.
    pub fn partition(&self, d: usize) -> Result<BlockPartition> {
        let k = self.blocks_per_domain()[d];
        let sizes: Vec<usize> = (0..k).map(|i| self.n / k + usize::from(i < self.n % k)).collect();
        BlockPartition::contiguous(&sizes, &vec![self.anchors_per_block; k])
    }

    /// Unit prototype of block `i` in domain `d`.
    pub fn prototype(&self, d: usize, i: usize) -> Vec<f64> {
        let blocks = self.blocks_per_domain();
        let axis = blocks[..d].iter().sum::<usize>() + i;
        let shared = blocks.iter().sum::<usize>();
        let c = self.cross_coherence;
        let mut u = vec![0.0; self.d_model];
        u[axis] = (1.0 - c).sqrt();
        if c > 0.0 {
            u[shared] = c.sqrt();
        }
        u
    }
}

/// Sequences with their planted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub embeddings: Vec<Matrix>,
    /// Per sequence, the block governing each position.
    pub governing_block: Vec<Vec<usize>>,
    /// Per domain, `T_t = A_{i*(t)}`.
    pub targets: Vec<RuleTargets>,
    pub partitions: Vec<BlockPartition>,
    /// Per sequence and position, the planted concept id.
    pub task_labels: Vec<Vec<usize>>,
    pub domain_tags: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn partition_of(&self, s: usize) -> &BlockPartition {
        &self.partitions[self.domain_tags[s]]
    }

    pub fn targets_of(&self, s: usize) -> &RuleTargets {
        &self.targets[self.domain_tags[s]]
    }

    /// Sub-batch of the given sequence indices, in the order given.
    pub fn select(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            embeddings: idx.iter().map(|&s| self.embeddings[s].clone()).collect(),
            governing_block: idx.iter().map(|&s| self.governing_block[s].clone()).collect(),
            targets: self.targets.clone(),
            partitions: self.partitions.clone(),
            task_labels: idx.iter().map(|&s| self.task_labels[s].clone()).collect(),
            domain_tags: idx.iter().map(|&s| self.domain_tags[s]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Sequences tagged with domain `d`.
    pub fn domain_slice(&self, d: usize) -> LabeledBatch {
        let idx: Vec<usize> = (0..self.len()).filter(|&s| self.domain_tags[s] == d).collect();
        self.select(&idx)
    }

    /// Concatenation; both batches must come from specs with the same domain layout.
    pub fn concat(&self, other: &LabeledBatch) -> Result<LabeledBatch> {
        if self.partitions != other.partitions {
            return Err(Error::Contract("batches have different domain partitions".into()));
        }
        let mut out = self.clone();
        out.embeddings.extend(other.embeddings.iter().cloned());
        out.governing_block.extend(other.governing_block.iter().cloned());
        out.task_labels.extend(other.task_labels.iter().cloned());
        out.domain_tags.extend(other.domain_tags.iter().copied());
        Ok(out)
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.partitions.len()];
        for &d in &self.domain_tags {
            counts[d] += 1;
        }
        counts
    }
}

fn sequence_rng(seed: u64, s: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

fn draw_domain(mix: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (d, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return d;
        }
    }
    // Rounding can leave `acc` just under 1; fall back to the last domain with mass.
    mix.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates `spec.num_sequences` sequences. Sequence `s` draws from its own
/// stream of the seeded generator, so any subset can be regenerated alone.
pub fn generate(spec: &GeneratorSpec) -> Result<LabeledBatch> {
    spec.validate()?;
    let partitions: Vec<BlockPartition> = (0..spec.num_domains).map(|d| spec.partition(d)).collect::<Result<_>>()?;
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.num_domains)
        .map(|d| (0..partitions[d].num_blocks()).map(|i| spec.prototype(d, i)).collect())
        .collect();
    let noise =
        Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    let mut batch = LabeledBatch {
        embeddings: Vec::with_capacity(spec.num_sequences),
        governing_block: Vec::with_capacity(spec.num_sequences),
        targets: partitions.iter().map(RuleTargets::anchors_of).collect(),
        partitions: partitions.clone(),
        task_labels: Vec::with_capacity(spec.num_sequences),
        domain_tags: Vec::with_capacity(spec.num_sequences),
        num_classes: partitions.iter().map(BlockPartition::num_blocks).max().unwrap_or(1),
    };
    for s in 0..spec.num_sequences {
        let mut rng = sequence_rng(spec.seed, s);
        let d = draw_domain(&spec.domain_mix, rng.random::<f64>());
        let p = &partitions[d];
        let mut x = Matrix::zeros(spec.n, spec.d_model);
        for t in 0..spec.n {
            let g = p.block_of(t);
            let a = if p.is_anchor(t) { 1.0 } else { spec.non_anchor_scale };
            let row = x.row_mut(t);
            for (v, &u) in row.iter_mut().zip(&prototypes[d][g]) {
                *v = a * u;
                if spec.noise_std > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
            let norm = norm2(row);
            if norm > 1.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let governing = p.governing();
        batch.task_labels.push(governing.clone());
        batch.governing_block.push(governing);
        batch.embeddings.push(x);
        batch.domain_tags.push(d);
    }
    Ok(batch)
}

/// Measures the regularity constants per domain and checks them against the
/// spec: `R_x ≤ 1`, minimum anchor margin `≥ δ − 0.05`, `ρ_max ≤ c + 0.05`.
/// Returns the componentwise worst estimate across domains.
pub fn verify_assumptions(batch: &LabeledBatch, spec: &GeneratorSpec) -> Result<RegularityEstimate> {
    let head = spec.identity_head(1.0)?;
    let mut worst: Option<RegularityEstimate> = None;
    for d in 0..batch.partitions.len() {
        let slice = batch.domain_slice(d);
        if slice.is_empty() {
            continue;
        }
        let reg = estimate_regularity(&slice.embeddings, &batch.partitions[d], &head, 1e-300, None)?;
        worst = Some(match worst {
            None => reg,
            Some(w) => w.worst(&reg),
        });
    }
    let reg = worst.ok_or_else(|| Error::Contract("empty batch".into()))?;
    if reg.r_x > 1.0 + 1e-9 {
        return Err(Error::Assumption {
            constant: "R_x",
            detail: format!("max embedding norm {} > 1", reg.r_x),
        });
    }
    if reg.delta < spec.target_margin - 0.05 {
        return Err(Error::Assumption {
            constant: "delta",
            detail: format!("minimum margin {} < {} - 0.05", reg.delta, spec.target_margin),
        });
    }
    if reg.rho_max > spec.cross_coherence + 0.05 {
        return Err(Error::Assumption {
            constant: "rho_max",
            detail: format!("measured {} > {} + 0.05", reg.rho_max, spec.cross_coherence),
        });
    }
    Ok(reg)
}

/// One stage of a scripted domain-mixture schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub spec: GeneratorSpec,
}

/// Four-stage clinical schedule over three synthetic vocabularies
/// (0 general, 1 pharmacology, 2 radiology): general traffic, a radiology
/// surge, a pharmacology surge, then a new radiology concept.
pub fn healthcare_schedule(base: &GeneratorSpec) -> Vec<Phase> {
    let stage = |name: &str, mix: [f64; 3], blocks: [usize; 3], offset: u64| {
        let mut spec = base.clone();
        spec.num_domains = 3;
        spec.domain_mix = mix.to_vec();
        spec.domain_blocks = Some(blocks.to_vec());
        spec.seed = base.seed.wrapping_add(offset);
        Phase {
            name: name.to_string(),
            spec,
        }
    };
    vec![
        stage("general", [1.0, 0.0, 0.0], [3, 3, 4], 0),
        stage("radiology_surge", [0.2, 0.0, 0.8], [3, 3, 4], 1),
        stage("pharmacology_surge", [0.1, 0.8, 0.1], [3, 3, 4], 2),
        stage("radiology_expansion", [0.0, 0.0, 1.0], [3, 3, 5], 3),
    ]
}
