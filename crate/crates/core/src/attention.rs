//! Block-partitioned single-layer attention, logit margins and per-position
//! localization diagnostics.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, entropy_of, softmax_temp, softmax_unchecked, EntropyUnit, Matrix, ProbVector};
use crate::{Error, Result};

/// Disjoint position blocks covering `0..n`, each with a nonempty anchor set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    n: usize,
    blocks: Vec<Vec<usize>>,
    anchors: Vec<Vec<usize>>,
    #[serde(skip)]
    block_of: Vec<usize>,
}

impl BlockPartition {
    pub fn new(n: usize, blocks: Vec<Vec<usize>>, anchors: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Contract("partition needs at least one block".into()));
        }
        if blocks.len() != anchors.len() {
            return Err(Error::Contract("one anchor set per block".into()));
        }
        let mut block_of = vec![usize::MAX; n];
        for (i, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::Contract(format!("block {i} is empty")));
            }
            for &t in block {
                if t >= n {
                    return Err(Error::Contract(format!("position {t} outside 0..{n}")));
                }
                if block_of[t] != usize::MAX {
                    return Err(Error::Contract(format!("position {t} in two blocks")));
                }
                block_of[t] = i;
            }
        }
        if let Some(t) = block_of.iter().position(|&b| b == usize::MAX) {
            return Err(Error::Contract(format!("position {t} not covered")));
        }
        for (i, a) in anchors.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Contract(format!("anchor set {i} is empty")));
            }
            if let Some(&j) = a.iter().find(|&&j| j >= n || block_of[j] != i) {
                return Err(Error::Contract(format!("anchor {j} not inside block {i}")));
            }
        }
        let mut blocks = blocks;
        let mut anchors = anchors;
        blocks.iter_mut().for_each(|b| b.sort_unstable());
        anchors.iter_mut().for_each(|a| {
            a.sort_unstable();
            a.dedup();
        });
        Ok(Self {
            n,
            blocks,
            anchors,
            block_of,
        })
    }

    /// One block covering every position.
    pub fn single(n: usize, anchors: Vec<usize>) -> Result<Self> {
        Self::new(n, vec![(0..n).collect()], vec![anchors])
    }

    /// Contiguous blocks of the given sizes; the first `anchors[i]` positions
    /// of block `i` are its anchors.
    pub fn contiguous(sizes: &[usize], anchors: &[usize]) -> Result<Self> {
        if sizes.len() != anchors.len() {
            return Err(Error::Contract("sizes and anchor counts differ".into()));
        }
        let n = sizes.iter().sum();
        let mut start = 0;
        let mut blocks = Vec::new();
        let mut anchor_sets = Vec::new();
        for (&s, &a) in sizes.iter().zip(anchors) {
            if a > s {
                return Err(Error::Contract(format!("{a} anchors in a block of {s}")));
            }
            blocks.push((start..start + s).collect());
            anchor_sets.push((start..start + a).collect());
            start += s;
        }
        Self::new(n, blocks, anchor_sets)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn revalidate(self) -> Result<Self> {
        Self::new(self.n, self.blocks, self.anchors)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    pub fn anchors(&self, i: usize) -> &[usize] {
        &self.anchors[i]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn anchor_sets(&self) -> &[Vec<usize>] {
        &self.anchors
    }

    /// Block containing position `t`.
    #[inline]
    pub fn block_of(&self, t: usize) -> usize {
        self.block_of[t]
    }

    /// Per-position governing block under the position-containment reading.
    pub fn governing(&self) -> Vec<usize> {
        self.block_of.clone()
    }

    pub fn is_anchor(&self, t: usize) -> bool {
        self.anchors[self.block_of[t]].binary_search(&t).is_ok()
    }

    /// Moves `positions` into a new trailing block with the given anchors.
    /// Blocks left empty are dropped; anchors of other blocks may not move.
    pub fn carve(&self, positions: &[usize], anchors: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Contract("cannot carve an empty block".into()));
        }
        if let Some(&t) = positions.iter().find(|&&t| t < self.n && self.is_anchor(t)) {
            return Err(Error::Contract(format!("position {t} is an existing anchor")));
        }
        let moving: std::collections::BTreeSet<usize> = positions.iter().copied().collect();
        let mut blocks = Vec::new();
        let mut anchor_sets = Vec::new();
        for (b, a) in self.blocks.iter().zip(&self.anchors) {
            let rest: Vec<usize> = b.iter().copied().filter(|t| !moving.contains(t)).collect();
            if !rest.is_empty() {
                blocks.push(rest);
                anchor_sets.push(a.clone());
            }
        }
        blocks.push(moving.into_iter().collect());
        anchor_sets.push(anchors.to_vec());
        Self::new(self.n, blocks, anchor_sets)
    }
}

/// Query, key and value projections of one head plus its temperature.
///
/// `w_q` and `w_k` are `d_model × d_head`; a block's column group is a set of
/// their columns (see [`crate::trainer::AttentionModel::column_groups`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub tau: f64,
}

impl HeadParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
        }
        if w_q.shape() != w_k.shape() {
            return Err(Error::Contract("W_Q and W_K shapes differ".into()));
        }
        if w_v.rows() != w_q.rows() {
            return Err(Error::Contract("W_V must share d_model with W_Q".into()));
        }
        Ok(Self { w_q, w_k, w_v, tau })
    }

    /// `W_Q = W_K = scale · I`, `W_V = I`: scores are scaled embedding inner products.
    pub fn identity_scaled(d_model: usize, scale: f64, tau: f64) -> Result<Self> {
        let p = Matrix::identity(d_model).scale(scale);
        Self::new(p.clone(), p, Matrix::identity(d_model), tau)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_head(&self) -> usize {
        self.w_q.cols()
    }

    /// Raw scores `Q Kᵀ` (before the temperature).
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model() {
            return Err(Error::Contract(format!(
                "embedding width {} but head expects {}",
                x.cols(),
                self.d_model()
            )));
        }
        let q = x.matmul(&self.w_q)?;
        let k = x.matmul(&self.w_k)?;
        q.matmul_t(&k)
    }

    /// Row-wise attention weights.
    pub fn weights(&self, x: &Matrix) -> Result<Vec<ProbVector>> {
        let s = self.scores(x)?;
        (0..s.rows()).map(|t| softmax_temp(s.row(t), self.tau)).collect()
    }
}

/// `O = softmax(QKᵀ/τ) V` and the attention rows.
pub fn attend(x: &Matrix, head: &HeadParams) -> Result<(Matrix, Vec<ProbVector>)> {
    let weights = head.weights(x)?;
    let v = x.matmul(&head.w_v)?;
    let mut out = Matrix::zeros(x.rows(), v.cols());
    for (t, w) in weights.iter().enumerate() {
        let row = out.row_mut(t);
        for (j, &a) in w.as_slice().iter().enumerate() {
            for (o, &vj) in row.iter_mut().zip(v.row(j)) {
                *o += a * vj;
            }
        }
    }
    Ok((out, weights))
}

/// `min_{j∈A_{i*}} q·k_j − max_{j'∈∪_{i≠i*}A_i} q·k_{j'}`.
///
/// With a single block there are no competing anchors and the margin is
/// `+∞`: every off-block mass bound is then trivially zero.
pub fn logit_margin(q: &[f64], keys: &Matrix, partition: &BlockPartition, i_star: usize) -> Result<f64> {
    if i_star >= partition.num_blocks() {
        return Err(Error::Contract(format!("block {i_star} out of range")));
    }
    if keys.rows() != partition.n() || keys.cols() != q.len() {
        return Err(Error::Contract("keys must be N × d_head".into()));
    }
    let scores: Vec<f64> = (0..keys.rows()).map(|j| dot(q, keys.row(j))).collect();
    Ok(anchor_margin(&scores, partition, i_star))
}

/// Anchor margin from a precomputed score row.
pub fn anchor_margin(scores: &[f64], partition: &BlockPartition, i_star: usize) -> f64 {
    let own = partition.anchors(i_star).iter().map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
    let rival = (0..partition.num_blocks())
        .filter(|&i| i != i_star)
        .flat_map(|i| partition.anchors(i).iter())
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    own - rival
}

/// Own-anchor minimum against every position outside the governing block.
/// This is the quantity the off-block concentration bound actually needs.
pub fn off_block_margin(scores: &[f64], partition: &BlockPartition, i_star: usize) -> f64 {
    let own = partition.anchors(i_star).iter().map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
    let rival = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| partition.block_of(j) != i_star)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    own - rival
}

/// Own-anchor minimum against every non-anchor position, in-block included.
pub fn anchor_dominance_margin(scores: &[f64], partition: &BlockPartition, i_star: usize) -> f64 {
    let anchors = partition.anchors(i_star);
    let own = anchors.iter().map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
    let rival = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| anchors.binary_search(j).is_err())
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    own - rival
}

/// Lower empirical quantile of a margin sample and the fraction strictly below it.
pub fn margin_quantile(margins: &[f64], quantile: f64) -> Result<(f64, f64)> {
    if margins.is_empty() {
        return Err(Error::Contract("empty margin sample".into()));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Parameter(format!("quantile {quantile} not in (0, 1]")));
    }
    let mut sorted = margins.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let delta = sorted[k];
    let below = sorted.iter().filter(|&&m| m < delta).count();
    Ok((delta, below as f64 / sorted.len() as f64))
}

/// Per-query anchor margins over a batch; `governing[t]` is the block
/// governing position `t` (shared by every sequence).
pub fn batch_margins(data: &[Matrix], governing: &[usize], head: &HeadParams, partition: &BlockPartition) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * partition.n());
    for x in data {
        if x.rows() != partition.n() || governing.len() != partition.n() {
            return Err(Error::Contract("sequence length does not match partition".into()));
        }
        let s = head.scores(x)?;
        for (t, &g) in governing.iter().enumerate() {
            out.push(anchor_margin(s.row(t), partition, g));
        }
    }
    Ok(out)
}

/// `(δ̂, ε̂_margin)`: the `quantile`-lower empirical margin and the observed
/// fraction of queries below it.
pub fn empirical_margin(
    data: &[Matrix],
    governing: &[usize],
    head: &HeadParams,
    partition: &BlockPartition,
    quantile: f64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    margin_quantile(&batch_margins(data, governing, head, partition)?, quantile)
}

/// Target position sets `T_t` and the governing block of every position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTargets {
    pub targets: Vec<Vec<usize>>,
    pub governing: Vec<usize>,
}

impl RuleTargets {
    /// `T_t = A_{i*(t)}` with position-containment governance.
    pub fn anchors_of(partition: &BlockPartition) -> Self {
        let governing = partition.governing();
        let targets = governing.iter().map(|&g| partition.anchors(g).to_vec()).collect();
        Self { targets, governing }
    }

    /// `T_t = X_{i*(t)}`.
    pub fn blocks_of(partition: &BlockPartition) -> Self {
        let governing = partition.governing();
        let targets = governing.iter().map(|&g| partition.block(g).to_vec()).collect();
        Self { targets, governing }
    }

    /// Whether every `T_t` lies inside its governing block.
    pub fn within_blocks(&self, partition: &BlockPartition) -> bool {
        self.targets
            .iter()
            .zip(&self.governing)
            .all(|(t, &g)| t.iter().all(|&j| partition.block_of(j) == g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDiagnostics {
    pub weights: Vec<ProbVector>,
    pub entropy_bits: Vec<f64>,
    pub entropy_nats: Vec<f64>,
    /// Mass outside the governing block, per position.
    pub off_block_mass: Vec<f64>,
    /// Per-position mass on `T_t`.
    pub target_mass: Vec<f64>,
    /// Mean target mass.
    pub fidelity: f64,
}

impl AttentionDiagnostics {
    pub fn mean_entropy_bits(&self) -> f64 {
        mean(&self.entropy_bits)
    }

    pub fn mean_entropy_nats(&self) -> f64 {
        mean(&self.entropy_nats)
    }

    pub fn mean_off_block_mass(&self) -> f64 {
        mean(&self.off_block_mass)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Entropies, off-block mass and pointer fidelity of one attention map.
pub fn diagnostics(weights: &[ProbVector], partition: &BlockPartition, targets: &RuleTargets) -> Result<AttentionDiagnostics> {
    let n = partition.n();
    if weights.len() != n || targets.targets.len() != n || targets.governing.len() != n {
        return Err(Error::Contract(
            "diagnostics need one row, target set and label per position".into(),
        ));
    }
    let mut entropy_bits = Vec::with_capacity(n);
    let mut entropy_nats = Vec::with_capacity(n);
    let mut off_block_mass = Vec::with_capacity(n);
    let mut target_mass = Vec::with_capacity(n);
    for (t, w) in weights.iter().enumerate() {
        if w.len() != n {
            return Err(Error::Contract(format!("row {t} has {} weights, expected {n}", w.len())));
        }
        let g = targets.governing[t];
        if g >= partition.num_blocks() {
            return Err(Error::Contract(format!("position {t} governed by unknown block {g}")));
        }
        entropy_bits.push(entropy_of(w.as_slice(), EntropyUnit::Bits));
        entropy_nats.push(entropy_of(w.as_slice(), EntropyUnit::Nats));
        let off: f64 = w
            .as_slice()
            .iter()
            .enumerate()
            .filter(|&(j, _)| partition.block_of(j) != g)
            .map(|(_, &a)| a)
            .sum();
        off_block_mass.push(off.clamp(0.0, 1.0));
        target_mass.push(w.mass_on(targets.targets[t].iter().copied()).clamp(0.0, 1.0));
    }
    let fidelity = mean(&target_mass).clamp(0.0, 1.0);
    Ok(AttentionDiagnostics {
        weights: weights.to_vec(),
        entropy_bits,
        entropy_nats,
        off_block_mass,
        target_mass,
        fidelity,
    })
}

/// Attention rows straight from a raw score matrix.
pub fn weights_from_scores(scores: &Matrix, tau: f64) -> Result<Vec<ProbVector>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok((0..scores.rows())
        .map(|t| {
            // Scores come out of checked matmuls, so the row is finite.
            ProbVector::new(softmax_unchecked(scores.row(t), tau)).unwrap_or_else(|_| ProbVector::uniform(scores.cols()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn partition_validation() {
        assert!(BlockPartition::new(3, vec![vec![0, 1], vec![1, 2]], vec![vec![0], vec![2]]).is_err());
        assert!(BlockPartition::new(3, vec![vec![0, 1]], vec![vec![0]]).is_err());
        assert!(BlockPartition::new(3, vec![vec![0, 1], vec![2]], vec![vec![0], vec![]]).is_err());
        assert!(BlockPartition::new(3, vec![vec![0, 1], vec![2]], vec![vec![2], vec![2]]).is_err());
        let p = BlockPartition::contiguous(&[2, 3], &[1, 2]).unwrap();
        assert_eq!(p.governing(), vec![0, 0, 1, 1, 1]);
        assert_eq!(p.anchors(1), &[2, 3]);
    }

    #[test]
    fn carve_moves_positions() {
        let p = BlockPartition::contiguous(&[4, 4], &[1, 1]).unwrap();
        let q = p.carve(&[2, 3, 6], &[2, 6]).unwrap();
        assert_eq!(q.num_blocks(), 3);
        assert_eq!(q.block(0), &[0, 1]);
        assert_eq!(q.block(1), &[4, 5, 7]);
        assert_eq!(q.block(2), &[2, 3, 6]);
        assert!(p.carve(&[0], &[0]).is_err());
    }

    #[test]
    fn zero_projections_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(5, 3, &mut rng);
        let w_v = random(3, 2, &mut rng);
        let head = HeadParams::new(Matrix::zeros(3, 2), Matrix::zeros(3, 2), w_v.clone(), 0.7).unwrap();
        let (out, weights) = attend(&x, &head).unwrap();
        let v = x.matmul(&w_v).unwrap();
        for w in &weights {
            assert!(w.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        }
        for c in 0..2 {
            let col_mean = v.column(c).iter().sum::<f64>() / 5.0;
            for t in 0..5 {
                assert!((out.get(t, c) - col_mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_position_attends_to_itself() {
        let x = Matrix::new(1, 2, vec![0.3, -0.4]).unwrap();
        let head = HeadParams::identity_scaled(2, 3.0, 0.1).unwrap();
        let (_, w) = attend(&x, &head).unwrap();
        assert_eq!(w[0].as_slice(), &[1.0]);
    }

    #[test]
    fn attend_matches_naive_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(5, 4, &mut rng);
        let head = HeadParams::new(random(4, 3, &mut rng), random(4, 3, &mut rng), random(4, 2, &mut rng), 0.8).unwrap();
        let (out, _) = attend(&x, &head).unwrap();
        // Naive: explicit loops for every product and an unstabilised softmax.
        let proj = |w: &Matrix, t: usize| -> Vec<f64> { (0..w.cols()).map(|c| (0..4).map(|k| x.get(t, k) * w.get(k, c)).sum()).collect() };
        for t in 0..5 {
            let q = proj(&head.w_q, t);
            let logits: Vec<f64> = (0..5)
                .map(|j| {
                    let k = proj(&head.w_k, j);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / 0.8
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let o: f64 = (0..5).map(|j| logits[j].exp() / z * proj(&head.w_v, j)[c]).sum();
                assert!((out.get(t, c) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn margin_examples() {
        let p = BlockPartition::contiguous(&[2, 2, 2], &[1, 2, 1]).unwrap();
        // q = e_0, keys chosen so q·k = 3 on A_0 and 1 on all other anchors.
        let keys = Matrix::from_rows(&[
            vec![3.0, 0.0],
            vec![9.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-5.0, 0.0],
        ])
        .unwrap();
        assert_eq!(logit_margin(&[1.0, 0.0], &keys, &p, 0).unwrap(), 2.0);
        let same = Matrix::from_fn(6, 2, |_, _| 0.5);
        assert_eq!(logit_margin(&[1.0, 2.0], &same, &p, 1).unwrap(), 0.0);
        let one = BlockPartition::single(6, vec![0]).unwrap();
        assert_eq!(logit_margin(&[1.0, 0.0], &keys, &one, 0).unwrap(), f64::INFINITY);
        assert!(logit_margin(&[1.0, 0.0], &keys, &p, 3).is_err());
    }

    #[test]
    fn margin_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = BlockPartition::contiguous(&[3, 4, 3], &[2, 1, 3]).unwrap();
        for _ in 0..50 {
            let keys = random(10, 4, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..3 {
                let mut best_own = f64::INFINITY;
                let mut best_rival = f64::NEG_INFINITY;
                for j in 0..10 {
                    let s: f64 = (0..4).map(|c| q[c] * keys.get(j, c)).sum();
                    for b in 0..3 {
                        if p.anchors(b).contains(&j) {
                            if b == i {
                                best_own = best_own.min(s);
                            } else {
                                best_rival = best_rival.max(s);
                            }
                        }
                    }
                }
                assert_eq!(logit_margin(&q, &keys, &p, i).unwrap(), best_own - best_rival);
            }
        }
    }

    #[test]
    fn empirical_margin_examples() {
        assert_eq!(margin_quantile(&[2.0; 7], 0.3).unwrap(), (2.0, 0.0));
        assert_eq!(margin_quantile(&[3.0, 1.0, 4.0, 2.0], 0.25).unwrap(), (1.0, 0.0));
        assert_eq!(margin_quantile(&[3.0, 1.0, 4.0, 2.0], 0.5).unwrap(), (2.0, 0.25));
        assert_eq!(margin_quantile(&[0.7], 1.0).unwrap(), (0.7, 0.0));
        assert!(margin_quantile(&[], 0.5).is_err());
        assert!(margin_quantile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let p = BlockPartition::contiguous(&[4, 4], &[2, 2]).unwrap();
        let targets = RuleTargets::anchors_of(&p);
        let inside: Vec<ProbVector> = (0..8)
            .map(|t| {
                let a = p.anchors(p.block_of(t));
                let mut w = vec![0.0; 8];
                w[a[0]] = 0.5;
                w[a[1]] = 0.5;
                ProbVector::new(w).unwrap()
            })
            .collect();
        assert_eq!(diagnostics(&inside, &p, &targets).unwrap().fidelity, 1.0);
        let uniform = vec![ProbVector::uniform(8); 8];
        let d = diagnostics(&uniform, &p, &targets).unwrap();
        assert!((d.fidelity - 0.25).abs() < 1e-15);
        assert!(d.entropy_bits.iter().all(|h| (h - 3.0).abs() < 1e-12));
    }

    #[test]
    fn diagnostics_match_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = BlockPartition::contiguous(&[3, 2, 4], &[1, 2, 2]).unwrap();
        let targets = RuleTargets::anchors_of(&p);
        let rows: Vec<ProbVector> = (0..9)
            .map(|_| {
                let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
                softmax_temp(&raw, 1.0).unwrap()
            })
            .collect();
        let d = diagnostics(&rows, &p, &targets).unwrap();
        let mut fid = 0.0;
        for t in 0..9 {
            let g = p.block_of(t);
            let mut off = 0.0;
            let mut tgt = 0.0;
            for j in 0..9 {
                if !p.block(g).contains(&j) {
                    off += rows[t][j];
                }
                if p.anchors(g).contains(&j) {
                    tgt += rows[t][j];
                }
            }
            assert!((d.off_block_mass[t] - off).abs() < 1e-14);
            fid += tgt / 9.0;
        }
        assert!((d.fidelity - fid).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn off_plus_within_is_one(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BlockPartition::contiguous(&[2, 3, 3], &[1, 1, 2]).unwrap();
            let x = random(8, 3, &mut rng);
            let head = HeadParams::new(random(3, 3, &mut rng), random(3, 3, &mut rng), random(3, 2, &mut rng), 0.5).unwrap();
            let (_, w) = attend(&x, &head).unwrap();
            let d = diagnostics(&w, &p, &RuleTargets::anchors_of(&p)).unwrap();
            for t in 0..8 {
                let within = w[t].mass_on(p.block(p.block_of(t)).iter().copied());
                prop_assert!((d.off_block_mass[t] + within - 1.0).abs() <= 1e-12);
            }
            // T_t ⊆ X_{i*(t)} forces target mass below within-block mass.
            prop_assert!(d.fidelity <= 1.0 - d.mean_off_block_mass() + 1e-12);
            let blocks = diagnostics(&w, &p, &RuleTargets::blocks_of(&p)).unwrap();
            prop_assert!((blocks.fidelity - (1.0 - d.mean_off_block_mass())).abs() <= 1e-12);
        }

        #[test]
        fn margin_ignores_components_orthogonal_to_query(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BlockPartition::contiguous(&[3, 3], &[2, 1]).unwrap();
            let keys = random(6, 4, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qq = dot(&q, &q);
            let mut moved = keys.clone();
            for j in 0..6 {
                let r: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let along = dot(&r, &q) / qq;
                for c in 0..4 {
                    let v = moved.get(j, c) + r[c] - along * q[c];
                    moved.set(j, c, v);
                }
            }
            let a = logit_margin(&q, &keys, &p, 0).unwrap();
            let b = logit_margin(&q, &moved, &p, 0).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
