//! Closed-form concentration, entropy and fidelity bounds, the group-penalty
//! threshold, regularity-constant estimation and per-query verification.

use serde::{Deserialize, Serialize};

use crate::attention::{anchor_dominance_margin, margin_quantile, off_block_margin, BlockPartition, HeadParams, RuleTargets};
use crate::linalg::{dot, entropy_of, power_iteration, softmax_unchecked, EntropyUnit, Matrix};
use crate::{Error, Result};

/// Slack allowed when comparing a measurement with a bound.
pub const BOUND_SLACK: f64 = 1e-12;

/// Lower quantile used for the empirical margin unless a caller overrides it.
pub const DEFAULT_MARGIN_QUANTILE: f64 = 0.05;

/// Measured constants of the regularity assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityEstimate {
    pub l_ell: f64,
    pub r_x: f64,
    pub sigma_x: f64,
    pub rho_max: f64,
    pub delta: f64,
    pub eps_margin: f64,
}

impl RegularityEstimate {
    /// Unit constants with no coherence, for closed-form checks.
    pub fn unit(delta: f64) -> Self {
        Self {
            l_ell: 1.0,
            r_x: 1.0,
            sigma_x: 1.0,
            rho_max: 0.0,
            delta,
            eps_margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L_ell", self.l_ell),
            ("R_x", self.r_x),
            ("sigma_X", self.sigma_x),
            ("rho_max", self.rho_max),
            ("eps_margin", self.eps_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.delta.is_finite() {
            return Err(Error::Parameter(format!("margin must be finite, got {}", self.delta)));
        }
        if self.rho_max >= 1.0 {
            return Err(Error::Parameter(format!("rho_max must be < 1, got {}", self.rho_max)));
        }
        Ok(())
    }

    /// Componentwise worst case of two estimates.
    pub fn worst(&self, other: &Self) -> Self {
        Self {
            l_ell: self.l_ell.max(other.l_ell),
            r_x: self.r_x.max(other.r_x),
            sigma_x: self.sigma_x.max(other.sigma_x),
            rho_max: self.rho_max.max(other.rho_max),
            delta: self.delta.min(other.delta),
            eps_margin: self.eps_margin.max(other.eps_margin),
        }
    }
}

/// Second moment `E[x xᵀ]` over the rows of every sequence that fall in `block`.
fn block_second_moment(data: &[Matrix], block: &[usize]) -> Matrix {
    let d = data[0].cols();
    let mut m = Matrix::zeros(d, d);
    let mut count = 0usize;
    for x in data {
        for &t in block {
            let row = x.row(t);
            for r in 0..d {
                for c in 0..d {
                    let v = m.get(r, c) + row[r] * row[c];
                    m.set(r, c, v);
                }
            }
            count += 1;
        }
    }
    m.scale(1.0 / count as f64)
}

const POWER_ITERS: usize = 5000;
const POWER_TOL: f64 = 1e-14;

/// Measures `R_x`, `σ_X`, `ρ_max` and the empirical margin on a batch sharing
/// one partition.
///
/// `σ_X` is the square root of the largest eigenvalue of any block's
/// within-block second-moment matrix. `ρ_max` is the largest absolute cosine
/// between the dominant directions of two different blocks.
pub fn estimate_regularity(
    data: &[Matrix],
    partition: &BlockPartition,
    head: &HeadParams,
    quantile: f64,
    l_ell: Option<f64>,
) -> Result<RegularityEstimate> {
    if data.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for x in data {
        if x.rows() != partition.n() {
            return Err(Error::Contract("sequence length does not match partition".into()));
        }
    }
    let r_x = data
        .iter()
        .flat_map(|x| (0..x.rows()).map(move |t| dot(x.row(t), x.row(t)).sqrt()))
        .fold(0.0, f64::max);
    let mut sigma_sq = 0.0_f64;
    let mut directions = Vec::with_capacity(partition.num_blocks());
    for block in partition.blocks() {
        let m = block_second_moment(data, block);
        let (lambda, v) = power_iteration(&m, POWER_ITERS, POWER_TOL)?;
        sigma_sq = sigma_sq.max(lambda);
        directions.push(v);
    }
    let mut rho_max = 0.0_f64;
    for i in 0..directions.len() {
        for j in i + 1..directions.len() {
            rho_max = rho_max.max(dot(&directions[i], &directions[j]).abs());
        }
    }
    let margins = crate::attention::batch_margins(data, &partition.governing(), head, partition)?;
    let (delta, eps_margin) = if partition.num_blocks() == 1 {
        (f64::INFINITY, 0.0)
    } else {
        margin_quantile(&margins, quantile)?
    };
    Ok(RegularityEstimate {
        l_ell: l_ell.unwrap_or(1.0),
        r_x,
        sigma_x: sigma_sq.max(0.0).sqrt(),
        rho_max: rho_max.min(1.0),
        delta,
        eps_margin,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Off-block attention mass bound: `(exact, simplified)`.
///
/// `exact = m e^{−δ/τ} / (1 + m e^{−δ/τ})` with `m = N − block_size`;
/// `simplified = e^{−δ/τ}` is returned only when `e^{δ/τ} ≥ 2m`.
pub fn lemma1_bound(n: usize, block_size: usize, delta: f64, tau: f64) -> Result<(f64, Option<f64>)> {
    check_tau(tau)?;
    if block_size == 0 || block_size > n {
        return Err(Error::Parameter(format!("block size {block_size} not in 1..={n}")));
    }
    let m = (n - block_size) as f64;
    let decay = (-delta / tau).exp();
    let r = m * decay;
    let exact = if r.is_infinite() { 1.0 } else { r / (1.0 + r) };
    let simplified = ((delta / tau).exp() >= 2.0 * m).then_some(decay);
    Ok((exact, simplified))
}

/// Minimum group penalty that keeps off-block column groups at zero:
/// `2 L R σ √|X_i| / (τ (1 − ρ)) · e^{−δ/τ}`.
pub fn theorem1_threshold(reg: &RegularityEstimate, block_size: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if !(reg.rho_max < 1.0) {
        return Err(Error::Parameter(format!("rho_max must be < 1, got {}", reg.rho_max)));
    }
    let lead = 2.0 * reg.l_ell * reg.r_x * reg.sigma_x * (block_size as f64).sqrt();
    Ok(lead / (tau * (1.0 - reg.rho_max)) * (-reg.delta / tau).exp())
}

/// Whether `e^{δ/τ} ≥ 2N`.
pub fn side_condition(n: usize, delta: f64, tau: f64) -> bool {
    (delta / tau).exp() >= 2.0 * n as f64
}

/// Entropy bound in bits, `log2|A| + N e^{−δ/τ} (1 + log2 N) / ln 2`, and
/// whether the side condition `e^{δ/τ} ≥ 2N` holds.
pub fn corollary1_entropy_bound(anchor_size: usize, n: usize, delta: f64, tau: f64) -> Result<(f64, bool)> {
    check_tau(tau)?;
    if anchor_size == 0 || n == 0 {
        return Err(Error::Parameter("anchor size and N must be >= 1".into()));
    }
    let nf = n as f64;
    let tail = nf * (-delta / tau).exp() * (1.0 + nf.log2()) / std::f64::consts::LN_2;
    Ok(((anchor_size as f64).log2() + tail, side_condition(n, delta, tau)))
}

/// Fidelity bound `1 − N e^{−δ/τ}` clamped to `[0, 1]`, with the side condition.
pub fn corollary2_fidelity_bound(n: usize, delta: f64, tau: f64) -> Result<(f64, bool)> {
    check_tau(tau)?;
    let b = 1.0 - n as f64 * (-delta / tau).exp();
    Ok((b.clamp(0.0, 1.0), side_condition(n, delta, tau)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundKind {
    /// Attention mass outside the governing block (upper bound).
    OffBlockMass,
    /// Attention entropy in bits (upper bound).
    Entropy,
    /// Attention mass on the target set (lower bound).
    Fidelity,
}

impl BoundKind {
    pub fn is_upper(self) -> bool {
        !matches!(self, BoundKind::Fidelity)
    }

    pub fn label(self) -> &'static str {
        match self {
            BoundKind::OffBlockMass => "off_block_mass",
            BoundKind::Entropy => "entropy_bits",
            BoundKind::Fidelity => "fidelity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Global query index `sequence · N + t`.
    pub position: usize,
    pub kind: BoundKind,
    pub theoretical: f64,
    pub empirical: f64,
    pub satisfied: bool,
    pub condition_met: bool,
    pub context: String,
}

impl BoundReport {
    pub fn new(position: usize, kind: BoundKind, theoretical: f64, empirical: f64, condition_met: bool, context: String) -> Self {
        let satisfied = if kind.is_upper() {
            empirical <= theoretical + BOUND_SLACK
        } else {
            empirical >= theoretical - BOUND_SLACK
        };
        Self {
            position,
            kind,
            theoretical,
            empirical,
            satisfied,
            condition_met,
            context,
        }
    }

    /// A report counts as a violation only when its side condition holds.
    pub fn is_violation(&self) -> bool {
        self.condition_met && !self.satisfied
    }
}

/// Reports for every query that met the margin condition, plus how many
/// queries were excluded for missing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub reports: Vec<BoundReport>,
    pub queries: usize,
    pub excluded: usize,
}

impl Verification {
    pub fn violations(&self) -> usize {
        self.reports.iter().filter(|r| r.is_violation()).count()
    }

    /// Observed share of queries below the margin, to set against `ε_margin`.
    pub fn excluded_fraction(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.excluded as f64 / self.queries as f64
        }
    }
}

/// Checks every query of a batch against the three closed-form bounds at the
/// margin `reg.delta`.
///
/// The off-block bound is evaluated when the query's own anchors beat every
/// off-block position by `δ`. The entropy and fidelity bounds need the
/// anchors to beat every non-anchor position by `δ`; fidelity is reported
/// only where `A_{i*} ⊆ T_t ⊆ X_{i*}`.
pub fn verify_bounds(
    data: &[Matrix],
    head: &HeadParams,
    partition: &BlockPartition,
    targets: &RuleTargets,
    reg: &RegularityEstimate,
) -> Result<Verification> {
    let n = partition.n();
    if targets.targets.len() != n || targets.governing.len() != n {
        return Err(Error::Contract("targets must cover every position".into()));
    }
    let delta = reg.delta;
    let tau = head.tau;
    let mut reports = Vec::new();
    let mut excluded = 0;
    for (s, x) in data.iter().enumerate() {
        if x.rows() != n {
            return Err(Error::Contract("sequence length does not match partition".into()));
        }
        let scores = head.scores(x)?;
        for t in 0..n {
            let g = targets.governing[t];
            let row = scores.row(t);
            let w = softmax_unchecked(row, tau);
            let pos = s * n + t;
            let ctx = format!("seq={s} t={t} block={g}");
            let lemma_ok = off_block_margin(row, partition, g) >= delta;
            let dominance_ok = anchor_dominance_margin(row, partition, g) >= delta;
            if !lemma_ok {
                excluded += 1;
                continue;
            }
            let block = partition.block(g);
            let (exact, simplified) = lemma1_bound(n, block.len(), delta, tau)?;
            let off: f64 = (0..n).filter(|&j| partition.block_of(j) != g).map(|j| w[j]).sum();
            reports.push(BoundReport::new(
                pos,
                BoundKind::OffBlockMass,
                exact,
                off,
                simplified.is_some(),
                ctx.clone(),
            ));
            if !dominance_ok {
                continue;
            }
            let anchors = partition.anchors(g);
            let (h_bound, cond) = corollary1_entropy_bound(anchors.len(), n, delta, tau)?;
            let h = entropy_of(&w, EntropyUnit::Bits);
            reports.push(BoundReport::new(pos, BoundKind::Entropy, h_bound, h, cond, ctx.clone()));
            let target = &targets.targets[t];
            let contains_anchors = anchors.iter().all(|a| target.contains(a));
            let inside = target.iter().all(|&j| partition.block_of(j) == g);
            if contains_anchors && inside {
                let (f_bound, cond) = corollary2_fidelity_bound(n, delta, tau)?;
                let fid: f64 = target.iter().map(|&j| w[j]).sum();
                reports.push(BoundReport::new(pos, BoundKind::Fidelity, f_bound, fid, cond, ctx));
            }
        }
    }
    Ok(Verification {
        reports,
        queries: data.len() * n,
        excluded,
    })
}

/// Writes reports as CSV rows under the fixed column order
/// `position,kind,theoretical,empirical,satisfied,condition_met`.
pub fn reports_to_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from("position,kind,theoretical,empirical,satisfied,condition_met\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:e},{:e},{},{}\n",
            r.position,
            r.kind.label(),
            r.theoretical,
            r.empirical,
            r.satisfied,
            r.condition_met
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn lemma1_examples() {
        assert!(close(lemma1_bound(5, 1, 0.0, 1.0).unwrap().0, 0.8, 1e-15));
        // 6 e^{-20} / (1 + 6 e^{-20}), 40-digit evaluation.
        let (exact, simplified) = lemma1_bound(10, 4, 2.0, 0.1).unwrap();
        assert!(close(exact, 1.236692158169059566870e-8, 1e-13));
        assert!(simplified.is_some());
        assert_eq!(lemma1_bound(7, 7, 0.3, 0.5).unwrap().0, 0.0);
        assert!(lemma1_bound(5, 1, 1.0, 0.0).is_err());
        assert!(lemma1_bound(5, 1, 0.0, 1.0).unwrap().1.is_none());
    }

    #[test]
    fn threshold_examples() {
        let mut reg = RegularityEstimate::unit(2.0);
        reg.rho_max = 0.5;
        // 80 e^{-20}
        assert!(close(theorem1_threshold(&reg, 4, 0.1).unwrap(), 1.648922897950846262372e-7, 1e-13));
        let unit = RegularityEstimate::unit(0.0);
        assert!(close(theorem1_threshold(&unit, 1, 1.0).unwrap(), 2.0, 1e-15));
        let a = theorem1_threshold(&unit, 3, 0.4).unwrap();
        let b = theorem1_threshold(&unit, 6, 0.4).unwrap();
        assert!(close(b / a, std::f64::consts::SQRT_2, 1e-14));
        reg.rho_max = 1.0;
        assert!(theorem1_threshold(&reg, 4, 0.1).is_err());
    }

    #[test]
    fn corollary_examples() {
        let (h, cond) = corollary1_entropy_bound(1, 16, 1e3, 1.0).unwrap();
        assert_eq!(h, 0.0);
        assert!(cond);
        let (h, _) = corollary1_entropy_bound(8, 16, 2.0, 0.1).unwrap();
        assert!(close(h, 3.000000237889288768194, 1e-14));
        let (h1, _) = corollary1_entropy_bound(3, 32, 2.0, 0.5).unwrap();
        let (h4, _) = corollary1_entropy_bound(12, 32, 2.0, 0.5).unwrap();
        assert!((h4 - h1 - 2.0).abs() < 1e-12);
        assert_eq!(corollary2_fidelity_bound(64, 1e3, 1.0).unwrap().0, 1.0);
        let (f, cond) = corollary2_fidelity_bound(64, 2.0, 0.1).unwrap();
        // 64 e^{-20}
        assert!(close(1.0 - f, 1.319138318360677009898e-7, 1e-8));
        assert!(cond);
        let (f1, _) = corollary2_fidelity_bound(1, 0.7, 0.3).unwrap();
        assert!(close(f1, 1.0 - (-0.7_f64 / 0.3).exp(), 1e-15));
        assert!(!corollary2_fidelity_bound(64, 0.1, 1.0).unwrap().1);
    }

    /// Keys along one axis so that `q·k_j` equals a prescribed score row.
    fn realize(scores: &[Vec<f64>]) -> (Matrix, HeadParams, usize) {
        let n = scores.len();
        // x_t = [e_t ; s_t] with W_Q picking e_t and W_K picking s_t.
        let d = 2 * n;
        let x = Matrix::from_fn(n, d, |t, c| if c < n { (c == t) as u8 as f64 } else { scores[c - n][t] });
        let w_q = Matrix::from_fn(d, n, |r, c| (r == c) as u8 as f64);
        let w_k = Matrix::from_fn(d, n, |r, c| (r == c + n) as u8 as f64);
        (x, HeadParams::new(w_q, w_k, Matrix::identity(d), 1.0).unwrap(), n)
    }

    /// Rows with own anchors at `c`, every other position at `c − δ`.
    fn tight_rows(p: &BlockPartition, delta: f64) -> Vec<Vec<f64>> {
        (0..p.n())
            .map(|t| {
                let g = p.block_of(t);
                (0..p.n())
                    .map(|j| if p.anchors(g).contains(&j) { 1.5 } else { 1.5 - delta })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn constructed_exact_margin_meets_mass_and_fidelity_bounds() {
        let p = BlockPartition::contiguous(&[4, 4], &[2, 2]).unwrap();
        let (x, mut head, _) = realize(&tight_rows(&p, 2.0));
        head.tau = 0.1;
        let reg = RegularityEstimate::unit(2.0);
        let v = verify_bounds(&[x], &head, &p, &RuleTargets::anchors_of(&p), &reg).unwrap();
        assert_eq!(v.excluded, 0);
        for r in &v.reports {
            if r.kind != BoundKind::Entropy {
                assert!(r.satisfied, "{r:?}");
            }
        }
        // Brute force: off mass = 4 e^{-20} / (2 + 6 e^{-20}).
        let e = (-20.0_f64).exp();
        let off = 4.0 * e / (2.0 + 6.0 * e);
        let r = v.reports.iter().find(|r| r.kind == BoundKind::OffBlockMass).unwrap();
        assert!(close(r.empirical, off, 1e-9));
    }

    #[test]
    fn entropy_bound_fails_on_tight_single_anchor_instance() {
        // One anchor, seven positions exactly at the margin: the tail term of
        // the entropy bound is too small by a factor of about δ/τ.
        let p = BlockPartition::contiguous(&[4, 4], &[1, 1]).unwrap();
        let (x, mut head, _) = realize(&tight_rows(&p, 2.0));
        head.tau = 0.1;
        let v = verify_bounds(&[x], &head, &p, &RuleTargets::anchors_of(&p), &RegularityEstimate::unit(2.0)).unwrap();
        let r = v.reports.iter().find(|r| r.kind == BoundKind::Entropy).unwrap();
        assert!(r.condition_met);
        assert!(r.empirical > 4.0 * r.theoretical);
    }

    #[test]
    fn single_block_reports_zero_off_mass() {
        let p = BlockPartition::single(4, vec![0]).unwrap();
        let x = Matrix::from_fn(4, 2, |t, c| (t + c) as f64 * 0.1);
        let head = HeadParams::identity_scaled(2, 1.0, 1.0).unwrap();
        let v = verify_bounds(&[x], &head, &p, &RuleTargets::anchors_of(&p), &RegularityEstimate::unit(0.0)).unwrap();
        for r in v.reports.iter().filter(|r| r.kind == BoundKind::OffBlockMass) {
            assert_eq!(r.theoretical, 0.0);
            assert_eq!(r.empirical, 0.0);
            assert!(r.satisfied && r.condition_met);
        }
    }

    #[test]
    fn zero_margin_reports_lack_side_condition() {
        let p = BlockPartition::contiguous(&[3, 3], &[1, 1]).unwrap();
        let (x, head, _) = realize(&tight_rows(&p, 0.0));
        let v = verify_bounds(&[x], &head, &p, &RuleTargets::anchors_of(&p), &RegularityEstimate::unit(0.0)).unwrap();
        assert!(!v.reports.is_empty());
        assert!(v.reports.iter().all(|r| !r.condition_met));
    }

    #[test]
    fn sigma_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = BlockPartition::contiguous(&[6, 6], &[1, 1]).unwrap();
        let scales = [[0.9, 0.3, 0.1], [0.2, 0.5, 0.8]];
        let data: Vec<Matrix> = (0..200)
            .map(|_| {
                Matrix::from_fn(12, 3, |t, c| {
                    let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    z * scales[t / 6][c]
                })
            })
            .collect();
        let head = HeadParams::identity_scaled(3, 1.0, 1.0).unwrap();
        let reg = estimate_regularity(&data, &p, &head, 0.05, None).unwrap();
        let mut best = 0.0_f64;
        for block in p.blocks() {
            let m = block_second_moment(&data, block);
            let dm = nalgebra::DMatrix::from_row_slice(3, 3, m.data());
            let top = dm.symmetric_eigen().eigenvalues.iter().copied().fold(0.0, f64::max);
            best = best.max(top);
        }
        assert!(close(reg.sigma_x, best.sqrt(), 1e-6));
        // Analytic population value 0.9, sampled within 5%.
        assert!(close(reg.sigma_x, 0.9, 0.05));
        assert_eq!(reg.l_ell, 1.0);
    }

    #[test]
    fn orthogonal_blocks_have_no_coherence_and_unit_norm() {
        let p = BlockPartition::contiguous(&[3, 3], &[1, 1]).unwrap();
        let x = Matrix::from_fn(6, 2, |t, c| ((t / 3) == c) as u8 as f64);
        let head = HeadParams::identity_scaled(2, 1.0, 1.0).unwrap();
        let reg = estimate_regularity(&[x], &p, &head, 0.05, None).unwrap();
        assert!(reg.rho_max < 1e-9);
        assert!((reg.r_x - 1.0).abs() < 1e-15);
        assert!(estimate_regularity(&[], &p, &head, 0.05, None).is_err());
    }

    #[test]
    fn lemma1_monotone_on_grid() {
        for n in [4usize, 8, 16, 64] {
            let mut prev = f64::INFINITY;
            for k in 0..40 {
                let e = lemma1_bound(n, 2, k as f64 * 0.1, 0.3).unwrap().0;
                assert!(e <= prev);
                prev = e;
            }
        }
        for k in 0..10 {
            let delta = k as f64 * 0.2;
            let mut prev = -1.0;
            for n in 2..40 {
                let e = lemma1_bound(n, 2, delta, 0.5).unwrap().0;
                assert!(e >= prev);
                prev = e;
            }
        }
    }

    #[test]
    fn threshold_scales_with_inverse_temperature_and_decay() {
        let mut reg = RegularityEstimate::unit(1.3);
        reg.rho_max = 0.2;
        reg.sigma_x = 0.7;
        let reference = theorem1_threshold(&reg, 5, 1.0).unwrap() * (1.3_f64).exp();
        for tau in [0.1, 0.2, 0.35, 0.5, 0.8, 1.5] {
            let scaled = theorem1_threshold(&reg, 5, tau).unwrap() * tau * (1.3 / tau).exp();
            assert!(close(scaled, reference, 1e-12));
        }
    }

    proptest! {
        #[test]
        fn off_block_mass_respects_exact_bound(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [rng.random_range(1..5usize), rng.random_range(1..5usize), rng.random_range(1..5usize)];
            let anchors: Vec<usize> = sizes.iter().map(|&s| rng.random_range(1..=s)).collect();
            let p = BlockPartition::contiguous(&sizes, &anchors).unwrap();
            let delta = rng.random_range(0.0..3.0);
            let tau = rng.random_range(0.1..1.0);
            // Random scores with every off-block position below the weakest own anchor by at least δ.
            let rows: Vec<Vec<f64>> = (0..p.n()).map(|t| {
                let g = p.block_of(t);
                let low_anchor = 2.0;
                (0..p.n()).map(|j| {
                    if p.anchors(g).contains(&j) { low_anchor + rng.random_range(0.0..1.0) }
                    else if p.block_of(j) == g { rng.random_range(-3.0..3.0) }
                    else { low_anchor - delta - rng.random_range(0.0..2.0) }
                }).collect()
            }).collect();
            let (x, mut head, _) = realize(&rows);
            head.tau = tau;
            let v = verify_bounds(&[x], &head, &p, &RuleTargets::anchors_of(&p), &RegularityEstimate::unit(delta)).unwrap();
            prop_assert_eq!(v.excluded, 0);
            for r in v.reports.iter().filter(|r| r.kind == BoundKind::OffBlockMass) {
                prop_assert!(r.empirical <= r.theoretical + BOUND_SLACK, "{:?}", r);
            }
        }

        #[test]
        fn fidelity_gap_below_tail(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BlockPartition::contiguous(&[3, 5], &[rng.random_range(1..=3usize), rng.random_range(1..=5usize)]).unwrap();
            let delta = rng.random_range(0.5..3.0);
            let tau = rng.random_range(0.1..1.0);
            let rows: Vec<Vec<f64>> = (0..p.n()).map(|t| {
                let g = p.block_of(t);
                (0..p.n()).map(|j| if p.anchors(g).contains(&j) { 1.0 + rng.random_range(0.0..0.5) } else { 1.0 - delta - rng.random_range(0.0..1.0) }).collect()
            }).collect();
            let (x, mut head, _) = realize(&rows);
            head.tau = tau;
            for targets in [RuleTargets::anchors_of(&p), RuleTargets::blocks_of(&p)] {
                let v = verify_bounds(std::slice::from_ref(&x), &head, &p, &targets, &RegularityEstimate::unit(delta)).unwrap();
                for r in v.reports.iter().filter(|r| r.kind == BoundKind::Fidelity) {
                    prop_assert!(1.0 - r.empirical <= p.n() as f64 * (-delta / tau).exp() + BOUND_SLACK);
                }
            }
        }
    }
}
