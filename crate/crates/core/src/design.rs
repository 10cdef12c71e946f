//! Contrast algebra of 2^K factorial designs, tier partitions and the block
//! orthogonalizations of effect coefficients and covariates.
//!
//! Effects are ordered by the size of their factor subset and then
//! lexicographically, so for K = 3 the order is 1, 2, 3, 12, 13, 23, 123.
//! Treatment combinations are indexed with factor 1 as the most significant
//! bit and the low level (-1) before the high level (+1).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAX_FACTORS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorialStructure {
    k: usize,
    /// Bit masks of the factor subsets, bit `K-1-j` standing for factor `j`.
    masks: Vec<u32>,
    subsets: Vec<Vec<usize>>,
}

impl FactorialStructure {
    pub fn new(k: usize) -> Result<Self> {
        if !(1..=MAX_FACTORS).contains(&k) {
            return Err(Error::invalid(format!("number of factors must be in 1..={MAX_FACTORS}, got {k}")));
        }
        let mut subsets = Vec::with_capacity((1 << k) - 1);
        for size in 1..=k {
            push_combinations(k, size, &mut Vec::new(), 0, &mut subsets);
        }
        let masks = subsets
            .iter()
            .map(|s| s.iter().fold(0u32, |m, &j| m | 1 << (k - 1 - j)))
            .collect();
        Ok(Self { k, masks, subsets })
    }

    pub fn factors(&self) -> usize {
        self.k
    }

    /// Q = 2^K.
    pub fn combinations(&self) -> usize {
        1 << self.k
    }

    /// F = 2^K - 1.
    pub fn effects(&self) -> usize {
        self.masks.len()
    }

    /// The scale 2^-(K-1) applied to contrasts of group means.
    pub fn contrast_scale(&self) -> f64 {
        0.5f64.powi(self.k as i32 - 1)
    }

    /// Entry `g_f(q)` of the generating matrix (both indices zero-based).
    pub fn sign(&self, f: usize, q: usize) -> f64 {
        let m = self.masks[f];
        let high = (q as u32 & m).count_ones();
        if (m.count_ones() - high) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Level (-1 or +1) of factor `j` in combination `q`.
    pub fn level(&self, j: usize, q: usize) -> i8 {
        if q >> (self.k - 1 - j) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// The F×Q matrix whose row f is the generating vector g_f.
    pub fn generating_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.effects(), self.combinations(), |f, q| self.sign(f, q))
    }

    /// Coefficient vector b_q, the column of the generating matrix for combination `q`.
    pub fn coefficient_vector(&self, q: usize) -> DVector<f64> {
        DVector::from_fn(self.effects(), |f, _| self.sign(f, q))
    }

    /// Factor subset (zero-based factor indices) of effect `f`.
    pub fn effect_factors(&self, f: usize) -> &[usize] {
        &self.subsets[f]
    }

    /// Human-readable label such as `"1"`, `"1:2"` or `"1:2:3"`.
    pub fn effect_label(&self, f: usize) -> String {
        self.subsets[f]
            .iter()
            .map(|j| (j + 1).to_string())
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn effect_labels(&self) -> Vec<String> {
        (0..self.effects()).map(|f| self.effect_label(f)).collect()
    }

    /// Number of factors interacting in effect `f` (1 for a main effect).
    pub fn effect_order(&self, f: usize) -> usize {
        self.subsets[f].len()
    }
}

fn push_combinations(k: usize, size: usize, cur: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if cur.len() == size {
        out.push(cur.clone());
        return;
    }
    for j in start..k {
        cur.push(j);
        push_combinations(k, size, cur, j + 1, out);
        cur.pop();
    }
}

/// Fixed group sizes n_1..n_Q of a completely randomized factorial experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GroupSizes(Vec<usize>);

impl GroupSizes {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("group sizes must not be empty"));
        }
        if let Some((q, &n)) = sizes.iter().enumerate().find(|(_, &n)| n < 2) {
            return Err(Error::invalid(format!("group {} has size {n}; every group needs at least 2 units", q + 1)));
        }
        Ok(Self(sizes))
    }

    /// `q` groups sharing `total` units equally.
    pub fn equal(q: usize, total: usize) -> Result<Self> {
        if q == 0 || total % q != 0 {
            return Err(Error::invalid(format!("{total} units cannot be split equally into {q} groups")));
        }
        Self::new(vec![total / q; q])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_equal(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }

    pub fn check_matches(&self, s: &FactorialStructure) -> Result<()> {
        if self.0.len() != s.combinations() {
            return Err(Error::invalid(format!(
                "{} group sizes given for a design with {} treatment combinations",
                self.0.len(),
                s.combinations()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for GroupSizes {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GroupSizes> for Vec<usize> {
    fn from(g: GroupSizes) -> Self {
        g.0
    }
}

/// An ordered partition of `0..total` into nonempty blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::invalid(format!("tier {} is empty", b + 1)));
            }
            for &i in block {
                if i >= total {
                    return Err(Error::invalid(format!("index {} in tier {} is out of range 1..={total}", i + 1, b + 1)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {} appears in more than one tier", i + 1)));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {} is not assigned to any tier", i + 1)));
        }
        Ok(Self { blocks })
    }

    pub fn from_one_based(blocks: Vec<Vec<usize>>, total: usize) -> Result<Self> {
        let mut zero = Vec::with_capacity(blocks.len());
        for b in blocks {
            if b.contains(&0) {
                return Err(Error::invalid("tier indices are 1-based; 0 is not allowed"));
            }
            zero.push(b.into_iter().map(|i| i - 1).collect());
        }
        Self::new(zero, total)
    }

    pub fn single(total: usize) -> Self {
        Self { blocks: vec![(0..total).collect()] }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    pub fn count(&self) -> usize {
        self.blocks.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Indices in tier order.
    pub fn order(&self) -> Vec<usize> {
        self.blocks.concat()
    }

    /// Position ranges of each tier within [`Partition::order`].
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = start..start + b.len();
                start += b.len();
                r
            })
            .collect()
    }
}

/// Partition F_1..F_H of the factorial effects into tiers of decreasing importance.
pub type EffectTierPartition = Partition;
/// Partition of the L covariates into tiers x[1]..x[T].
pub type CovariateTierPartition = Partition;

impl Partition {
    /// One tier per interaction order: main effects, two-way interactions, and so on.
    pub fn by_effect_order(s: &FactorialStructure) -> Self {
        let blocks = (1..=s.factors())
            .map(|o| (0..s.effects()).filter(|&f| s.effect_order(f) == o).collect())
            .collect();
        Self { blocks }
    }

    /// Main effects in the first tier, every interaction in the second.
    pub fn main_effects_first(s: &FactorialStructure) -> Self {
        let (main, rest): (Vec<usize>, Vec<usize>) = (0..s.effects()).partition(|&f| s.effect_order(f) == 1);
        if rest.is_empty() {
            Self { blocks: vec![main] }
        } else {
            Self { blocks: vec![main, rest] }
        }
    }
}

/// Grouping of the (covariate tier, effect tier) cells into ordered balance tiers S_1..S_J.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierGrid {
    covariate_tiers: usize,
    effect_tiers: usize,
    cells: Vec<Vec<(usize, usize)>>,
}

impl TierGrid {
    /// Validates that the cells partition the T×H grid and respect the
    /// importance order: a cell dominated in both coordinates never sits in an
    /// earlier tier.
    pub fn new(covariate_tiers: usize, effect_tiers: usize, cells: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        if covariate_tiers == 0 || effect_tiers == 0 {
            return Err(Error::invalid("grid needs at least one covariate tier and one effect tier"));
        }
        let mut owner = vec![vec![None; effect_tiers]; covariate_tiers];
        for (j, group) in cells.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::invalid(format!("grid tier {} is empty", j + 1)));
            }
            for &(t, h) in group {
                if t >= covariate_tiers || h >= effect_tiers {
                    return Err(Error::invalid(format!("grid cell ({}, {}) is outside the grid", t + 1, h + 1)));
                }
                if owner[t][h].replace(j).is_some() {
                    return Err(Error::invalid(format!("grid cell ({}, {}) appears twice", t + 1, h + 1)));
                }
            }
        }
        for t in 0..covariate_tiers {
            for h in 0..effect_tiers {
                if owner[t][h].is_none() {
                    return Err(Error::invalid(format!("grid cell ({}, {}) is not covered", t + 1, h + 1)));
                }
            }
        }
        for t in 0..covariate_tiers {
            for h in 0..effect_tiers {
                let j = owner[t][h].unwrap();
                for t2 in t..covariate_tiers {
                    for h2 in h..effect_tiers {
                        if owner[t2][h2].unwrap() < j {
                            return Err(Error::invalid(format!(
                                "grid is not coherent: cell ({}, {}) precedes the more important cell ({}, {})",
                                t2 + 1,
                                h2 + 1,
                                t + 1,
                                h + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { covariate_tiers, effect_tiers, cells })
    }

    pub fn from_one_based(covariate_tiers: usize, effect_tiers: usize, cells: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        let mut zero = Vec::with_capacity(cells.len());
        for group in cells {
            let mut g = Vec::with_capacity(group.len());
            for (t, h) in group {
                if t == 0 || h == 0 {
                    return Err(Error::invalid("grid cells are 1-based; 0 is not allowed"));
                }
                g.push((t - 1, h - 1));
            }
            zero.push(g);
        }
        Self::new(covariate_tiers, effect_tiers, zero)
    }

    /// Triangular tiers: with J = min(T, H), tier j < J holds the cells with
    /// t + h = j + 1 (one-based) and tier J holds every remaining cell.
    pub fn triangular(covariate_tiers: usize, effect_tiers: usize) -> Result<Self> {
        let j_count = covariate_tiers.min(effect_tiers);
        let mut cells = vec![Vec::new(); j_count];
        for t in 0..covariate_tiers {
            for h in 0..effect_tiers {
                // zero-based t + h equals one-based (t + h) - 2
                let j = (t + h).min(j_count.saturating_sub(1));
                cells[j].push((t, h));
            }
        }
        Self::new(covariate_tiers, effect_tiers, cells)
    }

    pub fn covariate_tiers(&self) -> usize {
        self.covariate_tiers
    }

    pub fn effect_tiers(&self) -> usize {
        self.effect_tiers
    }

    pub fn tiers(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self, j: usize) -> &[(usize, usize)] {
        &self.cells[j]
    }

    pub fn all_cells(&self) -> &[Vec<(usize, usize)>] {
        &self.cells
    }

    /// λ_j = Σ L_t F_h over the cells of tier `j`.
    pub fn dimension(&self, j: usize, covariates: &CovariateTierPartition, effects: &EffectTierPartition) -> usize {
        self.cells[j]
            .iter()
            .map(|&(t, h)| covariates.block(t).len() * effects.block(h).len())
            .sum()
    }
}

/// Σ_q w(q) g_f(q) g_k(q) / n_q computed by grouping equal sizes first, so that
/// sign cancellations are exact when the design is balanced.
fn weighted_sign_gram(s: &FactorialStructure, sizes: &GroupSizes) -> DMatrix<f64> {
    let mut distinct: Vec<usize> = sizes.as_slice().to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let slot: Vec<usize> = sizes
        .as_slice()
        .iter()
        .map(|n| distinct.binary_search(n).unwrap())
        .collect();
    let f = s.effects();
    let mut out = DMatrix::zeros(f, f);
    let mut counts = vec![0i64; distinct.len()];
    for a in 0..f {
        for b in a..f {
            counts.iter_mut().for_each(|c| *c = 0);
            for q in 0..s.combinations() {
                counts[slot[q]] += (s.sign(a, q) * s.sign(b, q)) as i64;
            }
            let v: f64 = counts
                .iter()
                .zip(&distinct)
                .filter(|(c, _)| **c != 0)
                .map(|(&c, &n)| c as f64 / n as f64)
                .sum();
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    out
}

/// B̃ = 2^-2(K-1) Σ_q n_q^-1 b_q b_q'.
pub fn b_tilde(s: &FactorialStructure, sizes: &GroupSizes) -> Result<DMatrix<f64>> {
    sizes.check_matches(s)?;
    let scale = s.contrast_scale();
    Ok(weighted_sign_gram(s, sizes) * (scale * scale))
}

/// Effect coefficients orthogonalized across tiers, c_q = Ψ^-1 b_q.
#[derive(Debug, Clone)]
pub struct EffectOrthogonalization {
    partition: EffectTierPartition,
    order: Vec<usize>,
    ranges: Vec<Range<usize>>,
    /// Column q is c_q, rows in tier order.
    c: DMatrix<f64>,
    /// b_q = psi * c_q, rows in original effect order.
    psi: DMatrix<f64>,
    /// Block-diagonal C̃ in tier order.
    c_tilde: DMatrix<f64>,
    b_tilde: DMatrix<f64>,
}

impl EffectOrthogonalization {
    pub fn new(s: &FactorialStructure, sizes: &GroupSizes, partition: &EffectTierPartition) -> Result<Self> {
        let f = s.effects();
        if partition.total() != f {
            return Err(Error::invalid(format!(
                "effect tiers cover {} effects but the design has {f}",
                partition.total()
            )));
        }
        let bt = b_tilde(s, sizes)?;
        let order = partition.order();
        let ranges = partition.ranges();
        let b_tier = linalg::select(&bt, &order, &order);
        let g = s.generating_matrix();
        let g_tier = DMatrix::from_fn(f, s.combinations(), |i, q| g[(order[i], q)]);

        // A is unit lower-block-triangular with c = A b in tier order.
        let mut a = DMatrix::identity(f, f);
        let mut c_tilde = DMatrix::zeros(f, f);
        for (h, r) in ranges.iter().enumerate() {
            let cur: Vec<usize> = r.clone().collect();
            let diag = linalg::select(&b_tier, &cur, &cur);
            if h == 0 {
                c_tilde.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&diag);
                continue;
            }
            let prev: Vec<usize> = (0..r.start).collect();
            let prev_inv = linalg::spd_inverse(
                &linalg::select(&b_tier, &prev, &prev),
                &format!("effect-coefficient Gram matrix of tiers before tier {}", h + 1),
            )?;
            let coef = linalg::select(&b_tier, &cur, &prev) * prev_inv;
            let schur = &diag - &coef * linalg::select(&b_tier, &prev, &cur);
            c_tilde.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&linalg::symmetrize(&schur));
            a.view_mut((r.start, 0), (r.len(), r.start)).copy_from(&(-coef));
        }
        let c = &a * &g_tier;
        let psi_tier = a
            .clone()
            .solve_lower_triangular(&DMatrix::identity(f, f))
            .ok_or_else(|| Error::Singular { what: "tier transform".into(), condition: f64::INFINITY })?;
        let mut psi = DMatrix::zeros(f, f);
        for (i, &orig) in order.iter().enumerate() {
            psi.row_mut(orig).copy_from(&psi_tier.row(i));
        }
        Ok(Self { partition: partition.clone(), order, ranges, c, psi, c_tilde, b_tilde: bt })
    }

    pub fn partition(&self) -> &EffectTierPartition {
        &self.partition
    }

    pub fn tiers(&self) -> usize {
        self.ranges.len()
    }

    pub fn tier_size(&self, h: usize) -> usize {
        self.ranges[h].len()
    }

    /// Original effect indices in tier order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// All orthogonalized vectors as columns (rows in tier order).
    pub fn c_matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// The F_h×Q matrix whose column q is c_q[h].
    pub fn c_tier(&self, h: usize) -> DMatrix<f64> {
        let r = &self.ranges[h];
        self.c.rows(r.start, r.len()).into_owned()
    }

    pub fn c_vector(&self, q: usize) -> DVector<f64> {
        self.c.column(q).into_owned()
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// C̃ in tier order; its off-diagonal tier blocks are zero by construction.
    pub fn c_tilde(&self) -> &DMatrix<f64> {
        &self.c_tilde
    }

    pub fn c_tilde_block(&self, h: usize) -> DMatrix<f64> {
        let r = &self.ranges[h];
        self.c_tilde.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    pub fn b_tilde(&self) -> &DMatrix<f64> {
        &self.b_tilde
    }
}

/// Covariates with earlier tiers projected out of later ones.
///
/// Column positions are preserved; tier `t` columns of the result hold
/// e[t] = x[t] - S_{x[t],prev} S_{prev,prev}^-1 x[prev], with `prev` the union
/// of the earlier tiers. No centering is applied.
pub fn orthogonalize_covariates(x: &DMatrix<f64>, partition: &CovariateTierPartition) -> Result<DMatrix<f64>> {
    if partition.total() != x.ncols() {
        return Err(Error::invalid(format!(
            "covariate tiers cover {} columns but the data has {}",
            partition.total(),
            x.ncols()
        )));
    }
    let s = linalg::covariance(x);
    let mut e = x.clone();
    let mut prev: Vec<usize> = Vec::new();
    for (t, block) in partition.blocks().iter().enumerate() {
        if t > 0 {
            let inv = linalg::spd_inverse(
                &linalg::select(&s, &prev, &prev),
                &format!("degenerate covariates: covariance of tiers before tier {}", t + 1),
            )?;
            let coef = linalg::select(&s, block, &prev) * inv;
            let xp = linalg::select(x, &(0..x.nrows()).collect::<Vec<_>>(), &prev);
            let proj = xp * coef.transpose();
            for (k, &col) in block.iter().enumerate() {
                let v = x.column(col) - proj.column(k);
                e.set_column(col, &v);
            }
        }
        prev.extend_from_slice(block);
    }
    Ok(e)
}
