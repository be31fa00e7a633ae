//! Complete-octree geometry and parameter accounting.
//!
//! Nodes are numbered breadth-first: level `l` (1-based, root = 1) starts at
//! `(8^(l-1) - 1) / 7`, and within a level nodes follow the z-curve, so the
//! level-`l` ancestor of leaf `k` is `k >> 3·(L - l)` within its level.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::volume::{Region, Volume};

pub const BRANCHING: usize = 8;
pub const COORD_DIM: usize = 3;
pub const MAX_LEVELS: u32 = 5;
pub const MAX_WIDTH: u32 = u16::MAX as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub levels: u32,
    pub hyper_depth: u32,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            hyper_depth: 1,
        }
    }
}

impl TreeConfig {
    pub fn new(levels: u32, hyper_depth: u32) -> Result<Self, ConfigError> {
        let cfg = Self {
            levels,
            hyper_depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(ConfigError::Invalid(format!(
                "levels must be in 1..={MAX_LEVELS}, got {}",
                self.levels
            )));
        }
        if self.hyper_depth == 0 || self.hyper_depth > u8::MAX as u32 {
            return Err(ConfigError::Invalid(format!(
                "hyper depth must be in 1..=255, got {}",
                self.hyper_depth
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        (BRANCHING.pow(self.levels) - 1) / (BRANCHING - 1)
    }

    pub fn leaf_count(&self) -> usize {
        BRANCHING.pow(self.levels - 1)
    }

    pub fn nodes_at_level(&self, level: u32) -> usize {
        BRANCHING.pow(level - 1)
    }

    /// First breadth-first id on `level`.
    pub fn level_start(&self, level: u32) -> usize {
        (BRANCHING.pow(level - 1) - 1) / (BRANCHING - 1)
    }

    pub fn level_of(&self, node: usize) -> u32 {
        (1..=self.levels)
            .find(|&l| node < self.level_start(l) + self.nodes_at_level(l))
            .expect("node id out of range")
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        let level = self.level_of(node);
        if level == 1 {
            return None;
        }
        let j = node - self.level_start(level);
        Some(self.level_start(level - 1) + j / BRANCHING)
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node >= self.level_start(self.levels)
    }

    pub fn leaf_node(&self, leaf: usize) -> usize {
        self.level_start(self.levels) + leaf
    }

    /// Breadth-first id of the level-`level` ancestor of `leaf`.
    pub fn ancestor(&self, leaf: usize, level: u32) -> usize {
        self.level_start(level) + (leaf >> (3 * (self.levels - level)))
    }

    /// Root-to-leaf node ids.
    pub fn path(&self, leaf: usize) -> Vec<usize> {
        (1..=self.levels).map(|l| self.ancestor(leaf, l)).collect()
    }

    /// Leaves below `node`, as a range of leaf ordinals.
    pub fn descendant_leaves(&self, node: usize) -> std::ops::Range<usize> {
        let level = self.level_of(node);
        let j = node - self.level_start(level);
        let span = BRANCHING.pow(self.levels - level);
        j * span..(j + 1) * span
    }
}

/// Level of the lowest common ancestor of two leaves, i.e. the number of
/// hidden-layer segments their networks share.
pub fn shared_segment_count(i: usize, j: usize, levels: u32) -> u32 {
    (1..=levels)
        .take_while(|&l| {
            let shift = 3 * (levels - l);
            (i >> shift) == (j >> shift)
        })
        .count() as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterLevelRatio {
    Uniform(f64),
    /// Entry `i` is the ratio of level `i + 2` to level `i + 1`.
    PerLevel(Vec<f64>),
}

impl InterLevelRatio {
    /// Ratio between `level` and `level - 1` (for `level >= 2`).
    pub fn between(&self, level: u32) -> f64 {
        match self {
            InterLevelRatio::Uniform(r) => *r,
            InterLevelRatio::PerLevel(v) => v[(level - 2) as usize],
        }
    }

    /// Value written into file headers; per-level vectors are recorded as NaN.
    pub fn header_value(&self) -> f32 {
        match self {
            InterLevelRatio::Uniform(r) => *r as f32,
            InterLevelRatio::PerLevel(_) => f32::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntraLevel {
    Even,
    Importance,
}

impl IntraLevel {
    pub fn code(self) -> u8 {
        match self {
            IntraLevel::Even => 0,
            IntraLevel::Importance => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(IntraLevel::Even),
            1 => Some(IntraLevel::Importance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    pub inter_level_ratio: InterLevelRatio,
    pub intra_level: IntraLevel,
    /// Raw-intensity threshold; only consulted in importance mode.
    pub importance_threshold: f64,
    pub floor_fraction: f64,
}

impl Default for AllocationPolicy {
    fn default() -> Self {
        Self {
            inter_level_ratio: InterLevelRatio::Uniform(1.0),
            intra_level: IntraLevel::Even,
            importance_threshold: 0.0,
            floor_fraction: 0.1,
        }
    }
}

impl AllocationPolicy {
    pub fn validate(&self, cfg: &TreeConfig) -> Result<(), ConfigError> {
        let ok = |r: f64| r.is_finite() && r > 0.0;
        match &self.inter_level_ratio {
            InterLevelRatio::Uniform(r) if !ok(*r) => {
                return Err(ConfigError::Invalid(format!(
                    "inter-level ratio must be positive, got {r}"
                )))
            }
            InterLevelRatio::PerLevel(v) => {
                if v.len() != cfg.levels.saturating_sub(1) as usize {
                    return Err(ConfigError::Invalid(format!(
                        "per-level ratios need {} entries, got {}",
                        cfg.levels - 1,
                        v.len()
                    )));
                }
                if let Some(r) = v.iter().find(|r| !ok(**r)) {
                    return Err(ConfigError::Invalid(format!(
                        "inter-level ratio must be positive, got {r}"
                    )));
                }
            }
            _ => {}
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "floor fraction must be in (0, 1], got {}",
                self.floor_fraction
            )));
        }
        Ok(())
    }

    /// Per-node budget multiplier at each level relative to the root.
    fn level_scales(&self, levels: u32) -> Vec<f64> {
        let mut scales = vec![1.0];
        for l in 2..=levels {
            let prev = *scales.last().unwrap();
            scales.push(prev * self.inter_level_ratio.between(l));
        }
        scales
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBudget {
    pub node_id: usize,
    pub level: u32,
    pub param_budget: u64,
    pub solved_width: u32,
}

/// Fraction of voxels per region whose raw intensity exceeds `threshold`.
pub fn importance_weights(volume: &Volume, regions: &[Region], threshold: f64) -> Vec<f64> {
    regions
        .iter()
        .map(|r| {
            let view = volume.region_view(r);
            let above = view.iter().filter(|&&v| f64::from(v) > threshold).count();
            above as f64 / r.voxel_count() as f64
        })
        .collect()
}

/// Splits `total` across nodes: per-node budgets follow `b_l = b_1·r^(l-1)`
/// with `b_1` maximal; in importance mode the leaf level total is then
/// re-split in proportion to `importance`, each leaf keeping at least
/// `floor_fraction` of the even share.
pub fn allocate_budgets(
    total: u64,
    cfg: &TreeConfig,
    policy: &AllocationPolicy,
    importance: Option<&[f64]>,
) -> Result<Vec<u64>, ConfigError> {
    cfg.validate()?;
    policy.validate(cfg)?;

    let scales = policy.level_scales(cfg.levels);
    let counts: Vec<u64> = (1..=cfg.levels)
        .map(|l| cfg.nodes_at_level(l) as u64)
        .collect();
    let denom: f64 = scales
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s * n as f64)
        .sum();
    let root = total as f64 / denom;
    let mut per_level: Vec<u64> = scales
        .iter()
        .map(|s| (root * s * (1.0 + 1e-12)).floor() as u64)
        .collect();
    // The epsilon above only absorbs representation error in r^l; undo any overshoot.
    while per_level.iter().zip(&counts).map(|(b, n)| b * n).sum::<u64>() > total {
        let l = (0..per_level.len())
            .rev()
            .find(|&l| per_level[l] > 0)
            .expect("positive sum implies a positive level");
        per_level[l] -= 1;
    }

    let mut budgets: Vec<u64> = (1..=cfg.levels)
        .flat_map(|l| std::iter::repeat_n(per_level[(l - 1) as usize], cfg.nodes_at_level(l)))
        .collect();

    if policy.intra_level == IntraLevel::Importance {
        let weights = importance.ok_or_else(|| {
            ConfigError::Invalid("importance allocation requires per-leaf weights".into())
        })?;
        if weights.len() != cfg.leaf_count() {
            return Err(ConfigError::Invalid(format!(
                "expected {} importance weights, got {}",
                cfg.leaf_count(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConfigError::Invalid(
                "importance weights must be finite and nonnegative".into(),
            ));
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            log::warn!("all importance weights are zero; falling back to even allocation");
        } else {
            let even = per_level[(cfg.levels - 1) as usize];
            let start = cfg.level_start(cfg.levels);
            let leaf_total = even * cfg.leaf_count() as u64;
            let shares = split_by_importance(leaf_total, even, policy.floor_fraction, weights);
            budgets[start..].copy_from_slice(&shares);
        }
    }
    Ok(budgets)
}

/// Floors every leaf at `floor_fraction·even`, splits the remainder in
/// proportion to `weights`, and hands leftover units to the largest
/// fractional parts so the sum is exactly `level_total`.
fn split_by_importance(level_total: u64, even: u64, floor_fraction: f64, weights: &[f64]) -> Vec<u64> {
    let k = weights.len();
    let floor = floor_fraction * even as f64;
    let spare = (level_total as f64 - floor * k as f64).max(0.0);
    let weight_sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|w| floor + spare * w / weight_sum)
        .collect();
    let mut shares: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = shares.iter().sum();
    let mut missing = level_total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        shares[i] += 1;
        missing -= 1;
    }
    shares
}

/// Learnable parameters owned by `node` at `width`, given its parent's width.
///
/// Root: input layer plus `hyper_depth` square layers. Other nodes: the
/// first hyper layer maps from the parent width, the rest are square.
/// Leaves additionally own the scalar output layer.
pub fn owned_params(cfg: &TreeConfig, node: usize, width: u32, parent_width: Option<u32>) -> u64 {
    let w = width as u64;
    let h = cfg.hyper_depth as u64;
    let mut n = match parent_width {
        None => COORD_DIM as u64 * w + w + h * (w * w + w),
        Some(p) => p as u64 * w + w + (h - 1) * (w * w + w),
    };
    if cfg.is_leaf(node) {
        n += w + 1;
    }
    n
}

fn widest_affordable(cfg: &TreeConfig, node: usize, budget: u64, parent_width: Option<u32>) -> Option<u32> {
    if owned_params(cfg, node, 1, parent_width) > budget {
        return None;
    }
    // Closed-form estimate from the leading quadratic/linear term, then step.
    let h = cfg.hyper_depth as f64;
    let lin = match parent_width {
        None => COORD_DIM as f64 + 1.0 + h,
        Some(p) => p as f64 + 1.0 + (h - 1.0),
    };
    let quad = match parent_width {
        None => h,
        Some(_) => h - 1.0,
    };
    let b = budget as f64;
    let est = if quad > 0.0 {
        ((lin * lin + 4.0 * quad * b).sqrt() - lin) / (2.0 * quad)
    } else {
        b / (lin + 1.0)
    };
    let mut w = (est.floor() as u32).clamp(1, MAX_WIDTH);
    while w > 1 && owned_params(cfg, node, w, parent_width) > budget {
        w -= 1;
    }
    while w < MAX_WIDTH && owned_params(cfg, node, w + 1, parent_width) <= budget {
        w += 1;
    }
    Some(w)
}

/// Greedy top-down: each node gets the largest width whose owned parameter
/// count fits its budget, parents before children.
pub fn solve_widths(budgets: &[u64], cfg: &TreeConfig) -> Result<Vec<NodeBudget>, ConfigError> {
    if budgets.len() != cfg.node_count() {
        return Err(ConfigError::Invalid(format!(
            "expected {} node budgets, got {}",
            cfg.node_count(),
            budgets.len()
        )));
    }
    let mut out: Vec<NodeBudget> = Vec::with_capacity(budgets.len());
    for (node, &budget) in budgets.iter().enumerate() {
        let parent_width = cfg.parent(node).map(|p| out[p].solved_width);
        let width = widest_affordable(cfg, node, budget, parent_width).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "node {node} budget {budget} cannot afford width 1 (needs {})",
                owned_params(cfg, node, 1, parent_width)
            ))
        })?;
        out.push(NodeBudget {
            node_id: node,
            level: cfg.level_of(node),
            param_budget: budget,
            solved_width: width,
        });
    }
    Ok(out)
}

/// Total learnable parameters for a full width assignment.
pub fn realized_params(cfg: &TreeConfig, widths: &[u32]) -> u64 {
    (0..cfg.node_count())
        .map(|n| owned_params(cfg, n, widths[n], cfg.parent(n).map(|p| widths[p])))
        .sum()
}

/// Tightens every node budget to its realized count and grows leaf widths
/// round-robin (z-curve order) with the unused remainder of `total`.
/// Only leaves grow, since a wider internal node would change its
/// children's costs. Each returned budget is exactly the node's owned count.
pub fn fill_slack(total: u64, cfg: &TreeConfig, nodes: &mut [NodeBudget]) {
    let widths: Vec<u32> = nodes.iter().map(|n| n.solved_width).collect();
    for (i, n) in nodes.iter_mut().enumerate() {
        n.param_budget = owned_params(cfg, i, widths[i], cfg.parent(i).map(|p| widths[p]));
    }
    let used: u64 = nodes.iter().map(|n| n.param_budget).sum();
    let mut pool = total.saturating_sub(used);
    let first_leaf = cfg.level_start(cfg.levels);
    loop {
        let mut grew = false;
        for node in first_leaf..cfg.node_count() {
            let parent_width = cfg.parent(node).map(|p| nodes[p].solved_width);
            let w = nodes[node].solved_width;
            if w >= MAX_WIDTH {
                continue;
            }
            let next = owned_params(cfg, node, w + 1, parent_width);
            let delta = next - nodes[node].param_budget;
            if delta <= pool {
                pool -= delta;
                nodes[node].param_budget = next;
                nodes[node].solved_width = w + 1;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
}

fn try_plan(
    total: u64,
    cfg: &TreeConfig,
    policy: &AllocationPolicy,
    importance: Option<&[f64]>,
) -> Result<Vec<NodeBudget>, ConfigError> {
    let budgets = allocate_budgets(total, cfg, policy, importance)?;
    let mut nodes = solve_widths(&budgets, cfg)?;
    fill_slack(total, cfg, &mut nodes);
    Ok(nodes)
}

/// Smallest total budget for which allocation and width solving succeed.
pub fn minimal_feasible_budget(
    cfg: &TreeConfig,
    policy: &AllocationPolicy,
    importance: Option<&[f64]>,
) -> Result<u64, ConfigError> {
    // Validation errors are not a feasibility question.
    allocate_budgets(0, cfg, policy, importance)?;
    let feasible = |t: u64| try_plan(t, cfg, policy, importance).is_ok();
    let mut hi = 1u64;
    while !feasible(hi) {
        hi = hi.checked_mul(2).ok_or_else(|| {
            ConfigError::Invalid("no feasible budget exists for this tree".into())
        })?;
        if hi > 1 << 48 {
            return Err(ConfigError::Invalid(
                "no feasible budget exists for this tree".into(),
            ));
        }
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Guard against non-monotone pockets just below the bisection result.
    Ok(hi)
}

/// Allocation, width solving and slack filling in one step. Infeasible
/// budgets report the smallest feasible total.
pub fn plan_tree(
    total: u64,
    cfg: &TreeConfig,
    policy: &AllocationPolicy,
    importance: Option<&[f64]>,
) -> Result<Vec<NodeBudget>, ConfigError> {
    allocate_budgets(total, cfg, policy, importance)?;
    try_plan(total, cfg, policy, importance).map_err(|_| ConfigError::InfeasibleBudget {
        budget: total,
        minimal: minimal_feasible_budget(cfg, policy, importance).unwrap_or(u64::MAX),
    })
}
