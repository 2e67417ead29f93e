//! Binary regression trees over a mixed-type covariate space.
//!
//! Trees live in an arena of slots. Leaves carry their node parameters, the
//! cached log spectrum and the sorted list of subjects they hold; internal
//! nodes carry a [`SplitRule`]. Every node also stores the region of
//! covariate space implied by the rules on its path, which bounds the
//! cutpoint grid used below it.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CovariateKind, TimeSeriesPanel};
use crate::spectrum::NodeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPriorForm {
    /// `gamma (1 + d)^-theta`
    #[default]
    Standard,
    /// `gamma^d`, requires `gamma < 1/2`
    Geometric,
}

/// How categorical rules are counted in enumeration and in `p_rule`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoricalRules {
    /// Every nonempty proper subset of the remaining levels as a left set
    /// (`2^q - 2` rules).
    #[default]
    Directed,
    /// One rule per two-block partition (`2^(q-1) - 1` rules); the left set
    /// always holds the lowest remaining level.
    Partitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreePriorConfig {
    pub gamma: f64,
    pub theta: f64,
    pub split_prior_form: SplitPriorForm,
    pub grid_size: usize,
    pub min_node_size: usize,
    pub categorical_rules: CategoricalRules,
}

impl Default for TreePriorConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            theta: 2.0,
            split_prior_form: SplitPriorForm::Standard,
            grid_size: 100,
            min_node_size: 5,
            categorical_rules: CategoricalRules::Directed,
        }
    }
}

impl TreePriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::Config(format!("theta = {} must be nonnegative", self.theta)));
        }
        if self.split_prior_form == SplitPriorForm::Geometric && self.gamma >= 0.5 {
            return Err(Error::Config(format!(
                "geometric split prior needs gamma < 1/2, got {}",
                self.gamma
            )));
        }
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if self.min_node_size == 0 {
            return Err(Error::Config("min_node_size must be positive".into()));
        }
        Ok(())
    }
}

/// Prior probability that a node at `depth` splits.
pub fn p_split(depth: usize, config: &TreePriorConfig) -> Result<f64> {
    match config.split_prior_form {
        SplitPriorForm::Standard => Ok(config.gamma * (1.0 + depth as f64).powf(-config.theta)),
        SplitPriorForm::Geometric => {
            if config.gamma >= 0.5 {
                return Err(Error::Config(format!(
                    "geometric split prior needs gamma < 1/2, got {}",
                    config.gamma
                )));
            }
            Ok(config.gamma.powi(depth as i32))
        }
    }
}

/// `log(1 - p_split)` for a leaf; a leaf that admits no rule cannot split and
/// contributes 0.
pub fn log_leaf_prior(depth: usize, splittable: bool, config: &TreePriorConfig) -> f64 {
    if splittable {
        (-p_split(depth, config).expect("validated config")).ln_1p()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SplitRule {
    /// Values `< cutpoint` go left.
    Ordered { covariate: usize, cutpoint: f64 },
    /// Levels whose bit is set in `left_levels` go left.
    Categorical { covariate: usize, left_levels: u64 },
}

impl SplitRule {
    pub fn covariate(&self) -> usize {
        match self {
            SplitRule::Ordered { covariate, .. } | SplitRule::Categorical { covariate, .. } => *covariate,
        }
    }

    #[inline]
    pub fn goes_left(&self, omega: &[f64]) -> bool {
        match *self {
            SplitRule::Ordered { covariate, cutpoint } => omega[covariate] < cutpoint,
            SplitRule::Categorical { covariate, left_levels } => (left_levels >> (omega[covariate] as u32)) & 1 == 1,
        }
    }
}

/// Admissible part of one covariate's domain at a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Constraint {
    Interval { lo: f64, hi: f64 },
    Levels(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegion(pub Vec<Constraint>);

impl NodeRegion {
    /// Regions of the two children produced by `rule`.
    pub fn split(&self, rule: &SplitRule) -> (NodeRegion, NodeRegion) {
        let mut left = self.clone();
        let mut right = self.clone();
        match *rule {
            SplitRule::Ordered { covariate, cutpoint } => {
                if let Constraint::Interval { lo, hi } = self.0[covariate] {
                    left.0[covariate] = Constraint::Interval { lo, hi: cutpoint };
                    right.0[covariate] = Constraint::Interval { lo: cutpoint, hi };
                }
            }
            SplitRule::Categorical { covariate, left_levels } => {
                if let Constraint::Levels(mask) = self.0[covariate] {
                    left.0[covariate] = Constraint::Levels(mask & left_levels);
                    right.0[covariate] = Constraint::Levels(mask & !left_levels);
                }
            }
        }
        (left, right)
    }
}

/// Covariate matrix plus the kinds and root ranges needed to build rules.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpace {
    kinds: Vec<CovariateKind>,
    rows: Vec<Vec<f64>>,
    columns: Vec<Vec<f64>>,
    root: NodeRegion,
}

impl CovariateSpace {
    pub fn new(kinds: Vec<CovariateKind>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = kinds.len();
        if p == 0 || rows.is_empty() {
            return Err(Error::Dimension("covariate space needs P >= 1 and L >= 1".into()));
        }
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension(format!("covariate rows must have {p} entries")));
        }
        let columns: Vec<Vec<f64>> = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let root = NodeRegion(
            kinds
                .iter()
                .zip(&columns)
                .map(|(kind, col)| match kind {
                    CovariateKind::Categorical { levels } => Constraint::Levels((1u64 << levels.len()) - 1),
                    _ => Constraint::Interval {
                        lo: col.iter().copied().fold(f64::INFINITY, f64::min),
                        hi: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    },
                })
                .collect(),
        );
        Ok(Self {
            kinds,
            rows,
            columns,
            root,
        })
    }

    pub fn from_panel(panel: &TimeSeriesPanel) -> Result<Self> {
        let kinds = panel.schema().covariates.iter().map(|c| c.kind.clone()).collect();
        Self::new(kinds, panel.covariates().to_vec())
    }

    pub fn n_covariates(&self) -> usize {
        self.kinds.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.rows.len()
    }

    pub fn kinds(&self) -> &[CovariateKind] {
        &self.kinds
    }

    pub fn row(&self, subject: usize) -> &[f64] {
        &self.rows[subject]
    }

    pub fn column(&self, covariate: usize) -> &[f64] {
        &self.columns[covariate]
    }

    pub fn root_region(&self) -> &NodeRegion {
        &self.root
    }
}

/// Evenly spaced interior grid of `[lo, hi]`.
pub fn cutpoint_grid(lo: f64, hi: f64, grid_size: usize) -> Vec<f64> {
    if !(hi > lo) {
        return Vec::new();
    }
    (1..=grid_size).map(|i| grid_point(lo, hi, grid_size, i)).collect()
}

#[inline]
fn grid_point(lo: f64, hi: f64, grid_size: usize, i: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (grid_size + 1) as f64
}

/// Number of grid points `c` with `a < c <= b`.
fn grid_count_in(lo: f64, hi: f64, grid_size: usize, a: f64, b: f64) -> usize {
    if !(hi > lo) {
        return 0;
    }
    // First index in 1..=grid_size whose point exceeds `x`.
    let first_above = |x: f64| {
        let (mut l, mut r) = (1, grid_size + 1);
        while l < r {
            let mid = (l + r) / 2;
            if grid_point(lo, hi, grid_size, mid) <= x {
                l = mid + 1;
            } else {
                r = mid;
            }
        }
        l
    };
    first_above(b).saturating_sub(first_above(a))
}

/// Values `(v[m-1], v[n-m])` of the sorted subject values: a cutpoint keeps at
/// least `m` subjects on each side iff it lies in `(v[m-1], v[n-m]]`.
fn size_window(values: &mut [f64], m: usize) -> Option<(f64, f64)> {
    let n = values.len();
    if n < 2 * m {
        return None;
    }
    let (_, lo, _) = values.select_nth_unstable_by(m - 1, f64::total_cmp);
    let lo = *lo;
    let (_, hi, _) = values.select_nth_unstable_by(n - m, f64::total_cmp);
    let hi = *hi;
    (lo < hi).then_some((lo, hi))
}

fn level_counts(space: &CovariateSpace, covariate: usize, subjects: &[usize]) -> [usize; 64] {
    let mut counts = [0usize; 64];
    let col = space.column(covariate);
    for &l in subjects {
        counts[col[l] as usize] += 1;
    }
    counts
}

fn for_each_level_subset(mask: u64, rules: CategoricalRules, mut f: impl FnMut(u64)) {
    if mask.count_ones() < 2 {
        return;
    }
    let lowest = mask & mask.wrapping_neg();
    // Ascending enumeration of the submasks of `mask`.
    let mut sub: u64 = 0;
    loop {
        sub = sub.wrapping_sub(mask) & mask;
        if sub == 0 || sub == mask {
            break;
        }
        if rules == CategoricalRules::Directed || sub & lowest != 0 {
            f(sub);
        }
    }
}

/// Rules on `covariate` available at a node, after the minimum-size filter.
pub fn enumerate_cutpoints(
    covariate: usize,
    space: &CovariateSpace,
    config: &TreePriorConfig,
    region: &NodeRegion,
    subjects: &[usize],
) -> Vec<SplitRule> {
    let m = config.min_node_size;
    match region.0[covariate] {
        Constraint::Interval { lo, hi } => {
            let col = space.column(covariate);
            let mut values: Vec<f64> = subjects.iter().map(|&l| col[l]).collect();
            let Some((a, b)) = size_window(&mut values, m) else {
                return Vec::new();
            };
            cutpoint_grid(lo, hi, config.grid_size)
                .into_iter()
                .filter(|&c| a < c && c <= b)
                .map(|cutpoint| SplitRule::Ordered { covariate, cutpoint })
                .collect()
        }
        Constraint::Levels(mask) => {
            let counts = level_counts(space, covariate, subjects);
            let n = subjects.len();
            let mut out = Vec::new();
            for_each_level_subset(mask, config.categorical_rules, |sub| {
                let left: usize = (0..64).filter(|i| sub >> i & 1 == 1).map(|i| counts[i]).sum();
                if left >= m && n - left >= m {
                    out.push(SplitRule::Categorical {
                        covariate,
                        left_levels: sub,
                    });
                }
            });
            out
        }
    }
}

/// Number of rules [`enumerate_cutpoints`] would return.
pub fn count_cutpoints(
    covariate: usize,
    space: &CovariateSpace,
    config: &TreePriorConfig,
    region: &NodeRegion,
    subjects: &[usize],
) -> usize {
    count_cutpoints_with(covariate, space, config, region, subjects, &mut Vec::new())
}

fn count_cutpoints_with(
    covariate: usize,
    space: &CovariateSpace,
    config: &TreePriorConfig,
    region: &NodeRegion,
    subjects: &[usize],
    scratch: &mut Vec<f64>,
) -> usize {
    match region.0[covariate] {
        Constraint::Interval { lo, hi } => {
            let col = space.column(covariate);
            scratch.clear();
            scratch.extend(subjects.iter().map(|&l| col[l]));
            let Some((a, b)) = size_window(scratch, config.min_node_size) else {
                return 0;
            };
            grid_count_in(lo, hi, config.grid_size, a, b)
        }
        Constraint::Levels(_) => enumerate_cutpoints(covariate, space, config, region, subjects).len(),
    }
}

/// Per-covariate rule counts at a node; zero marks an inadmissible covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleCounts(pub Vec<usize>);

impl RuleCounts {
    pub fn at(space: &CovariateSpace, config: &TreePriorConfig, region: &NodeRegion, subjects: &[usize]) -> Self {
        let mut scratch = Vec::with_capacity(subjects.len());
        RuleCounts(
            (0..space.n_covariates())
                .map(|p| count_cutpoints_with(p, space, config, region, subjects, &mut scratch))
                .collect(),
        )
    }

    pub fn splittable(&self) -> bool {
        self.0.iter().any(|&c| c > 0)
    }

    pub fn n_admissible(&self) -> usize {
        self.0.iter().filter(|&&c| c > 0).count()
    }
}

/// Whether a node admits at least one rule; cheaper than [`RuleCounts::at`].
pub fn is_splittable(space: &CovariateSpace, config: &TreePriorConfig, region: &NodeRegion, subjects: &[usize]) -> bool {
    if subjects.len() < 2 * config.min_node_size {
        return false;
    }
    let mut scratch = Vec::with_capacity(subjects.len());
    (0..space.n_covariates()).any(|p| count_cutpoints_with(p, space, config, region, subjects, &mut scratch) > 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProportionPrior {
    #[default]
    Uniform,
    Dirichlet,
}

/// Covariate selection probabilities `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProportions {
    pub prior: ProportionPrior,
    pub sigma: f64,
    /// `log s_p`; kept in log space since sparse Dirichlet draws underflow.
    log_weights: Vec<f64>,
}

impl SplitProportions {
    pub fn uniform(n_covariates: usize, prior: ProportionPrior, sigma: f64) -> Self {
        Self {
            prior,
            sigma,
            log_weights: vec![-(n_covariates as f64).ln(); n_covariates],
        }
    }

    pub fn from_weights(weights: &[f64], prior: ProportionPrior, sigma: f64) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !((total - 1.0).abs() < 1e-9) {
            return Err(Error::Config("split proportions must form a simplex".into()));
        }
        Ok(Self {
            prior,
            sigma,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.log_weights.len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// `log s_p - log sum_{q admissible} s_q`.
    pub fn log_selection_prob(&self, covariate: usize, counts: &RuleCounts) -> f64 {
        let lse = log_sum_exp(
            self.log_weights
                .iter()
                .zip(&counts.0)
                .filter(|(_, &c)| c > 0)
                .map(|(w, _)| *w),
        );
        self.log_weights[covariate] - lse
    }

    pub fn sample_covariate<R: Rng + ?Sized>(&self, counts: &RuleCounts, rng: &mut R) -> Option<usize> {
        let admissible: Vec<usize> = (0..self.n_covariates()).filter(|&p| counts.0[p] > 0).collect();
        if admissible.is_empty() {
            return None;
        }
        let max = admissible
            .iter()
            .map(|&p| self.log_weights[p])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Some(admissible[rng.random_range(0..admissible.len())]);
        }
        let w: Vec<f64> = admissible.iter().map(|&p| (self.log_weights[p] - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                return Some(admissible[i]);
            }
            u -= wi;
        }
        admissible.iter().rev().copied().zip(w.iter().rev()).find(|(_, w)| **w > 0.0).map(|(p, _)| p)
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log p_rule`: covariate selection probability times a uniform cutpoint.
pub fn rule_log_prob(rule: &SplitRule, counts: &RuleCounts, proportions: &SplitProportions) -> f64 {
    let p = rule.covariate();
    proportions.log_selection_prob(p, counts) - (counts.0[p] as f64).ln()
}

/// Draw a rule for a node: covariate by renormalised `s`, cutpoint uniform.
/// Returns the rule and its `log p_rule`.
pub fn sample_split_rule<R: Rng + ?Sized>(
    space: &CovariateSpace,
    config: &TreePriorConfig,
    region: &NodeRegion,
    subjects: &[usize],
    proportions: &SplitProportions,
    rng: &mut R,
) -> Result<(SplitRule, f64)> {
    let counts = RuleCounts::at(space, config, region, subjects);
    let p = proportions.sample_covariate(&counts, rng).ok_or(Error::NotSplittable)?;
    let rules = enumerate_cutpoints(p, space, config, region, subjects);
    let rule = rules[rng.random_range(0..rules.len())].clone();
    let lp = rule_log_prob(&rule, &counts, proportions);
    Ok((rule, lp))
}

/// Conjugate draw `s ~ Dirichlet(sigma/P + c_p)` from split counts `c`.
/// Uniform proportions are returned unchanged.
pub fn update_split_proportions<R: Rng + ?Sized>(
    current: &SplitProportions,
    counts: &[usize],
    rng: &mut R,
) -> SplitProportions {
    if current.prior == ProportionPrior::Uniform {
        return current.clone();
    }
    let p = current.n_covariates();
    let base = current.sigma / p as f64;
    // log Gamma(a) = log Gamma(a + 1) + log(U) / a
    let log_g: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let a = base + c as f64;
            let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random();
            g.ln() + u.ln() / a
        })
        .collect();
    let lse = log_sum_exp(log_g.iter().copied());
    SplitProportions {
        prior: current.prior,
        sigma: current.sigma,
        log_weights: log_g.iter().map(|v| v - lse).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub params: NodeParams,
    pub log_spectrum: Vec<f64>,
    /// Sorted subject indices.
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf(Leaf),
    Internal { rule: SplitRule, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub depth: usize,
    pub region: NodeRegion,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf(_))
    }

    pub fn leaf(&self) -> Option<&Leaf> {
        match &self.kind {
            NodeKind::Leaf(l) => Some(l),
            NodeKind::Internal { .. } => None,
        }
    }
}

/// Serializable form of a tree without subjects or caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub nodes: Vec<Option<NodeRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub parent: Option<usize>,
    pub depth: usize,
    #[serde(flatten)]
    pub kind: NodeRecordKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum NodeRecordKind {
    Leaf { params: NodeParams },
    Internal { rule: SplitRule, left: usize, right: usize },
}

impl TreeRecord {
    /// Terminal slot reached by `omega`.
    pub fn assign(&self, omega: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id].as_ref().expect("live node").kind {
                NodeRecordKind::Leaf { .. } => return id,
                NodeRecordKind::Internal { rule, left, right } => {
                    id = if rule.goes_left(omega) { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_params(&self, id: usize) -> &NodeParams {
        match &self.nodes[id].as_ref().expect("live node").kind {
            NodeRecordKind::Leaf { params } => params,
            NodeRecordKind::Internal { .. } => panic!("slot {id} is not a leaf"),
        }
    }

    pub fn live(&self) -> impl Iterator<Item = (usize, &NodeRecord)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.as_ref().map(|n| (i, n)))
    }

    pub fn n_nodes(&self) -> usize {
        self.live().count()
    }

    pub fn n_leaves(&self) -> usize {
        self.live().filter(|(_, n)| matches!(n.kind, NodeRecordKind::Leaf { .. })).count()
    }

    pub fn split_covariates(&self) -> impl Iterator<Item = usize> + '_ {
        self.live().filter_map(|(_, n)| match &n.kind {
            NodeRecordKind::Internal { rule, .. } => Some(rule.covariate()),
            NodeRecordKind::Leaf { .. } => None,
        })
    }
}

/// A binary tree whose leaves partition the subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Option<Node>>,
}

impl Tree {
    pub const ROOT: usize = 0;

    pub fn stump(space: &CovariateSpace, params: NodeParams, log_spectrum: Vec<f64>) -> Self {
        let root = Node {
            parent: None,
            depth: 0,
            region: space.root_region().clone(),
            kind: NodeKind::Leaf(Leaf {
                params,
                log_spectrum,
                subjects: (0..space.n_subjects()).collect(),
            }),
        };
        Self { nodes: vec![Some(root)] }
    }

    pub fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("live node")
    }

    pub fn leaf(&self, id: usize) -> &Leaf {
        self.node(id).leaf().expect("leaf node")
    }

    pub fn leaf_mut(&mut self, id: usize) -> &mut Leaf {
        match &mut self.node_mut(id).kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Internal { .. } => panic!("slot {id} is not a leaf"),
        }
    }

    pub fn live(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.as_ref().map(|n| (i, n)))
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.live().filter(|(_, n)| n.is_leaf()).map(|(i, _)| i).collect()
    }

    pub fn internals(&self) -> Vec<usize> {
        self.live().filter(|(_, n)| !n.is_leaf()).map(|(i, _)| i).collect()
    }

    /// Internal nodes whose two children are both leaves.
    pub fn prunable(&self) -> Vec<usize> {
        self.live()
            .filter(|(_, n)| match n.kind {
                NodeKind::Internal { left, right, .. } => self.node(left).is_leaf() && self.node(right).is_leaf(),
                NodeKind::Leaf(_) => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.live().count()
    }

    pub fn n_leaves(&self) -> usize {
        self.live().filter(|(_, n)| n.is_leaf()).count()
    }

    pub fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.node(id).kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf(_) => None,
        }
    }

    pub fn rule(&self, id: usize) -> Option<&SplitRule> {
        match &self.node(id).kind {
            NodeKind::Internal { rule, .. } => Some(rule),
            NodeKind::Leaf(_) => None,
        }
    }

    /// Subjects below `id`, sorted.
    pub fn subjects(&self, id: usize) -> Vec<usize> {
        match &self.node(id).kind {
            NodeKind::Leaf(l) => l.subjects.clone(),
            NodeKind::Internal { left, right, .. } => {
                let mut s = self.subjects(*left);
                s.extend(self.subjects(*right));
                s.sort_unstable();
                s
            }
        }
    }

    /// Terminal node reached by `omega`.
    pub fn assign(&self, omega: &[f64]) -> usize {
        let mut id = Self::ROOT;
        loop {
            match &self.node(id).kind {
                NodeKind::Leaf(_) => return id,
                NodeKind::Internal { rule, left, right } => {
                    id = if rule.goes_left(omega) { *left } else { *right };
                }
            }
        }
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(i) = self.nodes.iter().position(Option::is_none) {
            self.nodes[i] = Some(node);
            i
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }

    /// Partition of a subject list by `rule`.
    pub fn partition(space: &CovariateSpace, rule: &SplitRule, subjects: &[usize]) -> (Vec<usize>, Vec<usize>) {
        subjects.iter().partition(|&&l| rule.goes_left(space.row(l)))
    }

    /// Turn leaf `id` into an internal node with two new leaves.
    pub fn split_leaf(&mut self, id: usize, rule: SplitRule, left: Leaf, right: Leaf) -> (usize, usize) {
        let node = self.node(id);
        assert!(node.is_leaf(), "split_leaf on internal node {id}");
        let depth = node.depth + 1;
        let (lr, rr) = node.region.split(&rule);
        let l = self.alloc(Node {
            parent: Some(id),
            depth,
            region: lr,
            kind: NodeKind::Leaf(left),
        });
        let r = self.alloc(Node {
            parent: Some(id),
            depth,
            region: rr,
            kind: NodeKind::Leaf(right),
        });
        self.node_mut(id).kind = NodeKind::Internal { rule, left: l, right: r };
        (l, r)
    }

    /// Replace internal `id` and its two leaf children by one leaf.
    pub fn prune(&mut self, id: usize, params: NodeParams, log_spectrum: Vec<f64>) {
        let (l, r) = self.children(id).expect("prune on a leaf");
        let mut subjects = self.leaf(l).subjects.clone();
        subjects.extend_from_slice(&self.leaf(r).subjects);
        subjects.sort_unstable();
        self.nodes[l] = None;
        self.nodes[r] = None;
        self.node_mut(id).kind = NodeKind::Leaf(Leaf {
            params,
            log_spectrum,
            subjects,
        });
    }

    /// Replace the rule of internal `id` (two leaf children) and its leaves.
    pub fn change_rule(&mut self, id: usize, rule: SplitRule, left: Leaf, right: Leaf) {
        let (l, r) = self.children(id).expect("change on a leaf");
        let (lr, rr) = self.node(id).region.split(&rule);
        {
            let n = self.node_mut(l);
            n.region = lr;
            n.kind = NodeKind::Leaf(left);
        }
        {
            let n = self.node_mut(r);
            n.region = rr;
            n.kind = NodeKind::Leaf(right);
        }
        if let NodeKind::Internal { rule: old, .. } = &mut self.node_mut(id).kind {
            *old = rule;
        }
    }

    /// Log prior of the structure: `log(1 - p_split)` over leaves (zero for
    /// leaves admitting no rule) plus `log p_split + log p_rule` over
    /// internal nodes.
    pub fn log_prior(&self, space: &CovariateSpace, proportions: &SplitProportions, config: &TreePriorConfig) -> f64 {
        let mut total = 0.0;
        for (id, node) in self.live() {
            let subjects = self.subjects(id);
            match &node.kind {
                NodeKind::Leaf(_) => {
                    let splittable = is_splittable(space, config, &node.region, &subjects);
                    total += log_leaf_prior(node.depth, splittable, config);
                }
                NodeKind::Internal { rule, .. } => {
                    let counts = RuleCounts::at(space, config, &node.region, &subjects);
                    total += p_split(node.depth, config).expect("validated config").ln();
                    total += rule_log_prob(rule, &counts, proportions);
                }
            }
        }
        total
    }

    /// Number of internal nodes splitting on each covariate.
    pub fn split_counts(&self, n_covariates: usize) -> Vec<usize> {
        let mut c = vec![0; n_covariates];
        for (_, n) in self.live() {
            if let NodeKind::Internal { rule, .. } = &n.kind {
                c[rule.covariate()] += 1;
            }
        }
        c
    }

    pub fn to_record(&self) -> TreeRecord {
        TreeRecord {
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    n.as_ref().map(|n| NodeRecord {
                        parent: n.parent,
                        depth: n.depth,
                        kind: match &n.kind {
                            NodeKind::Leaf(l) => NodeRecordKind::Leaf { params: l.params.clone() },
                            NodeKind::Internal { rule, left, right } => NodeRecordKind::Internal {
                                rule: rule.clone(),
                                left: *left,
                                right: *right,
                            },
                        },
                    })
                })
                .collect(),
        }
    }

    /// Rebuild a tree from its record, recomputing regions, subject sets and
    /// leaf spectra.
    pub fn from_record(
        record: &TreeRecord,
        space: &CovariateSpace,
        log_spectrum: impl Fn(&NodeParams) -> Vec<f64>,
    ) -> Result<Self> {
        let n = record.nodes.len();
        if n == 0 || record.nodes[0].is_none() {
            return Err(Error::CheckpointMismatch("tree record has no root".into()));
        }
        let mut nodes: Vec<Option<Node>> = vec![None; n];
        let mut stack = vec![(0usize, space.root_region().clone(), (0..space.n_subjects()).collect::<Vec<_>>())];
        let mut seen = 0;
        while let Some((id, region, subjects)) = stack.pop() {
            let rec = record
                .nodes
                .get(id)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::CheckpointMismatch(format!("dangling child slot {id}")))?;
            seen += 1;
            let kind = match &rec.kind {
                NodeRecordKind::Leaf { params } => {
                    params.validate()?;
                    NodeKind::Leaf(Leaf {
                        params: params.clone(),
                        log_spectrum: log_spectrum(params),
                        subjects,
                    })
                }
                NodeRecordKind::Internal { rule, left, right } => {
                    if rule.covariate() >= space.n_covariates() {
                        return Err(Error::CheckpointMismatch(format!("rule on unknown covariate {}", rule.covariate())));
                    }
                    let (lr, rr) = region.split(rule);
                    let (ls, rs) = Tree::partition(space, rule, &subjects);
                    stack.push((*right, rr, rs));
                    stack.push((*left, lr, ls));
                    NodeKind::Internal {
                        rule: rule.clone(),
                        left: *left,
                        right: *right,
                    }
                }
            };
            nodes[id] = Some(Node {
                parent: rec.parent,
                depth: rec.depth,
                region,
                kind,
            });
        }
        if seen != record.nodes.iter().filter(|n| n.is_some()).count() {
            return Err(Error::CheckpointMismatch("tree record has unreachable nodes".into()));
        }
        Ok(Self { nodes })
    }

    /// Check structural invariants; used by tests and debug runs.
    pub fn check(&self, space: &CovariateSpace) -> Result<()> {
        let mut all: Vec<usize> = Vec::new();
        for (id, node) in self.live() {
            match &node.kind {
                NodeKind::Leaf(leaf) => {
                    for &l in &leaf.subjects {
                        if self.assign(space.row(l)) != id {
                            return Err(Error::Dimension(format!("subject {l} misplaced in leaf {id}")));
                        }
                    }
                    all.extend_from_slice(&leaf.subjects);
                }
                NodeKind::Internal { left, right, .. } => {
                    for c in [*left, *right] {
                        let child = self.node(c);
                        if child.parent != Some(id) || child.depth != node.depth + 1 {
                            return Err(Error::Dimension(format!("bad link {id} -> {c}")));
                        }
                    }
                }
            }
        }
        all.sort_unstable();
        if all != (0..space.n_subjects()).collect::<Vec<_>>() {
            return Err(Error::Dimension("leaves do not partition the subjects".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> NodeParams {
        NodeParams::new(0.0, vec![0.0; 2], 1.0, 1.0).unwrap()
    }

    fn leaf(subjects: Vec<usize>) -> Leaf {
        Leaf {
            params: params(),
            log_spectrum: vec![0.0; 3],
            subjects,
        }
    }

    fn cont_space(rows: Vec<Vec<f64>>) -> CovariateSpace {
        let p = rows[0].len();
        CovariateSpace::new(vec![CovariateKind::Continuous; p], rows).unwrap()
    }

    #[test]
    fn p_split_values() {
        let c = TreePriorConfig::default();
        assert!((p_split(0, &c).unwrap() - 0.95).abs() < 1e-15);
        assert!((p_split(1, &c).unwrap() - 0.2375).abs() < 1e-15);
        let g = TreePriorConfig {
            gamma: 0.25,
            split_prior_form: SplitPriorForm::Geometric,
            ..c
        };
        assert!((p_split(2, &g).unwrap() - 0.0625).abs() < 1e-15);
        let bad = TreePriorConfig {
            split_prior_form: SplitPriorForm::Geometric,
            ..c
        };
        assert!(p_split(1, &bad).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_and_degenerate_nodes() {
        let g = cutpoint_grid(0.0, 1.0, 4);
        for (x, y) in g.iter().zip([0.2, 0.4, 0.6, 0.8]) {
            assert!((x - y).abs() < 1e-15);
        }
        let space = cont_space(vec![vec![0.5]; 20]);
        let cfg = TreePriorConfig::default();
        let all: Vec<usize> = (0..20).collect();
        assert!(enumerate_cutpoints(0, &space, &cfg, space.root_region(), &all).is_empty());
    }

    #[test]
    fn ordered_candidates_respect_min_size() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let space = cont_space(rows);
        let cfg = TreePriorConfig {
            grid_size: 8,
            min_node_size: 3,
            ..Default::default()
        };
        let all: Vec<usize> = (0..10).collect();
        let rules = enumerate_cutpoints(0, &space, &cfg, space.root_region(), &all);
        // grid is 1..=8; a rule needs 3 <= #{v < c} <= 7
        let cuts: Vec<f64> = rules
            .iter()
            .map(|r| match r {
                SplitRule::Ordered { cutpoint, .. } => *cutpoint,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(cuts, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(count_cutpoints(0, &space, &cfg, space.root_region(), &all), 5);
    }

    #[test]
    fn count_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = rng.random_range(4..60);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random();
                    vec![if trial % 3 == 0 { (x * 4.0).floor() } else { x }]
                })
                .collect();
            let space = cont_space(rows);
            let cfg = TreePriorConfig {
                grid_size: rng.random_range(1..40),
                min_node_size: rng.random_range(1..6),
                ..Default::default()
            };
            let all: Vec<usize> = (0..n).collect();
            let cut = SplitRule::Ordered {
                covariate: 0,
                cutpoint: rng.random(),
            };
            let (lreg, _) = space.root_region().split(&cut);
            let (ls, _) = Tree::partition(&space, &cut, &all);
            for (region, subjects) in [(space.root_region().clone(), all.clone()), (lreg, ls)] {
                assert_eq!(
                    count_cutpoints(0, &space, &cfg, &region, &subjects),
                    enumerate_cutpoints(0, &space, &cfg, &region, &subjects).len()
                );
            }
        }
    }

    #[test]
    fn categorical_subsets() {
        let kinds = vec![CovariateKind::Categorical {
            levels: vec!["a".into(), "b".into(), "c".into()],
        }];
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64]).collect();
        let space = CovariateSpace::new(kinds, rows).unwrap();
        let all: Vec<usize> = (0..30).collect();
        let cfg = TreePriorConfig::default();
        let directed = enumerate_cutpoints(0, &space, &cfg, space.root_region(), &all);
        assert_eq!(directed.len(), 6);
        let part = TreePriorConfig {
            categorical_rules: CategoricalRules::Partitions,
            ..cfg
        };
        assert_eq!(enumerate_cutpoints(0, &space, &part, space.root_region(), &all).len(), 3);
        // left {a}: region of the right child keeps {b, c}
        let rule = SplitRule::Categorical {
            covariate: 0,
            left_levels: 0b001,
        };
        let (l, r) = space.root_region().split(&rule);
        assert_eq!(l.0[0], Constraint::Levels(0b001));
        assert_eq!(r.0[0], Constraint::Levels(0b110));
        assert!(enumerate_cutpoints(0, &space, &cfg, &l, &all).is_empty());
    }

    #[test]
    fn assign_simple() {
        let rows = vec![vec![0.3, 0.0], vec![0.7, 0.0]];
        let space = cont_space(rows);
        let mut t = Tree::stump(&space, params(), vec![0.0; 3]);
        assert_eq!(t.assign(&[0.1, 0.9]), Tree::ROOT);
        let rule = SplitRule::Ordered {
            covariate: 0,
            cutpoint: 0.5,
        };
        let (l, r) = t.split_leaf(0, rule, leaf(vec![0]), leaf(vec![1]));
        assert_eq!(t.assign(&[0.3, 0.0]), l);
        assert_eq!(t.assign(&[0.5, 0.0]), r);
        t.check(&space).unwrap();
        assert_eq!(t.prunable(), vec![0]);
        t.prune(0, params(), vec![0.0; 3]);
        assert_eq!(t.n_nodes(), 1);
        assert_eq!(t.leaf(0).subjects, vec![0, 1]);
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random(), rng.random()]).collect();
        let space = cont_space(rows);
        let cfg = TreePriorConfig::default();
        let props = SplitProportions::uniform(2, ProportionPrior::Uniform, 1.0);
        let mut t = Tree::stump(&space, params(), vec![0.0; 3]);
        for _ in 0..4 {
            let leaves = t.leaves();
            let id = leaves[rng.random_range(0..leaves.len())];
            let subjects = t.leaf(id).subjects.clone();
            let region = t.node(id).region.clone();
            if let Ok((rule, _)) = sample_split_rule(&space, &cfg, &region, &subjects, &props, &mut rng) {
                let (ls, rs) = Tree::partition(&space, &rule, &subjects);
                t.split_leaf(id, rule, leaf(ls), leaf(rs));
            }
        }
        t.check(&space).unwrap();
        let rec = t.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: TreeRecord = serde_json::from_str(&json).unwrap();
        let rebuilt = Tree::from_record(&back, &space, |_| vec![0.0; 3]).unwrap();
        assert_eq!(rebuilt, t);
    }

    #[test]
    fn stump_prior() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 20.0]).collect();
        let space = cont_space(rows);
        let cfg = TreePriorConfig::default();
        let props = SplitProportions::uniform(1, ProportionPrior::Uniform, 1.0);
        let t = Tree::stump(&space, params(), vec![0.0; 3]);
        assert!((t.log_prior(&space, &props, &cfg) - 0.05f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_rule_single_covariate() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let space = cont_space(rows);
        let cfg = TreePriorConfig::default();
        let props = SplitProportions::uniform(1, ProportionPrior::Uniform, 1.0);
        let all: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (rule, _) = sample_split_rule(&space, &cfg, space.root_region(), &all, &props, &mut rng).unwrap();
            assert_eq!(rule.covariate(), 0);
        }
        let one: Vec<usize> = (0..4).collect();
        assert!(matches!(
            sample_split_rule(&space, &cfg, space.root_region(), &one, &props, &mut rng),
            Err(Error::NotSplittable)
        ));
    }

    #[test]
    fn uniform_proportions_unchanged() {
        let props = SplitProportions::uniform(3, ProportionPrior::Uniform, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = update_split_proportions(&props, &[4, 0, 1], &mut rng);
        assert_eq!(out, props);
        for w in out.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
