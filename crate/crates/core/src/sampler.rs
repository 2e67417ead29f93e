//! Bayesian backfitting over a forest of spectral trees.
//!
//! One sweep visits every tree in turn: it forms the residual log
//! periodogram against the other trees, attempts one reversible-jump move
//! (BIRTH, DEATH or CHANGE), refreshes the parameters of every leaf and folds
//! the new fit back into the running sum. Under the Dirichlet prior the
//! splitting proportions are redrawn once per sweep.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::panel::{periodogram, PanelSchema, TimeSeriesPanel};
use crate::rng::{stream, RngState, Substream};
use crate::spectrum::{
    find_mode, gibbs_update_tau, mh_update_coeffs, node_log_prior, CosineBasis, HalfTHyper, NodeData, NodeParams,
    TauUpdateForm, DEFAULT_N_BASIS, DEFAULT_SIGMA_ALPHA2,
};
use crate::tree::{
    is_splittable, log_leaf_prior, p_split, rule_log_prob, update_split_proportions, CovariateSpace, Leaf,
    ProportionPrior, RuleCounts, SplitProportions, Tree, TreePriorConfig, TreeRecord,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Birth,
    Death,
    Change,
}

impl MoveKind {
    pub const ALL: [MoveKind; 3] = [MoveKind::Birth, MoveKind::Death, MoveKind::Change];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoveProbs {
    pub birth: f64,
    pub death: f64,
    pub change: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        Self {
            birth: 0.25,
            death: 0.25,
            change: 0.5,
        }
    }
}

impl MoveProbs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.birth, self.death, self.change];
        if all.iter().any(|p| !(*p >= 0.0)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("move probabilities {all:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> MoveKind {
        let u: f64 = rng.random();
        if u < self.birth {
            MoveKind::Birth
        } else if u < self.birth + self.death {
            MoveKind::Death
        } else {
            MoveKind::Change
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_trees: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub moves: MoveProbs,
    pub tree: TreePriorConfig,
    pub half_t: HalfTHyper,
    pub n_basis: usize,
    pub sigma_alpha2: f64,
    pub tau2_rate: TauUpdateForm,
    pub split_prior: ProportionPrior,
    pub dirichlet_sigma: f64,
    /// First sweep at which Dirichlet proportions are redrawn; earlier sweeps
    /// keep them uniform. `None` starts halfway through burn-in.
    pub dirichlet_start: Option<usize>,
    /// Store the full fitted matrix every this many kept draws (0: never).
    pub fitted_every: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Recompute the fitted matrix from scratch after every sweep and fail on
    /// drift.
    pub check_fitted: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_trees: 5,
            n_iter: 10_000,
            burn_in: 5_000,
            thin: 1,
            seed: 1,
            moves: MoveProbs::default(),
            tree: TreePriorConfig::default(),
            half_t: HalfTHyper::default(),
            n_basis: DEFAULT_N_BASIS,
            sigma_alpha2: DEFAULT_SIGMA_ALPHA2,
            tau2_rate: TauUpdateForm::Conjugate,
            split_prior: ProportionPrior::Uniform,
            dirichlet_sigma: 1.0,
            dirichlet_start: None,
            fitted_every: 50,
            checkpoint_every: 0,
            check_fitted: false,
        }
    }
}

impl SamplerConfig {
    /// Parses a sampler document; missing keys take their defaults.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if !(self.sigma_alpha2 > 0.0) || !(self.dirichlet_sigma > 0.0) {
            return Err(Error::Config("sigma_alpha2 and dirichlet_sigma must be positive".into()));
        }
        self.moves.validate()?;
        self.tree.validate()?;
        self.half_t.validate()
    }

    pub fn n_kept(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn dirichlet_start(&self) -> usize {
        self.dirichlet_start.unwrap_or(self.burn_in / 2)
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Cumulative move and numerical bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveCounters {
    pub proposed: [u64; 3],
    pub accepted: [u64; 3],
    /// Move kind impossible on the current tree.
    pub skipped: [u64; 3],
    /// BIRTH picked a leaf admitting no rule.
    pub unsplittable: u64,
    /// A proposed child fell below the minimum node size.
    pub min_size_rejections: u64,
    /// A move needed a mode that could not be found.
    pub mode_failures: u64,
    pub coeff_proposed: u64,
    pub coeff_accepted: u64,
    pub coeff_skipped: u64,
    pub clamp_events: u64,
}

impl MoveCounters {
    pub fn acceptance_rate(&self, kind: MoveKind) -> f64 {
        let i = kind.index();
        let attempted = self.proposed[i] - self.skipped[i];
        if attempted == 0 {
            0.0
        } else {
            self.accepted[i] as f64 / attempted as f64
        }
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub mean_sq_residual: f64,
    pub mean_fitted: f64,
    pub nodes_per_tree: Vec<usize>,
    pub total_leaves: usize,
    pub accepted: [u64; 3],
    pub proposed: [u64; 3],
    pub clamp_events: u64,
    pub mode_failures: u64,
}

/// Draws, traces and running moments of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub config: SamplerConfig,
    pub subject_ids: Vec<String>,
    pub schema: PanelSchema,
    pub covariates: Vec<Vec<f64>>,
    pub freqs: Vec<f64>,
    pub log_periodogram: RowMatrix,
    /// Iteration number of each kept draw.
    pub kept_iterations: Vec<usize>,
    pub forests: Vec<Vec<TreeRecord>>,
    pub split_weights: Vec<Vec<f64>>,
    /// `(kept draw index, fitted matrix)` snapshots.
    pub fitted: Vec<(usize, RowMatrix)>,
    pub traces: Vec<TraceRow>,
    pub fitted_sum: RowMatrix,
    pub fitted_sq_sum: RowMatrix,
    pub counters: MoveCounters,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.forests.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn basis(&self) -> Result<CosineBasis> {
        CosineBasis::new(&self.freqs, self.config.n_basis, self.config.sigma_alpha2)
    }

    /// Posterior mean of the fitted log spectra, `L x N`.
    pub fn posterior_mean(&self) -> RowMatrix {
        let n = self.n_draws().max(1) as f64;
        let mut m = self.fitted_sum.clone();
        m.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Posterior variance of the fitted log spectra from the running moments.
    pub fn posterior_variance(&self) -> RowMatrix {
        let n = self.n_draws().max(1) as f64;
        let mut v = self.fitted_sq_sum.clone();
        for (out, s) in v.as_mut_slice().iter_mut().zip(self.fitted_sum.as_slice()) {
            let mean = s / n;
            *out = (*out / n - mean * mean).max(0.0);
        }
        v
    }
}

/// Immutable inputs of a chain.
#[derive(Debug, Clone)]
pub struct Model {
    pub space: CovariateSpace,
    pub basis: CosineBasis,
    pub log_pgram: RowMatrix,
    pub config: SamplerConfig,
}

impl Model {
    pub fn new(panel: &TimeSeriesPanel, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let pg = periodogram(panel)?;
        let basis = CosineBasis::new(&pg.freqs, config.n_basis, config.sigma_alpha2)?;
        Ok(Self {
            space: CovariateSpace::from_panel(panel)?,
            basis,
            log_pgram: pg.log_values,
            config,
        })
    }

    /// Model on a precomputed log periodogram.
    pub fn from_parts(space: CovariateSpace, freqs: &[f64], log_pgram: RowMatrix, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if log_pgram.rows() != space.n_subjects() || log_pgram.cols() != freqs.len() {
            return Err(Error::Dimension("log periodogram does not match subjects x frequencies".into()));
        }
        let basis = CosineBasis::new(freqs, config.n_basis, config.sigma_alpha2)?;
        Ok(Self {
            space,
            basis,
            log_pgram,
            config,
        })
    }

    fn leaf(&self, params: NodeParams, subjects: Vec<usize>) -> Leaf {
        let log_spectrum = self.basis.log_spectrum(params.alpha, &params.beta);
        Leaf {
            params,
            log_spectrum,
            subjects,
        }
    }
}

/// Mutable chain state.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub forest: Vec<Tree>,
    pub proportions: SplitProportions,
    pub fitted: RowMatrix,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub counters: MoveCounters,
}

impl SamplerState {
    /// Single-node trees with `alpha = mean(log I)/M`, `beta = 0`,
    /// `tau^2 = 1`, `a = 1`.
    pub fn initial(model: &Model, rng: ChaCha8Rng) -> Self {
        let cfg = &model.config;
        let alpha = model.log_pgram.mean() / cfg.n_trees as f64;
        let params = NodeParams {
            alpha,
            beta: vec![0.0; cfg.n_basis],
            tau2: 1.0,
            a: 1.0,
        };
        let spectrum = model.basis.log_spectrum(alpha, &params.beta);
        let forest: Vec<Tree> = (0..cfg.n_trees)
            .map(|_| Tree::stump(&model.space, params.clone(), spectrum.clone()))
            .collect();
        let fitted = full_fit(&forest, model.log_pgram.rows(), model.log_pgram.cols());
        Self {
            forest,
            proportions: SplitProportions::uniform(model.space.n_covariates(), cfg.split_prior, cfg.dirichlet_sigma),
            fitted,
            rng,
            iteration: 0,
            counters: MoveCounters::default(),
        }
    }

    pub fn total_internal(&self) -> usize {
        self.forest.iter().map(|t| t.n_nodes() - t.n_leaves()).sum()
    }
}

/// Sum over trees of each subject's leaf log spectrum.
pub fn full_fit(forest: &[Tree], n_subjects: usize, n_freqs: usize) -> RowMatrix {
    let mut fitted = RowMatrix::zeros(n_subjects, n_freqs);
    for tree in forest {
        add_tree(tree, &mut fitted, 1.0);
    }
    fitted
}

fn add_tree(tree: &Tree, m: &mut RowMatrix, sign: f64) {
    for id in tree.leaves() {
        let leaf = tree.leaf(id);
        for &l in &leaf.subjects {
            for (v, s) in m.row_mut(l).iter_mut().zip(&leaf.log_spectrum) {
                *v += sign * s;
            }
        }
    }
}

/// `R_j = log I - sum_{i != j} fit_i`, formed as `log I - fitted + fit_j`.
pub fn compute_residuals(state: &SamplerState, j: usize, log_pgram: &RowMatrix) -> RowMatrix {
    let mut r = RowMatrix::zeros(log_pgram.rows(), log_pgram.cols());
    fill_residuals(&state.forest[j], &state.fitted, log_pgram, &mut r);
    r
}

fn fill_residuals(tree: &Tree, fitted: &RowMatrix, log_pgram: &RowMatrix, out: &mut RowMatrix) {
    for id in tree.leaves() {
        let leaf = tree.leaf(id);
        for &l in &leaf.subjects {
            let (y, f) = (log_pgram.row(l), fitted.row(l));
            for (k, o) in out.row_mut(l).iter_mut().enumerate() {
                *o = y[k] - f[k] + leaf.log_spectrum[k];
            }
        }
    }
}

/// Residuals of one tree together with their exponentials.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub log: RowMatrix,
    pub exp: RowMatrix,
}

impl Residuals {
    /// Direct evaluation, `exp` taken cell by cell.
    pub fn direct(state: &SamplerState, j: usize, log_pgram: &RowMatrix) -> Self {
        let log = compute_residuals(state, j, log_pgram);
        let mut exp = log.clone();
        exp.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
        Self { log, exp }
    }

    pub fn node_data(&self, subjects: &[usize]) -> NodeData {
        NodeData::from_exp_subjects(&self.exp, &self.log, subjects)
    }
}

/// Multiplies each subject's row by `exp(sign * leaf log spectrum)`.
fn scale_by_tree(tree: &Tree, m: &mut RowMatrix, sign: f64) {
    for id in tree.leaves() {
        let leaf = tree.leaf(id);
        let w: Vec<f64> = leaf.log_spectrum.iter().map(|h| (sign * h).exp()).collect();
        for &l in &leaf.subjects {
            for (v, x) in m.row_mut(l).iter_mut().zip(&w) {
                *v *= x;
            }
        }
    }
}

/// Split map for a positive scale: `(x u/(1-u), x (1-u)/u)`.
pub fn split_scale(x: f64, u: f64) -> (f64, f64) {
    (x * u / (1.0 - u), x * (1.0 - u) / u)
}

/// Inverse of [`split_scale`]: `(sqrt(l r), sqrt(l)/(sqrt(l) + sqrt(r)))`.
pub fn merge_scale(left: f64, right: f64) -> (f64, f64) {
    let (sl, sr) = (left.sqrt(), right.sqrt());
    (sl * sr, sl / (sl + sr))
}

/// `log |d(l, r)/d(x, u)| = log(2x / (u(1-u)))`.
pub fn log_split_jacobian(x: f64, u: f64) -> f64 {
    (2.0 * x / (u * (1.0 - u))).ln()
}

/// `log |d(x, u)/d(l, r)| = -log(2 (sqrt(l) + sqrt(r))^2)`.
pub fn log_merge_jacobian(left: f64, right: f64) -> f64 {
    -(2.0 * (left.sqrt() + right.sqrt()).powi(2)).ln()
}

/// Inputs of the deterministic part of a BIRTH acceptance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthTerms {
    pub depth: usize,
    pub log_p_rule: f64,
    pub left_splittable: bool,
    pub right_splittable: bool,
    /// Leaves of the current tree.
    pub n_leaves: usize,
    /// Prunable internal nodes of the proposed tree.
    pub n_prunable_after: usize,
    pub tau2: f64,
    pub u_tau: f64,
    pub a: f64,
    pub u_a: f64,
}

/// Tree-structure ratio times transition ratio times both Jacobians (log).
pub fn birth_log_ratio_terms(t: &BirthTerms, prior: &TreePriorConfig, moves: &MoveProbs) -> f64 {
    let ps = p_split(t.depth, prior).expect("validated config");
    let structure = ps.ln() + t.log_p_rule + log_leaf_prior(t.depth + 1, t.left_splittable, prior)
        + log_leaf_prior(t.depth + 1, t.right_splittable, prior)
        - log_leaf_prior(t.depth, true, prior);
    let transition = moves.death.ln() - (t.n_prunable_after as f64).ln() - moves.birth.ln()
        + (t.n_leaves as f64).ln()
        - t.log_p_rule;
    structure + transition + log_split_jacobian(t.tau2, t.u_tau) + log_split_jacobian(t.a, t.u_a)
}

/// Inputs of the deterministic part of a DEATH acceptance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeathTerms {
    pub depth: usize,
    pub log_p_rule: f64,
    pub left_splittable: bool,
    pub right_splittable: bool,
    /// Leaves of the current tree.
    pub n_leaves: usize,
    /// Prunable internal nodes of the current tree.
    pub n_prunable: usize,
    pub tau2_left: f64,
    pub tau2_right: f64,
    pub a_left: f64,
    pub a_right: f64,
}

pub fn death_log_ratio_terms(t: &DeathTerms, prior: &TreePriorConfig, moves: &MoveProbs) -> f64 {
    let ps = p_split(t.depth, prior).expect("validated config");
    let structure = log_leaf_prior(t.depth, true, prior)
        - ps.ln()
        - t.log_p_rule
        - log_leaf_prior(t.depth + 1, t.left_splittable, prior)
        - log_leaf_prior(t.depth + 1, t.right_splittable, prior);
    let transition = moves.birth.ln() - ((t.n_leaves - 1) as f64).ln() + t.log_p_rule - moves.death.ln()
        + (t.n_prunable as f64).ln();
    structure
        + transition
        + log_merge_jacobian(t.tau2_left, t.tau2_right)
        + log_merge_jacobian(t.a_left, t.a_right)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    Accepted,
    Rejected,
    Skipped,
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio.is_finite() && u.ln() < log_ratio || log_ratio == f64::INFINITY
}

struct MoveCtx<'a> {
    model: &'a Model,
    residuals: &'a Residuals,
    proportions: &'a SplitProportions,
}

impl MoveCtx<'_> {
    fn data(&self, subjects: &[usize]) -> NodeData {
        self.residuals.node_data(subjects)
    }

    fn loglik(&self, data: &NodeData, params: &NodeParams) -> f64 {
        data.whittle_loglik(&self.model.basis.log_spectrum(params.alpha, &params.beta))
    }

    fn log_prior(&self, params: &NodeParams) -> f64 {
        node_log_prior(params, &self.model.basis, &self.model.config.half_t)
    }
}

fn birth_move(tree: &mut Tree, ctx: &MoveCtx, counters: &mut MoveCounters, rng: &mut ChaCha8Rng) -> MoveOutcome {
    let model = ctx.model;
    let cfg = &model.config;
    let leaves = tree.leaves();
    let b = leaves[rng.random_range(0..leaves.len())];
    let node = tree.node(b);
    let depth = node.depth;
    let region = node.region.clone();
    let parent_leaf = tree.leaf(b).clone();
    let counts = RuleCounts::at(&model.space, &cfg.tree, &region, &parent_leaf.subjects);
    let Some(covariate) = ctx.proportions.sample_covariate(&counts, rng) else {
        counters.unsplittable += 1;
        return MoveOutcome::Rejected;
    };
    let rules = crate::tree::enumerate_cutpoints(covariate, &model.space, &cfg.tree, &region, &parent_leaf.subjects);
    let rule = rules[rng.random_range(0..rules.len())].clone();
    let log_p_rule = rule_log_prob(&rule, &counts, ctx.proportions);
    let (ls, rs) = Tree::partition(&model.space, &rule, &parent_leaf.subjects);
    if ls.len() < cfg.tree.min_node_size || rs.len() < cfg.tree.min_node_size {
        counters.min_size_rejections += 1;
        return MoveOutcome::Rejected;
    }

    let parent = &parent_leaf.params;
    let u_tau = open_unit(rng);
    let u_a = open_unit(rng);
    let (tau2_l, tau2_r) = split_scale(parent.tau2, u_tau);
    let (a_l, a_r) = split_scale(parent.a, u_a);

    let (dl, dr) = (ctx.data(&ls), ctx.data(&rs));
    let dp = dl.merge(&dr);
    let init = parent.coefficients();
    let (Ok(ml), Ok(mr), Ok(mp)) = (
        find_mode(&dl, tau2_l, &model.basis, &init),
        find_mode(&dr, tau2_r, &model.basis, &init),
        find_mode(&dp, parent.tau2, &model.basis, &init),
    ) else {
        counters.mode_failures += 1;
        return MoveOutcome::Rejected;
    };
    counters.clamp_events += (ml.clamp_events + mr.clamp_events + mp.clamp_events) as u64;
    let theta_l = ml.sample(rng);
    let theta_r = mr.sample(rng);
    let left = NodeParams {
        alpha: theta_l[0],
        beta: theta_l[1..].to_vec(),
        tau2: tau2_l,
        a: a_l,
    };
    let right = NodeParams {
        alpha: theta_r[0],
        beta: theta_r[1..].to_vec(),
        tau2: tau2_r,
        a: a_r,
    };

    let (lreg, rreg) = region.split(&rule);
    let prunable = tree.prunable();
    let sibling_pair_broken = node.parent.is_some_and(|p| prunable.contains(&p));
    let terms = BirthTerms {
        depth,
        log_p_rule,
        left_splittable: is_splittable(&model.space, &cfg.tree, &lreg, &ls),
        right_splittable: is_splittable(&model.space, &cfg.tree, &rreg, &rs),
        n_leaves: leaves.len(),
        n_prunable_after: prunable.len() + 1 - usize::from(sibling_pair_broken),
        tau2: parent.tau2,
        u_tau,
        a: parent.a,
        u_a,
    };
    let log_lik = ctx.loglik(&dl, &left) + ctx.loglik(&dr, &right) - ctx.loglik(&dp, parent);
    let log_prior = ctx.log_prior(&left) + ctx.log_prior(&right) - ctx.log_prior(parent);
    let log_q = mp.log_density(&init) - ml.log_density(&theta_l) - mr.log_density(&theta_r);
    let log_ratio = log_lik + log_prior + log_q + birth_log_ratio_terms(&terms, &cfg.tree, &cfg.moves);
    if accept(log_ratio, rng) {
        tree.split_leaf(b, rule, model.leaf(left, ls), model.leaf(right, rs));
        MoveOutcome::Accepted
    } else {
        MoveOutcome::Rejected
    }
}

fn death_move(tree: &mut Tree, ctx: &MoveCtx, counters: &mut MoveCounters, rng: &mut ChaCha8Rng) -> MoveOutcome {
    let model = ctx.model;
    let cfg = &model.config;
    let prunable = tree.prunable();
    if prunable.is_empty() {
        return MoveOutcome::Skipped;
    }
    let eta = prunable[rng.random_range(0..prunable.len())];
    let (l, r) = tree.children(eta).expect("internal");
    let node = tree.node(eta);
    let rule = tree.rule(eta).expect("internal").clone();
    let (left, right) = (tree.leaf(l).clone(), tree.leaf(r).clone());
    let mut subjects = left.subjects.clone();
    subjects.extend_from_slice(&right.subjects);
    subjects.sort_unstable();
    let counts = RuleCounts::at(&model.space, &cfg.tree, &node.region, &subjects);
    let log_p_rule = rule_log_prob(&rule, &counts, ctx.proportions);

    let (tau2, _) = merge_scale(left.params.tau2, right.params.tau2);
    let (a, _) = merge_scale(left.params.a, right.params.a);
    let (dl, dr) = (ctx.data(&left.subjects), ctx.data(&right.subjects));
    let dp = dl.merge(&dr);
    let init_p: Vec<f64> = {
        let (tl, tr) = (left.params.coefficients(), right.params.coefficients());
        let (nl, nr) = (dl.n_series() as f64, dr.n_series() as f64);
        tl.iter().zip(&tr).map(|(x, y)| (nl * x + nr * y) / (nl + nr)).collect()
    };
    let (Ok(mp), Ok(ml), Ok(mr)) = (
        find_mode(&dp, tau2, &model.basis, &init_p),
        find_mode(&dl, left.params.tau2, &model.basis, &init_p),
        find_mode(&dr, right.params.tau2, &model.basis, &init_p),
    ) else {
        counters.mode_failures += 1;
        return MoveOutcome::Rejected;
    };
    counters.clamp_events += (ml.clamp_events + mr.clamp_events + mp.clamp_events) as u64;
    let theta = mp.sample(rng);
    let merged = NodeParams {
        alpha: theta[0],
        beta: theta[1..].to_vec(),
        tau2,
        a,
    };
    let terms = DeathTerms {
        depth: node.depth,
        log_p_rule,
        left_splittable: is_splittable(&model.space, &cfg.tree, &tree.node(l).region, &left.subjects),
        right_splittable: is_splittable(&model.space, &cfg.tree, &tree.node(r).region, &right.subjects),
        n_leaves: tree.n_leaves(),
        n_prunable: prunable.len(),
        tau2_left: left.params.tau2,
        tau2_right: right.params.tau2,
        a_left: left.params.a,
        a_right: right.params.a,
    };
    let log_lik = ctx.loglik(&dp, &merged) - ctx.loglik(&dl, &left.params) - ctx.loglik(&dr, &right.params);
    let log_prior = ctx.log_prior(&merged) - ctx.log_prior(&left.params) - ctx.log_prior(&right.params);
    let log_q = ml.log_density(&left.params.coefficients()) + mr.log_density(&right.params.coefficients())
        - mp.log_density(&theta);
    let log_ratio = log_lik + log_prior + log_q + death_log_ratio_terms(&terms, &cfg.tree, &cfg.moves);
    if accept(log_ratio, rng) {
        let spectrum = model.basis.log_spectrum(merged.alpha, &merged.beta);
        tree.prune(eta, merged, spectrum);
        MoveOutcome::Accepted
    } else {
        MoveOutcome::Rejected
    }
}

fn change_move(tree: &mut Tree, ctx: &MoveCtx, counters: &mut MoveCounters, rng: &mut ChaCha8Rng) -> MoveOutcome {
    let model = ctx.model;
    let cfg = &model.config;
    let prunable = tree.prunable();
    if prunable.is_empty() {
        return MoveOutcome::Skipped;
    }
    let eta = prunable[rng.random_range(0..prunable.len())];
    let (l, r) = tree.children(eta).expect("internal");
    let region = tree.node(eta).region.clone();
    let (left, right) = (tree.leaf(l).clone(), tree.leaf(r).clone());
    let mut subjects = left.subjects.clone();
    subjects.extend_from_slice(&right.subjects);
    subjects.sort_unstable();
    let counts = RuleCounts::at(&model.space, &cfg.tree, &region, &subjects);
    let Some(covariate) = ctx.proportions.sample_covariate(&counts, rng) else {
        return MoveOutcome::Skipped;
    };
    let rules = crate::tree::enumerate_cutpoints(covariate, &model.space, &cfg.tree, &region, &subjects);
    let rule = rules[rng.random_range(0..rules.len())].clone();
    let (ls, rs) = Tree::partition(&model.space, &rule, &subjects);
    if ls.len() < cfg.tree.min_node_size || rs.len() < cfg.tree.min_node_size {
        counters.min_size_rejections += 1;
        return MoveOutcome::Rejected;
    }

    let (dl_old, dr_old) = (ctx.data(&left.subjects), ctx.data(&right.subjects));
    let (dl, dr) = (ctx.data(&ls), ctx.data(&rs));
    let (tl, tr) = (left.params.coefficients(), right.params.coefficients());
    let (Ok(ml), Ok(mr), Ok(ml_old), Ok(mr_old)) = (
        find_mode(&dl, left.params.tau2, &model.basis, &tl),
        find_mode(&dr, right.params.tau2, &model.basis, &tr),
        find_mode(&dl_old, left.params.tau2, &model.basis, &tl),
        find_mode(&dr_old, right.params.tau2, &model.basis, &tr),
    ) else {
        counters.mode_failures += 1;
        return MoveOutcome::Rejected;
    };
    counters.clamp_events += (ml.clamp_events + mr.clamp_events + ml_old.clamp_events + mr_old.clamp_events) as u64;
    let new_l = left.params.with_coefficients(&ml.sample(rng));
    let new_r = right.params.with_coefficients(&mr.sample(rng));

    // Prior and transition factors of the rule cancel; what remains is
    // whether each child can still split.
    let (lreg, rreg) = region.split(&rule);
    let d = tree.node(l).depth;
    let structure = log_leaf_prior(d, is_splittable(&model.space, &cfg.tree, &lreg, &ls), &cfg.tree)
        + log_leaf_prior(d, is_splittable(&model.space, &cfg.tree, &rreg, &rs), &cfg.tree)
        - log_leaf_prior(d, is_splittable(&model.space, &cfg.tree, &tree.node(l).region, &left.subjects), &cfg.tree)
        - log_leaf_prior(d, is_splittable(&model.space, &cfg.tree, &tree.node(r).region, &right.subjects), &cfg.tree);
    let log_lik = ctx.loglik(&dl, &new_l) + ctx.loglik(&dr, &new_r)
        - ctx.loglik(&dl_old, &left.params)
        - ctx.loglik(&dr_old, &right.params);
    let log_prior = ctx.log_prior(&new_l) + ctx.log_prior(&new_r)
        - ctx.log_prior(&left.params)
        - ctx.log_prior(&right.params);
    let log_q = ml_old.log_density(&tl) + mr_old.log_density(&tr)
        - ml.log_density(&new_l.coefficients())
        - mr.log_density(&new_r.coefficients());
    if accept(log_lik + log_prior + log_q + structure, rng) {
        let penalty = model.basis.penalty();
        let new_l = gibbs_update_tau(&new_l, &cfg.half_t, penalty, cfg.tau2_rate, rng);
        let new_r = gibbs_update_tau(&new_r, &cfg.half_t, penalty, cfg.tau2_rate, rng);
        tree.change_rule(eta, rule, model.leaf(new_l, ls), model.leaf(new_r, rs));
        MoveOutcome::Accepted
    } else {
        MoveOutcome::Rejected
    }
}

/// One RJ move on `tree` against fixed residuals.
pub fn attempt_move(
    kind: MoveKind,
    tree: &mut Tree,
    model: &Model,
    residuals: &Residuals,
    proportions: &SplitProportions,
    counters: &mut MoveCounters,
    rng: &mut ChaCha8Rng,
) -> MoveOutcome {
    let ctx = MoveCtx {
        model,
        residuals,
        proportions,
    };
    let i = kind.index();
    counters.proposed[i] += 1;
    let outcome = match kind {
        MoveKind::Birth => birth_move(tree, &ctx, counters, rng),
        MoveKind::Death => death_move(tree, &ctx, counters, rng),
        MoveKind::Change => change_move(tree, &ctx, counters, rng),
    };
    match outcome {
        MoveOutcome::Accepted => counters.accepted[i] += 1,
        MoveOutcome::Skipped => counters.skipped[i] += 1,
        MoveOutcome::Rejected => {}
    }
    outcome
}

/// M-H coefficient update then Gibbs `(a, tau^2)` update for every leaf.
pub fn refresh_leaves(
    tree: &mut Tree,
    model: &Model,
    residuals: &Residuals,
    counters: &mut MoveCounters,
    rng: &mut ChaCha8Rng,
) {
    let cfg = &model.config;
    for id in tree.leaves() {
        let leaf = tree.leaf(id);
        let data = residuals.node_data(&leaf.subjects);
        let update = mh_update_coeffs(&leaf.params, &data, &model.basis, rng);
        counters.coeff_proposed += 1;
        counters.coeff_accepted += u64::from(update.accepted);
        counters.coeff_skipped += u64::from(update.skipped);
        counters.clamp_events += update.clamp_events as u64;
        let params = gibbs_update_tau(&update.params, &cfg.half_t, model.basis.penalty(), cfg.tau2_rate, rng);
        let leaf = tree.leaf_mut(id);
        if params.alpha != leaf.params.alpha || params.beta != leaf.params.beta {
            leaf.log_spectrum = model.basis.log_spectrum(params.alpha, &params.beta);
        }
        leaf.params = params;
    }
}

/// One backfitting sweep over all trees. `forced` overrides the move draw.
pub fn backfit_sweep(state: &mut SamplerState, model: &Model, forced: Option<MoveKind>) -> Result<()> {
    let (l, n) = (model.log_pgram.rows(), model.log_pgram.cols());
    // `exp(log I - fitted)`; each tree multiplies its own fit in and out.
    let mut base = model.log_pgram.clone();
    for (b, f) in base.as_mut_slice().iter_mut().zip(state.fitted.as_slice()) {
        *b = (*b - f).exp();
    }
    let mut residuals = Residuals {
        log: RowMatrix::zeros(l, n),
        exp: base,
    };
    for j in 0..state.forest.len() {
        fill_residuals(&state.forest[j], &state.fitted, &model.log_pgram, &mut residuals.log);
        scale_by_tree(&state.forest[j], &mut residuals.exp, 1.0);
        let kind = match forced {
            Some(k) => k,
            None => model.config.moves.draw(&mut state.rng),
        };
        let tree = &mut state.forest[j];
        attempt_move(kind, tree, model, &residuals, &state.proportions, &mut state.counters, &mut state.rng);
        refresh_leaves(tree, model, &residuals, &mut state.counters, &mut state.rng);
        for id in tree.leaves() {
            let leaf = tree.leaf(id);
            for &s in &leaf.subjects {
                let (y, r) = (model.log_pgram.row(s), residuals.log.row(s));
                for (k, f) in state.fitted.row_mut(s).iter_mut().enumerate() {
                    *f = y[k] - r[k] + leaf.log_spectrum[k];
                }
            }
        }
        scale_by_tree(tree, &mut residuals.exp, -1.0);
    }
    if model.config.split_prior == ProportionPrior::Dirichlet && state.iteration >= model.config.dirichlet_start() {
        let p = model.space.n_covariates();
        let mut counts = vec![0usize; p];
        for tree in &state.forest {
            for (c, x) in counts.iter_mut().zip(tree.split_counts(p)) {
                *c += x;
            }
        }
        state.proportions = update_split_proportions(&state.proportions, &counts, &mut state.rng);
    }
    if model.config.check_fitted {
        let scratch = full_fit(&state.forest, l, n);
        let drift = scratch
            .as_slice()
            .iter()
            .zip(state.fitted.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > 1e-10 {
            return Err(Error::Dimension(format!("fitted matrix drifted by {drift:e}")));
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Diagnostics of the current state.
pub fn trace_row(state: &SamplerState, log_pgram: &RowMatrix) -> TraceRow {
    let count = log_pgram.as_slice().len() as f64;
    let msr = log_pgram
        .as_slice()
        .iter()
        .zip(state.fitted.as_slice())
        .map(|(y, f)| (y - f) * (y - f))
        .sum::<f64>()
        / count;
    TraceRow {
        iteration: state.iteration,
        mean_sq_residual: msr,
        mean_fitted: state.fitted.mean(),
        nodes_per_tree: state.forest.iter().map(Tree::n_nodes).collect(),
        total_leaves: state.forest.iter().map(Tree::n_leaves).sum(),
        accepted: state.counters.accepted,
        proposed: state.counters.proposed,
        clamp_events: state.counters.clamp_events,
        mode_failures: state.counters.mode_failures,
    }
}

/// Everything needed to continue a chain bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub panel_hash: String,
    pub iteration: usize,
    pub forest: Vec<TreeRecord>,
    pub proportions: SplitProportions,
    pub rng: RngState,
    pub fitted: RowMatrix,
    pub counters: MoveCounters,
    pub draws: PosteriorDraws,
}

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let cp: Checkpoint = serde_json::from_reader(file)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp)
    }
}

/// Wall-clock summary; kept apart from the draws so those stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub sweeps: usize,
    pub total_seconds: f64,
    pub mean_tree_update_seconds: f64,
}

/// A chain together with its accumulated output.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub model: Model,
    pub state: SamplerState,
    pub draws: PosteriorDraws,
    panel_hash: String,
    seconds: f64,
    sweeps: usize,
}

impl Sampler {
    pub fn new(panel: &TimeSeriesPanel, config: SamplerConfig) -> Result<Self> {
        let model = Model::new(panel, config)?;
        let rng = stream(model.config.seed, Substream::Sampler);
        let state = SamplerState::initial(&model, rng);
        let draws = empty_draws(panel, &model);
        Ok(Self {
            model,
            state,
            draws,
            panel_hash: panel.content_hash(),
            seconds: 0.0,
            sweeps: 0,
        })
    }

    pub fn from_checkpoint(panel: &TimeSeriesPanel, checkpoint: Checkpoint) -> Result<Self> {
        let hash = panel.content_hash();
        if hash != checkpoint.panel_hash {
            return Err(Error::CheckpointMismatch(format!(
                "panel hash {hash} differs from checkpoint panel hash {}",
                checkpoint.panel_hash
            )));
        }
        let model = Model::new(panel, checkpoint.draws.config.clone())?;
        if checkpoint.forest.len() != model.config.n_trees {
            return Err(Error::CheckpointMismatch("forest size differs from n_trees".into()));
        }
        let forest = checkpoint
            .forest
            .iter()
            .map(|rec| Tree::from_record(rec, &model.space, |p| model.basis.log_spectrum(p.alpha, &p.beta)))
            .collect::<Result<Vec<_>>>()?;
        let state = SamplerState {
            forest,
            proportions: checkpoint.proportions,
            fitted: checkpoint.fitted,
            rng: checkpoint.rng.restore(),
            iteration: checkpoint.iteration,
            counters: checkpoint.counters,
        };
        Ok(Self {
            model,
            state,
            draws: checkpoint.draws,
            panel_hash: hash,
            seconds: 0.0,
            sweeps: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.model.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.model.config.n_iter
    }

    /// One sweep plus trace and draw bookkeeping.
    pub fn step(&mut self) -> Result<()> {
        let start = Instant::now();
        backfit_sweep(&mut self.state, &self.model, None)?;
        self.seconds += start.elapsed().as_secs_f64();
        self.sweeps += 1;
        self.record();
        Ok(())
    }

    fn record(&mut self) {
        let cfg = &self.model.config;
        let it = self.state.iteration;
        self.draws.traces.push(trace_row(&self.state, &self.model.log_pgram));
        self.draws.counters = self.state.counters.clone();
        if !cfg.keeps(it) {
            return;
        }
        let index = self.draws.forests.len();
        self.draws.kept_iterations.push(it);
        self.draws.forests.push(self.state.forest.iter().map(Tree::to_record).collect());
        self.draws.split_weights.push(self.state.proportions.weights());
        for ((s, q), f) in self
            .draws
            .fitted_sum
            .as_mut_slice()
            .iter_mut()
            .zip(self.draws.fitted_sq_sum.as_mut_slice())
            .zip(self.state.fitted.as_slice())
        {
            *s += f;
            *q += f * f;
        }
        if cfg.fitted_every > 0 && index % cfg.fitted_every == 0 {
            self.draws.fitted.push((index, self.state.fitted.clone()));
        }
    }

    /// Run until `n_iter` or until `stop_after` iterations have completed,
    /// calling `on_checkpoint` every `checkpoint_every` iterations.
    pub fn run_with(&mut self, stop_after: Option<usize>, mut on_checkpoint: impl FnMut(&Sampler) -> Result<()>) -> Result<()> {
        let end = stop_after.map_or(self.model.config.n_iter, |s| s.min(self.model.config.n_iter));
        while self.state.iteration < end {
            self.step()?;
            let every = self.model.config.checkpoint_every;
            if every > 0 && self.state.iteration % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(None, |_| Ok(()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            panel_hash: self.panel_hash.clone(),
            iteration: self.state.iteration,
            forest: self.state.forest.iter().map(Tree::to_record).collect(),
            proportions: self.state.proportions.clone(),
            rng: RngState::capture(&self.state.rng),
            fitted: self.state.fitted.clone(),
            counters: self.state.counters.clone(),
            draws: self.draws.clone(),
        }
    }

    pub fn timing(&self) -> RunTiming {
        let updates = (self.sweeps * self.model.config.n_trees).max(1);
        RunTiming {
            sweeps: self.sweeps,
            total_seconds: self.seconds,
            mean_tree_update_seconds: self.seconds / updates as f64,
        }
    }

    pub fn into_draws(self) -> PosteriorDraws {
        self.draws
    }
}

fn empty_draws(panel: &TimeSeriesPanel, model: &Model) -> PosteriorDraws {
    let (l, n) = (model.log_pgram.rows(), model.log_pgram.cols());
    PosteriorDraws {
        config: model.config.clone(),
        subject_ids: panel.subject_ids().to_vec(),
        schema: panel.schema().clone(),
        covariates: panel.covariates().to_vec(),
        freqs: model.basis.freqs().to_vec(),
        log_periodogram: model.log_pgram.clone(),
        kept_iterations: Vec::new(),
        forests: Vec::new(),
        split_weights: Vec::new(),
        fitted: Vec::new(),
        traces: Vec::new(),
        fitted_sum: RowMatrix::zeros(l, n),
        fitted_sq_sum: RowMatrix::zeros(l, n),
        counters: MoveCounters::default(),
    }
}

/// Run a full chain on a (demeaned) panel.
pub fn run_sampler(panel: &TimeSeriesPanel, config: SamplerConfig) -> Result<PosteriorDraws> {
    let mut sampler = Sampler::new(panel, config)?;
    sampler.run()?;
    Ok(sampler.into_draws())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn birth_jacobian_at_half() {
        let (l, r) = split_scale(2.0, 0.5);
        assert_eq!((l, r), (2.0, 2.0));
        assert!((log_split_jacobian(2.0, 0.5) - 16.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn merge_example() {
        let (x, u) = merge_scale(1.0, 4.0);
        assert!((x - 2.0).abs() < 1e-15);
        assert!((u - 1.0 / 3.0).abs() < 1e-15);
        assert!((merge_scale(3.0, 3.0).0 - 3.0).abs() < 1e-15);
    }

    #[test]
    fn stump_transition_ratio() {
        // P = 1, four cutpoints: p(PRUNE) B / (p(GROW) n_internal* p_rule) = 4
        let moves = MoveProbs::default();
        let transition = moves.death.ln() - 1f64.ln() - moves.birth.ln() + 1f64.ln() - (0.25f64).ln();
        assert!((transition.exp() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kept_count() {
        let cfg = SamplerConfig {
            n_iter: 10,
            burn_in: 5,
            ..Default::default()
        };
        assert_eq!((1..=10).filter(|&i| cfg.keeps(i)).count(), 5);
        let thin = SamplerConfig { thin: 2, ..cfg };
        assert_eq!((1..=10).filter(|&i| thin.keeps(i)).count(), thin.n_kept());
        let bad = SamplerConfig {
            burn_in: 10,
            ..SamplerConfig::default()
        };
        assert!(SamplerConfig { n_iter: 10, ..bad }.validate().is_err());
    }

    #[test]
    fn move_draw_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let moves = MoveProbs::default();
        let mut c = [0usize; 3];
        for _ in 0..40_000 {
            c[moves.draw(&mut rng).index()] += 1;
        }
        assert!((c[0] as f64 / 40_000.0 - 0.25).abs() < 0.01);
        assert!((c[2] as f64 / 40_000.0 - 0.5).abs() < 0.01);
    }
}
