use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lmo::{Lmo, LmoStats};
use super::objective::DiffracObjective;
use super::{AssignmentMatrix, Bag};
use crate::error::{Error, Result};
use crate::train_full::{RelationModel, DEFAULT_LAMBDA};
use crate::types::Vocabulary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FwVariant {
    /// Full Frank-Wolfe steps with exact line search.
    #[default]
    Full,
    /// Block-coordinate steps, one block per image, in seeded random order.
    BlockCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwConfig {
    pub lambda: f64,
    /// Iterations (full variant) or passes over all blocks (block variant).
    pub max_iters: usize,
    /// Stop when the duality gap falls below `gap_tol * f(Z)`.
    pub gap_tol: f64,
    /// Fraction of bag-free candidate pairs clamped to the no-relation class.
    pub negative_sampling_rate: f64,
    pub seed: u64,
    pub variant: FwVariant,
    /// Recompute `BZ` from scratch every this many iterations.
    pub refresh_every: usize,
}

impl Default for FwConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            max_iters: 500,
            gap_tol: 1e-5,
            negative_sampling_rate: 0.0,
            seed: 0,
            variant: FwVariant::Full,
            refresh_every: 50,
        }
    }
}

impl FwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.gap_tol >= 0.0) {
            return Err(Error::invalid("gap_tol must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.negative_sampling_rate) {
            return Err(Error::invalid("negative sampling rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Inputs of one weakly supervised training run.
#[derive(Debug, Clone, Copy)]
pub struct WeakProblem<'a> {
    /// `N x d` descriptors, one row per candidate pair.
    pub features: &'a DMatrix<f64>,
    pub bags: &'a [Bag],
    pub fixed_rows: &'a BTreeSet<usize>,
    pub n_classes: usize,
    pub no_relation: Option<usize>,
    /// Per-row preference (e.g. detector score product) used to pick the
    /// initial serving pair of each bag.
    pub pair_scores: Option<&'a [f64]>,
    /// Image index of each row; required by the block-coordinate variant.
    pub row_groups: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FwTrace {
    /// `f(Z_t)` for t = 0, 1, ...
    pub objective: Vec<f64>,
    /// Frank-Wolfe gap `<grad f(Z_t), Z_t - S_t>` at each iterate examined.
    pub gap: Vec<f64>,
    pub step: Vec<f64>,
    /// Worst constraint violation of each iterate.
    pub max_violation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FwResult {
    pub weights: DMatrix<f64>,
    pub assignment: AssignmentMatrix,
    pub trace: FwTrace,
    pub iterations: usize,
    pub converged: bool,
    pub lmo_stats: LmoStats,
}

/// Feasible starting point: each bag is served one-hot by its best-scored
/// pair (jointly, so that distinct bags get distinct pairs), clamped rows are
/// one-hot at no-relation and every other row is uniform.
fn initial_assignment(problem: &WeakProblem<'_>, lmo: &Lmo) -> Result<DMatrix<f64>> {
    let n = problem.features.nrows();
    let k = problem.n_classes;
    let mut predicates_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    for bag in problem.bags {
        for &r in &bag.rows {
            predicates_of[r].push(bag.predicate);
        }
    }
    let score = |r: usize| problem.pair_scores.map_or(0.0, |s| s[r]);
    // Serving a bag costs 1 - score; any other column is free.
    let cost = |r: usize, c: usize| {
        if predicates_of[r].contains(&c) {
            1.0 - score(r)
        } else {
            0.0
        }
    };
    let (vertex, _) = lmo.solve_with(&cost)?;
    let mut z = DMatrix::from_element(n, k, 1.0 / k as f64);
    for r in 0..n {
        let c = vertex.columns[r];
        let serving = predicates_of[r].contains(&c);
        let fixed = problem.fixed_rows.contains(&r);
        if serving || fixed {
            z.row_mut(r).fill(0.0);
            z[(r, c)] = 1.0;
        }
    }
    Ok(z)
}

fn check_problem(problem: &WeakProblem<'_>) -> Result<()> {
    let n = problem.features.nrows();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if let Some(s) = problem.pair_scores {
        if s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: s.len() });
        }
    }
    if let Some(g) = problem.row_groups {
        if g.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: g.len() });
        }
    }
    Ok(())
}

/// Minimizes the classifier-eliminated objective over bag-constrained
/// assignments and returns the final assignment with its ridge weights.
pub fn solve_diffrac(problem: &WeakProblem<'_>, config: &FwConfig) -> Result<FwResult> {
    config.validate()?;
    check_problem(problem)?;
    let lmo = Lmo::new(
        problem.features.nrows(),
        problem.n_classes,
        problem.bags,
        problem.fixed_rows,
        problem.no_relation,
    )?;
    let objective = DiffracObjective::new(problem.features, config.lambda)?;
    let z = initial_assignment(problem, &lmo)?;
    match config.variant {
        FwVariant::Full => run_full(problem, config, &lmo, &objective, z),
        FwVariant::BlockCoordinate => run_block(problem, config, &lmo, &objective, z),
    }
}

fn line_search(gap: f64, curvature: f64) -> f64 {
    if curvature > 0.0 {
        (gap / curvature).clamp(0.0, 1.0)
    } else {
        // Flat direction with negative slope: take the full step.
        1.0
    }
}

fn run_full(
    problem: &WeakProblem<'_>,
    config: &FwConfig,
    lmo: &Lmo,
    objective: &DiffracObjective<'_>,
    mut z: DMatrix<f64>,
) -> Result<FwResult> {
    let n = objective.n() as f64;
    let mut assignment_check = AssignmentMatrix {
        z: DMatrix::zeros(0, 0),
        fixed_rows: problem.fixed_rows.clone(),
    };
    let mut bz = objective.apply_b(&z);
    let mut f = objective.value_with(&z, &bz);
    let mut trace = FwTrace::default();
    trace.objective.push(f);
    assignment_check.z = z.clone();
    trace
        .max_violation
        .push(assignment_check.max_violation(problem.bags, problem.no_relation));

    let mut stats = LmoStats::default();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let grad = &bz * (2.0 / n);
        let (vertex, s) = lmo.solve(&grad)?;
        stats.add(s);
        let gap = grad.dot(&z) - vertex.inner(&grad);
        trace.gap.push(gap);
        if gap <= config.gap_tol * f.abs().max(1e-12) {
            converged = true;
            break;
        }
        let s_mat = vertex.to_matrix(problem.n_classes);
        let d = &s_mat - &z;
        let bd = objective.apply_b(&s_mat) - &bz;
        let curvature = 2.0 / n * d.dot(&bd);
        let gamma = line_search(gap, curvature);
        z += gamma * &d;
        iterations += 1;
        if iterations % config.refresh_every.max(1) == 0 {
            bz = objective.apply_b(&z);
        } else {
            bz += gamma * &bd;
        }
        f = objective.value_with(&z, &bz);
        trace.step.push(gamma);
        trace.objective.push(f);
        assignment_check.z = z.clone();
        trace
            .max_violation
            .push(assignment_check.max_violation(problem.bags, problem.no_relation));
    }

    let weights = objective.weights(&z);
    Ok(FwResult {
        weights,
        assignment: AssignmentMatrix {
            z,
            fixed_rows: problem.fixed_rows.clone(),
        },
        trace,
        iterations,
        converged,
        lmo_stats: stats,
    })
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn run_block(
    problem: &WeakProblem<'_>,
    config: &FwConfig,
    lmo: &Lmo,
    objective: &DiffracObjective<'_>,
    mut z: DMatrix<f64>,
) -> Result<FwResult> {
    let groups = problem
        .row_groups
        .ok_or_else(|| Error::invalid("block-coordinate Frank-Wolfe needs per-row image groups"))?;
    let blocks = lmo.blocks(groups)?;
    let x = objective.features();
    let solver = objective.solver();
    let n = objective.n() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut check = AssignmentMatrix {
        z: z.clone(),
        fixed_rows: problem.fixed_rows.clone(),
    };
    let mut trace = FwTrace::default();
    let mut f = objective.value(&z);
    trace.objective.push(f);
    trace.max_violation.push(check.max_violation(problem.bags, problem.no_relation));

    let mut w = objective.weights(&z);
    let mut stats = LmoStats::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    while iterations < config.max_iters {
        // Full gap at the current iterate decides convergence.
        let grad = objective.gradient(&z);
        let (vertex, _) = lmo.solve(&grad)?;
        let gap = grad.dot(&z) - vertex.inner(&grad);
        trace.gap.push(gap);
        if gap <= config.gap_tol * f.abs().max(1e-12) {
            converged = true;
            break;
        }
        order.shuffle(&mut rng);
        for &bi in &order {
            let block = &blocks[bi];
            let rows = &block.rows;
            let xb = gather_rows(x, rows);
            let zb = gather_rows(&z, rows);
            let gb = (&zb - &xb * &w) * (2.0 / n);
            let local: std::collections::HashMap<usize, usize> =
                rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
            let (assign, s) = lmo.solve_block(block, &|r, c| gb[(local[&r], c)])?;
            stats.add(s);
            let mut db = -zb;
            for (r, c) in assign {
                db[(local[&r], c)] += 1.0;
            }
            let block_gap = -gb.dot(&db);
            if block_gap <= 0.0 {
                continue;
            }
            let q = xb.tr_mul(&db);
            let kq = solver.solve(&q);
            let curvature = 2.0 / n * (db.norm_squared() - q.dot(&kq));
            let gamma = line_search(block_gap, curvature);
            for (i, &r) in rows.iter().enumerate() {
                for c in 0..z.ncols() {
                    z[(r, c)] += gamma * db[(i, c)];
                }
            }
            w += gamma * kq;
        }
        iterations += 1;
        w = objective.weights(&z);
        f = objective.value(&z);
        trace.objective.push(f);
        check.z = z.clone();
        trace.max_violation.push(check.max_violation(problem.bags, problem.no_relation));
    }

    Ok(FwResult {
        weights: objective.weights(&z),
        assignment: AssignmentMatrix {
            z,
            fixed_rows: problem.fixed_rows.clone(),
        },
        trace,
        iterations,
        converged,
        lmo_stats: stats,
    })
}

/// Weakly supervised training: returns the relation model (ridge weights of
/// the final assignment) together with the solver output.
pub fn fw_train(problem: &WeakProblem<'_>, vocabulary: &Vocabulary, config: &FwConfig) -> Result<(RelationModel, FwResult)> {
    if problem.n_classes != vocabulary.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: vocabulary.num_classes(),
            found: problem.n_classes,
        });
    }
    if problem.no_relation != vocabulary.no_relation_index() {
        return Err(Error::invalid("no-relation column disagrees with the vocabulary"));
    }
    let result = solve_diffrac(problem, config)?;
    let model = RelationModel::new(result.weights.clone(), config.lambda, vocabulary.clone())?;
    Ok((model, result))
}
