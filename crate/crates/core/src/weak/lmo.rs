//! Linear minimization oracle over the bag-constrained assignment polytope.
//!
//! Rows are independent except through bags, so the problem splits into
//! connected components of overlapping bags plus unconstrained rows. A row
//! takes its cheapest column unless it is needed to serve a bag. When every
//! row belongs to at most one distinct bag per predicate, choosing serving
//! rows is a min-cost bipartite assignment (bags x rows, cost = regret),
//! which is solved exactly. Other components are enumerated exhaustively
//! when small and handled greedily otherwise.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::Bag;
use crate::error::{Error, Result};

/// Largest component (in rows) solved by exhaustive enumeration.
const EXHAUSTIVE_MAX_ROWS: usize = 10;
/// Largest number of leaves the exhaustive search may visit.
const EXHAUSTIVE_MAX_LEAVES: u64 = 1 << 16;

/// Integral vertex of the assignment polytope: one column per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vertex {
    pub columns: Vec<usize>,
}

impl Vertex {
    pub fn to_matrix(&self, n_classes: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.columns.len(), n_classes);
        for (n, &c) in self.columns.iter().enumerate() {
            s[(n, c)] = 1.0;
        }
        s
    }

    /// `<G, S>`
    pub fn inner(&self, gradient: &DMatrix<f64>) -> f64 {
        self.columns.iter().enumerate().map(|(n, &c)| gradient[(n, c)]).sum()
    }
}

/// How each bag component was solved in one oracle call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LmoStats {
    pub matching: usize,
    pub exhaustive: usize,
    /// Components solved by the greedy repair heuristic (not guaranteed optimal).
    pub greedy: usize,
}

impl LmoStats {
    pub fn add(&mut self, other: LmoStats) {
        self.matching += other.matching;
        self.exhaustive += other.exhaustive;
        self.greedy += other.greedy;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Strategy {
    Matching,
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone)]
struct Component {
    rows: Vec<usize>,
    /// Distinct (rows, predicate) constraints.
    constraints: Vec<(Vec<usize>, usize)>,
    strategy: Strategy,
}

/// Precomputed oracle for a fixed set of bags and clamped rows.
#[derive(Debug, Clone)]
pub struct Lmo {
    n_rows: usize,
    n_classes: usize,
    no_relation: Option<usize>,
    fixed: BTreeSet<usize>,
    components: Vec<Component>,
    /// Rows touched by neither a bag nor clamping.
    free_rows: Vec<usize>,
}

/// A subset of rows closed under bag components, for block-coordinate steps.
#[derive(Debug, Clone)]
pub struct LmoBlock {
    pub rows: Vec<usize>,
    components: Vec<usize>,
    free_rows: Vec<usize>,
    fixed_rows: Vec<usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Lmo {
    pub fn new(
        n_rows: usize,
        n_classes: usize,
        bags: &[Bag],
        fixed_rows: &BTreeSet<usize>,
        no_relation: Option<usize>,
    ) -> Result<Self> {
        Self::build(n_rows, n_classes, bags, fixed_rows, no_relation, false)
    }

    /// Like [`Lmo::new`] but every component uses the greedy repair heuristic.
    pub fn greedy_only(
        n_rows: usize,
        n_classes: usize,
        bags: &[Bag],
        fixed_rows: &BTreeSet<usize>,
        no_relation: Option<usize>,
    ) -> Result<Self> {
        Self::build(n_rows, n_classes, bags, fixed_rows, no_relation, true)
    }

    fn build(
        n_rows: usize,
        n_classes: usize,
        bags: &[Bag],
        fixed_rows: &BTreeSet<usize>,
        no_relation: Option<usize>,
        force_greedy: bool,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("assignment needs at least one column"));
        }
        if let Some(nr) = no_relation {
            if nr >= n_classes {
                return Err(Error::invalid("no-relation column out of range"));
            }
        }
        if !fixed_rows.is_empty() && no_relation.is_none() {
            return Err(Error::invalid("clamped rows require a no-relation column"));
        }
        if let Some(&r) = fixed_rows.iter().next_back() {
            if r >= n_rows {
                return Err(Error::invalid(format!("clamped row {r} out of range")));
            }
        }
        let mut parent: Vec<usize> = (0..n_rows).collect();
        let mut in_bag = vec![false; n_rows];
        for bag in bags {
            if bag.rows.is_empty() {
                return Err(Error::Infeasible(format!("empty bag in image {}", bag.image_id)));
            }
            if bag.predicate >= n_classes || Some(bag.predicate) == no_relation {
                return Err(Error::invalid(format!("bag predicate {} is not a real predicate", bag.predicate)));
            }
            for &r in &bag.rows {
                if r >= n_rows {
                    return Err(Error::invalid(format!("bag row {r} out of range")));
                }
                in_bag[r] = true;
            }
            let root = find(&mut parent, bag.rows[0]);
            for &r in &bag.rows[1..] {
                let other = find(&mut parent, r);
                if other != root {
                    parent[other] = root;
                }
            }
        }

        let mut groups: BTreeMap<usize, (BTreeSet<usize>, BTreeSet<(Vec<usize>, usize)>)> = BTreeMap::new();
        for bag in bags {
            let root = find(&mut parent, bag.rows[0]);
            let mut rows = bag.rows.clone();
            rows.sort_unstable();
            rows.dedup();
            let entry = groups.entry(root).or_default();
            entry.0.extend(rows.iter().copied());
            entry.1.insert((rows, bag.predicate));
        }
        let mut components: Vec<Component> = groups
            .into_values()
            .map(|(rows, constraints)| {
                let rows: Vec<usize> = rows.into_iter().collect();
                let constraints: Vec<(Vec<usize>, usize)> = constraints.into_iter().collect();
                let strategy = if force_greedy {
                    Strategy::Greedy
                } else {
                    choose_strategy(&rows, &constraints)
                };
                Component {
                    rows,
                    constraints,
                    strategy,
                }
            })
            .collect();
        components.sort_by_key(|c| c.rows[0]);

        let free_rows = (0..n_rows).filter(|r| !in_bag[*r] && !fixed_rows.contains(r)).collect();
        let lmo = Self {
            n_rows,
            n_classes,
            no_relation,
            fixed: fixed_rows.clone(),
            components,
            free_rows,
        };
        // Feasibility: the zero cost must admit a solution.
        lmo.solve_with(&|_, _| 0.0)?;
        Ok(lmo)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn fixed_rows(&self) -> &BTreeSet<usize> {
        &self.fixed
    }

    /// Vertex minimizing `<gradient, S>`.
    pub fn solve(&self, gradient: &DMatrix<f64>) -> Result<(Vertex, LmoStats)> {
        if gradient.shape() != (self.n_rows, self.n_classes) {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows * self.n_classes,
                found: gradient.len(),
            });
        }
        if gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite gradient"));
        }
        self.solve_with(&|n, c| gradient[(n, c)])
    }

    /// Oracle over an arbitrary cost lookup `cost(row, column)`.
    pub fn solve_with(&self, cost: &(dyn Fn(usize, usize) -> f64 + Sync)) -> Result<(Vertex, LmoStats)> {
        let mut columns = vec![0usize; self.n_rows];
        for &n in &self.free_rows {
            columns[n] = row_argmin(cost, n, self.n_classes);
        }
        if let Some(nr) = self.no_relation {
            for &n in &self.fixed {
                columns[n] = nr;
            }
        }
        let solved: Vec<Result<(Vec<(usize, usize)>, Strategy)>> = self
            .components
            .par_iter()
            .map(|c| self.solve_component(c, cost).map(|a| (a, c.strategy)))
            .collect();
        let mut stats = LmoStats::default();
        for res in solved {
            let (assignment, strategy) = res?;
            for (n, c) in assignment {
                columns[n] = c;
            }
            match strategy {
                Strategy::Matching => stats.matching += 1,
                Strategy::Exhaustive => stats.exhaustive += 1,
                Strategy::Greedy => stats.greedy += 1,
            }
        }
        Ok((Vertex { columns }, stats))
    }

    /// Splits rows into blocks by `row_groups` (e.g. image index). Every bag
    /// component must lie inside one group.
    pub fn blocks(&self, row_groups: &[usize]) -> Result<Vec<LmoBlock>> {
        if row_groups.len() != self.n_rows {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows,
                found: row_groups.len(),
            });
        }
        let mut blocks: BTreeMap<usize, LmoBlock> = BTreeMap::new();
        let mut new_block = || LmoBlock {
            rows: Vec::new(),
            components: Vec::new(),
            free_rows: Vec::new(),
            fixed_rows: Vec::new(),
        };
        for (n, &g) in row_groups.iter().enumerate() {
            blocks.entry(g).or_insert_with(&mut new_block).rows.push(n);
        }
        for &n in &self.free_rows {
            blocks.get_mut(&row_groups[n]).expect("group exists").free_rows.push(n);
        }
        for &n in &self.fixed {
            blocks.get_mut(&row_groups[n]).expect("group exists").fixed_rows.push(n);
        }
        for (ci, c) in self.components.iter().enumerate() {
            let g = row_groups[c.rows[0]];
            if c.rows.iter().any(|&n| row_groups[n] != g) {
                return Err(Error::invalid("a bag spans several row groups"));
            }
            blocks.get_mut(&g).expect("group exists").components.push(ci);
        }
        Ok(blocks.into_values().collect())
    }

    /// Oracle restricted to one block; returns `(row, column)` for each block row.
    pub fn solve_block(
        &self,
        block: &LmoBlock,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    ) -> Result<(Vec<(usize, usize)>, LmoStats)> {
        let mut out = Vec::with_capacity(block.rows.len());
        for &n in &block.free_rows {
            out.push((n, row_argmin(cost, n, self.n_classes)));
        }
        if let Some(nr) = self.no_relation {
            out.extend(block.fixed_rows.iter().map(|&n| (n, nr)));
        }
        let mut stats = LmoStats::default();
        for &ci in &block.components {
            let c = &self.components[ci];
            out.extend(self.solve_component(c, cost)?);
            match c.strategy {
                Strategy::Matching => stats.matching += 1,
                Strategy::Exhaustive => stats.exhaustive += 1,
                Strategy::Greedy => stats.greedy += 1,
            }
        }
        out.sort_unstable();
        Ok((out, stats))
    }

    fn solve_component(
        &self,
        comp: &Component,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    ) -> Result<Vec<(usize, usize)>> {
        match comp.strategy {
            Strategy::Matching => self.solve_matching(comp, cost),
            Strategy::Exhaustive => self.solve_exhaustive(comp, cost),
            Strategy::Greedy => self.solve_greedy(comp, cost),
        }
    }

    fn solve_matching(
        &self,
        comp: &Component,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    ) -> Result<Vec<(usize, usize)>> {
        let base: Vec<usize> = comp.rows.iter().map(|&n| row_argmin(cost, n, self.n_classes)).collect();
        let local: BTreeMap<usize, usize> = comp.rows.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let regret: Vec<Vec<f64>> = comp
            .constraints
            .iter()
            .map(|(rows, r)| {
                let mut line = vec![f64::INFINITY; comp.rows.len()];
                for &n in rows {
                    if self.fixed.contains(&n) {
                        continue;
                    }
                    let i = local[&n];
                    line[i] = cost(n, *r) - cost(n, base[i]);
                }
                line
            })
            .collect();
        let served = hungarian(&regret).ok_or_else(|| {
            Error::Infeasible(format!("bags over rows {:?} cannot all be satisfied", comp.rows))
        })?;
        let mut columns = base;
        for (ci, &i) in served.iter().enumerate() {
            columns[i] = comp.constraints[ci].1;
        }
        Ok(self.finish(comp, columns))
    }

    fn solve_exhaustive(
        &self,
        comp: &Component,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    ) -> Result<Vec<(usize, usize)>> {
        let choices: Vec<Vec<usize>> = comp
            .rows
            .iter()
            .map(|&n| {
                if self.fixed.contains(&n) {
                    return vec![self.no_relation.expect("checked at construction")];
                }
                let mut c: Vec<usize> = comp
                    .constraints
                    .iter()
                    .filter(|(rows, _)| rows.binary_search(&n).is_ok())
                    .map(|(_, r)| *r)
                    .collect();
                c.push(row_argmin(cost, n, self.n_classes));
                c.sort_unstable();
                c.dedup();
                c
            })
            .collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut current = Vec::with_capacity(comp.rows.len());
        self.enumerate(comp, cost, &choices, &mut current, 0.0, &mut best);
        let (_, columns) = best.ok_or_else(|| {
            Error::Infeasible(format!("bags over rows {:?} cannot all be satisfied", comp.rows))
        })?;
        Ok(comp.rows.iter().copied().zip(columns).collect())
    }

    fn enumerate(
        &self,
        comp: &Component,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
        choices: &[Vec<usize>],
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let depth = current.len();
        if depth == comp.rows.len() {
            let satisfied = comp.constraints.iter().all(|(rows, r)| {
                rows.iter().any(|n| current[comp.rows.binary_search(n).expect("row in component")] == *r)
            });
            if satisfied && best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        let n = comp.rows[depth];
        for &c in &choices[depth] {
            current.push(c);
            self.enumerate(comp, cost, choices, current, acc + cost(n, c), best);
            current.pop();
        }
    }

    fn solve_greedy(
        &self,
        comp: &Component,
        cost: &(dyn Fn(usize, usize) -> f64 + Sync),
    ) -> Result<Vec<(usize, usize)>> {
        let mut columns: Vec<usize> = comp.rows.iter().map(|&n| row_argmin(cost, n, self.n_classes)).collect();
        let local: BTreeMap<usize, usize> = comp.rows.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        if let Some(nr) = self.no_relation {
            for (i, n) in comp.rows.iter().enumerate() {
                if self.fixed.contains(n) {
                    columns[i] = nr;
                }
            }
        }
        let mut locked = vec![false; comp.rows.len()];
        let max_rounds = comp.constraints.len() * comp.rows.len() + 1;
        for _ in 0..max_rounds {
            let violated = comp
                .constraints
                .iter()
                .find(|(rows, r)| !rows.iter().any(|n| columns[local[n]] == *r));
            let Some((rows, r)) = violated else {
                return Ok(self.finish(comp, columns));
            };
            let pick = |allow_locked: bool| {
                rows.iter()
                    .map(|n| (local[n], *n))
                    .filter(|(i, n)| !self.fixed.contains(n) && (allow_locked || !locked[*i]))
                    .min_by(|a, b| {
                        let ra = cost(a.1, *r) - cost(a.1, columns[a.0]);
                        let rb = cost(b.1, *r) - cost(b.1, columns[b.0]);
                        ra.total_cmp(&rb).then(a.1.cmp(&b.1))
                    })
            };
            let Some((i, _)) = pick(false).or_else(|| pick(true)) else {
                break;
            };
            columns[i] = *r;
            locked[i] = true;
        }
        Err(Error::Infeasible(format!(
            "greedy repair could not satisfy bags over rows {:?}",
            comp.rows
        )))
    }

    fn finish(&self, comp: &Component, mut columns: Vec<usize>) -> Vec<(usize, usize)> {
        if let Some(nr) = self.no_relation {
            for (i, n) in comp.rows.iter().enumerate() {
                if self.fixed.contains(n) {
                    columns[i] = nr;
                }
            }
        }
        comp.rows.iter().copied().zip(columns).collect()
    }
}

fn choose_strategy(rows: &[usize], constraints: &[(Vec<usize>, usize)]) -> Strategy {
    // Assignment is exact when no row sits in two distinct bags of the same predicate.
    let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let laminar = constraints
        .iter()
        .all(|(rs, r)| rs.iter().all(|&n| seen.insert((n, *r))));
    if laminar {
        return Strategy::Matching;
    }
    let leaves = rows.iter().try_fold(1u64, |acc, n| {
        let k = 1 + constraints.iter().filter(|(rs, _)| rs.binary_search(n).is_ok()).count() as u64;
        acc.checked_mul(k)
    });
    match leaves {
        Some(l) if rows.len() <= EXHAUSTIVE_MAX_ROWS && l <= EXHAUSTIVE_MAX_LEAVES => Strategy::Exhaustive,
        _ => Strategy::Greedy,
    }
}

/// Cheapest column of row `n`, lowest index on ties.
fn row_argmin(cost: &(dyn Fn(usize, usize) -> f64 + Sync), n: usize, n_classes: usize) -> usize {
    let mut best = 0;
    let mut best_cost = cost(n, 0);
    for c in 1..n_classes {
        let v = cost(n, c);
        if v < best_cost {
            best = c;
            best_cost = v;
        }
    }
    best
}

/// Min-cost assignment of every row of `cost` (`n x m`, `n <= m`) to a
/// distinct column; `f64::INFINITY` marks forbidden pairs. Returns the
/// column of each row, or `None` if no complete assignment exists.
pub fn hungarian(cost: &[Vec<f64>]) -> Option<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let m = cost[0].len();
    if m < n {
        return None;
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if delta == inf {
                return None;
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Some(out)
}
