//! Weakly supervised discriminative clustering. Image-level triplet labels
//! become "at least one pair of this bag carries predicate r" constraints on
//! a latent assignment matrix `Z`; the ridge classifier is eliminated in
//! closed form and the remaining convex quadratic in `Z` is minimized with
//! Frank-Wolfe.

mod frank_wolfe;
mod lmo;
mod objective;

use std::collections::{BTreeSet, HashMap, HashSet};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::PairCandidate;
use crate::error::{Error, Result};
use crate::types::{ImageId, TripletAnnotation};

pub use frank_wolfe::{fw_train, solve_diffrac, FwConfig, FwResult, FwTrace, FwVariant, WeakProblem};
pub use lmo::{hungarian, Lmo, LmoStats, Vertex};
pub use objective::{eliminate_w_objective, DiffracObjective};

/// Candidate-pair rows of one image whose categories match one weak
/// annotation; at least one of them must take `predicate`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub rows: Vec<usize>,
    pub predicate: usize,
    pub image_id: ImageId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BagSet {
    pub bags: Vec<Bag>,
    /// Annotation indices for which no candidate pair matched.
    pub skipped: Vec<usize>,
}

/// One bag per weak annotation: every ordered candidate pair of the same
/// image with matching subject and object categories. Row indices refer to
/// positions in `pairs`.
pub fn build_bags(annotations: &[TripletAnnotation], pairs: &[PairCandidate]) -> BagSet {
    let mut by_key: HashMap<(&str, usize, usize), Vec<usize>> = HashMap::new();
    for (row, p) in pairs.iter().enumerate() {
        by_key
            .entry((p.image_id.as_str(), p.subject.category, p.object.category))
            .or_default()
            .push(row);
    }
    let mut out = BagSet::default();
    for (i, a) in annotations.iter().enumerate() {
        match by_key.get(&(a.image_id.as_str(), a.subject, a.object)) {
            Some(rows) if !rows.is_empty() => out.bags.push(Bag {
                rows: rows.clone(),
                predicate: a.predicate,
                image_id: a.image_id.clone(),
            }),
            _ => out.skipped.push(i),
        }
    }
    out
}

/// Drops bags that cannot be satisfied together with earlier bags: a row
/// holds a single predicate, so distinct (rows, predicate) constraints need
/// distinct serving rows. Bags are admitted in order by augmenting-path
/// matching, which keeps a maximum satisfiable subset. Exact duplicates are
/// kept (they share the serving row). Returns (kept, dropped indices).
pub fn prune_infeasible_bags(bags: &[Bag], fixed_rows: &BTreeSet<usize>) -> (Vec<Bag>, Vec<usize>) {
    let mut kept = Vec::with_capacity(bags.len());
    let mut dropped = Vec::new();
    // Matching of distinct constraints to rows.
    let mut row_owner: HashMap<usize, usize> = HashMap::new();
    let mut constraints: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut seen: HashSet<(Vec<usize>, usize)> = HashSet::new();

    fn augment(
        c: usize,
        constraints: &[(Vec<usize>, usize)],
        fixed: &BTreeSet<usize>,
        row_owner: &mut HashMap<usize, usize>,
        visited: &mut BTreeSet<usize>,
    ) -> bool {
        for &row in &constraints[c].0 {
            if fixed.contains(&row) || !visited.insert(row) {
                continue;
            }
            let free = match row_owner.get(&row) {
                None => true,
                Some(&other) => augment(other, constraints, fixed, row_owner, visited),
            };
            if free {
                row_owner.insert(row, c);
                return true;
            }
        }
        false
    }

    for (i, bag) in bags.iter().enumerate() {
        let mut rows = bag.rows.clone();
        rows.sort_unstable();
        rows.dedup();
        let key = (rows.clone(), bag.predicate);
        if seen.contains(&key) {
            kept.push(bag.clone());
            continue;
        }
        let c = constraints.len();
        constraints.push((rows, bag.predicate));
        let snapshot = row_owner.clone();
        let mut visited = BTreeSet::new();
        if augment(c, &constraints, fixed_rows, &mut row_owner, &mut visited) {
            seen.insert(key);
            kept.push(bag.clone());
        } else {
            row_owner = snapshot;
            constraints.pop();
            dropped.push(i);
        }
    }
    (kept, dropped)
}

/// Seeded uniform sample of `round(rate * m)` rows among the `m` rows that
/// belong to no bag. Sorted ascending.
pub fn sample_negatives(n_rows: usize, bags: &[Bag], rate: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("negative sampling rate {rate} outside [0, 1]")));
    }
    let in_bag: BTreeSet<usize> = bags.iter().flat_map(|b| b.rows.iter().copied()).collect();
    let pool: Vec<usize> = (0..n_rows).filter(|r| !in_bag.contains(r)).collect();
    let count = ((rate * pool.len() as f64).round() as usize).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, pool.len(), count);
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// Latent assignment of candidate pairs to predicate classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub z: DMatrix<f64>,
    /// Rows clamped one-hot to the no-relation column.
    pub fixed_rows: BTreeSet<usize>,
}

impl AssignmentMatrix {
    /// Largest violation of the row-simplex, bag and fixed-row constraints.
    pub fn max_violation(&self, bags: &[Bag], no_relation: Option<usize>) -> f64 {
        let mut worst: f64 = 0.0;
        for row in self.z.row_iter() {
            worst = worst.max((row.sum() - 1.0).abs());
            for &v in row.iter() {
                worst = worst.max(-v).max(v - 1.0);
            }
        }
        for bag in bags {
            let mass: f64 = bag.rows.iter().map(|&n| self.z[(n, bag.predicate)]).sum();
            worst = worst.max(1.0 - mass);
        }
        if let Some(nr) = no_relation {
            for &n in &self.fixed_rows {
                worst = worst.max((1.0 - self.z[(n, nr)]).abs());
            }
        }
        worst
    }

    /// Column holding the largest mass in `row` (lowest index on ties).
    pub fn argmax(&self, row: usize) -> usize {
        let r = self.z.row(row);
        let mut best = 0;
        for c in 1..r.len() {
            if r[c] > r[best] {
                best = c;
            }
        }
        best
    }
}
