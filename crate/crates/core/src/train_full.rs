//! Fully supervised multi-way relation classifier: multi-output ridge
//! regression `min_W (1/N)||Z - XW||_F^2 + lambda ||W||_F^2`, plus the
//! noisy-label baseline that picks one random pair per weak annotation.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PcaModel;
use crate::gmm::GmmModel;
use crate::types::Vocabulary;
use crate::weak::Bag;

/// Default ridge weight when none is supplied.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Models needed to turn raw detections into descriptors for this classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub gmm: GmmModel,
    pub pca: PcaModel,
}

/// Linear relation classifier: one weight column per predicate class.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    weights: DMatrix<f64>,
    lambda: f64,
    vocabulary: Vocabulary,
    preprocessing: Option<Preprocessing>,
}

impl RelationModel {
    pub fn new(weights: DMatrix<f64>, lambda: f64, vocabulary: Vocabulary) -> Result<Self> {
        if weights.ncols() != vocabulary.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: vocabulary.num_classes(),
                found: weights.ncols(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite classifier weight"));
        }
        if !(lambda > 0.0) {
            return Err(Error::invalid("ridge weight must be positive"));
        }
        Ok(Self {
            weights,
            lambda,
            vocabulary,
            preprocessing: None,
        })
    }

    pub fn with_preprocessing(mut self, preprocessing: Preprocessing) -> Result<Self> {
        let d = preprocessing.gmm.k() + 2 * preprocessing.pca.output_dim();
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: d,
            });
        }
        self.preprocessing = Some(preprocessing);
        Ok(self)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn preprocessing(&self) -> Option<&Preprocessing> {
        self.preprocessing.as_ref()
    }

    /// Descriptor length `d`.
    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// `x . w_r` for predicate class `r`.
    pub fn relation_score(&self, x: &[f64], r: usize) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if r >= self.num_classes() {
            return Err(Error::invalid(format!("predicate class {r} out of range")));
        }
        Ok(self.weights.column(r).iter().zip(x).map(|(w, v)| w * v).sum())
    }

    /// Scores for every class.
    pub fn relation_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_classes()).map(|r| self.relation_score(x, r)).collect()
    }
}

/// Cholesky factor of `X^T X + N lambda I`, reused for every solve against
/// the same design matrix.
pub struct RidgeSolver {
    factor: Cholesky<f64, Dyn>,
    n: usize,
    lambda: f64,
}

impl RidgeSolver {
    pub fn new(x: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("ridge weight must be positive, got {lambda}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        let mut gram = x.tr_mul(x);
        let shift = n as f64 * lambda;
        for i in 0..gram.nrows() {
            gram[(i, i)] += shift;
        }
        let factor = Cholesky::new(gram)
            .ok_or_else(|| Error::invalid("regularized Gram matrix is not positive definite"))?;
        Ok(Self { factor, n, lambda })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `(X^T X + N lambda I)^{-1} rhs`
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    /// Closed-form minimizer `W = (X^T X + N lambda I)^{-1} X^T Z`.
    pub fn weights(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve(&x.tr_mul(z))
    }
}

/// The ridge objective `(1/N)||Z - XW||^2 + lambda ||W||^2`.
pub fn ridge_objective(x: &DMatrix<f64>, z: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    (z - x * w).norm_squared() / n + lambda * w.norm_squared()
}

/// Closed-form ridge weights for targets `z`.
pub fn ridge_weights(x: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != z.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: z.nrows(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite target value"));
    }
    Ok(RidgeSolver::new(x, lambda)?.weights(x, z))
}

pub fn train_ridge(x: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64, vocabulary: &Vocabulary) -> Result<RelationModel> {
    if z.ncols() != vocabulary.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: vocabulary.num_classes(),
            found: z.ncols(),
        });
    }
    RelationModel::new(ridge_weights(x, z, lambda)?, lambda, vocabulary.clone())
}

/// Expands `(row, class)` labels into one-hot training rows. A row labeled
/// with several classes contributes one copy per class.
pub fn one_hot_design(
    features: &DMatrix<f64>,
    labels: &[(usize, usize)],
    n_classes: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if labels.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let d = features.ncols();
    let mut x = DMatrix::zeros(labels.len(), d);
    let mut z = DMatrix::zeros(labels.len(), n_classes);
    for (i, &(row, class)) in labels.iter().enumerate() {
        if row >= features.nrows() {
            return Err(Error::invalid(format!("label row {row} out of range")));
        }
        if class >= n_classes {
            return Err(Error::invalid(format!("label class {class} out of range")));
        }
        x.row_mut(i).copy_from(&features.row(row));
        z[(i, class)] = 1.0;
    }
    Ok((x, z))
}

/// Trains on explicit `(row, class)` labels.
pub fn train_labeled(
    features: &DMatrix<f64>,
    labels: &[(usize, usize)],
    lambda: f64,
    vocabulary: &Vocabulary,
) -> Result<RelationModel> {
    let (x, z) = one_hot_design(features, labels, vocabulary.num_classes())?;
    train_ridge(&x, &z, lambda, vocabulary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyConfig {
    pub lambda: f64,
    pub seed: u64,
}

impl Default for NoisyConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabels {
    pub labels: Vec<(usize, usize)>,
    pub skipped_bags: usize,
}

/// Picks one uniformly random row from each bag and labels it with the
/// bag's predicate. Rows in `negatives` are labeled with the no-relation class.
pub fn noisy_labels(bags: &[Bag], negatives: &BTreeSet<usize>, no_relation: Option<usize>, seed: u64) -> Result<NoisyLabels> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(bags.len() + negatives.len());
    let mut skipped_bags = 0;
    for bag in bags {
        if bag.rows.is_empty() {
            skipped_bags += 1;
            continue;
        }
        let pick = bag.rows[rng.random_range(0..bag.rows.len())];
        labels.push((pick, bag.predicate));
    }
    if !negatives.is_empty() {
        let nr = no_relation.ok_or_else(|| Error::invalid("negative rows given without a no-relation class"))?;
        labels.extend(negatives.iter().map(|&row| (row, nr)));
    }
    Ok(NoisyLabels { labels, skipped_bags })
}

/// Noisy-label baseline: one random pair per bag is taken as the positive,
/// the remaining bag pairs are discarded, then ordinary ridge regression.
pub fn train_noisy(
    features: &DMatrix<f64>,
    bags: &[Bag],
    negatives: &BTreeSet<usize>,
    vocabulary: &Vocabulary,
    config: &NoisyConfig,
) -> Result<(RelationModel, NoisyLabels)> {
    let noisy = noisy_labels(bags, negatives, vocabulary.no_relation_index(), config.seed)?;
    if noisy.skipped_bags > 0 {
        log::warn!("noisy baseline skipped {} empty bags", noisy.skipped_bags);
    }
    let model = train_labeled(features, &noisy.labels, config.lambda, vocabulary)?;
    Ok((model, noisy))
}
