use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::train_full::RidgeSolver;

/// `f(Z) = min_W (1/N)||Z - XW||^2 + lambda ||W||^2
///       = (1/N) tr(Z^T B Z)`, `B = I - X (X^T X + N lambda I)^{-1} X^T`.
///
/// `B` is never formed: `BZ = Z - X (X^T X + N lambda I)^{-1} (X^T Z)`.
pub struct DiffracObjective<'a> {
    x: &'a DMatrix<f64>,
    solver: RidgeSolver,
}

impl<'a> DiffracObjective<'a> {
    pub fn new(x: &'a DMatrix<f64>, lambda: f64) -> Result<Self> {
        Ok(Self {
            x,
            solver: RidgeSolver::new(x, lambda)?,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        self.x
    }

    pub fn solver(&self) -> &RidgeSolver {
        &self.solver
    }

    pub fn apply_b(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.solver.weights(self.x, z);
        z - self.x * w
    }

    /// Objective from a precomputed `BZ`.
    pub fn value_with(&self, z: &DMatrix<f64>, bz: &DMatrix<f64>) -> f64 {
        z.dot(bz) / self.n() as f64
    }

    pub fn value(&self, z: &DMatrix<f64>) -> f64 {
        self.value_with(z, &self.apply_b(z))
    }

    /// `grad f(Z) = (2/N) BZ`
    pub fn gradient(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_b(z) * (2.0 / self.n() as f64)
    }

    /// Optimal classifier for a fixed assignment.
    pub fn weights(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.solver.weights(self.x, z)
    }
}

/// Value of the classifier-eliminated objective for assignment `z`.
pub fn eliminate_w_objective(x: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if x.nrows() != z.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            found: z.nrows(),
        });
    }
    Ok(DiffracObjective::new(x, lambda)?.value(z))
}
