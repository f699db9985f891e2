//! Pair descriptors: GMM responsibilities of the spatial configuration
//! followed by the PCA-reduced, L2-normalized appearance of subject and object.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::spatial_vector;
use crate::gmm::GmmModel;
use crate::types::Detection;

/// Linear projection onto the leading principal axes. No whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `p x D`, rows orthonormal, ordered by decreasing explained variance.
    components: DMatrix<f64>,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn from_parts(mean: Vec<f64>, components: DMatrix<f64>, explained_variance: Vec<f64>) -> Result<Self> {
        if components.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: components.ncols(),
            });
        }
        if explained_variance.len() != components.nrows() {
            return Err(Error::DimensionMismatch {
                expected: components.nrows(),
                found: explained_variance.len(),
            });
        }
        if components.nrows() > components.ncols() {
            return Err(Error::invalid("more components than input dimensions"));
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `components * (v - mean)`
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: v.len(),
            });
        }
        let centered = DVector::from_iterator(v.len(), v.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok((&self.components * centered).iter().copied().collect())
    }

    /// `components^T * y + mean`
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: y.len(),
            });
        }
        let y = DVector::from_column_slice(y);
        let back = self.components.tr_mul(&y);
        Ok(back.iter().zip(&self.mean).map(|(a, m)| a + m).collect())
    }
}

/// Fits PCA to the rows of `features` (assumed already L2-normalized) and
/// keeps `p` components.
pub fn pca_fit(features: &DMatrix<f64>, p: usize) -> Result<PcaModel> {
    let (m, d) = features.shape();
    if p == 0 {
        return Err(Error::invalid("PCA output dimension must be positive"));
    }
    if m < p {
        return Err(Error::InsufficientData { needed: p, got: m });
    }
    if p > d {
        return Err(Error::invalid(format!("cannot keep {p} components of {d}-dimensional data")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.column(j).sum() / m as f64).collect();
    let mut centered = features.clone();
    for j in 0..d {
        let mj = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mj);
    }

    let (axes, variances) = if d <= m {
        let cov = centered.tr_mul(&centered) / m as f64;
        leading_eigenpairs(cov, p)
    } else {
        // Fewer samples than dimensions: diagonalize the m x m Gram matrix and
        // map its eigenvectors back through the data.
        let gram = &centered * centered.transpose() / m as f64;
        let (u, vals) = leading_eigenpairs(gram, p.min(m));
        let mut axes = Vec::with_capacity(p);
        let mut variances = Vec::with_capacity(p);
        for (col, val) in u.iter().zip(vals) {
            let v = centered.tr_mul(&DVector::from_column_slice(col));
            let norm = v.norm();
            if norm > 1e-10 {
                axes.push((v / norm).iter().copied().collect::<Vec<_>>());
                variances.push(val);
            }
        }
        (axes, variances)
    };
    let (axes, variances) = complete_basis(axes, variances, d, p);

    let mut components = DMatrix::zeros(p, d);
    for (i, axis) in axes.iter().enumerate() {
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in axis.iter().enumerate() {
            components[(i, j)] = sign * v;
        }
    }
    PcaModel::from_parts(mean, components, variances)
}

/// Top-`p` eigenvectors (as vectors) and eigenvalues of a symmetric matrix,
/// sorted by decreasing eigenvalue with index as tie-break.
fn leading_eigenpairs(sym: DMatrix<f64>, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(p)
        .map(|i| {
            (
                eig.eigenvectors.column(i).iter().copied().collect::<Vec<_>>(),
                eig.eigenvalues[i].max(0.0),
            )
        })
        .unzip()
}

/// Extends an orthonormal set to `p` vectors with zero-variance directions
/// taken from the standard basis by Gram-Schmidt.
fn complete_basis(mut axes: Vec<Vec<f64>>, mut variances: Vec<f64>, d: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut e = 0;
    while axes.len() < p && e < d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        for _ in 0..2 {
            for a in &axes {
                let dot: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            axes.push(v.into_iter().map(|x| x / norm).collect());
            variances.push(0.0);
        }
        e += 1;
    }
    (axes, variances)
}

/// L2-normalizes in place; errors on the zero vector.
pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid("cannot L2-normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// L2-normalizes every raw appearance vector and fits PCA on the result.
pub fn fit_appearance_pca(raw: &DMatrix<f64>, p: usize) -> Result<PcaModel> {
    let mut normalized = raw.clone();
    for mut row in normalized.row_iter_mut() {
        let norm = row.norm();
        if !(norm > 0.0) {
            return Err(Error::invalid("zero appearance vector in PCA training data"));
        }
        row /= norm;
    }
    pca_fit(&normalized, p)
}

/// Number of GMM components used for the spatial part of a descriptor.
pub const DEFAULT_GMM_COMPONENTS: usize = 400;
/// PCA output size per detection; the appearance part is twice this.
pub const DEFAULT_PCA_DIM: usize = 300;
/// Size of the raw appearance vector of one detection.
pub const RAW_APPEARANCE_DIM: usize = 4096;

/// Feature vector of an ordered detection pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDescriptor {
    spatial: Vec<f64>,
    appearance: Vec<f64>,
}

impl PairDescriptor {
    pub fn new(spatial: Vec<f64>, appearance: Vec<f64>) -> Self {
        Self { spatial, appearance }
    }

    pub fn spatial(&self) -> &[f64] {
        &self.spatial
    }

    pub fn appearance(&self) -> &[f64] {
        &self.appearance
    }

    pub fn len(&self) -> usize {
        self.spatial.len() + self.appearance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `spatial ++ appearance`
    pub fn full(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.spatial);
        v.extend_from_slice(&self.appearance);
        v
    }
}

/// One detection together with its raw (un-normalized) appearance vector.
#[derive(Debug, Clone, Copy)]
pub struct DetectionFeature<'a> {
    pub detection: &'a Detection,
    pub raw: &'a [f64],
}

/// PCA projection of the L2-normalized raw appearance vector.
pub fn embed_appearance(pca: &PcaModel, raw: &[f64]) -> Result<Vec<f64>> {
    let mut v = raw.to_vec();
    l2_normalize(&mut v)?;
    pca.project(&v)
}

pub fn make_pair_descriptor(
    gmm: &GmmModel,
    pca: &PcaModel,
    subject: DetectionFeature<'_>,
    object: DetectionFeature<'_>,
) -> Result<PairDescriptor> {
    let r = spatial_vector(&subject.detection.bbox, &object.detection.bbox);
    let spatial = gmm.responsibilities(&r)?;
    let mut appearance = embed_appearance(pca, subject.raw)?;
    appearance.extend(embed_appearance(pca, object.raw)?);
    l2_normalize(&mut appearance)?;
    Ok(PairDescriptor { spatial, appearance })
}

/// Describes many pairs at once. Subject and object appearance embeddings
/// are looked up from `embeddings` by detection feature row.
pub fn describe_pairs(
    gmm: &GmmModel,
    pairs: &[(&Detection, &Detection)],
    embeddings: &(dyn Fn(usize) -> Result<Vec<f64>> + Sync),
) -> Result<Vec<PairDescriptor>> {
    pairs
        .par_iter()
        .map(|(s, o)| {
            let r = spatial_vector(&s.bbox, &o.bbox);
            let spatial = gmm.responsibilities(&r)?;
            let mut appearance = embeddings(s.feature_ref)?;
            appearance.extend(embeddings(o.feature_ref)?);
            l2_normalize(&mut appearance)?;
            Ok(PairDescriptor { spatial, appearance })
        })
        .collect()
}
