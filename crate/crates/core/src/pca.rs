//! Principal component analysis, and the split encoding of fixed parameters
//! (physical properties and machine settings reduced separately).

use serde::{Deserialize, Serialize};

use crate::dataset::{N_FIXED, N_PROPERTIES};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaModel<T> {
    pub mean: Vec<T>,
    /// `n_components × dims`, orthonormal rows.
    pub components: Matrix<T>,
    /// Variance share of each retained component.
    pub explained_variance_ratio: Vec<T>,
}

impl<T: Scalar> PcaModel<T> {
    pub fn fit(rows: &[Vec<T>], n_components: usize) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!("PCA needs at least 2 rows, got {n}")));
        }
        let dims = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: bad.len(),
            });
        }
        if n_components == 0 || n_components > dims.min(n - 1) {
            return Err(Error::InvalidInput(format!(
                "n_components must lie in 1..={}, got {n_components}",
                dims.min(n - 1)
            )));
        }
        let nt = T::from_usize(n).unwrap();
        let mut mean = vec![T::zero(); dims];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);

        let mut cov = Matrix::<T>::zeros(dims, dims);
        for r in rows {
            let c: Vec<T> = r.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
            for i in 0..dims {
                for j in 0..=i {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        let denom = T::from_usize(n - 1).unwrap();
        for i in 0..dims {
            for j in 0..=i {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let (values, vectors) = symmetric_eigen(&cov);
        let values: Vec<T> = values.into_iter().map(|v| v.max(T::zero())).collect();
        let total: T = values.iter().copied().sum();
        let scale = values.first().copied().unwrap_or(T::zero());
        let tol = scale * T::from_usize(dims).unwrap() * T::epsilon() * T::lit(100.0);
        let rank = values.iter().filter(|&&v| v > tol).count();
        if n_components > rank {
            return Err(Error::RankDeficient {
                requested: n_components,
                rank,
            });
        }

        let mut comps = Vec::with_capacity(n_components * dims);
        for k in 0..n_components {
            let mut row = vectors.row(k).to_vec();
            // Largest-magnitude entry positive; earliest index wins ties.
            let pivot = row
                .iter()
                .enumerate()
                .fold((0, T::zero()), |(bi, bv), (i, &v)| {
                    if v.abs() > bv.abs() {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .1;
            if pivot < T::zero() {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            comps.extend(row);
        }
        let ratio = values[..n_components].iter().map(|&v| v / total).collect();
        Ok(Self {
            mean,
            components: Matrix::from_row_major(n_components, dims, comps),
            explained_variance_ratio: ratio,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn dims(&self) -> usize {
        self.components.cols()
    }

    pub fn transform(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: x.len(),
            });
        }
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        Ok(self.components.matvec(&centered))
    }

    pub fn inverse_transform(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.n_components() {
            return Err(Error::DimensionMismatch {
                expected: self.n_components(),
                got: z.len(),
            });
        }
        let back = self.components.matvec_t(z);
        Ok(back.iter().zip(&self.mean).map(|(&b, &m)| b + m).collect())
    }

    pub fn total_explained(&self) -> T {
        self.explained_variance_ratio.iter().copied().sum()
    }
}

/// Fixed-parameter encoder: one model for the 11 physical properties and
/// one for the 6 machine settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PcaPair<T> {
    pub phys_model: PcaModel<T>,
    pub settings_model: PcaModel<T>,
}

pub const DEFAULT_PHYS_COMPONENTS: usize = 2;
pub const DEFAULT_SETTINGS_COMPONENTS: usize = 1;

impl<T: Scalar> PcaPair<T> {
    /// `rows` are normalized 17-vectors.
    pub fn fit(rows: &[Vec<T>], phys_components: usize, settings_components: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != N_FIXED) {
            return Err(Error::DimensionMismatch {
                expected: N_FIXED,
                got: bad.len(),
            });
        }
        let phys: Vec<Vec<T>> = rows.iter().map(|r| r[..N_PROPERTIES].to_vec()).collect();
        let settings: Vec<Vec<T>> = rows.iter().map(|r| r[N_PROPERTIES..].to_vec()).collect();
        Ok(Self {
            phys_model: PcaModel::fit(&phys, phys_components)?,
            settings_model: PcaModel::fit(&settings, settings_components)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.phys_model.n_components() + self.settings_model.n_components()
    }

    pub fn encode_fixed(&self, setup_normalized: &[T]) -> Result<Vec<T>> {
        if setup_normalized.len() != N_FIXED {
            return Err(Error::DimensionMismatch {
                expected: N_FIXED,
                got: setup_normalized.len(),
            });
        }
        let mut z = self.phys_model.transform(&setup_normalized[..N_PROPERTIES])?;
        z.extend(self.settings_model.transform(&setup_normalized[N_PROPERTIES..])?);
        Ok(z)
    }
}
