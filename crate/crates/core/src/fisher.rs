//! Fisher information `I(x) = Hᵀ R⁻¹ H`, the estimation cost `J_est = −ln det I`,
//! observability diagnosis, and Cramér-Rao position ellipses.

use crate::manifold::StateTuple;
use crate::ranging::{stack_jacobian, variances, RangingError};
use crate::scenario::Scenario;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::cmp::Ordering;
use std::fmt;
use std::ops::Add;
use thiserror::Error;

/// Eigenvalues below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Points per 1σ contour.
pub const CONTOUR_POINTS: usize = 64;

/// A cost value that saturates to an explicit infinity marker instead of NaN.
///
/// `Infinite` orders above every finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cost {
    Finite(f64),
    Infinite,
}

impl Cost {
    pub fn is_finite(self) -> bool {
        matches!(self, Cost::Finite(_))
    }

    /// `f64::INFINITY` for the marker.
    pub fn value(self) -> f64 {
        match self {
            Cost::Finite(v) => v,
            Cost::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Cost::Finite(v) => Some(v),
            Cost::Infinite => None,
        }
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Cost::Finite(a), Cost::Finite(b)) => a.partial_cmp(b),
            (Cost::Finite(_), Cost::Infinite) => Some(Ordering::Less),
            (Cost::Infinite, Cost::Finite(_)) => Some(Ordering::Greater),
            (Cost::Infinite, Cost::Infinite) => Some(Ordering::Equal),
        }
    }
}

impl Add<f64> for Cost {
    type Output = Cost;
    fn add(self, rhs: f64) -> Cost {
        match self {
            Cost::Finite(v) => Cost::Finite(v + rhs),
            Cost::Infinite => Cost::Infinite,
        }
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cost::Finite(v) => write!(f, "{v}"),
            Cost::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FisherError {
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error("unobservable formation: FIM rank {rank} < {expected}; null direction {null_direction:?}")]
    Unobservable {
        rank: usize,
        expected: usize,
        null_direction: Vec<f64>,
    },
}

/// The information matrix with its spectrum.
#[derive(Clone, Debug)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    /// Ascending eigenvalues of the symmetrized matrix.
    pub eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    pub rank: usize,
    /// `ln det I`; `None` when rank deficient.
    pub log_det: Option<f64>,
}

impl FisherInfo {
    /// Builds `Hᵀ diag(1/σ²) H` from a stacked Jacobian and per-row variances.
    pub fn from_jacobian(h: &DMatrix<f64>, variances: &DVector<f64>) -> Self {
        let weighted = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] / variances[r]);
        let raw = h.transpose() * weighted;
        let matrix = (&raw + raw.transpose()) * 0.5;
        let dim = matrix.nrows();

        let eig = SymmetricEigen::new(matrix.clone());
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = DVector::from_iterator(dim, order.iter().map(|&k| eig.eigenvalues[k]));
        let eigenvectors = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());

        let max = eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let threshold = RANK_TOL * max;
        let rank = if max > 0.0 {
            eigenvalues.iter().filter(|&&l| l > threshold).count()
        } else {
            0
        };
        let log_det = (dim > 0 && rank == dim).then(|| eigenvalues.iter().map(|l| l.ln()).sum());
        FisherInfo {
            matrix,
            eigenvalues,
            eigenvectors,
            rank,
            log_det,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.log_det.is_some()
    }

    /// `J_est = −ln det I`, or the infinity marker when rank deficient.
    pub fn j_est(&self) -> Cost {
        match self.log_det {
            Some(v) => Cost::Finite(-v),
            None => Cost::Infinite,
        }
    }

    /// Eigenvector of the smallest eigenvalue.
    pub fn weakest_direction(&self) -> DVector<f64> {
        self.eigenvectors.column(0).into_owned()
    }

    /// `I⁻¹` from the eigen-decomposition, `None` when rank deficient.
    pub fn inverse(&self) -> Option<DMatrix<f64>> {
        if !self.is_full_rank() {
            return None;
        }
        let inv_diag = DMatrix::from_diagonal(&self.eigenvalues.map(|l| 1.0 / l));
        let inv = &self.eigenvectors * inv_diag * self.eigenvectors.transpose();
        Some((&inv + inv.transpose()) * 0.5)
    }
}

pub fn fim(x: &StateTuple, scenario: &Scenario) -> Result<FisherInfo, RangingError> {
    let h = stack_jacobian(x, scenario)?;
    Ok(FisherInfo::from_jacobian(&h, &variances(scenario)))
}

/// `J_est(x)`; infinity is a value, not an error.
pub fn j_est(x: &StateTuple, scenario: &Scenario) -> Result<Cost, RangingError> {
    Ok(fim(x, scenario)?.j_est())
}

/// Unit null-space witness of the stacked Jacobian when the FIM is rank deficient.
pub fn null_direction(x: &StateTuple, scenario: &Scenario) -> Result<Option<DVector<f64>>, RangingError> {
    let info = fim(x, scenario)?;
    if info.is_full_rank() {
        return Ok(None);
    }
    let h = stack_jacobian(x, scenario)?;
    let dim = h.ncols();
    // pad to at least as many rows as columns so the SVD yields a full V
    let mut padded = DMatrix::zeros(h.nrows().max(dim), dim);
    padded.view_mut((0, 0), (h.nrows(), dim)).copy_from(&h);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty state");
    Ok(Some(v_t.row(k).transpose().normalize()))
}

/// 1σ Cramér-Rao ellipse of one agent's position.
#[derive(Clone, Debug, PartialEq)]
pub struct CrlbEllipse {
    pub agent_id: usize,
    pub center: DVector<f64>,
    /// Translation sub-block of `I⁻¹` (m²).
    pub covariance: DMatrix<f64>,
    pub contour: Vec<DVector<f64>>,
}

impl CrlbEllipse {
    fn principal(&self) -> (DVector<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new(self.covariance.clone());
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k].max(0.0)));
        let vecs = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k)).collect::<Vec<_>>());
        (vals, vecs)
    }

    /// 1σ semi-axis lengths, descending.
    pub fn semi_axes(&self) -> DVector<f64> {
        self.principal().0.map(f64::sqrt)
    }

    /// Unit direction of the major axis.
    pub fn major_axis(&self) -> DVector<f64> {
        self.principal().1.column(0).into_owned()
    }

    /// Ratio of the longest to the shortest semi-axis.
    pub fn axis_ratio(&self) -> f64 {
        let a = self.semi_axes();
        a[0] / a[a.len() - 1]
    }

    /// Area of the planar contour (the two largest axes in 3D).
    pub fn area(&self) -> f64 {
        let a = self.semi_axes();
        std::f64::consts::PI * a[0] * a[1]
    }

    /// Rows `(agent_id, x, y[, z])` for CSV export.
    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.contour
            .iter()
            .map(|p| std::iter::once(self.agent_id as f64).chain(p.iter().copied()).collect())
            .collect()
    }
}

fn contour(center: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let probe = CrlbEllipse {
        agent_id: 0,
        center: center.clone(),
        covariance: cov.clone(),
        contour: Vec::new(),
    };
    let (vals, vecs) = probe.principal();
    let (a, b) = (vals[0].sqrt(), vals[1].sqrt());
    let (u, v) = (vecs.column(0), vecs.column(1));
    (0..CONTOUR_POINTS)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / CONTOUR_POINTS as f64;
            center + u * (a * t.cos()) + v * (b * t.sin())
        })
        .collect()
}

/// Per-agent position ellipses from the translation blocks of `I⁻¹`.
pub fn crlb(x: &StateTuple, scenario: &Scenario) -> Result<Vec<CrlbEllipse>, FisherError> {
    let info = fim(x, scenario)?;
    let Some(inv) = info.inverse() else {
        let null_direction = null_direction(x, scenario)?
            .unwrap_or_else(|| info.weakest_direction())
            .iter()
            .copied()
            .collect();
        return Err(FisherError::Unobservable {
            rank: info.rank,
            expected: info.dim(),
            null_direction,
        });
    };
    let mode = x.mode();
    let (n, r) = (mode.dim(), mode.rot_dof());
    Ok((2..=x.agent_count())
        .map(|agent| {
            let off = x.block_offset(agent).expect("non-reference agent") + r;
            let covariance = inv.view((off, off), (n, n)).into_owned();
            let center = x.pose(agent).translation().clone();
            CrlbEllipse {
                agent_id: agent,
                contour: contour(&center, &covariance),
                center,
                covariance,
            }
        })
        .collect())
}
