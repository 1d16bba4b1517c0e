//! Matrix Lie-group kernel for SE(2), SE(3) and the heading-only restriction of SE(3).
//!
//! Tangent coordinates are ordered rotation first, then translation:
//!
//! | mode          | n | m | coordinates              |
//! |---------------|---|---|--------------------------|
//! | `Se2`         | 2 | 3 | `(θ, u_x, u_y)`          |
//! | `Se3Heading`  | 3 | 4 | `(θ_z, u_x, u_y, u_z)`   |
//! | `Se3`         | 3 | 6 | `(φ_x, φ_y, φ_z, u_x, u_y, u_z)` |
//!
//! Perturbations are always applied on the right, `T · exp(δξ^)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

/// Angles below this use Taylor expansions of the `sin θ / θ` style factors.
pub const SMALL_ANGLE: f64 = 1e-7;
/// Distance from π at which `log` refuses to pick a branch.
pub const BRANCH_CUT_MARGIN: f64 = 1e-6;
/// Tolerance for orthonormality, determinant and algebra-membership checks.
pub const STRUCTURE_TOL: f64 = 1e-9;
/// Orthonormality drift above which `oplus` projects a rotation back onto SO(n).
pub const DRIFT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not in the Lie algebra of {mode}: {reason}")]
    NotInAlgebra { mode: GroupMode, reason: String },
    #[error("rotation angle {angle} rad is at or beyond the log branch cut")]
    BranchCut { angle: f64 },
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
}

/// Which group the state lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupMode {
    #[serde(rename = "se2")]
    Se2,
    #[serde(rename = "se3-heading")]
    Se3Heading,
    #[serde(rename = "se3")]
    Se3,
}

impl GroupMode {
    /// Spatial dimension `n`.
    pub fn dim(self) -> usize {
        match self {
            GroupMode::Se2 => 2,
            GroupMode::Se3Heading | GroupMode::Se3 => 3,
        }
    }

    /// Tangent dimension `m`.
    pub fn dof(self) -> usize {
        match self {
            GroupMode::Se2 => 3,
            GroupMode::Se3Heading => 4,
            GroupMode::Se3 => 6,
        }
    }

    /// Number of rotational tangent coordinates.
    pub fn rot_dof(self) -> usize {
        match self {
            GroupMode::Se2 | GroupMode::Se3Heading => 1,
            GroupMode::Se3 => 3,
        }
    }

    /// True when the rotation is parameterized by a single heading angle.
    pub fn is_planar_rotation(self) -> bool {
        self.rot_dof() == 1
    }
}

impl fmt::Display for GroupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupMode::Se2 => "SE(2)",
            GroupMode::Se3Heading => "heading-only SE(3)",
            GroupMode::Se3 => "SE(3)",
        };
        f.write_str(s)
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), ManifoldError> {
    if expected != got {
        return Err(ManifoldError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Skew-symmetric matrix `v^×` of a 3-vector.
pub fn skew3(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0])
}

fn planar_rotation(n: usize, theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    let mut r = DMatrix::identity(n, n);
    r[(0, 0)] = c;
    r[(0, 1)] = -s;
    r[(1, 0)] = s;
    r[(1, 1)] = c;
    r
}

/// `sin θ / θ` and `(1 - cos θ) / θ`, the entries of the SO(2) left Jacobian.
fn planar_jacobian_factors(theta: f64) -> (f64, f64) {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, theta / 2.0 - theta * t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta)
    }
}

/// An element of SO(n), n ∈ {2, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation(DMatrix<f64>);

impl Rotation {
    pub fn identity(n: usize) -> Self {
        Rotation(DMatrix::identity(n, n))
    }

    /// Validates orthonormality and determinant within [`STRUCTURE_TOL`].
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, ManifoldError> {
        if !m.is_square() || !(m.nrows() == 2 || m.nrows() == 3) {
            return Err(ManifoldError::InvalidRotation(format!(
                "expected 2x2 or 3x3, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(ManifoldError::InvalidRotation("non-finite entry".into()));
        }
        let n = m.nrows();
        let ortho = (m.transpose() * &m - DMatrix::<f64>::identity(n, n)).norm();
        if ortho > STRUCTURE_TOL {
            return Err(ManifoldError::InvalidRotation(format!(
                "RᵀR deviates from identity by {ortho:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > STRUCTURE_TOL {
            return Err(ManifoldError::InvalidRotation(format!("det(R) = {det}")));
        }
        Ok(Rotation(m))
    }

    /// Rotation about the vertical axis (about the plane normal in 2D).
    pub fn from_heading(n: usize, theta: f64) -> Self {
        Rotation(planar_rotation(n, theta))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Yaw angle, `atan2(R₁₀, R₀₀)`.
    pub fn heading(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    /// `‖RᵀR − 1‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.dim();
        (self.0.transpose() * &self.0 - DMatrix::<f64>::identity(n, n)).norm()
    }

    /// Projects onto SO(n) with the polar decomposition `U Vᵀ`.
    pub fn reorthonormalized(&self) -> Rotation {
        let svd = self.0.clone().svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = &u * &v_t;
        if r.determinant() < 0.0 {
            let n = self.dim();
            let mut flip = DMatrix::identity(n, n);
            flip[(n - 1, n - 1)] = -1.0;
            r = u * flip * v_t;
        }
        Rotation(r)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(&self.0 * &other.0)
    }

    /// Rotation-only log, `ln(R)^∨`, with `rot_dof` coordinates for the given mode.
    pub fn log(&self, mode: GroupMode) -> Result<DVector<f64>, ManifoldError> {
        check_len(mode.dim(), self.dim())?;
        match mode {
            GroupMode::Se2 | GroupMode::Se3Heading => {
                let theta = self.heading();
                if theta.abs() >= PI - BRANCH_CUT_MARGIN {
                    return Err(ManifoldError::BranchCut { angle: theta });
                }
                Ok(DVector::from_element(1, theta))
            }
            GroupMode::Se3 => so3_log(&self.0).map(|(phi, _)| phi),
        }
    }
}

/// Returns `(φ, θ)` for a 3x3 rotation.
fn so3_log(r: &DMatrix<f64>) -> Result<(DVector<f64>, f64), ManifoldError> {
    let w = DVector::from_vec(vec![
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    ]);
    let cos = 0.5 * (r.trace() - 1.0);
    let sin = w.norm();
    let theta = sin.atan2(cos);
    if theta >= PI - BRANCH_CUT_MARGIN {
        return Err(ManifoldError::BranchCut { angle: theta });
    }
    let phi = if theta < SMALL_ANGLE {
        w * (1.0 + theta * theta / 6.0)
    } else {
        w * (theta / sin)
    };
    Ok((phi, theta))
}

/// Left Jacobian of SO(3) and its inverse.
fn so3_left_jacobian(phi: &[f64]) -> DMatrix<f64> {
    let theta = (phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]).sqrt();
    let k = skew3(phi);
    let k2 = &k * &k;
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5, 1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    DMatrix::identity(3, 3) + k * a + k2 * b
}

fn so3_left_jacobian_inv(phi: &[f64]) -> DMatrix<f64> {
    let theta = (phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]).sqrt();
    let k = skew3(phi);
    let k2 = &k * &k;
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    DMatrix::identity(3, 3) - k * 0.5 + k2 * c
}

/// Inverse left Jacobian of the rotation log, used by attitude residuals.
/// For the planar modes this is the scalar 1.
pub fn rotation_left_jacobian_inv(mode: GroupMode, phi: &DVector<f64>) -> DMatrix<f64> {
    match mode {
        GroupMode::Se2 | GroupMode::Se3Heading => DMatrix::identity(1, 1),
        GroupMode::Se3 => so3_left_jacobian_inv(phi.as_slice()),
    }
}

/// Rotation exponential for the rotational tangent block of `mode`.
pub fn rotation_exp(mode: GroupMode, phi: &DVector<f64>) -> Result<Rotation, ManifoldError> {
    check_len(mode.rot_dof(), phi.len())?;
    Ok(match mode {
        GroupMode::Se2 | GroupMode::Se3Heading => Rotation(planar_rotation(mode.dim(), phi[0])),
        GroupMode::Se3 => {
            let theta = phi.norm();
            let k = skew3(phi.as_slice());
            let k2 = &k * &k;
            let (a, b) = if theta < SMALL_ANGLE {
                (1.0, 0.5)
            } else {
                (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
            };
            Rotation(DMatrix::identity(3, 3) + k * a + k2 * b)
        }
    })
}

/// A rigid-body transform `[[C, r], [0, 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    rotation: Rotation,
    translation: DVector<f64>,
}

impl Pose {
    pub fn identity(n: usize) -> Self {
        Pose {
            rotation: Rotation::identity(n),
            translation: DVector::zeros(n),
        }
    }

    pub fn new(rotation: Rotation, translation: DVector<f64>) -> Result<Self, ManifoldError> {
        check_len(rotation.dim(), translation.len())?;
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Planar pose from heading and translation (2D, or 3D with zero roll/pitch).
    pub fn from_heading(theta: f64, translation: &[f64]) -> Self {
        Pose {
            rotation: Rotation::from_heading(translation.len(), theta),
            translation: DVector::from_column_slice(translation),
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &DVector<f64> {
        &self.translation
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn heading(&self) -> f64 {
        self.rotation.heading()
    }

    pub fn to_homogeneous(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut t = DMatrix::identity(n + 1, n + 1);
        t.view_mut((0, 0), (n, n)).copy_from(self.rotation.matrix());
        t.view_mut((0, n), (n, 1)).copy_from(&self.translation);
        t
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: &self.translation + self.rotation.matrix() * &other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let ct = self.rotation.transpose();
        let translation = -(ct.matrix() * &self.translation);
        Pose {
            rotation: ct,
            translation,
        }
    }

    /// `D T p` for a body-frame point `p` (Euclidean, no trailing 1).
    pub fn transform_point(&self, p: &DVector<f64>) -> DVector<f64> {
        self.rotation.matrix() * p + &self.translation
    }

    pub fn reorthonormalized(&self) -> Pose {
        Pose {
            rotation: self.rotation.reorthonormalized(),
            translation: self.translation.clone(),
        }
    }

    /// `ln(T)^∨` in the tangent convention of `mode`.
    pub fn log(&self, mode: GroupMode) -> Result<DVector<f64>, ManifoldError> {
        log(mode, self)
    }
}

/// `ξ^∧`, the `(n+1)×(n+1)` Lie-algebra matrix.
pub fn wedge(mode: GroupMode, xi: &DVector<f64>) -> Result<DMatrix<f64>, ManifoldError> {
    check_len(mode.dof(), xi.len())?;
    let n = mode.dim();
    let r = mode.rot_dof();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    match mode {
        GroupMode::Se2 => {
            m[(0, 1)] = -xi[0];
            m[(1, 0)] = xi[0];
        }
        GroupMode::Se3Heading => {
            m.view_mut((0, 0), (3, 3))
                .copy_from(&skew3(&[0.0, 0.0, xi[0]]));
        }
        GroupMode::Se3 => {
            m.view_mut((0, 0), (3, 3))
                .copy_from(&skew3(&xi.as_slice()[..3]));
        }
    }
    for k in 0..n {
        m[(k, n)] = xi[r + k];
    }
    Ok(m)
}

/// Inverse of [`wedge`]; rejects matrices outside the algebra of `mode`.
pub fn vee(mode: GroupMode, m: &DMatrix<f64>) -> Result<DVector<f64>, ManifoldError> {
    let n = mode.dim();
    if m.nrows() != n + 1 || m.ncols() != n + 1 {
        return Err(ManifoldError::DimensionMismatch {
            expected: n + 1,
            got: m.nrows(),
        });
    }
    let not_in = |reason: String| ManifoldError::NotInAlgebra { mode, reason };
    let block = m.view((0, 0), (n, n));
    let sym = (block + block.transpose()).norm() * 0.5;
    if sym > STRUCTURE_TOL {
        return Err(not_in(format!("rotation block symmetric part {sym:e}")));
    }
    let last_row = m.row(n).norm();
    if last_row > STRUCTURE_TOL {
        return Err(not_in(format!("last row norm {last_row:e}")));
    }
    let mut xi = DVector::zeros(mode.dof());
    match mode {
        GroupMode::Se2 => xi[0] = m[(1, 0)],
        GroupMode::Se3Heading => {
            let tilt = m[(2, 1)].hypot(m[(0, 2)]);
            if tilt > STRUCTURE_TOL {
                return Err(not_in(format!("roll/pitch generator magnitude {tilt:e}")));
            }
            xi[0] = m[(1, 0)];
        }
        GroupMode::Se3 => {
            xi[0] = m[(2, 1)];
            xi[1] = m[(0, 2)];
            xi[2] = m[(1, 0)];
        }
    }
    let r = mode.rot_dof();
    for k in 0..n {
        xi[r + k] = m[(k, n)];
    }
    Ok(xi)
}

/// Closed-form `exp(ξ^∧)`.
pub fn exp(mode: GroupMode, xi: &DVector<f64>) -> Result<Pose, ManifoldError> {
    check_len(mode.dof(), xi.len())?;
    match mode {
        GroupMode::Se2 | GroupMode::Se3Heading => {
            let theta = xi[0];
            let (a, b) = planar_jacobian_factors(theta);
            let (ux, uy) = (xi[1], xi[2]);
            let mut t = vec![a * ux - b * uy, b * ux + a * uy];
            if mode == GroupMode::Se3Heading {
                t.push(xi[3]);
            }
            Ok(Pose::from_heading(theta, &t))
        }
        GroupMode::Se3 => {
            let phi = xi.rows(0, 3).into_owned();
            let rotation = rotation_exp(mode, &phi)?;
            let jac = so3_left_jacobian(phi.as_slice());
            let translation = jac * xi.rows(3, 3);
            Ok(Pose {
                rotation,
                translation,
            })
        }
    }
}

/// Principal-branch `ln(T)^∨`.
pub fn log(mode: GroupMode, pose: &Pose) -> Result<DVector<f64>, ManifoldError> {
    check_len(mode.dim(), pose.dim())?;
    let t = pose.translation();
    match mode {
        GroupMode::Se2 | GroupMode::Se3Heading => {
            let r = pose.rotation().matrix();
            if mode == GroupMode::Se3Heading {
                let tilt = (r[(0, 2)].powi(2) + r[(1, 2)].powi(2) + (r[(2, 2)] - 1.0).powi(2)).sqrt();
                if tilt > STRUCTURE_TOL {
                    return Err(ManifoldError::NotInAlgebra {
                        mode,
                        reason: format!("pose has roll/pitch (tilt {tilt:e})"),
                    });
                }
            }
            let theta = pose.heading();
            if theta.abs() >= PI - BRANCH_CUT_MARGIN {
                return Err(ManifoldError::BranchCut { angle: theta });
            }
            let (a, b) = planar_jacobian_factors(theta);
            let det = a * a + b * b;
            let ux = (a * t[0] + b * t[1]) / det;
            let uy = (-b * t[0] + a * t[1]) / det;
            let mut xi = vec![theta, ux, uy];
            if mode == GroupMode::Se3Heading {
                xi.push(t[2]);
            }
            Ok(DVector::from_vec(xi))
        }
        GroupMode::Se3 => {
            let (phi, _) = so3_log(pose.rotation().matrix())?;
            let u = so3_left_jacobian_inv(phi.as_slice()) * t;
            let mut xi = DVector::zeros(6);
            xi.rows_mut(0, 3).copy_from(&phi);
            xi.rows_mut(3, 3).copy_from(&u);
            Ok(xi)
        }
    }
}

/// `p^⊙` such that `ξ^∧ p = p^⊙ ξ` for a homogeneous point `p = (ε, η)`.
pub fn odot(mode: GroupMode, p: &DVector<f64>) -> Result<DMatrix<f64>, ManifoldError> {
    let n = mode.dim();
    check_len(n + 1, p.len())?;
    let eta = p[n];
    let r = mode.rot_dof();
    let mut out = DMatrix::zeros(n + 1, mode.dof());
    match mode {
        GroupMode::Se2 | GroupMode::Se3Heading => {
            out[(0, 0)] = -p[1];
            out[(1, 0)] = p[0];
        }
        GroupMode::Se3 => {
            let s = skew3(&p.as_slice()[..3]);
            out.view_mut((0, 0), (3, 3)).copy_from(&(-s));
        }
    }
    for k in 0..n {
        out[(k, r + k)] = eta;
    }
    Ok(out)
}

/// Ordered relative poses `(T_12, …, T_1N)`; Agent 1 is the implicit identity.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTuple {
    mode: GroupMode,
    poses: Vec<Pose>,
    reference: Pose,
}

impl StateTuple {
    /// `poses[k]` is the pose of agent `k + 2` relative to Agent 1.
    pub fn new(mode: GroupMode, poses: Vec<Pose>) -> Result<Self, ManifoldError> {
        for p in &poses {
            check_len(mode.dim(), p.dim())?;
            if mode == GroupMode::Se3Heading {
                // validates zero roll/pitch
                let r = p.rotation().matrix();
                let tilt = (r[(0, 2)].powi(2) + r[(1, 2)].powi(2) + (r[(2, 2)] - 1.0).powi(2)).sqrt();
                if tilt > STRUCTURE_TOL {
                    return Err(ManifoldError::NotInAlgebra {
                        mode,
                        reason: format!("pose has roll/pitch (tilt {tilt:e})"),
                    });
                }
            }
        }
        Ok(StateTuple {
            mode,
            poses,
            reference: Pose::identity(mode.dim()),
        })
    }

    pub fn mode(&self) -> GroupMode {
        self.mode
    }

    /// Number of agents, including the reference agent.
    pub fn agent_count(&self) -> usize {
        self.poses.len() + 1
    }

    /// Length of the stacked tangent vector, `m(N−1)`.
    pub fn tangent_dim(&self) -> usize {
        self.mode.dof() * self.poses.len()
    }

    /// The free poses, agents `2..=N` in order.
    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Pose of `agent` (1-based) relative to Agent 1. Agent 1 is the identity.
    ///
    /// Panics if `agent` is 0 or greater than N.
    pub fn pose(&self, agent: usize) -> &Pose {
        assert!(agent >= 1 && agent <= self.agent_count(), "agent {agent} out of range");
        if agent == 1 {
            &self.reference
        } else {
            &self.poses[agent - 2]
        }
    }

    /// Column offset of `agent`'s block in the stacked tangent, `None` for Agent 1.
    pub fn block_offset(&self, agent: usize) -> Option<usize> {
        (agent >= 2).then(|| (agent - 2) * self.mode.dof())
    }

    /// `x ⊕ δx`: right-multiplies each pose by the exponential of its tangent block,
    /// re-orthonormalizing rotations that drift past `DRIFT_TOL`.
    pub fn oplus(&self, dx: &DVector<f64>) -> Result<StateTuple, ManifoldError> {
        check_len(self.tangent_dim(), dx.len())?;
        let m = self.mode.dof();
        let poses = self
            .poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                let block = dx.rows(k * m, m).into_owned();
                exp(self.mode, &block).map(|d| {
                    let moved = pose.compose(&d);
                    if moved.rotation().orthonormality_error() <= DRIFT_TOL {
                        moved
                    } else if self.mode.is_planar_rotation() {
                        // nearest rotation of a planar block is the one with the same heading
                        Pose::from_heading(moved.heading(), moved.translation().as_slice())
                    } else {
                        moved.reorthonormalized()
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StateTuple {
            mode: self.mode,
            poses,
            reference: self.reference.clone(),
        })
    }

    /// Stacked `ln(T_self⁻¹ T_other)^∨` per agent, the right-perturbation error of `other`.
    pub fn boxminus(&self, other: &StateTuple) -> Result<DVector<f64>, ManifoldError> {
        if self.mode != other.mode {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.mode.dof(),
                got: other.mode.dof(),
            });
        }
        check_len(self.poses.len(), other.poses.len())?;
        let m = self.mode.dof();
        let mut out = DVector::zeros(self.tangent_dim());
        for (k, (a, b)) in self.poses.iter().zip(&other.poses).enumerate() {
            let xi = log(self.mode, &a.inverse().compose(b))?;
            out.rows_mut(k * m, m).copy_from(&xi);
        }
        Ok(out)
    }
}
