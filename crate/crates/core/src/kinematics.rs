//! Denavit-Hartenberg kinematics for serial revolute arms.
//!
//! Link transforms use the modified (proximal) convention: each link carries
//! the twist and length of the *previous* axis (`alpha_{i-1}`, `a_{i-1}`)
//! together with its own offset `d_i` and joint angle `theta_i`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6xX, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default arm description: the five joints of the reference desktop arm.
pub const ARM_TABLE1: &str = include_str!("../assets/arm_table1.json");

const RIGID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinematicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: chain has {expected} joints, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("target at {distance:.4} m is outside the reach of {reach:.4} m")]
    OutOfWorkspace { distance: f64, reach: f64 },
    #[error(
        "no convergence after {iterations} iterations \
         (position residual {position_residual:.3e} m, rotation residual {rotation_residual:.3e} rad)"
    )]
    Unreachable {
        iterations: usize,
        position_residual: f64,
        rotation_residual: f64,
        best: JointVector,
    },
    #[error("chain config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, KinematicsError>;

/// One row of a DH table. Angles are radians, lengths meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhLink {
    pub alpha: f64,
    pub a: f64,
    pub d: f64,
    pub theta_home: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl DhLink {
    pub fn new(alpha: f64, a: f64, d: f64, theta_home: f64, theta_min: f64, theta_max: f64) -> Result<Self> {
        let values = [alpha, a, d, theta_home, theta_min, theta_max];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidArgument(
                "link parameters must be finite".into(),
            ));
        }
        if theta_min >= theta_max {
            return Err(KinematicsError::InvalidArgument(format!(
                "joint range is empty: [{theta_min}, {theta_max}]"
            )));
        }
        if !(alpha > -PI && alpha <= PI) {
            return Err(KinematicsError::InvalidArgument(format!(
                "link twist {alpha} outside (-pi, pi]"
            )));
        }
        Ok(Self {
            alpha,
            a,
            d,
            theta_home,
            theta_min,
            theta_max,
        })
    }

    /// A link with all geometric parameters zero and a symmetric +-pi range.
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            a: 0.0,
            d: 0.0,
            theta_home: 0.0,
            theta_min: -PI,
            theta_max: PI,
        }
    }
}

/// Homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform4(Matrix4<f64>);

impl Transform4 {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Validates that `m` is rigid: bottom row `[0,0,0,1]`, orthonormal
    /// rotation block with determinant +1.
    pub fn try_from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidArgument(
                "transform has non-finite entries".into(),
            ));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(KinematicsError::InvalidArgument(
                "transform bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        let t = Self(m);
        if orthonormality_error(&t.rotation()) > RIGID_TOL || (t.rotation().determinant() - 1.0).abs() > RIGID_TOL {
            return Err(KinematicsError::InvalidArgument(
                "rotation block is not a proper rotation".into(),
            ));
        }
        Ok(t)
    }

    pub fn from_parts(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts(&Rotation3::identity(), translation)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation()))
    }

    /// `self * rhs`: apply `rhs` in the frame of `self`.
    pub fn compose(&self, rhs: &Transform4) -> Transform4 {
        Transform4(self.0 * rhs.0)
    }

    pub fn inverse(&self) -> Transform4 {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Self::from_parts(&Rotation3::from_matrix_unchecked(rt), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.0 * p.push(1.0);
        Vector3::new(h[0], h[1], h[2])
    }

    /// Max-norm of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation())
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Joint angles in radians, one per link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(Vec<f64>);

impl JointVector {
    pub fn new(q: Vec<f64>) -> Self {
        Self(q)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for JointVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointVector {
    fn from(q: Vec<f64>) -> Self {
        Self(q)
    }
}

/// End-effector position and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn from_transform(t: &Transform4) -> Self {
        Self {
            position: t.translation(),
            orientation: t.quaternion(),
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn to_transform(&self) -> Transform4 {
        Transform4::from_parts(&self.orientation.to_rotation_matrix(), self.position)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.position;
        let q = self.orientation.quaternion();
        write!(
            f,
            "p=({:.4}, {:.4}, {:.4}) q=({:.4}, {:.4}, {:.4}, {:.4})",
            p.x, p.y, p.z, q.w, q.i, q.j, q.k
        )
    }
}

/// Ordered links plus the fixed end-effector to camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DhChain {
    links: Vec<DhLink>,
    mount: Transform4,
}

impl DhChain {
    pub fn new(links: Vec<DhLink>, mount: Transform4) -> Result<Self> {
        if links.is_empty() {
            return Err(KinematicsError::InvalidArgument(
                "a chain needs at least one link".into(),
            ));
        }
        let mount = Transform4::try_from_matrix(*mount.matrix())?;
        Ok(Self { links, mount })
    }

    /// The shipped five-joint arm with a 5 cm camera offset along the flange z axis.
    pub fn table1() -> Self {
        ChainConfig::from_json(ARM_TABLE1)
            .and_then(|c| c.to_chain())
            .expect("bundled arm description is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        ChainConfig::from_json(text)?.to_chain()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| KinematicsError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// Appends the optional sixth wrist-roll joint.
    pub fn with_wrist_roll(mut self) -> Self {
        self.links.push(wrist_roll_link());
        self
    }

    pub fn links(&self) -> &[DhLink] {
        &self.links
    }

    pub fn mount(&self) -> &Transform4 {
        &self.mount
    }

    pub fn with_mount(mut self, mount: Transform4) -> Result<Self> {
        self.mount = Transform4::try_from_matrix(*mount.matrix())?;
        Ok(self)
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Upper bound on the distance from the base origin to the flange.
    pub fn reach(&self) -> f64 {
        self.links.iter().map(|l| l.a.abs() + l.d.abs()).sum()
    }

    /// Rest configuration: zero joint offset, clamped into range.
    pub fn home(&self) -> JointVector {
        let q = JointVector::zeros(self.dof());
        clamp_joints(self, &q).map(|(q, _)| q).unwrap_or(q)
    }

    /// Uniform sample inside the joint limits.
    pub fn sample_joints<R: Rng + ?Sized>(&self, rng: &mut R) -> JointVector {
        JointVector(
            self.links
                .iter()
                .map(|l| rng.random_range(l.theta_min..=l.theta_max))
                .collect(),
        )
    }

    fn check_len(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.links.len() {
            return Err(KinematicsError::Dimension {
                expected: self.links.len(),
                got: q.len(),
            });
        }
        Ok(())
    }
}

fn wrist_roll_link() -> DhLink {
    DhLink {
        alpha: PI / 2.0,
        a: 0.0,
        d: 0.0,
        theta_home: 0.0,
        theta_min: (-120f64).to_radians(),
        theta_max: 120f64.to_radians(),
    }
}

/// On-disk arm description. Angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub mount: MountConfig,
    #[serde(default)]
    pub wrist_roll: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub alpha_deg: f64,
    pub a: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_home_deg: f64,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountConfig {
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

impl Default for MountConfig {
    fn default() -> Self {
        Self {
            translation: [0.0, 0.0, 0.05],
            rpy_deg: [0.0; 3],
        }
    }
}

impl ChainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KinematicsError::Config(e.to_string()))
    }

    pub fn to_chain(&self) -> Result<DhChain> {
        let links = self
            .links
            .iter()
            .map(|l| {
                DhLink::new(
                    l.alpha_deg.to_radians(),
                    l.a,
                    l.d,
                    l.theta_home_deg.to_radians(),
                    l.theta_min_deg.to_radians(),
                    l.theta_max_deg.to_radians(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let [r, p, y] = self.mount.rpy_deg.map(f64::to_radians);
        let mount = Transform4::from_parts(
            &Rotation3::from_euler_angles(r, p, y),
            Vector3::from(self.mount.translation),
        );
        let chain = DhChain::new(links, mount)?;
        Ok(if self.wrist_roll {
            chain.with_wrist_roll()
        } else {
            chain
        })
    }
}

/// Transform of frame `i` relative to frame `i-1` for joint angle `theta`
/// (added to the link's home offset). Limits are not enforced here.
pub fn dh_link_transform(link: &DhLink, theta: f64) -> Result<Transform4> {
    if !theta.is_finite() {
        return Err(KinematicsError::InvalidArgument(format!(
            "joint angle {theta} is not finite"
        )));
    }
    let th = link.theta_home + theta;
    let (st, ct) = th.sin_cos();
    let (sa, ca) = link.alpha.sin_cos();
    Ok(Transform4(Matrix4::new(
        ct,
        -st,
        0.0,
        link.a,
        st * ca,
        ct * ca,
        -sa,
        -sa * link.d,
        st * sa,
        ct * sa,
        ca,
        ca * link.d,
        0.0,
        0.0,
        0.0,
        1.0,
    )))
}

/// `A_1 A_2 ... A_n`, flange relative to base. The camera mount is not applied.
pub fn forward_kinematics(chain: &DhChain, q: &[f64]) -> Result<Transform4> {
    Ok(*forward_frames(chain, q)?.last().expect("chain has at least one link"))
}

/// Cumulative frames: entry `k` is `A_1 ... A_{k+1}`.
pub fn forward_frames(chain: &DhChain, q: &[f64]) -> Result<Vec<Transform4>> {
    chain.check_len(q)?;
    let mut acc = Transform4::identity();
    chain
        .links
        .iter()
        .zip(q)
        .map(|(link, &theta)| {
            acc = acc.compose(&dh_link_transform(link, theta)?);
            Ok(acc)
        })
        .collect()
}

/// Camera pose in the base frame: `FK(q) * M_c`.
pub fn camera_pose(chain: &DhChain, q: &[f64]) -> Result<Transform4> {
    Ok(forward_kinematics(chain, q)?.compose(&chain.mount))
}

/// Geometric Jacobian of the flange: rows 0..3 linear velocity, rows 3..6
/// angular velocity, both in the base frame.
pub fn jacobian(chain: &DhChain, q: &[f64]) -> Result<Matrix6xX<f64>> {
    let frames = forward_frames(chain, q)?;
    let p_end = frames.last().expect("non-empty").translation();
    let mut jac = Matrix6xX::zeros(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        // Joint i rotates about the z axis of frame i in this convention.
        let z = frame.rotation().column(2).into_owned();
        let lin = z.cross(&(p_end - frame.translation()));
        jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    Ok(jac)
}

/// Clamps each joint into its range; the flag reports whether anything moved.
pub fn clamp_joints(chain: &DhChain, q: &[f64]) -> Result<(JointVector, bool)> {
    chain.check_len(q)?;
    let mut clamped = false;
    let out = chain
        .links
        .iter()
        .zip(q)
        .map(|(l, &v)| {
            let c = v.clamp(l.theta_min, l.theta_max);
            clamped |= c != v;
            c
        })
        .collect();
    Ok((JointVector(out), clamped))
}

/// Rotation angle between two orientations.
pub fn orientation_error(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub pos_tol: f64,
    pub rot_tol: f64,
    /// Iteration budget per start configuration.
    pub max_iters: usize,
    pub damping: f64,
    pub max_step: f64,
    /// Ignore orientation entirely (3-row task).
    pub position_only: bool,
    /// After `q0` fails, retry from fixed shoulder/elbow branch seeds.
    pub branch_seeds: bool,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            pos_tol: 1e-3,
            rot_tol: 1e-2,
            max_iters: 200,
            damping: 0.05,
            max_step: 0.2,
            position_only: false,
            branch_seeds: true,
        }
    }
}

impl IkOptions {
    pub fn position_only() -> Self {
        Self {
            position_only: true,
            ..Self::default()
        }
    }

    /// A single descent from `q0`, no fallback seeds.
    pub fn local(self) -> Self {
        Self {
            branch_seeds: false,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
}

/// Damped least squares on the geometric Jacobian, projecting onto the joint
/// limits after every step.
///
/// The descent from `q0` runs first and its solution wins if it converges.
/// Otherwise, when `opts.branch_seeds` is set, the same descent is repeated
/// from the seeds of [`branch_seeds`] in order and the first convergent one is
/// returned. `iterations` counts every step taken across starts.
pub fn inverse_kinematics(chain: &DhChain, target: &Pose, q0: &[f64], opts: &IkOptions) -> Result<IkSolution> {
    chain.check_len(q0)?;
    if target.position.iter().any(|v| !v.is_finite()) {
        return Err(KinematicsError::InvalidArgument("target position is not finite".into()));
    }
    let distance = target.position.norm();
    let reach = chain.reach();
    if distance > reach + 1e-12 {
        return Err(KinematicsError::OutOfWorkspace { distance, reach });
    }

    let (start, _) = clamp_joints(chain, q0)?;
    let mut spent = 0;
    let mut best = match descend(chain, target, &start, opts)? {
        Descent::Converged(sol) => return Ok(sol),
        Descent::Failed { best, cost } => {
            spent += opts.max_iters;
            (cost, best)
        }
    };
    if opts.branch_seeds {
        for seed in branch_seeds(chain, &target.position) {
            match descend(chain, target, &seed, opts)? {
                Descent::Converged(mut sol) => {
                    sol.iterations += spent;
                    return Ok(sol);
                }
                Descent::Failed { best: b, cost } => {
                    spent += opts.max_iters;
                    if cost < best.0 {
                        best = (cost, b);
                    }
                }
            }
        }
    }
    let b = best.1;
    Err(KinematicsError::Unreachable {
        iterations: spent,
        position_residual: b.position_error,
        rotation_residual: b.rotation_error,
        best: b.q,
    })
}

/// Start configurations covering both shoulder headings and both elbow
/// bends: the first joint faces the target (or away from it, over the top),
/// the next two take fixed bends, the rest sit mid-range. Empty for chains
/// with fewer than three joints.
pub fn branch_seeds(chain: &DhChain, target: &Vector3<f64>) -> Vec<JointVector> {
    if chain.dof() < 3 {
        return Vec::new();
    }
    let links = chain.links();
    let heading = target.y.atan2(target.x);
    let mid: Vec<f64> = links.iter().map(|l| 0.5 * (l.theta_min + l.theta_max)).collect();
    let mut seeds = Vec::new();
    for yaw in [heading, heading + PI, heading - PI] {
        if yaw < links[0].theta_min || yaw > links[0].theta_max {
            continue;
        }
        for (shoulder, elbow) in [(-45.0f64, 90.0f64), (-45.0, -90.0), (-135.0, 90.0), (-135.0, -90.0)] {
            let mut q = mid.clone();
            q[0] = yaw;
            q[1] = shoulder.to_radians();
            q[2] = elbow.to_radians();
            for (v, l) in q.iter_mut().zip(links) {
                *v = v.clamp(l.theta_min, l.theta_max);
            }
            seeds.push(JointVector(q));
        }
    }
    seeds
}

enum Descent {
    Converged(IkSolution),
    Failed { best: IkSolution, cost: f64 },
}

fn descend(chain: &DhChain, target: &Pose, start: &JointVector, opts: &IkOptions) -> Result<Descent> {
    let rows = if opts.position_only { 3 } else { 6 };
    let mut q = start.clone();
    let mut best: Option<(f64, IkSolution)> = None;
    let lambda2 = opts.damping * opts.damping;

    for iter in 0..=opts.max_iters {
        let fk = forward_kinematics(chain, &q)?;
        let pos_err = target.position - fk.translation();
        let current = fk.quaternion();
        let rot_err = (target.orientation * current.inverse()).scaled_axis();
        let pe = pos_err.norm();
        let re = if opts.position_only { 0.0 } else { rot_err.norm() };

        let cost = pe + re;
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((
                cost,
                IkSolution {
                    q: q.clone(),
                    iterations: iter,
                    position_error: pe,
                    rotation_error: orientation_error(&target.orientation, &current),
                },
            ));
        }
        if pe <= opts.pos_tol && re <= opts.rot_tol {
            return Ok(Descent::Converged(IkSolution {
                q,
                iterations: iter,
                position_error: pe,
                rotation_error: re,
            }));
        }
        if iter == opts.max_iters {
            break;
        }

        let full = jacobian(chain, &q)?;
        let jac = DMatrix::from_fn(rows, chain.dof(), |r, c| full[(r, c)]);
        let err = DVector::from_fn(rows, |r, _| if r < 3 { pos_err[r] } else { rot_err[r - 3] });
        let jjt = &jac * jac.transpose() + DMatrix::identity(rows, rows) * lambda2;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&err)) else {
            break;
        };
        let mut dq = jac.transpose() * y;
        let largest = dq.amax();
        if largest > opts.max_step {
            dq *= opts.max_step / largest;
        }
        let stepped: Vec<f64> = q.iter().zip(dq.iter()).map(|(a, b)| a + b).collect();
        q = clamp_joints(chain, &stepped)?.0;
    }

    let (cost, best) = best.expect("at least one iteration evaluated");
    Ok(Descent::Failed { best, cost })
}
