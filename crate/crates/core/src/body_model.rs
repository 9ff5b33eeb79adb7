//! Parametric body model: blend shapes, joint regression and linear blend
//! skinning over a kinematic tree.
//!
//! The model file is a single JSON document with flat row-major arrays:
//!
//! ```json
//! { "vertex_count": V, "joint_count": K, "shape_count": B,
//!   "template": [V*3], "shape_basis": [B*V*3],
//!   "joint_regressor": [K*V], "skin_weights": [V*K],
//!   "parents": [K], "pose_basis": [(K-1)*9*V*3]?, "faces": [F*3]? }
//! ```
//!
//! `parents[0]` is `-1`. A real SMPL export uses V = 6890, K = 24, B = 10.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Real SMPL dimensions, kept as documented defaults.
pub const SMPL_VERTEX_COUNT: usize = 6890;
pub const SMPL_JOINT_COUNT: usize = 24;
pub const SMPL_SHAPE_COUNT: usize = 10;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyModelFile", into = "BodyModelFile")]
pub struct BodyModelSpec {
    vertex_count: usize,
    joint_count: usize,
    shape_count: usize,
    template: Vec<Vec3>,
    /// `shape_basis[b][v]`
    shape_basis: Vec<Vec<Vec3>>,
    /// K × V
    joint_regressor: Matrix,
    /// V × K
    skin_weights: Matrix,
    parents: Vec<Option<usize>>,
    /// `pose_basis[(k - 1) * 9 + e][v]`, `e` indexing the row-major 3×3 entries of `R_k - I`.
    pose_basis: Option<Vec<Vec<Vec3>>>,
    faces: Vec<[usize; 3]>,
    /// Parents-before-children traversal of the kinematic tree.
    order: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BodyModelFile {
    vertex_count: usize,
    joint_count: usize,
    shape_count: usize,
    template: Vec<f64>,
    shape_basis: Vec<f64>,
    joint_regressor: Vec<f64>,
    skin_weights: Vec<f64>,
    parents: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose_basis: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    faces: Option<Vec<usize>>,
}

fn check_len(path: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::model(path, format!("expected {want} values, got {got}")));
    }
    Ok(())
}

fn check_finite(path: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::model(format!("{path}[{i}]"), "non-finite value"));
    }
    Ok(())
}

fn to_points(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn flatten_points(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Breadth-first order from the root; fails on multiple roots, bad indices or cycles.
fn traversal_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let k = parents.len();
    if k == 0 {
        return Err(Error::model("parents", "at least one joint required"));
    }
    if parents[0].is_some() {
        return Err(Error::model("parents[0]", "joint 0 must be the root (-1)"));
    }
    let mut children = vec![Vec::new(); k];
    for (j, p) in parents.iter().enumerate().skip(1) {
        match p {
            None => return Err(Error::model(format!("parents[{j}]"), "only joint 0 may be a root")),
            Some(p) if *p >= k => {
                return Err(Error::model(format!("parents[{j}]"), format!("index {p} out of range")))
            }
            Some(p) => children[*p].push(j),
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut queue = VecDeque::from([0]);
    while let Some(j) = queue.pop_front() {
        order.push(j);
        queue.extend(children[j].iter().copied());
    }
    if order.len() != k {
        let missing = (0..k).find(|j| !order.contains(j)).unwrap_or(0);
        return Err(Error::model(
            format!("parents[{missing}]"),
            "joint not reachable from root (cycle)",
        ));
    }
    Ok(order)
}

impl TryFrom<BodyModelFile> for BodyModelSpec {
    type Error = Error;

    fn try_from(f: BodyModelFile) -> Result<Self> {
        let (v, k, b) = (f.vertex_count, f.joint_count, f.shape_count);
        if v == 0 || k == 0 {
            return Err(Error::model("vertex_count", "vertex and joint counts must be positive"));
        }
        check_len("template", f.template.len(), v * 3)?;
        check_finite("template", &f.template)?;
        check_len("shape_basis", f.shape_basis.len(), b * v * 3)?;
        check_finite("shape_basis", &f.shape_basis)?;
        check_len("joint_regressor", f.joint_regressor.len(), k * v)?;
        check_finite("joint_regressor", &f.joint_regressor)?;
        check_len("skin_weights", f.skin_weights.len(), v * k)?;
        check_finite("skin_weights", &f.skin_weights)?;
        check_len("parents", f.parents.len(), k)?;
        if let Some(pb) = &f.pose_basis {
            check_len("pose_basis", pb.len(), k.saturating_sub(1) * 9 * v * 3)?;
            check_finite("pose_basis", pb)?;
        }

        let parents = f
            .parents
            .iter()
            .enumerate()
            .map(|(j, &p)| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::model(format!("parents[{j}]"), format!("invalid parent {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let faces = match f.faces {
            None => Vec::new(),
            Some(flat) => {
                if flat.len() % 3 != 0 {
                    return Err(Error::model("faces", "length must be a multiple of 3"));
                }
                if let Some(i) = flat.iter().position(|&idx| idx >= v) {
                    return Err(Error::model(format!("faces[{i}]"), "vertex index out of range"));
                }
                flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
            }
        };

        let shape_basis = f.shape_basis.chunks_exact(v * 3).map(to_points).collect();
        let pose_basis = f
            .pose_basis
            .map(|pb| pb.chunks_exact(v * 3).map(to_points).collect());

        let spec = BodyModelSpec {
            vertex_count: v,
            joint_count: k,
            shape_count: b,
            template: to_points(&f.template),
            shape_basis,
            joint_regressor: Matrix::from_vec(k, v, f.joint_regressor)?,
            skin_weights: Matrix::from_vec(v, k, f.skin_weights)?,
            order: traversal_order(&parents)?,
            parents,
            pose_basis,
            faces,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<BodyModelSpec> for BodyModelFile {
    fn from(s: BodyModelSpec) -> Self {
        BodyModelFile {
            vertex_count: s.vertex_count,
            joint_count: s.joint_count,
            shape_count: s.shape_count,
            template: flatten_points(&s.template),
            shape_basis: s.shape_basis.iter().flat_map(|d| flatten_points(d)).collect(),
            joint_regressor: s.joint_regressor.into_data(),
            skin_weights: s.skin_weights.into_data(),
            parents: s.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            pose_basis: s
                .pose_basis
                .map(|pb| pb.iter().flat_map(|d| flatten_points(d)).collect()),
            faces: if s.faces.is_empty() {
                None
            } else {
                Some(s.faces.iter().flatten().copied().collect())
            },
        }
    }
}

impl BodyModelSpec {
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn shape_count(&self) -> usize {
        self.shape_count
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn shape_direction(&self, b: usize) -> &[Vec3] {
        &self.shape_basis[b]
    }

    pub fn joint_regressor(&self) -> &Matrix {
        &self.joint_regressor
    }

    pub fn skin_weights(&self) -> &Matrix {
        &self.skin_weights
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn has_pose_basis(&self) -> bool {
        self.pose_basis.is_some()
    }

    /// Replaces (or removes) the pose-corrective basis.
    pub fn with_pose_basis(mut self, basis: Option<Vec<Vec<Vec3>>>) -> Result<Self> {
        if let Some(pb) = &basis {
            let want = self.joint_count.saturating_sub(1) * 9;
            if pb.len() != want || pb.iter().any(|d| d.len() != self.vertex_count) {
                return Err(Error::model("pose_basis", format!("expected {want} directions of {} vertices", self.vertex_count)));
            }
        }
        self.pose_basis = basis;
        Ok(self)
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        let (v, k) = (self.vertex_count, self.joint_count);
        if self.template.len() != v {
            return Err(Error::model("template", "vertex count mismatch"));
        }
        if self.shape_basis.len() != self.shape_count
            || self.shape_basis.iter().any(|d| d.len() != v)
        {
            return Err(Error::model("shape_basis", "dimension mismatch"));
        }
        if self.joint_regressor.rows() != k || self.joint_regressor.cols() != v {
            return Err(Error::model("joint_regressor", "dimension mismatch"));
        }
        for j in 0..k {
            let row = self.joint_regressor.row(j);
            if let Some(c) = row.iter().position(|&w| w < 0.0) {
                return Err(Error::model(format!("joint_regressor[{j}][{c}]"), "negative weight"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::model(format!("joint_regressor[{j}]"), format!("row sums to {sum}, expected 1")));
            }
        }
        if self.skin_weights.rows() != v || self.skin_weights.cols() != k {
            return Err(Error::model("skin_weights", "dimension mismatch"));
        }
        for i in 0..v {
            let sum: f64 = self.skin_weights.row(i).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::model(format!("skin_weights[{i}]"), format!("row sums to {sum}, expected 1")));
            }
        }
        if self.parents.len() != k {
            return Err(Error::model("parents", "joint count mismatch"));
        }
        traversal_order(&self.parents)?;
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Pose (per-joint axis-angle, radians) and shape coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub pose: Vec<[f64; 3]>,
    pub shape: Vec<f64>,
}

impl BodyParams {
    /// Builds parameters, wrapping every axis-angle so its norm is at most 2π.
    pub fn new(pose: Vec<[f64; 3]>, shape: Vec<f64>) -> Result<Self> {
        if pose.iter().flatten().chain(&shape).any(|v| !v.is_finite()) {
            return Err(Error::Domain("body parameters must be finite".into()));
        }
        let pose = pose.into_iter().map(wrap_axis_angle).collect();
        Ok(Self { pose, shape })
    }

    pub fn zeros(joints: usize, shapes: usize) -> Self {
        Self {
            pose: vec![[0.0; 3]; joints],
            shape: vec![0.0; shapes],
        }
    }
}

fn wrap_axis_angle(aa: [f64; 3]) -> [f64; 3] {
    let v = Vec3::from(aa);
    let angle = v.norm();
    if angle <= TAU {
        return aa;
    }
    let wrapped = angle.rem_euclid(TAU);
    let out = v * (wrapped / angle);
    [out.x, out.y, out.z]
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(aa: [f64; 3]) -> Mat3 {
    let v = Vec3::from(aa);
    let theta = v.norm();
    let skew = |w: &Vec3| Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    if theta < 1e-8 {
        // first-order expansion; exact identity at zero
        return Mat3::identity() + skew(&v);
    }
    let k = skew(&(v / theta));
    Mat3::identity() + k * theta.sin() + (k * k) * (1.0 - theta.cos())
}

/// Proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyOutput {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
}

fn check_params(spec: &BodyModelSpec, params: &BodyParams) -> Result<()> {
    if params.pose.len() != spec.joint_count {
        return Err(Error::shape(format!(
            "pose has {} joints, model has {}",
            params.pose.len(),
            spec.joint_count
        )));
    }
    if params.shape.len() != spec.shape_count {
        return Err(Error::shape(format!(
            "shape has {} coefficients, model has {}",
            params.shape.len(),
            spec.shape_count
        )));
    }
    Ok(())
}

/// Template plus shape blend offsets.
pub fn shaped_template(spec: &BodyModelSpec, shape: &[f64]) -> Vec<Vec3> {
    let mut out = spec.template.clone();
    for (beta, dir) in shape.iter().zip(&spec.shape_basis) {
        for (p, d) in out.iter_mut().zip(dir) {
            *p += d * *beta;
        }
    }
    out
}

/// `J = 𝒥 · vertices`.
pub fn regress_joints(spec: &BodyModelSpec, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
    if vertices.len() != spec.vertex_count {
        return Err(Error::shape(format!(
            "{} vertices given, model has {}",
            vertices.len(),
            spec.vertex_count
        )));
    }
    let joints = (0..spec.joint_count)
        .map(|j| {
            spec.joint_regressor
                .row(j)
                .iter()
                .zip(vertices)
                .fold(Vec3::zeros(), |acc, (&w, v)| acc + v * w)
        })
        .collect();
    Ok(joints)
}

pub fn forward(spec: &BodyModelSpec, params: &BodyParams) -> Result<BodyOutput> {
    forward_rigid(spec, params, &RigidTransform::identity())
}

/// Forward pass with an extra rigid motion applied on top of the root transform.
pub fn forward_rigid(
    spec: &BodyModelSpec,
    params: &BodyParams,
    root: &RigidTransform,
) -> Result<BodyOutput> {
    check_params(spec, params)?;
    let shaped = shaped_template(spec, &params.shape);
    let rest_joints = regress_joints(spec, &shaped)?;
    let rotations: Vec<Mat3> = params.pose.iter().map(|&aa| rodrigues(aa)).collect();

    let mut posed = shaped;
    if let Some(basis) = &spec.pose_basis {
        for k in 1..spec.joint_count {
            let delta = rotations[k] - Mat3::identity();
            for e in 0..9 {
                let coeff = delta[(e / 3, e % 3)];
                if coeff == 0.0 {
                    continue;
                }
                for (p, d) in posed.iter_mut().zip(&basis[(k - 1) * 9 + e]) {
                    *p += d * coeff;
                }
            }
        }
    }

    // Skinning transforms A_k = G_k · T(-J_k), built as A_parent ∘ (rotation of
    // R_k about J_k) so the rest pose yields exact identities.
    let mut skinning = vec![RigidTransform::identity(); spec.joint_count];
    for &k in &spec.order {
        let local = RigidTransform::new(
            rotations[k],
            rest_joints[k] - rotations[k] * rest_joints[k],
        );
        let parent = match spec.parents[k] {
            Some(p) => skinning[p],
            None => *root,
        };
        skinning[k] = parent.compose(&local);
    }

    let joints = skinning
        .iter()
        .zip(&rest_joints)
        .map(|(a, j)| a.apply(j))
        .collect();

    let offsets: Vec<(Mat3, Vec3)> = skinning
        .iter()
        .map(|a| (a.rotation - Mat3::identity(), a.translation))
        .collect();
    let vertices = posed
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut dr = Mat3::zeros();
            let mut dt = Vec3::zeros();
            for (k, &w) in spec.skin_weights.row(i).iter().enumerate() {
                if w != 0.0 {
                    dr += offsets[k].0 * w;
                    dt += offsets[k].1 * w;
                }
            }
            v + dr * v + dt
        })
        .collect();

    Ok(BodyOutput { vertices, joints })
}

/// Deterministic synthetic body model for desk-scale experiments.
///
/// The kinematic tree mixes star branches off the root with chains: joint `k`
/// attaches to the root when `k % 4 == 1`, otherwise to `k - 1`.
pub fn make_toy_model(seed: u64, vertices: usize, joints: usize, shapes: usize) -> Result<BodyModelSpec> {
    if joints == 0 || vertices < joints || shapes == 0 {
        return Err(Error::Domain(format!(
            "toy model needs V >= K >= 1 and B >= 1 (got V={vertices}, K={joints}, B={shapes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parents: Vec<Option<usize>> = (0..joints)
        .map(|k| match k {
            0 => None,
            k if k % 4 == 1 => Some(0),
            k => Some(k - 1),
        })
        .collect();

    let mut anchors = vec![Vec3::zeros(); joints];
    let mut branch_dir = Vec3::new(0.0, 1.0, 0.0);
    for k in 1..joints {
        if k % 4 == 1 {
            let a: f64 = rng.gen_range(0.0..TAU);
            let elev: f64 = rng.gen_range(-1.2..1.2);
            branch_dir = Vec3::new(a.cos() * elev.cos(), elev.sin(), a.sin() * elev.cos() * 0.3);
        }
        let p = parents[k].unwrap_or(0);
        let jitter = Vec3::new(
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
        );
        anchors[k] = anchors[p] + branch_dir * 0.18 + jitter;
    }

    let template: Vec<Vec3> = (0..vertices)
        .map(|i| {
            let a = anchors[i % joints];
            a + Vec3::new(
                rng.gen_range(-0.06..0.06),
                rng.gen_range(-0.06..0.06),
                rng.gen_range(-0.06..0.06),
            )
        })
        .collect();

    let mut regressor = Matrix::zeros(joints, vertices);
    for k in 0..joints {
        let owned: Vec<usize> = (k..vertices).step_by(joints).collect();
        let raw: Vec<f64> = owned.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        for (&i, w) in owned.iter().zip(raw) {
            regressor.set(k, i, w / total);
        }
    }

    let mut skin = Matrix::zeros(vertices, joints);
    for i in 0..vertices {
        let k = i % joints;
        match parents[k] {
            Some(p) => {
                let w: f64 = rng.gen_range(0.6..1.0);
                skin.set(i, k, w);
                skin.set(i, p, 1.0 - w);
            }
            None => skin.set(i, k, 1.0),
        }
    }

    let shape_basis: Vec<Vec<Vec3>> = (0..shapes)
        .map(|b| {
            let global = if b == 0 { 0.03 } else { 0.0 };
            template
                .iter()
                .map(|t| {
                    t * global
                        + Vec3::new(
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                            rng.gen_range(-0.01..0.01),
                        )
                })
                .collect()
        })
        .collect();

    let faces = (0..vertices.saturating_sub(2))
        .map(|i| if i % 2 == 0 { [i, i + 1, i + 2] } else { [i + 1, i, i + 2] })
        .collect();

    let spec = BodyModelSpec {
        vertex_count: vertices,
        joint_count: joints,
        shape_count: shapes,
        template,
        shape_basis,
        joint_regressor: regressor,
        skin_weights: skin,
        order: traversal_order(&parents)?,
        parents,
        pose_basis: None,
        faces,
    };
    spec.validate()?;
    Ok(spec)
}
