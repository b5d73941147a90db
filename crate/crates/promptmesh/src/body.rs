//! Differentiable parametric body layer.
//!
//! Maps (orientation φ, pose θ, shape β, translation τ) to a posed mesh and
//! 3-d joints via shape blendshapes, a rigid kinematic chain, and linear
//! blend skinning. The template is a capsule-person: 512 surface points
//! around a 23-joint tree (pelvis root + 22 posed children).
//!
//! Two forward paths exist: a plain `ndarray` pass used by data generation
//! and evaluation, and a graph pass (`forward_var`) used in training; the
//! tests pin them to each other and to a 4×4 rigid-transform oracle.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{s, Scalar};
use crate::so3;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use std::path::Path;

pub const NUM_JOINTS: usize = 23;
pub const NUM_POSED: usize = 22;
pub const NUM_SHAPE: usize = 10;
pub const TEMPLATE_VERTICES: usize = 512;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine1",
    "spine2",
    "spine3",
    "neck",
    "head",
    "head_top",
    "l_hip",
    "l_knee",
    "l_ankle",
    "l_foot",
    "r_hip",
    "r_knee",
    "r_ankle",
    "r_foot",
    "l_collar",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_collar",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const PARENT: [usize; NUM_JOINTS] = [
    0, // pelvis (root)
    0, 1, 2, 3, 4, 5, // spine1..head_top
    0, 7, 8, 9, // left leg
    0, 11, 12, 13, // right leg
    3, 15, 16, 17, // left arm
    3, 19, 20, 21, // right arm
];

/// Joints whose ground contact the temporal module predicts:
/// toes, heels, hands, knees.
pub const CONTACT_JOINTS: [usize; 8] = [10, 14, 9, 13, 18, 22, 8, 12];
pub const NUM_CONTACT: usize = CONTACT_JOINTS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Camera,
    World,
}

/// Per-person body parameters: root orientation, local pose, shape,
/// camera-space translation.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams<S: Scalar> {
    /// Axis-angle root orientation, radians.
    pub phi: [S; 3],
    /// Axis-angle local pose, one row per posed joint (22×3), radians.
    pub theta: Array2<S>,
    /// Shape coefficients (10).
    pub beta: Array1<S>,
    /// Camera-space translation, meters.
    pub tau: [S; 3],
}

impl<S: Scalar> BodyParams<S> {
    pub fn zeros() -> Self {
        BodyParams {
            phi: [S::zero(); 3],
            theta: Array2::zeros((NUM_POSED, 3)),
            beta: Array1::zeros(NUM_SHAPE),
            tau: [S::zero(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.dim() != (NUM_POSED, 3) {
            return Err(Error::shape(
                "body params",
                format!("theta ({NUM_POSED}, 3)"),
                format!("{:?}", self.theta.dim()),
            ));
        }
        if self.beta.len() != NUM_SHAPE {
            return Err(Error::shape(
                "body params",
                format!("beta ({NUM_SHAPE})"),
                format!("({})", self.beta.len()),
            ));
        }
        let finite = self.phi.iter().all(|x| x.is_finite())
            && self.theta.iter().all(|x| x.is_finite())
            && self.beta.iter().all(|x| x.is_finite())
            && self.tau.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite body parameter".into()));
        }
        Ok(())
    }

    /// Canonicalize all axis-angle entries to norm ≤ π.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        out.phi = so3::canonicalize(out.phi);
        for mut row in out.theta.rows_mut() {
            let c = so3::canonicalize([row[0], row[1], row[2]]);
            row[0] = c[0];
            row[1] = c[1];
            row[2] = c[2];
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> BodyParams<T> {
        BodyParams {
            phi: self.phi.map(|x| T::of_f64(x.to_f64_())),
            theta: self.theta.mapv(|x| T::of_f64(x.to_f64_())),
            beta: self.beta.mapv(|x| T::of_f64(x.to_f64_())),
            tau: self.tau.map(|x| T::of_f64(x.to_f64_())),
        }
    }
}

/// Posed body: vertices and joints in a stated coordinate frame.
#[derive(Clone, Debug)]
pub struct Mesh<S: Scalar> {
    pub vertices: Array2<S>,
    pub joints: Array2<S>,
    pub frame: Frame,
}

/// Evaluation joint sets (regressed from vertices, pelvis at row 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointSet {
    J14,
    J24,
}

impl JointSet {
    pub fn count(self) -> usize {
        match self {
            JointSet::J14 => 14,
            JointSet::J24 => 24,
        }
    }

    pub const PELVIS: usize = 0;
}

/// Mesh-silhouette vertex groups used to simulate face/truncated boxes.
#[derive(Clone, Debug)]
pub struct BoxGroups {
    pub head: Vec<usize>,
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BodyTemplate<S: Scalar> {
    /// Rest vertices, M×3 meters.
    pub vertices: Array2<S>,
    /// Rest joints, 23×3 meters.
    pub joints: Array2<S>,
    /// Kinematic parents (parent[0] is the root itself).
    pub parent: Vec<usize>,
    /// Skinning weights, M×23; rows sum to 1.
    pub skinning: Array2<S>,
    /// Vertex shape basis, 10×3M (row c is the flattened M×3 displacement
    /// field of shape component c).
    pub shape_basis: Array2<S>,
    /// Joint shape basis, 10×(23·3), consistent with `shape_basis`
    /// (skinning-weighted average of vertex displacements; pelvis row is
    /// zero so the root stays at the origin for every β).
    pub joint_basis: Array2<S>,
    /// Evaluation joint regressors, rows sum to 1.
    pub regressor_j24: Array2<S>,
    pub regressor_j14: Array2<S>,
    /// Dominant skinning joint per vertex.
    pub dominant_joint: Vec<usize>,
}

struct Segment {
    a: usize,
    b: usize,
    radius: f64,
    count: usize,
    /// Overrides the b-joint endpoint (used for the hand stubs).
    end_override: Option<[f64; 3]>,
}

const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.00, 0.00, 0.00],   // pelvis
    [0.00, 0.12, 0.00],   // spine1
    [0.00, 0.26, 0.00],   // spine2
    [0.00, 0.40, 0.00],   // spine3
    [0.00, 0.55, 0.00],   // neck
    [0.00, 0.63, 0.00],   // head
    [0.00, 0.78, 0.00],   // head_top
    [0.09, -0.06, 0.00],  // l_hip
    [0.10, -0.50, 0.00],  // l_knee
    [0.10, -0.92, 0.00],  // l_ankle
    [0.10, -0.98, 0.12],  // l_foot
    [-0.09, -0.06, 0.00], // r_hip
    [-0.10, -0.50, 0.00], // r_knee
    [-0.10, -0.92, 0.00], // r_ankle
    [-0.10, -0.98, 0.12], // r_foot
    [0.05, 0.50, 0.00],   // l_collar
    [0.20, 0.52, 0.00],   // l_shoulder
    [0.46, 0.52, 0.00],   // l_elbow
    [0.72, 0.52, 0.00],   // l_wrist
    [-0.05, 0.50, 0.00],  // r_collar
    [-0.20, 0.52, 0.00],  // r_shoulder
    [-0.46, 0.52, 0.00],  // r_elbow
    [-0.72, 0.52, 0.00],  // r_wrist
];

fn segments() -> Vec<Segment> {
    let seg = |a: usize, b: usize, radius: f64, count: usize| Segment {
        a,
        b,
        radius,
        count,
        end_override: None,
    };
    vec![
        seg(0, 1, 0.110, 40),
        seg(1, 2, 0.115, 40),
        seg(2, 3, 0.110, 40),
        seg(3, 4, 0.090, 28),
        seg(4, 5, 0.050, 16),
        seg(5, 6, 0.088, 46),
        seg(0, 7, 0.090, 10),
        seg(0, 11, 0.090, 10),
        seg(7, 8, 0.070, 34),
        seg(11, 12, 0.070, 34),
        seg(8, 9, 0.050, 28),
        seg(12, 13, 0.050, 28),
        seg(9, 10, 0.040, 14),
        seg(13, 14, 0.040, 14),
        seg(15, 16, 0.050, 10),
        seg(19, 20, 0.050, 10),
        seg(16, 17, 0.045, 26),
        seg(20, 21, 0.045, 26),
        seg(17, 18, 0.040, 22),
        seg(21, 22, 0.040, 22),
        Segment {
            a: 18,
            b: 18,
            radius: 0.040,
            count: 7,
            end_override: Some([0.81, 0.52, 0.0]),
        },
        Segment {
            a: 22,
            b: 22,
            radius: 0.040,
            count: 7,
            end_override: Some([-0.81, 0.52, 0.0]),
        },
    ]
}

impl<S: Scalar> BodyTemplate<S> {
    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    /// Build the default capsule-person template. `seed` fixes the eight
    /// free shape-basis directions.
    pub fn build(seed: u64) -> Self {
        let segs = segments();
        let total: usize = segs.iter().map(|sg| sg.count).sum();
        assert_eq!(total, TEMPLATE_VERTICES);

        let mut vertices = Array2::<f64>::zeros((total, 3));
        let mut skinning = Array2::<f64>::zeros((total, NUM_JOINTS));
        let mut dominant = vec![0usize; total];
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let mut row = 0;
        for sg in &segs {
            let pa = REST_JOINTS[sg.a];
            let pb = sg.end_override.unwrap_or(REST_JOINTS[sg.b]);
            let axis = [pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]];
            let alen = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2])
                .sqrt()
                .max(1e-9);
            let dir = [axis[0] / alen, axis[1] / alen, axis[2] / alen];
            // Orthonormal frame around the bone axis.
            let pick = if dir[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            };
            let u = normalize3(cross3(dir, pick));
            let w = cross3(dir, u);
            for i in 0..sg.count {
                let t = (i as f64 + 0.5) / sg.count as f64;
                let ang = golden * i as f64;
                let (ca, sa) = (ang.cos(), ang.sin());
                for c in 0..3 {
                    vertices[(row, c)] =
                        pa[c] + axis[c] * t + sg.radius * (ca * u[c] + sa * w[c]);
                }
                // Bone a→b is driven by joint a; blend toward b past 70 %.
                let wb = if sg.a == sg.b {
                    0.0
                } else {
                    (((t - 0.7) / 0.3).clamp(0.0, 1.0)) * 0.5
                };
                skinning[(row, sg.a)] += 1.0 - wb;
                skinning[(row, sg.b)] += wb;
                dominant[row] = if wb > 0.5 { sg.b } else { sg.a };
                row += 1;
            }
        }

        let joints =
            Array2::from_shape_fn((NUM_JOINTS, 3), |(j, c)| REST_JOINTS[j][c]);

        // Shape basis: component 0 scales height, component 1 scales girth,
        // the rest are small seeded directions orthogonalized against the
        // earlier components.
        let m3 = total * 3;
        let mut basis = Array2::<f64>::zeros((NUM_SHAPE, m3));
        for i in 0..total {
            basis[(0, 3 * i + 1)] = 0.08 * vertices[(i, 1)];
            basis[(1, 3 * i)] = 0.04 * vertices[(i, 0)];
            basis[(1, 3 * i + 2)] = 0.04 * vertices[(i, 2)];
        }
        let mut rng = crate::rng::stream(seed, "template/shape_basis");
        for c in 2..NUM_SHAPE {
            let mut v: Array1<f64> =
                Array1::from_shape_fn(m3, |_| rng.random_range(-1.0..1.0));
            for prev in 0..c {
                let p = basis.row(prev);
                let pn = p.dot(&p);
                if pn > 0.0 {
                    let k = v.dot(&p) / pn;
                    v.zip_mut_with(&p, |x, &pp| *x -= k * pp);
                }
            }
            let norm = v.dot(&v).sqrt().max(1e-12);
            let scale = 0.01 * (m3 as f64).sqrt() / norm;
            basis.row_mut(c).assign(&(v * scale));
        }

        // Joint basis: skinning-weighted average of vertex displacements,
        // pelvis pinned at the origin.
        let mut joint_basis = Array2::<f64>::zeros((NUM_SHAPE, NUM_JOINTS * 3));
        for c in 0..NUM_SHAPE {
            for j in 1..NUM_JOINTS {
                let mut acc = [0.0; 3];
                let mut wsum = 0.0;
                for i in 0..total {
                    let wij = skinning[(i, j)];
                    if wij > 0.0 {
                        wsum += wij;
                        for k in 0..3 {
                            acc[k] += wij * basis[(c, 3 * i + k)];
                        }
                    }
                }
                if wsum > 0.0 {
                    for k in 0..3 {
                        joint_basis[(c, 3 * j + k)] = acc[k] / wsum;
                    }
                }
            }
        }

        let regressor_j24 = build_regressor(&vertices, &j24_targets(&joints));
        let regressor_j14 = build_regressor(&vertices, &j14_targets(&joints));

        BodyTemplate {
            vertices: vertices.mapv(S::of_f64),
            joints: joints.mapv(S::of_f64),
            parent: PARENT.to_vec(),
            skinning: skinning.mapv(S::of_f64),
            shape_basis: basis.mapv(S::of_f64),
            joint_basis: joint_basis.mapv(S::of_f64),
            regressor_j24: regressor_j24.mapv(S::of_f64),
            regressor_j14: regressor_j14.mapv(S::of_f64),
            dominant_joint: dominant,
        }
    }

    pub fn cast<T: Scalar>(&self) -> BodyTemplate<T> {
        BodyTemplate {
            vertices: self.vertices.mapv(|x| T::of_f64(x.to_f64_())),
            joints: self.joints.mapv(|x| T::of_f64(x.to_f64_())),
            parent: self.parent.clone(),
            skinning: self.skinning.mapv(|x| T::of_f64(x.to_f64_())),
            shape_basis: self.shape_basis.mapv(|x| T::of_f64(x.to_f64_())),
            joint_basis: self.joint_basis.mapv(|x| T::of_f64(x.to_f64_())),
            regressor_j24: self.regressor_j24.mapv(|x| T::of_f64(x.to_f64_())),
            regressor_j14: self.regressor_j14.mapv(|x| T::of_f64(x.to_f64_())),
            dominant_joint: self.dominant_joint.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.vertices.nrows();
        if self.skinning.dim() != (m, NUM_JOINTS) {
            return Err(Error::shape(
                "template",
                format!("skinning ({m}, {NUM_JOINTS})"),
                format!("{:?}", self.skinning.dim()),
            ));
        }
        for (i, r) in self.skinning.rows().into_iter().enumerate() {
            let sum: S = r.iter().copied().sum();
            if (sum - S::one()).abs() > s::<S>(1e-6) {
                return Err(Error::Data(format!(
                    "skinning row {i} sums to {sum}, expected 1"
                )));
            }
            if r.iter().any(|&w| w < S::zero()) {
                return Err(Error::Data(format!("skinning row {i} has negative weight")));
            }
        }
        if self.parent.len() != NUM_JOINTS || self.parent[0] != 0 {
            return Err(Error::Data("parent table must root at joint 0".into()));
        }
        for (j, &p) in self.parent.iter().enumerate().skip(1) {
            if p >= j {
                return Err(Error::Data(format!(
                    "parent[{j}] = {p}: parents must precede children"
                )));
            }
        }
        for reg in [&self.regressor_j24, &self.regressor_j14] {
            for (i, r) in reg.rows().into_iter().enumerate() {
                let sum: S = r.iter().copied().sum();
                if (sum - S::one()).abs() > s::<S>(1e-6) {
                    return Err(Error::Data(format!(
                        "regressor row {i} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn regressor(&self, set: JointSet) -> &Array2<S> {
        match set {
            JointSet::J14 => &self.regressor_j14,
            JointSet::J24 => &self.regressor_j24,
        }
    }

    /// Vertex groups for simulated face/truncated boxes.
    pub fn box_groups(&self) -> BoxGroups {
        let head_joints = [4usize, 5, 6];
        let upper_joints: Vec<usize> =
            vec![0, 1, 2, 3, 4, 5, 6, 15, 16, 17, 18, 19, 20, 21, 22];
        let lower_joints: Vec<usize> = vec![7, 8, 9, 10, 11, 12, 13, 14];
        let left_joints: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 16, 17, 18];
        let right_joints: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 6, 11, 12, 13, 14, 19, 20, 21, 22];
        let collect = |joints: &[usize]| {
            self.dominant_joint
                .iter()
                .enumerate()
                .filter(|(_, d)| joints.contains(d))
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        BoxGroups {
            head: collect(&head_joints),
            upper: collect(&upper_joints),
            lower: collect(&lower_joints),
            left: collect(&left_joints),
            right: collect(&right_joints),
        }
    }

    /// Foot vertices (both sides), used by the foot-skating metric.
    pub fn foot_vertices(&self) -> Vec<usize> {
        self.dominant_joint
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 9 || d == 10 || d == 13 || d == 14)
            .map(|(i, _)| i)
            .collect()
    }

    /// Serialize as a named-array archive. Field names and shapes:
    /// `template/vertices` M×3, `template/joints` 23×3, `template/parent`
    /// 23 (i64), `template/skinning` M×23, `template/shape_basis` 10×3M,
    /// `template/joint_basis` 10×69, `template/regressor_j24` 24×M,
    /// `template/regressor_j14` 14×M, `template/dominant_joint` M (i64).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut arc = Archive::new();
        arc.set_str("template/schema", "body-template-v1");
        arc.set_arr2("template/vertices", &self.vertices.mapv(|x| x.to_f64_()));
        arc.set_arr2("template/joints", &self.joints.mapv(|x| x.to_f64_()));
        arc.push(
            "template/parent",
            crate::archive::Entry::I64(
                ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&[NUM_JOINTS]),
                    self.parent.iter().map(|&p| p as i64).collect(),
                )
                .unwrap(),
            ),
        );
        arc.set_arr2("template/skinning", &self.skinning.mapv(|x| x.to_f64_()));
        arc.set_arr2(
            "template/shape_basis",
            &self.shape_basis.mapv(|x| x.to_f64_()),
        );
        arc.set_arr2(
            "template/joint_basis",
            &self.joint_basis.mapv(|x| x.to_f64_()),
        );
        arc.set_arr2(
            "template/regressor_j24",
            &self.regressor_j24.mapv(|x| x.to_f64_()),
        );
        arc.set_arr2(
            "template/regressor_j14",
            &self.regressor_j14.mapv(|x| x.to_f64_()),
        );
        arc.push(
            "template/dominant_joint",
            crate::archive::Entry::I64(
                ndarray::ArrayD::from_shape_vec(
                    ndarray::IxDyn(&[self.dominant_joint.len()]),
                    self.dominant_joint.iter().map(|&p| p as i64).collect(),
                )
                .unwrap(),
            ),
        );
        arc.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let arc = Archive::load(path)?;
        if arc.get_str("template/schema")? != "body-template-v1" {
            return Err(Error::Data("unknown template schema".into()));
        }
        let parent_arr = arc.get_scalar::<f64>("template/parent")?;
        let dom_arr = arc.get_scalar::<f64>("template/dominant_joint")?;
        let t = BodyTemplate {
            vertices: arc.get_arr2::<S>("template/vertices")?,
            joints: arc.get_arr2::<S>("template/joints")?,
            parent: parent_arr.iter().map(|&p| p as usize).collect(),
            skinning: arc.get_arr2::<S>("template/skinning")?,
            shape_basis: arc.get_arr2::<S>("template/shape_basis")?,
            joint_basis: arc.get_arr2::<S>("template/joint_basis")?,
            regressor_j24: arc.get_arr2::<S>("template/regressor_j24")?,
            regressor_j14: arc.get_arr2::<S>("template/regressor_j14")?,
            dominant_joint: dom_arr.iter().map(|&p| p as usize).collect(),
        };
        t.validate()?;
        Ok(t)
    }
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn j24_targets(joints: &Array2<f64>) -> Vec<[f64; 3]> {
    let mut t: Vec<[f64; 3]> = (0..NUM_JOINTS)
        .map(|j| [joints[(j, 0)], joints[(j, 1)], joints[(j, 2)]])
        .collect();
    // 24th point: chest, midway spine2–spine3.
    t.push([
        0.5 * (joints[(2, 0)] + joints[(3, 0)]),
        0.5 * (joints[(2, 1)] + joints[(3, 1)]),
        0.5 * (joints[(2, 2)] + joints[(3, 2)]),
    ]);
    t
}

fn j14_targets(joints: &Array2<f64>) -> Vec<[f64; 3]> {
    // pelvis, head, shoulders, elbows, wrists, hips, knees, ankles.
    [0usize, 5, 16, 20, 17, 21, 18, 22, 7, 11, 8, 12, 9, 13]
        .iter()
        .map(|&j| [joints[(j, 0)], joints[(j, 1)], joints[(j, 2)]])
        .collect()
}

/// Inverse-distance weights over the 4 nearest vertices; rows sum to 1.
fn build_regressor(vertices: &Array2<f64>, targets: &[[f64; 3]]) -> Array2<f64> {
    let m = vertices.nrows();
    let mut reg = Array2::<f64>::zeros((targets.len(), m));
    for (r, tgt) in targets.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = (0..m)
            .map(|i| {
                let dx = vertices[(i, 0)] - tgt[0];
                let dy = vertices[(i, 1)] - tgt[1];
                let dz = vertices[(i, 2)] - tgt[2];
                (dx * dx + dy * dy + dz * dz, i)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let near = &dists[..4];
        let mut wsum = 0.0;
        for &(d2, _) in near {
            wsum += 1.0 / (d2.sqrt() + 1e-6);
        }
        for &(d2, i) in near {
            reg[(r, i)] = (1.0 / (d2.sqrt() + 1e-6)) / wsum;
        }
    }
    reg
}

/// Global rigid transforms of every joint given local rotations.
///
/// The joint origin is carried as a drift `d_j = t_j − j_j` from its rest
/// position, so the identity pose yields exactly zero drift (no rounding
/// from re-adding rest offsets along the chain).
fn kinematic_chain<S: Scalar>(
    rots: &[Array2<S>],
    shaped_joints: &Array2<S>,
    parent: &[usize],
) -> (Vec<Array2<S>>, Array2<S>) {
    let n = parent.len();
    let mut glob_r: Vec<Array2<S>> = Vec::with_capacity(n);
    let mut drift = Array2::<S>::zeros((n, 3));
    for j in 0..n {
        if j == 0 {
            glob_r.push(rots[0].clone());
        } else {
            let p = parent[j];
            glob_r.push(so3::matmul3(&glob_r[p], &rots[j]));
            let bone = [
                shaped_joints[(j, 0)] - shaped_joints[(p, 0)],
                shaped_joints[(j, 1)] - shaped_joints[(p, 1)],
                shaped_joints[(j, 2)] - shaped_joints[(p, 2)],
            ];
            let rp = &glob_r[p];
            for c in 0..3 {
                let rotated =
                    rp[(c, 0)] * bone[0] + rp[(c, 1)] * bone[1] + rp[(c, 2)] * bone[2];
                drift[(j, c)] = (rotated - bone[c]) + drift[(p, c)];
            }
        }
    }
    (glob_r, drift)
}

/// Pose the template: blendshapes, kinematic chain, linear blend skinning,
/// then global translation. Fully differentiable counterpart below.
pub fn forward<S: Scalar>(params: &BodyParams<S>, template: &BodyTemplate<S>) -> Result<Mesh<S>> {
    params.validate()?;
    let m = template.num_vertices();

    // Shape blendshapes.
    let beta2 = params
        .beta
        .view()
        .insert_axis(Axis(0))
        .to_owned();
    let vdisp = beta2.dot(&template.shape_basis); // 1×3M
    let jdisp = beta2.dot(&template.joint_basis); // 1×69
    let mut shaped_v = template.vertices.clone();
    for i in 0..m {
        for c in 0..3 {
            shaped_v[(i, c)] += vdisp[(0, 3 * i + c)];
        }
    }
    let mut shaped_j = template.joints.clone();
    for j in 0..NUM_JOINTS {
        for c in 0..3 {
            shaped_j[(j, c)] += jdisp[(0, 3 * j + c)];
        }
    }

    // Local rotations.
    let mut rots = Vec::with_capacity(NUM_JOINTS);
    rots.push(so3::rodrigues(params.phi));
    for r in params.theta.rows() {
        rots.push(so3::rodrigues([r[0], r[1], r[2]]));
    }

    let (glob_r, drift) = kinematic_chain(&rots, &shaped_j, &template.parent);

    // LBS in delta form: v' = v + Σ_k w_k ((R_k v − v) + u_k) with
    // u_k = d_k + (j_k − R_k j_k). Every term vanishes exactly at the
    // identity pose, so the rest mesh round-trips bit-for-bit.
    let mut out_v = shaped_v.clone();
    for k in 0..NUM_JOINTS {
        let rk = &glob_r[k];
        let jk = [shaped_j[(k, 0)], shaped_j[(k, 1)], shaped_j[(k, 2)]];
        let uk: [S; 3] = std::array::from_fn(|c| {
            let rj = rk[(c, 0)] * jk[0] + rk[(c, 1)] * jk[1] + rk[(c, 2)] * jk[2];
            drift[(k, c)] + (jk[c] - rj)
        });
        for i in 0..m {
            let w = template.skinning[(i, k)];
            if w == S::zero() {
                continue;
            }
            let v = [shaped_v[(i, 0)], shaped_v[(i, 1)], shaped_v[(i, 2)]];
            for c in 0..3 {
                let rv = rk[(c, 0)] * v[0] + rk[(c, 1)] * v[1] + rk[(c, 2)] * v[2];
                out_v[(i, c)] += w * ((rv - v[c]) + uk[c]);
            }
        }
    }

    let mut joints = shaped_j + &drift;
    for c in 0..3 {
        out_v.column_mut(c).mapv_inplace(|x| x + params.tau[c]);
        joints.column_mut(c).mapv_inplace(|x| x + params.tau[c]);
    }

    Ok(Mesh {
        vertices: out_v,
        joints,
        frame: Frame::Camera,
    })
}

/// Constant graph nodes for the template arrays, reusable across persons
/// within one graph.
pub struct TemplateVars {
    pub vertices: Var,
    pub joints: Var,
    pub shape_basis: Var,
    pub joint_basis: Var,
    pub skin_cols: Vec<Var>,
}

impl TemplateVars {
    pub fn new<S: Scalar>(g: &mut Graph<S>, template: &BodyTemplate<S>) -> Self {
        let skin_cols = (0..NUM_JOINTS)
            .map(|k| {
                g.constant(
                    template
                        .skinning
                        .column(k)
                        .to_owned()
                        .insert_axis(Axis(1)),
                )
            })
            .collect();
        TemplateVars {
            vertices: g.constant(template.vertices.clone()),
            joints: g.constant(template.joints.clone()),
            shape_basis: g.constant(template.shape_basis.clone()),
            joint_basis: g.constant(template.joint_basis.clone()),
            skin_cols,
        }
    }
}

/// Differentiable forward from per-joint rotation matrices (graph nodes).
///
/// `rots` holds 23 3×3 nodes (root first), `beta` is 1×10, `tau` is 1×3.
/// Returns (vertices M×3, joints 23×3), both translated by `tau`.
pub fn forward_var<S: Scalar>(
    g: &mut Graph<S>,
    tv: &TemplateVars,
    rots: &[Var],
    beta: Var,
    tau: Var,
) -> (Var, Var) {
    assert_eq!(rots.len(), NUM_JOINTS);
    let m = g.shape(tv.vertices).0;

    let vdisp = g.matmul(beta, tv.shape_basis); // 1×3M
    let vdisp = g.reshape(vdisp, m, 3);
    let shaped_v = g.add(tv.vertices, vdisp);
    let jdisp = g.matmul(beta, tv.joint_basis); // 1×69
    let jdisp = g.reshape(jdisp, NUM_JOINTS, 3);
    let shaped_j = g.add(tv.joints, jdisp);

    // Kinematic chain.
    let mut glob_r: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut glob_t: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let jrow = g.slice_rows(shaped_j, j, j + 1);
        if j == 0 {
            glob_r.push(rots[0]);
            glob_t.push(jrow);
        } else {
            let p = PARENT[j];
            glob_r.push(g.matmul(glob_r[p], rots[j]));
            let prow = g.slice_rows(shaped_j, p, p + 1);
            let bone = g.sub(jrow, prow);
            let moved = g.matmul_t(bone, glob_r[p], false, true); // 1×3 · Rᵀ
            glob_t.push(g.add(moved, glob_t[p]));
        }
    }

    // LBS accumulation.
    let mut acc: Option<Var> = None;
    for k in 0..NUM_JOINTS {
        let jrow = g.slice_rows(shaped_j, k, k + 1);
        let rj = g.matmul_t(jrow, glob_r[k], false, true);
        let uk = g.sub(glob_t[k], rj);
        let vr = g.matmul_t(shaped_v, glob_r[k], false, true); // M×3
        let vt = g.add_row(vr, uk);
        let wv = g.mul_col(vt, tv.skin_cols[k]);
        acc = Some(match acc {
            Some(a) => g.add(a, wv),
            None => wv,
        });
    }
    let verts = acc.unwrap();
    let verts = g.add_row(verts, tau);
    let joints = g.concat_rows(&glob_t);
    let joints = g.add_row(joints, tau);
    (verts, joints)
}

/// Differentiable forward from axis-angle parameters (used by gradient
/// checks and the losses on ground-truth-parameter paths).
pub fn forward_params_var<S: Scalar>(
    g: &mut Graph<S>,
    tv: &TemplateVars,
    phi: Var,
    theta: Var,
    beta: Var,
    tau: Var,
) -> (Var, Var) {
    assert_eq!(g.shape(phi), (1, 3));
    assert_eq!(g.shape(theta), (NUM_POSED, 3));
    let mut rots = Vec::with_capacity(NUM_JOINTS);
    rots.push(g.rodrigues(phi));
    for j in 0..NUM_POSED {
        let row = g.slice_rows(theta, j, j + 1);
        rots.push(g.rodrigues(row));
    }
    forward_var(g, tv, &rots, beta, tau)
}

/// Evaluation joints: `regressor · vertices`, linear in the vertices.
pub fn regress_eval_joints<S: Scalar>(
    mesh: &Mesh<S>,
    template: &BodyTemplate<S>,
    set: JointSet,
) -> Result<Array2<S>> {
    let reg = template.regressor(set);
    if reg.ncols() != mesh.vertices.nrows() {
        return Err(Error::shape(
            "regress_eval_joints",
            format!("{} vertices", reg.ncols()),
            format!("{}", mesh.vertices.nrows()),
        ));
    }
    Ok(reg.dot(&mesh.vertices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use rand::Rng;

    fn random_params(seed: u64, pose_scale: f64) -> BodyParams<f64> {
        let mut rng = crate::rng::stream(seed, "body/test_params");
        BodyParams {
            phi: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
            theta: Array2::from_shape_fn((NUM_POSED, 3), |_| {
                rng.random_range(-pose_scale..pose_scale)
            }),
            beta: Array1::from_shape_fn(NUM_SHAPE, |_| rng.random_range(-2.0..2.0)),
            tau: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn template_satisfies_its_invariants() {
        let t = BodyTemplate::<f64>::build(0);
        t.validate().unwrap();
        assert_eq!(t.num_vertices(), TEMPLATE_VERTICES);
    }

    #[test]
    fn identity_pose_reproduces_template_exactly() {
        let t = BodyTemplate::<f64>::build(0);
        let mesh = forward(&BodyParams::zeros(), &t).unwrap();
        assert_eq!(mesh.vertices, t.vertices);
        assert_eq!(mesh.joints, t.joints);
    }

    #[test]
    fn pure_translation_shifts_every_vertex() {
        let t = BodyTemplate::<f64>::build(0);
        let mut p = BodyParams::zeros();
        p.tau = [1.0, 2.0, 3.0];
        let mesh = forward(&p, &t).unwrap();
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                assert_abs_diff_eq!(
                    mesh.vertices[(i, c)],
                    t.vertices[(i, c)] + p.tau[c],
                    epsilon = 0.0
                );
            }
        }
    }

    /// Independent oracle: walk the chain with homogeneous 4×4 transforms.
    fn oracle_forward(params: &BodyParams<f64>, t: &BodyTemplate<f64>) -> Array2<f64> {
        let m = t.num_vertices();
        let beta2 = params.beta.view().insert_axis(Axis(0)).to_owned();
        let vdisp = beta2.dot(&t.shape_basis);
        let jdisp = beta2.dot(&t.joint_basis);
        let shaped_v: Vec<[f64; 3]> = (0..m)
            .map(|i| {
                [
                    t.vertices[(i, 0)] + vdisp[(0, 3 * i)],
                    t.vertices[(i, 1)] + vdisp[(0, 3 * i + 1)],
                    t.vertices[(i, 2)] + vdisp[(0, 3 * i + 2)],
                ]
            })
            .collect();
        let shaped_j: Vec<[f64; 3]> = (0..NUM_JOINTS)
            .map(|j| {
                [
                    t.joints[(j, 0)] + jdisp[(0, 3 * j)],
                    t.joints[(j, 1)] + jdisp[(0, 3 * j + 1)],
                    t.joints[(j, 2)] + jdisp[(0, 3 * j + 2)],
                ]
            })
            .collect();

        let aa_to_mat4 = |aa: [f64; 3], off: [f64; 3]| {
            let r = so3::rodrigues(aa);
            let mut m4 = Matrix4::identity();
            for i in 0..3 {
                for j in 0..3 {
                    m4[(i, j)] = r[(i, j)];
                }
                m4[(i, 3)] = off[i];
            }
            m4
        };

        let mut glob: Vec<Matrix4<f64>> = Vec::new();
        for j in 0..NUM_JOINTS {
            let aa = if j == 0 {
                params.phi
            } else {
                [
                    params.theta[(j - 1, 0)],
                    params.theta[(j - 1, 1)],
                    params.theta[(j - 1, 2)],
                ]
            };
            let off = if j == 0 {
                shaped_j[0]
            } else {
                let p = PARENT[j];
                [
                    shaped_j[j][0] - shaped_j[p][0],
                    shaped_j[j][1] - shaped_j[p][1],
                    shaped_j[j][2] - shaped_j[p][2],
                ]
            };
            let local = aa_to_mat4(aa, off);
            glob.push(if j == 0 {
                local
            } else {
                glob[PARENT[j]] * local
            });
        }

        let mut out = Array2::<f64>::zeros((m, 3));
        for i in 0..m {
            for k in 0..NUM_JOINTS {
                let w = t.skinning[(i, k)];
                if w == 0.0 {
                    continue;
                }
                // Skinning transform un-anchors the rest joint first.
                let mut unanchor = Matrix4::identity();
                for c in 0..3 {
                    unanchor[(c, 3)] = -shaped_j[k][c];
                }
                let g4 = glob[k] * unanchor;
                let v = nalgebra::Vector4::new(
                    shaped_v[i][0],
                    shaped_v[i][1],
                    shaped_v[i][2],
                    1.0,
                );
                let vp = g4 * v;
                for c in 0..3 {
                    out[(i, c)] += w * vp[c];
                }
            }
            for c in 0..3 {
                out[(i, c)] += params.tau[c];
            }
        }
        out
    }

    #[test]
    fn forward_matches_rigid_chain_oracle() {
        let t = BodyTemplate::<f64>::build(0);
        for seed in 0..5 {
            let p = random_params(seed, 1.2);
            let mesh = forward(&p, &t).unwrap();
            let oracle = oracle_forward(&p, &t);
            for i in 0..t.num_vertices() {
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        mesh.vertices[(i, c)],
                        oracle[(i, c)],
                        epsilon = 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let t = BodyTemplate::<f64>::build(0);
        let p = random_params(42, 1.0);
        let plain = forward(&p, &t).unwrap();

        let mut g = Graph::<f64>::new();
        let tv = TemplateVars::new(&mut g, &t);
        let phi = g.input(Array2::from_shape_vec((1, 3), p.phi.to_vec()).unwrap());
        let theta = g.input(p.theta.clone());
        let beta = g.input(p.beta.clone().insert_axis(Axis(0)));
        let tau = g.input(Array2::from_shape_vec((1, 3), p.tau.to_vec()).unwrap());
        let (verts, joints) = forward_params_var(&mut g, &tv, phi, theta, beta, tau);

        let gv = g.value(verts);
        let gj = g.value(joints);
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                assert_abs_diff_eq!(gv[(i, c)], plain.vertices[(i, c)], epsilon = 1e-12);
            }
        }
        for j in 0..NUM_JOINTS {
            for c in 0..3 {
                assert_abs_diff_eq!(gj[(j, c)], plain.joints[(j, c)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rigid_equivariance_under_global_rotation() {
        let t = BodyTemplate::<f64>::build(0);
        let base = random_params(7, 1.0);
        let rot_aa = [0.3, -1.1, 0.55];
        let r = so3::rodrigues(rot_aa);

        // Left-compose the rotation into phi and rotate tau.
        let mut rotated = base.clone();
        let phi_mat = so3::rodrigues(base.phi);
        rotated.phi = so3::log_map(&so3::matmul3(&r, &phi_mat));
        let tauv = [
            r[(0, 0)] * base.tau[0] + r[(0, 1)] * base.tau[1] + r[(0, 2)] * base.tau[2],
            r[(1, 0)] * base.tau[0] + r[(1, 1)] * base.tau[1] + r[(1, 2)] * base.tau[2],
            r[(2, 0)] * base.tau[0] + r[(2, 1)] * base.tau[1] + r[(2, 2)] * base.tau[2],
        ];
        rotated.tau = tauv;

        let m_base = forward(&base, &t).unwrap();
        let m_rot = forward(&rotated, &t).unwrap();
        let rotated_base = m_base.vertices.dot(&r.t().to_owned());
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                assert_abs_diff_eq!(
                    m_rot.vertices[(i, c)],
                    rotated_base[(i, c)],
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn beta_linearity_at_zero_pose() {
        let t = BodyTemplate::<f64>::build(0);
        let mut p = BodyParams::zeros();
        let mut rng = crate::rng::stream(3, "body/beta");
        p.beta = Array1::from_shape_fn(NUM_SHAPE, |_| rng.random_range(-2.0..2.0));
        let shaped = forward(&p, &t).unwrap();
        let rest = forward(&BodyParams::zeros(), &t).unwrap();
        let beta2 = p.beta.view().insert_axis(Axis(0)).to_owned();
        let disp = beta2.dot(&t.shape_basis);
        for i in 0..t.num_vertices() {
            for c in 0..3 {
                assert_abs_diff_eq!(
                    shaped.vertices[(i, c)] - rest.vertices[(i, c)],
                    disp[(0, 3 * i + c)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn vertex_gradients_match_finite_differences() {
        let t = BodyTemplate::<f64>::build(0);
        let p = random_params(11, 0.8);
        // Project the vertices onto a fixed random direction per vertex so
        // the scalar loss exercises all coordinates.
        let mut rng = crate::rng::stream(5, "body/gradw");
        let wmat =
            Array2::<f64>::from_shape_fn((t.num_vertices(), 3), |_| rng.random_range(-1.0..1.0));

        let eval = |p: &BodyParams<f64>| -> f64 {
            let mesh = forward(p, &t).unwrap();
            (&mesh.vertices * &wmat).sum()
        };

        let mut g = Graph::<f64>::new();
        let tv = TemplateVars::new(&mut g, &t);
        let phi = g.input(Array2::from_shape_vec((1, 3), p.phi.to_vec()).unwrap());
        let theta = g.input(p.theta.clone());
        let beta = g.input(p.beta.clone().insert_axis(Axis(0)));
        let tau = g.input(Array2::from_shape_vec((1, 3), p.tau.to_vec()).unwrap());
        let (verts, _) = forward_params_var(&mut g, &tv, phi, theta, beta, tau);
        let wv = g.constant(wmat.clone());
        let prod = g.mul(verts, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);

        let h = 1e-5;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{what}: analytic={analytic} fd={fd}"
            );
        };

        let gphi = grads.get(phi).unwrap().clone();
        for c in 0..3 {
            let mut pp = p.clone();
            pp.phi[c] += h;
            let mut pm = p.clone();
            pm.phi[c] -= h;
            check(gphi[(0, c)], (eval(&pp) - eval(&pm)) / (2.0 * h), "phi");
        }
        let gtheta = grads.get(theta).unwrap().clone();
        for j in [0usize, 7, 15, 21] {
            for c in 0..3 {
                let mut pp = p.clone();
                pp.theta[(j, c)] += h;
                let mut pm = p.clone();
                pm.theta[(j, c)] -= h;
                check(
                    gtheta[(j, c)],
                    (eval(&pp) - eval(&pm)) / (2.0 * h),
                    "theta",
                );
            }
        }
        let gbeta = grads.get(beta).unwrap().clone();
        for c in 0..NUM_SHAPE {
            let mut pp = p.clone();
            pp.beta[c] += h;
            let mut pm = p.clone();
            pm.beta[c] -= h;
            check(gbeta[(0, c)], (eval(&pp) - eval(&pm)) / (2.0 * h), "beta");
        }
        let gtau = grads.get(tau).unwrap().clone();
        for c in 0..3 {
            let mut pp = p.clone();
            pp.tau[c] += h;
            let mut pm = p.clone();
            pm.tau[c] -= h;
            check(gtau[(0, c)], (eval(&pp) - eval(&pm)) / (2.0 * h), "tau");
        }
    }

    #[test]
    fn eval_joint_regression_matches_dense_matmul_oracle() {
        let t = BodyTemplate::<f64>::build(0);
        let p = random_params(13, 1.0);
        let mesh = forward(&p, &t).unwrap();
        for set in [JointSet::J14, JointSet::J24] {
            let joints = regress_eval_joints(&mesh, &t, set).unwrap();
            assert_eq!(joints.nrows(), set.count());
            // Explicit triple-loop product.
            let reg = t.regressor(set);
            for r in 0..reg.nrows() {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..t.num_vertices() {
                        acc += reg[(r, i)] * mesh.vertices[(i, c)];
                    }
                    assert_abs_diff_eq!(joints[(r, c)], acc, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn one_hot_and_uniform_regressor_rows() {
        let t = BodyTemplate::<f64>::build(0);
        let p = random_params(17, 0.5);
        let mesh = forward(&p, &t).unwrap();
        let m = t.num_vertices();
        // One-hot rows select vertices; a uniform row is the centroid.
        let mut custom = BodyTemplate::<f64>::build(0);
        let mut reg = Array2::<f64>::zeros((14, m));
        for r in 0..13 {
            reg[(r, r * 17 % m)] = 1.0;
        }
        for i in 0..m {
            reg[(13, i)] = 1.0 / m as f64;
        }
        custom.regressor_j14 = reg;
        let joints = regress_eval_joints(&mesh, &custom, JointSet::J14).unwrap();
        for r in 0..13 {
            for c in 0..3 {
                assert_eq!(joints[(r, c)], mesh.vertices[(r * 17 % m, c)]);
            }
        }
        let centroid = mesh.vertices.mean_axis(Axis(0)).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(joints[(13, c)], centroid[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn template_round_trips_through_file() {
        let t = BodyTemplate::<f64>::build(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("template.pmar");
        t.save(&path).unwrap();
        let t2 = BodyTemplate::<f64>::load(&path).unwrap();
        assert_eq!(t.vertices, t2.vertices);
        assert_eq!(t.skinning, t2.skinning);
        assert_eq!(t.shape_basis, t2.shape_basis);
        assert_eq!(t.parent, t2.parent);
        assert_eq!(t.dominant_joint, t2.dominant_joint);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = BodyTemplate::<f64>::build(0);
        let mut p = BodyParams::<f64>::zeros();
        p.theta = Array2::zeros((7, 3));
        assert!(matches!(forward(&p, &t), Err(Error::Shape { .. })));
    }
}
