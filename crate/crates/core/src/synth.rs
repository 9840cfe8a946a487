//! Synthetic humanoid characters and procedural motion clips.
//!
//! Characters are built from capsules in a T-pose facing +z with +y up:
//! a torso capsule along the spine, a head sphere, and one capsule per limb
//! joint. Limbs start a small gap away from the torso so that the rest pose
//! is free of interpenetration. Motions are generated by placing limb end
//! targets per frame and solving each limb chain with FABRIK.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Character, CharacterFile};
use crate::math::{self, Mat3, Vec3, IDENTITY3};
use crate::mesh::{icosphere, SkinnedMesh};
use crate::rotation::matrix_to_rot6d;
use crate::skeleton::{Motion, Skeleton};
use crate::tensor::Tensor;

/// Clearance between limb and torso surfaces in the rest pose.
pub const GAP: f64 = 0.015;
/// Largest weight a limb vertex gives to its parent joint.
pub const BLEND_MAX: f64 = 0.4;
pub const MIN_JOINTS: usize = 6;

const TORSO_SEGMENTS: usize = 12;
const LIMB_SEGMENTS: usize = 8;
const CAP_RINGS: usize = 2;
const FABRIK_ITERATIONS: usize = 40;
/// Distance of belly-contact targets in front of the torso, in arm radii.
pub const BELLY_CLEARANCE: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub spine_length: f64,
    pub torso_radius: f64,
    pub head_radius: f64,
    pub arm_length: f64,
    pub arm_radius: f64,
    pub leg_length: f64,
    pub leg_radius: f64,
    pub hip_width: f64,
}

impl Default for Proportions {
    fn default() -> Self {
        Self {
            spine_length: 0.5,
            torso_radius: 0.13,
            head_radius: 0.1,
            arm_length: 0.62,
            arm_radius: 0.04,
            leg_length: 0.85,
            leg_radius: 0.055,
            hip_width: 0.08,
        }
    }
}

impl Proportions {
    /// Default proportions jittered by up to ±15% per length; torso radius
    /// drawn from `[0.10, 0.20]`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Self::default();
        let mut j = |v: f64| v * rng.random_range(0.85..1.15);
        let mut p = Self {
            spine_length: j(d.spine_length),
            torso_radius: 0.0,
            head_radius: j(d.head_radius),
            arm_length: j(d.arm_length),
            arm_radius: j(d.arm_radius),
            leg_length: j(d.leg_length),
            leg_radius: j(d.leg_radius),
            hip_width: j(d.hip_width),
        };
        p.torso_radius = rng.random_range(0.10..0.20);
        p
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            spine_length: self.spine_length * s,
            torso_radius: self.torso_radius * s,
            head_radius: self.head_radius * s,
            arm_length: self.arm_length * s,
            arm_radius: self.arm_radius * s,
            leg_length: self.leg_length * s,
            leg_radius: self.leg_radius * s,
            hip_width: self.hip_width * s,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.spine_length,
            self.torso_radius,
            self.head_radius,
            self.arm_length,
            self.arm_radius,
            self.leg_length,
            self.leg_radius,
            self.hip_width,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!("proportions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn shoulder_x(&self) -> f64 {
        self.torso_radius + self.arm_radius + GAP
    }

    fn hip_drop(&self) -> f64 {
        self.torso_radius + self.leg_radius + GAP
    }

    /// Root height that puts the feet on `y = 0` with straight legs.
    pub fn root_height(&self) -> f64 {
        self.hip_drop() + self.leg_length + self.leg_radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Limb {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl Limb {
    pub const ALL: [Limb; 4] = [Limb::LeftArm, Limb::RightArm, Limb::LeftLeg, Limb::RightLeg];

    pub fn name(self) -> &'static str {
        match self {
            Limb::LeftArm => "left_arm",
            Limb::RightArm => "right_arm",
            Limb::LeftLeg => "left_leg",
            Limb::RightLeg => "right_leg",
        }
    }

    fn side(self) -> f64 {
        match self {
            Limb::LeftArm | Limb::LeftLeg => 1.0,
            Limb::RightArm | Limb::RightLeg => -1.0,
        }
    }

    fn is_arm(self) -> bool {
        matches!(self, Limb::LeftArm | Limb::RightArm)
    }

    /// Bone direction in the rest pose.
    fn rest_direction(self) -> Vec3 {
        if self.is_arm() {
            [self.side(), 0.0, 0.0]
        } else {
            [0.0, -1.0, 0.0]
        }
    }
}

/// Joint counts per chain for a skeleton with `joints` joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub spine: usize,
    pub limb: usize,
}

impl Layout {
    pub fn for_joints(joints: usize) -> Result<Self> {
        if joints < MIN_JOINTS {
            return Err(Error::InvalidConfig(format!(
                "synthetic characters need at least {MIN_JOINTS} joints, got {joints}"
            )));
        }
        let limb = ((joints - 1) / 5).clamp(1, 4);
        Ok(Self {
            spine: joints - 1 - 4 * limb,
            limb,
        })
    }

    pub fn joints(&self) -> usize {
        1 + self.spine + 4 * self.limb
    }

    pub fn spine_top(&self) -> usize {
        self.spine
    }

    /// Index of the `k`-th joint (from the body outwards) of `limb`.
    pub fn limb_joint(&self, limb: Limb, k: usize) -> usize {
        let i = Limb::ALL.iter().position(|&l| l == limb).unwrap();
        1 + self.spine + i * self.limb + k
    }

    fn limb_parent(&self, limb: Limb) -> usize {
        if limb.is_arm() {
            self.spine_top()
        } else {
            0
        }
    }
}

/// Closed capsule from `start` along unit `dir`: hemispherical caps joined by a
/// cylinder of `length`. Faces wind counter-clockwise seen from outside.
/// Returns vertices, faces and each vertex's coordinate along the axis.
pub fn capsule(
    start: Vec3,
    dir: Vec3,
    length: f64,
    radius: f64,
    segments: usize,
    cap_rings: usize,
    body_rings: usize,
) -> (Vec<Vec3>, Vec<[usize; 3]>, Vec<f64>) {
    let e3 = math::normalize(dir);
    let helper = if e3[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = math::normalize(math::cross(helper, e3));
    let e2 = math::cross(e3, e1);
    let half_pi = std::f64::consts::FRAC_PI_2;
    // (axial, ring radius) per ring, bottom to top
    let mut rings = Vec::new();
    for i in 1..cap_rings {
        let phi = -half_pi + half_pi * i as f64 / cap_rings as f64;
        rings.push((radius * phi.sin(), radius * phi.cos()));
    }
    for k in 0..=body_rings.max(1) {
        rings.push((length * k as f64 / body_rings.max(1) as f64, radius));
    }
    for i in 1..cap_rings {
        let phi = half_pi * i as f64 / cap_rings as f64;
        rings.push((length + radius * phi.sin(), radius * phi.cos()));
    }
    let point = |axial: f64, rho: f64, theta: f64| {
        let radial = math::add(math::scale(e1, rho * theta.cos()), math::scale(e2, rho * theta.sin()));
        math::add(start, math::add(math::scale(e3, axial), radial))
    };
    let mut verts = vec![point(-radius, 0.0, 0.0)];
    let mut axial = vec![-radius];
    for &(z, rho) in &rings {
        for s in 0..segments {
            let theta = std::f64::consts::TAU * s as f64 / segments as f64;
            verts.push(point(z, rho, theta));
            axial.push(z);
        }
    }
    verts.push(point(length + radius, 0.0, 0.0));
    axial.push(length + radius);
    let top = verts.len() - 1;
    let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s + 1), ring(0, s)]);
    }
    for r in 0..rings.len() - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s + 1), ring(r + 1, s));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    let last = rings.len() - 1;
    for s in 0..segments {
        faces.push([top, ring(last, s), ring(last, s + 1)]);
    }
    (verts, faces, axial)
}

#[derive(Default)]
struct MeshBuilder {
    verts: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    weights: Vec<Vec<(usize, f64)>>,
}

impl MeshBuilder {
    fn append(&mut self, verts: Vec<Vec3>, faces: Vec<[usize; 3]>, weights: Vec<Vec<(usize, f64)>>) {
        let base = self.verts.len();
        self.verts.extend(verts);
        self.faces.extend(faces.into_iter().map(|f| f.map(|i| i + base)));
        self.weights.extend(weights);
    }
}

fn weight_row(pairs: &[(usize, f64)]) -> Vec<(usize, f64)> {
    pairs.iter().copied().filter(|&(_, w)| w > 0.0).collect()
}

/// Builds a character with the given joint count and proportions.
pub fn make_character(name: &str, joints: usize, p: &Proportions) -> Result<Character> {
    p.validate()?;
    let layout = Layout::for_joints(joints)?;
    let (s, l) = (layout.spine, layout.limb);
    let mut names = vec!["hips".to_string()];
    let mut parents = vec![None];
    let mut offsets = vec![[0.0; 3]];
    for k in 1..=s {
        names.push(format!("spine{k}"));
        parents.push(Some(k - 1));
        offsets.push([0.0, p.spine_length / s as f64, 0.0]);
    }
    for limb in Limb::ALL {
        let seg = limb_segment(p, limb, l);
        for k in 0..l {
            names.push(format!("{}{}", limb.name(), k + 1));
            if k == 0 {
                parents.push(Some(layout.limb_parent(limb)));
                offsets.push(if limb.is_arm() {
                    [limb.side() * p.shoulder_x(), 0.0, 0.0]
                } else {
                    [limb.side() * p.hip_width, -p.hip_drop(), 0.0]
                });
            } else {
                parents.push(Some(layout.limb_joint(limb, k - 1)));
                offsets.push(math::scale(limb.rest_direction(), seg));
            }
        }
    }

    let mut mesh = MeshBuilder::default();
    let level = p.spine_length / s as f64;
    let (verts, faces, axial) = capsule(
        [0.0; 3],
        [0.0, 1.0, 0.0],
        p.spine_length,
        p.torso_radius,
        TORSO_SEGMENTS,
        CAP_RINGS + 1,
        2 * s,
    );
    let weights = axial
        .iter()
        .map(|&y| {
            if y <= 0.0 {
                vec![(0, 1.0)]
            } else if y >= p.spine_length {
                vec![(s, 1.0)]
            } else {
                let k = ((y / level).floor() as usize).min(s - 1);
                let f = y / level - k as f64;
                weight_row(&[(k, 1.0 - f), (k + 1, f)])
            }
        })
        .collect();
    mesh.append(verts, faces, weights);

    let head_y = p.spine_length + p.torso_radius + GAP + p.head_radius;
    let (hv, hf) = icosphere(1, p.head_radius);
    let hv: Vec<Vec3> = hv.into_iter().map(|v| math::add(v, [0.0, head_y, 0.0])).collect();
    let hw = vec![vec![(s, 1.0)]; hv.len()];
    mesh.append(hv, hf, hw);

    let skel_tmp = Skeleton::new(names.clone(), parents.clone(), offsets.clone(), 1.0)?;
    let rest = skel_tmp.rest_positions();
    for limb in Limb::ALL {
        let seg = limb_segment(p, limb, l);
        let radius = if limb.is_arm() { p.arm_radius } else { p.leg_radius };
        for k in 0..l {
            let j = layout.limb_joint(limb, k);
            let parent = parents[j].unwrap();
            let (verts, faces, axial) =
                capsule(rest[j], limb.rest_direction(), seg, radius, LIMB_SEGMENTS, CAP_RINGS, 2);
            let blend = 0.5 * seg;
            let weights = axial
                .iter()
                .map(|&u| {
                    let wp = BLEND_MAX * (1.0 - u / blend).clamp(0.0, 1.0);
                    weight_row(&[(j, 1.0 - wp), (parent, wp)])
                })
                .collect();
            mesh.append(verts, faces, weights);
        }
    }

    let (lo, hi) = mesh
        .verts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])));
    let skeleton = Skeleton::new(names, parents, offsets, hi - lo)?;
    let mesh = SkinnedMesh::bind_to(&skeleton, mesh.verts, mesh.faces, mesh.weights)?;
    let limb_chains = Limb::ALL
        .iter()
        .map(|&limb| (0..l).map(|k| skeleton.joint_names()[layout.limb_joint(limb, k)].clone()).collect())
        .collect();
    Ok(Character {
        name: name.to_string(),
        skeleton,
        mesh,
        limb_chains,
    })
}

fn limb_segment(p: &Proportions, limb: Limb, joints: usize) -> f64 {
    let total = if limb.is_arm() { p.arm_length } else { p.leg_length };
    total / joints as f64
}

/// Character with sampled proportions; identical output for identical inputs.
pub fn make_synthetic_character(joints: usize, seed: u64) -> Result<CharacterFile> {
    let p = Proportions::sample(seed);
    Ok(make_character(&format!("synthetic_{seed}"), joints, &p)?.to_file())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Walk,
    Wave,
    /// Both hands resting on the belly; the contact case.
    Belly,
    Reach,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Walk, Style::Wave, Style::Belly, Style::Reach];
}

struct LimbTarget {
    end: Vec3,
    pole: Vec3,
}

struct Pose {
    root_rot: Mat3,
    root_pos: Vec3,
    /// Total spine bend as an axis-angle vector, spread evenly over the spine.
    spine_bend: Vec3,
    limbs: [LimbTarget; 4],
}

/// Procedural clip for a character built by [`make_character`] with `p`.
pub fn make_motion(skel: &Skeleton, p: &Proportions, style: Style, frames: usize, fps: f64, seed: u64) -> Result<Motion> {
    let layout = Layout::for_joints(skel.num_joints())?;
    if frames == 0 {
        return Err(Error::InvalidConfig("a motion needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.85..1.15);
    let n = skel.num_joints();
    let mut rot = Vec::with_capacity(frames * n * 6);
    let mut root = Vec::with_capacity(frames * 3);
    for t in 0..frames {
        let time = t as f64 / fps;
        let pose = style_pose(style, p, &layout, skel, time, phase, amp);
        let locals = solve_pose(skel, &layout, p, &pose);
        for m in &locals {
            rot.extend(matrix_to_rot6d(m)?);
        }
        root.extend(pose.root_pos);
    }
    Motion::new(Tensor::new([frames, n, 6], rot), Tensor::new([frames, 3], root), fps)
}

fn style_pose(style: Style, p: &Proportions, layout: &Layout, skel: &Skeleton, time: f64, phase: f64, amp: f64) -> Pose {
    let rest = skel.rest_positions();
    let a = p.arm_length;
    let lg = p.leg_length;
    let base = |limb: Limb| rest[layout.limb_joint(limb, 0)];
    let stand = |limb: Limb| LimbTarget {
        end: math::add(base(limb), [0.0, -0.98 * lg, 0.02 * lg]),
        pole: [0.0, 0.0, 1.0],
    };
    let hang = |limb: Limb, swing: f64| LimbTarget {
        end: math::add(base(limb), [limb.side() * 0.06 * a, -0.9 * a, swing * a]),
        pole: [0.0, 0.0, -1.0],
    };
    let standing_root = [0.0, p.root_height(), 0.0];
    let tau = std::f64::consts::TAU;
    match style {
        Style::Walk => {
            let w = tau * amp;
            let s = (w * time + phase).sin();
            let c = (w * time + phase).cos();
            let step = |limb: Limb, sign: f64, lift: f64| LimbTarget {
                end: math::add(base(limb), [0.0, -0.96 * lg + 0.08 * lg * lift.max(0.0), 0.25 * lg * sign * s]),
                pole: [0.0, 0.0, 1.0],
            };
            Pose {
                root_rot: math::axis_angle([0.0, 1.0, 0.0], 0.08 * s),
                root_pos: [0.0, p.root_height() - 0.02 + 0.02 * (2.0 * (w * time + phase)).cos(), 0.8 * amp * time],
                spine_bend: [0.0, 0.0, 0.05 * s],
                limbs: [
                    hang(Limb::LeftArm, -0.3 * s),
                    hang(Limb::RightArm, 0.3 * s),
                    step(Limb::LeftLeg, 1.0, c),
                    step(Limb::RightLeg, -1.0, -c),
                ],
            }
        }
        Style::Wave => {
            let s = (tau * 1.2 * amp * time + phase).sin();
            let sb = base(Limb::RightArm);
            Pose {
                root_rot: IDENTITY3,
                root_pos: standing_root,
                spine_bend: [0.0, 0.0, -0.03 * s],
                limbs: [
                    hang(Limb::LeftArm, 0.05),
                    LimbTarget {
                        end: math::add(sb, [-(0.45 + 0.2 * s) * a, 0.7 * a, 0.1 * a]),
                        pole: [-1.0, 0.0, -0.3],
                    },
                    stand(Limb::LeftLeg),
                    stand(Limb::RightLeg),
                ],
            }
        }
        Style::Belly => {
            let s = (tau * 0.8 * amp * time + phase).sin();
            let belly = |limb: Limb| LimbTarget {
                end: [
                    limb.side() * (0.25 + 0.1 * s) * p.torso_radius,
                    (0.45 + 0.1 * s) * p.spine_length,
                    p.torso_radius + BELLY_CLEARANCE * p.arm_radius,
                ],
                pole: [limb.side(), -0.3, -0.6],
            };
            Pose {
                root_rot: IDENTITY3,
                root_pos: math::add(standing_root, [0.0, -0.01 * (1.0 + s), 0.0]),
                spine_bend: [0.04 + 0.02 * s, 0.0, 0.0],
                limbs: [belly(Limb::LeftArm), belly(Limb::RightArm), stand(Limb::LeftLeg), stand(Limb::RightLeg)],
            }
        }
        Style::Reach => {
            let s = (tau * 0.6 * amp * time + phase).sin();
            let reach = |limb: Limb, k: f64| LimbTarget {
                end: math::add(base(limb), [-limb.side() * 0.1 * a, 0.15 * a * k, (0.45 + 0.45 * k) * a]),
                pole: [limb.side() * 0.3, -1.0, 0.0],
            };
            Pose {
                root_rot: math::axis_angle([0.0, 1.0, 0.0], 0.15 * s),
                root_pos: standing_root,
                spine_bend: [0.05 * s.abs(), 0.0, 0.0],
                limbs: [
                    reach(Limb::LeftArm, s.max(0.0)),
                    reach(Limb::RightArm, (-s).max(0.0)),
                    stand(Limb::LeftLeg),
                    stand(Limb::RightLeg),
                ],
            }
        }
    }
}

/// Local rotations for a pose. Everything below the root is solved in the
/// root's frame, then the root rotation is applied on top.
fn solve_pose(skel: &Skeleton, layout: &Layout, p: &Proportions, pose: &Pose) -> Vec<Mat3> {
    let n = skel.num_joints();
    let mut local = vec![IDENTITY3; n];
    let mut global = vec![IDENTITY3; n];
    let mut pos = vec![[0.0; 3]; n];
    local[0] = pose.root_rot;
    let bend = math::norm(pose.spine_bend);
    let per_joint = if bend > 0.0 {
        math::axis_angle(pose.spine_bend, bend / layout.spine as f64)
    } else {
        IDENTITY3
    };
    for k in 1..=layout.spine {
        local[k] = per_joint;
        global[k] = math::mat_mul(&global[k - 1], &local[k]);
        pos[k] = math::add(pos[k - 1], math::mat_vec(&global[k - 1], skel.offsets()[k]));
    }
    for (i, limb) in Limb::ALL.into_iter().enumerate() {
        let parent = layout.limb_parent(limb);
        let first = layout.limb_joint(limb, 0);
        let start = math::add(pos[parent], math::mat_vec(&global[parent], skel.offsets()[first]));
        let seg = limb_segment(p, limb, layout.limb);
        let target = &pose.limbs[i];
        let chain = fabrik(start, seg, layout.limb, target.end, target.pole);
        let mut g_parent = global[parent];
        for k in 0..layout.limb {
            let j = layout.limb_joint(limb, k);
            let g = math::rotation_between(limb.rest_direction(), math::sub(chain[k + 1], chain[k]));
            local[j] = math::mat_mul_at(&g_parent, &g);
            global[j] = g;
            g_parent = g;
        }
    }
    local
}

/// Positions of a chain of `count` equal segments of length `seg` from
/// `start`, reaching for `target` with interior joints bent towards `pole`.
fn fabrik(start: Vec3, seg: f64, count: usize, target: Vec3, pole: Vec3) -> Vec<Vec3> {
    let total = seg * count as f64;
    let to = math::sub(target, start);
    let dist = math::norm(to);
    let dir = if dist > 1e-12 { math::scale(to, 1.0 / dist) } else { [0.0, -1.0, 0.0] };
    if dist >= total {
        return (0..=count).map(|k| math::add(start, math::scale(dir, seg * k as f64))).collect();
    }
    let pole = math::normalize(pole);
    let mut pts: Vec<Vec3> = (0..=count)
        .map(|k| {
            let f = k as f64 / count as f64;
            let bow = (std::f64::consts::PI * f).sin() * 0.3 * total;
            math::add(math::add(start, math::scale(to, f)), math::scale(pole, bow))
        })
        .collect();
    let place = |from: Vec3, toward: Vec3| {
        let d = math::sub(toward, from);
        let len = math::norm(d);
        if len < 1e-12 {
            math::add(from, math::scale(dir, seg))
        } else {
            math::add(from, math::scale(d, seg / len))
        }
    };
    for _ in 0..FABRIK_ITERATIONS {
        pts[count] = target;
        for k in (0..count).rev() {
            pts[k] = place(pts[k + 1], pts[k]);
        }
        pts[0] = start;
        for k in 1..=count {
            pts[k] = place(pts[k - 1], pts[k]);
        }
    }
    pts
}
