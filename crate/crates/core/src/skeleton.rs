//! Skeleton and motion data model plus forward kinematics.
//!
//! Convention: the global rotation of a joint is the product of local
//! rotations from the root down to it, and each joint's offset is expressed
//! in its parent's frame.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Rigid, Vec3};
use crate::rotation;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    height: f64,
}

impl Skeleton {
    /// Joints must be listed parent-first, which puts the single root at index 0.
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        height: f64,
    ) -> Result<Self> {
        let n = joint_names.len();
        let ctx = "skeleton";
        if n == 0 {
            return Err(Error::schema(ctx, "no joints"));
        }
        if parents.len() != n || offsets.len() != n {
            return Err(Error::schema(
                ctx,
                format!("{n} names but {} parents and {} offsets", parents.len(), offsets.len()),
            ));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::schema(ctx, format!("expected exactly one root, found {roots}")));
        }
        if parents[0].is_some() {
            return Err(Error::schema(ctx, "root must be the first joint"));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::schema(
                        ctx,
                        format!("joint `{}` has parent index {p} which is not listed before it", joint_names[j]),
                    ))
                }
                None => unreachable!(),
            }
        }
        for (j, o) in offsets.iter().enumerate() {
            if o.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(ctx, format!("joint `{}` has a non-finite offset", joint_names[j])));
            }
        }
        if offsets[0] != [0.0; 3] {
            return Err(Error::schema(ctx, "root offset must be the zero vector"));
        }
        if !(height > 0.0 && height.is_finite()) {
            return Err(Error::schema(ctx, format!("height must be positive, got {height}")));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &joint_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::schema(ctx, format!("duplicate joint name `{name}`")));
            }
        }
        Ok(Self {
            joint_names,
            parents,
            offsets,
            height,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownJoint(name.to_string()))
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(c, _)| c)
    }

    /// Joint positions in the reference pose with the root at the origin.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let mut pos = vec![[0.0; 3]; self.num_joints()];
        for j in 1..self.num_joints() {
            let p = self.parents[j].unwrap();
            pos[j] = math::add(pos[p], self.offsets[j]);
        }
        pos
    }

    /// Reference-pose global transforms (identity rotations).
    pub fn rest_transforms(&self) -> Vec<Rigid> {
        self.rest_positions()
            .into_iter()
            .map(|p| Rigid {
                rot: math::IDENTITY3,
                trans: p,
            })
            .collect()
    }

    /// Same joint count and parent structure.
    pub fn same_topology(&self, other: &Skeleton) -> bool {
        self.parents == other.parents
    }

    /// Edge offsets as an `[N, 3]` tensor (the root row is zero).
    pub fn offsets_tensor(&self) -> Tensor {
        Tensor::new([self.num_joints(), 3], self.offsets.iter().flatten().copied().collect())
    }
}

/// Local joint rotations (6D) and root trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// `[T, N, 6]`
    pub rot6d: Tensor,
    /// `[T, 3]`
    pub root_pos: Tensor,
    pub fps: f64,
}

impl Motion {
    pub fn new(rot6d: Tensor, root_pos: Tensor, fps: f64) -> Result<Self> {
        let ctx = "motion";
        let s = rot6d.shape();
        if s.len() != 3 || s[2] != 6 {
            return Err(Error::schema(ctx, format!("rot6d must be [T, N, 6], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::schema(ctx, "motion needs at least one frame"));
        }
        if root_pos.shape() != [s[0], 3] {
            return Err(Error::schema(
                ctx,
                format!("root_pos must be [{}, 3], got {:?}", s[0], root_pos.shape()),
            ));
        }
        if !rot6d.is_finite() || !root_pos.is_finite() {
            return Err(Error::schema(ctx, "non-finite values"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::schema(ctx, format!("fps must be positive, got {fps}")));
        }
        Ok(Self { rot6d, root_pos, fps })
    }

    /// Every joint at identity rotation, root at `root`.
    pub fn rest(frames: usize, joints: usize, root: Vec3, fps: f64) -> Self {
        let rot6d = Tensor::new(
            [frames, joints, 6],
            (0..frames * joints).flat_map(|_| rotation::IDENTITY_6D).collect(),
        );
        let root_pos = Tensor::new([frames, 3], (0..frames).flat_map(|_| root).collect());
        Self { rot6d, root_pos, fps }
    }

    pub fn frames(&self) -> usize {
        self.rot6d.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.rot6d.shape()[1]
    }

    pub fn rot6d_at(&self, t: usize, j: usize) -> [f64; 6] {
        let n = self.joints();
        let base = (t * n + j) * 6;
        self.rot6d.data()[base..base + 6].try_into().unwrap()
    }

    pub fn root_at(&self, t: usize) -> Vec3 {
        self.root_pos.data()[t * 3..t * 3 + 3].try_into().unwrap()
    }

    pub fn set_rot6d(&mut self, t: usize, j: usize, r6: [f64; 6]) {
        let n = self.joints();
        let base = (t * n + j) * 6;
        self.rot6d.data_mut()[base..base + 6].copy_from_slice(&r6);
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Motion {
        let n = self.joints();
        let end = start + len;
        assert!(end <= self.frames());
        Motion {
            rot6d: Tensor::new([len, n, 6], self.rot6d.data()[start * n * 6..end * n * 6].to_vec()),
            root_pos: Tensor::new([len, 3], self.root_pos.data()[start * 3..end * 3].to_vec()),
            fps: self.fps,
        }
    }

    fn check_skeleton(&self, skel: &Skeleton) -> Result<()> {
        if self.joints() != skel.num_joints() {
            return Err(Error::ShapeMismatch(format!(
                "motion has {} joints, skeleton has {}",
                self.joints(),
                skel.num_joints()
            )));
        }
        Ok(())
    }
}

/// Global joint positions, `[T, N, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPositions {
    pub positions: Tensor,
}

impl JointPositions {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn at(&self, t: usize, j: usize) -> Vec3 {
        let base = (t * self.joints() + j) * 3;
        self.positions.data()[base..base + 3].try_into().unwrap()
    }

    /// Frame `t` as an `[N, 3]` tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        let n = self.joints();
        Tensor::new([n, 3], self.positions.data()[t * n * 3..(t + 1) * n * 3].to_vec())
    }
}

fn fk_frame(parents: &[Option<usize>], offsets: &[Vec3], rots: &[f64], root: Vec3, out: &mut [f64]) {
    let n = parents.len();
    for j in 0..n {
        let local: &Mat3 = rots[j * 9..j * 9 + 9].try_into().unwrap();
        let (g, p) = match parents[j] {
            None => (*local, root),
            Some(par) => {
                let gp: Mat3 = out[par * 12..par * 12 + 9].try_into().unwrap();
                let pp: Vec3 = out[par * 12 + 9..par * 12 + 12].try_into().unwrap();
                (math::mat_mul(&gp, local), math::add(pp, math::mat_vec(&gp, offsets[j])))
            }
        };
        out[j * 12..j * 12 + 9].copy_from_slice(&g);
        out[j * 12 + 9..j * 12 + 12].copy_from_slice(&p);
    }
}

/// Global transforms per frame: `result[t][j]`.
pub fn joint_transforms(skel: &Skeleton, motion: &Motion) -> Result<Vec<Vec<Rigid>>> {
    motion.check_skeleton(skel)?;
    let n = skel.num_joints();
    let mut rots = vec![0.0; n * 9];
    let mut buf = vec![0.0; n * 12];
    let mut frames = Vec::with_capacity(motion.frames());
    for t in 0..motion.frames() {
        for j in 0..n {
            let m = rotation::rot6d_to_matrix(&motion.rot6d_at(t, j))?;
            rots[j * 9..j * 9 + 9].copy_from_slice(&m);
        }
        fk_frame(skel.parents(), skel.offsets(), &rots, motion.root_at(t), &mut buf);
        frames.push(
            (0..n)
                .map(|j| Rigid {
                    rot: buf[j * 12..j * 12 + 9].try_into().unwrap(),
                    trans: buf[j * 12 + 9..j * 12 + 12].try_into().unwrap(),
                })
                .collect(),
        );
    }
    Ok(frames)
}

pub fn forward_kinematics(skel: &Skeleton, motion: &Motion) -> Result<JointPositions> {
    let transforms = joint_transforms(skel, motion)?;
    let n = skel.num_joints();
    let data = transforms.iter().flat_map(|f| f.iter().flat_map(|r| r.trans)).collect();
    Ok(JointPositions {
        positions: Tensor::new([motion.frames(), n, 3], data),
    })
}

/// Per-item skeleton data for the batched FK op. All items share one parent array.
#[derive(Clone, Debug)]
pub struct FkBatch {
    parents: Arc<Vec<Option<usize>>>,
    offsets: Arc<Vec<Vec<Vec3>>>,
}

impl FkBatch {
    pub fn new(skeletons: &[&Skeleton]) -> Result<Self> {
        let first = skeletons
            .first()
            .ok_or_else(|| Error::ShapeMismatch("FK batch needs at least one skeleton".into()))?;
        for s in skeletons {
            if !s.same_topology(first) {
                return Err(Error::ShapeMismatch("FK batch mixes skeleton topologies".into()));
            }
        }
        Ok(Self {
            parents: Arc::new(first.parents().to_vec()),
            offsets: Arc::new(skeletons.iter().map(|s| s.offsets().to_vec()).collect()),
        })
    }

    pub fn items(&self) -> usize {
        self.offsets.len()
    }
}

/// Tape FK. `rot` is `[B, T, N, 9]` rotation matrices, `root` is `[B, T, 3]`;
/// the result is `[B, T, N, 12]` holding each global rotation (9) then position (3).
pub fn fk_op(g: &mut Graph, rot: Var, root: Var, batch: &FkBatch) -> Result<Var> {
    let rs = g.value(rot).shape().to_vec();
    let n = batch.parents.len();
    if rs.len() != 4 || rs[0] != batch.items() || rs[2] != n || rs[3] != 9 {
        return Err(Error::ShapeMismatch(format!(
            "FK rotations must be [{}, T, {n}, 9], got {rs:?}",
            batch.items()
        )));
    }
    let (b, t) = (rs[0], rs[1]);
    g.value(root).expect_shape("FK root positions", &[b, t, 3])?;
    let exec = g.exec();
    let frames = b * t;
    let mut out = vec![0.0; frames * n * 12];
    {
        let rd = g.value(rot).data();
        let pd = g.value(root).data();
        exec.for_each_chunk_mut(&mut out, n * 12, |f, chunk| {
            let item = f / t;
            let root: Vec3 = pd[f * 3..f * 3 + 3].try_into().unwrap();
            fk_frame(&batch.parents, &batch.offsets[item], &rd[f * n * 9..(f + 1) * n * 9], root, chunk);
        });
    }
    let batch = batch.clone();
    Ok(g.custom(
        Tensor::new([b, t, n, 12], out),
        &[rot, root],
        Box::new(move |grad, p, out| {
            let (rd, gd, od) = (p[0].data(), grad.data(), out.data());
            let per_frame: Vec<(Vec<f64>, Vec3)> = exec.map_range(frames, |f| {
                let item = f / t;
                fk_frame_vjp(
                    &batch.parents,
                    &batch.offsets[item],
                    &rd[f * n * 9..(f + 1) * n * 9],
                    &od[f * n * 12..(f + 1) * n * 12],
                    &gd[f * n * 12..(f + 1) * n * 12],
                )
            });
            let mut grot = Vec::with_capacity(frames * n * 9);
            let mut groot = Vec::with_capacity(frames * 3);
            for (gr, gp) in per_frame {
                grot.extend(gr);
                groot.extend(gp);
            }
            vec![
                Some(Tensor::new(p[0].shape().to_vec(), grot)),
                Some(Tensor::new(p[1].shape().to_vec(), groot)),
            ]
        }),
    ))
}

fn fk_frame_vjp(
    parents: &[Option<usize>],
    offsets: &[Vec3],
    rots: &[f64],
    out: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec3) {
    let n = parents.len();
    let mut g_glob: Vec<Mat3> = (0..n).map(|j| grad[j * 12..j * 12 + 9].try_into().unwrap()).collect();
    let mut g_pos: Vec<Vec3> = (0..n).map(|j| grad[j * 12 + 9..j * 12 + 12].try_into().unwrap()).collect();
    let mut g_rot = vec![0.0; n * 9];
    let mut g_root = [0.0; 3];
    for j in (0..n).rev() {
        let local: &Mat3 = rots[j * 9..j * 9 + 9].try_into().unwrap();
        match parents[j] {
            None => {
                g_rot[j * 9..j * 9 + 9].copy_from_slice(&g_glob[j]);
                g_root = math::add(g_root, g_pos[j]);
            }
            Some(par) => {
                let gpar: Mat3 = out[par * 12..par * 12 + 9].try_into().unwrap();
                let gp = g_pos[j];
                let o = offsets[j];
                g_pos[par] = math::add(g_pos[par], gp);
                let gg = &mut g_glob[par];
                for r in 0..3 {
                    for c in 0..3 {
                        gg[r * 3 + c] += gp[r] * o[c];
                    }
                }
                let gj = g_glob[j];
                let gr = math::mat_mul_at(&gpar, &gj);
                g_rot[j * 9..j * 9 + 9].copy_from_slice(&gr);
                let back = math::mat_mul_bt(&gj, local);
                for k in 0..9 {
                    g_glob[par][k] += back[k];
                }
            }
        }
    }
    (g_rot, g_root)
}

/// Convenience: rot6d `[B,T,N,6]` + root `[B,T,3]` → global positions `[B,T,N,3]`
/// and the full transform tensor `[B,T,N,12]`.
pub fn fk_from_rot6d(g: &mut Graph, rot6d: Var, root: Var, batch: &FkBatch) -> Result<(Var, Var)> {
    let rot = rotation::rot6d_to_matrix_op(g, rot6d)?;
    let transforms = fk_op(g, rot, root, batch)?;
    let positions = g.slice_last(transforms, 9, 3);
    Ok((positions, transforms))
}

/// Undirected joint adjacency used for message passing. Each neighbor entry
/// carries the signed edge offset `e_{j,i}`: the child offset when `j` is the
/// parent of `i`, its negation when `j` is a child of `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGraph {
    /// `neighbors[i]` = list of `(j, offset_joint, sign)`.
    neighbors: Vec<Vec<(usize, usize, f64)>>,
    root: usize,
}

impl JointGraph {
    /// Accepts any joint ordering as long as the parents form a single tree.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        let n = parents.len();
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::ShapeMismatch(format!("joint graph needs one root, found {}", roots.len())));
        }
        let mut neighbors = vec![Vec::new(); n];
        for (c, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == c {
                    return Err(Error::ShapeMismatch(format!("invalid parent {p} for joint {c}")));
                }
                neighbors[c].push((p, c, 1.0));
                neighbors[p].push((c, c, -1.0));
            }
        }
        // every joint must reach the root
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = parents[j] {
                j = p;
                steps += 1;
                if steps > n {
                    return Err(Error::ShapeMismatch("parent array contains a cycle".into()));
                }
            }
        }
        Ok(Self {
            neighbors,
            root: roots[0],
        })
    }

    pub fn from_skeleton(skel: &Skeleton) -> Self {
        Self::from_parents(skel.parents()).expect("validated skeleton")
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, usize, f64)] {
        &self.neighbors[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};

    pub(crate) fn chain(offsets: &[Vec3]) -> Skeleton {
        let n = offsets.len();
        Skeleton::new(
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| i.checked_sub(1)).collect(),
            offsets.to_vec(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn validation_errors() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Skeleton::new(names.clone(), vec![None, None], vec![[0.0; 3]; 2], 1.0).is_err());
        assert!(Skeleton::new(names.clone(), vec![None, Some(5)], vec![[0.0; 3]; 2], 1.0).is_err());
        assert!(Skeleton::new(names.clone(), vec![None, Some(0)], vec![[0.0; 3]; 2], 0.0).is_err());
        assert!(Skeleton::new(names.clone(), vec![None, Some(0)], vec![[1.0, 0.0, 0.0]; 2], 1.0).is_err());
        assert!(Skeleton::new(names, vec![None, Some(0)], vec![[0.0; 3], [f64::NAN, 0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn rest_pose_reproduces_cumulative_offsets() {
        let skel = chain(&[[0.0; 3], [0.1, 0.2, 0.0], [0.0, 0.5, 0.3], [1.0, 0.0, -0.25]]);
        let m = Motion::rest(2, 4, [0.0; 3], 30.0);
        let p = forward_kinematics(&skel, &m).unwrap();
        let expect = skel.rest_positions();
        for t in 0..2 {
            for j in 0..4 {
                assert_eq!(p.at(t, j), expect[j]);
            }
        }
        for (a, b) in expect[3].iter().zip([1.1, 0.7, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_bone_chain_quarter_turn() {
        let skel = chain(&[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let mut m = Motion::rest(1, 3, [0.0; 3], 30.0);
        m.set_rot6d(0, 0, [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let p = forward_kinematics(&skel, &m).unwrap();
        let close = |a: Vec3, b: Vec3| (0..3).all(|k| (a[k] - b[k]).abs() < 1e-12);
        assert!(close(p.at(0, 1), [0.0, 1.0, 0.0]));
        assert!(close(p.at(0, 2), [0.0, 2.0, 0.0]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let skel = chain(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let m = Motion::rest(1, 3, [0.0; 3], 30.0);
        assert!(matches!(forward_kinematics(&skel, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn global_root_rotation_rotates_everything() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let skel = chain(&[[0.0; 3], [0.3, 0.1, 0.0], [0.0, 0.4, 0.2], [0.2, -0.1, 0.3]]);
        let mut m = Motion::rest(1, 4, [0.0; 3], 30.0);
        for j in 0..4 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            m.set_rot6d(0, j, rotation::matrix_to_rot6d(&math::quat_to_matrix(q)).unwrap());
        }
        let base = forward_kinematics(&skel, &m).unwrap();
        let g = math::quat_to_matrix([0.3, -0.5, 0.7, 0.1]);
        let root = rotation::rot6d_to_matrix(&m.rot6d_at(0, 0)).unwrap();
        m.set_rot6d(0, 0, rotation::matrix_to_rot6d(&math::mat_mul(&g, &root)).unwrap());
        let rotated = forward_kinematics(&skel, &m).unwrap();
        for j in 0..4 {
            let expect = math::mat_vec(&g, base.at(0, j));
            let got = rotated.at(0, j);
            for k in 0..3 {
                assert!((expect[k] - got[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fk_op_gradient_matches_finite_differences() {
        let skel = chain(&[[0.0; 3], [0.3, 0.1, 0.0], [0.0, 0.4, 0.2], [0.2, -0.1, 0.3]]);
        let batch = FkBatch::new(&[&skel]).unwrap();
        let r0 = Tensor::new(
            [1, 2, 4, 6],
            (0..48).map(|i| if i % 6 == 0 || i % 6 == 4 { 1.0 } else { 0.0 } + 0.13 * ((i * 5 % 7) as f64 - 3.0)).collect(),
        );
        let root0 = Tensor::new([1, 2, 3], vec![0.1, 0.9, -0.2, 0.0, 1.0, 0.3]);
        let w: Vec<f64> = (0..96).map(|i| ((i * 11 % 13) as f64 - 6.0) / 6.0).collect();
        let loss = |g: &mut Graph, r: Var, root: Var| {
            let (_, tr) = fk_from_rot6d(g, r, root, &batch).unwrap();
            let wv = g.constant(Tensor::new([1, 2, 4, 12], w.clone()));
            let p = g.mul(tr, wv);
            g.sum(p)
        };
        let mut g = Graph::new();
        let r = g.param(r0.clone());
        let root = g.param(root0.clone());
        let l = loss(&mut g, r, root);
        let grads = g.backward(l);
        let num_r = finite_difference(&r0, 1e-5, |t| {
            let mut g = Graph::new();
            let r = g.constant(t.clone());
            let root = g.constant(root0.clone());
            let l = loss(&mut g, r, root);
            g.scalar(l)
        });
        let num_root = finite_difference(&root0, 1e-5, |t| {
            let mut g = Graph::new();
            let r = g.constant(r0.clone());
            let root = g.constant(t.clone());
            let l = loss(&mut g, r, root);
            g.scalar(l)
        });
        assert!(relative_error(grads.get(r).unwrap(), &num_r, 1e-8) < 1e-4);
        assert!(relative_error(grads.get(root).unwrap(), &num_root, 1e-8) < 1e-4);
    }

    #[test]
    fn joint_graph_edges_are_signed() {
        let g = JointGraph::from_parents(&[None, Some(0), Some(1)]).unwrap();
        assert_eq!(g.neighbors(1), &[(0, 1, 1.0), (2, 2, -1.0)]);
        assert!(JointGraph::from_parents(&[Some(1), Some(0)]).is_err());
        // any order is fine as long as it is a tree
        let g = JointGraph::from_parents(&[Some(2), Some(2), None]).unwrap();
        assert_eq!(g.root(), 2);
    }
}
