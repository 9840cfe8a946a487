//! Skinned character geometry, linear blend skinning and the limb/body split.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::{self, Rigid, Vec3};
use crate::skeleton::Skeleton;
use crate::tensor::Tensor;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-5;
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkinnedMesh {
    vertices_bind: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    /// Sparse skinning weights: `(joint, weight)` per vertex.
    weights: Vec<Vec<(usize, f64)>>,
    bind_inverse: Vec<Rigid>,
}

impl SkinnedMesh {
    pub fn new(
        vertices_bind: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        weights: Vec<Vec<(usize, f64)>>,
        bind_inverse: Vec<Rigid>,
    ) -> Result<Self> {
        let ctx = "mesh";
        let nv = vertices_bind.len();
        let nj = bind_inverse.len();
        if weights.len() != nv {
            return Err(Error::schema(ctx, format!("{nv} vertices but {} weight rows", weights.len())));
        }
        if vertices_bind.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::schema(ctx, "non-finite vertex position"));
        }
        for (v, row) in weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= nj {
                    return Err(Error::schema(ctx, format!("vertex {v} references joint {j} of {nj}")));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::schema(ctx, format!("vertex {v} has invalid weight {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(Error::schema(ctx, format!("weights of vertex {v} sum to {sum}, expected 1")));
            }
        }
        let mut degenerate = 0usize;
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&i| i >= nv) {
                return Err(Error::schema(ctx, format!("face {f} has an out-of-range vertex index")));
            }
            let [a, b, c] = face.map(|i| vertices_bind[i]);
            if math::norm(math::cross(math::sub(b, a), math::sub(c, a))) <= DEGENERATE_AREA {
                degenerate += 1;
            }
        }
        if degenerate * 100 > faces.len() {
            return Err(Error::schema(
                ctx,
                format!("{degenerate} of {} faces have zero area (limit 1%)", faces.len()),
            ));
        }
        Ok(Self {
            vertices_bind,
            faces,
            weights,
            bind_inverse,
        })
    }

    /// Binds to the skeleton's reference pose.
    pub fn bind_to(
        skel: &Skeleton,
        vertices_bind: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        weights: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let bind_inverse = skel.rest_transforms().iter().map(Rigid::inverse).collect();
        Self::new(vertices_bind, faces, weights, bind_inverse)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices_bind.len()
    }

    pub fn num_joints(&self) -> usize {
        self.bind_inverse.len()
    }

    pub fn vertices_bind(&self) -> &[Vec3] {
        &self.vertices_bind
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn weights(&self) -> &[Vec<(usize, f64)>] {
        &self.weights
    }

    pub fn bind_inverse(&self) -> &[Rigid] {
        &self.bind_inverse
    }

    /// Joint with the largest weight (lowest index on ties).
    pub fn dominant_joint(&self, v: usize) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &(j, w) in &self.weights[v] {
            if w > best.1 || (w == best.1 && j < best.0) {
                best = (j, w);
            }
        }
        best.0
    }
}

/// `v' = Σ_j w_j · T_j · B_j⁻¹ · v` for one frame.
pub fn linear_blend_skinning(mesh: &SkinnedMesh, transforms: &[Rigid]) -> Result<Vec<Vec3>> {
    if transforms.len() != mesh.num_joints() {
        return Err(Error::ShapeMismatch(format!(
            "{} joint transforms for a mesh bound to {} joints",
            transforms.len(),
            mesh.num_joints()
        )));
    }
    let skinning: Vec<Rigid> = transforms
        .iter()
        .zip(&mesh.bind_inverse)
        .map(|(t, b)| t.compose(b))
        .collect();
    Ok(mesh
        .vertices_bind
        .iter()
        .zip(&mesh.weights)
        .map(|(&v, row)| {
            let mut acc = [0.0; 3];
            for &(j, w) in row {
                acc = math::add(acc, math::scale(skinning[j].apply(v), w));
            }
            acc
        })
        .collect())
}

/// Tape LBS: transforms `[..., N, 12]` (as produced by the FK op) → vertices `[..., V, 3]`.
pub fn lbs_op(g: &mut Graph, transforms: Var, mesh: &std::sync::Arc<SkinnedMesh>) -> Result<Var> {
    let tv = g.value(transforms);
    let s = tv.shape().to_vec();
    let n = mesh.num_joints();
    if s.len() < 2 || s[s.len() - 1] != 12 || s[s.len() - 2] != n {
        return Err(Error::ShapeMismatch(format!("LBS transforms must be [..., {n}, 12], got {s:?}")));
    }
    let frames = tv.len() / (n * 12);
    let nv = mesh.num_vertices();
    // u_{v,j} = B_j⁻¹ v is pose independent
    let local: std::sync::Arc<Vec<Vec<(usize, f64, Vec3)>>> = std::sync::Arc::new(
        mesh.vertices_bind
            .iter()
            .zip(&mesh.weights)
            .map(|(&v, row)| row.iter().map(|&(j, w)| (j, w, mesh.bind_inverse[j].apply(v))).collect())
            .collect(),
    );
    let exec = g.exec();
    let mut out = vec![0.0; frames * nv * 3];
    {
        let td = tv.data();
        exec.for_each_chunk_mut(&mut out, nv * 3, |f, chunk| {
            let t = &td[f * n * 12..(f + 1) * n * 12];
            for (v, row) in local.iter().enumerate() {
                let mut acc = [0.0; 3];
                for &(j, w, u) in row {
                    let rot: &[f64; 9] = t[j * 12..j * 12 + 9].try_into().unwrap();
                    let p = math::add(math::mat_vec(rot, u), [t[j * 12 + 9], t[j * 12 + 10], t[j * 12 + 11]]);
                    acc = math::add(acc, math::scale(p, w));
                }
                chunk[v * 3..v * 3 + 3].copy_from_slice(&acc);
            }
        });
    }
    let mut oshape = s[..s.len() - 2].to_vec();
    oshape.extend([nv, 3]);
    Ok(g.custom(
        Tensor::new(oshape, out),
        &[transforms],
        Box::new(move |grad, p, _| {
            let gd = grad.data();
            let per_frame = exec.map_range(frames, |f| {
                let gf = &gd[f * nv * 3..(f + 1) * nv * 3];
                let mut gt = vec![0.0; n * 12];
                for (v, row) in local.iter().enumerate() {
                    let gv = [gf[v * 3], gf[v * 3 + 1], gf[v * 3 + 2]];
                    if gv == [0.0; 3] {
                        continue;
                    }
                    for &(j, w, u) in row {
                        let gj = &mut gt[j * 12..j * 12 + 12];
                        for r in 0..3 {
                            for c in 0..3 {
                                gj[r * 3 + c] += w * gv[r] * u[c];
                            }
                            gj[9 + r] += w * gv[r];
                        }
                    }
                }
                gt
            });
            vec![Some(Tensor::new(p[0].shape().to_vec(), per_frame.concat()))]
        }),
    ))
}

/// Maps world-space points into the reference frame of one joint treated as rigid:
/// `x ↦ B_a · T_a⁻¹ · x`. `points` is `[F, K, 3]`, `transforms` is `[F, N, 12]`.
pub fn to_joint_rest_frame_op(
    g: &mut Graph,
    points: Var,
    transforms: Var,
    joint: usize,
    rest: Rigid,
) -> Result<Var> {
    let ps = g.value(points).shape().to_vec();
    let ts = g.value(transforms).shape().to_vec();
    if ps.len() != 3 || ps[2] != 3 || ts.len() != 3 || ts[2] != 12 || ts[0] != ps[0] || joint >= ts[1] {
        return Err(Error::ShapeMismatch(format!(
            "rest-frame mapping needs points [F, K, 3] and transforms [F, N, 12], got {ps:?} and {ts:?}"
        )));
    }
    let (frames, k, n) = (ps[0], ps[1], ts[1]);
    let pd = g.value(points).data();
    let td = g.value(transforms).data();
    let mut out = vec![0.0; frames * k * 3];
    for f in 0..frames {
        let base = (f * n + joint) * 12;
        let rot: [f64; 9] = td[base..base + 9].try_into().unwrap();
        let pos: Vec3 = td[base + 9..base + 12].try_into().unwrap();
        for i in 0..k {
            let x: Vec3 = pd[(f * k + i) * 3..(f * k + i) * 3 + 3].try_into().unwrap();
            let local = math::mat_t_vec(&rot, math::sub(x, pos));
            out[(f * k + i) * 3..(f * k + i) * 3 + 3].copy_from_slice(&rest.apply(local));
        }
    }
    Ok(g.custom(
        Tensor::new(ps.clone(), out),
        &[points, transforms],
        Box::new(move |grad, p, _| {
            let (pd, td, gd) = (p[0].data(), p[1].data(), grad.data());
            let mut gp = vec![0.0; frames * k * 3];
            let mut gt = vec![0.0; frames * n * 12];
            for f in 0..frames {
                let base = (f * n + joint) * 12;
                let rot: [f64; 9] = td[base..base + 9].try_into().unwrap();
                let pos: Vec3 = td[base + 9..base + 12].try_into().unwrap();
                let mut g_rot = [0.0; 9];
                let mut g_pos = [0.0; 3];
                for i in 0..k {
                    let idx = (f * k + i) * 3;
                    let x: Vec3 = pd[idx..idx + 3].try_into().unwrap();
                    let go: Vec3 = gd[idx..idx + 3].try_into().unwrap();
                    // y = rest.rot · Rᵀ (x − p) + rest.trans
                    let gl = math::mat_t_vec(&rest.rot, go);
                    let gx = math::mat_vec(&rot, gl);
                    gp[idx..idx + 3].copy_from_slice(&gx);
                    g_pos = math::sub(g_pos, gx);
                    let d = math::sub(x, pos);
                    // local = Rᵀ d  ⇒ dL/dR_{rc} = d_r · gl_c
                    for r in 0..3 {
                        for c in 0..3 {
                            g_rot[r * 3 + c] += d[r] * gl[c];
                        }
                    }
                }
                gt[base..base + 9].copy_from_slice(&g_rot);
                gt[base + 9..base + 12].copy_from_slice(&g_pos);
            }
            vec![
                Some(Tensor::new(p[0].shape().to_vec(), gp)),
                Some(Tensor::new(p[1].shape().to_vec(), gt)),
            ]
        }),
    ))
}

/// Vertices tested for penetration and the faces forming the body surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPartition {
    pub limb_vertex_ids: Vec<usize>,
    pub body_face_ids: Vec<usize>,
    /// Joint whose frame the body is treated as rigid in.
    pub anchor_joint: usize,
}

impl BodyPartition {
    /// Body faces as a standalone mesh (compacted vertex indices).
    pub fn body_submesh(&self, mesh: &SkinnedMesh) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let mut remap = std::collections::HashMap::new();
        let mut verts = Vec::new();
        let mut faces = Vec::with_capacity(self.body_face_ids.len());
        for &f in &self.body_face_ids {
            let face = mesh.faces[f].map(|v| {
                *remap.entry(v).or_insert_with(|| {
                    verts.push(mesh.vertices_bind[v]);
                    verts.len() - 1
                })
            });
            faces.push(face);
        }
        (verts, faces)
    }
}

/// A vertex is a limb vertex iff its dominant joint is in one of the limb chains;
/// body faces are faces whose three vertices are all non-limb.
pub fn partition_limbs(mesh: &SkinnedMesh, skel: &Skeleton, limb_chains: &[Vec<String>]) -> Result<BodyPartition> {
    let mut limb_joints = BTreeSet::new();
    for chain in limb_chains {
        for name in chain {
            limb_joints.insert(skel.joint_index(name)?);
        }
    }
    let is_limb: Vec<bool> = (0..mesh.num_vertices())
        .map(|v| limb_joints.contains(&mesh.dominant_joint(v)))
        .collect();
    let limb_vertex_ids = (0..mesh.num_vertices()).filter(|&v| is_limb[v]).collect();
    let body_face_ids: Vec<usize> = mesh
        .faces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.iter().all(|&v| !is_limb[v]))
        .map(|(i, _)| i)
        .collect();
    let mut mass = vec![0.0; mesh.num_joints()];
    for &f in &body_face_ids {
        for &v in &mesh.faces[f] {
            for &(j, w) in &mesh.weights[v] {
                mass[j] += w;
            }
        }
    }
    let anchor_joint = mass
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &m)| if m > best.1 { (j, m) } else { best })
        .0;
    Ok(BodyPartition {
        limb_vertex_ids,
        body_face_ids,
        anchor_joint,
    })
}

/// Geodesic sphere from a subdivided icosahedron: `10·4^s + 2` vertices.
pub fn icosphere(subdivisions: usize, radius: f64) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(math::normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(math::normalize(math::scale(math::add(verts[a], verts[b]), 0.5)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts.into_iter().map(|v| math::scale(v, radius)).collect(), faces)
}
