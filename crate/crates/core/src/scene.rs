//! Posed geometry shared by fine-tuning, direct optimization and evaluation:
//! skinned vertices, the body field used for penetration, and rendering a
//! motion into semantic embeddings.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::Character;
use crate::losses;
use crate::math::{self, Rigid, Vec3};
use crate::mesh::{self, linear_blend_skinning, BodyPartition, SkinnedMesh};
use crate::parallel::Exec;
use crate::render::{self, Camera, RenderSettings, RenderedFrame, View};
use crate::sdf::{build_sdf, default_spacing, SignedDistanceGrid};
use crate::semantics::{DifferentiableEmbedder, SemanticBackend};
use crate::skeleton::{fk_from_rot6d, joint_transforms, FkBatch, Motion};
use crate::tensor::Tensor;

/// Mesh data in the shapes the tape ops want.
#[derive(Clone, Debug)]
pub struct CharacterGeometry {
    pub mesh: Arc<SkinnedMesh>,
    pub faces: Arc<Vec<[usize; 3]>>,
    pub height: f64,
}

impl CharacterGeometry {
    pub fn new(character: &Character) -> Self {
        Self {
            mesh: Arc::new(character.mesh.clone()),
            faces: Arc::new(character.mesh.faces().to_vec()),
            height: character.skeleton.height(),
        }
    }
}

/// Signed distance field of a character's body, used to test limb vertices.
/// The body is treated as rigid in the frame of the partition's anchor joint.
#[derive(Clone, Debug)]
pub struct BodyField {
    pub partition: BodyPartition,
    pub grid: Arc<SignedDistanceGrid>,
    pub anchor_rest: Rigid,
}

impl BodyField {
    pub fn build(character: &Character, exec: Exec) -> Result<Self> {
        let partition = character.partition()?;
        let (verts, faces) = partition.body_submesh(&character.mesh);
        if faces.is_empty() {
            return Err(Error::DataEmpty(format!("character `{}` has no body faces", character.name)));
        }
        let grid = build_sdf(&verts, &faces, default_spacing(&verts), exec)?;
        Ok(Self::with_grid(character, partition, grid))
    }

    pub fn with_grid(character: &Character, partition: BodyPartition, grid: SignedDistanceGrid) -> Self {
        let anchor_rest = character.skeleton.rest_transforms()[partition.anchor_joint];
        Self {
            partition,
            grid: Arc::new(grid),
            anchor_rest,
        }
    }

    /// Limb vertices of one posed frame mapped into the grid's frame.
    pub fn limb_points(&self, vertices: &[Vec3], transforms: &[Rigid]) -> Vec<Vec3> {
        let to_rest = self.anchor_rest.compose(&transforms[self.partition.anchor_joint].inverse());
        self.partition
            .limb_vertex_ids
            .iter()
            .map(|&v| to_rest.apply(vertices[v]))
            .collect()
    }

    /// `Σ ReLU(−Φ)` over limb vertices for one frame.
    pub fn frame_pen_loss(&self, vertices: &[Vec3], transforms: &[Rigid]) -> f64 {
        let pts = self.limb_points(vertices, transforms);
        let (phi, _) = self.grid.query(&pts);
        phi.iter().map(|&d| (-d).max(0.0)).sum()
    }

    /// Number of limb vertices inside the body for one frame.
    pub fn frame_inside_count(&self, vertices: &[Vec3], transforms: &[Rigid]) -> usize {
        let pts = self.limb_points(vertices, transforms);
        let (phi, _) = self.grid.query(&pts);
        phi.iter().filter(|&&d| d < 0.0).count()
    }

    /// Penetration loss on the tape. `vertices` `[F, V, 3]`, `transforms` `[F, N, 12]`.
    pub fn pen_loss_op(&self, g: &mut Graph, vertices: Var, transforms: Var) -> Result<Var> {
        let limb = g.gather(vertices, 1, &self.partition.limb_vertex_ids);
        let pts = mesh::to_joint_rest_frame_op(g, limb, transforms, self.partition.anchor_joint, self.anchor_rest)?;
        losses::pen_loss_op(g, &self.grid, pts)
    }
}

/// Posed vertices and joint transforms for every frame of a motion.
pub fn pose_frames(character: &Character, motion: &Motion) -> Result<Vec<(Vec<Vec3>, Vec<Rigid>)>> {
    joint_transforms(&character.skeleton, motion)?
        .into_iter()
        .map(|t| Ok((linear_blend_skinning(&character.mesh, &t)?, t)))
        .collect()
}

pub fn centroid(vertices: &[Vec3]) -> Vec3 {
    let sum = vertices.iter().fold([0.0; 3], |acc, v| math::add(acc, *v));
    math::scale(sum, 1.0 / vertices.len().max(1) as f64)
}

/// Cameras for one frame, aimed at the (detached) vertex centroid.
pub fn frame_cameras(vertices: &[Vec3], height: f64, views: &[View]) -> Vec<Camera> {
    Camera::standard_set(views, centroid(vertices), height)
}

/// Frames `0, stride, 2·stride, …` below `frames`.
pub fn sampled_frames(frames: usize, stride: usize) -> Vec<usize> {
    (0..frames).step_by(stride.max(1)).collect()
}

pub fn views_for(count: usize) -> Result<Vec<View>> {
    if count == 0 || count > View::ALL.len() {
        return Err(Error::InvalidConfig(format!("views must be between 1 and 3, got {count}")));
    }
    Ok(View::ALL[..count].to_vec())
}

/// Renders the given frames of a motion.
pub fn render_motion(
    character: &Character,
    motion: &Motion,
    frames: &[usize],
    views: &[View],
    settings: &RenderSettings,
    exec: Exec,
) -> Result<Vec<RenderedFrame>> {
    let transforms = joint_transforms(&character.skeleton, motion)?;
    if let Some(&bad) = frames.iter().find(|&&f| f >= transforms.len()) {
        return Err(Error::ShapeMismatch(format!("frame {bad} out of range for {} frames", transforms.len())));
    }
    let h = character.skeleton.height();
    exec.map(frames, |&f| {
        let verts = linear_blend_skinning(&character.mesh, &transforms[f])?;
        render::render_views(&verts, character.mesh.faces(), &frame_cameras(&verts, h, views), settings)
    })
    .into_iter()
    .collect()
}

/// Embeddings `[F, K]` of the given frames.
pub fn embed_motion(
    character: &Character,
    motion: &Motion,
    frames: &[usize],
    views: &[View],
    backend: &dyn SemanticBackend,
    exec: Exec,
) -> Result<Tensor> {
    if let Some(embedder) = backend.as_differentiable() {
        return embed_motion_on_tape(character, motion, frames, views, embedder, exec);
    }
    let rendered = render_motion(character, motion, frames, views, &RenderSettings::default(), exec)?;
    let mut data = Vec::new();
    let mut width = None;
    for frame in &rendered {
        let e = backend.embed(frame)?;
        match width {
            None => width = Some(e.width()),
            Some(w) if w != e.width() => {
                return Err(Error::EmbeddingWidthMismatch {
                    expected: w,
                    got: e.width(),
                })
            }
            _ => {}
        }
        data.extend(e.vector);
    }
    Ok(Tensor::new([rendered.len(), width.unwrap_or(0)], data))
}

/// Forward pass through the same ops the training losses use, so a motion
/// scored against its own embeddings gives exactly zero.
fn embed_motion_on_tape(
    character: &Character,
    motion: &Motion,
    frames: &[usize],
    views: &[View],
    embedder: &dyn DifferentiableEmbedder,
    exec: Exec,
) -> Result<Tensor> {
    if let Some(&bad) = frames.iter().find(|&&f| f >= motion.frames()) {
        return Err(Error::ShapeMismatch(format!("frame {bad} out of range for {} frames", motion.frames())));
    }
    let n = motion.joints();
    let mut g = Graph::with_exec(exec);
    let rot = g.constant(motion.rot6d.clone().reshaped([1, motion.frames(), n, 6]));
    let root = g.constant(motion.root_pos.clone().reshaped([1, motion.frames(), 3]));
    let rot = g.gather(rot, 1, frames);
    let root = g.gather(root, 1, frames);
    let batch = FkBatch::new(&[&character.skeleton])?;
    let (_, transforms) = fk_from_rot6d(&mut g, rot, root, &batch)?;
    let geometry = CharacterGeometry::new(character);
    let verts = mesh::lbs_op(&mut g, transforms, &geometry.mesh)?;
    let verts = g.reshape(verts, &[frames.len(), geometry.mesh.num_vertices(), 3]);
    let e = embed_vertices_op(&mut g, verts, &geometry, views, embedder)?;
    Ok(g.value(e).clone())
}

/// Render and embed posed vertices `[F, V, 3]` on the tape → `[F, K]`.
/// Cameras follow each frame's centroid but are not differentiated through.
pub fn embed_vertices_op(
    g: &mut Graph,
    vertices: Var,
    geometry: &CharacterGeometry,
    views: &[View],
    embedder: &dyn DifferentiableEmbedder,
) -> Result<Var> {
    let v = g.value(vertices);
    let s = v.shape().to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch(format!("expected vertices [F, V, 3], got {s:?}")));
    }
    let cameras: Vec<Vec<Camera>> = v
        .data()
        .chunks_exact(s[1] * 3)
        .map(|frame| {
            let verts: Vec<Vec3> = frame.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
            frame_cameras(&verts, geometry.height, views)
        })
        .collect();
    let images = render::render_op(g, vertices, &geometry.faces, &cameras, &RenderSettings::default())?;
    embedder.embed_op(g, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::MockEmbedder;
    use crate::synth::{make_character, make_motion, Proportions, Style};

    #[test]
    fn tape_embedding_matches_plain_path() {
        let p = Proportions::default();
        let c = make_character("c", 11, &p).unwrap();
        let m = make_motion(&c.skeleton, &p, Style::Wave, 3, 30.0, 0).unwrap();
        let views = views_for(3).unwrap();
        let plain = embed_motion(&c, &m, &[0, 2], &views, &MockEmbedder, Exec::default()).unwrap();
        let posed = pose_frames(&c, &m).unwrap();
        let mut data = Vec::new();
        for f in [0, 2] {
            data.extend(posed[f].0.iter().flatten());
        }
        let mut g = Graph::new();
        let nv = c.mesh.num_vertices();
        let verts = g.constant(Tensor::new([2, nv, 3], data));
        let e = embed_vertices_op(&mut g, verts, &CharacterGeometry::new(&c), &views, &MockEmbedder).unwrap();
        assert!(g.value(e).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn pen_op_matches_plain_sum() {
        let p = Proportions::default();
        let src = make_character("s", 11, &p).unwrap();
        let mut fat = p;
        fat.torso_radius *= 1.8;
        let tgt = make_character("t", 11, &fat).unwrap();
        let m = make_motion(&src.skeleton, &p, Style::Belly, 2, 30.0, 0).unwrap();
        let body = BodyField::build(&tgt, Exec::default()).unwrap();
        let posed = pose_frames(&tgt, &m).unwrap();
        let plain: f64 = posed.iter().map(|(v, t)| body.frame_pen_loss(v, t)).sum();
        assert!(plain > 0.0);
        let mut g = Graph::new();
        let nv = tgt.mesh.num_vertices();
        let n = tgt.skeleton.num_joints();
        let verts = g.constant(Tensor::new([2, nv, 3], posed.iter().flat_map(|(v, _)| v.iter().flatten().copied()).collect()));
        let tr = g.constant(Tensor::new(
            [2, n, 12],
            posed
                .iter()
                .flat_map(|(_, t)| t.iter().flat_map(|r| r.rot.into_iter().chain(r.trans)))
                .collect(),
        ));
        let l = body.pen_loss_op(&mut g, verts, tr).unwrap();
        assert!((g.scalar(l) - plain).abs() < 1e-9 * plain.max(1.0));
    }

    #[test]
    fn sampled_frame_indices() {
        assert_eq!(sampled_frames(10, 4), vec![0, 4, 8]);
        assert_eq!(sampled_frames(3, 0), vec![0, 1, 2]);
    }
}
