//! Differentiable multi-view silhouette rendering.
//!
//! Each face contributes `D_f = σ(s · (d / diag)² / τ)` to a pixel, where `d` is
//! the pixel's distance to the projected triangle, `s = +1` inside and `−1`
//! outside, and `diag` is the image diagonal. Occupancy is `1 − Π_f (1 − D_f)`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::parallel::Exec;
use crate::tensor::Tensor;

pub const DEFAULT_IMAGE_SIZE: usize = 128;
pub const DEFAULT_FOV_DEG: f64 = 30.0;
/// Camera distance in character heights.
pub const CAMERA_DISTANCE: f64 = 2.5;
pub const DEFAULT_TAU: f64 = 1e-4;
const NEAR: f64 = 1e-3;
/// Faces farther than this (in units of the sigmoid argument) contribute nothing.
const CUTOFF_LOGIT: f64 = 18.0;
const MAX_COVERAGE: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Left,
    Right,
}

impl View {
    pub const ALL: [View; 3] = [View::Front, View::Left, View::Right];

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Left => "left",
            View::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view: View,
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub image_size: usize,
}

/// Orthonormal camera frame plus intrinsics.
#[derive(Clone, Copy, Debug)]
struct Projector {
    pos: Vec3,
    right: Vec3,
    up: Vec3,
    fwd: Vec3,
    focal: f64,
    center: f64,
}

impl Camera {
    /// Characters face +z with +y up: the front camera looks down −z, the left
    /// camera sits on the character's left (+x).
    pub fn standard(view: View, centroid: Vec3, height: f64) -> Self {
        let d = CAMERA_DISTANCE * height;
        let offset = match view {
            View::Front => [0.0, 0.0, d],
            View::Left => [d, 0.0, 0.0],
            View::Right => [-d, 0.0, 0.0],
        };
        Self {
            view,
            position: math::add(centroid, offset),
            look_at: centroid,
            up: [0.0, 1.0, 0.0],
            fov_deg: DEFAULT_FOV_DEG,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }

    pub fn standard_set(views: &[View], centroid: Vec3, height: f64) -> Vec<Camera> {
        views.iter().map(|&v| Self::standard(v, centroid, height)).collect()
    }

    fn projector(&self) -> Result<Projector> {
        let f = math::sub(self.look_at, self.position);
        if math::norm(f) < 1e-12 {
            return Err(Error::DegenerateCamera(format!("{} camera position equals its target", self.view.name())));
        }
        let fwd = math::normalize(f);
        let r = math::cross(fwd, self.up);
        if math::norm(r) < 1e-9 {
            return Err(Error::DegenerateCamera(format!("{} camera up vector is parallel to its view direction", self.view.name())));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || self.image_size == 0 {
            return Err(Error::DegenerateCamera(format!("{} camera has invalid intrinsics", self.view.name())));
        }
        let right = math::normalize(r);
        let up = math::cross(right, fwd);
        let center = self.image_size as f64 / 2.0;
        Ok(Projector {
            pos: self.position,
            right,
            up,
            fwd,
            focal: center / (self.fov_deg.to_radians() / 2.0).tan(),
            center,
        })
    }
}

impl Projector {
    /// Pixel coordinates (x right, y down) and camera-space depth.
    fn project(&self, p: Vec3) -> ([f64; 2], f64) {
        let d = math::sub(p, self.pos);
        let (x, y, z) = (math::dot(d, self.right), math::dot(d, self.up), math::dot(d, self.fwd));
        ([self.center + self.focal * x / z, self.center - self.focal * y / z], z)
    }

    /// Adds `g · ∂(pixel)/∂p` for a pixel-space gradient `g`.
    fn backproject(&self, p: Vec3, g: [f64; 2]) -> Vec3 {
        let d = math::sub(p, self.pos);
        let (x, y, z) = (math::dot(d, self.right), math::dot(d, self.up), math::dot(d, self.fwd));
        let gx = g[0] * self.focal / z;
        let gy = -g[1] * self.focal / z;
        // ∂(x/z)/∂p = right/z − x fwd/z²
        let gz = -(gx * x + gy * y) / z;
        math::add(math::add(math::scale(self.right, gx), math::scale(self.up, gy)), math::scale(self.fwd, gz))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    /// Sharpness, relative to the squared image diagonal.
    pub tau: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

/// Per-camera soft silhouettes.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub views: Vec<View>,
    /// `[H, W]` occupancy per camera.
    pub images: Vec<Tensor>,
}

/// Projected triangle with per-edge data reused across pixels.
struct Tri {
    v: [[f64; 2]; 3],
    e: [[f64; 2]; 3],
    inv_len2: [f64; 3],
    area: f64,
    /// unexpanded bounding box: x0, x1, y0, y1
    bbox: [f64; 4],
}

impl Tri {
    fn new(v: [[f64; 2]; 3]) -> Self {
        let e = [0, 1, 2].map(|i| {
            let (a, b) = (v[i], v[(i + 1) % 3]);
            [b[0] - a[0], b[1] - a[1]]
        });
        let inv_len2 = e.map(|d| {
            let l = d[0] * d[0] + d[1] * d[1];
            if l > 0.0 {
                1.0 / l
            } else {
                0.0
            }
        });
        let area = e[0][0] * (v[2][1] - v[0][1]) - e[0][1] * (v[2][0] - v[0][0]);
        let xs = v.map(|q| q[0]);
        let ys = v.map(|q| q[1]);
        let min = |a: [f64; 3]| a[0].min(a[1]).min(a[2]);
        let max = |a: [f64; 3]| a[0].max(a[1]).max(a[2]);
        Self {
            v,
            e,
            inv_len2,
            area,
            bbox: [min(xs), max(xs), min(ys), max(ys)],
        }
    }

    /// Squared distance from `p` to the bounding box; a lower bound on the
    /// squared distance to the triangle.
    fn bbox_dist2(&self, p: [f64; 2]) -> f64 {
        let dx = (self.bbox[0] - p[0]).max(p[0] - self.bbox[1]).max(0.0);
        let dy = (self.bbox[2] - p[1]).max(p[1] - self.bbox[3]).max(0.0);
        dx * dx + dy * dy
    }
}

struct FaceSample {
    /// D_f at the pixel
    coverage: f64,
    /// ∂D_f/∂(projected vertex) for the three corners
    grad: [[f64; 2]; 3],
}

/// Coverage of one pixel by one projected triangle; `None` when negligible.
fn face_sample(p: [f64; 2], tri: &Tri, inv_sigma: f64, reach2: f64, with_grad: bool) -> Option<FaceSample> {
    if tri.bbox_dist2(p) > reach2 {
        return None;
    }
    let mut inside = tri.area != 0.0;
    let mut best = (f64::INFINITY, 0usize, 0.0);
    for i in 0..3 {
        let (a, e) = (tri.v[i], tri.e[i]);
        let ap = [p[0] - a[0], p[1] - a[1]];
        inside &= (e[0] * ap[1] - e[1] * ap[0]) * tri.area > 0.0;
        let t = ((ap[0] * e[0] + ap[1] * e[1]) * tri.inv_len2[i]).clamp(0.0, 1.0);
        let r = [ap[0] - t * e[0], ap[1] - t * e[1]];
        let d2 = r[0] * r[0] + r[1] * r[1];
        if d2 < best.0 {
            best = (d2, i, t);
        }
    }
    let (d2, i, t) = best;
    let sign = if inside { 1.0 } else { -1.0 };
    let x = sign * d2 * inv_sigma;
    if x < -CUTOFF_LOGIT {
        return None;
    }
    let raw = sigmoid(x);
    let coverage = raw.min(MAX_COVERAGE);
    let mut grad = [[0.0; 2]; 3];
    if with_grad && raw < MAX_COVERAGE {
        // envelope theorem on the closest point q = a + t (b − a)
        let (a, e) = (tri.v[i], tri.e[i]);
        let r = [p[0] - a[0] - t * e[0], p[1] - a[1] - t * e[1]];
        let dd = raw * (1.0 - raw) * sign * inv_sigma;
        for k in 0..2 {
            grad[i][k] = dd * -2.0 * r[k] * (1.0 - t);
            grad[(i + 1) % 3][k] = dd * -2.0 * r[k] * t;
        }
    }
    Some(FaceSample { coverage, grad })
}

struct Projected {
    tris: Vec<Option<Tri>>,
    /// pixel bounds per face: x0, x1, y0, y1 (inclusive)
    bounds: Vec<[usize; 4]>,
    reach2: f64,
}

fn project_faces(proj: &Projector, verts: &[Vec3], faces: &[[usize; 3]], size: usize, inv_sigma: f64) -> Projected {
    let pix: Vec<([f64; 2], f64)> = verts.iter().map(|&v| proj.project(v)).collect();
    let reach = (CUTOFF_LOGIT / inv_sigma).sqrt();
    let mut tris = Vec::with_capacity(faces.len());
    let mut bounds = Vec::with_capacity(faces.len());
    for f in faces {
        if f.iter().any(|&i| pix[i].1 <= NEAR) {
            tris.push(None);
            bounds.push([1, 0, 1, 0]);
            continue;
        }
        let tri = Tri::new(f.map(|i| pix[i].0));
        let [bx0, bx1, by0, by1] = tri.bbox;
        let lo = |v: f64| (v.ceil().max(0.0) as usize).min(size);
        let hi = |v: f64| if v < 0.0 { None } else { Some((v.floor() as usize).min(size - 1)) };
        match (lo(bx0 - reach - 0.5), hi(bx1 + reach - 0.5), lo(by0 - reach - 0.5), hi(by1 + reach - 0.5)) {
            (x0, Some(x1), y0, Some(y1)) if x0 <= x1 && y0 <= y1 && x0 < size && y0 < size => {
                tris.push(Some(tri));
                bounds.push([x0, x1, y0, y1]);
            }
            _ => {
                tris.push(None);
                bounds.push([1, 0, 1, 0]);
            }
        }
    }
    Projected {
        tris,
        bounds,
        reach2: reach * reach,
    }
}

/// Below this uncovered fraction a pixel counts as fully occupied; further
/// faces change neither its value nor its gradients measurably.
const SATURATED: f64 = 1e-30;

fn render_one(proj: &Projector, verts: &[Vec3], faces: &[[usize; 3]], size: usize, inv_sigma: f64) -> Vec<f64> {
    let pf = project_faces(proj, verts, faces, size, inv_sigma);
    let mut keep = vec![1.0; size * size];
    for (tri, b) in pf.tris.iter().zip(&pf.bounds) {
        let Some(tri) = tri else { continue };
        for py in b[2]..=b[3] {
            for px in b[0]..=b[1] {
                let k = &mut keep[py * size + px];
                if *k < SATURATED {
                    continue;
                }
                if let Some(s) = face_sample([px as f64 + 0.5, py as f64 + 0.5], tri, inv_sigma, pf.reach2, false) {
                    *k *= 1.0 - s.coverage;
                }
            }
        }
    }
    keep.iter().map(|k| 1.0 - k).collect()
}

/// `grad` is ∂L/∂occupancy for one image; returns ∂L/∂vertices.
fn render_one_backward(
    proj: &Projector,
    verts: &[Vec3],
    faces: &[[usize; 3]],
    size: usize,
    inv_sigma: f64,
    occupancy: &[f64],
    grad: &[f64],
) -> Vec<Vec3> {
    let pf = project_faces(proj, verts, faces, size, inv_sigma);
    let mut g2d = vec![[0.0; 2]; verts.len()];
    for (f, (tri, b)) in pf.tris.iter().zip(&pf.bounds).enumerate() {
        let Some(tri) = tri else { continue };
        for py in b[2]..=b[3] {
            for px in b[0]..=b[1] {
                let idx = py * size + px;
                if grad[idx] == 0.0 || 1.0 - occupancy[idx] < SATURATED {
                    continue;
                }
                let Some(s) = face_sample([px as f64 + 0.5, py as f64 + 0.5], tri, inv_sigma, pf.reach2, true) else {
                    continue;
                };
                // ∂O/∂D_f = Π_{g≠f} (1 − D_g)
                let others = (1.0 - occupancy[idx]) / (1.0 - s.coverage);
                let w = grad[idx] * others;
                for c in 0..3 {
                    let v = faces[f][c];
                    g2d[v][0] += w * s.grad[c][0];
                    g2d[v][1] += w * s.grad[c][1];
                }
            }
        }
    }
    verts
        .iter()
        .zip(&g2d)
        .map(|(&p, &g)| if g == [0.0; 2] { [0.0; 3] } else { proj.backproject(p, g) })
        .collect()
}

fn inv_sigma(size: usize, settings: &RenderSettings) -> Result<f64> {
    if !(settings.tau > 0.0) {
        return Err(Error::InvalidConfig(format!("render tau must be positive, got {}", settings.tau)));
    }
    let diag2 = 2.0 * (size * size) as f64;
    Ok(1.0 / (settings.tau * diag2))
}

/// Renders one posed mesh from every camera.
pub fn render_views(vertices: &[Vec3], faces: &[[usize; 3]], cameras: &[Camera], settings: &RenderSettings) -> Result<RenderedFrame> {
    if vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch("render_views: non-finite vertex".into()));
    }
    let mut images = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let proj = cam.projector()?;
        let s = cam.image_size;
        let data = render_one(&proj, vertices, faces, s, inv_sigma(s, settings)?);
        images.push(Tensor::new([s, s], data));
    }
    Ok(RenderedFrame {
        views: cameras.iter().map(|c| c.view).collect(),
        images,
    })
}

/// Tape renderer. `vertices` is `[F, V, 3]`; `cameras[f]` holds the cameras for
/// frame `f` (all the same image size). Output is `[F, C, H, W]`.
pub fn render_op(
    g: &mut Graph,
    vertices: Var,
    faces: &Arc<Vec<[usize; 3]>>,
    cameras: &[Vec<Camera>],
    settings: &RenderSettings,
) -> Result<Var> {
    let vs = g.value(vertices).shape().to_vec();
    if vs.len() != 3 || vs[2] != 3 || vs[0] != cameras.len() {
        return Err(Error::ShapeMismatch(format!(
            "render_op: vertices must be [{}, V, 3], got {vs:?}",
            cameras.len()
        )));
    }
    let (frames, nv) = (vs[0], vs[1]);
    let nc = cameras.first().map_or(0, Vec::len);
    let size = cameras.first().and_then(|c| c.first()).map_or(DEFAULT_IMAGE_SIZE, |c| c.image_size);
    if cameras.iter().any(|cs| cs.len() != nc || cs.iter().any(|c| c.image_size != size)) {
        return Err(Error::ShapeMismatch("render_op: every frame needs the same cameras and image size".into()));
    }
    if faces.iter().flatten().any(|&i| i >= nv) {
        return Err(Error::ShapeMismatch("render_op: face index out of range".into()));
    }
    let projectors: Vec<Projector> = cameras.iter().flatten().map(Camera::projector).collect::<Result<_>>()?;
    let projectors = Arc::new(projectors);
    let inv_s = inv_sigma(size, settings)?;
    let exec: Exec = g.exec();
    let vd = g.value(vertices).data();
    let frame_verts = move |d: &[f64], f: usize| -> Vec<Vec3> {
        d[f * nv * 3..(f + 1) * nv * 3].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    };
    let pix = size * size;
    let mut out = vec![0.0; frames * nc * pix];
    exec.for_each_chunk_mut(&mut out, pix, |k, img| {
        let f = k / nc.max(1);
        let verts = frame_verts(vd, f);
        img.copy_from_slice(&render_one(&projectors[k], &verts, faces, size, inv_s));
    });
    let faces = faces.clone();
    Ok(g.custom(
        Tensor::new([frames, nc, size, size], out),
        &[vertices],
        Box::new(move |grad, p, out| {
            let vd = p[0].data();
            let parts = exec.map_range(frames * nc, |k| {
                let f = k / nc;
                let verts = frame_verts(vd, f);
                render_one_backward(
                    &projectors[k],
                    &verts,
                    &faces,
                    size,
                    inv_s,
                    &out.data()[k * pix..(k + 1) * pix],
                    &grad.data()[k * pix..(k + 1) * pix],
                )
            });
            let mut gv = vec![0.0; frames * nv * 3];
            for (k, part) in parts.iter().enumerate() {
                let f = k / nc;
                for (v, gvk) in part.iter().enumerate() {
                    for c in 0..3 {
                        gv[(f * nv + v) * 3 + c] += gvk[c];
                    }
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), gv))]
        }),
    ))
}

/// Writes an occupancy image `[H, W]` as 8-bit grayscale PNG.
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_png(image)?)
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = image.shape() else {
        return Err(Error::ShapeMismatch(format!("PNG export needs [H, W], got {:?}", image.shape())));
    };
    let pixels: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, *w as u32, *h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::ShapeMismatch(format!("PNG encoding failed: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::ShapeMismatch(format!("PNG encoding failed: {e}")))?;
    }
    Ok(bytes)
}
