//! Dense signed distance grids for the body surface.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::parallel::Exec;
use crate::tensor::Tensor;

/// Grid padding beyond the bounding box, in spacings.
pub const PADDING_CELLS: usize = 3;
/// Fraction of cells allowed to disagree between the two parity sweeps.
pub const MAX_INCONSISTENT_FRACTION: f64 = 0.005;
const DEFAULT_DIVISIONS: f64 = 64.0;
// Irrational-ish offsets so rays avoid hitting shared edges and vertices exactly.
const JITTER: [f64; 2] = [1.234_567e-4, 7.654_321e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedDistanceGrid {
    origin: Vec3,
    spacing: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

/// Body bounding-box diagonal divided by 64.
pub fn default_spacing(vertices: &[Vec3]) -> f64 {
    let (lo, hi) = bounds(vertices);
    math::norm(math::sub(hi, lo)) / DEFAULT_DIVISIONS
}

fn bounds(vertices: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

pub fn build_sdf(vertices: &[Vec3], faces: &[[usize; 3]], spacing: f64, exec: Exec) -> Result<SignedDistanceGrid> {
    if faces.is_empty() {
        return Err(Error::DataEmpty("body surface has no faces".into()));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::InvalidConfig(format!("SDF spacing must be positive, got {spacing}")));
    }
    if faces.iter().flatten().any(|&i| i >= vertices.len()) {
        return Err(Error::schema("body mesh", "face index out of range"));
    }
    let tris: Vec<[Vec3; 3]> = faces.iter().map(|f| f.map(|i| vertices[i])).collect();
    let (lo, hi) = bounds(vertices);
    let pad = PADDING_CELLS as f64 * spacing;
    let origin = math::sub(lo, [pad; 3]);
    let mut dims = [0usize; 3];
    for k in 0..3 {
        dims[k] = ((hi[k] - lo[k] + 2.0 * pad) / spacing).ceil() as usize + 1;
    }
    let [nx, ny, nz] = dims;
    let node = |ix: usize, iy: usize, iz: usize| -> Vec3 {
        [
            origin[0] + ix as f64 * spacing,
            origin[1] + iy as f64 * spacing,
            origin[2] + iz as f64 * spacing,
        ]
    };

    let inside_x = parity_sweep(&tris, origin, spacing, dims, 0, exec);
    let inside_y = parity_sweep(&tris, origin, spacing, dims, 1, exec);
    let total = nx * ny * nz;
    let inconsistent = inside_x.iter().zip(&inside_y).filter(|(a, b)| a != b).count();
    if inconsistent as f64 > MAX_INCONSISTENT_FRACTION * total as f64 {
        return Err(Error::NonWatertightBody { inconsistent, total });
    }

    let bvh = Bvh::new(&tris);
    let mut values = vec![0.0; total];
    exec.for_each_chunk_mut(&mut values, ny * nz, |ix, slab| {
        for iy in 0..ny {
            for iz in 0..nz {
                let i = iy * nz + iz;
                let d = bvh.nearest(&tris, node(ix, iy, iz));
                slab[i] = if inside_x[ix * ny * nz + i] { -d } else { d };
            }
        }
    });
    Ok(SignedDistanceGrid {
        origin,
        spacing,
        dims,
        values,
    })
}

/// Inside flags from ray parity along axis `axis` (0 = +x, 1 = +y).
fn parity_sweep(tris: &[[Vec3; 3]], origin: Vec3, h: f64, dims: [usize; 3], axis: usize, exec: Exec) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    // the two axes spanning the ray plane
    let (a, b) = if axis == 0 { (1, 2) } else { (0, 2) };
    let (na, nb, nr) = (dims[a], dims[b], dims[axis]);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); na * nb];
    for (t, tri) in tris.iter().enumerate() {
        let lo_a = tri.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
        let hi_a = tri.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
        let lo_b = tri.iter().map(|v| v[b]).fold(f64::INFINITY, f64::min);
        let hi_b = tri.iter().map(|v| v[b]).fold(f64::NEG_INFINITY, f64::max);
        let ia0 = (((lo_a - origin[a]) / h).floor().max(0.0) as usize).min(na - 1);
        let ia1 = (((hi_a - origin[a]) / h).ceil().max(0.0) as usize).min(na - 1);
        let ib0 = (((lo_b - origin[b]) / h).floor().max(0.0) as usize).min(nb - 1);
        let ib1 = (((hi_b - origin[b]) / h).ceil().max(0.0) as usize).min(nb - 1);
        for ia in ia0..=ia1 {
            for ib in ib0..=ib1 {
                rows[ia * nb + ib].push(t);
            }
        }
    }
    let per_row: Vec<Vec<bool>> = exec.map_range(na * nb, |r| {
        let (ia, ib) = (r / nb, r % nb);
        let pa = origin[a] + ia as f64 * h + JITTER[0] * h;
        let pb = origin[b] + ib as f64 * h + JITTER[1] * h;
        let mut hits: Vec<f64> = rows[r]
            .iter()
            .filter_map(|&t| ray_hit(&tris[t], a, b, axis, pa, pb))
            .collect();
        hits.sort_by(f64::total_cmp);
        let mut out = vec![false; nr];
        let mut k = 0;
        for (ir, slot) in out.iter_mut().enumerate() {
            let x = origin[axis] + ir as f64 * h;
            while k < hits.len() && hits[k] < x {
                k += 1;
            }
            // points before an odd number of remaining crossings are inside
            *slot = (hits.len() - k) % 2 == 1;
        }
        out
    });
    let mut inside = vec![false; nx * ny * nz];
    for (r, row) in per_row.iter().enumerate() {
        let (ia, ib) = (r / nb, r % nb);
        for (ir, &v) in row.iter().enumerate() {
            let mut idx = [0usize; 3];
            idx[a] = ia;
            idx[b] = ib;
            idx[axis] = ir;
            inside[(idx[0] * ny + idx[1]) * nz + idx[2]] = v;
        }
    }
    inside
}

/// Coordinate along `axis` where the line through (pa, pb) crosses the triangle.
fn ray_hit(tri: &[Vec3; 3], a: usize, b: usize, axis: usize, pa: f64, pb: f64) -> Option<f64> {
    let (x0, y0) = (tri[0][a], tri[0][b]);
    let (x1, y1) = (tri[1][a], tri[1][b]);
    let (x2, y2) = (tri[2][a], tri[2][b]);
    let det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2);
    if det.abs() < 1e-300 {
        return None;
    }
    let l0 = ((y1 - y2) * (pa - x2) + (x2 - x1) * (pb - y2)) / det;
    let l1 = ((y2 - y0) * (pa - x2) + (x0 - x2) * (pb - y2)) / det;
    let l2 = 1.0 - l0 - l1;
    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
        return None;
    }
    Some(l0 * tri[0][axis] + l1 * tri[1][axis] + l2 * tri[2][axis])
}

/// Closest point on a triangle (Voronoi-region walk).
pub(crate) fn closest_point_on_triangle(p: Vec3, [a, b, c]: &[Vec3; 3]) -> Vec3 {
    use math::{add, dot, scale, sub};
    let ab = sub(*b, *a);
    let ac = sub(*c, *a);
    let ap = sub(p, *a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, *b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return add(*a, scale(ab, d1 / (d1 - d3)));
    }
    let cp = sub(p, *c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return add(*a, scale(ac, d2 / (d2 - d6)));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return add(*b, scale(sub(*c, *b), (d4 - d3) / ((d4 - d3) + (d5 - d6))));
    }
    let denom = 1.0 / (va + vb + vc);
    add(*a, add(scale(ab, vb * denom), scale(ac, vc * denom)))
}

struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    // leaf: range into `order`; interior: children
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn new(tris: &[[Vec3; 3]]) -> Self {
        let centroids: Vec<Vec3> = tris
            .iter()
            .map(|t| math::scale(math::add(math::add(t[0], t[1]), t[2]), 1.0 / 3.0))
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..tris.len()).collect(),
        };
        bvh.build(tris, &centroids, 0, tris.len());
        bvh
    }

    fn build(&mut self, tris: &[[Vec3; 3]], centroids: &[Vec3], start: usize, end: usize) -> usize {
        let (lo, hi) = bounds(&self.order[start..end].iter().flat_map(|&t| tris[t]).collect::<Vec<_>>());
        let id = self.nodes.len();
        self.nodes.push(BvhNode {
            lo,
            hi,
            start,
            count: end - start,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = math::sub(hi, lo);
        let axis = (0..3).fold(0, |m, k| if ext[k] > ext[m] { k } else { m });
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
            centroids[x][axis].total_cmp(&centroids[y][axis])
        });
        let left = self.build(tris, centroids, start, mid);
        let right = self.build(tris, centroids, mid, end);
        let n = &mut self.nodes[id];
        n.count = 0;
        n.left = left;
        n.right = right;
        id
    }

    fn box_dist2(n: &BvhNode, p: Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (n.lo[k] - p[k]).max(0.0).max(p[k] - n.hi[k]);
            d += e * e;
        }
        d
    }

    fn nearest(&self, tris: &[[Vec3; 3]], p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if Self::box_dist2(n, p) >= best {
                continue;
            }
            if n.count > 0 {
                for &t in &self.order[n.start..n.start + n.count] {
                    let q = closest_point_on_triangle(p, &tris[t]);
                    let d = math::sub(p, q);
                    best = best.min(math::dot(d, d));
                }
            } else {
                let (l, r) = (n.left, n.right);
                let (dl, dr) = (Self::box_dist2(&self.nodes[l], p), Self::box_dist2(&self.nodes[r], p));
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.sqrt()
    }
}

impl SignedDistanceGrid {
    pub fn new(origin: Vec3, spacing: f64, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if !(spacing > 0.0) || dims.iter().any(|&d| d < 2) || values.len() != dims.iter().product::<usize>() {
            return Err(Error::schema(
                "sdf grid",
                format!("spacing {spacing}, dims {dims:?} and {} values are inconsistent", values.len()),
            ));
        }
        Ok(Self {
            origin,
            spacing,
            dims,
            values,
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Trilinear value and gradient. Points outside the grid take the value at
    /// the nearest grid point plus their distance to the grid box.
    pub fn query_point(&self, p: Vec3) -> (f64, Vec3) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut outside = [0.0; 3];
        for k in 0..3 {
            let n = self.dims[k];
            let hi = (n - 1) as f64;
            let raw = (p[k] - self.origin[k]) / self.spacing;
            let u = raw.clamp(0.0, hi);
            outside[k] = (raw - u) * self.spacing;
            let i = (u.floor() as usize).min(n - 2);
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let c = |a: usize, b: usize, d: usize| self.at(i + a, j + b, k + d);
        let c00 = c(0, 0, 0) * (1.0 - fx) + c(1, 0, 0) * fx;
        let c01 = c(0, 0, 1) * (1.0 - fx) + c(1, 0, 1) * fx;
        let c10 = c(0, 1, 0) * (1.0 - fx) + c(1, 1, 0) * fx;
        let c11 = c(0, 1, 1) * (1.0 - fx) + c(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let mut value = c0 * (1.0 - fz) + c1 * fz;

        let dx = {
            let d00 = c(1, 0, 0) - c(0, 0, 0);
            let d01 = c(1, 0, 1) - c(0, 0, 1);
            let d10 = c(1, 1, 0) - c(0, 1, 0);
            let d11 = c(1, 1, 1) - c(0, 1, 1);
            (d00 * (1.0 - fy) + d10 * fy) * (1.0 - fz) + (d01 * (1.0 - fy) + d11 * fy) * fz
        };
        let dy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
        let dz = c1 - c0;
        let mut grad = [dx, dy, dz].map(|d| d / self.spacing);
        let out_dist = math::norm(outside);
        if out_dist > 0.0 {
            value += out_dist;
            for k in 0..3 {
                if outside[k] != 0.0 {
                    grad[k] = outside[k] / out_dist;
                }
            }
        }
        (value, grad)
    }

    /// Values and gradients for `K` points.
    pub fn query(&self, points: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        points.iter().map(|&p| self.query_point(p)).unzip()
    }

    /// Little-endian sidecar: origin (3×f32), spacing (f32), dims (3×u32), then f32 values.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 4 * self.values.len());
        for o in self.origin {
            buf.extend((o as f32).to_le_bytes());
        }
        buf.extend((self.spacing as f32).to_le_bytes());
        for d in self.dims {
            buf.extend((d as u32).to_le_bytes());
        }
        for &v in &self.values {
            buf.extend((v as f32).to_le_bytes());
        }
        crate::io::write_atomic(path, &buf)
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let ctx = "sdf sidecar";
        if bytes.len() < 28 {
            return Err(Error::schema(ctx, "file shorter than its header"));
        }
        let word = |i: usize| -> [u8; 4] { bytes[i * 4..i * 4 + 4].try_into().unwrap() };
        let origin = [0, 1, 2].map(|i| f32::from_le_bytes(word(i)) as f64);
        let spacing = f32::from_le_bytes(word(3)) as f64;
        let dims = [4, 5, 6].map(|i| u32::from_le_bytes(word(i)) as usize);
        let n: usize = dims.iter().product();
        if bytes.len() != 28 + 4 * n {
            return Err(Error::schema(
                ctx,
                format!("dims {dims:?} need {} bytes, file has {}", 28 + 4 * n, bytes.len()),
            ));
        }
        let values = (0..n).map(|i| f32::from_le_bytes(word(7 + i)) as f64).collect();
        Self::new(origin, spacing, dims, values)
    }
}

/// Tape query: points `[..., 3]` → signed distances `[...]`.
pub fn sdf_query_op(g: &mut Graph, points: Var, grid: &Arc<SignedDistanceGrid>) -> Result<Var> {
    let pv = g.value(points);
    if pv.shape().last() != Some(&3) {
        return Err(Error::ShapeMismatch(format!("SDF query points must be [..., 3], got {:?}", pv.shape())));
    }
    let n = pv.len() / 3;
    let (vals, grads): (Vec<f64>, Vec<Vec3>) = pv
        .data()
        .chunks_exact(3)
        .map(|p| grid.query_point([p[0], p[1], p[2]]))
        .unzip();
    let oshape = pv.shape()[..pv.shape().len() - 1].to_vec();
    Ok(g.custom(
        Tensor::new(oshape, vals),
        &[points],
        Box::new(move |grad, p, _| {
            let gd = grad.data();
            let mut out = vec![0.0; n * 3];
            for i in 0..n {
                for k in 0..3 {
                    out[i * 3 + k] = gd[i] * grads[i][k];
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), out))]
        }),
    ))
}
