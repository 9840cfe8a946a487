//! Joint distance matrices and their row-L1 normalization.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added under the square root so coincident joints have a finite gradient.
pub const DISTANCE_GUARD: f64 = 1e-12;
/// Added to each row's L1 norm before dividing.
pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    /// `[N, N]`
    pub values: Tensor,
    pub normalized: bool,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.data()[i * self.size() + j]
    }
}

/// `‖x‖` written as `x²/sqrt(x² + guard)`: exact zero with zero gradient at
/// coincident points, and equal to the true distance to ~1e-13 relative otherwise.
#[inline]
fn guarded_distance(sq: f64) -> f64 {
    sq / (sq + DISTANCE_GUARD).sqrt()
}

#[inline]
fn guarded_distance_deriv(sq: f64) -> f64 {
    // d/d(sq) of sq / sqrt(sq + g)
    (sq + 2.0 * DISTANCE_GUARD) / (2.0 * (sq + DISTANCE_GUARD).powf(1.5))
}

/// Pairwise Euclidean distances between the rows of an `[N, 3]` tensor.
pub fn joint_distance_matrix(positions: &Tensor) -> Result<DistanceMatrix> {
    let s = positions.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::ShapeMismatch(format!("positions must be [N, 3], got {s:?}")));
    }
    let n = s[0];
    let p = positions.data();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = (0..3).map(|k| (p[i * 3 + k] - p[j * 3 + k]).powi(2)).sum();
            let v = guarded_distance(sq);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix {
        values: Tensor::new([n, n], d),
        normalized: false,
    })
}

/// Divides each row by its L1 norm plus [`NORMALIZE_EPS`]. An all-zero row stays zero.
pub fn normalize_jdm(d: &DistanceMatrix) -> DistanceMatrix {
    let n = d.size();
    let mut out = d.values.clone();
    for row in out.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().map(|v| v.abs()).sum::<f64>() + NORMALIZE_EPS;
        row.iter_mut().for_each(|v| *v /= s);
    }
    DistanceMatrix {
        values: out,
        normalized: true,
    }
}

/// Tape op: positions `[..., N, 3]` → normalized distance matrices `[..., N, N]`.
pub fn normalized_jdm_op(g: &mut Graph, positions: Var) -> Result<Var> {
    let pv = g.value(positions);
    let s = pv.shape().to_vec();
    if s.len() < 2 || s[s.len() - 1] != 3 {
        return Err(Error::ShapeMismatch(format!("positions must be [..., N, 3], got {s:?}")));
    }
    let n = s[s.len() - 2];
    let frames = pv.len() / (n * 3);
    let exec = g.exec();
    let mut out = vec![0.0; frames * n * n];
    {
        let pd = pv.data();
        exec.for_each_chunk_mut(&mut out, n * n, |f, chunk| {
            let p = Tensor::new([n, 3], pd[f * n * 3..(f + 1) * n * 3].to_vec());
            let d = normalize_jdm(&joint_distance_matrix(&p).unwrap());
            chunk.copy_from_slice(d.values.data());
        });
    }
    let mut oshape = s[..s.len() - 1].to_vec();
    oshape.push(n);
    Ok(g.custom(
        Tensor::new(oshape, out),
        &[positions],
        Box::new(move |grad, p, out| {
            let (pd, gd, od) = (p[0].data(), grad.data(), out.data());
            let per_frame = exec.map_range(frames, |f| {
                jdm_frame_vjp(
                    &pd[f * n * 3..(f + 1) * n * 3],
                    &od[f * n * n..(f + 1) * n * n],
                    &gd[f * n * n..(f + 1) * n * n],
                    n,
                )
            });
            vec![Some(Tensor::new(p[0].shape().to_vec(), per_frame.concat()))]
        }),
    ))
}

fn jdm_frame_vjp(p: &[f64], eta: &[f64], g_eta: &[f64], n: usize) -> Vec<f64> {
    // eta_ij = d_ij / s_i with s_i = Σ_k d_ik + eps
    let mut sq = vec![0.0; n * n];
    let mut row_sum = vec![NORMALIZE_EPS; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v: f64 = (0..3).map(|k| (p[i * 3 + k] - p[j * 3 + k]).powi(2)).sum();
                sq[i * n + j] = v;
                row_sum[i] += guarded_distance(v);
            }
        }
    }
    // dL/dd_ij = (g_ij − Σ_k g_ik eta_ik) / s_i
    let mut g_d = vec![0.0; n * n];
    for i in 0..n {
        let dot: f64 = (0..n).map(|k| g_eta[i * n + k] * eta[i * n + k]).sum();
        for j in 0..n {
            g_d[i * n + j] = (g_eta[i * n + j] - dot) / row_sum[i];
        }
    }
    let mut gp = vec![0.0; n * 3];
    for i in 0..n {
        for j in i + 1..n {
            // d_ij and d_ji share the same distance
            let coef = (g_d[i * n + j] + g_d[j * n + i]) * guarded_distance_deriv(sq[i * n + j]) * 2.0;
            for k in 0..3 {
                let diff = p[i * 3 + k] - p[j * 3 + k];
                gp[i * 3 + k] += coef * diff;
                gp[j * 3 + k] -= coef * diff;
            }
        }
    }
    gp
}
