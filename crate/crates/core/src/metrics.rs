//! Evaluation metrics: joint MSE, penetration percentage, FID, semantic
//! consistency and image-text matching.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::render::RenderSettings;
use crate::scene::{self, BodyField};
use crate::semantics::SemanticBackend;
use crate::skeleton::{forward_kinematics, JointPositions, Motion};
use crate::tensor::Tensor;
use crate::train::PairContext;
use crate::vlm::VlmClient;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Added to both covariances before taking square roots.
pub const FID_REGULARIZATION: f64 = 1e-6;
pub const ITM_UNAVAILABLE: &str = "backend unavailable";

/// `(1/h) · mean over frames and joints of ‖P̂ − P‖²`. With `local`, each
/// frame's root position is subtracted from both first.
pub fn mse_metric(pred: &JointPositions, gt: &JointPositions, height: f64, local: bool) -> Result<f64> {
    if pred.positions.shape() != gt.positions.shape() {
        return Err(Error::ShapeMismatch(format!(
            "joint positions {:?} and {:?} differ",
            pred.positions.shape(),
            gt.positions.shape()
        )));
    }
    if !(height > 0.0) {
        return Err(Error::InvalidConfig(format!("height must be positive, got {height}")));
    }
    let (t, n) = (pred.frames(), pred.joints());
    if t * n == 0 {
        return Err(Error::ShapeMismatch("no joints to compare".into()));
    }
    let mut sum = 0.0;
    for f in 0..t {
        let (rp, rg) = if local { (pred.at(f, 0), gt.at(f, 0)) } else { ([0.0; 3], [0.0; 3]) };
        for j in 0..n {
            let (a, b) = (pred.at(f, j), gt.at(f, j));
            sum += (0..3).map(|k| ((a[k] - rp[k]) - (b[k] - rg[k])).powi(2)).sum::<f64>();
        }
    }
    Ok(sum / (t * n) as f64 / height)
}

/// `100 · inside / total` for one frame.
pub fn pen_percent(inside: usize, total_vertices: usize) -> f64 {
    if total_vertices == 0 {
        return 0.0;
    }
    100.0 * inside as f64 / total_vertices as f64
}

/// Percentage of mesh vertices inside the body, averaged over frames.
/// Only limb vertices are tested; the denominator is every vertex.
pub fn pen_metric(body: &BodyField, frames: &[(Vec<[f64; 3]>, Vec<crate::math::Rigid>)]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .iter()
        .map(|(v, t)| pen_percent(body.frame_inside_count(v, t), v.len()))
        .sum();
    total / frames.len() as f64
}

fn to_matrix(samples: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    let s = samples.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!("{what} embeddings must be [n, K], got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: s[0] });
    }
    Ok(DMatrix::from_row_slice(s[0], s[1], samples.data()))
}

fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix, negative
/// eigenvalues clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets `[n, K]`.
pub fn fid_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (to_matrix(a, "first")?, to_matrix(b, "second")?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths differ: {} and {}",
            xa.ncols(),
            xb.ncols()
        )));
    }
    let k = xa.ncols();
    let (ma, mut ca) = mean_and_covariance(&xa);
    let (mb, mut cb) = mean_and_covariance(&xb);
    for i in 0..k {
        ca[(i, i)] += FID_REGULARIZATION;
        cb[(i, i)] += FID_REGULARIZATION;
    }
    let sa = sqrtm_psd(&ca);
    let inner = sqrtm_psd(&(&sa * &cb * &sa));
    let mean_term = (ma - mb).norm_squared();
    let cov_term = ca.trace() + cb.trace() - 2.0 * inner.trace();
    Ok((mean_term + cov_term).max(0.0))
}

/// Mean over frames of `‖E_A − E_B‖²` for embeddings `[F, K]`.
pub fn scl_metric(ea: &Tensor, eb: &Tensor) -> Result<f64> {
    if ea.shape() != eb.shape() || ea.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {:?} and {:?} must both be [F, K]",
            ea.shape(),
            eb.shape()
        )));
    }
    let [f, k] = [ea.shape()[0], ea.shape()[1]];
    if f == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let total: f64 = (0..f)
        .map(|i| {
            (0..k)
                .map(|j| (ea.data()[i * k + j] - eb.data()[i * k + j]).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / f as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: usize,
    pub frames: usize,
    pub mse_global: f64,
    pub mse_local: f64,
    pub pen_percent: f64,
    pub scl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub backend: String,
    pub mse_global: f64,
    pub mse_local: f64,
    pub pen_percent: f64,
    pub fid: f64,
    pub scl: f64,
    /// `None` when no image-text matching service was configured.
    pub itm: Option<f64>,
    pub itm_status: String,
    pub clips: Vec<ClipReport>,
}

impl EvalReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub sem_frame_stride: usize,
    pub views: usize,
    pub deterministic: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sem_frame_stride: 4,
            views: 3,
            deterministic: false,
        }
    }
}

/// Scores retargeted `outputs` (target motions) against the `sources` they
/// came from and `ground_truth` target motions. Metrics are averaged over
/// clips weighted by frame count; FID pools every sampled frame.
pub fn evaluate(
    ctx: &PairContext,
    sources: &[Motion],
    outputs: &[Motion],
    ground_truth: &[Motion],
    backend: &dyn SemanticBackend,
    itm: Option<&VlmClient>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if sources.is_empty() {
        return Err(Error::DataEmpty("nothing to evaluate".into()));
    }
    if sources.len() != outputs.len() || sources.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sources, {} outputs and {} ground-truth clips",
            sources.len(),
            outputs.len(),
            ground_truth.len()
        )));
    }
    let exec = if opts.deterministic { Exec::Sequential } else { Exec::Parallel };
    let views = scene::views_for(opts.views)?;
    let (src, tgt) = (&ctx.pair.source, &ctx.pair.target);
    let h = tgt.skeleton.height();
    let mut clips = Vec::with_capacity(sources.len());
    let mut all_src = Vec::new();
    let mut all_tgt = Vec::new();
    let mut k = 0;
    let mut itm_scores = Vec::new();
    for (i, ((s, o), gt)) in sources.iter().zip(outputs).zip(ground_truth).enumerate() {
        if s.frames() != o.frames() || o.frames() != gt.frames() {
            return Err(Error::ShapeMismatch(format!("clip {i}: frame counts differ")));
        }
        let pred = forward_kinematics(&tgt.skeleton, o)?;
        let truth = forward_kinematics(&tgt.skeleton, gt)?;
        let posed = scene::pose_frames(tgt, o)?;
        let frames = scene::sampled_frames(o.frames(), opts.sem_frame_stride);
        let es = scene::embed_motion(src, s, &frames, &views, backend, exec)?;
        let et = scene::embed_motion(tgt, o, &frames, &views, backend, exec)?;
        k = es.shape()[1];
        if let Some(client) = itm {
            let src_frames = scene::render_motion(src, s, &frames, &views, &RenderSettings::default(), exec)?;
            let tgt_frames = scene::render_motion(tgt, o, &frames, &views, &RenderSettings::default(), exec)?;
            for (sf, tf) in src_frames.iter().zip(&tgt_frames) {
                let description = client.guided_vqa(sf)?.answer2;
                itm_scores.push(client.itm_score(tf, &description)?);
            }
        }
        clips.push(ClipReport {
            clip: i,
            frames: o.frames(),
            mse_global: mse_metric(&pred, &truth, h, false)?,
            mse_local: mse_metric(&pred, &truth, h, true)?,
            pen_percent: pen_metric(&ctx.body, &posed),
            scl: scl_metric(&es, &et)?,
        });
        all_src.extend_from_slice(es.data());
        all_tgt.extend_from_slice(et.data());
    }
    let n = all_src.len() / k.max(1);
    let fid = fid_metric(&Tensor::new([n, k], all_src), &Tensor::new([n, k], all_tgt))?;
    let frames: f64 = clips.iter().map(|c| c.frames as f64).sum();
    let weighted = |f: fn(&ClipReport) -> f64| clips.iter().map(|c| f(c) * c.frames as f64).sum::<f64>() / frames;
    let (itm, itm_status) = if itm.is_some() {
        let mean = itm_scores.iter().sum::<f64>() / itm_scores.len().max(1) as f64;
        (Some(mean), "ok".to_string())
    } else {
        (None, ITM_UNAVAILABLE.to_string())
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        backend: backend.backend_id(),
        mse_global: weighted(|c| c.mse_global),
        mse_local: weighted(|c| c.mse_local),
        pen_percent: weighted(|c| c.pen_percent),
        fid,
        scl: weighted(|c| c.scl),
        itm,
        itm_status,
        clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::SignedDistanceGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn positions(t: usize, n: usize, data: Vec<f64>) -> JointPositions {
        JointPositions {
            positions: Tensor::new([t, n, 3], data),
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn mse_hand_values() {
        let n = 4;
        let gt = positions(1, n, vec![0.0; 3 * n]);
        let mut d = vec![0.0; 3 * n];
        d[3 * 2 + 1] = 1.0;
        let pred = positions(1, n, d);
        assert_eq!(mse_metric(&gt, &gt, 2.0, false).unwrap(), 0.0);
        assert!((mse_metric(&pred, &gt, 2.0, false).unwrap() - 0.5 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn mse_local_removes_uniform_offset() {
        let gt = positions(2, 3, (0..18).map(|i| i as f64 * 0.1).collect());
        let shifted = positions(2, 3, gt.positions.data().iter().enumerate().map(|(i, v)| if i % 3 == 2 { v + 0.7 } else { *v }).collect());
        assert!(mse_metric(&shifted, &gt, 1.7, true).unwrap() < 1e-25);
        assert!(mse_metric(&shifted, &gt, 1.7, false).unwrap() > 0.0);
    }

    #[test]
    fn mse_scales_inversely_with_height() {
        let a = positions(2, 3, (0..18).map(|i| (i as f64).sin()).collect());
        let b = positions(2, 3, (0..18).map(|i| (i as f64).cos()).collect());
        let m1 = mse_metric(&a, &b, 1.0, false).unwrap();
        for h in [2.0, 4.0] {
            assert!((mse_metric(&a, &b, h, false).unwrap() * h - m1).abs() < 1e-12);
        }
        assert!(matches!(mse_metric(&a, &positions(1, 3, vec![0.0; 9]), 1.0, false), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pen_percent_arithmetic() {
        assert_eq!(pen_percent(3, 400), 0.75);
        assert_eq!(pen_percent(0, 400), 0.0);
    }

    #[test]
    fn pen_metric_counts_limb_vertices_only() {
        // field negative for x < 0
        let grid = SignedDistanceGrid::new([-2.0, -2.0, -2.0], 1.0, [5, 5, 5], {
            let mut v = Vec::new();
            for i in 0..5 {
                for _ in 0..25 {
                    v.push(i as f64 - 2.0);
                }
            }
            v
        })
        .unwrap();
        let body = BodyField {
            partition: crate::mesh::BodyPartition {
                limb_vertex_ids: vec![0, 1, 2, 3],
                body_face_ids: vec![],
                anchor_joint: 0,
            },
            grid: std::sync::Arc::new(grid),
            anchor_rest: crate::math::Rigid::IDENTITY,
        };
        let mut verts = vec![[1.0, 0.0, 0.0]; 8];
        verts[1] = [-0.5, 0.0, 0.0];
        verts[5] = [-0.5, 0.0, 0.0];
        let frame = (verts.clone(), vec![crate::math::Rigid::IDENTITY]);
        assert_eq!(pen_metric(&body, &[frame.clone()]), 100.0 / 8.0);
        let mut reversed = verts;
        reversed.swap(0, 1);
        assert_eq!(pen_metric(&body, &[(reversed, vec![crate::math::Rigid::IDENTITY])]), 100.0 / 8.0);
    }

    #[test]
    fn fid_identical_sets_is_zero() {
        let x = random(20, 6, 1);
        assert!(fid_metric(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn fid_mean_shift_is_squared_shift() {
        let x = random(30, 4, 2);
        let d = [0.5, -1.0, 2.0, 0.25];
        let y = Tensor::new([30, 4], x.data().iter().enumerate().map(|(i, v)| v + d[i % 4]).collect());
        let want: f64 = d.iter().map(|v| v * v).sum();
        assert!((fid_metric(&x, &y).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn fid_is_symmetric() {
        let (x, y) = (random(15, 5, 3), random(12, 5, 4));
        assert!((fid_metric(&x, &y).unwrap() - fid_metric(&y, &x).unwrap()).abs() < 1e-8);
    }

    /// Closed-form 2×2 oracle: √M = (M + √det·I) / √(tr + 2√det).
    fn fid_2d_oracle(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
        let fit = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            let m = [s.iter().map(|p| p[0]).sum::<f64>() / n, s.iter().map(|p| p[1]).sum::<f64>() / n];
            let mut c = [[0.0; 2]; 2];
            for p in s {
                for i in 0..2 {
                    for j in 0..2 {
                        c[i][j] += (p[i] - m[i]) * (p[j] - m[j]) / (n - 1.0);
                    }
                }
            }
            c[0][0] += FID_REGULARIZATION;
            c[1][1] += FID_REGULARIZATION;
            (m, c)
        };
        let mul = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
                }
            }
            r
        };
        let sqrt2 = |m: [[f64; 2]; 2]| {
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let s = det.sqrt();
            let t = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
            [[(m[0][0] + s) / t, m[0][1] / t], [m[1][0] / t, (m[1][1] + s) / t]]
        };
        let (ma, ca) = fit(a);
        let (mb, cb) = fit(b);
        let sa = sqrt2(ca);
        let inner = sqrt2(mul(mul(sa, cb), sa));
        let dm = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
        dm + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * (inner[0][0] + inner[1][1])
    }

    #[test]
    fn fid_matches_dense_2d_oracle() {
        let a = [[0.1, 0.3], [1.2, -0.4], [0.5, 0.9], [-0.7, 0.2], [0.0, -1.1]];
        let b = [[2.0, 1.0], [1.5, 0.2], [2.6, 1.9], [3.1, 0.4]];
        let ta = Tensor::new([5, 2], a.iter().flatten().copied().collect());
        let tb = Tensor::new([4, 2], b.iter().flatten().copied().collect());
        assert!((fid_metric(&ta, &tb).unwrap() - fid_2d_oracle(&a, &b)).abs() < 1e-8);
    }

    #[test]
    fn fid_needs_two_samples() {
        let one = Tensor::new([1, 3], vec![0.0; 3]);
        assert!(matches!(
            fid_metric(&one, &random(4, 3, 0)),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn scl_hand_values() {
        let a = Tensor::new([1, 2], vec![0.0, 0.0]);
        let b = Tensor::new([1, 2], vec![3.0, 4.0]);
        assert_eq!(scl_metric(&a, &b).unwrap(), 25.0);
        assert_eq!(scl_metric(&a, &a).unwrap(), 0.0);
        assert!(matches!(scl_metric(&a, &Tensor::new([2, 1], vec![0.0; 2])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            backend: "mock-pool8".into(),
            mse_global: 0.1234567890123,
            mse_local: 1.0 / 3.0,
            pen_percent: 2.5,
            fid: 0.0,
            scl: 7.0e-17,
            itm: None,
            itm_status: ITM_UNAVAILABLE.into(),
            clips: vec![ClipReport {
                clip: 0,
                frames: 4,
                mse_global: 0.1,
                mse_local: 0.2,
                pen_percent: 0.3,
                scl: 0.4,
            }],
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"itm\":null"));
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), r);
    }
}
