//! Continuous 6D rotation representation.
//!
//! A 6-vector holds the first two columns of a rotation matrix. Decoding runs
//! Gram–Schmidt on the two halves and completes the frame with a cross
//! product, so any non-degenerate 6-vector maps to a proper rotation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::tensor::Tensor;

/// Column norms at or below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;
const ROTATION_TOLERANCE: f64 = 1e-5;

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

struct Frame {
    b1: Vec3,
    b2: Vec3,
    b3: Vec3,
    n1: f64,
    n2: f64,
}

fn gram_schmidt(r6: &[f64]) -> Result<Frame> {
    let a1 = [r6[0], r6[1], r6[2]];
    let a2 = [r6[3], r6[4], r6[5]];
    let n1 = math::norm(a1);
    if !(n1 > DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation(format!("first column norm {n1:e}")));
    }
    let b1 = math::scale(a1, 1.0 / n1);
    let u2 = math::sub(a2, math::scale(b1, math::dot(b1, a2)));
    let n2 = math::norm(u2);
    if !(n2 > DEGENERATE_NORM) {
        return Err(Error::DegenerateRotation(format!(
            "second column norm after orthogonalization {n2:e}"
        )));
    }
    let b2 = math::scale(u2, 1.0 / n2);
    let b3 = math::cross(b1, b2);
    Ok(Frame { b1, b2, b3, n1, n2 })
}

fn frame_to_matrix(f: &Frame) -> Mat3 {
    [
        f.b1[0], f.b2[0], f.b3[0], f.b1[1], f.b2[1], f.b3[1], f.b1[2], f.b2[2], f.b3[2],
    ]
}

pub fn rot6d_to_matrix(r6: &[f64; 6]) -> Result<Mat3> {
    Ok(frame_to_matrix(&gram_schmidt(r6)?))
}

pub fn matrix_to_rot6d(m: &Mat3) -> Result<[f64; 6]> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotARotation("non-finite entry".into()));
    }
    let mtm = math::mat_mul_at(m, m);
    let ortho_err = mtm
        .iter()
        .zip(math::IDENTITY3.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if ortho_err > ROTATION_TOLERANCE {
        return Err(Error::NotARotation(format!("‖RᵀR − I‖∞ = {ortho_err:e}")));
    }
    let d = math::det(m);
    if (d - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::NotARotation(format!("determinant {d}")));
    }
    Ok([m[0], m[3], m[6], m[1], m[4], m[7]])
}

/// Vector-Jacobian product of the 6D → matrix map.
fn gram_schmidt_vjp(r6: &[f64], grad: &[f64]) -> [f64; 6] {
    let f = gram_schmidt(r6).expect("vjp evaluated at a point the forward pass accepted");
    let a2 = [r6[3], r6[4], r6[5]];
    let mut g1 = [grad[0], grad[3], grad[6]];
    let mut g2 = [grad[1], grad[4], grad[7]];
    let g3 = [grad[2], grad[5], grad[8]];
    // b3 = b1 × b2
    g1 = math::add(g1, math::cross(f.b2, g3));
    g2 = math::add(g2, math::cross(g3, f.b1));
    // b2 = u2 / n2
    let gu2 = math::scale(math::sub(g2, math::scale(f.b2, math::dot(f.b2, g2))), 1.0 / f.n2);
    // u2 = a2 − (b1·a2) b1
    let ga2 = math::sub(gu2, math::scale(f.b1, math::dot(f.b1, gu2)));
    let proj = math::dot(f.b1, a2);
    g1 = math::sub(
        g1,
        math::add(math::scale(gu2, proj), math::scale(a2, math::dot(f.b1, gu2))),
    );
    // b1 = a1 / n1
    let ga1 = math::scale(math::sub(g1, math::scale(f.b1, math::dot(f.b1, g1))), 1.0 / f.n1);
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

/// Tape op: `[..., 6]` → `[..., 9]` row-major rotation matrices.
pub fn rot6d_to_matrix_op(g: &mut Graph, r6: Var) -> Result<Var> {
    let x = g.value(r6);
    if x.last_dim() != 6 {
        return Err(Error::ShapeMismatch(format!(
            "6D rotations need a trailing axis of 6, got {:?}",
            x.shape()
        )));
    }
    let n = x.len() / 6;
    let mut out = Vec::with_capacity(n * 9);
    for k in 0..n {
        let f = gram_schmidt(&x.data()[k * 6..k * 6 + 6]).map_err(|e| match e {
            Error::DegenerateRotation(m) => Error::DegenerateRotation(format!("rotation #{k}: {m}")),
            other => other,
        })?;
        out.extend_from_slice(&frame_to_matrix(&f));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = 9;
    Ok(g.custom(
        Tensor::new(shape, out),
        &[r6],
        Box::new(move |grad, p, _| {
            let mut d = Vec::with_capacity(n * 6);
            for k in 0..n {
                d.extend_from_slice(&gram_schmidt_vjp(
                    &p[0].data()[k * 6..k * 6 + 6],
                    &grad.data()[k * 9..k * 9 + 9],
                ));
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use proptest::prelude::*;

    fn assert_mat_close(a: &Mat3, b: &Mat3, tol: f64) {
        for i in 0..9 {
            assert!((a[i] - b[i]).abs() < tol, "entry {i}: {} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn identity_vector_gives_identity() {
        let m = rot6d_to_matrix(&IDENTITY_6D).unwrap();
        assert_eq!(m, math::IDENTITY3);
        assert_eq!(matrix_to_rot6d(&math::IDENTITY3).unwrap(), IDENTITY_6D);
    }

    #[test]
    fn quarter_turn_about_z_matches_quaternion() {
        let h = std::f64::consts::FRAC_PI_4;
        let oracle = math::quat_to_matrix([h.cos(), 0.0, 0.0, h.sin()]);
        let m = rot6d_to_matrix(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_mat_close(&m, &oracle, 1e-12);
        let r6 = matrix_to_rot6d(&oracle).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for i in 0..6 {
            assert!((r6[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_removes_projection_and_scale() {
        let m = rot6d_to_matrix(&[2.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_mat_close(&m, &math::IDENTITY3, 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&[0.0; 6]),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn non_rotations_are_rejected() {
        let mut m = math::IDENTITY3;
        m[0] = -1.0; // reflection
        assert!(matches!(matrix_to_rot6d(&m), Err(Error::NotARotation(_))));
        let skew = [1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(matrix_to_rot6d(&skew), Err(Error::NotARotation(_))));
    }

    #[test]
    fn round_trip_thousand_quaternion_rotations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let r = math::quat_to_matrix(q);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r).unwrap()).unwrap();
            assert_mat_close(&back, &r, 1e-6);
            assert!((math::det(&back) - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn output_is_proper_rotation(r6 in proptest::array::uniform6(-3.0f64..3.0)) {
            prop_assume!(gram_schmidt(&r6).is_ok());
            let m = rot6d_to_matrix(&r6).unwrap();
            let mtm = math::mat_mul_at(&m, &m);
            for i in 0..9 {
                prop_assert!((mtm[i] - math::IDENTITY3[i]).abs() < 1e-9);
            }
            prop_assert!((math::det(&m) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn op_gradient_matches_finite_differences() {
        let x0 = Tensor::new([2, 6], vec![0.9, 0.2, -0.3, 0.1, 1.1, 0.4, -0.5, 0.7, 0.2, 0.6, 0.1, -0.8]);
        let weights: Vec<f64> = (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |g: &mut Graph, x: Var| {
            let m = rot6d_to_matrix_op(g, x).unwrap();
            let w = g.constant(Tensor::new([2, 9], weights.clone()));
            let p = g.mul(m, w);
            g.sum(p)
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let l = loss(&mut g, x);
        let analytic = g.backward(l).get(x).unwrap().clone();
        let numeric = finite_difference(&x0, 1e-5, |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let l = loss(&mut g, x);
            g.scalar(l)
        });
        assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-4);
    }
}
