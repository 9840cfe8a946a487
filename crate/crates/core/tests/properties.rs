use std::sync::OnceLock;

use proptest::prelude::*;

use motionkit::io::{self, Character, MotionFile};
use motionkit::losses::{self, AdvConvention, FinetuneParts, LossWeights, PretrainParts};
use motionkit::math::{self, Mat3, Rigid, Vec3};
use motionkit::mesh::linear_blend_skinning;
use motionkit::metrics::{fid_metric, mse_metric};
use motionkit::rotation::{matrix_to_rot6d, rot6d_to_matrix};
use motionkit::skeleton::{forward_kinematics, joint_transforms};
use motionkit::synth::{make_character, make_motion, Proportions, Style};
use motionkit::{JointPositions, Motion, Tensor};

fn character() -> &'static Character {
    static C: OnceLock<Character> = OnceLock::new();
    C.get_or_init(|| make_character("prop", 11, &Proportions::default()).unwrap())
}

fn unit(v: Vec3) -> Vec3 {
    if math::norm(v) < 1e-6 {
        [0.0, 1.0, 0.0]
    } else {
        math::normalize(v)
    }
}

fn rotation() -> impl Strategy<Value = Mat3> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..std::f64::consts::PI).prop_map(|(a, t)| math::axis_angle(unit(a), t))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_motion(frames: usize, joints: usize) -> impl Strategy<Value = Motion> {
    (
        prop::collection::vec(rotation(), frames * joints),
        prop::collection::vec(-1.0f64..1.0, frames * 3),
    )
        .prop_map(move |(rots, root)| {
            let r6: Vec<f64> = rots.iter().flat_map(|m| matrix_to_rot6d(m).unwrap()).collect();
            Motion::new(Tensor::new([frames, joints, 6], r6), Tensor::new([frames, 3], root), 30.0).unwrap()
        })
}

/// Left-multiplies every frame's root rotation by `r` and rotates the root position.
fn rotate_globally(m: &Motion, r: &Mat3) -> Motion {
    let mut out = m.clone();
    for t in 0..m.frames() {
        let root = rot6d_to_matrix(&m.rot6d_at(t, 0)).unwrap();
        out.set_rot6d(t, 0, matrix_to_rot6d(&math::mat_mul(r, &root)).unwrap());
    }
    let root: Vec<f64> = (0..m.frames()).flat_map(|t| math::mat_vec(r, m.root_at(t))).collect();
    Motion::new(out.rot6d, Tensor::new([m.frames(), 3], root), m.fps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_round_trip(r in rotation()) {
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r).unwrap()).unwrap();
        prop_assert!(max_diff(&r, &back) < 1e-6);
    }

    #[test]
    fn fk_is_rigidly_equivariant(m in random_motion(2, 11), r in rotation()) {
        let skel = &character().skeleton;
        let p = forward_kinematics(skel, &m).unwrap();
        let q = forward_kinematics(skel, &rotate_globally(&m, &r)).unwrap();
        for t in 0..2 {
            for j in 0..11 {
                prop_assert!(max_diff(&math::mat_vec(&r, p.at(t, j)), &q.at(t, j)) < 1e-6);
            }
        }
    }

    #[test]
    fn lbs_commutes_with_global_rigid_motion(m in random_motion(1, 11), r in rotation(), d in prop::array::uniform3(-2.0f64..2.0)) {
        let c = character();
        let g = Rigid { rot: r, trans: d };
        let t = &joint_transforms(&c.skeleton, &m).unwrap()[0];
        let moved: Vec<Rigid> = t.iter().map(|x| g.compose(x)).collect();
        let a = linear_blend_skinning(&c.mesh, t).unwrap();
        let b = linear_blend_skinning(&c.mesh, &moved).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            prop_assert!(max_diff(&g.apply(*va), vb) < 1e-5);
        }
    }

    #[test]
    fn jdm_loss_ignores_uniform_scale(pts in prop::collection::vec(-1.0f64..1.0, 3 * 11), s in 0.1f64..10.0) {
        let p = Tensor::new([1, 11, 3], pts.clone());
        let q = Tensor::new([1, 11, 3], pts.iter().map(|v| v * s).collect());
        prop_assert!(losses::jdm_loss(&p, &q).unwrap() < 1e-6);
    }

    #[test]
    fn losses_are_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 24), b in prop::collection::vec(-3.0f64..3.0, 24)) {
        let (ta, tb) = (Tensor::new([2, 4, 3], a), Tensor::new([2, 4, 3], b));
        prop_assert!(losses::rec_loss(&ta, &tb).unwrap() >= 0.0);
        prop_assert!(losses::cyc_loss(&ta, &tb).unwrap() >= 0.0);
        prop_assert!(losses::jdm_loss(&ta, &tb).unwrap() >= 0.0);
        let ea = Tensor::new([2, 12], ta.data().to_vec());
        let eb = Tensor::new([2, 12], tb.data().to_vec());
        prop_assert!(losses::sem_loss(&ea, &eb).unwrap() >= 0.0);
    }

    #[test]
    fn adversarial_signs(probs in prop::collection::vec(0.001f64..0.999, 1..20), fake in prop::collection::vec(0.001f64..0.999, 1..20)) {
        prop_assert!(losses::adv_loss_generator(&probs, AdvConvention::Paper) <= 0.0);
        prop_assert!(losses::adv_loss_generator(&probs, AdvConvention::Nonsaturating) >= 0.0);
        prop_assert!(losses::adv_loss_discriminator(&probs, &fake) >= 0.0);
    }

    #[test]
    fn totals_are_affine(x in prop::array::uniform4(0.0f64..5.0), y in prop::array::uniform4(0.0f64..5.0), a in 0.0f64..2.0) {
        let w = LossWeights::default();
        let p = |v: [f64; 4]| PretrainParts { rec: v[0], cyc: v[1], adv: v[2], jdm: v[3] };
        let mix: Vec<f64> = (0..4).map(|i| a * x[i] + (1.0 - a) * y[i]).collect();
        let lhs = losses::total_pretrain_loss(&p([mix[0], mix[1], mix[2], mix[3]]), &w);
        let rhs = a * losses::total_pretrain_loss(&p(x), &w) + (1.0 - a) * losses::total_pretrain_loss(&p(y), &w);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        let f = |s: f64, q: f64| losses::total_finetune_loss(&FinetuneParts { sem: s, pen: q }, &w);
        prop_assert!((f(x[0] + y[0], x[1] + y[1]) - f(x[0], x[1]) - f(y[0], y[1])).abs() < 1e-9 * (1.0 + x[0] + y[0] + x[1] + y[1]));
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self(a in prop::collection::vec(-2.0f64..2.0, 8 * 3), b in prop::collection::vec(-2.0f64..2.0, 6 * 3)) {
        let (ta, tb) = (Tensor::new([8, 3], a), Tensor::new([6, 3], b));
        let ab = fid_metric(&ta, &tb).unwrap();
        let ba = fid_metric(&tb, &ta).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(fid_metric(&ta, &ta).unwrap() < 1e-6);
    }

    #[test]
    fn mse_scales_with_inverse_height(a in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 3), b in prop::collection::vec(-1.0f64..1.0, 2 * 5 * 3)) {
        let pa = JointPositions { positions: Tensor::new([2, 5, 3], a) };
        let pb = JointPositions { positions: Tensor::new([2, 5, 3], b) };
        let m1 = mse_metric(&pa, &pb, 1.0, false).unwrap();
        for h in [2.0, 4.0] {
            prop_assert!((mse_metric(&pa, &pb, h, false).unwrap() * h - m1).abs() < 1e-12 * (1.0 + m1));
        }
    }

    #[test]
    fn motion_json_round_trip_is_exact(m in random_motion(3, 11)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        io::save_motion("prop", &m, &path).unwrap();
        let back = io::load_motion(&path).unwrap();
        prop_assert_eq!(back.character.as_str(), "prop");
        prop_assert_eq!(back.motion, m);
    }

    #[test]
    fn motion_binary_round_trip_within_f32(m in random_motion(3, 11)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        io::save_motion("prop", &m, &path).unwrap();
        let back = io::load_motion(&path).unwrap().motion;
        prop_assert!(max_diff(back.rot6d.data(), m.rot6d.data()) < 1e-6);
        prop_assert!(max_diff(back.root_pos.data(), m.root_pos.data()) < 1e-6);
    }

    #[test]
    fn non_unit_weight_rows_are_rejected(v in 0usize..100, w in 0.5f64..0.99) {
        let mut file = character().to_file();
        let v = v % file.mesh.weights.len();
        file.mesh.weights[v] = vec![(0, w)];
        let err = file.validate().unwrap_err().to_string();
        prop_assert!(err.contains(&format!("vertex {v}")), "{}", err);
    }
}

#[test]
fn fk_rest_pose_reproduces_cumulative_offsets() {
    let skel = &character().skeleton;
    let m = Motion::rest(1, skel.num_joints(), [0.0; 3], 30.0);
    let p = forward_kinematics(skel, &m).unwrap();
    for (j, rest) in skel.rest_positions().iter().enumerate() {
        let mut expect = [0.0; 3];
        let mut k = Some(j);
        while let Some(i) = k {
            expect = math::add(expect, skel.offsets()[i]);
            k = skel.parent(i);
        }
        assert_eq!(p.at(0, j), expect);
        assert_eq!(*rest, expect);
    }
}

#[test]
fn lbs_bind_pose_is_identity() {
    let c = character();
    let rest = c.skeleton.rest_transforms();
    let v = linear_blend_skinning(&c.mesh, &rest).unwrap();
    assert!(max_diff(v.as_flattened(), c.mesh.vertices_bind().as_flattened()) < 1e-6);
}

#[test]
fn generated_motion_files_validate() {
    let p = Proportions::default();
    let c = character();
    for style in Style::ALL {
        let m = make_motion(&c.skeleton, &p, style, 8, 30.0, 1).unwrap();
        let file = MotionFile::from_motion(&c.name, &m);
        assert_eq!(file.validate().unwrap().motion, m);
    }
}
