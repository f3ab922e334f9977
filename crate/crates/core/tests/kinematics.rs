use std::f64::consts::PI;

use deskbot_core::kinematics::{
    clamp_joints, dh_link_transform, forward_frames, forward_kinematics, inverse_kinematics, jacobian, DhChain, DhLink,
    IkOptions, KinematicsError, Pose, Transform4,
};
use nalgebra::{Isometry3, Matrix4, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The link transform assembled from elementary motions: rotate about x by
/// alpha, slide along x by a, rotate about z by theta, slide along z by d.
fn oracle_link(link: &DhLink, theta: f64) -> Matrix4<f64> {
    let rx = Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), link.alpha),
    );
    let tx = Isometry3::translation(link.a, 0.0, 0.0);
    let rz = Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), link.theta_home + theta),
    );
    let tz = Isometry3::translation(0.0, 0.0, link.d);
    (rx * tx * rz * tz).to_homogeneous()
}

fn oracle_fk(chain: &DhChain, q: &[f64]) -> Matrix4<f64> {
    chain
        .links()
        .iter()
        .zip(q)
        .fold(Matrix4::identity(), |acc, (l, &t)| acc * oracle_link(l, t))
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn in_limits(chain: &DhChain) -> impl Strategy<Value = Vec<f64>> {
    chain
        .links()
        .iter()
        .map(|l| l.theta_min..=l.theta_max)
        .collect::<Vec<_>>()
}

fn any_link() -> impl Strategy<Value = DhLink> {
    (-PI + 1e-6..=PI, -0.3..0.3f64, -0.3..0.3f64, -PI..PI).prop_map(|(alpha, a, d, home)| DhLink {
        alpha,
        a,
        d,
        theta_home: home,
        theta_min: -PI,
        theta_max: PI,
    })
}

#[test]
fn twisted_link_at_thirty_degrees_matches_elementary_motions() {
    let link = DhLink::new(-PI / 2.0, 0.0, 0.0, 0.0, -PI, PI).unwrap();
    let got = dh_link_transform(&link, 30f64.to_radians()).unwrap();
    let (s, c) = (0.5, 3f64.sqrt() / 2.0);
    // Rotation about x by -90 degrees then about z by 30 degrees.
    #[rustfmt::skip]
    let expected = Matrix4::new(
        c, -s, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        -s, -c, 0.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    assert!(max_abs(&(got.matrix() - expected)) < 1e-15);
    assert!(max_abs(&(got.matrix() - oracle_link(&link, 30f64.to_radians()))) < 1e-15);
}

#[test]
fn table1_home_reaches_two_link_lengths() {
    let chain = DhChain::table1();
    let fk = forward_kinematics(&chain, &[0.0; 5]).unwrap();
    let oracle = oracle_fk(&chain, &[0.0; 5]);
    assert!(max_abs(&(fk.matrix() - oracle)) <= 1e-12);
    assert!((fk.translation() - Vector3::new(0.25883527474, 0.0, 0.0)).norm() <= 1e-12);
    let frames = forward_frames(&chain, &[0.0; 5]).unwrap();
    assert_eq!(frames.len(), 5);
    let xs: Vec<f64> = frames.iter().map(|f| f.translation().x).collect();
    assert_eq!(xs, vec![0.0, 0.0, 0.12941763737, 0.25883527474, 0.25883527474]);
}

#[test]
fn table1_limits_clamp_as_printed() {
    let chain = DhChain::table1();
    let deg = |v: f64| v.to_radians();
    let (q, moved) = clamp_joints(&chain, &[deg(150.0), deg(-10.0), 0.0, deg(-250.0), 0.0]).unwrap();
    assert!(moved);
    assert!((q.as_ref()[0] - deg(120.0)).abs() < 1e-12);
    assert!((q.as_ref()[3] - deg(-200.0)).abs() < 1e-12);
}

#[test]
fn targets_beyond_reach_are_rejected_before_iterating() {
    let chain = DhChain::table1();
    let far = Pose::from_position(Vector3::new(1.0, 0.0, 0.0));
    match inverse_kinematics(&chain, &far, &[0.0; 5], &IkOptions::default()) {
        Err(KinematicsError::OutOfWorkspace { distance, reach }) => assert!(distance > reach),
        other => panic!("{other:?}"),
    }
}

/// Round trip over 200 seeded in-limit targets from the home pose. Failures
/// must be typed errors; successes are verified by forward kinematics.
#[test]
fn ik_round_trip_recovers_reachable_poses() {
    let chain = DhChain::table1();
    let opts = IkOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let home = chain.home();
    let mut ok = 0;
    for _ in 0..200 {
        let q_star = chain.sample_joints(&mut rng);
        let target = Pose::from_transform(&forward_kinematics(&chain, q_star.as_ref()).unwrap());
        match inverse_kinematics(&chain, &target, home.as_ref(), &opts) {
            Ok(sol) => {
                let (_, clamped) = clamp_joints(&chain, sol.q.as_ref()).unwrap();
                assert!(!clamped, "solution violates limits");
                let reached = Transform4::try_from_matrix(oracle_fk(&chain, sol.q.as_ref())).unwrap();
                assert!((reached.translation() - target.position).norm() <= opts.pos_tol);
                assert!(reached.quaternion().angle_to(&target.orientation) <= opts.rot_tol);
                ok += 1;
            }
            Err(KinematicsError::Unreachable { .. }) => {}
            Err(e) => panic!("untyped failure: {e}"),
        }
    }
    assert!(ok >= 190, "{ok}/200 round trips");
}

/// Column-wise relative error of the analytic Jacobian against central
/// differences of the oracle forward kinematics.
fn jacobian_error(chain: &DhChain, q: &[f64]) -> f64 {
    let h = 1e-6;
    let jac = jacobian(chain, q).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..q.len() {
        let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
        qp[i] += h;
        qm[i] -= h;
        let (tp, tm) = (oracle_fk(chain, &qp), oracle_fk(chain, &qm));
        let lin = (tp.fixed_view::<3, 1>(0, 3) - tm.fixed_view::<3, 1>(0, 3)) / (2.0 * h);
        // Angular velocity is the skew part of dR/dq times R transposed.
        let r0 = oracle_fk(chain, q).fixed_view::<3, 3>(0, 0).into_owned();
        let d = (tp.fixed_view::<3, 3>(0, 0) - tm.fixed_view::<3, 3>(0, 0)) / (2.0 * h) * r0.transpose();
        let ang = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]) / 2.0;
        let fd = nalgebra::Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z);
        let col = jac.column(i);
        worst = worst.max((col - fd).norm() / col.norm().max(1e-12));
    }
    worst
}

#[test]
fn jacobian_matches_differences_at_home() {
    assert!(jacobian_error(&DhChain::table1(), &[0.0; 5]) <= 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn link_transforms_are_rigid(link in any_link(), theta in -10.0..10.0f64) {
        let t = dh_link_transform(&link, theta).unwrap();
        let r = t.rotation();
        let gram = r.transpose() * r - nalgebra::Matrix3::identity();
        prop_assert!(gram.iter().all(|v| v.abs() <= 1e-9));
        prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(t.matrix().row(3).into_owned(), nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        prop_assert!(max_abs(&(t.matrix() - oracle_link(&link, theta))) <= 1e-12);
    }

    #[test]
    fn fk_is_the_fold_of_link_transforms(q in in_limits(&DhChain::table1())) {
        let chain = DhChain::table1();
        let fk = forward_kinematics(&chain, &q).unwrap();
        prop_assert!(max_abs(&(fk.matrix() - oracle_fk(&chain, &q))) <= 1e-12);
        let frames = forward_frames(&chain, &q).unwrap();
        prop_assert_eq!(*frames.last().unwrap(), fk);
    }

    #[test]
    fn composition_grouping_does_not_matter(
        links in prop::collection::vec(any_link(), 2..7),
        split in 1usize..6,
        q in prop::collection::vec(-PI..PI, 7),
    ) {
        let split = split.min(links.len() - 1);
        let a: Vec<Transform4> = links.iter().zip(&q).map(|(l, &t)| dh_link_transform(l, t).unwrap()).collect();
        let left = a.iter().fold(Transform4::identity(), |acc, t| acc.compose(t));
        let head = a[..split].iter().fold(Transform4::identity(), |acc, t| acc.compose(t));
        let tail = a[split..].iter().rev().fold(Transform4::identity(), |acc, t| t.compose(&acc));
        prop_assert!(max_abs(&(left.matrix() - head.compose(&tail).matrix())) <= 1e-12);
    }

    #[test]
    fn jacobian_matches_differences(q in in_limits(&DhChain::table1())) {
        prop_assert!(jacobian_error(&DhChain::table1(), &q) <= 1e-4);
    }

    #[test]
    fn wrist_roll_jacobian_matches_differences(q in in_limits(&DhChain::table1().with_wrist_roll())) {
        prop_assert!(jacobian_error(&DhChain::table1().with_wrist_roll(), &q) <= 1e-4);
    }

    #[test]
    fn clamping_is_idempotent(q in prop::collection::vec(-7.0..7.0f64, 5)) {
        let chain = DhChain::table1();
        let (once, _) = clamp_joints(&chain, &q).unwrap();
        let (twice, moved) = clamp_joints(&chain, once.as_ref()).unwrap();
        prop_assert!(!moved);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn ik_at_the_current_pose_is_a_fixed_point(q in in_limits(&DhChain::table1())) {
        let chain = DhChain::table1();
        let target = Pose::from_transform(&forward_kinematics(&chain, &q).unwrap());
        let sol = inverse_kinematics(&chain, &target, &q, &IkOptions::default().local()).unwrap();
        prop_assert!(sol.iterations <= 2);
    }
}
