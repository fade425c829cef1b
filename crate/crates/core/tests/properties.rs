use proptest::prelude::*;

use unif_core::dataio::{generate_frame, load_frame, save_frame, CapsuleBody};
use unif_core::deform::{aps_offset, blend_weights, canonicalize, RigidnessCoeffs, SeamTerm};
use unif_core::evalmetrics::{chamfer_and_f1, p2s};
use unif_core::neural_sdf::{union_min, union_smooth};
use unif_core::skeleton::{rotation, Frame, Pose, Skeleton, Vec3};
use unif_core::surface::{marching_cubes, Aabb, Grid, Mesh};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rigid() -> impl Strategy<Value = Frame> {
    (vec3(1.0), 0.0..std::f64::consts::PI, vec3(1.0)).prop_filter_map("zero axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| Frame::new(rotation(&axis.normalize(), angle), t))
    })
}

fn tetra() -> Mesh {
    Mesh {
        vertices: vec![Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.0, 0.0, 0.1)],
        triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        part_ids: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_union_lies_between_min_and_max(d in prop::collection::vec(-2.0..2.0f64, 1..10), beta in 1.0..500.0f64) {
        let (m, arg) = union_min(&d).unwrap();
        prop_assert_eq!(d[arg], m);
        let u = union_smooth(&d, beta).unwrap();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m <= u && u <= max);
    }

    #[test]
    fn blend_weights_are_complementary(r1 in 1e-6..1e6f64, r2 in 1e-6..1e6f64) {
        let (w1, w2) = blend_weights(r1, r2).unwrap();
        prop_assert!((0.0..=1.0).contains(&w1) && (0.0..=1.0).contains(&w2));
        prop_assert_eq!(w1 + w2, 1.0);
    }

    #[test]
    fn frame_roundtrip(f in rigid(), x in vec3(2.0)) {
        prop_assert!((f.from_local(&f.to_local(&x)) - x).norm() < 1e-12);
    }

    #[test]
    fn seam_center_is_fixed(axis in vec3(1.0), angle in -3.0..3.0f64, w in 0.0..1.0f64, c in vec3(0.5)) {
        prop_assume!(axis.norm() > 1e-3);
        let t = SeamTerm { axis: axis.normalize(), angle, center: c, weight: w };
        prop_assert!(aps_offset(&c, &[t]).norm() < 1e-12);
    }

    #[test]
    fn canonicalization_ignores_global_rigid_motion(g in rigid(), theta in 0.0..1.5f64, x in vec3(0.4), n in 0usize..2) {
        let s = Skeleton::preset("arm2").unwrap();
        let elbow = s.joints()[1].rest_pos;
        let r = rotation(&Vec3::z(), theta);
        let pose = Pose { motions: vec![Frame::identity(), Frame::new(r, elbow - r * elbow)] };
        let mut rc = RigidnessCoeffs::new(2);
        rc.alpha[1] = 1.5;
        rc.beta[2] = 0.2;
        let rest = Pose::identity(2);
        let a = canonicalize(&x, &s, &rest, &pose, &rc, n).unwrap();
        let b = canonicalize(&g.from_local(&x), &s, &rest, &pose.transformed(&g), &rc, n).unwrap();
        prop_assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn metrics_ignore_common_rigid_motion(g in rigid(), pts in prop::collection::vec(vec3(0.15), 5..40)) {
        let mesh = tetra();
        let moved = Mesh { vertices: mesh.vertices.iter().map(|v| g.from_local(v)).collect(), ..mesh.clone() };
        let moved_pts: Vec<Vec3> = pts.iter().map(|p| g.from_local(p)).collect();
        prop_assert!((p2s(&pts, &mesh).unwrap() - p2s(&moved_pts, &moved).unwrap()).abs() < 1e-9);
        let a = chamfer_and_f1(&pts, &mesh, 1.0, 200, 4).unwrap();
        let b = chamfer_and_f1(&moved_pts, &moved, 1.0, 200, 4).unwrap();
        prop_assert!((a.chamfer_mm - b.chamfer_mm).abs() < 1e-9);
        prop_assert_eq!(a.recall_pct, b.recall_pct);
    }

    #[test]
    fn marching_cubes_stays_within_a_cell_of_spheres(c in vec3(0.2), r in 0.2..0.6f64, res in 16usize..40) {
        let g = Grid::from_fn(Aabb::cube(Vec3::zeros(), 1.0).unwrap(), res, |x| (x - c).norm() - r).unwrap();
        let m = marching_cubes(&g, 0.0).unwrap();
        let h = g.cell_diagonal();
        prop_assert!(m.vertices.iter().all(|v| ((v - c).norm() - r).abs() <= h));
        prop_assert_eq!(m.euler_characteristic(), 2);
        prop_assert!(m.is_closed());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn frame_files_roundtrip_bit_exactly(seed in 0u64..1000, theta in 0.0..1.5f64) {
        let s = Skeleton::preset("arm2").unwrap();
        let elbow = s.joints()[1].rest_pos;
        let r = rotation(&Vec3::z(), theta);
        let pose = Pose { motions: vec![Frame::identity(), Frame::new(r, elbow - r * elbow)] };
        let f = generate_frame(&s, &CapsuleBody::uniform(2, 0.04).unwrap(), &pose, 50, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        save_frame(&f, &path).unwrap();
        prop_assert_eq!(load_frame(&path).unwrap(), f);
    }
}
