use proptest::prelude::*;
use sigshot::attention::{self, CsaParams};
use sigshot::autodiff::softmin3;
use sigshot::dtw::{self, CostMatrix, DtwMode};
use sigshot::encoder::Representation;
use sigshot::model;
use sigshot::sig::{self, ImageKind, SignalImage};
use sigshot::skeleton::{self, default_ntu_topology, SkeletonSequence};
use sigshot::Mat;

fn mat(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

fn sized_mat(max: usize, lo: f64, hi: f64) -> impl Strategy<Value = Mat> {
    (1..=max, 1..=max).prop_flat_map(move |(r, c)| mat(r, c, lo, hi))
}

fn action() -> impl Strategy<Value = SkeletonSequence> {
    (1u32..60, any::<u64>(), 2usize..48, 0.3f64..3.0).prop_map(|(class, seed, frames, speed)| {
        let spec = skeleton::random_class_spec(class, seed);
        skeleton::synth_action(&spec, frames, speed, 0.01, seed.wrapping_add(1)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntu_text_round_trips(frames in 2usize..12, seed in any::<u64>()) {
        let coords: Vec<[f64; 3]> = (0..frames * 25)
            .map(|k| {
                let x = (seed.wrapping_mul(k as u64 + 1) % 20_000) as f64 / 1000.0 - 10.0;
                [x, -x * 0.37, x * 1.91 + 0.5]
            })
            .collect();
        let seq = SkeletonSequence::new(25, coords).unwrap();
        let back = skeleton::parse_ntu_skeleton(&skeleton::write_ntu_skeleton(&seq)).unwrap();
        prop_assert_eq!(back.coords(), seq.coords());
    }

    #[test]
    fn orientation_ignores_translation_and_scale(
        seq in action(),
        t in prop::array::uniform3(-20.0f64..20.0),
        s in 0.01f64..100.0,
    ) {
        let topo = default_ntu_topology();
        let base = sig::orientation_image(&seq, &topo).unwrap();
        let moved = seq.map_points(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).unwrap();
        let scaled = seq.map_points(|p| p.map(|c| c * s)).unwrap();
        prop_assert_eq!(&sig::orientation_image(&moved, &topo).unwrap(), &base);
        prop_assert_eq!(&sig::orientation_image(&scaled, &topo).unwrap(), &base);
    }

    #[test]
    fn position_ignores_translation(seq in action(), t in prop::array::uniform3(-20.0f64..20.0)) {
        let moved = seq.map_points(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).unwrap();
        prop_assert_eq!(sig::position_image(&moved), sig::position_image(&seq));
    }

    #[test]
    fn direction_cosines_square_to_one(v in prop::array::uniform3(-1e3f64..1e3)) {
        prop_assume!(v.iter().map(|c| c * c).sum::<f64>().sqrt() >= 1e-6);
        let a = sig::bone_angles(v).unwrap();
        let s: f64 = a.iter().map(|t| t.cos().powi(2)).sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(a.iter().all(|t| (0.0..=std::f64::consts::FRAC_PI_2).contains(t)));
    }

    #[test]
    fn resize_to_own_size_is_identity(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let px: Vec<u8> = (0..h * w * 3).map(|k| (seed.wrapping_mul(k as u64 * 2 + 1) >> 7) as u8).collect();
        let img = SignalImage::new(h, w, ImageKind::Position, px).unwrap();
        prop_assert_eq!(sig::resize_bilinear(&img, h, w).unwrap(), img);
    }

    #[test]
    fn softmin_stays_within_log3_of_min(
        a in -50.0f64..50.0, b in -50.0f64..50.0, c in -50.0f64..50.0, g in 1e-3f64..10.0,
    ) {
        let m = a.min(b).min(c);
        let s = softmin3(a, b, c, g);
        prop_assert!(s <= m + 1e-12);
        prop_assert!(s >= m - g * 3f64.ln() - 1e-12);
    }

    #[test]
    fn hard_dtw_matches_enumeration(e in sized_mat(5, 0.0, 4.0)) {
        let c = CostMatrix::new(e).unwrap();
        let hard = dtw::dtw(&c, 1, DtwMode::Hard).unwrap();
        prop_assert!((hard.distance - dtw::brute_force_dtw(&c).unwrap()).abs() <= 1e-12);
        let path = hard.path.unwrap();
        prop_assert!(dtw::validate_path(&path, c.rows(), c.cols(), 1).is_ok());
        let along: f64 = path.iter().map(|&(i, j)| c.matrix()[(i, j)]).sum();
        prop_assert!((along - hard.distance).abs() <= 1e-12);
    }

    #[test]
    fn soft_dtw_never_exceeds_hard(e in sized_mat(7, 0.0, 1.0), g in 1e-3f64..2.0) {
        let c = CostMatrix::new(e).unwrap();
        let hard = dtw::dtw(&c, 1, DtwMode::Hard).unwrap().distance;
        let soft = dtw::dtw(&c, 1, DtwMode::Soft { gamma: g }).unwrap().distance;
        prop_assert!(soft <= hard + 1e-12);
    }

    #[test]
    fn frobenius_is_a_metric(a in mat(4, 3, -5.0, 5.0), b in mat(4, 3, -5.0, 5.0), c in mat(4, 3, -5.0, 5.0)) {
        let d = |x: &Mat, y: &Mat| attention::frobenius_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions(
        (q, p) in (1usize..12, 1usize..6).prop_flat_map(|(m, d)| (mat(m, d, -4.0, 4.0), mat(m, d, -4.0, 4.0))),
        seed in any::<u64>(),
        tied in any::<bool>(),
    ) {
        let params = CsaParams::init(seed, q.cols(), tied, 1.0);
        let out = attention::cross_attend(&Representation::new(q), &Representation::new(p), &params).unwrap();
        for w in [&out.query_weights, &out.support_weights] {
            for r in 0..w.rows() {
                prop_assert!(w.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn scores_rank_inversely_to_distance(dis in prop::collection::vec(0.0f64..50.0, 1..8)) {
        let s = model::scores_from_distances(&dis);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..dis.len() {
            for j in 0..dis.len() {
                if dis[i] < dis[j] {
                    prop_assert!(s[i] >= s[j]);
                }
            }
        }
    }

    #[test]
    fn late_fusion_without_orientation_is_the_position_stream(
        pj in prop::collection::vec(0.0f64..1.0, 1..8),
        noise in any::<u64>(),
    ) {
        let pa: Vec<f64> = (0..pj.len()).map(|k| ((noise >> (k % 60)) & 0xff) as f64 / 255.0).collect();
        let (fused, class) = model::late_fuse(&pj, &pa, 0.0).unwrap();
        prop_assert_eq!(&fused, &pj);
        prop_assert_eq!(class, model::argmax(&pj));
    }
}
