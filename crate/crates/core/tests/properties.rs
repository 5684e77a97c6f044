use proptest::prelude::*;

use physmorph::bridge::{allocate_children, idw_weights};
use physmorph::covariance::{anisotropy, build_covariance, RenderGaussian};
use physmorph::fusion::{fuse, norm, pcgrad};
use physmorph::gradcheck::micro_camera;
use physmorph::io::{decode_checkpoint, decode_snapshot, encode_snapshot};
use physmorph::linalg::{soft_clamp, svd3, Mat3, Vec3};
use physmorph::metrics::chamfer;
use physmorph::mpm::ParticleState;
use physmorph::render::render;

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-5.0..5.0f64).prop_map(Vec3::from)
}

fn mat3(r: f64) -> impl Strategy<Value = Mat3> {
    prop::array::uniform9(-r..r).prop_map(|a| Mat3::from_row_slice(&a))
}

fn grads() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn pcgrad_removes_conflict((p, r) in grads()) {
        let (out, projected) = pcgrad(&p, &r).unwrap();
        let d: f64 = out.iter().zip(&p).map(|(a, b)| a * b).sum();
        prop_assert!(d >= -1e-12 * norm(&out).max(1.0) * norm(&p).max(1.0));
        if !projected {
            prop_assert_eq!(out, r);
        }
    }

    #[test]
    fn fuse_is_a_sum_of_unit_vectors((p, r) in grads()) {
        let g = fuse(&p, &r).unwrap();
        prop_assert!(norm(&g) <= 2.0 + 1e-12);
        let (np, nr) = (norm(&p), norm(&r));
        if np > 1e-12 && nr > 1e-12 {
            for i in 0..g.len() {
                prop_assert!((g[i] - (p[i] / np + r[i] / nr)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn idw_weights_partition_unity(d in prop::collection::vec(0.0..100.0f64, 1..64)) {
        let w = idw_weights(&d, 1e-9);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn allocation_respects_budget_and_cap(
        d in prop::collection::vec(0.0..2.0f64, 1..300),
        m in 0usize..6000,
        cap in 1usize..30,
    ) {
        let c = allocate_children(&d, m, cap, 1e-4);
        prop_assert_eq!(c.len(), d.len());
        prop_assert!(c.iter().sum::<usize>() <= m);
        prop_assert!(c.iter().all(|&k| k <= cap));
    }

    #[test]
    fn soft_clamp_stays_in_range_and_is_monotone(a in -10.0..10.0f64, b in -10.0..10.0f64) {
        let (lo, hi) = (0.35, 2.5);
        let (fa, fb) = (soft_clamp(a, lo, hi), soft_clamp(b, lo, hi));
        prop_assert!((lo..=hi).contains(&fa));
        if a <= b {
            prop_assert!(fa <= fb);
        }
    }

    #[test]
    fn svd_reconstructs(m in mat3(3.0)) {
        let s = svd3(&m).unwrap();
        prop_assert!((s.reconstruct() - m).abs().max() <= 1e-10 * (1.0 + m.abs().max()));
    }

    #[test]
    fn covariance_is_symmetric_positive_and_bounded(m in mat3(0.5), scale in 0.01..3.0f64) {
        let f = Mat3::identity() + m;
        prop_assume!(f.determinant().abs() > 1e-3);
        let (c, _) = build_covariance(&f, scale, 0.35, 2.5).unwrap();
        prop_assert_eq!(c, c.transpose());
        let ev = nalgebra::SymmetricEigen::new(c).eigenvalues;
        prop_assert!(ev.min() > 0.0);
        let a = anisotropy(&c);
        prop_assert!((1.0..=2.5 / 0.35 + 1e-9).contains(&a));
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(
        p in prop::collection::vec(vec3(), 1..60),
        q in prop::collection::vec(vec3(), 1..60),
    ) {
        let a = chamfer(&p, &q).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, chamfer(&q, &p).unwrap());
        prop_assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn snapshot_round_trips(x in prop::collection::vec(vec3(), 0..40), v in mat3(2.0)) {
        let n = x.len();
        let mut s = ParticleState::at_rest(x, vec![0.5; n]);
        for p in 0..n {
            s.c[p] = v;
            s.f[p] = Mat3::identity() + v * 0.1;
        }
        let bytes = encode_snapshot(&s);
        prop_assert_eq!(decode_snapshot(&bytes).unwrap(), s);
        if !bytes.is_empty() {
            prop_assert!(decode_snapshot(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_snapshot(&bytes);
        let _ = decode_checkpoint(&bytes);
        let mut tagged = b"PMCK".to_vec();
        tagged.extend(&bytes);
        let _ = decode_checkpoint(&tagged);
    }

    #[test]
    fn rendered_alpha_is_a_coverage(
        gs in prop::collection::vec((prop::array::uniform3(-1.5..1.5f64), mat3(0.5), 0.0..1.0f64), 0..12),
    ) {
        let scene: Vec<RenderGaussian> = gs
            .into_iter()
            .map(|(m, a, o)| RenderGaussian {
                mean: Vec3::from(m),
                cov: a * a.transpose() + Mat3::identity() * 1e-3,
                opacity: o,
                color: Vec3::repeat(0.5),
            })
            .collect();
        let cam = micro_camera(24);
        let out = render(&scene, &cam);
        prop_assert!(out.image.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(out.visibility.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.image.depth.iter().all(|d| d.is_finite() && *d <= cam.far));
    }
}
