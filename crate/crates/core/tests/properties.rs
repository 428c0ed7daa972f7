use proptest::prelude::*;

use semgen_core::dit::{build_mask, build_sequence, AttentionLayout, LayoutMode, TokenKind};
use semgen_core::eval::{drift, Metric};
use semgen_core::flow::{cfm_target, forward_interpolate};
use semgen_core::grid::GridDims;
use semgen_core::numerics::Tensor;
use semgen_core::semantics::kl_diag_gaussian;
use semgen_core::synthdata::Video;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(m in -5.0f64..5.0, lv in -6.0f64..4.0) {
        let kl = kl_diag_gaussian(&Tensor::from_rows(&[&[m]]).unwrap(), &Tensor::from_rows(&[&[lv]]).unwrap()).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl > 0.0 || (m == 0.0 && lv == 0.0));
    }

    #[test]
    fn path_hits_endpoints_and_moves_along_target(
        z in prop::collection::vec(-3.0f64..3.0, 6),
        e in prop::collection::vec(-3.0f64..3.0, 6),
        t in 0.0f64..1.0,
    ) {
        let z0 = Tensor::matrix(2, 3, z).unwrap();
        let eps = Tensor::matrix(2, 3, e).unwrap();
        prop_assert!(forward_interpolate(&z0, &eps, 0.0).unwrap().max_abs_diff(&z0) == 0.0);
        prop_assert!(forward_interpolate(&z0, &eps, 1.0).unwrap().max_abs_diff(&eps) == 0.0);
        let zt = forward_interpolate(&z0, &eps, t).unwrap();
        let along = z0.zip_map(&cfm_target(&z0, &eps).unwrap(), |a, v| a + t * v).unwrap();
        prop_assert!(zt.max_abs_diff(&along) < 1e-12);
    }

    #[test]
    fn swin_mask_is_symmetric_and_confined(t in 1usize..24, half in 1usize..5, layer in 0usize..4, sem in any::<bool>()) {
        let layout = AttentionLayout { mode: LayoutMode::SwinInterleaved, window: 2 * half };
        let semantic = (sem && t % 2 == 0).then(|| GridDims::new(t / 2, 1, 1));
        let seq = build_sequence(GridDims::new(t, 1, 1), TokenKind::Latent, semantic, 2.0, true).unwrap();
        let m = build_mask(&seq, &layout, layer).unwrap();
        let off = seq.offset(TokenKind::Latent);
        for i in 0..seq.len() {
            prop_assert!(m.get(i, i));
            for j in 0..seq.len() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                if i >= off && j >= off && m.get(i, j) {
                    prop_assert!(i.abs_diff(j) < layout.window);
                }
            }
        }
    }

    #[test]
    fn drift_is_nonnegative_and_reversal_symmetric(
        frames in 7usize..30,
        seed in prop::collection::vec(0.0f32..1.0, 3 * 4 * 3),
    ) {
        let data: Vec<f32> = (0..frames).flat_map(|f| seed.iter().map(move |x| (x + 0.01 * f as f32).min(1.0))).collect();
        let v = Video::new(frames, 3, 4, 3, 8.0, data).unwrap();
        for m in Metric::ALL {
            let a = drift(&v, m, 0.15).unwrap().delta;
            let b = drift(&v.reversed(), m, 0.15).unwrap().delta;
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
