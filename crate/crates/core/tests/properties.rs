use graphfuse::gcn::{gcb_forward, max_relative_aggregate, GcbParams};
use graphfuse::graph::{dilated_knn, EdgeSet};
use graphfuse::image::Image;
use graphfuse::loss::total_loss;
use graphfuse::metrics::{cc_fusion, psnr_fusion, ssim_pair};
use graphfuse::net::{fuse, NetworkConfig, NetworkParams};
use graphfuse::optim::lr_at;
use graphfuse::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, h * w).prop_map(move |d| Image::gray(h, w, d).unwrap())
}

fn triple(h: usize, w: usize) -> impl Strategy<Value = (Image, Image, Image)> {
    (image(h, w), image(h, w), image(h, w))
}

fn features(n: usize, dim: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, n * dim).prop_map(move |d| Matrix::from_vec(n, dim, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric((a, b, _) in triple(13, 15)) {
        prop_assert_eq!(ssim_pair(&a, &b).unwrap(), ssim_pair(&b, &a).unwrap());
        prop_assert!((ssim_pair(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cc_ignores_positive_affine_rescaling((f, ir, vis) in triple(8, 8), scale in 0.1f64..3.0, shift in -1.0f64..1.0) {
        let g = Image::gray(8, 8, f.data().iter().map(|v| scale * v + shift).collect()).unwrap();
        prop_assert!((cc_fusion(&f, &ir, &vis).unwrap() - cc_fusion(&g, &ir, &vis).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn psnr_falls_as_noise_grows((ir, vis, noise) in triple(8, 8), small in 0.01f64..0.1, factor in 1.5f64..4.0) {
        let fused = |amp: f64| {
            let d = ir.data().iter().zip(noise.data()).map(|(a, n)| a + amp * (n - 0.5)).collect();
            Image::gray(8, 8, d).unwrap()
        };
        let p1 = psnr_fusion(&fused(small), &ir, &vis).unwrap();
        let p2 = psnr_fusion(&fused(small * factor), &ir, &vis).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn loss_breakdown_is_additive((f, ir, vis) in triple(6, 7), lambda in 0.0f64..4.0) {
        let l = total_loss(&f, &ir, &vis, lambda).unwrap();
        prop_assert!(l.l_ir >= 0.0 && l.l_vi >= 0.0);
        prop_assert_eq!(l.total, l.l_ir + lambda * l.l_vi);
    }

    #[test]
    fn zero_branch_block_is_identity(x in features(12, 4), seed in any::<u64>(), k in 1usize..6, d in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = GcbParams::glorot(4, 4, true, &mut rng);
        prop_assert_eq!(gcb_forward(&x, &p, k, d).unwrap(), x);
    }

    #[test]
    fn aggregate_ignores_neighbor_order(x in features(10, 3), k in 1usize..5, rot in 0usize..5) {
        let edges = dilated_knn(&x, k, 1).unwrap();
        let lists: Vec<Vec<usize>> = (0..10)
            .map(|i| {
                let mut l = edges.neighbors(i).to_vec();
                let r = rot % l.len();
                l.rotate_left(r);
                l.reverse();
                l
            })
            .collect();
        let shuffled = EdgeSet::from_lists(&lists).unwrap();
        prop_assert_eq!(
            max_relative_aggregate(&x, &edges).unwrap(),
            max_relative_aggregate(&x, &shuffled).unwrap()
        );
    }

    #[test]
    fn schedule_is_geometric(epoch in 0usize..200, lr0 in 1e-6f64..1e-2, decay in 0.5f64..1.0) {
        let want = (0..epoch).fold(lr0, |lr, _| lr * decay);
        prop_assert!((lr_at(epoch, lr0, decay) - want).abs() <= 1e-12 * want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fusion_is_deterministic((ir, vis, _) in triple(6, 6), seed in any::<u64>()) {
        let cfg = NetworkConfig { feature_dim: 2, ffn_ratio: 1, ..NetworkConfig::default() };
        let a = NetworkParams::init(&cfg, seed).unwrap();
        let b = NetworkParams::init(&cfg, seed).unwrap();
        prop_assert_eq!(fuse(&ir, &vis, &a, &cfg).unwrap(), fuse(&ir, &vis, &b, &cfg).unwrap());
    }
}
