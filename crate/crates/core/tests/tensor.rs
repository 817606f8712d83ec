use evfuse::tensor::{conv2d_raw, deformable_conv2d_raw, softmax_axis, ConvSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, len in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([rows, len], scale, &mut rng);
        let y = softmax_axis(&x, 1).unwrap();
        for r in y.data().chunks(len) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_are_pure(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn([2, 3, k, k], 1.0, &mut rng);
        let spec = ConvSpec::new(stride, k / 2);
        let a = conv2d_raw(&x, &w, None, spec).unwrap();
        prop_assert_eq!(&a, &conv2d_raw(&x, &w, None, spec).unwrap());
        let (n, _, oh, ow) = a.dims4().unwrap();
        let off = Tensor::randn([n, 2 * k * k, oh, ow], 1.5, &mut rng);
        let d = deformable_conv2d_raw(&x, &off, &w, None, spec).unwrap();
        prop_assert_eq!(&d, &deformable_conv2d_raw(&x, &off, &w, None, spec).unwrap());
        prop_assert_eq!(x, Tensor::randn([2, 3, 7, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    }
}
