use echoqa_nn::ops::{self, Conv2dParams};
use echoqa_nn::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn conv_output_size(h in 3usize..20, w in 3usize..20, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let x = Tensor::<f64>::full([1, h, w], 0.5);
        let p = Conv2dParams { kernel: Tensor::full([2, 1, k, k], 1.0), bias: Tensor::zeros([2]) };
        let y = ops::conv2d(&x, &p, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), &[2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    #[test]
    fn activation_ranges(values in prop::collection::vec(-80.0f64..80.0, 1..64)) {
        let x = Tensor::new([values.len()], values.clone()).unwrap();
        let s = ops::sigmoid(&x);
        let r = ops::relu(&x);
        for (i, &v) in values.iter().enumerate() {
            prop_assert!(s.data()[i] > 0.0 && s.data()[i] < 1.0);
            prop_assert!(r.data()[i] >= 0.0);
            if v > 0.0 { prop_assert_eq!(r.data()[i], v); }
            let sym = ops::sigmoid_scalar(v) + ops::sigmoid_scalar(-v);
            prop_assert!((sym - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn conv_is_deterministic(seed in any::<u64>()) {
        let mut rng = echoqa_nn::rng::Rng::new(seed);
        let x = Tensor::<f32>::from_fn([2, 2, 7, 7], |_| rng.uniform() as f32);
        let p = Conv2dParams {
            kernel: Tensor::from_fn([3, 2, 3, 3], |_| rng.range(-1.0, 1.0) as f32),
            bias: Tensor::from_fn([3], |_| rng.range(-1.0, 1.0) as f32),
        };
        let a = ops::conv2d(&x, &p, 1, 1).unwrap();
        let b = ops::conv2d(&x, &p, 1, 1).unwrap();
        prop_assert_eq!(a, b);
    }
}
