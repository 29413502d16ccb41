use add_core::spectral::{dft2_per_channel, naive_dft2};
use add_core::Tensor;
use proptest::prelude::*;

fn tensor_strategy(max_c: usize, max_side: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_c, 1..=max_side, 1..=max_side).prop_flat_map(|(c, w, h)| {
        proptest::collection::vec(-1.0f64..1.0, c * w * h).prop_map(move |v| Tensor::feature(c, w, h, v).unwrap())
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fast_transform_matches_naive(a in tensor_strategy(2, 16)) {
        let fast = dft2_per_channel(&a).unwrap();
        let slow = naive_dft2(&a).unwrap();
        let (c, w, h) = fast.dims();
        for ch in 0..c {
            for u in 0..w {
                for v in 0..h {
                    let d = (fast.get(ch, u, v) - slow.get(ch, u, v)).norm();
                    prop_assert!(d < 1e-6, "({ch},{u},{v}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn parseval(a in tensor_strategy(3, 16)) {
        let (_, w, h) = a.dims3().unwrap();
        let f = dft2_per_channel(&a).unwrap();
        let spatial: f64 = a.data().iter().map(|x| x * x).sum::<f64>() * (w * h) as f64;
        prop_assert!(rel_err(f.energy(), spatial) < 1e-5 || spatial < 1e-300);
    }

    #[test]
    fn conjugate_symmetry(a in tensor_strategy(3, 16)) {
        let f = dft2_per_channel(&a).unwrap();
        let (c, w, h) = f.dims();
        let scale = f.energy().sqrt().max(1e-12);
        for ch in 0..c {
            for u in 0..w {
                for v in 0..h {
                    let z = f.get(ch, u, v);
                    let m = f.get(ch, (w - u) % w, (h - v) % h).conj();
                    prop_assert!((z - m).norm() <= 1e-5 * scale, "({ch},{u},{v})");
                }
            }
        }
    }

    #[test]
    fn linearity((a, b) in tensor_strategy(2, 8).prop_flat_map(|a| {
        let n = a.len();
        let shape = a.shape().to_vec();
        (Just(a), proptest::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap()))
    })) {
        let sum = a.zip_map(&b, |x, y| x + y).unwrap();
        let fs = dft2_per_channel(&sum).unwrap();
        let fa = dft2_per_channel(&a).unwrap();
        let fb = dft2_per_channel(&b).unwrap();
        let (c, w, h) = fs.dims();
        let scale = fs.energy().sqrt().max(1e-12);
        for ch in 0..c {
            for u in 0..w {
                for v in 0..h {
                    let d = (fs.get(ch, u, v) - fa.get(ch, u, v) - fb.get(ch, u, v)).norm();
                    prop_assert!(d <= 1e-5 * scale);
                }
            }
        }
    }
}
