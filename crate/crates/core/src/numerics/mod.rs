//! Dense tensors, attention and normalization primitives.
//!
//! Everything here is a pure function of its inputs and runs in `f64`;
//! gradient checks elsewhere in the crate depend on both properties.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    attention, attention_probs, layer_norm, linear, matmul, mlp, sigmoid, sigmoid_scalar,
    softmax, AttnMask, LAYER_NORM_EPS,
};
pub(crate) use ops::{matmul_nt, matmul_tn, matmul_unchecked, row_stats, softmax_rows_inplace};
pub use rng::Rng;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = Rng::new(3);
        let a = random(&[3, 4], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);

        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let z = matmul(&x, &y).unwrap();
        assert_eq!(z.shape(), &[2, 1]);
        assert_eq!(z.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).max_abs_diff(&fast) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(crate::error::Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);

        let s = softmax(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let rounded: Vec<f64> = s
            .data()
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect();
        assert_eq!(rounded, vec![0.0900, 0.2447, 0.6652]);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(sigmoid_scalar(1000.0), 1.0);
        assert_eq!(sigmoid_scalar(-1000.0), 0.0);
        assert!((sigmoid_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(((sigmoid_scalar(1.0) * 1e7).round() / 1e7 - 0.7310586).abs() < 1e-12);
    }

    fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let c = q.cols() as f64;
        let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(k.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / c.sqrt()
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for (o, vv) in out.row_mut(i).iter_mut().zip(v.row(j)) {
                    *o += e[j] / z * vv;
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_key_copies_value() {
        let mut rng = Rng::new(5);
        let q = random(&[4, 6], &mut rng);
        let k = random(&[1, 6], &mut rng);
        let v = random(&[1, 6], &mut rng);
        let out = attention(&q, &k, &v, None).unwrap();
        for i in 0..4 {
            for (a, b) in out.row(i).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_matches_two_step_oracle() {
        let mut rng = Rng::new(7);
        let q = random(&[3, 5], &mut rng);
        let k = random(&[4, 5], &mut rng);
        let v = random(&[4, 5], &mut rng);
        let out = attention(&q, &k, &v, None).unwrap();
        assert!(out.max_abs_diff(&oracle_attention(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn attention_empty_mask_row_falls_back_to_all_keys() {
        let mut rng = Rng::new(8);
        let q = random(&[2, 4], &mut rng);
        let k = random(&[3, 4], &mut rng);
        let v = random(&[3, 4], &mut rng);
        let mask = AttnMask::new(2, 3, vec![false, false, false, true, false, false]).unwrap();
        let masked = attention(&q, &k, &v, Some(&mask)).unwrap();
        let free = attention(&q, &k, &v, None).unwrap();
        assert_eq!(masked.row(0), free.row(0));
        // Second query may only see key 0.
        for (a, b) in masked.row(1).iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rejects_mismatched_dims() {
        let q = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[3, 5]);
        let v = Tensor::zeros(&[3, 5]);
        assert!(attention(&q, &k, &v, None).is_err());
        let k = Tensor::zeros(&[3, 4]);
        let v = Tensor::zeros(&[2, 4]);
        assert!(attention(&q, &k, &v, None).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap(), &g, &b).unwrap();
        // var = 1, so x̂ = ±1/sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);

        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let gain = Tensor::full(&[3], 2.0);
        let y = layer_norm(&Tensor::full(&[2, 3], 4.0), &gain, &bias).unwrap();
        assert_eq!(y.row(0), bias.data());
        assert_eq!(y.row(1), bias.data());
    }

    #[test]
    fn layer_norm_statistics_on_random_row() {
        let mut rng = Rng::new(9);
        let x = random(&[1, 64], &mut rng).scale(3.0);
        let y = layer_norm(&x, &Tensor::full(&[64], 1.0), &Tensor::zeros(&[64])).unwrap();
        let mean = y.sum() / 64.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mlp_cases() {
        let mut rng = Rng::new(10);
        let x = random(&[3, 4], &mut rng);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let y = mlp(&x, &[(&w, &b)]).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), b.data());
        }

        let w1 = random(&[4, 5], &mut rng);
        let b1 = random(&[5], &mut rng);
        let single = mlp(&x, &[(&w1, &b1)]).unwrap();
        assert_eq!(single, linear(&x, &w1, &b1).unwrap());

        let w2 = random(&[5, 2], &mut rng);
        let b2 = random(&[2], &mut rng);
        let y = mlp(&x, &[(&w1, &b1), (&w2, &b2)]).unwrap();
        // hand-composed
        let mut expect = Tensor::zeros(&[3, 2]);
        for i in 0..3 {
            let mut h = [0.0; 5];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = b1.data()[j];
                for p in 0..4 {
                    s += x.at(i, p) * w1.at(p, j);
                }
                *hj = s.max(0.0);
            }
            for j in 0..2 {
                let mut s = b2.data()[j];
                for (p, hp) in h.iter().enumerate() {
                    s += hp * w2.at(p, j);
                }
                expect.row_mut(i)[j] = s;
            }
        }
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_permutation_equivariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 2..12),
            seed in any::<u64>(),
        ) {
            let n = xs.len();
            let mut perm: Vec<usize> = (0..n).collect();
            Rng::new(seed).shuffle(&mut perm);
            let x = Tensor::new(vec![n], xs.clone()).unwrap();
            let px = Tensor::new(vec![n], perm.iter().map(|&i| xs[i]).collect()).unwrap();
            let s = softmax(&x, 0).unwrap();
            let ps = softmax(&px, 0).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                // equal up to the reordered normalizing sum
                prop_assert!((ps.data()[k] - s.data()[i]).abs() <= 1e-15 * s.data()[i].max(1e-300) + 1e-300);
            }
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uniform_mask_equals_no_mask(seed in any::<u64>(), nq in 1usize..5, nk in 1usize..6) {
            let mut rng = Rng::new(seed);
            let q = random(&[nq, 3], &mut rng);
            let k = random(&[nk, 3], &mut rng);
            let v = random(&[nk, 3], &mut rng);
            let a = attention(&q, &k, &v, Some(&AttnMask::all(nq, nk))).unwrap();
            let b = attention(&q, &k, &v, None).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.all_finite());
            // deterministic
            prop_assert_eq!(a, attention(&q, &k, &v, None).unwrap());
        }

        #[test]
        fn sigmoid_stays_finite(x in -1e6f64..1e6) {
            let s = sigmoid_scalar(x);
            prop_assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
    }
}
