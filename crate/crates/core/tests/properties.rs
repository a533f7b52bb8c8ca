use std::path::Path;

use fann_core::dataio::{decode_fant, encode_fant, resize_bilinear};
use fann_core::evaluator::{cmc, mean_average_precision, DistanceMatrix};
use fann_core::layers::{conv_forward, deconv_forward, l2_normalize_forward, LayerSpec};
use fann_core::losses::{
    local_regression_grad, local_regression_loss, symmetric_triplet_grad, symmetric_triplet_loss, AdaptiveWeightState,
    GaussianKernel, SignMode, TripletFeatures,
};
use fann_core::Tensor;
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Option<Tensor> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| Tensor::vector(v.into_iter().map(|x| x / n).collect()).unwrap())
}

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_vectors_have_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let (y, _) = l2_normalize_forward(&Tensor::vector(v).unwrap()).unwrap();
        prop_assert!((y.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_stay_complementary(
        u in 0.0f64..1.0,
        steps in proptest::collection::vec((0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0), 0..50),
        literal in any::<bool>(),
    ) {
        let mode = if literal { SignMode::Literal } else { SignMode::Textual };
        let mut w = AdaptiveWeightState::new(u, 1.0 - u, 0.05, mode).unwrap();
        for (d12, d13, d23) in steps {
            w.update(d12, d13, d23, 0.1);
            prop_assert_eq!(w.u() + w.v(), 1.0);
            prop_assert!(w.u() >= 0.0 && w.v() >= 0.0);
        }
    }

    #[test]
    fn triplet_loss_is_a_hinge_with_translation_free_gradient(
        a in vec_of(8), p in vec_of(8), n in vec_of(8), u in 0.0f64..1.0,
    ) {
        let (Some(a), Some(p), Some(n)) = (unit(a), unit(p), unit(n)) else { return Ok(()) };
        let t = TripletFeatures::new(a, p, n).unwrap();
        let loss = symmetric_triplet_loss(&t, u, 1.0 - u, 0.1).unwrap();
        prop_assert!(loss >= 0.0);
        let g = symmetric_triplet_grad(&t, u, 1.0 - u, 0.1).unwrap();
        // squared distances only see differences, so the three gradients cancel
        for k in 0..8 {
            let s = g[0].data()[k] + g[1].data()[k] + g[2].data()[k];
            prop_assert!(s.abs() < 1e-12, "component {} sums to {}", k, s);
        }
        if loss == 0.0 {
            prop_assert!(g.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn regression_loss_is_nonnegative_and_gradient_vanishes_at_target(
        recon in vec_of(2 * 5 * 4), mask in proptest::collection::vec(any::<bool>(), 2 * 5 * 4),
        sigma in 0.01f64..3.0,
    ) {
        let k = GaussianKernel::new(sigma, 3.0, true).unwrap();
        let r = Tensor::from_vec(&[2, 5, 4], recon).unwrap();
        let m = Tensor::from_vec(&[2, 5, 4], mask.into_iter().map(f64::from).map(|b| b.min(1.0)).collect()).unwrap();
        prop_assert!(local_regression_loss(&r, &m, &k).unwrap() >= 0.0);
        prop_assert_eq!(local_regression_loss(&m, &m, &k).unwrap(), 0.0);
        prop_assert!(local_regression_grad(&m, &m, &k).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conv_and_deconv_are_adjoint(
        cin in 1usize..3, cout in 1usize..3, k in 1usize..4, s in 1usize..3, pad in 0usize..2,
        h in 4usize..9, w in 4usize..9, seed in any::<u64>(),
    ) {
        prop_assume!(pad < k);
        let conv = LayerSpec::conv(cin, cout, (k, k), (s, s), (pad, pad));
        let Ok(out) = conv.output_dims(&[cin, h, w]) else { return Ok(()) };
        let deconv = LayerSpec::deconv(cout, cin, (k, k), (s, s), (pad, pad));
        prop_assume!(deconv.output_dims(&out).ok() == Some(vec![cin, h, w]));
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let x = Tensor::from_fn(&[cin, h, w], |_| next()).unwrap();
        let y = Tensor::from_fn(&out, |_| next()).unwrap();
        let weights = Tensor::from_fn(&[cout, cin, k, k], |_| next()).unwrap();
        let zero_out = Tensor::zeros(&[cout]).unwrap();
        let zero_in = Tensor::zeros(&[cin]).unwrap();
        let lhs = conv_forward(&x, &weights, &zero_out, &conv).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&deconv_forward(&y, &weights, &zero_in, &deconv).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn cmc_is_monotone_and_map_bounded(
        probes in 1usize..8, gallery in 2usize..20, seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let gallery_ids: Vec<u32> = (0..gallery).map(|j| (j % 3) as u32).collect();
        let probe_ids: Vec<u32> = (0..probes).map(|_| (next() % 3) as u32 % gallery.min(3) as u32).collect();
        let data = (0..probes * gallery).map(|_| (next() % 100) as f64 / 10.0).collect();
        let dist = DistanceMatrix { rows: probes, cols: gallery, data };
        let curve = cmc(&dist, &probe_ids, &gallery_ids, gallery).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
        let map = mean_average_precision(&dist, &probe_ids, &gallery_ids).unwrap();
        prop_assert!(map > 0.0 && map <= 1.0);
        prop_assert!(map >= curve[0] / gallery as f64);
    }

    #[test]
    fn fant_round_trips(dims in proptest::collection::vec(1usize..5, 1..4), values in vec_of(64)) {
        let t = Tensor::from_fn(&dims, |i| values[i % values.len()] * 1e5).unwrap();
        let bytes = encode_fant(&t);
        prop_assert_eq!(bytes.len(), 10 + 8 * dims.len() + 8 * t.len());
        prop_assert_eq!(decode_fant(&bytes, Path::new("p")).unwrap(), t);
    }

    #[test]
    fn resize_to_same_size_is_identity(h in 1usize..10, w in 1usize..10, values in vec_of(300)) {
        let t = Tensor::from_fn(&[3, h, w], |i| values[i] + 1.0).unwrap();
        prop_assert_eq!(resize_bilinear(&t, h, w).unwrap(), t);
    }
}
