//! Property tests for the invariants of the data, geometry, loss and
//! matching modules.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stereo_consistency::baseline::wta_sad_match;
use stereo_consistency::data::{apply_style, generate_corpus_sample, DomainStyle, SceneParams};
use stereo_consistency::geometry::{
    collect_positive_pairs, matching_mask, reprojection_error, MatchMask, PositivePair, PositivePairSet,
};
use stereo_consistency::grid::Grid;
use stereo_consistency::scf::{
    pixel_infonce, scf_evaluate, select_queue_keys, NegativeQueue, ScfBatch, ScfConfig,
};
use stereo_consistency::ssw::{covariance, instance_normalize, select_mask, ssw_loss, variance_matrix, ChannelMask};
use stereo_consistency::tensor::Tensor;

fn sample(seed: u64, index: u64) -> stereo_consistency::data::StereoSample {
    generate_corpus_sample(seed, index, 32, 48, 16, &SceneParams::default()).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn style_strategy() -> impl Strategy<Value = DomainStyle> {
    (0.5..2.5f64, -0.2..0.2f64, 0.5..1.5f64, 0.0..0.05f64, -1.0..1.0f64, any::<bool>()).prop_map(
        |(gamma, brightness_offset, contrast_scale, noise_sigma, hue_rotation, asymmetric)| DomainStyle {
            gamma,
            brightness_offset,
            contrast_scale,
            noise_sigma,
            hue_rotation,
            asymmetric,
            ..DomainStyle::identity()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn generation_is_a_pure_function_of_seed(seed in 0u64..1000, index in 0u64..1000) {
        prop_assert_eq!(sample(seed, index), sample(seed, index));
    }

    #[test]
    fn visible_left_pixels_match_their_right_pixel(seed in 0u64..1000) {
        let s = sample(seed, 0);
        for v in 0..s.height() {
            for u in 0..s.width() {
                if !*s.occlusion_left.get(u, v) {
                    continue;
                }
                let ur = u as i64 - s.disparity_left.get(u, v).round() as i64;
                prop_assert!(ur >= 0);
                prop_assert_eq!(s.left.pixel(u, v), s.right.pixel(ur as usize, v));
            }
        }
    }

    #[test]
    fn styles_never_touch_geometry(seed in 0u64..1000, style in style_strategy(), noise_seed in any::<u64>()) {
        let s = sample(seed, 1);
        let t = apply_style(&s, &style, noise_seed).unwrap();
        prop_assert_eq!(&t.disparity_left, &s.disparity_left);
        prop_assert_eq!(&t.disparity_right, &s.disparity_right);
        prop_assert_eq!(&t.occlusion_left, &s.occlusion_left);
    }

    #[test]
    fn mask_limits(seed in 0u64..500) {
        let s = sample(seed, 2);
        let field = reprojection_error(&s.disparity_left, s.disparity_right.as_ref().unwrap()).unwrap();
        prop_assert_eq!(matching_mask(&field, 1e12).unwrap().m, field.valid.clone());
        let tight = matching_mask(&field, 1e-12).unwrap().m;
        for v in 0..s.height() {
            for u in 0..s.width() {
                let exact = *field.valid.get(u, v) && *field.r.get(u, v) == 0.0;
                prop_assert_eq!(*tight.get(u, v), exact);
            }
        }
    }

    #[test]
    fn positive_pairs_do_not_depend_on_traversal(seed in 0u64..500, stride_pow in 0u32..3) {
        let stride = 1usize << stride_pow;
        let s = sample(seed, 3);
        let field = reprojection_error(&s.disparity_left, s.disparity_right.as_ref().unwrap()).unwrap();
        let mask = matching_mask(&field, 3.0).unwrap();
        let got = collect_positive_pairs(&s.disparity_left, &mask, stride).unwrap();
        // Oracle: visit cells in reverse order with the same per-cell rule.
        let (fw, fh) = (s.width() / stride, s.height() / stride);
        let mut expected = std::collections::BTreeSet::new();
        for qv in (0..fh).rev() {
            for qu in (0..fw).rev() {
                let (cu, cv) = (qu * stride + stride / 2, qv * stride + stride / 2);
                if !*mask.m.get(cu, cv) {
                    continue;
                }
                let offset = s.disparity_left.get(cu, cv) / stride as f64;
                let ku = qu as f64 - offset.round();
                if (offset.round() - offset).abs() <= 0.5 && ku >= 0.0 {
                    expected.insert(PositivePair { query: (qu, qv), key: (ku as usize, qv) });
                }
            }
        }
        let got: std::collections::BTreeSet<_> = got.pairs.into_iter().collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn infonce_is_non_negative_and_monotone(seed in any::<u64>(), boost in 0.05..0.5f64) {
        let t = random_tensor(&[7, 6], seed);
        let rows: Vec<Vec<f64>> = t.data().chunks(6).map(|r| r.to_vec()).collect();
        let (q, p, negs) = (&rows[0], &rows[1], &rows[2..]);
        let base = pixel_infonce(q, p, negs, 0.07, false).unwrap();
        prop_assert!(base >= 0.0);
        // Moving the positive toward the query raises q·p and lowers the loss.
        let p2: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + boost * b).collect();
        let moved = pixel_infonce(q, &p2, negs, 0.07, false).unwrap();
        prop_assert!(moved < base || base == 0.0);
    }

    #[test]
    fn scf_loss_is_orthogonally_invariant(seed in any::<u64>()) {
        let c = 8;
        let left = random_tensor(&[c, 4, 4], seed);
        let right = random_tensor(&[c, 4, 4], seed ^ 1);
        let pairs = PositivePairSet {
            pairs: (0..4).map(|i| PositivePair { query: (i, i), key: (3 - i, i) }).collect(),
            stride: 1,
        };
        let cfg = ScfConfig { negatives: 5, window: 3, ..ScfConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = ScfBatch::sample(&pairs, 4, 4, &cfg, &mut rng);
        let mut queue = NegativeQueue::new(16, c).unwrap();
        queue.push(&select_queue_keys(&random_tensor(&[c, 4, 4], seed ^ 2), 10, true, &mut rng).unwrap()).unwrap();

        // Random orthogonal matrix from Gram-Schmidt.
        let g = random_tensor(&[c, c], seed ^ 3);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..c {
            let mut v: Vec<f64> = g.data()[i * c..(i + 1) * c].to_vec();
            for b in &q {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        let rotate_vec = |v: &[f64]| -> Vec<f64> { q.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
        let rotate_map = |t: &Tensor| -> Tensor {
            let n = 16;
            let mut out = Tensor::zeros(t.shape());
            for px in 0..n {
                let v: Vec<f64> = (0..c).map(|ch| t.data()[ch * n + px]).collect();
                for (ch, x) in rotate_vec(&v).into_iter().enumerate() {
                    out.data_mut()[ch * n + px] = x;
                }
            }
            out
        };
        let mut rq = NegativeQueue::new(16, c).unwrap();
        rq.push(&queue.iter().map(|k| rotate_vec(k)).collect::<Vec<_>>()).unwrap();

        let a = scf_evaluate(&left, &right, &batch, &queue, &cfg, false).unwrap().loss;
        let b = scf_evaluate(&rotate_map(&left), &rotate_map(&right), &batch, &rq, &cfg, false).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
    }

    #[test]
    fn queue_replay_is_bit_exact(seed in any::<u64>(), pushes in 1usize..6) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut queue = NegativeQueue::new(20, 4).unwrap();
            for i in 0..pushes {
                let keys = random_tensor(&[4, 4, 4], seed.wrapping_add(i as u64));
                queue.push(&select_queue_keys(&keys, 7, true, &mut rng).unwrap()).unwrap();
            }
            let left = random_tensor(&[4, 4, 4], seed ^ 9);
            let pairs = PositivePairSet { pairs: vec![PositivePair { query: (1, 1), key: (0, 1) }], stride: 1 };
            let cfg = ScfConfig { negatives: 4, window: 3, ..ScfConfig::default() };
            let batch = ScfBatch::sample(&pairs, 4, 4, &cfg, &mut rng);
            let loss = scf_evaluate(&left, &left, &batch, &queue, &cfg, false).unwrap().loss;
            (queue.iter().cloned().collect::<Vec<_>>(), loss.to_bits())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn ssw_loss_is_non_negative(seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 16)) {
        let x = instance_normalize(&random_tensor(&[4, 12], seed), 1e-5).unwrap().x_hat;
        let mut mask = ChannelMask::empty(4);
        for i in 0..4 {
            for j in 0..4 {
                let b = bits[i.min(j) * 4 + i.max(j)];
                mask.bits[i * 4 + j] = b;
            }
        }
        prop_assert!(ssw_loss(&[&x], &[Some(&mask)], false).unwrap().loss >= 0.0);
    }

    #[test]
    fn variance_matrix_is_symmetric_in_views(seed in any::<u64>(), n in 1usize..5) {
        let covs = |s: u64| -> Vec<Tensor> {
            (0..n).map(|i| covariance(&instance_normalize(&random_tensor(&[3, 10], s + i as u64), 1e-5).unwrap().x_hat).unwrap()).collect()
        };
        let (l, r) = (covs(seed), covs(seed.wrapping_add(100)));
        prop_assert_eq!(variance_matrix(&l, &r).unwrap(), variance_matrix(&r, &l).unwrap());
    }

    #[test]
    fn select_mask_is_scale_invariant(seed in any::<u64>(), c in 2usize..7) {
        let mut v = random_tensor(&[c, c], seed);
        // Symmetric, non-negative, like a variance matrix.
        for i in 0..c {
            for j in 0..i {
                let x = v.data()[i * c + j].abs();
                v.data_mut()[i * c + j] = x;
                v.data_mut()[j * c + i] = x;
            }
            v.data_mut()[i * c + i] = v.data()[i * c + i].abs();
        }
        let base = select_mask(&v, 3).unwrap();
        for factor in [0.1, 10.0] {
            let mut s = v.clone();
            s.scale(factor);
            prop_assert_eq!(&select_mask(&s, 3).unwrap(), &base);
        }
    }

    #[test]
    fn wta_is_deterministic_and_brightness_equivariant(seed in 0u64..500, steps in -64i32..64) {
        // Dyadic intensities keep every SAD exact, so ties break identically.
        let offset = steps as f64 / 256.0;
        let s = sample(seed, 4);
        let requant = |img: &stereo_consistency::grid::Image, o: f64| {
            let mut out = img.clone();
            out.as_mut_slice().iter_mut().for_each(|x| *x = (*x * 255.0).round() / 256.0 + o);
            out
        };
        let (l, r) = (requant(&s.left, 0.0), requant(&s.right, 0.0));
        let a = wta_sad_match(&l, &r, 5, 16).unwrap();
        prop_assert_eq!(&a, &wta_sad_match(&l, &r, 5, 16).unwrap());
        prop_assert_eq!(a, wta_sad_match(&requant(&s.left, offset), &requant(&s.right, offset), 5, 16).unwrap());
    }
}

#[test]
fn strict_boundary_is_masked_out() {
    let field = stereo_consistency::geometry::ReprojectionField {
        r: Grid::filled(2, 1, 3.0),
        valid: Grid::filled(2, 1, true),
        left_only: false,
    };
    let MatchMask { m, .. } = matching_mask(&field, 3.0).unwrap();
    assert_eq!(m.count_true(), 0);
}

#[test]
fn whitening_descent_drives_masked_covariance_to_zero() {
    let c = 4;
    let n = 32;
    let mut x = instance_normalize(&random_tensor(&[c, n], 11), 1e-5).unwrap().x_hat;
    // Correlate channels 0 and 1 strongly.
    for t in 0..n {
        let a = x.data()[t];
        x.data_mut()[n + t] = 0.8 * a + 0.2 * x.data()[n + t];
    }
    let mut mask = ChannelMask::empty(c);
    for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
        mask.bits[i * c + j] = true;
    }
    let masked = |x: &Tensor| {
        let s = covariance(x).unwrap();
        s.data()[1].abs().max(s.data()[2 * c + 3].abs())
    };
    let before = masked(&x);
    for step in 0..10000 {
        let out = ssw_loss(&[&x], &[Some(&mask)], true).unwrap();
        let lr = if step < 8000 { 0.5 } else { 0.05 };
        for (v, g) in x.data_mut().iter_mut().zip(out.grads[0].data()) {
            *v -= lr * g;
        }
    }
    let after = masked(&x);
    assert!(before > 0.1, "{before}");
    assert!(after <= 1e-3, "masked covariance still {after}");
}
