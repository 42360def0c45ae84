mod oracles;

use approx::assert_relative_eq;
use denn_core::bvp::{
    fd_solve, pointwise_loss, sample_training_set, stencil_residual, PgmImage, PgmScale, PointTag, Rect,
};
use denn_core::generality::{
    decompose, reproducibility, similarity_from_activations, specificity, EnsembleIndex, Member, SimilarityMatrix,
    XTenths,
};
use denn_core::net::checkpoint::Checkpoint;
use denn_core::net::ParamGradient;
use denn_core::svcca::{cca_values, self_similarity_values, svcca_similarity, ActivationMatrix, CcaResult};
use denn_core::trainer::{adam_step, AdamParams, AdamState};
use denn_core::transfer::{splice_recipient, transfer_specificity, Group, TransferJob, TransferOutcome};
use denn_core::{BvpSpec, DerivativeBundle, GridField, LossNorm, Mlp};
use ndarray::{Array1, Array2};
use oracles::{gaussian_matrix, normal, random_net, rng};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn net_from(seed: u64, width: usize, depth: usize) -> Mlp {
    random_net(&mut rng(seed), width, depth)
}

/// Activations with a few dominant directions plus a smaller random part.
fn activations(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let latent = gaussian_matrix(&mut r, rows, 3);
    let mix = gaussian_matrix(&mut r, 3, cols);
    latent.dot(&mix) + gaussian_matrix(&mut r, rows, cols) * 0.3
}

fn view(values: Array2<f64>, name: &str) -> ActivationMatrix {
    ActivationMatrix::new(values, 1, name, "sample").unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), width in 1usize..12, depth in 1usize..5) {
        let net = net_from(seed, width, depth);
        let back = Checkpoint::parse(&Checkpoint::new(net.clone(), seed).to_text()).unwrap();
        prop_assert_eq!(back.seed, seed);
        for (a, b) in back.net.layers().iter().zip(net.layers()) {
            prop_assert!(a.weights.iter().zip(b.weights.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(a.bias.iter().zip(b.bias.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn output_bias_shift_only_moves_the_value(
        seed in any::<u64>(), width in 1usize..10, depth in 1usize..5,
        c in -5.0f64..5.0, x in -1.0f64..1.0, y in -1.0f64..1.0,
    ) {
        let net = net_from(seed, width, depth);
        let mut shifted = net.clone();
        let last = net.layers().len() - 1;
        let mut out = net.layers()[last].clone();
        out.bias[0] += c;
        shifted.set_layer(last, out).unwrap();
        let a = net.forward_with_input_derivatives([x, y]).unwrap();
        let b = shifted.forward_with_input_derivatives([x, y]).unwrap();
        assert_relative_eq!(b.value, a.value + c, epsilon = 1e-12, max_relative = 1e-12);
        prop_assert_eq!(a.input_gradient, b.input_gradient);
        prop_assert_eq!(a.input_pure_second, b.input_pure_second);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let net = net_from(seed, 6, 3);
        prop_assert_eq!(net.forward_with_input_derivatives([x, y]).unwrap(), net.forward_with_input_derivatives([x, y]).unwrap());
    }

    #[test]
    fn source_is_negative_and_loss_non_negative(
        xs in -1.0f64..1.0, px in -1.0f64..1.0, py in -1.0f64..1.0,
        value in -3.0f64..3.0, lap in -50.0f64..50.0, l1 in any::<bool>(),
    ) {
        let spec = BvpSpec::with_x_source(xs).unwrap();
        let s = spec.source_term([px, py]);
        prop_assert!(s <= 0.0);
        let norm = if l1 { LossNorm::L1 } else { LossNorm::L2 };
        let bundle = DerivativeBundle { value, input_gradient: [0.0; 2], input_pure_second: [lap, 0.0] };
        prop_assert!(pointwise_loss(&bundle, [px, py], PointTag::Interior, &spec, norm) >= 0.0);
        let boundary = pointwise_loss(&bundle, [px, -1.0], PointTag::Boundary, &spec, norm);
        prop_assert!(boundary >= 0.0);
        prop_assert_eq!(boundary == 0.0, value == 0.0);
        let zero = DerivativeBundle { value: 0.0, ..bundle };
        prop_assert_eq!(pointwise_loss(&zero, [1.0, py], PointTag::Boundary, &spec, norm), 0.0);
    }

    #[test]
    fn sampler_is_deterministic_and_exact_on_edges(seed in any::<u64>(), ni in 1usize..60, ne in 1usize..30) {
        let spec = BvpSpec::default();
        let a = sample_training_set(&mut rng(seed), &spec, ni, ne);
        let b = sample_training_set(&mut rng(seed), &spec, ni, ne);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.count(PointTag::Interior), ni);
        prop_assert_eq!(a.count(PointTag::Boundary), 4 * ne);
        for (p, tag) in a.iter() {
            match tag {
                PointTag::Interior => prop_assert!(spec.domain.contains_open(p)),
                PointTag::Boundary => prop_assert!(spec.domain.on_boundary(p)),
            }
        }
    }

    #[test]
    fn fd_solution_satisfies_the_stencil(xs in -0.6f64..0.6, r in 0.1f64..0.4, n in 5usize..40) {
        let spec = BvpSpec { x_source: xs, r, ..BvpSpec::default() };
        let field = fd_solve(&spec, n).unwrap();
        prop_assert!(stencil_residual(&field, |p| spec.source_term(p)) <= 1e-8);
    }

    #[test]
    fn grid_field_and_pgm_round_trip(nx in 2usize..20, ny in 2usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..nx * ny).map(|_| normal(&mut r) * 1e3).collect();
        let field = GridField::new(nx, ny, Rect::UNIT_SQUARE, values).unwrap();
        prop_assert_eq!(GridField::parse(&field.to_text()).unwrap(), field.clone());
        let (img, scale) = field.to_pgm();
        prop_assert_eq!(PgmImage::parse(&img.to_bytes()).unwrap(), img);
        prop_assert_eq!(PgmScale::parse(&scale.to_text()).unwrap(), scale);
    }

    #[test]
    fn cca_correlations_are_bounded_sorted_and_symmetric(seed in any::<u64>(), ca in 1usize..8, cb in 1usize..8) {
        let a = activations(seed, 200, ca);
        let b = activations(seed ^ 1, 200, cb) + &a.column(0).insert_axis(ndarray::Axis(1));
        let ab = cca_values(&a, &b).unwrap().correlations;
        let ba = cca_values(&b, &a).unwrap().correlations;
        prop_assert!(ab.len() <= ca.min(cb));
        prop_assert!(ab.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!(ab.windows(2).all(|w| w[0] >= w[1]));
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn cca_is_invariant_to_per_neuron_affine_maps(seed in any::<u64>(), cols in 2usize..8) {
        let a = activations(seed, 300, cols);
        let b = activations(seed.wrapping_add(7), 300, cols) + &a * 0.5;
        let mut r = rng(seed ^ 0xAF);
        let scale = Array1::from_shape_simple_fn(cols, || {
            let m = 0.1 + 5.0 * normal(&mut r).abs();
            if normal(&mut r) > 0.0 { m } else { -m }
        });
        let shift = Array1::from_shape_simple_fn(cols, || 10.0 * normal(&mut r));
        let base = cca_values(&a, &b).unwrap().correlations;
        let moved = cca_values(&(&a * &scale + &shift), &b).unwrap().correlations;
        prop_assert_eq!(base.len(), moved.len());
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn cca_text_round_trip(seed in any::<u64>()) {
        let a = activations(seed, 80, 4);
        let b = activations(seed ^ 3, 80, 3);
        let result = cca_values(&a, &b).unwrap();
        prop_assert_eq!(CcaResult::parse(&result.to_text()).unwrap(), result);
    }

    #[test]
    fn thresholded_similarity_does_not_decrease_with_the_fraction(seed in any::<u64>(), f in 0.05f64..0.95, g in 0.05f64..0.95) {
        let (lo, hi) = if f <= g { (f, g) } else { (g, f) };
        let a = view(activations(seed, 300, 6), "a");
        let b = view(activations(seed ^ 9, 300, 6) + &a.values * 0.3, "b");
        let r_lo = svcca_similarity(&a, &b, Some(lo)).unwrap();
        let r_hi = svcca_similarity(&a, &b, Some(hi)).unwrap();
        prop_assert!(r_lo <= r_hi + 1e-9, "{lo}: {r_lo} > {hi}: {r_hi}");
    }

    #[test]
    fn isotropic_noise_has_full_dimensionality(seed in any::<u64>(), cols in 1usize..12) {
        let noise = gaussian_matrix(&mut rng(seed), 2000, cols);
        prop_assert!((self_similarity_values(&noise).unwrap() - cols as f64).abs() < 1e-9);
    }

    #[test]
    fn seed_order_within_a_position_does_not_change_stats(seed in any::<u64>(), p in 1usize..4, s in 2usize..4) {
        let positions: Vec<XTenths> = (0..p as i64).map(|k| XTenths(2 * k)).collect();
        let widths = vec![2, 5, 1];
        let index = EnsembleIndex::grid(&positions, s as u64, widths.clone()).unwrap();
        let acts: Vec<ActivationMatrix> = index
            .members
            .iter()
            .map(|m| view(activations(seed ^ (m.x.0 as u64 * 31 + m.seed), 120, 5), &m.to_string()))
            .collect();
        let stats = decompose(&similarity_from_activations(&acts, &index, 1).unwrap()).unwrap();

        let mut order: Vec<usize> = (0..index.len()).collect();
        for block in order.chunks_mut(s) {
            block.reverse();
            block.rotate_left(seed as usize % s);
        }
        let members: Vec<Member> = order.iter().map(|&i| index.members[i]).collect();
        let permuted = EnsembleIndex::new(members, widths).unwrap();
        let acts_p: Vec<ActivationMatrix> = order.iter().map(|&i| acts[i].clone()).collect();
        let stats_p = decompose(&similarity_from_activations(&acts_p, &permuted, 1).unwrap()).unwrap();
        prop_assert_eq!(stats, stats_p);
    }

    #[test]
    fn metrics_are_invariant_to_global_scaling(seed in any::<u64>(), k in 0.01f64..100.0) {
        let positions: Vec<XTenths> = (0..3).map(XTenths).collect();
        let index = EnsembleIndex::grid(&positions, 2, vec![2, 4, 1]).unwrap();
        let n = index.len();
        let mut r = rng(seed);
        let raw = Array2::from_shape_simple_fn((n, n), || 1.0 + normal(&mut r).abs());
        let values = &raw + &raw.t();
        let a = decompose(&SimilarityMatrix { layer: 1, index: index.clone(), values: values.clone() }).unwrap();
        let b = decompose(&SimilarityMatrix { layer: 1, index, values: values * k }).unwrap();
        assert_relative_eq!(specificity(&a).unwrap().value, specificity(&b).unwrap().value, max_relative = 1e-12, epsilon = 1e-14);
        assert_relative_eq!(reproducibility(&a).unwrap().value, reproducibility(&b).unwrap().value, max_relative = 1e-12);
    }

    #[test]
    fn similarity_matrix_text_round_trip(seed in any::<u64>()) {
        let positions: Vec<XTenths> = vec![XTenths(-3), XTenths(0), XTenths(4)];
        let index = EnsembleIndex::grid(&positions, 2, vec![2, 3, 3, 1]).unwrap();
        let mut r = rng(seed);
        let values = Array2::from_shape_simple_fn((6, 6), || normal(&mut r));
        let m = SimilarityMatrix { layer: 2, index, values };
        prop_assert_eq!(SimilarityMatrix::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn tenths_display_round_trips(t in -1000i64..1000) {
        let x = XTenths(t);
        prop_assert_eq!(XTenths::from_f64(x.to_string().parse().unwrap()).unwrap(), x);
    }

    #[test]
    fn masked_layers_are_untouched_by_adam(seed in any::<u64>(), mask in proptest::collection::vec(any::<bool>(), 4)) {
        let mut net = net_from(seed, 5, 3);
        let before = net.clone();
        let mut grad = ParamGradient::zeros_like(&net);
        let mut r = rng(seed ^ 5);
        for l in &mut grad.layers {
            l.weights.mapv_inplace(|_| normal(&mut r));
            l.bias.mapv_inplace(|_| normal(&mut r));
        }
        let mut state = AdamState::new(&net);
        for _ in 0..3 {
            adam_step(&mut net, &grad, &mut state, &AdamParams::default(), &mask).unwrap();
        }
        for (i, &trainable) in mask.iter().enumerate() {
            prop_assert_eq!(net.layers()[i] == before.layers()[i], !trainable);
            prop_assert_eq!(state.m.layers[i].weights.iter().all(|&v| v == 0.0), !trainable);
        }
    }

    #[test]
    fn splice_copies_the_leading_layers(seed in any::<u64>(), n in 1usize..=4) {
        let donor = net_from(seed, 6, 4);
        let (recipient, mask) = splice_recipient(&donor, n, &mut rng(seed ^ 11)).unwrap();
        for i in 0..donor.layers().len() {
            prop_assert_eq!(recipient.layers()[i] == donor.layers()[i], i < n);
            prop_assert_eq!(mask[i], i >= n);
        }
    }

    #[test]
    fn transfer_specificity_is_scale_free_and_within_pairings(
        losses in proptest::collection::vec(1e-6f64..10.0, 8), k in 0.001f64..1000.0,
    ) {
        let outcomes = |scale: f64| -> Vec<TransferOutcome> {
            let groups = [Group::SelfferFrozen, Group::TransferFrozen];
            (0..8)
                .map(|i| TransferOutcome {
                    job: TransferJob {
                        group: groups[i % 2],
                        n: 2,
                        x_a: XTenths(0),
                        x_b: XTenths(6),
                        donor_seed: (i / 4) as u64,
                        recipient: ((i / 2) % 2) as u64,
                    },
                    width: 8,
                    recipient_seed: 0,
                    final_loss: losses[i] * scale,
                    epochs: 1,
                })
                .collect()
        };
        let a = transfer_specificity(&outcomes(1.0), 2).unwrap();
        let b = transfer_specificity(&outcomes(k), 2).unwrap();
        assert_relative_eq!(a.ratio, b.ratio, max_relative = 1e-12);
        prop_assert!(a.min <= a.ratio * (1.0 + 1e-12) && a.ratio <= a.max * (1.0 + 1e-12));
    }
}
