//! Randomized invariant checks over the public numeric surface: softmax
//! weights stay on the simplex at every temperature, the pairwise
//! gradient-matching loss ignores group order, soft rounding never leaves
//! the unit interval, dissimilarity matrices stay well formed, and the
//! on-disk containers round-trip floats bit for bit.

use proptest::prelude::*;
use rand::seq::SliceRandom;

use qcw_core::diagnostics::dissimilarity_from_gradients;
use qcw_core::model::Architecture;
use qcw_core::params::{ParamVector, SegmentTable};
use qcw_core::quant::{fake_quant, init_quant, score_for_offset, soft_round, soft_round_deriv, QuantConfig};
use qcw_core::rng::stream;
use qcw_core::weighting::{gm_loss_raw, softmax_weights, SampleWeights};

fn pv(data: &[f64]) -> ParamVector {
    let table = SegmentTable::new(&[("g".to_string(), data.len())]).unwrap();
    ParamVector::from_data(table, data.to_vec()).unwrap()
}

/// Vectors of one shared dimension, so pairwise dot products are defined.
fn grad_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6).prop_flat_map(|dim| {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), 2..6)
    })
}

/// Finite values spanning magnitudes, signs, and both zeros.
fn gnarly_float() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e300f64..1e300,
        -1.0f64..1.0,
        Just(0.0),
        Just(-0.0),
        Just(1e-310),
        Just(f64::MIN_POSITIVE),
        Just(1.0 / 32.0),
    ]
}

proptest! {
    #[test]
    fn softmax_stays_on_the_simplex(
        // Score gaps stay well inside exp's underflow range at every tau.
        scores in prop::collection::vec(-30.0f64..30.0, 1..64),
        tau in 0.1f64..8.0,
    ) {
        let w = softmax_weights(&scores, tau).unwrap();
        let sum: f64 = w.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        // Separated scores keep their order at any temperature.
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[j] - scores[i] > 1e-9 {
                    prop_assert!(w[i] < w[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_reports_underflow_instead_of_zero_weights(
        gap in 800.0f64..2000.0,
        tau in 0.1f64..1.0,
    ) {
        // A spread beyond exp's range must fail loudly, not return zeros.
        let err = softmax_weights(&[0.0, gap * tau * 2.0], tau).unwrap_err();
        prop_assert!(err.is_numeric());
    }

    #[test]
    fn softmax_argmax_survives_temperature(
        scores in prop::collection::vec(-20.0f64..20.0, 2..32),
    ) {
        let mut top = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[top] {
                top = i;
            }
        }
        let separated = scores
            .iter()
            .enumerate()
            .all(|(i, s)| i == top || scores[top] - s > 1e-9);
        prop_assume!(separated);
        for tau in [0.2, 0.5, 1.0, 2.0] {
            let w = softmax_weights(&scores, tau).unwrap();
            let mut argmax = 0;
            for (i, x) in w.iter().enumerate() {
                if *x > w[argmax] {
                    argmax = i;
                }
            }
            prop_assert_eq!(argmax, top, "tau {}", tau);
        }
    }

    #[test]
    fn gm_loss_ignores_group_order(
        vecs in grad_sets(),
        seed in any::<u64>(),
    ) {
        let base = gm_loss_raw(&vecs, false).unwrap();
        let ordered = gm_loss_raw(&vecs, true).unwrap();
        // Ordered pairs double every summand, which is exact in binary.
        prop_assert_eq!(ordered, 2.0 * base);
        let mut shuffled = vecs.clone();
        let mut rng = stream(seed, "prop-gm", 0);
        shuffled.shuffle(&mut rng);
        let after = gm_loss_raw(&shuffled, false).unwrap();
        prop_assert!((base - after).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn soft_round_stays_in_the_unit_interval(v in -1e6f64..1e6) {
        let h = soft_round(v);
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!(soft_round_deriv(v) >= 0.0);
    }

    #[test]
    fn score_recovers_its_offset(rest in 0.02f64..0.98) {
        let v = score_for_offset(rest);
        prop_assert!((soft_round(v) - rest).abs() < 1e-12);
    }

    #[test]
    fn dissimilarity_matrices_stay_well_formed(grads in grad_sets()) {
        let labels: Vec<String> = (0..grads.len()).map(|g| format!("g{g}")).collect();
        let pvs: Vec<ParamVector> = grads.iter().map(|g| pv(g)).collect();
        let m = dissimilarity_from_gradients(labels, &pvs).unwrap();
        m.validate().unwrap();
    }

    #[test]
    fn param_container_round_trips_bitwise(
        lens in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
        data in prop::collection::vec(gnarly_float(), 16),
    ) {
        let entries: Vec<(String, usize)> = lens
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("s{i}"), *l))
            .collect();
        let table = SegmentTable::new(&entries).unwrap();
        let total: usize = lens.iter().sum();
        let values: Vec<f64> = (0..total).map(|i| data[i % data.len()]).collect();
        let v = ParamVector::from_data(table, values.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("pv-{seed}.qcw"));
        v.save(&path).unwrap();
        let back = ParamVector::load(&path).unwrap();
        prop_assert_eq!(back.data().len(), values.len());
        for (a, b) in back.data().iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sample_weights_json_round_trips_bitwise(
        scores in prop::collection::vec(gnarly_float(), 1..32),
        tau in 0.1f64..4.0,
    ) {
        let w = SampleWeights { scores: scores.clone(), tau };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        w.save(&path).unwrap();
        let back = SampleWeights::load(&path).unwrap();
        prop_assert_eq!(back.tau.to_bits(), tau.to_bits());
        prop_assert_eq!(back.scores.len(), scores.len());
        for (a, b) in back.scores.iter().zip(&scores) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fresh_quantizer_round_trip_is_within_half_a_step(
        ws in prop::collection::vec(-50.0f64..50.0, 16),
        per_channel in any::<bool>(),
    ) {
        let arch = Architecture::mlp(2, 4, 1, 0, false).unwrap();
        let mut rng = stream(0, "prop-quant", 0);
        let mut fp = arch.init_params(&mut rng).unwrap();
        fp.segment_slice_mut("dense0.w").unwrap().copy_from_slice(&ws[..8]);
        fp.segment_slice_mut("dense1.w").unwrap().copy_from_slice(&ws[8..]);
        let cfg = QuantConfig {
            per_channel,
            ..QuantConfig::default()
        };
        let state = init_quant(&arch, &fp, &cfg).unwrap();
        for layer in &state.layers {
            let shape = layer.v.shape().to_vec();
            let cols = shape[1];
            let w = fp
                .segment_tensor(&format!("{}.w", layer.name), shape)
                .unwrap();
            let dq = fake_quant(&w, layer).unwrap();
            for (i, (a, b)) in w.data().iter().zip(dq.data()).enumerate() {
                let row = if layer.per_channel { i / cols } else { 0 };
                let scale = layer.grid_scales[row];
                prop_assert!(
                    (a - b).abs() <= scale / 2.0 + 1e-12,
                    "weight {a} reconstructed as {b} with step {scale}"
                );
            }
            for &v in layer.v.data() {
                let h = soft_round(v);
                prop_assert!((0.0..=1.0).contains(&h));
            }
        }
    }
}
