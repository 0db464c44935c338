//! Dense tensor arithmetic with reverse-mode gradients, an adaptive-moment
//! optimizer, and finite-difference verification.
//!
//! Training runs in `f32`; gradient verification runs the identical code in
//! `f64`. All randomness comes from caller-provided seeded generators, and
//! all loops are sequential, so results are bit-identical across runs.

mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, WorstCoordinate, DENOMINATOR_FLOOR};
pub use params::{AdamSettings, ParamId, ParamStore, StoreSnapshot, TensorSnapshot};
pub use scalar::Scalar;
pub use tape::{
    backward_call_count, set_validation, validation_enabled, Tape, Var, LAYER_NORM_EPS,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("backward requires a 1x1 scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("snapshot stores {found} values but this build expects {expected}")]
    PrecisionMismatch { expected: &'static str, found: String },
    #[error("snapshot tensor {name} is malformed")]
    MalformedSnapshot { name: String },
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::seeded_rng;
    use rand_distr::Distribution;

    fn randn(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<f64> {
        let dist = rand_distr::Normal::new(0.0, std).unwrap();
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
    }

    /// Finite-difference check for one op: parameters feed the op under
    /// test, a fixed random readout matrix mixes its output into a scalar.
    fn check_op<F>(inputs: Vec<(&str, Tensor<f64>)>, build: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<ParamId> =
            inputs.into_iter().map(|(name, tensor)| store.insert(name, tensor)).collect();
        let mut rng = seeded_rng(99);
        let readout_cols = {
            // Build once to learn the output shape.
            let mut tape = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|id| tape.param(&store, *id)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).cols()
        };
        let readout = randn(&mut rng, readout_cols, 1, 1.0);

        let run = |store: &ParamStore<f64>, backward: Option<&mut ParamStore<f64>>| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|id| tape.param(store, *id)).collect();
            let out = build(&mut tape, &vars);
            let w = tape.constant(readout.clone());
            let mixed = tape.matmul(out, w);
            let loss = tape.sum_all(mixed);
            let value = tape.value(loss).item();
            if let Some(store) = backward {
                tape.backward(loss, store).unwrap();
            }
            value
        };

        let mut analytic_store = store.clone();
        run(&store, Some(&mut analytic_store));
        // Move gradients into the store we perturb.
        let mut probe = analytic_store;
        let total = probe.num_coordinates();
        let report = finite_difference_check(
            &mut probe,
            |s| run(s, None),
            1e-5,
            total,
            &mut seeded_rng(5),
        );
        report.max_rel_error
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 }));
        let x = tape.constant(Tensor::from_fn(3, 3, |r, c| (r * 3 + c) as f64));
        let y = tape.matmul(eye, x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(1, 102, 0.37));
        let p = tape.softmax_rows(x);
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 102.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_in_range() {
        let mut rng = seeded_rng(11);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&mut rng, 7, 13, 5.0));
        let p = tape.softmax_rows(x);
        let value = tape.value(p);
        for r in 0..7 {
            let row = value.row(r);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(2, 8, 3.5));
        let gain = tape.constant(Tensor::filled(1, 8, 1.0));
        let shift = tape.constant(Tensor::zeros(1, 8));
        let y = tape.layer_norm(x, gain, shift);
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "constant rows normalize to zero, got {v}");
        }
    }

    #[test]
    fn layer_norm_is_shift_invariant() {
        let mut rng = seeded_rng(13);
        let base = randn(&mut rng, 4, 10, 1.0);
        let shifted = Tensor::from_vec(
            4,
            10,
            base.data().iter().map(|v| v + 123.456).collect(),
        );
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::filled(1, 10, 1.0));
        let shift = tape.constant(Tensor::zeros(1, 10));
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let ya = tape.layer_norm(a, gain, shift);
        let yb = tape.layer_norm(b, gain, shift);
        for (x, y) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_output_moments() {
        let mut rng = seeded_rng(17);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&mut rng, 3, 64, 2.0));
        let gain = tape.constant(Tensor::filled(1, 64, 1.0));
        let shift = tape.constant(Tensor::zeros(1, 64));
        let y = tape.layer_norm(x, gain, shift);
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 64.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }

    #[test]
    fn sum_all_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum_all(w);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[1.0; 6]);
        // Backward again without zeroing: gradients add.
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[2.0; 6]);
    }

    #[test]
    fn zero_loss_yields_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::filled(2, 2, 1.5));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let zero = tape.scale(w, 0.0);
        let loss = tape.sum_all(zero);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::filled(2, 2, 1.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let err = tape.backward(w, &mut store).unwrap_err();
        assert_eq!(err, NumericsError::NonScalarLoss { rows: 2, cols: 2 });
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = seeded_rng(21);
        let a = randn(&mut rng, 4, 3, 1.0);
        let b = randn(&mut rng, 3, 5, 1.0);
        let err = check_op(vec![("a", a), ("b", b)], |tape, vars| {
            tape.matmul(vars[0], vars[1])
        });
        assert!(err < 1e-6, "matmul rel error {err}");
    }

    #[test]
    fn add_and_add_row_gradients_match_finite_differences() {
        let mut rng = seeded_rng(22);
        let a = randn(&mut rng, 4, 5, 1.0);
        let b = randn(&mut rng, 4, 5, 1.0);
        let bias = randn(&mut rng, 1, 5, 1.0);
        let err = check_op(vec![("a", a), ("b", b), ("bias", bias)], |tape, vars| {
            let sum = tape.add(vars[0], vars[1]);
            tape.add_row(sum, vars[2])
        });
        assert!(err < 1e-6, "add rel error {err}");
    }

    #[test]
    fn matmul_bias_matches_separate_ops_and_finite_differences() {
        let mut rng = seeded_rng(30);
        let a = randn(&mut rng, 4, 3, 1.0);
        let w = randn(&mut rng, 3, 5, 1.0);
        let bias = randn(&mut rng, 1, 5, 1.0);

        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(bias.clone());
        let fused = tape.matmul_bias(av, wv, bv);
        let product = tape.matmul(av, wv);
        let separate = tape.add_row(product, bv);
        for (x, y) in tape.value(fused).data().iter().zip(tape.value(separate).data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let err = check_op(vec![("a", a), ("w", w), ("bias", bias)], |tape, vars| {
            tape.matmul_bias(vars[0], vars[1], vars[2])
        });
        assert!(err < 1e-6, "matmul_bias rel error {err}");
    }

    #[test]
    fn concat_tile_gather_gradients_match_finite_differences() {
        let mut rng = seeded_rng(23);
        let left = randn(&mut rng, 2, 3, 1.0);
        let right = randn(&mut rng, 2, 2, 1.0);
        // Repeated gather indices exercise scatter-add accumulation.
        let indices = Arc::new(vec![0u32, 1, 1, 3, 0]);
        let err = check_op(vec![("left", left), ("right", right)], move |tape, vars| {
            let joined = tape.concat_cols(&[vars[0], vars[1]]);
            let tiled = tape.tile_rows(joined, 2);
            tape.gather_rows(tiled, indices.clone())
        });
        assert!(err < 1e-6, "concat/tile/gather rel error {err}");
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        // Values far from the kink so central differences are valid.
        let x = Tensor::from_vec(
            2,
            4,
            vec![0.9, -1.2, 0.5, -0.4, 1.7, -0.8, 0.6, -2.0],
        );
        let err = check_op(vec![("x", x)], |tape, vars| tape.relu(vars[0]));
        assert!(err < 1e-6, "relu rel error {err}");
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = seeded_rng(24);
        let x = randn(&mut rng, 3, 6, 1.5);
        let err = check_op(vec![("x", x)], |tape, vars| tape.softmax_rows(vars[0]));
        assert!(err < 1e-6, "softmax rel error {err}");
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = seeded_rng(25);
        let x = randn(&mut rng, 4, 6, 1.0);
        let gain = randn(&mut rng, 1, 6, 0.5);
        let shift = randn(&mut rng, 1, 6, 0.5);
        let err = check_op(vec![("x", x), ("gain", gain), ("shift", shift)], |tape, vars| {
            tape.layer_norm(vars[0], vars[1], vars[2])
        });
        assert!(err < 1e-5, "layer_norm rel error {err}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = seeded_rng(26);
        let q = randn(&mut rng, 6, 8, 0.8);
        let k = randn(&mut rng, 6, 8, 0.8);
        let v = randn(&mut rng, 6, 8, 0.8);
        let err = check_op(vec![("q", q), ("k", k), ("v", v)], |tape, vars| {
            tape.attention_pairs(vars[0], vars[1], vars[2], 2)
        });
        assert!(err < 1e-6, "attention rel error {err}");
    }

    #[test]
    fn attention_probabilities_sum_to_one() {
        let mut rng = seeded_rng(27);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(randn(&mut rng, 8, 6, 1.0));
        let k = tape.constant(randn(&mut rng, 8, 6, 1.0));
        let v = tape.constant(randn(&mut rng, 8, 6, 1.0));
        let out = tape.attention_pairs(q, k, v, 3);
        let probs = tape.attention_probs(out).unwrap();
        for r in 0..probs.rows() {
            for h in 0..3 {
                let sum = probs.get(r, 2 * h) + probs.get(r, 2 * h + 1);
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_values_and_gradients() {
        // Uniform logits over 102 classes.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(1, 102));
        let loss = tape.cross_entropy_mean(logits, Arc::new(vec![17]));
        assert!((tape.value(loss).item() - (102.0f64).ln()).abs() < 1e-12);

        // Known hand value: logits (1, 0, 0), target 0.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]));
        let loss = tape.cross_entropy_mean(logits, Arc::new(vec![0]));
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);

        // Saturated logits: loss ~ 0.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_vec(1, 3, vec![1000.0, 0.0, 0.0]));
        let loss = tape.cross_entropy_mean(logits, Arc::new(vec![0]));
        assert!(tape.value(loss).item().abs() < 1e-9);

        // Gradients against finite differences.
        let mut rng = seeded_rng(28);
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("logits", randn(&mut rng, 5, 7, 1.0));
        let targets = Arc::new(vec![0u32, 3, 6, 2, 2]);
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let l = tape.param(store, id);
            let loss = tape.cross_entropy_mean(l, targets.clone());
            tape.value(loss).item()
        };
        {
            let snapshot = store.clone();
            let mut tape = Tape::new();
            let l = tape.param(&snapshot, id);
            let loss = tape.cross_entropy_mean(l, targets.clone());
            tape.backward(loss, &mut store).unwrap();
        }
        let report = finite_difference_check(&mut store, run, 1e-5, 35, &mut seeded_rng(6));
        assert!(report.max_rel_error < 1e-8, "ce rel error {}", report.max_rel_error);
    }

    #[test]
    fn gemm_transposes_agree_with_naive_products() {
        let mut rng = seeded_rng(29);
        let a = randn(&mut rng, 3, 4, 1.0);
        let b = randn(&mut rng, 4, 2, 1.0);
        // nn
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv);
        for r in 0..3 {
            for col in 0..2 {
                let mut expected = 0.0;
                for i in 0..4 {
                    expected += a.get(r, i) * b.get(i, col);
                }
                assert!((tape.value(c).get(r, col) - expected).abs() < 1e-12);
            }
        }
    }

    /// Large products cross the internal row-split threshold; they must
    /// agree with the naive product and be bit-identical across repeats.
    #[test]
    fn split_matmul_matches_naive_and_repeats_exactly() {
        let mut rng = seeded_rng(31);
        // 2 * 515 * 70 * 70 > 4 MFLOP, odd row count exercises the halves.
        let a = randn(&mut rng, 515, 70, 1.0);
        let b = randn(&mut rng, 70, 70, 1.0);
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c1 = tape.matmul(av, bv);
        let c2 = tape.matmul(av, bv);
        assert_eq!(tape.value(c1).data(), tape.value(c2).data());
        for r in [0usize, 256, 257, 514] {
            for col in [0usize, 33, 69] {
                let mut expected = 0.0;
                for i in 0..70 {
                    expected += a.get(r, i) * b.get(i, col);
                }
                let got = tape.value(c1).get(r, col);
                assert!(
                    (got - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                    "({r}, {col}): {got} vs {expected}"
                );
            }
        }
    }
}
