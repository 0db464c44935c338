//! Central finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit precision so scheme error can be separated from rounding.
//! The checker reports; it never asserts. Callers decide what error level is
//! acceptable.

use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};

/// Clamp for relative-error denominators.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients already accumulated in `store` against
/// central differences of `loss_fn` on a random subsample of coordinates.
///
/// `loss_fn` must be a deterministic function of the parameter values. The
/// caller runs one forward/backward pass to populate `store`'s gradients
/// before calling; this probe only reads them. At most
/// `min(coords, total coordinates)` coordinates are checked. Relative error
/// is `|numeric - analytic| / max(floor, |numeric| + |analytic|)`.
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    step: f64,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let layout: Vec<(ParamId, usize)> =
        store.ids().map(|id| (id, store.value(id).len())).collect();
    let total: usize = layout.iter().map(|(_, len)| len).sum();
    let count = coords.min(total);
    let chosen: Vec<usize> = if count == total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, count).into_vec()
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for global in chosen {
        let (id, offset) = locate(&layout, global);
        let original = store.value(id).data()[offset];
        store.nudge(id, offset, original + step);
        let plus = loss_fn(store);
        store.nudge(id, offset, original - step);
        let minus = loss_fn(store);
        store.nudge(id, offset, original);
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = store.grad(id)[offset];
        let rel = (numeric - analytic).abs()
            / f64::max(DENOMINATOR_FLOOR, numeric.abs() + analytic.abs());
        report.coords_checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(WorstCoordinate {
                param: store.name(id).to_string(),
                index: offset,
                analytic,
                numeric,
            });
        }
    }
    report
}

fn locate(layout: &[(ParamId, usize)], mut global: usize) -> (ParamId, usize) {
    for &(id, len) in layout {
        if global < len {
            return (id, global);
        }
        global -= len;
    }
    unreachable!("coordinate index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;
    use crate::numerics::tensor::Tensor;
    use crate::seeded_rng;

    /// Loss ||w||^2 has gradient 2w; central differences are exact for
    /// quadratics up to rounding.
    #[test]
    fn quadratic_loss_matches_to_machine_precision() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(2, 2, vec![0.3, -1.2, 0.7, 2.0]));
        let loss = |s: &ParamStore<f64>| s.value(id).data().iter().map(|v| v * v).sum::<f64>();

        // Analytic gradient by hand: 2w.
        let analytic: Vec<f64> = store.value(id).data().iter().map(|v| 2.0 * v).collect();
        store.accumulate_grad(id, &analytic);

        let report =
            finite_difference_check(&mut store, loss, 1e-4, 16, &mut seeded_rng(0));
        assert_eq!(report.coords_checked, 4);
        assert!(report.max_rel_error < 1e-9, "error {}", report.max_rel_error);
    }

    /// A linear loss has no curvature, so the step size cannot matter.
    #[test]
    fn linear_loss_error_is_step_independent() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let loss =
            |s: &ParamStore<f64>| s.value(id).data().iter().sum::<f64>() * 3.0;
        store.accumulate_grad(id, &[3.0, 3.0, 3.0]);
        for step in [1e-2, 1e-4, 1e-6] {
            let report = finite_difference_check(
                &mut store,
                loss,
                step,
                3,
                &mut seeded_rng(1),
            );
            assert!(report.max_rel_error < 1e-7, "h={step}: {}", report.max_rel_error);
        }
    }

    /// End-to-end through the tape on a random two-layer network.
    #[test]
    fn two_layer_network_gradients_match() {
        let mut rng = seeded_rng(7);
        let mut store = ParamStore::<f64>::new();
        let normal = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            use rand_distr::Distribution;
            let dist = rand_distr::Normal::new(0.0, 0.5).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        let w1 = store.insert("w1", Tensor::from_vec(3, 4, normal(&mut rng, 12)));
        let b1 = store.insert("b1", Tensor::from_vec(1, 4, normal(&mut rng, 4)));
        let w2 = store.insert("w2", Tensor::from_vec(4, 2, normal(&mut rng, 8)));
        let input = Tensor::from_vec(5, 3, normal(&mut rng, 15));
        let targets = std::sync::Arc::new(vec![0u32, 1, 0, 1, 1]);

        let run = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let w1v = tape.param(store, w1);
            let b1v = tape.param(store, b1);
            let w2v = tape.param(store, w2);
            let h = tape.matmul(x, w1v);
            let h = tape.add_row(h, b1v);
            let h = tape.relu(h);
            let logits = tape.matmul(h, w2v);
            let loss = tape.cross_entropy_mean(logits, targets.clone());
            tape.value(loss).item()
        };

        // Analytic pass.
        {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let w1v = tape.param(&store, w1);
            let b1v = tape.param(&store, b1);
            let w2v = tape.param(&store, w2);
            let h = tape.matmul(x, w1v);
            let h = tape.add_row(h, b1v);
            let h = tape.relu(h);
            let logits = tape.matmul(h, w2v);
            let loss = tape.cross_entropy_mean(logits, targets.clone());
            tape.backward(loss, &mut store).unwrap();
        }

        let report = finite_difference_check(&mut store, run, 1e-4, 1000, &mut seeded_rng(3));
        assert_eq!(report.coords_checked, 24);
        assert!(
            report.max_rel_error < 1e-3,
            "max rel {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}
