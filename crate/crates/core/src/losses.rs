//! Segmentation losses with analytic gradients with respect to the predicted
//! probabilities.
//!
//! Every loss is a mean: over voxels for cross-entropy and edge MSE, over
//! batch items for dice.

use edgeseg_tensor::{Shape5, Tensor};
use serde::Serialize;

use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Edge-term weights, coarsest level first.
    pub w: [f64; 3],
    pub eps_log: f64,
    pub eps_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w: [0.5, 0.8, 1.0], eps_log: 1e-7, eps_dice: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {:?}", self.w)));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 0.5) || !(self.eps_dice > 0.0) {
            return Err(Error::Config("loss eps values must be positive (eps_log < 0.5)".into()));
        }
        Ok(())
    }
}

fn check_shapes(what: &str, a: Shape5, b: Shape5) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: prediction {a} and target {b} shapes differ")));
    }
    Ok(())
}

/// Loss value and its gradient with respect to the prediction.
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Binary cross-entropy, `-mean(y ln p + (1-y) ln(1-p))` with `p` clamped to
/// `[eps, 1-eps]`. The gradient is zero where the clamp is active.
pub fn cross_entropy<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps_log: f64) -> Result<LossGrad<T>> {
    check_shapes("cross_entropy", pred.shape(), target.shape())?;
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let pc = p.clamp(eps_log, 1.0 - eps_log);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if p < eps_log || p > 1.0 - eps_log {
                T::zero()
            } else {
                T::of((-y / pc + (1.0 - y) / (1.0 - pc)) / n)
            }
        })
        .collect();
    Ok(LossGrad { value: total / n, grad: Tensor::from_vec(pred.shape(), grad) })
}

/// Smoothed soft dice loss per batch item, averaged over the batch:
/// `1 - (2 Σ y p + eps) / (Σ y² + Σ p² + eps)`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps_dice: f64) -> Result<LossGrad<T>> {
    check_shapes("dice_loss", pred.shape(), target.shape())?;
    let batch = pred.shape().n;
    let mut grad = Vec::with_capacity(pred.len());
    let mut total = 0.0;
    for b in 0..batch {
        let (p, y) = (pred.item(b), target.item(b));
        let (mut inter, mut sy, mut sp) = (0.0f64, 0.0f64, 0.0f64);
        for (&pv, &yv) in p.iter().zip(y) {
            let (pv, yv) = (pv.as_f64(), yv.as_f64());
            inter += pv * yv;
            sy += yv * yv;
            sp += pv * pv;
        }
        let num = 2.0 * inter + eps_dice;
        let den = sy + sp + eps_dice;
        total += 1.0 - num / den;
        // d/dp_i [-(num/den)] = -(2 y_i den - num 2 p_i) / den²
        let scale = 1.0 / batch as f64;
        grad.extend(p.iter().zip(y).map(|(&pv, &yv)| {
            let (pv, yv) = (pv.as_f64(), yv.as_f64());
            T::of(-(2.0 * yv * den - 2.0 * pv * num) / (den * den) * scale)
        }));
    }
    Ok(LossGrad { value: total / batch as f64, grad: Tensor::from_vec(pred.shape(), grad) })
}

/// Mean squared difference between predicted and target edge maps.
pub fn edge_loss<T: Scalar>(pred_edge: &Tensor<T>, gt_edge: &Tensor<T>) -> Result<LossGrad<T>> {
    check_shapes("edge_loss", pred_edge.shape(), gt_edge.shape())?;
    let n = pred_edge.len() as f64;
    let mut total = 0.0;
    let grad = pred_edge
        .data()
        .iter()
        .zip(gt_edge.data())
        .map(|(&p, &g)| {
            let d = p.as_f64() - g.as_f64();
            total += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok(LossGrad { value: total / n, grad: Tensor::from_vec(pred_edge.shape(), grad) })
}

/// Per-term values of the composite loss.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    /// Unweighted edge terms, coarsest first.
    pub edge: [f64; 3],
}

impl LossBreakdown {
    /// First non-finite term, by name.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.dice.is_finite() {
            return Some("dice");
        }
        for (i, name) in ["edge1", "edge2", "edge3"].into_iter().enumerate() {
            if !self.edge[i].is_finite() {
                return Some(name);
            }
        }
        (!self.total.is_finite()).then_some("total")
    }
}

/// Gradients of the composite loss with respect to each network output.
pub struct TotalLossGrads<T> {
    pub prob: Tensor<T>,
    pub edges: [Tensor<T>; 3],
}

/// `dice(prob, target) + Σ w_i edge(edge_pred_i, edge_target_i)`.
pub fn total_loss<T: Scalar>(
    prob: &Tensor<T>,
    edge_preds: [&Tensor<T>; 3],
    target: &Tensor<T>,
    edge_targets: [&Tensor<T>; 3],
    weights: &LossWeights,
) -> Result<(LossBreakdown, TotalLossGrads<T>)> {
    let dice = dice_loss(prob, target, weights.eps_dice)?;
    let mut edge = [0.0; 3];
    let mut total = dice.value;
    let mut grads: Vec<Tensor<T>> = Vec::with_capacity(3);
    for i in 0..3 {
        let mut term = edge_loss(edge_preds[i], edge_targets[i])?;
        edge[i] = term.value;
        total += weights.w[i] * term.value;
        term.grad.scale(T::of(weights.w[i]));
        grads.push(term.grad);
    }
    let edges: [Tensor<T>; 3] = grads.try_into().unwrap_or_else(|_| unreachable!());
    Ok((LossBreakdown { total, dice: dice.value, edge }, TotalLossGrads { prob: dice.grad, edges }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape5::new(1, 1, values.len(), 1, 1), values.to_vec())
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let y = t(&[1.0, 0.0, 1.0, 1.0]);
        assert!(cross_entropy(&y, &y, 1e-7).unwrap().value.abs() < 1e-6);
        assert!(dice_loss(&y, &y, 1e-5).unwrap().value.abs() < 1e-6);
        assert_eq!(edge_loss(&y, &y).unwrap().value, 0.0);
    }

    #[test]
    fn cross_entropy_of_half_is_ln2() {
        let v = cross_entropy(&t(&[0.5; 4]), &t(&[1.0; 4]), 1e-7).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_finite_at_zero_probability() {
        let v = cross_entropy(&t(&[0.0]), &t(&[1.0]), 1e-7).unwrap().value;
        assert!((v + (1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn dice_of_half_against_two_of_four() {
        let v = dice_loss(&t(&[0.5; 4]), &t(&[1.0, 1.0, 0.0, 0.0]), 1e-12).unwrap().value;
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn dice_of_empty_masks_is_zero() {
        assert!(dice_loss(&t(&[0.0; 4]), &t(&[0.0; 4]), 1e-5).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn dice_averages_over_batch_items() {
        let s = Shape5::new(2, 1, 2, 1, 1);
        let pred = Tensor::from_vec(s, vec![1.0, 0.0, 0.0, 1.0]);
        let target = Tensor::from_vec(s, vec![1.0, 0.0, 1.0, 0.0]);
        let v = dice_loss(&pred, &target, 1e-12).unwrap().value;
        assert!((v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn edge_loss_of_half_is_quarter() {
        let v = edge_loss(&t(&[0.5; 6]), &t(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap().value;
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        assert!(matches!(dice_loss(&t(&[0.5; 3]), &t(&[1.0; 4]), 1e-5), Err(Error::Contract(_))));
        assert!(matches!(edge_loss(&t(&[0.5; 3]), &t(&[1.0; 4])), Err(Error::Contract(_))));
        assert!(matches!(cross_entropy(&t(&[0.5; 3]), &t(&[1.0; 4]), 1e-7), Err(Error::Contract(_))));
    }

    #[test]
    fn total_with_zero_weights_is_dice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::from_fn(Shape5::new(1, 1, 4, 4, 2), |_| rng.gen_range(0.0..1.0));
        let y = Tensor::from_fn(Shape5::new(1, 1, 4, 4, 2), |i| (i % 3 == 0) as u8 as f64);
        let w = LossWeights { w: [0.0; 3], ..LossWeights::default() };
        let (b, _) = total_loss(&p, [&p, &p, &p], &y, [&y, &y, &y], &w).unwrap();
        assert_eq!(b.total, dice_loss(&p, &y, w.eps_dice).unwrap().value);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..32).map(|_| rng.gen_range(0..2) as f64).collect();
        let mut idx: Vec<usize> = (0..32).collect();
        idx.reverse();
        idx.swap(3, 17);
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let a = edge_loss(&t(&p), &t(&y)).unwrap().value;
        let b = edge_loss(&t(&pp), &t(&yp)).unwrap().value;
        assert!((a - b).abs() < 1e-15);
        let a = dice_loss(&t(&p), &t(&y), 1e-5).unwrap().value;
        let b = dice_loss(&t(&pp), &t(&yp), 1e-5).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..16).map(|_| rng.gen_range(0..2) as f64).collect();
            let b: Vec<f64> = (0..16).map(|_| rng.gen_range(0..2) as f64).collect();
            let ab = dice_loss(&t(&a), &t(&b), 1e-5).unwrap().value;
            let ba = dice_loss(&t(&b), &t(&a), 1e-5).unwrap().value;
            assert!((ab - ba).abs() < 1e-12);

            let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let l = dice_loss(&t(&p), &t(&a), 1e-9).unwrap().value;
            assert!((0.0..=1.0).contains(&l));
            if let Some(i) = a.iter().position(|&v| v == 1.0) {
                let mut q = p.clone();
                q[i] = (q[i] + 0.2).min(1.0);
                assert!(dice_loss(&t(&q), &t(&a), 1e-9).unwrap().value <= l + 1e-12);
            }
        }
    }
}
