//! SigmoidF1 classification loss and pinball (quantile) regression loss.

use crate::numerics::Tensor2D;

/// Guards the SigmoidF1 denominator when a batch has no positives and all
/// probabilities vanish.
pub const F1_EPS: f64 = 1e-8;

/// Soft confusion-matrix counts over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftConfusion {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

pub fn soft_confusion(probs: &[f64], labels: &[bool]) -> SoftConfusion {
    let mut c = SoftConfusion {
        tp: 0.0,
        fp: 0.0,
        fn_: 0.0,
    };
    for (&p, &d) in probs.iter().zip(labels) {
        if d {
            c.tp += p;
            c.fn_ += 1.0 - p;
        } else {
            c.fp += p;
        }
    }
    c
}

/// `1 − 2tp / (2tp + fp + fn + ε)` over the whole batch.
pub fn sigmoid_f1_loss(probs: &[f64], labels: &[bool]) -> f64 {
    let c = soft_confusion(probs, labels);
    1.0 - 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn_ + F1_EPS)
}

/// Loss and its gradient with respect to each probability.
pub fn sigmoid_f1_grad(probs: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let c = soft_confusion(probs, labels);
    // 2tp + fp + fn = Σp + Σd, so ∂denom/∂p_i = 1 for every i.
    let denom = 2.0 * c.tp + c.fp + c.fn_ + F1_EPS;
    let num = 2.0 * c.tp;
    let loss = 1.0 - num / denom;
    let grads = labels
        .iter()
        .map(|&d| {
            let d_num = if d { 2.0 } else { 0.0 };
            -(d_num * denom - num) / (denom * denom)
        })
        .collect();
    (loss, grads)
}

/// `ρ_α(u) = α·u` for `u ≥ 0`, `(α − 1)·u` otherwise.
#[inline]
pub fn pinball(u: f64, alpha: f64) -> f64 {
    if u >= 0.0 {
        alpha * u
    } else {
        (alpha - 1.0) * u
    }
}

/// `∂ρ_α(y − ŷ)/∂ŷ`.
#[inline]
pub fn pinball_grad_pred(u: f64, alpha: f64) -> f64 {
    if u >= 0.0 {
        -alpha
    } else {
        1.0 - alpha
    }
}

/// Mean pinball loss with each row routed to the head matching its
/// ground-truth label: `1/(3B) Σ_i Σ_α ρ_α(y_i − head_{d_i}(α))`.
pub fn regression_loss(
    delayed_q: &Tensor2D,
    ontime_q: &Tensor2D,
    y: &[f64],
    delayed: &[bool],
    levels: &[f64; 3],
) -> f64 {
    let b = y.len();
    let mut total = 0.0;
    for i in 0..b {
        let q = if delayed[i] { delayed_q.row(i) } else { ontime_q.row(i) };
        for (j, &a) in levels.iter().enumerate() {
            total += pinball(y[i] - q[j], a);
        }
    }
    total / (3 * b) as f64
}

/// [`regression_loss`] plus gradients with respect to both heads' outputs.
/// Rows never contribute gradient to the head they were not routed to.
pub fn regression_loss_grad(
    delayed_q: &Tensor2D,
    ontime_q: &Tensor2D,
    y: &[f64],
    delayed: &[bool],
    levels: &[f64; 3],
) -> (f64, Tensor2D, Tensor2D) {
    let b = y.len();
    let scale = 1.0 / (3 * b) as f64;
    let mut g_del = Tensor2D::zeros(b, 3);
    let mut g_on = Tensor2D::zeros(b, 3);
    let mut total = 0.0;
    for i in 0..b {
        let (q, g) = if delayed[i] {
            (delayed_q.row(i), g_del.row_mut(i))
        } else {
            (ontime_q.row(i), g_on.row_mut(i))
        };
        for (j, &a) in levels.iter().enumerate() {
            let u = y[i] - q[j];
            total += pinball(u, a);
            g[j] = scale * pinball_grad_pred(u, a);
        }
    }
    (total * scale, g_del, g_on)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

    #[test]
    fn f1_hand_values() {
        let l = sigmoid_f1_loss(&[0.5, 0.5], &[true, false]);
        assert!((l - 0.5).abs() < 1e-8);
        let d = 1e-9;
        assert!(sigmoid_f1_loss(&[1.0 - d, 1.0 - d], &[true, true]) < 1e-8);
        assert_eq!(sigmoid_f1_loss(&[0.3, 0.9], &[false, false]), 1.0);
        assert_eq!(sigmoid_f1_loss(&[0.0, 0.0], &[false, false]), 1.0);
    }

    #[test]
    fn f1_grad_matches_central_difference() {
        let p = [0.2, 0.7, 0.55, 0.9, 0.1];
        let l = [true, false, true, false, true];
        let (_, g) = sigmoid_f1_grad(&p, &l);
        for i in 0..p.len() {
            let h = 1e-6;
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (sigmoid_f1_loss(&a, &l) - sigmoid_f1_loss(&b, &l)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn pinball_hand_values() {
        assert_eq!(pinball(0.0, 0.3), 0.0);
        assert!((pinball(2.0, 0.1) - 0.2).abs() < 1e-12);
        assert!((pinball(-2.0, 0.1) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn routed_loss_hand_value() {
        let del = Tensor2D::from_rows(&[vec![1.0, 2.0, 4.0]]);
        let on = Tensor2D::from_rows(&[vec![100.0, 100.0, 100.0]]);
        let l = regression_loss(&del, &on, &[3.0], &[true], &LEVELS);
        assert!((l - 0.8 / 3.0).abs() < 1e-12);
        let perfect = Tensor2D::from_rows(&[vec![3.0, 3.0, 3.0]]);
        assert_eq!(regression_loss(&perfect, &on, &[3.0], &[true], &LEVELS), 0.0);
    }

    #[test]
    fn mismatched_head_gets_zero_gradient() {
        let del = Tensor2D::from_rows(&[vec![1.0, 2.0, 4.0], vec![0.0, 0.5, 1.0]]);
        let on = Tensor2D::from_rows(&[vec![-1.0, 0.0, 0.5], vec![-2.0, 0.0, 2.0]]);
        let (_, gd, go) = regression_loss_grad(&del, &on, &[3.0, -0.5], &[true, false], &LEVELS);
        assert_eq!(go.row(0), &[0.0; 3]);
        assert_eq!(gd.row(1), &[0.0; 3]);
        assert!(gd.row(0).iter().all(|&g| g != 0.0));
    }

    proptest! {
        #[test]
        fn f1_loss_in_unit_interval(
            probs in prop::collection::vec(0.0001f64..0.9999, 1..40),
            seed in any::<u64>(),
        ) {
            let labels: Vec<bool> = (0..probs.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let l = sigmoid_f1_loss(&probs, &labels);
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn f1_loss_decreases_in_positive_probability(
            probs in prop::collection::vec(0.01f64..0.98, 2..30),
            pick in any::<prop::sample::Index>(),
            bump in 0.001f64..0.01,
        ) {
            let i = pick.index(probs.len());
            let labels: Vec<bool> = (0..probs.len()).map(|j| j == i || j % 3 == 0).collect();
            let mut up = probs.clone();
            up[i] += bump;
            prop_assert!(sigmoid_f1_loss(&up, &labels) < sigmoid_f1_loss(&probs, &labels));
            let (_, g) = sigmoid_f1_grad(&probs, &labels);
            prop_assert!(g[i] < 0.0);
        }

        #[test]
        fn pinball_convex_and_continuous(
            a in -50.0f64..50.0, b in -50.0f64..50.0, t in 0.0f64..1.0, alpha in 0.01f64..0.99,
        ) {
            let mid = t * a + (1.0 - t) * b;
            prop_assert!(pinball(mid, alpha) <= t * pinball(a, alpha) + (1.0 - t) * pinball(b, alpha) + 1e-9);
            prop_assert!((pinball(1e-12, alpha) - pinball(-1e-12, alpha)).abs() < 1e-11);
            prop_assert!(pinball(a, alpha) >= 0.0);
        }
    }
}
