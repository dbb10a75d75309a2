//! Finite-difference validation of reverse-mode gradients.
//!
//! A fragment exposes its parameters, a scalar loss, and the sign pattern of
//! every non-smooth point it passes through (ReLU pre-activations, pinball
//! residuals). A sampled coordinate whose value sits within `kink_radius` of
//! a sign change is discarded and resampled, since central differences are
//! meaningless across a kink.

use rand::Rng;

use super::rng::seeded;
use super::tensor::Param;

pub trait GradCheckable {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Loss at the current parameters plus the kink sign pattern.
    fn eval(&mut self) -> (f64, Vec<bool>);

    /// Zeroes gradients, then evaluates the loss and back-propagates.
    fn eval_with_grad(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub samples: usize,
    /// Central-difference half step.
    pub step: f64,
    pub kink_radius: f64,
    /// Denominator floor for the relative error, so exact zeros compare as 0.
    pub rel_floor: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            step: 1e-4,
            kink_radius: 1e-3,
            rel_floor: 1e-8,
            max_attempts: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub resampled: usize,
    /// Parameter name, flat index, analytic, numeric for the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with central differences on randomly sampled
/// coordinates. Parameters are left exactly as they were found.
pub fn check_gradients<F: GradCheckable + ?Sized>(
    fragment: &mut F,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    fragment.eval_with_grad();
    let (_, base_pattern) = fragment.eval();
    let analytic: Vec<Vec<f64>> = fragment
        .params_mut()
        .iter()
        .map(|p| {
            p.grad
                .as_ref()
                .map_or_else(|| vec![0.0; p.value.data().len()], |g| g.data().to_vec())
        })
        .collect();
    let names: Vec<String> = fragment.params_mut().iter().map(|p| p.name.clone()).collect();
    let trainable: Vec<usize> = fragment
        .params_mut()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.requires_grad && !p.value.data().is_empty())
        .map(|(i, _)| i)
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        resampled: 0,
        worst: None,
    };
    if trainable.is_empty() {
        return report;
    }
    let mut rng = seeded(cfg.seed);
    let mut attempts = 0;
    while report.checked < cfg.samples && attempts < cfg.max_attempts {
        attempts += 1;
        let pi = trainable[rng.random_range(0..trainable.len())];
        let len = analytic[pi].len();
        let ci = rng.random_range(0..len);

        let kinked = [-cfg.kink_radius, cfg.kink_radius]
            .into_iter()
            .any(|delta| perturbed(fragment, pi, ci, delta).1 != base_pattern);
        if kinked {
            report.resampled += 1;
            continue;
        }
        let (plus, _) = perturbed(fragment, pi, ci, cfg.step);
        let (minus, _) = perturbed(fragment, pi, ci, -cfg.step);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[pi][ci];
        let err = relative_error(a, numeric, cfg.rel_floor);
        if !err.is_finite() || err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = Some((names[pi].clone(), ci, a, numeric));
        }
        report.checked += 1;
    }
    report
}

fn perturbed<F: GradCheckable + ?Sized>(
    fragment: &mut F,
    param: usize,
    coord: usize,
    delta: f64,
) -> (f64, Vec<bool>) {
    let original = {
        let mut ps = fragment.params_mut();
        let v = &mut ps[param].value.data_mut()[coord];
        let orig = *v;
        *v = orig + delta;
        orig
    };
    let out = fragment.eval();
    fragment.params_mut()[param].value.data_mut()[coord] = original;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{
        linear_backward, linear_forward, sigmoid, sigmoid_backward,
    };
    use crate::numerics::tensor::Tensor2D;

    /// Linear layer followed by mean squared output.
    struct Quadratic {
        x: Tensor2D,
        w: Param,
        b: Param,
    }

    impl GradCheckable for Quadratic {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w, &mut self.b]
        }
        fn eval(&mut self) -> (f64, Vec<bool>) {
            let y = linear_forward(&self.x, &self.w.value, self.b.value.data()).unwrap();
            (0.5 * y.sq_norm(), vec![])
        }
        fn eval_with_grad(&mut self) -> f64 {
            self.w.zero_grad();
            self.b.zero_grad();
            let y = linear_forward(&self.x, &self.w.value, self.b.value.data()).unwrap();
            let gb = self.b.grad.as_mut().unwrap().data_mut();
            linear_backward(&self.x, &self.w.value, &y, self.w.grad.as_mut(), Some(gb), false);
            0.5 * y.sq_norm()
        }
    }

    /// Linear → sigmoid → binary cross-entropy.
    struct Logistic {
        x: Tensor2D,
        t: Vec<f64>,
        w: Param,
        b: Param,
    }

    impl Logistic {
        fn forward(&self) -> (Tensor2D, f64) {
            let z = linear_forward(&self.x, &self.w.value, self.b.value.data()).unwrap();
            let p = sigmoid(&z);
            let loss = p
                .data()
                .iter()
                .zip(&self.t)
                .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
                .sum::<f64>()
                / self.t.len() as f64;
            (p, loss)
        }
    }

    impl GradCheckable for Logistic {
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.w, &mut self.b]
        }
        fn eval(&mut self) -> (f64, Vec<bool>) {
            (self.forward().1, vec![])
        }
        fn eval_with_grad(&mut self) -> f64 {
            self.w.zero_grad();
            self.b.zero_grad();
            let (p, loss) = self.forward();
            let n = self.t.len() as f64;
            let dp: Vec<f64> = p
                .data()
                .iter()
                .zip(&self.t)
                .map(|(&p, &t)| (-(t / p) + (1.0 - t) / (1.0 - p)) / n)
                .collect();
            let dz = sigmoid_backward(&p, &Tensor2D::from_vec(p.rows(), 1, dp));
            let gb = self.b.grad.as_mut().unwrap().data_mut();
            linear_backward(&self.x, &self.w.value, &dz, self.w.grad.as_mut(), Some(gb), false);
            loss
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = seeded(seed);
        Tensor2D::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn linear_quadratic_matches_to_1e6() {
        let mut f = Quadratic {
            x: random(5, 4, 1),
            w: Param::new("w", random(3, 4, 2)),
            b: Param::new("b", random(1, 3, 3)),
        };
        let before = f.w.value.clone();
        let r = check_gradients(&mut f, &GradCheckConfig::default());
        assert_eq!(r.checked, 200);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(f.w.value, before);
    }

    #[test]
    fn linear_sigmoid_bce_matches_to_1e4() {
        let mut f = Logistic {
            x: random(8, 3, 4),
            t: vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            w: Param::new("w", random(1, 3, 5)),
            b: Param::new("b", random(1, 1, 6)),
        };
        let r = check_gradients(&mut f, &GradCheckConfig::default());
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn degenerate_zero_fragment_is_finite() {
        let mut f = Quadratic {
            x: Tensor2D::zeros(2, 2),
            w: Param::new("w", Tensor2D::zeros(2, 2)),
            b: Param::new("b", Tensor2D::zeros(1, 2)),
        };
        let r = check_gradients(&mut f, &GradCheckConfig::default());
        assert!(r.max_rel_error.is_finite());
    }
}
