//! Adam with decoupled weight decay.

use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    /// Tensors that receive weight decay.
    decay: Vec<bool>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)], decay: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), decay.len());
        Self {
            config,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            decay,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Decay is applied first as `p *= 1 - lr * wd`, then the
    /// bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let shrink = T::one() - lr * T::lit(c.weight_decay);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = self.decay[k] && c.weight_decay != 0.0;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if decay {
                    *p *= shrink;
                }
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads {
            for x in g.as_mut_slice() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(lr: f64, wd: f64) -> (AdamW<f64>, Vec<Matrix<f64>>) {
        let params = vec![
            Matrix::<f64>::from_f64(1, 3, &[0.3, -1.7, 2.5]),
            Matrix::<f64>::from_f64(1, 2, &[0.9, -0.1]),
        ];
        let opt = AdamW::new(
            AdamWConfig {
                learning_rate: lr,
                weight_decay: wd,
                ..Default::default()
            },
            &[(1, 3), (1, 2)],
            vec![true, false],
        );
        (opt, params)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (mut opt, mut p) = setup(0.0, 0.01);
        let before = p.clone();
        let g = vec![
            Matrix::<f64>::from_f64(1, 3, &[1.0, -2.0, 3.0]),
            Matrix::<f64>::from_f64(1, 2, &[0.5, 0.5]),
        ];
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_scales_exactly() {
        let (lr, wd) = (0.1, 0.3);
        let (mut opt, mut p) = setup(lr, wd);
        let before = p.clone();
        let zeros = vec![Matrix::zeros(1, 3), Matrix::zeros(1, 2)];
        opt.step(&mut p, &zeros);
        let factor = 1.0 - lr * wd;
        for (a, b) in p[0].as_slice().iter().zip(before[0].as_slice()) {
            assert_eq!(*a, b * factor);
        }
        assert_eq!(p[1], before[1]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first update ±lr (up to epsilon)
        let (mut opt, mut p) = setup(0.01, 0.0);
        let before = p.clone();
        let g = vec![
            Matrix::<f64>::from_f64(1, 3, &[4.0, -0.2, 1e-3]),
            Matrix::<f64>::from_f64(1, 2, &[1.0, -1.0]),
        ];
        opt.step(&mut p, &g);
        for k in 0..2 {
            for ((a, b), gg) in p[k].as_slice().iter().zip(before[k].as_slice()).zip(g[k].as_slice()) {
                assert!(((b - a) - 0.01 * gg.signum()).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Matrix::<f64>::from_f64(1, 2, &[3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][(0, 0)] - 0.6).abs() < 1e-15);
        let mut small = vec![Matrix::<f64>::from_f64(1, 1, &[0.5])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][(0, 0)], 0.5);
    }
}
