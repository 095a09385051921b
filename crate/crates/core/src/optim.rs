//! Adam with single-precision parameter storage.
//!
//! Arithmetic runs in `f64`, but parameters and both moment estimates are
//! rounded to the nearest `f32` after every step. The checkpoint format stores
//! `f32`, so a saved and reloaded run continues bit for bit.

use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    /// Zeroed moments shaped like `params`.
    pub fn new(lr: f64, params: &[&Matrix]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// One update. `grads[i]` belongs to `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, x) in p.as_mut_slice().iter_mut().enumerate() {
                m[j] = round(self.beta1 * m[j] + (1.0 - self.beta1) * g[j]);
                v[j] = round(self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j]);
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x = round(*x - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

#[inline]
fn round(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let mut opt = Adam::new(0.1, &[&p]);
        opt.update(&mut [&mut p], &[Matrix::row_vector(&[3.0, -0.5])]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut p = Matrix::row_vector(&[0.25, 0.5]);
        let before = p.clone();
        let mut opt = Adam::new(0.0, &[&p]);
        for _ in 0..5 {
            opt.update(&mut [&mut p], &[Matrix::row_vector(&[1.0, -1.0])]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn state_is_f32_representable() {
        let mut p = Matrix::row_vector(&[0.1f32 as f64]);
        let mut opt = Adam::new(1e-3, &[&p]);
        opt.update(&mut [&mut p], &[Matrix::row_vector(&[0.3])]);
        for x in [p.get(0, 0), opt.m[0].get(0, 0), opt.v[0].get(0, 0)] {
            assert_eq!(x, x as f32 as f64);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Matrix::row_vector(&[3.0, -4.0]);
        let mut opt = Adam::new(0.05, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.update(&mut [&mut p], &[g]);
        }
        assert!(p.max_abs() < 1e-2, "{p:?}");
    }
}
