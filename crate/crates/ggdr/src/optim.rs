//! Adam optimizer over a named parameter set.

use crate::autodiff::Tensor;
use crate::nets::ParamSet;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.tensor(i).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            t: 0,
            m,
            v,
        }
    }

    /// One update; `grads[i]` pairs with parameter entry `i`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.tensor_mut(i);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_lr_signwise() {
        // with beta1 = 0 and bias correction the first step is lr * sign(g)
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.01, 0.0, 0.99, &p);
        let g = Tensor::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.25]).unwrap();
        opt.step(&mut p, &[g]);
        let w = p.tensor(0);
        assert!((w[[0]] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[[1]] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_elem(IxDyn(&[3]), 0.7));
        let mut opt = Adam::new(0.1, 0.0, 0.99, &p);
        opt.step(&mut p, &[Tensor::zeros(IxDyn(&[3]))]);
        assert_eq!(p.tensor(0), &Tensor::from_elem(IxDyn(&[3]), 0.7));
    }
}
