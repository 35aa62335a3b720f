use crate::error::{arg_err, Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments, one accumulator pair per trainable
/// parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let ids = store.trainable_ids();
        let zeros: Vec<Tensor<T>> = ids
            .iter()
            .map(|&id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return arg_err("adam", format!("learning rate {lr} is negative"));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for ((&id, m), v) in self.ids.iter().zip(&mut self.m).zip(&mut self.v) {
            let p = store.get_mut(id);
            let (w, g) = (p.value.data_mut(), p.grad.data());
            if g.len() != w.len() {
                return crate::error::shape_err(
                    "adam",
                    format!("gradient of `{}` has the wrong size", p.name),
                );
            }
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                if !upd.is_finite() {
                    return Err(Error::NonFinite { op: "adam" });
                }
                *w -= upd;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::from_f64(&[1], &[v]).unwrap(), true);
        store.get_mut(id).grad = Tensor::from_f64(&[1], &[g]).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut store, id) = scalar_store(0.7, 0.0);
        let mut opt = Adam::new(&store);
        for _ in 0..10 {
            opt.step(&mut store, 1e-2).unwrap();
        }
        assert_eq!(store.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(1.0, 1.0);
        let mut opt = Adam::new(&store);
        opt.step(&mut store, 1e-3).unwrap();
        let moved = 1.0 - store.value(id).item();
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn nonfinite_gradient_is_rejected() {
        let (mut store, _) = scalar_store(1.0, f64::NAN);
        assert!(Adam::new(&store).step(&mut store, 1e-3).is_err());
    }
}
