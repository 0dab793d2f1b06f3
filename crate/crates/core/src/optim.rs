//! SGD with heavy-ball momentum and decoupled-from-clipping weight decay.

use crate::autodiff::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Scalar = f64> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// One update from the gradients currently held in `store`:
    /// `v ← μv + (g + wd·w)`, `w ← w − lr·v`. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let decay = if p.decay {
                self.weight_decay
            } else {
                T::zero()
            };
            let w = p.value.data_mut();
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(p.grad.data()).zip(w.iter_mut()) {
                *vi = self.momentum * *vi + gi + decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_recurrence() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::vector(vec![1.0]));
        let mut opt = Sgd::new(&store, 0.1, 0.9, 0.0);
        store.get_mut(id).grad = Tensor::vector(vec![1.0]);
        opt.step(&mut store);
        assert!((store.value(id).data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut store);
        // v = 0.9·1 + 1 = 1.9
        assert!((store.value(id).data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn decay_only_where_flagged() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(vec![2.0]));
        let b = store.add("b", Tensor::vector(vec![2.0]));
        store.get_mut(a).decay = true;
        let mut opt = Sgd::new(&store, 1.0, 0.0, 0.5);
        opt.step(&mut store);
        assert_eq!(store.value(a).data()[0], 1.0);
        assert_eq!(store.value(b).data()[0], 2.0);
    }
}
