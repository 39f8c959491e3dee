//! Adam with the CycleGAN recipe defaults (lr 2e-4, beta1 0.5).

use super::params::{GradStore, ParamId, ParamStore};
use super::scalar::Scalar;
use ndarray::ArrayD;

#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    ids: Vec<ParamId>,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(store: &ParamStore<E>, ids: Vec<ParamId>, lr: f64, beta1: f64) -> Self {
        let m = ids
            .iter()
            .map(|id| ArrayD::zeros(store.get(*id).value.raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|id| ArrayD::zeros(store.get(*id).value.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            ids,
            m,
            v,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update over this optimizer's parameter set. Parameters without a
    /// gradient in `grads` are left untouched (their moments do not advance).
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &GradStore<E>) {
        self.t += 1;
        let b1 = E::of_f64(self.beta1);
        let b2 = E::of_f64(self.beta2);
        let one = E::one();
        let lr = E::of_f64(self.lr);
        let eps = E::of_f64(self.eps);
        let bc1 = E::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::of_f64(1.0 - self.beta2.powi(self.t as i32));
        for (k, id) in self.ids.iter().enumerate() {
            let g = match grads.get(*id) {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = &mut store.get_mut(*id).value;
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    // checkpoint plumbing
    pub fn moments(&self) -> (&[ArrayD<E>], &[ArrayD<E>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, t: u64, m: Vec<ArrayD<E>>, v: Vec<ArrayD<E>>) {
        assert_eq!(m.len(), self.ids.len());
        assert_eq!(v.len(), self.ids.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_moves_against_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.add("p", ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let mut opt = Adam::new(&store, vec![p], 0.1, 0.5);
        let mut grads = GradStore::new(store.len());
        grads.accumulate(p, &ArrayD::from_elem(IxDyn(&[3]), 2.0));
        opt.step(&mut store, &grads);
        for &v in store.get(p).value.iter() {
            assert!(v < 1.0);
        }
    }

    #[test]
    fn missing_grad_leaves_param_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let p = store.add("p", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        let q = store.add("q", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        let mut opt = Adam::new(&store, vec![p, q], 0.1, 0.5);
        let mut grads = GradStore::new(store.len());
        grads.accumulate(p, &ArrayD::from_elem(IxDyn(&[2]), 1.0));
        opt.step(&mut store, &grads);
        assert!(store.get(p).value[0] < 0.5);
        assert_eq!(store.get(q).value[0], 0.5);
    }
}
