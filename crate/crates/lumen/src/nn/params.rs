//! Parameter storage shared by all four networks, plus gradient buffers.

use super::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: ArrayD<E>,
}

#[derive(Clone, Debug)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight tensor drawn from N(0, 0.02), the CycleGAN init.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::sample_normal(rng) * E::of_f64(std))
            .collect();
        self.add(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), E::one()))
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total element count over a set of parameters.
    pub fn count_elements(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.get(*id).value.len()).sum()
    }
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator indexed by `ParamId`.
pub struct GradStore<E> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Scalar> GradStore<E> {
    pub fn new(n_params: usize) -> Self {
        GradStore {
            grads: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &ArrayD<E>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
