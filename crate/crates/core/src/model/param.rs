use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A named tensor owned by a layer, with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    /// Running statistics are stored as non-trainable params.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let d = Uniform::new_inclusive(-bound, bound);
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), |_| d.sample(rng)))
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let d = Normal::new(0.0, std).expect("finite std");
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), |_| d.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn v(&self) -> &[f64] {
        self.value.as_slice().expect("standard layout")
    }

    pub fn g_mut(&mut self) -> &mut [f64] {
        self.grad.as_slice_mut().expect("standard layout")
    }
}

/// Anything holding named parameters.
pub trait Module {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Total trainable scalar count.
pub fn count_parameters(m: &dyn Module) -> usize {
    m.params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.len())
        .sum()
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, items: Vec<(String, &'a mut Param)>) -> Vec<(String, &'a mut Param)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
