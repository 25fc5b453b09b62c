use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Mat;

/// Parameter containers expose their tensors in a fixed order so that
/// gradients, optimizer state and checkpoints line up by position.
pub trait NamedParams {
    fn named(&self) -> Vec<(String, &Mat)>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Uniform Glorot initialization.
pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Copies of every tensor, in `named` order.
pub fn snapshot<P: NamedParams + ?Sized>(p: &P) -> Vec<Mat> {
    p.named().into_iter().map(|(_, m)| m.clone()).collect()
}

/// Overwrites every tensor with `values` (same order and shapes as `named`).
pub fn assign<P: NamedParams + ?Sized>(p: &mut P, values: &[Mat]) {
    let targets = p.params_mut();
    assert_eq!(targets.len(), values.len(), "parameter count mismatch");
    for (t, v) in targets.into_iter().zip(values) {
        assert_eq!(t.dim(), v.dim(), "parameter shape mismatch");
        t.assign(v);
    }
}
