use crate::real::Real;
use crate::tensor::{Array, Dims5, Tensor5D};

pub fn random_tensor<T: Real>(dims: Dims5, seed: u64) -> Tensor5D<T> {
    Tensor5D::randn(dims, seed)
}

pub fn random_array<T: Real>(shape: Vec<usize>, seed: u64) -> Array<T> {
    let n: usize = shape.iter().product();
    let t = Tensor5D::<T>::randn(Dims5::new(1, 1, 1, 1, n), seed);
    Array::new(shape, t.into_data()).unwrap()
}
