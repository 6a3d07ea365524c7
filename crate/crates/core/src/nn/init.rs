use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Scalar, Tensor};

/// Xavier/Glorot uniform initialisation of a 2-d tensor.
///
/// Values are drawn from `U(−b, b)` with `b = sqrt(6 / (fan_in + fan_out))`,
/// where the shape is `[fan_out, fan_in]`.
pub fn xavier_init<T: Scalar>(shape: [usize; 2], seed: u64) -> Tensor<T> {
    xavier_with(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

pub fn xavier_with<T: Scalar>(rng: &mut impl Rng, shape: [usize; 2]) -> Tensor<T> {
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("xavier shape")
}

/// Seeded source of initial parameter values used while building a model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn xavier<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        xavier_with(&mut self.rng, [rows, cols])
    }

    /// Xavier-initialised convolution kernel `[kh, kw, c_in, c_out]`.
    pub fn kernel<T: Scalar>(&mut self, kh: usize, kw: usize, c_in: usize, c_out: usize) -> Tensor<T> {
        let fan_in = kh * kw * c_in;
        let fan_out = kh * kw * c_out;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..kh * kw * c_in * c_out).map(|_| T::of(self.rng.random_range(-bound..bound))).collect();
        Tensor::new(vec![kh, kw, c_in, c_out], data).expect("kernel shape")
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_seeding() {
        let t: Tensor<f64> = xavier_init([20, 30], 4);
        let bound = (6.0f64 / 50.0).sqrt();
        assert_eq!(t.shape(), &[20, 30]);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.9 * bound));
        assert_eq!(t, xavier_init([20, 30], 4));
        assert_ne!(t, xavier_init([20, 30], 5));
    }

    #[test]
    fn kernel_uses_receptive_field_fan() {
        let k: Tensor<f32> = Init::new(1).kernel(3, 3, 2, 4);
        assert_eq!(k.shape(), &[3, 3, 2, 4]);
        let bound = (6.0f32 / 54.0).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
    }
}
