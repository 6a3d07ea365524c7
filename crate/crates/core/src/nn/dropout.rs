use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Scalar, Tape, Tensor, Var};

/// Inverted dropout on a tape; active only on training tapes.
pub fn dropout_apply<T: Scalar>(tape: &mut Tape<T>, x: Var, rate: f64) -> Result<Var> {
    tape.dropout(x, rate)
}

/// Inverted dropout on a standalone tensor.
///
/// In training mode each element is zeroed with probability `rate` and the
/// survivors are scaled by `1 / (1 − rate)`; otherwise the input is returned unchanged.
pub fn dropout_tensor<T: Scalar>(x: &Tensor<T>, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.random::<f64>() < rate { T::zero() } else { v * keep })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
