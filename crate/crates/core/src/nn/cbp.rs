//! Count-sketch compact bilinear pooling.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Scalar, Tape, Var};

/// Fixed (never trained) count-sketch projections for two input modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchParams {
    pub hash_a: Arc<Vec<usize>>,
    pub sign_a: Arc<Vec<i8>>,
    pub hash_b: Arc<Vec<usize>>,
    pub sign_b: Arc<Vec<i8>>,
    pub d_out: usize,
}

impl SketchParams {
    /// Draws uniform hashes in `[0, d_out)` and uniform `±1` signs from `seed`.
    pub fn random(da: usize, db: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> (Vec<usize>, Vec<i8>) {
            let h = (0..n).map(|_| rng.random_range(0..d_out)).collect();
            let s = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            (h, s)
        };
        let (hash_a, sign_a) = draw(da);
        let (hash_b, sign_b) = draw(db);
        SketchParams {
            hash_a: Arc::new(hash_a),
            sign_a: Arc::new(sign_a),
            hash_b: Arc::new(hash_b),
            sign_b: Arc::new(sign_b),
            d_out,
        }
    }

    /// Builds sketches from explicit tables, validating ranges and signs.
    pub fn from_parts(
        hash_a: Vec<usize>,
        sign_a: Vec<i8>,
        hash_b: Vec<usize>,
        sign_b: Vec<i8>,
        d_out: usize,
    ) -> Result<Self> {
        if hash_a.len() != sign_a.len() || hash_b.len() != sign_b.len() {
            return Err(Error::dim("hash and sign tables differ in length"));
        }
        if hash_a.iter().chain(&hash_b).any(|&h| h >= d_out) {
            return Err(Error::dim(format!("sketch index outside [0, {d_out})")));
        }
        if sign_a.iter().chain(&sign_b).any(|&s| s != 1 && s != -1) {
            return Err(Error::usage("sketch signs must be ±1"));
        }
        Ok(SketchParams {
            hash_a: Arc::new(hash_a),
            sign_a: Arc::new(sign_a),
            hash_b: Arc::new(hash_b),
            sign_b: Arc::new(sign_b),
            d_out,
        })
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.hash_a.len(), self.hash_b.len())
    }
}

/// `ψ_a(a) ⊛ ψ_b(b)`: the count sketches of both inputs combined by circular
/// convolution, an unbiased low-dimensional projection of `vec(a ⊗ b)`.
pub fn compact_bilinear<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, sk: &SketchParams) -> Result<Var> {
    let sa = tape.count_sketch(a, sk.hash_a.clone(), sk.sign_a.clone(), sk.d_out)?;
    let sb = tape.count_sketch(b, sk.hash_b.clone(), sk.sign_b.clone(), sk.d_out)?;
    tape.circular_convolve(sa, sb)
}
