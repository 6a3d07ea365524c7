use super::{Init, Linear};
use crate::{Error, ParamStore, Result, Scalar, Tape, Var};

/// Elementwise maximum over `k ≥ 2` affine pieces of the same input.
#[derive(Clone, Debug)]
pub struct Maxout {
    pub pieces: Vec<Linear>,
}

impl Maxout {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        pieces: usize,
        init: &mut Init,
    ) -> Result<Self> {
        if pieces < 2 {
            return Err(Error::usage(format!("maxout needs at least 2 pieces, got {pieces}")));
        }
        let pieces = (0..pieces)
            .map(|k| Linear::new(store, &format!("{name}.piece{k}"), input, output, true, init))
            .collect::<Result<_>>()?;
        Ok(Maxout { pieces })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        maxout(tape, store, x, &self.pieces)
    }
}

/// Maximum over the affine pieces; ties route the gradient to the earliest piece.
pub fn maxout<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, pieces: &[Linear]) -> Result<Var> {
    if pieces.len() < 2 {
        return Err(Error::usage(format!("maxout needs at least 2 pieces, got {}", pieces.len())));
    }
    let mut acc = pieces[0].forward(tape, store, x)?;
    for piece in &pieces[1..] {
        let y = piece.forward(tape, store, x)?;
        acc = tape.maximum(acc, y)?;
    }
    Ok(acc)
}
