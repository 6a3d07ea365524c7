use super::Init;
use crate::{ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Affine map `x · Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.xavier(output, input))?;
        let b = if bias { Some(store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?) } else { None };
        Ok(Linear { w, b, input, output })
    }

    /// Applies the map to each row of `x: [batch × in]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul_t(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Word embedding matrix `E: [d × |vocab|]`; column `w` embeds word id `w`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, vocab: usize, init: &mut Init) -> Result<Self> {
        let table = store.add(name, init.xavier(dim, vocab))?;
        Ok(Embedding { table, dim, vocab })
    }

    /// Embeddings of `ids` as rows `[ids.len() × d]`.
    pub fn lookup<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.table);
        tape.gather_cols(table, ids)
    }
}
