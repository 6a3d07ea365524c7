//! Input and output semantic attention over detected concept embeddings, and
//! the attention regularizer `g`.

use crate::nn::Init;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Parameters of both attentions. `d` is the word-embedding width, `D` the
/// language-model hidden width.
#[derive(Clone, Debug)]
pub struct AttnParams {
    /// `W_γ`, `d × d`.
    pub w_gamma: ParamId,
    /// `W_x`, `D × d`.
    pub w_x: ParamId,
    /// `w_{x,a}`, length `d`.
    pub w_xa: ParamId,
    /// `W_β`, `D × d`; absent for heads that only use input attention.
    pub w_beta: Option<ParamId>,
    /// `w_{h,a}`, length `D`.
    pub w_ha: Option<ParamId>,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl AttnParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        with_output: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let w_gamma = store.add(format!("{name}.w_gamma"), init.xavier(embed_dim, embed_dim))?;
        let w_x = store.add(format!("{name}.w_x"), init.xavier(hidden, embed_dim))?;
        let w_xa = store.add(format!("{name}.w_xa"), Tensor::ones(vec![embed_dim]))?;
        let (w_beta, w_ha) = if with_output {
            (
                Some(store.add(format!("{name}.w_beta"), init.xavier(hidden, embed_dim))?),
                Some(store.add(format!("{name}.w_ha"), Tensor::ones(vec![hidden]))?),
            )
        } else {
            (None, None)
        };
        Ok(AttnParams { w_gamma, w_x, w_xa, w_beta, w_ha, embed_dim, hidden })
    }
}

fn check_concepts<T: Scalar>(tape: &Tape<T>, concepts: Var, d: usize) -> Result<usize> {
    let s = tape.shape(concepts);
    if s.len() != 2 || s[1] != d {
        return Err(Error::dim(format!("concept embeddings must be [K × {d}], got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::usage("empty concept set"));
    }
    Ok(s[0])
}

/// Input attention for a batch of previous-word embeddings `emb: [T × d]` and
/// concepts `a: [K × d]`. Returns `x: [T × D]` and `γ: [T × K]`.
pub fn input_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttnParams,
    emb: Var,
    concepts: Var,
) -> Result<(Var, Var)> {
    check_concepts(tape, concepts, p.embed_dim)?;
    let w_gamma = tape.param(store, p.w_gamma);
    let proj = tape.matmul(emb, w_gamma)?;
    let logits = tape.matmul_t(proj, concepts)?;
    let gamma = tape.softmax(logits, 1)?;
    let mix = tape.matmul(gamma, concepts)?;
    let w_xa = tape.param(store, p.w_xa);
    let gated = tape.mul_gain(mix, w_xa)?;
    let sum = tape.add(emb, gated)?;
    let w_x = tape.param(store, p.w_x);
    let x = tape.matmul_t(sum, w_x)?;
    Ok((x, gamma))
}

/// Output attention for hidden rows `h: [T × D]`. Returns `p: [T × D]` and `β: [T × K]`.
pub fn output_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttnParams,
    h: Var,
    concepts: Var,
) -> Result<(Var, Var)> {
    check_concepts(tape, concepts, p.embed_dim)?;
    let (Some(wb), Some(wha)) = (p.w_beta, p.w_ha) else {
        return Err(Error::usage("attention parameters were built without the output branch"));
    };
    let ta = tape.tanh(concepts);
    let w_beta = tape.param(store, wb);
    let keys = tape.matmul_t(ta, w_beta)?;
    let logits = tape.matmul_t(h, keys)?;
    let beta = tape.softmax(logits, 1)?;
    let mix = tape.matmul(beta, keys)?;
    let w_ha = tape.param(store, wha);
    let gated = tape.mul_gain(mix, w_ha)?;
    let out = tape.add(h, gated)?;
    Ok((out, beta))
}

/// `g(A) = sqrt(Σ_i (Σ_t A_ti)²) + (Σ_t sqrt(Σ_i A_ti))²` for a nonnegative
/// `A: [T × K]`. Square roots of zero have a zero subgradient.
pub fn attention_regularizer<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("regularizer expects a [T × K] matrix, got {s:?}")));
    }
    if tape.data(a).iter().any(|&x| x < T::zero()) {
        return Err(Error::usage("attention matrix has negative entries"));
    }
    let cols = tape.sum_axis(a, 0)?;
    let sq = tape.square(cols);
    let ss = tape.sum(sq);
    let p_term = tape.sqrt(ss)?;
    let rows = tape.sum_axis(a, 1)?;
    let roots = tape.sqrt(rows)?;
    let rs = tape.sum(roots);
    let q_term = tape.square(rs);
    tape.add(p_term, q_term)
}

/// Stacks per-step attention rows `[1 × K]` into `[T × K]`.
pub fn stack_rows<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::usage("no attention rows to stack"));
    }
    tape.concat(rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(k: usize) -> (ParamStore<f64>, AttnParams, Tape<f64>, Var, Var) {
        let mut store = ParamStore::new();
        let p = AttnParams::new(&mut store, "att", 4, 5, true, &mut Init::new(9)).unwrap();
        let mut tape = Tape::new();
        let mut init = Init::new(4);
        let emb = tape.constant(init.xavier(2, 4));
        let concepts = tape.constant(init.xavier(k, 4));
        (store, p, tape, emb, concepts)
    }

    #[test]
    fn singleton_concept_gets_full_weight() {
        let (store, p, mut tape, emb, concepts) = setup(1);
        let (_, gamma) = input_attention(&mut tape, &store, &p, emb, concepts).unwrap();
        assert!(tape.data(gamma).iter().all(|&g| (g - 1.0).abs() < 1e-15));
        let h = tape.constant(Tensor::full(vec![2, 5], 0.2));
        let (_, beta) = output_attention(&mut tape, &store, &p, h, concepts).unwrap();
        assert!(tape.data(beta).iter().all(|&b| (b - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_w_gamma_is_uniform() {
        let (mut store, p, mut tape, emb, concepts) = setup(3);
        store.set_values("att.w_gamma", &Tensor::zeros(vec![4, 4])).unwrap();
        let (_, gamma) = input_attention(&mut tape, &store, &p, emb, concepts).unwrap();
        assert!(tape.data(gamma).iter().all(|&g| (g - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_gates_bypass_the_concepts() {
        let (mut store, p, mut tape, emb, concepts) = setup(3);
        store.set_values("att.w_xa", &Tensor::zeros(vec![4])).unwrap();
        store.set_values("att.w_ha", &Tensor::zeros(vec![5])).unwrap();
        let (x, _) = input_attention(&mut tape, &store, &p, emb, concepts).unwrap();
        let w_x = tape.param(&store, p.w_x);
        let direct = tape.matmul_t(emb, w_x).unwrap();
        assert_eq!(tape.data(x), tape.data(direct));
        let h = tape.constant(Tensor::full(vec![2, 5], 0.7));
        let (out, _) = output_attention(&mut tape, &store, &p, h, concepts).unwrap();
        assert_eq!(tape.data(out), tape.data(h));
    }

    #[test]
    fn empty_concepts_are_rejected() {
        let (store, p, mut tape, emb, _) = setup(2);
        let bad = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(input_attention(&mut tape, &store, &p, emb, bad).is_err());
    }

    #[test]
    fn regularizer_small_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![3, 2]));
        let g = attention_regularizer(&mut tape, z).unwrap();
        assert_eq!(tape.item(g).unwrap(), 0.0);
        let one = tape.constant(Tensor::ones(vec![1, 1]));
        let g = attention_regularizer(&mut tape, one).unwrap();
        assert_eq!(tape.item(g).unwrap(), 2.0);
        let neg = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -0.1]).unwrap());
        assert!(matches!(attention_regularizer(&mut tape, neg), Err(Error::Usage(_))));
    }

    #[test]
    fn regularizer_gradient_is_finite_at_zero_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.3, 0.7]).unwrap().with_grad());
        let g = attention_regularizer(&mut tape, a).unwrap();
        tape.backward(g).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|x| x.is_finite()));
    }
}
