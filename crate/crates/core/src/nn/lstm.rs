//! Stacked LSTM cells with optional recurrent layer normalisation.

use super::{dropout_apply, Init};
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmConfig {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Number of stacked layers; layer `l > 0` consumes the hidden state of layer `l − 1`.
    pub depth: usize,
    pub layer_norm: bool,
    /// Initial value of the forget-gate bias.
    pub forget_bias: f64,
    /// Dropout applied between stacked layers on training tapes.
    pub dropout: f64,
}

impl LstmConfig {
    pub fn new(input_size: usize, hidden_size: usize) -> Self {
        LstmConfig { input_size, hidden_size, depth: 1, layer_norm: true, forget_bias: 1.0, dropout: 0.0 }
    }
}

/// Parameter ids of one LSTM layer. Gate order within the `4H` blocks is `i, f, o, g`.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    /// Gain and bias of the input-to-gate and hidden-to-gate normalisations.
    pub norm: Option<[ParamId; 4]>,
    pub input_size: usize,
}

/// The parameters of a (possibly stacked) LSTM.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub config: LstmConfig,
    pub layers: Vec<LstmLayer>,
}

/// Hidden and cell state of each layer, bottom first.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    /// Hidden state of the top layer.
    pub fn top(&self) -> Var {
        *self.h.last().expect("non-empty state")
    }
}

/// Intermediate values of a single-layer step, exposed for inspection.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub h: Var,
    pub c: Var,
    /// Normalised input-to-gate and hidden-to-gate pre-activations (before gain/bias).
    pub normalized: Option<(Var, Var)>,
    pub gates: Var,
}

impl Lstm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: LstmConfig, init: &mut Init) -> Result<Self> {
        if config.depth == 0 || config.hidden_size == 0 || config.input_size == 0 {
            return Err(Error::usage(format!("degenerate LSTM configuration {config:?}")));
        }
        let h = config.hidden_size;
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let input_size = if l == 0 { config.input_size } else { h };
            let p = format!("{name}.l{l}");
            let w_x = store.add(format!("{p}.w_x"), init.xavier(4 * h, input_size))?;
            let w_h = store.add(format!("{p}.w_h"), init.xavier(4 * h, h))?;
            let mut b = vec![T::zero(); 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = T::of(config.forget_bias));
            let bias = store.add(format!("{p}.b"), Tensor::new(vec![4 * h], b)?)?;
            let norm = if config.layer_norm {
                Some([
                    store.add(format!("{p}.ln_x.gain"), Tensor::ones(vec![4 * h]))?,
                    store.add(format!("{p}.ln_x.bias"), Tensor::zeros(vec![4 * h]))?,
                    store.add(format!("{p}.ln_h.gain"), Tensor::ones(vec![4 * h]))?,
                    store.add(format!("{p}.ln_h.bias"), Tensor::zeros(vec![4 * h]))?,
                ])
            } else {
                None
            };
            layers.push(LstmLayer { w_x, w_h, bias, norm, input_size });
        }
        Ok(Lstm { config, layers })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Zero state for `batch` parallel sequences.
    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> LstmState {
        let z = tape.constant(Tensor::zeros(vec![batch, self.config.hidden_size]));
        LstmState { h: vec![z; self.layers.len()], c: vec![z; self.layers.len()] }
    }

    /// State whose hidden vectors are `h0` in every layer and whose cells are zero.
    pub fn state_from_hidden<T: Scalar>(&self, tape: &mut Tape<T>, h0: &[Var]) -> Result<LstmState> {
        if h0.len() != self.layers.len() {
            return Err(Error::dim(format!("{} initial hidden states for a {}-layer LSTM", h0.len(), self.layers.len())));
        }
        let batch = tape.shape(h0[0])[0];
        let z = tape.constant(Tensor::zeros(vec![batch, self.config.hidden_size]));
        Ok(LstmState { h: h0.to_vec(), c: vec![z; self.layers.len()] })
    }

    /// One step of a single layer on rows `x: [batch × in]`.
    pub fn layer_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: usize,
        x: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<StepTrace> {
        let p = &self.layers[layer];
        let hs = self.config.hidden_size;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != p.input_size {
            return Err(Error::dim(format!("LSTM layer {layer} expects [batch × {}], got {xs:?}", p.input_size)));
        }
        let batch = xs[0];
        for s in [h_prev, c_prev] {
            if tape.shape(s) != [batch, hs] {
                return Err(Error::dim(format!("LSTM state {:?} does not match [{batch} × {hs}]", tape.shape(s))));
            }
        }
        let w_x = tape.param(store, p.w_x);
        let w_h = tape.param(store, p.w_h);
        let mut zx = tape.matmul_t(x, w_x)?;
        let mut zh = tape.matmul_t(h_prev, w_h)?;
        let mut normalized = None;
        if let Some([gx, bx, gh, bh]) = p.norm {
            let nx = tape.layer_norm(zx, T::of(LN_EPS));
            let nh = tape.layer_norm(zh, T::of(LN_EPS));
            normalized = Some((nx, nh));
            let (gx, bx, gh, bh) = (tape.param(store, gx), tape.param(store, bx), tape.param(store, gh), tape.param(store, bh));
            let sx = tape.mul_gain(nx, gx)?;
            zx = tape.add_bias(sx, bx)?;
            let sh = tape.mul_gain(nh, gh)?;
            zh = tape.add_bias(sh, bh)?;
        }
        let z = tape.add(zx, zh)?;
        let b = tape.param(store, p.bias);
        let z = tape.add_bias(z, b)?;
        let zi = tape.slice(z, 1, 0, hs)?;
        let zf = tape.slice(z, 1, hs, hs)?;
        let zo = tape.slice(z, 1, 2 * hs, hs)?;
        let zg = tape.slice(z, 1, 3 * hs, hs)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let o = tape.sigmoid(zo);
        let g = tape.tanh(zg);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(StepTrace { h, c, normalized, gates: z })
    }

    /// Advances every layer by one step.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, state: &LstmState) -> Result<LstmState> {
        if state.h.len() != self.layers.len() || state.c.len() != self.layers.len() {
            return Err(Error::dim("LSTM state depth does not match the network"));
        }
        let mut input = x;
        let mut next = LstmState { h: Vec::with_capacity(self.layers.len()), c: Vec::with_capacity(self.layers.len()) };
        for l in 0..self.layers.len() {
            if l > 0 {
                input = dropout_apply(tape, input, self.config.dropout)?;
            }
            let s = self.layer_step(tape, store, l, input, state.h[l], state.c[l])?;
            next.h.push(s.h);
            next.c.push(s.c);
            input = s.h;
        }
        Ok(next)
    }

    /// Runs over a sequence of inputs, returning the state after every step.
    pub fn run<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &[Var], init: LstmState) -> Result<Vec<LstmState>> {
        let mut state = init;
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(tape, store, x, &state)?;
            out.push(state.clone());
        }
        Ok(out)
    }
}

/// Bidirectional run: `fwd` reads left to right from `init_fwd`, `bwd` reads
/// right to left from `init_bwd`. Returns the top-layer hidden states of both
/// directions indexed by input position.
pub fn blstm_run<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    fwd: &Lstm,
    bwd: &Lstm,
    inputs: &[Var],
    init_fwd: LstmState,
    init_bwd: LstmState,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if inputs.is_empty() {
        return Err(Error::usage("bidirectional LSTM over an empty sequence"));
    }
    let forward: Vec<Var> = fwd.run(tape, store, inputs, init_fwd)?.iter().map(LstmState::top).collect();
    let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
    let mut backward: Vec<Var> = bwd.run(tape, store, &reversed, init_bwd)?.iter().map(LstmState::top).collect();
    backward.reverse();
    Ok((forward, backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn build(config: LstmConfig) -> (ParamStore<f64>, Lstm) {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "rnn", config, &mut Init::new(3)).unwrap();
        (store, lstm)
    }

    fn rows(tape: &mut Tape<f64>, batch: usize, width: usize, offset: f64) -> Var {
        let data = (0..batch * width).map(|i| ((i as f64 + offset) * 0.37).sin()).collect();
        tape.constant(Tensor::new(vec![batch, width], data).unwrap())
    }

    #[test]
    fn layer_norm_preactivations_are_standardised() {
        let (store, lstm) = build(LstmConfig::new(5, 6));
        let mut tape = Tape::new();
        let x = rows(&mut tape, 3, 5, 0.0);
        let h = rows(&mut tape, 3, 6, 4.0);
        let c = rows(&mut tape, 3, 6, 9.0);
        let s = lstm.layer_step(&mut tape, &store, 0, x, h, c).unwrap();
        let (nx, nh) = s.normalized.unwrap();
        for v in [nx, nh] {
            for row in tape.data(v).chunks(24) {
                let mean = row.iter().sum::<f64>() / 24.0;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
                assert!(mean.abs() < 1e-5, "{mean}");
                assert!((var - 1.0).abs() < 1e-3, "{var}");
            }
        }
    }

    #[test]
    fn forget_bias_is_initialised_on_the_forget_block() {
        let (store, _) = build(LstmConfig { forget_bias: 2.0, ..LstmConfig::new(2, 3) });
        let b = store.by_name("rnn.l0.b").unwrap().data();
        assert_eq!(b, &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stacked_state_shapes_and_errors() {
        let (store, lstm) = build(LstmConfig { depth: 2, ..LstmConfig::new(4, 3) });
        let mut tape = Tape::new();
        let x = rows(&mut tape, 2, 4, 1.0);
        let z = lstm.zero_state(&mut tape, 2);
        let out = lstm.run(&mut tape, &store, &[x, x, x], z.clone()).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].h.len(), 2);
        assert_eq!(tape.shape(out[2].top()), &[2, 3]);
        let bad = rows(&mut tape, 2, 5, 0.0);
        assert!(matches!(lstm.step(&mut tape, &store, bad, &z), Err(Error::Dimension(_))));
        assert!(lstm.state_from_hidden(&mut tape, &[out[0].top()]).is_err());
        assert!(Lstm::new(&mut ParamStore::<f64>::new(), "x", LstmConfig::new(0, 2), &mut Init::new(0)).is_err());
    }

    #[test]
    fn hidden_values_are_bounded() {
        let (store, lstm) = build(LstmConfig { layer_norm: false, ..LstmConfig::new(3, 4) });
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 3], 50.0));
        let z = lstm.zero_state(&mut tape, 1);
        let out = lstm.run(&mut tape, &store, &[x; 5], z).unwrap();
        assert!(tape.data(out[4].top()).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn blstm_aligns_backward_states_with_positions() {
        let mut store = ParamStore::new();
        let mut init = Init::new(8);
        let fwd = Lstm::new(&mut store, "f", LstmConfig::new(2, 3), &mut init).unwrap();
        let bwd = Lstm::new(&mut store, "b", LstmConfig::new(2, 3), &mut init).unwrap();
        let mut tape = Tape::<f64>::new();
        let xs: Vec<Var> = (0..4).map(|i| rows(&mut tape, 1, 2, i as f64)).collect();
        let (zf, zb) = (fwd.zero_state(&mut tape, 1), bwd.zero_state(&mut tape, 1));
        let (f, b) = blstm_run(&mut tape, &store, &fwd, &bwd, &xs, zf, zb.clone()).unwrap();
        assert_eq!((f.len(), b.len()), (4, 4));
        let last = bwd.step(&mut tape, &store, xs[3], &zb).unwrap();
        assert_eq!(tape.data(b[3]), tape.data(last.top()));
        assert!(blstm_run(&mut tape, &store, &fwd, &bwd, &[], zb.clone(), zb).is_err());
    }

    #[test]
    fn gradients_through_two_steps() {
        let (mut store, lstm) = build(LstmConfig { depth: 2, ..LstmConfig::new(3, 2) });
        let r = grad_check(&mut store, 1e-6, 1e-4, |tape, st| {
            let x0 = rows(tape, 2, 3, 0.0);
            let x1 = rows(tape, 2, 3, 7.0);
            let z = lstm.zero_state(tape, 2);
            let out = lstm.run(tape, st, &[x0, x1], z)?;
            let h = out[1].top();
            let c = out[1].c[1];
            let s = tape.mul(h, c)?;
            Ok(tape.sum(s))
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
