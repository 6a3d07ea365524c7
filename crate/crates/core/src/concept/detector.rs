use crate::nn::{Init, Linear, Lstm, LstmConfig, LstmState};
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Raw frame extents `(H, W, C)` as stored in feature files.
    pub input: (usize, usize, usize),
    /// Reduced grid `(gh, gw)`; one trace per cell.
    pub grid: (usize, usize),
    /// Reduced channel width `D'`.
    pub channels: usize,
    /// Trace LSTM width; must equal `channels`.
    pub hidden: usize,
    /// Width of the first attention convolution.
    pub attn_channels: usize,
    /// Number of candidate concept words `V`.
    pub vocab: usize,
    pub k: usize,
    pub depth: usize,
    pub layer_norm: bool,
    pub forget_bias: f64,
    pub dropout: f64,
}

impl DetectorConfig {
    /// Config for frames that already have the reduced shape.
    pub fn new(channels: usize, vocab: usize, k: usize) -> Self {
        DetectorConfig {
            input: (4, 4, channels),
            grid: (4, 4),
            channels,
            hidden: channels,
            attn_channels: 32,
            vocab,
            k,
            depth: 1,
            layer_norm: true,
            forget_bias: 1.0,
            dropout: 0.0,
        }
    }

    pub fn traces(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// True when raw frames differ from the reduced shape and need the reducer.
    pub fn needs_reducer(&self) -> bool {
        self.input != (self.grid.0, self.grid.1, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden != self.channels {
            return Err(Error::Unsupported(format!(
                "trace hidden size {} must equal the reduced channel width {}",
                self.hidden, self.channels
            )));
        }
        if self.k == 0 || self.k > self.vocab {
            return Err(Error::usage(format!("K = {} outside 1..={}", self.k, self.vocab)));
        }
        if self.channels == 0 || self.attn_channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 || self.depth == 0 {
            return Err(Error::usage("detector extents must be positive"));
        }
        if self.needs_reducer() {
            pool_schedule(self.input.0, self.grid.0)?;
            pool_schedule(self.input.1, self.grid.1)?;
        }
        Ok(())
    }
}

/// Padded extents before each 2×2 pooling that takes `from` down to `to`.
fn pool_schedule(from: usize, to: usize) -> Result<Vec<usize>> {
    if from < to {
        return Err(Error::dim(format!("spatial extent {from} is smaller than the {to}-cell grid")));
    }
    let mut steps = Vec::new();
    let mut e = from;
    while e > to {
        let half = e.div_ceil(2);
        if half < to {
            return Err(Error::Unsupported(format!("extent {from} does not pool down to {to} by halving")));
        }
        steps.push(2 * half);
        e = half;
    }
    Ok(steps)
}

/// 2×2 max-pooling (with bottom/right zero padding to even extents) followed
/// by a 3×3 convolution to `D'` channels.
#[derive(Clone, Debug)]
pub struct Reducer {
    pub kernel: ParamId,
    pub bias: ParamId,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl Reducer {
    /// Reduces `[N, H, W, C]` to `[N, gh, gw, D']`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let mut x = frames;
        let steps = self.rows.len().max(self.cols.len());
        for s in 0..steps {
            let shape = tape.shape(x).to_vec();
            let ph = self.rows.get(s).copied().unwrap_or(shape[1]);
            let pw = self.cols.get(s).copied().unwrap_or(shape[2]);
            if (ph, pw) != (shape[1], shape[2]) {
                x = tape.pad_hw(x, ph, pw)?;
            }
            let wh = if s < self.rows.len() { 2 } else { 1 };
            let ww = if s < self.cols.len() { 2 } else { 1 };
            x = tape.pool2d(x, crate::tensor::PoolKind::Max, Some((wh, ww)))?;
        }
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k)?;
        tape.add_bias(y, b)
    }
}

/// Per-trace attention maps and LSTM state after some step.
#[derive(Clone, Debug)]
pub struct TraceState {
    /// `[L × cells]`, one attention map per row.
    pub alpha: Var,
    pub lstm: LstmState,
}

impl TraceState {
    /// One-hot maps (trace `l` on cell `l`, row-major) with zero hidden and cell states.
    pub fn initial<T: Scalar>(tape: &mut Tape<T>, det: &ConceptDetector) -> Self {
        let l = det.config.traces();
        let mut eye = vec![T::zero(); l * l];
        (0..l).for_each(|i| eye[i * l + i] = T::one());
        let alpha = tape.constant(Tensor::new(vec![l, l], eye).expect("square"));
        TraceState { alpha, lstm: det.lstm.zero_state(tape, l) }
    }

    pub fn hidden(&self) -> Var {
        self.lstm.top()
    }
}

/// Everything produced by one detector pass.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Attention maps for steps `1..=N`, each `[L × cells]`.
    pub alphas: Vec<Var>,
    /// Final trace hiddens `[L × D']`.
    pub hidden: Var,
    /// Confidences `[1 × V]`.
    pub confidence: Var,
}

/// Parameters of the detector. All traces share one LSTM and one attention stack.
#[derive(Clone, Debug)]
pub struct ConceptDetector {
    pub config: DetectorConfig,
    pub reducer: Option<Reducer>,
    pub lstm: Lstm,
    pub attn_conv: ParamId,
    pub attn_bias: ParamId,
    pub score_conv: ParamId,
    pub score_bias: ParamId,
    pub head: Linear,
}

impl ConceptDetector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: DetectorConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let reducer = if config.needs_reducer() {
            let kernel = store.add(format!("{name}.reduce.kernel"), init.kernel(3, 3, config.input.2, d))?;
            let bias = store.add(format!("{name}.reduce.bias"), Tensor::zeros(vec![d]))?;
            Some(Reducer {
                kernel,
                bias,
                rows: pool_schedule(config.input.0, config.grid.0)?,
                cols: pool_schedule(config.input.1, config.grid.1)?,
            })
        } else {
            None
        };
        let lstm_cfg = LstmConfig {
            input_size: d,
            hidden_size: config.hidden,
            depth: config.depth,
            layer_norm: config.layer_norm,
            forget_bias: config.forget_bias,
            dropout: config.dropout,
        };
        let lstm = Lstm::new(store, &format!("{name}.trace"), lstm_cfg, init)?;
        let c = config.attn_channels;
        let attn_conv = store.add(format!("{name}.attn.conv1"), init.kernel(3, 3, d, c))?;
        let attn_bias = store.add(format!("{name}.attn.conv1.b"), Tensor::zeros(vec![c]))?;
        let score_conv = store.add(format!("{name}.attn.conv2"), init.kernel(1, 1, c, 1))?;
        let score_bias = store.add(format!("{name}.attn.conv2.b"), Tensor::zeros(vec![1]))?;
        let head = Linear::new(store, &format!("{name}.head"), config.traces() * config.hidden, config.vocab, true, init)?;
        Ok(ConceptDetector { config, reducer, lstm, attn_conv, attn_bias, score_conv, score_bias, head })
    }

    /// Puts raw frames `[N·H·W·C]` on the tape and reduces them to `[N, gh, gw, D']`.
    pub fn reduce<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let (h, w, c) = self.config.input;
        let s = tape.shape(frames).to_vec();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::dim(format!("detector expects frames [N, {h}, {w}, {c}], got {s:?}")));
        }
        match &self.reducer {
            Some(r) => r.forward(tape, store, frames),
            None => Ok(frames),
        }
    }

    /// Attention over one reduced frame `[gh, gw, D']` followed by the shared LSTM step.
    pub fn trace_step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, state: &TraceState, frame: Var) -> Result<TraceState> {
        let (gh, gw) = self.config.grid;
        let (l, d) = (self.config.traces(), self.config.channels);
        if tape.shape(frame) != [gh, gw, d] {
            return Err(Error::dim(format!("frame {:?} does not match [{gh}, {gw}, {d}]", tape.shape(frame))));
        }
        let h = state.hidden();
        if tape.shape(h) != [l, self.config.hidden] {
            return Err(Error::usage("trace state was not initialised for this detector"));
        }
        let e = tape.grid_modulate(frame, h)?;
        let k1 = tape.param(store, self.attn_conv);
        let b1 = tape.param(store, self.attn_bias);
        let k2 = tape.param(store, self.score_conv);
        let b2 = tape.param(store, self.score_bias);
        let z = tape.conv2d(e, k1)?;
        let z = tape.add_bias(z, b1)?;
        let z = tape.relu(z);
        let s = tape.conv2d(z, k2)?;
        let s = tape.add_bias(s, b2)?;
        let s = tape.reshape(s, &[l, gh * gw])?;
        let alpha = tape.softmax(s, 1)?;
        let cells = tape.reshape(frame, &[gh * gw, d])?;
        let context = tape.matmul(alpha, cells)?;
        let lstm = self.lstm.step(tape, store, context, &state.lstm)?;
        Ok(TraceState { alpha, lstm })
    }

    /// Full pass over a clip given as a `[N, H, W, C]` tape value.
    ///
    /// A priming step feeds each trace its one-hot cell of the first frame so
    /// the traces start from distinct hidden states.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: Var) -> Result<Rollout> {
        let v = self.reduce(tape, store, frames)?;
        self.forward_reduced(tape, store, v)
    }

    /// Rollout over already reduced frames `[N, gh, gw, D']`.
    pub fn forward_reduced<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, v: Var) -> Result<Rollout> {
        let n = tape.shape(v)[0];
        let (gh, gw) = self.config.grid;
        let d = self.config.channels;
        let frame = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let f = tape.slice(v, 0, i, 1)?;
            tape.reshape(f, &[gh, gw, d])
        };
        let mut state = TraceState::initial(tape, self);
        let first = frame(tape, 0)?;
        let cells = tape.reshape(first, &[gh * gw, d])?;
        let context = tape.matmul(state.alpha, cells)?;
        state.lstm = self.lstm.step(tape, store, context, &state.lstm)?;
        let mut alphas = Vec::with_capacity(n);
        for i in 0..n {
            let f = frame(tape, i)?;
            state = self.trace_step(tape, store, &state, f)?;
            alphas.push(state.alpha);
        }
        let hidden = state.hidden();
        let confidence = self.confidence(tape, store, hidden)?;
        Ok(Rollout { alphas, hidden, confidence })
    }

    /// `sigmoid(W_p · concat(h) + b_p)` as `[1 × V]`.
    pub fn confidence<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        let flat = tape.reshape(hidden, &[1, self.config.traces() * self.config.hidden])?;
        let logits = self.head.forward(tape, store, flat)?;
        Ok(tape.sigmoid(logits))
    }

    /// Puts a clip's frames on the tape as a constant `[N, H, W, C]`.
    pub fn clip_input<T: Scalar>(tape: &mut Tape<T>, clip: &crate::corpus::FeatureClip) -> Result<Var> {
        let (h, w, c) = clip.grid();
        let t = Tensor::new(vec![clip.frames(), h, w, c], clip.data().iter().map(|&x| T::of(x as f64)).collect())?;
        Ok(tape.constant(t))
    }

    /// Parameter name prefix shared by every detector tensor.
    pub fn prefix(&self, store: &ParamStore<impl Scalar>) -> String {
        let name = store.name(self.attn_conv);
        name.trim_end_matches(".attn.conv1").to_string()
    }
}

/// Mean binary cross-entropy of confidences against 0/1 targets, logs clamped at 1e-12.
pub fn concept_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, targets: &[f64]) -> Result<Var> {
    let v = tape.value(p).len();
    if targets.len() != v {
        return Err(Error::dim(format!("{} targets for {v} confidences", targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::usage(format!("concept targets must be 0 or 1, got {bad}")));
    }
    let shape = tape.shape(p).to_vec();
    let eps = T::of(1e-12);
    let pos = tape.clamp_min(p, eps);
    let log_p = tape.log(pos)?;
    let one_minus = tape.neg(p);
    let one_minus = tape.shift(one_minus, T::one());
    let neg = tape.clamp_min(one_minus, eps);
    let log_q = tape.log(neg)?;
    let t = tape.constant(Tensor::new(shape.clone(), targets.iter().map(|&x| T::of(x)).collect())?);
    let u = tape.constant(Tensor::new(shape, targets.iter().map(|&x| T::of(1.0 - x)).collect())?);
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(u, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, T::of(-1.0 / v as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureClip;

    fn tiny(input: (usize, usize, usize)) -> DetectorConfig {
        DetectorConfig { input, attn_channels: 4, ..DetectorConfig::new(8, 20, 3) }
    }

    fn random_clip(n: usize, (h, w, c): (usize, usize, usize), seed: u64) -> FeatureClip {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureClip::new("c", n, h, w, c, data).unwrap()
    }

    #[test]
    fn reducer_maps_8x8_and_7x7_to_4x4() {
        for input in [(8, 8, 8), (7, 7, 6)] {
            let mut store = ParamStore::<f64>::new();
            let det = ConceptDetector::new(&mut store, "det", tiny(input), &mut Init::new(1)).unwrap();
            assert!(det.reducer.is_some());
            let mut tape = Tape::new();
            let x = ConceptDetector::clip_input(&mut tape, &random_clip(2, input, 3)).unwrap();
            let v = det.reduce(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(v), [2, 4, 4, 8]);
        }
    }

    #[test]
    fn extents_below_the_grid_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let err = ConceptDetector::new(&mut store, "det", tiny((3, 3, 8)), &mut Init::new(1)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn hidden_must_match_channels() {
        let mut store = ParamStore::<f64>::new();
        let cfg = DetectorConfig { hidden: 6, ..tiny((4, 4, 8)) };
        assert!(matches!(ConceptDetector::new(&mut store, "det", cfg, &mut Init::new(1)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn zero_hidden_state_gives_uniform_attention() {
        let mut store = ParamStore::<f64>::new();
        let det = ConceptDetector::new(&mut store, "det", tiny((4, 4, 8)), &mut Init::new(2)).unwrap();
        let mut tape = Tape::new();
        let x = ConceptDetector::clip_input(&mut tape, &random_clip(1, (4, 4, 8), 5)).unwrap();
        let f = tape.reshape(x, &[4, 4, 8]).unwrap();
        let s0 = TraceState::initial(&mut tape, &det);
        let s1 = det.trace_step(&mut tape, &store, &s0, f).unwrap();
        for &a in tape.data(s1.alpha) {
            assert!((a - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_frame_context_equals_the_cell_vector() {
        let mut store = ParamStore::<f64>::new();
        let det = ConceptDetector::new(&mut store, "det", tiny((4, 4, 8)), &mut Init::new(2)).unwrap();
        let cell: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let frame: Vec<f64> = (0..16).flat_map(|_| cell.clone()).collect();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![4, 4, 8], frame).unwrap());
        let h = tape.constant(Tensor::full(vec![16, 8], 0.3));
        let mut state = TraceState::initial(&mut tape, &det);
        state.lstm.h = vec![h];
        let next = det.trace_step(&mut tape, &store, &state, f).unwrap();
        let cells = tape.reshape(f, &[16, 8]).unwrap();
        let ctx = tape.matmul(next.alpha, cells).unwrap();
        for row in tape.data(ctx).chunks(8) {
            for (a, b) in row.iter().zip(&cell) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_attention_stays_on_the_simplex() {
        let mut store = ParamStore::<f64>::new();
        let det = ConceptDetector::new(&mut store, "det", tiny((4, 4, 8)), &mut Init::new(3)).unwrap();
        let mut tape = Tape::new();
        let x = ConceptDetector::clip_input(&mut tape, &random_clip(3, (4, 4, 8), 7)).unwrap();
        let roll = det.forward(&mut tape, &store, x).unwrap();
        assert_eq!(roll.alphas.len(), 3);
        for &a in &roll.alphas {
            for row in tape.data(a).chunks(16) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(tape.shape(roll.confidence), [1, 20]);
    }

    #[test]
    fn zero_head_gives_half_confidence() {
        let mut store = ParamStore::<f64>::new();
        let det = ConceptDetector::new(&mut store, "det", tiny((4, 4, 8)), &mut Init::new(3)).unwrap();
        let w = store.name(det.head.w).to_string();
        store.set_values(&w, &Tensor::zeros(vec![20, 128])).unwrap();
        let mut tape = Tape::new();
        let x = ConceptDetector::clip_input(&mut tape, &random_clip(2, (4, 4, 8), 7)).unwrap();
        let roll = det.forward(&mut tape, &store, x).unwrap();
        assert!(tape.data(roll.confidence).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn concept_loss_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(vec![1, 4], 0.5));
        let l = concept_loss(&mut tape, p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((tape.item(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let l = concept_loss(&mut tape, q, &[1.0, 0.0]).unwrap();
        assert!(tape.item(l).unwrap().abs() < 1e-9);
        assert!(matches!(concept_loss(&mut tape, q, &[0.5, 0.0]), Err(Error::Usage(_))));
    }
}
