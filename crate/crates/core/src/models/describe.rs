use super::{combine_loss, ClipEncoding, LossParts, ModelConfig, TaskModel};
use crate::corpus::{BOS, EOS};
use crate::nn::{Init, Linear, Lstm, LstmState};
use crate::semattn::{input_attention, output_attention, AttnParams};
use crate::{Error, ParamStore, Result, Scalar, Tape, Var};

/// Caption decoder with input and output semantic attention.
#[derive(Clone, Debug)]
pub struct DescriptionHead {
    pub decoder: Lstm,
    pub attn: AttnParams,
    pub out: Linear,
}

/// Teacher-forced pass over a gold caption.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[T × |V|]` log-probabilities, one row per emitted position.
    pub log_probs: Var,
    /// Target ids: the gold words followed by `<eos>`.
    pub targets: Vec<usize>,
    pub gamma: Var,
    pub beta: Var,
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Emitted ids, including a final `<eos>` when one was produced.
    pub tokens: Vec<usize>,
    /// Output distribution at each step.
    pub distributions: Vec<Vec<f64>>,
    pub gammas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

impl Generated {
    /// Emitted words without the terminating `<eos>`.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

impl DescriptionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        let decoder = Lstm::new(store, "dec", config.lstm(config.hidden), init)?;
        let attn = AttnParams::new(store, "dec.attn", config.embed, config.hidden, true, init)?;
        let out = Linear::new(store, "dec.out", config.hidden, config.vocab, true, init)?;
        Ok(DescriptionHead { decoder, attn, out })
    }

    /// Feeds `<bos>` and the gold words; returns per-step log-distributions
    /// over the next word and the stacked attention weights.
    pub fn teacher_forced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        model: &TaskModel<T>,
        enc: &ClipEncoding,
        gold: &[usize],
    ) -> Result<TeacherForced> {
        let store = &model.store;
        let mut inputs = Vec::with_capacity(gold.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(gold);
        let mut targets = gold.to_vec();
        targets.push(EOS);
        let emb = model.backbone.embedding.lookup(tape, store, &inputs)?;
        let (x, gamma) = input_attention(tape, store, &self.attn, emb, enc.concepts)?;
        let x = tape.dropout(x, model.config.dropout)?;
        let mut state = model.backbone.initial_state(tape, &self.decoder, enc)?;
        let mut hs = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let xt = tape.slice(x, 0, t, 1)?;
            state = self.decoder.step(tape, store, xt, &state)?;
            hs.push(state.top());
        }
        let h = tape.concat(&hs, 0)?;
        let (p, beta) = output_attention(tape, store, &self.attn, h, enc.concepts)?;
        let logits = self.out.forward(tape, store, p)?;
        let log_probs = tape.log_softmax(logits);
        Ok(TeacherForced { log_probs, targets, gamma, beta })
    }

    /// Decoder state before the first word.
    pub fn start<T: Scalar>(&self, tape: &mut Tape<T>, model: &TaskModel<T>, enc: &ClipEncoding) -> Result<LstmState> {
        model.backbone.initial_state(tape, &self.decoder, enc)
    }

    /// Consumes `prev` and returns the next-word distribution.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        model: &TaskModel<T>,
        enc: &ClipEncoding,
        state: &LstmState,
        prev: usize,
    ) -> Result<DecodeStep> {
        let store = &model.store;
        let emb = model.backbone.embedding.lookup(tape, store, &[prev])?;
        let (x, gamma) = input_attention(tape, store, &self.attn, emb, enc.concepts)?;
        let state = self.decoder.step(tape, store, x, state)?;
        let (p, beta) = output_attention(tape, store, &self.attn, state.top(), enc.concepts)?;
        let logits = self.out.forward(tape, store, p)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(DecodeStep {
            state,
            distribution: tape.value(probs).to_f64_vec(),
            gamma: tape.value(gamma).to_f64_vec(),
            beta: tape.value(beta).to_f64_vec(),
        })
    }

    /// Greedy decoding until `<eos>` or `max_len` tokens.
    pub fn generate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        model: &TaskModel<T>,
        enc: &ClipEncoding,
        max_len: usize,
    ) -> Result<Generated> {
        if max_len == 0 {
            return Err(Error::usage("max_len must be at least 1"));
        }
        let mut state = self.start(tape, model, enc)?;
        let mut prev = BOS;
        let mut g = Generated { tokens: Vec::new(), distributions: Vec::new(), gammas: Vec::new(), betas: Vec::new() };
        for _ in 0..max_len {
            let s = self.step(tape, model, enc, &state, prev)?;
            let next = argmax(&s.distribution);
            g.distributions.push(s.distribution);
            g.gammas.push(s.gamma);
            g.betas.push(s.beta);
            g.tokens.push(next);
            state = s.state;
            if next == EOS {
                break;
            }
            prev = next;
        }
        Ok(g)
    }
}

/// One greedy decoding step.
#[derive(Clone, Debug)]
pub struct DecodeStep {
    pub state: LstmState,
    pub distribution: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Index of the first maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `−Σ_t log p(y_t) + λ1(g(β) + g(γ)) + λ2·L_con`.
pub fn description_loss<T: Scalar>(
    tape: &mut Tape<T>,
    tf: &TeacherForced,
    concept: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let targets = &tf.targets;
    let s = tape.shape(tf.log_probs).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::usage(format!("{} targets for {:?} distributions", targets.len(), s)));
    }
    let v = s[1];
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::usage(format!("target id {bad} outside a {v}-word vocabulary")));
    }
    let idx: Vec<usize> = targets.iter().enumerate().map(|(t, &y)| t * v + y).collect();
    let picked = tape.pick(tf.log_probs, &idx)?;
    let ll = tape.sum(picked);
    let nll = tape.neg(ll);
    combine_loss(tape, nll, &[tf.beta, tf.gamma], concept, lambda1, lambda2)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::corpus::Split;
    use crate::models::{ConceptSource, Head, Task};

    fn head(model: &TaskModel<f64>) -> &DescriptionHead {
        match &model.head {
            Head::Description(h) => h,
            _ => unreachable!(),
        }
    }

    #[test]
    fn loss_matches_component_oracle() {
        let (data, model) = tiny(Task::Description, 3);
        for s in data.split(Split::Train).into_iter().take(3) {
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
            let targets = data.concept_targets(&s.caption);
            let con = model.concept_term(&mut tape, &enc, &targets).unwrap();
            let tf = head(&model).teacher_forced(&mut tape, &model, &enc, &ids(&s.caption, &data)).unwrap();
            let parts = description_loss(&mut tape, &tf, Some(con), 0.3, 0.7).unwrap();
            let v = data.vocab.len();
            let lp = tape.data(tf.log_probs);
            let nll: f64 = -tf.targets.iter().enumerate().map(|(t, &y)| lp[t * v + y]).sum::<f64>();
            let reg = matrix_regularizer(&tape, tf.beta) + matrix_regularizer(&tape, tf.gamma);
            let want = nll + 0.3 * reg + 0.7 * bce(tape.data(enc.confidence), &targets);
            let got = tape.item(parts.total).unwrap();
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            assert!(got >= 0.0);
            assert_eq!(*tf.targets.last().unwrap(), EOS);
            for row in lp.chunks(v) {
                assert!((row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_follows_step_and_respects_max_len() {
        let (data, model) = tiny(Task::Description, 5);
        let s = data.split(Split::Test)[0];
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
        let h = head(&model);
        let g = h.generate(&mut tape, &model, &enc, 3).unwrap();
        assert!(!g.tokens.is_empty() && g.tokens.len() <= 3);
        assert_eq!(g.distributions.len(), g.tokens.len());
        let state = h.start(&mut tape, &model, &enc).unwrap();
        let first = h.step(&mut tape, &model, &enc, &state, BOS).unwrap();
        assert_eq!(first.distribution, g.distributions[0]);
        assert_eq!(g.tokens[0], argmax(&first.distribution));
        assert!(h.generate(&mut tape, &model, &enc, 0).is_err());
    }

    #[test]
    fn words_drop_only_a_final_eos() {
        let g = |tokens: Vec<usize>| Generated { tokens, distributions: vec![], gammas: vec![], betas: vec![] };
        assert_eq!(g(vec![7, 8, EOS]).words(), &[7, 8]);
        assert_eq!(g(vec![7, 8]).words(), &[7, 8]);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }
}
