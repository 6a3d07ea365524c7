use super::describe::argmax;
use super::{combine_loss, ClipEncoding, LossParts, ModelConfig, TaskModel};
use crate::corpus::{Vocabulary, BLANK};
use crate::nn::{blstm_run, Init, Linear, Lstm};
use crate::semattn::{input_attention, output_attention, AttnParams};
use crate::{Error, ParamStore, Result, Scalar, Tape, Var};

/// Bidirectional sentence reader predicting the word at the single `<blank>`.
#[derive(Clone, Debug)]
pub struct FibHead {
    pub forward: Lstm,
    pub backward: Lstm,
    pub attn: AttnParams,
    /// `W_o: D × 2D`.
    pub merge: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct FibOutput {
    /// `[1 × |V|]` log-probabilities for the blank.
    pub log_probs: Var,
    pub gamma: Var,
    /// `[1 × K]`, attention at the blank position only.
    pub beta: Var,
    pub blank: usize,
}

impl FibHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        Ok(FibHead {
            forward: Lstm::new(store, "fib.fwd", config.lstm(config.hidden), init)?,
            backward: Lstm::new(store, "fib.bwd", config.lstm(config.hidden), init)?,
            attn: AttnParams::new(store, "fib.attn", config.embed, config.hidden, true, init)?,
            merge: Linear::new(store, "fib.merge", 2 * config.hidden, config.hidden, true, init)?,
            out: Linear::new(store, "fib.out", config.hidden, config.vocab, true, init)?,
        })
    }

    /// Log-distribution over the blank word of `sentence` (vocabulary ids).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, model: &TaskModel<T>, enc: &ClipEncoding, sentence: &[usize]) -> Result<FibOutput> {
        let blanks: Vec<usize> = sentence.iter().enumerate().filter(|(_, &w)| w == BLANK).map(|(i, _)| i).collect();
        if blanks.len() != 1 {
            return Err(Error::input(format!("expected exactly one <blank>, found {}", blanks.len())));
        }
        let blank = blanks[0];
        let store = &model.store;
        let emb = model.backbone.embedding.lookup(tape, store, sentence)?;
        let (x, gamma) = input_attention(tape, store, &self.attn, emb, enc.concepts)?;
        let x = tape.dropout(x, model.config.dropout)?;
        let rows = (0..sentence.len()).map(|t| tape.slice(x, 0, t, 1)).collect::<Result<Vec<_>>>()?;
        let init_f = model.backbone.initial_state(tape, &self.forward, enc)?;
        let init_b = model.backbone.initial_state(tape, &self.backward, enc)?;
        let (hf, hb) = blstm_run(tape, store, &self.forward, &self.backward, &rows, init_f, init_b)?;
        let both = tape.concat(&[hf[blank], hb[blank]], 1)?;
        let o = self.merge.forward(tape, store, both)?;
        let o = tape.tanh(o);
        let (p, beta) = output_attention(tape, store, &self.attn, o, enc.concepts)?;
        let logits = self.out.forward(tape, store, p)?;
        let log_probs = tape.log_softmax(logits);
        Ok(FibOutput { log_probs, gamma, beta, blank })
    }

    /// Most probable non-reserved word.
    pub fn predict<T: Scalar>(tape: &Tape<T>, out: &FibOutput) -> usize {
        best_word(&tape.value(out.log_probs).to_f64_vec())
    }
}

/// Index of the highest score among non-reserved words.
pub fn best_word(scores: &[f64]) -> usize {
    let masked: Vec<f64> =
        scores.iter().enumerate().map(|(i, &v)| if Vocabulary::is_reserved(i) { f64::NEG_INFINITY } else { v }).collect();
    argmax(&masked)
}

/// `−log p(y) + λ1(g(β) + g(γ)) + λ2·L_con`.
pub fn fib_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &FibOutput,
    answer: usize,
    concept: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let v = tape.value(out.log_probs).len();
    if answer >= v {
        return Err(Error::usage(format!("answer id {answer} outside a {v}-word vocabulary")));
    }
    let lp = tape.pick(out.log_probs, &[answer])?;
    let lp = tape.sum(lp);
    let nll = tape.neg(lp);
    combine_loss(tape, nll, &[out.beta, out.gamma], concept, lambda1, lambda2)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::corpus::Split;
    use crate::models::{ConceptSource, Head, Task};

    fn head(model: &TaskModel<f64>) -> &FibHead {
        match &model.head {
            Head::Fib(h) => h,
            _ => unreachable!(),
        }
    }

    #[test]
    fn loss_matches_component_oracle() {
        let (data, model) = tiny(Task::Fib, 2);
        for s in data.split(Split::Train).into_iter().take(3) {
            let fib = s.fib.as_ref().unwrap();
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
            let targets = data.concept_targets(&s.caption);
            let con = model.concept_term(&mut tape, &enc, &targets).unwrap();
            let out = head(&model).forward(&mut tape, &model, &enc, &ids(&fib.sentence, &data)).unwrap();
            let answer = data.vocab.id_or_unk(&fib.answer);
            let parts = fib_loss(&mut tape, &out, answer, Some(con), 0.2, 0.9).unwrap();
            let nll = -tape.data(out.log_probs)[answer];
            let reg = matrix_regularizer(&tape, out.beta) + matrix_regularizer(&tape, out.gamma);
            let want = nll + 0.2 * reg + 0.9 * bce(tape.data(enc.confidence), &targets);
            let got = tape.item(parts.total).unwrap();
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            assert!(got >= 0.0);
            assert_eq!(tape.shape(out.beta)[0], 1);
        }
    }

    #[test]
    fn blank_position_changes_the_output() {
        let mut differing = 0;
        for seed in 0..10 {
            let (data, model) = tiny(Task::Fib, seed);
            let s = data.split(Split::Train)[seed as usize];
            let words = ids(&s.caption, &data);
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
            let mut outputs = Vec::new();
            for pos in 0..words.len() {
                let mut sentence = words.clone();
                sentence[pos] = BLANK;
                let out = head(&model).forward(&mut tape, &model, &enc, &sentence).unwrap();
                outputs.push((FibHead::predict(&tape, &out), tape.data(out.log_probs).to_vec()));
            }
            assert!(outputs.windows(2).all(|w| w[0].1 != w[1].1));
            if outputs.iter().any(|o| o.0 != outputs[0].0) {
                differing += 1;
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn needs_exactly_one_blank() {
        let (data, model) = tiny(Task::Fib, 1);
        let s = data.split(Split::Train)[0];
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
        let words = ids(&s.caption, &data);
        assert!(matches!(head(&model).forward(&mut tape, &model, &enc, &words), Err(Error::Input(_))));
        let mut two = words.clone();
        two[0] = BLANK;
        two[1] = BLANK;
        assert!(head(&model).forward(&mut tape, &model, &enc, &two).is_err());
    }

    #[test]
    fn best_word_skips_reserved_ids() {
        assert_eq!(best_word(&[0.0, 9.0, 0.0, 8.0, 7.0, 1.0, 2.0]), 6);
        assert_eq!(best_word(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]), 5);
    }
}
