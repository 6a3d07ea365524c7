use super::{combine_loss, ClipEncoding, LossParts, ModelConfig, TaskModel};
use crate::nn::{Init, Linear, Lstm};
use crate::semattn::{input_attention, AttnParams};
use crate::{Error, ParamStore, Result, Scalar, Tape, Var};

/// Sentence LSTM started from the video state, scored by `W_sᵀ relu(W_a h_T + b_a)`.
#[derive(Clone, Debug)]
pub struct McHead {
    pub lstm: Lstm,
    pub attn: AttnParams,
    pub proj: Linear,
    pub score: Linear,
}

/// Score of one (clip, sentence) pair and the input attention behind it.
#[derive(Clone, Copy, Debug)]
pub struct PairScore {
    /// Scalar `[1]`.
    pub score: Var,
    pub gamma: Var,
}

/// Runs an LSTM from the clip state over input-attended words; returns `h_T` and `γ`.
pub(crate) fn read_sentence<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TaskModel<T>,
    lstm: &Lstm,
    attn: &AttnParams,
    enc: &ClipEncoding,
    sentence: &[usize],
) -> Result<(Var, Var)> {
    if sentence.is_empty() {
        return Err(Error::usage("cannot score an empty sentence"));
    }
    let store = &model.store;
    let emb = model.backbone.embedding.lookup(tape, store, sentence)?;
    let (x, gamma) = input_attention(tape, store, attn, emb, enc.concepts)?;
    let x = tape.dropout(x, model.config.dropout)?;
    let mut state = model.backbone.initial_state(tape, lstm, enc)?;
    for t in 0..sentence.len() {
        let xt = tape.slice(x, 0, t, 1)?;
        state = lstm.step(tape, store, xt, &state)?;
    }
    Ok((state.top(), gamma))
}

impl McHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        Ok(McHead {
            lstm: Lstm::new(store, "mc.lstm", config.lstm(config.hidden), init)?,
            attn: AttnParams::new(store, "mc.attn", config.embed, config.hidden, false, init)?,
            proj: Linear::new(store, "mc.proj", config.hidden, config.hidden, true, init)?,
            score: Linear::new(store, "mc.score", config.hidden, 1, false, init)?,
        })
    }

    pub fn score<T: Scalar>(&self, tape: &mut Tape<T>, model: &TaskModel<T>, enc: &ClipEncoding, sentence: &[usize]) -> Result<PairScore> {
        let (h, gamma) = read_sentence(tape, model, &self.lstm, &self.attn, enc, sentence)?;
        let z = self.proj.forward(tape, &model.store, h)?;
        let z = tape.relu(z);
        let s = self.score.forward(tape, &model.store, z)?;
        let score = tape.reshape(s, &[1])?;
        Ok(PairScore { score, gamma })
    }
}

/// `Σ_{l ≠ pos} max(0, S_l − S_pos + Δ)`.
pub fn hinge_loss<T: Scalar>(tape: &mut Tape<T>, scores: &[Var], pos: usize, margin: f64) -> Result<Var> {
    if pos >= scores.len() {
        return Err(Error::usage(format!("answer index {pos} out of range for {} candidates", scores.len())));
    }
    let mut acc = tape.scalar(T::zero());
    for (l, &s) in scores.iter().enumerate() {
        if l == pos {
            continue;
        }
        let d = tape.sub(s, scores[pos])?;
        let d = tape.shift(d, T::of(margin));
        let h = tape.relu(d);
        acc = tape.add(acc, h)?;
    }
    Ok(acc)
}

/// Hinge over the distractors plus `λ1·Σ g(γ)` over every scored choice and `λ2·L_con`.
pub fn mc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scores: &[PairScore],
    answer: usize,
    margin: f64,
    concept: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let s: Vec<Var> = scores.iter().map(|p| p.score).collect();
    let hinge = hinge_loss(tape, &s, answer, margin)?;
    let gammas: Vec<Var> = scores.iter().map(|p| p.gamma).collect();
    combine_loss(tape, hinge, &gammas, concept, lambda1, lambda2)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::corpus::Split;
    use crate::models::{ConceptSource, Head, Task};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(tape: &mut Tape<f64>, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&s| tape.scalar(s)).collect()
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        let mut tape = Tape::new();
        let s = scores(&mut tape, &[5.0, 4.0, 1.0, 3.5, -2.0]);
        let h = hinge_loss(&mut tape, &s, 0, 1.0).unwrap();
        assert_eq!(tape.item(h).unwrap(), 0.0);
        let h = hinge_loss(&mut tape, &s, 1, 1.0).unwrap();
        assert_eq!(tape.item(h).unwrap(), 2.5);
        assert!(matches!(hinge_loss(&mut tape, &s, 5, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn random_scores_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pos = rng.random_range(0..5);
            let mut tape = Tape::new();
            let s = scores(&mut tape, &v);
            let h = hinge_loss(&mut tape, &s, pos, 1.0).unwrap();
            assert!((tape.item(h).unwrap() - hinge(&v, pos, 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_matches_component_oracle() {
        let (data, model) = tiny(Task::Mc, 7);
        let Head::Mc(head) = &model.head else { unreachable!() };
        for s in data.split(Split::Train).into_iter().take(3) {
            let mc = s.mc.as_ref().unwrap();
            let mut tape = Tape::new();
            let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
            let targets = data.concept_targets(&s.caption);
            let con = model.concept_term(&mut tape, &enc, &targets).unwrap();
            let pairs: Vec<PairScore> = mc.choices.iter().map(|c| head.score(&mut tape, &model, &enc, &ids(c, &data)).unwrap()).collect();
            let parts = mc_loss(&mut tape, &pairs, mc.answer, 1.0, Some(con), 0.4, 0.6).unwrap();
            let v: Vec<f64> = pairs.iter().map(|p| tape.item(p.score).unwrap()).collect();
            let reg: f64 = pairs.iter().map(|p| matrix_regularizer(&tape, p.gamma)).sum();
            let want = hinge(&v, mc.answer, 1.0) + 0.4 * reg + 0.6 * bce(tape.data(enc.confidence), &targets);
            let got = tape.item(parts.total).unwrap();
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn empty_sentence_is_rejected() {
        let (data, model) = tiny(Task::Mc, 1);
        let Head::Mc(head) = &model.head else { unreachable!() };
        let s = data.split(Split::Train)[0];
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &s.clip, ConceptSource::Live).unwrap();
        assert!(matches!(head.score(&mut tape, &model, &enc, &[]), Err(Error::Usage(_))));
    }
}
