use super::mc::{hinge_loss, read_sentence, PairScore};
use super::{combine_loss, ClipEncoding, LossParts, LossWeights, ModelConfig, TaskModel};
use crate::corpus::{Sample, Vocabulary};
use crate::nn::{compact_bilinear, Init, Linear, Lstm, Maxout, SketchParams};
use crate::semattn::AttnParams;
use crate::{Error, ParamStore, Result, Scalar, Tape, Var};

/// Query LSTM, compact bilinear fusion with the video state, maxout and a scoring vector.
#[derive(Clone, Debug)]
pub struct RetrievalHead {
    pub lstm: Lstm,
    pub attn: AttnParams,
    pub sketch: SketchParams,
    pub maxout: Maxout,
    pub score: Linear,
}

impl RetrievalHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        Ok(RetrievalHead {
            lstm: Lstm::new(store, "ret.lstm", config.lstm(config.hidden), init)?,
            attn: AttnParams::new(store, "ret.attn", config.embed, config.hidden, false, init)?,
            sketch: SketchParams::random(config.hidden, config.hidden, config.sketch_dim, config.sketch_seed),
            maxout: Maxout::new(store, "ret.maxout", config.sketch_dim, config.maxout_dim, 2, init)?,
            score: Linear::new(store, "ret.score", config.maxout_dim, 1, false, init)?,
        })
    }

    /// `W_sᵀ maxout(dropout(cbp(s_N, h_T)))` for one (clip, query) pair.
    pub fn score<T: Scalar>(&self, tape: &mut Tape<T>, model: &TaskModel<T>, enc: &ClipEncoding, query: &[usize]) -> Result<PairScore> {
        let (h, gamma) = read_sentence(tape, model, &self.lstm, &self.attn, enc, query)?;
        let fused = compact_bilinear(tape, enc.last().top(), h, &self.sketch)?;
        let fused = tape.dropout(fused, model.config.retrieval_dropout)?;
        let m = self.maxout.forward(tape, &model.store, fused)?;
        let s = self.score.forward(tape, &model.store, m)?;
        let score = tape.reshape(s, &[1])?;
        Ok(PairScore { score, gamma })
    }

    /// In-batch ranking loss: every caption is a query against every clip of the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        model: &TaskModel<T>,
        encs: &[ClipEncoding],
        batch: &[&Sample],
        targets: &[Vec<f64>],
        vocab: &Vocabulary,
        w: LossWeights,
    ) -> Result<LossParts> {
        if batch.len() < 2 {
            return Err(Error::usage("retrieval needs at least two pairs per batch for negatives"));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let ids: Vec<usize> = s.caption.iter().map(|w| vocab.id_or_unk(w)).collect();
            let mut row = Vec::with_capacity(encs.len());
            for enc in encs {
                row.push(self.score(tape, model, enc, &ids)?);
            }
            rows.push(row);
        }
        let mut con = tape.scalar(T::zero());
        for (enc, t) in encs.iter().zip(targets) {
            let c = model.concept_term(tape, enc, t)?;
            con = tape.add(con, c)?;
        }
        let mut parts: Option<LossParts> = None;
        for (k, row) in rows.iter().enumerate() {
            let p = retrieval_loss(tape, row, k, w.margin, None, w.lambda1, 0.0)?;
            parts = Some(match parts {
                None => p,
                Some(a) => super::add_parts(tape, a, p)?,
            });
        }
        let mut parts = parts.expect("non-empty batch");
        let weighted = tape.scale(con, T::of(w.lambda2));
        parts.total = tape.add(parts.total, weighted)?;
        parts.concept = con;
        Ok(parts)
    }
}

/// Hinge over the non-matching candidates of one query row plus the attention
/// and concept terms. A row with a single candidate has no negatives.
pub fn retrieval_loss<T: Scalar>(
    tape: &mut Tape<T>,
    row: &[PairScore],
    positive: usize,
    margin: f64,
    concept: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    if row.len() < 2 {
        return Err(Error::usage("retrieval loss needs at least one negative"));
    }
    let s: Vec<Var> = row.iter().map(|p| p.score).collect();
    let hinge = hinge_loss(tape, &s, positive, margin)?;
    let gammas: Vec<Var> = row.iter().map(|p| p.gamma).collect();
    combine_loss(tape, hinge, &gammas, concept, lambda1, lambda2)
}
