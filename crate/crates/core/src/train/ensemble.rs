use crate::corpus::{Sample, Vocabulary, BOS, EOS};
use crate::models::{argmax, best_word, ConceptSource, Head, SimilarityMatrix, TaskModel};
use crate::{Error, Result, Scalar, Tape};

/// Mean of one value per member, independent of member order and exact when
/// all members agree.
fn mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// Elementwise mean of equally shaped member outputs.
fn average(members: &[&[f64]]) -> Result<Vec<f64>> {
    let first = members.first().ok_or_else(|| Error::usage("ensemble of zero members"))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(Error::usage("ensemble members differ in shape"));
    }
    let mut column = vec![0.0; members.len()];
    Ok((0..first.len())
        .map(|i| {
            column.iter_mut().zip(members).for_each(|(c, m)| *c = m[i]);
            mean(&mut column)
        })
        .collect())
}

/// Averages word distributions of several models.
pub fn average_distributions(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    average(&members.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

/// Averages similarity matrices over identical sentence and clip ids.
pub fn average_matrices(members: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = members.first().ok_or_else(|| Error::usage("ensemble of zero members"))?;
    if members.iter().any(|m| m.sentence_ids != first.sentence_ids || m.clip_ids != first.clip_ids) {
        return Err(Error::usage("ensemble matrices differ in shape or ids"));
    }
    let scores = average(&members.iter().map(SimilarityMatrix::scores).collect::<Vec<_>>())?;
    SimilarityMatrix::new(first.sentence_ids.clone(), first.clip_ids.clone(), scores)
}

fn heads<'a, T, H>(members: &[&'a TaskModel<T>], pick: impl Fn(&'a Head) -> Option<&'a H>) -> Result<Vec<&'a H>> {
    if members.is_empty() {
        return Err(Error::usage("ensemble of zero members"));
    }
    members.iter().map(|m| pick(&m.head).ok_or_else(|| Error::usage(format!("member is a {} model", m.task)))).collect()
}

/// Greedy caption whose next word maximises the members' averaged distribution.
pub fn ensemble_caption<T: Scalar>(members: &[&TaskModel<T>], sample: &Sample, max_len: usize) -> Result<Vec<usize>> {
    let hs = heads(members, |h| if let Head::Description(d) = h { Some(d) } else { None })?;
    if max_len == 0 {
        return Err(Error::usage("max_len must be at least 1"));
    }
    let mut tapes: Vec<Tape<T>> = members.iter().map(|_| Tape::new()).collect();
    let mut encs = Vec::with_capacity(members.len());
    let mut states = Vec::with_capacity(members.len());
    for ((m, h), tape) in members.iter().zip(&hs).zip(&mut tapes) {
        let enc = m.encode(tape, &sample.clip, ConceptSource::Live)?;
        states.push(h.start(tape, m, &enc)?);
        encs.push(enc);
    }
    let mut words = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_len {
        let mut dists = Vec::with_capacity(members.len());
        for i in 0..members.len() {
            let s = hs[i].step(&mut tapes[i], members[i], &encs[i], &states[i], prev)?;
            states[i] = s.state;
            dists.push(s.distribution);
        }
        let next = argmax(&average_distributions(&dists)?);
        if next == EOS {
            break;
        }
        words.push(next);
        prev = next;
    }
    Ok(words)
}

/// Averaged blank-word distribution and its best non-reserved word.
pub fn ensemble_blank<T: Scalar>(members: &[&TaskModel<T>], sample: &Sample, vocab: &Vocabulary) -> Result<(Vec<f64>, usize)> {
    let hs = heads(members, |h| if let Head::Fib(f) = h { Some(f) } else { None })?;
    let fib = sample.fib.as_ref().ok_or_else(|| Error::usage(format!("sample {} has no blank sentence", sample.id)))?;
    let ids: Vec<usize> = fib.sentence.iter().map(|w| vocab.id_or_unk(w)).collect();
    let mut dists = Vec::with_capacity(members.len());
    for (m, h) in members.iter().zip(&hs) {
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &sample.clip, ConceptSource::Live)?;
        let out = h.forward(&mut tape, m, &enc, &ids)?;
        dists.push(tape.value(out.log_probs).to_f64_vec().into_iter().map(f64::exp).collect());
    }
    let avg = average_distributions(&dists)?;
    let word = best_word(&avg);
    Ok((avg, word))
}

/// Choice with the highest averaged score over multiple-choice members.
pub fn ensemble_choice<T: Scalar>(members: &[&TaskModel<T>], sample: &Sample, vocab: &Vocabulary) -> Result<usize> {
    heads(members, |h| if let Head::Mc(m) = h { Some(m) } else { None })?;
    let mc = sample.mc.as_ref().ok_or_else(|| Error::usage(format!("sample {} has no choices", sample.id)))?;
    let scores: Vec<Vec<f64>> = members
        .iter()
        .map(|m| mc.choices.iter().map(|c| m.pair_score(sample, c, vocab, None)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    Ok(argmax(&average_distributions(&scores)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_members_are_returned_unchanged() {
        let d = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(average_distributions(&[d.clone(), d.clone(), d.clone()]).unwrap(), d);
    }

    #[test]
    fn member_order_does_not_matter() {
        let a = vec![0.1, 0.7, 0.2];
        let b = vec![0.3, 0.3, 0.4];
        let c = vec![0.05, 0.9, 0.05];
        let x = average_distributions(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = average_distributions(&[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn hand_computed_matrix_mean() {
        let a = SimilarityMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = SimilarityMatrix::from_rows(&[vec![3.0, 0.0], vec![1.0, 8.0]]).unwrap();
        let m = average_matrices(&[a, b]).unwrap();
        assert_eq!(m.scores(), &[2.0, 1.0, 2.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_a_usage_error() {
        assert!(matches!(average_distributions(&[vec![1.0], vec![0.5, 0.5]]), Err(Error::Usage(_))));
        assert!(matches!(average_distributions(&[]), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn averaged_distributions_stay_normalised(raw in prop::collection::vec(prop::collection::vec(1e-6f64..1.0, 12), 1..8)) {
            let members: Vec<Vec<f64>> = raw.into_iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            }).collect();
            let avg = average_distributions(&members).unwrap();
            prop_assert!((avg.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(avg.iter().all(|&p| p >= 0.0));
        }
    }
}
