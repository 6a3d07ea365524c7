use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ConceptDetector;
use crate::corpus::FeatureClip;
use crate::{Error, ParamStore, Result, Scalar, Tape};

/// Top-K candidate indices with their confidences, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    pub candidates: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Indices of the `k` largest confidences; equal confidences keep the lower index first.
pub fn top_k(p: &[f64], k: usize) -> Result<ConceptSet> {
    if k == 0 || k > p.len() {
        return Err(Error::usage(format!("K = {k} outside 1..={}", p.len())));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(ConceptSet { confidences: order.iter().map(|&i| p[i]).collect(), candidates: order })
}

/// Runs the detector in inference mode and keeps the top `k` words.
/// Also returns the full confidence vector.
pub fn detect<T: Scalar>(det: &ConceptDetector, store: &ParamStore<T>, clip: &FeatureClip, k: usize) -> Result<(ConceptSet, Vec<f64>)> {
    if k > det.config.vocab {
        return Err(Error::usage(format!("K = {k} exceeds the {} candidate words", det.config.vocab)));
    }
    let mut tape = Tape::new();
    let frames = ConceptDetector::clip_input(&mut tape, clip)?;
    let roll = det.forward(&mut tape, store, frames)?;
    let p = tape.value(roll.confidence).to_f64_vec();
    Ok((top_k(&p, k)?, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub confidence: f64,
}

/// One JSON line of detector output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub clip_id: String,
    pub words: Vec<WordScore>,
}

impl Detection {
    pub fn new(clip_id: &str, set: &ConceptSet, candidates: &[String]) -> Self {
        Detection {
            clip_id: clip_id.to_string(),
            words: set
                .candidates
                .iter()
                .zip(&set.confidences)
                .map(|(&i, &c)| WordScore { word: candidates[i].clone(), confidence: c })
                .collect(),
        }
    }
}

/// Writes detections as JSON lines, adding `run` metadata to each line when given.
pub fn write_detections<W: Write>(mut w: W, detections: &[Detection], run: Option<&serde_json::Value>) -> Result<()> {
    for d in detections {
        let mut v = serde_json::to_value(d)?;
        if let (Some(run), Some(obj)) = (run, v.as_object_mut()) {
            obj.insert("run".into(), run.clone());
        }
        writeln!(w, "{}", serde_json::to_string(&v)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_lower_index() {
        let s = top_k(&[0.2, 0.7, 0.7, 0.1], 2).unwrap();
        assert_eq!(s.candidates, vec![1, 2]);
        let all = top_k(&[0.5, 0.5, 0.5], 3).unwrap();
        assert_eq!(all.candidates, vec![0, 1, 2]);
    }

    #[test]
    fn k_equal_to_v_returns_everything_sorted() {
        let s = top_k(&[0.1, 0.9, 0.5], 3).unwrap();
        assert_eq!(s.candidates, vec![1, 2, 0]);
        assert_eq!(s.confidences, vec![0.9, 0.5, 0.1]);
    }

    #[test]
    fn k_larger_than_v_is_a_usage_error() {
        assert!(matches!(top_k(&[0.1, 0.2], 3), Err(Error::Usage(_))));
        assert!(matches!(top_k(&[0.1, 0.2], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn detections_serialise_with_run_metadata() {
        let set = ConceptSet { candidates: vec![1], confidences: vec![0.75] };
        let d = Detection::new("c0", &set, &["a".into(), "b".into()]);
        let mut buf = Vec::new();
        write_detections(&mut buf, &[d], Some(&serde_json::json!({"seed": 3}))).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["clip_id"], "c0");
        assert_eq!(v["words"][0]["word"], "b");
        assert_eq!(v["run"]["seed"], 3);
    }
}
