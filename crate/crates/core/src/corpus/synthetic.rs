//! Planted-concept corpus.
//!
//! Each concept word owns a fixed unit-norm signature vector. A clip plants a
//! few concepts, each walking over the grid one cell per frame, on top of
//! Gaussian background noise. Captions are template sentences naming exactly
//! the planted words, so the ground truth of every clip is known.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{Dataset, FibItem, McItem, Sample, Split};
use super::features::FeatureClip;
use crate::kv::KeyValues;
use crate::{Error, Result};

/// Built-in concept lexicon (nouns), used when the spec names none.
pub const LEXICON: [&str; 40] = [
    "dog", "car", "man", "woman", "ball", "door", "tree", "cup", "horse", "phone", "chair", "window", "boat", "bird",
    "book", "girl", "boy", "table", "road", "house", "gun", "bike", "bag", "hat", "street", "child", "camera", "piano",
    "knife", "glass", "bed", "train", "letter", "key", "coat", "box", "lamp", "wall", "river", "bottle",
];

/// Number of distractor captions per multiple-choice item.
pub const DISTRACTORS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub frames: usize,
    /// Candidate concept count `V_c`.
    pub concepts: usize,
    pub min_planted: usize,
    pub max_planted: usize,
    /// Detector top-K the corpus is meant for.
    pub k: usize,
    pub noise: f64,
    /// Minimum pairwise distance between signatures.
    pub min_separation: f64,
    /// Concept words; the first `concepts` entries are used.
    pub lexicon: Vec<String>,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            grid_h: 4,
            grid_w: 4,
            channels: 16,
            frames: 6,
            concepts: 16,
            min_planted: 1,
            max_planted: 3,
            k: 3,
            noise: 0.1,
            min_separation: 1.0,
            lexicon: LEXICON.iter().map(|s| s.to_string()).collect(),
            seed: 7,
            train: 400,
            val: 50,
            test: 100,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 || self.frames == 0 {
            return Err(Error::usage("grid, channels and frames must be positive"));
        }
        if self.min_planted == 0 || self.min_planted > self.max_planted {
            return Err(Error::usage(format!(
                "planted range {}..={} is empty or starts at zero",
                self.min_planted, self.max_planted
            )));
        }
        if self.max_planted > 3 {
            return Err(Error::usage("templates realise at most three concepts per clip"));
        }
        if self.max_planted > self.concepts {
            return Err(Error::usage(format!(
                "{} concepts per clip exceed the {} candidate concepts",
                self.max_planted, self.concepts
            )));
        }
        if self.max_planted > self.k || self.k > self.concepts {
            return Err(Error::usage(format!(
                "need concepts per clip ({}) <= K ({}) <= candidate concepts ({})",
                self.max_planted, self.k, self.concepts
            )));
        }
        if self.max_planted > self.grid_h * self.grid_w {
            return Err(Error::usage("more planted concepts than grid cells"));
        }
        if self.concepts > self.lexicon.len() {
            return Err(Error::usage(format!("lexicon has {} words, {} concepts requested", self.lexicon.len(), self.concepts)));
        }
        let distinct: BTreeSet<&String> = self.lexicon[..self.concepts].iter().collect();
        if distinct.len() != self.concepts || self.lexicon[..self.concepts].iter().any(|w| TEMPLATE_WORDS.contains(&w.as_str())) {
            return Err(Error::usage("concept words must be distinct and disjoint from template words"));
        }
        if !(self.noise >= 0.0) || !(self.min_separation >= 0.0) {
            return Err(Error::usage("noise and separation must be non-negative"));
        }
        if self.train == 0 {
            return Err(Error::usage("the training split must be non-empty"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        if let Some(g) = kv.get_raw("grid") {
            let (h, w) = g.split_once('x').unwrap_or((g, g));
            s.grid_h = h.trim().parse().map_err(|_| Error::input(format!("invalid grid `{g}`")))?;
            s.grid_w = w.trim().parse().map_err(|_| Error::input(format!("invalid grid `{g}`")))?;
        }
        kv.read_into("channels", &mut s.channels)?;
        kv.read_into("frames", &mut s.frames)?;
        kv.read_into("concepts", &mut s.concepts)?;
        kv.read_into("min_planted", &mut s.min_planted)?;
        kv.read_into("max_planted", &mut s.max_planted)?;
        kv.read_into("k", &mut s.k)?;
        kv.read_into("noise", &mut s.noise)?;
        kv.read_into("min_separation", &mut s.min_separation)?;
        kv.read_into("seed", &mut s.seed)?;
        kv.read_into("train", &mut s.train)?;
        kv.read_into("val", &mut s.val)?;
        kv.read_into("test", &mut s.test)?;
        if let Some(l) = kv.get_raw("lexicon") {
            s.lexicon = l.split(',').map(|w| w.trim().to_string()).filter(|w| !w.is_empty()).collect();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("grid", format!("{}x{}", self.grid_h, self.grid_w));
        kv.set("channels", self.channels);
        kv.set("frames", self.frames);
        kv.set("concepts", self.concepts);
        kv.set("min_planted", self.min_planted);
        kv.set("max_planted", self.max_planted);
        kv.set("k", self.k);
        kv.set("noise", self.noise);
        kv.set("min_separation", self.min_separation);
        kv.set("seed", self.seed);
        kv.set("train", self.train);
        kv.set("val", self.val);
        kv.set("test", self.test);
        kv.set("lexicon", self.lexicon.join(","));
        kv
    }

    pub fn concept_words(&self) -> &[String] {
        &self.lexicon[..self.concepts]
    }
}

const TEMPLATE_WORDS: [&str; 9] = ["someone", "sees", "the", "is", "near", "and", "are", "with", "a"];

/// Template sentence naming the given words in order.
pub fn template_caption(words: &[&str]) -> Vec<String> {
    let t: Vec<&str> = match *words {
        [a] => vec!["someone", "sees", "the", a],
        [a, b] => vec!["the", a, "is", "near", "the", b],
        [a, b, c] => vec!["the", a, "and", "the", b, "are", "with", "the", c],
        _ => panic!("templates take one to three words"),
    };
    t.into_iter().map(str::to_string).collect()
}

/// Where one planted concept sits in each frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub concept: usize,
    /// `(row, col)` per frame.
    pub cells: Vec<(usize, usize)>,
}

/// A generated dataset plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    /// `V_c × D'` unit signatures.
    pub signatures: Vec<Vec<f32>>,
    /// Per sample, in dataset order.
    pub placements: Vec<Vec<Placement>>,
}

/// Index of the signature closest (Euclidean) to `cell`; ties go to the lower index.
pub fn nearest_signature(cell: &[f32], signatures: &[Vec<f32>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in signatures.iter().enumerate() {
        let d: f64 = cell.iter().zip(s).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_signatures(spec: &SyntheticSpec) -> Result<Vec<Vec<f32>>> {
    let mut rng = stream_rng(spec.seed, 0);
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(spec.concepts);
    let mut attempts = 0usize;
    while sigs.len() < spec.concepts {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::usage(format!(
                "cannot place {} signatures in {} dimensions at separation {}",
                spec.concepts, spec.channels, spec.min_separation
            )));
        }
        let mut v: Vec<f64> = (0..spec.channels).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let far = sigs.iter().all(|s| s.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= spec.min_separation);
        if far {
            sigs.push(v);
        }
    }
    Ok(sigs.into_iter().map(|s| s.into_iter().map(|x| x as f32).collect()).collect())
}

fn draw_planted(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, exclude: &[usize]) -> Vec<usize> {
    let n = rng.random_range(spec.min_planted..=spec.max_planted);
    let pool: Vec<usize> = (0..spec.concepts).filter(|c| !exclude.contains(c)).collect();
    let n = n.min(pool.len());
    let mut chosen: Vec<usize> = pool.choose_multiple(rng, n).copied().collect();
    chosen.sort_unstable();
    chosen
}

fn walk(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, planted: &[usize]) -> Vec<Placement> {
    let (gh, gw) = (spec.grid_h, spec.grid_w);
    let mut cells: Vec<(usize, usize)> = (0..gh).flat_map(|r| (0..gw).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let mut out: Vec<Placement> =
        planted.iter().zip(&cells).map(|(&concept, &cell)| Placement { concept, cells: vec![cell] }).collect();
    for _ in 1..spec.frames {
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for p in out.iter_mut() {
            let (r, c) = *p.cells.last().unwrap();
            let mut moves = vec![(r, c)];
            if r > 0 {
                moves.push((r - 1, c));
            }
            if r + 1 < gh {
                moves.push((r + 1, c));
            }
            if c > 0 {
                moves.push((r, c - 1));
            }
            if c + 1 < gw {
                moves.push((r, c + 1));
            }
            moves.retain(|m| !taken.contains(m));
            let next = match moves.choose(rng) {
                Some(&m) => m,
                None => *cells.iter().find(|m| !taken.contains(m)).expect("more cells than concepts"),
            };
            taken.push(next);
            p.cells.push(next);
        }
    }
    out
}

/// Generates clips, captions, candidates and task variants from `spec`.
/// Clip `i` draws from its own random stream, so output depends only on the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let signatures = draw_signatures(spec)?;
    let words = spec.concept_words();
    let (gh, gw, d) = (spec.grid_h, spec.grid_w, spec.channels);
    let total = spec.train + spec.val + spec.test;
    let mut samples = Vec::with_capacity(total);
    let mut placements = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = stream_rng(spec.seed, i as u64 + 1);
        let split = if i < spec.train {
            Split::Train
        } else if i < spec.train + spec.val {
            Split::Val
        } else {
            Split::Test
        };
        let planted = draw_planted(&mut rng, spec, &[]);
        let place = walk(&mut rng, spec, &planted);
        let mut data = vec![0f32; spec.frames * gh * gw * d];
        if spec.noise > 0.0 {
            for x in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = (z * spec.noise) as f32;
            }
        }
        for p in &place {
            for (n, &(r, c)) in p.cells.iter().enumerate() {
                let off = ((n * gh + r) * gw + c) * d;
                for (x, s) in data[off..off + d].iter_mut().zip(&signatures[p.concept]) {
                    *x += s;
                }
            }
        }
        let id = format!("clip{i:05}");
        let clip = FeatureClip::new(id.clone(), spec.frames, gh, gw, d, data)?;
        let planted_words: Vec<&str> = planted.iter().map(|&c| words[c].as_str()).collect();
        let caption = template_caption(&planted_words);

        let blank = rng.random_range(0..planted_words.len());
        let answer = planted_words[blank].to_string();
        let pos = caption.iter().position(|w| *w == answer).expect("planted word in caption");
        let mut sentence = caption.clone();
        sentence[pos] = "<blank>".to_string();

        let mut choices = Vec::with_capacity(DISTRACTORS + 1);
        for _ in 0..DISTRACTORS {
            let other = draw_planted(&mut rng, spec, &planted);
            let other_words: Vec<&str> = other.iter().map(|&c| words[c].as_str()).collect();
            choices.push(template_caption(&other_words));
        }
        let answer_slot = rng.random_range(0..=DISTRACTORS);
        choices.insert(answer_slot, caption.clone());

        samples.push(Sample {
            id,
            clip,
            caption,
            planted: planted_words.iter().map(|w| w.to_string()).collect(),
            split,
            fib: Some(FibItem { sentence, answer }),
            mc: Some(McItem { choices, answer: answer_slot }),
        });
        placements.push(place);
    }
    let dataset = Dataset::new(samples, words.to_vec())?;
    Ok(SyntheticCorpus { spec: spec.clone(), dataset, signatures, placements })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { train: 40, val: 5, test: 5, ..SyntheticSpec::default() }
    }

    #[test]
    fn noise_free_planted_cells_equal_their_signature() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let corpus = generate_synthetic(&spec).unwrap();
        for (s, place) in corpus.dataset.samples.iter().zip(&corpus.placements) {
            for p in place {
                for (n, &(r, c)) in p.cells.iter().enumerate() {
                    let off = (r * spec.grid_w + c) * spec.channels;
                    let cell = &s.clip.frame(n)[off..off + spec.channels];
                    assert_eq!(cell, corpus.signatures[p.concept].as_slice());
                }
            }
        }
    }

    #[test]
    fn signatures_are_unit_and_separated() {
        let corpus = generate_synthetic(&small()).unwrap();
        for (i, a) in corpus.signatures.iter().enumerate() {
            let n: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            for b in &corpus.signatures[..i] {
                let d: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
                assert!(d >= 1.0 - 1e-5);
            }
        }
    }

    #[test]
    fn same_seed_same_clips() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.dataset.samples[0].clip, c.dataset.samples[0].clip);
    }

    #[test]
    fn captions_name_exactly_the_planted_words() {
        let corpus = generate_synthetic(&small()).unwrap();
        let concepts = corpus.spec.concept_words();
        for s in &corpus.dataset.samples {
            let named: Vec<&String> = s.caption.iter().filter(|w| concepts.contains(w)).collect();
            assert_eq!(named.len(), s.planted.len());
            assert!(s.planted.iter().all(|w| s.caption.contains(w)));
        }
    }

    #[test]
    fn variants_are_well_formed() {
        let corpus = generate_synthetic(&small()).unwrap();
        for s in &corpus.dataset.samples {
            let fib = s.fib.as_ref().unwrap();
            assert_eq!(fib.sentence.iter().filter(|w| *w == "<blank>").count(), 1);
            assert!(s.planted.contains(&fib.answer));
            let mc = s.mc.as_ref().unwrap();
            assert_eq!(mc.choices.len(), DISTRACTORS + 1);
            assert_eq!(mc.choices[mc.answer], s.caption);
            for (j, c) in mc.choices.iter().enumerate() {
                if j != mc.answer {
                    assert!(s.planted.iter().all(|w| !c.contains(w)));
                }
            }
        }
    }

    #[test]
    fn walks_move_at_most_one_cell_and_never_collide() {
        let corpus = generate_synthetic(&small()).unwrap();
        for place in &corpus.placements {
            for n in 0..corpus.spec.frames {
                let cells: BTreeSet<_> = place.iter().map(|p| p.cells[n]).collect();
                assert_eq!(cells.len(), place.len());
            }
            for p in place {
                for w in p.cells.windows(2) {
                    let step = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                    assert!(step <= 1);
                }
            }
        }
    }

    #[test]
    fn nearest_signature_recovers_every_planted_cell() {
        let spec = SyntheticSpec { channels: 8, noise: 0.1, train: 100, ..small() };
        let corpus = generate_synthetic(&spec).unwrap();
        let mut cells = 0;
        for (s, place) in corpus.dataset.samples.iter().zip(&corpus.placements) {
            for p in place {
                for (n, &(r, c)) in p.cells.iter().enumerate() {
                    let off = (r * spec.grid_w + c) * spec.channels;
                    let cell = &s.clip.frame(n)[off..off + spec.channels];
                    assert_eq!(nearest_signature(cell, &corpus.signatures), p.concept);
                    cells += 1;
                }
            }
        }
        assert!(cells >= 1000, "{cells}");
    }

    #[test]
    fn too_many_planted_concepts_is_a_usage_error() {
        let spec = SyntheticSpec { concepts: 2, k: 2, ..small() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Usage(_))));
    }

    #[test]
    fn spec_round_trips_through_key_values() {
        let spec = SyntheticSpec { grid_h: 8, grid_w: 8, seed: 99, ..small() };
        let text = spec.to_kv().to_text();
        let back = SyntheticSpec::from_kv(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let corpus = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.dataset.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, corpus.dataset);
    }
}
