//! Realization networks (speaker, goal set, state set, utterance) and the
//! hierarchically-scaled dropout applied to decoder inputs.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ActOntology, ActTriple, UNK_ID};
use crate::error::{Result, VhdaError};
use crate::nn::{self, Linear, Lstm, LstmState, Mlp, ParamStore};

/// Feature levels ordered from the top of the hierarchy to the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLevel {
    Speaker,
    Goal,
    State,
    Utterance,
    Word,
}

impl FeatureLevel {
    pub const ALL: [FeatureLevel; 5] = [
        FeatureLevel::Speaker,
        FeatureLevel::Goal,
        FeatureLevel::State,
        FeatureLevel::Utterance,
        FeatureLevel::Word,
    ];
}

/// Geometric dropout probabilities `base * ratio^k`, one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    probs: Vec<f64>,
}

pub fn dropout_schedule(base: f64, ratio: f64, n_levels: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&base) {
        return Err(VhdaError::Config(format!("dropout base {base} outside [0, 1)")));
    }
    if ratio < 1.0 {
        return Err(VhdaError::Config(format!("dropout ratio {ratio} < 1")));
    }
    let probs: Vec<f64> = (0..n_levels).map(|k| base * ratio.powi(k as i32)).collect();
    if let Some(p) = probs.iter().find(|&&p| p >= 1.0) {
        return Err(VhdaError::Config(format!("dropout probability {p} >= 1")));
    }
    Ok(probs)
}

impl DropoutSchedule {
    pub fn geometric(base: f64, ratio: f64) -> Result<Self> {
        Ok(Self {
            probs: dropout_schedule(base, ratio, FeatureLevel::ALL.len())?,
        })
    }

    pub fn none() -> Self {
        Self {
            probs: vec![0.0; FeatureLevel::ALL.len()],
        }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() != FeatureLevel::ALL.len() {
            return Err(VhdaError::Config(format!(
                "dropout schedule needs {} levels, got {}",
                FeatureLevel::ALL.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(VhdaError::Config("dropout probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, level: FeatureLevel) -> f64 {
        self.probs[level as usize]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_zero(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep/drop decisions for one batch: per turn row, whether each of the four
/// feature encodings is kept, and per decoder-input word whether it is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub features: Vec<[bool; 4]>,
    pub words: Vec<Vec<bool>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(
        schedule: &DropoutSchedule,
        mode: Mode,
        word_lengths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut draw = |p: f64| mode == Mode::Eval || p == 0.0 || rng.random::<f64>() >= p;
        let mut features = Vec::with_capacity(word_lengths.len());
        let mut words = Vec::with_capacity(word_lengths.len());
        for &len in word_lengths {
            features.push([
                draw(schedule.prob(FeatureLevel::Speaker)),
                draw(schedule.prob(FeatureLevel::Goal)),
                draw(schedule.prob(FeatureLevel::State)),
                draw(schedule.prob(FeatureLevel::Utterance)),
            ]);
            words.push((0..len).map(|_| draw(schedule.prob(FeatureLevel::Word))).collect());
        }
        Self { features, words }
    }

    /// Multiplies each feature block of `v: (rows, total)` by its keep flag.
    pub fn apply_features(&self, v: &Tensor, block_widths: [usize; 4]) -> Result<Tensor> {
        let data: Vec<f64> = self
            .features
            .iter()
            .flat_map(|keep| {
                keep.iter()
                    .zip(block_widths)
                    .flat_map(|(&k, w)| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, w))
                    .collect::<Vec<_>>()
            })
            .collect();
        let total: usize = block_widths.iter().sum();
        let mask = Tensor::from_vec(data, (self.features.len(), total), &nn::device())?;
        Ok((v * mask)?)
    }

    /// Replaces dropped decoder-input words by the unknown token. The first
    /// input of each row (begin-of-utterance) is never dropped.
    pub fn apply_words(&self, inputs: &[Vec<usize>]) -> Vec<Vec<usize>> {
        inputs
            .iter()
            .zip(&self.words)
            .map(|(row, keep)| {
                row.iter()
                    .enumerate()
                    .map(|(i, &tok)| {
                        if i == 0 || keep.get(i).copied().unwrap_or(true) {
                            tok
                        } else {
                            UNK_ID
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// `p(speaker | h_t, z_c, z_r)` as logits over speakers.
#[derive(Debug, Clone)]
pub struct SpeakerDecoder {
    net: Mlp,
    pub n_speakers: usize,
}

impl SpeakerDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        n_speakers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(store, "dec.speaker", in_dim, hidden, n_speakers, rng)?,
            n_speakers,
        })
    }

    pub fn logits(&self, cond: &Tensor) -> Result<Tensor> {
        self.net.forward(cond)
    }

    pub fn probabilities(&self, cond: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(cond)?, D::Minus1)?)
    }
}

/// Feed-forward map into the act-encoding space; candidates are scored by
/// the inner product with their act encodings.
#[derive(Debug, Clone)]
pub struct ActScoringHead {
    net: Mlp,
}

impl ActScoringHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        act_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(store, name, in_dim, hidden, act_dim, rng)?,
        })
    }

    /// `o_t` for every conditioning row.
    pub fn project(&self, cond: &Tensor) -> Result<Tensor> {
        self.net.forward(cond)
    }

    /// Logits `o_t . enc(a)` of every candidate: `(rows, candidates)`.
    pub fn logits(&self, cond: &Tensor, candidates: &Tensor) -> Result<Tensor> {
        Ok(self.project(cond)?.matmul(&candidates.t()?)?)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability that the act with encoding `act` belongs to the set scored by `o`.
pub fn score_act_triple(o: &[f64], act: &[f64]) -> f64 {
    sigmoid(o.iter().zip(act).map(|(a, b)| a * b).sum())
}

/// `{a in ontology : score(o, a) > threshold}` given one encoding row per
/// ontology triple.
pub fn decode_act_set(o: &[f64], act_encodings: &[Vec<f64>], ontology: &ActOntology, threshold: f64) -> Vec<ActTriple> {
    ontology
        .triples()
        .iter()
        .zip(act_encodings)
        .filter(|(_, enc)| score_act_triple(o, enc) > threshold)
        .map(|(a, _)| a.clone())
        .collect()
}

/// Set from precomputed probabilities.
pub fn threshold_set(probs: &[f64], ontology: &ActOntology, threshold: f64) -> Vec<ActTriple> {
    ontology
        .triples()
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > threshold)
        .map(|(a, _)| a.clone())
        .collect()
}

/// LSTM utterance decoder conditioned on the turn's context and latents.
/// The conditioning vector initializes the state and is appended to every
/// input embedding.
#[derive(Debug, Clone)]
pub struct UtteranceDecoder {
    init: Linear,
    cell: Lstm,
    out: Linear,
    pub word_dim: usize,
    pub cond_dim: usize,
    pub vocab_size: usize,
}

impl UtteranceDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        word_dim: usize,
        cond_dim: usize,
        hidden: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            init: Linear::new(store, "dec.utterance.init", cond_dim, hidden, rng)?,
            cell: Lstm::new(store, "dec.utterance.cell", word_dim + cond_dim, hidden, rng)?,
            out: Linear::new(store, "dec.utterance.out", hidden, vocab_size, rng)?,
            word_dim,
            cond_dim,
            vocab_size,
        })
    }

    pub fn initial_state(&self, cond: &Tensor) -> Result<LstmState> {
        let h = nn::tanh(&self.init.forward(cond)?)?;
        let c = h.zeros_like()?;
        Ok(LstmState { h, c })
    }

    /// Teacher-forced logits `(rows, len, vocab)` from embedded inputs
    /// `(rows, len, word_dim)`.
    pub fn teacher_forced_logits(&self, inputs: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (rows, len, _) = inputs.dims3()?;
        let c = cond
            .unsqueeze(1)?
            .broadcast_as((rows, len, self.cond_dim))?
            .contiguous()?;
        let x = Tensor::cat(&[inputs, &c], 2)?;
        let (hs, _) = self.cell.run(&x, Some(self.initial_state(cond)?))?;
        self.out.forward(&hs)
    }

    /// One decoding step: returns next-token probabilities `(rows, vocab)`
    /// and the new state.
    pub fn decode_step(&self, state: &LstmState, prev: &Tensor, cond: &Tensor) -> Result<(Tensor, LstmState)> {
        let x = Tensor::cat(&[prev, cond], 1)?;
        let next = self.cell.step(&x, state)?;
        let probs = candle_nn::ops::softmax(&self.out.forward(&next.h)?, D::Minus1)?;
        Ok((probs, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_schedule() {
        let p = dropout_schedule(0.1, 1.5, 5).unwrap();
        let expected = [0.1, 0.15, 0.225, 0.3375, 0.50625];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let rounded: Vec<f64> = p.iter().map(|x| (x * 100.0).round() / 100.0).collect();
        assert_eq!(rounded, vec![0.1, 0.15, 0.23, 0.34, 0.51]);
        assert_eq!(dropout_schedule(0.1, 1.0, 3).unwrap(), vec![0.1, 0.1, 0.1]);
        assert!(dropout_schedule(0.5, 2.0, 2).is_err());
    }

    #[test]
    fn zero_schedule_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = DropoutMasks::sample(&DropoutSchedule::none(), Mode::Train, &[3, 2], &mut rng);
        assert!(m.features.iter().all(|f| f.iter().all(|&k| k)));
        let inputs = vec![vec![2, 7, 8], vec![2, 9]];
        assert_eq!(m.apply_words(&inputs), inputs);
    }

    #[test]
    fn full_word_dropout_replaces_everything_but_bou() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = DropoutSchedule::from_probs(vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = DropoutMasks::sample(&s, Mode::Train, &[3], &mut rng);
        assert_eq!(m.apply_words(&[vec![2, 7, 8]]), vec![vec![2, UNK_ID, UNK_ID]]);
        let eval = DropoutMasks::sample(&s, Mode::Eval, &[3], &mut rng);
        assert_eq!(eval.apply_words(&[vec![2, 7, 8]]), vec![vec![2, 7, 8]]);
    }

    #[test]
    fn sigmoid_scores() {
        assert_eq!(score_act_triple(&[0.0, 0.0], &[3.0, -1.0]), 0.5);
        let enc = [0.6, -0.8, 1.5];
        let norm2: f64 = enc.iter().map(|x| x * x).sum();
        let o: Vec<f64> = enc.iter().map(|x| 10.0 * x / norm2).collect();
        assert!(score_act_triple(&o, &enc) > 0.999);
    }

    #[test]
    fn act_set_thresholding() {
        let o = ActOntology::from_triples(vec![ActTriple::inform("area", "north"), ActTriple::request("phone")]);
        let encs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(decode_act_set(&[0.0, 0.0], &encs, &o, 0.5).is_empty());
        assert_eq!(decode_act_set(&[0.0, 0.0], &encs, &o, 0.0).len(), 2);
        assert_eq!(
            decode_act_set(&[2.0, -2.0], &encs, &o, 0.5),
            vec![ActTriple::inform("area", "north")]
        );
    }
}
