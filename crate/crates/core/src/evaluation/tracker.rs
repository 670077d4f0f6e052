//! A small recurrent dialog state tracker: bidirectional LSTM encodings of
//! the user utterance and the preceding system utterance, scored against
//! every ontology triple with a sigmoid per candidate. Goals are accumulated
//! from predicted informs.

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{accumulate_goal, ActOntology, ActTriple, Dialog, DialogCorpus, Speaker, Vocabulary, EMPTY_ID};
use crate::error::{Result, VhdaError};
use crate::evaluation::metrics::{gold_labels, MetricReport, TurnLabels, TurnSelection};
use crate::nn::{self, Embedding, Init, Linear, Lstm, ParamStore};
use crate::trainer::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub word_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub threshold: f64,
    pub selection: TurnSelection,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            hidden: 32,
            epochs: 200,
            batch_size: 16,
            learning_rate: 5e-3,
            clip_norm: 5.0,
            threshold: 0.5,
            selection: TurnSelection::User,
        }
    }
}

#[derive(Debug, Clone)]
struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl BiLstm {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    /// Concatenated final states of both directions, `(batch, 2h)`.
    fn final_states(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.fwd.hidden;
        let last: Vec<usize> = lengths.iter().enumerate().map(|(i, &l)| i * n + l - 1).collect();
        let last = nn::index_tensor(&last)?;
        let (f, _) = self.fwd.run(x, None)?;
        let f = f.reshape((b * n, h))?.index_select(&last, 0)?;
        let rev: Vec<usize> = lengths
            .iter()
            .enumerate()
            .flat_map(|(bi, &len)| (0..n).map(move |i| bi * n + if i < len { len - 1 - i } else { i }))
            .collect();
        let xr = x
            .reshape((b * n, d))?
            .index_select(&nn::index_tensor(&rev)?, 0)?
            .reshape((b, n, d))?;
        let (r, _) = self.bwd.run(&xr, None)?;
        let r = r.reshape((b * n, h))?.index_select(&last, 0)?;
        Ok(Tensor::cat(&[f, r], 1)?)
    }
}

pub struct Tracker {
    pub config: TrackerConfig,
    pub vocab: Vocabulary,
    pub ontology: ActOntology,
    store: ParamStore,
    words: Embedding,
    user: BiLstm,
    system: BiLstm,
    context: Linear,
    candidate: Linear,
    act_tokens: Vec<usize>,
}

impl std::fmt::Debug for Tracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tracker")
            .field("config", &self.config)
            .field("ontology", &self.ontology.len())
            .finish()
    }
}

/// Inputs and targets of one tracked turn.
struct TurnExample {
    user: Vec<usize>,
    system: Vec<usize>,
    target: Vec<f64>,
}

impl Tracker {
    fn new(vocab: Vocabulary, ontology: ActOntology, config: TrackerConfig, seed: u64) -> Result<Self> {
        if ontology.is_empty() {
            return Err(VhdaError::Config("tracker ontology is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, h) = (config.word_dim, config.hidden);
        let words = Embedding::new(&mut store, "trk.words", vocab.len(), w, Init::Uniform(0.1), &mut rng)?;
        let user = BiLstm::new(&mut store, "trk.user", w, h, &mut rng)?;
        let system = BiLstm::new(&mut store, "trk.system", w, h, &mut rng)?;
        let context = Linear::new(&mut store, "trk.context", 4 * h, h, &mut rng)?;
        let candidate = Linear::new(&mut store, "trk.candidate", 3 * w, h, &mut rng)?;
        let act_tokens = ontology
            .triples()
            .iter()
            .flat_map(|a| a.tokens().map(|t| vocab.id(t)))
            .collect();
        Ok(Self {
            config,
            vocab,
            ontology,
            store,
            words,
            user,
            system,
            context,
            candidate,
            act_tokens,
        })
    }

    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        if tokens.is_empty() {
            return vec![EMPTY_ID];
        }
        tokens.iter().map(|w| self.vocab.id(w)).collect()
    }

    /// `(user, previous system utterance)` ids for every evaluated turn.
    fn turn_inputs(&self, dialog: &Dialog) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut prev_system: &[String] = &[];
        let mut out = Vec::new();
        for turn in &dialog.turns {
            if self.config.selection.includes(turn) {
                out.push((self.ids(&turn.utterance), self.ids(prev_system)));
            }
            if turn.speaker == Speaker::Wizard {
                prev_system = &turn.utterance;
            }
        }
        out
    }

    fn embed(&self, rows: &[&Vec<usize>]) -> Result<(Tensor, Vec<usize>)> {
        let n = rows.iter().map(|r| r.len()).max().unwrap_or(1);
        let lengths: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        let flat: Vec<usize> = rows
            .iter()
            .flat_map(|r| r.iter().copied().chain(std::iter::repeat_n(0, n - r.len())))
            .collect();
        let x = self
            .words
            .lookup(&flat)?
            .reshape((rows.len(), n, self.config.word_dim))?;
        Ok((x, lengths))
    }

    /// Candidate logits `(turns, K)`.
    fn logits(&self, user: &[&Vec<usize>], system: &[&Vec<usize>]) -> Result<Tensor> {
        let (xu, lu) = self.embed(user)?;
        let (xs, ls) = self.embed(system)?;
        let u = self.user.final_states(&xu, &lu)?;
        let s = self.system.final_states(&xs, &ls)?;
        let r = nn::tanh(&self.context.forward(&Tensor::cat(&[u, s], 1)?)?)?;
        let k = self.ontology.len();
        let cand_in = self
            .words
            .lookup(&self.act_tokens)?
            .reshape((k, 3 * self.config.word_dim))?;
        let c = nn::tanh(&self.candidate.forward(&cand_in)?)?;
        Ok(r.matmul(&c.t()?)?)
    }

    fn examples(&self, corpus: &DialogCorpus) -> Vec<TurnExample> {
        let mut out = Vec::new();
        for d in &corpus.dialogs {
            let turns = d.turns.iter().filter(|t| self.config.selection.includes(t));
            for ((user, system), turn) in self.turn_inputs(d).into_iter().zip(turns) {
                let mut target = vec![0.0; self.ontology.len()];
                for a in &turn.state {
                    if let Some(i) = self.ontology.index_of(a) {
                        target[i] = 1.0;
                    }
                }
                out.push(TurnExample { user, system, target });
            }
        }
        out
    }

    /// Predicted labels for every evaluated turn of `dialog`.
    pub fn predict_dialog(&self, dialog: &Dialog) -> Result<Vec<TurnLabels>> {
        let inputs = self.turn_inputs(dialog);
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let users: Vec<&Vec<usize>> = inputs.iter().map(|(u, _)| u).collect();
        let systems: Vec<&Vec<usize>> = inputs.iter().map(|(_, s)| s).collect();
        let logits = self.logits(&users, &systems)?.to_vec2::<f64>()?;
        let threshold_logit = (self.config.threshold / (1.0 - self.config.threshold)).ln();
        let mut goal: Vec<ActTriple> = Vec::new();
        let mut out = Vec::with_capacity(logits.len());
        for row in logits {
            let acts: Vec<&ActTriple> = row
                .iter()
                .zip(self.ontology.triples())
                .filter(|(&x, _)| x > threshold_logit)
                .map(|(_, a)| a)
                .collect();
            goal = accumulate_goal(&goal, acts.iter().copied());
            out.push(TurnLabels {
                goal: goal.iter().cloned().collect(),
                requests: acts.iter().filter(|a| a.is_request()).map(|a| (*a).clone()).collect(),
                informs: acts.iter().filter(|a| a.is_inform()).map(|a| (*a).clone()).collect(),
            });
        }
        Ok(out)
    }

    pub fn evaluate(&self, corpus: &DialogCorpus) -> Result<MetricReport> {
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for d in &corpus.dialogs {
            pred.extend(self.predict_dialog(d)?);
            gold.extend(gold_labels(d, self.config.selection));
        }
        MetricReport::compute(&pred, &gold)
    }
}

/// Trains a tracker for a fixed number of epochs. `ontology` is the label
/// space (typically known in advance for the whole domain); the vocabulary
/// is built from `corpus` plus the ontology's tokens.
pub fn train_tracker(
    corpus: &DialogCorpus,
    ontology: &ActOntology,
    config: &TrackerConfig,
    seed: u64,
) -> Result<Tracker> {
    if config.batch_size == 0 || config.word_dim == 0 || config.hidden == 0 {
        return Err(VhdaError::Config(
            "tracker widths and batch size must be positive".into(),
        ));
    }
    let vocab = Vocabulary::build(corpus, ontology);
    let tracker = Tracker::new(vocab, ontology.clone(), *config, seed)?;
    let examples = tracker.examples(corpus);
    if examples.is_empty() {
        return Ok(tracker);
    }
    let mut adam = Adam::new(&tracker.store, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let users: Vec<&Vec<usize>> = chunk.iter().map(|&i| &examples[i].user).collect();
            let systems: Vec<&Vec<usize>> = chunk.iter().map(|&i| &examples[i].system).collect();
            let targets: Vec<Vec<f64>> = chunk.iter().map(|&i| examples[i].target.clone()).collect();
            let logits = tracker.logits(&users, &systems)?;
            let loss =
                (nn::bce_with_logits(&logits, &nn::tensor_from_rows(&targets)?)?.sum_all()? / chunk.len() as f64)?;
            let grads = loss.backward()?;
            let mut named = BTreeMap::new();
            let mut sq = 0.0;
            for (name, var) in tracker.store.vars() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    sq += nn::scalar(&g.sqr()?.sum_all()?)?;
                    named.insert(name.clone(), g.clone());
                }
            }
            let norm: f64 = sq.sqrt();
            if !norm.is_finite() {
                return Err(VhdaError::Diverged {
                    step: adam.t,
                    report: "tracker gradient is not finite".into(),
                });
            }
            let scale = if norm > config.clip_norm {
                config.clip_norm / norm
            } else {
                1.0
            };
            adam.step(&tracker.store, &named, scale)?;
        }
    }
    Ok(tracker)
}
