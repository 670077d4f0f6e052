//! The assembled autoencoder: configuration, batch tensorization and the
//! batched recognition forward pass used for training and reconstruction.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    shuffle_act_order, ActOntology, Dialog, Speaker, Turn, Vocabulary, BOU_ID, EOD_ID, EOU_ID, PAD_ID,
};
use crate::decoders::{ActScoringHead, DropoutMasks, DropoutSchedule, Mode, SpeakerDecoder, UtteranceDecoder};
use crate::encoders::{ActSetKind, EncoderWidths, FeatureEncoders};
use crate::error::{Result, VhdaError};
use crate::latent::{
    kl_to_standard, reparameterize, ChainInputs, ContextEncoder, GaussianParams, LatentChain, LatentWidths, Level,
};
use crate::nn::{self, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub act_dim: usize,
    pub goal_dim: usize,
    pub state_dim: usize,
    pub utterance_dim: usize,
    pub conversation_dim: usize,
    pub speaker_dim: usize,
    pub context_dim: usize,
    pub latent_conversation: usize,
    pub latent_turn: usize,
    pub decoder_hidden: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale widths.
    pub fn toy() -> Self {
        Self {
            word_dim: 32,
            act_dim: 32,
            goal_dim: 32,
            state_dim: 32,
            utterance_dim: 48,
            conversation_dim: 32,
            speaker_dim: 8,
            context_dim: 64,
            latent_conversation: 16,
            latent_turn: 8,
            decoder_hidden: 64,
            head_hidden: 32,
        }
    }

    /// Full-size widths.
    pub fn paper() -> Self {
        Self {
            word_dim: 400,
            act_dim: 500,
            goal_dim: 500,
            state_dim: 500,
            utterance_dim: 500,
            conversation_dim: 500,
            speaker_dim: 32,
            context_dim: 1000,
            latent_conversation: 200,
            latent_turn: 100,
            decoder_hidden: 1000,
            head_hidden: 500,
        }
    }

    /// Every width set to `w` (used for gradient checks).
    pub fn uniform(w: usize) -> Self {
        Self {
            word_dim: w,
            act_dim: w,
            goal_dim: w,
            state_dim: w,
            utterance_dim: w,
            conversation_dim: w,
            speaker_dim: w,
            context_dim: w,
            latent_conversation: w,
            latent_turn: w,
            decoder_hidden: w,
            head_hidden: w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.word_dim,
            self.act_dim,
            self.goal_dim,
            self.state_dim,
            self.utterance_dim,
            self.conversation_dim,
            self.speaker_dim,
            self.context_dim,
            self.latent_conversation,
            self.latent_turn,
            self.decoder_hidden,
            self.head_hidden,
        ];
        if all.contains(&0) {
            return Err(VhdaError::Config("all model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.speaker_dim + self.goal_dim + self.state_dim + self.utterance_dim
    }

    fn feature_blocks(&self) -> [usize; 4] {
        [self.speaker_dim, self.goal_dim, self.state_dim, self.utterance_dim]
    }
}

/// How latent values are chosen from their Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub latents: LatentMode,
    pub dropout: &'a DropoutSchedule,
    /// Test knob: use the priors as posteriors (KL becomes exactly zero).
    pub posterior_as_prior: bool,
}

/// Dialog batch flattened to `dialogs x max_turns` turn rows.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub n_dialogs: usize,
    pub max_turns: usize,
    /// Turns per dialog including the end-of-dialog sentinel when present.
    pub turn_counts: Vec<usize>,
    /// Real (non-sentinel) turns per dialog.
    pub real_counts: Vec<usize>,
    pub valid: Vec<bool>,
    pub sentinel: Vec<bool>,
    pub speakers: Vec<usize>,
    pub goal_sets: Vec<Vec<usize>>,
    pub state_sets: Vec<Vec<usize>>,
    pub goal_targets: Vec<Vec<f64>>,
    pub state_targets: Vec<Vec<f64>>,
    pub words: Vec<Vec<usize>>,
    pub dec_inputs: Vec<Vec<usize>>,
    pub dec_targets: Vec<Vec<usize>>,
}

impl EncodedBatch {
    pub fn rows(&self) -> usize {
        self.n_dialogs * self.max_turns
    }

    pub fn valid_mask(&self) -> Result<Tensor> {
        nn::vector(
            &self
                .valid
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        )
    }

    pub fn row(&self, dialog: usize, turn: usize) -> usize {
        dialog * self.max_turns + turn
    }
}

pub struct VhdaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: FeatureEncoders,
    pub context: ContextEncoder,
    pub chain: LatentChain,
    pub speaker_decoder: SpeakerDecoder,
    pub goal_head: ActScoringHead,
    pub state_head: ActScoringHead,
    pub utterance_decoder: UtteranceDecoder,
    pub vocab: Vocabulary,
    pub ontology: ActOntology,
    /// Token ids of every ontology triple followed by the empty-set entry.
    act_tokens: Vec<Vec<usize>>,
}

impl std::fmt::Debug for VhdaModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VhdaModel")
            .field("config", &self.config)
            .field("parameters", &self.store.num_scalars())
            .field("vocab", &self.vocab.len())
            .field("ontology", &self.ontology.len())
            .finish()
    }
}

/// Everything produced by one recognition pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub q_global: GaussianParams,
    pub z_global: Tensor,
    /// Posterior and prior parameters of the turn levels r, g, s, u over all
    /// turn rows.
    pub posteriors: Vec<GaussianParams>,
    pub priors: Vec<GaussianParams>,
    pub speaker_logits: Tensor,
    pub goal_logits: Tensor,
    pub state_logits: Tensor,
    pub word_logits: Tensor,
}

impl ForwardOutput {
    /// KL of the global latent against the standard prior, per dialog.
    pub fn kl_global(&self) -> Result<Tensor> {
        kl_to_standard(&self.q_global)
    }
}

impl VhdaModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, ontology: ActOntology, seed: u64) -> Result<Self> {
        config.validate()?;
        if ontology.is_empty() {
            return Err(VhdaError::Config("ontology is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let encoders = FeatureEncoders::new(
            &mut store,
            vocab.len(),
            EncoderWidths {
                word: c.word_dim,
                act: c.act_dim,
                goal: c.goal_dim,
                state: c.state_dim,
                utterance: c.utterance_dim,
                conversation: c.conversation_dim,
                speaker: c.speaker_dim,
                n_speakers: Speaker::COUNT,
                query: c.latent_conversation,
            },
            &mut rng,
        )?;
        let context = ContextEncoder::new(&mut store, c.feature_dim(), c.context_dim, &mut rng)?;
        let chain = LatentChain::new(
            &mut store,
            c.context_dim,
            c.conversation_dim,
            c.feature_blocks(),
            LatentWidths {
                conversation: c.latent_conversation,
                turn: c.latent_turn,
            },
            &mut rng,
        )?;
        let base = c.context_dim + c.latent_conversation;
        let speaker_decoder = SpeakerDecoder::new(
            &mut store,
            base + c.latent_turn,
            c.head_hidden,
            Speaker::COUNT,
            &mut rng,
        )?;
        let goal_head = ActScoringHead::new(
            &mut store,
            "dec.goal",
            base + 2 * c.latent_turn,
            c.head_hidden,
            c.act_dim,
            &mut rng,
        )?;
        let state_head = ActScoringHead::new(
            &mut store,
            "dec.state",
            base + 3 * c.latent_turn,
            c.head_hidden,
            c.act_dim,
            &mut rng,
        )?;
        let utterance_decoder = UtteranceDecoder::new(
            &mut store,
            c.word_dim,
            base + 4 * c.latent_turn,
            c.decoder_hidden,
            vocab.len(),
            &mut rng,
        )?;
        let mut act_tokens: Vec<Vec<usize>> = ontology
            .triples()
            .iter()
            .map(|a| a.tokens().iter().map(|t| vocab.id(t)).collect())
            .collect();
        act_tokens.push(vec![crate::corpus::EMPTY_ID]);
        Ok(Self {
            config,
            store,
            encoders,
            context,
            chain,
            speaker_decoder,
            goal_head,
            state_head,
            utterance_decoder,
            vocab,
            ontology,
            act_tokens,
        })
    }

    /// Index of the empty-set entry in the act table.
    pub fn empty_act_row(&self) -> usize {
        self.ontology.len()
    }

    /// Act encodings of all ontology triples plus the empty-set token:
    /// `(K + 1, act_dim)`.
    pub fn act_table(&self) -> Result<Tensor> {
        self.encoders.encode_acts(&self.act_tokens)
    }

    /// Hash of all parameter values.
    pub fn parameter_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.store.vars() {
            h.update(name.as_bytes());
            let v: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn set_rows(&self, set: &[crate::corpus::ActTriple]) -> Result<Vec<usize>> {
        if set.is_empty() {
            return Ok(vec![self.empty_act_row()]);
        }
        set.iter()
            .map(|a| {
                self.ontology.index_of(a).ok_or_else(|| VhdaError::Schema {
                    dialog_id: None,
                    message: format!("triple {a} is not in the model ontology"),
                })
            })
            .collect()
    }

    fn multi_hot(&self, set: &[crate::corpus::ActTriple]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.ontology.len()];
        for i in self.set_rows(set)? {
            if i < v.len() {
                v[i] = 1.0;
            }
        }
        Ok(v)
    }

    pub fn utterance_ids(&self, turn: &Turn) -> Vec<usize> {
        turn.utterance.iter().map(|w| self.vocab.id(w)).collect()
    }

    /// Tensorizes dialogs; with `sentinel`, an end-of-dialog turn is appended
    /// to each. When `shuffle_rng` is given, act order within goal and state
    /// sets is randomized.
    pub fn encode_batch(
        &self,
        dialogs: &[&Dialog],
        sentinel: bool,
        mut shuffle_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedBatch> {
        if dialogs.is_empty() {
            return Err(VhdaError::Config("empty batch".into()));
        }
        let real_counts: Vec<usize> = dialogs.iter().map(|d| d.turns.len()).collect();
        if real_counts.contains(&0) {
            return Err(VhdaError::Schema {
                dialog_id: None,
                message: "dialog without turns".into(),
            });
        }
        let extra = usize::from(sentinel);
        let turn_counts: Vec<usize> = real_counts.iter().map(|c| c + extra).collect();
        let max_turns = *turn_counts.iter().max().expect("non-empty");
        let rows = dialogs.len() * max_turns;
        let k = self.ontology.len();
        let mut b = EncodedBatch {
            n_dialogs: dialogs.len(),
            max_turns,
            turn_counts,
            real_counts,
            valid: vec![false; rows],
            sentinel: vec![false; rows],
            speakers: vec![0; rows],
            goal_sets: vec![vec![self.empty_act_row()]; rows],
            state_sets: vec![vec![self.empty_act_row()]; rows],
            goal_targets: vec![vec![0.0; k]; rows],
            state_targets: vec![vec![0.0; k]; rows],
            words: vec![vec![PAD_ID]; rows],
            dec_inputs: vec![vec![BOU_ID]; rows],
            dec_targets: vec![vec![EOU_ID]; rows],
        };
        for (di, dialog) in dialogs.iter().enumerate() {
            for (ti, turn) in dialog.turns.iter().enumerate() {
                let r = b.row(di, ti);
                let turn = match shuffle_rng.as_deref_mut() {
                    Some(rng) => shuffle_act_order(turn, rng),
                    None => turn.clone(),
                };
                b.valid[r] = true;
                b.speakers[r] = turn.speaker.id();
                b.goal_sets[r] = self.set_rows(&turn.goal)?;
                b.state_sets[r] = self.set_rows(&turn.state)?;
                b.goal_targets[r] = self.multi_hot(&turn.goal)?;
                b.state_targets[r] = self.multi_hot(&turn.state)?;
                let ids = self.utterance_ids(&turn);
                if ids.is_empty() {
                    return Err(VhdaError::Schema {
                        dialog_id: Some(dialog.id.clone()),
                        message: format!("turn {ti}: empty utterance"),
                    });
                }
                b.dec_inputs[r] = std::iter::once(BOU_ID).chain(ids.iter().copied()).collect();
                b.dec_targets[r] = ids.iter().copied().chain(std::iter::once(EOU_ID)).collect();
                b.words[r] = ids;
            }
            if sentinel {
                let ti = dialog.turns.len();
                let r = b.row(di, ti);
                let last = dialog.turns.last().expect("non-empty").speaker.id();
                b.valid[r] = true;
                b.sentinel[r] = true;
                b.speakers[r] = (last + 1) % Speaker::COUNT;
                b.words[r] = vec![EOD_ID];
                b.dec_inputs[r] = vec![BOU_ID, EOD_ID];
                b.dec_targets[r] = vec![EOD_ID, EOU_ID];
            }
        }
        Ok(b)
    }

    /// Approximate posterior of the global latent from utterances alone,
    /// pooled with a null query (recognition pass one).
    pub fn global_posterior(&self, batch: &EncodedBatch) -> Result<GaussianParams> {
        let (states, lengths) = self.encoders.utterance_states(&batch.words)?;
        self.global_posterior_from_states(batch, &states, &lengths)
    }

    fn global_posterior_from_states(
        &self,
        batch: &EncodedBatch,
        states: &Tensor,
        lengths: &[usize],
    ) -> Result<GaussianParams> {
        let h_u = self.encoders.pool_utterances(states, lengths, None)?;
        let h_u = h_u.reshape((batch.n_dialogs, batch.max_turns, self.config.utterance_dim))?;
        let conv = self.encoders.encode_conversation(&h_u, &batch.real_counts)?;
        self.chain.posterior_global(&conv)
    }

    /// Speaker, goal and state feature encodings for every turn row given
    /// the global latent of each row.
    pub fn annotation_features(
        &self,
        act_table: &Tensor,
        speakers: &[usize],
        goal_sets: &[Vec<usize>],
        state_sets: &[Vec<usize>],
        z_rows: &Tensor,
    ) -> Result<[Tensor; 3]> {
        let h_r = self.encoders.embed_speakers(speakers)?;
        let h_g = self
            .encoders
            .encode_act_sets(ActSetKind::Goal, act_table, goal_sets, Some(z_rows))?;
        let h_s = self
            .encoders
            .encode_act_sets(ActSetKind::State, act_table, state_sets, Some(z_rows))?;
        Ok([h_r, h_g, h_s])
    }

    /// Full recognition pass: infer `z_c`, encode features under `z_c`, run
    /// the context recurrence, sample the posterior chain and score every
    /// decoder. `rng` drives latent noise and dropout.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &EncodedBatch,
        opts: &ForwardOptions<'_>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let b = batch.n_dialogs;
        let t = batch.max_turns;
        let rows = batch.rows();

        let (utt_states, utt_lengths) = self.encoders.utterance_states(&batch.words)?;
        let q_global = if opts.posterior_as_prior {
            GaussianParams::standard(b, c.latent_conversation)?
        } else {
            self.global_posterior_from_states(batch, &utt_states, &utt_lengths)?
        };
        let pick = |p: &GaussianParams, rng: &mut R| -> Result<Tensor> {
            match opts.latents {
                LatentMode::Mean => Ok(p.mean.contiguous()?),
                LatentMode::Sample => reparameterize(p, &nn::standard_normal(rng, p.mean.dims())?),
            }
        };
        let z_global = pick(&q_global, rng)?;
        let row_dialog: Vec<usize> = (0..rows).map(|r| r / t).collect();
        let z_rows = z_global.index_select(&nn::index_tensor(&row_dialog)?, 0)?;

        let act_table = self.act_table()?;
        let [h_r, h_g, h_s] = self.annotation_features(
            &act_table,
            &batch.speakers,
            &batch.goal_sets,
            &batch.state_sets,
            &z_rows,
        )?;
        let h_u = self
            .encoders
            .pool_utterances(&utt_states, &utt_lengths, Some(&z_rows))?;
        let features = [h_r, h_g, h_s, h_u];
        let v = Tensor::cat(&features, 1)?;
        let word_lengths: Vec<usize> = batch.dec_inputs.iter().map(Vec::len).collect();
        let masks = DropoutMasks::sample(opts.dropout, opts.mode, &word_lengths, rng);
        let v_in = match opts.mode {
            Mode::Train if !opts.dropout.is_zero() => masks.apply_features(&v, c.feature_blocks())?,
            _ => v.clone(),
        };
        let h = self
            .context
            .run(&v_in.reshape((b, t, c.feature_dim()))?)?
            .reshape((rows, c.context_dim))?;

        let mut posteriors = Vec::with_capacity(4);
        let mut priors = Vec::with_capacity(4);
        let mut zs: Vec<Tensor> = Vec::with_capacity(4);
        for (i, level) in Level::TURN_LEVELS.iter().enumerate() {
            let inputs = ChainInputs {
                context: &h,
                global: &z_rows,
                z_speaker: zs.first(),
                z_goal: zs.get(1),
                z_state: zs.get(2),
            };
            let prior = self.chain.prior_params(*level, &inputs)?;
            let post = if opts.posterior_as_prior {
                prior.clone()
            } else {
                self.chain.posterior_params(*level, &inputs, &features[i])?
            };
            zs.push(pick(&post, rng)?);
            posteriors.push(post);
            priors.push(prior);
        }

        let cond = |n: usize| -> Result<Tensor> {
            let mut parts: Vec<&Tensor> = vec![&h, &z_rows];
            parts.extend(zs.iter().take(n));
            Ok(Tensor::cat(&parts, 1)?)
        };
        let candidates = act_table.narrow(0, 0, self.ontology.len())?;
        let speaker_logits = self.speaker_decoder.logits(&cond(1)?)?;
        let goal_logits = self.goal_head.logits(&cond(2)?, &candidates)?;
        let state_logits = self.state_head.logits(&cond(3)?, &candidates)?;

        let dec_inputs = match opts.mode {
            Mode::Train => masks.apply_words(&batch.dec_inputs),
            Mode::Eval => batch.dec_inputs.clone(),
        };
        let (emb, _) = self.encoders.embed_tokens(&dec_inputs)?;
        let word_logits = self.utterance_decoder.teacher_forced_logits(&emb, &cond(4)?)?;

        Ok(ForwardOutput {
            q_global,
            z_global,
            posteriors,
            priors,
            speaker_logits,
            goal_logits,
            state_logits,
            word_logits,
        })
    }
}

/// Teacher-forced reconstruction quality on real (non-sentinel) turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub token_accuracy: f64,
    pub goal_f1: f64,
    pub state_f1: f64,
    pub speaker_accuracy: f64,
}

/// Micro-averaged F1 from counts; 1.0 when there is nothing to predict.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

fn set_counts(logits: &[Vec<f64>], targets: &[Vec<f64>], valid: &[bool]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((l, t), &ok) in logits.iter().zip(targets).zip(valid) {
        if !ok {
            continue;
        }
        for (&x, &y) in l.iter().zip(t) {
            match (x > 0.0, y > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

impl VhdaModel {
    /// Evaluation-mode forward pass with every latent at its posterior mean.
    pub fn forward_eval(&self, batch: &EncodedBatch) -> Result<ForwardOutput> {
        let none = DropoutSchedule::none();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(
            batch,
            &ForwardOptions {
                mode: Mode::Eval,
                latents: LatentMode::Mean,
                dropout: &none,
                posterior_as_prior: false,
            },
            &mut rng,
        )
    }

    pub fn reconstruct(&self, dialogs: &[&Dialog]) -> Result<ReconstructionReport> {
        let batch = self.encode_batch(dialogs, false, None)?;
        let out = self.forward_eval(&batch)?;
        let real: Vec<bool> = batch
            .valid
            .iter()
            .zip(&batch.sentinel)
            .map(|(&v, &s)| v && !s)
            .collect();

        let words = out.word_logits.argmax(2)?.to_vec2::<u32>()?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (r, target) in batch.dec_targets.iter().enumerate() {
            if !real[r] {
                continue;
            }
            for (i, &w) in target.iter().enumerate() {
                total += 1;
                hit += usize::from(words[r][i] as usize == w);
            }
        }
        let speakers = out.speaker_logits.argmax(1)?.to_vec1::<u32>()?;
        let (mut s_hit, mut s_total) = (0usize, 0usize);
        for (r, &ok) in real.iter().enumerate() {
            if ok {
                s_total += 1;
                s_hit += usize::from(speakers[r] as usize == batch.speakers[r]);
            }
        }
        let goal = set_counts(&out.goal_logits.to_vec2()?, &batch.goal_targets, &real);
        let state = set_counts(&out.state_logits.to_vec2()?, &batch.state_targets, &real);
        Ok(ReconstructionReport {
            token_accuracy: hit as f64 / total.max(1) as f64,
            goal_f1: f1_from_counts(goal.0, goal.1, goal.2),
            state_f1: f1_from_counts(state.0, state.1, state.2),
            speaker_accuracy: s_hit as f64 / s_total.max(1) as f64,
        })
    }
}
