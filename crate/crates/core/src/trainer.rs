//! Deterministic training loop, Adam, checkpointing and per-step diagnostics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{build_ontology, ActOntology, Dialog, DialogCorpus, Vocabulary};
use crate::decoders::{DropoutSchedule, Mode};
use crate::error::{Result, VhdaError};
use crate::model::{ForwardOptions, LatentMode, ModelConfig, VhdaModel};
use crate::nn::{self, ParamStore};
use crate::objective::{anneal_weight, elbo, kl_decomposition_probe, KlDecomposition, LossBreakdown};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.safetensors";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Linear KL warm-up length; `None` disables annealing (weight 1).
    pub anneal_horizon: Option<u64>,
    pub mi_weight: f64,
    pub dropout_base: f64,
    pub dropout_ratio: f64,
    pub shuffle_acts: bool,
    /// Save a checkpoint every this many steps (needs a checkpoint dir).
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    /// Desk-scale settings sized to memorize a toy corpus in minutes.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            anneal_horizon: Some(500),
            mi_weight: 1.0,
            dropout_base: 0.1,
            dropout_ratio: 1.5,
            shuffle_acts: true,
            checkpoint_every: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            steps: 250_000,
            batch_size: 32,
            anneal_horizon: Some(250_000),
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(VhdaError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(VhdaError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(VhdaError::Config("learning_rate and clip_norm must be positive".into()));
        }
        if self.anneal_horizon == Some(0) {
            return Err(VhdaError::Config("anneal_horizon must be positive".into()));
        }
        if !(self.mi_weight >= 0.0) {
            return Err(VhdaError::Config("mi_weight must be non-negative".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(VhdaError::Config("checkpoint_every must be positive".into()));
        }
        self.dropout()?;
        Ok(())
    }

    pub fn dropout(&self) -> Result<DropoutSchedule> {
        if self.dropout_base == 0.0 {
            return Ok(DropoutSchedule::none());
        }
        DropoutSchedule::geometric(self.dropout_base, self.dropout_ratio)
    }

    pub fn anneal(&self, step: u64) -> f64 {
        match self.anneal_horizon {
            Some(h) => anneal_weight(step, h),
            None => 1.0,
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Adam with per-parameter first/second moment estimates.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        })
    }

    /// One update with gradients already scaled by `scale`.
    pub fn step(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>, scale: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(name) else { continue };
            let g = (g.detach() * scale)?;
            let m = ((&self.m[name] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[name] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            let (m, v) = (m.detach(), v.detach());
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = std::collections::HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        map.insert("t".to_string(), nn::vector(&[self.t as f64])?);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = ParamStore::load_tensors(path)?;
        for (slot, prefix) in [(&mut self.m, "m."), (&mut self.v, "v.")] {
            for (k, t) in slot.iter_mut() {
                let loaded = map
                    .get(&format!("{prefix}{k}"))
                    .ok_or_else(|| VhdaError::Version(format!("optimizer state missing {prefix}{k}")))?;
                if loaded.dims() != t.dims() {
                    return Err(VhdaError::Version(format!("optimizer shape mismatch for {k}")));
                }
                *t = loaded.clone();
            }
        }
        let t = map
            .get("t")
            .ok_or_else(|| VhdaError::Version("optimizer state missing step".into()))?;
        self.t = t.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Decomposition of the global-latent KL on this batch.
    pub global_kl_probe: KlDecomposition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub ontology_hash: String,
    pub vocab: Value,
    pub ontology: Value,
}

pub struct Trainer {
    pub model: VhdaModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub step: u64,
    dialogs: Vec<Dialog>,
    dropout: DropoutSchedule,
    log: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("model", &self.model)
            .finish()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    /// Fresh model whose vocabulary and ontology are built from `corpus`.
    pub fn new(config: TrainConfig, corpus: &DialogCorpus) -> Result<Self> {
        config.validate()?;
        corpus.validate()?;
        if corpus.dialogs.is_empty() {
            return Err(VhdaError::Config("training corpus is empty".into()));
        }
        let ontology = build_ontology(corpus);
        let vocab = Vocabulary::build(corpus, &ontology);
        let model = VhdaModel::new(config.model, vocab, ontology, config.seed)?;
        Self::from_model(model, config, corpus)
    }

    fn from_model(model: VhdaModel, config: TrainConfig, corpus: &DialogCorpus) -> Result<Self> {
        let optimizer = Adam::new(&model.store, config.learning_rate)?;
        let dropout = config.dropout()?;
        Ok(Self {
            model,
            optimizer,
            step: 0,
            dialogs: corpus.dialogs.clone(),
            dropout,
            config,
            log: None,
            checkpoint_dir: None,
        })
    }

    /// Appends one JSON line per step to `path`.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| VhdaError::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn checkpoint_to(&mut self, dir: &Path) {
        self.checkpoint_dir = Some(dir.to_path_buf());
    }

    /// Indices of the dialogs in the batch for `step`: epochs are shuffled by
    /// the run seed, so the order depends only on (seed, step).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.dialogs.len();
        let b = self.config.batch_size.min(n);
        let per_epoch = n.div_ceil(b) as u64;
        let epoch = step / per_epoch;
        let slot = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.config.seed, (1 << 63) | epoch));
        let start = slot * b;
        let end = (start + b).min(n);
        // The last batch of an epoch is filled up from the epoch's head.
        let mut idx = order[start..end].to_vec();
        idx.extend(order.iter().take(b - idx.len()));
        idx
    }

    /// Forward pass and objective for `step` without updating parameters.
    pub fn evaluate_step(&self, step: u64) -> Result<(crate::objective::LossTerms, KlDecomposition, f64)> {
        let mut rng = stream_rng(self.config.seed, step);
        let idx = self.batch_indices(step);
        let dialogs: Vec<&Dialog> = idx.iter().map(|&i| &self.dialogs[i]).collect();
        let mut shuffle_rng = self
            .config
            .shuffle_acts
            .then(|| stream_rng(self.config.seed, (1 << 62) | step));
        let batch = self.model.encode_batch(&dialogs, true, shuffle_rng.as_mut())?;
        let out = self.model.forward(
            &batch,
            &ForwardOptions {
                mode: Mode::Train,
                latents: LatentMode::Sample,
                dropout: &self.dropout,
                posterior_as_prior: false,
            },
            &mut rng,
        )?;
        let anneal = self.config.anneal(step);
        let terms = elbo(&batch, &out, anneal, self.config.mi_weight)?;
        let probe = kl_decomposition_probe(&out.q_global.detach(), &out.z_global.detach())?;
        Ok((terms, probe, anneal))
    }

    /// Runs one optimization step and returns its diagnostics.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let (terms, probe, anneal) = self.evaluate_step(step)?;
        let loss = terms.breakdown(anneal)?;
        if !loss.is_finite() {
            return self.diverged(step, &loss);
        }
        let grads = terms.total.backward()?;
        let mut named = BTreeMap::new();
        let mut sq = 0.0;
        for (name, var) in self.model.store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += nn::scalar(&g.sqr()?.sum_all()?)?;
                named.insert(name.clone(), g.clone());
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return self.diverged(step, &loss);
        }
        let scale = if grad_norm > self.config.clip_norm {
            self.config.clip_norm / grad_norm
        } else {
            1.0
        };
        self.optimizer.step(&self.model.store, &named, scale)?;
        self.step += 1;
        let record = StepRecord {
            step,
            loss,
            grad_norm,
            global_kl_probe: probe,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}").map_err(|e| VhdaError::io(Path::new("<train log>"), e))?;
        }
        if let (Some(every), Some(dir)) = (self.config.checkpoint_every, self.checkpoint_dir.clone()) {
            if self.step.is_multiple_of(every) {
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(record)
    }

    fn diverged(&mut self, step: u64, loss: &LossBreakdown) -> Result<StepRecord> {
        if let Some(dir) = self.checkpoint_dir.clone() {
            self.save_checkpoint(&dir)?;
        }
        self.flush_log()?;
        Err(VhdaError::Diverged {
            step,
            report: serde_json::to_string(loss)?,
        })
    }

    /// Trains until `config.steps` total steps, calling `on_step` after each.
    pub fn train(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step()?;
            on_step(&r);
            records.push(r);
        }
        self.flush_log()?;
        if let Some(dir) = self.checkpoint_dir.clone() {
            self.save_checkpoint(&dir)?;
        }
        Ok(records)
    }

    pub fn flush_log(&mut self) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| VhdaError::io(Path::new("<train log>"), e))?;
        }
        Ok(())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            vocab_hash: self.model.vocab.hash(),
            ontology_hash: self.model.ontology.hash(),
            vocab: self.model.vocab.to_json(),
            ontology: self.model.ontology.to_json(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| VhdaError::io(dir, e))?;
        self.model.store.save(&dir.join(PARAMS_FILE))?;
        self.optimizer.save(&dir.join(OPTIMIZER_FILE))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        let path = dir.join(META_FILE);
        fs::write(&path, meta).map_err(|e| VhdaError::io(&path, e))?;
        Ok(())
    }

    /// Restores a trainer to continue on `corpus`. The corpus must induce the
    /// same vocabulary and ontology, and `config` (when given) must hash to the
    /// stored configuration.
    pub fn resume(dir: &Path, corpus: &DialogCorpus, config: Option<&TrainConfig>) -> Result<Self> {
        let (model, meta) = load_model(dir)?;
        if let Some(c) = config {
            if c.hash() != meta.config_hash {
                return Err(VhdaError::Version("configuration differs from checkpoint".into()));
            }
        }
        let ontology = build_ontology(corpus);
        if ontology.hash() != meta.ontology_hash {
            return Err(VhdaError::Version("ontology hash differs from checkpoint".into()));
        }
        if Vocabulary::build(corpus, &ontology).hash() != meta.vocab_hash {
            return Err(VhdaError::Version("vocabulary hash differs from checkpoint".into()));
        }
        let mut t = Self::from_model(model, meta.config.clone(), corpus)?;
        t.optimizer.load(&dir.join(OPTIMIZER_FILE))?;
        t.step = meta.step;
        Ok(t)
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| VhdaError::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(VhdaError::Version(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(VhdaError::Version(
            "stored configuration does not match its hash".into(),
        ));
    }
    Ok(meta)
}

/// Loads model parameters, vocabulary and ontology from a checkpoint.
pub fn load_model(dir: &Path) -> Result<(VhdaModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let vocab = Vocabulary::from_json(&meta.vocab)?;
    let ontology = ActOntology::from_json(&meta.ontology)?;
    if vocab.hash() != meta.vocab_hash || ontology.hash() != meta.ontology_hash {
        return Err(VhdaError::Version("vocabulary or ontology hash mismatch".into()));
    }
    let model = VhdaModel::new(meta.config.model, vocab, ontology, meta.config.seed)?;
    model.store.assign(&ParamStore::load_tensors(&dir.join(PARAMS_FILE))?)?;
    Ok((model, meta))
}

/// Diagnostics summary as loosely-typed JSON (used by the run manifest).
pub fn summarize(records: &[StepRecord]) -> Value {
    match records.last() {
        Some(r) => json!({
            "steps": records.len(),
            "final_total": r.loss.total,
            "final_recon": r.loss.recon_total(),
            "final_kl_c": r.loss.kl_per_level.get("c"),
        }),
        None => json!({"steps": 0}),
    }
}
