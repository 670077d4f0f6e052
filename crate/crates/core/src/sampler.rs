//! Anchored ancestral sampling, latent interpolation and corpus augmentation.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    validate_dialog, ActTriple, Dialog, DialogCorpus, Provenance, Speaker, Turn, BOU_ID, EMPTY_ID, EOD_ID, EOU_ID,
    PAD_ID, UNK_ID,
};
use crate::error::{Result, VhdaError};
use crate::latent::{reparameterize, ChainInputs, GaussianParams, Level};
use crate::model::VhdaModel;
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Backstop on generated dialog length.
    pub max_turns: usize,
    pub max_utterance_len: usize,
    /// Draw turn-level latents from their priors instead of using the means.
    pub stochastic_priors: bool,
    /// Probability above which an act triple enters a decoded set.
    pub threshold: f64,
}

impl SamplerConfig {
    /// Limits derived from a corpus: twice the 95th-percentile dialog length
    /// and twice the longest utterance.
    pub fn for_corpus(corpus: &DialogCorpus) -> Self {
        let longest = corpus
            .dialogs
            .iter()
            .flat_map(|d| d.turns.iter().map(|t| t.utterance.len()))
            .max()
            .unwrap_or(10);
        Self {
            max_turns: (2 * corpus.length_percentile_95()).max(1),
            max_utterance_len: 2 * longest + 2,
            stochastic_priors: false,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dialog: Dialog,
    /// The turn cap was reached before the end-of-dialog sentinel.
    pub truncated: bool,
}

/// Mean of `q(z_c | anchor)`, shape `(1, latent_conversation)`.
pub fn posterior_mean(model: &VhdaModel, anchor: &Dialog) -> Result<Tensor> {
    Ok(posterior(model, anchor)?.mean.contiguous()?)
}

fn posterior(model: &VhdaModel, anchor: &Dialog) -> Result<GaussianParams> {
    let batch = model.encode_batch(&[anchor], false, None)?;
    model.global_posterior(&batch)
}

/// Samples `z_c ~ q(z_c | anchor)` and decodes a dialog from it.
pub fn posterior_sample<R: Rng + ?Sized>(
    model: &VhdaModel,
    anchor: &Dialog,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Generated> {
    let q = posterior(model, anchor)?;
    let z = reparameterize(&q, &nn::standard_normal(rng, q.mean.dims())?)?;
    let mut g = decode_global(model, &z, config, rng)?;
    g.dialog.id = format!("{}-sample", anchor.id);
    Ok(g)
}

/// Dialogs decoded at `n_points` equidistant interior points between the
/// posterior means of two anchors: `z_n = z_1 + n (z_2 - z_1) / (n_points + 1)`.
pub fn interpolate(
    model: &VhdaModel,
    first: &Dialog,
    second: &Dialog,
    n_points: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Generated>> {
    if n_points == 0 {
        return Err(VhdaError::Config("n_points must be at least 1".into()));
    }
    let z1 = posterior_mean(model, first)?;
    let z2 = posterior_mean(model, second)?;
    let step = ((&z2 - &z1)? / (n_points + 1) as f64)?;
    (1..=n_points)
        .map(|n| {
            let z = (&z1 + (&step * n as f64)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            let mut g = decode_global(model, &z, config, &mut rng)?;
            g.dialog.id = format!("interp-{n}");
            Ok(g)
        })
        .collect()
}

/// Decodes with `z_c` at the anchor's posterior mean (an interpolation
/// endpoint).
pub fn decode_endpoint(model: &VhdaModel, anchor: &Dialog, config: &SamplerConfig) -> Result<Generated> {
    let z = posterior_mean(model, anchor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = decode_global(model, &z, config, &mut rng)?;
    g.dialog.id = format!("{}-endpoint", anchor.id);
    Ok(g)
}

fn argmax_allowed(probs: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((i, p)),
        })
        .map(|(i, _)| i)
}

/// Greedy turn-by-turn decoding from a fixed global latent `z: (1, k_c)`.
pub fn decode_global<R: Rng + ?Sized>(
    model: &VhdaModel,
    z: &Tensor,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Generated> {
    if config.max_turns == 0 {
        return Err(VhdaError::Config("max_turns must be at least 1".into()));
    }
    let act_table = model.act_table()?;
    let candidates = act_table.narrow(0, 0, model.ontology.len())?;
    let triples = model.ontology.triples();
    let mut ctx = model.context.initial_state(1)?;
    let mut v_prev = Tensor::zeros((1, model.config.feature_dim()), nn::DTYPE, &nn::device())?;
    let mut turns = Vec::new();
    let mut ended = false;

    let pick = |p: &GaussianParams, rng: &mut R| -> Result<Tensor> {
        if config.stochastic_priors {
            reparameterize(p, &nn::standard_normal(rng, p.mean.dims())?)
        } else {
            Ok(p.mean.contiguous()?)
        }
    };
    let decode_set = |logits: &Tensor| -> Result<Vec<ActTriple>> {
        let l = logits.squeeze(0)?.to_vec1::<f64>()?;
        Ok(l.iter()
            .zip(triples)
            .filter(|(&x, _)| crate::decoders::sigmoid(x) > config.threshold)
            .map(|(_, a)| a.clone())
            .collect())
    };

    while turns.len() < config.max_turns {
        ctx = model.context.update_context(&ctx, &v_prev)?;
        let h = ctx.h.clone();
        let mut zs: Vec<Tensor> = Vec::with_capacity(4);
        for level in Level::TURN_LEVELS {
            let inputs = ChainInputs {
                context: &h,
                global: z,
                z_speaker: zs.first(),
                z_goal: zs.get(1),
                z_state: zs.get(2),
            };
            let prior = model.chain.prior_params(level, &inputs)?;
            zs.push(pick(&prior, rng)?);
        }
        let cond = |n: usize| -> Result<Tensor> {
            let mut parts: Vec<&Tensor> = vec![&h, z];
            parts.extend(zs.iter().take(n));
            Ok(Tensor::cat(&parts, 1)?)
        };
        let speaker_probs = model.speaker_decoder.logits(&cond(1)?)?.squeeze(0)?.to_vec1::<f64>()?;
        let speaker_id = argmax_allowed(&speaker_probs, |_| true).unwrap_or(0);
        let goal = decode_set(&model.goal_head.logits(&cond(2)?, &candidates)?)?;
        let state = decode_set(&model.state_head.logits(&cond(3)?, &candidates)?)?;

        let cond_u = cond(4)?;
        let mut dec = model.utterance_decoder.initial_state(&cond_u)?;
        let mut prev = BOU_ID;
        let mut words: Vec<usize> = Vec::new();
        let first_turn = turns.is_empty();
        for i in 0..config.max_utterance_len {
            let emb = model.encoders.words.lookup(&[prev])?;
            let (probs, next) = model.utterance_decoder.decode_step(&dec, &emb, &cond_u)?;
            dec = next;
            let probs = probs.squeeze(0)?.to_vec1::<f64>()?;
            let tok = argmax_allowed(&probs, |t| match t {
                PAD_ID | UNK_ID | BOU_ID | EMPTY_ID => false,
                EOD_ID => i == 0 && !first_turn,
                EOU_ID => i > 0,
                _ => true,
            });
            let Some(tok) = tok else { break };
            if tok == EOD_ID {
                ended = true;
                break;
            }
            if tok == EOU_ID {
                break;
            }
            words.push(tok);
            prev = tok;
        }
        if ended {
            break;
        }
        if words.is_empty() {
            words.push(UNK_ID);
        }
        let text: Vec<&str> = words.iter().map(|&w| model.vocab.token(w)).collect();
        let speaker = Speaker::from_id(speaker_id).unwrap_or(Speaker::User);
        turns.push(Turn::new(speaker, goal.clone(), state.clone(), &text.join(" ")));

        let rows = |set: &[ActTriple]| -> Vec<usize> {
            if set.is_empty() {
                vec![model.empty_act_row()]
            } else {
                set.iter().filter_map(|a| model.ontology.index_of(a)).collect()
            }
        };
        let [h_r, h_g, h_s] =
            model.annotation_features(&act_table, &[speaker_id], &[rows(&goal)], &[rows(&state)], z)?;
        let h_u = model.encoders.encode_utterances(&[words], Some(z))?;
        v_prev = Tensor::cat(&[h_r, h_g, h_s, h_u], 1)?;
    }
    Ok(Generated {
        dialog: Dialog {
            id: "generated".into(),
            turns,
            provenance: None,
        },
        truncated: !ended,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub anchor_id: String,
    pub synthetic_id: String,
    pub novel: bool,
    pub valid: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub samples: Vec<SampleRecord>,
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    pub novelty_rate: f64,
    pub validity_rate: f64,
}

/// Number of synthetic dialogs for `ratio` over `n` originals.
pub fn synthetic_count(ratio: f64, n: usize) -> usize {
    // guard against 0.1 * 30 = 3.0000000000000004
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

fn sample_one(
    corpus: &DialogCorpus,
    model: &VhdaModel,
    model_hash: &str,
    config: &SamplerConfig,
    seed: u64,
    index: usize,
) -> Result<(Dialog, SampleRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let anchor = &corpus.dialogs[rng.random_range(0..corpus.dialogs.len())];
    let g = posterior_sample(model, anchor, config, &mut rng)?;
    let mut dialog = g.dialog;
    dialog.id = format!("syn-{seed}-{index}");
    dialog.provenance = Some(Provenance {
        anchor_id: anchor.id.clone(),
        seed,
        model_hash: model_hash.to_string(),
    });
    let record = SampleRecord {
        anchor_id: anchor.id.clone(),
        synthetic_id: dialog.id.clone(),
        novel: !dialog.same_content(anchor),
        valid: validate_dialog(&dialog, Some((&model.ontology, &model.vocab))).is_ok(),
        truncated: g.truncated,
    };
    Ok((dialog, record))
}

/// Draws `count` synthetic dialogs from anchors picked uniformly with
/// replacement. Sample `i` depends only on `(seed, i)`, so `workers` threads
/// produce the same output as one.
pub fn sample_synthetic(
    corpus: &DialogCorpus,
    model: &VhdaModel,
    count: usize,
    seed: u64,
    config: &SamplerConfig,
    workers: usize,
) -> Result<Vec<(Dialog, SampleRecord)>> {
    if count > 0 && corpus.dialogs.is_empty() {
        return Err(VhdaError::Config("cannot sample from an empty corpus".into()));
    }
    let model_hash = model.parameter_hash()?;
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count)
            .map(|i| sample_one(corpus, model, &model_hash, config, seed, i))
            .collect();
    }
    let mut slots: Vec<Option<Result<(Dialog, SampleRecord)>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = count.div_ceil(workers);
        for (w, part) in slots.chunks_mut(chunk).enumerate() {
            let hash = &model_hash;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(sample_one(corpus, model, hash, config, seed, w * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Appends `ratio * N` (rounded up) synthetic dialogs to a copy of `corpus`.
pub fn augment(
    corpus: &DialogCorpus,
    model: &VhdaModel,
    ratio: f64,
    seed: u64,
    config: &SamplerConfig,
    workers: usize,
) -> Result<(DialogCorpus, AugmentationReport)> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(VhdaError::Config(format!("invalid augmentation ratio {ratio}")));
    }
    let n = corpus.dialogs.len();
    let count = if n == 0 { 0 } else { synthetic_count(ratio, n) };
    let results = sample_synthetic(corpus, model, count, seed, config, workers)?;
    let mut dialogs = corpus.dialogs.clone();
    let mut samples = Vec::with_capacity(count);
    for (d, rec) in results {
        dialogs.push(d);
        samples.push(rec);
    }
    let rate = |f: fn(&SampleRecord) -> bool| {
        if samples.is_empty() {
            1.0
        } else {
            samples.iter().filter(|s| f(s)).count() as f64 / samples.len() as f64
        }
    };
    let report = AugmentationReport {
        requested_ratio: ratio,
        achieved_ratio: if n == 0 { 0.0 } else { count as f64 / n as f64 },
        novelty_rate: rate(|s| s.novel),
        validity_rate: rate(|s| s.valid),
        samples,
    };
    let goal_consistent = corpus.goal_consistent && count == 0;
    Ok((
        DialogCorpus {
            dialogs,
            goal_consistent,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_ontology, generate_toy_corpus, ToySpec, Vocabulary};
    use crate::model::ModelConfig;

    fn setup() -> (VhdaModel, DialogCorpus) {
        let corpus = generate_toy_corpus(&ToySpec {
            n_dialogs: 3,
            ..ToySpec::default()
        })
        .unwrap();
        let o = build_ontology(&corpus);
        let v = Vocabulary::build(&corpus, &o);
        (VhdaModel::new(ModelConfig::uniform(8), v, o, 1).unwrap(), corpus)
    }

    #[test]
    fn synthetic_counts() {
        assert_eq!(synthetic_count(1.0, 8), 8);
        assert_eq!(synthetic_count(0.0, 8), 0);
        assert_eq!(synthetic_count(0.1, 30), 3);
        assert_eq!(synthetic_count(0.5, 3), 2);
    }

    #[test]
    fn single_turn_cap_is_flagged() {
        let (m, corpus) = setup();
        let cfg = SamplerConfig {
            max_turns: 1,
            ..SamplerConfig::for_corpus(&corpus)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = posterior_sample(&m, &corpus.dialogs[0], &cfg, &mut rng).unwrap();
        assert_eq!(g.dialog.turns.len(), 1);
        assert!(g.truncated);
    }

    #[test]
    fn untrained_samples_are_closed_world_and_deterministic() {
        let (m, corpus) = setup();
        let cfg = SamplerConfig::for_corpus(&corpus);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            posterior_sample(&m, &corpus.dialogs[1], &cfg, &mut rng).unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.dialog.turns.len() <= cfg.max_turns);
        validate_dialog(&a.dialog, Some((&m.ontology, &m.vocab))).unwrap();
    }

    #[test]
    fn zero_ratio_is_identity() {
        let (m, corpus) = setup();
        let cfg = SamplerConfig::for_corpus(&corpus);
        let (aug, report) = augment(&corpus, &m, 0.0, 1, &cfg, 1).unwrap();
        assert_eq!(aug.dialogs, corpus.dialogs);
        assert!(report.samples.is_empty());
    }

    #[test]
    fn workers_do_not_change_output() {
        let (m, corpus) = setup();
        let cfg = SamplerConfig {
            max_turns: 3,
            ..SamplerConfig::for_corpus(&corpus)
        };
        let (a, _) = augment(&corpus, &m, 1.0, 4, &cfg, 1).unwrap();
        let (b, _) = augment(&corpus, &m, 1.0, 4, &cfg, 3).unwrap();
        assert_eq!(a.dialogs, b.dialogs);
        assert_eq!(a.dialogs.len(), 6);
        assert_eq!(a.dialogs[..3], corpus.dialogs[..]);
    }

    #[test]
    fn interpolation_between_identical_anchors() {
        let (m, corpus) = setup();
        let cfg = SamplerConfig {
            max_turns: 4,
            ..SamplerConfig::for_corpus(&corpus)
        };
        let d = &corpus.dialogs[0];
        let pts = interpolate(&m, d, d, 3, &cfg, 0).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.windows(2).all(|w| w[0].dialog.turns == w[1].dialog.turns));
        assert!(interpolate(&m, d, d, 0, &cfg, 0).is_err());
    }
}
