//! Training objective: factorized ELBO, KL annealing, mutual-information
//! maximization of the global latent, and collapse diagnostics.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VhdaError};
use crate::latent::{gaussian_kl, GaussianParams, Level};
use crate::model::{EncodedBatch, ForwardOutput};
use crate::nn;

/// Linear ramp `min(step / horizon, 1)`.
pub fn anneal_weight(step: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    (step as f64 / horizon as f64).min(1.0)
}

/// Loss terms as differentiable scalars.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub recon_speaker: Tensor,
    pub recon_goal: Tensor,
    pub recon_state: Tensor,
    pub recon_utterance: Tensor,
    pub kl: BTreeMap<Level, Tensor>,
    pub mi: Tensor,
    pub total: Tensor,
}

/// Scalar summary of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_speaker: f64,
    pub recon_goal: f64,
    pub recon_state: f64,
    pub recon_utterance: f64,
    pub kl_per_level: BTreeMap<String, f64>,
    pub kl_total: f64,
    pub mi_estimate: f64,
    pub anneal_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recon_total(&self) -> f64 {
        self.recon_speaker + self.recon_goal + self.recon_state + self.recon_utterance
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.recon_total().is_finite()
            && self.kl_total.is_finite()
            && self.mi_estimate.is_finite()
    }
}

impl LossTerms {
    pub fn breakdown(&self, anneal: f64) -> Result<LossBreakdown> {
        let mut kl_per_level = BTreeMap::new();
        for (level, t) in &self.kl {
            kl_per_level.insert(level.key().to_string(), nn::scalar(t)?);
        }
        let kl_total = kl_per_level.values().sum();
        Ok(LossBreakdown {
            recon_speaker: nn::scalar(&self.recon_speaker)?,
            recon_goal: nn::scalar(&self.recon_goal)?,
            recon_state: nn::scalar(&self.recon_state)?,
            recon_utterance: nn::scalar(&self.recon_utterance)?,
            kl_per_level,
            kl_total,
            mi_estimate: nn::scalar(&self.mi)?,
            anneal_weight: anneal,
            total: nn::scalar(&self.total)?,
        })
    }
}

/// Sums a per-row quantity over valid rows and averages over dialogs.
fn per_dialog(values: &Tensor, mask: &Tensor, n_dialogs: usize) -> Result<Tensor> {
    Ok(((values * mask)?.sum_all()? / n_dialogs as f64)?)
}

/// Negative ELBO plus annealed KL and the MI bonus on the global latent.
///
/// All terms are per-dialog means over the batch. `anneal` scales only the KL
/// terms; `mi_weight` scales the batch MI estimate of `z_c`.
pub fn elbo(batch: &EncodedBatch, out: &ForwardOutput, anneal: f64, mi_weight: f64) -> Result<LossTerms> {
    let b = batch.n_dialogs;
    let rows = batch.rows();
    let mask = batch.valid_mask()?;

    let speaker_nll = nn::cross_entropy_rows(&out.speaker_logits, &batch.speakers)?;
    let recon_speaker = per_dialog(&speaker_nll, &mask, b)?;

    let goal_targets = nn::tensor_from_rows(&batch.goal_targets)?;
    let goal_nll = nn::bce_with_logits(&out.goal_logits, &goal_targets)?.sum(1)?;
    let recon_goal = per_dialog(&goal_nll, &mask, b)?;
    let state_targets = nn::tensor_from_rows(&batch.state_targets)?;
    let state_nll = nn::bce_with_logits(&out.state_logits, &state_targets)?.sum(1)?;
    let recon_state = per_dialog(&state_nll, &mask, b)?;

    let (_, len, vocab) = out.word_logits.dims3()?;
    let mut targets = Vec::with_capacity(rows * len);
    let mut word_mask = Vec::with_capacity(rows * len);
    for (r, t) in batch.dec_targets.iter().enumerate() {
        for i in 0..len {
            targets.push(t.get(i).copied().unwrap_or(0));
            word_mask.push(if batch.valid[r] && i < t.len() { 1.0 } else { 0.0 });
        }
    }
    let word_nll = nn::cross_entropy_rows(&out.word_logits.reshape((rows * len, vocab))?, &targets)?;
    let recon_utterance = per_dialog(&word_nll, &nn::vector(&word_mask)?, b)?;

    let mut kl = BTreeMap::new();
    kl.insert(Level::Conversation, (out.kl_global()?.sum_all()? / b as f64)?);
    for (i, level) in Level::TURN_LEVELS.iter().enumerate() {
        let per_row = gaussian_kl(&out.posteriors[i], &out.priors[i])?;
        kl.insert(*level, per_dialog(&per_row, &mask, b)?);
    }
    let mi = estimate_mi(&out.q_global, &out.z_global)?;

    let recon = (((&recon_speaker + &recon_goal)? + &recon_state)? + &recon_utterance)?;
    let kl_sum = kl
        .values()
        .skip(1)
        .try_fold(kl[&Level::Conversation].clone(), |acc, t| acc + t)?;
    let total = ((recon + (kl_sum * anneal)?)? - (&mi * mi_weight)?)?;
    Ok(LossTerms {
        recon_speaker,
        recon_goal,
        recon_state,
        recon_utterance,
        kl,
        mi,
        total,
    })
}

/// Pairwise log densities `[i, j] = log q(z_i | x_j)`.
fn pairwise_log_density(q: &GaussianParams, z: &Tensor) -> Result<Tensor> {
    let n = q.rows();
    let k = q.width();
    let zi = z.unsqueeze(1)?.broadcast_as((n, n, k))?;
    let mean = q.mean.unsqueeze(0)?.broadcast_as((n, n, k))?;
    let std = q.std.unsqueeze(0)?.broadcast_as((n, n, k))?;
    let diff = ((zi - mean)? / &std)?;
    let quad = (diff.sqr()?.sum(2)? * -0.5)?;
    let log_std = std.log()?.sum(2)?;
    Ok(((quad - log_std)? - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln())?)
}

/// Batch estimate of `I(x; z)` with one sample per datum:
/// `(1/N) Σ_i [log q(z_i|x_i) − log Σ_j q(z_i|x_j) + log N]`.
pub fn estimate_mi(q: &GaussianParams, z: &Tensor) -> Result<Tensor> {
    let n = q.rows();
    if n == 0 {
        return Err(VhdaError::EmptySequence);
    }
    let pair = pairwise_log_density(q, z)?;
    // centring on the diagonal makes identical posteriors cancel exactly
    let diag: Vec<u32> = (0..n as u32).collect();
    let own = pair.gather(&Tensor::from_vec(diag, (n, 1), &nn::device())?, 1)?;
    let lse = nn::logsumexp(&pair.broadcast_sub(&own)?, 1)?;
    let per = ((n as f64).ln() - lse)?;
    Ok(per.mean_all()?)
}

/// Terms of `E_x[KL(q(z|x) || p(z))] = KL(q(z) || p(z)) + I(x; z)` estimated
/// on a batch; `residual` is the mismatch against the closed-form mean KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlDecomposition {
    pub aggregate_kl: f64,
    pub mutual_information: f64,
    pub mean_kl: f64,
    pub residual: f64,
}

/// Monte-Carlo probe against a standard-normal prior using samples `z`.
pub fn kl_decomposition_probe(q: &GaussianParams, z: &Tensor) -> Result<KlDecomposition> {
    let n = q.rows();
    if n == 0 {
        return Err(VhdaError::EmptySequence);
    }
    let pair = pairwise_log_density(q, z)?;
    let log_agg = (nn::logsumexp(&pair, 1)? - (n as f64).ln())?;
    let prior = GaussianParams::standard(n, q.width())?;
    let log_p = prior.log_density(z)?;
    let aggregate_kl = nn::scalar(&(log_agg - log_p)?.mean_all()?)?;
    let mutual_information = nn::scalar(&estimate_mi(q, z)?)?;
    let mean_kl = nn::scalar(&gaussian_kl(q, &prior)?.mean_all()?)?;
    Ok(KlDecomposition {
        aggregate_kl,
        mutual_information,
        mean_kl,
        residual: mean_kl - aggregate_kl - mutual_information,
    })
}

/// Exact decomposition for a discrete model: `p_x` over data, `q[x][z]`
/// posteriors and prior `p_z`. Returns (mean KL, aggregate KL, MI).
pub fn discrete_kl_decomposition(p_x: &[f64], q: &[Vec<f64>], p_z: &[f64]) -> (f64, f64, f64) {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    let mut q_agg = vec![0.0; p_z.len()];
    for (px, row) in p_x.iter().zip(q) {
        for (acc, qz) in q_agg.iter_mut().zip(row) {
            *acc += px * qz;
        }
    }
    let mean_kl: f64 = p_x
        .iter()
        .zip(q)
        .map(|(px, row)| px * row.iter().zip(p_z).map(|(&a, &b)| term(a, b)).sum::<f64>())
        .sum();
    let agg_kl: f64 = q_agg.iter().zip(p_z).map(|(&a, &b)| term(a, b)).sum();
    let mi: f64 = p_x
        .iter()
        .zip(q)
        .map(|(px, row)| px * row.iter().zip(&q_agg).map(|(&a, &b)| term(a, b)).sum::<f64>())
        .sum();
    (mean_kl, agg_kl, mi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(means: &[f64], stds: &[f64]) -> GaussianParams {
        let m: Vec<Vec<f64>> = means.iter().map(|&x| vec![x]).collect();
        let s: Vec<Vec<f64>> = stds.iter().map(|&x| vec![x]).collect();
        GaussianParams::from_rows(&m, &s).unwrap()
    }

    #[test]
    fn anneal_ramp() {
        assert_eq!(anneal_weight(0, 250_000), 0.0);
        assert_eq!(anneal_weight(125_000, 250_000), 0.5);
        assert_eq!(anneal_weight(250_000, 250_000), 1.0);
        assert_eq!(anneal_weight(500_000, 250_000), 1.0);
    }

    #[test]
    fn identical_posteriors_have_zero_mi() {
        let q = params(&[0.3; 5], &[0.7; 5]);
        let z = nn::tensor_from_rows(&[vec![0.1], vec![-1.0], vec![2.0], vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(nn::scalar(&estimate_mi(&q, &z).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn separated_posteriors_reach_log_n() {
        let q = params(&[0.0, 100.0, 200.0, 300.0], &[1e-2; 4]);
        let z = q.mean.clone();
        let mi = nn::scalar(&estimate_mi(&q, &z).unwrap()).unwrap();
        assert!((mi - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn discrete_identity() {
        let (mean, agg, mi) = discrete_kl_decomposition(
            &[0.4, 0.6],
            &[vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]],
            &[0.5, 0.25, 0.25],
        );
        assert!((mean - agg - mi).abs() < 1e-12);
        assert!(mi > 0.0);
    }

    #[test]
    fn probe_at_prior_is_zero() {
        let q = GaussianParams::standard(6, 2).unwrap();
        let z = nn::tensor_from_rows(&(0..6).map(|i| vec![i as f64 * 0.3 - 1.0, 0.2]).collect::<Vec<_>>()).unwrap();
        let d = kl_decomposition_probe(&q, &z).unwrap();
        assert!(d.aggregate_kl.abs() < 1e-12);
        assert_eq!(d.mutual_information, 0.0);
        assert_eq!(d.mean_kl, 0.0);
    }

    proptest! {
        #[test]
        fn mi_upper_bound_and_permutation(
            rows in prop::collection::vec((-3.0f64..3.0, 0.05f64..2.0, -3.0f64..3.0), 1..8),
            rot in 0usize..8,
        ) {
            let n = rows.len();
            let means: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let stds: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let zs: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0 + r.1 * r.2]).collect();
            let q = params(&means, &stds);
            let z = nn::tensor_from_rows(&zs).unwrap();
            let mi = nn::scalar(&estimate_mi(&q, &z).unwrap()).unwrap();
            prop_assert!(mi <= (n as f64).ln() + 1e-6);

            let k = rot % n;
            let perm = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(k); v };
            let mut zs2 = zs.clone();
            zs2.rotate_left(k);
            let q2 = params(&perm(&means), &perm(&stds));
            let mi2 = nn::scalar(&estimate_mi(&q2, &nn::tensor_from_rows(&zs2).unwrap()).unwrap()).unwrap();
            prop_assert!((mi - mi2).abs() < 1e-9);
        }
    }
}
