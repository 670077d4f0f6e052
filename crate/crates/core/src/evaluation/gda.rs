//! Generative data augmentation protocol: trackers trained on the original
//! corpus against trackers trained on the corpus plus synthetic samples.

use serde::{Deserialize, Serialize};

use crate::corpus::{ActOntology, DialogCorpus};
use crate::error::{Result, VhdaError};
use crate::evaluation::metrics::MetricReport;
use crate::evaluation::tracker::{train_tracker, TrackerConfig};
use crate::model::VhdaModel;
use crate::sampler::{augment, AugmentationReport, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdaConfig {
    pub n_synthetic_sets: usize,
    pub n_tracker_seeds: usize,
    pub n_baseline_seeds: usize,
    pub ratio: f64,
    pub seed: u64,
    pub tracker: TrackerConfig,
    pub sampler: SamplerConfig,
    pub workers: usize,
}

impl GdaConfig {
    /// Three synthetic sets with three tracker seeds each, ten baseline runs,
    /// ratio 1.
    pub fn standard(sampler: SamplerConfig) -> Self {
        Self {
            n_synthetic_sets: 3,
            n_tracker_seeds: 3,
            n_baseline_seeds: 10,
            ratio: 1.0,
            seed: 0,
            tracker: TrackerConfig::default(),
            sampler,
            workers: 1,
        }
    }

    pub fn tracker_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn synthetic_seed(&self, set: usize) -> u64 {
        self.seed.wrapping_mul(7_919).wrapping_add(10_000 + set as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub runs: Vec<MetricReport>,
    pub mean: MetricReport,
    /// Sample standard deviation (zero for a single run).
    pub std: MetricReport,
    pub median_joint_goal: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ArmSummary {
    pub fn from_runs(runs: Vec<MetricReport>) -> Result<Self> {
        if runs.is_empty() {
            return Err(VhdaError::Config("an arm needs at least one run".into()));
        }
        let column = |k: usize| runs.iter().map(|r| r.values()[k]).collect::<Vec<_>>();
        let cols = [column(0), column(1), column(2)];
        Ok(Self {
            mean: MetricReport::from_values(cols.clone().map(|c| mean(&c))),
            std: MetricReport::from_values(cols.clone().map(|c| sample_std(&c))),
            median_joint_goal: median(&cols[0]),
            runs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaReport {
    pub baseline: ArmSummary,
    pub augmented: ArmSummary,
    pub augmentation: Vec<AugmentationReport>,
}

impl GdaReport {
    /// Table with one row per arm and mean ± std columns for goal, request
    /// and inform accuracy.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("arm\truns\tgoal\trequest\tinform\tgoal_median\n");
        for (name, arm) in [("baseline", &self.baseline), ("augmented", &self.augmented)] {
            let cell = |k: usize| format!("{:.4} ± {:.4}", arm.mean.values()[k], arm.std.values()[k]);
            out.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\t{:.4}\n",
                arm.runs.len(),
                cell(0),
                cell(1),
                cell(2),
                arm.median_joint_goal
            ));
        }
        out
    }
}

/// Runs the baseline and augmented arms. Trackers share `ontology` as their
/// label space and are scored on `test`.
pub fn evaluate_gda(
    train: &DialogCorpus,
    test: &DialogCorpus,
    ontology: &ActOntology,
    model: &VhdaModel,
    config: &GdaConfig,
    mut progress: impl FnMut(&str),
) -> Result<GdaReport> {
    if config.n_baseline_seeds == 0 || config.n_synthetic_sets == 0 || config.n_tracker_seeds == 0 {
        return Err(VhdaError::Config("run counts must be positive".into()));
    }
    let mut baseline = Vec::with_capacity(config.n_baseline_seeds);
    for i in 0..config.n_baseline_seeds {
        let tracker = train_tracker(train, ontology, &config.tracker, config.tracker_seed(i))?;
        let report = tracker.evaluate(test)?;
        progress(&format!("baseline run {i}: joint goal {:.4}", report.joint_goal_acc));
        baseline.push(report);
    }
    let mut augmented = Vec::new();
    let mut augmentation = Vec::new();
    for set in 0..config.n_synthetic_sets {
        let (corpus, aug) = augment(
            train,
            model,
            config.ratio,
            config.synthetic_seed(set),
            &config.sampler,
            config.workers,
        )?;
        for i in 0..config.n_tracker_seeds {
            let tracker = train_tracker(&corpus, ontology, &config.tracker, config.tracker_seed(i))?;
            let report = tracker.evaluate(test)?;
            progress(&format!(
                "augmented set {set} run {i}: joint goal {:.4}",
                report.joint_goal_acc
            ));
            augmented.push(report);
        }
        augmentation.push(aug);
    }
    Ok(GdaReport {
        baseline: ArmSummary::from_runs(baseline)?,
        augmented: ArmSummary::from_runs(augmented)?,
        augmentation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - 1.2909944487358056).abs() < 1e-12);
        assert_eq!(sample_std(&[5.0]), 0.0);
    }
}
