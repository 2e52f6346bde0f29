//! Cross-manipulation experiment: train on one forgery family, test on a
//! held-out split of that family and on the same held-out sources forged
//! with another family. A contrastive arm and a cross-entropy-only arm are
//! trained on identical data for each seed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{synthesize, CorpusSpec, Dataset, ManipKind};
use crate::error::{DclError, Result};
use crate::eval::{self_similarity_scores, Metrics};
use crate::trainer::{train, EpochLog, TrainConfig, TrainOutputs, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XgenConfig {
    pub train_family: ManipKind,
    pub test_family: ManipKind,
    /// Training seeds; the corpus and split stay fixed across seeds.
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for XgenConfig {
    fn default() -> Self {
        XgenConfig {
            train_family: ManipKind::SpliceRect,
            test_family: ManipKind::WarpPatch,
            seeds: vec![0, 1, 2, 3, 4],
            test_fraction: 0.25,
            split_seed: 0,
        }
    }
}

impl XgenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DclError::config("xgen.seeds", "needs at least one seed"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DclError::config("xgen.test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Train split of the training family plus both held-out test sets.
#[derive(Clone, Debug)]
pub struct XgenData {
    pub train: Dataset,
    pub seen_test: Dataset,
    pub unseen_test: Dataset,
}

/// Real videos do not depend on the forgery family, so the unseen-family
/// corpus shares every real frame with the training corpus; it is restricted
/// to the held-out sources.
pub fn prepare(corpus: &CorpusSpec, xgen: &XgenConfig) -> Result<XgenData> {
    xgen.validate()?;
    let with_family = |kind| CorpusSpec {
        manipulation_families: vec![kind],
        ..corpus.clone()
    };
    let seen = Dataset::from_videos(&synthesize(&with_family(xgen.train_family))?)?;
    let (train, seen_test) = seen.split_by_source(xgen.test_fraction, xgen.split_seed)?;
    let unseen = Dataset::from_videos(&synthesize(&with_family(xgen.test_family))?)?;
    let unseen_test = unseen.restrict_to_sources(&seen_test.source_video_ids())?;
    Ok(XgenData {
        train,
        seen_test,
        unseen_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub seed: u64,
    pub seen: Metrics,
    pub unseen: Metrics,
    /// Frame AUC of `1 - self_similarity` as a fake score on the seen test set.
    pub selfsim_auc: f64,
    pub train_seconds: f64,
    pub last_epoch: Option<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub median_seen_auc: f64,
    pub median_unseen_auc: f64,
    pub median_selfsim_auc: f64,
}

impl ArmSummary {
    pub fn of(runs: &[ArmRun]) -> ArmSummary {
        let m = |f: &dyn Fn(&ArmRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        ArmSummary {
            median_seen_auc: m(&|r| r.seen.auc_frame),
            median_unseen_auc: m(&|r| r.unseen.auc_frame),
            median_selfsim_auc: m(&|r| r.selfsim_auc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XgenResult {
    pub train_family: ManipKind,
    pub test_family: ManipKind,
    pub corpus: CorpusSpec,
    pub config: TrainConfig,
    pub baseline_config: TrainConfig,
    pub dcl: Vec<ArmRun>,
    pub ce_baseline: Vec<ArmRun>,
    pub dcl_summary: ArmSummary,
    pub ce_baseline_summary: ArmSummary,
    /// Median unseen-family AUC of the contrastive arm minus the baseline's.
    pub unseen_auc_gain: f64,
}

/// Median; the mean of the two middle values for even lengths, NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn evaluate_arm(state: &TrainState, data: &XgenData, seed: u64, train_seconds: f64) -> Result<ArmRun> {
    let model = &state.model;
    Ok(ArmRun {
        seed,
        seen: crate::eval::evaluate(model, &data.seen_test)?,
        unseen: crate::eval::evaluate(model, &data.unseen_test)?,
        selfsim_auc: self_similarity_scores(model, &data.seen_test)?.auc()?,
        train_seconds,
        last_epoch: state.history.last().cloned(),
    })
}

/// Train `config` with its seed replaced by `seed` and evaluate it.
pub fn run_arm(config: &TrainConfig, data: &XgenData, seed: u64) -> Result<ArmRun> {
    let mut cfg = config.clone();
    cfg.run.seed = seed;
    let start = Instant::now();
    let state = train(cfg, &data.train, &TrainOutputs::default())?;
    evaluate_arm(&state, data, seed, start.elapsed().as_secs_f64())
}

pub fn cross_manipulation(corpus: &CorpusSpec, config: &TrainConfig, xgen: &XgenConfig) -> Result<XgenResult> {
    let data = prepare(corpus, xgen)?;
    let baseline = config.ce_baseline();
    let mut dcl = Vec::new();
    let mut ce = Vec::new();
    for &seed in &xgen.seeds {
        let run = run_arm(config, &data, seed)?;
        log::info!("dcl seed {seed}: seen {:.4} unseen {:.4} selfsim {:.4}", run.seen.auc_frame, run.unseen.auc_frame, run.selfsim_auc);
        dcl.push(run);
        let run = run_arm(&baseline, &data, seed)?;
        log::info!("ce seed {seed}: seen {:.4} unseen {:.4} selfsim {:.4}", run.seen.auc_frame, run.unseen.auc_frame, run.selfsim_auc);
        ce.push(run);
    }
    let dcl_summary = ArmSummary::of(&dcl);
    let ce_baseline_summary = ArmSummary::of(&ce);
    Ok(XgenResult {
        train_family: xgen.train_family,
        test_family: xgen.test_family,
        corpus: corpus.clone(),
        config: config.clone(),
        baseline_config: baseline,
        unseen_auc_gain: dcl_summary.median_unseen_auc - ce_baseline_summary.median_unseen_auc,
        dcl,
        ce_baseline: ce,
        dcl_summary,
        ce_baseline_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn unseen_split_shares_sources_and_reals() {
        let corpus = CorpusSpec {
            n_videos: 8,
            frames_per_video: 2,
            image_size: 48,
            ..CorpusSpec::default()
        };
        let data = prepare(&corpus, &XgenConfig::default()).unwrap();
        assert_eq!(data.seen_test.source_video_ids(), data.unseen_test.source_video_ids());
        assert!(data
            .train
            .source_video_ids()
            .is_disjoint(&data.seen_test.source_video_ids()));
        for (a, b) in data.seen_test.samples().iter().zip(data.unseen_test.samples()) {
            assert_eq!(a.video_id, b.video_id);
            if a.label == crate::data::Label::Real {
                assert_eq!(a.image, b.image);
            }
        }
    }
}
