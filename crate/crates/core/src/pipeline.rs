//! Notes to scored relation candidates: annotation, candidate generation,
//! labeling functions, label model, noise-aware training and evaluation.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    select_threshold, train_noise_aware, ClassifierModel, FeatureConfig, TrainConfig,
};
use crate::corpus::{preprocess, PreprocessConfig, RawNote};
use crate::error::{Error, Result};
use crate::eval::{prf1, split_documents, Metrics, Splits};
use crate::extraction::{
    generate_candidates, Extractor, RelationCandidate, RelationType, TaggedSentence,
};
use crate::weaksup::lfs::default_lfs;
use crate::weaksup::{
    apply_lfs, fit_label_model, posterior_labels, soft_majority_vote, BoxedLf, LabelMatrix,
    LabelModel, LabelModelConfig, ProbabilisticLabel, Vote,
};

/// Preprocesses and annotates every note; output follows input order.
pub fn annotate_notes(
    notes: Vec<RawNote>,
    config: &PreprocessConfig,
    extractor: &Extractor,
) -> Vec<Arc<TaggedSentence>> {
    let one = |note: RawNote| -> Vec<Arc<TaggedSentence>> {
        let doc = preprocess(note, config);
        extractor.annotate(&doc).into_iter().map(Arc::new).collect()
    };
    #[cfg(feature = "parallel")]
    let nested: Vec<Vec<Arc<TaggedSentence>>> = notes.into_par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let nested: Vec<Vec<Arc<TaggedSentence>>> = notes.into_iter().map(one).collect();
    nested.into_iter().flatten().collect()
}

pub fn candidates_for(
    sentences: &[Arc<TaggedSentence>],
    relation: RelationType,
) -> Vec<RelationCandidate> {
    sentences
        .iter()
        .flat_map(|s| generate_candidates(s, relation))
        .collect()
}

/// Source of the probabilistic training labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    LabelModel,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub relation: RelationType,
    pub split_seed: u64,
    /// Train/dev fractions of the notes; the rest is test.
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub label_source: LabelSource,
    /// Leave out candidates on which every labeling function abstains.
    pub drop_uncovered: bool,
    /// Pick the decision threshold on dev gold instead of using 0.5.
    pub tune_threshold: bool,
    pub label_model: LabelModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            relation: RelationType::PainAnatomy,
            split_seed: 7,
            train_fraction: 0.6,
            dev_fraction: 0.2,
            label_source: LabelSource::MajorityVote,
            drop_uncovered: true,
            tune_threshold: true,
            label_model: LabelModelConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

/// Fraction-based document split; sizes are floored, test takes the rest.
pub fn split_by_fraction(doc_ids: &[String], seed: u64, train: f64, dev: f64) -> Result<Splits> {
    if !(train >= 0.0 && dev >= 0.0 && train + dev <= 1.0) {
        return Err(Error::invalid(format!(
            "split fractions {train} and {dev} do not fit in [0, 1]"
        )));
    }
    let n = doc_ids.len();
    let a = (train * n as f64).floor() as usize;
    let b = (dev * n as f64).floor() as usize;
    split_documents(doc_ids, seed, (a, b, n - a - b))
}

/// SMV labels become decisions only when the vote is strictly positive.
pub fn majority_decision(label: &ProbabilisticLabel) -> bool {
    label.p_true > 0.5
}

pub fn covered_rows(matrix: &LabelMatrix) -> Vec<usize> {
    (0..matrix.n())
        .filter(|&i| matrix.row(i).iter().any(|v| *v != Vote::Abstain))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub splits: Splits,
    pub label_model: Option<LabelModel>,
    pub n_train: usize,
    pub model: ClassifierModel,
    pub test_candidates: Vec<RelationCandidate>,
    pub test_scores: Vec<f64>,
    pub classifier: Metrics,
    pub majority_vote: Metrics,
}

fn as_set(ids: &[String]) -> HashSet<&str> {
    ids.iter().map(String::as_str).collect()
}

fn restrict(cs: &[RelationCandidate], notes: &HashSet<&str>) -> Vec<RelationCandidate> {
    cs.iter()
        .filter(|c| notes.contains(c.note_id()))
        .cloned()
        .collect()
}

/// Runs the weakly supervised pipeline on annotated sentences and scores
/// held-out notes against gold candidate labels. Candidates missing from
/// gold count as negative.
pub fn run_pipeline(
    sentences: &[Arc<TaggedSentence>],
    gold: &[(String, bool)],
    config: &PipelineConfig,
    lfs: Option<Vec<BoxedLf>>,
) -> Result<PipelineRun> {
    let lfs = lfs.unwrap_or_else(|| default_lfs(config.relation));
    let mut note_ids: Vec<String> = sentences.iter().map(|s| s.note_id.clone()).collect();
    note_ids.sort();
    note_ids.dedup();
    let splits = split_by_fraction(
        &note_ids,
        config.split_seed,
        config.train_fraction,
        config.dev_fraction,
    )?;
    let all = candidates_for(sentences, config.relation);
    let train = restrict(&all, &as_set(&splits.train));
    let dev = restrict(&all, &as_set(&splits.dev));
    let test = restrict(&all, &as_set(&splits.test));
    let gold_map: HashMap<&str, bool> = gold.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let gold_of = |cs: &[RelationCandidate]| -> Vec<bool> {
        cs.iter()
            .map(|c| {
                gold_map
                    .get(c.candidate_id.as_str())
                    .copied()
                    .unwrap_or(false)
            })
            .collect()
    };

    let (train_matrix, _) = apply_lfs(&train, &lfs)?;
    let (label_model, labels) = match config.label_source {
        LabelSource::LabelModel => {
            let lm = fit_label_model(&train_matrix, &config.label_model)?;
            let labels = posterior_labels(&lm, &train_matrix)?;
            (Some(lm), labels)
        }
        LabelSource::MajorityVote => (None, soft_majority_vote(&train_matrix)),
    };
    let keep: Vec<usize> = if config.drop_uncovered {
        covered_rows(&train_matrix)
    } else {
        (0..train.len()).collect()
    };
    let train_kept: Vec<RelationCandidate> = keep.iter().map(|&i| train[i].clone()).collect();
    let labels_kept: Vec<ProbabilisticLabel> = keep.iter().map(|&i| labels[i].clone()).collect();
    let mut model = train_noise_aware(&train_kept, &labels_kept, &config.train, &config.features)?;

    if config.tune_threshold && !dev.is_empty() {
        let dev_scores = model.predict_all(&dev, &config.features)?;
        match select_threshold(&dev_scores, &gold_of(&dev)) {
            Ok((t, _)) => model.threshold = t,
            Err(Error::SingleClass) => log::warn!(
                "dev gold has one class; keeping threshold {}",
                model.threshold
            ),
            Err(e) => return Err(e),
        }
    }

    let test_scores = model.predict_all(&test, &config.features)?;
    let test_gold: Vec<(String, bool)> = test
        .iter()
        .zip(gold_of(&test))
        .map(|(c, y)| (c.candidate_id.clone(), y))
        .collect();
    let scored: Vec<(String, f64)> = test
        .iter()
        .zip(&test_scores)
        .map(|(c, s)| (c.candidate_id.clone(), *s))
        .collect();
    let classifier = prf1(&scored, &test_gold, model.threshold)?;
    let (test_matrix, _) = apply_lfs(&test, &lfs)?;
    let smv: Vec<(String, f64)> = soft_majority_vote(&test_matrix)
        .iter()
        .map(|l| {
            (
                l.candidate_id.clone(),
                if majority_decision(l) { 1.0 } else { 0.0 },
            )
        })
        .collect();
    let majority_vote = prf1(&smv, &test_gold, 0.5)?;
    Ok(PipelineRun {
        splits,
        label_model,
        n_train: train_kept.len(),
        model,
        test_candidates: test,
        test_scores,
        classifier,
        majority_vote,
    })
}
