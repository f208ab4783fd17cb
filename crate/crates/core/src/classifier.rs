//! Noise-aware logistic regression over signed-hashed sparse features.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{EntityMention, RelationCandidate};
use crate::weaksup::primitives::{between_tokens, between_words, left_window, right_window};
use crate::weaksup::ProbabilisticLabel;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Hash space is 2^dims_log2.
    pub dims_log2: u32,
    pub max_ngram: usize,
    /// Outer window on each side of the argument pair, in tokens.
    pub window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dims_log2: 20,
            max_ngram: 3,
            window: 3,
        }
    }
}

impl FeatureConfig {
    pub fn dims(&self) -> usize {
        1usize << self.dims_log2
    }

    /// Stable fingerprint stored with trained models.
    pub fn hash(&self) -> u64 {
        fnv1a(format!("v1|{}|{}|{}", self.dims_log2, self.max_ngram, self.window).as_bytes())
    }
}

/// Sparse vector sorted by index with no repeated indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        FeatureVector { entries }
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| w[i as usize] * v).sum()
    }
}

pub fn distance_bucket(tokens_between: usize) -> &'static str {
    match tokens_between {
        0 => "dist:0",
        1..=2 => "dist:1-2",
        3..=5 => "dist:3-5",
        6..=10 => "dist:6-10",
        _ => "dist:>10",
    }
}

fn ngrams(prefix: &str, words: &[String], max_n: usize, out: &mut Vec<String>) {
    for n in 1..=max_n.min(words.len()) {
        for w in words.windows(n) {
            out.push(format!("{prefix}{n}:{}", w.join(" ")));
        }
    }
}

fn arg_features(tag: &str, m: &EntityMention, out: &mut Vec<String>) {
    out.push(format!("{tag}id:{}", m.canonical_id));
    out.push(format!("{tag}type:{}", m.entity_type));
    if m.attributes.is_empty() {
        out.push(format!("{tag}attr:none"));
    }
    for a in &m.attributes {
        out.push(format!("{tag}attr:{}", a.as_str()));
    }
}

/// Feature strings before hashing, in a fixed order.
pub fn feature_names(c: &RelationCandidate, config: &FeatureConfig) -> Vec<String> {
    let lower = |ts: &[crate::corpus::Token]| -> Vec<String> {
        ts.iter().map(|t| t.text.to_lowercase()).collect()
    };
    let mut out = Vec::new();
    ngrams("btw", &lower(between_tokens(c)), config.max_ngram, &mut out);
    for w in between_words(c) {
        out.push(format!("bw:{w}"));
    }
    ngrams(
        "left",
        &lower(left_window(c, config.window)),
        config.max_ngram,
        &mut out,
    );
    ngrams(
        "right",
        &lower(right_window(c, config.window)),
        config.max_ngram,
        &mut out,
    );
    arg_features("a1", &c.arg1, &mut out);
    arg_features("a2", &c.arg2, &mut out);
    out.push(format!(
        "pair:{}|{}",
        c.arg1.canonical_id, c.arg2.canonical_id
    ));
    out.push(
        if c.arg1.token_start <= c.arg2.token_start {
            "order:a1-first"
        } else {
            "order:a2-first"
        }
        .to_string(),
    );
    let (s, e) = c.between_range();
    out.push(distance_bucket(e - s).to_string());
    out.push(format!("sec:{}", c.section_header().unwrap_or("NONE")));
    for d in &c.context.dates {
        out.push(format!("date:{}", d.label));
    }
    out
}

/// Signed-hashes a list of feature names.
pub fn hash_features(names: &[String], config: &FeatureConfig) -> FeatureVector {
    let mask = (config.dims() - 1) as u64;
    FeatureVector::from_pairs(
        names
            .iter()
            .map(|n| {
                let h = fnv1a(n.as_bytes());
                let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
                ((h & mask) as u32, sign)
            })
            .collect(),
    )
}

pub fn featurize(c: &RelationCandidate, config: &FeatureConfig) -> FeatureVector {
    hash_features(&feature_names(c, config), config)
}

pub fn featurize_all(cs: &[RelationCandidate], config: &FeatureConfig) -> Vec<FeatureVector> {
    #[cfg(feature = "parallel")]
    {
        cs.par_iter().map(|c| featurize(c, config)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cs.iter().map(|c| featurize(c, config)).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Noise-aware loss: cross-entropy against soft targets plus λ‖w‖² (the bias
/// is not penalised).
pub fn objective(w: &[f64], bias: f64, xs: &[FeatureVector], targets: &[f64], lambda: f64) -> f64 {
    let data: f64 = xs
        .iter()
        .zip(targets)
        .map(|(x, &p)| {
            let z = x.dot(w) + bias;
            // -[p ln σ(z) + (1-p) ln(1-σ(z))] = softplus(z) - p z
            softplus(z) - p * z
        })
        .sum();
    data + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`objective`] with respect to (w, bias).
pub fn gradient(
    w: &[f64],
    bias: f64,
    xs: &[FeatureVector],
    targets: &[f64],
    lambda: f64,
) -> (Vec<f64>, f64) {
    let mut g: Vec<f64> = w.iter().map(|v| 2.0 * lambda * v).collect();
    let mut gb = 0.0;
    for (x, &p) in xs.iter().zip(targets) {
        let r = sigmoid(x.dot(w) + bias) - p;
        for &(i, v) in &x.entries {
            g[i as usize] += r * v;
        }
        gb += r;
    }
    (g, gb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step size at epoch t is learning_rate / (1 + lr_decay * t).
    pub lr_decay: f64,
    pub lambda: f64,
    /// 0 means full batch.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 13,
            epochs: 30,
            learning_rate: 0.2,
            lr_decay: 0.1,
            lambda: 1.0,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub n_train: usize,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub feature_hash: u64,
    pub metadata: TrainingMetadata,
}

/// Weights stored as scale * v so L2 decay is O(1) per step.
struct ScaledWeights {
    v: Vec<f64>,
    scale: f64,
}

impl ScaledWeights {
    fn dot(&self, x: &FeatureVector) -> f64 {
        self.scale * x.dot(&self.v)
    }

    fn decay(&mut self, factor: f64) {
        self.scale *= factor;
        if self.scale < 1e-9 {
            for v in &mut self.v {
                *v *= self.scale;
            }
            self.scale = 1.0;
        }
    }

    fn add(&mut self, x: &FeatureVector, step: f64) {
        for &(i, v) in &x.entries {
            self.v[i as usize] += step * v / self.scale;
        }
    }

    fn into_dense(self) -> Vec<f64> {
        self.v.into_iter().map(|v| v * self.scale).collect()
    }
}

/// Mini-batch SGD on the mean form of [`objective`] (same minimiser).
/// Shuffling uses a ChaCha8 stream seeded from the config, so results are
/// reproducible.
pub fn train_vectors(
    xs: &[FeatureVector],
    targets: &[f64],
    config: &TrainConfig,
    features: &FeatureConfig,
) -> Result<ClassifierModel> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if targets.len() != n {
        return Err(Error::invalid("one target per training vector required"));
    }
    if let Some(p) = targets.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("target {p} outside [0, 1]")));
    }
    let dims = features.dims();
    if xs
        .iter()
        .flat_map(|x| &x.entries)
        .any(|&(i, _)| i as usize >= dims)
    {
        return Err(Error::invalid("feature index beyond hash space"));
    }
    let batch = if config.batch_size == 0 {
        n
    } else {
        config.batch_size.min(n)
    };
    let per_sample_l2 = 2.0 * config.lambda / n as f64;
    let mut w = ScaledWeights {
        v: vec![0.0; dims],
        scale: 1.0,
    };
    let mut bias = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut residuals = Vec::with_capacity(batch);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate / (1.0 + config.lr_decay * epoch as f64);
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            residuals.clear();
            residuals.extend(
                chunk
                    .iter()
                    .map(|&i| sigmoid(w.dot(&xs[i]) + bias) - targets[i]),
            );
            let k = chunk.len() as f64;
            w.decay(1.0 - lr * per_sample_l2);
            let mut gb = 0.0;
            for (&i, &r) in chunk.iter().zip(&residuals) {
                w.add(&xs[i], -lr * r / k);
                gb += r;
            }
            bias -= lr * gb / k;
        }
    }
    let weights = w.into_dense();
    let final_objective = objective(&weights, bias, xs, targets, config.lambda);
    Ok(ClassifierModel {
        weights,
        bias,
        threshold: 0.5,
        feature_hash: features.hash(),
        metadata: TrainingMetadata {
            train: config.clone(),
            features: features.clone(),
            n_train: n,
            final_objective,
        },
    })
}

/// Trains on candidates with probabilistic labels matched by candidate id.
pub fn train_noise_aware(
    candidates: &[RelationCandidate],
    labels: &[ProbabilisticLabel],
    config: &TrainConfig,
    features: &FeatureConfig,
) -> Result<ClassifierModel> {
    if candidates.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let by_id: HashMap<&str, f64> = labels
        .iter()
        .map(|l| (l.candidate_id.as_str(), l.p_true))
        .collect();
    let mut missing = Vec::new();
    let targets: Vec<f64> = candidates
        .iter()
        .map(|c| {
            by_id
                .get(c.candidate_id.as_str())
                .copied()
                .unwrap_or_else(|| {
                    missing.push(c.candidate_id.clone());
                    0.0
                })
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "candidates without labels: {}",
            missing.join(", ")
        )));
    }
    train_vectors(
        &featurize_all(candidates, features),
        &targets,
        config,
        features,
    )
}

impl ClassifierModel {
    /// All-zero model; scores 0.5 everywhere.
    pub fn zeros(features: &FeatureConfig) -> Self {
        ClassifierModel {
            weights: vec![0.0; features.dims()],
            bias: 0.0,
            threshold: 0.5,
            feature_hash: features.hash(),
            metadata: TrainingMetadata {
                train: TrainConfig::default(),
                features: features.clone(),
                n_train: 0,
                final_objective: 0.0,
            },
        }
    }

    pub fn score_vector(&self, x: &FeatureVector) -> f64 {
        sigmoid(x.dot(&self.weights) + self.bias)
    }

    fn check_features(&self, features: &FeatureConfig) -> Result<()> {
        if features.hash() != self.feature_hash {
            return Err(Error::FeatureConfigMismatch {
                expected: self.feature_hash,
                found: features.hash(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, c: &RelationCandidate, features: &FeatureConfig) -> Result<f64> {
        self.check_features(features)?;
        Ok(self.score_vector(&featurize(c, features)))
    }

    pub fn predict_all(
        &self,
        cs: &[RelationCandidate],
        features: &FeatureConfig,
    ) -> Result<Vec<f64>> {
        self.check_features(features)?;
        Ok(featurize_all(cs, features)
            .iter()
            .map(|x| self.score_vector(x))
            .collect())
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Binary layout, little-endian: `b"DSCM"`, version u32 = 1,
    /// dims_log2 u32, feature hash u64, bias f64, threshold f64, nnz u32,
    /// then nnz pairs of (index u32, weight f64) in ascending index order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"DSCM")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.metadata.features.dims_log2.to_le_bytes())?;
        w.write_all(&self.feature_hash.to_le_bytes())?;
        w.write_all(&self.bias.to_le_bytes())?;
        w.write_all(&self.threshold.to_le_bytes())?;
        let nz: Vec<(u32, f64)> = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .collect();
        w.write_all(&(nz.len() as u32).to_le_bytes())?;
        for (i, v) in nz {
            w.write_all(&i.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.metadata).map_err(|e| Error::Format(e.to_string()))
    }

    /// Reads the binary weights and the JSON sidecar written alongside them.
    pub fn read<R: Read>(mut binary: R, sidecar: &str) -> Result<Self> {
        let metadata: TrainingMetadata =
            serde_json::from_str(sidecar).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::new();
        binary
            .read_to_end(&mut buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bad = |m: &str| Error::Format(format!("model file: {m}"));
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + k).ok_or_else(|| bad("truncated"))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != b"DSCM" {
            return Err(bad("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let f64_of = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        if u32_of(take(4)?) != 1 {
            return Err(bad("unsupported version"));
        }
        let dims_log2 = u32_of(take(4)?);
        let feature_hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let bias = f64_of(take(8)?);
        let threshold = f64_of(take(8)?);
        let nnz = u32_of(take(4)?) as usize;
        if dims_log2 != metadata.features.dims_log2 || feature_hash != metadata.features.hash() {
            return Err(bad("sidecar does not match weights"));
        }
        let mut weights = vec![0.0; 1usize << dims_log2];
        for _ in 0..nnz {
            let i = u32_of(take(4)?) as usize;
            let v = f64_of(take(8)?);
            *weights
                .get_mut(i)
                .ok_or_else(|| bad("index out of range"))? = v;
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ClassifierModel {
            weights,
            bias,
            threshold,
            feature_hash,
            metadata,
        })
    }
}

/// Grid {0.00, 0.01, ..., 1.00}, predicting positive when score >= t.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|k| k as f64 / 100.0)
}

fn f1_at(scores: &[f64], gold: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(gold) {
        match (s >= t, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// F1-maximising threshold on a labelled dev set; ties go to the lowest.
pub fn select_threshold(scores: &[f64], gold: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != gold.len() {
        return Err(Error::invalid("scores and gold differ in length"));
    }
    if gold.is_empty() || gold.iter().all(|g| *g) || gold.iter().all(|g| !*g) {
        return Err(Error::SingleClass);
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for t in threshold_grid() {
        let f = f1_at(scores, gold, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub candidate_id: String,
    pub score: f64,
    pub predicted_label: u8,
}

pub fn predictions(cs: &[RelationCandidate], scores: &[f64], threshold: f64) -> Vec<Prediction> {
    cs.iter()
        .zip(scores)
        .map(|(c, &s)| Prediction {
            candidate_id: c.candidate_id.clone(),
            score: s,
            predicted_label: u8::from(s >= threshold),
        })
        .collect()
}

pub fn write_predictions_csv<W: Write>(preds: &[Prediction], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["candidate_id", "score", "predicted_label"])?;
    for p in preds {
        wtr.write_record([
            p.candidate_id.clone(),
            format!("{:.17}", p.score),
            p.predicted_label.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(r: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
