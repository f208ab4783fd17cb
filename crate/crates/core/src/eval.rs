//! Precision/recall/F1, precision-recall curves and document-level splits.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percentages in [0, 100], kept at full precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Rounds to one decimal for display.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = pct(tp, tp + fp);
        let recall = pct(tp, tp + fn_);
        Metrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp,
            fp,
            fn_,
        }
    }

    /// Metrics known only as reported percentages; counts are zero.
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        Metrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            tp: 0,
            fp: 0,
            fn_: 0,
        }
    }

    pub fn display(&self) -> String {
        format!(
            "P={:.1} R={:.1} F1={:.1} (tp={} fp={} fn={})",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }

    pub fn write_csv<W: Write>(rows: &[(String, Metrics)], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["name", "precision", "recall", "f1", "tp", "fp", "fn"])?;
        for (name, m) in rows {
            wtr.write_record([
                name.clone(),
                format!("{:.1}", m.precision),
                format!("{:.1}", m.recall),
                format!("{:.1}", m.f1),
                m.tp.to_string(),
                m.fp.to_string(),
                m.fn_.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

fn unique_map<'a, V: Copy>(
    items: impl IntoIterator<Item = (&'a str, V)>,
) -> Result<HashMap<&'a str, V>> {
    let mut out = HashMap::new();
    for (k, v) in items {
        if out.insert(k, v).is_some() {
            return Err(Error::DuplicateId(k.to_string()));
        }
    }
    Ok(out)
}

/// Scores `(candidate_id, score)` against `(candidate_id, label)` over the
/// union of ids: a missing prediction is negative, a missing gold label is
/// negative.
pub fn prf1(
    predictions: &[(String, f64)],
    gold: &[(String, bool)],
    threshold: f64,
) -> Result<Metrics> {
    let pred = unique_map(predictions.iter().map(|(k, s)| (k.as_str(), *s)))?;
    let gold = unique_map(gold.iter().map(|(k, y)| (k.as_str(), *y)))?;
    let keys: HashSet<&str> = pred.keys().chain(gold.keys()).copied().collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for k in keys {
        let p = pred.get(k).is_some_and(|s| *s >= threshold);
        let y = gold.get(k).copied().unwrap_or(false);
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["threshold", "recall", "precision"])?;
        for p in &self.points {
            wtr.write_record([
                p.threshold.to_string(),
                format!("{:.6}", p.recall),
                format!("{:.6}", p.precision),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }
}

/// One point per distinct score, descending; AP = Σ (R_k − R_{k−1}) P_k.
pub fn pr_curve(scores: &[f64], gold: &[bool]) -> Result<PrCurve> {
    if scores.len() != gold.len() {
        return Err(Error::invalid("scores and gold differ in length"));
    }
    let pos = gold.iter().filter(|g| **g).count();
    if pos == 0 || pos == gold.len() {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut ap, mut prev_r) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(gold[order[i]]);
            seen += 1;
            i += 1;
        }
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / seen as f64;
        ap += (r - prev_r) * p;
        prev_r = r;
        points.push(PrPoint {
            threshold: s,
            recall: r,
            precision: p,
        });
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn split_of(&self, id: &str) -> Option<&'static str> {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
        .into_iter()
        .find(|(_, ids)| ids.iter().any(|x| x == id))
        .map(|(name, _)| name)
    }
}

/// Seeded shuffle of the sorted document ids, cut into train/dev/test.
pub fn split_documents(
    doc_ids: &[String],
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<Splits> {
    let ids: BTreeSet<&String> = doc_ids.iter().collect();
    if ids.len() != doc_ids.len() {
        let mut seen = HashSet::new();
        let dup = doc_ids
            .iter()
            .find(|d| !seen.insert(*d))
            .cloned()
            .unwrap_or_default();
        return Err(Error::DuplicateId(dup));
    }
    let need = sizes.0 + sizes.1 + sizes.2;
    if need > ids.len() {
        return Err(Error::SplitTooLarge {
            requested: need,
            available: ids.len(),
        });
    }
    let mut ids: Vec<String> = ids.into_iter().cloned().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids
        .split_off(sizes.0 + sizes.1)
        .into_iter()
        .take(sizes.2)
        .collect();
    let dev = ids.split_off(sizes.0);
    Ok(Splits {
        train: ids,
        dev,
        test,
    })
}
