//! Product-limit survival curves and the log-rank test.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::SurvivalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub n_risk: usize,
    pub n_events: usize,
    pub n_censored: usize,
    pub survival: f64,
    /// Greenwood standard error.
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub group: Option<String>,
    pub points: Vec<KmPoint>,
}

impl SurvivalCurve {
    /// Right-continuous step function; 1 before the first time point.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.time <= t)
            .last()
            .map_or(1.0, |p| p.survival)
    }
}

fn product_limit(times: &[f64], events: &[bool]) -> Vec<KmPoint> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let (mut s, mut greenwood) = (1.0, 0.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut c) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            if events[order[i]] {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            if at_risk > d {
                greenwood += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
            }
        }
        out.push(KmPoint {
            time: t,
            n_risk: at_risk,
            n_events: d,
            n_censored: c,
            survival: s,
            std_err: s * greenwood.sqrt(),
        });
        at_risk -= d + c;
    }
    out
}

fn group_labels(ds: &SurvivalDataset, key: &str) -> Result<Vec<String>> {
    ds.subjects
        .iter()
        .map(|s| {
            s.levels.get(key).cloned().ok_or_else(|| {
                Error::invalid(format!("subject {} has no covariate {key:?}", s.patient_id))
            })
        })
        .collect()
}

/// One curve overall, or one per level of `group_by`.
pub fn km_estimate(ds: &SurvivalDataset, group_by: Option<&str>) -> Result<Vec<SurvivalCurve>> {
    if ds.is_empty() {
        return Err(Error::invalid("survival dataset is empty"));
    }
    let times: Vec<f64> = ds.subjects.iter().map(|s| s.time).collect();
    let events: Vec<bool> = ds.subjects.iter().map(|s| s.event).collect();
    let Some(key) = group_by else {
        return Ok(vec![SurvivalCurve {
            group: None,
            points: product_limit(&times, &events),
        }]);
    };
    let labels = group_labels(ds, key)?;
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((l, t), e) in labels.iter().zip(&times).zip(&events) {
        let g = groups.entry(l).or_default();
        g.0.push(*t);
        g.1.push(*e);
    }
    Ok(groups
        .into_iter()
        .map(|(g, (t, e))| SurvivalCurve {
            group: Some(g.to_string()),
            points: product_limit(&t, &e),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub groups: Vec<String>,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// K-sample log-rank on raw arrays; `group[i]` indexes `0..k`.
pub(crate) fn logrank_arrays(
    times: &[f64],
    events: &[bool],
    group: &[usize],
    k: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = vec![0usize; k];
    for &g in group {
        at_risk[g] += 1;
    }
    let mut observed = vec![0.0; k];
    let mut expected = vec![0.0; k];
    let mut var = DMatrix::<f64>::zeros(k, k);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let start = i;
        let mut d_g = vec![0usize; k];
        while i < order.len() && times[order[i]] == t {
            if events[order[i]] {
                d_g[group[order[i]]] += 1;
            }
            i += 1;
        }
        let d: usize = d_g.iter().sum();
        let n: usize = at_risk.iter().sum();
        if d > 0 {
            let (df, nf) = (d as f64, n as f64);
            for g in 0..k {
                observed[g] += d_g[g] as f64;
                expected[g] += df * at_risk[g] as f64 / nf;
            }
            if n > 1 {
                let c = df * (nf - df) / (nf - 1.0);
                for g in 0..k {
                    let pg = at_risk[g] as f64 / nf;
                    for h in 0..k {
                        let ph = at_risk[h] as f64 / nf;
                        var[(g, h)] += c * pg * (f64::from(u8::from(g == h)) - ph);
                    }
                }
            }
        }
        for &j in &order[start..i] {
            at_risk[group[j]] -= 1;
        }
    }
    if observed.iter().sum::<f64>() == 0.0 {
        return Err(Error::invalid("log-rank test needs at least one event"));
    }
    let diff = DVector::from_iterator(k - 1, (0..k - 1).map(|g| observed[g] - expected[g]));
    let v = var.view((0, 0), (k - 1, k - 1)).into_owned();
    let stat = if diff.iter().all(|x| *x == 0.0) {
        0.0
    } else {
        let sol = v
            .clone()
            .lu()
            .solve(&diff)
            .ok_or_else(|| Error::invalid("log-rank variance matrix is singular"))?;
        diff.dot(&sol).max(0.0)
    };
    Ok((stat, observed, expected))
}

pub(crate) fn chi2_sf(stat: f64, df: usize) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).map_or(f64::NAN, |c| c.sf(stat))
}

pub fn logrank_test(ds: &SurvivalDataset, group_by: &str) -> Result<LogRankResult> {
    let labels = group_labels(ds, group_by)?;
    let mut names: Vec<String> = labels.clone();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(Error::invalid(format!(
            "log-rank test needs at least two groups of {group_by:?}"
        )));
    }
    let index: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let group: Vec<usize> = labels.iter().map(|l| index[l.as_str()]).collect();
    let times: Vec<f64> = ds.subjects.iter().map(|s| s.time).collect();
    let events: Vec<bool> = ds.subjects.iter().map(|s| s.event).collect();
    let (statistic, observed, expected) = logrank_arrays(&times, &events, &group, names.len())?;
    let df = names.len() - 1;
    Ok(LogRankResult {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
        groups: names,
        observed,
        expected,
    })
}
