//! Cox proportional hazards with Breslow ties.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::design::{check_full_rank, transpose};
use super::km::{chi2_sf, logrank_test, LogRankResult};
use super::SurvivalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// |β|·sd(x) above this is taken as a diverging coefficient.
    pub separation_limit: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        CoxConfig {
            max_iter: 50,
            tol: 1e-8,
            separation_limit: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxCoefficient {
    pub name: String,
    #[serde(with = "super::nonfinite")]
    pub beta: f64,
    #[serde(with = "super::nonfinite")]
    pub se: f64,
    #[serde(with = "super::nonfinite")]
    pub hazard_ratio: f64,
    #[serde(with = "super::nonfinite")]
    pub ci_low: f64,
    #[serde(with = "super::nonfinite")]
    pub ci_high: f64,
    #[serde(with = "super::nonfinite")]
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub coefficients: Vec<CoxCoefficient>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub n: usize,
    pub n_events: usize,
    pub score_test: Option<ScoreTest>,
    pub logrank: Option<LogRankResult>,
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

/// Subjects sorted by descending time, covariates centred.
struct Prepared {
    times: Vec<f64>,
    events: Vec<bool>,
    x: Vec<Vec<f64>>,
}

impl Prepared {
    fn new(ds: &SurvivalDataset, center: bool) -> Self {
        let p = ds.columns.len();
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.sort_by(|&a, &b| ds.subjects[b].time.total_cmp(&ds.subjects[a].time));
        let means: Vec<f64> = (0..p)
            .map(|j| {
                if center {
                    ds.subjects.iter().map(|s| s.x[j]).sum::<f64>() / ds.len() as f64
                } else {
                    0.0
                }
            })
            .collect();
        Prepared {
            times: order.iter().map(|&i| ds.subjects[i].time).collect(),
            events: order.iter().map(|&i| ds.subjects[i].event).collect(),
            x: order
                .iter()
                .map(|&i| {
                    ds.subjects[i]
                        .x
                        .iter()
                        .zip(&means)
                        .map(|(v, m)| v - m)
                        .collect()
                })
                .collect(),
        }
    }

    fn evaluate(&self, beta: &DVector<f64>, derivatives: bool) -> Evaluation {
        let p = beta.len();
        let eta: Vec<f64> = self
            .x
            .iter()
            .map(|x| x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let shift = eta
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        let mut ev = Evaluation {
            loglik: 0.0,
            score: DVector::zeros(p),
            info: DMatrix::zeros(p, p),
        };
        let n = self.times.len();
        let mut i = 0;
        while i < n {
            let t = self.times[i];
            let start = i;
            while i < n && self.times[i] == t {
                let r = (eta[i] - shift).exp();
                s0 += r;
                if derivatives {
                    let xi = DVector::from_column_slice(&self.x[i]);
                    s1.axpy(r, &xi, 1.0);
                    s2.ger(r, &xi, &xi, 1.0);
                }
                i += 1;
            }
            let d = (start..i).filter(|&k| self.events[k]).count();
            if d == 0 {
                continue;
            }
            let df = d as f64;
            for k in (start..i).filter(|&k| self.events[k]) {
                ev.loglik += eta[k];
                if derivatives {
                    ev.score += DVector::from_column_slice(&self.x[k]);
                }
            }
            ev.loglik -= df * (s0.ln() + shift);
            if derivatives {
                let mean = &s1 / s0;
                ev.score -= &mean * df;
                ev.info += (&s2 / s0 - &mean * mean.transpose()) * df;
            }
        }
        ev
    }
}

/// Breslow partial log-likelihood at `beta` on the raw covariates.
pub fn cox_partial_log_likelihood(ds: &SurvivalDataset, beta: &[f64]) -> f64 {
    Prepared::new(ds, false)
        .evaluate(&DVector::from_column_slice(beta), false)
        .loglik
}

fn score_test(prep: &Prepared, p: usize) -> Option<ScoreTest> {
    let ev = prep.evaluate(&DVector::zeros(p), true);
    let sol = ev.info.clone().lu().solve(&ev.score)?;
    let statistic = ev.score.dot(&sol).max(0.0);
    Some(ScoreTest {
        statistic,
        df: p,
        p_value: chi2_sf(statistic, p),
    })
}

/// Newton-Raphson with step halving. `logrank_group` adds a log-rank test
/// over that covariate's levels.
pub fn cox_fit(
    ds: &SurvivalDataset,
    config: &CoxConfig,
    logrank_group: Option<&str>,
) -> Result<CoxFit> {
    let n_events = ds.n_events();
    if n_events == 0 {
        return Err(Error::invalid("Cox model needs at least one event"));
    }
    let p = ds.columns.len();
    let rows: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.x.clone()).collect();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid(
            "covariate vectors differ in length from the column list",
        ));
    }
    let cols = transpose(&rows, p);
    if p > 0 {
        let centred: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| {
                let m = c.iter().sum::<f64>() / c.len() as f64;
                c.iter().map(|v| v - m).collect()
            })
            .collect();
        check_full_rank(&ds.columns, &centred, false)?;
    }
    let prep = Prepared::new(ds, true);
    let mut beta = DVector::<f64>::zeros(p);
    let mut ev = prep.evaluate(&beta, true);
    let null_log_likelihood = ev.loglik;
    let mut trace = vec![ev.loglik];
    let mut iterations = 0;
    let mut converged = p == 0;
    while !converged && iterations < config.max_iter {
        iterations += 1;
        let Some(step) = ev.info.clone().cholesky().map(|c| c.solve(&ev.score)) else {
            return Err(
                diverging(ds, &beta, &cols).unwrap_or(Error::NonConvergence {
                    model: "cox",
                    iterations,
                    trace,
                }),
            );
        };
        let mut scale = 1.0;
        let mut next = &beta + &step;
        let mut next_ev = prep.evaluate(&next, true);
        while (next_ev.loglik.is_nan() || next_ev.loglik < ev.loglik) && scale > 1e-10 {
            scale *= 0.5;
            next = &beta + &step * scale;
            next_ev = prep.evaluate(&next, true);
        }
        let change = (next_ev.loglik - ev.loglik).abs();
        converged = change <= config.tol * ev.loglik.abs();
        beta = next;
        ev = next_ev;
        trace.push(ev.loglik);
    }
    let sds: Vec<f64> = cols.iter().map(|c| std_dev(c)).collect();
    if let Some(j) = (0..p).find(|&j| beta[j].abs() * sds[j] > config.separation_limit) {
        return Err(Error::MonotoneLikelihood {
            column: ds.columns[j].clone(),
        });
    }
    if !converged {
        return Err(Error::NonConvergence {
            model: "cox",
            iterations,
            trace,
        });
    }
    let cov = ev.info.clone().try_inverse().ok_or_else(|| {
        diverging(ds, &beta, &cols).unwrap_or(Error::RankDeficient {
            columns: ds.columns.clone(),
        })
    })?;
    let normal = Normal::standard();
    let coefficients = (0..p)
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let b = beta[j];
            CoxCoefficient {
                name: ds.columns[j].clone(),
                beta: b,
                se,
                hazard_ratio: b.exp(),
                ci_low: (b - 1.96 * se).exp(),
                ci_high: (b + 1.96 * se).exp(),
                p_value: (2.0 * normal.sf((b / se).abs())).min(1.0),
            }
        })
        .collect();
    Ok(CoxFit {
        coefficients,
        log_likelihood: ev.loglik,
        null_log_likelihood,
        iterations,
        trace,
        n: ds.len(),
        n_events,
        score_test: if p > 0 { score_test(&prep, p) } else { None },
        logrank: logrank_group.map(|g| logrank_test(ds, g)).transpose()?,
    })
}

fn std_dev(c: &[f64]) -> f64 {
    let m = c.iter().sum::<f64>() / c.len() as f64;
    (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64).sqrt()
}

fn diverging(ds: &SurvivalDataset, beta: &DVector<f64>, cols: &[Vec<f64>]) -> Option<Error> {
    (0..beta.len())
        .max_by(|&a, &b| {
            (beta[a].abs() * std_dev(&cols[a])).total_cmp(&(beta[b].abs() * std_dev(&cols[b])))
        })
        .filter(|&j| beta[j].abs() * std_dev(&cols[j]) > 3.0)
        .map(|j| Error::MonotoneLikelihood {
            column: ds.columns[j].clone(),
        })
}
