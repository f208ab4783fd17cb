//! Conditionally independent accuracy/propensity model over LF votes, fit by EM.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LabelMatrix, ProbabilisticLabel, Vote};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelModelConfig {
    pub max_iter: usize,
    /// Relative change in log-likelihood below which EM stops.
    pub tol: f64,
    pub init_accuracy: f64,
    /// Class prior; held fixed unless `learn_prior` is set.
    pub prior: f64,
    pub learn_prior: bool,
    pub accuracy_bounds: (f64, f64),
}

impl Default for LabelModelConfig {
    fn default() -> Self {
        LabelModelConfig {
            max_iter: 100,
            tol: 1e-6,
            init_accuracy: 0.7,
            prior: 0.5,
            learn_prior: false,
            accuracy_bounds: (0.01, 0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Accuracies were mirrored because their mean fell below 0.5.
    pub flipped: bool,
    /// Log-likelihood after each iteration.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelModel {
    pub lf_ids: Vec<String>,
    pub prior: f64,
    pub accuracies: Vec<f64>,
    pub propensities: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Non-abstaining votes per row as (lf index, voted TRUE).
struct SparseVotes {
    rows: Vec<Vec<(usize, bool)>>,
    m: usize,
}

impl SparseVotes {
    fn new(matrix: &LabelMatrix) -> Self {
        let rows = matrix
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| !v.is_abstain())
                    .map(|(j, v)| (j, *v == Vote::True))
                    .collect()
            })
            .collect();
        SparseVotes {
            rows,
            m: matrix.m(),
        }
    }

    fn coverage(&self) -> Vec<f64> {
        let mut c = vec![0usize; self.m];
        for r in &self.rows {
            for &(j, _) in r {
                c[j] += 1;
            }
        }
        let n = self.rows.len().max(1) as f64;
        c.into_iter().map(|k| k as f64 / n).collect()
    }
}

/// (ln P(Λ_i, Y=T), ln P(Λ_i, Y=F)) without the propensity terms, which are
/// shared by both classes.
fn joint_logs(row: &[(usize, bool)], prior: f64, acc: &[f64]) -> (f64, f64) {
    let mut lt = prior.ln();
    let mut lf = (1.0 - prior).ln();
    for &(j, t) in row {
        let (a, na) = (acc[j].ln(), (1.0 - acc[j]).ln());
        if t {
            lt += a;
            lf += na;
        } else {
            lt += na;
            lf += a;
        }
    }
    (lt, lf)
}

fn propensity_ll(votes: &SparseVotes, beta: &[f64]) -> f64 {
    let n = votes.rows.len() as f64;
    beta.iter()
        .map(|&b| {
            let k = b * n;
            let mut s = 0.0;
            if k > 0.0 {
                s += k * b.ln();
            }
            if n - k > 0.0 {
                s += (n - k) * (1.0 - b).ln();
            }
            s
        })
        .sum()
}

fn map_rows<T: Send>(
    votes: &SparseVotes,
    f: impl Fn(&[(usize, bool)]) -> T + Sync + Send,
) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        votes.rows.par_iter().map(|r| f(r)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        votes.rows.iter().map(|r| f(r)).collect()
    }
}

/// Marginal log-likelihood of the matrix under the given parameters.
pub(crate) fn log_likelihood(matrix: &LabelMatrix, prior: f64, acc: &[f64], beta: &[f64]) -> f64 {
    let votes = SparseVotes::new(matrix);
    rows_ll(&votes, prior, acc) + propensity_ll(&votes, beta)
}

fn rows_ll(votes: &SparseVotes, prior: f64, acc: &[f64]) -> f64 {
    map_rows(votes, |r| {
        let (lt, lf) = joint_logs(r, prior, acc);
        ln_add_exp(lt, lf)
    })
    .into_iter()
    .sum()
}

/// Fits prior, accuracies and propensities by EM. Propensities are the
/// empirical coverage; accuracies start at `init_accuracy` and are clipped to
/// `accuracy_bounds` after every M-step.
pub fn fit_label_model(matrix: &LabelMatrix, config: &LabelModelConfig) -> Result<LabelModel> {
    if matrix.n() == 0 || matrix.m() == 0 {
        return Err(Error::invalid(
            "label model needs at least one row and one labeling function",
        ));
    }
    let (lo, hi) = config.accuracy_bounds;
    if !(0.0 < lo && lo <= hi && hi < 1.0) || !(0.0 < config.prior && config.prior < 1.0) {
        return Err(Error::invalid(
            "accuracy bounds and prior must lie strictly inside (0, 1)",
        ));
    }
    let votes = SparseVotes::new(matrix);
    if votes.rows.iter().all(Vec::is_empty) {
        return Err(Error::NoSignal);
    }
    let m = matrix.m();
    let beta = votes.coverage();
    let beta_ll = propensity_ll(&votes, &beta);
    let mut acc = vec![config.init_accuracy.clamp(lo, hi); m];
    let mut prior = config.prior;
    let mut trace = Vec::new();
    let mut prev = rows_ll(&votes, prior, &acc) + beta_ll;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        // E-step
        let q: Vec<f64> = map_rows(&votes, |r| {
            let (lt, lf) = joint_logs(r, prior, &acc);
            sigmoid(lt - lf)
        });
        // M-step
        let mut agree = vec![0.0; m];
        let mut count = vec![0usize; m];
        for (r, &qi) in votes.rows.iter().zip(&q) {
            for &(j, t) in r {
                agree[j] += if t { qi } else { 1.0 - qi };
                count[j] += 1;
            }
        }
        for j in 0..m {
            if count[j] > 0 {
                acc[j] = (agree[j] / count[j] as f64).clamp(lo, hi);
            }
        }
        if config.learn_prior {
            prior = (q.iter().sum::<f64>() / q.len() as f64).clamp(1e-6, 1.0 - 1e-6);
        }
        let ll = rows_ll(&votes, prior, &acc) + beta_ll;
        trace.push(ll);
        let rel = (ll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = ll;
        if rel < config.tol {
            converged = true;
            break;
        }
    }

    let mean_acc = acc.iter().sum::<f64>() / m as f64;
    let flipped = mean_acc < 0.5;
    if flipped {
        for a in &mut acc {
            *a = 1.0 - *a;
        }
        if config.learn_prior {
            prior = 1.0 - prior;
        }
    }
    if !converged {
        log::warn!("label model stopped after {iterations} iterations without converging");
    }
    let log_likelihood = rows_ll(&votes, prior, &acc) + beta_ll;
    Ok(LabelModel {
        lf_ids: matrix.lf_ids().to_vec(),
        prior,
        accuracies: acc,
        propensities: beta,
        diagnostics: FitDiagnostics {
            iterations,
            log_likelihood,
            converged,
            flipped,
            trace,
        },
    })
}

impl LabelModel {
    pub fn log_likelihood(&self, matrix: &LabelMatrix) -> f64 {
        log_likelihood(matrix, self.prior, &self.accuracies, &self.propensities)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// P(Y = TRUE | votes) for every row. All-abstain rows get the prior.
pub fn posterior_labels(
    model: &LabelModel,
    matrix: &LabelMatrix,
) -> Result<Vec<ProbabilisticLabel>> {
    if model.lf_ids != matrix.lf_ids() {
        return Err(Error::LfMismatch {
            expected: model.lf_ids.clone(),
            found: matrix.lf_ids().to_vec(),
        });
    }
    let votes = SparseVotes::new(matrix);
    let base = logit(model.prior);
    let p = map_rows(&votes, |r| {
        if r.is_empty() {
            return model.prior;
        }
        let score: f64 = r
            .iter()
            .map(|&(j, t)| {
                let w = logit(model.accuracies[j]);
                if t {
                    w
                } else {
                    -w
                }
            })
            .sum();
        sigmoid(base + score)
    });
    Ok(matrix
        .candidate_ids()
        .iter()
        .zip(p)
        .map(|(id, p_true)| ProbabilisticLabel {
            candidate_id: id.clone(),
            p_true,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use Vote::{Abstain as A, False as F, True as T};

    fn model(acc: Vec<f64>, prior: f64) -> LabelModel {
        let m = acc.len();
        LabelModel {
            lf_ids: (0..m).map(|j| format!("lf{j}")).collect(),
            prior,
            accuracies: acc,
            propensities: vec![1.0; m],
            diagnostics: FitDiagnostics {
                iterations: 0,
                log_likelihood: 0.0,
                converged: true,
                flipped: false,
                trace: vec![],
            },
        }
    }

    fn posteriors(model: &LabelModel, rows: &[Vec<Vote>]) -> Vec<f64> {
        let mx = LabelMatrix::from_rows(rows).unwrap();
        posterior_labels(model, &mx)
            .unwrap()
            .into_iter()
            .map(|l| l.p_true)
            .collect()
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(
            posteriors(&model(vec![0.8, 0.8], 0.3), &[vec![A, A]]),
            vec![0.3]
        );
        assert_abs_diff_eq!(
            posteriors(&model(vec![0.9], 0.5), &[vec![T]])[0],
            0.9,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            posteriors(&model(vec![0.8, 0.8], 0.5), &[vec![T, F]])[0],
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn posterior_rejects_mismatched_lfs() {
        let mx = LabelMatrix::from_rows(&[vec![T, T, T]]).unwrap();
        assert!(matches!(
            posterior_labels(&model(vec![0.8, 0.8], 0.5), &mx),
            Err(Error::LfMismatch { .. })
        ));
    }

    #[test]
    fn all_abstain_is_no_signal() {
        let mx = LabelMatrix::from_rows(&[vec![A, A], vec![A, A]]).unwrap();
        assert!(matches!(
            fit_label_model(&mx, &LabelModelConfig::default()),
            Err(Error::NoSignal)
        ));
    }

    #[test]
    fn unanimous_true_hits_upper_clip() {
        let mx = LabelMatrix::from_rows(&vec![vec![T, T, T]; 50]).unwrap();
        let fit = fit_label_model(&mx, &LabelModelConfig::default()).unwrap();
        for a in &fit.accuracies {
            assert_abs_diff_eq!(*a, 0.99, epsilon = 1e-9);
        }
        assert_eq!(fit.propensities, vec![1.0; 3]);
        for l in posterior_labels(&fit, &mx).unwrap() {
            // three votes at the clip: 0.99^3 / (0.99^3 + 0.01^3)
            assert!(l.p_true > 0.999_99);
        }
    }

    #[test]
    fn single_lf_likelihood_is_flat_in_accuracy() {
        // With one LF and a fixed prior of 0.5 each row's marginal is
        // 0.5 * beta whatever the accuracy, so accuracy is not identifiable
        // and EM stays at its initial value.
        let rows: Vec<Vec<Vote>> = (0..100)
            .map(|i| vec![if i % 10 < 9 { T } else { F }])
            .collect();
        let mx = LabelMatrix::from_rows(&rows).unwrap();
        let beta = [1.0];
        let l1 = log_likelihood(&mx, 0.5, &[0.6], &beta);
        let l2 = log_likelihood(&mx, 0.5, &[0.95], &beta);
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-9);
        let fit = fit_label_model(&mx, &LabelModelConfig::default()).unwrap();
        assert_abs_diff_eq!(fit.accuracies[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn json_roundtrip() {
        let mx = LabelMatrix::from_rows(&[vec![T, F, A], vec![T, T, F], vec![F, F, T]]).unwrap();
        let fit = fit_label_model(&mx, &LabelModelConfig::default()).unwrap();
        let back = LabelModel::from_json(&fit.to_json().unwrap()).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn flips_when_lfs_are_adversarial() {
        // lf0 and lf1 always agree, lf2 always disagrees; starting at 0.7 EM
        // settles on a consistent labeling with mean accuracy at least 0.5.
        let rows: Vec<Vec<Vote>> = (0..40)
            .map(|i| {
                if i % 2 == 0 {
                    vec![T, T, F]
                } else {
                    vec![F, F, T]
                }
            })
            .collect();
        let mx = LabelMatrix::from_rows(&rows).unwrap();
        let fit = fit_label_model(&mx, &LabelModelConfig::default()).unwrap();
        let mean = fit.accuracies.iter().sum::<f64>() / 3.0;
        assert!(mean >= 0.5);
    }

    #[test]
    fn learned_prior_tracks_prevalence() {
        let rows: Vec<Vec<Vote>> = (0..200)
            .map(|i| {
                if i % 4 == 0 {
                    vec![T, T, T]
                } else {
                    vec![F, F, F]
                }
            })
            .collect();
        let mx = LabelMatrix::from_rows(&rows).unwrap();
        let cfg = LabelModelConfig {
            learn_prior: true,
            ..Default::default()
        };
        let fit = fit_label_model(&mx, &cfg).unwrap();
        assert!((fit.prior - 0.25).abs() < 0.01, "prior {}", fit.prior);
    }
}
