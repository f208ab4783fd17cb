//! Negative binomial (NB2, log link) regression and AIC-driven grouping of
//! rare implant systems.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::factorial::ln_factorial;

use super::design::{check_full_rank, encode_categorical, transpose};
use crate::error::{Error, Result};

pub const OTHER_SYSTEM: &str = "Other system";
pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NbConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub theta_max: f64,
}

impl Default for NbConfig {
    fn default() -> Self {
        NbConfig {
            max_iter: 100,
            tol: 1e-8,
            theta_max: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbCoefficient {
    pub name: String,
    #[serde(with = "super::nonfinite")]
    pub coef: f64,
    #[serde(with = "super::nonfinite")]
    pub se: f64,
    #[serde(with = "super::nonfinite")]
    pub irr: f64,
    #[serde(with = "super::nonfinite")]
    pub ci_low: f64,
    #[serde(with = "super::nonfinite")]
    pub ci_high: f64,
    #[serde(with = "super::nonfinite")]
    pub p_value: f64,
}

impl NbCoefficient {
    /// `"2.290 (1.455-3.604)"`.
    pub fn irr_display(&self) -> String {
        format!("{:.3} ({:.3}-{:.3})", self.irr, self.ci_low, self.ci_high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbFit {
    pub coefficients: Vec<NbCoefficient>,
    pub theta: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub n: usize,
}

impl NbFit {
    pub fn coefficient(&self, name: &str) -> Option<&NbCoefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

struct Problem<'a> {
    y: &'a [u64],
    x: DMatrix<f64>,
    offset: DVector<f64>,
}

impl Problem<'_> {
    fn means(&self, beta: &DVector<f64>) -> DVector<f64> {
        (&self.x * beta + &self.offset).map(f64::exp)
    }

    fn loglik(&self, mu: &DVector<f64>, theta: f64) -> f64 {
        self.y
            .iter()
            .zip(mu.iter())
            .map(|(&y, &m)| {
                let yf = y as f64;
                let lgamma_ratio: f64 = (0..y).map(|k| (theta + k as f64).ln()).sum();
                let y_term = if y == 0 {
                    0.0
                } else {
                    yf * (m.ln() - (theta + m).ln())
                };
                lgamma_ratio - ln_factorial(y) - theta * (m / theta).ln_1p() + y_term
            })
            .sum()
    }

    /// First and second derivatives of the log-likelihood in θ.
    fn theta_derivatives(&self, mu: &DVector<f64>, theta: f64) -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for (&y, &m) in self.y.iter().zip(mu.iter()) {
            let (mut s1, mut s2) = (0.0, 0.0);
            for k in 0..y {
                let v = theta + k as f64;
                s1 += 1.0 / v;
                s2 += 1.0 / (v * v);
            }
            let r = (m - y as f64) / (theta + m);
            g += s1 - (m / theta).ln_1p() + r;
            h += -s2 + 1.0 / theta - 1.0 / (theta + m) - r / (theta + m);
        }
        (g, h)
    }

    /// Weighted least squares step; `theta = ∞` gives Poisson weights.
    fn irls_target(&self, beta: &DVector<f64>, theta: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let eta = &self.x * beta;
        let mu = (&eta + &self.offset).map(f64::exp);
        let w = mu.map(|m| {
            if theta.is_finite() {
                m / (1.0 + m / theta)
            } else {
                m
            }
        });
        let z = DVector::from_iterator(
            mu.len(),
            (0..mu.len()).map(|i| eta[i] + (self.y[i] as f64 - mu[i]) / mu[i]),
        );
        let mut xtw = self.x.transpose();
        for (j, mut col) in xtw.column_iter_mut().enumerate() {
            col *= w[j];
        }
        let info = &xtw * &self.x;
        let rhs = &xtw * z;
        let target = info.clone().cholesky()?.solve(&rhs);
        Some((target, info))
    }
}

fn poisson_loglik(y: &[u64], mu: &DVector<f64>) -> f64 {
    y.iter()
        .zip(mu.iter())
        .map(|(&y, &m)| y as f64 * m.ln() - m - ln_factorial(y))
        .sum()
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Fits NB2 with an intercept plus `columns`; `exposure` enters as
/// ln(exposure) offset.
pub fn nb_fit(
    counts: &[u64],
    columns: &[String],
    rows: &[Vec<f64>],
    exposure: Option<&[f64]>,
    config: &NbConfig,
) -> Result<NbFit> {
    let n = counts.len();
    let p = columns.len();
    if n == 0 || rows.len() != n || rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid(
            "counts and covariate rows disagree in shape",
        ));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::invalid("all counts are zero"));
    }
    let offset = match exposure {
        Some(e) if e.len() != n => {
            return Err(Error::invalid("exposure length differs from counts"))
        }
        Some(e) if e.iter().any(|v| !v.is_finite() || *v <= 0.0) => {
            return Err(Error::invalid("exposure must be positive and finite"))
        }
        Some(e) => DVector::from_iterator(n, e.iter().map(|v| v.ln())),
        None => DVector::zeros(n),
    };
    check_full_rank(columns, &transpose(rows, p), true)?;
    let mut x = DMatrix::<f64>::from_element(n, p + 1, 1.0);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            x[(i, j + 1)] = *v;
        }
    }
    let prob = Problem {
        y: counts,
        x,
        offset,
    };

    // Poisson start
    let mean = counts.iter().sum::<u64>() as f64 / prob.offset.map(f64::exp).sum();
    let mut beta = DVector::<f64>::zeros(p + 1);
    beta[0] = mean.ln();
    for _ in 0..50 {
        let Some((target, _)) = prob.irls_target(&beta, f64::INFINITY) else {
            break;
        };
        let old = poisson_loglik(counts, &prob.means(&beta));
        let mut step = &target - &beta;
        while poisson_loglik(counts, &prob.means(&(&beta + &step))) < old && max_abs(&step) > 1e-12
        {
            step *= 0.5;
        }
        beta += &step;
        if max_abs(&step) <= config.tol * (1.0 + max_abs(&beta)) {
            break;
        }
    }
    let mu = prob.means(&beta);
    let excess: f64 = counts
        .iter()
        .zip(mu.iter())
        .map(|(&y, &m)| (y as f64 - m).powi(2) - m)
        .sum();
    let mut theta = if excess > 0.0 {
        (mu.map(|m| m * m).sum() / excess).clamp(1e-3, config.theta_max)
    } else {
        config.theta_max
    };

    let mut ll = prob.loglik(&prob.means(&beta), theta);
    let mut trace = vec![ll];
    let mut iterations = 0;
    loop {
        if iterations == config.max_iter {
            return Err(Error::NonConvergence {
                model: "negative binomial",
                iterations,
                trace,
            });
        }
        iterations += 1;
        // β step at fixed θ
        let (target, _) = prob
            .irls_target(&beta, theta)
            .ok_or_else(|| Error::RankDeficient {
                columns: columns.to_vec(),
            })?;
        let mut step = &target - &beta;
        let mut next_ll = prob.loglik(&prob.means(&(&beta + &step)), theta);
        while (next_ll.is_nan() || next_ll < ll) && max_abs(&step) > 1e-14 {
            step *= 0.5;
            next_ll = prob.loglik(&prob.means(&(&beta + &step)), theta);
        }
        if next_ll >= ll {
            beta += &step;
            ll = next_ll;
        } else {
            step.fill(0.0);
        }
        // Newton step on ln θ at fixed β
        let mu = prob.means(&beta);
        let (g, h) = prob.theta_derivatives(&mu, theta);
        let (g_phi, h_phi) = (theta * g, theta * theta * h + theta * g);
        let mut d_phi = if h_phi < 0.0 {
            -g_phi / h_phi
        } else {
            g_phi.signum()
        };
        d_phi = d_phi.clamp(-5.0, 5.0);
        let phi_max = config.theta_max.ln();
        let phi = theta.ln();
        let mut moved = 0.0;
        while d_phi.abs() > 1e-15 {
            let cand = (phi + d_phi).min(phi_max);
            let cand_ll = prob.loglik(&mu, cand.exp());
            if cand_ll >= ll {
                moved = cand - phi;
                theta = cand.exp();
                ll = cand_ll;
                break;
            }
            d_phi *= 0.5;
        }
        trace.push(ll);
        let beta_change = max_abs(&step) / (1.0 + max_abs(&beta));
        let at_cap = theta >= config.theta_max * (1.0 - 1e-12) && g >= 0.0;
        if beta_change < config.tol && (moved.abs() < config.tol || at_cap) {
            break;
        }
    }
    let aic = 2.0 * (p as f64 + 2.0) - 2.0 * ll;
    if !aic.is_finite() {
        return Err(Error::NonConvergence {
            model: "negative binomial",
            iterations,
            trace,
        });
    }
    let (_, info) = prob
        .irls_target(&beta, theta)
        .ok_or_else(|| Error::RankDeficient {
            columns: columns.to_vec(),
        })?;
    let cov = info.try_inverse().ok_or_else(|| Error::RankDeficient {
        columns: columns.to_vec(),
    })?;
    let normal = Normal::standard();
    let names = std::iter::once(INTERCEPT.to_string()).chain(columns.iter().cloned());
    let coefficients = names
        .enumerate()
        .map(|(j, name)| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let b = beta[j];
            NbCoefficient {
                name,
                coef: b,
                se,
                irr: b.exp(),
                ci_low: (b - 1.96 * se).exp(),
                ci_high: (b + 1.96 * se).exp(),
                p_value: (2.0 * normal.sf((b / se).abs())).min(1.0),
            }
        })
        .collect();
    Ok(NbFit {
        coefficients,
        theta,
        log_likelihood: ll,
        aic,
        iterations,
        trace,
        n,
    })
}

/// Systems with fewer than `cutoff` patients become `OTHER_SYSTEM`.
pub fn collapse_rare(systems: &[String], cutoff: usize) -> Vec<String> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in systems {
        *freq.entry(s).or_default() += 1;
    }
    systems
        .iter()
        .map(|s| {
            if freq[s.as_str()] < cutoff {
                OTHER_SYSTEM.to_string()
            } else {
                s.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffChoice {
    pub cutoff: usize,
    /// AIC per candidate cutoff; `None` where the fit failed.
    pub aic: Vec<(usize, Option<f64>)>,
    pub fit: NbFit,
    pub system_columns: Vec<String>,
}

/// Fits one model per candidate cutoff, with the collapsed system factor
/// followed by `columns`, and keeps the lowest AIC (ties go to the
/// smallest cutoff).
#[allow(clippy::too_many_arguments)]
pub fn choose_other_cutoff(
    counts: &[u64],
    systems: &[String],
    system_reference: Option<&str>,
    columns: &[String],
    rows: &[Vec<f64>],
    exposure: Option<&[f64]>,
    cutoffs: &[usize],
    config: &NbConfig,
) -> Result<CutoffChoice> {
    if cutoffs.is_empty() {
        return Err(Error::invalid("no candidate cutoffs"));
    }
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let mut aic = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(usize, NbFit, Vec<String>)> = None;
    for &cut in &cutoffs {
        let grouped = collapse_rare(systems, cut);
        let enc = encode_categorical("implant_system", &grouped, system_reference);
        let names: Vec<String> = enc.names.iter().chain(columns).cloned().collect();
        let design: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                enc.columns
                    .iter()
                    .map(|c| c[i])
                    .chain(r.iter().copied())
                    .collect()
            })
            .collect();
        match nb_fit(counts, &names, &design, exposure, config) {
            Ok(fit) => {
                aic.push((cut, Some(fit.aic)));
                if best.as_ref().is_none_or(|b| fit.aic < b.1.aic) {
                    best = Some((cut, fit, enc.names));
                }
            }
            Err(e) => {
                log::warn!("cutoff {cut} skipped: {e}");
                failures.push(format!("cutoff {cut}: {e}"));
                aic.push((cut, None));
            }
        }
    }
    let (cutoff, fit, system_columns) = best.ok_or(Error::AllCutoffsFailed(failures))?;
    Ok(CutoffChoice {
        cutoff,
        aic,
        fit,
        system_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_recovers_mean() {
        // 100 counts with mean 2.29 and visible overdispersion
        let mut y = vec![0u64; 37];
        y.extend([1; 15]);
        y.extend([2; 10]);
        y.extend([3; 13]);
        y.extend([5; 15]);
        y.extend([8; 10]);
        assert_eq!(y.iter().sum::<u64>(), 229);
        let fit = nb_fit(&y, &[], &vec![vec![]; y.len()], None, &NbConfig::default()).unwrap();
        let c = &fit.coefficients[0];
        assert!((c.irr - 2.29).abs() < 1e-6, "{}", c.irr);
        assert!(fit.theta < 10.0);
        assert!(c.ci_low < 2.29 && c.ci_high > 2.29);
        assert_eq!(c.irr_display().split(' ').next().unwrap(), "2.290");
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(nb_fit(
            &[0, 0, 0],
            &[],
            &vec![vec![]; 3],
            None,
            &NbConfig::default()
        )
        .is_err());
    }

    #[test]
    fn collapse_counts_by_patients() {
        let s: Vec<String> = ["a", "a", "a", "b", "c", "c"]
            .iter()
            .map(|x| x.to_string())
            .collect();
        assert_eq!(
            collapse_rare(&s, 2),
            ["a", "a", "a", OTHER_SYSTEM, "c", "c"]
        );
        assert!(collapse_rare(&s, 10).iter().all(|x| x == OTHER_SYSTEM));
    }

    #[test]
    fn single_and_oversized_cutoffs() {
        let y: Vec<u64> = (0..60).map(|i| (i % 5) as u64).collect();
        let s: Vec<String> = (0..60)
            .map(|i| ["a", "b", "c"][i % 3].to_string())
            .collect();
        let rows = vec![vec![]; 60];
        let c = choose_other_cutoff(&y, &s, None, &[], &rows, None, &[7], &NbConfig::default())
            .unwrap();
        assert_eq!(c.cutoff, 7);
        let c = choose_other_cutoff(
            &y,
            &s,
            None,
            &[],
            &rows,
            None,
            &[1000],
            &NbConfig::default(),
        )
        .unwrap();
        assert!(c.system_columns.is_empty());
        assert!(
            choose_other_cutoff(&y, &s, None, &[], &rows, None, &[], &NbConfig::default()).is_err()
        );
    }
}
