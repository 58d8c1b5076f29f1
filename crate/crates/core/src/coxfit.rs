//! Counting-process Cox model with time-varying covariates.
//!
//! Rows are `(start, stop]` intervals; a row is at risk at event time `t` iff
//! `start < t <= stop`. Ties use Efron's approximation. The objective is the
//! negative partial log-likelihood plus a ridge term `(lambda / 2) |beta|^2`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::windows::IntervalRow;

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const PENALIZER_MAIN: f64 = 5e-3;
pub const PENALIZER_INTERACTION: f64 = 1e-2;
/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 30.0;
const Z_95: f64 = 1.96;
const PAR_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct CoxDataset {
    pub covariate_names: Vec<String>,
    /// Constant columns removed at preparation.
    pub dropped: Vec<String>,
    /// Column means subtracted from the retained covariates.
    pub centering: Vec<f64>,
    pub warnings: Vec<String>,
    p: usize,
    x: Vec<f64>,
    start: Vec<f64>,
    stop: Vec<f64>,
    event: Vec<bool>,
    /// Distinct event times, descending.
    event_times: Vec<f64>,
    by_stop_desc: Vec<usize>,
    by_start_desc: Vec<usize>,
    /// Event rows grouped by event time, aligned with `event_times`.
    events_at: Vec<Vec<usize>>,
}

impl CoxDataset {
    /// Mean-centres every column and drops constant ones.
    pub fn prepare(rows: &[IntervalRow], covariate_names: &[String]) -> Result<Self> {
        Self::prepare_with(rows, covariate_names, true)
    }

    pub fn prepare_with(
        rows: &[IntervalRow],
        covariate_names: &[String],
        center: bool,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("Cox dataset has no rows".into()));
        }
        let k = covariate_names.len();
        for (i, r) in rows.iter().enumerate() {
            if r.covariates.len() != k {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} covariates, expected {k}",
                    r.covariates.len()
                )));
            }
            if !(r.start.is_finite() && r.stop.is_finite() && r.start < r.stop) {
                return Err(Error::InvalidInput(format!(
                    "row {i} has an empty or invalid interval ({}, {}]",
                    r.start, r.stop
                )));
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "row {i} has a non-finite value in `{}`",
                    covariate_names[j]
                )));
            }
        }
        if !rows.iter().any(|r| r.event) {
            return Err(Error::NoEvents);
        }

        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        let mut warnings = Vec::new();
        for (j, name) in covariate_names.iter().enumerate() {
            let first = rows[0].covariates[j];
            if rows.iter().all(|r| r.covariates[j] == first) {
                log::warn!("covariate `{name}` is constant and was dropped");
                warnings.push(format!("dropped constant covariate `{name}`"));
                dropped.push(name.clone());
            } else {
                keep.push(j);
            }
        }
        let p = keep.len();
        let n = rows.len();
        let centering: Vec<f64> = keep
            .iter()
            .map(|&j| {
                if center {
                    rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut x = Vec::with_capacity(n * p);
        for r in rows {
            x.extend(
                keep.iter()
                    .zip(&centering)
                    .map(|(&j, m)| r.covariates[j] - m),
            );
        }

        let start: Vec<f64> = rows.iter().map(|r| r.start).collect();
        let stop: Vec<f64> = rows.iter().map(|r| r.stop).collect();
        let event: Vec<bool> = rows.iter().map(|r| r.event).collect();

        let mut by_stop_desc: Vec<usize> = (0..n).collect();
        by_stop_desc.sort_by(|&a, &b| stop[b].total_cmp(&stop[a]).then(a.cmp(&b)));
        let mut by_start_desc: Vec<usize> = (0..n).collect();
        by_start_desc.sort_by(|&a, &b| start[b].total_cmp(&start[a]).then(a.cmp(&b)));

        let mut event_times: Vec<f64> = Vec::new();
        let mut events_at: Vec<Vec<usize>> = Vec::new();
        for &i in &by_stop_desc {
            if !event[i] {
                continue;
            }
            if event_times.last() != Some(&stop[i]) {
                event_times.push(stop[i]);
                events_at.push(Vec::new());
            }
            events_at.last_mut().unwrap().push(i);
        }

        Ok(CoxDataset {
            covariate_names: keep.iter().map(|&j| covariate_names[j].clone()).collect(),
            dropped,
            centering,
            warnings,
            p,
            x,
            start,
            stop,
            event,
            event_times,
            by_stop_desc,
            by_start_desc,
            events_at,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.start.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    /// Prepared (centred) covariate vector of a row.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Distinct event times in ascending order.
    pub fn event_times(&self) -> Vec<f64> {
        self.event_times.iter().rev().copied().collect()
    }

    fn check_beta(&self, beta: &[f64], penalizer: f64) -> Result<()> {
        if beta.len() != self.p {
            return Err(Error::InvalidInput(format!(
                "beta has {} entries, dataset has {} covariates",
                beta.len(),
                self.p
            )));
        }
        if !(penalizer >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "penalizer must be >= 0, got {penalizer}"
            )));
        }
        Ok(())
    }

    /// Linear predictors and their clamped exponentials, plus the number of
    /// rows that hit the clamp.
    fn risk_scores(&self, beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let p = self.p;
        let n = self.n_rows();
        let mut eta = vec![0.0; n];
        eta.par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (k, e) in chunk.iter_mut().enumerate() {
                    let i = c * PAR_CHUNK + k;
                    *e = self.x[i * p..(i + 1) * p]
                        .iter()
                        .zip(beta)
                        .map(|(a, b)| a * b)
                        .sum();
                }
            });
        if let Some(row) = eta.iter().position(|e| !e.is_finite()) {
            return Err(Error::NonFiniteLinearPredictor { row });
        }
        let clamped = eta.iter().filter(|e| e.abs() > ETA_CLAMP).count();
        let w: Vec<f64> = eta
            .par_iter()
            .map(|e| e.clamp(-ETA_CLAMP, ETA_CLAMP).exp())
            .collect();
        Ok((eta, w, clamped))
    }

    /// Unpenalized partial log-likelihood.
    pub fn log_partial_likelihood(&self, beta: &[f64]) -> Result<f64> {
        self.check_beta(beta, 0.0)?;
        let (eta, w, _) = self.risk_scores(beta)?;
        let mut ll = 0.0;
        let mut s0 = 0.0;
        let (mut add, mut rem) = (0, 0);
        for (t, events) in self.event_times.iter().zip(&self.events_at) {
            while add < self.by_stop_desc.len() && self.stop[self.by_stop_desc[add]] >= *t {
                s0 += w[self.by_stop_desc[add]];
                add += 1;
            }
            while rem < self.by_start_desc.len() && self.start[self.by_start_desc[rem]] >= *t {
                s0 -= w[self.by_start_desc[rem]];
                rem += 1;
            }
            let d = events.len() as f64;
            let s0d: f64 = events.iter().map(|&i| w[i]).sum();
            for k in 0..events.len() {
                let i = events[k];
                ll += eta[i].clamp(-ETA_CLAMP, ETA_CLAMP);
                ll -= (s0 - (k as f64 / d) * s0d).ln();
            }
        }
        Ok(ll)
    }

    /// Penalized gradient and Hessian of the negative log partial likelihood,
    /// along with the unpenalized log-likelihood at `beta`.
    pub fn derivatives(
        &self,
        beta: &[f64],
        penalizer: f64,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check_beta(beta, penalizer)?;
        let p = self.p;
        let (eta, w, _) = self.risk_scores(beta)?;
        let mut ll = 0.0;
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![0.0; p * p];
        let (mut add, mut rem) = (0, 0);
        let mut s1d = vec![0.0; p];
        let mut s2d = vec![0.0; p * p];
        let mut num1 = vec![0.0; p];

        let accumulate = |s0: &mut f64, s1: &mut [f64], s2: &mut [f64], i: usize, sign: f64| {
            let wi = sign * w[i];
            let xi = &self.x[i * p..(i + 1) * p];
            *s0 += wi;
            for a in 0..p {
                let wa = wi * xi[a];
                s1[a] += wa;
                for b in 0..=a {
                    s2[a * p + b] += wa * xi[b];
                }
            }
        };

        for (t, events) in self.event_times.iter().zip(&self.events_at) {
            while add < self.by_stop_desc.len() && self.stop[self.by_stop_desc[add]] >= *t {
                accumulate(&mut s0, &mut s1, &mut s2, self.by_stop_desc[add], 1.0);
                add += 1;
            }
            while rem < self.by_start_desc.len() && self.start[self.by_start_desc[rem]] >= *t {
                accumulate(&mut s0, &mut s1, &mut s2, self.by_start_desc[rem], -1.0);
                rem += 1;
            }
            let mut s0d = 0.0;
            s1d.iter_mut().for_each(|v| *v = 0.0);
            s2d.iter_mut().for_each(|v| *v = 0.0);
            for &i in events {
                accumulate(&mut s0d, &mut s1d, &mut s2d, i, 1.0);
                ll += eta[i].clamp(-ETA_CLAMP, ETA_CLAMP);
                for (g, xv) in grad.iter_mut().zip(self.row(i)) {
                    *g -= xv;
                }
            }
            let d = events.len() as f64;
            for k in 0..events.len() {
                let frac = k as f64 / d;
                let den = s0 - frac * s0d;
                ll -= den.ln();
                for a in 0..p {
                    num1[a] = (s1[a] - frac * s1d[a]) / den;
                    grad[a] += num1[a];
                }
                for a in 0..p {
                    for b in 0..=a {
                        hess[a * p + b] +=
                            (s2[a * p + b] - frac * s2d[a * p + b]) / den - num1[a] * num1[b];
                    }
                }
            }
        }

        let mut h = DMatrix::<f64>::zeros(p, p);
        for a in 0..p {
            for b in 0..=a {
                h[(a, b)] = hess[a * p + b];
                h[(b, a)] = hess[a * p + b];
            }
            h[(a, a)] += penalizer;
        }
        let g = DVector::from_iterator(p, grad.iter().zip(beta).map(|(g, b)| g + penalizer * b));
        Ok((ll, g, h))
    }
}

/// `-l(beta) + (penalizer / 2) |beta|^2`.
pub fn neg_log_partial_likelihood(data: &CoxDataset, beta: &[f64], penalizer: f64) -> Result<f64> {
    data.check_beta(beta, penalizer)?;
    let ll = data.log_partial_likelihood(beta)?;
    Ok(-ll + 0.5 * penalizer * beta.iter().map(|b| b * b).sum::<f64>())
}

pub fn gradient_and_hessian(
    data: &CoxDataset,
    beta: &[f64],
    penalizer: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (_, g, h) = data.derivatives(beta, penalizer)?;
    Ok((g, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p: f64,
}

impl CoefficientRow {
    pub fn new(name: &str, coef: f64, se: f64) -> Self {
        let z = coef / se;
        CoefficientRow {
            name: name.to_string(),
            coef,
            se,
            hr: coef.exp(),
            ci_lower: (coef - Z_95 * se).exp(),
            ci_upper: (coef + Z_95 * se).exp(),
            p: erfc(z.abs() / std::f64::consts::SQRT_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: Vec<CoefficientRow>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub penalizer: f64,
    pub n_rows: usize,
    pub n_events: usize,
    pub gradient_max_norm: f64,
    /// Rows whose linear predictor hit the clamp at the final estimate.
    pub clamped_rows: usize,
    pub dropped_covariates: Vec<String>,
    /// Covariates with no likelihood information, e.g. a phase indicator that
    /// switches at the same time in every row; only the ridge pins them.
    #[serde(default)]
    pub unidentified: Vec<String>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientRow> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.coef).collect()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.se).collect()
    }

    pub fn hazard_ratios(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.hr).collect()
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>9} {:>8} {:>17} {:>10}",
            "covariate", "coef", "se", "hr", "95% ci", "p"
        );
        for c in &self.coefficients {
            if self.unidentified.contains(&c.name) {
                let _ = writeln!(
                    out,
                    "{:<24} {:>10.4}   (absorbed by the baseline hazard)",
                    c.name, c.coef
                );
                continue;
            }
            let _ = writeln!(
                out,
                "{:<24} {:>10.4} {:>9.4} {:>8.3} {:>8.3}-{:<8.3} {:>10.2e}",
                c.name, c.coef, c.se, c.hr, c.ci_lower, c.ci_upper, c.p
            );
        }
        let _ = writeln!(
            out,
            "rows={} events={} loglik={:.3} iterations={} converged={} penalizer={}",
            self.n_rows,
            self.n_events,
            self.log_likelihood,
            self.iterations,
            self.converged,
            self.penalizer
        );
        out
    }
}

/// Damped Newton with step halving; falls back to a gradient step when the
/// Hessian is not positive definite. Convergence needs a relative objective
/// change below `tol` and a gradient max-norm below `10 tol |l|`.
pub fn fit(data: &CoxDataset, penalizer: f64, tol: f64, max_iter: usize) -> Result<FitResult> {
    let p = data.n_covariates();
    let mut beta = vec![0.0; p];
    data.check_beta(&beta, penalizer)?;
    let penalty = |b: &[f64]| 0.5 * penalizer * b.iter().map(|v| v * v).sum::<f64>();

    let mut rel_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let (mut ll, mut g, mut h) = data.derivatives(&beta, penalizer)?;
    loop {
        let obj = -ll + penalty(&beta);
        let gmax = g.amax();
        if gmax < 10.0 * tol * ll.abs().max(1.0) && (iterations == 0 || rel_change < tol) {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                log::warn!("Hessian not positive definite at iteration {iterations}; taking a gradient step");
                g.clone()
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b - scale * s)
                .collect();
            let cand_obj = neg_log_partial_likelihood(data, &cand, penalizer)?;
            if cand_obj <= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            // no descent possible at machine precision
            rel_change = 0.0;
            let (l2, g2, h2) = data.derivatives(&beta, penalizer)?;
            ll = l2;
            g = g2;
            h = h2;
            converged = g.amax() < 10.0 * tol * ll.abs().max(1.0);
            break;
        };
        rel_change = (obj - cand_obj).abs() / obj.abs().max(1.0);
        beta = cand;
        (ll, g, h) = data.derivatives(&beta, penalizer)?;
    }

    if !converged {
        log::warn!("Cox fit did not converge after {iterations} iterations (relative change {rel_change:e})");
    }
    let cov = h
        .clone()
        .cholesky()
        .ok_or(Error::SingularHessian)?
        .inverse();
    let (_, _, clamped) = data.risk_scores(&beta)?;
    let coefficients = data
        .covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| CoefficientRow::new(name, beta[j], cov[(j, j)].sqrt()))
        .collect();
    let info_floor = 1e-9 * data.n_events().max(1) as f64;
    let unidentified = data
        .covariate_names
        .iter()
        .enumerate()
        .filter(|&(j, _)| h[(j, j)] - penalizer < info_floor)
        .map(|(_, name)| name.clone())
        .collect();
    Ok(FitResult {
        coefficients,
        log_likelihood: ll,
        iterations,
        converged,
        penalizer,
        n_rows: data.n_rows(),
        n_events: data.n_events(),
        gradient_max_norm: g.amax(),
        clamped_rows: clamped,
        dropped_covariates: data.dropped.clone(),
        unidentified,
    })
}

/// Cumulative baseline hazard as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl BaselineHazard {
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }
}

/// Breslow estimator at the centred covariate values: jumps of
/// `d(t) / sum_{R(t)} exp(eta)`.
pub fn predict_baseline_hazard(data: &CoxDataset, result: &FitResult) -> Result<BaselineHazard> {
    let beta = result.beta();
    data.check_beta(&beta, 0.0)?;
    let (_, w, _) = data.risk_scores(&beta)?;
    let mut jumps = Vec::with_capacity(data.event_times.len());
    let mut s0 = 0.0;
    let (mut add, mut rem) = (0, 0);
    for (t, events) in data.event_times.iter().zip(&data.events_at) {
        while add < data.by_stop_desc.len() && data.stop[data.by_stop_desc[add]] >= *t {
            s0 += w[data.by_stop_desc[add]];
            add += 1;
        }
        while rem < data.by_start_desc.len() && data.start[data.by_start_desc[rem]] >= *t {
            s0 -= w[data.by_start_desc[rem]];
            rem += 1;
        }
        jumps.push((*t, events.len() as f64 / s0));
    }
    jumps.reverse();
    let mut acc = 0.0;
    let (times, cumulative) = jumps
        .into_iter()
        .map(|(t, j)| {
            acc += j;
            (t, acc)
        })
        .unzip();
    Ok(BaselineHazard { times, cumulative })
}
