//! Propensity scores, exact-stratum nearest-neighbour caliper matching with
//! replacement, and covariate balance diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariates::{MatchingCovariates, FEATURE_IS_COUNT, PROPENSITY_FEATURES};
use crate::error::{Error, Result};
use crate::events::PostId;

const LOGIT_CLAMP: f64 = 35.0;

fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityFit {
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Features removed for having fewer than two distinct values.
    pub dropped_features: Vec<String>,
    /// Count features enter the model as `ln(1 + x)`.
    pub log1p_counts: bool,
}

/// Logistic model on z-scored features; `coefficients[0]` is the intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub feature_names: Vec<String>,
    retained: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_sds: Vec<f64>,
    pub fit_metadata: PropensityFit,
}

fn transformed(raw: &[f64; 8]) -> [f64; 8] {
    let mut out = *raw;
    for (v, &is_count) in out.iter_mut().zip(FEATURE_IS_COUNT.iter()) {
        if is_count {
            *v = v.ln_1p();
        }
    }
    out
}

impl PropensityModel {
    /// Standardized design row (without intercept).
    pub fn design_row(&self, cov: &MatchingCovariates) -> Vec<f64> {
        let t = transformed(&cov.features());
        self.retained
            .iter()
            .enumerate()
            .map(|(j, &f)| (t[f] - self.feature_means[j]) / self.feature_sds[j])
            .collect()
    }

    pub fn linear_predictor(&self, cov: &MatchingCovariates) -> f64 {
        let x = self.design_row(cov);
        self.coefficients[0]
            + x.iter()
                .zip(&self.coefficients[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    /// Propensity score in (0, 1).
    pub fn score(&self, cov: &MatchingCovariates) -> f64 {
        sigmoid(self.linear_predictor(cov))
    }
}

pub fn fit_propensity(data: &[(MatchingCovariates, bool)]) -> Result<PropensityModel> {
    let n_treated = data.iter().filter(|(_, t)| *t).count();
    if n_treated == 0 || n_treated == data.len() {
        return Err(Error::InvalidInput(
            "propensity model needs at least one treated and one control observation".into(),
        ));
    }
    let raw: Vec<[f64; 8]> = data
        .iter()
        .map(|(c, _)| transformed(&c.features()))
        .collect();
    let n = raw.len() as f64;

    let (mut retained, mut means, mut sds, mut dropped) = (vec![], vec![], vec![], vec![]);
    for f in 0..PROPENSITY_FEATURES.len() {
        let first = raw[0][f];
        if raw.iter().all(|r| r[f] == first) {
            dropped.push(PROPENSITY_FEATURES[f].to_string());
            continue;
        }
        let mean = raw.iter().map(|r| r[f]).sum::<f64>() / n;
        let var = raw.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        retained.push(f);
        means.push(mean);
        sds.push(var.sqrt());
    }

    // drop columns that are linear combinations of earlier ones
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = vec![false; retained.len()];
    for (j, &f) in retained.iter().enumerate() {
        let mut col: Vec<f64> = raw.iter().map(|r| (r[f] - means[j]) / sds[j]).collect();
        for b in &basis {
            let dot: f64 = col.iter().zip(b).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm * norm > 1e-9 * (n - 1.0) {
            col.iter_mut().for_each(|v| *v /= norm);
            basis.push(col);
            keep[j] = true;
        } else {
            log::warn!(
                "propensity feature `{}` is collinear with earlier features and was dropped",
                PROPENSITY_FEATURES[f]
            );
            dropped.push(PROPENSITY_FEATURES[f].to_string());
        }
    }
    let pick = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .zip(&keep)
            .filter(|p| *p.1)
            .map(|p| p.0)
            .collect()
    };
    let retained: Vec<usize> = retained
        .into_iter()
        .zip(&keep)
        .filter(|p| *p.1)
        .map(|p| p.0)
        .collect();
    let (means, sds) = (pick(means), pick(sds));

    let x: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            retained
                .iter()
                .enumerate()
                .map(|(j, &f)| (r[f] - means[j]) / sds[j])
                .collect()
        })
        .collect();
    let y: Vec<bool> = data.iter().map(|(_, t)| *t).collect();
    let (coefficients, iterations, log_likelihood) = fit_logistic(&x, &y, 100, 1e-10)?;

    Ok(PropensityModel {
        feature_names: retained
            .iter()
            .map(|&f| PROPENSITY_FEATURES[f].to_string())
            .collect(),
        retained,
        coefficients,
        feature_means: means,
        feature_sds: sds,
        fit_metadata: PropensityFit {
            iterations,
            log_likelihood,
            dropped_features: dropped,
            log1p_counts: true,
        },
    })
}

fn logistic_loglik(x: &[Vec<f64>], y: &[bool], beta: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let eta = beta[0] + row.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            // log sigma(eta) = -log(1 + e^-eta)
            if yi {
                -(-eta).exp().ln_1p()
            } else {
                -eta.exp().ln_1p()
            }
        })
        .sum()
}

/// Newton-Raphson with step halving for a logistic regression with intercept.
/// Returns `(coefficients, iterations, log_likelihood)`.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[bool],
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize, f64)> {
    let p = x.first().map_or(0, Vec::len) + 1;
    let mut beta = vec![0.0; p];
    let mut ll = logistic_loglik(x, y, &beta);
    let mut last_change = f64::INFINITY;

    for iter in 1..=max_iter {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut row_buf = vec![1.0; p];
        for (row, &yi) in x.iter().zip(y) {
            row_buf[1..].copy_from_slice(row);
            let eta = beta.iter().zip(&row_buf).map(|(b, v)| b * v).sum::<f64>();
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            let r = (yi as u8 as f64) - mu;
            for a in 0..p {
                grad[a] += r * row_buf[a];
                for b in 0..=a {
                    hess[(a, b)] += w * row_buf[a] * row_buf[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                return Err(Error::Separation(format!(
                    "information matrix lost positive definiteness at iteration {iter}"
                )))
            }
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + scale * s)
                .collect();
            let cand_ll = logistic_loglik(x, y, &cand);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, cand_ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_ll)) = accepted else {
            return Err(Error::NonConvergence {
                model: "propensity model",
                iterations: iter,
                last_change,
            });
        };
        let max_step = beta
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        last_change = (cand_ll - ll).abs() / ll.abs().max(1.0);
        beta = cand;
        ll = cand_ll;

        if beta.iter().any(|b| b.abs() > 30.0) || ll > -1e-8 * y.len() as f64 {
            let worst = beta
                .iter()
                .enumerate()
                .skip(1)
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(j, _)| j);
            return Err(Error::Separation(format!(
                "coefficient {worst} diverging (|beta| = {:.1})",
                beta[worst].abs()
            )));
        }
        if max_step < tol.sqrt() && last_change < tol {
            return Ok((beta, iter, ll));
        }
    }
    Err(Error::NonConvergence {
        model: "propensity model",
        iterations: max_iter,
        last_change,
    })
}

/// A window ready for matching: exact stratum plus propensity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredWindow {
    pub window_id: PostId,
    pub calendar_year: i32,
    pub top_level_tag: String,
    pub score: f64,
    pub treated: bool,
    /// Hours from question to first answer; treated windows only.
    pub response_time_hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated_window_id: PostId,
    pub control_window_id: PostId,
    pub treated_score: f64,
    pub control_score: f64,
    pub response_time_hours: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_treated: usize,
    /// Strata that had treated windows but no controls.
    pub empty_control_strata: Vec<String>,
}

/// Nearest-neighbour matching within `(calendar_year, top_level_tag)` strata,
/// with replacement. Equidistant controls resolve to the smaller window id.
pub fn match_pairs(scored: &[ScoredWindow], caliper: f64, seed: u64) -> Result<MatchOutcome> {
    if !(caliper > 0.0) {
        return Err(Error::InvalidInput(format!(
            "caliper must be positive, got {caliper}"
        )));
    }
    let mut controls: BTreeMap<(i32, &str), Vec<&ScoredWindow>> = BTreeMap::new();
    let mut treated: Vec<&ScoredWindow> = Vec::new();
    for w in scored {
        if w.treated {
            treated.push(w);
        } else {
            controls
                .entry((w.calendar_year, w.top_level_tag.as_str()))
                .or_default()
                .push(w);
        }
    }
    for pool in controls.values_mut() {
        pool.sort_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.window_id.cmp(&b.window_id))
        });
    }
    treated.sort_by_key(|w| w.window_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    treated.shuffle(&mut rng);

    let mut out = MatchOutcome::default();
    let mut empty = std::collections::BTreeSet::new();
    for t in treated {
        let key = (t.calendar_year, t.top_level_tag.as_str());
        let Some(pool) = controls.get(&key).filter(|p| !p.is_empty()) else {
            empty.insert(format!("{}/{}", key.0, key.1));
            out.unmatched_treated += 1;
            continue;
        };
        match nearest(pool, t.score) {
            Some(c) if (c.score - t.score).abs() <= caliper => out.pairs.push(MatchedPair {
                treated_window_id: t.window_id,
                control_window_id: c.window_id,
                treated_score: t.score,
                control_score: c.score,
                response_time_hours: t.response_time_hours.ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "treated window {} has no response time",
                        t.window_id
                    ))
                })?,
            }),
            _ => out.unmatched_treated += 1,
        }
    }
    out.empty_control_strata = empty.into_iter().collect();
    for s in &out.empty_control_strata {
        log::warn!("stratum {s} has no control windows; its treated windows stay unmatched");
    }
    Ok(out)
}

fn nearest<'a>(pool: &[&'a ScoredWindow], score: f64) -> Option<&'a ScoredWindow> {
    let pos = pool.partition_point(|c| c.score < score);
    let dist = |i: usize| (pool[i].score - score).abs();
    let best = [pos.checked_sub(1), (pos < pool.len()).then_some(pos)]
        .into_iter()
        .flatten()
        .map(dist)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    // every control at the minimal distance, on either side
    let mut candidates = Vec::new();
    let mut i = pos;
    while i > 0 && dist(i - 1) == best {
        candidates.push(pool[i - 1]);
        i -= 1;
    }
    let mut j = pos;
    while j < pool.len() && dist(j) == best {
        candidates.push(pool[j]);
        j += 1;
    }
    candidates.into_iter().min_by_key(|c| c.window_id)
}

const PAIRS_HEADER: [&str; 5] = [
    "treated_window_id",
    "control_window_id",
    "treated_score",
    "control_score",
    "response_time_hours",
];

pub fn write_pairs<W: Write>(pairs: &[MatchedPair], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PAIRS_HEADER)?;
    for p in pairs {
        w.write_record([
            p.treated_window_id.to_string(),
            p.control_window_id.to_string(),
            format!("{}", p.treated_score),
            format!("{}", p.control_score),
            format!("{:.6}", p.response_time_hours),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs<R: Read>(input: R) -> Result<Vec<MatchedPair>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let parse_f = |idx: usize| {
            rec.get(idx)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line,
                    field: PAIRS_HEADER[idx],
                    message: e.to_string(),
                })
        };
        let parse_u = |idx: usize| {
            rec.get(idx)
                .unwrap_or("")
                .parse::<u64>()
                .map_err(|e| Error::Parse {
                    line,
                    field: PAIRS_HEADER[idx],
                    message: e.to_string(),
                })
        };
        out.push(MatchedPair {
            treated_window_id: parse_u(0)?,
            control_window_id: parse_u(1)?,
            treated_score: parse_f(2)?,
            control_score: parse_f(3)?,
            response_time_hours: parse_f(4)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub treated_mean_unmatched: f64,
    pub control_mean_unmatched: f64,
    /// `None` when the pooled variance is zero but the means differ.
    pub smd_unmatched: Option<f64>,
    pub treated_mean_matched: f64,
    pub control_mean_matched: f64,
    pub smd_matched: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<CovariateBalance>,
    pub worst_unmatched_smd: f64,
    pub worst_matched_smd: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub n_pairs: usize,
}

/// `(mean_t - mean_c) / sqrt((var_t + var_c) / 2)`.
pub fn standardized_mean_difference(
    mean_t: f64,
    mean_c: f64,
    var_t: f64,
    var_c: f64,
) -> Option<f64> {
    let pooled = ((var_t + var_c) / 2.0).sqrt();
    if pooled > 0.0 {
        Some((mean_t - mean_c) / pooled)
    } else if mean_t == mean_c {
        Some(0.0)
    } else {
        None
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Balance before and after matching. Variances always come from the
/// unmatched groups so both columns share a scale; matched control means
/// count reused controls once per pair.
pub fn balance(
    pairs: &[MatchedPair],
    covariates: &[(PostId, MatchingCovariates, bool)],
) -> Result<BalanceReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput(
            "balance needs at least one matched pair".into(),
        ));
    }
    let lookup: HashMap<PostId, &MatchingCovariates> =
        covariates.iter().map(|(id, c, _)| (*id, c)).collect();
    let feats = |id: PostId| -> Result<[f64; 8]> {
        lookup
            .get(&id)
            .map(|c| c.features())
            .ok_or_else(|| Error::InvalidInput(format!("no covariates for window {id}")))
    };

    let mut rows = Vec::new();
    let (mut worst_u, mut worst_m) = (0.0f64, 0.0f64);
    let n_treated = covariates.iter().filter(|r| r.2).count();
    for (f, name) in PROPENSITY_FEATURES.iter().enumerate() {
        let treated: Vec<f64> = covariates
            .iter()
            .filter(|r| r.2)
            .map(|r| r.1.features()[f])
            .collect();
        let control: Vec<f64> = covariates
            .iter()
            .filter(|r| !r.2)
            .map(|r| r.1.features()[f])
            .collect();
        let (mt, vt) = mean_var(&treated);
        let (mc, vc) = mean_var(&control);
        let mut mt_m = 0.0;
        let mut mc_m = 0.0;
        for p in pairs {
            mt_m += feats(p.treated_window_id)?[f];
            mc_m += feats(p.control_window_id)?[f];
        }
        mt_m /= pairs.len() as f64;
        mc_m /= pairs.len() as f64;
        let smd_u = standardized_mean_difference(mt, mc, vt, vc);
        let smd_m = standardized_mean_difference(mt_m, mc_m, vt, vc);
        worst_u = worst_u.max(smd_u.map_or(f64::INFINITY, f64::abs));
        worst_m = worst_m.max(smd_m.map_or(f64::INFINITY, f64::abs));
        rows.push(CovariateBalance {
            covariate: name.to_string(),
            treated_mean_unmatched: mt,
            control_mean_unmatched: mc,
            smd_unmatched: smd_u,
            treated_mean_matched: mt_m,
            control_mean_matched: mc_m,
            smd_matched: smd_m,
        });
    }
    Ok(BalanceReport {
        covariates: rows,
        worst_unmatched_smd: worst_u,
        worst_matched_smd: worst_m,
        n_treated,
        n_control: covariates.len() - n_treated,
        n_pairs: pairs.len(),
    })
}

impl BalanceReport {
    pub fn to_text(&self) -> String {
        let fmt_smd = |s: Option<f64>| s.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>8} | {:>10} {:>10} {:>8}",
            "covariate", "tr_mean", "ct_mean", "smd", "tr_mean", "ct_mean", "smd"
        );
        let _ = writeln!(out, "{:<16} {:^30} | {:^30}", "", "unmatched", "matched");
        for r in &self.covariates {
            let _ = writeln!(
                out,
                "{:<16} {:>10.3} {:>10.3} {:>8} | {:>10.3} {:>10.3} {:>8}",
                r.covariate,
                r.treated_mean_unmatched,
                r.control_mean_unmatched,
                fmt_smd(r.smd_unmatched),
                r.treated_mean_matched,
                r.control_mean_matched,
                fmt_smd(r.smd_matched),
            );
        }
        let _ = writeln!(
            out,
            "treated={} control={} pairs={} worst |smd| unmatched={:.3} matched={:.3}",
            self.n_treated,
            self.n_control,
            self.n_pairs,
            self.worst_unmatched_smd,
            self.worst_matched_smd
        );
        out
    }
}
