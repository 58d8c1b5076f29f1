//! Fixtures, brute-force oracles and invariant checks shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use reciprocity_core::covariates::{CovariateContext, TenureBucket};
use reciprocity_core::design::{assemble_rows, DesignSpec, ModelKind, PairData, DEFAULT_BINS};
use reciprocity_core::events::{Corpus, Event, EventKind, HOUR};
use reciprocity_core::pipeline::{analyze, Analysis, PipelineConfig};
use reciprocity_core::report::{help_rate_curves, normalize};
use reciprocity_core::simulate::{generate, SimConfig};
use reciprocity_core::windows::{
    assign_synthetic_transition, covariate_names, expand_to_intervals, IntervalRow,
    ObservationWindow, IS_TREATED_ACTIVE, PHASE_POST_ANSWER, PHASE_POST_QUESTION,
    RT_INTERACTION_ACTIVE, RT_INTERACTION_POSTQ, TREATED_POST_QUESTION, TREATMENT,
};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small simulated platform, quick enough for property tests.
pub fn small_sim(seed: u64, n_users: usize) -> SimConfig {
    SimConfig {
        seed,
        n_users,
        horizon_days: 200.0,
        ..SimConfig::default()
    }
}

pub fn small_analysis(seed: u64, n_users: usize) -> (Corpus, Analysis) {
    let corpus = generate(&small_sim(seed, n_users)).expect("simulation");
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let analysis = analyze(&corpus, &cfg).expect("analysis");
    (corpus, analysis)
}

// ---------------------------------------------------------------------------
// Cox oracles

/// Random counting-process rows on a half-hour grid so that event times tie.
pub fn random_rows(r: &mut ChaCha8Rng, n_rows: usize, p: usize) -> Vec<IntervalRow> {
    let mut rows: Vec<IntervalRow> = (0..n_rows)
        .map(|i| {
            let start = 0.5 * r.random_range(0..5) as f64;
            let stop = start + 0.5 * r.random_range(1..7) as f64;
            let covariates = (0..p)
                .map(|j| {
                    if j % 2 == 1 {
                        r.random_range(0..2) as f64
                    } else {
                        r.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            IntervalRow {
                window_id: i as u64,
                group: 0,
                start,
                stop,
                event: r.random::<f64>() < 0.5,
                covariates,
            }
        })
        .collect();
    if !rows.iter().any(|r| r.event) {
        rows[0].event = true;
    }
    // keep every column non-constant
    for j in 0..p {
        if rows
            .iter()
            .all(|r| r.covariates[j] == rows[0].covariates[j])
        {
            rows[0].covariates[j] += 1.0;
        }
    }
    rows
}

pub fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

/// Efron log partial likelihood by explicit enumeration of every risk set.
pub fn efron_loglik(rows: &[IntervalRow], beta: &[f64]) -> f64 {
    let eta = |r: &IntervalRow| {
        r.covariates
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum::<f64>()
    };
    let mut times: Vec<f64> = rows.iter().filter(|r| r.event).map(|r| r.stop).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut ll = 0.0;
    for t in times {
        let dead: Vec<&IntervalRow> = rows.iter().filter(|r| r.event && r.stop == t).collect();
        let risk: f64 = rows
            .iter()
            .filter(|r| r.start < t && t <= r.stop)
            .map(|r| eta(r).exp())
            .sum();
        let tied: f64 = dead.iter().map(|r| eta(r).exp()).sum();
        let d = dead.len() as f64;
        for (l, r) in dead.iter().enumerate() {
            ll += eta(r) - (risk - l as f64 / d * tied).ln();
        }
    }
    ll
}

pub fn efron_objective(rows: &[IntervalRow], beta: &[f64], penalizer: f64) -> f64 {
    -efron_loglik(rows, beta) + 0.5 * penalizer * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Nelder-Mead with restarts from the best vertex.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    step: f64,
    max_evals: usize,
) -> Vec<f64> {
    let n = x0.len();
    let mut best = x0.to_vec();
    let mut evals = 0;
    for _restart in 0..8 {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for i in 0..n {
            let mut v = best.clone();
            v[i] += step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        evals += n + 1;
        while evals < max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();
            let spread = (values[n] - values[0]).abs();
            let size = simplex[1..]
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&simplex[0])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if spread < 1e-15 && size < 1e-10 {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let reflected = along(-1.0);
            let fr = f(&reflected);
            evals += 1;
            if fr < values[0] {
                let expanded = along(-2.0);
                let fe = f(&expanded);
                evals += 1;
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
            } else if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
            } else {
                let contracted = if fr < values[n] {
                    along(-0.5)
                } else {
                    along(0.5)
                };
                let fc = f(&contracted);
                evals += 1;
                if fc < values[n].min(fr) {
                    simplex[n] = contracted;
                    values[n] = fc;
                } else {
                    for i in 1..=n {
                        simplex[i] = simplex[i]
                            .iter()
                            .zip(&simplex[0])
                            .map(|(x, b)| b + 0.5 * (x - b))
                            .collect();
                        values[i] = f(&simplex[i]);
                    }
                    evals += n;
                }
            }
        }
        let i = (0..=n)
            .min_by(|&a, &b| values[a].total_cmp(&values[b]))
            .unwrap();
        let moved = simplex[i]
            .iter()
            .zip(&best)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        best = simplex[i].clone();
        if moved < 1e-9 {
            break;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Window invariants

fn column(names: &[String], name: &str) -> usize {
    names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("column {name}"))
}

/// Partition, event conservation, phase monotonicity and control zeros for
/// the rows of one window.
pub fn check_window_rows(w: &ObservationWindow, spec: &DesignSpec) -> Check {
    let rows = expand_to_intervals(w, spec).map_err(|e| e.to_string())?;
    let names = covariate_names(spec);
    let span = (w.t_window_end - w.t_window_start) as f64 / HOUR as f64;
    let total: f64 = rows.iter().map(|r| r.stop - r.start).sum();
    if (total - span).abs() > 1e-9 {
        return Err(format!(
            "window {}: rows cover {total}h, expected {span}h",
            w.question_id
        ));
    }
    if rows[0].start != 0.0 || (rows.last().unwrap().stop - span).abs() > 1e-9 {
        return Err(format!(
            "window {}: rows do not span [0, {span}]",
            w.question_id
        ));
    }
    for pair in rows.windows(2) {
        if pair[0].stop != pair[1].start {
            return Err(format!(
                "window {}: gap or overlap at {}",
                w.question_id, pair[0].stop
            ));
        }
    }
    if rows.iter().any(|r| !(r.start < r.stop)) {
        return Err(format!("window {}: zero-length row", w.question_id));
    }
    let events = rows.iter().filter(|r| r.event).count();
    if events != w.help_times.len() {
        return Err(format!(
            "window {}: {events} event rows for {} help times",
            w.question_id,
            w.help_times.len()
        ));
    }
    for name in [PHASE_POST_QUESTION, PHASE_POST_ANSWER] {
        let j = column(&names, name);
        if rows
            .windows(2)
            .any(|p| p[1].covariates[j] < p[0].covariates[j])
        {
            return Err(format!("window {}: {name} decreases", w.question_id));
        }
    }
    if !w.treated {
        let mut zero_cols = vec![TREATMENT, TREATED_POST_QUESTION];
        if spec.model != ModelKind::DiscreteBins {
            zero_cols.push(IS_TREATED_ACTIVE);
        }
        for name in zero_cols {
            let j = column(&names, name);
            if rows.iter().any(|r| r.covariates[j] != 0.0) {
                return Err(format!(
                    "control window {}: {name} is nonzero",
                    w.question_id
                ));
            }
        }
    }
    Ok(())
}

/// Treated window and its control share phase offsets from the window start.
pub fn check_pair_offsets(treated: &ObservationWindow, control: &ObservationWindow) -> Check {
    let control = assign_synthetic_transition(control, treated).map_err(|e| e.to_string())?;
    let offsets = |w: &ObservationWindow| {
        (
            w.t_question - w.t_window_start,
            w.transition().unwrap() - w.t_window_start,
            w.t_window_end - w.t_window_start,
        )
    };
    if offsets(treated) != offsets(&control) {
        return Err(format!(
            "pair ({}, {}): offsets {:?} vs {:?}",
            treated.question_id,
            control.question_id,
            offsets(treated),
            offsets(&control)
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Covariate invariants

/// Moves every event at or after the window start (except the focal
/// question) by a random shift and drops some answers; the covariates of
/// the window must not change.
pub fn check_pretreatment(corpus: &Corpus, w: &ObservationWindow, seed: u64) -> Check {
    let before = CovariateContext::new(corpus)
        .compute(w)
        .map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    let shift = r.random_range(1..5 * 86_400);
    let events: Vec<Event> = corpus
        .events()
        .iter()
        .filter(|e| {
            e.timestamp < w.t_window_start
                || e.kind == EventKind::Question
                || r.random::<f64>() < 0.7
        })
        .map(|e| {
            let mut e = e.clone();
            if e.timestamp >= w.t_window_start && e.post_id != w.question_id {
                e.timestamp += shift;
            }
            e
        })
        .collect();
    let moved = Corpus::new(events, None).map_err(|e| e.to_string())?;
    let after = CovariateContext::new(&moved)
        .compute(w)
        .map_err(|e| e.to_string())?;
    if before != after {
        return Err(format!(
            "window {}: covariates changed\n{before:?}\n{after:?}",
            w.question_id
        ));
    }
    if !(0.0..=1.0).contains(&after.tag_answer_rate_avg) {
        return Err(format!("window {}: tag rate outside [0,1]", w.question_id));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Design invariants

/// Subsampled pairs keep both of their windows.
pub fn check_pair_integrity(data: &PairData, k: usize, seed: u64) -> Check {
    let spec = DesignSpec {
        subsample_pairs: Some(k),
        seed,
        ..DesignSpec::main()
    };
    let design = assemble_rows(data, &spec).map_err(|e| e.to_string())?;
    let expected = k.min(data.pairs.len());
    if design.n_pairs != expected {
        return Err(format!(
            "{} pairs kept, expected {expected}",
            design.n_pairs
        ));
    }
    let mut by_group: BTreeMap<u32, HashSet<u64>> = BTreeMap::new();
    for r in &design.rows {
        by_group.entry(r.group).or_default().insert(r.window_id);
    }
    if by_group.len() != expected {
        return Err(format!(
            "{} row groups for {expected} pairs",
            by_group.len()
        ));
    }
    let pair_windows: HashSet<(u64, u64)> = data
        .pairs
        .iter()
        .map(|p| (p.treated_window_id, p.control_window_id))
        .collect();
    for (g, ids) in &by_group {
        let treated: Vec<u64> = ids
            .iter()
            .copied()
            .filter(|id| data.windows[id].treated)
            .collect();
        let control: Vec<u64> = ids
            .iter()
            .copied()
            .filter(|id| !data.windows[id].treated)
            .collect();
        if treated.len() != 1
            || control.len() != 1
            || !pair_windows.contains(&(treated[0], control[0]))
        {
            return Err(format!(
                "group {g} does not hold exactly one matched pair: {ids:?}"
            ));
        }
    }
    Ok(())
}

/// Interaction columns vanish wherever their base indicator does.
pub fn check_interaction_zeros(data: &PairData) -> Check {
    let spec = DesignSpec::response_time();
    let design = assemble_rows(data, &spec).map_err(|e| e.to_string())?;
    let names = &design.covariate_names;
    for (inter, base) in [
        (RT_INTERACTION_ACTIVE, IS_TREATED_ACTIVE),
        (RT_INTERACTION_POSTQ, TREATED_POST_QUESTION),
    ] {
        let (i, b) = (column(names, inter), column(names, base));
        if let Some(r) = design
            .rows
            .iter()
            .find(|r| r.covariates[b] == 0.0 && r.covariates[i] != 0.0)
        {
            return Err(format!(
                "{inter} nonzero where {base} is 0 (window {})",
                r.window_id
            ));
        }
    }
    Ok(())
}

fn row_key(r: &IntervalRow) -> (u64, u64, u64, bool, Vec<u64>) {
    (
        r.window_id,
        r.start.to_bits(),
        r.stop.to_bits(),
        r.event,
        r.covariates.iter().map(|v| v.to_bits()).collect(),
    )
}

/// Filtering pairs by tenure before assembly gives the same rows as
/// assembling everything and keeping the rows of that bucket's pairs.
pub fn check_bucket_commutes(data: &PairData, bucket: TenureBucket) -> Check {
    let filtered = assemble_rows(
        data,
        &DesignSpec {
            tenure_filter: Some(bucket),
            ..DesignSpec::main()
        },
    )
    .map_err(|e| e.to_string())?;
    let all = assemble_rows(data, &DesignSpec::main()).map_err(|e| e.to_string())?;
    let keep: HashSet<u32> = data
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| data.tenure[&p.treated_window_id] == bucket)
        .map(|(g, _)| g as u32)
        .collect();
    let mut a: Vec<_> = filtered.rows.iter().map(row_key).collect();
    let mut b: Vec<_> = all
        .rows
        .iter()
        .filter(|r| keep.contains(&r.group))
        .map(row_key)
        .collect();
    a.sort();
    b.sort();
    if a != b {
        return Err(format!(
            "bucket {bucket:?}: {} rows vs {} rows after filtering",
            a.len(),
            b.len()
        ));
    }
    Ok(())
}

/// Every treated pair with a response time inside the bin range lands in
/// exactly one bin.
pub fn check_bins_cover(data: &PairData) -> Check {
    let max = DEFAULT_BINS.last().unwrap().upper_minutes;
    for p in &data.pairs {
        let rt = data.response_minutes(p).map_err(|e| e.to_string())?;
        let hits = DEFAULT_BINS.iter().filter(|b| b.contains(rt)).count();
        if rt > 0.0 && rt <= max && hits != 1 {
            return Err(format!("response time {rt} min falls in {hits} bins"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Report invariants

/// Binned counts add up to each group's help events.
pub fn check_report_conservation(windows: &[ObservationWindow], bin_hours: f64) -> Check {
    let curves = help_rate_curves(windows, bin_hours).map_err(|e| e.to_string())?;
    let mut totals: HashMap<bool, u64> = HashMap::new();
    for w in windows {
        *totals.entry(w.treated).or_default() += w.help_times.len() as u64;
    }
    for c in &curves {
        let treated = c.series == reciprocity_core::report::SERIES_TREATED;
        let binned: u64 = c.counts.iter().sum();
        let expected = totals.get(&treated).copied().unwrap_or(0);
        if binned != expected {
            return Err(format!(
                "series {}: {binned} binned events, {expected} in windows",
                c.series
            ));
        }
        if c.normalized {
            let pre = c.normalized_rate.len() / 2;
            let mean = c.normalized_rate[..pre].iter().sum::<f64>() / pre as f64;
            if (mean - 1.0).abs() > 1e-9 {
                return Err(format!("series {}: pre-question mean {mean}", c.series));
            }
        }
    }
    Ok(())
}

/// Scaling a series before normalization leaves it unchanged.
pub fn check_normalization_invariance(rates: &[f64], pre: usize, c: f64) -> Check {
    let base = normalize(rates, &rates[..pre]);
    let scaled: Vec<f64> = rates.iter().map(|r| r * c).collect();
    let other = normalize(&scaled, &scaled[..pre]);
    match (base, other) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) => {
            let worst = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            if worst < 1e-12 {
                Ok(())
            } else {
                Err(format!(
                    "normalized curves differ by {worst} after scaling by {c}"
                ))
            }
        }
        _ => Err("scaling changed whether the series normalizes".into()),
    }
}
