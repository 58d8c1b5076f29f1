//! Estimation designs built from matched pairs: the main difference-in-
//! differences model, the response-time moderation model, and discrete
//! response-time bins, with tenure stratification and pair-level subsampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::TenureBucket;
use crate::coxfit::{
    fit, CoefficientRow, CoxDataset, FitResult, DEFAULT_MAX_ITER, DEFAULT_TOL,
    PENALIZER_INTERACTION, PENALIZER_MAIN,
};
use crate::error::{Error, Result};
use crate::events::PostId;
use crate::matching::MatchedPair;
use crate::windows::{
    assign_synthetic_transition, covariate_names, expand_to_intervals, IntervalRow,
    ObservationWindow, IS_TREATED_ACTIVE, RT_INTERACTION_ACTIVE, RT_INTERACTION_POSTQ,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Main,
    MainPlusResponseTime,
    DiscreteBins,
}

/// Right-closed response-time bin `(lower, upper]` in minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtBin {
    pub lower_minutes: f64,
    pub upper_minutes: f64,
}

impl RtBin {
    pub const fn new(lower_minutes: f64, upper_minutes: f64) -> Self {
        RtBin {
            lower_minutes,
            upper_minutes,
        }
    }

    pub fn contains(&self, minutes: f64) -> bool {
        minutes > self.lower_minutes && minutes <= self.upper_minutes
    }

    pub fn covariate_name(&self) -> String {
        format!(
            "treated_active_rt_{}_{}m",
            self.lower_minutes, self.upper_minutes
        )
    }

    pub fn label(&self) -> String {
        format!("({}, {}] min", self.lower_minutes, self.upper_minutes)
    }
}

impl fmt::Display for RtBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lower_minutes, self.upper_minutes)
    }
}

pub const DEFAULT_BINS: [RtBin; 7] = [
    RtBin::new(0.0, 15.0),
    RtBin::new(15.0, 30.0),
    RtBin::new(30.0, 60.0),
    RtBin::new(60.0, 120.0),
    RtBin::new(120.0, 240.0),
    RtBin::new(240.0, 480.0),
    RtBin::new(480.0, 720.0),
];

/// Parses `"0-15,15-30,..."`.
pub fn parse_bins(s: &str) -> Result<Vec<RtBin>> {
    let bins =
        s.split(',')
            .map(|part| {
                let (lo, hi) = part.trim().split_once('-').ok_or_else(|| {
                    Error::InvalidInput(format!("bin `{part}` is not `lower-upper`"))
                })?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bin `{part}`: {e}")))
                };
                Ok(RtBin::new(parse(lo)?, parse(hi)?))
            })
            .collect::<Result<Vec<_>>>()?;
    validate_bins(&bins)?;
    Ok(bins)
}

pub fn validate_bins(bins: &[RtBin]) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::InvalidInput("bin list is empty".into()));
    }
    for b in bins {
        if !(b.lower_minutes >= 0.0 && b.lower_minutes < b.upper_minutes) {
            return Err(Error::InvalidInput(format!("bin {b} is empty or negative")));
        }
    }
    for pair in bins.windows(2) {
        if pair[1].lower_minutes < pair[0].upper_minutes {
            return Err(Error::InvalidInput(format!(
                "bins {} and {} overlap or are unordered",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub model: ModelKind,
    pub tenure_filter: Option<TenureBucket>,
    pub bins: Option<Vec<RtBin>>,
    pub clip_percentiles: (f64, f64),
    pub penalizer: f64,
    pub seed: u64,
    pub subsample_pairs: Option<usize>,
    /// When set and the expanded design exceeds this many rows, whole pairs
    /// are subsampled down to roughly this size.
    pub row_budget: Option<usize>,
}

impl DesignSpec {
    pub fn main() -> Self {
        DesignSpec {
            model: ModelKind::Main,
            tenure_filter: None,
            bins: None,
            clip_percentiles: (5.0, 95.0),
            penalizer: PENALIZER_MAIN,
            seed: 0,
            subsample_pairs: None,
            row_budget: None,
        }
    }

    pub fn response_time() -> Self {
        DesignSpec {
            model: ModelKind::MainPlusResponseTime,
            penalizer: PENALIZER_INTERACTION,
            ..Self::main()
        }
    }

    pub fn discrete_bins() -> Self {
        DesignSpec {
            model: ModelKind::DiscreteBins,
            bins: Some(DEFAULT_BINS.to_vec()),
            penalizer: PENALIZER_INTERACTION,
            ..Self::main()
        }
    }

    pub fn bins(&self) -> Vec<RtBin> {
        self.bins.clone().unwrap_or_else(|| DEFAULT_BINS.to_vec())
    }
}

/// Everything the design needs about matched pairs.
#[derive(Debug, Clone, Default)]
pub struct PairData {
    pub pairs: Vec<MatchedPair>,
    pub windows: HashMap<PostId, ObservationWindow>,
    /// Tenure bucket of each treated window's asker.
    pub tenure: HashMap<PostId, TenureBucket>,
}

impl PairData {
    pub fn new(
        pairs: Vec<MatchedPair>,
        windows: impl IntoIterator<Item = ObservationWindow>,
        tenure: HashMap<PostId, TenureBucket>,
    ) -> Self {
        PairData {
            pairs,
            windows: windows.into_iter().map(|w| (w.question_id, w)).collect(),
            tenure,
        }
    }

    fn window(&self, id: PostId) -> Result<&ObservationWindow> {
        self.windows
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("matched window {id} is missing")))
    }

    /// Treated response time in minutes.
    pub fn response_minutes(&self, pair: &MatchedPair) -> Result<f64> {
        let w = self.window(pair.treated_window_id)?;
        w.response_time_secs()
            .map(|s| s as f64 / 60.0)
            .ok_or_else(|| {
                Error::InvalidInput(format!("treated window {} has no answer", w.question_id))
            })
    }

    pub fn tenure_of(&self, pair: &MatchedPair) -> Result<TenureBucket> {
        self.tenure
            .get(&pair.treated_window_id)
            .copied()
            .ok_or_else(|| {
                Error::InvalidInput(format!("no tenure for window {}", pair.treated_window_id))
            })
    }
}

/// Clip-then-standardize map for one interaction column, fitted on its
/// nonzero entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub column: String,
    pub clip_low: f64,
    pub clip_high: f64,
    pub mean: f64,
    pub sd: f64,
    pub n_active: usize,
}

impl ColumnScaler {
    pub fn fit(column: &str, values: &[f64], percentiles: (f64, f64)) -> Result<Self> {
        let mut active: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
        if active.len() < 2 {
            return Err(Error::DegeneratePercentiles(column.to_string()));
        }
        active.sort_by(f64::total_cmp);
        let clip_low = percentile_sorted(&active, percentiles.0);
        let clip_high = percentile_sorted(&active, percentiles.1);
        if !(clip_low < clip_high) {
            return Err(Error::DegeneratePercentiles(column.to_string()));
        }
        let n = active.len() as f64;
        let clipped: Vec<f64> = active
            .iter()
            .map(|v| v.clamp(clip_low, clip_high))
            .collect();
        let mean = clipped.iter().sum::<f64>() / n;
        let sd = (clipped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        Ok(ColumnScaler {
            column: column.to_string(),
            clip_low,
            clip_high,
            mean,
            sd,
            n_active: active.len(),
        })
    }

    /// Zeros stay zero.
    pub fn apply(&self, v: f64) -> f64 {
        if v == 0.0 {
            0.0
        } else {
            (v.clamp(self.clip_low, self.clip_high) - self.mean) / self.sd
        }
    }
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Assembled interval rows, before Cox preparation.
#[derive(Debug, Clone)]
pub struct Design {
    pub rows: Vec<IntervalRow>,
    pub covariate_names: Vec<String>,
    pub n_pairs: usize,
    pub scalers: Vec<ColumnScaler>,
    /// Pairs excluded because their response time falls outside every bin.
    pub excluded_out_of_bins: usize,
    /// Pairs used per bin, for the discrete-bin model.
    pub pairs_per_bin: Vec<usize>,
    /// Help events in those pairs' windows.
    pub events_per_bin: Vec<usize>,
}

impl Design {
    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.event).count()
    }
}

/// Indices of pairs kept after a seeded draw of `k` whole pairs, in their
/// original order.
pub fn subsample_pair_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn expand_pair(
    data: &PairData,
    pair: &MatchedPair,
    spec: &DesignSpec,
    group: u32,
) -> Result<Vec<IntervalRow>> {
    let treated = data.window(pair.treated_window_id)?;
    let control = assign_synthetic_transition(data.window(pair.control_window_id)?, treated)?;
    let mut rows = expand_to_intervals(treated, spec)?;
    rows.extend(expand_to_intervals(&control, spec)?);
    for r in &mut rows {
        r.group = group;
    }
    Ok(rows)
}

/// Selects pairs, expands both windows of each, and scales interaction
/// columns. Pair `g` of the selection gets `group = g` on all its rows.
pub fn assemble_rows(data: &PairData, spec: &DesignSpec) -> Result<Design> {
    let bins = spec.bins();
    if spec.model == ModelKind::DiscreteBins {
        validate_bins(&bins)?;
    }
    let mut selected: Vec<&MatchedPair> = Vec::with_capacity(data.pairs.len());
    let mut excluded_out_of_bins = 0;
    for pair in &data.pairs {
        if let Some(bucket) = spec.tenure_filter {
            if data.tenure_of(pair)? != bucket {
                continue;
            }
        }
        if spec.model == ModelKind::DiscreteBins {
            let rt = data.response_minutes(pair)?;
            if !bins.iter().any(|b| b.contains(rt)) {
                excluded_out_of_bins += 1;
                continue;
            }
        }
        selected.push(pair);
    }
    if selected.is_empty() {
        let label = spec
            .tenure_filter
            .map_or("all".to_string(), |b| b.label().to_string());
        return Err(Error::EmptyStratum(label));
    }
    if let Some(k) = spec.subsample_pairs {
        let keep = subsample_pair_indices(selected.len(), k, spec.seed);
        selected = keep.into_iter().map(|i| selected[i]).collect();
    }

    let mut per_pair: Vec<Vec<IntervalRow>> = selected
        .par_iter()
        .enumerate()
        .map(|(g, p)| expand_pair(data, p, spec, g as u32))
        .collect::<Result<_>>()?;

    if let Some(budget) = spec.row_budget {
        let total: usize = per_pair.iter().map(Vec::len).sum();
        if total > budget {
            let k = ((per_pair.len() as f64) * budget as f64 / total as f64).floor() as usize;
            let keep = subsample_pair_indices(per_pair.len(), k.max(1), spec.seed);
            log::info!(
                "subsampling {} of {} pairs to fit a {budget}-row budget",
                keep.len(),
                per_pair.len()
            );
            let mut taken: Vec<Option<Vec<IntervalRow>>> = per_pair.into_iter().map(Some).collect();
            per_pair = keep.iter().map(|&i| taken[i].take().unwrap()).collect();
            selected = keep.iter().map(|&i| selected[i]).collect();
            for (g, rows) in per_pair.iter_mut().enumerate() {
                rows.iter_mut().for_each(|r| r.group = g as u32);
            }
        }
    }

    let mut pairs_per_bin = Vec::new();
    let mut events_per_bin = Vec::new();
    if spec.model == ModelKind::DiscreteBins {
        pairs_per_bin = vec![0; bins.len()];
        events_per_bin = vec![0; bins.len()];
        for (p, rows) in selected.iter().zip(&per_pair) {
            let rt = data.response_minutes(p)?;
            if let Some(k) = bins.iter().position(|b| b.contains(rt)) {
                pairs_per_bin[k] += 1;
                events_per_bin[k] += rows.iter().filter(|r| r.event).count();
            }
        }
    }

    let names = covariate_names(spec);
    let mut rows: Vec<IntervalRow> = per_pair.into_iter().flatten().collect();
    let mut scalers = Vec::new();
    if spec.model == ModelKind::MainPlusResponseTime {
        for col in [RT_INTERACTION_ACTIVE, RT_INTERACTION_POSTQ] {
            let j = names
                .iter()
                .position(|n| n == col)
                .expect("interaction column present");
            let values: Vec<f64> = rows.iter().map(|r| r.covariates[j]).collect();
            let scaler = ColumnScaler::fit(col, &values, spec.clip_percentiles)?;
            rows.par_iter_mut()
                .for_each(|r| r.covariates[j] = scaler.apply(r.covariates[j]));
            scalers.push(scaler);
        }
    }

    Ok(Design {
        rows,
        covariate_names: names,
        n_pairs: selected.len(),
        scalers,
        excluded_out_of_bins,
        pairs_per_bin,
        events_per_bin,
    })
}

pub fn assemble(data: &PairData, spec: &DesignSpec) -> Result<CoxDataset> {
    let design = assemble_rows(data, spec)?;
    CoxDataset::prepare(&design.rows, &design.covariate_names)
}

/// One line of a stratified results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stratum: String,
    pub n: usize,
    pub events: usize,
    pub coef: Option<f64>,
    pub se: Option<f64>,
    pub hr: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p: Option<f64>,
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepRow {
    pub fn from_coefficient(
        stratum: String,
        n: usize,
        events: usize,
        c: Option<&CoefficientRow>,
        converged: bool,
    ) -> Self {
        SweepRow {
            stratum,
            n,
            events,
            coef: c.map(|c| c.coef),
            se: c.map(|c| c.se),
            hr: c.map(|c| c.hr),
            ci: c.map(|c| (c.ci_lower, c.ci_upper)),
            p: c.map(|c| c.p),
            converged: Some(converged),
            error: None,
        }
    }

    pub fn failed(stratum: String, n: usize, error: String) -> Self {
        SweepRow {
            stratum,
            n,
            events: 0,
            coef: None,
            se: None,
            hr: None,
            ci: None,
            p: None,
            converged: None,
            error: Some(error),
        }
    }
}

/// Aligned plain-text table of sweep rows.
pub fn sweep_table(title: &str, rows: &[SweepRow]) -> String {
    use std::fmt::Write as _;
    let mut out = format!("{title}\n");
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>9} {:>8} {:>7} {:>15} {:>9}",
        "stratum", "pairs", "events", "coef", "se", "hr", "95% ci", "p"
    );
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
    for r in rows {
        let ci =
            r.ci.map_or("-".to_string(), |(l, u)| format!("[{l:.3}, {u:.3}]"));
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>9} {:>8} {:>7} {:>15} {:>9}{}",
            r.stratum,
            r.n,
            r.events,
            opt(r.coef, 4),
            opt(r.se, 4),
            opt(r.hr, 3),
            ci,
            r.p.map_or("-".to_string(), |p| format!("{p:.2e}")),
            r.error
                .as_ref()
                .map_or(String::new(), |e| format!("  ({e})")),
        );
    }
    out
}

/// Fit settings shared by the stratified runs.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

pub fn fit_design(
    data: &PairData,
    spec: &DesignSpec,
    opts: FitOptions,
) -> Result<(Design, FitResult)> {
    let design = assemble_rows(data, spec)?;
    let ds = CoxDataset::prepare(&design.rows, &design.covariate_names)?;
    let result = fit(&ds, spec.penalizer, opts.tol, opts.max_iter)?;
    Ok((design, result))
}

/// Separate fits per tenure bucket, in parallel. Buckets without pairs are
/// absent from the map; per-bucket failures are kept as errors.
pub fn run_tenure_sweep(
    data: &PairData,
    base_spec: &DesignSpec,
    opts: FitOptions,
) -> Result<BTreeMap<TenureBucket, Result<(Design, FitResult)>>> {
    let mut counts: BTreeMap<TenureBucket, usize> = BTreeMap::new();
    for p in &data.pairs {
        *counts.entry(data.tenure_of(p)?).or_default() += 1;
    }
    for b in TenureBucket::ALL {
        if !counts.contains_key(&b) {
            log::warn!("tenure bucket {} has no matched pairs; skipped", b.label());
        }
    }
    let buckets: Vec<TenureBucket> = counts.keys().copied().collect();
    let fits: Vec<(TenureBucket, Result<(Design, FitResult)>)> = buckets
        .par_iter()
        .map(|&b| {
            let spec = DesignSpec {
                tenure_filter: Some(b),
                ..base_spec.clone()
            };
            (b, fit_design(data, &spec, opts))
        })
        .collect();
    Ok(fits.into_iter().collect())
}

/// Sweep results as table rows for one named coefficient.
pub fn sweep_rows(
    sweep: &BTreeMap<TenureBucket, Result<(Design, FitResult)>>,
    coefficient: &str,
) -> Vec<SweepRow> {
    sweep
        .iter()
        .map(|(b, r)| match r {
            Ok((d, f)) => SweepRow::from_coefficient(
                b.label().to_string(),
                d.n_pairs,
                f.n_events,
                f.coefficient(coefficient),
                f.converged,
            ),
            Err(e) => SweepRow::failed(b.label().to_string(), 0, e.to_string()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub bin: RtBin,
    pub n_pairs: usize,
    pub n_events: usize,
    /// `None` when the bin is empty.
    pub estimate: Option<CoefficientRow>,
}

/// One discrete-bin model; each bin's treatment indicator is reported.
pub fn run_bins(
    data: &PairData,
    spec: &DesignSpec,
    opts: FitOptions,
) -> Result<(Design, FitResult, Vec<BinEstimate>)> {
    let spec = DesignSpec {
        model: ModelKind::DiscreteBins,
        ..spec.clone()
    };
    let (design, result) = fit_design(data, &spec, opts)?;
    let estimates = spec
        .bins()
        .into_iter()
        .zip(design.pairs_per_bin.iter().zip(&design.events_per_bin))
        .map(|(bin, (&n, &events))| BinEstimate {
            bin,
            n_pairs: n,
            n_events: events,
            estimate: if n > 0 {
                result.coefficient(&bin.covariate_name()).cloned()
            } else {
                None
            },
        })
        .collect();
    Ok((design, result, estimates))
}

pub fn bin_rows(estimates: &[BinEstimate]) -> Vec<SweepRow> {
    estimates
        .iter()
        .map(|e| {
            SweepRow::from_coefficient(
                e.bin.label(),
                e.n_pairs,
                e.n_events,
                e.estimate.as_ref(),
                true,
            )
        })
        .map(|mut r| {
            r.converged = None;
            r
        })
        .collect()
}

/// The coefficient reported for the main and stratified models.
pub const HEADLINE: &str = IS_TREATED_ACTIVE;
