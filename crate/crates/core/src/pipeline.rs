//! Stage orchestration: configuration, flat-file handoff between stages, run
//! manifests and atomic artifact commits.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::covariates::{
    read_covariates, write_covariates, CovariateContext, MatchingCovariates, TenureBucket,
};
use crate::coxfit::{
    FitResult, DEFAULT_MAX_ITER, DEFAULT_TOL, PENALIZER_INTERACTION, PENALIZER_MAIN,
};
use crate::design::{
    bin_rows, fit_design, parse_bins, run_bins, run_tenure_sweep, sweep_rows, sweep_table, Design,
    DesignSpec, FitOptions, PairData, RtBin, DEFAULT_BINS, HEADLINE,
};
use crate::error::{Error, Result};
use crate::events::{
    filter_questions, parse_events, parse_timestamp, write_events, Corpus, PostId, Timestamp, HOUR,
};
use crate::matching::{
    balance, fit_propensity, match_pairs, read_pairs, write_pairs, BalanceReport, MatchOutcome,
    PropensityModel, ScoredWindow,
};
use crate::report::{adoption_curves, help_rate_curves, help_rate_curves_by, write_curves};
use crate::simulate::{generate_events, planted_truth, SimConfig};
use crate::windows::{
    build_window, read_windows, write_windows, ObservationWindow, RT_INTERACTION_ACTIVE,
};

pub const STAGES: [&str; 8] = [
    "simulate", "ingest", "windows", "match", "fit", "sweep", "bins", "report",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Input event log; defaults to the simulated `events.csv` in `out_dir`.
    pub events: Option<PathBuf>,
    pub corpus_start: Option<Timestamp>,
    pub corpus_end: Option<Timestamp>,
    pub half_length_hours: f64,
    pub caliper: f64,
    pub penalizer_main: f64,
    pub penalizer_interaction: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub bins: Vec<RtBin>,
    pub seed: u64,
    /// Row budget above which the pooled fits subsample whole pairs.
    pub subsample_budget: usize,
    pub bin_hours: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Raw `sim.*` keys, prefix stripped.
    pub sim: BTreeMap<String, String>,
    /// Keys set away from their defaults, echoed into manifests.
    pub overrides: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("out"),
            events: None,
            corpus_start: None,
            corpus_end: None,
            half_length_hours: 48.0,
            caliper: 0.05,
            penalizer_main: PENALIZER_MAIN,
            penalizer_interaction: PENALIZER_INTERACTION,
            clip_low: 5.0,
            clip_high: 95.0,
            bins: DEFAULT_BINS.to_vec(),
            seed: 0,
            subsample_budget: 8_000_000,
            bin_hours: 1.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            sim: BTreeMap::new(),
            overrides: Vec::new(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::InvalidInput(format!("config key `{key}`: {e}")))
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "events" => self.events = Some(PathBuf::from(value)),
            "corpus_start" => {
                self.corpus_start = Some(
                    parse_timestamp(value)
                        .map_err(|e| Error::InvalidInput(format!("corpus_start: {e}")))?,
                )
            }
            "corpus_end" => {
                self.corpus_end = Some(
                    parse_timestamp(value)
                        .map_err(|e| Error::InvalidInput(format!("corpus_end: {e}")))?,
                )
            }
            "half_length_hours" => self.half_length_hours = parse_value(key, value)?,
            "caliper" => self.caliper = parse_value(key, value)?,
            "penalizer_main" => self.penalizer_main = parse_value(key, value)?,
            "penalizer_interaction" => self.penalizer_interaction = parse_value(key, value)?,
            "clip_low" => self.clip_low = parse_value(key, value)?,
            "clip_high" => self.clip_high = parse_value(key, value)?,
            "bins" => self.bins = parse_bins(value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "subsample_budget" => self.subsample_budget = parse_value(key, value)?,
            "bin_hours" => self.bin_hours = parse_value(key, value)?,
            "tol" => self.tol = parse_value(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            k if k.starts_with("sim.") => {
                self.sim
                    .insert(k["sim.".len()..].to_string(), value.to_string());
            }
            _ => return Err(Error::InvalidInput(format!("unknown config key `{key}`"))),
        }
        if !self.overrides.iter().any(|k| k == key) {
            self.overrides.push(key.to_string());
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingInput(path.display().to_string()))?;
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("config line {}: expected `key = value`", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.half_length_hours * HOUR as f64;
        if !(self.half_length_hours > 0.0) || (h - h.round()).abs() > 1e-9 {
            return Err(Error::InvalidInput(
                "half_length_hours must be a positive whole number of seconds".into(),
            ));
        }
        if !(self.caliper > 0.0) {
            return Err(Error::InvalidInput("caliper must be positive".into()));
        }
        if !(self.penalizer_main >= 0.0 && self.penalizer_interaction >= 0.0) {
            return Err(Error::InvalidInput(
                "penalizers must be non-negative".into(),
            ));
        }
        if !(0.0 <= self.clip_low && self.clip_low < self.clip_high && self.clip_high <= 100.0) {
            return Err(Error::InvalidInput(
                "clip percentiles must satisfy 0 <= low < high <= 100".into(),
            ));
        }
        crate::design::validate_bins(&self.bins)?;
        if self.corpus_start.is_some() != self.corpus_end.is_some() {
            return Err(Error::InvalidInput(
                "corpus_start and corpus_end must be set together".into(),
            ));
        }
        Ok(())
    }

    pub fn half_length(&self) -> i64 {
        (self.half_length_hours * HOUR as f64).round() as i64
    }

    pub fn bounds(&self) -> Option<(Timestamp, Timestamp)> {
        self.corpus_start.zip(self.corpus_end)
    }

    /// Canonical settings, excluding the output directory.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let bins: Vec<String> = self.bins.iter().map(|b| b.to_string()).collect();
        let mut out = vec![
            (
                "events".to_string(),
                self.events
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
            ),
            (
                "corpus_start".into(),
                self.corpus_start.map_or(String::new(), |t| t.to_string()),
            ),
            (
                "corpus_end".into(),
                self.corpus_end.map_or(String::new(), |t| t.to_string()),
            ),
            (
                "half_length_hours".into(),
                self.half_length_hours.to_string(),
            ),
            ("caliper".into(), self.caliper.to_string()),
            ("penalizer_main".into(), self.penalizer_main.to_string()),
            (
                "penalizer_interaction".into(),
                self.penalizer_interaction.to_string(),
            ),
            ("clip_low".into(), self.clip_low.to_string()),
            ("clip_high".into(), self.clip_high.to_string()),
            ("bins".into(), bins.join(",")),
            (
                "tenure_buckets".into(),
                TenureBucket::ALL
                    .iter()
                    .map(|b| b.label())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("seed".into(), self.seed.to_string()),
            ("subsample_budget".into(), self.subsample_budget.to_string()),
            ("bin_hours".into(), self.bin_hours.to_string()),
            ("tol".into(), self.tol.to_string()),
            ("max_iter".into(), self.max_iter.to_string()),
        ];
        out.extend(
            self.sim
                .iter()
                .map(|(k, v)| (format!("sim.{k}"), v.clone())),
        );
        out
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex(&h.finalize())
    }

    /// Per-stage seed: the first eight bytes of `sha256(seed || stage)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut c = SimConfig::from_pairs(self.sim.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        if !self.sim.contains_key("seed") {
            c.seed = self.stage_seed("simulate");
        }
        if !self.sim.contains_key("half_length_hours") {
            c.half_length_hours = self.half_length_hours;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    fn spec(&self, base: DesignSpec, penalizer: f64, stage: &str) -> DesignSpec {
        DesignSpec {
            clip_percentiles: (self.clip_low, self.clip_high),
            bins: Some(self.bins.clone()),
            penalizer,
            seed: self.stage_seed(stage),
            ..base
        }
    }

    pub fn main_spec(&self) -> DesignSpec {
        DesignSpec {
            row_budget: Some(self.subsample_budget),
            ..self.spec(DesignSpec::main(), self.penalizer_main, "fit")
        }
    }

    pub fn response_time_spec(&self) -> DesignSpec {
        DesignSpec {
            row_budget: Some(self.subsample_budget),
            ..self.spec(
                DesignSpec::response_time(),
                self.penalizer_interaction,
                "fit",
            )
        }
    }

    pub fn sweep_specs(&self) -> (DesignSpec, DesignSpec) {
        (
            self.spec(DesignSpec::main(), self.penalizer_main, "sweep"),
            self.spec(
                DesignSpec::response_time(),
                self.penalizer_interaction,
                "sweep",
            ),
        )
    }

    pub fn bins_spec(&self) -> DesignSpec {
        self.spec(
            DesignSpec::discrete_bins(),
            self.penalizer_interaction,
            "bins",
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

// ---------------------------------------------------------------------------
// In-memory building blocks

/// Windows of every eligible question, ordered by question id.
pub fn build_windows(corpus: &Corpus, half_length: i64) -> Result<Vec<ObservationWindow>> {
    filter_questions(corpus, half_length)
        .par_iter()
        .map(|&q| build_window(corpus, q, half_length))
        .collect()
}

pub fn compute_all_covariates(
    corpus: &Corpus,
    windows: &[ObservationWindow],
) -> Result<Vec<MatchingCovariates>> {
    let ctx = CovariateContext::new(corpus);
    windows.par_iter().map(|w| ctx.compute(w)).collect()
}

#[derive(Debug, Clone)]
pub struct MatchingStage {
    pub model: PropensityModel,
    pub outcome: MatchOutcome,
    pub balance: BalanceReport,
}

pub fn run_matching(
    windows: &[ObservationWindow],
    covariates: &[MatchingCovariates],
    caliper: f64,
    seed: u64,
) -> Result<MatchingStage> {
    let data: Vec<(MatchingCovariates, bool)> = covariates
        .iter()
        .zip(windows)
        .map(|(c, w)| (c.clone(), w.treated))
        .collect();
    let model = fit_propensity(&data)?;
    let scored: Vec<ScoredWindow> = windows
        .par_iter()
        .zip(covariates)
        .map(|(w, c)| ScoredWindow {
            window_id: w.question_id,
            calendar_year: c.calendar_year,
            top_level_tag: c.top_level_tag.clone(),
            score: model.score(c),
            treated: w.treated,
            response_time_hours: w.t_answer.map(|a| (a - w.t_question) as f64 / HOUR as f64),
        })
        .collect();
    let outcome = match_pairs(&scored, caliper, seed)?;
    let rows: Vec<(PostId, MatchingCovariates, bool)> = windows
        .iter()
        .zip(covariates)
        .map(|(w, c)| (w.question_id, c.clone(), w.treated))
        .collect();
    let balance = balance(&outcome.pairs, &rows)?;
    Ok(MatchingStage {
        model,
        outcome,
        balance,
    })
}

pub fn pair_data(
    windows: &[ObservationWindow],
    covariates: &[MatchingCovariates],
    pairs: Vec<crate::matching::MatchedPair>,
) -> PairData {
    let tenure: HashMap<PostId, TenureBucket> = windows
        .iter()
        .zip(covariates)
        .map(|(w, c)| (w.question_id, c.tenure_bucket()))
        .collect();
    PairData::new(pairs, windows.iter().cloned(), tenure)
}

/// Windows through matching, all in memory.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub windows: Vec<ObservationWindow>,
    pub covariates: Vec<MatchingCovariates>,
    pub matching: MatchingStage,
    pub pairs: PairData,
}

pub fn analyze(corpus: &Corpus, cfg: &PipelineConfig) -> Result<Analysis> {
    let windows = build_windows(corpus, cfg.half_length())?;
    let covariates = compute_all_covariates(corpus, &windows)?;
    let matching = run_matching(&windows, &covariates, cfg.caliper, cfg.stage_seed("match"))?;
    let pairs = pair_data(&windows, &covariates, matching.outcome.pairs.clone());
    Ok(Analysis {
        windows,
        covariates,
        matching,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Stage runner with manifests

/// Artifacts of one stage, written to temporary names and renamed only when
/// the whole stage succeeds.
struct StageOutput {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl StageOutput {
    fn new(dir: &Path) -> Self {
        StageOutput {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
            committed: false,
        }
    }

    fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let final_path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.partial"));
        self.staged.push((tmp.clone(), final_path));
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn commit(mut self) -> Result<Vec<(String, String)>> {
        let mut hashes = Vec::new();
        for (tmp, final_path) in &self.staged {
            fs::rename(tmp, final_path)?;
            let name = final_path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned();
            hashes.push((name, sha256_file(final_path)?));
        }
        self.committed = true;
        Ok(hashes)
    }
}

impl Drop for StageOutput {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.staged {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}

fn input(cfg: &PipelineConfig, name: &str) -> Result<PathBuf> {
    let p = cfg.out_dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingInput(p.display().to_string()))
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|_| Error::MissingInput(path.display().to_string()))
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    parse_events(open(&input(cfg, "corpus.csv")?)?, cfg.bounds())
}

fn load_windows(cfg: &PipelineConfig) -> Result<(Vec<ObservationWindow>, Vec<MatchingCovariates>)> {
    let windows = read_windows(open(&input(cfg, "windows.csv")?)?)?;
    let covs = read_covariates(open(&input(cfg, "covariates.csv")?)?)?;
    if covs.len() != windows.len() || covs.iter().zip(&windows).any(|(c, w)| c.0 != w.question_id) {
        return Err(Error::InvalidInput(
            "windows.csv and covariates.csv disagree".into(),
        ));
    }
    Ok((windows, covs.into_iter().map(|c| c.1).collect()))
}

fn load_pairs(cfg: &PipelineConfig) -> Result<PairData> {
    let pairs_path = input(cfg, "pairs.csv")?;
    let (windows, covs) = load_windows(cfg)?;
    let pairs = read_pairs(open(&pairs_path)?)?;
    Ok(pair_data(&windows, &covs, pairs))
}

fn write_manifest(
    cfg: &PipelineConfig,
    stage: &str,
    counts: Value,
    artifacts: Vec<(String, String)>,
) -> Result<()> {
    let manifest = json!({
        "stage": stage,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "stage_seed": cfg.stage_seed(stage),
        "overrides": cfg.overrides,
        "config": cfg.to_pairs().into_iter().collect::<BTreeMap<_, _>>(),
        "counts": counts,
        "artifacts": artifacts.into_iter().collect::<BTreeMap<_, _>>(),
    });
    let mut out = StageOutput::new(&cfg.out_dir);
    out.write_json(&format!("manifest_{stage}.json"), &manifest)?;
    out.commit()?;
    Ok(())
}

fn record_timing(cfg: &PipelineConfig, stage: &str, secs: f64) {
    let path = cfg.out_dir.join("timings.json");
    let mut map: BTreeMap<String, f64> = fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    map.insert(stage.to_string(), secs);
    if let Ok(s) = serde_json::to_string_pretty(&map) {
        let _ = fs::write(path, s + "\n");
    }
}

/// Runs one stage, or every stage in order for `"all"`.
pub fn run(stage: &str, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    if stage == "all" {
        for s in STAGES {
            if s == "simulate" && cfg.events.is_some() {
                continue;
            }
            run(s, cfg)?;
        }
        return Ok(());
    }
    let started = Instant::now();
    let mut out = StageOutput::new(&cfg.out_dir);
    let counts = match stage {
        "simulate" => stage_simulate(cfg, &mut out)?,
        "ingest" => stage_ingest(cfg, &mut out)?,
        "windows" => stage_windows(cfg, &mut out)?,
        "match" => stage_match(cfg, &mut out)?,
        "fit" => stage_fit(cfg, &mut out)?,
        "sweep" => stage_sweep(cfg, &mut out)?,
        "bins" => stage_bins(cfg, &mut out)?,
        "report" => stage_report(cfg, &mut out)?,
        other => return Err(Error::InvalidInput(format!("unknown stage `{other}`"))),
    };
    let artifacts = out.commit()?;
    write_manifest(cfg, stage, counts, artifacts)?;
    let secs = started.elapsed().as_secs_f64();
    log::info!("stage {stage} finished in {secs:.2}s");
    record_timing(cfg, stage, secs);
    Ok(())
}

fn stage_simulate(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let sim = cfg.sim_config()?;
    let events = generate_events(&sim)?;
    out.write("events.csv", |w| {
        crate::events::write_event_rows(&events, w)
    })?;
    out.write_json("truth.json", &planted_truth(&sim))?;
    let text: String = sim
        .to_pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    out.write_text("sim_config.txt", &text)?;
    let questions = events.iter().filter(|e| e.is_question()).count();
    Ok(
        json!({"events": events.len(), "questions": questions, "users": sim.n_users, "sim_seed": sim.seed}),
    )
}

fn stage_ingest(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let path = match &cfg.events {
        Some(p) if p.is_file() => p.clone(),
        Some(p) => return Err(Error::MissingInput(p.display().to_string())),
        None => input(cfg, "events.csv")?,
    };
    let corpus = parse_events(open(&path)?, cfg.bounds())?;
    let eligible = filter_questions(&corpus, cfg.half_length());
    out.write("corpus.csv", |w| write_events(&corpus, w))?;
    out.write("eligible.csv", |w| {
        writeln!(w, "question_id")?;
        for q in &eligible {
            writeln!(w, "{q}")?;
        }
        Ok(())
    })?;
    Ok(json!({
        "events": corpus.len(),
        "questions": corpus.question_ids().len(),
        "eligible_questions": eligible.len(),
        "orphaned_answers": corpus.orphan_count(),
        "corpus_start": corpus.start(),
        "corpus_end": corpus.end(),
    }))
}

fn stage_windows(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let corpus = load_corpus(cfg)?;
    let windows = build_windows(&corpus, cfg.half_length())?;
    let covs = compute_all_covariates(&corpus, &windows)?;
    out.write("windows.csv", |w| write_windows(&windows, w))?;
    let rows: Vec<(PostId, MatchingCovariates, bool)> = windows
        .iter()
        .zip(&covs)
        .map(|(w, c)| (w.question_id, c.clone(), w.treated))
        .collect();
    out.write("covariates.csv", |w| write_covariates(&rows, w))?;
    let treated = windows.iter().filter(|w| w.treated).count();
    let help: usize = windows.iter().map(|w| w.help_times.len()).sum();
    Ok(
        json!({"windows": windows.len(), "treated": treated, "control": windows.len() - treated, "help_events": help}),
    )
}

fn stage_match(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let (windows, covs) = load_windows(cfg)?;
    let m = run_matching(&windows, &covs, cfg.caliper, cfg.stage_seed("match"))?;
    out.write_json("propensity.json", &m.model)?;
    out.write("pairs.csv", |w| write_pairs(&m.outcome.pairs, w))?;
    out.write_json("balance.json", &m.balance)?;
    out.write_text("balance.txt", &m.balance.to_text())?;
    let n = m.outcome.pairs.len();
    let distinct_controls = m
        .outcome
        .pairs
        .iter()
        .map(|p| p.control_window_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let treated: HashMap<PostId, bool> =
        windows.iter().map(|w| (w.question_id, w.treated)).collect();
    let matched_treated: usize = m
        .outcome
        .pairs
        .iter()
        .map(|p| treated[&p.treated_window_id] as usize + treated[&p.control_window_id] as usize)
        .sum();
    Ok(json!({
        "pairs": n,
        "matched_treatment_rate": if n > 0 { matched_treated as f64 / (2 * n) as f64 } else { 0.0 },
        "matched_windows": 2 * n,
        "distinct_controls": distinct_controls,
        "unmatched_treated": m.outcome.unmatched_treated,
        "empty_control_strata": m.outcome.empty_control_strata,
        "worst_smd_unmatched": m.balance.worst_unmatched_smd,
        "worst_smd_matched": m.balance.worst_matched_smd,
    }))
}

fn fit_json(model: &str, design: &Design, result: &FitResult) -> Value {
    json!({
        "model": model,
        "n_pairs": design.n_pairs,
        "scalers": design.scalers,
        "result": result,
    })
}

fn stage_fit(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let data = load_pairs(cfg)?;
    let opts = cfg.fit_options();
    let (d_main, f_main) = fit_design(&data, &cfg.main_spec(), opts)?;
    let (d_rt, f_rt) = fit_design(&data, &cfg.response_time_spec(), opts)?;
    out.write_json("fit_main.json", &fit_json("main", &d_main, &f_main))?;
    out.write_text(
        "fit_main.txt",
        &format!(
            "main model ({} pairs)\n{}",
            d_main.n_pairs,
            f_main.to_text()
        ),
    )?;
    out.write_json("fit_rt.json", &fit_json("response_time", &d_rt, &f_rt))?;
    out.write_text(
        "fit_rt.txt",
        &format!(
            "response-time model ({} pairs)\n{}",
            d_rt.n_pairs,
            f_rt.to_text()
        ),
    )?;
    Ok(json!({
        "pairs": data.pairs.len(),
        "main": {"pairs": d_main.n_pairs, "rows": f_main.n_rows, "events": f_main.n_events, "converged": f_main.converged},
        "response_time": {"pairs": d_rt.n_pairs, "rows": f_rt.n_rows, "events": f_rt.n_events, "converged": f_rt.converged},
    }))
}

fn stage_sweep(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let data = load_pairs(cfg)?;
    let (main_spec, rt_spec) = cfg.sweep_specs();
    let main = sweep_rows(
        &run_tenure_sweep(&data, &main_spec, cfg.fit_options())?,
        HEADLINE,
    );
    let rt = sweep_rows(
        &run_tenure_sweep(&data, &rt_spec, cfg.fit_options())?,
        RT_INTERACTION_ACTIVE,
    );
    out.write_json("sweep.json", &json!({"main": main, "response_time": rt}))?;
    let text = format!(
        "{}\n{}",
        sweep_table("post-answer effect by tenure", &main),
        sweep_table("response-time interaction by tenure", &rt)
    );
    out.write_text("sweep.txt", &text)?;
    Ok(json!({"strata": main.len(), "failed": main.iter().filter(|r| r.error.is_some()).count()}))
}

fn stage_bins(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let data = load_pairs(cfg)?;
    let (design, result, estimates) = run_bins(&data, &cfg.bins_spec(), cfg.fit_options())?;
    let rows = bin_rows(&estimates);
    out.write_json(
        "bins.json",
        &json!({"bins": rows, "excluded_out_of_bins": design.excluded_out_of_bins, "result": result}),
    )?;
    out.write_text(
        "bins.txt",
        &sweep_table("post-answer effect by response time", &rows),
    )?;
    Ok(
        json!({"pairs": design.n_pairs, "excluded_out_of_bins": design.excluded_out_of_bins, "events": result.n_events}),
    )
}

fn stage_report(cfg: &PipelineConfig, out: &mut StageOutput) -> Result<Value> {
    let data = load_pairs(cfg)?;
    let mut treated_ids: Vec<PostId> = data.pairs.iter().map(|p| p.treated_window_id).collect();
    let mut control_ids: Vec<PostId> = data.pairs.iter().map(|p| p.control_window_id).collect();
    treated_ids.sort_unstable();
    treated_ids.dedup();
    control_ids.sort_unstable();
    control_ids.dedup();
    let treated: Vec<ObservationWindow> = treated_ids
        .iter()
        .map(|id| data.windows[id].clone())
        .collect();
    let control: Vec<ObservationWindow> = control_ids
        .iter()
        .map(|id| data.windows[id].clone())
        .collect();
    let matched: Vec<ObservationWindow> = treated.iter().chain(&control).cloned().collect();

    let curves = help_rate_curves(&matched, cfg.bin_hours)?;
    let (all_windows, covs) = load_windows(cfg)?;
    let tenure: HashMap<PostId, TenureBucket> = all_windows
        .iter()
        .zip(&covs)
        .map(|(w, c)| (w.question_id, c.tenure_bucket()))
        .collect();
    let by_tenure = help_rate_curves_by(&matched, cfg.bin_hours, |w| {
        let group = if w.treated { "treated" } else { "control" };
        let b = tenure[&w.question_id];
        format!("{group}:{}:{}", b.index(), b.label())
    })?;
    let adoption = adoption_curves(&treated, &control, cfg.bin_hours)?;
    out.write("curves.csv", |w| write_curves(&curves, w))?;
    out.write("tenure_curves.csv", |w| write_curves(&by_tenure, w))?;
    out.write("adoption.csv", |w| write_curves(&adoption, w))?;

    let mut summary = String::new();
    for name in [
        "balance.txt",
        "fit_main.txt",
        "fit_rt.txt",
        "sweep.txt",
        "bins.txt",
    ] {
        if let Ok(text) = fs::read_to_string(cfg.out_dir.join(name)) {
            summary.push_str(&format!("== {name}\n{text}\n"));
        }
    }
    out.write_text("summary.txt", &summary)?;
    Ok(
        json!({"treated_windows": treated.len(), "control_windows": control.len(), "series": curves.len() + by_tenure.len() + adoption.len()}),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_and_overrides() {
        let mut c = PipelineConfig::default();
        c.apply_text("caliper = 0.1 # wider\n\nsim.n_users = 50\nbins = 0-30,30-60\n")
            .unwrap();
        assert_eq!(c.caliper, 0.1);
        assert_eq!(c.sim["n_users"], "50");
        assert_eq!(c.bins.len(), 2);
        assert_eq!(c.overrides, vec!["caliper", "sim.n_users", "bins"]);
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.half_length_hours, 48.0);
        assert_eq!(c.caliper, 0.05);
        assert_eq!(c.penalizer_main, 5e-3);
        assert_eq!(c.penalizer_interaction, 1e-2);
        assert_eq!((c.clip_low, c.clip_high), (5.0, 95.0));
        assert_eq!(c.bins, DEFAULT_BINS.to_vec());
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let c = PipelineConfig::default();
        assert_ne!(c.stage_seed("match"), c.stage_seed("fit"));
        assert_eq!(
            c.stage_seed("match"),
            PipelineConfig::default().stage_seed("match")
        );
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            out_dir: PathBuf::from("elsewhere"),
            ..PipelineConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig {
            caliper: 0.1,
            ..PipelineConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
