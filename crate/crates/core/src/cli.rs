//! Run configuration, subcommands and report writers behind the `facesearch` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::search::EpochSummary;
use crate::agent::{PpoConfig, SearchConfig, SearchLog, SearchRecord, Searcher};
use crate::backbone::{self, BaseArch, Network, NetworkConfig};
use crate::cleaner::{self, CleanParams};
use crate::error::{Error, Result};
use crate::pipeline::{self, DataPlan, PipelineEvaluator, PreparedData, Scored};
use crate::searchspace::{default_space, format_tokens, Combination, SearchSpace};
use crate::synthdata::{self, DatasetSpec, LabeledDataset, Truth};
use crate::traineval::{self, EvalSpec, TrainBudget};
use crate::util;

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "FACESEARCH_THREADS";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "search_log.csv";
pub const CHECKPOINT_FILE: &str = "controller.bin";
pub const TRACE_FILE: &str = "controller_trace.csv";
pub const RESULT_FILE: &str = "search_result.json";
pub const DATASET_FILE: &str = "dataset.fsds";
pub const SPACE_FILE: &str = "space.json";
pub const RETRAIN_JSON: &str = "retrain_report.json";
pub const RETRAIN_CSV: &str = "retrain_report.csv";
pub const DIFFICULTY_FILE: &str = "difficulty.csv";

const RETRAIN_TAG: u64 = 0xf011;
const MA_WINDOW: usize = 10;

/// Everything a run needs. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Load this dataset instead of generating one from `dataset`.
    pub dataset_path: Option<PathBuf>,
    /// Load this search space instead of the built-in grids.
    pub space_path: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub data: DataPlan,
    pub base: BaseArch,
    pub proxy: TrainBudget,
    pub full: TrainBudget,
    pub eval: EvalSpec,
    pub ppo: PpoConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub alpha: f64,
    /// Defaults to the FLOPs of the unscaled base network.
    pub target_cost: Option<f64>,
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            output_dir: PathBuf::from("out"),
            dataset_path: None,
            space_path: None,
            dataset: DatasetSpec {
                n_classes: 16,
                samples_per_class: 80,
                feature_dim: 32,
                embed_dim: 8,
                intra_spread: 0.15,
                ..DatasetSpec::default()
            },
            data: DataPlan::default(),
            base: BaseArch::default(),
            proxy: TrainBudget {
                lr: 0.003,
                ..TrainBudget::proxy()
            },
            full: TrainBudget {
                lr: 0.003,
                ..TrainBudget::full()
            },
            eval: EvalSpec::default(),
            ppo: PpoConfig::default(),
            epochs: 125,
            batch_size: 8,
            top_k: 3,
            hidden: 64,
            alpha: -0.07,
            target_cost: None,
            threads: None,
            seed: 0,
        }
    }
}

fn resolve(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        resolve(dir, &mut cfg.output_dir);
        for p in [&mut cfg.dataset_path, &mut cfg.space_path].into_iter().flatten() {
            resolve(dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without resolving paths or checking that referenced files exist.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            None => return Err(Error::Format("config lacks a numeric schema_version".into())),
            Some(v) if v != RUN_SCHEMA_VERSION as u64 => {
                return Err(Error::SchemaVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: RUN_SCHEMA_VERSION,
                })
            }
            Some(_) => {}
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_path.is_none() {
            self.dataset.validate()?;
            if self.dataset.feature_dim != self.base.input_dim {
                return Err(Error::InvalidArgument(format!(
                    "dataset feature_dim {} differs from base input_dim {}",
                    self.dataset.feature_dim, self.base.input_dim
                )));
            }
        }
        for p in [&self.dataset_path, &self.space_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::InvalidArgument(format!("{} does not exist", p.display())));
            }
        }
        self.base.validate()?;
        self.proxy.validate()?;
        self.full.validate()?;
        self.eval.validate()?;
        self.search_config(1.0).validate()?;
        if self.top_k > self.epochs * self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "top_k = {} exceeds the {} candidates a search samples",
                self.top_k,
                self.epochs * self.batch_size
            )));
        }
        Ok(())
    }

    pub fn search_config(&self, target_cost: f64) -> SearchConfig {
        SearchConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            top_k: self.top_k,
            seed: self.seed,
            hidden: self.hidden,
            alpha: self.alpha,
            target_cost: Some(target_cost),
            threads: effective_threads(self.threads),
            ppo: self.ppo.clone(),
        }
    }

    pub fn target_cost(&self) -> Result<f64> {
        match self.target_cost {
            Some(t) => Ok(t),
            None => Ok(backbone::flops(&NetworkConfig::from_ratios(&self.base, 1.0, 1.0)?) as f64),
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match &self.dataset_path {
            Some(p) => LabeledDataset::load(p),
            None => synthdata::generate_dataset(&self.dataset),
        }
    }

    pub fn load_space(&self) -> Result<SearchSpace> {
        match &self.space_path {
            Some(p) => SearchSpace::load(p),
            None => Ok(default_space()),
        }
    }
}

/// Config threads, capped by the environment variable when it is set.
pub fn effective_threads(config: Option<usize>) -> Option<usize> {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    match (config, env) {
        (Some(c), Some(e)) => Some(c.min(e)),
        (c, e) => c.or(e),
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    effective_threads(None)
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
        })
        .transpose()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `(1 − τ_intra + τ_inter, s_n·(m1 − 1 + m2 + m3)/s_p)`: how hard a combination
/// makes the data and the loss.
pub fn difficulty(c: &Combination) -> (f64, f64) {
    let data = 1.0 - c.tau_intra + c.tau_inter;
    let loss = c.s_n * (c.m1 - 1.0 + c.m2 + c.m3) / c.s_p;
    (data, loss)
}

/// The reference setup: no cleaning, additive angular margin 0.5, scale 64, unscaled backbone.
pub fn baseline_combination() -> Combination {
    Combination::from_values([0.0, 1.0, 1.0, 0.5, 0.0, 64.0, 64.0, 1.0, 1.0])
}

/// Ranks from 1, ties sharing their average rank; higher values rank first.
fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of the two rank vectors.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (descending_ranks(a), descending_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub space: SearchSpace,
    pub dataset_sha256: String,
    pub target_cost: f64,
    pub n_search_train: usize,
    pub n_search_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub rank: usize,
    pub epoch: usize,
    pub candidate: usize,
    pub tokens: String,
    pub combination: Combination,
    pub acc: f64,
    pub cost: f64,
    pub reward: f64,
}

impl RankedCandidate {
    fn from_record(rank: usize, r: &SearchRecord) -> Self {
        Self {
            rank,
            epoch: r.epoch,
            candidate: r.candidate,
            tokens: format_tokens(&r.tokens),
            combination: r.combination,
            acc: r.acc,
            cost: r.cost,
            reward: r.reward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub schema_version: u32,
    pub epochs_completed: usize,
    pub n_candidates: usize,
    pub n_failed: usize,
    /// Window-10 moving average of reward after the first and last ten candidates.
    pub moving_average_start: Option<f64>,
    pub moving_average_end: Option<f64>,
    pub top_k: Vec<RankedCandidate>,
}

fn summarize(log: &SearchLog, epochs: usize, k: usize) -> SearchSummary {
    let ma = log.moving_average(MA_WINDOW);
    let have_window = ma.len() >= MA_WINDOW;
    SearchSummary {
        schema_version: RUN_SCHEMA_VERSION,
        epochs_completed: epochs,
        n_candidates: log.records.len(),
        n_failed: log.records.iter().filter(|r| !r.is_ok()).count(),
        moving_average_start: have_window.then(|| ma[MA_WINDOW - 1]),
        moving_average_end: have_window.then(|| ma[ma.len() - 1]),
        top_k: log
            .top_k(k)
            .iter()
            .enumerate()
            .map(|(i, r)| RankedCandidate::from_record(i + 1, r))
            .collect(),
    }
}

const TRACE_HEADER: &str = "epoch,mean_reward,baseline,n_failed,mean_entropy,approx_kl,clip_fraction,final_objective,aborted";

fn trace_line(s: &EpochSummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        s.epoch,
        s.mean_reward,
        s.baseline,
        s.n_failed,
        s.update.mean_entropy,
        s.update.approx_kl,
        s.update.clip_fraction,
        s.update.objective.last().copied().unwrap_or(f64::NAN),
        s.update.aborted
    )
}

/// Keeps the header and rows for epochs below `next_epoch`.
fn trimmed_trace(path: &Path, next_epoch: usize) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < next_epoch))
        .map(str::to_string)
        .collect())
}

fn write_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut text = String::with_capacity(64 * (lines.len() + 1));
    text.push_str(header);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_log(log: &SearchLog, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    log.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_checkpoint(s: &Searcher, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    s.save_checkpoint(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) a search, persisting log, checkpoint and trace after every batch.
pub fn search(cfg: &RunConfig, resume: bool) -> Result<SearchSummary> {
    let out = &cfg.output_dir;
    let ds = cfg.load_dataset()?;
    let space = cfg.load_space()?;
    space.validate()?;
    let data = pipeline::prepare(&ds, &cfg.data, cfg.seed)?;
    let target = cfg.target_cost()?;
    let hash = pipeline::dataset_sha256(&ds);
    let manifest = Manifest {
        schema_version: RUN_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        space: space.clone(),
        dataset_sha256: hash,
        target_cost: target,
        n_search_train: data.search_train.len(),
        n_search_val: data.search_val.len(),
        n_test: data.test.len(),
    };

    let mut searcher = if resume {
        let previous: Manifest = read_json(&out.join(MANIFEST_FILE))?;
        if previous.dataset_sha256 != manifest.dataset_sha256 || previous.space != manifest.space {
            return Err(Error::InvalidArgument(
                "run directory was produced from a different dataset or space".into(),
            ));
        }
        let log = SearchLog::load(out.join(LOG_FILE))?;
        let mut s = Searcher::load_checkpoint(out.join(CHECKPOINT_FILE), log)?;
        s.set_threads(effective_threads(cfg.threads))?;
        s.config.epochs = cfg.epochs;
        s
    } else {
        create_dir(out)?;
        Searcher::new(space.clone(), cfg.search_config(target))?
    };

    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    ds.save(out.join(DATASET_FILE))?;
    space.save(out.join(SPACE_FILE))?;
    let mut trace = trimmed_trace(&out.join(TRACE_FILE), searcher.next_epoch)?;
    save_log(&searcher.log, &out.join(LOG_FILE))?;
    write_lines(&out.join(TRACE_FILE), TRACE_HEADER, &trace)?;

    let evaluator = PipelineEvaluator {
        data: &data,
        base: cfg.base,
        proxy: cfg.proxy.clone(),
        eval: cfg.eval.clone(),
    };
    while !searcher.is_done() {
        let summary = searcher.step(&evaluator)?;
        trace.push(trace_line(&summary));
        save_log(&searcher.log, &out.join(LOG_FILE))?;
        save_checkpoint(&searcher, &out.join(CHECKPOINT_FILE))?;
        write_lines(&out.join(TRACE_FILE), TRACE_HEADER, &trace)?;
    }
    save_checkpoint(&searcher, &out.join(CHECKPOINT_FILE))?;
    let summary = summarize(&searcher.log, searcher.next_epoch, cfg.top_k);
    write_json(&out.join(RESULT_FILE), &summary)?;
    Ok(summary)
}

/// Loads a run directory's manifest and dataset and re-derives the data splits.
pub fn open_run(run: &Path) -> Result<(Manifest, PreparedData)> {
    let manifest: Manifest = read_json(&run.join(MANIFEST_FILE))?;
    if manifest.schema_version != RUN_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: RUN_SCHEMA_VERSION,
        });
    }
    let ds = LabeledDataset::load(run.join(DATASET_FILE))?;
    if pipeline::dataset_sha256(&ds) != manifest.dataset_sha256 {
        return Err(Error::Format("stored dataset does not match the manifest hash".into()));
    }
    let data = pipeline::prepare(&ds, &manifest.config.data, manifest.config.seed)?;
    Ok((manifest, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainRow {
    /// Position by search reward, from 1.
    pub reward_rank: usize,
    /// Position by held-out accuracy among successful rows, from 1.
    pub test_rank: Option<usize>,
    pub tokens: String,
    pub combination: Combination,
    /// Absent for the baseline, which was never scored during search.
    pub search_reward: Option<f64>,
    pub search_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub tars: Vec<f64>,
    pub flops: Option<u64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub schema_version: u32,
    pub k: usize,
    pub far_targets: Vec<f64>,
    pub rows: Vec<RetrainRow>,
    /// Reference combination trained and scored the same way.
    pub baseline: RetrainRow,
    /// Spearman correlation between the reward and test-accuracy orderings.
    pub rank_correlation: Option<f64>,
    /// Held-out accuracy of the top-reward combination minus the baseline's.
    pub top1_minus_baseline: Option<f64>,
}

fn retrain_row(
    rank: usize,
    tokens: String,
    c: Combination,
    search: Option<(f64, f64)>,
    res: Result<Scored>,
) -> RetrainRow {
    let (test_acc, tars, flops, status) = match res {
        Ok(s) => (Some(s.acc), s.tars, Some(s.flops), "ok".to_string()),
        Err(e) => (None, Vec::new(), None, format!("failed: {e}")),
    };
    RetrainRow {
        reward_rank: rank,
        test_rank: None,
        tokens,
        combination: c,
        search_reward: search.map(|s| s.0),
        search_acc: search.map(|s| s.1),
        test_acc,
        tars,
        flops,
        status,
    }
}

/// Fully trains the `k` best distinct combinations of `log` plus the baseline, all
/// with the same seed, and scores them on the held-out test pairs.
pub fn retrain_topk(
    log: &SearchLog,
    k: usize,
    data: &PreparedData,
    base: &BaseArch,
    full: &TrainBudget,
    eval: &EvalSpec,
    seed: u64,
) -> Result<RetrainReport> {
    if k == 0 || log.records.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot retrain top {k} from a log of {} records",
            log.records.len()
        )));
    }
    let budget = full.with_seed(util::derive_seed(seed, &[RETRAIN_TAG]));
    let top = log.top_k(k);
    let score = |c: &Combination| pipeline::score_combination(c, &data.pool, &data.test, &data.test_pairs, base, &budget, eval);
    let run_all = || -> Vec<Result<Scored>> {
        top.par_iter()
            .map(|r| score(&r.combination))
            .chain(rayon::iter::once(score(&baseline_combination())))
            .collect()
    };
    let mut results = match thread_pool()? {
        Some(pool) => pool.install(run_all),
        None => run_all(),
    };
    let base_res = results.pop().expect("baseline result");
    let mut rows: Vec<RetrainRow> = top
        .iter()
        .zip(results)
        .enumerate()
        .map(|(i, (r, res))| retrain_row(i + 1, format_tokens(&r.tokens), r.combination, Some((r.reward, r.acc)), res))
        .collect();
    let baseline = retrain_row(0, String::new(), baseline_combination(), None, base_res);

    let ok: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].test_acc.is_some()).collect();
    let accs: Vec<f64> = ok.iter().map(|&i| rows[i].test_acc.unwrap()).collect();
    let mut order: Vec<usize> = (0..ok.len()).collect();
    order.sort_by(|&a, &b| accs[b].total_cmp(&accs[a]));
    for (pos, &j) in order.iter().enumerate() {
        rows[ok[j]].test_rank = Some(pos + 1);
    }
    let rewards: Vec<f64> = ok.iter().filter_map(|&i| rows[i].search_reward).collect();
    let rank_correlation = spearman(&rewards, &accs);
    let top1_minus_baseline = match (rows[0].test_acc, baseline.test_acc) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    Ok(RetrainReport {
        schema_version: RUN_SCHEMA_VERSION,
        k,
        far_targets: eval.far_targets.clone(),
        rows,
        baseline,
        rank_correlation,
        top1_minus_baseline,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_retrain_csv(report: &RetrainReport, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let mut header = vec![
        "reward_rank".to_string(),
        "test_rank".into(),
        "tokens".into(),
        "combination".into(),
        "search_reward".into(),
        "search_acc".into(),
        "test_acc".into(),
    ];
    header.extend(report.far_targets.iter().map(|f| format!("tar@{f:e}")));
    header.extend(["flops".into(), "status".into()]);
    w.write_record(&header)?;
    for r in report.rows.iter().chain(std::iter::once(&report.baseline)) {
        let label = if r.reward_rank == 0 {
            "baseline".to_string()
        } else {
            r.reward_rank.to_string()
        };
        let combo: Vec<String> = r.combination.values().iter().map(|v| v.to_string()).collect();
        let mut row = vec![
            label,
            r.test_rank.map_or(String::new(), |x| x.to_string()),
            r.tokens.clone(),
            combo.join(" "),
            opt(r.search_reward),
            opt(r.search_acc),
            opt(r.test_acc),
        ];
        if r.tars.is_empty() {
            row.extend(report.far_targets.iter().map(|_| String::new()));
        } else {
            row.extend(r.tars.iter().map(|t| t.to_string()));
        }
        row.extend([r.flops.map_or(String::new(), |f| f.to_string()), r.status.clone()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn retrain(run: &Path, k: Option<usize>) -> Result<RetrainReport> {
    let (manifest, data) = open_run(run)?;
    let cfg = &manifest.config;
    let log = SearchLog::load(run.join(LOG_FILE))?;
    let report = retrain_topk(&log, k.unwrap_or(cfg.top_k), &data, &cfg.base, &cfg.full, &cfg.eval, cfg.seed)?;
    write_json(&run.join(RETRAIN_JSON), &report)?;
    write_retrain_csv(&report, &run.join(RETRAIN_CSV))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub run: String,
    pub epoch: usize,
    pub candidate: usize,
    pub tokens: String,
    pub difficulty_data: f64,
    pub difficulty_loss: f64,
    pub flops: u64,
    pub acc: f64,
    pub reward: f64,
}

/// One row per successful candidate across the given runs.
pub fn analyze(runs: &[PathBuf]) -> Result<Vec<DifficultyRow>> {
    let mut rows = Vec::new();
    for run in runs {
        let manifest: Manifest = read_json(&run.join(MANIFEST_FILE))?;
        let log = SearchLog::load(run.join(LOG_FILE))?;
        for r in log.records.iter().filter(|r| r.is_ok()) {
            let (dd, dl) = difficulty(&r.combination);
            rows.push(DifficultyRow {
                run: run.display().to_string(),
                epoch: r.epoch,
                candidate: r.candidate,
                tokens: format_tokens(&r.tokens),
                difficulty_data: dd,
                difficulty_loss: dl,
                flops: backbone::flops(&r.combination.network_config(&manifest.config.base)?),
                acc: r.acc,
                reward: r.reward,
            });
        }
    }
    Ok(rows)
}

pub fn write_difficulty_csv(rows: &[DifficultyRow], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["run", "epoch", "candidate", "tokens", "difficulty_data", "difficulty_loss", "flops", "acc", "reward"])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub schema_version: u32,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_outliers: usize,
    pub n_flips: usize,
    pub sha256: String,
}

pub fn gen_data(cfg: &RunConfig) -> Result<DatasetSummary> {
    let ds = cfg.load_dataset()?;
    create_dir(&cfg.output_dir)?;
    ds.save(cfg.output_dir.join(DATASET_FILE))?;
    let csv_path = cfg.output_dir.join("dataset.csv");
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    ds.write_csv(BufWriter::new(f))?;
    let summary = DatasetSummary {
        schema_version: RUN_SCHEMA_VERSION,
        n_samples: ds.len(),
        n_classes: ds.n_classes,
        n_outliers: ds.truth.iter().filter(|t| matches!(t, Truth::Outlier)).count(),
        n_flips: ds.truth.iter().filter(|t| matches!(t, Truth::FlipFrom(_))).count(),
        sha256: pipeline::dataset_sha256(&ds),
    };
    write_json(&cfg.output_dir.join("gen_data.json"), &summary)?;
    Ok(summary)
}

pub fn clean_dataset(cfg: &RunConfig, params: &CleanParams) -> Result<cleaner::CleanReport> {
    params.validate()?;
    let ds = cfg.load_dataset()?;
    let (cleaned, report) = cleaner::clean(&ds, params)?;
    create_dir(&cfg.output_dir)?;
    cleaned.save(cfg.output_dir.join("cleaned.fsds"))?;
    write_json(&cfg.output_dir.join("clean_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOneResult {
    pub schema_version: u32,
    pub combination: Combination,
    pub mode: traineval::TrainMode,
    pub loss_trace: Vec<f64>,
    pub n_train_kept: usize,
    pub flops: u64,
    pub test_acc: f64,
    pub tars: Vec<f64>,
    pub network_file: PathBuf,
}

pub fn train_one(cfg: &RunConfig, combination: &Combination, proxy: bool) -> Result<TrainOneResult> {
    let ds = cfg.load_dataset()?;
    let data = pipeline::prepare(&ds, &cfg.data, cfg.seed)?;
    let budget = if proxy { &cfg.proxy } else { &cfg.full };
    let budget = budget.with_seed(util::derive_seed(cfg.seed, &[RETRAIN_TAG]));
    let (model, report) = pipeline::clean_and_train(combination, &data.pool, &cfg.base, &budget)?;
    let (g, i) = traineval::evaluate_pairs(&model, &data.test, &data.test_pairs)?;
    let tars = cfg
        .eval
        .far_targets
        .iter()
        .map(|&f| traineval::tar_at_far(&g, &i, f))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    let network_file = cfg.output_dir.join("network.fsnw");
    model.network.save(&network_file)?;
    let result = TrainOneResult {
        schema_version: RUN_SCHEMA_VERSION,
        combination: *combination,
        mode: budget.mode,
        loss_trace: model.loss_trace.clone(),
        n_train_kept: report.kept_indices.len(),
        flops: backbone::flops(&model.network.config),
        test_acc: traineval::acc_from_scores(&g, &i, &cfg.eval)?,
        tars,
        network_file,
    };
    write_json(&cfg.output_dir.join("train_one.json"), &result)?;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub split: Split,
    pub far_targets: Vec<f64>,
    pub tars: Vec<f64>,
    pub acc: f64,
}

pub fn eval_network(cfg: &RunConfig, network: &Path, split: Split) -> Result<EvalResult> {
    let net = Network::load(network)?;
    let ds = cfg.load_dataset()?;
    let data = pipeline::prepare(&ds, &cfg.data, cfg.seed)?;
    let (eval_ds, pairs) = match split {
        Split::Val => (&data.search_val, &data.val_pairs),
        Split::Test => (&data.test, &data.test_pairs),
    };
    let (g, i) = traineval::evaluate_network(&net, eval_ds, pairs)?;
    let tars = cfg
        .eval
        .far_targets
        .iter()
        .map(|&f| traineval::tar_at_far(&g, &i, f))
        .collect::<Result<Vec<_>>>()?;
    let result = EvalResult {
        schema_version: RUN_SCHEMA_VERSION,
        split,
        far_targets: cfg.eval.far_targets.clone(),
        tars,
        acc: traineval::acc_from_scores(&g, &i, &cfg.eval)?,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval.json"), &result)?;
    Ok(result)
}

#[derive(Debug, Parser)]
#[command(name = "facesearch", version, about = "Joint search over data cleaning, margin loss and backbone scaling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Clean the configured dataset with fixed thresholds.
    Clean {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tau_intra: f64,
        #[arg(long)]
        tau_inter: f64,
        /// Score each sample against a centroid that excludes it.
        #[arg(long)]
        leave_one_out: bool,
    },
    /// Clean, train and score a single combination.
    TrainOne {
        #[arg(long)]
        config: PathBuf,
        /// Nine comma-separated values: tau_intra,tau_inter,m1,m2,m3,s_p,s_n,D,W.
        #[arg(long)]
        combination: String,
        /// Use the one-epoch proxy budget instead of the full one.
        #[arg(long)]
        proxy: bool,
    },
    /// Run the controller search.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fully retrain the best combinations of a finished search.
    Retrain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Emit difficulty-versus-FLOPs rows for one or more runs.
    Analyze {
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Print the two difficulty values of one combination.
        #[arg(long)]
        combination: Option<String>,
        /// Output CSV; defaults to difficulty.csv in the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved network on the validation or test pairs.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        network: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => print_json(&gen_data(&RunConfig::load(config)?)?),
        Command::Clean {
            config,
            tau_intra,
            tau_inter,
            leave_one_out,
        } => {
            let cfg = RunConfig::load(config)?;
            let params = CleanParams {
                leave_one_out,
                ..CleanParams::new(tau_intra, tau_inter)
            };
            let report = clean_dataset(&cfg, &params)?;
            print_json(&serde_json::json!({
                "kept": report.kept_indices.len(),
                "removed": report.removed_indices.len(),
                "n_classes_out": report.n_classes_out,
                "detection": report.detection,
            }))
        }
        Command::TrainOne {
            config,
            combination,
            proxy,
        } => {
            let cfg = RunConfig::load(config)?;
            print_json(&train_one(&cfg, &Combination::parse(&combination)?, proxy)?)
        }
        Command::Search { config, resume } => print_json(&search(&RunConfig::load(config)?, resume)?),
        Command::Retrain { run, k } => {
            let r = retrain(&run, k)?;
            print_json(&serde_json::json!({
                "top1_minus_baseline": r.top1_minus_baseline,
                "rank_correlation": r.rank_correlation,
                "report": run.join(RETRAIN_JSON),
            }))
        }
        Command::Analyze { runs, combination, out } => {
            if runs.is_empty() && combination.is_none() {
                return Err(Error::InvalidArgument("analyze needs --run or --combination".into()));
            }
            if let Some(c) = combination {
                let (dd, dl) = difficulty(&Combination::parse(&c)?);
                print_json(&serde_json::json!({ "difficulty_data": dd, "difficulty_loss": dl }))?;
            }
            if !runs.is_empty() {
                let rows = analyze(&runs)?;
                let path = out.unwrap_or_else(|| runs[0].join(DIFFICULTY_FILE));
                write_difficulty_csv(&rows, &path)?;
                eprintln!("wrote {} rows to {}", rows.len(), path.display());
            }
            Ok(())
        }
        Command::Eval { config, network, split } => {
            print_json(&eval_network(&RunConfig::load(config)?, &network, split)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difficulty_first_reported_combination() {
        let c = Combination::parse("0.3,0.62,1.15,0.22,0,40,48,1.22,0.84").unwrap();
        let (dd, dl) = difficulty(&c);
        assert!((dd - 1.32).abs() < 1e-12, "{dd}");
        assert!((dl - 0.444).abs() < 1e-12, "{dl}");
    }

    #[test]
    fn identity_loss_has_zero_loss_difficulty() {
        for (sp, sn) in [(16.0, 64.0), (64.0, 16.0), (32.0, 32.0)] {
            let c = Combination::from_values([0.2, 0.8, 1.0, 0.0, 0.0, sp, sn, 1.0, 1.0]);
            assert_eq!(difficulty(&c).1, 0.0);
        }
    }

    #[test]
    fn spearman_against_hand_values() {
        assert_eq!(spearman(&[3.0, 2.0, 1.0], &[30.0, 20.0, 10.0]), Some(1.0));
        assert_eq!(spearman(&[3.0, 2.0, 1.0], &[10.0, 20.0, 30.0]), Some(-1.0));
        // d = (0, 1, 1) after swapping the last two: 1 − 6·2/(3·8) = 0.5.
        let r = spearman(&[3.0, 2.0, 1.0], &[30.0, 10.0, 20.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
        assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), None);
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(descending_ranks(&[5.0, 7.0, 5.0, 1.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn config_requires_matching_schema() {
        assert!(matches!(
            RunConfig::from_json(r#"{"schema_version": 2}"#),
            Err(Error::SchemaVersion { found: 2, expected: 1 })
        ));
        assert!(RunConfig::from_json(r#"{"epochs": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "bogus": 0}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn config_validation() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let bad = RunConfig {
            top_k: 2000,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let mismatched = RunConfig {
            base: BaseArch {
                input_dim: 7,
                ..BaseArch::default()
            },
            ..RunConfig::default()
        };
        assert!(mismatched.validate().is_err());
    }

    #[test]
    fn default_target_is_base_flops() {
        let cfg = RunConfig::default();
        let b = cfg.base;
        let expected = 2 * (b.input_dim * b.base_width + b.base_width * b.base_width + b.base_width * b.embed_dim);
        assert_eq!(cfg.target_cost().unwrap(), expected as f64);
    }

    #[test]
    fn baseline_is_the_reference_setup() {
        let c = baseline_combination();
        assert_eq!(c.clean_params(), CleanParams::disabled());
        assert_eq!((c.m1, c.m2, c.m3, c.s_p, c.s_n), (1.0, 0.5, 0.0, 64.0, 64.0));
        assert_eq!((c.depth_ratio, c.width_ratio), (1.0, 1.0));
    }
}
