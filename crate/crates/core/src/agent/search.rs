//! Sample, evaluate, update: the outer search loop and its artifacts.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::controller::{ControllerPolicy, ControllerShape};
use super::ppo::{ppo_update, Adam, Baseline, PpoConfig, UpdateStats};
use super::reward;
use crate::error::{Error, Result};
use crate::searchspace::{format_tokens, parse_tokens, Combination, SearchSpace, N_PARAMS, PARAM_NAMES};
use crate::util::{self, checked_len, read_f64s, read_magic, read_u32, read_u64, write_f64s, write_u32, write_u64};

const SAMPLE_TAG: u64 = 0x5a3;
const CANDIDATE_TAG: u64 = 0xc4d;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub top_k: usize,
    pub seed: u64,
    pub hidden: usize,
    pub alpha: f64,
    /// Cost at which the reward equals the raw accuracy. Required before searching.
    pub target_cost: Option<f64>,
    /// Worker threads for candidate evaluation; `None` uses rayon's global pool.
    pub threads: Option<usize>,
    pub ppo: PpoConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 125,
            batch_size: 8,
            top_k: 3,
            seed: 0,
            hidden: 64,
            alpha: -0.07,
            target_cost: None,
            threads: None,
            ppo: PpoConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.top_k == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("batch_size, top_k and hidden must be positive".into()));
        }
        let target_ok = matches!(self.target_cost, Some(t) if t > 0.0 && t.is_finite());
        if !target_ok || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("target_cost must be positive and alpha finite".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("threads must be positive".into()));
        }
        self.ppo.validate()
    }
}

pub struct CandidateContext {
    pub epoch: usize,
    pub index: usize,
    pub tokens: Vec<usize>,
    pub combination: Combination,
    /// Seed for everything stochastic in this candidate's evaluation.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub acc: f64,
    pub cost: f64,
}

/// Scores one combination. Implementations must be deterministic given the context.
pub trait CandidateEvaluator: Sync {
    fn evaluate(&self, ctx: &CandidateContext) -> Result<Evaluation>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub epoch: usize,
    pub candidate: usize,
    pub tokens: Vec<usize>,
    pub combination: Combination,
    pub acc: f64,
    pub cost: f64,
    pub reward: f64,
    /// `ok`, or `failed: <reason>` for candidates scored as zero.
    pub status: String,
    pub wall_ms: u64,
}

impl SearchRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchLog {
    pub records: Vec<SearchRecord>,
}

fn header() -> Vec<&'static str> {
    let mut h = vec!["epoch", "candidate", "tokens"];
    h.extend(PARAM_NAMES);
    h.extend(["acc", "cost", "reward", "status", "wall_ms"]);
    h
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("search log row {line}: bad column {i}")))
}

impl SearchLog {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(header())?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.candidate.to_string(), format_tokens(&r.tokens)];
            row.extend(r.combination.values().iter().map(|v| v.to_string()));
            row.extend([
                r.acc.to_string(),
                r.cost.to_string(),
                r.reward.to_string(),
                r.status.clone(),
                r.wall_ms.to_string(),
            ]);
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let expected = header();
        let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if got != expected {
            return Err(Error::Format(format!("unexpected search log header {got:?}")));
        }
        let mut records = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let mut vals = [0.0; N_PARAMS];
            for (k, v) in vals.iter_mut().enumerate() {
                *v = parse_field(&rec, 3 + k, line)?;
            }
            let base = 3 + N_PARAMS;
            records.push(SearchRecord {
                epoch: parse_field(&rec, 0, line)?,
                candidate: parse_field(&rec, 1, line)?,
                tokens: parse_tokens(rec.get(2).unwrap_or(""))?,
                combination: Combination::from_values(vals),
                acc: parse_field(&rec, base, line)?,
                cost: parse_field(&rec, base + 1, line)?,
                reward: parse_field(&rec, base + 2, line)?,
                status: rec.get(base + 3).unwrap_or("").to_string(),
                wall_ms: parse_field(&rec, base + 4, line)?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        self.write_csv(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
        Self::read_csv(BufReader::new(f))
    }

    /// Trailing mean of reward over the last `window` records at each position.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let rewards: Vec<f64> = self.records.iter().map(|r| r.reward).collect();
        (0..rewards.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                rewards[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Highest-reward distinct combinations among successful records.
    /// Ties keep the earliest record.
    pub fn top_k(&self, k: usize) -> Vec<SearchRecord> {
        let mut ok: Vec<&SearchRecord> = self.records.iter().filter(|r| r.is_ok()).collect();
        ok.sort_by(|a, b| b.reward.total_cmp(&a.reward));
        let mut out: Vec<SearchRecord> = Vec::new();
        for r in ok {
            if out.len() == k {
                break;
            }
            if !out.iter().any(|o| o.tokens == r.tokens) {
                out.push(r.clone());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub n_failed: usize,
    pub update: UpdateStats,
}

/// Checkpoint metadata stored as JSON ahead of the raw parameter arrays.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: SearchConfig,
    space: SearchSpace,
    shape: ControllerShape,
    baseline: Baseline,
    adam_t: u64,
    next_epoch: usize,
}

/// Resumable search state: controller, optimizer, baseline and log so far.
pub struct Searcher {
    pub config: SearchConfig,
    pub space: SearchSpace,
    pub policy: ControllerPolicy,
    pub adam: Adam,
    pub baseline: Baseline,
    pub log: SearchLog,
    pub next_epoch: usize,
    pool: Option<rayon::ThreadPool>,
}

fn build_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    threads
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
        })
        .transpose()
}

impl Searcher {
    pub fn new(space: SearchSpace, config: SearchConfig) -> Result<Self> {
        space.validate()?;
        config.validate()?;
        let policy = ControllerPolicy::for_grids(&space.sizes(), config.hidden, util::derive_seed(config.seed, &[0]))?;
        let adam = Adam::new(policy.n_params());
        let pool = build_pool(config.threads)?;
        Ok(Self {
            config,
            space,
            policy,
            adam,
            baseline: Baseline::default(),
            log: SearchLog::default(),
            next_epoch: 0,
            pool,
        })
    }

    /// Overrides the evaluation thread count without touching search state.
    pub fn set_threads(&mut self, threads: Option<usize>) -> Result<()> {
        self.pool = build_pool(threads)?;
        self.config.threads = threads;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// One batch: sample, evaluate in parallel, update the controller.
    pub fn step(&mut self, evaluator: &dyn CandidateEvaluator) -> Result<EpochSummary> {
        let epoch = self.next_epoch;
        let cfg = &self.config;
        let target_cost = cfg.target_cost.ok_or_else(|| Error::InvalidArgument("target_cost is unset".into()))?;
        let mut rng = util::rng(util::derive_seed(cfg.seed, &[epoch as u64, SAMPLE_TAG]));
        let rolls: Vec<_> = (0..cfg.batch_size).map(|_| self.policy.sample(&mut rng)).collect();
        let contexts = rolls
            .iter()
            .enumerate()
            .map(|(index, r)| {
                Ok(CandidateContext {
                    epoch,
                    index,
                    tokens: r.tokens.clone(),
                    combination: self.space.decode(&r.tokens)?,
                    seed: util::derive_seed(cfg.seed, &[epoch as u64, index as u64, CANDIDATE_TAG]),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let run_one = |ctx: &CandidateContext| {
            let t0 = Instant::now();
            let out = evaluator
                .evaluate(ctx)
                .and_then(|ev| Ok((ev, reward(ev.acc, ev.cost, target_cost, cfg.alpha)?)));
            (out, t0.elapsed().as_millis() as u64)
        };
        let results: Vec<_> = match &self.pool {
            Some(pool) => pool.install(|| contexts.par_iter().map(run_one).collect()),
            None => contexts.par_iter().map(run_one).collect(),
        };

        let mut records = Vec::with_capacity(contexts.len());
        for (ctx, (out, wall_ms)) in contexts.into_iter().zip(results) {
            let (acc, cost, rew, status) = match out {
                Ok((ev, r)) if r.is_finite() => (ev.acc, ev.cost, r, "ok".to_string()),
                Ok((ev, r)) => (ev.acc, ev.cost, 0.0, format!("failed: non-finite reward {r}")),
                Err(e) => (0.0, 0.0, 0.0, format!("failed: {e}")),
            };
            if status != "ok" {
                log::warn!("epoch {epoch} candidate {}: {status}", ctx.index);
            }
            records.push(SearchRecord {
                epoch,
                candidate: ctx.index,
                tokens: ctx.tokens,
                combination: ctx.combination,
                acc,
                cost,
                reward: rew,
                status,
                wall_ms,
            });
        }

        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let baseline = self.baseline.update(&rewards, cfg.ppo.baseline_decay);
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let batch: Vec<Vec<usize>> = rolls.iter().map(|r| r.tokens.clone()).collect();
        let old: Vec<Vec<f64>> = rolls.iter().map(|r| r.token_log_probs()).collect();
        let update = ppo_update(&mut self.policy, &mut self.adam, &batch, &old, &advantages, &cfg.ppo)?;

        let summary = EpochSummary {
            epoch,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            baseline,
            n_failed: records.iter().filter(|r| !r.is_ok()).count(),
            update,
        };
        log::info!(
            "epoch {epoch}: mean reward {:.4}, baseline {:.4}, entropy {:.3}",
            summary.mean_reward,
            baseline,
            summary.update.mean_entropy
        );
        self.log.records.extend(records);
        self.next_epoch += 1;
        Ok(summary)
    }

    pub fn run(&mut self, evaluator: &dyn CandidateEvaluator) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.step(evaluator)?);
        }
        Ok(out)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        // Thread count is a runtime choice, not search state.
        let header = CheckpointHeader {
            config: SearchConfig {
                threads: None,
                ..self.config.clone()
            },
            space: self.space.clone(),
            shape: self.policy.shape.clone(),
            baseline: self.baseline,
            adam_t: self.adam.t,
            next_epoch: self.next_epoch,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_u64(w, json.len() as u64)?;
        w.write_all(&json)?;
        write_u64(w, self.policy.n_params() as u64)?;
        write_f64s(w, self.policy.params.iter().copied())?;
        write_f64s(w, self.adam.m.iter().copied())?;
        write_f64s(w, self.adam.v.iter().copied())?;
        Ok(())
    }

    /// Restores state from a checkpoint; the log is supplied separately and
    /// trimmed to the epochs the checkpoint covers.
    pub fn read_checkpoint(r: &mut impl Read, mut log: SearchLog) -> Result<Self> {
        read_magic(r, CHECKPOINT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = checked_len(read_u64(r)?, "checkpoint header length")?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let n = checked_len(read_u64(r)?, "controller parameter count")?;
        let params = read_f64s(r, n)?;
        let m = read_f64s(r, n)?;
        let v = read_f64s(r, n)?;
        let policy = ControllerPolicy::from_params(header.shape, params)?;
        if policy.shape.grid_sizes != header.space.sizes() {
            return Err(Error::Format("checkpoint controller does not match its search space".into()));
        }
        log.records.retain(|rec| rec.epoch < header.next_epoch);
        let pool = build_pool(header.config.threads)?;
        Ok(Self {
            config: header.config,
            space: header.space,
            policy,
            adam: Adam { m, v, t: header.adam_t },
            baseline: header.baseline,
            log,
            next_epoch: header.next_epoch,
            pool,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        let mut w = BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(p, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, log: SearchLog) -> Result<Self> {
        let p = path.as_ref();
        let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
        Self::read_checkpoint(&mut BufReader::new(f), log)
    }
}

pub struct SearchOutcome {
    pub log: SearchLog,
    pub top_k: Vec<SearchRecord>,
    pub policy: ControllerPolicy,
    pub epochs: Vec<EpochSummary>,
}

pub fn run_search(space: &SearchSpace, evaluator: &dyn CandidateEvaluator, config: &SearchConfig) -> Result<SearchOutcome> {
    let mut s = Searcher::new(space.clone(), config.clone())?;
    let epochs = s.run(evaluator)?;
    Ok(SearchOutcome {
        top_k: s.log.top_k(config.top_k),
        log: s.log,
        policy: s.policy,
        epochs,
    })
}

/// How a [`TokenTargetOracle`] turns a token sequence into accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// `hit` on an exact match with the target, `miss` otherwise.
    Exact { hit: f64, miss: f64 },
    /// Fraction of positions whose token matches the target.
    PerToken,
}

/// Synthetic evaluator rewarding closeness to a hidden target sequence.
/// Cost is always the reward's target cost, so the reward equals the accuracy.
pub struct TokenTargetOracle {
    pub target: Vec<usize>,
    pub target_cost: f64,
    pub mode: OracleMode,
}

impl TokenTargetOracle {
    pub fn exact(target: Vec<usize>, target_cost: f64) -> Self {
        Self {
            target,
            target_cost,
            mode: OracleMode::Exact { hit: 1.0, miss: 0.1 },
        }
    }

    pub fn per_token(target: Vec<usize>, target_cost: f64) -> Self {
        Self {
            target,
            target_cost,
            mode: OracleMode::PerToken,
        }
    }
}

impl CandidateEvaluator for TokenTargetOracle {
    fn evaluate(&self, ctx: &CandidateContext) -> Result<Evaluation> {
        let acc = match self.mode {
            OracleMode::Exact { hit, miss } => {
                if ctx.tokens == self.target {
                    hit
                } else {
                    miss
                }
            }
            OracleMode::PerToken => {
                let hits = ctx.tokens.iter().zip(&self.target).filter(|(a, b)| a == b).count();
                hits as f64 / self.target.len() as f64
            }
        };
        Ok(Evaluation {
            acc,
            cost: self.target_cost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::default_space;

    fn small_space() -> SearchSpace {
        SearchSpace::from_grids([
            vec![0.0, 0.3],
            vec![0.7, 1.0],
            vec![0.9, 1.0, 1.1],
            vec![0.0, 0.3],
            vec![0.0, 0.2],
            vec![32.0, 64.0],
            vec![32.0, 64.0],
            vec![1.0, 1.5],
            vec![1.0, 1.5],
        ])
        .unwrap()
    }

    struct Failing;
    impl CandidateEvaluator for Failing {
        fn evaluate(&self, ctx: &CandidateContext) -> Result<Evaluation> {
            if ctx.index % 2 == 0 {
                Err(Error::Diverged { step: 3 })
            } else {
                Ok(Evaluation { acc: 0.5, cost: 1.0 })
            }
        }
    }

    fn config(seed: u64, threads: Option<usize>) -> SearchConfig {
        SearchConfig {
            epochs: 4,
            hidden: 8,
            seed,
            threads,
            target_cost: Some(1.0),
            ..SearchConfig::default()
        }
    }

    fn strip_wall(log: &SearchLog) -> SearchLog {
        let mut l = log.clone();
        l.records.iter_mut().for_each(|r| r.wall_ms = 0);
        l
    }

    #[test]
    fn log_is_independent_of_thread_count() {
        let space = small_space();
        let oracle = TokenTargetOracle::per_token(vec![1; 9], 1.0);
        let a = run_search(&space, &oracle, &config(5, Some(1))).unwrap();
        let b = run_search(&space, &oracle, &config(5, Some(4))).unwrap();
        assert_eq!(strip_wall(&a.log), strip_wall(&b.log));
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn failed_candidates_get_zero_reward_and_search_continues() {
        let out = run_search(&small_space(), &Failing, &config(1, Some(2))).unwrap();
        assert_eq!(out.log.records.len(), 32);
        for r in &out.log.records {
            if r.candidate % 2 == 0 {
                assert_eq!(r.reward, 0.0);
                assert!(r.status.starts_with("failed"));
            } else {
                assert!(r.is_ok());
            }
        }
        assert!(out.top_k.iter().all(|r| r.is_ok()));
    }

    #[test]
    fn csv_round_trip() {
        let out = run_search(&small_space(), &Failing, &config(2, Some(1))).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let back = SearchLog::read_csv(&buf[..]).unwrap();
        assert_eq!(back, out.log);
    }

    #[test]
    fn rewards_rederive_from_logged_columns() {
        let space = small_space();
        let oracle = TokenTargetOracle::per_token(vec![0; 9], 2.0);
        let cfg = SearchConfig {
            target_cost: Some(3.0),
            ..config(7, None)
        };
        let out = run_search(&space, &oracle, &cfg).unwrap();
        for r in &out.log.records {
            assert_eq!(r.reward, reward(r.acc, r.cost, 3.0, cfg.alpha).unwrap());
            assert_eq!(space.decode(&r.tokens).unwrap(), r.combination);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let space = small_space();
        let oracle = TokenTargetOracle::per_token(vec![1, 0, 2, 1, 0, 1, 0, 1, 0], 1.0);
        let full = run_search(&space, &oracle, &config(3, None)).unwrap();

        let mut s = Searcher::new(space.clone(), config(3, None)).unwrap();
        s.step(&oracle).unwrap();
        s.step(&oracle).unwrap();
        let mut ckpt = Vec::new();
        s.write_checkpoint(&mut ckpt).unwrap();
        // A log written after an extra, unsaved epoch gets trimmed.
        s.step(&oracle).unwrap();
        let mut resumed = Searcher::read_checkpoint(&mut &ckpt[..], s.log.clone()).unwrap();
        assert_eq!(resumed.log.records.len(), 16);
        resumed.run(&oracle).unwrap();
        assert_eq!(strip_wall(&resumed.log), strip_wall(&full.log));
        assert_eq!(resumed.policy, full.policy);
    }

    #[test]
    fn zero_epochs_gives_empty_results() {
        let oracle = TokenTargetOracle::exact(vec![0; 9], 1.0);
        let cfg = SearchConfig {
            epochs: 0,
            ..config(0, None)
        };
        let out = run_search(&small_space(), &oracle, &cfg).unwrap();
        assert!(out.log.records.is_empty());
        assert!(out.top_k.is_empty());
    }

    #[test]
    fn missing_target_cost_is_rejected() {
        let cfg = SearchConfig {
            target_cost: None,
            ..config(0, None)
        };
        assert!(Searcher::new(small_space(), cfg).is_err());
    }

    #[test]
    fn exact_oracle_scores() {
        let oracle = TokenTargetOracle::exact(vec![1; 9], 1.0);
        let ctx = |tokens: Vec<usize>| CandidateContext {
            epoch: 0,
            index: 0,
            combination: small_space().decode(&tokens).unwrap(),
            tokens,
            seed: 0,
        };
        assert_eq!(oracle.evaluate(&ctx(vec![1; 9])).unwrap().acc, 1.0);
        assert_eq!(oracle.evaluate(&ctx(vec![0; 9])).unwrap().acc, 0.1);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let mut bytes = b"NOPE".to_vec();
        bytes.extend([0u8; 16]);
        assert!(Searcher::read_checkpoint(&mut &bytes[..], SearchLog::default()).is_err());
    }

    #[test]
    fn moving_average_oracle() {
        let mut log = SearchLog::default();
        for (i, r) in [1.0, 2.0, 3.0, 4.0, 5.0].into_iter().enumerate() {
            log.records.push(SearchRecord {
                epoch: 0,
                candidate: i,
                tokens: vec![0; 9],
                combination: Combination::from_values([0.0; 9]),
                acc: r,
                cost: 1.0,
                reward: r,
                status: "ok".into(),
                wall_ms: 0,
            });
        }
        assert_eq!(log.moving_average(2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(log.moving_average(10)[4], 3.0);
    }

    #[test]
    fn top_k_is_distinct_and_sorted() {
        let space = default_space();
        let oracle = TokenTargetOracle::per_token(vec![3; 9], 1.0);
        let out = run_search(&space, &oracle, &config(0, None)).unwrap();
        let top = out.log.top_k(3);
        assert_eq!(top.len(), 3);
        assert!(top.windows(2).all(|w| w[0].reward >= w[1].reward && w[0].tokens != w[1].tokens));
        let best = out.log.records.iter().map(|r| r.reward).fold(f64::MIN, f64::max);
        assert_eq!(top[0].reward, best);
    }
}
