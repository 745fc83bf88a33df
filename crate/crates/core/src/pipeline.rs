//! Data splits and the clean → train → score evaluator used by search and retraining.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{CandidateContext, CandidateEvaluator, Evaluation};
use crate::backbone::{self, BaseArch};
use crate::cleaner::{self, CleanReport};
use crate::error::{Error, Result};
use crate::searchspace::Combination;
use crate::synthdata::{self, LabeledDataset, PairSet};
use crate::traineval::{self, EvalSpec, TrainBudget};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub genuine: usize,
    pub impostor: usize,
}

/// How a generated dataset is divided between search and final testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPlan {
    /// Highest-numbered classes reserved as unseen test identities.
    pub test_classes: usize,
    /// Share of each search class scored during proxy evaluation.
    pub val_fraction: f64,
    pub val_pairs: PairCounts,
    pub test_pairs: PairCounts,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self {
            test_classes: 6,
            val_fraction: 0.25,
            val_pairs: PairCounts {
                genuine: 1000,
                impostor: 10000,
            },
            test_pairs: PairCounts {
                genuine: 5000,
                impostor: 50000,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    /// All samples of the search identities; cleaned and used for retraining.
    pub pool: LabeledDataset,
    pub search_train: LabeledDataset,
    pub search_val: LabeledDataset,
    /// Samples of held-out identities only.
    pub test: LabeledDataset,
    pub val_pairs: PairSet,
    pub test_pairs: PairSet,
}

pub fn dataset_sha256(ds: &LabeledDataset) -> String {
    hex::encode(Sha256::digest(ds.to_bytes()))
}

pub fn prepare(ds: &LabeledDataset, plan: &DataPlan, seed: u64) -> Result<PreparedData> {
    ds.validate()?;
    if plan.test_classes == 0 || plan.test_classes + 2 > ds.n_classes {
        return Err(Error::InvalidArgument(format!(
            "test_classes = {} leaves fewer than two search classes out of {}",
            plan.test_classes, ds.n_classes
        )));
    }
    let n_search = ds.n_classes - plan.test_classes;
    let search_ids: Vec<usize> = (0..n_search).collect();
    let test_ids: Vec<usize> = (n_search..ds.n_classes).collect();
    let pool = ds.restrict_to_classes(&search_ids);
    let test = ds.restrict_to_classes(&test_ids);
    let (search_train, search_val) = synthdata::split(&pool, plan.val_fraction, util::derive_seed(seed, &[1]))?;
    let val_pairs = synthdata::build_pairset(
        &search_val,
        plan.val_pairs.genuine,
        plan.val_pairs.impostor,
        util::derive_seed(seed, &[2]),
    )?;
    let test_pairs = synthdata::build_pairset(
        &test,
        plan.test_pairs.genuine,
        plan.test_pairs.impostor,
        util::derive_seed(seed, &[3]),
    )?;
    Ok(PreparedData {
        pool,
        search_train,
        search_val,
        test,
        val_pairs,
        test_pairs,
    })
}

/// Scores one combination trained on `train` and evaluated on `eval_ds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub acc: f64,
    pub tars: Vec<f64>,
    pub flops: u64,
    pub n_train_kept: usize,
    pub n_classes_kept: usize,
    pub final_loss: f64,
}

pub fn clean_and_train(
    combination: &Combination,
    train: &LabeledDataset,
    base: &BaseArch,
    budget: &TrainBudget,
) -> Result<(traineval::TrainedModel, CleanReport)> {
    let (cleaned, report) = cleaner::clean(train, &combination.clean_params())?;
    let model = traineval::train_candidate(combination, &cleaned, base, budget)?;
    Ok((model, report))
}

pub fn score_combination(
    combination: &Combination,
    train: &LabeledDataset,
    eval_ds: &LabeledDataset,
    pairs: &PairSet,
    base: &BaseArch,
    budget: &TrainBudget,
    eval: &EvalSpec,
) -> Result<Scored> {
    let flops = backbone::flops(&combination.network_config(base)?);
    let (model, report) = clean_and_train(combination, train, base, budget)?;
    let (gen, imp) = traineval::evaluate_pairs(&model, eval_ds, pairs)?;
    let tars = eval
        .far_targets
        .iter()
        .map(|&f| traineval::tar_at_far(&gen, &imp, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scored {
        acc: traineval::acc_from_scores(&gen, &imp, eval)?,
        tars,
        flops,
        n_train_kept: report.kept_indices.len(),
        n_classes_kept: report.n_classes_out,
        final_loss: model.loss_trace.last().copied().unwrap_or(f64::NAN),
    })
}

/// Proxy-trains each candidate on the search split and scores it on validation pairs.
pub struct PipelineEvaluator<'a> {
    pub data: &'a PreparedData,
    pub base: BaseArch,
    pub proxy: TrainBudget,
    pub eval: EvalSpec,
}

impl CandidateEvaluator for PipelineEvaluator<'_> {
    fn evaluate(&self, ctx: &CandidateContext) -> Result<Evaluation> {
        let s = score_combination(
            &ctx.combination,
            &self.data.search_train,
            &self.data.search_val,
            &self.data.val_pairs,
            &self.base,
            &self.proxy.with_seed(ctx.seed),
            &self.eval,
        )?;
        Ok(Evaluation {
            acc: s.acc,
            cost: s.flops as f64,
        })
    }
}
