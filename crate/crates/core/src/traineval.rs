//! Candidate training with momentum SGD and verification scoring by weighted
//! TAR@FAR.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, he_uniform, BaseArch, Network};
use crate::error::{Error, Result};
use crate::marginloss;
use crate::searchspace::Combination;
use crate::synthdata::{LabeledDataset, PairSet};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Proxy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fractions of total training at which the learning rate decays.
    #[serde(default)]
    pub lr_milestones: Vec<f64>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.1
}

impl TrainBudget {
    /// One pass over the data, constant learning rate.
    pub fn proxy() -> Self {
        Self {
            mode: TrainMode::Proxy,
            epochs: 1,
            batch_size: 32,
            lr: 0.1,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            mode: TrainMode::Full,
            epochs: 20,
            lr_milestones: vec![0.4, 0.6, 0.8],
            ..Self::proxy()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} is invalid", self.lr)));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidArgument("lr milestones must be fractions in [0, 1]".into()));
        }
        Ok(())
    }

    fn lr_at(&self, progress: f64) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub far_targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            far_targets: vec![1e-2, 1e-3],
            weights: vec![0.5, 0.5],
        }
    }
}

impl EvalSpec {
    /// TAR at 1e-3, 1e-4 and 1e-5 weighted 0.5, 0.25 and 0.25.
    pub fn benchmark() -> Self {
        Self {
            far_targets: vec![1e-3, 1e-4, 1e-5],
            weights: vec![0.5, 0.25, 0.25],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.far_targets.is_empty() || self.far_targets.len() != self.weights.len() {
            return bad("far_targets and weights must be non-empty and equally long");
        }
        if self.far_targets.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("far targets must lie in (0, 1)");
        }
        if self.far_targets.windows(2).any(|w| w[0] <= w[1]) {
            return bad("far targets must be strictly decreasing");
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) {
            return bad("weights must be positive");
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("weights must sum to 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    /// K × embed_dim class weights of the loss.
    pub class_weights: Array2<f64>,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainedModel {
    pub fn is_finite(&self) -> bool {
        self.network.is_finite() && self.class_weights.iter().all(|v| v.is_finite())
    }
}

struct Momentum {
    weights: Vec<Array2<f64>>,
    biases: Vec<ndarray::Array1<f64>>,
    class_weights: Array2<f64>,
}

fn sgd_step<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|p, &g, v| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
}

/// Trains a freshly instantiated network and class weights on `train_ds`.
///
/// The dataset must already be cleaned with the combination's thresholds.
pub fn train_candidate(
    combination: &Combination,
    train_ds: &LabeledDataset,
    base: &BaseArch,
    budget: &TrainBudget,
) -> Result<TrainedModel> {
    budget.validate()?;
    if train_ds.n_classes < 2 {
        return Err(Error::DegenerateDataset("training needs at least two classes".into()));
    }
    if train_ds.feature_dim() != base.input_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, backbone expects {}",
            train_ds.feature_dim(),
            base.input_dim
        )));
    }
    let loss_params = combination.loss_params();
    let mut network = backbone::instantiate(
        base,
        combination.depth_ratio,
        combination.width_ratio,
        util::derive_seed(budget.seed, &[0]),
    )?;
    let mut init_rng = util::rng(util::derive_seed(budget.seed, &[1]));
    let mut class_weights = he_uniform(&mut init_rng, base.embed_dim, train_ds.n_classes).reversed_axes();
    let mut velocity = Momentum {
        weights: network.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        biases: network.biases.iter().map(|b| ndarray::Array1::zeros(b.len())).collect(),
        class_weights: Array2::zeros(class_weights.dim()),
    };
    let mut shuffle_rng = util::rng(util::derive_seed(budget.seed, &[2]));

    let n = train_ds.len();
    let steps_per_epoch = n.div_ceil(budget.batch_size);
    let total_steps = (steps_per_epoch * budget.epochs) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(budget.epochs);
    let mut step = 0usize;
    for _ in 0..budget.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(budget.batch_size) {
            let x = train_ds.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let (emb, cache) = backbone::forward(&network, &x)?;
            let lg = marginloss::loss_backward(&emb, &y, &class_weights, &loss_params)
                .map_err(|e| match e {
                    Error::DegenerateEmbedding { .. } => Error::Diverged { step },
                    e => e,
                })?;
            if !lg.loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = backbone::backward(&network, &cache, &lg.grad_x)?;
            let lr = budget.lr_at(step as f64 / total_steps);
            let (mu, wd) = (budget.momentum, budget.weight_decay);
            for l in 0..network.n_layers() {
                sgd_step(&mut network.weights[l], &grads.weights[l], &mut velocity.weights[l], lr, mu, wd);
                sgd_step(&mut network.biases[l], &grads.biases[l], &mut velocity.biases[l], lr, mu, wd);
            }
            sgd_step(&mut class_weights, &lg.grad_w, &mut velocity.class_weights, lr, mu, wd);
            epoch_loss += lg.loss * chunk.len() as f64;
            step += 1;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { step });
        }
        loss_trace.push(mean);
    }
    let model = TrainedModel {
        network,
        class_weights,
        loss_trace,
    };
    if !model.is_finite() {
        return Err(Error::Diverged { step });
    }
    Ok(model)
}

/// Cosine similarity of each pair's embeddings, split by pair type.
pub fn pair_scores(embeddings: &Array2<f64>, pairs: &PairSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = embeddings.nrows();
    let norms: Vec<f64> = embeddings.rows().into_iter().map(|r| util::norm(r)).collect();
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for p in &pairs.pairs {
        if p.a >= n || p.b >= n {
            return Err(Error::InvalidArgument(format!("pair ({}, {}) out of range for {n} samples", p.a, p.b)));
        }
        for i in [p.a, p.b] {
            if !(norms[i] > 0.0) || !norms[i].is_finite() {
                return Err(Error::DegenerateEmbedding { row: i });
            }
        }
        let s = embeddings.row(p.a).dot(&embeddings.row(p.b)) / (norms[p.a] * norms[p.b]);
        if p.is_genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    Ok((genuine, impostor))
}

pub fn evaluate_pairs(model: &TrainedModel, ds: &LabeledDataset, pairs: &PairSet) -> Result<(Vec<f64>, Vec<f64>)> {
    evaluate_network(&model.network, ds, pairs)
}

pub fn evaluate_network(net: &Network, ds: &LabeledDataset, pairs: &PairSet) -> Result<(Vec<f64>, Vec<f64>)> {
    pair_scores(&net.embed(&ds.features)?, pairs)
}

/// True-accept rate at the threshold chosen for a target false-accept rate.
///
/// The threshold is the smallest impostor score `t` with
/// `#{impostor >= t} / #impostor <= far_target`, and TAR counts genuine scores
/// `>= t`. When no impostor score qualifies the threshold sits strictly above
/// the largest impostor score.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InvalidArgument("tar_at_far needs non-empty score lists".into()));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let m = impostor.len() as f64;
    if far_target * m < 1.0 {
        log::warn!(
            "far target {far_target} is below the resolution of {} impostor scores",
            impostor.len()
        );
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(|a, b| b.total_cmp(a));
    // Walk distinct values from the top; `count` = #{impostor >= value}.
    let mut threshold = None;
    let mut i = 0;
    while i < imp.len() {
        let v = imp[i];
        let mut j = i;
        while j < imp.len() && imp[j] == v {
            j += 1;
        }
        if j as f64 / m <= far_target {
            threshold = Some(v);
            i = j;
        } else {
            break;
        }
    }
    let accepted = match threshold {
        Some(t) => genuine.iter().filter(|&&g| g >= t).count(),
        None => genuine.iter().filter(|&&g| g > imp[0]).count(),
    };
    Ok(accepted as f64 / genuine.len() as f64)
}

pub fn acc_from_scores(genuine: &[f64], impostor: &[f64], spec: &EvalSpec) -> Result<f64> {
    spec.validate()?;
    spec.far_targets
        .iter()
        .zip(&spec.weights)
        .map(|(&far, &w)| tar_at_far(genuine, impostor, far).map(|t| w * t))
        .sum()
}

/// Weighted sum of TAR at each target FAR.
pub fn acc_metric(model: &TrainedModel, ds: &LabeledDataset, pairs: &PairSet, spec: &EvalSpec) -> Result<f64> {
    let (g, i) = evaluate_pairs(model, ds, pairs)?;
    acc_from_scores(&g, &i, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cleaner::{clean, CleanParams};
    use crate::synthdata::{build_pairset, generate_dataset, DatasetSpec, Pair};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn plain_combo() -> Combination {
        Combination::from_values([0.0, 1.0, 1.0, 0.0, 0.0, 16.0, 16.0, 1.0, 1.0])
    }

    fn small() -> (LabeledDataset, BaseArch) {
        let ds = generate_dataset(&DatasetSpec {
            n_classes: 5,
            samples_per_class: 30,
            feature_dim: 12,
            embed_dim: 8,
            intra_spread: 0.2,
            outlier_rate: 0.0,
            flip_rate: 0.0,
            seed: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        let base = BaseArch {
            input_dim: 12,
            base_depth: 1,
            base_width: 16,
            embed_dim: 8,
        };
        (ds, base)
    }

    #[test]
    fn zero_epochs_rejected() {
        let (ds, base) = small();
        let b = TrainBudget {
            epochs: 0,
            ..TrainBudget::proxy()
        };
        assert!(train_candidate(&plain_combo(), &ds, &base, &b).is_err());
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let (ds, base) = small();
        let b = TrainBudget {
            lr: 0.0,
            weight_decay: 0.0,
            ..TrainBudget::proxy()
        };
        let m = train_candidate(&plain_combo(), &ds, &base, &b).unwrap();
        let init = backbone::instantiate(&base, 1.0, 1.0, util::derive_seed(0, &[0])).unwrap();
        assert_eq!(m.network, init);
    }

    #[test]
    fn full_training_beats_uniform_loss() {
        let (ds, base) = small();
        let b = TrainBudget {
            epochs: 30,
            ..TrainBudget::full()
        };
        let m = train_candidate(&plain_combo(), &ds, &base, &b).unwrap();
        let last = *m.loss_trace.last().unwrap();
        assert!(last < 5f64.ln(), "final loss {last}");
        assert_eq!(m.loss_trace.len(), 30);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, base) = small();
        let b = TrainBudget::proxy().with_seed(17);
        let a = train_candidate(&plain_combo(), &ds, &base, &b).unwrap();
        let c = train_candidate(&plain_combo(), &ds, &base, &b).unwrap();
        assert_eq!(
            a.loss_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.loss_trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a, c);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (ds, base) = small();
        let b = TrainBudget {
            lr: 1e200,
            ..TrainBudget::proxy()
        };
        assert!(matches!(
            train_candidate(&plain_combo(), &ds, &base, &b),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn trains_on_cleaned_data() {
        let ds = generate_dataset(&DatasetSpec { seed: 3, ..DatasetSpec::default() }).unwrap();
        let (clean_ds, _) = clean(&ds, &CleanParams::new(0.3, 0.62)).unwrap();
        let base = BaseArch {
            input_dim: 32,
            base_depth: 2,
            base_width: 32,
            embed_dim: 16,
        };
        let combo = Combination::from_values([0.3, 0.62, 1.15, 0.22, 0.0, 40.0, 48.0, 1.47, 0.84]);
        let m = train_candidate(&combo, &clean_ds, &base, &TrainBudget::proxy()).unwrap();
        assert_eq!(m.class_weights.dim(), (clean_ds.n_classes, 16));
        assert_eq!(m.network.config.hidden_layers(), 3);
    }

    #[test]
    fn pair_scores_basic_cases() {
        let emb = array![[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]];
        let pairs = PairSet {
            pairs: vec![
                Pair { a: 0, b: 1, is_genuine: true },
                Pair { a: 0, b: 2, is_genuine: false },
            ],
        };
        let (g, i) = pair_scores(&emb, &pairs).unwrap();
        assert_eq!(g, vec![1.0]);
        assert_eq!(i, vec![0.0]);
        let zero = array![[0.0, 0.0], [1.0, 0.0]];
        let p = PairSet {
            pairs: vec![Pair { a: 0, b: 1, is_genuine: true }],
        };
        assert!(matches!(pair_scores(&zero, &p), Err(Error::DegenerateEmbedding { row: 0 })));
    }

    #[test]
    fn network_scores_match_pair_loop() {
        let (ds, base) = small();
        let m = train_candidate(&plain_combo(), &ds, &base, &TrainBudget::proxy()).unwrap();
        let pairs = build_pairset(&ds, 40, 200, 1).unwrap();
        let (g, i) = evaluate_pairs(&m, &ds, &pairs).unwrap();
        let (mut gi, mut ii) = (0, 0);
        for p in &pairs.pairs {
            let ea = m.network.embed(&ds.features.select(Axis(0), &[p.a])).unwrap();
            let eb = m.network.embed(&ds.features.select(Axis(0), &[p.b])).unwrap();
            let (a, b) = (ea.row(0), eb.row(0));
            let s = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            let got = if p.is_genuine {
                gi += 1;
                g[gi - 1]
            } else {
                ii += 1;
                i[ii - 1]
            };
            assert!((got - s).abs() < 1e-12);
        }
    }

    /// Exhaustive scan over every impostor score as a candidate threshold.
    pub(crate) fn brute_tar(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
        let m = impostor.len() as f64;
        let mut best: Option<f64> = None;
        for &t in impostor {
            let fa = impostor.iter().filter(|&&s| s >= t).count() as f64 / m;
            if fa <= far && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        let acc = match best {
            Some(t) => genuine.iter().filter(|&&g| g >= t).count(),
            None => {
                let top = impostor.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                genuine.iter().filter(|&&g| g > top).count()
            }
        };
        acc as f64 / genuine.len() as f64
    }

    #[test]
    fn perfect_separation() {
        let g = vec![0.9, 0.8, 0.95];
        let i = vec![0.1, 0.2, 0.3, -0.5];
        for far in [1e-5, 0.1, 0.5, 0.99] {
            assert_eq!(tar_at_far(&g, &i, far).unwrap(), 1.0);
        }
    }

    #[test]
    fn identical_lists_track_far() {
        let s: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        for far in [0.01, 0.05, 0.1, 0.3] {
            let tar = tar_at_far(&s, &s, far).unwrap();
            assert!((tar - far).abs() <= 1.0 / 1000.0 + 1e-12, "{far} -> {tar}");
        }
    }

    #[test]
    fn twenty_element_fixture() {
        let g = [0.91, 0.85, 0.42, 0.77, 0.66, 0.55, 0.81, 0.39, 0.93, 0.72];
        let i = [0.12, 0.45, 0.3, 0.66, 0.2, 0.05, 0.71, 0.33, 0.5, 0.58];
        for far in [0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.9] {
            assert_eq!(tar_at_far(&g, &i, far).unwrap(), brute_tar(&g, &i, far));
        }
        // FAR 0.1 admits exactly the top impostor (0.71): 6 genuine scores reach it.
        assert_eq!(tar_at_far(&g, &i, 0.1).unwrap(), 0.6);
        // Below one impostor's worth of FAR the threshold sits just above 0.71.
        assert_eq!(tar_at_far(&g, &i, 0.05).unwrap(), 0.6);
        assert_eq!(tar_at_far(&g, &i, 0.2).unwrap(), 0.7);
    }

    #[test]
    fn empty_lists_error() {
        assert!(tar_at_far(&[], &[0.1], 0.1).is_err());
        assert!(tar_at_far(&[0.1], &[], 0.1).is_err());
    }

    #[test]
    fn acc_is_weighted_sum() {
        let perfect = acc_from_scores(&[1.0], &[0.0], &EvalSpec::benchmark()).unwrap();
        assert_eq!(perfect, 1.0);
        // Impostors 0.0..0.9: FAR 0.3/0.2/0.1 put the threshold at 0.7/0.8/0.9,
        // where these genuine scores give TAR 0.8/0.6/0.4.
        let imp: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let gen = [0.95, 0.95, 0.95, 0.95, 0.85, 0.85, 0.75, 0.75, 0.1, 0.1];
        let spec = EvalSpec {
            far_targets: vec![0.3, 0.2, 0.1],
            weights: vec![0.5, 0.25, 0.25],
        };
        let tars: Vec<f64> = spec.far_targets.iter().map(|&f| tar_at_far(&gen, &imp, f).unwrap()).collect();
        assert_eq!(tars, vec![0.8, 0.6, 0.4]);
        assert!((acc_from_scores(&gen, &imp, &spec).unwrap() - 0.65).abs() < 1e-15);
    }

    #[test]
    fn eval_spec_validation() {
        EvalSpec::default().validate().unwrap();
        let bad = [
            EvalSpec { far_targets: vec![1e-3, 1e-2], weights: vec![0.5, 0.5] },
            EvalSpec { far_targets: vec![1e-2, 1e-3], weights: vec![0.5, 0.6] },
            EvalSpec { far_targets: vec![1e-2], weights: vec![0.5, 0.5] },
            EvalSpec { far_targets: vec![1.0], weights: vec![1.0] },
        ];
        for b in bad {
            assert!(b.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn tar_matches_brute_force_and_is_monotone(seed in any::<u64>(), ng in 1usize..40, ni in 1usize..60) {
            let mut rng = util::rng(seed);
            // Coarse values so ties happen.
            let g: Vec<f64> = (0..ng).map(|_| (rng.random_range(0..20) as f64) / 10.0).collect();
            let i: Vec<f64> = (0..ni).map(|_| (rng.random_range(0..15) as f64) / 10.0).collect();
            let mut prev = -1.0;
            for far in [0.001, 0.01, 0.05, 0.1, 0.2, 0.4, 0.7, 0.99] {
                let t = tar_at_far(&g, &i, far).unwrap();
                prop_assert_eq!(t, brute_tar(&g, &i, far));
                prop_assert!(t >= prev);
                prev = t;
            }
        }

        #[test]
        fn acc_in_unit_interval_and_order_free(seed in any::<u64>()) {
            let mut rng = util::rng(seed);
            let mut g: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut i: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = EvalSpec::default();
            let a = acc_from_scores(&g, &i, &spec).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            g.reverse();
            i.shuffle(&mut rng);
            prop_assert_eq!(acc_from_scores(&g, &i, &spec).unwrap(), a);
        }
    }
}
