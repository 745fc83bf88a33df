//! Discriminability-guided sample filtering and centroid-similarity class merging.
//!
//! The pipeline merges classes whose centroids are closer than `tau_inter`,
//! recomputes centroids under the merged labels, then drops samples whose
//! discriminability (own-centroid similarity over hardest-negative similarity)
//! falls below `tau_intra`.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{LabeledDataset, Truth};

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidTable {
    /// K × d unit-norm rows.
    pub centroids: Array2<f64>,
    pub class_sizes: Vec<usize>,
    /// Unnormalized per-class sums, kept for leave-one-out centroids.
    pub sums: Array2<f64>,
}

impl CentroidTable {
    pub fn n_classes(&self) -> usize {
        self.class_sizes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanParams {
    pub tau_intra: f64,
    pub tau_inter: f64,
    /// Exclude the sample itself from its own class centroid.
    #[serde(default)]
    pub leave_one_out: bool,
}

impl CleanParams {
    pub fn new(tau_intra: f64, tau_inter: f64) -> Self {
        Self {
            tau_intra,
            tau_inter,
            leave_one_out: false,
        }
    }

    /// Thresholds that leave every dataset untouched.
    pub fn disabled() -> Self {
        Self::new(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_intra", self.tau_intra), ("tau_inter", self.tau_inter)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Noise-detection quality of the removed set against ground truth.
///
/// `precision` is the fraction of removed samples that are noise of either
/// kind (1 when nothing was removed); recalls are per noise kind (1 when the
/// kind is absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub outlier_recall: f64,
    pub flip_recall: f64,
}

impl DetectionStats {
    pub fn from_removed(truth: &[Truth], removed: &[bool]) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        let (mut out_total, mut out_hit, mut flip_total, mut flip_hit) = (0usize, 0usize, 0usize, 0usize);
        for (t, &r) in truth.iter().zip(removed) {
            match (t.is_noise(), r) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
            match t {
                Truth::Outlier => {
                    out_total += 1;
                    out_hit += r as usize;
                }
                Truth::FlipFrom(_) => {
                    flip_total += 1;
                    flip_hit += r as usize;
                }
                Truth::Clean => {}
            }
        }
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        DetectionStats {
            true_positive: tp,
            false_positive: fp,
            false_negative: fn_,
            true_negative: tn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            outlier_recall: ratio(out_hit, out_total),
            flip_recall: ratio(flip_hit, flip_total),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub params: CleanParams,
    pub kept_indices: Vec<usize>,
    pub removed_indices: Vec<usize>,
    /// Original class id → smallest original id of its merged group.
    pub merge_map: Vec<usize>,
    /// Original class id → output class id, `None` when the class was emptied.
    pub label_map: Vec<Option<usize>>,
    /// Merged groups (by representative id) that lost every sample.
    pub dropped_classes: Vec<usize>,
    /// Per-sample discriminability under the merged labels; `None` when undefined.
    pub discriminability: Vec<Option<f64>>,
    pub undefined_ratio_indices: Vec<usize>,
    pub n_classes_in: usize,
    pub n_classes_out: usize,
    pub detection: DetectionStats,
}

/// Unit-normalized mean embedding of every class.
pub fn class_centroids(embeddings: &Array2<f64>, labels: &[usize], n_classes: usize) -> Result<CentroidTable> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let d = embeddings.ncols();
    let mut sums = Array2::<f64>::zeros((n_classes, d));
    let mut sizes = vec![0usize; n_classes];
    for (row, &l) in embeddings.rows().into_iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} >= {n_classes}")));
        }
        sizes[l] += 1;
        let mut s = sums.row_mut(l);
        s += &row;
    }
    let mut centroids = sums.clone();
    for (c, mut r) in centroids.rows_mut().into_iter().enumerate() {
        if sizes[c] == 0 {
            return Err(Error::EmptyClass(c));
        }
        let n = r.dot(&r).sqrt();
        if n <= 1e-12 * sizes[c] as f64 {
            return Err(Error::DegenerateCentroid(c));
        }
        r.mapv_inplace(|x| x / n);
    }
    Ok(CentroidTable {
        centroids,
        class_sizes: sizes,
        sums,
    })
}

fn own_similarity(x: ArrayView1<f64>, class: usize, table: &CentroidTable, leave_one_out: bool) -> Option<f64> {
    if !leave_one_out {
        return Some(x.dot(&table.centroids.row(class)));
    }
    if table.class_sizes[class] < 2 {
        return None;
    }
    let rest: Array1<f64> = &table.sums.row(class) - &x;
    let n = rest.dot(&rest).sqrt();
    (n > 1e-12).then(|| x.dot(&rest) / n)
}

fn score(i: usize, embeddings: &Array2<f64>, labels: &[usize], table: &CentroidTable, leave_one_out: bool) -> Result<f64> {
    let k = table.n_classes();
    if k < 2 {
        return Err(Error::InvalidArgument("discriminability needs at least two classes".into()));
    }
    let x = embeddings.row(i);
    let p = labels[i];
    let max_negative = (0..k)
        .filter(|&c| c != p)
        .map(|c| x.dot(&table.centroids.row(c)))
        .fold(f64::NEG_INFINITY, f64::max);
    if max_negative <= 0.0 {
        return Err(Error::UndefinedRatio { index: i, max_negative });
    }
    match own_similarity(x, p, table, leave_one_out) {
        Some(own) => Ok(own / max_negative),
        None => Err(Error::UndefinedRatio { index: i, max_negative }),
    }
}

/// Own-centroid cosine divided by the hardest-negative centroid cosine.
///
/// Fails with [`Error::UndefinedRatio`] when the hardest negative similarity
/// is not positive.
pub fn discriminability(i: usize, embeddings: &Array2<f64>, labels: &[usize], table: &CentroidTable) -> Result<f64> {
    score(i, embeddings, labels, table, false)
}

/// Leave-one-out variant of [`discriminability`].
pub fn discriminability_loo(i: usize, embeddings: &Array2<f64>, labels: &[usize], table: &CentroidTable) -> Result<f64> {
    score(i, embeddings, labels, table, true)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller root wins, so every root is its group's minimum id.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Unions every class pair whose centroid cosine exceeds `tau_inter` and maps
/// each class to the smallest id in its group. `tau_inter >= 1` merges nothing.
pub fn merge_classes(table: &CentroidTable, tau_inter: f64) -> Vec<usize> {
    let k = table.n_classes();
    let mut uf = UnionFind::new(k);
    if tau_inter < 1.0 {
        for a in 0..k {
            for b in a + 1..k {
                if table.centroids.row(a).dot(&table.centroids.row(b)) > tau_inter {
                    uf.union(a, b);
                }
            }
        }
    }
    (0..k).map(|c| uf.find(c)).collect()
}

/// Merges, refilters and relabels a dataset.
///
/// `tau_intra = 0` disables filtering entirely (samples with a negative
/// discriminability are kept too); `tau_inter = 1` disables merging.
pub fn clean(ds: &LabeledDataset, params: &CleanParams) -> Result<(LabeledDataset, CleanReport)> {
    params.validate()?;
    ds.validate()?;
    let k = ds.n_classes;
    let emb = &ds.clean_embeddings;

    let table = class_centroids(emb, &ds.labels, k)?;
    let merge_map = merge_classes(&table, params.tau_inter);

    // Compact merged groups in order of their representative id.
    let mut group_of_rep = vec![usize::MAX; k];
    let mut reps = Vec::new();
    for c in 0..k {
        if merge_map[c] == c {
            group_of_rep[c] = reps.len();
            reps.push(c);
        }
    }
    if reps.len() < 2 {
        return Err(Error::DegenerateDataset(format!(
            "merging at tau_inter={} left {} class(es)",
            params.tau_inter,
            reps.len()
        )));
    }
    let merged: Vec<usize> = ds.labels.iter().map(|&l| group_of_rep[merge_map[l]]).collect();
    let merged_table = class_centroids(emb, &merged, reps.len())?;

    let scores: Vec<Result<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|i| score(i, emb, &merged, &merged_table, params.leave_one_out))
        .collect();

    let mut discriminability = Vec::with_capacity(ds.len());
    let mut undefined = Vec::new();
    let mut removed_flags = vec![false; ds.len()];
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(d) => {
                removed_flags[i] = params.tau_intra > 0.0 && d < params.tau_intra;
                discriminability.push(Some(d));
            }
            Err(Error::UndefinedRatio { .. }) => {
                undefined.push(i);
                discriminability.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let kept: Vec<usize> = (0..ds.len()).filter(|&i| !removed_flags[i]).collect();
    let removed: Vec<usize> = (0..ds.len()).filter(|&i| removed_flags[i]).collect();

    let mut survivors = vec![0usize; reps.len()];
    for &i in &kept {
        survivors[merged[i]] += 1;
    }
    let mut out_of_group = vec![None; reps.len()];
    let mut next = 0;
    for (g, &n) in survivors.iter().enumerate() {
        if n > 0 {
            out_of_group[g] = Some(next);
            next += 1;
        }
    }
    let dropped_classes: Vec<usize> = (0..reps.len()).filter(|&g| survivors[g] == 0).map(|g| reps[g]).collect();
    if next < 2 {
        return Err(Error::DegenerateDataset(format!(
            "filtering at tau_intra={} left {next} class(es)",
            params.tau_intra
        )));
    }
    let label_map: Vec<Option<usize>> = (0..k).map(|c| out_of_group[group_of_rep[merge_map[c]]]).collect();

    let mut out = ds.subset(&kept);
    out.n_classes = next;
    for (l, t) in out.labels.iter_mut().zip(out.truth.iter_mut()) {
        *l = label_map[*l].expect("kept samples belong to surviving classes");
        if let Truth::FlipFrom(orig) = *t {
            *t = match label_map[orig] {
                Some(c) if c == *l => Truth::Clean,
                Some(c) => Truth::FlipFrom(c),
                None => Truth::Outlier,
            };
        }
    }

    let detection = DetectionStats::from_removed(&ds.truth, &removed_flags);
    let report = CleanReport {
        params: *params,
        kept_indices: kept,
        removed_indices: removed,
        merge_map,
        label_map,
        dropped_classes,
        discriminability,
        undefined_ratio_indices: undefined,
        n_classes_in: k,
        n_classes_out: next,
        detection,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, generate_dataset, DatasetSpec};
    use ndarray::array;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn table_from(rows: &[Vec<f64>]) -> CentroidTable {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| unit(r)).collect();
        let c = Array2::from_shape_vec((rows.len(), d), flat).unwrap();
        CentroidTable {
            sums: c.clone(),
            centroids: c,
            class_sizes: vec![1; rows.len()],
        }
    }

    #[test]
    fn singleton_class_centroid_is_the_sample() {
        let emb = array![[0.6, 0.8], [1.0, 0.0]];
        let t = class_centroids(&emb, &[0, 1], 2).unwrap();
        assert_eq!(t.centroids, emb);
        assert_eq!(t.class_sizes, vec![1, 1]);
    }

    #[test]
    fn antipodal_class_is_degenerate() {
        let emb = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(class_centroids(&emb, &[0, 0, 1], 2), Err(Error::DegenerateCentroid(0))));
        assert!(matches!(class_centroids(&emb, &[0, 0, 0], 2), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn centroids_match_naive_means() {
        let ds = generate_dataset(&DatasetSpec {
            n_classes: 3,
            samples_per_class: 7,
            embed_dim: 5,
            seed: 3,
            ..DatasetSpec::default()
        })
        .unwrap();
        let t = class_centroids(&ds.clean_embeddings, &ds.labels, 3).unwrap();
        for c in 0..3 {
            let mut mean = vec![0.0; 5];
            let mut count = 0.0;
            for i in 0..ds.len() {
                if ds.labels[i] == c {
                    count += 1.0;
                    for j in 0..5 {
                        mean[j] += ds.clean_embeddings[[i, j]];
                    }
                }
            }
            let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
            let expect = unit(&mean);
            for j in 0..5 {
                assert!((t.centroids[[c, j]] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discriminability_hand_cases() {
        // Sample on its centroid; hardest negative at cosine 0.5.
        let t = table_from(&[vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0], vec![0.0, -1.0]]);
        let emb = array![[1.0, 0.0]];
        let d = discriminability(0, &emb, &[0], &t).unwrap();
        assert!((d - 2.0).abs() < 1e-12);

        // Equidistant from own and hardest negative centroid.
        let t = table_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let emb = array![[1.0, 1.0]];
        let emb = emb.mapv(|x| x / 2f64.sqrt());
        assert!((discriminability(0, &emb, &[0], &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_denominator_is_undefined() {
        let t = table_from(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let emb = array![[1.0, 0.0]];
        assert!(matches!(
            discriminability(0, &emb, &[0], &t),
            Err(Error::UndefinedRatio { index: 0, .. })
        ));
    }

    #[test]
    fn discriminability_matches_exhaustive_scan() {
        let ds = generate_dataset(&DatasetSpec {
            n_classes: 3,
            samples_per_class: 4,
            embed_dim: 3,
            intra_spread: 0.8,
            seed: 21,
            outlier_rate: 0.0,
            flip_rate: 0.0,
            ..DatasetSpec::default()
        })
        .unwrap();
        let t = class_centroids(&ds.clean_embeddings, &ds.labels, 3).unwrap();
        for i in 0..10 {
            let sims: Vec<f64> = (0..3)
                .map(|c| (0..3).map(|j| ds.clean_embeddings[[i, j]] * t.centroids[[c, j]]).sum())
                .collect();
            let own = sims[ds.labels[i]];
            let neg = (0..3).filter(|&c| c != ds.labels[i]).map(|c| sims[c]).fold(f64::MIN, f64::max);
            match discriminability(i, &ds.clean_embeddings, &ds.labels, &t) {
                Ok(d) => assert!((d - own / neg).abs() < 1e-12),
                Err(_) => assert!(neg <= 0.0),
            }
        }
    }

    #[test]
    fn duplicate_centroids_merge() {
        let t = table_from(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(merge_classes(&t, 0.99), vec![0, 0, 2]);
        assert_eq!(merge_classes(&t, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn merging_is_transitive() {
        // A~B = 0.8, B~C = 0.8, A~C = 0.4 (angles 0, a, 2a with cos a = 0.8 would give 0.28;
        // use explicit 3-d vectors instead).
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.8, 0.6, 0.0];
        // c·a = 0.4, c·b = 0.8
        let cy = (0.8 - 0.8 * 0.4) / 0.6;
        let cz = (1.0 - 0.4f64 * 0.4 - cy * cy).sqrt();
        let c = vec![0.4, cy, cz];
        let t = table_from(&[c.clone(), a.clone(), b.clone()]);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&a, &b) - 0.8).abs() < 1e-12);
        assert!((dot(&b, &c) - 0.8).abs() < 1e-12);
        assert!((dot(&a, &c) - 0.4).abs() < 1e-12);
        assert_eq!(merge_classes(&t, 0.7), vec![0, 0, 0]);
        assert_eq!(merge_classes(&t, 0.85), vec![0, 1, 2]);
    }

    #[test]
    fn disabled_thresholds_are_identity() {
        let ds = generate_dataset(&DatasetSpec { seed: 5, ..DatasetSpec::default() }).unwrap();
        let (out, report) = clean(&ds, &CleanParams::disabled()).unwrap();
        assert_eq!(out, ds);
        assert!(report.removed_indices.is_empty());
        assert_eq!(report.merge_map, (0..ds.n_classes).collect::<Vec<_>>());
    }

    #[test]
    fn strict_threshold_boundary() {
        // Three classes on a circle; sample 0 tuned so its discriminability is 0.29,
        // sample 1 so it is 0.31 (tau_intra = 0.3 from the best searched row).
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            let ang = c as f64 * 2.0 * std::f64::consts::PI / 3.0;
            for _ in 0..50 {
                rows.extend([ang.cos(), ang.sin(), 0.0]);
                labels.push(c);
            }
        }
        let base = Array2::from_shape_vec((150, 3), rows).unwrap();
        let ds0 = LabeledDataset {
            features: base.clone(),
            labels: labels.clone(),
            truth: vec![Truth::Clean; 150],
            clean_embeddings: base,
            n_classes: 3,
        };
        let mut ds = ds0.clone();
                let table = class_centroids(&ds0.clean_embeddings, &ds0.labels, 3).unwrap();
        for (slot, target) in [(0usize, 0.29), (1usize, 0.31)] {
            // Search along the arc from class 0 towards class 1 for the target ratio.
            let (mut lo, mut hi) = (0.0f64, 2.0 * std::f64::consts::PI / 3.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let x = array![[mid.cos(), mid.sin(), 0.0]];
                let d = discriminability(0, &x, &[0], &table).unwrap();
                if d > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            // Mirrored copies keep the class-0 centroid on the x axis.
            let ang = 0.5 * (lo + hi);
            for (s, a) in [(slot, ang), (slot + 2, -ang)] {
                ds.clean_embeddings[[s, 0]] = a.cos();
                ds.clean_embeddings[[s, 1]] = a.sin();
            }
        }
        let (_, report) = clean(&ds, &CleanParams::new(0.3, 1.0)).unwrap();
        let d0 = report.discriminability[0].unwrap();
        let d1 = report.discriminability[1].unwrap();
        assert!(d0 < 0.3 && d1 > 0.3, "d0={d0} d1={d1}");
        assert!(report.removed_indices.contains(&0));
        assert!(!report.removed_indices.contains(&1));
    }

    #[test]
    fn noise_free_separated_data_is_untouched() {
        let g = generate(&DatasetSpec {
            n_classes: 4,
            samples_per_class: 20,
            embed_dim: 16,
            intra_spread: 0.1,
            outlier_rate: 0.0,
            flip_rate: 0.0,
            seed: 9,
            ..DatasetSpec::default()
        })
        .unwrap();
        assert!(g.max_class_cosine < 0.9);
        let (out, report) = clean(&g.dataset, &CleanParams::new(0.5, 0.9)).unwrap();
        assert!(report.removed_indices.is_empty());
        assert_eq!(out, g.dataset);
    }

    #[test]
    fn report_stats_match_confusion_matrix() {
        let ds = generate_dataset(&DatasetSpec { seed: 13, ..DatasetSpec::default() }).unwrap();
        let (_, r) = clean(&ds, &CleanParams::new(0.4, 0.8)).unwrap();
        let removed: std::collections::HashSet<_> = r.removed_indices.iter().copied().collect();
        let mut cm = [[0usize; 2]; 2];
        for i in 0..ds.len() {
            cm[ds.truth[i].is_noise() as usize][removed.contains(&i) as usize] += 1;
        }
        assert_eq!(r.detection.true_positive, cm[1][1]);
        assert_eq!(r.detection.false_positive, cm[0][1]);
        assert_eq!(r.detection.false_negative, cm[1][0]);
        assert_eq!(r.detection.true_negative, cm[0][0]);
        assert!((r.detection.precision - cm[1][1] as f64 / (cm[1][1] + cm[0][1]) as f64).abs() < 1e-15);
    }

    #[test]
    fn too_aggressive_merging_is_degenerate() {
        let ds = generate_dataset(&DatasetSpec { seed: 1, ..DatasetSpec::default() }).unwrap();
        assert!(matches!(
            clean(&ds, &CleanParams::new(0.0, 0.0)),
            Err(Error::DegenerateDataset(_))
        ));
    }

    #[test]
    fn flip_truth_is_remapped() {
        let ds = generate_dataset(&DatasetSpec { seed: 2, ..DatasetSpec::default() }).unwrap();
        let (out, _) = clean(&ds, &CleanParams::new(0.2, 0.7)).unwrap();
        out.validate().unwrap();
        for (l, t) in out.labels.iter().zip(&out.truth) {
            if let Truth::FlipFrom(c) = t {
                assert!(*c < out.n_classes && c != l);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn thresholds_are_monotone(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let ds = generate_dataset(&DatasetSpec { n_classes: 5, samples_per_class: 12, seed, ..DatasetSpec::default() }).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            let t = class_centroids(&ds.clean_embeddings, &ds.labels, 5).unwrap();
            // Raising tau_inter only splits groups.
            let m_lo = merge_classes(&t, lo);
            let m_hi = merge_classes(&t, hi);
            for x in 0..5 {
                for y in 0..5 {
                    if m_hi[x] == m_hi[y] {
                        prop_assert_eq!(m_lo[x], m_lo[y]);
                    }
                }
            }
            // Raising tau_intra only grows the removed set.
            if let (Ok((_, r_lo)), Ok((_, r_hi))) = (clean(&ds, &CleanParams::new(lo, 0.95)), clean(&ds, &CleanParams::new(hi, 0.95))) {
                for i in &r_lo.removed_indices {
                    prop_assert!(r_hi.removed_indices.contains(i));
                }
            }
        }

        #[test]
        fn merge_map_is_idempotent_and_relabel_invariant(seed in 0u64..1000, tau in 0.0f64..0.9, rot in 1usize..6) {
            let ds = generate_dataset(&DatasetSpec { n_classes: 6, samples_per_class: 6, embed_dim: 3, seed, ..DatasetSpec::default() }).unwrap();
            let t = class_centroids(&ds.clean_embeddings, &ds.labels, 6).unwrap();
            let m = merge_classes(&t, tau);
            for c in 0..6 {
                prop_assert_eq!(m[m[c]], m[c]);
                prop_assert!(m[c] <= c);
            }
            let perm: Vec<usize> = (0..6).map(|c| (c + rot) % 6).collect();
            let relabeled: Vec<usize> = ds.labels.iter().map(|&l| perm[l]).collect();
            let t2 = class_centroids(&ds.clean_embeddings, &relabeled, 6).unwrap();
            let m2 = merge_classes(&t2, tau);
            for x in 0..6 {
                for y in 0..6 {
                    prop_assert_eq!(m[x] == m[y], m2[perm[x]] == m2[perm[y]]);
                }
            }
        }
    }
}
