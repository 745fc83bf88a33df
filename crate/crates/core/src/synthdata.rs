//! Synthetic identity datasets on the unit hypersphere.
//!
//! Each class owns a random direction. Clean samples scatter around it with
//! Gaussian noise, outliers are replaced by uniform random directions, and
//! label flips keep their geometry but carry another class's label. A fixed
//! random linear lift maps the latent embedding to raw features, which is
//! what the trainable backbone sees.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Rng};

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub intra_spread: f64,
    pub outlier_rate: f64,
    pub flip_rate: f64,
    pub seed: u64,
    /// Gaussian corruption added to the cleaning embeddings (weaker extractor).
    #[serde(default)]
    pub extractor_noise: f64,
    /// Noise added to raw features after the linear lift.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
}

fn default_feature_noise() -> f64 {
    0.05
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 60,
            feature_dim: 32,
            embed_dim: 16,
            intra_spread: 0.3,
            outlier_rate: 0.1,
            flip_rate: 0.05,
            seed: 0,
            extractor_noise: 0.0,
            feature_noise: default_feature_noise(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return bad("n_classes and samples_per_class must be positive");
        }
        if self.feature_dim < 2 || self.embed_dim < 2 {
            return bad("feature_dim and embed_dim must be at least 2");
        }
        for (name, v) in [
            ("intra_spread", self.intra_spread),
            ("extractor_noise", self.extractor_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and nonnegative")));
            }
        }
        for (name, v) in [("outlier_rate", self.outlier_rate), ("flip_rate", self.flip_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.outlier_rate + self.flip_rate > 0.5 {
            return bad("outlier_rate + flip_rate must not exceed 0.5");
        }
        if self.flip_rate > 0.0 && self.n_classes < 2 {
            return bad("label flips need at least two classes");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_classes * self.samples_per_class
    }
}

/// Ground-truth noise annotation of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Truth {
    Clean,
    Outlier,
    FlipFrom(usize),
}

impl Truth {
    pub fn is_noise(self) -> bool {
        !matches!(self, Truth::Clean)
    }

    fn code(self) -> i64 {
        match self {
            Truth::Clean => -1,
            Truth::Outlier => -2,
            Truth::FlipFrom(c) => c as i64,
        }
    }

    fn from_code(code: i64) -> Result<Self> {
        match code {
            -1 => Ok(Truth::Clean),
            -2 => Ok(Truth::Outlier),
            c if c >= 0 => Ok(Truth::FlipFrom(c as usize)),
            c => Err(Error::Format(format!("bad truth code {c}"))),
        }
    }
}

impl std::fmt::Display for Truth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Truth::Clean => f.write_str("clean"),
            Truth::Outlier => f.write_str("outlier"),
            Truth::FlipFrom(c) => write!(f, "flip:{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// n × feature_dim raw observations.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub truth: Vec<Truth>,
    /// n × embed_dim unit-norm rows used for cleaning.
    pub clean_embeddings: Array2<f64>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.clean_embeddings.ncols()
    }

    /// Ground-truth identity: the label for clean samples, the original class
    /// for flips, `None` for outliers (they belong to no class).
    pub fn identity(&self, i: usize) -> Option<usize> {
        match self.truth[i] {
            Truth::Clean => Some(self.labels[i]),
            Truth::FlipFrom(c) => Some(c),
            Truth::Outlier => None,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.nrows() != n || self.clean_embeddings.nrows() != n || self.truth.len() != n {
            return Err(Error::Shape("dataset arrays disagree on sample count".into()));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Rows at `indices`, keeping the class id space unchanged.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            truth: indices.iter().map(|&i| self.truth[i]).collect(),
            clean_embeddings: self.clean_embeddings.select(Axis(0), indices),
            n_classes: self.n_classes,
        }
    }

    /// Keeps the samples labeled with one of `classes` and renumbers those
    /// classes to `0..classes.len()` in the given order. Flips whose original
    /// class falls outside the kept set no longer belong to any class in the
    /// result and become outliers.
    pub fn restrict_to_classes(&self, classes: &[usize]) -> LabeledDataset {
        let mut remap = vec![None; self.n_classes];
        for (new, &old) in classes.iter().enumerate() {
            remap[old] = Some(new);
        }
        let indices: Vec<usize> = (0..self.len()).filter(|&i| remap[self.labels[i]].is_some()).collect();
        let mut out = self.subset(&indices);
        out.n_classes = classes.len();
        for (l, t) in out.labels.iter_mut().zip(out.truth.iter_mut()) {
            *l = remap[*l].unwrap();
            if let Truth::FlipFrom(orig) = *t {
                *t = remap[orig].map_or(Truth::Outlier, Truth::FlipFrom);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        util::write_u32(w, DATASET_VERSION)?;
        util::write_u64(w, self.len() as u64)?;
        util::write_u64(w, self.feature_dim() as u64)?;
        util::write_u64(w, self.embed_dim() as u64)?;
        util::write_u64(w, self.n_classes as u64)?;
        util::write_f64s(w, self.features.iter().copied())?;
        util::write_f64s(w, self.clean_embeddings.iter().copied())?;
        for &l in &self.labels {
            util::write_u64(w, l as u64)?;
        }
        for t in &self.truth {
            w.write_all(&t.code().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        util::read_magic(r, DATASET_MAGIC)?;
        let version = util::read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::SchemaVersion {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let n = util::checked_len(util::read_u64(r)?, "n")?;
        let fd = util::checked_len(util::read_u64(r)?, "feature_dim")?;
        let ed = util::checked_len(util::read_u64(r)?, "embed_dim")?;
        let k = util::checked_len(util::read_u64(r)?, "n_classes")?;
        let features = Array2::from_shape_vec((n, fd), util::read_f64s(r, n * fd)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let clean_embeddings = Array2::from_shape_vec((n, ed), util::read_f64s(r, n * ed)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let labels = (0..n)
            .map(|_| util::read_u64(r).map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            truth.push(Truth::from_code(i64::from_le_bytes(b))?);
        }
        let ds = LabeledDataset {
            features,
            labels,
            truth,
            clean_embeddings,
            n_classes: k,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Writes `id,label,truth,feat_0..` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "label".to_string(), "truth".to_string()];
        header.extend((0..self.feature_dim()).map(|j| format!("feat_{j}")));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), self.labels[i].to_string(), self.truth[i].to_string()];
            rec.extend(self.features.row(i).iter().map(|v| format!("{v:?}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Generator output with the latent class geometry.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub dataset: LabeledDataset,
    /// K × embed_dim unit class directions.
    pub class_directions: Array2<f64>,
    /// Largest cosine between two distinct class directions (−1 when K = 1).
    pub max_class_cosine: f64,
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = util::dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = util::dot(&v, &v).sqrt();
    if !(n > 0.0) {
        return Err(Error::DegenerateEmbedding { row: 0 });
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    generate(spec).map(|g| g.dataset)
}

pub fn generate(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let mut rng = util::rng(spec.seed);
    let (k, e, fd, n) = (spec.n_classes, spec.embed_dim, spec.feature_dim, spec.n_samples());

    let mut directions = Array2::zeros((k, e));
    for c in 0..k {
        for (dst, v) in directions.row_mut(c).iter_mut().zip(random_unit(&mut rng, e)) {
            *dst = v;
        }
    }
    let lift_scale = 1.0 / (e as f64).sqrt();
    let lift = Array2::from_shape_fn((fd, e), |_| gaussian(&mut rng) * lift_scale);

    let mut latent = Array2::zeros((n, e));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i / spec.samples_per_class;
        labels.push(c);
        let v: Vec<f64> = directions
            .row(c)
            .iter()
            .map(|&d| d + spec.intra_spread * gaussian(&mut rng))
            .collect();
        let v = normalized(v).map_err(|_| Error::DegenerateEmbedding { row: i })?;
        latent.row_mut(i).iter_mut().zip(v).for_each(|(dst, x)| *dst = x);
    }

    let n_out = (spec.outlier_rate * n as f64).round() as usize;
    let n_flip = (spec.flip_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut truth = vec![Truth::Clean; n];
    for &i in &order[..n_out] {
        truth[i] = Truth::Outlier;
        let v = random_unit(&mut rng, e);
        latent.row_mut(i).iter_mut().zip(v).for_each(|(dst, x)| *dst = x);
    }
    for &i in &order[n_out..n_out + n_flip] {
        let orig = labels[i];
        let mut other = rng.random_range(0..k - 1);
        if other >= orig {
            other += 1;
        }
        truth[i] = Truth::FlipFrom(orig);
        labels[i] = other;
    }

    let mut clean_embeddings = Array2::zeros((n, e));
    for i in 0..n {
        let v: Vec<f64> = latent
            .row(i)
            .iter()
            .map(|&x| x + spec.extractor_noise * gaussian(&mut rng))
            .collect();
        let v = normalized(v).map_err(|_| Error::DegenerateEmbedding { row: i })?;
        clean_embeddings.row_mut(i).iter_mut().zip(v).for_each(|(dst, x)| *dst = x);
    }

    let mut features = latent.dot(&lift.t());
    features.mapv_inplace(|x| x + spec.feature_noise * gaussian(&mut rng));

    let mut max_class_cosine: f64 = -1.0;
    for a in 0..k {
        for b in a + 1..k {
            max_class_cosine = max_class_cosine.max(directions.row(a).dot(&directions.row(b)));
        }
    }

    Ok(GeneratedDataset {
        dataset: LabeledDataset {
            features,
            labels,
            truth,
            clean_embeddings,
            n_classes: k,
        },
        class_directions: directions,
        max_class_cosine,
    })
}

/// Per-class stratified split into (train, val) index lists.
pub fn split_indices(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 0.5), got {val_fraction}"
        )));
    }
    let mut members = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut rng = util::rng(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < 2 {
            return Err(Error::InvalidArgument(format!("class {c} has fewer than 2 samples")));
        }
        m.shuffle(&mut rng);
        let n_val = ((val_fraction * m.len() as f64).round() as usize).clamp(1, m.len() - 1);
        val.extend_from_slice(&m[..n_val]);
        train.extend_from_slice(&m[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, val) = split_indices(ds, val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub is_genuine: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn n_genuine(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_genuine).count()
    }

    pub fn n_impostor(&self) -> usize {
        self.pairs.len() - self.n_genuine()
    }
}

fn choose2(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Samples verification pairs over ground-truth identities.
///
/// Outliers have no identity and never appear in a pair. Flipped samples pair
/// by their original class.
pub fn build_pairset(ds: &LabeledDataset, n_genuine: usize, n_impostor: usize, seed: u64) -> Result<PairSet> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for i in 0..ds.len() {
        if let Some(id) = ds.identity(i) {
            groups[id].push(i);
        }
    }
    let members: usize = groups.iter().map(Vec::len).sum();
    let genuine_available: usize = groups.iter().map(|g| choose2(g.len())).sum();
    let impostor_available = choose2(members) - genuine_available;
    if n_genuine > genuine_available {
        return Err(Error::InsufficientPairs {
            kind: "genuine",
            requested: n_genuine,
            available: genuine_available,
        });
    }
    if n_impostor > impostor_available {
        return Err(Error::InsufficientPairs {
            kind: "impostor",
            requested: n_impostor,
            available: impostor_available,
        });
    }

    let mut identity = vec![usize::MAX; ds.len()];
    for (id, g) in groups.iter().enumerate() {
        for &i in g {
            identity[i] = id;
        }
    }
    let pool: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut rng = util::rng(seed);
    let mut pairs = Vec::with_capacity(n_genuine + n_impostor);

    // Genuine: dense requests enumerate, sparse ones rejection-sample.
    if n_genuine > 0 {
        if 2 * n_genuine >= genuine_available {
            let mut all: Vec<(usize, usize)> = groups
                .iter()
                .flat_map(|g| {
                    g.iter()
                        .enumerate()
                        .flat_map(move |(x, &a)| g[x + 1..].iter().map(move |&b| (a, b)))
                })
                .collect();
            let (chosen, _) = all.partial_shuffle(&mut rng, n_genuine);
            pairs.extend(chosen.iter().map(|&(a, b)| Pair { a, b, is_genuine: true }));
        } else {
            let weights: Vec<usize> = groups.iter().map(|g| choose2(g.len())).collect();
            let mut seen = HashSet::new();
            while seen.len() < n_genuine {
                let mut r = rng.random_range(0..genuine_available);
                let gi = weights
                    .iter()
                    .position(|&w| {
                        if r < w {
                            true
                        } else {
                            r -= w;
                            false
                        }
                    })
                    .expect("weighted draw within total");
                let g = &groups[gi];
                let x = rng.random_range(0..g.len());
                let mut y = rng.random_range(0..g.len() - 1);
                if y >= x {
                    y += 1;
                }
                let (a, b) = (g[x].min(g[y]), g[x].max(g[y]));
                if seen.insert((a, b)) {
                    pairs.push(Pair { a, b, is_genuine: true });
                }
            }
        }
    }

    if n_impostor > 0 {
        if 2 * n_impostor >= impostor_available {
            let mut all = Vec::with_capacity(impostor_available);
            for (x, &a) in pool.iter().enumerate() {
                for &b in &pool[x + 1..] {
                    if identity[a] != identity[b] {
                        all.push((a.min(b), a.max(b)));
                    }
                }
            }
            let (chosen, _) = all.partial_shuffle(&mut rng, n_impostor);
            pairs.extend(chosen.iter().map(|&(a, b)| Pair { a, b, is_genuine: false }));
        } else {
            let mut seen = HashSet::new();
            while seen.len() < n_impostor {
                let a = pool[rng.random_range(0..pool.len())];
                let b = pool[rng.random_range(0..pool.len())];
                if identity[a] == identity[b] {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    pairs.push(Pair {
                        a: key.0,
                        b: key.1,
                        is_genuine: false,
                    });
                }
            }
        }
    }
    Ok(PairSet { pairs })
}
