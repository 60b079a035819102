//! Training-free few-shot classifiers over frozen embeddings: zero-shot,
//! prototypes, Tip-Adapter (fixed and cross-validated) and k-nearest-neighbour
//! voting.
//!
//! Every classifier returns a `tests × classes` logit matrix; predictions
//! take the argmax with ties going to the smallest class index.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, NORM_EPS};
use crate::error::{Error, Result};
use crate::seed;

/// Labelled support embeddings, rows re-normalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    embeddings: Array2,
    labels: Vec<usize>,
    labels_onehot: Array2,
    class_index: Vec<Vec<usize>>,
    shots: usize,
}

impl SupportSet {
    pub fn new(embeddings: &Array2, labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::dim(
                "support set",
                format!("{} labels for {} rows", labels.len(), embeddings.rows()),
            ));
        }
        if embeddings.rows() == 0 {
            return Err(Error::EmptySupport);
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &c) in labels.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Config(format!(
                    "label {c} outside {num_classes} classes"
                )));
            }
            class_index[c].push(i);
        }
        if let Some(c) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass(c));
        }
        let shots = class_index.iter().map(Vec::len).min().unwrap_or(0);
        Ok(Self {
            embeddings: embeddings.row_normalized(NORM_EPS),
            labels: labels.to_vec(),
            labels_onehot: one_hot(labels, num_classes),
            class_index,
            shots,
        })
    }

    pub fn embeddings(&self) -> &Array2 {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labels_onehot(&self) -> &Array2 {
        &self.labels_onehot
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Smallest per-class row count.
    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2 {
    Array2::from_fn(labels.len(), num_classes, |i, c| {
        if labels[i] == c {
            1.0
        } else {
            0.0
        }
    })
}

fn check_dims(op: &'static str, test: &Array2, other: &Array2) -> Result<()> {
    if test.cols() != other.cols() {
        return Err(Error::dim(
            op,
            format!("test dim {} vs reference dim {}", test.cols(), other.cols()),
        ));
    }
    Ok(())
}

/// Cosine similarities to the class text embeddings.
pub fn zero_shot_logits(test: &Array2, class_texts: &Array2) -> Result<Array2> {
    check_dims("zero_shot_logits", test, class_texts)?;
    Ok(test.matmul_t(class_texts)?)
}

/// Per-class means of the support rows, deliberately not re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Array2,
}

pub fn build_prototypes(spt: &SupportSet) -> Result<PrototypeSet> {
    let d = spt.dim();
    let mut prototypes = Array2::zeros(spt.num_classes(), d);
    for (c, rows) in spt.class_index.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let out = prototypes.row_mut(c);
        for &i in rows {
            for (o, &x) in out.iter_mut().zip(spt.embeddings.row(i)) {
                *o += x;
            }
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(PrototypeSet { prototypes })
}

pub fn prototypical_logits(test: &Array2, protos: &PrototypeSet) -> Result<Array2> {
    check_dims("prototypical_logits", test, &protos.prototypes)?;
    Ok(test.matmul_t(&protos.prototypes)?)
}

/// Tip-Adapter cache weight (`mix`) and sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipConfig {
    pub mix: f64,
    pub sharpness: f64,
}

impl Default for TipConfig {
    fn default() -> Self {
        Self {
            mix: 1.0,
            sharpness: 5.5,
        }
    }
}

impl TipConfig {
    /// mix ∈ {0.5, 1, 2, 4} × sharpness ∈ {1, 2.75, 5.5, 11}, mix-major.
    pub fn default_grid() -> Vec<TipConfig> {
        let mut grid = Vec::with_capacity(16);
        for mix in [0.5, 1.0, 2.0, 4.0] {
            for sharpness in [1.0, 2.75, 5.5, 11.0] {
                grid.push(TipConfig { mix, sharpness });
            }
        }
        grid
    }
}

fn tip_logits_raw(
    test: &Array2,
    support: &Array2,
    onehot: &Array2,
    texts: &Array2,
    cfg: &TipConfig,
) -> Result<Array2> {
    if !(cfg.sharpness > 0.0) {
        return Err(Error::Config(format!(
            "tip sharpness {} must be positive",
            cfg.sharpness
        )));
    }
    check_dims("tip_adapter_logits", test, texts)?;
    check_dims("tip_adapter_logits", test, support)?;
    let zs = test.matmul_t(texts)?;
    let affinity = test
        .matmul_t(support)?
        .map(|a| (-cfg.sharpness * (1.0 - a)).exp());
    let cache = affinity.matmul(onehot)?;
    Ok(zs.zip_map(&cache, |z, c| z + cfg.mix * c)?)
}

/// `test·Tᵀ + mix · exp(−sharpness·(1 − test·X_sptᵀ)) · L_spt`.
pub fn tip_adapter_logits(
    test: &Array2,
    spt: &SupportSet,
    class_texts: &Array2,
    cfg: &TipConfig,
) -> Result<Array2> {
    if class_texts.rows() != spt.num_classes() {
        return Err(Error::dim(
            "tip_adapter_logits",
            format!(
                "{} class texts for {} classes",
                class_texts.rows(),
                spt.num_classes()
            ),
        ));
    }
    tip_logits_raw(test, &spt.embeddings, &spt.labels_onehot, class_texts, cfg)
}

/// Stratified fold assignment: each class's rows are shuffled, then dealt
/// round-robin starting where the previous class stopped, so folds stay
/// balanced and small classes still spread across folds.
pub fn stratified_folds(spt: &SupportSet, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::derived_rng(seed, seed::purpose::CV_FOLDS, 0);
    let mut assignment = vec![0; spt.len()];
    let mut next = 0;
    for rows in &spt.class_index {
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        for i in rows {
            assignment[i] = next;
            next = (next + 1) % folds;
        }
    }
    assignment
}

/// Picks the grid point with the best mean held-out accuracy over stratified
/// folds; ties go to the earliest grid entry.
pub fn cv_tip_select(
    spt: &SupportSet,
    class_texts: &Array2,
    grid: &[TipConfig],
    folds: usize,
    seed: u64,
) -> Result<TipConfig> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if folds < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs folds >= 2, got {folds}"
        )));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let assignment = stratified_folds(spt, folds, seed);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| (0..spt.len()).partition::<Vec<usize>, _>(|&i| assignment[i] != f))
        .filter(|(train, held)| !train.is_empty() && !held.is_empty())
        .collect();
    if splits.is_empty() {
        return Err(Error::Config(
            "support set too small for cross-validation".into(),
        ));
    }
    let mut best: Option<(f64, TipConfig)> = None;
    for cfg in grid {
        let mut total = 0.0;
        for (train, held) in &splits {
            let support = spt.embeddings.select_rows(train);
            let onehot = spt.labels_onehot.select_rows(train);
            let test = spt.embeddings.select_rows(held);
            let logits = tip_logits_raw(&test, &support, &onehot, class_texts, cfg)?;
            let labels: Vec<usize> = held.iter().map(|&i| spt.labels[i]).collect();
            total += accuracy(&logits, &labels);
        }
        let score = total / splits.len() as f64;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, *cfg));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Plurality,
    #[default]
    Softmax,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnConfig {
    pub k: usize,
    pub softmax_temp: f64,
    pub rank_offset: f64,
    pub vote: Vote,
}

impl Default for NnConfig {
    fn default() -> Self {
        Self {
            k: 32,
            softmax_temp: 0.07,
            rank_offset: 2.0,
            vote: Vote::Softmax,
        }
    }
}

impl NnConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.softmax_temp > 0.0) || !(self.rank_offset > 0.0) {
            return Err(Error::Config(
                "nearest-neighbour voting needs k >= 1, softmax_temp > 0 and rank_offset > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Indices of the `k` most similar rows, by descending similarity with ties
/// going to the lower row index.
pub fn top_k(similarities: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Vote weights for neighbours already sorted by descending similarity.
pub fn vote_weights(sorted_sims: &[f64], cfg: &NnConfig) -> Vec<f64> {
    match cfg.vote {
        Vote::Plurality => vec![1.0; sorted_sims.len()],
        Vote::Rank => (0..sorted_sims.len())
            .map(|r| 1.0 / (cfg.rank_offset + r as f64))
            .collect(),
        Vote::Softmax => {
            let max = sorted_sims
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sorted_sims
                .iter()
                .map(|s| ((s - max) / cfg.softmax_temp).exp())
                .collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        }
    }
}

/// Weighted label votes of the `min(k, N·K)` nearest supports.
pub fn nn_vote_logits(test: &Array2, spt: &SupportSet, cfg: &NnConfig) -> Result<Array2> {
    cfg.validate()?;
    if spt.is_empty() {
        return Err(Error::EmptySupport);
    }
    check_dims("nn_vote_logits", test, &spt.embeddings)?;
    let k = cfg.k.min(spt.len());
    let sims = test.matmul_t(&spt.embeddings)?;
    let mut logits = Array2::zeros(test.rows(), spt.num_classes());
    for i in 0..test.rows() {
        let row = sims.row(i);
        let nbrs = top_k(row, k);
        let sorted: Vec<f64> = nbrs.iter().map(|&j| row[j]).collect();
        let weights = vote_weights(&sorted, cfg);
        let out = logits.row_mut(i);
        for (&j, w) in nbrs.iter().zip(weights) {
            out[spt.labels[j]] += w;
        }
    }
    Ok(logits)
}

/// Zero-shot logits plus `mix_weight` times softmax-voted neighbour logits.
pub fn snn_plus_zeroshot_logits(
    test: &Array2,
    spt: &SupportSet,
    class_texts: &Array2,
    cfg: &NnConfig,
    mix_weight: f64,
) -> Result<Array2> {
    let zs = zero_shot_logits(test, class_texts)?;
    let nn = nn_vote_logits(
        test,
        spt,
        &NnConfig {
            vote: Vote::Softmax,
            ..*cfg
        },
    )?;
    if zs.shape() != nn.shape() {
        return Err(Error::dim(
            "snn_plus_zeroshot_logits",
            format!(
                "{} class texts for {} classes",
                class_texts.rows(),
                spt.num_classes()
            ),
        ));
    }
    Ok(zs.zip_map(&nn, |z, n| z + mix_weight * n)?)
}

/// Argmax per row, ties to the smallest class index.
pub fn predict(logits: &Array2) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Array2, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// A configured classifier, as named on the command line and in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Classifier {
    ZeroShot,
    Prototypical,
    Tip(TipConfig),
    CvTip { grid: Vec<TipConfig>, folds: usize },
    Nn(NnConfig),
    SnnZeroShot { nn: NnConfig, mix_weight: f64 },
}

impl Classifier {
    pub const NAMES: [&'static str; 8] = [
        "zero_shot",
        "prototypical",
        "tip",
        "cv_tip",
        "nn_plurality",
        "nn_softmax",
        "nn_rank",
        "snn_zero_shot",
    ];

    /// Default-configured classifier by name.
    pub fn from_name(name: &str) -> Result<Self> {
        let nn = |vote| {
            Self::Nn(NnConfig {
                vote,
                ..NnConfig::default()
            })
        };
        Ok(match name {
            "zero_shot" => Self::ZeroShot,
            "prototypical" => Self::Prototypical,
            "tip" => Self::Tip(TipConfig::default()),
            "cv_tip" => Self::CvTip {
                grid: TipConfig::default_grid(),
                folds: 3,
            },
            "nn_plurality" => nn(Vote::Plurality),
            "nn_softmax" => nn(Vote::Softmax),
            "nn_rank" => nn(Vote::Rank),
            "snn_zero_shot" => Self::SnnZeroShot {
                nn: NnConfig::default(),
                mix_weight: 1.0,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown classifier {other:?} (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::Prototypical => "prototypical",
            Self::Tip(_) => "tip",
            Self::CvTip { .. } => "cv_tip",
            Self::Nn(c) => match c.vote {
                Vote::Plurality => "nn_plurality",
                Vote::Softmax => "nn_softmax",
                Vote::Rank => "nn_rank",
            },
            Self::SnnZeroShot { .. } => "snn_zero_shot",
        }
    }

    pub fn needs_support(&self) -> bool {
        !matches!(self, Self::ZeroShot)
    }

    /// `seed` only matters for cross-validated selection.
    pub fn logits(
        &self,
        test: &Array2,
        spt: Option<&SupportSet>,
        class_texts: &Array2,
        seed: u64,
    ) -> Result<Array2> {
        let spt = match (self, spt) {
            (Self::ZeroShot, _) => return zero_shot_logits(test, class_texts),
            (_, Some(s)) => s,
            (_, None) => return Err(Error::EmptySupport),
        };
        match self {
            Self::ZeroShot => unreachable!(),
            Self::Prototypical => prototypical_logits(test, &build_prototypes(spt)?),
            Self::Tip(cfg) => tip_adapter_logits(test, spt, class_texts, cfg),
            Self::CvTip { grid, folds } => {
                let cfg = cv_tip_select(spt, class_texts, grid, *folds, seed)?;
                tip_adapter_logits(test, spt, class_texts, &cfg)
            }
            Self::Nn(cfg) => nn_vote_logits(test, spt, cfg),
            Self::SnnZeroShot { nn, mix_weight } => {
                snn_plus_zeroshot_logits(test, spt, class_texts, nn, *mix_weight)
            }
        }
    }
}
