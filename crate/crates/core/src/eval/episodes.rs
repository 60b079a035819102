use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ResultTable;
use crate::adapters::{accuracy, Classifier, SupportSet};
use crate::autodiff::{Array2, NORM_EPS};
use crate::error::{Error, Result};
use crate::format::EmbeddingFile;
use crate::seed;

/// Labelled support pool, labelled test pool and one text embedding per
/// class. All rows are re-normalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePools {
    pub support: Array2,
    pub support_labels: Vec<usize>,
    pub test: Array2,
    pub test_labels: Vec<usize>,
    pub class_texts: Array2,
    by_class: Vec<Vec<usize>>,
}

impl EpisodePools {
    pub fn new(
        support: &Array2,
        support_labels: Vec<usize>,
        test: &Array2,
        test_labels: Vec<usize>,
        class_texts: &Array2,
    ) -> Result<Self> {
        let n = class_texts.rows();
        let d = class_texts.cols();
        if support.cols() != d || test.cols() != d {
            return Err(Error::dim(
                "episode pools",
                format!(
                    "support dim {}, test dim {}, text dim {d}",
                    support.cols(),
                    test.cols()
                ),
            ));
        }
        if support_labels.len() != support.rows() || test_labels.len() != test.rows() {
            return Err(Error::dim(
                "episode pools",
                "label count differs from row count",
            ));
        }
        if let Some(&c) = support_labels.iter().chain(&test_labels).find(|&&c| c >= n) {
            return Err(Error::Config(format!(
                "label {c} has no class text ({n} classes)"
            )));
        }
        let mut by_class = vec![Vec::new(); n];
        for (i, &c) in support_labels.iter().enumerate() {
            by_class[c].push(i);
        }
        Ok(Self {
            support: support.row_normalized(NORM_EPS),
            support_labels,
            test: test.row_normalized(NORM_EPS),
            test_labels,
            class_texts: class_texts.row_normalized(NORM_EPS),
            by_class,
        })
    }

    /// Pools from imported embedding files; support and test files must carry
    /// labels, text row `c` is class `c`.
    pub fn from_files(
        support: &EmbeddingFile,
        test: &EmbeddingFile,
        texts: &EmbeddingFile,
    ) -> Result<Self> {
        Self::new(
            &support.embeddings,
            support.class_labels()?,
            &test.embeddings,
            test.class_labels()?,
            &texts.embeddings,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_texts.rows()
    }

    /// Fails naming the first class with fewer than `shots` support rows.
    pub fn check_shots(&self, shots: usize) -> Result<()> {
        for (c, rows) in self.by_class.iter().enumerate() {
            if rows.len() < shots {
                return Err(Error::InsufficientSupport {
                    class: c,
                    needed: shots,
                    available: rows.len(),
                });
            }
        }
        Ok(())
    }

    /// Exactly `shots` distinct rows per class, class-major; each class's
    /// picks are kept in pool order.
    pub fn sample_support(&self, shots: usize, seed: u64) -> Result<SupportSet> {
        self.check_shots(shots)?;
        let mut rng = seed::rng(seed);
        let mut idx = Vec::with_capacity(shots * self.num_classes());
        for rows in &self.by_class {
            let mut pick = sample(&mut rng, rows.len(), shots).into_vec();
            pick.sort_unstable();
            idx.extend(pick.into_iter().map(|j| rows[j]));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| self.support_labels[i]).collect();
        SupportSet::new(&self.support.select_rows(&idx), &labels, self.num_classes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Shot counts to evaluate; 0 runs only support-free classifiers.
    pub shots: Vec<usize>,
    pub num_episodes: usize,
    pub seed: u64,
    pub classifiers: Vec<Classifier>,
    /// Run episodes on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 4, 8],
            num_episodes: 5,
            seed: 0,
            classifiers: vec![Classifier::ZeroShot, Classifier::Prototypical],
            parallel: true,
        }
    }
}

/// Seed of episode `e` at shot count `k`.
pub fn episode_seed(root: u64, shots: usize, episode: usize) -> u64 {
    seed::derive_seed(
        seed::derive_seed(root, seed::purpose::EPISODE, shots as u64),
        seed::purpose::EPISODE,
        episode as u64,
    )
}

/// One row per (classifier, K, episode), ordered by K, then episode, then
/// classifier as listed in `spec.classifiers`.
pub fn run_episodes(pools: &EpisodePools, spec: &EpisodeSpec) -> Result<ResultTable> {
    if spec.num_episodes == 0 {
        return Err(Error::Config("num_episodes must be positive".into()));
    }
    if spec.classifiers.is_empty() {
        return Err(Error::Config("no classifiers configured".into()));
    }
    if let Some(&max) = spec.shots.iter().max() {
        pools.check_shots(max)?;
    }
    let jobs: Vec<(usize, usize)> = spec
        .shots
        .iter()
        .flat_map(|&k| (0..spec.num_episodes).map(move |e| (k, e)))
        .collect();
    let run = |&(k, e): &(usize, usize)| -> Result<Vec<super::EpisodeResult>> {
        let ep_seed = episode_seed(spec.seed, k, e);
        let spt = if k > 0 {
            Some(pools.sample_support(k, ep_seed)?)
        } else {
            None
        };
        let cv_seed = seed::derive_seed(ep_seed, seed::purpose::CV_FOLDS, 0);
        spec.classifiers
            .iter()
            .filter(|c| k > 0 || !c.needs_support())
            .map(|c| {
                let logits = c.logits(&pools.test, spt.as_ref(), &pools.class_texts, cv_seed)?;
                Ok(super::EpisodeResult {
                    classifier: c.name().to_string(),
                    shots: k,
                    episode: e,
                    num_classes: pools.num_classes(),
                    accuracy: accuracy(&logits, &pools.test_labels),
                })
            })
            .collect()
    };
    let chunks: Vec<Vec<super::EpisodeResult>> = if spec.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(ResultTable {
        rows: chunks.into_iter().flatten().collect(),
    })
}
