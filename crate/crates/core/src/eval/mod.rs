//! Episodic few-shot evaluation, result tables and gain analysis.

mod episodes;
mod fit;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episodes::{episode_seed, run_episodes, EpisodePools, EpisodeSpec};
pub use fit::{relative_gain_fit, LinearFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub classifier: String,
    pub shots: usize,
    pub episode: usize,
    pub num_classes: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub classifier: String,
    pub shots: usize,
    pub num_classes: usize,
    pub episodes: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<EpisodeResult>,
}

impl ResultTable {
    /// Mean ± sample std per (classifier, K), ordered by K then first
    /// appearance of the classifier.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<(usize, String)> = Vec::new();
        let mut groups: BTreeMap<(usize, String), Vec<&EpisodeResult>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.shots, r.classifier.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order.sort_by_key(|(k, _)| *k);
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
                let std = if rows.len() > 1 {
                    (rows
                        .iter()
                        .map(|r| (r.accuracy - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
                Aggregate {
                    classifier: key.1,
                    shots: key.0,
                    num_classes: rows[0].num_classes,
                    episodes: rows.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn mean_accuracy(&self, classifier: &str, shots: usize) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| a.classifier == classifier && a.shots == shots)
            .map(|a| a.mean)
    }

    /// Per-episode rows; floats are written with round-trip precision.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<EpisodeResult>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for a in self.aggregates() {
            out.serialize(a)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `{"rows": [...], "aggregates": [...]}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "rows": self.rows,
            "aggregates": self.aggregates(),
        }))?)
    }

    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let path = csv_path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let json = path.with_extension("json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let path = csv_path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCell {
    pub classifier: String,
    pub shots: usize,
    pub num_examples: usize,
    pub baseline: f64,
    pub contextual: f64,
    pub absolute: f64,
    /// `(contextual − baseline) / baseline`; NaN for a zero baseline.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub cells: Vec<GainCell>,
    /// Fit over cells with K ≥ 1 and a finite relative gain; absent when
    /// fewer than two distinct example counts remain.
    pub fit: Option<LinearFit>,
}

impl GainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.cells {
            out.serialize(c)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-(classifier, K) absolute and relative gains of mean accuracy, plus
/// the log-linear fit of relative gain against `N·K`.
pub fn compare_runs(baseline: &ResultTable, contextual: &ResultTable) -> Result<GainReport> {
    let base = baseline.aggregates();
    let ctx = contextual.aggregates();
    let key = |a: &Aggregate| (a.classifier.clone(), a.shots);
    let mut base_keys: Vec<_> = base.iter().map(key).collect();
    let mut ctx_keys: Vec<_> = ctx.iter().map(key).collect();
    base_keys.sort();
    ctx_keys.sort();
    if base_keys != ctx_keys {
        return Err(Error::GridMismatch(format!(
            "baseline has {} cells, contextual has {}, or their (classifier, shots) keys differ",
            base_keys.len(),
            ctx_keys.len()
        )));
    }
    let mut cells = Vec::with_capacity(base.len());
    for b in &base {
        let c = ctx
            .iter()
            .find(|c| key(c) == key(b))
            .expect("keys checked above");
        if c.num_classes != b.num_classes {
            return Err(Error::GridMismatch(format!(
                "{} at K={}: {} vs {} classes",
                b.classifier, b.shots, b.num_classes, c.num_classes
            )));
        }
        let absolute = c.mean - b.mean;
        cells.push(GainCell {
            classifier: b.classifier.clone(),
            shots: b.shots,
            num_examples: b.shots * b.num_classes,
            baseline: b.mean,
            contextual: c.mean,
            absolute,
            relative: if b.mean == 0.0 {
                f64::NAN
            } else {
                absolute / b.mean
            },
        });
    }
    let points: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.shots > 0 && c.relative.is_finite())
        .map(|c| (c.num_examples as f64, c.relative))
        .collect();
    let fit = match relative_gain_fit(&points) {
        Ok(f) => Some(f),
        Err(Error::SingularFit(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(GainReport { cells, fit })
}
