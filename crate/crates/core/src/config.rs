//! Flat `key = value` experiment files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key must be known and may appear at most once; anything else is an
//! error naming the line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{Classifier, NnConfig, TipConfig, Vote};
use crate::context::{LixpConfig, StageMap, ValueHeadKind, Variant};
use crate::data::{
    generate_pairs, sample_pairs, EncoderConfig, Nonlinearity, PairedData, SyntheticTaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::{EpisodePools, EpisodeSpec};
use crate::losses::{BaseLoss, SigmoidSign, TemperatureCoupling, TemperatureSet};
use crate::model::{Model, ModelConfig};
use crate::seed;
use crate::trainer::{train, Optimizer, TrainConfig, TrainLog};

/// `(line number, key, value)` for every setting in `text`.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line_no}: expected key = value, got {content:?}"
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {line_no}: empty key")));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!(
                "line {line_no}: duplicate key {k:?}"
            )));
        }
        out.push((line_no, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: {key} expects true/false, got {v:?}"
        ))),
    }
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(line, key, s))
        .collect()
}

fn choice<T: Copy>(line: usize, key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == v)
        .map(|&(_, t)| t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!(
                "line {line}: {key} must be one of {}, got {v:?}",
                names.join("|")
            ))
        })
}

const VARIANTS: [(&str, Variant); 4] = [
    ("single_stage", Variant::SingleStage),
    ("residual", Variant::Residual),
    ("two_stage", Variant::TwoStage),
    ("multimodal_values", Variant::MultimodalValues),
];
const VALUE_HEADS: [(&str, ValueHeadKind); 4] = [
    ("none", ValueHeadKind::None),
    ("linear", ValueHeadKind::Linear),
    ("mlp2", ValueHeadKind::Mlp2),
    ("mlp3", ValueHeadKind::Mlp3),
];
const BASE_LOSSES: [(&str, BaseLoss); 2] = [("clip", BaseLoss::Clip), ("siglip", BaseLoss::Siglip)];
const SIGNS: [(&str, SigmoidSign); 2] = [
    ("standard", SigmoidSign::Standard),
    ("as_printed", SigmoidSign::BiasInsideIndicator),
];
const STAGE_MAPS: [(&str, StageMap); 2] = [
    ("identity", StageMap::Identity),
    ("linear", StageMap::Linear),
];
const OPTIMIZERS: [(&str, Optimizer); 2] = [("sgd", Optimizer::Sgd), ("adam_w", Optimizer::AdamW)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], t: &T) -> &'static str {
    options
        .iter()
        .find(|(_, o)| o == t)
        .map(|(n, _)| *n)
        .expect("listed option")
}

/// Data, model, objective and optimizer settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub data: SyntheticTaskSpec,
    pub image_hidden_dims: Vec<usize>,
    pub text_hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub encoder_seed: u64,
    pub tau1_init: f64,
    /// `None` ties the initial τ2 to τ1.
    pub tau2_init: Option<f64>,
    pub bias_init: f64,
    pub lixp: LixpConfig,
    pub train: TrainConfig,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            data: SyntheticTaskSpec::default(),
            image_hidden_dims: vec![64],
            text_hidden_dims: vec![],
            embed_dim: 16,
            nonlinearity: Nonlinearity::Tanh,
            encoder_seed: 0,
            tau1_init: 10.0,
            tau2_init: None,
            bias_init: -10.0,
            lixp: LixpConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut e = Experiment::default();
        let mut frozen_tau_ctx = None;
        let mut coupling = None;
        for (ln, k, v) in parse_key_values(text)? {
            let v = v.as_str();
            let l = &mut e.lixp;
            let t = &mut e.train;
            match k.as_str() {
                "data.num_classes" => e.data.num_classes = value(ln, &k, v)?,
                "data.samples_per_class" => e.data.samples_per_class = value(ln, &k, v)?,
                "data.image_dim" => e.data.image_dim = value(ln, &k, v)?,
                "data.text_dim" => e.data.text_dim = value(ln, &k, v)?,
                "data.class_separation" => e.data.class_separation = value(ln, &k, v)?,
                "data.noise_sigma" => e.data.noise_sigma = value(ln, &k, v)?,
                "data.seed" => e.data.seed = value(ln, &k, v)?,
                "encoder.image_hidden_dims" => e.image_hidden_dims = list(ln, &k, v)?,
                "encoder.text_hidden_dims" => e.text_hidden_dims = list(ln, &k, v)?,
                "encoder.embed_dim" => e.embed_dim = value(ln, &k, v)?,
                "encoder.nonlinearity" => e.nonlinearity = value(ln, &k, v)?,
                "encoder.seed" => e.encoder_seed = value(ln, &k, v)?,
                "temp.tau1_init" => e.tau1_init = value(ln, &k, v)?,
                "temp.tau2_init" => e.tau2_init = Some(value(ln, &k, v)?),
                "temp.bias_init" => e.bias_init = value(ln, &k, v)?,
                "temp.coupling" => coupling = Some((ln, v.to_string())),
                "temp.frozen_tau_ctx" => frozen_tau_ctx = Some(value::<f64>(ln, &k, v)?),
                "lixp.enabled" => l.enabled = boolean(ln, &k, v)?,
                "lixp.alpha" => l.alpha = value(ln, &k, v)?,
                "lixp.base_loss" => l.base_loss = choice(ln, &k, v, &BASE_LOSSES)?,
                "lixp.sigmoid_sign" => l.sigmoid_sign = choice(ln, &k, v, &SIGNS)?,
                "lixp.variant" => l.variant = choice(ln, &k, v, &VARIANTS)?,
                "lixp.self_mask" => l.self_mask = boolean(ln, &k, v)?,
                "lixp.qk_normalized" => l.qk_normalized = boolean(ln, &k, v)?,
                "lixp.value_head" => l.value_head = choice(ln, &k, v, &VALUE_HEADS)?,
                "lixp.layernorm_keys" => l.layernorm_keys = boolean(ln, &k, v)?,
                "lixp.layernorm_values" => l.layernorm_values = boolean(ln, &k, v)?,
                "lixp.stale_buffer_size" => l.stale_buffer_size = value(ln, &k, v)?,
                "lixp.active_buffer_subset" => {
                    l.active_buffer_subset = if v == "full" {
                        None
                    } else {
                        Some(value(ln, &k, v)?)
                    }
                }
                "lixp.separate_context_batch" => l.separate_context_batch = boolean(ln, &k, v)?,
                "lixp.residual_alpha" => l.residual_alpha = value(ln, &k, v)?,
                "lixp.grad_through_keys" => l.grad_through_keys = boolean(ln, &k, v)?,
                "lixp.grad_through_values" => l.grad_through_values = boolean(ln, &k, v)?,
                "lixp.stages" => l.two_stage.stages = value(ln, &k, v)?,
                "lixp.stage_map" => l.two_stage.map = choice(ln, &k, v, &STAGE_MAPS)?,
                "lixp.rebuild_buffer" => l.two_stage.rebuild_buffer = boolean(ln, &k, v)?,
                "train.steps" => t.steps = value(ln, &k, v)?,
                "train.batch_size" => t.batch_size = value(ln, &k, v)?,
                "train.learning_rate" => t.learning_rate = value(ln, &k, v)?,
                "train.weight_decay" => t.weight_decay = value(ln, &k, v)?,
                "train.grad_clip_norm" => t.grad_clip_norm = value(ln, &k, v)?,
                "train.warmup_steps" => t.warmup_steps = value(ln, &k, v)?,
                "train.optimizer" => t.optimizer = choice(ln, &k, v, &OPTIMIZERS)?,
                "train.adam_beta1" => t.adam_beta1 = value(ln, &k, v)?,
                "train.adam_beta2" => t.adam_beta2 = value(ln, &k, v)?,
                "train.adam_eps" => t.adam_eps = value(ln, &k, v)?,
                "train.seed" => t.seed = value(ln, &k, v)?,
                "train.tau_ctx_init" => t.tau_ctx_init = value(ln, &k, v)?,
                "train.log_every" => t.log_every = value(ln, &k, v)?,
                _ => return Err(Error::Config(format!("line {ln}: unknown key {k:?}"))),
            }
        }
        if let Some((ln, c)) = coupling {
            e.lixp.temperature_coupling = match c.as_str() {
                "independent" => TemperatureCoupling::Independent,
                "all_shared" => TemperatureCoupling::AllShared,
                "context_shared" => TemperatureCoupling::ContextShared,
                "frozen_context" => TemperatureCoupling::FrozenContext(frozen_tau_ctx.ok_or_else(|| {
                    Error::Config(format!("line {ln}: frozen_context needs temp.frozen_tau_ctx"))
                })?),
                other => {
                    return Err(Error::Config(format!(
                        "line {ln}: temp.coupling must be independent|all_shared|context_shared|frozen_context, got {other:?}"
                    )))
                }
            };
        } else if frozen_tau_ctx.is_some() {
            return Err(Error::Config(
                "temp.frozen_tau_ctx needs temp.coupling = frozen_context".into(),
            ));
        }
        e.validate()?;
        Ok(e)
    }
}

impl Experiment {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.lixp.validate()?;
        self.train.validate(&self.lixp)?;
        if !(self.tau1_init > 0.0) || self.tau2_init.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("temperature inits must be positive".into()));
        }
        Ok(())
    }

    /// Every setting, in the file syntax; parses back to `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let l = &self.lixp;
        let t = &self.train;
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.num_classes", d.num_classes.to_string());
        kv("data.samples_per_class", d.samples_per_class.to_string());
        kv("data.image_dim", d.image_dim.to_string());
        kv("data.text_dim", d.text_dim.to_string());
        kv("data.class_separation", d.class_separation.to_string());
        kv("data.noise_sigma", d.noise_sigma.to_string());
        kv("data.seed", d.seed.to_string());
        kv("encoder.image_hidden_dims", join(&self.image_hidden_dims));
        kv("encoder.text_hidden_dims", join(&self.text_hidden_dims));
        kv("encoder.embed_dim", self.embed_dim.to_string());
        kv("encoder.nonlinearity", self.nonlinearity.as_str().into());
        kv("encoder.seed", self.encoder_seed.to_string());
        kv("temp.tau1_init", self.tau1_init.to_string());
        if let Some(t2) = self.tau2_init {
            kv("temp.tau2_init", t2.to_string());
        }
        kv("temp.bias_init", self.bias_init.to_string());
        let coupling = match l.temperature_coupling {
            TemperatureCoupling::Independent => "independent",
            TemperatureCoupling::AllShared => "all_shared",
            TemperatureCoupling::ContextShared => "context_shared",
            TemperatureCoupling::FrozenContext(tau) => {
                kv("temp.frozen_tau_ctx", tau.to_string());
                "frozen_context"
            }
        };
        kv("temp.coupling", coupling.into());
        kv("lixp.enabled", l.enabled.to_string());
        kv("lixp.alpha", l.alpha.to_string());
        kv("lixp.base_loss", name_of(&BASE_LOSSES, &l.base_loss).into());
        kv("lixp.sigmoid_sign", name_of(&SIGNS, &l.sigmoid_sign).into());
        kv("lixp.variant", name_of(&VARIANTS, &l.variant).into());
        kv("lixp.self_mask", l.self_mask.to_string());
        kv("lixp.qk_normalized", l.qk_normalized.to_string());
        kv(
            "lixp.value_head",
            name_of(&VALUE_HEADS, &l.value_head).into(),
        );
        kv("lixp.layernorm_keys", l.layernorm_keys.to_string());
        kv("lixp.layernorm_values", l.layernorm_values.to_string());
        kv("lixp.stale_buffer_size", l.stale_buffer_size.to_string());
        kv(
            "lixp.active_buffer_subset",
            l.active_buffer_subset
                .map_or("full".into(), |m| m.to_string()),
        );
        kv(
            "lixp.separate_context_batch",
            l.separate_context_batch.to_string(),
        );
        kv("lixp.residual_alpha", l.residual_alpha.to_string());
        kv("lixp.grad_through_keys", l.grad_through_keys.to_string());
        kv(
            "lixp.grad_through_values",
            l.grad_through_values.to_string(),
        );
        kv("lixp.stages", l.two_stage.stages.to_string());
        kv(
            "lixp.stage_map",
            name_of(&STAGE_MAPS, &l.two_stage.map).into(),
        );
        kv(
            "lixp.rebuild_buffer",
            l.two_stage.rebuild_buffer.to_string(),
        );
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.grad_clip_norm", t.grad_clip_norm.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.optimizer", name_of(&OPTIMIZERS, &t.optimizer).into());
        kv("train.adam_beta1", t.adam_beta1.to_string());
        kv("train.adam_beta2", t.adam_beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.tau_ctx_init", t.tau_ctx_init.to_string());
        kv("train.log_every", t.log_every.to_string());
        s
    }

    /// Encoder shapes follow the data dims; initial τ_ctx comes from
    /// `train.tau_ctx_init`.
    pub fn model_config(&self) -> ModelConfig {
        let enc = |input_dim, hidden: &[usize], which| EncoderConfig {
            input_dim,
            hidden_dims: hidden.to_vec(),
            output_dim: self.embed_dim,
            nonlinearity: self.nonlinearity,
            seed: seed::derive_seed(self.encoder_seed, seed::purpose::INIT, which),
        };
        ModelConfig {
            image: enc(self.data.image_dim, &self.image_hidden_dims, 1),
            text: enc(self.data.text_dim, &self.text_hidden_dims, 2),
            temperatures: TemperatureSet {
                log_tau1: self.tau1_init.ln(),
                log_tau2: self.tau2_init.unwrap_or(self.tau1_init).ln(),
                log_tau_ctx: self.train.tau_ctx_init.ln(),
                bias: self.bias_init,
            },
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.model_config(), &self.lixp)
    }

    pub fn training_data(&self) -> Result<PairedData> {
        generate_pairs(&self.data)
    }

    /// Fresh model trained on the generated pairs.
    pub fn run(&self) -> Result<(Model, TrainLog)> {
        train(
            self.build_model()?,
            &self.training_data()?,
            &self.lixp,
            &self.train,
        )
    }

    /// Embeds held-out support/test draws (same class centers, fresh noise)
    /// and the class texts with `model`.
    pub fn embed_pools(
        &self,
        model: &Model,
        support_per_class: usize,
        test_per_class: usize,
    ) -> Result<EpisodePools> {
        let support = sample_pairs(
            &self
                .data
                .resampled(support_per_class, seed::purpose::SUPPORT_POOL),
        )?;
        let test = sample_pairs(
            &self
                .data
                .resampled(test_per_class, seed::purpose::TEST_POOL),
        )?;
        let texts = model.embed_texts(&self.data.class_texts())?;
        EpisodePools::new(
            &model.embed_images(&support.images)?.normalized,
            support.labels,
            &model.embed_images(&test.images)?.normalized,
            test.labels,
            &texts.normalized,
        )
    }
}

/// An `episodes` spec file: embedding files plus the evaluation protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFile {
    pub support: PathBuf,
    pub test: PathBuf,
    pub texts: PathBuf,
    pub spec: EpisodeSpec,
}

impl EpisodeFile {
    /// Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut support = None;
        let mut test = None;
        let mut texts = None;
        let mut spec = EpisodeSpec::default();
        let mut names = vec!["zero_shot".to_string(), "prototypical".to_string()];
        let mut tip = TipConfig::default();
        let mut folds = 3;
        let mut nn = NnConfig::default();
        let mut mix_weight = 1.0;
        for (ln, k, v) in parse_key_values(text)? {
            let v = v.as_str();
            match k.as_str() {
                "support" => support = Some(base_dir.join(v)),
                "test" => test = Some(base_dir.join(v)),
                "texts" => texts = Some(base_dir.join(v)),
                "shots" => spec.shots = list(ln, &k, v)?,
                "episodes" => spec.num_episodes = value(ln, &k, v)?,
                "seed" => spec.seed = value(ln, &k, v)?,
                "parallel" => spec.parallel = boolean(ln, &k, v)?,
                "classifiers" => names = list(ln, &k, v)?,
                "tip.mix" => tip.mix = value(ln, &k, v)?,
                "tip.sharpness" => tip.sharpness = value(ln, &k, v)?,
                "cv.folds" => folds = value(ln, &k, v)?,
                "nn.k" => nn.k = value(ln, &k, v)?,
                "nn.softmax_temp" => nn.softmax_temp = value(ln, &k, v)?,
                "nn.rank_offset" => nn.rank_offset = value(ln, &k, v)?,
                "snn.mix_weight" => mix_weight = value(ln, &k, v)?,
                _ => return Err(Error::Config(format!("line {ln}: unknown key {k:?}"))),
            }
        }
        spec.classifiers = names
            .iter()
            .map(|n| configured_classifier(n, tip, folds, nn, mix_weight))
            .collect::<Result<_>>()?;
        let need = |p: Option<PathBuf>, key: &str| {
            p.ok_or_else(|| Error::Config(format!("missing key {key:?}")))
        };
        Ok(Self {
            support: need(support, "support")?,
            test: need(test, "test")?,
            texts: need(texts, "texts")?,
            spec,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Classifier `name` with the given hyperparameters in place of defaults.
pub fn configured_classifier(
    name: &str,
    tip: TipConfig,
    folds: usize,
    nn: NnConfig,
    mix_weight: f64,
) -> Result<Classifier> {
    Ok(match Classifier::from_name(name)? {
        Classifier::Tip(_) => Classifier::Tip(tip),
        Classifier::CvTip { grid, .. } => Classifier::CvTip { grid, folds },
        Classifier::Nn(c) => Classifier::Nn(NnConfig { vote: c.vote, ..nn }),
        Classifier::SnnZeroShot { .. } => Classifier::SnnZeroShot {
            nn: NnConfig {
                vote: Vote::Softmax,
                ..nn
            },
            mix_weight,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_renders_and_parses_back() {
        let e = Experiment::default();
        assert_eq!(e.render().parse::<Experiment>().unwrap(), e);
    }

    #[test]
    fn comments_and_overrides() {
        let e: Experiment = "# comment\n\nlixp.alpha = 0.5  # trailing\nlixp.active_buffer_subset = 8\ntrain.steps=3\n"
            .parse()
            .unwrap();
        assert_eq!(e.lixp.alpha, 0.5);
        assert_eq!(e.lixp.active_buffer_subset, Some(8));
        assert_eq!(e.train.steps, 3);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let err = "lixp.alpah = 0.5"
            .parse::<Experiment>()
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("line 1") && err.contains("lixp.alpah"),
            "{err}"
        );
        assert!("train.steps = 1\ntrain.steps = 2"
            .parse::<Experiment>()
            .is_err());
        assert!("lixp.variant = triple".parse::<Experiment>().is_err());
        assert!("no equals sign".parse::<Experiment>().is_err());
    }

    #[test]
    fn frozen_coupling_needs_value() {
        assert!("temp.coupling = frozen_context"
            .parse::<Experiment>()
            .is_err());
        let e: Experiment = "temp.coupling = frozen_context\ntemp.frozen_tau_ctx = 0.5"
            .parse()
            .unwrap();
        assert_eq!(
            e.lixp.temperature_coupling,
            TemperatureCoupling::FrozenContext(0.5)
        );
        assert_eq!(e.render().parse::<Experiment>().unwrap(), e);
    }

    #[test]
    fn episode_file_resolves_paths_and_classifiers() {
        let f = EpisodeFile::parse(
            "support = s.emb\ntest = t.emb\ntexts = c.emb\nshots = 1, 4\nclassifiers = tip, nn_rank\ntip.mix = 2\nnn.k = 5",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(f.support, Path::new("/data/s.emb"));
        assert_eq!(f.spec.shots, vec![1, 4]);
        assert_eq!(
            f.spec.classifiers[0],
            Classifier::Tip(TipConfig {
                mix: 2.0,
                sharpness: 5.5
            })
        );
        assert!(matches!(
            f.spec.classifiers[1],
            Classifier::Nn(NnConfig {
                k: 5,
                vote: Vote::Rank,
                ..
            })
        ));
        assert!(EpisodeFile::parse("support = a", Path::new(".")).is_err());
    }
}
