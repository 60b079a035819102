//! Synthetic paired data and the toy dual encoders.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId, NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamId, ParamNodes, ParamStore};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            samples_per_class: 64,
            image_dim: 32,
            text_dim: 16,
            class_separation: 5.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        if self.text_dim < self.num_classes {
            return Err(Error::Config(format!(
                "text_dim {} cannot hold {} one-hot class vectors",
                self.text_dim, self.num_classes
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Config(
                "noise_sigma must be >= 0 and class_separation finite".into(),
            ));
        }
        Ok(())
    }

    /// Unit-norm latent class centers; depend only on the seed and shape.
    pub fn class_centers(&self) -> Array2 {
        let mut rng = seed::rng(self.seed);
        Array2::from_fn(self.num_classes, self.image_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        })
        .row_normalized(NORM_EPS)
    }

    /// One-hot text vector per class (`num_classes × text_dim`).
    pub fn class_texts(&self) -> Array2 {
        Array2::from_fn(self.num_classes, self.text_dim, |c, j| {
            if c == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Same task (centers and texts) with fresh noise draws.
    pub fn resampled(&self, samples_per_class: usize, noise_stream: u64) -> SampledSpec {
        SampledSpec {
            task: self.clone(),
            samples_per_class,
            noise_seed: seed::derive_seed(self.seed, noise_stream, 0),
        }
    }
}

/// A draw from a task with an explicit noise seed, so that training, support
/// and test pools share class centers but not noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSpec {
    pub task: SyntheticTaskSpec,
    pub samples_per_class: usize,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub images: Array2,
    pub texts: Array2,
    pub labels: Vec<usize>,
}

impl PairedData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class-major pairs: image row `i` is `center[label_i]·separation + noise`,
/// text row `i` is the one-hot vector of `label_i`.
pub fn generate_pairs(spec: &SyntheticTaskSpec) -> Result<PairedData> {
    sample_pairs(&SampledSpec {
        task: spec.clone(),
        samples_per_class: spec.samples_per_class,
        noise_seed: seed::derive_seed(spec.seed, 0, 0),
    })
}

pub fn sample_pairs(s: &SampledSpec) -> Result<PairedData> {
    let spec = &s.task;
    spec.validate()?;
    let centers = spec.class_centers();
    let texts_by_class = spec.class_texts();
    let n = spec.num_classes * s.samples_per_class;
    let mut rng = seed::rng(s.noise_seed);
    let mut images = Array2::zeros(n, spec.image_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for _ in 0..s.samples_per_class {
            let i = labels.len();
            let center = centers.row(c);
            for (x, &mu) in images.row_mut(i).iter_mut().zip(center) {
                let eps: f64 = rng.sample(StandardNormal);
                *x = mu * spec.class_separation + spec.noise_sigma * eps;
            }
            labels.push(c);
        }
    }
    let texts = texts_by_class.select_rows(&labels);
    Ok(PairedData {
        images,
        texts,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

impl Nonlinearity {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Self::Tanh => g.tanh(x),
            Self::Relu => g.relu(x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dim < 2 {
            return Err(Error::Config(
                "encoder output_dim must be at least 2".into(),
            ));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "encoder layer widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Stack of affine layers with a nonlinearity between them (none after the
/// last layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    nonlinearity: Nonlinearity,
}

impl Mlp {
    /// Registers `prefix.{i}.weight` (`fan_in × fan_out`) and `prefix.{i}.bias`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        nonlinearity: Nonlinearity,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = uniform_init(rng, w[0], w[1], w[0]);
                let bias = uniform_init(rng, 1, w[1], w[0]);
                (
                    store.push(format!("{prefix}.{i}.weight"), weight, true),
                    store.push(format!("{prefix}.{i}.bias"), bias, false),
                )
            })
            .collect();
        Self {
            layers,
            nonlinearity,
        }
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, nodes: &ParamNodes, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = self.nonlinearity.apply(g, h);
            }
            let z = g.matmul(h, nodes[w])?;
            h = g.add_row_bias(z, nodes[b])?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    mlp: Mlp,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden_dims);
        widths.push(config.output_dim);
        let mut rng = seed::rng(config.seed);
        let mlp = Mlp::new(store, prefix, &widths, config.nonlinearity, &mut rng);
        Ok(Self { config, mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Differentiable forward pass: raw output plus its row normalization.
    pub fn encode(&self, g: &mut Graph, nodes: &ParamNodes, inputs: NodeId) -> Result<Embedded> {
        let cols = g.value(inputs).cols();
        if cols != self.config.input_dim {
            return Err(Error::dim(
                "encode",
                format!(
                    "inputs have {cols} columns, encoder expects {}",
                    self.config.input_dim
                ),
            ));
        }
        let raw = self.mlp.forward(g, nodes, inputs)?;
        Embedded::from_raw(g, raw)
    }

    /// Evaluation-only forward pass.
    pub fn embed(&self, store: &ParamStore, inputs: &Array2) -> Result<EmbeddingBatch> {
        let mut g = Graph::new();
        let nodes = store.register(&mut g);
        let x = g.constant(inputs.clone());
        let e = self.encode(&mut g, &nodes, x)?;
        Ok(e.to_batch(&g))
    }
}

/// Graph-side embeddings: raw encoder output and its normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedded {
    pub raw: NodeId,
    pub normalized: NodeId,
}

impl Embedded {
    pub fn from_raw(g: &mut Graph, raw: NodeId) -> Result<Self> {
        let normalized = g.row_normalize(raw, NORM_EPS)?;
        Ok(Self { raw, normalized })
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.raw).rows()
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.value(self.raw).cols()
    }

    pub fn to_batch(&self, g: &Graph) -> EmbeddingBatch {
        EmbeddingBatch {
            raw: g.value(self.raw).clone(),
            normalized: g.value(self.normalized).clone(),
        }
    }
}

/// Materialized embeddings (`|B| × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub raw: Array2,
    pub normalized: Array2,
}

impl EmbeddingBatch {
    pub fn from_raw(raw: Array2) -> Self {
        let normalized = raw.row_normalized(NORM_EPS);
        Self { raw, normalized }
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    /// Adds both views to `g` as constants.
    pub fn constant(&self, g: &mut Graph) -> Embedded {
        Embedded {
            raw: g.constant(self.raw.clone()),
            normalized: g.constant(self.normalized.clone()),
        }
    }

    /// Adds `raw` as a learnable leaf and normalizes it inside the graph.
    pub fn param(&self, g: &mut Graph) -> Result<Embedded> {
        let raw = g.param(self.raw.clone());
        Embedded::from_raw(g, raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_classes: 4,
            samples_per_class: 5,
            image_dim: 6,
            text_dim: 4,
            class_separation: 5.0,
            noise_sigma: 0.1,
            seed: 9,
        }
    }

    #[test]
    fn zero_noise_gives_identical_class_images() {
        let d = generate_pairs(&SyntheticTaskSpec {
            noise_sigma: 0.0,
            ..spec()
        })
        .unwrap();
        for i in 1..5 {
            assert_eq!(d.images.row(0), d.images.row(i));
        }
        assert_ne!(d.images.row(0), d.images.row(5));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_pairs(&spec()).unwrap();
        let b = generate_pairs(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_pairs(&SyntheticTaskSpec { seed: 10, ..spec() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn class_texts_are_distinct() {
        let t = spec().class_texts();
        for a in 0..t.rows() {
            for b in a + 1..t.rows() {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_pairs(&SyntheticTaskSpec {
            num_classes: 1,
            ..spec()
        })
        .is_err());
        assert!(generate_pairs(&SyntheticTaskSpec {
            noise_sigma: -1.0,
            ..spec()
        })
        .is_err());
        assert!(generate_pairs(&SyntheticTaskSpec {
            text_dim: 3,
            ..spec()
        })
        .is_err());
    }

    #[test]
    fn resampled_pools_share_centers_not_noise() {
        let s = spec();
        let a = sample_pairs(&s.resampled(3, seed::purpose::SUPPORT_POOL)).unwrap();
        let b = sample_pairs(&s.resampled(3, seed::purpose::TEST_POOL)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn identity_linear_encoder_passes_inputs_through() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            EncoderConfig {
                input_dim: 3,
                hidden_dims: vec![],
                output_dim: 3,
                nonlinearity: Nonlinearity::Tanh,
                seed: 1,
            },
            &mut store,
            "image",
        )
        .unwrap();
        let (w, b) = enc.mlp().layers()[0];
        *store.value_mut(w) = Array2::identity(3);
        *store.value_mut(b) = Array2::zeros(1, 3);
        let x = Array2::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]]).unwrap();
        let e = enc.embed(&store, &x).unwrap();
        assert_eq!(e.raw, x);
        for n in e.normalized.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            EncoderConfig {
                input_dim: 3,
                hidden_dims: vec![4],
                output_dim: 2,
                nonlinearity: Nonlinearity::Relu,
                seed: 1,
            },
            &mut store,
            "image",
        )
        .unwrap();
        assert!(matches!(
            enc.embed(&store, &Array2::zeros(2, 4)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let mut store = ParamStore::new();
        Encoder::new(
            EncoderConfig {
                input_dim: 16,
                hidden_dims: vec![8],
                output_dim: 4,
                nonlinearity: Nonlinearity::Tanh,
                seed: 3,
            },
            &mut store,
            "text",
        )
        .unwrap();
        let w0 = store.value(store.find("text.0.weight").unwrap());
        assert!(w0.data().iter().all(|x| x.abs() <= 0.25));
        let w1 = store.value(store.find("text.1.weight").unwrap());
        assert!(w1.data().iter().all(|x| x.abs() <= 1.0 / 8f64.sqrt()));
    }
}
