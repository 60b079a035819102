//! Dual encoders plus every learnable piece of the objective in one
//! parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph};
use crate::context::{
    build_in_batch_buffer, lixp_loss, BufferSources, LixpConfig, LixpTerms, StageMap,
    StageMapNodes, StageMapParams, StaleBuffer, ValueHead, Variant,
};
use crate::data::{Embedded, EmbeddingBatch, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{TemperatureParams, TemperatureSet, Temperatures};
use crate::params::{ParamNodes, ParamStore};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub temperatures: TemperatureSet,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.image.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.output_dim != self.text.output_dim {
            return Err(Error::Config(format!(
                "image and text embedding widths differ ({} vs {})",
                self.image.output_dim, self.text.output_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: Encoder,
    pub text: Encoder,
    pub temps: TemperatureParams,
    pub value_head: ValueHead,
    pub stage_map: Option<StageMapParams>,
}

/// A model's parameters and temperatures registered in one graph.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub params: ParamNodes,
    pub temps: Temperatures,
    pub stage_map: StageMapNodes,
}

impl Model {
    /// Builds both encoders and whatever extra modules `lixp` asks for
    /// (value head, inter-stage map, temperature coupling).
    pub fn new(config: ModelConfig, lixp: &LixpConfig) -> Result<Self> {
        config.validate()?;
        lixp.validate()?;
        let mut store = ParamStore::new();
        let image = Encoder::new(config.image.clone(), &mut store, "image")?;
        let text = Encoder::new(config.text.clone(), &mut store, "text")?;
        let temps =
            TemperatureParams::new(&mut store, &config.temperatures, lixp.temperature_coupling);
        let d = config.embed_dim();
        let mut rng = seed::derived_rng(config.image.seed, seed::purpose::INIT, 0);
        let value_head = ValueHead::new(
            lixp.value_head,
            &mut store,
            d,
            config.image.nonlinearity,
            &mut rng,
        );
        let stage_map = (lixp.variant == Variant::TwoStage
            && lixp.two_stage.map == StageMap::Linear)
            .then(|| StageMapParams::new(&mut store, d));
        Ok(Self {
            config,
            store,
            image,
            text,
            temps,
            value_head,
            stage_map,
        })
    }

    pub fn temperatures(&self) -> TemperatureSet {
        self.temps.values(&self.store)
    }

    pub fn register(&self, g: &mut Graph) -> ModelNodes {
        let params = self.store.register(g);
        let temps = self.temps.nodes(g, &params);
        let stage_map = match &self.stage_map {
            Some(p) => StageMapNodes::linear(p, &params),
            None => StageMapNodes::Identity,
        };
        ModelNodes {
            params,
            temps,
            stage_map,
        }
    }

    pub fn embed_images(&self, inputs: &Array2) -> Result<EmbeddingBatch> {
        self.image.embed(&self.store, inputs)
    }

    pub fn embed_texts(&self, inputs: &Array2) -> Result<EmbeddingBatch> {
        self.text.embed(&self.store, inputs)
    }

    /// Copies every same-named, same-shaped parameter from `other`.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<usize> {
        self.store.load_from(other)
    }

    /// Encodes a batch and records the training objective.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        nodes: &ModelNodes,
        images: &Array2,
        texts: &Array2,
        context_images: Option<&Array2>,
        stale: Option<&StaleBuffer>,
        lixp: &LixpConfig,
        rng: &mut impl Rng,
    ) -> Result<(LixpTerms, Embedded)> {
        let x = g.constant(images.clone());
        let t = g.constant(texts.clone());
        let img = self.image.encode(g, &nodes.params, x)?;
        let txt = self.text.encode(g, &nodes.params, t)?;
        let buffer = if lixp.enabled {
            let context_batch = match context_images {
                Some(c) if lixp.separate_context_batch => {
                    let c = g.constant(c.clone());
                    Some(self.image.encode(g, &nodes.params, c)?)
                }
                _ => None,
            };
            let src = BufferSources {
                images: &img,
                texts: Some(&txt),
                context_batch: context_batch.as_ref(),
                stale,
                value_head: match self.value_head {
                    ValueHead::None => None,
                    ref head => Some((head, &nodes.params)),
                },
            };
            Some(build_in_batch_buffer(g, &src, lixp, rng)?)
        } else {
            None
        };
        let terms = lixp_loss(
            g,
            &img,
            &txt,
            &nodes.temps,
            lixp,
            buffer.as_ref(),
            nodes.stage_map,
        )?;
        Ok((terms, img))
    }
}
