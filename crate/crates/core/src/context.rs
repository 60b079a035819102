//! Masked cross-attention contextualization and the combined context-aware
//! objective.
//!
//! A batch of image embeddings attends over a key/value buffer built from
//! the same batch: keys are the normalized embeddings, values the raw
//! (non-normalized) ones, and each example is masked out of its own
//! attention row. The contextualized embeddings are scored against the
//! paired texts with a second, separately tempered copy of the base loss:
//!
//! ```text
//! x̂ᶜᵗˣ = softmax_M(Q Kᵀ / (τ_ctx √d)) V,   xᶜᵗˣ = x̂ᶜᵗˣ / ‖x̂ᶜᵗˣ‖
//! L = α · L_base(X, T; τ1) + (1 − α) · L_base(Xᶜᵗˣ, T; τ2)
//! ```

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::data::{Embedded, EmbeddingBatch, Mlp, Nonlinearity};
use crate::error::{Error, Result};
use crate::losses::{
    base_loss, BaseLoss, SigmoidSign, TemperatureCoupling, Temperatures, WhichTau,
};
use crate::params::{uniform_init, ParamId, ParamNodes, ParamStore};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate base and contextual losses over one attention step.
    #[default]
    SingleStage,
    /// One loss on `normalize(r·x + (1 − r)·xᶜᵗˣ)` with τ1.
    Residual,
    /// Repeated contextualization with an inter-stage map.
    TwoStage,
    /// Text embeddings as values.
    MultimodalValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueHeadKind {
    #[default]
    None,
    Linear,
    Mlp2,
    Mlp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageMap {
    Identity,
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub stages: usize,
    pub map: StageMap,
    /// Rebuild keys/values from each stage's output instead of reusing the
    /// buffer built from the raw batch.
    pub rebuild_buffer: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            map: StageMap::Linear,
            rebuild_buffer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LixpConfig {
    /// When false only the base loss is optimized.
    pub enabled: bool,
    pub alpha: f64,
    pub base_loss: BaseLoss,
    pub sigmoid_sign: SigmoidSign,
    pub variant: Variant,
    pub self_mask: bool,
    pub qk_normalized: bool,
    pub value_head: ValueHeadKind,
    pub layernorm_keys: bool,
    pub layernorm_values: bool,
    pub stale_buffer_size: usize,
    /// `None` uses the full batch.
    pub active_buffer_subset: Option<usize>,
    pub separate_context_batch: bool,
    pub residual_alpha: f64,
    pub grad_through_keys: bool,
    pub grad_through_values: bool,
    pub two_stage: TwoStageConfig,
    pub temperature_coupling: TemperatureCoupling,
}

impl Default for LixpConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.9,
            base_loss: BaseLoss::Siglip,
            sigmoid_sign: SigmoidSign::Standard,
            variant: Variant::SingleStage,
            self_mask: true,
            qk_normalized: true,
            value_head: ValueHeadKind::None,
            layernorm_keys: false,
            layernorm_values: false,
            stale_buffer_size: 0,
            active_buffer_subset: None,
            separate_context_batch: false,
            residual_alpha: 0.9,
            grad_through_keys: true,
            grad_through_values: true,
            two_stage: TwoStageConfig::default(),
            temperature_coupling: TemperatureCoupling::Independent,
        }
    }
}

impl LixpConfig {
    /// Base loss only, same options otherwise.
    pub fn base_only() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.residual_alpha) {
            return Err(Error::Config(format!(
                "residual_alpha {} outside [0, 1]",
                self.residual_alpha
            )));
        }
        if self.active_buffer_subset == Some(0) {
            return Err(Error::Config(
                "active_buffer_subset must be positive".into(),
            ));
        }
        if self.two_stage.stages == 0 {
            return Err(Error::Config(
                "two-stage contextualization needs stages >= 1".into(),
            ));
        }
        if self.variant == Variant::MultimodalValues
            && (self.stale_buffer_size > 0 || self.separate_context_batch)
        {
            return Err(Error::Config(
                "multimodal values cannot be combined with stale or separate-batch buffers".into(),
            ));
        }
        Ok(())
    }
}

/// Keys, values and attention mask for one contextualization step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBuffer {
    pub keys: NodeId,
    pub values: NodeId,
    /// `queries × buffer rows`, 1 where attention is allowed.
    pub mask: Array2,
    pub grad_through_keys: bool,
    pub grad_through_values: bool,
}

impl ContextBuffer {
    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.keys).rows()
    }
}

/// Mask of ones with a zero diagonal.
pub fn self_mask(n: usize) -> Array2 {
    Array2::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// Contextualized embeddings plus the attention weights that produced them.
#[derive(Debug, Clone, Copy)]
pub struct Contextualized {
    pub output: Embedded,
    pub attention: NodeId,
}

/// `softmax_M(Q Kᵀ / (τ_ctx √d)) V` with `Q` the normalized queries (or the
/// raw ones when `qk_normalized` is off). Keys/values whose gradient flag is
/// off are detached before use.
pub fn contextualize(
    g: &mut Graph,
    queries: &Embedded,
    buffer: &ContextBuffer,
    log_tau_ctx: NodeId,
    qk_normalized: bool,
) -> Result<Contextualized> {
    let (nq, d) = g.value(queries.raw).shape();
    let (nk, dk) = g.value(buffer.keys).shape();
    let vshape = g.value(buffer.values).shape();
    if dk != d || vshape != (nk, d) {
        return Err(Error::dim(
            "contextualize",
            format!(
                "queries {nq}x{d}, keys {nk}x{dk}, values {}x{}",
                vshape.0, vshape.1
            ),
        ));
    }
    if buffer.mask.shape() != (nq, nk) {
        return Err(Error::dim(
            "contextualize",
            format!(
                "mask {:?} for {nq} queries over {nk} entries",
                buffer.mask.shape()
            ),
        ));
    }
    let keys = if buffer.grad_through_keys {
        buffer.keys
    } else {
        g.detach(buffer.keys)
    };
    let values = if buffer.grad_through_values {
        buffer.values
    } else {
        g.detach(buffer.values)
    };
    let q = if qk_normalized {
        queries.normalized
    } else {
        queries.raw
    };
    let scores = g.matmul_t(q, keys)?;
    let neg_log_tau = g.neg(log_tau_ctx);
    let inv_tau = g.exp(neg_log_tau);
    let scores = g.mul_scalar(scores, inv_tau)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attention = g.masked_softmax(scores, &buffer.mask)?;
    let raw = g.matmul(attention, values)?;
    Ok(Contextualized {
        output: Embedded::from_raw(g, raw)?,
        attention,
    })
}

/// Learnable map applied to buffer values.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueHead {
    None,
    Linear(ParamId),
    Mlp(Mlp),
}

impl ValueHead {
    /// `linear` is a bias-free `d × d` map; `mlp2`/`mlp3` are 2/3 affine
    /// layers of width `d`.
    pub fn new(
        kind: ValueHeadKind,
        store: &mut ParamStore,
        dim: usize,
        nonlinearity: Nonlinearity,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            ValueHeadKind::None => Self::None,
            ValueHeadKind::Linear => Self::Linear(store.push(
                "value_head.weight",
                uniform_init(rng, dim, dim, dim),
                true,
            )),
            ValueHeadKind::Mlp2 => {
                Self::Mlp(Mlp::new(store, "value_head", &[dim; 3], nonlinearity, rng))
            }
            ValueHeadKind::Mlp3 => {
                Self::Mlp(Mlp::new(store, "value_head", &[dim; 4], nonlinearity, rng))
            }
        }
    }

    pub fn apply(&self, g: &mut Graph, nodes: &ParamNodes, values: NodeId) -> Result<NodeId> {
        match self {
            Self::None => Ok(values),
            Self::Linear(w) => Ok(g.matmul(values, nodes[*w])?),
            Self::Mlp(mlp) => mlp.forward(g, nodes, values),
        }
    }
}

/// Learnable `d × d` inter-stage map with bias, initialized to the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMapParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl StageMapParams {
    pub fn new(store: &mut ParamStore, dim: usize) -> Self {
        Self {
            weight: store.push("stage_map.weight", Array2::identity(dim), true),
            bias: store.push("stage_map.bias", Array2::zeros(1, dim), false),
        }
    }
}

/// Inter-stage map resolved against a graph.
#[derive(Debug, Clone, Copy)]
pub enum StageMapNodes {
    Identity,
    Linear { weight: NodeId, bias: NodeId },
}

impl StageMapNodes {
    pub fn linear(params: &StageMapParams, nodes: &ParamNodes) -> Self {
        Self::Linear {
            weight: nodes[params.weight],
            bias: nodes[params.bias],
        }
    }
}

/// Applies `x ← ψ(contextualize(x))` for `stages` rounds. The inter-stage
/// map acts on the normalized stage output. With one stage and the identity
/// map the result is exactly [`contextualize`].
pub fn two_stage_contextualize(
    g: &mut Graph,
    queries: &Embedded,
    buffer: &ContextBuffer,
    log_tau_ctx: NodeId,
    qk_normalized: bool,
    config: &TwoStageConfig,
    map: StageMapNodes,
) -> Result<Embedded> {
    if config.stages == 0 {
        return Err(Error::Config(
            "two-stage contextualization needs stages >= 1".into(),
        ));
    }
    let mut x = *queries;
    let mut buf = buffer.clone();
    for stage in 0..config.stages {
        if stage > 0 && config.rebuild_buffer {
            let n = x.rows(g);
            let square_masked =
                buffer.mask.shape() == (n, n) && (0..n).all(|i| buffer.mask.get(i, i) == 0.0);
            buf = ContextBuffer {
                keys: x.normalized,
                values: x.raw,
                mask: if square_masked {
                    self_mask(n)
                } else {
                    Array2::ones(n, n)
                },
                ..buffer.clone()
            };
        }
        let c = contextualize(g, &x, &buf, log_tau_ctx, qk_normalized)?.output;
        x = match map {
            StageMapNodes::Identity => c,
            StageMapNodes::Linear { weight, bias } => {
                let z = g.matmul(c.normalized, weight)?;
                let raw = g.add_row_bias(z, bias)?;
                Embedded::from_raw(g, raw)?
            }
        };
    }
    Ok(x)
}

/// FIFO of detached embedding rows from earlier steps, capped at
/// `capacity` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaleBuffer {
    capacity: usize,
    rows: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl StaleBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push_batch(&mut self, batch: &EmbeddingBatch) {
        if self.capacity == 0 {
            return;
        }
        for i in 0..batch.len() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows
                .push_back((batch.raw.row(i).to_vec(), batch.normalized.row(i).to_vec()));
        }
    }

    /// Stored rows as (raw, normalized), oldest first.
    pub fn arrays(&self) -> Option<(Array2, Array2)> {
        if self.rows.is_empty() {
            return None;
        }
        let raw: Vec<&[f64]> = self.rows.iter().map(|(r, _)| r.as_slice()).collect();
        let norm: Vec<&[f64]> = self.rows.iter().map(|(_, n)| n.as_slice()).collect();
        Some((
            Array2::from_rows(&raw).expect("uniform rows"),
            Array2::from_rows(&norm).expect("uniform rows"),
        ))
    }
}

/// Everything a buffer may be assembled from.
#[derive(Debug, Clone, Copy)]
pub struct BufferSources<'a> {
    /// The query batch; also the buffer source unless `context_batch` is set.
    pub images: &'a Embedded,
    /// Paired texts of `images`, used as values by the multimodal variant.
    pub texts: Option<&'a Embedded>,
    /// A separately embedded batch to populate the buffer with.
    pub context_batch: Option<&'a Embedded>,
    pub stale: Option<&'a StaleBuffer>,
    pub value_head: Option<(&'a ValueHead, &'a ParamNodes)>,
}

impl<'a> BufferSources<'a> {
    pub fn in_batch(images: &'a Embedded) -> Self {
        Self {
            images,
            texts: None,
            context_batch: None,
            stale: None,
            value_head: None,
        }
    }
}

/// Keys are the normalized source embeddings and values the raw ones, with
/// each query masked from its own entry. Options in `cfg` add subset
/// sampling, stale rows, separate batches, layer norms and value heads.
pub fn build_in_batch_buffer(
    g: &mut Graph,
    src: &BufferSources<'_>,
    cfg: &LixpConfig,
    rng: &mut impl Rng,
) -> Result<ContextBuffer> {
    let nq = src.images.rows(g);
    let same_batch = src.context_batch.is_none();
    if cfg.self_mask && same_batch && nq < 2 {
        return Err(Error::SelfMaskTooSmall(nq));
    }
    let source = src.context_batch.unwrap_or(src.images);
    let multimodal = cfg.variant == Variant::MultimodalValues;
    let value_source = if multimodal {
        if !same_batch {
            return Err(Error::Config(
                "multimodal values need the buffer to be the query batch".into(),
            ));
        }
        *src.texts.ok_or_else(|| {
            Error::Config("multimodal values need the paired text embeddings".into())
        })?
    } else {
        *source
    };
    let nsrc = source.rows(g);

    let (mut key_raw, mut key_norm, mut value_raw) =
        (source.raw, source.normalized, value_source.raw);
    let mut origin: Vec<Option<usize>> = (0..nsrc).map(Some).collect();
    if let Some(m) = cfg.active_buffer_subset {
        if m == 0 {
            return Err(Error::Config(
                "active_buffer_subset must be positive".into(),
            ));
        }
        if m > nsrc {
            return Err(Error::Config(format!(
                "active_buffer_subset {m} exceeds buffer source of {nsrc} rows"
            )));
        }
        let mut idx = rand::seq::index::sample(rng, nsrc, m).into_vec();
        idx.sort_unstable();
        key_raw = g.select_rows(key_raw, &idx)?;
        key_norm = g.select_rows(key_norm, &idx)?;
        value_raw = g.select_rows(value_raw, &idx)?;
        origin = idx.into_iter().map(Some).collect();
    }
    if let Some((raw, norm)) = src.stale.and_then(StaleBuffer::arrays) {
        let stale_rows = raw.rows();
        let raw = g.constant(raw);
        let norm = g.constant(norm);
        key_raw = g.concat_rows(&[key_raw, raw])?;
        key_norm = g.concat_rows(&[key_norm, norm])?;
        value_raw = g.concat_rows(&[value_raw, raw])?;
        origin.extend(std::iter::repeat_n(None, stale_rows));
    }

    let keys = if cfg.layernorm_keys {
        let ln = g.layer_norm_rows(key_raw, LAYER_NORM_EPS)?;
        g.row_normalize(ln, crate::autodiff::NORM_EPS)?
    } else {
        key_norm
    };
    let mut values = value_raw;
    if cfg.layernorm_values {
        values = g.layer_norm_rows(values, LAYER_NORM_EPS)?;
    }
    if let Some((head, nodes)) = src.value_head {
        values = head.apply(g, nodes, values)?;
    }

    let mask = Array2::from_fn(nq, origin.len(), |i, j| {
        if cfg.self_mask && same_batch && origin[j] == Some(i) {
            0.0
        } else {
            1.0
        }
    });
    Ok(ContextBuffer {
        keys,
        values,
        mask,
        grad_through_keys: cfg.grad_through_keys,
        grad_through_values: cfg.grad_through_values,
    })
}

/// Total loss node plus detached values of both components for logging.
#[derive(Debug, Clone, Copy)]
pub struct LixpTerms {
    pub total: NodeId,
    pub base_term: f64,
    /// `None` when the contextual branch is disabled.
    pub ctx_term: Option<f64>,
}

/// `α · L(X, T; τ1) + (1 − α) · L(Xᶜᵗˣ, T; τ2)`, or the single residual loss
/// for [`Variant::Residual`].
pub fn lixp_loss(
    g: &mut Graph,
    images: &Embedded,
    texts: &Embedded,
    temps: &Temperatures,
    cfg: &LixpConfig,
    buffer: Option<&ContextBuffer>,
    stage_map: StageMapNodes,
) -> Result<LixpTerms> {
    let base = base_loss(
        g,
        cfg.base_loss,
        images,
        texts,
        temps,
        WhichTau::Tau1,
        cfg.sigmoid_sign,
    )?;
    let base_term = g.value(base).data()[0];
    let buffer = match (cfg.enabled, buffer) {
        (false, _) => {
            return Ok(LixpTerms {
                total: base,
                base_term,
                ctx_term: None,
            })
        }
        (true, Some(b)) => b,
        (true, None) => {
            return Err(Error::Config(
                "contextual objective needs a context buffer".into(),
            ))
        }
    };

    let total = match cfg.variant {
        Variant::Residual => {
            let ctx = contextualize(g, images, buffer, temps.log_tau_ctx, cfg.qk_normalized)?;
            let x = g.scale(images.normalized, cfg.residual_alpha);
            let c = g.scale(ctx.output.normalized, 1.0 - cfg.residual_alpha);
            let mixed = g.add(x, c)?;
            let mixed = Embedded::from_raw(g, mixed)?;
            base_loss(
                g,
                cfg.base_loss,
                &mixed,
                texts,
                temps,
                WhichTau::Tau1,
                cfg.sigmoid_sign,
            )?
        }
        Variant::SingleStage | Variant::MultimodalValues | Variant::TwoStage => {
            let ctx = if cfg.variant == Variant::TwoStage {
                two_stage_contextualize(
                    g,
                    images,
                    buffer,
                    temps.log_tau_ctx,
                    cfg.qk_normalized,
                    &cfg.two_stage,
                    stage_map,
                )?
            } else {
                contextualize(g, images, buffer, temps.log_tau_ctx, cfg.qk_normalized)?.output
            };
            let ctx_loss = base_loss(
                g,
                cfg.base_loss,
                &ctx,
                texts,
                temps,
                WhichTau::Tau2,
                cfg.sigmoid_sign,
            )?;
            let a = g.scale(base, cfg.alpha);
            let b = g.scale(ctx_loss, 1.0 - cfg.alpha);
            let total = g.add(a, b)?;
            return Ok(LixpTerms {
                total,
                base_term,
                ctx_term: Some(g.value(ctx_loss).data()[0]),
            });
        }
    };
    Ok(LixpTerms {
        total,
        base_term,
        ctx_term: Some(g.value(total).data()[0]),
    })
}

/// Default in-batch buffer and single-stage objective, no extra modules.
pub fn lixp_loss_in_batch(
    g: &mut Graph,
    images: &Embedded,
    texts: &Embedded,
    temps: &Temperatures,
    cfg: &LixpConfig,
    rng: &mut impl Rng,
) -> Result<LixpTerms> {
    let buffer = if cfg.enabled {
        let src = BufferSources {
            texts: Some(texts),
            ..BufferSources::in_batch(images)
        };
        Some(build_in_batch_buffer(g, &src, cfg, rng)?)
    } else {
        None
    };
    lixp_loss(
        g,
        images,
        texts,
        temps,
        cfg,
        buffer.as_ref(),
        StageMapNodes::Identity,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TemperatureSet;
    use crate::seed;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::from_raw(Array2::from_rows(rows).unwrap())
    }

    fn in_batch(g: &mut Graph, e: &Embedded, cfg: &LixpConfig) -> Result<ContextBuffer> {
        build_in_batch_buffer(g, &BufferSources::in_batch(e), cfg, &mut seed::rng(0))
    }

    #[test]
    fn default_buffer_has_zero_diagonal_mask() {
        let mut g = Graph::new();
        let e = EmbeddingBatch::from_raw(Array2::from_fn(4, 3, |i, j| (i + 2 * j) as f64 + 0.5))
            .constant(&mut g);
        let b = in_batch(&mut g, &e, &LixpConfig::default()).unwrap();
        assert_eq!(b.mask, self_mask(4));
        assert_eq!(b.keys, e.normalized);
        assert_eq!(b.values, e.raw);
    }

    #[test]
    fn batch_of_one_with_self_mask_is_rejected() {
        let mut g = Graph::new();
        let e = batch(&[&[1.0, 2.0]]).constant(&mut g);
        assert!(matches!(
            in_batch(&mut g, &e, &LixpConfig::default()),
            Err(Error::SelfMaskTooSmall(1))
        ));
        let cfg = LixpConfig {
            self_mask: false,
            ..LixpConfig::default()
        };
        assert!(in_batch(&mut g, &e, &cfg).is_ok());
    }

    #[test]
    fn pair_attends_only_to_partner() {
        let mut g = Graph::new();
        let e = batch(&[&[1.0, 2.0, 0.0], &[-3.0, 0.5, 1.0]]).constant(&mut g);
        let buf = in_batch(&mut g, &e, &LixpConfig::default()).unwrap();
        for log_tau in [-3.0, 0.0, 4.0] {
            let t = g.constant(Array2::scalar(log_tau));
            let c = contextualize(&mut g, &e, &buf, t, true).unwrap();
            let out = g.value(c.output.raw);
            assert_eq!(out.row(0), g.value(e.raw).row(1));
            assert_eq!(out.row(1), g.value(e.raw).row(0));
        }
    }

    #[test]
    fn large_tau_ctx_gives_uniform_attention() {
        let mut g = Graph::new();
        let e = EmbeddingBatch::from_raw(Array2::from_fn(5, 4, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 1.7
        }))
        .constant(&mut g);
        let buf = in_batch(&mut g, &e, &LixpConfig::default()).unwrap();
        let t = g.constant(Array2::scalar(1e6f64.ln()));
        let c = contextualize(&mut g, &e, &buf, t, true).unwrap();
        let w = g.value(c.attention);
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { 0.0 } else { 0.25 };
                assert!((w.get(i, j) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn subset_buffer_masks_sampled_self_columns() {
        let mut g = Graph::new();
        let e = EmbeddingBatch::from_raw(Array2::from_fn(4, 3, |i, j| (i * 3 + j) as f64 + 1.0))
            .constant(&mut g);
        let cfg = LixpConfig {
            active_buffer_subset: Some(2),
            ..LixpConfig::default()
        };
        let mut rng = seed::rng(11);
        let b =
            build_in_batch_buffer(&mut g, &BufferSources::in_batch(&e), &cfg, &mut rng).unwrap();
        assert_eq!(b.rows(&g), 2);
        assert_eq!(b.mask.shape(), (4, 2));
        // recover which rows were sampled by matching key rows
        let keys = g.value(b.keys).clone();
        let norm = g.value(e.normalized).clone();
        for j in 0..2 {
            let src = (0..4).find(|&i| norm.row(i) == keys.row(j)).unwrap();
            for i in 0..4 {
                let expected = if i == src { 0.0 } else { 1.0 };
                assert_eq!(b.mask.get(i, j), expected);
            }
        }
        let zero = LixpConfig {
            active_buffer_subset: Some(0),
            ..LixpConfig::default()
        };
        assert!(
            build_in_batch_buffer(&mut g, &BufferSources::in_batch(&e), &zero, &mut rng).is_err()
        );
    }

    #[test]
    fn stale_buffer_is_fifo_and_detached() {
        let mut stale = StaleBuffer::new(8);
        let cfg = LixpConfig {
            stale_buffer_size: 8,
            ..LixpConfig::default()
        };
        let mut last_rows = 0;
        for step in 0..3 {
            let mut g = Graph::new();
            let raw = g.param(Array2::from_fn(4, 3, |i, j| {
                (step * 12 + i * 3 + j) as f64 + 1.0
            }));
            let e = Embedded::from_raw(&mut g, raw).unwrap();
            let src = BufferSources {
                stale: Some(&stale),
                ..BufferSources::in_batch(&e)
            };
            let b = build_in_batch_buffer(&mut g, &src, &cfg, &mut seed::rng(0)).unwrap();
            last_rows = b.rows(&g);
            if step == 2 {
                let t = g.constant(Array2::scalar(0.0));
                let c = contextualize(&mut g, &e, &b, t, true).unwrap();
                let loss = g.sum(c.output.normalized);
                g.backward(loss).unwrap();
                // stale rows attend freely; current rows are self-masked
                assert_eq!(b.mask.get(0, 0), 0.0);
                assert!((4..12).all(|j| b.mask.get(0, j) == 1.0));
            }
            stale.push_batch(&e.to_batch(&g));
        }
        assert_eq!(last_rows, 12);
        assert_eq!(stale.len(), 8);
        // oldest batch evicted: the first stored row now belongs to step 1
        let (raw, _) = stale.arrays().unwrap();
        assert_eq!(raw.get(0, 0), 13.0);
    }

    #[test]
    fn two_stage_single_identity_equals_contextualize() {
        let mut g = Graph::new();
        let e = EmbeddingBatch::from_raw(Array2::from_fn(3, 4, |i, j| {
            (i as f64 - j as f64) * 0.4 + 0.1
        }))
        .constant(&mut g);
        let buf = in_batch(&mut g, &e, &LixpConfig::default()).unwrap();
        let t = g.constant(Array2::scalar(-0.5));
        let one = contextualize(&mut g, &e, &buf, t, true).unwrap().output;
        let cfg = TwoStageConfig {
            stages: 1,
            map: StageMap::Identity,
            rebuild_buffer: false,
        };
        let two = two_stage_contextualize(&mut g, &e, &buf, t, true, &cfg, StageMapNodes::Identity)
            .unwrap();
        assert_eq!(g.value(one.raw), g.value(two.raw));
        assert_eq!(g.value(one.normalized), g.value(two.normalized));
    }

    #[test]
    fn two_stage_pair_trace() {
        let mut g = Graph::new();
        let e = batch(&[&[2.0, 0.0], &[0.0, 3.0]]).constant(&mut g);
        let buf = in_batch(&mut g, &e, &LixpConfig::default()).unwrap();
        let t = g.constant(Array2::scalar(0.0));
        let fixed = TwoStageConfig {
            stages: 2,
            map: StageMap::Identity,
            rebuild_buffer: false,
        };
        let out =
            two_stage_contextualize(&mut g, &e, &buf, t, true, &fixed, StageMapNodes::Identity)
                .unwrap();
        // fixed buffer: each stage reads the partner's original value
        assert_eq!(g.value(out.raw).row(0), &[0.0, 3.0]);
        assert_eq!(g.value(out.raw).row(1), &[2.0, 0.0]);

        let rebuilt = TwoStageConfig {
            rebuild_buffer: true,
            ..fixed
        };
        let out =
            two_stage_contextualize(&mut g, &e, &buf, t, true, &rebuilt, StageMapNodes::Identity)
                .unwrap();
        // rebuilt buffer: the second stage swaps back
        assert_eq!(g.value(out.raw).row(0), &[2.0, 0.0]);
        assert_eq!(g.value(out.raw).row(1), &[0.0, 3.0]);
    }

    #[test]
    fn alpha_one_equals_base_loss() {
        let mut g = Graph::new();
        let x =
            EmbeddingBatch::from_raw(Array2::from_fn(4, 3, |i, j| ((i * 5 + j) % 7) as f64 - 2.5))
                .constant(&mut g);
        let t =
            EmbeddingBatch::from_raw(Array2::from_fn(4, 3, |i, j| ((i + j * 2) % 5) as f64 - 1.5))
                .constant(&mut g);
        let temps = TemperatureSet::default().constants(&mut g);
        let cfg = LixpConfig {
            alpha: 1.0,
            ..LixpConfig::default()
        };
        let terms = lixp_loss_in_batch(&mut g, &x, &t, &temps, &cfg, &mut seed::rng(0)).unwrap();
        let base = crate::losses::siglip_loss(
            &mut g,
            &x,
            &t,
            &temps,
            WhichTau::Tau1,
            SigmoidSign::Standard,
        )
        .unwrap();
        assert_eq!(
            g.value(terms.total).data()[0].to_bits(),
            g.value(base).data()[0].to_bits()
        );
        assert!(terms.ctx_term.is_some());
    }

    #[test]
    fn multimodal_values_are_text_embeddings() {
        let mut g = Graph::new();
        let x = batch(&[&[1.0, 0.0], &[0.0, 1.0]]).constant(&mut g);
        let t = batch(&[&[5.0, 1.0], &[-2.0, 7.0]]).constant(&mut g);
        let cfg = LixpConfig {
            variant: Variant::MultimodalValues,
            ..LixpConfig::default()
        };
        let src = BufferSources {
            texts: Some(&t),
            ..BufferSources::in_batch(&x)
        };
        let b = build_in_batch_buffer(&mut g, &src, &cfg, &mut seed::rng(0)).unwrap();
        assert_eq!(b.values, t.raw);
        let missing = build_in_batch_buffer(
            &mut g,
            &BufferSources::in_batch(&x),
            &cfg,
            &mut seed::rng(0),
        );
        assert!(matches!(missing, Err(Error::Config(_))));
    }

    #[test]
    fn separate_context_batch_has_no_self_mask() {
        let mut g = Graph::new();
        let x = batch(&[&[1.0, 0.0]]).constant(&mut g);
        let other = batch(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).constant(&mut g);
        let src = BufferSources {
            context_batch: Some(&other),
            ..BufferSources::in_batch(&x)
        };
        let b =
            build_in_batch_buffer(&mut g, &src, &LixpConfig::default(), &mut seed::rng(0)).unwrap();
        assert_eq!(b.mask, Array2::ones(1, 3));
    }

    #[test]
    fn layernorm_keys_stay_unit_norm() {
        let mut g = Graph::new();
        let e =
            EmbeddingBatch::from_raw(Array2::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0))
                .constant(&mut g);
        let cfg = LixpConfig {
            layernorm_keys: true,
            layernorm_values: true,
            ..LixpConfig::default()
        };
        let b = in_batch(&mut g, &e, &cfg).unwrap();
        for n in g.value(b.keys).row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        for r in g.value(b.values).iter_rows() {
            assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LixpConfig::default().validate().is_ok());
        assert!(LixpConfig {
            alpha: 1.5,
            ..LixpConfig::default()
        }
        .validate()
        .is_err());
        assert!(LixpConfig {
            active_buffer_subset: Some(0),
            ..LixpConfig::default()
        }
        .validate()
        .is_err());
    }
}
