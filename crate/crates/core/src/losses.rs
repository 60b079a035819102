//! Softmax (CLIP) and pairwise sigmoid (SigLIP) image-text objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Graph, NodeId};
use crate::data::Embedded;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamNodes, ParamStore};

/// Log-parameterized temperatures and the sigmoid bias. Realized
/// temperatures are `exp` of the stored values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSet {
    pub log_tau1: f64,
    pub log_tau2: f64,
    pub log_tau_ctx: f64,
    pub bias: f64,
}

impl Default for TemperatureSet {
    /// τ1 = τ2 = 10, τ_ctx = 1, b = −10.
    fn default() -> Self {
        Self {
            log_tau1: 10f64.ln(),
            log_tau2: 10f64.ln(),
            log_tau_ctx: 0.0,
            bias: -10.0,
        }
    }
}

impl TemperatureSet {
    pub fn tau1(&self) -> f64 {
        self.log_tau1.exp()
    }

    pub fn tau2(&self) -> f64 {
        self.log_tau2.exp()
    }

    pub fn tau_ctx(&self) -> f64 {
        self.log_tau_ctx.exp()
    }

    /// All four as independent learnable leaves.
    pub fn params(&self, g: &mut Graph) -> Temperatures {
        Temperatures {
            log_tau1: g.param(Array2::scalar(self.log_tau1)),
            log_tau2: g.param(Array2::scalar(self.log_tau2)),
            log_tau_ctx: g.param(Array2::scalar(self.log_tau_ctx)),
            bias: g.param(Array2::scalar(self.bias)),
        }
    }

    pub fn constants(&self, g: &mut Graph) -> Temperatures {
        Temperatures {
            log_tau1: g.constant(Array2::scalar(self.log_tau1)),
            log_tau2: g.constant(Array2::scalar(self.log_tau2)),
            log_tau_ctx: g.constant(Array2::scalar(self.log_tau_ctx)),
            bias: g.constant(Array2::scalar(self.bias)),
        }
    }
}

/// Graph handles for the temperatures. Two fields may share a node, which is
/// how temperature coupling is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Temperatures {
    pub log_tau1: NodeId,
    pub log_tau2: NodeId,
    pub log_tau_ctx: NodeId,
    pub bias: NodeId,
}

impl Temperatures {
    pub fn select(&self, which: WhichTau) -> NodeId {
        match which {
            WhichTau::Tau1 => self.log_tau1,
            WhichTau::Tau2 => self.log_tau2,
        }
    }

    pub fn values(&self, g: &Graph) -> TemperatureSet {
        let v = |id| g.value(id).data()[0];
        TemperatureSet {
            log_tau1: v(self.log_tau1),
            log_tau2: v(self.log_tau2),
            log_tau_ctx: v(self.log_tau_ctx),
            bias: v(self.bias),
        }
    }
}

/// Which temperatures share a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureCoupling {
    /// τ1, τ2, τ_ctx all independent.
    #[default]
    Independent,
    /// One parameter for τ1, τ2 and τ_ctx.
    AllShared,
    /// τ2 and τ_ctx share a parameter.
    ContextShared,
    /// τ_ctx fixed at the given value (not learned).
    FrozenContext(f64),
}

/// Parameter ids of the temperature block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureParams {
    pub log_tau1: ParamId,
    pub log_tau2: Option<ParamId>,
    pub log_tau_ctx: Option<ParamId>,
    pub bias: ParamId,
    pub coupling: TemperatureCoupling,
}

impl TemperatureParams {
    /// Registers the parameters needed by `coupling`. Shared temperatures
    /// take their initial value from `log_tau1` (all shared) or `log_tau2`
    /// (context shared).
    pub fn new(
        store: &mut ParamStore,
        init: &TemperatureSet,
        coupling: TemperatureCoupling,
    ) -> Self {
        let log_tau1 = store.push("temp.log_tau1", Array2::scalar(init.log_tau1), false);
        let (log_tau2, log_tau_ctx) = match coupling {
            TemperatureCoupling::Independent => (
                Some(store.push("temp.log_tau2", Array2::scalar(init.log_tau2), false)),
                Some(store.push("temp.log_tau_ctx", Array2::scalar(init.log_tau_ctx), false)),
            ),
            TemperatureCoupling::AllShared => (None, None),
            TemperatureCoupling::ContextShared => (
                Some(store.push("temp.log_tau2", Array2::scalar(init.log_tau2), false)),
                None,
            ),
            TemperatureCoupling::FrozenContext(_) => (
                Some(store.push("temp.log_tau2", Array2::scalar(init.log_tau2), false)),
                None,
            ),
        };
        let bias = store.push("temp.bias", Array2::scalar(init.bias), false);
        Self {
            log_tau1,
            log_tau2,
            log_tau_ctx,
            bias,
            coupling,
        }
    }

    pub fn nodes(&self, g: &mut Graph, nodes: &ParamNodes) -> Temperatures {
        let t1 = nodes[self.log_tau1];
        let t2 = self.log_tau2.map_or(t1, |p| nodes[p]);
        let ctx = match self.coupling {
            TemperatureCoupling::Independent => nodes[self.log_tau_ctx.expect("registered")],
            TemperatureCoupling::AllShared => t1,
            TemperatureCoupling::ContextShared => t2,
            TemperatureCoupling::FrozenContext(tau) => g.constant(Array2::scalar(tau.ln())),
        };
        Temperatures {
            log_tau1: t1,
            log_tau2: t2,
            log_tau_ctx: ctx,
            bias: nodes[self.bias],
        }
    }

    pub fn values(&self, store: &ParamStore) -> TemperatureSet {
        let v = |p: ParamId| store.value(p).data()[0];
        let t1 = v(self.log_tau1);
        let t2 = self.log_tau2.map_or(t1, v);
        let ctx = match self.coupling {
            TemperatureCoupling::Independent => v(self.log_tau_ctx.expect("registered")),
            TemperatureCoupling::AllShared => t1,
            TemperatureCoupling::ContextShared => t2,
            TemperatureCoupling::FrozenContext(tau) => tau.ln(),
        };
        TemperatureSet {
            log_tau1: t1,
            log_tau2: t2,
            log_tau_ctx: ctx,
            bias: v(self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichTau {
    Tau1,
    Tau2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Clip,
    #[default]
    Siglip,
}

/// Sign convention of the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidSign {
    /// `−log σ(z·(τ x·t + b))`, with `z = +1` on matched pairs and `−1`
    /// otherwise. Small negative bias suppresses the negative-pair loss.
    #[default]
    Standard,
    /// `log(1 + exp(z·(−τ x·t + b)))`, the bias inside the signed product.
    BiasInsideIndicator,
}

fn check_pair(g: &Graph, op: &'static str, images: &Embedded, texts: &Embedded) -> Result<usize> {
    let (bi, di) = g.value(images.normalized).shape();
    let (bt, dt) = g.value(texts.normalized).shape();
    if bi != bt || di != dt {
        return Err(Error::dim(op, format!("images {bi}x{di}, texts {bt}x{dt}")));
    }
    if bi == 0 {
        return Err(Error::EmptyBatch(op));
    }
    Ok(bi)
}

/// Scaled similarity matrix `τ · X Tᵀ`.
fn scaled_similarities(
    g: &mut Graph,
    images: &Embedded,
    texts: &Embedded,
    log_tau: NodeId,
) -> Result<NodeId> {
    let sims = g.matmul_t(images.normalized, texts.normalized)?;
    let tau = g.exp(log_tau);
    Ok(g.mul_scalar(sims, tau)?)
}

/// Symmetric softmax cross-entropy over image→text and text→image,
/// averaged over `2|B|` terms.
pub fn clip_loss(
    g: &mut Graph,
    images: &Embedded,
    texts: &Embedded,
    temps: &Temperatures,
    which: WhichTau,
) -> Result<NodeId> {
    let b = check_pair(g, "clip_loss", images, texts)?;
    let logits = scaled_similarities(g, images, texts, temps.select(which))?;
    let eye = g.constant(Array2::identity(b));
    let row_lp = g.log_softmax_rows(logits)?;
    let logits_t = g.transpose(logits);
    let col_lp = g.log_softmax_rows(logits_t)?;
    let row_diag = g.mul(row_lp, eye)?;
    let col_diag = g.mul(col_lp, eye)?;
    let both = g.add(row_diag, col_diag)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / (2.0 * b as f64)))
}

/// Pairwise sigmoid loss, `(1/|B|) Σ_{i,j} log(1 + e^{−z_ij (τ x_i·t_j + b)})`
/// under the standard sign.
pub fn siglip_loss(
    g: &mut Graph,
    images: &Embedded,
    texts: &Embedded,
    temps: &Temperatures,
    which: WhichTau,
    sign: SigmoidSign,
) -> Result<NodeId> {
    let b = check_pair(g, "siglip_loss", images, texts)?;
    let z = Array2::from_fn(b, b, |i, j| if i == j { 1.0 } else { -1.0 });
    let exponent = match sign {
        SigmoidSign::Standard => {
            let logits = scaled_similarities(g, images, texts, temps.select(which))?;
            let shifted = g.add_scalar(logits, temps.bias)?;
            let neg_z = g.constant(z.map(|v| -v));
            g.mul(shifted, neg_z)?
        }
        SigmoidSign::BiasInsideIndicator => {
            let logits = scaled_similarities(g, images, texts, temps.select(which))?;
            let neg = g.neg(logits);
            let shifted = g.add_scalar(neg, temps.bias)?;
            let z = g.constant(z);
            g.mul(shifted, z)?
        }
    };
    let terms = g.log1p_exp(exponent);
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / b as f64))
}

pub fn base_loss(
    g: &mut Graph,
    kind: BaseLoss,
    images: &Embedded,
    texts: &Embedded,
    temps: &Temperatures,
    which: WhichTau,
    sign: SigmoidSign,
) -> Result<NodeId> {
    match kind {
        BaseLoss::Clip => clip_loss(g, images, texts, temps, which),
        BaseLoss::Siglip => siglip_loss(g, images, texts, temps, which, sign),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log1p_exp;
    use crate::data::EmbeddingBatch;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::from_raw(Array2::from_rows(rows).unwrap())
    }

    fn temps_with(log_tau: f64, bias: f64) -> TemperatureSet {
        TemperatureSet {
            log_tau1: log_tau,
            log_tau2: log_tau,
            log_tau_ctx: 0.0,
            bias,
        }
    }

    #[test]
    fn clip_single_pair_is_zero() {
        let mut g = Graph::new();
        let x = batch(&[&[0.3, 0.4]]).constant(&mut g);
        let t = batch(&[&[-1.0, 2.0]]).constant(&mut g);
        let temps = TemperatureSet::default().constants(&mut g);
        let l = clip_loss(&mut g, &x, &t, &temps, WhichTau::Tau1).unwrap();
        assert_eq!(g.scalar(l), Some(0.0));
    }

    #[test]
    fn clip_orthogonal_pairs_hand_value() {
        let mut g = Graph::new();
        let x = batch(&[&[1.0, 0.0], &[0.0, 1.0]]).constant(&mut g);
        let t = batch(&[&[1.0, 0.0], &[0.0, 1.0]]).constant(&mut g);
        let temps = temps_with(0.0, 0.0).constants(&mut g);
        let l = clip_loss(&mut g, &x, &t, &temps, WhichTau::Tau1).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((g.scalar(l).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn siglip_single_orthogonal_pair_is_log2() {
        let mut g = Graph::new();
        let x = batch(&[&[1.0, 0.0]]).constant(&mut g);
        let t = batch(&[&[0.0, 1.0]]).constant(&mut g);
        let temps = temps_with(0.0, 0.0).constants(&mut g);
        let l = siglip_loss(
            &mut g,
            &x,
            &t,
            &temps,
            WhichTau::Tau1,
            SigmoidSign::Standard,
        )
        .unwrap();
        assert!((g.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn siglip_large_negative_bias_silences_negatives() {
        let xs = batch(&[&[1.0, 0.2], &[0.1, 1.0], &[-0.5, 0.7]]);
        let ts = batch(&[&[0.9, 0.3], &[0.0, 1.0], &[-0.4, 0.8]]);
        let sims = xs.normalized.matmul_t(&ts.normalized).unwrap();
        let b = -30.0;
        for i in 0..3 {
            for j in 0..3 {
                let s = sims.get(i, j);
                if i == j {
                    assert!(log1p_exp(-(s + b)) > 25.0);
                } else {
                    assert!(log1p_exp(s + b) < 1e-9);
                }
            }
        }
        let mut g = Graph::new();
        let x = xs.constant(&mut g);
        let t = ts.constant(&mut g);
        let temps = temps_with(0.0, b).constants(&mut g);
        let l = siglip_loss(
            &mut g,
            &x,
            &t,
            &temps,
            WhichTau::Tau1,
            SigmoidSign::Standard,
        )
        .unwrap();
        let positives: f64 = (0..3)
            .map(|i| log1p_exp(-(sims.get(i, i) + b)))
            .sum::<f64>()
            / 3.0;
        assert!((g.scalar(l).unwrap() - positives).abs() < 1e-9);
    }

    #[test]
    fn sign_conventions_differ_only_in_bias_placement() {
        let xs = batch(&[&[1.0, 0.2], &[0.1, 1.0]]);
        let ts = batch(&[&[0.9, 0.3], &[0.2, 1.0]]);
        let sims = xs.normalized.matmul_t(&ts.normalized).unwrap();
        let (tau, b) = (2.0f64, -1.5);
        let mut g = Graph::new();
        let x = xs.constant(&mut g);
        let t = ts.constant(&mut g);
        let temps = temps_with(tau.ln(), b).constants(&mut g);
        let l = siglip_loss(
            &mut g,
            &x,
            &t,
            &temps,
            WhichTau::Tau1,
            SigmoidSign::BiasInsideIndicator,
        )
        .unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let z = if i == j { 1.0 } else { -1.0 };
                expected += log1p_exp(z * (-tau * sims.get(i, j) + b));
            }
        }
        assert!((g.scalar(l).unwrap() - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_batches_are_rejected() {
        let mut g = Graph::new();
        let x = EmbeddingBatch::from_raw(Array2::zeros(0, 2)).constant(&mut g);
        let temps = TemperatureSet::default().constants(&mut g);
        assert!(matches!(
            clip_loss(&mut g, &x, &x, &temps, WhichTau::Tau1),
            Err(Error::EmptyBatch(_))
        ));
        let a = batch(&[&[1.0, 0.0]]).constant(&mut g);
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]]).constant(&mut g);
        assert!(matches!(
            siglip_loss(
                &mut g,
                &a,
                &b,
                &temps,
                WhichTau::Tau1,
                SigmoidSign::Standard
            ),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn coupling_shares_nodes() {
        let mut store = ParamStore::new();
        let tp = TemperatureParams::new(
            &mut store,
            &TemperatureSet::default(),
            TemperatureCoupling::AllShared,
        );
        assert_eq!(store.len(), 2);
        let mut g = Graph::new();
        let nodes = store.register(&mut g);
        let t = tp.nodes(&mut g, &nodes);
        assert_eq!(t.log_tau1, t.log_tau2);
        assert_eq!(t.log_tau1, t.log_tau_ctx);

        let mut store = ParamStore::new();
        let tp = TemperatureParams::new(
            &mut store,
            &TemperatureSet::default(),
            TemperatureCoupling::FrozenContext(0.1),
        );
        let mut g = Graph::new();
        let nodes = store.register(&mut g);
        let t = tp.nodes(&mut g, &nodes);
        assert!(!g.requires_grad(t.log_tau_ctx));
        assert!((tp.values(&store).tau_ctx() - 0.1).abs() < 1e-15);
    }
}
