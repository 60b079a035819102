//! Finite-difference verification of every differentiable piece: graph
//! primitives, both base losses, encoders, contextualization under each
//! stop-gradient setting, the combined objective and its variants.
//!
//! Each case draws fresh random inputs per seed, contracts the output with a
//! random weight matrix (so no direction is special), and compares backward
//! gradients against central differences.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{
    finite_difference_grad, max_relative_error, Array2, Graph, NodeId, NORM_EPS,
};
use crate::context::{
    contextualize, self_mask, two_stage_contextualize, ContextBuffer, LixpConfig, StageMap,
    StageMapNodes, TwoStageConfig, ValueHeadKind, Variant,
};
use crate::data::{Embedded, Encoder, EncoderConfig, Nonlinearity};
use crate::error::Result;
use crate::losses::{
    clip_loss, siglip_loss, SigmoidSign, TemperatureCoupling, TemperatureSet, Temperatures,
    WhichTau,
};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::seed;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    /// Worst relative error over checked (non-frozen) inputs and seeds.
    pub max_rel_error: f64,
    /// Frozen inputs got exactly zero gradient yet nonzero numeric
    /// sensitivity, on every seed. Vacuously true without frozen inputs.
    pub frozen_ok: bool,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE && self.frozen_ok
    }
}

pub type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync;
type Inputs = dyn Fn(&mut crate::seed::Rng) -> Vec<Array2> + Sync;

struct Case {
    name: String,
    inputs: Box<Inputs>,
    frozen: Vec<bool>,
    build: Box<Build>,
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2 {
    Array2::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2 {
    Array2::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `sum(W ⊙ x)` with a fixed pseudo-random `W` depending only on the shape.
fn contract(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (r, c) = g.value(x).shape();
    let w = Array2::from_fn(r, c, |i, j| ((i * 7 + j * 13 + 3) as f64 * 0.731).sin());
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn value_of(build: &Build, inputs: &[Array2]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.constant(a.clone())).collect();
    build(&mut g, &ids).map_or(f64::NAN, |l| g.value(l).data()[0])
}

/// Returns (max relative error over unfrozen inputs, frozen law holds).
pub fn check_gradients(inputs: &[Array2], frozen: &[bool], build: &Build) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.param(a.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Array2> = ids.iter().map(|&id| g.grad(id).clone()).collect();
    let numeric = finite_difference_grad(|ps| value_of(build, ps), inputs, STEP);
    let mut checked_a = Vec::new();
    let mut checked_n = Vec::new();
    let mut frozen_ok = true;
    for (i, (a, n)) in analytic.into_iter().zip(numeric).enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            let zero = a.data().iter().all(|&x| x == 0.0);
            let sensitive = n.data().iter().any(|&x| x.abs() > 1e-8);
            frozen_ok &= zero && sensitive;
        } else {
            checked_a.push(a);
            checked_n.push(n);
        }
    }
    Ok((max_relative_error(&checked_a, &checked_n), frozen_ok))
}

/// Gradients of a whole [`Model`] objective w.r.t. every stored parameter.
pub fn check_model(
    model: &Model,
    images: &Array2,
    texts: &Array2,
    lixp: &LixpConfig,
) -> Result<f64> {
    let loss_value = |store: &ParamStore| -> Result<(f64, Vec<Array2>)> {
        let mut m = model.clone();
        m.store = store.clone();
        let mut g = Graph::new();
        let nodes = m.register(&mut g);
        let (terms, _) = m.loss(
            &mut g,
            &nodes,
            images,
            texts,
            None,
            None,
            lixp,
            &mut seed::rng(0),
        )?;
        let v = g.value(terms.total).data()[0];
        g.backward(terms.total)?;
        Ok((
            v,
            nodes
                .params
                .as_slice()
                .iter()
                .map(|&n| g.grad(n).clone())
                .collect(),
        ))
    };
    let (_, analytic) = loss_value(&model.store)?;
    let numeric = finite_difference_grad(
        |ps| {
            let mut store = model.store.clone();
            store.set_values(ps).expect("same shapes");
            loss_value(&store).map_or(f64::NAN, |(v, _)| v)
        },
        &model.store.values(),
        STEP,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

fn unary(
    name: &str,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    op: fn(&mut Graph, NodeId) -> Result<NodeId>,
) -> Case {
    Case {
        name: name.into(),
        inputs: Box::new(move |r| vec![uniform(r, rows, cols, lo, hi)]),
        frozen: vec![],
        build: Box::new(move |g, x| {
            let y = op(g, x[0])?;
            contract(g, y)
        }),
    }
}

fn binary(
    name: &str,
    shapes: [(usize, usize); 2],
    op: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Case {
    Case {
        name: name.into(),
        inputs: Box::new(move |r| {
            vec![
                normal(r, shapes[0].0, shapes[0].1),
                normal(r, shapes[1].0, shapes[1].1),
            ]
        }),
        frozen: vec![],
        build: Box::new(move |g, x| {
            let y = op(g, x[0], x[1])?;
            contract(g, y)
        }),
    }
}

fn primitive_cases() -> Vec<Case> {
    vec![
        binary("matmul", [(3, 4), (4, 2)], |g, a, b| Ok(g.matmul(a, b)?)),
        binary(
            "matmul_t",
            [(3, 4), (5, 4)],
            |g, a, b| Ok(g.matmul_t(a, b)?),
        ),
        unary("transpose", 3, 5, -2.0, 2.0, |g, a| Ok(g.transpose(a))),
        unary("row_normalize", 4, 3, -2.0, 2.0, |g, a| {
            Ok(g.row_normalize(a, NORM_EPS)?)
        }),
        unary("masked_softmax", 4, 4, -3.0, 3.0, |g, a| {
            Ok(g.masked_softmax(a, &self_mask(4))?)
        }),
        unary("log_softmax_rows", 3, 5, -3.0, 3.0, |g, a| {
            Ok(g.log_softmax_rows(a)?)
        }),
        unary("layer_norm_rows", 4, 5, -2.0, 2.0, |g, a| {
            Ok(g.layer_norm_rows(a, 1e-5)?)
        }),
        unary("exp", 3, 3, -2.0, 2.0, |g, a| Ok(g.exp(a))),
        unary("log", 3, 3, 0.2, 3.0, |g, a| Ok(g.log(a)?)),
        unary("log1p_exp", 3, 3, -6.0, 6.0, |g, a| Ok(g.log1p_exp(a))),
        unary("tanh", 3, 3, -2.0, 2.0, |g, a| Ok(g.tanh(a))),
        unary("relu", 3, 3, -2.0, 2.0, |g, a| Ok(g.relu(a))),
        unary("negate", 3, 3, -2.0, 2.0, |g, a| Ok(g.neg(a))),
        unary("scale", 3, 3, -2.0, 2.0, |g, a| Ok(g.scale(a, -1.7))),
        unary("mean", 3, 4, -2.0, 2.0, |g, a| Ok(g.mean(a)?)),
        unary("select_rows", 4, 3, -2.0, 2.0, |g, a| {
            Ok(g.select_rows(a, &[2, 0, 2, 3])?)
        }),
        binary("add", [(3, 4), (3, 4)], |g, a, b| Ok(g.add(a, b)?)),
        binary("sub", [(3, 4), (3, 4)], |g, a, b| Ok(g.sub(a, b)?)),
        binary("mul", [(3, 4), (3, 4)], |g, a, b| Ok(g.mul(a, b)?)),
        binary("mul_scalar", [(3, 4), (1, 1)], |g, a, b| {
            Ok(g.mul_scalar(a, b)?)
        }),
        binary("add_scalar", [(3, 4), (1, 1)], |g, a, b| {
            Ok(g.add_scalar(a, b)?)
        }),
        binary("add_row_bias", [(3, 4), (1, 4)], |g, a, b| {
            Ok(g.add_row_bias(a, b)?)
        }),
        binary("concat_rows", [(2, 3), (3, 3)], |g, a, b| {
            Ok(g.concat_rows(&[a, b])?)
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    let embed_inputs = |r: &mut crate::seed::Rng| {
        vec![
            normal(r, 8, 16),
            normal(r, 8, 16),
            Array2::scalar(r.random_range(0.0..3.0)),
            Array2::scalar(r.random_range(-12.0..2.0)),
        ]
    };
    let build = |loss: fn(&mut Graph, &Embedded, &Embedded, &Temperatures) -> Result<NodeId>| -> Box<Build> {
        Box::new(move |g: &mut Graph, x: &[NodeId]| {
            let img = Embedded::from_raw(g, x[0])?;
            let txt = Embedded::from_raw(g, x[1])?;
            let zero = g.constant(Array2::scalar(0.0));
            let t = Temperatures {
                log_tau1: x[2],
                log_tau2: zero,
                log_tau_ctx: zero,
                bias: x[3],
            };
            loss(g, &img, &txt, &t)
        })
    };
    vec![
        Case {
            name: "clip_loss".into(),
            inputs: Box::new(embed_inputs),
            frozen: vec![],
            build: build(|g, i, t, tp| clip_loss(g, i, t, tp, WhichTau::Tau1)),
        },
        Case {
            name: "siglip_loss".into(),
            inputs: Box::new(embed_inputs),
            frozen: vec![],
            build: build(|g, i, t, tp| {
                siglip_loss(g, i, t, tp, WhichTau::Tau1, SigmoidSign::Standard)
            }),
        },
        Case {
            name: "siglip_loss_as_printed".into(),
            inputs: Box::new(embed_inputs),
            frozen: vec![],
            build: build(|g, i, t, tp| {
                siglip_loss(
                    g,
                    i,
                    t,
                    tp,
                    WhichTau::Tau1,
                    SigmoidSign::BiasInsideIndicator,
                )
            }),
        },
    ]
}

fn encoder_case(nonlinearity: Nonlinearity) -> Case {
    Case {
        name: format!("encoder_{}", nonlinearity.as_str()),
        inputs: Box::new(move |r| {
            let mut store = ParamStore::new();
            let cfg = EncoderConfig {
                input_dim: 5,
                hidden_dims: vec![6, 4],
                output_dim: 3,
                nonlinearity,
                seed: r.random(),
            };
            Encoder::new(cfg, &mut store, "enc").expect("valid config");
            let mut v = vec![normal(r, 4, 5)];
            v.extend(store.values());
            v
        }),
        frozen: vec![],
        build: Box::new(move |g, x| {
            let mut store = ParamStore::new();
            let enc = Encoder::new(
                EncoderConfig {
                    input_dim: 5,
                    hidden_dims: vec![6, 4],
                    output_dim: 3,
                    nonlinearity,
                    seed: 0,
                },
                &mut store,
                "enc",
            )?;
            // rebind the stored parameters to the checked leaves
            let nodes = crate::params::ParamNodes::from_ids(x[1..].to_vec());
            let e = enc.encode(g, &nodes, x[0])?;
            contract(g, e.normalized)
        }),
    }
}

/// Queries (raw), keys (normalized in-graph), values, log τ_ctx.
fn contextualize_case(keys_grad: bool, values_grad: bool) -> Case {
    Case {
        name: format!("contextualize_k{}_v{}", keys_grad as u8, values_grad as u8),
        inputs: Box::new(|r| {
            vec![
                normal(r, 6, 8),
                normal(r, 6, 8),
                normal(r, 6, 8),
                Array2::scalar(r.random_range(-1.5..1.0)),
            ]
        }),
        frozen: vec![false, !keys_grad, !values_grad, false],
        build: Box::new(move |g, x| {
            let q = Embedded::from_raw(g, x[0])?;
            let keys = g.row_normalize(x[1], NORM_EPS)?;
            let buf = ContextBuffer {
                keys,
                values: x[2],
                mask: self_mask(6),
                grad_through_keys: keys_grad,
                grad_through_values: values_grad,
            };
            let c = contextualize(g, &q, &buf, x[3], true)?;
            let raw = contract(g, c.output.raw)?;
            let norm = contract(g, c.output.normalized)?;
            Ok(g.add(raw, norm)?)
        }),
    }
}

fn two_stage_case() -> Case {
    Case {
        name: "two_stage_linear_map".into(),
        inputs: Box::new(|r| {
            let mut w = Array2::identity(5);
            for (a, b) in w.data_mut().iter_mut().zip(normal(r, 5, 5).data()) {
                *a += 0.3 * b;
            }
            vec![
                normal(r, 6, 5),
                w,
                normal(r, 1, 5).map(|v| 0.2 * v),
                Array2::scalar(r.random_range(-1.0..0.5)),
            ]
        }),
        frozen: vec![],
        build: Box::new(|g, x| {
            let q = Embedded::from_raw(g, x[0])?;
            let buf = ContextBuffer {
                keys: q.normalized,
                values: q.raw,
                mask: self_mask(6),
                grad_through_keys: true,
                grad_through_values: true,
            };
            let cfg = TwoStageConfig {
                stages: 2,
                map: StageMap::Linear,
                rebuild_buffer: false,
            };
            let map = StageMapNodes::Linear {
                weight: x[1],
                bias: x[2],
            };
            let out = two_stage_contextualize(g, &q, &buf, x[3], true, &cfg, map)?;
            contract(g, out.normalized)
        }),
    }
}

fn model_variants() -> Vec<(String, LixpConfig)> {
    let base = LixpConfig::default();
    let mut v = vec![("lixp_loss".to_string(), base.clone())];
    let mut add = |name: &str, cfg: LixpConfig| v.push((name.to_string(), cfg));
    add(
        "lixp_loss_clip",
        LixpConfig {
            base_loss: crate::losses::BaseLoss::Clip,
            ..base.clone()
        },
    );
    add(
        "lixp_residual",
        LixpConfig {
            variant: Variant::Residual,
            ..base.clone()
        },
    );
    add(
        "lixp_multimodal_values",
        LixpConfig {
            variant: Variant::MultimodalValues,
            ..base.clone()
        },
    );
    add(
        "lixp_two_stage",
        LixpConfig {
            variant: Variant::TwoStage,
            ..base.clone()
        },
    );
    add(
        "lixp_unnormalized_qk",
        LixpConfig {
            qk_normalized: false,
            ..base.clone()
        },
    );
    add(
        "lixp_layernorm_kv",
        LixpConfig {
            layernorm_keys: true,
            layernorm_values: true,
            ..base.clone()
        },
    );
    add(
        "value_head_linear",
        LixpConfig {
            value_head: ValueHeadKind::Linear,
            ..base.clone()
        },
    );
    add(
        "value_head_mlp2",
        LixpConfig {
            value_head: ValueHeadKind::Mlp2,
            ..base.clone()
        },
    );
    add(
        "value_head_mlp3",
        LixpConfig {
            value_head: ValueHeadKind::Mlp3,
            ..base.clone()
        },
    );
    add(
        "lixp_all_shared_temps",
        LixpConfig {
            temperature_coupling: TemperatureCoupling::AllShared,
            ..base.clone()
        },
    );
    v
}

fn small_model(cfg: &LixpConfig, rng: &mut impl Rng) -> Result<Model> {
    let enc = |input_dim, seed| EncoderConfig {
        input_dim,
        hidden_dims: vec![5],
        output_dim: 4,
        nonlinearity: Nonlinearity::Tanh,
        seed,
    };
    let mut model = Model::new(
        ModelConfig {
            image: enc(6, rng.random()),
            text: enc(5, rng.random()),
            temperatures: TemperatureSet {
                log_tau1: rng.random_range(0.5..2.5),
                log_tau2: rng.random_range(0.5..2.5),
                log_tau_ctx: rng.random_range(-1.0..1.0),
                bias: rng.random_range(-6.0..0.0),
            },
        },
        cfg,
    )?;
    // move any identity-initialized map off its special point
    if let Some(p) = model.stage_map {
        let w = model.store.value_mut(p.weight);
        for (i, a) in w.data_mut().iter_mut().enumerate() {
            *a += 0.2 * ((i as f64) * 1.3).sin();
        }
    }
    Ok(model)
}

/// Runs every case for `seeds` seeds. Cases are independent and run on the
/// rayon pool; outcomes come back in a fixed order.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckOutcome>> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases());
    cases.push(encoder_case(Nonlinearity::Tanh));
    cases.push(encoder_case(Nonlinearity::Relu));
    for k in [true, false] {
        for v in [true, false] {
            cases.push(contextualize_case(k, v));
        }
    }
    cases.push(two_stage_case());

    let mut outcomes: Vec<CheckOutcome> = cases
        .par_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            let mut frozen_ok = true;
            for s in 0..seeds {
                let mut rng = seed::derived_rng(s as u64, seed::purpose::INIT, 77);
                let inputs = (case.inputs)(&mut rng);
                let (err, ok) = check_gradients(&inputs, &case.frozen, case.build.as_ref())?;
                worst = worst.max(err);
                frozen_ok &= ok;
            }
            Ok(CheckOutcome {
                name: case.name.clone(),
                seeds,
                max_rel_error: worst,
                frozen_ok,
            })
        })
        .collect::<Result<_>>()?;

    let model_outcomes: Vec<CheckOutcome> = model_variants()
        .par_iter()
        .map(|(name, cfg)| {
            let mut worst: f64 = 0.0;
            for s in 0..seeds {
                let mut rng = seed::derived_rng(s as u64, seed::purpose::INIT, 78);
                let model = small_model(cfg, &mut rng)?;
                let images = normal(&mut rng, 6, 6);
                let texts = normal(&mut rng, 6, 5);
                worst = worst.max(check_model(&model, &images, &texts, cfg)?);
            }
            Ok(CheckOutcome {
                name: name.clone(),
                seeds,
                max_rel_error: worst,
                frozen_ok: true,
            })
        })
        .collect::<Result<_>>()?;
    outcomes.extend(model_outcomes);
    Ok(outcomes)
}
