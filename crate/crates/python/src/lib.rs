//! Python bindings: losses with gradients, the few-shot classifiers, episodic
//! evaluation, training from a config file and the gradient check suite.
//!
//! Matrices cross the boundary as lists of rows of floats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lixp::adapters::{predict, Classifier, SupportSet};
use lixp::context::lixp_loss_in_batch;
use lixp::eval::{run_episodes as run, EpisodePools, EpisodeSpec};
use lixp::format::{import_embeddings, write_checkpoint};
use lixp::losses::{clip_loss as clip, siglip_loss as siglip, BaseLoss, SigmoidSign, WhichTau};
use lixp::{Array2, Embedded, Experiment, Graph, LixpConfig, TemperatureSet};

type Matrix = Vec<Vec<f64>>;

fn py<T>(r: lixp::Result<T>) -> PyResult<T> {
    r.map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array(rows: &[Vec<f64>]) -> PyResult<Array2> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix has no rows"));
    }
    Array2::from_rows(rows).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(a: &Array2) -> Matrix {
    a.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Value of a pairwise loss plus its gradients w.r.t. the raw image and
/// text rows.
fn loss_with_grads(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    temps: TemperatureSet,
    build: impl Fn(
        &mut Graph,
        &Embedded,
        &Embedded,
        &lixp::losses::Temperatures,
    ) -> lixp::Result<lixp::NodeId>,
) -> PyResult<(f64, Matrix, Matrix)> {
    let mut g = Graph::new();
    let (x, t) = (g.param(array(images)?), g.param(array(texts)?));
    let xe = py(Embedded::from_raw(&mut g, x))?;
    let te = py(Embedded::from_raw(&mut g, t))?;
    let temps = temps.constants(&mut g);
    let loss = py(build(&mut g, &xe, &te, &temps))?;
    let value = g.value(loss).data()[0];
    py(g.backward(loss).map_err(Into::into))?;
    Ok((value, matrix(g.grad(x)), matrix(g.grad(t))))
}

/// Symmetric softmax contrastive loss at temperature `exp(log_tau)`.
/// Returns `(loss, d_images, d_texts)`.
#[pyfunction]
#[pyo3(signature = (images, texts, log_tau = 10f64.ln()))]
fn clip_loss(images: Matrix, texts: Matrix, log_tau: f64) -> PyResult<(f64, Matrix, Matrix)> {
    let temps = TemperatureSet {
        log_tau1: log_tau,
        ..TemperatureSet::default()
    };
    loss_with_grads(&images, &texts, temps, |g, x, t, temps| {
        clip(g, x, t, temps, WhichTau::Tau1)
    })
}

/// Pairwise sigmoid loss. Returns `(loss, d_images, d_texts)`.
#[pyfunction]
#[pyo3(signature = (images, texts, log_tau = 10f64.ln(), bias = -10.0))]
fn siglip_loss(
    images: Matrix,
    texts: Matrix,
    log_tau: f64,
    bias: f64,
) -> PyResult<(f64, Matrix, Matrix)> {
    let temps = TemperatureSet {
        log_tau1: log_tau,
        bias,
        ..TemperatureSet::default()
    };
    loss_with_grads(&images, &texts, temps, |g, x, t, temps| {
        siglip(g, x, t, temps, WhichTau::Tau1, SigmoidSign::Standard)
    })
}

/// Context-aware objective with the default in-batch, self-masked buffer.
/// Returns `(total, base_term, ctx_term)`.
#[pyfunction]
#[pyo3(signature = (images, texts, alpha = 0.9, base = "siglip", log_tau1 = 10f64.ln(), log_tau2 = 10f64.ln(), log_tau_ctx = 0.0, bias = -10.0))]
#[allow(clippy::too_many_arguments)]
fn lixp_loss(
    images: Matrix,
    texts: Matrix,
    alpha: f64,
    base: &str,
    log_tau1: f64,
    log_tau2: f64,
    log_tau_ctx: f64,
    bias: f64,
) -> PyResult<(f64, f64, f64)> {
    let base_loss = match base {
        "clip" => BaseLoss::Clip,
        "siglip" => BaseLoss::Siglip,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown base loss {other:?}"
            )))
        }
    };
    let cfg = LixpConfig {
        alpha,
        base_loss,
        ..LixpConfig::default()
    };
    py(cfg.validate())?;
    let mut g = Graph::new();
    let (x, t) = (g.constant(array(&images)?), g.constant(array(&texts)?));
    let xe = py(Embedded::from_raw(&mut g, x))?;
    let te = py(Embedded::from_raw(&mut g, t))?;
    let temps = TemperatureSet {
        log_tau1,
        log_tau2,
        log_tau_ctx,
        bias,
    }
    .constants(&mut g);
    let terms = py(lixp_loss_in_batch(
        &mut g,
        &xe,
        &te,
        &temps,
        &cfg,
        &mut lixp::seed::rng(0),
    ))?;
    Ok((
        g.value(terms.total).data()[0],
        terms.base_term,
        terms.ctx_term.unwrap_or(f64::NAN),
    ))
}

/// Predicted class per test row. `method` is one of the classifier names;
/// support rows and labels are required for everything but `zero_shot`.
#[pyfunction]
#[pyo3(signature = (method, test, texts, support = None, support_labels = None, seed = 0))]
fn classify(
    method: &str,
    test: Matrix,
    texts: Matrix,
    support: Option<Matrix>,
    support_labels: Option<Vec<usize>>,
    seed: u64,
) -> PyResult<Vec<usize>> {
    let classifier = py(Classifier::from_name(method))?;
    let texts = array(&texts)?.row_normalized(lixp::autodiff::NORM_EPS);
    let test = array(&test)?.row_normalized(lixp::autodiff::NORM_EPS);
    let spt = match (support, support_labels) {
        (Some(s), Some(l)) => {
            let s = array(&s)?.row_normalized(lixp::autodiff::NORM_EPS);
            Some(py(SupportSet::new(&s, &l, texts.rows()))?)
        }
        (None, None) => None,
        _ => {
            return Err(PyValueError::new_err(
                "support and support_labels go together",
            ))
        }
    };
    if classifier.needs_support() && spt.is_none() {
        return Err(PyValueError::new_err(format!(
            "{method} needs support rows"
        )));
    }
    Ok(predict(&py(classifier.logits(
        &test,
        spt.as_ref(),
        &texts,
        seed,
    ))?))
}

fn rows_to_dicts<'py>(
    py_: Python<'py>,
    table: &lixp::eval::ResultTable,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    table
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py_);
            d.set_item("classifier", &r.classifier)?;
            d.set_item("shots", r.shots)?;
            d.set_item("episode", r.episode)?;
            d.set_item("num_classes", r.num_classes)?;
            d.set_item("accuracy", r.accuracy)?;
            Ok(d)
        })
        .collect()
}

/// Seeded episodic evaluation over in-memory pools; one dict per
/// (classifier, shots, episode).
#[pyfunction]
#[pyo3(signature = (support, support_labels, test, test_labels, texts, shots, episodes = 5, seed = 0, classifiers = None))]
#[allow(clippy::too_many_arguments)]
fn run_episodes<'py>(
    py_: Python<'py>,
    support: Matrix,
    support_labels: Vec<usize>,
    test: Matrix,
    test_labels: Vec<usize>,
    texts: Matrix,
    shots: Vec<usize>,
    episodes: usize,
    seed: u64,
    classifiers: Option<Vec<String>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let pools = py(EpisodePools::new(
        &array(&support)?,
        support_labels,
        &array(&test)?,
        test_labels,
        &array(&texts)?,
    ))?;
    let mut spec = EpisodeSpec {
        shots,
        num_episodes: episodes,
        seed,
        ..EpisodeSpec::default()
    };
    if let Some(names) = classifiers {
        spec.classifiers = py(names.iter().map(|n| Classifier::from_name(n)).collect())?;
    }
    let table = py_.detach(|| run(&pools, &spec));
    rows_to_dicts(py_, &py(table)?)
}

/// Rows and labels of a LIXPEMB1 file; labels are `None` without a label block.
#[pyfunction]
fn load_embeddings(path: &str) -> PyResult<(Matrix, Option<Vec<i32>>)> {
    let f = py(import_embeddings(path))?;
    Ok((matrix(&f.embeddings), f.labels))
}

/// Train from a key=value experiment config; optionally write the
/// checkpoint. Returns the training log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (config, checkpoint = None))]
fn train<'py>(
    py_: Python<'py>,
    config: &str,
    checkpoint: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let e = py(Experiment::load(config))?;
    let (model, log) = py(py_.detach(|| e.run()))?;
    if let Some(path) = checkpoint {
        py(write_checkpoint(&model.store, path))?;
    }
    log.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py_);
            d.set_item("step", r.step)?;
            d.set_item("base_term", r.base_term)?;
            d.set_item("ctx_term", r.ctx_term)?;
            d.set_item("total", r.total)?;
            d.set_item("tau1", r.tau1)?;
            d.set_item("tau2", r.tau2)?;
            d.set_item("tau_ctx", r.tau_ctx)?;
            d.set_item("bias", r.bias)?;
            d.set_item("grad_norm", r.grad_norm)?;
            Ok(d)
        })
        .collect()
}

/// Finite-difference check of every differentiable operation:
/// `[(name, max_rel_error, passed)]`.
#[pyfunction]
#[pyo3(signature = (seeds = 20))]
fn gradcheck(py_: Python<'_>, seeds: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let outcomes = py(py_.detach(|| lixp::gradcheck::run_suite(seeds)))?;
    Ok(outcomes
        .into_iter()
        .map(|o| {
            let passed = o.passed();
            (o.name, o.max_rel_error, passed)
        })
        .collect())
}

#[pymodule]
fn lixp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(siglip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lixp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(run_episodes, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("CLASSIFIERS", Classifier::NAMES.to_vec())?;
    Ok(())
}
