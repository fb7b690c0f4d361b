//! Python bindings: event streams, synthetic data, training, evaluation.

use std::path::PathBuf;

use dsrd_core::evaluation::{self, score_pairs, EvalOptions, MetricReport, Setting, Strategy};
use dsrd_core::graph::{self, chronological_split, inductive_split, NeighborIndex, SplitPlan};
use dsrd_core::network::{Context, Model as CoreModel};
use dsrd_core::synthgen::{self, SynthSpec};
use dsrd_core::trainer::{self, TrainConfig};
use dsrd_core::{checkpoint, retentive, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::GuardExceeded(_)
        | Error::NonFinite { .. }
        | Error::BoundViolation { .. }
        | Error::TapeConsumed
        | Error::NanGradient(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A chronologically sorted event log.
#[pyclass(module = "dsrd")]
struct EventStream {
    inner: graph::EventStream,
}

#[pymethods]
impl EventStream {
    /// Reads `events.csv` (and `node_features.csv` if present) from a
    /// directory, or a single events file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: graph::load_dataset(path).map_err(to_py)?,
        })
    }

    /// Builds a stream from `(src, dst, time)` triples.
    #[staticmethod]
    #[pyo3(signature = (events, num_nodes = None))]
    fn from_triples(events: Vec<(usize, usize, f64)>, num_nodes: Option<usize>) -> PyResult<Self> {
        let n =
            num_nodes.unwrap_or_else(|| events.iter().map(|e| e.0.max(e.1) + 1).max().unwrap_or(0));
        let evs = events
            .into_iter()
            .map(|(src, dst, time)| graph::Event {
                src,
                dst,
                time,
                edge_feat: Vec::new(),
                label: None,
                idx: 0,
            })
            .collect();
        Ok(Self {
            inner: graph::EventStream::new(evs, n, None).map_err(to_py)?,
        })
    }

    /// Writes the dataset files into `dir` and returns their paths.
    fn save(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        graph::write_dataset(&self.inner, dir).map_err(to_py)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    /// `(src, dst, time, label)` for every event, in order.
    fn events(&self) -> Vec<(usize, usize, f64, Option<bool>)> {
        self.inner
            .events()
            .iter()
            .map(|e| (e.src, e.dst, e.time, e.label))
            .collect()
    }

    /// The first `n` events.
    fn truncated(&self, n: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.truncated(n).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "EventStream(events={}, nodes={})",
            self.inner.len(),
            self.inner.num_nodes()
        )
    }
}

#[pyclass(module = "dsrd")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(to_py)?,
        })
    }

    /// A freshly initialized model sized for `stream`.
    #[staticmethod]
    #[pyo3(signature = (stream, config = None))]
    fn initial(stream: &EventStream, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = train_config(config)?;
        let inner = CoreModel::new(cfg.model_config(&stream.inner)).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        checkpoint::to_json(&self.inner).map_err(to_py)
    }

    #[getter]
    fn config_hash(&self) -> String {
        evaluation::config_hash(&self.inner)
    }

    /// Link probabilities for `(u, v, t)` after replaying the first `prefix`
    /// events of `stream`. Each query sees only events strictly before `t`.
    #[pyo3(signature = (stream, prefix, pairs, batch_size = 200))]
    fn score(
        &self,
        py: Python<'_>,
        stream: &EventStream,
        prefix: usize,
        pairs: Vec<(usize, usize, f64)>,
        batch_size: usize,
    ) -> PyResult<Vec<f64>> {
        let (model, s) = (&self.inner, &stream.inner);
        if prefix > s.len() {
            return Err(PyValueError::new_err(format!(
                "prefix {prefix} exceeds {} events",
                s.len()
            )));
        }
        py.detach(|| {
            let index = NeighborIndex::build(s);
            let mut core = model.new_core(s.num_nodes());
            evaluation::replay(
                model,
                &mut core,
                s,
                &index,
                &s.events()[..prefix],
                batch_size,
            )?;
            score_pairs(
                model,
                &Context {
                    stream: s,
                    index: &index,
                    core: &core,
                },
                &pairs,
            )
        })
        .map_err(to_py)
    }

    /// Decay curves of every layer and head, as CSV text.
    #[pyo3(signature = (max_steps = 50, dt_max = 100.0, dt_points = 51))]
    fn decay_curves(&self, max_steps: usize, dt_max: f64, dt_points: usize) -> PyResult<String> {
        if dt_points < 2 || !(dt_max > 0.0) {
            return Err(PyValueError::new_err("need dt_points >= 2 and dt_max > 0"));
        }
        let grid: Vec<f64> = (0..dt_points)
            .map(|i| dt_max * i as f64 / (dt_points - 1) as f64)
            .collect();
        let cfg = self.inner.config();
        Ok(retentive::decay_curves_csv(
            &self.inner.all_decay_params(),
            cfg.heads,
            max_steps,
            &grid,
            cfg.layers,
        ))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(dim={}, heads={}, layers={}, neighbors={})",
            c.dim, c.heads, c.layers, c.neighbors
        )
    }
}

/// Builds a training config from a dict of `key: value` overrides; keys
/// follow the config-file syntax, e.g. `"ablation.no_decay": True`.
fn train_config(config: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(d) = config {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                if v.extract::<bool>()? {
                    "true".to_string()
                } else {
                    "false".to_string()
                }
            } else {
                v.str()?.to_string()
            };
            cfg.set(&key, &value).map_err(to_py)?;
        }
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn split(
    stream: &graph::EventStream,
    setting: &str,
    fracs: (f64, f64, f64),
    seed: u64,
) -> PyResult<SplitPlan> {
    let (train, val, new_nodes) = fracs;
    match Setting::parse(setting).map_err(to_py)? {
        Setting::Transductive => chronological_split(stream, train, val),
        Setting::Inductive => inductive_split(stream, train, val, new_nodes, seed),
    }
    .map_err(to_py)
}

/// Generates a synthetic stream (`periodic`, `bursty`, `chain`, `uniform`).
#[pyfunction]
#[pyo3(signature = (pattern, nodes, events, seed = 0, bipartite = false, period = None, jitter = None, pairs = None, node_dim = 0, edge_dim = 0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    pattern: &str,
    nodes: usize,
    events: usize,
    seed: u64,
    bipartite: bool,
    period: Option<f64>,
    jitter: Option<f64>,
    pairs: Option<usize>,
    node_dim: usize,
    edge_dim: usize,
) -> PyResult<EventStream> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        pattern: pattern.parse().map_err(to_py)?,
        num_nodes: nodes,
        num_events: events,
        seed,
        bipartite,
        period: period.unwrap_or(d.period),
        jitter: jitter.unwrap_or(d.jitter),
        pairs: pairs.unwrap_or(d.pairs),
        node_dim,
        edge_dim,
        ..d
    };
    Ok(EventStream {
        inner: synthgen::generate(&spec).map_err(to_py)?,
    })
}

/// Trains with early stopping on validation AP. Returns the best model and
/// one dict per epoch.
#[pyfunction]
#[pyo3(signature = (stream, config = None, setting = "trans", train_frac = 0.7, val_frac = 0.15, new_node_frac = 0.1, split_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    stream: &EventStream,
    config: Option<&Bound<'py, PyDict>>,
    setting: &str,
    train_frac: f64,
    val_frac: f64,
    new_node_frac: f64,
    split_seed: u64,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = train_config(config)?;
    let s = &stream.inner;
    let plan = split(
        s,
        setting,
        (train_frac, val_frac, new_node_frac),
        split_seed,
    )?;
    let (result, history) = py
        .detach(|| {
            let model = CoreModel::new(cfg.model_config(s))?;
            let r = trainer::fit(s, &plan, model, &cfg)?;
            let h = trainer::history_jsonl(&r.history)?;
            Ok::<_, Error>((r, h))
        })
        .map_err(to_py)?;
    let records = format!("[{}]", history.lines().collect::<Vec<_>>().join(","));
    Ok((Model { inner: result.best }, json_to_py(py, &records)?))
}

/// Chronological evaluation over the validation or test span; returns the
/// metric report as a dict.
#[pyfunction]
#[pyo3(signature = (model, stream, setting = "trans", nss = "rnd", seed = 0, span = "test", batch_size = 200, train_frac = 0.7, val_frac = 0.15, new_node_frac = 0.1, split_seed = 0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    model: &Model,
    stream: &EventStream,
    setting: &str,
    nss: &str,
    seed: u64,
    span: &str,
    batch_size: usize,
    train_frac: f64,
    val_frac: f64,
    new_node_frac: f64,
    split_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let s = &stream.inner;
    let plan = split(
        s,
        setting,
        (train_frac, val_frac, new_node_frac),
        split_seed,
    )?;
    let range = match span {
        "val" => plan.val_range(),
        "test" => plan.test_range(s.len()),
        _ => {
            return Err(PyValueError::new_err(format!(
                "span must be 'val' or 'test', got {span:?}"
            )))
        }
    };
    let opts = EvalOptions {
        setting: Setting::parse(setting).map_err(to_py)?,
        strategy: Strategy::parse(nss).map_err(to_py)?,
        batch_size,
        seed,
    };
    let report: MetricReport = py
        .detach(|| evaluation::evaluate_link(&model.inner, s, &plan, range, &opts))
        .map_err(to_py)?;
    json_to_py(py, &report.to_json().map_err(to_py)?)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::average_precision(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::roc_auc(&scores, &labels).map_err(to_py)
}

#[pymodule]
fn dsrd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EventStream>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    Ok(())
}
