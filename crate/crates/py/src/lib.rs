//! Python bindings: synthetic or prepared datasets, bilevel training,
//! evaluation, and the simplex and sampling primitives.

use std::path::PathBuf;

use fairneg::backbone::BackboneKind;
use fairneg::dataset::{load_prepared, split, DataSplit, GroupMap};
use fairneg::fairctl::{GroupLossVector, MomentumBank as CoreBank};
use fairneg::metrics::{evaluate, recall_disp as core_recall_disp, GroupAggregation};
use fairneg::samplers::{fair_prob as core_fair_prob, GroupDistribution};
use fairneg::synth::{generate, SynthConfig};
use fairneg::trainer::{bilevel_train, epoch_log_csv, TrainConfig, TrainOutcome};
use fairneg::{Error, MetricReport, Strategy};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NoCandidates(_) | Error::CandidateMismatch | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// A train/validation/test split together with its item groups.
#[pyclass(frozen, module = "fairneg_py")]
struct Dataset {
    split: DataSplit,
    groups: GroupMap,
}

#[pymethods]
impl Dataset {
    /// Generates a synthetic dataset and splits it 60/20/20 per user.
    #[staticmethod]
    #[pyo3(signature = (users=200, items=120, groups=2, density=0.05, seed=0, item_shares=None, interaction_shares=None, split_seed=2023))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        users: usize,
        items: usize,
        groups: usize,
        density: f64,
        seed: u64,
        item_shares: Option<Vec<f64>>,
        interaction_shares: Option<Vec<f64>>,
        split_seed: u64,
    ) -> PyResult<Self> {
        let config = SynthConfig {
            users,
            items,
            groups,
            density,
            seed,
            item_shares: item_shares.unwrap_or_default(),
            interaction_shares: interaction_shares.unwrap_or_default(),
            ..Default::default()
        };
        let data = generate(&config).map_err(py_err)?;
        Ok(Dataset {
            split: split(&data.table, split_seed).map_err(py_err)?,
            groups: data.groups,
        })
    }

    /// Loads a directory written by `fairneg prepare`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (split, groups, _) = load_prepared(&path).map_err(py_err)?;
        Ok(Dataset { split, groups })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.split.train.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.split.train.num_items()
    }

    #[getter]
    fn group_labels(&self) -> Vec<String> {
        self.groups.labels().to_vec()
    }

    #[getter]
    fn item_groups(&self) -> Vec<usize> {
        self.groups.item_groups().to_vec()
    }

    /// `(train, validation, test)` interaction counts.
    fn sizes(&self) -> (usize, usize, usize) {
        self.split.sizes()
    }

    /// Train positives of `user`.
    fn positives(&self, user: usize) -> PyResult<Vec<usize>> {
        if user >= self.num_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.split.train.positives(user).to_vec())
    }

    /// Fairness-aware negative distribution of `user` under group
    /// distribution `p`, as `{item: probability}`.
    #[pyo3(signature = (user, p, floor=1e-3))]
    fn fair_prob(&self, user: usize, p: Vec<f64>, floor: f64) -> PyResult<Vec<(usize, f64)>> {
        if user >= self.num_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        let p = GroupDistribution::new(p, floor).map_err(py_err)?;
        let dist = core_fair_prob(user, &self.groups, &self.split.train, &p).map_err(py_err)?;
        Ok(dist.items.into_iter().zip(dist.probs).collect())
    }

    fn __repr__(&self) -> String {
        let (tr, va, te) = self.split.sizes();
        format!(
            "Dataset(users={}, items={}, groups={:?}, train={tr}, validation={va}, test={te})",
            self.num_users(),
            self.num_items(),
            self.groups.labels()
        )
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("k", r.k)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("ndcg", r.ndcg)?;
    d.set_item("f1", r.f1)?;
    d.set_item("recall_pooled", r.recall_pooled)?;
    let groups = PyDict::new(py);
    for (label, value) in r.group_labels.iter().zip(&r.group_recall) {
        groups.set_item(label, *value)?;
    }
    d.set_item("group_recall", groups)?;
    d.set_item("recall_disp", r.recall_disp)?;
    d.set_item("recall_min", r.recall_min)?;
    d.set_item("recall_avg", r.recall_avg)?;
    Ok(d)
}

/// Outcome of a training run; holds the best checkpoint.
#[pyclass(frozen, module = "fairneg_py")]
struct TrainResult {
    outcome: TrainOutcome,
    labels: Vec<String>,
}

#[pymethods]
impl TrainResult {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.outcome.best_epoch
    }

    #[getter]
    fn best_validation_recall(&self) -> f64 {
        self.outcome.best_validation_recall
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.outcome.logs.len()
    }

    #[getter]
    fn final_distribution(&self) -> Vec<f64> {
        self.outcome.final_distribution.probs().to_vec()
    }

    /// Group distribution used in each epoch.
    #[getter]
    fn p_trajectory(&self) -> Vec<Vec<f64>> {
        self.outcome.logs.iter().map(|l| l.p.clone()).collect()
    }

    #[getter]
    fn bpr_losses(&self) -> Vec<f64> {
        self.outcome.logs.iter().map(|l| l.bpr_loss).collect()
    }

    /// The per-epoch log as CSV text.
    fn epoch_log_csv(&self) -> String {
        epoch_log_csv(&self.outcome.logs, &self.labels)
    }

    /// Test metrics of the best checkpoint, one dict per `k`.
    #[pyo3(signature = (dataset, ks=vec![20, 30], aggregation="micro"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        ks: Vec<usize>,
        aggregation: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let aggregation: GroupAggregation = parse(aggregation)?;
        let s = &dataset.split;
        let reports = evaluate(
            &self.outcome.best_model.embeddings(),
            &s.train,
            &s.validation,
            &s.test,
            &dataset.groups,
            &ks,
            aggregation,
        )
        .map_err(py_err)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }
}

/// Trains a recommender with the chosen negative sampler.
#[pyfunction]
#[pyo3(signature = (dataset, strategy="fairneg", backbone="mf", dim=64, layers=3, epochs=100, batch_size=1024, patience=10, seed=2023, beta=0.5, gamma=0.1, alpha=0.1, lr=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    strategy: &str,
    backbone: &str,
    dim: usize,
    layers: usize,
    epochs: usize,
    batch_size: usize,
    patience: usize,
    seed: u64,
    beta: f64,
    gamma: f64,
    alpha: f64,
    lr: Option<f64>,
) -> PyResult<TrainResult> {
    let kind: BackboneKind = parse(backbone)?;
    let mut config = TrainConfig {
        backbone: kind,
        dim,
        layers,
        epochs_max: epochs,
        batch_size,
        patience,
        seed,
        ..Default::default()
    };
    config.adam.lr = lr.unwrap_or(match kind {
        BackboneKind::Mf => 0.01,
        BackboneKind::LightGcn => 0.001,
    });
    config.sampler.strategy = parse::<Strategy>(strategy)?;
    config.sampler.beta = beta;
    config.outer.gamma = gamma;
    config.outer.alpha = alpha;
    config.validate().map_err(py_err)?;
    let outcome = py
        .detach(|| bilevel_train(&config, &dataset.split, &dataset.groups))
        .map_err(py_err)?;
    Ok(TrainResult {
        outcome,
        labels: dataset.groups.labels().to_vec(),
    })
}

/// Clamps entries to at least `floor` and renormalizes onto the simplex.
#[pyfunction]
#[pyo3(signature = (raw, floor=1e-3))]
fn project_simplex(raw: Vec<f64>, floor: f64) -> PyResult<Vec<f64>> {
    if raw.is_empty() || floor < 0.0 || floor * raw.len() as f64 > 1.0 {
        return Err(PyValueError::new_err("need at least one entry and 0 <= floor <= 1/len"));
    }
    Ok(fairneg::project_simplex(&raw, floor).probs().to_vec())
}

/// Per-group gradients `L_a - mean(L)`.
#[pyfunction]
fn group_gradients(losses: Vec<f64>) -> Vec<f64> {
    fairneg::group_gradients(&GroupLossVector { losses, epoch: 0 })
}

/// Coefficient of variation of group recalls; `None` when undefined.
#[pyfunction]
fn recall_disp(recalls: Vec<f64>) -> Option<f64> {
    core_recall_disp(&recalls)
}

/// Momentum state for the group-distribution update.
#[pyclass(module = "fairneg_py")]
struct MomentumBank {
    bank: CoreBank,
    floor: f64,
}

#[pymethods]
impl MomentumBank {
    #[new]
    #[pyo3(signature = (groups, gamma=0.1, alpha=0.1, floor=1e-3))]
    fn new(groups: usize, gamma: f64, alpha: f64, floor: f64) -> Self {
        MomentumBank {
            bank: CoreBank::new(groups, gamma, alpha),
            floor,
        }
    }

    #[getter]
    fn velocity(&self) -> Vec<f64> {
        self.bank.velocity().to_vec()
    }

    /// One update of `p` against `grads`; returns the projected distribution.
    fn step(&mut self, p: Vec<f64>, grads: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = GroupDistribution::new(p, self.floor).map_err(py_err)?;
        let next = fairneg::momentum_update(&mut self.bank, &p, &grads).map_err(py_err)?;
        Ok(next.probs().to_vec())
    }
}

#[pymodule]
fn fairneg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainResult>()?;
    m.add_class::<MomentumBank>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(group_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(recall_disp, m)?)?;
    Ok(())
}
