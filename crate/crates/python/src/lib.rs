//! Python bindings: a checkpoint wrapper plus the pruning entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fang_core::model::{
    apply_head_mask, apply_neuron_mask, init_model, perplexity, train_head, Checkpoint,
    ModelConfig,
};
use fang_core::numcore::Matrix;
use fang_core::pipeline::{cmd_eval, cmd_prune_resolved, cmd_report, RunConfig};
use fang_core::pruners::{
    flap_variant_prune, hessian, obc_traditional_prune, obc_variant_prune, PruneResult,
};

fn to_py_err(e: fang_core::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// In-memory model checkpoint.
#[pyclass]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    /// Deterministically initialize from a model-config JSON string.
    #[staticmethod]
    fn init(config_json: &str) -> PyResult<Model> {
        let config: ModelConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Model {
            inner: init_model(&config).map_err(to_py_err)?,
        })
    }

    /// Reference toy configuration (4 layers, d=64, 192 FFN neurons).
    #[staticmethod]
    fn toy(seed: u64) -> PyResult<Model> {
        Ok(Model {
            inner: init_model(&ModelConfig::toy(seed)).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        Ok(Model {
            inner: Checkpoint::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn prunable_param_count(&self) -> usize {
        self.inner.prunable_param_count()
    }

    /// Perplexity of a byte corpus file over non-overlapping windows.
    #[pyo3(signature = (corpus_path, window = 128))]
    fn perplexity(&self, corpus_path: PathBuf, window: usize) -> PyResult<f64> {
        let corpus = fang_core::calib::load_corpus(&corpus_path).map_err(to_py_err)?;
        perplexity(&self.inner, &corpus, window).map_err(to_py_err)
    }

    /// SGD on the output head only; returns the final mean NLL.
    #[pyo3(signature = (corpus_path, window = 128, epochs = 20, lr = 0.5))]
    fn train_head(
        &mut self,
        corpus_path: PathBuf,
        window: usize,
        epochs: usize,
        lr: f64,
    ) -> PyResult<f64> {
        let corpus = fang_core::calib::load_corpus(&corpus_path).map_err(to_py_err)?;
        train_head(&mut self.inner, &corpus, window, epochs, lr).map_err(to_py_err)
    }

    /// Physically remove the flagged heads of one layer (mask entry 1 = drop).
    fn apply_head_mask(&self, layer: usize, mask: Vec<u8>) -> PyResult<Model> {
        Ok(Model {
            inner: apply_head_mask(&self.inner, layer, &mask, None).map_err(to_py_err)?,
        })
    }

    /// Physically remove the flagged FFN neurons of one layer.
    fn apply_neuron_mask(&self, layer: usize, mask: Vec<u8>) -> PyResult<Model> {
        Ok(Model {
            inner: apply_neuron_mask(&self.inner, layer, &mask, None).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, d_model={}, params={})",
            c.n_layers,
            c.d_model,
            self.inner.param_count()
        )
    }
}

/// Run the full pruning pipeline from a run-config JSON string. Writes
/// `pruned.fang` and `report.json` into `out_dir` and returns the report as
/// a JSON string.
#[pyfunction]
fn prune(config_json: &str, out_dir: PathBuf) -> PyResult<String> {
    let cfg: RunConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py_err)?;
    let report = cmd_prune_resolved(&cfg, &out_dir).map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Perplexity of a saved checkpoint on a byte corpus; returns (ppl, tokens).
#[pyfunction]
#[pyo3(signature = (ckpt_path, corpus_path, window = 128))]
fn evaluate(ckpt_path: PathBuf, corpus_path: PathBuf, window: usize) -> PyResult<(f64, usize)> {
    cmd_eval(&ckpt_path, &corpus_path, window).map_err(to_py_err)
}

/// Human-readable rendering of a report.json file.
#[pyfunction]
fn render_report(report_path: PathBuf) -> PyResult<String> {
    cmd_report(&report_path).map_err(to_py_err)
}

fn result_tuple(r: PruneResult) -> (Vec<u8>, Vec<Vec<f64>>, Option<Vec<f64>>, f64, f64) {
    (
        r.mask.clone(),
        matrix_to_rows(&r.new_weights),
        r.bias,
        r.recon_error_before,
        r.recon_error_after,
    )
}

/// Prune one weight matrix against its input activations. `weights` is
/// out x in, `inputs` is in x tokens. Returns
/// (mask, new_weights, bias, error_before, error_after).
#[pyfunction]
#[pyo3(signature = (weights, inputs, sparsity, method = "obc", damping = 0.01))]
fn prune_layer(
    weights: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    sparsity: f64,
    method: &str,
    damping: f64,
) -> PyResult<(Vec<u8>, Vec<Vec<f64>>, Option<Vec<f64>>, f64, f64)> {
    let w = matrix_from_rows(weights)?;
    let x = matrix_from_rows(inputs)?;
    let r = match method {
        "obc" => {
            let h = hessian(&x, None).map_err(to_py_err)?;
            obc_variant_prune(&w, &h, sparsity, damping).map_err(to_py_err)?
        }
        "obc-traditional" => {
            let h = hessian(&x, None).map_err(to_py_err)?;
            obc_traditional_prune(&w, &h, sparsity, damping).map_err(to_py_err)?
        }
        "flap" => flap_variant_prune(&w, &x, sparsity).map_err(to_py_err)?,
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    };
    Ok(result_tuple(r))
}

#[pymodule]
fn fang_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(prune_layer, m)?)?;
    Ok(())
}
