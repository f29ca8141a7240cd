//! Python bindings: arrays, fixpoint specs, the run strategies, the
//! versioned store and the bundled applications.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyTuple};

use iterarray::apps::bench::{self as bench_mod, BenchConfig};
use iterarray::apps::{generator, kmeans as km, sigmaclip, sourcedetect, App};
use iterarray::{
    incremental, multires, parallel, ArraySchema, Attribute, ChunkedArray, Dimension, Executor, IterationTrace,
    MergeMode, Scalar, ScalarKind, ShufflePolicy, VersionedStore, Which, Workload,
};

create_exception!(iterarray_py, IterArrayError, PyException);

fn err(e: iterarray::Error) -> PyErr {
    IterArrayError::new_err(e.to_string())
}

fn bad(msg: String) -> PyErr {
    IterArrayError::new_err(msg)
}

fn scalar_to_py(py: Python<'_>, s: &Scalar) -> PyResult<Py<PyAny>> {
    Ok(match s {
        Scalar::Int(v) => v.into_pyobject(py)?.into_any().unbind(),
        Scalar::Float(v) => v.into_pyobject(py)?.into_any().unbind(),
        Scalar::Null => py.None(),
    })
}

fn scalar_from_py(v: &Bound<'_, PyAny>, kind: ScalarKind) -> PyResult<Scalar> {
    if v.is_none() {
        return Ok(Scalar::Null);
    }
    Ok(match kind {
        ScalarKind::Int64 => Scalar::Int(v.extract()?),
        ScalarKind::Float64 => Scalar::Float(v.extract()?),
    })
}

fn trace_to_py<'py>(py: Python<'py>, t: &IterationTrace) -> PyResult<Bound<'py, PyList>> {
    let rows = PyList::empty(py);
    for r in t.iter() {
        let d = PyDict::new(py);
        d.set_item("iteration", r.iteration)?;
        d.set_item("changed_cells", r.changed_cells)?;
        d.set_item("t_value", r.t_value)?;
        d.set_item("cells_touched", r.cells_touched)?;
        d.set_item("mini_index", r.stats.mini_index)?;
        d.set_item("major_index", r.stats.major_index)?;
        d.set_item("shuffled_chunks", r.stats.shuffled_chunks)?;
        d.set_item("shuffled_cells", r.stats.shuffled_cells)?;
        rows.append(d)?;
    }
    Ok(rows)
}

/// Sparse chunked array.
#[pyclass(name = "Array", module = "iterarray_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyArray {
    pub inner: ChunkedArray,
}

#[pymethods]
impl PyArray {
    /// `dims` holds (name, lower, upper) triples and `attrs` (name, kind)
    /// pairs with kind "int64" or "float64".
    #[new]
    #[pyo3(signature = (dims, attrs, chunks=None, overlap=None))]
    fn new(
        dims: Vec<(String, i64, i64)>,
        attrs: Vec<(String, String)>,
        chunks: Option<Vec<i64>>,
        overlap: Option<Vec<i64>>,
    ) -> PyResult<Self> {
        let dims: Vec<Dimension> = dims.into_iter().map(|(n, lo, hi)| Dimension::new(n, lo, hi)).collect();
        let attrs = attrs
            .into_iter()
            .map(|(n, k)| {
                let kind = ScalarKind::parse(&k).ok_or_else(|| bad(format!("unknown scalar kind `{k}`")))?;
                Ok(Attribute::new(n, kind))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let chunks = chunks.unwrap_or_else(|| dims.iter().map(|d| d.extent()).collect());
        let overlap = overlap.unwrap_or_else(|| vec![0; dims.len()]);
        let schema = ArraySchema::with_chunking(dims, attrs, chunks, overlap).map_err(err)?;
        Ok(PyArray { inner: ChunkedArray::new(schema).map_err(err)? })
    }

    /// Parses the text produced by `dump`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyArray { inner: ChunkedArray::parse_dump(text).map_err(err)? })
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[getter]
    fn header(&self) -> String {
        self.inner.schema().header()
    }

    #[getter]
    fn dims(&self) -> Vec<(String, i64, i64)> {
        self.inner.schema().dims().iter().map(|d| (d.name.clone(), d.lower, d.upper)).collect()
    }

    #[getter]
    fn attrs(&self) -> Vec<(String, String)> {
        self.inner.schema().attrs().iter().map(|a| (a.name.clone(), a.kind.to_string())).collect()
    }

    #[getter]
    fn chunks(&self) -> Vec<i64> {
        self.inner.schema().chunk_extents().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Array({}, {} cells)", self.inner.schema().header(), self.inner.len())
    }

    fn get(&self, py: Python<'_>, coord: Vec<i64>) -> PyResult<Option<Vec<Py<PyAny>>>> {
        match self.inner.get(&coord).map_err(err)? {
            Some(t) => Ok(Some(t.iter().map(|s| scalar_to_py(py, s)).collect::<PyResult<_>>()?)),
            None => Ok(None),
        }
    }

    /// Sets a cell; `None` empties it.
    #[pyo3(signature = (coord, values))]
    fn set(&mut self, coord: Vec<i64>, values: Option<Vec<Bound<'_, PyAny>>>) -> PyResult<()> {
        let tuple = match values {
            None => None,
            Some(vs) => {
                let attrs = self.inner.schema().attrs();
                if vs.len() != attrs.len() {
                    return Err(bad(format!("expected {} values, got {}", attrs.len(), vs.len())));
                }
                Some(vs.iter().zip(attrs).map(|(v, a)| scalar_from_py(v, a.kind)).collect::<PyResult<Vec<_>>>()?.into())
            }
        };
        self.inner.set(&coord, tuple).map_err(err)
    }

    /// Non-empty cells as (coord, values) in canonical order.
    fn cells<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let out = PyList::empty(py);
        for (c, t) in self.inner.cells() {
            let vals = t.iter().map(|s| scalar_to_py(py, s)).collect::<PyResult<Vec<_>>>()?;
            out.append((PyTuple::new(py, c.iter())?, vals))?;
        }
        Ok(out)
    }

    fn rechunk(&self, chunks: Vec<i64>, overlap: Option<Vec<i64>>) -> PyResult<Self> {
        let overlap = overlap.unwrap_or_else(|| vec![0; chunks.len()]);
        Ok(PyArray { inner: self.inner.rechunk(chunks, overlap).map_err(err)? })
    }

    fn diff_count(&self, other: &PyArray) -> PyResult<u64> {
        self.inner.diff_count(&other.inner).map_err(err)
    }
}

/// FixPoint(A, π, f, δ, T, ε).
#[pyclass(name = "FixPointSpec", module = "iterarray_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PySpec {
    pub inner: iterarray::FixPointSpec,
}

#[pymethods]
impl PySpec {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PySpec { inner: iterarray::FixPointSpec::from_toml(text).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn array(&self) -> String {
        self.inner.array.clone()
    }

    fn __repr__(&self) -> String {
        format!("FixPointSpec({:?})", self.inner.array)
    }
}

/// Final array, per-iteration trace and whether T reached ε.
#[pyclass(name = "Outcome", module = "iterarray_py", get_all)]
pub struct PyOutcome {
    array: PyArray,
    trace: Py<PyList>,
    converged: bool,
}

#[pymethods]
impl PyOutcome {
    fn __repr__(&self, py: Python<'_>) -> String {
        format!("Outcome({} cells, {} iterations, converged={})", self.array.inner.len(), self.trace.bind(py).len(), self.converged)
    }
}

fn outcome(py: Python<'_>, o: iterarray::Outcome) -> PyResult<PyOutcome> {
    Ok(PyOutcome { trace: trace_to_py(py, &o.trace)?.unbind(), array: PyArray { inner: o.array }, converged: o.converged })
}

fn workload(s: &str) -> PyResult<Workload> {
    match s {
        "delete-only" => Ok(Workload::DeleteOnly),
        "insert-only" => Ok(Workload::InsertOnly),
        "mixed" => Ok(Workload::Mixed),
        _ => Err(bad(format!("unknown workload `{s}`"))),
    }
}

/// Naive evaluation: one full major step per iteration.
#[pyfunction]
#[pyo3(signature = (spec, array, workers=1))]
fn run(py: Python<'_>, spec: &PySpec, array: &PyArray, workers: usize) -> PyResult<PyOutcome> {
    let o = py.detach(|| iterarray::run_array(&spec.inner, &array.inner, &Executor::new(workers))).map_err(err)?;
    outcome(py, o)
}

/// Delta-driven evaluation through partial aggregates.
#[pyfunction]
#[pyo3(signature = (spec, array, workload="mixed", storage=false, workers=1))]
fn run_incremental(
    py: Python<'_>,
    spec: &PySpec,
    array: &PyArray,
    workload: &str,
    storage: bool,
    workers: usize,
) -> PyResult<PyOutcome> {
    let w = self::workload(workload)?;
    let o = py
        .detach(|| {
            let plan = incremental::rewrite_incremental(
                &spec.inner,
                array.inner.schema(),
                &iterarray::AlgebraicRegistry::standard(),
                w,
            )?;
            incremental::run_incremental_array(&plan, &array.inner, storage, &Executor::new(workers))
        })
        .map_err(err)?;
    outcome(py, o)
}

/// Chunk-parallel evaluation with halos and a shuffle policy.
#[pyfunction]
#[pyo3(signature = (spec, array, policy="t1", workers=1, radius=None))]
fn run_parallel(
    py: Python<'_>,
    spec: &PySpec,
    array: &PyArray,
    policy: &str,
    workers: usize,
    radius: Option<Vec<i64>>,
) -> PyResult<PyOutcome> {
    let cfg = parallel::ParallelConfig { policy: ShufflePolicy::parse(policy).map_err(err)?, workers, radius };
    let o = py.detach(|| parallel::run_parallel(&spec.inner, &array.inner, &cfg)).map_err(err)?;
    outcome(py, o)
}

/// Coarse-to-fine sourcedetect over a `levels`-deep pyramid. Returns the
/// labels and one trace per level, finest first.
#[pyfunction]
#[pyo3(signature = (spec, array, levels, block, workers=1))]
fn run_multires<'py>(
    py: Python<'py>,
    spec: &PySpec,
    array: &PyArray,
    levels: usize,
    block: Vec<i64>,
    workers: usize,
) -> PyResult<(PyArray, Vec<Bound<'py, PyList>>)> {
    let (out, traces) = py
        .detach(|| {
            let mut st = multires::build_pyramid(&array.inner, &sourcedetect::pyramid_spec(levels, &block))?;
            multires::run_multires(&mut st, &spec.inner, &Executor::new(workers))
        })
        .map_err(err)?;
    let traces = traces.iter().map(|t| trace_to_py(py, t)).collect::<PyResult<_>>()?;
    Ok((PyArray { inner: out }, traces))
}

#[pyfunction]
fn sigmaclip_spec(k: f64) -> PyResult<PySpec> {
    Ok(PySpec { inner: sigmaclip::sigmaclip_spec(&sigmaclip::SigmaClipParams::new(k).map_err(err)?) })
}

#[pyfunction]
#[pyo3(signature = (r=1))]
fn sourcedetect_spec(r: i64) -> PyResult<PySpec> {
    Ok(PySpec { inner: sourcedetect::sourcedetect_spec(&sourcedetect::SourceDetectParams::new(r, 0.0).map_err(err)?) })
}

/// Lloyd iteration spec for a labelled point array.
#[pyfunction]
#[pyo3(signature = (points, max_iterations=iterarray::fixpoint::DEFAULT_MAX_ITERATIONS))]
fn kmeans_spec(points: &PyArray, max_iterations: usize) -> PySpec {
    PySpec { inner: km::kmeans_spec(points.inner.schema(), max_iterations) }
}

/// Seeded synthetic image cube over (x, y, t) with float attribute `d`.
#[pyfunction]
#[pyo3(signature = (seed, nx, ny, nt, n_sources, noise, chunks=None))]
fn generate_images(
    seed: u64,
    nx: i64,
    ny: i64,
    nt: i64,
    n_sources: usize,
    noise: f64,
    chunks: Option<Vec<i64>>,
) -> PyResult<PyArray> {
    let mut p = generator::ImageParams::new(seed, nx, ny, nt, n_sources, noise);
    p.chunks = chunks;
    Ok(PyArray { inner: generator::generate(&p).map_err(err)?.0 })
}

/// Labelled detections: pixels whose mean flux over t is at least `threshold`.
#[pyfunction]
fn detect_input(cube: &PyArray, threshold: f64, chunks: Vec<i64>) -> PyResult<PyArray> {
    let p = sourcedetect::SourceDetectParams::new(1, threshold).map_err(err)?;
    Ok(PyArray { inner: sourcedetect::detect_input(&cube.inner, &p, &chunks).map_err(err)? })
}

#[pyfunction]
fn random_grid(seed: u64, nx: i64, ny: i64, density: f64, chunks: Vec<i64>) -> PyResult<PyArray> {
    Ok(PyArray { inner: sourcedetect::random_grid(seed, nx, ny, density, &chunks).map_err(err)? })
}

#[pyfunction]
fn coadd(cube: &PyArray) -> PyResult<PyArray> {
    Ok(PyArray { inner: sigmaclip::coadd(&cube.inner).map_err(err)? })
}

/// K-means from a seeded random assignment. Returns (centroids, labelled
/// points, trace).
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, workers=1))]
fn kmeans<'py>(
    py: Python<'py>,
    points: &PyArray,
    k: usize,
    seed: u64,
    workers: usize,
) -> PyResult<(Vec<(i64, Vec<f64>)>, PyArray, Bound<'py, PyList>)> {
    let p = km::KMeansParams::new(k, seed).map_err(err)?;
    let r = py.detach(|| km::kmeans_run(&points.inner, &p, &Executor::new(workers))).map_err(err)?;
    let trace = trace_to_py(py, &r.trace)?;
    Ok((r.centroids, PyArray { inner: r.labeled }, trace))
}

/// Runs the bench harness. `config` is a TOML document with the same keys
/// as the CLI's `--config` file. Returns a dict with summary, csv,
/// consistent and final.
#[pyfunction(name = "bench")]
#[pyo3(signature = (app, config=""))]
fn run_bench<'py>(py: Python<'py>, app: &str, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = BenchConfig::new(App::parse(app).map_err(err)?);
    cfg.apply_toml(config).map_err(err)?;
    let r = py.detach(|| bench_mod::bench(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("summary", r.summary())?;
    d.set_item("csv", r.csv())?;
    d.set_item("consistent", r.consistent)?;
    d.set_item("final", r.final_array().map(|a| PyArray { inner: a.clone() }))?;
    Ok(d)
}

/// Versioned array store with per-version delta pairs.
#[pyclass(name = "Store", module = "iterarray_py")]
#[derive(Default)]
pub struct PyStore {
    inner: VersionedStore,
}

fn which(s: &str) -> PyResult<Which> {
    match s {
        "full" => Ok(Which::Full),
        "plus" => Ok(Which::DeltaPlus),
        "minus" => Ok(Which::DeltaMinus),
        _ => Err(bad(format!("unknown slice `{s}`"))),
    }
}

#[pymethods]
impl PyStore {
    #[new]
    fn new() -> Self {
        PyStore::default()
    }

    #[staticmethod]
    fn load(dir: std::path::PathBuf) -> PyResult<Self> {
        Ok(PyStore { inner: VersionedStore::load(&dir).map_err(err)? })
    }

    fn save(&self, dir: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn store(&mut self, name: &str, array: &PyArray) -> PyResult<u64> {
        self.inner.store(name, array.inner.clone()).map_err(err)
    }

    /// Merges `array` into the latest version cell-wise; mode "add" or "subtract".
    fn store_annotated(&mut self, name: &str, array: &PyArray, mode: &str) -> PyResult<u64> {
        let mode = match mode {
            "add" => MergeMode::Add,
            "subtract" => MergeMode::Subtract,
            _ => return Err(bad(format!("unknown merge mode `{mode}`"))),
        };
        self.inner.store_annotated(name, &array.inner, mode).map_err(err)
    }

    fn latest_version(&self, name: &str) -> PyResult<u64> {
        self.inner.latest_version(name).map_err(err)
    }

    #[pyo3(signature = (name, which="full", version=None))]
    fn scan(&self, name: &str, which: &str, version: Option<u64>) -> PyResult<PyArray> {
        Ok(PyArray { inner: self.inner.scan(name, self::which(which)?, version).map_err(err)?.clone() })
    }

    /// (plus, minus) delta arrays of one version.
    fn delta(&self, name: &str, version: u64) -> PyResult<(PyArray, PyArray)> {
        let d = self.inner.delta(name, version).map_err(err)?;
        Ok((PyArray { inner: d.plus }, PyArray { inner: d.minus }))
    }
}

/// Rebuilds an array from an earlier version and a delta pair.
#[pyfunction]
fn apply_delta(prev: &PyArray, plus: &PyArray, minus: &PyArray) -> PyArray {
    let d = iterarray::DeltaPair { plus: plus.inner.clone(), minus: minus.inner.clone() };
    PyArray { inner: iterarray::store::apply_delta(&prev.inner, &d) }
}

#[pymodule]
pub fn iterarray_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IterArrayError", m.py().get_type::<IterArrayError>())?;
    m.add_class::<PyArray>()?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyOutcome>()?;
    m.add_class::<PyStore>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_incremental, m)?)?;
    m.add_function(wrap_pyfunction!(run_parallel, m)?)?;
    m.add_function(wrap_pyfunction!(run_multires, m)?)?;
    m.add_function(wrap_pyfunction!(sigmaclip_spec, m)?)?;
    m.add_function(wrap_pyfunction!(sourcedetect_spec, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_spec, m)?)?;
    m.add_function(wrap_pyfunction!(generate_images, m)?)?;
    m.add_function(wrap_pyfunction!(detect_input, m)?)?;
    m.add_function(wrap_pyfunction!(random_grid, m)?)?;
    m.add_function(wrap_pyfunction!(coadd, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(apply_delta, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        Python::initialize();
        assert_eq!(workload("delete-only").unwrap(), Workload::DeleteOnly);
        assert_eq!(which("minus").unwrap(), Which::DeltaMinus);
        assert!(workload("deletes").is_err());
        assert!(which("half").is_err());
    }
}
