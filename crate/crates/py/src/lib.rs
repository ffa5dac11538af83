//! Python bindings: encodings, the stream cipher, the epoch optimizer,
//! the controller benchmark, query planning and simulated deployments.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use privstream::encoding::{decode_stats, encode, EncodingSpec};
use privstream::ids::{PartyId, StreamId};
use privstream::policy::{parse_query, parse_schema, QueryPlanner};
use privstream::ring_crypto::{AddMode, MasterSecret, Modulus, PrfKind, RingElement, StreamCipher, StreamCiphertext, Timestamp};
use privstream::secure_agg::bench::{bench_party, resolve_protocol, BenchConfig, ProtocolChoice};
use privstream::secure_agg::{disconnect_bound, optimize_b, PRF_OUTPUT_BITS};
use privstream::sim::{default_annotation, run_scenario, scenario_presets};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

const M: Modulus = Modulus::DEFAULT;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn elements(values: &[u64]) -> Vec<RingElement> {
    values.iter().map(|v| M.reduce(*v)).collect()
}

/// Aggregatable encoding of one attribute.
#[pyclass(name = "Encoding", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEncoding {
    spec: EncodingSpec,
}

#[pymethods]
impl PyEncoding {
    #[staticmethod]
    fn sum() -> Self {
        PyEncoding { spec: EncodingSpec::sum() }
    }

    #[staticmethod]
    fn sum_count() -> Self {
        PyEncoding {
            spec: EncodingSpec::sum_count(),
        }
    }

    #[staticmethod]
    fn variance() -> Self {
        PyEncoding {
            spec: EncodingSpec::variance(),
        }
    }

    #[staticmethod]
    fn histogram(domain_min: f64, domain_max: f64, bin_width: f64) -> PyResult<Self> {
        let spec = EncodingSpec::histogram(domain_min, domain_max, bin_width);
        spec.validate().map_err(value_err)?;
        Ok(PyEncoding { spec })
    }

    #[staticmethod]
    fn one_hot(domain_min: i64, domain_max: i64) -> PyResult<Self> {
        let spec = EncodingSpec::one_hot(domain_min, domain_max);
        spec.validate().map_err(value_err)?;
        Ok(PyEncoding { spec })
    }

    #[staticmethod]
    fn threshold(t: f64) -> Self {
        PyEncoding {
            spec: EncodingSpec::predicate_threshold(t),
        }
    }

    #[getter]
    fn width(&self) -> usize {
        self.spec.width()
    }

    fn encode(&self, value: f64) -> PyResult<Vec<u64>> {
        Ok(encode(value, &self.spec, M).map_err(value_err)?.elements.iter().map(|e| e.0).collect())
    }

    /// Statistics of an element-wise sum of encodings.
    fn decode<'py>(&self, py: Python<'py>, aggregate: Vec<u64>) -> PyResult<Bound<'py, PyAny>> {
        let stats = decode_stats(&elements(&aggregate), &self.spec, M).map_err(value_err)?;
        to_py(py, &stats)
    }

    fn __repr__(&self) -> String {
        format!("Encoding({:?}, width={})", self.spec.kind, self.spec.width())
    }
}

/// Ciphertext covering the interval `(t_prev, t_curr]`.
#[pyclass(name = "Ciphertext", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCiphertext {
    ct: StreamCiphertext,
}

#[pymethods]
impl PyCiphertext {
    #[getter]
    fn t_prev(&self) -> u64 {
        self.ct.t_prev.0
    }

    #[getter]
    fn t_curr(&self) -> u64 {
        self.ct.t_curr.0
    }

    #[getter]
    fn body(&self) -> Vec<u64> {
        self.ct.body.iter().map(|e| e.0).collect()
    }

    /// Sum with the next ciphertext of the same stream.
    fn chain(&self, next: &PyCiphertext) -> PyResult<PyCiphertext> {
        let ct = StreamCipher::new(M, PrfKind::Aes128)
            .add_ciphertexts(&self.ct, &next.ct, AddMode::Chain)
            .map_err(value_err)?;
        Ok(PyCiphertext { ct })
    }

    /// Sum with another stream's ciphertext over the same interval.
    fn cross(&self, other: &PyCiphertext) -> PyResult<PyCiphertext> {
        let ct = StreamCipher::new(M, PrfKind::Aes128)
            .add_ciphertexts(&self.ct, &other.ct, AddMode::CrossStream)
            .map_err(value_err)?;
        Ok(PyCiphertext { ct })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.ct.to_bytes()
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<PyCiphertext> {
        Ok(PyCiphertext {
            ct: StreamCiphertext::from_bytes(&data).map_err(value_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.ct.width()
    }

    fn __repr__(&self) -> String {
        format!("Ciphertext(({}, {}], width={})", self.ct.t_prev.0, self.ct.t_curr.0, self.ct.width())
    }
}

/// A stream's master secret with its cipher.
#[pyclass(name = "StreamKey", frozen)]
struct PyStreamKey {
    master: MasterSecret,
    cipher: StreamCipher,
}

#[pymethods]
impl PyStreamKey {
    #[new]
    #[pyo3(signature = (stream_id, key, prf = "aes128"))]
    fn new(stream_id: &str, key: Vec<u8>, prf: &str) -> PyResult<Self> {
        let key: [u8; 16] = key
            .try_into()
            .map_err(|_| PyValueError::new_err("key must be 16 bytes"))?;
        let prf: PrfKind = prf.parse().map_err(PyValueError::new_err)?;
        Ok(PyStreamKey {
            master: MasterSecret::new(key, StreamId::new(stream_id)),
            cipher: StreamCipher::new(M, prf),
        })
    }

    fn encrypt(&self, t_prev: u64, t_curr: u64, message: Vec<u64>) -> PyResult<PyCiphertext> {
        let ct = self
            .cipher
            .encrypt(&self.master, Timestamp(t_prev), Timestamp(t_curr), &elements(&message))
            .map_err(value_err)?;
        Ok(PyCiphertext { ct })
    }

    /// Decrypts a chained ciphertext that covers exactly `(t_start, t_end]`.
    fn decrypt_window(&self, t_start: u64, t_end: u64, ct: &PyCiphertext) -> PyResult<Vec<u64>> {
        if (ct.ct.t_prev.0, ct.ct.t_curr.0) != (t_start, t_end) {
            return Err(PyValueError::new_err("ciphertext does not cover the requested window"));
        }
        Ok(self
            .cipher
            .decrypt_window(&self.master, Timestamp(t_start), Timestamp(t_end), &ct.ct)
            .iter()
            .map(|e| e.0)
            .collect())
    }
}

/// Largest epoch whose disconnection bound stays within `delta`.
#[pyfunction(name = "optimize_b")]
#[pyo3(signature = (parties, alpha = 0.5, delta = 1e-7, prf_bits = PRF_OUTPUT_BITS))]
fn py_optimize_b(py: Python<'_>, parties: u64, alpha: f64, delta: f64, prf_bits: u32) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &optimize_b(parties, alpha, delta, prf_bits).map_err(value_err)?)
}

#[pyfunction(name = "disconnect_bound")]
fn py_disconnect_bound(n: u64, p: f64, rounds: f64) -> f64 {
    disconnect_bound(n, p, rounds)
}

/// Per-round counters of one controller among `parties`.
#[pyfunction(name = "bench_party")]
#[pyo3(signature = (parties, rounds, protocol = "zeph", dropout = 0.0, seed = 0, prf = "mix", alpha = 0.5, delta = 1e-7))]
#[allow(clippy::too_many_arguments)]
fn py_bench_party<'py>(
    py: Python<'py>,
    parties: u64,
    rounds: u64,
    protocol: &str,
    dropout: f64,
    seed: u64,
    prf: &str,
    alpha: f64,
    delta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let choice: ProtocolChoice = protocol.parse().map_err(PyValueError::new_err)?;
    let (protocol, _) = resolve_protocol(choice, parties, alpha, delta).map_err(value_err)?;
    let cfg = BenchConfig {
        parties,
        rounds,
        protocol,
        dropout,
        seed,
        prf: prf.parse().map_err(PyValueError::new_err)?,
    };
    let out = py.detach(|| bench_party(&cfg)).map_err(value_err)?;
    to_py(py, &out)
}

/// Plans a YAML query against `streams` generated annotations.
#[pyfunction(name = "plan_query")]
#[pyo3(signature = (schema_yaml, query_yaml, streams = 100))]
fn py_plan_query<'py>(py: Python<'py>, schema_yaml: &str, query_yaml: &str, streams: u64) -> PyResult<Bound<'py, PyAny>> {
    let schema = parse_schema(schema_yaml).map_err(value_err)?;
    let query = parse_query(query_yaml, &schema).map_err(value_err)?;
    let anns: Vec<_> = (0..streams)
        .map(|i| {
            let owner = PartyId::from_public_key(&i.to_le_bytes());
            default_annotation(&schema, std::slice::from_ref(&query), StreamId::new(format!("stream-{i:05}")), owner)
        })
        .collect();
    let plans = QueryPlanner::default()
        .plan_query(&query, &schema, &anns, 0)
        .map_err(value_err)?;
    to_py(py, &plans)
}

/// Runs a preset scenario and returns its summary.
#[pyfunction(name = "run_preset")]
#[pyo3(signature = (name, producers = None, windows = None, seed = 0, dropout = 0.0))]
fn py_run_preset<'py>(
    py: Python<'py>,
    name: &str,
    producers: Option<usize>,
    windows: Option<u64>,
    seed: u64,
    dropout: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut s = scenario_presets(name).map_err(value_err)?;
    s.config.producers = producers.unwrap_or(s.config.producers);
    s.config.windows = windows.unwrap_or(s.config.windows);
    s.config.seed = seed;
    s.config.dropout = dropout;
    let report = py
        .detach(|| run_scenario(&s.config, &s.schema, &s.queries))
        .map_err(value_err)?;
    to_py(py, &report.summary())
}

#[pymodule]
pub fn privstream_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEncoding>()?;
    m.add_class::<PyCiphertext>()?;
    m.add_class::<PyStreamKey>()?;
    m.add_function(wrap_pyfunction!(py_optimize_b, m)?)?;
    m.add_function(wrap_pyfunction!(py_disconnect_bound, m)?)?;
    m.add_function(wrap_pyfunction!(py_bench_party, m)?)?;
    m.add_function(wrap_pyfunction!(py_plan_query, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_preset, m)?)?;
    m.add("MODULUS_BITS", 64)?;
    Ok(())
}
