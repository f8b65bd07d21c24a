use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyKeyError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDate, PyDateTime, PyDict, PyList};

use rawparse::columnar::{RowFilter, Selection};
use rawparse::container::Table;
use rawparse::dfa::{builtin_dialect, load_spec, DfaSpec, BUILTIN_DIALECTS};
use rawparse::encoding::Encoding;
use rawparse::gen::{generate, GenConfig};
use rawparse::oracle::sequential_parse;
use rawparse::parser::{ModeChoice, ParseOptions, SchemaSpec};
use rawparse::streaming::{Parser, RunStats};
use rawparse::typeconv::{civil_from_days, parse_schema, ColumnSchema, LogicalType, Value};
use rawparse::Error;

create_exception!(rawparse, RawparseError, PyException);
create_exception!(rawparse, ConfigError, RawparseError);
create_exception!(rawparse, DataError, RawparseError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => e.into(),
        e if e.is_data_error() => DataError::new_err(e.to_string()),
        e => ConfigError::new_err(e.to_string()),
    }
}

#[pyclass(module = "rawparse", name = "Dialect", frozen)]
pub struct PyDialect {
    spec: Arc<DfaSpec>,
}

#[pymethods]
impl PyDialect {
    /// One of the shipped dialects.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        builtin_dialect(name)
            .map(|d| PyDialect { spec: Arc::new(d) })
            .ok_or_else(|| {
                ConfigError::new_err(format!(
                    "unknown dialect {name:?}; builtins are {}",
                    BUILTIN_DIALECTS.join(", ")
                ))
            })
    }

    /// A dialect from its JSON DFA spec.
    #[staticmethod]
    fn from_json(doc: &str) -> PyResult<Self> {
        Ok(PyDialect {
            spec: Arc::new(load_spec(doc).map_err(to_py)?),
        })
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.spec.state_names().to_vec()
    }

    #[getter]
    fn start_state(&self) -> String {
        self.spec.state_name(self.spec.start_state()).to_owned()
    }

    #[getter]
    fn invalid_state(&self) -> String {
        self.spec.state_name(self.spec.invalid_state()).to_owned()
    }

    fn __repr__(&self) -> String {
        format!("Dialect(states={:?})", self.spec.state_names())
    }
}

fn dialect_of(obj: Option<&Bound<'_, PyAny>>) -> PyResult<Arc<DfaSpec>> {
    match obj {
        None => Ok(ParseOptions::default().dialect),
        Some(o) => match o.cast::<PyDialect>() {
            Ok(d) => Ok(d.get().spec.clone()),
            Err(_) => Ok(PyDialect::builtin(&o.extract::<String>()?)?.spec),
        },
    }
}

fn schema_of(obj: Option<&Bound<'_, PyAny>>) -> PyResult<SchemaSpec> {
    let Some(o) = obj else {
        return Ok(SchemaSpec::Infer);
    };
    if let Ok(doc) = o.extract::<String>() {
        return Ok(SchemaSpec::Fixed(parse_schema(&doc).map_err(to_py)?));
    }
    let pairs: Vec<(String, String)> = o.extract()?;
    let mut schema = Vec::with_capacity(pairs.len());
    for (name, ty) in pairs {
        schema.push(ColumnSchema::new(name, ty.parse::<LogicalType>().map_err(to_py)?));
    }
    Ok(SchemaSpec::Fixed(schema))
}

#[pyclass(module = "rawparse", name = "Parser", frozen)]
pub struct PyParser {
    opts: ParseOptions,
    parser: Parser,
}

#[pymethods]
impl PyParser {
    #[new]
    #[pyo3(signature = (
        dialect = None,
        *,
        encoding = "utf8",
        chunk_size = None,
        workers = None,
        mode = "auto",
        terminator = 0x1f,
        strict = false,
        schema = None,
        expected_columns = None,
        skip_rows = None,
        skip_records = None,
        columns = None,
        partition_size = None,
        max_carry_over = None,
        big_field_threshold = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        dialect: Option<&Bound<'_, PyAny>>,
        encoding: &str,
        chunk_size: Option<usize>,
        workers: Option<usize>,
        mode: &str,
        terminator: u8,
        strict: bool,
        schema: Option<&Bound<'_, PyAny>>,
        expected_columns: Option<u64>,
        skip_rows: Option<Vec<u64>>,
        skip_records: Option<Vec<u64>>,
        columns: Option<Vec<usize>>,
        partition_size: Option<usize>,
        max_carry_over: Option<usize>,
        big_field_threshold: Option<usize>,
    ) -> PyResult<Self> {
        let d = ParseOptions::default();
        let mut selection = Selection::all();
        if let Some(records) = skip_records {
            selection = selection.skip_records(records);
        }
        if let Some(cols) = columns {
            selection = selection.project(cols).map_err(to_py)?;
        }
        let opts = ParseOptions {
            dialect: dialect_of(dialect)?,
            encoding: encoding.parse::<Encoding>().map_err(to_py)?,
            chunk_size: chunk_size.unwrap_or(d.chunk_size),
            workers: workers.unwrap_or(d.workers),
            mode: mode.parse::<ModeChoice>().map_err(to_py)?,
            terminator,
            strict,
            schema: schema_of(schema)?,
            expected_columns,
            skip_rows: skip_rows.map_or(RowFilter::None, RowFilter::from_set),
            selection,
            partition_size: partition_size.unwrap_or(d.partition_size),
            max_carry_over,
            big_field_threshold: big_field_threshold.unwrap_or(d.big_field_threshold),
            ..d
        };
        let parser = Parser::new(opts.clone()).map_err(to_py)?;
        Ok(PyParser { opts, parser })
    }

    /// Parses an in-memory buffer.
    fn parse(&self, py: Python<'_>, data: &[u8]) -> PyResult<PyTable> {
        let (table, _) = py.detach(|| self.parser.parse(data)).map_err(to_py)?;
        Ok(PyTable { table })
    }

    /// Parses a buffer and returns the table plus run statistics.
    fn parse_with_stats<'py>(
        &self,
        py: Python<'py>,
        data: &[u8],
    ) -> PyResult<(PyTable, Bound<'py, PyDict>)> {
        let (table, stats) = py.detach(|| self.parser.parse(data)).map_err(to_py)?;
        Ok((PyTable { table }, stats_dict(py, &stats)?))
    }

    /// Streams a file through the partition pipeline.
    fn parse_file(&self, py: Python<'_>, path: std::path::PathBuf) -> PyResult<PyTable> {
        let (table, _) = py
            .detach(|| -> rawparse::Result<_> {
                let f = std::fs::File::open(&path)?;
                self.parser.parse_reader(f)
            })
            .map_err(to_py)?;
        Ok(PyTable { table })
    }

    /// Parses with the sequential reference engine.
    fn parse_sequential(&self, py: Python<'_>, data: &[u8]) -> PyResult<PyTable> {
        let out = py
            .detach(|| sequential_parse(data, &self.opts, false))
            .map_err(to_py)?;
        Ok(PyTable { table: out.table })
    }

    #[getter]
    fn chunk_size(&self) -> usize {
        self.opts.chunk_size
    }

    #[getter]
    fn workers(&self) -> usize {
        self.opts.workers
    }
}

fn stats_dict<'py>(py: Python<'py>, s: &RunStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("bytes", s.bytes)?;
    d.set_item("partitions", s.partitions)?;
    d.set_item("records", s.records)?;
    d.set_item("rows", s.rows)?;
    d.set_item("diagnostics", s.diagnostics)?;
    d.set_item("column_range", s.column_range)?;
    d.set_item("modes", s.modes.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    d.set_item("wall", s.wall.as_secs_f64())?;
    let st = &s.stages;
    for (k, v) in [
        ("parse", st.parse),
        ("scan", st.scan),
        ("tag", st.tag),
        ("partition", st.partition),
        ("convert", st.convert),
    ] {
        d.set_item(k, v.as_secs_f64())?;
    }
    Ok(d)
}

fn value_to_py<'py>(py: Python<'py>, v: Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Int64(i) => i.into_pyobject(py)?.into_any(),
        Value::Float64(f) => f.into_pyobject(py)?.into_any(),
        Value::Utf8(s) => s.into_pyobject(py)?.into_any(),
        Value::Date(days) => {
            let (y, m, d) = civil_from_days(days.into());
            PyDate::new(py, y as i32, m as u8, d as u8)?.into_any()
        }
        Value::Timestamp(us) => {
            let secs = us.div_euclid(1_000_000);
            let micros = us.rem_euclid(1_000_000) as u32;
            let (y, m, d) = civil_from_days(secs.div_euclid(86_400));
            let tod = secs.rem_euclid(86_400) as u32;
            PyDateTime::new(
                py,
                y as i32,
                m as u8,
                d as u8,
                (tod / 3600) as u8,
                (tod / 60 % 60) as u8,
                (tod % 60) as u8,
                micros,
                None,
            )?
            .into_any()
        }
    })
}

#[pyclass(module = "rawparse", name = "Table", frozen)]
pub struct PyTable {
    table: Table,
}

impl PyTable {
    fn index_of(&self, key: &Bound<'_, PyAny>) -> PyResult<usize> {
        if let Ok(i) = key.extract::<isize>() {
            let n = self.table.columns.len() as isize;
            let j = if i < 0 { i + n } else { i };
            if !(0..n).contains(&j) {
                return Err(PyIndexError::new_err(format!("column {i} out of range")));
            }
            return Ok(j as usize);
        }
        let name: String = key.extract()?;
        self.table
            .fields
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| PyKeyError::new_err(name))
    }
}

#[pymethods]
impl PyTable {
    /// Reads a table from its container bytes.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyTable {
            table: Table::from_bytes(data).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_rows(&self) -> usize {
        self.table.rows
    }

    #[getter]
    fn num_columns(&self) -> usize {
        self.table.columns.len()
    }

    #[getter]
    fn column_names(&self) -> Vec<String> {
        self.table.fields.iter().map(|f| f.name.clone()).collect()
    }

    #[getter]
    fn types(&self) -> Vec<&'static str> {
        self.table.fields.iter().map(|f| f.ty.name()).collect()
    }

    #[getter]
    fn null_counts(&self) -> Vec<u64> {
        self.table.columns.iter().map(|c| c.null_count).collect()
    }

    /// Values of one column by index or name; nulls are `None`.
    fn column<'py>(&self, py: Python<'py>, key: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyList>> {
        let col = &self.table.columns[self.index_of(key)?];
        let items = (0..col.len)
            .map(|i| col.value(i).map(|v| value_to_py(py, v)).transpose())
            .collect::<PyResult<Vec<_>>>()?;
        PyList::new(py, items)
    }

    fn to_pydict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (j, f) in self.table.fields.iter().enumerate() {
            d.set_item(&f.name, self.column(py, &j.into_pyobject(py)?.into_any())?)?;
        }
        Ok(d)
    }

    /// The table in the binary container format.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.table.to_bytes())
    }

    #[pyo3(signature = (header = false))]
    fn to_csv<'py>(&self, py: Python<'py>, header: bool) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.table.to_csv(header))
    }

    fn __len__(&self) -> usize {
        self.table.rows
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.table == other.table
    }

    fn __repr__(&self) -> String {
        let cols: Vec<String> = self
            .table
            .fields
            .iter()
            .map(|f| format!("{}: {}", f.name, f.ty))
            .collect();
        format!("Table(rows={}, columns=[{}])", self.table.rows, cols.join(", "))
    }
}

/// Generates a seeded synthetic CSV corpus.
#[pyfunction]
#[pyo3(signature = (
    seed = 1,
    size = 1 << 16,
    *,
    columns = 5,
    ragged = false,
    quote_density = 0.2,
    multilingual = false,
    final_newline = true,
    skew = None,
))]
#[allow(clippy::too_many_arguments)]
fn gen<'py>(
    py: Python<'py>,
    seed: u64,
    size: usize,
    columns: usize,
    ragged: bool,
    quote_density: f64,
    multilingual: bool,
    final_newline: bool,
    skew: Option<usize>,
) -> PyResult<Bound<'py, PyBytes>> {
    if !(0.0..=1.0).contains(&quote_density) {
        return Err(ConfigError::new_err("quote_density must be within 0 and 1"));
    }
    let cfg = GenConfig {
        seed,
        target_bytes: size,
        columns,
        ragged,
        quote_density,
        multilingual,
        final_newline,
        skew_field: skew,
        ..Default::default()
    };
    let data = py.detach(|| generate(&cfg));
    Ok(PyBytes::new(py, &data))
}

/// Parses `data` with default options.
#[pyfunction]
#[pyo3(signature = (data, dialect = None))]
fn parse(py: Python<'_>, data: &[u8], dialect: Option<&Bound<'_, PyAny>>) -> PyResult<PyTable> {
    PyParser::new(
        dialect, "utf8", None, None, "auto", 0x1f, false, None, None, None, None, None, None,
        None, None,
    )?
    .parse(py, data)
}

#[pymodule]
#[pyo3(name = "rawparse")]
fn rawparse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDialect>()?;
    m.add_class::<PyParser>()?;
    m.add_class::<PyTable>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add("RawparseError", m.py().get_type::<RawparseError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("BUILTIN_DIALECTS", BUILTIN_DIALECTS.to_vec())?;
    Ok(())
}
