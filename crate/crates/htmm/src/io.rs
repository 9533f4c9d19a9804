//! CSV trace and matrix files, and atomic output staging.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use htmm_core::nalgebra::DMatrix;
use tempfile::NamedTempFile;

use crate::error::{io_err, Error, Result};

/// 17 significant digits, enough to reproduce every `f64` exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv { path: path.to_path_buf(), message: e.to_string() }
}

fn bad_row(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Csv { path: path.to_path_buf(), message: format!("line {line}: {}", message.into()) }
}

/// Renders rows of cells as CSV with the given header.
pub fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// One trace read from a file, with its replicate index.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub replicate: u64,
    pub y: Vec<f64>,
}

/// Trace CSV: header `t,y`, or `replicate,t,y` for bundles.
pub fn traces_csv(traces: &[TraceRecord]) -> Vec<u8> {
    if let [single] = traces {
        let rows = single.y.iter().enumerate().map(|(t, &v)| vec![(t + 1).to_string(), fmt_f64(v)]);
        return to_csv(&["t", "y"], rows);
    }
    let rows = traces.iter().flat_map(|tr| {
        tr.y.iter().enumerate().map(move |(t, &v)| vec![tr.replicate.to_string(), (t + 1).to_string(), fmt_f64(v)])
    });
    to_csv(&["replicate", "t", "y"], rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| bad_row(path, line, format!("cannot parse {name} from `{s}`")))
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_owned).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(t_col), Some(y_col)) = (col("t"), col("y")) else {
        return Err(Error::Csv { path: path.to_path_buf(), message: "header must contain `t` and `y`".into() });
    };
    let rep_col = col("replicate");

    let mut traces: Vec<TraceRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).ok_or_else(|| bad_row(path, line, "missing column"));
        let replicate: u64 = match rep_col {
            Some(i) => parse_field(path, line, "replicate", field(i)?)?,
            None => 0,
        };
        let t: usize = parse_field(path, line, "t", field(t_col)?)?;
        let y: f64 = parse_field(path, line, "y", field(y_col)?)?;
        if !y.is_finite() {
            return Err(bad_row(path, line, "y must be finite"));
        }
        let trace = match traces.last_mut() {
            Some(tr) if tr.replicate == replicate => tr,
            _ => {
                if traces.iter().any(|tr| tr.replicate == replicate) {
                    return Err(bad_row(path, line, format!("rows of replicate {replicate} are not contiguous")));
                }
                traces.push(TraceRecord { replicate, y: Vec::new() });
                traces.last_mut().expect("just pushed")
            }
        };
        if t != trace.y.len() + 1 {
            return Err(bad_row(path, line, format!("expected t = {}, found {t}", trace.y.len() + 1)));
        }
        trace.y.push(y);
    }
    if traces.is_empty() {
        return Err(Error::Invalid(format!("{}: trace file has no rows", path.display())));
    }
    Ok(traces)
}

/// Square matrix CSV: header `t,1,..,T`, then one row per `t`.
pub fn matrix_csv(m: &DMatrix<f64>) -> Vec<u8> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=m.ncols()).map(|c| c.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..m.nrows()).map(|i| {
        let mut row = vec![(i + 1).to_string()];
        row.extend(m.row(i).iter().map(|&v| fmt_f64(v)));
        row
    });
    to_csv(&header, rows)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let n = rdr.headers().map_err(csv_err(path))?.len().saturating_sub(1);
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        for s in rec.iter().skip(1) {
            values.push(parse_field::<f64>(path, line, "entry", s)?);
        }
        rows += 1;
    }
    if rows != n || values.len() != n * n {
        return Err(Error::Csv { path: path.to_path_buf(), message: format!("expected a {n}x{n} matrix") });
    }
    Ok(DMatrix::from_row_slice(n, n, &values))
}

/// Numeric columns of a CSV with a header, by name.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header.iter().position(|h| h == *n).ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                message: format!("missing column `{n}`"),
            })
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        for ((col, &i), name) in cols.iter_mut().zip(&idx).zip(names) {
            let s = rec.get(i).ok_or_else(|| bad_row(path, line, "missing column"))?;
            col.push(parse_field(path, line, name, s)?);
        }
    }
    Ok(cols)
}

/// Outputs held in memory until every one of them has been produced, then
/// written through temporary files and renamed into place.
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}
