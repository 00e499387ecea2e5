//! CSV and JSON persistence for datasets, ensembles and metric records.
//!
//! Floats are written in Rust's shortest round-trip form, so a write/read
//! cycle reproduces every value bit for bit.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::{PairedDataset, Split};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })
}

/// Writes a headed numeric table.
pub fn write_matrix_csv(path: &Path, header: &[String], data: ArrayView2<f64>) -> Result<()> {
    if header.len() != data.ncols() {
        return Err(Error::DimensionMismatch {
            expected: data.ncols(),
            actual: header.len(),
            context: "CSV header",
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io_err)?;
    let mut record = Vec::with_capacity(data.ncols());
    for row in data.rows() {
        record.clear();
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a headed numeric table preceded by one `# `-prefixed comment line.
pub fn write_annotated_csv(
    path: &Path,
    comment: &str,
    header: &[String],
    data: ArrayView2<f64>,
) -> Result<()> {
    if comment.contains('\n') {
        return Err(Error::InvalidArgument(
            "CSV comment must be a single line".into(),
        ));
    }
    write_matrix_csv(path, header, data)?;
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = format!("# {comment}\n").into_bytes();
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a headed numeric table written by [`write_matrix_csv`] or by
/// another tool with the same shape. Lines starting with `#` are skipped.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(open(path)?);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        if rec.len() != cols {
            return Err(format_err(
                path,
                format!(
                    "row {} has {} fields, header has {cols}",
                    line + 2,
                    rec.len()
                ),
            ));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(path, format!("row {}: `{field}` is not a number", line + 2))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let data = Array2::from_shape_vec((rows, cols), values).expect("row-major values");
    Ok((header, data))
}

/// Column names `prefix1..prefixN`.
pub fn column_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes `x` columns followed by `y` columns, headed `x1.. y1..`.
pub fn write_dataset_csv(path: &Path, data: &PairedDataset) -> Result<()> {
    let mut header = column_names("x", data.x_dim());
    header.extend(column_names("y", data.y_dim()));
    let joint = ndarray::concatenate(ndarray::Axis(1), &[data.x.view(), data.y.view()])
        .expect("row counts match");
    write_matrix_csv(path, &header, joint.view())
}

/// Reads a paired dataset; columns whose names start with `x` are states and
/// those starting with `y` are measurements, each in header order.
pub fn read_dataset_csv(path: &Path, split: Split) -> Result<PairedDataset> {
    let (header, data) = read_matrix_csv(path)?;
    let xs: Vec<usize> = (0..header.len())
        .filter(|&j| header[j].starts_with('x'))
        .collect();
    let ys: Vec<usize> = (0..header.len())
        .filter(|&j| header[j].starts_with('y'))
        .collect();
    if xs.is_empty() || ys.is_empty() || xs.len() + ys.len() != header.len() {
        return Err(format_err(
            path,
            format!("expected x* and y* columns only, found {header:?}"),
        ));
    }
    if data.nrows() == 0 {
        return Err(format_err(path, "no data rows"));
    }
    let x = data.select(ndarray::Axis(1), &xs);
    let y = data.select(ndarray::Axis(1), &ys);
    PairedDataset::new(x, y, split).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| format_err(path, e.to_string()))
}

/// Appends one compact JSON record and a newline.
pub fn append_jsonl<T: Serialize + ?Sized>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cfm-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let d = PairedDataset::new(
            array![[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]],
            array![[std::f64::consts::PI], [-0.0]],
            Split::Train,
        )
        .unwrap();
        let p = tmp("d.csv");
        write_dataset_csv(&p, &d).unwrap();
        let back = read_dataset_csv(&p, Split::Train).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let p = tmp("bad.csv");
        std::fs::write(&p, "x1,y1\n1.0,abc\n").unwrap();
        assert!(matches!(
            read_dataset_csv(&p, Split::Test),
            Err(Error::Format { .. })
        ));
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(
            read_dataset_csv(&p, Split::Test),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_dataset_csv(&tmp("missing.csv"), Split::Test),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn annotated_csv_reads_back() {
        let p = tmp("a.csv");
        let m = array![[1.5, -2.0], [0.25, 3.0]];
        write_annotated_csv(&p, "y_hat=0.5", &column_names("x", 2), m.view()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# y_hat=0.5\nx1,x2\n"));
        let (h, back) = read_matrix_csv(&p).unwrap();
        assert_eq!(h, column_names("x", 2));
        assert_eq!(back, m);
    }

    #[test]
    fn jsonl_appends_lines() {
        let p = tmp("m.jsonl");
        let _ = std::fs::remove_file(&p);
        append_jsonl(&p, &serde_json::json!({"a": 1})).unwrap();
        append_jsonl(&p, &serde_json::json!({"a": 2})).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"a\":1}\n{\"a\":2}\n");
    }
}
