//! Delimited-text ingestion and export of longitudinal datasets.
//!
//! The expected layout is a comma-separated file with header
//! `subject,y,x1..xp,z1..zq`: one observation per row, rows collected per
//! subject id in whatever order they appear, subjects ordered by first
//! appearance.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LongitudinalDataset, Subject};
use crate::scalar::Scalar;

/// Header layout parsed from the first record: `p` index columns `x1..xp`
/// followed by `q` linear columns `z1..zq`.
struct HeaderShape {
    p: usize,
    q: usize,
}

fn header_error(message: impl Into<String>) -> Error {
    Error::Parse {
        row: 0,
        message: message.into(),
    }
}

fn parse_header(header: &csv::StringRecord) -> Result<HeaderShape> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "subject" || cols[1] != "y" {
        return Err(header_error(
            "header must be subject,y,x1..xp,z1..zq with at least one x column",
        ));
    }
    let mut rest = cols[2..].iter().copied();
    let mut p = 0usize;
    let mut q = 0usize;
    let mut pending: Option<&str> = None;
    for c in rest.by_ref() {
        if c == format!("x{}", p + 1) {
            p += 1;
        } else {
            pending = Some(c);
            break;
        }
    }
    if p == 0 {
        return Err(header_error(
            "header must be subject,y,x1..xp,z1..zq with at least one x column",
        ));
    }
    for c in pending.into_iter().chain(rest) {
        if c == format!("z{}", q + 1) {
            q += 1;
        } else {
            return Err(header_error(format!(
                "unexpected column {c:?}: after subject,y come x1..xp then z1..zq in order"
            )));
        }
    }
    Ok(HeaderShape { p, q })
}

/// Parses one numeric cell; the column name is only used for error text.
fn parse_cell<F: Scalar>(raw: &str, row: usize, column: &str) -> Result<F> {
    let value: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row,
        message: format!("column {column}: cannot parse {raw:?} as a number"),
    })?;
    let cast = F::cast(value);
    if !cast.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("column {column}: value {raw:?} is not finite"),
        });
    }
    Ok(cast)
}

/// Rows of one subject accumulated in file order.
struct SubjectRows<F: Scalar> {
    id: String,
    y: Vec<F>,
    x: Vec<F>,
    z: Vec<F>,
}

/// Reads a dataset in the `subject,y,x1..xp,z1..zq` layout.
///
/// Data rows are numbered from 1 in parse errors; the header is row 0.
pub fn read_dataset<F: Scalar, R: Read>(reader: R) -> Result<LongitudinalDataset<F>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let shape = parse_header(csv_reader.headers().map_err(|e| header_error(e.to_string()))?)?;
    let width = 2 + shape.p + shape.q;

    let mut order: Vec<SubjectRows<F>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in csv_reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                message: "empty subject id".to_string(),
            });
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(SubjectRows {
                id,
                y: Vec::new(),
                x: Vec::new(),
                z: Vec::new(),
            });
            order.len() - 1
        });
        let rows = &mut order[slot];
        rows.y.push(parse_cell(&record[1], row, "y")?);
        for j in 0..shape.p {
            rows.x
                .push(parse_cell(&record[2 + j], row, &format!("x{}", j + 1))?);
        }
        for j in 0..shape.q {
            rows.z.push(parse_cell(
                &record[2 + shape.p + j],
                row,
                &format!("z{}", j + 1),
            )?);
        }
    }

    let subjects = order
        .into_iter()
        .map(|rows| {
            let m = rows.y.len();
            Subject {
                id: rows.id,
                y: DVector::from_vec(rows.y),
                x: DMatrix::from_row_slice(m, shape.p, &rows.x),
                z: DMatrix::from_row_slice(m, shape.q, &rows.z),
            }
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

/// Reads a dataset from a file path.
pub fn read_dataset_path<F: Scalar>(path: impl AsRef<Path>) -> Result<LongitudinalDataset<F>> {
    read_dataset(File::open(path)?)
}

/// Writes a dataset in the layout [`read_dataset`] expects.
///
/// Values are formatted with the shortest representation that parses back to
/// the same number, so a write/read cycle reproduces the dataset exactly.
pub fn write_dataset<F: Scalar, W: Write>(
    dataset: &LongitudinalDataset<F>,
    writer: W,
) -> Result<()> {
    let mut csv_writer = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "y".to_string()];
    header.extend((1..=dataset.p()).map(|j| format!("x{j}")));
    header.extend((1..=dataset.q()).map(|j| format!("z{j}")));
    csv_writer.write_record(&header).map_err(io_error)?;
    for s in dataset.subjects() {
        for k in 0..s.len() {
            let mut record = vec![s.id.clone(), format!("{}", s.y[k].as_f64())];
            record.extend(s.x.row(k).iter().map(|v| format!("{}", v.as_f64())));
            record.extend(s.z.row(k).iter().map(|v| format!("{}", v.as_f64())));
            csv_writer.write_record(&record).map_err(io_error)?;
        }
    }
    csv_writer.flush()?;
    Ok(())
}

/// Writes a dataset to a file path.
pub fn write_dataset_path<F: Scalar>(
    dataset: &LongitudinalDataset<F>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_dataset(dataset, File::create(path)?)
}

fn io_error(e: csv::Error) -> Error {
    Error::InvalidData(format!("cannot write dataset: {e}"))
}
