//! Plain-text data files: a CSV with a header row, continuous cells as
//! decimals, categorical cells as 1-based levels and `NA` for missing
//! cells, plus a JSON sidecar giving each column's type.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Dataset, Mask, VariableSchema};

pub const NA: &str = "NA";

pub fn read_schema(path: &Path) -> Result<VariableSchema> {
    let schema: VariableSchema = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Parse a data file against its schema. Headers must match the schema's
/// column names in order.
pub fn read_dataset<R: Read>(reader: R, schema: &VariableSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != schema.names() {
        return Err(Error::Schema(format!("header {:?} does not match schema columns {:?}", header, schema.names())));
    }
    let d = schema.d();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Schema(format!("row {} has {} fields, expected {d}", r + 1, rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            if field == NA {
                values.push(f64::NAN);
                missing.push(true);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Schema(format!("row {}, column `{}`: cannot parse `{field}`", r + 1, schema.columns[j].name))
            })?;
            let v = match schema.levels(j) {
                None if v.is_finite() => v,
                None => return Err(Error::Schema(format!("row {}, column `{}`: non-finite value", r + 1, schema.columns[j].name))),
                Some(m) => {
                    if v.fract() != 0.0 || v < 1.0 || v > m as f64 {
                        return Err(Error::Schema(format!(
                            "row {}, column `{}`: level `{field}` outside 1..={m}",
                            r + 1,
                            schema.columns[j].name
                        )));
                    }
                    v - 1.0
                }
            };
            values.push(v);
            missing.push(false);
        }
    }
    let n = values.len() / d;
    if n == 0 {
        return Err(Error::Schema("data file has no rows".into()));
    }
    Dataset::new(
        schema.clone(),
        DMatrix::from_row_slice(n, d, &values),
        Mask::from_row_slice(n, d, &missing),
    )
}

pub fn load_dataset(data: &Path, schema: &Path) -> Result<Dataset> {
    let schema = read_schema(schema)?;
    read_dataset(BufReader::new(File::open(data)?), &schema)
}

/// Continuous cells are written with the shortest representation that
/// parses back to the same float, so files round-trip exactly.
pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(data.schema().names())?;
    let schema = data.schema();
    for i in 0..data.n() {
        let row: Vec<String> = (0..data.d())
            .map(|j| {
                if data.is_missing(i, j) {
                    NA.to_owned()
                } else {
                    cell(data.values()[(i, j)], schema.levels(j).is_some())
                }
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cell(v: f64, categorical: bool) -> String {
    if categorical {
        format!("{}", v as usize + 1)
    } else {
        format!("{v}")
    }
}

pub fn save_dataset(dir: &Path, stem: &str, data: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?), data)?;
    write_json(&dir.join("schema.json"), data.schema())
}

/// Fully observed values with a trailing 1-based `class` column.
pub fn write_truth<W: Write>(writer: W, schema: &VariableSchema, values: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != values.nrows() {
        return Err(Error::LengthMismatch { left: labels.len(), right: values.nrows() });
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = schema.names();
    header.push("class".into());
    w.write_record(&header)?;
    for (i, z) in labels.iter().enumerate() {
        let mut row: Vec<String> = (0..values.ncols()).map(|j| cell(values[(i, j)], schema.levels(j).is_some())).collect();
        row.push((z + 1).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_truth`]: the complete values and 0-based classes.
pub fn read_truth<R: Read>(reader: R, schema: &VariableSchema) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut want = schema.names();
    want.push("class".into());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != want {
        return Err(Error::Schema(format!("truth header {header:?}, expected {want:?}")));
    }
    let d = schema.d();
    let (mut values, mut labels) = (Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for j in 0..d {
            let f = &rec[j];
            let v: f64 = f.parse().map_err(|_| Error::Schema(format!("truth row {}: cannot parse `{f}`", r + 1)))?;
            values.push(if schema.levels(j).is_some() { v - 1.0 } else { v });
        }
        let z: usize = rec[d].parse().map_err(|_| Error::Schema(format!("truth row {}: bad class `{}`", r + 1, &rec[d])))?;
        if z == 0 {
            return Err(Error::Schema(format!("truth row {}: classes are 1-based", r + 1)));
        }
        labels.push(z - 1);
    }
    Ok((DMatrix::from_row_slice(labels.len(), d, &values), labels))
}

/// Labels from a CSV: the `class` column when present, otherwise the only
/// column. Labels are read as written (any integer coding).
pub fn read_partition<R: Read>(reader: R) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = match header.iter().position(|h| h == "class") {
        Some(c) => c,
        None if header.len() == 1 => 0,
        None => return Err(Error::Schema(format!("no `class` column among {:?}", header.iter().collect::<Vec<_>>()))),
    };
    rdr.records()
        .enumerate()
        .map(|(r, rec)| {
            let rec = rec?;
            let f = rec.get(col).unwrap_or("");
            f.parse::<usize>().map_err(|_| Error::Schema(format!("row {}: class label `{f}` is not a non-negative integer", r + 1)))
        })
        .collect()
}

pub fn load_partition(path: &Path) -> Result<Vec<usize>> {
    read_partition(BufReader::new(File::open(path)?))
}

/// One `class` column, 1-based.
pub fn write_partition<W: Write>(writer: W, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class"])?;
    for z in labels {
        w.write_record([(z + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Numeric matrix with the given header.
pub fn write_matrix<W: Write>(writer: W, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::LengthMismatch { left: header.len(), right: m.ncols() });
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
