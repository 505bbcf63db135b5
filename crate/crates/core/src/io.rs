//! Reading and writing correlation matrices and genotype tables.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corrmat::CorrelationMatrix;
use crate::dataset::GenotypeDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenotypeFormat {
    /// Comma-separated, one row per sample, one column per marker, entries
    /// 0/1/2/NA, optional header of marker ids.
    MatrixCsv,
    /// Whitespace-delimited: sample id, phenotype, then additive codes.
    /// An optional header names the markers.
    AdditiveRaw,
}

impl std::str::FromStr for GenotypeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "matrix-csv" | "csv" => Ok(GenotypeFormat::MatrixCsv),
            "additive-raw" | "raw" => Ok(GenotypeFormat::AdditiveRaw),
            other => Err(Error::InvalidParameter(format!("unknown genotype format '{other}'"))),
        }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field, "NA" | "na" | "NaN" | "nan" | "." | "")
}

fn parse_call(field: &str, row: usize, col: usize) -> Result<Option<u8>> {
    match field.trim() {
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        "2" => Ok(Some(2)),
        f if is_missing(f) => Ok(None),
        f => Err(Error::Parse { row, col, msg: format!("'{f}' is not a genotype (0, 1, 2 or NA)") }),
    }
}

fn parse_number(field: &str, row: usize, col: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse { row, col, msg: format!("'{}' is not a number", field.trim()) })
}

fn delimiter_for(text: &str) -> u8 {
    let first = text.lines().next().unwrap_or("");
    if first.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn records(text: &str, delimiter: u8) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        out.push(rec.iter().map(|s| s.trim().to_owned()).collect());
    }
    Ok(out)
}

/// A numeric table with optional column names and row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub values: DMatrix<f64>,
    pub columns: Option<Vec<String>>,
    pub rows: Option<Vec<String>>,
}

/// Parses comma- or tab-separated numbers. A first row containing any
/// non-numeric field is a header; a non-numeric first field in every data
/// row is a row label.
pub fn parse_numeric_table(text: &str) -> Result<NumericTable> {
    let mut recs = records(text, delimiter_for(text))?;
    let header = match recs.first() {
        Some(first) if first.iter().any(|f| f.parse::<f64>().is_err()) => Some(recs.remove(0)),
        _ => None,
    };
    if recs.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let labelled = recs.iter().all(|r| r.first().is_some_and(|f| f.parse::<f64>().is_err()));
    let skip = usize::from(labelled);
    let width = recs[0].len() - skip;
    let offset = 1 + usize::from(header.is_some());
    let mut values = DMatrix::zeros(recs.len(), width);
    let mut labels = Vec::new();
    for (i, rec) in recs.iter().enumerate() {
        if rec.len() - skip != width {
            return Err(Error::Data(format!(
                "row {} has {} fields, expected {}",
                i + offset,
                rec.len() - skip,
                width
            )));
        }
        if labelled {
            labels.push(rec[0].clone());
        }
        for (j, f) in rec[skip..].iter().enumerate() {
            values[(i, j)] = parse_number(f, i + offset, j + 1 + skip)?;
        }
    }
    let columns = header.map(|mut h| {
        if h.len() == width + 1 {
            h.remove(0);
        }
        h
    });
    if let Some(c) = &columns {
        if c.len() != width {
            return Err(Error::Data(format!("header has {} names for {width} columns", c.len())));
        }
    }
    Ok(NumericTable { values, columns, rows: labelled.then_some(labels) })
}

pub fn read_numeric_table(path: &Path) -> Result<NumericTable> {
    parse_numeric_table(&fs::read_to_string(path)?)
}

/// Square correlation matrix and its marker names, if the file has them.
pub fn read_correlation_matrix(path: &Path) -> Result<(CorrelationMatrix, Option<Vec<String>>)> {
    let table = read_numeric_table(path)?;
    let names = table.columns.or(table.rows);
    Ok((CorrelationMatrix::new(table.values)?, names))
}

/// Writes a matrix as CSV with a header of marker names (m1.. by default).
pub fn write_matrix_csv(w: &mut impl Write, values: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let default: Vec<String>;
    let names = match names {
        Some(n) => n,
        None => {
            default = (1..=values.ncols()).map(|j| format!("m{j}")).collect();
            &default
        }
    };
    out.write_record(names)?;
    for row in values.row_iter() {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_correlation_matrix(path: &Path, r: &CorrelationMatrix, names: Option<&[String]>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write_matrix_csv(&mut file, r.values(), names)
}

/// Parses a genotype table held in memory.
pub fn parse_genotype_table(text: &str, format: GenotypeFormat) -> Result<GenotypeDataset> {
    match format {
        GenotypeFormat::MatrixCsv => parse_matrix_csv(text),
        GenotypeFormat::AdditiveRaw => parse_additive_raw(text),
    }
}

pub fn load_genotype_table(path: &Path, format: GenotypeFormat) -> Result<GenotypeDataset> {
    parse_genotype_table(&fs::read_to_string(path)?, format)
}

fn parse_matrix_csv(text: &str) -> Result<GenotypeDataset> {
    let mut recs = records(text, delimiter_for(text))?;
    let header = match recs.first() {
        Some(first) if first.iter().any(|f| parse_call(f, 0, 0).is_err()) => Some(recs.remove(0)),
        _ => None,
    };
    if recs.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let offset = 1 + usize::from(header.is_some());
    let m = recs[0].len();
    let mut calls = Vec::with_capacity(recs.len() * m);
    for (i, rec) in recs.iter().enumerate() {
        if rec.len() != m {
            return Err(Error::Data(format!("row {} has {} fields, expected {m}", i + offset, rec.len())));
        }
        for (j, f) in rec.iter().enumerate() {
            calls.push(parse_call(f, i + offset, j + 1)?);
        }
    }
    let n = recs.len();
    let data = GenotypeDataset::new(n, m, calls)?;
    match header {
        Some(h) if h.len() != m => Err(Error::Data(format!("header has {} names for {m} markers", h.len()))),
        Some(h) => {
            let samples = data.sample_ids.clone();
            data.with_ids(samples, h)
        }
        None => Ok(data),
    }
}

fn parse_additive_raw(text: &str) -> Result<GenotypeDataset> {
    let mut lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty())
        .collect();
    let header = match lines.first() {
        Some((_, f)) if f.len() >= 2 && f[1].parse::<f64>().is_err() => Some(lines.remove(0).1),
        _ => None,
    };
    if lines.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let width = lines[0].1.len();
    if width < 3 {
        return Err(Error::Data("additive table needs sample id, phenotype and at least one marker".into()));
    }
    let m = width - 2;
    let mut calls = Vec::with_capacity(lines.len() * m);
    let mut samples = Vec::with_capacity(lines.len());
    let mut phenotype = Vec::with_capacity(lines.len());
    for (line, fields) in &lines {
        if fields.len() != width {
            return Err(Error::Data(format!("row {line} has {} fields, expected {width}", fields.len())));
        }
        samples.push(fields[0].to_owned());
        phenotype.push(parse_number(fields[1], *line, 2)?);
        for (j, f) in fields[2..].iter().enumerate() {
            calls.push(parse_call(f, *line, j + 3)?);
        }
    }
    let markers = match header {
        Some(h) if h.len() != width => {
            return Err(Error::Data(format!("header has {} fields, expected {width}", h.len())))
        }
        Some(h) => h[2..].iter().map(|s| s.to_string()).collect(),
        None => (1..=m).map(|j| format!("m{j}")).collect(),
    };
    GenotypeDataset::new(lines.len(), m, calls)?.with_ids(samples, markers)?.with_phenotype(phenotype)
}

fn call_text(c: Option<u8>) -> String {
    c.map_or_else(|| "NA".to_owned(), |v| v.to_string())
}

/// Serializes a dataset; the inverse of [`parse_genotype_table`].
pub fn format_genotype_table(data: &GenotypeDataset, format: GenotypeFormat) -> Result<String> {
    let (n, m) = (data.n_samples(), data.n_markers());
    let mut out = String::new();
    match format {
        GenotypeFormat::MatrixCsv => {
            out.push_str(&data.marker_ids.join(","));
            out.push('\n');
            for i in 0..n {
                let row: Vec<String> = (0..m).map(|j| call_text(data.get(i, j))).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        GenotypeFormat::AdditiveRaw => {
            let y = data
                .phenotype
                .as_ref()
                .ok_or_else(|| Error::Data("the additive format needs a phenotype".into()))?;
            out.push_str("IID PHENOTYPE ");
            out.push_str(&data.marker_ids.join(" "));
            out.push('\n');
            for i in 0..n {
                out.push_str(&format!("{} {}", data.sample_ids[i], y[i]));
                for j in 0..m {
                    out.push(' ');
                    out.push_str(&call_text(data.get(i, j)));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn write_genotype_table(path: &Path, data: &GenotypeDataset, format: GenotypeFormat) -> Result<()> {
    fs::write(path, format_genotype_table(data, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matrix_csv_with_missing_call() {
        let d = parse_genotype_table("0,1\n2,NA\n1,0", GenotypeFormat::MatrixCsv).unwrap();
        assert_eq!((d.n_samples(), d.n_markers()), (3, 2));
        assert_eq!(d.get(1, 1), None);
        assert_eq!(d.calls().iter().filter(|c| c.is_none()).count(), 1);
        assert_eq!(d.get(1, 0), Some(2));
    }

    #[test]
    fn empty_inputs_have_no_data_rows() {
        for format in [GenotypeFormat::MatrixCsv, GenotypeFormat::AdditiveRaw] {
            let err = parse_genotype_table("", format).unwrap_err();
            assert_eq!(err.to_string(), "no data rows");
        }
        assert_eq!(parse_numeric_table("a,b\n").unwrap_err().to_string(), "no data rows");
    }

    #[test]
    fn bad_entries_report_coordinates() {
        match parse_genotype_table("snp1,snp2\n0,1\n1,3\n", GenotypeFormat::MatrixCsv) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (3, 2)),
            other => panic!("{other:?}"),
        }
        let err = parse_genotype_table("0,1\n1\n", GenotypeFormat::MatrixCsv).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn additive_raw_with_header() {
        let text = "IID PHENOTYPE rs1 rs2\nA 0.5 0 2\nB -1 NA 1\n";
        let d = parse_genotype_table(text, GenotypeFormat::AdditiveRaw).unwrap();
        assert_eq!(d.marker_ids, vec!["rs1", "rs2"]);
        assert_eq!(d.sample_ids, vec!["A", "B"]);
        assert_eq!(d.phenotype.as_deref(), Some(&[0.5, -1.0][..]));
        assert_eq!(d.get(1, 0), None);
        assert_eq!(format_genotype_table(&d, GenotypeFormat::AdditiveRaw).unwrap(), text);
    }

    #[test]
    fn numeric_table_with_labels_and_tabs() {
        let t = parse_numeric_table("\ta\tb\na\t1\t0.25\nb\t0.25\t1\n").unwrap();
        assert_eq!(t.columns.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(t.rows.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert_eq!(t.values[(0, 1)], 0.25);
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let r = crate::corrmat::StructuredSpec::ar1(0.37, 6).unwrap().build().unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, r.values(), None).unwrap();
        let t = parse_numeric_table(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(&t.values, r.values());
        assert_eq!(t.columns.unwrap()[5], "m6");
    }
}
