//! Delimited text tables: first row header, first column sample id.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SurfError};

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    /// Header names of the value columns (the id column excluded).
    pub columns: Vec<String>,
    pub row_ids: Vec<String>,
    /// Cells by row, aligned with `columns`.
    pub cells: Vec<Vec<String>>,
}

fn delimiter_for(path: &Path, first_line: &str) -> u8 {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("tsv") | Some("tab") => b'\t',
        Some("csv") => b',',
        _ if first_line.contains('\t') => b'\t',
        _ => b',',
    }
}

pub fn read_table(path: &Path) -> Result<RawTable> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let first = text.lines().next().unwrap_or("");
    let delim = delimiter_for(path, first);
    parse_table(text.as_bytes(), delim)
}

pub fn parse_table<R: Read>(reader: R, delimiter: u8) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(SurfError::Parse {
            row: 1,
            column: String::new(),
            message: "table needs a sample id column and at least one value column".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = std::collections::HashSet::new();
    for c in &columns {
        if !seen.insert(c.as_str()) {
            return Err(SurfError::Parse {
                row: 1,
                column: c.clone(),
                message: "duplicate column name".into(),
            });
        }
    }
    let mut row_ids = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut it = rec.iter();
        row_ids.push(it.next().unwrap_or("").to_string());
        cells.push(it.map(str::to_string).collect());
    }
    Ok(RawTable {
        columns,
        row_ids,
        cells,
    })
}

impl RawTable {
    pub fn nrows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Parses one column as numbers. Rows are reported 1-based counting the
    /// header as row 1.
    pub fn numeric_column(&self, j: usize) -> Result<Vec<f64>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let cell = &row[j];
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| SurfError::Parse {
                        row: i + 2,
                        column: self.columns[j].clone(),
                        message: format!("`{cell}` is not a finite number"),
                    })
            })
            .collect()
    }

    /// All value columns as an `n x p` matrix.
    pub fn numeric_matrix(&self) -> Result<Array2<f64>> {
        let (n, p) = (self.nrows(), self.columns.len());
        let mut m = Array2::zeros((n, p));
        for j in 0..p {
            for (i, v) in self.numeric_column(j)?.into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        Ok(m)
    }
}
