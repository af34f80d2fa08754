//! CSV reading and writing of count and rate matrices.
//!
//! Layout: header `date,dow,<interval labels…>`, then one row per day with
//! the weekday code (1–5) and the per-interval values.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CountMatrix, Weekday};

struct Table {
    labels: Vec<String>,
    dates: Vec<String>,
    days: Vec<Weekday>,
    cells: Vec<Vec<String>>,
    /// 1-based file line of each data row.
    lines: Vec<usize>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file")),
    };
    if header.len() < 3 || &header[0] != "date" || &header[1] != "dow" {
        return Err(parse_err(1, "header must be date,dow,<interval labels>"));
    }
    let labels: Vec<String> = header.iter().skip(2).map(str::to_owned).collect();
    let width = header.len();
    let mut t = Table {
        labels,
        dates: Vec::new(),
        days: Vec::new(),
        cells: Vec::new(),
        lines: Vec::new(),
    };
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(t.lines.len() + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("{} fields, header has {width}", rec.len()),
            ));
        }
        let code: u8 = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("dow {:?} is not an integer", &rec[1])))?;
        let day = Weekday::new(code).map_err(|_| parse_err(line, format!("dow {code} outside 1..=5")))?;
        t.dates.push(rec[0].to_owned());
        t.days.push(day);
        t.cells.push(rec.iter().skip(2).map(str::to_owned).collect());
        t.lines.push(line);
    }
    Ok(t)
}

/// Parses a count matrix from CSV text or any reader.
pub fn read_counts_from<R: Read>(reader: R) -> Result<CountMatrix> {
    let t = read_table(reader)?;
    let (n, m) = (t.days.len(), t.labels.len());
    let mut values = Vec::with_capacity(n * m);
    for (row, line) in t.cells.iter().zip(&t.lines) {
        for (j, cell) in row.iter().enumerate() {
            let v: u64 = cell.parse().map_err(|_| {
                parse_err(*line, format!("column {} value {cell:?} is not a nonnegative integer", j + 3))
            })?;
            values.push(v);
        }
    }
    CountMatrix::with_labels(n, m, values, t.days, t.labels, t.dates)
}

pub fn read_counts(path: &Path) -> Result<CountMatrix> {
    read_counts_from(std::fs::File::open(path)?)
}

/// Last row of a count CSV as a partial day: the interval labels of its
/// columns, its weekday and its counts. Unlike [`read_counts_from`], a
/// single data row is enough.
pub fn read_partial_from<R: Read>(reader: R) -> Result<(Vec<String>, Weekday, Vec<u64>)> {
    let t = read_table(reader)?;
    let (row, line) = match (t.cells.last(), t.lines.last()) {
        (Some(r), Some(l)) => (r, *l),
        _ => return Err(parse_err(2, "no data row")),
    };
    let counts = row
        .iter()
        .enumerate()
        .map(|(j, cell)| {
            cell.parse::<u64>().map_err(|_| {
                parse_err(line, format!("column {} value {cell:?} is not a nonnegative integer", j + 3))
            })
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok((t.labels, *t.days.last().expect("row present"), counts))
}

pub fn read_partial(path: &Path) -> Result<(Vec<String>, Weekday, Vec<u64>)> {
    read_partial_from(std::fs::File::open(path)?)
}

/// Parses a real-valued matrix in the count layout (e.g. hidden rates).
pub fn read_rates_from<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let t = read_table(reader)?;
    t.cells
        .iter()
        .zip(&t.lines)
        .map(|(row, line)| {
            row.iter()
                .enumerate()
                .map(|(j, cell)| {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(*line, format!("column {} value {cell:?} is not a number", j + 3)))
                })
                .collect()
        })
        .collect()
}

pub fn read_rates(path: &Path) -> Result<Vec<Vec<f64>>> {
    read_rates_from(std::fs::File::open(path)?)
}

fn header(labels: &[String]) -> String {
    let mut s = String::from("date,dow");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    s
}

pub fn counts_to_csv(counts: &CountMatrix) -> String {
    let mut out = header(counts.interval_labels());
    for i in 0..counts.n() {
        out.push_str(&format!("{},{}", counts.dates()[i], counts.day(i).code()));
        for v in counts.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Rates in the layout of `like` (same dates, weekdays and labels).
pub fn rates_to_csv(rates: &[Vec<f64>], like: &CountMatrix) -> Result<String> {
    if rates.len() != like.n() || rates.iter().any(|r| r.len() != like.m()) {
        return Err(Error::Shape("rates do not match the count layout".into()));
    }
    let mut out = header(like.interval_labels());
    for (i, row) in rates.iter().enumerate() {
        out.push_str(&format!("{},{}", like.dates()[i], like.day(i).code()));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
