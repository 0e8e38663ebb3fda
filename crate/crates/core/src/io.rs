//! Plain-text and CSV formats shared by datasets, models, policies and curves.
//!
//! Floats are always written with 17 significant digits so that a write/read
//! cycle is exact.

use std::io::{BufRead, Write};

use crate::env::TransitionSample;
use crate::error::{Error, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn join_f64(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

/// Numbered, trimmed, non-empty lines of a reader.
pub(crate) fn read_lines<R: BufRead>(reader: R) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() {
            out.push((i + 1, t.to_string()));
        }
    }
    Ok(out)
}

pub(crate) fn parse_row(line_no: usize, line: &str, expected: Option<usize>) -> Result<Vec<f64>> {
    let row = line
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse { line: line_no, msg: format!("`{}` is not a number", f.trim()) })
        })
        .collect::<Result<Vec<f64>>>()?;
    if let Some(n) = expected {
        if row.len() != n {
            return Err(Error::Parse { line: line_no, msg: format!("expected {n} fields, found {}", row.len()) });
        }
    }
    Ok(row)
}

pub(crate) fn expect_header(line_no: usize, line: &str, expected: &str) -> Result<()> {
    if line != expected {
        return Err(Error::Parse { line: line_no, msg: format!("expected header `{expected}`, found `{line}`") });
    }
    Ok(())
}

pub(crate) fn parse_usize(line_no: usize, x: f64, what: &str) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(Error::Parse { line: line_no, msg: format!("{what} must be a non-negative integer") })
    }
}

pub(crate) fn missing(line_no: usize, what: &str) -> Error {
    Error::Parse { line: line_no, msg: format!("unexpected end of input, expected {what}") }
}

fn columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

pub fn dataset_header(d_s: usize, d_a: usize) -> String {
    transition_columns(d_s, d_a, d_s)
}

pub(crate) fn transition_columns(d_s: usize, d_a: usize, d_out: usize) -> String {
    columns("s", d_s).chain(columns("a", d_a)).chain(columns("s_next", d_out)).collect::<Vec<_>>().join(",")
}

/// Writes transitions as CSV: `s0..,a0..,s_next0..` with a header row.
pub fn write_dataset<W: Write>(mut w: W, samples: &[TransitionSample]) -> Result<()> {
    let first = samples.first().ok_or(Error::EmptyInput("dataset"))?;
    let (d_s, d_a) = (first.s.len(), first.a.len());
    writeln!(w, "{}", dataset_header(d_s, d_a))?;
    for t in samples {
        if t.s.len() != d_s || t.a.len() != d_a || t.s_next.len() != d_s {
            return Err(Error::DimensionMismatch { what: "dataset row", expected: d_s, got: t.s.len() });
        }
        let row = t.s.iter().chain(&t.a).chain(&t.s_next).copied();
        writeln!(w, "{}", join_f64(row))?;
    }
    Ok(())
}

/// Reads a transition CSV, inferring dimensions from the header.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<TransitionSample>> {
    let lines = read_lines(reader)?;
    let (hline, header) = lines.first().ok_or_else(|| missing(1, "dataset header"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let count = |p: &str| names.iter().filter(|n| strip_index(n, p)).count();
    let (d_s, d_a, d_n) = (count("s"), count("a"), count("s_next"));
    if d_s == 0 || d_a == 0 || d_s != d_n || names.len() != d_s + d_a + d_n {
        return Err(Error::Parse { line: *hline, msg: format!("malformed dataset header `{header}`") });
    }
    expect_header(*hline, header, &dataset_header(d_s, d_a))?;
    let mut out = Vec::with_capacity(lines.len() - 1);
    for (no, line) in &lines[1..] {
        let row = parse_row(*no, line, Some(2 * d_s + d_a))?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: *no, msg: "non-finite value".into() });
        }
        out.push(TransitionSample {
            s: row[..d_s].to_vec(),
            a: row[d_s..d_s + d_a].to_vec(),
            s_next: row[d_s + d_a..].to_vec(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("dataset has no rows"));
    }
    Ok(out)
}

fn strip_index(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_roundtrip_is_exact() {
        let samples = vec![
            TransitionSample { s: vec![0.1], a: vec![-4.999999999999], s_next: vec![1.0 / 3.0] },
            TransitionSample { s: vec![9.0], a: vec![2.5], s_next: vec![10.0] },
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s0,a0,s_next0\n"));
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "s0,a0,s_next0\n1,2,3\n1,x,3\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "s0,a0,s_next0\n1,2\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_dataset("s0,a0\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn multi_dimensional_header() {
        assert_eq!(dataset_header(2, 1), "s0,s1,a0,s_next0,s_next1");
    }
}
