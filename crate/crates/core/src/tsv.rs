//! Plain-text table helpers shared by the bundle and export formats.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

/// Formats a float with 17 significant digits so it parses back exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn push_row(out: &mut String, fields: &[String]) {
    for (k, f) in fields.iter().enumerate() {
        if k > 0 {
            out.push('\t');
        }
        out.push_str(f);
    }
    out.push('\n');
}

pub fn read_to_string(path: &Path) -> Result<String, TableError> {
    std::fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_string(path: &Path, contents: &str) -> Result<(), TableError> {
    std::fs::write(path, contents).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A whitespace-separated field with its 1-based line and column.
#[derive(Debug, Clone, Copy)]
pub struct Field<'a> {
    pub text: &'a str,
    pub line: usize,
    pub column: usize,
}

/// Splits non-comment, non-blank lines into fields with positions.
pub fn records(text: &str) -> impl Iterator<Item = (usize, Vec<Field<'_>>)> {
    text.lines().enumerate().filter_map(|(k, line)| {
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let base = line.as_ptr() as usize;
        let fields = line
            .split_whitespace()
            .map(|t| Field {
                text: t,
                line: k + 1,
                column: t.as_ptr() as usize - base + 1,
            })
            .collect();
        Some((k + 1, fields))
    })
}

impl Field<'_> {
    pub fn error(&self, path: &Path, message: impl Into<String>) -> TableError {
        TableError::Parse {
            path: path.to_path_buf(),
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    pub fn parse_f64(&self, path: &Path) -> Result<f64, TableError> {
        let v: f64 = self
            .text
            .parse()
            .map_err(|_| self.error(path, format!("expected a number, found `{}`", self.text)))?;
        if !v.is_finite() {
            return Err(self.error(path, "non-finite value"));
        }
        Ok(v)
    }

    pub fn parse_usize(&self, path: &Path) -> Result<usize, TableError> {
        self.text
            .parse()
            .map_err(|_| self.error(path, format!("expected a node id, found `{}`", self.text)))
    }
}

/// Checks that a record has exactly `expected` fields.
pub fn expect_fields(
    path: &Path,
    line: usize,
    fields: &[Field<'_>],
    expected: usize,
) -> Result<(), TableError> {
    if fields.len() != expected {
        let column = fields.get(expected).map_or(1, |f| f.column);
        return Err(TableError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message: format!("expected {expected} fields, found {}", fields.len()),
        });
    }
    Ok(())
}

/// Renders a header line followed by rows.
pub fn render(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}", header.join("\t"));
    for row in rows {
        push_row(&mut out, &row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }

    #[test]
    fn records_skip_comments_and_report_columns() {
        let text = "# header\n\n0 1\n  2\t3\n";
        let recs: Vec<_> = records(text).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].1[0].line, 4);
        assert_eq!(recs[1].1[0].column, 3);
        assert_eq!(recs[1].1[1].column, 5);
    }
}
