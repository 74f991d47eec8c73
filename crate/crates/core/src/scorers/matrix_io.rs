//! TSV serialization for L×20 matrices: a header row holding the 20 alphabet
//! letters, then one tab-separated row of values per position.

use super::{Row, ScorerError};
use crate::seqcore::{ALPHABET, ALPHABET_SIZE};

pub fn write_matrix_tsv(rows: &[Row]) -> String {
    let mut out = String::new();
    let header: Vec<String> = ALPHABET.iter().map(|&b| (b as char).to_string()).collect();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_tsv(text: &str) -> Result<Vec<Row>, ScorerError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(ScorerError::Format {
        line: 1,
        message: "empty matrix file".into(),
    })?;
    let letters: Vec<&str> = header.split('\t').map(str::trim).collect();
    let expected: Vec<String> = ALPHABET.iter().map(|&b| (b as char).to_string()).collect();
    if letters != expected {
        return Err(ScorerError::Format {
            line: 1,
            message: format!("header must be the 20 letters {}", expected.join(" ")),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != ALPHABET_SIZE {
            return Err(ScorerError::Format {
                line: idx + 1,
                message: format!("expected {ALPHABET_SIZE} columns, found {}", cells.len()),
            });
        }
        let mut row = [0.0; ALPHABET_SIZE];
        for (slot, cell) in row.iter_mut().zip(&cells) {
            *slot = cell.trim().parse().map_err(|_| ScorerError::Format {
                line: idx + 1,
                message: format!("not a number: '{cell}'"),
            })?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ScorerError::Format {
            line: 2,
            message: "matrix has no data rows".into(),
        });
    }
    super::check_finite(&rows)?;
    Ok(rows)
}
