//! Position-wise conditional sequence models, attribute oracles and the
//! structural deviation score.

mod external;
mod matrix_io;
mod oracle;
mod profile;
mod structure;

use std::time::Duration;

use thiserror::Error;

use crate::seqcore::{AntibodySequence, SeqError, ALPHABET_SIZE};

pub use external::{ExternalScorer, DEFAULT_TIMEOUT};
pub use matrix_io::{parse_matrix_tsv, write_matrix_tsv};
pub use oracle::{
    cache_oracle, cached_point_scores, AttributeOracle, EnsembleOracle, EnsembleReduction,
    OracleScoreMatrix,
};
pub use profile::{ContextProfileModel, ProfileParams};
pub use structure::{
    kabsch_align, parse_coordinates, read_coordinates, structure_oracle_matrix, structure_score,
    structure_score_prealigned, BackboneCoordinates,
};

/// One row of per-residue values in alphabet order.
pub type Row = [f64; ALPHABET_SIZE];

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("sequence length {got} does not match model length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("ragged corpus: record '{id}' has length {got}, expected {expected}")]
    RaggedCorpus { id: String, expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("external scorer failed to start: {0}")]
    Spawn(String),
    #[error("external scorer exited: {0}")]
    Exited(String),
    #[error("external scorer timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed scorer response: {0}")]
    Protocol(String),
    #[error("external scorer reported an error: {0}")]
    Remote(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("degenerate structure: {0}")]
    Degenerate(String),
    #[error("oracle failed at position {position}: {message}")]
    Oracle { position: usize, message: String },
    #[error("model file: {0}")]
    ModelFile(String),
}

/// L×20 matrix of per-position residue logits, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    rows: Vec<Row>,
}

impl LogitsMatrix {
    pub fn new(rows: Vec<Row>) -> Result<Self, ScorerError> {
        check_finite(&rows)?;
        Ok(Self { rows })
    }

    /// Builds from ragged input, checking every row has exactly 20 columns.
    pub fn from_nested(values: &[Vec<f64>], expected_rows: usize) -> Result<Self, ScorerError> {
        let shape_err = |cols| ScorerError::Shape {
            expected_rows,
            expected_cols: ALPHABET_SIZE,
            rows: values.len(),
            cols,
        };
        if values.len() != expected_rows {
            return Err(shape_err(values.first().map_or(0, Vec::len)));
        }
        let mut rows = Vec::with_capacity(values.len());
        for v in values {
            let row: Row = v.as_slice().try_into().map_err(|_| shape_err(v.len()))?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, position: usize) -> &Row {
        &self.rows[position]
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }
}

pub(crate) fn check_finite(rows: &[Row]) -> Result<(), ScorerError> {
    for (row, values) in rows.iter().enumerate() {
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScorerError::NonFinite { row, col });
        }
    }
    Ok(())
}

/// A model that maps a (possibly masked) sequence to per-position logits.
///
/// Implementations must be deterministic.
pub trait ConditionalSequenceModel: Send + Sync {
    fn score(&self, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError>;

    /// Single row of [`score`](Self::score). Models that can compute a row
    /// without the whole matrix should override this.
    fn score_position(&self, seq: &AntibodySequence, position: usize) -> Result<Row, ScorerError> {
        let z = self.score(seq)?;
        if position >= z.len() {
            return Err(ScorerError::LengthMismatch {
                expected: z.len(),
                got: position + 1,
            });
        }
        Ok(*z.row(position))
    }
}

/// Numerically stable `log softmax(z)`.
pub fn log_softmax(z: &Row) -> Row {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut out = [0.0; ALPHABET_SIZE];
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
    out
}

/// Sum over positions of `log softmax(z_l)[x_l]`, in nats, with `Z = model.score(seq)`.
pub fn sequence_log_likelihood(
    model: &dyn ConditionalSequenceModel,
    seq: &AntibodySequence,
) -> Result<f64, ScorerError> {
    let residues = seq.unmasked()?;
    let z = model.score(seq)?;
    if z.len() != residues.len() {
        return Err(ScorerError::LengthMismatch {
            expected: residues.len(),
            got: z.len(),
        });
    }
    Ok(residues
        .iter()
        .enumerate()
        .map(|(l, aa)| log_softmax(z.row(l))[aa.index()])
        .sum())
}

/// A model that returns the same logits for every input of the right length
/// (a position-specific scoring matrix).
#[derive(Debug, Clone)]
pub struct FixedLogitsModel {
    logits: LogitsMatrix,
}

impl FixedLogitsModel {
    pub fn new(logits: LogitsMatrix) -> Self {
        Self { logits }
    }

    pub fn from_tsv(text: &str) -> Result<Self, ScorerError> {
        Ok(Self::new(LogitsMatrix::new(parse_matrix_tsv(text)?)?))
    }
}

impl ConditionalSequenceModel for FixedLogitsModel {
    fn score(&self, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError> {
        if seq.len() != self.logits.len() {
            return Err(ScorerError::LengthMismatch {
                expected: self.logits.len(),
                got: seq.len(),
            });
        }
        Ok(self.logits.clone())
    }

    fn score_position(&self, seq: &AntibodySequence, position: usize) -> Result<Row, ScorerError> {
        if seq.len() != self.logits.len() {
            return Err(ScorerError::LengthMismatch {
                expected: self.logits.len(),
                got: seq.len(),
            });
        }
        Ok(*self.logits.row(position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_rows_give_uniform_likelihood() {
        let model = FixedLogitsModel::new(LogitsMatrix::new(vec![[0.0; 20]; 4]).unwrap());
        let seq = AntibodySequence::parse("s", "ACDE").unwrap();
        let ll = sequence_log_likelihood(&model, &seq).unwrap();
        assert_abs_diff_eq!(ll, 4.0 * (1.0f64 / 20.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll, -11.9829, epsilon = 1e-4);
    }

    #[test]
    fn likelihood_is_nonpositive_for_raw_logits() {
        let mut rows = vec![[0.0; 20]; 3];
        rows[0][0] = 50.0;
        rows[1][4] = -3.0;
        rows[2] = [7.5; 20];
        let model = FixedLogitsModel::new(LogitsMatrix::new(rows).unwrap());
        let seq = AntibodySequence::parse("s", "AFW").unwrap();
        assert!(sequence_log_likelihood(&model, &seq).unwrap() <= 0.0);
    }

    #[test]
    fn likelihood_rejects_masks() {
        let model = FixedLogitsModel::new(LogitsMatrix::new(vec![[0.0; 20]; 4]).unwrap());
        let seq = AntibodySequence::parse("s", "AC#E").unwrap();
        assert!(matches!(
            sequence_log_likelihood(&model, &seq),
            Err(ScorerError::Seq(SeqError::MaskPresent { .. }))
        ));
    }

    #[test]
    fn logits_reject_nan_and_bad_shape() {
        let mut rows = vec![[0.0; 20]; 2];
        rows[1][3] = f64::NAN;
        assert!(matches!(
            LogitsMatrix::new(rows),
            Err(ScorerError::NonFinite { row: 1, col: 3 })
        ));
        let ragged = vec![vec![0.0; 20], vec![0.0; 19]];
        match LogitsMatrix::from_nested(&ragged, 2) {
            Err(ScorerError::Shape { expected_cols, cols, .. }) => {
                assert_eq!(expected_cols, 20);
                assert_eq!(cols, 19);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
