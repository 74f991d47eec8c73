//! Attribute oracles and the cached point-mutation score matrix.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{matrix_io, Row, ScorerError};
use crate::seqcore::{residues_to_string, AminoAcid, AntibodySequence, ALPHABET_SIZE};

/// Scores a full, unmasked sequence. Higher is better; scores are used
/// directly as log-probability contributions during guided sampling.
pub trait AttributeOracle: Send + Sync {
    fn evaluate(&self, seq: &[AminoAcid]) -> Result<f64, ScorerError>;

    /// Scores of `seq` with `position` set to each of the 20 residues.
    fn point_scores(&self, seq: &[AminoAcid], position: usize) -> Result<Row, ScorerError> {
        let mut probe = seq.to_vec();
        let mut out = [0.0; ALPHABET_SIZE];
        for aa in AminoAcid::all() {
            probe[position] = aa;
            out[aa.index()] = self.evaluate(&probe)?;
        }
        Ok(out)
    }
}

/// Hex SHA-256 of the residue string.
pub(crate) fn sequence_digest(seq: &[AminoAcid]) -> String {
    let digest = Sha256::digest(residues_to_string(seq).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Oracle scores for every single point mutation of a starter sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScoreMatrix {
    rows: Vec<Row>,
    starter_hash: Option<String>,
}

impl OracleScoreMatrix {
    pub fn new(rows: Vec<Row>, starter_hash: Option<String>) -> Result<Self, ScorerError> {
        super::check_finite(&rows)?;
        Ok(Self { rows, starter_hash })
    }

    pub fn from_tsv(text: &str) -> Result<Self, ScorerError> {
        Self::new(matrix_io::parse_matrix_tsv(text)?, None)
    }

    pub fn to_tsv(&self) -> String {
        matrix_io::write_matrix_tsv(&self.rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, position: usize) -> &Row {
        &self.rows[position]
    }

    pub fn starter_hash(&self) -> Option<&str> {
        self.starter_hash.as_deref()
    }

    /// Records the starter this matrix belongs to (for matrices loaded from file).
    pub fn bind_starter(&mut self, starter: &[AminoAcid]) {
        self.starter_hash = Some(sequence_digest(starter));
    }

    /// True when the matrix was computed against `starter` (or its starter is
    /// unknown). Logs a warning on mismatch; the matrix remains usable.
    pub fn check_starter(&self, starter: &[AminoAcid]) -> bool {
        match &self.starter_hash {
            Some(h) if *h != sequence_digest(starter) => {
                log::warn!("oracle score matrix was computed against a different starter");
                false
            }
            _ => true,
        }
    }

    /// First-order estimate of the oracle value of `seq`:
    /// `f(x0) + Σ_l (M[l][x_l] - f(x0))`, with `f(x0)` read off the diagonal.
    /// Exact for additive oracles and for any oracle at Hamming distance ≤ 1.
    pub fn estimate(&self, seq: &[AminoAcid], starter: &[AminoAcid]) -> Result<f64, ScorerError> {
        if seq.len() != self.rows.len() || starter.len() != self.rows.len() {
            return Err(ScorerError::LengthMismatch {
                expected: self.rows.len(),
                got: seq.len(),
            });
        }
        let base = self.rows[0][starter[0].index()];
        Ok(seq
            .iter()
            .zip(starter)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(l, (a, _))| self.rows[l][a.index()] - base)
            .sum::<f64>()
            + base)
    }
}

/// Evaluates `oracle` on every point mutation of `starter` (L calls to
/// `point_scores`, 20·L scores).
pub fn cache_oracle(
    oracle: &dyn AttributeOracle,
    starter: &AntibodySequence,
) -> Result<OracleScoreMatrix, ScorerError> {
    let residues = starter.unmasked()?;
    let rows = (0..residues.len())
        .map(|l| {
            oracle
                .point_scores(&residues, l)
                .map_err(|e| ScorerError::Oracle {
                    position: l,
                    message: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    OracleScoreMatrix::new(rows, Some(sequence_digest(&residues)))
}

/// Row `position` of the cached matrix, regardless of mutations elsewhere in `seq`.
pub fn cached_point_scores(
    matrix: &OracleScoreMatrix,
    seq: &AntibodySequence,
    position: usize,
) -> Result<Row, ScorerError> {
    if seq.len() != matrix.len() {
        return Err(ScorerError::LengthMismatch {
            expected: matrix.len(),
            got: seq.len(),
        });
    }
    if position >= matrix.len() {
        return Err(ScorerError::LengthMismatch {
            expected: matrix.len(),
            got: position + 1,
        });
    }
    Ok(*matrix.row(position))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleReduction {
    /// Lower bound over members.
    #[default]
    Min,
    Mean,
}

/// Elementwise reduction over member oracles (minimum unless configured otherwise).
pub struct EnsembleOracle {
    members: Vec<Arc<dyn AttributeOracle>>,
    reduction: EnsembleReduction,
}

impl EnsembleOracle {
    pub fn new(members: Vec<Arc<dyn AttributeOracle>>) -> Result<Self, ScorerError> {
        Self::with_reduction(members, EnsembleReduction::Min)
    }

    pub fn with_reduction(
        members: Vec<Arc<dyn AttributeOracle>>,
        reduction: EnsembleReduction,
    ) -> Result<Self, ScorerError> {
        if members.is_empty() {
            return Err(ScorerError::InvalidParameter("ensemble has no members".into()));
        }
        Ok(Self { members, reduction })
    }

    fn reduce(&self, values: impl Iterator<Item = f64>) -> f64 {
        match self.reduction {
            EnsembleReduction::Min => values.fold(f64::INFINITY, f64::min),
            EnsembleReduction::Mean => {
                let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                sum / n as f64
            }
        }
    }
}

impl AttributeOracle for EnsembleOracle {
    fn evaluate(&self, seq: &[AminoAcid]) -> Result<f64, ScorerError> {
        let scores = self
            .members
            .iter()
            .map(|m| m.evaluate(seq))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.reduce(scores.into_iter()))
    }

    fn point_scores(&self, seq: &[AminoAcid], position: usize) -> Result<Row, ScorerError> {
        let rows = self
            .members
            .iter()
            .map(|m| m.point_scores(seq, position))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = [0.0; ALPHABET_SIZE];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.reduce(rows.iter().map(|r| r[i]));
        }
        Ok(out)
    }
}
