//! Alpha-carbon coordinates, rigid superposition and the structural
//! deviation score used as a structure-preserving oracle.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{OracleScoreMatrix, Row, ScorerError};
use crate::seqcore::{AminoAcid, AntibodySequence, Mutation, ALPHABET_SIZE};

/// L×3 alpha-carbon positions in ångström.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCoordinates {
    coords: Vec<[f64; 3]>,
}

impl BackboneCoordinates {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self, ScorerError> {
        for (row, c) in coords.iter().enumerate() {
            if let Some(col) = c.iter().position(|v| !v.is_finite()) {
                return Err(ScorerError::NonFinite { row, col });
            }
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.coords.iter().map(|c| Vector3::new(c[0], c[1], c[2]))
    }

    fn centroid(&self) -> Vector3<f64> {
        self.points().sum::<Vector3<f64>>() / self.coords.len() as f64
    }

    pub fn rmsd(&self, other: &Self) -> Result<f64, ScorerError> {
        check_lengths(self, other)?;
        let sum: f64 = self
            .points()
            .zip(other.points())
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        Ok((sum / self.len() as f64).sqrt())
    }

    /// Applies `x -> R·x + t`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let coords = self
            .points()
            .map(|p| {
                let q = rotation * p + translation;
                [q.x, q.y, q.z]
            })
            .collect();
        Self { coords }
    }
}

fn check_lengths(a: &BackboneCoordinates, b: &BackboneCoordinates) -> Result<(), ScorerError> {
    if a.len() != b.len() {
        return Err(ScorerError::LengthMismatch {
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(())
}

/// Parses either plain xyz text (three floats per line) or the alpha-carbon
/// "PDB-lite" layout (index, x, y, z). Blank lines and `#` comments are skipped.
pub fn parse_coordinates(text: &str) -> Result<BackboneCoordinates, ScorerError> {
    let mut coords = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let xyz = match fields.len() {
            3 => &fields[..],
            4 => &fields[1..],
            n => {
                return Err(ScorerError::Format {
                    line: idx + 1,
                    message: format!("expected 3 or 4 columns, found {n}"),
                })
            }
        };
        let mut c = [0.0; 3];
        for (slot, f) in c.iter_mut().zip(xyz) {
            *slot = f.parse().map_err(|_| ScorerError::Format {
                line: idx + 1,
                message: format!("not a number: '{f}'"),
            })?;
        }
        coords.push(c);
    }
    BackboneCoordinates::new(coords)
}

pub fn read_coordinates(path: impl AsRef<Path>) -> Result<BackboneCoordinates, ScorerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScorerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_coordinates(&text)
}

fn check_spread(c: &BackboneCoordinates, which: &str) -> Result<(), ScorerError> {
    let centroid = c.centroid();
    let scatter = c
        .points()
        .map(|p| {
            let d = p - centroid;
            d * d.transpose()
        })
        .sum::<Matrix3<f64>>();
    let mut eig: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if eig[0] <= 1e-18 {
        return Err(ScorerError::Degenerate(format!("{which} points are coincident")));
    }
    if eig[1] <= 1e-10 * eig[0] {
        return Err(ScorerError::Degenerate(format!("{which} points are collinear")));
    }
    Ok(())
}

/// Superimposes `mobile` onto `reference` with the proper rotation and
/// translation that minimize RMSD (Kabsch).
pub fn kabsch_align(
    mobile: &BackboneCoordinates,
    reference: &BackboneCoordinates,
) -> Result<BackboneCoordinates, ScorerError> {
    check_lengths(mobile, reference)?;
    if mobile.len() < 3 {
        return Err(ScorerError::Degenerate(format!(
            "need at least 3 points, got {}",
            mobile.len()
        )));
    }
    check_spread(mobile, "mobile")?;
    check_spread(reference, "reference")?;

    let cm = mobile.centroid();
    let cr = reference.centroid();
    let h = mobile
        .points()
        .zip(reference.points())
        .map(|(p, q)| (p - cm) * (q - cr).transpose())
        .sum::<Matrix3<f64>>();
    let svd = h.svd(true, true);
    let u = svd.u.expect("u computed");
    let v_t = svd.v_t.expect("v_t computed");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cr - rotation * cm;
    Ok(mobile.transformed(&rotation, &translation))
}

/// `-‖S(x) - S(x0)‖_F / (9·L²)` on coordinates that are already superimposed.
pub fn structure_score_prealigned(
    candidate: &BackboneCoordinates,
    starter: &BackboneCoordinates,
) -> Result<f64, ScorerError> {
    check_lengths(candidate, starter)?;
    let l = starter.len() as f64;
    let frob = candidate
        .points()
        .zip(starter.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(-frob / (9.0 * l * l))
}

/// Aligns `candidate` onto `starter`, then scores the residual deviation. 0 means identical.
pub fn structure_score(
    candidate: &BackboneCoordinates,
    starter: &BackboneCoordinates,
) -> Result<f64, ScorerError> {
    let aligned = kabsch_align(candidate, starter)?;
    structure_score_prealigned(&aligned, starter)
}

/// Builds a cached structure-oracle matrix from per-mutation coordinate files.
///
/// `dir` holds one file per point mutation, named with 1-based mutation
/// notation (`A23T.xyz` or `A23T.pdb`). The diagonal is 0 by definition.
pub fn structure_oracle_matrix(
    starter: &AntibodySequence,
    starter_coords: &BackboneCoordinates,
    dir: impl AsRef<Path>,
) -> Result<OracleScoreMatrix, ScorerError> {
    let dir = dir.as_ref();
    let residues = starter.unmasked()?;
    if starter_coords.len() != residues.len() {
        return Err(ScorerError::LengthMismatch {
            expected: residues.len(),
            got: starter_coords.len(),
        });
    }
    let mut rows: Vec<Row> = Vec::with_capacity(residues.len());
    for (position, &from) in residues.iter().enumerate() {
        let mut row = [0.0; ALPHABET_SIZE];
        for to in AminoAcid::all().filter(|&to| to != from) {
            let name = Mutation { position, from, to }.to_string();
            let path = ["xyz", "pdb"]
                .iter()
                .map(|ext| dir.join(format!("{name}.{ext}")))
                .find(|p| p.exists())
                .ok_or_else(|| ScorerError::Io {
                    path: dir.join(format!("{name}.xyz")).display().to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing mutant coordinates"),
                })?;
            let coords = read_coordinates(&path)?;
            row[to.index()] = structure_score(&coords, starter_coords).map_err(|e| ScorerError::Oracle {
                position,
                message: format!("{name}: {e}"),
            })?;
        }
        rows.push(row);
    }
    let mut m = OracleScoreMatrix::new(rows, None)?;
    m.bind_starter(&residues);
    Ok(m)
}
