//! Residues, sequences, region annotations and mutations.
//!
//! Positions are 0-based everywhere in the library. Human-readable mutation
//! strings (`A23T`) use 1-based positions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed residue order; column `i` of every L×20 matrix refers to `ALPHABET[i]`.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const ALPHABET_SIZE: usize = 20;
/// Text rendering of a masked position.
pub const MASK_CHAR: char = '#';

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty FASTA input")]
    EmptyFasta,
    #[error("malformed FASTA header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("record '{id}': illegal character '{ch}' at offset {offset}")]
    IllegalCharacter { id: String, ch: char, offset: usize },
    #[error("record '{id}' has no residues")]
    EmptyRecord { id: String },
    #[error("illegal residue character '{0}'")]
    IllegalResidue(char),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sequence '{id}' contains a mask at position {position}")]
    MaskPresent { id: String, position: usize },
    #[error("annotation parse error: {0}")]
    AnnotationFormat(String),
    #[error("CDR interval [{start}, {end}) is invalid: end <= start")]
    EmptyInterval { start: usize, end: usize },
    #[error("CDR interval [{start}, {end}) out of bounds for length {len}")]
    IntervalOutOfBounds { start: usize, end: usize, len: usize },
    #[error("canonical cysteine position {position} out of bounds for length {len}")]
    CysteineOutOfBounds { position: usize, len: usize },
    #[error("position {position} out of bounds for length {len}")]
    PositionOutOfBounds { position: usize, len: usize },
    #[error("duplicate mutable position {0}")]
    DuplicatePosition(usize),
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
    #[error("no eligible positions for mask policy")]
    NoEligiblePositions,
    #[error("mutation at position {position} expects '{expected}' but found '{found}'")]
    MutationMismatch { position: usize, expected: char, found: char },
}

/// One of the 20 canonical amino acids, stored as its alphabet index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AminoAcid(u8);

impl AminoAcid {
    pub fn from_index(index: usize) -> Option<Self> {
        (index < ALPHABET_SIZE).then_some(AminoAcid(index as u8))
    }

    pub fn from_char(c: char) -> Option<Self> {
        let upper = c.to_ascii_uppercase();
        ALPHABET
            .iter()
            .position(|&b| b as char == upper)
            .map(|i| AminoAcid(i as u8))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn to_char(self) -> char {
        ALPHABET[self.0 as usize] as char
    }

    pub fn all() -> impl Iterator<Item = AminoAcid> {
        (0..ALPHABET_SIZE as u8).map(AminoAcid)
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

/// A sequence slot: a residue or the mask sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Residue {
    Aa(AminoAcid),
    Mask,
}

impl Residue {
    pub fn from_char(c: char) -> Option<Self> {
        if c == MASK_CHAR {
            Some(Residue::Mask)
        } else {
            AminoAcid::from_char(c).map(Residue::Aa)
        }
    }

    pub fn to_char(self) -> char {
        match self {
            Residue::Aa(aa) => aa.to_char(),
            Residue::Mask => MASK_CHAR,
        }
    }

    pub fn amino_acid(self) -> Option<AminoAcid> {
        match self {
            Residue::Aa(aa) => Some(aa),
            Residue::Mask => None,
        }
    }

    pub fn is_mask(self) -> bool {
        matches!(self, Residue::Mask)
    }
}

impl From<AminoAcid> for Residue {
    fn from(aa: AminoAcid) -> Self {
        Residue::Aa(aa)
    }
}

/// Antibody (or any protein) sequence with an identifier; may contain masks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AntibodySequence {
    pub id: String,
    residues: Vec<Residue>,
}

impl AntibodySequence {
    pub fn new(id: impl Into<String>, residues: Vec<Residue>) -> Self {
        Self {
            id: id.into(),
            residues,
        }
    }

    pub fn from_amino_acids(id: impl Into<String>, aas: &[AminoAcid]) -> Self {
        Self::new(id, aas.iter().copied().map(Residue::Aa).collect())
    }

    /// Parses a residue string; `#` is a mask, anything outside the alphabet is rejected.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, SeqError> {
        let id = id.into();
        let mut residues = Vec::with_capacity(text.len());
        for (offset, ch) in text.chars().enumerate() {
            match Residue::from_char(ch) {
                Some(r) => residues.push(r),
                None => return Err(SeqError::IllegalCharacter { id, ch, offset }),
            }
        }
        Ok(Self { id, residues })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn get(&self, position: usize) -> Option<Residue> {
        self.residues.get(position).copied()
    }

    pub fn set(&mut self, position: usize, residue: Residue) {
        self.residues[position] = residue;
    }

    pub fn has_mask(&self) -> bool {
        self.residues.iter().any(|r| r.is_mask())
    }

    /// The residues as amino acids, failing on the first mask.
    pub fn unmasked(&self) -> Result<Vec<AminoAcid>, SeqError> {
        self.residues
            .iter()
            .enumerate()
            .map(|(position, r)| {
                r.amino_acid().ok_or_else(|| SeqError::MaskPresent {
                    id: self.id.clone(),
                    position,
                })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.residues.iter().map(|r| r.to_char()).collect()
    }
}

impl fmt::Display for AntibodySequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Renders an unmasked residue slice as text.
pub fn residues_to_string(aas: &[AminoAcid]) -> String {
    aas.iter().map(|a| a.to_char()).collect()
}

pub fn parse_fasta(path: impl AsRef<Path>) -> Result<Vec<AntibodySequence>, SeqError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SeqError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_fasta_str(&text)
}

/// Parses FASTA text. Sequence lines may wrap; blank lines are ignored.
pub fn parse_fasta_str(text: &str) -> Result<Vec<AntibodySequence>, SeqError> {
    let mut records: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.trim();
            if id.is_empty() {
                return Err(SeqError::MalformedHeader {
                    line: lineno + 1,
                    reason: "empty identifier".into(),
                });
            }
            records.push((id.to_string(), String::new()));
        } else {
            match records.last_mut() {
                Some((_, body)) => body.push_str(line.trim()),
                None => {
                    return Err(SeqError::MalformedHeader {
                        line: lineno + 1,
                        reason: "sequence data before first '>' header".into(),
                    })
                }
            }
        }
    }
    if records.is_empty() {
        return Err(SeqError::EmptyFasta);
    }
    records
        .into_iter()
        .map(|(id, body)| {
            if body.is_empty() {
                return Err(SeqError::EmptyRecord { id });
            }
            AntibodySequence::parse(id, &body)
        })
        .collect()
}

/// Serializes records as FASTA, one unwrapped sequence line per record.
pub fn write_fasta_string(records: &[AntibodySequence]) -> String {
    let mut out = String::new();
    for r in records {
        out.push('>');
        out.push_str(&r.id);
        out.push('\n');
        out.push_str(&r.to_text());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainType {
    Heavy,
    Light,
    Vhh,
}

/// CDR intervals (half-open, 0-based) and canonical cysteine positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionAnnotation {
    pub cdr_intervals: Vec<(usize, usize)>,
    pub canonical_cysteines: Vec<usize>,
    pub chain_type: ChainType,
    #[serde(skip)]
    pub length: usize,
}

#[derive(Deserialize)]
struct RawAnnotation {
    #[serde(alias = "cdrs", default)]
    cdr_intervals: Vec<[usize; 2]>,
    #[serde(alias = "cys", default)]
    canonical_cysteines: Vec<usize>,
    #[serde(alias = "chain")]
    chain_type: String,
}

impl RegionAnnotation {
    /// Validates and normalizes. Overlapping intervals are merged; the
    /// returned warnings describe each merge.
    pub fn new(
        length: usize,
        intervals: Vec<(usize, usize)>,
        canonical_cysteines: Vec<usize>,
        chain_type: ChainType,
    ) -> Result<(Self, Vec<String>), SeqError> {
        for &(start, end) in &intervals {
            if end <= start {
                return Err(SeqError::EmptyInterval { start, end });
            }
            if end > length {
                return Err(SeqError::IntervalOutOfBounds { start, end, len: length });
            }
        }
        for &c in &canonical_cysteines {
            if c >= length {
                return Err(SeqError::CysteineOutOfBounds { position: c, len: length });
            }
        }
        let mut sorted = intervals;
        sorted.sort_unstable();
        let mut warnings = Vec::new();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(sorted.len());
        for (start, end) in sorted {
            match merged.last_mut() {
                Some(last) if start < last.1 => {
                    let msg = format!(
                        "overlapping CDR intervals [{}, {}) and [{start}, {end}) merged",
                        last.0, last.1
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    last.1 = last.1.max(end);
                }
                _ => merged.push((start, end)),
            }
        }
        let mut cys = canonical_cysteines;
        cys.sort_unstable();
        cys.dedup();
        Ok((
            Self {
                cdr_intervals: merged,
                canonical_cysteines: cys,
                chain_type,
                length,
            },
            warnings,
        ))
    }

    /// Annotation with no CDRs and no canonical cysteines.
    pub fn empty(length: usize, chain_type: ChainType) -> Self {
        Self {
            cdr_intervals: Vec::new(),
            canonical_cysteines: Vec::new(),
            chain_type,
            length,
        }
    }

    pub fn from_json_str(text: &str, length: usize) -> Result<(Self, Vec<String>), SeqError> {
        let raw: RawAnnotation =
            serde_json::from_str(text).map_err(|e| SeqError::AnnotationFormat(e.to_string()))?;
        let chain_type = match raw.chain_type.to_ascii_lowercase().as_str() {
            "heavy" => ChainType::Heavy,
            "light" => ChainType::Light,
            "vhh" => ChainType::Vhh,
            other => {
                return Err(SeqError::AnnotationFormat(format!(
                    "unknown chain_type '{other}'"
                )))
            }
        };
        let intervals = raw.cdr_intervals.iter().map(|[s, e]| (*s, *e)).collect();
        Self::new(length, intervals, raw.canonical_cysteines, chain_type)
    }

    pub fn to_json_string(&self) -> String {
        let intervals: Vec<[usize; 2]> = self.cdr_intervals.iter().map(|&(s, e)| [s, e]).collect();
        serde_json::json!({
            "cdr_intervals": intervals,
            "canonical_cysteines": self.canonical_cysteines,
            "chain_type": self.chain_type,
        })
        .to_string()
    }

    pub fn in_cdr(&self, position: usize) -> bool {
        self.cdr_intervals
            .iter()
            .any(|&(s, e)| position >= s && position < e)
    }

    pub fn framework_positions(&self) -> Vec<usize> {
        (0..self.length).filter(|&p| !self.in_cdr(p)).collect()
    }

    pub fn cdr_positions(&self) -> Vec<usize> {
        (0..self.length).filter(|&p| self.in_cdr(p)).collect()
    }
}

/// Reads an annotation JSON file and validates it against sequence length `length`.
pub fn parse_annotation(
    path: impl AsRef<Path>,
    length: usize,
) -> Result<(RegionAnnotation, Vec<String>), SeqError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SeqError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RegionAnnotation::from_json_str(&text, length)
}

/// Mutable positions in visit order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutableMask {
    indices: Vec<usize>,
}

impl MutableMask {
    pub fn new(indices: Vec<usize>, length: usize) -> Result<Self, SeqError> {
        let mut seen = vec![false; length];
        for &i in &indices {
            if i >= length {
                return Err(SeqError::PositionOutOfBounds { position: i, len: length });
            }
            if seen[i] {
                return Err(SeqError::DuplicatePosition(i));
            }
            seen[i] = true;
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.indices.contains(&position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every non-CDR position.
    FrameworkAll,
    /// Up to `max_total` random positions, at most `max_cdr` of them inside CDRs.
    RandomBounded { max_total: usize, max_cdr: usize },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::RandomBounded {
            max_total: 6,
            max_cdr: 2,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), SeqError> {
        if let MaskPolicy::RandomBounded { max_total, max_cdr } = *self {
            if max_total == 0 {
                return Err(SeqError::InvalidPolicy("max_total must be positive".into()));
            }
            if max_cdr > max_total {
                return Err(SeqError::InvalidPolicy(format!(
                    "max_cdr ({max_cdr}) exceeds max_total ({max_total})"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the mutable positions for one trajectory, in a shuffled visit order.
///
/// `random_bounded` walks a uniformly shuffled list of all positions and keeps
/// each one unless the total or CDR quota is already used up, so it selects
/// `min(max_total, framework + min(max_cdr, cdr))` positions.
pub fn build_mutable_mask<R: Rng + ?Sized>(
    annotation: &RegionAnnotation,
    policy: MaskPolicy,
    rng: &mut R,
) -> Result<MutableMask, SeqError> {
    policy.validate()?;
    let length = annotation.length;
    let mut indices = match policy {
        MaskPolicy::FrameworkAll => annotation.framework_positions(),
        MaskPolicy::RandomBounded { max_total, max_cdr } => {
            let mut all: Vec<usize> = (0..length).collect();
            all.shuffle(rng);
            let mut chosen = Vec::with_capacity(max_total);
            let mut cdr_used = 0;
            for p in all {
                if chosen.len() == max_total {
                    break;
                }
                if annotation.in_cdr(p) {
                    if cdr_used == max_cdr {
                        continue;
                    }
                    cdr_used += 1;
                }
                chosen.push(p);
            }
            chosen
        }
    };
    if indices.is_empty() {
        return Err(SeqError::NoEligiblePositions);
    }
    indices.shuffle(rng);
    MutableMask::new(indices, length)
}

/// A point substitution between two sequences of the same lineage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mutation {
    pub position: usize,
    pub from: AminoAcid,
    pub to: AminoAcid,
}

impl fmt::Display for Mutation {
    /// Biology notation with a 1-based position, e.g. `A23T`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.from, self.position + 1, self.to)
    }
}

impl FromStr for Mutation {
    type Err = SeqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SeqError::AnnotationFormat(format!("bad mutation string '{s}'"));
        let mut chars = s.chars();
        let from = chars.next().and_then(AminoAcid::from_char).ok_or_else(bad)?;
        let to = chars.next_back().and_then(AminoAcid::from_char).ok_or_else(bad)?;
        let pos: usize = chars.as_str().parse().map_err(|_| bad())?;
        if pos == 0 {
            return Err(bad());
        }
        Ok(Mutation {
            position: pos - 1,
            from,
            to,
        })
    }
}

/// Differences from `a` to `b`, ascending by position.
pub fn diff(a: &AntibodySequence, b: &AntibodySequence) -> Result<Vec<Mutation>, SeqError> {
    if a.len() != b.len() {
        return Err(SeqError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let a = a.unmasked()?;
    let b = b.unmasked()?;
    Ok(diff_residues(&a, &b))
}

/// Same as [`diff`] on unmasked residue slices of equal length.
pub fn diff_residues(a: &[AminoAcid], b: &[AminoAcid]) -> Vec<Mutation> {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(position, (&from, &to))| Mutation { position, from, to })
        .collect()
}

/// Applies mutations to `seq`, checking that each `from` residue matches.
pub fn apply_mutations(
    seq: &AntibodySequence,
    mutations: &[Mutation],
) -> Result<AntibodySequence, SeqError> {
    let mut out = seq.clone();
    for m in mutations {
        let current = out.get(m.position).ok_or(SeqError::PositionOutOfBounds {
            position: m.position,
            len: seq.len(),
        })?;
        if current != Residue::Aa(m.from) {
            return Err(SeqError::MutationMismatch {
                position: m.position,
                expected: m.from.to_char(),
                found: current.to_char(),
            });
        }
        out.set(m.position, Residue::Aa(m.to));
    }
    Ok(out)
}

/// A generated sequence together with its provenance and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sequence: AntibodySequence,
    /// Differences from the starter, ascending by position.
    pub mutations: Vec<Mutation>,
    /// Named metric and oracle scores, filled in after generation.
    pub scores: std::collections::BTreeMap<String, f64>,
    pub passed_filters: bool,
    pub rank: Option<usize>,
    pub trajectory_seed: u64,
}

impl Candidate {
    pub fn new(
        id: impl Into<String>,
        starter: &[AminoAcid],
        residues: &[AminoAcid],
        trajectory_seed: u64,
    ) -> Self {
        Self {
            sequence: AntibodySequence::from_amino_acids(id, residues),
            mutations: diff_residues(starter, residues),
            scores: Default::default(),
            passed_filters: true,
            rank: None,
            trajectory_seed,
        }
    }

    /// Residues of the (never masked) candidate sequence.
    pub fn residues(&self) -> Vec<AminoAcid> {
        self.sequence
            .residues()
            .iter()
            .map(|r| r.amino_acid().expect("candidates are unmasked"))
            .collect()
    }

    /// Semicolon-joined mutation list, e.g. `A23T;K40R`.
    pub fn mutation_string(&self) -> String {
        self.mutations
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(text: &str) -> AntibodySequence {
        AntibodySequence::parse("s", text).unwrap()
    }

    #[test]
    fn alphabet_index_is_bijective() {
        for (i, &b) in ALPHABET.iter().enumerate() {
            let aa = AminoAcid::from_char(b as char).unwrap();
            assert_eq!(aa.index(), i);
            assert_eq!(AminoAcid::from_index(i), Some(aa));
        }
        assert!(AminoAcid::from_char(MASK_CHAR).is_none());
        assert!(AminoAcid::from_index(20).is_none());
    }

    #[test]
    fn fasta_parses_plain_and_masked_records() {
        let recs = parse_fasta_str(">a\nACDE\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, "a");
        assert_eq!(recs[0].len(), 4);
        assert_eq!(recs[0].to_text(), "ACDE");

        let recs = parse_fasta_str(">a\nAC#E").unwrap();
        assert_eq!(recs[0].get(2), Some(Residue::Mask));
        assert!(recs[0].has_mask());
    }

    #[test]
    fn fasta_rejects_nonstandard_residue_with_offset() {
        match parse_fasta_str(">a\nACZE") {
            Err(SeqError::IllegalCharacter { id, ch, offset }) => {
                assert_eq!(id, "a");
                assert_eq!(ch, 'Z');
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        for bad in ['B', 'J', 'O', 'U', 'X'] {
            assert!(parse_fasta_str(&format!(">a\nA{bad}")).is_err());
        }
    }

    #[test]
    fn fasta_error_cases() {
        assert!(matches!(parse_fasta_str(""), Err(SeqError::EmptyFasta)));
        assert!(matches!(parse_fasta_str("\n\n"), Err(SeqError::EmptyFasta)));
        assert!(matches!(
            parse_fasta_str("ACDE\n>a\nAC"),
            Err(SeqError::MalformedHeader { line: 1, .. })
        ));
        assert!(matches!(
            parse_fasta_str(">\nAC"),
            Err(SeqError::MalformedHeader { .. })
        ));
        assert!(matches!(
            parse_fasta_str(">a\n>b\nAC"),
            Err(SeqError::EmptyRecord { .. })
        ));
    }

    #[test]
    fn fasta_multiline_records_keep_order() {
        let recs = parse_fasta_str(">x first\nACD\nEF\n\n>y\nGG\n").unwrap();
        assert_eq!(recs[0].id, "x first");
        assert_eq!(recs[0].to_text(), "ACDEF");
        assert_eq!(recs[1].id, "y");
    }

    #[test]
    fn annotation_examples() {
        let (a, w) =
            RegionAnnotation::from_json_str(r#"{"cdrs":[[26,33]],"cys":[22,96],"chain":"vhh"}"#, 120)
                .unwrap();
        assert!(w.is_empty());
        assert_eq!(a.cdr_intervals, vec![(26, 33)]);
        assert_eq!(a.chain_type, ChainType::Vhh);

        let err = RegionAnnotation::from_json_str(r#"{"cdrs":[[33,26]],"chain":"vhh"}"#, 120);
        assert!(matches!(err, Err(SeqError::EmptyInterval { .. })));

        let (a, w) = RegionAnnotation::from_json_str(
            r#"{"cdr_intervals":[[30,40],[26,33]],"canonical_cysteines":[],"chain_type":"heavy"}"#,
            120,
        )
        .unwrap();
        assert_eq!(a.cdr_intervals, vec![(26, 40)]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn annotation_rejects_bad_bounds_and_chain() {
        assert!(matches!(
            RegionAnnotation::from_json_str(r#"{"cdrs":[[100,130]],"chain":"light"}"#, 120),
            Err(SeqError::IntervalOutOfBounds { .. })
        ));
        assert!(matches!(
            RegionAnnotation::from_json_str(r#"{"cdrs":[],"cys":[120],"chain":"light"}"#, 120),
            Err(SeqError::CysteineOutOfBounds { .. })
        ));
        assert!(matches!(
            RegionAnnotation::from_json_str(r#"{"cdrs":[],"chain":"lambda"}"#, 120),
            Err(SeqError::AnnotationFormat(_))
        ));
    }

    #[test]
    fn adjacent_intervals_are_not_merged() {
        let (a, w) =
            RegionAnnotation::new(50, vec![(10, 20), (20, 30)], vec![], ChainType::Heavy).unwrap();
        assert_eq!(a.cdr_intervals.len(), 2);
        assert!(w.is_empty());
    }

    #[test]
    fn diff_examples() {
        assert!(diff(&seq("ACDE"), &seq("ACDE")).unwrap().is_empty());
        let d = diff(&seq("ACDE"), &seq("AADE")).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "C2A");
        let d = diff(&seq("ACDE"), &seq("QCDK")).unwrap();
        let s: Vec<String> = d.iter().map(|m| m.to_string()).collect();
        assert_eq!(s, ["A1Q", "E4K"]);
        assert!(matches!(
            diff(&seq("ACDE"), &seq("ACD")),
            Err(SeqError::LengthMismatch { .. })
        ));
        assert!(matches!(
            diff(&seq("AC#E"), &seq("ACDE")),
            Err(SeqError::MaskPresent { .. })
        ));
    }

    #[test]
    fn mutation_string_roundtrip() {
        let m: Mutation = "A23T".parse().unwrap();
        assert_eq!(m.position, 22);
        assert_eq!(m.to_string(), "A23T");
        assert!("A0T".parse::<Mutation>().is_err());
        assert!("AT".parse::<Mutation>().is_err());
    }

    #[test]
    fn framework_all_is_cdr_complement() {
        let (ann, _) = RegionAnnotation::new(10, vec![(4, 6)], vec![], ChainType::Vhh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = build_mutable_mask(&ann, MaskPolicy::FrameworkAll, &mut rng).unwrap();
        let mut got = mask.indices().to_vec();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 6, 7, 8, 9]);
    }

    #[test]
    fn random_bounded_respects_quotas() {
        let (ann, _) =
            RegionAnnotation::new(120, vec![(26, 38), (55, 65), (104, 117)], vec![], ChainType::Vhh)
                .unwrap();
        let policy = MaskPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut saw_cdr = false;
        for _ in 0..500 {
            let m = build_mutable_mask(&ann, policy, &mut rng).unwrap();
            assert!(m.len() <= 6);
            let cdr = m.indices().iter().filter(|&&p| ann.in_cdr(p)).count();
            assert!(cdr <= 2);
            saw_cdr |= cdr > 0;
        }
        assert!(saw_cdr);
    }

    #[test]
    fn random_bounded_errors() {
        let (ann, _) = RegionAnnotation::new(10, vec![(0, 10)], vec![], ChainType::Vhh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = MaskPolicy::RandomBounded { max_total: 3, max_cdr: 0 };
        assert!(matches!(
            build_mutable_mask(&ann, policy, &mut rng),
            Err(SeqError::NoEligiblePositions)
        ));
        let zero = MaskPolicy::RandomBounded { max_total: 0, max_cdr: 0 };
        assert!(build_mutable_mask(&ann, zero, &mut rng).is_err());
        let inverted = MaskPolicy::RandomBounded { max_total: 2, max_cdr: 3 };
        assert!(build_mutable_mask(&ann, inverted, &mut rng).is_err());
    }

    #[test]
    fn mutable_mask_rejects_duplicates() {
        assert!(MutableMask::new(vec![1, 2, 1], 5).is_err());
        assert!(MutableMask::new(vec![5], 5).is_err());
    }

    fn residue_string(len: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..20, len)
            .prop_map(|v| v.into_iter().map(|i| ALPHABET[i] as char).collect())
    }

    proptest! {
        #[test]
        fn fasta_roundtrip(bodies in proptest::collection::vec(residue_string(30), 1..5)) {
            let recs: Vec<AntibodySequence> = bodies
                .iter()
                .enumerate()
                .map(|(i, b)| AntibodySequence::parse(format!("r{i}"), b).unwrap())
                .collect();
            let text = write_fasta_string(&recs);
            let back = parse_fasta_str(&text).unwrap();
            prop_assert_eq!(back, recs);
        }

        #[test]
        fn diff_then_apply_recovers_target(a in residue_string(25), b in residue_string(25)) {
            let (a, b) = (seq(&a), seq(&b));
            let muts = diff(&a, &b).unwrap();
            prop_assert!(muts.windows(2).all(|w| w[0].position < w[1].position));
            prop_assert_eq!(apply_mutations(&a, &muts).unwrap(), b);
        }

        #[test]
        fn framework_mask_avoids_cdrs_and_is_seeded(seed in any::<u64>(), start in 0usize..30, width in 1usize..10) {
            let (ann, _) = RegionAnnotation::new(40, vec![(start, start + width)], vec![], ChainType::Heavy).unwrap();
            let m1 = build_mutable_mask(&ann, MaskPolicy::FrameworkAll, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let m2 = build_mutable_mask(&ann, MaskPolicy::FrameworkAll, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&m1, &m2);
            prop_assert!(m1.indices().iter().all(|&p| !ann.in_cdr(p)));
        }
    }
}
