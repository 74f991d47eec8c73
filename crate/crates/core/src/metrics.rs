//! Humanness metrics: 9-mer prevalence coverage against a repertoire
//! database, percentile mapping, and model log-likelihood.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::seqcore::{residues_to_string, AminoAcid, AntibodySequence, SeqError};

pub use crate::scorers::sequence_log_likelihood;

pub const KMER: usize = 9;
pub const DEFAULT_PREVALENCE_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("9-mer corpus is empty")]
    EmptyCorpus,
    #[error("sequence '{id}' has length {len}, shorter than {KMER}")]
    TooShort { id: String, len: usize },
    #[error("threshold must be in [0, 1], got {0}")]
    Threshold(f64),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("percentile reference is empty")]
    EmptyReference,
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Fraction of subjects containing each 9-mer.
#[derive(Debug, Clone, PartialEq)]
pub struct NinemerDatabase {
    prevalence: BTreeMap<String, f64>,
    subject_count: usize,
    threshold: f64,
}

/// Groups records into subjects by the header prefix before `delimiter`, or
/// one subject per record when `delimiter` is `None`. Subjects are returned in
/// order of first appearance.
pub fn group_subjects(records: &[AntibodySequence], delimiter: Option<char>) -> Vec<(String, Vec<AntibodySequence>)> {
    let mut out: Vec<(String, Vec<AntibodySequence>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let subject = match delimiter {
            Some(d) => r.id.split(d).next().unwrap_or(&r.id).to_string(),
            None => format!("{}#{i}", r.id),
        };
        match index.get(&subject) {
            Some(&k) => out[k].1.push(r.clone()),
            None => {
                index.insert(subject.clone(), out.len());
                out.push((subject, vec![r.clone()]));
            }
        }
    }
    out
}

fn windows(seq: &[AminoAcid]) -> impl Iterator<Item = String> + '_ {
    seq.windows(KMER).map(residues_to_string)
}

pub fn build_ninemer_db(
    corpus: &[(String, Vec<AntibodySequence>)],
    threshold: f64,
) -> Result<NinemerDatabase, MetricsError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::Threshold(threshold));
    }
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, seqs) in corpus {
        let mut seen = BTreeSet::new();
        for s in seqs {
            if s.len() < KMER {
                return Err(MetricsError::TooShort {
                    id: s.id.clone(),
                    len: s.len(),
                });
            }
            seen.extend(windows(&s.unmasked()?));
        }
        for k in seen {
            *counts.entry(k).or_default() += 1;
        }
    }
    let n = corpus.len();
    Ok(NinemerDatabase {
        prevalence: counts.into_iter().map(|(k, c)| (k, c as f64 / n as f64)).collect(),
        subject_count: n,
        threshold,
    })
}

impl NinemerDatabase {
    pub fn subject_count(&self) -> usize {
        self.subject_count
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(MetricsError::Threshold(threshold));
        }
        Ok(Self {
            threshold,
            ..self.clone()
        })
    }

    pub fn prevalence(&self, kmer: &str) -> f64 {
        self.prevalence.get(kmer).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.prevalence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prevalence.is_empty()
    }

    /// Sets the prevalence of a 9-mer (inserting it if absent).
    pub fn insert(&mut self, kmer: &str, prevalence: f64) {
        self.prevalence.insert(kmer.to_string(), prevalence);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "#subject_count={}\tthreshold={}\n",
            self.subject_count, self.threshold
        );
        for (k, p) in &self.prevalence {
            out.push_str(&format!("{k}\t{p}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, MetricsError> {
        let fmt = |line: usize, message: String| MetricsError::Format { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fmt(1, "empty database file".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| fmt(1, "missing '#subject_count=..' header".into()))?;
        let mut subject_count = None;
        let mut threshold = None;
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("subject_count", v)) => {
                    subject_count = Some(v.parse::<usize>().map_err(|e| fmt(1, e.to_string()))?)
                }
                Some(("threshold", v)) => threshold = Some(v.parse::<f64>().map_err(|e| fmt(1, e.to_string()))?),
                _ => return Err(fmt(1, format!("unknown header field '{field}'"))),
            }
        }
        let subject_count = subject_count.ok_or_else(|| fmt(1, "header lacks subject_count".into()))?;
        let threshold = threshold.ok_or_else(|| fmt(1, "header lacks threshold".into()))?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(MetricsError::Threshold(threshold));
        }
        let mut prevalence = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (k, p) = line
                .split_once('\t')
                .ok_or_else(|| fmt(i + 1, "expected '<9-mer>\\t<prevalence>'".into()))?;
            if k.len() != KMER || !k.chars().all(|c| AminoAcid::from_char(c).is_some() && c.is_ascii_uppercase()) {
                return Err(fmt(i + 1, format!("'{k}' is not a 9-mer over the alphabet")));
            }
            let p: f64 = p.trim().parse().map_err(|e| fmt(i + 1, format!("{e}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(fmt(i + 1, format!("prevalence {p} outside [0, 1]")));
            }
            prevalence.insert(k.to_string(), p);
        }
        Ok(Self {
            prevalence,
            subject_count,
            threshold,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        std::fs::write(path.as_ref(), self.to_tsv()).map_err(io_err(path.as_ref()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(io_err(path.as_ref()))?;
        Self::from_tsv(&text)
    }
}

/// Fraction of the sequence's `L − 8` windows whose prevalence reaches the
/// database threshold.
pub fn ninemer_score(seq: &AntibodySequence, db: &NinemerDatabase) -> Result<f64, MetricsError> {
    ninemer_score_residues(&seq.unmasked()?, db).map_err(|e| match e {
        MetricsError::TooShort { len, .. } => MetricsError::TooShort {
            id: seq.id.clone(),
            len,
        },
        e => e,
    })
}

pub fn ninemer_score_residues(seq: &[AminoAcid], db: &NinemerDatabase) -> Result<f64, MetricsError> {
    if seq.len() < KMER {
        return Err(MetricsError::TooShort {
            id: String::new(),
            len: seq.len(),
        });
    }
    let total = seq.len() - KMER + 1;
    let hits = windows(seq).filter(|k| db.prevalence(k) >= db.threshold).count();
    Ok(hits as f64 / total as f64)
}

/// Sorted reference humanness scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentileReference {
    scores: Vec<f64>,
}

impl PercentileReference {
    pub fn new(mut scores: Vec<f64>) -> Result<Self, MetricsError> {
        if scores.is_empty() {
            return Err(MetricsError::EmptyReference);
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::Format {
                line: i + 1,
                message: "non-finite reference score".into(),
            });
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores })
    }

    /// One score per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self, MetricsError> {
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            scores.push(t.parse::<f64>().map_err(|e| MetricsError::Format {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(scores)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(io_err(path.as_ref()))?;
        Self::from_text(&text)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Fraction of reference scores strictly below `score`.
    pub fn percentile(&self, score: f64) -> f64 {
        let below = self.scores.partition_point(|&s| s < score);
        below as f64 / self.scores.len() as f64
    }
}
