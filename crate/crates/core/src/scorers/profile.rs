//! Neighbor-conditioned residue profile: a small trainable stand-in for a
//! masked language model.
//!
//! Row `l` of the logits is `ln(λ·C + (1-λ)·U)` where `U` is the smoothed
//! residue frequency at `l` and `C` is the smoothed frequency at `l` given the
//! residues at `l-1` and `l+1`. When position `l` itself is visible, the
//! observed residue adds `observed_weight` pseudo-counts to `C`, so masking a
//! position changes its own row. If either neighbor is masked or outside the
//! sequence the row is `ln U`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionalSequenceModel, LogitsMatrix, Row, ScorerError};
use crate::seqcore::{AntibodySequence, Residue, ALPHABET_SIZE};

const MODEL_FORMAT: &str = "context-profile-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    /// Pseudocount added to every residue count.
    pub alpha: f64,
    /// Weight of the context term, in `[0, 1]`.
    pub lambda: f64,
    /// Pseudo-counts contributed by a visible center residue.
    pub observed_weight: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.7,
            observed_weight: 2.0,
        }
    }
}

impl ProfileParams {
    fn validate(&self) -> Result<(), ScorerError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ScorerError::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ScorerError::InvalidParameter(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.observed_weight >= 0.0 && self.observed_weight.is_finite()) {
            return Err(ScorerError::InvalidParameter(format!(
                "observed_weight must be non-negative, got {}",
                self.observed_weight
            )));
        }
        Ok(())
    }
}

type Counts = [u32; ALPHABET_SIZE];

#[derive(Debug, Clone, PartialEq)]
pub struct ContextProfileModel {
    params: ProfileParams,
    length: usize,
    n_sequences: u32,
    unigram: Vec<Counts>,
    /// Per position, keyed by `left * 20 + right`.
    context: Vec<HashMap<u16, Counts>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    length: usize,
    n_sequences: u32,
    params: ProfileParams,
    unigram: Vec<Vec<u32>>,
    context: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    position: usize,
    left: u8,
    right: u8,
    counts: Vec<u32>,
}

fn context_key(left: usize, right: usize) -> u16 {
    (left * ALPHABET_SIZE + right) as u16
}

impl ContextProfileModel {
    /// Counts residues and flanking contexts over an equal-length, unmasked corpus.
    pub fn train(corpus: &[AntibodySequence], params: ProfileParams) -> Result<Self, ScorerError> {
        params.validate()?;
        let first = corpus.first().ok_or(ScorerError::EmptyCorpus)?;
        let length = first.len();
        if length == 0 {
            return Err(ScorerError::EmptyCorpus);
        }
        let mut unigram = vec![[0u32; ALPHABET_SIZE]; length];
        let mut context: Vec<HashMap<u16, Counts>> = vec![HashMap::new(); length];
        for seq in corpus {
            if seq.len() != length {
                return Err(ScorerError::RaggedCorpus {
                    id: seq.id.clone(),
                    expected: length,
                    got: seq.len(),
                });
            }
            let aas = seq.unmasked()?;
            for (l, aa) in aas.iter().enumerate() {
                unigram[l][aa.index()] += 1;
                if l > 0 && l + 1 < length {
                    let key = context_key(aas[l - 1].index(), aas[l + 1].index());
                    context[l].entry(key).or_insert([0; ALPHABET_SIZE])[aa.index()] += 1;
                }
            }
        }
        Ok(Self {
            params,
            length,
            n_sequences: corpus.len() as u32,
            unigram,
            context,
        })
    }

    pub fn params(&self) -> ProfileParams {
        self.params
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn n_sequences(&self) -> u32 {
        self.n_sequences
    }

    /// Same counts, different smoothing/mixing parameters.
    pub fn with_params(&self, params: ProfileParams) -> Result<Self, ScorerError> {
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn unigram_probs(&self, l: usize) -> Row {
        let alpha = self.params.alpha;
        let denom = self.n_sequences as f64 + ALPHABET_SIZE as f64 * alpha;
        let mut p = [0.0; ALPHABET_SIZE];
        for (pi, &c) in p.iter_mut().zip(&self.unigram[l]) {
            *pi = (c as f64 + alpha) / denom;
        }
        p
    }

    fn row_probs(&self, seq: &AntibodySequence, l: usize) -> Row {
        let unigram = self.unigram_probs(l);
        let lambda = self.params.lambda;
        if l == 0 || l + 1 >= self.length || lambda == 0.0 {
            return unigram;
        }
        let (left, right) = match (seq.get(l - 1), seq.get(l + 1)) {
            (Some(Residue::Aa(a)), Some(Residue::Aa(b))) => (a, b),
            _ => return unigram,
        };
        let zeros = [0u32; ALPHABET_SIZE];
        let counts = self.context[l]
            .get(&context_key(left.index(), right.index()))
            .unwrap_or(&zeros);
        let alpha = self.params.alpha;
        let observed = match seq.get(l) {
            Some(Residue::Aa(aa)) if self.params.observed_weight > 0.0 => Some(aa.index()),
            _ => None,
        };
        let kappa = if observed.is_some() {
            self.params.observed_weight
        } else {
            0.0
        };
        let total: u32 = counts.iter().sum();
        let denom = total as f64 + ALPHABET_SIZE as f64 * alpha + kappa;
        let mut p = [0.0; ALPHABET_SIZE];
        for (i, pi) in p.iter_mut().enumerate() {
            let mut num = counts[i] as f64 + alpha;
            if observed == Some(i) {
                num += kappa;
            }
            *pi = lambda * num / denom + (1.0 - lambda) * unigram[i];
        }
        p
    }

    fn row_logits(&self, seq: &AntibodySequence, l: usize) -> Row {
        let mut p = self.row_probs(seq, l);
        for v in p.iter_mut() {
            *v = v.ln();
        }
        p
    }

    fn check_len(&self, seq: &AntibodySequence) -> Result<(), ScorerError> {
        if seq.len() != self.length {
            return Err(ScorerError::LengthMismatch {
                expected: self.length,
                got: seq.len(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut context = Vec::new();
        for (position, table) in self.context.iter().enumerate() {
            let sorted: BTreeMap<_, _> = table.iter().collect();
            for (&key, counts) in sorted {
                context.push(ContextEntry {
                    position,
                    left: (key as usize / ALPHABET_SIZE) as u8,
                    right: (key as usize % ALPHABET_SIZE) as u8,
                    counts: counts.to_vec(),
                });
            }
        }
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            length: self.length,
            n_sequences: self.n_sequences,
            params: self.params,
            unigram: self.unigram.iter().map(|c| c.to_vec()).collect(),
            context,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScorerError> {
        let bad = |m: String| ScorerError::ModelFile(m);
        let file: ModelFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(bad(format!("unknown format '{}'", file.format)));
        }
        file.params.validate()?;
        if file.unigram.len() != file.length || file.length == 0 {
            return Err(bad("unigram table does not match length".into()));
        }
        let to_counts = |v: &[u32]| -> Result<Counts, ScorerError> {
            v.try_into()
                .map_err(|_| bad(format!("count vector of length {}", v.len())))
        };
        let unigram = file
            .unigram
            .iter()
            .map(|v| to_counts(v))
            .collect::<Result<Vec<_>, _>>()?;
        let mut context = vec![HashMap::new(); file.length];
        for e in &file.context {
            if e.position >= file.length
                || e.left as usize >= ALPHABET_SIZE
                || e.right as usize >= ALPHABET_SIZE
            {
                return Err(bad(format!("context entry out of range at {}", e.position)));
            }
            context[e.position].insert(
                context_key(e.left as usize, e.right as usize),
                to_counts(&e.counts)?,
            );
        }
        Ok(Self {
            params: file.params,
            length: file.length,
            n_sequences: file.n_sequences,
            unigram,
            context,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScorerError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| ScorerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScorerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl ConditionalSequenceModel for ContextProfileModel {
    fn score(&self, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError> {
        self.check_len(seq)?;
        LogitsMatrix::new((0..self.length).map(|l| self.row_logits(seq, l)).collect())
    }

    fn score_position(&self, seq: &AntibodySequence, position: usize) -> Result<Row, ScorerError> {
        self.check_len(seq)?;
        if position >= self.length {
            return Err(ScorerError::LengthMismatch {
                expected: self.length,
                got: position + 1,
            });
        }
        Ok(self.row_logits(seq, position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::sequence_log_likelihood;
    use crate::seqcore::{AminoAcid, ALPHABET};
    use proptest::prelude::*;

    fn seq(text: &str) -> AntibodySequence {
        AntibodySequence::parse("s", text).unwrap()
    }

    fn argmax(row: &Row) -> usize {
        let mut best = 0;
        for i in 1..row.len() {
            if row[i] > row[best] {
                best = i;
            }
        }
        best
    }

    const BASE: &str = "QVQLVESGGGLVQAGGSLRLSCAAS";

    #[test]
    fn single_sequence_corpus_argmax_recovers_it() {
        let corpus: Vec<_> = (0..100).map(|_| seq(BASE)).collect();
        let params = ProfileParams {
            alpha: 1e-9,
            ..Default::default()
        };
        let model = ContextProfileModel::train(&corpus, params).unwrap();
        let z = model.score(&seq(BASE)).unwrap();
        for (l, c) in BASE.chars().enumerate() {
            assert_eq!(ALPHABET[argmax(z.row(l))] as char, c, "position {l}");
        }
    }

    #[test]
    fn large_pseudocount_flattens_rows() {
        let corpus: Vec<_> = (0..100).map(|_| seq(BASE)).collect();
        let params = ProfileParams {
            alpha: 1e6,
            ..Default::default()
        };
        let model = ContextProfileModel::train(&corpus, params).unwrap();
        let z = model.score(&seq(BASE)).unwrap();
        for row in z.rows() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            assert!(max - min < 0.01);
        }
    }

    #[test]
    fn unigram_only_model_ignores_masks() {
        let corpus = vec![seq(BASE), seq("QVQLQESGPGLVKPSETLSLTCTVS")];
        let params = ProfileParams {
            lambda: 0.0,
            ..Default::default()
        };
        let model = ContextProfileModel::train(&corpus, params).unwrap();
        let masked = seq(&"#".repeat(BASE.len()));
        assert_eq!(model.score(&masked).unwrap(), model.score(&seq(BASE)).unwrap());
    }

    #[test]
    fn masking_a_position_changes_its_own_row() {
        let corpus: Vec<_> = (0..10).map(|_| seq(BASE)).collect();
        let model = ContextProfileModel::train(&corpus, ProfileParams::default()).unwrap();
        let mut masked = seq(BASE);
        masked.set(5, Residue::Mask);
        let a = model.score_position(&seq(BASE), 5).unwrap();
        let b = model.score_position(&masked, 5).unwrap();
        assert_ne!(a, b);
        // a masked neighbor backs off to the unigram row
        let c = model.score_position(&masked, 6).unwrap();
        let unigram: Row = model.unigram_probs(6).map(f64::ln);
        assert_eq!(c, unigram);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            ContextProfileModel::train(&[], ProfileParams::default()),
            Err(ScorerError::EmptyCorpus)
        ));
        let mut bad = seq("ACD");
        bad.id = "bad".into();
        match ContextProfileModel::train(&[seq("ACDE"), bad], ProfileParams::default()) {
            Err(ScorerError::RaggedCorpus { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        let zero_alpha = ProfileParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(ContextProfileModel::train(&[seq("ACDE")], zero_alpha).is_err());
    }

    #[test]
    fn training_sequence_beats_every_single_mutant() {
        let corpus: Vec<_> = (0..50).map(|_| seq(BASE)).collect();
        let params = ProfileParams {
            alpha: 1e-9,
            ..Default::default()
        };
        let model = ContextProfileModel::train(&corpus, params).unwrap();
        let wild = sequence_log_likelihood(&model, &seq(BASE)).unwrap();
        for l in 0..BASE.len() {
            for aa in AminoAcid::all() {
                let mut m = seq(BASE);
                if m.get(l) == Some(Residue::Aa(aa)) {
                    continue;
                }
                m.set(l, Residue::Aa(aa));
                assert!(wild > sequence_log_likelihood(&model, &m).unwrap());
            }
        }
    }

    #[test]
    fn json_roundtrip_gives_identical_logits() {
        let corpus = vec![seq(BASE), seq("QVQLQESGPGLVKPSETLSLTCTVS")];
        let model = ContextProfileModel::train(&corpus, ProfileParams::default()).unwrap();
        let back = ContextProfileModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json(), model.to_json());
        assert!(ContextProfileModel::from_json("{\"format\":\"nope\"}").is_err());
    }

    fn residues(len: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..20, len)
            .prop_map(|v| v.into_iter().map(|i| ALPHABET[i] as char).collect())
    }

    proptest! {
        #[test]
        fn rows_are_local(
            corpus in proptest::collection::vec(residues(12), 1..8),
            probe in residues(12),
            l in 0usize..12,
            far in 0usize..12,
            aa in 0usize..20,
        ) {
            prop_assume!(far + 1 < l || far > l + 1);
            let corpus: Vec<_> = corpus.iter().map(|s| seq(s)).collect();
            let model = ContextProfileModel::train(&corpus, ProfileParams::default()).unwrap();
            let before = model.score_position(&seq(&probe), l).unwrap();
            let mut changed = seq(&probe);
            changed.set(far, Residue::Aa(AminoAcid::from_index(aa).unwrap()));
            prop_assert_eq!(before, model.score_position(&changed, l).unwrap());
            // exp of a row sums to one
            let total: f64 = before.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
