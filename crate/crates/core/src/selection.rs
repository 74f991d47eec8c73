//! Developability liability filters, unique/improved counting and
//! ranked or unranked candidate selection.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcore::{residues_to_string, AminoAcid, Candidate, RegionAnnotation};

/// Version tag of the built-in liability rules.
pub const RULE_VERSION: &str = "v1";

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("invalid motif pattern '{pattern}': {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("candidate '{id}' has no '{metric}' score")]
    MissingScore { id: String, metric: String },
    #[error("cannot select {k} candidates from a pool of {available}")]
    TooFew { k: usize, available: usize },
}

/// One position of a motif: a set of allowed residues.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot([bool; 20]);

/// Fixed-width residue pattern. Syntax: a residue letter, `X` for any
/// residue, `[ST]` for a class, `[^P]` for a negated class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifPattern {
    source: String,
    slots: Vec<Slot>,
}

impl MotifPattern {
    pub fn parse(pattern: &str) -> Result<Self, SelectionError> {
        let err = |reason: &str| SelectionError::Pattern {
            pattern: pattern.to_string(),
            reason: reason.to_string(),
        };
        let letter = |c: char| AminoAcid::from_char(c).filter(|_| c.is_ascii_uppercase());
        let mut slots = Vec::new();
        let mut chars = pattern.chars();
        while let Some(c) = chars.next() {
            let slot = match c {
                'X' => Slot([true; 20]),
                '[' => {
                    let mut body = String::new();
                    loop {
                        match chars.next() {
                            Some(']') => break,
                            Some(ch) => body.push(ch),
                            None => return Err(err("unclosed '['")),
                        }
                    }
                    let (negate, members) = match body.strip_prefix('^') {
                        Some(rest) => (true, rest),
                        None => (false, body.as_str()),
                    };
                    if members.is_empty() {
                        return Err(err("empty class"));
                    }
                    let mut set = [negate; 20];
                    for m in members.chars() {
                        let aa = letter(m).ok_or_else(|| err(&format!("'{m}' is not a residue")))?;
                        set[aa.index()] = !negate;
                    }
                    Slot(set)
                }
                c => {
                    let aa = letter(c).ok_or_else(|| err(&format!("'{c}' is not a residue")))?;
                    let mut set = [false; 20];
                    set[aa.index()] = true;
                    Slot(set)
                }
            };
            slots.push(slot);
        }
        if slots.is_empty() {
            return Err(err("empty pattern"));
        }
        Ok(Self {
            source: pattern.to_string(),
            slots,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn width(&self) -> usize {
        self.slots.len()
    }

    /// 0-based start of every (possibly overlapping) match.
    pub fn find_all(&self, seq: &[AminoAcid]) -> Vec<usize> {
        if seq.len() < self.width() {
            return Vec::new();
        }
        (0..=seq.len() - self.width())
            .filter(|&start| {
                self.slots
                    .iter()
                    .enumerate()
                    .all(|(k, s)| s.0[seq[start + k].index()])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifRule {
    pub name: String,
    pub pattern: String,
}

/// Enabled liability checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub ddd: bool,
    pub n_glycosylation: bool,
    pub non_canonical_cys: bool,
    /// Additional named motifs.
    pub extra_motifs: Vec<MotifRule>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ddd: true,
            n_glycosylation: true,
            non_canonical_cys: true,
            extra_motifs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterResult {
    pub name: String,
    pub passed: bool,
    /// 1-based offending positions (motif start, or the cysteine).
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub rule_version: &'static str,
    pub results: Vec<FilterResult>,
}

impl FilterReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    /// Failed checks as `name@pos,pos;name@pos`, empty when all pass.
    pub fn failures(&self) -> String {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| {
                let pos: Vec<String> = r.positions.iter().map(|p| p.to_string()).collect();
                format!("{}@{}", r.name, pos.join(","))
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Compiled [`FilterConfig`].
#[derive(Debug, Clone)]
pub struct LiabilityFilters {
    motifs: Vec<(String, MotifPattern)>,
    non_canonical_cys: bool,
}

impl LiabilityFilters {
    pub fn new(config: &FilterConfig) -> Result<Self, SelectionError> {
        let mut motifs = Vec::new();
        if config.ddd {
            motifs.push(("ddd".to_string(), MotifPattern::parse("DDD")?));
        }
        if config.n_glycosylation {
            motifs.push(("n_glycosylation".to_string(), MotifPattern::parse("N[^P][ST]")?));
        }
        for m in &config.extra_motifs {
            motifs.push((m.name.clone(), MotifPattern::parse(&m.pattern)?));
        }
        Ok(Self {
            motifs,
            non_canonical_cys: config.non_canonical_cys,
        })
    }

    pub fn check(&self, seq: &[AminoAcid], annotation: &RegionAnnotation) -> FilterReport {
        let mut results: Vec<FilterResult> = self
            .motifs
            .iter()
            .map(|(name, pattern)| {
                let hits = pattern.find_all(seq);
                FilterResult {
                    name: name.clone(),
                    passed: hits.is_empty(),
                    positions: hits.into_iter().map(|p| p + 1).collect(),
                }
            })
            .collect();
        if self.non_canonical_cys {
            let hits: Vec<usize> = seq
                .iter()
                .enumerate()
                .filter(|(l, aa)| aa.to_char() == 'C' && !annotation.canonical_cysteines.contains(l))
                .map(|(l, _)| l + 1)
                .collect();
            results.push(FilterResult {
                name: "non_canonical_cys".to_string(),
                passed: hits.is_empty(),
                positions: hits,
            });
        }
        FilterReport {
            rule_version: RULE_VERSION,
            results,
        }
    }
}

/// All three built-in checks.
pub fn filter_liabilities(seq: &[AminoAcid], annotation: &RegionAnnotation) -> FilterReport {
    LiabilityFilters::new(&FilterConfig::default())
        .expect("built-in patterns parse")
        .check(seq, annotation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UniqueCount {
    /// Distinct sequences whose metric is strictly above the starter's.
    pub improved: usize,
    pub unique: usize,
}

pub fn count_unique_improved(
    candidates: &[Candidate],
    starter_score: f64,
    metric: &str,
) -> Result<UniqueCount, SelectionError> {
    let mut seen = HashSet::new();
    let mut improved = 0;
    for c in candidates {
        let score = score_of(c, metric)?;
        if seen.insert(residues_to_string(&c.residues())) && score > starter_score {
            improved += 1;
        }
    }
    Ok(UniqueCount {
        improved,
        unique: seen.len(),
    })
}

fn score_of(c: &Candidate, metric: &str) -> Result<f64, SelectionError> {
    c.scores
        .get(metric)
        .copied()
        .ok_or_else(|| SelectionError::MissingScore {
            id: c.sequence.id.clone(),
            metric: metric.to_string(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionMode {
    /// Top `k` by the named score, descending.
    Ranked { k: usize, oracle: String },
    /// `k` drawn uniformly without replacement.
    Unranked { k: usize },
}

/// Selects among filter-passing candidates. Ranked selections get ranks
/// `1..=k`; ties are broken by sequence text.
pub fn select<R: Rng + ?Sized>(
    candidates: &[Candidate],
    mode: &SelectionMode,
    rng: &mut R,
) -> Result<Vec<Candidate>, SelectionError> {
    let pool: Vec<&Candidate> = candidates.iter().filter(|c| c.passed_filters).collect();
    match mode {
        SelectionMode::Ranked { k, oracle } => {
            if *k > pool.len() {
                return Err(SelectionError::TooFew {
                    k: *k,
                    available: pool.len(),
                });
            }
            let mut scored = pool
                .into_iter()
                .map(|c| Ok((score_of(c, oracle)?, c.sequence.to_text(), c)))
                .collect::<Result<Vec<_>, SelectionError>>()?;
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            Ok(scored
                .into_iter()
                .take(*k)
                .enumerate()
                .map(|(i, (_, _, c))| {
                    let mut c = c.clone();
                    c.rank = Some(i + 1);
                    c
                })
                .collect())
        }
        SelectionMode::Unranked { k } => {
            if *k > pool.len() {
                return Err(SelectionError::TooFew {
                    k: *k,
                    available: pool.len(),
                });
            }
            Ok(sample(rng, pool.len(), *k)
                .into_iter()
                .map(|i| {
                    let mut c = pool[i].clone();
                    c.rank = None;
                    c
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::ChainType;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn aas(s: &str) -> Vec<AminoAcid> {
        s.chars().map(|c| AminoAcid::from_char(c).unwrap()).collect()
    }

    fn annotation(len: usize, cys: Vec<usize>) -> RegionAnnotation {
        RegionAnnotation::new(len, vec![], cys, ChainType::Heavy).unwrap().0
    }

    #[test]
    fn ddd_reported_at_window_start() {
        let s = aas("GGADDDKGG");
        let r = filter_liabilities(&s, &annotation(9, vec![]));
        assert!(!r.passed());
        assert_eq!(r.results[0].name, "ddd");
        assert_eq!(r.results[0].positions, vec![4]);
        assert_eq!(r.failures(), "ddd@4");
        // DDDD holds two windows
        let r = filter_liabilities(&aas("DDDD"), &annotation(4, vec![]));
        assert_eq!(r.results[0].positions, vec![1, 2]);
    }

    #[test]
    fn sequon_proline_exemption() {
        let ann = annotation(5, vec![]);
        assert!(filter_liabilities(&aas("GNPSG"), &ann).passed());
        let r = filter_liabilities(&aas("GNASG"), &ann);
        assert_eq!(r.results[1].positions, vec![2]);
        assert!(!filter_liabilities(&aas("GNATG"), &ann).passed());
    }

    #[test]
    fn cysteine_canonicity() {
        let s = aas("ACGGC");
        assert!(filter_liabilities(&s, &annotation(5, vec![1, 4])).passed());
        let r = filter_liabilities(&s, &annotation(5, vec![1]));
        assert_eq!(r.failures(), "non_canonical_cys@5");
        assert_eq!(r.rule_version, "v1");
    }

    #[test]
    fn pattern_syntax() {
        let p = MotifPattern::parse("NX[ST]").unwrap();
        assert_eq!(p.find_all(&aas("NPSNAT")), vec![0, 3]);
        assert!(MotifPattern::parse("N[ST").is_err());
        assert!(MotifPattern::parse("NZ").is_err());
        assert!(MotifPattern::parse("").is_err());
        assert!(MotifPattern::parse("[^]").is_err());
        let mut cfg = FilterConfig::default();
        cfg.extra_motifs.push(MotifRule {
            name: "ng".into(),
            pattern: "NG".into(),
        });
        let f = LiabilityFilters::new(&cfg).unwrap();
        assert_eq!(f.check(&aas("ANGA"), &annotation(4, vec![])).failures(), "ng@2");
    }

    fn candidate(seq: &str, score: f64) -> Candidate {
        let mut c = Candidate::new(seq, &aas(seq), &aas(seq), 0);
        c.scores.insert("f".into(), score);
        c
    }

    #[test]
    fn unique_improved_counting() {
        let cs = vec![candidate("AC", 1.0), candidate("AC", 1.0)];
        assert_eq!(
            count_unique_improved(&cs, 1.0, "f").unwrap(),
            UniqueCount { improved: 0, unique: 1 }
        );
        let cs = vec![candidate("AC", 2.0), candidate("AD", 0.5), candidate("AE", 3.0)];
        assert_eq!(
            count_unique_improved(&cs, 1.0, "f").unwrap(),
            UniqueCount { improved: 2, unique: 3 }
        );
        assert!(count_unique_improved(&cs, 1.0, "g").is_err());
    }

    #[test]
    fn ranked_selection() {
        let mut cs: Vec<Candidate> = ["AA", "AC", "AD", "AE", "AF"]
            .iter()
            .zip([1.0, 3.0, 3.0, 2.0, 5.0])
            .map(|(s, v)| candidate(s, v))
            .collect();
        cs[4].passed_filters = false;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = SelectionMode::Ranked { k: 3, oracle: "f".into() };
        let top = select(&cs, &mode, &mut rng).unwrap();
        let names: Vec<String> = top.iter().map(|c| c.sequence.to_text()).collect();
        assert_eq!(names, vec!["AC", "AD", "AE"]);
        assert_eq!(top.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![Some(1), Some(2), Some(3)]);
        assert_eq!(select(&cs, &mode, &mut rng).unwrap(), top);
        assert!(matches!(
            select(&cs, &SelectionMode::Ranked { k: 5, oracle: "f".into() }, &mut rng),
            Err(SelectionError::TooFew { k: 5, available: 4 })
        ));
    }

    #[test]
    fn unranked_is_uniform() {
        let cs: Vec<Candidate> = ["AA", "AC", "AD", "AE"].iter().map(|s| candidate(s, 0.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = std::collections::HashMap::new();
        let trials = 20_000;
        for _ in 0..trials {
            let picked = select(&cs, &SelectionMode::Unranked { k: 2 }, &mut rng).unwrap();
            assert_eq!(picked.len(), 2);
            assert_ne!(picked[0].sequence, picked[1].sequence);
            for c in picked {
                *counts.entry(c.sequence.to_text()).or_insert(0usize) += 1;
            }
        }
        // each of 4 items is picked with probability 1/2
        for (_, n) in counts {
            let f = n as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.015, "frequency {f}");
        }
    }

    proptest! {
        #[test]
        fn ranked_scores_non_increasing(scores in proptest::collection::vec(-5.0f64..5.0, 1..30), k in 1usize..30) {
            let alphabet: Vec<char> = "ACDEFGHIKLMNPQRSTVWY".chars().collect();
            let cs: Vec<Candidate> = scores
                .iter()
                .enumerate()
                .map(|(i, &v)| candidate(&format!("{}{}", alphabet[i / 20], alphabet[i % 20]), v))
                .collect();
            let k = k.min(cs.len());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let top = select(&cs, &SelectionMode::Ranked { k, oracle: "f".into() }, &mut rng).unwrap();
            let vals: Vec<f64> = top.iter().map(|c| c.scores["f"]).collect();
            prop_assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert!(vals[k - 1] >= sorted[k - 1]);
        }
    }
}
