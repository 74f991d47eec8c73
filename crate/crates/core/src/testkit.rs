//! Synthetic oracles, exact joint distributions for short masks, and
//! reproducible synthetic corpora.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sampler::{ExpertSource, Method, SamplerError, SamplingConfig};
use crate::scorers::{
    cached_point_scores, AttributeOracle, ConditionalSequenceModel, Row, ScorerError,
};
use crate::seqcore::{
    AminoAcid, AntibodySequence, ChainType, MutableMask, RegionAnnotation, Residue, ALPHABET_SIZE,
};

/// `f(x) = Σ_l w[l][x_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveOracle {
    weights: Vec<Row>,
}

impl AdditiveOracle {
    pub fn new(weights: Vec<Row>) -> Self {
        Self { weights }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(length: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..length)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-scale..=scale)))
            .collect();
        Self { weights }
    }

    pub fn weights(&self) -> &[Row] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn check(&self, seq: &[AminoAcid]) -> Result<(), ScorerError> {
        if seq.len() != self.weights.len() {
            return Err(ScorerError::LengthMismatch {
                expected: self.weights.len(),
                got: seq.len(),
            });
        }
        Ok(())
    }
}

impl AttributeOracle for AdditiveOracle {
    fn evaluate(&self, seq: &[AminoAcid]) -> Result<f64, ScorerError> {
        self.check(seq)?;
        Ok(seq.iter().zip(&self.weights).map(|(aa, w)| w[aa.index()]).sum())
    }

    fn point_scores(&self, seq: &[AminoAcid], position: usize) -> Result<Row, ScorerError> {
        self.check(seq)?;
        let rest: f64 = seq
            .iter()
            .zip(&self.weights)
            .enumerate()
            .filter(|(l, _)| *l != position)
            .map(|(_, (aa, w))| w[aa.index()])
            .sum();
        Ok(std::array::from_fn(|i| self.weights[position][i] + rest))
    }
}

/// Additive landscape plus sparse pairwise terms `e[(l, m)][x_l][x_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseEpistaticOracle {
    additive: AdditiveOracle,
    pairs: Vec<((usize, usize), Vec<Row>)>,
}

impl PairwiseEpistaticOracle {
    pub fn new(additive: AdditiveOracle, pairs: Vec<((usize, usize), Vec<Row>)>) -> Result<Self, ScorerError> {
        for &((l, m), ref table) in &pairs {
            if l >= additive.len() || m >= additive.len() || l == m || table.len() != ALPHABET_SIZE {
                return Err(ScorerError::InvalidParameter(format!("bad pair term ({l}, {m})")));
            }
        }
        Ok(Self { additive, pairs })
    }

    /// `n_pairs` distinct random position pairs, terms uniform in `[-eps, eps]`.
    pub fn random(additive: AdditiveOracle, n_pairs: usize, eps: f64, seed: u64) -> Self {
        let len = additive.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = BTreeSet::new();
        let max_pairs = len * len.saturating_sub(1) / 2;
        while chosen.len() < n_pairs.min(max_pairs) {
            let l = rng.gen_range(0..len);
            let m = rng.gen_range(0..len);
            if l != m {
                chosen.insert((l.min(m), l.max(m)));
            }
        }
        let pairs: Vec<_> = chosen.into_iter().collect();
        Self::random_on_pairs(additive, &pairs, eps, seed.wrapping_add(1))
    }

    /// Random terms on the given pairs. For a fixed seed the terms scale
    /// linearly with `eps`.
    pub fn random_on_pairs(additive: AdditiveOracle, pairs: &[(usize, usize)], eps: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = pairs
            .iter()
            .map(|&p| {
                let table = (0..ALPHABET_SIZE)
                    .map(|_| std::array::from_fn(|_| eps * rng.gen_range(-1.0..=1.0)))
                    .collect();
                (p, table)
            })
            .collect();
        Self { additive, pairs }
    }

    pub fn additive(&self) -> &AdditiveOracle {
        &self.additive
    }
}

impl AttributeOracle for PairwiseEpistaticOracle {
    fn evaluate(&self, seq: &[AminoAcid]) -> Result<f64, ScorerError> {
        let base = self.additive.evaluate(seq)?;
        let inter: f64 = self
            .pairs
            .iter()
            .map(|((l, m), t)| t[seq[*l].index()][seq[*m].index()])
            .sum();
        Ok(base + inter)
    }
}

/// Probability of each outcome at the masked positions, outcomes listed in
/// visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    positions: Vec<usize>,
    probs: BTreeMap<Vec<AminoAcid>, f64>,
}

impl JointDistribution {
    pub fn new(positions: Vec<usize>, probs: BTreeMap<Vec<AminoAcid>, f64>) -> Self {
        Self { positions, probs }
    }

    /// Empirical frequencies of full sequences restricted to `positions`.
    pub fn empirical<'a>(positions: &[usize], samples: impl IntoIterator<Item = &'a [AminoAcid]>) -> Self {
        let mut counts: BTreeMap<Vec<AminoAcid>, f64> = BTreeMap::new();
        let mut n = 0.0;
        for s in samples {
            let key = positions.iter().map(|&p| s[p]).collect();
            *counts.entry(key).or_default() += 1.0;
            n += 1.0;
        }
        for v in counts.values_mut() {
            *v /= n;
        }
        Self::new(positions.to_vec(), counts)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn probs(&self) -> &BTreeMap<Vec<AminoAcid>, f64> {
        &self.probs
    }

    pub fn get(&self, outcome: &[AminoAcid]) -> f64 {
        self.probs.get(outcome).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

/// `½ Σ |p − q|` over the union of outcomes; outcomes absent from one side
/// count as probability 0 there.
pub fn tv_distance(p: &JointDistribution, q: &JointDistribution) -> Result<f64, SamplerError> {
    if p.positions != q.positions {
        return Err(SamplerError::InvalidConfig(format!(
            "outcome spaces differ: positions {:?} vs {:?}",
            p.positions, q.positions
        )));
    }
    let keys: BTreeSet<&Vec<AminoAcid>> = p.probs.keys().chain(q.probs.keys()).collect();
    Ok(0.5 * keys.into_iter().map(|k| (p.get(k) - q.get(k)).abs()).sum::<f64>())
}

pub const BRUTE_FORCE_MAX_POSITIONS: usize = 3;

fn lse_probs(logits: &[f64; ALPHABET_SIZE]) -> [f64; ALPHABET_SIZE] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    std::array::from_fn(|i| (logits[i] - lse).exp())
}

/// Exact joint distribution of a sampling method over a pinned visit order of
/// at most three positions, by enumerating every outcome and chaining the
/// per-step conditionals.
///
/// The sequence shown to the model at step `j` is built from scratch here:
/// unmasked shows the starter with steps `< j` filled in; gibbs additionally
/// masks position `j`; ard masks every position at or after step `j`.
pub fn brute_force_joint(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    method: Method,
    config: &SamplingConfig,
) -> Result<JointDistribution, SamplerError> {
    let order = mask.indices().to_vec();
    if order.len() > BRUTE_FORCE_MAX_POSITIONS {
        return Err(SamplerError::InvalidConfig(format!(
            "brute force supports at most {BRUTE_FORCE_MAX_POSITIONS} positions, got {}",
            order.len()
        )));
    }
    if !method.is_sampling() {
        return Err(SamplerError::InvalidConfig(format!(
            "brute force applies to sampling methods, not {}",
            method.name()
        )));
    }
    let base = starter.unmasked()?;
    let mut probs = BTreeMap::new();
    let mut prefix = Vec::new();
    enumerate(&base, &order, model, method, config, &mut prefix, 1.0, &mut probs)?;
    Ok(JointDistribution::new(order, probs))
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    base: &[AminoAcid],
    order: &[usize],
    model: &dyn ConditionalSequenceModel,
    method: Method,
    config: &SamplingConfig,
    prefix: &mut Vec<AminoAcid>,
    weight: f64,
    out: &mut BTreeMap<Vec<AminoAcid>, f64>,
) -> Result<(), SamplerError> {
    let j = prefix.len();
    if j == order.len() {
        out.insert(prefix.clone(), weight);
        return Ok(());
    }
    let mut current = base.to_vec();
    for (k, aa) in prefix.iter().enumerate() {
        current[order[k]] = *aa;
    }
    let mut view: Vec<Residue> = current.iter().map(|&a| Residue::Aa(a)).collect();
    match method {
        Method::Gibbs => view[order[j]] = Residue::Mask,
        Method::Ard => {
            for &p in &order[j..] {
                view[p] = Residue::Mask;
            }
        }
        _ => {}
    }
    let view = AntibodySequence::new("brute", view);
    let position = order[j];
    let z = if config.use_model {
        *model.score(&view)?.row(position)
    } else {
        [0.0; ALPHABET_SIZE]
    };
    let tau = if config.use_model { config.tau_mlm } else { 1.0 };
    let mut logits: [f64; ALPHABET_SIZE] = std::array::from_fn(|i| z[i] / tau);
    for e in &config.guidance {
        let s = match &e.source {
            ExpertSource::Cached(m) => cached_point_scores(m, &view, position)?,
            ExpertSource::Fresh(o) => o.point_scores(&current, position)?,
        };
        for i in 0..ALPHABET_SIZE {
            logits[i] += s[i] / e.temperature;
        }
    }
    let p = lse_probs(&logits);
    for aa in AminoAcid::all() {
        prefix.push(aa);
        enumerate(base, order, model, method, config, prefix, weight * p[aa.index()], out)?;
        prefix.pop();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LiabilityKind {
    Ddd,
    Glycosylation,
    NonCanonicalCysteine,
}

impl LiabilityKind {
    pub fn name(self) -> &'static str {
        match self {
            LiabilityKind::Ddd => "ddd",
            LiabilityKind::Glycosylation => "n_glycosylation",
            LiabilityKind::NonCanonicalCysteine => "non_canonical_cys",
        }
    }
}

/// A liability written into a corpus sequence at a 0-based position (motif
/// start, or the cysteine itself).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlantedMotif {
    pub sequence: usize,
    pub kind: LiabilityKind,
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub sequences: Vec<AntibodySequence>,
    /// Shared annotation: no CDRs, two canonical cysteines.
    pub annotation: RegionAnnotation,
    pub planted: Vec<PlantedMotif>,
}

/// Residues that cannot complete a liability motif on their own.
const BACKGROUND: &str = "AEFGHIKLMPQRSTVWY";

/// Random sequences over a background alphabet without C, D or N, with
/// canonical cysteines at `L/5` and `4L/5` and liability motifs planted in
/// non-overlapping slots (each slot gets a motif with probability
/// `liability_rate`). Motifs are separated by at least one background residue,
/// so the planted list is the complete set of liabilities.
pub fn make_planted_corpus(seed: u64, n_subjects: usize, length: usize, liability_rate: f64) -> PlantedCorpus {
    assert!(length >= 9, "planted corpus needs length >= 9");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: Vec<AminoAcid> = BACKGROUND.chars().map(|c| AminoAcid::from_char(c).unwrap()).collect();
    let aa = |c: char| AminoAcid::from_char(c).unwrap();
    let cys = [length / 5, 4 * length / 5];
    let mut sequences = Vec::with_capacity(n_subjects);
    let mut planted = Vec::new();
    for s in 0..n_subjects {
        let mut residues: Vec<AminoAcid> = (0..length).map(|_| *background.choose(&mut rng).unwrap()).collect();
        for &c in &cys {
            residues[c] = aa('C');
        }
        // slots of four: up to three motif residues plus a background spacer
        let mut start = 0;
        while start + 4 <= length {
            let slot = start..start + 4;
            start += 4;
            if cys.iter().any(|c| slot.contains(c)) || rng.gen::<f64>() >= liability_rate {
                continue;
            }
            let p = slot.start;
            let kind = match rng.gen_range(0..3) {
                0 => {
                    for k in 0..3 {
                        residues[p + k] = aa('D');
                    }
                    LiabilityKind::Ddd
                }
                1 => {
                    residues[p] = aa('N');
                    residues[p + 1] = loop {
                        let x = *background.choose(&mut rng).unwrap();
                        if x != aa('P') {
                            break x;
                        }
                    };
                    residues[p + 2] = if rng.gen() { aa('S') } else { aa('T') };
                    LiabilityKind::Glycosylation
                }
                _ => {
                    residues[p] = aa('C');
                    LiabilityKind::NonCanonicalCysteine
                }
            };
            planted.push(PlantedMotif {
                sequence: s,
                kind,
                position: p,
            });
        }
        sequences.push(AntibodySequence::from_amino_acids(format!("planted_{s}"), &residues));
    }
    let (annotation, _) = RegionAnnotation::new(length, vec![], cys.to_vec(), ChainType::Vhh)
        .expect("valid planted annotation");
    PlantedCorpus {
        sequences,
        annotation,
        planted,
    }
}

/// Desk-scale stand-in for a humanization campaign: a human-like corpus
/// built from germline templates, and a starter whose framework carries
/// foreign residues.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub corpus: Vec<AntibodySequence>,
    pub templates: Vec<Vec<AminoAcid>>,
    pub starter: AntibodySequence,
    pub annotation: RegionAnnotation,
    /// Framework positions where the starter differs from template 0.
    pub foreign_positions: Vec<usize>,
}

pub const SYNTHETIC_LENGTH: usize = 64;
pub const SYNTHETIC_CDRS: [(usize, usize); 2] = [(24, 32), (46, 54)];
pub const SYNTHETIC_CYS: [usize; 2] = [21, 43];
pub const SYNTHETIC_FOREIGN_PAIRS: usize = 1;
const TEMPLATE_WEIGHTS: [f64; 4] = [0.4, 0.2, 0.2, 0.2];
const CORPUS_MUTATION_RATE: f64 = 0.08;

/// Four templates: template 0 is the most common; templates 1-3 are close
/// relatives of each other that agree on alternative residues right after
/// each foreign pair, so the corpus-wide majority there differs from
/// template 0 while the template-0 context still predicts template 0. The
/// starter is template 0 with random CDRs and [`SYNTHETIC_FOREIGN_PAIRS`]
/// pairs of adjacent framework positions replaced by foreign residues.
pub fn synthetic_setup(seed: u64, corpus_size: usize) -> SyntheticSetup {
    synthetic_setup_with(seed, corpus_size, SYNTHETIC_FOREIGN_PAIRS)
}

/// [`synthetic_setup`] with a chosen number of foreign framework pairs.
pub fn synthetic_setup_with(seed: u64, corpus_size: usize, foreign_pairs: usize) -> SyntheticSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let non_cys: Vec<AminoAcid> = AminoAcid::all().filter(|a| a.to_char() != 'C').collect();
    let cys = AminoAcid::from_char('C').unwrap();
    let length = SYNTHETIC_LENGTH;
    let (annotation, _) = RegionAnnotation::new(
        length,
        SYNTHETIC_CDRS.to_vec(),
        SYNTHETIC_CYS.to_vec(),
        ChainType::Vhh,
    )
    .expect("valid synthetic annotation");
    let in_cdr = |p: usize| annotation.in_cdr(p);
    let random_residue = |rng: &mut ChaCha8Rng, not: AminoAcid| loop {
        let r = *non_cys.choose(rng).unwrap();
        if r != not {
            break r;
        }
    };

    let mut t0: Vec<AminoAcid> = (0..length).map(|_| *non_cys.choose(&mut rng).unwrap()).collect();
    for &c in &SYNTHETIC_CYS {
        t0[c] = cys;
    }
    let framework: Vec<usize> = (0..length)
        .filter(|&p| !in_cdr(p) && !SYNTHETIC_CYS.contains(&p))
        .collect();
    // foreign pairs (p, p+1) followed by two more framework positions
    let fw = |p: usize| framework.contains(&p);
    let mut pair_starts: Vec<usize> = framework
        .iter()
        .copied()
        .filter(|&p| p > 0 && fw(p + 1) && fw(p + 2) && fw(p + 3))
        .collect();
    pair_starts.shuffle(&mut rng);
    let mut starts: Vec<usize> = Vec::new();
    for p in pair_starts {
        if starts.len() == foreign_pairs {
            break;
        }
        if starts.iter().any(|&f| f.abs_diff(p) < 6) {
            continue;
        }
        starts.push(p);
    }
    starts.sort_unstable();
    let foreign: Vec<usize> = starts.iter().flat_map(|&p| [p, p + 1]).collect();

    // right after each pair, the relatives share two alternative residues;
    // the corpus majority at the first of them differs from template 0
    let mut relative_base = t0.clone();
    let mut alt_positions = Vec::new();
    for &p in &starts {
        for a in [p + 2, p + 3] {
            relative_base[a] = random_residue(&mut rng, t0[a]);
            alt_positions.push(a);
        }
    }
    let mut templates = vec![t0.clone()];
    for _ in 1..4 {
        let mut t = relative_base.clone();
        for p in 0..length {
            if SYNTHETIC_CYS.contains(&p) || alt_positions.contains(&p) {
                continue;
            }
            if rng.gen::<f64>() < 0.25 {
                t[p] = random_residue(&mut rng, t[p]);
            }
        }
        templates.push(t);
    }

    let mut corpus = Vec::with_capacity(corpus_size);
    for s in 0..corpus_size {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = TEMPLATE_WEIGHTS.len() - 1;
        for (i, w) in TEMPLATE_WEIGHTS.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let mut seq = templates[k].clone();
        for p in 0..length {
            if !SYNTHETIC_CYS.contains(&p) && rng.gen::<f64>() < CORPUS_MUTATION_RATE {
                seq[p] = random_residue(&mut rng, seq[p]);
            }
        }
        corpus.push(AntibodySequence::from_amino_acids(format!("human_{s}"), &seq));
    }

    let mut starter = t0.clone();
    for &p in &foreign {
        starter[p] = random_residue(&mut rng, t0[p]);
    }
    for p in (0..length).filter(|&p| in_cdr(p)) {
        starter[p] = *non_cys.choose(&mut rng).unwrap();
    }
    SyntheticSetup {
        corpus,
        templates,
        starter: AntibodySequence::from_amino_acids("starter", &starter),
        annotation,
        foreign_positions: foreign,
    }
}

/// `n` random mutants of `seq`, each with a uniformly random number of point
/// mutations in `0..=max_mutations` at distinct positions.
pub fn random_mutants(seq: &[AminoAcid], n: usize, max_mutations: usize, seed: u64) -> Vec<Vec<AminoAcid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<usize> = (0..seq.len()).collect();
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..=max_mutations.min(seq.len()));
            let mut out = seq.to_vec();
            for &p in positions.choose_multiple(&mut rng, k) {
                out[p] = loop {
                    let r = AminoAcid::from_index(rng.gen_range(0..ALPHABET_SIZE)).unwrap();
                    if r != seq[p] {
                        break r;
                    }
                };
            }
            out
        })
        .collect()
}
