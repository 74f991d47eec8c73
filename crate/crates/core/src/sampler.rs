//! Humanization by per-position sampling (or argmax infilling) from a
//! conditional sequence model, optionally combined with oracle experts.
//!
//! At each visited position the model row `z` and the expert score vectors
//! `s_k` are combined into `z/τ + Σ_k s_k/τ_k` and a residue is drawn from the
//! softmax of that row. The three sampling methods differ only in what the
//! model sees when it scores the visited position:
//!
//! * unmasked: the current sequence as is;
//! * gibbs: the current sequence with the visited position masked;
//! * ard: every mutable position not yet visited stays masked.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorers::{
    cached_point_scores, AttributeOracle, ConditionalSequenceModel, OracleScoreMatrix, Row,
    ScorerError,
};
use crate::seqcore::{
    build_mutable_mask, AminoAcid, AntibodySequence, Candidate, MaskPolicy, MutableMask,
    RegionAnnotation, Residue, SeqError, ALPHABET_SIZE,
};

/// Temperature defaults.
pub mod defaults {
    /// Unguided sampling when diversity is the goal.
    pub const TAU_UNGUIDED: f64 = 1.0;
    /// Unguided baseline for comparisons against guided sampling.
    pub const TAU_UNGUIDED_BASELINE: f64 = 0.6;
    /// Model temperature when oracles guide sampling.
    pub const TAU_GUIDED_MLM: f64 = 1.2;
    /// Oracle temperature when combined with the model.
    pub const TAU_GUIDED_ORACLE: f64 = 0.4;
    /// Oracle temperature when sampling from oracles alone.
    pub const TAU_ORACLE_ONLY: f64 = 0.2;
    pub const P_MASK: f64 = 0.5;
    pub const MAX_ARGMAX_ROUNDS: usize = 10;
    /// Retry cap for deduplicated batches, as a multiple of `n_samples`.
    pub const RETRY_FACTOR: usize = 10;
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("expected {expected} expert temperatures, got {got}")]
    ExpertMismatch { expected: usize, got: usize },
    #[error("step {step} (position {position}): {source}")]
    Step {
        step: usize,
        position: usize,
        #[source]
        source: ScorerError,
    },
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<SamplerError>,
    },
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// `softmax(z/τ)`, computed with max subtraction.
pub fn softmax_temp(z: &Row, tau: f64) -> Result<Row, SamplerError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SamplerError::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(SamplerError::NonFinite(i));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; ALPHABET_SIZE];
    let mut total = 0.0;
    for (pi, v) in p.iter_mut().zip(&scaled) {
        *pi = (v - max).exp();
        total += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= total;
    }
    Ok(p)
}

/// Product-of-experts logits at one position: `z/τ + Σ_k s_k/τ_k`.
///
/// The log-normalizer is left to [`softmax_temp`] (called with τ = 1).
pub fn poe_row(z: &Row, tau: f64, scores: &[Row], temps: &[f64]) -> Result<Row, SamplerError> {
    if scores.len() != temps.len() {
        return Err(SamplerError::ExpertMismatch {
            expected: scores.len(),
            got: temps.len(),
        });
    }
    if !(tau > 0.0) || temps.iter().any(|t| !(*t > 0.0)) {
        return Err(SamplerError::InvalidConfig("temperatures must be positive".into()));
    }
    let mut out = [0.0; ALPHABET_SIZE];
    for (i, o) in out.iter_mut().enumerate() {
        *o = z[i] / tau;
        for (s, t) in scores.iter().zip(temps) {
            *o += s[i] / t;
        }
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(SamplerError::NonFinite(i));
    }
    Ok(out)
}

/// Inverse-CDF draw over the fixed alphabet order.
pub fn sample_categorical<R: Rng + ?Sized>(p: &Row, rng: &mut R) -> Result<AminoAcid, SamplerError> {
    if let Some(index) = p.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(SamplerError::NegativeProbability { index, value: p[index] });
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SamplerError::NotNormalized(total));
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last_nonzero = i;
        }
        cum += pi;
        if u < cum {
            return Ok(AminoAcid::from_index(i).expect("index < 20"));
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    Ok(AminoAcid::from_index(last_nonzero).expect("index < 20"))
}

/// Highest entry, ties to the lowest alphabet index.
pub fn argmax(row: &Row) -> AminoAcid {
    let mut best = 0;
    for i in 1..ALPHABET_SIZE {
        if row[i] > row[best] {
            best = i;
        }
    }
    AminoAcid::from_index(best).expect("index < 20")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unmasked,
    Gibbs,
    Ard,
    SapiensArgmax,
    RandomMaskArgmax,
    IterativeMaskArgmax,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Unmasked,
        Method::Gibbs,
        Method::Ard,
        Method::SapiensArgmax,
        Method::RandomMaskArgmax,
        Method::IterativeMaskArgmax,
    ];

    pub fn is_sampling(self) -> bool {
        matches!(self, Method::Unmasked | Method::Gibbs | Method::Ard)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Unmasked => "unmasked",
            Method::Gibbs => "gibbs",
            Method::Ard => "ard",
            Method::SapiensArgmax => "sapiens_argmax",
            Method::RandomMaskArgmax => "random_mask_argmax",
            Method::IterativeMaskArgmax => "iterative_mask_argmax",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SamplerError::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// Where an expert's per-position scores come from.
#[derive(Clone)]
pub enum ExpertSource {
    /// Point-mutation scores of the starter, reused at every step.
    Cached(Arc<OracleScoreMatrix>),
    /// The oracle itself, evaluated on the current sequence. Positions that
    /// are masked for the model are shown to the oracle with their current
    /// (starter or already sampled) residue.
    Fresh(Arc<dyn AttributeOracle>),
}

impl std::fmt::Debug for ExpertSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertSource::Cached(m) => write!(f, "Cached({}x20)", m.len()),
            ExpertSource::Fresh(_) => write!(f, "Fresh(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Expert {
    pub name: String,
    pub source: ExpertSource,
    pub temperature: f64,
}

impl Expert {
    pub fn cached(name: impl Into<String>, matrix: OracleScoreMatrix, temperature: f64) -> Self {
        Self {
            name: name.into(),
            source: ExpertSource::Cached(Arc::new(matrix)),
            temperature,
        }
    }

    pub fn fresh(name: impl Into<String>, oracle: Arc<dyn AttributeOracle>, temperature: f64) -> Self {
        Self {
            name: name.into(),
            source: ExpertSource::Fresh(oracle),
            temperature,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplingConfig {
    pub method: Method,
    pub tau_mlm: f64,
    /// When false the model row is ignored and only the experts drive sampling.
    pub use_model: bool,
    pub guidance: Vec<Expert>,
    pub mask_policy: MaskPolicy,
    pub n_samples: usize,
    pub base_seed: u64,
    pub dedupe: bool,
    /// Per-position mask probability for `random_mask_argmax`.
    pub p_mask: f64,
    pub max_argmax_rounds: usize,
    /// Trajectory budget for deduplicated batches; defaults to 10·n_samples.
    pub max_trajectories: Option<usize>,
    pub workers: usize,
    /// Keep per-step trajectory records in batch output.
    pub record_trajectories: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            method: Method::Unmasked,
            tau_mlm: defaults::TAU_UNGUIDED,
            use_model: true,
            guidance: Vec::new(),
            mask_policy: MaskPolicy::default(),
            n_samples: 500,
            base_seed: 0,
            dedupe: true,
            p_mask: defaults::P_MASK,
            max_argmax_rounds: defaults::MAX_ARGMAX_ROUNDS,
            max_trajectories: None,
            workers: 1,
            record_trajectories: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if !(self.tau_mlm > 0.0 && self.tau_mlm.is_finite()) {
            return bad(format!("tau_mlm must be positive, got {}", self.tau_mlm));
        }
        for e in &self.guidance {
            if !(e.temperature > 0.0 && e.temperature.is_finite()) {
                return bad(format!("expert '{}' temperature must be positive", e.name));
            }
        }
        if !self.use_model && self.guidance.is_empty() {
            return bad("sampling without the model needs at least one expert".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1".into());
        }
        if !(self.p_mask > 0.0 && self.p_mask <= 1.0) {
            return bad(format!("p_mask must be in (0, 1], got {}", self.p_mask));
        }
        if self.max_argmax_rounds == 0 {
            return bad("max_argmax_rounds must be at least 1".into());
        }
        self.mask_policy.validate()?;
        Ok(())
    }

    pub fn retry_cap(&self) -> usize {
        self.max_trajectories
            .unwrap_or(defaults::RETRY_FACTOR * self.n_samples)
            .max(self.n_samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub position: usize,
    /// Model logits at the position before sampling.
    pub logits: Row,
    /// Combined product-of-experts logits the residue was drawn from.
    pub combined: Row,
    pub residue: char,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub index: usize,
    pub seed: u64,
    pub method: Method,
    pub visit_order: Vec<usize>,
    pub steps: Vec<TrajectoryStep>,
    /// Argmax rounds performed (sapiens only; 0 otherwise).
    pub rounds: usize,
    pub converged: bool,
    pub sequence: String,
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for trajectory `index`, independent of execution order.
pub fn trajectory_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MaskRule {
    Unmasked,
    Current,
    Unvisited,
}

struct Walk<'a> {
    model: &'a dyn ConditionalSequenceModel,
    config: &'a SamplingConfig,
    temps: Vec<f64>,
}

impl<'a> Walk<'a> {
    fn new(model: &'a dyn ConditionalSequenceModel, config: &'a SamplingConfig) -> Self {
        Self {
            model,
            config,
            temps: config.guidance.iter().map(|e| e.temperature).collect(),
        }
    }

    /// Expert rows, each shifted so its maximum is 0. Softmax ignores the
    /// shift, and a constant expert contributes exactly zero.
    fn expert_rows(
        &self,
        current: &[AminoAcid],
        working: &AntibodySequence,
        position: usize,
    ) -> Result<Vec<Row>, ScorerError> {
        self.config
            .guidance
            .iter()
            .map(|e| {
                let mut row = match &e.source {
                    ExpertSource::Cached(m) => cached_point_scores(m, working, position)?,
                    ExpertSource::Fresh(o) => o.point_scores(current, position)?,
                };
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for v in row.iter_mut() {
                    *v -= max;
                }
                Ok(row)
            })
            .collect()
    }

    fn combine(&self, z: &Row, experts: &[Row]) -> Result<Row, SamplerError> {
        if self.config.use_model {
            poe_row(z, self.config.tau_mlm, experts, &self.temps)
        } else {
            poe_row(&[0.0; ALPHABET_SIZE], 1.0, experts, &self.temps)
        }
    }

    fn model_row(&self, working: &AntibodySequence, position: usize) -> Result<Row, ScorerError> {
        if self.config.use_model {
            self.model.score_position(working, position)
        } else {
            Ok([0.0; ALPHABET_SIZE])
        }
    }

    fn step_err(step: usize, position: usize) -> impl Fn(ScorerError) -> SamplerError {
        move |source| SamplerError::Step { step, position, source }
    }

    fn sample<R: Rng + ?Sized>(
        &self,
        rule: MaskRule,
        starter: &AntibodySequence,
        mask: &MutableMask,
        rng: &mut R,
    ) -> Result<(Vec<AminoAcid>, Vec<TrajectoryStep>), SamplerError> {
        let mut current = starter.unmasked()?;
        let mut working = starter.clone();
        if rule == MaskRule::Unvisited {
            for &i in mask.indices() {
                working.set(i, Residue::Mask);
            }
        }
        let mut steps = Vec::with_capacity(mask.len());
        for (step, &position) in mask.indices().iter().enumerate() {
            if rule == MaskRule::Current {
                working.set(position, Residue::Mask);
            }
            let err = Self::step_err(step, position);
            let z = self.model_row(&working, position).map_err(&err)?;
            let experts = self.expert_rows(&current, &working, position).map_err(&err)?;
            let combined = self.combine(&z, &experts)?;
            let p = softmax_temp(&combined, 1.0)?;
            let residue = sample_categorical(&p, rng)?;
            working.set(position, Residue::Aa(residue));
            current[position] = residue;
            steps.push(TrajectoryStep {
                step,
                position,
                logits: z,
                combined,
                residue: residue.to_char(),
            });
        }
        Ok((current, steps))
    }

    fn argmax_at(
        &self,
        z: &Row,
        current: &[AminoAcid],
        working: &AntibodySequence,
        step: usize,
        position: usize,
    ) -> Result<(Row, AminoAcid), SamplerError> {
        let experts = self
            .expert_rows(current, working, position)
            .map_err(Self::step_err(step, position))?;
        let combined = self.combine(z, &experts)?;
        Ok((combined, argmax(&combined)))
    }
}

/// Output of a single trajectory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub residues: Vec<AminoAcid>,
    pub steps: Vec<TrajectoryStep>,
    pub rounds: usize,
    pub converged: bool,
}

impl RunOutput {
    fn sampled(residues: Vec<AminoAcid>, steps: Vec<TrajectoryStep>) -> Self {
        Self {
            residues,
            steps,
            rounds: 0,
            converged: true,
        }
    }

    pub fn candidate(&self, id: impl Into<String>, starter: &AntibodySequence, seed: u64) -> Candidate {
        let start = starter.unmasked().expect("starter is unmasked");
        Candidate::new(id, &start, &self.residues, seed)
    }
}

/// Visits `mask` in order, scoring the current never-masked sequence.
pub fn run_unmasked<R: Rng + ?Sized>(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<RunOutput, SamplerError> {
    let (residues, steps) = Walk::new(model, config).sample(MaskRule::Unmasked, starter, mask, rng)?;
    Ok(RunOutput::sampled(residues, steps))
}

/// Single Gibbs-like sweep: each visited position is masked before scoring.
pub fn run_gibbs<R: Rng + ?Sized>(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<RunOutput, SamplerError> {
    let (residues, steps) = Walk::new(model, config).sample(MaskRule::Current, starter, mask, rng)?;
    Ok(RunOutput::sampled(residues, steps))
}

/// Autoregressive denoising: all mutable positions start masked and are
/// infilled one at a time.
pub fn run_ard<R: Rng + ?Sized>(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<RunOutput, SamplerError> {
    let (residues, steps) = Walk::new(model, config).sample(MaskRule::Unvisited, starter, mask, rng)?;
    Ok(RunOutput::sampled(residues, steps))
}

/// Repeated simultaneous argmax over all mutable positions without masking,
/// until a fixed point or `max_argmax_rounds`.
pub fn run_sapiens_argmax(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
) -> Result<RunOutput, SamplerError> {
    let walk = Walk::new(model, config);
    let mut current = starter.unmasked()?;
    let mut steps = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < config.max_argmax_rounds {
        rounds += 1;
        let working = AntibodySequence::from_amino_acids(starter.id.clone(), &current);
        let z = if config.use_model {
            Some(model.score(&working).map_err(|source| SamplerError::Step {
                step: steps.len(),
                position: 0,
                source,
            })?)
        } else {
            None
        };
        let mut next = current.clone();
        for &position in mask.indices() {
            let row = z.as_ref().map_or([0.0; ALPHABET_SIZE], |z| *z.row(position));
            let (combined, best) = walk.argmax_at(&row, &current, &working, steps.len(), position)?;
            next[position] = best;
            steps.push(TrajectoryStep {
                step: steps.len(),
                position,
                logits: row,
                combined,
                residue: best.to_char(),
            });
        }
        if next == current {
            converged = true;
            break;
        }
        current = next;
    }
    if !converged {
        log::warn!(
            "sapiens argmax did not reach a fixed point in {} rounds; returning last iterate",
            config.max_argmax_rounds
        );
    }
    Ok(RunOutput {
        residues: current,
        steps,
        rounds,
        converged,
    })
}

/// Masks a random subset of the mutable positions (each with probability
/// `p_mask`, at least one), scores once, and infills every masked position
/// with its argmax.
pub fn run_random_masking_argmax<R: Rng + ?Sized>(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<RunOutput, SamplerError> {
    let mut current = starter.unmasked()?;
    if mask.is_empty() {
        return Ok(RunOutput::sampled(current, Vec::new()));
    }
    let mut chosen: Vec<usize> = mask
        .indices()
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < config.p_mask)
        .collect();
    if chosen.is_empty() {
        chosen.push(mask.indices()[rng.gen_range(0..mask.len())]);
    }
    let mut working = starter.clone();
    for &i in &chosen {
        working.set(i, Residue::Mask);
    }
    let walk = Walk::new(model, config);
    let z = if config.use_model {
        Some(model.score(&working).map_err(|source| SamplerError::Step {
            step: 0,
            position: chosen[0],
            source,
        })?)
    } else {
        None
    };
    let snapshot = current.clone();
    let mut steps = Vec::with_capacity(chosen.len());
    for (step, &position) in chosen.iter().enumerate() {
        let row = z.as_ref().map_or([0.0; ALPHABET_SIZE], |z| *z.row(position));
        let (combined, best) = walk.argmax_at(&row, &snapshot, &working, step, position)?;
        current[position] = best;
        steps.push(TrajectoryStep {
            step,
            position,
            logits: row,
            combined,
            residue: best.to_char(),
        });
    }
    Ok(RunOutput::sampled(current, steps))
}

/// Visits the mutable positions in mask order; each visit masks only that
/// position, scores, and infills the argmax.
pub fn run_iterative_masking_argmax(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
) -> Result<RunOutput, SamplerError> {
    let walk = Walk::new(model, config);
    let mut current = starter.unmasked()?;
    let mut working = starter.clone();
    let mut steps = Vec::with_capacity(mask.len());
    for (step, &position) in mask.indices().iter().enumerate() {
        working.set(position, Residue::Mask);
        let row = walk
            .model_row(&working, position)
            .map_err(Walk::step_err(step, position))?;
        let (combined, best) = walk.argmax_at(&row, &current, &working, step, position)?;
        current[position] = best;
        working.set(position, Residue::Aa(best));
        steps.push(TrajectoryStep {
            step,
            position,
            logits: row,
            combined,
            residue: best.to_char(),
        });
    }
    Ok(RunOutput::sampled(current, steps))
}

/// Runs `config.method` once with the given visit order.
pub fn run_method<R: Rng + ?Sized>(
    starter: &AntibodySequence,
    mask: &MutableMask,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<RunOutput, SamplerError> {
    match config.method {
        Method::Unmasked => run_unmasked(starter, mask, model, config, rng),
        Method::Gibbs => run_gibbs(starter, mask, model, config, rng),
        Method::Ard => run_ard(starter, mask, model, config, rng),
        Method::SapiensArgmax => run_sapiens_argmax(starter, mask, model, config),
        Method::RandomMaskArgmax => run_random_masking_argmax(starter, mask, model, config, rng),
        Method::IterativeMaskArgmax => run_iterative_masking_argmax(starter, mask, model, config),
    }
}

/// Trajectory `index` of a batch: seeds its own generator, draws a fresh
/// mutable mask (shuffled visit order), then runs the configured method.
pub fn run_trajectory(
    index: usize,
    starter: &AntibodySequence,
    annotation: &RegionAnnotation,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
) -> Result<(Candidate, Trajectory), SamplerError> {
    let seed = trajectory_seed(config.base_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = build_mutable_mask(annotation, config.mask_policy, &mut rng)?;
    let out = run_method(starter, &mask, model, config, &mut rng).map_err(|e| {
        SamplerError::Trajectory {
            index,
            source: Box::new(e),
        }
    })?;
    let candidate = out.candidate(format!("{}_t{index}", starter.id), starter, seed);
    let trajectory = Trajectory {
        index,
        seed,
        method: config.method,
        visit_order: mask.indices().to_vec(),
        steps: out.steps,
        rounds: out.rounds,
        converged: out.converged,
        sequence: candidate.sequence.to_text(),
    };
    Ok((candidate, trajectory))
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub candidates: Vec<Candidate>,
    /// Trajectories of the kept candidates, when recording is enabled.
    pub trajectories: Vec<Trajectory>,
    pub trajectories_run: usize,
    /// How many unique candidates were missing when the retry cap was hit.
    pub shortfall: usize,
}

fn run_range(
    range: std::ops::Range<usize>,
    starter: &AntibodySequence,
    annotation: &RegionAnnotation,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
    #[allow(unused_variables)] pool: Option<&Pool>,
) -> Vec<Result<(Candidate, Trajectory), SamplerError>> {
    #[cfg(feature = "parallel")]
    if let Some(pool) = pool {
        use rayon::prelude::*;
        return pool.0.install(|| {
            range
                .into_par_iter()
                .map(|t| run_trajectory(t, starter, annotation, model, config))
                .collect()
        });
    }
    range
        .map(|t| run_trajectory(t, starter, annotation, model, config))
        .collect()
}

#[cfg(feature = "parallel")]
struct Pool(rayon::ThreadPool);
#[cfg(not(feature = "parallel"))]
struct Pool;

fn make_pool(workers: usize) -> Option<Pool> {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        return rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .ok()
            .map(Pool);
    }
    let _ = workers;
    None
}

/// Generates `n_samples` candidates from independent trajectories.
///
/// Trajectory `t` is seeded from `(base_seed, t)` and results are consumed in
/// index order, so the batch does not depend on `workers`. With `dedupe`,
/// repeated sequences are dropped (first occurrence kept) and trajectories
/// continue until `n_samples` unique candidates exist or the retry cap is hit.
pub fn generate_batch(
    starter: &AntibodySequence,
    annotation: &RegionAnnotation,
    model: &dyn ConditionalSequenceModel,
    config: &SamplingConfig,
) -> Result<Batch, SamplerError> {
    config.validate()?;
    let residues = starter.unmasked()?;
    if annotation.length != residues.len() {
        return Err(SeqError::LengthMismatch {
            left: residues.len(),
            right: annotation.length,
        }
        .into());
    }
    for e in &config.guidance {
        if let ExpertSource::Cached(m) = &e.source {
            if m.len() != residues.len() {
                return Err(ScorerError::LengthMismatch {
                    expected: residues.len(),
                    got: m.len(),
                }
                .into());
            }
            m.check_starter(&residues);
        }
    }
    let pool = make_pool(config.workers);
    let target = config.n_samples;
    // sapiens rounds ignore visit order, so a fixed mask gives one outcome
    let deterministic = config.method == Method::SapiensArgmax && config.mask_policy == MaskPolicy::FrameworkAll;
    let cap = match (config.dedupe, deterministic) {
        (true, true) => 1,
        (true, false) => config.retry_cap(),
        (false, _) => target,
    };
    let chunk = (config.workers.max(1) * 16).max(64);

    let mut seen: HashSet<Vec<AminoAcid>> = HashSet::new();
    let mut candidates = Vec::with_capacity(target);
    let mut trajectories = Vec::new();
    let mut next = 0;
    let mut consumed = 0;
    'outer: while next < cap {
        let end = (next + chunk).min(cap);
        let results = run_range(next..end, starter, annotation, model, config, pool.as_ref());
        next = end;
        for result in results {
            let (candidate, trajectory) = result?;
            consumed += 1;
            if config.dedupe && !seen.insert(candidate.residues()) {
                continue;
            }
            candidates.push(candidate);
            if config.record_trajectories {
                trajectories.push(trajectory);
            }
            if candidates.len() == target {
                break 'outer;
            }
        }
    }
    let shortfall = target - candidates.len();
    if shortfall > 0 {
        log::warn!(
            "retry cap of {cap} trajectories reached with {} of {target} unique candidates",
            candidates.len()
        );
    }
    Ok(Batch {
        candidates,
        trajectories,
        trajectories_run: consumed,
        shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorers::{FixedLogitsModel, LogitsMatrix};
    use proptest::prelude::*;

    fn unit(i: usize) -> AminoAcid {
        AminoAcid::from_index(i).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0; 20], 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 0.05).abs() < 1e-15));

        let mut z = [0.0; 20];
        z[0] = 1.0;
        let p = softmax_temp(&z, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 19.0)).abs() < 1e-15);
        assert!((p[0] - 0.12516).abs() < 1e-5);

        let mut z = [0.0; 20];
        z[7] = 0.3;
        z[2] = 0.1;
        let p = softmax_temp(&z, 0.01).unwrap();
        assert!(p[7] > 0.999);
    }

    #[test]
    fn softmax_errors() {
        let mut z = [0.0; 20];
        z[4] = f64::INFINITY;
        assert!(matches!(softmax_temp(&z, 1.0), Err(SamplerError::NonFinite(4))));
        assert!(softmax_temp(&[0.0; 20], 0.0).is_err());
        assert!(softmax_temp(&[0.0; 20], -1.0).is_err());
    }

    #[test]
    fn poe_examples() {
        let mut z = [0.0; 20];
        z[3] = 2.0;
        assert_eq!(poe_row(&z, 2.0, &[], &[]).unwrap()[3], 1.0);

        let mut s = [0.0; 20];
        s[5] = 4.0f64.ln();
        let combined = poe_row(&[0.0; 20], 1.0, &[s], &[1.0]).unwrap();
        let p = softmax_temp(&combined, 1.0).unwrap();
        assert!((p[5] - 4.0 / 23.0).abs() < 1e-12);

        assert!(matches!(
            poe_row(&z, 1.0, &[s], &[]),
            Err(SamplerError::ExpertMismatch { .. })
        ));
    }

    #[test]
    fn sample_categorical_one_hot_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = [0.0; 20];
        p[13] = 1.0;
        for _ in 0..100 {
            assert_eq!(sample_categorical(&p, &mut rng).unwrap().index(), 13);
        }
        let mut bad = [0.05; 20];
        bad[0] = -0.05;
        bad[1] = 0.15;
        assert!(matches!(
            sample_categorical(&bad, &mut rng),
            Err(SamplerError::NegativeProbability { index: 0, .. })
        ));
        assert!(sample_categorical(&[0.1; 20], &mut rng).is_err());
    }

    #[test]
    fn sample_categorical_is_seeded() {
        let p = softmax_temp(&core::array::from_fn(|i| i as f64 * 0.1), 1.0).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_categorical(&p, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let mut row = [0.0; 20];
        row[4] = 1.0;
        row[9] = 1.0;
        assert_eq!(argmax(&row), unit(4));
        assert_eq!(argmax(&[0.0; 20]), unit(0));
    }

    fn flat_model(len: usize) -> FixedLogitsModel {
        FixedLogitsModel::new(LogitsMatrix::new(vec![[0.0; 20]; len]).unwrap())
    }

    #[test]
    fn empty_mask_returns_starter() {
        let starter = AntibodySequence::parse("s", "ACDEFG").unwrap();
        let mask = MutableMask::new(vec![], 6).unwrap();
        let model = flat_model(6);
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for method in Method::ALL {
            let cfg = SamplingConfig { method, ..cfg.clone() };
            let out = run_method(&starter, &mask, &model, &cfg, &mut rng).unwrap();
            assert_eq!(out.residues, starter.unmasked().unwrap(), "{method:?}");
        }
    }

    /// Scorer whose argmax at position 0 flips between A and C each round.
    struct Flipper;

    impl ConditionalSequenceModel for Flipper {
        fn score(&self, seq: &AntibodySequence) -> Result<LogitsMatrix, ScorerError> {
            let mut rows = vec![[0.0; 20]; seq.len()];
            let target = if seq.get(0) == Some(Residue::Aa(unit(0))) { 1 } else { 0 };
            rows[0][target] = 5.0;
            LogitsMatrix::new(rows)
        }
    }

    #[test]
    fn sapiens_two_cycle_stops_at_round_cap() {
        let starter = AntibodySequence::parse("s", "AAA").unwrap();
        let mask = MutableMask::new(vec![0], 3).unwrap();
        let cfg = SamplingConfig {
            method: Method::SapiensArgmax,
            max_argmax_rounds: 5,
            ..Default::default()
        };
        let out = run_sapiens_argmax(&starter, &mask, &Flipper, &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.rounds, 5);
        // A -> C -> A -> C -> A -> C
        assert_eq!(out.residues[0], unit(1));
    }

    #[test]
    fn sapiens_fixed_point_takes_one_round() {
        let mut rows = vec![[0.0; 20]; 3];
        for (l, row) in rows.iter_mut().enumerate() {
            row[l] = 3.0;
        }
        let model = FixedLogitsModel::new(LogitsMatrix::new(rows).unwrap());
        let starter = AntibodySequence::parse("s", "ACD").unwrap();
        let mask = MutableMask::new(vec![2, 0, 1], 3).unwrap();
        let cfg = SamplingConfig::default();
        let out = run_sapiens_argmax(&starter, &mask, &model, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.rounds, 1);
        assert_eq!(out.residues, starter.unmasked().unwrap());
    }

    #[test]
    fn random_mask_argmax_leaves_unmasked_positions() {
        let mut rows = vec![[0.0; 20]; 8];
        for row in rows.iter_mut() {
            row[19] = 2.0;
        }
        let model = FixedLogitsModel::new(LogitsMatrix::new(rows).unwrap());
        let starter = AntibodySequence::parse("s", "AAAAAAAA").unwrap();
        let mask = MutableMask::new((0..8).collect(), 8).unwrap();
        let cfg = SamplingConfig {
            p_mask: 0.5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let out = run_random_masking_argmax(&starter, &mask, &model, &cfg, &mut rng).unwrap();
            let masked: Vec<usize> = out.steps.iter().map(|s| s.position).collect();
            assert!(!masked.is_empty());
            for l in 0..8 {
                let expected = if masked.contains(&l) { unit(19) } else { unit(0) };
                assert_eq!(out.residues[l], expected);
            }
        }
    }

    #[test]
    fn trajectory_seeds_are_stable_and_distinct() {
        assert_eq!(trajectory_seed(42, 7), trajectory_seed(42, 7));
        let seeds: HashSet<u64> = (0..1000).map(|t| trajectory_seed(42, t)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(trajectory_seed(1, 0), trajectory_seed(2, 0));
    }

    #[test]
    fn config_validation() {
        let ok = SamplingConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SamplingConfig { tau_mlm: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SamplingConfig { n_samples: 0, ..ok.clone() }.validate().is_err());
        assert!(SamplingConfig { p_mask: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SamplingConfig { use_model: false, ..ok.clone() }.validate().is_err());
        assert!("gibbs".parse::<Method>().is_ok());
        assert!("metropolis".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(z in proptest::array::uniform20(-30.0f64..30.0), c in -100.0f64..100.0, tau in 0.05f64..5.0) {
            let shifted: Row = core::array::from_fn(|i| z[i] + c);
            let p = softmax_temp(&z, tau).unwrap();
            let q = softmax_temp(&shifted, tau).unwrap();
            for i in 0..20 {
                prop_assert!((p[i] - q[i]).abs() < 1e-12);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_expert_is_neutral(z in proptest::array::uniform20(-5.0f64..5.0), c in -10.0f64..10.0, tau_k in 0.1f64..2.0) {
            let base = softmax_temp(&poe_row(&z, 1.0, &[], &[]).unwrap(), 1.0).unwrap();
            let guided = softmax_temp(&poe_row(&z, 1.0, &[[c; 20]], &[tau_k]).unwrap(), 1.0).unwrap();
            for i in 0..20 {
                prop_assert!((base[i] - guided[i]).abs() < 1e-12);
            }
        }
    }
}
