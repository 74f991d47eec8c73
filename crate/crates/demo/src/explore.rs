//! Plain-Rust operations behind the browser demo.

use std::collections::HashSet;
use std::sync::OnceLock;

use humanize_core::sampler::{generate_batch, poe_row, softmax_temp, Expert, Method, SamplingConfig};
use humanize_core::scorers::{
    cache_oracle, sequence_log_likelihood, AttributeOracle, ConditionalSequenceModel, ContextProfileModel,
    OracleScoreMatrix, ProfileParams,
};
use humanize_core::selection::filter_liabilities;
use humanize_core::seqcore::{residues_to_string, AntibodySequence, MaskPolicy, Residue, ALPHABET};
use humanize_core::stats::mean;
use humanize_core::testkit::{synthetic_setup_with, AdditiveOracle, SyntheticSetup};
use serde::Serialize;

pub struct Workbench {
    pub setup: SyntheticSetup,
    pub model: ContextProfileModel,
    pub oracle: AdditiveOracle,
    pub matrix: OracleScoreMatrix,
}

pub fn workbench() -> &'static Workbench {
    static CELL: OnceLock<Workbench> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = synthetic_setup_with(7, 200, 4);
        let model = ContextProfileModel::train(&setup.corpus, ProfileParams::default()).expect("synthetic corpus trains");
        let oracle = AdditiveOracle::random(setup.starter.len(), 1.0, 8);
        let matrix = cache_oracle(&oracle, &setup.starter).expect("additive oracle caches");
        Workbench {
            setup,
            model,
            oracle,
            matrix,
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Overview {
    pub starter: String,
    pub length: usize,
    pub cdr_intervals: Vec<(usize, usize)>,
    pub foreign_positions: Vec<usize>,
    pub alphabet: String,
}

pub fn overview() -> Overview {
    let w = workbench();
    Overview {
        starter: w.setup.starter.to_text(),
        length: w.setup.starter.len(),
        cdr_intervals: w.setup.annotation.cdr_intervals.clone(),
        foreign_positions: w.setup.foreign_positions.clone(),
        alphabet: String::from_utf8(ALPHABET.to_vec()).unwrap(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionView {
    pub position: usize,
    pub starter_residue: char,
    pub model: Vec<f64>,
    pub oracle: Vec<f64>,
    pub combined: Vec<f64>,
}

/// Model, oracle and product-of-experts distributions at one 0-based position
/// of the starter (the position itself is masked for the model).
pub fn position_view(position: usize, tau_mlm: f64, tau_k: f64) -> Result<PositionView, String> {
    let w = workbench();
    let starter = &w.setup.starter;
    if position >= starter.len() {
        return Err(format!("position {position} is outside 0..{}", starter.len()));
    }
    let mut masked = starter.clone();
    masked.set(position, Residue::Mask);
    let z = w.model.score_position(&masked, position).map_err(|e| e.to_string())?;
    let s = *w.matrix.row(position);
    let model = softmax_temp(&z, tau_mlm).map_err(|e| e.to_string())?;
    let oracle = softmax_temp(&s, tau_k).map_err(|e| e.to_string())?;
    let row = poe_row(&z, tau_mlm, &[s], &[tau_k]).map_err(|e| e.to_string())?;
    let combined = softmax_temp(&row, 1.0).map_err(|e| e.to_string())?;
    Ok(PositionView {
        position,
        starter_residue: starter.to_text().as_bytes()[position] as char,
        model: model.to_vec(),
        oracle: oracle.to_vec(),
        combined: combined.to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchRow {
    pub sequence: String,
    pub mutations: String,
    pub loglik: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchView {
    pub method: String,
    pub guided: bool,
    pub trajectories: usize,
    pub unique: usize,
    pub mean_oracle: f64,
    pub mean_loglik: f64,
    pub starter_oracle: f64,
    pub starter_loglik: f64,
    pub top: Vec<BatchRow>,
}

/// Runs `trajectories` trajectories without deduplication and summarizes them.
pub fn run_batch(
    method: &str,
    trajectories: usize,
    tau_mlm: f64,
    tau_k: Option<f64>,
    seed: u64,
    framework_all: bool,
) -> Result<BatchView, String> {
    let w = workbench();
    let method: Method = method.parse().map_err(|e: humanize_core::sampler::SamplerError| e.to_string())?;
    if trajectories == 0 || trajectories > 5000 {
        return Err("trajectories must be between 1 and 5000".into());
    }
    let cfg = SamplingConfig {
        method,
        tau_mlm,
        guidance: tau_k
            .map(|t| vec![Expert::cached("affinity", w.matrix.clone(), t)])
            .unwrap_or_default(),
        mask_policy: if framework_all {
            MaskPolicy::FrameworkAll
        } else {
            MaskPolicy::RandomBounded { max_total: 6, max_cdr: 2 }
        },
        n_samples: trajectories,
        base_seed: seed,
        dedupe: false,
        ..Default::default()
    };
    let batch = generate_batch(&w.setup.starter, &w.setup.annotation, &w.model, &cfg).map_err(|e| e.to_string())?;
    let ll = |seq: &AntibodySequence| sequence_log_likelihood(&w.model, seq).map_err(|e| e.to_string());
    let mut all = Vec::with_capacity(batch.candidates.len());
    for c in &batch.candidates {
        let residues = c.residues();
        all.push(BatchRow {
            loglik: ll(&c.sequence)?,
            oracle: w.oracle.evaluate(&residues).map_err(|e| e.to_string())?,
            mutations: c.mutation_string(),
            sequence: residues_to_string(&residues),
        });
    }
    let all_oracle: Vec<f64> = all.iter().map(|r| r.oracle).collect();
    let all_ll: Vec<f64> = all.iter().map(|r| r.loglik).collect();
    let mut seen = HashSet::new();
    let mut rows: Vec<BatchRow> = all.into_iter().filter(|r| seen.insert(r.sequence.clone())).collect();
    let unique = rows.len();
    rows.sort_by(|a, b| b.oracle.total_cmp(&a.oracle).then_with(|| a.sequence.cmp(&b.sequence)));
    rows.truncate(10);
    Ok(BatchView {
        method: method.name().to_string(),
        guided: tau_k.is_some(),
        trajectories,
        unique,
        mean_oracle: mean(&all_oracle),
        mean_loglik: mean(&all_ll),
        starter_oracle: w
            .oracle
            .evaluate(&w.setup.starter.unmasked().unwrap())
            .map_err(|e| e.to_string())?,
        starter_loglik: ll(&w.setup.starter)?,
        top: rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LiabilityView {
    pub passed: bool,
    pub failures: String,
    pub flagged: Vec<(String, Vec<usize>)>,
}

/// Liability filters on a user sequence; without an annotation, every
/// cysteine counts as non-canonical unless `canonical` lists it (1-based).
pub fn check_liabilities(sequence: &str, canonical: &[usize]) -> Result<LiabilityView, String> {
    use humanize_core::seqcore::{ChainType, RegionAnnotation};
    let seq = AntibodySequence::parse("query", sequence.trim()).map_err(|e| e.to_string())?;
    let residues = seq.unmasked().map_err(|e| e.to_string())?;
    let cys: Vec<usize> = canonical.iter().filter(|&&p| p >= 1).map(|p| p - 1).collect();
    let (annotation, _) =
        RegionAnnotation::new(residues.len(), Vec::new(), cys, ChainType::Heavy).map_err(|e| e.to_string())?;
    let report = filter_liabilities(&residues, &annotation);
    Ok(LiabilityView {
        passed: report.passed(),
        failures: report.failures(),
        flagged: report.results.iter().map(|r| (r.name.clone(), r.positions.clone())).collect(),
    })
}
