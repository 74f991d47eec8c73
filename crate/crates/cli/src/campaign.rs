//! Batch humanization campaigns: load inputs, generate, score, filter, select,
//! write one table per round.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use humanize_core::metrics::{ninemer_score_residues, NinemerDatabase, PercentileReference};
use humanize_core::sampler::{generate_batch, trajectory_seed, Expert, SamplingConfig, Trajectory};
use humanize_core::scorers::{
    cache_oracle, parse_matrix_tsv, read_coordinates, sequence_log_likelihood, structure_oracle_matrix,
    AttributeOracle, ConditionalSequenceModel, ContextProfileModel, EnsembleOracle, EnsembleReduction,
    ExternalScorer, FixedLogitsModel, OracleScoreMatrix, ProfileParams, Row, ScorerError,
};
use humanize_core::selection::{count_unique_improved, select, LiabilityFilters, SelectionMode, UniqueCount};
use humanize_core::seqcore::{parse_annotation, parse_fasta, AminoAcid, AntibodySequence, Candidate, RegionAnnotation};
use humanize_core::stats::{mean, quantile};
use humanize_core::testkit::AdditiveOracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{CampaignConfig, GuidanceMode, OracleSource, OracleSpec, ScorerSpec};

pub const MLM_LOGLIK: &str = "mlm_loglik";
pub const NINEMER_SCORE: &str = "ninemer_score";
pub const NINEMER_PERCENTILE: &str = "ninemer_percentile";

/// Oracle value of a sequence estimated to first order from a point-mutation
/// matrix computed against `anchor`.
pub struct FirstOrder {
    pub matrix: OracleScoreMatrix,
    pub anchor: Vec<AminoAcid>,
}

impl AttributeOracle for FirstOrder {
    fn evaluate(&self, seq: &[AminoAcid]) -> Result<f64, ScorerError> {
        self.matrix.estimate(seq, &self.anchor)
    }
}

enum OracleKind {
    Table(Arc<FirstOrder>),
    Function { oracle: Arc<dyn AttributeOracle>, mode: GuidanceMode },
}

pub struct LoadedOracle {
    pub spec: OracleSpec,
    kind: OracleKind,
}

impl LoadedOracle {
    pub fn scorer(&self) -> Arc<dyn AttributeOracle> {
        match &self.kind {
            OracleKind::Table(t) => t.clone(),
            OracleKind::Function { oracle, .. } => oracle.clone(),
        }
    }

    /// Guidance expert for sampling around `starter`.
    pub fn expert(&self, starter: &AntibodySequence) -> Result<Expert> {
        let name = self.spec.name.clone();
        let tau = self.spec.temperature;
        let residues = starter.unmasked()?;
        Ok(match &self.kind {
            OracleKind::Table(t) if t.anchor == residues => Expert::cached(name, t.matrix.clone(), tau),
            OracleKind::Table(t) => Expert::cached(name, cache_oracle(t.as_ref(), starter)?, tau),
            OracleKind::Function {
                oracle,
                mode: GuidanceMode::Fresh,
            } => Expert::fresh(name, oracle.clone(), tau),
            OracleKind::Function { oracle, .. } => Expert::cached(name, cache_oracle(oracle.as_ref(), starter)?, tau),
        })
    }
}

pub struct Inputs {
    pub starter: AntibodySequence,
    pub annotation: RegionAnnotation,
    pub model: Box<dyn ConditionalSequenceModel>,
    pub oracles: Vec<LoadedOracle>,
    pub ninemer: Option<NinemerDatabase>,
    pub reference: Option<PercentileReference>,
    pub filters: LiabilityFilters,
}

fn read_weights(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_matrix_tsv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_oracle(spec: &OracleSpec, starter: &AntibodySequence) -> Result<LoadedOracle> {
    let residues = starter.unmasked()?;
    let len = residues.len();
    let check_len = |n: usize, what: &Path| -> Result<()> {
        if n != len {
            bail!("{} has {n} rows, starter has length {len}", what.display());
        }
        Ok(())
    };
    let kind = match &spec.source {
        OracleSource::Matrix { path } => {
            let rows = read_weights(path)?;
            check_len(rows.len(), path)?;
            let matrix = OracleScoreMatrix::new(rows, None)?;
            OracleKind::Table(Arc::new(FirstOrder {
                matrix,
                anchor: residues,
            }))
        }
        OracleSource::Structure {
            starter_coords,
            mutation_dir,
        } => {
            let coords = read_coordinates(starter_coords)?;
            let matrix = structure_oracle_matrix(starter, &coords, mutation_dir)?;
            OracleKind::Table(Arc::new(FirstOrder {
                matrix,
                anchor: residues,
            }))
        }
        OracleSource::Additive { path, mode } => {
            let rows = read_weights(path)?;
            check_len(rows.len(), path)?;
            OracleKind::Function {
                oracle: Arc::new(AdditiveOracle::new(rows)),
                mode: *mode,
            }
        }
        OracleSource::Ensemble { paths, mean, mode } => {
            let mut members: Vec<Arc<dyn AttributeOracle>> = Vec::new();
            for p in paths {
                let rows = read_weights(p)?;
                check_len(rows.len(), p)?;
                members.push(Arc::new(AdditiveOracle::new(rows)));
            }
            let reduction = if *mean {
                EnsembleReduction::Mean
            } else {
                EnsembleReduction::Min
            };
            OracleKind::Function {
                oracle: Arc::new(EnsembleOracle::with_reduction(members, reduction)?),
                mode: *mode,
            }
        }
    };
    Ok(LoadedOracle {
        spec: spec.clone(),
        kind,
    })
}

pub fn load_model(spec: &ScorerSpec, workers: usize) -> Result<Box<dyn ConditionalSequenceModel>> {
    Ok(match spec {
        ScorerSpec::Profile {
            model: Some(path), ..
        } => Box::new(ContextProfileModel::load(path)?),
        ScorerSpec::Profile {
            corpus: Some(corpus),
            alpha,
            lambda,
            ..
        } => {
            let records = parse_fasta(corpus)?;
            let d = ProfileParams::default();
            let params = ProfileParams {
                alpha: alpha.unwrap_or(d.alpha),
                lambda: lambda.unwrap_or(d.lambda),
                ..d
            };
            Box::new(ContextProfileModel::train(&records, params)?)
        }
        ScorerSpec::Profile { .. } => bail!("profile scorer needs a model file or a corpus"),
        ScorerSpec::External { command, timeout_secs } => Box::new(ExternalScorer::spawn_pool(
            command,
            Duration::from_secs_f64(*timeout_secs),
            workers,
        )?),
        ScorerSpec::LogitsFile { path } => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(FixedLogitsModel::from_tsv(&text)?)
        }
    })
}

pub fn load_inputs(cfg: &CampaignConfig) -> Result<Inputs> {
    let starter_path = cfg.starter.as_ref().ok_or_else(|| anyhow!("no starter given"))?;
    let starter = parse_fasta(starter_path)?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("{} holds no sequences", starter_path.display()))?;
    if starter.has_mask() {
        bail!("starter '{}' contains mask characters", starter.id);
    }
    let ann_path = cfg.annotation.as_ref().ok_or_else(|| anyhow!("no annotation given"))?;
    let (annotation, _) = parse_annotation(ann_path, starter.len())?;
    let scorer = cfg.scorer.as_ref().ok_or_else(|| anyhow!("no scorer configured"))?;
    let model = load_model(scorer, cfg.workers).context("loading scorer")?;
    let oracles = cfg
        .oracles
        .iter()
        .map(|o| load_oracle(o, &starter).with_context(|| format!("loading oracle '{}'", o.name)))
        .collect::<Result<Vec<_>>>()?;
    let ninemer = cfg.ninemer_db.as_ref().map(NinemerDatabase::load).transpose()?;
    let reference = cfg
        .percentile_reference
        .as_ref()
        .map(PercentileReference::load)
        .transpose()?;
    let filters = LiabilityFilters::new(&cfg.filters)?;
    Ok(Inputs {
        starter,
        annotation,
        model,
        oracles,
        ninemer,
        reference,
        filters,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

impl Quantiles {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Self {
            min: quantile(xs, 0.0),
            q25: quantile(xs, 0.25),
            median: quantile(xs, 0.5),
            q75: quantile(xs, 0.75),
            max: quantile(xs, 1.0),
            mean: mean(xs),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub starter_id: String,
    pub starter_sequence: String,
    pub method: String,
    pub base_seed: u64,
    pub n_requested: usize,
    pub rows: usize,
    pub trajectories_run: usize,
    pub shortfall: usize,
    pub improved_metric: String,
    #[serde(flatten)]
    pub counts: UniqueCount,
    pub passed_filters: usize,
    pub selected: usize,
    pub starter_scores: BTreeMap<String, f64>,
    pub quantiles: BTreeMap<String, Quantiles>,
}

pub struct RoundResult {
    pub candidates: Vec<Candidate>,
    pub failures: Vec<String>,
    pub trajectories: Vec<Trajectory>,
    pub summary: RoundSummary,
}

fn round_seed(base: u64, round: usize) -> u64 {
    base.wrapping_add(round as u64 - 1)
}

impl Inputs {
    /// Humanness and oracle scores of a full sequence.
    pub fn score(&self, seq: &AntibodySequence) -> Result<BTreeMap<String, f64>> {
        let residues = seq.unmasked()?;
        let mut out = BTreeMap::new();
        out.insert(MLM_LOGLIK.to_string(), sequence_log_likelihood(self.model.as_ref(), seq)?);
        if let Some(db) = &self.ninemer {
            let s = ninemer_score_residues(&residues, db)?;
            out.insert(NINEMER_SCORE.to_string(), s);
            if let Some(r) = &self.reference {
                out.insert(NINEMER_PERCENTILE.to_string(), r.percentile(s));
            }
        }
        for o in &self.oracles {
            out.insert(o.spec.name.clone(), o.scorer().evaluate(&residues)?);
        }
        Ok(out)
    }

    fn guiding(&self) -> impl Iterator<Item = &LoadedOracle> {
        self.oracles.iter().filter(|o| !o.spec.score_only)
    }

    pub fn run_round(&self, cfg: &CampaignConfig, round: usize, starter: &AntibodySequence) -> Result<RoundResult> {
        let stage = |s: &str| format!("round {round}: {s}");
        let guidance = self
            .guiding()
            .map(|o| o.expert(starter))
            .collect::<Result<Vec<_>>>()
            .with_context(|| stage("caching oracles"))?;
        let n = cfg.n_samples;
        let cap = cfg.max_trajectories.unwrap_or(n.saturating_mul(humanize_core::sampler::defaults::RETRY_FACTOR));
        let base_seed = round_seed(cfg.base_seed, round);
        let mut sampling = SamplingConfig {
            method: cfg.method,
            tau_mlm: cfg.tau_mlm,
            use_model: !cfg.oracle_only,
            guidance,
            mask_policy: cfg.mask_policy,
            n_samples: n,
            base_seed,
            dedupe: cfg.dedupe,
            p_mask: cfg.p_mask,
            max_argmax_rounds: cfg.max_argmax_rounds,
            max_trajectories: Some(cap),
            workers: cfg.workers,
            record_trajectories: cfg.write_trajectories,
        };
        let starter_scores = self.score(starter).with_context(|| stage("scoring starter"))?;
        let require = cfg.require_improved_humanness || cfg.improved_both;
        let guiding: Vec<String> = self.guiding().map(|o| o.spec.name.clone()).collect();
        let qualifies = |c: &Candidate| {
            c.scores[MLM_LOGLIK] > starter_scores[MLM_LOGLIK]
                && (!cfg.improved_both || guiding.iter().all(|g| c.scores[g] > starter_scores[g]))
        };

        // with an improvement requirement, widen the batch until n candidates
        // qualify or the trajectory budget is spent
        let (mut kept, trajectories, trajectories_run) = loop {
            let batch = generate_batch(starter, &self.annotation, self.model.as_ref(), &sampling)
                .with_context(|| stage("generation"))?;
            let mut scored = Vec::with_capacity(batch.candidates.len());
            for mut c in batch.candidates {
                c.scores = self.score(&c.sequence).with_context(|| stage("scoring"))?;
                scored.push(c);
            }
            let mut trajs = batch.trajectories;
            if !require {
                break (scored, trajs, batch.trajectories_run);
            }
            let mask: Vec<bool> = scored.iter().map(&qualifies).collect();
            let exhausted = batch.shortfall > 0 || batch.trajectories_run >= cap || sampling.n_samples >= cap;
            if mask.iter().filter(|&&m| m).count() >= n || exhausted {
                let mut it = mask.iter();
                scored.retain(|_| *it.next().unwrap());
                if !trajs.is_empty() {
                    let mut it = mask.iter();
                    trajs.retain(|_| *it.next().unwrap());
                }
                scored.truncate(n);
                trajs.truncate(n);
                break (scored, trajs, batch.trajectories_run);
            }
            sampling.n_samples = (sampling.n_samples * 2).min(cap);
        };
        let shortfall = n.saturating_sub(kept.len());
        if shortfall > 0 {
            log::warn!("round {round}: {} of {n} requested candidates produced", kept.len());
        }

        let mut failures = Vec::with_capacity(kept.len());
        for c in &mut kept {
            let report = self.filters.check(&c.residues(), &self.annotation);
            c.passed_filters = report.passed();
            failures.push(report.failures());
        }

        let mut selected = 0;
        if let Some(mode) = &cfg.selection {
            let available = kept.iter().filter(|c| c.passed_filters).count();
            let mode = clamp_selection(mode, available, round);
            let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(base_seed, u64::MAX));
            let chosen = select(&kept, &mode, &mut rng).with_context(|| stage("selection"))?;
            selected = chosen.len();
            let ranks: BTreeMap<&str, usize> = chosen
                .iter()
                .enumerate()
                .map(|(i, c)| (c.sequence.id.as_str(), c.rank.unwrap_or(i + 1)))
                .collect();
            for c in &mut kept {
                c.rank = ranks.get(c.sequence.id.as_str()).copied();
            }
        }

        let counts = count_unique_improved(&kept, starter_scores[MLM_LOGLIK], MLM_LOGLIK)?;
        let mut quantiles = BTreeMap::new();
        for key in starter_scores.keys() {
            let xs: Vec<f64> = kept.iter().map(|c| c.scores[key]).collect();
            if let Some(q) = Quantiles::of(&xs) {
                quantiles.insert(key.clone(), q);
            }
        }
        let xs: Vec<f64> = kept.iter().map(|c| c.mutations.len() as f64).collect();
        if let Some(q) = Quantiles::of(&xs) {
            quantiles.insert("num_mutations".into(), q);
        }
        let summary = RoundSummary {
            round,
            starter_id: starter.id.clone(),
            starter_sequence: starter.to_text(),
            method: cfg.method.name().to_string(),
            base_seed,
            n_requested: n,
            rows: kept.len(),
            trajectories_run,
            shortfall,
            improved_metric: MLM_LOGLIK.to_string(),
            counts,
            passed_filters: kept.iter().filter(|c| c.passed_filters).count(),
            selected,
            starter_scores,
            quantiles,
        };
        Ok(RoundResult {
            candidates: kept,
            failures,
            trajectories,
            summary,
        })
    }
}

fn clamp_selection(mode: &SelectionMode, available: usize, round: usize) -> SelectionMode {
    let (k, mut out) = match mode {
        SelectionMode::Ranked { k, .. } | SelectionMode::Unranked { k } => (*k, mode.clone()),
    };
    if k > available {
        log::warn!("round {round}: selecting {available} instead of {k}, too few candidates pass the filters");
        match &mut out {
            SelectionMode::Ranked { k, .. } | SelectionMode::Unranked { k } => *k = available,
        }
    }
    out
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// candidates.csv column names, in order.
pub fn csv_header(inputs: &Inputs) -> Vec<String> {
    let mut h: Vec<String> = ["id", "sequence", "num_mutations", "mutations", MLM_LOGLIK, NINEMER_SCORE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if inputs.reference.is_some() {
        h.push(NINEMER_PERCENTILE.into());
    }
    h.extend(inputs.oracles.iter().map(|o| o.spec.name.clone()));
    h.extend(["passed_filters", "filter_failures", "rank"].map(String::from));
    h
}

pub fn write_candidates_csv(path: &Path, inputs: &Inputs, result: &RoundResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(csv_header(inputs))?;
    for (c, failures) in result.candidates.iter().zip(&result.failures) {
        let opt = |k: &str| c.scores.get(k).map(|v| fmt_f64(*v)).unwrap_or_default();
        let mut rec = vec![
            c.sequence.id.clone(),
            c.sequence.to_text(),
            c.mutations.len().to_string(),
            c.mutation_string(),
            fmt_f64(c.scores[MLM_LOGLIK]),
            opt(NINEMER_SCORE),
        ];
        if inputs.reference.is_some() {
            rec.push(opt(NINEMER_PERCENTILE));
        }
        rec.extend(inputs.oracles.iter().map(|o| fmt_f64(c.scores[&o.spec.name])));
        rec.push(c.passed_filters.to_string());
        rec.push(failures.clone());
        rec.push(c.rank.map(|r| r.to_string()).unwrap_or_default());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_round(dir: &Path, inputs: &Inputs, result: &RoundResult, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("candidates.csv");
    write_candidates_csv(&csv_path, inputs, result)?;
    written.push(csv_path);
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&result.summary)? + "\n")?;
    written.push(summary_path);
    if !result.trajectories.is_empty() {
        let path = dir.join("trajectories.jsonl");
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        for t in &result.trajectories {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        written.push(path);
    }
    Ok(())
}

pub struct CampaignReport {
    pub rounds: Vec<RoundSummary>,
    pub output_dir: PathBuf,
}

fn write_manifest(out: &Path, written: &[PathBuf], error: Option<&anyhow::Error>) -> Result<()> {
    let mut text = String::new();
    match error {
        None => text.push_str("status: complete\n"),
        Some(e) => text.push_str(&format!("status: incomplete\nerror: {e:#}\n")),
    }
    for p in written {
        let rel = p.strip_prefix(out).unwrap_or(p);
        text.push_str(&format!("file: {}\n", rel.display()));
    }
    fs::write(out.join("MANIFEST"), text)?;
    Ok(())
}

/// Runs all rounds and writes outputs under `cfg.output_dir`. A single round
/// writes directly into the output directory; several rounds write `round_<k>/`.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = out.join("config.resolved.json");
    fs::write(&resolved, serde_json::to_string_pretty(cfg)? + "\n")?;
    let mut written = vec![resolved];
    let mut summaries = Vec::new();
    let outcome = (|| -> Result<()> {
        let inputs = load_inputs(cfg).context("loading inputs")?;
        let mut starter = inputs.starter.clone();
        for round in 1..=cfg.rounds {
            let result = inputs.run_round(cfg, round, &starter)?;
            let dir = if cfg.rounds == 1 {
                out.clone()
            } else {
                out.join(format!("round_{round}"))
            };
            write_round(&dir, &inputs, &result, &mut written).with_context(|| format!("round {round}: writing"))?;
            log::info!(
                "round {round}: {} candidates, {} improved, {} pass filters",
                result.summary.rows,
                result.summary.counts.improved,
                result.summary.passed_filters
            );
            summaries.push(result.summary.clone());
            if round < cfg.rounds {
                let top = result
                    .candidates
                    .iter()
                    .find(|c| c.rank == Some(1))
                    .ok_or_else(|| anyhow!("round {round}: no selected candidate to seed the next round"))?;
                starter = top.sequence.clone();
            }
        }
        Ok(())
    })();
    write_manifest(&out, &written, outcome.as_ref().err())?;
    outcome?;
    Ok(CampaignReport {
        rounds: summaries,
        output_dir: out,
    })
}
