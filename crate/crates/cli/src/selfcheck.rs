//! Built-in checks against exact answers on synthetic fixtures.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use humanize_core::sampler::{generate_batch, run_method, Expert, Method, SamplingConfig};
use humanize_core::scorers::{cache_oracle, AttributeOracle, ConditionalSequenceModel, ContextProfileModel, ProfileParams};
use humanize_core::selection::filter_liabilities;
use humanize_core::seqcore::{AminoAcid, AntibodySequence, MutableMask};
use humanize_core::stats::mann_whitney_greater;
use humanize_core::testkit::{
    brute_force_joint, make_planted_corpus, synthetic_setup, tv_distance, AdditiveOracle, JointDistribution,
    LiabilityKind, PlantedMotif,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub samples: usize,
    pub tv_tolerance: f64,
    pub model: Option<std::path::PathBuf>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200_000,
            tv_tolerance: 0.02,
            model: None,
        }
    }
}

fn run_check(name: &str, f: impl FnOnce() -> Result<String> + std::panic::UnwindSafe) -> CheckResult {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(f);
    let (passed, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, format!("{e:#}")),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn scorer_check(path: Option<&Path>) -> Result<String> {
    let model = match path {
        Some(p) => ContextProfileModel::load(p)?,
        None => {
            let s = synthetic_setup(3, 200);
            let m = ContextProfileModel::train(&s.corpus, ProfileParams::default())?;
            let back = ContextProfileModel::from_json(&m.to_json())?;
            ensure!(back.score(&s.starter)? == m.score(&s.starter)?, "reloaded model scores differ");
            m
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let aas: Vec<AminoAcid> = (0..model.length())
        .map(|_| AminoAcid::from_index(rng.gen_range(0..20)).unwrap())
        .collect();
    let z = model.score(&AntibodySequence::from_amino_acids("probe", &aas))?;
    ensure!(z.len() == model.length(), "model returned {} rows for length {}", z.len(), model.length());
    Ok(format!("length {}, {} training sequences", model.length(), model.n_sequences()))
}

fn tv_check(method: Method, opts: &SelfCheckOptions) -> Result<String> {
    let s = synthetic_setup(11, 200);
    let model = ContextProfileModel::train(&s.corpus, ProfileParams::default())?;
    let f = s.foreign_positions[0];
    let mask = MutableMask::new(vec![f + 1, f], s.starter.len())?;
    let cfg = SamplingConfig {
        method,
        ..Default::default()
    };
    let exact = brute_force_joint(&s.starter, &mask, &model, method, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let outs = (0..opts.samples)
        .map(|_| run_method(&s.starter, &mask, &model, &cfg, &mut rng).map(|o| o.residues))
        .collect::<Result<Vec<_>, _>>()?;
    let emp = JointDistribution::empirical(mask.indices(), outs.iter().map(|v| v.as_slice()));
    let tv = tv_distance(&emp, &exact)?;
    // mean TV of an exact sampler at this sample size, E|p̂ - p| ≈ sqrt(2p(1-p)/(πn))
    let n = opts.samples as f64;
    let noise: f64 = 0.5
        * exact
            .probs()
            .values()
            .map(|p| (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n)).sqrt())
            .sum::<f64>();
    let tol = opts.tv_tolerance.max(2.0 * noise);
    ensure!(tv < tol, "TV {tv:.4} >= {tol:.4} at {} samples", opts.samples);
    Ok(format!("TV {tv:.4} < {tol:.4} at {} samples", opts.samples))
}

fn enrichment_check() -> Result<String> {
    let s = synthetic_setup(21, 200);
    let model = ContextProfileModel::train(&s.corpus, ProfileParams::default())?;
    let oracle = AdditiveOracle::random(s.starter.len(), 1.0, 5);
    let matrix = cache_oracle(&oracle, &s.starter)?;
    let unguided = SamplingConfig {
        tau_mlm: 0.6,
        n_samples: 200,
        base_seed: 1,
        ..Default::default()
    };
    let guided = SamplingConfig {
        tau_mlm: 1.2,
        guidance: vec![Expert::cached("f", matrix, 0.4)],
        ..unguided.clone()
    };
    let scores = |cfg: &SamplingConfig| -> Result<Vec<f64>> {
        let batch = generate_batch(&s.starter, &s.annotation, &model, cfg)?;
        Ok(batch
            .candidates
            .iter()
            .map(|c| oracle.evaluate(&c.residues()))
            .collect::<Result<_, _>>()?)
    };
    let mw = mann_whitney_greater(&scores(&guided)?, &scores(&unguided)?);
    ensure!(mw.p_greater < 0.001, "one-sided p = {:.3e}", mw.p_greater);
    Ok(format!("one-sided p = {:.3e}", mw.p_greater))
}

fn filter_check() -> Result<String> {
    let corpus = make_planted_corpus(8, 200, 64, 0.15);
    let mut found = std::collections::BTreeSet::new();
    for (i, seq) in corpus.sequences.iter().enumerate() {
        for r in filter_liabilities(&seq.unmasked()?, &corpus.annotation).results {
            let kind = match r.name.as_str() {
                "ddd" => LiabilityKind::Ddd,
                "n_glycosylation" => LiabilityKind::Glycosylation,
                "non_canonical_cys" => LiabilityKind::NonCanonicalCysteine,
                other => bail!("unexpected filter {other}"),
            };
            for p in r.positions {
                found.insert(PlantedMotif {
                    sequence: i,
                    kind,
                    position: p - 1,
                });
            }
        }
    }
    let planted: std::collections::BTreeSet<_> = corpus.planted.iter().copied().collect();
    let tp = found.intersection(&planted).count();
    ensure!(
        tp == planted.len() && tp == found.len(),
        "{tp} true positives, {} flagged, {} planted",
        found.len(),
        planted.len()
    );
    Ok(format!("{} planted motifs recovered exactly", planted.len()))
}

pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let model = opts.model.clone();
    let mut checks = vec![run_check("scorer", move || scorer_check(model.as_deref()))];
    for method in [Method::Unmasked, Method::Gibbs, Method::Ard] {
        let o = opts.clone();
        checks.push(run_check(&format!("tv_{}", method.name()), move || tv_check(method, &o)));
    }
    checks.push(run_check("enrichment", enrichment_check));
    checks.push(run_check("filters", filter_check));
    SelfCheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

impl SelfCheckReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<12} {:>6.2}s  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.seconds,
                c.detail
            ));
        }
        out
    }
}
