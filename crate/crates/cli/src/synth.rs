//! Writes a self-contained synthetic campaign: corpus, starter, annotation,
//! additive weights and a config that ties them together.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use humanize_core::metrics::{build_ninemer_db, group_subjects, ninemer_score, PercentileReference};
use humanize_core::scorers::write_matrix_tsv;
use humanize_core::seqcore::write_fasta_string;
use humanize_core::testkit::{synthetic_setup_with, AdditiveOracle};
use serde_json::json;

pub fn write_synthetic(dir: &Path, seed: u64, corpus_size: usize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let s = synthetic_setup_with(seed, corpus_size, 4);
    fs::write(dir.join("corpus.fasta"), write_fasta_string(&s.corpus))?;
    fs::write(dir.join("starter.fasta"), write_fasta_string(std::slice::from_ref(&s.starter)))?;
    fs::write(dir.join("annotation.json"), s.annotation.to_json_string() + "\n")?;
    let oracle = AdditiveOracle::random(s.starter.len(), 1.0, seed.wrapping_add(1));
    fs::write(dir.join("affinity.tsv"), write_matrix_tsv(oracle.weights()))?;

    let db = build_ninemer_db(&group_subjects(&s.corpus, None), 0.1)?;
    db.save(dir.join("ninemers.tsv"))?;
    let reference = s
        .corpus
        .iter()
        .map(|r| ninemer_score(r, &db))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = PercentileReference::new(reference)?;
    let text: String = reference.scores().iter().map(|v| format!("{v}\n")).collect();
    fs::write(dir.join("reference_scores.txt"), text)?;

    let config = json!({
        "starter": "starter.fasta",
        "annotation": "annotation.json",
        "scorer": {"kind": "profile", "corpus": "corpus.fasta"},
        "oracles": [{"name": "affinity", "kind": "additive", "path": "affinity.tsv", "temperature": 0.4}],
        "method": "unmasked",
        "tau_mlm": 1.2,
        "mask_policy": {"kind": "random_bounded", "max_total": 6, "max_cdr": 2},
        "n_samples": 500,
        "base_seed": seed,
        "selection": {"kind": "ranked", "k": 10, "oracle": "affinity"},
        "ninemer_db": "ninemers.tsv",
        "percentile_reference": "reference_scores.txt",
        "output_dir": "out",
    });
    fs::write(dir.join("campaign.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    Ok(())
}
