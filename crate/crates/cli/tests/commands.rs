use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use humanize_core::metrics::NinemerDatabase;
use humanize_core::scorers::{ConditionalSequenceModel, ContextProfileModel, ProfileParams};
use humanize_core::selection::count_unique_improved;
use humanize_core::seqcore::{parse_fasta, write_fasta_string, AntibodySequence, Candidate};
use humanize_core::testkit::synthetic_setup;

fn humanizer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_humanizer"))
        .args(args)
        .env_remove("HUMANIZER_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(humanizer(&["synth", "--out", p(dir), "--seed", "3"]));
}

#[test]
fn train_scorer_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let s = synthetic_setup(4, 1000);
    let corpus = dir.path().join("corpus.fasta");
    fs::write(&corpus, write_fasta_string(&s.corpus)).unwrap();
    let model = dir.path().join("model.json");
    let stdout = ok(humanizer(&["train-scorer", "--corpus", p(&corpus), "--out", p(&model)]));
    assert!(stdout.contains("1000 sequences of length 64"), "{stdout}");
    let loaded = ContextProfileModel::load(&model).unwrap();
    let direct = ContextProfileModel::train(&s.corpus, ProfileParams::default()).unwrap();
    assert_eq!(loaded.score(&s.starter).unwrap(), direct.score(&s.starter).unwrap());
}

#[test]
fn train_scorer_rejects_empty_and_ragged() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.fasta");
    fs::write(&empty, "").unwrap();
    let out = humanizer(&["train-scorer", "--corpus", p(&empty), "--out", p(&dir.path().join("m"))]);
    assert!(!out.status.success());

    let ragged = dir.path().join("ragged.fasta");
    fs::write(&ragged, ">a\nACDEF\n>b\nACDEF\n>bad\nACD\n>worse\nA\n").unwrap();
    let out = humanizer(&["train-scorer", "--corpus", p(&ragged), "--out", p(&dir.path().join("m"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("'bad'") && !err.contains("worse"), "{err}");
}

#[test]
fn ninemer_db_command() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.fasta");
    fs::write(&corpus, ">subj1_a\nACDEFGHIKLMN\n>subj1_b\nACDEFGHIKLMW\n").unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    for out in [&a, &b] {
        ok(humanizer(&[
            "build-ninemer-db",
            "--corpus",
            p(&corpus),
            "--out",
            p(out),
            "--threshold",
            "0.25",
            "--subject-delimiter",
            "_",
        ]));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert!(text.lines().next().unwrap().contains("threshold=0.25"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let db = NinemerDatabase::load(&a).unwrap();
    assert_eq!(db.subject_count(), 1);
    assert_eq!(db.len(), 5);
    assert_eq!(db.prevalence("ACDEFGHIK"), 1.0);
    assert_eq!(db.prevalence("EFGHIKLMW"), 1.0);
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn paper_shaped_run_and_summary_consistency() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    let stdout = ok(humanizer(&["humanize", "--config", p(&cfg)]));
    assert!(stdout.contains("500 candidates"), "{stdout}");
    let out = dir.path().join("out");
    let (header, rows) = read_csv(&out.join("candidates.csv"));
    assert_eq!(
        header,
        [
            "id",
            "sequence",
            "num_mutations",
            "mutations",
            "mlm_loglik",
            "ninemer_score",
            "ninemer_percentile",
            "affinity",
            "passed_filters",
            "filter_failures",
            "rank"
        ]
    );
    assert_eq!(rows.len(), 500);
    let ranked: Vec<&Vec<String>> = rows.iter().filter(|r| !r[10].is_empty()).collect();
    assert_eq!(ranked.len(), 10);
    assert!(ranked.iter().all(|r| r[8] == "true"));
    for r in &rows {
        let n: usize = r[2].parse().unwrap();
        assert!(n <= 6);
        assert_eq!(r[3].split(';').filter(|m| !m.is_empty()).count(), n);
        assert_eq!(r[8] == "true", r[9].is_empty());
    }

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let starter = parse_fasta(dir.path().join("starter.fasta")).unwrap().remove(0);
    let starter_res = starter.unmasked().unwrap();
    let candidates: Vec<Candidate> = rows
        .iter()
        .map(|r| {
            let seq = AntibodySequence::parse(&r[0], &r[1]).unwrap();
            let mut c = Candidate::new(&r[0], &starter_res, &seq.unmasked().unwrap(), 0);
            c.scores.insert("mlm_loglik".into(), r[4].parse().unwrap());
            c
        })
        .collect();
    let starter_ll = summary["starter_scores"]["mlm_loglik"].as_f64().unwrap();
    let counts = count_unique_improved(&candidates, starter_ll, "mlm_loglik").unwrap();
    assert_eq!(summary["unique"].as_u64().unwrap() as usize, counts.unique);
    assert_eq!(summary["improved"].as_u64().unwrap() as usize, counts.improved);
    assert!(fs::read_to_string(out.join("MANIFEST")).unwrap().starts_with("status: complete"));
    assert!(out.join("config.resolved.json").exists());
}

#[test]
fn sapiens_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    let out = dir.path().join("sap");
    ok(humanizer(&[
        "humanize",
        "--config",
        p(&cfg),
        "--method",
        "sapiens_argmax",
        "--mask-policy",
        "framework_all",
        "--selection",
        "none",
        "-o",
        p(&out),
    ]));
    let (_, rows) = read_csv(&out.join("candidates.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn seed_precedence_and_worker_independence() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    let run = |tag: &str, extra: &[&str], env_seed: Option<&str>| -> Vec<u8> {
        let out = dir.path().join(tag);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_humanizer"));
        cmd.args(["humanize", "--config", p(&cfg), "-n", "100", "-o", p(&out)]).args(extra);
        cmd.env_remove("HUMANIZER_SEED");
        if let Some(s) = env_seed {
            cmd.env("HUMANIZER_SEED", s);
        }
        ok(cmd.output().unwrap());
        fs::read(out.join("candidates.csv")).unwrap()
    };
    let base = run("base", &[], None);
    assert_eq!(base, run("w4", &["--workers", "4"], None));
    let env9 = run("env9", &[], Some("9"));
    assert_ne!(base, env9);
    assert_eq!(env9, run("flag9", &["--seed", "9"], None));
    assert_eq!(base, run("flag_wins", &["--seed", "3"], Some("9")));
}

#[test]
fn multi_round_layout() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    let out = dir.path().join("rounds");
    ok(humanizer(&["humanize", "--config", p(&cfg), "-n", "80", "--rounds", "2", "-o", p(&out)]));
    let r1: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("round_1/summary.json")).unwrap()).unwrap();
    let r2: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("round_2/summary.json")).unwrap()).unwrap();
    let (_, rows) = read_csv(&out.join("round_1/candidates.csv"));
    let top = rows.iter().find(|r| r[10] == "1").unwrap();
    assert_eq!(r2["starter_sequence"].as_str().unwrap(), top[1]);
    assert_eq!(r2["starter_id"].as_str().unwrap(), top[0]);
    assert_eq!(r1["round"], 1);
}

#[test]
fn failed_run_leaves_incomplete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    let out = dir.path().join("broken");
    fs::write(dir.path().join("affinity.tsv"), "not a matrix\n").unwrap();
    let res = humanizer(&["humanize", "--config", p(&cfg), "-o", p(&out)]);
    assert!(!res.status.success());
    let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
    assert!(manifest.starts_with("status: incomplete"), "{manifest}");
    assert!(manifest.contains("affinity"), "{manifest}");
}

#[test]
fn missing_inputs_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("campaign.json");
    fs::remove_file(dir.path().join("ninemers.tsv")).unwrap();
    let res = humanizer(&["humanize", "--config", p(&cfg)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("ninemers.tsv"));
}

#[test]
fn external_scorer_matches_in_process_model() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let model = dir.path().join("model.json");
    ok(humanizer(&[
        "train-scorer",
        "--corpus",
        p(&dir.path().join("corpus.fasta")),
        "--out",
        p(&model),
    ]));
    let cfg = dir.path().join("campaign.json");
    let command = format!("'{}' serve-scorer --model '{}'", env!("CARGO_BIN_EXE_humanizer"), p(&model));
    let a = dir.path().join("local");
    let b = dir.path().join("remote");
    let common = ["humanize", "--config", p(&cfg), "-n", "40", "--workers", "2"];
    ok(humanizer(&[&common[..], &["--model", p(&model), "-o", p(&a)]].concat()));
    ok(humanizer(&[&common[..], &["--external", &command, "-o", p(&b)]].concat()));
    assert_eq!(
        fs::read(a.join("candidates.csv")).unwrap(),
        fs::read(b.join("candidates.csv")).unwrap()
    );
}

#[test]
fn cached_matrix_oracle_route() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let matrix = dir.path().join("affinity_cached.tsv");
    ok(humanizer(&[
        "cache-oracle",
        "--starter",
        p(&dir.path().join("starter.fasta")),
        "--weights",
        p(&dir.path().join("affinity.tsv")),
        "--out",
        p(&matrix),
    ]));
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("campaign.json")).unwrap()).unwrap();
    let additive_out = dir.path().join("additive");
    let matrix_out = dir.path().join("matrix");
    cfg["oracles"][0]["kind"] = "matrix".into();
    cfg["oracles"][0]["path"] = "affinity_cached.tsv".into();
    cfg["output_dir"] = "matrix".into();
    cfg["n_samples"] = 60.into();
    fs::write(dir.path().join("matrix.json"), cfg.to_string()).unwrap();
    ok(humanizer(&["humanize", "--config", p(&dir.path().join("matrix.json"))]));
    ok(humanizer(&[
        "humanize",
        "--config",
        p(&dir.path().join("campaign.json")),
        "-n",
        "60",
        "-o",
        p(&additive_out),
    ]));
    // additive scores are exactly first-order, so both routes agree up to rounding
    let (_, a) = read_csv(&additive_out.join("candidates.csv"));
    let (_, m) = read_csv(&matrix_out.join("candidates.csv"));
    assert_eq!(a.len(), m.len());
    for (x, y) in a.iter().zip(&m) {
        assert_eq!(x[1], y[1]);
        let (fx, fy): (f64, f64) = (x[7].parse().unwrap(), y[7].parse().unwrap());
        assert!((fx - fy).abs() < 1e-9);
    }
}

#[test]
fn selfcheck_json_and_isolation() {
    let out = humanizer(&["selfcheck", "--json", "--samples", "20000"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(out.status.success(), "{text}");
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    fs::write(&bad, "{\"format\": \"garbage\"").unwrap();
    let out = humanizer(&["selfcheck", "--json", "--samples", "2000", "--model", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks[0]["name"], "scorer");
    assert_eq!(checks[0]["passed"], false);
    assert_eq!(checks.len(), 6);
    for c in checks.iter().filter(|c| c["name"] == "enrichment" || c["name"] == "filters") {
        assert_eq!(c["passed"], true);
    }
}
