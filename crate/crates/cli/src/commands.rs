use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use humanize_core::metrics::{build_ninemer_db, group_subjects, DEFAULT_PREVALENCE_THRESHOLD};
use humanize_core::sampler::Method;
use humanize_core::scorers::{cache_oracle, parse_matrix_tsv, ContextProfileModel, ProfileParams};
use humanize_core::seqcore::parse_fasta;
use humanize_core::testkit::AdditiveOracle;

use crate::campaign::run_campaign;
use crate::config::{parse_mask_policy, parse_selection, CampaignConfig, ScorerSpec};
use crate::selfcheck::{run_selfcheck, SelfCheckOptions};

#[derive(Debug, Parser)]
#[command(name = "humanizer", version, about = "Antibody humanization by guided sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a context-profile scorer on an aligned FASTA corpus.
    TrainScorer(TrainArgs),
    /// Build a 9-mer prevalence database from a FASTA corpus.
    BuildNinemerDb(NinemerArgs),
    /// Run a humanization campaign.
    Humanize(Box<HumanizeArgs>),
    /// Run built-in correctness checks on synthetic fixtures.
    Selfcheck(SelfcheckArgs),
    /// Serve a trained scorer over stdin/stdout (NDJSON).
    ServeScorer {
        #[arg(long)]
        model: PathBuf,
    },
    /// Precompute a point-mutation score matrix from additive weights.
    CacheOracle {
        #[arg(long)]
        starter: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic campaign (corpus, starter, annotation, oracle, config).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        corpus_size: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub observed_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct NinemerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PREVALENCE_THRESHOLD)]
    pub threshold: f64,
    /// Group records into subjects by the id prefix before this character.
    #[arg(long)]
    pub subject_delimiter: Option<char>,
}

#[derive(Debug, Args, Default)]
pub struct HumanizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub starter: Option<PathBuf>,
    #[arg(long)]
    pub annotation: Option<PathBuf>,
    /// Profile model file.
    #[arg(long, conflicts_with_all = ["corpus", "external", "logits"])]
    pub model: Option<PathBuf>,
    /// Train a profile model from this corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// External scorer command.
    #[arg(long)]
    pub external: Option<String>,
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub tau_mlm: Option<f64>,
    #[arg(long)]
    pub oracle_only: bool,
    /// `framework_all` or `random_bounded:<max_total>,<max_cdr>`.
    #[arg(long)]
    pub mask_policy: Option<String>,
    #[arg(long, short = 'n')]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_dedupe: bool,
    #[arg(long)]
    pub p_mask: Option<f64>,
    #[arg(long)]
    pub max_argmax_rounds: Option<usize>,
    #[arg(long)]
    pub max_trajectories: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// `ranked:<k>:<score>`, `unranked:<k>` or `none`.
    #[arg(long)]
    pub selection: Option<String>,
    #[arg(long)]
    pub require_improved_humanness: bool,
    #[arg(long)]
    pub improved_both: bool,
    #[arg(long)]
    pub ninemer_db: Option<PathBuf>,
    #[arg(long)]
    pub percentile_reference: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, short = 'o')]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: bool,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long)]
    pub json: bool,
    /// Also load and exercise this profile model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = SelfCheckOptions::default().samples)]
    pub samples: usize,
}

impl HumanizeArgs {
    /// Config file, then `HUMANIZER_SEED`, then flags.
    pub fn resolve(&self) -> Result<CampaignConfig> {
        let mut cfg = match &self.config {
            Some(p) => CampaignConfig::load(p)?,
            None => CampaignConfig::default(),
        };
        cfg.apply_env()?;
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            };
        }
        set!(starter);
        set!(annotation);
        set!(method);
        set!(tau_mlm);
        set!(n_samples);
        set!(p_mask);
        set!(max_argmax_rounds);
        set!(workers);
        set!(ninemer_db);
        set!(percentile_reference);
        set!(rounds);
        set!(output_dir);
        if let Some(v) = self.max_trajectories {
            cfg.max_trajectories = Some(v);
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(p) = &self.model {
            cfg.scorer = Some(ScorerSpec::Profile {
                model: Some(p.clone()),
                corpus: None,
                alpha: None,
                lambda: None,
            });
        } else if let Some(c) = &self.corpus {
            cfg.scorer = Some(ScorerSpec::Profile {
                model: None,
                corpus: Some(c.clone()),
                alpha: None,
                lambda: None,
            });
        } else if let Some(cmd) = &self.external {
            cfg.scorer = Some(ScorerSpec::External {
                command: cmd.clone(),
                timeout_secs: humanize_core::scorers::DEFAULT_TIMEOUT.as_secs_f64(),
            });
        } else if let Some(p) = &self.logits {
            cfg.scorer = Some(ScorerSpec::LogitsFile { path: p.clone() });
        }
        if let Some(m) = &self.mask_policy {
            cfg.mask_policy = parse_mask_policy(m)?;
        }
        if let Some(s) = &self.selection {
            cfg.selection = parse_selection(s)?;
        }
        cfg.oracle_only |= self.oracle_only;
        cfg.dedupe &= !self.no_dedupe;
        cfg.require_improved_humanness |= self.require_improved_humanness;
        cfg.improved_both |= self.improved_both;
        cfg.write_trajectories |= self.trajectories;
        Ok(cfg)
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let corpus = parse_fasta(&args.corpus)?;
    let d = ProfileParams::default();
    let params = ProfileParams {
        alpha: args.alpha.unwrap_or(d.alpha),
        lambda: args.lambda.unwrap_or(d.lambda),
        observed_weight: args.observed_weight.unwrap_or(d.observed_weight),
    };
    let model = ContextProfileModel::train(&corpus, params)
        .with_context(|| format!("training on {}", args.corpus.display()))?;
    model.save(&args.out)?;
    println!("trained on {} sequences of length {}", corpus.len(), model.length());
    Ok(())
}

fn ninemers(args: &NinemerArgs) -> Result<()> {
    let records = parse_fasta(&args.corpus)?;
    let subjects = group_subjects(&records, args.subject_delimiter);
    let db = build_ninemer_db(&subjects, args.threshold)?;
    db.save(&args.out)?;
    println!("{} distinct 9-mers over {} subjects", db.len(), db.subject_count());
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::TrainScorer(a) => train(&a)?,
        Command::BuildNinemerDb(a) => ninemers(&a)?,
        Command::Humanize(a) => {
            let cfg = a.resolve()?;
            let report = run_campaign(&cfg)?;
            for r in &report.rounds {
                println!(
                    "round {}: {} candidates ({} unique, {} improved, {} pass filters, shortfall {})",
                    r.round, r.rows, r.counts.unique, r.counts.improved, r.passed_filters, r.shortfall
                );
            }
            println!("wrote {}", report.output_dir.display());
        }
        Command::Selfcheck(a) => {
            let report = run_selfcheck(&SelfCheckOptions {
                samples: a.samples,
                model: a.model,
                ..Default::default()
            });
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
            return Ok(if report.passed { 0 } else { 1 });
        }
        Command::ServeScorer { model } => {
            let model = ContextProfileModel::load(&model)?;
            crate::serve::serve(&model, std::io::stdin().lock(), std::io::stdout().lock())?;
        }
        Command::CacheOracle { starter, weights, out } => {
            let starter = parse_fasta(&starter)?
                .into_iter()
                .next()
                .context("starter file holds no sequences")?;
            let text = std::fs::read_to_string(&weights).with_context(|| format!("reading {}", weights.display()))?;
            let rows = parse_matrix_tsv(&text)?;
            if rows.len() != starter.len() {
                bail!("weights have {} rows, starter has length {}", rows.len(), starter.len());
            }
            let matrix = cache_oracle(&AdditiveOracle::new(rows), &starter)?;
            std::fs::write(&out, matrix.to_tsv())?;
        }
        Command::Synth { out, seed, corpus_size } => {
            crate::synth::write_synthetic(&out, seed, corpus_size)?;
            println!("wrote synthetic campaign to {}", out.display());
        }
    }
    Ok(0)
}
