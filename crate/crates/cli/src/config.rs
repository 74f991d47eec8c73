//! Campaign configuration: JSON file, environment and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use humanize_core::sampler::{defaults, Method};
use humanize_core::selection::{FilterConfig, SelectionMode};
use humanize_core::seqcore::MaskPolicy;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "HUMANIZER_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    /// Context-profile model, either a saved model file or trained from a corpus.
    Profile {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
    },
    /// Child process speaking the NDJSON scorer protocol.
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
    /// Fixed L×20 logits TSV.
    LogitsFile { path: PathBuf },
}

fn default_timeout() -> f64 {
    humanize_core::scorers::DEFAULT_TIMEOUT.as_secs_f64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    Cached,
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSource {
    /// Precomputed point-mutation score matrix (TSV).
    Matrix { path: PathBuf },
    /// Per-position additive weights (TSV, same layout as a score matrix).
    Additive {
        path: PathBuf,
        #[serde(default)]
        mode: GuidanceMode,
    },
    /// Ensemble of additive weight tables, reduced by minimum (or mean).
    Ensemble {
        paths: Vec<PathBuf>,
        #[serde(default)]
        mean: bool,
        #[serde(default)]
        mode: GuidanceMode,
    },
    /// Structure score from starter and per-mutation coordinate files.
    Structure { starter_coords: PathBuf, mutation_dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: OracleSource,
    #[serde(default = "default_oracle_temperature")]
    pub temperature: f64,
    /// Score candidates with this oracle without using it to guide sampling.
    #[serde(default)]
    pub score_only: bool,
}

fn default_oracle_temperature() -> f64 {
    defaults::TAU_GUIDED_ORACLE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub starter: Option<PathBuf>,
    pub annotation: Option<PathBuf>,
    pub scorer: Option<ScorerSpec>,
    pub oracles: Vec<OracleSpec>,
    pub method: Method,
    pub tau_mlm: f64,
    /// Ignore the sequence model while sampling (oracle-only guidance).
    pub oracle_only: bool,
    pub mask_policy: MaskPolicy,
    pub n_samples: usize,
    pub base_seed: u64,
    pub dedupe: bool,
    pub p_mask: f64,
    pub max_argmax_rounds: usize,
    pub max_trajectories: Option<usize>,
    pub workers: usize,
    pub filters: FilterConfig,
    pub selection: Option<SelectionMode>,
    /// Keep only candidates with strictly higher humanness than the starter.
    pub require_improved_humanness: bool,
    /// Additionally require a strictly higher score on every guiding oracle.
    pub improved_both: bool,
    pub ninemer_db: Option<PathBuf>,
    pub percentile_reference: Option<PathBuf>,
    pub rounds: usize,
    pub output_dir: PathBuf,
    pub write_trajectories: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            starter: None,
            annotation: None,
            scorer: None,
            oracles: Vec::new(),
            method: Method::Unmasked,
            tau_mlm: defaults::TAU_UNGUIDED,
            oracle_only: false,
            mask_policy: MaskPolicy::default(),
            n_samples: 500,
            base_seed: 0,
            dedupe: true,
            p_mask: defaults::P_MASK,
            max_argmax_rounds: defaults::MAX_ARGMAX_ROUNDS,
            max_trajectories: None,
            workers: 1,
            filters: FilterConfig::default(),
            selection: None,
            require_improved_humanness: false,
            improved_both: false,
            ninemer_db: None,
            percentile_reference: None,
            rounds: 1,
            output_dir: PathBuf::from("humanizer_out"),
            write_trajectories: false,
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl CampaignConfig {
    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        for p in [
            &mut self.starter,
            &mut self.annotation,
            &mut self.ninemer_db,
            &mut self.percentile_reference,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut self.output_dir);
        match &mut self.scorer {
            Some(ScorerSpec::Profile { model, corpus, .. }) => {
                for p in [model, corpus].into_iter().flatten() {
                    rebase(base, p);
                }
            }
            Some(ScorerSpec::LogitsFile { path }) => rebase(base, path),
            _ => {}
        }
        for o in &mut self.oracles {
            match &mut o.source {
                OracleSource::Matrix { path } | OracleSource::Additive { path, .. } => rebase(base, path),
                OracleSource::Ensemble { paths, .. } => paths.iter_mut().for_each(|p| rebase(base, p)),
                OracleSource::Structure {
                    starter_coords,
                    mutation_dir,
                } => {
                    rebase(base, starter_coords);
                    rebase(base, mutation_dir);
                }
            }
        }
    }

    /// Applies `HUMANIZER_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.base_seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}='{v}' is not an unsigned 64-bit integer"))?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without reading inputs, and
    /// that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => bail!("no {what} given"),
                Some(p) if !p.exists() => bail!("{what} {} does not exist", p.display()),
                _ => Ok(()),
            }
        };
        need(&self.starter, "starter")?;
        need(&self.annotation, "annotation")?;
        let exists = |p: &Path| -> Result<()> {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
            Ok(())
        };
        match &self.scorer {
            None => bail!("no scorer configured"),
            Some(ScorerSpec::Profile { model, corpus, .. }) => match (model, corpus) {
                (Some(m), _) => exists(m)?,
                (None, Some(c)) => exists(c)?,
                (None, None) => bail!("profile scorer needs a model file or a corpus"),
            },
            Some(ScorerSpec::LogitsFile { path }) => exists(path)?,
            Some(ScorerSpec::External { command, timeout_secs }) => {
                if command.trim().is_empty() {
                    bail!("external scorer command is empty");
                }
                if !(*timeout_secs > 0.0) {
                    bail!("external scorer timeout must be positive");
                }
            }
        }
        let mut names = std::collections::HashSet::new();
        for o in &self.oracles {
            if !names.insert(o.name.as_str()) {
                bail!("duplicate oracle name '{}'", o.name);
            }
            if RESERVED_COLUMNS.contains(&o.name.as_str()) {
                bail!("oracle name '{}' collides with a candidates.csv column", o.name);
            }
            match &o.source {
                OracleSource::Matrix { path } | OracleSource::Additive { path, .. } => exists(path)?,
                OracleSource::Ensemble { paths, .. } => {
                    if paths.is_empty() {
                        bail!("ensemble oracle '{}' has no members", o.name);
                    }
                    paths.iter().try_for_each(|p| exists(p))?
                }
                OracleSource::Structure {
                    starter_coords,
                    mutation_dir,
                } => {
                    exists(starter_coords)?;
                    exists(mutation_dir)?;
                }
            }
        }
        if self.oracle_only && !self.oracles.iter().any(|o| !o.score_only) {
            bail!("oracle_only sampling needs at least one guiding oracle");
        }
        for p in [&self.ninemer_db, &self.percentile_reference].into_iter().flatten() {
            exists(p)?;
        }
        if self.percentile_reference.is_some() && self.ninemer_db.is_none() {
            bail!("percentile_reference needs ninemer_db");
        }
        if self.rounds == 0 {
            bail!("rounds must be at least 1");
        }
        if self.rounds > 1 && self.selection.is_none() {
            bail!("multi-round campaigns need a selection mode to pick the next starter");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }
}

pub const RESERVED_COLUMNS: [&str; 11] = [
    "id",
    "sequence",
    "num_mutations",
    "mutations",
    "mlm_loglik",
    "ninemer_score",
    "ninemer_percentile",
    "passed_filters",
    "filter_failures",
    "rank",
    "round",
];

/// Parses `framework_all` or `random_bounded:<max_total>,<max_cdr>`.
pub fn parse_mask_policy(s: &str) -> Result<MaskPolicy> {
    if s == "framework_all" {
        return Ok(MaskPolicy::FrameworkAll);
    }
    if let Some(rest) = s.strip_prefix("random_bounded:") {
        if let Some((t, c)) = rest.split_once(',') {
            return Ok(MaskPolicy::RandomBounded {
                max_total: t.trim().parse()?,
                max_cdr: c.trim().parse()?,
            });
        }
    }
    bail!("mask policy must be 'framework_all' or 'random_bounded:<max_total>,<max_cdr>', got '{s}'")
}

/// Parses `ranked:<k>:<oracle>`, `unranked:<k>` or `none`.
pub fn parse_selection(s: &str) -> Result<Option<SelectionMode>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["none"] => Ok(None),
        ["ranked", k, oracle] => Ok(Some(SelectionMode::Ranked {
            k: k.parse()?,
            oracle: oracle.to_string(),
        })),
        ["unranked", k] => Ok(Some(SelectionMode::Unranked { k: k.parse()? })),
        _ => bail!("selection must be 'ranked:<k>:<oracle>', 'unranked:<k>' or 'none', got '{s}'"),
    }
}
