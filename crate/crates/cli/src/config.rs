use std::path::Path;

use longfactor::model::Variant;
use longfactor::{Family, FitOptions, InitOptions, ModelSpec, Strategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Everything a command needs besides its input files.
///
/// Loaded from `--config` when given, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// Response family of every item.
    pub family: Family,
    pub variant: Variant,
    /// Number of factors for `fit`, `evaluate` and refits.
    pub k: usize,
    /// Candidate numbers of factors for `select-k` and `simulate`.
    pub k_set: Vec<usize>,
    pub c1: f64,
    pub c2: f64,
    /// Expected number of covariates; checked against the covariates file.
    pub n_covariates: Option<usize>,
    pub warm_start: bool,
    pub fit: FitOptions,
    pub init: InitOptions,
    pub simulation: SimulationConfig,
    pub n_perm: usize,
    pub top_k: usize,
    pub strategies: Vec<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_items: usize,
    pub n_persons: usize,
    pub n_times: usize,
    pub k_star: usize,
    pub n_reps: usize,
    pub scaled_factors: bool,
    /// Also fit the model without factors in every replication.
    pub baseline: bool,
    /// Skip factor-number selection and fit at `k_star` only.
    pub skip_selection: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_items: 100,
            n_persons: 500,
            n_times: 4,
            k_star: 3,
            n_reps: 20,
            scaled_factors: false,
            baseline: false,
            skip_selection: false,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            family: Family::Bernoulli,
            variant: Variant::Base,
            k: 1,
            k_set: (1..=10).collect(),
            c1: 5.0,
            c2: 5.0,
            n_covariates: None,
            warm_start: false,
            fit: FitOptions::default(),
            init: InitOptions::default(),
            simulation: SimulationConfig::default(),
            n_perm: 0,
            top_k: 5,
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed and thread count into the nested options and validates.
    pub fn finish(mut self) -> Result<Self, CliError> {
        self.fit.seed = self.seed;
        self.fit.threads = self.threads;
        if self.threads == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        if self.k_set.is_empty() {
            return Err(CliError::Input(
                "the candidate set of factor numbers is empty".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(CliError::Input("--top-k must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(CliError::Input("at least one strategy is required".into()));
        }
        self.fit.validate()?;
        self.init.validate()?;
        self.spec(self.k).validate()?;
        Ok(self)
    }

    pub fn spec(&self, k: usize) -> ModelSpec {
        ModelSpec {
            c1: self.c1,
            c2: self.c2,
            ..ModelSpec::from_variant(self.variant, k)
        }
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Candidate numbers of factors given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct KSet(pub Vec<usize>);

impl std::str::FromStr for KSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_k_set(s).map(KSet)
    }
}

/// Parses `1,3,5`, `1-10`, or a mix such as `1-3,6`.
pub fn parse_k_set(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once('-') {
            let lo: usize = lo
                .trim()
                .parse()
                .map_err(|_| format!("bad range '{part}'"))?;
            let hi: usize = hi
                .trim()
                .parse()
                .map_err(|_| format!("bad range '{part}'"))?;
            if lo > hi {
                return Err(format!("empty range '{part}'"));
            }
            out.extend(lo..=hi);
        } else {
            out.push(
                part.parse()
                    .map_err(|_| format!("bad factor number '{part}'"))?,
            );
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err("no factor numbers given".into());
    }
    Ok(out)
}
