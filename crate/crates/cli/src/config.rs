//! Configuration file, TOML or (with a `.json` extension) JSON with the same
//! schema. Every section and field is optional; command-line flags override
//! whatever the file sets.
//!
//! ```toml
//! [synth]
//! d = 16
//! atoms = 8
//! n = 2000
//! s_active = 1
//! noise = 0.0
//! seed = 1
//!
//! [split]
//! train_fraction = 0.8
//! seed = 0
//! holdout = ["inst_d"]
//!
//! [sae]
//! dict_sizes = [8, 16]
//! k_values = [1, 2]
//!
//! [train]
//! lr0 = 1e-4
//! lr_min = 1e-6
//! epochs = 100
//! batch_size = 2048
//! seed = 0
//!
//! [sweep]
//! workers = 4
//! input_dim = 1536
//! dict_families = [[16, 64, 256, 1024]]
//! sparsity_patterns = [[10, 10, 10, 10]]
//! replicate_seeds = [0, 1, 2]
//! clamp_k = true
//!
//! [eval]
//! min_prevalence = 0.05
//! recovery_n = [1, 3, 10, 50]
//! null_pairs = 1000
//! seed = 0
//!
//! [retrieval]
//! k_list = [1, 5, 10, 20]
//! n_refs = 200
//! top_m = 5
//! seed = 0
//!
//! [interp]
//! n_features = 250
//! concurrency = 4
//! seed = 0
//! max_matches = 5
//! generator = { base_url = "https://host/v1", model = "gen", token_env = "GEN_TOKEN" }
//! judge = { base_url = "mock:judge" }
//! matcher = { base_url = "mock:matcher" }
//! ```

use std::fs;
use std::path::Path;

use matsae_core::interp::ClientConfig;
use matsae_core::pipeline::EvalOptions;
use matsae_core::retrieval::DEFAULT_TOP_M;
use matsae_core::trainer::{SweepSpec, TrainConfig};
use matsae_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthSection,
    pub split: SplitSection,
    pub sae: SaeSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    pub eval: EvalOptions,
    pub retrieval: RetrievalSection,
    pub interp: InterpSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub d: usize,
    pub atoms: usize,
    pub n: usize,
    pub s_active: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            d: 16,
            atoms: 8,
            n: 2000,
            s_active: 1,
            noise: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
    pub holdout: Vec<String>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            holdout: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub dict_sizes: Option<Vec<usize>>,
    pub k_values: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub workers: usize,
    pub input_dim: usize,
    pub dict_families: Option<Vec<Vec<usize>>>,
    pub sparsity_patterns: Option<Vec<Vec<usize>>>,
    pub replicate_seeds: Option<Vec<u64>>,
    pub clamp_k: Option<bool>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            workers: 4,
            input_dim: 1536,
            dict_families: None,
            sparsity_patterns: None,
            replicate_seeds: None,
            clamp_k: None,
        }
    }
}

impl SweepSection {
    /// The default grid with any file overrides applied.
    pub fn spec(&self) -> SweepSpec {
        let mut spec = SweepSpec::default();
        if let Some(v) = &self.dict_families {
            spec.dict_families = v.clone();
        }
        if let Some(v) = &self.sparsity_patterns {
            spec.sparsity_patterns = v.clone();
        }
        if let Some(v) = &self.replicate_seeds {
            spec.replicate_seeds = v.clone();
        }
        if let Some(v) = self.clamp_k {
            spec.clamp_k = v;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k_list: Vec<usize>,
    pub n_refs: usize,
    pub top_m: usize,
    pub seed: u64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k_list: vec![1, 5, 10, 20],
            n_refs: 200,
            top_m: DEFAULT_TOP_M,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpSection {
    pub n_features: usize,
    pub concurrency: usize,
    pub seed: u64,
    pub max_matches: usize,
    pub generator: ClientConfig,
    pub judge: ClientConfig,
    pub matcher: ClientConfig,
}

impl Default for InterpSection {
    fn default() -> Self {
        Self {
            n_features: 250,
            concurrency: matsae_core::interp::DEFAULT_CONCURRENCY,
            seed: 0,
            max_matches: 5,
            generator: ClientConfig::mock("concept"),
            judge: ClientConfig::mock("judge"),
            matcher: ClientConfig::mock("matcher"),
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
