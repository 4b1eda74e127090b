use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub dict_families: Vec<Vec<usize>>,
    pub sparsity_patterns: Vec<Vec<usize>>,
    pub replicate_seeds: Vec<u64>,
    /// Lower any `k` above its level's dictionary size to that size instead
    /// of rejecting the combination. Off unless set explicitly.
    #[serde(default)]
    pub clamp_k: bool,
}

impl Default for SweepSpec {
    /// Four dictionary families, four fixed and four progressive K patterns,
    /// three replicate seeds: 96 configurations. The smaller families cannot
    /// hold every pattern's early-level `k`, so this grid clamps.
    fn default() -> Self {
        Self {
            dict_families: vec![
                vec![16, 64, 256, 1024],
                vec![32, 128, 512, 2048],
                vec![64, 256, 1024, 4096],
                vec![128, 512, 2048, 8192],
            ],
            sparsity_patterns: vec![
                vec![10, 10, 10, 10],
                vec![20, 20, 20, 20],
                vec![40, 40, 40, 40],
                vec![80, 80, 80, 80],
                vec![5, 10, 20, 40],
                vec![10, 20, 40, 80],
                vec![20, 40, 80, 160],
                vec![30, 60, 120, 240],
            ],
            replicate_seeds: vec![0, 1, 2],
            clamp_k: true,
        }
    }
}

/// One point of the sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub id: String,
    pub config: SaeConfig,
    pub seed: u64,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

/// Cartesian product families x patterns x seeds, in that nesting order.
pub fn enumerate_sweep(spec: &SweepSpec, input_dim: usize) -> Result<Vec<SweepEntry>> {
    if spec.dict_families.is_empty() || spec.sparsity_patterns.is_empty() || spec.replicate_seeds.is_empty() {
        return Err(Error::Config("sweep lists must be nonempty".into()));
    }
    let mut out = Vec::with_capacity(
        spec.dict_families.len() * spec.sparsity_patterns.len() * spec.replicate_seeds.len(),
    );
    for family in &spec.dict_families {
        for pattern in &spec.sparsity_patterns {
            if pattern.len() != family.len() {
                return Err(Error::Config(format!(
                    "sparsity pattern {pattern:?} has {} levels, family {family:?} has {}",
                    pattern.len(),
                    family.len()
                )));
            }
            let ks: Vec<usize> = if spec.clamp_k {
                pattern.iter().zip(family).map(|(&k, &size)| k.min(size)).collect()
            } else {
                pattern.clone()
            };
            let config = SaeConfig::new(input_dim, family.clone(), ks)?;
            for &seed in &spec.replicate_seeds {
                out.push(SweepEntry {
                    id: format!("D{}_K{}_s{seed}", join(family), join(pattern)),
                    config: config.clone(),
                    seed,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn default_sweep_has_96_unique_entries() {
        let entries = enumerate_sweep(&SweepSpec::default(), 1536).unwrap();
        assert_eq!(entries.len(), 96);
        let ids: BTreeSet<_> = entries.iter().map(|e| e.id.clone()).collect();
        assert_eq!(ids.len(), 96);
        assert_eq!(entries, enumerate_sweep(&SweepSpec::default(), 1536).unwrap());
        assert_eq!(entries[0].id, "D16-64-256-1024_K10-10-10-10_s0");
        for e in &entries {
            assert!(e.config.validate().is_ok());
        }
        // family [16, ...] with pattern [30, 60, 120, 240] runs level 1 dense
        let e = entries.iter().find(|e| e.id == "D16-64-256-1024_K30-60-120-240_s1").unwrap();
        assert_eq!(e.config.k_values, vec![16, 60, 120, 240]);
    }

    #[test]
    fn default_grid_without_clamping_is_rejected() {
        let spec = SweepSpec {
            clamp_k: false,
            ..SweepSpec::default()
        };
        assert!(enumerate_sweep(&spec, 1536).is_err());
    }

    #[test]
    fn single_point() {
        let spec = SweepSpec {
            dict_families: vec![vec![8, 16]],
            sparsity_patterns: vec![vec![1, 2]],
            replicate_seeds: vec![5],
            clamp_k: false,
        };
        let entries = enumerate_sweep(&spec, 4).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].seed, 5);
    }

    #[test]
    fn k_above_dictionary_rejected() {
        let spec = SweepSpec {
            dict_families: vec![vec![128, 512]],
            sparsity_patterns: vec![vec![200, 300]],
            replicate_seeds: vec![0],
            clamp_k: false,
        };
        assert!(enumerate_sweep(&spec, 4).is_err());
        let short = SweepSpec {
            sparsity_patterns: vec![vec![10]],
            ..spec
        };
        assert!(enumerate_sweep(&short, 4).is_err());
    }
}
