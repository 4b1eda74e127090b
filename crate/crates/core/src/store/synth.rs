use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, EmbeddingRecord, Modality, RecordMeta, Sex};
use crate::error::{Error, Result};

const INSTITUTIONS: [&str; 4] = ["inst_a", "inst_b", "inst_c", "inst_d"];
const MODALITIES: [Modality; 2] = [Modality::Ct, Modality::Mr];
const AGE_GROUPS: [&str; 4] = ["18-39", "40-59", "60-79", "80+"];
const SEXES: [Sex; 2] = [Sex::M, Sex::F];

/// Parameters of a planted sparse-dictionary dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub n_truth: usize,
    pub n_samples: usize,
    pub s_active: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn atom_label(i: usize) -> String {
    format!("atom_{i}")
}

/// Generates `n_samples` sparse non-negative combinations of `n_truth`
/// random unit atoms. Returns the dataset and the `n_truth x d` atom matrix.
///
/// Each sample's organ set is the labels of its active atoms, so feature
/// purity can be checked exactly against ground truth.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(EmbeddingDataset, Array2<f64>)> {
    let SynthSpec {
        d,
        n_truth,
        n_samples,
        s_active,
        noise_sigma,
        seed,
    } = *spec;
    if d < 2 {
        return Err(Error::Config(format!("synthetic d must be >= 2, got {d}")));
    }
    if n_truth == 0 || n_samples == 0 || s_active == 0 {
        return Err(Error::Config("synthetic counts must be positive".into()));
    }
    if s_active > n_truth {
        return Err(Error::Config(format!(
            "s_active={s_active} exceeds atom count {n_truth}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = Array2::<f64>::zeros((n_truth, d));
    for mut row in atoms.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-8 {
                row /= norm;
                break;
            }
        }
    }

    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut active = rand::seq::index::sample(&mut rng, n_truth, s_active).into_vec();
        active.sort_unstable();
        let mut x = vec![0.0f64; d];
        for &a in &active {
            let c: f64 = rng.random_range(0.5..=1.5);
            for (xv, av) in x.iter_mut().zip(atoms.row(a)) {
                *xv += c * av;
            }
        }
        if noise_sigma > 0.0 {
            x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let sample_id = format!("s{i:06}");
        let meta = RecordMeta {
            scan_id: sample_id.clone(),
            sample_id,
            institution: INSTITUTIONS[i % INSTITUTIONS.len()].to_string(),
            modality: MODALITIES[i % MODALITIES.len()],
            age_group: AGE_GROUPS[(i / 2) % AGE_GROUPS.len()].to_string(),
            sex: SEXES[(i / 8) % SEXES.len()],
            organs: active.iter().map(|&a| atom_label(a)).collect(),
            extra: Default::default(),
        };
        records.push(EmbeddingRecord {
            meta,
            embedding: x.iter().map(|&v| v as f32).collect(),
        });
    }
    Ok((EmbeddingDataset::new(d, records)?, atoms))
}
