use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, Modality, Sex};
use crate::error::{Error, Result};

/// Train/validation/test partition of a dataset's sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub holdout_institutions: BTreeSet<String>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn train_indices(&self, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
        ds.resolve(&self.train_ids)
    }

    pub fn val_indices(&self, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
        ds.resolve(&self.val_ids)
    }

    pub fn test_indices(&self, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
        ds.resolve(&self.test_ids)
    }

    /// The split used for evaluation: test when present, otherwise validation.
    pub fn eval_indices(&self, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
        if self.test_ids.is_empty() {
            self.val_indices(ds)
        } else {
            self.test_indices(ds)
        }
    }
}

type Stratum<'a> = (Modality, &'a str, Sex);

/// Holds out whole institutions as test, then splits the remaining scans
/// train/val within each (modality, age group, sex) stratum.
///
/// Strata containing a single scan go to train. Multi-scan strata keep at
/// least one scan on each side.
pub fn make_splits(
    dataset: &EmbeddingDataset,
    holdout_institutions: &BTreeSet<String>,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let institutions: BTreeSet<&str> = dataset
        .records()
        .iter()
        .map(|r| r.meta.institution.as_str())
        .collect();
    if let Some(unknown) = holdout_institutions
        .iter()
        .find(|h| !institutions.contains(h.as_str()))
    {
        return Err(Error::Config(format!("unknown holdout institution {unknown}")));
    }

    let mut test_ids = BTreeSet::new();
    // scan_id -> sample ids, in order of first appearance
    let mut scans: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut scan_pos: BTreeMap<&str, usize> = BTreeMap::new();
    let mut strata: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();

    for rec in dataset.records() {
        let m = &rec.meta;
        if holdout_institutions.contains(&m.institution) {
            test_ids.insert(m.sample_id.clone());
            continue;
        }
        match scan_pos.get(m.scan_id.as_str()) {
            Some(&p) => scans[p].1.push(&m.sample_id),
            None => {
                scan_pos.insert(&m.scan_id, scans.len());
                strata
                    .entry((m.modality, m.age_group.as_str(), m.sex))
                    .or_default()
                    .push(scans.len());
                scans.push((&m.scan_id, vec![&m.sample_id]));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = BTreeSet::new();
    let mut val_ids = BTreeSet::new();
    for (_, mut members) in strata {
        let n = members.len();
        let n_train = if n == 1 {
            1
        } else {
            ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        members.shuffle(&mut rng);
        for (pos, scan) in members.into_iter().enumerate() {
            let dst = if pos < n_train { &mut train_ids } else { &mut val_ids };
            dst.extend(scans[scan].1.iter().map(|s| s.to_string()));
        }
    }

    if train_ids.is_empty() {
        return Err(Error::Dataset("split produced an empty train set".into()));
    }
    if val_ids.is_empty() {
        return Err(Error::Dataset("split produced an empty validation set".into()));
    }
    Ok(SplitAssignment {
        train_ids,
        val_ids,
        test_ids,
        holdout_institutions: holdout_institutions.clone(),
        train_fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::testutil::meta;
    use crate::store::EmbeddingRecord;
    use proptest::prelude::*;

    fn ds_from(metas: Vec<super::super::RecordMeta>) -> EmbeddingDataset {
        let recs = metas
            .into_iter()
            .map(|meta| EmbeddingRecord {
                meta,
                embedding: vec![0.0],
            })
            .collect();
        EmbeddingDataset::new(1, recs).unwrap()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn holdout_institution_goes_to_test() {
        let mut metas = Vec::new();
        for i in 0..10 {
            metas.push(meta(&format!("a{i}"), &format!("sa{i}"), "A", &[]));
            metas.push(meta(&format!("b{i}"), &format!("sb{i}"), "B", &[]));
        }
        let ds = ds_from(metas);
        let split = make_splits(&ds, &set(&["A"]), 0.8, 7).unwrap();
        assert_eq!(split.test_ids.len(), 10);
        assert!(split.test_ids.iter().all(|id| id.starts_with('a')));
        assert_eq!(split.train_ids.len(), 8);
        assert_eq!(split.val_ids.len(), 2);
    }

    #[test]
    fn ten_scans_split_eight_two() {
        let metas = (0..10)
            .map(|i| meta(&format!("x{i}"), &format!("s{i}"), "A", &[]))
            .collect();
        let ds = ds_from(metas);
        let split = make_splits(&ds, &BTreeSet::new(), 0.8, 1).unwrap();
        assert_eq!((split.train_ids.len(), split.val_ids.len()), (8, 2));
        assert!(split.test_ids.is_empty());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let metas = (0..40)
            .map(|i| meta(&format!("x{i}"), &format!("s{}", i / 2), "A", &[]))
            .collect();
        let ds = ds_from(metas);
        let a = make_splits(&ds, &BTreeSet::new(), 0.8, 3).unwrap();
        let b = make_splits(&ds, &BTreeSet::new(), 0.8, 3).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&ds, &BTreeSet::new(), 0.8, 4).unwrap();
        assert_ne!(a.train_ids, c.train_ids);
    }

    #[test]
    fn unknown_holdout_and_empty_val_errors() {
        let ds = ds_from(vec![meta("a", "s", "A", &[])]);
        assert!(make_splits(&ds, &set(&["Z"]), 0.8, 0).is_err());
        // single scan: lands in train, val empty
        assert!(make_splits(&ds, &BTreeSet::new(), 0.8, 0).is_err());
        assert!(make_splits(&ds, &BTreeSet::new(), 1.0, 0).is_err());
    }

    fn arb_metas() -> impl Strategy<Value = Vec<super::super::RecordMeta>> {
        prop::collection::vec((0u8..4, 0u8..12, 0u8..2, 0u8..3, 0u8..2), 4..80).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (inst, scan, modality, age, sex))| {
                    let mut m = meta(
                        &format!("id{i}"),
                        &format!("scan{inst}_{scan}"),
                        &format!("I{inst}"),
                        &[],
                    );
                    m.modality = if modality == 0 { Modality::Ct } else { Modality::Mr };
                    m.age_group = format!("g{age}");
                    m.sex = if sex == 0 { Sex::M } else { Sex::F };
                    m
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn splits_partition_and_respect_scans(metas in arb_metas(), seed in any::<u64>(), hold in 0u8..3) {
            let ds = ds_from(metas);
            let holdout: BTreeSet<String> = if hold == 0 {
                BTreeSet::new()
            } else {
                set(&["I0"]).into_iter().filter(|i| ds.records().iter().any(|r| &r.meta.institution == i)).collect()
            };
            let split = match make_splits(&ds, &holdout, 0.8, seed) {
                Ok(s) => s,
                Err(_) => return Ok(()),
            };
            let n = split.train_ids.len() + split.val_ids.len() + split.test_ids.len();
            prop_assert_eq!(n, ds.len());
            prop_assert!(split.train_ids.is_disjoint(&split.val_ids));
            prop_assert!(split.train_ids.is_disjoint(&split.test_ids));
            prop_assert!(split.val_ids.is_disjoint(&split.test_ids));

            let mut scan_home: BTreeMap<&str, u8> = BTreeMap::new();
            for rec in ds.records() {
                let id = &rec.meta.sample_id;
                let which = if split.train_ids.contains(id) { 0 } else if split.val_ids.contains(id) { 1 } else { 2 };
                prop_assert_eq!(holdout.contains(&rec.meta.institution), which == 2);
                let prev = *scan_home.entry(rec.meta.scan_id.as_str()).or_insert(which);
                prop_assert_eq!(prev, which);
            }
        }
    }
}
