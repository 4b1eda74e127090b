use matsae_core::metrics::r_squared;
use matsae_core::sae::{self, SaeConfig};
use matsae_core::store::{make_splits, synth_dataset, SynthSpec};
use matsae_core::trainer::{train, write_checkpoint, TrainConfig};

fn planted() -> (matsae_core::store::EmbeddingDataset, ndarray::Array2<f64>) {
    synth_dataset(&SynthSpec {
        d: 16,
        n_truth: 8,
        n_samples: 2000,
        s_active: 1,
        noise_sigma: 0.0,
        seed: 1,
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 32,
        lr0: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn recovers_planted_dictionary() {
    let (ds, atoms) = planted();
    let split = make_splits(&ds, &Default::default(), 0.8, 1).unwrap();
    let sae_cfg = SaeConfig::new(16, vec![8, 16], vec![1, 2]).unwrap();
    let cp = train(&ds, &split, &sae_cfg, &config()).unwrap();

    let val = split.eval_indices(&ds).unwrap();
    let x = ds.matrix(&val);
    let codes = sae::encode_inference_batch(&cp.params, x.view(), &sae_cfg, 2).unwrap();
    let x_hat = sae::decode(&cp.params, &codes).unwrap();
    let r2 = r_squared(x.view(), x_hat.view()).unwrap();
    assert!(r2 >= 0.95, "R^2 {r2}");

    let dec = cp.params.decoder();
    let mean_max_cos = atoms
        .rows()
        .into_iter()
        .map(|a| dec.rows().into_iter().map(|r| r.dot(&a)).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / atoms.nrows() as f64;
    assert!(mean_max_cos >= 0.90, "mean max cosine {mean_max_cos}");

    assert_eq!(cp.train_loss.len(), 30);
    assert_eq!(cp.val_loss.len(), 30);
    assert!(cp.train_loss[29] < cp.train_loss[0]);
    assert!(cp.params.thresholds.iter().all(|t| *t > 0.0));
}

#[test]
fn training_is_deterministic() {
    let (ds, _) = planted();
    let split = make_splits(&ds, &Default::default(), 0.8, 1).unwrap();
    let sae_cfg = SaeConfig::new(16, vec![8, 16], vec![1, 2]).unwrap();
    let cfg = TrainConfig { epochs: 3, ..config() };
    let bytes = || {
        let cp = train(&ds, &split, &sae_cfg, &cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cp).unwrap();
        buf
    };
    assert_eq!(bytes(), bytes());
    let other = train(&ds, &split, &sae_cfg, &TrainConfig { seed: 9, ..cfg.clone() }).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &other).unwrap();
    assert_ne!(buf, bytes());
}
