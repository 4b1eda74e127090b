use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use matsae_core::interp::{self, make_client, ClientConfig, ConceptRecord, InterpOutput};
use matsae_core::metrics::{self, ConfigResult, FeatureActivationTable, FeatureScore, RankedConfig};
use matsae_core::pipeline;
use matsae_core::pool::bounded_map;
use matsae_core::retrieval::{self, Fingerprint, Hit, RetrievalEval, RetrievalIndex};
use matsae_core::sae::SaeConfig;
use matsae_core::store::{self, EmbeddingDataset, SplitAssignment, SynthSpec};
use matsae_core::trainer::{self, Checkpoint, SweepEntry};
use matsae_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{set, FileConfig};
use crate::manifest::{read_json, read_jsonl, write_json, write_jsonl, ManifestBuilder};
use crate::report;

pub const EMBEDDINGS_FILE: &str = "embeddings.saeb";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.saec";
pub const TRAINING_FILE: &str = "training.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const RANKING_FILE: &str = "ranking.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SCORES_FILE: &str = "feature_scores.jsonl";
pub const INDEX_FILE: &str = "index.saei";
pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const DOSSIERS_FILE: &str = "dossiers.jsonl";
pub const CONCEPTS_FILE: &str = "concepts.jsonl";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const INTERP_SUMMARY_FILE: &str = "interp_summary.json";
pub const QUERY_FILE: &str = "query.json";
pub const TABLES_FILE: &str = "tables.txt";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Dataset directory as written by `synth` or `ingest`.
struct DataDir {
    embeddings: PathBuf,
    metadata: PathBuf,
    split: PathBuf,
}

impl DataDir {
    fn new(dir: &Path) -> Self {
        Self {
            embeddings: dir.join(EMBEDDINGS_FILE),
            metadata: dir.join(METADATA_FILE),
            split: dir.join(SPLIT_FILE),
        }
    }

    fn load(&self) -> Result<(EmbeddingDataset, SplitAssignment)> {
        let ds = store::load_dataset(&self.embeddings, &self.metadata)?;
        let split: SplitAssignment = read_json(&self.split)?;
        // every id must resolve
        split.train_indices(&ds)?;
        split.val_indices(&ds)?;
        split.test_indices(&ds)?;
        Ok((ds, split))
    }

    fn record_inputs(&self, m: &mut ManifestBuilder) {
        m.input("embeddings", &self.embeddings)
            .input("metadata", &self.metadata)
            .input("split", &self.split);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct SplitArgs {
    /// Fraction of non-holdout scans assigned to train [default: 0.8]
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Seed for the train/validation shuffle [default: 0]
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Institutions held out as the test split, comma separated
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<String>>,
}

fn write_split(ds: &EmbeddingDataset, cfg: &mut FileConfig, args: &SplitArgs, path: &Path) -> Result<()> {
    set(&mut cfg.split.train_fraction, args.train_fraction);
    set(&mut cfg.split.seed, args.split_seed);
    set(&mut cfg.split.holdout, args.holdout.clone());
    let holdout: BTreeSet<String> = cfg.split.holdout.iter().cloned().collect();
    let split = store::make_splits(ds, &holdout, cfg.split.train_fraction, cfg.split.seed)?;
    info!(
        "split: {} train, {} val, {} test",
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len()
    );
    write_json(path, &split)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding dimension [default: 16]
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of planted atoms [default: 8]
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Number of samples [default: 2000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Active atoms per sample [default: 1]
    #[arg(long)]
    pub s_active: Option<usize>,
    /// Gaussian noise standard deviation [default: 0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Generator seed [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
}

pub fn synth(mut cfg: FileConfig, args: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.d, args.d);
    set(&mut s.atoms, args.atoms);
    set(&mut s.n, args.n);
    set(&mut s.s_active, args.s_active);
    set(&mut s.noise, args.noise);
    set(&mut s.seed, args.seed);
    let spec = SynthSpec {
        d: s.d,
        n_truth: s.atoms,
        n_samples: s.n,
        s_active: s.s_active,
        noise_sigma: s.noise,
        seed: s.seed,
    };
    let (ds, _atoms) = store::synth_dataset(&spec)?;
    create_dir(&args.out)?;
    let dir = DataDir::new(&args.out);
    store::save_dataset(&ds, &dir.embeddings, &dir.metadata)?;
    write_split(&ds, &mut cfg, &args.split, &dir.split)?;

    let mut m = ManifestBuilder::new("synth", serde_json::json!({ "synth": cfg.synth, "split": cfg.split }));
    m.output(&dir.embeddings).output(&dir.metadata).output(&dir.split);
    m.write(&args.out)?;
    println!("wrote {} samples (d={}) to {}", ds.len(), ds.d(), args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// SAIL-EMB embeddings file
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSON-lines metadata file, one record per embedding row
    #[arg(long)]
    pub metadata: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
}

pub fn ingest(mut cfg: FileConfig, args: IngestArgs) -> Result<()> {
    let ds = store::load_dataset(&args.embeddings, &args.metadata)?;
    create_dir(&args.out)?;
    let dir = DataDir::new(&args.out);
    store::save_dataset(&ds, &dir.embeddings, &dir.metadata)?;
    write_split(&ds, &mut cfg, &args.split, &dir.split)?;

    let mut m = ManifestBuilder::new("ingest", serde_json::json!({ "split": cfg.split }));
    m.input("embeddings", &args.embeddings).input("metadata", &args.metadata);
    m.output(&dir.embeddings).output(&dir.metadata).output(&dir.split);
    m.write(&args.out)?;
    println!("ingested {} samples (d={})", ds.len(), ds.d());
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Initial learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final learning rate of the cosine schedule
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initialization and batch-order seed
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut FileConfig) {
        let t = &mut cfg.train;
        set(&mut t.lr0, self.lr);
        set(&mut t.lr_min, self.lr_min);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.seed, self.seed);
    }
}

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    /// Dataset directory from `synth` or `ingest`
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Nested dictionary sizes, comma separated, strictly increasing
    #[arg(long, value_delimiter = ',')]
    pub dict_sizes: Option<Vec<usize>>,
    /// Active features per sample at each level, comma separated
    #[arg(long = "k", value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    epochs: usize,
    final_loss: f64,
    train_loss: &'a [f64],
    val_loss: &'a [f64],
    thresholds: &'a [f64],
}

pub fn train(mut cfg: FileConfig, args: TrainCmdArgs) -> Result<()> {
    set(&mut cfg.sae.dict_sizes, args.dict_sizes.map(Some));
    set(&mut cfg.sae.k_values, args.k_values.map(Some));
    args.train.apply(&mut cfg);
    let (Some(dict_sizes), Some(k_values)) = (cfg.sae.dict_sizes.clone(), cfg.sae.k_values.clone()) else {
        return Err(Error::Config("train needs --dict-sizes and --k (or [sae] in the config file)".into()));
    };
    let dir = DataDir::new(&args.data);
    let (ds, split) = dir.load()?;
    let sae = SaeConfig::new(ds.d(), dict_sizes, k_values)?;
    let cp = trainer::train(&ds, &split, &sae, &cfg.train)?;

    create_dir(&args.out)?;
    let cp_path = args.out.join(CHECKPOINT_FILE);
    trainer::save_checkpoint(&cp, &cp_path)?;
    let summary_path = args.out.join(TRAINING_FILE);
    write_json(
        &summary_path,
        &TrainingSummary {
            epochs: cp.epoch,
            final_loss: cp.final_loss,
            train_loss: &cp.train_loss,
            val_loss: &cp.val_loss,
            thresholds: &cp.params.thresholds,
        },
    )?;

    let mut m = ManifestBuilder::new("train", serde_json::json!({ "sae": sae, "train": cfg.train }));
    dir.record_inputs(&mut m);
    m.output(&cp_path).output(&summary_path);
    m.write(&args.out)?;
    println!("trained {} epochs, final loss {:.6e}", cp.epoch, cp.final_loss);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Print the enumerated configurations and exit
    #[arg(long)]
    pub dry_run: bool,
    /// Input dimension used by --dry-run [default: 1536]
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Dataset directory (required unless --dry-run)
    #[arg(long, required_unless_present = "dry_run")]
    pub data: Option<PathBuf>,
    /// Output directory (required unless --dry-run)
    #[arg(long, required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    /// Configurations trained in parallel [default: 4]
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

fn run_sweep_entry(
    entry: &SweepEntry,
    cfg: &FileConfig,
    ds: &EmbeddingDataset,
    split: &SplitAssignment,
    runs: &Path,
) -> Result<(ConfigResult, PathBuf)> {
    let mut tc = cfg.train.clone();
    tc.seed = entry.seed;
    info!("training {}", entry.id);
    let cp = trainer::train(ds, split, &entry.config, &tc)?;
    let path = runs.join(format!("{}.saec", entry.id));
    trainer::save_checkpoint(&cp, &path)?;
    let ev = pipeline::evaluate_checkpoint(&entry.id, entry.seed, &cp, ds, split, &cfg.eval)?;
    Ok((ev.result, path))
}

pub fn sweep(mut cfg: FileConfig, args: SweepArgs) -> Result<()> {
    set(&mut cfg.sweep.workers, args.workers);
    set(&mut cfg.sweep.input_dim, args.input_dim);
    args.train.apply(&mut cfg);
    args.eval.apply(&mut cfg);
    let spec = cfg.sweep.spec();

    if args.dry_run {
        let entries = trainer::enumerate_sweep(&spec, cfg.sweep.input_dim)?;
        for e in &entries {
            println!("{}\tD={:?}\tK={:?}\tseed={}", e.id, e.config.dict_sizes, e.config.k_values, e.seed);
        }
        println!("{} configurations", entries.len());
        return Ok(());
    }
    let (Some(data), Some(out)) = (args.data, args.out) else {
        return Err(Error::Config("sweep needs --data and --out unless --dry-run".into()));
    };
    let dir = DataDir::new(&data);
    let (ds, split) = dir.load()?;
    let entries = trainer::enumerate_sweep(&spec, ds.d())?;
    let runs = out.join("runs");
    create_dir(&runs)?;
    let done = bounded_map(&entries, cfg.sweep.workers, |e| run_sweep_entry(e, &cfg, &ds, &split, &runs))?;

    let results: Vec<ConfigResult> = done.iter().map(|d| d.0.clone()).collect();
    let ranking = metrics::rank_configs(&results)?;
    let results_path = out.join(RESULTS_FILE);
    let ranking_path = out.join(RANKING_FILE);
    write_jsonl(&results_path, &results)?;
    write_jsonl(&ranking_path, &ranking)?;

    let mut m = ManifestBuilder::new(
        "sweep",
        serde_json::json!({ "sweep": spec, "workers": cfg.sweep.workers, "train": cfg.train, "eval": cfg.eval }),
    );
    dir.record_inputs(&mut m);
    for (_, p) in &done {
        m.output(p);
    }
    m.output(&results_path).output(&ranking_path);
    m.write(&out)?;
    println!("{} configurations trained and evaluated", results.len());
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Minimum train prevalence for an organ probe task [default: 0.05]
    #[arg(long)]
    pub min_prevalence: Option<f64>,
    /// Random sample pairs for the Jaccard null baseline [default: 1000]
    #[arg(long)]
    pub null_pairs: Option<usize>,
    /// Top-N values for performance recovery, comma separated
    #[arg(long, value_delimiter = ',')]
    pub recovery_n: Option<Vec<usize>>,
    /// Seed for the null baseline [default: 0]
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

impl EvalArgs {
    fn apply(&self, cfg: &mut FileConfig) {
        let e = &mut cfg.eval;
        set(&mut e.min_prevalence, self.min_prevalence);
        set(&mut e.null_pairs, self.null_pairs);
        set(&mut e.recovery_n, self.recovery_n.clone());
        set(&mut e.seed, self.eval_seed);
    }
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    /// Dataset directory from `synth` or `ingest`
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint file
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    dir: DataDir,
    ds: EmbeddingDataset,
    split: SplitAssignment,
    cp: Checkpoint,
}

impl CheckpointArgs {
    fn load(&self) -> Result<Loaded> {
        let dir = DataDir::new(&self.data);
        let (ds, split) = dir.load()?;
        let cp = trainer::load_checkpoint(&self.checkpoint)?;
        if cp.sae_config.input_dim != ds.d() {
            return Err(Error::Shape(format!(
                "checkpoint input_dim {} vs dataset d {}",
                cp.sae_config.input_dim,
                ds.d()
            )));
        }
        create_dir(&self.out)?;
        Ok(Loaded { dir, ds, split, cp })
    }

    fn manifest(&self, loaded: &Loaded, command: &str, config: serde_json::Value) -> ManifestBuilder {
        let mut m = ManifestBuilder::new(command, config);
        loaded.dir.record_inputs(&mut m);
        m.input("checkpoint", &self.checkpoint);
        m
    }
}

#[derive(Args, Debug)]
pub struct EvalCmdArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Configuration id recorded in the report [default: checkpoint file stem]
    #[arg(long)]
    pub id: Option<String>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

pub fn eval(mut cfg: FileConfig, args: EvalCmdArgs) -> Result<()> {
    args.eval.apply(&mut cfg);
    let l = args.io.load()?;
    let id = args.id.clone().unwrap_or_else(|| {
        args.io
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let ev = pipeline::evaluate_checkpoint(&id, l.cp.train_config.seed, &l.cp, &l.ds, &l.split, &cfg.eval)?;
    let path = args.io.out.join(REPORT_FILE);
    write_jsonl(&path, std::slice::from_ref(&ev.result))?;

    let mut m = args.io.manifest(&l, "eval", serde_json::json!({ "id": id, "eval": cfg.eval }));
    m.output(&path);
    m.write(&args.io.out)?;
    let r = &ev.result;
    println!(
        "r2={:.4} mean_l0={:.2} alive={} m_config={:.4} dense_auc={:.4} sparse_auc={:.4}",
        r.r2, r.mean_l0, r.alive, r.m_config, r.dense_auc, r.sparse_auc
    );
    Ok(())
}

/// One line of `feature_scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    #[serde(flatten)]
    pub score: FeatureScore,
    pub n_active: usize,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Random sample pairs for the Jaccard null baseline [default: 1000]
    #[arg(long)]
    pub null_pairs: Option<usize>,
    /// Seed for the null baseline [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn score(mut cfg: FileConfig, args: ScoreArgs) -> Result<()> {
    set(&mut cfg.eval.null_pairs, args.null_pairs);
    set(&mut cfg.eval.seed, args.seed);
    let l = args.io.load()?;
    let eval_idx = l.split.eval_indices(&l.ds)?;
    let table = FeatureActivationTable::build(&l.cp.params, &l.cp.sae_config, &l.ds, &eval_idx)?;
    let rows: Vec<ScoreRow> = metrics::score_features(&table, &l.ds, cfg.eval.null_pairs, cfg.eval.seed)
        .into_iter()
        .map(|s| ScoreRow {
            n_active: table.features[s.feature].len(),
            score: s,
        })
        .collect();
    let path = args.io.out.join(SCORES_FILE);
    write_jsonl(&path, &rows)?;

    let mut m = args.io.manifest(
        &l,
        "score",
        serde_json::json!({ "null_pairs": cfg.eval.null_pairs, "seed": cfg.eval.seed }),
    );
    m.output(&path);
    m.write(&args.io.out)?;
    let scores: Vec<FeatureScore> = rows.iter().map(|r| r.score).collect();
    println!("scored {} features, m_config={:.4}", rows.len(), metrics::monosemanticity_config(&scores)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Fingerprint sizes to evaluate, comma separated [default: 1,5,10,20]
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    /// Reference samples; clamped to the index size [default: 200]
    #[arg(long)]
    pub n_refs: Option<usize>,
    /// Neighbours retrieved per reference [default: 5]
    #[arg(long)]
    pub top_m: Option<usize>,
    /// Reference sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also record the neighbours of this sample id
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceHits {
    pub sample_id: String,
    pub by_k: BTreeMap<usize, Vec<Hit>>,
    pub dense: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub eval: RetrievalEval,
    pub reference: Option<ReferenceHits>,
}

pub fn retrieve(mut cfg: FileConfig, args: RetrieveArgs) -> Result<()> {
    let r = &mut cfg.retrieval;
    set(&mut r.k_list, args.k_list.clone());
    set(&mut r.n_refs, args.n_refs);
    set(&mut r.top_m, args.top_m);
    set(&mut r.seed, args.seed);
    let l = args.io.load()?;
    let eval_idx = l.split.eval_indices(&l.ds)?;
    let index = pipeline::build_index(&l.cp, &l.ds, &eval_idx)?;
    if cfg.retrieval.n_refs > index.len() {
        warn!("n_refs {} clamped to index size {}", cfg.retrieval.n_refs, index.len());
        cfg.retrieval.n_refs = index.len();
    }
    let r = &cfg.retrieval;
    let eval = retrieval::evaluate_fingerprint_retrieval(&index, &r.k_list, r.n_refs, r.top_m, r.seed)?;
    let reference = match &args.reference {
        None => None,
        Some(id) => {
            let pos = index
                .position(id)
                .ok_or_else(|| Error::Invalid(format!("reference {id} is not in the evaluation split")))?;
            let mut by_k = BTreeMap::new();
            for &k in &r.k_list {
                let restricted = index.restrict(k);
                let q = restricted.fingerprints()[pos].clone();
                by_k.insert(k, retrieval::retrieve(&q, &restricted, r.top_m, Some(id))?);
            }
            Some(ReferenceHits {
                sample_id: id.clone(),
                by_k,
                dense: retrieval::retrieve_dense(&index, id, r.top_m)?,
            })
        }
    };
    let index_path = args.io.out.join(INDEX_FILE);
    index.save(&index_path)?;
    let report_path = args.io.out.join(RETRIEVAL_FILE);
    write_json(&report_path, &RetrievalReport { eval: eval.clone(), reference })?;

    let mut m = args.io.manifest(
        &l,
        "retrieve",
        serde_json::json!({ "retrieval": cfg.retrieval, "reference": args.reference }),
    );
    m.output(&index_path).output(&report_path);
    m.write(&args.io.out)?;
    for (k, q) in &eval.by_k {
        println!("k={k:<4} quality={q:.4}");
    }
    println!("dense  quality={:.4}", eval.dense);
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct ClientArgs {
    /// Concept generator endpoint (`https://...` or `mock:concept`)
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub generator_model: Option<String>,
    /// Judge endpoint (`https://...` or `mock:judge`)
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub judge_model: Option<String>,
}

#[derive(Args, Debug)]
pub struct InterpretArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Feature scores from `score`
    #[arg(long)]
    pub scores: PathBuf,
    /// Features to interpret, highest M first [default: 250]
    #[arg(long)]
    pub n_features: Option<usize>,
    /// Maximum in-flight client requests [default: 4]
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Seed for judge candidate sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub clients: ClientArgs,
}

fn override_client(c: &mut ClientConfig, url: &Option<String>, model: &Option<String>) {
    if let Some(u) = url {
        c.base_url = u.clone();
        if let Some(kind) = u.strip_prefix("mock:") {
            c.model = format!("mock-{kind}");
        }
    }
    set(&mut c.model, model.clone());
}

pub fn interpret(mut cfg: FileConfig, args: InterpretArgs) -> Result<()> {
    let ic = &mut cfg.interp;
    set(&mut ic.n_features, args.n_features);
    set(&mut ic.concurrency, args.concurrency);
    set(&mut ic.seed, args.seed);
    override_client(&mut ic.generator, &args.clients.generator, &args.clients.generator_model);
    override_client(&mut ic.judge, &args.clients.judge, &args.clients.judge_model);
    let ic = &cfg.interp;
    let generator = make_client(&ic.generator)?;
    let judge = make_client(&ic.judge)?;

    let l = args.io.load()?;
    let rows: Vec<ScoreRow> = read_jsonl(&args.scores)?;
    if rows.len() != l.cp.sae_config.max_dict() {
        return Err(Error::Shape(format!(
            "{} score rows for a dictionary of {}",
            rows.len(),
            l.cp.sae_config.max_dict()
        )));
    }
    let live: Vec<FeatureScore> = rows.iter().filter(|r| r.n_active > 0).map(|r| r.score).collect();
    let features = interp::select_features_for_interp(&live, ic.n_features);
    info!("interpreting {} of {} features", features.len(), rows.len());
    let eval_idx = l.split.eval_indices(&l.ds)?;
    let table = FeatureActivationTable::build(&l.cp.params, &l.cp.sae_config, &l.ds, &eval_idx)?;
    let out: InterpOutput = interp::interpret(
        &features,
        &table,
        &l.ds,
        generator.as_ref(),
        judge.as_ref(),
        ic.seed,
        ic.concurrency,
    )?;

    let o = &args.io.out;
    let paths = [o.join(DOSSIERS_FILE), o.join(CONCEPTS_FILE), o.join(TRIALS_FILE), o.join(INTERP_SUMMARY_FILE)];
    write_jsonl(&paths[0], &out.dossiers)?;
    write_jsonl(&paths[1], &out.concepts)?;
    write_jsonl(&paths[2], &out.trials)?;
    write_json(&paths[3], &out.summary)?;

    let mut m = args.io.manifest(
        &l,
        "interpret",
        serde_json::json!({
            "n_features": ic.n_features,
            "seed": ic.seed,
            "concurrency": ic.concurrency,
            "generator": { "base_url": ic.generator.base_url, "model": ic.generator.model },
            "judge": { "base_url": ic.judge.base_url, "model": ic.judge.model },
        }),
    );
    m.input("scores", &args.scores);
    for p in &paths {
        m.output(p);
    }
    m.write(o)?;
    println!(
        "interpreted {} features, mean judge rank {:.3}",
        out.concepts.len(),
        out.summary.mean_rank
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub io: CheckpointArgs,
    /// Concept catalog from `interpret`
    #[arg(long)]
    pub concepts: PathBuf,
    /// Matcher endpoint (`https://...` or `mock:matcher`)
    #[arg(long)]
    pub matcher: Option<String>,
    #[arg(long)]
    pub matcher_model: Option<String>,
    /// Most concepts used to build the query [default: 5]
    #[arg(long)]
    pub max_matches: Option<usize>,
    /// Query fingerprint size [default: 10]
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Samples returned [default: 5]
    #[arg(long)]
    pub top_m: Option<usize>,
    /// Clinical text query
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: String,
    pub matched: Vec<ConceptRecord>,
    pub fingerprint: Option<Fingerprint>,
    pub hits: Vec<Hit>,
}

pub fn query(mut cfg: FileConfig, args: QueryArgs) -> Result<()> {
    override_client(&mut cfg.interp.matcher, &args.matcher, &args.matcher_model);
    set(&mut cfg.interp.max_matches, args.max_matches);
    set(&mut cfg.retrieval.top_m, args.top_m);
    if args.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let matcher = make_client(&cfg.interp.matcher)?;
    let l = args.io.load()?;
    let concepts: Vec<ConceptRecord> = read_jsonl(&args.concepts)?;
    let features = interp::match_concepts(matcher.as_ref(), &args.query, &concepts, cfg.interp.max_matches)?;
    let matched: Vec<ConceptRecord> = features
        .iter()
        .filter_map(|f| concepts.iter().find(|c| c.feature == *f).cloned())
        .collect();

    let eval_idx = l.split.eval_indices(&l.ds)?;
    let (fingerprint, hits) = if features.is_empty() {
        warn!("no concept matches {:?}", args.query);
        (None, Vec::new())
    } else {
        let table = FeatureActivationTable::build(&l.cp.params, &l.cp.sae_config, &l.ds, &eval_idx)?;
        let fp = retrieval::mean_activation_fingerprint(&features, &table, args.k)?;
        let index: RetrievalIndex = pipeline::build_index(&l.cp, &l.ds, &eval_idx)?.restrict(args.k);
        let hits = retrieval::retrieve(&fp, &index, cfg.retrieval.top_m, None)?;
        (Some(fp), hits)
    };
    let path = args.io.out.join(QUERY_FILE);
    let report = QueryReport {
        query: args.query.clone(),
        matched,
        fingerprint,
        hits,
    };
    write_json(&path, &report)?;

    let mut m = args.io.manifest(
        &l,
        "query",
        serde_json::json!({
            "query": args.query,
            "k": args.k,
            "top_m": cfg.retrieval.top_m,
            "max_matches": cfg.interp.max_matches,
            "matcher": { "base_url": cfg.interp.matcher.base_url, "model": cfg.interp.matcher.model },
        }),
    );
    m.input("concepts", &args.concepts).output(&path);
    m.write(&args.io.out)?;
    for c in &report.matched {
        println!("feature {:>5}: {}", c.feature, c.description);
    }
    for h in &report.hits {
        println!("{}\t{:.4}", h.sample_id, h.similarity);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report rows from `eval` or `sweep` (JSON lines)
    #[arg(long)]
    pub results: PathBuf,
    /// Ranking from `sweep`; recomputed from the results when absent
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    /// `retrieval.json` from `retrieve`
    #[arg(long)]
    pub retrieval: Option<PathBuf>,
    /// `interp_summary.json` from `interpret`
    #[arg(long)]
    pub interp: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn report(_cfg: FileConfig, args: ReportArgs) -> Result<()> {
    let results: Vec<ConfigResult> = read_jsonl(&args.results)?;
    if results.is_empty() {
        return Err(Error::Invalid(format!("{} has no rows", args.results.display())));
    }
    let ranking: Vec<RankedConfig> = match &args.ranking {
        Some(p) => read_jsonl(p)?,
        None => metrics::rank_configs(&results)?,
    };
    let retrieval_report: Option<RetrievalReport> = args.retrieval.as_deref().map(read_json).transpose()?;
    let summary: Option<interp::RankSummary> = args.interp.as_deref().map(read_json).transpose()?;
    create_dir(&args.out)?;
    let mut m = ManifestBuilder::new("report", serde_json::Value::Null);
    m.input("results", &args.results);
    if let Some(p) = &args.ranking {
        m.input("ranking", p);
    }

    let mut tables = String::new();
    tables.push_str("# Configurations\n");
    tables.push_str(&report::results_table(&results, &ranking));
    tables.push_str("\n# Combined ranking\n");
    tables.push_str(&report::ranking_table(&ranking));

    let families = report::families(&results);
    type Metric = (&'static str, &'static str, fn(&ConfigResult) -> f64);
    let charts: [Metric; 4] = [
        ("r2_vs_l0.svg", "R2", |r| r.r2),
        ("auc_vs_l0.svg", "sparse probe AUC", |r| r.sparse_auc),
        ("alive_vs_l0.svg", "alive features", |r| r.alive as f64),
        ("m_vs_l0.svg", "M (top-10 mean)", |r| r.m_config),
    ];
    for (file, label, f) in charts {
        let svg = report::scatter_svg(&format!("{label} vs mean L0"), "mean L0", label, &report::by_family(&results, &families, f), false);
        let p = args.out.join(file);
        fs::write(&p, svg).map_err(|e| Error::io(p.display().to_string(), e))?;
        m.output(&p);
    }

    if let (Some(p), Some(rr)) = (&args.retrieval, &retrieval_report) {
        m.input("retrieval", p);
        tables.push_str("\n# Fingerprint retrieval\n");
        tables.push_str(&report::retrieval_table(&rr.eval));
        let sparse = report::Series {
            label: "fingerprint",
            points: rr.eval.by_k.iter().map(|(&k, &q)| (k as f64, q)).collect(),
        };
        let dense = report::Series {
            label: "dense",
            points: rr.eval.by_k.keys().map(|&k| (k as f64, rr.eval.dense)).collect(),
        };
        let svg = report::scatter_svg("retrieval quality vs k", "k", "quality", &[sparse, dense], true);
        let path = args.out.join("retrieval_vs_k.svg");
        fs::write(&path, svg).map_err(|e| Error::io(path.display().to_string(), e))?;
        m.output(&path);
    }
    if let (Some(p), Some(summary)) = (&args.interp, &summary) {
        m.input("interp", p);
        tables.push_str("\n# Judge ranks\n");
        tables.push_str(&report::interp_table(summary));
    }
    let tables_path = args.out.join(TABLES_FILE);
    fs::write(&tables_path, &tables).map_err(|e| Error::io(tables_path.display().to_string(), e))?;
    m.output(&tables_path);
    m.write(&args.out)?;
    print!("{tables}");
    Ok(())
}
