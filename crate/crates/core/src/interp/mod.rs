//! Automated feature interpretation.
//!
//! For each selected feature a dossier of its top activating samples is
//! built, a generator client describes the shared concept from five
//! dissimilar exemplars, and an independent judge client ranks the true
//! description against four descriptions of other features. Clients see
//! metadata and image references only.

mod client;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{FeatureActivationTable, FeatureScore};
use crate::pool::bounded_map;
use crate::store::EmbeddingDataset;

pub use client::{make_client, ChatClient, ChatMessage, ClientConfig, HttpClient, MockClient};

pub const DOSSIER_TOP: usize = 20;
pub const EXEMPLARS: usize = 5;
pub const CANDIDATES: usize = 5;
pub const DEFAULT_CONCURRENCY: usize = 4;
const LABELS: [char; CANDIDATES] = ['A', 'B', 'C', 'D', 'E'];

/// Top `n` features by `M`, ties to the lower index.
pub fn select_features_for_interp(scores: &[FeatureScore], n: usize) -> Vec<usize> {
    let mut s: Vec<&FeatureScore> = scores.iter().collect();
    s.sort_by(|a, b| b.m.total_cmp(&a.m).then(a.feature.cmp(&b.feature)));
    s.into_iter().take(n).map(|f| f.feature).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

/// Max-min greedy selection. `ids[0]` is the highest-activating candidate
/// and is always picked first; returns positions into `ids`.
pub fn greedy_dissimilar(ids: &[String], vectors: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    if ids.is_empty() || m == 0 {
        return Err(Error::Invalid("greedy selection needs candidates and m >= 1".into()));
    }
    if ids.len() != vectors.len() {
        return Err(Error::Shape(format!("{} ids, {} vectors", ids.len(), vectors.len())));
    }
    let mut chosen = vec![0usize];
    let mut max_sim: Vec<f64> = vectors.iter().map(|v| cosine(v, &vectors[0])).collect();
    while chosen.len() < m.min(ids.len()) {
        let next = (0..ids.len())
            .filter(|i| !chosen.contains(i))
            .min_by(|&a, &b| max_sim[a].total_cmp(&max_sim[b]).then(ids[a].cmp(&ids[b])))
            .expect("candidates remain");
        chosen.push(next);
        for (i, s) in max_sim.iter_mut().enumerate() {
            *s = s.max(cosine(&vectors[i], &vectors[next]));
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDossier {
    pub feature: usize,
    pub top_ids: Vec<String>,
    pub exemplar_ids: Vec<String>,
    pub modality_counts: BTreeMap<String, usize>,
    pub organ_histogram: BTreeMap<String, usize>,
    pub age_histogram: BTreeMap<String, usize>,
    pub sex_histogram: BTreeMap<String, usize>,
}

pub fn build_dossier(feature: usize, table: &FeatureActivationTable, dataset: &EmbeddingDataset) -> Result<FeatureDossier> {
    let top = table.top_samples(feature, DOSSIER_TOP);
    if top.is_empty() {
        return Err(Error::Invalid(format!("feature {feature} never activates")));
    }
    let ids: Vec<String> = top.iter().map(|&(r, _)| dataset.record(r).sample_id().to_owned()).collect();
    let vectors: Vec<Vec<f64>> = top
        .iter()
        .map(|&(r, _)| dataset.record(r).embedding.iter().map(|&v| v as f64).collect())
        .collect();
    let picks = greedy_dissimilar(&ids, &vectors, EXEMPLARS)?;

    let mut d = FeatureDossier {
        feature,
        exemplar_ids: picks.iter().map(|&p| ids[p].clone()).collect(),
        top_ids: ids,
        modality_counts: BTreeMap::new(),
        organ_histogram: BTreeMap::new(),
        age_histogram: BTreeMap::new(),
        sex_histogram: BTreeMap::new(),
    };
    for &(r, _) in &top {
        let m = &dataset.record(r).meta;
        *d.modality_counts.entry(m.modality.as_str().to_owned()).or_default() += 1;
        for o in &m.organs {
            *d.organ_histogram.entry(o.clone()).or_default() += 1;
        }
        *d.age_histogram.entry(or_unknown(&m.age_group).to_owned()).or_default() += 1;
        *d.sex_histogram.entry(m.sex.as_str().to_owned()).or_default() += 1;
    }
    Ok(d)
}

fn or_unknown(s: &str) -> &str {
    if s.trim().is_empty() {
        "unknown"
    } else {
        s
    }
}

/// Image reference for a sample: an `image` or `image_path` metadata key,
/// else the sample id.
fn image_ref(dataset: &EmbeddingDataset, id: &str) -> String {
    let Some(i) = dataset.index_of(id) else {
        return id.to_owned();
    };
    let extra = &dataset.record(i).meta.extra;
    ["image", "image_path"]
        .iter()
        .find_map(|k| extra.get(*k).and_then(|v| v.as_str()).map(str::to_owned))
        .unwrap_or_else(|| id.to_owned())
}

fn exemplar_lines(dossier: &FeatureDossier, dataset: &EmbeddingDataset) -> String {
    let mut out = String::new();
    for id in &dossier.exemplar_ids {
        let (modality, organs, age, sex) = match dataset.index_of(id) {
            Some(i) => {
                let m = &dataset.record(i).meta;
                let organs = if m.organs.is_empty() {
                    "unknown".to_owned()
                } else {
                    m.organs.iter().cloned().collect::<Vec<_>>().join(", ")
                };
                (m.modality.as_str(), organs, or_unknown(&m.age_group).to_owned(), m.sex.as_str())
            }
            None => ("unknown", "unknown".to_owned(), "unknown".to_owned(), "unknown"),
        };
        out.push_str(&format!(
            "- image: {} | modality: {modality} | organs: {organs} | age group: {age} | sex: {sex}\n",
            image_ref(dataset, id)
        ));
    }
    out
}

pub fn build_concept_prompt(dossier: &FeatureDossier, dataset: &EmbeddingDataset) -> String {
    format!(
        "The medical images below all strongly activate one sparse feature.\n\
         Name the single visual or clinical concept they share, considering \
         modality, orientation, anatomy and demographics.\n\n\
         Exemplars:\n{}\n\
         Answer with exactly one sentence describing the shared concept.\n",
        exemplar_lines(dossier, dataset)
    )
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub feature: usize,
    pub description: String,
    pub model: String,
    pub prompt_hash: String,
}

/// First sentence of a completion, trimmed.
pub fn first_sentence(text: &str) -> String {
    let t = text.trim();
    let mut chars = t.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|(_, n)| n.is_whitespace()) {
            return t[..i + c.len_utf8()].to_owned();
        }
    }
    t.to_owned()
}

pub fn generate_concept(client: &dyn ChatClient, dossier: &FeatureDossier, dataset: &EmbeddingDataset) -> Result<ConceptRecord> {
    let prompt = build_concept_prompt(dossier, dataset);
    let reply = client.complete(&[ChatMessage::user(prompt.clone())])?;
    let description = first_sentence(&reply);
    if description.is_empty() {
        return Err(Error::ModelOutput(format!("empty concept for feature {}", dossier.feature)));
    }
    Ok(ConceptRecord {
        feature: dossier.feature,
        description,
        model: client.model().to_owned(),
        prompt_hash: prompt_hash(&prompt),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeTrial {
    pub feature: usize,
    pub candidates: Vec<String>,
    /// Feature each candidate describes.
    pub candidate_features: Vec<usize>,
    /// 1-based position of the true description.
    pub truth_position: usize,
    /// Rank the judge gave the true description, 1 = best.
    pub returned_rank: Option<usize>,
}

/// True description plus four distractors with distinct descriptions,
/// seeded per feature.
pub fn build_judge_trial(feature: usize, concepts: &[ConceptRecord], seed: u64) -> Result<JudgeTrial> {
    let truth = concepts
        .iter()
        .find(|c| c.feature == feature)
        .ok_or_else(|| Error::Invalid(format!("no concept for feature {feature}")))?;
    let mut seen = BTreeSet::from([truth.description.as_str()]);
    let mut pool: Vec<&ConceptRecord> = Vec::new();
    let mut others: Vec<&ConceptRecord> = concepts.iter().filter(|c| c.feature != feature).collect();
    others.sort_by_key(|c| c.feature);
    for c in others {
        if seen.insert(c.description.as_str()) {
            pool.push(c);
        }
    }
    if pool.len() < CANDIDATES - 1 {
        return Err(Error::Invalid(format!(
            "judge trial needs {} distinct other descriptions, found {}",
            CANDIDATES - 1,
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(feature as u64);
    let mut picked: Vec<&ConceptRecord> = pool.choose_multiple(&mut rng, CANDIDATES - 1).copied().collect();
    picked.push(truth);
    picked.shuffle(&mut rng);
    let truth_position = picked.iter().position(|c| c.feature == feature).expect("truth included") + 1;
    Ok(JudgeTrial {
        feature,
        candidates: picked.iter().map(|c| c.description.clone()).collect(),
        candidate_features: picked.iter().map(|c| c.feature).collect(),
        truth_position,
        returned_rank: None,
    })
}

pub fn build_judge_prompt(trial: &JudgeTrial, dossier: &FeatureDossier, dataset: &EmbeddingDataset) -> String {
    let mut cands = String::new();
    for (label, c) in LABELS.iter().zip(&trial.candidates) {
        cands.push_str(&format!("{label}. {c}\n"));
    }
    format!(
        "The medical images below all strongly activate one sparse feature.\n\
         Rank the five candidate descriptions from best to worst match.\n\n\
         Exemplars:\n{}\n\
         Candidates:\n{cands}\n\
         Answer with the five letters A-E from best to worst, separated by commas, and nothing else.\n",
        exemplar_lines(dossier, dataset)
    )
}

/// Parses a permutation of `A`-`E`, e.g. `B, A, C, D, E`.
pub fn parse_ranking(text: &str) -> Option<Vec<char>> {
    let letters: Vec<char> = text
        .trim()
        .split(',')
        .map(|s| {
            let s = s.trim();
            let mut c = s.chars();
            match (c.next(), c.next()) {
                (Some(l), None) => Some(l.to_ascii_uppercase()),
                _ => None,
            }
        })
        .collect::<Option<_>>()?;
    let set: BTreeSet<char> = letters.iter().copied().collect();
    (letters.len() == CANDIDATES && set.iter().copied().eq(LABELS)).then_some(letters)
}

const REASK: &str = "Your previous answer did not follow the required format. Reply again following the format exactly.";

/// Sends `prompt`, and on unparseable output asks once more.
fn ask_parsed<T>(client: &dyn ChatClient, prompt: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = client.complete(&messages)?;
    if let Some(v) = parse(&first) {
        return Ok(v);
    }
    messages.push(ChatMessage {
        role: "assistant".into(),
        content: first,
    });
    messages.push(ChatMessage::user(format!("{REASK}\n\n{prompt}")));
    let second = client.complete(&messages)?;
    parse(&second).ok_or_else(|| Error::ModelOutput(format!("after one retry: {second:?}")))
}

pub fn judge_rank(
    client: &dyn ChatClient,
    trial: &JudgeTrial,
    dossier: &FeatureDossier,
    dataset: &EmbeddingDataset,
) -> Result<usize> {
    let prompt = build_judge_prompt(trial, dossier, dataset);
    let order = ask_parsed(client, &prompt, parse_ranking)?;
    let truth = LABELS[trial.truth_position - 1];
    Ok(order.iter().position(|&l| l == truth).expect("permutation") + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub mean_rank: f64,
    /// Counts of ranks 1..=5.
    pub histogram: [usize; CANDIDATES],
}

pub fn mean_rank_from_histogram(histogram: &[usize; CANDIDATES]) -> Result<f64> {
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return Err(Error::Invalid("empty rank histogram".into()));
    }
    let total: usize = histogram.iter().enumerate().map(|(i, c)| (i + 1) * c).sum();
    Ok(total as f64 / n as f64)
}

pub fn aggregate_ranks(trials: &[JudgeTrial]) -> Result<RankSummary> {
    let mut histogram = [0usize; CANDIDATES];
    for t in trials {
        match t.returned_rank {
            Some(r @ 1..=CANDIDATES) => histogram[r - 1] += 1,
            _ => return Err(Error::Invalid(format!("trial for feature {} has no valid rank", t.feature))),
        }
    }
    Ok(RankSummary {
        mean_rank: mean_rank_from_histogram(&histogram)?,
        histogram,
    })
}

pub fn build_match_prompt(query: &str, concepts: &[ConceptRecord]) -> String {
    let mut catalog = String::new();
    for (i, c) in concepts.iter().enumerate() {
        catalog.push_str(&format!("{}. {}\n", i + 1, c.description));
    }
    format!(
        "Clinical query: {query}\n\n\
         Concept catalog:\n{catalog}\n\
         List the numbers of every concept that matches the query, separated by commas, or NONE if none match.\n"
    )
}

fn parse_matches(text: &str, catalog_len: usize) -> Option<Vec<usize>> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("none") {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for part in t.split(',') {
        let n: usize = part.trim().parse().ok()?;
        if n == 0 || n > catalog_len {
            return None;
        }
        if !out.contains(&n) {
            out.push(n);
        }
    }
    Some(out)
}

/// Features whose concepts the client matches to `query`, in the client's
/// order, at most `max_matches`.
pub fn match_concepts(
    client: &dyn ChatClient,
    query: &str,
    concepts: &[ConceptRecord],
    max_matches: usize,
) -> Result<Vec<usize>> {
    if concepts.is_empty() {
        return Err(Error::Invalid("empty concept catalog".into()));
    }
    let prompt = build_match_prompt(query, concepts);
    let nums = ask_parsed(client, &prompt, |t| parse_matches(t, concepts.len()))?;
    Ok(nums
        .into_iter()
        .take(max_matches)
        .map(|n| concepts[n - 1].feature)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpOutput {
    pub dossiers: Vec<FeatureDossier>,
    pub concepts: Vec<ConceptRecord>,
    pub trials: Vec<JudgeTrial>,
    pub summary: RankSummary,
}

/// Dossiers, concepts, judge trials and their aggregate for `features`.
pub fn interpret(
    features: &[usize],
    table: &FeatureActivationTable,
    dataset: &EmbeddingDataset,
    generator: &dyn ChatClient,
    judge: &dyn ChatClient,
    seed: u64,
    concurrency: usize,
) -> Result<InterpOutput> {
    if generator.identity() == judge.identity() {
        return Err(Error::Config(format!(
            "generator and judge must be distinct clients, both are {}",
            generator.identity()
        )));
    }
    let dossiers: Vec<FeatureDossier> = features
        .iter()
        .map(|&f| build_dossier(f, table, dataset))
        .collect::<Result<_>>()?;
    let concepts = bounded_map(&dossiers, concurrency, |d| generate_concept(generator, d, dataset))?;
    let mut trials: Vec<JudgeTrial> = features
        .iter()
        .map(|&f| build_judge_trial(f, &concepts, seed))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&JudgeTrial, &FeatureDossier)> = trials.iter().zip(&dossiers).collect();
    let ranks = bounded_map(&pairs, concurrency, |(t, d)| judge_rank(judge, t, d, dataset))?;
    for (t, r) in trials.iter_mut().zip(ranks) {
        t.returned_rank = Some(r);
    }
    let summary = aggregate_ranks(&trials)?;
    Ok(InterpOutput {
        dossiers,
        concepts,
        trials,
        summary,
    })
}
