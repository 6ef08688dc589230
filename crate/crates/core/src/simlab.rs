//! Deterministic stand-in language model with planted memorization.
//!
//! The simulator stores, for every planted sample, the task input and its
//! canonical output. A prompt is matched to the nearest stored input by
//! character-level normalized edit similarity `s`:
//!
//! * memorized, `s >= cliff`: the canonical output, verbatim;
//! * memorized, `s < cliff`: length-matched noise from a vocabulary disjoint
//!   from every planted text;
//! * not memorized: the canonical output with each token swapped for noise
//!   with probability `degradation_rate * (1 - s)`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use async_trait::async_trait;
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapidfuzz::distance::levenshtein;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_completion, Label, Sample, TaskKind, TaskSpec};
use crate::modelgw::{template_parts, Backend, BackendKind, GatewayError, Generation};

pub const DEFAULT_CLIFF_THRESHOLD: f64 = 0.999;
pub const DEFAULT_DEGRADATION_RATE: f64 = 0.5;
/// Prompts farther than this from every stored input are rejected.
pub const MIN_MATCH_SIMILARITY: f64 = 0.5;
pub const SOURCE_TAG: &str = "simlab";
const CANDIDATES: usize = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulator parameter out of range: {0}")]
    BadParameter(String),
    #[error("no stored input within similarity {MIN_MATCH_SIMILARITY} of the prompt")]
    UnknownSample,
    #[error("cannot plant {n_memorized} memorized samples in a corpus of {n_total}")]
    BadCounts { n_total: usize, n_memorized: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEntry {
    pub sample_id: String,
    /// Task input the model was "trained" on (prefix or full text).
    pub prefix: String,
    /// Canonical output for that input.
    pub continuation: String,
    pub memorized: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimModel {
    pub entries: Vec<SimEntry>,
    pub background_vocab: Vec<String>,
    pub cliff_threshold: f64,
    pub degradation_rate: f64,
    pub seed: u64,
    /// Template used to build prompts; its fixed text is stripped before
    /// matching.
    pub prompt_template: String,
    #[serde(skip)]
    index: LookupIndex,
}

impl PartialEq for SimModel {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.background_vocab == other.background_vocab
            && self.cliff_threshold == other.cliff_threshold
            && self.degradation_rate == other.degradation_rate
            && self.seed == other.seed
            && self.prompt_template == other.prompt_template
    }
}

#[derive(Debug, Clone, Default)]
struct LookupIndex {
    exact: HashMap<String, usize>,
    bigrams: HashMap<(String, String), Vec<usize>>,
}

impl LookupIndex {
    fn build(entries: &[SimEntry]) -> Self {
        let mut idx = LookupIndex::default();
        for (i, e) in entries.iter().enumerate() {
            idx.exact.entry(e.prefix.clone()).or_insert(i);
            let toks: Vec<&str> = e.prefix.split_whitespace().collect();
            for w in toks.windows(2) {
                let ids = idx.bigrams.entry((w[0].to_string(), w[1].to_string())).or_default();
                if ids.last() != Some(&i) {
                    ids.push(i);
                }
            }
        }
        idx
    }
}

/// Normalized character-level similarity `1 - lev(a, b) / max(|a|, |b|)`.
pub fn char_similarity(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let longest = la.max(lb);
    if longest == 0 {
        return 1.0;
    }
    let d = levenshtein::distance(a.chars(), b.chars());
    1.0 - d as f64 / longest as f64
}

impl SimModel {
    pub fn new(
        entries: Vec<SimEntry>,
        background_vocab: Vec<String>,
        cliff_threshold: f64,
        degradation_rate: f64,
        seed: u64,
        prompt_template: String,
    ) -> Result<Self, SimError> {
        let mut model = SimModel {
            entries,
            background_vocab,
            cliff_threshold,
            degradation_rate,
            seed,
            prompt_template,
            index: LookupIndex::default(),
        };
        model.validate()?;
        model.index = LookupIndex::build(&model.entries);
        Ok(model)
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.cliff_threshold > 0.0 && self.cliff_threshold < 1.0) {
            return Err(SimError::BadParameter(format!("cliff threshold {} not in (0, 1)", self.cliff_threshold)));
        }
        if !(0.0..=1.0).contains(&self.degradation_rate) {
            return Err(SimError::BadParameter(format!("degradation rate {} not in [0, 1]", self.degradation_rate)));
        }
        if self.background_vocab.is_empty() {
            return Err(SimError::BadParameter("empty background vocabulary".into()));
        }
        Ok(())
    }

    pub fn memorized_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.memorized).map(|e| e.sample_id.as_str())
    }

    pub fn entry(&self, sample_id: &str) -> Option<&SimEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("model serializes");
        std::fs::write(path, text).map_err(|e| SimError::Manifest {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let err = |reason: String| SimError::Manifest {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut model: SimModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        model.validate()?;
        model.index = LookupIndex::build(&model.entries);
        Ok(model)
    }

    /// The task input portion of a prompt built from `prompt_template`.
    pub fn task_input<'a>(&self, prompt: &'a str) -> &'a str {
        match template_parts(&self.prompt_template) {
            Some((head, tail)) if prompt.len() >= head.len() + tail.len() => prompt
                .strip_prefix(head)
                .and_then(|p| p.strip_suffix(tail))
                .unwrap_or(prompt),
            _ => prompt,
        }
    }

    /// Nearest stored entry and its similarity to `input`.
    pub fn nearest(&self, input: &str) -> Result<(usize, f64), SimError> {
        if let Some(&i) = self.index.exact.get(input) {
            return Ok((i, 1.0));
        }
        let mut votes: HashMap<usize, usize> = HashMap::new();
        let toks: Vec<&str> = input.split_whitespace().collect();
        for w in toks.windows(2) {
            if let Some(ids) = self.index.bigrams.get(&(w[0].to_string(), w[1].to_string())) {
                for &i in ids {
                    *votes.entry(i).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(usize, usize)> = votes.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let best = ranked
            .iter()
            .take(CANDIDATES)
            .map(|&(i, _)| (i, char_similarity(input, &self.entries[i].prefix)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((i, s)) if s >= MIN_MATCH_SIMILARITY => Ok((i, s)),
            _ => Err(SimError::UnknownSample),
        }
    }

    fn noise_token<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a str {
        self.background_vocab.choose(rng).expect("vocabulary is non-empty")
    }

    fn respond(&self, entry: &SimEntry, similarity: f64, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.seed.rotate_left(29));
        if entry.memorized {
            if similarity >= self.cliff_threshold {
                return entry.continuation.clone();
            }
            let n = entry.continuation.split_whitespace().count().max(1);
            return (0..n).map(|_| self.noise_token(&mut rng)).collect::<Vec<_>>().join(" ");
        }
        let p = self.degradation_rate * (1.0 - similarity);
        if p <= 0.0 {
            return entry.continuation.clone();
        }
        entry
            .continuation
            .split_whitespace()
            .map(|tok| if rng.random_bool(p.min(1.0)) { self.noise_token(&mut rng) } else { tok })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn generate_many(&self, prompt: &str, seeds: &[u64]) -> Result<Vec<String>, SimError> {
        if prompt.is_empty() {
            return Err(SimError::EmptyPrompt);
        }
        let (i, s) = self.nearest(self.task_input(prompt))?;
        let entry = &self.entries[i];
        Ok(seeds.iter().map(|&seed| self.respond(entry, s, seed)).collect())
    }
}

pub fn sim_generate(model: &SimModel, prompt: &str, seed: u64) -> Result<String, SimError> {
    Ok(model.generate_many(prompt, &[seed])?.remove(0))
}

#[derive(Debug, Clone)]
pub struct PlantOptions {
    pub task: TaskKind,
    pub split_fraction: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub content_vocab_size: usize,
    pub background_vocab_size: usize,
    pub cliff_threshold: f64,
    pub degradation_rate: f64,
    pub prompt_template: Option<String>,
}

impl Default for PlantOptions {
    fn default() -> Self {
        PlantOptions {
            task: TaskKind::Completion,
            split_fraction: crate::corpus::DEFAULT_SPLIT_FRACTION,
            min_tokens: 300,
            max_tokens: 360,
            content_vocab_size: 4000,
            background_vocab_size: 1000,
            cliff_threshold: DEFAULT_CLIFF_THRESHOLD,
            degradation_rate: DEFAULT_DEGRADATION_RATE,
            prompt_template: None,
        }
    }
}

impl PlantOptions {
    pub fn task_spec(&self) -> TaskSpec {
        let mut task = TaskSpec::for_kind(self.task);
        task.split_fraction = self.split_fraction;
        if let Some(t) = &self.prompt_template {
            task.prompt_template = t.clone();
        }
        task
    }
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const UPPER_DIGIT: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Lowercase letters only.
fn content_vocab(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < size {
        let len = rng.random_range(2..=8);
        let w: String = (0..len).map(|_| *LOWER.choose(rng).unwrap() as char).collect();
        seen.insert(w);
    }
    let mut v: Vec<String> = seen.into_iter().collect();
    // Fixed order, then a seeded shuffle so frequent ranks are random words.
    let order = index::sample(rng, v.len(), v.len()).into_vec();
    let mut shuffled = Vec::with_capacity(v.len());
    for i in order {
        shuffled.push(std::mem::take(&mut v[i]));
    }
    shuffled
}

/// Upper-case letters and at least one digit: disjoint from content words
/// even after lowercasing.
fn background_vocab(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < size {
        let len = rng.random_range(3..=7);
        let mut w: Vec<u8> = (0..len).map(|_| *UPPER_DIGIT.choose(rng).unwrap()).collect();
        let pos = rng.random_range(0..len);
        w[pos] = b'0' + rng.random_range(0..10u8);
        seen.insert(String::from_utf8(w).unwrap());
    }
    seen.into_iter().collect()
}

/// Every fourth token of the text: the simulator's canonical summary.
pub fn canonical_summary(text: &str) -> String {
    text.split_whitespace().step_by(4).collect::<Vec<_>>().join(" ")
}

/// Generate `n_total` synthetic samples and a simulator that has memorized
/// a seeded random subset of `n_memorized` of them.
pub fn plant_corpus(
    n_total: usize,
    n_memorized: usize,
    seed: u64,
    options: &PlantOptions,
) -> Result<(Vec<Sample>, SimModel), SimError> {
    if n_memorized > n_total {
        return Err(SimError::BadCounts { n_total, n_memorized });
    }
    if options.min_tokens < 2 || options.min_tokens > options.max_tokens {
        return Err(SimError::BadParameter(format!(
            "token range {}..={} invalid",
            options.min_tokens, options.max_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = content_vocab(&mut rng, options.content_vocab_size.max(16));
    let noise = background_vocab(&mut rng, options.background_vocab_size.max(16));
    let memorized: std::collections::BTreeSet<usize> = index::sample(&mut rng, n_total, n_memorized).into_iter().collect();
    let width = n_total.max(1).to_string().len().max(5);
    let task = options.task_spec();

    let mut samples = Vec::with_capacity(n_total);
    let mut entries = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let n_tokens = rng.random_range(options.min_tokens..=options.max_tokens);
        // Zipf-like skew: squaring a uniform draw favors low ranks.
        let text = (0..n_tokens)
            .map(|_| {
                let u: f64 = rng.random();
                vocab[((u * u) * vocab.len() as f64) as usize].as_str()
            })
            .collect::<Vec<_>>()
            .join(" ");
        let is_mem = memorized.contains(&i);
        let sample = Sample::new(format!("sim-{i:0width$}"), SOURCE_TAG, text)
            .with_label(if is_mem { Label::Positive } else { Label::Negative });
        let (prefix, continuation) = match options.task {
            TaskKind::Completion => {
                let split = split_completion(&sample, options.split_fraction)
                    .map_err(|e| SimError::BadParameter(e.to_string()))?;
                (split.input_x, split.reference_y)
            }
            TaskKind::Summarization => (sample.text.clone(), canonical_summary(&sample.text)),
        };
        entries.push(SimEntry {
            sample_id: sample.id.clone(),
            prefix,
            continuation,
            memorized: is_mem,
        });
        samples.push(sample);
    }
    let model = SimModel::new(
        entries,
        noise,
        options.cliff_threshold,
        options.degradation_rate,
        seed,
        task.prompt_template,
    )?;
    Ok((samples, model))
}

/// Simulator wired in as a gateway backend.
pub struct SimBackend {
    model: SimModel,
}

impl SimBackend {
    pub fn new(model: SimModel) -> Self {
        SimBackend { model }
    }

    pub fn model(&self) -> &SimModel {
        &self.model
    }
}

#[async_trait]
impl Backend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulator
    }

    async fn complete_batch(
        &self,
        prompt: &str,
        seeds: &[u64],
        _temperature: f64,
        _max_output_chars: usize,
    ) -> Result<Vec<Generation>, GatewayError> {
        Ok(self
            .model
            .generate_many(prompt, seeds)?
            .into_iter()
            .map(|text| Generation { text, latency_ms: 0 })
            .collect())
    }
}

/// Per-sample ground truth, keyed by id.
pub fn ground_truth(model: &SimModel) -> BTreeMap<String, bool> {
    model.entries.iter().map(|e| (e.sample_id.clone(), e.memorized)).collect()
}
