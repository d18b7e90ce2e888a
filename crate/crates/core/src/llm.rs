//! Prompt construction, instruction-tuning data export, item attribute
//! extraction, and the pluggable text-generation backend (deterministic
//! mock or generic HTTP).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Catalog, DomainId, Item, SplitDataset, UserSequence};

pub const PROMPT_TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("item {0} has no title")]
    MissingTitle(u32),
    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },
    #[error("backend {backend}: giving up after {attempts} attempts: {message}")]
    RetriesExhausted { backend: String, attempts: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("user {0} has no retrieval neighbor")]
    MissingNeighbor(u32),
}

/// A rendered prompt plus the metadata the pipeline carried while
/// building it. Backends receive the whole struct; the HTTP backend sends
/// only `text`, mock backends may inspect the metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub user_id: u32,
    pub domain: DomainId,
    pub retrieved_user_ids: Vec<u32>,
    /// Set when retrieval produced nothing and the block was left out.
    pub retrieval_block_omitted: bool,
}

fn titles(events: &[u32], catalog: &Catalog) -> Result<String, LlmError> {
    let mut parts = Vec::with_capacity(events.len());
    for &id in events {
        if !catalog.contains(id) {
            return Err(LlmError::MissingTitle(id));
        }
        parts.push(catalog.title(id).to_string());
    }
    Ok(parts.join(", "))
}

/// Renders the recommendation prompt: the retrieved-user block (when any)
/// followed by the target-user block, titles in chronological order, with
/// the instruction line naming the target domain.
pub fn build_inference_prompt(
    user: &UserSequence,
    retrieved: &[UserSequence],
    domain: DomainId,
    catalog: &Catalog,
) -> Result<Prompt, LlmError> {
    let user_items = titles(&user.events, catalog)?;
    let mut text = format!("You are a shopping assistant for domain {domain} products.\n");
    if !retrieved.is_empty() {
        let blocks: Result<Vec<String>, LlmError> =
            retrieved.iter().map(|r| titles(&r.events, catalog)).collect();
        text.push_str(&format!(
            "There are similar users who bought these items: {}\n",
            blocks?.join("; ")
        ));
    }
    text.push_str(&format!("The user has bought these items: {user_items}\n"));
    text.push_str(&format!(
        "Predict the one domain {domain} product the user buys next. Answer with the product title only."
    ));
    Ok(Prompt {
        text,
        user_id: user.user_id,
        domain,
        retrieved_user_ids: retrieved.iter().map(|r| r.user_id).collect(),
        retrieval_block_omitted: retrieved.is_empty(),
    })
}

/// Text-generation backend contract. Mock implementations must be pure
/// functions of `(prompt, seed)`.
pub trait GenerationBackend {
    fn generate(&self, prompt: &Prompt, max_tokens: usize, seed: Option<u64>) -> Result<String, LlmError>;
    fn identity(&self) -> String;
}

/// Deterministic offline backend. `Echo` answers with the last title in
/// the user block (a plausible-looking stand-in for a tuned model);
/// `Fixed` always answers the same text; `Scripted` maps exact prompt
/// texts to canned replies.
pub enum MockBackend {
    Echo,
    Fixed(String),
    Scripted { replies: BTreeMap<String, String>, fallback: String },
}

impl MockBackend {
    fn last_user_item(prompt: &str) -> Option<String> {
        let line = prompt.lines().find(|l| l.starts_with("The user has bought these items: "))?;
        let items = line.strip_prefix("The user has bought these items: ")?;
        items.rsplit(", ").next().map(str::to_string)
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, prompt: &Prompt, _max_tokens: usize, _seed: Option<u64>) -> Result<String, LlmError> {
        match self {
            MockBackend::Echo => Ok(Self::last_user_item(&prompt.text).unwrap_or_default()),
            MockBackend::Fixed(text) => Ok(text.clone()),
            MockBackend::Scripted { replies, fallback } => {
                Ok(replies.get(&prompt.text).cloned().unwrap_or_else(|| fallback.clone()))
            }
        }
    }

    fn identity(&self) -> String {
        match self {
            MockBackend::Echo => "mock:echo".into(),
            MockBackend::Fixed(_) => "mock:fixed".into(),
            MockBackend::Scripted { .. } => "mock:scripted".into(),
        }
    }
}

/// Generic HTTP backend: `POST {"prompt": str, "max_tokens": int}` and a
/// `{"text": str}` reply.
pub struct HttpBackend {
    url: String,
    timeout: Duration,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>) -> Self {
        HttpBackend { url: url.into(), timeout: Duration::from_secs(30) }
    }

    pub fn with_timeout(url: impl Into<String>, timeout: Duration) -> Self {
        HttpBackend { url: url.into(), timeout }
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct HttpReply {
    text: String,
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, prompt: &Prompt, max_tokens: usize, _seed: Option<u64>) -> Result<String, LlmError> {
        let wrap = |message: String| LlmError::Backend { backend: self.identity(), message };
        let mut response = ureq::post(&self.url)
            .config()
            .timeout_global(Some(self.timeout))
            .build()
            .send_json(HttpRequest { prompt: &prompt.text, max_tokens })
            .map_err(|e| wrap(e.to_string()))?;
        let reply: HttpReply = response.body_mut().read_json().map_err(|e| wrap(e.to_string()))?;
        Ok(reply.text)
    }

    fn identity(&self) -> String {
        format!("http:{}", self.url)
    }
}

/// Outcome of a generation call, with latency and retry accounting.
#[derive(Clone, Debug)]
pub struct GenerationOutcome {
    pub text: String,
    pub latency: Duration,
    pub attempts: usize,
}

/// Calls the backend with bounded retries (3 attempts, exponential
/// backoff). Errors after the final attempt surface as
/// [`LlmError::RetriesExhausted`]; callers fall back to the sequence
/// model's own ranking.
pub fn generate_recommendation(
    prompt: &Prompt,
    backend: &dyn GenerationBackend,
    max_tokens: usize,
    seed: Option<u64>,
) -> Result<GenerationOutcome, LlmError> {
    generate_with_backoff(prompt, backend, max_tokens, seed, 3, Duration::from_millis(200))
}

pub fn generate_with_backoff(
    prompt: &Prompt,
    backend: &dyn GenerationBackend,
    max_tokens: usize,
    seed: Option<u64>,
    max_attempts: usize,
    backoff: Duration,
) -> Result<GenerationOutcome, LlmError> {
    let start = std::time::Instant::now();
    let mut last = String::new();
    for attempt in 1..=max_attempts {
        match backend.generate(prompt, max_tokens, seed) {
            Ok(text) => {
                return Ok(GenerationOutcome { text, latency: start.elapsed(), attempts: attempt })
            }
            Err(e) => {
                last = e.to_string();
                log::warn!("generation attempt {attempt}/{max_attempts} failed: {last}");
                if attempt < max_attempts {
                    std::thread::sleep(backoff * 2u32.pow(attempt as u32 - 1));
                }
            }
        }
    }
    Err(LlmError::RetriesExhausted {
        backend: backend.identity(),
        attempts: max_attempts,
        message: last,
    })
}

/// One exported instruction-tuning record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuningExample {
    pub prompt: String,
    pub completion: String,
}

/// Adapter-tuning settings recorded alongside the export; the tuning run
/// itself happens outside this artifact.
#[derive(Serialize)]
struct TuningMeta<'a> {
    examples: usize,
    template_version: &'a str,
    lora_rank: u32,
    lora_alpha: u32,
    learning_rate: f64,
}

/// Writes one `{"prompt": ..., "completion": ...}` line per (user,
/// next-item) training pair, pairing each user with their rank-2
/// retrieval neighbor's history. Users are visited in ascending id order
/// so identical inputs produce byte-identical files. Returns the count.
pub fn export_tuning_dataset(
    split: &SplitDataset,
    neighbors: &BTreeMap<u32, u32>,
    catalog: &Catalog,
    path: &Path,
) -> Result<usize, LlmError> {
    let io = |source: std::io::Error| LlmError::Io { path: path.display().to_string(), source };
    let by_id: BTreeMap<u32, &UserSequence> = split.train.iter().map(|s| (s.user_id, s)).collect();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut count = 0usize;
    for (&user_id, seq) in &by_id {
        if seq.events.len() < 2 {
            continue;
        }
        let input = &seq.events[..seq.events.len() - 1];
        let target = seq.events[seq.events.len() - 1];
        let neighbor_id = *neighbors.get(&user_id).ok_or(LlmError::MissingNeighbor(user_id))?;
        let neighbor = by_id.get(&neighbor_id).ok_or(LlmError::MissingNeighbor(neighbor_id))?;
        let domain = catalog.domain_of(target);
        let prompt = build_inference_prompt(
            &UserSequence { user_id, events: input.to_vec() },
            std::slice::from_ref(*neighbor),
            domain,
            catalog,
        )?;
        let record =
            TuningExample { prompt: prompt.text, completion: catalog.title(target).to_string() };
        serde_json::to_writer(&mut file, &record).expect("record serializes");
        file.write_all(b"\n").map_err(io)?;
        count += 1;
    }
    file.flush().map_err(io)?;

    let meta = TuningMeta {
        examples: count,
        template_version: PROMPT_TEMPLATE_VERSION,
        lora_rank: 8,
        lora_alpha: 16,
        learning_rate: 1e-4,
    };
    let meta_path = path.with_extension("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|source| LlmError::Io { path: meta_path.display().to_string(), source })?;
    Ok(count)
}

fn attribute_prompt(text: String, domain: DomainId) -> Prompt {
    Prompt { text, user_id: 0, domain, retrieved_user_ids: Vec::new(), retrieval_block_omitted: true }
}

/// Two-call protocol: ask the backend to introduce the item, then to list
/// its attributes given that introduction. Output is split on commas and
/// newlines, trimmed, lowercased, and deduplicated; an unusable reply
/// degrades to an empty list with a warning (the item stays isolated in
/// the attribute graph).
pub fn extract_attributes(item: &Item, backend: &dyn GenerationBackend) -> Result<Vec<String>, LlmError> {
    let intro_prompt = attribute_prompt(
        format!("Write a one sentence introduction of the product \"{}\".", item.title),
        item.domain,
    );
    let intro = backend.generate(&intro_prompt, 128, None)?;
    let attr_prompt = attribute_prompt(
        format!(
            "{intro}\nGiven the introduction, list the attributes of the product \"{}\" as a comma separated list.",
            item.title
        ),
        item.domain,
    );
    let reply = backend.generate(&attr_prompt, 64, None)?;
    let attrs = parse_attribute_reply(&reply);
    if attrs.is_empty() && !reply.trim().is_empty() {
        log::warn!("item {}: attribute reply {reply:?} parsed to nothing", item.id);
    }
    Ok(attrs)
}

/// Comma/newline separated attribute parsing: trim, lowercase, dedup.
pub fn parse_attribute_reply(reply: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for raw in reply.split([',', '\n', ';']) {
        let cleaned = raw.trim().trim_matches(['"', '\'', '.']).trim().to_lowercase();
        if cleaned.is_empty() {
            continue;
        }
        if seen.insert(cleaned.clone()) {
            out.push(cleaned);
        }
    }
    out
}
