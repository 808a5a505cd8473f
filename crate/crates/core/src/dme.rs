//! Description-aware mention enhancement.
//!
//! Three steps per mention: retrieve same-name entity descriptions from a
//! knowledge base, have an LLM backend pick the description that best fits
//! the mention context, and append that description to the context. Runs
//! once as a preprocessing pass; selections are cached so re-runs never hit
//! the backend.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MentionRecord};
use crate::error::{Error, Result};
use crate::hash;

/// One knowledge-base entry sharing the mention's surface name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionCandidate {
    pub qid: String,
    /// May be empty; some KB entries lack descriptions.
    pub description: String,
}

/// The backend's pick for one mention, plus how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSelection {
    pub chosen_index: usize,
    pub chosen: DescriptionCandidate,
    pub backend_id: String,
    /// True when the reply could not be parsed and candidate 0 was used.
    pub fallback_used: bool,
}

/// Knowledge-base lookup by surface name.
pub trait KbClient: Sync {
    fn lookup(&self, label: &str) -> Result<Vec<DescriptionCandidate>>;
}

/// Completion backend. `backend_id` must be stable across a run; it is part
/// of every cache key, so swapping backends never reuses stale selections.
pub trait LlmBackend: Sync {
    fn backend_id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Offline KB fixture: one JSON record per line {"label", "qid", "description"}.
/// Candidates come back in file order. Lookups never fail.
pub struct FixtureKb {
    by_label: HashMap<String, Vec<DescriptionCandidate>>,
}

impl FixtureKb {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            label: String,
            qid: String,
            description: String,
        }
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut by_label: HashMap<String, Vec<DescriptionCandidate>> = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line)
                .map_err(|e| Error::parse(&display, lineno + 1, e.to_string()))?;
            by_label
                .entry(row.label)
                .or_default()
                .push(DescriptionCandidate {
                    qid: row.qid,
                    description: row.description,
                });
        }
        Ok(FixtureKb { by_label })
    }

    pub fn from_rows(rows: Vec<(String, DescriptionCandidate)>) -> Self {
        let mut by_label: HashMap<String, Vec<DescriptionCandidate>> = HashMap::new();
        for (label, cand) in rows {
            by_label.entry(label).or_default().push(cand);
        }
        FixtureKb { by_label }
    }
}

impl KbClient for FixtureKb {
    fn lookup(&self, label: &str) -> Result<Vec<DescriptionCandidate>> {
        Ok(self.by_label.get(label).cloned().unwrap_or_default())
    }
}

/// Deterministic stand-in for a hosted LLM: the reply is a pure function of
/// (prompt, seed). It picks a candidate index by hashing the prompt.
pub struct MockBackend {
    seed: u64,
    id: String,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            id: format!("mock-{seed}"),
        }
    }
}

impl LlmBackend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let n = count_candidate_lines(prompt).max(1);
        let pick = (hash::fnv1a64(prompt.as_bytes()) ^ self.seed) % n as u64 + 1;
        Ok(pick.to_string())
    }
}

fn count_candidate_lines(prompt: &str) -> usize {
    prompt
        .lines()
        .filter(|l| {
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            digits > 0 && l[digits..].starts_with(". ")
        })
        .count()
}

/// Test backend that replays a fixed list of replies, then errors.
pub struct ScriptedBackend {
    id: String,
    replies: Mutex<std::collections::VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, replies: Vec<String>) -> Self {
        ScriptedBackend {
            id: id.into(),
            replies: Mutex::new(replies.into()),
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, _prompt: &str) -> Result<String> {
        self.replies
            .lock()
            .expect("scripted backend lock")
            .pop_front()
            .ok_or_else(|| Error::Backend("scripted backend exhausted".into()))
    }
}

/// Plain HTTP/1.1 backend (no TLS). POSTs {"model", "prompt"} as JSON and
/// expects {"text": "..."} back. `endpoint` must be an http:// URL.
pub struct HttpBackend {
    host: String,
    port: u16,
    path: String,
    model: String,
    id: String,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: impl Into<String>) -> Result<Self> {
        let rest = endpoint.strip_prefix("http://").ok_or_else(|| {
            Error::Argument(format!(
                "endpoint must start with http:// (got {endpoint:?})"
            ))
        })?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>()
                    .map_err(|_| Error::Argument(format!("bad port in {endpoint:?}")))?,
            ),
            None => (authority.to_string(), 80),
        };
        let model = model.into();
        let id = format!("http-{host}:{port}-{model}");
        Ok(HttpBackend {
            host,
            port,
            path,
            model,
            id,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "model": self.model, "prompt": prompt }).to_string();
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            body.len(),
            body
        );
        let addr = format!("{}:{}", self.host, self.port);
        let mut stream = std::net::TcpStream::connect(&addr)
            .map_err(|e| Error::Backend(format!("connect {addr}: {e}")))?;
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::Backend(format!("send: {e}")))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| Error::Backend(format!("recv: {e}")))?;
        let text = String::from_utf8_lossy(&raw);
        let (head, payload) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Backend("malformed http response".into()))?;
        let status = head.lines().next().unwrap_or_default();
        if !status.contains(" 200") {
            return Err(Error::Backend(format!("http status: {status}")));
        }
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let reply: Reply = serde_json::from_str(payload.trim())
            .map_err(|e| Error::Backend(format!("bad reply body: {e}")))?;
        Ok(reply.text)
    }
}

type CacheKey = (String, String, String); // (mention_word, context hash hex, backend_id)

/// Selection cache keyed by (mention_word, context hash, backend id).
/// Safe for concurrent get/put; identical keys always carry identical values
/// by construction, so last-write-wins is harmless.
#[derive(Default)]
pub struct EnhancementCache {
    inner: Mutex<CacheInner>,
}

#[derive(Default)]
struct CacheInner {
    map: HashMap<CacheKey, CandidateSelection>,
    hits: usize,
    misses: usize,
}

/// Cache file row, one JSON record per line.
#[derive(Serialize, Deserialize)]
struct CacheRow {
    key: (String, String, String),
    chosen_index: usize,
    qid: String,
    description: String,
    fallback: bool,
}

impl EnhancementCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Context digest used in keys: FNV-1a 64 as fixed-width hex ("fnv1a64").
    pub fn context_hash(context: &str) -> String {
        hash::fnv1a64_hex(context)
    }

    pub fn get(
        &self,
        mention_word: &str,
        context: &str,
        backend_id: &str,
    ) -> Option<CandidateSelection> {
        let key = (
            mention_word.to_string(),
            Self::context_hash(context),
            backend_id.to_string(),
        );
        let mut inner = self.inner.lock().expect("cache lock");
        match inner.map.get(&key).cloned() {
            Some(v) => {
                inner.hits += 1;
                Some(v)
            }
            None => {
                inner.misses += 1;
                None
            }
        }
    }

    pub fn put(&self, mention_word: &str, context: &str, selection: &CandidateSelection) {
        let key = (
            mention_word.to_string(),
            Self::context_hash(context),
            selection.backend_id.clone(),
        );
        let mut inner = self.inner.lock().expect("cache lock");
        inner.map.insert(key, selection.clone());
    }

    /// (hits, misses) counted over `get` calls.
    pub fn stats(&self) -> (usize, usize) {
        let inner = self.inner.lock().expect("cache lock");
        (inner.hits, inner.misses)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut map = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CacheRow = serde_json::from_str(&line)
                .map_err(|e| Error::parse(&display, lineno + 1, e.to_string()))?;
            let selection = CandidateSelection {
                chosen_index: row.chosen_index,
                chosen: DescriptionCandidate {
                    qid: row.qid,
                    description: row.description,
                },
                backend_id: row.key.2.clone(),
                fallback_used: row.fallback,
            };
            map.insert(row.key, selection);
        }
        Ok(EnhancementCache {
            inner: Mutex::new(CacheInner {
                map,
                hits: 0,
                misses: 0,
            }),
        })
    }

    /// Rows are written in sorted key order so saves are byte-reproducible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let inner = self.inner.lock().expect("cache lock");
        let mut keys: Vec<&CacheKey> = inner.map.keys().collect();
        keys.sort();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(&display, e))?,
        );
        for key in keys {
            let sel = &inner.map[key];
            let row = CacheRow {
                key: key.clone(),
                chosen_index: sel.chosen_index,
                qid: sel.chosen.qid.clone(),
                description: sel.chosen.description.clone(),
                fallback: sel.fallback_used,
            };
            let line = serde_json::to_string(&row).expect("cache row serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(&display, e))?;
        }
        out.flush().map_err(|e| Error::io(&display, e))
    }
}

/// Knobs for ranking and split enhancement, normally taken from `RunConfig`.
#[derive(Debug, Clone)]
pub struct DmeOptions {
    pub separator: String,
    /// enhance_split fails once the per-record error fraction exceeds this.
    pub error_threshold: f64,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub jobs: usize,
}

impl Default for DmeOptions {
    fn default() -> Self {
        DmeOptions {
            separator: "[SEP]".into(),
            error_threshold: 0.1,
            retry_attempts: 3,
            retry_backoff_ms: 100,
            jobs: 1,
        }
    }
}

impl DmeOptions {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        DmeOptions {
            separator: cfg.separator.clone(),
            error_threshold: cfg.dme_error_threshold,
            retry_attempts: cfg.retry_attempts,
            retry_backoff_ms: cfg.retry_backoff_ms,
            jobs: cfg.max_inflight.max(1),
        }
    }
}

/// Same-name candidates for a mention word, in KB order. May be empty.
pub fn retrieve_candidates(
    mention_word: &str,
    kb: &dyn KbClient,
) -> Result<Vec<DescriptionCandidate>> {
    if mention_word.is_empty() {
        return Err(Error::Argument("mention_word is empty".into()));
    }
    kb.lookup(mention_word)
}

/// Prompt listing each candidate as a numbered "i. qid: description" line,
/// ending with a single-index answer instruction.
pub fn build_ranking_prompt(
    mention_word: &str,
    context: &str,
    candidates: &[DescriptionCandidate],
) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::Argument("candidate list is empty".into()));
    }
    let mut prompt = String::new();
    prompt.push_str(
        "Task: pick the knowledge-base description that best matches the mention in its context.\n",
    );
    prompt.push_str(&format!("Mention word: {mention_word}\n"));
    prompt.push_str(&format!("Context: {context}\n"));
    prompt.push_str("Candidates:\n");
    for (i, c) in candidates.iter().enumerate() {
        prompt.push_str(&format!("{}. {}: {}\n", i + 1, c.qid, c.description));
    }
    prompt.push_str(&format!(
        "Answer with exactly one index between 1 and {}, and nothing else.",
        candidates.len()
    ));
    Ok(prompt)
}

/// First run of ASCII digits in the reply, if any.
fn parse_first_integer(reply: &str) -> Option<usize> {
    let start = reply.find(|c: char| c.is_ascii_digit())?;
    let digits: String = reply[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Ask the backend to rank `candidates`, with caching and transport retries.
/// Unparsable or out-of-range replies fall back to candidate 0.
pub fn rank_descriptions(
    mention_word: &str,
    context: &str,
    candidates: &[DescriptionCandidate],
    backend: &dyn LlmBackend,
    cache: &EnhancementCache,
    options: &DmeOptions,
) -> Result<CandidateSelection> {
    if candidates.is_empty() {
        return Err(Error::Argument("candidate list is empty".into()));
    }
    if let Some(hit) = cache.get(mention_word, context, backend.backend_id()) {
        return Ok(hit);
    }
    let prompt = build_ranking_prompt(mention_word, context, candidates)?;
    let reply = complete_with_retries(backend, &prompt, options)?;
    let (chosen_index, fallback_used) = match parse_first_integer(&reply) {
        Some(n) if n >= 1 && n <= candidates.len() => (n - 1, false),
        _ => (0, true),
    };
    let selection = CandidateSelection {
        chosen_index,
        chosen: candidates[chosen_index].clone(),
        backend_id: backend.backend_id().to_string(),
        fallback_used,
    };
    cache.put(mention_word, context, &selection);
    Ok(selection)
}

fn complete_with_retries(
    backend: &dyn LlmBackend,
    prompt: &str,
    options: &DmeOptions,
) -> Result<String> {
    let attempts = options.retry_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        match backend.complete(prompt) {
            Ok(reply) => return Ok(reply),
            Err(e) => {
                last = Some(e);
                if attempt + 1 < attempts && options.retry_backoff_ms > 0 {
                    let wait = options.retry_backoff_ms << attempt;
                    std::thread::sleep(std::time::Duration::from_millis(wait));
                }
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Copy of `record` with `enhanced_context = context + " " + sep + " " + description`
/// (trailing separator only when the description is empty). Re-enhancing an
/// already-enhanced record is rejected.
pub fn enhance_mention(
    record: &MentionRecord,
    selection: &CandidateSelection,
    separator: &str,
) -> Result<MentionRecord> {
    if record.enhanced_context.is_some() {
        return Err(Error::Argument(format!(
            "mention {:?} is already enhanced",
            record.id
        )));
    }
    let enhanced = if selection.chosen.description.is_empty() {
        format!("{} {}", record.context, separator)
    } else {
        format!(
            "{} {} {}",
            record.context, separator, selection.chosen.description
        )
    };
    let mut out = record.clone();
    out.enhanced_context = Some(enhanced);
    Ok(out)
}

/// Per-split enhancement outcome counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub total: usize,
    pub enhanced: usize,
    /// Mentions with zero KB candidates; passed through with
    /// enhanced_context = context.
    pub no_candidates: usize,
    pub fallbacks: usize,
    pub errors: usize,
}

/// Enhance every mention of a split. Mentions without candidates pass
/// through unchanged (enhanced_context set to the bare context). Fails only
/// when the per-record error fraction exceeds `options.error_threshold`.
pub fn enhance_split(
    split: &DatasetSplit,
    kb: &dyn KbClient,
    backend: &dyn LlmBackend,
    cache: &EnhancementCache,
    options: &DmeOptions,
) -> Result<(DatasetSplit, EnhanceReport)> {
    enum Outcome {
        Enhanced { fallback: bool },
        NoCandidates,
        Failed(Error),
    }

    let process = |record: &MentionRecord| -> (MentionRecord, Outcome) {
        let candidates = match retrieve_candidates(&record.mention_word, kb) {
            Ok(c) => c,
            Err(e) => return (record.clone(), Outcome::Failed(e)),
        };
        if candidates.is_empty() {
            let mut out = record.clone();
            out.enhanced_context = Some(record.context.clone());
            return (out, Outcome::NoCandidates);
        }
        let selection = match rank_descriptions(
            &record.mention_word,
            &record.context,
            &candidates,
            backend,
            cache,
            options,
        ) {
            Ok(s) => s,
            Err(e) => return (record.clone(), Outcome::Failed(e)),
        };
        match enhance_mention(record, &selection, &options.separator) {
            Ok(out) => (
                out,
                Outcome::Enhanced {
                    fallback: selection.fallback_used,
                },
            ),
            Err(e) => (record.clone(), Outcome::Failed(e)),
        }
    };

    let records = split.mentions();
    let jobs = options.jobs.max(1).min(records.len().max(1));
    let mut slots: Vec<Option<(MentionRecord, Outcome)>> = Vec::new();
    slots.resize_with(records.len(), || None);

    if jobs <= 1 {
        for (i, record) in records.iter().enumerate() {
            slots[i] = Some(process(record));
        }
    } else {
        let chunk = records.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            for (slot_chunk, record_chunk) in slots.chunks_mut(chunk).zip(records.chunks(chunk)) {
                let process = &process;
                scope.spawn(move || {
                    for (slot, record) in slot_chunk.iter_mut().zip(record_chunk) {
                        *slot = Some(process(record));
                    }
                });
            }
        });
    }

    let mut report = EnhanceReport {
        total: records.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(records.len());
    let mut first_error = None;
    for slot in slots {
        let (record, outcome) = slot.expect("all slots filled");
        match outcome {
            Outcome::Enhanced { fallback } => {
                report.enhanced += 1;
                if fallback {
                    report.fallbacks += 1;
                }
            }
            Outcome::NoCandidates => report.no_candidates += 1,
            Outcome::Failed(e) => {
                report.errors += 1;
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
        out.push(record);
    }

    let fraction = if report.total == 0 {
        0.0
    } else {
        report.errors as f64 / report.total as f64
    };
    if fraction > options.error_threshold {
        let cause = first_error.expect("errors imply a first error");
        return Err(Error::Backend(format!(
            "enhancement error fraction {fraction:.3} exceeds threshold {:.3}; first error: {cause}",
            options.error_threshold
        )));
    }
    let split = DatasetSplit::new(split.split_name(), out)?;
    Ok((split, report))
}
