//! Synthetic support transcripts and the dataset formatting used by both
//! training stages.
//!
//! Pre-training text annotates every message with its role and joins
//! messages with newlines. Fine-tuning inputs drop the role annotations,
//! join with a single space and keep whole messages newest-first until the
//! token budget is spent.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::unit_hash;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0}")]
    Contract(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(CorpusError::Contract(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Customer,
    System,
    Advocate,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::Customer => "<CUSTOMER>",
            Role::System => "<SYSTEM>",
            Role::Advocate => "<ADVOCATE>",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Customer => "CUSTOMER",
            Role::System => "SYSTEM",
            Role::Advocate => "ADVOCATE",
        })
    }
}

impl FromStr for Role {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CUSTOMER" => Ok(Role::Customer),
            "SYSTEM" => Ok(Role::System),
            "ADVOCATE" => Ok(Role::Advocate),
            other => contract(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<u32>,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            template_id: None,
        }
    }

    pub fn template(id: u32, text: impl Into<String>) -> Self {
        Self {
            role: Role::Advocate,
            text: text.into(),
            template_id: Some(id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub case_id: String,
    pub messages: Vec<Message>,
    /// Generator intent, kept only for diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<u32>,
}

impl Transcript {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.messages.first() else {
            return contract(format!("case {} has no messages", self.case_id));
        };
        if first.role != Role::Customer {
            return contract(format!("case {} does not open with a customer message", self.case_id));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.template_id.is_some() && m.role != Role::Advocate)
        {
            return contract(format!(
                "case {}: template id on a {} message",
                self.case_id, m.role
            ));
        }
        Ok(())
    }

    /// Indices of advocate messages that carry a template id.
    pub fn labeled_replies(&self) -> impl Iterator<Item = usize> + '_ {
        self.messages
            .iter()
            .enumerate()
            .filter(|(i, m)| *i > 0 && m.template_id.is_some())
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateCatalog {
    texts: Vec<String>,
}

impl TemplateCatalog {
    pub fn new(texts: Vec<String>) -> Result<Self> {
        if texts.is_empty() {
            return contract("template catalog is empty");
        }
        Ok(Self { texts })
    }

    /// Catalog whose texts mention the keywords of the intent each template
    /// answers. Template `2i` asks for details on intent `i`, `2i + 1`
    /// resolves it.
    pub fn synthetic(n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return contract("template catalog is empty");
        }
        let texts = (0..n_classes)
            .map(|t| {
                let intent = t / 2;
                let (a, b) = (keyword(intent, 0), keyword(intent, 1));
                if t % 2 == 0 {
                    format!("Thanks for reaching out about your {a} {b}. Could you share a few more details so I can look into it?")
                } else {
                    format!("I have updated your {a} {b} and everything should be working now. Is there anything else I can help with?")
                }
            })
            .collect();
        Self::new(texts)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, id: u32) -> Option<&str> {
        self.texts.get(id as usize).map(String::as_str)
    }

    pub fn n_intents(&self) -> usize {
        self.texts.len().div_ceil(2)
    }

    /// Templates that answer an intent, in reply order.
    pub fn templates_for_intent(&self, intent: usize) -> (u32, u32) {
        let ask = (2 * intent) as u32;
        let resolve = if 2 * intent + 1 < self.texts.len() { ask + 1 } else { ask };
        (ask, resolve)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "text"])?;
        for (i, t) in self.texts.iter().enumerate() {
            w.write_record([i.to_string().as_str(), t.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut texts = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let id: usize = rec
                .get(0)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CorpusError::Contract(format!("catalog row {}: bad id", i + 1)))?;
            if id != i {
                return contract(format!("catalog ids must be dense: row {} has id {id}", i + 1));
            }
            texts.push(rec.get(1).unwrap_or_default().to_string());
        }
        Self::new(texts)
    }
}

const SYLLABLES: [&str; 16] = [
    "ba", "ke", "lo", "mi", "nu", "pa", "ro", "si", "ta", "vu", "da", "fe", "gi", "ho", "ju", "ze",
];
/// Keywords per intent.
pub const KEYWORDS_PER_INTENT: usize = 4;

/// Pseudo-word unique to `(intent, slot)` for up to 1024 intents.
pub fn keyword(intent: usize, slot: usize) -> String {
    let w = (intent * KEYWORDS_PER_INTENT + slot) % 4096;
    let p = (w * 1237 + 411) % 4096;
    let mut s = String::with_capacity(6);
    for digit in [p / 256, (p / 16) % 16, p % 16] {
        s.push_str(SYLLABLES[digit]);
    }
    s
}

const OPENERS: [&str; 4] = [
    "hi i need help with my {a} {b}",
    "question about the {a} and {b} please",
    "why is my {a} {b} not working",
    "hello, something is wrong with {a} {b} today",
];
const FOLLOW_UPS: [&str; 4] = ["Ty", "ok thanks", "hello?", "are you there"];
const DETAILS: [&str; 3] = [
    "it is the {a} on my {b} from {n} days ago",
    "sure, the {a} shows {n} and the {b} is missing",
    "i tried the {a} {n} times but {b} still fails",
];
const CLOSINGS: [&str; 3] = ["No, that's it, Thanks!", "thank you", "all good now"];
pub const SYSTEM_GREETING: &str =
    "Hi <NAME>, I'll get you to someone who can help. You don't have to wait. We'll notify you when they reply.";

/// Generates `n_cases` transcripts. With probability `ambiguity` each
/// customer keyword is borrowed from a different random intent.
pub fn generate_corpus(
    seed: u64,
    n_cases: usize,
    catalog: &TemplateCatalog,
    ambiguity: f64,
) -> Result<Vec<Transcript>> {
    if n_cases == 0 {
        return contract("n_cases must be at least 1");
    }
    if !(0.0..=1.0).contains(&ambiguity) {
        return contract(format!("ambiguity {ambiguity} outside [0, 1]"));
    }
    let n_intents = catalog.n_intents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_cases);
    for c in 0..n_cases {
        let intent = rng.random_range(0..n_intents);
        let mut draw = |rng: &mut ChaCha8Rng| -> String {
            let owner = if n_intents > 1 && rng.random::<f64>() < ambiguity {
                let other = rng.random_range(0..n_intents - 1);
                if other >= intent {
                    other + 1
                } else {
                    other
                }
            } else {
                intent
            };
            keyword(owner, rng.random_range(0..KEYWORDS_PER_INTENT))
        };
        let fill = |pattern: &str, rng: &mut ChaCha8Rng, draw: &mut dyn FnMut(&mut ChaCha8Rng) -> String| {
            let a = draw(rng);
            let b = draw(rng);
            let n = rng.random_range(2..60u32);
            pattern
                .replace("{a}", &a)
                .replace("{b}", &b)
                .replace("{n}", &n.to_string())
        };
        let (ask, resolve) = catalog.templates_for_intent(intent);
        let mut messages = Vec::with_capacity(8);
        let opener = OPENERS[rng.random_range(0..OPENERS.len())];
        messages.push(Message::new(Role::Customer, fill(opener, &mut rng, &mut draw)));
        messages.push(Message::new(Role::System, SYSTEM_GREETING));
        if rng.random::<f64>() < 0.5 {
            let f = FOLLOW_UPS[rng.random_range(0..FOLLOW_UPS.len())];
            messages.push(Message::new(Role::Customer, f));
        }
        messages.push(Message::template(ask, catalog.text(ask).unwrap_or_default()));
        let detail = DETAILS[rng.random_range(0..DETAILS.len())];
        messages.push(Message::new(Role::Customer, fill(detail, &mut rng, &mut draw)));
        messages.push(Message::template(resolve, catalog.text(resolve).unwrap_or_default()));
        let closing = CLOSINGS[rng.random_range(0..CLOSINGS.len())];
        messages.push(Message::new(Role::Customer, closing));
        out.push(Transcript {
            case_id: format!("case-{seed:x}-{c:07}"),
            messages,
            intent: Some(intent as u32),
        });
    }
    Ok(out)
}

/// Role-annotated, newline-joined rendering used for pre-training.
pub fn format_pretraining(t: &Transcript) -> String {
    t.messages
        .iter()
        .map(|m| format!("{}: {}", m.role.marker(), m.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainSequence {
    pub token_ids: Vec<u32>,
}

/// Concatenates `doc EOT doc EOT ...` and slices the stream into windows of
/// exactly `context_length` ids. The ragged tail is dropped.
pub fn pack_sequences(docs: &[Vec<u32>], context_length: usize, eot: u32) -> Result<Vec<PretrainSequence>> {
    if context_length < 2 {
        return contract(format!("context length {context_length} < 2"));
    }
    let total: usize = docs.iter().map(|d| d.len() + 1).sum();
    let mut stream = Vec::with_capacity(total);
    for d in docs {
        stream.extend_from_slice(d);
        stream.push(eot);
    }
    Ok(stream
        .chunks_exact(context_length)
        .map(|w| PretrainSequence { token_ids: w.to_vec() })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub case_id: String,
    pub token_ids: Vec<u32>,
    pub label: u32,
}

/// Prefix-free context for a reply: whole messages, newest first, joined by
/// a single space, while the encoding fits in `max_len` tokens. A newest
/// message that alone exceeds the budget keeps its last `max_len` tokens.
pub fn truncate_context<S: AsRef<str>>(texts: &[S], max_len: usize, vocab: &Vocab) -> Result<Vec<u32>> {
    if texts.is_empty() {
        return contract("no context messages");
    }
    if max_len == 0 {
        return contract("max_len must be positive");
    }
    let mut best: Option<Vec<u32>> = None;
    for n in 1..=texts.len() {
        let joined = texts[texts.len() - n..]
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" ");
        let ids = vocab.encode(&joined);
        if ids.len() > max_len {
            break;
        }
        best = Some(ids);
    }
    let ids = match best {
        Some(ids) => ids,
        None => {
            let ids = vocab.encode(texts[texts.len() - 1].as_ref());
            ids[ids.len() - max_len..].to_vec()
        }
    };
    if ids.is_empty() {
        return contract("context encodes to zero tokens");
    }
    Ok(ids)
}

pub fn build_classification_example(
    t: &Transcript,
    reply_index: usize,
    max_len: usize,
    vocab: &Vocab,
) -> Result<ClassificationExample> {
    if reply_index == 0 || reply_index >= t.messages.len() {
        return contract(format!(
            "reply index {reply_index} has no prior messages in case {}",
            t.case_id
        ));
    }
    let Some(label) = t.messages[reply_index].template_id else {
        return contract(format!(
            "message {reply_index} of case {} carries no template",
            t.case_id
        ));
    };
    let texts: Vec<&str> = t.messages[..reply_index].iter().map(|m| m.text.as_str()).collect();
    Ok(ClassificationExample {
        case_id: t.case_id.clone(),
        token_ids: truncate_context(&texts, max_len, vocab)?,
        label,
    })
}

/// Every labeled reply of every transcript as a classification example.
pub fn build_examples(transcripts: &[Transcript], max_len: usize, vocab: &Vocab) -> Result<Vec<ClassificationExample>> {
    let mut out = Vec::new();
    for t in transcripts {
        for i in t.labeled_replies() {
            out.push(build_classification_example(t, i, max_len, vocab)?);
        }
    }
    Ok(out)
}

/// Case-level split keyed by a hash of `(seed, case_id)`.
pub fn split_by_case<T: HasCaseId + Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return contract(format!("train fraction {train_fraction} outside (0, 1)"));
    }
    let salt = seed.to_le_bytes();
    let (train, test) = items
        .iter()
        .cloned()
        .partition(|x| unit_hash(&salt, x.case_id()) < train_fraction);
    Ok((train, test))
}

pub trait HasCaseId {
    fn case_id(&self) -> &str;
}

impl HasCaseId for ClassificationExample {
    fn case_id(&self) -> &str {
        &self.case_id
    }
}

impl HasCaseId for Transcript {
    fn case_id(&self) -> &str {
        &self.case_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub token_ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Replaces `max(1, round(rate * len))` uniformly chosen positions with
/// `mask_id`, returning the originals as targets.
pub fn mask_tokens(seq: &[u32], mask_rate: f64, seed: u64, mask_id: u32) -> Result<MaskedSequence> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return contract(format!("mask rate {mask_rate} outside (0, 1)"));
    }
    if seq.is_empty() {
        return contract("cannot mask an empty sequence");
    }
    let n = ((mask_rate * seq.len() as f64).round() as usize).clamp(1, seq.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = index::sample(&mut rng, seq.len(), n).into_vec();
    positions.sort_unstable();
    let mut token_ids = seq.to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut token_ids[p], mask_id))
        .collect();
    Ok(MaskedSequence {
        token_ids,
        positions,
        targets,
    })
}

pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| CorpusError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<()> {
    write_ndjson(path, transcripts)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    let ts: Vec<Transcript> = read_ndjson(path)?;
    for t in &ts {
        t.validate()?;
    }
    Ok(ts)
}
