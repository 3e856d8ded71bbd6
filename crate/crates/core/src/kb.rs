//! Knowledge records, knowledge bases, and synthetic knowledge-base expansion.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed knowledge base: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {index}: invalid field `{field}`: {reason}")]
    Schema {
        index: usize,
        field: String,
        reason: String,
    },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("target size {target} is smaller than the base knowledge base ({base} records)")]
    TargetTooSmall { target: usize, base: usize },
    #[error("distractor pool too small: need {needed} more records, only {available} usable (shortfall {shortfall})")]
    Capacity {
        needed: usize,
        available: usize,
        shortfall: usize,
    },
}

/// Normalizes surface strings for entity matching and deduplication.
///
/// Lowercases, treats underscores and punctuation as word separators, drops
/// apostrophes, and collapses whitespace. The mapping is idempotent.
#[derive(Debug, Clone, Copy, Default)]
pub struct Canonicalizer;

impl Canonicalizer {
    pub fn canonicalize(&self, text: &str) -> String {
        canonicalize(text)
    }
}

pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbScope {
    Session,
    Dataset,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: String,
    pub domain: String,
    pub slots: Vec<(String, String)>,
}

impl KnowledgeRecord {
    /// Builds a record, rejecting repeated slot names and values that are empty after
    /// canonicalization. Errors carry index 0; loaders rewrite it.
    pub fn new(
        id: impl Into<String>,
        domain: impl Into<String>,
        slots: Vec<(String, String)>,
    ) -> Result<Self, KbError> {
        let record = Self {
            id: id.into(),
            domain: domain.into(),
            slots,
        };
        record.validate(0)?;
        Ok(record)
    }

    fn validate(&self, index: usize) -> Result<(), KbError> {
        let schema = |field: &str, reason: &str| KbError::Schema {
            index,
            field: field.to_string(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(schema("id", "empty record id"));
        }
        let mut seen = HashSet::new();
        for (name, value) in &self.slots {
            if !seen.insert(name.as_str()) {
                return Err(schema(&format!("slots.{name}"), "repeated slot name"));
            }
            if canonicalize(value).is_empty() {
                return Err(schema(&format!("slots.{name}"), "empty value"));
            }
        }
        Ok(())
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.slots
            .iter()
            .find(|(name, _)| name == slot)
            .map(|(_, value)| value.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|(_, v)| v.as_str())
    }

    pub fn linearize(&self) -> String {
        linearize_record(self)
    }

    /// Key under which value-identical records collapse when knowledge bases merge.
    pub fn dedup_key(&self) -> (String, Vec<(String, String)>) {
        (
            self.domain.clone(),
            self.slots
                .iter()
                .map(|(n, v)| (canonicalize(n), canonicalize(v)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizeStyle {
    /// `peking restaurant, chinese, south, expensive`
    #[default]
    Values,
    /// `name=peking restaurant, food=chinese, ...`
    SlotValue,
}

pub fn linearize_record(record: &KnowledgeRecord) -> String {
    linearize_with(record, LinearizeStyle::Values)
}

pub fn linearize_with(record: &KnowledgeRecord, style: LinearizeStyle) -> String {
    match style {
        LinearizeStyle::Values => record
            .slots
            .iter()
            .map(|(_, v)| v.trim())
            .collect::<Vec<_>>()
            .join(", "),
        LinearizeStyle::SlotValue => record
            .slots
            .iter()
            .map(|(n, v)| format!("{}={}", n.trim(), v.trim()))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    records: Vec<KnowledgeRecord>,
    scope: KbScope,
    by_id: HashMap<String, usize>,
    entity_lexicon: BTreeSet<String>,
}

impl KnowledgeBase {
    pub fn new(records: Vec<KnowledgeRecord>, scope: KbScope) -> Result<Self, KbError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (index, record) in records.iter().enumerate() {
            record.validate(index)?;
            if by_id.insert(record.id.clone(), index).is_some() {
                return Err(KbError::DuplicateId(record.id.clone()));
            }
        }
        let entity_lexicon = records
            .iter()
            .flat_map(|r| r.values().map(canonicalize))
            .collect();
        Ok(Self {
            records,
            scope,
            by_id,
            entity_lexicon,
        })
    }

    pub fn empty(scope: KbScope) -> Self {
        Self {
            records: Vec::new(),
            scope,
            by_id: HashMap::new(),
            entity_lexicon: BTreeSet::new(),
        }
    }

    pub fn records(&self) -> &[KnowledgeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scope(&self) -> KbScope {
        self.scope
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn entity_lexicon(&self) -> &BTreeSet<String> {
        &self.entity_lexicon
    }

    pub fn with_scope(mut self, scope: KbScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn to_file(&self) -> KbFile {
        KbFile {
            scope: self.scope,
            records: self
                .records
                .iter()
                .map(|r| KbFileRecord {
                    id: r.id.clone(),
                    domain: r.domain.clone(),
                    slots: r.slots.clone(),
                })
                .collect(),
        }
    }
}

/// On-disk knowledge base schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbFile {
    pub scope: KbScope,
    pub records: Vec<KbFileRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KbFileRecord {
    pub id: String,
    pub domain: String,
    pub slots: Vec<(String, String)>,
}

impl KbFile {
    pub fn into_kb(self) -> Result<KnowledgeBase, KbError> {
        let records = self
            .records
            .into_iter()
            .map(|r| KnowledgeRecord {
                id: r.id,
                domain: r.domain,
                slots: r.slots,
            })
            .collect();
        KnowledgeBase::new(records, self.scope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KbFormat {
    /// `{"scope": ..., "records": [{"id", "domain", "slots": [[name, value], ...]}]}`
    SessionJson,
    /// A JSON array of SMD-style dialogues, each carrying its own `kb` block.
    DatasetJson,
}

pub fn load_kb(path: impl AsRef<Path>, format: KbFormat) -> Result<KnowledgeBase, KbError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kb(&text, format)
}

pub fn parse_kb(text: &str, format: KbFormat) -> Result<KnowledgeBase, KbError> {
    let value: Value = serde_json::from_str(text)?;
    match format {
        KbFormat::SessionJson => kb_from_value(&value),
        KbFormat::DatasetJson => {
            let dialogues = value.as_array().ok_or_else(|| KbError::Schema {
                index: 0,
                field: "<root>".into(),
                reason: "expected an array of dialogues".into(),
            })?;
            let mut records = Vec::new();
            for (d, dialogue) in dialogues.iter().enumerate() {
                let domain = smd_domain(dialogue).unwrap_or("unknown").to_string();
                let kb = dialogue
                    .get("kb")
                    .or_else(|| dialogue.pointer("/scenario/kb"))
                    .unwrap_or(&Value::Null);
                let items = smd_kb_records(kb, &domain, &format!("d{d}"))?;
                records.extend(items);
            }
            KnowledgeBase::new(records, KbScope::Dataset)
        }
    }
}

/// Parses a knowledge base in the native schema, with per-record error positions.
pub fn kb_from_value(value: &Value) -> Result<KnowledgeBase, KbError> {
    let scope = match value.get("scope") {
        None | Some(Value::Null) => KbScope::Session,
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| KbError::Schema {
            index: 0,
            field: "scope".into(),
            reason: format!("unknown scope {v}"),
        })?,
    };
    let raw = match value.get("records") {
        Some(Value::Array(items)) => items,
        _ => {
            return Err(KbError::Schema {
                index: 0,
                field: "records".into(),
                reason: "missing records array".into(),
            })
        }
    };
    let mut records = Vec::with_capacity(raw.len());
    for (index, item) in raw.iter().enumerate() {
        records.push(record_from_value(item, index)?);
    }
    KnowledgeBase::new(records, scope)
}

fn record_from_value(item: &Value, index: usize) -> Result<KnowledgeRecord, KbError> {
    let schema = |field: &str, reason: &str| KbError::Schema {
        index,
        field: field.to_string(),
        reason: reason.to_string(),
    };
    let id = item
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("id", "expected string"))?;
    let domain = item
        .get("domain")
        .and_then(Value::as_str)
        .ok_or_else(|| schema("domain", "expected string"))?;
    let slots_raw = item
        .get("slots")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("slots", "expected array of [name, value] pairs"))?;
    let mut slots = Vec::with_capacity(slots_raw.len());
    for (j, pair) in slots_raw.iter().enumerate() {
        match pair.as_array().map(Vec::as_slice) {
            Some([Value::String(n), Value::String(v)]) => slots.push((n.clone(), v.clone())),
            _ => {
                return Err(schema(
                    &format!("slots[{j}]"),
                    "expected [name, value] strings",
                ))
            }
        }
    }
    let record = KnowledgeRecord {
        id: id.to_string(),
        domain: domain.to_string(),
        slots,
    };
    record.validate(index)?;
    Ok(record)
}

pub(crate) fn smd_domain(dialogue: &Value) -> Option<&str> {
    dialogue.get("domain").and_then(Value::as_str).or_else(|| {
        dialogue
            .pointer("/scenario/task/intent")
            .and_then(Value::as_str)
    })
}

/// Reads an SMD-style `kb` block: either an array of slot→value objects or
/// `{"items": [...], "column_names": [...]}`. Records get ids `{prefix}_r{index}`.
pub(crate) fn smd_kb_records(
    kb: &Value,
    domain: &str,
    prefix: &str,
) -> Result<Vec<KnowledgeRecord>, KbError> {
    let (items, columns): (&[Value], Option<Vec<&str>>) = match kb {
        Value::Null => (&[], None),
        Value::Array(items) => (items, None),
        Value::Object(map) => {
            let items = match map.get("items") {
                Some(Value::Array(items)) => items.as_slice(),
                _ => &[],
            };
            let columns = map
                .get("column_names")
                .and_then(Value::as_array)
                .map(|c| c.iter().filter_map(Value::as_str).collect());
            (items, columns)
        }
        _ => {
            return Err(KbError::Schema {
                index: 0,
                field: "kb".into(),
                reason: "expected array or object".into(),
            })
        }
    };
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item.as_object().ok_or_else(|| KbError::Schema {
            index: i,
            field: "kb".into(),
            reason: "expected object record".into(),
        })?;
        let names: Vec<&str> = match &columns {
            Some(cols) => cols.clone(),
            None => obj.keys().map(String::as_str).collect(),
        };
        let slots = names
            .into_iter()
            .filter_map(|name| {
                let value = match obj.get(name)? {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    _ => return None,
                };
                (!canonicalize(&value).is_empty() && value != "-")
                    .then(|| (name.to_string(), value))
            })
            .collect();
        let record = KnowledgeRecord {
            id: format!("{prefix}_r{i}"),
            domain: domain.to_string(),
            slots,
        };
        record.validate(i)?;
        records.push(record);
    }
    Ok(records)
}

/// Record counts before and after deduplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MergeStats {
    pub input_records: usize,
    pub merged_records: usize,
}

/// Result of merging several knowledge bases, with per-input id remapping.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub kb: KnowledgeBase,
    /// `id_maps[i][old_id]` is the id the i-th input record carries in `kb`.
    pub id_maps: Vec<HashMap<String, String>>,
    pub stats: MergeStats,
}

pub fn merge_to_dataset_level(session_kbs: &[KnowledgeBase]) -> KnowledgeBase {
    merge_with_mapping(session_kbs, KbScope::Dataset).kb
}

/// Unions the inputs, collapsing records with identical (domain, canonical slot
/// list). The first occurrence keeps its id; distinct records whose ids collide
/// are renamed with a `~k` suffix.
pub fn merge_with_mapping(session_kbs: &[KnowledgeBase], scope: KbScope) -> MergeOutcome {
    let mut records: Vec<KnowledgeRecord> = Vec::new();
    let mut by_key: HashMap<(String, Vec<(String, String)>), String> = HashMap::new();
    let mut taken: HashSet<String> = HashSet::new();
    let mut id_maps = Vec::with_capacity(session_kbs.len());
    let mut input_records = 0;
    for kb in session_kbs {
        let mut map = HashMap::with_capacity(kb.len());
        for record in kb.records() {
            input_records += 1;
            let key = record.dedup_key();
            if let Some(existing) = by_key.get(&key) {
                map.insert(record.id.clone(), existing.clone());
                continue;
            }
            let id = fresh_id(&record.id, &taken);
            taken.insert(id.clone());
            by_key.insert(key, id.clone());
            map.insert(record.id.clone(), id.clone());
            records.push(KnowledgeRecord {
                id,
                ..record.clone()
            });
        }
        id_maps.push(map);
    }
    let merged_records = records.len();
    let kb = KnowledgeBase::new(records, scope).expect("merged ids are unique by construction");
    MergeOutcome {
        kb,
        id_maps,
        stats: MergeStats {
            input_records,
            merged_records,
        },
    }
}

fn fresh_id(id: &str, taken: &HashSet<String>) -> String {
    if !taken.contains(id) {
        return id.to_string();
    }
    (1..)
        .map(|k| format!("{id}~{k}"))
        .find(|candidate| !taken.contains(candidate))
        .expect("unbounded suffix search")
}

/// Grows `base` to exactly `target_size` records with distractors sampled uniformly
/// without replacement from `pool`. Pool records value-identical to a base record,
/// or to an earlier pool record, are not eligible.
pub fn expand_kb(
    base: &KnowledgeBase,
    target_size: usize,
    pool: &KnowledgeBase,
    seed: u64,
) -> Result<KnowledgeBase, KbError> {
    if target_size < base.len() {
        return Err(KbError::TargetTooSmall {
            target: target_size,
            base: base.len(),
        });
    }
    if target_size == base.len() {
        return Ok(base.clone());
    }
    let needed = target_size - base.len();
    let mut seen: HashSet<_> = base
        .records()
        .iter()
        .map(KnowledgeRecord::dedup_key)
        .collect();
    let candidates: Vec<&KnowledgeRecord> = pool
        .records()
        .iter()
        .filter(|r| seen.insert(r.dedup_key()))
        .collect();
    if candidates.len() < needed {
        return Err(KbError::Capacity {
            needed,
            available: candidates.len(),
            shortfall: needed - candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = candidates.choose_multiple(&mut rng, needed);
    let mut taken: HashSet<String> = base.records().iter().map(|r| r.id.clone()).collect();
    let mut records = base.records().to_vec();
    for record in chosen {
        let id = fresh_id(&record.id, &taken);
        taken.insert(id.clone());
        records.push(KnowledgeRecord {
            id,
            ..(*record).clone()
        });
    }
    KnowledgeBase::new(records, KbScope::Expanded)
}
