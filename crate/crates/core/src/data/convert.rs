//! Converters from public corpus formats into the annotated dialogue schema.
//!
//! Query annotations are read from an optional `query` field on user turns;
//! turns without one are left unannotated and load only in lenient mode.

use serde_json::{Map, Value};

use crate::kb::{smd_domain, smd_kb_records, KbScope, KnowledgeBase, KnowledgeRecord};
use crate::pipeline::{DialogueTurn, Speaker};

use super::{AnnotatedDialogue, DataError, TurnAnnotation};

const CAMREST_COLUMNS: [&str; 7] = [
    "name",
    "food",
    "area",
    "pricerange",
    "phone",
    "address",
    "postcode",
];

fn schema(session_id: &str, message: impl Into<String>) -> DataError {
    DataError::Schema {
        session_id: session_id.to_string(),
        message: message.into(),
    }
}

struct Builder {
    turns: Vec<DialogueTurn>,
    annotations: Vec<TurnAnnotation>,
}

impl Builder {
    fn new() -> Self {
        Self {
            turns: Vec::new(),
            annotations: Vec::new(),
        }
    }

    /// Appends an utterance; consecutive utterances by one speaker are joined.
    fn push(&mut self, speaker: Speaker, text: &str, query: Option<&str>) {
        let text = text.trim();
        if text.is_empty() {
            return;
        }
        if self.turns.is_empty() && speaker == Speaker::System {
            return;
        }
        match self.turns.last_mut() {
            Some(last) if last.speaker == speaker => {
                last.text.push(' ');
                last.text.push_str(text);
                if let (Speaker::User, Some(q)) = (speaker, query) {
                    if let Some(ann) = self.annotations.last_mut() {
                        ann.gold_query = Some(q.trim().to_string());
                    }
                }
            }
            _ => {
                self.turns.push(DialogueTurn {
                    speaker,
                    text: text.to_string(),
                });
                if speaker == Speaker::User {
                    self.annotations.push(TurnAnnotation {
                        gold_query: query.map(|q| q.trim().to_string()),
                        ..TurnAnnotation::default()
                    });
                }
            }
        }
    }

    /// Drops a trailing user turn that never received a response.
    fn finish(mut self) -> (Vec<DialogueTurn>, Vec<TurnAnnotation>) {
        if self.turns.last().map(|t| t.speaker) == Some(Speaker::User) {
            self.turns.pop();
            self.annotations.pop();
        }
        (self.turns, self.annotations)
    }
}

fn speaker_of(tag: &str) -> Option<Speaker> {
    match tag {
        "driver" | "user" | "usr" => Some(Speaker::User),
        "assistant" | "system" | "sys" => Some(Speaker::System),
        _ => None,
    }
}

/// Converts an SMD (kvret) JSON array. Also accepts turns shaped as
/// `{"turn": "user"|"system", "utterance": ...}` with a top-level `kb` and `domain`.
pub fn convert_smd(value: &Value) -> Result<Vec<AnnotatedDialogue>, DataError> {
    let dialogues = value
        .as_array()
        .ok_or_else(|| DataError::Invalid("expected a JSON array of dialogues".into()))?;
    let mut out = Vec::with_capacity(dialogues.len());
    for (d, dialogue) in dialogues.iter().enumerate() {
        let session_id = dialogue
            .pointer("/scenario/uuid")
            .or_else(|| dialogue.get("id"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("smd_{d}"));
        let domain = smd_domain(dialogue).unwrap_or("unknown").to_string();
        let kb_value = dialogue
            .get("kb")
            .or_else(|| dialogue.pointer("/scenario/kb"))
            .unwrap_or(&Value::Null);
        let records = smd_kb_records(kb_value, &domain, &format!("d{d}")).map_err(|source| {
            DataError::Kb {
                session_id: session_id.clone(),
                source,
            }
        })?;
        let kb = KnowledgeBase::new(records, KbScope::Session).map_err(|source| DataError::Kb {
            session_id: session_id.clone(),
            source,
        })?;
        let turns = dialogue
            .get("dialogue")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&session_id, "missing dialogue array"))?;
        let mut builder = Builder::new();
        for (i, turn) in turns.iter().enumerate() {
            let tag = turn.get("turn").and_then(Value::as_str).unwrap_or("");
            let speaker = speaker_of(tag)
                .ok_or_else(|| schema(&session_id, format!("turn {i}: unknown speaker {tag:?}")))?;
            let data = turn.get("data").unwrap_or(turn);
            let text = data
                .get("utterance")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(&session_id, format!("turn {i}: missing utterance")))?;
            let query = data
                .get("query")
                .or_else(|| turn.get("query"))
                .and_then(Value::as_str);
            builder.push(speaker, text, query);
        }
        let (turns, annotations) = builder.finish();
        if turns.is_empty() {
            log::warn!("skipping session {session_id}: no complete exchange");
            continue;
        }
        out.push(AnnotatedDialogue {
            session_id,
            domain,
            turns,
            annotations,
            kb,
        });
    }
    Ok(out)
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Goal constraints as `(slot, value)`, skipping `dontcare`.
fn camrest_constraints(dialogue: &Value) -> Vec<(String, String)> {
    dialogue
        .pointer("/goal/constraints")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|c| match c.as_array().map(Vec::as_slice) {
                    Some([Value::String(slot), Value::String(value)]) if value != "dontcare" => {
                        Some((slot.clone(), value.clone()))
                    }
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default()
}

fn camrest_record(entry: &Map<String, Value>, id: String) -> Option<KnowledgeRecord> {
    let slots: Vec<(String, String)> = CAMREST_COLUMNS
        .iter()
        .filter_map(|col| {
            entry
                .get(*col)
                .and_then(scalar)
                .map(|v| (col.to_string(), v))
        })
        .filter(|(_, v)| !v.trim().is_empty())
        .collect();
    (!slots.is_empty()).then(|| KnowledgeRecord {
        id,
        domain: "restaurant".into(),
        slots,
    })
}

/// Converts CamRest676 dialogues with its restaurant database. Each session's
/// knowledge base holds the database entries that satisfy the session goal.
pub fn convert_camrest(dialogues: &Value, db: &Value) -> Result<Vec<AnnotatedDialogue>, DataError> {
    let dialogues = dialogues
        .as_array()
        .ok_or_else(|| DataError::Invalid("expected a JSON array of dialogues".into()))?;
    let db: Vec<&Map<String, Value>> = db
        .as_array()
        .ok_or_else(|| DataError::Invalid("expected a JSON array of database entries".into()))?
        .iter()
        .filter_map(Value::as_object)
        .collect();
    let mut out = Vec::with_capacity(dialogues.len());
    for (d, dialogue) in dialogues.iter().enumerate() {
        let session_id = dialogue
            .get("dialogue_id")
            .and_then(scalar)
            .map(|id| format!("camrest_{id}"))
            .unwrap_or_else(|| format!("camrest_{d}"));
        let constraints = camrest_constraints(dialogue);
        let records: Vec<KnowledgeRecord> = db
            .iter()
            .filter(|entry| {
                constraints.iter().all(|(slot, value)| {
                    entry.get(slot).and_then(scalar).as_deref() == Some(value.as_str())
                })
            })
            .enumerate()
            .filter_map(|(j, entry)| camrest_record(entry, format!("d{d}_r{j}")))
            .collect();
        let kb = KnowledgeBase::new(records, KbScope::Session).map_err(|source| DataError::Kb {
            session_id: session_id.clone(),
            source,
        })?;
        let turns = dialogue
            .get("dial")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(&session_id, "missing dial array"))?;
        let mut builder = Builder::new();
        for (i, turn) in turns.iter().enumerate() {
            let user = turn
                .pointer("/usr/transcript")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(&session_id, format!("turn {i}: missing usr.transcript")))?;
            let query = turn.pointer("/usr/query").and_then(Value::as_str);
            builder.push(Speaker::User, user, query);
            if let Some(sys) = turn.pointer("/sys/sent").and_then(Value::as_str) {
                builder.push(Speaker::System, sys, None);
            }
        }
        let (turns, annotations) = builder.finish();
        if turns.is_empty() {
            log::warn!("skipping session {session_id}: no complete exchange");
            continue;
        }
        out.push(AnnotatedDialogue {
            session_id,
            domain: "restaurant".into(),
            turns,
            annotations,
            kb,
        });
    }
    Ok(out)
}
