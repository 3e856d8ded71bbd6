use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const NULL_TOKEN: &str = "[NOTHING]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::System => "system",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogueTurn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Result<Self, PipelineError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PipelineError::InvalidContext(format!(
                "empty {} turn",
                speaker.as_str()
            )));
        }
        Ok(Self { speaker, text })
    }

    pub fn user(text: impl Into<String>) -> Result<Self, PipelineError> {
        Self::new(Speaker::User, text)
    }

    pub fn system(text: impl Into<String>) -> Result<Self, PipelineError> {
        Self::new(Speaker::System, text)
    }
}

/// Turns `U_0, R_0, ..., U_t` leading up to (and including) the current user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    session_id: String,
    turns: Vec<DialogueTurn>,
}

impl DialogueContext {
    pub fn new(
        session_id: impl Into<String>,
        turns: Vec<DialogueTurn>,
    ) -> Result<Self, PipelineError> {
        validate_turns(&turns)?;
        if turns.last().map(|t| t.speaker) != Some(Speaker::User) {
            return Err(PipelineError::InvalidContext(
                "context must end with a user turn".into(),
            ));
        }
        Ok(Self {
            session_id: session_id.into(),
            turns,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn last_user_text(&self) -> &str {
        &self.turns[self.turns.len() - 1].text
    }

    /// Zero-based index of the current user turn.
    pub fn user_turn_index(&self) -> usize {
        self.turns.len() / 2
    }

    pub fn serialize(&self) -> String {
        serialize_turns(&self.turns)
    }
}

/// Checks strict user/system alternation starting with the user, and non-empty text.
pub fn validate_turns(turns: &[DialogueTurn]) -> Result<(), PipelineError> {
    for (i, turn) in turns.iter().enumerate() {
        if turn.text.trim().is_empty() {
            return Err(PipelineError::InvalidContext(format!("turn {i} is empty")));
        }
        let expected = if i % 2 == 0 {
            Speaker::User
        } else {
            Speaker::System
        };
        if turn.speaker != expected {
            return Err(PipelineError::InvalidContext(format!(
                "turn {i} should be spoken by {}",
                expected.as_str()
            )));
        }
    }
    Ok(())
}

/// `user: hi system: hello user: ...`
pub fn serialize_turns(turns: &[DialogueTurn]) -> String {
    let mut out = String::new();
    for turn in turns {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(turn.speaker.as_str());
        out.push_str(": ");
        out.push_str(turn.text.trim());
    }
    out
}

/// Inverse of [`serialize_turns`] for text whose turns do not themselves contain
/// ` user: ` or ` system: `.
pub fn parse_serialized_turns(text: &str) -> Option<Vec<DialogueTurn>> {
    let mut turns = Vec::new();
    let mut rest = text.trim_start();
    let mut speaker = take_speaker(&mut rest)?;
    loop {
        let next = find_marker(rest);
        let (body, tail) = match next {
            Some(pos) => (&rest[..pos], &rest[pos + 1..]),
            None => (rest, ""),
        };
        turns.push(DialogueTurn {
            speaker,
            text: body.trim().to_string(),
        });
        if next.is_none() {
            break;
        }
        rest = tail;
        speaker = take_speaker(&mut rest)?;
    }
    Some(turns)
}

fn take_speaker(rest: &mut &str) -> Option<Speaker> {
    if let Some(tail) = rest.strip_prefix("user: ") {
        *rest = tail;
        Some(Speaker::User)
    } else if let Some(tail) = rest.strip_prefix("system: ") {
        *rest = tail;
        Some(Speaker::System)
    } else {
        None
    }
}

fn find_marker(text: &str) -> Option<usize> {
    let user = text.find(" user: ");
    let system = text.find(" system: ");
    match (user, system) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "lowercase")]
pub enum QueryKind {
    Text(String),
    Null,
}

/// A generated retrieval query, or the null query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    pub raw_generation: String,
}

impl Query {
    /// Interprets raw generator output; `[NOTHING]` (after trimming) is the null query.
    pub fn from_generation(raw: impl Into<String>) -> Result<Self, PipelineError> {
        let raw = raw.into();
        let trimmed = raw.trim();
        let kind = if trimmed == NULL_TOKEN {
            QueryKind::Null
        } else if trimmed.is_empty() {
            return Err(PipelineError::EmptyQuery);
        } else {
            QueryKind::Text(trimmed.to_string())
        };
        Ok(Self {
            kind,
            raw_generation: raw,
        })
    }

    pub fn text(text: impl Into<String>) -> Result<Self, PipelineError> {
        let text = text.into();
        if text.trim().is_empty() || text.trim() == NULL_TOKEN {
            return Self::from_generation(text);
        }
        Ok(Self {
            kind: QueryKind::Text(text.trim().to_string()),
            raw_generation: text,
        })
    }

    pub fn null() -> Self {
        Self {
            kind: QueryKind::Null,
            raw_generation: NULL_TOKEN.to_string(),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self.kind, QueryKind::Null)
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.kind {
            QueryKind::Text(t) => Some(t),
            QueryKind::Null => None,
        }
    }

    /// The query as rendered in prompts and export files.
    pub fn display(&self) -> &str {
        self.as_text().unwrap_or(NULL_TOKEN)
    }
}
