use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, GenerationResponse, Generator, Task};

/// Fixture file for [`ScriptedBackend`].
///
/// ```json
/// {"entries": [{"task": "query", "prompt": "...", "text": "..."}],
///  "defaults": {"response": "..."}}
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
    #[serde(default)]
    pub defaults: HashMap<Task, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub task: Task,
    pub prompt: String,
    pub text: String,
}

/// Exact-match lookup from (task, prompt) to output text.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: HashMap<(Task, String), String>,
    defaults: HashMap<Task, String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, task: Task, prompt: impl Into<String>, text: impl Into<String>) -> Self {
        self.insert(task, prompt, text);
        self
    }

    pub fn with_default(mut self, task: Task, text: impl Into<String>) -> Self {
        self.defaults.insert(task, text.into());
        self
    }

    pub fn insert(&mut self, task: Task, prompt: impl Into<String>, text: impl Into<String>) {
        self.table.insert((task, prompt.into()), text.into());
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Other(format!("reading {}: {e}", path.display())))?;
        let file: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| BackendError::Other(format!("parsing {}: {e}", path.display())))?;
        Ok(Self::from(file))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl From<ScriptFile> for ScriptedBackend {
    fn from(file: ScriptFile) -> Self {
        let mut backend = Self {
            table: HashMap::new(),
            defaults: file.defaults,
        };
        for entry in file.entries {
            backend.insert(entry.task, entry.prompt, entry.text);
        }
        backend
    }
}

impl Generator for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        let start = Instant::now();
        let text = self
            .table
            .get(&(request.task, request.prompt.clone()))
            .or_else(|| self.defaults.get(&request.task))
            .ok_or_else(|| BackendError::NotScripted {
                task: request.task,
                prompt: request.prompt.clone(),
            })?;
        Ok(GenerationResponse {
            text: text.clone(),
            backend_id: self.backend_id().to_string(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn looks_up_registered_prompts() {
        let backend = ScriptedBackend::new().with(Task::Query, "p", "[NOTHING]");
        let out = backend
            .generate(&GenerationRequest::new(Task::Query, "p"))
            .unwrap();
        assert_eq!(out.text, "[NOTHING]");
        assert_eq!(out.backend_id, "scripted");
        assert!(matches!(
            backend.generate(&GenerationRequest::new(Task::Response, "p")),
            Err(BackendError::NotScripted { .. })
        ));
    }

    #[test]
    fn defaults_apply_per_task() {
        let backend = ScriptedBackend::new().with_default(Task::Response, "ok");
        let out = backend
            .generate(&GenerationRequest::new(Task::Response, "anything"))
            .unwrap();
        assert_eq!(out.text, "ok");
    }

    #[test]
    fn loads_fixture_files() {
        let file: ScriptFile = serde_json::from_str(
            r#"{"entries": [{"task": "response", "prompt": "a", "text": "b"}],
                "defaults": {"query": "[NOTHING]"}}"#,
        )
        .unwrap();
        let backend = ScriptedBackend::from(file);
        let req = GenerationRequest::new(Task::Response, "a");
        assert_eq!(backend.generate(&req).unwrap().text, "b");
        assert_eq!(backend.generate(&req).unwrap().text, "b");
        let q = GenerationRequest::new(Task::Query, "zzz");
        assert_eq!(backend.generate(&q).unwrap().text, "[NOTHING]");
    }
}
