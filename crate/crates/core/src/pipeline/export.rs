use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backends::Task;
use crate::data::AnnotatedDialogue;
use crate::kb::KnowledgeRecord;
use crate::retriever::{build_index, IndexConfig};

use super::prompt::PromptBuilder;
use super::{PipelineError, Query};

/// Which knowledge fills the response prompt of exported training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKnowledge {
    /// Records retrieved with the gold query, as the model sees at inference time.
    #[default]
    GoldQueryRetrieved,
    /// The annotated gold records.
    GoldRecords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub task: Task,
    pub prompt: String,
    pub target: String,
    pub session_id: String,
    pub turn: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportOutcome {
    pub pairs: Vec<TrainingPair>,
    /// User turns skipped for lacking the annotation the export needs.
    pub skipped_turns: usize,
}

/// Builds query-generation and response-generation training pairs.
pub fn export_training_pairs(
    dialogues: &[AnnotatedDialogue],
    knowledge: TrainingKnowledge,
    prompts: &PromptBuilder,
    index: &IndexConfig,
    top_n: usize,
) -> Result<ExportOutcome, PipelineError> {
    let mut outcome = ExportOutcome::default();
    for dialogue in dialogues {
        let built = match knowledge {
            TrainingKnowledge::GoldQueryRetrieved => Some(build_index(&dialogue.kb, index)?),
            TrainingKnowledge::GoldRecords => None,
        };
        for turn in dialogue.user_turns() {
            let Some(gold_query) = turn.gold_query else {
                outcome.skipped_turns += 1;
                continue;
            };
            let query = Query::from_generation(gold_query)?;
            let record_ids: Vec<String> = match (&built, turn.gold_record_ids) {
                (Some(index), _) => match query.as_text() {
                    Some(_) => index
                        .retrieve(&query, top_n)?
                        .entries
                        .into_iter()
                        .map(|e| e.record_id)
                        .collect(),
                    None => Vec::new(),
                },
                (None, Some(ids)) => ids.to_vec(),
                (None, None) => {
                    outcome.skipped_turns += 1;
                    continue;
                }
            };
            let records: Vec<&KnowledgeRecord> = record_ids
                .iter()
                .map(|id| {
                    dialogue
                        .kb
                        .get(id)
                        .ok_or_else(|| PipelineError::UnknownGold(id.clone()))
                })
                .collect::<Result<_, _>>()?;
            outcome.pairs.push(TrainingPair {
                task: Task::Query,
                prompt: prompts.query_prompt(&turn.context),
                target: gold_query.trim().to_string(),
                session_id: dialogue.session_id.clone(),
                turn: turn.index,
            });
            if let Some(response) = turn.gold_response {
                outcome.pairs.push(TrainingPair {
                    task: Task::Response,
                    prompt: prompts.response_prompt(&records, &turn.context),
                    target: response.to_string(),
                    session_id: dialogue.session_id.clone(),
                    turn: turn.index,
                });
            }
        }
    }
    Ok(outcome)
}

pub fn write_training_pairs<W: Write>(mut out: W, pairs: &[TrainingPair]) -> std::io::Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
