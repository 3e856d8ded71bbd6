//! Line-oriented chat over one knowledge base.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Result};

use qtod_core::data::load_dialogues;
use qtod_core::kb::{load_kb, KbFormat};
use qtod_core::pipeline::{Mode, Pipeline, Session, TurnResult};

use crate::commands::load_data;
use crate::config::{PipelineArgs, RunConfig};
use crate::{DataArgs, Usage};

const HELP: &str = "commands: /reset clears the context, /mode [qtod|identity|oracle], /quit";

pub fn run(
    args: &PipelineArgs,
    kb: Option<&Path>,
    dataset: Option<&Path>,
    session: Option<&str>,
) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    let (id, kb) = match (kb, dataset, session) {
        (Some(path), _, _) => ("chat".to_string(), load_kb(path, KbFormat::SessionJson)?),
        (None, Some(dataset), Some(id)) => {
            let options = qtod_core::data::LoadOptions::lenient();
            let dialogues = if dataset.is_dir() {
                let mut all = Vec::new();
                for split in ["train", "validation", "test"] {
                    let data = DataArgs {
                        dataset: dataset.to_path_buf(),
                        split: split.into(),
                    };
                    all.extend(load_data(&data, options)?);
                }
                all
            } else {
                load_dialogues(dataset, options)?
            };
            let dialogue = dialogues
                .into_iter()
                .find(|d| d.session_id == id)
                .ok_or_else(|| {
                    Usage(format!("session {id:?} not found in {}", dataset.display()))
                })?;
            (dialogue.session_id, dialogue.kb)
        }
        _ => bail!(Usage("chat needs --kb, or --dataset with --session".into())),
    };
    let pipeline = config.pipeline()?;
    let session = pipeline.open_session(id, Arc::new(kb))?;
    repl(
        &pipeline,
        session,
        config.mode,
        config.top_n,
        io::stdin().lock(),
        io::stdout().lock(),
    )
}

fn print_turn(out: &mut impl Write, session: &Session, result: &TurnResult) -> io::Result<()> {
    writeln!(out, "query: {}", result.query.display())?;
    if result.retrieved.is_empty() {
        writeln!(out, "records: none")?;
    } else {
        writeln!(out, "records:")?;
        for (rank, entry) in result.retrieved.entries.iter().enumerate() {
            let text = session
                .kb()
                .get(&entry.record_id)
                .map(|r| r.linearize())
                .unwrap_or_default();
            writeln!(
                out,
                "  {}. [{}] {} ({:.3})",
                rank + 1,
                entry.record_id,
                text,
                entry.score
            )?;
        }
    }
    writeln!(out, "system: {}", result.response)
}

/// Reads utterances until `/quit` or end of input. Pipeline errors are reported
/// and leave the session as it was.
pub fn repl(
    pipeline: &Pipeline,
    mut session: Session,
    mut mode: Mode,
    top_n: usize,
    input: impl BufRead,
    mut out: impl Write,
) -> Result<()> {
    writeln!(out, "{HELP}")?;
    write!(out, "> ")?;
    out.flush()?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        match text
            .split_once(' ')
            .map_or((text, ""), |(c, rest)| (c, rest.trim()))
        {
            ("", _) => {}
            ("/quit" | "/exit", _) => break,
            ("/reset", _) => {
                session.reset();
                writeln!(out, "context cleared")?;
            }
            ("/mode", "") => writeln!(out, "mode: {mode}")?,
            ("/mode", name) => match name.parse::<Mode>() {
                Ok(m) => {
                    mode = m;
                    writeln!(out, "mode: {mode}")?;
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
            (command, _) if command.starts_with('/') => {
                writeln!(out, "unknown command {command}; {HELP}")?
            }
            _ => match pipeline.run_turn(&mut session, text, mode, top_n, None) {
                Ok(result) => print_turn(&mut out, &session, &result)?,
                Err(e) => writeln!(out, "error: {e}")?,
            },
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use qtod_core::backends::{RuleBackend, ScriptedBackend, Task};
    use qtod_core::kb::{KbScope, KnowledgeBase, KnowledgeRecord};
    use qtod_core::pipeline::PipelineConfig;

    fn kb() -> KnowledgeBase {
        let record = |id: &str, name: &str, food: &str, area: &str, price: &str| {
            KnowledgeRecord::new(
                id,
                "restaurant",
                vec![
                    ("name".into(), name.into()),
                    ("food".into(), food.into()),
                    ("area".into(), area.into()),
                    ("pricerange".into(), price.into()),
                ],
            )
            .unwrap()
        };
        KnowledgeBase::new(
            vec![
                record(
                    "r1",
                    "good luck chinese food takeaway",
                    "chinese",
                    "east",
                    "expensive",
                ),
                record("r2", "peking restaurant", "chinese", "south", "expensive"),
                record(
                    "r3",
                    "the good luck chinese food takeaway",
                    "chinese",
                    "south",
                    "expensive",
                ),
            ],
            KbScope::Session,
        )
        .unwrap()
    }

    fn chat(pipeline: &Pipeline, input: &str) -> String {
        let session = pipeline.open_session("s", Arc::new(kb())).unwrap();
        let mut out = Vec::new();
        repl(pipeline, session, Mode::Qtod, 3, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn scripted_turn_prints_the_generated_query() {
        let backend = ScriptedBackend::new()
            .with_default(
                Task::Query,
                "find an expensive chinese restaurant in the south part of the city",
            )
            .with_default(
                Task::Response,
                "peking restaurant is an expensive chinese place in the south",
            );
        let pipeline = Pipeline::new(Arc::new(backend), PipelineConfig::default());
        let out = chat(
            &pipeline,
            "i want an expensive restaurant that serves chinese food\n/quit\n",
        );
        assert!(out
            .contains("query: find an expensive chinese restaurant in the south part of the city"));
        assert!(out.contains("[r2] peking restaurant, chinese, south, expensive"));
        assert!(
            out.contains("system: peking restaurant is an expensive chinese place in the south")
        );
    }

    #[test]
    fn commands_change_state_without_running_turns() {
        let pipeline = Pipeline::new(Arc::new(RuleBackend::default()), PipelineConfig::default());
        let out = chat(
            &pipeline,
            "/mode identity\n/mode nonsense\n/reset\n/bogus\n",
        );
        assert!(out.contains("mode: identity"));
        assert!(out.contains("error: unknown mode"));
        assert!(out.contains("context cleared"));
        assert!(out.contains("unknown command /bogus"));
        assert!(!out.contains("query:"));
    }

    #[test]
    fn backend_errors_keep_the_session_alive() {
        let pipeline = Pipeline::new(Arc::new(ScriptedBackend::new()), PipelineConfig::default());
        let out = chat(&pipeline, "hello\nstill here\n/quit\n");
        assert_eq!(out.matches("error:").count(), 2);
    }
}
