//! Task prompts shared by inference and training export. Both must produce
//! byte-identical text for the same inputs.

use crate::kb::{linearize_with, KnowledgeRecord, LinearizeStyle};

use super::context::{
    parse_serialized_turns, serialize_turns, DialogueContext, DialogueTurn, NULL_TOKEN,
};

pub const QUERY_PROMPT: &str = "translate dialogue context to query:";
pub const RESPONSE_PROMPT: &str =
    "generate system response based on knowledge and dialogue context:";
pub const RELEVANCE_PROMPT: &str = "judge whether the knowledge matches the query:";

const KNOWLEDGE_MARK: &str = " knowledge: ";
const CONTEXT_MARK: &str = " context: ";

pub fn render_query_prompt(context: &DialogueContext) -> String {
    PromptBuilder::default().query_prompt(context)
}

pub fn render_response_prompt(records: &[&KnowledgeRecord], context: &DialogueContext) -> String {
    PromptBuilder::default().response_prompt(records, context)
}

pub fn render_relevance_prompt(query: &str, record: &str) -> String {
    format!("{RELEVANCE_PROMPT} query: {query}{KNOWLEDGE_MARK}{record}")
}

/// Renders prompts, optionally truncating the context to an input budget
/// counted in whitespace tokens of the whole prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptBuilder {
    pub style: LinearizeStyle,
    pub max_input_tokens: Option<usize>,
}

impl PromptBuilder {
    pub fn query_prompt(&self, context: &DialogueContext) -> String {
        let turns = self.fit(context.turns(), count_tokens(QUERY_PROMPT));
        format!("{QUERY_PROMPT} {}", serialize_turns(turns))
    }

    pub fn response_prompt(
        &self,
        records: &[&KnowledgeRecord],
        context: &DialogueContext,
    ) -> String {
        let knowledge = self.knowledge_segment(records);
        let overhead = count_tokens(RESPONSE_PROMPT) + 2 + count_tokens(&knowledge);
        let turns = self.fit(context.turns(), overhead);
        format!(
            "{RESPONSE_PROMPT}{KNOWLEDGE_MARK}{knowledge}{CONTEXT_MARK}{}",
            serialize_turns(turns)
        )
    }

    pub fn knowledge_segment(&self, records: &[&KnowledgeRecord]) -> String {
        if records.is_empty() {
            return NULL_TOKEN.to_string();
        }
        records
            .iter()
            .map(|r| linearize_with(r, self.style))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Drops whole turns from the front until the prompt fits. The current user
    /// turn is always kept.
    fn fit<'a>(&self, turns: &'a [DialogueTurn], overhead: usize) -> &'a [DialogueTurn] {
        let Some(budget) = self.max_input_tokens else {
            return turns;
        };
        let mut total: usize = turns.iter().map(turn_tokens).sum::<usize>() + overhead;
        let mut start = 0;
        while total > budget && start + 1 < turns.len() {
            total -= turn_tokens(&turns[start]);
            start += 1;
        }
        &turns[start..]
    }
}

fn turn_tokens(turn: &DialogueTurn) -> usize {
    1 + count_tokens(&turn.text)
}

fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Recovers the context turns from a query prompt.
pub fn parse_query_prompt(prompt: &str) -> Option<Vec<DialogueTurn>> {
    let body = prompt.strip_prefix(QUERY_PROMPT)?;
    parse_serialized_turns(body.trim_start())
}

/// Recovers the knowledge entries (`[NOTHING]` yields none) and context turns
/// from a response prompt.
pub fn parse_response_prompt(prompt: &str) -> Option<(Vec<String>, Vec<DialogueTurn>)> {
    let body = prompt.strip_prefix(RESPONSE_PROMPT)?;
    let body = body.strip_prefix(KNOWLEDGE_MARK)?;
    let split = body.find(CONTEXT_MARK)?;
    let knowledge = &body[..split];
    let turns = parse_serialized_turns(&body[split + CONTEXT_MARK.len()..])?;
    let entries = if knowledge.trim() == NULL_TOKEN {
        Vec::new()
    } else {
        knowledge.split("; ").map(str::to_string).collect()
    };
    Some((entries, turns))
}

/// Splits a relevance prompt into (query, record).
pub fn parse_relevance_prompt(prompt: &str) -> Option<(&str, &str)> {
    let body = prompt
        .strip_prefix(RELEVANCE_PROMPT)?
        .strip_prefix(" query: ")?;
    let split = body.find(KNOWLEDGE_MARK)?;
    Some((&body[..split], &body[split + KNOWLEDGE_MARK.len()..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::context::Speaker;

    fn ctx(texts: &[&str]) -> DialogueContext {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let speaker = if i % 2 == 0 {
                    Speaker::User
                } else {
                    Speaker::System
                };
                DialogueTurn::new(speaker, *t).unwrap()
            })
            .collect();
        DialogueContext::new("s", turns).unwrap()
    }

    fn hotel(name: &str, area: &str, stars: &str) -> KnowledgeRecord {
        KnowledgeRecord::new(
            name,
            "hotel",
            vec![
                ("name".into(), name.into()),
                ("area".into(), area.into()),
                ("price".into(), "moderate".into()),
                ("stars".into(), stars.into()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn query_prompt_single_turn() {
        assert_eq!(
            render_query_prompt(&ctx(&["hi"])),
            "translate dialogue context to query: user: hi"
        );
    }

    #[test]
    fn query_prompt_keeps_system_turns() {
        let prompt = render_query_prompt(&ctx(&[
            "I'm looking for an expensive eastern european place in the south.",
            "Unfortunately, I don't happen to have any listing that meets what you were looking for. Would you like me to try either a different area or type of restaurant?",
            "How about a chinese restaurant?",
        ]));
        assert!(prompt.contains("system: Unfortunately, I don't happen to have any listing"));
        assert!(prompt.starts_with(QUERY_PROMPT));
    }

    #[test]
    fn response_prompt_without_knowledge() {
        assert_eq!(
            render_response_prompt(&[], &ctx(&["thanks"])),
            "generate system response based on knowledge and dialogue context: knowledge: [NOTHING] context: user: thanks"
        );
    }

    #[test]
    fn response_prompt_lists_records_in_order() {
        let a = hotel("ashley hotel", "north", "2 star");
        let b = hotel("lovell lodge", "north", "2 star");
        let c = hotel("a and b guest house", "east", "4 star");
        let context = ctx(&["I am looking for a place to stay."]);
        let prompt = render_response_prompt(&[&a, &b, &c], &context);
        assert!(prompt.contains("ashley hotel, north, moderate, 2 star"));
        let pos = |s: &str| prompt.find(s).unwrap();
        assert!(pos("ashley hotel") < pos("lovell lodge"));
        assert!(pos("lovell lodge") < pos("a and b guest house"));
        let flipped = render_response_prompt(&[&c, &a, &b], &context);
        assert!(
            flipped.find("a and b guest house").unwrap() < flipped.find("ashley hotel").unwrap()
        );

        let (entries, turns) = parse_response_prompt(&prompt).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[1], "lovell lodge, north, moderate, 2 star");
        assert_eq!(turns, context.turns());
    }

    #[test]
    fn truncation_drops_front_turns() {
        let context = ctx(&["one two three", "four five", "six"]);
        let builder = PromptBuilder {
            max_input_tokens: Some(9),
            ..Default::default()
        };
        // prefix 5 tokens + "user: six" 2 tokens + "system: four five" 3 tokens = 10 > 9
        assert_eq!(
            builder.query_prompt(&context),
            format!("{QUERY_PROMPT} user: six")
        );
        let roomy = PromptBuilder {
            max_input_tokens: Some(1024),
            ..Default::default()
        };
        assert_eq!(roomy.query_prompt(&context), render_query_prompt(&context));
        let tiny = PromptBuilder {
            max_input_tokens: Some(1),
            ..Default::default()
        };
        assert!(tiny.query_prompt(&context).ends_with("user: six"));
    }

    #[test]
    fn relevance_prompt_round_trip() {
        let prompt = render_relevance_prompt("find a hotel", "ashley hotel, north");
        assert_eq!(
            parse_relevance_prompt(&prompt),
            Some(("find a hotel", "ashley hotel, north"))
        );
    }
}
