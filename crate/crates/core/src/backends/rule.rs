//! Deterministic generator over a small request grammar.
//!
//! Utterances look like `find a/an [price] [food] [noun] in the [area]`, with
//! revisions `how about [X]` overriding individual slots. The generator tracks
//! the latest value per slot, so on corpora drawn from this grammar its queries
//! and responses are exactly reproducible and Entity-F1 of 1.0 is reachable.

use std::collections::HashSet;
use std::time::Instant;

use crate::kb::{canonicalize, KnowledgeRecord};
use crate::pipeline::context::{DialogueTurn, Speaker, NULL_TOKEN};
use crate::pipeline::prompt::{parse_query_prompt, parse_relevance_prompt, parse_response_prompt};

use super::{BackendError, GenerationRequest, GenerationResponse, Generator, Task};

pub const NO_MATCH_RESPONSE: &str = "no matching options";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotState {
    pub price: Option<String>,
    pub food: Option<String>,
    pub noun: Option<String>,
    pub area: Option<String>,
}

impl SlotState {
    pub fn is_empty(&self) -> bool {
        self.price.is_none() && self.food.is_none() && self.noun.is_none() && self.area.is_none()
    }

    /// Overrides the slots that `revision` mentions.
    pub fn apply(&mut self, revision: &SlotState) {
        for (slot, new) in [
            (&mut self.price, &revision.price),
            (&mut self.food, &revision.food),
            (&mut self.noun, &revision.noun),
            (&mut self.area, &revision.area),
        ] {
            if new.is_some() {
                slot.clone_from(new);
            }
        }
    }

    /// Values a matching knowledge record must contain.
    pub fn constraints(&self) -> Vec<&str> {
        [&self.price, &self.food, &self.area]
            .into_iter()
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// `find a {price} {food} {noun} in the {area}`, omitting absent slots.
    pub fn render(&self) -> String {
        let mut words: Vec<&str> = Vec::new();
        words.extend(self.price.as_deref());
        words.extend(self.food.as_deref());
        words.push(self.noun.as_deref().unwrap_or("place"));
        let phrase = words.join(" ");
        let article = if phrase.starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        };
        match &self.area {
            Some(area) => format!("find {article} {phrase} in the {area}"),
            None => format!("find {article} {phrase}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedUtterance {
    /// Greeting, thanks, farewell.
    Courtesy,
    /// A fresh request; replaces the whole slot state.
    Request(SlotState),
    /// `how about ...`; overrides the mentioned slots.
    Revision(SlotState),
    Unparsed,
}

#[derive(Debug, Clone)]
pub struct RuleGrammar {
    prices: HashSet<String>,
    nouns: HashSet<String>,
    courtesy: HashSet<String>,
    request_prefixes: Vec<Vec<String>>,
    revision_prefixes: Vec<Vec<String>>,
}

fn words(list: &[&str]) -> HashSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn phrases(list: &[&str]) -> Vec<Vec<String>> {
    list.iter()
        .map(|p| p.split_whitespace().map(str::to_string).collect())
        .collect()
}

impl Default for RuleGrammar {
    fn default() -> Self {
        Self {
            prices: words(&["cheap", "moderate", "expensive"]),
            nouns: words(&["restaurant", "place", "hotel", "attraction", "spot"]),
            courtesy: words(&[
                "hi", "hello", "hey", "thanks", "thank", "you", "bye", "goodbye", "ok", "okay",
                "great", "cheers", "thats", "all", "good", "have", "a", "nice", "day", "much",
                "so", "very",
            ]),
            request_prefixes: phrases(&[
                "find",
                "i want",
                "i need",
                "im looking for",
                "i am looking for",
                "looking for",
            ]),
            revision_prefixes: phrases(&["how about", "what about"]),
        }
    }
}

impl RuleGrammar {
    pub fn price_words(&self) -> impl Iterator<Item = &str> {
        self.prices.iter().map(String::as_str)
    }

    pub fn parse(&self, utterance: &str) -> ParsedUtterance {
        let canonical = canonicalize(utterance);
        let mut tokens: Vec<&str> = canonical.split_whitespace().collect();
        if tokens.last() == Some(&"please") {
            tokens.pop();
        }
        if tokens.is_empty() {
            return ParsedUtterance::Unparsed;
        }
        if tokens.iter().all(|t| self.courtesy.contains(*t)) {
            return ParsedUtterance::Courtesy;
        }
        if let Some(rest) = strip_any_prefix(&tokens, &self.request_prefixes) {
            return match self.parse_phrase(rest) {
                Some(state) => ParsedUtterance::Request(state),
                None => ParsedUtterance::Unparsed,
            };
        }
        if let Some(rest) = strip_any_prefix(&tokens, &self.revision_prefixes) {
            return match self.parse_phrase(rest) {
                Some(state) => ParsedUtterance::Revision(state),
                None => ParsedUtterance::Unparsed,
            };
        }
        ParsedUtterance::Unparsed
    }

    fn parse_phrase(&self, tokens: &[&str]) -> Option<SlotState> {
        let mut state = SlotState::default();
        let mut i = 0;
        if matches!(tokens.first(), Some(&("a" | "an" | "some" | "any"))) {
            i += 1;
        }
        if let Some(t) = tokens.get(i).filter(|t| self.prices.contains(**t)) {
            state.price = Some(t.to_string());
            i += 1;
        }
        let food_start = i;
        while i < tokens.len() && !self.nouns.contains(tokens[i]) && !is_area_marker(&tokens[i..]) {
            i += 1;
        }
        if i > food_start {
            state.food = Some(tokens[food_start..i].join(" "));
        }
        if let Some(t) = tokens.get(i).filter(|t| self.nouns.contains(**t)) {
            state.noun = Some(t.to_string());
            i += 1;
        }
        if is_area_marker(&tokens[i..]) {
            state.area = Some(tokens[i + 2..].join(" "));
            i = tokens.len();
        }
        (i == tokens.len() && !state.is_empty()).then_some(state)
    }

    /// Latest-value-wins slot state over all user turns.
    pub fn track(&self, turns: &[DialogueTurn]) -> SlotState {
        let mut state = SlotState::default();
        for turn in turns.iter().filter(|t| t.speaker == Speaker::User) {
            match self.parse(&turn.text) {
                ParsedUtterance::Request(s) => state = s,
                ParsedUtterance::Revision(s) => state.apply(&s),
                ParsedUtterance::Courtesy | ParsedUtterance::Unparsed => {}
            }
        }
        state
    }

    pub fn rule_query(&self, turns: &[DialogueTurn]) -> String {
        let Some(last) = turns.iter().rev().find(|t| t.speaker == Speaker::User) else {
            return NULL_TOKEN.to_string();
        };
        match self.parse(&last.text) {
            ParsedUtterance::Courtesy => NULL_TOKEN.to_string(),
            ParsedUtterance::Unparsed => last.text.trim().to_string(),
            ParsedUtterance::Request(_) | ParsedUtterance::Revision(_) => {
                self.track(turns).render()
            }
        }
    }

    pub fn rule_response(&self, records: &[RecordView], turns: &[DialogueTurn]) -> String {
        if records.is_empty() {
            return NO_MATCH_RESPONSE.to_string();
        }
        let state = self.track(turns);
        let constraints = state.constraints();
        let names: Vec<&str> = records
            .iter()
            .filter(|r| r.satisfies(&constraints))
            .map(RecordView::name)
            .collect();
        if names.is_empty() {
            return NO_MATCH_RESPONSE.to_string();
        }
        format!("there are {} options: {}", names.len(), names.join(" and "))
    }

    /// `MATCHED` when the query parses to at least one constraint and the record meets all of them.
    pub fn relevance(&self, query: &str, record: &RecordView) -> &'static str {
        let state = match self.parse(query) {
            ParsedUtterance::Request(s) | ParsedUtterance::Revision(s) => s,
            _ => return "MISMATCHED",
        };
        let constraints = state.constraints();
        if !constraints.is_empty() && record.satisfies(&constraints) {
            "MATCHED"
        } else {
            "MISMATCHED"
        }
    }
}

fn is_area_marker(tokens: &[&str]) -> bool {
    tokens.len() > 2 && tokens[0] == "in" && tokens[1] == "the"
}

fn strip_any_prefix<'a, 'b>(
    tokens: &'a [&'b str],
    prefixes: &[Vec<String>],
) -> Option<&'a [&'b str]> {
    prefixes
        .iter()
        .filter(|p| tokens.len() > p.len() && tokens.iter().zip(p.iter()).all(|(t, w)| t == w))
        .max_by_key(|p| p.len())
        .map(|p| &tokens[p.len()..])
}

/// A knowledge record as seen through its linearization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordView {
    slots: Vec<(Option<String>, String)>,
}

impl RecordView {
    pub fn from_record(record: &KnowledgeRecord) -> Self {
        Self {
            slots: record
                .slots
                .iter()
                .map(|(n, v)| (Some(n.clone()), v.clone()))
                .collect(),
        }
    }

    /// Parses `v1, v2, ...` or `name=v1, area=v2, ...`.
    pub fn from_linearized(text: &str) -> Self {
        let slots = text
            .split(", ")
            .map(|part| match part.split_once('=') {
                Some((name, value)) if !name.contains(' ') => {
                    (Some(name.to_string()), value.to_string())
                }
                _ => (None, part.to_string()),
            })
            .collect();
        Self { slots }
    }

    /// The `name` slot, or the first value when slot names are unknown.
    pub fn name(&self) -> &str {
        self.slots
            .iter()
            .find(|(n, _)| n.as_deref() == Some("name"))
            .or(self.slots.first())
            .map(|(_, v)| v.as_str())
            .unwrap_or("")
    }

    pub fn satisfies(&self, constraints: &[&str]) -> bool {
        let values: HashSet<String> = self.slots.iter().map(|(_, v)| canonicalize(v)).collect();
        constraints
            .iter()
            .all(|c| values.contains(&canonicalize(c)))
    }
}

pub fn rule_query(turns: &[DialogueTurn]) -> String {
    RuleGrammar::default().rule_query(turns)
}

pub fn rule_response(records: &[KnowledgeRecord], turns: &[DialogueTurn]) -> String {
    let views: Vec<RecordView> = records.iter().map(RecordView::from_record).collect();
    RuleGrammar::default().rule_response(&views, turns)
}

#[derive(Debug, Clone, Default)]
pub struct RuleBackend {
    grammar: RuleGrammar,
}

impl RuleBackend {
    pub fn new(grammar: RuleGrammar) -> Self {
        Self { grammar }
    }

    pub fn grammar(&self) -> &RuleGrammar {
        &self.grammar
    }
}

impl Generator for RuleBackend {
    fn backend_id(&self) -> &str {
        "rule"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        request.validate()?;
        let start = Instant::now();
        let malformed =
            || BackendError::InvalidRequest(format!("unrecognized {} prompt", request.task));
        let text = match request.task {
            Task::Query => {
                let turns = parse_query_prompt(&request.prompt).ok_or_else(malformed)?;
                self.grammar.rule_query(&turns)
            }
            Task::Response => {
                let (knowledge, turns) =
                    parse_response_prompt(&request.prompt).ok_or_else(malformed)?;
                let views: Vec<RecordView> = knowledge
                    .iter()
                    .map(|k| RecordView::from_linearized(k))
                    .collect();
                self.grammar.rule_response(&views, &turns)
            }
            Task::Relevance => {
                let (query, record) =
                    parse_relevance_prompt(&request.prompt).ok_or_else(malformed)?;
                self.grammar
                    .relevance(query, &RecordView::from_linearized(record))
                    .to_string()
            }
        };
        Ok(GenerationResponse {
            text,
            backend_id: self.backend_id().to_string(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::prompt::{
        render_query_prompt, render_relevance_prompt, render_response_prompt,
    };
    use crate::pipeline::DialogueContext;

    fn turns(texts: &[&str]) -> Vec<DialogueTurn> {
        texts
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
            .collect()
    }

    fn restaurant(id: &str, name: &str, food: &str, area: &str, price: &str) -> KnowledgeRecord {
        KnowledgeRecord::new(
            id,
            "restaurant",
            vec![
                ("name".into(), name.into()),
                ("food".into(), food.into()),
                ("area".into(), area.into()),
                ("price".into(), price.into()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn revision_overrides_food_and_noun() {
        let t = turns(&[
            "find an expensive eastern european place in the south",
            "no matching options",
            "how about a chinese restaurant?",
        ]);
        assert_eq!(
            rule_query(&t),
            "find an expensive chinese restaurant in the south"
        );
    }

    #[test]
    fn courtesy_is_null() {
        assert_eq!(rule_query(&turns(&["thanks!"])), "[NOTHING]");
        assert_eq!(
            rule_query(&turns(&[
                "find a cheap hotel",
                "there are 1 options: x",
                "thank you very much"
            ])),
            "[NOTHING]"
        );
    }

    #[test]
    fn single_request_is_echoed() {
        let t = turns(&["find a cheap italian restaurant in the north"]);
        assert_eq!(
            rule_query(&t),
            "find a cheap italian restaurant in the north"
        );
        let t = turns(&["I'm looking for an expensive thai restaurant in the centre."]);
        assert_eq!(
            rule_query(&t),
            "find an expensive thai restaurant in the centre"
        );
    }

    #[test]
    fn out_of_grammar_falls_back_to_utterance() {
        let t = turns(&["what's the weather like tomorrow?"]);
        assert_eq!(rule_query(&t), "what's the weather like tomorrow?");
    }

    #[test]
    fn new_request_resets_state() {
        let t = turns(&[
            "find a cheap italian restaurant in the north",
            "ok",
            "find a hotel in the east",
        ]);
        assert_eq!(rule_query(&t), "find a hotel in the east");
    }

    #[test]
    fn area_only_revision() {
        let t = turns(&[
            "find a cheap italian restaurant in the north",
            "none",
            "how about in the west",
        ]);
        assert_eq!(
            rule_query(&t),
            "find a cheap italian restaurant in the west"
        );
    }

    #[test]
    fn response_lists_satisfying_names_in_rank_order() {
        let t = turns(&["find a cheap italian restaurant in the north"]);
        let a = restaurant("a", "pasta palace", "italian", "north", "cheap");
        let b = restaurant("b", "roma", "italian", "north", "cheap");
        let c = restaurant("c", "golden wok", "chinese", "north", "cheap");
        assert_eq!(
            rule_response(&[b.clone(), a.clone()], &t),
            "there are 2 options: roma and pasta palace"
        );
        assert_eq!(rule_response(&[], &t), NO_MATCH_RESPONSE);
        assert_eq!(
            rule_response(&[a.clone(), c.clone(), b.clone()], &t),
            "there are 2 options: pasta palace and roma"
        );
        assert_eq!(rule_response(&[c], &t), NO_MATCH_RESPONSE);
    }

    #[test]
    fn backend_round_trips_through_prompts() {
        let backend = RuleBackend::default();
        let ctx = DialogueContext::new(
            "s",
            turns(&["find a cheap italian restaurant in the north"]),
        )
        .unwrap();
        let q = backend
            .generate(&GenerationRequest::new(
                Task::Query,
                render_query_prompt(&ctx),
            ))
            .unwrap();
        assert_eq!(q.text, "find a cheap italian restaurant in the north");

        let a = restaurant("a", "pasta palace", "italian", "north", "cheap");
        let c = restaurant("c", "golden wok", "chinese", "north", "cheap");
        let prompt = render_response_prompt(&[&c, &a], &ctx);
        let r = backend
            .generate(&GenerationRequest::new(Task::Response, prompt))
            .unwrap();
        assert_eq!(r.text, "there are 1 options: pasta palace");

        let rel = |record: &KnowledgeRecord| {
            backend
                .generate(&GenerationRequest::new(
                    Task::Relevance,
                    render_relevance_prompt(&q.text, &record.linearize()),
                ))
                .unwrap()
                .text
        };
        assert_eq!(rel(&a), "MATCHED");
        assert_eq!(rel(&c), "MISMATCHED");

        assert!(backend
            .generate(&GenerationRequest::new(Task::Query, "not a prompt"))
            .is_err());
    }

    #[test]
    fn linearized_views() {
        let v = RecordView::from_linearized("name=roma, food=italian");
        assert_eq!(v.name(), "roma");
        let v = RecordView::from_linearized("roma, italian, north");
        assert_eq!(v.name(), "roma");
        assert!(v.satisfies(&["italian", "north"]));
        assert!(!v.satisfies(&["cheap"]));
    }

    proptest::proptest! {
        #[test]
        fn query_entities_come_from_context(
            price in proptest::sample::select(vec!["cheap", "moderate", "expensive"]),
            food in proptest::sample::select(vec!["chinese", "italian", "eastern european", "thai"]),
            food2 in proptest::sample::select(vec!["chinese", "indian"]),
            area in proptest::sample::select(vec!["north", "south", "centre"]),
            revise in proptest::bool::ANY,
        ) {
            let first = format!("find a {price} {food} restaurant in the {area}");
            let second = format!("how about {food2}");
            let t = if revise { turns(&[&first, "sorry", &second]) } else { turns(&[&first]) };
            let out = rule_query(&t);
            let context: String = t.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
            for value in [price, food, food2, area] {
                if out.contains(value) {
                    proptest::prop_assert!(context.contains(value));
                }
            }
            proptest::prop_assert_eq!(rule_query(&t), out);
        }
    }
}
