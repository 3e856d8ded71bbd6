//! Seeded synthetic corpus in the rule grammar.
//!
//! Within a session knowledge base every record has its own kind and area,
//! except that a request target and its revision share one of the two, and
//! only those two records carry the target's price. A full request therefore
//! shares tokens with at most two records, and the requested one matches one
//! more term, so the top of the BM25 ranking is fixed regardless of corpus
//! statistics. Gold queries and responses are the rule generator's own outputs.
//! The distractor pool draws every token from a vocabulary disjoint from the
//! grammar and the session records, so distractors never score against a
//! generated query.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{rule_query, rule_response};
use crate::data::{partition_sizes, AnnotatedDialogue, DatasetSplit, TurnAnnotation};
use crate::kb::{KbScope, KnowledgeBase, KnowledgeRecord};
use crate::pipeline::DialogueTurn;

const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const AREAS: [&str; 10] = [
    "north",
    "south",
    "east",
    "west",
    "centre",
    "airport",
    "university",
    "station",
    "market",
    "castle",
];

struct DomainSpec {
    name: &'static str,
    noun: &'static str,
    kind_slot: &'static str,
    kinds: &'static [&'static str],
}

const DOMAINS: [DomainSpec; 3] = [
    DomainSpec {
        name: "restaurant",
        noun: "restaurant",
        kind_slot: "food",
        kinds: &[
            "chinese", "italian", "indian", "thai", "french", "korean", "mexican", "greek",
            "spanish",
        ],
    },
    DomainSpec {
        name: "hotel",
        noun: "hotel",
        kind_slot: "type",
        kinds: &[
            "boutique", "budget", "family", "luxury", "modern", "historic", "coastal", "rustic",
            "classic",
        ],
    },
    DomainSpec {
        name: "attraction",
        noun: "attraction",
        kind_slot: "type",
        kinds: &[
            "museum",
            "park",
            "gallery",
            "theatre",
            "cinema",
            "zoo",
            "garden",
            "monument",
            "cathedral",
        ],
    },
];

const NAME_FIRST: [&str; 30] = [
    "amber", "birch", "cobalt", "copper", "crimson", "dusky", "ember", "fable", "golden", "hazel",
    "indigo", "ivory", "jade", "juniper", "lunar", "maple", "misty", "noble", "olive", "opal",
    "pearl", "quartz", "ruby", "sable", "silver", "slate", "velvet", "willow", "cedar", "coral",
];

const NAME_SECOND: [&str; 30] = [
    "falcon", "heron", "otter", "badger", "lantern", "meadow", "orchard", "sparrow", "thistle",
    "beacon", "compass", "anchor", "kettle", "saddle", "acorn", "bramble", "cobble", "dovetail",
    "fern", "garnet", "hollow", "ivy", "kestrel", "lark", "marten", "nettle", "pebble", "quill",
    "raven", "robin",
];

const DISTRACTOR_FIRST: [&str; 20] = [
    "azure", "brisk", "cinder", "dapple", "elder", "frosty", "gilded", "hearth", "inkwell",
    "jasper", "kindle", "lilac", "mossy", "nimbus", "onyx", "prism", "russet", "saffron", "tawny",
    "umber",
];

const DISTRACTOR_SECOND: [&str; 20] = [
    "gable",
    "wharf",
    "spindle",
    "trellis",
    "rafter",
    "turret",
    "cupola",
    "gazebo",
    "quarry",
    "mill",
    "forge",
    "granary",
    "lighthouse",
    "pavilion",
    "arcade",
    "chapel",
    "cloister",
    "foundry",
    "belfry",
    "stable",
];

const DISTRACTOR_KINDS: [&str; 8] = [
    "fusion",
    "tapas",
    "hostel",
    "lodge",
    "aquarium",
    "arboretum",
    "bistro",
    "chalet",
];
const DISTRACTOR_AREAS: [&str; 5] = ["riverside", "harbourside", "uptown", "midtown", "lakeside"];
const DISTRACTOR_PRICES: [&str; 4] = ["pricey", "bargain", "premium", "affordable"];

const REQUEST_TEMPLATES: [&str; 5] = [
    "i am looking for {}",
    "find {}",
    "i need {}",
    "looking for {}",
    "i want {}",
];
const OPENINGS: [&str; 3] = ["hello", "hi", "hey"];
const CLOSINGS: [&str; 3] = ["thanks bye", "thank you goodbye", "great thanks"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dialogues: usize,
    /// Records per session knowledge base.
    pub kb_size: usize,
    /// Probability that a session revises its request once.
    pub revision_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dialogues: 300,
            kb_size: 8,
            revision_prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Combo {
    price: usize,
    kind: usize,
    area: usize,
}

fn record(id: String, domain: &DomainSpec, name: &str, combo: Combo) -> KnowledgeRecord {
    KnowledgeRecord {
        id,
        domain: domain.name.to_string(),
        slots: vec![
            ("name".into(), name.to_string()),
            (
                domain.kind_slot.into(),
                domain.kinds[combo.kind].to_string(),
            ),
            ("area".into(), AREAS[combo.area].to_string()),
            ("pricerange".into(), PRICES[combo.price].to_string()),
        ],
    }
}

fn request_phrase(domain: &DomainSpec, combo: Combo) -> String {
    format!(
        "a {} {} {} in the {}",
        PRICES[combo.price], domain.kinds[combo.kind], domain.noun, AREAS[combo.area]
    )
}

/// Largest supported records-per-session; kinds and areas are unique per record.
pub const MAX_KB_SIZE: usize = 8;

/// Builds one dialogue turn by turn, recording rule-generated gold targets.
struct SessionBuilder {
    turns: Vec<DialogueTurn>,
    annotations: Vec<TurnAnnotation>,
}

impl SessionBuilder {
    fn exchange(&mut self, utterance: String, gold: &[&KnowledgeRecord]) {
        self.turns
            .push(DialogueTurn::user(utterance).expect("non-empty template"));
        let query = rule_query(&self.turns);
        let records: Vec<KnowledgeRecord> = gold.iter().map(|r| (*r).clone()).collect();
        let response = rule_response(&records, &self.turns);
        self.turns
            .push(DialogueTurn::system(response).expect("rule output is non-empty"));
        self.annotations.push(TurnAnnotation {
            gold_query: Some(query),
            gold_record_ids: Some(gold.iter().map(|r| r.id.clone()).collect()),
            domain: None,
        });
    }
}

fn generate_dialogue(
    index: usize,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> AnnotatedDialogue {
    let domain = &DOMAINS[index % DOMAINS.len()];
    let session_id = format!("syn{index:05}");
    let mut kinds: Vec<usize> = (0..domain.kinds.len()).collect();
    let mut areas: Vec<usize> = (0..AREAS.len()).collect();
    kinds.shuffle(rng);
    areas.shuffle(rng);
    let price = rng.gen_range(0..PRICES.len());
    let target = Combo {
        price,
        kind: kinds[0],
        area: areas[0],
    };
    let (revised, revision_text) = if rng.gen_bool(0.5) {
        let c = Combo {
            kind: kinds[1],
            ..target
        };
        (c, format!("how about {}", domain.kinds[c.kind]))
    } else {
        let c = Combo {
            area: areas[1],
            ..target
        };
        (c, format!("how about in the {}", AREAS[c.area]))
    };
    let wants_revision = rng.gen_bool(config.revision_prob);
    let mut chosen: Vec<Combo> = vec![target];
    if wants_revision {
        chosen.push(revised);
    }
    let others = config.kb_size.max(chosen.len()) - chosen.len();
    for j in 0..others {
        let other_price = (price + rng.gen_range(1..PRICES.len())) % PRICES.len();
        chosen.push(Combo {
            price: other_price,
            kind: kinds[2 + j],
            area: areas[2 + j],
        });
    }
    chosen.shuffle(rng);

    let mut names: Vec<String> = NAME_FIRST
        .iter()
        .flat_map(|a| NAME_SECOND.iter().map(move |b| format!("{a} {b}")))
        .collect();
    names.shuffle(rng);
    let records: Vec<KnowledgeRecord> = chosen
        .iter()
        .enumerate()
        .map(|(i, c)| record(format!("{session_id}_r{i}"), domain, &names[i], *c))
        .collect();
    let kb = KnowledgeBase::new(records, KbScope::Session).expect("generated records are valid");
    let find = |combo: Combo| {
        let pos = chosen
            .iter()
            .position(|c| *c == combo)
            .expect("combo is in the kb");
        &kb.records()[pos]
    };

    let mut builder = SessionBuilder {
        turns: Vec::new(),
        annotations: Vec::new(),
    };
    if rng.gen_bool(0.5) {
        builder.exchange(OPENINGS.choose(rng).unwrap().to_string(), &[]);
    }
    let template = REQUEST_TEMPLATES.choose(rng).unwrap();
    builder.exchange(
        template.replace("{}", &request_phrase(domain, target)),
        &[find(target)],
    );
    if wants_revision {
        builder.exchange(revision_text, &[find(revised)]);
    }
    builder.exchange(CLOSINGS.choose(rng).unwrap().to_string(), &[]);

    AnnotatedDialogue {
        session_id,
        domain: domain.name.to_string(),
        turns: builder.turns,
        annotations: builder.annotations,
        kb,
    }
}

/// Generates `config.dialogues` sessions, cycling through the three domains.
///
/// Panics if `config.kb_size` exceeds [`MAX_KB_SIZE`].
pub fn generate_corpus(config: &SynthConfig) -> Vec<AnnotatedDialogue> {
    assert!(
        config.kb_size <= MAX_KB_SIZE,
        "synthetic sessions hold at most {MAX_KB_SIZE} records"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.dialogues)
        .map(|i| generate_dialogue(i, config, &mut rng))
        .collect()
}

/// Generates a corpus and partitions it by `ratio` in generation order.
pub fn generate_split(config: &SynthConfig, ratio: [usize; 3]) -> DatasetSplit {
    let mut all = generate_corpus(config);
    let [train, val, _] = partition_sizes(all.len(), ratio);
    let test = all.split_off(train + val);
    let validation = all.split_off(train);
    DatasetSplit {
        train: all,
        validation,
        test,
    }
}

/// `size` distinct distractor records whose tokens never occur in the grammar
/// or in session records.
pub fn distractor_pool(size: usize, seed: u64) -> KnowledgeBase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = DISTRACTOR_FIRST.len()
        * DISTRACTOR_SECOND.len()
        * DISTRACTOR_KINDS.len()
        * DISTRACTOR_AREAS.len();
    assert!(
        size <= capacity,
        "distractor pool is limited to {capacity} records"
    );
    let mut cells: Vec<usize> = (0..capacity).collect();
    cells.shuffle(&mut rng);
    let records = cells
        .into_iter()
        .take(size)
        .enumerate()
        .map(|(i, cell)| {
            let first = DISTRACTOR_FIRST[cell % 20];
            let second = DISTRACTOR_SECOND[(cell / 20) % 20];
            let kind = DISTRACTOR_KINDS[(cell / 400) % DISTRACTOR_KINDS.len()];
            let area = DISTRACTOR_AREAS[cell / (400 * DISTRACTOR_KINDS.len())];
            let price = DISTRACTOR_PRICES[rng.gen_range(0..DISTRACTOR_PRICES.len())];
            let domain = &DOMAINS[i % DOMAINS.len()];
            KnowledgeRecord {
                id: format!("x{i}"),
                domain: domain.name.to_string(),
                slots: vec![
                    ("name".into(), format!("{first} {second}")),
                    (domain.kind_slot.into(), kind.to_string()),
                    ("area".into(), area.to_string()),
                    ("pricerange".into(), price.to_string()),
                ],
            }
        })
        .collect();
    KnowledgeBase::new(records, KbScope::Dataset).expect("distractor records are valid")
}

/// Every token the grammar or the session records can produce.
pub fn session_vocabulary() -> std::collections::BTreeSet<&'static str> {
    let mut out: std::collections::BTreeSet<&'static str> =
        PRICES.iter().chain(&AREAS).copied().collect();
    for d in &DOMAINS {
        out.insert(d.noun);
        out.extend(d.kinds.iter().copied());
    }
    out.extend(NAME_FIRST);
    out.extend(NAME_SECOND);
    for t in REQUEST_TEMPLATES.iter().chain(&OPENINGS).chain(&CLOSINGS) {
        out.extend(t.split_whitespace().filter(|w| *w != "{}"));
    }
    out.extend(["a", "an", "in", "the", "how", "about", "find", "place"]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dialogues, write_dialogues, LoadOptions};
    use crate::retriever::tokenize;
    use std::collections::HashSet;

    #[test]
    fn corpus_is_deterministic_and_loadable() {
        let config = SynthConfig {
            dialogues: 30,
            seed: 4,
            ..SynthConfig::default()
        };
        let a = generate_corpus(&config);
        let b = generate_corpus(&config);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_dialogues(&mut x, &a).unwrap();
        write_dialogues(&mut y, &b).unwrap();
        assert_eq!(x, y);
        let loaded = parse_dialogues(
            std::str::from_utf8(&x).unwrap(),
            "mem",
            LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(loaded.len(), 30);
        let domains: HashSet<&str> = a.iter().map(|d| d.domain.as_str()).collect();
        assert_eq!(domains.len(), 3);
    }

    #[test]
    fn requests_have_exactly_one_satisfying_record() {
        for d in generate_corpus(&SynthConfig {
            dialogues: 60,
            ..SynthConfig::default()
        }) {
            assert_eq!(d.kb.len(), 8);
            let combos: HashSet<Vec<&str>> =
                d.kb.records()
                    .iter()
                    .map(|r| r.slots[1..].iter().map(|(_, v)| v.as_str()).collect())
                    .collect();
            assert_eq!(combos.len(), 8);
            let lengths: HashSet<usize> =
                d.kb.records()
                    .iter()
                    .map(|r| tokenize(&r.linearize()).len())
                    .collect();
            assert_eq!(lengths.len(), 1);
            for (turn, ann) in d.user_turns().iter().zip(&d.annotations) {
                let ids = ann.gold_record_ids.as_ref().unwrap();
                assert!(ids.len() <= 1);
                if ids.len() == 1 {
                    assert!(turn
                        .gold_response
                        .unwrap()
                        .starts_with("there are 1 options: "));
                    let query: HashSet<String> = tokenize(ann.gold_query.as_deref().unwrap())
                        .into_iter()
                        .collect();
                    let overlapping =
                        d.kb.records()
                            .iter()
                            .filter(|r| tokenize(&r.linearize()).iter().any(|t| query.contains(t)))
                            .count();
                    assert!(
                        (1..=2).contains(&overlapping),
                        "{overlapping} records overlap the query"
                    );
                }
            }
        }
    }

    #[test]
    fn distractor_vocabulary_is_disjoint() {
        let vocab = session_vocabulary();
        let pool = distractor_pool(2048, 1);
        assert_eq!(pool.len(), 2048);
        for r in pool.records() {
            for token in tokenize(&r.linearize()) {
                assert!(
                    !vocab.contains(token.as_str()),
                    "{token} leaks into the pool"
                );
            }
        }
        for d in generate_corpus(&SynthConfig {
            dialogues: 30,
            ..SynthConfig::default()
        }) {
            for t in &d.turns {
                for token in tokenize(&t.text) {
                    assert!(
                        pool.entity_lexicon()
                            .iter()
                            .all(|e| !e.split(' ').any(|w| w == token)),
                        "{token}"
                    );
                }
            }
        }
    }

    #[test]
    fn split_ratio() {
        let s = generate_split(
            &SynthConfig {
                dialogues: 30,
                ..SynthConfig::default()
            },
            [8, 1, 1],
        );
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (24, 3, 3)
        );
    }
}
