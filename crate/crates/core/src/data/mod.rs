//! Query-annotated dialogue corpora: loading, statistics, cross-domain
//! session merging, and nested few-shot sampling.

pub mod convert;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{merge_with_mapping, KbError, KbFile, KbScope, KnowledgeBase};
use crate::pipeline::{validate_turns, DialogueContext, DialogueTurn, Speaker, NULL_TOKEN};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("session {session_id}: {message}")]
    Schema { session_id: String, message: String },
    #[error("session {session_id}: knowledge base: {source}")]
    Kb {
        session_id: String,
        #[source]
        source: KbError,
    },
    #[error("missing split file for {0}")]
    MissingSplit(String),
    #[error("session {0} appears in more than one partition")]
    OverlappingSessions(String),
    #[error("not enough source sessions for recipe slot {slot}: built {built} of {requested} merged sessions")]
    Capacity {
        slot: usize,
        built: usize,
        requested: usize,
    },
    #[error("few-shot fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Gold annotations attached to a user turn.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TurnAnnotation {
    /// Gold query text; `[NOTHING]` marks the null query.
    pub gold_query: Option<String>,
    pub gold_record_ids: Option<Vec<String>>,
    /// Overrides the dialogue domain, for merged cross-domain sessions.
    pub domain: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AnnotatedDialogue {
    pub session_id: String,
    pub domain: String,
    pub turns: Vec<DialogueTurn>,
    /// One entry per user turn, in order.
    pub annotations: Vec<TurnAnnotation>,
    pub kb: KnowledgeBase,
}

/// A user turn with its context and gold targets.
#[derive(Debug, Clone)]
pub struct UserTurn<'a> {
    pub index: usize,
    pub context: DialogueContext,
    pub gold_query: Option<&'a str>,
    pub gold_response: Option<&'a str>,
    pub gold_record_ids: Option<&'a [String]>,
    pub domain: &'a str,
}

impl AnnotatedDialogue {
    pub fn user_turns(&self) -> Vec<UserTurn<'_>> {
        self.annotations
            .iter()
            .enumerate()
            .map(|(i, ann)| UserTurn {
                index: i,
                context: DialogueContext::new(
                    self.session_id.clone(),
                    self.turns[..=2 * i].to_vec(),
                )
                .expect("validated at construction"),
                gold_query: ann.gold_query.as_deref(),
                gold_response: self.turns.get(2 * i + 1).map(|t| t.text.as_str()),
                gold_record_ids: ann.gold_record_ids.as_deref(),
                domain: ann.domain.as_deref().unwrap_or(&self.domain),
            })
            .collect()
    }

    pub fn num_user_turns(&self) -> usize {
        self.annotations.len()
    }

    pub fn from_file(record: DialogueRecord, options: LoadOptions) -> Result<Self, DataError> {
        let session_id = record.session_id.clone();
        let schema = |message: String| DataError::Schema {
            session_id: session_id.clone(),
            message,
        };
        let kb = record.kb.into_kb().map_err(|source| DataError::Kb {
            session_id: session_id.clone(),
            source,
        })?;
        let mut turns = Vec::with_capacity(record.turns.len());
        let mut annotations = Vec::new();
        for (i, turn) in record.turns.into_iter().enumerate() {
            match turn.speaker {
                Speaker::User => {
                    if options.require_queries && turn.gold_query.is_none() {
                        return Err(schema(format!("turn {i} is missing gold_query")));
                    }
                    if let Some(q) = &turn.gold_query {
                        if q.trim().is_empty() {
                            return Err(schema(format!("turn {i} has an empty gold_query")));
                        }
                    }
                    if let Some(ids) = &turn.gold_record_ids {
                        if let Some(bad) = ids.iter().find(|id| !kb.contains(id)) {
                            return Err(schema(format!(
                                "turn {i}: gold record {bad} not in session kb"
                            )));
                        }
                    }
                    annotations.push(TurnAnnotation {
                        gold_query: turn.gold_query,
                        gold_record_ids: turn.gold_record_ids,
                        domain: turn.domain,
                    });
                }
                Speaker::System => {
                    if turn.gold_query.is_some() || turn.gold_record_ids.is_some() {
                        return Err(schema(format!(
                            "turn {i}: annotations belong on user turns"
                        )));
                    }
                }
            }
            turns.push(DialogueTurn {
                speaker: turn.speaker,
                text: turn.text,
            });
        }
        validate_turns(&turns).map_err(|e| schema(e.to_string()))?;
        if turns.is_empty() {
            return Err(schema("dialogue has no turns".into()));
        }
        if options.require_responses && turns.len() % 2 == 1 {
            return Err(schema(format!(
                "turn {} has no following system response",
                turns.len() - 1
            )));
        }
        Ok(Self {
            session_id: record.session_id,
            domain: record.domain,
            turns,
            annotations,
            kb,
        })
    }

    pub fn to_file(&self) -> DialogueRecord {
        let mut annotations = self.annotations.iter();
        let turns = self
            .turns
            .iter()
            .map(|t| {
                let ann = match t.speaker {
                    Speaker::User => annotations.next().cloned().unwrap_or_default(),
                    Speaker::System => TurnAnnotation::default(),
                };
                TurnRecord {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    gold_query: ann.gold_query,
                    gold_record_ids: ann.gold_record_ids,
                    domain: ann.domain,
                }
            })
            .collect();
        DialogueRecord {
            session_id: self.session_id.clone(),
            domain: self.domain.clone(),
            kb: self.kb.to_file(),
            turns,
        }
    }
}

/// One line of a dialogue file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub session_id: String,
    pub domain: String,
    pub kb: KbFile,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_record_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub require_queries: bool,
    pub require_responses: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            require_queries: true,
            require_responses: true,
        }
    }
}

impl LoadOptions {
    /// Accepts turns without query annotations (they are skipped downstream).
    pub fn lenient() -> Self {
        Self {
            require_queries: false,
            require_responses: true,
        }
    }
}

pub fn parse_dialogues(
    text: &str,
    origin: &str,
    options: LoadOptions,
) -> Result<Vec<AnnotatedDialogue>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord =
            serde_json::from_str(line).map_err(|source| DataError::Json {
                path: origin.to_string(),
                line: line_no + 1,
                source,
            })?;
        if !seen.insert(record.session_id.clone()) {
            return Err(DataError::Schema {
                session_id: record.session_id,
                message: "duplicate session id".into(),
            });
        }
        out.push(AnnotatedDialogue::from_file(record, options)?);
    }
    Ok(out)
}

pub fn load_dialogues(
    path: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<Vec<AnnotatedDialogue>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dialogues(&text, &path.display().to_string(), options)
}

pub fn write_dialogues<W: Write>(
    mut out: W,
    dialogues: &[AnnotatedDialogue],
) -> std::io::Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut out, &d.to_file())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedDialogue>,
    pub validation: Vec<AnnotatedDialogue>,
    pub test: Vec<AnnotatedDialogue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

    fn file_candidates(self) -> &'static [&'static str] {
        match self {
            Partition::Train => &["train.jsonl"],
            Partition::Validation => &["validation.jsonl", "valid.jsonl", "dev.jsonl"],
            Partition::Test => &["test.jsonl"],
        }
    }

    pub fn file_name(self) -> &'static str {
        self.file_candidates()[0]
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" | "valid" | "dev" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

impl DatasetSplit {
    pub fn partition(&self, p: Partition) -> &[AnnotatedDialogue] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &AnnotatedDialogue> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for d in self.all() {
            if !seen.insert(d.session_id.as_str()) {
                return Err(DataError::OverlappingSessions(d.session_id.clone()));
            }
        }
        Ok(())
    }
}

fn split_path(dir: &Path, partition: Partition) -> Option<PathBuf> {
    partition
        .file_candidates()
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
}

/// Reads `train.jsonl`, `validation.jsonl` (or `valid`/`dev`), and `test.jsonl` from `dir`.
pub fn load_dataset(
    dir: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<DatasetSplit, DataError> {
    let dir = dir.as_ref();
    let mut split = DatasetSplit::default();
    for partition in Partition::ALL {
        let path = split_path(dir, partition).ok_or_else(|| {
            DataError::MissingSplit(dir.join(partition.file_name()).display().to_string())
        })?;
        let dialogues = load_dialogues(&path, options)?;
        match partition {
            Partition::Train => split.train = dialogues,
            Partition::Validation => split.validation = dialogues,
            Partition::Test => split.test = dialogues,
        }
    }
    split.check_disjoint()?;
    Ok(split)
}

pub fn write_dataset(dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for partition in Partition::ALL {
        let path = dir.join(partition.file_name());
        let mut buf = Vec::new();
        write_dialogues(&mut buf, split.partition(partition)).map_err(io(&path))?;
        fs::write(&path, buf).map_err(io(&path))?;
    }
    Ok(())
}

/// Corpus statistics in the shape of the usual dataset tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub domains: usize,
    pub turns_per_dialogue: f64,
    pub tokens_per_utterance: f64,
    pub tokens_per_query: f64,
    pub null_queries: usize,
    pub avg_kb_size: f64,
}

fn mean(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

pub fn dialogue_stats<'a>(
    dialogues: impl IntoIterator<Item = &'a AnnotatedDialogue>,
) -> DatasetStats {
    let mut n = 0;
    let mut utterances = 0;
    let mut utterance_tokens = 0;
    let mut queries = 0;
    let mut query_tokens = 0;
    let mut null_queries = 0;
    let mut kb_records = 0;
    let mut domains = BTreeSet::new();
    for d in dialogues {
        n += 1;
        utterances += d.turns.len();
        utterance_tokens += d
            .turns
            .iter()
            .map(|t| t.text.split_whitespace().count())
            .sum::<usize>();
        kb_records += d.kb.len();
        for part in d.domain.split('+') {
            domains.insert(part.to_string());
        }
        for q in d.annotations.iter().filter_map(|a| a.gold_query.as_deref()) {
            if q.trim() == NULL_TOKEN {
                null_queries += 1;
            } else {
                queries += 1;
                query_tokens += q.split_whitespace().count();
            }
        }
    }
    DatasetStats {
        dialogues: n,
        utterances,
        domains: domains.len(),
        turns_per_dialogue: mean(utterances, n),
        tokens_per_utterance: mean(utterance_tokens, utterances),
        tokens_per_query: mean(query_tokens, queries),
        null_queries,
        avg_kb_size: mean(kb_records, n),
    }
}

pub fn dataset_stats(split: &DatasetSplit) -> DatasetStats {
    dialogue_stats(split.all())
}

/// Which (source dataset, domain) pairs may fill one constituent slot of a merged session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeSlot {
    pub options: Vec<SourceDomain>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceDomain {
    pub source: String,
    pub domain: String,
}

impl SourceDomain {
    pub fn new(source: impl Into<String>, domain: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            domain: domain.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossDomainRecipe {
    pub slots: Vec<RecipeSlot>,
}

impl CrossDomainRecipe {
    /// SMD {navigate, schedule, weather} + CamRest restaurant.
    pub fn smd_camrest() -> Self {
        Self {
            slots: vec![
                RecipeSlot {
                    options: ["navigate", "schedule", "weather"]
                        .iter()
                        .map(|d| SourceDomain::new("smd", *d))
                        .collect(),
                },
                RecipeSlot {
                    options: vec![SourceDomain::new("camrest", "restaurant")],
                },
            ],
        }
    }

    /// SMD {navigate, schedule} + {CamRest, MWOZ} restaurant + {SMD weather, MWOZ attraction, MWOZ hotel}.
    pub fn smd_camrest_mwoz() -> Self {
        Self {
            slots: vec![
                RecipeSlot {
                    options: vec![
                        SourceDomain::new("smd", "navigate"),
                        SourceDomain::new("smd", "schedule"),
                    ],
                },
                RecipeSlot {
                    options: vec![
                        SourceDomain::new("camrest", "restaurant"),
                        SourceDomain::new("mwoz", "restaurant"),
                    ],
                },
                RecipeSlot {
                    options: vec![
                        SourceDomain::new("smd", "weather"),
                        SourceDomain::new("mwoz", "attraction"),
                        SourceDomain::new("mwoz", "hotel"),
                    ],
                },
            ],
        }
    }
}

/// Partition sizes for `count` items under integer weights; the remainder goes to train.
pub fn partition_sizes(count: usize, ratio: [usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return [count, 0, 0];
    }
    let val = count * ratio[1] / total;
    let test = count * ratio[2] / total;
    [count - val - test, val, test]
}

/// Builds `count` merged sessions. Each takes one unused source session per
/// recipe slot, concatenates them in a seeded random order, and merges their
/// knowledge bases (gold record ids are remapped to the merged ids).
pub fn build_crossdomain(
    sources: &[(String, DatasetSplit)],
    recipe: &CrossDomainRecipe,
    count: usize,
    ratio: [usize; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<(usize, &AnnotatedDialogue)>> = Vec::with_capacity(recipe.slots.len());
    for slot in &recipe.slots {
        let wanted: HashSet<(&str, &str)> = slot
            .options
            .iter()
            .map(|o| (o.source.as_str(), o.domain.as_str()))
            .collect();
        let mut pool: Vec<(usize, &AnnotatedDialogue)> = sources
            .iter()
            .enumerate()
            .flat_map(|(s, (name, split))| {
                let wanted = &wanted;
                split
                    .all()
                    .filter(move |d| wanted.contains(&(name.as_str(), d.domain.as_str())))
                    .map(move |d| (s, d))
            })
            .collect();
        pool.shuffle(&mut rng);
        pools.push(pool);
    }

    let mut used: HashSet<(usize, &str)> = HashSet::new();
    let mut ids: HashSet<String> = HashSet::new();
    let mut merged = Vec::with_capacity(count);
    for built in 0..count {
        let mut parts: Vec<&AnnotatedDialogue> = Vec::with_capacity(pools.len());
        for (slot, pool) in pools.iter_mut().enumerate() {
            let pick = loop {
                match pool.pop() {
                    None => {
                        return Err(DataError::Capacity {
                            slot,
                            built,
                            requested: count,
                        })
                    }
                    Some((s, d)) if used.insert((s, d.session_id.as_str())) => break d,
                    Some(_) => continue,
                }
            };
            parts.push(pick);
        }
        parts.shuffle(&mut rng);
        let mut dialogue = merge_sessions(&parts)?;
        if !ids.insert(dialogue.session_id.clone()) {
            dialogue.session_id = format!("{}#{built}", dialogue.session_id);
            ids.insert(dialogue.session_id.clone());
        }
        merged.push(dialogue);
    }

    let [train, val, _] = partition_sizes(count, ratio);
    let test = merged.split_off(train + val);
    let validation = merged.split_off(train);
    Ok(DatasetSplit {
        train: merged,
        validation,
        test,
    })
}

/// Concatenates sessions in the given order into one session.
pub fn merge_sessions(parts: &[&AnnotatedDialogue]) -> Result<AnnotatedDialogue, DataError> {
    let session_id = parts
        .iter()
        .map(|d| d.session_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let kbs: Vec<KnowledgeBase> = parts.iter().map(|d| d.kb.clone()).collect();
    let merge = merge_with_mapping(&kbs, KbScope::Session);
    let mut turns = Vec::new();
    let mut annotations = Vec::new();
    for (k, part) in parts.iter().enumerate() {
        if part.turns.len() % 2 == 1 {
            return Err(DataError::Schema {
                session_id: part.session_id.clone(),
                message: "cannot merge a session that ends on a user turn".into(),
            });
        }
        turns.extend(part.turns.iter().cloned());
        for ann in &part.annotations {
            annotations.push(TurnAnnotation {
                gold_query: ann.gold_query.clone(),
                gold_record_ids: ann
                    .gold_record_ids
                    .as_ref()
                    .map(|ids| ids.iter().map(|id| merge.id_maps[k][id].clone()).collect()),
                domain: Some(ann.domain.clone().unwrap_or_else(|| part.domain.clone())),
            });
        }
    }
    let single = parts.len() == 1;
    Ok(AnnotatedDialogue {
        session_id,
        domain: parts
            .iter()
            .map(|d| d.domain.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        turns,
        annotations: if single {
            parts[0].annotations.clone()
        } else {
            annotations
        },
        kb: merge.kb,
    })
}

/// Number of dialogues kept for a fraction, `ceil(fraction * n)`, tolerant of float noise.
pub fn fewshot_size(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let rounded = x.round();
    let k = if (x - rounded).abs() < 1e-9 {
        rounded
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Seeded sample of whole dialogues. Samples are prefixes of one seeded
/// permutation, so smaller fractions are subsets of larger ones.
pub fn fewshot_split(
    train: &[AnnotatedDialogue],
    fraction: f64,
    seed: u64,
) -> Result<Vec<AnnotatedDialogue>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    if train.is_empty() {
        return Err(DataError::Invalid(
            "few-shot sampling needs a non-empty train partition".into(),
        ));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut keep = order[..fewshot_size(train.len(), fraction)].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| train[i].clone()).collect())
}

/// Derives a per-item seed from a run seed; used wherever one seed fans out.
pub fn derive_seed(seed: u64, item: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ item.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.gen()
}

/// Groups dialogues by domain tag.
pub fn by_domain(dialogues: &[AnnotatedDialogue]) -> HashMap<&str, Vec<&AnnotatedDialogue>> {
    let mut out: HashMap<&str, Vec<&AnnotatedDialogue>> = HashMap::new();
    for d in dialogues {
        out.entry(d.domain.as_str()).or_default().push(d);
    }
    out
}
