//! Metrics and evaluation protocols: micro Entity-F1, corpus BLEU-4,
//! retrieval recall, domain-wise reports, top-n ablation, and KB scaling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, AnnotatedDialogue};
use crate::kb::{canonicalize, expand_kb, KbError, KnowledgeBase};
use crate::pipeline::{Mode, Pipeline, PipelineError, TurnResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("session {session_id} turn {turn}: {source}")]
    Pipeline {
        session_id: String,
        turn: usize,
        #[source]
        source: PipelineError,
    },
    #[error("session {session_id}: {source}")]
    Kb {
        session_id: String,
        #[source]
        source: KbError,
    },
    #[error("results do not align with the dataset; unmatched sessions: {}", .sessions.join(", "))]
    Misaligned { sessions: Vec<String> },
    #[error("failed to start worker pool: {0}")]
    Workers(String),
    #[error("{0}")]
    Invalid(String),
}

/// Canonical entity strings, matched longest-first.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashSet<Vec<String>>,
    max_len: usize,
}

impl Lexicon {
    pub fn new<I, S>(entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries: HashSet<Vec<String>> = entities
            .into_iter()
            .map(|e| {
                canonicalize(e.as_ref())
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .filter(|tokens| !tokens.is_empty())
            .collect();
        let max_len = entries.iter().map(Vec::len).max().unwrap_or(0);
        Self { entries, max_len }
    }

    pub fn from_kb(kb: &KnowledgeBase) -> Self {
        Self::new(kb.entity_lexicon())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Left-to-right longest-match scan; tokens covered by a match are not rescanned.
pub fn extract_entities(text: &str, lexicon: &Lexicon) -> BTreeSet<String> {
    let canonical = canonicalize(text);
    let tokens: Vec<&str> = canonical.split_whitespace().collect();
    let mut found = BTreeSet::new();
    let mut i = 0;
    let mut probe: Vec<String> = Vec::with_capacity(lexicon.max_len);
    while i < tokens.len() {
        let longest = (1..=lexicon.max_len.min(tokens.len() - i))
            .rev()
            .find(|&len| {
                probe.clear();
                probe.extend(tokens[i..i + len].iter().map(|t| t.to_string()));
                lexicon.entries.contains(&probe)
            });
        match longest {
            Some(len) => {
                found.insert(tokens[i..i + len].join(" "));
                i += len;
            }
            None => i += 1,
        }
    }
    found
}

/// Pooled true-positive, false-positive, and false-negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EntityCounts {
    /// Counts for one turn; a turn with no gold entities contributes nothing.
    pub fn from_sets(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> Self {
        if gold.is_empty() {
            return Self::default();
        }
        let tp = pred.intersection(gold).count();
        Self {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

impl std::iter::Sum for EntityCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Self::merge)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro Entity-F1 over aligned prediction and gold lists, with one shared lexicon.
pub fn entity_f1<P: AsRef<str>, G: AsRef<str>>(
    pred: &[P],
    gold: &[G],
    lexicon: &Lexicon,
) -> EntityCounts {
    assert_eq!(
        pred.len(),
        gold.len(),
        "entity_f1 needs aligned prediction and gold lists"
    );
    pred.iter()
        .zip(gold)
        .map(|(p, g)| {
            EntityCounts::from_sets(
                &extract_entities(p.as_ref(), lexicon),
                &extract_entities(g.as_ref(), lexicon),
            )
        })
        .sum()
}

/// Lowercases and splits punctuation into separate tokens.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub const BLEU_MAX_ORDER: usize = 4;

/// Per-order clipped matches and candidate n-gram totals plus lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn sentence(pred: &str, reference: &str) -> Self {
        let cand = bleu_tokenize(pred);
        let refr = bleu_tokenize(reference);
        let mut stats = Self {
            candidate_len: cand.len(),
            reference_len: refr.len(),
            ..Self::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let ref_counts = ngram_counts(&refr, n);
            let cand_counts = ngram_counts(&cand, n);
            stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
            stats.matches[n - 1] = cand_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn merge(mut self, other: Self) -> Self {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
        self
    }

    /// Geometric mean of modified precisions times the brevity penalty. Orders
    /// for which no candidate is long enough are left out of the mean.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let order = self.totals.iter().take_while(|&&t| t > 0).count();
        let mut log_sum = 0.0;
        for n in 0..order {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.candidate_len > self.reference_len {
            1.0
        } else {
            (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp()
        };
        bp * (log_sum / order as f64).exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with a single reference per prediction, no smoothing.
pub fn bleu<P: AsRef<str>, R: AsRef<str>>(pred: &[P], refs: &[R]) -> f64 {
    assert_eq!(
        pred.len(),
        refs.len(),
        "bleu needs aligned prediction and reference lists"
    );
    pred.iter()
        .zip(refs)
        .map(|(p, r)| BleuStats::sentence(p.as_ref(), r.as_ref()))
        .fold(BleuStats::default(), BleuStats::merge)
        .score()
}

/// Fraction of turns whose gold records all appear in the top `n`. Turns with
/// no gold records are not counted. Returns 0 when no turn counts.
pub fn recall_at_n<R: AsRef<str>, G: AsRef<str>>(
    retrievals: &[Vec<R>],
    gold: &[Vec<G>],
    n: usize,
) -> f64 {
    assert_eq!(
        retrievals.len(),
        gold.len(),
        "recall_at_n needs aligned lists"
    );
    let mut hit = 0;
    let mut counted = 0;
    for (ranked, gold) in retrievals.iter().zip(gold) {
        if gold.is_empty() {
            continue;
        }
        counted += 1;
        let top: HashSet<&str> = ranked.iter().take(n).map(AsRef::as_ref).collect();
        if gold.iter().all(|g| top.contains(g.as_ref())) {
            hit += 1;
        }
    }
    ratio(hit, counted)
}

/// One evaluated turn: prediction, gold, and the entities found in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvaluation {
    pub session_id: String,
    pub turn: usize,
    pub domain: String,
    pub query: String,
    pub gold_query: Option<String>,
    pub response: String,
    pub gold_response: String,
    pub retrieved_ids: Vec<String>,
    pub gold_record_ids: Option<Vec<String>>,
    pub pred_entities: BTreeSet<String>,
    pub gold_entities: BTreeSet<String>,
    pub retrieve_ms: f64,
    pub response_prompt_len: usize,
}

impl TurnEvaluation {
    pub fn counts(&self) -> EntityCounts {
        EntityCounts::from_sets(&self.pred_entities, &self.gold_entities)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entity_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub bleu: f64,
    pub counts: EntityCounts,
    pub per_domain: BTreeMap<String, f64>,
    pub top_n: Option<usize>,
    /// Retrieval recall@top_n over turns with gold records, if any were annotated.
    pub recall_at_n: Option<f64>,
    pub turns: usize,
    pub mean_retrieve_ms: f64,
    pub mean_response_prompt_len: f64,
}

pub const OTHER_DOMAIN: &str = "other";

/// Entity-F1 per domain tag; untagged turns are grouped under `other`.
pub fn domainwise_report(turns: &[TurnEvaluation]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, EntityCounts> = BTreeMap::new();
    for t in turns {
        let tag = if t.domain.trim().is_empty() {
            OTHER_DOMAIN
        } else {
            t.domain.as_str()
        };
        let entry = counts.entry(tag.to_string()).or_default();
        *entry = entry.merge(t.counts());
    }
    counts.into_iter().map(|(d, c)| (d, c.f1())).collect()
}

impl EvalReport {
    pub fn from_turns(turns: &[TurnEvaluation], top_n: Option<usize>) -> Self {
        let counts: EntityCounts = turns.iter().map(TurnEvaluation::counts).sum();
        let preds: Vec<&str> = turns.iter().map(|t| t.response.as_str()).collect();
        let refs: Vec<&str> = turns.iter().map(|t| t.gold_response.as_str()).collect();
        let annotated: Vec<&TurnEvaluation> = turns
            .iter()
            .filter(|t| t.gold_record_ids.is_some())
            .collect();
        let recall_at_n = match top_n {
            Some(n) if !annotated.is_empty() => {
                let retrieved: Vec<&[String]> = annotated
                    .iter()
                    .map(|t| t.retrieved_ids.as_slice())
                    .collect();
                let gold: Vec<&[String]> = annotated
                    .iter()
                    .map(|t| t.gold_record_ids.as_deref().unwrap_or_default())
                    .collect();
                Some(recall_at_n(
                    &retrieved.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                    &gold.iter().map(|g| g.to_vec()).collect::<Vec<_>>(),
                    n,
                ))
            }
            _ => None,
        };
        let n = turns.len();
        Self {
            entity_f1: counts.f1(),
            precision: counts.precision(),
            recall: counts.recall(),
            bleu: bleu(&preds, &refs),
            counts,
            per_domain: domainwise_report(turns),
            top_n,
            recall_at_n,
            turns: n,
            mean_retrieve_ms: if n == 0 {
                0.0
            } else {
                turns.iter().map(|t| t.retrieve_ms).sum::<f64>() / n as f64
            },
            mean_response_prompt_len: if n == 0 {
                0.0
            } else {
                turns
                    .iter()
                    .map(|t| t.response_prompt_len as f64)
                    .sum::<f64>()
                    / n as f64
            },
        }
    }

    /// `metric,value` rows, with per-domain F1 as `entity_f1[domain]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |name: &str, value: String| {
            let _ = writeln!(out, "{name},{value}");
        };
        row("entity_f1", fmt_metric(self.entity_f1));
        row("precision", fmt_metric(self.precision));
        row("recall", fmt_metric(self.recall));
        row("bleu", fmt_metric(self.bleu));
        row("tp", self.counts.tp.to_string());
        row("fp", self.counts.fp.to_string());
        row("fn", self.counts.fn_.to_string());
        if let (Some(n), Some(r)) = (self.top_n, self.recall_at_n) {
            row(&format!("recall@{n}"), fmt_metric(r));
        }
        row("turns", self.turns.to_string());
        row("mean_retrieve_ms", fmt_metric(self.mean_retrieve_ms));
        for (domain, f1) in &self.per_domain {
            row(&format!("entity_f1[{domain}]"), fmt_metric(*f1));
        }
        out
    }

    /// Fixed-width console summary.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24}{:>10}", "metric", "value");
        let mut row = |name: String, value: f64| {
            let _ = writeln!(out, "{name:<24}{:>10.4}", value);
        };
        row("entity_f1".into(), self.entity_f1);
        row("precision".into(), self.precision);
        row("recall".into(), self.recall);
        row("bleu".into(), self.bleu);
        if let (Some(n), Some(r)) = (self.top_n, self.recall_at_n) {
            row(format!("recall@{n}"), r);
        }
        for (domain, f1) in &self.per_domain {
            row(format!("f1[{domain}]"), *f1);
        }
        out
    }
}

fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}

/// Evaluation settings for one pass over a set of dialogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub mode: Mode,
    pub top_n: usize,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub turns: Vec<TurnEvaluation>,
    pub results: Vec<TurnResult>,
    pub report: EvalReport,
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Workers(e.to_string()))?;
    Ok(pool.install(f))
}

fn evaluate_one(
    pipeline: &Pipeline,
    dialogue: &AnnotatedDialogue,
    kb: &KnowledgeBase,
    lexicon: &Lexicon,
    options: EvalOptions,
) -> Result<Vec<(TurnEvaluation, TurnResult)>, EvalError> {
    let index = pipeline
        .build_index(kb)
        .map_err(|source| EvalError::Pipeline {
            session_id: dialogue.session_id.clone(),
            turn: 0,
            source,
        })?;
    let mut out = Vec::with_capacity(dialogue.num_user_turns());
    for turn in dialogue.user_turns() {
        let Some(gold_response) = turn.gold_response else {
            continue;
        };
        let result = pipeline
            .run_context(
                &turn.context,
                kb,
                &index,
                options.mode,
                options.top_n,
                turn.gold_record_ids,
            )
            .map_err(|source| EvalError::Pipeline {
                session_id: dialogue.session_id.clone(),
                turn: turn.index,
                source,
            })?;
        let evaluation = TurnEvaluation {
            session_id: dialogue.session_id.clone(),
            turn: turn.index,
            domain: turn.domain.to_string(),
            query: result.query.display().to_string(),
            gold_query: turn.gold_query.map(str::to_string),
            response: result.response.clone(),
            gold_response: gold_response.to_string(),
            retrieved_ids: result
                .retrieved
                .entries
                .iter()
                .map(|e| e.record_id.clone())
                .collect(),
            gold_record_ids: turn.gold_record_ids.map(<[String]>::to_vec),
            pred_entities: extract_entities(&result.response, lexicon),
            gold_entities: extract_entities(gold_response, lexicon),
            retrieve_ms: result.timings.retrieve.duration_ms,
            response_prompt_len: result.response_prompt_len,
        };
        out.push((evaluation, result));
    }
    Ok(out)
}

/// Runs the pipeline over every user turn and scores it. Entities are matched
/// against each session's own knowledge base lexicon unless `lexicon` is given.
pub fn evaluate_dialogues(
    pipeline: &Pipeline,
    dialogues: &[AnnotatedDialogue],
    options: EvalOptions,
    lexicon: Option<&Lexicon>,
) -> Result<Evaluation, EvalError> {
    let kbs: Vec<&KnowledgeBase> = dialogues.iter().map(|d| &d.kb).collect();
    evaluate_with_kbs(pipeline, dialogues, &kbs, options, lexicon)
}

/// Runs the pipeline over every user turn without scoring. Results are ordered
/// by `(session_id, turn)`.
pub fn run_dialogues(
    pipeline: &Pipeline,
    dialogues: &[AnnotatedDialogue],
    options: EvalOptions,
) -> Result<Vec<TurnResult>, EvalError> {
    let per_dialogue: Vec<Result<Vec<TurnResult>, EvalError>> = with_pool(options.jobs, || {
        dialogues
            .par_iter()
            .map(|d| {
                let tag = |turn: usize| {
                    let session_id = d.session_id.clone();
                    move |source| EvalError::Pipeline {
                        session_id,
                        turn,
                        source,
                    }
                };
                let index = pipeline.build_index(&d.kb).map_err(tag(0))?;
                d.user_turns()
                    .into_iter()
                    .map(|turn| {
                        pipeline
                            .run_context(
                                &turn.context,
                                &d.kb,
                                &index,
                                options.mode,
                                options.top_n,
                                turn.gold_record_ids,
                            )
                            .map_err(tag(turn.index))
                    })
                    .collect()
            })
            .collect()
    })?;
    let mut results = Vec::new();
    for item in per_dialogue {
        results.extend(item?);
    }
    results.sort_by(|a, b| (&a.session_id, a.turn).cmp(&(&b.session_id, b.turn)));
    Ok(results)
}

fn evaluate_with_kbs(
    pipeline: &Pipeline,
    dialogues: &[AnnotatedDialogue],
    kbs: &[&KnowledgeBase],
    options: EvalOptions,
    lexicon: Option<&Lexicon>,
) -> Result<Evaluation, EvalError> {
    let per_dialogue: Vec<Result<Vec<(TurnEvaluation, TurnResult)>, EvalError>> =
        with_pool(options.jobs, || {
            dialogues
                .par_iter()
                .zip(kbs.par_iter())
                .map(|(d, kb)| {
                    let own;
                    let lexicon = match lexicon {
                        Some(l) => l,
                        None => {
                            own = Lexicon::from_kb(&d.kb);
                            &own
                        }
                    };
                    evaluate_one(pipeline, d, kb, lexicon, options)
                })
                .collect()
        })?;
    let mut turns = Vec::new();
    let mut results = Vec::new();
    for item in per_dialogue {
        for (t, r) in item? {
            turns.push(t);
            results.push(r);
        }
    }
    let report = EvalReport::from_turns(&turns, Some(options.top_n));
    Ok(Evaluation {
        turns,
        results,
        report,
    })
}

/// Scores previously written turn results against the dataset, matching by
/// `(session_id, turn)` regardless of file order.
pub fn score_results(
    results: &[TurnResult],
    dialogues: &[AnnotatedDialogue],
    lexicon: Option<&Lexicon>,
) -> Result<EvalReport, EvalError> {
    let mut by_key: HashMap<(&str, usize), &TurnResult> = HashMap::with_capacity(results.len());
    for r in results {
        if by_key.insert((r.session_id.as_str(), r.turn), r).is_some() {
            return Err(EvalError::Invalid(format!(
                "duplicate result for session {} turn {}",
                r.session_id, r.turn
            )));
        }
    }
    let mut unmatched = BTreeSet::new();
    let mut turns = Vec::new();
    let mut consumed = 0;
    for d in dialogues {
        let own;
        let lexicon = match lexicon {
            Some(l) => l,
            None => {
                own = Lexicon::from_kb(&d.kb);
                &own
            }
        };
        for turn in d.user_turns() {
            let Some(gold_response) = turn.gold_response else {
                continue;
            };
            let Some(r) = by_key.get(&(d.session_id.as_str(), turn.index)) else {
                unmatched.insert(d.session_id.clone());
                continue;
            };
            consumed += 1;
            turns.push(TurnEvaluation {
                session_id: d.session_id.clone(),
                turn: turn.index,
                domain: turn.domain.to_string(),
                query: r.query.display().to_string(),
                gold_query: turn.gold_query.map(str::to_string),
                response: r.response.clone(),
                gold_response: gold_response.to_string(),
                retrieved_ids: r
                    .retrieved
                    .entries
                    .iter()
                    .map(|e| e.record_id.clone())
                    .collect(),
                gold_record_ids: turn.gold_record_ids.map(<[String]>::to_vec),
                pred_entities: extract_entities(&r.response, lexicon),
                gold_entities: extract_entities(gold_response, lexicon),
                retrieve_ms: r.timings.retrieve.duration_ms,
                response_prompt_len: r.response_prompt_len,
            });
        }
    }
    if consumed < results.len() {
        let known: HashSet<(&str, usize)> = turns
            .iter()
            .map(|t| (t.session_id.as_str(), t.turn))
            .collect();
        for r in results {
            if !known.contains(&(r.session_id.as_str(), r.turn)) {
                unmatched.insert(r.session_id.clone());
            }
        }
    }
    if !unmatched.is_empty() {
        return Err(EvalError::Misaligned {
            sessions: unmatched.into_iter().collect(),
        });
    }
    let top_n = results.iter().map(|r| r.retrieved.entries.len()).max();
    Ok(EvalReport::from_turns(&turns, top_n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub kb_size: usize,
    pub entity_f1: f64,
    pub recall: f64,
    pub mean_retrieve_latency_ms: f64,
    pub mean_response_prompt_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub points: Vec<ScalingPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMetric {
    #[default]
    EntityF1,
    Recall,
}

impl std::str::FromStr for ScalingMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entity_f1" | "f1" => Ok(Self::EntityF1),
            "recall" => Ok(Self::Recall),
            other => Err(format!("unknown scaling metric {other:?}")),
        }
    }
}

impl ScalingCurve {
    /// `kb_size,metric,latency_ms` rows.
    pub fn to_csv(&self, metric: ScalingMetric) -> String {
        let mut out = String::from("kb_size,metric,latency_ms\n");
        for p in &self.points {
            let value = match metric {
                ScalingMetric::EntityF1 => p.entity_f1,
                ScalingMetric::Recall => p.recall,
            };
            let _ = writeln!(
                out,
                "{},{},{}",
                p.kb_size,
                fmt_metric(value),
                fmt_metric(p.mean_retrieve_latency_ms)
            );
        }
        out
    }
}

/// Powers of two from `2^lo` to `2^hi` inclusive.
pub fn power_of_two_sizes(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}

/// Evaluates the dialogues once per KB size. Each session KB is grown to the
/// size with distractors from `pool`; sessions already at or above the size
/// keep their KB. Entities are always matched against the unexpanded lexicon.
pub fn run_scaling_benchmark(
    pipeline: &Pipeline,
    dialogues: &[AnnotatedDialogue],
    pool: &KnowledgeBase,
    sizes: &[usize],
    options: EvalOptions,
    seed: u64,
) -> Result<ScalingCurve, EvalError> {
    if sizes.is_empty() {
        return Err(EvalError::Invalid("no KB sizes given".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Invalid(
            "KB sizes must be strictly increasing".into(),
        ));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let expanded: Vec<Arc<KnowledgeBase>> = dialogues
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if size <= d.kb.len() {
                    Ok(Arc::new(d.kb.clone()))
                } else {
                    expand_kb(&d.kb, size, pool, derive_seed(seed, i as u64))
                        .map(Arc::new)
                        .map_err(|source| EvalError::Kb {
                            session_id: d.session_id.clone(),
                            source,
                        })
                }
            })
            .collect::<Result<_, _>>()?;
        let kbs: Vec<&KnowledgeBase> = expanded.iter().map(Arc::as_ref).collect();
        let eval = evaluate_with_kbs(pipeline, dialogues, &kbs, options, None)?;
        points.push(ScalingPoint {
            kb_size: size,
            entity_f1: eval.report.entity_f1,
            recall: eval.report.recall_at_n.unwrap_or(0.0),
            mean_retrieve_latency_ms: eval.report.mean_retrieve_ms,
            mean_response_prompt_len: eval.report.mean_response_prompt_len,
        });
    }
    Ok(ScalingCurve { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNRow {
    pub n: usize,
    pub report: EvalReport,
}

/// One full evaluation per `n`.
pub fn run_topn_ablation(
    pipeline: &Pipeline,
    dialogues: &[AnnotatedDialogue],
    n_values: &[usize],
    options: EvalOptions,
) -> Result<Vec<TopNRow>, EvalError> {
    n_values
        .iter()
        .map(|&n| {
            let eval = evaluate_dialogues(
                pipeline,
                dialogues,
                EvalOptions {
                    top_n: n,
                    ..options
                },
                None,
            )?;
            Ok(TopNRow {
                n,
                report: eval.report,
            })
        })
        .collect()
}

/// `n,entity_f1,precision,recall,bleu,recall_at_n` rows.
pub fn topn_table_csv(rows: &[TopNRow]) -> String {
    let mut out = String::from("n,entity_f1,precision,recall,bleu,recall_at_n\n");
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.n,
            fmt_metric(r.entity_f1),
            fmt_metric(r.precision),
            fmt_metric(r.recall),
            fmt_metric(r.bleu),
            r.recall_at_n.map(fmt_metric).unwrap_or_default()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(items: &[&str]) -> Lexicon {
        Lexicon::new(items.iter().copied())
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extraction_examples() {
        let l = lex(&["peking restaurant", "south"]);
        assert_eq!(
            extract_entities("Peking Restaurant is in the south.", &l),
            set(&["peking restaurant", "south"])
        );
        assert!(extract_entities("nothing here", &l).is_empty());
        let l = lex(&["good luck chinese food takeaway", "chinese"]);
        assert_eq!(
            extract_entities("good luck chinese food takeaway", &l),
            set(&["good luck chinese food takeaway"])
        );
        assert_eq!(
            extract_entities("chinese and chinese", &l),
            set(&["chinese"])
        );
    }

    #[test]
    fn forced_half_f1() {
        let l = lex(&["a", "b", "c"]);
        let c = entity_f1(&["a c"], &["a b"], &l);
        assert_eq!(
            c,
            EntityCounts {
                tp: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_gold_turns_contribute_nothing() {
        let l = lex(&["a"]);
        assert_eq!(entity_f1(&["a"], &["none"], &l), EntityCounts::default());
        assert_eq!(EntityCounts::default().f1(), 0.0);
    }

    #[test]
    fn bleu_hand_computed() {
        // Clipped matches per order: 10/11, 6/8, 3/5, 1/3; c = 11, r = 12.
        let pred = ["the cat sat on the mat", "a dog ran", "hello world"];
        let refs = ["the cat sat on a mat", "a dog ran fast", "hello world"];
        let log_p =
            (10.0f64 / 11.0).ln() + (6.0f64 / 8.0).ln() + (3.0f64 / 5.0).ln() + (1.0f64 / 3.0).ln();
        let expected = (1.0f64 - 12.0 / 11.0).exp() * (log_p / 4.0).exp();
        assert!((expected - 0.554_872_660_511_157_6).abs() < 1e-12);
        assert!(
            (bleu(&pred, &refs) - expected).abs() < 1e-9,
            "{} vs {expected}",
            bleu(&pred, &refs)
        );
    }

    #[test]
    fn bleu_edge_cases() {
        assert_eq!(bleu(&["x y z w"], &["x y z w"]), 1.0);
        assert_eq!(bleu(&["a b"], &["c d"]), 0.0);
        assert_eq!(bleu::<&str, &str>(&[], &[]), 0.0);
        assert_eq!(bleu(&["Hello, World!"], &["hello , world !"]), 1.0);
        assert_eq!(bleu(&["hi"], &["hi"]), 1.0);
    }

    #[test]
    fn recall_examples() {
        let ranked = vec![vec!["a", "b", "c"], vec!["x", "y"], vec!["b"], vec![]];
        let gold = vec![vec!["a"], vec!["y"], vec!["a", "b"], vec![]];
        assert_eq!(recall_at_n(&ranked, &gold, 1), 1.0 / 3.0);
        assert_eq!(recall_at_n(&ranked, &gold, 2), 2.0 / 3.0);
        assert_eq!(recall_at_n(&[vec!["q"]], &[vec!["z"]], 3), 0.0);
    }

    fn turn(domain: &str, pred: &[&str], gold: &[&str]) -> TurnEvaluation {
        TurnEvaluation {
            session_id: "s".into(),
            turn: 0,
            domain: domain.into(),
            query: String::new(),
            gold_query: None,
            response: pred.join(" "),
            gold_response: gold.join(" "),
            retrieved_ids: vec![],
            gold_record_ids: None,
            pred_entities: set(pred),
            gold_entities: set(gold),
            retrieve_ms: 0.0,
            response_prompt_len: 0,
        }
    }

    #[test]
    fn domainwise_structure() {
        let turns = vec![
            turn("schedule", &["a"], &["a"]),
            turn("navigate", &["b"], &["c"]),
            turn("weather", &["d"], &["d", "e"]),
            turn("", &["x"], &["x"]),
        ];
        let per = domainwise_report(&turns);
        assert_eq!(
            per.keys().cloned().collect::<Vec<_>>(),
            ["navigate", "other", "schedule", "weather"]
        );
        assert_eq!(per["schedule"], 1.0);
        assert_eq!(per["navigate"], 0.0);
        let single = vec![turn("hotel", &["a", "b"], &["a"])];
        let report = EvalReport::from_turns(&single, None);
        assert_eq!(report.per_domain.len(), 1);
        assert_eq!(report.per_domain["hotel"], report.entity_f1);
        assert!(report.to_csv().contains("entity_f1[hotel]"));
    }

    fn entity_sets() -> impl Strategy<Value = Vec<(BTreeSet<String>, BTreeSet<String>)>> {
        let one = proptest::collection::btree_set("[a-f]", 0..5);
        proptest::collection::vec((one.clone(), one), 0..30)
    }

    proptest! {
        #[test]
        fn f1_bounded_and_symmetric(sets in entity_sets()) {
            let counts: EntityCounts = sets.iter().map(|(p, g)| EntityCounts::from_sets(p, g)).sum();
            for x in [counts.precision(), counts.recall(), counts.f1()] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let nonempty: Vec<_> = sets.iter().filter(|(p, g)| !p.is_empty() && !g.is_empty()).collect();
            let a: EntityCounts = nonempty.iter().map(|(p, g)| EntityCounts::from_sets(p, g)).sum();
            let b: EntityCounts = nonempty.iter().map(|(p, g)| EntityCounts::from_sets(g, p)).sum();
            prop_assert_eq!(a.precision(), b.recall());
            prop_assert_eq!(a.recall(), b.precision());
            prop_assert!((a.f1() - b.f1()).abs() < 1e-12);
        }

        #[test]
        fn counts_are_additive(sets in entity_sets(), split in 0usize..30) {
            let split = split.min(sets.len());
            let total: EntityCounts = sets.iter().map(|(p, g)| EntityCounts::from_sets(p, g)).sum();
            let left: EntityCounts = sets[..split].iter().map(|(p, g)| EntityCounts::from_sets(p, g)).sum();
            let right: EntityCounts = sets[split..].iter().map(|(p, g)| EntityCounts::from_sets(p, g)).sum();
            prop_assert_eq!(total, left.merge(right));
        }

        #[test]
        fn bleu_identity_and_case(corpus in proptest::collection::vec("[a-zA-Z]{1,4}( [a-zA-Z]{1,4}){0,6}", 1..8)) {
            let b = bleu(&corpus, &corpus);
            prop_assert!((b - 1.0).abs() < 1e-12);
            let upper: Vec<String> = corpus.iter().map(|s| s.to_uppercase()).collect();
            let other: Vec<String> = corpus.iter().rev().cloned().collect();
            let upper_other: Vec<String> = other.iter().map(|s| s.to_uppercase()).collect();
            prop_assert_eq!(bleu(&upper, &other), bleu(&corpus, &upper_other));
            let x = bleu(&corpus, &other);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn recall_monotone_in_n(
            data in proptest::collection::vec(
                (proptest::collection::vec(0u8..8, 0..6), proptest::collection::vec(0u8..8, 0..3)),
                1..20,
            )
        ) {
            let ranked: Vec<Vec<String>> = data.iter().map(|(r, _)| r.iter().map(|x| x.to_string()).collect()).collect();
            let gold: Vec<Vec<String>> = data.iter().map(|(_, g)| g.iter().map(|x| x.to_string()).collect()).collect();
            let mut prev = 0.0;
            for n in 1..=6 {
                let r = recall_at_n(&ranked, &gold, n);
                prop_assert!(r >= prev);
                prev = r;
            }
        }
    }
}
