//! Batch subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use qtod_core::data::convert::{convert_camrest, convert_smd};
use qtod_core::data::{
    build_crossdomain as merge_crossdomain, dataset_stats, dialogue_stats, fewshot_split,
    load_dataset, load_dialogues, write_dataset, write_dialogues, AnnotatedDialogue,
    CrossDomainRecipe, DatasetSplit, LoadOptions, Partition,
};
use qtod_core::eval::{
    evaluate_dialogues, power_of_two_sizes, run_dialogues, run_scaling_benchmark,
    run_topn_ablation, score_results, topn_table_csv, EvalOptions, EvalReport, Lexicon,
    ScalingMetric,
};
use qtod_core::kb::{load_kb, merge_to_dataset_level, KbFormat, KnowledgeBase};
use qtod_core::pipeline::{
    export_training_pairs, write_training_pairs, write_turn_results, PromptBuilder,
    TrainingKnowledge, TurnResult,
};
use qtod_core::retriever::IndexConfig;
use qtod_core::synth::{distractor_pool, generate_split, SynthConfig, MAX_KB_SIZE};

use crate::config::{run_dir, run_id, PipelineArgs, RunConfig};
use crate::{ConvertFormat, DataArgs, KnowledgeSource, Usage};

const RUN_OPTIONS: LoadOptions = LoadOptions {
    require_queries: false,
    require_responses: false,
};

const EVAL_OPTIONS: LoadOptions = LoadOptions {
    require_queries: false,
    require_responses: true,
};

fn partition(name: &str) -> Result<Partition> {
    name.parse::<Partition>()
        .map_err(|e| Usage(e.to_string()).into())
}

fn ratio3(ratio: &[usize]) -> Result<[usize; 3]> {
    match ratio {
        [a, b, c] if a + b + c > 0 => Ok([*a, *b, *c]),
        _ => bail!(Usage(
            "--ratio takes three weights with a positive sum".into()
        )),
    }
}

/// Reads one partition of a dataset directory, or every dialogue of a JSONL file.
pub fn load_data(data: &DataArgs, options: LoadOptions) -> Result<Vec<AnnotatedDialogue>> {
    if data.dataset.is_dir() {
        let split = load_dataset(&data.dataset, options)?;
        Ok(split.partition(partition(&data.split)?).to_vec())
    } else {
        Ok(load_dialogues(&data.dataset, options)?)
    }
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// An output directory keyed by run id, seeded with a metadata file.
struct Run {
    dir: PathBuf,
}

impl Run {
    fn start(out: &Path, command: &str, config: &RunConfig, inputs: Value) -> Result<Self> {
        let id = run_id(&config.hash());
        let dir = run_dir(out, &id)?;
        let metadata = json!({
            "run_id": id,
            "command": command,
            "created_at": chrono::Utc::now().to_rfc3339(),
            "config": config,
            "config_hash": config.hash(),
            "inputs": inputs,
        });
        write_json(&dir.join("metadata.json"), &metadata)?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn data_inputs(data: &DataArgs) -> Value {
    json!({"dataset": data.dataset, "split": data.split})
}

fn options(config: &RunConfig) -> EvalOptions {
    EvalOptions {
        mode: config.mode,
        top_n: config.top_n,
        jobs: config.jobs,
    }
}

fn write_results(path: &Path, results: &[TurnResult]) -> Result<()> {
    let mut out = create(path)?;
    write_turn_results(&mut out, results)?;
    out.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(data: &DataArgs, args: &PipelineArgs, out: &Path) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    let dialogues = load_data(data, RUN_OPTIONS)?;
    let pipeline = config.pipeline()?;
    let results = run_dialogues(&pipeline, &dialogues, options(&config))?;
    let run = Run::start(out, "run", &config, data_inputs(data))?;
    write_results(&run.path("results.jsonl"), &results)?;
    eprintln!("{} turns over {} dialogues", results.len(), dialogues.len());
    Ok(())
}

fn read_results(path: &Path) -> Result<Vec<TurnResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Usage(format!("{}:{}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

fn load_lexicon(path: Option<&Path>) -> Result<Option<Lexicon>> {
    path.map(|p| Ok(Lexicon::from_kb(&load_kb(p, KbFormat::SessionJson)?)))
        .transpose()
}

fn write_report(run: &Run, report: &EvalReport) -> Result<()> {
    write_json(&run.path("report.json"), report)?;
    write_text(&run.path("report.csv"), &report.to_csv())?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn eval(
    data: &DataArgs,
    args: &PipelineArgs,
    results: Option<&Path>,
    lexicon: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    let dialogues = load_data(data, EVAL_OPTIONS)?;
    let lexicon = load_lexicon(lexicon)?;
    let mut inputs = data_inputs(data);
    inputs["results"] = json!(results);
    match results {
        Some(path) => {
            let results = read_results(path)?;
            let report = score_results(&results, &dialogues, lexicon.as_ref())?;
            let run = Run::start(out, "eval", &config, inputs)?;
            write_report(&run, &report)
        }
        None => {
            let pipeline = config.pipeline()?;
            let evaluation =
                evaluate_dialogues(&pipeline, &dialogues, options(&config), lexicon.as_ref())?;
            let run = Run::start(out, "eval", &config, inputs)?;
            let mut results = evaluation.results;
            results.sort_by(|a, b| (&a.session_id, a.turn).cmp(&(&b.session_id, b.turn)));
            write_results(&run.path("results.jsonl"), &results)?;
            write_report(&run, &evaluation.report)
        }
    }
}

/// The merged knowledge base of every dialogue reachable from `data`.
fn dataset_pool(data: &DataArgs) -> Result<KnowledgeBase> {
    let dialogues: Vec<AnnotatedDialogue> = if data.dataset.is_dir() {
        load_dataset(&data.dataset, RUN_OPTIONS)?
            .all()
            .cloned()
            .collect()
    } else {
        load_dialogues(&data.dataset, RUN_OPTIONS)?
    };
    let kbs: Vec<KnowledgeBase> = dialogues.into_iter().map(|d| d.kb).collect();
    Ok(merge_to_dataset_level(&kbs))
}

pub fn bench_kb(
    data: &DataArgs,
    args: &PipelineArgs,
    pool: Option<&Path>,
    sizes: Option<Vec<usize>>,
    (min_exp, max_exp): (u32, u32),
    metric: &str,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    let metric: ScalingMetric = metric.parse().map_err(Usage)?;
    let sizes = match sizes {
        Some(sizes) => sizes,
        None if min_exp <= max_exp && max_exp < usize::BITS => power_of_two_sizes(min_exp, max_exp),
        None => bail!(Usage("--min-exp must not exceed --max-exp".into())),
    };
    let dialogues = load_data(data, EVAL_OPTIONS)?;
    let pool = match pool {
        Some(path) => load_kb(path, KbFormat::SessionJson)?,
        None => dataset_pool(data)?,
    };
    let pipeline = config.pipeline()?;
    let curve = run_scaling_benchmark(
        &pipeline,
        &dialogues,
        &pool,
        &sizes,
        options(&config),
        config.seed,
    )?;
    let mut inputs = data_inputs(data);
    inputs["pool"] = json!(pool.len());
    inputs["sizes"] = json!(sizes);
    let run = Run::start(out, "bench-kb", &config, inputs)?;
    write_json(&run.path("scaling.json"), &curve)?;
    write_text(&run.path("scaling.csv"), &curve.to_csv(metric))?;
    println!(
        "{:>8}{:>12}{:>12}{:>14}{:>14}",
        "kb_size", "entity_f1", "recall", "latency_ms", "prompt_len"
    );
    for p in &curve.points {
        println!(
            "{:>8}{:>12.4}{:>12.4}{:>14.4}{:>14.1}",
            p.kb_size,
            p.entity_f1,
            p.recall,
            p.mean_retrieve_latency_ms,
            p.mean_response_prompt_len
        );
    }
    Ok(())
}

pub fn topn(data: &DataArgs, args: &PipelineArgs, n_values: &[usize], out: &Path) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    if n_values.is_empty() || n_values.contains(&0) {
        bail!(Usage("--n-values must be positive".into()));
    }
    let dialogues = load_data(data, EVAL_OPTIONS)?;
    let pipeline = config.pipeline()?;
    let rows = run_topn_ablation(&pipeline, &dialogues, n_values, options(&config))?;
    let mut inputs = data_inputs(data);
    inputs["n_values"] = json!(n_values);
    let run = Run::start(out, "topn", &config, inputs)?;
    write_json(&run.path("topn.json"), &rows)?;
    let table = topn_table_csv(&rows);
    write_text(&run.path("topn.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn load_recipe(recipe: &str) -> Result<CrossDomainRecipe> {
    match recipe {
        "smd-camrest" => Ok(CrossDomainRecipe::smd_camrest()),
        "smd-camrest-mwoz" => Ok(CrossDomainRecipe::smd_camrest_mwoz()),
        path => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading recipe {path}"))?;
            serde_json::from_str(&text).map_err(|e| Usage(format!("{path}: {e}")).into())
        }
    }
}

pub fn build_crossdomain(
    sources: &[String],
    recipe_name: &str,
    count: usize,
    ratio: &[usize],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ratio = ratio3(ratio)?;
    let recipe = load_recipe(recipe_name)?;
    let mut loaded = Vec::with_capacity(sources.len());
    for source in sources {
        let (name, dir) = source
            .split_once('=')
            .ok_or_else(|| Usage(format!("--source expects NAME=DIR, got {source:?}")))?;
        loaded.push((name.to_string(), load_dataset(dir, RUN_OPTIONS)?));
    }
    let split = merge_crossdomain(&loaded, &recipe, count, ratio, seed)?;
    write_dataset(out, &split)?;
    let metadata = json!({
        "command": "build-crossdomain",
        "seed": seed,
        "count": count,
        "ratio": ratio,
        "recipe": recipe,
        "sources": sources,
        "sizes": [split.train.len(), split.validation.len(), split.test.len()],
    });
    write_json(&out.join("metadata.json"), &metadata)?;
    println!(
        "train {} / validation {} / test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

pub fn fewshot(dataset: &Path, fraction: f64, seed: u64, out: &Path) -> Result<()> {
    let split = load_dataset(dataset, RUN_OPTIONS)?;
    let train = fewshot_split(&split.train, fraction, seed)?;
    let reduced = DatasetSplit {
        train,
        ..split.clone()
    };
    write_dataset(out, &reduced)?;
    let metadata = json!({
        "command": "fewshot",
        "source": dataset,
        "fraction": fraction,
        "seed": seed,
        "train": reduced.train.len(),
        "source_train": split.train.len(),
    });
    write_json(&out.join("metadata.json"), &metadata)?;
    println!("train {} of {}", reduced.train.len(), split.train.len());
    Ok(())
}

pub fn export_training(
    data: &DataArgs,
    knowledge: KnowledgeSource,
    top_n: usize,
    max_input_tokens: usize,
    out: &Path,
) -> Result<()> {
    if top_n == 0 {
        bail!(Usage("--top-n must be at least 1".into()));
    }
    let dialogues = load_data(data, RUN_OPTIONS)?;
    let knowledge = match knowledge {
        KnowledgeSource::Retrieved => TrainingKnowledge::GoldQueryRetrieved,
        KnowledgeSource::Gold => TrainingKnowledge::GoldRecords,
    };
    let prompts = PromptBuilder {
        max_input_tokens: Some(max_input_tokens),
        ..PromptBuilder::default()
    };
    let outcome =
        export_training_pairs(&dialogues, knowledge, &prompts, &IndexConfig::bm25(), top_n)?;
    let mut file = create(out)?;
    write_training_pairs(&mut file, &outcome.pairs)?;
    file.flush()?;
    println!("wrote {}", out.display());
    eprintln!(
        "{} pairs, {} turns skipped",
        outcome.pairs.len(),
        outcome.skipped_turns
    );
    Ok(())
}

pub fn stats(dataset: &Path) -> Result<()> {
    let report = if dataset.is_dir() {
        let split = load_dataset(dataset, RUN_OPTIONS)?;
        json!({
            "all": dataset_stats(&split),
            "train": dialogue_stats(&split.train),
            "validation": dialogue_stats(&split.validation),
            "test": dialogue_stats(&split.test),
        })
    } else {
        json!({"all": dialogue_stats(&load_dialogues(dataset, RUN_OPTIONS)?)})
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    dialogues: usize,
    kb_size: usize,
    revision_prob: f64,
    seed: u64,
    ratio: &[usize],
    pool_size: Option<usize>,
    out: &Path,
) -> Result<()> {
    if kb_size == 0 || kb_size > MAX_KB_SIZE {
        bail!(Usage(format!(
            "--kb-size must be between 1 and {MAX_KB_SIZE}"
        )));
    }
    if !(0.0..=1.0).contains(&revision_prob) {
        bail!(Usage("--revision-prob must lie in [0, 1]".into()));
    }
    let config = SynthConfig {
        dialogues,
        kb_size,
        revision_prob,
        seed,
    };
    let split = generate_split(&config, ratio3(ratio)?);
    write_dataset(out, &split)?;
    if let Some(size) = pool_size {
        write_json(
            &out.join("pool.json"),
            &distractor_pool(size, seed).to_file(),
        )?;
    }
    println!(
        "train {} / validation {} / test {}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

pub fn convert(format: ConvertFormat, input: &Path, db: Option<&Path>, out: &Path) -> Result<()> {
    let raw = read_json(input)?;
    let dialogues = match format {
        ConvertFormat::Smd => convert_smd(&raw)?,
        ConvertFormat::Camrest => {
            let db = db.ok_or_else(|| Usage("--db is required for camrest".into()))?;
            convert_camrest(&raw, &read_json(db)?)?
        }
    };
    let mut file = create(out)?;
    write_dialogues(&mut file, &dialogues)?;
    file.flush()?;
    println!("wrote {} ({} dialogues)", out.display(), dialogues.len());
    Ok(())
}
