mod manifest;
mod records;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use caprl_core::config::Config;
use caprl_core::metrics::{
    evaluate_corpus, mean_present, AggregateWeights, Answer, Averaging, CorpusReport, NormalizedExact,
};
use caprl_core::reward::total_reward;
use caprl_core::scene_graph::Parser;
use caprl_core::sim_rl::{generate_scenes, train, write_trace_csv, SceneRecord, SyntheticScene};
use caprl_core::similarity::{Backend, MissPolicy};
use clap::{CommandFactory, Parser as ClapParser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use manifest::{InputDigest, RunManifest};
use records::{eval_item, jsonl_lines, reward_pair, CaptionRecord};

#[derive(Debug, ClapParser)]
#[command(
    name = "caprl",
    version,
    about = "Caption scene graphs, correction rewards, refined metrics and a policy-gradient simulator"
)]
struct Cli {
    /// Flat TOML file of reward and training keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Similarity backend: exact, ngram, ngram:N or vectors:PATH.
    #[arg(long, global = true, default_value = "ngram")]
    backend: String,

    /// Random seed; required by `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fail on malformed records and vector-table misses instead of skipping.
    #[arg(long, global = true)]
    strict: bool,

    /// Override a config key, e.g. `--set kl_beta=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AveragingArg {
    Macro,
    Micro,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse captions (`{"caption": ...}` per line) into scene graphs.
    Parse {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score `{"y1", "y2", "gt"}` records with the correction reward.
    Reward {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate candidate captions or graphs against references.
    Evaluate {
        #[arg(short, long)]
        input: PathBuf,
        /// Relation QA answers, `{"image_id", "q_index", "answer"}` per line.
        #[arg(long)]
        answers: Option<PathBuf>,
        /// Object, attribute and relation weights of the aggregate.
        #[arg(long, default_value = "5,5,2")]
        weights: AggregateWeights,
        #[arg(long, value_enum, default_value = "macro")]
        averaging: AveragingArg,
        /// Report JSON.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the two-turn policy on synthetic scenes.
    Simulate {
        /// Scene JSONL; scenes are generated from the seed when omitted.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        num_scenes: usize,
        #[arg(long, default_value_t = 4)]
        truth_elements: usize,
        #[arg(long, default_value_t = 2)]
        distractors: usize,
        /// Trace CSV (step, mean_reward, f1_turn1, f1_turn2).
        #[arg(long)]
        trace: PathBuf,
        /// Final policy JSON.
        #[arg(long)]
        policy: PathBuf,
    },
}

/// Startup problems with configuration or flags (exit code 2).
#[derive(Debug)]
struct ConfigFailure(String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use caprl_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigFailure>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::UnknownConfigKey(_) | E::VectorTable { .. } => 2,
                E::Divergence { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

struct Session {
    config: Config,
    backend: Backend,
    parser: Parser,
    seed: Option<u64>,
    strict: bool,
    backend_descriptor: String,
}

impl Session {
    fn manifest(&self, command: &str, inputs: Vec<InputDigest>, options: BTreeMap<String, Value>) -> RunManifest {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            inputs,
            config: self.config.to_table(),
            backend: self.backend_descriptor.clone(),
            rng_seed: self.seed,
            strict: self.strict,
            options,
        }
    }

    fn report_misses(&self) {
        let misses = self.backend.miss_count();
        if misses > 0 {
            eprintln!("note: {misses} vector-table lookups fell back to character n-grams");
        }
    }
}

fn read_input(path: &Path) -> Result<(String, InputDigest)> {
    let bytes = fs::read(path).map_err(|e| caprl_core::Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let digest = InputDigest::of_bytes(path, &bytes);
    let text =
        String::from_utf8(bytes).map_err(|_| caprl_core::Error::Input(format!("{} is not UTF-8", path.display())))?;
    Ok((text, digest))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// Reports per-record failures; under `--strict` any failure aborts before
/// output is written.
fn check_records(failures: &[(usize, String)], strict: bool) -> Result<()> {
    for (line, msg) in failures {
        eprintln!("line {line}: {msg}");
    }
    if strict && !failures.is_empty() {
        return Err(caprl_core::Error::Input(format!("{} malformed record(s) (--strict)", failures.len())).into());
    }
    Ok(())
}

fn with_id(mut record: serde_json::Map<String, Value>, id: Option<Value>) -> Value {
    if let Some(id) = id {
        record.insert("id".into(), id);
    }
    Value::Object(record)
}

fn cmd_parse(ctx: &Session, input: &Path, output: &Path) -> Result<()> {
    let (text, digest) = read_input(input)?;
    let results: Vec<(usize, Result<Value>)> = jsonl_lines(&text)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(line, raw)| {
            let parsed = (|| -> Result<Value> {
                let record: CaptionRecord = serde_json::from_str(raw).context("not a caption record")?;
                let report = ctx.parser.parse(&record.caption)?;
                let mut out = serde_json::Map::new();
                out.insert("line".into(), json!(line));
                out.insert("graph".into(), serde_json::to_value(report.graph.to_record())?);
                out.insert("clauses".into(), json!(report.clauses));
                out.insert("skipped_clauses".into(), json!(report.skipped_clauses));
                Ok(with_id(out, record.id))
            })();
            (line, parsed)
        })
        .collect();

    let failures: Vec<(usize, String)> = results
        .iter()
        .filter_map(|(line, r)| r.as_ref().err().map(|e| (*line, format!("{e:#}"))))
        .collect();
    check_records(&failures, ctx.strict)?;

    let mut out = create(output)?;
    let mut skipped_clauses = 0;
    for (_, record) in results.iter().filter_map(|(l, r)| r.as_ref().ok().map(|v| (l, v))) {
        skipped_clauses += record["skipped_clauses"].as_u64().unwrap_or(0);
        writeln!(out, "{}", serde_json::to_string(record)?)?;
    }
    out.flush()?;
    let manifest = ctx.manifest("parse", vec![digest], BTreeMap::new());
    manifest.write_sidecar(output)?;
    eprintln!(
        "parsed {} caption(s), {} malformed line(s) skipped, {skipped_clauses} clause(s) outside the grammar",
        results.len() - failures.len(),
        failures.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct RewardSummary {
    records: usize,
    scored: usize,
    errors: usize,
    mean_total: Option<f64>,
}

fn cmd_reward(ctx: &Session, input: &Path, output: &Path) -> Result<()> {
    let (text, digest) = read_input(input)?;
    let cfg = &ctx.config.reward;
    let results: Vec<(usize, Option<Value>, Result<caprl_core::reward::RewardBreakdown>)> = jsonl_lines(&text)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(line, raw)| match reward_pair(raw, &ctx.parser) {
            Ok(pair) => {
                let scored = total_reward(&pair.y1, &pair.y2, &pair.gt, &ctx.backend, cfg).map_err(Into::into);
                (line, pair.id, scored)
            }
            Err(e) => {
                let id = serde_json::from_str::<Value>(raw)
                    .ok()
                    .and_then(|v| v.get("id").cloned());
                (line, id, Err(e))
            }
        })
        .collect();

    // Backend misses under --strict are fatal rather than per-record.
    for (_, _, r) in &results {
        if let Err(e) = r {
            if let Some(err @ caprl_core::Error::MissingPhrase(_)) = e.downcast_ref::<caprl_core::Error>() {
                return Err(anyhow!("{err}")).context("vector-table miss under --strict");
            }
        }
    }
    let failures: Vec<(usize, String)> = results
        .iter()
        .filter_map(|(line, _, r)| r.as_ref().err().map(|e| (*line, format!("{e:#}"))))
        .collect();
    check_records(&failures, ctx.strict)?;

    let mut out = create(output)?;
    for (line, id, r) in &results {
        let mut record = serde_json::Map::new();
        record.insert("line".into(), json!(line));
        match r {
            Ok(b) => record.insert("breakdown".into(), serde_json::to_value(b)?),
            Err(e) => record.insert("error".into(), json!(format!("{e:#}"))),
        };
        writeln!(out, "{}", serde_json::to_string(&with_id(record, id.clone()))?)?;
    }
    out.flush()?;
    ctx.manifest("reward", vec![digest], BTreeMap::new())
        .write_sidecar(output)?;
    ctx.report_misses();

    let summary = RewardSummary {
        records: results.len(),
        scored: results.len() - failures.len(),
        errors: failures.len(),
        mean_total: mean_present(results.iter().map(|(_, _, r)| r.as_ref().ok().map(|b| b.total))),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn render_table(report: &CorpusReport) -> String {
    let s = &report.summary;
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>9} {:>9} {:>9}\n", "", "precision", "recall", "f1"));
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9}\n",
        "objects",
        fmt_score(s.object_precision),
        fmt_score(s.object_recall),
        fmt_score(s.object_f1)
    ));
    out.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9}\n",
        "attributes",
        fmt_score(s.attr_precision),
        fmt_score(s.attr_recall),
        fmt_score(s.attr_f1)
    ));
    out.push_str(&format!(
        "relation QA accuracy: {}  ({} of {})\n",
        fmt_score(s.relation_qa_accuracy),
        report.qa_matched,
        report.qa_total
    ));
    let w = report.weights;
    out.push_str(&format!(
        "aggregate ({},{},{}): {}\n",
        w.objects,
        w.attributes,
        w.relations,
        fmt_score(s.aggregate)
    ));
    if let Some(e) = s.edit_stats {
        out.push_str(&format!(
            "edits: {} inserted, {} deleted, length {:+}\n",
            e.inserted, e.deleted, e.length_delta
        ));
    }
    out.push_str(&format!("images: {}  averaging: {:?}\n", report.images.len(), report.averaging).to_lowercase());
    out
}

fn cmd_evaluate(
    ctx: &Session,
    input: &Path,
    answers_path: Option<&Path>,
    weights: AggregateWeights,
    averaging: Averaging,
    output: &Path,
) -> Result<()> {
    let (text, digest) = read_input(input)?;
    let mut inputs = vec![digest];

    let parsed: Vec<(usize, Result<_>)> = jsonl_lines(&text)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(line, raw)| (line, eval_item(raw, &ctx.parser)))
        .collect();
    let failures: Vec<(usize, String)> = parsed
        .iter()
        .filter_map(|(line, r)| r.as_ref().err().map(|e| (*line, format!("{e:#}"))))
        .collect();
    check_records(&failures, ctx.strict)?;
    let items: Vec<_> = parsed.into_iter().filter_map(|(_, r)| r.ok()).collect();

    let answers = match answers_path {
        Some(path) => {
            let (text, digest) = read_input(path)?;
            inputs.push(digest);
            let mut answers = Vec::new();
            for (line, raw) in jsonl_lines(&text) {
                let answer: Answer = serde_json::from_str(raw)
                    .map_err(|e| caprl_core::Error::Input(format!("{}:{line}: {e}", path.display())))?;
                answers.push(answer);
            }
            Some(answers)
        }
        None => None,
    };

    let report = evaluate_corpus(
        &items,
        answers.as_deref(),
        &NormalizedExact,
        &ctx.backend,
        weights,
        averaging,
    )?;
    let options = BTreeMap::from([
        ("weights".to_string(), serde_json::to_value(weights)?),
        ("averaging".to_string(), serde_json::to_value(averaging)?),
    ]);
    let manifest = ctx.manifest("evaluate", inputs, options);
    let document = json!({ "manifest": manifest, "report": report });
    fs::write(output, serde_json::to_string_pretty(&document)? + "\n")
        .with_context(|| format!("cannot write {}", output.display()))?;
    ctx.report_misses();
    print!("{}", render_table(&report));
    Ok(())
}

struct SceneSource<'a> {
    path: Option<&'a Path>,
    count: usize,
    truth: usize,
    distractors: usize,
}

fn cmd_simulate(ctx: &Session, source: SceneSource<'_>, trace_path: &Path, policy_path: &Path) -> Result<()> {
    let seed = ctx
        .seed
        .ok_or_else(|| ConfigFailure("simulate requires --seed".into()))?;
    let mut cfg = ctx.config.train.clone();
    cfg.rng_seed = seed;

    let mut inputs = Vec::new();
    let mut options = BTreeMap::new();
    let scenes: Vec<SyntheticScene> = match source.path {
        Some(path) => {
            let (text, digest) = read_input(path)?;
            inputs.push(digest);
            let mut scenes = Vec::new();
            for (line, raw) in jsonl_lines(&text) {
                let scene = serde_json::from_str::<SceneRecord>(raw)
                    .map_err(|e| anyhow!(e))
                    .and_then(|r| r.into_scene().map_err(Into::into))
                    .map_err(|e| caprl_core::Error::Input(format!("{}:{line}: {e:#}", path.display())))?;
                scenes.push(scene);
            }
            scenes
        }
        None => {
            options.insert("num_scenes".into(), json!(source.count));
            options.insert("truth_elements".into(), json!(source.truth));
            options.insert("distractors".into(), json!(source.distractors));
            generate_scenes(source.count, source.truth, source.distractors, seed)
        }
    };
    if scenes.is_empty() {
        return Err(caprl_core::Error::Input("no scenes to train on".into()).into());
    }

    let outcome = train(&scenes, &cfg, &ctx.config.reward, &ctx.backend)?;

    let mut config = ctx.config.clone();
    config.train = cfg;
    let manifest = RunManifest {
        config: config.to_table(),
        ..ctx.manifest("simulate", inputs, options)
    };

    let mut out = create(trace_path)?;
    write_trace_csv(&outcome.trace, &mut out)?;
    out.flush()?;
    manifest.write_sidecar(trace_path)?;

    let last = outcome.trace.last().copied();
    let document = json!({
        "manifest": manifest,
        "scenes": scenes.iter().map(SceneRecord::from_scene).collect::<Vec<_>>(),
        "final": last,
        "policy": outcome.policy,
        "reference": outcome.reference,
    });
    fs::write(policy_path, serde_json::to_string_pretty(&document)? + "\n")
        .with_context(|| format!("cannot write {}", policy_path.display()))?;
    ctx.report_misses();
    if let (Some(first), Some(last)) = (outcome.trace.first(), last) {
        println!(
            "steps {}  F1(y2) {:.4} -> {:.4}  F1(y1) {:.4}  mean reward {:.4}",
            outcome.trace.len(),
            first.f1_turn2,
            last.f1_turn2,
            last.f1_turn1,
            last.mean_reward
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let config = config.with_overrides(&cli.overrides)?;
    let policy = if cli.strict {
        MissPolicy::Error
    } else {
        MissPolicy::Fallback
    };
    let backend = Backend::from_descriptor(&cli.backend)?.with_miss_policy(policy);
    let ctx = Session {
        config,
        backend_descriptor: backend.to_string(),
        backend,
        parser: Parser::default(),
        seed: cli.seed,
        strict: cli.strict,
    };

    match &cli.command {
        Command::Parse { input, output } => cmd_parse(&ctx, input, output),
        Command::Reward { input, output } => cmd_reward(&ctx, input, output),
        Command::Evaluate {
            input,
            answers,
            weights,
            averaging,
            output,
        } => {
            let averaging = match averaging {
                AveragingArg::Macro => Averaging::Macro,
                AveragingArg::Micro => Averaging::Micro,
            };
            cmd_evaluate(&ctx, input, answers.as_deref(), *weights, averaging, output)
        }
        Command::Simulate {
            scenes,
            num_scenes,
            truth_elements,
            distractors,
            trace,
            policy,
        } => cmd_simulate(
            &ctx,
            SceneSource {
                path: scenes.as_deref(),
                count: *num_scenes,
                truth: *truth_elements,
                distractors: *distractors,
            },
            trace,
            policy,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::Simulate { .. }) && cli.seed.is_none() {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingRequiredArgument,
                "simulate requires --seed <SEED>",
            )
            .exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
