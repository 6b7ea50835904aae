use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use retgen::bench::{
    aligned_recall_at_k, count_costs, event_rankings, exact_match, final_answer, run_timed, token_f1, BenchModels,
    CostReport, Method, Workload, COST_CSV_HEADER,
};
use retgen::index::{embed_documents, load_index, save_index};
use retgen::inference::{generate_el, generate_plain, generate_rag, prompt_ids, Limits, Mode, Transcript};
use retgen::model::{load_checkpoint_for_vocab, save_checkpoint};
use retgen::reconstruct::{build_dataset, parse_jsonl, BuildOptions, Dataset, DocRef, InputRecords, Template};
use retgen::trainer::{train, TrainConfig};
use retgen::vocab::EOS;
use retgen::ErrorKind;

use crate::config::{RunConfig, ScenarioFile};
use crate::manifest::RunManifest;
use crate::{BenchArgs, Cli, Command, EmbedArgs, EvalArgs, InferArgs, ReconstructArgs, TrainArgs};

const DEFAULT_SEED: u64 = 42;

/// Bad flags or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(err) = e.chain().find_map(|c| c.downcast_ref::<retgen::Error>()) {
        return match err.kind() {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Io => 5,
        };
    }
    if e.chain().any(|c| c.is::<toml::de::Error>()) {
        return 2;
    }
    if e.chain().any(|c| c.is::<std::io::Error>()) {
        return 5;
    }
    3
}

struct Ctx {
    config: RunConfig,
    seed: u64,
    out: PathBuf,
    config_path: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    let seed = cli.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let out = cli.out.clone().ok_or_else(|| usage("--out is required"))?;
    let ctx = Ctx {
        config,
        seed,
        out,
        config_path: cli.config.clone(),
    };
    match cli.command {
        Command::Reconstruct(a) => reconstruct(&ctx, &a),
        Command::Train(a) => train_cmd(&ctx, &a),
        Command::Embed(a) => embed(&ctx, &a),
        Command::Infer(a) => infer(&ctx, &a),
        Command::Bench(a) => bench(&ctx, &a),
        Command::Eval(a) => eval(&ctx, &a),
    }
}

fn manifest(ctx: &Ctx, command: &str, config: serde_json::Value) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, ctx.seed, config);
    if let Some(p) = &ctx.config_path {
        m.input(p)?;
    }
    Ok(m)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn reconstruct(ctx: &Ctx, a: &ReconstructArgs) -> Result<()> {
    let template: Template = a.template.parse().map_err(|e: retgen::Error| usage(e.to_string()))?;
    let corpus = parse_jsonl(&read(&a.corpus)?).with_context(|| format!("in {}", a.corpus.display()))?;
    let records =
        InputRecords::parse_jsonl(template, &read(&a.input)?).with_context(|| format!("in {}", a.input.display()))?;
    let r = &ctx.config.reconstruct;
    let defaults = BuildOptions::default();
    let options = BuildOptions {
        seed: ctx.seed,
        granularity: r.granularity,
        negatives_per_anchor: r.negatives_per_anchor.unwrap_or(defaults.negatives_per_anchor),
        window: r.window,
    };
    let ds = build_dataset(&corpus, &records, options.clone())?;
    let problems = ds.validate();
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invalid: {p}");
        }
        bail!(retgen::Error::InvalidInput(format!("{} validation problems", problems.len())));
    }
    ds.save(&ctx.out)?;
    let anchors: usize = ds.examples.iter().map(|e| e.anchors.len()).sum();
    println!(
        "{} examples, {} anchors, {} documents, vocabulary {}",
        ds.examples.len(),
        anchors,
        ds.corpus.len(),
        ds.vocab.len()
    );
    let mut m = manifest(
        ctx,
        "reconstruct",
        json!({
            "template": template.as_str(),
            "granularity": options.granularity,
            "negatives_per_anchor": options.negatives_per_anchor,
            "window": options.window,
        }),
    )?;
    m.input(&a.input)?;
    m.input(&a.corpus)?;
    m.output(&ctx.out)?;
    m.write(&ctx.out)?;
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let mut cfg = TrainConfig::new(ctx.config.model_config(ds.vocab.len(), ctx.seed), ctx.config.hyper());
    cfg.seed = ctx.seed;
    if let Some(v) = ctx.config.train.variant {
        cfg.variant = v;
    }
    cfg.checkpoint_every = ctx.config.train.checkpoint_every.unwrap_or(0);
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    if cfg.checkpoint_every > 0 {
        cfg.checkpoint_dir = Some(ctx.out.join("checkpoints"));
    }
    cfg.model.validate()?;
    cfg.hyper.validate()?;
    let (params, run) = train(&ds, &cfg)?;
    let model_path = ctx.out.join("model.ckpt");
    save_checkpoint(&params, &model_path)?;
    let loss_path = ctx.out.join("loss.csv");
    write_file(&loss_path, run.loss_csv())?;
    if let Some(last) = run.loss_history.last() {
        println!(
            "{} steps, final L_g {:.6} L_r {:.6} L {:.6}",
            run.loss_history.len(),
            last.l_g,
            last.l_r,
            last.l
        );
    }
    let mut m = manifest(ctx, "train", serde_json::to_value(&cfg)?)?;
    m.input(&a.dataset)?;
    m.output(&model_path)?;
    m.output(&loss_path)?;
    for c in &run.checkpoints {
        m.output(c)?;
    }
    m.write(&ctx.out)?;
    Ok(())
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let params = load_checkpoint_for_vocab(&a.checkpoint, ds.vocab.len())?;
    let index = embed_documents(&params, &ds.corpus)?;
    save_index(&index, &ctx.out)?;
    println!("{} rows of dimension {}", index.len(), index.dim());
    let mut m = manifest(ctx, "embed", json!({ "model_fingerprint": index.model_fingerprint }))?;
    m.input(&a.checkpoint)?;
    m.input(&a.dataset)?;
    m.output(&ctx.out)?;
    m.write(&ctx.out)?;
    Ok(())
}

fn infer(ctx: &Ctx, a: &InferArgs) -> Result<()> {
    let mode: Mode = a.mode.parse().map_err(|e: retgen::Error| usage(e.to_string()))?;
    let ds = Dataset::load(&a.dataset)?;
    let params = load_checkpoint_for_vocab(&a.checkpoint, ds.vocab.len())?;
    let defaults = Limits::default();
    let limits = Limits {
        max_new_tokens: a
            .max_new_tokens
            .or(ctx.config.infer.max_new_tokens)
            .unwrap_or(defaults.max_new_tokens),
        top_k: a.top_k.or(ctx.config.infer.top_k).unwrap_or(defaults.top_k),
        ..defaults
    };
    if limits.top_k < 1 {
        return Err(usage("--top-k must be >= 1"));
    }
    let mut m = manifest(
        ctx,
        "infer",
        json!({
            "mode": mode.as_str(),
            "top_k": limits.top_k,
            "max_new_tokens": limits.max_new_tokens,
        }),
    )?;
    let index = match (mode, &a.index) {
        (Mode::Plain, _) => None,
        (_, None) => return Err(usage(format!("--index is required in {} mode", mode.as_str()))),
        (_, Some(path)) => {
            let report = load_index(path, Some(&params.fingerprint()))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
                m.warnings.push(w.clone());
            }
            m.input(path)?;
            Some(report.index)
        }
    };
    let mut text = String::new();
    for line in read(&a.prompts)?.lines().filter(|l| !l.trim().is_empty()) {
        let prompt = prompt_ids(&ds.vocab, line)?;
        let t = match mode {
            Mode::Rag => generate_rag(&params, index.as_ref().unwrap(), &ds.corpus, &prompt, &limits)?,
            Mode::El => {
                let (res, t) = generate_el(&params, index.as_ref().unwrap(), &ds.vocab, &prompt, &limits)?;
                println!("{}\t{}", res.annotated_text, res.entity_list.join(" "));
                t
            }
            Mode::Plain => generate_plain(&params, &prompt, &limits)?,
        };
        if mode != Mode::El {
            println!("{}", output_text(&ds, &t)?);
        }
        text.push_str(&t.to_text(&ds.vocab)?);
    }
    write_file(&ctx.out, text)?;
    m.input(&a.checkpoint)?;
    m.input(&a.dataset)?;
    m.input(&a.prompts)?;
    m.output(&ctx.out)?;
    m.write(&ctx.out)?;
    Ok(())
}

fn output_text(ds: &Dataset, t: &Transcript) -> Result<String> {
    let ids: Vec<usize> = t.output_ids().into_iter().filter(|&id| id != EOS).collect();
    Ok(ds.vocab.decode(&ids)?)
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let timed = match a.mode.as_str() {
        "count" => false,
        "timed" => true,
        other => return Err(usage(format!("bench mode must be count or timed, got `{other}`"))),
    };
    let file = ScenarioFile::load(&a.scenarios).map_err(|e| usage(format!("{e:#}")))?;
    for s in &file.scenario {
        s.validate()?;
    }
    let b = &ctx.config.bench;
    let mut csv = format!("scenario,{COST_CSV_HEADER}\n");
    let mut reports: Vec<(usize, CostReport)> = Vec::new();
    if timed {
        let needed = file
            .scenario
            .iter()
            .map(|s| count_costs(s, Method::OnePass).main_model_forward_tokens)
            .max()
            .unwrap_or(0);
        let mut model = ctx.config.model_config(64, ctx.seed);
        model.max_seq_len = ctx.config.model.max_seq_len.unwrap_or(needed.max(1));
        let models = BenchModels::random(&model, b.secondary_layers, 16)?;
        for (i, s) in file.scenario.iter().enumerate() {
            let w = Workload::generate(s, model.vocab_size, ctx.seed)?;
            for method in Method::ALL {
                let r = run_timed(s, method, &models, &w, b.warmup.unwrap_or(1), b.repeats.unwrap_or(5))?;
                reports.push((i, r));
            }
        }
    } else {
        for (i, s) in file.scenario.iter().enumerate() {
            for method in Method::ALL {
                reports.push((i, count_costs(s, method)));
            }
        }
    }
    for (i, r) in &reports {
        let _ = writeln!(csv, "{i},{}", r.csv_row());
    }
    print!("{csv}");
    write_file(&ctx.out, &csv)?;
    let mut m = manifest(
        ctx,
        "bench",
        json!({ "mode": a.mode, "model": ctx.config.model, "bench": ctx.config.bench }),
    )?;
    m.input(&a.scenarios)?;
    m.output(&ctx.out)?;
    m.write(&ctx.out)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GoldRefs {
    One(String),
    Any(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldRecord {
    answer: Option<String>,
    /// Gold reference per retrieval event; a list accepts any of its refs.
    refs: Option<Vec<GoldRefs>>,
    entities: Option<Vec<String>>,
}

fn split_transcripts(text: &str) -> Result<Vec<Transcript>> {
    let header = "retgen-transcript v1\n";
    let mut out = Vec::new();
    for (i, chunk) in text.split(header).enumerate() {
        if i == 0 {
            if !chunk.trim().is_empty() {
                bail!(retgen::Error::InvalidInput("transcript file does not start with a header".into()));
            }
            continue;
        }
        out.push(Transcript::parse(&format!("{header}{chunk}"))?);
    }
    Ok(out)
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let transcripts = split_transcripts(&read(&a.transcripts)?)?;
    let gold: Vec<GoldRecord> = parse_jsonl(&read(&a.gold)?).with_context(|| format!("in {}", a.gold.display()))?;
    if gold.len() != transcripts.len() {
        bail!(retgen::Error::ShapeMismatch(format!(
            "{} transcripts for {} gold records",
            transcripts.len(),
            gold.len()
        )));
    }
    let k = a.top_k.unwrap_or(1);
    let (mut em, mut f1, mut n_ans) = (0.0, 0.0, 0usize);
    let (mut hits, mut n_refs) = (0.0, 0usize);
    let (mut ent_ok, mut n_ent) = (0usize, 0usize);
    for (t, g) in transcripts.iter().zip(&gold) {
        if let Some(ans) = &g.answer {
            let text = output_text(&ds, t)?;
            let pred = final_answer(&text).unwrap_or(text);
            em += exact_match(&pred, ans)?;
            f1 += token_f1(&pred, ans)?;
            n_ans += 1;
        }
        if let Some(refs) = &g.refs {
            let sets: Vec<Vec<DocRef>> = refs
                .iter()
                .map(|r| {
                    let list = match r {
                        GoldRefs::One(s) => vec![s.clone()],
                        GoldRefs::Any(v) => v.clone(),
                    };
                    list.iter().map(|s| s.parse()).collect::<retgen::Result<Vec<DocRef>>>()
                })
                .collect::<retgen::Result<_>>()?;
            if !sets.is_empty() {
                hits += aligned_recall_at_k(&event_rankings(&t.events), &sets, k)? * sets.len() as f64;
                n_refs += sets.len();
            }
        }
        if let Some(ents) = &g.entities {
            let got: Vec<String> = t
                .events
                .iter()
                .map(|e| e.hits.first().map(|h| h.doc_ref.doc_id.clone()).unwrap_or_default())
                .collect();
            ent_ok += usize::from(&got == ents);
            n_ent += 1;
        }
    }
    let mut csv = String::from("metric,value,count\n");
    let mut metrics = serde_json::Map::new();
    let mut row = |name: &str, value: f64, count: usize| {
        let _ = writeln!(csv, "{name},{value},{count}");
        metrics.insert(name.into(), json!(value));
    };
    if n_ans > 0 {
        row("exact_match", em / n_ans as f64, n_ans);
        row("token_f1", f1 / n_ans as f64, n_ans);
    }
    if n_refs > 0 {
        row(&format!("recall@{k}"), hits / n_refs as f64, n_refs);
    }
    if n_ent > 0 {
        row("entity_accuracy", ent_ok as f64 / n_ent as f64, n_ent);
    }
    if n_ans + n_refs + n_ent == 0 {
        return Err(anyhow!(retgen::Error::InvalidInput("gold file scores nothing".into())));
    }
    print!("{csv}");
    write_file(&ctx.out, &csv)?;
    let mut m = manifest(ctx, "eval", json!({ "top_k": k, "metrics": metrics }))?;
    m.input(&a.transcripts)?;
    m.input(&a.gold)?;
    m.input(&a.dataset)?;
    m.output(&ctx.out)?;
    m.write(&ctx.out)?;
    Ok(())
}
