use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use icl_core::eval::{
    self, EndpointConfig, HttpClient, ImageMode, InferenceClient, RunOptions, RunStatus, TranscriptCache,
};
use icl_core::ingest::{self, SourceManifest};
use icl_core::instruct::{TemplateBank, TEMPLATE_BANK_VERSION};
use icl_core::layout::{self, ByteTokenizer, ChatTemplate, Tokenizer, WhitespaceTokenizer};
use icl_core::model::{Conversation, Episode, Record};
use icl_core::pipeline::{self, Config, PipelineError};
use icl_core::sampler::Suite;
use icl_core::{jsonl, RunReport, TOOLKIT_VERSION};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "icl", about = "Build, check and evaluate semantically coherent multimodal in-context-learning data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize source annotations into record JSONL
    Ingest {
        /// Source manifest (JSON); repeat for several sources
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep only these partitions or tasks (overrides the manifest filter)
        #[arg(long)]
        filter: Vec<String>,
    },
    /// Split, sample and compose a training mix
    GenTrain {
        #[arg(long)]
        config: PathBuf,
        /// Record JSONL from `ingest`
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Audit report path (default: <out>.audit.json)
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Directory for per-partition split assignments
        #[arg(long)]
        split_dir: Option<PathBuf>,
        /// Replay conversations (overrides mix.replay_source)
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Canonical)]
        format: Format,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        target_count: Option<usize>,
    },
    /// Build evaluation episodes from the held-out side of the split
    GenEval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suite to build: seed_23, seed_unseen, seed_ic, vlc_mc, vlc_qa, vlc_cap or fewshot
        #[arg(long, value_parser = parse_suite_arg)]
        suite: Vec<SuiteArg>,
        /// Classification dataset for the few-shot suite
        #[arg(long)]
        dataset: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compile every conversation to a token layout and verify its masks
    LayoutCheck {
        #[arg(long)]
        conversations: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_context: Option<usize>,
        #[arg(long)]
        image_cost: Option<usize>,
        #[arg(long)]
        reserve: Option<usize>,
        #[arg(long, value_enum, default_value_t = TemplateArg::Plain)]
        template: TemplateArg,
        #[arg(long, value_enum, default_value_t = TokenizerArg::Whitespace)]
        tokenizer: TokenizerArg,
        /// Write the audit summary as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run episodes against an inference endpoint and score them
    Evaluate {
        #[arg(long)]
        episodes: PathBuf,
        /// Output directory for reports
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base URL of the endpoint
        #[arg(long)]
        endpoint: Option<String>,
        /// Shot counts, comma separated
        #[arg(long, value_delimiter = ',', default_value = "2")]
        k: Vec<usize>,
        /// Transcript cache (default: <out>/transcripts.jsonl)
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Score from the cache only, never contacting the endpoint
        #[arg(long)]
        cache_only: bool,
        #[arg(long)]
        max_parallel: Option<usize>,
        #[arg(long)]
        token_env: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        score_logprob: bool,
        #[arg(long, value_enum)]
        image_mode: Option<ImageModeArg>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        retries: Option<u32>,
        #[arg(long)]
        backoff_ms: Option<u64>,
        /// Leave failed episodes out of the denominator
        #[arg(long)]
        exclude_errors: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Canonical,
    Llava,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Plain,
    Vicuna,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Whitespace,
    Byte,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageModeArg {
    Path,
    Base64,
}

#[derive(Clone, Copy, PartialEq)]
enum SuiteArg {
    Suite(Suite),
    Fewshot,
}

fn parse_suite_arg(s: &str) -> Result<SuiteArg, String> {
    if s.eq_ignore_ascii_case("fewshot") {
        return Ok(SuiteArg::Fewshot);
    }
    s.parse().map(SuiteArg::Suite)
}

enum Failure {
    Partial(String),
    Input(anyhow::Error),
    Endpoint(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let version: &'static str =
        Box::leak(format!("{TOOLKIT_VERSION} (template bank {TEMPLATE_BANK_VERSION})").into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Ingest { manifest, out, filter } => cmd_ingest(&manifest, &out, &filter),
        Command::GenTrain { config, records, out, audit, split_dir, replay, format, seed, target_count } => {
            cmd_gen_train(&config, &records, &out, audit, split_dir, replay, format, seed, target_count)
        }
        Command::GenEval { config, records, out, suite, dataset, k, seed } => {
            cmd_gen_eval(config.as_deref(), &records, &out, &suite, &dataset, k, seed)
        }
        Command::LayoutCheck {
            conversations,
            config,
            max_context,
            image_cost,
            reserve,
            template,
            tokenizer,
            report,
        } => cmd_layout_check(
            &conversations,
            config.as_deref(),
            max_context,
            image_cost,
            reserve,
            template,
            tokenizer,
            report,
        ),
        Command::Evaluate {
            episodes,
            out,
            config,
            endpoint,
            k,
            cache,
            cache_only,
            max_parallel,
            token_env,
            model,
            score_logprob,
            image_mode,
            image_root,
            retries,
            backoff_ms,
            exclude_errors,
            seed,
        } => {
            let overrides = EndpointOverrides {
                endpoint,
                max_parallel,
                token_env,
                model,
                score_logprob,
                image_mode,
                image_root,
                retries,
                backoff_ms,
            };
            cmd_evaluate(&episodes, &out, config.as_deref(), overrides, &k, cache, cache_only, exclude_errors, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(msg)) => {
            eprintln!("partial: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Endpoint(e)) => {
            eprintln!("endpoint error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Config::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    jsonl::read(path).with_context(|| format!("reading records {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    jsonl::write_atomic(path, jsonl::to_string(items).as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    jsonl::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_ingest(manifests: &[PathBuf], out: &Path, filter: &[String]) -> Outcome {
    let mut loaded = Vec::with_capacity(manifests.len());
    for path in manifests {
        let mut m = SourceManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
        if !filter.is_empty() {
            m.task_or_partition_filter = Some(filter.to_vec());
        }
        loaded.push(m);
    }
    let mut records = Vec::new();
    for (path, result) in manifests.iter().zip(ingest::ingest_all(&loaded)) {
        let got = result.with_context(|| format!("ingesting {}", path.display()))?;
        for w in &got.warnings {
            eprintln!("warning: {}: {w}", path.display());
        }
        for s in &got.skips {
            eprintln!("skipped: {} item {}: {}", s.file, s.item, s.reason);
        }
        eprintln!(
            "{}: {} records ({} items, {} filtered out, {} skipped)",
            path.display(),
            got.records.len(),
            got.total_items,
            got.filtered_out,
            got.skips.len()
        );
        records.extend(got.records);
    }
    let duplicates = icl_core::model::validate_store(&records);
    if let Some((id, v)) = duplicates.first() {
        return Err(anyhow!("record {id}: {v}").into());
    }
    write_jsonl(out, &records)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_train(
    config: &Path,
    records: &Path,
    out: &Path,
    audit: Option<PathBuf>,
    split_dir: Option<PathBuf>,
    replay: Option<PathBuf>,
    format: Format,
    seed: Option<u64>,
    target_count: Option<usize>,
) -> Outcome {
    let cfg = load_config(Some(config))?;
    let mut mix_cfg = cfg.mix.clone().ok_or_else(|| anyhow!("config {} has no [mix] section", config.display()))?;
    if let Some(n) = target_count {
        mix_cfg.target_count = n;
    }
    let spec = mix_cfg.to_spec::<f64>().map_err(|e| anyhow!("{e}"))?;
    let seed = seed.unwrap_or(cfg.seed);
    eprintln!("seeds: split/sample {seed}, mix {}", spec.seed);

    let replay_path = replay.or_else(|| {
        mix_cfg.replay_source.as_ref().map(|p| match config.parent() {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        })
    });
    let replay_data = match (&replay_path, spec.include_replay) {
        (Some(p), true) => Some(ingest::load_replay(p).with_context(|| format!("loading replay {}", p.display()))?),
        (None, true) => {
            return Err(anyhow!("the mix includes replay data; pass --replay or set mix.replay_source").into())
        }
        _ => None,
    };

    let records = read_records(records)?;
    let bank = TemplateBank::default();
    let result = pipeline::gen_train(&records, &cfg.split, &spec, replay_data.as_deref(), &bank, cfg.train.shots, seed);
    let output = match result {
        Ok(o) => o,
        Err(PipelineError::Mix(e)) => return Err(anyhow!("{e}").into()),
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    match format {
        Format::Canonical => write_jsonl(out, &output.conversations)?,
        Format::Llava => {
            let items: Vec<pipeline::LlavaItem> = output
                .conversations
                .iter()
                .enumerate()
                .map(|(i, c)| pipeline::to_llava(c, format!("icl-{i:06}")))
                .collect();
            write_json(out, &items)?;
        }
    }
    if let Some(dir) = split_dir {
        for a in &output.assignments {
            a.write_to(&dir).with_context(|| format!("writing split for {}", a.partition))?;
        }
    }
    let audit_path = audit.unwrap_or_else(|| with_suffix(out, ".audit.json"));
    write_json(&audit_path, &output.audit)?;
    eprintln!(
        "{} conversations ({} replay); max deviation {:.3} pp",
        output.audit.total,
        output.audit.replay_count,
        output.audit.max_deviation_pp(&spec)
    );
    Ok(())
}

fn cmd_gen_eval(
    config: Option<&Path>,
    records: &Path,
    out: &Path,
    suites: &[SuiteArg],
    datasets: &[String],
    k: Option<usize>,
    seed: Option<u64>,
) -> Outcome {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let k = k.unwrap_or(cfg.eval.k);
    let (suite_list, fewshot): (Vec<Suite>, Vec<String>) = if suites.is_empty() {
        (cfg.eval.suites.clone(), if datasets.is_empty() { cfg.eval.fewshot.clone() } else { datasets.to_vec() })
    } else {
        let list = suites
            .iter()
            .filter_map(|s| match s {
                SuiteArg::Suite(s) => Some(*s),
                SuiteArg::Fewshot => None,
            })
            .collect();
        let fewshot = if suites.contains(&SuiteArg::Fewshot) {
            if datasets.is_empty() {
                return Err(anyhow!("--suite fewshot needs --dataset").into());
            }
            datasets.to_vec()
        } else {
            Vec::new()
        };
        (list, fewshot)
    };
    eprintln!("seed {seed}, k {k}");
    let records = read_records(records)?;
    let output = pipeline::gen_eval(&records, &cfg.split, &suite_list, &fewshot, k, seed, &TemplateBank::default())
        .map_err(anyhow::Error::from)?;
    for note in &output.notes {
        eprintln!("note: {note}");
    }
    write_jsonl(out, &output.episodes)?;
    eprintln!("{} episodes", output.episodes.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_layout_check(
    conversations: &Path,
    config: Option<&Path>,
    max_context: Option<usize>,
    image_cost: Option<usize>,
    reserve: Option<usize>,
    template: TemplateArg,
    tokenizer: TokenizerArg,
    report: Option<PathBuf>,
) -> Outcome {
    let cfg = load_config(config)?;
    let mut budget = cfg.layout.unwrap_or_default();
    budget.max_context = max_context.unwrap_or(budget.max_context);
    budget.image_token_cost = image_cost.unwrap_or(budget.image_token_cost);
    budget.reserve = reserve.unwrap_or(budget.reserve);
    budget.validate().map_err(|e| anyhow!("{e}"))?;
    let convs: Vec<Conversation> =
        jsonl::read(conversations).with_context(|| format!("reading {}", conversations.display()))?;
    let template = match template {
        TemplateArg::Plain => ChatTemplate::plain(),
        TemplateArg::Vicuna => ChatTemplate::vicuna(),
    };
    let tok: &dyn Tokenizer = match tokenizer {
        TokenizerArg::Whitespace => &WhitespaceTokenizer,
        TokenizerArg::Byte => &ByteTokenizer,
    };
    let audit = layout::audit_corpus(&convs, tok, &budget, &template);
    println!(
        "{} conversations, {} passed, {} failed; {} tokens, {} target ({:.4} of all), {} image",
        audit.conversations,
        audit.passed,
        audit.failures.len(),
        audit.total_tokens,
        audit.target_tokens,
        audit.target_fraction,
        audit.image_tokens
    );
    for f in &audit.failures {
        println!("  #{}: {}", f.index, f.error);
    }
    if let Some(path) = report {
        write_json(&path, &audit)?;
    }
    if audit.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(format!("{} conversation(s) failed layout checks", audit.failures.len())))
    }
}

struct EndpointOverrides {
    endpoint: Option<String>,
    max_parallel: Option<usize>,
    token_env: Option<String>,
    model: Option<String>,
    score_logprob: bool,
    image_mode: Option<ImageModeArg>,
    image_root: Option<PathBuf>,
    retries: Option<u32>,
    backoff_ms: Option<u64>,
}

impl EndpointOverrides {
    fn apply(self, base: Option<EndpointConfig>, cache_only: bool) -> Result<EndpointConfig> {
        let mut cfg = match (base, self.endpoint) {
            (Some(mut c), Some(url)) => {
                c.base_url = url;
                c
            }
            (Some(c), None) => c,
            (None, Some(url)) => EndpointConfig::new(url),
            (None, None) if cache_only => EndpointConfig::new("http://localhost"),
            (None, None) => bail!("no endpoint: pass --endpoint or set [endpoint] in the config"),
        };
        cfg.max_parallel = self.max_parallel.unwrap_or(cfg.max_parallel);
        cfg.token_env = self.token_env.or(cfg.token_env);
        cfg.model = self.model.or(cfg.model);
        cfg.score_logprob |= self.score_logprob;
        if let Some(mode) = self.image_mode {
            cfg.image_mode = match mode {
                ImageModeArg::Path => ImageMode::Path,
                ImageModeArg::Base64 => ImageMode::Base64,
            };
        }
        cfg.image_root = self.image_root.or(cfg.image_root);
        cfg.retries = self.retries.unwrap_or(cfg.retries);
        cfg.backoff_ms = self.backoff_ms.unwrap_or(cfg.backoff_ms);
        Ok(cfg)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    episodes: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: EndpointOverrides,
    ks: &[usize],
    cache: Option<PathBuf>,
    cache_only: bool,
    exclude_errors: bool,
    seed: Option<u64>,
) -> Outcome {
    let cfg = load_config(config)?;
    let endpoint = overrides.apply(cfg.endpoint.clone(), cache_only)?;
    endpoint.validate().map_err(anyhow::Error::from)?;
    let episodes: Vec<Episode> = jsonl::read(episodes).with_context(|| format!("reading {}", episodes.display()))?;
    if !cache_only {
        endpoint.check_modes(&episodes).map_err(anyhow::Error::from)?;
    }
    let cache_path = cache.unwrap_or_else(|| out.join("transcripts.jsonl"));
    let mut transcripts = TranscriptCache::load(&cache_path).map_err(anyhow::Error::from)?;
    let client = if cache_only { None } else { Some(HttpClient::new(&endpoint).map_err(anyhow::Error::from)?) };
    let client_ref = client.as_ref().map(|c| c as &dyn InferenceClient);
    let base = RunOptions { k: 0, seed: seed.or(Some(cfg.seed)), exclude_errors, cache_only };
    let before = transcripts.len();
    let result = eval::run_paired::<f64>(&episodes, client_ref, &endpoint, ks, &base, &mut transcripts);
    if transcripts.len() != before {
        transcripts.save(&cache_path).map_err(anyhow::Error::from)?;
    }
    let reports: Vec<RunReport> = result.map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut partial = Vec::new();
    let mut dead = true;
    for r in &reports {
        r.write_json(&out.join(format!("report_k{}.json", r.k))).map_err(anyhow::Error::from)?;
        let text = r.render_text();
        jsonl::write_atomic(&out.join(format!("report_k{}.txt", r.k)), text.as_bytes()).map_err(anyhow::Error::from)?;
        print!("{text}");
        let attempted: usize = r.tasks.iter().map(|t| t.total).sum();
        let errors: usize = r.tasks.iter().map(|t| t.errors).sum();
        dead &= attempted > 0 && errors >= attempted;
        if r.status == RunStatus::Partial {
            partial.push(r.k);
        }
    }
    if partial.is_empty() {
        Ok(())
    } else if dead && !cache_only {
        Err(Failure::Endpoint(anyhow!("every request failed; is {} reachable?", endpoint.base_url)))
    } else {
        Err(Failure::Partial(format!("run marked partial for k = {partial:?}")))
    }
}
