//! Pipeline entry point: prepare -> build-graphs -> train -> export-prompts
//! -> recommend -> evaluate, driven by a flat dotted-key config file.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3
//! runtime/backend error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use crossrec::config::{BackendKind, Config};
use crossrec::dataset::{
    filter_min_interactions, leave_one_out_split, load_catalog, load_interactions, Catalog,
    DomainId, SplitDataset, UserSequence,
};
use crossrec::eval::{write_trace, Pipeline, DEFAULT_KS};
use crossrec::graphs::build_bundle;
use crossrec::grounding::index_items;
use crossrec::llm::{export_tuning_dataset, GenerationBackend, HttpBackend, MockBackend};
use crossrec::model::CatalogSizes;
use crossrec::retrieval::{build_index, training_neighbors, UserEmbeddingIndex};
use crossrec::train::train;

const USAGE: &str = "\
usage: crossrec <command> [--config <file>] [options] [--<key>=<value> ...]

commands:
  prepare         validate the dataset and write a split summary
  build-graphs    dump the four graphs as edge lists
  train           train the sequence model and build the retrieval index
  export-prompts  write the instruction-tuning JSONL dataset
  recommend       print a ranked answer for one user
  evaluate        run the end-to-end evaluation

common options:
  --config <file>        dotted-key config file (defaults apply without it)
  --backend mock|http|none
  --backend-url <url>    (or CROSSREC_BACKEND_URL)
  --max-tokens <n>

command options:
  train:           --out <checkpoint>
  export-prompts:  --out <jsonl>
  recommend:       --user <id> --domain A|B [--m <n>] [--top <n>]
  evaluate:        --split test|valid --report <json> --trace <jsonl>

any --<key>=<value> pair overrides the matching config key, e.g.
--train.lambda=0.1";

enum CliError {
    Usage(String),
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<crossrec::config::ConfigError> for CliError {
    fn from(e: crossrec::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crossrec::dataset::DataError> for CliError {
    fn from(e: crossrec::dataset::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

macro_rules! runtime_errors {
    ($($ty:ty),+) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })+
    };
}

runtime_errors!(
    crossrec::graphs::GraphError,
    crossrec::train::TrainError,
    crossrec::model::ModelError,
    crossrec::retrieval::RetrievalError,
    crossrec::checkpoint::CheckpointError,
    crossrec::llm::LlmError,
    crossrec::grounding::GroundingError,
    crossrec::eval::EvalError,
    std::io::Error
);

struct Args {
    command: String,
    flags: BTreeMap<String, String>,
    overrides: Vec<String>,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let Some(command) = argv.first() else {
        return Err(CliError::Usage(USAGE.to_string()));
    };
    let mut flags = BTreeMap::new();
    let mut overrides = Vec::new();
    let value_flags = [
        "config", "out", "user", "domain", "split", "report", "trace", "m", "top", "backend",
        "backend-url", "max-tokens",
    ];
    let mut i = 1;
    while i < argv.len() {
        let arg = &argv[i];
        let Some(body) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}\n\n{USAGE}")));
        };
        if let Some((key, value)) = body.split_once('=') {
            if value_flags.contains(&key) {
                flags.insert(key.to_string(), value.to_string());
            } else if key.contains('.') {
                overrides.push(body.to_string());
            } else {
                return Err(CliError::Usage(format!("unknown flag --{key}\n\n{USAGE}")));
            }
        } else if value_flags.contains(&body) {
            i += 1;
            let Some(value) = argv.get(i) else {
                return Err(CliError::Usage(format!("flag --{body} needs a value")));
            };
            flags.insert(body.to_string(), value.clone());
        } else {
            return Err(CliError::Usage(format!("unknown flag --{body}\n\n{USAGE}")));
        }
        i += 1;
    }
    Ok(Args { command: command.clone(), flags, overrides })
}

fn build_config(args: &Args) -> Result<Config, CliError> {
    let mut cfg = match args.flags.get("config") {
        Some(path) => Config::load(Path::new(path))?,
        None => Config::default(),
    };
    if let Ok(url) = std::env::var("CROSSREC_BACKEND_URL") {
        cfg.backend_url = url;
    }
    for pair in &args.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(kind) = args.flags.get("backend") {
        cfg.apply_override(&format!("backend.kind={kind}"))?;
    }
    if let Some(url) = args.flags.get("backend-url") {
        cfg.backend_url = url.clone();
    }
    if let Some(mt) = args.flags.get("max-tokens") {
        cfg.apply_override(&format!("backend.max_tokens={mt}"))?;
    }
    if let Some(m) = args.flags.get("m") {
        cfg.apply_override(&format!("refine.m={m}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct LoadedData {
    catalog: Catalog,
    kept: Vec<UserSequence>,
    split: SplitDataset,
}

fn load_data(cfg: &Config) -> Result<LoadedData, CliError> {
    let catalog = load_catalog(&cfg.catalog_path)?;
    let seqs = load_interactions(&cfg.interactions_path, &catalog)?;
    // the leave-one-out split needs three events regardless of the filter
    let kept = filter_min_interactions(seqs, cfg.min_interactions.max(3));
    if kept.is_empty() {
        return Err(CliError::Data("no sequences survive the minimum-length filter".into()));
    }
    let split = leave_one_out_split(&kept)?;
    Ok(LoadedData { catalog, kept, split })
}

fn sizes_of(catalog: &Catalog) -> CatalogSizes {
    CatalogSizes {
        n_items: catalog.n_items(),
        boundary: catalog.boundary(),
        n_attrs: catalog.attribute_vocab().len(),
    }
}

fn backend_of(cfg: &Config) -> Option<Box<dyn GenerationBackend>> {
    match cfg.backend_kind {
        BackendKind::Mock => Some(Box::new(MockBackend::Echo)),
        BackendKind::Http => Some(Box::new(HttpBackend::new(cfg.backend_url.clone()))),
        BackendKind::None => None,
    }
}

fn index_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".index");
    checkpoint.with_file_name(name)
}

fn cmd_prepare(cfg: &Config) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let cold = data
        .split
        .test
        .iter()
        .filter(|p| crossrec::eval::is_cold(p, &data.catalog))
        .count();
    let summary = serde_json::json!({
        "n_items": data.catalog.n_items(),
        "boundary": data.catalog.boundary(),
        "n_attributes": data.catalog.attribute_vocab().len(),
        "users": data.kept.len(),
        "train_sequences": data.split.train.len(),
        "valid_pairs": data.split.valid.len(),
        "test_pairs": data.split.test.len(),
        "cold_test_users": cold,
    });
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("prepared.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    log::info!("wrote {}", path.display());
    Ok(())
}

fn cmd_build_graphs(cfg: &Config) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let bundle = build_bundle(&data.split.train, &data.catalog, cfg.binary_graph_edges)?;
    let dir = cfg.out_dir.join("graphs");
    bundle.dump(&dir)?;
    println!(
        "graphs: attr {} edges, full {}, domain_a {}, domain_b {} -> {}",
        bundle.attr.nnz(),
        bundle.full.nnz(),
        bundle.domain_a.nnz(),
        bundle.domain_b.nnz(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &Config, args: &Args) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let bundle = build_bundle(&data.split.train, &data.catalog, cfg.binary_graph_edges)?;
    let (model, report) = train(
        &data.split,
        &bundle,
        sizes_of(&data.catalog),
        cfg.model_dims(),
        &cfg.train_config(),
    )?;
    let out = args.flags.get("out").map(PathBuf::from).unwrap_or_else(|| cfg.checkpoint_path.clone());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    crossrec::checkpoint::save_model(&model, &out)?;

    let norm = model.normalize_graphs(&bundle)?;
    let reps = model.item_representations(&norm);
    let index = build_index(&data.split.train, &model, &reps)?;
    index.save(&index_path(&out))?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.json");
    let log = serde_json::json!({
        "initial_lt": report.initial_lt,
        "epoch_lt": report.epoch_lt,
        "final_total": report.final_total,
        "epochs": model.epoch,
    });
    std::fs::write(&log_path, serde_json::to_string_pretty(&log).expect("log serializes"))?;
    println!(
        "trained {} epochs: next-item loss {:.4} -> {:.4}; checkpoint {}",
        model.epoch,
        report.initial_lt,
        report.epoch_lt.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_export_prompts(cfg: &Config, args: &Args) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let index = UserEmbeddingIndex::load(&index_path(&cfg.checkpoint_path))?;
    // rank-2 neighbors per domain; each user exports with the neighbor
    // from their training target's domain
    let neighbors_a = training_neighbors(&index, DomainId::A)?;
    let neighbors_b = training_neighbors(&index, DomainId::B)?;
    let mut merged = BTreeMap::new();
    for seq in &data.split.train {
        if seq.events.len() < 2 {
            continue;
        }
        let target = seq.events[seq.events.len() - 1];
        let map = match data.catalog.domain_of(target) {
            DomainId::A => &neighbors_a,
            DomainId::B => &neighbors_b,
        };
        if let Some(&n) = map.get(&seq.user_id) {
            merged.insert(seq.user_id, n);
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = args
        .flags
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("tuning.jsonl"));
    let n = export_tuning_dataset(&data.split, &merged, &data.catalog, &out)?;
    println!("wrote {n} tuning examples to {}", out.display());
    Ok(())
}

fn cmd_recommend(cfg: &Config, args: &Args) -> Result<(), CliError> {
    let user: u32 = args
        .flags
        .get("user")
        .ok_or_else(|| CliError::Usage("recommend needs --user <id>".into()))?
        .parse()
        .map_err(|e| CliError::Usage(format!("bad --user value: {e}")))?;
    let domain: DomainId = args
        .flags
        .get("domain")
        .ok_or_else(|| CliError::Usage("recommend needs --domain A|B".into()))?
        .parse()
        .map_err(CliError::Usage)?;
    let top: usize = match args.flags.get("top") {
        Some(t) => t.parse().map_err(|e| CliError::Usage(format!("bad --top value: {e}")))?,
        None => 10,
    };

    let data = load_data(cfg)?;
    let model = crossrec::checkpoint::load_model(&cfg.checkpoint_path)?;
    let index = UserEmbeddingIndex::load(&index_path(&cfg.checkpoint_path))?;
    let bundle = build_bundle(&data.split.train, &data.catalog, cfg.binary_graph_edges)?;
    let norm = model.normalize_graphs(&bundle)?;
    let reps = model.item_representations(&norm);
    let bm25 = index_items(&data.catalog, cfg.bm25_k1, cfg.bm25_b, cfg.ground_attributes)?;
    let backend = backend_of(cfg);

    let seq = data
        .kept
        .iter()
        .find(|s| s.user_id == user)
        .ok_or_else(|| CliError::Data(format!("user {user} not in the filtered interactions")))?;

    let pipeline = Pipeline {
        model: &model,
        reps: &reps,
        index: &index,
        train_users: &data.split.train,
        catalog: &data.catalog,
        bm25: &bm25,
        backend: backend.as_deref(),
        k: cfg.retrieval_k,
        m: cfg.refine_m,
        max_tokens: cfg.max_tokens,
        seed: cfg.seed,
    };
    let rec = pipeline.recommend(user, &seq.events, domain)?;
    let shown: Vec<serde_json::Value> = rec
        .answer
        .items
        .iter()
        .take(top)
        .map(|&id| {
            serde_json::json!({ "id": id, "title": data.catalog.title(id) })
        })
        .collect();
    let out = serde_json::json!({
        "user": user,
        "domain": domain.to_string(),
        "source": rec.answer.source,
        "top_m_inspected": rec.answer.top_m_inspected,
        "retrieved_users": rec.retrieved,
        "items": shown,
        "total_ranked": rec.answer.items.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("answer serializes"));
    Ok(())
}

fn cmd_evaluate(cfg: &Config, args: &Args) -> Result<(), CliError> {
    let which = args.flags.get("split").map(String::as_str).unwrap_or("test");
    let data = load_data(cfg)?;
    let pairs = match which {
        "test" => &data.split.test,
        "valid" => &data.split.valid,
        other => return Err(CliError::Usage(format!("unknown split {other:?} (test or valid)"))),
    };
    let model = crossrec::checkpoint::load_model(&cfg.checkpoint_path)?;
    let index = UserEmbeddingIndex::load(&index_path(&cfg.checkpoint_path))?;
    let bundle = build_bundle(&data.split.train, &data.catalog, cfg.binary_graph_edges)?;
    let norm = model.normalize_graphs(&bundle)?;
    let reps = model.item_representations(&norm);
    let bm25 = index_items(&data.catalog, cfg.bm25_k1, cfg.bm25_b, cfg.ground_attributes)?;
    let backend = backend_of(cfg);

    let pipeline = Pipeline {
        model: &model,
        reps: &reps,
        index: &index,
        train_users: &data.split.train,
        catalog: &data.catalog,
        bm25: &bm25,
        backend: backend.as_deref(),
        k: cfg.retrieval_k,
        m: cfg.refine_m,
        max_tokens: cfg.max_tokens,
        seed: cfg.seed,
    };
    let run = pipeline.evaluate(pairs, &DEFAULT_KS)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let report_path = args
        .flags
        .get("report")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join(format!("report_{which}.json")));
    let report_json = serde_json::json!({ "split": which, "reports": run.reports });
    std::fs::write(&report_path, serde_json::to_string_pretty(&report_json).expect("report serializes"))?;

    let trace_path = args
        .flags
        .get("trace")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join(format!("trace_{which}.jsonl")));
    write_trace(&run.traces, &trace_path)?;

    for r in &run.reports {
        println!(
            "{:?}: n={} mrr={:.4} hr@1={:.4} hr@5={:.4} hr@10={:.4} hr@20={:.4} ndcg@10={:.4}",
            r.partition, r.n_users, r.mrr, r.hr[&1], r.hr[&5], r.hr[&10], r.hr[&20], r.ndcg[&10]
        );
    }
    log::info!("report {} trace {}", report_path.display(), trace_path.display());
    Ok(())
}

fn run() -> Result<(), CliError> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = parse_args(&argv)?;
    let cfg = build_config(&args)?;
    match args.command.as_str() {
        "prepare" => cmd_prepare(&cfg),
        "build-graphs" => cmd_build_graphs(&cfg),
        "train" => cmd_train(&cfg, &args),
        "export-prompts" => cmd_export_prompts(&cfg, &args),
        "recommend" => cmd_recommend(&cfg, &args),
        "evaluate" => cmd_evaluate(&cfg, &args),
        other => Err(CliError::Usage(format!("unknown command {other:?}\n\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
