use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use mmrank::contrastive::{train_projection, trace_csv, ProjectionHead, TrainConfig, TrainPair};
use mmrank::evaluator::{build_pool, evaluate, parse_assignment, parse_metrics, PoolMode, PoolSpec, Qrels};
use mmrank::rank_training::{
    mine_hard_negatives, rerank_trace_csv, scorer_features, HardNegativeSet,
    RerankTrainConfig, ToyScorer, ToyScorerService,
};
use mmrank::reranker::{rerank_all, RerankConfig, RerankError, RerankMode};
use mmrank::retriever::{batch_retrieve, PoolFilter};
use mmrank::scorer_gateway::{
    GatewayError, HttpConfig, HttpEmbedder, HttpScorer, MockHashScorer, OracleScorer, Scorer, ScorerHandle,
};
use mmrank::store::{read_store, write_store, EmbeddingMatrix};
use mmrank::synthetic::{generate, SyntheticConfig};
use mmrank::trec::{format_run, from_jsonl, parse_qrels, parse_run, to_jsonl};
use mmrank::types::{DocId, Record};

use crate::manifest::{write_atomic, ManifestBuilder};
use crate::{
    CmdResult, Classify, EvalArgs, Failure, GenCorpusArgs, IngestArgs, MineArgs, ModeArg, RerankArgs,
    SearchArgs, TrainHeadArgs, TrainRerankerArgs,
};

pub const SCORER_URL_ENV: &str = "MMRANK_SCORER_URL";

fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).data(format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult<()> {
    write_atomic(path, bytes.as_ref()).data(format!("writing {}", path.display()))
}

fn load_store(path: &Path) -> CmdResult<EmbeddingMatrix> {
    read_store(path).data(format!("loading store {}", path.display()))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    serde_json::from_str(&read_text(path)?).data(format!("parsing {}", path.display()))
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<Vec<T>> {
    from_jsonl(&read_text(path)?).data(format!("parsing {}", path.display()))
}

fn load_qrels(path: &Path) -> CmdResult<Qrels> {
    parse_qrels(&read_text(path)?).data(format!("parsing qrels {}", path.display()))
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn finish(manifest: ManifestBuilder, primary: &Path) -> CmdResult<()> {
    manifest.finish(primary).data("writing run manifest")?;
    Ok(())
}

/// Loads the store and, when a head is given, projects it.
fn load_projected(path: &Path, head: Option<&ProjectionHead>) -> CmdResult<EmbeddingMatrix> {
    let m = load_store(path)?;
    match head {
        Some(h) => h.project_matrix(&m).data(format!("projecting {}", path.display())),
        None => Ok(m),
    }
}

fn resolve_pool(pool: &str, datasets: Option<&Path>) -> CmdResult<PoolFilter> {
    if pool == "global" {
        return Ok(PoolFilter::global());
    }
    let Some(tag) = pool.strip_prefix("local:") else {
        return Err(Failure::Usage(format!("--pool must be `global` or `local:<tag>`, got `{pool}`")));
    };
    let Some(path) = datasets else {
        return Err(Failure::Usage("--pool local:<tag> needs --datasets".into()));
    };
    let assignment = parse_assignment(&read_text(path)?).data(format!("parsing {}", path.display()))?;
    let spec = PoolSpec {
        mode: PoolMode::Local,
        assignment,
    };
    build_pool(&spec, tag).data("building pool")
}

fn gateway_failure(e: GatewayError) -> Failure {
    match e {
        GatewayError::Timeout { .. } | GatewayError::Transport(_) => Failure::Transport(e.to_string()),
        other => Failure::Data(other.to_string()),
    }
}

fn rerank_failure(e: RerankError) -> Failure {
    match &e {
        RerankError::Scorer {
            source: GatewayError::Timeout { .. } | GatewayError::Transport(_),
            ..
        } => Failure::Transport(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

pub fn gen_corpus(a: GenCorpusArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("gen-corpus", &a);
    manifest.seed(a.seed).output("corpus", &a.out);
    let cfg = SyntheticConfig {
        docs: a.docs,
        queries: a.queries,
        train_queries: a.train_queries,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    if cfg.docs == 0 {
        return Err(Failure::Usage("--docs must be positive".into()));
    }
    generate(&cfg)
        .write_to(&a.out)
        .data(format!("writing corpus to {}", a.out.display()))?;
    finish(manifest, &a.out)
}

pub fn ingest(a: IngestArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("ingest", &a);
    manifest.input("records", &a.records).output("store", &a.out);
    let records: Vec<Record> = load_jsonl(&a.records)?;
    if records.is_empty() {
        return Err(Failure::Data(format!("{} holds no records", a.records.display())));
    }
    let mut seen = HashSet::new();
    for r in &records {
        r.validate().data(format!("record {}", r.id))?;
        if !seen.insert(&r.id) {
            return Err(Failure::Data(format!("duplicate record id {}", r.id)));
        }
    }
    let ids: Vec<DocId> = records.iter().map(|r| r.id.clone()).collect();

    let matrix = if let Some(path) = &a.embeddings {
        manifest.input("embeddings", path);
        let emb = load_store(path)?;
        let missing: Vec<&str> = ids.iter().filter(|id| !emb.contains(id)).map(DocId::as_str).collect();
        let extra: Vec<&str> = emb.ids().iter().filter(|id| !seen.contains(id)).map(DocId::as_str).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Failure::Data(format!(
                "IdMismatch: records without embeddings [{}]; embeddings without records [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        emb.select(&ids).data("ordering embeddings")?
    } else {
        let url = a.embedder.as_deref().expect("clap requires one source");
        let embedder = HttpEmbedder::new(url, HttpConfig::default()).map_err(gateway_failure)?;
        let rows = records
            .iter()
            .map(|r| embedder.embed(r).map(|v| (r.id.clone(), v)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(gateway_failure)?;
        let dim = rows[0].1.len();
        EmbeddingMatrix::from_rows(dim, rows).data("embedder output")?
    };

    let store_manifest = write_store(&matrix, &a.out).data(format!("writing {}", a.out.display()))?;
    println!("{}", to_json(&store_manifest));
    finish(manifest, &a.out)
}

pub fn search(a: SearchArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("search", &a);
    manifest
        .input("store", &a.store)
        .input("queries", &a.queries)
        .output("run", &a.out);
    let head: Option<ProjectionHead> = a.head.as_deref().map(load_json).transpose()?;
    let store = load_projected(&a.store, head.as_ref())?;
    let queries = load_projected(&a.queries, head.as_ref())?;
    let filter = resolve_pool(&a.pool, a.datasets.as_deref())?;
    let runs = batch_retrieve(&queries, &store, a.k, &filter).data("retrieval")?;
    write_file(&a.out, format_run(&runs, &a.tag))?;
    finish(manifest, &a.out)
}

pub fn mine(a: MineArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("mine", &a);
    manifest
        .input("store", &a.store)
        .input("queries", &a.queries)
        .input("qrels", &a.qrels)
        .output("negatives", &a.out);
    let head: Option<ProjectionHead> = a.head.as_deref().map(load_json).transpose()?;
    let store = load_projected(&a.store, head.as_ref())?;
    let queries = load_projected(&a.queries, head.as_ref())?;
    let qrels = load_qrels(&a.qrels)?;
    let filter = resolve_pool(&a.pool, a.datasets.as_deref())?;
    let sets = mine_hard_negatives(&queries, &store, &qrels, a.depth, &filter).data("mining")?;
    write_file(&a.out, to_jsonl(&sets))?;
    finish(manifest, &a.out)
}

pub fn train_head(a: TrainHeadArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("train-head", &a);
    manifest
        .seed(a.seed)
        .input("pairs", &a.pairs)
        .input("queries", &a.queries)
        .input("store", &a.store)
        .output("head", &a.out);
    let pairs: Vec<TrainPair> = load_jsonl(&a.pairs)?;
    let queries = load_store(&a.queries)?;
    let store = load_store(&a.store)?;
    let base = EmbeddingMatrix::concat(&[&queries, &store]).data("combining stores")?;
    let cfg = TrainConfig {
        temperature: a.temperature,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        out_dim: a.out_dim,
    };
    let outcome = train_projection(&pairs, &base, &cfg).data("training")?;
    write_file(&a.out, serde_json::to_string(&outcome.head).expect("serializable"))?;
    if let Some(t) = &a.trace {
        write_file(t, trace_csv(&outcome.trace))?;
        manifest.output("trace", t);
    }
    finish(manifest, &a.out)
}

fn load_features(paths: &[std::path::PathBuf]) -> CmdResult<EmbeddingMatrix> {
    let stores = paths.iter().map(|p| load_store(p)).collect::<CmdResult<Vec<_>>>()?;
    let refs: Vec<&EmbeddingMatrix> = stores.iter().collect();
    scorer_features(&refs).data("building scorer features")
}

pub fn train_reranker(a: TrainRerankerArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("train-reranker", &a);
    manifest
        .seed(a.seed)
        .input("negatives", &a.negatives)
        .input("qrels", &a.qrels)
        .output("scorer", &a.out);
    for (i, p) in a.embeddings.iter().enumerate() {
        manifest.input(&format!("embeddings.{i}"), p);
    }
    let negatives: Vec<HardNegativeSet> = load_jsonl(&a.negatives)?;
    let qrels = load_qrels(&a.qrels)?;
    let features = load_features(&a.embeddings)?;
    let cfg = RerankTrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        point_weight: a.point_weight,
        list_weight: a.list_weight,
    };
    let outcome = mmrank::rank_training::train_reranker(&negatives, &qrels, ToyScorer::zeros(features.dim()), &features, &cfg)
        .data("training")?;
    write_file(&a.out, serde_json::to_string(&outcome.scorer).expect("serializable"))?;
    if let Some(t) = &a.trace {
        write_file(t, rerank_trace_csv(&outcome.trace))?;
        manifest.output("trace", t);
    }
    finish(manifest, &a.out)
}

fn scorer_spec(a: &RerankArgs) -> CmdResult<String> {
    let env = std::env::var(SCORER_URL_ENV).ok().filter(|s| !s.is_empty());
    match (&a.scorer, env) {
        (Some(s), Some(url)) if s.starts_with("http:") => Ok(format!("http:{url}")),
        (Some(s), _) => Ok(s.clone()),
        (None, Some(url)) => Ok(format!("http:{url}")),
        (None, None) => Err(Failure::Usage(format!("--scorer is required when {SCORER_URL_ENV} is unset"))),
    }
}

fn resolve_scorer(a: &RerankArgs) -> CmdResult<ScorerHandle> {
    let spec = scorer_spec(a)?;
    if spec == "oracle" {
        let Some(path) = &a.qrels else {
            return Err(Failure::Usage("--scorer oracle needs --qrels".into()));
        };
        return Ok(ScorerHandle::Oracle(OracleScorer {
            qrels: Arc::new(load_qrels(path)?),
        }));
    }
    if spec == "mock" {
        return Ok(ScorerHandle::MockHash(MockHashScorer { seed: 0 }));
    }
    if let Some(seed) = spec.strip_prefix("mock:") {
        let seed = seed.parse().usage("mock scorer seed")?;
        return Ok(ScorerHandle::MockHash(MockHashScorer { seed }));
    }
    if let Some(path) = spec.strip_prefix("toy:") {
        if a.embeddings.is_empty() {
            return Err(Failure::Usage("--scorer toy:<file> needs --embeddings".into()));
        }
        let scorer: ToyScorer = load_json(Path::new(path))?;
        let embeddings = load_features(&a.embeddings)?;
        return Ok(ScorerHandle::Local(Arc::new(ToyScorerService { scorer, embeddings })));
    }
    if let Some(rest) = spec.strip_prefix("http:") {
        // Accept both `http:<url>` and a bare `http://host` URL.
        let url = if rest.starts_with("//") { format!("http:{rest}") } else { rest.to_owned() };
        if !(a.timeout_secs > 0.0) {
            return Err(Failure::Usage("--timeout-secs must be positive".into()));
        }
        let cfg = HttpConfig {
            timeout: Duration::from_secs_f64(a.timeout_secs),
            retries: a.retries,
            max_inflight: a.max_inflight,
            ..HttpConfig::default()
        };
        return HttpScorer::new(&url, cfg).map(ScorerHandle::RemoteHttp).map_err(gateway_failure);
    }
    Err(Failure::Usage(format!(
        "unknown scorer `{spec}`; expected mock[:seed], oracle, toy:<file> or http:<url>"
    )))
}

pub fn rerank(a: RerankArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("rerank", &a);
    manifest.input("run", &a.run).output("run", &a.out);
    let scorer = resolve_scorer(&a)?;
    manifest.note("scorer_identity", scorer.name());
    let runs = parse_run(&read_text(&a.run)?).data(format!("BadRunFile {}", a.run.display()))?;
    let mut records = HashMap::new();
    for path in &a.records {
        manifest.input("records", path);
        for r in load_jsonl::<Record>(path)? {
            records.insert(r.id.clone(), r);
        }
    }
    let cfg = RerankConfig {
        mode: match a.mode {
            ModeArg::Pointwise => RerankMode::Pointwise,
            ModeArg::Listwise => RerankMode::Listwise,
        },
        depth: a.depth,
        alpha: a.alpha,
        normalize_ret: a.normalize_ret,
    };
    let out = rerank_all(&records, &runs, &records, &scorer, &cfg).map_err(rerank_failure)?;
    write_file(&a.out, format_run(&out, &a.tag))?;
    finish(manifest, &a.out)
}

pub fn eval(a: EvalArgs) -> CmdResult<()> {
    let mut manifest = ManifestBuilder::new("eval", &a);
    manifest.input("run", &a.run).input("qrels", &a.qrels);
    let metrics = parse_metrics(&a.metrics).usage("--metrics")?;
    if a.pool_mode != "global" && a.pool_mode != "local" {
        return Err(Failure::Usage(format!("--pool-mode must be global or local, got `{}`", a.pool_mode)));
    }
    let runs = parse_run(&read_text(&a.run)?).data(format!("BadRunFile {}", a.run.display()))?;
    let qrels = load_qrels(&a.qrels)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        a.run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let report = evaluate(&runs, &qrels, &metrics, &run_id, &a.pool_mode).data("evaluation")?;
    let json = to_json(&report);
    println!("{json}");
    if let Some(out) = &a.out {
        write_file(out, &json)?;
        manifest.output("report", out);
        finish(manifest, out)?;
    }
    Ok(())
}
