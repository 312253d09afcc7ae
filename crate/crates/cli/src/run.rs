use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use evitab::corpus::{
    accepted, domain_holdout, partition_by_domain, read_annotations, select_result_sentences,
    split_dataset, stratify_fraction, write_annotations, AbstractRecord, Doc, EntrezClient,
    LabelMapping, LiteratureIndex, QueryCache, Segmenter,
};
use evitab::evaluate::{
    confusion_ner, confusion_re, eval_tab_relaxed, eval_tab_strict, evaluate, read_table_dir,
    tables_from_docs, TableSet,
};
use evitab::features::load_embeddings;
use evitab::ner::train_ner;
use evitab::relex::train_re;
use evitab::tabulate::{docs_from_sentences, tabulate_batch, Annotator};
use evitab::{
    BackendKind, FeatureSource, MetricsReport, NerModel, Pipeline, RelexModel, Task, TrainConfig,
};
use evitab_service::{AppState, RecordStore, ServiceConfig};

use crate::args::*;

/// Flat `key=value` record of a run, written next to its outputs.
struct Echo(Vec<(String, String)>);

impl Echo {
    fn new(command: &str) -> Self {
        Echo(vec![
            ("command".into(), command.into()),
            ("evitab_version".into(), env!("CARGO_PKG_VERSION").into()),
        ])
    }

    fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.0.push((key.to_owned(), value.to_string()));
        self
    }

    fn path(&mut self, key: &str, value: &Path) -> &mut Self {
        self.set(key, value.display())
    }

    fn opt<T: Display>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
        }
        write_file(path, out)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_file(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn write_docs(docs: &[Doc], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(write_annotations(docs, path)?)
}

fn read_docs(path: &Path) -> Result<Vec<Doc>> {
    read_annotations(path).with_context(|| format!("reading {}", path.display()))
}

fn read_input(input: &InputFlag) -> Result<Vec<Doc>> {
    match (&input.input, &input.sentences) {
        (Some(p), _) => read_docs(p),
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            Ok(docs_from_sentences(&lines))
        }
        (None, None) => unreachable!("clap requires one input"),
    }
}

fn echo_input(echo: &mut Echo, input: &InputFlag) {
    echo.opt("input", input.input.as_ref().map(|p| p.display()));
    echo.opt("sentences", input.sentences.as_ref().map(|p| p.display()));
}

fn warn(msg: impl Display) {
    eprintln!("warning: {msg}");
}

/// Builds the feature source from `--backend`, or from the models when the
/// flag is absent (hashed models carry their bucket width).
fn feature_source(flag: &BackendFlag, models: &[BackendKind]) -> Result<FeatureSource> {
    let source = match &flag.backend {
        Some(BackendArg::Hashed(bits)) => FeatureSource::hashed(*bits),
        Some(BackendArg::Embeddings(path)) => FeatureSource::embeddings(
            load_embeddings(path)
                .with_context(|| format!("loading embeddings {}", path.display()))?,
        ),
        None => match models.first() {
            None => FeatureSource::default(),
            Some(BackendKind::Hashed { bits }) => FeatureSource::hashed(*bits),
            Some(BackendKind::Embeddings { .. }) => {
                bail!("the model was trained on embeddings; pass --backend embeddings:<path>")
            }
        },
    };
    for kind in models {
        source.check(*kind)?;
    }
    Ok(source)
}

fn backend_label(flag: &BackendFlag, source: &FeatureSource) -> String {
    match (&flag.backend, source.kind()) {
        (Some(b), _) => b.to_string(),
        (None, BackendKind::Hashed { bits }) => format!("hashed:{bits}"),
        (None, BackendKind::Embeddings { dim }) => format!("embeddings(dim={dim})"),
    }
}

fn thread_pool(jobs: u16) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()?)
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    match cli.command {
        Command::IngestBrat(a) => ingest_brat(a),
        Command::IngestAnnotations(a) => ingest_annotations(a),
        Command::PartitionDomains(a) => partition_domains(a),
        Command::Segment(a) => segment(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a, jobs),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Tabulate(a) => tabulate(a, jobs),
        Command::Confusion(a) => confusion(a),
        Command::Serve(a) => serve(a),
    }
}

fn segmenter(path: &Option<PathBuf>) -> Result<Segmenter> {
    match path {
        Some(p) => Segmenter::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Segmenter::default()),
    }
}

fn ingest_brat(a: IngestBrat) -> Result<()> {
    let mapping: LabelMapping = a.mapping.parse()?;
    let segmenter = segmenter(&a.abbreviations)?;
    let mut stems: Vec<PathBuf> = fs::read_dir(&a.dir)
        .with_context(|| format!("reading {}", a.dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    stems.sort();
    let mut docs = Vec::new();
    for txt in &stems {
        let ann = txt.with_extension("ann");
        if !ann.exists() {
            warn(format!("{} has no .ann file; skipped", txt.display()));
            continue;
        }
        let pmid = txt.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let brat = evitab::corpus::parse_brat_files(txt, &ann)
            .with_context(|| format!("parsing {}", ann.display()))?;
        let mapped = evitab::corpus::map_source_labels(&brat, &mapping)
            .with_context(|| ann.display().to_string())?;
        let (mut sentences, diagnostics) = mapped.to_docs(pmid, &a.domain, &segmenter)?;
        for d in diagnostics {
            warn(format!("{pmid}: {d}"));
        }
        docs.append(&mut sentences);
    }
    write_docs(&docs, &a.out)?;
    println!("{} sentences from {} abstracts", docs.len(), stems.len());
    let mut echo = Echo::new("ingest-brat");
    echo.path("dir", &a.dir)
        .set("mapping", &a.mapping)
        .set("domain", &a.domain)
        .opt(
            "abbreviations",
            a.abbreviations.as_ref().map(|p| p.display()),
        )
        .path("out", &a.out)
        .set("n_docs", docs.len());
    echo.write(&sibling(&a.out, ".config"))
}

fn ingest_annotations(a: IngestAnnotations) -> Result<()> {
    let mut docs = Vec::new();
    for p in &a.inputs {
        docs.extend(read_docs(p)?);
    }
    let total = docs.len();
    if !a.include_rejected {
        docs = accepted(docs);
    }
    if a.gold {
        for d in &docs {
            let v = d.gold_violations();
            if !v.is_empty() {
                bail!("{}: {}", d.id, v.join("; "));
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = docs.iter().find(|d| !seen.insert(d.id.as_str())) {
        bail!("duplicate doc id {:?}", d.id);
    }
    let mut per_domain: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &docs {
        *per_domain.entry(d.meta.domain.as_str()).or_default() += 1;
    }
    for (domain, n) in &per_domain {
        println!("{domain}\t{n}");
    }
    println!(
        "total\t{} ({} dropped as rejected)",
        docs.len(),
        total - docs.len()
    );
    for (domain, want) in &a.expect {
        let got = per_domain.get(domain.as_str()).copied().unwrap_or(0);
        if got != *want {
            warn(format!("domain {domain:?} has {got} docs, expected {want}"));
        }
    }
    write_docs(&docs, &a.out)?;
    let mut echo = Echo::new("ingest-annotations");
    for p in &a.inputs {
        echo.path("input", p);
    }
    echo.path("out", &a.out)
        .set("include_rejected", a.include_rejected)
        .set("gold", a.gold)
        .set("n_docs", docs.len());
    echo.write(&sibling(&a.out, ".config"))
}

fn partition_domains(a: PartitionDomains) -> Result<()> {
    let text =
        fs::read_to_string(&a.pmids).with_context(|| format!("reading {}", a.pmids.display()))?;
    let pmids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    let cache = a.cache.as_ref().map(QueryCache::new).transpose()?;
    let client = EntrezClient {
        api_key: a.api_key.clone(),
        ..EntrezClient::default()
    };
    let client: Option<&dyn LiteratureIndex> = if a.offline { None } else { Some(&client) };
    let mut rows: Vec<(String, String)> = Vec::new();
    for (domain, term) in &a.domains {
        let hits = partition_by_domain(&pmids, term, client, cache.as_ref())
            .with_context(|| format!("domain {domain:?}"))?;
        println!("{domain}\t{}", hits.len());
        rows.extend(hits.into_iter().map(|p| (p, domain.clone())));
    }
    rows.sort();
    let out: String = rows.iter().map(|(p, d)| format!("{p}\t{d}\n")).collect();
    write_file(&a.out, out)?;
    let mut echo = Echo::new("partition-domains");
    echo.path("pmids", &a.pmids);
    for (domain, term) in &a.domains {
        echo.set("domain", format!("{domain}={term}"));
    }
    echo.opt("cache", a.cache.as_ref().map(|p| p.display()))
        .set("offline", a.offline)
        .path("out", &a.out);
    echo.write(&sibling(&a.out, ".config"))
}

fn segment(a: Segment) -> Result<()> {
    let segmenter = segmenter(&a.abbreviations)?;
    let text =
        fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut docs = Vec::new();
    let mut flagged = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(pmid), Some(domain), Some(body)) = (parts.next(), parts.next(), parts.next())
        else {
            bail!(
                "{} line {}: expected pmid<TAB>domain<TAB>abstract",
                a.input.display(),
                i + 1
            );
        };
        let record = AbstractRecord::from_text(pmid, domain, &body.replace("\\n", "\n"));
        let selected = select_result_sentences(&record, &segmenter);
        flagged += selected.iter().filter(|d| d.meta.low_confidence).count();
        docs.extend(selected);
    }
    write_docs(&docs, &a.out)?;
    println!("{} result sentences ({flagged} low-confidence)", docs.len());
    let mut echo = Echo::new("segment");
    echo.path("input", &a.input)
        .opt(
            "abbreviations",
            a.abbreviations.as_ref().map(|p| p.display()),
        )
        .path("out", &a.out)
        .set("n_docs", docs.len());
    echo.write(&sibling(&a.out, ".config"))
}

fn split(a: Split) -> Result<()> {
    let all = read_docs(&a.input)?;
    let n_all = all.len();
    let docs = accepted(all);
    let s = split_dataset(docs, a.ratios.0, a.seed)?;
    for w in &s.warnings {
        warn(w);
    }
    let dir = &a.out_dir;
    write_docs(&s.train, &dir.join("train.jsonl"))?;
    write_docs(&s.dev, &dir.join("dev.jsonl"))?;
    write_docs(&s.test, &dir.join("test.jsonl"))?;
    write_file(&dir.join("manifest.tsv"), s.manifest())?;
    let (tr, dv, te) = s.sizes();
    println!("train {tr}\tdev {dv}\ttest {te}");
    let mut echo = Echo::new("split");
    echo.path("input", &a.input)
        .set("seed", a.seed)
        .set("ratios", a.ratios)
        .path("out_dir", dir)
        .set("n_rejected_dropped", n_all - (tr + dv + te))
        .set("n_train", tr)
        .set("n_dev", dv)
        .set("n_test", te);
    echo.write(&dir.join("run.config"))
}

fn filter_domains(docs: Vec<Doc>, domains: &Option<Vec<String>>) -> Vec<Doc> {
    match domains {
        Some(keep) => docs
            .into_iter()
            .filter(|d| keep.contains(&d.meta.domain))
            .collect(),
        None => docs,
    }
}

fn train(a: Train) -> Result<()> {
    let mut config = TrainConfig {
        seed: a.seed,
        learning_rate: a.learning_rate,
        ..TrainConfig::default()
    };
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.dropout {
        config.dropout = v;
    }
    if let Some(v) = a.patience {
        config.patience_steps = v;
    }
    if let Some(v) = a.max_steps {
        config.max_steps = v;
        // A short run keeps the default patience only up to its length.
        if a.patience.is_none() {
            config.patience_steps = config.patience_steps.min(v);
        }
    }
    if let Some(v) = a.eval_interval {
        config.eval_interval = v;
    }
    config.validate()?;
    let source = feature_source(&a.backend, &[])?;

    let pool = filter_domains(accepted(read_docs(&a.train)?), &a.domains);
    let n_pool = pool.len();
    let (train, dev, test) = match &a.holdout {
        Some(domain) => {
            let s = domain_holdout(&pool, domain, a.dev_ratio, a.seed)?;
            for w in &s.warnings {
                warn(w);
            }
            (s.train, s.dev, Some(s.test))
        }
        None => {
            let dev = match &a.dev {
                Some(p) => filter_domains(accepted(read_docs(p)?), &a.domains),
                None => Vec::new(),
            };
            (pool, dev, None)
        }
    };
    let n_before_fraction = train.len();
    let train = match a.fraction {
        Some(f) => stratify_fraction(&train, f, a.seed)?,
        None => train,
    };
    if dev.is_empty() {
        warn("no dev set; training runs to max_steps");
    }

    let log = match a.kind {
        ModelKind::Ner => {
            let (model, log) = train_ner(&train, &dev, &source, &config)?;
            model.save(&a.out)?;
            log
        }
        ModelKind::Re => {
            let (model, log) = train_re(&train, &dev, &source, &config)?;
            model.save(&a.out)?;
            log
        }
    };
    log.write(sibling(&a.out, ".log.jsonl"))?;
    for note in &log.notes {
        warn(note);
    }
    if let Some(test) = &test {
        write_docs(test, &sibling(&a.out, ".test.jsonl"))?;
    }
    println!(
        "{} model: {} train docs, {} dev docs, {} steps, best step {}",
        a.kind,
        train.len(),
        dev.len(),
        log.steps_run,
        log.best_step
    );

    let mut echo = Echo::new("train");
    echo.set("model", a.kind)
        .path("train", &a.train)
        .opt("dev", a.dev.as_ref().map(|p| p.display()))
        .opt("holdout", a.holdout.as_ref());
    if a.holdout.is_some() {
        echo.set("dev_ratio", a.dev_ratio);
    }
    echo.opt("fraction", a.fraction)
        .opt("domains", a.domains.as_ref().map(|d| d.join(",")))
        .set("backend", backend_label(&a.backend, &source))
        .path("out", &a.out)
        .set("n_pool", n_pool)
        .set("n_train_before_fraction", n_before_fraction)
        .set("n_train", train.len())
        .set("n_dev", dev.len())
        .opt("n_test", test.as_ref().map(Vec::len));
    for (k, v) in config.resolved(source.kind()).echo() {
        echo.set(&k, v);
    }
    echo.write(&sibling(&a.out, ".config"))
}

struct Models {
    ner: Option<NerModel>,
    re: Option<RelexModel>,
    source: FeatureSource,
    threshold: f64,
}

fn load_models(m: &ModelFlags) -> Result<Models> {
    let ner = m
        .ner
        .as_ref()
        .map(|p| NerModel::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let re =
        m.re.as_ref()
            .map(|p| RelexModel::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()?;
    let kinds: Vec<BackendKind> = ner
        .iter()
        .map(|n| n.backend)
        .chain(re.iter().map(|r| r.backend))
        .collect();
    let source = feature_source(&m.backend, &kinds)?;
    let threshold = m
        .threshold
        .or(re.as_ref().map(|r| r.threshold))
        .unwrap_or(evitab::relex::DEFAULT_THRESHOLD);
    Ok(Models {
        ner,
        re,
        source,
        threshold,
    })
}

fn echo_models(echo: &mut Echo, flags: &ModelFlags, models: &Models) {
    echo.opt("ner", flags.ner.as_ref().map(|p| p.display()))
        .opt("re", flags.re.as_ref().map(|p| p.display()))
        .set("threshold", models.threshold)
        .set("backend", backend_label(&flags.backend, &models.source));
}

impl Models {
    fn annotate(&self, doc: &Doc) -> evitab::Result<Doc> {
        let doc = match &self.ner {
            Some(ner) => ner.decode(doc, &self.source)?,
            None => doc.clone(),
        };
        match &self.re {
            Some(re) => re.annotate(&doc, &self.source, self.threshold),
            None => Ok(doc),
        }
    }
}

fn annotate_all(models: &Models, docs: &[Doc], jobs: u16) -> Result<Vec<Doc>> {
    let pool = thread_pool(jobs)?;
    Ok(pool.install(|| {
        docs.par_iter()
            .map(|d| models.annotate(d))
            .collect::<evitab::Result<Vec<_>>>()
    })?)
}

fn predict(a: Predict, jobs: u16) -> Result<()> {
    if a.models.ner.is_none() && a.models.re.is_none() {
        bail!("predict needs --ner, --re or both");
    }
    let models = load_models(&a.models)?;
    let docs = read_input(&a.input)?;
    let pred = annotate_all(&models, &docs, jobs)?;
    write_docs(&pred, &a.out)?;
    if let (Some(path), Some(re)) = (&a.matrices, &models.re) {
        let mut out = String::new();
        for d in &pred {
            out.push_str(&re.score_pairs(d, &models.source)?.to_jsonl(&d.id));
        }
        write_file(path, out)?;
    }
    println!("{} docs annotated", pred.len());
    let mut echo = Echo::new("predict");
    echo_input(&mut echo, &a.input);
    echo_models(&mut echo, &a.models, &models);
    echo.path("out", &a.out)
        .opt("matrices", a.matrices.as_ref().map(|p| p.display()))
        .set("jobs", jobs);
    echo.write(&sibling(&a.out, ".config"))
}

fn read_tables(path: &Path) -> Result<TableSet> {
    if path.is_dir() {
        read_table_dir(path).with_context(|| format!("reading tables in {}", path.display()))
    } else {
        Ok(tables_from_docs(&read_docs(path)?))
    }
}

/// The report for `task`, exactly as the evaluate module produces it.
pub fn report(task: Task, pred: &Path, gold: &Path) -> Result<MetricsReport> {
    Ok(match task {
        Task::TabStrict => eval_tab_strict(&read_tables(pred)?, &read_tables(gold)?)?,
        Task::TabRelaxed => eval_tab_relaxed(&read_tables(pred)?, &read_tables(gold)?)?,
        _ => evaluate(task, &read_docs(pred)?, &read_docs(gold)?)?,
    })
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let report = report(a.task, &a.pred, &a.gold)?;
    print!("{}", report.to_table());
    std::io::stdout().flush()?;
    if let Some(out) = &a.out {
        write_file(out, report.to_json())?;
        let mut echo = Echo::new("evaluate");
        echo.set("task", a.task)
            .path("pred", &a.pred)
            .path("gold", &a.gold)
            .path("out", out)
            .set("f1", report.f1());
        echo.write(&sibling(out, ".config"))?;
    }
    Ok(())
}

fn tabulate(a: Tabulate, jobs: u16) -> Result<()> {
    let docs = read_input(&a.input)?;
    let mut echo = Echo::new("tabulate");
    echo_input(&mut echo, &a.input);
    let annotated = if a.gold {
        echo.set("gold", true);
        docs
    } else {
        if a.models.ner.is_none() || a.models.re.is_none() {
            bail!("tabulate needs --ner and --re, or --gold");
        }
        let models = load_models(&a.models)?;
        echo_models(&mut echo, &a.models, &models);
        annotate_all(&models, &docs, jobs)?
    };
    let written = tabulate_batch(&annotated, Annotator::Gold, &a.out_dir)?;
    println!(
        "{} tables written to {}",
        written.len(),
        a.out_dir.display()
    );
    echo.path("out_dir", &a.out_dir)
        .set("jobs", jobs)
        .set("n_tables", written.len());
    echo.write(&a.out_dir.join("run.config"))
}

fn confusion(a: Confusion) -> Result<()> {
    let pred = read_docs(&a.pred)?;
    let gold = read_docs(&a.gold)?;
    let matrix = match a.kind {
        ModelKind::Ner => confusion_ner(&pred, &gold)?,
        ModelKind::Re => confusion_re(&pred, &gold)?,
    };
    let csv = matrix.to_csv(a.normalized);
    match &a.out {
        Some(out) => {
            write_file(out, &csv)?;
            let mut echo = Echo::new("confusion");
            echo.set("kind", a.kind)
                .path("pred", &a.pred)
                .path("gold", &a.gold)
                .set("normalized", a.normalized)
                .path("out", out);
            echo.write(&sibling(out, ".config"))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn serve(a: Serve) -> Result<()> {
    let (env_port, env_dir) = evitab_service::env_defaults().map_err(anyhow::Error::msg)?;
    let port = a.port.unwrap_or(env_port);
    let data_dir = a.data_dir.clone().unwrap_or(env_dir);
    let pipeline = match (&a.ner, &a.re) {
        (Some(_), Some(_)) => {
            let flags = ModelFlags {
                ner: a.ner.clone(),
                re: a.re.clone(),
                threshold: a.threshold,
                backend: BackendFlag {
                    backend: a.backend.backend.clone(),
                },
            };
            let m = load_models(&flags)?;
            Some(Pipeline::new(
                m.ner.unwrap(),
                m.re.unwrap(),
                m.source,
                m.threshold,
            )?)
        }
        _ => {
            warn("no models given; /extract and /queue will answer 503");
            None
        }
    };
    let store = RecordStore::open(data_dir.join(evitab_service::LOG_FILE))?;
    let config = ServiceConfig {
        batch_cap: a.batch_cap,
        ..ServiceConfig::default()
    };
    let state = AppState::new(pipeline, store, config);
    let addr = std::net::SocketAddr::new(a.host, port);
    eprintln!("serving on http://{addr} (data in {})", data_dir.display());
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(evitab_service::serve(addr, state))?;
    Ok(())
}
