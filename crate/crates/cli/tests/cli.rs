use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use evitab::corpus::{read_annotations, write_annotations, QueryCache};
use evitab::evaluate::{eval_tab_strict, evaluate, read_table_dir, tables_from_docs};
use evitab::Task;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus.jsonl")
}

fn evitab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evitab"))
        .args(args)
        .env_remove("EVITAB_PORT")
        .env_remove("EVITAB_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = evitab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn echo_value(path: &Path, key: &str) -> Option<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_owned))
}

#[test]
fn split_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "split",
            s(&corpus()),
            "--seed",
            "7",
            "--ratios",
            "0.7,0.1,0.2",
            "--out-dir",
            s(out),
        ]);
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(
        manifest,
        fs::read_to_string(b.join("manifest.tsv")).unwrap()
    );
    assert!(manifest.starts_with("seed=7\n"));
    assert_eq!(manifest.lines().count(), 25);
    let sizes: Vec<usize> = ["train", "dev", "test"]
        .iter()
        .map(|n| {
            read_annotations(a.join(format!("{n}.jsonl")))
                .unwrap()
                .len()
        })
        .collect();
    assert_eq!(sizes, [18, 2, 4]);
    let echo = a.join("run.config");
    assert_eq!(echo_value(&echo, "seed").as_deref(), Some("7"));
    assert_eq!(echo_value(&echo, "ratios").as_deref(), Some("0.7,0.1,0.2"));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    for args in [
        &["split", "x.jsonl", "--ratios", "0.5,0.5", "--out-dir", "o"][..],
        &["evaluate", "--task", "tables", "--pred", "a", "--gold", "b"],
        &[
            "train",
            "ner",
            "--train",
            "a",
            "--fraction",
            "0",
            "--out",
            "m",
        ],
        &[
            "train",
            "ner",
            "--train",
            "a",
            "--dev",
            "d",
            "--holdout",
            "x",
            "--out",
            "m",
        ],
        &[
            "train",
            "ner",
            "--train",
            "a",
            "--backend",
            "bert",
            "--out",
            "m",
        ],
        &["predict", "--out", "p.jsonl", "--ner", "m"],
        &["serve", "--ner", "m"],
        &["frobnicate"],
    ] {
        assert_eq!(evitab(args).status.code(), Some(2), "{args:?}");
    }
    let out = evitab(&["split", "/nonexistent/x.jsonl", "--out-dir", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    assert_eq!(evitab(&["--help"]).status.code(), Some(0));
}

#[test]
fn evaluate_matches_module_output() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let stdout = ok(&[
        "evaluate",
        "--task",
        "tab-strict",
        "--pred",
        s(&corpus()),
        "--gold",
        s(&corpus()),
        "--out",
        s(&json),
    ]);
    let docs = read_annotations(corpus()).unwrap();
    let tables = tables_from_docs(&docs);
    let report = eval_tab_strict(&tables, &tables).unwrap();
    assert_eq!(report.f1(), 1.0);
    assert_eq!(stdout, report.to_table());
    assert_eq!(fs::read_to_string(&json).unwrap(), report.to_json());
    assert_eq!(
        echo_value(&sibling(&json, ".config"), "f1").as_deref(),
        Some("1")
    );

    for task in Task::ALL {
        let stdout = ok(&[
            "evaluate",
            "--task",
            task.as_str(),
            "--pred",
            s(&corpus()),
            "--gold",
            s(&corpus()),
        ]);
        assert_eq!(
            stdout,
            evaluate(task, &docs, &docs).unwrap().to_table(),
            "{task}"
        );
    }
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", p.display()))
}

#[test]
fn train_fraction_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let base = read_annotations(corpus()).unwrap();
    let mut docs = Vec::new();
    for k in 0..200 {
        let mut d = base[k % base.len()].clone();
        d.id = format!("{}:{}", 90_000_000 + k, 0);
        docs.push(d);
    }
    let pool = dir.path().join("pool.jsonl");
    write_annotations(&docs, &pool).unwrap();
    let model = dir.path().join("ner.json");
    ok(&[
        "train",
        "ner",
        "--train",
        s(&pool),
        "--fraction",
        "0.05",
        "--max-steps",
        "2",
        "--seed",
        "3",
        "--out",
        s(&model),
    ]);
    let echo = sibling(&model, ".config");
    assert_eq!(
        echo_value(&echo, "n_train_before_fraction").as_deref(),
        Some("200")
    );
    assert_eq!(echo_value(&echo, "n_train").as_deref(), Some("10"));
    assert_eq!(echo_value(&echo, "fraction").as_deref(), Some("0.05"));
    assert_eq!(echo_value(&echo, "seed").as_deref(), Some("3"));
    assert_eq!(echo_value(&echo, "max_steps").as_deref(), Some("2"));
    assert!(sibling(&model, ".log.jsonl").exists());
}

#[test]
fn holdout_writes_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("re.json");
    ok(&[
        "train",
        "re",
        "--train",
        s(&corpus()),
        "--holdout",
        "autism",
        "--max-steps",
        "2",
        "--out",
        s(&model),
    ]);
    let test = read_annotations(sibling(&model, ".test.jsonl")).unwrap();
    assert_eq!(test.len(), 4);
    assert!(test.iter().all(|d| d.meta.domain == "autism"));
    let echo = sibling(&model, ".config");
    assert_eq!(echo_value(&echo, "n_pool").as_deref(), Some("24"));
    // 20 remaining docs, dev gets floor(0.125 * 20) = 2.
    assert_eq!(echo_value(&echo, "n_dev").as_deref(), Some("2"));
    assert_eq!(echo_value(&echo, "n_train").as_deref(), Some("18"));

    let out = evitab(&[
        "train",
        "re",
        "--train",
        s(&corpus()),
        "--holdout",
        "dermatology",
        "--out",
        s(&model),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("known:"));
}

#[test]
fn train_predict_tabulate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let c = corpus();
    ok(&[
        "train",
        "ner",
        "--train",
        s(&c),
        "--dev",
        s(&c),
        "--out",
        s(&p("ner.json")),
    ]);
    ok(&[
        "train",
        "re",
        "--train",
        s(&c),
        "--dev",
        s(&c),
        "--out",
        s(&p("re.json")),
    ]);
    assert_eq!(
        echo_value(&p("ner.json.config"), "backend").as_deref(),
        Some("hashed:20")
    );

    ok(&[
        "predict",
        "--input",
        s(&c),
        "--ner",
        s(&p("ner.json")),
        "--re",
        s(&p("re.json")),
        "--out",
        s(&p("pred.jsonl")),
        "--matrices",
        s(&p("matrices.jsonl")),
        "--jobs",
        "4",
    ]);
    let pred = read_annotations(p("pred.jsonl")).unwrap();
    let gold = read_annotations(&c).unwrap();
    assert!(evaluate(Task::Ner, &pred, &gold).unwrap().f1() >= 0.95);
    assert!(evaluate(Task::Joint, &pred, &gold).unwrap().f1() >= 0.95);
    assert!(
        fs::read_to_string(p("matrices.jsonl"))
            .unwrap()
            .lines()
            .count()
            > 0
    );

    // RE alone runs over the input's gold entities.
    ok(&[
        "predict",
        "--input",
        s(&c),
        "--re",
        s(&p("re.json")),
        "--out",
        s(&p("re-gold.jsonl")),
    ]);
    let re_only = read_annotations(p("re-gold.jsonl")).unwrap();
    assert!(evaluate(Task::ReGold, &re_only, &gold).unwrap().f1() >= 0.95);

    ok(&[
        "tabulate",
        "--input",
        s(&c),
        "--gold",
        "--out-dir",
        s(&p("gold-tables")),
    ]);
    ok(&[
        "tabulate",
        "--input",
        s(&c),
        "--ner",
        s(&p("ner.json")),
        "--re",
        s(&p("re.json")),
        "--out-dir",
        s(&p("pred-tables")),
        "--jobs",
        "2",
    ]);
    let gold_tables = read_table_dir(p("gold-tables")).unwrap();
    assert_eq!(gold_tables, tables_from_docs(&gold));
    let stdout = ok(&[
        "evaluate",
        "--task",
        "tab-relaxed",
        "--pred",
        s(&p("pred-tables")),
        "--gold",
        s(&p("gold-tables")),
    ]);
    assert!(stdout.contains("tuple"));
    let report = evitab::evaluate::eval_tab_relaxed(
        &read_table_dir(p("pred-tables")).unwrap(),
        &gold_tables,
    )
    .unwrap();
    assert_eq!(stdout, report.to_table());
    assert!(report.f1() >= 0.9, "{stdout}");

    // Raw sentences in, tables out.
    let text: String = gold
        .iter()
        .take(3)
        .map(|d| format!("{}\n", d.text))
        .collect();
    fs::write(p("sentences.txt"), text).unwrap();
    ok(&[
        "tabulate",
        "--sentences",
        s(&p("sentences.txt")),
        "--ner",
        s(&p("ner.json")),
        "--re",
        s(&p("re.json")),
        "--out-dir",
        s(&p("raw-tables")),
    ]);
    let manifest = fs::read_to_string(p("raw-tables/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(p("raw-tables/input:0.csv").exists());
    assert_eq!(
        echo_value(&p("raw-tables/run.config"), "threshold").as_deref(),
        Some("0.5")
    );

    let csv = ok(&[
        "confusion",
        "ner",
        "--pred",
        s(&p("pred.jsonl")),
        "--gold",
        s(&c),
    ]);
    assert!(
        csv.starts_with("gold\\pred,")
            || csv.starts_with("gold,")
            || csv.lines().next().unwrap().contains("INTV"),
        "{csv}"
    );
    ok(&[
        "confusion",
        "re",
        "--pred",
        s(&p("pred.jsonl")),
        "--gold",
        s(&c),
        "--normalized",
        "--out",
        s(&p("re.csv")),
    ]);
    assert!(p("re.csv.config").exists());

    // A hashed model refuses an embeddings backend.
    let out = evitab(&[
        "predict",
        "--input",
        s(&c),
        "--ner",
        s(&p("ner.json")),
        "--backend",
        "hashed:12",
        "--out",
        s(&p("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_annotations_reports_domains() {
    let dir = tempfile::tempdir().unwrap();
    let mut docs = read_annotations(corpus()).unwrap();
    docs[0].meta.answer = evitab::Answer::Reject;
    let input = dir.path().join("in.jsonl");
    write_annotations(&docs, &input).unwrap();
    let out = dir.path().join("out.jsonl");
    let run = evitab(&[
        "ingest-annotations",
        s(&input),
        "--out",
        s(&out),
        "--gold",
        "--expect",
        "glaucoma=4",
        "--expect",
        "autism=4",
    ]);
    assert!(run.status.success());
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("glaucoma\t3\n"), "{stdout}");
    assert!(stdout.contains("total\t23 (1 dropped as rejected)"));
    let stderr = String::from_utf8(run.stderr).unwrap();
    assert!(
        stderr.contains("\"glaucoma\" has 3 docs, expected 4"),
        "{stderr}"
    );
    assert!(!stderr.contains("autism"));
    assert_eq!(read_annotations(&out).unwrap().len(), 23);

    let run = evitab(&["ingest-annotations", s(&input), s(&input), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn segment_selects_results() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("abstracts.tsv");
    fs::write(
        &input,
        "111\tglaucoma\tBACKGROUND: IOP matters. RESULTS: IOP fell to 18.3 mm Hg. Safety was good.\\nCONCLUSIONS: Fine.\n\
         222\tdiabetes\tWe enrolled 40 adults. Nothing else here.\n",
    )
    .unwrap();
    let out = dir.path().join("sentences.jsonl");
    let stdout = ok(&["segment", s(&input), "--out", s(&out)]);
    assert_eq!(stdout, "3 result sentences (1 low-confidence)\n");
    let docs = read_annotations(&out).unwrap();
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    assert_eq!(
        texts,
        [
            "IOP fell to 18.3 mm Hg.",
            "Safety was good.",
            "We enrolled 40 adults."
        ]
    );
    assert!(docs[2].meta.low_confidence && !docs[0].meta.low_confidence);
}

#[test]
fn ingest_brat_maps_labels() {
    let dir = tempfile::tempdir().unwrap();
    let brat = dir.path().join("brat");
    fs::create_dir(&brat).unwrap();
    fs::write(
        brat.join("555.txt"),
        "Timolol lowered IOP by 5 mm Hg. Age was 60.",
    )
    .unwrap();
    fs::write(
        brat.join("555.ann"),
        "T1\tDrug 0 7\tTimolol\nT2\tOutcome 16 19\tIOP\nT3\tValue 23 30\t5 mm Hg\nT4\tAge 32 35\tAge\n\
         R1\tOC_RES Arg1:T2 Arg2:T3\nR2\tA1_RES Arg1:T1 Arg2:T3\n",
    )
    .unwrap();
    let out = dir.path().join("brat.jsonl");
    let stdout = ok(&[
        "ingest-brat",
        s(&brat),
        "--mapping",
        "Drug=INTV,Outcome=OC,Value=MEAS,Age=drop",
        "--domain",
        "glaucoma",
        "--out",
        s(&out),
    ]);
    assert_eq!(stdout, "2 sentences from 1 abstracts\n");
    let docs = read_annotations(&out).unwrap();
    assert_eq!(docs[0].id, "555:0");
    assert_eq!((docs[0].entities.len(), docs[0].relations.len()), (3, 2));
    assert!(docs[1].entities.is_empty());

    let out = evitab(&[
        "ingest-brat",
        s(&brat),
        "--mapping",
        "Drug=INTV",
        "--out",
        s(&dir.path().join("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn partition_domains_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let pmids = ["101", "102", "103"].map(String::from);
    fs::write(dir.path().join("pmids.txt"), pmids.join("\n")).unwrap();
    let cache_dir = dir.path().join("cache");
    let cache = QueryCache::new(&cache_dir).unwrap();
    for p in &pmids {
        let hit: Vec<String> = if p == "102" { vec![] } else { vec![p.clone()] };
        cache
            .put(&QueryCache::key("glaucoma", std::slice::from_ref(p)), &hit)
            .unwrap();
    }
    let out = dir.path().join("domains.tsv");
    let pm = dir.path().join("pmids.txt");
    let stdout = ok(&[
        "partition-domains",
        "--pmids",
        s(&pm),
        "--domain",
        "glaucoma=glaucoma",
        "--cache",
        s(&cache_dir),
        "--offline",
        "--out",
        s(&out),
    ]);
    assert_eq!(stdout, "glaucoma\t2\n");
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "101\tglaucoma\n103\tglaucoma\n"
    );

    let miss = evitab(&[
        "partition-domains",
        "--pmids",
        s(&pm),
        "--domain",
        "autism=autism",
        "--cache",
        s(&cache_dir),
        "--offline",
        "--out",
        s(&out),
    ]);
    assert_eq!(miss.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&miss.stderr).contains("3 of 3 batches failed"));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut out = String::new();
    stream.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_answers_health_checks() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_evitab"))
        .arg("serve")
        .env("EVITAB_PORT", port.to_string())
        .env("EVITAB_DATA_DIR", dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/healthz") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let extract = http_get(port, "/export/train");
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("service never answered");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"models_loaded\":false"));
    assert!(extract.unwrap().contains("x-evitab-count: 0"));
    assert!(dir.path().join("review.jsonl").exists());
}
