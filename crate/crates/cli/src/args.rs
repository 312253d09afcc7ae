use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use evitab::Task;

#[derive(Debug, Parser)]
#[command(
    name = "evitab",
    version,
    about = "Evidence tables from RCT result sentences"
)]
pub struct Cli {
    /// Worker threads for per-doc work in predict and tabulate.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert brat .txt/.ann pairs into sentence Docs.
    IngestBrat(IngestBrat),
    /// Merge and validate annotation files.
    IngestAnnotations(IngestAnnotations),
    /// Assign PMIDs to disease domains by literature-index queries.
    PartitionDomains(PartitionDomains),
    /// Segment abstracts and keep result sentences.
    Segment(Segment),
    /// Seeded train/dev/test split.
    Split(Split),
    /// Train an NER or RE model.
    Train(Train),
    /// Run models over Docs or raw sentences.
    Predict(Predict),
    /// Score predictions against gold.
    Evaluate(Evaluate),
    /// Write one evidence-table CSV per Doc.
    Tabulate(Tabulate),
    /// Gold-by-predicted label counts.
    Confusion(Confusion),
    /// Run the extraction and review service.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct IngestBrat {
    /// Directory of `<pmid>.txt` files with sibling `<pmid>.ann` files.
    pub dir: PathBuf,
    /// Source-to-schema labels, e.g. `Intervention=INTV,Outcome=OC,Participant=drop`.
    #[arg(long)]
    pub mapping: String,
    #[arg(long, default_value = "")]
    pub domain: String,
    /// Abbreviation lexicon replacing the built-in one.
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestAnnotations {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Keep records answered `reject`.
    #[arg(long)]
    pub include_rejected: bool,
    /// Also require gold direction (parents INTV/OC, children MEAS).
    #[arg(long)]
    pub gold: bool,
    /// Expected count for a domain, reported (not enforced) on mismatch.
    #[arg(long = "expect", value_name = "DOMAIN=N", value_parser = parse_pair::<usize>)]
    pub expect: Vec<(String, usize)>,
}

#[derive(Debug, Args)]
pub struct PartitionDomains {
    /// File with one PMID per line.
    #[arg(long)]
    pub pmids: PathBuf,
    /// Domain name and search term; repeatable.
    #[arg(long = "domain", value_name = "NAME=TERM", required = true, value_parser = parse_pair::<String>)]
    pub domains: Vec<(String, String)>,
    /// Query cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Answer from the cache only.
    #[arg(long)]
    pub offline: bool,
    #[arg(long)]
    pub api_key: Option<String>,
    /// Output `pmid\tdomain` lines.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Segment {
    /// `pmid\tdomain\tabstract` lines; `\n` in the abstract marks a line break.
    pub input: PathBuf,
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Split {
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "0.7,0.1,0.2", value_parser = parse_ratios)]
    pub ratios: Ratios,
    /// Receives train.jsonl, dev.jsonl, test.jsonl and manifest.tsv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Ner,
    Re,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ner => "ner",
            ModelKind::Re => "re",
        })
    }
}

#[derive(Debug, Args)]
pub struct Train {
    pub kind: ModelKind,
    /// Training pool (annotation file).
    #[arg(long)]
    pub train: PathBuf,
    /// Early-stopping set; without it training runs to --max-steps.
    #[arg(long, conflicts_with = "holdout")]
    pub dev: Option<PathBuf>,
    /// Hold this domain out as test; train and dev come from the rest.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Dev share of the non-held-out pool.
    #[arg(long, default_value_t = 0.125, requires = "holdout", value_parser = parse_unit_open)]
    pub dev_ratio: f64,
    /// Train on ceil(fraction * n) sampled training Docs.
    #[arg(long, value_parser = parse_fraction)]
    pub fraction: Option<f64>,
    /// Keep only these domains (comma-separated) in train and dev.
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    #[command(flatten)]
    pub backend: BackendFlag,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Model file; the log, config echo and any held-out test set go beside it.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BackendFlag {
    /// `hashed`, `hashed:<bits>` or `embeddings:<path>`.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendArg>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct InputFlag {
    /// Annotation file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Plain text, one sentence per line; ids are `input:<k>`.
    #[arg(long)]
    pub sentences: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub ner: Option<PathBuf>,
    #[arg(long)]
    pub re: Option<PathBuf>,
    /// Relation threshold; defaults to the RE model's.
    #[arg(long, value_parser = parse_unit_open)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub backend: BackendFlag,
}

#[derive(Debug, Args)]
pub struct Predict {
    #[command(flatten)]
    pub input: InputFlag,
    /// With only --re, relations are predicted over the input's own entities.
    #[command(flatten)]
    pub models: ModelFlags,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also write per-pair relation probabilities as JSONL.
    #[arg(long)]
    pub matrices: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    /// Annotation file, or for tab tasks a directory of CSV tables.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Machine-readable report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Tabulate {
    #[command(flatten)]
    pub input: InputFlag,
    #[command(flatten)]
    pub models: ModelFlags,
    /// Tabulate the input's own annotations instead of running models.
    #[arg(long, conflicts_with_all = ["ner", "re"])]
    pub gold: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct Confusion {
    pub kind: ModelKind,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Row-normalized proportions instead of counts.
    #[arg(long)]
    pub normalized: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, requires = "re")]
    pub ner: Option<PathBuf>,
    #[arg(long, requires = "ner")]
    pub re: Option<PathBuf>,
    #[arg(long, value_parser = parse_unit_open)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub backend: BackendFlag,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Overrides EVITAB_PORT.
    #[arg(long)]
    pub port: Option<u16>,
    /// Holds the review log; overrides EVITAB_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = evitab_service::DEFAULT_BATCH_CAP)]
    pub batch_cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendArg {
    Hashed(u32),
    Embeddings(PathBuf),
}

impl fmt::Display for BackendArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendArg::Hashed(bits) => write!(f, "hashed:{bits}"),
            BackendArg::Embeddings(p) => write!(f, "embeddings:{}", p.display()),
        }
    }
}

fn parse_backend(s: &str) -> Result<BackendArg, String> {
    match s.split_once(':') {
        None if s == "hashed" => Ok(BackendArg::Hashed(evitab::features::DEFAULT_BUCKET_BITS)),
        Some(("hashed", bits)) => match bits.parse::<u32>() {
            Ok(b) if (1..=31).contains(&b) => Ok(BackendArg::Hashed(b)),
            _ => Err(format!("bucket bits {bits:?} must be an integer in 1..=31")),
        },
        Some(("embeddings", path)) if !path.is_empty() => Ok(BackendArg::Embeddings(path.into())),
        _ => Err("expected hashed, hashed:<bits> or embeddings:<path>".into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios(pub (f64, f64, f64));

impl fmt::Display for Ratios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b, c) = self.0;
        write!(f, "{a},{b},{c}")
    }
}

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("{p:?} is not a number"))
        })
        .collect::<Result<_, _>>()?;
    let [a, b, c] = parts[..] else {
        return Err("expected three comma-separated ratios".into());
    };
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(format!("ratios {a},{b},{c} must be in [0,1] and sum to 1"));
    }
    Ok(Ratios((a, b, c)))
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(f) if f > 0.0 && f <= 1.0 => Ok(f),
        _ => Err(format!("{s:?} is not in (0, 1]")),
    }
}

fn parse_unit_open(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(f) if f > 0.0 && f < 1.0 => Ok(f),
        _ => Err(format!("{s:?} is not in (0, 1)")),
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: evitab::Error| e.to_string())
}

fn parse_pair<T: FromStr>(s: &str) -> Result<(String, T), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("{s:?} is not KEY=VALUE"))?;
    let v = v.parse().map_err(|_| format!("bad value in {s:?}"))?;
    Ok((k.trim().to_owned(), v))
}
