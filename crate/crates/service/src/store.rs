use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use evitab::corpus::{AnnotationRecord, Answer, Doc};
use evitab::tabulate::assemble_table;
use evitab::EvidenceTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Accepted,
    Rejected,
}

impl Status {
    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "pending" => Some(Status::Pending),
            "accepted" => Some(Status::Accepted),
            "rejected" => Some(Status::Rejected),
            _ => None,
        }
    }

    fn answer(self) -> Answer {
        match self {
            Status::Pending => Answer::Pending,
            Status::Accepted => Answer::Accept,
            Status::Rejected => Answer::Reject,
        }
    }
}

/// One revision of a queued sentence. The log stores every revision; the
/// index keeps the latest per id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub doc: AnnotationRecord,
    pub table: EvidenceTable,
    pub status: Status,
    /// 0 for the enqueued pre-annotation, +1 per correction.
    pub revision: u64,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
}

impl ReviewItem {
    pub fn doc(&self) -> Doc {
        let id = self.id.clone();
        self.doc.clone().into_doc(|_| id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown item {0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Invalid {
        message: String,
        violations: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Verdict of a correction. `Save` records a revision and leaves the item pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
    Save,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Index {
    items: HashMap<String, ReviewItem>,
    /// Ids in enqueue order.
    order: Vec<String>,
}

impl Index {
    fn apply(&mut self, item: ReviewItem) {
        if !self.items.contains_key(&item.id) {
            self.order.push(item.id.clone());
        }
        self.items.insert(item.id.clone(), item);
    }

    pub fn replay<'a>(log: impl IntoIterator<Item = &'a ReviewItem>) -> Index {
        let mut index = Index::default();
        for item in log {
            index.apply(item.clone());
        }
        index
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.items.get(id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Items in enqueue order, optionally filtered by status.
    pub fn iter(&self, status: Option<Status>) -> impl Iterator<Item = &ReviewItem> {
        self.order
            .iter()
            .map(|id| &self.items[id])
            .filter(move |it| status.is_none_or(|s| it.status == s))
    }
}

/// Append-only revision log with a derived current-state index.
///
/// Backed by a JSONL file when opened from a path, in memory otherwise.
/// Callers serialize writes (the service holds it behind an `RwLock`).
pub struct RecordStore {
    log: Vec<ReviewItem>,
    index: Index,
    sink: Option<(PathBuf, BufWriter<File>)>,
    next_input: usize,
}

impl RecordStore {
    pub fn in_memory() -> Self {
        RecordStore {
            log: Vec::new(),
            index: Index::default(),
            sink: None,
            next_input: 0,
        }
    }

    /// Opens (or creates) a log file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut store = RecordStore::in_memory();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(io)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let item: ReviewItem =
                    serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                store.remember(item);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        store.sink = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    pub fn log(&self) -> &[ReviewItem] {
        &self.log
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    fn remember(&mut self, item: ReviewItem) {
        if let Some(k) = item
            .id
            .strip_prefix("input:")
            .and_then(|k| k.parse::<usize>().ok())
        {
            self.next_input = self.next_input.max(k + 1);
        }
        self.log.push(item.clone());
        self.index.apply(item);
    }

    fn append(&mut self, item: ReviewItem) -> Result<ReviewItem, StoreError> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&item).expect("review items always serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| StoreError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        self.remember(item.clone());
        Ok(item)
    }

    /// Next unused id of the form `input:<k>` for raw sentences.
    pub fn fresh_input_id(&mut self) -> String {
        loop {
            let id = format!("input:{}", self.next_input);
            self.next_input += 1;
            if self.index.get(&id).is_none() {
                return id;
            }
        }
    }

    /// Adds pre-annotated Docs as pending items. All-or-nothing: a duplicate
    /// id rejects the whole batch.
    pub fn enqueue(&mut self, docs: Vec<Doc>) -> Result<Vec<ReviewItem>, StoreError> {
        let mut seen = std::collections::HashSet::new();
        for d in &docs {
            if self.index.get(&d.id).is_some() || !seen.insert(d.id.as_str()) {
                return Err(StoreError::Conflict(format!(
                    "item {} already exists",
                    d.id
                )));
            }
        }
        let t = now_ms();
        let mut out = Vec::with_capacity(docs.len());
        for mut doc in docs {
            doc.meta.answer = Answer::Pending;
            let item = ReviewItem {
                id: doc.id.clone(),
                table: assemble_table(&doc),
                doc: AnnotationRecord::from(&doc),
                status: Status::Pending,
                revision: 0,
                created_at: t,
                updated_at: t,
            };
            out.push(self.append(item)?);
        }
        Ok(out)
    }

    /// Applies a correction to a pending item.
    ///
    /// `expected_revision`, when given, must equal the current revision.
    /// Accepted corrections must satisfy gold invariants; other verdicts only
    /// the structural ones.
    pub fn correct(
        &mut self,
        id: &str,
        corrected: Option<Doc>,
        verdict: Verdict,
        expected_revision: Option<u64>,
    ) -> Result<ReviewItem, StoreError> {
        let current = self
            .index
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.to_owned()))?;
        if current.status != Status::Pending {
            return Err(StoreError::Conflict(format!(
                "item {id} is already {}",
                serde_json::to_value(current.status)
                    .unwrap()
                    .as_str()
                    .unwrap()
            )));
        }
        if let Some(r) = expected_revision.filter(|&r| r != current.revision) {
            return Err(StoreError::Conflict(format!(
                "item {id} is at revision {}, correction was based on {r}",
                current.revision
            )));
        }
        let mut doc = corrected.unwrap_or_else(|| current.doc());
        doc.id = id.to_owned();
        doc.canonicalize();
        let violations = match verdict {
            Verdict::Accept => doc.gold_violations(),
            Verdict::Reject | Verdict::Save => doc.violations(),
        };
        if !violations.is_empty() {
            return Err(StoreError::Invalid {
                message: format!(
                    "correction to {id} breaks {} invariant(s)",
                    violations.len()
                ),
                violations,
            });
        }
        let status = match verdict {
            Verdict::Accept => Status::Accepted,
            Verdict::Reject => Status::Rejected,
            Verdict::Save => Status::Pending,
        };
        doc.meta.answer = status.answer();
        let item = ReviewItem {
            id: id.to_owned(),
            table: assemble_table(&doc),
            doc: AnnotationRecord::from(&doc),
            status,
            revision: current.revision + 1,
            created_at: current.created_at,
            updated_at: now_ms(),
        };
        self.append(item)
    }

    /// Latest revisions of accepted items (and rejected ones on request), in enqueue order.
    pub fn export(&self, include_rejected: bool) -> Vec<Doc> {
        self.index
            .iter(None)
            .filter(|it| {
                it.status == Status::Accepted || (include_rejected && it.status == Status::Rejected)
            })
            .map(ReviewItem::doc)
            .collect()
    }
}
