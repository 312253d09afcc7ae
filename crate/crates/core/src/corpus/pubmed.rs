use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of groups the id list is split into before querying.
pub const QUERY_BATCHES: usize = 10;

/// A literature index that can filter a batch of PMIDs by a search term.
pub trait LiteratureIndex {
    /// Returns the subset of `pmids` whose records match `term`.
    fn search(&self, term: &str, pmids: &[String]) -> Result<Vec<String>>;
}

/// NCBI E-utilities `esearch` client.
#[derive(Debug, Clone)]
pub struct EntrezClient {
    pub endpoint: String,
    pub api_key: Option<String>,
}

impl Default for EntrezClient {
    fn default() -> Self {
        EntrezClient {
            endpoint: "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/esearch.fcgi".into(),
            api_key: None,
        }
    }
}

impl LiteratureIndex for EntrezClient {
    fn search(&self, term: &str, pmids: &[String]) -> Result<Vec<String>> {
        let ids = pmids
            .iter()
            .map(|p| format!("{p}[uid]"))
            .collect::<Vec<_>>()
            .join(" OR ");
        let query = format!("({ids}) AND ({term})");
        let retmax = pmids.len().max(1).to_string();
        let mut form = vec![
            ("db", "pubmed"),
            ("retmode", "json"),
            ("retmax", retmax.as_str()),
            ("term", query.as_str()),
        ];
        if let Some(key) = &self.api_key {
            form.push(("api_key", key.as_str()));
        }
        let transport = |e: ureq::Error| Error::Transport(e.to_string());
        let value: serde_json::Value = ureq::post(&self.endpoint)
            .send_form(form)
            .map_err(transport)?
            .body_mut()
            .read_json()
            .map_err(transport)?;
        let list = value
            .pointer("/esearchresult/idlist")
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                Error::Transport("esearch response lacks esearchresult.idlist".into())
            })?;
        Ok(list
            .iter()
            .filter_map(|v| v.as_str().map(str::to_owned))
            .collect())
    }
}

/// Content-addressed store of query responses, one JSON file per
/// (term, batch) key. Writes go to a temp file and are renamed into place.
#[derive(Debug, Clone)]
pub struct QueryCache {
    dir: PathBuf,
}

impl QueryCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(QueryCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(term: &str, pmids: &[String]) -> String {
        let mut hasher = Sha256::new();
        hasher.update(term.as_bytes());
        for p in pmids {
            hasher.update(b"\n");
            hasher.update(p.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<String>>> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, ids: &[String]) -> Result<()> {
        let path = self.path(key);
        let tmp = self.dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(serde_json::to_string(ids)?.as_bytes())
            .and_then(|_| file.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
    }
}

/// Filters `pmids` down to those whose records match `term`.
///
/// The ids go out in [`QUERY_BATCHES`] groups. Cached batches never touch
/// the client; fresh responses are cached. Any failed batch fails the whole
/// call, naming every failed batch.
pub fn partition_by_domain(
    pmids: &[String],
    term: &str,
    client: Option<&dyn LiteratureIndex>,
    cache: Option<&QueryCache>,
) -> Result<BTreeSet<String>> {
    if pmids.is_empty() {
        return Ok(BTreeSet::new());
    }
    let batch_size = pmids.len().div_ceil(QUERY_BATCHES);
    let wanted: BTreeSet<&String> = pmids.iter().collect();
    let mut matched = BTreeSet::new();
    let mut failed = Vec::new();
    for (b, batch) in pmids.chunks(batch_size).enumerate() {
        let key = QueryCache::key(term, batch);
        if let Some(hit) = cache.map(|c| c.get(&key)).transpose()?.flatten() {
            matched.extend(hit);
            continue;
        }
        let Some(client) = client else {
            failed.push(format!("batch {b}: no client and no cached response"));
            continue;
        };
        match client.search(term, batch) {
            Ok(ids) => {
                if let Some(c) = cache {
                    c.put(&key, &ids)?;
                }
                matched.extend(ids);
            }
            Err(e) => failed.push(format!("batch {b}: {e}")),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Transport(format!(
            "{} of {} batches failed: {}",
            failed.len(),
            pmids.chunks(batch_size).len(),
            failed.join("; ")
        )));
    }
    Ok(matched
        .into_iter()
        .filter(|id| wanted.contains(id))
        .collect())
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    struct Counting {
        calls: Cell<usize>,
        fail_batch_containing: Option<String>,
    }

    impl LiteratureIndex for Counting {
        fn search(&self, _term: &str, pmids: &[String]) -> Result<Vec<String>> {
            self.calls.set(self.calls.get() + 1);
            if let Some(bad) = &self.fail_batch_containing {
                if pmids.contains(bad) {
                    return Err(Error::Transport("connection refused".into()));
                }
            }
            Ok(pmids.iter().filter(|p| p.ends_with('7')).cloned().collect())
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| (10_000_000 + i).to_string()).collect()
    }

    #[test]
    fn cached_fixture_needs_no_network() {
        let dir = tempfile::tempdir().unwrap();
        let cache = QueryCache::new(dir.path()).unwrap();
        let pmids = ids(5000);
        let live = Counting {
            calls: Cell::new(0),
            fail_batch_containing: None,
        };
        let first = partition_by_domain(&pmids, "diabetes", Some(&live), Some(&cache)).unwrap();
        assert_eq!(live.calls.get(), QUERY_BATCHES);
        assert_eq!(first.len(), 500);

        let offline = Counting {
            calls: Cell::new(0),
            fail_batch_containing: None,
        };
        let again = partition_by_domain(&pmids, "diabetes", Some(&offline), Some(&cache)).unwrap();
        assert_eq!(offline.calls.get(), 0);
        assert_eq!(again, first);
        assert_eq!(
            partition_by_domain(&pmids, "diabetes", None, Some(&cache)).unwrap(),
            first
        );
    }

    #[test]
    fn empty_ids() {
        assert!(partition_by_domain(&[], "x", None, None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unreachable_without_cache_is_transport_error() {
        let client = Counting {
            calls: Cell::new(0),
            fail_batch_containing: Some("10000003".into()),
        };
        let err = partition_by_domain(&ids(4), "x", Some(&client), None).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        let err = partition_by_domain(&ids(4), "x", None, None).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
    }

    #[test]
    fn partial_failure_lists_batches() {
        let client = Counting {
            calls: Cell::new(0),
            fail_batch_containing: Some("10000042".into()),
        };
        let err = partition_by_domain(&ids(100), "x", Some(&client), None).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("1 of 10 batches failed") && msg.contains("batch 4"),
            "{msg}"
        );
    }
}
