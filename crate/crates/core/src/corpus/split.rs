use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Answer, Doc};
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitSet {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitSet::Train => "train",
            SplitSet::Dev => "dev",
            SplitSet::Test => "test",
        })
    }
}

impl FromStr for SplitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSet::Train),
            "dev" => Ok(SplitSet::Dev),
            "test" => Ok(SplitSet::Test),
            other => Err(Error::Config(format!("unknown split set {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Doc>,
    pub dev: Vec<Doc>,
    pub test: Vec<Doc>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&str, SplitSet)> {
        fn tag(docs: &[Doc], set: SplitSet) -> impl Iterator<Item = (&str, SplitSet)> {
            docs.iter().map(move |d| (d.id.as_str(), set))
        }
        tag(&self.train, SplitSet::Train)
            .chain(tag(&self.dev, SplitSet::Dev))
            .chain(tag(&self.test, SplitSet::Test))
    }

    /// `seed=<n>` followed by one `<doc-id>\t<set>` line per Doc.
    pub fn manifest(&self) -> String {
        let mut out = format!("seed={}\n", self.seed);
        for (id, set) in self.assignments() {
            out.push_str(&format!("{id}\t{set}\n"));
        }
        out
    }

    fn warn_if_empty(&mut self) {
        for (name, docs) in [("dev", &self.dev), ("test", &self.test)] {
            if docs.is_empty() {
                let msg = format!("{name} set is empty");
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
        }
    }
}

/// Parses a split manifest back into its seed and assignments.
pub fn read_manifest(text: &str) -> Result<(u64, Vec<(String, SplitSet)>)> {
    let mut lines = text.lines().enumerate();
    let seed = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("seed="))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "expected `seed=<n>` header".into(),
        })?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let (id, set) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected `<doc-id>\\t<set>`".into(),
        })?;
        out.push((id.to_owned(), set.parse()?));
    }
    Ok((seed, out))
}

/// Dev and test get `floor(ratio * n)`; train takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let dev = (ratios.1 * n as f64 + EPS).floor() as usize;
    let test = (ratios.2 * n as f64 + EPS).floor() as usize;
    (n - dev - test, dev, test)
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > EPS {
        return Err(Error::Config(format!(
            "split ratios {a},{b},{c} must be in [0,1] and sum to 1"
        )));
    }
    Ok(())
}

/// Shuffles under `seed` and cuts into train/dev/test.
pub fn split_dataset(docs: Vec<Doc>, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    check_ratios(ratios)?;
    if docs.len() < 3 {
        return Err(Error::Size(format!(
            "need at least 3 docs to split, got {}",
            docs.len()
        )));
    }
    if let Some(d) = docs.iter().find(|d| d.meta.answer == Answer::Reject) {
        return Err(Error::Contract(format!(
            "rejected doc {} must be filtered before splitting",
            d.id
        )));
    }
    let mut docs = docs;
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_dev, _) = split_sizes(docs.len(), ratios);
    let test = docs.split_off(n_train + n_dev);
    let dev = docs.split_off(n_train);
    let mut split = DatasetSplit {
        train: docs,
        dev,
        test,
        seed,
        warnings: Vec::new(),
    };
    split.warn_if_empty();
    Ok(split)
}

/// Samples `ceil(fraction * n)` Docs without replacement, keeping input order.
pub fn stratify_fraction(train: &[Doc], fraction: f64, seed: u64) -> Result<Vec<Doc>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range(format!(
            "fraction {fraction} must lie in (0, 1]"
        )));
    }
    let k = ((fraction * train.len() as f64) - EPS).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..k.min(train.len())].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| train[i].clone()).collect())
}

/// Holds one domain out as the test set; the rest is shuffled and cut into
/// train and dev, dev taking `floor(dev_ratio * m)`.
pub fn domain_holdout(
    docs: &[Doc],
    holdout: &str,
    dev_ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&dev_ratio) {
        return Err(Error::Config(format!(
            "dev ratio {dev_ratio} must lie in [0, 1)"
        )));
    }
    if !docs.iter().any(|d| d.meta.domain == holdout) {
        let mut known: Vec<&str> = docs.iter().map(|d| d.meta.domain.as_str()).collect();
        known.sort_unstable();
        known.dedup();
        return Err(Error::Lookup(format!(
            "domain {holdout:?} not found; known: {}",
            known.join(", ")
        )));
    }
    let (test, mut rest): (Vec<Doc>, Vec<Doc>) =
        docs.iter().cloned().partition(|d| d.meta.domain == holdout);
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = (dev_ratio * rest.len() as f64 + EPS).floor() as usize;
    let dev = rest.split_off(rest.len() - n_dev);
    let mut split = DatasetSplit {
        train: rest,
        dev,
        test,
        seed,
        warnings: Vec::new(),
    };
    split.warn_if_empty();
    Ok(split)
}

/// Draws `per_domain` random Docs from each listed domain into one pool.
pub fn mixed_domain_pool(
    docs: &[Doc],
    domains: &[&str],
    per_domain: usize,
    seed: u64,
) -> Result<Vec<Doc>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(per_domain * domains.len());
    for domain in domains {
        let mut members: Vec<&Doc> = docs.iter().filter(|d| d.meta.domain == *domain).collect();
        if members.is_empty() {
            return Err(Error::Lookup(format!("domain {domain:?} not found")));
        }
        if members.len() < per_domain {
            return Err(Error::Size(format!(
                "domain {domain:?} has {} docs, {per_domain} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        pool.extend(members.into_iter().take(per_domain).cloned());
    }
    pool.shuffle(&mut rng);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use proptest::prelude::*;

    fn docs(n: usize, domain: &str) -> Vec<Doc> {
        (0..n)
            .map(|i| {
                let mut d = Doc::from_text(format!("{domain}{i}:0"), "x");
                d.meta.domain = domain.into();
                d
            })
            .collect()
    }

    /// Independent enumeration of the floor+remainder rule.
    fn sizes_by_counting(n: usize) -> (usize, usize, usize) {
        let (mut dev, mut test) = (0, 0);
        while 10 * (dev + 1) <= n {
            dev += 1;
        }
        while 10 * (test + 1) <= 2 * n {
            test += 1;
        }
        (n - dev - test, dev, test)
    }

    #[test]
    fn ten_docs_split_seven_one_two() {
        let s = split_dataset(docs(10, "g"), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(s.sizes(), (7, 1, 2));
    }

    #[test]
    fn nine_docs_leave_dev_empty_with_warning() {
        let s = split_dataset(docs(9, "g"), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(s.sizes(), (8, 0, 1));
        assert_eq!(s.warnings, ["dev set is empty"]);
    }

    #[test]
    fn floor_remainder_matches_enumeration() {
        for n in 3..=30 {
            assert_eq!(
                split_sizes(n, DEFAULT_RATIOS),
                sizes_by_counting(n),
                "n={n}"
            );
        }
    }

    #[test]
    fn too_few_docs() {
        assert!(matches!(
            split_dataset(docs(2, "g"), DEFAULT_RATIOS, 1),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn rejected_docs_are_refused() {
        let mut ds = docs(5, "g");
        ds[2].meta.answer = Answer::Reject;
        assert!(matches!(
            split_dataset(ds, DEFAULT_RATIOS, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn manifest_round_trips() {
        let s = split_dataset(docs(20, "g"), DEFAULT_RATIOS, 7).unwrap();
        let again = split_dataset(docs(20, "g"), DEFAULT_RATIOS, 7).unwrap();
        assert_eq!(s.manifest(), again.manifest());
        let (seed, rows) = read_manifest(&s.manifest()).unwrap();
        assert_eq!(seed, 7);
        assert_eq!(rows.len(), 20);
        assert_ne!(
            s.manifest(),
            split_dataset(docs(20, "g"), DEFAULT_RATIOS, 8)
                .unwrap()
                .manifest()
        );
    }

    #[test]
    fn fractions() {
        let pool = docs(200, "g");
        assert_eq!(stratify_fraction(&pool, 0.05, 3).unwrap().len(), 10);
        assert_eq!(stratify_fraction(&pool, 1.0, 3).unwrap(), pool);
        let pool = docs(216, "g");
        let a = stratify_fraction(&pool, 0.30, 1).unwrap();
        let b = stratify_fraction(&pool, 0.30, 2).unwrap();
        assert_eq!((a.len(), b.len()), (65, 65));
        assert_ne!(a, b);
        assert!(matches!(
            stratify_fraction(&pool, 0.0, 1),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            stratify_fraction(&pool, 1.5, 1),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn holdout() {
        let mut all = docs(6, "glaucoma");
        all.extend(docs(4, "autism"));
        let s = domain_holdout(&all, "autism", 0.125, 0).unwrap();
        assert_eq!(s.test.len(), 4);
        assert!(s.test.iter().all(|d| d.meta.domain == "autism"));
        assert!(s
            .train
            .iter()
            .chain(&s.dev)
            .all(|d| d.meta.domain == "glaucoma"));
        assert!(matches!(
            domain_holdout(&all, "asthma", 0.125, 0),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn capped_mixed_pool() {
        let mut all = docs(130, "glaucoma");
        all.extend(docs(80, "cardio"));
        all.extend(docs(100, "solid-tumour"));
        let pool = mixed_domain_pool(&all, &["glaucoma", "cardio", "solid-tumour"], 72, 5).unwrap();
        assert_eq!(pool.len(), 216);
        for dom in ["glaucoma", "cardio", "solid-tumour"] {
            assert_eq!(pool.iter().filter(|d| d.meta.domain == dom).count(), 72);
        }
        assert!(matches!(
            mixed_domain_pool(&all, &["cardio"], 81, 5),
            Err(Error::Size(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..60, seed in any::<u64>()) {
            let input = docs(n, "g");
            let s = split_dataset(input.clone(), DEFAULT_RATIOS, seed).unwrap();
            let ids: Vec<&str> = s.assignments().map(|(id, _)| id).collect();
            let unique: HashSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(ids.len(), n);
            prop_assert_eq!(unique.len(), n);
            prop_assert!(input.iter().all(|d| unique.contains(d.id.as_str())));
        }
    }
}
