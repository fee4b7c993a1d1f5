//! Item catalogs, interaction logs and the preprocessing protocols applied to them.

mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{
    leave_one_out_split, next_k_split, zero_shot_instances, LeaveOneOut, NextK, Seedling,
};
pub use synthetic::{generate_synthetic, DomainManifest, Manifest, SyntheticConfig, SyntheticCorpus};

/// A catalog entry. Price is kept as a plain number; rendering is the textualizer's job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Item {
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidItem {
            item_id: self.item_id.clone(),
            reason: reason.to_string(),
        };
        if self.item_id.is_empty() {
            return Err(invalid("empty item_id"));
        }
        if self.domain.is_empty() {
            return Err(invalid("empty domain"));
        }
        if self.category.is_none() && self.title.is_none() {
            return Err(invalid("neither category nor title present"));
        }
        if let Some(price) = self.price {
            if !price.is_finite() || price < 0.0 {
                return Err(invalid("price must be a non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// A user's items in ascending timestamp order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

pub type Catalog = BTreeMap<String, Item>;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: String,
    pub catalog: Arc<Catalog>,
    pub sequences: BTreeMap<String, UserSequence>,
}

impl Dataset {
    pub fn new(domain: impl Into<String>, catalog: Arc<Catalog>) -> Self {
        Dataset {
            domain: domain.into(),
            catalog,
            sequences: BTreeMap::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.values().map(|s| s.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Occurrence count of every item that appears in at least one sequence.
    pub fn item_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for seq in self.sequences.values() {
            for item in &seq.items {
                *counts.entry(item.as_str()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Items of `domain` in catalog order.
    pub fn domain_items(&self) -> Vec<&str> {
        self.catalog
            .values()
            .filter(|item| item.domain == self.domain)
            .map(|item| item.item_id.as_str())
            .collect()
    }

    /// Splits a multi-domain dataset into one dataset per item domain. A user's
    /// events in different domains become independent sequences under the same id.
    pub fn by_domain(&self) -> BTreeMap<String, Dataset> {
        let mut out: BTreeMap<String, Dataset> = BTreeMap::new();
        let domains: BTreeSet<&str> = self.catalog.values().map(|i| i.domain.as_str()).collect();
        for domain in domains {
            let catalog: Catalog = self
                .catalog
                .iter()
                .filter(|(_, item)| item.domain == domain)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            out.insert(domain.to_string(), Dataset::new(domain, Arc::new(catalog)));
        }
        for seq in self.sequences.values() {
            let mut parts: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for item_id in &seq.items {
                let domain = self.catalog[item_id].domain.as_str();
                parts.entry(domain).or_default().push(item_id.clone());
            }
            for (domain, items) in parts {
                let ds = out.get_mut(domain).expect("domain present in catalog");
                ds.sequences.insert(
                    seq.user_id.clone(),
                    UserSequence {
                        user_id: seq.user_id.clone(),
                        items,
                    },
                );
            }
        }
        out
    }

    /// Verifies that every sequence item resolves in the catalog.
    pub fn validate(&self) -> Result<()> {
        for seq in self.sequences.values() {
            for item_id in &seq.items {
                if !self.catalog.contains_key(item_id) {
                    return Err(Error::UnknownItem {
                        user_id: seq.user_id.clone(),
                        item_id: item_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Reads a JSON-lines item file. Blank lines are skipped.
pub fn load_items(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let mut catalog = Catalog::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        item.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if catalog.contains_key(&item.item_id) {
            return Err(Error::DuplicateItem(item.item_id));
        }
        catalog.insert(item.item_id.clone(), item);
    }
    Ok(catalog)
}

/// Reads a JSON-lines interaction file and builds per-user sequences,
/// stably sorted by timestamp (ties keep file order).
pub fn load_interactions(path: impl AsRef<Path>, catalog: Arc<Catalog>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut events = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Interaction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        events.push(ev);
    }
    dataset_from_interactions(events, catalog)
}

pub fn dataset_from_interactions(events: Vec<Interaction>, catalog: Arc<Catalog>) -> Result<Dataset> {
    let mut per_user: BTreeMap<String, Vec<(i64, String)>> = BTreeMap::new();
    for ev in events {
        if !catalog.contains_key(&ev.item_id) {
            return Err(Error::UnknownItem {
                user_id: ev.user_id,
                item_id: ev.item_id,
            });
        }
        per_user.entry(ev.user_id).or_default().push((ev.timestamp, ev.item_id));
    }
    let domains: BTreeSet<&str> = catalog.values().map(|i| i.domain.as_str()).collect();
    let label = match domains.len() {
        1 => domains.into_iter().next().unwrap().to_string(),
        _ => "mixed".to_string(),
    };
    let mut dataset = Dataset::new(label, catalog.clone());
    for (user_id, mut events) in per_user {
        // sort_by_key is stable
        events.sort_by_key(|(t, _)| *t);
        dataset.sequences.insert(
            user_id.clone(),
            UserSequence {
                user_id,
                items: events.into_iter().map(|(_, i)| i).collect(),
            },
        );
    }
    Ok(dataset)
}

fn write_json_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_items<'a>(path: impl AsRef<Path>, items: impl IntoIterator<Item = &'a Item>) -> Result<()> {
    write_json_lines(path.as_ref(), items)
}

pub fn write_interactions<'a>(
    path: impl AsRef<Path>,
    events: impl IntoIterator<Item = &'a Interaction>,
) -> Result<()> {
    write_json_lines(path.as_ref(), events)
}

/// Flattens a dataset back to interactions, using the position as timestamp.
pub fn to_interactions(dataset: &Dataset) -> Vec<Interaction> {
    dataset
        .sequences
        .values()
        .flat_map(|seq| {
            seq.items.iter().enumerate().map(|(t, item)| Interaction {
                user_id: seq.user_id.clone(),
                item_id: item.clone(),
                timestamp: t as i64,
            })
        })
        .collect()
}

/// Iterative k-core: drops users and items with fewer than `k` interactions
/// until every survivor has at least `k`. Items without surviving
/// interactions are removed from the catalog as well.
pub fn kcore_filter(dataset: &Dataset, k: usize) -> Dataset {
    let k = k.max(1);
    let mut sequences = dataset.sequences.clone();
    loop {
        let mut changed = false;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seq in sequences.values() {
            for item in &seq.items {
                *counts.entry(item.clone()).or_insert(0) += 1;
            }
        }
        for seq in sequences.values_mut() {
            let before = seq.items.len();
            seq.items.retain(|i| counts[i] >= k);
            changed |= seq.items.len() != before;
        }
        let before = sequences.len();
        sequences.retain(|_, seq| seq.items.len() >= k);
        changed |= sequences.len() != before;
        if !changed {
            break;
        }
    }
    let survivors: BTreeSet<&String> = sequences.values().flat_map(|s| s.items.iter()).collect();
    let catalog: Catalog = dataset
        .catalog
        .iter()
        .filter(|(id, _)| survivors.contains(id))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Dataset {
        domain: dataset.domain.clone(),
        catalog: Arc::new(catalog),
        sequences,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn catalog_of(ids: &[&str]) -> Arc<Catalog> {
        Arc::new(
            ids.iter()
                .map(|id| {
                    (
                        id.to_string(),
                        Item {
                            item_id: id.to_string(),
                            domain: "d".into(),
                            category: None,
                            title: Some(id.to_string()),
                            brand: None,
                            price: None,
                            description: None,
                        },
                    )
                })
                .collect(),
        )
    }

    fn ev(user: &str, item: &str, t: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: t,
        }
    }

    #[test]
    fn load_items_maps_fields_and_leaves_missing_absent() {
        let f = write_tmp(
            r#"{"item_id":"i1","domain":"books","category":"Fiction","title":"Dune"}
"#,
        );
        let catalog = load_items(f.path()).unwrap();
        let item = &catalog["i1"];
        assert_eq!(item.category.as_deref(), Some("Fiction"));
        assert_eq!(item.title.as_deref(), Some("Dune"));
        assert!(item.brand.is_none() && item.price.is_none() && item.description.is_none());
    }

    #[test]
    fn load_items_rejects_duplicates_and_untitled_records() {
        let dup = write_tmp(
            "{\"item_id\":\"i1\",\"domain\":\"b\",\"title\":\"x\"}\n{\"item_id\":\"i1\",\"domain\":\"b\",\"title\":\"y\"}\n",
        );
        assert!(matches!(load_items(dup.path()), Err(Error::DuplicateItem(id)) if id == "i1"));

        let bare = write_tmp("{\"item_id\":\"i1\",\"domain\":\"b\",\"brand\":\"x\"}\n");
        assert!(matches!(load_items(bare.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let f = write_tmp("{\"item_id\":\"i1\",\"domain\":\"b\",\"title\":\"x\"}\n{oops\n");
        match load_items(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let f = write_tmp("{\"item_id\":\"i1\",\"domain\":\"b\",\"title\":\"x\",\"color\":\"red\"}\n");
        assert!(matches!(load_items(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sequences_sorted_by_timestamp_with_stable_ties() {
        let cat = catalog_of(&["a", "b", "c"]);
        let ds = dataset_from_interactions(
            vec![ev("u1", "a", 3), ev("u1", "b", 1), ev("u1", "c", 2)],
            cat.clone(),
        )
        .unwrap();
        assert_eq!(ds.sequences["u1"].items, vec!["b", "c", "a"]);

        let ds = dataset_from_interactions(vec![ev("u1", "b", 5), ev("u1", "a", 5)], cat).unwrap();
        assert_eq!(ds.sequences["u1"].items, vec!["b", "a"]);
    }

    #[test]
    fn interactions_with_unknown_items_fail_and_empty_files_do_not() {
        let cat = catalog_of(&["a"]);
        let err = dataset_from_interactions(vec![ev("u1", "zzz", 1)], cat.clone()).unwrap_err();
        assert!(matches!(err, Error::UnknownItem { .. }));

        let empty = write_tmp("");
        let ds = load_interactions(empty.path(), cat).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn kcore_removes_short_users() {
        let cat = catalog_of(&["a", "b", "c", "d", "e"]);
        let mut events = Vec::new();
        for u in 0..5 {
            for (t, item) in ["a", "b", "c", "d", "e"].iter().enumerate() {
                events.push(ev(&format!("u{u}"), item, t as i64));
            }
        }
        // u5 has only four interactions
        for (t, item) in ["a", "b", "c", "d"].iter().enumerate() {
            events.push(ev("u5", item, t as i64));
        }
        let ds = dataset_from_interactions(events, cat).unwrap();
        let out = kcore_filter(&ds, 5);
        assert!(!out.sequences.contains_key("u5"));
        assert_eq!(out.n_users(), 5);
    }

    #[test]
    fn kcore_is_noop_when_everything_qualifies() {
        let cat = catalog_of(&["a", "b"]);
        let events = (0..3)
            .flat_map(|u| [ev(&format!("u{u}"), "a", 0), ev(&format!("u{u}"), "b", 1)])
            .collect();
        let ds = dataset_from_interactions(events, cat).unwrap();
        let out = kcore_filter(&ds, 2);
        assert_eq!(out.sequences, ds.sequences);
        assert_eq!(out.catalog, ds.catalog);
    }

    #[test]
    fn by_domain_partitions_users_events() {
        let mut catalog = Catalog::new();
        for (id, domain) in [("a", "x"), ("b", "y"), ("c", "x")] {
            catalog.insert(
                id.into(),
                Item {
                    item_id: id.into(),
                    domain: domain.into(),
                    category: None,
                    title: Some(id.into()),
                    brand: None,
                    price: None,
                    description: None,
                },
            );
        }
        let ds = dataset_from_interactions(
            vec![ev("u", "a", 0), ev("u", "b", 1), ev("u", "c", 2)],
            Arc::new(catalog),
        )
        .unwrap();
        assert_eq!(ds.domain, "mixed");
        let parts = ds.by_domain();
        assert_eq!(parts["x"].sequences["u"].items, vec!["a", "c"]);
        assert_eq!(parts["y"].sequences["u"].items, vec!["b"]);
        assert_eq!(parts["x"].catalog.len(), 2);
    }
}
