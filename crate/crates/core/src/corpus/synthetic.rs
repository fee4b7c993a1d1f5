//! Synthetic multi-domain corpora with planted cluster-level sequential structure.
//!
//! Every domain partitions its items into clusters. Cluster `c` of every
//! domain draws title and description words from topic `c`'s word pools, so
//! titles mean the same thing across domains. Brands are domain specific.
//! Users walk a per-domain first-order Markov chain over clusters and pick an
//! item uniformly inside the chosen cluster.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use super::{dataset_from_interactions, write_interactions, write_items, Catalog, Dataset, Interaction, Item};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

const TITLE_POOL: usize = 24;
const DESCRIPTION_POOL: usize = 16;
const TITLE_WORDS: usize = 3;
const DESCRIPTION_WORDS: usize = 4;
const BRANDS_PER_CLUSTER: usize = 3;
const CLUSTERS_PER_CATEGORY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_domains: usize,
    /// Total users; user `u` belongs to domain `u % n_domains`.
    pub n_users: usize,
    pub n_items_per_domain: usize,
    pub n_clusters_per_domain: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub title_collision_rate: f64,
    pub transition_concentration: f64,
    /// Probability mass moved onto the diagonal of every transition row.
    #[serde(default)]
    pub self_transition: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_domains: 3,
            n_users: 3000,
            n_items_per_domain: 2000,
            n_clusters_per_domain: 8,
            seq_len_min: 8,
            seq_len_max: 16,
            title_collision_rate: 0.0,
            transition_concentration: 0.3,
            self_transition: 0.0,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.n_domains == 0
            || self.n_users == 0
            || self.n_items_per_domain == 0
            || self.n_clusters_per_domain == 0
        {
            return bad("counts must be positive");
        }
        if self.n_items_per_domain < self.n_clusters_per_domain {
            return bad("need at least one item per cluster");
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad("require 1 <= seq_len_min <= seq_len_max");
        }
        if !(0.0..=1.0).contains(&self.title_collision_rate) {
            return bad("title_collision_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.self_transition) {
            return bad("self_transition must lie in [0, 1]");
        }
        if !(self.transition_concentration > 0.0 && self.transition_concentration.is_finite()) {
            return bad("transition_concentration must be positive");
        }
        if self.title_collision_rate > 0.0 && self.n_clusters_per_domain < 2 {
            return bad("title collisions need at least two clusters");
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.n_clusters_per_domain.div_ceil(CLUSTERS_PER_CATEGORY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub name: String,
    /// Category text per category index.
    pub categories: Vec<String>,
    /// Category index of every cluster.
    pub cluster_category: Vec<usize>,
    /// Row-stochastic cluster transition matrix actually used for sampling.
    pub transitions: Vec<Vec<f64>>,
    pub item_clusters: BTreeMap<String, usize>,
    /// Items whose title was copied from an item of another cluster.
    pub collided_items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SyntheticConfig,
    pub domains: Vec<DomainManifest>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    pub manifest: Manifest,
}

impl SyntheticCorpus {
    /// Writes the item file, interaction file and JSON manifest.
    pub fn write(&self, items: &Path, interactions: &Path, manifest: &Path) -> Result<()> {
        write_items(items, &self.items)?;
        write_interactions(interactions, &self.interactions)?;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(manifest, json + "\n").map_err(|e| Error::io(manifest, e))
    }

    /// The corpus as an in-memory multi-domain dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        let catalog: Catalog = self.items.iter().map(|i| (i.item_id.clone(), i.clone())).collect();
        dataset_from_interactions(self.interactions.clone(), Arc::new(catalog))
    }
}

struct WordFactory {
    rng: Rng,
    used: HashSet<String>,
}

impl WordFactory {
    const CONSONANTS: &'static [u8] = b"bdfgklmnprstvz";
    const VOWELS: &'static [u8] = b"aeiou";

    fn new(seed: u64) -> Self {
        WordFactory {
            rng: seed::rng(seed, &["synthetic", "words"]),
            used: HashSet::new(),
        }
    }

    fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*Self::CONSONANTS.choose(&mut self.rng).unwrap() as char);
                w.push(*Self::VOWELS.choose(&mut self.rng).unwrap() as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

/// Dirichlet(alpha, ..., alpha) sampled in log space so tiny concentrations
/// do not underflow to an all-zero row.
fn dirichlet_row(rng: &mut Rng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sample_index(rng: &mut Rng, probs: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates a corpus; a pure function of `config`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let n_clusters = config.n_clusters_per_domain;
    let n_categories = config.n_categories();
    let mut words = WordFactory::new(config.seed);

    let domain_names = words.words(config.n_domains);
    let title_pools: Vec<Vec<String>> = (0..n_clusters).map(|_| words.words(TITLE_POOL)).collect();
    let description_pools: Vec<Vec<String>> =
        (0..n_clusters).map(|_| words.words(DESCRIPTION_POOL)).collect();
    let category_words = words.words(n_categories);

    let mut items = Vec::new();
    let mut domains = Vec::new();
    let mut cluster_items: Vec<Vec<Vec<String>>> = Vec::new();

    for (d, domain) in domain_names.iter().enumerate() {
        let mut rng = seed::rng(config.seed, &["synthetic", "items", &d.to_string()]);
        let brands: Vec<Vec<String>> = (0..n_clusters).map(|_| words.words(BRANDS_PER_CLUSTER)).collect();
        let categories: Vec<String> = category_words.iter().map(|c| format!("{domain} {c}")).collect();
        let cluster_category: Vec<usize> = (0..n_clusters).map(|c| c / CLUSTERS_PER_CATEGORY).collect();

        let mut seen_titles = HashSet::new();
        let mut domain_items: Vec<Item> = Vec::with_capacity(config.n_items_per_domain);
        let mut clusters_of: Vec<usize> = Vec::with_capacity(config.n_items_per_domain);
        let mut members: Vec<Vec<String>> = vec![Vec::new(); n_clusters];
        for j in 0..config.n_items_per_domain {
            let cluster = j % n_clusters;
            let mut attempts = 0;
            let title = loop {
                let t: Vec<&str> = title_pools[cluster]
                    .choose_multiple(&mut rng, TITLE_WORDS)
                    .map(|s| s.as_str())
                    .collect();
                let t = t.join(" ");
                attempts += 1;
                // pools allow ~12k distinct titles per cluster; give up on uniqueness past that
                if seen_titles.insert(t.clone()) || attempts > 64 {
                    break t;
                }
            };
            let description: Vec<&str> = description_pools[cluster]
                .choose_multiple(&mut rng, DESCRIPTION_WORDS)
                .map(|s| s.as_str())
                .collect();
            let brand = brands[cluster].choose(&mut rng).unwrap().clone();
            let log_price = rng.random_range(0.0..500f64.ln());
            let price = (log_price.exp() * 100.0).round() / 100.0;
            let item_id = format!("{domain}_i{j:05}");
            members[cluster].push(item_id.clone());
            clusters_of.push(cluster);
            domain_items.push(Item {
                item_id,
                domain: domain.clone(),
                category: Some(categories[cluster_category[cluster]].clone()),
                title: Some(title),
                brand: Some(brand),
                price: Some(price.max(1.0)),
                description: Some(description.join(" ")),
            });
        }

        // Title collisions: a chosen item copies the title of a non-collided
        // item from another cluster, keeping its own brand and description.
        let n_collide = (config.title_collision_rate * config.n_items_per_domain as f64).round() as usize;
        let mut order: Vec<usize> = (0..config.n_items_per_domain).collect();
        order.shuffle(&mut rng);
        let collided: BTreeSet<usize> = order.into_iter().take(n_collide).collect();
        let sources: Vec<usize> = (0..config.n_items_per_domain).filter(|j| !collided.contains(j)).collect();
        for &j in &collided {
            let candidates: Vec<usize> = sources
                .iter()
                .copied()
                .filter(|&s| clusters_of[s] != clusters_of[j])
                .collect();
            if let Some(&src) = candidates.choose(&mut rng) {
                let title = domain_items[src].title.clone();
                domain_items[j].title = title;
            }
        }

        let mut trng = seed::rng(config.seed, &["synthetic", "transitions", &d.to_string()]);
        let transitions: Vec<Vec<f64>> = (0..n_clusters)
            .map(|i| {
                let mut row = dirichlet_row(&mut trng, n_clusters, config.transition_concentration);
                for (k, p) in row.iter_mut().enumerate() {
                    *p *= 1.0 - config.self_transition;
                    if k == i {
                        *p += config.self_transition;
                    }
                }
                row
            })
            .collect();

        domains.push(DomainManifest {
            name: domain.clone(),
            categories,
            cluster_category,
            transitions,
            item_clusters: domain_items
                .iter()
                .zip(&clusters_of)
                .map(|(item, &c)| (item.item_id.clone(), c))
                .collect(),
            collided_items: collided.iter().map(|&j| domain_items[j].item_id.clone()).collect(),
        });
        cluster_items.push(members);
        items.extend(domain_items);
    }

    let mut interactions = Vec::new();
    for u in 0..config.n_users {
        let d = u % config.n_domains;
        let domain = &domains[d];
        let mut rng = seed::rng(config.seed, &["synthetic", "user", &u.to_string()]);
        let len = rng.random_range(config.seq_len_min..=config.seq_len_max);
        let user_id = format!("{}_u{u:05}", domain.name);
        let mut cluster = rng.random_range(0..n_clusters);
        for t in 0..len {
            if t > 0 {
                cluster = sample_index(&mut rng, &domain.transitions[cluster]);
            }
            let item_id = cluster_items[d][cluster].choose(&mut rng).unwrap().clone();
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id,
                timestamp: t as i64 + 1,
            });
        }
    }

    Ok(SyntheticCorpus {
        items,
        interactions,
        manifest: Manifest {
            config: config.clone(),
            domains,
        },
    })
}
