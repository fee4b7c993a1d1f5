use serde::{Deserialize, Serialize};

use super::{Dataset, UserSequence};

/// An evaluation target before negatives are attached: the history, the
/// held-out item and its 0-based position in the user's full sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seedling {
    pub user_id: String,
    pub history: Vec<String>,
    pub positive: String,
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct LeaveOneOut {
    pub train: Dataset,
    pub valid: Vec<Seedling>,
    pub test: Vec<Seedling>,
    /// Users too short for valid/test, kept in train only.
    pub train_only_users: usize,
}

#[derive(Debug, Clone)]
pub struct NextK {
    pub train: Dataset,
    /// `tests[j]` holds the (j+1)-th withheld item of every eligible user.
    pub tests: Vec<Vec<Seedling>>,
    pub train_only_users: usize,
}

fn with_prefix(dataset: &Dataset, prefix_len: impl Fn(&UserSequence) -> usize) -> Dataset {
    let mut train = Dataset::new(dataset.domain.clone(), dataset.catalog.clone());
    for (user, seq) in &dataset.sequences {
        let n = prefix_len(seq);
        if n > 0 {
            train.sequences.insert(
                user.clone(),
                UserSequence {
                    user_id: user.clone(),
                    items: seq.items[..n].to_vec(),
                },
            );
        }
    }
    train
}

fn seedling(seq: &UserSequence, position: usize) -> Seedling {
    Seedling {
        user_id: seq.user_id.clone(),
        history: seq.items[..position].to_vec(),
        positive: seq.items[position].clone(),
        position,
    }
}

/// Last item is the test target, second-to-last the validation target, the
/// rest is training data. Sequences shorter than 3 stay whole in train.
pub fn leave_one_out_split(dataset: &Dataset) -> LeaveOneOut {
    let train = with_prefix(dataset, |s| {
        if s.items.len() >= 3 {
            s.items.len() - 2
        } else {
            s.items.len()
        }
    });
    let mut valid = Vec::new();
    let mut test = Vec::new();
    let mut short = 0;
    for seq in dataset.sequences.values() {
        let n = seq.items.len();
        if n < 3 {
            short += 1;
            continue;
        }
        valid.push(seedling(seq, n - 2));
        test.push(seedling(seq, n - 1));
    }
    if short > 0 {
        log::info!(
            "leave-one-out on `{}`: {short} users shorter than 3 kept for training only",
            dataset.domain
        );
    }
    LeaveOneOut {
        train,
        valid,
        test,
        train_only_users: short,
    }
}

/// Withholds the last `k` items. The j-th test instance is teacher-forced:
/// its history is the train prefix plus the ground-truth withheld items
/// before it.
pub fn next_k_split(dataset: &Dataset, k: usize) -> NextK {
    let k = k.max(1);
    let train = with_prefix(dataset, |s| {
        if s.items.len() > k {
            s.items.len() - k
        } else {
            s.items.len()
        }
    });
    let mut tests = vec![Vec::new(); k];
    let mut short = 0;
    for seq in dataset.sequences.values() {
        let n = seq.items.len();
        if n <= k {
            short += 1;
            continue;
        }
        for (j, bucket) in tests.iter_mut().enumerate() {
            bucket.push(seedling(seq, n - k + j));
        }
    }
    NextK {
        train,
        tests,
        train_only_users: short,
    }
}

/// Every position after the first becomes a target with the full preceding history.
pub fn zero_shot_instances(dataset: &Dataset) -> Vec<Seedling> {
    dataset
        .sequences
        .values()
        .flat_map(|seq| (1..seq.items.len()).map(move |p| seedling(seq, p)))
        .collect()
}
