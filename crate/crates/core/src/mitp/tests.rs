use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::corpus::Item;
use crate::model::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use crate::testutil::{small_corpus, tiny_model, vocab};
use crate::textualize::{default_config, mask_slots, sequence_text, Slot};
use crate::tokenizer::FIRST_SENTINEL;

fn item(id: &str, title: &str) -> Item {
    Item {
        item_id: id.into(),
        domain: "d".into(),
        category: Some("Books".into()),
        title: Some(title.into()),
        brand: Some("Acme".into()),
        price: Some(3.5),
        description: Some("a long tale".into()),
    }
}

/// Five items with distinct one-word titles, a shared vocabulary covering both stages.
fn five() -> (Catalog, UserSequence, Vocabulary) {
    let titles = ["alpha", "bravo", "charlie", "delta", "echo"];
    let catalog: Catalog = titles
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("i{i}"), item(&format!("i{i}"), t)))
        .collect();
    let seq = UserSequence {
        user_id: "u".into(),
        items: (0..5).map(|i| format!("i{i}")).collect(),
    };
    let ds = {
        let mut d = Dataset::new("d", Arc::new(catalog.clone()));
        d.sequences.insert("u".into(), seq.clone());
        d
    };
    (catalog, seq, vocab(&ds))
}

fn with_ratio(mask_ratio: f64, last_only_fraction: f64) -> TrainConfig {
    TrainConfig {
        mask_ratio,
        last_only_fraction,
        ..TrainConfig::pretrain()
    }
}

fn texts(catalog: &Catalog, seq: &UserSequence, text: &TextualizationConfig) -> Vec<String> {
    seq.items.iter().map(|i| item_text(&catalog[i], text).unwrap()).collect()
}

#[test]
fn last_only_sample_matches_prompt_text() {
    let (catalog, seq, vocab) = five();
    let text = default_config(Stage::Pretrain);
    let s = build_mitp_sample(&seq, &catalog, &text, &vocab, &with_ratio(0.1, 1.0), &mut seed::rng(1, &[])).unwrap();
    assert!(s.last_only);
    assert_eq!(s.masked_positions, vec![4]);
    let t = texts(&catalog, &seq, &text);
    let prompt = sequence_text(&mask_slots(&t, &[4]), &text).unwrap();
    assert!(prompt.ends_with("(category: Books) delta, <extra_id_0>, predict masked item purchased by the user?"));
    assert_eq!(s.encoder_ids, vocab.encode(&prompt));
    let mut target = vec![sentinel_id(0)];
    target.extend(vocab.encode(&t[4]));
    target.push(EOS);
    assert_eq!(s.target_ids, target);
    assert_eq!(vocab.decode(&s.target_ids).unwrap(), "<extra_id_0> ( category : books ) echo");
}

#[test]
fn two_masks_concatenate_in_order() {
    let (catalog, seq, vocab) = five();
    let text = default_config(Stage::Pretrain);
    let train = with_ratio(0.4, 0.01);
    let s = (0..10_000)
        .map(|k| build_mitp_sample(&seq, &catalog, &text, &vocab, &train, &mut seed::rng(k, &[])).unwrap())
        .find(|s| s.masked_positions == [1, 3])
        .expect("some seed masks exactly positions 1 and 3");
    let t = texts(&catalog, &seq, &text);
    let mut target = vec![sentinel_id(0)];
    target.extend(vocab.encode(&t[1]));
    target.push(sentinel_id(1));
    target.extend(vocab.encode(&t[3]));
    target.push(EOS);
    assert_eq!(s.target_ids, target);
    assert_eq!(s.encoder_ids, vocab.encode(&sequence_text(&mask_slots(&t, &[1, 3]), &text).unwrap()));
}

#[test]
fn masking_statistics() {
    let ds = small_corpus(3);
    let vocab = vocab(&ds);
    let text = default_config(Stage::Pretrain);
    let train = TrainConfig::pretrain();
    let seqs: Vec<&UserSequence> = ds.sequences.values().collect();
    let n = 10_000;
    let mut last_only = 0;
    for k in 0..n {
        let seq = seqs[k % seqs.len()];
        let s = build_mitp_sample(seq, &ds.catalog, &text, &vocab, &train, &mut seed::rng(7, &[&k.to_string()])).unwrap();
        assert!(!s.masked_positions.is_empty());
        assert!(s.check_sentinels(), "{s:?}");
        last_only += s.last_only as usize;
    }
    let frac = last_only as f64 / n as f64;
    assert!((0.08..=0.12).contains(&frac), "last-only fraction {frac}");
}

#[test]
fn overflow_drops_oldest_unmasked_items_whole() {
    let (catalog, seq, vocab) = five();
    let mut text = default_config(Stage::Pretrain);
    let full = build_mitp_sample(&seq, &catalog, &text, &vocab, &with_ratio(0.1, 1.0), &mut seed::rng(1, &[])).unwrap();
    let item_len = vocab.encode(&item_text(&catalog["i0"], &text).unwrap()).len();
    let delim = vocab.encode(&text.delimiter).len();
    // Room for everything except the two oldest items.
    text.sequence_token_cap = full.encoder_ids.len() - 2 * (item_len + delim);
    let s = build_mitp_sample(&seq, &catalog, &text, &vocab, &with_ratio(0.1, 1.0), &mut seed::rng(1, &[])).unwrap();
    assert_eq!(s.encoder_ids.len(), text.sequence_token_cap);
    let t = texts(&catalog, &seq, &text);
    let kept = [t[2].as_str(), t[3].as_str()];
    let mut slots: Vec<Slot> = kept.iter().map(|x| Slot::Item(x)).collect();
    slots.push(Slot::Masked);
    assert_eq!(s.encoder_ids, vocab.encode(&sequence_text(&slots, &text).unwrap()));

    text.sequence_token_cap = vocab.encode(&text.prompt_prefix).len();
    let err = build_mitp_sample(&seq, &catalog, &text, &vocab, &with_ratio(0.1, 1.0), &mut seed::rng(1, &[])).unwrap_err();
    assert!(matches!(err, Error::SequenceOverflow { .. }), "{err}");
}

#[test]
fn item_tokens_respect_cap() {
    let (catalog, _, vocab) = five();
    let mut text = default_config(Stage::Finetune);
    text.item_token_cap = 4;
    let t = item_tokens(&catalog["i0"], &text, &vocab).unwrap();
    assert_eq!(t, vocab.encode(&item_text(&catalog["i0"], &text).unwrap())[..4]);
}

#[test]
fn short_sequences_are_rejected() {
    let (catalog, mut seq, vocab) = five();
    seq.items.truncate(1);
    let r = build_mitp_sample(&seq, &catalog, &default_config(Stage::Pretrain), &vocab, &TrainConfig::pretrain(), &mut seed::rng(0, &[]));
    assert!(r.is_err());
}

#[test]
fn pretrain_stage_has_no_property_text() {
    let ds = small_corpus(4);
    let vocab = vocab(&ds);
    let pre = default_config(Stage::Pretrain);
    let fine = default_config(Stage::Finetune);
    let train = TrainConfig::pretrain();
    let words = |ids: &[TokenId]| vocab.decode(ids).unwrap();
    let mut fine_has = false;
    for (k, seq) in ds.sequences.values().take(40).enumerate() {
        let s = build_mitp_sample(seq, &ds.catalog, &pre, &vocab, &train, &mut seed::rng(k as u64, &[])).unwrap();
        for w in ["brand", "price", "description"] {
            assert!(!words(&s.encoder_ids).contains(&format!("( {w} :")));
            assert!(!words(&s.target_ids).contains(&format!("( {w} :")));
        }
        let f = build_mitp_sample(seq, &ds.catalog, &fine, &vocab, &train, &mut seed::rng(k as u64, &[])).unwrap();
        fine_has |= words(&f.encoder_ids).contains("( brand :");
    }
    assert!(fine_has);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sample_invariants(len in 2usize..30, cap in 40usize..200, item_cap in 1usize..12, seed in 0u64..1000, ratio in 0.05f64..1.0) {
        let ds = small_corpus(5);
        let vocab = vocab(&ds);
        let mut text = default_config(Stage::Finetune);
        text.sequence_token_cap = cap;
        text.item_token_cap = item_cap;
        let ids: Vec<String> = ds.catalog.keys().take(len).cloned().collect();
        let mut full = Dataset::new("mixed", ds.catalog.clone());
        full.sequences.insert("u".into(), UserSequence { user_id: "u".into(), items: ids });
        let train = with_ratio(ratio, 0.1);
        match build_mitp_sample(&full.sequences["u"], &full.catalog, &text, &vocab, &train, &mut seed::rng(seed, &[])) {
            Ok(s) => {
                prop_assert!(s.encoder_ids.len() <= cap);
                prop_assert!(s.check_sentinels());
                // Every target span is one whole, capped item.
                let mut spans = Vec::new();
                for &t in &s.target_ids[..s.target_ids.len() - 1] {
                    if is_sentinel(t) { spans.push(0usize) } else { *spans.last_mut().unwrap() += 1 }
                }
                prop_assert!(spans.iter().all(|&n| (1..=item_cap).contains(&n)));
                let decoded = vocab.decode(&s.encoder_ids).unwrap();
                prop_assert!(decoded.starts_with("given the following purchase history of user :"));
                prop_assert!(decoded.ends_with(", predict masked item purchased by the user ?"));
                let sentinels: Vec<TokenId> = s.encoder_ids.iter().copied().filter(|&t| is_sentinel(t)).collect();
                prop_assert!(sentinels.windows(2).all(|w| w[0] + 1 == w[1]));
                prop_assert_eq!(sentinels.first().copied(), Some(FIRST_SENTINEL));
            }
            Err(e) => prop_assert!(matches!(e, Error::SequenceOverflow { .. }), "{}", e),
        }
    }
}

fn two_domains(a_len: usize, b_len: usize, users: usize) -> Vec<Dataset> {
    [("A", a_len), ("B", b_len)]
        .iter()
        .map(|&(name, len)| {
            let catalog: Catalog = (0..len)
                .map(|i| {
                    let mut it = item(&format!("{name}{i}"), &format!("t{i}"));
                    it.domain = name.into();
                    (it.item_id.clone(), it)
                })
                .collect();
            let mut d = Dataset::new(name, Arc::new(catalog));
            for u in 0..users {
                let id = format!("{name}u{u}");
                d.sequences.insert(
                    id.clone(),
                    UserSequence {
                        user_id: id,
                        items: (0..len).map(|i| format!("{name}{i}")).collect(),
                    },
                );
            }
            d
        })
        .collect()
}

#[test]
fn zero_weight_domains_are_never_drawn() {
    let ds = two_domains(2, 6, 50);
    let train = TrainConfig {
        domain_weights: Some([("A".to_string(), 1.0), ("B".to_string(), 0.0)].into()),
        ..TrainConfig::pretrain()
    };
    let plan = epoch_plan(&ds, &train, 1).unwrap();
    assert_eq!(plan.len(), 50);
    assert!(plan.iter().all(|(d, _)| *d == 0));
}

#[test]
fn default_weights_follow_interaction_counts() {
    // 2-item vs 6-item sequences: 1:3 interaction mass.
    let ds = two_domains(2, 6, 5_000);
    let plan = epoch_plan(&ds, &TrainConfig::pretrain(), 1).unwrap();
    assert_eq!(plan.len(), 10_000);
    let share_b = plan.iter().filter(|(d, _)| *d == 1).count() as f64 / plan.len() as f64;
    assert!((share_b - 0.75).abs() <= 0.03, "share {share_b}");
}

#[test]
fn stream_is_deterministic_and_padded() {
    let ds = small_corpus(6).by_domain().into_values().collect::<Vec<_>>();
    let vocab = vocab(&ds[0]);
    let text = default_config(Stage::Pretrain);
    let train = TrainConfig {
        batch_size: 16,
        ..TrainConfig::pretrain()
    };
    let collect = |epoch| -> Vec<Vec<MitpSample>> {
        training_stream(&ds, &text, &vocab, &train, epoch).unwrap().map(|b| b.unwrap()).collect()
    };
    let a = collect(1);
    assert_eq!(a, collect(1));
    assert_ne!(a, collect(2));
    assert_eq!(a.iter().map(Vec::len).sum::<usize>(), ds.iter().map(|d| d.n_users()).sum::<usize>());
    let batch = to_batch(&a[0]).unwrap();
    assert_eq!(batch.rows(), 16);
    assert_eq!(batch.enc_len(), a[0].iter().map(|s| s.encoder_ids.len()).max().unwrap());
    assert_eq!(batch.dec_len(), a[0].iter().map(|s| s.target_ids.len()).max().unwrap());
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs,
        lr: 3e-3,
        ..TrainConfig::pretrain()
    }
}

fn pretrain_run(train: &TrainConfig, start: TrainState) -> TrainState {
    let ds: Vec<Dataset> = small_corpus(8).by_domain().into_values().collect();
    let vocab = vocab(&ds[0]);
    pretrain(start, &ds, &default_config(Stage::Pretrain), &vocab, train, &mut |_| Ok(())).unwrap()
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params().tensors.iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect()
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let vocab = vocab(&small_corpus(8));
    let m = tiny_model(&vocab, 1);
    let out = pretrain_run(&quick(0), TrainState::fresh(m.clone()));
    assert_eq!(bits(&out.model), bits(&m));
    assert!(out.log.is_empty());
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let vocab = vocab(&small_corpus(8));
    let m = tiny_model(&vocab, 1);
    let a = pretrain_run(&quick(3), TrainState::fresh(m.clone()));
    let b = pretrain_run(&quick(3), TrainState::fresh(m.clone()));
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.log.len(), 3);
    assert!(a.log[2].mean_loss < a.log[0].mean_loss, "{:?}", a.log);

    // Stop after two epochs, round-trip through disk, finish the third.
    let dir = tempfile::tempdir().unwrap();
    let half = pretrain_run(&quick(2), TrainState::fresh(m));
    save_checkpoint(half.model.params(), half.model.config(), dir.path().join("m")).unwrap();
    save_optimizer(&half.optimizer, half.model.config(), dir.path().join("o")).unwrap();
    let (params, config) = load_checkpoint(dir.path().join("m")).unwrap();
    let optimizer = load_optimizer(dir.path().join("o"), &config).unwrap();
    let resumed = TrainState {
        model: Model::new(config, params).unwrap(),
        optimizer,
        log: half.log.clone(),
    };
    let c = pretrain_run(&quick(3), resumed);
    assert_eq!(bits(&a.model), bits(&c.model));
    assert_eq!(c.log[2].mean_loss, a.log[2].mean_loss);
}

#[test]
fn non_finite_parameters_abort_training() {
    let vocab = vocab(&small_corpus(8));
    let mut m = tiny_model(&vocab, 1);
    m.params_mut().tensors[0].data[0] = f32::INFINITY;
    let ds: Vec<Dataset> = small_corpus(8).by_domain().into_values().collect();
    let err = pretrain(TrainState::fresh(m), &ds, &default_config(Stage::Pretrain), &vocab, &quick(1), &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_) | Error::Diverged { .. }), "{err}");
}

#[test]
fn stage_mismatch_is_a_config_error() {
    let ds: Vec<Dataset> = small_corpus(8).by_domain().into_values().collect();
    let vocab = vocab(&ds[0]);
    let m = tiny_model(&vocab, 1);
    let err = pretrain(TrainState::fresh(m), &ds, &default_config(Stage::Finetune), &vocab, &quick(1), &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn early_stopper_keeps_the_best_epoch() {
    let mut s = EarlyStopper::new(1);
    assert_eq!(s.observe(1, 0.30), Verdict::Improved);
    assert_eq!(s.observe(2, 0.25), Verdict::Stop);
    assert_eq!(s.best(), Some((1, 0.30)));

    let mut s = EarlyStopper::new(3);
    for (e, v) in [(1, 0.1), (2, 0.2), (3, 0.2), (4, 0.15)] {
        assert_ne!(s.observe(e, v), Verdict::Stop);
    }
    assert_eq!(s.observe(5, 0.3), Verdict::Improved);
    assert_eq!(s.best(), Some((5, 0.3)));
}

#[test]
fn finetune_returns_its_best_epoch() {
    use crate::corpus::leave_one_out_split;
    use crate::eval::sample_all;
    let domains = small_corpus(9).by_domain();
    let target = domains.values().next().unwrap();
    let vocab = vocab(&small_corpus(9));
    let split = leave_one_out_split(target);
    let valid = sample_all(&split.valid, target, 20, 1).unwrap();
    let train = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 3e-3,
        valid_max_instances: Some(15),
        ..TrainConfig::finetune()
    };
    let text = default_config(Stage::Finetune);
    let mut seen = Vec::new();
    let out = finetune(tiny_model(&vocab, 2), &split.train, &valid, &text, &vocab, &train, &mut |e| {
        seen.push(e.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, out.log);
    assert!(!out.log.is_empty() && out.log.len() <= 3);
    for e in &out.log {
        assert!(e.valid_ndcg10.unwrap() <= out.best_ndcg10);
    }
    assert_eq!(out.log[out.best_epoch - 1].valid_ndcg10, Some(out.best_ndcg10));

    // The returned model reproduces the recorded score.
    let capped = cap_instances(&valid, Some(15), train.seed);
    let scorer = ModelScorer::new(&out.best, &target.catalog, &text, &vocab);
    let again = evaluate(&scorer, &capped, &EvalOptions::new("valid").with_ks(&[10])).unwrap();
    assert_eq!(again.metrics[&10].ndcg, out.best_ndcg10);

    assert!(finetune(tiny_model(&vocab, 2), &split.train, &[], &text, &vocab, &train, &mut |_| Ok(())).is_err());
}
