//! Acceptance suite. Prints one line per criterion and fails if any criterion fails.
//!
//! Criterion 7 trains the desk-scale model on the full synthetic corpus and
//! takes tens of minutes on one core; the whole suite runs as one test so
//! later criteria can reuse its checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use b2t_core::config::{RunConfig, ScorerKind, Variant};
use b2t_core::corpus::{generate_synthetic, leave_one_out_split, SyntheticConfig};
use b2t_core::eval::{
    evaluate, metric_at_k, rerank_protocol, EvalInstance, EvalOptions, MarkovScorer, MetricsReport, RandomScorer, Scorer,
};
use b2t_core::mitp::{build_mitp_sample, TrainConfig};
use b2t_core::model::{loss, Batch, Logits, Mode, Model, ModelConfig, Parameters};
use b2t_core::pipeline::{self, load_domains, load_model, load_or_build_vocab, target_domain};
use b2t_core::rank::{perplexity, score_candidate, score_candidates, ModelScorer, ScoringContext};
use b2t_core::seed;
use b2t_core::textualize::{default_config, Attribute, OrderingPolicy, Stage};
use b2t_core::tokenizer::{sentinel_id, TokenId, Vocabulary};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Runs a criterion, turning a panic into a failure.
fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn say(line: &str) {
    // Direct writes bypass libtest's capture so the lines reach the log.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_positions: 64,
        dropout_rate: 0.0,
        seed: 17,
        ..ModelConfig::default()
    }
}

/// Zero weights and unit gains: all hidden states vanish and logits are uniform.
fn uniform_model(vocab: usize) -> Model<f64> {
    let cfg = tiny_config(vocab);
    let mut p: Parameters<f64> = Parameters::zeros(&cfg);
    for t in p.tensors.iter_mut().filter(|t| t.is_gain()) {
        t.data.iter_mut().for_each(|x| *x = 1.0);
    }
    Model::new(cfg, p).unwrap()
}

fn log_softmax_at(row: &[f64], tok: TokenId) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row[tok as usize] - (mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln())
}

fn c1_gradients() -> Outcome {
    let started = Instant::now();
    let mut model: Model<f64> = Model::init(tiny_config(50)).unwrap();
    for t in &mut model.params_mut().tensors {
        if t.name.ends_with("embedding") || t.name.ends_with("position") {
            t.data.iter_mut().for_each(|x| *x *= 50.0);
        }
    }
    let batch = Batch::from_rows(
        &[vec![3, 20, 21, 22, 4, 23], vec![30, 31, 3]],
        &[vec![3, 40, 41, 4, 42, 1], vec![3, 45, 1]],
    )
    .unwrap();
    let (_, grads) = model.loss_and_grad(&batch, Mode::Eval).unwrap();
    let eps = 1e-3;
    let sizes: Vec<usize> = model.params().tensors.iter().map(|t| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seed::rng(1, &["acceptance", "gradcheck"]);
    let n = 128;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let mut k = rng.random_range(0..total);
        let mut ti = 0;
        while k >= sizes[ti] {
            k -= sizes[ti];
            ti += 1;
        }
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().tensors[ti].data[k] += delta;
            m.loss_and_grad(&batch, Mode::Eval).unwrap().0
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        let analytic = grads.tensors[ti].data[k];
        // Gradients below 1e-6 are compared absolutely; differences of an O(1) loss cannot resolve them.
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 60.0,
        format!("max relative error {worst:.2e} over {n} coordinates in {secs:.1}s"),
    )
}

fn c2_loss() -> Outcome {
    let v = 50;
    let m = uniform_model(v);
    let batch = Batch::from_rows(&[vec![10, 11, 12]], &[vec![20, 21, 22, 1]]).unwrap();
    let (l, _) = m.loss_and_grad(&batch, Mode::Eval).unwrap();
    let err_uniform = (l - (v as f64).ln()).abs();
    let (rows, len) = (2, 3);
    let targets: Vec<TokenId> = vec![4, 7, 9, 5, 1, 0];
    let mask = vec![true, true, true, true, true, false];
    let mut data = vec![0.0f64; rows * len * v];
    for (i, &t) in targets.iter().enumerate() {
        data[i * v + t as usize] = 1e4;
    }
    let sure = loss(&Logits::from_dense(rows, len, v, data).unwrap(), &targets, &mask).unwrap();
    outcome(
        err_uniform <= 1e-4 && sure.abs() <= 1e-12,
        format!("uniform loss off ln(V) by {err_uniform:.1e}, certain-target loss {sure:.1e}"),
    )
}

fn c3_perplexity() -> Outcome {
    let v = 120;
    let m = uniform_model(v);
    let ctx = ScoringContext::from_ids(vec![110, 111, sentinel_id(0), 112]).unwrap();
    let mut worst_uniform = 0.0f64;
    for cand in [&[104u32][..], &[105, 106, 107], &[119; 9]] {
        let s = score_candidate(&m, &ctx, "x", cand).unwrap();
        worst_uniform = worst_uniform.max((s.perplexity - v as f64).abs());
    }
    let analytic = (perplexity(&[0.5f64.ln(); 4]) - 2.0).abs();

    let mut peaked: Model<f64> = Model::init(ModelConfig {
        vocab_size: 130,
        ..tiny_config(130)
    })
    .unwrap();
    for t in &mut peaked.params_mut().tensors {
        if t.name.ends_with("embedding") || t.name.ends_with("position") {
            t.data.iter_mut().for_each(|x| *x *= 40.0);
        }
    }
    let mut rng = seed::rng(2, &["acceptance", "candidates"]);
    let cands: Vec<(String, Vec<TokenId>)> = (0..50)
        .map(|i| {
            let n = rng.random_range(1..8);
            (format!("c{i:02}"), (0..n).map(|_| rng.random_range(103..130)).collect())
        })
        .collect();
    let pairs: Vec<(&str, &[TokenId])> = cands.iter().map(|(i, t)| (i.as_str(), t.as_slice())).collect();
    let batched = score_candidates(&peaked, &ctx, &pairs).unwrap();
    let mut worst_rel = 0.0f64;
    for ((_, toks), s) in cands.iter().zip(&batched) {
        let mut full = vec![sentinel_id(0)];
        full.extend_from_slice(toks);
        let lps: Vec<f64> = (1..full.len())
            .map(|j| {
                let b = Batch::from_rows(&[ctx.encoder_ids().to_vec()], &[full[..=j].to_vec()]).unwrap();
                let logits = peaked.forward(&b).unwrap();
                log_softmax_at(logits.at(0, j).unwrap(), full[j])
            })
            .collect();
        let oracle = perplexity(&lps);
        worst_rel = worst_rel.max((s.perplexity - oracle).abs() / oracle);
    }
    outcome(
        worst_uniform <= 1e-3 && analytic <= 1e-6 && worst_rel <= 1e-5,
        format!(
            "uniform PP off V by {worst_uniform:.1e}, 0.5^4 case off by {analytic:.1e}, batched vs stepwise {worst_rel:.1e} relative"
        ),
    )
}

fn c4_metrics(reports: &[MetricsReport]) -> Outcome {
    let g = |r: f64| 1.0 / (r + 1.0).log2();
    let table: [(usize, usize, f64, f64); 20] = [
        (1, 1, 1.0, 1.0),
        (2, 1, 0.0, 0.0),
        (1, 5, 1.0, 1.0),
        (2, 5, 1.0, 1.0 / 3f64.log2()),
        (3, 5, 1.0, 0.5),
        (4, 5, 1.0, 1.0 / 5f64.log2()),
        (5, 5, 1.0, 1.0 / 6f64.log2()),
        (6, 5, 0.0, 0.0),
        (1, 10, 1.0, 1.0),
        (7, 10, 1.0, 1.0 / 3.0),
        (9, 10, 1.0, 1.0 / 10f64.log2()),
        (10, 10, 1.0, 1.0 / 11f64.log2()),
        (11, 10, 0.0, 0.0),
        (101, 10, 0.0, 0.0),
        (15, 20, 1.0, 0.25),
        (3, 3, 1.0, 0.5),
        (4, 3, 0.0, 0.0),
        (50, 100, 1.0, g(50.0)),
        (100, 100, 1.0, g(100.0)),
        (101, 100, 0.0, 0.0),
    ];
    let table_ok = table.iter().all(|&(r, k, hr, ndcg)| metric_at_k(r, k) == (hr, ndcg));
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| r.metrics.get(&1).is_some_and(|m| m.hr != m.ndcg))
        .map(|r| r.protocol.as_str())
        .collect();
    let with_k1 = reports.iter().filter(|r| r.metrics.contains_key(&1)).count();
    outcome(
        table_ok && bad.is_empty() && with_k1 > 0,
        format!(
            "20-entry table {}; NDCG@1 = HR@1 on {with_k1} generated reports{}",
            if table_ok { "exact" } else { "MISMATCH" },
            if bad.is_empty() { String::new() } else { format!(", violated by {bad:?}") }
        ),
    )
}

fn c5_random_floor(reports: &mut Vec<MetricsReport>) -> Outcome {
    let instances: Vec<EvalInstance> = (0..10_000)
        .map(|n| EvalInstance {
            user_id: format!("u{n}"),
            history: vec![format!("h{n}"), format!("g{n}")],
            positive: format!("p{n}"),
            negatives: (0..100).map(|j| format!("n{n}_{j}")).collect(),
        })
        .collect();
    let report = evaluate(&RandomScorer { seed: 5 }, &instances, &EvalOptions::new("random-floor")).unwrap();
    // Independent Monte-Carlo expectation: the positive's rank is uniform on 1..=101.
    let mut rng = seed::rng(6, &["acceptance", "floor"]);
    let draws = 1_000_000;
    let mut expected = 0.0;
    for _ in 0..draws {
        let r: usize = rng.random_range(1..=101);
        if r <= 10 {
            expected += 1.0 / ((r + 1) as f64).log2();
        }
    }
    expected /= draws as f64;
    let m = report.metrics[&10];
    reports.push(report.clone());
    outcome(
        (m.hr - 0.0990).abs() <= 0.01 && (m.ndcg - expected).abs() <= 0.01,
        format!("HR@10 {:.4}, NDCG@10 {:.4} vs expectation {expected:.4} over 10000 instances", m.hr, m.ndcg),
    )
}

fn c6_masking() -> Outcome {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_domains: 1,
        n_users: 500,
        n_items_per_domain: 300,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let ds = corpus.dataset().unwrap();
    let text = default_config(Stage::Pretrain);
    let vocab = Vocabulary::build(&b2t_core::textualize::vocabulary_texts(&ds.catalog, &[&text]), 1, 5000).unwrap();
    let train = TrainConfig::pretrain();
    let seqs: Vec<_> = ds.sequences.values().collect();
    let (mut last_only, mut unmasked, mut bad) = (0, 0, 0);
    let n = 10_000;
    for i in 0..n {
        let mut rng = seed::rng(7, &["acceptance", "mitp", &i.to_string()]);
        let s = build_mitp_sample(seqs[i % seqs.len()], &ds.catalog, &text, &vocab, &train, &mut rng).unwrap();
        last_only += s.last_only as usize;
        unmasked += s.masked_positions.is_empty() as usize;
        bad += !s.check_sentinels() as usize;
    }
    let frac = last_only as f64 / n as f64;
    outcome(
        (0.08..=0.12).contains(&frac) && unmasked == 0 && bad == 0,
        format!("last-only fraction {frac:.4}, {unmasked} samples without a mask, {bad} bad sentinel pairings"),
    )
}

/// The full-scale run shared by criteria 7, 10 and 11.
struct BigRun {
    cfg: RunConfig,
}

fn big_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = dir.to_path_buf();
    cfg.train.valid_max_instances = Some(300);
    cfg
}

fn c7_end_to_end(dir: &Path, reports: &mut Vec<MetricsReport>) -> (Outcome, Option<BigRun>) {
    let started = Instant::now();
    let mut cfg = big_config(dir);
    pipeline::cmd_synth(&cfg).unwrap();
    // The first domain is the tuning target; pretraining sees only the other two.
    let domains = load_domains(&cfg).unwrap();
    let names: Vec<String> = domains.keys().cloned().collect();
    cfg.data.target_domain = Some(names[0].clone());
    cfg.data.pretrain_domains = Some(names[1..].to_vec());
    pipeline::cmd_pretrain(&cfg, false).unwrap();
    let tuned = pipeline::cmd_finetune(&cfg, false).unwrap();
    let model = pipeline::cmd_eval(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let mut baseline = |kind| {
        let mut c = cfg.clone();
        c.eval.scorer = kind;
        let r = pipeline::cmd_eval(&c).unwrap();
        reports.push(r.clone());
        r.metrics[&10].ndcg
    };
    let pop = baseline(ScorerKind::Popularity);
    let random = baseline(ScorerKind::Random);
    let markov = baseline(ScorerKind::Markov);
    reports.push(model.clone());
    let ndcg = model.metrics[&10].ndcg;
    let pass = secs <= 3600.0 && ndcg >= 1.2 * pop && ndcg >= 1.2 * random;
    let o = outcome(
        pass,
        format!(
            "NDCG@10 {ndcg:.4} vs popularity {pop:.4}, random {random:.4} (markov {markov:.4}); best epoch {}; {:.1} min",
            tuned.best_epoch.unwrap_or(0),
            secs / 60.0
        ),
    );
    (o, Some(BigRun { cfg }))
}

fn c8_dpt(dir: &Path, reports: &mut Vec<MetricsReport>) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = dir.to_path_buf();
    cfg.synthetic = SyntheticConfig {
        n_domains: 1,
        n_users: 1000,
        title_collision_rate: 0.5,
        ..SyntheticConfig::default()
    };
    cfg.train.valid_max_instances = Some(300);
    use Attribute::*;
    let v = |name: &str, fine: &[Attribute]| Variant {
        name: name.to_string(),
        pretrain_attributes: None,
        finetune_attributes: fine.to_vec(),
        ordering: OrderingPolicy::Granularity,
    };
    cfg.ablate.variants = vec![
        v("C+T", &[Category, Title]),
        v("C+T+D", &[Category, Title, Brand, Price, Description]),
    ];
    pipeline::cmd_synth(&cfg).unwrap();
    let report = pipeline::cmd_ablate(&cfg).unwrap();
    let ndcg = |name: &str| report.row(name).unwrap().report.metrics[&10].ndcg;
    reports.extend(report.rows.iter().map(|r| r.report.clone()));
    let (ct, ctd) = (ndcg("C+T"), ndcg("C+T+D"));
    outcome(
        ctd >= 1.05 * ct,
        format!("NDCG@10 C+T+D {ctd:.4} vs C+T {ct:.4} (ratio {:.3})", ctd / ct),
    )
}

/// Users in every domain of this corpus stay in their current cluster half of the time.
fn c9_zero_shot(dir: &Path, reports: &mut Vec<MetricsReport>) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = dir.to_path_buf();
    cfg.synthetic.self_transition = 0.5;
    cfg.eval.max_instances = Some(2000);
    pipeline::cmd_synth(&cfg).unwrap();
    let names: Vec<String> = load_domains(&cfg).unwrap().keys().cloned().collect();
    cfg.data.target_domain = Some(names[0].clone());
    cfg.data.pretrain_domains = Some(names[1..].to_vec());
    pipeline::cmd_pretrain(&cfg, false).unwrap();
    let r = pipeline::cmd_zeroshot(&cfg, false).unwrap();
    reports.push(r.clone());
    let hr = r.metrics[&10].hr;
    outcome(
        hr >= 1.5 * 0.099,
        format!(
            "HR@10 {hr:.4} on unseen domain `{}` over {} instances (threshold {:.4})",
            names[0],
            r.n_instances,
            1.5 * 0.099
        ),
    )
}

fn tiny_pipeline_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(
        r#"{
          "synthetic": {"n_domains": 2, "n_users": 80, "n_items_per_domain": 60, "n_clusters_per_domain": 4,
                        "seq_len_min": 5, "seq_len_max": 8, "seed": 3},
          "data": {"kcore": 2},
          "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32},
          "pretrain": {"batch_size": 16, "epochs": 1},
          "finetune": {"batch_size": 16, "epochs": 2},
          "train": {"valid_max_instances": 10},
          "eval": {"n_negatives": 20, "max_instances": 10, "rerank_sizes": [5, 10], "next_k": 2},
          "ablate": {"variants": [{"name": "T", "pretrain_attributes": ["title"], "finetune_attributes": ["title"]},
                                  {"name": "C+T", "finetune_attributes": ["category", "title"]}]}
        }"#,
    )
    .unwrap();
    cfg.paths.out_dir = dir.to_path_buf();
    cfg
}

fn c10_determinism(dir: &Path, big: Option<&BigRun>, reports: &mut Vec<MetricsReport>) -> Outcome {
    let mut files: BTreeMap<&str, Vec<Vec<u8>>> = BTreeMap::new();
    for run in ["a", "b"] {
        let cfg = tiny_pipeline_config(&dir.join(run));
        pipeline::cmd_synth(&cfg).unwrap();
        pipeline::cmd_ingest(&cfg).unwrap();
        pipeline::cmd_pretrain(&cfg, false).unwrap();
        pipeline::cmd_finetune(&cfg, false).unwrap();
        reports.push(pipeline::cmd_eval(&cfg).unwrap());
        reports.push(pipeline::cmd_zeroshot(&cfg, false).unwrap());
        reports.extend(pipeline::cmd_rerank(&cfg).unwrap());
        reports.extend(pipeline::cmd_robustness(&cfg, false).unwrap().per_j);
        reports.extend(pipeline::cmd_ablate(&cfg).unwrap().rows.into_iter().map(|r| r.report));
        for name in ["ingest.json", "eval-model.json", "zeroshot.json", "rerank.json", "robustness.json", "ablate.json"] {
            files.entry(name).or_default().push(fs::read(cfg.paths.reports().join(name)).unwrap());
        }
    }
    let mut differing: Vec<&str> = files.iter().filter(|(_, v)| v[0] != v[1]).map(|(k, _)| *k).collect();
    let mut compared = files.len();
    if let Some(big) = big {
        let mut cfg = big.cfg.clone();
        cfg.eval.scorer = ScorerKind::Markov;
        let path = cfg.paths.reports().join("eval-markov.json");
        let before = fs::read(&path).unwrap();
        pipeline::cmd_eval(&cfg).unwrap();
        compared += 1;
        if fs::read(&path).unwrap() != before {
            differing.push("full-scale eval-markov.json");
        }
    }
    outcome(
        differing.is_empty(),
        format!("{compared} report files compared across repeated runs, {} differ {differing:?}", differing.len()),
    )
}

fn c11_rerank(big: &BigRun, reports: &mut Vec<MetricsReport>) -> Outcome {
    let mut cfg = big.cfg.clone();
    cfg.eval.max_instances = Some(100);
    let domains = load_domains(&cfg).unwrap();
    let target = target_domain(&cfg, &domains).unwrap();
    let vocab = load_or_build_vocab(&cfg, &domains).unwrap();
    let model = load_model(&cfg, &vocab, &cfg.paths.finetuned()).unwrap();
    let text = cfg.text_config(Stage::Finetune).unwrap();
    let scorer = ModelScorer::new(&model, &target.catalog, &text, &vocab);
    let split = leave_one_out_split(target);
    let sized = pipeline::rerank_with(&cfg, &scorer, target, &split.train, &split.test).unwrap();
    let shape_ok = sized.len() == 3
        && sized.iter().zip([100, 200, 300]).all(|(r, m)| {
            r.protocol == format!("rerank@{m}") && r.retriever_miss_rate.is_some() && r.metrics.contains_key(&10)
        });
    reports.extend(sized.iter().cloned());

    // Full catalog: reranking everything must equal ranking against every other item.
    let pool: Vec<String> = target.domain_items().into_iter().map(String::from).collect();
    let trained = split.train.item_counts();
    let few: Vec<_> = split.test.iter().filter(|s| trained.contains_key(s.positive.as_str())).take(5).cloned().collect();
    let retriever = MarkovScorer::new(&split.train).unwrap();
    let opts = EvalOptions::new("full");
    let full_rerank = &rerank_protocol(&scorer, &retriever, &few, &pool, &[pool.len()], &opts).unwrap()[0];
    let full: Vec<EvalInstance> = few
        .iter()
        .map(|s| EvalInstance {
            user_id: s.user_id.clone(),
            history: s.history.clone(),
            positive: s.positive.clone(),
            negatives: pool.iter().filter(|i| **i != s.positive).cloned().collect(),
        })
        .collect();
    let direct = evaluate(&scorer as &dyn Scorer, &full, &opts).unwrap();
    let gap = full_rerank
        .metrics
        .iter()
        .map(|(k, m)| {
            let d = direct.metrics[k];
            (m.hr - d.hr).abs().max((m.ndcg - d.ndcg).abs())
        })
        .fold(0.0f64, f64::max);
    reports.push(direct);
    let summary: Vec<String> = sized
        .iter()
        .map(|r| format!("{} NDCG@10 {:.4} miss {:.3}", r.protocol, r.metrics[&10].ndcg, r.retriever_miss_rate.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        shape_ok && gap <= 1e-9 && full_rerank.retriever_miss_rate == Some(0.0),
        format!("{}; full catalog ({} items, {} users) differs from full ranking by {gap:.1e}", summary.join(", "), pool.len(), few.len()),
    )
}

#[test]
fn acceptance() {
    let root: PathBuf = tempfile::tempdir().unwrap().keep();
    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut record = |n: usize, o: Outcome| {
        say(&format!("criterion {n:>2}: {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.insert(n, o);
    };
    record(1, guarded(c1_gradients));
    record(2, guarded(c2_loss));
    record(3, guarded(c3_perplexity));
    record(5, guarded(|| c5_random_floor(&mut reports)));
    record(6, guarded(c6_masking));
    let mut big = None;
    let o7 = guarded(|| {
        let (o, b) = c7_end_to_end(&root.join("full"), &mut reports);
        big = b;
        o
    });
    record(7, o7);
    record(8, guarded(|| c8_dpt(&root.join("dpt"), &mut reports)));
    record(9, guarded(|| c9_zero_shot(&root.join("zeroshot"), &mut reports)));
    match &big {
        Some(b) => {
            record(11, guarded(|| c11_rerank(b, &mut reports)));
        }
        None => {
            record(11, outcome(false, "full-scale run unavailable"));
        }
    }
    record(10, guarded(|| c10_determinism(&root.join("determinism"), big.as_ref(), &mut reports)));
    record(4, guarded(|| c4_metrics(&reports)));

    say("acceptance summary:");
    for (n, o) in &results {
        say(&format!("criterion {n:>2}: {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
    }
    let _ = fs::remove_dir_all(&root);
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
