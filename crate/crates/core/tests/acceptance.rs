//! End-to-end acceptance run: one PASS/FAIL line per criterion, then a
//! non-zero exit if any failed. Run with `cargo test --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use bst::eval::{auc, auc_fraction, compare_report, logloss, EvalOptions, Metrics};
use bst::experiment::{compare_models, model_tag, train_and_evaluate, vocab_config_for, Dataset, Ordering, Run};
use bst::features::synth::SynthParams;
use bst::features::VocabConfig;
use bst::model::{Batch, BstConfig, InputSchema, Model, ModelKind, ModelParams, Readout};
use bst::tensor::Tape;
use bst::trainer::{train, Checkpoint, TrainConfig, Trainer};
use common::grad;
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// The comparison set: 1000 items, 20 categories, six days with the last
/// one held out (about 50k train / 10k test).
fn ordering_params() -> SynthParams {
    SynthParams {
        num_examples: 60_000,
        num_items: 1000,
        num_categories: 20,
        days: 6,
        ..SynthParams::default()
    }
}

fn dataset(params: &SynthParams, seed: u64, config: &BstConfig) -> Dataset {
    let vocab = vocab_config_for(config, &VocabConfig::default());
    Dataset::synthetic(params, params.days - 1, seed, &vocab, config.sequence_length).expect("dataset builds")
}

// 1 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut note = |err: f64, what: String| {
        if err >= worst.0 {
            worst = (err, what);
        }
    };
    let cases = grad::op_cases();
    for case in &cases {
        for seed in 0..grad::INSTANCES {
            note(grad::op_error(case, seed), format!("{} seed {seed}", case.name));
        }
    }
    for seed in 0..grad::INSTANCES {
        note(grad::block_error(seed), format!("transformer_block seed {seed}"));
    }
    for kind in ModelKind::ALL {
        for readout in readouts() {
            for seed in 0..grad::INSTANCES {
                note(grad::model_error(kind, readout, seed), format!("{kind} {readout:?} seed {seed}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < grad::TOL && elapsed < Duration::from_secs(120),
        format!(
            "{} ops + block + 3 models x 2 readouts, {} instances each; max rel err {:.2e} ({}); {}",
            cases.len(),
            grad::INSTANCES,
            worst.0,
            worst.1,
            secs(elapsed)
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn pairwise(scores: &[f64], labels: &[u8]) -> (u128, u128) {
    let (mut num, mut den) = (0u128, 0u128);
    let pos = scores.iter().zip(labels).filter(|p| *p.1 == 1).map(|p| *p.0);
    for si in pos {
        for sj in scores.iter().zip(labels).filter(|p| *p.1 == 0).map(|p| *p.0) {
            den += 2;
            num += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    (num, den)
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for k in 0..100 {
        let n = rng.gen_range(2..=2000);
        let levels = [4, 50, 1_000_000][k % 3];
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| (rng.gen_range(0..levels) as f64 + f64::from(y) * levels as f64 * 0.3) / levels as f64)
            .collect();
        let (a, b) = auc_fraction(&scores, &labels).expect("two classes");
        let (c, d) = pairwise(&scores, &labels);
        if a * d != c * b {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 instances of 2..2000 points, {mismatches} mismatches"))
}

// 3 ------------------------------------------------------------------------

fn overfit() -> Outcome {
    let start = Instant::now();
    let config = BstConfig {
        dropout_rate: 0.0,
        ..BstConfig::default()
    };
    let params = SynthParams {
        num_examples: 400,
        ..SynthParams::default()
    };
    let data = dataset(&params, 3, &config);
    let toy = data.train[..64].to_vec();
    let model = Model::new(ModelKind::Bst, config, InputSchema::from_spec(&data.spec), 0).expect("model");
    let tc = TrainConfig {
        epochs: 500,
        ..TrainConfig::default()
    };
    let (model, log) = train(&toy, model, tc).expect("training runs");
    let p = model.predict_all(&toy, 64).expect("predicts");
    let labels: Vec<u8> = toy.iter().map(|e| e.label).collect();
    let ll = logloss(&p, &labels).expect("logloss");
    let elapsed = start.elapsed();
    outcome(
        ll < 0.01 && log.0.len() <= 500 && elapsed < Duration::from_secs(60),
        format!("BST(b=1) on 64 examples, {} steps: logloss {ll:.5}; {}", log.0.len(), secs(elapsed)),
    )
}

// 4, 5, 9 ------------------------------------------------------------------

struct Comparison {
    per_seed: Vec<(u64, Ordering)>,
    elapsed: Duration,
    seed0_runs: Vec<Run>,
    seed0_data: Dataset,
}

fn comparison() -> Comparison {
    let start = Instant::now();
    let config = BstConfig::default();
    let tc = TrainConfig::default();
    let params = ordering_params();
    let mut per_seed = Vec::new();
    let mut seed0 = None;
    for seed in 0..5 {
        let data = dataset(&params, seed, &config);
        let eval = EvalOptions {
            latency_samples: if seed == 0 { 500 } else { 0 },
            ..EvalOptions::default()
        };
        let tc = TrainConfig { seed, ..tc.clone() };
        let runs = compare_models(&data, &config, &tc, &eval, &[], "").expect("comparison runs");
        let ord = Ordering::from_runs(&runs).expect("three kinds");
        println!(
            "    seed {seed}: train {} / test {}  WDL {:.4}  WDL(+Seq) {:.4}  BST(b=1) {:.4}",
            data.train.len(),
            data.test.len(),
            ord.wdl,
            ord.wdl_seq,
            ord.bst
        );
        per_seed.push((seed, ord));
        if seed == 0 {
            seed0 = Some((runs, data));
        }
    }
    let (seed0_runs, seed0_data) = seed0.expect("seed 0 ran");
    Comparison {
        per_seed,
        elapsed: start.elapsed(),
        seed0_runs,
        seed0_data,
    }
}

fn ordering(c: &Comparison) -> Outcome {
    let holding = c.per_seed.iter().filter(|(_, o)| o.holds()).count();
    let worst_bst = c.per_seed.iter().map(|(_, o)| o.bst_margin()).fold(f64::INFINITY, f64::min);
    let worst_pool = c.per_seed.iter().map(|(_, o)| o.pooling_margin()).fold(f64::INFINITY, f64::min);
    outcome(
        holding >= 4 && c.elapsed < Duration::from_secs(15 * 60),
        format!(
            "margins hold for {holding}/5 seeds (min BST-WDL(+Seq) {worst_bst:+.4}, min WDL(+Seq)-WDL {worst_pool:+.4}); {}",
            secs(c.elapsed)
        ),
    )
}

fn ablation(c: &Comparison) -> Outcome {
    let start = Instant::now();
    let config = BstConfig::default();
    let eval = EvalOptions {
        latency_samples: 0,
        ..EvalOptions::default()
    };
    let mut rows: Vec<Metrics> = c
        .seed0_runs
        .iter()
        .filter(|r| r.kind == ModelKind::Bst)
        .map(|r| r.metrics.clone())
        .collect();
    let mut failed = Vec::new();
    for b in [2, 3] {
        let cfg = BstConfig {
            num_blocks: b,
            ..config.clone()
        };
        match train_and_evaluate(&c.seed0_data, ModelKind::Bst, &cfg, &TrainConfig::default(), &eval, "") {
            Ok(run) => rows.push(run.metrics),
            Err(e) => failed.push(format!("{}: {e}", model_tag(ModelKind::Bst, b))),
        }
    }
    let table = compare_report(&rows);
    for line in table.lines() {
        println!("    {line}");
    }
    let ok = failed.is_empty() && rows.len() == 3 && rows.iter().all(|m| m.auc.is_finite());
    let aucs: Vec<String> = rows.iter().map(|m| format!("{} {:.4}", m.model, m.auc)).collect();
    let mut detail = format!("{}; {}", aucs.join(", "), secs(start.elapsed()));
    if !failed.is_empty() {
        detail = format!("{} | {}", detail, failed.join("; "));
    }
    outcome(ok, detail)
}

fn latency(c: &Comparison) -> Outcome {
    let get = |k: ModelKind| c.seed0_runs.iter().find(|r| r.kind == k).map(|r| &r.metrics);
    let (Some(wdl), Some(seq), Some(bst)) = (get(ModelKind::Wdl), get(ModelKind::WdlSeq), get(ModelKind::Bst)) else {
        return outcome(false, "missing runs");
    };
    let all_present = [wdl, seq, bst].iter().all(|m| m.latency_b1.is_some() && m.latency_b256.is_some());
    if !all_present {
        return outcome(false, "latency fields missing");
    }
    let b1 = |m: &Metrics| m.latency_b1.expect("present").mean_ms;
    let b256 = |m: &Metrics| m.latency_b256.expect("present").mean_ms;
    outcome(
        b1(bst) >= b1(wdl) && b256(bst) >= b256(wdl),
        format!(
            "batch-1 mean ms: WDL {:.3}, WDL(+Seq) {:.3}, BST {:.3}; batch-256 ms/example: WDL {:.4}, WDL(+Seq) {:.4}, BST {:.4}",
            b1(wdl),
            b1(seq),
            b1(bst),
            b256(wdl),
            b256(seq),
            b256(bst)
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn unit_model(kind: ModelKind, config: &BstConfig, seed: u64) -> Model {
    let schema = tiny_schema();
    let params = f64_params(kind, config, &schema, seed).cast::<f32>();
    Model::from_params(kind, config.clone(), schema, params).expect("layout")
}

fn predict(m: &Model, ex: &[bst::features::EncodedExample]) -> Vec<f32> {
    m.predict(&Batch::new(ex).expect("batch")).expect("forward")
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn shuffle_history(e: &bst::features::EncodedExample, rng: &mut ChaCha8Rng, positions: bool) -> bst::features::EncodedExample {
    let slots: Vec<usize> = (0..e.seq_len() - 1).filter(|&s| e.attention_mask[s]).collect();
    let mut order = slots.clone();
    order.shuffle(rng);
    let mut out = e.clone();
    for (&d, &s) in slots.iter().zip(&order) {
        out.item_ids[d] = e.item_ids[s];
        out.category_ids[d] = e.category_ids[s];
        if positions {
            out.position_buckets[d] = e.position_buckets[s];
        }
    }
    out
}

fn invariants() -> Outcome {
    let schema = tiny_schema();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // masking soundness: padded ids exact, padded vectors to 1e-6
    let mut pad_dev = 0.0f32;
    for readout in readouts() {
        let config = BstConfig { readout, ..tiny_config() };
        for kind in ModelKind::ALL {
            for seed in 0..3 {
                let m = unit_model(kind, &config, seed);
                let ex = random_examples(16, seed, &schema, 5);
                let base = predict(&m, &ex);
                let mut edited = ex.clone();
                for e in &mut edited {
                    for s in (0..5).filter(|&s| !e.attention_mask[s]) {
                        e.item_ids[s] = rng.gen_range(0..schema.item_vocab);
                        e.category_ids[s] = rng.gen_range(0..schema.category_vocab);
                        e.position_buckets[s] = rng.gen_range(0..schema.position_vocab);
                    }
                }
                if predict(&m, &edited) != base {
                    failures.push(format!("padded ids moved {kind} {readout:?}"));
                }
                let mut m2 = m.clone();
                for name in ["emb.item", "emb.category"] {
                    let t = m2.params.get_mut(name).expect("table");
                    let w = t.last_dim();
                    t.data_mut()[..w].fill(0.7);
                }
                pad_dev = pad_dev.max(max_diff(&predict(&m2, &ex), &base));
            }
        }
    }
    if pad_dev >= 1e-6 {
        failures.push(format!("padded vectors moved predictions by {pad_dev:e}"));
    }

    // attention rows are distributions over unmasked keys
    let mut softmax_dev = 0.0f64;
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[6, 9], &mut r);
        let mask: Vec<bool> = (0..54).map(|i| i % 9 == 0 || r.gen_bool(0.6)).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let s = tape.masked_softmax(xv, &mask).expect("softmax");
        for (row, m) in tape.value(s).data().chunks(9).zip(mask.chunks(9)) {
            softmax_dev = softmax_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().zip(m).any(|(v, &open)| !open && *v != 0.0) {
                failures.push("masked softmax position non-zero".into());
            }
        }
    }
    if softmax_dev >= 1e-6 {
        failures.push(format!("softmax rows off by {softmax_dev:e}"));
    }

    // pooled baseline: history order is invisible, bitwise
    for seed in 0..5 {
        let m = unit_model(ModelKind::WdlSeq, &tiny_config(), seed);
        let ex = random_examples(16, seed, &schema, 5);
        let perm: Vec<_> = ex.iter().map(|e| shuffle_history(e, &mut rng, false)).collect();
        if predict(&m, &ex) != predict(&m, &perm) {
            failures.push(format!("WDL(+Seq) moved under permutation, seed {seed}"));
        }
    }

    // target-only BST with a constant position table
    let mut perm_dev = 0.0f32;
    let config = BstConfig {
        readout: Readout::TargetOnly,
        ..tiny_config()
    };
    for seed in 0..5 {
        let mut m = unit_model(ModelKind::Bst, &config, seed);
        let pos = m.params.get_mut("emb.position").expect("table");
        let w = pos.last_dim();
        let row = pos.data()[..w].to_vec();
        for r in pos.data_mut().chunks_mut(w) {
            r.copy_from_slice(&row);
        }
        let ex = random_examples(16, seed, &schema, 5);
        let perm: Vec<_> = ex.iter().map(|e| shuffle_history(e, &mut rng, false)).collect();
        perm_dev = perm_dev.max(max_diff(&predict(&m, &ex), &predict(&m, &perm)));
    }
    if perm_dev >= 1e-5 {
        failures.push(format!("target-only BST moved by {perm_dev:e} under permutation"));
    }

    // padding rows frozen and accumulators monotone during training
    let data = random_examples(128, 9, &schema, 5);
    let mut steps = 0;
    for kind in ModelKind::ALL {
        let config = BstConfig {
            dropout_rate: 0.2,
            ..tiny_config()
        };
        let tc = TrainConfig {
            batch_size: 16,
            model: kind,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(Model::new(kind, config, schema.clone(), 1).expect("model"), tc).expect("trainer");
        let mut prev = t.optimizer.accumulators.clone();
        for chunk in data.chunks(16) {
            t.train_batch(&Batch::new(chunk).expect("batch")).expect("step");
            steps += 1;
            for (name, acc) in &t.optimizer.accumulators {
                if acc.data().iter().zip(prev[name].data()).any(|(a, b)| a < b) {
                    failures.push(format!("{kind} accumulator {name} decreased"));
                }
            }
            prev = t.optimizer.accumulators.clone();
            for (name, w) in t.model.params.iter() {
                if ModelParams::<f32>::has_padding_row(name) && w.row(0).iter().any(|&v| v != 0.0) {
                    failures.push(format!("{kind} padding row of {name} moved"));
                }
            }
        }
    }
    failures.dedup();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "masking (max dev {pad_dev:.1e}), softmax (max dev {softmax_dev:.1e}), pooled permutation bitwise, \
                 target-only permutation (max dev {perm_dev:.1e}), padding rows and accumulators over {steps} steps"
            )
        } else {
            failures.join("; ")
        },
    )
}

// 7 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let schema = tiny_schema();
    let config = BstConfig {
        dropout_rate: 0.2,
        ..tiny_config()
    };
    let data = random_examples(200, 7, &schema, 5);
    let mut problems = Vec::new();
    for kind in ModelKind::ALL {
        let tc = TrainConfig {
            batch_size: 16,
            epochs: 2,
            model: kind,
            ..TrainConfig::default()
        };
        let fresh = || Trainer::new(Model::new(kind, config.clone(), schema.clone(), 1).expect("model"), tc.clone()).expect("trainer");
        let mut a = fresh();
        let mut b = fresh();
        let la = a.run(&data, Some(20)).expect("run");
        let lb = b.run(&data, Some(20)).expect("run");
        if la != lb || a.model.params != b.model.params {
            problems.push(format!("{kind}: repeated run differs"));
        }
        let mut first = fresh();
        let mut log = first.run(&data, Some(10)).expect("run");
        let bytes = Checkpoint::from_trainer(&first, "").to_bytes().expect("serializes");
        let mut resumed = Checkpoint::from_bytes(&bytes).expect("loads").into_trainer();
        log.0.extend(resumed.run(&data, Some(10)).expect("run").0);
        if log != la || resumed.model.params != a.model.params || resumed.optimizer != a.optimizer {
            problems.push(format!("{kind}: 10 + 10 resumed steps differ from 20"));
        }
        let again = Checkpoint::from_bytes(&bytes).expect("loads").to_bytes().expect("serializes");
        if again != bytes {
            problems.push(format!("{kind}: checkpoint round trip not byte-identical"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "repeat runs, 10+10 vs 20 resumed steps and checkpoint bytes identical for all three models".to_string()
        } else {
            problems.join("; ")
        },
    )
}

// 8 ------------------------------------------------------------------------

fn null_model() -> Outcome {
    let config = BstConfig::default();
    let params = SynthParams {
        num_examples: 12_000,
        ..SynthParams::default()
    };
    let data = dataset(&params, 8, &config);
    let mut all = data.train.clone();
    all.extend(data.test.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for e in &mut all {
        e.label = u8::from(rng.gen_bool(0.5));
    }
    let mut aucs = Vec::new();
    for kind in ModelKind::ALL {
        let model = Model::new(kind, config.clone(), InputSchema::from_spec(&data.spec), 8).expect("model");
        let p = model.predict_all(&all, 256).expect("predicts");
        let labels: Vec<u8> = all.iter().map(|e| e.label).collect();
        aucs.push((kind, auc(&p, &labels).expect("two classes")));
    }
    let ok = all.len() >= 10_000 && aucs.iter().all(|(_, a)| (0.45..=0.55).contains(a));
    let list: Vec<String> = aucs.iter().map(|(k, a)| format!("{k} {a:.4}")).collect();
    outcome(ok, format!("{} label-randomized examples: {}", all.len(), list.join(", ")))
}

fn main() {
    let started = Instant::now();
    let mut lines: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} ({name}): {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, name, o));
    };

    record(1, "gradient suite", gradient_suite());
    record(2, "AUC oracle", auc_oracle());
    record(3, "overfit", overfit());
    println!("    training WDL, WDL(+Seq) and BST(b=1) on five seeds ...");
    let comp = comparison();
    record(4, "ordering experiment", ordering(&comp));
    record(5, "block ablation", ablation(&comp));
    record(6, "invariant suite", invariants());
    record(7, "determinism and persistence", determinism());
    record(8, "null model", null_model());
    record(9, "latency report", latency(&comp));

    println!();
    for (n, name, o) in &lines {
        println!("{} {n}. {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = lines.iter().filter(|l| !l.2.pass).count();
    println!("{} of 9 criteria passed in {}", 9 - failed, secs(started.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
