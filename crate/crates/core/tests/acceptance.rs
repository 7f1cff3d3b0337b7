//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the lines always reach the terminal. Exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spellgcn::autodiff::softmax_in_place;
use spellgcn::checkpoint;
use spellgcn::confusion::{graph_stats, ConfusionEntry};
use spellgcn::corruption::{action_counts, Action, Corrupter, MaskPolicy};
use spellgcn::eval::{char_metrics, sentence_metrics, Prf};
use spellgcn::extractor::{ExtractorConfig, Vocab};
use spellgcn::gcn::{self, SpellGcnParams};
use spellgcn::oracle::oracle_metrics;
use spellgcn::synthetic::{build_task, SyntheticSpec};
use spellgcn::*;

const INSTANCES: u64 = 100;

type Check = fn() -> Outcome;

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

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

// ---------------------------------------------------------------- 1

fn graph_fidelity() -> Outcome {
    let started = Instant::now();
    let shape = std::env::var("SIGHAN13_SHAPE").ok();
    let pron = std::env::var("SIGHAN13_PRON").ok();
    if let (Some(shape), Some(pron)) = (shape, pron) {
        let read = |p: &str| std::fs::read_to_string(p).expect("confusion file");
        let cs = ConfusionSet::from_sighan13(&read(&shape), &read(&pron)).expect("sighan13 parse");
        let s = graph_stats(&cs);
        let elapsed = started.elapsed();
        let pron_ok = s.pronunciation.characters == 4753
            && [
                s.pronunciation.undirected_edges,
                s.pronunciation.directed_nonzeros,
                s.pronunciation.raw_entries,
            ]
            .contains(&112_687);
        let shape_ok = s.shape.characters == 4738
            && [s.shape.undirected_edges, s.shape.directed_nonzeros, s.shape.raw_entries].contains(&115_561);
        return outcome(
            pron_ok && shape_ok && elapsed < Duration::from_secs(5),
            format!(
                "SIGHAN13: pron {} chars / {} undirected / {} directed / {} raw; shape {} chars / {} undirected / {} directed / {} raw; {:.2}s",
                s.pronunciation.characters,
                s.pronunciation.undirected_edges,
                s.pronunciation.directed_nonzeros,
                s.pronunciation.raw_entries,
                s.shape.characters,
                s.shape.undirected_edges,
                s.shape.directed_nonzeros,
                s.shape.raw_entries,
                elapsed.as_secs_f64()
            ),
        );
    }
    let text = std::fs::read_to_string(fixture("mini.tsv")).expect("fixture");
    let cs = ConfusionSet::parse(&text).expect("fixture parses");
    let s = graph_stats(&cs);
    let elapsed = started.elapsed();
    // hand count: 9 nodes; shape 天-夫 天-大 大-太 人-入; pron 天-添 田-天 人-仁 人-入
    let ok = s.n_nodes == 9
        && (s.shape.characters, s.shape.undirected_edges, s.shape.directed_nonzeros) == (6, 4, 8)
        && (
            s.pronunciation.characters,
            s.pronunciation.undirected_edges,
            s.pronunciation.directed_nonzeros,
        ) == (6, 4, 8)
        && elapsed < Duration::from_secs(5);
    outcome(
        ok,
        format!(
            "SIGHAN13 files not provided (set SIGHAN13_SHAPE/SIGHAN13_PRON); fixture N={} pron {}/{} shape {}/{} (chars/edges), {:.3}s",
            s.n_nodes,
            s.pronunciation.characters,
            s.pronunciation.undirected_edges,
            s.shape.characters,
            s.shape.undirected_edges,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn toy_model() -> (Model<f64>, Sample) {
    let cs = ConfusionSet::parse("天\t1\t夫\n天\t2\t添\n夫\t3\t大\n人\t1\t入\n入\t4\t天\n").unwrap();
    assert_eq!(cs.n_nodes(), 6);
    let mut ex = ExtractorConfig::new(Vocab::with_reserved("天夫添大人入和".chars()));
    ex.dim = 8;
    ex.n_heads = 2;
    ex.n_layers = 1;
    ex.seed = 11;
    let cfg = ModelConfig {
        extractor: ex,
        head: Some(GcnConfig {
            depth: 2,
            beta: 3.0,
            mode: CombineMode::Attention,
        }),
    };
    let model = Model::new(cfg, cs).unwrap();
    let sample = Sample::new("g", "夫添和入大", "天添和人大").unwrap();
    (model, sample)
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let (model, sample) = toy_model();
    let fine = grad_check(&model, &sample, 1e-5, Execution::default()).unwrap();
    let coarse = grad_check(&model, &sample, 1e-4, Execution::default()).unwrap();
    let elapsed = started.elapsed();
    let worst = fine
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let ok = fine.max_rel_error() < 1e-4
        && fine
            .tensors
            .iter()
            .all(|t| t.coords >= 20.min(model.params().get(&t.name).unwrap().len()))
        && elapsed < Duration::from_secs(60);
    outcome(
        ok,
        format!(
            "{} tensors, max rel err {:.2e} at eps 1e-5 (worst {}), {:.2e} at eps 1e-4, {:.1}s",
            fine.tensors.len(),
            fine.max_rel_error(),
            worst.name,
            coarse.max_rel_error(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_confusion(rng: &mut ChaCha8Rng, n: usize) -> ConfusionSet {
    let ch = |i: usize| char::from_u32(0x4E00 + i as u32).unwrap();
    let mut entries: Vec<ConfusionEntry> = (0..n)
        .map(|i| ConfusionEntry {
            ch: ch(i),
            category: rng.gen_range(1..=5),
            candidate: ch((i + 1) % n),
        })
        .collect();
    for _ in 0..2 * n {
        entries.push(ConfusionEntry {
            ch: ch(rng.gen_range(0..n)),
            category: rng.gen_range(1..=5),
            candidate: ch(rng.gen_range(0..n)),
        });
    }
    ConfusionSet::from_entries(entries).unwrap()
}

fn algebraic_suite() -> Outcome {
    let mut simplex = 0.0f64;
    let mut rescale = 0.0f64;
    let mut trace_ok = true;
    let mut fallback_ok = true;
    let mut linearity = 0.0f64;
    let mut shift = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..12);
        let d = rng.gen_range(2..9);
        let cs = random_confusion(&mut rng, n);
        let (pron, shape) = build_graphs(&cs);
        let (ap, as_) = (pron.normalized().clone(), shape.normalized().clone());
        let h = random_matrix(&mut rng, n, d);
        let fp = random_matrix(&mut rng, n, d);
        let fs = random_matrix(&mut rng, n, d);
        let w_a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let beta = rng.gen_range(0.1..10.0);

        let (c, alpha) = gcn::attentive_combine(&fp, &fs, &w_a, beta).unwrap();
        for i in 0..n {
            simplex = simplex.max((alpha[(i, 0)] + alpha[(i, 1)] - 1.0).abs());
        }
        let k = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = w_a.iter().map(|x| x * k).collect();
        let (c2, alpha2) = gcn::attentive_combine(&fp, &fs, &scaled, beta * k).unwrap();
        rescale = rescale.max(c.max_abs_diff(&c2)).max(alpha.max_abs_diff(&alpha2));

        let cfg = GcnConfig {
            depth: rng.gen_range(1..4),
            beta,
            mode: [CombineMode::Attention, CombineMode::Mean, CombineMode::Sum][seed as usize % 3],
        };
        let params = SpellGcnParams::<f64>::init(&cfg, d, &mut rng);
        let trace = gcn::forward(&params, &ap, &as_, &h).unwrap();
        trace_ok &= trace.accumulation_holds() && trace.h.len() == cfg.depth + 1;

        let vocab_len = n + rng.gen_range(1..6);
        let e = random_matrix(&mut rng, vocab_len, d);
        let map: Vec<Option<usize>> = (0..vocab_len)
            .map(|i| (i < n && rng.gen_bool(0.7)).then_some(i))
            .collect();
        let w = gcn::assemble_classifier(trace.output(), &e, &map).unwrap();
        for (i, u) in map.iter().enumerate() {
            fallback_ok &= match u {
                None => w.row(i) == e.row(i),
                Some(u) => w.row(i) == trace.output().row(*u),
            };
        }

        let h2 = random_matrix(&mut rng, n, d);
        let wt = random_matrix(&mut rng, d, d);
        let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let lhs = gcn::graph_conv(&ap, &h.scale(a).add(&h2.scale(b)), &wt).unwrap();
        let rhs = gcn::graph_conv(&ap, &h, &wt)
            .unwrap()
            .scale(a)
            .add(&gcn::graph_conv(&ap, &h2, &wt).unwrap().scale(b));
        linearity = linearity.max(lhs.max_abs_diff(&rhs));

        let row: Vec<f64> = (0..d + 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let offset = rng.gen_range(-50.0..50.0);
        let mut p = row.clone();
        softmax_in_place(&mut p);
        let mut q: Vec<f64> = row.iter().map(|x| x + offset).collect();
        softmax_in_place(&mut q);
        shift = shift.max(p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let ok = simplex <= 1e-9 && rescale <= 1e-12 && trace_ok && fallback_ok && linearity <= 1e-10 && shift <= 1e-12;
    outcome(
        ok,
        format!(
            "{INSTANCES} instances: simplex {simplex:.1e}, rescaling {rescale:.1e}, trace {}, fallback rows {}, linearity {linearity:.1e}, shift {shift:.1e}",
            if trace_ok { "exact" } else { "MISMATCH" },
            if fallback_ok { "bit-equal" } else { "MISMATCH" },
        ),
    )
}

// ---------------------------------------------------------------- 4

fn random_corpus(rng: &mut ChaCha8Rng, sentences: usize) -> Vec<Triple> {
    let alphabet = ['a', 'b', 'c', 'd'];
    (0..sentences)
        .map(|_| {
            let len = rng.gen_range(1..12);
            let target: Vec<char> = (0..len).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let err_rate = [0.0, 0.1, 0.3][rng.gen_range(0..3)];
            let source: Vec<char> = target
                .iter()
                .map(|&c| {
                    if rng.gen_bool(err_rate) {
                        alphabet[rng.gen_range(0..4)]
                    } else {
                        c
                    }
                })
                .collect();
            let prediction: Vec<char> = source
                .iter()
                .zip(&target)
                .map(|(&s, &t)| match rng.gen_range(0..10) {
                    0..=5 => s,
                    6..=7 => t,
                    _ => alphabet[rng.gen_range(0..4)],
                })
                .collect();
            Triple {
                source,
                target,
                prediction,
            }
        })
        .collect()
}

fn prf_close(a: &Prf, b: &Prf) -> bool {
    (a.precision - b.precision).abs() <= 1e-12 && (a.recall - b.recall).abs() <= 1e-12 && (a.f1 - b.f1).abs() <= 1e-12
}

fn agrees(triples: &[Triple]) -> bool {
    let (cl, cc) = char_metrics(triples).unwrap();
    let (sl, fpr, sc) = sentence_metrics(triples).unwrap();
    let o = oracle_metrics(triples);
    cc == o.char_counts
        && sc == o.sentence_counts
        && prf_close(&cl.detection, &o.char_level.detection)
        && prf_close(&cl.correction, &o.char_level.correction)
        && prf_close(&sl.detection, &o.sentence_level.detection)
        && prf_close(&sl.correction, &o.sentence_level.correction)
        && (fpr - o.fpr).abs() <= 1e-12
}

fn metric_oracle() -> Outcome {
    let two = vec![
        Triple::new("我门好", "我们好", "我们好"),
        Triple::new("天汽", "天气", "天气"),
    ];
    let four = vec![
        Triple::new("今天好", "今天好", "今夫好"),
        Triple::new("明天好", "明天好", "明天好"),
        Triple::new("我门好", "我们好", "我们好"),
        Triple::new("他门在坐", "他们在做", "他们在作"),
    ];
    let mut ok = agrees(&two) && agrees(&four);
    let (sl, fpr, _) = sentence_metrics(&four).unwrap();
    let anchored = fpr == 0.5 && sl.correction.precision == 1.0 / 3.0 && sl.correction.recall == 0.5;
    ok &= anchored;
    let mut random_ok = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        if agrees(&random_corpus(&mut rng, 100)) {
            random_ok += 1;
        }
    }
    ok &= random_ok == INSTANCES;
    outcome(
        ok,
        format!(
            "hand corpora agree; 4-sentence FPR {fpr}, C-P {:.4}, C-R {}; random corpora {random_ok}/{INSTANCES} exact",
            sl.correction.precision, sl.correction.recall
        ),
    )
}

// ---------------------------------------------------------------- 5

fn learning_signal() -> Outcome {
    let started = Instant::now();
    let spec = SyntheticSpec::default();
    let mut ok = true;
    let mut all_zero = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let task = build_task(&spec, seed, Execution::default()).unwrap();
        let run = |head: Option<GcnConfig>| {
            let mut ex = ExtractorConfig::new(task.vocab.clone());
            ex.seed = seed;
            let mut m: Model<f32> = Model::new(ModelConfig { extractor: ex, head }, task.confusion.clone()).unwrap();
            let cfg = TrainConfig {
                seed,
                ..Default::default()
            };
            let rep = train(&mut m, &task.train, None, &cfg).unwrap();
            let (ev, _) = m.evaluate(&task.test, Execution::default()).unwrap();
            (rep, ev)
        };
        let (rep_b, ev_b) = run(None);
        let (rep_g, ev_g) = run(Some(GcnConfig::default()));
        let (f_b, f_g) = (ev_b.sentence_level.correction.f1, ev_g.sentence_level.correction.f1);
        all_zero &= f_g == 0.0 && f_b == 0.0;
        ok &= f_g >= f_b && rep_b.last_loss() < rep_b.first_loss() && rep_g.last_loss() < rep_g.first_loss();
        lines.push(format!(
            "seed {seed}: C-F {f_g:.4} vs {f_b:.4} (margin {:+.4}), loss {:.3}->{:.3} vs {:.3}->{:.3}",
            f_g - f_b,
            rep_g.first_loss(),
            rep_g.last_loss(),
            rep_b.first_loss(),
            rep_b.last_loss()
        ));
    }
    let elapsed = started.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    let note = if all_zero {
        " (C-F tied at 0 on every seed: neither model learns to edit at these settings, so the C-F comparison is uninformative; only the loss gap separates them)"
    } else {
        ""
    };
    outcome(
        ok,
        format!(
            "with head vs without; {}; {:.0}s{note}",
            lines.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn corruption_statistics() -> Outcome {
    let cs = ConfusionSet::parse("天\t1\t夫\n夫\t2\t天\n人\t1\t入\n入\t3\t人\n和\t4\t合\n合\t5\t和\n").unwrap();
    let policy = MaskPolicy::default();
    let vocab: Vec<char> = "天夫人入和合的了".chars().collect();
    let corrupter = Corrupter::new(policy, &cs, vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let pool: Vec<char> = cs.chars().to_vec();
    let sentences: Vec<Vec<char>> = (0..7000)
        .map(|_| (0..100).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
        .collect();
    let records = corrupter.corrupt_corpus(&sentences, 42, Execution::default());
    let counts = action_counts(&records);
    let total: usize = counts.iter().sum();
    let mut worst = 0.0f64;
    for a in Action::ALL {
        worst = worst.max((counts[a.index()] as f64 / total as f64 - policy.prob(a)).abs());
    }
    let render = |recs: &[spellgcn::corruption::CorruptionRecord]| -> String {
        recs.iter()
            .map(|r| r.corrupted.iter().collect::<String>() + "\n")
            .collect()
    };
    let again = corrupter.corrupt_corpus(&sentences, 42, Execution::Sequential);
    let deterministic = render(&records) == render(&again);
    let ok = total >= 100_000 && worst <= 0.01 && deterministic;
    outcome(
        ok,
        format!(
            "{total} selected positions, counts {counts:?}, max deviation {worst:.4}; repeat run {}",
            if deterministic { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

// ---------------------------------------------------------------- 7

fn checkpoint_roundtrip() -> Outcome {
    let spec = SyntheticSpec {
        n_train: 64,
        n_test: 40,
        ..Default::default()
    };
    let task = build_task(&spec, 3, Execution::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut bytes = 0;
    for fp64 in [false, true] {
        let mut ex = ExtractorConfig::new(task.vocab.clone());
        ex.dim = 16;
        let cfg = ModelConfig {
            extractor: ex,
            head: Some(GcnConfig::default()),
        };
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let path = dir.path().join(if fp64 { "m64.ckpt" } else { "m32.ckpt" });
        let render = |report: EvalReport, preds: Vec<Vec<char>>| {
            let mut s = report.to_tsv();
            for p in preds {
                s.extend(p);
                s.push('\n');
            }
            s
        };
        let (before, after) = if fp64 {
            let mut m = Model::<f64>::new(cfg, task.confusion.clone()).unwrap();
            train(&mut m, &task.train, None, &tc).unwrap();
            let (r, p) = m.evaluate(&task.test, Execution::default()).unwrap();
            checkpoint::save_file(&m, &path).unwrap();
            let checkpoint::AnyModel::F64(back) = checkpoint::load_any_file(&path).unwrap() else {
                return outcome(false, "f64 checkpoint reloaded at the wrong precision");
            };
            let (r2, p2) = back.evaluate(&task.test, Execution::default()).unwrap();
            (render(r, p), render(r2, p2))
        } else {
            let mut m = Model::<f32>::new(cfg, task.confusion.clone()).unwrap();
            train(&mut m, &task.train, None, &tc).unwrap();
            let (r, p) = m.evaluate(&task.test, Execution::default()).unwrap();
            checkpoint::save_file(&m, &path).unwrap();
            let checkpoint::AnyModel::F32(back) = checkpoint::load_any_file(&path).unwrap() else {
                return outcome(false, "f32 checkpoint reloaded at the wrong precision");
            };
            let (r2, p2) = back.evaluate(&task.test, Execution::default()).unwrap();
            (render(r, p), render(r2, p2))
        };
        ok &= before.as_bytes() == after.as_bytes();
        bytes += std::fs::metadata(&path).unwrap().len();
    }
    outcome(
        ok,
        format!("f32 and f64 models: evaluation output byte-identical after reload ({bytes} checkpoint bytes)"),
    )
}

fn main() {
    let criteria: [(&str, Check); 7] = [
        ("graph fidelity", graph_fidelity),
        ("gradient correctness", gradient_correctness),
        ("algebraic suite", algebraic_suite),
        ("metric oracle equivalence", metric_oracle),
        ("desk-scale learning signal", learning_signal),
        ("corruption statistics", corruption_statistics),
        ("checkpoint round-trip", checkpoint_roundtrip),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
