use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spellgcn"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const CORPUS: &str = "a\t天人和\t夫人和\nb\t入和天\t人和天\nc\t添人\t天人\nd\t和人\t和人\n";

fn write_corpus(dir: &Path) -> PathBuf {
    let p = dir.join("train.tsv");
    std::fs::write(&p, CORPUS).unwrap();
    p
}

fn train_args<'a>(confusion: &'a str, corpus: &'a str, ckpt: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--confusion-set",
        confusion,
        "--train",
        corpus,
        "--dev",
        corpus,
        "--checkpoint",
        ckpt,
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--lr",
        "1e-3",
        "--dim",
        "8",
        "--heads",
        "2",
        "--encoder-layers",
        "1",
        "--seed",
        "3",
    ]
}

#[test]
fn graph_stats_on_fixture() {
    let o = run(&["graph-stats", "--confusion-set", fixture("mini.tsv").to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("n_nodes\t9\n"));
    assert!(out.contains("pron.edges\t4\n"));
    assert!(out.contains("shape.edges\t4\n"));
    assert!(out.contains("shape.characters\t6\n"));
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["graph-stats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        run(&["graph-stats", "--confusion-set", "x", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "天\t9\t夫\n").unwrap();
    let o = run(&["graph-stats", "--confusion-set", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    let o = run(&[
        "graph-stats",
        "--confusion-set",
        dir.path().join("missing").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run_stdin(
        &[
            "corrupt",
            "--policy",
            "0.5,0.5",
            "--confusion-set",
            fixture("mini.tsv").to_str().unwrap(),
        ],
        "天人\n",
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn build_graph_from_raw_files() {
    let dir = tempfile::tempdir().unwrap();
    let shape = dir.path().join("SimilarShape.txt");
    let pron = dir.path().join("SimilarPronunciation.txt");
    std::fs::write(&shape, "天,夫大\n").unwrap();
    std::fs::write(
        &pron,
        "中文字\t同音同調\t同音異調\t近音同調\t近音異調\n天\t添\t田\t\t\n",
    )
    .unwrap();
    let out = dir.path().join("cs.tsv");
    let o = run(&[
        "build-graph",
        "--shape",
        shape.to_str().unwrap(),
        "--pron",
        pron.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(tsv, "天\t1\t夫\n天\t1\t大\n天\t2\t添\n天\t3\t田\n");
    let again = run(&["build-graph", "--confusion-set", out.to_str().unwrap()]);
    assert_eq!(stdout(&again), tsv);
}

#[test]
fn train_eval_correct_export_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let cs = fixture("mini.tsv");
    let (cs, corpus_s) = (cs.to_str().unwrap(), corpus.to_str().unwrap());
    let c1 = dir.path().join("a.ckpt");
    let c2 = dir.path().join("b.ckpt");

    let o1 = run(&train_args(cs, corpus_s, c1.to_str().unwrap()));
    assert!(o1.status.success(), "{}", String::from_utf8_lossy(&o1.stderr));
    let mut quiet = train_args(cs, corpus_s, c2.to_str().unwrap());
    quiet.push("--quiet");
    let o2 = run(&quiet);
    assert!(o2.status.success());
    assert!(o2.stderr.is_empty());
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(stdout(&o1).lines().count(), 3);

    let metrics = dir.path().join("m.tsv");
    let preds = dir.path().join("p.tsv");
    let e = run(&[
        "eval",
        "--checkpoint",
        c1.to_str().unwrap(),
        "--corpus",
        corpus_s,
        "--out",
        metrics.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert!(e.status.success());
    assert!(stdout(&e).contains("fpr="));
    assert!(std::fs::read_to_string(&metrics).unwrap().contains("FPR\t"));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 4);

    let c = run_stdin(&["correct", "--checkpoint", c1.to_str().unwrap()], "天人和\n\n外国\n");
    assert!(c.status.success());
    let lines: Vec<&str> = std::str::from_utf8(&c.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].chars().count(), 3);
    assert_eq!(lines[1], "");
    assert_eq!(lines[2], "外国");

    let emb = dir.path().join("emb.csv");
    let x = run(&[
        "export-embeddings",
        "--checkpoint",
        c1.to_str().unwrap(),
        "--out",
        emb.to_str().unwrap(),
    ]);
    assert!(x.status.success());
    let csv = std::fs::read_to_string(&emb).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "char,dim0,dim1,dim2,dim3,dim4,dim5,dim6,dim7");
    assert_eq!(rows.len(), 1 + 9);
    for r in &rows[1..] {
        let fields: Vec<&str> = r.split(',').collect();
        assert_eq!(fields.len(), 9);
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
    }
}

#[test]
fn multiple_runs_and_fp64() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let ckpt = dir.path().join("r.ckpt");
    let cs = fixture("mini.tsv");
    let mut args = train_args(cs.to_str().unwrap(), corpus.to_str().unwrap(), ckpt.to_str().unwrap());
    args.extend(["--runs", "2", "--fp64", "--mode", "none", "--quiet"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("# dev.sent.cor.f1 mean"));
    for r in 0..2 {
        let p = dir.path().join(format!("r.ckpt.run{r}"));
        let e = run(&[
            "eval",
            "--checkpoint",
            p.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
        ]);
        assert!(e.status.success());
    }
}

#[test]
fn corrupt_is_deterministic_and_aligned() {
    let input = "天人和天人和天\n大太人入\n\n";
    let cs = fixture("mini.tsv");
    let args = [
        "corrupt",
        "--policy",
        "0,0,0,1,0",
        "--rate",
        "0.5",
        "--seed",
        "4",
        "--confusion-set",
        cs.to_str().unwrap(),
    ];
    let a = run_stdin(&args, input);
    let b = run_stdin(&args, input);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert_eq!(r[1].chars().count(), r[2].chars().count());
    }
    assert_eq!(rows[0][2], "天人和天人和天");

    let masked = run_stdin(
        &[
            "corrupt",
            "--policy",
            "1,0,0,0,0",
            "--rate",
            "1",
            "--mask-char",
            "□",
            "--confusion-set",
            fixture("mini.tsv").to_str().unwrap(),
        ],
        "天人\n",
    );
    assert_eq!(stdout(&masked), "0\t□□\t天人\n");
}
