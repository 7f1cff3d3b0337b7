use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spellgcn::checkpoint::{self, AnyModel};
use spellgcn::confusion::graph_stats;
use spellgcn::corruption::{Corrupter, MaskPolicy};
use spellgcn::eval::load_parallel_corpus;
use spellgcn::extractor::{ExtractorConfig, Vocab, MASK};
use spellgcn::{train, CombineMode, ConfusionSet, Execution, GcnConfig, Model, ModelConfig, Real, Sample, TrainConfig};

#[derive(Parser)]
#[command(
    name = "spellgcn",
    version,
    about = "Chinese spelling check with similarity-graph classifier heads"
)]
struct Cli {
    /// Seed for initialisation, shuffling and corruption.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Use 64-bit arithmetic for training.
    #[arg(long, global = true)]
    fp64: bool,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a canonical confusion-set TSV from raw SIGHAN 2013 files or an existing TSV.
    BuildGraph(BuildGraphArgs),
    /// Print node and edge counts of both similarity graphs.
    GraphStats {
        #[arg(long)]
        confusion_set: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Correct sentences read from standard input, one per line.
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on a parallel corpus.
    Eval(EvalArgs),
    /// Corrupt clean sentences from standard input into `id<TAB>source<TAB>target` rows.
    Corrupt(CorruptArgs),
    /// Export the classifier rows of every confusion-set character as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Raw `SimilarShape.txt`.
    #[arg(long, requires = "pron", conflicts_with = "confusion_set")]
    shape: Option<PathBuf>,
    /// Raw `SimilarPronunciation.txt`.
    #[arg(long, requires = "shape")]
    pron: Option<PathBuf>,
    /// Existing TSV to canonicalise.
    #[arg(long, required_unless_present = "shape")]
    confusion_set: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadMode {
    Attention,
    Mean,
    Sum,
    /// No graph head: plain tied-embedding classifier.
    None,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    confusion_set: PathBuf,
    /// Parallel corpus, `id<TAB>source<TAB>target` per line.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    beta: f64,
    /// Graph convolution layers.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, value_enum, default_value_t = HeadMode::Attention)]
    mode: HeadMode,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    encoder_layers: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Output path; with `--runs k > 1` each run writes `<path>.run<i>`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Independent runs with seeds `seed .. seed + k`.
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Metrics as a two-column TSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Predictions as `id<TAB>source<TAB>prediction`.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Five comma-separated probabilities: mask, random, unchanged, similar, confusion-random.
    #[arg(long, default_value = "0.8,0.066,0.067,0.067,0")]
    policy: String,
    #[arg(long, default_value_t = 0.15)]
    rate: f64,
    #[arg(long)]
    confusion_set: PathBuf,
    /// Character written for masked positions.
    #[arg(long, default_value_t = MASK)]
    mask_char: char,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match &cli.command {
        Command::BuildGraph(a) => build_graph(a),
        Command::GraphStats { confusion_set } => {
            let cs = load_confusion(confusion_set)?;
            print!("{}", graph_stats(&cs).to_tsv());
            Ok(())
        }
        Command::Train(a) => {
            if cli.fp64 {
                train_runs::<f64>(cli, a, exec)
            } else {
                train_runs::<f32>(cli, a, exec)
            }
        }
        Command::Correct { checkpoint } => match load_model(checkpoint)? {
            AnyModel::F32(m) => correct(&m),
            AnyModel::F64(m) => correct(&m),
        },
        Command::Eval(a) => match load_model(&a.checkpoint)? {
            AnyModel::F32(m) => evaluate(&m, a, exec),
            AnyModel::F64(m) => evaluate(&m, a, exec),
        },
        Command::Corrupt(a) => corrupt(cli.seed, a, exec),
        Command::ExportEmbeddings { checkpoint, out } => match load_model(checkpoint)? {
            AnyModel::F32(m) => export_embeddings(&m, out),
            AnyModel::F64(m) => export_embeddings(&m, out),
        },
    }
}

fn load_confusion(path: &Path) -> Result<ConfusionSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ConfusionSet::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<AnyModel> {
    checkpoint::load_any_file(path).with_context(|| format!("loading {}", path.display()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn build_graph(a: &BuildGraphArgs) -> Result<()> {
    let cs = match (&a.shape, &a.pron, &a.confusion_set) {
        (Some(s), Some(p), _) => {
            let read = |p: &PathBuf| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            ConfusionSet::from_sighan13(&read(s)?, &read(p)?)?
        }
        (_, _, Some(c)) => load_confusion(c)?,
        _ => bail!("either --shape and --pron or --confusion-set is required"),
    };
    log::info!("{} characters, {} pairs", cs.n_nodes(), cs.entries().len());
    write_output(a.out.as_deref(), &cs.to_tsv())
}

/// Reserved tokens, then confusion-set characters, then corpus characters
/// in first-appearance order.
fn build_vocab(cs: &ConfusionSet, corpora: &[&[Sample]]) -> Vocab {
    let mut seen = std::collections::HashSet::new();
    let mut chars = Vec::new();
    let corpus_chars = corpora
        .iter()
        .flat_map(|c| c.iter())
        .flat_map(|s| s.source.iter().chain(&s.target));
    for &c in cs.chars().iter().chain(corpus_chars) {
        if seen.insert(c) {
            chars.push(c);
        }
    }
    Vocab::with_reserved(chars)
}

fn train_runs<T: Real>(cli: &Cli, a: &TrainArgs, exec: Execution) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let cs = load_confusion(&a.confusion_set)?;
    let corpus = load_parallel_corpus(&a.train).with_context(|| format!("loading {}", a.train.display()))?;
    let dev = match &a.dev {
        Some(p) => Some(load_parallel_corpus(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let vocab = build_vocab(&cs, &[&corpus]);
    let head = match a.mode {
        HeadMode::None => None,
        HeadMode::Attention => Some(CombineMode::Attention),
        HeadMode::Mean => Some(CombineMode::Mean),
        HeadMode::Sum => Some(CombineMode::Sum),
    }
    .map(|mode| GcnConfig {
        depth: a.layers,
        beta: a.beta,
        mode,
    });

    let mut out = String::from("run\tseed\tepoch\tloss");
    if dev.is_some() {
        out.push_str("\tdev.sent.cor.f1\tdev.char.cor.f1\tdev.fpr");
    }
    out.push('\n');
    let mut finals = Vec::new();
    for run in 0..a.runs {
        let seed = cli.seed + run as u64;
        let extractor = ExtractorConfig {
            vocab: vocab.clone(),
            dim: a.dim,
            n_layers: a.encoder_layers,
            n_heads: a.heads,
            max_len: a.max_len,
            seed,
        };
        let mut model = Model::<T>::new(ModelConfig { extractor, head }, cs.clone())?;
        let cfg = TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            weight_decay: a.weight_decay,
            seed,
            grad_clip: a.grad_clip,
            execution: exec,
        };
        let report = train(&mut model, &corpus, dev.as_deref(), &cfg)?;
        log::info!("run {run}: {:.1}s", report.wall_clock_secs);
        for e in &report.epochs {
            let _ = write!(out, "{run}\t{seed}\t{}\t{:.6}", e.epoch, e.mean_loss);
            if let Some(ev) = &e.eval {
                let _ = write!(
                    out,
                    "\t{:.6}\t{:.6}\t{:.6}",
                    ev.sentence_level.correction.f1, ev.char_level.correction.f1, ev.fpr
                );
            }
            out.push('\n');
        }
        if let Some(ev) = report.epochs.last().and_then(|e| e.eval) {
            finals.push(ev.sentence_level.correction.f1);
        }
        let path = if a.runs == 1 {
            a.checkpoint.clone()
        } else {
            PathBuf::from(format!("{}.run{run}", a.checkpoint.display()))
        };
        checkpoint::save_file(&model, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    if finals.len() > 1 {
        let n = finals.len() as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let sd = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let _ = writeln!(
            out,
            "# dev.sent.cor.f1 mean {mean:.6} sd {sd:.6} over {} runs",
            finals.len()
        );
    }
    write_output(None, &out)
}

fn correct<T: Real>(model: &Model<T>) -> Result<()> {
    let predictor = model.predictor()?;
    let stdout = io::stdout();
    let mut w = io::BufWriter::new(stdout.lock());
    for (k, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        let chars: Vec<char> = line.chars().collect();
        let fixed = if chars.is_empty() {
            chars
        } else {
            predictor
                .correct(&chars)
                .with_context(|| format!("input line {}", k + 1))?
        };
        writeln!(w, "{}", fixed.iter().collect::<String>())?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate<T: Real>(model: &Model<T>, a: &EvalArgs, exec: Execution) -> Result<()> {
    let corpus = load_parallel_corpus(&a.corpus).with_context(|| format!("loading {}", a.corpus.display()))?;
    let (report, predictions) = model.evaluate(&corpus, exec)?;
    if let Some(p) = &a.predictions {
        let mut s = String::new();
        for (sample, pred) in corpus.iter().zip(&predictions) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                sample.id,
                sample.source.iter().collect::<String>(),
                pred.iter().collect::<String>()
            );
        }
        std::fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.out {
        std::fs::write(p, report.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_output(None, &report.to_key_values())
}

fn corrupt(seed: u64, a: &CorruptArgs, exec: Execution) -> Result<()> {
    let policy = MaskPolicy::parse(&a.policy, a.rate)?;
    let cs = load_confusion(&a.confusion_set)?;
    let sentences: Vec<Vec<char>> = io::stdin()
        .lock()
        .lines()
        .map(|l| l.map(|l| l.trim_end_matches('\r').chars().collect()))
        .collect::<io::Result<_>>()?;
    let mut seen = std::collections::HashSet::new();
    let vocab: Vec<char> = sentences
        .iter()
        .flatten()
        .chain(cs.chars())
        .copied()
        .filter(|c| seen.insert(*c))
        .collect();
    let corrupter = Corrupter::new(policy, &cs, vocab)?;
    let records = corrupter.corrupt_corpus(&sentences, seed, exec);
    let mut out = String::new();
    let mut fallbacks = 0;
    for (i, r) in records.iter().enumerate() {
        fallbacks += r.fallbacks;
        let src: String = r
            .corrupted
            .iter()
            .map(|&c| if c == MASK { a.mask_char } else { c })
            .collect();
        let tgt: String = r.original.iter().collect();
        let _ = writeln!(out, "{i}\t{src}\t{tgt}");
    }
    log::info!("{} sentences, {fallbacks} similar-candidate fallbacks", records.len());
    write_output(None, &out)
}

/// Nine significant digits.
fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

fn export_embeddings<T: Real>(model: &Model<T>, out: &Path) -> Result<()> {
    let rows = match model.gcn_trace() {
        Some(trace) => trace?.output().clone(),
        None => model.initial_node_features(),
    };
    let mut s = String::from("char");
    for d in 0..rows.cols() {
        let _ = write!(s, ",dim{d}");
    }
    s.push('\n');
    for (u, &c) in model.confusion().chars().iter().enumerate() {
        s.push(c);
        for &x in rows.row(u) {
            s.push(',');
            s.push_str(&fmt9(x.as_f64()));
        }
        s.push('\n');
    }
    std::fs::write(out, s).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
