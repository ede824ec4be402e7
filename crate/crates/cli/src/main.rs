use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nullgec::align::{align, EditSet};
use nullgec::baselines::{score_sentence, Method, ScoreOptions};
use nullgec::corpus::{generate_corpus, read_corpus, write_corpus, GrammarConfig};
use nullgec::corruption::CorruptionConfig;
use nullgec::dataset::{inject_eval_errors, load_eval_set, save_eval_set, EditRecord, EvalRecord, Task};
use nullgec::eval::{
    benchmark, default_grid, evaluate_scores, parse_grid, score_eval_set, sweep_scores, BenchMode,
};
use nullgec::inference::{rank_sentences, DetectorConfig, InsertionMode};
use nullgec::model::{ModelConfig, Objective};
use nullgec::scoring::SentenceScores;
use nullgec::trainer::{load_checkpoint, save_checkpoint, train_with, Checkpoint, TrainConfig};
use nullgec::vocab::{build_vocab, TokenId, Vocab};

/// Detect and correct missing and superfluous words with a [NULL]-aware
/// masked language model.
#[derive(Parser)]
#[command(name = "nullgec", version)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus from the toy grammar.
    GenCorpus(GenCorpusArgs),
    /// Turn clean sentences into an annotated eval set.
    InjectErrors(InjectArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Flag error positions and print one report line per sentence.
    Detect(DetectArgs),
    /// Print corrected sentences.
    Correct(CorrectArgs),
    /// Print the edits turning each source line into its target line.
    Align(AlignArgs),
    /// Score a method on an eval set at one threshold.
    Eval(EvalArgs),
    /// Sweep thresholds on the dev split of an eval set.
    Sweep(SweepArgs),
    /// Rank sentences by error score, most suspicious first.
    Rank(RankArgs),
    /// Time detection per sentence.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    sentences: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of content words.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    successors: usize,
    #[arg(long, default_value_t = 0.2)]
    pair_fraction: f64,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 60)]
    max_len: usize,
}

#[derive(Args)]
struct InjectArgs {
    /// Clean corpus, one sentence per line.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of content words (ignored with --aux).
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    /// Model proposing plausible spurious words; uniform random without it.
    #[arg(long)]
    aux: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// eq1: plain masked LM; eq2: with [NULL] insertion targets.
    #[arg(long, default_value = "eq2")]
    objective: Objective,
    /// Plain masked-LM checkpoint used for mask-and-generate fills.
    #[arg(long)]
    aux: Option<PathBuf>,
    /// Disable mask-and-generate fills.
    #[arg(long)]
    no_mag: bool,
    /// Number of content words.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 400)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Write per-step losses (step, total, substitution, insertion) here.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ScoringArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: Task,
    #[arg(long, default_value = "main")]
    method: Method,
    #[arg(long, default_value = "per-gap")]
    mode: InsertionMode,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Skip the gaps before the first and after the last word.
    #[arg(long)]
    no_boundary_gaps: bool,
}

impl ScoringArgs {
    fn options(&self) -> Result<ScoreOptions> {
        if self.top_k < 1 {
            bail!(Usage("--top-k must be at least 1".into()));
        }
        if !self.method.supports(self.task) {
            bail!(Usage(format!("method {} does not apply to the {} task", self.method, self.task)));
        }
        Ok(ScoreOptions {
            mode: self.mode,
            top_k: self.top_k,
            include_boundary_gaps: !self.no_boundary_gaps,
        })
    }

    fn threshold(&self, given: Option<f64>) -> Result<f64> {
        self.options()?;
        let t = given.unwrap_or_else(|| default_threshold(self.method, self.task));
        check_threshold(t)?;
        Ok(t)
    }
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Sentences: an eval set (.jsonl) or plain text.
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults: 0.10 (main, insertion), 0.99 (main, deletion),
    /// 3e-3 (substituted-mask), 0.99 (no-mask), 0.998 (inserted-mask).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct CorrectArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Plain-text sentences.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Number of content words.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Eval set (.jsonl).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Evaluate only records from this index on (e.g. 500 to skip the dev split).
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Emit key=value lines instead of a table.
    #[arg(long)]
    lines: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Eval set (.jsonl); the first --dev-size records are swept.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 500)]
    dev_size: usize,
    /// `a:b:step`, `log:a:b:n`, `logit:a:b:n` or a comma list; defaults
    /// depend on task and method.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    lines: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.10)]
    insertion_threshold: f64,
    #[arg(long, default_value_t = 0.99)]
    deletion_threshold: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "deletion")]
    mode: BenchMode,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
}

/// A usage problem detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        bail!(Usage(format!("threshold {t} outside (0, 1)")));
    }
    Ok(())
}

fn default_threshold(method: Method, task: Task) -> f64 {
    let d = DetectorConfig::default();
    match (method, task) {
        (Method::Main, Task::Insertion) => d.insertion_threshold,
        (Method::Main, Task::Deletion) => d.deletion_threshold,
        (Method::SubstitutedMask, _) => 3e-3,
        (Method::NoMask, _) => 0.99,
        (Method::InsertedMask, _) => 0.998,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::InjectErrors(a) => inject(a),
        Command::Train(a) => train_cmd(a),
        Command::Detect(a) => detect(a),
        Command::Correct(a) => correct(a),
        Command::Align(a) => align_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Rank(a) => rank(a),
        Command::Bench(a) => bench(a),
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn stdout() -> BufWriter<io::StdoutLock<'static>> {
    BufWriter::new(io::stdout().lock())
}

/// Reads sentences from an eval set (`.jsonl`) or a plain-text corpus.
fn read_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let sentences = if path.extension().is_some_and(|e| e == "jsonl") {
        load_eval_set(path, vocab)?
            .into_iter()
            .map(|r| r.source)
            .collect()
    } else {
        read_corpus(path, vocab)?
    };
    Ok(sentences)
}

fn read_eval(path: &Path, vocab: &Vocab) -> Result<Vec<EvalRecord>> {
    load_eval_set(path, vocab).with_context(|| format!("reading eval set {}", path.display()))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let cfg = GrammarConfig {
        vocab_size: a.vocab_size,
        successors_per_symbol: a.successors,
        pair_head_fraction: a.pair_fraction,
        length_range: (a.min_len, a.max_len),
        seed: a.seed,
    };
    let corpus = generate_corpus(&cfg, a.sentences)?;
    write_corpus(&a.out, &build_vocab(a.vocab_size)?, &corpus)?;
    log::info!("wrote {} sentences to {}", corpus.len(), a.out.display());
    Ok(())
}

fn inject(a: InjectArgs) -> Result<()> {
    let aux = a.aux.as_deref().map(load).transpose()?;
    let vocab = match &aux {
        Some(c) => c.vocab.clone(),
        None => build_vocab(a.vocab_size)?,
    };
    let corpus = read_corpus(&a.input, &vocab)?;
    let oracle = aux.as_ref().map(|c| &c.model as &dyn nullgec::oracle::PredictionOracle);
    let records = inject_eval_errors(&corpus, a.task, a.seed, vocab.len(), oracle)?;
    save_eval_set(&a.out, &vocab, &records)?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let vocab = build_vocab(a.vocab_size)?;
    let corpus = read_corpus(&a.corpus, &vocab)?;
    let mut corruption = match a.objective {
        Objective::PlainMlm => CorruptionConfig::baseline(),
        Objective::NullMlm => CorruptionConfig::default(),
    };
    corruption.mag_enabled = !a.no_mag;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        total_steps: a.steps,
        warmup_steps: a.warmup,
        base_lr: a.lr,
        seed: a.seed,
        objective: a.objective,
        corruption,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    let mc = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.d_model,
        d_ff: a.d_ff,
        vocab_size: vocab.len(),
        max_len: a.max_len,
        seed: a.seed,
    };
    if tc.corruption.needs_aux() && a.aux.is_none() {
        bail!(Usage("eq2 training with mask-and-generate needs --aux (or pass --no-mag)".into()));
    }
    let aux = a.aux.as_deref().map(load).transpose()?;
    if let Some(c) = &aux {
        if c.vocab != vocab {
            bail!("auxiliary checkpoint vocabulary differs from the training vocabulary");
        }
    }
    let mut loss_log = a
        .loss_log
        .as_deref()
        .map(|p| fs::File::create(p).map(BufWriter::new))
        .transpose()?;
    let mut log_err = None;
    let outcome = train_with(
        &corpus,
        &vocab,
        &mc,
        &tc,
        aux.as_ref().map(|c| &c.model as &dyn nullgec::oracle::PredictionOracle),
        |step, l, _| {
            if let Some(w) = loss_log.as_mut() {
                if let Err(e) = writeln!(w, "{step}\t{}\t{}\t{}", l.total, l.substitution, l.insertion) {
                    log_err.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(mut w) = loss_log {
        w.flush()?;
    }
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    log::info!("saved checkpoint to {}", a.out.display());
    Ok(())
}

fn score_all(
    sentences: &[Vec<TokenId>],
    s: &ScoringArgs,
    ckpt: &Checkpoint,
) -> Result<Vec<SentenceScores>> {
    use rayon::prelude::*;
    let opts = s.options()?;
    Ok(sentences
        .par_iter()
        .map(|x| score_sentence(s.method, s.task, x, &ckpt.model, &opts))
        .collect::<nullgec::Result<_>>()?)
}

fn detect(a: DetectArgs) -> Result<()> {
    let threshold = a.scoring.threshold(a.threshold)?;
    let ckpt = load(&a.scoring.ckpt)?;
    let sentences = read_sentences(&a.input, &ckpt.vocab)?;
    let scores = score_all(&sentences, &a.scoring, &ckpt)?;
    let sym = |t: TokenId| ckpt.vocab.symbol(t).unwrap_or("[UNK]").to_string();
    let mut out = stdout();
    for (i, sc) in scores.iter().enumerate() {
        let flagged = sc.flagged(threshold);
        let corrections: serde_json::Map<String, serde_json::Value> = flagged
            .iter()
            .filter(|&&g| !sc.candidates_at(g).is_empty())
            .map(|&g| {
                let c: Vec<_> = sc
                    .candidates_at(g)
                    .iter()
                    .map(|c| json!({"token": sym(c.token), "probability": c.probability}))
                    .collect();
                (g.to_string(), json!(c))
            })
            .collect();
        let line = json!({
            "sentence": i,
            "task": a.scoring.task,
            "method": a.scoring.method.to_string(),
            "threshold": threshold,
            "indices": sc.indices,
            "scores": sc.scores,
            "flagged": flagged,
            "corrections": corrections,
            "forward_passes": sc.forward_passes,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn correct(a: CorrectArgs) -> Result<()> {
    let threshold = a.scoring.threshold(a.threshold)?;
    let ckpt = load(&a.scoring.ckpt)?;
    let sentences = read_sentences(&a.input, &ckpt.vocab)?;
    let scores = score_all(&sentences, &a.scoring, &ckpt)?;
    let mut out = stdout();
    for (s, sc) in sentences.iter().zip(&scores) {
        let fixed: Vec<TokenId> = match a.scoring.task {
            Task::Deletion => {
                let drop = sc.flagged(threshold);
                s.iter()
                    .enumerate()
                    .filter(|(i, _)| drop.binary_search(i).is_err())
                    .map(|(_, &t)| t)
                    .collect()
            }
            Task::Insertion => {
                let fills = sc.corrections(threshold);
                let mut v = Vec::with_capacity(s.len() + fills.len());
                let mut next = fills.iter().peekable();
                for g in 0..=s.len() {
                    while let Some(&&(gap, tok)) = next.peek() {
                        if gap != g {
                            break;
                        }
                        v.push(tok);
                        next.next();
                    }
                    if g < s.len() {
                        v.push(s[g]);
                    }
                }
                v
            }
        };
        writeln!(out, "{}", ckpt.vocab.decode(&fixed))?;
    }
    out.flush()?;
    Ok(())
}

fn align_cmd(a: AlignArgs) -> Result<()> {
    let vocab = build_vocab(a.vocab_size)?;
    let src = read_corpus(&a.source, &vocab)?;
    let tgt = read_corpus(&a.target, &vocab)?;
    if src.len() != tgt.len() {
        bail!("{} source lines but {} target lines", src.len(), tgt.len());
    }
    let mut out = stdout();
    for (s, t) in src.iter().zip(&tgt) {
        let edits: EditSet = align(s, t);
        let recs: Vec<EditRecord> = edits
            .edits()
            .iter()
            .map(|e| EditRecord::from_edit(e, &vocab))
            .collect();
        writeln!(out, "{}", serde_json::to_string(&recs)?)?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_metrics_row(label: &str, m: &nullgec::eval::Metrics) -> String {
    format!(
        "{label:<12} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
        m.true_positives, m.false_positives, m.false_negatives, m.precision, m.recall, m.f1
    )
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let threshold = a.scoring.threshold(a.threshold)?;
    let opts = a.scoring.options()?;
    let ckpt = load(&a.scoring.ckpt)?;
    let records = read_eval(&a.input, &ckpt.vocab)?;
    if a.skip >= records.len() {
        bail!(Usage(format!("--skip {} leaves no records of {}", a.skip, records.len())));
    }
    let records = &records[a.skip..];
    let scores = score_eval_set(records, a.scoring.method, a.scoring.task, &ckpt.model, &opts)?;
    let (det, corr) = evaluate_scores(&scores, records, a.scoring.task, threshold)?;
    let mut out = stdout();
    if a.lines {
        for (kind, m) in std::iter::once(("detection", det)).chain(corr.map(|c| ("correction", c))) {
            writeln!(
                out,
                "kind={kind} threshold={threshold} tp={} fp={} fn={} precision={} recall={} f1={}",
                m.true_positives, m.false_positives, m.false_negatives, m.precision, m.recall, m.f1
            )?;
        }
    } else {
        writeln!(out, "threshold {threshold}")?;
        writeln!(out, "{:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}", "", "TP", "FP", "FN", "P", "R", "F1")?;
        writeln!(out, "{}", fmt_metrics_row("detection", &det))?;
        if let Some(c) = corr {
            writeln!(out, "{}", fmt_metrics_row("correction", &c))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let grid = match &a.grid {
        Some(g) => parse_grid(g).map_err(|e| Usage(e.to_string()))?,
        None => default_grid(a.scoring.task, a.scoring.method),
    };
    let opts = a.scoring.options()?;
    let ckpt = load(&a.scoring.ckpt)?;
    let records = read_eval(&a.input, &ckpt.vocab)?;
    let dev = &records[..a.dev_size.min(records.len())];
    if dev.is_empty() {
        bail!("no dev records to sweep");
    }
    let scores = score_eval_set(dev, a.scoring.method, a.scoring.task, &ckpt.model, &opts)?;
    let golds: Vec<Vec<usize>> = dev.iter().map(|r| r.gold_indices(a.scoring.task)).collect();
    let res = sweep_scores(&scores, &golds, &grid)?;
    let mut out = stdout();
    if a.lines {
        for p in &res.points {
            let m = &p.metrics;
            writeln!(
                out,
                "threshold={} precision={} recall={} f1={}",
                p.threshold, m.precision, m.recall, m.f1
            )?;
        }
        writeln!(out, "best={}", res.best_threshold())?;
    } else {
        writeln!(out, "{:>12} {:>8} {:>8} {:>8}", "threshold", "P", "R", "F1")?;
        for (i, p) in res.points.iter().enumerate() {
            let m = &p.metrics;
            let mark = if i == res.best { " *" } else { "" };
            writeln!(
                out,
                "{:>12} {:>8.4} {:>8.4} {:>8.4}{mark}",
                format!("{}", p.threshold),
                m.precision,
                m.recall,
                m.f1
            )?;
        }
        writeln!(out, "best threshold {}", res.best_threshold())?;
    }
    out.flush()?;
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    check_threshold(a.insertion_threshold)?;
    check_threshold(a.deletion_threshold)?;
    let ckpt = load(&a.ckpt)?;
    let sentences = read_sentences(&a.input, &ckpt.vocab)?;
    let cfg = DetectorConfig {
        insertion_threshold: a.insertion_threshold,
        deletion_threshold: a.deletion_threshold,
        ..DetectorConfig::default()
    };
    let ranked = rank_sentences(&sentences, &ckpt.model, &cfg)?;
    let mut out = stdout();
    for r in ranked {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    out.flush()?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    let sentences = read_sentences(&a.input, &ckpt.vocab)?;
    let stats = benchmark(&ckpt.model, &sentences, a.mode, a.warmup)?;
    let mut out = stdout();
    writeln!(
        out,
        "mode={} sentences={} mean_ms={:.3} median_ms={:.3} forward_passes={}",
        stats.mode, stats.sentences, stats.mean_ms, stats.median_ms, stats.forward_passes
    )?;
    out.flush()?;
    Ok(())
}
