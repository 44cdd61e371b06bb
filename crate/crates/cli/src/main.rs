mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use clara_core::datagen::{synthesize_corpus, Corpus, CorpusSpec};
use clara_core::metrics::EvalReport;
use clara_core::model::{compress, logit_lens};
use clara_core::oracle::suite::{self, SuiteConfig};
use clara_core::persist::{self, Checkpoint};
use clara_core::trainer::{encode_query, write_metrics_header, write_metrics_row, CompressedIndex, Experiment, RunConfig};

use config::RunArgs;

/// Errors with a fixed exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

#[derive(Parser, Debug)]
#[command(name = "clara", version, about = "Train a retriever and generator over compressed documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus of fact documents with QA pairs and paraphrases
    Datagen(DatagenArgs),
    /// Pretrain the compressor and generator on QA and paraphrase tasks
    Pretrain(PretrainArgs),
    /// Compress every corpus document with a checkpoint's compressor
    BuildIndex(BuildIndexArgs),
    /// Train the query reasoner and generator from the answer loss alone
    TrainJoint(TrainJointArgs),
    /// Report retrieval recall and answer accuracy
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Show the vocabulary tokens each memory vector projects onto
    LogitLens(LogitLensArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long, default_value_t = 100)]
    docs: usize,
    #[arg(long, default_value_t = 2)]
    facts: usize,
    /// Probability of a chained fact that yields a two-hop question
    #[arg(long, default_value_t = 0.5)]
    chain_prob: f64,
    /// Probability that a fact's question is dropped before verification
    #[arg(long, default_value_t = 0.0)]
    miss_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    unaskable_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Per-step CSV: step, loss, ce, mse
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainJointArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prebuilt index; compressed from the checkpoint when omitted
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Per-step CSV: step, loss, recall@1, recall@3, recall@5
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Train only the generator
    #[arg(long)]
    freeze_query_reasoner: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Also write the report as a one-row CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1000)]
    topk_cases: usize,
    #[arg(long, default_value_t = 20)]
    op_cases: usize,
}

#[derive(Args, Debug)]
struct LogitLensArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Whitespace-separated query tokens, encoded with the query reasoner
    #[arg(long, conflicts_with = "doc", required_unless_present = "doc")]
    query: Option<String>,
    /// Document id, encoded with the compressor
    #[arg(long)]
    doc: Option<String>,
    #[arg(long, default_value_t = 50)]
    top: usize,
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    persist::load_corpus(path).with_context(|| format!("cannot load corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    persist::load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Experiment over `corpus` whose model shape must match the checkpoint.
fn restore(corpus: Corpus, config: RunConfig, ck: &Checkpoint) -> Result<Experiment> {
    let exp = Experiment::new(corpus, config)?;
    let expected = exp.model_config();
    if ck.params.config != expected {
        anyhow::bail!(
            "checkpoint shape mismatch: checkpoint has {:?}, configuration expects {:?}",
            ck.params.config,
            expected
        );
    }
    Ok(exp)
}

fn index_for(exp: &Experiment, ck: &Checkpoint, path: Option<&Path>) -> Result<CompressedIndex> {
    let index = match path {
        Some(p) => persist::load_index(p).with_context(|| format!("cannot load index {}", p.display()))?,
        None => exp.build_index(&ck.params)?,
    };
    let (l, h) = (exp.config.memory_tokens(), exp.config.hidden);
    if (index.l(), index.h()) != (l, h) {
        anyhow::bail!(
            "index shape mismatch: index stores {}×{} memories, checkpoint produces {l}×{h}",
            index.l(),
            index.h()
        );
    }
    Ok(index)
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_docs: a.docs,
        facts_per_doc: a.facts,
        chain_prob: a.chain_prob,
        miss_rate: a.miss_rate,
        unaskable_rate: a.unaskable_rate,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus = synthesize_corpus(&spec)?;
    persist::save_corpus(&corpus, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    let s = &corpus.stats;
    let pairs = (s.simple_qas + s.complex_qas) as f64 / s.included.max(1) as f64;
    println!(
        "generated={} included={} excluded={} regenerated={} simple={} complex={} paraphrase={} avg_pairs={pairs:.2}",
        s.generated, s.included, s.excluded, s.regenerated, s.simple_qas, s.complex_qas, s.paraphrases
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let config = a.run.resolve(RunConfig::default())?;
    let exp = Experiment::new(load_corpus(&a.corpus)?, config)?;
    let mut params = exp.init_params()?;
    let mut metrics = a.metrics.as_deref().map(create).transpose()?;
    if let Some(m) = metrics.as_mut() {
        writeln!(m, "step,loss,ce,mse")?;
    }
    let mut io = Ok(());
    let mut last = None;
    exp.pretrain(&mut params, |r| {
        if let Some(m) = metrics.as_mut() {
            if io.is_ok() {
                io = writeln!(m, "{},{:.6},{:.6},{:.6}", r.step, r.loss, r.ce, r.mse);
            }
        }
        last = Some(r.clone());
    })?;
    io?;
    if let Some(mut m) = metrics {
        m.flush()?;
    }
    if let Some(r) = last {
        println!("step={} loss={:.4} ce={:.4} mse={:.4}", r.step, r.loss, r.ce, r.mse);
    }
    let seed = exp.config.seed;
    persist::save_checkpoint(
        &Checkpoint {
            config: exp.config,
            seed,
            params,
        },
        &a.out,
    )?;
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let exp = restore(load_corpus(&a.corpus)?, ck.config.clone(), &ck)?;
    let index = exp.build_index(&ck.params)?;
    persist::save_index(&index, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("documents={} l={} h={}", index.len(), index.l(), index.h());
    Ok(())
}

fn train_joint(a: TrainJointArgs) -> Result<()> {
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let config = a.run.resolve(ck.config.clone())?;
    let exp = restore(load_corpus(&a.corpus)?, config, &ck)?;
    let index = index_for(&exp, &ck, a.index.as_deref())?;
    let mut metrics = a.metrics.as_deref().map(create).transpose()?;
    if let Some(m) = metrics.as_mut() {
        write_metrics_header(m)?;
    }
    let mut io = Ok(());
    exp.train_joint(&mut ck.params, &index, !a.freeze_query_reasoner, |step, s| {
        if let Some(m) = metrics.as_mut() {
            if io.is_ok() {
                io = write_metrics_row(m, step, s);
            }
        }
    })?;
    io?;
    if let Some(mut m) = metrics {
        m.flush()?;
    }
    ck.config = exp.config.clone();
    ck.seed = exp.config.seed;
    persist::save_checkpoint(&ck, &a.out)?;
    println!("steps={}", exp.config.steps);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let exp = restore(load_corpus(&a.corpus)?, ck.config.clone(), &ck)?;
    let index = index_for(&exp, &ck, a.index.as_deref())?;
    let report = exp.evaluate(&ck.params, &index)?;
    println!("{report}");
    if let Some(path) = a.csv {
        let mut out = create(&path)?;
        writeln!(out, "{}", EvalReport::csv_header())?;
        writeln!(out, "{}", report.to_csv_row())?;
        out.flush()?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let rows = suite::run(&SuiteConfig {
        seed: a.seed,
        coupling_instances: a.instances,
        topk_cases: a.topk_cases,
        op_cases: a.op_cases,
    });
    print!("{}", suite::render_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Check(format!("{} checks out of tolerance: {}", failed.len(), failed.join(", "))).into());
    }
    Ok(())
}

fn lens(a: LogitLensArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let exp = restore(load_corpus(&a.corpus)?, ck.config.clone(), &ck)?;
    let (p, l) = (&ck.params, exp.config.memory_tokens());
    let memory = match (&a.query, &a.doc) {
        (Some(q), _) => {
            let tokens: Vec<String> = q.split_whitespace().map(String::from).collect();
            encode_query(&exp.vocab.encode(&tokens)?, &p.query_reasoner, &p.config, l)?
        }
        (None, Some(id)) => {
            let i = exp
                .corpus
                .documents
                .iter()
                .position(|d| &d.doc_id == id)
                .ok_or_else(|| clara_core::Error::UnknownDoc(id.clone()))?;
            compress(id, &exp.docs[i], &p.compressor, &p.config, l)?
        }
        (None, None) => unreachable!("clap requires one of --query or --doc"),
    };
    let head = p.generator.get("head").context("checkpoint has no output head")?;
    for (slot, ids) in logit_lens(&memory, head, a.top)?.iter().enumerate() {
        println!("m{slot}: {}", exp.vocab.decode(ids).join(" "));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => 1,
            Failure::Check(_) => 3,
        };
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<clara_core::Error>() {
            return match e {
                clara_core::Error::Config(_) | clara_core::Error::Capacity { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::BuildIndex(a) => build_index(a),
        Command::TrainJoint(a) => train_joint(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::LogitLens(a) => lens(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
