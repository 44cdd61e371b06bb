//! Joint training of the query reasoner and generator over a frozen
//! compressed index, salient-compressor pretraining, and the contrastive
//! retriever baseline.

mod config;
mod index;
mod pipeline;

pub use config::{OptimizerKind, RunConfig, BASE_TOKEN_BUDGET};
pub use pipeline::Experiment;
pub use index::{encode_query, rank_documents, score_candidates, score_candidates_on_tape, CompressedIndex};

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Tape, Tensor, Var};
use crate::datagen::{SyntheticDocument, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{
    alignment_loss, compress_on_tape, decode_loss_on_tape, generate, total_pretrain_loss, Adam, ModelConfig,
    ModelParams, Optimizer, ParamSet, Sgd, Vocabulary, MEM, PARAPHRASE,
};
use crate::topk::{aggregate, st_topk, ScoreMatrix};

fn optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

fn mean<'t>(losses: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut total = it.next().ok_or(Error::Empty("batch"))?;
    for l in it {
        total = total.add(l)?;
    }
    Ok(total.scale(1.0 / n as f64))
}

/// One supervision pair for the compressor: an instruction and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainTask {
    pub doc: usize,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
}

/// QA and paraphrase tasks for every document, in corpus order. Questions
/// refer to the document's subject through the memory placeholder, so the
/// answer can only come from the compressed memory.
pub fn pretrain_tasks(docs: &[SyntheticDocument], vocab: &Vocabulary) -> Result<Vec<PretrainTask>> {
    let para = vocab.id(PARAPHRASE)?;
    let mem = vocab.id(MEM)?;
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        for qa in d.simple_qas.iter().chain(&d.complex_qas) {
            let mut instruction = vocab.encode(&qa.question)?;
            let subject = vocab.id(&d.subject)?;
            for t in instruction.iter_mut().filter(|t| **t == subject) {
                *t = mem;
            }
            out.push(PretrainTask {
                doc: i,
                instruction,
                target: vocab.encode(&qa.answer)?,
            });
        }
        out.push(PretrainTask {
            doc: i,
            instruction: vec![para],
            target: vocab.encode(&d.paraphrase)?,
        });
    }
    Ok(out)
}

/// Per-step pretraining record.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainStep {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub mse: f64,
}

/// Compressor and generator pretraining with `ce + λ·mse`.
pub struct Pretrainer {
    opt_c: Box<dyn Optimizer>,
    opt_g: Box<dyn Optimizer>,
    rng: ChaCha8Rng,
    pub lambda: f64,
    pub batch_size: usize,
    pub l: usize,
    /// Distractor documents appended after the target document for QA
    /// tasks, so the generator learns to answer from the leading memory.
    pub distractors: usize,
}

impl Pretrainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt_c: optimizer(config.optimizer, config.pretrain_lr),
            opt_g: optimizer(config.optimizer, config.pretrain_lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5c9),
            lambda: config.lambda,
            batch_size: config.pretrain_batch_size,
            l: config.memory_tokens(),
            distractors: config.pretrain_distractors,
        })
    }

    pub fn step(&mut self, params: &mut ModelParams, docs: &[Vec<usize>], tasks: &[PretrainTask]) -> Result<PretrainStep> {
        let batch: Vec<(&PretrainTask, Vec<usize>)> = tasks
            .choose_multiple(&mut self.rng, self.batch_size)
            .map(|t| {
                let mut ctx = vec![t.doc];
                if t.target.len() == 1 && self.distractors > 0 && self.rng.random_bool(0.5) {
                    let others: Vec<usize> = (0..docs.len()).filter(|&d| d != t.doc).collect();
                    ctx.extend(others.choose_multiple(&mut self.rng, self.distractors));
                }
                (t, ctx)
            })
            .collect();
        let out = pretrain_step(params, docs, &batch, self.lambda, self.l)?;
        self.opt_c.step(&mut params.compressor, &out.1)?;
        self.opt_g.step(&mut params.generator, &out.2)?;
        Ok(out.0)
    }
}

/// Loss and gradients for one pretraining batch; parameters are not
/// modified. Each task is paired with the documents forming its context;
/// the alignment term covers every compressed document.
pub fn pretrain_step(
    params: &ModelParams,
    docs: &[Vec<usize>],
    batch: &[(&PretrainTask, Vec<usize>)],
    lambda: f64,
    l: usize,
) -> Result<(PretrainStep, Vec<Tensor>, Vec<Tensor>)> {
    let tape = Tape::new();
    let c = params.compressor.bind(&tape, true);
    let g = params.generator.bind(&tape, true);
    let sep = 2;
    let (mut ces, mut mses) = (Vec::new(), Vec::new());
    for (t, context) in batch {
        let mut memories = Vec::with_capacity(context.len());
        for &i in context {
            let doc = docs.get(i).ok_or(Error::Index {
                op: "pretrain",
                index: i,
                bound: docs.len(),
            })?;
            let comp = compress_on_tape(&c, &params.config, doc, l)?;
            mses.push(alignment_loss(comp.doc_hidden, comp.memory)?);
            memories.push(comp.memory);
        }
        let memory = concat(&memories)?;
        ces.push(decode_loss_on_tape(&g, &params.config, Some(memory), &t.instruction, &t.target, sep)?);
    }
    let (ce, mse) = (mean(ces)?, mean(mses)?);
    let loss = total_pretrain_loss(ce, mse, lambda)?;
    let grads = tape.backward(loss);
    let record = PretrainStep {
        step: 0,
        loss: loss.value().item(),
        ce: ce.value().item(),
        mse: mse.value().item(),
    };
    Ok((record, c.gradients(&grads), g.gradients(&grads)))
}

/// Mean over documents of `‖mean(doc states) − mean(memory states)‖`.
pub fn alignment_distance(params: &ModelParams, docs: &[Vec<usize>], l: usize) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Empty("alignment_distance"));
    }
    let mut total = 0.0;
    for d in docs {
        let tape = Tape::new();
        let c = params.compressor.bind(&tape, false);
        let comp = compress_on_tape(&c, &params.config, d, l)?;
        total += alignment_loss(comp.doc_hidden, comp.memory)?.value().item().sqrt();
    }
    Ok(total / docs.len() as f64)
}

/// Fraction of tasks whose greedy answer given the gold document's memory
/// contains the target. Tasks with targets longer than `max_target` are skipped.
pub fn compression_accuracy(
    params: &ModelParams,
    docs: &[Vec<usize>],
    tasks: &[PretrainTask],
    l: usize,
    max_target: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for t in tasks.iter().filter(|t| t.target.len() <= max_target) {
        let mem = crate::model::compress("", &docs[t.doc], &params.compressor, &params.config, l)?;
        let out = generate(&params.generator, &params.config, Some(&mem.vectors), &t.instruction, 2, t.target.len())?;
        n += 1;
        if out == t.target {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("compression_accuracy"));
    }
    Ok(hits as f64 / n as f64)
}

/// A training example resolved to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub gold: Vec<String>,
    pub candidates: Vec<String>,
}

pub fn encode_examples(examples: &[TrainingExample], vocab: &Vocabulary) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(EncodedExample {
                query: vocab.encode(&e.query)?,
                answer: vocab.encode(&e.answer)?,
                gold: e.gold.clone(),
                candidates: e.candidates.clone(),
            })
        })
        .collect()
}

/// Outcome of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStep {
    pub loss: f64,
    /// Fraction of gold documents inside the selected top-k.
    pub recall: f64,
    /// Recall@1, @3 and @5 of the batch's rankings.
    pub recall_at: [f64; 3],
}

/// Gradients of a joint batch. There is no compressor entry: the compressor
/// never enters the tape.
pub struct JointGradients {
    pub query_reasoner: Vec<Tensor>,
    pub generator: Vec<Tensor>,
}

fn recall_of(ranked: &[usize], candidates: &[String], gold: &[String], k: usize) -> f64 {
    let hits = gold
        .iter()
        .filter(|g| ranked.iter().take(k).any(|&i| &candidates[i] == *g))
        .count();
    hits as f64 / gold.len().max(1) as f64
}

/// Loss of a joint batch: encode queries, score, select with the
/// straight-through top-k, aggregate, and decode the answer conditioned on
/// `[M⁽¹⁾ … M⁽ᵏ⁾ ; Q]`.
pub fn joint_loss(
    batch: &[EncodedExample],
    index: &CompressedIndex,
    params: &ModelParams,
    config: &RunConfig,
) -> Result<(JointStep, JointGradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("joint_step"));
    }
    let tape = Tape::new();
    let qr = params.query_reasoner.bind(&tape, true);
    let g = params.generator.bind(&tape, true);
    let (l, h) = (index.l(), index.h());
    let mut losses = Vec::with_capacity(batch.len());
    let (mut recall, mut recall_at) = (0.0, [0.0; 3]);
    for ex in batch {
        if config.k > ex.candidates.len() {
            return Err(Error::Capacity {
                k: config.k,
                available: ex.candidates.len(),
            });
        }
        let q = compress_on_tape(&qr, &params.config, &ex.query, l)?.memory;
        let (scores, memories) = score_candidates_on_tape(&tape, q, index, &ex.candidates)?;
        let sel = st_topk(&scores, config.k, config.temperature, config.epsilon)?;
        let picked = aggregate(&sel, memories)?.reshape(&[config.k * l, h])?;
        losses.push(decode_loss_on_tape(&g, &params.config, Some(picked), &ex.query, &ex.answer, 2)?);

        recall += recall_of(&sel.indices[0], &ex.candidates, &ex.gold, config.k);
        let ranked = index::ranking(scores.values().value().data(), &ex.candidates);
        for (slot, k) in [1, 3, 5].into_iter().enumerate() {
            recall_at[slot] += recall_of(&ranked, &ex.candidates, &ex.gold, k);
        }
    }
    let loss = mean(losses)?;
    let grads = tape.backward(loss);
    let n = batch.len() as f64;
    Ok((
        JointStep {
            loss: loss.value().item(),
            recall: recall / n,
            recall_at: recall_at.map(|r| r / n),
        },
        JointGradients {
            query_reasoner: qr.gradients(&grads),
            generator: g.gradients(&grads),
        },
    ))
}

/// Owns the optimizer state of joint training.
pub struct JointTrainer {
    opt_qr: Box<dyn Optimizer>,
    opt_g: Box<dyn Optimizer>,
    rng: ChaCha8Rng,
    /// When false the query reasoner is held fixed (ablation).
    pub train_query_reasoner: bool,
    pub config: RunConfig,
}

impl JointTrainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt_qr: optimizer(config.optimizer, config.joint_lr),
            opt_g: optimizer(config.optimizer, config.generator_lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x701),
            train_query_reasoner: true,
            config: config.clone(),
        })
    }

    /// One update on `batch`; the index and the compressor are untouched.
    pub fn joint_step(
        &mut self,
        batch: &[EncodedExample],
        index: &CompressedIndex,
        params: &mut ModelParams,
    ) -> Result<JointStep> {
        let (out, grads) = joint_loss(batch, index, params, &self.config)?;
        if self.train_query_reasoner {
            self.opt_qr.step(&mut params.query_reasoner, &grads.query_reasoner)?;
        }
        self.opt_g.step(&mut params.generator, &grads.generator)?;
        Ok(out)
    }

    /// Samples a batch and steps.
    pub fn step(
        &mut self,
        examples: &[EncodedExample],
        index: &CompressedIndex,
        params: &mut ModelParams,
    ) -> Result<JointStep> {
        let batch: Vec<EncodedExample> = examples
            .choose_multiple(&mut self.rng, self.config.batch_size)
            .cloned()
            .collect();
        self.joint_step(&batch, index, params)
    }
}

/// Recall@1/3/5 of `rank_documents` under the current query reasoner.
pub fn evaluate_retrieval(
    examples: &[EncodedExample],
    index: &CompressedIndex,
    params: &ModelParams,
) -> Result<[f64; 3]> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluate_retrieval"));
    }
    let mut out = [0.0; 3];
    for ex in examples {
        let q = encode_query(&ex.query, &params.query_reasoner, &params.config, index.l())?;
        let ranked = rank_documents(&q, index, &ex.candidates)?;
        for (slot, k) in [1, 3, 5].into_iter().enumerate() {
            let hits = ex.gold.iter().filter(|g| ranked.iter().take(k).any(|r| r == *g)).count();
            out[slot] += hits as f64 / ex.gold.len().max(1) as f64;
        }
    }
    Ok(out.map(|r| r / examples.len() as f64))
}

/// Greedy answers for each example from its top-k documents.
pub fn answer_examples(
    examples: &[EncodedExample],
    index: &CompressedIndex,
    params: &ModelParams,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .map(|ex| {
            let q = encode_query(&ex.query, &params.query_reasoner, &params.config, index.l())?;
            let ranked = rank_documents(&q, index, &ex.candidates)?;
            let rows: Vec<&Tensor> = ranked
                .iter()
                .take(k)
                .map(|id| index.get(id).map(|m| &m.vectors))
                .collect::<Result<_>>()?;
            let mut data = Vec::new();
            for r in &rows {
                data.extend_from_slice(r.data());
            }
            let memory = Tensor::matrix(rows.len() * index.l(), index.h(), data)?;
            generate(&params.generator, &params.config, Some(&memory), &ex.query, 2, ex.answer.len())
        })
        .collect()
}

/// `−log(exp(s⁺/τ) / Σ exp(s/τ))` with the positive score first.
pub fn info_nce<'t>(scores: &ScoreMatrix<'t>, temperature: f64) -> Result<Var<'t>> {
    scores.values().scale(1.0 / temperature).cross_entropy(&[0])
}

/// A labeled retrieval pair for the supervised baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub query: Vec<usize>,
    pub positive: String,
    pub negatives: Vec<String>,
}

impl ContrastivePair {
    pub fn from_example(ex: &EncodedExample) -> Result<Self> {
        let positive = ex.gold.first().ok_or(Error::Empty("gold"))?.clone();
        Ok(Self {
            query: ex.query.clone(),
            negatives: ex.candidates.iter().filter(|c| **c != positive).cloned().collect(),
            positive,
        })
    }
}

/// Trains the query reasoner with InfoNCE over cosine scores; returns the
/// per-step losses.
pub fn contrastive_pretrain(
    pairs: &[ContrastivePair],
    index: &CompressedIndex,
    query_reasoner: &mut ParamSet,
    model: &ModelConfig,
    config: &RunConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("contrastive pairs"));
    }
    for p in pairs {
        if p.negatives.is_empty() {
            return Err(Error::Empty("negative set"));
        }
        if p.negatives.contains(&p.positive) {
            return Err(Error::Config(format!("positive `{}` also listed as negative", p.positive)));
        }
    }
    let mut opt = optimizer(config.optimizer, config.joint_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0e);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<&ContrastivePair> = pairs.choose_multiple(&mut rng, config.batch_size).collect();
        let tape = Tape::new();
        let qr = query_reasoner.bind(&tape, true);
        let mut terms = Vec::with_capacity(batch.len());
        for p in &batch {
            let q = compress_on_tape(&qr, model, &p.query, index.l())?.memory;
            let mut ids = vec![p.positive.clone()];
            ids.extend(p.negatives.iter().cloned());
            let (scores, _) = score_candidates_on_tape(&tape, q, index, &ids)?;
            terms.push(info_nce(&scores, config.temperature)?);
        }
        let loss = mean(terms)?;
        let grads = qr.gradients(&tape.backward(loss));
        losses.push(loss.value().item());
        drop(qr);
        opt.step(query_reasoner, &grads)?;
    }
    Ok(losses)
}

/// Writes the per-step metrics header.
pub fn write_metrics_header<W: Write>(out: &mut W) -> std::io::Result<()> {
    writeln!(out, "step,loss,recall@1,recall@3,recall@5")
}

pub fn write_metrics_row<W: Write>(out: &mut W, step: usize, s: &JointStep) -> std::io::Result<()> {
    writeln!(
        out,
        "{step},{:.6},{:.6},{:.6},{:.6}",
        s.loss, s.recall_at[0], s.recall_at[1], s.recall_at[2]
    )
}

/// Splits examples into two seeded halves of the given fraction.
pub fn split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((v.len() as f64) * fraction).round() as usize;
    let rest = v.split_off(cut.min(v.len()));
    (v, rest)
}
